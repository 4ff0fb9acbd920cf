//! Result tables and training-curve plots from run records.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{DaitError, Result};
use crate::pipeline::{read_summary, RunRecord, SUMMARY_FILE};
use crate::plot;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub dataset: String,
    pub data_ratio: f64,
    pub method: String,
    pub seeds: usize,
    pub mean_top1: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std_top1: f64,
    /// Mean top-1 minus the baseline's in the same (dataset, ratio) group.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub baseline: String,
    pub rows: Vec<ReportRow>,
}

impl Report {
    /// The delta column appears only when some group compares a method
    /// against the baseline.
    pub fn has_delta(&self) -> bool {
        self.rows.iter().any(|r| r.delta.is_some() && r.method != self.baseline)
    }

    pub fn to_markdown(&self) -> String {
        let delta = self.has_delta();
        let mut s = String::from("| dataset | ratio | method | seeds | top-1 (%) |");
        s.push_str(if delta { format!(" Δ vs {} |\n", self.baseline) } else { "\n".into() }.as_str());
        s.push_str("|---|---|---|---|---|");
        s.push_str(if delta { "---|\n" } else { "\n" });
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {:.2} ± {:.2} |",
                r.dataset,
                r.data_ratio,
                r.method,
                r.seeds,
                100.0 * r.mean_top1,
                100.0 * r.std_top1
            ));
            if delta {
                match r.delta {
                    Some(d) if r.method != self.baseline => s.push_str(&format!(" {:+.2} |", 100.0 * d)),
                    _ => s.push_str(" |"),
                }
            }
            s.push('\n');
        }
        s
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Aggregate records over seeds, grouped by (dataset, ratio, method).
pub fn build_report(records: &[RunRecord], baseline: &str) -> Report {
    let mut groups: BTreeMap<(String, u64, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry((r.dataset.clone(), r.data_ratio.to_bits(), r.method.clone())).or_default().push(r.final_top1);
    }
    let mut rows: Vec<ReportRow> = groups
        .into_iter()
        .map(|((dataset, ratio, method), accs)| {
            let (mean_top1, std_top1) = mean_std(&accs);
            ReportRow { dataset, data_ratio: f64::from_bits(ratio), method, seeds: accs.len(), mean_top1, std_top1, delta: None }
        })
        .collect();
    let base: BTreeMap<(String, u64), f64> = rows
        .iter()
        .filter(|r| r.method == baseline)
        .map(|r| ((r.dataset.clone(), r.data_ratio.to_bits()), r.mean_top1))
        .collect();
    for r in &mut rows {
        r.delta = base.get(&(r.dataset.clone(), r.data_ratio.to_bits())).map(|b| r.mean_top1 - b);
    }
    rows.sort_by(|a, b| {
        (&a.dataset, a.data_ratio, a.method != baseline, &a.method)
            .partial_cmp(&(&b.dataset, b.data_ratio, b.method != baseline, &b.method))
            .expect("finite ratios")
    });
    Report { baseline: baseline.to_string(), rows }
}

/// Find every `summary.json` below `roots`.
pub fn collect_records(roots: &[PathBuf]) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    let mut stack: Vec<PathBuf> = roots.to_vec();
    while let Some(p) = stack.pop() {
        if p.is_file() {
            out.push(read_summary(&p)?);
        } else if p.is_dir() {
            let summary = p.join(SUMMARY_FILE);
            if summary.is_file() {
                out.push(read_summary(&summary)?);
            }
            let mut children: Vec<PathBuf> = fs::read_dir(&p)
                .map_err(|e| DaitError::io(&p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|c| c.is_dir())
                .collect();
            children.sort();
            stack.extend(children.into_iter().rev());
        } else {
            return Err(DaitError::Ingest(format!("{} does not exist", p.display())));
        }
    }
    Ok(out)
}

/// Training curves of one run: `losses.png` (total, cls, sia, ira, distill),
/// `lambda.png` and `accuracy.png` (train, test).
pub fn plot_record(record: &RunRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DaitError::io(dir, e))?;
    let col = |f: &dyn Fn(&crate::pipeline::EpochRow) -> Option<f64>| -> Vec<f64> {
        record.epochs.iter().map(|r| f(r).unwrap_or(f64::NAN)).collect()
    };
    let losses = vec![
        col(&|r| Some(r.loss_total)),
        col(&|r| Some(r.loss_cls)),
        col(&|r| r.loss_sia),
        col(&|r| r.loss_ira),
        col(&|r| r.loss_distill),
    ];
    plot::line_chart(&dir.join("losses.png"), &losses)?;
    plot::line_chart(&dir.join("lambda.png"), &[col(&|r| r.lambda)])?;
    plot::line_chart(&dir.join("accuracy.png"), &[col(&|r| Some(r.train_top1)), col(&|r| Some(r.test_top1))])
}

/// Write `report.md`, `report.json` and per-run plots into `out`.
pub fn emit_report(records: &[RunRecord], baseline: &str, out: &Path) -> Result<Report> {
    fs::create_dir_all(out).map_err(|e| DaitError::io(out, e))?;
    let report = build_report(records, baseline);
    let md = out.join("report.md");
    fs::write(&md, report.to_markdown()).map_err(|e| DaitError::io(&md, e))?;
    let js = out.join("report.json");
    fs::write(&js, serde_json::to_string_pretty(&report).expect("report serializes")).map_err(|e| DaitError::io(&js, e))?;
    for r in records {
        let name = format!("{}-{}-r{}-s{}", r.method, r.dataset, r.data_ratio, r.seed);
        plot_record(r, &out.join("plots").join(name))?;
    }
    Ok(report)
}

//! Acceptance suite: runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dait::config::{parse_config, RunConfig};
use dait::dait_core::encoders::{GROUP_F_VLM, GROUP_INTERMEDIATE, GROUP_VLM};
use dait::pipeline::{self, RunRecord};
use dait::report::emit_report;
use tempfile::TempDir;

const SEEDS: [u64; 3] = [0, 1, 2];
const RATIOS: [f64; 2] = [0.3, 1.0];

fn trend_config(extra: &[String]) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk_trend.toml");
    parse_config(Some(&path), extra).expect("trend config resolves")
}

fn toml_path(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

fn run_in(dir: &Path, name: &str, sets: &[String]) -> RunRecord {
    let mut sets = sets.to_vec();
    sets.push(format!("out_dir={}", toml_path(&dir.join(name))));
    pipeline::run(&trend_config(&sets)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn within(name: &str, start: Instant, limit: Duration) -> String {
    let took = start.elapsed();
    assert!(took < limit, "{name} took {took:?}, limit {limit:?}");
    format!("{:.2}s", took.as_secs_f64())
}

fn timed(f: fn(), limit: Duration) -> String {
    let t = Instant::now();
    f();
    within("suite", t, limit)
}

fn freeze_contract(dir: &Path) -> String {
    let s1 = run_in(dir, "freeze_s1", &["epochs=5".into()]);
    let s2 = run_in(
        dir,
        "freeze_s2",
        &[
            "epochs=5".into(),
            "stage=\"stage2\"".into(),
            format!("stage1_checkpoint={}", toml_path(&s1.checkpoint)),
        ],
    );
    let check = |rec: &RunRecord, groups: &[&str]| {
        for g in groups {
            let f = rec.frozen.iter().find(|x| x.name == *g).unwrap_or_else(|| panic!("{} did not freeze {g}", rec.method));
            assert_eq!(f.before, f.after, "{} changed {g}", rec.method);
        }
    };
    check(&s1, &[GROUP_VLM, GROUP_F_VLM]);
    check(&s2, &[GROUP_VLM, GROUP_F_VLM, GROUP_INTERMEDIATE]);
    for g in [GROUP_VLM, GROUP_F_VLM] {
        let a = s1.frozen.iter().find(|x| x.name == g).unwrap().after;
        let b = s2.frozen.iter().find(|x| x.name == g).unwrap().before;
        assert_eq!(a, b, "{g} differs between the stage-1 run and the stage-2 reload");
    }
    let sums: Vec<String> = s2.frozen.iter().map(|g| format!("{}={:016x}", g.name, g.after)).collect();
    sums.join(" ")
}

struct Trend {
    records: Vec<RunRecord>,
    stage1: Vec<RunRecord>,
}

fn mean_of(records: &[RunRecord], method: &str, ratio: f64) -> f64 {
    let v: Vec<f64> = records.iter().filter(|r| r.method == method && r.data_ratio == ratio).map(|r| r.final_top1).collect();
    assert_eq!(v.len(), SEEDS.len(), "{method} at {ratio}: {} runs", v.len());
    v.iter().sum::<f64>() / v.len() as f64
}

fn trend_runs(dir: &Path) -> Trend {
    let mut records = Vec::new();
    let mut stage1 = Vec::new();
    for &ratio in &RATIOS {
        for &seed in &SEEDS {
            let base = vec![format!("seed={seed}"), format!("data.ratio={ratio}")];
            let tag = format!("r{ratio}_s{seed}");
            let s1 = run_in(dir, &format!("{tag}_stage1"), &base);
            let mut s2 = base.clone();
            s2.push("stage=\"stage2\"".into());
            s2.push("mode=\"feature\"".into());
            s2.push(format!("stage1_checkpoint={}", toml_path(&s1.checkpoint)));
            records.push(run_in(dir, &format!("{tag}_dait_f"), &s2));
            let mut nokd = base.clone();
            nokd.push("stage=\"baseline_nokd\"".into());
            records.push(run_in(dir, &format!("{tag}_nokd"), &nokd));
            stage1.push(s1);
        }
    }
    Trend { records, stage1 }
}

fn desk_trend(t: &Trend, started: Instant) -> String {
    let worst = t.stage1.iter().map(|r| r.final_top1).fold(f64::INFINITY, f64::min);
    let mut lines = vec![format!("stage-1 min top-1 {worst:.4}")];
    let mut gaps = Vec::new();
    for &ratio in &RATIOS {
        let (f, n) = (mean_of(&t.records, "dait_f", ratio), mean_of(&t.records, "nokd", ratio));
        lines.push(format!("ratio {ratio}: dait_f {f:.4} nokd {n:.4}"));
        gaps.push((ratio, f, n));
    }
    let took = within("criterion 7", started, Duration::from_secs(15 * 60));
    lines.push(took);
    let summary = lines.join("; ");
    assert!(worst >= 0.9, "(a) stage-1 top-1 below 0.9: {summary}");
    for &(ratio, f, n) in &gaps {
        assert!(f >= n, "(b) dait_f below nokd at ratio {ratio}: {summary}");
    }
    let gap = |r: f64| gaps.iter().find(|g| g.0 == r).map(|g| g.1 - g.2).unwrap();
    assert!(gap(0.3) >= gap(1.0), "(c) low-data gap smaller than full-data gap: {summary}");
    summary
}

fn determinism(dir: &Path, first: &RunRecord) -> String {
    let again = run_in(
        dir,
        "determinism_rerun",
        &[format!("seed={}", first.seed), format!("data.ratio={}", first.data_ratio), "determinism=\"strict\"".into()],
    );
    assert_eq!(again.epochs.len(), first.epochs.len());
    for (a, b) in first.epochs.iter().zip(&again.epochs) {
        assert_eq!(a, b, "epoch {} differs", a.epoch);
    }
    assert_eq!(first.final_top1.to_bits(), again.final_top1.to_bits());
    format!("{} epochs identical, top-1 {}", again.epochs.len(), again.final_top1)
}

fn reporting(dir: &Path, records: &[RunRecord]) -> String {
    let report = emit_report(records, "nokd", &dir.join("report")).expect("report");
    let mut checked = 0;
    for &ratio in &RATIOS {
        let row = report.rows.iter().find(|r| r.method == "dait_f" && r.data_ratio == ratio).expect("dait_f row");
        let want = mean_of(records, "dait_f", ratio) - mean_of(records, "nokd", ratio);
        assert_eq!(row.delta, Some(want), "delta at ratio {ratio}");
        let base = report.rows.iter().find(|r| r.method == "nokd" && r.data_ratio == ratio).expect("nokd row");
        assert_eq!(base.delta, Some(0.0));
        checked += 2;
    }
    format!("{checked} delta cells exact")
}

fn main() {
    let dir = TempDir::new().expect("temp dir");
    let root: PathBuf = dir.path().to_path_buf();
    let mut failed = 0;
    let mut report = |n: usize, name: &str, result: std::thread::Result<String>| match result {
        Ok(detail) => println!("PASS criterion {n}: {name} ({detail})"),
        Err(e) => {
            failed += 1;
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            println!("FAIL criterion {n}: {name}: {msg}");
        }
    };
    let attempt = |f: &dyn Fn() -> String| catch_unwind(AssertUnwindSafe(f));

    report(1, "loss oracles", attempt(&|| timed(oracles::criteria::loss_oracles, Duration::from_secs(10))));
    report(2, "gradients", attempt(&|| timed(oracles::criteria::gradients, Duration::from_secs(30))));
    report(3, "schedule", attempt(&|| timed(oracles::criteria::schedule, Duration::from_secs(1))));
    report(4, "weight conservation", attempt(&|| timed(oracles::criteria::weight_conservation, Duration::from_secs(60))));
    report(5, "freeze contract", attempt(&|| freeze_contract(&root)));
    report(6, "cka", attempt(&|| timed(oracles::criteria::cka, Duration::from_secs(60))));

    let started = Instant::now();
    let trend = catch_unwind(AssertUnwindSafe(|| trend_runs(&root)));
    match &trend {
        Ok(t) => {
            report(7, "desk-scale trend", attempt(&|| desk_trend(t, started)));
            let first = t.stage1.iter().find(|r| r.seed == 0 && r.data_ratio == 1.0).expect("seed 0 stage-1 run");
            report(8, "determinism", attempt(&|| determinism(&root, first)));
            report(9, "reporting", attempt(&|| reporting(&root, &t.records)));
        }
        Err(e) => {
            let msg = e.downcast_ref::<String>().cloned().unwrap_or_default();
            for (n, name) in [(7, "desk-scale trend"), (8, "determinism"), (9, "reporting")] {
                println!("FAIL criterion {n}: {name}: runs did not complete: {msg}");
                failed += 1;
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all 9 criteria passed");
}

//! Command-line interface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dait_core::analysis::{linear_cka, similarity_matrix};
use dait_core::data::{generate_synthetic, Dataset, SyntheticConfig};
use serde::Serialize;

use crate::config::{self, RunConfig};
use crate::error::{DaitError, Result};
use crate::pipeline::{self, FeatureRole, SweepAxis};
use crate::{checkpoint, io, plot, report};

#[derive(Debug, Parser)]
#[command(name = "dait", version, about = "Two-stage VLM → intermediate → student distillation")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DeterminismArg {
    Strict,
    Fast,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML config file; omitted keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Override a config key, e.g. `--set schedule.k=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// Run directory (config key `out_dir`).
    #[arg(long, env = "DAIT_OUT")]
    pub out: Option<PathBuf>,

    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long, value_enum)]
    pub determinism: Option<DeterminismArg>,
}

impl RunArgs {
    /// Resolve the config; flag values win over `--set`, which wins over the file.
    pub fn resolve(&self, extra: &[String]) -> Result<RunConfig> {
        let mut overrides = self.set.clone();
        overrides.extend_from_slice(extra);
        if let Some(out) = &self.out {
            overrides.push(format!("out_dir={}", toml::Value::String(out.display().to_string())));
        }
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(d) = self.determinism {
            let v = match d {
                DeterminismArg::Strict => "strict",
                DeterminismArg::Fast => "fast",
            };
            overrides.push(format!("determinism=\"{v}\""));
        }
        config::parse_config(self.config.as_deref(), &overrides)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Feature,
    Logit,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BaselineArg {
    Nokd,
    Direct,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RoleArg {
    Vlm,
    Intermediate,
    Student,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the VLM projection head and save it as a checkpoint.
    FitProjection(RunArgs),
    /// Train the intermediate teacher against the frozen VLM.
    Stage1(RunArgs),
    /// Distil a stage-1 teacher into the student.
    Stage2 {
        #[command(flatten)]
        run: RunArgs,
        /// Stage-1 checkpoint directory (config key `stage1_checkpoint`).
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Train a baseline student.
    Baseline {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "nokd")]
        kind: BaselineArg,
    },
    /// Top-1 accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image-folder root whose test split is evaluated instead of the
        /// checkpoint's own dataset.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run a grid of config variants, each in its own directory.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Grid axis `key=v1,v2,…`. Repeatable; axes combine as a product.
        #[arg(long = "grid", value_name = "KEY=V1,V2")]
        grid: Vec<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Train a fresh stage-1 teacher for every stage-2 variant.
        #[arg(long)]
        chain_stage1: bool,
    },
    /// Dump embeddings of one network as CSV (`f0,…,label`).
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        role: RoleArg,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        output: PathBuf,
    },
    /// Linear CKA between two feature dumps of the same examples.
    AnalyzeCka {
        x: PathBuf,
        y: PathBuf,
    },
    /// Class-mean cosine similarity matrix of a feature dump.
    AnalyzeSimmat {
        dump: PathBuf,
        /// Directory for `similarity.csv` and `similarity.png`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic image-folder dataset.
    MakeFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Aggregate run summaries into a table and plots.
    Report {
        /// Run directories or summary files; searched recursively.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "nokd")]
        baseline: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
}

fn split_of(path: &std::path::Path, split: SplitArg) -> Result<Dataset> {
    let manifest = checkpoint::read_manifest(path)?;
    let data = pipeline::load_data(&manifest.config)?;
    Ok(match split {
        SplitArg::Train => data.train,
        SplitArg::Test => data.test,
    })
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FitProjection(run) => {
            let cfg = run.resolve(&[])?;
            config::write_snapshot(&cfg, &cfg.out_dir)?;
            let data = pipeline::load_data(&cfg)?;
            let (_, report) = pipeline::fit_projection(&cfg, &data, &cfg.out_dir)?;
            print_json(&report);
        }
        Command::Stage1(run) => print_json(&pipeline::run(&run.resolve(&["stage=\"stage1\"".into()])?)?),
        Command::Stage2 { run, stage1, mode } => {
            let mut extra = vec!["stage=\"stage2\"".to_string()];
            if let Some(p) = stage1 {
                extra.push(format!("stage1_checkpoint={}", toml::Value::String(p.display().to_string())));
            }
            if let Some(m) = mode {
                extra.push(format!("mode=\"{}\"", if matches!(m, ModeArg::Feature) { "feature" } else { "logit" }));
            }
            print_json(&pipeline::run(&run.resolve(&extra)?)?);
        }
        Command::Baseline { run, kind } => {
            let stage = match kind {
                BaselineArg::Nokd => "baseline_nokd",
                BaselineArg::Direct => "baseline_direct",
            };
            print_json(&pipeline::run(&run.resolve(&[format!("stage=\"{stage}\"")])?)?);
        }
        Command::Eval { checkpoint, data } => {
            let report = match data {
                Some(root) => pipeline::evaluate_on(&checkpoint, &io::load_image_folder(&root)?.1)?,
                None => pipeline::evaluate(&checkpoint)?,
            };
            print_json(&report);
        }
        Command::Sweep { run, grid, jobs, chain_stage1 } => {
            let base = run.resolve(&[])?;
            let axes = grid.iter().map(|g| SweepAxis::parse(g)).collect::<Result<Vec<_>>>()?;
            let outcomes = pipeline::sweep(&base, &axes, jobs, chain_stage1)?;
            for o in &outcomes {
                match (&o.record, &o.error) {
                    (Some(r), _) => println!("{:03} ok     top1={:.4} {}", o.index, r.final_top1, o.overrides.join(" ")),
                    (None, e) => println!("{:03} failed {} ({})", o.index, o.overrides.join(" "), e.as_deref().unwrap_or("")),
                }
            }
        }
        Command::ExportFeatures { checkpoint, role, split, output } => {
            let data = split_of(&checkpoint, split)?;
            let role = match role {
                RoleArg::Vlm => FeatureRole::Vlm,
                RoleArg::Intermediate => FeatureRole::Intermediate,
                RoleArg::Student => FeatureRole::Student,
            };
            let dump = pipeline::export_features(&checkpoint, role, &data)?;
            io::write_features(&output, &dump)?;
            println!("wrote {} rows x {} features to {}", dump.features.rows(), dump.features.cols(), output.display());
        }
        Command::AnalyzeCka { x, y } => {
            let (a, b) = (io::read_features(&x)?, io::read_features(&y)?);
            if a.labels != b.labels {
                return Err(DaitError::Ingest("feature dumps list different examples (labels differ)".into()));
            }
            println!("{:.6}", linear_cka(&a.features, &b.features)?);
        }
        Command::AnalyzeSimmat { dump, out } => {
            let d = io::read_features(&dump)?;
            let m = similarity_matrix(&d, d.num_classes())?;
            std::fs::create_dir_all(&out).map_err(|e| DaitError::io(&out, e))?;
            let names: Vec<String> = (0..m.rows()).map(|i| i.to_string()).collect();
            io::write_matrix(&out.join("similarity.csv"), &m, &names)?;
            plot::heatmap(&out.join("similarity.png"), &m)?;
            println!("wrote {}", out.join("similarity.csv").display());
        }
        Command::MakeFixture { out, classes, per_class, side, seed } => {
            let cfg = SyntheticConfig { num_classes: classes, per_class, image_side: side, seed, ..Default::default() };
            let (train, test) = generate_synthetic(&cfg)?;
            io::write_image_folder(&out, &train, &test)?;
            println!(
                "wrote {} train / {} test images to {} (pixel = 0.5 + v/8; use data.mean = [0.5,0.5,0.5], data.std = [0.125,0.125,0.125])",
                train.len(),
                test.len(),
                out.display()
            );
        }
        Command::Report { runs, baseline, out } => {
            let records = report::collect_records(&runs)?;
            if records.is_empty() {
                return Err(DaitError::Ingest("no run summaries found".into()));
            }
            let r = report::emit_report(&records, &baseline, &out)?;
            print!("{}", r.to_markdown());
        }
    }
    Ok(())
}

//! Declarative run configuration: TOML file + dotted-key overrides.

use std::path::{Path, PathBuf};

use dait_core::data::{AugmentOp, AugmentPolicy, SyntheticConfig};
use dait_core::encoders::{ConvStackConfig, ProjectionFitConfig};
use dait_core::nn::{AdamWConfig, StepDecay};
use dait_core::{KlOrder, ScheduleParams, Temperature};
use serde::{Deserialize, Serialize};

use crate::error::{DaitError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
    BaselineNokd,
    BaselineDirect,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::BaselineNokd => "baseline_nokd",
            Stage::BaselineDirect => "baseline_direct",
        }
    }
}

/// Stage-2 transfer mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Spatial feature-map alignment (DAIT-F).
    Feature,
    /// Tempered logit KL (DAIT-L).
    Logit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Determinism {
    Strict,
    Fast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointSelect {
    Best,
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlOrderKey {
    AsPrinted,
    TeacherFirst,
}

impl From<KlOrderKey> for KlOrder {
    fn from(k: KlOrderKey) -> Self {
        match k {
            KlOrderKey::AsPrinted => KlOrder::AsPrinted,
            KlOrderKey::TeacherFirst => KlOrder::TeacherFirst,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub name: String,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay_interval: usize,
    pub lr_decay_gamma: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { name: "adamw".into(), lr: 1e-4, weight_decay: 1e-4, lr_decay_interval: 30, lr_decay_gamma: 0.1 }
    }
}

impl OptimizerConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..Default::default() }
    }

    pub fn decay(&self) -> StepDecay {
        StepDecay { base_lr: self.lr, gamma: self.lr_decay_gamma, interval: self.lr_decay_interval }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Absent means `1 / epochs` (ramp from `b` to 1 over the run).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    pub b: f64,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { k: None, b: 0.0, clamp_lo: 0.0, clamp_hi: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub kl_order: KlOrderKey,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: Temperature::DEFAULT, kl_order: KlOrderKey::AsPrinted }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Folder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentPreset {
    /// Random resized crop, flip, jitter, resize, normalise.
    Training,
    /// Resize and normalise only.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_side: usize,
    pub separation: f64,
    pub noise: f64,
    pub distractor: f64,
    pub seed: u64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let d = SyntheticConfig::default();
        Self {
            num_classes: d.num_classes,
            per_class: d.per_class,
            image_side: d.image_side,
            separation: d.separation,
            noise: d.noise,
            distractor: d.distractor,
            seed: d.seed,
        }
    }
}

impl SyntheticSection {
    pub fn to_core(&self) -> SyntheticConfig {
        SyntheticConfig {
            num_classes: self.num_classes,
            per_class: self.per_class,
            image_side: self.image_side,
            separation: self.separation,
            noise: self.noise,
            distractor: self.distractor,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Image-folder root (`train/<class>/*`, `test/<class>/*`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Fraction of each training class kept, in (0, 1].
    pub ratio: f64,
    pub subsample_seed: u64,
    /// Side length images are resized to.
    pub image_side: usize,
    pub prompt_template: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub augment_stage1: AugmentPreset,
    pub augment_stage2: AugmentPreset,
    pub synthetic: SyntheticSection,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            root: None,
            ratio: 1.0,
            subsample_seed: 0,
            image_side: 32,
            prompt_template: "a photo of a {}".into(),
            mean: vec![0.0, 0.0, 0.0],
            std: vec![1.0, 1.0, 1.0],
            augment_stage1: AugmentPreset::Training,
            augment_stage2: AugmentPreset::Plain,
            synthetic: SyntheticSection::default(),
        }
    }
}

impl DataConfig {
    pub fn policy(&self, preset: AugmentPreset, seed: u64) -> AugmentPolicy {
        match preset {
            AugmentPreset::Training => AugmentPolicy::training(self.image_side, self.mean.clone(), self.std.clone(), seed),
            AugmentPreset::Plain => AugmentPolicy::plain(self.image_side, self.mean.clone(), self.std.clone(), seed),
        }
    }

    /// Evaluation always uses the plain policy.
    pub fn eval_policy(&self) -> AugmentPolicy {
        self.policy(AugmentPreset::Plain, 0)
    }

    pub fn crop_scale(policy: &AugmentPolicy) -> Option<(f64, f64)> {
        policy.ops.iter().find_map(|op| match op {
            AugmentOp::RandomResizedCrop { scale, .. } => Some(*scale),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKindKey {
    Toy,
    ExternalAdapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VlmImageSection {
    pub kind: EncoderKindKey,
    pub seed: u64,
    pub raw_dim: usize,
    /// Adapter name when `kind = "external_adapter"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapter: Option<String>,
}

impl Default for VlmImageSection {
    fn default() -> Self {
        Self { kind: EncoderKindKey::Toy, seed: 1001, raw_dim: 128, adapter: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VlmTextSection {
    pub kind: EncoderKindKey,
    pub seed: u64,
    /// Pairwise cosine between distinct class prompts (toy only).
    pub separation: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapter: Option<String>,
}

impl Default for VlmTextSection {
    fn default() -> Self {
        Self { kind: EncoderKindKey::Toy, seed: 1002, separation: 0.2, adapter: None }
    }
}

/// Has no blanket default: the intermediate and student sections differ, and
/// missing keys are filled from [`RunConfig::default`] during resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSection {
    pub kind: EncoderKindKey,
    /// Absent means derived from the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl ConvSection {
    pub fn stack(&self, in_channels: usize) -> ConvStackConfig {
        ConvStackConfig { in_channels, channels: self.channels.clone(), strides: self.strides.clone() }
    }
}

fn default_intermediate() -> ConvSection {
    ConvSection { kind: EncoderKindKey::Toy, seed: None, channels: vec![16, 32, 32], strides: vec![2, 2, 1] }
}

fn default_student() -> ConvSection {
    ConvSection { kind: EncoderKindKey::Toy, seed: None, channels: vec![8, 16], strides: vec![2, 2] }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionSection {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub logit_scale: f64,
    pub seed: u64,
    /// Previously fitted head; fitted inline when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for ProjectionSection {
    fn default() -> Self {
        let d = ProjectionFitConfig::default();
        Self { hidden: d.hidden, epochs: d.epochs, lr: d.lr, logit_scale: d.logit_scale, seed: 1003, checkpoint: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodersConfig {
    /// Projected embedding width `D`.
    pub embed_dim: usize,
    pub vlm_image: VlmImageSection,
    pub vlm_text: VlmTextSection,
    pub intermediate: ConvSection,
    pub student: ConvSection,
    pub projection: ProjectionSection,
}

impl Default for EncodersConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            vlm_image: VlmImageSection::default(),
            vlm_text: VlmTextSection::default(),
            intermediate: default_intermediate(),
            student: default_student(),
            projection: ProjectionSection::default(),
        }
    }
}

impl EncodersConfig {
    pub fn projection_fit(&self) -> ProjectionFitConfig {
        ProjectionFitConfig {
            epochs: self.projection.epochs,
            hidden: self.projection.hidden,
            out_dim: self.embed_dim,
            lr: self.projection.lr,
            logit_scale: self.projection.logit_scale,
            seed: self.projection.seed,
        }
    }
}

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub stage: Stage,
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub determinism: Determinism,
    pub checkpoint_select: CheckpointSelect,
    pub out_dir: PathBuf,
    /// Required for stage 2.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage1_checkpoint: Option<PathBuf>,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    /// Replaces `schedule` for every stage after stage 1 when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage2_schedule: Option<ScheduleConfig>,
    pub losses: LossConfig,
    pub data: DataConfig,
    pub encoders: EncodersConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Stage1,
            mode: Mode::Feature,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            determinism: Determinism::Strict,
            checkpoint_select: CheckpointSelect::Best,
            out_dir: PathBuf::from("runs"),
            stage1_checkpoint: None,
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            stage2_schedule: None,
            losses: LossConfig::default(),
            data: DataConfig::default(),
            encoders: EncodersConfig::default(),
        }
    }
}

impl RunConfig {
    /// Schedule section in force for this run's stage.
    pub fn schedule_section(&self) -> &ScheduleConfig {
        match (&self.stage2_schedule, self.stage) {
            (Some(s), stage) if stage != Stage::Stage1 => s,
            _ => &self.schedule,
        }
    }

    pub fn schedule(&self) -> ScheduleParams {
        let s = self.schedule_section();
        ScheduleParams {
            k: s.k.unwrap_or(1.0 / self.epochs.max(1) as f64),
            b: s.b,
            clamp_lo: s.clamp_lo,
            clamp_hi: s.clamp_hi,
        }
    }

    pub fn temperature(&self) -> Result<Temperature> {
        Ok(Temperature::new(self.losses.temperature)?)
    }

    pub fn kl_order(&self) -> KlOrder {
        self.losses.kl_order.into()
    }

    pub fn intermediate_seed(&self) -> u64 {
        self.encoders.intermediate.seed.unwrap_or(self.seed.wrapping_mul(31).wrapping_add(11))
    }

    pub fn student_seed(&self) -> u64 {
        self.encoders.student.seed.unwrap_or(self.seed.wrapping_mul(31).wrapping_add(17))
    }

    /// Check invariants that serde cannot express.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(DaitError::Config { key: key.into(), message: msg });
        if self.epochs == 0 {
            return bad("epochs", "must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if self.optimizer.name.to_ascii_lowercase() != "adamw" {
            return bad("optimizer.name", format!("unsupported optimizer `{}` (only adamw)", self.optimizer.name));
        }
        if !(self.optimizer.lr > 0.0) {
            return bad("optimizer.lr", "must be positive".into());
        }
        if let Err(e) = self.schedule().validate() {
            return bad("schedule", e.to_string());
        }
        for (key, s) in [("schedule", Some(&self.schedule)), ("stage2_schedule", self.stage2_schedule.as_ref())] {
            if let Some(s) = s {
                if !(s.clamp_lo >= 0.0 && s.clamp_hi <= 1.0) {
                    return bad(&format!("{key}.clamp_hi"), "clamp bounds must lie in [0, 1]".into());
                }
            }
        }
        if let Err(e) = self.temperature() {
            return bad("losses.temperature", e.to_string());
        }
        if !(self.data.ratio > 0.0 && self.data.ratio <= 1.0) {
            return bad("data.ratio", format!("{} outside (0, 1]", self.data.ratio));
        }
        if self.data.prompt_template.matches("{}").count() != 1 {
            return bad("data.prompt_template", "must contain exactly one `{}`".into());
        }
        if self.data.source == DataSource::Folder && self.data.root.is_none() {
            return bad("data.root", "required when data.source = \"folder\"".into());
        }
        if let Some(root) = &self.data.root {
            if self.data.source == DataSource::Folder && !root.is_dir() {
                return bad("data.root", format!("{} is not a directory", root.display()));
            }
        }
        if self.stage == Stage::Stage2 {
            match &self.stage1_checkpoint {
                None => return bad("stage1_checkpoint", "stage2 requires a stage1 checkpoint".into()),
                Some(p) if !crate::checkpoint::exists(p) => {
                    return bad("stage1_checkpoint", format!("checkpoint {} not found", p.display()))
                }
                _ => {}
            }
        }
        if let Some(p) = &self.encoders.projection.checkpoint {
            if !crate::checkpoint::exists(p) {
                return bad("encoders.projection.checkpoint", format!("checkpoint {} not found", p.display()));
            }
        }
        for (key, sec) in [("encoders.intermediate", &self.encoders.intermediate), ("encoders.student", &self.encoders.student)] {
            if let Err(e) = sec.stack(3).validate() {
                return bad(key, e.to_string());
            }
        }
        if self.encoders.embed_dim == 0 {
            return bad("encoders.embed_dim", "must be positive".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Parse `key=value`; the value is read as a TOML literal, falling back to a
/// bare string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s.split_once('=').ok_or_else(|| DaitError::Config {
        key: s.into(),
        message: "override must look like key=value".into(),
    })?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key, value))
}

fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(DaitError::Config { key: key.into(), message: "empty path segment".into() });
        }
        if i + 1 == parts.len() {
            table.insert((*part).to_string(), value);
            return Ok(());
        }
        let entry = table.entry((*part).to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => {
                return Err(DaitError::Config {
                    key: key.into(),
                    message: format!("`{}` is not a section", parts[..=i].join(".")),
                })
            }
        };
    }
    Ok(())
}

/// Keys present in `table` that the schema (the serialized default with
/// every optional field filled) does not know, as dotted paths.
fn unknown_keys(table: &toml::Table, schema: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match schema.get(k) {
            None => out.push(path),
            Some(toml::Value::Table(s)) => {
                if let toml::Value::Table(t) = v {
                    unknown_keys(t, s, &path, out);
                }
            }
            Some(_) => {}
        }
    }
}

fn schema() -> toml::Table {
    let mut c = RunConfig::default();
    c.stage1_checkpoint = Some(PathBuf::new());
    c.schedule.k = Some(0.0);
    c.stage2_schedule = Some(c.schedule.clone());
    c.data.root = Some(PathBuf::new());
    c.encoders.vlm_image.adapter = Some(String::new());
    c.encoders.vlm_text.adapter = Some(String::new());
    c.encoders.intermediate.seed = Some(0);
    c.encoders.student.seed = Some(0);
    c.encoders.projection.checkpoint = Some(PathBuf::new());
    toml::Table::try_from(&c).expect("schema serializes")
}

/// Recursively overlay `over` onto `base`.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Resolve a config: defaults, overlaid by the TOML text, then by the
/// overrides in order.
pub fn resolve(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let file: toml::Table =
        toml::from_str(text).map_err(|e| DaitError::Config { key: "<file>".into(), message: e.to_string() })?;
    let mut table = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
    merge(&mut table, file);
    for o in overrides {
        let (key, value) = parse_override(o)?;
        set_dotted(&mut table, &key, value)?;
    }
    let mut unknown = Vec::new();
    unknown_keys(&table, &schema(), "", &mut unknown);
    if let Some(first) = unknown.first() {
        return Err(DaitError::Config { key: first.clone(), message: format!("unknown key `{first}`") });
    }
    let config: RunConfig = table.try_into().map_err(|e: toml::de::Error| DaitError::Config {
        key: e.message().split('`').nth(1).unwrap_or("<config>").to_string(),
        message: e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

/// Read `path` (if any) and resolve with `overrides`.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| DaitError::Config {
            key: "--config".into(),
            message: format!("{}: {e}", p.display()),
        })?,
        None => String::new(),
    };
    resolve(&text, overrides)
}

/// Write the resolved snapshot into `dir` before any work starts.
pub fn write_snapshot(config: &RunConfig, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| DaitError::io(dir, e))?;
    let path = dir.join("config.resolved.toml");
    std::fs::write(&path, config.to_toml()).map_err(|e| DaitError::io(&path, e))?;
    Ok(path)
}

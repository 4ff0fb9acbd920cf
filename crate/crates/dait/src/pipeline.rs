//! Training, evaluation and sweep orchestration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use dait_core::analysis::FeatureDump;
use dait_core::data::{augment, epoch_order, generate_synthetic, subsample, AugmentOp, AugmentPolicy, Dataset, Image};
use dait_core::encoders::{
    align_maps, align_maps_backward, fit_projection_head, nearest_anchor_accuracy, ChannelAlign, FreezeGuard,
    ImageBackbone, IntermediateNet, ModelSet, ParamGroups, ProjectionMlp, StudentNet, TextBackbone,
    ToyImageEncoder, ToyTextEncoder, TrainabilityMask, Vlm, GROUP_F_STU, GROUP_F_VLM, GROUP_INTERMEDIATE,
    GROUP_STUDENT, GROUP_VLM,
};
use dait_core::losses::{
    cls_loss, cosine_matrix, cosine_rows_backward, ira_loss, logit_kd_loss, sia_loss, sra_loss, Stage1Weights,
    Stage2Weights,
};
use dait_core::nn::{zero_grad, AdamW, Param, Parameters};
use dait_core::{ClassAnchors, FeatureMap, KlOrder, Matrix, Temperature};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointKind, Loaded};
use crate::config::{self, DataSource, Determinism, EncoderKindKey, Mode, RunConfig, Stage};
use crate::error::{DaitError, Result};
use crate::{adapters, io};

/// Per-epoch training log. Loss terms that a method does not use are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lambda: Option<f64>,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_sia: Option<f64>,
    pub loss_ira: Option<f64>,
    pub loss_distill: Option<f64>,
    pub train_top1: f64,
    pub test_top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenGroup {
    pub name: String,
    pub before: u64,
    pub after: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub dataset: String,
    pub data_ratio: f64,
    pub seed: u64,
    pub stage: Stage,
    /// Test top-1 of the selected checkpoint.
    pub final_top1: f64,
    pub selected_epoch: usize,
    pub checkpoint: PathBuf,
    pub run_dir: PathBuf,
    pub frozen: Vec<FrozenGroup>,
    pub wall_seconds: f64,
    pub epochs: Vec<EpochRow>,
}

pub const SUMMARY_FILE: &str = "summary.json";
pub const EPOCHS_FILE: &str = "epochs.csv";

pub fn method_name(config: &RunConfig) -> &'static str {
    match (config.stage, config.mode) {
        (Stage::Stage1, _) => "stage1",
        (Stage::Stage2, Mode::Feature) => "dait_f",
        (Stage::Stage2, Mode::Logit) => "dait_l",
        (Stage::BaselineNokd, _) => "nokd",
        (Stage::BaselineDirect, _) => "direct",
    }
}

pub struct Prepared {
    /// Training split after subsampling by `data.ratio`.
    pub train: Dataset,
    /// Training split before subsampling. Only the VLM projection head sees
    /// it: the VLM stands in for a model pretrained elsewhere, so the data
    /// budget applies to the intermediate and student alone.
    pub full_train: Dataset,
    pub test: Dataset,
    pub dataset: String,
}

/// Load the configured dataset and subsample the training split.
pub fn load_data(config: &RunConfig) -> Result<Prepared> {
    let (train, test, dataset) = match config.data.source {
        DataSource::Synthetic => {
            let (tr, te) = generate_synthetic(&config.data.synthetic.to_core())?;
            (tr, te, "synthetic".to_string())
        }
        DataSource::Folder => {
            let root = config.data.root.as_deref().ok_or_else(|| DaitError::Config {
                key: "data.root".into(),
                message: "required when data.source = \"folder\"".into(),
            })?;
            let (tr, te) = io::load_image_folder(root)?;
            let name = root.file_name().and_then(|n| n.to_str()).unwrap_or("folder").to_string();
            (tr, te, name)
        }
    };
    let full_train = train;
    let train = subsample(&full_train, config.data.ratio, config.data.subsample_seed)?;
    Ok(Prepared { train, full_train, test, dataset })
}

fn is_stochastic(policy: &AugmentPolicy) -> bool {
    policy.ops.iter().any(|op| match op {
        AugmentOp::RandomResizedCrop { .. } => true,
        AugmentOp::HorizontalFlip { p } => *p > 0.0,
        AugmentOp::ColorJitter { brightness, contrast, saturation } => {
            *brightness != 0.0 || *contrast != 0.0 || *saturation != 0.0
        }
        AugmentOp::Resize { .. } | AugmentOp::Normalize { .. } => false,
    })
}

/// Serves batches through an augmentation policy; deterministic policies
/// are applied once up front.
struct Feeder<'a> {
    data: &'a Dataset,
    policy: AugmentPolicy,
    cache: Option<Vec<Image>>,
}

impl<'a> Feeder<'a> {
    fn new(data: &'a Dataset, policy: AugmentPolicy) -> Self {
        let cache =
            (!is_stochastic(&policy)).then(|| data.items.iter().map(|i| augment(&i.image, &policy, 0)).collect());
        Self { data, policy, cache }
    }

    fn len(&self) -> usize {
        self.data.len()
    }

    fn batch(&self, idx: &[usize], epoch: usize) -> Result<(FeatureMap, Vec<usize>)> {
        let owned: Vec<Image>;
        let images: Vec<&Image> = match &self.cache {
            Some(c) => idx.iter().map(|&i| &c[i]).collect(),
            None => {
                owned = idx
                    .iter()
                    .map(|&i| augment(&self.data.items[i].image, &self.policy, ((epoch as u64) << 32) | i as u64))
                    .collect();
                owned.iter().collect()
            }
        };
        let labels = idx.iter().map(|&i| self.data.items[i].label).collect();
        Ok((dait_core::data::stack_images(&images)?, labels))
    }

    fn labels(&self) -> Vec<usize> {
        self.data.labels()
    }
}

fn input_dims(config: &RunConfig) -> [usize; 3] {
    [3, config.data.image_side, config.data.image_side]
}

/// VLM image and text towers as configured.
pub fn build_towers(config: &RunConfig) -> Result<(Box<dyn ImageBackbone>, Box<dyn TextBackbone>)> {
    let enc = &config.encoders;
    let image: Box<dyn ImageBackbone> = match enc.vlm_image.kind {
        EncoderKindKey::Toy => {
            Box::new(ToyImageEncoder::new(input_dims(config), enc.vlm_image.raw_dim, enc.vlm_image.seed)?)
        }
        EncoderKindKey::ExternalAdapter => adapters::image(enc.vlm_image.adapter.as_deref(), input_dims(config))?,
    };
    let text: Box<dyn TextBackbone> = match enc.vlm_text.kind {
        EncoderKindKey::Toy => {
            Box::new(ToyTextEncoder::new(enc.vlm_image.raw_dim, enc.vlm_text.separation, enc.vlm_text.seed)?)
        }
        EncoderKindKey::ExternalAdapter => adapters::text(enc.vlm_text.adapter.as_deref())?,
    };
    Ok((image, text))
}

fn require_toy(kind: EncoderKindKey, key: &str) -> Result<()> {
    match kind {
        EncoderKindKey::Toy => Ok(()),
        EncoderKindKey::ExternalAdapter => {
            Err(DaitError::Backend(format!("{key}: only the built-in convolutional encoder is available")))
        }
    }
}

fn blank_head(config: &RunConfig, raw_dim: usize) -> ProjectionMlp {
    let p = &config.encoders.projection;
    ProjectionMlp::new(raw_dim, p.hidden, config.encoders.embed_dim, p.seed)
}

fn build_intermediate(config: &RunConfig, num_classes: usize) -> Result<IntermediateNet> {
    require_toy(config.encoders.intermediate.kind, "encoders.intermediate.kind")?;
    Ok(IntermediateNet::new(
        &config.encoders.intermediate.stack(3),
        config.encoders.embed_dim,
        num_classes,
        config.intermediate_seed(),
    )?)
}

fn build_student(config: &RunConfig, num_classes: usize) -> Result<StudentNet> {
    require_toy(config.encoders.student.kind, "encoders.student.kind")?;
    Ok(StudentNet::new(
        &config.encoders.student.stack(3),
        config.encoders.embed_dim,
        num_classes,
        config.student_seed(),
    )?)
}

/// Raw VLM image features of a dataset under the evaluation policy.
fn raw_image_features(image: &dyn ImageBackbone, data: &Dataset, policy: &AugmentPolicy) -> Result<Matrix> {
    let feeder = Feeder::new(data, policy.clone());
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut rows = Vec::with_capacity(data.len());
    for chunk in idx.chunks(64) {
        let (x, _) = feeder.batch(chunk, 0)?;
        let f = image.encode_raw(&x)?;
        rows.extend(f.iter_rows().map(<[f64]>::to_vec));
    }
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    Ok(Matrix::from_rows(&refs)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub checkpoint: PathBuf,
    /// Nearest-anchor test accuracy with the untrained head.
    pub test_acc_before: f64,
    pub test_acc_after: f64,
    pub train_acc_after: f64,
    pub loss_trace: Vec<f64>,
}

/// Fit `f_vlm` on frozen tower features of the full training split, save it as a
/// projection checkpoint under `dir`, and return the assembled VLM.
pub fn fit_projection(config: &RunConfig, data: &Prepared, dir: &Path) -> Result<(Vlm, ProjectionReport)> {
    let (image, text) = build_towers(config)?;
    let policy = config.data.eval_policy();
    let raw_train = raw_image_features(image.as_ref(), &data.full_train, &policy)?;
    let raw_test = raw_image_features(image.as_ref(), &data.test, &policy)?;
    let untrained = Vlm::new(image, text, blank_head(config, raw_train.cols()))?;
    let anchors_raw = untrained.encode_text_raw(&data.train.class_names, &config.data.prompt_template)?;
    let acc = |head: &ProjectionMlp, raw: &Matrix, labels: &[usize]| {
        nearest_anchor_accuracy(&head.forward(raw), &head.forward(&anchors_raw), labels)
    };
    let before = acc(&untrained.head, &raw_test, &data.test.labels())?;
    let fit =
        fit_projection_head(&raw_train, &anchors_raw, &data.full_train.labels(), &config.encoders.projection_fit())?;
    let report = ProjectionReport {
        checkpoint: dir.join("projection.ckpt"),
        test_acc_before: before,
        test_acc_after: acc(&fit.head, &raw_test, &data.test.labels())?,
        train_acc_after: acc(&fit.head, &raw_train, &data.full_train.labels())?,
        loss_trace: fit.loss_trace,
    };
    let Vlm { image, text, .. } = untrained;
    let vlm = Vlm::new(image, text, fit.head)?;
    let metrics = BTreeMap::from([
        ("test_acc_before".to_string(), report.test_acc_before),
        ("test_acc_after".to_string(), report.test_acc_after),
        ("train_acc_after".to_string(), report.train_acc_after),
        ("final_loss".to_string(), *report.loss_trace.last().unwrap_or(&f64::NAN)),
    ]);
    checkpoint::save(
        &report.checkpoint,
        CheckpointKind::Projection,
        &[(GROUP_F_VLM, &vlm.head)],
        config.encoders.projection.epochs,
        metrics,
        &data.train.class_names,
        None,
        config,
    )?;
    let mut w = csv::Writer::from_path(dir.join("projection_loss.csv")).map_err(|e| DaitError::Ingest(e.to_string()))?;
    w.write_record(["step", "loss"]).map_err(|e| DaitError::Ingest(e.to_string()))?;
    for (i, l) in report.loss_trace.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).map_err(|e| DaitError::Ingest(e.to_string()))?;
    }
    w.flush().map_err(|e| DaitError::io(dir, e))?;
    Ok((vlm, report))
}

/// Rebuild the VLM of a checkpoint that carries `f_vlm`.
fn vlm_from_checkpoint(loaded: &Loaded) -> Result<Vlm> {
    let cfg = &loaded.manifest.config;
    let (image, text) = build_towers(cfg)?;
    let mut head = blank_head(cfg, image.raw_dim());
    loaded.restore(GROUP_F_VLM, &mut head)?;
    Ok(Vlm::new(image, text, head)?)
}

/// The configured projection checkpoint, or a fresh inline fit saved in `dir`.
fn obtain_vlm(config: &RunConfig, data: &Prepared, dir: &Path) -> Result<Vlm> {
    match &config.encoders.projection.checkpoint {
        Some(path) => {
            let loaded = checkpoint::load(path)?;
            let ck = &loaded.manifest.config.encoders;
            if ck.vlm_image != config.encoders.vlm_image
                || ck.vlm_text != config.encoders.vlm_text
                || ck.embed_dim != config.encoders.embed_dim
            {
                return Err(DaitError::Config {
                    key: "encoders.projection.checkpoint".into(),
                    message: "checkpoint was fitted for different VLM towers or embed_dim".into(),
                });
            }
            vlm_from_checkpoint(&loaded)
        }
        None => {
            let (vlm, report) = fit_projection(config, data, dir)?;
            log::info!(
                "fitted f_vlm: nearest-anchor test accuracy {:.3} -> {:.3}",
                report.test_acc_before,
                report.test_acc_after
            );
            Ok(vlm)
        }
    }
}

fn mutable_group<'a>(models: &'a mut ModelSet, name: &str) -> Option<&'a mut dyn Parameters> {
    match name {
        GROUP_VLM => models.vlm.as_mut().map(|v| v as &mut dyn Parameters),
        GROUP_F_VLM => models.vlm.as_mut().map(|v| &mut v.head as &mut dyn Parameters),
        GROUP_INTERMEDIATE => models.intermediate.as_mut().map(|m| m as &mut dyn Parameters),
        GROUP_STUDENT => models.student.as_mut().map(|m| m as &mut dyn Parameters),
        GROUP_F_STU => models.align.as_mut().map(|m| m as &mut dyn Parameters),
        _ => None,
    }
}

/// The trainable subset of a model set, in fixed group order.
struct Trainable<'a> {
    models: &'a mut ModelSet,
    groups: &'a [&'static str],
}

impl Parameters for Trainable<'_> {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for g in self.groups {
            if let Some(p) = self.models.group(g) {
                p.visit(f);
            }
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for g in self.groups {
            if let Some(p) = mutable_group(self.models, g) {
                p.visit_mut(f);
            }
        }
    }
}

#[derive(Default)]
struct StepStats {
    total: f64,
    cls: f64,
    sia: Option<f64>,
    ira: Option<f64>,
    distill: Option<f64>,
    correct: usize,
}

/// Per-method forward/backward. Gradients land in the model parameters.
enum Objective {
    Stage1 { anchors: ClassAnchors, temperature: Temperature, order: KlOrder },
    Feature,
    Logit { temperature: Temperature, order: KlOrder },
    ClsOnly,
    Direct { anchors: ClassAnchors, temperature: Temperature, order: KlOrder },
}

fn hits(logits: &Matrix, labels: &[usize]) -> usize {
    logits.argmax_rows().iter().zip(labels).filter(|(p, l)| p == l).count()
}

fn add_into(dst: &mut Matrix, src: &Matrix, scale: f64) {
    dst.as_mut_slice().iter_mut().zip(src.as_slice()).for_each(|(a, b)| *a += scale * b);
}

fn embedding_terms(
    emb: &Matrix,
    target: &Matrix,
    anchors: &ClassAnchors,
    temperature: Temperature,
    order: KlOrder,
    w_sia: f64,
    w_ira: f64,
) -> Result<(f64, f64, Matrix)> {
    let cos_s = cosine_matrix(emb, anchors)?;
    let cos_t = cosine_matrix(target, anchors)?;
    let sia = sia_loss(&cos_s, &cos_t, temperature, order)?;
    let ira = ira_loss(emb, target)?;
    let g_cos = sia.grad.scale(w_sia);
    let (mut g, _) = cosine_rows_backward(emb, anchors.values(), &cos_s, &g_cos);
    add_into(&mut g, &ira.grad, w_ira);
    Ok((sia.value, ira.value, g))
}

impl Objective {
    fn step(&self, m: &mut ModelSet, x: &FeatureMap, y: &[usize], lam: f64) -> Result<StepStats> {
        let missing = |g: &str| DaitError::Training(format!("model group `{g}` missing"));
        match self {
            Objective::Stage1 { anchors, temperature, order } => {
                let vlm = m.vlm.as_ref().ok_or_else(|| missing(GROUP_VLM))?;
                let net = m.intermediate.as_mut().ok_or_else(|| missing(GROUP_INTERMEDIATE))?;
                let w = Stage1Weights::new(lam)?;
                let z_v = vlm.encode_image(x)?;
                let fwd = net.forward(x);
                let (sia, ira, g_emb) = embedding_terms(&fwd.pooled, &z_v, anchors, *temperature, *order, w.sia, w.ira)?;
                let cls = cls_loss(&fwd.logits, y)?;
                let g_logits = cls.grad.scale(w.cls);
                net.backward(&fwd, Some(&g_emb), Some(&g_logits));
                Ok(StepStats {
                    total: w.cls * cls.value + w.sia * sia + w.ira * ira,
                    cls: cls.value,
                    sia: Some(sia),
                    ira: Some(ira),
                    distill: None,
                    correct: hits(&fwd.logits, y),
                })
            }
            Objective::Direct { anchors, temperature, order } => {
                let vlm = m.vlm.as_ref().ok_or_else(|| missing(GROUP_VLM))?;
                let net = m.student.as_mut().ok_or_else(|| missing(GROUP_STUDENT))?;
                let w = Stage1Weights::new(lam)?;
                let z_v = vlm.encode_image(x)?;
                let fwd = net.forward(x);
                let emb = net.direct_embedding(&fwd);
                let (sia, ira, g_emb) = embedding_terms(&emb, &z_v, anchors, *temperature, *order, w.sia, w.ira)?;
                let cls = cls_loss(&fwd.logits, y)?;
                let g_logits = cls.grad.scale(w.cls);
                net.backward(&fwd, None, Some(&g_logits), Some(&g_emb));
                Ok(StepStats {
                    total: w.cls * cls.value + w.sia * sia + w.ira * ira,
                    cls: cls.value,
                    sia: Some(sia),
                    ira: Some(ira),
                    distill: None,
                    correct: hits(&fwd.logits, y),
                })
            }
            Objective::Feature => {
                let teacher = m.intermediate.as_ref().ok_or_else(|| missing(GROUP_INTERMEDIATE))?;
                let net = m.student.as_mut().ok_or_else(|| missing(GROUP_STUDENT))?;
                let align = m.align.as_mut().ok_or_else(|| missing(GROUP_F_STU))?;
                let w = Stage2Weights::new(lam)?;
                let t_fwd = teacher.forward(x);
                let fwd = net.forward(x);
                let pair = align_maps(align, &fwd.map, &t_fwd.map)?;
                let sra = sra_loss(&pair.student, &pair.teacher)?;
                let mut g_pair = sra.grad;
                g_pair.as_mut_slice().iter_mut().for_each(|v| *v *= w.distill);
                let g_map = align_maps_backward(align, &fwd.map, &pair, &g_pair);
                let cls = cls_loss(&fwd.logits, y)?;
                let g_logits = cls.grad.scale(w.cls);
                net.backward(&fwd, Some(&g_map), Some(&g_logits), None);
                Ok(StepStats {
                    total: w.cls * cls.value + w.distill * sra.value,
                    cls: cls.value,
                    distill: Some(sra.value),
                    correct: hits(&fwd.logits, y),
                    ..Default::default()
                })
            }
            Objective::Logit { temperature, order } => {
                let teacher = m.intermediate.as_ref().ok_or_else(|| missing(GROUP_INTERMEDIATE))?;
                let net = m.student.as_mut().ok_or_else(|| missing(GROUP_STUDENT))?;
                let w = Stage2Weights::new(lam)?;
                let t_fwd = teacher.forward(x);
                let fwd = net.forward(x);
                let kd = logit_kd_loss(&fwd.logits, &t_fwd.logits, *temperature, *order)?;
                let cls = cls_loss(&fwd.logits, y)?;
                let mut g_logits = cls.grad.scale(w.cls);
                add_into(&mut g_logits, &kd.grad, w.distill);
                net.backward(&fwd, None, Some(&g_logits), None);
                Ok(StepStats {
                    total: w.cls * cls.value + w.distill * kd.value,
                    cls: cls.value,
                    distill: Some(kd.value),
                    correct: hits(&fwd.logits, y),
                    ..Default::default()
                })
            }
            Objective::ClsOnly => {
                let net = m.student.as_mut().ok_or_else(|| missing(GROUP_STUDENT))?;
                let fwd = net.forward(x);
                let cls = cls_loss(&fwd.logits, y)?;
                net.backward(&fwd, None, Some(&cls.grad), None);
                Ok(StepStats { total: cls.value, cls: cls.value, correct: hits(&fwd.logits, y), ..Default::default() })
            }
        }
    }

    fn uses_schedule(&self) -> bool {
        !matches!(self, Objective::ClsOnly)
    }
}

/// Which network produces class predictions for a model set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Predictor {
    Intermediate,
    Student,
}

fn logits_of(models: &ModelSet, who: Predictor, x: &FeatureMap) -> Result<Matrix> {
    match who {
        Predictor::Intermediate => models
            .intermediate
            .as_ref()
            .map(|n| n.forward(x).logits)
            .ok_or_else(|| DaitError::Training("no intermediate network".into())),
        Predictor::Student => models
            .student
            .as_ref()
            .map(|n| n.forward(x).logits)
            .ok_or_else(|| DaitError::Training("no student network".into())),
    }
}

/// Fraction of rows whose argmax equals the label.
pub fn top1(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(DaitError::Core(dait_core::Error::Contract {
            op: "top1",
            detail: format!("{} predictions for {} labels", logits.rows(), labels.len()),
        }));
    }
    if labels.is_empty() {
        return Err(DaitError::Core(dait_core::Error::Contract { op: "top1", detail: "empty evaluation set".into() }));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(DaitError::Core(dait_core::Error::Contract {
            op: "top1",
            detail: format!("label {l} but the model predicts {} classes", logits.cols()),
        }));
    }
    Ok(hits(logits, labels) as f64 / labels.len() as f64)
}

/// Map `f` over evaluation batches, in parallel when determinism is `fast`.
/// Rows are independent, so both modes give identical results.
fn map_batches<F>(feeder: &Feeder, determinism: Determinism, f: F) -> Result<Matrix>
where
    F: Fn(&FeatureMap) -> Result<Matrix> + Sync,
{
    const CHUNK: usize = 64;
    let idx: Vec<usize> = (0..feeder.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(CHUNK).collect();
    let run = |c: &[usize]| -> Result<Matrix> { f(&feeder.batch(c, 0)?.0) };
    let parts: Vec<Result<Matrix>> = match determinism {
        Determinism::Strict => chunks.iter().map(|c| run(c)).collect(),
        Determinism::Fast => {
            let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(chunks.len().max(1));
            let next = AtomicUsize::new(0);
            let slots: Vec<Mutex<Option<Result<Matrix>>>> = chunks.iter().map(|_| Mutex::new(None)).collect();
            std::thread::scope(|s| {
                for _ in 0..threads {
                    s.spawn(|| loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= chunks.len() {
                            break;
                        }
                        *slots[i].lock().unwrap() = Some(run(chunks[i]));
                    });
                }
            });
            slots.into_iter().map(|s| s.into_inner().unwrap().expect("every chunk ran")).collect()
        }
    };
    let mut rows = Vec::with_capacity(feeder.len());
    for p in parts {
        rows.extend(p?.iter_rows().map(<[f64]>::to_vec));
    }
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    Ok(Matrix::from_rows(&refs)?)
}

fn evaluate_models(models: &ModelSet, who: Predictor, feeder: &Feeder, determinism: Determinism) -> Result<f64> {
    let logits = map_batches(feeder, determinism, |x| logits_of(models, who, x))?;
    top1(&logits, &feeder.labels())
}

fn write_epochs(path: &Path, rows: &[EpochRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| DaitError::Ingest(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| DaitError::Ingest(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| DaitError::io(path, e))
}

pub fn write_summary(dir: &Path, record: &RunRecord) -> Result<()> {
    let path = dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(record).expect("record serializes");
    fs::write(&path, text).map_err(|e| DaitError::io(&path, e))
}

pub fn read_summary(path: &Path) -> Result<RunRecord> {
    let text = fs::read_to_string(path).map_err(|e| DaitError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DaitError::Ingest(format!("{}: {e}", path.display())))
}

/// Everything a training run needs beyond the config.
struct Session {
    models: ModelSet,
    objective: Objective,
    predictor: Predictor,
    trainable: &'static [&'static str],
    kind: CheckpointKind,
    parent: Option<PathBuf>,
}

fn train(config: &RunConfig, data: &Prepared, dir: &Path, mut s: Session, started: Instant) -> Result<RunRecord> {
    let mut mask = TrainabilityMask::new();
    for g in s.models.group_names() {
        mask = mask.with(g, s.trainable.contains(&g));
    }
    let guard = FreezeGuard::apply(&mask, &s.models)?;
    for g in s.trainable {
        debug_assert!(guard.is_trainable(g)?);
    }

    let preset = if config.stage == Stage::Stage1 { config.data.augment_stage1 } else { config.data.augment_stage2 };
    let train_feed = Feeder::new(&data.train, config.data.policy(preset, config.seed));
    let test_feed = Feeder::new(&data.test, config.data.eval_policy());
    let schedule = config.schedule();
    let decay = config.optimizer.decay();
    let mut opt = AdamW::new(config.optimizer.adamw());

    let last_path = dir.join("last.ckpt");
    let best_path = dir.join("best.ckpt");
    let mut rows = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut saved_any = false;

    for epoch in 0..config.epochs {
        let lam = schedule.lambda_at(epoch);
        let lr = decay.lr_at(epoch);
        let (mut total, mut cls, mut sia, mut ira, mut distill) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut correct = 0;
        let mut last = StepStats::default();
        for chunk in epoch_order(train_feed.len(), config.seed, epoch).chunks(config.batch_size) {
            let (x, y) = train_feed.batch(chunk, epoch)?;
            let mut params = Trainable { models: &mut s.models, groups: s.trainable };
            zero_grad(&mut params);
            let st = s.objective.step(params.models, &x, &y, lam)?;
            if !st.total.is_finite() {
                let resume = if saved_any { last_path.display().to_string() } else { "none".into() };
                return Err(DaitError::Training(format!(
                    "non-finite loss at epoch {epoch}; last good checkpoint: {resume}"
                )));
            }
            let mut params = Trainable { models: &mut s.models, groups: s.trainable };
            opt.step(&mut params, lr);
            let b = y.len() as f64;
            total += b * st.total;
            cls += b * st.cls;
            sia += b * st.sia.unwrap_or(0.0);
            ira += b * st.ira.unwrap_or(0.0);
            distill += b * st.distill.unwrap_or(0.0);
            correct += st.correct;
            last = st;
        }
        let n = train_feed.len() as f64;
        let test_top1 = evaluate_models(&s.models, s.predictor, &test_feed, config.determinism)?;
        let row = EpochRow {
            epoch,
            lambda: s.objective.uses_schedule().then_some(lam),
            lr,
            loss_total: total / n,
            loss_cls: cls / n,
            loss_sia: last.sia.map(|_| sia / n),
            loss_ira: last.ira.map(|_| ira / n),
            loss_distill: last.distill.map(|_| distill / n),
            train_top1: correct as f64 / n,
            test_top1,
        };
        log::info!(
            "{} epoch {epoch}: loss {:.4} train {:.3} test {:.3}",
            method_name(config),
            row.loss_total,
            row.train_top1,
            row.test_top1
        );
        let metrics = BTreeMap::from([
            ("test_top1".to_string(), test_top1),
            ("train_top1".to_string(), row.train_top1),
            ("loss_total".to_string(), row.loss_total),
        ]);
        rows.push(row);
        save_session(&s, &last_path, epoch, metrics.clone(), &data.train.class_names, config)?;
        saved_any = true;
        if best.is_none_or(|(_, acc)| test_top1 > acc) {
            best = Some((epoch, test_top1));
            save_session(&s, &best_path, epoch, metrics, &data.train.class_names, config)?;
        }
    }

    guard.verify(&s.models)?;
    let frozen = mask
        .iter()
        .filter(|&(g, t)| !t && dait_core::nn::num_params(s.models.group(g).expect("group exists")) > 0)
        .map(|(g, _)| {
            let before = guard.recorded_checksum(g)?;
            let after = dait_core::nn::checksum(s.models.group(g).expect("group exists"));
            Ok(FrozenGroup { name: g.to_string(), before, after })
        })
        .collect::<Result<Vec<_>>>()?;

    let (selected_epoch, final_top1, checkpoint) = match config.checkpoint_select {
        config::CheckpointSelect::Best => {
            let (e, a) = best.expect("at least one epoch");
            (e, a, best_path)
        }
        config::CheckpointSelect::Last => {
            let r = rows.last().expect("at least one epoch");
            (r.epoch, r.test_top1, last_path)
        }
    };
    write_epochs(&dir.join(EPOCHS_FILE), &rows)?;
    let record = RunRecord {
        method: method_name(config).to_string(),
        dataset: data.dataset.clone(),
        data_ratio: config.data.ratio,
        seed: config.seed,
        stage: config.stage,
        final_top1,
        selected_epoch,
        checkpoint,
        run_dir: dir.to_path_buf(),
        frozen,
        wall_seconds: started.elapsed().as_secs_f64(),
        epochs: rows,
    };
    write_summary(dir, &record)?;
    Ok(record)
}

fn save_session(
    s: &Session,
    path: &Path,
    epoch: usize,
    metrics: BTreeMap<String, f64>,
    class_names: &[String],
    config: &RunConfig,
) -> Result<()> {
    let mut groups: Vec<(&str, &dyn Parameters)> = Vec::new();
    match s.kind {
        CheckpointKind::Stage1 => {
            let vlm = s.models.vlm.as_ref().expect("stage 1 has a VLM");
            groups.push((GROUP_F_VLM, &vlm.head));
            groups.push((GROUP_INTERMEDIATE, s.models.intermediate.as_ref().expect("stage 1 has a teacher")));
        }
        CheckpointKind::Student => {
            groups.push((GROUP_STUDENT, s.models.student.as_ref().expect("student run")));
            if let Some(a) = &s.models.align {
                groups.push((GROUP_F_STU, a));
            }
        }
        CheckpointKind::Projection => unreachable!("projection heads are not trained here"),
    }
    checkpoint::save(path, s.kind, &groups, epoch, metrics, class_names, s.parent.clone(), config)?;
    Ok(())
}

fn prologue(config: &RunConfig) -> Result<(PathBuf, Prepared, Instant)> {
    config.validate()?;
    let started = Instant::now();
    let dir = config.out_dir.clone();
    config::write_snapshot(config, &dir)?;
    let data = load_data(config)?;
    Ok((dir, data, started))
}

/// Stage 1: train the intermediate teacher against the frozen VLM.
pub fn run_stage1(config: &RunConfig) -> Result<RunRecord> {
    let (dir, data, started) = prologue(config)?;
    let vlm = obtain_vlm(config, &data, &dir)?;
    let anchors = vlm.encode_text(&data.train.class_names, &config.data.prompt_template)?;
    let intermediate = build_intermediate(config, data.train.num_classes())?;
    let session = Session {
        models: ModelSet { vlm: Some(vlm), intermediate: Some(intermediate), student: None, align: None },
        objective: Objective::Stage1 { anchors, temperature: config.temperature()?, order: config.kl_order() },
        predictor: Predictor::Intermediate,
        trainable: &[GROUP_INTERMEDIATE],
        kind: CheckpointKind::Stage1,
        parent: config.encoders.projection.checkpoint.clone(),
    };
    train(config, &data, &dir, session, started)
}

/// Restore the frozen VLM and intermediate teacher from a stage-1 checkpoint.
fn load_teacher(path: &Path, class_names: &[String]) -> Result<(Vlm, IntermediateNet)> {
    let loaded = checkpoint::load(path)?;
    if loaded.manifest.kind != CheckpointKind::Stage1 {
        return Err(DaitError::Config {
            key: "stage1_checkpoint".into(),
            message: format!("{} is a {:?} checkpoint, not stage 1", path.display(), loaded.manifest.kind),
        });
    }
    if loaded.manifest.class_names != class_names {
        return Err(DaitError::Config {
            key: "stage1_checkpoint".into(),
            message: "teacher was trained on a different class list".into(),
        });
    }
    let vlm = vlm_from_checkpoint(&loaded)?;
    let mut teacher = build_intermediate(&loaded.manifest.config, class_names.len())?;
    loaded.restore(GROUP_INTERMEDIATE, &mut teacher)?;
    Ok((vlm, teacher))
}

/// Stage 2: distil the frozen intermediate into the student.
pub fn run_stage2(config: &RunConfig) -> Result<RunRecord> {
    let (dir, data, started) = prologue(config)?;
    let ck = config.stage1_checkpoint.clone().ok_or_else(|| DaitError::Config {
        key: "stage1_checkpoint".into(),
        message: "stage2 requires a stage1 checkpoint".into(),
    })?;
    let (vlm, teacher) = load_teacher(&ck, &data.train.class_names)?;
    let student = build_student(config, data.train.num_classes())?;
    let (align, objective, trainable): (_, _, &'static [&'static str]) = match config.mode {
        Mode::Feature => (
            Some(ChannelAlign::new(student.map_channels(), teacher.map_channels(), config.student_seed() ^ 0x5eed)),
            Objective::Feature,
            &[GROUP_STUDENT, GROUP_F_STU],
        ),
        Mode::Logit => (
            None,
            Objective::Logit { temperature: config.temperature()?, order: config.kl_order() },
            &[GROUP_STUDENT],
        ),
    };
    let session = Session {
        models: ModelSet { vlm: Some(vlm), intermediate: Some(teacher), student: Some(student), align },
        objective,
        predictor: Predictor::Student,
        trainable,
        kind: CheckpointKind::Student,
        parent: Some(ck),
    };
    train(config, &data, &dir, session, started)
}

/// Baselines: CLS-only student, or a student distilled straight from the VLM.
pub fn run_baseline(config: &RunConfig) -> Result<RunRecord> {
    let (dir, data, started) = prologue(config)?;
    let student = build_student(config, data.train.num_classes())?;
    let session = match config.stage {
        Stage::BaselineDirect => {
            let vlm = obtain_vlm(config, &data, &dir)?;
            let anchors = vlm.encode_text(&data.train.class_names, &config.data.prompt_template)?;
            Session {
                models: ModelSet { vlm: Some(vlm), intermediate: None, student: Some(student), align: None },
                objective: Objective::Direct { anchors, temperature: config.temperature()?, order: config.kl_order() },
                predictor: Predictor::Student,
                trainable: &[GROUP_STUDENT],
                kind: CheckpointKind::Student,
                parent: config.encoders.projection.checkpoint.clone(),
            }
        }
        _ => Session {
            models: ModelSet { vlm: None, intermediate: None, student: Some(student), align: None },
            objective: Objective::ClsOnly,
            predictor: Predictor::Student,
            trainable: &[GROUP_STUDENT],
            kind: CheckpointKind::Student,
            parent: None,
        },
    };
    train(config, &data, &dir, session, started)
}

/// Dispatch on `config.stage`.
pub fn run(config: &RunConfig) -> Result<RunRecord> {
    match config.stage {
        Stage::Stage1 => run_stage1(config),
        Stage::Stage2 => run_stage2(config),
        Stage::BaselineNokd | Stage::BaselineDirect => run_baseline(config),
    }
}

/// Restore whatever networks a checkpoint holds, with its own config.
fn models_from_checkpoint(loaded: &Loaded) -> Result<(ModelSet, Option<Predictor>)> {
    let cfg = &loaded.manifest.config;
    let n = loaded.manifest.class_names.len();
    let vlm = if loaded.has_group(GROUP_F_VLM) { Some(vlm_from_checkpoint(loaded)?) } else { None };
    let mut models = ModelSet { vlm, intermediate: None, student: None, align: None };
    let mut predictor = None;
    if loaded.has_group(GROUP_INTERMEDIATE) {
        let mut net = build_intermediate(cfg, n)?;
        loaded.restore(GROUP_INTERMEDIATE, &mut net)?;
        models.intermediate = Some(net);
        predictor = Some(Predictor::Intermediate);
    }
    if loaded.has_group(GROUP_STUDENT) {
        let mut net = build_student(cfg, n)?;
        loaded.restore(GROUP_STUDENT, &mut net)?;
        models.student = Some(net);
        predictor = Some(Predictor::Student);
    }
    Ok((models, predictor))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub kind: CheckpointKind,
    pub top1: f64,
    pub samples: usize,
}

/// Top-1 of a checkpoint on `data`, preprocessed with the checkpoint's own
/// evaluation policy. Projection checkpoints report nearest-anchor accuracy.
pub fn evaluate_on(path: &Path, data: &Dataset) -> Result<EvalReport> {
    let loaded = checkpoint::load(path)?;
    let m = &loaded.manifest;
    if m.class_names.len() != data.num_classes() {
        return Err(DaitError::Core(dait_core::Error::Contract {
            op: "evaluate",
            detail: format!("checkpoint predicts {} classes, dataset has {}", m.class_names.len(), data.num_classes()),
        }));
    }
    let feeder = Feeder::new(data, m.config.data.eval_policy());
    let (models, predictor) = models_from_checkpoint(&loaded)?;
    let top1 = match predictor {
        Some(p) => evaluate_models(&models, p, &feeder, m.config.determinism)?,
        None => {
            let vlm = models.vlm.as_ref().ok_or_else(|| DaitError::Checkpoint("checkpoint holds no model".into()))?;
            let anchors = vlm.encode_text(&data.class_names, &m.config.data.prompt_template)?;
            let z = map_batches(&feeder, m.config.determinism, |x| Ok(vlm.encode_image(x)?))?;
            nearest_anchor_accuracy(&z, anchors.values(), &data.labels())?
        }
    };
    Ok(EvalReport { checkpoint: path.to_path_buf(), kind: m.kind, top1, samples: data.len() })
}

/// Evaluate on the test split of the checkpoint's own dataset.
pub fn evaluate(path: &Path) -> Result<EvalReport> {
    let manifest = checkpoint::read_manifest(path)?;
    let data = load_data(&manifest.config)?;
    evaluate_on(path, &data.test)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRole {
    /// Projected VLM image embeddings.
    Vlm,
    /// Pooled intermediate embeddings.
    Intermediate,
    /// Globally pooled student maps.
    Student,
}

/// Embeddings of `data` from one network in a checkpoint.
pub fn export_features(path: &Path, role: FeatureRole, data: &Dataset) -> Result<FeatureDump> {
    let loaded = checkpoint::load(path)?;
    let cfg = loaded.manifest.config.clone();
    let (models, _) = models_from_checkpoint(&loaded)?;
    let feeder = Feeder::new(data, cfg.data.eval_policy());
    let absent = |g: &str| DaitError::Config { key: "--role".into(), message: format!("checkpoint has no `{g}` network") };
    let features = match role {
        FeatureRole::Vlm => {
            let vlm = models.vlm.as_ref().ok_or_else(|| absent(GROUP_F_VLM))?;
            map_batches(&feeder, cfg.determinism, |x| Ok(vlm.encode_image(x)?))?
        }
        FeatureRole::Intermediate => {
            let net = models.intermediate.as_ref().ok_or_else(|| absent(GROUP_INTERMEDIATE))?;
            map_batches(&feeder, cfg.determinism, |x| Ok(net.forward(x).pooled))?
        }
        FeatureRole::Student => {
            let net = models.student.as_ref().ok_or_else(|| absent(GROUP_STUDENT))?;
            map_batches(&feeder, cfg.determinism, |x| Ok(net.forward(x).pooled().clone()))?
        }
    };
    let source = format!("{}:{:?}", path.display(), role).to_lowercase();
    Ok(FeatureDump::new(features, data.labels(), source)?)
}

/// One axis of a sweep grid: `key=v1,v2,…`. Commas nested in brackets or
/// quotes do not split values.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        let (key, rest) = s.split_once('=').ok_or_else(|| DaitError::Config {
            key: s.into(),
            message: "grid axis must look like key=v1,v2".into(),
        })?;
        let mut values = Vec::new();
        let (mut depth, mut quoted, mut cur) = (0i32, false, String::new());
        for ch in rest.chars() {
            match ch {
                '"' => quoted = !quoted,
                '[' | '{' if !quoted => depth += 1,
                ']' | '}' if !quoted => depth -= 1,
                ',' if depth == 0 && !quoted => {
                    values.push(std::mem::take(&mut cur).trim().to_string());
                    continue;
                }
                _ => {}
            }
            cur.push(ch);
        }
        values.push(cur.trim().to_string());
        if values.iter().any(String::is_empty) {
            return Err(DaitError::Config { key: key.trim().into(), message: "empty grid value".into() });
        }
        Ok(Self { key: key.trim().to_string(), values })
    }
}

/// Cartesian product of the axes as override lists; no axes, no runs.
pub fn expand_grid(axes: &[SweepAxis]) -> Vec<Vec<String>> {
    if axes.is_empty() {
        return Vec::new();
    }
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut next = prefix.clone();
                    next.push(format!("{}={}", axis.key, v));
                    next
                })
            })
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub index: usize,
    pub overrides: Vec<String>,
    pub run_dir: PathBuf,
    pub stage1: Option<RunRecord>,
    pub record: Option<RunRecord>,
    pub error: Option<String>,
}

fn slug(overrides: &[String]) -> String {
    let s: String = overrides
        .iter()
        .map(|o| o.rsplit('.').next().unwrap_or(o))
        .collect::<Vec<_>>()
        .join("_")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    s.chars().take(60).collect()
}

fn toml_path(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

fn run_variant(base: &RunConfig, delta: &[String], dir: &Path, chain: bool) -> (Option<RunRecord>, Result<RunRecord>) {
    let text = base.to_toml();
    let mut overrides = delta.to_vec();
    if chain && base.stage == Stage::Stage2 {
        let mut s1 = overrides.clone();
        s1.push("stage=\"stage1\"".into());
        s1.push(format!("out_dir={}", toml_path(&dir.join("stage1"))));
        let first = match config::resolve(&text, &s1).and_then(|c| run(&c)) {
            Ok(r) => r,
            Err(e) => return (None, Err(e)),
        };
        overrides.push(format!("stage1_checkpoint={}", toml_path(&first.checkpoint)));
        overrides.push(format!("out_dir={}", toml_path(&dir.join("stage2"))));
        let second = config::resolve(&text, &overrides).and_then(|c| run(&c));
        return (Some(first), second);
    }
    overrides.push(format!("out_dir={}", toml_path(dir)));
    (None, config::resolve(&text, &overrides).and_then(|c| run(&c)))
}

/// Run every grid point in its own directory under `base.out_dir`, using up
/// to `jobs` threads. Failures are recorded and do not stop other runs.
/// With `chain`, stage-2 variants first train their own stage-1 teacher.
pub fn sweep(base: &RunConfig, axes: &[SweepAxis], jobs: usize, chain: bool) -> Result<Vec<SweepOutcome>> {
    let grid = expand_grid(axes);
    if grid.is_empty() {
        return Ok(Vec::new());
    }
    fs::create_dir_all(&base.out_dir).map_err(|e| DaitError::io(&base.out_dir, e))?;
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<SweepOutcome>>> = grid.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, grid.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(delta) = grid.get(i) else { break };
                let dir = base.out_dir.join(format!("{i:03}-{}", slug(delta)));
                let (stage1, result) = run_variant(base, delta, &dir, chain);
                if let Err(e) = &result {
                    log::warn!("sweep run {i} failed: {e}");
                }
                let (record, error) = match result {
                    Ok(r) => (Some(r), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                *slots[i].lock().unwrap() =
                    Some(SweepOutcome { index: i, overrides: delta.clone(), run_dir: dir, stage1, record, error });
            });
        }
    });
    let outcomes: Vec<SweepOutcome> =
        slots.into_iter().map(|s| s.into_inner().unwrap().expect("every grid point ran")).collect();
    let path = base.out_dir.join("sweep_summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| DaitError::Ingest(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| DaitError::Ingest(format!("{}: {e}", path.display()));
    w.write_record(["index", "overrides", "status", "final_top1", "run_dir"]).map_err(err)?;
    for o in &outcomes {
        let (status, acc) = match (&o.record, &o.error) {
            (Some(r), _) => ("ok".to_string(), format!("{:.6}", r.final_top1)),
            (None, e) => (format!("failed: {}", e.as_deref().unwrap_or("?")), String::new()),
        };
        w.write_record([o.index.to_string(), o.overrides.join(" "), status, acc, o.run_dir.display().to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| DaitError::io(&path, e))?;
    Ok(outcomes)
}

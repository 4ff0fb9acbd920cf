//! Encoders for the three roles (frozen VLM, intermediate teacher, student),
//! their projection heads, and the freeze contract.
//!
//! Real pretrained backbones plug in through [`ImageBackbone`] /
//! [`TextBackbone`]; the toy implementations here keep every interface and
//! loss pathway alive at desk scale.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::losses::{cls_loss, cosine_rows, cosine_rows_backward, ClassAnchors};
use crate::math::{dot, norm, sqrt, tanh};
use crate::nn::{
    adaptive_avg_pool, adaptive_avg_pool_backward, checksum, global_avg_pool, global_avg_pool_backward,
    relu_backward_in_place, relu_map, relu_matrix, zero_grad, AdamW, AdamWConfig, Conv2d, Linear, Param,
    Parameters,
};
use crate::rng::{derive, hash_str, normal, seeded};
use crate::tensor::{FeatureBatch, FeatureMap, LogitBatch, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    VlmImage,
    VlmText,
    Intermediate,
    Student,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::VlmImage => "vlm_image",
            Role::VlmText => "vlm_text",
            Role::Intermediate => "intermediate",
            Role::Student => "student",
        }
    }

    /// VLM encoders never train.
    pub fn permanently_frozen(self) -> bool {
        matches!(self, Role::VlmImage | Role::VlmText)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Toy,
    ExternalAdapter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    pub role: Role,
    pub kind: EncoderKind,
    pub raw_dim: usize,
    /// Whether a pre-pool feature map is exposed.
    pub spatial: bool,
}

/// Frozen image tower of a vision-language model: images to raw embeddings.
pub trait ImageBackbone: Parameters + Send + Sync {
    fn raw_dim(&self) -> usize;
    fn encode_raw(&self, images: &FeatureMap) -> Result<Matrix>;
}

/// Frozen text tower: prompt strings to raw embeddings in the same raw
/// space as the image tower.
pub trait TextBackbone: Parameters + Send + Sync {
    fn raw_dim(&self) -> usize;
    fn encode_raw(&self, prompts: &[String]) -> Result<Matrix>;
}

/// Substitute `class` for the single `{}` placeholder in `template`.
pub fn render_prompt(template: &str, class: &str) -> Result<String> {
    match template.matches("{}").count() {
        1 => Ok(template.replacen("{}", class, 1)),
        n => Err(Error::Config(format!("prompt template `{template}` must contain exactly one `{{}}`, found {n}"))),
    }
}

/// Rows of `m` orthonormalised in order (modified Gram-Schmidt). Rows that
/// collapse numerically are rejected.
fn orthonormalize_rows(m: &mut Matrix, against: &[Vec<f64>]) -> Result<()> {
    for i in 0..m.rows() {
        let mut v = m.row(i).to_vec();
        for u in against {
            let d = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        for j in 0..i {
            let u = m.row(j).to_vec();
            let d = dot(&v, &u);
            v.iter_mut().zip(&u).for_each(|(a, b)| *a -= d * b);
        }
        let n = norm(&v);
        if n < 1e-9 {
            return Err(Error::degenerate("orthonormalize", format!("row {i} is linearly dependent")));
        }
        m.row_mut(i).iter_mut().zip(&v).for_each(|(o, x)| *o = x / n);
    }
    Ok(())
}

/// Toy VLM image tower: a fixed random orthogonal projection of the
/// flattened image followed by `tanh(gain * .)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyImageEncoder {
    input_dims: [usize; 3],
    raw_dim: usize,
    gain: f64,
    projection: Param,
}

impl ToyImageEncoder {
    pub const DEFAULT_GAIN: f64 = 0.5;

    pub fn new(input_dims: [usize; 3], raw_dim: usize, seed: u64) -> Result<Self> {
        let in_dim: usize = input_dims.iter().product();
        if raw_dim == 0 || raw_dim > in_dim {
            return Err(Error::Config(format!("toy VLM raw_dim {raw_dim} must be in 1..={in_dim}")));
        }
        let mut rng = seeded(seed);
        let data = (0..raw_dim * in_dim).map(|_| normal(&mut rng)).collect();
        let mut proj = Matrix::from_vec(raw_dim, in_dim, data)?;
        orthonormalize_rows(&mut proj, &[])?;
        Ok(Self { input_dims, raw_dim, gain: Self::DEFAULT_GAIN, projection: Param::new(proj.into_vec()) })
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.input_dims
    }
}

impl Parameters for ToyImageEncoder {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.projection);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.projection);
    }
}

impl ImageBackbone for ToyImageEncoder {
    fn raw_dim(&self) -> usize {
        self.raw_dim
    }

    fn encode_raw(&self, images: &FeatureMap) -> Result<Matrix> {
        let [_, c, h, w] = images.dims();
        if [c, h, w] != self.input_dims {
            return Err(Error::contract(
                "vlm_encode_image",
                format!("image shape {:?}, encoder expects {:?}", [c, h, w], self.input_dims),
            ));
        }
        let in_dim = c * h * w;
        let mut out = Matrix::zeros(images.batch(), self.raw_dim);
        for b in 0..images.batch() {
            let x = images.sample(b);
            for (r, o) in out.row_mut(b).iter_mut().enumerate() {
                let p = &self.projection.value[r * in_dim..(r + 1) * in_dim];
                *o = tanh(self.gain * dot(p, x));
            }
        }
        Ok(out)
    }
}

/// Toy VLM text tower: each prompt maps to a unit vector
/// `sqrt(s) * u0 + sqrt(1 - s) * e_p`, where `u0` is a shared direction and
/// the `e_p` are orthonormal and seeded by the prompt text. Distinct
/// prompts in one call therefore have pairwise cosine exactly `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTextEncoder {
    raw_dim: usize,
    separation: f64,
    seed: u64,
}

impl ToyTextEncoder {
    pub fn new(raw_dim: usize, separation: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&separation) {
            return Err(Error::Config(format!("text separation {separation} must be in [0, 1)")));
        }
        Ok(Self { raw_dim, separation, seed })
    }

    /// Configured pairwise cosine between distinct prompts.
    pub fn separation(&self) -> f64 {
        self.separation
    }
}

impl Parameters for ToyTextEncoder {
    fn visit(&self, _f: &mut dyn FnMut(&Param)) {}
    fn visit_mut(&mut self, _f: &mut dyn FnMut(&mut Param)) {}
}

impl TextBackbone for ToyTextEncoder {
    fn raw_dim(&self) -> usize {
        self.raw_dim
    }

    fn encode_raw(&self, prompts: &[String]) -> Result<Matrix> {
        let n = prompts.len();
        if n + 1 > self.raw_dim {
            return Err(Error::Config(format!("toy text encoder with raw_dim {} cannot embed {n} prompts", self.raw_dim)));
        }
        for (i, p) in prompts.iter().enumerate() {
            if prompts[..i].contains(p) {
                return Err(Error::contract("vlm_encode_text", format!("duplicate prompt `{p}`")));
            }
        }
        let mut rng = seeded(self.seed);
        let mut shared: Vec<f64> = (0..self.raw_dim).map(|_| normal(&mut rng)).collect();
        let s = norm(&shared);
        shared.iter_mut().for_each(|v| *v /= s);

        let mut dirs = Matrix::zeros(n, self.raw_dim);
        for (i, p) in prompts.iter().enumerate() {
            let mut r = derive(self.seed, hash_str(p));
            dirs.row_mut(i).iter_mut().for_each(|v| *v = normal(&mut r));
        }
        orthonormalize_rows(&mut dirs, core::slice::from_ref(&shared))?;

        let (a, b) = (sqrt(self.separation), sqrt(1.0 - self.separation));
        let mut out = Matrix::zeros(n, self.raw_dim);
        for i in 0..n {
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = a * shared[j] + b * dirs.get(i, j);
            }
        }
        Ok(out)
    }
}

/// Two-layer perceptron `Linear -> ReLU -> Linear`; the condensing head
/// shared by the VLM image and text branches.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMlp {
    pub l1: Linear,
    pub l2: Linear,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    input: Matrix,
    hidden: Matrix,
}

impl ProjectionMlp {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        Self { l1: Linear::new(in_dim, hidden, &mut rng), l2: Linear::new(hidden, out_dim, &mut rng) }
    }

    pub fn in_dim(&self) -> usize {
        self.l1.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.l2.out_dim()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        self.l2.forward(&relu_matrix(&self.l1.forward(x)))
    }

    pub fn forward_traced(&self, x: &Matrix) -> (Matrix, MlpTrace) {
        let hidden = relu_matrix(&self.l1.forward(x));
        let y = self.l2.forward(&hidden);
        (y, MlpTrace { input: x.clone(), hidden })
    }

    pub fn backward(&mut self, trace: &MlpTrace, grad_out: &Matrix) -> Matrix {
        let mut gh = self.l2.backward(&trace.hidden, grad_out);
        relu_backward_in_place(trace.hidden.as_slice(), gh.as_mut_slice());
        self.l1.backward(&trace.input, &gh)
    }
}

impl Parameters for ProjectionMlp {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.l1.visit(f);
        self.l2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.l1.visit_mut(f);
        self.l2.visit_mut(f);
    }
}

/// The frozen VLM: image and text towers plus the shared projection head.
pub struct Vlm {
    pub image: Box<dyn ImageBackbone>,
    pub text: Box<dyn TextBackbone>,
    pub head: ProjectionMlp,
}

impl Vlm {
    pub fn new(image: Box<dyn ImageBackbone>, text: Box<dyn TextBackbone>, head: ProjectionMlp) -> Result<Self> {
        if image.raw_dim() != text.raw_dim() || head.in_dim() != image.raw_dim() {
            return Err(Error::Config(format!(
                "VLM raw dims disagree: image {}, text {}, projection input {}",
                image.raw_dim(),
                text.raw_dim(),
                head.in_dim()
            )));
        }
        Ok(Self { image, text, head })
    }

    /// Projected image embeddings `z_v`, `(B, D)`.
    pub fn encode_image(&self, images: &FeatureMap) -> Result<FeatureBatch> {
        Ok(self.head.forward(&self.image.encode_raw(images)?))
    }

    /// Raw text embeddings of `template` rendered for each class, in class order.
    pub fn encode_text_raw(&self, class_names: &[String], template: &str) -> Result<Matrix> {
        let prompts = class_names.iter().map(|c| render_prompt(template, c)).collect::<Result<Vec<_>>>()?;
        self.text.encode_raw(&prompts)
    }

    /// Projected class anchors `t_c`, `(N, D)`.
    pub fn encode_text(&self, class_names: &[String], template: &str) -> Result<ClassAnchors> {
        let raw = self.encode_text_raw(class_names, template)?;
        ClassAnchors::new(self.head.forward(&raw), class_names.to_vec())
    }

    pub fn projection_dim(&self) -> usize {
        self.head.out_dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionFitConfig {
    pub epochs: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub lr: f64,
    /// Multiplier on cosine similarities before the softmax.
    pub logit_scale: f64,
    pub seed: u64,
}

impl Default for ProjectionFitConfig {
    fn default() -> Self {
        Self { epochs: 200, hidden: 128, out_dim: 64, lr: 3e-3, logit_scale: 10.0, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct ProjectionFit {
    pub head: ProjectionMlp,
    /// Loss before each update, then the final loss: `epochs + 1` entries.
    pub loss_trace: Vec<f64>,
}

/// Cosine-logit cross-entropy of projected features against projected
/// anchors, with gradients accumulated into `head`.
fn projection_objective(
    head: &mut ProjectionMlp,
    raw: &Matrix,
    anchors_raw: &Matrix,
    labels: &[usize],
    scale: f64,
    backward: bool,
) -> Result<f64> {
    let (z, zt) = head.forward_traced(raw);
    let (a, at) = head.forward_traced(anchors_raw);
    let cos = cosine_rows(&z, &a)?;
    let ce = cls_loss(&cos.scale(scale), labels)?;
    if backward {
        let gcos = ce.grad.scale(scale);
        let (gz, ga) = cosine_rows_backward(&z, &a, &cos, &gcos);
        head.backward(&zt, &gz);
        head.backward(&at, &ga);
    }
    Ok(ce.value)
}

/// Fit the VLM projection head on frozen raw features so projected image
/// features classify against projected class anchors by cosine. Full-batch
/// AdamW. The returned head is meant to be frozen afterwards.
pub fn fit_projection_head(
    raw_features: &Matrix,
    anchors_raw: &Matrix,
    labels: &[usize],
    config: &ProjectionFitConfig,
) -> Result<ProjectionFit> {
    if raw_features.cols() != anchors_raw.cols() {
        return Err(Error::contract(
            "fit_projection_head",
            format!("feature dim {} vs anchor dim {}", raw_features.cols(), anchors_raw.cols()),
        ));
    }
    let mut head = ProjectionMlp::new(raw_features.cols(), config.hidden, config.out_dim, config.seed);
    let mut opt = AdamW::new(AdamWConfig { lr: config.lr, weight_decay: 0.0, ..Default::default() });
    let mut trace = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..config.epochs {
        zero_grad(&mut head);
        let loss = projection_objective(&mut head, raw_features, anchors_raw, labels, config.logit_scale, true)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, detail: format!("projection loss {loss}") });
        }
        trace.push(loss);
        opt.step(&mut head, config.lr);
    }
    let last = projection_objective(&mut head, raw_features, anchors_raw, labels, config.logit_scale, false)?;
    if !last.is_finite() {
        return Err(Error::Diverged { epoch: config.epochs, detail: format!("projection loss {last}") });
    }
    trace.push(last);
    zero_grad(&mut head);
    Ok(ProjectionFit { head, loss_trace: trace })
}

/// Fraction of rows whose most similar anchor (by cosine) is their label.
pub fn nearest_anchor_accuracy(features: &Matrix, anchors: &Matrix, labels: &[usize]) -> Result<f64> {
    let cos = cosine_rows(features, anchors)?;
    let pred = cos.argmax_rows();
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

/// Layout of a plain `conv3x3 -> ReLU` stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStackConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl ConvStackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "conv stack needs matching non-empty channels/strides, got {:?} / {:?}",
                self.channels, self.strides
            )));
        }
        if self.channels.contains(&0) || self.strides.contains(&0) {
            return Err(Error::Config("conv stack widths and strides must be positive".into()));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&self.in_channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    convs: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct ConvTrace {
    /// Input to each conv, then the final activation.
    activations: Vec<FeatureMap>,
}

impl ConvTrace {
    pub fn output(&self) -> &FeatureMap {
        self.activations.last().expect("trace holds at least the input")
    }
}

impl ConvStack {
    pub fn new(config: &ConvStackConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut in_c = config.in_channels;
        let mut convs = Vec::new();
        for (&c, &s) in config.channels.iter().zip(&config.strides) {
            convs.push(Conv2d::new(in_c, c, 3, s, 1, &mut rng));
            in_c = c;
        }
        Ok(Self { convs })
    }

    pub fn out_channels(&self) -> usize {
        self.convs.last().map_or(0, |c| c.out_channels())
    }

    pub fn forward(&self, x: &FeatureMap) -> ConvTrace {
        let mut activations = Vec::with_capacity(self.convs.len() + 1);
        activations.push(x.clone());
        for conv in &self.convs {
            let y = relu_map(&conv.forward(activations.last().unwrap()));
            activations.push(y);
        }
        ConvTrace { activations }
    }

    pub fn backward(&mut self, trace: &ConvTrace, grad_out: &FeatureMap) {
        let mut g = grad_out.clone();
        for (i, conv) in self.convs.iter_mut().enumerate().rev() {
            relu_backward_in_place(trace.activations[i + 1].as_slice(), g.as_mut_slice());
            let gx = conv.backward(&trace.activations[i], &g);
            if i > 0 {
                g = gx;
            }
        }
    }
}

impl Parameters for ConvStack {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.convs.iter().for_each(|c| c.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.convs.iter_mut().for_each(|c| c.visit_mut(f));
    }
}

/// Intermediate teacher: conv stack, global average pool, linear projection
/// to the VLM embedding width, linear classifier on the projection.
#[derive(Debug, Clone, PartialEq)]
pub struct IntermediateNet {
    pub backbone: ConvStack,
    pub proj: Linear,
    pub head: Linear,
}

pub struct IntermediateForward {
    /// `z~_t`, `(B, D)`.
    pub pooled: FeatureBatch,
    /// Last pre-pool map, `(B, C, H, W)`.
    pub map: FeatureMap,
    pub logits: LogitBatch,
    trace: ConvTrace,
    gap: Matrix,
}

impl IntermediateNet {
    pub fn new(config: &ConvStackConfig, embed_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        let backbone = ConvStack::new(config, seed)?;
        let mut rng = derive(seed, 1);
        let proj = Linear::new(backbone.out_channels(), embed_dim, &mut rng);
        let head = Linear::new(embed_dim, num_classes, &mut rng);
        Ok(Self { backbone, proj, head })
    }

    pub fn map_channels(&self) -> usize {
        self.backbone.out_channels()
    }

    pub fn forward(&self, images: &FeatureMap) -> IntermediateForward {
        let trace = self.backbone.forward(images);
        let map = trace.output().clone();
        let gap = global_avg_pool(&map);
        let pooled = self.proj.forward(&gap);
        let logits = self.head.forward(&pooled);
        IntermediateForward { pooled, map, logits, trace, gap }
    }

    /// Back-propagate losses on the pooled embedding and/or logits.
    pub fn backward(&mut self, fwd: &IntermediateForward, grad_pooled: Option<&Matrix>, grad_logits: Option<&Matrix>) {
        let mut g = match grad_logits {
            Some(gl) => self.head.backward(&fwd.pooled, gl),
            None => Matrix::zeros(fwd.pooled.rows(), fwd.pooled.cols()),
        };
        if let Some(gp) = grad_pooled {
            g.as_mut_slice().iter_mut().zip(gp.as_slice()).for_each(|(a, b)| *a += b);
        }
        let g_gap = self.proj.backward(&fwd.gap, &g);
        let g_map = global_avg_pool_backward(&g_gap, fwd.map.dims());
        self.backbone.backward(&fwd.trace, &g_map);
    }
}

impl Parameters for IntermediateNet {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.backbone.visit(f);
        self.proj.visit(f);
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.backbone.visit_mut(f);
        self.proj.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Lightweight student: conv stack, a linear classifier on the pooled raw
/// map, and a pooled projection used only when distilling straight from
/// VLM embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentNet {
    pub backbone: ConvStack,
    pub head: Linear,
    pub direct_proj: Linear,
}

/// `f_stu`: 1x1 convolution lifting student channels to the teacher's.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAlign(pub Conv2d);

impl ChannelAlign {
    pub fn new(student_channels: usize, teacher_channels: usize, seed: u64) -> Self {
        Self(Conv2d::new(student_channels, teacher_channels, 1, 1, 0, &mut seeded(seed)))
    }

    pub fn identity(channels: usize) -> Self {
        Self(Conv2d::identity_1x1(channels, channels))
    }
}

impl Parameters for ChannelAlign {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.0.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.0.visit_mut(f);
    }
}

pub struct StudentForward {
    /// Raw student map before channel alignment.
    pub map: FeatureMap,
    pub logits: LogitBatch,
    trace: ConvTrace,
    gap: Matrix,
}

impl StudentForward {
    pub fn pooled(&self) -> &Matrix {
        &self.gap
    }
}

impl StudentNet {
    pub fn new(config: &ConvStackConfig, embed_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        let backbone = ConvStack::new(config, seed)?;
        let mut rng = derive(seed, 2);
        let head = Linear::new(backbone.out_channels(), num_classes, &mut rng);
        let direct_proj = Linear::new(backbone.out_channels(), embed_dim, &mut rng);
        Ok(Self { backbone, head, direct_proj })
    }

    pub fn map_channels(&self) -> usize {
        self.backbone.out_channels()
    }

    pub fn forward(&self, images: &FeatureMap) -> StudentForward {
        let trace = self.backbone.forward(images);
        let map = trace.output().clone();
        let gap = global_avg_pool(&map);
        let logits = self.head.forward(&gap);
        StudentForward { map, logits, trace, gap }
    }

    /// Pooled embedding in VLM space, for direct distillation.
    pub fn direct_embedding(&self, fwd: &StudentForward) -> Matrix {
        self.direct_proj.forward(&fwd.gap)
    }

    /// Back-propagate losses on the raw map, the logits, and/or the direct
    /// embedding.
    pub fn backward(
        &mut self,
        fwd: &StudentForward,
        grad_map: Option<&FeatureMap>,
        grad_logits: Option<&Matrix>,
        grad_direct: Option<&Matrix>,
    ) {
        let mut g_gap = Matrix::zeros(fwd.gap.rows(), fwd.gap.cols());
        if let Some(gl) = grad_logits {
            let g = self.head.backward(&fwd.gap, gl);
            g_gap.as_mut_slice().iter_mut().zip(g.as_slice()).for_each(|(a, b)| *a += b);
        }
        if let Some(gd) = grad_direct {
            let g = self.direct_proj.backward(&fwd.gap, gd);
            g_gap.as_mut_slice().iter_mut().zip(g.as_slice()).for_each(|(a, b)| *a += b);
        }
        let mut g_map = global_avg_pool_backward(&g_gap, fwd.map.dims());
        if let Some(gm) = grad_map {
            g_map.as_mut_slice().iter_mut().zip(gm.as_slice()).for_each(|(a, b)| *a += b);
        }
        self.backbone.backward(&fwd.trace, &g_map);
    }
}

impl Parameters for StudentNet {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.backbone.visit(f);
        self.head.visit(f);
        self.direct_proj.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.backbone.visit_mut(f);
        self.head.visit_mut(f);
        self.direct_proj.visit_mut(f);
    }
}

/// Student map after `f_stu` and spatial harmonisation against the teacher
/// map, ready for the spatial alignment loss.
pub struct AlignedPair {
    pub student: FeatureMap,
    pub teacher: FeatureMap,
    aligned_full: FeatureMap,
}

/// Lift the student map to the teacher's channel count with `align`, then
/// adaptively pool both maps to the smaller spatial grid.
pub fn align_maps(align: &ChannelAlign, student_map: &FeatureMap, teacher_map: &FeatureMap) -> Result<AlignedPair> {
    if align.0.in_channels() != student_map.channels() {
        return Err(Error::contract(
            "student_forward",
            format!("f_stu expects {} channels, student map has {}", align.0.in_channels(), student_map.channels()),
        ));
    }
    let aligned_full = align.0.forward(student_map);
    if aligned_full.channels() != teacher_map.channels() {
        return Err(Error::contract(
            "student_forward",
            format!("aligned map has {} channels, teacher map {}", aligned_full.channels(), teacher_map.channels()),
        ));
    }
    let h = aligned_full.height().min(teacher_map.height());
    let w = aligned_full.width().min(teacher_map.width());
    Ok(AlignedPair {
        student: adaptive_avg_pool(&aligned_full, h, w),
        teacher: adaptive_avg_pool(teacher_map, h, w),
        aligned_full,
    })
}

/// Gradient of a loss on `pair.student` with respect to the raw student
/// map; accumulates `f_stu` gradients.
pub fn align_maps_backward(
    align: &mut ChannelAlign,
    student_map: &FeatureMap,
    pair: &AlignedPair,
    grad_student: &FeatureMap,
) -> FeatureMap {
    let g_full = adaptive_avg_pool_backward(grad_student, pair.aligned_full.dims());
    align.0.backward(student_map, &g_full)
}

/// Per-group trainability flags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainabilityMask(BTreeMap<String, bool>);

impl TrainabilityMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, group: &str, trainable: bool) -> Self {
        self.0.insert(group.to_string(), trainable);
        self
    }

    pub fn get(&self, group: &str) -> Option<bool> {
        self.0.get(group).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, bool)> {
        self.0.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Named parameter groups of a model collection.
pub trait ParamGroups {
    fn group_names(&self) -> Vec<&'static str>;
    fn group(&self, name: &str) -> Option<&dyn Parameters>;
}

/// Snapshot taken when a mask is applied: frozen groups must stay
/// bit-identical until the guard is dropped.
#[derive(Debug, Clone)]
pub struct FreezeGuard {
    groups: BTreeMap<String, (bool, u64)>,
}

impl FreezeGuard {
    /// Apply `mask`; groups it does not mention default to frozen.
    pub fn apply(mask: &TrainabilityMask, models: &dyn ParamGroups) -> Result<Self> {
        let names = models.group_names();
        if let Some((bad, _)) = mask.iter().find(|(g, _)| !names.contains(g)) {
            return Err(Error::UnknownGroup(bad.to_string()));
        }
        let mut groups = BTreeMap::new();
        for name in names {
            let params = models.group(name).expect("listed group exists");
            let trainable = mask.get(name).unwrap_or(false);
            groups.insert(name.to_string(), (trainable, checksum(params)));
        }
        Ok(Self { groups })
    }

    pub fn is_trainable(&self, group: &str) -> Result<bool> {
        self.groups.get(group).map(|g| g.0).ok_or_else(|| Error::UnknownGroup(group.to_string()))
    }

    /// Checksum recorded for `group` when the mask was applied.
    pub fn recorded_checksum(&self, group: &str) -> Result<u64> {
        self.groups.get(group).map(|g| g.1).ok_or_else(|| Error::UnknownGroup(group.to_string()))
    }

    /// True iff the group's parameters are bit-identical to the snapshot.
    pub fn assert_frozen(&self, models: &dyn ParamGroups, group: &str) -> Result<bool> {
        let recorded = self.recorded_checksum(group)?;
        let params = models.group(group).ok_or_else(|| Error::UnknownGroup(group.to_string()))?;
        Ok(checksum(params) == recorded)
    }

    /// Fail on the first frozen group whose parameters changed.
    pub fn verify(&self, models: &dyn ParamGroups) -> Result<()> {
        for (name, &(trainable, _)) in &self.groups {
            if !trainable && !self.assert_frozen(models, name)? {
                return Err(Error::FrozenMutated(name.clone()));
            }
        }
        Ok(())
    }
}

/// All models of a run, grouped as `vlm`, `f_vlm`, `intermediate`,
/// `student`, `f_stu`.
pub struct ModelSet {
    pub vlm: Option<Vlm>,
    pub intermediate: Option<IntermediateNet>,
    pub student: Option<StudentNet>,
    pub align: Option<ChannelAlign>,
}

pub const GROUP_VLM: &str = "vlm";
pub const GROUP_F_VLM: &str = "f_vlm";
pub const GROUP_INTERMEDIATE: &str = "intermediate";
pub const GROUP_STUDENT: &str = "student";
pub const GROUP_F_STU: &str = "f_stu";

struct Empty;

impl Parameters for Empty {
    fn visit(&self, _f: &mut dyn FnMut(&Param)) {}
    fn visit_mut(&mut self, _f: &mut dyn FnMut(&mut Param)) {}
}

static EMPTY: Empty = Empty;

impl ParamGroups for ModelSet {
    fn group_names(&self) -> Vec<&'static str> {
        alloc::vec![GROUP_VLM, GROUP_F_VLM, GROUP_INTERMEDIATE, GROUP_STUDENT, GROUP_F_STU]
    }

    fn group(&self, name: &str) -> Option<&dyn Parameters> {
        match name {
            GROUP_VLM => Some(self.vlm.as_ref().map_or(&EMPTY as &dyn Parameters, |v| v)),
            GROUP_F_VLM => Some(self.vlm.as_ref().map_or(&EMPTY as &dyn Parameters, |v| &v.head)),
            GROUP_INTERMEDIATE => Some(self.intermediate.as_ref().map_or(&EMPTY as &dyn Parameters, |i| i)),
            GROUP_STUDENT => Some(self.student.as_ref().map_or(&EMPTY as &dyn Parameters, |s| s)),
            GROUP_F_STU => Some(self.align.as_ref().map_or(&EMPTY as &dyn Parameters, |a| a)),
            _ => None,
        }
    }
}

impl Parameters for Vlm {
    /// Tower weights only; the projection head is its own group.
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.image.visit(f);
        self.text.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.image.visit_mut(f);
        self.text.visit_mut(f);
    }
}

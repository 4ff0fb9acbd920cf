//! Datasets, the synthetic fixture, stratified subsampling and augmentation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::{ceil, exp, ln, sqrt};
use crate::rng::{derive, normal, shuffle, uniform};
use crate::tensor::FeatureMap;
use crate::{Error, Result};

/// One `C x H x W` image, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::contract("Image::new", format!("{} values for {channels}x{height}x{width}", data.len())));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub image: Image,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn new(items: Vec<Item>, class_names: Vec<String>, split: Split) -> Result<Self> {
        if let Some(bad) = items.iter().find(|i| i.label >= class_names.len()) {
            return Err(Error::contract(
                "Dataset::new",
                format!("label {} with {} classes", bad.label, class_names.len()),
            ));
        }
        Ok(Self { items, class_names, split })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        self.items.iter().for_each(|i| counts[i.label] += 1);
        counts
    }

    /// Stack the images at `idx` into a batch; all must share one shape.
    pub fn batch(&self, idx: &[usize]) -> Result<(FeatureMap, Vec<usize>)> {
        let images: Vec<&Image> = idx.iter().map(|&i| &self.items[i].image).collect();
        let labels = idx.iter().map(|&i| self.items[i].label).collect();
        Ok((stack_images(&images)?, labels))
    }
}

pub fn stack_images(images: &[&Image]) -> Result<FeatureMap> {
    let Some(first) = images.first() else {
        return Err(Error::contract("stack_images", "empty batch"));
    };
    let [c, h, w] = first.dims();
    let slices: Vec<&[f64]> = images.iter().map(|i| i.data.as_slice()).collect();
    if images.iter().any(|i| i.dims() != [c, h, w]) {
        return Err(Error::contract("stack_images", "images of different sizes in one batch"));
    }
    FeatureMap::stack(&slices, c, h, w)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_side: usize,
    /// Amplitude of the class-specific pattern; 0 makes classes identical.
    pub separation: f64,
    /// Standard deviation of i.i.d. pixel noise.
    pub noise: f64,
    /// Amplitude of one class-agnostic distractor blob per image.
    pub distractor: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { num_classes: 4, per_class: 100, image_side: 32, separation: 1.0, noise: 1.0, distractor: 1.0, seed: 7 }
    }
}

const BLOBS_PER_CLASS: usize = 3;

struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    color: [f64; 3],
}

impl Blob {
    fn random(rng: &mut crate::rng::SeededRng, side: f64) -> Self {
        let mut color = [normal(rng), normal(rng), normal(rng)];
        let n = sqrt(color.iter().map(|c| c * c).sum::<f64>()).max(1e-9);
        color.iter_mut().for_each(|c| *c /= n);
        Self {
            cy: uniform(rng, 0.15 * side, 0.85 * side),
            cx: uniform(rng, 0.15 * side, 0.85 * side),
            sigma: uniform(rng, side / 12.0, side / 6.0),
            color,
        }
    }

    fn paint(&self, img: &mut Image, amplitude: f64) {
        for y in 0..img.height {
            for x in 0..img.width {
                let (dy, dx) = (y as f64 - self.cy, x as f64 - self.cx);
                let d2 = dy * dy + dx * dx;
                let v = amplitude * exp(-d2 / (2.0 * self.sigma * self.sigma));
                for c in 0..img.channels.min(3) {
                    let i = (c * img.height + y) * img.width + x;
                    img.data[i] += v * self.color[c];
                }
            }
        }
    }
}

/// Class prototypes: a few coloured Gaussian blobs per class, scaled to unit
/// RMS per pixel.
pub fn synthetic_prototypes(config: &SyntheticConfig) -> Vec<Image> {
    let s = config.image_side;
    (0..config.num_classes)
        .map(|c| {
            let mut rng = derive(config.seed, 0xC1A5_5000 + c as u64);
            let mut img = Image::zeros(3, s, s);
            for _ in 0..BLOBS_PER_CLASS {
                Blob::random(&mut rng, s as f64).paint(&mut img, 1.0);
            }
            let rms = sqrt(img.data.iter().map(|v| v * v).sum::<f64>() / img.data.len() as f64).max(1e-12);
            img.data.iter_mut().for_each(|v| *v /= rms);
            img
        })
        .collect()
}

/// Deterministic class-structured images: `separation * prototype + one
/// random distractor blob + pixel noise`. Each class's first 80% of samples
/// go to train, the rest to test.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(Dataset, Dataset)> {
    if config.num_classes < 2 || config.per_class < 2 {
        return Err(Error::Config(format!(
            "synthetic fixture needs >= 2 classes and >= 2 samples per class, got {} x {}",
            config.num_classes, config.per_class
        )));
    }
    if config.image_side == 0 {
        return Err(Error::Config("image_side must be positive".into()));
    }
    let s = config.image_side;
    let protos = synthetic_prototypes(config);
    let n_train = ((config.per_class * 4) / 5).clamp(1, config.per_class - 1);
    let class_names: Vec<String> = (0..config.num_classes).map(|c| format!("class_{c:02}")).collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, proto) in protos.iter().enumerate() {
        for j in 0..config.per_class {
            let mut rng = derive(config.seed, ((c as u64) << 32) | j as u64);
            let mut img = Image::zeros(3, s, s);
            img.data.iter_mut().zip(&proto.data).for_each(|(o, p)| *o = config.separation * p);
            if config.distractor != 0.0 {
                Blob::random(&mut rng, s as f64).paint(&mut img, config.distractor);
            }
            img.data.iter_mut().for_each(|v| *v += config.noise * normal(&mut rng));
            let item = Item { image: img, label: c };
            if j < n_train {
                train.push(item);
            } else {
                test.push(item);
            }
        }
    }
    Ok((
        Dataset::new(train, class_names.clone(), Split::Train)?,
        Dataset::new(test, class_names, Split::Test)?,
    ))
}

/// Per-class stratified subsample keeping `ceil(ratio * count_c)` items of
/// each class, in original order.
pub fn subsample(dataset: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("subsample ratio {ratio} outside (0, 1]")));
    }
    if ratio == 1.0 {
        return Ok(dataset.clone());
    }
    let mut keep = vec![false; dataset.len()];
    for c in 0..dataset.num_classes() {
        let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.items[i].label == c).collect();
        // Guard against 0.3 * 10 = 3.0000000000000004 rounding up to 4.
        let want = ceil(ratio * idx.len() as f64 - 1e-9) as usize;
        let mut rng = derive(seed, c as u64);
        shuffle(&mut idx, &mut rng);
        idx.iter().take(want).for_each(|&i| keep[i] = true);
    }
    let items = dataset.items.iter().zip(&keep).filter(|(_, &k)| k).map(|(i, _)| i.clone()).collect();
    Dataset::new(items, dataset.class_names.clone(), dataset.split)
}

#[derive(Debug, Clone, PartialEq)]
pub enum AugmentOp {
    /// Crop a random region covering `scale` of the area (aspect ratio in
    /// `[3/4, 4/3]`) and resize it to `side`.
    RandomResizedCrop { scale: (f64, f64), side: usize },
    HorizontalFlip { p: f64 },
    /// Random factors in `[1 - s, 1 + s]` for each strength.
    ColorJitter { brightness: f64, contrast: f64, saturation: f64 },
    Resize { side: usize },
    Normalize { mean: Vec<f64>, std: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub ops: Vec<AugmentOp>,
    pub seed: u64,
}

impl AugmentPolicy {
    /// Resize and normalise only.
    pub fn plain(side: usize, mean: Vec<f64>, std: Vec<f64>, seed: u64) -> Self {
        Self { ops: vec![AugmentOp::Resize { side }, AugmentOp::Normalize { mean, std }], seed }
    }

    /// Crop, flip, mild jitter, resize, normalise.
    pub fn training(side: usize, mean: Vec<f64>, std: Vec<f64>, seed: u64) -> Self {
        Self {
            ops: vec![
                AugmentOp::RandomResizedCrop { scale: (0.8, 1.0), side },
                AugmentOp::HorizontalFlip { p: 0.5 },
                AugmentOp::ColorJitter { brightness: 0.1, contrast: 0.1, saturation: 0.0 },
                AugmentOp::Resize { side },
                AugmentOp::Normalize { mean, std },
            ],
            seed,
        }
    }

    /// Output side length, fixed by the last sizing op.
    pub fn side(&self) -> Option<usize> {
        self.ops.iter().rev().find_map(|op| match op {
            AugmentOp::RandomResizedCrop { side, .. } | AugmentOp::Resize { side } => Some(*side),
            _ => None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.side().is_none_or(|s| s == 0) {
            return Err(Error::Config("augmentation policy needs a resize or crop with positive side".into()));
        }
        for op in &self.ops {
            match op {
                AugmentOp::RandomResizedCrop { scale: (lo, hi), .. } if !(0.0 < *lo && lo <= hi && *hi <= 1.0) => {
                    return Err(Error::Config(format!("crop scale ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
                }
                AugmentOp::HorizontalFlip { p } if !(0.0..=1.0).contains(p) => {
                    return Err(Error::Config(format!("flip probability {p} outside [0, 1]")));
                }
                AugmentOp::ColorJitter { brightness, contrast, saturation }
                    if [brightness, contrast, saturation].iter().any(|v| !(0.0..1.0).contains(*v)) =>
                {
                    return Err(Error::Config("jitter strengths must be in [0, 1)".into()));
                }
                AugmentOp::Normalize { mean, std } if std.iter().any(|s| *s <= 0.0) || mean.len() != std.len() => {
                    return Err(Error::Config("normalize needs positive std and matching mean/std lengths".into()));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Apply `policy` to `image`. Deterministic in `(policy.seed, sample_seed)`.
pub fn augment(image: &Image, policy: &AugmentPolicy, sample_seed: u64) -> Image {
    let mut rng = derive(policy.seed, sample_seed);
    let mut img = image.clone();
    for op in &policy.ops {
        img = match op {
            AugmentOp::RandomResizedCrop { scale, side } => {
                let area = (img.height * img.width) as f64;
                let target = area * uniform(&mut rng, scale.0, scale.1);
                let ratio = exp(uniform(&mut rng, ln(3.0 / 4.0), ln(4.0 / 3.0)));
                let cw = (sqrt(target * ratio) + 0.5) as usize;
                let ch = (sqrt(target / ratio) + 0.5) as usize;
                let cw = cw.clamp(1, img.width);
                let ch = ch.clamp(1, img.height);
                let top = rng_index(&mut rng, img.height - ch + 1);
                let left = rng_index(&mut rng, img.width - cw + 1);
                resize_bilinear(&crop(&img, top, left, ch, cw), *side, *side)
            }
            AugmentOp::HorizontalFlip { p } => {
                if uniform(&mut rng, 0.0, 1.0) < *p {
                    flip_horizontal(&img)
                } else {
                    img
                }
            }
            AugmentOp::ColorJitter { brightness, contrast, saturation } => {
                let b = uniform(&mut rng, 1.0 - brightness, 1.0 + brightness);
                let c = uniform(&mut rng, 1.0 - contrast, 1.0 + contrast);
                let s = uniform(&mut rng, 1.0 - saturation, 1.0 + saturation);
                color_jitter(&img, b, c, s)
            }
            AugmentOp::Resize { side } => resize_bilinear(&img, *side, *side),
            AugmentOp::Normalize { mean, std } => normalize(&img, mean, std),
        };
    }
    img
}

fn rng_index(rng: &mut crate::rng::SeededRng, n: usize) -> usize {
    ((uniform(rng, 0.0, 1.0) * n as f64) as usize).min(n.saturating_sub(1))
}

pub fn crop(img: &Image, top: usize, left: usize, height: usize, width: usize) -> Image {
    let mut out = Image::zeros(img.channels, height, width);
    for c in 0..img.channels {
        for y in 0..height {
            for x in 0..width {
                out.set(c, y, x, img.get(c, top + y, left + x));
            }
        }
    }
    out
}

pub fn flip_horizontal(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                out.set(c, y, x, img.get(c, y, img.width - 1 - x));
            }
        }
    }
    out
}

/// Bilinear resampling with half-pixel centres; identity when the size
/// already matches.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Image {
    if (img.height, img.width) == (height, width) {
        return img.clone();
    }
    let mut out = Image::zeros(img.channels, height, width);
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    let src = |pos: f64, len: usize| -> (usize, usize, f64) {
        let p = pos.clamp(0.0, (len - 1) as f64);
        let i0 = p as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, p - i0 as f64)
    };
    for y in 0..height {
        let (y0, y1, fy) = src((y as f64 + 0.5) * sy - 0.5, img.height);
        for x in 0..width {
            let (x0, x1, fx) = src((x as f64 + 0.5) * sx - 0.5, img.width);
            for c in 0..img.channels {
                let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
                let bot = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
                out.set(c, y, x, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

fn grayscale(img: &Image, y: usize, x: usize) -> f64 {
    if img.channels >= 3 {
        0.299 * img.get(0, y, x) + 0.587 * img.get(1, y, x) + 0.114 * img.get(2, y, x)
    } else {
        img.get(0, y, x)
    }
}

pub fn color_jitter(img: &Image, brightness: f64, contrast: f64, saturation: f64) -> Image {
    let mut out = img.clone();
    out.data.iter_mut().for_each(|v| *v *= brightness);
    let n = (out.height * out.width) as f64;
    let mut mean = 0.0;
    for y in 0..out.height {
        for x in 0..out.width {
            mean += grayscale(&out, y, x);
        }
    }
    mean /= n;
    out.data.iter_mut().for_each(|v| *v = (*v - mean) * contrast + mean);
    if saturation != 1.0 {
        for y in 0..out.height {
            for x in 0..out.width {
                let g = grayscale(&out, y, x);
                for c in 0..out.channels {
                    let v = out.get(c, y, x);
                    out.set(c, y, x, g + saturation * (v - g));
                }
            }
        }
    }
    out
}

/// Per-channel `(x - mean) / std`; the last entry is reused for extra channels.
pub fn normalize(img: &Image, mean: &[f64], std: &[f64]) -> Image {
    let mut out = img.clone();
    let plane = img.height * img.width;
    for c in 0..img.channels {
        let m = mean.get(c).or(mean.last()).copied().unwrap_or(0.0);
        let s = std.get(c).or(std.last()).copied().unwrap_or(1.0);
        out.data[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    out
}

/// Shuffled batch order for one epoch.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = derive(seed, 0xE90C_0000 + epoch as u64);
    shuffle(&mut idx, &mut rng);
    idx
}

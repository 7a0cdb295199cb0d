//! Datasets, the training loop, and mIoU.

use std::fs::File;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{cross_entropy, IGNORE_INDEX};
use crate::netcore::{NetError, NetworkInstance, MIN_INPUT};
use crate::tensor::{resize_bilinear, Shape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sample {sample}: label {label} is not below {num_classes} classes and is not 255")]
    LabelOutOfRange { sample: String, label: u8, num_classes: usize },
    #[error("network predicts {network} classes but the dataset has {dataset}")]
    ClassMismatch { network: usize, dataset: usize },
    #[error("iteration {iter} outside 0..{total}")]
    IterOutOfRange { iter: usize, total: usize },
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("sample {sample}: {message}")]
    Sample { sample: String, message: String },
    #[error("non-finite loss at iteration {0}")]
    Diverged(usize),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// An image in `[0, 1]` of shape `(1, 3, H, W)` with an `H x W` label map.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub image: Tensor<f32>,
    pub label: Vec<u8>,
}

impl SegSample {
    pub fn new(image: Tensor<f32>, label: Vec<u8>) -> Result<Self, EvalError> {
        let s = image.shape();
        if s.n != 1 || s.c != 3 {
            return Err(EvalError::Sample {
                sample: "<new>".into(),
                message: format!("image must be (1, 3, H, W), got {s}"),
            });
        }
        if label.len() != s.h * s.w {
            return Err(EvalError::Sample {
                sample: "<new>".into(),
                message: format!("label has {} pixels, image has {}", label.len(), s.h * s.w),
            });
        }
        Ok(SegSample { image, label })
    }

    pub fn height(&self) -> usize {
        self.image.shape().h
    }

    pub fn width(&self) -> usize {
        self.image.shape().w
    }
}

pub trait Dataset {
    fn len(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn get(&self, index: usize) -> Result<SegSample, EvalError>;
    /// Human-readable identity of a sample, used in error messages.
    fn sample_name(&self, index: usize) -> String {
        format!("#{index}")
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InMemoryDataset {
    pub samples: Vec<SegSample>,
    pub num_classes: usize,
}

impl Dataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn get(&self, index: usize) -> Result<SegSample, EvalError> {
        Ok(self.samples[index].clone())
    }
}

/// `root/images/{split}/*.png` paired by file stem with
/// `root/labels/{split}/*.png`. Samples are decoded on access.
#[derive(Debug, Clone)]
pub struct DirectoryDataset {
    pairs: Vec<(PathBuf, PathBuf)>,
    num_classes: usize,
}

impl DirectoryDataset {
    pub fn open(root: impl AsRef<Path>, split: &str, num_classes: usize) -> Result<Self, EvalError> {
        let root = root.as_ref();
        let images = list_pngs(&root.join("images").join(split))?;
        let labels = list_pngs(&root.join("labels").join(split))?;
        let mut pairs = Vec::with_capacity(images.len());
        for (stem, img) in &images {
            let label = labels.iter().find(|(s, _)| s == stem).ok_or_else(|| EvalError::File {
                path: img.clone(),
                message: "no matching label".into(),
            })?;
            pairs.push((img.clone(), label.1.clone()));
        }
        if let Some((_, lbl)) = labels.iter().find(|(s, _)| !images.iter().any(|(i, _)| i == s)) {
            return Err(EvalError::File {
                path: lbl.clone(),
                message: "no matching image".into(),
            });
        }
        Ok(DirectoryDataset { pairs, num_classes })
    }
}

fn list_pngs(dir: &Path) -> Result<Vec<(String, PathBuf)>, EvalError> {
    let entries = std::fs::read_dir(dir).map_err(|e| EvalError::File {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            out.push((stem, path));
        }
    }
    out.sort();
    Ok(out)
}

fn file_error(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

impl Dataset for DirectoryDataset {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn sample_name(&self, index: usize) -> String {
        self.pairs[index].0.display().to_string()
    }

    fn get(&self, index: usize) -> Result<SegSample, EvalError> {
        let (ip, lp) = &self.pairs[index];
        let img = image::open(ip).map_err(|e| file_error(ip, e))?.to_rgb8();
        let lbl = image::open(lp).map_err(|e| file_error(lp, e))?;
        if lbl.color().channel_count() != 1 {
            return Err(file_error(lp, "label must be a single-channel image"));
        }
        let lbl = lbl.to_luma8();
        if img.dimensions() != lbl.dimensions() {
            return Err(file_error(
                lp,
                format!("label is {:?}, image is {:?}", lbl.dimensions(), img.dimensions()),
            ));
        }
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0f32; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[c * h * w + y as usize * w + x as usize] = p[c] as f32 / 255.0;
            }
        }
        Ok(SegSample {
            image: Tensor::from_vec(Shape::new(1, 3, h, w), data),
            label: lbl.into_raw(),
        })
    }
}

/// Writes a sample as `images/{split}/{stem}.png` and `labels/{split}/{stem}.png`.
pub fn write_sample(root: impl AsRef<Path>, split: &str, stem: &str, sample: &SegSample) -> Result<(), EvalError> {
    let root = root.as_ref();
    let (h, w) = (sample.height(), sample.width());
    let idir = root.join("images").join(split);
    let ldir = root.join("labels").join(split);
    std::fs::create_dir_all(&idir)?;
    std::fs::create_dir_all(&ldir)?;
    let d = sample.image.data();
    let rgb: Vec<u8> = (0..h * w)
        .flat_map(|p| (0..3).map(move |c| (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    let ipath = idir.join(format!("{stem}.png"));
    let lpath = ldir.join(format!("{stem}.png"));
    image::RgbImage::from_raw(w as u32, h as u32, rgb)
        .expect("buffer size")
        .save(&ipath)
        .map_err(|e| file_error(&ipath, e))?;
    image::GrayImage::from_raw(w as u32, h as u32, sample.label.clone())
        .expect("buffer size")
        .save(&lpath)
        .map_err(|e| file_error(&lpath, e))?;
    Ok(())
}

/// Deterministic train/val splits of the synthetic shapes set.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: InMemoryDataset,
    pub val: InMemoryDataset,
}

/// Fraction of generated samples placed in the training split.
pub const SYNTH_TRAIN_FRACTION: f64 = 0.8;

/// `n` images of colored rectangles, discs and triangles on a textured
/// background. Class 0 is background; class `c >= 1` has its own hue and
/// outline (cycling rectangle, disc, triangle). The first 80% of samples form
/// the training split.
pub fn synth_shapes(n: usize, num_classes: usize, size: (usize, usize), seed: u64) -> Result<SplitDataset, EvalError> {
    if !(2..=8).contains(&num_classes) {
        return Err(EvalError::Config(format!("synthetic classes must be in 2..=8, got {num_classes}")));
    }
    if size.0 < MIN_INPUT || size.1 < MIN_INPUT {
        return Err(EvalError::Config(format!("synthetic size must be at least {MIN_INPUT}x{MIN_INPUT}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<SegSample> = (0..n).map(|_| synth_sample(&mut rng, num_classes, size)).collect();
    let n_train = (n as f64 * SYNTH_TRAIN_FRACTION).round() as usize;
    let mut train = samples;
    let val = train.split_off(n_train);
    Ok(SplitDataset {
        train: InMemoryDataset { samples: train, num_classes },
        val: InMemoryDataset { samples: val, num_classes },
    })
}

const PALETTE: [[f32; 3]; 7] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
];

fn synth_sample(rng: &mut ChaCha8Rng, k: usize, (h, w): (usize, usize)) -> SegSample {
    let plane = h * w;
    let mut img = vec![0f32; 3 * plane];
    let mut label = vec![0u8; plane];
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.6));
    let (fy, fx) = (rng.random_range(0.05..0.3), rng.random_range(0.05..0.3));
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    for y in 0..h {
        for x in 0..w {
            let t = 0.06 * ((fy * y as f32 + fx * x as f32 + phase).sin());
            for c in 0..3 {
                img[c * plane + y * w + x] = base[c] + t + rng.random_range(-0.04..0.04);
            }
        }
    }
    let m = h.min(w) as f32;
    let count = rng.random_range(1..=3usize);
    for _ in 0..count {
        let class = rng.random_range(1..k);
        let color = PALETTE[class - 1].map(|v| (v + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0));
        let r = rng.random_range(0.18 * m..0.32 * m);
        let cy = rng.random_range(r * 0.5..h as f32 - r * 0.5);
        let cx = rng.random_range(r * 0.5..w as f32 - r * 0.5);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
                let inside = match (class - 1) % 3 {
                    0 => dy.abs() <= r * 0.8 && dx.abs() <= r,
                    1 => dy * dy + dx * dx <= r * r,
                    _ => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.6,
                };
                if inside {
                    label[y * w + x] = class as u8;
                    for c in 0..3 {
                        img[c * plane + y * w + x] = color[c] + rng.random_range(-0.03..0.03);
                    }
                }
            }
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    SegSample {
        image: Tensor::from_vec(Shape::new(1, 3, h, w), img),
        label,
    }
}

/// Rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Self {
        let k = rows.len();
        assert!(rows.iter().all(|r| r.len() == k), "square matrix");
        ConfusionMatrix {
            num_classes: k,
            counts: rows.concat(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    /// Counts every pixel whose label is not 255.
    pub fn accumulate(&mut self, pred: &[u8], label: &[u8]) {
        assert_eq!(pred.len(), label.len(), "prediction and label sizes");
        for (&p, &t) in pred.iter().zip(label) {
            if t != IGNORE_INDEX {
                self.counts[t as usize * self.num_classes + p as usize] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes, "class counts");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-class IoU; `None` for classes absent from both truth and prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..k).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|t| self.get(t, c)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean over classes that occur; 0 for an empty matrix.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

/// SGD training recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub total_iters: usize,
    pub batch_size: usize,
    pub crop: (usize, usize),
    pub scale_range: (f64, f64),
    pub hflip: bool,
    pub color_jitter: bool,
    pub seed: u64,
    /// Weight of the newest batch in the running normalization statistics.
    pub norm_momentum: f64,
    /// Optional warm start: parameters with matching names and shapes are
    /// copied from this checkpoint before training. Off by default.
    pub init_checkpoint: Option<PathBuf>,
    /// Online hard pixel mining: only pixels whose true-class probability is
    /// below [`HARD_PIXEL_THRESHOLD`] enter the loss (at least
    /// 1/[`HARD_PIXEL_MIN_FRACTION`] of valid pixels are kept). Off by default.
    pub hard_pixel_mining: bool,
}

/// Probability below which a pixel counts as hard.
pub const HARD_PIXEL_THRESHOLD: f64 = 0.7;
/// Hard mining keeps at least `valid / HARD_PIXEL_MIN_FRACTION` pixels.
pub const HARD_PIXEL_MIN_FRACTION: usize = 16;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            power: 0.9,
            total_iters: 1000,
            batch_size: 8,
            crop: (192, 192),
            scale_range: (0.5, 2.0),
            hflip: true,
            color_jitter: false,
            seed: 0,
            norm_momentum: 0.1,
            init_checkpoint: None,
            hard_pixel_mining: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::Config(m));
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("scale_range must satisfy 0 < min <= max, got ({lo}, {hi})"));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.crop.0 < MIN_INPUT || self.crop.1 < MIN_INPUT {
            return bad(format!("crop must be at least {MIN_INPUT}x{MIN_INPUT}"));
        }
        if !(self.base_lr > 0.0) || self.momentum < 0.0 || self.weight_decay < 0.0 || !(self.power >= 0.0) {
            return bad("learning-rate parameters must be non-negative (base_lr positive)".into());
        }
        if !(0.0..=1.0).contains(&self.norm_momentum) {
            return bad("norm_momentum must be in [0, 1]".into());
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| file_error(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| file_error(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `base_lr * (1 - iter / total_iters)^power`.
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> Result<f64, EvalError> {
    if iter >= cfg.total_iters {
        return Err(EvalError::IterOutOfRange {
            iter,
            total: cfg.total_iters,
        });
    }
    Ok(cfg.base_lr * (1.0 - iter as f64 / cfg.total_iters as f64).powf(cfg.power))
}

/// One augmented training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub image: Vec<f32>,
    pub label: Vec<u8>,
}

/// Random rescale, crop (padding with the image mean and ignore labels),
/// horizontal flip and optional color jitter, applied to image and label alike.
pub fn augment(sample: &SegSample, cfg: &TrainConfig, rng: &mut impl Rng) -> Augmented {
    let (h, w) = (sample.height(), sample.width());
    let s = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1);
    let (sh, sw) = (((h as f64 * s).round() as usize).max(1), ((w as f64 * s).round() as usize).max(1));
    let img = resize_bilinear(&sample.image, sh, sw);
    let lbl = resize_nearest(&sample.label, h, w, sh, sw);
    let (ch, cw) = cfg.crop;
    let y0 = rng.random_range(0..=sh.saturating_sub(ch));
    let x0 = rng.random_range(0..=sw.saturating_sub(cw));
    let flip = cfg.hflip && rng.random_bool(0.5);
    let plane = sh * sw;
    let mean: [f32; 3] = std::array::from_fn(|c| img.data()[c * plane..(c + 1) * plane].iter().sum::<f32>() / plane as f32);
    let mut out = vec![0f32; 3 * ch * cw];
    let mut out_lbl = vec![IGNORE_INDEX; ch * cw];
    for y in 0..ch {
        for x in 0..cw {
            let (sy, sx) = (y0 + y, x0 + if flip { cw - 1 - x } else { x });
            let inside = sy < sh && sx < sw;
            for c in 0..3 {
                out[c * ch * cw + y * cw + x] = if inside { img.data()[c * plane + sy * sw + sx] } else { mean[c] };
            }
            if inside {
                out_lbl[y * cw + x] = lbl[sy * sw + sx];
            }
        }
    }
    if cfg.color_jitter {
        jitter(&mut out, ch * cw, rng);
    }
    Augmented { image: out, label: out_lbl }
}

/// Brightness, contrast and saturation each scaled by a factor in `[0.8, 1.2]`.
fn jitter(img: &mut [f32], plane: usize, rng: &mut impl Rng) {
    let b = rng.random_range(0.8f32..1.2);
    let c = rng.random_range(0.8f32..1.2);
    let s = rng.random_range(0.8f32..1.2);
    let mean = img.iter().sum::<f32>() / img.len() as f32;
    for p in 0..plane {
        let px: [f32; 3] = std::array::from_fn(|ch| img[ch * plane + p] * b);
        let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        for ch in 0..3 {
            let v = gray + (px[ch] - gray) * s;
            img[ch * plane + p] = ((v - mean) * c + mean).clamp(0.0, 1.0);
        }
    }
}

/// Nearest-neighbour resize with half-pixel centres.
pub fn resize_nearest(label: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let mut out = vec![0u8; oh * ow];
    for y in 0..oh {
        let sy = (((y as f64 + 0.5) * h as f64 / oh as f64) as usize).min(h - 1);
        for x in 0..ow {
            let sx = (((x as f64 + 0.5) * w as f64 / ow as f64) as usize).min(w - 1);
            out[y * ow + x] = label[sy * w + sx];
        }
    }
    out
}

/// Copies every parameter whose name and shape match from the checkpoint at
/// `path`; returns how many were copied.
pub fn warm_start(net: &mut NetworkInstance, path: &Path) -> Result<usize, EvalError> {
    let source = crate::netcore::checkpoint::load(path).map_err(|e| file_error(path, e))?;
    let names: Vec<String> = net.param_names().map(str::to_string).collect();
    let mut copied = 0;
    for name in names {
        if let Some(p) = source.param(&name) {
            if net.set_param(&name, p.clone()).is_ok() {
                copied += 1;
            }
        }
    }
    Ok(copied)
}

/// Labels with easy pixels replaced by the ignore index.
pub fn hard_pixels(logits: &Tensor<f32>, labels: &[u8]) -> Vec<u8> {
    let s = logits.shape();
    let hw = s.plane();
    let d = logits.data();
    let mut prob = Vec::with_capacity(labels.len());
    for (i, &l) in labels.iter().enumerate() {
        if l == IGNORE_INDEX {
            continue;
        }
        let (n, p) = (i / hw, i % hw);
        let at = |c: usize| d[(n * s.c + c) * hw + p] as f64;
        let max = (0..s.c).map(at).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..s.c).map(|c| (at(c) - max).exp()).sum();
        prob.push(((at(l as usize) - max).exp() / z, i));
    }
    let keep_min = prob.len() / HARD_PIXEL_MIN_FRACTION;
    prob.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = vec![IGNORE_INDEX; labels.len()];
    for (rank, &(p, i)) in prob.iter().enumerate() {
        if p < HARD_PIXEL_THRESHOLD || rank < keep_min {
            out[i] = labels[i];
        }
    }
    out
}

/// Per-iteration learning rate and loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub lrs: Vec<f64>,
    pub losses: Vec<f64>,
}

impl TrainHistory {
    /// CSV with columns `iter, lr, loss`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["iter", "lr", "loss"])?;
        for (i, (lr, loss)) in self.lrs.iter().zip(&self.losses).enumerate() {
            w.write_record([i.to_string(), lr.to_string(), loss.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        self.write_csv(File::create(path)?)
    }
}

fn check_labels(data: &dyn Dataset, sample: &SegSample, index: usize) -> Result<(), EvalError> {
    let k = data.num_classes();
    if let Some(&bad) = sample.label.iter().find(|&&l| l != IGNORE_INDEX && l as usize >= k) {
        return Err(EvalError::LabelOutOfRange {
            sample: data.sample_name(index),
            label: bad,
            num_classes: k,
        });
    }
    Ok(())
}

fn load_checked(data: &dyn Dataset, net_classes: usize) -> Result<Vec<SegSample>, EvalError> {
    if data.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if data.num_classes() != net_classes {
        return Err(EvalError::ClassMismatch {
            network: net_classes,
            dataset: data.num_classes(),
        });
    }
    (0..data.len())
        .map(|i| {
            let s = data.get(i)?;
            check_labels(data, &s, i)?;
            Ok(s)
        })
        .collect()
}

/// SGD with momentum and weight decay on pixelwise cross-entropy, with the
/// poly schedule. Batches are drawn from per-epoch shuffles; everything random
/// derives from `cfg.seed`.
pub fn train(
    mut net: NetworkInstance,
    data: &dyn Dataset,
    cfg: &TrainConfig,
) -> Result<(NetworkInstance, TrainHistory), EvalError> {
    cfg.validate()?;
    let samples = load_checked(data, net.num_classes())?;
    if let Some(path) = &cfg.init_checkpoint {
        warm_start(&mut net, path)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Tensor<f32>> = net.weights.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut order: Vec<usize> = Vec::new();
    let mut history = TrainHistory::default();
    let (ch, cw) = cfg.crop;
    for iter in 0..cfg.total_iters {
        let lr = poly_lr(iter, cfg)?;
        let mut images = Vec::with_capacity(cfg.batch_size * 3 * ch * cw);
        let mut labels = Vec::with_capacity(cfg.batch_size * ch * cw);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
            }
            let a = augment(&samples[order.pop().expect("refilled")], cfg, &mut rng);
            images.extend(a.image);
            labels.extend(a.label);
        }
        let x = Tensor::from_vec(Shape::new(cfg.batch_size, 3, ch, cw), images);
        let (loss, grads, stats) = {
            let (out, exec) = net.forward_train(&x)?;
            let loss = if cfg.hard_pixel_mining {
                cross_entropy(&out, &hard_pixels(out.value(), &labels))
            } else {
                cross_entropy(&out, &labels)
            };
            loss.backward();
            (loss.value().data()[0] as f64, exec.gradients(), exec.batch_stats)
        };
        if !loss.is_finite() {
            return Err(EvalError::Diverged(iter));
        }
        let m = cfg.norm_momentum as f32;
        for (mean_buf, var_buf, s) in stats {
            let n = s.count as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for (r, &b) in net.weights.buffers[mean_buf].data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - m) * *r + m * b as f32;
            }
            for (r, &b) in net.weights.buffers[var_buf].data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - m) * *r + m * (b * unbias) as f32;
            }
        }
        let (lr, mom, wd) = (lr as f32, cfg.momentum as f32, cfg.weight_decay as f32);
        for ((p, v), g) in net.weights.params.iter_mut().zip(&mut velocity).zip(grads) {
            let Some(g) = g else { continue };
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mom * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
        history.lrs.push(lr as f64);
        history.losses.push(loss);
    }
    Ok((net, history))
}

/// Argmax class per pixel for a batch of one image.
pub fn predict(net: &NetworkInstance, image: &Tensor<f32>) -> Result<Vec<u8>, EvalError> {
    let out = net.forward(image)?;
    let s = out.shape();
    let hw = s.plane();
    let d = out.data();
    Ok((0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..s.c {
                if d[c * hw + p] > d[best * hw + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect())
}

/// Dataset-level confusion matrix of `net`'s predictions.
pub fn confusion(net: &NetworkInstance, data: &dyn Dataset) -> Result<ConfusionMatrix, EvalError> {
    let samples = load_checked(data, net.num_classes())?;
    let mut cm = ConfusionMatrix::new(net.num_classes());
    for s in &samples {
        cm.accumulate(&predict(net, &s.image)?, &s.label);
    }
    Ok(cm)
}

/// `(mIoU, per-class IoU)`; absent classes have IoU `None` and do not enter the mean.
pub fn evaluate_miou(net: &NetworkInstance, data: &dyn Dataset) -> Result<(f64, Vec<Option<f64>>), EvalError> {
    let cm = confusion(net, data)?;
    Ok((cm.miou(), cm.iou()))
}

//! Training stages on a compact per-voxel segmentation model: synthetic
//! pre-training, real-data training/fine-tuning, and distillation-based
//! post-training with one modality removed from the student's input.
//!
//! The model maps each voxel independently:
//!
//! ```text
//! input  = [flair, t1ce, t1, t2, avail_flair, avail_t1ce, avail_t1, avail_t2]
//! f      = tanh(W1 · input + b1)          (hidden features, width h)
//! scores = W2 · f + b2                    (classes for labels 0, 1, 2, 4)
//! ```
//!
//! Absent modalities are zero-filled with their availability bit cleared.
//! Everything is `f64` and gradients are analytic.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, Combination};
use crate::volume::{class_label, ensure_dims, label_class, Dims, LabelVolume, Modality, MultiModalVolume, Sample};

pub const INPUTS: usize = 8;
pub const CLASSES: usize = 4;
pub const DEFAULT_HIDDEN: usize = 16;
/// Initial learning rate of the reference training recipe.
pub const DEFAULT_LR: f64 = 2e-4;
pub const POLY_POWER: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub hidden: usize,
    /// `hidden × INPUTS`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `CLASSES × hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ToyModel {
    pub fn zeros(hidden: usize) -> Self {
        assert!(hidden >= 1, "hidden width must be >= 1");
        ToyModel {
            hidden,
            w1: vec![0.0; hidden * INPUTS],
            b1: vec![0.0; hidden],
            w2: vec![0.0; CLASSES * hidden],
            b2: vec![0.0; CLASSES],
        }
    }

    /// Uniform Glorot initialization, zero biases.
    pub fn random<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        let mut m = ToyModel::zeros(hidden);
        let a1 = (6.0 / (INPUTS + hidden) as f64).sqrt();
        let a2 = (6.0 / (hidden + CLASSES) as f64).sqrt();
        m.w1.iter_mut().for_each(|w| *w = rng.random_range(-a1..a1));
        m.w2.iter_mut().for_each(|w| *w = rng.random_range(-a2..a2));
        m
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Parameters flattened in the order w1, b1, w2, b2.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        p.extend_from_slice(&self.w1);
        p.extend_from_slice(&self.b1);
        p.extend_from_slice(&self.w2);
        p.extend_from_slice(&self.b2);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.param_count());
        let (a, rest) = p.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.b1.len());
        let (c, d) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        self.b2.copy_from_slice(d);
    }

    fn param_mut(&mut self, i: usize) -> &mut f64 {
        let n1 = self.w1.len();
        let n2 = n1 + self.b1.len();
        let n3 = n2 + self.w2.len();
        match i {
            _ if i < n1 => &mut self.w1[i],
            _ if i < n2 => &mut self.b1[i - n1],
            _ if i < n3 => &mut self.w2[i - n2],
            _ => &mut self.b2[i - n3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }

    /// FNV-1a over the parameter bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.params() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Per-voxel model inputs, `n × INPUTS`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub n: usize,
    pub x: Vec<f64>,
}

pub fn encode(x: &MultiModalVolume) -> Encoded {
    let n = x.dims().len();
    let mut out = vec![0.0; n * INPUTS];
    for m in Modality::ALL {
        let c = m.index();
        if let Some(v) = x.get(m) {
            for (i, &val) in v.data().iter().enumerate() {
                out[i * INPUTS + c] = val as f64;
                out[i * INPUTS + 4 + c] = 1.0;
            }
        }
    }
    Encoded { n, x: out }
}

/// Zeroes the intensity and availability columns of modalities not in `keep`.
fn mask_encoded(enc: &Encoded, keep: [bool; 4]) -> Encoded {
    let mut x = enc.x.clone();
    for c in (0..4).filter(|&c| !keep[c]) {
        for row in x.chunks_exact_mut(INPUTS) {
            row[c] = 0.0;
            row[4 + c] = 0.0;
        }
    }
    Encoded { n: enc.n, x }
}

fn concat_encoded(parts: Vec<Encoded>) -> Encoded {
    let n = parts.iter().map(|p| p.n).sum();
    let mut x = Vec::with_capacity(n * INPUTS);
    for p in parts {
        x.extend(p.x);
    }
    Encoded { n, x }
}

/// Hidden activations, `n × hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub dims: Option<Dims>,
    pub hidden: usize,
    pub data: Vec<f64>,
}

/// Class scores, `n × CLASSES`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub dims: Option<Dims>,
    pub data: Vec<f64>,
}

impl Scores {
    pub fn voxels(&self) -> usize {
        self.data.len() / CLASSES
    }

    /// Argmax label per voxel (ties to the lower class).
    pub fn argmax_labels(&self) -> Vec<u8> {
        self.data
            .chunks_exact(CLASSES)
            .map(|s| {
                let mut best = 0;
                for c in 1..CLASSES {
                    if s[c] > s[best] {
                        best = c;
                    }
                }
                class_label(best)
            })
            .collect()
    }
}

fn forward_encoded(model: &ToyModel, enc: &Encoded) -> (FeatureMap, Scores) {
    let h = model.hidden;
    let mut feats = vec![0.0; enc.n * h];
    let mut scores = vec![0.0; enc.n * CLASSES];
    for i in 0..enc.n {
        let x = &enc.x[i * INPUTS..(i + 1) * INPUTS];
        let f = &mut feats[i * h..(i + 1) * h];
        for j in 0..h {
            let w = &model.w1[j * INPUTS..(j + 1) * INPUTS];
            let mut a = model.b1[j];
            for k in 0..INPUTS {
                a += w[k] * x[k];
            }
            f[j] = a.tanh();
        }
        let s = &mut scores[i * CLASSES..(i + 1) * CLASSES];
        for c in 0..CLASSES {
            let w = &model.w2[c * h..(c + 1) * h];
            let mut a = model.b2[c];
            for j in 0..h {
                a += w[j] * f[j];
            }
            s[c] = a;
        }
    }
    (
        FeatureMap {
            dims: None,
            hidden: h,
            data: feats,
        },
        Scores { dims: None, data: scores },
    )
}

pub fn forward(model: &ToyModel, x: &MultiModalVolume) -> (FeatureMap, Scores) {
    let (mut f, mut s) = forward_encoded(model, &encode(x));
    f.dims = Some(x.dims());
    s.dims = Some(x.dims());
    (f, s)
}

pub fn predict(model: &ToyModel, x: &MultiModalVolume) -> LabelVolume {
    let (_, s) = forward(model, x);
    LabelVolume::new(x.dims(), s.argmax_labels()).expect("argmax labels are in vocabulary")
}

fn softmax(s: &[f64]) -> [f64; CLASSES] {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; CLASSES];
    let mut z = 0.0;
    for c in 0..CLASSES {
        p[c] = (s[c] - m).exp();
        z += p[c];
    }
    p.iter_mut().for_each(|v| *v /= z);
    p
}

fn classes_of(labels: &[u8]) -> Vec<usize> {
    labels.iter().map(|&l| label_class(l)).collect()
}

fn cross_entropy(scores: &[f64], classes: &[usize]) -> (f64, Vec<f64>) {
    let n = classes.len();
    let mut grad = vec![0.0; n * CLASSES];
    let mut loss = 0.0;
    for (i, &y) in classes.iter().enumerate() {
        let s = &scores[i * CLASSES..(i + 1) * CLASSES];
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - s[y];
        let p = softmax(s);
        for c in 0..CLASSES {
            grad[i * CLASSES + c] = (p[c] - if c == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

const DICE_SMOOTH: f64 = 1.0;

fn soft_dice(scores: &[f64], classes: &[usize]) -> (f64, Vec<f64>) {
    let n = classes.len();
    let probs: Vec<[f64; CLASSES]> = scores.chunks_exact(CLASSES).map(softmax).collect();
    let mut inter = [0.0; CLASSES];
    let mut total = [0.0; CLASSES];
    for (p, &y) in probs.iter().zip(classes) {
        for c in 0..CLASSES {
            total[c] += p[c];
        }
        inter[y] += p[y];
        total[y] += 1.0;
    }
    let mut loss = 1.0;
    for c in 0..CLASSES {
        loss -= (2.0 * inter[c] + DICE_SMOOTH) / (total[c] + DICE_SMOOTH) / CLASSES as f64;
    }
    let mut grad = vec![0.0; n * CLASSES];
    for (i, (p, &y)) in probs.iter().zip(classes).enumerate() {
        // dL/dp_c
        let mut g = [0.0; CLASSES];
        for c in 0..CLASSES {
            let yc = if c == y { 1.0 } else { 0.0 };
            let den = total[c] + DICE_SMOOTH;
            g[c] = -(2.0 * yc * den - (2.0 * inter[c] + DICE_SMOOTH)) / (den * den) / CLASSES as f64;
        }
        let dot: f64 = (0..CLASSES).map(|c| g[c] * p[c]).sum();
        for c in 0..CLASSES {
            grad[i * CLASSES + c] = p[c] * (g[c] - dot);
        }
    }
    (loss, grad)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegLossKind {
    #[default]
    CrossEntropy,
    SoftDice,
}

/// Mean per-voxel cross-entropy against the labels, with its gradient.
pub fn seg_loss(scores: &Scores, labels: &LabelVolume) -> Result<(f64, Vec<f64>)> {
    seg_loss_kind(scores, labels, SegLossKind::CrossEntropy)
}

pub fn seg_loss_kind(scores: &Scores, labels: &LabelVolume, kind: SegLossKind) -> Result<(f64, Vec<f64>)> {
    if scores.voxels() != labels.dims().len() {
        return Err(Error::DimensionMismatch(format!(
            "{} score voxels vs {} labels",
            scores.voxels(),
            labels.dims().len()
        )));
    }
    let classes = classes_of(labels.data());
    Ok(seg_loss_classes(&scores.data, &classes, kind))
}

fn seg_loss_classes(scores: &[f64], classes: &[usize], kind: SegLossKind) -> (f64, Vec<f64>) {
    match kind {
        SegLossKind::CrossEntropy => cross_entropy(scores, classes),
        SegLossKind::SoftDice => soft_dice(scores, classes),
    }
}

fn mse(target: &[f64], pred: &[f64]) -> (f64, Vec<f64>) {
    let n = target.len() as f64;
    let mut loss = 0.0;
    let grad = target
        .iter()
        .zip(pred)
        .map(|(&t, &s)| {
            loss += (t - s) * (t - s);
            2.0 * (s - t) / n
        })
        .collect();
    (loss / n, grad)
}

/// Mean squared error between teacher and student features; gradient is with
/// respect to the student features.
pub fn kd_loss(f_t: &FeatureMap, f_s: &FeatureMap) -> Result<(f64, Vec<f64>)> {
    if f_t.data.len() != f_s.data.len() || f_t.hidden != f_s.hidden {
        return Err(Error::DimensionMismatch(format!(
            "teacher features {}x{} vs student {}x{}",
            f_t.data.len() / f_t.hidden.max(1),
            f_t.hidden,
            f_s.data.len() / f_s.hidden.max(1),
            f_s.hidden
        )));
    }
    if let (Some(a), Some(b)) = (f_t.dims, f_s.dims) {
        ensure_dims(a, b)?;
    }
    Ok(mse(&f_t.data, &f_s.data))
}

/// Gradient with respect to every parameter, in [`ToyModel::params`] order.
fn backward(model: &ToyModel, enc: &Encoded, feats: &[f64], dscores: &[f64], dfeats: Option<&[f64]>) -> Vec<f64> {
    let h = model.hidden;
    let mut gw1 = vec![0.0; h * INPUTS];
    let mut gb1 = vec![0.0; h];
    let mut gw2 = vec![0.0; CLASSES * h];
    let mut gb2 = vec![0.0; CLASSES];
    let mut df = vec![0.0; h];
    for i in 0..enc.n {
        let x = &enc.x[i * INPUTS..(i + 1) * INPUTS];
        let f = &feats[i * h..(i + 1) * h];
        let ds = &dscores[i * CLASSES..(i + 1) * CLASSES];
        match dfeats {
            Some(extra) => df.copy_from_slice(&extra[i * h..(i + 1) * h]),
            None => df.iter_mut().for_each(|v| *v = 0.0),
        }
        for c in 0..CLASSES {
            let g = ds[c];
            if g == 0.0 {
                continue;
            }
            gb2[c] += g;
            let w = &model.w2[c * h..(c + 1) * h];
            let gw = &mut gw2[c * h..(c + 1) * h];
            for j in 0..h {
                gw[j] += g * f[j];
                df[j] += g * w[j];
            }
        }
        for j in 0..h {
            let da = df[j] * (1.0 - f[j] * f[j]);
            gb1[j] += da;
            let gw = &mut gw1[j * INPUTS..(j + 1) * INPUTS];
            for k in 0..INPUTS {
                gw[k] += da * x[k];
            }
        }
    }
    let mut g = gw1;
    g.extend(gb1);
    g.extend(gw2);
    g.extend(gb2);
    g
}

/// Removes one available modality chosen uniformly at random.
pub fn drop_modality<R: Rng + ?Sized>(x: &MultiModalVolume, rng: &mut R) -> Result<(MultiModalVolume, Modality)> {
    let avail: Vec<Modality> = x.present().map(|(m, _)| m).collect();
    if avail.len() < 2 {
        return Err(Error::TooFewModalities(avail.len()));
    }
    let dropped = avail[rng.random_range(0..avail.len())];
    let mut keep = x.availability();
    keep[dropped.index()] = false;
    Ok((x.restrict(keep)?, dropped))
}

/// Adam moments for one parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// `lr0 · (1 − step/total)^power`, zero once `step >= total`.
pub fn poly_lr(lr0: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    lr0 * (1.0 - step as f64 / total as f64).powf(power)
}

/// Which modalities the model sees during standard training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Every available modality.
    #[default]
    Full,
    /// A uniformly drawn nonempty subset of the available modalities per
    /// sample and step.
    OneToMany,
    /// A fixed subset.
    OneToOne(Combination),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub poly_power: f64,
    /// Samples per optimizer step; `None` uses the whole set.
    pub batch_size: Option<usize>,
    pub regime: Regime,
    pub loss: SegLossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            lr: DEFAULT_LR,
            poly_power: POLY_POWER,
            batch_size: None,
            regime: Regime::Full,
            loss: SegLossKind::CrossEntropy,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    /// 1-based within the stage.
    pub epoch: usize,
    pub l_seg: f64,
    pub l_kd: f64,
    pub l_post: f64,
    /// Full-modality validation Dice (WT, TC, ET), when a validation set is given.
    pub val_dice: Option<[f64; 3]>,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("stage,epoch,l_seg,l_kd,l_post,dice_wt,dice_tc,dice_et\n");
    for e in log {
        let d = e
            .val_dice
            .map(|d| format!("{:.6},{:.6},{:.6}", d[0], d[1], d[2]))
            .unwrap_or_else(|| ",,".into());
        s.push_str(&format!("{},{},{:.10},{:.10},{:.10},{}\n", e.stage, e.epoch, e.l_seg, e.l_kd, e.l_post, d));
    }
    s
}

fn batches<R: Rng + ?Sized>(n: usize, batch_size: Option<usize>, rng: &mut R) -> Vec<Vec<usize>> {
    match batch_size {
        None => vec![(0..n).collect()],
        Some(b) => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            order.chunks(b.max(1)).map(|c| c.to_vec()).collect()
        }
    }
}

fn steps_per_epoch(n: usize, batch_size: Option<usize>) -> usize {
    match batch_size {
        None => 1,
        Some(b) => n.div_ceil(b.max(1)),
    }
}

fn regime_mask<R: Rng + ?Sized>(avail: [bool; 4], regime: Regime, rng: &mut R) -> Result<[bool; 4]> {
    let keep = match regime {
        Regime::Full => avail,
        Regime::OneToOne(c) => {
            let m = c.mask();
            [0, 1, 2, 3].map(|i| avail[i] && m[i])
        }
        Regime::OneToMany => loop {
            let mut keep = [false; 4];
            for i in (0..4).filter(|&i| avail[i]) {
                keep[i] = rng.random_bool(0.5);
            }
            if keep.iter().any(|&k| k) {
                break keep;
            }
        },
    };
    if !keep.iter().any(|&k| k) {
        return Err(Error::NoModalities);
    }
    Ok(keep)
}

fn val_dice(model: &ToyModel, val: &[Sample]) -> Option<[f64; 3]> {
    if val.is_empty() {
        return None;
    }
    evaluate(model, val, Combination::FULL).ok().map(|d| [d.wt, d.tc, d.et])
}

/// Gradient-descent training of the segmentation loss with Adam and a poly
/// learning-rate decay.
pub fn train_standard(model: &ToyModel, data: &[Sample], val: &[Sample], cfg: &TrainConfig, stage: &str) -> Result<(ToyModel, Vec<EpochLog>)> {
    let mut model = model.clone();
    let mut log = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 || data.is_empty() {
        return Ok((model, log));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.param_count());
    let per_epoch = steps_per_epoch(data.len(), cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let encoded: Vec<Encoded> = data.iter().map(|s| encode(&s.image)).collect();
    let classes: Vec<Vec<usize>> = data.iter().map(|s| classes_of(s.labels.data())).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut l_sum = 0.0;
        for batch in batches(data.len(), cfg.batch_size, &mut rng) {
            let mut parts = Vec::with_capacity(batch.len());
            let mut batch_classes = Vec::new();
            for &i in &batch {
                let keep = regime_mask(data[i].image.availability(), cfg.regime, &mut rng)?;
                parts.push(mask_encoded(&encoded[i], keep));
                batch_classes.extend_from_slice(&classes[i]);
            }
            let enc = concat_encoded(parts);
            let (feats, scores) = forward_encoded(&model, &enc);
            let (l_seg, dscores) = seg_loss_classes(&scores.data, &batch_classes, cfg.loss);
            if !l_seg.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: "train",
                    epoch,
                    l_seg,
                    l_kd: 0.0,
                });
            }
            let grads = backward(&model, &enc, &feats.data, &dscores, None);
            let mut p = model.params();
            adam.step(&mut p, &grads, poly_lr(cfg.lr, step, total, cfg.poly_power));
            model.set_params(&p);
            step += 1;
            l_sum += l_seg;
        }
        let l_seg = l_sum / per_epoch as f64;
        log.push(EpochLog {
            stage: stage.to_string(),
            epoch,
            l_seg,
            l_kd: 0.0,
            l_post: l_seg,
            val_dice: val_dice(&model, val),
        });
    }
    Ok((model, log))
}

/// Stage 1 on synthetic samples only, then stage 2 on real samples only.
pub fn pretrain_then_finetune(
    model: &ToyModel,
    synthetic: &[Sample],
    real: &[Sample],
    val: &[Sample],
    pre: &TrainConfig,
    fine: &TrainConfig,
) -> Result<(ToyModel, Vec<EpochLog>)> {
    let (m, mut log) = if synthetic.is_empty() {
        (model.clone(), Vec::new())
    } else {
        let r = train_standard(model, synthetic, val, pre, "pretrain")?;
        info!("stage pretrain finished after epoch {}", pre.epochs);
        r
    };
    let (m, fine_log) = train_standard(&m, real, val, fine, "finetune")?;
    info!("stage finetune finished after epoch {}", fine.epochs);
    log.extend(fine_log);
    Ok((m, log))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropPolicy {
    RemoveOneUniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KDSchedule {
    /// Teacher refresh period in epochs.
    pub k: usize,
    pub epochs: usize,
    pub drop_policy: DropPolicy,
    pub lr: f64,
    pub poly_power: f64,
    pub batch_size: Option<usize>,
    pub loss: SegLossKind,
    /// Also distill class scores, added into `l_kd`.
    pub distill_predictions: bool,
}

impl Default for KDSchedule {
    fn default() -> Self {
        KDSchedule {
            k: 5,
            epochs: 50,
            drop_policy: DropPolicy::RemoveOneUniform,
            lr: DEFAULT_LR,
            poly_power: POLY_POWER,
            batch_size: None,
            loss: SegLossKind::CrossEntropy,
            distill_predictions: false,
        }
    }
}

impl KDSchedule {
    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("post-training needs k >= 1 and epochs >= 1".into()));
        }
        Ok(())
    }
}

/// Loss values of one post-training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_seg: f64,
    pub l_kd: f64,
    pub l_post: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PostTrainOutcome {
    pub student: ToyModel,
    pub log: Vec<EpochLog>,
    /// Every optimizer step, in order.
    pub steps: Vec<LossBreakdown>,
    /// Fingerprint of the teacher used during each epoch (index = epoch − 1).
    pub teacher_fingerprints: Vec<u64>,
    /// `(epoch, student)` copied into the teacher after that epoch.
    pub refreshes: Vec<(usize, ToyModel)>,
}

struct PostBatch {
    teacher_in: Encoded,
    student_in: Encoded,
    classes: Vec<usize>,
}

struct Prepared {
    encoded: Vec<Encoded>,
    classes: Vec<Vec<usize>>,
}

fn prepare(data: &[Sample]) -> Prepared {
    Prepared {
        encoded: data.iter().map(|s| encode(&s.image)).collect(),
        classes: data.iter().map(|s| classes_of(s.labels.data())).collect(),
    }
}

fn post_batch<R: Rng + ?Sized>(data: &[Sample], prep: &Prepared, idx: &[usize], rng: &mut R) -> Result<PostBatch> {
    let mut t = Vec::with_capacity(idx.len());
    let mut s = Vec::with_capacity(idx.len());
    let mut classes = Vec::new();
    for &i in idx {
        let avail = data[i].image.availability();
        let present: Vec<usize> = (0..4).filter(|&c| avail[c]).collect();
        if present.len() < 2 {
            return Err(Error::TooFewModalities(present.len()));
        }
        let mut keep = avail;
        keep[present[rng.random_range(0..present.len())]] = false;
        t.push(prep.encoded[i].clone());
        s.push(mask_encoded(&prep.encoded[i], keep));
        classes.extend_from_slice(&prep.classes[i]);
    }
    Ok(PostBatch {
        teacher_in: concat_encoded(t),
        student_in: concat_encoded(s),
        classes,
    })
}

/// `l_post = l_seg(student) + l_kd(teacher, student)` and its gradient with
/// respect to the student's parameters.
fn post_loss(teacher: &ToyModel, student: &ToyModel, b: &PostBatch, kind: SegLossKind, distill_predictions: bool) -> (LossBreakdown, Vec<f64>) {
    let (ft, st) = forward_encoded(teacher, &b.teacher_in);
    let (fs, ss) = forward_encoded(student, &b.student_in);
    let (l_seg, mut dscores) = seg_loss_classes(&ss.data, &b.classes, kind);
    let (mut l_kd, dfeats) = mse(&ft.data, &fs.data);
    if distill_predictions {
        let (lp, dp) = mse(&st.data, &ss.data);
        l_kd += lp;
        dscores.iter_mut().zip(dp).for_each(|(a, b)| *a += b);
    }
    let grads = backward(student, &b.student_in, &fs.data, &dscores, Some(&dfeats));
    (
        LossBreakdown {
            l_seg,
            l_kd,
            l_post: l_seg + l_kd,
        },
        grads,
    )
}

/// Distillation-based post-training.
///
/// Teacher and student start as copies of `trained`. Each step the frozen
/// teacher sees the full input while the student sees the same input with one
/// modality removed; only the student is updated. After every `k` epochs the
/// teacher is replaced by the current student.
pub fn post_train(trained: &ToyModel, data: &[Sample], val: &[Sample], sched: &KDSchedule, seed: u64) -> Result<PostTrainOutcome> {
    sched.validate()?;
    if !trained.is_finite() {
        return Err(Error::InvalidConfig("trained model has non-finite parameters".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptySplit("post-training".into()));
    }
    let mut teacher = trained.clone();
    let mut student = trained.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(student.param_count());
    let per_epoch = steps_per_epoch(data.len(), sched.batch_size);
    let total = sched.epochs * per_epoch;
    let mut out = PostTrainOutcome {
        student: student.clone(),
        log: Vec::with_capacity(sched.epochs),
        steps: Vec::with_capacity(total),
        teacher_fingerprints: Vec::with_capacity(sched.epochs),
        refreshes: Vec::new(),
    };
    let prep = prepare(data);
    let mut step = 0;
    for epoch in 1..=sched.epochs {
        out.teacher_fingerprints.push(teacher.fingerprint());
        let mut acc = [0.0; 3];
        for batch in batches(data.len(), sched.batch_size, &mut rng) {
            let b = post_batch(data, &prep, &batch, &mut rng)?;
            let (loss, grads) = post_loss(&teacher, &student, &b, sched.loss, sched.distill_predictions);
            if !loss.l_post.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: "posttrain",
                    epoch,
                    l_seg: loss.l_seg,
                    l_kd: loss.l_kd,
                });
            }
            let mut p = student.params();
            adam.step(&mut p, &grads, poly_lr(sched.lr, step, total, sched.poly_power));
            student.set_params(&p);
            step += 1;
            acc[0] += loss.l_seg;
            acc[1] += loss.l_kd;
            acc[2] += loss.l_post;
            out.steps.push(loss);
        }
        let n = per_epoch as f64;
        out.log.push(EpochLog {
            stage: "posttrain".into(),
            epoch,
            l_seg: acc[0] / n,
            l_kd: acc[1] / n,
            l_post: acc[2] / n,
            val_dice: val_dice(&student, val),
        });
        if epoch % sched.k == 0 {
            teacher = student.clone();
            out.refreshes.push((epoch, student.clone()));
            info!("teacher refreshed from student after epoch {epoch}");
        }
    }
    out.student = student;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(parameter index, analytic, numeric)`.
    pub coords: Vec<(usize, f64, f64)>,
}

/// Floor on the relative-error denominator so coordinates whose gradient is
/// at round-off level do not dominate.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient of `l_post` (student parameters) against
/// central finite differences on `n_coords` random coordinates. The student
/// sees `sample` without `dropped`; the teacher sees the full sample.
pub fn grad_check<R: Rng + ?Sized>(
    teacher: &ToyModel,
    student: &ToyModel,
    sample: &Sample,
    dropped: Modality,
    eps: f64,
    n_coords: usize,
    rng: &mut R,
) -> Result<GradCheck> {
    let mut keep = sample.image.availability();
    keep[dropped.index()] = false;
    let b = PostBatch {
        teacher_in: encode(&sample.image),
        student_in: encode(&sample.image.restrict(keep)?),
        classes: classes_of(sample.labels.data()),
    };
    let kind = SegLossKind::CrossEntropy;
    let (_, analytic) = post_loss(teacher, student, &b, kind, false);
    let mut idx: Vec<usize> = (0..student.param_count()).collect();
    idx.shuffle(rng);
    idx.truncate(n_coords.min(idx.len()));
    idx.sort_unstable();
    let mut probe = student.clone();
    let mut coords = Vec::with_capacity(idx.len());
    let mut max_rel: f64 = 0.0;
    for &i in &idx {
        let orig = *probe.param_mut(i);
        *probe.param_mut(i) = orig + eps;
        let up = post_loss(teacher, &probe, &b, kind, false).0.l_post;
        *probe.param_mut(i) = orig - eps;
        let down = post_loss(teacher, &probe, &b, kind, false).0.l_post;
        *probe.param_mut(i) = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        max_rel = max_rel.max(rel);
        coords.push((i, a, numeric));
    }
    Ok(GradCheck {
        max_rel_error: max_rel,
        coords,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointDescriptor {
    pub format: String,
    pub version: u32,
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
    pub dtype: String,
    /// `(name, shape)` of each tensor in blob order.
    pub layout: Vec<(String, Vec<usize>)>,
    pub blob: String,
}

const CHECKPOINT_FORMAT: &str = "asymforge-toymodel";

/// Writes `<stem>.bin` (little-endian f64 parameters) and `<stem>.json`.
/// Returns the descriptor path.
pub fn save_checkpoint(model: &ToyModel, dir: &Path, stem: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob_name = format!("{stem}.bin");
    let mut bytes = Vec::with_capacity(model.param_count() * 8);
    for v in model.params() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let blob = dir.join(&blob_name);
    fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))?;
    let h = model.hidden;
    let desc = CheckpointDescriptor {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        inputs: INPUTS,
        hidden: h,
        classes: CLASSES,
        dtype: "f64le".into(),
        layout: vec![
            ("w1".into(), vec![h, INPUTS]),
            ("b1".into(), vec![h]),
            ("w2".into(), vec![CLASSES, h]),
            ("b2".into(), vec![CLASSES]),
        ],
        blob: blob_name,
    };
    let path = dir.join(format!("{stem}.json"));
    let mut json = serde_json::to_string_pretty(&desc)?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads a checkpoint from its JSON descriptor (or a directory holding `model.json`).
pub fn load_checkpoint(path: &Path) -> Result<ToyModel> {
    let desc_path = if path.is_dir() { path.join("model.json") } else { path.to_path_buf() };
    let text = fs::read_to_string(&desc_path).map_err(|e| Error::io(&desc_path, e))?;
    let desc: CheckpointDescriptor = serde_json::from_str(&text)?;
    if desc.format != CHECKPOINT_FORMAT || desc.dtype != "f64le" || desc.inputs != INPUTS || desc.classes != CLASSES || desc.hidden == 0 {
        return Err(Error::header(&desc_path, "unsupported checkpoint descriptor"));
    }
    let blob = desc_path.parent().unwrap_or(Path::new(".")).join(&desc.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let mut model = ToyModel::zeros(desc.hidden);
    if bytes.len() != model.param_count() * 8 {
        return Err(Error::header(&blob, format!("expected {} bytes", model.param_count() * 8)));
    }
    let params: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    model.set_params(&params);
    if !model.is_finite() {
        return Err(Error::header(&blob, "non-finite parameters"));
    }
    Ok(model)
}

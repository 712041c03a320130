//! Training targets and the three loss terms:
//! `L = L_mask + L_cate + λ·L_sem`.
//!
//! * `L_mask`: dice loss `1 − (2Σpt + 1)/(Σp² + Σt² + 1)` averaged over
//!   positive grid cells, against area-averaged soft masks.
//! * `L_cate`: sigmoid focal loss (α = 0.25, γ = 2) summed over all cells and
//!   thing classes, divided by `positives + 1`.
//! * `L_sem`: mean cross-entropy against majority-downsampled labels.

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::synth::Instance;
use crate::tensor::Tensor;

use super::model::Outputs;
use super::VOID;

pub const DICE_EPS: f64 = 1.0;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub feat_h: usize,
    pub feat_w: usize,
    pub grid: usize,
    pub thing_classes: usize,
    /// Feature-resolution labels, [`VOID`] where ignored.
    pub sem_labels: Vec<u8>,
    /// `G²×K_thing` one-hot category targets.
    pub cate: Vec<f64>,
    /// Positive cells with their soft feature-resolution masks.
    pub positives: Vec<(usize, Vec<f64>)>,
}

/// Most frequent label of each `stride×stride` block; ties go to the
/// smaller id.
pub fn majority_downsample(labels: &[u8], h: usize, w: usize, stride: usize) -> Vec<u8> {
    let (ho, wo) = (h / stride, w / stride);
    let mut out = Vec::with_capacity(ho * wo);
    let mut counts = [0u32; 256];
    for by in 0..ho {
        for bx in 0..wo {
            counts.iter_mut().for_each(|c| *c = 0);
            for y in by * stride..(by + 1) * stride {
                for x in bx * stride..(bx + 1) * stride {
                    counts[labels[y * w + x] as usize] += 1;
                }
            }
            let best = (0..256).max_by_key(|&l| (counts[l], std::cmp::Reverse(l))).unwrap_or(0);
            out.push(best as u8);
        }
    }
    out
}

/// Fraction of each `stride×stride` block covered by `mask`.
pub fn area_downsample(mask: &[bool], h: usize, w: usize, stride: usize) -> Vec<f64> {
    let (ho, wo) = (h / stride, w / stride);
    let norm = 1.0 / (stride * stride) as f64;
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho * stride {
        for x in 0..wo * stride {
            if mask[y * w + x] {
                out[(y / stride) * wo + x / stride] += norm;
            }
        }
    }
    out
}

/// Builds feature-resolution targets. Each instance is assigned to the grid
/// cell containing its centroid; when two share a cell the larger wins.
pub fn build_targets(
    semantic: &[u8],
    instances: &[Instance],
    (img_h, img_w): (usize, usize),
    stride: usize,
    grid: usize,
    thing_classes: usize,
) -> Result<Targets> {
    if semantic.len() != img_h * img_w || img_h % stride != 0 || img_w % stride != 0 {
        return Err(Error::invalid("targets: label map does not match the image extent"));
    }
    let (fh, fw) = (img_h / stride, img_w / stride);
    if fh % grid != 0 || fw % grid != 0 {
        return Err(Error::invalid("targets: grid does not tile the feature map"));
    }
    let mut owner: Vec<Option<usize>> = vec![None; grid * grid];
    for (k, inst) in instances.iter().enumerate() {
        if inst.category as usize >= thing_classes {
            return Err(Error::invalid(format!("instance category {} is not a thing class", inst.category)));
        }
        let area = inst.area();
        if area == 0 {
            continue;
        }
        let (cx, cy) = inst.centroid(img_w);
        let gx = (((cx + 0.5) / img_w as f64 * grid as f64) as usize).min(grid - 1);
        let gy = (((cy + 0.5) / img_h as f64 * grid as f64) as usize).min(grid - 1);
        let cell = gy * grid + gx;
        match owner[cell] {
            Some(j) if instances[j].area() >= area => {}
            _ => owner[cell] = Some(k),
        }
    }
    let mut cate = vec![0.0; grid * grid * thing_classes];
    let mut positives = Vec::new();
    for (cell, o) in owner.iter().enumerate() {
        if let Some(k) = *o {
            let inst = &instances[k];
            cate[cell * thing_classes + inst.category as usize] = 1.0;
            positives.push((cell, area_downsample(&inst.mask, img_h, img_w, stride)));
        }
    }
    Ok(Targets {
        feat_h: fh,
        feat_w: fw,
        grid,
        thing_classes,
        sem_labels: majority_downsample(semantic, img_h, img_w, stride),
        cate,
        positives,
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Sigmoid focal loss of one logit and its derivative.
pub fn focal_term(x: f64, target: f64) -> (f64, f64) {
    let p = sigmoid(x);
    let (a, g) = (FOCAL_ALPHA, FOCAL_GAMMA);
    if target > 0.5 {
        let log_p = -softplus(-x);
        let q = 1.0 - p;
        let loss = -a * q.powf(g) * log_p;
        let d = a * q.powf(g) * (g * p * log_p - q);
        (loss, d)
    } else {
        let log_q = -softplus(x);
        let loss = -(1.0 - a) * p.powf(g) * log_q;
        let d = -(1.0 - a) * p.powf(g) * (g * (1.0 - p) * log_q - p);
        (loss, d)
    }
}

struct Focal {
    targets: Vec<f64>,
    norm: f64,
}

impl CustomOp for Focal {
    fn name(&self) -> &'static str {
        "focal_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, gy: &[f64]) -> Vec<Option<Vec<f64>>> {
        let g = gy[0] / self.norm;
        let grad = inputs[0].data().iter().zip(&self.targets).map(|(&x, &t)| g * focal_term(x, t).1).collect();
        vec![Some(grad)]
    }
}

/// Focal loss over all logits, normalized by `num_pos + 1`.
pub fn focal_loss(g: &mut Graph, logits: Var, targets: &[f64], num_pos: usize) -> Result<Var> {
    if g.value(logits).numel() != targets.len() {
        return Err(Error::ShapeMismatch { op: "focal_loss", lhs: g.shape(logits).to_vec(), rhs: vec![targets.len()] });
    }
    let norm = num_pos as f64 + 1.0;
    let total: f64 = g.value(logits).data().iter().zip(targets).map(|(&x, &t)| focal_term(x, t).0).sum();
    Ok(g.custom(&[logits], Tensor::scalar(total / norm), Focal { targets: targets.to_vec(), norm }))
}

struct Dice {
    rows: Vec<(usize, Vec<f64>)>,
}

/// Per-row `(loss, Σpt, Σp² + Σt² + ε)`.
fn dice_row(logits: &[f64], target: &[f64]) -> (f64, f64, f64) {
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for (&x, &t) in logits.iter().zip(target) {
        let p = sigmoid(x);
        a += p * t;
        b += p * p;
        c += t * t;
    }
    let den = b + c + DICE_EPS;
    (1.0 - (2.0 * a + DICE_EPS) / den, a, den)
}

impl CustomOp for Dice {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, gy: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0];
        let n = x.shape()[1];
        let mut grad = vec![0.0; x.numel()];
        let scale = gy[0] / self.rows.len() as f64;
        for (row, target) in &self.rows {
            let xr = &x.data()[row * n..][..n];
            let (_, a, den) = dice_row(xr, target);
            let num = 2.0 * a + DICE_EPS;
            for (i, (&xi, &t)) in xr.iter().zip(target).enumerate() {
                let p = sigmoid(xi);
                let dp = -(2.0 * t * den - num * 2.0 * p) / (den * den);
                grad[row * n + i] += scale * dp * p * (1.0 - p);
            }
        }
        vec![Some(grad)]
    }
}

/// Mean dice loss of the selected rows of `mask_logits` (`G²×(h·w)`); a
/// constant zero when there are no positives.
pub fn dice_loss(g: &mut Graph, mask_logits: Var, positives: &[(usize, Vec<f64>)]) -> Result<Var> {
    let s = g.shape(mask_logits).to_vec();
    if positives.is_empty() {
        return Ok(g.input(Tensor::scalar(0.0)));
    }
    if s.len() != 2 || positives.iter().any(|(r, t)| *r >= s[0] || t.len() != s[1]) {
        return Err(Error::invalid(format!("dice_loss: targets do not fit logits of shape {s:?}")));
    }
    let xd = g.value(mask_logits).data();
    let total: f64 = positives.iter().map(|(r, t)| dice_row(&xd[r * s[1]..][..s[1]], t).0).sum();
    let value = Tensor::scalar(total / positives.len() as f64);
    Ok(g.custom(&[mask_logits], value, Dice { rows: positives.to_vec() }))
}

struct CrossEntropy {
    labels: Vec<u8>,
    /// Softmax probabilities, row-major.
    probs: Vec<f64>,
    count: usize,
}

impl CustomOp for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, gy: &[f64]) -> Vec<Option<Vec<f64>>> {
        let k = *inputs[0].shape().last().unwrap();
        let scale = gy[0] / self.count.max(1) as f64;
        let mut grad = vec![0.0; self.probs.len()];
        for (i, &l) in self.labels.iter().enumerate() {
            if l == VOID {
                continue;
            }
            for c in 0..k {
                let t = if c == l as usize { 1.0 } else { 0.0 };
                grad[i * k + c] = scale * (self.probs[i * k + c] - t);
            }
        }
        vec![Some(grad)]
    }
}

/// Mean softmax cross-entropy of `logits` (`…×K`) against `labels`, skipping
/// [`VOID`].
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[u8]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    let k = *s.last().ok_or_else(|| Error::invalid("cross_entropy on a scalar"))?;
    let rows = g.value(logits).numel() / k;
    if rows != labels.len() || labels.iter().any(|&l| l != VOID && l as usize >= k) {
        return Err(Error::invalid(format!("cross_entropy: {} labels for logits {s:?}", labels.len())));
    }
    let xd = g.value(logits).data();
    let mut probs = vec![0.0; xd.len()];
    let (mut total, mut count) = (0.0, 0usize);
    for (i, &l) in labels.iter().enumerate() {
        let row = &xd[i * k..][..k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        for c in 0..k {
            probs[i * k + c] = (row[c] - m).exp() / z;
        }
        if l != VOID {
            total += m + z.ln() - row[l as usize];
            count += 1;
        }
    }
    let value = Tensor::scalar(if count > 0 { total / count as f64 } else { 0.0 });
    Ok(g.custom(&[logits], value, CrossEntropy { labels: labels.to_vec(), probs, count }))
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub mask: Var,
    pub cate: Var,
    pub sem: Var,
}

/// `L_mask + L_cate + λ·L_sem`. With `λ = 0` the semantic term is left out
/// of the total, so no gradient reaches the semantic branch.
pub fn total_loss(g: &mut Graph, out: &Outputs, t: &Targets, lambda: f64) -> Result<LossTerms> {
    if (out.feat_h, out.feat_w) != (t.feat_h, t.feat_w) {
        return Err(Error::ShapeMismatch {
            op: "total_loss",
            lhs: vec![out.feat_h, out.feat_w],
            rhs: vec![t.feat_h, t.feat_w],
        });
    }
    let mask = dice_loss(g, out.mask_logits, &t.positives)?;
    let cate = focal_loss(g, out.cate_logits, &t.cate, t.positives.len())?;
    let sem = cross_entropy(g, out.sem_logits, &t.sem_labels)?;
    let inst = g.add(mask, cate)?;
    let total = if lambda == 0.0 {
        inst
    } else {
        let weighted = g.scale(sem, lambda);
        g.add(inst, weighted)?
    };
    Ok(LossTerms { total, mask, cate, sem })
}

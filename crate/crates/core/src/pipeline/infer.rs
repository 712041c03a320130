//! Inference: grid decoding, Matrix-NMS, fusion.

use crate::autodiff::Graph;
use crate::error::Result;
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::fusion::{fuse_panoptic, FusionConfig, FusionInstance, PanopticSegmentation};
use super::model::{Model, FEATURE_STRIDE};
use super::nms::matrix_nms;

/// Soft instance masks at image resolution, sorted by descending score
/// (ties by grid cell, then category).
#[derive(Clone, Debug, PartialEq)]
pub struct InstancePrediction {
    pub height: usize,
    pub width: usize,
    /// Row-major probabilities in `[0, 1]`.
    pub masks: Vec<Vec<f64>>,
    pub categories: Vec<u8>,
    pub scores: Vec<f64>,
    pub cells: Vec<usize>,
}

impl InstancePrediction {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn binary_masks(&self) -> Vec<Vec<bool>> {
        self.masks.iter().map(|m| m.iter().map(|&v| v > 0.5).collect()).collect()
    }
}

/// Bilinear upsampling by an integer `factor` with half-pixel centres and
/// edge clamping, for an `h×w×c` row-major map.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, c: usize, factor: usize) -> Vec<f64> {
    let (ho, wo) = (h * factor, w * factor);
    let coord = |d: usize, n: usize| {
        let s = ((d as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; ho * wo * c];
    for y in 0..ho {
        let (y0, y1, fy) = coord(y, h);
        for x in 0..wo {
            let (x0, x1, fx) = coord(x, w);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(y * wo + x) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Picks every `(cell, class)` whose category probability exceeds
/// `score_thr`. The score is that probability times the mean mask
/// probability inside the binarized mask.
pub fn decode_instances(
    cate_logits: &Tensor,
    mask_logits: &Tensor,
    (feat_h, feat_w): (usize, usize),
    score_thr: f64,
) -> InstancePrediction {
    let k = cate_logits.shape()[1];
    let (h, w) = (feat_h * FEATURE_STRIDE, feat_w * FEATURE_STRIDE);
    let mut items = Vec::new();
    for (cell, row) in cate_logits.data().chunks_exact(k).enumerate() {
        let probs: Vec<f64> = row.iter().map(|&v| sigmoid(v)).collect();
        if probs.iter().all(|&p| p <= score_thr) {
            continue;
        }
        let logits = &mask_logits.data()[cell * feat_h * feat_w..][..feat_h * feat_w];
        let soft: Vec<f64> = logits.iter().map(|&v| sigmoid(v)).collect();
        let mask = upsample_bilinear(&soft, feat_h, feat_w, 1, FEATURE_STRIDE);
        let (sum, count) = mask.iter().filter(|&&v| v > 0.5).fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
        if count == 0 {
            continue;
        }
        let maskness = sum / count as f64;
        for (class, &p) in probs.iter().enumerate() {
            if p > score_thr {
                items.push((p * maskness, cell, class as u8, mask.clone()));
            }
        }
    }
    items.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = InstancePrediction {
        height: h,
        width: w,
        masks: Vec::new(),
        categories: Vec::new(),
        scores: Vec::new(),
        cells: Vec::new(),
    };
    for (score, cell, class, mask) in items {
        out.scores.push(score);
        out.cells.push(cell);
        out.categories.push(class);
        out.masks.push(mask);
    }
    out
}

/// Matrix-NMS followed by the post-NMS threshold; survivors re-sorted.
pub fn suppress(pred: &InstancePrediction, cfg: &ModelConfig) -> Vec<FusionInstance> {
    let masks = pred.binary_masks();
    let decayed = matrix_nms(&masks, &pred.categories, &pred.scores, cfg.nms_sigma);
    let mut kept: Vec<(FusionInstance, usize)> = masks
        .into_iter()
        .zip(&pred.categories)
        .zip(decayed)
        .zip(&pred.cells)
        .filter(|(((_, _), s), _)| *s >= cfg.update_thr)
        .map(|(((mask, &category), score), &cell)| (FusionInstance { mask, category, score }, cell))
        .collect();
    kept.sort_by(|a, b| b.0.score.total_cmp(&a.0.score).then(a.1.cmp(&b.1)));
    kept.into_iter().map(|(f, _)| f).collect()
}

pub fn semantic_argmax(logits: &[f64], k: usize) -> Vec<u8> {
    logits
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub instances: InstancePrediction,
    pub kept: Vec<FusionInstance>,
    /// Image-resolution semantic argmax.
    pub semantic: Vec<u8>,
    pub panoptic: PanopticSegmentation,
}

pub fn infer(model: &Model, image: &Tensor) -> Result<Inference> {
    let cfg = &model.cfg;
    let mut g = Graph::new();
    let p = model.store.bind_frozen(&mut g);
    let x = g.input(image.clone());
    let out = model.forward(&mut g, &p, x)?;
    let (fh, fw) = (out.feat_h, out.feat_w);
    let instances = decode_instances(g.value(out.cate_logits), g.value(out.mask_logits), (fh, fw), cfg.score_thr);
    let kept = suppress(&instances, cfg);
    let k = cfg.num_classes();
    let sem_up = upsample_bilinear(g.value(out.sem_logits).data(), fh, fw, k, FEATURE_STRIDE);
    let semantic = semantic_argmax(&sem_up, k);
    let (h, w) = (fh * FEATURE_STRIDE, fw * FEATURE_STRIDE);
    let fcfg = FusionConfig { thing_classes: cfg.thing_classes, stuff_area_frac: cfg.stuff_area_frac, min_unclaimed: 0.5 };
    let panoptic = fuse_panoptic(&kept, &semantic, h, w, &fcfg)?;
    Ok(Inference { instances, kept, semantic, panoptic })
}

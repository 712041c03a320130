//! Panoptic quality.
//!
//! Segments are `(category, instance id)` pairs; prediction pixels labelled
//! [`VOID`] form no segment. A ground-truth and a predicted segment of the
//! same category match when their IoU exceeds 0.5, where the union leaves out
//! predicted pixels that fall on ground-truth void. Unmatched predictions
//! lying mostly on ground-truth void are not counted as false positives.
//!
//! Per class: `SQ = Σ IoU / TP`, `RQ = TP / (TP + FP/2 + FN/2)` and
//! `PQ = SQ · RQ`. Dataset figures average over classes with at least one
//! ground-truth or predicted segment.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::fusion::PanopticSegmentation;
use super::VOID;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassStats {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou_sum: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassPq {
    pub category: u8,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub stats: ClassStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PqResult {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_things: f64,
    pub pq_stuff: f64,
    pub per_class: Vec<ClassPq>,
}

type Segment = (u8, u32);

/// Matched `(gt, pred, iou)` triples plus the per-class tallies of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageMatch {
    pub matches: Vec<(Segment, Segment, f64)>,
    pub stats: BTreeMap<u8, ClassStats>,
}

pub fn match_segments(pred: &PanopticSegmentation, gt: &PanopticSegmentation, num_classes: usize) -> Result<ImageMatch> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::ShapeMismatch {
            op: "compute_pq",
            lhs: vec![pred.height, pred.width],
            rhs: vec![gt.height, gt.width],
        });
    }
    let valid = |c: u8| c == VOID || (c as usize) < num_classes;
    if let Some(&c) = pred.category.iter().chain(&gt.category).find(|&&c| !valid(c)) {
        return Err(Error::invalid(format!("category {c} outside the vocabulary of {num_classes} classes")));
    }
    let mut gt_area: BTreeMap<Segment, usize> = BTreeMap::new();
    let mut pred_area: BTreeMap<Segment, usize> = BTreeMap::new();
    let mut pred_void: BTreeMap<Segment, usize> = BTreeMap::new();
    let mut inter: BTreeMap<(Segment, Segment), usize> = BTreeMap::new();
    for p in 0..gt.category.len() {
        let g = (gt.category[p], gt.instance[p]);
        let q = (pred.category[p], pred.instance[p]);
        if g.0 != VOID {
            *gt_area.entry(g).or_default() += 1;
        }
        if q.0 == VOID {
            continue;
        }
        *pred_area.entry(q).or_default() += 1;
        if g.0 == VOID {
            *pred_void.entry(q).or_default() += 1;
        } else if g.0 == q.0 {
            *inter.entry((g, q)).or_default() += 1;
        }
    }
    let mut candidates: Vec<(Segment, Segment, f64)> = inter
        .iter()
        .filter_map(|(&(g, q), &i)| {
            let union = gt_area[&g] + pred_area[&q] - i - pred_void.get(&q).copied().unwrap_or(0);
            let iou = i as f64 / union as f64;
            (iou > 0.5).then_some((g, q, iou))
        })
        .collect();
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut out = ImageMatch::default();
    let mut gt_used = BTreeMap::new();
    let mut pred_used = BTreeMap::new();
    for (g, q, iou) in candidates {
        // IoU > 0.5 makes matches unique; a repeat would be a logic error.
        assert!(gt_used.insert(g, q).is_none(), "ground-truth segment {g:?} matched twice");
        assert!(pred_used.insert(q, g).is_none(), "predicted segment {q:?} matched twice");
        let s = out.stats.entry(g.0).or_default();
        s.tp += 1;
        s.iou_sum += iou;
        out.matches.push((g, q, iou));
    }
    for g in gt_area.keys().filter(|g| !gt_used.contains_key(g)) {
        out.stats.entry(g.0).or_default().fn_ += 1;
    }
    for (q, &area) in pred_area.iter().filter(|(q, _)| !pred_used.contains_key(q)) {
        let on_void = pred_void.get(q).copied().unwrap_or(0);
        if on_void * 2 > area {
            continue;
        }
        out.stats.entry(q.0).or_default().fp += 1;
    }
    Ok(out)
}

/// Dataset-level tallies.
#[derive(Clone, Debug, PartialEq)]
pub struct PqAccumulator {
    pub thing_classes: usize,
    pub num_classes: usize,
    pub stats: Vec<ClassStats>,
}

impl PqAccumulator {
    pub fn new(thing_classes: usize, num_classes: usize) -> Self {
        Self { thing_classes, num_classes, stats: vec![ClassStats::default(); num_classes] }
    }

    pub fn add(&mut self, pred: &PanopticSegmentation, gt: &PanopticSegmentation) -> Result<ImageMatch> {
        let m = match_segments(pred, gt, self.num_classes)?;
        for (&c, s) in &m.stats {
            let t = &mut self.stats[c as usize];
            t.tp += s.tp;
            t.fp += s.fp;
            t.fn_ += s.fn_;
            t.iou_sum += s.iou_sum;
        }
        Ok(m)
    }

    pub fn result(&self) -> PqResult {
        let mut per_class = Vec::new();
        for (c, s) in self.stats.iter().enumerate() {
            if s.tp + s.fp + s.fn_ == 0 {
                continue;
            }
            let sq = if s.tp > 0 { s.iou_sum / s.tp as f64 } else { 0.0 };
            let rq = s.tp as f64 / (s.tp as f64 + 0.5 * s.fp as f64 + 0.5 * s.fn_ as f64);
            per_class.push(ClassPq { category: c as u8, pq: sq * rq, sq, rq, stats: *s });
        }
        let mean = |f: &dyn Fn(&ClassPq) -> f64, keep: &dyn Fn(&ClassPq) -> bool| {
            let v: Vec<f64> = per_class.iter().filter(|c| keep(c)).map(f).collect();
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let th = self.thing_classes;
        PqResult {
            pq: mean(&|c| c.pq, &|_| true),
            sq: mean(&|c| c.sq, &|_| true),
            rq: mean(&|c| c.rq, &|_| true),
            pq_things: mean(&|c| c.pq, &|c| (c.category as usize) < th),
            pq_stuff: mean(&|c| c.pq, &|c| (c.category as usize) >= th),
            per_class,
        }
    }
}

pub fn compute_pq(
    pred: &PanopticSegmentation,
    gt: &PanopticSegmentation,
    thing_classes: usize,
    num_classes: usize,
) -> Result<PqResult> {
    let mut acc = PqAccumulator::new(thing_classes, num_classes);
    acc.add(pred, gt)?;
    Ok(acc.result())
}

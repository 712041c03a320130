//! Heuristic panoptic fusion.
//!
//! Instances are painted in descending score order onto unclaimed pixels; an
//! instance keeps its id only if at least half of its mask was still
//! unclaimed. Remaining pixels take the semantic argmax; thing classes there
//! become void, since every thing pixel should come from an instance. Stuff
//! classes covering less than the minimum area fraction are voided too.

use crate::error::{Error, Result};

use super::VOID;

/// Per-pixel `(category, instance id)`; id 0 means stuff or void.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PanopticSegmentation {
    pub height: usize,
    pub width: usize,
    pub category: Vec<u8>,
    pub instance: Vec<u32>,
}

impl PanopticSegmentation {
    pub fn new(height: usize, width: usize, category: Vec<u8>, instance: Vec<u32>) -> Result<Self> {
        if category.len() != height * width || instance.len() != height * width {
            return Err(Error::invalid("panoptic map size does not match its extent"));
        }
        Ok(Self { height, width, category, instance })
    }

    /// Ground truth from a semantic map and instance masks (ids `1..`).
    pub fn from_ground_truth(height: usize, width: usize, semantic: &[u8], masks: &[(u8, &[bool])]) -> Result<Self> {
        let mut category = semantic.to_vec();
        let mut instance = vec![0u32; height * width];
        for (k, (cat, mask)) in masks.iter().enumerate() {
            for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                category[p] = *cat;
                instance[p] = k as u32 + 1;
            }
        }
        Self::new(height, width, category, instance)
    }
}

/// An instance ready for painting.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionInstance {
    pub mask: Vec<bool>,
    pub category: u8,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    pub thing_classes: usize,
    pub stuff_area_frac: f64,
    /// Minimum unclaimed fraction of a mask for the instance to be kept.
    pub min_unclaimed: f64,
}

/// `instances` must be sorted by descending score.
pub fn fuse_panoptic(
    instances: &[FusionInstance],
    semantic: &[u8],
    height: usize,
    width: usize,
    cfg: &FusionConfig,
) -> Result<PanopticSegmentation> {
    let n = height * width;
    if semantic.len() != n || instances.iter().any(|i| i.mask.len() != n) {
        return Err(Error::invalid("fusion inputs do not match the image extent"));
    }
    let mut category = vec![VOID; n];
    let mut instance = vec![0u32; n];
    let mut next_id = 1u32;
    for inst in instances {
        let area = inst.mask.iter().filter(|&&m| m).count();
        if area == 0 {
            continue;
        }
        let free: Vec<usize> = (0..n).filter(|&p| inst.mask[p] && instance[p] == 0).collect();
        if (free.len() as f64) < cfg.min_unclaimed * area as f64 || free.is_empty() {
            continue;
        }
        for p in free {
            instance[p] = next_id;
            category[p] = inst.category;
        }
        next_id += 1;
    }
    let mut stuff_area = [0usize; 256];
    for p in 0..n {
        if instance[p] == 0 {
            let c = semantic[p];
            if c != VOID && (c as usize) >= cfg.thing_classes {
                category[p] = c;
                stuff_area[c as usize] += 1;
            }
        }
    }
    let min_area = cfg.stuff_area_frac * n as f64;
    for p in 0..n {
        if instance[p] == 0 && category[p] != VOID && (stuff_area[category[p] as usize] as f64) < min_area {
            category[p] = VOID;
        }
    }
    PanopticSegmentation::new(height, width, category, instance)
}

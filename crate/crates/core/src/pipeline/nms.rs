//! Matrix-NMS with gaussian decay.
//!
//! Candidates are sorted by descending score. For `i < j` with the same
//! category, `iou_ij` is the IoU of the binarized masks and
//! `comp_i = max_{k<i} iou_ki` is how suppressed `i` already is. Then
//!
//! ```text
//! decay_j = min_{i<j} exp(-(iou_ij² - comp_i²) / σ)
//! ```
//!
//! and the new score is `score_j · decay_j`. Pairs of different categories
//! have zero IoU.

/// IoU of two binary masks; zero when both are empty.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Decayed scores. `scores` must be sorted in descending order.
pub fn matrix_nms(masks: &[Vec<bool>], categories: &[u8], scores: &[f64], sigma: f64) -> Vec<f64> {
    let n = scores.len();
    assert!(masks.len() == n && categories.len() == n, "matrix_nms: length mismatch");
    debug_assert!(scores.windows(2).all(|w| w[0] >= w[1]), "matrix_nms: scores must be sorted");
    let mut iou = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            if categories[i] == categories[j] {
                iou[i * n + j] = mask_iou(&masks[i], &masks[j]);
            }
        }
    }
    let comp: Vec<f64> = (0..n).map(|i| (0..i).map(|k| iou[k * n + i]).fold(0.0, f64::max)).collect();
    (0..n)
        .map(|j| {
            let decay = (0..j)
                .map(|i| (-(iou[i * n + j].powi(2) - comp[i].powi(2)) / sigma).exp())
                .fold(1.0, f64::min);
            scores[j] * decay
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_mask_unchanged() {
        assert_eq!(matrix_nms(&[vec![true, false]], &[0], &[0.7], 2.0), vec![0.7]);
    }

    #[test]
    fn identical_masks_decay() {
        let m = vec![true, true, false, false];
        let s = matrix_nms(&[m.clone(), m], &[1, 1], &[0.9, 0.8], 2.0);
        assert_eq!(s[0], 0.9);
        assert!(s[1] < 0.8);
        assert!((s[1] - 0.8 * (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn other_category_untouched() {
        let m = vec![true, true];
        let s = matrix_nms(&[m.clone(), m], &[0, 1], &[0.9, 0.8], 2.0);
        assert_eq!(s, vec![0.9, 0.8]);
    }

    #[test]
    fn empty_masks_have_zero_iou() {
        assert_eq!(mask_iou(&[false, false], &[false, false]), 0.0);
    }
}

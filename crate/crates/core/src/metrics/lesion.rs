use std::collections::BTreeMap;

use crate::error::Result;
use crate::postprocess::{label_components, BinaryMask3D, Connectivity};

use super::check_shapes;

/// Best-overlapping predicted lesion for one ground-truth lesion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LesionMatch {
    pub gt_id: u32,
    pub pred_id: Option<u32>,
    /// `|GT ∩ Pred| / |GT|`.
    pub overlap: f64,
}

/// Detection tallies that can be pooled across cases.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LesionCounts {
    pub gt_lesions: usize,
    pub gt_detected: usize,
    pub gt_detected_greater_zero: usize,
    pub pred_lesions: usize,
    pub pred_true: usize,
    pub pred_true_greater_zero: usize,
}

impl std::ops::Add for LesionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            gt_lesions: self.gt_lesions + o.gt_lesions,
            gt_detected: self.gt_detected + o.gt_detected,
            gt_detected_greater_zero: self.gt_detected_greater_zero + o.gt_detected_greater_zero,
            pred_lesions: self.pred_lesions + o.pred_lesions,
            pred_true: self.pred_true + o.pred_true,
            pred_true_greater_zero: self.pred_true_greater_zero + o.pred_true_greater_zero,
        }
    }
}

/// Recall and precision at overlap fraction 0.5 and above zero. A rate
/// with nothing to count (no lesions of that side) is NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LesionDetection {
    pub recall: f64,
    pub precision: f64,
    pub recall_greater_zero: f64,
    pub precision_greater_zero: f64,
}

impl LesionCounts {
    pub fn rates(&self) -> LesionDetection {
        let ratio = |a: usize, b: usize| {
            if b == 0 {
                f64::NAN
            } else {
                a as f64 / b as f64
            }
        };
        LesionDetection {
            recall: ratio(self.gt_detected, self.gt_lesions),
            precision: ratio(self.pred_true, self.pred_lesions),
            recall_greater_zero: ratio(self.gt_detected_greater_zero, self.gt_lesions),
            precision_greater_zero: ratio(self.pred_true_greater_zero, self.pred_lesions),
        }
    }
}

pub const DETECTION_THRESHOLD: f64 = 0.5;

struct Overlaps {
    gt_sizes: Vec<usize>,
    pred_sizes: Vec<usize>,
    /// `(gt id, pred id) -> shared voxels`, ids 1-based.
    shared: BTreeMap<(u32, u32), usize>,
}

fn overlaps(p: &BinaryMask3D, g: &BinaryMask3D) -> Result<Overlaps> {
    check_shapes(p, g)?;
    let gc = label_components(g, Connectivity::TwentySix);
    let pc = label_components(p, Connectivity::TwentySix);
    let mut shared = BTreeMap::new();
    for (&a, &b) in gc.labels.iter().zip(&pc.labels) {
        if a != 0 && b != 0 {
            *shared.entry((a, b)).or_insert(0) += 1;
        }
    }
    Ok(Overlaps {
        gt_sizes: gc.sizes,
        pred_sizes: pc.sizes,
        shared,
    })
}

/// One entry per ground-truth lesion (26-connected component of `g`).
pub fn lesion_matches(p: &BinaryMask3D, g: &BinaryMask3D) -> Result<Vec<LesionMatch>> {
    let o = overlaps(p, g)?;
    let mut out: Vec<LesionMatch> = (1..=o.gt_sizes.len() as u32)
        .map(|gt_id| LesionMatch {
            gt_id,
            pred_id: None,
            overlap: 0.0,
        })
        .collect();
    for (&(gi, pi), &n) in &o.shared {
        let m = &mut out[gi as usize - 1];
        let frac = n as f64 / o.gt_sizes[gi as usize - 1] as f64;
        if frac > m.overlap {
            m.overlap = frac;
            m.pred_id = Some(pi);
        }
    }
    Ok(out)
}

/// A lesion counts as found at threshold `t` when one component of the
/// other side covers more than `t` of its volume.
pub fn lesion_counts(p: &BinaryMask3D, g: &BinaryMask3D, threshold: f64) -> Result<LesionCounts> {
    let o = overlaps(p, g)?;
    let mut gt_best = vec![0.0f64; o.gt_sizes.len()];
    let mut pred_best = vec![0.0f64; o.pred_sizes.len()];
    for (&(gi, pi), &n) in &o.shared {
        let (gi, pi) = (gi as usize - 1, pi as usize - 1);
        gt_best[gi] = gt_best[gi].max(n as f64 / o.gt_sizes[gi] as f64);
        pred_best[pi] = pred_best[pi].max(n as f64 / o.pred_sizes[pi] as f64);
    }
    let above = |v: &[f64], t: f64| v.iter().filter(|&&f| f > t).count();
    Ok(LesionCounts {
        gt_lesions: gt_best.len(),
        gt_detected: above(&gt_best, threshold),
        gt_detected_greater_zero: above(&gt_best, 0.0),
        pred_lesions: pred_best.len(),
        pred_true: above(&pred_best, threshold),
        pred_true_greater_zero: above(&pred_best, 0.0),
    })
}

pub fn lesion_detection(p: &BinaryMask3D, g: &BinaryMask3D) -> Result<LesionDetection> {
    Ok(lesion_counts(p, g, DETECTION_THRESHOLD)?.rates())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(bits: &str) -> BinaryMask3D {
        BinaryMask3D::new(
            [1, 1, bits.len()],
            [1.0; 3],
            bits.bytes().map(|b| b == b'1').collect(),
        )
        .unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let g = line("1100110011");
        let d = lesion_detection(&g, &g).unwrap();
        assert_eq!(
            (
                d.recall,
                d.precision,
                d.recall_greater_zero,
                d.precision_greater_zero
            ),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn partial_cover_depends_on_threshold() {
        let g = line("1111111111");
        let p = line("1111000000");
        let d = lesion_detection(&p, &g).unwrap();
        assert_eq!((d.recall, d.recall_greater_zero), (0.0, 1.0));
        let m = lesion_matches(&p, &g).unwrap();
        assert_eq!(
            m,
            [LesionMatch {
                gt_id: 1,
                pred_id: Some(1),
                overlap: 0.4
            }]
        );
    }

    #[test]
    fn spurious_blob_halves_precision() {
        let g = line("0111000000");
        let p = line("0111000011");
        let d = lesion_detection(&p, &g).unwrap();
        assert_eq!((d.precision_greater_zero, d.recall), (0.5, 1.0));
        let empty = line("0000000000");
        let d = lesion_detection(&empty, &empty).unwrap();
        assert!(d.recall.is_nan() && d.precision.is_nan());
    }
}

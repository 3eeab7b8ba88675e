//! Segmentation scores: voxel overlap, surface distances, lesion detection
//! and tumor burden, plus the per-case CSV report.

mod lesion;
mod report;
mod surface;

pub use lesion::{
    lesion_counts, lesion_detection, lesion_matches, LesionCounts, LesionDetection, LesionMatch,
};
pub use report::{
    evaluate_cases, CaseEvaluation, MetricsReport, MetricsRow, Organ, CSV_COLUMNS, SUMMARY_CASE,
};
pub use surface::{border_voxels, squared_distance_transform, surface_distances, SurfaceDistances};

use crate::error::{Error, Result};
use crate::postprocess::BinaryMask3D;
use crate::volumes::{LabelVolume, TUMOR};

fn check_shapes(p: &BinaryMask3D, g: &BinaryMask3D) -> Result<()> {
    if p.dims() != g.dims() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            p.dims(),
            g.dims()
        )));
    }
    Ok(())
}

/// Voxel counts `(|P|, |G|, |P ∩ G|)`.
fn counts(p: &BinaryMask3D, g: &BinaryMask3D) -> Result<(usize, usize, usize)> {
    check_shapes(p, g)?;
    let (mut np, mut ng, mut both) = (0, 0, 0);
    for (&a, &b) in p.data().iter().zip(g.data()) {
        np += a as usize;
        ng += b as usize;
        both += (a && b) as usize;
    }
    Ok((np, ng, both))
}

fn dice_from_counts(np: usize, ng: usize, both: usize) -> f64 {
    if np + ng == 0 {
        1.0
    } else {
        2.0 * both as f64 / (np + ng) as f64
    }
}

/// `2|P ∩ G| / (|P| + |G|)`, 1 when both masks are empty.
pub fn dice_binary(p: &BinaryMask3D, g: &BinaryMask3D) -> Result<f64> {
    let (np, ng, both) = counts(p, g)?;
    Ok(dice_from_counts(np, ng, both))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapMetrics {
    pub voe: f64,
    pub jaccard: f64,
    /// NaN when the ground truth is empty.
    pub rvd: f64,
}

pub fn overlap_metrics(p: &BinaryMask3D, g: &BinaryMask3D) -> Result<OverlapMetrics> {
    let (np, ng, both) = counts(p, g)?;
    let union = np + ng - both;
    let jaccard = if union == 0 {
        1.0
    } else {
        both as f64 / union as f64
    };
    let rvd = if ng == 0 {
        f64::NAN
    } else {
        (np as f64 - ng as f64) / ng as f64
    };
    Ok(OverlapMetrics {
        voe: 1.0 - jaccard,
        jaccard,
        rvd,
    })
}

/// Global dice over all voxels of all cases, and the unweighted mean of
/// per-case dice.
pub fn dice_scores(cases: &[(&BinaryMask3D, &BinaryMask3D)]) -> Result<(f64, f64)> {
    if cases.is_empty() {
        return Err(Error::InvalidCount(0));
    }
    let (mut np, mut ng, mut both) = (0, 0, 0);
    let mut per_case = 0.0;
    for (p, g) in cases {
        let (a, b, c) = counts(p, g)?;
        np += a;
        ng += b;
        both += c;
        per_case += dice_from_counts(a, b, c);
    }
    Ok((
        dice_from_counts(np, ng, both),
        per_case / cases.len() as f64,
    ))
}

/// Tumor volume over liver-region volume.
pub fn burden(labels: &LabelVolume) -> Option<f64> {
    let liver = labels.liver_region().filter(|&b| b).count();
    (liver > 0).then(|| labels.count(TUMOR) as f64 / liver as f64)
}

/// Per-case burden errors `pred - gt`. A prediction without any liver has
/// burden 0.
pub fn burden_errors(cases: &[(&LabelVolume, &LabelVolume)]) -> Result<Vec<f64>> {
    cases
        .iter()
        .map(|(p, g)| {
            let bg = burden(g).ok_or_else(|| Error::EmptyLiver {
                case: g.id().to_string(),
            })?;
            Ok(burden(p).unwrap_or(0.0) - bg)
        })
        .collect()
}

/// Root-mean-square and maximum absolute tumor-burden error.
pub fn tumor_burden(cases: &[(&LabelVolume, &LabelVolume)]) -> Result<(f64, f64)> {
    if cases.is_empty() {
        return Err(Error::InvalidCount(0));
    }
    let errs = burden_errors(cases)?;
    let mse = errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64;
    let max = errs.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    Ok((mse.sqrt(), max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> BinaryMask3D {
        BinaryMask3D::new(
            [1, 1, bits.len()],
            [1.0; 3],
            bits.iter().map(|&b| b == 1).collect(),
        )
        .unwrap()
    }

    #[test]
    fn dice_examples() {
        let p = mask(&[1, 1, 1, 1, 0, 0]);
        let g = mask(&[0, 0, 1, 1, 1, 1]);
        assert_eq!(dice_binary(&p, &g).unwrap(), 0.5);
        assert_eq!(dice_binary(&p, &p).unwrap(), 1.0);
        let e = mask(&[0, 0, 0]);
        assert_eq!(dice_binary(&e, &e).unwrap(), 1.0);
        assert_eq!(dice_binary(&mask(&[1, 0, 0]), &e).unwrap(), 0.0);
        assert!(matches!(dice_binary(&p, &e), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn overlap_examples() {
        let g = mask(&[1, 1, 0, 0]);
        let m = overlap_metrics(&g, &g).unwrap();
        assert_eq!((m.voe, m.jaccard, m.rvd), (0.0, 1.0, 0.0));
        let p = mask(&[1, 1, 1, 1]);
        assert_eq!(overlap_metrics(&p, &g).unwrap().rvd, 1.0);
        let m = overlap_metrics(&mask(&[0, 0, 1, 1]), &g).unwrap();
        assert_eq!((m.jaccard, m.voe), (0.0, 1.0));
        assert!(overlap_metrics(&p, &mask(&[0, 0, 0, 0]))
            .unwrap()
            .rvd
            .is_nan());
    }

    #[test]
    fn global_and_per_case_dice_diverge() {
        let small = mask(&[1; 10]);
        let mut big_p = vec![0u8; 1_000_000];
        big_p[..500_000].fill(1);
        let mut big_g = vec![0u8; 1_000_000];
        big_g[500_000..].fill(1);
        let (bp, bg) = (mask(&big_p), mask(&big_g));
        let (global, per_case) = dice_scores(&[(&small, &small), (&bp, &bg)]).unwrap();
        assert_eq!(per_case, 0.5);
        assert!(global < 1e-4);
        let (gl, pc) = dice_scores(&[(&small, &small)]).unwrap();
        assert_eq!((gl, pc), (1.0, 1.0));
    }

    fn labels(v: &[u8]) -> LabelVolume {
        LabelVolume::new("c", [1, 1, v.len()], [1.0; 3], v.to_vec()).unwrap()
    }

    #[test]
    fn burden_single_case() {
        // 100 liver-region voxels: 10 tumor predicted, 6 tumor in truth
        let mut p = vec![1u8; 100];
        p[..10].fill(2);
        let mut g = vec![1u8; 100];
        g[..6].fill(2);
        let (rmse, max) = tumor_burden(&[(&labels(&p), &labels(&g))]).unwrap();
        assert!((rmse - 0.04).abs() < 1e-15 && (max - 0.04).abs() < 1e-15);
        let (r0, m0) = tumor_burden(&[(&labels(&g), &labels(&g))]).unwrap();
        assert_eq!((r0, m0), (0.0, 0.0));
        let empty = labels(&[0; 100]);
        assert!(matches!(
            tumor_burden(&[(&labels(&g), &empty)]),
            Err(Error::EmptyLiver { .. })
        ));
        assert_eq!(burden_errors(&[(&empty, &labels(&g))]).unwrap(), [-0.06]);
    }
}

use crate::error::{Error, Result};
use crate::postprocess::{binary_erode, BinaryMask3D, StructuringElement};
use crate::volumes::{voxel_index, Spacing};

use super::check_shapes;

/// Set voxels whose 6-neighbourhood is not entirely set.
pub fn border_voxels(mask: &BinaryMask3D) -> BinaryMask3D {
    let inner = binary_erode(mask, &StructuringElement::cross6(), 1);
    let data = mask
        .data()
        .iter()
        .zip(inner.data())
        .map(|(&m, &i)| m && !i)
        .collect();
    BinaryMask3D::new(mask.dims(), mask.spacing(), data).expect("same dims")
}

/// Lower envelope of parabolas along one line, in place. `f` holds squared
/// distances (infinite where unknown); sample `i` sits at `i * step`.
fn envelope_1d(f: &mut [f64], step: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let pos = |i: usize| i as f64 * step;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else { break };
            let s =
                ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                z.push(s);
                break;
            }
        }
        if v.is_empty() {
            z.push(f64::NEG_INFINITY);
        }
        v.push(q);
    }
    if v.is_empty() {
        return;
    }
    out.clear();
    let mut k = 0;
    for q in 0..f.len() {
        while k + 1 < v.len() && z[k + 1] < pos(q) {
            k += 1;
        }
        let d = (q as f64 - v[k] as f64) * step;
        out.push(d * d + f[v[k]]);
    }
    f.copy_from_slice(out);
}

/// Exact squared Euclidean distance (mm²) from every voxel center to the
/// nearest set voxel center; infinite everywhere for an empty mask.
pub fn squared_distance_transform(mask: &BinaryMask3D, spacing: Spacing) -> Vec<f64> {
    let d = mask.dims();
    let mut f: Vec<f64> = mask
        .data()
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let (mut v, mut z, mut out) = (Vec::new(), Vec::new(), Vec::new());
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = d[axis];
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for i in 0..d[a] {
            for j in 0..d[b] {
                let at = |k: usize| {
                    let mut c = [0; 3];
                    c[axis] = k;
                    c[a] = i;
                    c[b] = j;
                    voxel_index(d, c[0], c[1], c[2])
                };
                line.clear();
                line.extend((0..n).map(|k| f[at(k)]));
                envelope_1d(&mut line, spacing[axis], &mut v, &mut z, &mut out);
                for (k, &val) in line.iter().enumerate() {
                    f[at(k)] = val;
                }
            }
        }
    }
    f
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceDistances {
    /// Average symmetric surface distance.
    pub assd: f64,
    /// Maximum symmetric surface distance (Hausdorff).
    pub msd: f64,
    /// Root-mean-square symmetric surface distance.
    pub rmsd: f64,
}

/// Distances between the border voxel centers of `p` and `g`, in mm, using
/// the spacing of `p`.
pub fn surface_distances(p: &BinaryMask3D, g: &BinaryMask3D) -> Result<SurfaceDistances> {
    check_shapes(p, g)?;
    if p.is_empty() || g.is_empty() {
        return Err(Error::EmptyMask);
    }
    let spacing = p.spacing();
    let (bp, bg) = (border_voxels(p), border_voxels(g));
    let (dt_p, dt_g) = (
        squared_distance_transform(&bp, spacing),
        squared_distance_transform(&bg, spacing),
    );
    let (mut sum, mut sum_sq, mut max, mut n) = (0.0, 0.0, 0.0f64, 0usize);
    for (border, dt) in [(&bp, &dt_g), (&bg, &dt_p)] {
        for (&b, &d2) in border.data().iter().zip(dt) {
            if b {
                let d = d2.sqrt();
                sum += d;
                sum_sq += d2;
                max = max.max(d);
                n += 1;
            }
        }
    }
    Ok(SurfaceDistances {
        assd: sum / n as f64,
        msd: max,
        rmsd: (sum_sq / n as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_masks_have_zero_distance() {
        let mut m = BinaryMask3D::zeros([4, 4, 4], [1.0; 3]);
        m.data_mut()[21] = true;
        m.data_mut()[22] = true;
        let s = surface_distances(&m, &m).unwrap();
        assert_eq!((s.assd, s.msd, s.rmsd), (0.0, 0.0, 0.0));
    }

    #[test]
    fn single_voxels_on_axis() {
        let sp = [2.0, 2.0, 2.0];
        let mut p = BinaryMask3D::zeros([1, 1, 5], sp);
        let mut g = p.clone();
        p.data_mut()[0] = true;
        g.data_mut()[3] = true;
        let s = surface_distances(&p, &g).unwrap();
        assert_eq!((s.assd, s.msd, s.rmsd), (6.0, 6.0, 6.0));
    }

    #[test]
    fn empty_mask_is_an_error() {
        let mut p = BinaryMask3D::zeros([2, 2, 2], [1.0; 3]);
        let e = p.clone();
        p.data_mut()[0] = true;
        assert!(matches!(surface_distances(&p, &e), Err(Error::EmptyMask)));
    }

    #[test]
    fn anisotropic_transform_matches_brute_force() {
        let sp = [2.5, 0.7, 1.1];
        let mut m = BinaryMask3D::zeros([5, 6, 7], sp);
        for i in [3, 50, 111, 200] {
            m.data_mut()[i] = true;
        }
        let dt = squared_distance_transform(&m, sp);
        let set: Vec<usize> = (0..210).filter(|&i| m.data()[i]).collect();
        for i in 0..210 {
            let c = |i: usize| [(i / 42) as f64, ((i / 7) % 6) as f64, (i % 7) as f64];
            let a = c(i);
            let want = set
                .iter()
                .map(|&j| {
                    let b = c(j);
                    (0..3).map(|k| ((a[k] - b[k]) * sp[k]).powi(2)).sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            assert!((dt[i] - want).abs() < 1e-9, "{i}: {} vs {want}", dt[i]);
        }
    }
}

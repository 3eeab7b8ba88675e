use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{voxel_index, CtVolume, Dims, LabelVolume, Spacing, LIVER, TUMOR};
use crate::error::{Error, Result};

/// Nominal liver attenuation; each phantom draws its own mean within
/// `LIVER_HU ± PhantomParams::liver_hu_spread`.
pub const LIVER_HU: f64 = 60.0;
/// Nominal lesion attenuation (hypodense relative to liver).
pub const TUMOR_HU: f64 = 30.0;

/// Tissue model of the synthetic abdomen.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomParams {
    pub spacing: Spacing,
    pub liver_hu_spread: f64,
    pub liver_noise: f64,
    pub tumor_hu: f64,
    pub tumor_noise: f64,
    pub soft_tissue_hu: f64,
    pub soft_tissue_noise: f64,
    pub fat_hu: f64,
    /// Lesion radius range as a fraction of the smaller in-plane extent.
    pub tumor_radius: (f64, f64),
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            spacing: [2.0, 1.0, 1.0],
            liver_hu_spread: 6.0,
            liver_noise: 5.0,
            tumor_hu: TUMOR_HU,
            tumor_noise: 5.0,
            soft_tissue_hu: 15.0,
            soft_tissue_noise: 8.0,
            fat_hu: -100.0,
            tumor_radius: (0.06, 0.10),
        }
    }
}

const MIN_EXTENT: usize = 16;
const MAX_BACKGROUND_HU: f64 = 40.0;
const AIR_HU: f64 = -1000.0;
const PLACEMENT_ATTEMPTS: usize = 400;

struct Liver {
    center: [f64; 3],
    semi: [f64; 3],
    cos: f64,
    sin: f64,
}

impl Liver {
    fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let dz = (z - self.center[0]) / self.semi[0];
        let (py, px) = (y - self.center[1], x - self.center[2]);
        let u = (self.cos * py + self.sin * px) / self.semi[1];
        let v = (-self.sin * py + self.cos * px) / self.semi[2];
        dz * dz + u * u + v * v <= 1.0
    }
}

/// Voxels of a physical sphere given in voxel coordinates.
fn sphere_voxels(
    dims: Dims,
    spacing: Spacing,
    center: [f64; 3],
    radius_mm: f64,
) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let r = radius_mm / spacing[a];
        lo[a] = (center[a] - r).floor().max(0.0) as usize;
        hi[a] = ((center[a] + r).ceil() as usize).min(dims[a] - 1);
    }
    for z in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for x in lo[2]..=hi[2] {
                let d2: f64 = [z, y, x]
                    .iter()
                    .enumerate()
                    .map(|(a, &c)| ((c as f64 - center[a]) * spacing[a]).powi(2))
                    .sum();
                if d2 <= radius_mm * radius_mm {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Generates a synthetic abdominal CT volume and its labels with the default
/// tissue model. Deterministic in `seed`.
pub fn generate_phantom(
    seed: u64,
    shape: Dims,
    n_tumors: usize,
) -> Result<(CtVolume, LabelVolume)> {
    generate_phantom_with(seed, shape, n_tumors, &PhantomParams::default())
}

pub fn generate_phantom_with(
    seed: u64,
    shape: Dims,
    n_tumors: usize,
    params: &PhantomParams,
) -> Result<(CtVolume, LabelVolume)> {
    if shape.iter().any(|&d| d < MIN_EXTENT) {
        return Err(Error::InvalidShape(format!(
            "phantom extents must be >= {MIN_EXTENT}, got {shape:?}"
        )));
    }
    let [nz, ny, nx] = shape;
    let (fz, fy, fx) = (nz as f64, ny as f64, nx as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let theta = rng.random_range(-0.35..0.35);
    let liver = Liver {
        center: [
            fz * rng.random_range(0.45..0.55),
            fy * rng.random_range(0.45..0.55),
            fx * rng.random_range(0.38..0.46),
        ],
        semi: [
            fz * rng.random_range(0.28..0.34),
            fy * rng.random_range(0.24..0.30),
            fx * rng.random_range(0.26..0.32),
        ],
        cos: f64::cos(theta),
        sin: f64::sin(theta),
    };
    let liver_mean = LIVER_HU + rng.random_range(-params.liver_hu_spread..params.liver_hu_spread);

    let n = nz * ny * nx;
    let mut labels = vec![0u8; n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if liver.contains(z as f64, y as f64, x as f64) {
                    labels[voxel_index(shape, z, y, x)] = LIVER;
                }
            }
        }
    }

    // A voxel can host lesion tissue only if its whole 26-neighbourhood is
    // liver and not already lesion, which keeps lesions separated and inside.
    let interior = |labels: &[u8], [z, y, x]: [usize; 3]| -> bool {
        if z == 0 || y == 0 || x == 0 || z + 1 >= nz || y + 1 >= ny || x + 1 >= nx {
            return false;
        }
        for dz in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    let v = labels[voxel_index(shape, z + dz - 1, y + dy - 1, x + dx - 1)];
                    if v != LIVER {
                        return false;
                    }
                }
            }
        }
        true
    };

    let in_plane = fy.min(fx) * params.spacing[1].min(params.spacing[2]);
    let (r_lo, r_hi) = (
        (params.tumor_radius.0 * in_plane).max(1.5),
        (params.tumor_radius.1 * in_plane).max(2.0),
    );
    for t in 0..n_tumors {
        let mut radius = rng.random_range(r_lo..r_hi.max(r_lo + 1e-6));
        let mut placed = false;
        while !placed && radius >= 1.0 {
            for _ in 0..PLACEMENT_ATTEMPTS {
                // uniform point in the inner 70% of the liver ellipsoid
                let (a, b, c): (f64, f64, f64) = loop {
                    let p = (
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    );
                    if p.0 * p.0 + p.1 * p.1 + p.2 * p.2 <= 1.0 {
                        break p;
                    }
                };
                let (u, v) = (b * liver.semi[1] * 0.7, c * liver.semi[2] * 0.7);
                let center = [
                    liver.center[0] + a * liver.semi[0] * 0.7,
                    liver.center[1] + liver.cos * u - liver.sin * v,
                    liver.center[2] + liver.sin * u + liver.cos * v,
                ];
                let voxels = sphere_voxels(shape, params.spacing, center, radius);
                if !voxels.is_empty() && voxels.iter().all(|&p| interior(&labels, p)) {
                    for p in voxels {
                        labels[voxel_index(shape, p[0], p[1], p[2])] = TUMOR;
                    }
                    placed = true;
                    break;
                }
            }
            radius *= 0.8;
        }
        if !placed {
            return Err(Error::InvalidShape(format!(
                "could not place lesion {} of {n_tumors} inside the liver of a {shape:?} phantom",
                t + 1
            )));
        }
    }

    let liver_noise = Normal::new(liver_mean, params.liver_noise).expect("valid sigma");
    let tumor_noise = Normal::new(params.tumor_hu, params.tumor_noise).expect("valid sigma");
    let soft = Normal::new(params.soft_tissue_hu, params.soft_tissue_noise).expect("valid sigma");
    let fat = Normal::new(params.fat_hu, 10.0).expect("valid sigma");
    let air = Normal::new(0.0, 5.0).expect("valid sigma");
    let (by, bx) = (0.47 * fy, 0.47 * fx);
    let mut hu = vec![0f32; n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = voxel_index(shape, z, y, x);
                let value = match labels[i] {
                    LIVER => liver_noise.sample(&mut rng),
                    TUMOR => tumor_noise.sample(&mut rng),
                    _ => {
                        let ry = (y as f64 - fy / 2.0) / by;
                        let rx = (x as f64 - fx / 2.0) / bx;
                        let r = (ry * ry + rx * rx).sqrt();
                        let v = if r > 1.0 {
                            AIR_HU + f64::abs(air.sample(&mut rng))
                        } else if r > 0.92 {
                            fat.sample(&mut rng)
                        } else {
                            soft.sample(&mut rng)
                        };
                        v.clamp(AIR_HU, MAX_BACKGROUND_HU)
                    }
                };
                hu[i] = value as f32;
            }
        }
    }

    let id = format!("phantom-{seed}");
    let ct = CtVolume::new(id.clone(), shape, params.spacing, hu)?;
    let lv = LabelVolume::new(id, shape, params.spacing, labels)?;
    Ok((ct, lv))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_phantom(7, [16, 32, 32], 1).unwrap();
        let b = generate_phantom(7, [16, 32, 32], 1).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(8, [16, 32, 32], 1).unwrap();
        assert_ne!(a.0.data(), c.0.data());
    }

    #[test]
    fn no_tumors_means_no_label_two() {
        let (_, l) = generate_phantom(3, [16, 32, 32], 0).unwrap();
        assert_eq!(l.count(TUMOR), 0);
        assert!(l.count(LIVER) > 0);
    }

    #[test]
    fn small_shape_is_rejected() {
        assert!(matches!(
            generate_phantom(1, [15, 32, 32], 0),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn tumors_are_strictly_inside_liver() {
        // flood check: every lesion voxel's 26-neighbourhood is liver region
        let (_, l) = generate_phantom(1, [32, 64, 64], 2).unwrap();
        let d = l.dims();
        let mut lesion = 0;
        for z in 0..d[0] {
            for y in 0..d[1] {
                for x in 0..d[2] {
                    if l.data()[voxel_index(d, z, y, x)] != TUMOR {
                        continue;
                    }
                    lesion += 1;
                    for dz in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let (zz, yy, xx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                                assert!(zz >= 0 && yy >= 0 && xx >= 0);
                                let v =
                                    l.data()[voxel_index(d, zz as usize, yy as usize, xx as usize)];
                                assert!(v >= LIVER, "lesion voxel touches background");
                            }
                        }
                    }
                }
            }
        }
        assert!(lesion > 0);
    }

    #[test]
    fn intensities_follow_tissue_model() {
        for seed in 0..5 {
            let (ct, l) = generate_phantom(seed, [24, 48, 48], 2).unwrap();
            let (mut sum, mut cnt) = (0.0, 0usize);
            for (&v, &lab) in ct.data().iter().zip(l.data()) {
                match lab {
                    LIVER => {
                        sum += f64::from(v);
                        cnt += 1;
                    }
                    TUMOR => {}
                    _ => assert!((-1000.0..=40.0).contains(&v)),
                }
            }
            let mean = sum / cnt as f64;
            assert!((50.0..=70.0).contains(&mean), "liver mean {mean}");
        }
    }
}

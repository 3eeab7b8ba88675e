//! Two-stage inference: the liver model finds the organ, the lesion model
//! runs on the slices that contain it, and lesion voxels are kept only
//! inside the cleaned liver mask.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::DenseFcn;
use crate::postprocess::{
    liver_postprocess_with, mask_tumor_by_liver, BinaryMask3D, PostprocessConfig,
};
use crate::preprocess::{liver_input, stack_tumor_channels};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volumes::{CtVolume, LabelVolume, BACKGROUND, LIVER, TUMOR};

pub const DEFAULT_LOCALIZE_MARGIN: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub localize_margin: usize,
    pub postprocess: PostprocessConfig,
    /// Slices per forward pass.
    pub slice_batch: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            localize_margin: DEFAULT_LOCALIZE_MARGIN,
            postprocess: PostprocessConfig::default(),
            slice_batch: 4,
        }
    }
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub liver: f64,
    pub postprocess: f64,
    pub tumor: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadePrediction {
    pub labels: LabelVolume,
    pub liver_mask_raw: BinaryMask3D,
    pub liver_mask_post: BinaryMask3D,
    pub tumor_mask_raw: BinaryMask3D,
    pub tumor_mask_final: BinaryMask3D,
    pub z_range: Option<(usize, usize)>,
    pub timings: StageTimings,
}

/// Mask statistics written next to each predicted label file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case: String,
    pub dims: [usize; 3],
    pub liver_voxels_raw: usize,
    pub liver_voxels_post: usize,
    pub tumor_voxels_raw: usize,
    pub tumor_voxels_final: usize,
    pub z_range: Option<(usize, usize)>,
    pub timings: StageTimings,
}

impl CascadePrediction {
    pub fn summary(&self) -> CaseSummary {
        CaseSummary {
            case: self.labels.id().to_string(),
            dims: self.labels.dims(),
            liver_voxels_raw: self.liver_mask_raw.count(),
            liver_voxels_post: self.liver_mask_post.count(),
            tumor_voxels_raw: self.tumor_mask_raw.count(),
            tumor_voxels_final: self.tumor_mask_final.count(),
            z_range: self.z_range,
            timings: self.timings,
        }
    }

    /// Lesion voxels outside the post-processed liver mask; always zero.
    pub fn containment_violations(&self) -> usize {
        self.tumor_mask_final
            .data()
            .iter()
            .zip(self.liver_mask_post.data())
            .filter(|&(&t, &l)| t && !l)
            .count()
    }
}

fn check_model<T: Scalar>(model: &DenseFcn<T>, vol: &CtVolume, liver: bool) -> Result<()> {
    let spec = model.spec();
    let (role, channels, sbu) = if liver {
        ("liver", 1, true)
    } else {
        ("tumor", 3, false)
    };
    if spec.in_channels != channels || spec.final_sbu != sbu {
        return Err(Error::ModelInputMismatch(format!(
            "{role} stage needs {channels} input channel(s) and final upsampling {sbu}, \
             model has {} and {}",
            spec.in_channels, spec.final_sbu
        )));
    }
    let [_, h, w] = vol.dims();
    let (in_h, in_w) = if liver { (h / 2, w / 2) } else { (h, w) };
    let m = spec.size_multiple();
    if (liver && (h % 2 != 0 || w % 2 != 0))
        || in_h == 0
        || in_w == 0
        || in_h % m != 0
        || in_w % m != 0
    {
        return Err(Error::ModelInputMismatch(format!(
            "{role} model needs input sides divisible by {m}, slice is {h}x{w}"
        )));
    }
    Ok(())
}

/// Runs `model` on each listed slice and writes the argmax foreground into
/// the matching plane of `mask`.
fn segment_slices<T: Scalar>(
    model: &DenseFcn<T>,
    slices: &[usize],
    batch: usize,
    in_shape: [usize; 3],
    input: impl Fn(usize) -> Result<Vec<T>>,
    mask: &mut BinaryMask3D,
) -> Result<()> {
    let [_, h, w] = mask.dims();
    let plane = h * w;
    for chunk in slices.chunks(batch.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * in_shape.iter().product::<usize>());
        for &z in chunk {
            data.extend(input(z)?);
        }
        let x = Tensor::from_vec([chunk.len(), in_shape[0], in_shape[1], in_shape[2]], data)?;
        let probs = model.infer(&x)?;
        if probs.h() != h || probs.w() != w {
            return Err(Error::ModelInputMismatch(format!(
                "model output {}x{} does not match slice {h}x{w}",
                probs.h(),
                probs.w()
            )));
        }
        for (n, &z) in chunk.iter().enumerate() {
            let (bg, fg) = (probs.plane(n, 0), probs.plane(n, 1));
            let out = &mut mask.data_mut()[z * plane..(z + 1) * plane];
            for ((o, &b), &f) in out.iter_mut().zip(bg).zip(fg) {
                *o = f > b;
            }
        }
    }
    Ok(())
}

pub fn predict_liver<T: Scalar>(vol: &CtVolume, model: &DenseFcn<T>) -> Result<BinaryMask3D> {
    predict_liver_batched(vol, model, CascadeConfig::default().slice_batch)
}

pub fn predict_liver_batched<T: Scalar>(
    vol: &CtVolume,
    model: &DenseFcn<T>,
    slice_batch: usize,
) -> Result<BinaryMask3D> {
    check_model(model, vol, true)?;
    let [d, h, w] = vol.dims();
    let mut mask = BinaryMask3D::zeros(vol.dims(), vol.spacing());
    let slices: Vec<usize> = (0..d).collect();
    segment_slices(
        model,
        &slices,
        slice_batch,
        [1, h / 2, w / 2],
        |z| liver_input(vol, z),
        &mut mask,
    )?;
    Ok(mask)
}

/// Inclusive z-range of `liver` widened by `margin` and clipped to the
/// volume; `None` when the mask is empty.
pub fn localize(liver: &BinaryMask3D, margin: usize) -> Option<(usize, usize)> {
    let (lo, hi) = liver.z_extent()?;
    Some((
        lo.saturating_sub(margin),
        (hi + margin).min(liver.dims()[0] - 1),
    ))
}

/// Lesion mask for slices in `z_range`; slices outside are background.
pub fn predict_tumor<T: Scalar>(
    vol: &CtVolume,
    z_range: Option<(usize, usize)>,
    model: &DenseFcn<T>,
) -> Result<BinaryMask3D> {
    predict_tumor_batched(vol, z_range, model, CascadeConfig::default().slice_batch)
}

pub fn predict_tumor_batched<T: Scalar>(
    vol: &CtVolume,
    z_range: Option<(usize, usize)>,
    model: &DenseFcn<T>,
    slice_batch: usize,
) -> Result<BinaryMask3D> {
    check_model(model, vol, false)?;
    let [d, h, w] = vol.dims();
    let mut mask = BinaryMask3D::zeros(vol.dims(), vol.spacing());
    let Some((lo, hi)) = z_range else {
        return Ok(mask);
    };
    if lo > hi || hi >= d {
        return Err(Error::IndexOutOfRange {
            index: hi,
            extent: d,
        });
    }
    let slices: Vec<usize> = (lo..=hi).collect();
    segment_slices(
        model,
        &slices,
        slice_batch,
        [3, h, w],
        |z| stack_tumor_channels(vol, z),
        &mut mask,
    )?;
    Ok(mask)
}

/// Combines masks into labels, lesion taking precedence over liver.
pub fn assemble_labels(
    id: &str,
    liver: &BinaryMask3D,
    tumor: &BinaryMask3D,
) -> Result<LabelVolume> {
    if liver.dims() != tumor.dims() {
        return Err(Error::ShapeMismatch(format!(
            "liver mask {:?} vs tumor mask {:?}",
            liver.dims(),
            tumor.dims()
        )));
    }
    let data = liver
        .data()
        .iter()
        .zip(tumor.data())
        .map(|(&l, &t)| match (l, t) {
            (_, true) => TUMOR,
            (true, false) => LIVER,
            _ => BACKGROUND,
        })
        .collect();
    LabelVolume::new(id, liver.dims(), liver.spacing(), data)
}

pub fn predict_case<T: Scalar>(
    vol: &CtVolume,
    liver_model: &DenseFcn<T>,
    tumor_model: &DenseFcn<T>,
) -> Result<CascadePrediction> {
    predict_case_with(vol, liver_model, tumor_model, &CascadeConfig::default())
}

pub fn predict_case_with<T: Scalar>(
    vol: &CtVolume,
    liver_model: &DenseFcn<T>,
    tumor_model: &DenseFcn<T>,
    cfg: &CascadeConfig,
) -> Result<CascadePrediction> {
    // both roles are checked before any work is done
    check_model(liver_model, vol, true)?;
    check_model(tumor_model, vol, false)?;
    let start = Instant::now();
    let liver_mask_raw = predict_liver_batched(vol, liver_model, cfg.slice_batch)?;
    let t_liver = start.elapsed().as_secs_f64();

    let t = Instant::now();
    let liver_mask_post = liver_postprocess_with(&liver_mask_raw, &cfg.postprocess);
    let z_range = localize(&liver_mask_post, cfg.localize_margin);
    let t_post = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let tumor_mask_raw = predict_tumor_batched(vol, z_range, tumor_model, cfg.slice_batch)?;
    let tumor_mask_final = mask_tumor_by_liver(&tumor_mask_raw, &liver_mask_post)?;
    let t_tumor = t.elapsed().as_secs_f64();

    let labels = assemble_labels(vol.id(), &liver_mask_post, &tumor_mask_final)?;
    let pred = CascadePrediction {
        labels,
        liver_mask_raw,
        liver_mask_post,
        tumor_mask_raw,
        tumor_mask_final,
        z_range,
        timings: StageTimings {
            liver: t_liver,
            postprocess: t_post,
            tumor: t_tumor,
            total: start.elapsed().as_secs_f64(),
        },
    };
    assert_eq!(
        pred.containment_violations(),
        0,
        "lesion voxels escaped the liver mask"
    );
    Ok(pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_liver_model, build_tumor_model, NetworkSpec};
    use crate::volumes::generate_phantom;

    fn models() -> (DenseFcn<f32>, DenseFcn<f32>) {
        (
            build_liver_model(NetworkSpec::tiny_liver(), 1).unwrap(),
            build_tumor_model(NetworkSpec::tiny_tumor(), 2).unwrap(),
        )
    }

    #[test]
    fn localize_widens_and_clips() {
        let mut m = BinaryMask3D::zeros([50, 2, 2], [1.0; 3]);
        for z in 10..=40 {
            m.data_mut()[z * 4] = true;
        }
        assert_eq!(localize(&m, 2), Some((8, 42)));
        assert_eq!(localize(&m, 20), Some((0, 49)));
        assert_eq!(localize(&BinaryMask3D::zeros([5, 2, 2], [1.0; 3]), 2), None);
    }

    #[test]
    fn untrained_models_keep_shapes_and_invariant() {
        let (liver, tumor) = models();
        let (ct, _) = generate_phantom(3, [16, 32, 32], 1).unwrap();
        let a = predict_case(&ct, &liver, &tumor).unwrap();
        assert_eq!(a.labels.dims(), ct.dims());
        assert_eq!(a.liver_mask_raw.dims(), ct.dims());
        assert_eq!(a.containment_violations(), 0);
        let b = predict_case(&ct, &liver, &tumor).unwrap();
        assert_eq!(a.labels, b.labels);
        assert!(predict_tumor(&ct, None, &tumor).unwrap().is_empty());
    }

    #[test]
    fn slices_are_independent() {
        let (_, tumor) = models();
        let (ct, _) = generate_phantom(4, [16, 16, 16], 1).unwrap();
        let full = predict_tumor_batched(&ct, Some((0, 15)), &tumor, 5).unwrap();
        let plane = 16 * 16;
        for z in [0, 7, 15] {
            let one = predict_tumor_batched(&ct, Some((z, z)), &tumor, 1).unwrap();
            assert_eq!(
                one.data()[z * plane..(z + 1) * plane],
                full.data()[z * plane..(z + 1) * plane]
            );
        }
    }

    #[test]
    fn swapped_models_are_rejected() {
        let (liver, tumor) = models();
        let (ct, _) = generate_phantom(5, [16, 32, 32], 1).unwrap();
        assert!(matches!(
            predict_liver(&ct, &tumor),
            Err(Error::ModelInputMismatch(_))
        ));
        assert!(matches!(
            predict_tumor(&ct, Some((0, 1)), &liver),
            Err(Error::ModelInputMismatch(_))
        ));
        let (odd, _) = generate_phantom(5, [16, 30, 30], 1).unwrap();
        assert!(matches!(
            predict_liver(&odd, &liver),
            Err(Error::ModelInputMismatch(_))
        ));
    }

    #[test]
    fn tumor_overrides_liver_in_labels() {
        let mut liver = BinaryMask3D::zeros([1, 1, 3], [1.0; 3]);
        liver.data_mut().copy_from_slice(&[true, true, false]);
        let mut tumor = BinaryMask3D::zeros([1, 1, 3], [1.0; 3]);
        tumor.data_mut().copy_from_slice(&[false, true, false]);
        let l = assemble_labels("c", &liver, &tumor).unwrap();
        assert_eq!(l.data(), &[1, 2, 0]);
    }
}

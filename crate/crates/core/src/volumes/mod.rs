//! Volumetric data types, NIfTI I/O and the synthetic phantom generator.
//!
//! All volumes use the canonical axis order `(z, y, x)` with `x` varying
//! fastest in memory; spacing triples follow the same order.

mod nifti_io;
mod phantom;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use nifti_io::{load_labels, load_volume, save_labels, save_volume};
pub use phantom::{generate_phantom, PhantomParams, LIVER_HU, TUMOR_HU};

/// Voxel extent of a volume, `(z, y, x)`.
pub type Dims = [usize; 3];
/// Physical voxel spacing in mm, `(sz, sy, sx)`.
pub type Spacing = [f64; 3];

pub const BACKGROUND: u8 = 0;
pub const LIVER: u8 = 1;
pub const TUMOR: u8 = 2;

fn check_geometry(dims: Dims, spacing: Spacing, len: usize) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::InvalidShape(format!(
            "all dimensions must be >= 1, got {dims:?}"
        )));
    }
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::InvalidShape(format!(
            "spacing must be positive, got {spacing:?}"
        )));
    }
    let want: usize = dims.iter().product();
    if want != len {
        return Err(Error::ShapeMismatch(format!(
            "dims {dims:?} need {want} voxels, got {len}"
        )));
    }
    Ok(())
}

#[inline]
pub fn voxel_index(dims: Dims, z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

/// A CT scan in Hounsfield units.
#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f32>,
    id: String,
}

impl CtVolume {
    pub fn new(
        id: impl Into<String>,
        dims: Dims,
        spacing: Spacing,
        data: Vec<f32>,
    ) -> Result<Self> {
        check_geometry(dims, spacing, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonfiniteInput(format!(
                "HU value at voxel {i} is {}",
                data[i]
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data,
            id: id.into(),
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn spacing(&self) -> Spacing {
        self.spacing
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Axial slice `z` as a row-major `y * x` slice.
    pub fn slice(&self, z: usize) -> Result<&[f32]> {
        if z >= self.dims[0] {
            return Err(Error::IndexOutOfRange {
                index: z,
                extent: self.dims[0],
            });
        }
        let p = self.dims[1] * self.dims[2];
        Ok(&self.data[z * p..(z + 1) * p])
    }
}

/// Per-voxel class labels: 0 background, 1 liver, 2 tumor.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<u8>,
    id: String,
}

impl LabelVolume {
    pub fn new(id: impl Into<String>, dims: Dims, spacing: Spacing, data: Vec<u8>) -> Result<Self> {
        check_geometry(dims, spacing, data.len())?;
        if let Some(&bad) = data.iter().find(|&&v| v > TUMOR) {
            return Err(Error::InvalidShape(format!(
                "label value {bad} outside {{0,1,2}}"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data,
            id: id.into(),
        })
    }

    pub fn zeros(id: impl Into<String>, dims: Dims, spacing: Spacing) -> Result<Self> {
        Self::new(id, dims, spacing, vec![0; dims.iter().product()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn spacing(&self) -> Spacing {
        self.spacing
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn slice(&self, z: usize) -> Result<&[u8]> {
        if z >= self.dims[0] {
            return Err(Error::IndexOutOfRange {
                index: z,
                extent: self.dims[0],
            });
        }
        let p = self.dims[1] * self.dims[2];
        Ok(&self.data[z * p..(z + 1) * p])
    }

    /// Checks that this label volume is aligned with `ct`.
    pub fn check_aligned(&self, ct: &CtVolume) -> Result<()> {
        if self.dims != ct.dims || self.spacing != ct.spacing {
            return Err(Error::ShapeMismatch(format!(
                "labels {:?}@{:?} vs volume {:?}@{:?}",
                self.dims, self.spacing, ct.dims, ct.spacing
            )));
        }
        Ok(())
    }

    /// Voxels belonging to the liver region (liver or tumor).
    pub fn liver_region(&self) -> impl Iterator<Item = bool> + '_ {
        self.data.iter().map(|&v| v >= LIVER)
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }
}

/// Train / validation / test partition of case ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Reference proportions of the train/validation/test partition.
pub const SPLIT_RATIO: [usize; 3] = [90, 26, 14];

impl DatasetSplit {
    pub fn new(train: Vec<String>, validation: Vec<String>, test: Vec<String>) -> Result<Self> {
        let split = Self {
            train,
            validation,
            test,
        };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !seen.insert(id) {
                return Err(Error::InvalidShape(format!(
                    "case {id} appears in more than one split"
                )));
            }
        }
        Ok(())
    }

    /// Splits `ids` in order using the 90:26:14 proportions: train and
    /// validation take the floor of their share, test takes the remainder.
    pub fn scaled(ids: &[String]) -> Self {
        let n = ids.len();
        let total: usize = SPLIT_RATIO.iter().sum();
        let n_train = n * SPLIT_RATIO[0] / total;
        let n_val = n * SPLIT_RATIO[1] / total;
        Self {
            train: ids[..n_train].to_vec(),
            validation: ids[n_train..n_train + n_val].to_vec(),
            test: ids[n_train + n_val..].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{i:03}")).collect()
    }

    #[test]
    fn thirteen_cases_split_nine_two_two() {
        let s = DatasetSplit::scaled(&ids(13));
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (9, 2, 2));
        s.validate().unwrap();
    }

    #[test]
    fn full_size_split_matches_reference_counts() {
        let s = DatasetSplit::scaled(&ids(130));
        assert_eq!(
            (s.train.len(), s.validation.len(), s.test.len()),
            (90, 26, 14)
        );
    }

    #[test]
    fn overlapping_split_is_rejected() {
        let r = DatasetSplit::new(vec!["a".into()], vec!["a".into()], vec![]);
        assert!(r.is_err());
    }

    #[test]
    fn ct_volume_rejects_nan_and_bad_spacing() {
        assert!(CtVolume::new("x", [1, 1, 2], [1.0; 3], vec![0.0, f32::NAN]).is_err());
        assert!(CtVolume::new("x", [1, 1, 1], [1.0, 0.0, 1.0], vec![0.0]).is_err());
        assert!(CtVolume::new("x", [0, 1, 1], [1.0; 3], vec![]).is_err());
    }

    #[test]
    fn label_volume_rejects_unknown_class() {
        assert!(LabelVolume::new("x", [1, 1, 1], [1.0; 3], vec![3]).is_err());
    }
}

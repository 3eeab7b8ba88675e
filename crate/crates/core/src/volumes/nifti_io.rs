use std::path::Path;

use ndarray::{Array3, ArrayD};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiError, NiftiHeader, NiftiObject, NiftiType, ReaderOptions};

use super::{CtVolume, Dims, LabelVolume, Spacing};
use crate::error::{Error, Result};

/// Maps each canonical output axis `(z, y, x)` to a file axis and a flip flag.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Orientation {
    /// `source[o]` is the file axis feeding canonical axis `o`.
    source: [usize; 3],
    flip: [bool; 3],
}

impl Orientation {
    const IDENTITY: Orientation = Orientation {
        source: [2, 1, 0],
        flip: [false; 3],
    };
}

/// Voxel-to-world direction columns of the header transform (sform first,
/// then qform), or `None` when neither is set.
fn direction_columns(h: &NiftiHeader) -> Option<[[f64; 3]; 3]> {
    if h.sform_code > 0 {
        let rows = [h.srow_x, h.srow_y, h.srow_z];
        let mut cols = [[0.0; 3]; 3];
        for (j, col) in cols.iter_mut().enumerate() {
            for (i, v) in col.iter_mut().enumerate() {
                *v = f64::from(rows[i][j]);
            }
        }
        return Some(cols);
    }
    if h.qform_code > 0 {
        let (b, c, d) = (
            f64::from(h.quatern_b),
            f64::from(h.quatern_c),
            f64::from(h.quatern_d),
        );
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let r = [
            [
                a * a + b * b - c * c - d * d,
                2.0 * (b * c - a * d),
                2.0 * (b * d + a * c),
            ],
            [
                2.0 * (b * c + a * d),
                a * a + c * c - b * b - d * d,
                2.0 * (c * d - a * b),
            ],
            [
                2.0 * (b * d - a * c),
                2.0 * (c * d + a * b),
                a * a + d * d - c * c - b * b,
            ],
        ];
        let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let mut cols = [[0.0; 3]; 3];
        for (j, col) in cols.iter_mut().enumerate() {
            for (i, v) in col.iter_mut().enumerate() {
                *v = r[i][j] * if j == 2 { qfac } else { 1.0 };
            }
        }
        return Some(cols);
    }
    None
}

fn orientation(h: &NiftiHeader) -> Orientation {
    let Some(cols) = direction_columns(h) else {
        return Orientation::IDENTITY;
    };
    // world axis each file axis is most aligned with
    let mut world_of_file = [0usize; 3];
    let mut sign_of_file = [false; 3];
    for (j, col) in cols.iter().enumerate() {
        let (axis, v) = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, v)| (i, *v))
            .unwrap_or((j, 1.0));
        world_of_file[j] = axis;
        sign_of_file[j] = v < 0.0;
    }
    let mut seen = [false; 3];
    for &w in &world_of_file {
        if seen[w] {
            return Orientation::IDENTITY;
        }
        seen[w] = true;
    }
    let mut o = Orientation::IDENTITY;
    for (file_axis, &world) in world_of_file.iter().enumerate() {
        // canonical axis 0 is world z, 2 is world x
        let canon = 2 - world;
        o.source[canon] = file_axis;
        o.flip[canon] = sign_of_file[file_axis];
    }
    o
}

fn map_nifti_err(path: &Path, e: NiftiError) -> Error {
    match e {
        NiftiError::Io(io) => Error::Io(io),
        other => Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

struct RawImage {
    dims: Dims,
    spacing: Spacing,
    /// Values in canonical `(z, y, x)` order.
    values: Vec<f64>,
}

fn read_canonical(path: &Path) -> Result<RawImage> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| map_nifti_err(path, e))?;
    let header = obj.header().clone();
    let ndim = header.dim[0] as usize;
    if !(1..=7).contains(&ndim) {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("dim[0] = {ndim}"),
        });
    }
    let dims_all = header.dim[1..=ndim].to_vec();
    let extra_axes = dims_all.iter().skip(3).any(|&d| d > 1);
    let datatype = header.data_type().map_err(|e| map_nifti_err(path, e))?;
    let vector = matches!(
        datatype,
        NiftiType::Rgb24 | NiftiType::Rgba32 | NiftiType::Complex64 | NiftiType::Complex128
    );
    if ndim < 3 || extra_axes || vector {
        return Err(Error::NonScalarImage {
            path: path.to_path_buf(),
            dims: dims_all,
        });
    }
    let file_dims = [
        dims_all[0] as usize,
        dims_all[1] as usize,
        dims_all[2] as usize,
    ];
    let file_spacing = [
        f64::from(header.pixdim[1].abs()),
        f64::from(header.pixdim[2].abs()),
        f64::from(header.pixdim[3].abs()),
    ];
    let arr: ArrayD<f64> = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| map_nifti_err(path, e))?;
    if arr.ndim() < 3 || arr.shape()[..3] != file_dims[..] {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("volume shape {:?} disagrees with header", arr.shape()),
        });
    }

    let o = orientation(&header);
    let dims: Dims = [
        file_dims[o.source[0]],
        file_dims[o.source[1]],
        file_dims[o.source[2]],
    ];
    let spacing: Spacing = [
        file_spacing[o.source[0]],
        file_spacing[o.source[1]],
        file_spacing[o.source[2]],
    ];
    let mut values = Vec::with_capacity(dims.iter().product());
    // trailing singleton axes stay at index 0
    let mut idx = vec![0usize; arr.ndim()];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                for (canon, c) in [z, y, x].into_iter().enumerate() {
                    let c = if o.flip[canon] {
                        dims[canon] - 1 - c
                    } else {
                        c
                    };
                    idx[o.source[canon]] = c;
                }
                values.push(arr[idx.as_slice()]);
            }
        }
    }
    Ok(RawImage {
        dims,
        spacing,
        values,
    })
}

fn case_id(path: &Path) -> String {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    let stem = name
        .strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(name);
    stem.strip_prefix("volume-")
        .or_else(|| stem.strip_prefix("segmentation-"))
        .unwrap_or(stem)
        .to_string()
}

/// Loads a CT volume, reoriented to canonical `(z, y, x)` order.
pub fn load_volume(path: impl AsRef<Path>) -> Result<CtVolume> {
    let path = path.as_ref();
    let raw = read_canonical(path)?;
    let data = raw.values.into_iter().map(|v| v as f32).collect();
    CtVolume::new(case_id(path), raw.dims, raw.spacing, data)
}

/// Loads a label volume; values must be integers in `{0, 1, 2}`.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let raw = read_canonical(path)?;
    let mut data = Vec::with_capacity(raw.values.len());
    for v in raw.values {
        if v.fract() != 0.0 || !(0.0..=2.0).contains(&v) {
            return Err(Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: format!("label value {v} outside {{0,1,2}}"),
            });
        }
        data.push(v as u8);
    }
    LabelVolume::new(case_id(path), raw.dims, raw.spacing, data)
}

fn canonical_header(spacing: Spacing) -> NiftiHeader {
    let [sz, sy, sx] = spacing;
    let mut h = NiftiHeader::default();
    h.pixdim = [1.0, sx as f32, sy as f32, sz as f32, 1.0, 1.0, 1.0, 1.0];
    h.xyzt_units = 2; // mm
    h.qform_code = 0;
    h.sform_code = 1;
    h.srow_x = [sx as f32, 0.0, 0.0, 0.0];
    h.srow_y = [0.0, sy as f32, 0.0, 0.0];
    h.srow_z = [0.0, 0.0, sz as f32, 0.0];
    h
}

macro_rules! write_canonical {
    ($path:expr, $dims:expr, $spacing:expr, $data:expr) => {{
        let (path, dims): (&Path, Dims) = ($path, $dims);
        let header = canonical_header($spacing);
        let arr = Array3::from_shape_vec((dims[0], dims[1], dims[2]), $data)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        // file axis order is (x, y, z)
        let view = arr.view().reversed_axes();
        WriterOptions::new(path)
            .reference_header(&header)
            .write_nifti(&view)
            .map_err(|e| map_nifti_err(path, e))
    }};
}

/// Writes labels as unsigned 8-bit NIfTI; `.gz` suffix selects compression.
pub fn save_labels(vol: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    write_canonical!(
        path.as_ref(),
        vol.dims(),
        vol.spacing(),
        vol.data().to_vec()
    )
}

/// Writes a CT volume as 32-bit float NIfTI.
pub fn save_volume(vol: &CtVolume, path: impl AsRef<Path>) -> Result<()> {
    write_canonical!(
        path.as_ref(),
        vol.dims(),
        vol.spacing(),
        vol.data().to_vec()
    )
}

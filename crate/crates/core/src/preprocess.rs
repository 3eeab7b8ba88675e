//! Hounsfield windowing, resampling and the slice sampling plans.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volumes::{CtVolume, LabelVolume, LIVER, TUMOR};

/// Closed HU interval mapped linearly onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuWindow {
    low: f64,
    high: f64,
}

impl HuWindow {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(low.is_finite() && high.is_finite() && low < high) {
            return Err(Error::InvalidShape(format!(
                "window [{low}, {high}] needs low < high"
            )));
        }
        Ok(Self { low, high })
    }

    const fn fixed(low: f64, high: f64) -> Self {
        Self { low, high }
    }

    pub fn low(&self) -> f64 {
        self.low
    }
    pub fn high(&self) -> f64 {
        self.high
    }

    #[inline]
    pub fn apply<T: Scalar>(&self, hu: f32) -> T {
        let v = f64::from(hu).clamp(self.low, self.high);
        T::of((v - self.low) / (self.high - self.low))
    }

    /// Maps a normalized value back to HU.
    pub fn invert(&self, v: f64) -> f64 {
        self.low + v * (self.high - self.low)
    }
}

/// Window used for the liver model input and for overlays.
pub const LIVER_WINDOW: HuWindow = HuWindow::fixed(-100.0, 300.0);

/// Channel windows of the tumor model, in channel order.
pub const TUMOR_WINDOWS: [HuWindow; 3] = [
    HuWindow::fixed(0.0, 100.0),
    HuWindow::fixed(-100.0, 200.0),
    HuWindow::fixed(-100.0, 400.0),
];

/// Slices added above and below the liver extent in liver plans.
pub const LIVER_SLICE_MARGIN: usize = 10;
/// Slices added above and below the lesion extent in tumor plans.
pub const TUMOR_SLICE_MARGIN: usize = 5;

/// Which model a slice plan or training run serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Liver,
    Tumor,
}

impl Target {
    /// Whether a ground-truth label counts as foreground for this target.
    #[inline]
    pub fn is_foreground(self, label: u8) -> bool {
        match self {
            Target::Liver => label >= LIVER,
            Target::Tumor => label == TUMOR,
        }
    }

    pub fn default_margin(self) -> usize {
        match self {
            Target::Liver => LIVER_SLICE_MARGIN,
            Target::Tumor => TUMOR_SLICE_MARGIN,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Target::Liver => "liver",
            Target::Tumor => "tumor",
        })
    }
}

impl FromStr for Target {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "liver" => Ok(Target::Liver),
            "tumor" => Ok(Target::Tumor),
            other => Err(format!(
                "unknown target '{other}' (expected liver or tumor)"
            )),
        }
    }
}

/// Windows and normalizes a whole volume by the window bounds.
pub fn window_and_normalize<T: Scalar>(vol: &CtVolume, w: HuWindow) -> Vec<T> {
    vol.data().iter().map(|&v| w.apply(v)).collect()
}

pub fn window_slice<T: Scalar>(slice: &[f32], w: HuWindow) -> Vec<T> {
    slice.iter().map(|&v| w.apply(v)).collect()
}

/// Bilinear resampling with pixel-center alignment (edges clamped).
pub fn resize_bilinear<T: Scalar>(
    img: &[T],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    assert_eq!(img.len(), h * w, "image size does not match {h}x{w}");
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let a = img[y0 * w + x0].as_f64();
            let b = img[y0 * w + x1].as_f64();
            let c = img[y1 * w + x0].as_f64();
            let d = img[y1 * w + x1].as_f64();
            let top = a + (b - a) * fx;
            let bot = c + (d - c) * fx;
            out.push(T::of(top + (bot - top) * fy));
        }
    }
    out
}

/// Halves both image dimensions. With pixel-center alignment this equals
/// the mean of each 2x2 block.
pub fn downsample_slice<T: Scalar>(img: &[T], h: usize, w: usize) -> Result<Vec<T>> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
        return Err(Error::OddDimension {
            height: h,
            width: w,
        });
    }
    Ok(resize_bilinear(img, h, w, h / 2, w / 2))
}

/// Liver model input for axial slice `z`: liver window, then 2x downsampling.
pub fn liver_input<T: Scalar>(vol: &CtVolume, z: usize) -> Result<Vec<T>> {
    let [_, h, w] = vol.dims();
    let win = window_slice(vol.slice(z)?, LIVER_WINDOW);
    downsample_slice(&win, h, w)
}

/// Three-window stack of one axial slice, laid out channel-major.
pub fn stack_tumor_channels<T: Scalar>(vol: &CtVolume, slice_index: usize) -> Result<Vec<T>> {
    let slice = vol.slice(slice_index)?;
    let mut out = Vec::with_capacity(3 * slice.len());
    for w in TUMOR_WINDOWS {
        out.extend(slice.iter().map(|&v| w.apply::<T>(v)));
    }
    Ok(out)
}

/// Axial slices of one case eligible for training a given model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlicePlan {
    pub case_id: String,
    pub indices: Vec<usize>,
    pub target: Target,
}

impl SlicePlan {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn plan_slices(labels: &LabelVolume, target: Target) -> Result<SlicePlan> {
    plan_slices_with_margin(labels, target, target.default_margin())
}

/// Contiguous z-range from the first to the last slice containing the
/// target class, widened by `margin` on both sides and clipped.
pub fn plan_slices_with_margin(
    labels: &LabelVolume,
    target: Target,
    margin: usize,
) -> Result<SlicePlan> {
    let nz = labels.dims()[0];
    let mut lo = None;
    let mut hi = 0;
    for z in 0..nz {
        if labels.slice(z)?.iter().any(|&v| target.is_foreground(v)) {
            lo.get_or_insert(z);
            hi = z;
        }
    }
    let lo = lo.ok_or_else(|| Error::EmptyTarget {
        case: labels.id().to_string(),
    })?;
    let start = lo.saturating_sub(margin);
    let end = (hi + margin).min(nz - 1);
    Ok(SlicePlan {
        case_id: labels.id().to_string(),
        indices: (start..=end).collect(),
        target,
    })
}

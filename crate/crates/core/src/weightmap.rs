//! Per-pixel loss weights derived from ground-truth label slices.

use crate::scalar::Scalar;

/// Strictly positive per-pixel weights aligned with a label slice.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> WeightMap<T> {
    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![T::one(); height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }
}

/// Defaults for the two-level boundary scheme.
pub const DEFAULT_EDGE_BAND: usize = 3;
pub const DEFAULT_EDGE_WEIGHT: f64 = 5.0;
pub const DEFAULT_TUMOR_WEIGHT: f64 = 10.0;

/// Mask pixels with a 4-neighbour outside the mask; the image border counts
/// as outside.
pub fn boundary(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    assert_eq!(mask.len(), height * width);
    let at = |y: isize, x: isize| -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < height
            && (x as usize) < width
            && mask[y as usize * width + x as usize]
    };
    let mut out = vec![false; mask.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            if at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)) {
                out[y as usize * width + x as usize] = true;
            }
        }
    }
    out
}

/// Grows a mask by `radius` under the Chebyshev metric (separable box max).
fn chebyshev_dilate(mask: &[bool], height: usize, width: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let mut rows = vec![false; mask.len()];
    for y in 0..height {
        let row = &mask[y * width..(y + 1) * width];
        for x in 0..width {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(width - 1);
            rows[y * width + x] = row[lo..=hi].iter().any(|&b| b);
        }
    }
    let mut out = vec![false; mask.len()];
    for x in 0..width {
        for y in 0..height {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(height - 1);
            out[y * width + x] = (lo..=hi).any(|yy| rows[yy * width + x]);
        }
    }
    out
}

/// Weight `w_edge` on pixels within `band` (Chebyshev) of the liver
/// boundary, 1 elsewhere.
pub fn liver_boundary_weights<T: Scalar>(
    label_slice: &[bool],
    height: usize,
    width: usize,
    band: usize,
    w_edge: f64,
) -> WeightMap<T> {
    let edge = chebyshev_dilate(&boundary(label_slice, height, width), height, width, band);
    let hi = T::of(w_edge);
    WeightMap {
        height,
        width,
        data: edge
            .into_iter()
            .map(|e| if e { hi } else { T::one() })
            .collect(),
    }
}

/// Weight `w_tumor` on lesion pixels, 1 on everything else.
pub fn tumor_class_weights<T: Scalar>(
    label_slice: &[bool],
    height: usize,
    width: usize,
    w_tumor: f64,
) -> WeightMap<T> {
    assert_eq!(label_slice.len(), height * width);
    let hi = T::of(w_tumor);
    WeightMap {
        height,
        width,
        data: label_slice
            .iter()
            .map(|&t| if t { hi } else { T::one() })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute force: distance from every pixel to every boundary pixel.
    fn oracle(mask: &[bool], h: usize, w: usize, band: usize, w_edge: f64) -> Vec<f64> {
        let inside = |y: i64, x: i64| {
            y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && mask[(y as usize) * w + x as usize]
        };
        let mut edges = Vec::new();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if inside(y, x)
                    && [(0, 1), (0, -1), (1, 0), (-1, 0)]
                        .iter()
                        .any(|(dy, dx)| !inside(y + dy, x + dx))
                {
                    edges.push((y, x));
                }
            }
        }
        let mut out = vec![1.0; h * w];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if edges
                    .iter()
                    .any(|&(ey, ex)| (ey - y).abs().max((ex - x).abs()) <= band as i64)
                {
                    out[y as usize * w + x as usize] = w_edge;
                }
            }
        }
        out
    }

    #[test]
    fn empty_mask_is_all_ones() {
        let m: WeightMap<f64> = liver_boundary_weights(&[false; 64], 8, 8, 3, 5.0);
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_with_band_one() {
        let mut mask = vec![false; 64];
        for y in 2..6 {
            for x in 2..6 {
                mask[y * 8 + x] = true;
            }
        }
        assert_eq!(boundary(&mask, 8, 8).iter().filter(|&&b| b).count(), 12);
        let m: WeightMap<f64> = liver_boundary_weights(&mask, 8, 8, 1, 5.0);
        // perimeter plus its 1-neighbourhood is the 6x6 square around it
        assert_eq!(m.data().iter().filter(|&&v| v == 5.0).count(), 36);
        assert_eq!(m.data(), oracle(&mask, 8, 8, 1, 5.0).as_slice());
    }

    #[test]
    fn full_mask_weights_the_image_border() {
        let mask = vec![true; 100];
        let m: WeightMap<f64> = liver_boundary_weights(&mask, 10, 10, 3, 5.0);
        assert_eq!(m.data()[0], 5.0);
        assert_eq!(m.data()[3 * 10 + 3], 5.0);
        assert_eq!(m.data()[4 * 10 + 4], 1.0);
        assert_eq!(m.data()[5 * 10 + 5], 1.0);
    }

    #[test]
    fn tumor_weights_counting_identity() {
        let mut mask = vec![false; 100];
        for i in (0..100).step_by(6).take(17) {
            mask[i] = true;
        }
        let m: WeightMap<f64> = tumor_class_weights(&mask, 10, 10, 10.0);
        let s: f64 = m.data().iter().sum();
        assert_eq!(s, 17.0 * 10.0 + 83.0);
        let all: WeightMap<f64> = tumor_class_weights(&[true; 4], 2, 2, 10.0);
        assert!(all.data().iter().all(|&v| v == 10.0));
    }

    proptest! {
        #[test]
        fn boundary_weights_match_brute_force(bits in proptest::collection::vec(any::<bool>(), 12 * 9), band in 0usize..4) {
            let m: WeightMap<f64> = liver_boundary_weights(&bits, 12, 9, band, 5.0);
            let want = oracle(&bits, 12, 9, band, 5.0);
            prop_assert_eq!(m.data(), want.as_slice());
        }

        #[test]
        fn weights_translate_with_content(dy in 0usize..4, dx in 0usize..4) {
            // a blob away from the border, shifted inside a larger canvas
            let (h, w) = (20, 20);
            let mut a = vec![false; h * w];
            let mut b = vec![false; h * w];
            for y in 6..10 { for x in 5..11 { a[y * w + x] = true; b[(y + dy) * w + x + dx] = true; } }
            let ma: WeightMap<f64> = liver_boundary_weights(&a, h, w, 2, 5.0);
            let mb: WeightMap<f64> = liver_boundary_weights(&b, h, w, 2, 5.0);
            for y in 0..h - 4 { for x in 0..w - 4 {
                prop_assert_eq!(ma.data()[y * w + x], mb.data()[(y + dy) * w + x + dx]);
            }}
        }
    }
}

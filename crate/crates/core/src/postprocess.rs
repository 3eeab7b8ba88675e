//! 3D binary morphology and connected components for cleaning liver
//! predictions and gating lesion predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{voxel_index, Dims, LabelVolume, Spacing};

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask3D {
    dims: Dims,
    spacing: Spacing,
    data: Vec<bool>,
}

impl BinaryMask3D {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<bool>) -> Result<Self> {
        let want: usize = dims.iter().product();
        if want != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask dims {dims:?} need {want} voxels, got {}",
                data.len()
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Self {
        Self {
            dims,
            spacing,
            data: vec![false; dims.iter().product()],
        }
    }

    /// Voxels of `labels` for which `keep` holds.
    pub fn from_labels(labels: &LabelVolume, keep: impl Fn(u8) -> bool) -> Self {
        Self {
            dims: labels.dims(),
            spacing: labels.spacing(),
            data: labels.data().iter().map(|&v| keep(v)).collect(),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn spacing(&self) -> Spacing {
        self.spacing
    }
    pub fn data(&self) -> &[bool] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[voxel_index(self.dims, z, y, x)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch(format!(
                "mask dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            dims: self.dims,
            spacing: self.spacing,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }

    pub fn complement(&self) -> Self {
        Self {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&b| !b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.dims == other.dims && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Inclusive z-range of set voxels, if any.
    pub fn z_extent(&self) -> Option<(usize, usize)> {
        let plane = self.dims[1] * self.dims[2];
        let mut zs =
            (0..self.dims[0]).filter(|&z| self.data[z * plane..(z + 1) * plane].iter().any(|&b| b));
        let lo = zs.next()?;
        Some((lo, zs.next_back().unwrap_or(lo)))
    }
}

/// Offsets of a 3D structuring element, origin included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuringElement {
    offsets: Vec<[isize; 3]>,
}

impl StructuringElement {
    pub fn new(offsets: Vec<[isize; 3]>) -> Self {
        Self { offsets }
    }

    /// Origin plus its six face neighbours.
    pub fn cross6() -> Self {
        let mut offsets = vec![[0, 0, 0]];
        for a in 0..3 {
            for s in [-1, 1] {
                let mut o = [0; 3];
                o[a] = s;
                offsets.push(o);
            }
        }
        Self { offsets }
    }

    /// Full 3x3x3 cube.
    pub fn cube26() -> Self {
        let mut offsets = Vec::with_capacity(27);
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    offsets.push([dz, dy, dx]);
                }
            }
        }
        Self { offsets }
    }

    pub fn offsets(&self) -> &[[isize; 3]] {
        &self.offsets
    }

    pub fn is_symmetric(&self) -> bool {
        self.offsets
            .iter()
            .all(|o| self.offsets.contains(&[-o[0], -o[1], -o[2]]))
    }
}

fn shifted(dims: Dims, z: usize, y: usize, x: usize, o: [isize; 3]) -> Option<usize> {
    let (zz, yy, xx) = (z as isize + o[0], y as isize + o[1], x as isize + o[2]);
    if zz < 0
        || yy < 0
        || xx < 0
        || zz >= dims[0] as isize
        || yy >= dims[1] as isize
        || xx >= dims[2] as isize
    {
        return None;
    }
    Some(voxel_index(dims, zz as usize, yy as usize, xx as usize))
}

fn morph_once(mask: &BinaryMask3D, element: &StructuringElement, erode: bool) -> BinaryMask3D {
    let d = mask.dims;
    let mut out = vec![false; mask.data.len()];
    for z in 0..d[0] {
        for y in 0..d[1] {
            for x in 0..d[2] {
                // voxels outside the volume count as background
                let hit = |o: &[isize; 3]| shifted(d, z, y, x, *o).is_some_and(|i| mask.data[i]);
                out[voxel_index(d, z, y, x)] = if erode {
                    element.offsets.iter().all(hit)
                } else {
                    // reflected element
                    element.offsets.iter().any(|o| hit(&[-o[0], -o[1], -o[2]]))
                };
            }
        }
    }
    BinaryMask3D {
        dims: d,
        spacing: mask.spacing,
        data: out,
    }
}

/// A voxel survives if every element offset lands on a set voxel.
pub fn binary_erode(
    mask: &BinaryMask3D,
    element: &StructuringElement,
    iterations: usize,
) -> BinaryMask3D {
    (0..iterations).fold(mask.clone(), |m, _| morph_once(&m, element, true))
}

pub fn binary_dilate(
    mask: &BinaryMask3D,
    element: &StructuringElement,
    iterations: usize,
) -> BinaryMask3D {
    (0..iterations).fold(mask.clone(), |m, _| morph_once(&m, element, false))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl Connectivity {
    /// Neighbour offsets that precede a voxel in raster order.
    fn backward_offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let nonzero = (dz != 0) as u8 + (dy != 0) as u8 + (dx != 0) as u8;
                    let allowed = match self {
                        Connectivity::Six => nonzero == 1,
                        Connectivity::TwentySix => nonzero >= 1,
                    };
                    if allowed && (dz, dy, dx) < (0, 0, 0) {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

/// Component labelling of a mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Components {
    /// Per voxel: 0 for background, otherwise the 1-based component id.
    /// Ids are ordered by each component's first voxel in raster order.
    pub labels: Vec<u32>,
    /// Voxel count of component `id` at index `id - 1`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }
}

fn find(parent: &mut [u32], mut a: u32) -> u32 {
    while parent[a as usize] != a {
        parent[a as usize] = parent[parent[a as usize] as usize];
        a = parent[a as usize];
    }
    a
}

/// Two-pass union-find labelling.
pub fn label_components(mask: &BinaryMask3D, connectivity: Connectivity) -> Components {
    let d = mask.dims;
    let offsets = connectivity.backward_offsets();
    let mut provisional = vec![0u32; mask.data.len()];
    let mut parent: Vec<u32> = vec![0];
    for z in 0..d[0] {
        for y in 0..d[1] {
            for x in 0..d[2] {
                let i = voxel_index(d, z, y, x);
                if !mask.data[i] {
                    continue;
                }
                let mut current = 0u32;
                for &o in &offsets {
                    let Some(j) = shifted(d, z, y, x, o) else {
                        continue;
                    };
                    let l = provisional[j];
                    if l == 0 {
                        continue;
                    }
                    if current == 0 {
                        current = find(&mut parent, l);
                    } else {
                        let (a, b) = (find(&mut parent, current), find(&mut parent, l));
                        if a != b {
                            // keep the older root so roots stay first-seen
                            let (lo, hi) = (a.min(b), a.max(b));
                            parent[hi as usize] = lo;
                            current = lo;
                        }
                    }
                }
                if current == 0 {
                    current = parent.len() as u32;
                    parent.push(current);
                }
                provisional[i] = current;
            }
        }
    }
    let mut remap = vec![0u32; parent.len()];
    let mut sizes = Vec::new();
    let mut labels = provisional;
    for l in labels.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = find(&mut parent, *l) as usize;
        if remap[root] == 0 {
            sizes.push(0);
            remap[root] = sizes.len() as u32;
        }
        *l = remap[root];
        sizes[*l as usize - 1] += 1;
    }
    Components { labels, sizes }
}

/// Keeps the component with the most voxels; ties go to the component
/// holding the smallest `(z, y, x)` voxel.
pub fn largest_connected_component(
    mask: &BinaryMask3D,
    connectivity: Connectivity,
) -> BinaryMask3D {
    let comps = label_components(mask, connectivity);
    let Some(best) = comps
        .sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i as u32 + 1)
    else {
        return BinaryMask3D::zeros(mask.dims, mask.spacing);
    };
    BinaryMask3D {
        dims: mask.dims,
        spacing: mask.spacing,
        data: comps.labels.iter().map(|&l| l == best).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub element: StructuringElement,
    pub erode_iterations: usize,
    pub dilate_iterations: usize,
    pub connectivity: Connectivity,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            element: StructuringElement::cross6(),
            erode_iterations: 1,
            dilate_iterations: 1,
            connectivity: Connectivity::TwentySix,
        }
    }
}

/// Erosion, then the largest component, then dilation.
pub fn liver_postprocess(pred: &BinaryMask3D) -> BinaryMask3D {
    liver_postprocess_with(pred, &PostprocessConfig::default())
}

pub fn liver_postprocess_with(pred: &BinaryMask3D, cfg: &PostprocessConfig) -> BinaryMask3D {
    let eroded = binary_erode(pred, &cfg.element, cfg.erode_iterations);
    let kept = largest_connected_component(&eroded, cfg.connectivity);
    binary_dilate(&kept, &cfg.element, cfg.dilate_iterations)
}

/// Lesion voxels that also lie inside the liver mask.
pub fn mask_tumor_by_liver(tumor: &BinaryMask3D, liver: &BinaryMask3D) -> Result<BinaryMask3D> {
    tumor.and(liver)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with(dims: Dims, set: impl Fn(usize, usize, usize) -> bool) -> BinaryMask3D {
        let mut m = BinaryMask3D::zeros(dims, [1.0; 3]);
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    m.data[voxel_index(dims, z, y, x)] = set(z, y, x);
                }
            }
        }
        m
    }

    fn cube(dims: Dims, lo: usize, hi: usize) -> BinaryMask3D {
        let r = lo..hi;
        mask_with(dims, |z, y, x| {
            r.contains(&z) && r.contains(&y) && r.contains(&x)
        })
    }

    #[test]
    fn erode_cube_by_cross() {
        let m = cube([7, 7, 7], 1, 6);
        let e = binary_erode(&m, &StructuringElement::cross6(), 1);
        assert_eq!(e, cube([7, 7, 7], 2, 5));
        let single = mask_with([3, 3, 3], |z, y, x| (z, y, x) == (1, 1, 1));
        assert!(binary_erode(&single, &StructuringElement::cross6(), 1).is_empty());
    }

    #[test]
    fn dilate_voxel_to_plus() {
        let single = mask_with([5, 5, 5], |z, y, x| (z, y, x) == (2, 2, 2));
        let d = binary_dilate(&single, &StructuringElement::cross6(), 1);
        assert_eq!(d.count(), 7);
        assert!(d.get(1, 2, 2) && d.get(2, 2, 3) && !d.get(1, 1, 2));
        let empty = BinaryMask3D::zeros([4, 4, 4], [1.0; 3]);
        assert!(binary_dilate(&empty, &StructuringElement::cross6(), 2).is_empty());
    }

    #[test]
    fn opening_is_anti_extensive() {
        let m = cube([8, 8, 8], 1, 7);
        let el = StructuringElement::cross6();
        assert!(binary_dilate(&binary_erode(&m, &el, 1), &el, 1).is_subset_of(&m));
    }

    #[test]
    fn lcc_keeps_biggest_and_breaks_ties_lexicographically() {
        let dims = [12, 12, 12];
        let m = mask_with(dims, |z, y, x| {
            let big = (1..6).contains(&z) && (1..6).contains(&y) && (1..5).contains(&x);
            let small = z == 9 && y == 9 && (2..9).contains(&x);
            big || small
        });
        let l = largest_connected_component(&m, Connectivity::TwentySix);
        assert_eq!(l.count(), 100);
        assert!(!l.get(9, 9, 2));

        let twins = mask_with(dims, |z, y, x| {
            (z, y) == (3, 3) && x < 3 || (z, y) == (8, 1) && x > 8
        });
        let t = largest_connected_component(&twins, Connectivity::Six);
        assert!(t.get(3, 3, 0) && !t.get(8, 1, 9));
        assert!(largest_connected_component(
            &BinaryMask3D::zeros(dims, [1.0; 3]),
            Connectivity::Six
        )
        .is_empty());
    }

    #[test]
    fn diagonal_voxels_connect_only_under_26() {
        let m = mask_with([3, 3, 3], |z, y, x| {
            (z, y, x) == (0, 0, 0) || (z, y, x) == (1, 1, 1)
        });
        assert_eq!(label_components(&m, Connectivity::Six).len(), 2);
        assert_eq!(label_components(&m, Connectivity::TwentySix).len(), 1);
    }

    #[test]
    fn postprocess_drops_detached_blob() {
        let dims = [16, 20, 20];
        let m = mask_with(dims, |z, y, x| {
            let liver = (2..12).contains(&z) && (2..12).contains(&y) && (2..12).contains(&x);
            let spleen = (4..7).contains(&z) && (15..18).contains(&y) && (15..18).contains(&x);
            liver || spleen
        });
        let p = liver_postprocess(&m);
        assert!(!p.get(5, 16, 16));
        assert!(p.get(6, 6, 6));
        assert_eq!(label_components(&p, Connectivity::TwentySix).len(), 1);
        assert!(liver_postprocess(&BinaryMask3D::zeros(dims, [1.0; 3])).is_empty());
    }

    #[test]
    fn tumor_mask_is_gated() {
        let liver = mask_with([4, 4, 4], |_, _, x| x < 2);
        let tumor = mask_with([4, 4, 4], |z, _, _| z == 1);
        let g = mask_tumor_by_liver(&tumor, &liver).unwrap();
        assert_eq!(g.count(), 8);
        assert!(g.is_subset_of(&liver));
        let other = BinaryMask3D::zeros([4, 4, 5], [1.0; 3]);
        assert!(matches!(
            mask_tumor_by_liver(&other, &liver),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn z_extent_bounds() {
        let m = mask_with([10, 2, 2], |z, _, _| (3..=6).contains(&z));
        assert_eq!(m.z_extent(), Some((3, 6)));
        assert_eq!(BinaryMask3D::zeros([2, 2, 2], [1.0; 3]).z_extent(), None);
    }
}

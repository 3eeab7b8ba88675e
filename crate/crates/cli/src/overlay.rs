use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use liverseg::preprocess::LIVER_WINDOW;
use liverseg::volumes::{CtVolume, LabelVolume, LIVER, TUMOR};
use liverseg::{Error, Result};

const ALPHA: f64 = 0.45;

fn blend(gray: u8, tint: [u8; 3]) -> Rgb<u8> {
    let mix = |c: u8| (gray as f64 * (1.0 - ALPHA) + c as f64 * ALPHA).round() as u8;
    Rgb([mix(tint[0]), mix(tint[1]), mix(tint[2])])
}

/// Axial slice `z` shown in the liver window, liver tinted red and lesions
/// green.
pub fn render_slice(ct: &CtVolume, labels: &LabelVolume, z: usize) -> Result<RgbImage> {
    let [_, h, w] = ct.dims();
    let (hu, lab) = (ct.slice(z)?, labels.slice(z)?);
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, (&v, &l)) in hu.iter().zip(lab).enumerate() {
        let gray = (LIVER_WINDOW.apply::<f64>(v) * 255.0).round() as u8;
        let px = match l {
            TUMOR => blend(gray, [0, 255, 0]),
            LIVER => blend(gray, [255, 0, 0]),
            _ => Rgb([gray; 3]),
        };
        img.put_pixel((i % w) as u32, (i / w) as u32, px);
    }
    Ok(img)
}

/// One PNG per slice in `dir`; returns the written paths in slice order.
pub fn write_overlays(ct: &CtVolume, labels: &LabelVolume, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    (0..ct.dims()[0])
        .map(|z| {
            let path = dir.join(format!("slice-{z:04}.png"));
            render_slice(ct, labels, z)?
                .save(&path)
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colours_follow_labels() {
        let ct = CtVolume::new("c", [1, 1, 3], [1.0; 3], vec![-1000.0, 100.0, 300.0]).unwrap();
        let lab = LabelVolume::new("c", [1, 1, 3], [1.0; 3], vec![0, 1, 2]).unwrap();
        let img = render_slice(&ct, &lab, 0).unwrap();
        assert_eq!(img.get_pixel(0, 0), &Rgb([0, 0, 0]));
        let liver = img.get_pixel(1, 0);
        assert!(liver[0] > liver[1] && liver[1] == liver[2]);
        let tumor = img.get_pixel(2, 0);
        assert!(tumor[1] > tumor[0] && tumor[0] == tumor[2]);
    }
}

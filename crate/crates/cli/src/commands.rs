use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use liverseg::cascade::predict_case;
use liverseg::metrics::evaluate_cases;
use liverseg::network::load_checkpoint;
use liverseg::preprocess::Target;
use liverseg::training::{labels_path, train_model, Dataset, TrainConfig, SPLIT_FILE};
use liverseg::volumes::{load_labels, load_volume, save_labels, Dims};
use liverseg::{Error, Real, Result};

use crate::manifest::{now, RunManifest, MANIFEST_FILE};
use crate::overlay::write_overlays;

pub fn phantom(out: &Path, count: usize, seed: u64, shape: Dims, tumors: usize) -> Result<()> {
    let started = now();
    let dataset = Dataset::phantoms(count, seed, shape, tumors)?;
    dataset.save_dir(out)?;
    let mut m = RunManifest::new("phantom", started);
    m.seed = Some(seed);
    m.config = serde_json::json!({ "count": count, "shape": shape, "tumors": tumors });
    m.outputs = dataset
        .cases
        .keys()
        .flat_map(|id| {
            [
                liverseg::training::volume_path(out, id),
                labels_path(out, id),
            ]
        })
        .chain([out.join(SPLIT_FILE)])
        .collect();
    m.finish(&out.join(MANIFEST_FILE))
}

pub fn train(
    config: Option<&Path>,
    target: Target,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let started = now();
    let cfg = match config {
        Some(path) => {
            if !path.exists() {
                return Err(Error::FileNotFound(path.to_path_buf()));
            }
            TrainConfig::parse(&fs::read_to_string(path)?, Some(target))?
        }
        None => TrainConfig::new(target),
    };
    let dataset = Dataset::load_dir(data)?;
    fs::create_dir_all(out)?;
    let snapshot = out.join("config.txt");
    fs::write(&snapshot, cfg.to_text())?;
    let outcome = train_model::<Real>(&cfg, &dataset, out, resume)?;
    for r in &outcome.history {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        eprintln!(
            "epoch {:>3}  train loss {:.4}  val loss {}  val dice {}  {:.1}s",
            r.epoch,
            r.train_loss,
            fmt(r.val_loss),
            fmt(r.val_dice),
            r.seconds
        );
    }
    let mut m = RunManifest::new("train", started);
    m.config_path = config.map(Path::to_path_buf);
    m.config = serde_json::to_value(&cfg)?;
    m.seed = Some(cfg.seed);
    m.inputs = [data.to_path_buf()]
        .into_iter()
        .chain(resume.map(Path::to_path_buf))
        .collect();
    m.outputs = vec![
        outcome.best_checkpoint,
        outcome.final_checkpoint,
        outcome.epochs_csv,
        snapshot,
    ];
    m.finish(&out.join(MANIFEST_FILE))
}

/// Case id of a volume or label file: the file name without its NIfTI
/// extension and without a `volume-` or `segmentation-` prefix.
pub fn case_id(path: &Path) -> String {
    let name = path
        .file_name()
        .map_or(String::new(), |n| n.to_string_lossy().into_owned());
    let stem = name
        .strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(&name);
    stem.strip_prefix("volume-")
        .or_else(|| stem.strip_prefix("segmentation-"))
        .unwrap_or(stem)
        .to_string()
}

pub fn predict(
    liver_ckpt: &Path,
    tumor_ckpt: &Path,
    inputs: &[PathBuf],
    out: &Path,
    overlay: bool,
) -> Result<()> {
    let started = now();
    let liver = load_checkpoint::<Real>(liver_ckpt)?.model;
    let tumor = load_checkpoint::<Real>(tumor_ckpt)?.model;
    fs::create_dir_all(out)?;
    let mut m = RunManifest::new("predict", started);
    m.inputs = [liver_ckpt, tumor_ckpt]
        .iter()
        .map(|p| p.to_path_buf())
        .chain(inputs.iter().cloned())
        .collect();
    for input in inputs {
        let id = case_id(input);
        let ct = load_volume(input)?.with_id(id.clone());
        let pred = predict_case(&ct, &liver, &tumor)?;
        let outside = pred
            .labels
            .data()
            .iter()
            .zip(pred.liver_mask_post.data())
            .filter(|&(&l, &inside)| l == 2 && !inside)
            .count();
        if outside != 0 {
            return Err(Error::ShapeMismatch(format!(
                "case {id}: {outside} lesion voxels outside the liver mask"
            )));
        }
        let labels_file = labels_path(out, &id);
        save_labels(&pred.labels, &labels_file)?;
        let sidecar = out.join(format!("segmentation-{id}.json"));
        fs::write(&sidecar, serde_json::to_vec_pretty(&pred.summary())?)?;
        let s = pred.summary();
        eprintln!(
            "{id}: liver {} voxels, lesion {} voxels, {:.2}s",
            s.liver_voxels_post, s.tumor_voxels_final, s.timings.total
        );
        m.outputs.push(labels_file);
        m.outputs.push(sidecar);
        if overlay {
            m.outputs.extend(write_overlays(
                &ct,
                &pred.labels,
                &out.join("overlays").join(&id),
            )?);
        }
    }
    m.finish(&out.join(MANIFEST_FILE))
}

/// Label files in `dir` keyed by case id.
fn label_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::FileNotFound(dir.to_path_buf()));
    }
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path
            .file_name()
            .map_or(String::new(), |n| n.to_string_lossy().into_owned());
        if name.starts_with("segmentation-")
            && (name.ends_with(".nii.gz") || name.ends_with(".nii"))
        {
            out.insert(case_id(&path), path);
        }
    }
    Ok(out)
}

pub fn evaluate(pred_dir: &Path, gt_dir: &Path, out: &Path) -> Result<()> {
    let started = now();
    let pred = label_files(pred_dir)?;
    let gt = label_files(gt_dir)?;
    let unmatched: Vec<String> = gt
        .keys()
        .filter(|id| !pred.contains_key(*id))
        .chain(pred.keys().filter(|id| !gt.contains_key(*id)))
        .cloned()
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::UnmatchedCases(unmatched));
    }
    if gt.is_empty() {
        return Err(Error::InvalidCount(0));
    }
    let cases = gt
        .iter()
        .map(|(id, g)| {
            Ok((
                load_labels(&pred[id])?.with_id(id.clone()),
                load_labels(g)?.with_id(id.clone()),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate_cases(&cases)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    report.save_csv(out)?;
    let mut m = RunManifest::new("evaluate", started);
    m.inputs = pred.values().chain(gt.values()).cloned().collect();
    m.outputs = vec![out.to_path_buf()];
    let mut manifest_path = out.as_os_str().to_owned();
    manifest_path.push(".manifest.json");
    m.finish(Path::new(&manifest_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_ids_from_file_names() {
        assert_eq!(case_id(Path::new("/d/volume-007.nii.gz")), "007");
        assert_eq!(case_id(Path::new("segmentation-12.nii")), "12");
        assert_eq!(case_id(Path::new("scan.nii.gz")), "scan");
    }
}

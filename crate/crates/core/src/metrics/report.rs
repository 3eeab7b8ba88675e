use std::fmt;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::BinaryMask3D;
use crate::volumes::{LabelVolume, TUMOR};

use super::lesion::{lesion_counts, LesionCounts, DETECTION_THRESHOLD};
use super::surface::{surface_distances, SurfaceDistances};
use super::{burden, burden_errors, dice_binary, dice_scores, overlap_metrics, OverlapMetrics};

pub const CSV_COLUMNS: [&str; 17] = [
    "case",
    "organ",
    "voe",
    "dice global",
    "dice",
    "rmsd",
    "rvd",
    "assd",
    "jaccard",
    "dice_per_case",
    "msd",
    "recall",
    "precision_greater_zero",
    "precision",
    "recall_greater_zero",
    "rmse",
    "max",
];

/// Case column value of the aggregate rows.
pub const SUMMARY_CASE: &str = "summary";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Organ {
    Liver,
    Lesion,
}

impl Organ {
    fn mask(self, labels: &LabelVolume) -> BinaryMask3D {
        match self {
            Organ::Liver => BinaryMask3D::from_labels(labels, |v| v >= 1),
            Organ::Lesion => BinaryMask3D::from_labels(labels, |v| v == TUMOR),
        }
    }
}

impl fmt::Display for Organ {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Organ::Liver => "liver",
            Organ::Lesion => "lesion",
        })
    }
}

/// One CSV row; NaN marks values that are undefined for the row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub case: String,
    pub organ: Organ,
    pub voe: f64,
    pub dice_global: f64,
    pub dice: f64,
    pub rmsd: f64,
    pub rvd: f64,
    pub assd: f64,
    pub jaccard: f64,
    pub dice_per_case: f64,
    pub msd: f64,
    pub recall: f64,
    pub precision_greater_zero: f64,
    pub precision: f64,
    pub recall_greater_zero: f64,
    pub rmse: f64,
    pub max: f64,
}

impl MetricsRow {
    fn blank(case: &str, organ: Organ) -> Self {
        let n = f64::NAN;
        Self {
            case: case.to_string(),
            organ,
            voe: n,
            dice_global: n,
            dice: n,
            rmsd: n,
            rvd: n,
            assd: n,
            jaccard: n,
            dice_per_case: n,
            msd: n,
            recall: n,
            precision_greater_zero: n,
            precision: n,
            recall_greater_zero: n,
            rmse: n,
            max: n,
        }
    }

    /// Numeric columns in CSV order.
    pub fn values(&self) -> [f64; 15] {
        [
            self.voe,
            self.dice_global,
            self.dice,
            self.rmsd,
            self.rvd,
            self.assd,
            self.jaccard,
            self.dice_per_case,
            self.msd,
            self.recall,
            self.precision_greater_zero,
            self.precision,
            self.recall_greater_zero,
            self.rmse,
            self.max,
        ]
    }
}

/// Everything measured on one case for one organ.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseEvaluation {
    pub case: String,
    pub organ: Organ,
    pub pred_voxels: usize,
    pub gt_voxels: usize,
    pub dice: f64,
    pub overlap: OverlapMetrics,
    pub surface: Option<SurfaceDistances>,
    pub lesions: Option<LesionCounts>,
    /// Predicted minus true tumor burden; lesion rows with a non-empty
    /// true liver only.
    pub burden_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub cases: Vec<CaseEvaluation>,
    pub rows: Vec<MetricsRow>,
}

fn mean_finite(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v.filter(|x| x.is_finite()) {
        s += x;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn evaluate_one(pred: &LabelVolume, gt: &LabelVolume) -> Result<[CaseEvaluation; 2]> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch(format!(
            "case {}: prediction {:?} vs ground truth {:?}",
            gt.id(),
            pred.dims(),
            gt.dims()
        )));
    }
    let burden_error = burden(gt)
        .map(|_| burden_errors(&[(pred, gt)]).map(|e| e[0]))
        .transpose()?;
    let eval = |organ: Organ| -> Result<CaseEvaluation> {
        let (p, g) = (organ.mask(pred), organ.mask(gt));
        let surface = if p.is_empty() || g.is_empty() {
            None
        } else {
            Some(surface_distances(&p, &g)?)
        };
        Ok(CaseEvaluation {
            case: gt.id().to_string(),
            organ,
            pred_voxels: p.count(),
            gt_voxels: g.count(),
            dice: dice_binary(&p, &g)?,
            overlap: overlap_metrics(&p, &g)?,
            surface,
            lesions: match organ {
                Organ::Lesion => Some(lesion_counts(&p, &g, DETECTION_THRESHOLD)?),
                Organ::Liver => None,
            },
            burden_error: match organ {
                Organ::Lesion => burden_error,
                Organ::Liver => None,
            },
        })
    };
    Ok([eval(Organ::Liver)?, eval(Organ::Lesion)?])
}

/// Scores `(prediction, ground truth)` pairs. Rows come per case in input
/// order, liver before lesion, followed by one summary row per organ.
pub fn evaluate_cases(cases: &[(LabelVolume, LabelVolume)]) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::InvalidCount(0));
    }
    let per_case: Vec<[CaseEvaluation; 2]> = cases
        .par_iter()
        .map(|(p, g)| evaluate_one(p, g))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for e in per_case.iter().flatten() {
        let mut r = MetricsRow::blank(&e.case, e.organ);
        r.voe = e.overlap.voe;
        r.jaccard = e.overlap.jaccard;
        r.rvd = e.overlap.rvd;
        r.dice_global = e.dice;
        r.dice = e.dice;
        r.dice_per_case = e.dice;
        if let Some(s) = e.surface {
            (r.assd, r.msd, r.rmsd) = (s.assd, s.msd, s.rmsd);
        }
        if let Some(c) = e.lesions {
            let d = c.rates();
            r.recall = d.recall;
            r.precision = d.precision;
            r.recall_greater_zero = d.recall_greater_zero;
            r.precision_greater_zero = d.precision_greater_zero;
        }
        if let Some(b) = e.burden_error {
            r.rmse = b.abs();
            r.max = b.abs();
        }
        rows.push(r);
    }

    for (k, organ) in [Organ::Liver, Organ::Lesion].into_iter().enumerate() {
        let evals: Vec<&CaseEvaluation> = per_case.iter().map(|c| &c[k]).collect();
        let masks: Vec<(BinaryMask3D, BinaryMask3D)> = cases
            .iter()
            .map(|(p, g)| (organ.mask(p), organ.mask(g)))
            .collect();
        let pairs: Vec<(&BinaryMask3D, &BinaryMask3D)> =
            masks.iter().map(|(p, g)| (p, g)).collect();
        let (global, per_case_mean) = dice_scores(&pairs)?;
        let mut r = MetricsRow::blank(SUMMARY_CASE, organ);
        r.dice_global = global;
        r.dice_per_case = per_case_mean;
        r.dice = mean_finite(evals.iter().filter(|e| e.gt_voxels > 0).map(|e| e.dice));
        r.voe = mean_finite(evals.iter().map(|e| e.overlap.voe));
        r.jaccard = mean_finite(evals.iter().map(|e| e.overlap.jaccard));
        r.rvd = mean_finite(evals.iter().map(|e| e.overlap.rvd));
        r.assd = mean_finite(evals.iter().filter_map(|e| e.surface).map(|s| s.assd));
        r.msd = mean_finite(evals.iter().filter_map(|e| e.surface).map(|s| s.msd));
        r.rmsd = mean_finite(evals.iter().filter_map(|e| e.surface).map(|s| s.rmsd));
        if organ == Organ::Lesion {
            let pooled = evals
                .iter()
                .filter_map(|e| e.lesions)
                .fold(LesionCounts::default(), |a, b| a + b);
            let d = pooled.rates();
            r.recall = d.recall;
            r.precision = d.precision;
            r.recall_greater_zero = d.recall_greater_zero;
            r.precision_greater_zero = d.precision_greater_zero;
            let errs: Vec<f64> = evals.iter().filter_map(|e| e.burden_error).collect();
            if !errs.is_empty() {
                r.rmse = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
                r.max = errs.iter().fold(0.0f64, |m, e| m.max(e.abs()));
            }
        }
        rows.push(r);
    }
    Ok(MetricsReport {
        cases: per_case.into_iter().flatten().collect(),
        rows,
    })
}

fn format_value(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v}")
    }
}

impl MetricsReport {
    pub fn summary(&self, organ: Organ) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.case == SUMMARY_CASE && r.organ == organ)
    }

    pub fn row(&self, case: &str, organ: Organ) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.case == case && r.organ == organ)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_COLUMNS)?;
        for r in &self.rows {
            let mut rec = vec![r.case.clone(), r.organ.to_string()];
            rec.extend(r.values().iter().map(|&v| format_value(v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case(id: &str, v: Vec<u8>) -> LabelVolume {
        LabelVolume::new(id, [2, 4, 4], [1.0; 3], v).unwrap()
    }

    fn gt(id: &str) -> LabelVolume {
        let mut v = vec![0u8; 32];
        v[5..11].fill(1);
        v[21..27].fill(1);
        v[6] = 2;
        case(id, v)
    }

    #[test]
    fn perfect_prediction_rows() {
        let cases = vec![(gt("a"), gt("a")), (gt("b"), gt("b"))];
        let r = evaluate_cases(&cases).unwrap();
        assert_eq!(r.rows.len(), 6);
        for organ in [Organ::Liver, Organ::Lesion] {
            let s = r.summary(organ).unwrap();
            assert_eq!(
                (s.dice_global, s.dice_per_case, s.voe, s.assd),
                (1.0, 1.0, 0.0, 0.0)
            );
        }
        let l = r.summary(Organ::Lesion).unwrap();
        assert_eq!((l.recall, l.precision, l.rmse, l.max), (1.0, 1.0, 0.0, 0.0));
        assert!(r.summary(Organ::Liver).unwrap().rmse.is_nan());
    }

    #[test]
    fn csv_header_and_nan_sentinel() {
        let empty = case("z", vec![0; 32]);
        let r = evaluate_cases(&[(gt("a"), gt("a")), (empty.clone(), gt("b"))]).unwrap();
        let text = r.to_csv_string().unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
        let b_liver = r.row("b", Organ::Liver).unwrap();
        assert!(b_liver.assd.is_nan());
        assert_eq!(b_liver.dice, 0.0);
        assert!(text.contains(",nan,"));
        assert_eq!(text, r.to_csv_string().unwrap());
        let mismatched = LabelVolume::new("a", [1, 4, 4], [1.0; 3], vec![0; 16]).unwrap();
        assert!(matches!(
            evaluate_cases(&[(mismatched, gt("a"))]),
            Err(Error::ShapeMismatch(_))
        ));
    }
}

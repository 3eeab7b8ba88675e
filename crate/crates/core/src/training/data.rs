//! Datasets on disk, eligible-slice banks and batch sampling.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::preprocess::{
    liver_input, plan_slices_with_margin, stack_tumor_channels, SlicePlan, Target,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volumes::{
    generate_phantom, load_labels, load_volume, save_labels, save_volume, CtVolume, DatasetSplit,
    Dims, LabelVolume,
};
use crate::weightmap::{liver_boundary_weights, tumor_class_weights};

pub const SPLIT_FILE: &str = "split.json";

pub fn volume_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("volume-{id}.nii.gz"))
}

pub fn labels_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("segmentation-{id}.nii.gz"))
}

/// A CT volume with its reference labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub ct: CtVolume,
    pub labels: LabelVolume,
}

impl Case {
    pub fn new(ct: CtVolume, labels: LabelVolume) -> Result<Self> {
        labels.check_aligned(&ct)?;
        Ok(Self { ct, labels })
    }

    pub fn id(&self) -> &str {
        self.ct.id()
    }
}

/// Cases keyed by id together with their split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cases: BTreeMap<String, Case>,
    pub split: DatasetSplit,
}

impl Dataset {
    pub fn new(cases: Vec<Case>, split: DatasetSplit) -> Result<Self> {
        split.validate()?;
        let cases: BTreeMap<String, Case> =
            cases.into_iter().map(|c| (c.id().to_string(), c)).collect();
        let missing: Vec<String> = split
            .train
            .iter()
            .chain(&split.validation)
            .chain(&split.test)
            .filter(|id| !cases.contains_key(*id))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::UnmatchedCases(missing));
        }
        Ok(Self { cases, split })
    }

    pub fn case(&self, id: &str) -> Result<&Case> {
        self.cases
            .get(id)
            .ok_or_else(|| Error::UnmatchedCases(vec![id.to_string()]))
    }

    pub fn cases_of<'a>(&'a self, ids: &[String]) -> Result<Vec<&'a Case>> {
        ids.iter().map(|id| self.case(id)).collect()
    }

    /// Loads `split.json` and every referenced case from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let split_path = dir.join(SPLIT_FILE);
        if !split_path.exists() {
            return Err(Error::FileNotFound(split_path));
        }
        let split: DatasetSplit = serde_json::from_slice(&fs::read(&split_path)?)?;
        let mut cases = Vec::new();
        for id in split
            .train
            .iter()
            .chain(&split.validation)
            .chain(&split.test)
        {
            let ct = load_volume(volume_path(dir, id))?.with_id(id.clone());
            let labels = load_labels(labels_path(dir, id))?.with_id(id.clone());
            cases.push(Case::new(ct, labels)?);
        }
        Self::new(cases, split)
    }

    /// Writes every case and the split file into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (id, case) in &self.cases {
            save_volume(&case.ct, volume_path(dir, id))?;
            save_labels(&case.labels, labels_path(dir, id))?;
        }
        fs::write(
            dir.join(SPLIT_FILE),
            serde_json::to_vec_pretty(&self.split)?,
        )?;
        Ok(())
    }
}

impl Dataset {
    /// `count` phantom cases with ids `000`, `001`, ...; case `i` uses seed
    /// `seed + i`. The split follows [`DatasetSplit::scaled`].
    pub fn phantoms(count: usize, seed: u64, shape: Dims, n_tumors: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidCount(0));
        }
        let mut cases = Vec::with_capacity(count);
        for i in 0..count {
            let id = format!("{i:03}");
            let (ct, labels) = generate_phantom(seed.wrapping_add(i as u64), shape, n_tumors)?;
            cases.push(Case::new(ct.with_id(id.clone()), labels.with_id(id))?);
        }
        let ids: Vec<String> = cases.iter().map(|c| c.id().to_string()).collect();
        Self::new(cases, DatasetSplit::scaled(&ids))
    }
}

/// One minibatch: model input, per-pixel binary targets and loss weights at
/// the model's output resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub input: Tensor<T>,
    pub target: Vec<u8>,
    pub wmap: Vec<T>,
}

/// Weight-map parameters used when assembling samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightScheme {
    pub edge_band: usize,
    pub edge_weight: f64,
    pub tumor_weight: f64,
}

/// Every eligible `(case, slice)` pair of a set of cases, with a counter of
/// samples handed out.
#[derive(Debug)]
pub struct SliceBank<'a> {
    target: Target,
    cases: Vec<&'a Case>,
    pairs: Vec<(usize, usize)>,
    weights: WeightScheme,
    drawn: AtomicU64,
}

impl<'a> SliceBank<'a> {
    /// Plans slices for each case; cases without the target class contribute
    /// nothing.
    pub fn new(
        cases: Vec<&'a Case>,
        target: Target,
        margin: usize,
        weights: WeightScheme,
    ) -> Result<Self> {
        let mut plans = Vec::with_capacity(cases.len());
        for case in &cases {
            match plan_slices_with_margin(&case.labels, target, margin) {
                Ok(p) => plans.push(p),
                Err(Error::EmptyTarget { case }) => plans.push(SlicePlan {
                    case_id: case,
                    indices: vec![],
                    target,
                }),
                Err(e) => return Err(e),
            }
        }
        Self::from_plans(cases, &plans, weights)
    }

    pub fn from_plans(
        cases: Vec<&'a Case>,
        plans: &[SlicePlan],
        weights: WeightScheme,
    ) -> Result<Self> {
        if cases.len() != plans.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} cases but {} plans",
                cases.len(),
                plans.len()
            )));
        }
        let target = plans.first().map_or(Target::Liver, |p| p.target);
        let mut pairs = Vec::new();
        for (ci, (case, plan)) in cases.iter().zip(plans).enumerate() {
            if plan.case_id != case.id() || plan.target != target {
                return Err(Error::ShapeMismatch(format!(
                    "plan for {} ({}) does not match case {} ({target})",
                    plan.case_id,
                    plan.target,
                    case.id()
                )));
            }
            pairs.extend(plan.indices.iter().map(|&z| (ci, z)));
        }
        if pairs.is_empty() {
            return Err(Error::NoEligibleSlices);
        }
        Ok(Self {
            target,
            cases,
            pairs,
            weights,
            drawn: AtomicU64::new(0),
        })
    }

    pub fn target(&self) -> Target {
        self.target
    }

    pub fn eligible(&self) -> usize {
        self.pairs.len()
    }

    /// Total samples handed out by [`Self::draw`].
    pub fn samples_drawn(&self) -> u64 {
        self.drawn.load(Ordering::Relaxed)
    }

    /// Draws `batch_size` pairs uniformly with replacement, returned as
    /// `(case index, slice index)`.
    pub fn draw(&self, rng: &mut ChaCha8Rng, batch_size: usize) -> Vec<(usize, usize)> {
        self.drawn.fetch_add(batch_size as u64, Ordering::Relaxed);
        (0..batch_size)
            .map(|_| self.pairs[rng.random_range(0..self.pairs.len())])
            .collect()
    }

    pub fn case_id(&self, case: usize) -> &str {
        self.cases[case].id()
    }

    /// Builds the model input, target and weight map of one slice.
    pub fn assemble_one<T: Scalar>(
        &self,
        case: usize,
        z: usize,
    ) -> Result<(Vec<T>, Vec<u8>, Vec<T>)> {
        let c = self.cases[case];
        let [_, h, w] = c.ct.dims();
        let mask: Vec<bool> = c
            .labels
            .slice(z)?
            .iter()
            .map(|&v| self.target.is_foreground(v))
            .collect();
        let (input, wmap) = match self.target {
            Target::Liver => (
                liver_input(&c.ct, z)?,
                liver_boundary_weights::<T>(
                    &mask,
                    h,
                    w,
                    self.weights.edge_band,
                    self.weights.edge_weight,
                ),
            ),
            Target::Tumor => (
                stack_tumor_channels(&c.ct, z)?,
                tumor_class_weights::<T>(&mask, h, w, self.weights.tumor_weight),
            ),
        };
        Ok((
            input,
            mask.into_iter().map(u8::from).collect(),
            wmap.into_vec(),
        ))
    }

    pub fn assemble<T: Scalar>(&self, picks: &[(usize, usize)]) -> Result<Batch<T>> {
        let first = self.cases[picks[0].0].ct.dims();
        let (h, w) = (first[1], first[2]);
        let (in_ch, ih, iw) = match self.target {
            Target::Liver => (1, h / 2, w / 2),
            Target::Tumor => (3, h, w),
        };
        let mut input = Vec::with_capacity(picks.len() * in_ch * ih * iw);
        let mut target = Vec::with_capacity(picks.len() * h * w);
        let mut wmap = Vec::with_capacity(picks.len() * h * w);
        for &(case, z) in picks {
            let d = self.cases[case].ct.dims();
            if (d[1], d[2]) != (h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "batch mixes slice sizes {h}x{w} and {}x{}",
                    d[1], d[2]
                )));
            }
            let (x, t, m) = self.assemble_one::<T>(case, z)?;
            input.extend(x);
            target.extend(t);
            wmap.extend(m);
        }
        Ok(Batch {
            input: Tensor::from_vec([picks.len(), in_ch, ih, iw], input)?,
            target,
            wmap,
        })
    }

    pub fn sample_batch<T: Scalar>(
        &self,
        rng: &mut ChaCha8Rng,
        batch_size: usize,
    ) -> Result<Batch<T>> {
        let picks = self.draw(rng, batch_size);
        self.assemble(&picks)
    }
}

/// Random streams used by the training loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    TrainSampling = 1,
    Dropout = 2,
    ValSampling = 3,
}

/// Independent generator for one iteration of one stream, so that any
/// iteration can be replayed without running the ones before it.
pub fn step_rng(seed: u64, stream: Stream, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 56) ^ step);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::generate_phantom;

    fn scheme() -> WeightScheme {
        WeightScheme {
            edge_band: 3,
            edge_weight: 5.0,
            tumor_weight: 10.0,
        }
    }

    fn case(seed: u64) -> Case {
        let (ct, l) = generate_phantom(seed, [16, 32, 32], 1).unwrap();
        Case::new(ct, l).unwrap()
    }

    fn plan(c: &Case, indices: Vec<usize>) -> SlicePlan {
        SlicePlan {
            case_id: c.id().to_string(),
            indices,
            target: Target::Liver,
        }
    }

    #[test]
    fn fixed_seed_fixed_batches() {
        let c = case(1);
        let bank = SliceBank::new(vec![&c], Target::Liver, 10, scheme()).unwrap();
        let a: Batch<f32> = bank
            .sample_batch(&mut step_rng(4, Stream::TrainSampling, 0), 4)
            .unwrap();
        let b: Batch<f32> = bank
            .sample_batch(&mut step_rng(4, Stream::TrainSampling, 0), 4)
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.input.shape(), [4, 1, 16, 16]);
        assert_eq!(a.target.len(), 4 * 32 * 32);
        assert_eq!(bank.samples_drawn(), 8);
    }

    #[test]
    fn single_slice_repeats() {
        let c = case(2);
        let bank = SliceBank::from_plans(vec![&c], &[plan(&c, vec![7])], scheme()).unwrap();
        let mut rng = step_rng(0, Stream::TrainSampling, 0);
        for _ in 0..5 {
            assert!(bank.draw(&mut rng, 3).iter().all(|&p| p == (0, 7)));
        }
    }

    #[test]
    fn sampling_is_uniform_over_pairs() {
        let (a, b) = (case(3), case(4));
        let plans = [
            plan(&a, (0..10).collect()),
            plan(&b, (0..30).map(|z| z % 16).collect()),
        ];
        let bank = SliceBank::from_plans(vec![&a, &b], &plans, scheme()).unwrap();
        let mut rng = step_rng(9, Stream::TrainSampling, 0);
        let picks = bank.draw(&mut rng, 10_000);
        let from_b = picks.iter().filter(|p| p.0 == 1).count() as f64;
        let ratio = from_b / (10_000.0 - from_b);
        assert!((ratio - 3.0).abs() < 0.15, "ratio {ratio}");
    }

    #[test]
    fn empty_banks_rejected() {
        let (ct, l) = generate_phantom(5, [16, 32, 32], 0).unwrap();
        let c = Case::new(ct, l).unwrap();
        assert!(matches!(
            SliceBank::new(vec![&c], Target::Tumor, 5, scheme()),
            Err(Error::NoEligibleSlices)
        ));
    }

    #[test]
    fn tumor_batches_use_three_full_resolution_channels() {
        let c = case(6);
        let bank = SliceBank::new(vec![&c], Target::Tumor, 5, scheme()).unwrap();
        let b: Batch<f64> = bank
            .sample_batch(&mut step_rng(1, Stream::TrainSampling, 3), 2)
            .unwrap();
        assert_eq!(b.input.shape(), [2, 3, 32, 32]);
        for (&t, &w) in b.target.iter().zip(&b.wmap) {
            assert_eq!(w, if t == 1 { 10.0 } else { 1.0 });
        }
    }

    #[test]
    fn streams_are_independent() {
        let mut a = step_rng(1, Stream::TrainSampling, 5);
        let mut b = step_rng(1, Stream::Dropout, 5);
        let mut c = step_rng(1, Stream::TrainSampling, 6);
        let (x, y, z): (u64, u64, u64) = (a.random(), b.random(), c.random());
        assert!(x != y && x != z);
    }
}

//! Self-describing checkpoint archive.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then little-endian tensor payloads in header order (parameters
//! and running statistics, then optimizer moments if present).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::ParamKind;
use super::model::DenseFcn;
use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"LSEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Adam state stored alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// First and second moments, one entry per trainable parameter in visit
    /// order.
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    dtype: String,
    spec: NetworkSpec,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    progress: serde_json::Value,
}

/// Everything restored from a checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: DenseFcn<T>,
    pub optimizer: Option<OptimizerState<T>>,
    pub progress: serde_json::Value,
}

pub fn encode_checkpoint<T: Scalar>(
    model: &DenseFcn<T>,
    optimizer: Option<&OptimizerState<T>>,
    progress: &serde_json::Value,
) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut trainable = Vec::new();
    model.visit_params_ref(&mut |p| {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            kind: p.kind,
            shape: p.shape.clone(),
        });
        p.value.iter().for_each(|&v| v.write_le(&mut payload));
        if p.kind.is_trainable() {
            trainable.push(p.value.len());
        }
    });
    if let Some(opt) = optimizer {
        let lens_ok = |moments: &[Vec<T>]| {
            moments.len() == trainable.len()
                && moments.iter().zip(&trainable).all(|(m, &n)| m.len() == n)
        };
        if !lens_ok(&opt.m) || !lens_ok(&opt.v) {
            return Err(Error::Checkpoint(
                "optimizer moments do not match the model".into(),
            ));
        }
        for moments in [&opt.m, &opt.v] {
            moments
                .iter()
                .flatten()
                .for_each(|&v| v.write_le(&mut payload));
        }
    }
    let header = Header {
        dtype: T::DTYPE.to_string(),
        spec: model.spec().clone(),
        tensors,
        optimizer: optimizer.map(|o| OptimizerHeader {
            step: o.step,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
        }),
        progress: progress.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    width: usize,
    dtype: String,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated payload".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn values<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let width = self.width;
        let f64_src = self.dtype == "f64";
        let raw = self.take(n * width)?;
        Ok(raw
            .chunks_exact(width)
            .map(|c| {
                if f64_src {
                    T::of(f64::read_le(c))
                } else {
                    T::of(f32::read_le(c) as f64)
                }
            })
            .collect())
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let hend = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[20..hend])?;
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
    };
    let mut model = DenseFcn::<T>::new(header.spec.clone(), 0)?;
    let mut reader = Reader {
        bytes,
        pos: hend,
        width,
        dtype: header.dtype.clone(),
    };
    let mut entries = header.tensors.iter();
    let mut trainable = Vec::new();
    let mut failure: Option<Error> = None;
    model.visit_params(&mut |p| {
        if failure.is_some() {
            return;
        }
        let Some(e) = entries.next() else {
            failure = Some(Error::Checkpoint(
                "fewer tensors than the model needs".into(),
            ));
            return;
        };
        if e.name != p.name || e.kind != p.kind || e.shape != p.shape {
            failure = Some(Error::Checkpoint(format!(
                "tensor {} {:?} does not match model tensor {} {:?}",
                e.name, e.shape, p.name, p.shape
            )));
            return;
        }
        match reader.values::<T>(p.value.len()) {
            Ok(v) => p.value = v,
            Err(err) => failure = Some(err),
        }
        if p.kind.is_trainable() {
            trainable.push(p.value.len());
        }
    });
    if let Some(err) = failure {
        return Err(err);
    }
    if entries.next().is_some() {
        return Err(Error::Checkpoint("more tensors than the model has".into()));
    }
    let optimizer = match header.optimizer {
        None => None,
        Some(h) => {
            let mut read_moments = || -> Result<Vec<Vec<T>>> {
                trainable.iter().map(|&n| reader.values::<T>(n)).collect()
            };
            let m = read_moments()?;
            let v = read_moments()?;
            Some(OptimizerState {
                step: h.step,
                lr: h.lr,
                beta1: h.beta1,
                beta2: h.beta2,
                eps: h.eps,
                m,
                v,
            })
        }
    };
    if reader.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        progress: header.progress,
    })
}

/// Writes the checkpoint through a temporary file and rename.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &DenseFcn<T>,
    optimizer: Option<&OptimizerState<T>>,
    progress: &serde_json::Value,
) -> Result<()> {
    let bytes = encode_checkpoint(model, optimizer, progress)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::layers::{ForwardCtx, Mode};
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn trained_model() -> DenseFcn<f32> {
        let mut m = DenseFcn::<f32>::new(NetworkSpec::tiny_liver(), 2).unwrap();
        // one training-mode pass moves the running statistics off their defaults
        let x = Tensor::from_vec(
            [2, 1, 8, 8],
            (0..128).map(|i| (i as f32 * 0.3).sin()).collect(),
        )
        .unwrap();
        let mut ctx = ForwardCtx::new(Mode::Train, rand_chacha::ChaCha8Rng::seed_from_u64(0));
        m.forward(&x, &mut ctx).unwrap();
        m
    }

    #[test]
    fn round_trip_preserves_outputs_and_state() {
        let model = trained_model();
        let mut m = Vec::new();
        model.visit_params_ref(&mut |p| {
            if p.kind.is_trainable() {
                m.push(vec![0.5f32; p.value.len()]);
            }
        });
        let opt = OptimizerState {
            step: 17,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            v: m.clone(),
            m,
        };
        let progress = serde_json::json!({"epoch": 3});
        let bytes = encode_checkpoint(&model, Some(&opt), &progress).unwrap();
        let back = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(back.optimizer.as_ref(), Some(&opt));
        assert_eq!(back.progress, progress);
        let x = Tensor::filled([1, 1, 8, 8], 0.3);
        assert_eq!(model.infer(&x).unwrap(), back.model.infer(&x).unwrap());
        assert_eq!(
            encode_checkpoint(&back.model, Some(&opt), &progress).unwrap(),
            bytes
        );
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let model = trained_model();
        let bytes = encode_checkpoint(&model, None, &serde_json::Value::Null).unwrap();
        assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint::<f32>(b"garbage bytes here!!").is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(matches!(
            decode_checkpoint::<f32>(&wrong_version),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn f32_checkpoint_loads_as_f64() {
        let model = trained_model();
        let bytes = encode_checkpoint(&model, None, &serde_json::Value::Null).unwrap();
        let back = decode_checkpoint::<f64>(&bytes).unwrap();
        let x = Tensor::filled([1, 1, 8, 8], 0.3);
        let a = model.infer(&x).unwrap();
        let b = back.model.infer(&x.cast::<f64>()).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((*u as f64 - v).abs() < 1e-5);
        }
    }
}

//! Training configuration and its flat `key = value` file format.
//!
//! ```text
//! # liver run at desk scale
//! desk_scale = true
//! target = liver
//! epochs = 6
//! lr = 0.001
//! ```
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors. When `desk_scale = true` appears anywhere in the file the desk
//! preset is applied first and the remaining keys override it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::NetworkSpec;
use crate::preprocess::Target;
use crate::weightmap::{DEFAULT_EDGE_BAND, DEFAULT_EDGE_WEIGHT, DEFAULT_TUMOR_WEIGHT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkPreset {
    Full,
    Tiny,
}

impl FromStr for NetworkPreset {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(Self::Full),
            "tiny" => Ok(Self::Tiny),
            _ => Err(format!("expected full or tiny, got {s:?}")),
        }
    }
}

impl fmt::Display for NetworkPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Tiny => "tiny",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub target: Target,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub iters_train_per_epoch: usize,
    pub iters_val_per_epoch: usize,
    pub seed: u64,
    pub desk_scale: bool,
    pub network: NetworkPreset,
    pub lambda: f64,
    pub gamma: f64,
    pub edge_band: usize,
    pub edge_weight: f64,
    pub tumor_weight: f64,
    pub slice_margin: usize,
    /// Capacity of the batch prefetch queue; 0 assembles batches inline.
    pub prefetch: usize,
}

impl TrainConfig {
    pub fn new(target: Target) -> Self {
        let w = LossWeights::for_target(target);
        Self {
            target,
            batch_size: 4,
            epochs: 80,
            lr: 1e-4,
            l2: w.l2,
            iters_train_per_epoch: 1000,
            iters_val_per_epoch: 250,
            seed: 0,
            desk_scale: false,
            network: NetworkPreset::Full,
            lambda: w.lambda,
            gamma: w.gamma,
            edge_band: DEFAULT_EDGE_BAND,
            edge_weight: DEFAULT_EDGE_WEIGHT,
            tumor_weight: DEFAULT_TUMOR_WEIGHT,
            slice_margin: target.default_margin(),
            prefetch: 2,
        }
    }

    /// Small network and short epochs for CPU runs on phantoms.
    pub fn desk(target: Target) -> Self {
        Self {
            epochs: 4,
            lr: 1e-3,
            iters_train_per_epoch: 50,
            iters_val_per_epoch: 10,
            desk_scale: true,
            network: NetworkPreset::Tiny,
            ..Self::new(target)
        }
    }

    pub fn network_spec(&self) -> NetworkSpec {
        match (self.network, self.target) {
            (NetworkPreset::Full, Target::Liver) => NetworkSpec::liver(),
            (NetworkPreset::Full, Target::Tumor) => NetworkSpec::tumor(),
            (NetworkPreset::Tiny, Target::Liver) => NetworkSpec::tiny_liver(),
            (NetworkPreset::Tiny, Target::Tumor) => NetworkSpec::tiny_tumor(),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            gamma: self.gamma,
            l2: self.l2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("iters_train_per_epoch", self.iters_train_per_epoch),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidSpec(format!("{name} must be >= 1")));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        for (name, v) in [
            ("edge_weight", self.edge_weight),
            ("tumor_weight", self.tumor_weight),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidSpec(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        self.loss_weights().validate()
    }

    /// Parses a config file. `target` fills in when the file does not set
    /// one; a conflicting `target` line is an error.
    pub fn parse(text: &str, target: Option<Target>) -> Result<Self> {
        let mut entries: Vec<(usize, &str, &str)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config {
                    line: line_no,
                    message: format!("expected `key = value`, got {line:?}"),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if let Some(&(first, _, _)) = entries.iter().find(|e| e.1 == k) {
                return Err(Error::Config {
                    line: line_no,
                    message: format!("key {k} already set on line {first}"),
                });
            }
            entries.push((line_no, k, v));
        }

        let mut file_target = None;
        let mut desk = false;
        for &(line, k, v) in &entries {
            match k {
                "target" => file_target = Some(parse_value::<Target>(line, k, v)?),
                "desk_scale" => desk = parse_value::<bool>(line, k, v)?,
                _ => {}
            }
        }
        let target = match (file_target, target) {
            (Some(a), Some(b)) if a != b => {
                let line = entries.iter().find(|e| e.1 == "target").map_or(0, |e| e.0);
                return Err(Error::Config {
                    line,
                    message: format!("file sets target {a} but {b} was requested"),
                });
            }
            (Some(t), _) | (None, Some(t)) => t,
            (None, None) => {
                return Err(Error::Config {
                    line: 0,
                    message: "no target given".into(),
                })
            }
        };
        let mut cfg = if desk {
            Self::desk(target)
        } else {
            Self::new(target)
        };
        for &(line, k, v) in &entries {
            match k {
                "target" | "desk_scale" => {}
                "batch_size" => cfg.batch_size = parse_value(line, k, v)?,
                "epochs" => cfg.epochs = parse_value(line, k, v)?,
                "lr" => cfg.lr = parse_value(line, k, v)?,
                "l2" => cfg.l2 = parse_value(line, k, v)?,
                "iters_train_per_epoch" => cfg.iters_train_per_epoch = parse_value(line, k, v)?,
                "iters_val_per_epoch" => cfg.iters_val_per_epoch = parse_value(line, k, v)?,
                "seed" => cfg.seed = parse_value(line, k, v)?,
                "network" => cfg.network = parse_value(line, k, v)?,
                "lambda" => cfg.lambda = parse_value(line, k, v)?,
                "gamma" => cfg.gamma = parse_value(line, k, v)?,
                "edge_band" => cfg.edge_band = parse_value(line, k, v)?,
                "edge_weight" => cfg.edge_weight = parse_value(line, k, v)?,
                "tumor_weight" => cfg.tumor_weight = parse_value(line, k, v)?,
                "slice_margin" => cfg.slice_margin = parse_value(line, k, v)?,
                "prefetch" => cfg.prefetch = parse_value(line, k, v)?,
                _ => {
                    return Err(Error::Config {
                        line,
                        message: format!("unknown key {k}"),
                    })
                }
            }
        }
        cfg.validate().map_err(|e| Error::Config {
            line: 0,
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    /// Renders the config in the file format; parsing the result gives back
    /// an equal config.
    pub fn to_text(&self) -> String {
        format!(
            "target = {}\ndesk_scale = {}\nbatch_size = {}\nepochs = {}\nlr = {:?}\nl2 = {:?}\n\
             iters_train_per_epoch = {}\niters_val_per_epoch = {}\nseed = {}\nnetwork = {}\n\
             lambda = {:?}\ngamma = {:?}\nedge_band = {}\nedge_weight = {:?}\ntumor_weight = {:?}\n\
             slice_margin = {}\nprefetch = {}\n",
            self.target,
            self.desk_scale,
            self.batch_size,
            self.epochs,
            self.lr,
            self.l2,
            self.iters_train_per_epoch,
            self.iters_val_per_epoch,
            self.seed,
            self.network,
            self.lambda,
            self.gamma,
            self.edge_band,
            self.edge_weight,
            self.tumor_weight,
            self.slice_margin,
            self.prefetch,
        )
    }
}

fn parse_value<V: FromStr>(line: usize, key: &str, value: &str) -> Result<V>
where
    V::Err: fmt::Display,
{
    value.parse().map_err(|e: V::Err| Error::Config {
        line,
        message: format!("bad value {value:?} for {key}: {e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_recipe() {
        let c = TrainConfig::new(Target::Liver);
        assert_eq!(
            (
                c.batch_size,
                c.epochs,
                c.iters_train_per_epoch,
                c.iters_val_per_epoch
            ),
            (4, 80, 1000, 250)
        );
        assert_eq!((c.lr, c.l2), (1e-4, 1e-6));
        let t = TrainConfig::new(Target::Tumor);
        assert_eq!((t.lambda, t.gamma), (0.5, 0.5));
    }

    #[test]
    fn parse_with_comments_and_overrides() {
        let text = "# desk run\ndesk_scale = true\n\nepochs = 7 # short\nseed=3\n";
        let c = TrainConfig::parse(text, Some(Target::Tumor)).unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.seed, 3);
        assert_eq!(c.network, NetworkPreset::Tiny);
        assert_eq!(c.target, Target::Tumor);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = TrainConfig::parse("epochs = 3\n\nlearning_rate = 0.1\n", Some(Target::Liver))
            .unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, .. }), "{err}");
        let err = TrainConfig::parse("epochs = three\n", Some(Target::Liver)).unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }));
        let err = TrainConfig::parse("seed = 1\nseed = 2\n", Some(Target::Liver)).unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }));
        let err = TrainConfig::parse("just words\n", Some(Target::Liver)).unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }));
        assert!(TrainConfig::parse("target = tumor\n", Some(Target::Liver)).is_err());
        assert!(TrainConfig::parse("lr = 0\n", Some(Target::Liver)).is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::desk(Target::Tumor);
        c.lr = 3.5e-4;
        c.seed = 99;
        assert_eq!(TrainConfig::parse(&c.to_text(), None).unwrap(), c);
    }
}

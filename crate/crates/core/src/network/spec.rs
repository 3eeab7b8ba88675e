use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of a dense FCN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub initial_filters: usize,
    pub growth_rate: usize,
    pub layers_per_block: usize,
    pub n_pool: usize,
    pub dropout_p: f64,
    pub n_classes: usize,
    pub final_sbu: bool,
}

impl NetworkSpec {
    pub fn liver() -> Self {
        Self {
            in_channels: 1,
            initial_filters: 48,
            growth_rate: 12,
            layers_per_block: 4,
            n_pool: 4,
            dropout_p: 0.2,
            n_classes: 2,
            final_sbu: true,
        }
    }

    pub fn tumor() -> Self {
        Self {
            in_channels: 3,
            final_sbu: false,
            ..Self::liver()
        }
    }

    /// Small configuration for tests and quick runs.
    pub fn tiny_liver() -> Self {
        Self {
            initial_filters: 8,
            growth_rate: 2,
            n_pool: 2,
            ..Self::liver()
        }
    }

    pub fn tiny_tumor() -> Self {
        Self {
            in_channels: 3,
            final_sbu: false,
            ..Self::tiny_liver()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("initial_filters", self.initial_filters),
            ("growth_rate", self.growth_rate),
            ("layers_per_block", self.layers_per_block),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidSpec(format!("{name} must be positive")));
            }
        }
        if self.n_classes != 2 {
            return Err(Error::InvalidSpec(format!(
                "only two-class heads are supported, got {}",
                self.n_classes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidSpec(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if self.n_pool > 10 {
            return Err(Error::InvalidSpec(format!(
                "n_pool {} is unreasonably deep",
                self.n_pool
            )));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.n_pool
    }

    /// Output spatial size relative to input.
    pub fn output_scale(&self) -> usize {
        if self.final_sbu {
            2
        } else {
            1
        }
    }

    pub fn block_growth(&self) -> usize {
        self.layers_per_block * self.growth_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    InitConv,
    DenseBlock,
    TransitionDown,
    Bottleneck,
    TransitionUp,
    Sbu,
    Head,
}

/// One planned stage with its channel counts and the spatial scale of its
/// output relative to the network input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedBlock {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub blocks: Vec<PlannedBlock>,
}

impl LayerPlan {
    pub fn kinds(&self) -> Vec<BlockKind> {
        self.blocks.iter().map(|b| b.kind).collect()
    }
}

/// Channel and scale bookkeeping for `spec`. Down-path dense blocks and the
/// bottleneck concatenate their input; up-path blocks emit only the new
/// feature maps; there are no encoder-decoder skips.
pub fn plan_network(spec: &NetworkSpec) -> Result<LayerPlan> {
    spec.validate()?;
    let growth = spec.block_growth();
    let mut blocks = Vec::new();
    let mut push = |kind, in_channels, out_channels, scale| {
        blocks.push(PlannedBlock {
            kind,
            in_channels,
            out_channels,
            scale,
        })
    };
    let mut c = spec.initial_filters;
    let mut scale = 1.0;
    push(BlockKind::InitConv, spec.in_channels, c, scale);
    for _ in 0..spec.n_pool {
        push(BlockKind::DenseBlock, c, c + growth, scale);
        c += growth;
        scale /= 2.0;
        push(BlockKind::TransitionDown, c, c, scale);
    }
    push(BlockKind::Bottleneck, c, c + growth, scale);
    c += growth;
    for _ in 0..spec.n_pool {
        scale *= 2.0;
        push(BlockKind::TransitionUp, c, growth, scale);
        push(BlockKind::DenseBlock, growth, growth, scale);
        c = growth;
    }
    if spec.final_sbu {
        scale *= 2.0;
        push(BlockKind::Sbu, c, c, scale);
    }
    push(BlockKind::Head, c, spec.n_classes, scale);
    Ok(LayerPlan { blocks })
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{DenseBlock, TransitionDown, TransitionUp};
use super::layers::{
    softmax_backward, softmax_channels, upsample2, upsample2_backward, Conv2d, ForwardCtx, Param,
};
use super::spec::{plan_network, BlockKind, LayerPlan, NetworkSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Runtime shape observed at the output of one planned stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockTrace {
    pub kind: BlockKind,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Fully convolutional dense network without encoder-decoder skips.
#[derive(Debug, Clone)]
pub struct DenseFcn<T> {
    spec: NetworkSpec,
    plan: LayerPlan,
    init: Conv2d<T>,
    down: Vec<(DenseBlock<T>, TransitionDown<T>)>,
    bottleneck: DenseBlock<T>,
    up: Vec<(TransitionUp<T>, DenseBlock<T>)>,
    head: Conv2d<T>,
    probs: Option<Tensor<T>>,
}

impl<T: Scalar> DenseFcn<T> {
    /// Builds the network with weights drawn from `seed`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let plan = plan_network(&spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, l, p) = (spec.growth_rate, spec.layers_per_block, spec.dropout_p);
        let init = Conv2d::new("init", spec.in_channels, spec.initial_filters, 3, &mut rng);
        let mut c = spec.initial_filters;
        let mut down = Vec::with_capacity(spec.n_pool);
        for i in 0..spec.n_pool {
            let block = DenseBlock::new(&format!("down{i}"), c, k, l, p, true, &mut rng);
            c = block.out_channels();
            down.push((
                block,
                TransitionDown::new(&format!("td{i}"), c, p, &mut rng),
            ));
        }
        let bottleneck = DenseBlock::new("bottleneck", c, k, l, p, true, &mut rng);
        c = bottleneck.out_channels();
        let mut up = Vec::with_capacity(spec.n_pool);
        for i in 0..spec.n_pool {
            let tu = TransitionUp::new(&format!("tu{i}"), c, spec.block_growth(), &mut rng);
            let block = DenseBlock::new(
                &format!("up{i}"),
                spec.block_growth(),
                k,
                l,
                p,
                false,
                &mut rng,
            );
            c = block.out_channels();
            up.push((tu, block));
        }
        let head = Conv2d::new("head", c, spec.n_classes, 3, &mut rng);
        Ok(Self {
            spec,
            plan,
            init,
            down,
            bottleneck,
            up,
            head,
            probs: None,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn plan(&self) -> &LayerPlan {
        &self.plan
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let m = self.spec.size_multiple();
        if x.c() != self.spec.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} input channels, got {}",
                self.spec.in_channels,
                x.c()
            )));
        }
        if x.h() == 0 || x.w() == 0 || !x.h().is_multiple_of(m) || !x.w().is_multiple_of(m) {
            return Err(Error::ShapeMismatch(format!(
                "input {}x{} is not a positive multiple of {m}",
                x.h(),
                x.w()
            )));
        }
        Ok(())
    }

    /// Inference pass with running statistics; usable concurrently.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        Ok(self.eval_traced(x, &mut |_, _| {}))
    }

    /// Runs inference and records the output shape of every planned stage.
    pub fn trace(&self, x: &Tensor<T>) -> Result<Vec<BlockTrace>> {
        self.check_input(x)?;
        let mut out = Vec::new();
        self.eval_traced(x, &mut |kind, t| {
            out.push(BlockTrace {
                kind,
                channels: t.c(),
                height: t.h(),
                width: t.w(),
            })
        });
        Ok(out)
    }

    fn eval_traced(&self, x: &Tensor<T>, rec: &mut dyn FnMut(BlockKind, &Tensor<T>)) -> Tensor<T> {
        let mut h = self.init.eval(x);
        rec(BlockKind::InitConv, &h);
        for (block, td) in &self.down {
            h = block.eval(&h);
            rec(BlockKind::DenseBlock, &h);
            h = td.eval(&h);
            rec(BlockKind::TransitionDown, &h);
        }
        h = self.bottleneck.eval(&h);
        rec(BlockKind::Bottleneck, &h);
        for (tu, block) in &self.up {
            h = tu.eval(&h);
            rec(BlockKind::TransitionUp, &h);
            h = block.eval(&h);
            rec(BlockKind::DenseBlock, &h);
        }
        if self.spec.final_sbu {
            h = upsample2(&h);
            rec(BlockKind::Sbu, &h);
        }
        let probs = softmax_channels(&self.head.eval(&h));
        rec(BlockKind::Head, &probs);
        probs
    }

    /// Forward pass returning per-pixel class probabilities. In `Train` and
    /// `Frozen` modes the activations needed by [`Self::backward`] are kept.
    pub fn forward(&mut self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = self.init.forward(x, ctx.mode);
        for (block, td) in &mut self.down {
            h = block.forward(&h, ctx);
            h = td.forward(&h, ctx);
        }
        h = self.bottleneck.forward(&h, ctx);
        for (tu, block) in &mut self.up {
            h = tu.forward(&h, ctx);
            h = block.forward(&h, ctx);
        }
        if self.spec.final_sbu {
            h = upsample2(&h);
        }
        let probs = softmax_channels(&self.head.forward(&h, ctx.mode));
        self.probs = ctx.mode.keeps_cache().then(|| probs.clone());
        Ok(probs)
    }

    /// Accumulates parameter gradients for a loss whose gradient with respect
    /// to the output probabilities is `dprobs`; returns the input gradient.
    pub fn backward(&mut self, dprobs: &Tensor<T>) -> Tensor<T> {
        let probs = self
            .probs
            .take()
            .expect("backward without a gradient-tracking forward");
        let dlogits = softmax_backward(&probs, dprobs);
        let mut d = self.head.backward(&dlogits);
        if self.spec.final_sbu {
            d = upsample2_backward(&d);
        }
        for (tu, block) in self.up.iter_mut().rev() {
            d = block.backward(&d);
            d = tu.backward(&d);
        }
        d = self.bottleneck.backward(&d);
        for (block, td) in self.down.iter_mut().rev() {
            d = td.backward(&d);
            d = block.backward(&d);
        }
        self.init.backward(&d)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.init.visit_params(f);
        for (block, td) in &mut self.down {
            block.visit_params(f);
            td.visit_params(f);
        }
        self.bottleneck.visit_params(f);
        for (tu, block) in &mut self.up {
            tu.visit_params(f);
            block.visit_params(f);
        }
        self.head.visit_params(f);
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.init.visit_params_ref(f);
        for (block, td) in &self.down {
            block.visit_params_ref(f);
            td.visit_params_ref(f);
        }
        self.bottleneck.visit_params_ref(f);
        for (tu, block) in &self.up {
            tu.visit_params_ref(f);
            block.visit_params_ref(f);
        }
        self.head.visit_params_ref(f);
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params_ref(&mut |p| {
            if p.kind.is_trainable() {
                n += p.value.len()
            }
        });
        n
    }

    /// Sum of squared convolution weights.
    pub fn conv_weight_sq_norm(&self) -> T {
        let mut s = T::zero();
        self.visit_params_ref(&mut |p| {
            if p.kind == super::layers::ParamKind::ConvWeight {
                s += p.value.iter().map(|&v| v * v).sum::<T>();
            }
        });
        s
    }

    /// Adds the gradient of `l2 * ||W||^2` over convolution weights.
    pub fn add_l2_grad(&mut self, l2: T) {
        let two = T::of(2.0);
        self.visit_params(&mut |p| {
            if p.kind == super::layers::ParamKind::ConvWeight {
                for (g, &v) in p.grad.iter_mut().zip(&p.value) {
                    *g += two * l2 * v;
                }
            }
        });
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit_params_ref(&mut |p| ok &= p.value.iter().all(|v| v.is_finite()));
        ok
    }
}

/// Liver network: one input channel, upsampled before the head.
pub fn build_liver_model<T: Scalar>(spec: NetworkSpec, seed: u64) -> Result<DenseFcn<T>> {
    if spec.in_channels != 1 || !spec.final_sbu {
        return Err(Error::InvalidSpec(
            "liver model needs in_channels = 1 and final_sbu = true".into(),
        ));
    }
    DenseFcn::new(spec, seed)
}

/// Lesion network: three windowed input channels, full-resolution head.
pub fn build_tumor_model<T: Scalar>(spec: NetworkSpec, seed: u64) -> Result<DenseFcn<T>> {
    if spec.in_channels != 3 || spec.final_sbu {
        return Err(Error::InvalidSpec(
            "tumor model needs in_channels = 3 and final_sbu = false".into(),
        ));
    }
    DenseFcn::new(spec, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_matches_plan() {
        for spec in [NetworkSpec::tiny_liver(), NetworkSpec::tiny_tumor()] {
            let net = DenseFcn::<f64>::new(spec.clone(), 1).unwrap();
            let x = Tensor::filled([1, spec.in_channels, 8, 8], 0.2);
            let trace = net.trace(&x).unwrap();
            assert_eq!(trace.len(), net.plan().blocks.len());
            for (t, b) in trace.iter().zip(&net.plan().blocks) {
                assert_eq!(t.kind, b.kind);
                assert_eq!(t.channels, b.out_channels);
                assert_eq!(t.height as f64, 8.0 * b.scale);
            }
        }
    }

    #[test]
    fn liver_output_is_twice_input_and_normalized() {
        let net = build_liver_model::<f32>(NetworkSpec::tiny_liver(), 3).unwrap();
        let x = Tensor::filled([2, 1, 8, 12], 0.4);
        let p = net.infer(&x).unwrap();
        assert_eq!(p.shape(), [2, 2, 16, 24]);
        for s in 0..2 {
            for i in 0..16 * 24 {
                assert!((p.plane(s, 0)[i] + p.plane(s, 1)[i] - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn builders_check_channel_roles() {
        assert!(build_liver_model::<f32>(NetworkSpec::tiny_tumor(), 0).is_err());
        assert!(build_tumor_model::<f32>(NetworkSpec::tiny_liver(), 0).is_err());
    }

    #[test]
    fn input_validation() {
        let net = DenseFcn::<f32>::new(NetworkSpec::tiny_liver(), 0).unwrap();
        assert!(matches!(
            net.infer(&Tensor::zeros([1, 1, 6, 8])),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            net.infer(&Tensor::zeros([1, 3, 8, 8])),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn inference_is_bitwise_deterministic() {
        let net = DenseFcn::<f32>::new(NetworkSpec::tiny_tumor(), 9).unwrap();
        let x = Tensor::from_vec(
            [1, 3, 8, 8],
            (0..192).map(|i| (i as f32 * 0.1).cos()).collect(),
        )
        .unwrap();
        let a = net.infer(&x).unwrap();
        let b = net.infer(&x).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = DenseFcn::<f64>::new(NetworkSpec::tiny_liver(), 4).unwrap();
        let b = DenseFcn::<f64>::new(NetworkSpec::tiny_liver(), 4).unwrap();
        assert_eq!(a.conv_weight_sq_norm(), b.conv_weight_sq_norm());
        let c = DenseFcn::<f64>::new(NetworkSpec::tiny_liver(), 5).unwrap();
        assert_ne!(a.conv_weight_sq_norm(), c.conv_weight_sq_norm());
    }
}

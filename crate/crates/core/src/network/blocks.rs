//! Composite stages: dense layers and blocks, transitions down and up.

use rand_chacha::ChaCha8Rng;

use super::layers::{
    apply_mask, dropout, elu, elu_backward, max_pool2, max_pool2_backward, upsample2,
    upsample2_backward, BatchNorm2d, Conv2d, ForwardCtx, Mode, Param,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// BN -> ELU -> 3x3 conv -> dropout, emitting `k` feature maps.
#[derive(Debug, Clone)]
pub struct DenseLayer<T> {
    pub bn: BatchNorm2d<T>,
    pub conv: Conv2d<T>,
    dropout_p: f64,
    act: Option<Tensor<T>>,
    mask: Option<Vec<T>>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(name: &str, in_ch: usize, k: usize, dropout_p: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            bn: BatchNorm2d::new(&format!("{name}.bn"), in_ch),
            conv: Conv2d::new(&format!("{name}.conv"), in_ch, k, 3, rng),
            dropout_p,
            act: None,
            mask: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv.in_ch
    }

    pub fn eval(&self, x: &Tensor<T>) -> Tensor<T> {
        self.conv.eval(&elu(&self.bn.eval(x)))
    }

    pub fn forward(&mut self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Tensor<T> {
        let a = elu(&self.bn.forward(x, ctx.mode));
        let c = self.conv.forward(&a, ctx.mode);
        self.act = ctx.mode.keeps_cache().then_some(a);
        if ctx.mode == Mode::Train && self.dropout_p > 0.0 {
            let (y, mask) = dropout(&c, self.dropout_p, ctx.rng());
            self.mask = Some(mask);
            y
        } else {
            self.mask = None;
            c
        }
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let dc = match self.mask.take() {
            Some(m) => apply_mask(dy, &m),
            None => dy.clone(),
        };
        let da = self.conv.backward(&dc);
        let act = self
            .act
            .take()
            .expect("dense layer backward without cached forward");
        self.bn.backward(&elu_backward(&da, &act))
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.bn.visit_params(f);
        self.conv.visit_params(f);
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.bn.visit_params_ref(f);
        self.conv.visit_params_ref(f);
    }
}

/// Densely connected layers: layer `l` sees the block input concatenated
/// with every earlier layer's output.
#[derive(Debug, Clone)]
pub struct DenseBlock<T> {
    pub layers: Vec<DenseLayer<T>>,
    pub concat_input: bool,
    in_ch: usize,
    k: usize,
}

impl<T: Scalar> DenseBlock<T> {
    pub fn new(
        name: &str,
        in_ch: usize,
        k: usize,
        n_layers: usize,
        dropout_p: f64,
        concat_input: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|l| {
                DenseLayer::new(
                    &format!("{name}.layer{l}"),
                    in_ch + l * k,
                    k,
                    dropout_p,
                    rng,
                )
            })
            .collect();
        Self {
            layers,
            concat_input,
            in_ch,
            k,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.layers.len() * self.k + if self.concat_input { self.in_ch } else { 0 }
    }

    fn run(
        &self,
        x: &Tensor<T>,
        mut layer: impl FnMut(usize, &Tensor<T>) -> Tensor<T>,
    ) -> Tensor<T> {
        let mut stack = x.clone();
        let mut outs = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let y = layer(l, &stack);
            stack = Tensor::concat_channels(&[&stack, &y]).expect("matching spatial dims");
            outs.push(y);
        }
        if self.concat_input {
            stack
        } else {
            let refs: Vec<&Tensor<T>> = outs.iter().collect();
            Tensor::concat_channels(&refs).expect("matching spatial dims")
        }
    }

    pub fn eval(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x, |l, s| self.layers[l].eval(s))
    }

    pub fn forward(&mut self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Tensor<T> {
        let mut stack = x.clone();
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let y = layer.forward(&stack, ctx);
            stack = Tensor::concat_channels(&[&stack, &y]).expect("matching spatial dims");
            outs.push(y);
        }
        if self.concat_input {
            stack
        } else {
            let refs: Vec<&Tensor<T>> = outs.iter().collect();
            Tensor::concat_channels(&refs).expect("matching spatial dims")
        }
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let [n, _, h, w] = dy.shape();
        let total = self.in_ch + self.layers.len() * self.k;
        // gradient w.r.t. the full running stack [input, y0, y1, ...]
        let mut dstack = if self.concat_input {
            dy.clone()
        } else {
            let mut d = Tensor::zeros([n, total, h, w]);
            d.add_into_channels(self.in_ch, dy);
            d
        };
        for l in (0..self.layers.len()).rev() {
            let start = self.in_ch + l * self.k;
            let dyl = dstack.channel_range(start, self.k);
            let dx = self.layers[l].backward(&dyl);
            dstack.add_into_channels(0, &dx);
        }
        dstack.channel_range(0, self.in_ch)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.layers.iter_mut().for_each(|l| l.visit_params(f));
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.layers.iter().for_each(|l| l.visit_params_ref(f));
    }
}

/// BN -> ELU -> 1x1 conv -> dropout -> 2x2 max pool; channel preserving.
#[derive(Debug, Clone)]
pub struct TransitionDown<T> {
    pub bn: BatchNorm2d<T>,
    pub conv: Conv2d<T>,
    dropout_p: f64,
    act: Option<Tensor<T>>,
    mask: Option<Vec<T>>,
    pool: Option<(Vec<usize>, [usize; 4])>,
}

impl<T: Scalar> TransitionDown<T> {
    pub fn new(name: &str, ch: usize, dropout_p: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            bn: BatchNorm2d::new(&format!("{name}.bn"), ch),
            conv: Conv2d::new(&format!("{name}.conv"), ch, ch, 1, rng),
            dropout_p,
            act: None,
            mask: None,
            pool: None,
        }
    }

    pub fn eval(&self, x: &Tensor<T>) -> Tensor<T> {
        max_pool2(&self.conv.eval(&elu(&self.bn.eval(x)))).0
    }

    pub fn forward(&mut self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Tensor<T> {
        let a = elu(&self.bn.forward(x, ctx.mode));
        let mut c = self.conv.forward(&a, ctx.mode);
        self.act = ctx.mode.keeps_cache().then_some(a);
        self.mask = None;
        if ctx.mode == Mode::Train && self.dropout_p > 0.0 {
            let (y, mask) = dropout(&c, self.dropout_p, ctx.rng());
            c = y;
            self.mask = Some(mask);
        }
        let (y, arg) = max_pool2(&c);
        self.pool = ctx.mode.keeps_cache().then(|| (arg, c.shape()));
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (arg, shape) = self
            .pool
            .take()
            .expect("transition backward without cached forward");
        let mut dc = max_pool2_backward(dy, &arg, shape);
        if let Some(m) = self.mask.take() {
            dc = apply_mask(&dc, &m);
        }
        let da = self.conv.backward(&dc);
        let act = self
            .act
            .take()
            .expect("transition backward without cached forward");
        self.bn.backward(&elu_backward(&da, &act))
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.bn.visit_params(f);
        self.conv.visit_params(f);
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.bn.visit_params_ref(f);
        self.conv.visit_params_ref(f);
    }
}

/// Bilinear 2x upsampling -> 3x3 conv -> BN.
#[derive(Debug, Clone)]
pub struct TransitionUp<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Scalar> TransitionUp<T> {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), in_ch, out_ch, 3, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), out_ch),
        }
    }

    pub fn eval(&self, x: &Tensor<T>) -> Tensor<T> {
        self.bn.eval(&self.conv.eval(&upsample2(x)))
    }

    pub fn forward(&mut self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Tensor<T> {
        let c = self.conv.forward(&upsample2(x), ctx.mode);
        self.bn.forward(&c, ctx.mode)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let dc = self.bn.backward(dy);
        upsample2_backward(&self.conv.backward(&dc))
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv.visit_params_ref(f);
        self.bn.visit_params_ref(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn dense_block_channel_counts() {
        let b = DenseBlock::<f64>::new("b", 16, 8, 4, 0.2, true, &mut rng());
        assert_eq!(b.out_channels(), 48);
        assert_eq!(b.layers[2].in_channels(), 16 + 2 * 8);
        let x = Tensor::filled([1, 16, 4, 4], 0.3);
        assert_eq!(b.eval(&x).c(), 48);
        let up = DenseBlock::<f64>::new("u", 200, 8, 4, 0.2, false, &mut rng());
        assert_eq!(up.eval(&Tensor::zeros([1, 200, 2, 2])).c(), 32);
    }

    #[test]
    fn dense_layer_zero_in_zero_out() {
        let mut layer = DenseLayer::<f64>::new("l", 3, 1, 0.2, &mut rng());
        let x = Tensor::zeros([2, 3, 5, 5]);
        let y = layer.eval(&x);
        assert_eq!(y.shape(), [2, 1, 5, 5]);
        assert!(y.data().iter().all(|&v| v == 0.0));
        let mut ctx = ForwardCtx::eval();
        assert_eq!(layer.forward(&x, &mut ctx), y);
    }

    #[test]
    fn eval_is_repeatable_despite_dropout() {
        let layer = DenseLayer::<f64>::new("l", 2, 3, 0.2, &mut rng());
        let x = Tensor::filled([1, 2, 6, 6], 0.5);
        assert_eq!(layer.eval(&x), layer.eval(&x));
    }

    #[test]
    fn block_forward_matches_eval_in_eval_mode() {
        let mut b = DenseBlock::<f64>::new("b", 3, 2, 4, 0.2, false, &mut rng());
        let x = Tensor::from_vec(
            [1, 3, 4, 4],
            (0..48).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let want = b.eval(&x);
        assert_eq!(b.forward(&x, &mut ForwardCtx::eval()), want);
    }

    #[test]
    fn transition_down_halves_and_preserves_constant() {
        let mut td = TransitionDown::<f64>::new("td", 1, 0.2, &mut rng());
        td.conv.weight.value = vec![1.0];
        // BN starts as identity up to eps; ELU keeps positives
        let x = Tensor::filled([1, 1, 4, 4], 2.0);
        let y = td.eval(&x);
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        let expect = 2.0 / (1.0f64 + 1e-5).sqrt();
        assert!(y.data().iter().all(|&v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn transition_up_doubles() {
        let tu = TransitionUp::<f64>::new("tu", 5, 3, &mut rng());
        assert_eq!(tu.eval(&Tensor::zeros([2, 5, 4, 3])).shape(), [2, 3, 8, 6]);
    }
}

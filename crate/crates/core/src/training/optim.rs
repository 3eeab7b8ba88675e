use crate::network::{DenseFcn, OptimizerState};
use crate::scalar::Scalar;

/// Adam with bias-corrected moments, stepping every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    state: OptimizerState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(model: &DenseFcn<T>, lr: f64) -> Self {
        let mut m = Vec::new();
        model.visit_params_ref(&mut |p| {
            if p.kind.is_trainable() {
                m.push(vec![T::zero(); p.value.len()]);
            }
        });
        Self {
            state: OptimizerState {
                step: 0,
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                v: m.clone(),
                m,
            },
        }
    }

    pub fn from_state(state: OptimizerState<T>) -> Self {
        Self { state }
    }

    pub fn state(&self) -> &OptimizerState<T> {
        &self.state
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.state.lr = lr;
    }

    pub fn step(&mut self, model: &mut DenseFcn<T>) {
        let s = &mut self.state;
        s.step += 1;
        let t = s.step as i32;
        let bc1 = 1.0 - s.beta1.powi(t);
        let bc2 = 1.0 - s.beta2.powi(t);
        let (b1, b2) = (T::of(s.beta1), T::of(s.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - s.beta1), T::of(1.0 - s.beta2));
        let step_size = T::of(s.lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(s.eps);
        let mut i = 0;
        let (ms, vs) = (&mut s.m, &mut s.v);
        model.visit_params(&mut |p| {
            if !p.kind.is_trainable() {
                return;
            }
            let (m, v) = (&mut ms[i], &mut vs[i]);
            for (((w, &g), m), v) in p
                .value
                .iter_mut()
                .zip(&p.grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *w -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
            i += 1;
        });
    }
}

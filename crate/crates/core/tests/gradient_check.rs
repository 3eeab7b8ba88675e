//! Central finite differences against analytic gradients of the full
//! network plus composite loss, for every trainable parameter.

use liverseg::losses::{total_loss_grad, LossWeights};
use liverseg::network::{DenseFcn, ForwardCtx, Mode, NetworkSpec, ParamKind};
use liverseg::preprocess::Target;
use liverseg::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Problem {
    x: Tensor<f64>,
    target: Vec<u8>,
    wmap: Vec<f64>,
    objective: Target,
    weights: LossWeights,
    mode: Mode,
}

fn ctx(mode: Mode) -> ForwardCtx {
    ForwardCtx::new(mode, ChaCha8Rng::seed_from_u64(0))
}

fn loss(model: &mut DenseFcn<f64>, pb: &Problem) -> f64 {
    let probs = model.forward(&pb.x, &mut ctx(pb.mode)).unwrap();
    total_loss_grad(
        pb.objective,
        &probs,
        &pb.target,
        &pb.wmap,
        model,
        &pb.weights,
    )
    .unwrap()
    .0
    .total
}

fn perturb(model: &mut DenseFcn<f64>, index: usize, delta: f64) {
    let mut k = 0;
    model.visit_params(&mut |p| {
        if !p.kind.is_trainable() {
            return;
        }
        if index >= k && index < k + p.value.len() {
            p.value[index - k] += delta;
        }
        k += p.value.len();
    });
}

fn randomize(model: &mut DenseFcn<f64>, rng: &mut ChaCha8Rng) {
    model.visit_params(&mut |p| match p.kind {
        ParamKind::BnScale => p
            .value
            .iter_mut()
            .for_each(|v| *v = rng.random_range(0.5..1.5)),
        ParamKind::BnShift | ParamKind::ConvBias | ParamKind::BnRunningMean => p
            .value
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.3..0.3)),
        ParamKind::BnRunningVar => p
            .value
            .iter_mut()
            .for_each(|v| *v = rng.random_range(0.5..2.0)),
        ParamKind::ConvWeight => {}
    });
}

fn check(spec: NetworkSpec, objective: Target, mode: Mode, seed: u64) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = DenseFcn::<f64>::new(spec.clone(), seed).unwrap();
    randomize(&mut model, &mut rng);
    let (h, w) = (8, 8);
    let out = h * spec.output_scale();
    let n = 2;
    let x = Tensor::from_vec(
        [n, spec.in_channels, h, w],
        (0..n * spec.in_channels * h * w)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    let pixels = n * out * out;
    let pb = Problem {
        x,
        target: (0..pixels).map(|_| rng.random_range(0..2)).collect(),
        wmap: (0..pixels)
            .map(|_| if rng.random_bool(0.3) { 5.0 } else { 1.0 })
            .collect(),
        objective,
        weights: LossWeights {
            l2: 1e-3,
            ..LossWeights::for_target(objective)
        },
        mode,
    };

    model.zero_grad();
    let probs = model.forward(&pb.x, &mut ctx(pb.mode)).unwrap();
    let (_, dprobs) = total_loss_grad(
        pb.objective,
        &probs,
        &pb.target,
        &pb.wmap,
        &model,
        &pb.weights,
    )
    .unwrap();
    model.backward(&dprobs);
    model.add_l2_grad(pb.weights.l2);
    let mut analytic = Vec::new();
    model.visit_params_ref(&mut |p| {
        if p.kind.is_trainable() {
            analytic.extend_from_slice(&p.grad);
        }
    });
    assert_eq!(analytic.len(), model.param_count());

    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        perturb(&mut model, i, step);
        let up = loss(&mut model, &pb);
        perturb(&mut model, i, -2.0 * step);
        let down = loss(&mut model, &pb);
        perturb(&mut model, i, step);
        let fd = (up - down) / (2.0 * step);
        // absolute floor for parameters whose gradient is numerically zero
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(err);
        assert!(err < 1e-4, "param {i}: analytic {a:e} vs numeric {fd:e}");
    }
    (analytic.len(), worst)
}

fn tiny(spec: NetworkSpec) -> NetworkSpec {
    NetworkSpec { n_pool: 1, ..spec }
}

#[test]
fn liver_network_gradients_match_finite_differences() {
    let (n, worst) = check(
        tiny(NetworkSpec::tiny_liver()),
        Target::Liver,
        Mode::Frozen,
        1,
    );
    println!("liver: {n} parameters, worst relative error {worst:e}");
}

#[test]
fn tumor_network_gradients_match_finite_differences() {
    let (n, worst) = check(
        tiny(NetworkSpec::tiny_tumor()),
        Target::Tumor,
        Mode::Frozen,
        2,
    );
    println!("tumor: {n} parameters, worst relative error {worst:e}");
}

#[test]
fn batch_statistics_gradients_match_finite_differences() {
    // training-mode normalization with dropout disabled is still a fixed function
    let spec = NetworkSpec {
        dropout_p: 0.0,
        ..tiny(NetworkSpec::tiny_tumor())
    };
    let (n, worst) = check(spec, Target::Tumor, Mode::Train, 3);
    println!("batch statistics: {n} parameters, worst relative error {worst:e}");
}

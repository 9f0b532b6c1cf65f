#![allow(dead_code)]

use kdlab::data::{gen_synthetic, split, Dataset, SyntheticKind};
use kdlab::objectives::{cross_entropy, kd_loss, kl_distill, l2rkd_loss, DistillConfig};
use kdlab::rng::{RandomSource, Rng};
use kdlab::{Result, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

pub fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

pub fn random_labels(rng: &mut Rng, b: usize, k: usize) -> Vec<usize> {
    (0..b).map(|_| rng.index(k)).collect()
}

/// Builds a scalar loss from parameter variables.
pub type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn evaluate(build: &Build<'_>, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    tape.value(loss).item()
}

/// Reverse-mode gradients with respect to every input.
pub fn autodiff(build: &Build<'_>, inputs: &[Tensor]) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

/// Central differences, one coordinate at a time.
pub fn finite_difference(build: &Build<'_>, inputs: &[Tensor], h: f64) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(inputs.len());
    for which in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[which].shape());
        for i in 0..inputs[which].len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= h;
            g.data_mut()[i] = (evaluate(build, &plus) - evaluate(build, &minus)) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Largest coordinate error divided by the largest reference coordinate.
pub fn relative_error(got: &[Tensor], reference: &[Tensor]) -> f64 {
    let mut err: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (a, b) in got.iter().zip(reference) {
        for (x, y) in a.data().iter().zip(b.data()) {
            err = err.max((x - y).abs());
            scale = scale.max(y.abs());
        }
    }
    err / scale.max(1e-8)
}

pub fn gradient_error(build: &Build<'_>, inputs: &[Tensor]) -> f64 {
    relative_error(&autodiff(build, inputs), &finite_difference(build, inputs, FD_STEP))
}

pub fn distill_cfg(rng: &mut Rng) -> DistillConfig {
    DistillConfig {
        alpha: rng.uniform(),
        eta: 0.25 + rng.uniform(),
        tau: 1.0 + 7.0 * rng.uniform(),
        ..Default::default()
    }
}

/// Worst FD error of each objective over `instances` random draws with
/// `K ∈ {2, 10}` and `B ∈ {1, 8}`. Returned in the order CE, KL, KD, region.
pub fn objective_gradient_errors(instances: usize, seed: u64) -> [f64; 4] {
    let mut rng = Rng::new(seed);
    let mut worst = [0.0f64; 4];
    for i in 0..instances {
        let k = if i % 2 == 0 { 2 } else { 10 };
        let b = if (i / 2) % 2 == 0 { 1 } else { 8 };
        let s = random_tensor(&mut rng, &[b, k], 2.0);
        let t = random_tensor(&mut rng, &[b, k], 2.0);
        let labels = random_labels(&mut rng, b, k);
        let cfg = distill_cfg(&mut rng);

        let ce = |tape: &mut Tape, v: &[Var]| cross_entropy(tape, v[0], &labels);
        worst[0] = worst[0].max(gradient_error(&ce, &[s.clone()]));

        let kl = |tape: &mut Tape, v: &[Var]| kl_distill(tape, v[0], &t, cfg.tau);
        worst[1] = worst[1].max(gradient_error(&kl, &[s.clone()]));

        let kd = |tape: &mut Tape, v: &[Var]| Ok(kd_loss(tape, v[0], &t, &labels, &cfg)?.total);
        worst[2] = worst[2].max(gradient_error(&kd, &[s.clone()]));

        let regions = 1 + i % 3;
        let s_reg: Vec<Tensor> = (0..regions).map(|_| random_tensor(&mut rng, &[b, k], 2.0)).collect();
        let t_reg: Vec<Tensor> = (0..regions).map(|_| random_tensor(&mut rng, &[b, k], 2.0)).collect();
        let lr = |tape: &mut Tape, v: &[Var]| Ok(l2rkd_loss(tape, v[0], &labels, &v[1..], &t_reg, &cfg)?.total);
        let mut inputs = vec![s.clone()];
        inputs.extend(s_reg);
        worst[3] = worst[3].max(gradient_error(&lr, &inputs));
    }
    worst
}

pub fn blobs(n: usize, seed: u64) -> (Dataset, Dataset) {
    let ds = gen_synthetic(&SyntheticKind::gaussian_mixture(2, 2.5, 0.5), n, 2, 2, seed).unwrap();
    split(&ds, 0.5, seed).unwrap()
}

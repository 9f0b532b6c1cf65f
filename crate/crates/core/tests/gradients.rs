mod common;

use common::*;
use kdlab::model::LayerVars;
use kdlab::objectives::{kd_grad_closed_form, kd_loss, kd_loss_split, kl_distill, l2rkd_loss};
use kdlab::rng::Rng;
use kdlab::{Mlp, MlpSpec, Tape, Tensor, Var};

#[test]
fn objectives_match_finite_differences() {
    let [ce, kl, kd, region] = objective_gradient_errors(40, 11);
    for (name, err) in [("ce", ce), ("kl", kl), ("kd", kd), ("l2rkd", region)] {
        assert!(err < 1e-4, "{name}: {err:e}");
    }
}

#[test]
fn closed_form_is_the_autodiff_gradient_of_the_weighted_kl() {
    let mut rng = Rng::new(8);
    for tau in [1.0, 4.0, 20.0] {
        let s = random_tensor(&mut rng, &[1, 10], 2.0);
        let t = random_tensor(&mut rng, &[1, 10], 2.0);
        let f = |tape: &mut Tape, v: &[Var]| kl_distill(tape, v[0], &t, tau);
        let got = autodiff(&f, &[s.clone()]);
        let want = Tensor::new(vec![1, 10], kd_grad_closed_form(s.data(), t.data(), tau).unwrap()).unwrap();
        assert!(relative_error(&got, &[want]) < 1e-10, "tau {tau}");
    }
}

#[test]
fn split_kd_matches_finite_differences() {
    let mut rng = Rng::new(3);
    for _ in 0..10 {
        let s = random_tensor(&mut rng, &[4, 5], 1.5);
        let sn = random_tensor(&mut rng, &[4, 5], 1.5);
        let t = random_tensor(&mut rng, &[4, 5], 1.5);
        let labels = random_labels(&mut rng, 4, 5);
        let cfg = distill_cfg(&mut rng);
        let f = |tape: &mut Tape, v: &[Var]| Ok(kd_loss_split(tape, v[0], &labels, v[1], &t, &cfg)?.total);
        let err = gradient_error(&f, &[s, sn]);
        assert!(err < 1e-4, "{err:e}");
    }
}

fn layer_vars(v: &[Var]) -> Vec<LayerVars> {
    v.chunks(2).map(|c| LayerVars { weight: c[0], bias: c[1] }).collect()
}

fn net_params(net: &Mlp) -> Vec<Tensor> {
    net.layers.iter().flat_map(|l| [l.weight.clone(), l.bias.clone()]).collect()
}

#[test]
fn mlp_parameters_through_kd() {
    let spec = MlpSpec::new(vec![3, 6, 5, 4]).unwrap();
    let net = Mlp::init(&spec, 8).unwrap();
    let mut rng = Rng::new(9);
    let x = random_tensor(&mut rng, &[5, 3], 1.0);
    let t = random_tensor(&mut rng, &[5, 4], 2.0);
    let labels = random_labels(&mut rng, 5, 4);
    let cfg = distill_cfg(&mut rng);
    let f = |tape: &mut Tape, v: &[Var]| {
        let xv = tape.constant(x.clone());
        let logits = net.forward_on_tape(tape, &layer_vars(v), xv)?;
        Ok(kd_loss(tape, logits, &t, &labels, &cfg)?.total)
    };
    let err = gradient_error(&f, &net_params(&net));
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn mlp_parameters_through_region_loss() {
    let spec = MlpSpec::new(vec![2, 8, 3]).unwrap();
    let net = Mlp::init(&spec, 1).unwrap();
    let mut rng = Rng::new(2);
    let x = random_tensor(&mut rng, &[6, 2], 1.0);
    let regions: Vec<Tensor> = (0..2).map(|_| random_tensor(&mut rng, &[6, 2], 1.0)).collect();
    let t_reg: Vec<Tensor> = (0..2).map(|_| random_tensor(&mut rng, &[6, 3], 2.0)).collect();
    let labels = random_labels(&mut rng, 6, 3);
    let cfg = distill_cfg(&mut rng);
    let f = |tape: &mut Tape, v: &[Var]| {
        let lv = layer_vars(v);
        let xv = tape.constant(x.clone());
        let logits = net.forward_on_tape(tape, &lv, xv)?;
        let mut s_reg = Vec::new();
        for r in &regions {
            let rv = tape.constant(r.clone());
            s_reg.push(net.forward_on_tape(tape, &lv, rv)?);
        }
        Ok(l2rkd_loss(tape, logits, &labels, &s_reg, &t_reg, &cfg)?.total)
    };
    let err = gradient_error(&f, &net_params(&net));
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn oracle_rejects_a_wrong_gradient() {
    // sanity check of the harness itself: a loss whose tape gradient is
    // deliberately inconsistent with its value must be caught
    let x = Tensor::vector(vec![0.3, -0.7, 1.1]);
    let honest = |tape: &mut Tape, v: &[Var]| {
        let sq = tape.mul(v[0], v[0])?;
        Ok(tape.sum(sq))
    };
    assert!(gradient_error(&honest, std::slice::from_ref(&x)) < 1e-8);
    let fd = finite_difference(&honest, std::slice::from_ref(&x), FD_STEP);
    let wrong = vec![fd[0].scale(1.01)];
    assert!(relative_error(&wrong, &fd) > 5e-3);
}

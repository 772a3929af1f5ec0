//! Finite-difference oracles shared by the gradient and acceptance suites.
#![allow(dead_code)]

use factorized_nerf::model::{Binding, ParamId};
use factorized_nerf::numerics::Var;
use factorized_nerf::rendering::{stratified_sample, Ray};
use factorized_nerf::{FactorizedModel, ModelConfig, Prng, SceneSetup, Tape, Tensor};

pub const H: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, floor)`; the floor keeps entries whose true
/// gradient is zero from dividing round-off by round-off.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Builds `f` on a fresh tape from `inputs` and compares the analytic gradient
/// of every input with central differences. Returns the worst relative error.
pub fn check<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars);
        (tape, vars, out)
    };
    let (mut tape, vars, out) = eval(inputs);
    assert!(tape.value(out).is_scalar(), "loss must be scalar");
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let g = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        for i in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let (tp, _, op) = eval(&plus);
            let (tm, _, om) = eval(&minus);
            let num = (tp.value(op).item() - tm.value(om).item()) / (2.0 * H);
            worst = worst.max(rel_err(g.data()[i], num, 1e-4));
        }
    }
    worst
}

/// Reduces any tensor to a scalar through a fixed random projection so that
/// every output entry carries a distinct weight.
pub fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let shape = tape.value(v).shape().to_vec();
    let mut prng = Prng::new(seed);
    let n: usize = shape.iter().product();
    let w = Tensor::from_vec(&shape, (0..n).map(|_| prng.uniform_in(-1.0, 1.0)).collect()).unwrap();
    let w = tape.constant(w);
    let p = tape.mul(v, w).unwrap();
    tape.sum(p)
}

pub fn random(shape: &[usize], prng: &mut Prng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| prng.uniform_in(-1.0, 1.0)).collect()).unwrap()
}

/// Random values bounded away from the ReLU kink.
pub fn away_from_zero(shape: &[usize], prng: &mut Prng) -> Tensor<f64> {
    random(shape, prng).map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v })
}

pub const OP_TOL: f64 = 1e-4;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        layers: 3,
        width: 6,
        rank: 3,
        noise_dim: 4,
        pos_degrees: 2,
        dir_degrees: 1,
        skip_layer: 2,
        decoder_hidden: 5,
        generator_hidden: 4,
        use_coefficients: true,
        use_generator: true,
    }
}

pub fn tiny_model(config: ModelConfig, scenes: usize, seed: u64) -> FactorizedModel<f64> {
    let mut prng = Prng::new(seed);
    let mut m = FactorizedModel::new(config, &mut prng).unwrap();
    for s in 0..scenes {
        let setup = SceneSetup { frusta: Vec::new(), near: 1.0, far: 5.0, white_background: true };
        m.add_scene(&format!("s{s}"), setup, &mut prng).unwrap();
    }
    // Coefficients away from the identity so every path carries signal.
    for id in m.param_ids() {
        if let ParamId::Coefficient { .. } = id {
            let t = m.param_mut(id).unwrap();
            for v in t.data_mut() {
                *v += prng.uniform_in(-0.3, 0.3);
            }
        }
    }
    m
}

pub fn ray_batch(prng: &mut Prng, n: usize, samples: usize) -> (Vec<Ray>, Vec<Vec<f64>>) {
    let rays: Vec<Ray> = (0..n)
        .map(|_| {
            let target = [prng.uniform_in(-0.3, 0.3), prng.uniform_in(-0.3, 0.3), 0.0];
            let o = [0.0, 0.0, -3.0];
            let d = [target[0] - o[0], target[1] - o[1], target[2] - o[2]];
            let l = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            Ray::new(o, [d[0] / l, d[1] / l, d[2] / l], 1.0, 5.0).unwrap()
        })
        .collect();
    let depths = rays.iter().map(|r| stratified_sample(r, samples, Some(prng)).unwrap()).collect();
    (rays, depths)
}

/// Central differences of `loss(model)` with respect to each entry of every
/// trainable tensor, compared to one backward pass.
pub fn check_model<F>(model: &FactorizedModel<f64>, loss: F) -> (f64, usize)
where
    F: Fn(&FactorizedModel<f64>, &mut Tape<f64>, &mut Binding<'_>) -> Var,
{
    let mut tape = Tape::new();
    let mut binding = Binding::all();
    let out = loss(model, &mut tape, &mut binding);
    let grads = tape.backward(out).unwrap();
    let value = |m: &FactorizedModel<f64>| {
        let mut t = Tape::new();
        let mut b = Binding::frozen();
        let o = loss(m, &mut t, &mut b);
        t.value(o).item()
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (id, var) in binding.entries().collect::<Vec<_>>() {
        let g = grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(model.param(id).unwrap().shape()));
        for i in 0..g.numel() {
            let mut plus = model.clone();
            plus.param_mut(id).unwrap().data_mut()[i] += H;
            let mut minus = model.clone();
            minus.param_mut(id).unwrap().data_mut()[i] -= H;
            let num = (value(&plus) - value(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(g.data()[i], num, 1e-4));
            checked += 1;
        }
    }
    (worst, checked)
}

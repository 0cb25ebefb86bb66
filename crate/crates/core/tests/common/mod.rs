#![allow(dead_code)]

use ponderlab::controller::{Activation, Controller, Weights};
use ponderlab::numerics::{RngStream, Vector};

pub fn random_state(rng: &mut RngStream, dim: usize) -> Vector {
    Vector::new((0..dim).map(|_| 2.0 * rng.normal()).collect()).unwrap()
}

/// Controller with every parameter perturbed away from its structured init.
pub fn random_controller(seed: u64, dim: usize, activations: [Activation; 2], temp: f64) -> Controller {
    let mut c = Controller::init_with(dim, seed, temp, activations).unwrap();
    let mut rng = RngStream::new(seed, "perturb");
    let flat: Vec<f64> = c.weights().to_flat().iter().map(|w| w + 0.05 * rng.normal()).collect();
    c.set_weights(c.weights().from_flat(&flat).unwrap()).unwrap();
    c
}

/// Flat-index view into the weights, in `to_flat` order.
pub fn entry(w: &mut Weights, mut i: usize) -> &mut f64 {
    let b_out = &mut w.b_out;
    for t in [&mut w.ln_gain, &mut w.ln_bias] {
        if i < t.len() {
            return &mut t.as_slice_mut().unwrap()[i];
        }
        i -= t.len();
    }
    if i < w.w1.len() {
        return &mut w.w1.as_slice_mut().unwrap()[i];
    }
    i -= w.w1.len();
    if i < w.b1.len() {
        return &mut w.b1.as_slice_mut().unwrap()[i];
    }
    i -= w.b1.len();
    if i < w.w2.len() {
        return &mut w.w2.as_slice_mut().unwrap()[i];
    }
    i -= w.w2.len();
    for t in [&mut w.b2, &mut w.w_out] {
        if i < t.len() {
            return &mut t.as_slice_mut().unwrap()[i];
        }
        i -= t.len();
    }
    assert_eq!(i, 0);
    b_out
}

/// Central difference of `f` along flat coordinate `i`.
pub fn central(c: &Controller, i: usize, h: f64, f: impl Fn(&Controller) -> f64) -> f64 {
    let mut probe = c.clone();
    let mut at = |delta: f64| {
        let mut w = c.weights().clone();
        *entry(&mut w, i) += delta;
        probe.set_weights(w).unwrap();
        f(&probe)
    };
    (at(h) - at(-h)) / (2.0 * h)
}


/// Central difference of `f` along a random unit direction, with the matching analytic value.
pub fn directional(c: &Controller, grad: &[f64], h: f64, rng: &mut RngStream, f: impl Fn(&Controller) -> f64) -> (f64, f64) {
    let base = c.weights().to_flat();
    let dir: Vec<f64> = (0..base.len()).map(|_| rng.normal()).collect();
    let dn = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    let at = |sign: f64| {
        let flat: Vec<f64> = base.iter().zip(&dir).map(|(w, d)| w + sign * h * d / dn).collect();
        let mut probe = c.clone();
        probe.set_weights(c.weights().from_flat(&flat).unwrap()).unwrap();
        f(&probe)
    };
    let analytic = grad.iter().zip(&dir).map(|(g, d)| g * d / dn).sum();
    (analytic, (at(1.0) - at(-1.0)) / (2.0 * h))
}

pub fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()) + 1e-9
}

//! Numerical checks for the [`Layer`] implementations.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::tensor::Tensor4;
use super::Layer;
use crate::error::Result;

/// Central difference step.
pub const STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// Input coordinates compared.
    pub input_samples: usize,
    /// Parameter coordinates compared.
    pub param_samples: usize,
    pub max_rel_input: f64,
    pub max_rel_params: f64,
}

impl GradCheckReport {
    pub fn max_rel(&self) -> f64 {
        self.max_rel_input.max(self.max_rel_params)
    }
}

fn random_tensor(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_| rng.random_range(-1.0..1.0))
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(1.0)
}

fn coords(len: usize, samples: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if samples >= len {
        (0..len).collect()
    } else {
        sample(rng, len, samples).into_vec()
    }
}

/// Compares analytic gradients of `L = <f(x), u>` against central finite
/// differences with step [`STEP`], at up to `samples` random input
/// coordinates and `samples` random parameter coordinates. `x` and `u` are
/// drawn from `seed`. Error is `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<L: Layer + Clone>(
    layer: &L,
    dims: [usize; 4],
    seed: u64,
    samples: usize,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(dims, &mut rng);
    finite_diff_at(layer, &x, &mut rng, samples)
}

/// [`finite_diff_check`] at a caller-chosen input.
pub fn finite_diff_at<L: Layer + Clone>(
    layer: &L,
    x: &Tensor4<f64>,
    rng: &mut ChaCha8Rng,
    samples: usize,
) -> Result<GradCheckReport> {
    let u = random_tensor(layer.output_dims(x.dims)?, rng);
    let grads = layer.backward(x, &u)?;
    let loss = |l: &L, x: &Tensor4<f64>| -> Result<f64> { Ok(l.forward(x)?.dot(&u)) };

    let mut max_rel_input = 0.0f64;
    let ix = coords(x.data.len(), samples, rng);
    let mut xp = x.clone();
    for &i in &ix {
        let orig = xp.data[i];
        xp.data[i] = orig + STEP;
        let lp = loss(layer, &xp)?;
        xp.data[i] = orig - STEP;
        let lm = loss(layer, &xp)?;
        xp.data[i] = orig;
        max_rel_input = max_rel_input.max(rel(grads.input.data[i], (lp - lm) / (2.0 * STEP)));
    }

    let mut max_rel_params = 0.0f64;
    let theta = layer.params();
    let ip = coords(theta.len(), samples, rng);
    let mut probe = layer.clone();
    let mut tp = theta.clone();
    for &i in &ip {
        tp[i] = theta[i] + STEP;
        probe.set_params(&tp)?;
        let lp = loss(&probe, x)?;
        tp[i] = theta[i] - STEP;
        probe.set_params(&tp)?;
        let lm = loss(&probe, x)?;
        tp[i] = theta[i];
        max_rel_params = max_rel_params.max(rel(grads.params[i], (lp - lm) / (2.0 * STEP)));
    }

    Ok(GradCheckReport {
        input_samples: ix.len(),
        param_samples: ip.len(),
        max_rel_input,
        max_rel_params,
    })
}

/// Relative gap between `<f(x), u>` and `<x, backward_x(u)>` for random `x`
/// and `u`.
///
/// For a linear layer this is the adjoint identity. It also holds for the
/// bias-free ReLU decoder block, which is positively homogeneous of degree
/// one, so the input gradient at `x` applied to `x` returns `f(x)`.
pub fn adjoint_check<L: Layer>(layer: &L, dims: [usize; 4], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(dims, &mut rng);
    let u = random_tensor(layer.output_dims(dims)?, &mut rng);
    let lhs = layer.forward(&x)?.dot(&u);
    let rhs = x.dot(&layer.backward(&x, &u)?.input);
    let scale = lhs.abs().max(rhs.abs());
    Ok(if scale == 0.0 { 0.0 } else { (lhs - rhs).abs() / scale })
}

/// Max relative deviation of `f(a*x1 + b*x2)` from `a*f(x1) + b*f(x2)`,
/// scaled by the largest output magnitude.
pub fn linearity_check<L: Layer>(layer: &L, dims: [usize; 4], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x1 = random_tensor(dims, &mut rng);
    let x2 = random_tensor(dims, &mut rng);
    let (a, b): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let mix = Tensor4::from_fn(dims, |i| a * x1.data[i] + b * x2.data[i]);
    let lhs = layer.forward(&mix)?;
    let (y1, y2) = (layer.forward(&x1)?, layer.forward(&x2)?);
    let rhs = Tensor4::from_fn(y1.dims, |i| a * y1.data[i] + b * y2.data[i]);
    let scale = lhs.max_abs().max(rhs.max_abs());
    let worst = lhs
        .data
        .iter()
        .zip(&rhs.data)
        .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
    Ok(if scale == 0.0 { 0.0 } else { worst / scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{DecoderBlock, DecoderBlockParams, Direction, DirectionalTConv, Filter1D, TConv3x3};

    fn directional(d: Direction, stride: usize) -> DirectionalTConv {
        let taps = (0..9).map(|i| (i as f64 * 0.37).sin()).collect();
        DirectionalTConv {
            filter: Filter1D::new(d, taps).unwrap(),
            stride,
        }
    }

    #[test]
    fn directional_gradients() {
        for d in Direction::ALL {
            for s in [1, 2] {
                let l = directional(d, s);
                let r = finite_diff_check(&l, [2, 2, 7, 6], 11, 40).unwrap();
                assert!(r.max_rel() < 1e-7, "{d:?} s={s}: {r:?}");
                assert_eq!(r.param_samples, 9);
                assert!(adjoint_check(&l, [1, 2, 9, 8], 5).unwrap() < 1e-12);
                assert!(linearity_check(&l, [1, 1, 9, 8], 5).unwrap() < 1e-12);
            }
        }
    }

    #[test]
    fn tconv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l = TConv3x3 {
            weights: random_tensor([3, 2, 3, 3], &mut rng),
            stride: 2,
        };
        let r = finite_diff_check(&l, [2, 3, 5, 4], 1, 50).unwrap();
        assert!(r.max_rel() < 1e-7, "{r:?}");
        assert!(adjoint_check(&l, [2, 3, 5, 4], 2).unwrap() < 1e-12);
    }

    #[test]
    fn decoder_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = DecoderBlockParams::random(3, 8, 2, 4, 2, 0.5, &mut rng).unwrap();
        let l = DecoderBlock(p);
        let r = finite_diff_check(&l, [1, 3, 6, 5], 4, 60).unwrap();
        assert!(r.max_rel() < 1e-5, "{r:?}");
        assert!(adjoint_check(&l, [1, 3, 6, 5], 8).unwrap() < 1e-10);
    }

    #[test]
    fn zero_input_still_checks_taps() {
        let l = directional(Direction::Vertical, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = finite_diff_at(&l, &Tensor4::zeros([1, 1, 4, 4]), &mut rng, 100).unwrap();
        assert!(r.max_rel().is_finite());
        assert!(r.max_rel() < 1e-7);
    }

    #[test]
    fn deterministic_report() {
        let l = directional(Direction::BackwardDiagonal, 1);
        let a = finite_diff_check(&l, [1, 1, 8, 8], 77, 10).unwrap();
        let b = finite_diff_check(&l, [1, 1, 8, 8], 77, 10).unwrap();
        assert_eq!(a, b);
    }
}

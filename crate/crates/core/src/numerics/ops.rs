// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::Rng;
use crate::error::{invalid, shape, Result};

/// Numerically stable softmax (max subtraction).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(invalid("v", "softmax of an empty vector"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// In-place softmax over a nonempty slice. Entries equal to `-inf` map to 0.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = libm::exp(*x - max);
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// `log(softmax(v))` computed without forming the probabilities.
pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(invalid("v", "log_softmax of an empty vector"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(v.iter().map(|x| libm::exp(x - max)).sum::<f64>());
    Ok(v.iter().map(|x| x - lse).collect())
}

/// Layer normalisation: `gain * (v - mean) / sqrt(var + eps) + bias`, with the
/// biased variance estimator.
pub fn layernorm(v: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if gain.len() != v.len() || bias.len() != v.len() {
        return Err(shape(
            "layernorm",
            format!("v={} gain={} bias={}", v.len(), gain.len(), bias.len()),
        ));
    }
    if !(eps > 0.0) {
        return Err(invalid("eps", "must be positive"));
    }
    if v.is_empty() {
        return Ok(Vec::new());
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / libm::sqrt(var + eps);
    Ok(v.iter()
        .zip(gain.iter().zip(bias))
        .map(|(x, (g, b))| g * (x - mean) * inv + b)
        .collect())
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// `tanh` through a single `exp`; saturates beyond `|z| > 20`.
#[inline]
fn tanh_exp(z: f64) -> f64 {
    if z > 20.0 {
        1.0
    } else if z < -20.0 {
        -1.0
    } else {
        let e = libm::exp(2.0 * z);
        (e - 1.0) / (e + 1.0)
    }
}

/// Inner `tanh` of the GELU approximation at `x`. Forward passes keep it so
/// the backward pass does not recompute it.
#[inline]
pub fn gelu_tanh(x: f64) -> f64 {
    tanh_exp(SQRT_2_OVER_PI * (x + GELU_C * x * x * x))
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

/// Derivative of [`gelu`].
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    gelu_grad_with(x, gelu_tanh(x))
}

/// Derivative of [`gelu`] given `t = gelu_tanh(x)`.
#[inline]
pub fn gelu_grad_with(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

/// `n` i.i.d. draws from `N(mean, sigma^2)` via Box-Muller, both branches used.
pub fn gaussian(rng: &mut Rng, mean: f64, sigma: f64, n: usize) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) {
        return Err(invalid("sigma", format!("must be >= 0, got {sigma}")));
    }
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let u1 = rng.uniform_open0();
        let u2 = rng.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = core::f64::consts::TAU * u2;
        out[i] = mean + sigma * r * libm::cos(theta);
        if i + 1 < n {
            out[i + 1] = mean + sigma * r * libm::sin(theta);
        }
        i += 2;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let p = softmax(&[2.5, 2.5, 2.5]).unwrap();
        assert!(p.iter().all(|x| close(*x, 1.0 / 3.0, 1e-15)));
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let v = [0.3, -1.2, 4.0, 0.0];
        let shifted: Vec<f64> = v.iter().map(|x| x + 17.5).collect();
        let a = softmax(&v).unwrap();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(close(*x, *y, 1e-15));
        }
    }

    #[test]
    fn softmax_of_zero_ln3() {
        let p = softmax(&[0.0, libm::log(3.0)]).unwrap();
        assert!(close(p[0], 0.25, 1e-15) && close(p[1], 0.75, 1e-15));
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax(&[1000.0, 999.0]).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let v = [0.1, 2.0, -3.0];
        let p = softmax(&v).unwrap();
        let lp = log_softmax(&v).unwrap();
        for (a, b) in p.iter().zip(&lp) {
            assert!(close(libm::log(*a), *b, 1e-14));
        }
    }

    #[test]
    fn layernorm_of_constant_is_zero() {
        let out = layernorm(&[3.0; 5], &[1.0; 5], &[0.0; 5], 1e-5).unwrap();
        assert!(out.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn layernorm_of_standardised_input() {
        let out = layernorm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2], 1e-12).unwrap();
        assert!(close(out[0], 1.0, 1e-9) && close(out[1], -1.0, 1e-9));
    }

    #[test]
    fn layernorm_mean_after_removing_affine() {
        let v = [0.2, 5.0, -1.5, 3.3, 0.0];
        let g = [2.0, 0.5, 1.5, 3.0, 1.0];
        let b = [0.1, -0.2, 0.3, 0.0, 1.0];
        let out = layernorm(&v, &g, &b, 1e-5).unwrap();
        let pre: Vec<f64> = out.iter().zip(g.iter().zip(&b)).map(|(o, (g, b))| (o - b) / g).collect();
        assert!(pre.iter().sum::<f64>().abs() / 5.0 < 1e-12);
    }

    #[test]
    fn layernorm_length_mismatch() {
        assert!(layernorm(&[1.0, 2.0], &[1.0], &[0.0, 0.0], 1e-5).is_err());
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!(close(gelu_grad(x), fd, 1e-8));
        }
    }

    #[test]
    fn gaussian_zero_sigma_is_constant() {
        let mut rng = Rng::new(3);
        assert!(gaussian(&mut rng, 1.5, 0.0, 9).unwrap().iter().all(|x| *x == 1.5));
    }

    #[test]
    fn gaussian_is_deterministic() {
        let a = gaussian(&mut Rng::new(11), 0.0, 1.0, 33).unwrap();
        let b = gaussian(&mut Rng::new(11), 0.0, 1.0, 33).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_negative_sigma_rejected() {
        assert!(gaussian(&mut Rng::new(0), 0.0, -1.0, 3).is_err());
    }

    #[test]
    fn gaussian_moments_law_of_large_numbers() {
        let n = 100_000;
        let xs = gaussian(&mut Rng::new(99), 0.0, 1.0, n).unwrap();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((libm::sqrt(var) - 1.0).abs() < 0.02, "std {}", libm::sqrt(var));
    }

    proptest::proptest! {
        #[test]
        fn softmax_sums_to_one(v in proptest::collection::vec(-50.0f64..50.0, 1..64)) {
            let p = softmax(&v).unwrap();
            let s: f64 = p.iter().sum();
            proptest::prop_assert!((s - 1.0).abs() < 1e-12);
            proptest::prop_assert!(p.iter().all(|x| *x >= 0.0 && *x <= 1.0));
        }

        #[test]
        fn layernorm_standardises(v in proptest::collection::vec(-10.0f64..10.0, 2..64)) {
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            proptest::prop_assume!(var > 1e-3);
            let ones = alloc::vec![1.0; v.len()];
            let zeros = alloc::vec![0.0; v.len()];
            let out = layernorm(&v, &ones, &zeros, 1e-12).unwrap();
            let om = out.iter().sum::<f64>() / n;
            let ov = out.iter().map(|x| (x - om) * (x - om)).sum::<f64>() / n;
            proptest::prop_assert!(om.abs() < 1e-9);
            proptest::prop_assert!((ov - 1.0).abs() < 1e-6);
        }
    }
}

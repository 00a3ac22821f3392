//! Irradiance-space blending with gamma correction and the training losses.
//!
//! Kernel rays are blended in linear radiance and only then mapped through
//! `g(c) = c^(1/2.2)`, so observed images are compared in display space.

use crate::autodiff::{AutodiffError, Real, Tape, Var};
use crate::error::{Error, Result};

pub const GAMMA: f64 = 2.2;
/// Floor applied to the base of the gamma derivative; `g′` diverges at 0.
pub const GAMMA_GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the origin term inside the alignment loss.
    pub lambda_o: f64,
    /// Weight of the alignment loss in the total loss.
    pub lambda_a: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_o: 10.0,
            lambda_a: 0.1,
        }
    }
}

pub fn gamma_encode(x: f32) -> f32 {
    x.powf((1.0 / GAMMA) as f32)
}

pub fn gamma_decode(x: f32) -> f32 {
    x.max(0.0).powf(GAMMA as f32)
}

/// `g(c′) = c′^(1/2.2)` per channel.
pub fn gamma_correct(c: [f64; 3]) -> Result<[f64; 3]> {
    if let Some(v) = c.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::invalid(format!("gamma input must be non-negative, got {v}")));
    }
    Ok(c.map(|v| v.powf(1.0 / GAMMA)))
}

/// `g(Σ w_q · c′_q)`; the weights must sum to one within `1e-4`.
pub fn blend_blurry(colors: &[[f64; 3]], weights: &[f64]) -> Result<[f64; 3]> {
    if colors.len() != weights.len() || colors.is_empty() {
        return Err(Error::invalid("need one weight per kernel color"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-4 {
        return Err(Error::invalid(format!("kernel weights sum to {total}, not 1")));
    }
    let mut acc = [0.0; 3];
    for (c, &w) in colors.iter().zip(weights) {
        for ch in 0..3 {
            acc[ch] += w * c[ch];
        }
    }
    gamma_correct(acc)
}

/// Mean over the batch of the squared color distance.
pub fn reconstruction_loss(predicted: &[[f64; 3]], observed: &[[f64; 3]]) -> Result<f64> {
    if predicted.len() != observed.len() {
        return Err(Error::invalid("predicted and observed batches differ in size"));
    }
    if predicted.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let sum: f64 = predicted
        .iter()
        .zip(observed)
        .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / predicted.len() as f64)
}

/// Batch mean of `‖q₀ − p‖ + λ_o·‖Δo₀‖` for the anchor kernel point.
pub fn alignment_loss(
    anchors: &[[f64; 2]],
    pixels: &[[f64; 2]],
    anchor_origin_offsets: &[[f64; 3]],
    lambda_o: f64,
) -> Result<f64> {
    let n = anchors.len();
    if pixels.len() != n || anchor_origin_offsets.len() != n {
        return Err(Error::invalid("alignment inputs differ in length"));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = anchors
        .iter()
        .zip(pixels)
        .zip(anchor_origin_offsets)
        .map(|((q, p), o)| {
            let dq = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt();
            let d_o = (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt();
            dq + lambda_o * d_o
        })
        .sum();
    Ok(sum / n as f64)
}

pub fn total_loss(rec: f64, align: f64, lambda_a: f64) -> f64 {
    rec + lambda_a * align
}

/// Tape version of `g`: the forward value is exact, the derivative uses
/// `max(c′, 1e-6)`.
pub fn gamma_on_tape<T: Real>(tape: &mut Tape<T>, linear: Var) -> Var {
    tape.pow_floored(linear, T::lit(1.0 / GAMMA), T::lit(GAMMA_GRAD_FLOOR))
}

/// Blends `colors: [B, N, 3]` with `weights: [B, N]`, then applies gamma.
pub fn blend_on_tape<T: Real>(tape: &mut Tape<T>, colors: Var, weights: Var) -> Result<Var, AutodiffError> {
    let s = tape.shape(weights).to_vec();
    let w = tape.reshape(weights, &[s[0], s[1], 1])?;
    let weighted = tape.mul(colors, w)?;
    let mixed = tape.sum_axis(weighted, 1)?;
    let mixed = tape.reshape(mixed, &[s[0], 3])?;
    Ok(gamma_on_tape(tape, mixed))
}

/// Mean over rows of the squared distance between `[B, 3]` tensors.
pub fn reconstruction_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    predicted: Var,
    observed: Var,
) -> Result<Var, AutodiffError> {
    let diff = tape.sub(predicted, observed)?;
    let sq = tape.square(diff);
    let per_ray = tape.sum_axis(sq, 1)?;
    tape.mean(per_ray)
}

/// Batch mean of `‖Δq₀‖ + λ_o‖Δo₀‖` from anchor offsets `[B, 2]`, `[B, 3]`.
pub fn alignment_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    anchor_pixel_offsets: Var,
    anchor_origin_offsets: Var,
    lambda_o: f64,
) -> Result<Var, AutodiffError> {
    let dq = tape.norm_last(anchor_pixel_offsets)?;
    let dq = tape.mean(dq)?;
    let d_o = tape.norm_last(anchor_origin_offsets)?;
    let d_o = tape.mean(d_o)?;
    let d_o = tape.scale(d_o, T::lit(lambda_o));
    tape.add(dq, d_o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gamma_examples() {
        assert_eq!(gamma_correct([0.0, 1.0, 0.0]).unwrap(), [0.0, 1.0, 0.0]);
        let g = gamma_correct([0.21763; 3]).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-5);
        assert!(gamma_correct([-0.1, 0.0, 0.0]).is_err());
    }

    #[test]
    fn blend_examples() {
        let colors = [[0.2, 0.4, 0.6], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.3; 3], [0.9; 3]];
        let b = blend_blurry(&colors, &[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(b, gamma_correct(colors[0]).unwrap());

        let same = [[0.25, 0.5, 0.75]; 3];
        let b = blend_blurry(&same, &[0.2, 0.3, 0.5]).unwrap();
        let g = gamma_correct(same[0]).unwrap();
        for c in 0..3 {
            assert!((b[c] - g[c]).abs() < 1e-12);
        }

        let b = blend_blurry(&[[0.0; 3], [1.0; 3]], &[0.5, 0.5]).unwrap();
        for v in b {
            assert!((v - 0.5f64.powf(1.0 / 2.2)).abs() < 1e-12);
            assert!((v - 0.7297).abs() < 1e-4);
        }

        assert!(blend_blurry(&[[0.0; 3], [1.0; 3]], &[0.5, 0.6]).is_err());
    }

    #[test]
    fn reconstruction_examples() {
        let a = [[0.1, 0.2, 0.3]];
        assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
        let l = reconstruction_loss(&[[0.5; 3]], &[[0.0; 3]]).unwrap();
        assert!((l - 0.75).abs() < 1e-12);
        assert!(reconstruction_loss(&[], &[]).is_err());
    }

    #[test]
    fn alignment_examples() {
        let p = [[10.5, 3.5]];
        assert_eq!(alignment_loss(&p, &p, &[[0.0; 3]], 10.0).unwrap(), 0.0);
        let l = alignment_loss(&[[11.5, 3.5]], &p, &[[0.0; 3]], 10.0).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        let l = alignment_loss(&p, &p, &[[0.0, 0.1, 0.0]], 10.0).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(0.0, 0.0, 0.1), 0.0);
        assert!((total_loss(1.0, 2.0, 0.1) - 1.2).abs() < 1e-12);
        assert_eq!(LossWeights::default().lambda_a, 0.1);
        assert_eq!(LossWeights::default().lambda_o, 10.0);
    }

    #[test]
    fn tape_gamma_is_exact_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(crate::autodiff::Tensor::from_slice([3], &[0.0, 0.21763, 1.0]).unwrap().with_grad());
        let g = gamma_on_tape(&mut tape, x);
        assert_eq!(tape.data(g)[0], 0.0);
        assert!((tape.data(g)[1] - 0.5).abs() < 1e-5);
        let s = tape.sum(g);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|v| v.is_finite()));
    }

    proptest! {
        #[test]
        fn gamma_roundtrip(x in 0.0f64..=1.0) {
            let g = gamma_correct([x; 3]).unwrap()[0];
            prop_assert!((g.powf(GAMMA) - x).abs() < 1e-6);
        }

        #[test]
        fn gamma_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (ga, gb) = (gamma_correct([a; 3]).unwrap()[0], gamma_correct([b; 3]).unwrap()[0]);
            if a < b { prop_assert!(ga < gb); }
        }

        #[test]
        fn reconstruction_zero_iff_equal(
            a in prop::array::uniform3(0.0f64..1.0),
            b in prop::array::uniform3(0.0f64..1.0),
        ) {
            let l = reconstruction_loss(&[a], &[b]).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, a == b);
        }
    }
}

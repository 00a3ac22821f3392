use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const BETA1: f32 = 0.9;
pub const BETA2: f32 = 0.999;
pub const EPS: f32 = 1e-8;

/// First and second moments of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Bias-corrected Adam step for `param`; `step` counts from 1.
pub fn adam_update(
    name: &str,
    param: &mut Tensor<f32>,
    grad: &[f32],
    state: &mut Moments,
    lr: f64,
    step: u64,
) -> Result<()> {
    if grad.len() != param.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::invalid(format!("adam shapes differ for {name}")));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(name.to_string()));
    }
    let t = step as i32;
    let c1 = 1.0 - (BETA1 as f64).powi(t);
    let c2 = 1.0 - (BETA2 as f64).powi(t);
    let step_size = (lr / c1) as f32;
    let c2_sqrt = c2.sqrt() as f32;
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        *p -= step_size * *m / ((*v).sqrt() / c2_sqrt + EPS);
    }
    Ok(())
}

/// One shared optimizer state over a fixed, ordered list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub moments: Vec<Moments>,
}

impl Adam {
    pub fn new(lens: impl IntoIterator<Item = usize>) -> Self {
        Self {
            step: 0,
            moments: lens.into_iter().map(Moments::zeros).collect(),
        }
    }

    /// Updates every tensor. All gradients are checked before any tensor
    /// changes, so a failure leaves parameters and state untouched.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor<f32>)>, grads: &[Vec<f32>], lr: f64) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != params.len() {
            return Err(Error::invalid("optimizer state does not match the parameter list"));
        }
        for ((name, _), g) in params.iter().zip(grads) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        for (((name, p), g), st) in params.into_iter().zip(grads).zip(&mut self.moments) {
            adam_update(&name, p, g, st, lr, self.step)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::from_slice([1], &[0.0f32]).unwrap();
        let mut st = Moments::zeros(1);
        adam_update("p", &mut p, &[1.0], &mut st, 0.1, 1).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn zero_grad_decays_moments_only() {
        let mut p = Tensor::from_slice([2], &[0.5f32, -1.0]).unwrap();
        let mut st = Moments {
            m: vec![0.0, 0.0],
            v: vec![0.0, 0.0],
        };
        adam_update("p", &mut p, &[0.0, 0.0], &mut st, 0.1, 1).unwrap();
        assert_eq!(p.data(), &[0.5, -1.0]);
        let mut st = Moments {
            m: vec![1.0, 1.0],
            v: vec![1.0, 1.0],
        };
        let mut q = p.clone();
        adam_update("q", &mut q, &[0.0, 0.0], &mut st, 0.0, 3).unwrap();
        assert_eq!(q.data(), p.data());
        assert!((st.m[0] - 0.9).abs() < 1e-7 && (st.v[0] - 0.999).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradient_names_tensor_and_changes_nothing() {
        let mut a = Tensor::from_slice([1], &[1.0f32]).unwrap();
        let mut b = Tensor::from_slice([1], &[2.0f32]).unwrap();
        let mut adam = Adam::new([1, 1]);
        let err = adam
            .step(
                vec![("a".into(), &mut a), ("field.rgb.bias".into(), &mut b)],
                &[vec![1.0], vec![f32::NAN]],
                0.1,
            )
            .unwrap_err();
        assert!(err.to_string().contains("field.rgb.bias"));
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = Tensor::from_slice([3], &[0.1f32, 0.2, 0.3]).unwrap();
            let mut adam = Adam::new([3]);
            for i in 0..50 {
                let g: Vec<f32> = p.data().iter().map(|v| (v * i as f32).sin()).collect();
                adam.step(vec![("p".into(), &mut p)], &[g], 1e-2).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}

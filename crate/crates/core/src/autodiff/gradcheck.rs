use super::{AutodiffError, Real, Tape, Tensor, Var};

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error<T: Real>(analytic: T, numeric: T) -> T {
    let denom = analytic.abs().max(numeric.abs()).max(T::lit(1e-8));
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of a scalar function against central
/// differences with the given `step`, returning the worst relative error
/// over all coordinates of `point`.
///
/// `f` receives a fresh tape and the leaf holding the input and must
/// return a scalar.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, step: T) -> Result<T, AutodiffError>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var, AutodiffError>,
{
    if !(step > T::zero()) {
        return Err(AutodiffError::InvalidArgument {
            op: "grad_check",
            msg: "step must be positive".into(),
        });
    }
    let eval = |x: Tensor<T>| -> Result<T, AutodiffError> {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let out = f(&mut tape, v)?;
        let y = tape.value(out);
        if y.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(y.shape().to_vec()));
        }
        let y = y.item();
        if !y.is_finite() {
            return Err(AutodiffError::NonFinite("grad_check objective".into()));
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let x = tape.var(point.clone().with_grad());
    let out = f(&mut tape, x)?;
    if !tape.value(out).is_finite() {
        return Err(AutodiffError::NonFinite("grad_check objective".into()));
    }
    tape.backward(out)?;
    let analytic = match tape.grad(x) {
        Some(g) => g.to_vec(),
        None => vec![T::zero(); point.len()],
    };
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(AutodiffError::NonFinite("analytic gradient".into()));
    }

    let two = T::lit(2.0);
    let mut worst = T::zero();
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[i] = plus.data()[i] + step;
        let mut minus = point.clone();
        minus.data_mut()[i] = minus.data()[i] - step;
        let numeric = (eval(plus)? - eval(minus)?) / (two * step);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_point(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new([n], data).unwrap()
    }

    #[test]
    fn sum_of_squares() {
        let err = grad_check(
            |t, x| {
                let y = t.square(x);
                Ok(t.sum(y))
            },
            &random_point(16, 1),
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn sum_of_sines() {
        let err = grad_check(
            |t, x| {
                let y = t.sin(x);
                Ok(t.sum(y))
            },
            &random_point(16, 2),
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_exact_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(random_point(4, 3).with_grad());
        let c = tape.constant(Tensor::scalar(5.0));
        let zero = tape.scale(x, 0.0);
        let s = tape.sum(zero);
        let y = tape.add(s, c).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));
        let err = grad_check(|t, x| {
            let z = t.scale(x, 0.0);
            Ok(t.sum(z))
        }, &random_point(4, 3), 1e-3)
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let r = grad_check(
            |t, x| {
                let y = t.scale(x, 1e300);
                let y = t.exp(y);
                Ok(t.sum(y))
            },
            &Tensor::new([1], vec![1.0]).unwrap(),
            1e-3,
        );
        assert!(matches!(r, Err(AutodiffError::NonFinite(_))));
    }

    #[test]
    fn rejects_bad_step() {
        let r = grad_check(|t, x| Ok(t.sum(x)), &random_point(2, 0), 0.0);
        assert!(r.is_err());
    }
}

//! Central finite-difference verification of analytic gradients. Blocks wrap
//! a model together with a fixed input and loss so the whole stack is checked
//! end to end, normally instantiated at f64.

use super::NnError;
use crate::rng::{rng_from, uniform_usize};
use crate::scalar::Scalar;

/// A differentiable block: flattened parameter access plus loss-and-gradient
/// at the current parameters. The gradient vector aligns with `params_flat`.
pub trait GradCheckable<F: Scalar> {
    fn params_flat(&mut self) -> Vec<F>;
    fn set_params_flat(&mut self, flat: &[F]);
    fn loss_and_grad(&mut self) -> Result<(F, Vec<F>), NnError>;
}

/// Maximum relative error between analytic and central-difference gradients,
/// over every parameter, or a seeded subset of 5000 for larger blocks.
pub fn gradient_check<F: Scalar>(
    block: &mut dyn GradCheckable<F>,
    eps: f64,
    seed: u64,
) -> Result<f64, NnError> {
    let (loss0, grad) = block.loss_and_grad()?;
    if !loss0.is_finite() {
        return Err(NnError::NonFiniteLoss);
    }
    let base = block.params_flat();
    let n = base.len();
    if n == 0 {
        return Ok(0.0);
    }
    let indices: Vec<usize> = if n > 5000 {
        let mut rng = rng_from(seed);
        (0..5000).map(|_| uniform_usize(&mut rng, n)).collect()
    } else {
        (0..n).collect()
    };
    let mut max_rel = 0.0f64;
    let mut work = base.clone();
    for &i in &indices {
        work[i] = base[i] + F::from_f64(eps);
        block.set_params_flat(&work);
        let (lp, _) = block.loss_and_grad()?;
        work[i] = base[i] - F::from_f64(eps);
        block.set_params_flat(&work);
        let (lm, _) = block.loss_and_grad()?;
        work[i] = base[i];
        if !lp.is_finite() || !lm.is_finite() {
            return Err(NnError::NonFiniteLoss);
        }
        let numeric = (lp.as_f64() - lm.as_f64()) / (2.0 * eps);
        let analytic = grad[i].as_f64();
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    block.set_params_flat(&base);
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::Mat;
    use crate::nn::{flatten_grads, flatten_values, load_values, zero_grads, Linear};
    use crate::rng::rng_from;

    /// Affine layer plus squared error against a fixed target.
    struct AffineSq {
        lin: Linear<f64>,
        x: Mat<f64>,
        target: Mat<f64>,
    }

    impl GradCheckable<f64> for AffineSq {
        fn params_flat(&mut self) -> Vec<f64> {
            let mut p = Vec::new();
            self.lin.collect_params("lin", &mut p);
            flatten_values(&p)
        }
        fn set_params_flat(&mut self, flat: &[f64]) {
            let mut p = Vec::new();
            self.lin.collect_params("lin", &mut p);
            load_values(&mut p, flat);
        }
        fn loss_and_grad(&mut self) -> Result<(f64, Vec<f64>), NnError> {
            let mut p = Vec::new();
            self.lin.collect_params("lin", &mut p);
            zero_grads(&mut p);
            drop(p);
            let y = self.lin.forward(&self.x);
            let mut loss = 0.0;
            let mut dy = Mat::zeros(y.rows(), y.cols());
            for i in 0..y.data().len() {
                let d = y.data()[i] - self.target.data()[i];
                loss += d * d;
                dy.data_mut()[i] = 2.0 * d;
            }
            self.lin.backward(&self.x, &dy);
            let mut p = Vec::new();
            self.lin.collect_params("lin", &mut p);
            Ok((loss, flatten_grads(&p)))
        }
    }

    #[test]
    fn affine_squared_error_passes() {
        let mut rng = rng_from(41);
        let block = &mut AffineSq {
            lin: Linear::new(3, 2, &mut rng),
            x: Mat::from_fn(4, 3, |r, c| ((r * 3 + c) as f64 * 0.3).sin()),
            target: Mat::from_fn(4, 2, |r, c| ((r + c) as f64 * 0.7).cos()),
        };
        let max_rel = gradient_check(block, 1e-5, 0).unwrap();
        assert!(max_rel < 1e-6, "max relative error {max_rel}");
    }

    /// Zero-parameter block: vacuous pass.
    struct NoParams;
    impl GradCheckable<f64> for NoParams {
        fn params_flat(&mut self) -> Vec<f64> {
            Vec::new()
        }
        fn set_params_flat(&mut self, _: &[f64]) {}
        fn loss_and_grad(&mut self) -> Result<(f64, Vec<f64>), NnError> {
            Ok((1.0, Vec::new()))
        }
    }

    #[test]
    fn zero_parameter_block_is_vacuous() {
        assert_eq!(gradient_check(&mut NoParams, 1e-5, 0).unwrap(), 0.0);
    }

    struct BadLoss;
    impl GradCheckable<f64> for BadLoss {
        fn params_flat(&mut self) -> Vec<f64> {
            vec![0.0]
        }
        fn set_params_flat(&mut self, _: &[f64]) {}
        fn loss_and_grad(&mut self) -> Result<(f64, Vec<f64>), NnError> {
            Ok((f64::NAN, vec![0.0]))
        }
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        assert!(matches!(
            gradient_check(&mut BadLoss, 1e-5, 0),
            Err(NnError::NonFiniteLoss)
        ));
    }
}

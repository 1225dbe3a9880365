//! Per-channel normalization over the frames of one sequence, with learned
//! gain and bias. The batch dimension here is the utterance's own time axis,
//! which keeps training and inference statistics identical.

use super::ParamRef;
use crate::mat::Mat;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct SeqNorm<F: Scalar> {
    gamma: Mat<F>, // [1, ch]
    beta: Mat<F>,
    dgamma: Mat<F>,
    dbeta: Mat<F>,
    eps: f64,
}

pub struct NormCache<F: Scalar> {
    xhat: Mat<F>,
    inv_std: Vec<F>,
}

impl<F: Scalar> SeqNorm<F> {
    pub fn new(channels: usize) -> Self {
        SeqNorm {
            gamma: Mat::from_fn(1, channels, |_, _| F::one()),
            beta: Mat::zeros(1, channels),
            dgamma: Mat::zeros(1, channels),
            dbeta: Mat::zeros(1, channels),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Mat<F>) -> (Mat<F>, NormCache<F>) {
        let t = x.rows();
        let ch = x.cols();
        let mut xhat = Mat::zeros(t, ch);
        let mut inv_std = vec![F::one(); ch];
        if t == 0 {
            return (
                Mat::zeros(0, ch),
                NormCache { xhat, inv_std },
            );
        }
        let n = F::from_usize(t);
        for c in 0..ch {
            let mut mean = F::zero();
            for r in 0..t {
                mean += x.get(r, c);
            }
            mean = mean / n;
            let mut var = F::zero();
            for r in 0..t {
                let d = x.get(r, c) - mean;
                var += d * d;
            }
            var = var / n;
            let istd = F::one() / (var + F::from_f64(self.eps)).sqrt();
            inv_std[c] = istd;
            for r in 0..t {
                xhat.set(r, c, (x.get(r, c) - mean) * istd);
            }
        }
        let mut y = Mat::zeros(t, ch);
        for r in 0..t {
            for c in 0..ch {
                y.set(r, c, self.gamma.get(0, c) * xhat.get(r, c) + self.beta.get(0, c));
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &NormCache<F>, dy: &Mat<F>) -> Mat<F> {
        let t = dy.rows();
        let ch = dy.cols();
        let mut dx = Mat::zeros(t, ch);
        if t == 0 {
            return dx;
        }
        let n = F::from_usize(t);
        for c in 0..ch {
            let mut sum_dy = F::zero();
            let mut sum_dy_xhat = F::zero();
            for r in 0..t {
                sum_dy += dy.get(r, c);
                sum_dy_xhat += dy.get(r, c) * cache.xhat.get(r, c);
            }
            self.dgamma.row_mut(0)[c] += sum_dy_xhat;
            self.dbeta.row_mut(0)[c] += sum_dy;
            let g = self.gamma.get(0, c);
            let istd = cache.inv_std[c];
            for r in 0..t {
                let term = n * dy.get(r, c) - sum_dy - cache.xhat.get(r, c) * sum_dy_xhat;
                dx.set(r, c, g * istd / n * term);
            }
        }
        dx
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a, F>>) {
        out.push(ParamRef::new(
            format!("{prefix}.gamma"),
            &mut self.gamma,
            &mut self.dgamma,
        ));
        out.push(ParamRef::new(
            format!("{prefix}.beta"),
            &mut self.beta,
            &mut self.dbeta,
        ));
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Mat<F>)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_each_channel() {
        let norm = SeqNorm::<f64>::new(2);
        let x = Mat::from_rows(&[vec![1.0, 10.0], vec![2.0, 20.0], vec![3.0, 30.0]]);
        let (y, _) = norm.forward(&x);
        for c in 0..2 {
            let mean: f64 = (0..3).map(|r| y.get(r, c)).sum::<f64>() / 3.0;
            let var: f64 = (0..3).map(|r| (y.get(r, c) - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut norm = SeqNorm::<f64>::new(2);
        norm.gamma = Mat::from_rows(&[vec![1.3, 0.7]]);
        norm.beta = Mat::from_rows(&[vec![0.1, -0.2]]);
        let x = Mat::from_fn(4, 2, |r, c| ((r * 2 + c) as f64 * 0.39).sin());
        let dy = Mat::from_fn(4, 2, |r, c| ((r + c) as f64 * 0.17).cos());
        let (_, cache) = norm.forward(&x);
        let dx = norm.backward(&cache, &dy);
        let loss = |n: &SeqNorm<f64>, x: &Mat<f64>| -> f64 {
            n.forward(x).0.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let num = (loss(&norm, &xp) - loss(&norm, &xm)) / (2.0 * eps);
            assert!((num - dx.data()[i]).abs() < 1e-5, "dx[{i}]: {num} vs {}", dx.data()[i]);
        }
    }

    #[test]
    fn single_frame_and_empty_are_safe() {
        let norm = SeqNorm::<f64>::new(3);
        let one = Mat::from_rows(&[vec![5.0, -2.0, 0.0]]);
        let (y, cache) = norm.forward(&one);
        assert!(y.all_finite());
        let mut norm2 = norm.clone();
        let dx = norm2.backward(&cache, &Mat::from_rows(&[vec![1.0, 1.0, 1.0]]));
        assert!(dx.all_finite());
        let empty = Mat::<f64>::zeros(0, 3);
        assert_eq!(norm.forward(&empty).0.rows(), 0);
    }
}

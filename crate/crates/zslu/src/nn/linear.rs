//! Affine layer applied per frame.

use rand_chacha::rand_core::Rng as RngCore;

use super::{init_uniform, ParamRef};
use crate::mat::{addmv, addmv_t, axpy, dot, outer_acc, Mat};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Linear<F: Scalar> {
    pub w: Mat<F>, // [out, in]
    pub b: Mat<F>, // [1, out]
    pub dw: Mat<F>,
    pub db: Mat<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new<R: RngCore>(input: usize, output: usize, rng: &mut R) -> Self {
        Linear {
            w: init_uniform(rng, output, input, input),
            b: init_uniform(rng, 1, output, input),
            dw: Mat::zeros(output, input),
            db: Mat::zeros(1, output),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn forward(&self, x: &Mat<F>) -> Mat<F> {
        debug_assert_eq!(x.cols(), self.in_dim());
        let mut y = Mat::zeros(x.rows(), self.out_dim());
        for t in 0..x.rows() {
            let row = y.row_mut(t);
            row.copy_from_slice(self.b.row(0));
            addmv(row, &self.w, x.row(t));
        }
        y
    }

    pub fn forward_frame(&self, x: &[F], out: &mut [F]) {
        out.copy_from_slice(self.b.row(0));
        addmv(out, &self.w, x);
    }

    /// Accumulates dw/db and returns dx.
    pub fn backward(&mut self, x: &Mat<F>, dy: &Mat<F>) -> Mat<F> {
        debug_assert_eq!(dy.cols(), self.out_dim());
        debug_assert_eq!(x.rows(), dy.rows());
        let mut dx = Mat::zeros(x.rows(), self.in_dim());
        for t in 0..x.rows() {
            let dyt = dy.row(t);
            outer_acc(&mut self.dw, dyt, x.row(t));
            axpy(F::one(), dyt, self.db.row_mut(0));
            addmv_t(dx.row_mut(t), &self.w, dyt);
        }
        dx
    }

    pub fn backward_frame(&mut self, x: &[F], dy: &[F], dx: &mut [F]) {
        outer_acc(&mut self.dw, dy, x);
        axpy(F::one(), dy, self.db.row_mut(0));
        addmv_t(dx, &self.w, dy);
    }

    /// Forward for a single frame, returning a scalar head value.
    pub fn forward_scalar(&self, x: &[F]) -> F {
        debug_assert_eq!(self.out_dim(), 1);
        self.b.get(0, 0) + dot(self.w.row(0), x)
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a, F>>) {
        out.push(ParamRef::new(format!("{prefix}.w"), &mut self.w, &mut self.dw));
        out.push(ParamRef::new(format!("{prefix}.b"), &mut self.b, &mut self.db));
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Mat<F>)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rng_from(3);
        let mut lin = Linear::<f64>::new(3, 2, &mut rng);
        let x = Mat::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.25, -0.75]]);
        // Loss = sum of outputs; dy = ones.
        let dy = Mat::from_fn(2, 2, |_, _| 1.0);
        let dx = lin.backward(&x, &dy);
        let loss = |l: &Linear<f64>, x: &Mat<f64>| -> f64 { l.forward(x).data().iter().sum() };
        let eps = 1e-6;
        for i in 0..lin.w.data().len() {
            let orig = lin.w.data()[i];
            lin.w.data_mut()[i] = orig + eps;
            let lp = loss(&lin, &x);
            lin.w.data_mut()[i] = orig - eps;
            let lm = loss(&lin, &x);
            lin.w.data_mut()[i] = orig;
            assert!(((lp - lm) / (2.0 * eps) - lin.dw.data()[i]).abs() < 1e-6);
        }
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let num = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * eps);
            assert!((num - dx.data()[i]).abs() < 1e-6);
        }
    }
}

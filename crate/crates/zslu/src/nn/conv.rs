//! 1-D convolution over the time axis with centered zero padding, so the
//! output length is ceil(T / stride) regardless of kernel size.

use rand_chacha::rand_core::Rng as RngCore;

use super::{init_uniform, ParamRef};
use crate::mat::{addmv, addmv_t, axpy, outer_acc, Mat};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Conv1d<F: Scalar> {
    w: Mat<F>, // [out_ch, kernel * in_ch]
    b: Mat<F>, // [1, out_ch]
    dw: Mat<F>,
    db: Mat<F>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    bias: bool,
}

impl<F: Scalar> Conv1d<F> {
    pub fn new<R: RngCore>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self::build(in_ch, out_ch, kernel, stride, true, rng)
    }

    /// Bias-free variant for convolutions feeding a normalization layer,
    /// where a constant channel shift is a null direction.
    pub fn new_no_bias<R: RngCore>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self::build(in_ch, out_ch, kernel, stride, false, rng)
    }

    fn build<R: RngCore>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd for centered padding");
        assert!(stride >= 1);
        let fan_in = kernel * in_ch;
        Conv1d {
            w: init_uniform(rng, out_ch, fan_in, fan_in),
            b: if bias {
                init_uniform(rng, 1, out_ch, fan_in)
            } else {
                Mat::zeros(1, out_ch)
            },
            dw: Mat::zeros(out_ch, fan_in),
            db: Mat::zeros(1, out_ch),
            in_ch,
            out_ch,
            kernel,
            stride,
            bias,
        }
    }

    pub fn in_ch(&self) -> usize {
        self.in_ch
    }

    pub fn out_ch(&self) -> usize {
        self.out_ch
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn out_len(&self, t: usize) -> usize {
        t.div_ceil(self.stride)
    }

    fn pad(&self) -> isize {
        ((self.kernel - 1) / 2) as isize
    }

    fn gather(&self, x: &Mat<F>, tp: usize, scratch: &mut [F]) {
        scratch.iter_mut().for_each(|v| *v = F::zero());
        let start = (tp * self.stride) as isize - self.pad();
        for k in 0..self.kernel {
            let t = start + k as isize;
            if t >= 0 && (t as usize) < x.rows() {
                scratch[k * self.in_ch..(k + 1) * self.in_ch].copy_from_slice(x.row(t as usize));
            }
        }
    }

    pub fn forward(&self, x: &Mat<F>) -> Mat<F> {
        debug_assert_eq!(x.cols(), self.in_ch);
        let t_out = self.out_len(x.rows());
        let mut y = Mat::zeros(t_out, self.out_ch);
        let mut scratch = vec![F::zero(); self.kernel * self.in_ch];
        for tp in 0..t_out {
            self.gather(x, tp, &mut scratch);
            let row = y.row_mut(tp);
            row.copy_from_slice(self.b.row(0));
            addmv(row, &self.w, &scratch);
        }
        y
    }

    pub fn backward(&mut self, x: &Mat<F>, dy: &Mat<F>) -> Mat<F> {
        debug_assert_eq!(dy.cols(), self.out_ch);
        debug_assert_eq!(dy.rows(), self.out_len(x.rows()));
        let mut dx = Mat::zeros(x.rows(), self.in_ch);
        let mut scratch = vec![F::zero(); self.kernel * self.in_ch];
        let mut dscratch = vec![F::zero(); self.kernel * self.in_ch];
        for tp in 0..dy.rows() {
            let dyt = dy.row(tp);
            self.gather(x, tp, &mut scratch);
            outer_acc(&mut self.dw, dyt, &scratch);
            axpy(F::one(), dyt, self.db.row_mut(0));
            dscratch.iter_mut().for_each(|v| *v = F::zero());
            addmv_t(&mut dscratch, &self.w, dyt);
            let start = (tp * self.stride) as isize - self.pad();
            for k in 0..self.kernel {
                let t = start + k as isize;
                if t >= 0 && (t as usize) < x.rows() {
                    axpy(
                        F::one(),
                        &dscratch[k * self.in_ch..(k + 1) * self.in_ch],
                        dx.row_mut(t as usize),
                    );
                }
            }
        }
        dx
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a, F>>) {
        out.push(ParamRef::new(format!("{prefix}.w"), &mut self.w, &mut self.dw));
        if self.bias {
            out.push(ParamRef::new(format!("{prefix}.b"), &mut self.b, &mut self.db));
        }
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Mat<F>)) {
        f(&format!("{prefix}.w"), &self.w);
        if self.bias {
            f(&format!("{prefix}.b"), &self.b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn output_length_is_ceil_t_over_stride() {
        let mut rng = rng_from(5);
        let conv = Conv1d::<f64>::new(2, 3, 5, 2, &mut rng);
        for t in 1..50 {
            let x = Mat::from_fn(t, 2, |r, c| (r + c) as f64 * 0.1);
            assert_eq!(conv.forward(&x).rows(), t.div_ceil(2), "T={t}");
        }
        let empty = Mat::<f64>::zeros(0, 2);
        assert_eq!(conv.forward(&empty).rows(), 0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rng_from(6);
        let mut conv = Conv1d::<f64>::new(2, 3, 3, 2, &mut rng);
        let x = Mat::from_fn(5, 2, |r, c| ((r * 2 + c) as f64 * 0.37).sin());
        let y = conv.forward(&x);
        let dy = Mat::from_fn(y.rows(), y.cols(), |r, c| ((r + c) as f64 * 0.21).cos());
        let dx = conv.backward(&x, &dy);
        let loss = |c: &Conv1d<f64>, x: &Mat<f64>| -> f64 {
            c.forward(x)
                .data()
                .iter()
                .zip(dy.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let eps = 1e-6;
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let num = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps);
            assert!((num - dx.data()[i]).abs() < 1e-6, "dx[{i}]");
        }
        for i in 0..conv.w.data().len() {
            let orig = conv.w.data()[i];
            conv.w.data_mut()[i] = orig + eps;
            let lp = loss(&conv, &x);
            conv.w.data_mut()[i] = orig - eps;
            let lm = loss(&conv, &x);
            conv.w.data_mut()[i] = orig;
            assert!(((lp - lm) / (2.0 * eps) - conv.dw.data()[i]).abs() < 1e-6, "dw[{i}]");
        }
    }
}

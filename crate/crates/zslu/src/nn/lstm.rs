//! LSTM and BiLSTM layers with full backpropagation through time. Gates are
//! packed i, f, g, o into one pre-activation vector per step.

use rand_chacha::rand_core::Rng as RngCore;

use super::activation::sigmoid;
use super::{init_uniform, ParamRef};
use crate::mat::{addmv, addmv_t, axpy, outer_acc, Mat};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Lstm<F: Scalar> {
    wx: Mat<F>, // [4h, in]
    wh: Mat<F>, // [4h, h]
    b: Mat<F>,  // [1, 4h]
    dwx: Mat<F>,
    dwh: Mat<F>,
    db: Mat<F>,
    hidden: usize,
}

/// Per-step state kept from the forward pass for BPTT.
pub struct LstmCache<F: Scalar> {
    gates: Mat<F>,  // [T, 4h] post-activation
    cells: Mat<F>,  // [T, h]
    tanh_c: Mat<F>, // [T, h]
    hs: Mat<F>,     // [T, h]
}

impl<F: Scalar> LstmCache<F> {
    pub fn outputs(&self) -> &Mat<F> {
        &self.hs
    }
}

/// State produced by one decoding step.
pub struct LstmStep<F: Scalar> {
    gates: Vec<F>,
    pub c: Vec<F>,
    tanh_c: Vec<F>,
    pub h: Vec<F>,
}

impl<F: Scalar> Lstm<F> {
    pub fn new<R: RngCore>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut b = init_uniform(rng, 1, 4 * hidden, input + hidden);
        // Forget-gate bias starts at one.
        for c in hidden..2 * hidden {
            b.set(0, c, F::one());
        }
        Lstm {
            wx: init_uniform(rng, 4 * hidden, input, input + hidden),
            wh: init_uniform(rng, 4 * hidden, hidden, input + hidden),
            b,
            dwx: Mat::zeros(4 * hidden, input),
            dwh: Mat::zeros(4 * hidden, hidden),
            db: Mat::zeros(1, 4 * hidden),
            hidden,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn in_dim(&self) -> usize {
        self.wx.cols()
    }

    pub fn forward(&self, x: &Mat<F>) -> (Mat<F>, LstmCache<F>) {
        let t_len = x.rows();
        let h = self.hidden;
        let mut cache = LstmCache {
            gates: Mat::zeros(t_len, 4 * h),
            cells: Mat::zeros(t_len, h),
            tanh_c: Mat::zeros(t_len, h),
            hs: Mat::zeros(t_len, h),
        };
        let mut h_prev = vec![F::zero(); h];
        let mut c_prev = vec![F::zero(); h];
        let mut z = vec![F::zero(); 4 * h];
        for t in 0..t_len {
            z.copy_from_slice(self.b.row(0));
            addmv(&mut z, &self.wx, x.row(t));
            addmv(&mut z, &self.wh, &h_prev);
            let gates = cache.gates.row_mut(t);
            for j in 0..h {
                gates[j] = sigmoid(z[j]); // input gate
                gates[h + j] = sigmoid(z[h + j]); // forget gate
                gates[2 * h + j] = z[2 * h + j].tanh(); // candidate
                gates[3 * h + j] = sigmoid(z[3 * h + j]); // output gate
            }
            for j in 0..h {
                let c = gates[h + j] * c_prev[j] + gates[j] * gates[2 * h + j];
                let tc = c.tanh();
                cache.cells.set(t, j, c);
                cache.tanh_c.set(t, j, tc);
                let hv = gates[3 * h + j] * tc;
                cache.hs.set(t, j, hv);
                c_prev[j] = c;
                h_prev[j] = hv;
            }
        }
        (cache.hs.clone(), cache)
    }

    /// One recurrence step for autoregressive decoding.
    pub fn step(&self, x: &[F], h_prev: &[F], c_prev: &[F]) -> LstmStep<F> {
        let h = self.hidden;
        let mut z = vec![F::zero(); 4 * h];
        z.copy_from_slice(self.b.row(0));
        addmv(&mut z, &self.wx, x);
        addmv(&mut z, &self.wh, h_prev);
        let mut gates = z;
        for j in 0..h {
            gates[j] = sigmoid(gates[j]);
            gates[h + j] = sigmoid(gates[h + j]);
            gates[2 * h + j] = gates[2 * h + j].tanh();
            gates[3 * h + j] = sigmoid(gates[3 * h + j]);
        }
        let mut c = vec![F::zero(); h];
        let mut tanh_c = vec![F::zero(); h];
        let mut out = vec![F::zero(); h];
        for j in 0..h {
            c[j] = gates[h + j] * c_prev[j] + gates[j] * gates[2 * h + j];
            tanh_c[j] = c[j].tanh();
            out[j] = gates[3 * h + j] * tanh_c[j];
        }
        LstmStep {
            gates,
            c,
            tanh_c,
            h: out,
        }
    }

    /// Backward for one step: `dh` is the total gradient into this step's
    /// output, `dc` the incoming cell gradient from the future. Accumulates
    /// weight gradients; adds into dx/dh_prev/dc_prev.
    #[allow(clippy::too_many_arguments)]
    pub fn step_backward(
        &mut self,
        x: &[F],
        h_prev: &[F],
        c_prev: &[F],
        step: &LstmStep<F>,
        dh: &[F],
        dc_in: &[F],
        dx: &mut [F],
        dh_prev: &mut [F],
        dc_prev: &mut [F],
    ) {
        let h = self.hidden;
        let mut dz = vec![F::zero(); 4 * h];
        for j in 0..h {
            let i = step.gates[j];
            let f = step.gates[h + j];
            let g = step.gates[2 * h + j];
            let o = step.gates[3 * h + j];
            let tc = step.tanh_c[j];
            let dc = dc_in[j] + dh[j] * o * (F::one() - tc * tc);
            dz[j] = dc * g * i * (F::one() - i);
            dz[h + j] = dc * c_prev[j] * f * (F::one() - f);
            dz[2 * h + j] = dc * i * (F::one() - g * g);
            dz[3 * h + j] = dh[j] * tc * o * (F::one() - o);
            dc_prev[j] += dc * f;
        }
        outer_acc(&mut self.dwx, &dz, x);
        outer_acc(&mut self.dwh, &dz, h_prev);
        axpy(F::one(), &dz, self.db.row_mut(0));
        addmv_t(dx, &self.wx, &dz);
        addmv_t(dh_prev, &self.wh, &dz);
    }

    /// BPTT; accumulates weight gradients and returns dx.
    pub fn backward(&mut self, x: &Mat<F>, cache: &LstmCache<F>, dh_out: &Mat<F>) -> Mat<F> {
        let t_len = x.rows();
        let h = self.hidden;
        let mut dx = Mat::zeros(t_len, self.in_dim());
        let mut dh_next = vec![F::zero(); h];
        let mut dc_next = vec![F::zero(); h];
        let mut dz = vec![F::zero(); 4 * h];
        for t in (0..t_len).rev() {
            let gates = cache.gates.row(t);
            for j in 0..h {
                let i = gates[j];
                let f = gates[h + j];
                let g = gates[2 * h + j];
                let o = gates[3 * h + j];
                let tc = cache.tanh_c.get(t, j);
                let dh = dh_out.get(t, j) + dh_next[j];
                let dc = dc_next[j] + dh * o * (F::one() - tc * tc);
                let c_prev = if t > 0 { cache.cells.get(t - 1, j) } else { F::zero() };
                dz[j] = dc * g * i * (F::one() - i);
                dz[h + j] = dc * c_prev * f * (F::one() - f);
                dz[2 * h + j] = dc * i * (F::one() - g * g);
                dz[3 * h + j] = dh * tc * o * (F::one() - o);
                dc_next[j] = dc * f;
            }
            outer_acc(&mut self.dwx, &dz, x.row(t));
            if t > 0 {
                outer_acc(&mut self.dwh, &dz, cache.hs.row(t - 1));
            }
            axpy(F::one(), &dz, self.db.row_mut(0));
            addmv_t(dx.row_mut(t), &self.wx, &dz);
            dh_next.iter_mut().for_each(|v| *v = F::zero());
            addmv_t(&mut dh_next, &self.wh, &dz);
        }
        dx
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a, F>>) {
        out.push(ParamRef::new(format!("{prefix}.wx"), &mut self.wx, &mut self.dwx));
        out.push(ParamRef::new(format!("{prefix}.wh"), &mut self.wh, &mut self.dwh));
        out.push(ParamRef::new(format!("{prefix}.b"), &mut self.b, &mut self.db));
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Mat<F>)) {
        f(&format!("{prefix}.wx"), &self.wx);
        f(&format!("{prefix}.wh"), &self.wh);
        f(&format!("{prefix}.b"), &self.b);
    }
}

/// Forward and reversed LSTM over the same input, outputs concatenated.
#[derive(Debug, Clone)]
pub struct BiLstm<F: Scalar> {
    fwd: Lstm<F>,
    bwd: Lstm<F>,
}

pub struct BiLstmCache<F: Scalar> {
    fwd: LstmCache<F>,
    bwd: LstmCache<F>,
    x_rev: Mat<F>,
}

impl<F: Scalar> BiLstm<F> {
    pub fn new<R: RngCore>(input: usize, hidden: usize, rng: &mut R) -> Self {
        BiLstm {
            fwd: Lstm::new(input, hidden, rng),
            bwd: Lstm::new(input, hidden, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        2 * self.fwd.hidden()
    }

    pub fn in_dim(&self) -> usize {
        self.fwd.in_dim()
    }

    pub fn forward(&self, x: &Mat<F>) -> (Mat<F>, BiLstmCache<F>) {
        let x_rev = x.reversed_rows();
        let (hf, cf) = self.fwd.forward(x);
        let (hb, cb) = self.bwd.forward(&x_rev);
        let y = hf.hcat(&hb.reversed_rows());
        (
            y,
            BiLstmCache {
                fwd: cf,
                bwd: cb,
                x_rev,
            },
        )
    }

    pub fn backward(&mut self, x: &Mat<F>, cache: &BiLstmCache<F>, dy: &Mat<F>) -> Mat<F> {
        let h = self.fwd.hidden();
        let t_len = x.rows();
        let mut d_fwd = Mat::zeros(t_len, h);
        let mut d_bwd_rev = Mat::zeros(t_len, h);
        for t in 0..t_len {
            d_fwd.row_mut(t).copy_from_slice(&dy.row(t)[..h]);
            d_bwd_rev
                .row_mut(t_len - 1 - t)
                .copy_from_slice(&dy.row(t)[h..]);
        }
        let dx_f = self.fwd.backward(x, &cache.fwd, &d_fwd);
        let dx_b_rev = self.bwd.backward(&cache.x_rev, &cache.bwd, &d_bwd_rev);
        let dx_b = dx_b_rev.reversed_rows();
        let mut dx = dx_f;
        for t in 0..t_len {
            axpy(F::one(), dx_b.row(t), dx.row_mut(t));
        }
        dx
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a, F>>) {
        self.fwd.collect_params(&format!("{prefix}.fwd"), out);
        self.bwd.collect_params(&format!("{prefix}.bwd"), out);
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Mat<F>)) {
        self.fwd.visit_params(&format!("{prefix}.fwd"), f);
        self.bwd.visit_params(&format!("{prefix}.bwd"), f);
    }
}

//! Content-based attention: score(q, k_j) = v · tanh(Wq q + Wk k_j + b),
//! weights softmax-normalized over the encoded positions, context the
//! weighted sum of encoder outputs.

use rand_chacha::rand_core::Rng as RngCore;

use super::{init_uniform, ParamRef};
use crate::mat::{addmv, addmv_t, axpy, dot, outer_acc, Mat};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct ContentAttention<F: Scalar> {
    wq: Mat<F>, // [attn, q_dim]
    wk: Mat<F>, // [attn, enc_dim]
    bk: Mat<F>, // [1, attn]
    v: Mat<F>,  // [1, attn]
    dwq: Mat<F>,
    dwk: Mat<F>,
    dbk: Mat<F>,
    dv: Mat<F>,
}

/// Projected encoder keys, computed once per utterance.
pub struct AttnKeys<F: Scalar> {
    keys: Mat<F>, // [M, attn]
}

/// Cache for one decode step.
pub struct AttnStep<F: Scalar> {
    pub ctx: Vec<F>,   // [enc_dim]
    pub alpha: Vec<F>, // [M], non-negative, sums to one
    scores_u: Mat<F>,  // [M, attn] tanh activations
}

impl<F: Scalar> ContentAttention<F> {
    pub fn new<R: RngCore>(q_dim: usize, enc_dim: usize, attn_dim: usize, rng: &mut R) -> Self {
        ContentAttention {
            wq: init_uniform(rng, attn_dim, q_dim, q_dim),
            wk: init_uniform(rng, attn_dim, enc_dim, enc_dim),
            bk: init_uniform(rng, 1, attn_dim, enc_dim),
            v: init_uniform(rng, 1, attn_dim, attn_dim),
            dwq: Mat::zeros(attn_dim, q_dim),
            dwk: Mat::zeros(attn_dim, enc_dim),
            dbk: Mat::zeros(1, attn_dim),
            dv: Mat::zeros(1, attn_dim),
        }
    }

    pub fn attn_dim(&self) -> usize {
        self.v.cols()
    }

    pub fn project_keys(&self, enc: &Mat<F>) -> AttnKeys<F> {
        let mut keys = Mat::zeros(enc.rows(), self.attn_dim());
        for j in 0..enc.rows() {
            let row = keys.row_mut(j);
            row.copy_from_slice(self.bk.row(0));
            addmv(row, &self.wk, enc.row(j));
        }
        AttnKeys { keys }
    }

    pub fn forward_step(&self, query: &[F], keys: &AttnKeys<F>, enc: &Mat<F>) -> AttnStep<F> {
        let m = enc.rows();
        let a = self.attn_dim();
        debug_assert!(m > 0, "attention over an empty encoding");
        let mut q = vec![F::zero(); a];
        addmv(&mut q, &self.wq, query);
        let mut scores_u = Mat::zeros(m, a);
        let mut e = vec![F::zero(); m];
        for j in 0..m {
            let u = scores_u.row_mut(j);
            for i in 0..a {
                u[i] = (q[i] + keys.keys.get(j, i)).tanh();
            }
            e[j] = dot(self.v.row(0), u);
        }
        let max = e.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut alpha: Vec<F> = e.iter().map(|&x| (x - max).exp()).collect();
        let sum: F = alpha.iter().cloned().sum();
        alpha.iter_mut().for_each(|x| *x = *x / sum);
        let mut ctx = vec![F::zero(); enc.cols()];
        for j in 0..m {
            axpy(alpha[j], enc.row(j), &mut ctx);
        }
        AttnStep {
            ctx,
            alpha,
            scores_u,
        }
    }

    /// Backward for one step. Adds the context-path gradient into `denc` and
    /// the key-path gradient into `dkeys`; returns d(query). `dalpha_extra`
    /// carries gradients of losses applied directly to the weights.
    pub fn backward_step(
        &mut self,
        query: &[F],
        step: &AttnStep<F>,
        enc: &Mat<F>,
        dctx: &[F],
        dalpha_extra: Option<&[F]>,
        denc: &mut Mat<F>,
        dkeys: &mut Mat<F>,
    ) -> Vec<F> {
        let m = enc.rows();
        let a = self.attn_dim();
        // dα_j = dctx · enc_j ; context value path into denc.
        let mut dalpha = vec![F::zero(); m];
        for j in 0..m {
            dalpha[j] = dot(dctx, enc.row(j));
            axpy(step.alpha[j], dctx, denc.row_mut(j));
        }
        if let Some(extra) = dalpha_extra {
            for (d, &e) in dalpha.iter_mut().zip(extra) {
                *d += e;
            }
        }
        // Softmax backward.
        let inner: F = (0..m).map(|j| step.alpha[j] * dalpha[j]).sum();
        let de: Vec<F> = (0..m)
            .map(|j| step.alpha[j] * (dalpha[j] - inner))
            .collect();
        // Score backward: e_j = v · u_j, u_j = tanh(q + k_j).
        let mut dq = vec![F::zero(); a];
        for j in 0..m {
            let u = step.scores_u.row(j);
            axpy(de[j], u, self.dv.row_mut(0));
            let dk = dkeys.row_mut(j);
            for i in 0..a {
                let du = de[j] * self.v.get(0, i);
                let dz = du * (F::one() - u[i] * u[i]);
                dq[i] += dz;
                dk[i] += dz;
            }
        }
        outer_acc(&mut self.dwq, &dq, query);
        let mut dquery = vec![F::zero(); self.wq.cols()];
        addmv_t(&mut dquery, &self.wq, &dq);
        dquery
    }

    /// Propagate accumulated key gradients back through the key projection.
    pub fn backward_keys(&mut self, enc: &Mat<F>, dkeys: &Mat<F>, denc: &mut Mat<F>) {
        for j in 0..enc.rows() {
            let dk = dkeys.row(j);
            outer_acc(&mut self.dwk, dk, enc.row(j));
            axpy(F::one(), dk, self.dbk.row_mut(0));
            addmv_t(denc.row_mut(j), &self.wk, dk);
        }
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a, F>>) {
        out.push(ParamRef::new(format!("{prefix}.wq"), &mut self.wq, &mut self.dwq));
        out.push(ParamRef::new(format!("{prefix}.wk"), &mut self.wk, &mut self.dwk));
        out.push(ParamRef::new(format!("{prefix}.bk"), &mut self.bk, &mut self.dbk));
        out.push(ParamRef::new(format!("{prefix}.v"), &mut self.v, &mut self.dv));
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Mat<F>)) {
        f(&format!("{prefix}.wq"), &self.wq);
        f(&format!("{prefix}.wk"), &self.wk);
        f(&format!("{prefix}.bk"), &self.bk);
        f(&format!("{prefix}.v"), &self.v);
    }
}

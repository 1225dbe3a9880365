//! Gradient-descent steppers over named parameter collections. Velocity and
//! moment buffers align with the visitation order, which is stable per model.

use crate::mat::Mat;
use crate::scalar::Scalar;

use super::ParamRef;

/// Global-norm gradient clipping; returns the pre-clip norm.
fn clip_grads<F: Scalar>(params: &mut [ParamRef<'_, F>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for p in params.iter() {
        for &g in p.grad.data() {
            let g = g.as_f64();
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = F::from_f64(max_norm / norm);
        for p in params.iter_mut() {
            for g in p.grad.data_mut() {
                *g *= scale;
            }
        }
    }
    norm
}

/// Classic momentum: v <- m v + g, p <- p - lr v.
pub struct SgdMomentum<F: Scalar> {
    momentum: f64,
    velocity: Vec<Mat<F>>,
}

impl<F: Scalar> SgdMomentum<F> {
    pub fn new(momentum: f64) -> Self {
        SgdMomentum {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut [ParamRef<'_, F>],
        lr: f64,
        clip: Option<f64>,
        frozen: &dyn Fn(&str) -> bool,
    ) -> f64 {
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| Mat::zeros(p.value.rows(), p.value.cols()))
                .collect();
        }
        assert_eq!(self.velocity.len(), params.len(), "parameter set changed");
        let norm = clip.map_or(0.0, |c| clip_grads(params, c));
        let m = F::from_f64(self.momentum);
        let lr = F::from_f64(lr);
        for (p, vel) in params.iter_mut().zip(self.velocity.iter_mut()) {
            if frozen(&p.name) {
                continue;
            }
            for ((v, &g), w) in vel
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(p.value.data_mut())
            {
                *v = m * *v + g;
                *w -= lr * *v;
            }
        }
        norm
    }
}

pub struct Adam<F: Scalar> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u32,
    m: Vec<Mat<F>>,
    v: Vec<Mat<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut [ParamRef<'_, F>],
        lr: f64,
        clip: Option<f64>,
        frozen: &dyn Fn(&str) -> bool,
    ) -> f64 {
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|p| Mat::zeros(p.value.rows(), p.value.cols()))
                .collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter set changed");
        let norm = clip.map_or(0.0, |c| clip_grads(params, c));
        self.t += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bias1 = 1.0 - b1.powi(self.t as i32);
        let bias2 = 1.0 - b2.powi(self.t as i32);
        for ((p, m), v) in params
            .iter_mut()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            if frozen(&p.name) {
                continue;
            }
            for (((mi, vi), &g), w) in m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut().iter_mut())
                .zip(p.grad.data())
                .zip(p.value.data_mut())
            {
                let g = g.as_f64();
                let m_new = b1 * mi.as_f64() + (1.0 - b1) * g;
                let v_new = b2 * vi.as_f64() + (1.0 - b2) * g * g;
                *mi = F::from_f64(m_new);
                *vi = F::from_f64(v_new);
                let update = lr * (m_new / bias1) / ((v_new / bias2).sqrt() + self.eps);
                *w -= F::from_f64(update);
            }
        }
        norm
    }
}

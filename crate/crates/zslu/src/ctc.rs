//! CTC loss and decoding. The loss marginalizes over all monotonic
//! frame-to-label alignments with a log-space forward recursion; the gradient
//! pass adds the backward recursion and produces d(loss)/d(logits) directly.
//! A guarded brute-force enumeration over all frame label sequences serves as
//! the test oracle.

use thiserror::Error;

use crate::mat::Mat;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum CtcError {
    #[error("log-prob rows must exponentiate-sum to 1 (row {row}: {sum})")]
    NotNormalized { row: usize, sum: f64 },
    #[error("brute-force guard exceeded: T={frames} (max 8), alphabet={alphabet} (max 6)")]
    SizeGuard { frames: usize, alphabet: usize },
    #[error("non-finite loss")]
    NonFiniteLoss,
}

/// Per-frame log-probabilities over an alphabet that includes the blank.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbSeq<F: Scalar> {
    lp: Mat<F>,
}

impl<F: Scalar> LogProbSeq<F> {
    /// Wrap pre-computed log-probabilities, checking each row normalizes.
    pub fn new(lp: Mat<F>) -> Result<Self, CtcError> {
        for r in 0..lp.rows() {
            let sum: f64 = lp.row(r).iter().map(|&x| x.as_f64().exp()).sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(CtcError::NotNormalized { row: r, sum });
            }
        }
        Ok(LogProbSeq { lp })
    }

    pub fn from_logits(logits: &Mat<F>) -> Self {
        LogProbSeq {
            lp: log_softmax_rows(logits),
        }
    }

    pub fn frames(&self) -> usize {
        self.lp.rows()
    }

    pub fn alphabet_len(&self) -> usize {
        self.lp.cols()
    }

    pub fn mat(&self) -> &Mat<F> {
        &self.lp
    }
}

pub fn log_softmax_rows<F: Scalar>(m: &Mat<F>) -> Mat<F> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for x in row.iter() {
            sum += (*x - max).exp();
        }
        let lse = max + sum.ln();
        for x in row.iter_mut() {
            *x = *x - lse;
        }
    }
    out
}

fn log_add<F: Scalar>(a: F, b: F) -> F {
    if a == F::neg_infinity() {
        return b;
    }
    if b == F::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Frames needed for a target: its length plus one blank per adjacent repeat.
pub fn min_frames(target: &[usize]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

fn extended_target(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &s in target {
        ext.push(s);
        ext.push(blank);
    }
    ext
}

fn forward_alphas<F: Scalar>(lp: &Mat<F>, ext: &[usize]) -> Vec<Vec<F>> {
    let t_len = lp.rows();
    let s_len = ext.len();
    let ninf = F::neg_infinity();
    let mut alphas = vec![vec![ninf; s_len]; t_len];
    alphas[0][0] = lp.get(0, ext[0]);
    if s_len > 1 {
        alphas[0][1] = lp.get(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alphas[t - 1][s];
            if s >= 1 {
                a = log_add(a, alphas[t - 1][s - 1]);
            }
            if s >= 2 && ext[s] != ext[s - 2] {
                a = log_add(a, alphas[t - 1][s - 2]);
            }
            if a != ninf {
                alphas[t][s] = a + lp.get(t, ext[s]);
            }
        }
    }
    alphas
}

/// Negative log-probability of the target under the alignment semiring.
/// Returns `+inf` when no valid alignment exists (infeasible target).
pub fn ctc_loss<F: Scalar>(lp: &LogProbSeq<F>, target: &[usize], blank: usize) -> F {
    assert!(
        target.iter().all(|&s| s != blank),
        "CTC target must not contain the blank symbol"
    );
    if lp.frames() == 0 {
        return if target.is_empty() {
            F::zero()
        } else {
            F::infinity()
        };
    }
    if min_frames(target) > lp.frames() {
        return F::infinity();
    }
    let ext = extended_target(target, blank);
    let alphas = forward_alphas(lp.mat(), &ext);
    let last = &alphas[lp.frames() - 1];
    let mut total = last[ext.len() - 1];
    if ext.len() >= 2 {
        total = log_add(total, last[ext.len() - 2]);
    }
    -total
}

/// Loss plus gradient with respect to the logits feeding the softmax.
pub struct CtcGrad<F> {
    pub loss: F,
    pub dlogits: Mat<F>,
}

/// Softmax + CTC combined backward: d(loss)/d(logit[t][k]) = y[t][k] - γ[t][k],
/// where γ is the posterior symbol occupancy from the forward/backward pass.
pub fn ctc_loss_grad_logits<F: Scalar>(
    logits: &Mat<F>,
    target: &[usize],
    blank: usize,
) -> CtcGrad<F> {
    let lp = log_softmax_rows(logits);
    let t_len = lp.rows();
    let a_len = lp.cols();
    let ninf = F::neg_infinity();
    if t_len == 0 || min_frames(target) > t_len {
        return CtcGrad {
            loss: if target.is_empty() && t_len == 0 {
                F::zero()
            } else {
                F::infinity()
            },
            dlogits: Mat::zeros(t_len, a_len),
        };
    }
    let ext = extended_target(target, blank);
    let s_len = ext.len();
    let alphas = forward_alphas(&lp, &ext);

    let mut betas = vec![vec![ninf; s_len]; t_len];
    betas[t_len - 1][s_len - 1] = lp.get(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        betas[t_len - 1][s_len - 2] = lp.get(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = betas[t + 1][s];
            if s + 1 < s_len {
                b = log_add(b, betas[t + 1][s + 1]);
            }
            if s + 2 < s_len && ext[s] != ext[s + 2] {
                b = log_add(b, betas[t + 1][s + 2]);
            }
            if b != ninf {
                betas[t][s] = b + lp.get(t, ext[s]);
            }
        }
    }

    let mut log_p = alphas[t_len - 1][s_len - 1];
    if s_len >= 2 {
        log_p = log_add(log_p, alphas[t_len - 1][s_len - 2]);
    }
    if log_p == ninf {
        return CtcGrad {
            loss: F::infinity(),
            dlogits: Mat::zeros(t_len, a_len),
        };
    }

    let mut dlogits = Mat::zeros(t_len, a_len);
    for t in 0..t_len {
        // Posterior over symbols at frame t: γ[k] = Σ_{s: ext[s]=k} α β / (p · y).
        let mut log_gamma = vec![ninf; a_len];
        for s in 0..s_len {
            let ab = alphas[t][s] + betas[t][s];
            if ab != ninf {
                log_gamma[ext[s]] = log_add(log_gamma[ext[s]], ab);
            }
        }
        let row = dlogits.row_mut(t);
        for k in 0..a_len {
            let y = lp.get(t, k).exp();
            let gamma = if log_gamma[k] == ninf {
                F::zero()
            } else {
                // α and β both include the frame emission, so divide one out.
                (log_gamma[k] - log_p - lp.get(t, k)).exp()
            };
            row[k] = y - gamma;
        }
    }
    CtcGrad {
        loss: -log_p,
        dlogits,
    }
}

/// Test oracle: sum target probability over all |A|^T frame label sequences
/// whose collapse (merge adjacent repeats, then drop blanks) equals the target.
pub fn ctc_loss_bruteforce<F: Scalar>(
    lp: &LogProbSeq<F>,
    target: &[usize],
    blank: usize,
) -> Result<F, CtcError> {
    let t_len = lp.frames();
    let a_len = lp.alphabet_len();
    if t_len > 8 || a_len > 6 {
        return Err(CtcError::SizeGuard {
            frames: t_len,
            alphabet: a_len,
        });
    }
    if t_len == 0 {
        return Ok(if target.is_empty() {
            F::zero()
        } else {
            F::infinity()
        });
    }
    let mut total = 0.0f64;
    let mut labels = vec![0usize; t_len];
    loop {
        if collapse(&labels, blank) == target {
            let logp: f64 = labels
                .iter()
                .enumerate()
                .map(|(t, &k)| lp.mat().get(t, k).as_f64())
                .sum();
            total += logp.exp();
        }
        // Odometer over the |A|^T space.
        let mut pos = 0;
        loop {
            if pos == t_len {
                let loss = if total > 0.0 {
                    -total.ln()
                } else {
                    f64::INFINITY
                };
                return Ok(F::from_f64(loss));
            }
            labels[pos] += 1;
            if labels[pos] < a_len {
                break;
            }
            labels[pos] = 0;
            pos += 1;
        }
    }
}

/// Collapse a frame labelling: merge adjacent repeats, then delete blanks.
pub fn collapse(labels: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev: Option<usize> = None;
    for &l in labels {
        if prev != Some(l) {
            if l != blank {
                out.push(l);
            }
            prev = Some(l);
        }
    }
    out
}

/// Greedy decode: per-frame argmax (ties to the lowest index), collapse.
pub fn ctc_greedy_decode<F: Scalar>(lp: &LogProbSeq<F>, blank: usize) -> Vec<usize> {
    let mut path = Vec::with_capacity(lp.frames());
    for t in 0..lp.frames() {
        let row = lp.mat().row(t);
        let mut best = 0usize;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        path.push(best);
    }
    collapse(&path, blank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from, uniform01};

    fn uniform_lp(t: usize, a: usize) -> LogProbSeq<f64> {
        let v = (1.0 / a as f64).ln();
        LogProbSeq::new(Mat::from_fn(t, a, |_, _| v)).unwrap()
    }

    fn random_lp(t: usize, a: usize, seed: u64) -> LogProbSeq<f64> {
        let mut rng = rng_from(seed);
        let mut m = Mat::zeros(t, a);
        for r in 0..t {
            let mut row: Vec<f64> = (0..a).map(|_| uniform01(&mut rng) + 1e-3).collect();
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x = (*x / sum).ln());
            m.row_mut(r).copy_from_slice(&row);
        }
        LogProbSeq::new(m).unwrap()
    }

    // Alphabet {blank=0, a=1, b=2} throughout.

    #[test]
    fn single_frame_uniform_is_ln3() {
        // One frame, target "a": the only alignment is the frame labelled a,
        // so P = 1/3 and loss = ln 3.
        let lp = uniform_lp(1, 3);
        let loss = ctc_loss(&lp, &[1], 0);
        assert!((loss - 3.0f64.ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn two_frames_uniform_is_ln3() {
        // Valid frame labellings collapsing to "a": aa, a·, ·a of the 9,
        // so P = 3/9 and loss = ln 3.
        let lp = uniform_lp(2, 3);
        let loss = ctc_loss(&lp, &[1], 0);
        assert!((loss - 3.0f64.ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn repeated_symbol_needs_a_blank() {
        // "aa" needs a separating blank, so two frames cannot align it.
        let lp = uniform_lp(2, 3);
        assert_eq!(ctc_loss(&lp, &[1, 1], 0), f64::INFINITY);
        assert_eq!(min_frames(&[1, 1]), 3);
    }

    #[test]
    fn brute_force_agrees_with_analytic_cases() {
        let lp1 = uniform_lp(1, 3);
        assert!((ctc_loss_bruteforce(&lp1, &[1], 0).unwrap() - 3.0f64.ln()).abs() < 1e-12);
        let lp2 = uniform_lp(2, 3);
        assert!((ctc_loss_bruteforce(&lp2, &[1], 0).unwrap() - 3.0f64.ln()).abs() < 1e-12);
        assert_eq!(ctc_loss_bruteforce(&lp2, &[1, 1], 0).unwrap(), f64::INFINITY);
        // Target longer than T is infeasible.
        assert_eq!(
            ctc_loss_bruteforce(&lp2, &[1, 2, 1], 0).unwrap(),
            f64::INFINITY
        );
    }

    #[test]
    fn brute_force_guard_trips() {
        let lp = uniform_lp(9, 3);
        assert!(matches!(
            ctc_loss_bruteforce(&lp, &[1], 0),
            Err(CtcError::SizeGuard { .. })
        ));
    }

    #[test]
    fn forward_matches_brute_force_on_random_instances() {
        let mut rng = rng_from(42);
        for case in 0..100 {
            let t = 1 + (case % 6);
            let a = 3 + (case % 3);
            let lp = random_lp(t, a, 1000 + case as u64);
            let target_len = (uniform01(&mut rng) * 4.0) as usize;
            let target: Vec<usize> =
                (0..target_len).map(|_| 1 + (uniform01(&mut rng) * (a - 1) as f64) as usize).collect();
            let fast = ctc_loss(&lp, &target, 0);
            let slow = ctc_loss_bruteforce(&lp, &target, 0).unwrap();
            if fast.is_infinite() || slow.is_infinite() {
                assert_eq!(fast.is_infinite(), slow.is_infinite(), "case {case}");
            } else {
                assert!((fast - slow).abs() < 1e-6, "case {case}: {fast} vs {slow}");
            }
        }
    }

    #[test]
    fn total_probability_over_collapse_classes_is_one() {
        // Every frame labelling collapses to exactly one target, so summing
        // exp(-loss) over all targets of length <= T gives 1.
        for t in 1..=4usize {
            let lp = random_lp(t, 3, 77 + t as u64);
            let mut total = 0.0f64;
            let mut targets: Vec<Vec<usize>> = vec![vec![]];
            for len in 1..=t {
                let mut level = Vec::new();
                for prefix in targets.iter().filter(|s| s.len() == len - 1) {
                    for sym in 1..3usize {
                        let mut next = prefix.clone();
                        next.push(sym);
                        level.push(next);
                    }
                }
                targets.extend(level);
            }
            for target in &targets {
                let loss = ctc_loss(&lp, target, 0);
                if loss.is_finite() {
                    total += (-loss).exp();
                }
            }
            assert!((total - 1.0).abs() < 1e-9, "T={t}: total {total}");
        }
    }

    #[test]
    fn greedy_decode_collapses() {
        // argmax path [a, a, blank, b] -> [a, b]
        let mk = |path: &[usize], a: usize| {
            let mut m = Mat::zeros(path.len(), a);
            for (t, &k) in path.iter().enumerate() {
                for j in 0..a {
                    m.set(t, j, if j == k { 0.9f64.ln() } else { (0.1 / (a - 1) as f64).ln() });
                }
            }
            LogProbSeq::new(m).unwrap()
        };
        assert_eq!(ctc_greedy_decode(&mk(&[1, 1, 0, 2], 3), 0), vec![1, 2]);
        assert_eq!(ctc_greedy_decode(&mk(&[0, 0], 3), 0), Vec::<usize>::new());
        assert_eq!(ctc_greedy_decode(&mk(&[1, 0, 1], 3), 0), vec![1, 1]);
    }

    #[test]
    fn gradient_matches_finite_differences_of_brute_force() {
        // T=2 "a" case: differentiate the three-alignment closed form
        // numerically through the brute-force path and compare.
        let mut logits = Mat::from_fn(2, 3, |r, c| 0.3 * (r as f64) - 0.2 * (c as f64) + 0.05);
        let target = vec![1usize];
        let grad = ctc_loss_grad_logits(&logits, &target, 0);
        let eps = 1e-6;
        for r in 0..2 {
            for c in 0..3 {
                let orig = logits.get(r, c);
                logits.set(r, c, orig + eps);
                let plus = ctc_loss_bruteforce(&LogProbSeq::from_logits(&logits), &target, 0).unwrap();
                logits.set(r, c, orig - eps);
                let minus =
                    ctc_loss_bruteforce(&LogProbSeq::from_logits(&logits), &target, 0).unwrap();
                logits.set(r, c, orig);
                let numeric = (plus - minus) / (2.0 * eps);
                let analytic = grad.dlogits.get(r, c);
                assert!(
                    (numeric - analytic).abs() < 1e-6,
                    "({r},{c}): analytic {analytic} vs numeric {numeric}"
                );
            }
        }
        let direct = ctc_loss(&LogProbSeq::from_logits(&logits), &target, 0);
        assert!((grad.loss - direct).abs() < 1e-12);
    }

    #[test]
    fn empty_frames_and_empty_targets() {
        let lp = uniform_lp(0, 3);
        assert_eq!(ctc_loss(&lp, &[], 0), 0.0);
        assert_eq!(ctc_loss(&lp, &[1], 0), f64::INFINITY);
        let lp2 = uniform_lp(2, 3);
        // Empty target: both frames must be blank, P = 1/9.
        assert!((ctc_loss(&lp2, &[], 0) - 9.0f64.ln()).abs() < 1e-12);
    }
}

//! Text-to-embedding model: maps a character sequence to the recognizer's
//! embedding frames. Encoder: character embeddings through a stack of
//! convolution + sequence-norm + ReLU layers and one BiLSTM. Decoder: a
//! unidirectional LSTM with content-based attention over the encoded text, a
//! pre-projection of the previous output frame, a frame head, and a stop
//! head. Trained with teacher forcing on mean squared error plus a weighted
//! stop cross-entropy; free-running inference feeds predictions back.

use rand_chacha::rand_core::Rng as RngCore;

use crate::alphabet::SymbolAlphabet;
use crate::asr::AsrModel;
use crate::corpus::Utterance;
use crate::mat::{axpy, Mat};
use crate::nn::activation::sigmoid;
use crate::nn::lstm::{BiLstmCache, LstmStep};
use crate::nn::norm::NormCache;
use crate::nn::{
    flatten_grads, flatten_values, load_values, zero_grads, Act, BiLstm, ContentAttention, Conv1d,
    Linear, Lstm, ParamRef, SeqNorm,
};
use crate::rng::{derive_seed, rng_from, validation_ids};
use crate::scalar::Scalar;
use crate::train::{EpochDriver, EpochLog, TrainError, TrainHyper, TrainingLog};

#[derive(Debug, Clone, PartialEq)]
pub struct T2eConfig {
    pub char_embed_dim: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub conv_layers: usize,
    pub enc_lstm_width: usize,
    pub dec_lstm_width: usize,
    pub prenet_dim: usize,
    pub prenet_dropout: f64,
    /// Weight of the training-time soft-diagonal attention prior.
    pub guided_attention_weight: f64,
    pub guided_attention_sigma: f64,
    pub attn_dim: usize,
    pub out_dim: usize,
    pub stop_threshold: f64,
    pub stop_pos_weight: f64,
    pub max_frames: usize,
}

impl Default for T2eConfig {
    fn default() -> Self {
        T2eConfig {
            char_embed_dim: 32,
            conv_channels: 32,
            conv_kernel: 5,
            conv_layers: 3,
            enc_lstm_width: 32,
            dec_lstm_width: 64,
            prenet_dim: 32,
            prenet_dropout: 0.5,
            guided_attention_weight: 0.3,
            guided_attention_sigma: 0.2,
            attn_dim: 32,
            out_dim: 16,
            stop_threshold: 0.5,
            stop_pos_weight: 5.0,
            max_frames: 400,
        }
    }
}

pub struct T2eModel<F: Scalar> {
    pub cfg: T2eConfig,
    pub alphabet: SymbolAlphabet,
    /// Per-dimension affine target normalization, fitted on the training
    /// targets; the decoder regresses in normalized space.
    out_mean: Vec<F>,
    out_std: Vec<F>,
    embed: Mat<F>, // [alphabet size, char_embed_dim]
    dembed: Mat<F>,
    convs: Vec<Conv1d<F>>,
    norms: Vec<SeqNorm<F>>,
    enc: BiLstm<F>,
    prenet: Linear<F>,
    dec: Lstm<F>,
    attn: ContentAttention<F>,
    out_head: Linear<F>,
    stop_head: Linear<F>,
}

/// One training pair: an automatic transcription and the embedding sequence
/// the recognizer produced for the same audio.
#[derive(Debug, Clone, PartialEq)]
pub struct T2ePair {
    pub id: String,
    pub transcript: String,
    pub target: Mat<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct T2eDataset {
    pub train: Vec<T2ePair>,
    pub val: Vec<T2ePair>,
    pub dropped: usize,
}

struct EncCache<F: Scalar> {
    ids: Vec<usize>,
    conv_in: Vec<Mat<F>>,
    norm_caches: Vec<NormCache<F>>,
    normed: Vec<Mat<F>>,
    lstm_in: Mat<F>,
    lstm_cache: BiLstmCache<F>,
    out: Mat<F>,
}

struct DecStep<F: Scalar> {
    prenet_in: Vec<F>,
    prenet_pre: Vec<F>,
    prenet_mask: Option<Vec<F>>,
    lstm_in: Vec<F>,
    lstm: LstmStep<F>,
    attn: crate::nn::attention::AttnStep<F>,
    head_in: Vec<F>,
    frame: Vec<F>,
    stop_logit: F,
}

fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl<F: Scalar> T2eModel<F> {
    pub fn new<R: RngCore>(cfg: &T2eConfig, alphabet: SymbolAlphabet, rng: &mut R) -> Self {
        let e = cfg.char_embed_dim;
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut prev = e;
        for _ in 0..cfg.conv_layers {
            convs.push(Conv1d::new_no_bias(prev, cfg.conv_channels, cfg.conv_kernel, 1, rng));
            norms.push(SeqNorm::new(cfg.conv_channels));
            prev = cfg.conv_channels;
        }
        let enc = BiLstm::new(prev, cfg.enc_lstm_width, rng);
        let enc_dim = 2 * cfg.enc_lstm_width;
        let dec_in = cfg.prenet_dim + enc_dim;
        T2eModel {
            cfg: cfg.clone(),
            out_mean: vec![F::zero(); cfg.out_dim],
            out_std: vec![F::one(); cfg.out_dim],
            embed: crate::nn::init_uniform(rng, alphabet.size(), e, e),
            dembed: Mat::zeros(alphabet.size(), e),
            convs,
            norms,
            enc,
            prenet: Linear::new(cfg.out_dim, cfg.prenet_dim, rng),
            dec: Lstm::new(dec_in, cfg.dec_lstm_width, rng),
            attn: ContentAttention::new(cfg.dec_lstm_width, enc_dim, cfg.attn_dim, rng),
            out_head: Linear::new(cfg.dec_lstm_width + enc_dim, cfg.out_dim, rng),
            stop_head: Linear::new(cfg.dec_lstm_width + enc_dim, 1, rng),
            alphabet,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.cfg.out_dim
    }

    pub fn set_output_stats(&mut self, mean: Vec<F>, std: Vec<F>) {
        assert_eq!(mean.len(), self.cfg.out_dim);
        assert_eq!(std.len(), self.cfg.out_dim);
        assert!(std.iter().all(|&s| s > F::zero()));
        self.out_mean = mean;
        self.out_std = std;
    }

    pub fn output_stats(&self) -> (&[F], &[F]) {
        (&self.out_mean, &self.out_std)
    }

    fn normalize_target(&self, target: &Mat<F>) -> Mat<F> {
        let mut out = target.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - self.out_mean[k]) / self.out_std[k];
            }
        }
        out
    }

    fn denormalize_frames(&self, frames: &mut Mat<F>) {
        for r in 0..frames.rows() {
            let row = frames.row_mut(r);
            for (k, v) in row.iter_mut().enumerate() {
                *v = *v * self.out_std[k] + self.out_mean[k];
            }
        }
    }

    fn enc_dim(&self) -> usize {
        2 * self.cfg.enc_lstm_width
    }

    fn encode(&self, text: &str) -> Result<EncCache<F>, TrainError> {
        if text.trim().is_empty() {
            return Err(TrainError::EmptyText);
        }
        let ids = self.alphabet.encode_text(text)?;
        let mut embedded = Mat::zeros(ids.len(), self.cfg.char_embed_dim);
        for (r, &id) in ids.iter().enumerate() {
            embedded.row_mut(r).copy_from_slice(self.embed.row(id));
        }
        let mut conv_in = Vec::new();
        let mut norm_caches = Vec::new();
        let mut normed = Vec::new();
        let mut cur = embedded;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            conv_in.push(cur.clone());
            let pre = conv.forward(&cur);
            let (n, ncache) = norm.forward(&pre);
            cur = Act::Relu.apply(&n);
            norm_caches.push(ncache);
            normed.push(n);
        }
        let lstm_in = cur;
        let (out, lstm_cache) = self.enc.forward(&lstm_in);
        Ok(EncCache {
            ids,
            conv_in,
            norm_caches,
            normed,
            lstm_in,
            lstm_cache,
            out,
        })
    }

    fn encoder_backward(&mut self, cache: &EncCache<F>, denc_out: &Mat<F>) {
        let mut d = self.enc.backward(&cache.lstm_in, &cache.lstm_cache, denc_out);
        for i in (0..self.convs.len()).rev() {
            let dn = Act::Relu.backward(&cache.normed[i], &d);
            let dpre = self.norms[i].backward(&cache.norm_caches[i], &dn);
            d = self.convs[i].backward(&cache.conv_in[i], &dpre);
        }
        for (r, &id) in cache.ids.iter().enumerate() {
            axpy(F::one(), d.row(r), self.dembed.row_mut(id));
        }
    }

    /// Run the decoder. With `teacher` targets, steps follow the target
    /// length and the previous *target* frame feeds the pre-projection;
    /// free-running feeds the previous prediction and stops on the stop head.
    fn decode_steps(
        &self,
        enc_out: &Mat<F>,
        teacher: Option<&Mat<F>>,
        max_frames: usize,
        mut dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> Vec<DecStep<F>> {
        let d = self.cfg.out_dim;
        let keys = self.attn.project_keys(enc_out);
        let mut steps: Vec<DecStep<F>> = Vec::new();
        let mut h = vec![F::zero(); self.cfg.dec_lstm_width];
        let mut c = vec![F::zero(); self.cfg.dec_lstm_width];
        let mut ctx = vec![F::zero(); self.enc_dim()];
        let total = teacher.map_or(max_frames, |t| t.rows());
        for t in 0..total {
            let prenet_in: Vec<F> = if t == 0 {
                vec![F::zero(); d]
            } else {
                match teacher {
                    Some(targets) => targets.row(t - 1).to_vec(),
                    None => steps[t - 1].frame.clone(),
                }
            };
            let mut prenet_pre = vec![F::zero(); self.cfg.prenet_dim];
            self.prenet.forward_frame(&prenet_in, &mut prenet_pre);
            let mut p: Vec<F> = prenet_pre
                .iter()
                .map(|&x| if x > F::zero() { x } else { F::zero() })
                .collect();
            // Inverted dropout on the pre-projection during training; keeps
            // the decoder from leaning on the previous frame alone.
            let prenet_mask = dropout_rng.as_deref_mut().map(|rng| {
                let keep = 1.0 - self.cfg.prenet_dropout;
                let mask: Vec<F> = (0..p.len())
                    .map(|_| {
                        if crate::rng::uniform01(rng) < keep {
                            F::from_f64(1.0 / keep)
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                for (v, m) in p.iter_mut().zip(&mask) {
                    *v *= *m;
                }
                mask
            });
            let mut lstm_in = p;
            lstm_in.extend_from_slice(&ctx);
            let lstm = self.dec.step(&lstm_in, &h, &c);
            let attn = self.attn.forward_step(&lstm.h, &keys, enc_out);
            let mut head_in = lstm.h.clone();
            head_in.extend_from_slice(&attn.ctx);
            let mut frame = vec![F::zero(); d];
            self.out_head.forward_frame(&head_in, &mut frame);
            let stop_logit = self.stop_head.forward_scalar(&head_in);
            h = lstm.h.clone();
            c = lstm.c.clone();
            ctx = attn.ctx.clone();
            let stop = teacher.is_none()
                && sigmoid(stop_logit).as_f64() > self.cfg.stop_threshold;
            steps.push(DecStep {
                prenet_in,
                prenet_pre,
                prenet_mask,
                lstm_in,
                lstm,
                attn,
                head_in,
                frame,
                stop_logit,
            });
            if stop {
                break;
            }
        }
        steps
    }

    /// Teacher-forced loss and gradients for one pair. Returns
    /// (total loss, frame mse); gradients are scaled by `scale`.
    fn pair_loss_and_backward(
        &mut self,
        cache: &EncCache<F>,
        steps: &[DecStep<F>],
        target: &Mat<F>,
        scale: f64,
    ) -> (f64, f64) {
        let t_len = steps.len();
        let d = self.cfg.out_dim;
        let w_pos = self.cfg.stop_pos_weight;
        let mut mse = 0.0f64;
        let mut bce = 0.0f64;
        let mut ga = 0.0f64;
        let frame_norm = 1.0 / (t_len * d) as f64;
        let stop_norm = 1.0 / t_len as f64;
        let m_len = cache.out.rows();
        let ga_w = self.cfg.guided_attention_weight;
        let ga_sig = self.cfg.guided_attention_sigma;
        // Soft-diagonal penalty on attention mass far from proportional
        // progress through the input.
        let ga_penalty = |t: usize, j: usize| -> f64 {
            let dt = j as f64 / m_len as f64 - t as f64 / t_len as f64;
            1.0 - (-dt * dt / (2.0 * ga_sig * ga_sig)).exp()
        };

        let enc_out = &cache.out;
        let mut denc = Mat::zeros(enc_out.rows(), enc_out.cols());
        let mut dkeys = Mat::zeros(enc_out.rows(), self.cfg.attn_dim);
        let mut dh_next = vec![F::zero(); self.cfg.dec_lstm_width];
        let mut dc_next = vec![F::zero(); self.cfg.dec_lstm_width];
        let mut dctx_next = vec![F::zero(); self.enc_dim()];

        for t in (0..t_len).rev() {
            let step = &steps[t];
            // Frame loss.
            let mut dframe = vec![F::zero(); d];
            for k in 0..d {
                let diff = (step.frame[k] - target.get(t, k)).as_f64();
                mse += diff * diff * frame_norm;
                dframe[k] = F::from_f64(2.0 * diff * frame_norm * scale);
            }
            // Stop loss: positive label only on the final frame.
            let y = if t == t_len - 1 { 1.0 } else { 0.0 };
            let l = step.stop_logit.as_f64();
            bce += (w_pos * y * softplus(-l) + (1.0 - y) * softplus(l)) * stop_norm;
            let dstop =
                (w_pos * y * (sigmoid(step.stop_logit).as_f64() - 1.0)
                    + (1.0 - y) * sigmoid(step.stop_logit).as_f64())
                    * stop_norm
                    * scale;

            let mut dhead_in = vec![F::zero(); step.head_in.len()];
            self.out_head
                .backward_frame(&step.head_in, &dframe, &mut dhead_in);
            self.stop_head.backward_frame(
                &step.head_in,
                &[F::from_f64(dstop)],
                &mut dhead_in,
            );

            let w = self.cfg.dec_lstm_width;
            let mut dh: Vec<F> = dhead_in[..w].to_vec();
            for (a, b) in dh.iter_mut().zip(dh_next.iter()) {
                *a += *b;
            }
            let mut dctx: Vec<F> = dhead_in[w..].to_vec();
            for (a, b) in dctx.iter_mut().zip(dctx_next.iter()) {
                *a += *b;
            }

            // Attention: context comes from this step's query = lstm.h, plus
            // the direct guided-attention gradient on the weights.
            let dalpha_ga: Option<Vec<F>> = if ga_w > 0.0 {
                // Mean over steps of the off-diagonal attention mass.
                let step_scale = ga_w * scale / t_len as f64;
                let mut v = vec![F::zero(); m_len];
                for (j, dv) in v.iter_mut().enumerate() {
                    let w = ga_penalty(t, j);
                    ga += ga_w * w * step.attn.alpha[j].as_f64() / t_len as f64;
                    *dv = F::from_f64(w * step_scale);
                }
                Some(v)
            } else {
                None
            };
            let dquery = self.attn.backward_step(
                &step.lstm.h,
                &step.attn,
                enc_out,
                &dctx,
                dalpha_ga.as_deref(),
                &mut denc,
                &mut dkeys,
            );
            for (a, b) in dh.iter_mut().zip(dquery.iter()) {
                *a += *b;
            }

            // Decoder LSTM step.
            let h_prev: Vec<F> = if t > 0 {
                steps[t - 1].lstm.h.clone()
            } else {
                vec![F::zero(); w]
            };
            let c_prev: Vec<F> = if t > 0 {
                steps[t - 1].lstm.c.clone()
            } else {
                vec![F::zero(); w]
            };
            let mut dlstm_in = vec![F::zero(); step.lstm_in.len()];
            let mut dh_prev = vec![F::zero(); w];
            let mut dc_prev = vec![F::zero(); w];
            self.dec.step_backward(
                &step.lstm_in,
                &h_prev,
                &c_prev,
                &step.lstm,
                &dh,
                &dc_next,
                &mut dlstm_in,
                &mut dh_prev,
                &mut dc_prev,
            );
            dh_next = dh_prev;
            dc_next = dc_prev;

            // Split the LSTM input gradient into prenet and carried context.
            let dp = &dlstm_in[..self.cfg.prenet_dim];
            dctx_next = dlstm_in[self.cfg.prenet_dim..].to_vec();
            let dprenet_pre: Vec<F> = dp
                .iter()
                .enumerate()
                .zip(step.prenet_pre.iter())
                .map(|((k, &g), &pre)| {
                    let g = match &step.prenet_mask {
                        Some(mask) => g * mask[k],
                        None => g,
                    };
                    if pre > F::zero() {
                        g
                    } else {
                        F::zero()
                    }
                })
                .collect();
            let mut dprenet_in = vec![F::zero(); d];
            self.prenet
                .backward_frame(&step.prenet_in, &dprenet_pre, &mut dprenet_in);
            // Teacher frames are data; their gradient is dropped.
        }

        self.attn.backward_keys(enc_out, &dkeys, &mut denc);
        self.encoder_backward(cache, &denc);
        (mse + bce + ga, mse)
    }

    /// Free-running synthesis: predicted frames feed back; stops when the
    /// stop probability crosses the threshold or at `max_frames`.
    pub fn synthesize(&self, text: &str, max_frames: usize) -> Result<Mat<F>, TrainError> {
        let cache = self.encode(text)?;
        let steps = self.decode_steps(&cache.out, None, max_frames, None);
        let mut out = Mat::zeros(steps.len(), self.cfg.out_dim);
        for (t, s) in steps.iter().enumerate() {
            out.row_mut(t).copy_from_slice(&s.frame);
        }
        self.denormalize_frames(&mut out);
        Ok(out)
    }

    /// Synthesis plus per-step attention weights, for diagnostics.
    pub fn synthesize_with_attention(
        &self,
        text: &str,
        max_frames: usize,
    ) -> Result<(Mat<F>, Vec<Vec<F>>), TrainError> {
        let cache = self.encode(text)?;
        let steps = self.decode_steps(&cache.out, None, max_frames, None);
        let mut out = Mat::zeros(steps.len(), self.cfg.out_dim);
        let mut attn = Vec::with_capacity(steps.len());
        for (t, s) in steps.iter().enumerate() {
            out.row_mut(t).copy_from_slice(&s.frame);
            attn.push(s.attn.alpha.clone());
        }
        self.denormalize_frames(&mut out);
        Ok((out, attn))
    }

    /// Teacher-forced validation loss (total, mse) on one pair.
    fn pair_val_loss(&self, pair: &T2ePair) -> Result<(f64, f64), TrainError> {
        let cache = self.encode(&pair.transcript)?;
        let target = self.normalize_target(&pair.target.cast::<F>());
        let steps = self.decode_steps(&cache.out, Some(&target), 0, None);
        let t_len = steps.len();
        let d = self.cfg.out_dim;
        let mut mse = 0.0;
        let mut bce = 0.0;
        for (t, step) in steps.iter().enumerate() {
            for k in 0..d {
                let diff = (step.frame[k] - target.get(t, k)).as_f64();
                mse += diff * diff / (t_len * d) as f64;
            }
            let y = if t == t_len - 1 { 1.0 } else { 0.0 };
            let l = step.stop_logit.as_f64();
            bce += (self.cfg.stop_pos_weight * y * softplus(-l) + (1.0 - y) * softplus(l))
                / t_len as f64;
        }
        Ok((mse + bce, mse))
    }

    pub fn collect_params_with<'a>(&'a mut self, out: &mut Vec<ParamRef<'a, F>>) {
        out.push(ParamRef::new("embed", &mut self.embed, &mut self.dembed));
        for (i, (conv, norm)) in self.convs.iter_mut().zip(self.norms.iter_mut()).enumerate() {
            conv.collect_params(&format!("conv.{i}"), out);
            norm.collect_params(&format!("norm.{i}"), out);
        }
        self.enc.collect_params("enc", out);
        self.prenet.collect_params("prenet", out);
        self.dec.collect_params("dec", out);
        self.attn.collect_params("attn", out);
        self.out_head.collect_params("out_head", out);
        self.stop_head.collect_params("stop_head", out);
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Mat<F>)) {
        f("embed", &self.embed);
        for (i, (conv, norm)) in self.convs.iter().zip(self.norms.iter()).enumerate() {
            conv.visit_params(&format!("conv.{i}"), f);
            norm.visit_params(&format!("norm.{i}"), f);
        }
        self.enc.visit_params("enc", f);
        self.prenet.visit_params("prenet", f);
        self.dec.visit_params("dec", f);
        self.attn.visit_params("attn", f);
        self.out_head.visit_params("out_head", f);
        self.stop_head.visit_params("stop_head", f);
    }
}

/// Full-stack finite-difference block: teacher-forced loss of one pair.
pub struct T2eGradBlock<F: Scalar> {
    pub model: T2eModel<F>,
    pub transcript: String,
    pub target: Mat<F>,
}

impl<F: Scalar> crate::nn::GradCheckable<F> for T2eGradBlock<F> {
    fn params_flat(&mut self) -> Vec<F> {
        let mut p = Vec::new();
        self.model.collect_params_with(&mut p);
        flatten_values(&p)
    }
    fn set_params_flat(&mut self, flat: &[F]) {
        let mut p = Vec::new();
        self.model.collect_params_with(&mut p);
        load_values(&mut p, flat);
    }
    fn loss_and_grad(&mut self) -> Result<(F, Vec<F>), crate::nn::NnError> {
        let mut p = Vec::new();
        self.model.collect_params_with(&mut p);
        zero_grads(&mut p);
        drop(p);
        let cache = self
            .model
            .encode(&self.transcript)
            .map_err(|_| crate::nn::NnError::NonFiniteLoss)?;
        let steps = self.model.decode_steps(&cache.out, Some(&self.target), 0, None);
        let (loss, _) = self
            .model
            .pair_loss_and_backward(&cache, &steps, &self.target.clone(), 1.0);
        let mut p = Vec::new();
        self.model.collect_params_with(&mut p);
        Ok((F::from_f64(loss), flatten_grads(&p)))
    }
}

/// Transcribe the recognizer's own training data and pair each transcription
/// with the extracted embeddings. No filtering of erroneous transcripts;
/// pairs with an empty transcription are dropped and counted. Split 90/10 by
/// utterance-id hash.
pub fn build_t2e_dataset<F: Scalar>(
    asr: &AsrModel<F>,
    utterances: &[Utterance],
) -> Result<T2eDataset, TrainError> {
    if utterances.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut pairs = Vec::with_capacity(utterances.len());
    let mut dropped = 0usize;
    for u in utterances {
        let feats = u
            .features
            .as_ref()
            .ok_or_else(|| TrainError::MissingFeatures(u.id.clone()))?;
        let f = feats.cast::<F>();
        let transcript = asr.transcribe(&f)?;
        if transcript.is_empty() {
            dropped += 1;
            continue;
        }
        let emb = asr.extract_embeddings(&f)?;
        pairs.push(T2ePair {
            id: u.id.clone(),
            transcript: transcript.to_lowercase(),
            target: emb.cast::<f32>(),
        });
    }
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let val_ids: std::collections::BTreeSet<String> =
        validation_ids(pairs.iter().map(|p| p.id.as_str()), 0.1)
            .into_iter()
            .collect();
    let mut data = T2eDataset {
        dropped,
        ..Default::default()
    };
    for p in pairs {
        if val_ids.contains(&p.id) {
            data.val.push(p);
        } else {
            data.train.push(p);
        }
    }
    Ok(data)
}

/// Teacher-forced training. Validation loss logged per epoch is the frame
/// MSE on the held-out pairs.
pub fn train_t2e<F: Scalar>(
    data: &T2eDataset,
    cfg: &T2eConfig,
    hyper: &TrainHyper,
    alphabet: &SymbolAlphabet,
    seed: u64,
) -> Result<(T2eModel<F>, TrainingLog), TrainError> {
    if data.train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for p in data.train.iter().chain(&data.val) {
        if p.target.cols() != cfg.out_dim {
            return Err(TrainError::DimensionMismatch {
                expected: cfg.out_dim,
                got: p.target.cols(),
            });
        }
        if p.target.rows() == 0 {
            return Err(TrainError::EmptyDataset);
        }
    }
    let mut rng = rng_from(derive_seed(seed, "t2e-init"));
    let mut model = T2eModel::new(cfg, alphabet.clone(), &mut rng);
    // Fit the per-dimension target normalization on the training targets.
    let mut mean = vec![0.0f64; cfg.out_dim];
    let mut count = 0usize;
    for p in &data.train {
        for r in 0..p.target.rows() {
            for (k, m) in mean.iter_mut().enumerate() {
                *m += p.target.get(r, k) as f64;
            }
            count += 1;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count.max(1) as f64);
    let mut var = vec![0.0f64; cfg.out_dim];
    for p in &data.train {
        for r in 0..p.target.rows() {
            for (k, v) in var.iter_mut().enumerate() {
                let d = p.target.get(r, k) as f64 - mean[k];
                *v += d * d;
            }
        }
    }
    var.iter_mut().for_each(|v| *v = (*v / count.max(1) as f64).max(1e-6));
    model.set_output_stats(
        mean.iter().map(|&m| F::from_f64(m)).collect(),
        var.iter().map(|&v| F::from_f64(v.sqrt())).collect(),
    );
    let mut stepper = crate::train::Stepper::for_hyper(hyper);
    let mut driver = EpochDriver::new(hyper);
    let mut log = TrainingLog {
        model: "t2e".to_string(),
        skipped: 0,
        epochs: Vec::new(),
    };

    for epoch in 0..hyper.epochs {
        let mut erng = rng_from(derive_seed(seed, &format!("t2e-epoch-{epoch}")));
        let mut drng = rng_from(derive_seed(seed, &format!("t2e-dropout-{epoch}")));
        let order = crate::corpus::shuffled_indices(&mut erng, data.train.len());
        let mut epoch_loss = 0.0;
        let mut counted = 0usize;
        let mut norm_sum = 0.0;
        let mut norm_steps = 0usize;
        for batch in order.chunks(hyper.batch_size.max(1)) {
            let mut params = Vec::new();
            model.collect_params_with(&mut params);
            zero_grads(&mut params);
            drop(params);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let pair = &data.train[i];
                let cache = model.encode(&pair.transcript)?;
                let target = model.normalize_target(&pair.target.cast::<F>());
                let steps = model.decode_steps(&cache.out, Some(&target), 0, Some(&mut drng));
                let (loss, _mse) = model.pair_loss_and_backward(&cache, &steps, &target, scale);
                if !loss.is_finite() {
                    return Err(TrainError::Diverged { epoch });
                }
                epoch_loss += loss;
                counted += 1;
            }
            let mut params = Vec::new();
            model.collect_params_with(&mut params);
            norm_sum += stepper.step(&mut params, driver.lr(), hyper.grad_clip, &|_| false);
            norm_steps += 1;
        }
        let train_loss = epoch_loss / counted.max(1) as f64;
        if !train_loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        let val_loss = if data.val.is_empty() {
            train_loss
        } else {
            let mut sum = 0.0;
            for p in &data.val {
                sum += model.pair_val_loss(p)?.1;
            }
            sum / data.val.len() as f64
        };
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr: driver.lr(),
            grad_norm: norm_sum / norm_steps.max(1) as f64,
        });
        driver.record(val_loss);
    }
    Ok((model, log))
}

/// Mean cosine similarity along the dynamic-time-warping alignment of two
/// embedding sequences (cosine distance 1 - cos as the step cost; ties in
/// the backtrace prefer diagonal, then the shorter-real, then shorter-sim
/// move).
pub fn dtw_cosine<F: Scalar>(real: &Mat<F>, sim: &Mat<F>) -> Result<f64, TrainError> {
    if real.rows() == 0 || sim.rows() == 0 {
        return Err(TrainError::EmptySet);
    }
    let cos = |a: &[F], b: &[F]| -> f64 {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for (x, y) in a.iter().zip(b) {
            dot += x.as_f64() * y.as_f64();
            na += x.as_f64() * x.as_f64();
            nb += y.as_f64() * y.as_f64();
        }
        let denom = (na.sqrt() * nb.sqrt()).max(1e-12);
        dot / denom
    };
    let n = real.rows();
    let m = sim.rows();
    let mut cost = vec![vec![f64::INFINITY; m]; n];
    for i in 0..n {
        for j in 0..m {
            let c = 1.0 - cos(real.row(i), sim.row(j));
            let best_prev = if i == 0 && j == 0 {
                0.0
            } else {
                let mut b = f64::INFINITY;
                if i > 0 && j > 0 {
                    b = b.min(cost[i - 1][j - 1]);
                }
                if i > 0 {
                    b = b.min(cost[i - 1][j]);
                }
                if j > 0 {
                    b = b.min(cost[i][j - 1]);
                }
                b
            };
            cost[i][j] = c + best_prev;
        }
    }
    // Backtrace the optimal monotone path, preferring diagonal moves.
    let (mut i, mut j) = (n - 1, m - 1);
    let mut sims = vec![cos(real.row(i), sim.row(j))];
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && cost[i - 1][j - 1] <= cost[i - 1][j].min(cost[i][j - 1]) {
            i -= 1;
            j -= 1;
        } else if i > 0 && (j == 0 || cost[i - 1][j] <= cost[i][j - 1]) {
            i -= 1;
        } else {
            j -= 1;
        }
        sims.push(cos(real.row(i), sim.row(j)));
    }
    Ok(sims.iter().sum::<f64>() / sims.len() as f64)
}

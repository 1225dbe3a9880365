//! The speech recognizer: a trainable downsampling encoder (convolution plus
//! two BiLSTM layers) standing in for a pre-trained speech front end, topped
//! by three affine + LeakyReLU projection layers and a softmax over the
//! character alphabet, trained with CTC. The third projection layer is the
//! embedding layer the rest of the pipeline mimics and taps.

use rand_chacha::rand_core::Rng as RngCore;

use crate::align::{levenshtein, AlignmentCounts};
use crate::alphabet::{from_symbols, SymbolAlphabet};
use crate::corpus::Utterance;
use crate::ctc::{ctc_greedy_decode, LogProbSeq};
use crate::mat::Mat;
use crate::nn::lstm::BiLstmCache;
use crate::nn::{Act, BiLstm, Conv1d, Linear, ParamRef};
use crate::rng::{derive_seed, rng_from};
use crate::scalar::Scalar;
use crate::tags::TaggedText;
use crate::train::{train_ctc, CtcSample, CtcTrainModel, TrainError, TrainHyper, TrainingLog};

#[derive(Debug, Clone, PartialEq)]
pub struct AsrConfig {
    pub feature_dim: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub encoder_width: usize,
    pub proj_widths: [usize; 3],
    pub leaky_slope: f64,
}

impl Default for AsrConfig {
    fn default() -> Self {
        AsrConfig {
            feature_dim: 8,
            conv_kernel: 5,
            conv_stride: 2,
            encoder_width: 64,
            proj_widths: [128, 64, 16],
            leaky_slope: 0.01,
        }
    }
}

impl AsrConfig {
    /// Dimension of the embedding layer tapped by the rest of the pipeline.
    pub fn embed_dim(&self) -> usize {
        self.proj_widths[2]
    }
}

#[derive(Debug, Clone)]
pub struct AsrModel<F: Scalar> {
    pub cfg: AsrConfig,
    pub alphabet: SymbolAlphabet,
    conv: Conv1d<F>,
    enc0: BiLstm<F>,
    enc1: BiLstm<F>,
    proj: Vec<Linear<F>>,
    out: Linear<F>,
    act: Act,
}

pub struct TrunkCache<F: Scalar> {
    conv_pre: Mat<F>,
    conv_out: Mat<F>,
    enc0_cache: BiLstmCache<F>,
    enc0_out: Mat<F>,
    enc1_cache: BiLstmCache<F>,
    proj_pre: Vec<Mat<F>>,
    proj_in: Vec<Mat<F>>,
    pub embeddings: Mat<F>,
}

impl<F: Scalar> AsrModel<F> {
    pub fn new<R: RngCore>(cfg: &AsrConfig, alphabet: SymbolAlphabet, rng: &mut R) -> Self {
        let w = cfg.encoder_width;
        let conv = Conv1d::new(cfg.feature_dim, w, cfg.conv_kernel, cfg.conv_stride, rng);
        let enc0 = BiLstm::new(w, w, rng);
        let enc1 = BiLstm::new(2 * w, w, rng);
        let mut proj = Vec::new();
        let mut prev = 2 * w;
        for &width in &cfg.proj_widths {
            proj.push(Linear::new(prev, width, rng));
            prev = width;
        }
        let out = Linear::new(prev, alphabet.size(), rng);
        AsrModel {
            cfg: cfg.clone(),
            alphabet,
            conv,
            enc0,
            enc1,
            proj,
            out,
            act: Act::LeakyRelu(cfg.leaky_slope),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim()
    }

    fn check_features(&self, features: &Mat<F>) -> Result<(), TrainError> {
        if features.cols() != self.cfg.feature_dim {
            return Err(TrainError::DimensionMismatch {
                expected: self.cfg.feature_dim,
                got: features.cols(),
            });
        }
        Ok(())
    }

    pub fn trunk_forward(&self, features: &Mat<F>) -> TrunkCache<F> {
        let conv_pre = self.conv.forward(features);
        let conv_out = self.act.apply(&conv_pre);
        let (enc0_out, enc0_cache) = self.enc0.forward(&conv_out);
        let (enc1_out, enc1_cache) = self.enc1.forward(&enc0_out);
        let mut proj_pre = Vec::with_capacity(3);
        let mut proj_in = Vec::with_capacity(3);
        let mut cur = enc1_out;
        for lin in &self.proj {
            proj_in.push(cur.clone());
            let pre = lin.forward(&cur);
            cur = self.act.apply(&pre);
            proj_pre.push(pre);
        }
        TrunkCache {
            conv_pre,
            conv_out,
            enc0_cache,
            enc0_out,
            enc1_cache,
            proj_pre,
            proj_in,
            embeddings: cur,
        }
    }

    fn trunk_backward(&mut self, features: &Mat<F>, cache: &TrunkCache<F>, demb: &Mat<F>) {
        let mut d = demb.clone();
        for i in (0..self.proj.len()).rev() {
            let dpre = self.act.backward(&cache.proj_pre[i], &d);
            d = self.proj[i].backward(&cache.proj_in[i], &dpre);
        }
        let d_enc0 = self.enc1.backward(&cache.enc0_out, &cache.enc1_cache, &d);
        let d_conv = self.enc0.backward(&cache.conv_out, &cache.enc0_cache, &d_enc0);
        let d_conv_pre = self.act.backward(&cache.conv_pre, &d_conv);
        self.conv.backward(features, &d_conv_pre);
    }

    /// Post-activation output of the embedding layer; length ceil(T / stride).
    pub fn extract_embeddings(&self, features: &Mat<F>) -> Result<Mat<F>, TrainError> {
        self.check_features(features)?;
        Ok(self.trunk_forward(features).embeddings)
    }

    /// The output layer applied to extracted embeddings; transcription is
    /// exactly this plus greedy decoding, so the two-step path and the
    /// composed path are identical by construction.
    pub fn logits_from_embeddings(&self, embeddings: &Mat<F>) -> Mat<F> {
        self.out.forward(embeddings)
    }

    pub fn logits(&self, features: &Mat<F>) -> Result<Mat<F>, TrainError> {
        let emb = self.extract_embeddings(features)?;
        Ok(self.logits_from_embeddings(&emb))
    }

    pub fn decode_symbols(&self, logits: &Mat<F>) -> Vec<usize> {
        ctc_greedy_decode(&LogProbSeq::from_logits(logits), self.alphabet.blank())
    }

    /// Greedy transcription; separator symbols map to spaces.
    pub fn transcribe(&self, features: &Mat<F>) -> Result<String, TrainError> {
        let logits = self.logits(features)?;
        Ok(self.alphabet.decode_text(&self.decode_symbols(&logits)))
    }

    /// Greedy decode into tagged text (meaningful for tag-extended models;
    /// a plain character model never emits tag symbols).
    pub fn decode_tagged(&self, features: &Mat<F>) -> Result<(TaggedText, usize), TrainError> {
        let logits = self.logits(features)?;
        Ok(from_symbols(&self.decode_symbols(&logits), &self.alphabet))
    }

    /// Copy of this model over a tag-extended alphabet: output rows for the
    /// new symbols are appended and initialized at zero.
    pub fn extend_with_tags(&self, extended: SymbolAlphabet) -> AsrModel<F> {
        assert!(extended.size() >= self.alphabet.size());
        assert_eq!(extended.chars(), self.alphabet.chars());
        let mut model = self.clone();
        let old = &self.out;
        let mut w = Mat::zeros(extended.size(), old.in_dim());
        let mut b = Mat::zeros(1, extended.size());
        for r in 0..old.out_dim() {
            w.row_mut(r).copy_from_slice(old.w.row(r));
            b.row_mut(0)[r] = old.b.get(0, r);
        }
        model.out = Linear {
            dw: Mat::zeros(w.rows(), w.cols()),
            db: Mat::zeros(1, b.cols()),
            w,
            b,
        };
        model.alphabet = extended;
        model
    }

    pub fn collect_params_with<'a>(&'a mut self, out: &mut Vec<ParamRef<'a, F>>) {
        self.conv.collect_params("enc.conv", out);
        self.enc0.collect_params("enc.lstm0", out);
        self.enc1.collect_params("enc.lstm1", out);
        for (i, lin) in self.proj.iter_mut().enumerate() {
            lin.collect_params(&format!("proj.{i}"), out);
        }
        self.out.collect_params("out", out);
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Mat<F>)) {
        self.conv.visit_params("enc.conv", f);
        self.enc0.visit_params("enc.lstm0", f);
        self.enc1.visit_params("enc.lstm1", f);
        for (i, lin) in self.proj.iter().enumerate() {
            lin.visit_params(&format!("proj.{i}"), f);
        }
        self.out.visit_params("out", f);
    }
}

impl<F: Scalar> CtcTrainModel<F> for AsrModel<F> {
    type Input = Mat<F>;
    type Cache = TrunkCache<F>;

    fn forward(&self, x: &Mat<F>) -> (Mat<F>, TrunkCache<F>) {
        let cache = self.trunk_forward(x);
        let logits = self.out.forward(&cache.embeddings);
        (logits, cache)
    }

    fn backward(&mut self, x: &Mat<F>, cache: TrunkCache<F>, dlogits: &Mat<F>) {
        let demb = self.out.backward(&cache.embeddings, dlogits);
        self.trunk_backward(x, &cache, &demb);
    }

    fn collect_params<'a>(&'a mut self, out: &mut Vec<ParamRef<'a, F>>) {
        self.collect_params_with(out);
    }
}

/// Full-stack finite-difference block: CTC loss of one utterance.
pub struct AsrGradBlock<F: Scalar> {
    pub model: AsrModel<F>,
    pub features: Mat<F>,
    pub target: Vec<usize>,
}

impl<F: Scalar> crate::nn::GradCheckable<F> for AsrGradBlock<F> {
    fn params_flat(&mut self) -> Vec<F> {
        let mut p = Vec::new();
        self.model.collect_params_with(&mut p);
        crate::nn::flatten_values(&p)
    }
    fn set_params_flat(&mut self, flat: &[F]) {
        let mut p = Vec::new();
        self.model.collect_params_with(&mut p);
        crate::nn::load_values(&mut p, flat);
    }
    fn loss_and_grad(&mut self) -> Result<(F, Vec<F>), crate::nn::NnError> {
        let mut p = Vec::new();
        self.model.collect_params_with(&mut p);
        crate::nn::zero_grads(&mut p);
        drop(p);
        let (logits, cache) = CtcTrainModel::forward(&self.model, &self.features);
        let grad = crate::ctc::ctc_loss_grad_logits(&logits, &self.target, self.model.alphabet.blank());
        if !grad.loss.is_finite() {
            return Err(crate::nn::NnError::NonFiniteLoss);
        }
        CtcTrainModel::backward(&mut self.model, &self.features, cache, &grad.dlogits);
        let mut p = Vec::new();
        self.model.collect_params_with(&mut p);
        Ok((grad.loss, crate::nn::flatten_grads(&p)))
    }
}

/// Train a recognizer on paired utterances. Deterministic per seed.
pub fn train_asr<F: Scalar>(
    utterances: &[Utterance],
    cfg: &AsrConfig,
    hyper: &TrainHyper,
    alphabet: &SymbolAlphabet,
    seed: u64,
) -> Result<(AsrModel<F>, TrainingLog), TrainError> {
    if utterances.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut samples = Vec::with_capacity(utterances.len());
    for u in utterances {
        let feats = u
            .features
            .as_ref()
            .ok_or_else(|| TrainError::MissingFeatures(u.id.clone()))?;
        samples.push(CtcSample {
            id: u.id.clone(),
            input: feats.cast::<F>(),
            target: alphabet.encode_text(&u.text)?,
        });
    }
    let mut rng = rng_from(derive_seed(seed, "asr-init"));
    let mut model = AsrModel::new(cfg, alphabet.clone(), &mut rng);
    model.check_features(&samples[0].input)?;
    let log = train_ctc(&mut model, &samples, hyper, alphabet.blank(), seed, &|_| false, "asr")?;
    Ok((model, log))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WerReport {
    pub counts: AlignmentCounts,
    pub ref_tokens: usize,
}

impl WerReport {
    pub fn wer(&self) -> f64 {
        self.counts.distance() as f64 / self.ref_tokens.max(1) as f64
    }
}

/// Micro-averaged word error rate of greedy transcriptions over a paired set.
pub fn evaluate_wer<F: Scalar>(
    model: &AsrModel<F>,
    utterances: &[Utterance],
) -> Result<WerReport, TrainError> {
    if utterances.is_empty() {
        return Err(TrainError::EmptySet);
    }
    let mut counts = AlignmentCounts::default();
    let mut ref_tokens = 0usize;
    for u in utterances {
        let feats = u
            .features
            .as_ref()
            .ok_or_else(|| TrainError::MissingFeatures(u.id.clone()))?;
        let hyp = model.transcribe(&feats.cast::<F>())?;
        let r: Vec<&str> = u.text.split_whitespace().collect();
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let c = levenshtein(&r, &h, |a, b| a == b);
        counts.substitutions += c.substitutions;
        counts.insertions += c.insertions;
        counts.deletions += c.deletions;
        ref_tokens += r.len();
    }
    if ref_tokens == 0 {
        return Err(TrainError::EmptySet);
    }
    Ok(WerReport { counts, ref_tokens })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alphabet::SymbolAlphabet;
    use crate::corpus::{build_world, render_natural, WorldConfig};
    use crate::train::OptimizerKind;

    fn tiny_cfg(feature_dim: usize) -> AsrConfig {
        AsrConfig {
            feature_dim,
            conv_kernel: 3,
            conv_stride: 2,
            encoder_width: 8,
            proj_widths: [8, 6, 4],
            leaky_slope: 0.01,
        }
    }

    fn char_alphabet() -> SymbolAlphabet {
        let chars: Vec<char> = ('a'..='z').collect();
        SymbolAlphabet::chars_only(&chars).unwrap()
    }

    #[test]
    fn embedding_shape_follows_stride_law() {
        let mut rng = rng_from(51);
        let model = AsrModel::<f64>::new(&tiny_cfg(4), char_alphabet(), &mut rng);
        for t in 1..=50 {
            let x = Mat::from_fn(t, 4, |r, c| ((r + c) as f64 * 0.1).sin());
            let emb = model.extract_embeddings(&x).unwrap();
            assert_eq!(emb.rows(), t.div_ceil(2), "T={t}");
            assert_eq!(emb.cols(), 4);
            assert!(emb.all_finite());
        }
    }

    #[test]
    fn embeddings_are_deterministic() {
        let mut rng = rng_from(52);
        let model = AsrModel::<f64>::new(&tiny_cfg(4), char_alphabet(), &mut rng);
        let x = Mat::from_fn(10, 4, |r, c| ((r * 4 + c) as f64 * 0.2).cos());
        assert_eq!(
            model.extract_embeddings(&x).unwrap(),
            model.extract_embeddings(&x).unwrap()
        );
    }

    #[test]
    fn transcribe_equals_output_layer_over_extraction() {
        let mut rng = rng_from(53);
        let model = AsrModel::<f32>::new(&tiny_cfg(4), char_alphabet(), &mut rng);
        for k in 0..20 {
            let t = 3 + (k % 9);
            let x = Mat::from_fn(t, 4, |r, c| (((r + 1) * (c + 2) + k) as f32 * 0.17).sin());
            let emb = model.extract_embeddings(&x).unwrap();
            let logits = model.logits_from_embeddings(&emb);
            let two_step = model.alphabet.decode_text(&model.decode_symbols(&logits));
            assert_eq!(model.transcribe(&x).unwrap(), two_step);
            assert_eq!(model.logits(&x).unwrap(), logits);
        }
    }

    #[test]
    fn wrong_feature_dim_is_rejected() {
        let mut rng = rng_from(54);
        let model = AsrModel::<f64>::new(&tiny_cfg(4), char_alphabet(), &mut rng);
        let x = Mat::from_fn(5, 3, |_, _| 0.0);
        assert!(matches!(
            model.extract_embeddings(&x),
            Err(TrainError::DimensionMismatch { expected: 4, got: 3 })
        ));
    }

    #[test]
    fn zero_length_features_transcribe_to_empty() {
        let mut rng = rng_from(55);
        let model = AsrModel::<f64>::new(&tiny_cfg(4), char_alphabet(), &mut rng);
        let x = Mat::zeros(0, 4);
        assert_eq!(model.transcribe(&x).unwrap(), "");
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let hyper = TrainHyper::default();
        assert!(matches!(
            train_asr::<f32>(&[], &tiny_cfg(4), &hyper, &char_alphabet(), 1),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn overfits_a_single_utterance() {
        let world = build_world(&WorldConfig::default(), 3).unwrap();
        let text = "ab cd".to_string();
        let feats = render_natural(&world, &text, 77).unwrap();
        let utts: Vec<Utterance> = (0..16)
            .map(|i| Utterance {
                id: format!("u-{i}"),
                text: text.clone(),
                features: Some(feats.clone()),
            })
            .collect();
        let cfg = AsrConfig {
            feature_dim: 8,
            conv_kernel: 3,
            conv_stride: 2,
            encoder_width: 12,
            proj_widths: [16, 12, 8],
            leaky_slope: 0.01,
        };
        let hyper = TrainHyper {
            epochs: 200,
            batch_size: 16,
            lr: 2e-2,
            momentum: 0.9,
            lr_halve_patience: 50,
            grad_clip: 5.0,
            optimizer: OptimizerKind::SgdMomentum,
        };
        let (model, log) = train_asr::<f32>(&utts, &cfg, &hyper, &char_alphabet(), 5).unwrap();
        assert!(
            log.final_train_loss() < 0.1,
            "train loss {}",
            log.final_train_loss()
        );
        assert_eq!(model.transcribe(&feats).unwrap(), "ab cd");
        let wer = evaluate_wer(&model, &utts[..1]).unwrap();
        assert_eq!(wer.wer(), 0.0);
    }

    #[test]
    fn wer_counts_match_hand_example() {
        // ref "a b c" vs hyp "a x c d": one substitution, one insertion.
        let mut rng = rng_from(56);
        let model = AsrModel::<f32>::new(&tiny_cfg(4), char_alphabet(), &mut rng);
        let _ = &model;
        let r: Vec<&str> = "a b c".split_whitespace().collect();
        let h: Vec<&str> = "a x c d".split_whitespace().collect();
        let c = levenshtein(&r, &h, |a, b| a == b);
        assert_eq!((c.substitutions, c.insertions, c.deletions), (1, 1, 0));
        assert!((c.distance() as f64 / r.len() as f64 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn full_stack_gradient_check_in_double_precision() {
        use crate::nn::GradCheckable;
        let mut rng = rng_from(58);
        let alphabet = char_alphabet();
        let model = AsrModel::<f64>::new(&tiny_cfg(4), alphabet.clone(), &mut rng);
        let target = alphabet.encode_text("ab").unwrap();
        let mut block = AsrGradBlock {
            model,
            features: Mat::from_fn(6, 4, |r, c| ((r * 4 + c) as f64 * 0.33).sin()),
            target,
        };
        let scaled: Vec<f64> = block.params_flat().iter().map(|v| v * 3.0).collect();
        block.set_params_flat(&scaled);
        let max_rel = crate::nn::gradient_check(&mut block, 3e-4, 5).unwrap();
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn extended_model_keeps_char_rows_and_zeroes_tag_rows() {
        use crate::tags::TagSet;
        let mut rng = rng_from(57);
        let model = AsrModel::<f32>::new(&tiny_cfg(4), char_alphabet(), &mut rng);
        let chars: Vec<char> = ('a'..='z').collect();
        let extended_alpha =
            SymbolAlphabet::with_tags(&chars, TagSet::default_types()).unwrap();
        let ext = model.extend_with_tags(extended_alpha.clone());
        let x = Mat::from_fn(9, 4, |r, c| ((r * 3 + c) as f32 * 0.21).sin());
        let base_logits = model.logits(&x).unwrap();
        let ext_logits = ext.logits(&x).unwrap();
        assert_eq!(ext_logits.cols(), extended_alpha.size());
        for t in 0..base_logits.rows() {
            for k in 0..base_logits.cols() {
                assert_eq!(base_logits.get(t, k), ext_logits.get(t, k));
            }
            for k in base_logits.cols()..ext_logits.cols() {
                assert_eq!(ext_logits.get(t, k), 0.0);
            }
        }
        // Same transcription behavior on characters.
        assert_eq!(ext.transcribe(&x).unwrap(), model.transcribe(&x).unwrap());
    }
}

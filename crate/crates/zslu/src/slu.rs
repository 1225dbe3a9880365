//! The tagging decoder: five BiLSTM layers with a softmax over the
//! tag-extended alphabet, trained with CTC on embedding sequences paired
//! with tagged transcripts, and decoded into tagged text with bracket
//! repair. The same stack over learned character embeddings forms the
//! text-to-text tagger used by the cascade baseline.

use rand_chacha::rand_core::Rng as RngCore;

use crate::alphabet::{from_symbols, to_symbols, SymbolAlphabet};
use crate::corpus::TaggedUtterance;
use crate::ctc::{ctc_greedy_decode, LogProbSeq};
use crate::mat::{axpy, Mat};
use crate::nn::lstm::BiLstmCache;
use crate::nn::{BiLstm, Linear, ParamRef};
use crate::rng::{derive_seed, rng_from};
use crate::scalar::Scalar;
use crate::t2e::T2eModel;
use crate::tags::TaggedText;
use crate::train::{train_ctc, CtcSample, CtcTrainModel, TrainError, TrainHyper, TrainingLog};

#[derive(Debug, Clone, PartialEq)]
pub struct SluConfig {
    pub input_dim: usize,
    pub width: usize,
    pub layers: usize,
}

impl Default for SluConfig {
    fn default() -> Self {
        SluConfig {
            input_dim: 16,
            width: 64,
            layers: 5,
        }
    }
}

/// BiLSTM stack plus output projection, shared by the embedding-input model
/// and the character-input cascade model.
#[derive(Debug, Clone)]
struct SluStack<F: Scalar> {
    layers: Vec<BiLstm<F>>,
    out: Linear<F>,
}

pub struct StackCache<F: Scalar> {
    inputs: Vec<Mat<F>>,
    caches: Vec<BiLstmCache<F>>,
    top: Mat<F>,
}

impl<F: Scalar> SluStack<F> {
    fn new<R: RngCore>(cfg: &SluConfig, out_size: usize, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut prev = cfg.input_dim;
        for _ in 0..cfg.layers {
            layers.push(BiLstm::new(prev, cfg.width, rng));
            prev = 2 * cfg.width;
        }
        SluStack {
            layers,
            out: Linear::new(prev, out_size, rng),
        }
    }

    fn forward(&self, x: &Mat<F>) -> (Mat<F>, StackCache<F>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            inputs.push(cur.clone());
            let (y, cache) = layer.forward(&cur);
            caches.push(cache);
            cur = y;
        }
        let logits = self.out.forward(&cur);
        (
            logits,
            StackCache {
                inputs,
                caches,
                top: cur,
            },
        )
    }

    fn backward(&mut self, cache: &StackCache<F>, dlogits: &Mat<F>) -> Mat<F> {
        let mut d = self.out.backward(&cache.top, dlogits);
        for i in (0..self.layers.len()).rev() {
            d = self.layers[i].backward(&cache.inputs[i], &cache.caches[i], &d);
        }
        d
    }

    fn collect_params<'a>(&'a mut self, out: &mut Vec<ParamRef<'a, F>>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.collect_params(&format!("lstm.{i}"), out);
        }
        self.out.collect_params("out", out);
    }

    fn visit_params(&self, f: &mut dyn FnMut(&str, &Mat<F>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit_params(&format!("lstm.{i}"), f);
        }
        self.out.visit_params("out", f);
    }
}

pub struct SluModel<F: Scalar> {
    pub cfg: SluConfig,
    pub alphabet: SymbolAlphabet,
    stack: SluStack<F>,
}

/// One training sample: an embedding sequence (simulated or real) paired
/// with the symbol encoding of the tagged transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct SluSample {
    pub id: String,
    pub input: Mat<f32>,
    pub target: Vec<usize>,
}

impl<F: Scalar> SluModel<F> {
    pub fn new<R: RngCore>(cfg: &SluConfig, alphabet: SymbolAlphabet, rng: &mut R) -> Self {
        SluModel {
            stack: SluStack::new(cfg, alphabet.size(), rng),
            cfg: cfg.clone(),
            alphabet,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.cfg.input_dim
    }

    fn check_input(&self, emb: &Mat<F>) -> Result<(), TrainError> {
        if emb.cols() != self.cfg.input_dim {
            return Err(TrainError::DimensionMismatch {
                expected: self.cfg.input_dim,
                got: emb.cols(),
            });
        }
        Ok(())
    }

    pub fn logits(&self, emb: &Mat<F>) -> Result<Mat<F>, TrainError> {
        self.check_input(emb)?;
        Ok(self.stack.forward(emb).0)
    }

    /// Greedy decode into tagged text; bracket violations are repaired and
    /// counted, so this never fails on any input of the right width.
    pub fn decode(&self, emb: &Mat<F>) -> Result<(TaggedText, usize), TrainError> {
        let logits = self.logits(emb)?;
        let symbols = ctc_greedy_decode(&LogProbSeq::from_logits(&logits), self.alphabet.blank());
        Ok(from_symbols(&symbols, &self.alphabet))
    }

    pub fn collect_params_with<'a>(&'a mut self, out: &mut Vec<ParamRef<'a, F>>) {
        self.stack.collect_params(out);
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Mat<F>)) {
        self.stack.visit_params(f);
    }
}

impl<F: Scalar> CtcTrainModel<F> for SluModel<F> {
    type Input = Mat<F>;
    type Cache = StackCache<F>;

    fn forward(&self, x: &Mat<F>) -> (Mat<F>, StackCache<F>) {
        self.stack.forward(x)
    }

    fn backward(&mut self, _x: &Mat<F>, cache: StackCache<F>, dlogits: &Mat<F>) {
        self.stack.backward(&cache, dlogits);
    }

    fn collect_params<'a>(&'a mut self, out: &mut Vec<ParamRef<'a, F>>) {
        self.stack.collect_params(out);
    }
}

/// Decode tagged text via an embedding-input model; free function mirror of
/// `SluModel::decode` for call sites holding the pieces separately.
pub fn decode_slu<F: Scalar>(
    model: &SluModel<F>,
    emb: &Mat<F>,
) -> Result<(TaggedText, usize), TrainError> {
    model.decode(emb)
}

/// For each tagged sentence: strip the annotation, synthesize embeddings for
/// the bare words, and pair them with the symbol encoding of the *tagged*
/// sentence. Sentences synthesizing to zero frames are dropped and counted.
pub fn build_slu_dataset<F: Scalar>(
    t2e: &T2eModel<F>,
    tagged: &[TaggedUtterance],
    out_alphabet: &SymbolAlphabet,
    max_frames: usize,
) -> Result<(Vec<SluSample>, usize), TrainError> {
    let mut samples = Vec::with_capacity(tagged.len());
    let mut dropped = 0usize;
    for u in tagged {
        let bare = u.tagged.bare_text().to_lowercase();
        let emb = t2e.synthesize(&bare, max_frames)?;
        if emb.rows() == 0 {
            dropped += 1;
            continue;
        }
        let target = to_symbols(&u.tagged, out_alphabet)?;
        samples.push(SluSample {
            id: u.id.clone(),
            input: emb.cast::<f32>(),
            target,
        });
    }
    Ok((samples, dropped))
}

/// CTC training over the tag-extended alphabet; same regime as the
/// recognizer (momentum SGD, batch accumulation, tenth held out by id hash).
pub fn train_slu<F: Scalar>(
    samples: &[SluSample],
    cfg: &SluConfig,
    hyper: &TrainHyper,
    alphabet: &SymbolAlphabet,
    seed: u64,
) -> Result<(SluModel<F>, TrainingLog), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for s in samples {
        if s.input.cols() != cfg.input_dim {
            return Err(TrainError::DimensionMismatch {
                expected: cfg.input_dim,
                got: s.input.cols(),
            });
        }
    }
    let mut rng = rng_from(derive_seed(seed, "slu-init"));
    let mut model = SluModel::new(cfg, alphabet.clone(), &mut rng);
    let data: Vec<CtcSample<Mat<F>>> = samples
        .iter()
        .map(|s| CtcSample {
            id: s.id.clone(),
            input: s.input.cast::<F>(),
            target: s.target.clone(),
        })
        .collect();
    let log = train_ctc(&mut model, &data, hyper, alphabet.blank(), seed, &|_| false, "slu")?;
    Ok((model, log))
}

// ---------------------------------------------------------------------------
// Text-to-text tagger (cascade baseline)
// ---------------------------------------------------------------------------

/// The same tagging stack over a learned character-embedding sequence of the
/// bare text instead of recognizer embeddings. Each character embedding is
/// repeated `upsample` times so the CTC output has room for tag symbols.
pub struct CascadeModel<F: Scalar> {
    pub cfg: SluConfig,
    pub in_alphabet: SymbolAlphabet,
    pub out_alphabet: SymbolAlphabet,
    pub upsample: usize,
    embed: Mat<F>,
    dembed: Mat<F>,
    stack: SluStack<F>,
}

pub struct CascadeCache<F: Scalar> {
    ids: Vec<usize>,
    embedded: Mat<F>,
    stack: StackCache<F>,
}

impl<F: Scalar> CascadeModel<F> {
    pub fn new<R: RngCore>(
        cfg: &SluConfig,
        in_alphabet: SymbolAlphabet,
        out_alphabet: SymbolAlphabet,
        upsample: usize,
        rng: &mut R,
    ) -> Self {
        assert!(upsample >= 1);
        CascadeModel {
            embed: crate::nn::init_uniform(rng, in_alphabet.size(), cfg.input_dim, cfg.input_dim),
            dembed: Mat::zeros(in_alphabet.size(), cfg.input_dim),
            stack: SluStack::new(cfg, out_alphabet.size(), rng),
            cfg: cfg.clone(),
            in_alphabet,
            out_alphabet,
            upsample,
        }
    }

    fn embed_ids(&self, ids: &[usize]) -> Mat<F> {
        let mut m = Mat::zeros(ids.len() * self.upsample, self.cfg.input_dim);
        for (r, &id) in ids.iter().enumerate() {
            for k in 0..self.upsample {
                m.row_mut(r * self.upsample + k)
                    .copy_from_slice(self.embed.row(id));
            }
        }
        m
    }

    pub fn encode_input(&self, text: &str) -> Result<Vec<usize>, TrainError> {
        if text.trim().is_empty() {
            return Err(TrainError::EmptyText);
        }
        Ok(self.in_alphabet.encode_text(text)?)
    }

    /// Tag bare text, repairing and counting bracket violations.
    pub fn decode_text(&self, text: &str) -> Result<(TaggedText, usize), TrainError> {
        let ids = self.encode_input(text)?;
        let (logits, _) = CtcTrainModel::forward(self, &ids);
        let symbols =
            ctc_greedy_decode(&LogProbSeq::from_logits(&logits), self.out_alphabet.blank());
        Ok(from_symbols(&symbols, &self.out_alphabet))
    }

    pub fn collect_params_with<'a>(&'a mut self, out: &mut Vec<ParamRef<'a, F>>) {
        out.push(ParamRef::new("embed", &mut self.embed, &mut self.dembed));
        self.stack.collect_params(out);
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Mat<F>)) {
        f("embed", &self.embed);
        self.stack.visit_params(f);
    }
}

impl<F: Scalar> CtcTrainModel<F> for CascadeModel<F> {
    type Input = Vec<usize>;
    type Cache = CascadeCache<F>;

    fn forward(&self, ids: &Vec<usize>) -> (Mat<F>, CascadeCache<F>) {
        let embedded = self.embed_ids(ids);
        let (logits, stack) = self.stack.forward(&embedded);
        (
            logits,
            CascadeCache {
                ids: ids.clone(),
                embedded,
                stack,
            },
        )
    }

    fn backward(&mut self, _ids: &Vec<usize>, cache: CascadeCache<F>, dlogits: &Mat<F>) {
        let dx = self.stack.backward(&cache.stack, dlogits);
        let _ = &cache.embedded;
        for (r, &id) in cache.ids.iter().enumerate() {
            for k in 0..self.upsample {
                axpy(
                    F::one(),
                    dx.row(r * self.upsample + k),
                    self.dembed.row_mut(id),
                );
            }
        }
    }

    fn collect_params<'a>(&'a mut self, out: &mut Vec<ParamRef<'a, F>>) {
        self.collect_params_with(out);
    }
}

/// Train the text-to-text tagger on tagged sentences.
pub fn train_cascade<F: Scalar>(
    tagged: &[TaggedUtterance],
    cfg: &SluConfig,
    hyper: &TrainHyper,
    in_alphabet: &SymbolAlphabet,
    out_alphabet: &SymbolAlphabet,
    upsample: usize,
    seed: u64,
) -> Result<(CascadeModel<F>, TrainingLog), TrainError> {
    if tagged.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = rng_from(derive_seed(seed, "cascade-init"));
    let mut model = CascadeModel::new(
        cfg,
        in_alphabet.clone(),
        out_alphabet.clone(),
        upsample,
        &mut rng,
    );
    let mut data = Vec::with_capacity(tagged.len());
    for u in tagged {
        data.push(CtcSample {
            id: u.id.clone(),
            input: in_alphabet.encode_text(&u.tagged.bare_text().to_lowercase())?,
            target: to_symbols(&u.tagged, out_alphabet)?,
        });
    }
    let log = train_ctc(
        &mut model,
        &data,
        hyper,
        out_alphabet.blank(),
        seed,
        &|_| false,
        "cascade",
    )?;
    Ok((model, log))
}

/// Full-stack finite-difference block: CTC loss of one embedding sample.
pub struct SluGradBlock<F: Scalar> {
    pub model: SluModel<F>,
    pub input: Mat<F>,
    pub target: Vec<usize>,
}

impl<F: Scalar> crate::nn::GradCheckable<F> for SluGradBlock<F> {
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
        let (logits, cache) = CtcTrainModel::forward(&self.model, &self.input);
        let grad =
            crate::ctc::ctc_loss_grad_logits(&logits, &self.target, self.model.alphabet.blank());
        if !grad.loss.is_finite() {
            return Err(crate::nn::NnError::NonFiniteLoss);
        }
        CtcTrainModel::backward(&mut self.model, &self.input, cache, &grad.dlogits);
        let mut p = Vec::new();
        self.model.collect_params_with(&mut p);
        Ok((grad.loss, crate::nn::flatten_grads(&p)))
    }
}

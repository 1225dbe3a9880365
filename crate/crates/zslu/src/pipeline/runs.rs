//! The comparison systems. Each run walks its stage chain through the cache:
//! generate the corpus, train the recognizer, build the text-to-embedding
//! data and model, build and train the tagging decoder (on simulated or real
//! embeddings), fine-tune the synthetic-speech recognizers, or train the
//! text-to-text tagger; then evaluate on the dev and test splits and emit a
//! report. Reports themselves are cached, so a warm rerun retrains nothing.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::alphabet::{to_symbols, SymbolAlphabet};
use crate::asr::{train_asr, AsrModel};
use crate::checkpoint;
use crate::corpus::{
    build_world, generate_corpus, load_bundle, load_world, read_feature_file, render_natural,
    render_synthetic, save_bundle, save_world, write_feature_file, CorpusBundle, TaggedUtterance,
    TemplateGrammar, World,
};
use crate::mat::Mat;
use crate::rng::derive_seed_for;
use crate::slu::{build_slu_dataset, train_cascade, train_slu, CascadeModel, SluModel, SluSample};
use crate::t2e::{build_t2e_dataset, train_t2e, T2eDataset, T2ePair, T2eModel};
use crate::tags::{parse_tagged, serialize, TaggedText};
use crate::train::{train_ctc, CtcSample, TrainHyper, TrainingLog};

use super::cache::StageCache;
use super::compose::{compose_end_to_end, EndToEndModel};
use super::config::{ExperimentConfig, NeerMatch};
use super::eval::{compute_neer, micro_wer, EvalMetrics, EvalReport};
use super::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthMode {
    AllWeights,
    FrozenEncoder,
}

impl SynthMode {
    pub fn label(&self) -> &'static str {
        match self {
            SynthMode::AllWeights => "synth-all",
            SynthMode::FrozenEncoder => "synth-frozen",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CascadeMode {
    Manual,
    Automatic,
}

impl CascadeMode {
    pub fn label(&self) -> &'static str {
        match self {
            CascadeMode::Manual => "cascade-manual",
            CascadeMode::Automatic => "cascade-auto",
        }
    }
}

/// One seed's view of the experiment: config, cache and seed, plus a record
/// of which stages were computed rather than loaded.
pub struct RunContext<'a> {
    pub config: &'a ExperimentConfig,
    pub cache: &'a StageCache,
    pub seed: u64,
    fingerprint: String,
    computed: RefCell<Vec<String>>,
}

impl<'a> RunContext<'a> {
    pub fn new(
        config: &'a ExperimentConfig,
        cache: &'a StageCache,
        seed: u64,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(RunContext {
            fingerprint: config.fingerprint(),
            config,
            cache,
            seed,
            computed: RefCell::new(Vec::new()),
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Stages this context computed (cache misses), in execution order.
    pub fn computed_stages(&self) -> Vec<String> {
        self.computed.borrow().clone()
    }

    fn ensure<T>(
        &self,
        stage: &str,
        build: impl FnOnce(&Path) -> Result<T, PipelineError>,
        load: impl Fn(&Path) -> Result<T, PipelineError>,
    ) -> Result<T, PipelineError> {
        let (value, hit) = self
            .cache
            .ensure(&self.fingerprint, self.seed, stage, build, load)?;
        if !hit {
            self.computed.borrow_mut().push(stage.to_string());
        }
        Ok(value)
    }

    pub fn char_alphabet(&self) -> Result<SymbolAlphabet, PipelineError> {
        SymbolAlphabet::chars_only(&self.config.world.chars)
            .map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn tag_alphabet(&self) -> Result<SymbolAlphabet, PipelineError> {
        SymbolAlphabet::with_tags(
            &self.config.world.chars,
            self.config.world.entity_types.clone(),
        )
        .map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn world(&self) -> Result<World, PipelineError> {
        let cfg = &self.config.world;
        let seed = self.seed;
        self.ensure(
            "world",
            |dir| {
                let world = build_world(cfg, seed)?;
                save_world(&world, &dir.join("world.txt"))?;
                Ok(world)
            },
            |dir| Ok(load_world(&dir.join("world.txt"))?),
        )
    }

    pub fn bundle(&self) -> Result<CorpusBundle, PipelineError> {
        let world = self.world()?;
        let config = self.config;
        let seed = self.seed;
        self.ensure(
            "corpus",
            |dir| {
                let grammar = TemplateGrammar::default_grammar(config.world.entity_types.len());
                let bundle = generate_corpus(&world, &config.sizes, &grammar, seed)?;
                save_bundle(&bundle, dir, &config.world.entity_types)?;
                Ok(bundle)
            },
            |dir| Ok(load_bundle(dir)?),
        )
    }

    pub fn asr(&self) -> Result<AsrModel<f32>, PipelineError> {
        let bundle = self.bundle()?;
        let alphabet = self.char_alphabet()?;
        let config = self.config;
        let seed = self.seed;
        self.ensure(
            "asr",
            |dir| {
                let (model, log) = train_asr::<f32>(
                    &bundle.asr_train,
                    &config.asr,
                    &config.asr_train,
                    &alphabet,
                    derive_seed_for(seed, "train", "asr"),
                )?;
                checkpoint::save_asr(&model, &dir.join("asr.ckpt"))
                    .map_err(|e| PipelineError::Data(e.to_string()))?;
                save_log(&log, &dir.join("train_log.json"))?;
                Ok(model)
            },
            |dir| {
                checkpoint::load_asr(&dir.join("asr.ckpt"))
                    .map_err(|e| PipelineError::Data(e.to_string()))
            },
        )
    }

    pub fn t2e_data(&self) -> Result<T2eDataset, PipelineError> {
        let asr = self.asr()?;
        let bundle = self.bundle()?;
        let d = self.config.embed_dim();
        self.ensure(
            "t2e-data",
            |dir| {
                let data = build_t2e_dataset(&asr, &bundle.asr_train)?;
                save_t2e_pairs(dir, &data, d)?;
                Ok(data)
            },
            |dir| load_t2e_pairs(dir),
        )
    }

    pub fn t2e(&self) -> Result<T2eModel<f32>, PipelineError> {
        let data = self.t2e_data()?;
        let alphabet = self.char_alphabet()?;
        let config = self.config;
        let seed = self.seed;
        self.ensure(
            "t2e",
            |dir| {
                let (model, log) = train_t2e::<f32>(
                    &data,
                    &config.t2e,
                    &config.t2e_train,
                    &alphabet,
                    derive_seed_for(seed, "train", "t2e"),
                )?;
                checkpoint::save_t2e(&model, &dir.join("t2e.ckpt"))
                    .map_err(|e| PipelineError::Data(e.to_string()))?;
                save_log(&log, &dir.join("train_log.json"))?;
                Ok(model)
            },
            |dir| {
                checkpoint::load_t2e(&dir.join("t2e.ckpt"))
                    .map_err(|e| PipelineError::Data(e.to_string()))
            },
        )
    }

    /// Tagging-decoder training data: simulated embeddings from the
    /// text-to-embedding model, or real-audio embeddings for the oracle.
    pub fn slu_data(&self, oracle: bool) -> Result<Vec<SluSample>, PipelineError> {
        let stage = if oracle { "slu-data-oracle" } else { "slu-data-sim" };
        let tag_alphabet = self.tag_alphabet()?;
        let bundle = self.bundle()?;
        let d = self.config.embed_dim();
        if oracle {
            if !self.config.allow_oracle {
                return Err(PipelineError::Config(
                    "oracle run requires the natural renderer (run.allow_oracle = true)"
                        .to_string(),
                ));
            }
            let world = self.world()?;
            let asr = self.asr()?;
            let seed = self.seed;
            self.ensure(
                stage,
                |dir| {
                    let mut samples = Vec::with_capacity(bundle.ner_train.len());
                    for u in &bundle.ner_train {
                        let feats = render_natural(
                            &world,
                            &u.tagged.bare_text(),
                            derive_seed_for(seed, "oracle-render", &u.id),
                        )?;
                        let emb = asr.extract_embeddings(&feats)?;
                        samples.push(SluSample {
                            id: u.id.clone(),
                            input: emb,
                            target: to_symbols(&u.tagged, &tag_alphabet)?,
                        });
                    }
                    save_slu_samples(dir, &samples, &bundle.ner_train, d, 0)?;
                    Ok(samples)
                },
                |dir| load_slu_samples(dir, &tag_alphabet),
            )
        } else {
            let t2e = self.t2e()?;
            let max_frames = self.config.t2e.max_frames;
            self.ensure(
                stage,
                |dir| {
                    let (samples, dropped) =
                        build_slu_dataset(&t2e, &bundle.ner_train, &tag_alphabet, max_frames)?;
                    save_slu_samples(dir, &samples, &bundle.ner_train, d, dropped)?;
                    Ok(samples)
                },
                |dir| load_slu_samples(dir, &tag_alphabet),
            )
        }
    }

    pub fn slu_model(&self, oracle: bool) -> Result<SluModel<f32>, PipelineError> {
        let stage = if oracle { "slu-oracle" } else { "slu-sim" };
        let samples = self.slu_data(oracle)?;
        let tag_alphabet = self.tag_alphabet()?;
        let config = self.config;
        let seed = self.seed;
        self.ensure(
            stage,
            |dir| {
                let (model, log) = train_slu::<f32>(
                    &samples,
                    &config.slu,
                    &config.slu_train,
                    &tag_alphabet,
                    derive_seed_for(seed, "train", stage),
                )?;
                checkpoint::save_slu(&model, &dir.join("slu.ckpt"))
                    .map_err(|e| PipelineError::Data(e.to_string()))?;
                save_log(&log, &dir.join("train_log.json"))?;
                Ok(model)
            },
            |dir| {
                checkpoint::load_slu(&dir.join("slu.ckpt"))
                    .map_err(|e| PipelineError::Data(e.to_string()))
            },
        )
    }

    pub fn synth_model(&self, mode: SynthMode) -> Result<AsrModel<f32>, PipelineError> {
        let base = self.asr()?;
        let world = self.world()?;
        let bundle = self.bundle()?;
        let tag_alphabet = self.tag_alphabet()?;
        let config = self.config;
        let seed = self.seed;
        self.ensure(
            mode.label(),
            |dir| {
                let (model, log) = train_synth_tagger(
                    &base,
                    &world,
                    &bundle.ner_train,
                    &tag_alphabet,
                    mode,
                    &config.synth_train,
                    derive_seed_for(seed, "train", mode.label()),
                )?;
                checkpoint::save_asr(&model, &dir.join("model.ckpt"))
                    .map_err(|e| PipelineError::Data(e.to_string()))?;
                save_log(&log, &dir.join("train_log.json"))?;
                Ok(model)
            },
            |dir| {
                checkpoint::load_asr(&dir.join("model.ckpt"))
                    .map_err(|e| PipelineError::Data(e.to_string()))
            },
        )
    }

    pub fn cascade_model(&self) -> Result<CascadeModel<f32>, PipelineError> {
        let bundle = self.bundle()?;
        let char_alphabet = self.char_alphabet()?;
        let tag_alphabet = self.tag_alphabet()?;
        let config = self.config;
        let seed = self.seed;
        self.ensure(
            "cascade",
            |dir| {
                let (model, log) = train_cascade::<f32>(
                    &bundle.ner_train,
                    &config.slu,
                    &config.cascade_train,
                    &char_alphabet,
                    &tag_alphabet,
                    config.cascade_upsample,
                    derive_seed_for(seed, "train", "cascade"),
                )?;
                checkpoint::save_cascade(&model, &dir.join("cascade.ckpt"))
                    .map_err(|e| PipelineError::Data(e.to_string()))?;
                save_log(&log, &dir.join("train_log.json"))?;
                Ok(model)
            },
            |dir| {
                checkpoint::load_cascade(&dir.join("cascade.ckpt"))
                    .map_err(|e| PipelineError::Data(e.to_string()))
            },
        )
    }

    fn report(
        &self,
        system: &str,
        build: impl FnOnce() -> Result<(EvalMetrics, EvalMetrics), PipelineError>,
    ) -> Result<EvalReport, PipelineError> {
        let seed = self.seed;
        let fingerprint = self.fingerprint.clone();
        self.ensure(
            &format!("report-{system}"),
            |dir| {
                let (dev, test) = build()?;
                let report = EvalReport {
                    system: system.to_string(),
                    seed,
                    config_fingerprint: fingerprint.clone(),
                    dev,
                    test,
                };
                std::fs::write(dir.join("report.json"), report.to_json())?;
                Ok(report)
            },
            |dir| {
                let text = std::fs::read_to_string(dir.join("report.json"))
                    .map_err(PipelineError::Io)?;
                EvalReport::from_json(&text)
            },
        )
    }
}

/// Copy the trained recognizer, extend its output layer with tag symbols,
/// and fine-tune it as a direct speech-to-tagged-text model on distorted
/// renderings. In frozen mode the speech encoder receives no updates.
pub fn train_synth_tagger(
    base: &AsrModel<f32>,
    world: &World,
    ner_train: &[TaggedUtterance],
    tag_alphabet: &SymbolAlphabet,
    mode: SynthMode,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(AsrModel<f32>, TrainingLog), PipelineError> {
    if ner_train.is_empty() {
        return Err(PipelineError::Data("empty tagged training set".to_string()));
    }
    let mut model = base.extend_with_tags(tag_alphabet.clone());
    let mut data = Vec::with_capacity(ner_train.len());
    for u in ner_train {
        let feats = render_synthetic(
            world,
            &u.tagged.bare_text(),
            derive_seed_for(seed, "synth-render", &u.id),
        )?;
        data.push(CtcSample {
            id: u.id.clone(),
            input: feats,
            target: to_symbols(&u.tagged, tag_alphabet)?,
        });
    }
    let frozen: Box<dyn Fn(&str) -> bool> = match mode {
        SynthMode::AllWeights => Box::new(|_: &str| false),
        SynthMode::FrozenEncoder => Box::new(|name: &str| name.starts_with("enc.")),
    };
    let log = train_ctc(
        &mut model,
        &data,
        hyper,
        tag_alphabet.blank(),
        seed,
        frozen.as_ref(),
        mode.label(),
    )?;
    Ok((model, log))
}

// ---------------------------------------------------------------------------
// Evaluation splits
// ---------------------------------------------------------------------------

struct SplitData {
    refs: Vec<TaggedText>,
    ref_texts: Vec<String>,
    features: Vec<Mat<f32>>,
}

fn test_split(bundle: &CorpusBundle) -> Result<SplitData, PipelineError> {
    let mut refs = Vec::new();
    let mut ref_texts = Vec::new();
    let mut features = Vec::new();
    for u in &bundle.test {
        let f = u.features.clone().ok_or_else(|| {
            PipelineError::Data(format!("test utterance {} has no features", u.id))
        })?;
        refs.push(u.tagged.clone());
        ref_texts.push(u.tagged.bare_text());
        features.push(f);
    }
    Ok(SplitData {
        refs,
        ref_texts,
        features,
    })
}

/// The dev partition carries tags only; features are rendered on demand.
fn dev_split(world: &World, bundle: &CorpusBundle, seed: u64) -> Result<SplitData, PipelineError> {
    let mut refs = Vec::new();
    let mut ref_texts = Vec::new();
    let mut features = Vec::new();
    for u in &bundle.ner_dev {
        let text = u.tagged.bare_text();
        features.push(render_natural(
            world,
            &text,
            derive_seed_for(seed, "render-dev", &u.id),
        )?);
        refs.push(u.tagged.clone());
        ref_texts.push(text);
    }
    Ok(SplitData {
        refs,
        ref_texts,
        features,
    })
}

fn metrics_from_hyps(
    split: &SplitData,
    hyps: Vec<TaggedText>,
    wer_pairs: Vec<(String, String)>,
    repairs: usize,
    matching: NeerMatch,
) -> Result<EvalMetrics, PipelineError> {
    let (counts, n_ref) = micro_wer(&wer_pairs);
    let wer = counts.distance() as f64 / n_ref.max(1) as f64;
    let neer = compute_neer(&split.refs, &hyps, matching)?;
    Ok(EvalMetrics::from_parts(wer, &neer, repairs))
}

fn eval_e2e_split(
    e2e: &EndToEndModel<f32>,
    split: &SplitData,
    matching: NeerMatch,
) -> Result<EvalMetrics, PipelineError> {
    let mut hyps = Vec::with_capacity(split.refs.len());
    let mut wer_pairs = Vec::with_capacity(split.refs.len());
    let mut repairs = 0usize;
    for (i, feats) in split.features.iter().enumerate() {
        let (tagged, rep) = e2e.run(feats)?;
        repairs += rep;
        wer_pairs.push((split.ref_texts[i].clone(), tagged.bare_text()));
        hyps.push(tagged);
    }
    metrics_from_hyps(split, hyps, wer_pairs, repairs, matching)
}

fn eval_tagging_recognizer_split(
    model: &AsrModel<f32>,
    split: &SplitData,
    matching: NeerMatch,
) -> Result<EvalMetrics, PipelineError> {
    let mut hyps = Vec::with_capacity(split.refs.len());
    let mut wer_pairs = Vec::with_capacity(split.refs.len());
    let mut repairs = 0usize;
    for (i, feats) in split.features.iter().enumerate() {
        let (tagged, rep) = model.decode_tagged(feats)?;
        repairs += rep;
        wer_pairs.push((split.ref_texts[i].clone(), tagged.bare_text()));
        hyps.push(tagged);
    }
    metrics_from_hyps(split, hyps, wer_pairs, repairs, matching)
}

/// Cascade evaluation: the tagger reads transcripts (manual references or
/// recognizer output); the report's word error rate is that of the
/// transcripts it read.
fn eval_cascade_split(
    model: &CascadeModel<f32>,
    split: &SplitData,
    inputs: &[String],
    matching: NeerMatch,
) -> Result<EvalMetrics, PipelineError> {
    let mut hyps = Vec::with_capacity(split.refs.len());
    let mut wer_pairs = Vec::with_capacity(split.refs.len());
    let mut repairs = 0usize;
    for (i, input) in inputs.iter().enumerate() {
        let (tagged, rep) = if input.trim().is_empty() {
            (TaggedText::default(), 0)
        } else {
            model.decode_text(input)?
        };
        repairs += rep;
        wer_pairs.push((split.ref_texts[i].clone(), input.clone()));
        hyps.push(tagged);
    }
    metrics_from_hyps(split, hyps, wer_pairs, repairs, matching)
}

// ---------------------------------------------------------------------------
// System runs
// ---------------------------------------------------------------------------

/// The proposed system: tagging decoder trained on simulated embeddings,
/// grafted onto the recognizer.
pub fn run_proposed(ctx: &RunContext<'_>) -> Result<EvalReport, PipelineError> {
    ctx.report("simulated", || {
        let e2e = compose_end_to_end(ctx.asr()?, ctx.slu_model(false)?)?;
        let world = ctx.world()?;
        let bundle = ctx.bundle()?;
        let dev = eval_e2e_split(&e2e, &dev_split(&world, &bundle, ctx.seed)?, ctx.config.neer_match)?;
        let test = eval_e2e_split(&e2e, &test_split(&bundle)?, ctx.config.neer_match)?;
        Ok((dev, test))
    })
}

/// Upper bound: the tagging decoder trains on embeddings extracted from real
/// (natural) renderings of the tagged training texts.
pub fn run_oracle(ctx: &RunContext<'_>) -> Result<EvalReport, PipelineError> {
    ctx.report("oracle", || {
        let e2e = compose_end_to_end(ctx.asr()?, ctx.slu_model(true)?)?;
        let world = ctx.world()?;
        let bundle = ctx.bundle()?;
        let dev = eval_e2e_split(&e2e, &dev_split(&world, &bundle, ctx.seed)?, ctx.config.neer_match)?;
        let test = eval_e2e_split(&e2e, &test_split(&bundle)?, ctx.config.neer_match)?;
        Ok((dev, test))
    })
}

/// Synthetic-speech baseline: fine-tune a tag-extended copy of the
/// recognizer on distorted renderings, evaluate on natural features.
pub fn run_synthetic_speech_baseline(
    ctx: &RunContext<'_>,
    mode: SynthMode,
) -> Result<EvalReport, PipelineError> {
    ctx.report(mode.label(), || {
        let model = ctx.synth_model(mode)?;
        let world = ctx.world()?;
        let bundle = ctx.bundle()?;
        let dev = eval_tagging_recognizer_split(
            &model,
            &dev_split(&world, &bundle, ctx.seed)?,
            ctx.config.neer_match,
        )?;
        let test =
            eval_tagging_recognizer_split(&model, &test_split(&bundle)?, ctx.config.neer_match)?;
        Ok((dev, test))
    })
}

/// Cascade baseline: text-to-text tagger applied to manual or automatic
/// transcripts of the evaluation sets.
pub fn run_cascade_baseline(
    ctx: &RunContext<'_>,
    mode: CascadeMode,
) -> Result<EvalReport, PipelineError> {
    ctx.report(mode.label(), || {
        let model = ctx.cascade_model()?;
        let world = ctx.world()?;
        let bundle = ctx.bundle()?;
        let dev = dev_split(&world, &bundle, ctx.seed)?;
        let test = test_split(&bundle)?;
        let (dev_inputs, test_inputs) = match mode {
            CascadeMode::Manual => (dev.ref_texts.clone(), test.ref_texts.clone()),
            CascadeMode::Automatic => {
                let asr = ctx.asr()?;
                let mut dev_in = Vec::with_capacity(dev.features.len());
                for f in &dev.features {
                    dev_in.push(asr.transcribe(f)?);
                }
                let mut test_in = Vec::with_capacity(test.features.len());
                for f in &test.features {
                    test_in.push(asr.transcribe(f)?);
                }
                (dev_in, test_in)
            }
        };
        let dev_m = eval_cascade_split(&model, &dev, &dev_inputs, ctx.config.neer_match)?;
        let test_m = eval_cascade_split(&model, &test, &test_inputs, ctx.config.neer_match)?;
        Ok((dev_m, test_m))
    })
}

pub const MATRIX_SYSTEMS: [&str; 6] = [
    "simulated",
    "synth-all",
    "synth-frozen",
    "oracle",
    "cascade-manual",
    "cascade-auto",
];

fn run_all_systems(
    config: &ExperimentConfig,
    cache: &StageCache,
    seed: u64,
) -> Result<Vec<EvalReport>, PipelineError> {
    let ctx = RunContext::new(config, cache, seed)?;
    Ok(vec![
        run_proposed(&ctx)?,
        run_synthetic_speech_baseline(&ctx, SynthMode::AllWeights)?,
        run_synthetic_speech_baseline(&ctx, SynthMode::FrozenEncoder)?,
        run_oracle(&ctx)?,
        run_cascade_baseline(&ctx, CascadeMode::Manual)?,
        run_cascade_baseline(&ctx, CascadeMode::Automatic)?,
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub seed: u64,
    pub dev_neer: f64,
    pub test_neer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub system: String,
    pub dev_mean: f64,
    pub dev_range: f64,
    pub test_mean: f64,
    pub test_range: f64,
    pub cells: Vec<MatrixCell>,
}

/// Seed-aggregated comparison of all systems, dev and test entity error
/// rates, mean and range across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixTable {
    pub config_fingerprint: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<MatrixRow>,
    pub elapsed_secs: f64,
}

impl MatrixTable {
    pub fn row(&self, system: &str) -> Option<&MatrixRow> {
        self.rows.iter().find(|r| r.system == system)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(s).map_err(|e| PipelineError::Data(format!("bad table json: {e}")))
    }

    /// Aligned plain-text rendering; values in percent.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>16} {:>16}\n",
            "system", "dev NEER %", "test NEER %"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<16} {:>9.1} ± {:>4.1} {:>9.1} ± {:>4.1}\n",
                row.system,
                100.0 * row.dev_mean,
                100.0 * row.dev_range / 2.0,
                100.0 * row.test_mean,
                100.0 * row.test_range / 2.0,
            ));
        }
        out.push_str(&format!(
            "seeds: {:?}   elapsed: {:.1}s\n",
            self.seeds, self.elapsed_secs
        ));
        out
    }
}

/// Run every system for every seed and aggregate. Seeds may execute in
/// parallel (bounded by the configured job count); each seed's work is
/// single-threaded and each (system, seed) report is bit-reproducible.
pub fn run_matrix(
    config: &ExperimentConfig,
    cache: &StageCache,
    seeds: &[u64],
) -> Result<MatrixTable, PipelineError> {
    if seeds.is_empty() {
        return Err(PipelineError::Config("matrix needs at least one seed".to_string()));
    }
    config.validate()?;
    let started = Instant::now();
    let jobs = if config.jobs == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        config.jobs
    }
    .clamp(1, seeds.len());

    let mut per_seed: BTreeMap<u64, Vec<EvalReport>> = BTreeMap::new();
    if jobs == 1 {
        for &seed in seeds {
            per_seed.insert(seed, run_all_systems(config, cache, seed)?);
        }
    } else {
        let chunks: Vec<Vec<u64>> = (0..jobs)
            .map(|j| seeds.iter().copied().skip(j).step_by(jobs).collect())
            .collect();
        let results = std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|chunk| {
                    scope.spawn(move || {
                        let mut out = Vec::new();
                        for &seed in chunk {
                            out.push((seed, run_all_systems(config, cache, seed)));
                        }
                        out
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("matrix worker panicked"))
                .collect::<Vec<_>>()
        });
        for (seed, result) in results {
            per_seed.insert(seed, result?);
        }
    }

    let mut rows = Vec::new();
    for system in MATRIX_SYSTEMS {
        let mut cells = Vec::new();
        for &seed in seeds {
            let report = per_seed[&seed]
                .iter()
                .find(|r| r.system == system)
                .expect("system present per seed");
            cells.push(MatrixCell {
                seed,
                dev_neer: report.dev.neer,
                test_neer: report.test.neer,
            });
        }
        let dev: Vec<f64> = cells.iter().map(|c| c.dev_neer).collect();
        let test: Vec<f64> = cells.iter().map(|c| c.test_neer).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let range = |v: &[f64]| {
            let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
            max - min
        };
        rows.push(MatrixRow {
            system: system.to_string(),
            dev_mean: mean(&dev),
            dev_range: range(&dev),
            test_mean: mean(&test),
            test_range: range(&test),
            cells,
        });
    }
    Ok(MatrixTable {
        config_fingerprint: config.fingerprint(),
        seeds: seeds.to_vec(),
        rows,
        elapsed_secs: started.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Stage artifact persistence helpers
// ---------------------------------------------------------------------------

fn save_log(log: &TrainingLog, path: &Path) -> Result<(), PipelineError> {
    let json = serde_json::to_string_pretty(log)
        .map_err(|e| PipelineError::Data(format!("log serialization: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

fn save_t2e_pairs(dir: &Path, data: &T2eDataset, dim: usize) -> Result<(), PipelineError> {
    let mut lines = String::new();
    let mut feats: Vec<(String, &Mat<f32>)> = Vec::new();
    for p in data.train.iter().chain(&data.val) {
        lines.push_str(&format!("{}\t{}\n", p.id, p.transcript));
        feats.push((p.id.clone(), &p.target));
    }
    std::fs::write(dir.join("transcripts.txt"), lines)?;
    write_feature_file(&dir.join("targets.feat"), &feats, dim)?;
    std::fs::write(
        dir.join("meta.txt"),
        format!("[meta]\ndropped = {}\n", data.dropped),
    )?;
    Ok(())
}

fn load_t2e_pairs(dir: &Path) -> Result<T2eDataset, PipelineError> {
    let lines = std::fs::read_to_string(dir.join("transcripts.txt"))?;
    let feats: BTreeMap<String, Mat<f32>> = read_feature_file(&dir.join("targets.feat"))?
        .into_iter()
        .collect();
    let meta = crate::kvtext::KvDoc::parse(&std::fs::read_to_string(dir.join("meta.txt"))?)
        .map_err(|e| PipelineError::Data(e.to_string()))?;
    let dropped = meta
        .get_usize("meta", "dropped")
        .map_err(|e| PipelineError::Data(e.to_string()))?;
    let mut pairs = Vec::new();
    for line in lines.lines() {
        if line.is_empty() {
            continue;
        }
        let (id, transcript) = line
            .split_once('\t')
            .ok_or_else(|| PipelineError::Data("bad transcripts line".to_string()))?;
        let target = feats
            .get(id)
            .ok_or_else(|| PipelineError::Data(format!("missing target for {id}")))?
            .clone();
        pairs.push(T2ePair {
            id: id.to_string(),
            transcript: transcript.to_string(),
            target,
        });
    }
    // Re-derive the deterministic split from the ids.
    let val_ids: std::collections::BTreeSet<String> =
        crate::rng::validation_ids(pairs.iter().map(|p| p.id.as_str()), 0.1)
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

fn save_slu_samples(
    dir: &Path,
    samples: &[SluSample],
    tagged: &[TaggedUtterance],
    dim: usize,
    dropped: usize,
) -> Result<(), PipelineError> {
    let tagged_by_id: BTreeMap<&str, &TaggedUtterance> =
        tagged.iter().map(|u| (u.id.as_str(), u)).collect();
    let mut lines = String::new();
    let mut feats: Vec<(String, &Mat<f32>)> = Vec::new();
    for s in samples {
        let u = tagged_by_id
            .get(s.id.as_str())
            .ok_or_else(|| PipelineError::Data(format!("sample {} has no source text", s.id)))?;
        lines.push_str(&format!("{}\t{}\n", s.id, serialize(&u.tagged)));
        feats.push((s.id.clone(), &s.input));
    }
    std::fs::write(dir.join("targets.txt"), lines)?;
    write_feature_file(&dir.join("inputs.feat"), &feats, dim)?;
    std::fs::write(dir.join("meta.txt"), format!("[meta]\ndropped = {dropped}\n"))?;
    Ok(())
}

fn load_slu_samples(
    dir: &Path,
    tag_alphabet: &SymbolAlphabet,
) -> Result<Vec<SluSample>, PipelineError> {
    let tags = tag_alphabet
        .tag_set()
        .ok_or_else(|| PipelineError::Data("alphabet has no tag symbols".to_string()))?;
    let lines = std::fs::read_to_string(dir.join("targets.txt"))?;
    let feats: BTreeMap<String, Mat<f32>> = read_feature_file(&dir.join("inputs.feat"))?
        .into_iter()
        .collect();
    let mut samples = Vec::new();
    for line in lines.lines() {
        if line.is_empty() {
            continue;
        }
        let (id, text) = line
            .split_once('\t')
            .ok_or_else(|| PipelineError::Data("bad targets line".to_string()))?;
        let tagged = parse_tagged(text, tags)?;
        let input = feats
            .get(id)
            .ok_or_else(|| PipelineError::Data(format!("missing input for {id}")))?
            .clone();
        samples.push(SluSample {
            id: id.to_string(),
            input,
            target: to_symbols(&tagged, tag_alphabet)?,
        });
    }
    Ok(samples)
}

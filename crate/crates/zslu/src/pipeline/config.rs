//! Experiment configuration: the world, partition sizes, every model width
//! and training hyperparameter, evaluation options, and the seed list. One
//! structured text document round-trips the whole thing; its hash (with the
//! run section excluded) fingerprints every cached stage artifact.

use std::path::Path;

use crate::asr::AsrConfig;
use crate::corpus::{CorpusSizes, WorldConfig};
use crate::kvtext::{KvDoc, KvError};
use crate::rng::stable_hash64;
use crate::slu::SluConfig;
use crate::t2e::T2eConfig;
use crate::tags::TagSet;
use crate::train::{OptimizerKind, TrainHyper};

use super::PipelineError;

/// Entity-unit equality used by the entity error rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeerMatch {
    /// Type and normalized surface string must both match.
    TypeAndSurface,
    /// Type alone decides a match.
    TypeOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub sizes: CorpusSizes,
    pub asr: AsrConfig,
    pub t2e: T2eConfig,
    pub slu: SluConfig,
    pub asr_train: TrainHyper,
    pub t2e_train: TrainHyper,
    pub slu_train: TrainHyper,
    pub synth_train: TrainHyper,
    pub cascade_train: TrainHyper,
    pub cascade_upsample: usize,
    pub neer_match: NeerMatch,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub allow_oracle: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Desk-scale preset: CPU-trainable in minutes, used by the test suite.
    pub fn desk() -> Self {
        ExperimentConfig {
            world: WorldConfig::default(),
            sizes: CorpusSizes {
                asr_train: 500,
                ner_train: 400,
                ner_dev: 50,
                test: 100,
            },
            asr: AsrConfig::default(),
            t2e: T2eConfig::default(),
            slu: SluConfig::default(),
            asr_train: TrainHyper {
                epochs: 45,
                lr: 5e-3,
                lr_halve_patience: 3,
                optimizer: OptimizerKind::Adam,
                ..TrainHyper::default()
            },
            t2e_train: TrainHyper {
                epochs: 90,
                lr: 3e-3,
                lr_halve_patience: 8,
                optimizer: OptimizerKind::Adam,
                ..TrainHyper::default()
            },
            slu_train: TrainHyper {
                epochs: 40,
                lr: 5e-3,
                lr_halve_patience: 3,
                optimizer: OptimizerKind::Adam,
                ..TrainHyper::default()
            },
            synth_train: TrainHyper {
                epochs: 40,
                lr: 5e-3,
                lr_halve_patience: 3,
                optimizer: OptimizerKind::Adam,
                ..TrainHyper::default()
            },
            cascade_train: TrainHyper {
                epochs: 40,
                lr: 5e-3,
                lr_halve_patience: 3,
                optimizer: OptimizerKind::Adam,
                ..TrainHyper::default()
            },
            cascade_upsample: 2,
            neer_match: NeerMatch::TypeAndSurface,
            seeds: vec![3, 4, 5],
            jobs: 0,
            allow_oracle: true,
        }
    }

    /// The layer widths reported for the reference systems, recorded as a
    /// preset. Training this preset needs far more data and compute than the
    /// synthetic world provides; it is not exercised by the test suite.
    pub fn paper_scale() -> Self {
        let mut c = Self::desk();
        c.asr.encoder_width = 512;
        c.asr.proj_widths = [1024, 512, 80];
        c.t2e.char_embed_dim = 512;
        c.t2e.conv_channels = 512;
        c.t2e.enc_lstm_width = 256;
        c.t2e.dec_lstm_width = 1024;
        c.t2e.prenet_dim = 256;
        c.t2e.attn_dim = 128;
        c.t2e.out_dim = 80;
        c.slu.input_dim = 80;
        c.slu.width = 512;
        c
    }

    pub fn preset(name: &str) -> Result<Self, PipelineError> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-scale" => Ok(Self::paper_scale()),
            other => Err(PipelineError::Config(format!("unknown preset `{other}`"))),
        }
    }

    /// Embedding dimension shared by the three models.
    pub fn embed_dim(&self) -> usize {
        self.asr.proj_widths[2]
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let d = self.embed_dim();
        if self.t2e.out_dim != d {
            return Err(PipelineError::Config(format!(
                "embedding dim mismatch: recognizer projects to {d}, text-to-embedding emits {}",
                self.t2e.out_dim
            )));
        }
        if self.slu.input_dim != d {
            return Err(PipelineError::Config(format!(
                "embedding dim mismatch: recognizer projects to {d}, tagger expects {}",
                self.slu.input_dim
            )));
        }
        if self.asr.feature_dim != self.world.feature_dim {
            return Err(PipelineError::Config(format!(
                "feature dim mismatch: world renders {}, recognizer expects {}",
                self.world.feature_dim, self.asr.feature_dim
            )));
        }
        if self.seeds.is_empty() {
            return Err(PipelineError::Config("no seeds configured".to_string()));
        }
        if self.cascade_upsample == 0 {
            return Err(PipelineError::Config("cascade upsample must be >= 1".to_string()));
        }
        Ok(())
    }

    fn hyper_to_doc(doc: &mut KvDoc, section: &str, h: &TrainHyper) {
        doc.set(section, "epochs", h.epochs);
        doc.set(section, "batch_size", h.batch_size);
        doc.set(section, "lr", h.lr);
        doc.set(section, "momentum", h.momentum);
        doc.set(section, "lr_halve_patience", h.lr_halve_patience);
        doc.set(section, "grad_clip", h.grad_clip);
        doc.set(
            section,
            "optimizer",
            match h.optimizer {
                OptimizerKind::SgdMomentum => "sgd-momentum",
                OptimizerKind::Adam => "adam",
            },
        );
    }

    fn hyper_from_doc(doc: &KvDoc, section: &str) -> Result<TrainHyper, KvError> {
        let optimizer = match doc.require(section, "optimizer")? {
            "adam" => OptimizerKind::Adam,
            _ => OptimizerKind::SgdMomentum,
        };
        Ok(TrainHyper {
            epochs: doc.get_usize(section, "epochs")?,
            batch_size: doc.get_usize(section, "batch_size")?,
            lr: doc.get_f64(section, "lr")?,
            momentum: doc.get_f64(section, "momentum")?,
            lr_halve_patience: doc.get_usize(section, "lr_halve_patience")?,
            grad_clip: doc.get_f64(section, "grad_clip")?,
            optimizer,
        })
    }

    pub fn to_doc(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        let w = &self.world;
        doc.set("world", "chars", w.chars.iter().collect::<String>());
        doc.set("world", "feature_dim", w.feature_dim);
        doc.set("world", "noise_sigma", w.noise_sigma);
        doc.set(
            "world",
            "duration_choices",
            w.duration_choices.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","),
        );
        doc.set("world", "synthetic_offset_norm", w.synthetic_offset_norm);
        doc.set("world", "synthetic_duration", w.synthetic_duration);
        doc.set("world", "min_separation_sigmas", w.min_separation_sigmas);
        doc.set("world", "word_len_min", w.word_len.0);
        doc.set("world", "word_len_max", w.word_len.1);
        doc.set("world", "filler_pools", w.filler_pools);
        doc.set("world", "pool_size", w.pool_size);
        doc.set("world", "gazetteer_entries", w.gazetteer_entries);
        doc.set(
            "world",
            "entity_types",
            w.entity_types.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(","),
        );

        doc.set("corpus", "asr_train", self.sizes.asr_train);
        doc.set("corpus", "ner_train", self.sizes.ner_train);
        doc.set("corpus", "ner_dev", self.sizes.ner_dev);
        doc.set("corpus", "test", self.sizes.test);

        doc.set("model.asr", "feature_dim", self.asr.feature_dim);
        doc.set("model.asr", "conv_kernel", self.asr.conv_kernel);
        doc.set("model.asr", "conv_stride", self.asr.conv_stride);
        doc.set("model.asr", "encoder_width", self.asr.encoder_width);
        doc.set(
            "model.asr",
            "proj_widths",
            format!(
                "{},{},{}",
                self.asr.proj_widths[0], self.asr.proj_widths[1], self.asr.proj_widths[2]
            ),
        );
        doc.set("model.asr", "leaky_slope", self.asr.leaky_slope);

        let t = &self.t2e;
        doc.set("model.t2e", "char_embed_dim", t.char_embed_dim);
        doc.set("model.t2e", "conv_channels", t.conv_channels);
        doc.set("model.t2e", "conv_kernel", t.conv_kernel);
        doc.set("model.t2e", "conv_layers", t.conv_layers);
        doc.set("model.t2e", "enc_lstm_width", t.enc_lstm_width);
        doc.set("model.t2e", "dec_lstm_width", t.dec_lstm_width);
        doc.set("model.t2e", "prenet_dim", t.prenet_dim);
        doc.set("model.t2e", "prenet_dropout", t.prenet_dropout);
        doc.set("model.t2e", "guided_attention_weight", t.guided_attention_weight);
        doc.set("model.t2e", "guided_attention_sigma", t.guided_attention_sigma);
        doc.set("model.t2e", "attn_dim", t.attn_dim);
        doc.set("model.t2e", "out_dim", t.out_dim);
        doc.set("model.t2e", "stop_threshold", t.stop_threshold);
        doc.set("model.t2e", "stop_pos_weight", t.stop_pos_weight);
        doc.set("model.t2e", "max_frames", t.max_frames);

        doc.set("model.slu", "input_dim", self.slu.input_dim);
        doc.set("model.slu", "width", self.slu.width);
        doc.set("model.slu", "layers", self.slu.layers);
        doc.set("model.slu", "cascade_upsample", self.cascade_upsample);

        Self::hyper_to_doc(&mut doc, "train.asr", &self.asr_train);
        Self::hyper_to_doc(&mut doc, "train.t2e", &self.t2e_train);
        Self::hyper_to_doc(&mut doc, "train.slu", &self.slu_train);
        Self::hyper_to_doc(&mut doc, "train.synth", &self.synth_train);
        Self::hyper_to_doc(&mut doc, "train.cascade", &self.cascade_train);

        doc.set(
            "eval",
            "neer_match",
            match self.neer_match {
                NeerMatch::TypeAndSurface => "type-and-surface",
                NeerMatch::TypeOnly => "type-only",
            },
        );

        doc.set(
            "run",
            "seeds",
            self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
        );
        doc.set("run", "jobs", self.jobs);
        doc.set("run", "allow_oracle", self.allow_oracle);
        doc
    }

    pub fn from_doc(doc: &KvDoc) -> Result<Self, PipelineError> {
        let kv = |e: KvError| PipelineError::Config(e.to_string());
        let world = WorldConfig {
            chars: doc.require("world", "chars").map_err(kv)?.chars().collect(),
            feature_dim: doc.get_usize("world", "feature_dim").map_err(kv)?,
            noise_sigma: doc.get_f64("world", "noise_sigma").map_err(kv)?,
            duration_choices: doc.get_usize_list("world", "duration_choices").map_err(kv)?,
            synthetic_offset_norm: doc.get_f64("world", "synthetic_offset_norm").map_err(kv)?,
            synthetic_duration: doc.get_usize("world", "synthetic_duration").map_err(kv)?,
            min_separation_sigmas: doc.get_f64("world", "min_separation_sigmas").map_err(kv)?,
            word_len: (
                doc.get_usize("world", "word_len_min").map_err(kv)?,
                doc.get_usize("world", "word_len_max").map_err(kv)?,
            ),
            filler_pools: doc.get_usize("world", "filler_pools").map_err(kv)?,
            pool_size: doc.get_usize("world", "pool_size").map_err(kv)?,
            gazetteer_entries: doc.get_usize("world", "gazetteer_entries").map_err(kv)?,
            entity_types: TagSet::new(&doc.get_list("world", "entity_types").map_err(kv)?)
                .map_err(|e| PipelineError::Config(e.to_string()))?,
        };
        let sizes = CorpusSizes {
            asr_train: doc.get_usize("corpus", "asr_train").map_err(kv)?,
            ner_train: doc.get_usize("corpus", "ner_train").map_err(kv)?,
            ner_dev: doc.get_usize("corpus", "ner_dev").map_err(kv)?,
            test: doc.get_usize("corpus", "test").map_err(kv)?,
        };
        let widths = doc.get_usize_list("model.asr", "proj_widths").map_err(kv)?;
        if widths.len() != 3 {
            return Err(PipelineError::Config(
                "model.asr proj_widths must have three entries".to_string(),
            ));
        }
        let asr = AsrConfig {
            feature_dim: doc.get_usize("model.asr", "feature_dim").map_err(kv)?,
            conv_kernel: doc.get_usize("model.asr", "conv_kernel").map_err(kv)?,
            conv_stride: doc.get_usize("model.asr", "conv_stride").map_err(kv)?,
            encoder_width: doc.get_usize("model.asr", "encoder_width").map_err(kv)?,
            proj_widths: [widths[0], widths[1], widths[2]],
            leaky_slope: doc.get_f64("model.asr", "leaky_slope").map_err(kv)?,
        };
        let t2e = T2eConfig {
            char_embed_dim: doc.get_usize("model.t2e", "char_embed_dim").map_err(kv)?,
            conv_channels: doc.get_usize("model.t2e", "conv_channels").map_err(kv)?,
            conv_kernel: doc.get_usize("model.t2e", "conv_kernel").map_err(kv)?,
            conv_layers: doc.get_usize("model.t2e", "conv_layers").map_err(kv)?,
            enc_lstm_width: doc.get_usize("model.t2e", "enc_lstm_width").map_err(kv)?,
            dec_lstm_width: doc.get_usize("model.t2e", "dec_lstm_width").map_err(kv)?,
            prenet_dim: doc.get_usize("model.t2e", "prenet_dim").map_err(kv)?,
            prenet_dropout: doc.get_f64("model.t2e", "prenet_dropout").map_err(kv)?,
            guided_attention_weight: doc
                .get_f64("model.t2e", "guided_attention_weight")
                .map_err(kv)?,
            guided_attention_sigma: doc
                .get_f64("model.t2e", "guided_attention_sigma")
                .map_err(kv)?,
            attn_dim: doc.get_usize("model.t2e", "attn_dim").map_err(kv)?,
            out_dim: doc.get_usize("model.t2e", "out_dim").map_err(kv)?,
            stop_threshold: doc.get_f64("model.t2e", "stop_threshold").map_err(kv)?,
            stop_pos_weight: doc.get_f64("model.t2e", "stop_pos_weight").map_err(kv)?,
            max_frames: doc.get_usize("model.t2e", "max_frames").map_err(kv)?,
        };
        let slu = SluConfig {
            input_dim: doc.get_usize("model.slu", "input_dim").map_err(kv)?,
            width: doc.get_usize("model.slu", "width").map_err(kv)?,
            layers: doc.get_usize("model.slu", "layers").map_err(kv)?,
        };
        let neer_match = match doc.require("eval", "neer_match").map_err(kv)? {
            "type-only" => NeerMatch::TypeOnly,
            _ => NeerMatch::TypeAndSurface,
        };
        let seeds = doc
            .get_list("run", "seeds")
            .map_err(kv)?
            .iter()
            .map(|s| s.parse::<u64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| PipelineError::Config("bad seeds list".to_string()))?;
        let config = ExperimentConfig {
            world,
            sizes,
            asr,
            t2e,
            slu,
            asr_train: Self::hyper_from_doc(doc, "train.asr").map_err(kv)?,
            t2e_train: Self::hyper_from_doc(doc, "train.t2e").map_err(kv)?,
            slu_train: Self::hyper_from_doc(doc, "train.slu").map_err(kv)?,
            synth_train: Self::hyper_from_doc(doc, "train.synth").map_err(kv)?,
            cascade_train: Self::hyper_from_doc(doc, "train.cascade").map_err(kv)?,
            cascade_upsample: doc.get_usize("model.slu", "cascade_upsample").map_err(kv)?,
            neer_match,
            seeds,
            jobs: doc.get_usize("run", "jobs").map_err(kv)?,
            allow_oracle: doc.get_bool("run", "allow_oracle").map_err(kv)?,
        };
        config.validate()?;
        Ok(config)
    }

    /// Stable hex fingerprint of the canonical serialization, with the run
    /// section (seeds, jobs, oracle switch) excluded so adding a seed never
    /// invalidates cached stages.
    pub fn fingerprint(&self) -> String {
        let doc = self.to_doc();
        let mut canonical = String::new();
        for line in doc.to_text().lines() {
            if line == "[run]" {
                break;
            }
            canonical.push_str(line);
            canonical.push('\n');
        }
        format!("{:016x}", stable_hash64(&[canonical.as_bytes()]))
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_doc().to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let doc = KvDoc::parse(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
        Self::from_doc(&doc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_preset_validates_and_round_trips() {
        let cfg = ExperimentConfig::desk();
        cfg.validate().unwrap();
        let doc = cfg.to_doc();
        let back = ExperimentConfig::from_doc(&KvDoc::parse(&doc.to_text()).unwrap()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.fingerprint(), back.fingerprint());
    }

    #[test]
    fn paper_scale_preset_keeps_reported_widths() {
        let cfg = ExperimentConfig::paper_scale();
        cfg.validate().unwrap();
        assert_eq!(cfg.asr.proj_widths, [1024, 512, 80]);
        assert_eq!(cfg.slu.width, 512);
        assert_eq!(cfg.slu.layers, 5);
        assert_eq!(cfg.embed_dim(), 80);
    }

    #[test]
    fn fingerprint_ignores_run_section_only() {
        let base = ExperimentConfig::desk();
        let mut more_seeds = base.clone();
        more_seeds.seeds = vec![1, 2, 3, 4, 5];
        more_seeds.jobs = 7;
        assert_eq!(base.fingerprint(), more_seeds.fingerprint());
        let mut other = base.clone();
        other.slu.width = 48;
        assert_ne!(base.fingerprint(), other.fingerprint());
    }

    #[test]
    fn inconsistent_embedding_dims_are_rejected() {
        let mut cfg = ExperimentConfig::desk();
        cfg.slu.input_dim = 24;
        assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))));
    }
}

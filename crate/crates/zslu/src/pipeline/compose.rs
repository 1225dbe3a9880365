//! End-to-end composition: keep the recognizer's layers up to and including
//! the embedding layer, drop its output softmax, and attach the tagging
//! decoder. Running the composed model is by construction the same code path
//! as extracting embeddings and decoding them in two steps.

use std::path::Path;

use crate::asr::AsrModel;
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::kvtext::KvDoc;
use crate::mat::Mat;
use crate::scalar::Scalar;
use crate::slu::SluModel;
use crate::tags::TaggedText;
use crate::train::TrainError;

pub struct EndToEndModel<F: Scalar> {
    pub asr: AsrModel<F>,
    pub slu: SluModel<F>,
}

/// Truncate the recognizer at its embedding layer and attach the tagger.
pub fn compose_end_to_end<F: Scalar>(
    asr: AsrModel<F>,
    slu: SluModel<F>,
) -> Result<EndToEndModel<F>, TrainError> {
    if asr.embed_dim() != slu.input_dim() {
        return Err(TrainError::DimensionMismatch {
            expected: slu.input_dim(),
            got: asr.embed_dim(),
        });
    }
    Ok(EndToEndModel { asr, slu })
}

impl<F: Scalar> EndToEndModel<F> {
    /// Speech features in, tagged text and repair count out.
    pub fn run(&self, features: &Mat<F>) -> Result<(TaggedText, usize), TrainError> {
        let emb = self.asr.extract_embeddings(features)?;
        self.slu.decode(&emb)
    }
}

/// Composed checkpoint: the truncated recognizer (no output layer) plus the
/// tagger, under one kind tag.
pub fn save_e2e(model: &EndToEndModel<f32>, path: &Path) -> Result<(), CheckpointError> {
    let mut doc = KvDoc::new();
    let c = &model.asr.cfg;
    doc.set("asr", "feature_dim", c.feature_dim);
    doc.set("asr", "conv_kernel", c.conv_kernel);
    doc.set("asr", "conv_stride", c.conv_stride);
    doc.set("asr", "encoder_width", c.encoder_width);
    doc.set(
        "asr",
        "proj_widths",
        format!("{},{},{}", c.proj_widths[0], c.proj_widths[1], c.proj_widths[2]),
    );
    doc.set("asr", "leaky_slope", c.leaky_slope);
    doc.set("slu", "input_dim", model.slu.cfg.input_dim);
    doc.set("slu", "width", model.slu.cfg.width);
    doc.set("slu", "layers", model.slu.cfg.layers);
    doc.set(
        "alphabet",
        "chars",
        model.slu.alphabet.chars().iter().collect::<String>(),
    );
    if let Some(tags) = model.slu.alphabet.tag_set() {
        doc.set(
            "alphabet",
            "entity_types",
            tags.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(","),
        );
    }
    let mut params: Vec<(String, Mat<f32>)> = Vec::new();
    model.asr.visit_params(&mut |name, mat| {
        if !name.starts_with("out.") {
            params.push((format!("asr.{name}"), mat.clone()));
        }
    });
    model.slu.visit_params(&mut |name, mat| {
        params.push((format!("slu.{name}"), mat.clone()));
    });
    save_checkpoint(path, "e2e", &doc, &params)
}

pub fn load_e2e(path: &Path) -> Result<EndToEndModel<f32>, CheckpointError> {
    let err = |reason: String| CheckpointError::Format {
        file: path.display().to_string(),
        reason,
    };
    let ckpt = load_checkpoint(path)?;
    if ckpt.kind != "e2e" {
        return Err(err(format!("kind `{}`, expected `e2e`", ckpt.kind)));
    }
    let doc = &ckpt.config;
    let kv = |e: crate::kvtext::KvError| err(e.to_string());
    let widths = doc.get_usize_list("asr", "proj_widths").map_err(kv)?;
    if widths.len() != 3 {
        return Err(err("proj_widths must have three entries".to_string()));
    }
    let asr_cfg = crate::asr::AsrConfig {
        feature_dim: doc.get_usize("asr", "feature_dim").map_err(kv)?,
        conv_kernel: doc.get_usize("asr", "conv_kernel").map_err(kv)?,
        conv_stride: doc.get_usize("asr", "conv_stride").map_err(kv)?,
        encoder_width: doc.get_usize("asr", "encoder_width").map_err(kv)?,
        proj_widths: [widths[0], widths[1], widths[2]],
        leaky_slope: doc.get_f64("asr", "leaky_slope").map_err(kv)?,
    };
    let slu_cfg = crate::slu::SluConfig {
        input_dim: doc.get_usize("slu", "input_dim").map_err(kv)?,
        width: doc.get_usize("slu", "width").map_err(kv)?,
        layers: doc.get_usize("slu", "layers").map_err(kv)?,
    };
    let chars: Vec<char> = doc.require("alphabet", "chars").map_err(kv)?.chars().collect();
    let types = doc
        .get_list("alphabet", "entity_types")
        .map_err(kv)?;
    let tags = crate::tags::TagSet::new(&types).map_err(|e| err(e.to_string()))?;
    let slu_alphabet = crate::alphabet::SymbolAlphabet::with_tags(&chars, tags)
        .map_err(|e| err(e.to_string()))?;
    let asr_alphabet =
        crate::alphabet::SymbolAlphabet::chars_only(&chars).map_err(|e| err(e.to_string()))?;

    let mut asr = AsrModel::new(&asr_cfg, asr_alphabet, &mut crate::rng::rng_from(0));
    let mut slu = SluModel::new(&slu_cfg, slu_alphabet, &mut crate::rng::rng_from(0));
    let mut missing: Vec<String> = Vec::new();
    {
        let mut params = Vec::new();
        asr.collect_params_with(&mut params);
        for p in params.iter_mut() {
            if p.name.starts_with("out.") {
                // The transcription head is not part of the composed model.
                p.value.fill(0.0);
                continue;
            }
            match ckpt.params.get(&format!("asr.{}", p.name)) {
                Some(m) if m.rows() == p.value.rows() && m.cols() == p.value.cols() => {
                    *p.value = m.clone();
                }
                _ => missing.push(format!("asr.{}", p.name)),
            }
        }
    }
    {
        let mut params = Vec::new();
        slu.collect_params_with(&mut params);
        for p in params.iter_mut() {
            match ckpt.params.get(&format!("slu.{}", p.name)) {
                Some(m) if m.rows() == p.value.rows() && m.cols() == p.value.cols() => {
                    *p.value = m.clone();
                }
                _ => missing.push(format!("slu.{}", p.name)),
            }
        }
    }
    if !missing.is_empty() {
        return Err(err(format!("missing or misshapen blocks: {missing:?}")));
    }
    Ok(EndToEndModel { asr, slu })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alphabet::SymbolAlphabet;
    use crate::asr::AsrConfig;
    use crate::rng::rng_from;
    use crate::slu::SluConfig;
    use crate::tags::TagSet;

    fn models() -> (AsrModel<f32>, SluModel<f32>) {
        let chars: Vec<char> = ('a'..='z').collect();
        let asr_alpha = SymbolAlphabet::chars_only(&chars).unwrap();
        let slu_alpha = SymbolAlphabet::with_tags(&chars, TagSet::default_types()).unwrap();
        let asr_cfg = AsrConfig {
            feature_dim: 4,
            conv_kernel: 3,
            conv_stride: 2,
            encoder_width: 6,
            proj_widths: [8, 6, 4],
            leaky_slope: 0.01,
        };
        let slu_cfg = SluConfig {
            input_dim: 4,
            width: 5,
            layers: 2,
        };
        (
            AsrModel::new(&asr_cfg, asr_alpha, &mut rng_from(81)),
            SluModel::new(&slu_cfg, slu_alpha, &mut rng_from(82)),
        )
    }

    #[test]
    fn composed_run_equals_two_step_path_bit_exact() {
        let (asr, slu) = models();
        let e2e = compose_end_to_end(asr, slu).unwrap();
        for k in 0..100 {
            let t = 1 + k % 23;
            let feats = Mat::from_fn(t, 4, |r, c| (((r + 1) * (c + 3) + k) as f32 * 0.113).sin());
            let two_step = e2e
                .slu
                .decode(&e2e.asr.extract_embeddings(&feats).unwrap())
                .unwrap();
            assert_eq!(e2e.run(&feats).unwrap(), two_step);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let (asr, _) = models();
        let chars: Vec<char> = ('a'..='z').collect();
        let slu_alpha = SymbolAlphabet::with_tags(&chars, TagSet::default_types()).unwrap();
        let bad_slu = SluModel::<f32>::new(
            &SluConfig {
                input_dim: 8,
                width: 5,
                layers: 2,
            },
            slu_alpha,
            &mut rng_from(83),
        );
        assert!(matches!(
            compose_end_to_end(asr, bad_slu),
            Err(TrainError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let (asr, slu) = models();
        let e2e = compose_end_to_end(asr, slu).unwrap();
        let path =
            std::env::temp_dir().join(format!("zslu-e2e-{}.ckpt", std::process::id()));
        save_e2e(&e2e, &path).unwrap();
        let back = load_e2e(&path).unwrap();
        for k in 0..20 {
            let t = 2 + k % 11;
            let feats = Mat::from_fn(t, 4, |r, c| (((r + 2) * (c + 1) + k) as f32 * 0.171).cos());
            assert_eq!(e2e.run(&feats).unwrap(), back.run(&feats).unwrap());
        }
        std::fs::remove_file(&path).unwrap();
    }
}

//! Model checkpoints: a small header (magic, version, model kind, config
//! document) followed by named parameter blocks with shape prefixes, stored
//! as little-endian 32-bit floats. One format for every model kind.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use thiserror::Error;

use crate::alphabet::SymbolAlphabet;
use crate::asr::{AsrConfig, AsrModel};
use crate::kvtext::KvDoc;
use crate::mat::Mat;
use crate::rng::rng_from;
use crate::slu::{CascadeModel, SluConfig, SluModel};
use crate::t2e::{T2eConfig, T2eModel};
use crate::tags::TagSet;

pub const MODEL_MAGIC: &[u8; 5] = b"ZSLUM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error in {file}: {reason}")]
    Format { file: String, reason: String },
}

fn format_err(path: &Path, reason: impl Into<String>) -> CheckpointError {
    CheckpointError::Format {
        file: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Raw checkpoint contents: kind tag, config document, named blocks.
pub struct Checkpoint {
    pub kind: String,
    pub config: KvDoc,
    pub params: BTreeMap<String, Mat<f32>>,
}

pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    config: &KvDoc,
    params: &[(String, Mat<f32>)],
) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(kind.len() as u16).to_le_bytes());
    buf.extend_from_slice(kind.as_bytes());
    let cfg_text = config.to_text();
    buf.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg_text.as_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, mat) in params {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(mat.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(mat.cols() as u32).to_le_bytes());
        for &v in mat.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|_| format_err(path, "missing file"))?
        .read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *off + n > bytes.len() {
            return Err(format_err(path, "truncated"));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 5)? != MODEL_MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let kind_len = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
    let kind = String::from_utf8(take(&mut off, kind_len)?.to_vec())
        .map_err(|_| format_err(path, "non-utf8 kind"))?;
    let cfg_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let cfg_text = String::from_utf8(take(&mut off, cfg_len)?.to_vec())
        .map_err(|_| format_err(path, "non-utf8 config"))?;
    let config = KvDoc::parse(&cfg_text).map_err(|e| format_err(path, e.to_string()))?;
    let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
            .map_err(|_| format_err(path, "non-utf8 block name"))?;
        let rows = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let raw = take(&mut off, rows * cols * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if params.insert(name.clone(), Mat::from_vec(rows, cols, data)).is_some() {
            return Err(format_err(path, format!("duplicate block `{name}`")));
        }
    }
    if off != bytes.len() {
        return Err(format_err(path, "trailing bytes"));
    }
    Ok(Checkpoint { kind, config, params })
}

fn alphabet_to_doc(doc: &mut KvDoc, alphabet: &SymbolAlphabet) {
    doc.set("alphabet", "chars", alphabet.chars().iter().collect::<String>());
    if let Some(tags) = alphabet.tag_set() {
        doc.set(
            "alphabet",
            "entity_types",
            tags.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(","),
        );
    }
}

fn alphabet_from_doc(doc: &KvDoc, path: &Path) -> Result<SymbolAlphabet, CheckpointError> {
    let chars: Vec<char> = doc
        .require("alphabet", "chars")
        .map_err(|e| format_err(path, e.to_string()))?
        .chars()
        .collect();
    match doc.get("alphabet", "entity_types") {
        Some(types) => {
            let names: Vec<String> = types.split(',').map(|s| s.trim().to_string()).collect();
            let tags = TagSet::new(&names).map_err(|e| format_err(path, e.to_string()))?;
            SymbolAlphabet::with_tags(&chars, tags).map_err(|e| format_err(path, e.to_string()))
        }
        None => SymbolAlphabet::chars_only(&chars).map_err(|e| format_err(path, e.to_string())),
    }
}

fn collect_visited(visit: impl Fn(&mut dyn FnMut(&str, &Mat<f32>))) -> Vec<(String, Mat<f32>)> {
    let mut out = Vec::new();
    visit(&mut |name: &str, mat: &Mat<f32>| {
        out.push((name.to_string(), mat.clone()));
    });
    out
}

fn fill_from_map(
    params: &mut [crate::nn::ParamRef<'_, f32>],
    map: &BTreeMap<String, Mat<f32>>,
    path: &Path,
) -> Result<(), CheckpointError> {
    if params.len() != map.len() {
        return Err(format_err(
            path,
            format!("expected {} parameter blocks, found {}", params.len(), map.len()),
        ));
    }
    for p in params.iter_mut() {
        let stored = map
            .get(&p.name)
            .ok_or_else(|| format_err(path, format!("missing block `{}`", p.name)))?;
        if stored.rows() != p.value.rows() || stored.cols() != p.value.cols() {
            return Err(format_err(
                path,
                format!(
                    "block `{}` has shape {}x{}, expected {}x{}",
                    p.name,
                    stored.rows(),
                    stored.cols(),
                    p.value.rows(),
                    p.value.cols()
                ),
            ));
        }
        *p.value = stored.clone();
    }
    Ok(())
}

// --- recognizer ---

pub fn save_asr(model: &AsrModel<f32>, path: &Path) -> Result<(), CheckpointError> {
    let mut doc = KvDoc::new();
    let c = &model.cfg;
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
    alphabet_to_doc(&mut doc, &model.alphabet);
    let params = collect_visited(|f| model.visit_params(f));
    save_checkpoint(path, "asr", &doc, &params)
}

pub fn load_asr(path: &Path) -> Result<AsrModel<f32>, CheckpointError> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.kind != "asr" {
        return Err(format_err(path, format!("kind `{}`, expected `asr`", ckpt.kind)));
    }
    let doc = &ckpt.config;
    let kv = |e: crate::kvtext::KvError| format_err(path, e.to_string());
    let widths = doc.get_usize_list("asr", "proj_widths").map_err(kv)?;
    if widths.len() != 3 {
        return Err(format_err(path, "proj_widths must have three entries"));
    }
    let cfg = AsrConfig {
        feature_dim: doc.get_usize("asr", "feature_dim").map_err(kv)?,
        conv_kernel: doc.get_usize("asr", "conv_kernel").map_err(kv)?,
        conv_stride: doc.get_usize("asr", "conv_stride").map_err(kv)?,
        encoder_width: doc.get_usize("asr", "encoder_width").map_err(kv)?,
        proj_widths: [widths[0], widths[1], widths[2]],
        leaky_slope: doc.get_f64("asr", "leaky_slope").map_err(kv)?,
    };
    let alphabet = alphabet_from_doc(doc, path)?;
    let mut model = AsrModel::new(&cfg, alphabet, &mut rng_from(0));
    let mut params = Vec::new();
    model.collect_params_with(&mut params);
    fill_from_map(&mut params, &ckpt.params, path)?;
    Ok(model)
}

// --- text-to-embedding ---

pub fn save_t2e(model: &T2eModel<f32>, path: &Path) -> Result<(), CheckpointError> {
    let mut doc = KvDoc::new();
    let c = &model.cfg;
    doc.set("t2e", "char_embed_dim", c.char_embed_dim);
    doc.set("t2e", "conv_channels", c.conv_channels);
    doc.set("t2e", "conv_kernel", c.conv_kernel);
    doc.set("t2e", "conv_layers", c.conv_layers);
    doc.set("t2e", "enc_lstm_width", c.enc_lstm_width);
    doc.set("t2e", "dec_lstm_width", c.dec_lstm_width);
    doc.set("t2e", "prenet_dim", c.prenet_dim);
    doc.set("t2e", "prenet_dropout", c.prenet_dropout);
    doc.set("t2e", "guided_attention_weight", c.guided_attention_weight);
    doc.set("t2e", "guided_attention_sigma", c.guided_attention_sigma);
    doc.set("t2e", "attn_dim", c.attn_dim);
    doc.set("t2e", "out_dim", c.out_dim);
    doc.set("t2e", "stop_threshold", c.stop_threshold);
    doc.set("t2e", "stop_pos_weight", c.stop_pos_weight);
    doc.set("t2e", "max_frames", c.max_frames);
    let (mean, std) = model.output_stats();
    doc.set(
        "t2e",
        "out_mean",
        mean.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
    );
    doc.set(
        "t2e",
        "out_std",
        std.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
    );
    alphabet_to_doc(&mut doc, &model.alphabet);
    let params = collect_visited(|f| model.visit_params(f));
    save_checkpoint(path, "t2e", &doc, &params)
}

pub fn load_t2e(path: &Path) -> Result<T2eModel<f32>, CheckpointError> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.kind != "t2e" {
        return Err(format_err(path, format!("kind `{}`, expected `t2e`", ckpt.kind)));
    }
    let doc = &ckpt.config;
    let kv = |e: crate::kvtext::KvError| format_err(path, e.to_string());
    let cfg = T2eConfig {
        char_embed_dim: doc.get_usize("t2e", "char_embed_dim").map_err(kv)?,
        conv_channels: doc.get_usize("t2e", "conv_channels").map_err(kv)?,
        conv_kernel: doc.get_usize("t2e", "conv_kernel").map_err(kv)?,
        conv_layers: doc.get_usize("t2e", "conv_layers").map_err(kv)?,
        enc_lstm_width: doc.get_usize("t2e", "enc_lstm_width").map_err(kv)?,
        dec_lstm_width: doc.get_usize("t2e", "dec_lstm_width").map_err(kv)?,
        prenet_dim: doc.get_usize("t2e", "prenet_dim").map_err(kv)?,
        prenet_dropout: doc.get_f64("t2e", "prenet_dropout").map_err(kv)?,
        guided_attention_weight: doc.get_f64("t2e", "guided_attention_weight").map_err(kv)?,
        guided_attention_sigma: doc.get_f64("t2e", "guided_attention_sigma").map_err(kv)?,
        attn_dim: doc.get_usize("t2e", "attn_dim").map_err(kv)?,
        out_dim: doc.get_usize("t2e", "out_dim").map_err(kv)?,
        stop_threshold: doc.get_f64("t2e", "stop_threshold").map_err(kv)?,
        stop_pos_weight: doc.get_f64("t2e", "stop_pos_weight").map_err(kv)?,
        max_frames: doc.get_usize("t2e", "max_frames").map_err(kv)?,
    };
    let alphabet = alphabet_from_doc(doc, path)?;
    let mut model = T2eModel::new(&cfg, alphabet, &mut rng_from(0));
    let mean = doc.get_f64_list("t2e", "out_mean").map_err(kv)?;
    let std = doc.get_f64_list("t2e", "out_std").map_err(kv)?;
    if mean.len() != cfg.out_dim || std.len() != cfg.out_dim {
        return Err(format_err(path, "output stats length mismatch"));
    }
    model.set_output_stats(
        mean.into_iter().map(|v| v as f32).collect(),
        std.into_iter().map(|v| v as f32).collect(),
    );
    let mut params = Vec::new();
    model.collect_params_with(&mut params);
    fill_from_map(&mut params, &ckpt.params, path)?;
    Ok(model)
}

// --- tagging decoder ---

fn slu_config_to_doc(doc: &mut KvDoc, section: &str, c: &SluConfig) {
    doc.set(section, "input_dim", c.input_dim);
    doc.set(section, "width", c.width);
    doc.set(section, "layers", c.layers);
}

fn slu_config_from_doc(
    doc: &KvDoc,
    section: &str,
    path: &Path,
) -> Result<SluConfig, CheckpointError> {
    let kv = |e: crate::kvtext::KvError| format_err(path, e.to_string());
    Ok(SluConfig {
        input_dim: doc.get_usize(section, "input_dim").map_err(kv)?,
        width: doc.get_usize(section, "width").map_err(kv)?,
        layers: doc.get_usize(section, "layers").map_err(kv)?,
    })
}

pub fn save_slu(model: &SluModel<f32>, path: &Path) -> Result<(), CheckpointError> {
    let mut doc = KvDoc::new();
    slu_config_to_doc(&mut doc, "slu", &model.cfg);
    alphabet_to_doc(&mut doc, &model.alphabet);
    let params = collect_visited(|f| model.visit_params(f));
    save_checkpoint(path, "slu", &doc, &params)
}

pub fn load_slu(path: &Path) -> Result<SluModel<f32>, CheckpointError> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.kind != "slu" {
        return Err(format_err(path, format!("kind `{}`, expected `slu`", ckpt.kind)));
    }
    let cfg = slu_config_from_doc(&ckpt.config, "slu", path)?;
    let alphabet = alphabet_from_doc(&ckpt.config, path)?;
    let mut model = SluModel::new(&cfg, alphabet, &mut rng_from(0));
    let mut params = Vec::new();
    model.collect_params_with(&mut params);
    fill_from_map(&mut params, &ckpt.params, path)?;
    Ok(model)
}

// --- text-to-text tagger ---

pub fn save_cascade(model: &CascadeModel<f32>, path: &Path) -> Result<(), CheckpointError> {
    let mut doc = KvDoc::new();
    slu_config_to_doc(&mut doc, "cascade", &model.cfg);
    doc.set("cascade", "upsample", model.upsample);
    // Input alphabet is the character prefix of the output alphabet.
    alphabet_to_doc(&mut doc, &model.out_alphabet);
    let params = collect_visited(|f| model.visit_params(f));
    save_checkpoint(path, "cascade", &doc, &params)
}

pub fn load_cascade(path: &Path) -> Result<CascadeModel<f32>, CheckpointError> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.kind != "cascade" {
        return Err(format_err(path, format!("kind `{}`, expected `cascade`", ckpt.kind)));
    }
    let kv = |e: crate::kvtext::KvError| format_err(path, e.to_string());
    let cfg = slu_config_from_doc(&ckpt.config, "cascade", path)?;
    let upsample = ckpt.config.get_usize("cascade", "upsample").map_err(kv)?;
    let out_alphabet = alphabet_from_doc(&ckpt.config, path)?;
    let in_alphabet = SymbolAlphabet::chars_only(out_alphabet.chars())
        .map_err(|e| format_err(path, e.to_string()))?;
    let mut model = CascadeModel::new(&cfg, in_alphabet, out_alphabet, upsample, &mut rng_from(0));
    let mut params = Vec::new();
    model.collect_params_with(&mut params);
    fill_from_map(&mut params, &ckpt.params, path)?;
    Ok(model)
}

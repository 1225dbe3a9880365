//! Synthetic feature world standing in for real speech corpora: characters
//! map to separable prototype vectors, utterances render as noisy prototype
//! frames with random per-character durations, and a distorted renderer with
//! a fixed offset and rigid durations plays the role of synthesized speech.
//! A template grammar over entity gazetteers generates the three data
//! conditions: a paired recognizer corpus without tags, a text-only tagged
//! corpus, and a paired tagged test corpus.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use rand_chacha::rand_core::Rng as RngCore;
use thiserror::Error;

use crate::kvtext::KvDoc;
use crate::mat::Mat;
use crate::rng::{
    derive_seed, derive_seed_for, rng_from, shuffle, standard_normal, uniform_usize,
};
use crate::tags::{parse_tagged, serialize, CodecError, EntitySpan, TagSet, TaggedText};

pub const FEATURE_MAGIC: &[u8; 5] = b"ZSLUF";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("config error: {0}")]
    Config(String),
    #[error("empty text")]
    EmptyText,
    #[error("character {0:?} not in the world inventory")]
    OutOfInventory(char),
    #[error("codec: {0}")]
    Codec(#[from] CodecError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error in {file}: {reason}")]
    Format { file: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub chars: Vec<char>,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub duration_choices: Vec<usize>,
    pub synthetic_offset_norm: f64,
    pub synthetic_duration: usize,
    /// Prototype separation floor, in multiples of the noise sigma.
    pub min_separation_sigmas: f64,
    pub word_len: (usize, usize),
    pub filler_pools: usize,
    pub pool_size: usize,
    pub gazetteer_entries: usize,
    pub entity_types: TagSet,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            chars: ('a'..='z').collect(),
            feature_dim: 8,
            noise_sigma: 0.1,
            duration_choices: vec![2, 3, 4],
            synthetic_offset_norm: 0.5,
            synthetic_duration: 3,
            min_separation_sigmas: 8.0,
            word_len: (3, 7),
            filler_pools: 10,
            pool_size: 8,
            gazetteer_entries: 12,
            entity_types: TagSet::default_types(),
        }
    }
}

/// Immutable generation world: lexicon, gazetteers, acoustic prototypes
/// (one per character plus the word separator), and the synthetic-shift.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub seed: u64,
    pub lexicon: Vec<String>,
    pub gazetteers: BTreeMap<String, Vec<Vec<String>>>,
    prototypes: Vec<Vec<f32>>, // chars in config order, separator last
    synthetic_offset: Vec<f32>,
}

impl World {
    fn char_slot(&self, c: char) -> Result<usize, CorpusError> {
        if c == ' ' {
            return Ok(self.config.chars.len());
        }
        self.config
            .chars
            .iter()
            .position(|&x| x == c)
            .ok_or(CorpusError::OutOfInventory(c))
    }

    pub fn prototype(&self, c: char) -> Result<&[f32], CorpusError> {
        Ok(&self.prototypes[self.char_slot(c)?])
    }

    pub fn synthetic_offset(&self) -> &[f32] {
        &self.synthetic_offset
    }

    pub fn min_prototype_distance(&self) -> f64 {
        let mut min = f64::INFINITY;
        for i in 0..self.prototypes.len() {
            for j in i + 1..self.prototypes.len() {
                let d = dist(&self.prototypes[i], &self.prototypes[j]);
                if d < min {
                    min = d;
                }
            }
        }
        min
    }
}

fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

pub fn build_world(config: &WorldConfig, seed: u64) -> Result<World, CorpusError> {
    if config.noise_sigma < 0.0 {
        return Err(CorpusError::Config("noise sigma must be >= 0".to_string()));
    }
    if config.feature_dim == 0 {
        return Err(CorpusError::Config("feature dim must be >= 1".to_string()));
    }
    if config.duration_choices.is_empty() || config.duration_choices.iter().any(|&d| d == 0) {
        return Err(CorpusError::Config(
            "duration choices must be nonempty positive".to_string(),
        ));
    }
    if config.synthetic_duration == 0 {
        return Err(CorpusError::Config(
            "synthetic duration must be >= 1".to_string(),
        ));
    }
    if config.chars.is_empty() {
        return Err(CorpusError::Config("character inventory empty".to_string()));
    }
    if config.word_len.0 == 0 || config.word_len.0 > config.word_len.1 {
        return Err(CorpusError::Config("bad word length range".to_string()));
    }
    if config.entity_types.is_empty() {
        return Err(CorpusError::Config("no entity types".to_string()));
    }

    let mut rng = rng_from(derive_seed(seed, "world"));
    let n_protos = config.chars.len() + 1;
    let min_dist = (config.min_separation_sigmas * config.noise_sigma).max(1e-6);
    let mut prototypes: Vec<Vec<f32>> = Vec::with_capacity(n_protos);
    for slot in 0..n_protos {
        let mut placed = false;
        for _attempt in 0..1000 {
            let cand: Vec<f32> = (0..config.feature_dim)
                .map(|_| standard_normal(&mut rng) as f32)
                .collect();
            if prototypes.iter().all(|p| dist(p, &cand) > min_dist) {
                prototypes.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(CorpusError::Config(format!(
                "cannot separate prototype {slot} by {min_dist:.3} in {} dims",
                config.feature_dim
            )));
        }
    }

    let mut offset: Vec<f32> = (0..config.feature_dim)
        .map(|_| standard_normal(&mut rng) as f32)
        .collect();
    let norm = dist(&offset, &vec![0.0; config.feature_dim]).max(1e-12);
    offset
        .iter_mut()
        .for_each(|x| *x = (*x as f64 / norm * config.synthetic_offset_norm) as f32);

    // Lexicon of filler words, then gazetteer entries, all distinct.
    let mut used: BTreeSet<String> = BTreeSet::new();
    let make_word = |rng: &mut rand_chacha::ChaCha8Rng,
                         used: &mut BTreeSet<String>|
     -> Result<String, CorpusError> {
        for _ in 0..2000 {
            let len = config.word_len.0
                + uniform_usize(rng, config.word_len.1 - config.word_len.0 + 1);
            let w: String = (0..len)
                .map(|_| config.chars[uniform_usize(rng, config.chars.len())])
                .collect();
            if used.insert(w.clone()) {
                return Ok(w);
            }
        }
        Err(CorpusError::Config(
            "character inventory too small to draw distinct words".to_string(),
        ))
    };

    let lexicon_size = config.filler_pools * config.pool_size;
    let mut lexicon = Vec::with_capacity(lexicon_size);
    for _ in 0..lexicon_size {
        lexicon.push(make_word(&mut rng, &mut used)?);
    }

    let mut gazetteers: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    for ty in config.entity_types.iter() {
        let mut entries = Vec::with_capacity(config.gazetteer_entries);
        for k in 0..config.gazetteer_entries {
            // Roughly a third of the entries are two-word surface forms.
            let words = if k % 3 == 2 { 2 } else { 1 };
            let entry: Vec<String> = (0..words)
                .map(|_| make_word(&mut rng, &mut used))
                .collect::<Result<_, _>>()?;
            entries.push(entry);
        }
        gazetteers.insert(ty.as_str().to_string(), entries);
    }

    Ok(World {
        config: config.clone(),
        seed,
        lexicon,
        gazetteers,
        prototypes,
        synthetic_offset: offset,
    })
}

fn render(
    world: &World,
    text: &str,
    seed: u64,
    shift: Option<&[f32]>,
    fixed_duration: Option<usize>,
) -> Result<(Mat<f32>, Vec<usize>), CorpusError> {
    if text.is_empty() {
        return Err(CorpusError::EmptyText);
    }
    let mut rng = rng_from(seed);
    let f_dim = world.config.feature_dim;
    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut char_of_frame: Vec<usize> = Vec::new();
    for (ci, c) in text.chars().enumerate() {
        let slot = world.char_slot(c)?;
        let proto = &world.prototypes[slot];
        let d = match fixed_duration {
            Some(d) => d,
            None => {
                world.config.duration_choices
                    [uniform_usize(&mut rng, world.config.duration_choices.len())]
            }
        };
        for _ in 0..d {
            let mut frame = vec![0.0f32; f_dim];
            for (k, v) in frame.iter_mut().enumerate() {
                let base = proto[k] + shift.map_or(0.0, |s| s[k]);
                *v = base + (standard_normal(&mut rng) * world.config.noise_sigma) as f32;
            }
            rows.push(frame);
            char_of_frame.push(ci);
        }
    }
    Ok((Mat::from_rows(&rows), char_of_frame))
}

/// Natural rendering: prototype frames with noise, durations drawn from the
/// world's duration law. Deterministic per (text, world, seed).
pub fn render_natural(world: &World, text: &str, seed: u64) -> Result<Mat<f32>, CorpusError> {
    Ok(render(world, text, seed, None, None)?.0)
}

/// Distorted rendering standing in for synthesized speech: every prototype is
/// shifted by the world's fixed offset and durations are rigid.
pub fn render_synthetic(world: &World, text: &str, seed: u64) -> Result<Mat<f32>, CorpusError> {
    Ok(render(
        world,
        text,
        seed,
        Some(&world.synthetic_offset.clone()),
        Some(world.config.synthetic_duration),
    )?
    .0)
}

/// Rendering plus the generating character index of every frame; used by the
/// separability and domain-gap diagnostics.
pub fn render_natural_aligned(
    world: &World,
    text: &str,
    seed: u64,
) -> Result<(Mat<f32>, Vec<usize>), CorpusError> {
    render(world, text, seed, None, None)
}

/// Fraction of frames whose nearest prototype is the generating character.
pub fn nearest_prototype_accuracy(
    world: &World,
    texts: &[String],
    seed: u64,
) -> Result<f64, CorpusError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (i, text) in texts.iter().enumerate() {
        let (feats, chars) = render_natural_aligned(world, text, derive_seed(seed, &format!("sep-{i}")))?;
        let text_chars: Vec<char> = text.chars().collect();
        for t in 0..feats.rows() {
            let frame: Vec<f32> = feats.row(t).to_vec();
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (slot, proto) in world.prototypes.iter().enumerate() {
                let d = dist(proto, &frame);
                if d < best_d {
                    best_d = d;
                    best = slot;
                }
            }
            let truth = world.char_slot(text_chars[chars[t]])?;
            if best == truth {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Mean per-frame distance between natural and synthetic renderings of the
/// same texts, compared at matching character occurrences.
pub fn natural_synthetic_gap(
    world: &World,
    texts: &[String],
    seed: u64,
) -> Result<f64, CorpusError> {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (i, text) in texts.iter().enumerate() {
        let s = derive_seed(seed, &format!("gap-{i}"));
        let (nat, nat_chars) = render(world, text, s, None, None)?;
        let (syn, syn_chars) = render(
            world,
            text,
            derive_seed(s, "syn.side"),
            Some(&world.synthetic_offset.clone()),
            Some(world.config.synthetic_duration),
        )?;
        // First frame of each character occurrence on both sides.
        let first_of = |chars: &[usize]| -> Vec<usize> {
            let mut firsts = Vec::new();
            let mut prev = usize::MAX;
            for (t, &c) in chars.iter().enumerate() {
                if c != prev {
                    firsts.push(t);
                    prev = c;
                }
            }
            firsts
        };
        let fn_nat = first_of(&nat_chars);
        let fn_syn = first_of(&syn_chars);
        for (&tn, &ts) in fn_nat.iter().zip(fn_syn.iter()) {
            let a: Vec<f32> = nat.row(tn).to_vec();
            let b: Vec<f32> = syn.row(ts).to_vec();
            sum += dist(&a, &b);
            count += 1;
        }
    }
    Ok(sum / count.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Template grammar
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Slot {
    /// Filler word drawn from the given lexicon pool.
    Filler(usize),
    /// Entity surface drawn from the gazetteer of the given type index.
    Entity(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateGrammar {
    pub templates: Vec<Vec<Slot>>,
}

impl TemplateGrammar {
    /// Built-in sentence shapes: most carry one or two entity slots.
    pub fn default_grammar(n_types: usize) -> Self {
        assert!(n_types > 0);
        let e = |i: usize| Slot::Entity(i % n_types);
        let f = Slot::Filler;
        TemplateGrammar {
            templates: vec![
                vec![f(0), f(1), e(0), f(2), f(3)],
                vec![e(4), f(4), e(2), f(5), f(6)],
                vec![f(7), f(0), e(1), f(8)],
                vec![f(1), f(9), f(5), e(5), f(2)],
                vec![e(0), f(3), e(6), f(6), f(7)],
                vec![f(4), f(8), e(7), f(9), e(1)],
                vec![f(2), e(3), f(0), f(5), f(1)],
                vec![f(3), f(7), f(4), f(6), f(9)],
            ],
        }
    }

    fn pool<'a>(&self, world: &'a World, pool: usize) -> &'a [String] {
        let ps = world.config.pool_size;
        let p = pool % world.config.filler_pools;
        &world.lexicon[p * ps..(p + 1) * ps]
    }

    /// Number of distinct sentences the grammar can produce.
    pub fn capacity(&self, world: &World) -> u128 {
        let mut total: u128 = 0;
        for t in &self.templates {
            let mut prod: u128 = 1;
            for slot in t {
                let choices = match slot {
                    Slot::Filler(_) => world.config.pool_size,
                    Slot::Entity(ti) => {
                        let ty = world.config.entity_types.type_at(*ti);
                        world.gazetteers.get(ty.as_str()).map_or(0, |g| g.len())
                    }
                };
                prod = prod.saturating_mul(choices as u128);
            }
            total = total.saturating_add(prod);
        }
        total
    }

    pub fn sample<R: RngCore>(&self, world: &World, rng: &mut R) -> TaggedText {
        let template = &self.templates[uniform_usize(rng, self.templates.len())];
        let mut tokens: Vec<String> = Vec::new();
        let mut entities: Vec<EntitySpan> = Vec::new();
        for slot in template {
            match slot {
                Slot::Filler(p) => {
                    let pool = self.pool(world, *p);
                    tokens.push(pool[uniform_usize(rng, pool.len())].clone());
                }
                Slot::Entity(ti) => {
                    let ty = world.config.entity_types.type_at(*ti).clone();
                    let entries = &world.gazetteers[ty.as_str()];
                    let entry = &entries[uniform_usize(rng, entries.len())];
                    let start = tokens.len();
                    tokens.extend(entry.iter().cloned());
                    entities.push(EntitySpan::new(ty, start, tokens.len(), 0));
                }
            }
        }
        TaggedText::new(tokens, entities).expect("template sentences are valid by construction")
    }
}

// ---------------------------------------------------------------------------
// Corpus bundle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    pub features: Option<Mat<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggedUtterance {
    pub id: String,
    pub tagged: TaggedText,
    pub features: Option<Mat<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusSizes {
    pub asr_train: usize,
    pub ner_train: usize,
    pub ner_dev: usize,
    pub test: usize,
}

impl CorpusSizes {
    pub fn total(&self) -> usize {
        self.asr_train + self.ner_train + self.ner_dev + self.test
    }
}

/// The three data conditions: paired recognizer corpus without tags, text-only
/// tagged corpora, and a paired tagged test set. All partitions are disjoint
/// as sentence strings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusBundle {
    pub asr_train: Vec<Utterance>,
    pub ner_train: Vec<TaggedUtterance>,
    pub ner_dev: Vec<TaggedUtterance>,
    pub test: Vec<TaggedUtterance>,
}

pub fn generate_corpus(
    world: &World,
    sizes: &CorpusSizes,
    grammar: &TemplateGrammar,
    seed: u64,
) -> Result<CorpusBundle, CorpusError> {
    let total = sizes.total();
    let capacity = grammar.capacity(world);
    if (total as u128) > capacity {
        return Err(CorpusError::Config(format!(
            "requested {total} distinct sentences but the grammar capacity is {capacity}"
        )));
    }
    let mut rng = rng_from(derive_seed(seed, "corpus"));
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut sentences: Vec<TaggedText> = Vec::with_capacity(total);
    let budget = 200 * total + 1000;
    let mut attempts = 0usize;
    while sentences.len() < total {
        attempts += 1;
        if attempts > budget {
            return Err(CorpusError::Config(format!(
                "grammar too tight: drew {attempts} samples for {total} distinct sentences \
                 (capacity {capacity})"
            )));
        }
        let t = grammar.sample(world, &mut rng);
        if seen.insert(t.bare_text()) {
            sentences.push(t);
        }
    }

    let mut iter = sentences.into_iter();
    let mut bundle = CorpusBundle::default();
    for i in 0..sizes.asr_train {
        let id = format!("asr-{i:05}");
        let text = iter.next().expect("sized").bare_text();
        let feats = render_natural(world, &text, derive_seed_for(seed, "render-asr", &id))?;
        bundle.asr_train.push(Utterance {
            id,
            text,
            features: Some(feats),
        });
    }
    for i in 0..sizes.ner_train {
        bundle.ner_train.push(TaggedUtterance {
            id: format!("nertr-{i:05}"),
            tagged: iter.next().expect("sized"),
            features: None,
        });
    }
    for i in 0..sizes.ner_dev {
        bundle.ner_dev.push(TaggedUtterance {
            id: format!("nerdv-{i:05}"),
            tagged: iter.next().expect("sized"),
            features: None,
        });
    }
    for i in 0..sizes.test {
        let id = format!("test-{i:05}");
        let tagged = iter.next().expect("sized");
        let feats = render_natural(
            world,
            &tagged.bare_text(),
            derive_seed_for(seed, "render-test", &id),
        )?;
        bundle.test.push(TaggedUtterance {
            id,
            tagged,
            features: Some(feats),
        });
    }

    // Tagged partitions must carry at least one entity per two sentences.
    let tagged_sents = sizes.ner_train + sizes.ner_dev + sizes.test;
    if tagged_sents > 0 {
        let entities: usize = bundle
            .ner_train
            .iter()
            .chain(&bundle.ner_dev)
            .chain(&bundle.test)
            .map(|u| u.tagged.entities().len())
            .sum();
        if (entities as f64) < 0.5 * tagged_sents as f64 {
            return Err(CorpusError::Config(format!(
                "grammar entity density too low: {entities} entities over {tagged_sents} sentences"
            )));
        }
    }
    Ok(bundle)
}

/// Convenience for diagnostics: sample bare sentences without partitioning.
pub fn sample_texts(world: &World, grammar: &TemplateGrammar, n: usize, seed: u64) -> Vec<String> {
    let mut rng = rng_from(derive_seed(seed, "texts"));
    (0..n).map(|_| grammar.sample(world, &mut rng).bare_text()).collect()
}

/// Random utterance-length shuffle helper used by training loops.
pub fn shuffled_indices<R: RngCore>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(rng, &mut idx);
    idx
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

const PARTITIONS: [&str; 4] = ["asr_train", "ner_train", "ner_dev", "test"];

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_text_partition(
    dir: &Path,
    name: &str,
    lines: impl Iterator<Item = (String, String)>,
) -> Result<(), CorpusError> {
    let mut out = String::new();
    for (id, text) in lines {
        out.push_str(&id);
        out.push('\t');
        out.push_str(&text);
        out.push('\n');
    }
    write_atomic(&dir.join(format!("{name}.txt")), out.as_bytes())
}

/// Write one binary feature file (magic, version, count, dim header; then
/// id-prefixed little-endian f32 frames per utterance).
pub fn write_feature_file(
    path: &Path,
    feats: &[(String, &Mat<f32>)],
    dim: usize,
) -> Result<(), CorpusError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(feats.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for (id, m) in feats {
        buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        for &v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

fn write_features(
    dir: &Path,
    name: &str,
    feats: &[(String, &Mat<f32>)],
    dim: usize,
) -> Result<(), CorpusError> {
    write_feature_file(&dir.join(format!("{name}.feat")), feats, dim)
}

pub fn read_feature_file(path: &Path) -> Result<Vec<(String, Mat<f32>)>, CorpusError> {
    let file = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|_| CorpusError::Format {
            file: file.clone(),
            reason: "missing file".to_string(),
        })?
        .read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8], CorpusError> {
        if *off + n > bytes.len() {
            return Err(CorpusError::Format {
                file: file.clone(),
                reason: "truncated".to_string(),
            });
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 5)? != FEATURE_MAGIC {
        return Err(CorpusError::Format {
            file,
            reason: "bad magic".to_string(),
        });
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(CorpusError::Format {
            file,
            reason: format!("unsupported version {version}"),
        });
    }
    let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
        let id = String::from_utf8(take(&mut off, id_len)?.to_vec()).map_err(|_| {
            CorpusError::Format {
                file: file.clone(),
                reason: "non-utf8 id".to_string(),
            }
        })?;
        let t = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let raw = take(&mut off, t * dim * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((id, Mat::from_vec(t, dim, data)));
    }
    if off != bytes.len() {
        return Err(CorpusError::Format {
            file,
            reason: "trailing bytes".to_string(),
        });
    }
    Ok(out)
}

fn read_text_partition(path: &Path) -> Result<Vec<(String, String)>, CorpusError> {
    let file = path.display().to_string();
    let content = std::fs::read_to_string(path).map_err(|_| CorpusError::Format {
        file: file.clone(),
        reason: "missing file".to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, text) = line.split_once('\t').ok_or_else(|| CorpusError::Format {
            file: file.clone(),
            reason: format!("line {}: expected id<TAB>text", i + 1),
        })?;
        out.push((id.to_string(), text.to_string()));
    }
    Ok(out)
}

/// Write a bundle directory: one text file per partition plus one binary
/// feature file for each partition that carries features, and a manifest.
pub fn save_bundle(bundle: &CorpusBundle, dir: &Path, tags: &TagSet) -> Result<(), CorpusError> {
    std::fs::create_dir_all(dir)?;
    let dim = bundle
        .asr_train
        .iter()
        .filter_map(|u| u.features.as_ref())
        .chain(bundle.test.iter().filter_map(|u| u.features.as_ref()))
        .map(|m| m.cols())
        .next()
        .unwrap_or(0);

    let mut manifest = KvDoc::new();
    manifest.set("bundle", "version", 1);
    manifest.set("bundle", "feature_dim", dim);
    manifest.set(
        "bundle",
        "entity_types",
        tags.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(","),
    );
    for name in PARTITIONS {
        let count = match name {
            "asr_train" => bundle.asr_train.len(),
            "ner_train" => bundle.ner_train.len(),
            "ner_dev" => bundle.ner_dev.len(),
            _ => bundle.test.len(),
        };
        manifest.set("counts", name, count);
    }
    write_atomic(&dir.join("bundle.txt"), manifest.to_text().as_bytes())?;

    write_text_partition(
        dir,
        "asr_train",
        bundle.asr_train.iter().map(|u| (u.id.clone(), u.text.clone())),
    )?;
    for (name, part) in [
        ("ner_train", &bundle.ner_train),
        ("ner_dev", &bundle.ner_dev),
        ("test", &bundle.test),
    ] {
        write_text_partition(
            dir,
            name,
            part.iter().map(|u| (u.id.clone(), serialize(&u.tagged))),
        )?;
    }

    let asr_feats: Vec<(String, &Mat<f32>)> = bundle
        .asr_train
        .iter()
        .filter_map(|u| u.features.as_ref().map(|m| (u.id.clone(), m)))
        .collect();
    write_features(dir, "asr_train", &asr_feats, dim)?;
    let test_feats: Vec<(String, &Mat<f32>)> = bundle
        .test
        .iter()
        .filter_map(|u| u.features.as_ref().map(|m| (u.id.clone(), m)))
        .collect();
    write_features(dir, "test", &test_feats, dim)?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<CorpusBundle, CorpusError> {
    let manifest_path = dir.join("bundle.txt");
    let manifest_text =
        std::fs::read_to_string(&manifest_path).map_err(|_| CorpusError::Format {
            file: manifest_path.display().to_string(),
            reason: "missing file".to_string(),
        })?;
    let manifest = KvDoc::parse(&manifest_text).map_err(|e| CorpusError::Format {
        file: manifest_path.display().to_string(),
        reason: e.to_string(),
    })?;
    let dim = manifest
        .get_usize("bundle", "feature_dim")
        .map_err(|e| CorpusError::Format {
            file: manifest_path.display().to_string(),
            reason: e.to_string(),
        })?;
    let type_names = manifest
        .get_list("bundle", "entity_types")
        .map_err(|e| CorpusError::Format {
            file: manifest_path.display().to_string(),
            reason: e.to_string(),
        })?;
    let tags = TagSet::new(&type_names)?;

    let mut feats: BTreeMap<String, Mat<f32>> = BTreeMap::new();
    for name in ["asr_train", "test"] {
        let path = dir.join(format!("{name}.feat"));
        for (id, m) in read_feature_file(&path)? {
            if m.cols() != dim {
                return Err(CorpusError::Format {
                    file: path.display().to_string(),
                    reason: format!("feature dim {} does not match header {dim}", m.cols()),
                });
            }
            feats.insert(id, m);
        }
    }

    let mut bundle = CorpusBundle::default();
    for (id, text) in read_text_partition(&dir.join("asr_train.txt"))? {
        let features = feats.remove(&id);
        bundle.asr_train.push(Utterance { id, text, features });
    }
    for (name, out) in [
        ("ner_train", &mut bundle.ner_train),
        ("ner_dev", &mut bundle.ner_dev),
        ("test", &mut bundle.test),
    ] {
        let path = dir.join(format!("{name}.txt"));
        for (id, text) in read_text_partition(&path)? {
            let tagged = parse_tagged(&text, &tags).map_err(|e| CorpusError::Format {
                file: path.display().to_string(),
                reason: format!("utterance {id}: {e}"),
            })?;
            let features = feats.remove(&id);
            out.push(TaggedUtterance { id, tagged, features });
        }
    }
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// World persistence (single structured text document)
// ---------------------------------------------------------------------------

fn char_key(c: char) -> String {
    if c.is_ascii_alphanumeric() {
        c.to_string()
    } else {
        format!("u+{:04x}", c as u32)
    }
}

pub fn world_to_doc(world: &World) -> KvDoc {
    let mut doc = KvDoc::new();
    let cfg = &world.config;
    doc.set("world", "seed", world.seed);
    doc.set("world", "chars", cfg.chars.iter().collect::<String>());
    doc.set("world", "feature_dim", cfg.feature_dim);
    doc.set("world", "noise_sigma", cfg.noise_sigma);
    doc.set(
        "world",
        "duration_choices",
        cfg.duration_choices
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    doc.set("world", "synthetic_offset_norm", cfg.synthetic_offset_norm);
    doc.set("world", "synthetic_duration", cfg.synthetic_duration);
    doc.set("world", "min_separation_sigmas", cfg.min_separation_sigmas);
    doc.set("world", "word_len_min", cfg.word_len.0);
    doc.set("world", "word_len_max", cfg.word_len.1);
    doc.set("world", "filler_pools", cfg.filler_pools);
    doc.set("world", "pool_size", cfg.pool_size);
    doc.set("world", "gazetteer_entries", cfg.gazetteer_entries);
    doc.set(
        "world",
        "entity_types",
        cfg.entity_types
            .iter()
            .map(|t| t.as_str())
            .collect::<Vec<_>>()
            .join(","),
    );
    doc.set("lexicon", "words", world.lexicon.join(","));
    for (ty, entries) in &world.gazetteers {
        let joined: Vec<String> = entries.iter().map(|e| e.join(" ")).collect();
        doc.set("gazetteers", ty, joined.join(","));
    }
    for (i, c) in cfg.chars.iter().enumerate() {
        doc.set(
            "prototypes",
            &char_key(*c),
            world.prototypes[i]
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
    }
    doc.set(
        "prototypes",
        "u+0020",
        world.prototypes[cfg.chars.len()]
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    doc.set(
        "prototypes",
        "synthetic_offset",
        world
            .synthetic_offset
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    doc
}

pub fn world_from_doc(doc: &KvDoc) -> Result<World, CorpusError> {
    let kv = |e: crate::kvtext::KvError| CorpusError::Format {
        file: "world".to_string(),
        reason: e.to_string(),
    };
    let chars: Vec<char> = doc.require("world", "chars").map_err(kv)?.chars().collect();
    let config = WorldConfig {
        chars: chars.clone(),
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
        entity_types: TagSet::new(&doc.get_list("world", "entity_types").map_err(kv)?)?,
    };
    let parse_vec = |s: &str| -> Result<Vec<f32>, CorpusError> {
        s.split(',')
            .map(|x| {
                x.trim().parse::<f32>().map_err(|_| CorpusError::Format {
                    file: "world".to_string(),
                    reason: format!("bad float `{x}`"),
                })
            })
            .collect()
    };
    let mut prototypes = Vec::with_capacity(chars.len() + 1);
    for c in &chars {
        prototypes.push(parse_vec(
            doc.require("prototypes", &char_key(*c)).map_err(kv)?,
        )?);
    }
    prototypes.push(parse_vec(doc.require("prototypes", "u+0020").map_err(kv)?)?);
    let synthetic_offset = parse_vec(doc.require("prototypes", "synthetic_offset").map_err(kv)?)?;
    let lexicon = doc.get_list("lexicon", "words").map_err(kv)?;
    let mut gazetteers = BTreeMap::new();
    for ty in config.entity_types.iter() {
        let raw = doc.require("gazetteers", ty.as_str()).map_err(kv)?;
        let entries: Vec<Vec<String>> = raw
            .split(',')
            .map(|e| e.trim().split(' ').map(|w| w.to_string()).collect())
            .collect();
        gazetteers.insert(ty.as_str().to_string(), entries);
    }
    Ok(World {
        config,
        seed: doc.get_u64("world", "seed").map_err(kv)?,
        lexicon,
        gazetteers,
        prototypes,
        synthetic_offset,
    })
}

pub fn save_world(world: &World, path: &Path) -> Result<(), CorpusError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_atomic(path, world_to_doc(world).to_text().as_bytes())
}

pub fn load_world(path: &Path) -> Result<World, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|_| CorpusError::Format {
        file: path.display().to_string(),
        reason: "missing file".to_string(),
    })?;
    let doc = KvDoc::parse(&text).map_err(|e| CorpusError::Format {
        file: path.display().to_string(),
        reason: e.to_string(),
    })?;
    world_from_doc(&doc)
}

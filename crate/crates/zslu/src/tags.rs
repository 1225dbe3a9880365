//! Inline entity-tag transcripts: `<type` opens an entity over the following
//! words and a standalone `>` closes the most recently opened one, e.g.
//! `<time demain > <organisation rfi > présente ...`. This module parses that
//! format into typed token spans, validates nesting, and serializes back to
//! the canonical single-spaced form.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("unbalanced tags: {0}")]
    UnbalancedTags(String),
    #[error("unknown entity type `{0}`")]
    UnknownEntityType(String),
    #[error("empty entity of type `{0}`")]
    EmptyEntity(String),
    #[error("invalid entity spans: {0}")]
    InvalidSpans(String),
    #[error("invalid token `{0}`: words may not contain `<`, `>` or whitespace")]
    InvalidToken(String),
    #[error("symbol not in alphabet: {0}")]
    OutOfAlphabet(String),
    #[error("invalid entity type name `{0}`")]
    InvalidTypeName(String),
}

/// Name of an entity category (`person`, `location`, ...). Lowercase, no
/// whitespace, no angle brackets.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityType(String);

impl EntityType {
    pub fn new(name: &str) -> Result<Self, CodecError> {
        if name.is_empty()
            || name.chars().any(|c| {
                c.is_whitespace() || c == '<' || c == '>' || c.is_uppercase()
            })
        {
            return Err(CodecError::InvalidTypeName(name.to_string()));
        }
        Ok(EntityType(name.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for EntityType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Closed set of entity types a corpus is annotated with. Order fixes the
/// tag-symbol ids of the extended alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSet {
    names: Vec<EntityType>,
}

impl TagSet {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self, CodecError> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::with_capacity(names.len());
        for n in names {
            let ty = EntityType::new(n.as_ref())?;
            if !seen.insert(ty.clone()) {
                return Err(CodecError::InvalidTypeName(format!(
                    "duplicate entity type `{}`",
                    ty
                )));
            }
            out.push(ty);
        }
        Ok(TagSet { names: out })
    }

    /// The default eight-type annotation scheme.
    pub fn default_types() -> Self {
        TagSet::new(&[
            "person",
            "location",
            "organization",
            "product",
            "time",
            "amount",
            "function",
            "event",
        ])
        .expect("default tag set is valid")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|t| t.as_str() == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|t| t.as_str() == name)
    }

    pub fn type_at(&self, idx: usize) -> &EntityType {
        &self.names[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &EntityType> {
        self.names.iter()
    }
}

/// Typed token span. `start` inclusive, `end` exclusive, both token indices;
/// `depth` 0 for outermost spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntitySpan {
    pub ty: EntityType,
    pub start: usize,
    pub end: usize,
    pub depth: usize,
}

impl EntitySpan {
    pub fn new(ty: EntityType, start: usize, end: usize, depth: usize) -> Self {
        EntitySpan {
            ty,
            start,
            end,
            depth,
        }
    }
}

/// A tokenized transcript plus its entity spans, in document order of the
/// opening tags. Construction validates all invariants, so any value of this
/// type serializes to a well-formed line.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TaggedText {
    tokens: Vec<String>,
    entities: Vec<EntitySpan>,
}

impl TaggedText {
    pub fn new(tokens: Vec<String>, entities: Vec<EntitySpan>) -> Result<Self, CodecError> {
        validate(&tokens, &entities)?;
        Ok(TaggedText { tokens, entities })
    }

    pub fn untagged(tokens: Vec<String>) -> Result<Self, CodecError> {
        TaggedText::new(tokens, Vec::new())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn entities(&self) -> &[EntitySpan] {
        &self.entities
    }

    /// The bare word sequence, single-spaced.
    pub fn bare_text(&self) -> String {
        self.tokens.join(" ")
    }

    /// The ordered (type, surface) entity units used by entity-level scoring.
    pub fn entity_units(&self) -> Vec<(EntityType, String)> {
        self.entities
            .iter()
            .map(|e| (e.ty.clone(), self.tokens[e.start..e.end].join(" ")))
            .collect()
    }
}

fn check_token(tok: &str) -> Result<(), CodecError> {
    if tok.is_empty() || tok.chars().any(|c| c.is_whitespace() || c == '<' || c == '>') {
        return Err(CodecError::InvalidToken(tok.to_string()));
    }
    Ok(())
}

/// Single validation walk shared by `TaggedText::new` and `serialize`: spans
/// must be properly bracketed, listed in document order of their opening
/// tags, with `depth` equal to the nesting level at the opening position.
fn validate(tokens: &[String], entities: &[EntitySpan]) -> Result<(), CodecError> {
    for tok in tokens {
        check_token(tok)?;
    }
    let n = tokens.len();
    let mut stack: Vec<usize> = Vec::new();
    let mut next = 0usize;
    for i in 0..=n {
        while let Some(&top) = stack.last() {
            if entities[top].end == i {
                stack.pop();
            } else {
                break;
            }
        }
        while next < entities.len() && entities[next].start == i {
            let e = &entities[next];
            if e.end <= e.start || e.end > n {
                return Err(CodecError::InvalidSpans(format!(
                    "span `{}` [{}, {}) out of range for {} tokens",
                    e.ty, e.start, e.end, n
                )));
            }
            if let Some(&top) = stack.last() {
                if e.end > entities[top].end {
                    return Err(CodecError::InvalidSpans(format!(
                        "span `{}` [{}, {}) overlaps `{}` [{}, {})",
                        e.ty, e.start, e.end, entities[top].ty, entities[top].start,
                        entities[top].end
                    )));
                }
            }
            if e.depth != stack.len() {
                return Err(CodecError::InvalidSpans(format!(
                    "span `{}` [{}, {}) has depth {} but nesting level is {}",
                    e.ty, e.start, e.end, e.depth,
                    stack.len()
                )));
            }
            stack.push(next);
            next += 1;
        }
    }
    if next != entities.len() {
        return Err(CodecError::InvalidSpans(
            "spans not in document order of opening tags".to_string(),
        ));
    }
    Ok(())
}

/// Parse one tagged line. `<type` opens an entity, a standalone `>` closes the
/// most recently opened one; runs of whitespace are accepted.
pub fn parse_tagged(s: &str, tags: &TagSet) -> Result<TaggedText, CodecError> {
    let mut tokens: Vec<String> = Vec::new();
    let mut entities: Vec<EntitySpan> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    for raw in s.split_whitespace() {
        if raw == ">" {
            let idx = stack.pop().ok_or_else(|| {
                CodecError::UnbalancedTags(format!("stray closer before token {}", tokens.len()))
            })?;
            entities[idx].end = tokens.len();
            if entities[idx].end == entities[idx].start {
                return Err(CodecError::EmptyEntity(entities[idx].ty.to_string()));
            }
        } else if let Some(name) = raw.strip_prefix('<') {
            if name.is_empty() {
                return Err(CodecError::InvalidToken(raw.to_string()));
            }
            if !tags.contains(name) {
                return Err(CodecError::UnknownEntityType(name.to_string()));
            }
            let ty = EntityType::new(name)?;
            entities.push(EntitySpan::new(ty, tokens.len(), usize::MAX, stack.len()));
            stack.push(entities.len() - 1);
        } else if raw.contains('<') || raw.contains('>') {
            return Err(CodecError::InvalidToken(raw.to_string()));
        } else {
            tokens.push(raw.to_string());
        }
    }
    if let Some(&idx) = stack.last() {
        return Err(CodecError::UnbalancedTags(format!(
            "unclosed `<{}`",
            entities[idx].ty
        )));
    }
    TaggedText::new(tokens, entities)
}

/// Canonical form: single spaces, opening tags at their start index (outer
/// before inner), `>` closers at end indices (inner before outer).
pub fn serialize(t: &TaggedText) -> String {
    let tokens = t.tokens();
    let entities = t.entities();
    let mut out: Vec<String> = Vec::with_capacity(tokens.len() + 2 * entities.len());
    let mut stack: Vec<usize> = Vec::new();
    let mut next = 0usize;
    for i in 0..=tokens.len() {
        while let Some(&top) = stack.last() {
            if entities[top].end == i {
                stack.pop();
                out.push(">".to_string());
            } else {
                break;
            }
        }
        while next < entities.len() && entities[next].start == i {
            out.push(format!("<{}", entities[next].ty));
            stack.push(next);
            next += 1;
        }
        if i < tokens.len() {
            out.push(tokens[i].clone());
        }
    }
    out.join(" ")
}

/// Remove the annotation and keep the word sequence.
pub fn strip_tags(s: &str, tags: &TagSet) -> Result<String, CodecError> {
    Ok(parse_tagged(s, tags)?.bare_text())
}

//! Output alphabet shared by the softmax layers: blank at a fixed index,
//! characters, the word separator, and (for tagging models) one atomic symbol
//! per entity type plus a single closer. Includes the encoding of tagged text
//! into CTC target sequences and the total, repair-counting decoder.

use std::collections::BTreeMap;

use crate::tags::{CodecError, EntitySpan, EntityType, TagSet, TaggedText};

pub const BLANK: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Symbol {
    Blank,
    Char(char),
    Sep,
    /// Opening tag for the type at this index of the tag set.
    TagOpen(usize),
    TagClose,
}

/// Indexed symbol inventory. Layout: blank, characters (given order), the
/// word separator, then tag openers and the closer when a tag set is present.
/// A tag-extended alphabet over the same characters is therefore a strict
/// superset of the plain one, with shared indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolAlphabet {
    chars: Vec<char>,
    char_index: BTreeMap<char, usize>,
    tags: Option<TagSet>,
}

impl SymbolAlphabet {
    pub fn chars_only(chars: &[char]) -> Result<Self, CodecError> {
        Self::build(chars, None)
    }

    pub fn with_tags(chars: &[char], tags: TagSet) -> Result<Self, CodecError> {
        Self::build(chars, Some(tags))
    }

    fn build(chars: &[char], tags: Option<TagSet>) -> Result<Self, CodecError> {
        let mut char_index = BTreeMap::new();
        for (i, &c) in chars.iter().enumerate() {
            if c.is_whitespace() || c == '<' || c == '>' {
                return Err(CodecError::OutOfAlphabet(format!(
                    "character {c:?} cannot appear in the alphabet"
                )));
            }
            if char_index.insert(c, 1 + i).is_some() {
                return Err(CodecError::OutOfAlphabet(format!("duplicate character {c:?}")));
            }
        }
        Ok(SymbolAlphabet {
            chars: chars.to_vec(),
            char_index,
            tags,
        })
    }

    pub fn size(&self) -> usize {
        // blank + chars + separator (+ openers + closer)
        2 + self.chars.len() + self.tags.as_ref().map_or(0, |t| t.len() + 1)
    }

    pub fn blank(&self) -> usize {
        BLANK
    }

    pub fn sep(&self) -> usize {
        1 + self.chars.len()
    }

    pub fn char_symbol(&self, c: char) -> Option<usize> {
        self.char_index.get(&c).copied()
    }

    pub fn tag_open(&self, ty: &str) -> Option<usize> {
        let tags = self.tags.as_ref()?;
        Some(self.sep() + 1 + tags.index_of(ty)?)
    }

    pub fn tag_close(&self) -> Option<usize> {
        let tags = self.tags.as_ref()?;
        Some(self.sep() + 1 + tags.len())
    }

    pub fn tag_set(&self) -> Option<&TagSet> {
        self.tags.as_ref()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn symbol(&self, idx: usize) -> Option<Symbol> {
        if idx == BLANK {
            return Some(Symbol::Blank);
        }
        if idx <= self.chars.len() {
            return Some(Symbol::Char(self.chars[idx - 1]));
        }
        if idx == self.sep() {
            return Some(Symbol::Sep);
        }
        let tags = self.tags.as_ref()?;
        let tag_idx = idx - self.sep() - 1;
        if tag_idx < tags.len() {
            return Some(Symbol::TagOpen(tag_idx));
        }
        if tag_idx == tags.len() {
            return Some(Symbol::TagClose);
        }
        None
    }

    /// Encode the characters of a bare (untagged) text, separator between words.
    pub fn encode_text(&self, text: &str) -> Result<Vec<usize>, CodecError> {
        let mut out = Vec::new();
        for (w, word) in text.split_whitespace().enumerate() {
            if w > 0 {
                out.push(self.sep());
            }
            for c in word.chars() {
                out.push(
                    self.char_symbol(c)
                        .ok_or_else(|| CodecError::OutOfAlphabet(c.to_string()))?,
                );
            }
        }
        Ok(out)
    }

    /// Decode a blank-free symbol sequence to plain text (tags are dropped).
    pub fn decode_text(&self, seq: &[usize]) -> String {
        let mut words: Vec<String> = Vec::new();
        let mut cur = String::new();
        for &s in seq {
            match self.symbol(s) {
                Some(Symbol::Char(c)) => cur.push(c),
                Some(Symbol::Sep) => {
                    if !cur.is_empty() {
                        words.push(std::mem::take(&mut cur));
                    }
                }
                _ => {}
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
        words.join(" ")
    }
}

/// Encode tagged text as a CTC target: token characters with separators
/// between tokens, each opening tag as its single symbol, each closer as the
/// close symbol. Never emits blanks.
pub fn to_symbols(t: &TaggedText, a: &SymbolAlphabet) -> Result<Vec<usize>, CodecError> {
    let tokens = t.tokens();
    let entities = t.entities();
    if !entities.is_empty() && a.tags.is_none() {
        return Err(CodecError::OutOfAlphabet(
            "alphabet has no tag symbols".to_string(),
        ));
    }
    let mut out = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    let mut next = 0usize;
    for i in 0..=tokens.len() {
        while let Some(&top) = stack.last() {
            if entities[top].end == i {
                stack.pop();
                out.push(a.tag_close().expect("tag symbols present"));
            } else {
                break;
            }
        }
        if i < tokens.len() {
            if i > 0 {
                out.push(a.sep());
            }
            while next < entities.len() && entities[next].start == i {
                let sym = a
                    .tag_open(entities[next].ty.as_str())
                    .ok_or_else(|| CodecError::UnknownEntityType(entities[next].ty.to_string()))?;
                out.push(sym);
                stack.push(next);
                next += 1;
            }
            for c in tokens[i].chars() {
                out.push(
                    a.char_symbol(c)
                        .ok_or_else(|| CodecError::OutOfAlphabet(c.to_string()))?,
                );
            }
        }
    }
    Ok(out)
}

/// Decode a symbol sequence into tagged text, repairing bracket violations:
/// stray closers are dropped, unclosed openers are closed at the end, empty
/// entities are dropped. Total: never fails; returns the number of repairs.
pub fn from_symbols(seq: &[usize], a: &SymbolAlphabet) -> (TaggedText, usize) {
    let mut tokens: Vec<String> = Vec::new();
    let mut spans: Vec<EntitySpan> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    let mut buf = String::new();
    let mut repairs = 0usize;

    fn flush(buf: &mut String, tokens: &mut Vec<String>) {
        if !buf.is_empty() {
            tokens.push(std::mem::take(buf));
        }
    }

    for &s in seq {
        match a.symbol(s) {
            Some(Symbol::Char(c)) => buf.push(c),
            Some(Symbol::Sep) => flush(&mut buf, &mut tokens),
            Some(Symbol::TagOpen(t)) => {
                flush(&mut buf, &mut tokens);
                let ty = a
                    .tags
                    .as_ref()
                    .map(|ts| ts.type_at(t).clone())
                    .unwrap_or_else(|| EntityType::new("unknown").unwrap());
                spans.push(EntitySpan::new(ty, tokens.len(), usize::MAX, stack.len()));
                stack.push(spans.len() - 1);
            }
            Some(Symbol::TagClose) => {
                flush(&mut buf, &mut tokens);
                match stack.pop() {
                    Some(idx) => spans[idx].end = tokens.len(),
                    None => repairs += 1, // stray closer dropped
                }
            }
            // Blanks and out-of-range ids are alignment artifacts; skip them.
            Some(Symbol::Blank) | None => {}
        }
    }
    flush(&mut buf, &mut tokens);
    for idx in stack {
        spans[idx].end = tokens.len(); // unclosed opener closed at sequence end
        repairs += 1;
    }
    let before = spans.len();
    spans.retain(|e| e.end > e.start);
    repairs += before - spans.len(); // empty entities dropped

    let text = TaggedText::new(tokens, spans)
        .expect("stack-built spans always satisfy the bracketing invariants");
    (text, repairs)
}

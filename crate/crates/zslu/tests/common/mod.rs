//! Helpers shared by the integration suites: a generator for random valid
//! tagged texts and an exhaustive edit-distance oracle.

use zslu::align::AlignmentCounts;
use zslu::rng::uniform_usize;
use zslu::tags::{EntitySpan, TagSet, TaggedText};

/// Random valid tagged text over the default tag set: random lowercase
/// tokens plus a properly nested span forest laid out with an explicit stack.
pub fn random_tagged_text(rng: &mut rand_chacha::ChaCha8Rng) -> TaggedText {
    let tags = TagSet::default_types();
    let n_tokens = 1 + uniform_usize(rng, 10);
    let tokens: Vec<String> = (0..n_tokens)
        .map(|_| {
            let len = 1 + uniform_usize(rng, 6);
            (0..len)
                .map(|_| (b'a' + uniform_usize(rng, 26) as u8) as char)
                .collect()
        })
        .collect();
    let mut entities: Vec<EntitySpan> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    for i in 0..=n_tokens {
        while let Some(&top) = stack.last() {
            if i == n_tokens || (entities[top].start < i && uniform_usize(rng, 2) == 0) {
                entities[top].end = i;
                stack.pop();
            } else {
                break;
            }
        }
        if i < n_tokens && stack.len() < 3 && uniform_usize(rng, 4) == 0 {
            let ty = tags.type_at(uniform_usize(rng, tags.len())).clone();
            entities.push(EntitySpan::new(ty, i, usize::MAX, stack.len()));
            stack.push(entities.len() - 1);
        }
    }
    TaggedText::new(tokens, entities).expect("generated text is valid")
}

/// Plain exponential recursion with the same tie preference as the DP
/// backtrace (substitution over insertion over deletion); the independent
/// oracle for S/I/D counts on small instances.
pub fn recursive_alignment<T: PartialEq>(refs: &[T], hyp: &[T]) -> AlignmentCounts {
    if refs.is_empty() {
        return AlignmentCounts {
            insertions: hyp.len(),
            ..Default::default()
        };
    }
    if hyp.is_empty() {
        return AlignmentCounts {
            deletions: refs.len(),
            ..Default::default()
        };
    }
    let matches = refs[refs.len() - 1] == hyp[hyp.len() - 1];
    let mut diag = recursive_alignment(&refs[..refs.len() - 1], &hyp[..hyp.len() - 1]);
    if !matches {
        diag.substitutions += 1;
    }
    let mut ins = recursive_alignment(refs, &hyp[..hyp.len() - 1]);
    ins.insertions += 1;
    let mut del = recursive_alignment(&refs[..refs.len() - 1], hyp);
    del.deletions += 1;
    let mut best = diag;
    if ins.distance() < best.distance() {
        best = ins;
    }
    if del.distance() < best.distance() {
        best = del;
    }
    best
}

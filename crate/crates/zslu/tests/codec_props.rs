//! Property suites for the tag codec: serialize/parse and symbol round
//! trips over randomly generated valid tagged texts, and decode totality
//! over arbitrary symbol sequences.

use proptest::prelude::*;

use zslu::alphabet::{from_symbols, to_symbols, SymbolAlphabet};
use zslu::rng::{rng_from, uniform_usize};
use zslu::tags::{parse_tagged, serialize, strip_tags, EntitySpan, TagSet, TaggedText};

fn tag_alphabet() -> SymbolAlphabet {
    let chars: Vec<char> = ('a'..='z').collect();
    SymbolAlphabet::with_tags(&chars, TagSet::default_types()).unwrap()
}

/// Random valid tagged text: random lowercase tokens plus a properly nested
/// span forest laid out with an explicit stack.
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
    // Walk positions opening and closing spans with stack discipline.
    let mut entities: Vec<EntitySpan> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    for i in 0..=n_tokens {
        while let Some(&top) = stack.last() {
            // Close the innermost span here with probability 1/2 (always at the end).
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
    for (idx, e) in entities.iter().enumerate() {
        assert_ne!(e.end, usize::MAX, "span {idx} left open");
    }
    TaggedText::new(tokens, entities).expect("generated text is valid")
}

#[test]
fn thousand_round_trips_serialize_and_symbols() {
    let tags = TagSet::default_types();
    let alphabet = tag_alphabet();
    let mut rng = rng_from(20260101);
    let mut max_entities = 0;
    for case in 0..1000 {
        let t = random_tagged_text(&mut rng);
        max_entities = max_entities.max(t.entities().len());
        let line = serialize(&t);
        let parsed = parse_tagged(&line, &tags).unwrap_or_else(|e| panic!("case {case}: {e}"));
        assert_eq!(parsed, t, "case {case}: parse(serialize(t)) != t");
        let symbols = to_symbols(&t, &alphabet).unwrap();
        assert!(!symbols.contains(&alphabet.blank()));
        let (back, repairs) = from_symbols(&symbols, &alphabet);
        assert_eq!(back, t, "case {case}: from_symbols(to_symbols(t)) != t");
        assert_eq!(repairs, 0, "case {case}: repairs on well-formed input");
        assert_eq!(
            strip_tags(&line, &tags).unwrap(),
            t.tokens().join(" "),
            "case {case}: strip_tags mismatch"
        );
    }
    assert!(max_entities >= 2, "generator never nested/eventful");
}

#[test]
fn ten_thousand_random_symbol_sequences_decode_safely() {
    let alphabet = tag_alphabet();
    let tags = TagSet::default_types();
    let mut rng = rng_from(777);
    for case in 0..10_000 {
        let len = uniform_usize(&mut rng, 40);
        // Indices may go slightly out of range on purpose.
        let seq: Vec<usize> = (0..len)
            .map(|_| uniform_usize(&mut rng, alphabet.size() + 2))
            .collect();
        let (t, _repairs) = from_symbols(&seq, &alphabet);
        // TaggedText construction enforces the invariants; exercise the
        // serializer too and reparse when tokens exist.
        let line = serialize(&t);
        if !line.is_empty() {
            let back = parse_tagged(&line, &tags)
                .unwrap_or_else(|e| panic!("case {case}: decode produced unparseable `{line}`: {e}"));
            assert_eq!(back, t, "case {case}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Any whitespace-only perturbation of a canonical line parses back to
    /// the same value.
    #[test]
    fn parse_accepts_whitespace_runs(seed in 0u64..10_000, pad in 1usize..4) {
        let mut rng = rng_from(seed);
        let t = random_tagged_text(&mut rng);
        let line = serialize(&t);
        let spaced = line.split(' ').collect::<Vec<_>>().join(&" ".repeat(pad));
        let parsed = parse_tagged(&spaced, &TagSet::default_types()).unwrap();
        prop_assert_eq!(parsed, t);
    }

    /// Entity units are always within token bounds and properly nested.
    #[test]
    fn generated_texts_satisfy_span_invariants(seed in 0u64..10_000) {
        let mut rng = rng_from(seed);
        let t = random_tagged_text(&mut rng);
        let n = t.tokens().len();
        for e in t.entities() {
            prop_assert!(e.start < e.end && e.end <= n);
        }
        for a in t.entities() {
            for b in t.entities() {
                let disjoint = a.end <= b.start || b.end <= a.start;
                let a_in_b = b.start <= a.start && a.end <= b.end;
                let b_in_a = a.start <= b.start && b.end <= a.end;
                prop_assert!(disjoint || a_in_b || b_in_a);
            }
        }
    }
}

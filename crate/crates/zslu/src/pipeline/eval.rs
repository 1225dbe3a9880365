//! Entity error rate and the per-system evaluation report. The entity error
//! rate treats each (type, surface) unit as one token and scores hypothesis
//! unit sequences against references with the same substitution / insertion
//! / deletion alignment used for word error rate, micro-averaged over the
//! evaluation set.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::align::{levenshtein_ops, AlignmentCounts, EditOp};
use crate::tags::TaggedText;

use super::config::NeerMatch;
use super::PipelineError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub n_ref: usize,
}

impl TypeCounts {
    pub fn neer(&self) -> f64 {
        (self.substitutions + self.insertions + self.deletions) as f64 / self.n_ref.max(1) as f64
    }
}

/// Aggregated entity alignment counts over an evaluation set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NeerCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub n_ref: usize,
    pub per_type: BTreeMap<String, TypeCounts>,
}

impl NeerCounts {
    pub fn neer(&self) -> f64 {
        (self.substitutions + self.insertions + self.deletions) as f64 / self.n_ref as f64
    }
}

fn normalize_surface(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn units(t: &TaggedText) -> Vec<(String, String)> {
    t.entity_units()
        .into_iter()
        .map(|(ty, surface)| (ty.as_str().to_string(), normalize_surface(&surface)))
        .collect()
}

/// Micro-averaged entity error rate counts with a per-type breakdown.
/// Insertions are attributed to the hypothesis unit's type.
pub fn compute_neer(
    refs: &[TaggedText],
    hyps: &[TaggedText],
    matching: NeerMatch,
) -> Result<NeerCounts, PipelineError> {
    if refs.len() != hyps.len() {
        return Err(PipelineError::Data(format!(
            "reference/hypothesis length mismatch: {} vs {}",
            refs.len(),
            hyps.len()
        )));
    }
    let mut out = NeerCounts::default();
    for (r, h) in refs.iter().zip(hyps) {
        let ru = units(r);
        let hu = units(h);
        out.n_ref += ru.len();
        for (ty, _) in &ru {
            out.per_type.entry(ty.clone()).or_default().n_ref += 1;
        }
        let eq = |a: &(String, String), b: &(String, String)| match matching {
            NeerMatch::TypeAndSurface => a == b,
            NeerMatch::TypeOnly => a.0 == b.0,
        };
        let (counts, ops) = levenshtein_ops(&ru, &hu, eq);
        out.substitutions += counts.substitutions;
        out.insertions += counts.insertions;
        out.deletions += counts.deletions;
        for op in ops {
            match op {
                EditOp::Substitute(i, _) => {
                    out.per_type.entry(ru[i].0.clone()).or_default().substitutions += 1;
                }
                EditOp::Delete(i) => {
                    out.per_type.entry(ru[i].0.clone()).or_default().deletions += 1;
                }
                EditOp::Insert(j) => {
                    out.per_type.entry(hu[j].0.clone()).or_default().insertions += 1;
                }
                EditOp::Match(..) => {}
            }
        }
    }
    if out.n_ref == 0 {
        return Err(PipelineError::Data(
            "no reference entities in the evaluation set".to_string(),
        ));
    }
    Ok(out)
}

/// Metrics of one system on one evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub wer: f64,
    pub neer: f64,
    pub n_ref_entities: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub repair_total: usize,
    pub per_type_neer: BTreeMap<String, f64>,
}

impl EvalMetrics {
    pub fn from_parts(wer: f64, counts: &NeerCounts, repair_total: usize) -> Self {
        EvalMetrics {
            wer,
            neer: counts.neer(),
            n_ref_entities: counts.n_ref,
            substitutions: counts.substitutions,
            insertions: counts.insertions,
            deletions: counts.deletions,
            repair_total,
            per_type_neer: counts
                .per_type
                .iter()
                .map(|(ty, c)| (ty.clone(), c.neer()))
                .collect(),
        }
    }
}

/// One system's evaluation on the dev and test splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub seed: u64,
    pub config_fingerprint: String,
    pub dev: EvalMetrics,
    pub test: EvalMetrics,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(s).map_err(|e| PipelineError::Data(format!("bad report json: {e}")))
    }
}

/// Micro-averaged word error rate over (reference, hypothesis) text pairs.
pub fn micro_wer(pairs: &[(String, String)]) -> (AlignmentCounts, usize) {
    let mut counts = AlignmentCounts::default();
    let mut n_ref = 0usize;
    for (r, h) in pairs {
        let rt: Vec<&str> = r.split_whitespace().collect();
        let ht: Vec<&str> = h.split_whitespace().collect();
        let c = crate::align::levenshtein(&rt, &ht, |a, b| a == b);
        counts.substitutions += c.substitutions;
        counts.insertions += c.insertions;
        counts.deletions += c.deletions;
        n_ref += rt.len();
    }
    (counts, n_ref)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tags::{parse_tagged, TagSet};

    fn fr_tags() -> TagSet {
        TagSet::new(&[
            "person",
            "location",
            "organisation",
            "product",
            "time",
            "amount",
            "function",
            "event",
        ])
        .unwrap()
    }

    const SAMPLE: &str = "<time demain > <organisation rfi > présente le huitième festival \
                          de jazz de <location saint louis > au <location sénégal >";

    #[test]
    fn identical_hypotheses_score_zero() {
        let tags = fr_tags();
        let t = parse_tagged(SAMPLE, &tags).unwrap();
        let counts =
            compute_neer(&[t.clone()], &[t], NeerMatch::TypeAndSurface).unwrap();
        assert_eq!(counts.neer(), 0.0);
        assert_eq!(counts.n_ref, 4);
    }

    #[test]
    fn missing_entity_is_one_deletion_in_four() {
        // Hypothesis drops (location, sénégal): 1 deletion over 4 references.
        let tags = fr_tags();
        let r = parse_tagged(SAMPLE, &tags).unwrap();
        let h = parse_tagged(
            "<time demain > <organisation rfi > présente le huitième festival de jazz \
             de <location saint louis > au sénégal",
            &tags,
        )
        .unwrap();
        let counts = compute_neer(&[r], &[h], NeerMatch::TypeAndSurface).unwrap();
        assert_eq!(
            (counts.substitutions, counts.insertions, counts.deletions),
            (0, 0, 1)
        );
        assert!((counts.neer() - 0.25).abs() < 1e-12);
        assert_eq!(counts.per_type["location"].deletions, 1);
    }

    #[test]
    fn retyped_entity_is_one_substitution_in_four() {
        let tags = fr_tags();
        let r = parse_tagged(SAMPLE, &tags).unwrap();
        let h = parse_tagged(
            "<amount demain > <organisation rfi > présente le huitième festival de jazz \
             de <location saint louis > au <location sénégal >",
            &tags,
        )
        .unwrap();
        let counts = compute_neer(&[r.clone()], &[h.clone()], NeerMatch::TypeAndSurface).unwrap();
        assert_eq!(
            (counts.substitutions, counts.insertions, counts.deletions),
            (1, 0, 0)
        );
        assert!((counts.neer() - 0.25).abs() < 1e-12);
        // Under type-only matching the surface is ignored but the type still
        // differs, so the substitution remains.
        let c2 = compute_neer(&[r], &[h], NeerMatch::TypeOnly).unwrap();
        assert_eq!(c2.substitutions, 1);
    }

    #[test]
    fn surface_mismatch_is_ignored_by_type_only_matching() {
        let tags = fr_tags();
        let r = parse_tagged("<time demain > au revoir", &tags).unwrap();
        let h = parse_tagged("<time hier > au revoir", &tags).unwrap();
        let strict = compute_neer(&[r.clone()], &[h.clone()], NeerMatch::TypeAndSurface).unwrap();
        assert_eq!(strict.substitutions, 1);
        let lax = compute_neer(&[r], &[h], NeerMatch::TypeOnly).unwrap();
        assert_eq!(lax.neer(), 0.0);
    }

    #[test]
    fn errors_on_mismatched_or_empty_references() {
        let tags = fr_tags();
        let t = parse_tagged(SAMPLE, &tags).unwrap();
        assert!(compute_neer(&[t.clone()], &[], NeerMatch::TypeAndSurface).is_err());
        let plain = parse_tagged("bonjour", &tags).unwrap();
        assert!(compute_neer(&[plain.clone()], &[plain], NeerMatch::TypeAndSurface).is_err());
    }

    #[test]
    fn report_round_trips_and_keeps_the_ratio_invariant() {
        let tags = fr_tags();
        let r = parse_tagged(SAMPLE, &tags).unwrap();
        let h = parse_tagged("<time demain > présente", &tags).unwrap();
        let counts = compute_neer(&[r], &[h], NeerMatch::TypeAndSurface).unwrap();
        let metrics = EvalMetrics::from_parts(0.1, &counts, 2);
        let expect = (counts.substitutions + counts.insertions + counts.deletions) as f64
            / counts.n_ref as f64;
        assert!((metrics.neer - expect).abs() < 1e-12);
        let report = EvalReport {
            system: "simulated".to_string(),
            seed: 3,
            config_fingerprint: "abc".to_string(),
            dev: metrics.clone(),
            test: metrics,
        };
        let back = EvalReport::from_json(&report.to_json()).unwrap();
        assert_eq!(report, back);
    }
}

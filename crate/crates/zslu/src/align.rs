//! Unit-cost edit-distance alignment with reproducible substitution /
//! insertion / deletion counts. Used for word error rate over tokens and for
//! entity error rate over (type, surface) units.

/// Counts from an optimal alignment of a hypothesis against a reference.
/// Insertions are hypothesis-only items, deletions reference-only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AlignmentCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl AlignmentCounts {
    pub fn distance(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// One step of the alignment backtrace, with reference / hypothesis indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Match(usize, usize),
    Substitute(usize, usize),
    Insert(usize),
    Delete(usize),
}

/// Optimal unit-cost alignment. Ties in the backtrace prefer substitution
/// over insertion over deletion, so the S/I/D decomposition is deterministic.
pub fn levenshtein_ops<R, H>(
    refs: &[R],
    hyp: &[H],
    eq: impl Fn(&R, &H) -> bool,
) -> (AlignmentCounts, Vec<EditOp>) {
    let n = refs.len();
    let m = hyp.len();
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub_cost = if eq(&refs[i - 1], &hyp[j - 1]) { 0 } else { 1 };
            d[i][j] = (d[i - 1][j - 1] + sub_cost)
                .min(d[i][j - 1] + 1)
                .min(d[i - 1][j] + 1);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    let mut counts = AlignmentCounts::default();
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let matches = eq(&refs[i - 1], &hyp[j - 1]);
            let sub_cost = if matches { 0 } else { 1 };
            if d[i][j] == d[i - 1][j - 1] + sub_cost {
                if matches {
                    ops.push(EditOp::Match(i - 1, j - 1));
                } else {
                    ops.push(EditOp::Substitute(i - 1, j - 1));
                    counts.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i][j] == d[i][j - 1] + 1 {
            ops.push(EditOp::Insert(j - 1));
            counts.insertions += 1;
            j -= 1;
            continue;
        }
        ops.push(EditOp::Delete(i - 1));
        counts.deletions += 1;
        i -= 1;
    }
    ops.reverse();
    debug_assert_eq!(counts.distance(), d[n][m]);
    (counts, ops)
}

pub fn levenshtein<R, H>(refs: &[R], hyp: &[H], eq: impl Fn(&R, &H) -> bool) -> AlignmentCounts {
    levenshtein_ops(refs, hyp, eq).0
}

use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    fn add(&mut self, other: EditCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
    }
}

/// Minimum-edit alignment of `hyp` against `reference` with unit costs.
/// Among equal-cost alignments the backtrace prefers a substitution, then
/// an insertion, then a deletion.
pub fn align(reference: &[u32], hyp: &[u32]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        cost[i * w] = i;
        for j in 1..=m {
            let diag = cost[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let ins = cost[i * w + j - 1] + 1;
            let del = cost[(i - 1) * w + j] + 1;
            cost[i * w + j] = diag.min(ins).min(del);
        }
    }
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let differs = reference[i - 1] != hyp[j - 1];
            if cost[(i - 1) * w + j - 1] + usize::from(differs) == here {
                counts.substitutions += usize::from(differs);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && cost[i * w + j - 1] + 1 == here {
            counts.insertions += 1;
            j -= 1;
        } else {
            counts.deletions += 1;
            i -= 1;
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceErrors {
    pub reference_tokens: usize,
    pub edits: EditCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_tokens: usize,
    pub wer: f64,
    pub per_utterance: Vec<UtteranceErrors>,
}

/// Corpus WER: total edits over total reference tokens.
pub fn wer(refs: &[TokenSequence], hyps: &[TokenSequence]) -> Result<WerReport> {
    if refs.len() != hyps.len() {
        return Err(Error::Contract(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut total = EditCounts::default();
    let mut n = 0;
    let per_utterance: Vec<UtteranceErrors> = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| {
            let edits = align(r.as_slice(), h.as_slice());
            total.add(edits);
            n += r.len();
            UtteranceErrors {
                reference_tokens: r.len(),
                edits,
            }
        })
        .collect();
    if n == 0 {
        return Err(Error::UndefinedWer);
    }
    Ok(WerReport {
        substitutions: total.substitutions,
        insertions: total.insertions,
        deletions: total.deletions,
        reference_tokens: n,
        wer: total.total() as f64 / n as f64,
        per_utterance,
    })
}

/// `100 (baseline - new) / baseline`, unrounded.
pub fn relative_reduction(baseline_wer: f64, new_wer: f64) -> Result<f64> {
    if baseline_wer == 0.0 {
        return Err(Error::ZeroBaseline);
    }
    Ok(100.0 * (baseline_wer - new_wer) / baseline_wer)
}

/// [`relative_reduction`] rounded to one decimal.
pub fn relative_improvement(baseline_wer: f64, new_wer: f64) -> Result<f64> {
    Ok((relative_reduction(baseline_wer, new_wer)? * 10.0).round() / 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use rand::Rng;

    fn seq(v: &[u32]) -> TokenSequence {
        TokenSequence(v.to_vec())
    }

    /// Plain recursive edit distance, memoized.
    fn oracle(a: &[u32], b: &[u32]) -> usize {
        fn go(a: &[u32], b: &[u32], memo: &mut std::collections::HashMap<(usize, usize), usize>) -> usize {
            if a.is_empty() {
                return b.len();
            }
            if b.is_empty() {
                return a.len();
            }
            if let Some(&v) = memo.get(&(a.len(), b.len())) {
                return v;
            }
            let sub = go(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]);
            let v = sub.min(go(&a[1..], b, memo) + 1).min(go(a, &b[1..], memo) + 1);
            memo.insert((a.len(), b.len()), v);
            v
        }
        go(a, b, &mut Default::default())
    }

    #[test]
    fn identical_is_zero() {
        let r = vec![seq(&[1, 2, 3]), seq(&[4])];
        assert_eq!(wer(&r, &r).unwrap().wer, 0.0);
    }

    #[test]
    fn substitution_plus_insertion() {
        let rep = wer(&[seq(&[1, 2, 3])], &[seq(&[1, 5, 3, 4])]).unwrap();
        assert_eq!((rep.substitutions, rep.insertions, rep.deletions), (1, 1, 0));
        assert!((rep.wer - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tie_break_prefers_substitution() {
        // [1,2] vs [2,1]: two substitutions or one insertion + one deletion
        let e = align(&[1, 2], &[2, 1]);
        assert_eq!((e.substitutions, e.insertions, e.deletions), (2, 0, 0));
        // [1] vs [2,3] costs 2: sub+ins beats ins+ins+del etc.
        let e = align(&[1], &[2, 3]);
        assert_eq!((e.substitutions, e.insertions, e.deletions), (1, 1, 0));
    }

    #[test]
    fn matches_oracle_on_random_pairs() {
        let mut rng = seeded_rng(99);
        for _ in 0..1000 {
            let a: Vec<u32> = (0..rng.random_range(0..9)).map(|_| rng.random_range(1..4)).collect();
            let b: Vec<u32> = (0..rng.random_range(0..9)).map(|_| rng.random_range(1..4)).collect();
            let e = align(&a, &b);
            assert_eq!(e.total(), oracle(&a, &b));
            assert!(e.substitutions + e.deletions <= a.len());
            assert_eq!(a.len() + e.insertions - e.deletions, b.len());
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(wer(&[seq(&[])], &[seq(&[1])]), Err(Error::UndefinedWer)));
        assert!(matches!(wer(&[seq(&[1])], &[]), Err(Error::Contract(_))));
        assert!(matches!(relative_improvement(0.0, 1.0), Err(Error::ZeroBaseline)));
    }

    #[test]
    fn relative_improvement_figures() {
        let cases = [
            (3.59, 3.27, 8.9),
            (9.10, 8.25, 9.3),
            (9.10, 7.99, 12.2),
            (8.32, 7.91, 4.9),
            (8.32, 7.67, 7.8),
        ];
        for (b, n, want) in cases {
            assert_eq!(relative_improvement(b, n).unwrap(), want, "({b}, {n})");
        }
        let v = relative_improvement(3.59, 3.06).unwrap();
        assert!((v - 14.8).abs() <= 0.2);
        assert_eq!(relative_improvement(5.0, 5.0).unwrap(), 0.0);
        assert_eq!(relative_improvement(4.0, 5.0).unwrap(), -relative_improvement(4.0, 3.0).unwrap());
    }
}

use super::{ngram_counts, EvalSet};
use crate::error::Result;

/// Pooled clipped matches and candidate n-gram totals for n = 1..4, plus
/// candidate and effective reference lengths.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn precision(&self, n: usize) -> f64 {
        if self.totals[n - 1] == 0 {
            0.0
        } else {
            self.matches[n - 1] as f64 / self.totals[n - 1] as f64
        }
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.cand_len == 0 {
            0.0
        } else if self.cand_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        } else {
            1.0
        }
    }

    /// Unsmoothed: any zero precision gives 0.
    pub fn score(&self) -> f64 {
        let mut log_sum = 0.0;
        for n in 1..=4 {
            let p = self.precision(n);
            if p == 0.0 {
                return 0.0;
            }
            log_sum += p.ln();
        }
        self.brevity_penalty() * (log_sum / 4.0).exp()
    }
}

/// Reference length closest to the candidate's, ties to the shorter one.
fn closest_ref_len(cand: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(cand), l))
        .unwrap_or(0)
}

pub fn bleu_stats(set: &EvalSet) -> Result<BleuStats> {
    set.validate()?;
    let mut s = BleuStats::default();
    for it in &set.items {
        let cand = ngram_counts(&it.candidate, 4);
        let mut max_ref: std::collections::HashMap<&[String], usize> = Default::default();
        for r in &it.references {
            for (g, c) in ngram_counts(r, 4) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        for (g, c) in cand {
            let n = g.len();
            s.totals[n - 1] += c;
            s.matches[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
        }
        s.cand_len += it.candidate.len();
        s.ref_len += closest_ref_len(it.candidate.len(), &it.references);
    }
    Ok(s)
}

/// Corpus BLEU-4 with uniform weights and no smoothing.
pub fn bleu4(set: &EvalSet) -> Result<f64> {
    Ok(bleu_stats(set)?.score())
}

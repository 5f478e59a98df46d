use super::{EvalItem, EvalSet};
use crate::error::Result;

pub const ROUGE_BETA: f64 = 1.2;

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn f_beta(cand: &[String], reference: &[String]) -> f64 {
    let lcs = lcs_len(cand, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / cand.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Best LCS F-score over the references.
pub fn rouge_l_video(item: &EvalItem) -> f64 {
    item.references
        .iter()
        .map(|r| f_beta(&item.candidate, r))
        .fold(0.0, |a, b| if b > a { b } else { a })
}

pub fn rouge_l(set: &EvalSet) -> Result<f64> {
    set.validate()?;
    Ok(set.items.iter().map(rouge_l_video).sum::<f64>() / set.len() as f64)
}

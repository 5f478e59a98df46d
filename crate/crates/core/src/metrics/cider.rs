use std::collections::{HashMap, HashSet};

use super::{ngram_counts, EvalSet};
use crate::error::{Error, Result};

const MAX_N: usize = 4;
const SIGMA: f64 = 6.0;

/// Per-order tf-idf weights, their norms and the caption length.
struct TfIdf<'a> {
    weights: [HashMap<&'a [String], f64>; MAX_N],
    norms: [f64; MAX_N],
    len: usize,
}

fn tfidf<'a>(tokens: &'a [String], df: &HashMap<&[String], usize>, log_docs: f64) -> TfIdf<'a> {
    let mut weights: [HashMap<&[String], f64>; MAX_N] = Default::default();
    let mut norms = [0.0; MAX_N];
    for (g, tf) in ngram_counts(tokens, MAX_N) {
        let n = g.len() - 1;
        let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
        let w = tf as f64 * (log_docs - d.ln());
        norms[n] += w * w;
        weights[n].insert(g, w);
    }
    for x in &mut norms {
        *x = x.sqrt();
    }
    TfIdf {
        weights,
        norms,
        len: tokens.len(),
    }
}

/// Clipped cosine per order, times the gaussian length penalty.
fn similarity(c: &TfIdf, r: &TfIdf) -> [f64; MAX_N] {
    let delta = c.len as f64 - r.len as f64;
    let penalty = (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
    std::array::from_fn(|n| {
        let mut dot = 0.0;
        for (g, &wc) in &c.weights[n] {
            if let Some(&wr) = r.weights[n].get(g) {
                dot += if wc < wr { wc } else { wr } * wr;
            }
        }
        if c.norms[n] != 0.0 && r.norms[n] != 0.0 {
            dot /= c.norms[n] * r.norms[n];
        }
        dot * penalty
    })
}

/// CIDEr-D of every video, scaled by 10. Document frequencies count the
/// videos whose references contain an n-gram.
pub fn cider_per_video(set: &EvalSet) -> Result<Vec<f64>> {
    set.validate()?;
    if set.len() < 2 {
        return Err(Error::Config("CIDEr needs at least two videos to estimate document frequencies".into()));
    }
    let mut df: HashMap<&[String], usize> = HashMap::new();
    for it in &set.items {
        let seen: HashSet<&[String]> = it.references.iter().flat_map(|r| ngram_counts(r, MAX_N).into_keys()).collect();
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_docs = (set.len() as f64).ln();
    Ok(set
        .items
        .iter()
        .map(|it| {
            let c = tfidf(&it.candidate, &df, log_docs);
            let mut total = 0.0;
            for r in &it.references {
                let sim = similarity(&c, &tfidf(r, &df, log_docs));
                total += sim.iter().sum::<f64>() / MAX_N as f64;
            }
            total / it.references.len() as f64 * 10.0
        })
        .collect())
}

pub fn cider(set: &EvalSet) -> Result<f64> {
    let v = cider_per_video(set)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

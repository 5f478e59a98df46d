//! Corpus caption metrics: BLEU-4, ROUGE-L and CIDEr-D.

mod bleu;
mod cider;
mod rouge;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use bleu::{bleu4, bleu_stats, BleuStats};
pub use cider::{cider, cider_per_video};
pub use rouge::{lcs_len, rouge_l, rouge_l_video, ROUGE_BETA};

use crate::error::{Error, Result};

/// One candidate caption and its references, as word tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub video_id: String,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub items: Vec<EvalItem>,
}

impl EvalSet {
    pub fn new(items: Vec<EvalItem>) -> Result<Self> {
        let set = Self { items };
        set.validate()?;
        Ok(set)
    }

    /// From whitespace-separated strings.
    pub fn from_strs(items: &[(&str, &[&str])]) -> Result<Self> {
        let words = |s: &str| s.split_whitespace().map(str::to_owned).collect::<Vec<_>>();
        Self::new(
            items
                .iter()
                .enumerate()
                .map(|(i, (c, refs))| EvalItem {
                    video_id: format!("v{i}"),
                    candidate: words(c),
                    references: refs.iter().map(|r| words(r)).collect(),
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        if let Some(it) = self.items.iter().find(|it| it.references.is_empty()) {
            return Err(Error::Config(format!("video `{}` has no reference captions", it.video_id)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// n-gram counts of orders `1..=max_n`.
pub(crate) fn ngram_counts(tokens: &[String], max_n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    for n in 1..=max_n {
        for g in tokens.windows(n) {
            *out.entry(g).or_insert(0) += 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VideoScores {
    pub video_id: String,
    pub candidate: String,
    pub rouge_l: f64,
    /// `None` when the set has a single video.
    pub cider: Option<f64>,
    pub exact_match: bool,
}

/// Raw scores in `[0, 1]` (CIDEr in `[0, 10]`) alongside ×100 values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub videos: usize,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: Option<f64>,
    pub bleu4_x100: f64,
    pub rouge_l_x100: f64,
    pub cider_x100: Option<f64>,
    pub exact_matches: usize,
    pub per_video: Vec<VideoScores>,
}

pub fn report(set: &EvalSet) -> Result<MetricReport> {
    set.validate()?;
    let bleu = bleu4(set)?;
    let rouge = rouge_l(set)?;
    let per_cider = if set.len() >= 2 { Some(cider_per_video(set)?) } else { None };
    let cider = per_cider.as_ref().map(|v| v.iter().sum::<f64>() / v.len() as f64);
    let per_video: Vec<VideoScores> = set
        .items
        .iter()
        .enumerate()
        .map(|(i, it)| VideoScores {
            video_id: it.video_id.clone(),
            candidate: it.candidate.join(" "),
            rouge_l: rouge_l_video(it),
            cider: per_cider.as_ref().map(|v| v[i]),
            exact_match: it.references.contains(&it.candidate),
        })
        .collect();
    Ok(MetricReport {
        videos: set.len(),
        bleu4: bleu,
        rouge_l: rouge,
        cider,
        bleu4_x100: bleu * 100.0,
        rouge_l_x100: rouge * 100.0,
        cider_x100: cider.map(|c| c * 100.0),
        exact_matches: per_video.iter().filter(|v| v.exact_match).count(),
        per_video,
    })
}

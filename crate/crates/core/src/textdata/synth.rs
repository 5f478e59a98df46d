use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_manifest, write_vfea, ManifestLine, Split};
use crate::error::{Error, Result};

/// Event vocabulary: a subject noun and two interchangeable verbs.
pub const LEXICON: [(&str, [&str; 2]); 10] = [
    ("man", ["runs", "jogs"]),
    ("dog", ["jumps", "leaps"]),
    ("woman", ["sings", "performs"]),
    ("car", ["drives", "moves"]),
    ("cat", ["sleeps", "naps"]),
    ("boy", ["swims", "paddles"]),
    ("girl", ["dances", "twirls"]),
    ("bird", ["flies", "soars"]),
    ("chef", ["cooks", "fries"]),
    ("player", ["kicks", "shoots"]),
];

const CONNECTIVES: [&str; 3] = ["then", "and then", "after that"];

/// Synthetic corpus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub videos: usize,
    /// Number of distinct events, at most `LEXICON.len()`.
    pub alphabet: usize,
    pub events: usize,
    pub frames_per_event: usize,
    /// Width of each modality's template; files store `2 × feature_dim`.
    pub feature_dim: usize,
    pub sigma: f64,
    pub paraphrases: usize,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            videos: 200,
            alphabet: 10,
            events: 2,
            frames_per_event: 2,
            feature_dim: 8,
            sigma: 0.05,
            paraphrases: 2,
            val_frac: 0.1,
            test_frac: 0.1,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.videos == 0 {
            return bad("--videos must be at least 1".into());
        }
        if self.alphabet == 0 || self.alphabet > LEXICON.len() {
            return bad(format!("--alphabet must be in 1..={}", LEXICON.len()));
        }
        if self.events == 0 || self.frames_per_event == 0 || self.feature_dim == 0 || self.paraphrases == 0 {
            return bad("events, frames per event, feature dim and paraphrases must be positive".into());
        }
        if self.events * 4 > super::MAX_WORDS + 2 {
            return bad(format!("{} events do not fit in a {}-word caption", self.events, super::MAX_WORDS));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("--sigma must be a finite non-negative number".into());
        }
        let fracs_ok = (0.0..=1.0).contains(&self.val_frac)
            && (0.0..=1.0).contains(&self.test_frac)
            && self.val_frac + self.test_frac <= 1.0;
        if !fracs_ok {
            return bad("split fractions must lie in [0, 1] and sum to at most 1".into());
        }
        Ok(())
    }

    /// Caption `k` for an event program. Paraphrases alternate verb synonyms
    /// per event and cycle the connective every two paraphrases.
    pub fn caption(program: &[usize], k: usize) -> String {
        let connective = CONNECTIVES[(k / 2) % CONNECTIVES.len()];
        program
            .iter()
            .enumerate()
            .map(|(j, &e)| {
                let (noun, verbs) = LEXICON[e];
                format!("a {noun} {}", verbs[(k + j) % 2])
            })
            .collect::<Vec<_>>()
            .join(&format!(" {connective} "))
    }

    pub fn frames(&self) -> usize {
        self.events * self.frames_per_event
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SynthSummary {
    pub videos: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub distinct_programs: usize,
}

/// Writes `out_dir/manifest.jsonl` and `out_dir/features/<id>.vfea`.
///
/// Each event has fixed motion and appearance templates drawn from N(0, 1);
/// a frame is its event's template plus N(0, σ) noise.
pub fn gen_synth(spec: &SynthSpec, out_dir: &Path) -> Result<SynthSummary> {
    spec.validate()?;
    let feat_dir = out_dir.join("features");
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let noise = Normal::new(0.0, spec.sigma).expect("valid sigma");
    let d = spec.feature_dim;
    let templates: Vec<(Vec<f64>, Vec<f64>)> = (0..spec.alphabet)
        .map(|_| {
            let m = (0..d).map(|_| std_normal.sample(&mut rng)).collect();
            let a = (0..d).map(|_| std_normal.sample(&mut rng)).collect();
            (m, a)
        })
        .collect();

    let n_test = (spec.test_frac * spec.videos as f64).round() as usize;
    let n_val = ((spec.val_frac * spec.videos as f64).round() as usize).min(spec.videos - n_test);
    let mut order: Vec<usize> = (0..spec.videos).collect();
    order.shuffle(&mut rng);
    let mut splits = vec![Split::Train; spec.videos];
    for &i in &order[..n_test] {
        splits[i] = Split::Test;
    }
    for &i in &order[n_test..n_test + n_val] {
        splits[i] = Split::Val;
    }

    let mut lines = Vec::with_capacity(spec.videos);
    let mut programs = std::collections::HashSet::new();
    for (v, &split) in splits.iter().enumerate() {
        let program: Vec<usize> = (0..spec.events).map(|_| rng.random_range(0..spec.alphabet)).collect();
        let mut data = Vec::with_capacity(spec.frames() * 2 * d);
        for &e in &program {
            for _ in 0..spec.frames_per_event {
                let (m, a) = &templates[e];
                for x in m.iter().chain(a) {
                    let n = if spec.sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    data.push((x + n) as f32);
                }
            }
        }
        let id = format!("vid{v:04}");
        let rel = format!("features/{id}.vfea");
        write_vfea(&out_dir.join(&rel), spec.frames(), 2 * d, &data)?;
        lines.push(ManifestLine {
            video_id: id,
            feature_path: rel,
            captions: (0..spec.paraphrases).map(|k| SynthSpec::caption(&program, k)).collect(),
            split,
        });
        programs.insert(program);
    }
    write_manifest(&out_dir.join("manifest.jsonl"), &lines)?;
    Ok(SynthSummary {
        videos: spec.videos,
        train: spec.videos - n_val - n_test,
        val: n_val,
        test: n_test,
        distinct_programs: programs.len(),
    })
}

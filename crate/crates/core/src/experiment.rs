//! Glue between data, training, decoding and metrics: corpus loading,
//! split evaluation and λ/γ sweeps.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_extended, AdamState, GradCheckReport, LossFn, ParamStore, Tape, Var};
use crate::decoder::{unroll_sf, unroll_tf, unroll_training, BoundModel, Model, ModelConfig, ModelVariant, VideoContext};
use crate::encoder::FeatureSequence;
use crate::error::{Error, Result};
use crate::inference::{decode_all, DecodeMode, Decoded, InferenceConfig};
use crate::metrics::{report, EvalItem, EvalSet, MetricReport};
use crate::objective::{mixed_loss, train_epochs, BatchRecord, CheckpointDir, EpochReport, TrainConfig, TrainSample};
use crate::textdata::{encode_caption, END, RESERVED, read_manifest, read_vfea, CaptionRecord, Manifest, Split, Vocabulary};
use crate::Scalar;

/// A manifest record with its features in memory.
#[derive(Debug, Clone)]
pub struct LoadedVideo<T> {
    pub record: CaptionRecord,
    pub features: Arc<FeatureSequence<T>>,
}

pub fn load_videos<T: Scalar>(manifest: &Manifest, split: Split) -> Result<Vec<LoadedVideo<T>>> {
    manifest
        .split(split)
        .map(|r| {
            let f = read_vfea(&r.feature_path)?.to_sequence()?;
            Ok(LoadedVideo {
                record: r.clone(),
                features: Arc::new(f),
            })
        })
        .collect()
}

/// The three splits of a manifest plus the vocabulary built on (or loaded
/// for) its training split.
pub struct Corpus<T> {
    pub vocab: Vocabulary,
    pub train: Vec<LoadedVideo<T>>,
    pub val: Vec<LoadedVideo<T>>,
    pub test: Vec<LoadedVideo<T>>,
}

impl<T: Scalar> Corpus<T> {
    /// Builds the vocabulary from training captions when `vocab` is `None`.
    pub fn load(manifest_path: &Path, vocab: Option<Vocabulary>, threshold: usize) -> Result<Self> {
        let manifest = read_manifest(manifest_path)?;
        let vocab = vocab.unwrap_or_else(|| build_vocab(&manifest, threshold));
        Ok(Self {
            vocab,
            train: load_videos(&manifest, Split::Train)?,
            val: load_videos(&manifest, Split::Val)?,
            test: load_videos(&manifest, Split::Test)?,
        })
    }

    pub fn split(&self, split: Split) -> &[LoadedVideo<T>] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Per-frame width shared by every video.
    pub fn feature_dim(&self) -> Result<usize> {
        let mut dims = self.train.iter().chain(&self.val).chain(&self.test).map(|v| v.features.input_dim());
        let first = dims.next().ok_or(Error::Empty("corpus"))?;
        match dims.find(|&d| d != first) {
            Some(d) => Err(Error::Config(format!("feature widths differ across videos ({first} vs {d})"))),
            None => Ok(first),
        }
    }
}

pub fn build_vocab(manifest: &Manifest, threshold: usize) -> Vocabulary {
    Vocabulary::build(manifest.split(Split::Train).flat_map(|r| r.captions.iter()), threshold)
}

/// One sample per (video, caption); `captions_per_video` keeps only the
/// first few captions of each video.
pub fn training_samples<T: Scalar>(videos: &[LoadedVideo<T>], vocab: &Vocabulary, captions_per_video: Option<usize>) -> Result<Vec<TrainSample<T>>> {
    let mut out = Vec::new();
    for v in videos {
        let take = captions_per_video.unwrap_or(usize::MAX);
        for (k, c) in v.record.captions.iter().take(take).enumerate() {
            out.push(TrainSample {
                video_id: format!("{}#{k}", v.record.video_id),
                features: Arc::clone(&v.features),
                targets: encode_caption(c, vocab)?.target_ids().to_vec(),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Empty("training captions"));
    }
    Ok(out)
}

/// How captions are produced for evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    pub inference: InferenceConfig,
    pub mode: DecodeMode,
    pub greedy: bool,
    pub workers: usize,
}

impl DecodeOptions {
    pub fn greedy(gamma: f64) -> Self {
        Self {
            inference: InferenceConfig {
                gamma,
                ..InferenceConfig::default()
            },
            mode: DecodeMode::Mixed(gamma),
            greedy: true,
            workers: 1,
        }
    }

    pub fn beam(gamma: f64, width: usize) -> Self {
        Self {
            inference: InferenceConfig {
                gamma,
                beam_width: width,
                ..InferenceConfig::default()
            },
            greedy: false,
            ..Self::greedy(gamma)
        }
    }
}

pub fn decode_split<T: Scalar>(model: &Model, store: &ParamStore<T>, videos: &[LoadedVideo<T>], opts: &DecodeOptions) -> Result<Vec<Decoded<T>>> {
    let feats: Vec<&FeatureSequence<T>> = videos.iter().map(|v| v.features.as_ref()).collect();
    decode_all(model, store, &feats, &opts.inference, opts.mode, opts.greedy, opts.workers)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub captions: Vec<Vec<String>>,
}

pub fn eval_set<T>(videos: &[LoadedVideo<T>], captions: &[Vec<String>]) -> Result<EvalSet> {
    EvalSet::new(
        videos
            .iter()
            .zip(captions)
            .map(|(v, c)| EvalItem {
                video_id: v.record.video_id.clone(),
                candidate: c.clone(),
                references: v.record.captions.clone(),
            })
            .collect(),
    )
}

pub fn evaluate<T: Scalar>(model: &Model, store: &ParamStore<T>, vocab: &Vocabulary, videos: &[LoadedVideo<T>], opts: &DecodeOptions) -> Result<Evaluation> {
    let decoded = decode_split(model, store, videos, opts)?;
    let captions: Vec<Vec<String>> = decoded.iter().map(|d| vocab.decode(&d.tokens)).collect();
    Ok(Evaluation {
        report: report(&eval_set(videos, &captions)?)?,
        captions,
    })
}

/// Fresh model, parameters seeded from `train.seed`, trained on `samples`.
pub fn train_fresh<T: Scalar>(
    config: ModelConfig,
    samples: &[TrainSample<T>],
    train: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochReport, &ParamStore<T>) -> Result<()>,
) -> Result<(Model, ParamStore<T>, Vec<EpochReport>)> {
    let model = Model::new(config)?;
    let mut store = model.init_params(train.seed)?;
    let mut adam: AdamState<T> = train.adam();
    let reports = train_epochs(&model, &mut store, &mut adam, samples, train, 0, None, &mut |_: &BatchRecord| Ok(()), on_epoch)?;
    Ok((model, store, reports))
}

/// Resumes from the newest complete epoch in `dir`, or starts fresh.
pub fn train_resumable<T: Scalar>(
    model: &Model,
    samples: &[TrainSample<T>],
    train: &TrainConfig,
    dir: &CheckpointDir,
    on_batch: &mut dyn FnMut(&BatchRecord) -> Result<()>,
    on_epoch: &mut dyn FnMut(&EpochReport, &ParamStore<T>) -> Result<()>,
) -> Result<(ParamStore<T>, Vec<EpochReport>)> {
    let mut adam: AdamState<T> = train.adam();
    let done = dir.completed_epochs()?.min(train.epochs);
    let mut store = if done > 0 { dir.load(done, model, &mut adam)? } else { model.init_params(train.seed)? };
    let reports = train_epochs(model, &mut store, &mut adam, samples, train, done, Some(dir), on_batch, on_epoch)?;
    Ok((store, reports))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

impl SweepRow {
    fn from_report(value: f64, r: &MetricReport) -> Self {
        Self {
            value,
            bleu4: r.bleu4,
            rouge_l: r.rouge_l,
            cider: r.cider.unwrap_or(0.0),
        }
    }
}

fn sorted_values(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty("sweep values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Evaluates one trained model at every γ.
pub fn sweep_gamma<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    vocab: &Vocabulary,
    videos: &[LoadedVideo<T>],
    gammas: &[f64],
    base: &DecodeOptions,
) -> Result<Vec<SweepRow>> {
    if !model.variant().is_dual() {
        return Err(Error::Config(format!("gamma has no effect on the single-stream `{}` variant", model.variant())));
    }
    sorted_values(gammas)?
        .into_iter()
        .map(|g| {
            let opts = DecodeOptions {
                inference: InferenceConfig { gamma: g, ..base.inference },
                mode: DecodeMode::Mixed(g),
                ..*base
            };
            Ok(SweepRow::from_report(g, &evaluate(model, store, vocab, videos, &opts)?.report))
        })
        .collect()
}

/// Retrains from the same initialization for every λ.
pub fn sweep_lambda<T: Scalar>(
    config: &ModelConfig,
    samples: &[TrainSample<T>],
    train: &TrainConfig,
    vocab: &Vocabulary,
    videos: &[LoadedVideo<T>],
    lambdas: &[f64],
    opts: &DecodeOptions,
    on_done: &mut dyn FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    sorted_values(lambdas)?
        .into_iter()
        .map(|l| {
            let cfg = TrainConfig { lambda: l, ..train.clone() };
            let (model, store, _) = train_fresh(config.clone(), samples, &cfg, &mut |_, _| Ok(()))?;
            let row = SweepRow::from_report(l, &evaluate(&model, &store, vocab, videos, opts)?.report);
            on_done(&row);
            Ok(row)
        })
        .collect()
}

/// `value,bleu4,rouge_l,cider` with a header line.
pub fn write_curves_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("value,bleu4,rouge_l,cider\n");
    for r in rows {
        text.push_str(&format!("{},{},{},{}\n", r.value, r.bleu4, r.rouge_l, r.cider));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// A small seeded model, video and caption for gradient checking the full
/// mixed loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckFixture {
    pub variant: ModelVariant,
    pub hidden: usize,
    pub vocab: usize,
    pub feature_dim: usize,
    pub frames: usize,
    /// Decoder steps, `<end>` included.
    pub steps: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl GradcheckFixture {
    pub fn new(variant: ModelVariant, seed: u64) -> Self {
        Self {
            variant,
            hidden: 8,
            vocab: 12,
            feature_dim: 6,
            frames: 3,
            steps: 4,
            lambda: 0.8,
            seed,
        }
    }

    fn build(&self) -> Result<(ParamStore<f64>, FixtureLoss)> {
        if self.vocab <= RESERVED.len() || self.steps == 0 {
            return Err(Error::Config("gradcheck fixture needs content words and at least one step".into()));
        }
        let model = Model::new(ModelConfig::new(self.variant, self.feature_dim, self.hidden, self.vocab))?;
        let store = model.init_params(self.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        let rows: Vec<f64> = (0..self.frames * self.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut targets: Vec<usize> = (1..self.steps).map(|_| rng.random_range(RESERVED.len()..self.vocab)).collect();
        targets.push(END);
        let loss = FixtureLoss {
            tf_only: model.tf_exclusive_params().into_iter().collect(),
            sf_only: model.sf_exclusive_params().into_iter().collect(),
            model,
            rows,
            frames: self.frames,
            dim: self.feature_dim,
            targets,
            lambda: self.lambda,
        };
        Ok((store, loss))
    }

    pub fn run(&self, tolerance: f64, fd_step: f64) -> Result<GradCheckReport> {
        let (store, loss) = self.build()?;
        grad_check_extended(&store, &loss, tolerance, fd_step)
    }
}

struct FixtureLoss {
    model: Model,
    tf_only: HashSet<String>,
    sf_only: HashSet<String>,
    rows: Vec<f64>,
    frames: usize,
    dim: usize,
    targets: Vec<usize>,
    lambda: f64,
}

impl FixtureLoss {
    fn context<S: Scalar>(&self, tape: &Tape<S>, store: &ParamStore<S>) -> Result<(BoundModel, VideoContext)> {
        let rows: Vec<S> = self.rows.iter().map(|&x| S::lit(x)).collect();
        let f = FeatureSequence::from_fused_rows(self.frames, self.dim, &rows, self.dim / 2)?;
        let bound = self.model.bind(tape, store)?;
        let ctx = bound.prepare(tape, &f)?;
        Ok((bound, ctx))
    }
}

impl LossFn for FixtureLoss {
    fn loss<S: Scalar>(&self, tape: &Tape<S>, store: &ParamStore<S>) -> Result<Var> {
        let (bound, ctx) = self.context(tape, store)?;
        let u = unroll_training(tape, &bound, &ctx, &self.targets)?;
        Ok(mixed_loss(tape, u.p_tf, u.p_sf, &self.targets, None, self.lambda)?.total)
    }

    /// Only the stream that reads `param` when it belongs to one stream.
    fn loss_for<S: Scalar>(&self, tape: &Tape<S>, store: &ParamStore<S>, param: &str) -> Result<Var> {
        if self.tf_only.contains(param) {
            let (bound, ctx) = self.context(tape, store)?;
            let (p, _) = unroll_tf(tape, &bound, &ctx, &self.targets)?;
            Ok(mixed_loss(tape, p, None, &self.targets, None, self.lambda)?.total)
        } else if self.sf_only.contains(param) {
            let (bound, ctx) = self.context(tape, store)?;
            let (p, _) = unroll_sf(tape, &bound, &ctx, &self.targets)?;
            let l_sf = mixed_loss(tape, p, None, &self.targets, None, self.lambda)?.total;
            Ok(tape.scale(l_sf, S::lit(self.lambda)))
        } else {
            self.loss(tape, store)
        }
    }
}

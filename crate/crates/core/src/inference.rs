//! γ-mixed decoding: `p' = γ p_tf + (1 − γ) p_sf`, searched greedily or
//! with a beam.
//!
//! At every step the TF stream is fed the chosen token and the SF stream is
//! fed the mixed distribution `p'`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape};
use crate::decoder::{sf_step, tf_step, BoundModel, DualStreamState, Model, StreamState, VideoContext};
use crate::encoder::FeatureSequence;
use crate::error::{Error, Result};
use crate::textdata::{END, START};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub gamma: f64,
    pub beam_width: usize,
    pub max_len: usize,
    /// Rank finished beams by mean rather than total log-probability.
    pub length_norm: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            gamma: 0.7,
            beam_width: 4,
            max_len: 20,
            length_norm: true,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidGamma(self.gamma));
        }
        if self.beam_width == 0 || self.max_len == 0 {
            return Err(Error::Config("beam width and max length must be at least 1".into()));
        }
        Ok(())
    }
}

/// `γ p_tf + (1 − γ) p_sf`.
pub fn mix<T: Scalar>(p_tf: &[T], p_sf: &[T], gamma: f64) -> Result<Vec<T>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidGamma(gamma));
    }
    if p_tf.len() != p_sf.len() {
        return Err(Error::Shape {
            op: "mix",
            lhs: vec![p_tf.len()],
            rhs: vec![p_sf.len()],
        });
    }
    let g = T::lit(gamma);
    let h = T::lit(1.0 - gamma);
    Ok(p_tf.iter().zip(p_sf).map(|(&a, &b)| g * a + h * b).collect())
}

/// Anything that turns (previous token, previous distribution) into the
/// next-token distribution.
pub trait StepModel<T> {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn initial(&self) -> Result<Self::State>;

    fn step(&self, state: &Self::State, prev_token: usize, prev_dist: &[T]) -> Result<(Self::State, Vec<T>)>;
}

/// A decoded caption with its per-step distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded<T> {
    /// Tokens without the final `<end>`.
    pub tokens: Vec<usize>,
    /// Σ log p' over emitted tokens, `<end>` included when emitted.
    pub log_prob: f64,
    /// Number of scored steps.
    pub steps: usize,
    /// p' at every step of the chosen path.
    pub trace: Vec<Vec<T>>,
}

impl<T> Decoded<T> {
    pub fn score(&self, length_norm: bool) -> f64 {
        normalized(self.log_prob, self.steps, length_norm)
    }
}

fn normalized(log_prob: f64, steps: usize, length_norm: bool) -> f64 {
    if length_norm {
        log_prob / steps.max(1) as f64
    } else {
        log_prob
    }
}

fn start_dist<T: Scalar>(vocab: usize) -> Vec<T> {
    let mut p = vec![T::zero(); vocab];
    p[START] = T::one();
    p
}

/// Largest entry, ties to the smaller index.
pub fn argmax<T: Scalar>(p: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

pub fn decode_greedy<T: Scalar, M: StepModel<T>>(model: &M, max_len: usize) -> Result<Decoded<T>> {
    let mut state = model.initial()?;
    let mut prev = START;
    let mut dist = start_dist(model.vocab_size());
    let mut out = Decoded {
        tokens: Vec::new(),
        log_prob: 0.0,
        steps: 0,
        trace: Vec::new(),
    };
    for _ in 0..max_len {
        let (next, p) = model.step(&state, prev, &dist)?;
        let tok = argmax(&p);
        out.log_prob += p[tok].as_f64().ln();
        out.steps += 1;
        out.trace.push(p.clone());
        if tok == END {
            break;
        }
        out.tokens.push(tok);
        state = next;
        prev = tok;
        dist = p;
    }
    Ok(out)
}

/// Log-probability of forcing `tokens` (then `<end>` if room remains) with
/// the same feedback rule as decoding.
pub fn sequence_log_prob<T: Scalar, M: StepModel<T>>(model: &M, tokens: &[usize], max_len: usize) -> Result<(f64, usize)> {
    let mut state = model.initial()?;
    let mut prev = START;
    let mut dist = start_dist(model.vocab_size());
    let mut lp = 0.0;
    let mut forced: Vec<usize> = tokens.to_vec();
    if forced.len() < max_len {
        forced.push(END);
    }
    for &tok in &forced {
        let (next, p) = model.step(&state, prev, &dist)?;
        lp += p[tok].as_f64().ln();
        state = next;
        prev = tok;
        dist = p;
    }
    Ok((lp, forced.len()))
}

struct Hyp<S, T> {
    tokens: Vec<usize>,
    log_prob: f64,
    state: S,
    dist: Vec<T>,
}

struct Finished<T> {
    tokens: Vec<usize>,
    log_prob: f64,
    steps: usize,
    trace: Vec<Vec<T>>,
}

fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

/// Like [`rank`], but scores within a relative 1e-12 count as tied so that
/// rounding in the length normalization cannot break a tie.
fn rank_finished(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    let tol = 1e-12 * a.0.abs().max(b.0.abs());
    if (a.0 - b.0).abs() <= tol {
        a.1.cmp(b.1)
    } else {
        rank(a, b)
    }
}

/// Beam search keeping the `beam_width` best prefixes by total
/// log-probability. A prefix whose chosen continuation is `<end>` leaves the
/// beam as finished; the search stops when no prefix is left or at
/// `max_len`. The best finished caption is chosen by (normalized) score,
/// ties to the lexicographically smaller token sequence.
pub fn decode_beam<T: Scalar, M: StepModel<T>>(model: &M, cfg: &InferenceConfig) -> Result<Decoded<T>> {
    if cfg.beam_width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut alive = vec![Hyp {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.initial()?,
        dist: start_dist::<T>(model.vocab_size()),
    }];
    let mut traces: Vec<Vec<Vec<T>>> = vec![Vec::new()];
    let mut finished: Vec<Finished<T>> = Vec::new();
    for _ in 0..cfg.max_len {
        let mut expanded = Vec::with_capacity(alive.len());
        let mut cands: Vec<(f64, usize, usize, Vec<usize>)> = Vec::new();
        for (hi, h) in alive.iter().enumerate() {
            let prev = h.tokens.last().copied().unwrap_or(START);
            let (state, p) = model.step(&h.state, prev, &h.dist)?;
            for (tok, &pt) in p.iter().enumerate() {
                if pt > T::zero() {
                    let mut seq = h.tokens.clone();
                    seq.push(tok);
                    cands.push((h.log_prob + pt.as_f64().ln(), hi, tok, seq));
                }
            }
            expanded.push((state, p));
        }
        cands.sort_by(|a, b| rank((a.0, &a.3), (b.0, &b.3)));
        cands.truncate(cfg.beam_width);
        let mut next_alive = Vec::new();
        let mut next_traces = Vec::new();
        for (lp, hi, tok, seq) in cands {
            let (state, p) = &expanded[hi];
            let mut trace = traces[hi].clone();
            trace.push(p.clone());
            if tok == END {
                finished.push(Finished {
                    steps: seq.len(),
                    tokens: alive[hi].tokens.clone(),
                    log_prob: lp,
                    trace,
                });
            } else {
                next_alive.push(Hyp {
                    tokens: seq,
                    log_prob: lp,
                    state: state.clone(),
                    dist: p.clone(),
                });
                next_traces.push(trace);
            }
        }
        alive = next_alive;
        traces = next_traces;
        if alive.is_empty() {
            break;
        }
    }
    for (h, trace) in alive.into_iter().zip(traces) {
        finished.push(Finished {
            steps: h.tokens.len(),
            tokens: h.tokens,
            log_prob: h.log_prob,
            trace,
        });
    }
    let best = finished
        .into_iter()
        .min_by(|a, b| {
            rank_finished(
                (normalized(a.log_prob, a.steps, cfg.length_norm), &a.tokens),
                (normalized(b.log_prob, b.steps, cfg.length_norm), &b.tokens),
            )
        })
        .expect("at least one hypothesis");
    Ok(Decoded {
        tokens: best.tokens,
        log_prob: best.log_prob,
        steps: best.steps,
        trace: best.trace,
    })
}

/// Which distribution drives decoding of a dual-stream model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Mixed(f64),
    TfOnly,
    SfOnly,
}

/// A trained model bound to one video on a gradient-free tape.
pub struct VideoDecoder<'a, T: Scalar> {
    tape: &'a Tape<T>,
    bound: BoundModel,
    ctx: VideoContext,
    mode: DecodeMode,
    vocab: usize,
}

impl<'a, T: Scalar> VideoDecoder<'a, T> {
    /// Single-stream models always decode from the TF stream.
    pub fn new(tape: &'a Tape<T>, model: &Model, store: &ParamStore<T>, features: &FeatureSequence<T>, mode: DecodeMode) -> Result<Self> {
        let mode = if model.variant().is_dual() { mode } else { DecodeMode::TfOnly };
        if let DecodeMode::Mixed(g) = mode {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::InvalidGamma(g));
            }
        }
        let bound = model.bind(tape, store)?;
        let ctx = bound.prepare(tape, features)?;
        Ok(Self {
            tape,
            bound,
            ctx,
            mode,
            vocab: model.vocab_size(),
        })
    }
}

impl<T: Scalar> StepModel<T> for VideoDecoder<'_, T> {
    type State = DualStreamState;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn initial(&self) -> Result<DualStreamState> {
        let frames = self.ctx.video.frames;
        Ok(DualStreamState {
            tf: StreamState::zeros(self.tape, &self.bound.tf, frames)?,
            sf: self.bound.sf.map(|s| StreamState::zeros(self.tape, &s, frames)).transpose()?,
            t: 0,
        })
    }

    fn step(&self, state: &DualStreamState, prev_token: usize, prev_dist: &[T]) -> Result<(DualStreamState, Vec<T>)> {
        let t = self.tape;
        let mut next = *state;
        next.t += 1;
        let run_tf = !matches!(self.mode, DecodeMode::SfOnly);
        let run_sf = !matches!(self.mode, DecodeMode::TfOnly);
        let p_tf = if run_tf {
            let out = tf_step(t, &self.bound, &self.ctx, &state.tf, prev_token)?;
            next.tf = out.state;
            Some(t.value(out.p))
        } else {
            None
        };
        let p_sf = if run_sf {
            let sf_state = state.sf.as_ref().ok_or(Error::Config("model has no self-forcing stream".into()))?;
            let prev = t.vector(prev_dist.to_vec())?;
            let out = sf_step(t, &self.bound, &self.ctx, sf_state, prev)?;
            next.sf = Some(out.state);
            Some(t.value(out.p))
        } else {
            None
        };
        let p = match (self.mode, p_tf, p_sf) {
            (DecodeMode::Mixed(g), Some(a), Some(b)) => mix(&a, &b, g)?,
            (_, Some(a), None) => a.to_vec(),
            (_, None, Some(b)) => b.to_vec(),
            _ => unreachable!("at least one stream runs"),
        };
        Ok((next, p))
    }
}

/// Decodes one video. `beam_width == 1` or `greedy` uses greedy search.
pub fn decode_video<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    features: &FeatureSequence<T>,
    cfg: &InferenceConfig,
    mode: DecodeMode,
    greedy: bool,
) -> Result<Decoded<T>> {
    cfg.validate()?;
    let tape = Tape::no_grad();
    let dec = VideoDecoder::new(&tape, model, store, features, mode)?;
    if greedy {
        decode_greedy(&dec, cfg.max_len)
    } else {
        decode_beam(&dec, cfg)
    }
}

/// Decodes many videos on up to `workers` threads; results keep input order.
pub fn decode_all<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    videos: &[&FeatureSequence<T>],
    cfg: &InferenceConfig,
    mode: DecodeMode,
    greedy: bool,
    workers: usize,
) -> Result<Vec<Decoded<T>>> {
    let workers = workers.clamp(1, videos.len().max(1));
    if workers == 1 {
        return videos.iter().map(|f| decode_video(model, store, f, cfg, mode, greedy)).collect();
    }
    let chunk = videos.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = videos
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|f| decode_video(model, store, f, cfg, mode, greedy)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(videos.len());
        for h in handles {
            out.extend(h.join().expect("decode worker panicked")?);
        }
        Ok(out)
    })
}

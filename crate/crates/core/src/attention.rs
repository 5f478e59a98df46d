//! Additive temporal attention and its visual-aware extension.
//!
//! Conventional attention scores frame `i` as
//! `u_i = w_u · tanh(W_vu x_i + W_hu q)` and returns `c = Σ softmax(u)_i x_i`.
//! The visual-aware form keeps one LSTM track per frame, fed `α_i x_i` after
//! every step, and appends the sum of the track hiddens to the query.

use crate::autodiff::{ParamStore, Tape, Var};
use crate::encoder::EncodedVideo;
use crate::error::{Error, Result};
use crate::nn::{BoundLstm, Init, ParamSpec};
use crate::Scalar;

/// Parameter layout of one attention module: `w_vu [A × F]`,
/// `w_hu [A × Q]`, `w_u [A]` where `F` is the encoded frame width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attention {
    pub prefix: String,
    pub feature_dim: usize,
    pub query_dim: usize,
    pub inner_dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAttention {
    pub w_vu: Var,
    pub w_hu: Var,
    pub w_u: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub scores: Var,
    pub weights: Var,
    pub context: Var,
}

impl Attention {
    pub fn new(prefix: impl Into<String>, feature_dim: usize, query_dim: usize, inner_dim: usize) -> Self {
        Self {
            prefix: prefix.into(),
            feature_dim,
            query_dim,
            inner_dim,
        }
    }

    pub fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let spec = |leaf: &str, shape: Vec<usize>| ParamSpec {
            name: self.name(leaf),
            shape,
            init: Init::FanIn,
        };
        vec![
            spec("w_vu", vec![self.inner_dim, self.feature_dim]),
            spec("w_hu", vec![self.inner_dim, self.query_dim]),
            spec("w_u", vec![self.inner_dim]),
        ]
    }

    pub fn bind<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>) -> Result<BoundAttention> {
        Ok(BoundAttention {
            w_vu: tape.param(store, &self.name("w_vu"))?,
            w_hu: tape.param(store, &self.name("w_hu"))?,
            w_u: tape.param(store, &self.name("w_u"))?,
        })
    }
}

impl BoundAttention {
    /// `V · W_vuᵀ`, shared by every decoding step over the same video.
    pub fn keys<T: Scalar>(&self, tape: &Tape<T>, video: &EncodedVideo) -> Result<Var> {
        if video.frames == 0 {
            return Err(Error::Empty("attention over zero frames"));
        }
        tape.matmul_t(video.states, self.w_vu)
    }

    pub fn attend_with_keys<T: Scalar>(&self, tape: &Tape<T>, video: &EncodedVideo, keys: Var, query: Var) -> Result<AttentionOutput> {
        let q = tape.matmul_t(query, self.w_hu)?;
        let act = tape.tanh(tape.add(keys, q)?);
        let scores = tape.matmul_t(act, self.w_u)?;
        let weights = tape.softmax(scores);
        let context = tape.matmul(weights, video.states)?;
        Ok(AttentionOutput { scores, weights, context })
    }
}

/// Conventional attention over `video` for `query`.
pub fn attend<T: Scalar>(tape: &Tape<T>, video: &EncodedVideo, query: Var, p: &BoundAttention) -> Result<AttentionOutput> {
    let keys = p.keys(tape, video)?;
    p.attend_with_keys(tape, video, keys, query)
}

/// Per-frame LSTM tracks: hidden and cell `[n × H_v]`, and the row sum of
/// the hiddens `[H_v]`.
#[derive(Debug, Clone, Copy)]
pub struct VisualTrackState {
    pub hidden: Var,
    pub cell: Var,
    pub summed: Var,
}

impl VisualTrackState {
    pub fn zeros<T: Scalar>(tape: &Tape<T>, frames: usize, dim: usize) -> Result<Self> {
        let hidden = tape.constant(vec![frames, dim], vec![T::zero(); frames * dim])?;
        let cell = tape.constant(vec![frames, dim], vec![T::zero(); frames * dim])?;
        let summed = tape.vector(vec![T::zero(); dim])?;
        Ok(Self { hidden, cell, summed })
    }
}

/// Advances every frame's track with input `α_i x_i`; all frames share
/// `lstm2`.
pub fn track_update<T: Scalar>(
    tape: &Tape<T>,
    state: &VisualTrackState,
    alpha: Var,
    video: &EncodedVideo,
    lstm2: &BoundLstm,
) -> Result<VisualTrackState> {
    let input = tape.scale_rows(video.states, alpha)?;
    let (hidden, cell) = lstm2.step(tape, input, state.hidden, state.cell)?;
    let summed = tape.sum_rows(hidden)?;
    Ok(VisualTrackState { hidden, cell, summed })
}

/// Attention whose query is `query_h ∘ Σ_i h^v_i`.
pub fn visual_aware_attend<T: Scalar>(
    tape: &Tape<T>,
    video: &EncodedVideo,
    keys: Var,
    query_h: Var,
    state: &VisualTrackState,
    p: &BoundAttention,
) -> Result<AttentionOutput> {
    let query = tape.concat(&[query_h, state.summed])?;
    p.attend_with_keys(tape, video, keys, query)
}

//! Dual-stream caption decoder.
//!
//! The teacher-forcing (TF) stream reads the previous ground-truth word
//! through `W_e`; the self-forcing (SF) stream reads `pᵀ W_e` for its own
//! previous distribution `p`. Both streams attend over the encoded video,
//! run their own LSTM, and share the embedding `W_e` and output projection
//! `W_p`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{visual_aware_attend, Attention, BoundAttention, VisualTrackState};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::encoder::{encode, BoundEncoder, EncodedVideo, Encoder, FeatureSequence};
use crate::error::{Error, Result};
use crate::nn::{check_simplex, embed_soft, init_params, BoundLinear, BoundLstm, Embedding, Linear, LstmCell, ParamSpec};
use crate::textdata::START;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    Baseline,
    Va,
    Dd,
    Vadd,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [Self::Baseline, Self::Va, Self::Dd, Self::Vadd];

    pub fn is_dual(self) -> bool {
        matches!(self, Self::Dd | Self::Vadd)
    }

    pub fn uses_va(self) -> bool {
        matches!(self, Self::Va | Self::Vadd)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Va => "va",
            Self::Dd => "dd",
            Self::Vadd => "vadd",
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected baseline, va, dd or vadd)")))
    }
}

/// Sizes and wiring of a captioning model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    /// Per-frame input width (motion + appearance).
    pub feature_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub att_dim: usize,
    pub track_dim: usize,
    pub vocab_size: usize,
    /// SF stream reuses the TF stream's attention and track parameters.
    #[serde(default)]
    pub share_va: bool,
}

impl ModelConfig {
    /// Embedding, attention and track sizes all equal to `hidden`.
    pub fn new(variant: ModelVariant, feature_dim: usize, hidden: usize, vocab_size: usize) -> Self {
        Self {
            variant,
            feature_dim,
            hidden,
            embed_dim: hidden,
            att_dim: hidden,
            track_dim: hidden,
            vocab_size,
            share_va: false,
        }
    }

    fn validate(&self) -> Result<()> {
        let dims = [self.feature_dim, self.hidden, self.embed_dim, self.att_dim, self.track_dim];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.vocab_size <= START {
            return Err(Error::Config(format!("vocabulary of {} tokens has no room for <start>", self.vocab_size)));
        }
        Ok(())
    }
}

/// Parameter layout of one decoding stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamLayout {
    pub lstm: LstmCell,
    pub attention: Attention,
    pub track: Option<LstmCell>,
}

impl StreamLayout {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = self.lstm.param_specs();
        v.extend(self.attention.param_specs());
        if let Some(t) = &self.track {
            v.extend(t.param_specs());
        }
        v
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundStream {
    pub lstm: BoundLstm,
    pub attention: BoundAttention,
    pub track: Option<BoundLstm>,
}

/// Full model: encoder, shared word embedding and output projection, and
/// one or two streams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub embed: Embedding,
    pub output: Linear,
    pub tf: StreamLayout,
    pub sf: Option<StreamLayout>,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundModel {
    pub encoder: BoundEncoder,
    pub embed: Var,
    pub output: BoundLinear,
    pub tf: BoundStream,
    pub sf: Option<BoundStream>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let width = 2 * c.hidden;
        let query = if c.variant.uses_va() { c.hidden + c.track_dim } else { c.hidden };
        let stream = |name: &str, lstm: &str| StreamLayout {
            lstm: LstmCell::new(format!("decoder.{name}.{lstm}"), c.embed_dim + width, c.hidden),
            attention: Attention::new(format!("decoder.{name}.att"), width, query, c.att_dim),
            track: c
                .variant
                .uses_va()
                .then(|| LstmCell::new(format!("decoder.{name}.lstm2"), width, c.track_dim)),
        };
        let tf = stream("tf", "lstm3");
        let sf = c.variant.is_dual().then(|| {
            let mut sf = stream("sf", "lstm4");
            if c.share_va {
                sf.attention = tf.attention.clone();
                sf.track = tf.track.clone();
            }
            sf
        });
        Ok(Self {
            encoder: Encoder::new("encoder.lstm1", c.feature_dim, c.hidden),
            embed: Embedding::new("decoder.embed.w_e", c.vocab_size, c.embed_dim),
            output: Linear::new("decoder.out", c.hidden, c.vocab_size, true),
            tf,
            sf,
            config,
        })
    }

    pub fn variant(&self) -> ModelVariant {
        self.config.variant
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Every parameter once, in declaration order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut all = self.encoder.param_specs();
        all.extend(self.embed.param_specs());
        all.extend(self.output.param_specs());
        all.extend(self.tf.param_specs());
        if let Some(sf) = &self.sf {
            all.extend(sf.param_specs());
        }
        let mut seen = std::collections::HashSet::new();
        all.retain(|s| seen.insert(s.name.clone()));
        all
    }

    /// Names of parameters used only by the SF stream.
    pub fn sf_exclusive_params(&self) -> Vec<String> {
        let Some(sf) = &self.sf else { return Vec::new() };
        let shared: std::collections::HashSet<String> = {
            let mut m = self.clone();
            m.sf = None;
            m.param_specs().into_iter().map(|s| s.name).collect()
        };
        sf.param_specs().into_iter().map(|s| s.name).filter(|n| !shared.contains(n)).collect()
    }

    /// Parameters only the TF stream reads; empty for single-stream models.
    pub fn tf_exclusive_params(&self) -> Vec<String> {
        let Some(sf) = &self.sf else { return Vec::new() };
        let sf_names: std::collections::HashSet<String> = sf.param_specs().into_iter().map(|s| s.name).collect();
        self.tf.param_specs().into_iter().map(|s| s.name).filter(|n| !sf_names.contains(n)).collect()
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        init_params(&mut store, &self.param_specs(), seed)?;
        Ok(store)
    }

    /// Checks that `store` holds exactly this model's parameters.
    pub fn check_params<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        let specs = self.param_specs();
        for s in &specs {
            let t = store.get(&s.name)?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Shape {
                    op: "parameter",
                    lhs: t.shape().to_vec(),
                    rhs: s.shape.clone(),
                });
            }
        }
        if store.len() != specs.len() {
            let known: std::collections::HashSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            let extra = store.names().find(|n| !known.contains(n)).unwrap_or_default();
            return Err(Error::Config(format!("parameter `{extra}` is not part of a {} model", self.variant())));
        }
        Ok(())
    }

    pub fn bind<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>) -> Result<BoundModel> {
        let stream = |s: &StreamLayout| -> Result<BoundStream> {
            Ok(BoundStream {
                lstm: s.lstm.bind(tape, store)?,
                attention: s.attention.bind(tape, store)?,
                track: s.track.as_ref().map(|t| t.bind(tape, store)).transpose()?,
            })
        };
        Ok(BoundModel {
            encoder: self.encoder.bind(tape, store)?,
            embed: self.embed.bind(tape, store)?,
            output: self.output.bind(tape, store)?,
            tf: stream(&self.tf)?,
            sf: self.sf.as_ref().map(stream).transpose()?,
        })
    }
}

/// Encoded video plus each stream's precomputed attention keys.
#[derive(Debug, Clone, Copy)]
pub struct VideoContext {
    pub video: EncodedVideo,
    pub tf_keys: Var,
    pub sf_keys: Option<Var>,
}

impl BoundModel {
    pub fn prepare<T: Scalar>(&self, tape: &Tape<T>, features: &FeatureSequence<T>) -> Result<VideoContext> {
        let video = encode(tape, features, &self.encoder)?;
        Ok(VideoContext {
            tf_keys: self.tf.attention.keys(tape, &video)?,
            sf_keys: self.sf.map(|s| s.attention.keys(tape, &video)).transpose()?,
            video,
        })
    }

    fn sf(&self) -> Result<&BoundStream> {
        self.sf.as_ref().ok_or(Error::Config("single-stream model has no self-forcing stream".into()))
    }
}

/// Recurrent state of one stream.
#[derive(Debug, Clone, Copy)]
pub struct StreamState {
    pub h: Var,
    pub c: Var,
    pub va: Option<VisualTrackState>,
    /// Previous distribution fed to the SF stream.
    pub last_p: Option<Var>,
}

impl StreamState {
    pub fn zeros<T: Scalar>(tape: &Tape<T>, stream: &BoundStream, frames: usize) -> Result<Self> {
        let h = tape.vector(vec![T::zero(); stream.lstm.hidden])?;
        let c = tape.vector(vec![T::zero(); stream.lstm.hidden])?;
        let va = stream
            .track
            .map(|t| VisualTrackState::zeros(tape, frames, t.hidden))
            .transpose()?;
        Ok(Self { h, c, va, last_p: None })
    }
}

/// Both streams advanced in lockstep.
#[derive(Debug, Clone, Copy)]
pub struct DualStreamState {
    pub tf: StreamState,
    pub sf: Option<StreamState>,
    pub t: usize,
}

/// Output of one stream step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub state: StreamState,
    pub p: Var,
    pub alpha: Var,
    pub context: Var,
}

/// Attention, track update, LSTM and output softmax for one stream, given
/// the word input `word` (an embedding row or a soft embedding).
fn stream_step<T: Scalar>(
    tape: &Tape<T>,
    model: &BoundModel,
    stream: &BoundStream,
    ctx: &VideoContext,
    keys: Var,
    state: &StreamState,
    word: Var,
) -> Result<StepOutput> {
    let (att, va) = match (stream.track, state.va) {
        (Some(track), Some(va)) => {
            let att = visual_aware_attend(tape, &ctx.video, keys, state.h, &va, &stream.attention)?;
            let va = crate::attention::track_update(tape, &va, att.weights, &ctx.video, &track)?;
            (att, Some(va))
        }
        (None, None) => (stream.attention.attend_with_keys(tape, &ctx.video, keys, state.h)?, None),
        _ => return Err(Error::Config("stream state does not match the attention kind".into())),
    };
    let x = tape.concat(&[word, att.context])?;
    let (h, c) = stream.lstm.step(tape, x, state.h, state.c)?;
    let p = tape.softmax(model.output.apply(tape, h)?);
    Ok(StepOutput {
        state: StreamState { h, c, va, last_p: None },
        p,
        alpha: att.weights,
        context: att.context,
    })
}

/// TF step: the word input is row `prev_token` of `W_e`.
pub fn tf_step<T: Scalar>(
    tape: &Tape<T>,
    model: &BoundModel,
    ctx: &VideoContext,
    state: &StreamState,
    prev_token: usize,
) -> Result<StepOutput> {
    let word = tape.embed_lookup(model.embed, prev_token)?;
    stream_step(tape, model, &model.tf, ctx, ctx.tf_keys, state, word)
}

/// SF step: the word input is `prev_pᵀ W_e`. The returned state remembers
/// the new distribution as `last_p`.
pub fn sf_step<T: Scalar>(
    tape: &Tape<T>,
    model: &BoundModel,
    ctx: &VideoContext,
    state: &StreamState,
    prev_p: Var,
) -> Result<StepOutput> {
    let sf = model.sf()?;
    let keys = ctx.sf_keys.ok_or(Error::Config("video context lacks self-forcing keys".into()))?;
    let word = embed_soft(tape, prev_p, model.embed)?;
    let mut out = stream_step(tape, model, sf, ctx, keys, state, word)?;
    out.state.last_p = Some(out.p);
    Ok(out)
}

/// `onehot(<start>)`, the SF stream's first input.
pub fn start_distribution<T: Scalar>(tape: &Tape<T>, vocab: usize) -> Result<Var> {
    let mut p = vec![T::zero(); vocab];
    p[START] = T::one();
    tape.vector(p)
}

/// Teacher-forced unroll over one caption.
#[derive(Debug, Clone)]
pub struct Unrolled {
    /// `[m × D]`, row `t` predicts target `t`.
    pub p_tf: Var,
    pub p_sf: Option<Var>,
    /// Every attention weight vector computed, both streams.
    pub alphas: Vec<Var>,
}

fn check_targets<T: Scalar>(tape: &Tape<T>, model: &BoundModel, targets: &[usize]) -> Result<usize> {
    if targets.is_empty() {
        return Err(Error::Empty("target sequence"));
    }
    let vocab = tape.shape(model.embed)[0];
    if let Some(&bad) = targets.iter().find(|&&y| y >= vocab) {
        return Err(Error::TokenOutOfRange { id: bad, size: vocab });
    }
    Ok(vocab)
}

/// The TF stream alone, reading `<start>, targets[..m-1]`. Returns the
/// stacked distributions and the attention weights.
pub fn unroll_tf<T: Scalar>(tape: &Tape<T>, model: &BoundModel, ctx: &VideoContext, targets: &[usize]) -> Result<(Var, Vec<Var>)> {
    check_targets(tape, model, targets)?;
    let mut state = StreamState::zeros(tape, &model.tf, ctx.video.frames)?;
    let mut rows = Vec::with_capacity(targets.len());
    let mut alphas = Vec::with_capacity(targets.len());
    for t in 0..targets.len() {
        let prev = if t == 0 { START } else { targets[t - 1] };
        let out = tf_step(tape, model, ctx, &state, prev)?;
        alphas.push(out.alpha);
        rows.push(out.p);
        state = out.state;
    }
    Ok((tape.stack(&rows)?, alphas))
}

/// The SF stream alone for `targets.len()` steps, reading its own previous
/// distribution starting from `onehot(<start>)`.
pub fn unroll_sf<T: Scalar>(tape: &Tape<T>, model: &BoundModel, ctx: &VideoContext, targets: &[usize]) -> Result<(Var, Vec<Var>)> {
    let vocab = check_targets(tape, model, targets)?;
    let sf = model.sf()?;
    let mut state = StreamState::zeros(tape, sf, ctx.video.frames)?;
    let mut prev = start_distribution(tape, vocab)?;
    let mut rows = Vec::with_capacity(targets.len());
    let mut alphas = Vec::with_capacity(targets.len());
    for _ in targets {
        let out = sf_step(tape, model, ctx, &state, prev)?;
        alphas.push(out.alpha);
        rows.push(out.p);
        prev = out.p;
        state = out.state;
    }
    Ok((tape.stack(&rows)?, alphas))
}

/// Runs both streams; see [`unroll_tf`] and [`unroll_sf`].
pub fn unroll_training<T: Scalar>(tape: &Tape<T>, model: &BoundModel, ctx: &VideoContext, targets: &[usize]) -> Result<Unrolled> {
    let (p_tf, mut alphas) = unroll_tf(tape, model, ctx, targets)?;
    let p_sf = match model.sf {
        Some(_) => {
            let (p, a) = unroll_sf(tape, model, ctx, targets)?;
            alphas.extend(a);
            Some(p)
        }
        None => None,
    };
    Ok(Unrolled { p_tf, p_sf, alphas })
}

/// Convenience check used by decoding: `p` must be a distribution.
pub fn ensure_distribution<T: Scalar>(p: &[T]) -> Result<()> {
    check_simplex(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_extended, LossFn, Tensor};
    use crate::textdata::END;
    use approx::assert_abs_diff_eq;

    fn features(n: usize, d: usize, seed: u64) -> FeatureSequence<f64> {
        let rows: Vec<f64> = (0..n * d).map(|i| ((i as u64 * 13 + seed * 7) as f64 * 0.61).sin()).collect();
        FeatureSequence::from_fused_rows(n, d, &rows, d / 2).unwrap()
    }

    fn model(variant: ModelVariant) -> Model {
        Model::new(ModelConfig::new(variant, 4, 3, 6)).unwrap()
    }

    fn run(m: &Model, store: &ParamStore<f64>, f: &FeatureSequence<f64>, targets: &[usize]) -> (Vec<f64>, Option<Vec<f64>>) {
        let t = Tape::new();
        let b = m.bind(&t, store).unwrap();
        let ctx = b.prepare(&t, f).unwrap();
        let u = unroll_training(&t, &b, &ctx, targets).unwrap();
        (t.value(u.p_tf).to_vec(), u.p_sf.map(|p| t.value(p).to_vec()))
    }

    #[test]
    fn variant_parsing_and_flags() {
        assert_eq!("vadd".parse::<ModelVariant>().unwrap(), ModelVariant::Vadd);
        assert!("lstm".parse::<ModelVariant>().is_err());
        assert!(!ModelVariant::Baseline.is_dual() && !ModelVariant::Baseline.uses_va());
        assert!(ModelVariant::Va.uses_va() && !ModelVariant::Va.is_dual());
        assert!(ModelVariant::Dd.is_dual() && !ModelVariant::Dd.uses_va());
    }

    #[test]
    fn shared_tables_appear_once() {
        let m = model(ModelVariant::Vadd);
        let names: Vec<String> = m.param_specs().into_iter().map(|s| s.name).collect();
        assert_eq!(names.iter().filter(|n| n.as_str() == "decoder.embed.w_e").count(), 1);
        assert_eq!(names.iter().filter(|n| n.as_str() == "decoder.out.w").count(), 1);
        let sf_only = m.sf_exclusive_params();
        assert!(sf_only.iter().all(|n| n.starts_with("decoder.sf.")));
        assert_eq!(sf_only.len(), 9);
        let mut shared_cfg = m.config.clone();
        shared_cfg.share_va = true;
        let shared = Model::new(shared_cfg).unwrap();
        assert_eq!(shared.sf_exclusive_params().len(), 3);
        assert!(model(ModelVariant::Va).sf_exclusive_params().is_empty());
    }

    #[test]
    fn zero_output_projection_gives_uniform() {
        let m = model(ModelVariant::Dd);
        let mut s: ParamStore<f64> = m.init_params(3).unwrap();
        s.get_mut("decoder.out.w").unwrap().data_mut().fill(0.0);
        let (p_tf, p_sf) = run(&m, &s, &features(3, 4, 1), &[4, 5, END]);
        assert!(p_tf.iter().chain(&p_sf.unwrap()).all(|p| (*p - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn output_bias_sets_logits() {
        let m = Model::new(ModelConfig::new(ModelVariant::Baseline, 4, 3, 4)).unwrap();
        let mut s: ParamStore<f64> = m.init_params(3).unwrap();
        s.get_mut("decoder.out.w").unwrap().data_mut().fill(0.0);
        s.get_mut("decoder.out.b").unwrap().data_mut().copy_from_slice(&[2f64.ln(), 0.0, 0.0, 0.0]);
        let (p, sf) = run(&m, &s, &features(2, 4, 1), &[2]);
        assert!(sf.is_none());
        for (a, b) in p.iter().zip([0.4, 0.2, 0.2, 0.2]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    fn tie_streams(m: &Model, s: &mut ParamStore<f64>) {
        let sf = m.sf.as_ref().unwrap();
        let pairs = m.tf.param_specs().into_iter().zip(sf.param_specs());
        for (tf, sf) in pairs {
            let v = s.get(&tf.name).unwrap().clone();
            *s.get_mut(&sf.name).unwrap() = v;
        }
    }

    #[test]
    fn one_step_rows_agree_when_streams_are_tied() {
        for variant in [ModelVariant::Dd, ModelVariant::Vadd] {
            let m = model(variant);
            let mut s = m.init_params(11).unwrap();
            tie_streams(&m, &mut s);
            let (p_tf, p_sf) = run(&m, &s, &features(3, 4, 2), &[4]);
            assert_eq!(p_tf, p_sf.unwrap());
        }
    }

    #[test]
    fn rows_are_distributions() {
        for variant in ModelVariant::ALL {
            let m = model(variant);
            let s = m.init_params(5).unwrap();
            let (p_tf, p_sf) = run(&m, &s, &features(4, 4, 3), &[4, 5, 3, END]);
            for row in p_tf.chunks(6).chain(p_sf.iter().flat_map(|p| p.chunks(6))) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            assert_eq!(p_sf.is_some(), variant.is_dual());
        }
    }

    #[test]
    fn teacher_forcing_is_causal_and_self_forcing_ignores_targets() {
        let m = model(ModelVariant::Vadd);
        let s = m.init_params(2).unwrap();
        let f = features(3, 4, 4);
        let (a_tf, a_sf) = run(&m, &s, &f, &[4, 5, 3, END]);
        let (b_tf, b_sf) = run(&m, &s, &f, &[4, 3, 3, END]);
        assert_eq!(a_sf, b_sf);
        // changing target 1 only affects rows 2 and 3
        assert_eq!(&a_tf[..12], &b_tf[..12]);
        assert_ne!(&a_tf[12..18], &b_tf[12..18]);
        assert_ne!(&a_tf[18..], &b_tf[18..]);
    }

    #[test]
    fn soft_step_with_one_hot_matches_hard_step() {
        let m = model(ModelVariant::Vadd);
        let mut s = m.init_params(9).unwrap();
        tie_streams(&m, &mut s);
        let t = Tape::new();
        let b = m.bind(&t, &s).unwrap();
        let ctx = b.prepare(&t, &features(3, 4, 5)).unwrap();
        let state = StreamState::zeros(&t, &b.tf, 3).unwrap();
        let hard = tf_step(&t, &b, &ctx, &state, 4).unwrap();
        let mut onehot = vec![0.0; 6];
        onehot[4] = 1.0;
        let soft = sf_step(&t, &b, &ctx, &state, t.vector(onehot).unwrap()).unwrap();
        assert_eq!(t.value(hard.p), t.value(soft.p));
        assert_eq!(t.value(hard.state.h), t.value(soft.state.h));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let m = model(ModelVariant::Dd);
        let s = m.init_params(1).unwrap();
        let t = Tape::new();
        let b = m.bind(&t, &s).unwrap();
        let ctx = b.prepare(&t, &features(2, 4, 1)).unwrap();
        let state = StreamState::zeros(&t, &b.tf, 2).unwrap();
        assert!(matches!(tf_step(&t, &b, &ctx, &state, 6), Err(Error::TokenOutOfRange { id: 6, size: 6 })));
        let p = t.vector(vec![0.5; 6]).unwrap();
        assert!(matches!(sf_step(&t, &b, &ctx, &state, p), Err(Error::NotNormalized { .. })));
        assert!(matches!(unroll_training(&t, &b, &ctx, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn check_params_detects_mismatch() {
        let m = model(ModelVariant::Dd);
        let s: ParamStore<f64> = m.init_params(1).unwrap();
        m.check_params(&s).unwrap();
        assert!(model(ModelVariant::Vadd).check_params(&s).is_err());
        let mut extra = s.clone();
        extra.insert("stray", Tensor::zeros(vec![1])).unwrap();
        assert!(m.check_params(&extra).is_err());
    }

    struct UnrollLoss(Model, FeatureSequence<f64>);

    impl LossFn for UnrollLoss {
        fn loss<S: Scalar>(&self, t: &Tape<S>, s: &ParamStore<S>) -> Result<Var> {
            let rows: Vec<S> = self.1.fused_rows().into_iter().map(S::lit).collect();
            let f = FeatureSequence::from_fused_rows(self.1.frames(), self.1.input_dim(), &rows, self.1.motion_dim())?;
            let b = self.0.bind(t, s)?;
            let ctx = b.prepare(t, &f)?;
            let u = unroll_training(t, &b, &ctx, &[4, 5, END])?;
            let lt = t.sum(t.log(t.gather(u.p_tf, &[4, 11, 14])?));
            match u.p_sf {
                Some(p) => t.add(lt, t.sum(t.log(t.gather(p, &[4, 11, 14])?))),
                None => Ok(lt),
            }
        }
    }

    #[test]
    fn unroll_gradients_match_finite_differences() {
        for variant in ModelVariant::ALL {
            let m = model(variant);
            let s = m.init_params(21).unwrap();
            let report = grad_check_extended(&s, &UnrollLoss(m, features(3, 4, 6)), 1e-4, 1e-5).unwrap();
            assert!(report.passed(), "{variant}: {:?}", report.failures().collect::<Vec<_>>());
        }
    }
}

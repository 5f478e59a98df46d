//! Bidirectional LSTM over fused per-frame features.

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BoundLstm, LstmCell, ParamSpec};
use crate::Scalar;

/// Per-video frame features: appearance `[n × d_a]` and motion `[n × d_m]`,
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<T> {
    appearance: Vec<T>,
    motion: Vec<T>,
    frames: usize,
    appearance_dim: usize,
    motion_dim: usize,
}

impl<T: Scalar> FeatureSequence<T> {
    pub fn new(frames: usize, appearance: Vec<T>, appearance_dim: usize, motion: Vec<T>, motion_dim: usize) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Empty("feature sequence"));
        }
        if appearance.len() != frames * appearance_dim || motion.len() != frames * motion_dim {
            return Err(Error::Shape {
                op: "feature sequence",
                lhs: vec![appearance.len(), motion.len()],
                rhs: vec![frames * appearance_dim, frames * motion_dim],
            });
        }
        if appearance.iter().chain(&motion).any(|x| !x.is_finite()) {
            return Err(Error::Config("feature sequence contains non-finite values".into()));
        }
        Ok(Self {
            appearance,
            motion,
            frames,
            appearance_dim,
            motion_dim,
        })
    }

    /// Splits rows laid out as `motion ∘ appearance` (the on-disk order).
    pub fn from_fused_rows(frames: usize, dim: usize, rows: &[T], motion_dim: usize) -> Result<Self> {
        if motion_dim > dim || rows.len() != frames * dim {
            return Err(Error::Shape {
                op: "fused rows",
                lhs: vec![frames, dim, motion_dim],
                rhs: vec![rows.len()],
            });
        }
        let mut motion = Vec::with_capacity(frames * motion_dim);
        let mut appearance = Vec::with_capacity(frames * (dim - motion_dim));
        for row in rows.chunks_exact(dim) {
            motion.extend_from_slice(&row[..motion_dim]);
            appearance.extend_from_slice(&row[motion_dim..]);
        }
        Self::new(frames, appearance, dim - motion_dim, motion, motion_dim)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn input_dim(&self) -> usize {
        self.appearance_dim + self.motion_dim
    }

    pub fn motion_dim(&self) -> usize {
        self.motion_dim
    }

    pub fn appearance(&self) -> &[T] {
        &self.appearance
    }

    pub fn motion(&self) -> &[T] {
        &self.motion
    }

    /// Frame rows as `v_m ∘ v_a`.
    pub fn fused_rows(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.frames * self.input_dim());
        for i in 0..self.frames {
            out.extend_from_slice(&self.motion[i * self.motion_dim..(i + 1) * self.motion_dim]);
            out.extend_from_slice(&self.appearance[i * self.appearance_dim..(i + 1) * self.appearance_dim]);
        }
        out
    }

    /// Resamples to exactly `count` frames: uniform stride when longer,
    /// last frame repeated when shorter.
    pub fn sample_frames(&self, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Empty("frame sample count"));
        }
        let idx: Vec<usize> = if self.frames >= count {
            (0..count).map(|i| i * self.frames / count).collect()
        } else {
            (0..count).map(|i| i.min(self.frames - 1)).collect()
        };
        let pick = |data: &[T], d: usize| -> Vec<T> { idx.iter().flat_map(|&i| data[i * d..(i + 1) * d].iter().copied()).collect() };
        Self::new(
            count,
            pick(&self.appearance, self.appearance_dim),
            self.appearance_dim,
            pick(&self.motion, self.motion_dim),
            self.motion_dim,
        )
    }

    /// Same features with the frame order reversed.
    pub fn reversed(&self) -> Self {
        let idx: Vec<usize> = (0..self.frames).rev().collect();
        let pick = |data: &[T], d: usize| -> Vec<T> { idx.iter().flat_map(|&i| data[i * d..(i + 1) * d].iter().copied()).collect() };
        Self {
            appearance: pick(&self.appearance, self.appearance_dim),
            motion: pick(&self.motion, self.motion_dim),
            ..self.clone()
        }
    }
}

/// Encoder output `V`: `[n × 2H]`, row `i` is `forward_h_i ∘ backward_h_i`.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVideo {
    pub states: Var,
    pub frames: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoder {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundEncoder {
    pub forward: BoundLstm,
    pub backward: BoundLstm,
}

impl Encoder {
    pub fn new(prefix: &str, input: usize, hidden: usize) -> Self {
        Self {
            forward: LstmCell::new(format!("{prefix}.fwd"), input, hidden),
            backward: LstmCell::new(format!("{prefix}.bwd"), input, hidden),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.forward.input
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = self.forward.param_specs();
        v.extend(self.backward.param_specs());
        v
    }

    pub fn bind<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>) -> Result<BoundEncoder> {
        Ok(BoundEncoder {
            forward: self.forward.bind(tape, store)?,
            backward: self.backward.bind(tape, store)?,
        })
    }
}

fn run_direction<T: Scalar>(tape: &Tape<T>, cell: &BoundLstm, x: Var, order: impl Iterator<Item = usize>, n: usize) -> Result<Vec<Var>> {
    let proj = cell.project_input(tape, x)?;
    let mut h = tape.vector(vec![T::zero(); cell.hidden])?;
    let mut c = tape.vector(vec![T::zero(); cell.hidden])?;
    let mut out = vec![h; n];
    for i in order {
        let row = tape.row(proj, i)?;
        (h, c) = cell.step_projected(tape, row, h, c)?;
        out[i] = h;
    }
    Ok(out)
}

/// Runs both directions from zero states and concatenates per frame.
pub fn encode<T: Scalar>(tape: &Tape<T>, features: &FeatureSequence<T>, p: &BoundEncoder) -> Result<EncodedVideo> {
    let n = features.frames();
    let input = features.input_dim();
    let x = tape.constant(vec![n, input], features.fused_rows())?;
    let w_shape = tape.shape(p.forward.w_ih);
    if w_shape[1] != input {
        return Err(Error::Shape {
            op: "encode",
            lhs: vec![n, input],
            rhs: w_shape,
        });
    }
    let fwd = run_direction(tape, &p.forward, x, 0..n, n)?;
    let bwd = run_direction(tape, &p.backward, x, (0..n).rev(), n)?;
    let rows = fwd
        .iter()
        .zip(&bwd)
        .map(|(f, b)| tape.concat(&[*f, *b]))
        .collect::<Result<Vec<_>>>()?;
    let states = tape.stack(&rows)?;
    Ok(EncodedVideo {
        states,
        frames: n,
        width: 2 * p.forward.hidden,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tensor};
    use crate::nn::init_params;

    fn features(n: usize, seed: u64) -> FeatureSequence<f64> {
        let a: Vec<f64> = (0..n * 2).map(|i| ((i as u64 * 7 + seed) as f64 * 0.37).sin()).collect();
        let m: Vec<f64> = (0..n * 3).map(|i| ((i as u64 * 5 + seed) as f64 * 0.91).cos()).collect();
        FeatureSequence::new(n, a, 2, m, 3).unwrap()
    }

    fn setup(seed: u64) -> (Encoder, ParamStore<f64>) {
        let enc = Encoder::new("enc", 5, 3);
        let mut store = ParamStore::new();
        init_params(&mut store, &enc.param_specs(), seed).unwrap();
        (enc, store)
    }

    fn run(enc: &Encoder, store: &ParamStore<f64>, f: &FeatureSequence<f64>) -> Vec<f64> {
        let t = Tape::new();
        let p = enc.bind(&t, store).unwrap();
        let v = encode(&t, f, &p).unwrap();
        t.value(v.states).to_vec()
    }

    #[test]
    fn zero_params_give_zero_states() {
        let enc = Encoder::new("enc", 5, 3);
        let mut store = ParamStore::new();
        for s in enc.param_specs() {
            store.insert(&s.name, Tensor::zeros(s.shape)).unwrap();
        }
        assert!(run(&enc, &store, &features(4, 1)).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn single_frame_concatenates_both_directions() {
        let (enc, store) = setup(3);
        let f = features(1, 2);
        let v = run(&enc, &store, &f);
        assert_eq!(v.len(), 6);
        let t = Tape::new();
        let p = enc.bind(&t, &store).unwrap();
        let x = t.vector(f.fused_rows()).unwrap();
        let z = t.vector(vec![0.0; 3]).unwrap();
        let (hf, _) = p.forward.step(&t, x, z, z).unwrap();
        let (hb, _) = p.backward.step(&t, x, z, z).unwrap();
        assert_eq!(&v[..3], t.value(hf).as_slice());
        assert_eq!(&v[3..], t.value(hb).as_slice());
    }

    #[test]
    fn last_frame_reaches_first_row() {
        let (enc, store) = setup(4);
        let f = features(5, 9);
        let base = run(&enc, &store, &f);
        let mut a = f.appearance().to_vec();
        let last = a.len() - 1;
        a[last] += 0.5;
        let g = FeatureSequence::new(5, a, 2, f.motion().to_vec(), 3).unwrap();
        let moved = run(&enc, &store, &g);
        // forward half of row 0 cannot see frame 5, backward half must
        assert_eq!(&base[..3], &moved[..3]);
        assert_ne!(&base[3..6], &moved[3..6]);
    }

    #[test]
    fn reversal_with_swapped_directions_mirrors_rows() {
        let (enc, store) = setup(8);
        let f = features(4, 3);
        let base = run(&enc, &store, &f);
        let swapped = Encoder {
            forward: enc.backward.clone(),
            backward: enc.forward.clone(),
        };
        let rev = run(&swapped, &store, &f.reversed());
        for i in 0..4 {
            let r = &rev[i * 6..(i + 1) * 6];
            let b = &base[(3 - i) * 6..(4 - i) * 6];
            assert_eq!(&r[..3], &b[3..]);
            assert_eq!(&r[3..], &b[..3]);
        }
    }

    #[test]
    fn frame_sampling_policy() {
        let f = features(3, 1);
        let up = f.sample_frames(5).unwrap();
        assert_eq!(up.frames(), 5);
        assert_eq!(&up.motion()[9..12], &f.motion()[6..9]);
        assert_eq!(&up.motion()[12..15], &f.motion()[6..9]);
        let long = features(100, 1);
        let down = long.sample_frames(50).unwrap();
        assert_eq!(&down.motion()[3..6], &long.motion()[6..9]);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (enc, store) = setup(7);
        let f = features(3, 5);
        let report = grad_check(
            &store,
            |t, s| {
                let p = enc.bind(t, s)?;
                let v = encode(t, &f, &p)?;
                let w = t.constant(vec![3, 6], (0..18).map(|i| (i as f64 * 0.3).sin()).collect())?;
                Ok(t.sum(t.tanh(t.mul(v.states, w)?)))
            },
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
    }
}

//! Embedding, linear and LSTM layers bound through a [`ParamStore`].
//!
//! Layers are plain descriptions (parameter names and sizes). `bind` pulls
//! their tensors onto a tape once per forward pass; the bound form is what
//! the step functions take.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::Scalar;

/// How a parameter is initialized by [`init_params`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`, `fan_in` being the last extent.
    FanIn,
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn weight(name: String, shape: Vec<usize>) -> Self {
        Self {
            name,
            shape,
            init: Init::FanIn,
        }
    }

    fn bias(name: String, len: usize) -> Self {
        Self {
            name,
            shape: vec![len],
            init: Init::Zeros,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for the random stream of parameter `name` under run seed `seed`.
pub fn param_seed(seed: u64, name: &str) -> u64 {
    fnv1a(name.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Creates every parameter in `specs`. Each name draws from its own
/// stream, so adding a layer never changes the values of the others.
pub fn init_params<T: Scalar>(store: &mut ParamStore<T>, specs: &[ParamSpec], seed: u64) -> Result<()> {
    for spec in specs {
        if store.contains(&spec.name) {
            return Err(Error::DuplicateParam(spec.name.clone()));
        }
    }
    for spec in specs {
        let len = spec.shape.iter().product();
        let data = match spec.init {
            Init::Zeros => vec![T::zero(); len],
            Init::FanIn => {
                let fan_in = *spec.shape.last().expect("nonempty shape");
                let s = 1.0 / (fan_in as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, &spec.name));
                (0..len).map(|_| T::lit(rng.random_range(-s..=s))).collect()
            }
        };
        store.insert(&spec.name, Tensor::new(spec.shape.clone(), data)?)?;
    }
    Ok(())
}

/// LSTM cell with gate order (input, forget, candidate, output).
///
/// `w_ih` is `[4H × I]`, `w_hh` is `[4H × H]`, `b` is `[4H]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LstmCell {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLstm {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b: Var,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            prefix: prefix.into(),
            input,
            hidden,
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let g = 4 * self.hidden;
        vec![
            ParamSpec::weight(format!("{}.w_ih", self.prefix), vec![g, self.input]),
            ParamSpec::weight(format!("{}.w_hh", self.prefix), vec![g, self.hidden]),
            ParamSpec::bias(format!("{}.b", self.prefix), g),
        ]
    }

    pub fn bind<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>) -> Result<BoundLstm> {
        let w_ih = tape.param(store, &format!("{}.w_ih", self.prefix))?;
        let w_hh = tape.param(store, &format!("{}.w_hh", self.prefix))?;
        let b = tape.param(store, &format!("{}.b", self.prefix))?;
        let g = 4 * self.hidden;
        for (v, want) in [(w_ih, vec![g, self.input]), (w_hh, vec![g, self.hidden]), (b, vec![g])] {
            let got = tape.shape(v);
            if got != want {
                return Err(Error::Shape {
                    op: "lstm bind",
                    lhs: got,
                    rhs: want,
                });
            }
        }
        Ok(BoundLstm {
            w_ih,
            w_hh,
            b,
            hidden: self.hidden,
        })
    }
}

impl BoundLstm {
    /// Input projection `x · w_ihᵀ`, usable ahead of time for a whole
    /// sequence.
    pub fn project_input<T: Scalar>(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        tape.matmul_t(x, self.w_ih)
    }

    /// One step from a precomputed input projection.
    pub fn step_projected<T: Scalar>(&self, tape: &Tape<T>, x_proj: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hh = tape.matmul_t(h, self.w_hh)?;
        let z = tape.add(tape.add(x_proj, hh)?, self.b)?;
        let n = self.hidden;
        let i = tape.sigmoid(tape.slice(z, 0, n)?);
        let f = tape.sigmoid(tape.slice(z, n, n)?);
        let g = tape.tanh(tape.slice(z, 2 * n, n)?);
        let o = tape.sigmoid(tape.slice(z, 3 * n, n)?);
        let c_new = tape.add(tape.mul(f, c)?, tape.mul(i, g)?)?;
        let h_new = tape.mul(o, tape.tanh(c_new))?;
        Ok((h_new, c_new))
    }

    /// One step. `x`, `h`, `c` are vectors, or matrices whose rows are
    /// independent cells sharing these parameters.
    pub fn step<T: Scalar>(&self, tape: &Tape<T>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let x_proj = self.project_input(tape, x)?;
        self.step_projected(tape, x_proj, h, c)
    }
}

/// `(h, c) = LSTM(x, h_prev, c_prev)`.
pub fn lstm_cell<T: Scalar>(tape: &Tape<T>, x: Var, h_prev: Var, c_prev: Var, p: &BoundLstm) -> Result<(Var, Var)> {
    p.step(tape, x, h_prev, c_prev)
}

/// `y = x · wᵀ (+ b)` with `w` `[O × I]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linear {
    pub prefix: String,
    pub input: usize,
    pub output: usize,
    pub bias: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Option<Var>,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, input: usize, output: usize, bias: bool) -> Self {
        Self {
            prefix: prefix.into(),
            input,
            output,
            bias,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = vec![ParamSpec::weight(self.weight_name(), vec![self.output, self.input])];
        if self.bias {
            v.push(ParamSpec::bias(format!("{}.b", self.prefix), self.output));
        }
        v
    }

    pub fn bind<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>) -> Result<BoundLinear> {
        let w = tape.param(store, &self.weight_name())?;
        let b = if self.bias {
            Some(tape.param(store, &format!("{}.b", self.prefix))?)
        } else {
            None
        };
        Ok(BoundLinear { w, b })
    }
}

impl BoundLinear {
    pub fn apply<T: Scalar>(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let y = tape.matmul_t(x, self.w)?;
        match self.b {
            Some(b) => tape.add(y, b),
            None => Ok(y),
        }
    }
}

/// Word embedding table `[D × E]`; row `k` embeds token `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Embedding {
    pub name: String,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(name: impl Into<String>, vocab: usize, dim: usize) -> Self {
        Self {
            name: name.into(),
            vocab,
            dim,
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        vec![ParamSpec::weight(self.name.clone(), vec![self.vocab, self.dim])]
    }

    pub fn bind<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>) -> Result<Var> {
        tape.param(store, &self.name)
    }
}

/// Checks that `p` is a probability vector (nonnegative, sums to 1 ± 1e-6).
pub fn check_simplex<T: Scalar>(p: &[T]) -> Result<()> {
    let sum: f64 = p.iter().map(|x| x.as_f64()).sum();
    if (sum - 1.0).abs() > 1e-6 || p.iter().any(|x| *x < T::zero() || !x.is_finite()) {
        return Err(Error::NotNormalized { sum });
    }
    Ok(())
}

/// Probability-weighted mixture of embedding rows, `pᵀ · W_e`.
pub fn embed_soft<T: Scalar>(tape: &Tape<T>, p_dist: Var, table: Var) -> Result<Var> {
    check_simplex(&tape.value(p_dist))?;
    tape.matmul(p_dist, table)
}

//! Central finite-difference verification of tape gradients.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;
use crate::Scalar;
use f128::f128;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub fd_step: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// A scalar loss that can be built at any precision.
///
/// [`grad_check_extended`] uses this to evaluate finite differences in
/// quadruple precision, which keeps the cancellation error of
/// `f(x+h) − f(x−h)` far below the size of small gradient entries.
pub trait LossFn {
    fn loss<S: Scalar>(&self, tape: &Tape<S>, store: &ParamStore<S>) -> Result<Var>;

    /// A loss whose difference from [`LossFn::loss`] does not depend on
    /// parameter `param`, so both have the same central difference in it.
    /// Dropping unrelated terms makes finite differences cheaper and less
    /// noisy. Defaults to the full loss.
    fn loss_for<S: Scalar>(&self, tape: &Tape<S>, store: &ParamStore<S>, param: &str) -> Result<Var> {
        let _ = param;
        self.loss(tape, store)
    }
}

fn analytic_grads<T: Scalar>(store: &ParamStore<T>, loss: impl Fn(&Tape<T>, &ParamStore<T>) -> Result<Var>) -> Result<ParamStore<T>> {
    let mut out = store.clone();
    out.zero_grads();
    let tape = Tape::new();
    let l = loss(&tape, &out)?;
    let grads = tape.backward(l)?;
    out.accumulate(&grads)?;
    Ok(out)
}

/// Walks every scalar of `analytic`, asking `numeric(name, i)` for the
/// central difference.
fn compare<T: Scalar>(
    analytic: &ParamStore<T>,
    tolerance: f64,
    fd_step: f64,
    mut numeric: impl FnMut(&str, usize) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut params = Vec::with_capacity(analytic.len());
    for (name, tensor) in analytic.iter() {
        let mut check = ParamCheck {
            name: name.to_owned(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for (i, a) in tensor.grad().unwrap_or_default().iter().enumerate() {
            let a = a.as_f64();
            let n = numeric(name, i)?;
            let err = relative_error(a, n);
            if err > check.max_rel_err || i == 0 {
                check.max_rel_err = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = n;
            }
        }
        check.passed = check.max_rel_err < tolerance;
        params.push(check);
    }
    Ok(GradCheckReport {
        tolerance,
        fd_step,
        params,
    })
}

/// `(f(x+h) − f(x−h)) / 2h` for one scalar of `store`, evaluated in `S`.
fn central_difference<S: Scalar>(
    probe: &mut ParamStore<S>,
    name: &str,
    i: usize,
    h: S,
    loss: &impl Fn(&Tape<S>, &ParamStore<S>) -> Result<Var>,
) -> Result<S> {
    let eval = |s: &ParamStore<S>| -> Result<S> {
        let tape = Tape::no_grad();
        let l = loss(&tape, s)?;
        Ok(tape.item(l))
    };
    let x0 = probe.get(name)?.data()[i];
    probe.get_mut(name)?.data_mut()[i] = x0 + h;
    let plus = eval(probe)?;
    probe.get_mut(name)?.data_mut()[i] = x0 - h;
    let minus = eval(probe)?;
    probe.get_mut(name)?.data_mut()[i] = x0;
    Ok((plus - minus) / (h + h))
}

/// Compares the tape gradient of `loss_fn` with `(f(x+h) − f(x−h)) / 2h`
/// for every scalar of every parameter in `store`, all in `T`.
///
/// `loss_fn` must be deterministic and return a scalar node.
pub fn grad_check<T, F>(store: &ParamStore<T>, loss_fn: F, tolerance: f64, fd_step: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let analytic = analytic_grads(store, &loss_fn)?;
    let mut probe = store.clone();
    let h = T::lit(fd_step);
    compare(&analytic, tolerance, fd_step, |name, i| {
        Ok(central_difference(&mut probe, name, i, h, &loss_fn)?.as_f64())
    })
}

/// Like [`grad_check`] with `f64` analytic gradients of [`LossFn::loss`].
/// Central differences use [`LossFn::loss_for`] of the perturbed parameter.
/// Each is first taken in `f64`; entries that miss the tolerance are
/// recomputed in quadruple precision, so a mismatch is only reported when it
/// survives the more accurate difference.
pub fn grad_check_extended<F: LossFn>(store: &ParamStore<f64>, loss: &F, tolerance: f64, fd_step: f64) -> Result<GradCheckReport> {
    let analytic = analytic_grads(store, |t: &Tape<f64>, s: &ParamStore<f64>| loss.loss(t, s))?;
    let mut probe64 = store.clone();
    let mut probe128: ParamStore<f128> = store.cast();
    let (h64, h128) = (fd_step, f128::lit(fd_step));
    compare(&analytic, tolerance, fd_step, |name, i| {
        let a = analytic.get(name)?.grad().map_or(0.0, |g| g[i]);
        let eval64 = |t: &Tape<f64>, s: &ParamStore<f64>| loss.loss_for(t, s, name);
        let n = central_difference(&mut probe64, name, i, h64, &eval64)?;
        if relative_error(a, n) < tolerance {
            return Ok(n);
        }
        let eval128 = |t: &Tape<f128>, s: &ParamStore<f128>| loss.loss_for(t, s, name);
        Ok(central_difference(&mut probe128, name, i, h128, &eval128)?.as_f64())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn linear_regression_toy() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::vector(vec![0.7])).unwrap();
        let report = grad_check(
            &s,
            |t, s| {
                let w = t.param(s, "w")?;
                let x = t.vector(vec![2.0])?;
                let y = t.vector(vec![-1.0])?;
                let pred = t.mul(w, x)?;
                let r = t.add(pred, y)?;
                Ok(t.sum(t.mul(r, r)?))
            },
            1e-8,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_err() < 1e-8);
    }

    #[test]
    fn impossible_tolerance_reports_without_panicking() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::vector(vec![0.3, -0.2])).unwrap();
        let report = grad_check(
            &s,
            |t, s| {
                let w = t.param(s, "w")?;
                Ok(t.sum(t.tanh(t.mul(w, w)?)))
            },
            1e-30,
            1e-5,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures().count(), 1);
    }

    struct SmallSlope;

    impl LossFn for SmallSlope {
        fn loss<S: Scalar>(&self, t: &Tape<S>, s: &ParamStore<S>) -> Result<Var> {
            let w = t.param(s, "w")?;
            let c = t.vector(vec![S::lit(1000.0), S::lit(3e-8)])?;
            let q = t.mul(w, w)?;
            let lin = t.mul(w, c)?;
            t.add(t.sum(q), t.sum(lin))
        }
    }

    #[test]
    fn extended_precision_resolves_tiny_gradients() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::vector(vec![0.25, 0.0])).unwrap();
        let plain = grad_check(&s, |t, s| SmallSlope.loss(t, s), 1e-6, 1e-5).unwrap();
        assert!(!plain.passed());
        let ext = grad_check_extended(&s, &SmallSlope, 1e-6, 1e-5).unwrap();
        assert!(ext.passed(), "{ext:?}");
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}

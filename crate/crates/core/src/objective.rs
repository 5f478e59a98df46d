//! Mixed TF/SF likelihood loss and the training loop.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::{load_adam, load_params, save_adam, save_params};
use crate::autodiff::{AdamState, ParamStore, Tape, Var};
use crate::decoder::{unroll_training, Model};
use crate::encoder::FeatureSequence;
use crate::error::{Error, Result};
use crate::Scalar;

/// Per-sample (or averaged) loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossRecord {
    pub l_tf: f64,
    pub l_sf: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Loss node plus its recorded terms.
#[derive(Debug, Clone, Copy)]
pub struct MixedLoss {
    pub total: Var,
    pub record: LossRecord,
    /// Target probabilities that hit the log floor.
    pub clamped: usize,
}

fn nll<T: Scalar>(tape: &Tape<T>, p: Var, targets: &[usize], mask: Option<&[bool]>) -> Result<Var> {
    let shape = tape.shape(p);
    let (m, d) = match shape.as_slice() {
        [m, d] => (*m, *d),
        _ => return Err(Error::BadShape { op: "mixed_loss", shape }),
    };
    if m != targets.len() || mask.is_some_and(|k| k.len() != m) {
        return Err(Error::Shape {
            op: "mixed_loss",
            lhs: vec![m, d],
            rhs: vec![targets.len()],
        });
    }
    let mut idx = Vec::with_capacity(m);
    for (t, &y) in targets.iter().enumerate() {
        if mask.is_some_and(|k| !k[t]) {
            continue;
        }
        if y >= d {
            return Err(Error::TokenOutOfRange { id: y, size: d });
        }
        idx.push(t * d + y);
    }
    if idx.is_empty() {
        return Err(Error::Empty("unmasked target positions"));
    }
    let picked = tape.gather(p, &idx)?;
    Ok(tape.scale(tape.mean(tape.log(picked)), -T::one()))
}

/// `L = L_t + λ L_s` with `L_x = −(1/m) Σ_t log P_x[t, y_t]` over unmasked
/// positions. Without an SF distribution `L = L_t`.
pub fn mixed_loss<T: Scalar>(
    tape: &Tape<T>,
    p_tf: Var,
    p_sf: Option<Var>,
    targets: &[usize],
    mask: Option<&[bool]>,
    lambda: f64,
) -> Result<MixedLoss> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    let before = tape.clamped_logs();
    let l_tf = nll(tape, p_tf, targets, mask)?;
    let (total, l_sf) = match p_sf {
        Some(p) => {
            let l_sf = nll(tape, p, targets, mask)?;
            (tape.add(l_tf, tape.scale(l_sf, T::lit(lambda)))?, Some(l_sf))
        }
        None => (l_tf, None),
    };
    let record = LossRecord {
        l_tf: tape.item(l_tf).as_f64(),
        l_sf: l_sf.map_or(0.0, |v| tape.item(v).as_f64()),
        total: tape.item(total).as_f64(),
        lambda,
    };
    Ok(MixedLoss {
        total,
        record,
        clamped: tape.clamped_logs() - before,
    })
}

/// One (video, caption) training pair. `targets` is `w_1..w_k, <end>`.
#[derive(Debug, Clone)]
pub struct TrainSample<T> {
    pub video_id: String,
    pub features: Arc<FeatureSequence<T>>,
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub epochs_per_decay: usize,
    pub decay_factor: f64,
    /// Global gradient-norm clip; off when `None`.
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.8,
            lr0: 1e-4,
            epochs: 20,
            batch_size: 16,
            seed: 1,
            epochs_per_decay: 5,
            decay_factor: 3.0,
            clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda >= 0.0
            && self.lambda.is_finite()
            && self.lr0 > 0.0
            && self.lr0.is_finite()
            && self.batch_size > 0
            && self.epochs_per_decay > 0
            && self.decay_factor > 0.0
            && self.clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration: {self:?}")))
        }
    }

    pub fn adam<T: Scalar>(&self) -> AdamState<T> {
        AdamState::new(T::lit(self.lr0)).with_schedule(self.epochs_per_decay, T::lit(self.decay_factor))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub l_tf: f64,
    pub l_sf: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-mean loss over the epoch.
    pub loss: LossRecord,
    pub samples: usize,
    /// Attention weight vectors inspected.
    pub alpha_checked: usize,
    /// Vectors with a negative entry or a sum off 1 by more than 1e-9.
    pub alpha_violations: usize,
    pub max_alpha_sum_error: f64,
    pub clamped_logs: usize,
}

/// Epoch-specific permutation of `0..n`, a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn clip_grads<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) {
    let norm = store
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flatten()
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = T::lit(max_norm / norm);
        for (_, t) in store.iter_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|x| *x *= k);
            }
        }
    }
}

/// Loss and gradients of one sample, accumulated into `store` with weight
/// `scale`.
fn sample_step<T: Scalar>(
    model: &Model,
    store: &mut ParamStore<T>,
    sample: &TrainSample<T>,
    lambda: f64,
    scale: f64,
    alphas: &mut AlphaTally,
) -> Result<(LossRecord, usize)> {
    let tape = Tape::new();
    let bound = model.bind(&tape, store)?;
    let ctx = bound.prepare(&tape, &sample.features)?;
    let unrolled = match unroll_training(&tape, &bound, &ctx, &sample.targets) {
        Err(Error::NotNormalized { sum }) if !sum.is_finite() => {
            return Err(Error::NonFiniteLoss {
                sample: sample.video_id.clone(),
                value: sum,
            })
        }
        other => other?,
    };
    for &a in &unrolled.alphas {
        alphas.record(&tape.value(a));
    }
    let loss = mixed_loss(&tape, unrolled.p_tf, unrolled.p_sf, &sample.targets, None, lambda)?;
    if !loss.record.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            sample: sample.video_id.clone(),
            value: loss.record.total,
        });
    }
    let scaled = tape.scale(loss.total, T::lit(scale));
    let grads = tape.backward(scaled)?;
    store.accumulate(&grads)?;
    Ok((loss.record, loss.clamped))
}

#[derive(Debug, Default)]
struct AlphaTally {
    checked: usize,
    violations: usize,
    max_err: f64,
}

impl AlphaTally {
    fn record<T: Scalar>(&mut self, alpha: &[T]) {
        let sum: f64 = alpha.iter().map(|a| a.as_f64()).sum();
        let err = (sum - 1.0).abs();
        self.checked += 1;
        self.max_err = self.max_err.max(err);
        if err > 1e-9 || alpha.iter().any(|a| *a < T::zero() || !a.is_finite()) {
            self.violations += 1;
        }
    }
}

/// One pass over `samples` in the epoch's shuffled order; Adam steps once
/// per batch on the batch-mean loss.
pub fn train_epoch<T: Scalar>(
    model: &Model,
    store: &mut ParamStore<T>,
    adam: &mut AdamState<T>,
    samples: &[TrainSample<T>],
    cfg: &TrainConfig,
    epoch: usize,
    on_batch: &mut dyn FnMut(&BatchRecord) -> Result<()>,
) -> Result<EpochReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("training samples"));
    }
    store.zero_grads();
    let lr = adam.lr_at(epoch).as_f64();
    let order = epoch_order(samples.len(), cfg.seed, epoch);
    let mut alphas = AlphaTally::default();
    let mut sum = LossRecord {
        lambda: cfg.lambda,
        ..LossRecord::default()
    };
    let mut clamped = 0;
    for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
        let mut acc = LossRecord {
            lambda: cfg.lambda,
            ..LossRecord::default()
        };
        let scale = 1.0 / batch.len() as f64;
        for &i in batch {
            let (rec, c) = sample_step(model, store, &samples[i], cfg.lambda, scale, &mut alphas)?;
            clamped += c;
            for (a, s, r) in [
                (&mut acc.l_tf, &mut sum.l_tf, rec.l_tf),
                (&mut acc.l_sf, &mut sum.l_sf, rec.l_sf),
                (&mut acc.total, &mut sum.total, rec.total),
            ] {
                *a += r * scale;
                *s += r;
            }
        }
        if let Some(c) = cfg.clip {
            clip_grads(store, c);
        }
        adam.step(store, epoch)?;
        on_batch(&BatchRecord {
            epoch,
            batch: b,
            l_tf: acc.l_tf,
            l_sf: acc.l_sf,
            total: acc.total,
            lr,
        })?;
    }
    let n = samples.len() as f64;
    sum.l_tf /= n;
    sum.l_sf /= n;
    sum.total /= n;
    Ok(EpochReport {
        epoch,
        lr,
        loss: sum,
        samples: samples.len(),
        alpha_checked: alphas.checked,
        alpha_violations: alphas.violations,
        max_alpha_sum_error: alphas.max_err,
        clamped_logs: clamped,
    })
}

/// Parameter and optimizer files of a run, one pair per completed epoch.
#[derive(Debug, Clone)]
pub struct CheckpointDir {
    pub root: PathBuf,
}

impl CheckpointDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Parameters after zero-based `epoch` finished.
    pub fn params_path(&self, epoch: usize) -> PathBuf {
        self.root.join(format!("epoch_{:04}.ckpt", epoch + 1))
    }

    pub fn adam_path(&self, epoch: usize) -> PathBuf {
        self.root.join(format!("epoch_{:04}.adam", epoch + 1))
    }

    /// Number of completed epochs with both files present.
    pub fn completed_epochs(&self) -> Result<usize> {
        let entries = match std::fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(0),
            Err(e) => return Err(Error::io(&self.root, e)),
        };
        let mut best = 0;
        for entry in entries {
            let name = entry.map_err(|e| Error::io(&self.root, e))?.file_name();
            let name = name.to_string_lossy();
            if let Some(n) = name.strip_prefix("epoch_").and_then(|s| s.strip_suffix(".ckpt")) {
                if let Ok(n) = n.parse::<usize>() {
                    if n > best && self.adam_path(n - 1).exists() {
                        best = n;
                    }
                }
            }
        }
        Ok(best)
    }

    pub fn save<T: Scalar>(&self, epoch: usize, store: &ParamStore<T>, adam: &AdamState<T>) -> Result<()> {
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        save_adam(&self.adam_path(epoch), adam)?;
        save_params(&self.params_path(epoch), store)
    }

    /// Restores the state after `completed` epochs.
    pub fn load<T: Scalar>(&self, completed: usize, model: &Model, adam: &mut AdamState<T>) -> Result<ParamStore<T>> {
        let epoch = completed.checked_sub(1).ok_or(Error::Empty("checkpoint epochs"))?;
        let store: ParamStore<T> = load_params(&self.params_path(epoch))?;
        model.check_params(&store)?;
        load_adam(&self.adam_path(epoch), adam)?;
        Ok(store)
    }

    pub fn latest_params(&self) -> Result<Option<PathBuf>> {
        Ok(self.completed_epochs()?.checked_sub(1).map(|e| self.params_path(e)))
    }
}

/// Runs epochs `start..cfg.epochs`, checkpointing after each one when
/// `checkpoints` is given. `on_epoch` sees each report as it completes.
#[allow(clippy::too_many_arguments)]
pub fn train_epochs<T: Scalar>(
    model: &Model,
    store: &mut ParamStore<T>,
    adam: &mut AdamState<T>,
    samples: &[TrainSample<T>],
    cfg: &TrainConfig,
    start: usize,
    checkpoints: Option<&CheckpointDir>,
    on_batch: &mut dyn FnMut(&BatchRecord) -> Result<()>,
    on_epoch: &mut dyn FnMut(&EpochReport, &ParamStore<T>) -> Result<()>,
) -> Result<Vec<EpochReport>> {
    let mut reports = Vec::with_capacity(cfg.epochs.saturating_sub(start));
    for epoch in start..cfg.epochs {
        let report = train_epoch(model, store, adam, samples, cfg, epoch, on_batch)?;
        if let Some(dir) = checkpoints {
            dir.save(epoch, store, adam)?;
        }
        on_epoch(&report, store)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Path helper for the JSON model description stored next to checkpoints.
pub fn model_config_path(dir: &Path) -> PathBuf {
    dir.join("model.json")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{ModelConfig, ModelVariant};
    use crate::textdata::END;
    use approx::assert_abs_diff_eq;

    fn probs(t: &Tape<f64>, rows: &[&[f64]]) -> Var {
        let d = rows[0].len();
        t.constant(vec![rows.len(), d], rows.concat()).unwrap()
    }

    #[test]
    fn one_hot_rows_give_zero_loss() {
        let t = Tape::new();
        let p = probs(&t, &[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let l = mixed_loss(&t, p, Some(p), &[1, 2], None, 0.8).unwrap();
        assert_eq!((l.record.l_tf, l.record.total), (0.0, 0.0));
    }

    #[test]
    fn uniform_rows_give_log_vocab() {
        let t = Tape::new();
        let p = probs(&t, &[&[0.25; 4], &[0.25; 4], &[0.25; 4]]);
        let l = mixed_loss(&t, p, None, &[0, 3, 2], None, 0.8).unwrap();
        assert_abs_diff_eq!(l.record.l_tf, 4f64.ln(), epsilon = 1e-15);
        assert_eq!(l.record.total, l.record.l_tf);
        assert_eq!(l.record.l_sf, 0.0);
    }

    #[test]
    fn lambda_combines_terms() {
        let t = Tape::new();
        let a = probs(&t, &[&[0.5, 0.5], &[0.9, 0.1]]);
        let b = probs(&t, &[&[0.2, 0.8], &[0.6, 0.4]]);
        let zero = mixed_loss(&t, a, Some(b), &[0, 1], None, 0.0).unwrap();
        assert_eq!(zero.record.total, zero.record.l_tf);
        let l = mixed_loss(&t, a, Some(b), &[0, 1], None, 0.8).unwrap();
        assert_abs_diff_eq!(l.record.total, l.record.l_tf + 0.8 * l.record.l_sf, epsilon = 1e-12);
        assert_abs_diff_eq!(l.record.l_tf, -(0.5f64.ln() + 0.1f64.ln()) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn padding_is_excluded() {
        let t = Tape::new();
        let p = probs(&t, &[&[0.5, 0.5], &[1.0, 0.0]]);
        let l = mixed_loss(&t, p, None, &[0, 1], Some(&[true, false]), 0.8).unwrap();
        assert_abs_diff_eq!(l.record.l_tf, 2f64.ln(), epsilon = 1e-15);
        assert_eq!(l.clamped, 0);
        let l = mixed_loss(&t, p, None, &[0, 1], None, 0.8).unwrap();
        assert_eq!(l.clamped, 1);
        assert_abs_diff_eq!(l.record.l_tf, (2f64.ln() - 1e-12f64.ln()) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_lambda_and_targets() {
        let t = Tape::new();
        let p = probs(&t, &[&[0.5, 0.5]]);
        assert!(mixed_loss(&t, p, None, &[0], None, -0.1).is_err());
        assert!(mixed_loss(&t, p, None, &[2], None, 0.8).is_err());
        assert!(mixed_loss(&t, p, None, &[0, 1], None, 0.8).is_err());
    }

    #[test]
    fn epoch_orders_are_deterministic_permutations() {
        let a = epoch_order(10, 3, 0);
        assert_eq!(a, epoch_order(10, 3, 0));
        assert_ne!(a, epoch_order(10, 3, 1));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
    }

    fn tiny_samples() -> (Model, Vec<TrainSample<f64>>) {
        let model = Model::new(ModelConfig::new(ModelVariant::Vadd, 4, 6, 8)).unwrap();
        let mk = |id: &str, shift: f64, targets: Vec<usize>| TrainSample {
            video_id: id.into(),
            features: Arc::new(
                FeatureSequence::from_fused_rows(3, 4, &(0..12).map(|i| (i as f64 * 0.4 + shift).sin()).collect::<Vec<_>>(), 2)
                    .unwrap(),
            ),
            targets,
        };
        (model, vec![mk("a", 0.0, vec![4, 5, END]), mk("b", 1.0, vec![6, 7, 4, END])])
    }

    #[test]
    fn batch_mean_is_order_invariant() {
        let (model, samples) = tiny_samples();
        let cfg = TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        };
        let run = |samples: &[TrainSample<f64>]| {
            let mut store = model.init_params(4).unwrap();
            let mut adam = cfg.adam();
            let mut recs = Vec::new();
            train_epoch(&model, &mut store, &mut adam, samples, &cfg, 0, &mut |r| {
                recs.push(r.clone());
                Ok(())
            })
            .unwrap();
            recs[0].total
        };
        let fwd = run(&samples);
        let rev: Vec<_> = samples.iter().rev().cloned().collect();
        assert_abs_diff_eq!(fwd, run(&rev), epsilon = 1e-12);
    }

    #[test]
    fn single_sample_overfits() {
        let (model, samples) = tiny_samples();
        let samples = &samples[..1];
        let cfg = TrainConfig {
            lr0: 0.02,
            epochs: 200,
            epochs_per_decay: 1000,
            ..TrainConfig::default()
        };
        let mut store = model.init_params(7).unwrap();
        let mut adam = cfg.adam();
        let reports = train_epochs(&model, &mut store, &mut adam, samples, &cfg, 0, None, &mut |_| Ok(()), &mut |_, _| Ok(())).unwrap();
        let last = reports.last().unwrap();
        assert!(last.loss.l_tf < 0.01, "{last:?}");
        assert_eq!(last.alpha_violations, 0);
        assert!(reports.iter().all(|r| r.alpha_checked == 6));
    }

    #[test]
    fn lr_drops_threefold_at_epoch_five() {
        let (model, samples) = tiny_samples();
        let cfg = TrainConfig {
            epochs: 6,
            ..TrainConfig::default()
        };
        let mut store = model.init_params(7).unwrap();
        let mut adam = cfg.adam();
        let reports = train_epochs(&model, &mut store, &mut adam, &samples, &cfg, 0, None, &mut |_| Ok(()), &mut |_, _| Ok(())).unwrap();
        assert_eq!(reports[4].lr, 1e-4);
        assert_abs_diff_eq!(reports[4].lr / reports[5].lr, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn resume_reproduces_losses() {
        let (model, samples) = tiny_samples();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 1,
            lr0: 0.01,
            ..TrainConfig::default()
        };
        let run = |start_cfg: &TrainConfig, ckpt: &CheckpointDir, resume: bool| {
            let mut adam = start_cfg.adam();
            let (mut store, start) = if resume {
                let done = ckpt.completed_epochs().unwrap();
                (ckpt.load(done, &model, &mut adam).unwrap(), done)
            } else {
                (model.init_params(5).unwrap(), 0)
            };
            let mut log = Vec::new();
            train_epochs(&model, &mut store, &mut adam, &samples, start_cfg, start, Some(ckpt), &mut |r| {
                log.push(r.total);
                Ok(())
            }, &mut |_, _| Ok(()))
            .unwrap();
            log
        };
        let full = run(&cfg, &CheckpointDir::new(dir.path().join("full")), false);
        let part = CheckpointDir::new(dir.path().join("part"));
        let first = run(&TrainConfig { epochs: 2, ..cfg.clone() }, &part, false);
        assert_eq!(part.completed_epochs().unwrap(), 2);
        let rest = run(&cfg, &part, true);
        assert_eq!([first, rest].concat(), full);
    }

    #[test]
    fn non_finite_loss_names_sample() {
        let (model, samples) = tiny_samples();
        let mut store = model.init_params(1).unwrap();
        store.get_mut("decoder.out.b").unwrap().data_mut()[0] = f64::INFINITY;
        let mut adam = TrainConfig::default().adam();
        let err = train_epoch(&model, &mut store, &mut adam, &samples, &TrainConfig::default(), 0, &mut |_| Ok(()));
        match err {
            Err(Error::NonFiniteLoss { sample, .. }) => assert!(sample == "a" || sample == "b"),
            other => panic!("{other:?}"),
        }
    }
}

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::*;
use crate::autodiff::checkpoint::load_params;
use crate::autodiff::ParamStore;
use crate::decoder::{Model, ModelConfig};
use crate::encoder::FeatureSequence;
use crate::error::Result;
use crate::experiment::{
    evaluate, load_videos, sweep_gamma, sweep_lambda, train_resumable, training_samples, write_curves_csv, Corpus, DecodeOptions,
    GradcheckFixture, SweepRow,
};
use crate::inference::{decode_video, DecodeMode, InferenceConfig};
use crate::metrics::MetricReport;
use crate::objective::{model_config_path, CheckpointDir, EpochReport, TrainConfig};
use crate::textdata::{gen_synth, read_manifest, read_vfea, write_vfea, SynthSpec, Vocabulary};

type CmdResult = std::result::Result<(), Failure>;

pub fn dispatch(cmd: Command) -> CmdResult {
    match cmd {
        Command::GenSynth(a) => gen_synth_cmd(a),
        Command::BuildVocab(a) => build_vocab_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Caption(a) => caption_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::ConvertFeatures(a) => convert_cmd(a),
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable value")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_synth_cmd(a: GenSynthArgs) -> CmdResult {
    let spec = SynthSpec {
        videos: a.videos,
        alphabet: a.alphabet,
        events: a.events,
        frames_per_event: a.frames_per_event,
        feature_dim: a.feature_dim,
        sigma: a.sigma,
        paraphrases: a.paraphrases,
        val_frac: a.val_frac,
        test_frac: a.test_frac,
        seed: a.seed,
    };
    spec.validate()?;
    let summary = gen_synth(&spec, &a.out)?;
    println!("{}", to_json(&summary));
    Ok(())
}

fn build_vocab_cmd(a: BuildVocabArgs) -> CmdResult {
    if a.threshold == 0 {
        return Err(Failure::usage("--threshold must be at least 1"));
    }
    let manifest = read_manifest(&a.manifest)?;
    let vocab = crate::experiment::build_vocab(&manifest, a.threshold);
    vocab.save(&a.out)?;
    println!("{} tokens ({} reserved) written to {}", vocab.len(), crate::textdata::RESERVED.len(), a.out.display());
    Ok(())
}

fn train_config(a: &TrainArgs) -> std::result::Result<TrainConfig, Failure> {
    if a.lambda.is_some() && !a.variant.is_dual() {
        eprintln!("warning: --lambda is ignored by the single-stream `{}` variant", a.variant);
    }
    let cfg = TrainConfig {
        lambda: a.lambda.unwrap_or(0.8),
        lr0: a.lr,
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
        epochs_per_decay: a.decay_every,
        decay_factor: a.decay_factor,
        clip: a.clip,
    };
    cfg.validate()?;
    if a.captions_per_video == Some(0) {
        return Err(Failure::usage("--captions-per-video must be at least 1"));
    }
    if a.hidden == 0 {
        return Err(Failure::usage("--hidden must be at least 1"));
    }
    Ok(cfg)
}

fn load_corpus(a: &TrainArgs) -> std::result::Result<Corpus<f64>, Failure> {
    let manifest = a.manifest.as_ref().ok_or_else(|| Failure::usage("--manifest is required"))?;
    let vocab = a.vocab.as_ref().map(|p| Vocabulary::load(p)).transpose()?;
    Ok(Corpus::load(manifest, vocab, 2)?)
}

fn model_config(a: &TrainArgs, corpus: &Corpus<f64>) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::new(a.variant, corpus.feature_dim()?, a.hidden, corpus.vocab.len());
    cfg.share_va = a.share_va;
    Ok(cfg)
}

#[derive(Serialize)]
struct EpochLine<'a> {
    epoch: usize,
    lr: f64,
    l_tf: f64,
    l_sf: f64,
    total: f64,
    alpha_checked: usize,
    alpha_violations: usize,
    clamped_logs: usize,
    val: Option<&'a MetricReport>,
}

fn default_decode(variant: crate::decoder::ModelVariant) -> DecodeOptions {
    let mut d = DecodeOptions::greedy(0.7);
    if !variant.is_dual() {
        d.mode = DecodeMode::TfOnly;
    }
    d
}

/// Drops log lines from epoch `epochs` onwards.
fn truncate_log(path: &Path, epochs: usize) -> Result<()> {
    let Ok(f) = File::open(path) else {
        return Ok(());
    };
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let v: serde_json::Value = serde_json::from_str(&line)?;
        if v["epoch"].as_u64().is_some_and(|e| (e as usize) < epochs) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    write_text(path, &kept)
}

fn open_append(path: &Path) -> Result<BufWriter<File>> {
    let f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

fn train_cmd(a: TrainCmdArgs) -> CmdResult {
    let cfg = train_config(&a.train)?;
    let dir = CheckpointDir::new(&a.out);
    let done = dir.completed_epochs()?;
    if done > 0 && !a.resume {
        return Err(Failure::usage(format!("{} already holds checkpoints; pass --resume to continue", a.out.display())));
    }
    let corpus = load_corpus(&a.train)?;
    let mcfg = model_config(&a.train, &corpus)?;
    let model = Model::new(mcfg.clone())?;
    let samples = training_samples(&corpus.train, &corpus.vocab, a.train.captions_per_video)?;
    let cfg_path = model_config_path(&a.out);
    if done > 0 {
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let saved: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::format(&cfg_path, e.to_string()))?;
        if saved != mcfg {
            return Err(Failure::usage(format!("{} describes a different model than these flags", cfg_path.display())));
        }
    }

    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_text(&cfg_path, &serde_json::to_string_pretty(&mcfg).expect("config serializes"))?;
    corpus.vocab.save(&a.out.join("vocab.txt"))?;
    write_text(&a.out.join("train.json"), &serde_json::to_string_pretty(&cfg).expect("config serializes"))?;
    let log_path = a.out.join("train_log.jsonl");
    let epochs_path = a.out.join("epochs.jsonl");
    if done == 0 {
        write_text(&log_path, "")?;
        write_text(&epochs_path, "")?;
    } else {
        truncate_log(&log_path, done)?;
        truncate_log(&epochs_path, done)?;
    }
    let mut log = open_append(&log_path)?;
    let mut epochs_log = open_append(&epochs_path)?;
    println!(
        "training {} on {} captions from {} videos, {} parameters, epochs {}..{}",
        mcfg.variant,
        samples.len(),
        corpus.train.len(),
        model.param_specs().iter().map(|s| s.shape.iter().product::<usize>()).sum::<usize>(),
        done + 1,
        cfg.epochs
    );
    let decode = default_decode(mcfg.variant);
    let val = (!a.no_val && !corpus.val.is_empty()).then_some(&corpus.val);
    let mut on_batch = |b: &crate::objective::BatchRecord| -> Result<()> {
        writeln!(log, "{}", to_json(b)).map_err(|e| Error::io(&log_path, e))
    };
    let mut on_epoch = |r: &EpochReport, store: &ParamStore<f64>| -> Result<()> {
        let report = match val {
            Some(v) => Some(evaluate(&model, store, &corpus.vocab, v, &decode)?.report),
            None => None,
        };
        let line = EpochLine {
            epoch: r.epoch,
            lr: r.lr,
            l_tf: r.loss.l_tf,
            l_sf: r.loss.l_sf,
            total: r.loss.total,
            alpha_checked: r.alpha_checked,
            alpha_violations: r.alpha_violations,
            clamped_logs: r.clamped_logs,
            val: report.as_ref(),
        };
        writeln!(epochs_log, "{}", to_json(&line)).map_err(|e| Error::io(&epochs_path, e))?;
        let mut msg = format!("epoch {:>3}/{} lr {:.3e} loss {:.4} l_tf {:.4} l_sf {:.4}", r.epoch + 1, cfg.epochs, r.lr, r.loss.total, r.loss.l_tf, r.loss.l_sf);
        if let Some(rep) = &report {
            msg += &format!(" | val bleu4 {:.4} rouge_l {:.4}", rep.bleu4, rep.rouge_l);
            if let Some(c) = rep.cider {
                msg += &format!(" cider {c:.4}");
            }
        }
        println!("{msg}");
        if r.alpha_violations > 0 {
            eprintln!("warning: {} attention vectors were off the simplex", r.alpha_violations);
        }
        Ok(())
    };
    let result = train_resumable(&model, &samples, &cfg, &dir, &mut on_batch, &mut on_epoch);
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    epochs_log.flush().map_err(|e| Error::io(&epochs_path, e))?;
    result?;
    if let Some(p) = dir.latest_params()? {
        println!("final checkpoint: {}", p.display());
    }
    Ok(())
}

/// A checkpoint file, or the newest checkpoint of a training directory,
/// with the model described by the directory's `model.json`.
fn load_checkpoint(path: &Path) -> std::result::Result<(Model, ParamStore<f64>, PathBuf), Failure> {
    let (dir, file) = if path.is_dir() {
        let latest = CheckpointDir::new(path).latest_params()?;
        let file = latest.ok_or_else(|| Failure::usage(format!("{}: no checkpoints found", path.display())))?;
        (path.to_path_buf(), file)
    } else {
        if !path.exists() {
            return Err(Failure::usage(format!("{}: checkpoint not found", path.display())));
        }
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
    };
    let cfg_path = model_config_path(&dir);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::format(&cfg_path, e.to_string()))?;
    let model = Model::new(cfg)?;
    let store = load_params(&file)?;
    model.check_params(&store)?;
    Ok((model, store, dir))
}

fn load_vocab(explicit: Option<&PathBuf>, dir: &Path, model: &Model) -> std::result::Result<Vocabulary, Failure> {
    let path = explicit.cloned().unwrap_or_else(|| dir.join("vocab.txt"));
    let vocab = Vocabulary::load(&path)?;
    if vocab.len() != model.vocab_size() {
        return Err(Failure::usage(format!(
            "{} has {} tokens but the model expects {}",
            path.display(),
            vocab.len(),
            model.vocab_size()
        )));
    }
    Ok(vocab)
}

fn decode_options(d: &DecodeArgs, model: &Model) -> std::result::Result<DecodeOptions, Failure> {
    let variant = model.variant();
    if !variant.is_dual() {
        if d.gamma.is_some() {
            return Err(Failure::usage(format!("--gamma only applies to dual-stream variants (dd, vadd), not `{variant}`")));
        }
        if d.stream == Stream::Sf {
            return Err(Failure::usage(format!("`{variant}` has no self-forcing stream")));
        }
    }
    let gamma = d.gamma.unwrap_or(0.7);
    let mode = match (variant.is_dual(), d.stream) {
        (false, _) | (true, Stream::Tf) => DecodeMode::TfOnly,
        (true, Stream::Sf) => DecodeMode::SfOnly,
        (true, Stream::Mixed) => DecodeMode::Mixed(gamma),
    };
    let inference = InferenceConfig {
        gamma,
        beam_width: if d.greedy { 1 } else { d.beam },
        max_len: d.max_len,
        length_norm: !d.no_length_norm,
    };
    inference.validate()?;
    if d.workers == 0 {
        return Err(Failure::usage("--workers must be at least 1"));
    }
    Ok(DecodeOptions {
        inference,
        mode,
        greedy: d.greedy,
        workers: d.workers,
    })
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    checkpoint: String,
    split: String,
    variant: String,
    gamma: Option<f64>,
    stream: String,
    beam: usize,
    greedy: bool,
    metrics: &'a MetricReport,
}

fn eval_cmd(a: EvalArgs) -> CmdResult {
    let (model, store, dir) = load_checkpoint(&a.ckpt)?;
    let vocab = load_vocab(a.vocab.as_ref(), &dir, &model)?;
    let opts = decode_options(&a.decode, &model)?;
    let manifest = read_manifest(&a.manifest)?;
    let videos = load_videos::<f64>(&manifest, a.split)?;
    if videos.is_empty() {
        return Err(Failure::usage(format!("split `{}` of {} is empty", a.split, a.manifest.display())));
    }
    let ev = evaluate(&model, &store, &vocab, &videos, &opts)?;
    let out = EvalOutput {
        checkpoint: a.ckpt.display().to_string(),
        split: a.split.to_string(),
        variant: model.variant().to_string(),
        gamma: matches!(opts.mode, DecodeMode::Mixed(_)).then_some(opts.inference.gamma),
        stream: format!("{:?}", a.decode.stream).to_lowercase(),
        beam: opts.inference.beam_width,
        greedy: opts.greedy,
        metrics: &ev.report,
    };
    let text = serde_json::to_string_pretty(&out).expect("report serializes");
    if let Some(p) = &a.report {
        write_text(p, &text)?;
    }
    println!("{text}");
    Ok(())
}

fn caption_cmd(a: CaptionArgs) -> CmdResult {
    let (model, store, dir) = load_checkpoint(&a.ckpt)?;
    let vocab = load_vocab(a.vocab.as_ref(), &dir, &model)?;
    let opts = decode_options(&a.decode, &model)?;
    for path in &a.features {
        let f: FeatureSequence<f64> = read_vfea(path)?.to_sequence()?;
        let d = decode_video(&model, &store, &f, &opts.inference, opts.mode, opts.greedy)?;
        println!("{}\t{}", path.display(), vocab.decode(&d.tokens).join(" "));
    }
    Ok(())
}

fn print_table(name: &str, rows: &[SweepRow]) {
    println!("{name:>8}  {:>8}  {:>8}  {:>8}", "bleu4", "rouge_l", "cider");
    for r in rows {
        println!("{:>8}  {:>8.4}  {:>8.4}  {:>8.4}", r.value, r.bleu4, r.rouge_l, r.cider);
    }
}

fn sweep_cmd(a: SweepArgs) -> CmdResult {
    if a.values.iter().any(|v| !v.is_finite()) {
        return Err(Failure::usage("--values must be finite numbers"));
    }
    let rows = match a.param {
        SweepParam::Gamma => {
            if a.values.iter().any(|g| !(0.0..=1.0).contains(g)) {
                return Err(Failure::usage("gamma values must lie in [0, 1]"));
            }
            let ckpt = a.ckpt.as_ref().ok_or_else(|| Failure::usage("a gamma sweep needs --ckpt"))?;
            let (model, store, dir) = load_checkpoint(ckpt)?;
            if !model.variant().is_dual() {
                return Err(Failure::usage(format!("gamma has no effect on the single-stream `{}` variant", model.variant())));
            }
            let manifest = a.train.manifest.as_ref().ok_or_else(|| Failure::usage("--manifest is required"))?;
            let vocab = load_vocab(a.train.vocab.as_ref(), &dir, &model)?;
            let opts = decode_options(&a.decode, &model)?;
            let videos = load_videos::<f64>(&read_manifest(manifest)?, a.split)?;
            sweep_gamma(&model, &store, &vocab, &videos, &a.values, &opts)?
        }
        SweepParam::Lambda => {
            if a.values.iter().any(|l| *l < 0.0) {
                return Err(Failure::usage("lambda values must be non-negative"));
            }
            if !a.train.variant.is_dual() {
                eprintln!("warning: lambda has no effect on the single-stream `{}` variant", a.train.variant);
            }
            let cfg = train_config(&a.train)?;
            let corpus = load_corpus(&a.train)?;
            let mcfg = model_config(&a.train, &corpus)?;
            let probe = Model::new(mcfg.clone())?;
            let opts = decode_options(&a.decode, &probe)?;
            let samples = training_samples(&corpus.train, &corpus.vocab, a.train.captions_per_video)?;
            let videos = corpus.split(a.split);
            if videos.is_empty() {
                return Err(Failure::usage(format!("split `{}` is empty", a.split)));
            }
            sweep_lambda(&mcfg, &samples, &cfg, &corpus.vocab, videos, &a.values, &opts, &mut |r| {
                eprintln!("lambda {} done: cider {:.4}", r.value, r.cider);
            })?
        }
    };
    print_table(
        match a.param {
            SweepParam::Lambda => "lambda",
            SweepParam::Gamma => "gamma",
        },
        &rows,
    );
    if let Some(p) = &a.emit_curves {
        write_curves_csv(p, &rows)?;
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> CmdResult {
    if !(a.tol > 0.0 && a.fd_step > 0.0) {
        return Err(Failure::usage("--tol and --fd-step must be positive"));
    }
    if a.seeds == 0 {
        return Err(Failure::usage("--seeds must be at least 1"));
    }
    let variants = match a.variant {
        Some(v) => vec![v],
        None => crate::decoder::ModelVariant::ALL.to_vec(),
    };
    let mut failed = 0;
    let mut total = 0;
    for v in variants {
        for seed in a.seed..a.seed + a.seeds {
            let fixture = GradcheckFixture {
                variant: v,
                hidden: a.hidden,
                vocab: a.vocab_size,
                feature_dim: a.feature_dim,
                frames: a.frames,
                steps: a.steps,
                ..GradcheckFixture::new(v, seed)
            };
            let report = fixture.run(a.tol, a.fd_step)?;
            let worst = report
                .params
                .iter()
                .max_by(|x, y| x.max_rel_err.total_cmp(&y.max_rel_err))
                .expect("models have parameters");
            total += 1;
            if report.passed() {
                println!("PASS {v} seed {seed}: worst rel err {:.3e} ({})", worst.max_rel_err, worst.name);
            } else {
                failed += 1;
                println!("FAIL {v} seed {seed}");
                for p in report.failures() {
                    println!(
                        "  {} [{}]: analytic {:.6e} numeric {:.6e} rel err {:.3e}",
                        p.name, p.worst_index, p.analytic, p.numeric, p.max_rel_err
                    );
                }
            }
        }
    }
    println!("{}/{} checks passed at tol {:e}, fd step {:e}", total - failed, total, a.tol, a.fd_step);
    if failed > 0 {
        return Err(Failure::check(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

/// Rows of numbers separated by commas and/or whitespace.
fn read_matrix(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut rows = 0;
    let mut width = None;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f32>().map_err(|_| Error::format(path, format!("line {}: `{s}` is not a number", n + 1))))
            .collect::<Result<Vec<_>>>()?;
        if *width.get_or_insert(row.len()) != row.len() {
            return Err(Error::format(path, format!("line {} has {} values, expected {}", n + 1, row.len(), width.unwrap_or(0))));
        }
        data.extend(row);
        rows += 1;
    }
    match width {
        Some(w) if w > 0 => Ok((rows, w, data)),
        _ => Err(Error::format(path, "no feature rows")),
    }
}

fn convert_cmd(a: ConvertArgs) -> CmdResult {
    let (mf, md, motion) = read_matrix(&a.motion)?;
    let (af, ad, appearance) = read_matrix(&a.appearance)?;
    if mf != af {
        return Err(Failure::usage(format!("motion has {mf} frames but appearance has {af}")));
    }
    if md != ad {
        return Err(Failure::usage(format!("motion width {md} differs from appearance width {ad}; frames are split into equal halves")));
    }
    let f: FeatureSequence<f64> = FeatureSequence::new(
        mf,
        appearance.iter().map(|&x| x as f64).collect(),
        ad,
        motion.iter().map(|&x| x as f64).collect(),
        md,
    )?;
    let f = if a.frames == 0 { f } else { f.sample_frames(a.frames)? };
    let rows: Vec<f32> = f.fused_rows().into_iter().map(|x| x as f32).collect();
    write_vfea(&a.out, f.frames(), md + ad, &rows)?;
    println!("{}: {} frames of {} values", a.out.display(), f.frames(), md + ad);
    Ok(())
}

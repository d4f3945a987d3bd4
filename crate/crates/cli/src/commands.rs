use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use umasplit::data::{read_dataset, write_dataset, Generator, Sample, SynthConfig};
use umasplit::gradsuite;
use umasplit::kv::{parse_range, KvMap};
use umasplit::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use umasplit::train::{evaluate, train as run_training, TrainConfig, LOG_HEADER};
use umasplit::uma::{dump_rows, write_dump};
use umasplit::ParamSet;

use crate::{EvalArgs, Failure, GenDataArgs, GradCheckArgs, InspectArgs, Status, TrainArgs};

fn read_config(path: Option<&Path>) -> Result<KvMap> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(KvMap::parse(&text).with_context(|| format!("in {}", p.display()))?)
        }
        None => Ok(KvMap::default()),
    }
}

fn load_data(path: &Path) -> Result<Vec<Sample>> {
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

/// `--model` may name a checkpoint stem or a training output directory.
fn model_stem(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("model")
    } else {
        path.to_path_buf()
    }
}

fn load_model(path: &Path) -> Result<(Model, ParamSet)> {
    let stem = model_stem(path);
    let (config, params) =
        load_checkpoint(&stem).with_context(|| format!("loading checkpoint {}", stem.display()))?;
    Ok((Model::new(config)?, params))
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut kv = read_config(a.config.as_deref())?;
    let mut cfg = SynthConfig::default();
    cfg.apply_kv(&mut kv)?;
    let mut count = 100usize;
    let mut seed = 0u64;
    kv.take("count", &mut count)?;
    kv.take("seed", &mut seed)?;
    kv.finish()?;

    if let Some(v) = a.vocab {
        cfg.vocab_size = v;
    }
    if let Some(r) = &a.frames_per_token {
        cfg.frames_per_token = parse_range(r)?;
    }
    if let Some(r) = &a.tokens {
        cfg.tokens_per_utt = parse_range(r)?;
    }
    if let Some(p) = a.pair_prob {
        cfg.pair_prob = p;
    }
    if let Some(n) = a.noise_std {
        cfg.noise_std = n;
    }
    if let Some(f) = a.feat_dim {
        cfg.feat_dim = f;
    }
    if let Some(s) = a.vocab_seed {
        cfg.seed = s;
    }
    count = a.count.unwrap_or(count);
    seed = a.seed.unwrap_or(seed);

    let samples = Generator::new(cfg)?.dataset(count, seed);
    write_dataset(&a.out, &samples).with_context(|| format!("writing {}", a.out.display()))?;
    let frames: usize = samples.iter().map(Sample::frames).sum();
    let tokens: usize = samples.iter().map(|s| s.tokens.len()).sum();
    println!("wrote {count} utterances ({frames} frames, {tokens} tokens) to {}", a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut kv = read_config(a.config.as_deref())?;
    let mut model_cfg = ModelConfig::default();
    let feat_given = kv.get("feat_dim").is_some();
    let vocab_given = kv.get("vocab_size").is_some();
    model_cfg.apply_kv(&mut kv)?;
    let mut train_cfg = TrainConfig::default();
    train_cfg.apply_kv(&mut kv)?;
    kv.finish()?;

    if let Some(s) = a.seed {
        train_cfg.seed = s;
    }
    if let Some(s) = a.steps {
        train_cfg.steps = s;
    }
    if let Some(b) = a.batch {
        train_cfg.batch = b;
    }
    if let Some(lr) = a.lr {
        train_cfg.base_lr = lr;
    }
    if let Some(w) = a.warmup {
        train_cfg.warmup = w;
    }
    if let Some(w) = a.workers {
        train_cfg.workers = w;
    }
    if a.no_split {
        model_cfg.use_split = false;
    }
    if a.no_self_conditioning {
        model_cfg.use_self_conditioning = false;
    }

    let mut data = load_data(&a.data)?;
    let val = match &a.val_data {
        Some(p) => load_data(p)?,
        None => {
            let hold = data.len() / 20;
            data.split_off(data.len() - hold)
        }
    };
    if data.is_empty() {
        bail!("no training utterances in {}", a.data.display());
    }
    let feat = data[0].features.cols();
    if feat_given && model_cfg.feat_dim != feat {
        bail!("config feat_dim {} but the data has {feat}", model_cfg.feat_dim);
    }
    model_cfg.feat_dim = feat;
    if !vocab_given {
        model_cfg.vocab_size = data
            .iter()
            .chain(&val)
            .flat_map(|s| s.tokens.as_slice().iter().copied())
            .max()
            .unwrap_or(1);
    }
    let model = Model::new(model_cfg.clone())?;
    let init = model.init_params(train_cfg.seed);

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let log_path = a.out.join("train.log");
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    writeln!(log, "{LOG_HEADER}")?;
    let mut io_err = None;
    let mut non_finite = 0usize;
    let outcome = run_training(&model, init, &data, &val, &train_cfg, |r| {
        if r.non_finite {
            non_finite += 1;
        }
        if let Err(e) = writeln!(log, "{}", r.log_line()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing the training log");
    }
    log.flush()?;

    let stem = a.out.join("model");
    save_checkpoint(&stem, &model_cfg, &outcome.params)?;
    let mut record = train_cfg.to_kv();
    record.extend(model_cfg.to_kv());
    fs::write(a.out.join("run.conf"), record.to_string())?;

    let last = outcome.validations.last();
    println!(
        "trained {} steps; averaged {} checkpoints; last validation loss {}",
        train_cfg.steps,
        outcome.averaged,
        last.map_or("n/a".to_string(), |v| format!("{:.4}", v.1))
    );
    println!("max skipped fraction {:.3}", outcome.max_skipped_fraction());
    if non_finite > 0 {
        return Err(Failure {
            status: Status::Numerical,
            message: format!("{non_finite} steps had non-finite gradients"),
        }
        .into());
    }
    Ok(())
}

fn percent(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let (model, params) = load_model(&a.model)?;
    let report = evaluate(&model, &params, &data, a.workers)?;
    let edits: usize = report.utterances.iter().map(|u| u.error.edits).sum();
    let reference: usize = report.utterances.iter().map(|u| u.error.reference_len).sum();
    let s = report.stats;
    println!("utterances\t{}", data.len());
    println!("edits\t{edits}");
    println!("reference_tokens\t{reference}");
    println!("error_rate\t{:.4}", report.error_rate);
    println!("token_rate\t{:.2}", s.token_rate);
    println!("frame_rate_before\t{:.2}", s.frame_rate_before);
    println!("frame_rate_after\t{:.2}", s.frame_rate_after);
    println!("nonblank\t{}", percent(s.nonblank_ratio));
    println!("two_nonblank\t{}", s.two_nonblank_ratio.map_or("undefined".into(), percent));
    Ok(())
}

pub fn stats(a: EvalArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let (model, params) = load_model(&a.model)?;
    let s = evaluate(&model, &params, &data, a.workers)?.stats;
    println!("token_rate\tframe_rate_before\tframe_rate_after\tnonblank\ttwo_nonblank\tparams");
    println!(
        "{:.2} tps\t{:.2} fps\t{:.2} fps\t{}\t{}\t{}",
        s.token_rate,
        s.frame_rate_before,
        s.frame_rate_after,
        percent(s.nonblank_ratio),
        s.two_nonblank_ratio.map_or("undefined".into(), percent),
        model.num_params(&params)
    );
    Ok(())
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let (model, params) = load_model(&a.model)?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    for &i in &a.utt_index {
        let sample = data
            .get(i)
            .with_context(|| format!("utterance index {i} out of range ({} utterances)", data.len()))?;
        let inf = model.infer(&params, &sample.features)?;
        if a.utt_index.len() > 1 {
            writeln!(out, "# utterance {i}")?;
        }
        write_dump(&mut out, &dump_rows(&inf.alpha, &inf.segmentation))?;
    }
    out.flush()?;
    Ok(())
}

pub fn grad_check(a: GradCheckArgs) -> Result<()> {
    let results = gradsuite::run(a.seed, a.instances)?;
    println!("check\tcases\tmax_rel_error\ttolerance\tresult");
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{}\t{}\t{:.3e}\t{:.0e}\t{}",
            r.name,
            r.cases,
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        );
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if !failed.is_empty() {
        return Err(Failure {
            status: Status::Numerical,
            message: format!("gradient check failed for {}", failed.join(", ")),
        }
        .into());
    }
    Ok(())
}

//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! By default the process exits 0 so that known shortfalls stay visible
//! without breaking the workspace test run; set `ACCEPTANCE_STRICT=1` to
//! turn any failure into a non-zero exit. `ACCEPTANCE_ONLY=1,5` runs a
//! subset.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use umasplit::binfmt::encode_params;
use umasplit::ctc::{ctc_loss_bruteforce, ctc_loss_value, min_frames};
use umasplit::data::{Generator, Sample, SynthConfig};
use umasplit::gradsuite;
use umasplit::model::{Model, ModelConfig};
use umasplit::train::{evaluate, train, EvalReport, TrainConfig, TrainOutcome};
use umasplit::uma::{find_valleys, Boundary};
use umasplit::{LogProbs, Tensor, TokenSeq};

struct Verdict {
    id: &'static str,
    passed: bool,
    detail: String,
}

fn verdict(id: &'static str, passed: bool, detail: String) -> Verdict {
    let v = Verdict { id, passed, detail };
    println!("{} criterion {}: {}", if v.passed { "PASS" } else { "FAIL" }, v.id, v.detail);
    v
}

fn ctc_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut cases = 0;
    while cases < 200 {
        let frames = rng.random_range(1..=6);
        let vocab = rng.random_range(1..=4);
        let len = rng.random_range(0..=3);
        let ids: Vec<usize> = (0..len).map(|_| rng.random_range(1..=vocab)).collect();
        if min_frames(&ids) > frames {
            continue;
        }
        let logits = (0..frames * (vocab + 1)).map(|_| rng.random_range(-4.0..4.0)).collect();
        let lp = LogProbs::from_logits(&Tensor::matrix(frames, vocab + 1, logits).unwrap()).unwrap();
        let target = TokenSeq::new(ids).unwrap();
        let fast = ctc_loss_value(&lp, &target).unwrap();
        let brute = ctc_loss_bruteforce(&lp, &target).unwrap();
        worst = worst.max((fast - brute).abs());
        cases += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "1 (ctc oracle)",
        worst <= 1e-9 && secs < 10.0,
        format!("{cases} instances, max |diff| {worst:.2e}, {secs:.2}s"),
    )
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let results = gradsuite::run(7, 100).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let worst = results.iter().map(|r| r.max_rel_error / r.tolerance).fold(0.0, f64::max);
    verdict(
        "2 (gradients)",
        failed.is_empty() && secs < 60.0,
        format!(
            "{} checks, worst error/tolerance {worst:.2e}, failed [{}], {secs:.1}s",
            results.len(),
            failed.join(", ")
        ),
    )
}

const FEAT: usize = 16;

fn synth(pair_prob: f64, frames_per_token: (usize, usize)) -> Generator {
    Generator::new(SynthConfig {
        vocab_size: 30,
        frames_per_token,
        tokens_per_utt: (4, 8),
        feat_dim: FEAT,
        noise_std: 0.1,
        pair_prob,
        seed: 1,
    })
    .unwrap()
}

fn model_config(use_split: bool, dropout: f64) -> ModelConfig {
    ModelConfig {
        feat_dim: FEAT,
        model_dim: 32,
        ffn_dim: 64,
        subsample_channels: 4,
        use_split,
        dropout,
        ..ModelConfig::default()
    }
}

struct Run {
    outcome: TrainOutcome,
    report: EvalReport,
    log: String,
    secs: f64,
}

/// Trains on 2000 utterances, validates on 100 more and tests on 200 unseen.
fn experiment(gen: &Generator, cfg: ModelConfig, tcfg: &TrainConfig) -> Run {
    let train_set = gen.dataset(2000, 10);
    let val: Vec<Sample> = gen.dataset(100, 11);
    let test = gen.dataset(200, 12);
    let model = Model::new(cfg).unwrap();
    let init = model.init_params(tcfg.seed);
    let start = Instant::now();
    let outcome = train(&model, init, &train_set, &val, tcfg, |_| {}).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let report = evaluate(&model, &outcome.params, &test, 1).unwrap();
    let log = outcome.log_text();
    Run { outcome, report, log, secs }
}

fn train_config(steps: u64, val_every: u64) -> TrainConfig {
    TrainConfig { steps, base_lr: 0.05, warmup: 300, val_every, seed: 0, ..TrainConfig::default() }
}

fn mandarin() -> Run {
    experiment(&synth(0.0, (16, 24)), model_config(true, 0.0), &train_config(1500, 50))
}

fn two_nonblank(r: &Run) -> f64 {
    r.report.stats.two_nonblank_ratio.unwrap_or(0.0)
}

fn mandarin_verdict(r: &Run) -> Verdict {
    let ter = r.report.error_rate;
    let two = two_nonblank(r);
    verdict(
        "3 (mandarin regime)",
        ter <= 0.05 && two <= 0.05 && r.secs <= 900.0,
        format!("TER {:.2}%, two_nonblank {:.2}%, train {:.0}s", 100.0 * ter, 100.0 * two, r.secs),
    )
}

fn english(mandarin_two_nonblank: Option<f64>) -> Vec<Verdict> {
    let gen = synth(0.8, (8, 12));
    let tcfg = train_config(3000, 100);
    let no_split = experiment(&gen, model_config(false, 0.1), &tcfg);
    let filtered = no_split.outcome.max_skipped_fraction();
    let a = verdict(
        "4a (english, no split)",
        filtered >= 0.5 || no_split.report.error_rate >= 0.30,
        format!(
            "max filtered fraction {:.1}%, TER {:.2}%",
            100.0 * filtered,
            100.0 * no_split.report.error_rate
        ),
    );
    let split = experiment(&gen, model_config(true, 0.1), &tcfg);
    let late = split.outcome.skipped_after(500);
    let ter = split.report.error_rate;
    let b = verdict(
        "4b (english, split)",
        late == 0 && ter <= 0.10,
        format!(
            "{late} samples filtered after step 500, TER {:.2}%, frame rate after {:.2} vs token rate {:.2}",
            100.0 * ter,
            split.report.stats.frame_rate_after,
            split.report.stats.token_rate
        ),
    );
    let two = two_nonblank(&split);
    let c = match mandarin_two_nonblank {
        Some(m) => verdict(
            "4c (two_nonblank ordering)",
            two > m,
            format!("english {:.2}% vs mandarin {:.2}%", 100.0 * two, 100.0 * m),
        ),
        None => verdict("4c (two_nonblank ordering)", false, "mandarin run not executed".into()),
    };
    vec![a, b, c]
}

fn rate_identities() -> Verdict {
    let mut bad = Vec::new();
    let mut n = 0;
    for (use_split, pair, span) in [(true, 0.0, (16, 24)), (false, 0.0, (16, 24)), (true, 0.8, (8, 12))] {
        let model = Model::new(model_config(use_split, 0.0)).unwrap();
        let params = model.init_params(3);
        let samples = synth(pair, span).dataset(1000 / 3 + 1, 40 + n as u64);
        let report = evaluate(&model, &params, &samples, 1).unwrap();
        for (i, u) in report.utterances.iter().enumerate() {
            let c = &u.counts;
            let segments = c.segments();
            let expected = if use_split { 2 * segments } else { segments };
            if u.final_frames != expected {
                bad.push(format!("utt {i}: {} final frames for I={segments}", u.final_frames));
            }
            // Rates share one duration, so the identity reduces to integer
            // counts; the float check guards the reported values too.
            let lhs = c.frame_rate_after();
            let rhs = c.frame_rate_before() * segments as f64 / c.subsampled_frames as f64;
            if (lhs - rhs).abs() > 1e-12 * lhs.abs().max(1.0) {
                bad.push(format!("utt {i}: rate {lhs} vs {rhs}"));
            }
            n += 1;
        }
    }
    verdict(
        "5 (rate and length identities)",
        bad.is_empty() && n >= 1000,
        format!("{n} utterances, {} violations{}", bad.len(), bad.first().map_or(String::new(), |b| format!(" ({b})"))),
    )
}

fn valley_oracle(alpha: &[f64]) -> Vec<usize> {
    let t = alpha.len();
    let mut v = vec![0];
    v.extend((2..t).filter(|&i| alpha[i - 1] <= alpha[i - 2] && alpha[i - 1] <= alpha[i]));
    v.push(t);
    v
}

fn valleys() -> Verdict {
    let mut bad = Vec::new();
    let examples: [(&[f64], &[usize], usize); 3] = [
        (&[0.9, 0.4, 0.7, 0.3, 0.8], &[0, 2, 4, 5], 3),
        (&[0.1, 0.2, 0.3], &[0, 3], 1),
        (&[0.5, 0.5, 0.5], &[0, 2, 3], 2),
    ];
    for (alpha, want, segments) in examples {
        let seg = find_valleys(alpha, Boundary::Shared);
        if seg.valleys != want || seg.num_segments() != segments || seg.check_invariants().is_err() {
            bad.push(format!("example {alpha:?}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for k in 0..10_000 {
        let t = rng.random_range(1..=64);
        // Quantised draws make ties common.
        let levels = if k % 2 == 0 { 4.0 } else { 1e6 };
        let alpha: Vec<f64> = (0..t).map(|_| (rng.random::<f64>() * levels).floor() / levels + 0.01).collect();
        let seg = find_valleys(&alpha, Boundary::Shared);
        let ok = seg.check_invariants().is_ok()
            && seg.valleys == valley_oracle(&alpha)
            && (1..=t).contains(&seg.num_segments())
            && seg.segments.first().map(|s| s.0) == Some(1)
            && seg.segments.last().map(|s| s.1) == Some(t)
            && seg.segments.windows(2).all(|w| w[0].1 == w[1].0);
        if !ok {
            bad.push(format!("random {alpha:?}"));
        }
    }
    verdict(
        "6 (valley segmentation)",
        bad.is_empty(),
        format!("3 examples + 10000 random vectors, {} violations", bad.len()),
    )
}

fn reproducibility(first: &Run) -> Verdict {
    let second = mandarin();
    let same_params = encode_params(&first.outcome.params).unwrap() == encode_params(&second.outcome.params).unwrap()
        && encode_params(&first.outcome.last).unwrap() == encode_params(&second.outcome.last).unwrap();
    let same_log = first.log == second.log;
    verdict(
        "7 (reproducibility)",
        same_params && same_log,
        format!("checkpoints identical: {same_params}, logs identical: {same_log}"),
    )
}

fn main() {
    let only: Option<Vec<String>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
    let wanted = |id: &str| only.as_ref().is_none_or(|o| o.iter().any(|x| x == id));
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");

    let mut verdicts = Vec::new();
    if wanted("1") {
        verdicts.push(ctc_oracle());
    }
    if wanted("2") {
        verdicts.push(gradient_suite());
    }
    if wanted("5") {
        verdicts.push(rate_identities());
    }
    if wanted("6") {
        verdicts.push(valleys());
    }
    let first = (wanted("3") || wanted("4") || wanted("7")).then(mandarin);
    if let Some(run) = &first {
        if wanted("3") {
            verdicts.push(mandarin_verdict(run));
        }
    }
    if wanted("4") {
        verdicts.extend(english(first.as_ref().map(two_nonblank)));
    }
    if wanted("7") {
        if let Some(run) = &first {
            verdicts.push(reproducibility(run));
        }
    }

    let failed: Vec<_> = verdicts.iter().filter(|v| !v.passed).map(|v| v.id).collect();
    println!("acceptance: {} of {} passed", verdicts.len() - failed.len(), verdicts.len());
    for v in &verdicts {
        if !v.passed {
            eprintln!("failed: {} ({})", v.id, v.detail);
        }
    }
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}

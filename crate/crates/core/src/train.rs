//! Optimization loop, batch filtering, checkpoint averaging and evaluation.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::ctc::greedy_decode;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::metrics::{corpus_error_rate, error_rate, uma_statistics, ErrorRate, UmaStats, UttCounts};
use crate::model::{slot_outcomes, total_loss, Model};
use crate::nn::Scope;
use crate::tensor::{ParamSet, Tensor};

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    first: ParamSet,
    second: ParamSet,
    step: u64,
    skipped: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        let zeros: ParamSet = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay,
            first: zeros.clone(),
            second: zeros,
            step: 0,
            skipped: 0,
        }
    }

    /// Updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates refused because of non-finite gradients.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// One update. Returns `false`, leaving everything untouched, when any
    /// gradient is non-finite. Parameters without a gradient get weight decay
    /// only.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<bool> {
        for (name, g) in grads.iter() {
            let p = params.expect(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient of `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        if grads.iter().any(|(_, g)| !g.is_finite()) {
            self.skipped += 1;
            return Ok(false);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let m = self
                .first
                .get_mut(name)
                .ok_or_else(|| Error::ParamMismatch(format!("no optimizer state for `{name}`")))?
                .data_mut();
            let v = self.second.get_mut(name).expect("moments share names").data_mut();
            let g = grads.get(name).map(Tensor::data);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *w -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
        Ok(true)
    }
}

/// `base · min(step^-0.5, step · warmup^-1.5)` for `step ≥ 1`.
pub fn lr_schedule(step: u64, base_lr: f64, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    base_lr * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Keeps the samples whose every CTC head is computable under an
/// evaluation-mode forward pass. Returns kept indices and the skipped count.
pub fn filter_batch(model: &Model, params: &ParamSet, batch: &[Sample]) -> Result<(Vec<usize>, usize)> {
    let mut kept = Vec::with_capacity(batch.len());
    for (i, s) in batch.iter().enumerate() {
        let tape = Tape::new();
        let scope = Scope::eval(&tape, params);
        match model.forward(&scope, &s.features)?.check_computable(&s.tokens) {
            Ok(()) => kept.push(i),
            Err(e) if e.is_ctc_incomputable() => {}
            Err(e) => return Err(e),
        }
    }
    let skipped = batch.len() - kept.len();
    Ok((kept, skipped))
}

/// Element-wise mean of the `k` checkpoints with the lowest score. Ties are
/// broken by parameter bit patterns and the sum runs in that order, so the
/// result does not depend on the order of `checkpoints`.
pub fn average_checkpoints(checkpoints: &[(f64, ParamSet)], k: usize) -> Result<ParamSet> {
    if k == 0 || k > checkpoints.len() {
        return Err(Error::invalid(format!(
            "cannot average {k} of {} checkpoints",
            checkpoints.len()
        )));
    }
    let first = &checkpoints[0].1;
    for (_, p) in &checkpoints[1..] {
        first.check_compatible(p)?;
    }
    let bits = |p: &ParamSet| -> Vec<u64> {
        p.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
    };
    let mut order: Vec<(&f64, &ParamSet)> = checkpoints.iter().map(|(s, p)| (s, p)).collect();
    order.sort_by(|a, b| match a.0.total_cmp(b.0) {
        Ordering::Equal => bits(a.1).cmp(&bits(b.1)),
        o => o,
    });
    let chosen = &order[..k];
    let mut avg: ParamSet = chosen[0].1.clone();
    for (_, p) in &chosen[1..] {
        for (name, t) in avg.iter_mut() {
            let src = p.expect(name)?.data();
            t.data_mut().iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
    }
    let scale = 1.0 / k as f64;
    for (_, t) in avg.iter_mut() {
        t.data_mut().iter_mut().for_each(|a| *a *= scale);
    }
    Ok(avg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub base_lr: f64,
    pub warmup: u64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Validation (and checkpoint candidate) interval in steps.
    pub val_every: u64,
    /// Number of best checkpoints averaged at the end.
    pub average: usize,
    pub seed: u64,
    /// Threads for validation; results do not depend on it.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 16,
            base_lr: 1e-3,
            warmup: 500,
            weight_decay: 1e-6,
            grad_clip: 5.0,
            val_every: 100,
            average: 10,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    /// Applies any recognised keys from `kv`, removing them.
    pub fn apply_kv(&mut self, kv: &mut KvMap) -> Result<()> {
        kv.take("steps", &mut self.steps)?;
        kv.take("batch", &mut self.batch)?;
        kv.take("lr", &mut self.base_lr)?;
        kv.take("warmup", &mut self.warmup)?;
        kv.take("weight_decay", &mut self.weight_decay)?;
        kv.take("grad_clip", &mut self.grad_clip)?;
        kv.take("val_every", &mut self.val_every)?;
        kv.take("average", &mut self.average)?;
        kv.take("seed", &mut self.seed)?;
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.insert("steps", self.steps);
        kv.insert("batch", self.batch);
        kv.insert("lr", self.base_lr);
        kv.insert("warmup", self.warmup);
        kv.insert("weight_decay", self.weight_decay);
        kv.insert("grad_clip", self.grad_clip);
        kv.insert("val_every", self.val_every);
        kv.insert("average", self.average);
        kv.insert("seed", self.seed);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.val_every == 0 || self.average == 0 {
            return Err(Error::invalid("batch, val_every and average must be positive"));
        }
        if !(self.base_lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::invalid("base_lr must be positive, weight_decay and grad_clip non-negative"));
        }
        Ok(())
    }
}

/// One optimization step as logged.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    /// Batch means over kept samples; `None` when the whole batch was skipped.
    pub losses: Option<(f64, f64, f64)>,
    pub skipped: usize,
    pub batch: usize,
    /// The optimizer refused a non-finite gradient.
    pub non_finite: bool,
}

impl StepRecord {
    /// `step  lr  total  l_ctc  l_inter  skipped`, tab-separated.
    pub fn log_line(&self) -> String {
        let mut s = format!("{}\t{:.6e}", self.step, self.lr);
        match self.losses {
            Some((total, ctc, inter)) => write!(s, "\t{total:.6}\t{ctc:.6}\t{inter:.6}"),
            None => write!(s, "\t-\t-\t-"),
        }
        .expect("writing to a String");
        write!(s, "\t{}", self.skipped).expect("writing to a String");
        s
    }
}

pub const LOG_HEADER: &str = "step\tlr\ttotal\tl_ctc\tl_inter\tskipped";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Average of the best checkpoints by validation loss.
    pub params: ParamSet,
    /// Parameters after the last step.
    pub last: ParamSet,
    pub records: Vec<StepRecord>,
    /// `(step, mean validation total loss, incomputable validation samples)`.
    pub validations: Vec<(u64, f64, usize)>,
    pub averaged: usize,
}

impl TrainOutcome {
    pub fn log_text(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.log_line());
            s.push('\n');
        }
        s
    }

    /// Largest fraction of a batch skipped as incomputable.
    pub fn max_skipped_fraction(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.skipped as f64 / r.batch.max(1) as f64)
            .fold(0.0, f64::max)
    }

    /// Samples skipped at steps strictly after `step`.
    pub fn skipped_after(&self, step: u64) -> usize {
        self.records.iter().filter(|r| r.step > step).map(|r| r.skipped).sum()
    }
}

/// Maps `f` over `items` on up to `workers` scoped threads, keeping order.
pub fn par_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Mean validation total loss over computable samples, and the count of
/// incomputable ones. All-incomputable gives `+inf`.
pub fn validation_loss(model: &Model, params: &ParamSet, val: &[Sample], workers: usize) -> Result<(f64, usize)> {
    let losses = par_map(val, workers, |s| model.infer(params, &s.features)?.losses(&s.tokens));
    let mut sum = 0.0;
    let mut bad = 0;
    for l in losses {
        match l {
            Ok(b) => sum += b.total,
            Err(e) if e.is_ctc_incomputable() => bad += 1,
            Err(e) => return Err(e),
        }
    }
    let good = val.len() - bad;
    Ok((if good == 0 { f64::INFINITY } else { sum / good as f64 }, bad))
}

fn clip(grads: &mut ParamSet, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Runs the loop; `on_step` sees every record as it is produced.
pub fn train(
    model: &Model,
    init: ParamSet,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    model.check_params(&init)?;
    let mut params = init;
    let mut opt = AdamW::new(&params, cfg.weight_decay);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d20f);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let mut records = Vec::with_capacity(cfg.steps as usize);
    let mut candidates: Vec<(f64, ParamSet)> = Vec::new();
    let mut validations = Vec::new();

    for step in 1..=cfg.steps {
        let lr = lr_schedule(step, cfg.base_lr, cfg.warmup);
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch.min(train_set.len()) {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let mut grads: Option<ParamSet> = None;
        let (mut total, mut l_ctc, mut l_inter) = (0.0, 0.0, 0.0);
        let mut kept = 0usize;
        for &i in &batch {
            let s = &train_set[i];
            let tape = Tape::new();
            let sample_rng = ChaCha8Rng::from_rng(&mut dropout_rng);
            let scope = Scope::train(&tape, &params).with_dropout_rng(sample_rng);
            let out = model.forward(&scope, &s.features)?;
            let (loss, b) = match total_loss(&out, &s.tokens) {
                Ok(v) => v,
                Err(e) if e.is_ctc_incomputable() => continue,
                Err(e) => return Err(e),
            };
            kept += 1;
            total += b.total;
            l_ctc += b.l_ctc;
            l_inter += b.l_inter;
            let g: ParamSet = tape.backward(loss)?.into_named().into_iter().collect();
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (name, t) in g.iter() {
                        match acc.get_mut(name) {
                            Some(a) => a.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                            None => acc.insert(name.clone(), t.clone()),
                        }
                    }
                }
            }
        }

        let mut non_finite = false;
        if let Some(mut g) = grads {
            let scale = 1.0 / kept as f64;
            for (_, t) in g.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            clip(&mut g, cfg.grad_clip);
            non_finite = !opt.step(&mut params, &g, lr)?;
        }
        let k = kept.max(1) as f64;
        let record = StepRecord {
            step,
            lr,
            losses: (kept > 0).then(|| (total / k, l_ctc / k, l_inter / k)),
            skipped: batch.len() - kept,
            batch: batch.len(),
            non_finite,
        };
        on_step(&record);
        records.push(record);

        if step % cfg.val_every == 0 || step == cfg.steps {
            let (loss, bad) = if val_set.is_empty() {
                (f64::INFINITY, 0)
            } else {
                validation_loss(model, &params, val_set, cfg.workers)?
            };
            validations.push((step, loss, bad));
            if loss.is_finite() {
                candidates.push((loss, params.clone()));
                candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
                candidates.truncate(cfg.average);
            }
        }
    }

    let averaged = candidates.len();
    let best = if candidates.is_empty() {
        params.clone()
    } else {
        average_checkpoints(&candidates, averaged)?
    };
    Ok(TrainOutcome {
        params: best,
        last: params,
        records,
        validations,
        averaged,
    })
}

/// Per-utterance evaluation result.
#[derive(Clone, Debug, PartialEq)]
pub struct UttEval {
    pub hypothesis: Vec<usize>,
    pub error: ErrorRate,
    pub counts: UttCounts,
    pub final_frames: usize,
    pub use_split: bool,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub utterances: Vec<UttEval>,
    pub error_rate: f64,
    pub stats: UmaStats,
}

fn eval_one(model: &Model, params: &ParamSet, s: &Sample) -> Result<UttEval> {
    let inf = model.infer(params, &s.features)?;
    let hyp = greedy_decode(&inf.final_log_probs);
    Ok(UttEval {
        error: error_rate(&hyp, &s.tokens),
        hypothesis: hyp.into_inner(),
        counts: UttCounts {
            duration: s.duration(),
            tokens: s.tokens.len(),
            subsampled_frames: inf.subsampled_frames,
            slots: slot_outcomes(&inf.final_log_probs, inf.use_split),
        },
        final_frames: inf.final_log_probs.frames(),
        use_split: inf.use_split,
    })
}

/// Greedy decoding of every sample, spread over `workers` threads. Results
/// are merged in sample order, so the report does not depend on `workers`.
pub fn evaluate(model: &Model, params: &ParamSet, samples: &[Sample], workers: usize) -> Result<EvalReport> {
    let utterances = par_map(samples, workers, |s| eval_one(model, params, s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let rates: Vec<ErrorRate> = utterances.iter().map(|u| u.error).collect();
    let counts: Vec<UttCounts> = utterances.iter().map(|u| u.counts.clone()).collect();
    Ok(EvalReport {
        error_rate: corpus_error_rate(&rates),
        stats: uma_statistics(&counts),
        utterances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Generator, SynthConfig};
    use crate::model::ModelConfig;
    use crate::uma::Boundary;
    use proptest::prelude::*;

    fn scalar_params(v: f64) -> ParamSet {
        [("w".to_string(), Tensor::vector(vec![v]))].into_iter().collect()
    }

    #[test]
    fn adamw_zero_gradient_is_identity() {
        let mut p = scalar_params(1.5);
        let mut opt = AdamW::new(&p, 0.0);
        for _ in 0..3 {
            assert!(opt.step(&mut p, &scalar_params(0.0), 0.1).unwrap());
        }
        assert_eq!(p.get("w").unwrap().data(), &[1.5]);
    }

    #[test]
    fn adamw_first_step_is_lr() {
        let mut p = scalar_params(0.0);
        let mut opt = AdamW::new(&p, 0.0);
        opt.step(&mut p, &scalar_params(1.0), 0.1).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr · 1 / (1 + eps)
        let expected = -0.1 / (1.0 + 1e-9);
        assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adamw_decoupled_decay() {
        let mut p = scalar_params(2.0);
        let mut opt = AdamW::new(&p, 0.01);
        let mut expected = 2.0;
        for _ in 0..5 {
            opt.step(&mut p, &scalar_params(0.0), 0.1).unwrap();
            expected *= 1.0 - 0.1 * 0.01;
            assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn adamw_skips_nan() {
        let mut p = scalar_params(2.0);
        let mut opt = AdamW::new(&p, 0.0);
        assert!(!opt.step(&mut p, &scalar_params(f64::NAN), 0.1).unwrap());
        assert_eq!((opt.steps(), opt.skipped()), (0, 1));
        assert_eq!(p.get("w").unwrap().data(), &[2.0]);
    }

    #[test]
    fn schedule_shape() {
        let peak = lr_schedule(500, 1e-3, 500);
        assert!((peak - 1e-3 / 500f64.sqrt()).abs() < 1e-18);
        assert!((lr_schedule(250, 1e-3, 500) - peak / 2.0).abs() < 1e-15);
        assert!((lr_schedule(2000, 1e-3, 500) - peak / 2.0).abs() < 1e-15);
    }

    fn ps(vals: &[f64]) -> ParamSet {
        [("a".to_string(), Tensor::vector(vals.to_vec()))].into_iter().collect()
    }

    #[test]
    fn averaging() {
        let one = average_checkpoints(&[(1.0, ps(&[1.0, 2.0])), (0.5, ps(&[3.0, 4.0]))], 1).unwrap();
        assert_eq!(one, ps(&[3.0, 4.0]));
        let sym = average_checkpoints(&[(1.0, ps(&[1.0, -2.0])), (1.0, ps(&[-1.0, 2.0]))], 2).unwrap();
        assert_eq!(sym, ps(&[0.0, 0.0]));
        assert!(average_checkpoints(&[(1.0, ps(&[1.0])), (1.0, ps(&[1.0, 2.0]))], 2).is_err());
        assert!(average_checkpoints(&[(1.0, ps(&[1.0]))], 2).is_err());
    }

    proptest! {
        #[test]
        fn averaging_is_permutation_invariant(
            vals in prop::collection::vec((0.0f64..3.0, -5.0f64..5.0, -5.0f64..5.0), 1..8),
            k in 1usize..8,
            rot in 0usize..8,
        ) {
            let k = k.min(vals.len());
            let cps: Vec<(f64, ParamSet)> = vals.iter().map(|&(s, a, b)| ((s * 2.0).round() / 2.0, ps(&[a, b]))).collect();
            let mut rotated = cps.clone();
            rotated.rotate_left(rot % cps.len());
            rotated.reverse();
            prop_assert_eq!(average_checkpoints(&cps, k).unwrap(), average_checkpoints(&rotated, k).unwrap());
        }
    }

    fn tiny_model(use_split: bool) -> Model {
        Model::new(ModelConfig {
            feat_dim: 8,
            model_dim: 8,
            heads: 2,
            ffn_dim: 16,
            subsample_channels: 2,
            high_rate_layers: 2,
            low_rate_layers: 2,
            vocab_size: 5,
            conditioning_layers: vec![1, 2],
            low_rate_inter_layers: vec![1],
            use_split,
            use_self_conditioning: true,
            boundary: Boundary::Shared,
            dropout: 0.0,
        })
        .unwrap()
    }

    fn tiny_data(n: usize, pair_prob: f64) -> Vec<Sample> {
        Generator::new(SynthConfig {
            vocab_size: 5,
            frames_per_token: (8, 12),
            tokens_per_utt: (3, 6),
            feat_dim: 8,
            noise_std: 0.1,
            pair_prob,
            seed: 3,
        })
        .unwrap()
        .dataset(n, 1)
    }

    #[test]
    fn filter_keeps_exactly_the_computable() {
        let model = tiny_model(false);
        let params = model.init_params(1);
        let batch = tiny_data(20, 1.0);
        let (kept, skipped) = filter_batch(&model, &params, &batch).unwrap();
        assert_eq!(kept.len() + skipped, 20);
        for (i, s) in batch.iter().enumerate() {
            let r = model.infer(&params, &s.features).unwrap().losses(&s.tokens);
            assert_eq!(r.is_ok(), kept.contains(&i));
            if let Err(e) = r {
                assert!(e.is_ctc_incomputable());
            }
        }
        assert_eq!(filter_batch(&model, &params, &[]).unwrap(), (vec![], 0));
    }

    #[test]
    fn training_runs_and_logs() {
        let model = tiny_model(true);
        let data = tiny_data(12, 0.3);
        let cfg = TrainConfig {
            steps: 6,
            batch: 4,
            warmup: 3,
            val_every: 2,
            average: 2,
            ..TrainConfig::default()
        };
        let mut seen = 0;
        let out = train(&model, model.init_params(0), &data[..8], &data[8..], &cfg, |_| seen += 1).unwrap();
        assert_eq!(seen, 6);
        assert_eq!(out.validations.len(), 3);
        assert_eq!(out.averaged, 2);
        let log = out.log_text();
        assert_eq!(log.lines().count(), 7);
        assert!(log.starts_with(LOG_HEADER));
        assert_eq!(log.lines().nth(1).unwrap().split('\t').count(), 6);
        model.check_params(&out.params).unwrap();
    }

    #[test]
    fn evaluation_is_independent_of_workers() {
        let model = tiny_model(true);
        let params = model.init_params(2);
        let data = tiny_data(7, 0.5);
        let a = evaluate(&model, &params, &data, 1).unwrap();
        let b = evaluate(&model, &params, &data, 3).unwrap();
        assert_eq!(a.utterances, b.utterances);
        assert_eq!(a.error_rate, b.error_rate);
        for u in &a.utterances {
            assert_eq!(u.final_frames, 2 * u.counts.segments());
        }
    }
}

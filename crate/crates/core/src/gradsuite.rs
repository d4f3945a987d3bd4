//! The finite-difference suite behind `grad-check`: every primitive, the
//! aggregation, split and self-conditioning transforms, and the full loss.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{OpKind, Var};
use crate::ctc::{ctc_loss, self_condition, SelfCondition, TokenSeq};
use crate::data::{Generator, SynthConfig};
use crate::error::Result;
use crate::gradcheck::{check_param_gradients, finite_difference_check, param_fn, scalar_fn, Coordinate};
use crate::model::{total_loss, Model, ModelConfig};
use crate::nn::{LayerNorm, Linear, Scope};
use crate::split::SplitModule;
use crate::tensor::{ParamSet, Tensor};
use crate::uma::{aggregate, find_valleys, Boundary};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// `Σ W ⊙ y` with a fixed random `W`, so that no output coordinate is left
/// out of the check and row-normalised outputs still have a gradient.
fn weighted_sum<'t>(y: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    Ok(y.mul(y.tape().constant(w.clone()))?.sum())
}

/// One random instance of the check for `op`: input and max relative error.
fn op_case(op: OpKind, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (r, c) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let x = random(rng, &[r, c], -2.0, 2.0);
    let positive = random(rng, &[r, c], 0.2, 2.0);
    let w_rc = random(rng, &[r, c], -1.0, 1.0);
    let other = random(rng, &[r, c], -1.0, 1.0);
    match op {
        OpKind::MatMul => {
            let k = rng.random_range(1..=3);
            let b = random(rng, &[c, k], -1.0, 1.0);
            let a = random(rng, &[k, r], -1.0, 1.0);
            let w1 = random(rng, &[r, k], -1.0, 1.0);
            let w2 = random(rng, &[k, c], -1.0, 1.0);
            finite_difference_check(
                scalar_fn(|t, x| {
                    let left = weighted_sum(x.matmul(t.constant(b.clone()))?, &w1)?;
                    let right = weighted_sum(t.constant(a.clone()).matmul(x)?, &w2)?;
                    left.add(right)
                }),
                &x,
                EPS,
            )
        }
        OpKind::Add => {
            let row = random(rng, &[c], -1.0, 1.0);
            finite_difference_check(
                scalar_fn(|t, x| {
                    let same = x.add(t.constant(other.clone()))?;
                    let bcast = same.add(t.constant(row.clone()))?.add(t.constant(Tensor::scalar(0.3)))?;
                    weighted_sum(bcast, &w_rc)
                }),
                &x,
                EPS,
            )
        }
        OpKind::ElementwiseMul => finite_difference_check(
            scalar_fn(|_, x| weighted_sum(x.mul(x)?, &w_rc)),
            &x,
            EPS,
        ),
        OpKind::ScalarScale => finite_difference_check(
            scalar_fn(|_, x| weighted_sum(x.scale(-1.7), &w_rc)),
            &x,
            EPS,
        ),
        OpKind::Sigmoid => unary(&x, &w_rc, |v| v.sigmoid()),
        OpKind::Swish => unary(&x, &w_rc, |v| v.swish()),
        OpKind::Tanh => unary(&x, &w_rc, |v| v.tanh()),
        OpKind::Exp => unary(&x, &w_rc, |v| v.exp()),
        OpKind::Log => unary(&positive, &w_rc, |v| v.log()),
        OpKind::Softmax => unary(&x, &w_rc, |v| v.softmax()),
        OpKind::LogSoftmax => unary(&x, &w_rc, |v| v.log_softmax()),
        OpKind::LayerNorm => {
            let gain = random(rng, &[c], 0.5, 1.5);
            let bias = random(rng, &[c], -0.5, 0.5);
            let wrt_x = finite_difference_check(
                scalar_fn(|t, x| {
                    weighted_sum(x.layer_norm(t.constant(gain.clone()), t.constant(bias.clone()))?, &w_rc)
                }),
                &x,
                EPS,
            )?;
            let wrt_gain = finite_difference_check(
                scalar_fn(|t, g| {
                    weighted_sum(t.constant(x.clone()).layer_norm(g, t.constant(bias.clone()))?, &w_rc)
                }),
                &gain,
                EPS,
            )?;
            let wrt_bias = finite_difference_check(
                scalar_fn(|t, b| {
                    weighted_sum(t.constant(x.clone()).layer_norm(t.constant(gain.clone()), b)?, &w_rc)
                }),
                &bias,
                EPS,
            )?;
            Ok(wrt_x.max(wrt_gain).max(wrt_bias))
        }
        OpKind::Concat => {
            let axis = rng.random_range(0..2);
            let shape = if axis == 0 { [2 * r, c] } else { [r, 2 * c] };
            let w = random(rng, &shape, -1.0, 1.0);
            finite_difference_check(
                scalar_fn(|t, x| weighted_sum(Var::concat(&[x, t.constant(other.clone())], axis)?, &w)),
                &x,
                EPS,
            )
        }
        OpKind::Slice => {
            let axis = rng.random_range(0..2);
            let n = if axis == 0 { r } else { c };
            let start = rng.random_range(0..n);
            let len = rng.random_range(1..=n - start);
            let shape = if axis == 0 { [len, c] } else { [r, len] };
            let w = random(rng, &shape, -1.0, 1.0);
            finite_difference_check(
                scalar_fn(|_, x| weighted_sum(x.slice(axis, start, len)?, &w)),
                &x,
                EPS,
            )
        }
        OpKind::Transpose => {
            let w = random(rng, &[c, r], -1.0, 1.0);
            finite_difference_check(scalar_fn(|_, x| weighted_sum(x.transpose()?, &w)), &x, EPS)
        }
        OpKind::EmbeddingGather => {
            let rows: Vec<usize> = (0..rng.random_range(1..=6)).map(|_| rng.random_range(0..r)).collect();
            let w = random(rng, &[rows.len(), c], -1.0, 1.0);
            finite_difference_check(scalar_fn(|_, x| weighted_sum(x.gather_rows(&rows)?, &w)), &x, EPS)
        }
        OpKind::SegmentWeightedMean => {
            let (t_len, d) = (r + 3, c);
            let e = random(rng, &[t_len, d], -2.0, 2.0);
            let alpha = random(rng, &[t_len, 1], 0.1, 0.9);
            let seg = find_valleys(alpha.data(), Boundary::Shared).zero_based();
            let w = random(rng, &[seg.len(), d], -1.0, 1.0);
            let wrt_e = finite_difference_check(
                scalar_fn(|t, e| weighted_sum(e.segment_weighted_mean(t.constant(alpha.clone()), &seg)?, &w)),
                &e,
                EPS,
            )?;
            let wrt_alpha = finite_difference_check(
                scalar_fn(|t, a| weighted_sum(t.constant(e.clone()).segment_weighted_mean(a, &seg)?, &w)),
                &alpha,
                EPS,
            )?;
            Ok(wrt_e.max(wrt_alpha))
        }
        OpKind::MaskedFill => {
            let mask: Vec<bool> = (0..r * c).map(|_| rng.random_bool(0.4)).collect();
            finite_difference_check(
                scalar_fn(|_, x| weighted_sum(x.masked_fill(&mask, -3.0)?, &w_rc)),
                &x,
                EPS,
            )
        }
        OpKind::Sum => finite_difference_check(scalar_fn(|_, x| Ok(x.mul(x)?.sum())), &x, EPS),
        OpKind::Mean => finite_difference_check(scalar_fn(|_, x| Ok(x.mul(x)?.mean())), &x, EPS),
        OpKind::Reshape => {
            let w = random(rng, &[c, r], -1.0, 1.0);
            finite_difference_check(scalar_fn(|_, x| weighted_sum(x.reshape(&[c, r])?, &w)), &x, EPS)
        }
        OpKind::CtcLoss => {
            let frames = rng.random_range(1..=6);
            let classes = rng.random_range(2..=4);
            let mut labels = Vec::new();
            for _ in 0..rng.random_range(0..=3) {
                labels.push(rng.random_range(1..classes));
            }
            while crate::ctc::min_frames(&labels) > frames {
                labels.pop();
            }
            let y = TokenSeq::new(labels)?;
            let logits = random(rng, &[frames, classes], -2.0, 2.0);
            finite_difference_check(
                scalar_fn(|_, x| ctc_loss(x.log_softmax()?, &y, "check")),
                &logits,
                EPS,
            )
        }
    }
}

fn unary<F>(x: &Tensor, w: &Tensor, op: F) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    finite_difference_check(scalar_fn(|_, v| weighted_sum(op(v)?, w)), x, EPS)
}

fn all_coordinates(params: &ParamSet) -> Vec<Coordinate> {
    params
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |index| Coordinate { name: name.clone(), index }))
        .collect()
}

/// Small single-utterance model used by the end-to-end check.
fn end_to_end_config() -> ModelConfig {
    ModelConfig {
        feat_dim: 8,
        model_dim: 8,
        heads: 2,
        ffn_dim: 16,
        subsample_channels: 2,
        high_rate_layers: 4,
        low_rate_layers: 4,
        vocab_size: 6,
        conditioning_layers: ModelConfig::default_conditioning(4),
        low_rate_inter_layers: vec![2, 4],
        use_split: true,
        use_self_conditioning: true,
        boundary: Boundary::Shared,
        dropout: 0.0,
    }
}

/// Gradient of the combined loss for `coords` random parameter coordinates.
/// Points where a probe changes the segmentation, or where the loss is
/// incomputable, are skipped in favour of the next data seed.
pub fn end_to_end_check(seed: u64, coords: usize) -> Result<f64> {
    let model = Model::new(end_to_end_config())?;
    let gen = Generator::new(SynthConfig {
        vocab_size: 6,
        frames_per_token: (8, 16),
        tokens_per_utt: (2, 4),
        feat_dim: 8,
        noise_std: 0.2,
        pair_prob: 0.5,
        seed,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 0.. {
        let params = model.init_params(seed.wrapping_add(attempt));
        let sample = gen.sample(seed.wrapping_add(attempt));
        let base = model.infer(&params, &sample.features)?;
        if base.losses(&sample.tokens).is_err() {
            continue;
        }
        let all = all_coordinates(&params);
        let chosen: Vec<Coordinate> = (0..coords).map(|_| all[rng.random_range(0..all.len())].clone()).collect();
        let stable = Cell::new(true);
        let f = param_fn(|tape, p| {
            let scope = Scope::train(tape, p);
            let out = model.forward(&scope, &sample.features)?;
            if out.segmentation != base.segmentation {
                stable.set(false);
            }
            Ok(total_loss(&out, &sample.tokens)?.0)
        });
        let err = check_param_gradients(f, &params, &chosen, EPS)?;
        if stable.get() {
            return Ok(err);
        }
    }
    unreachable!("the attempt loop only exits by returning")
}

/// Runs every check; `instances` random cases per primitive.
pub fn run(seed: u64, instances: usize) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for op in OpKind::ALL {
        let mut worst = 0.0f64;
        for _ in 0..instances {
            worst = worst.max(op_case(op, &mut rng)?);
        }
        out.push(CheckResult {
            name: op.name().to_owned(),
            cases: instances,
            max_rel_error: worst,
            tolerance: TOLERANCE,
        });
    }

    // UMA aggregation of a predicted weight column, segmentation held fixed.
    let mut worst = 0.0f64;
    for _ in 0..instances.min(20) {
        let (t, d) = (rng.random_range(3..10), rng.random_range(1..4));
        let e = random(&mut rng, &[t, d], -2.0, 2.0);
        let logits = random(&mut rng, &[t, 1], -3.0, 3.0);
        let alpha: Vec<f64> = logits.data().iter().map(|v| crate::autodiff::sigmoid(*v)).collect();
        let seg = find_valleys(&alpha, Boundary::Shared);
        let w = random(&mut rng, &[seg.num_segments(), d], -1.0, 1.0);
        let wrt_e = finite_difference_check(
            scalar_fn(|tape, e| weighted_sum(aggregate(e, tape.constant(logits.clone()).sigmoid()?, &seg)?, &w)),
            &e,
            EPS,
        )?;
        let wrt_logits = finite_difference_check(
            scalar_fn(|tape, a| weighted_sum(aggregate(tape.constant(e.clone()), a.sigmoid()?, &seg)?, &w)),
            &logits,
            EPS,
        )?;
        worst = worst.max(wrt_e).max(wrt_logits);
    }
    out.push(CheckResult {
        name: "uma-aggregate".into(),
        cases: instances.min(20),
        max_rel_error: worst,
        tolerance: TOLERANCE,
    });

    // Split module, w.r.t. its input and all its parameters.
    let d = 4;
    let split = SplitModule::new("split", d);
    let mut sp = ParamSet::new();
    split.init(&mut sp, &mut rng);
    let e = random(&mut rng, &[3, d], -1.0, 1.0);
    let w = random(&mut rng, &[6, d], -1.0, 1.0);
    let wrt_input = finite_difference_check(
        scalar_fn(|tape, x| weighted_sum(split.forward(&Scope::eval(tape, &sp), x)?.frames, &w)),
        &e,
        EPS,
    )?;
    let wrt_params = check_param_gradients(
        param_fn(|tape, p| weighted_sum(split.forward(&Scope::train(tape, p), tape.constant(e.clone()))?.frames, &w)),
        &sp,
        &all_coordinates(&sp),
        EPS,
    )?;
    out.push(CheckResult {
        name: "split".into(),
        cases: 2,
        max_rel_error: wrt_input.max(wrt_params),
        tolerance: TOLERANCE,
    });

    // Self-conditioning, both outputs, w.r.t. input and parameters.
    let v = 5;
    let norm = LayerNorm::new("sc.norm", d);
    let head = Linear::new("sc.head", d, v);
    let back = Linear::new("sc.back", v, d);
    let mut scp = ParamSet::new();
    norm.init(&mut scp);
    head.init(&mut scp, &mut rng);
    back.init(&mut scp, &mut rng);
    let site = SelfCondition { norm: &norm, head: &head, back_proj: &back };
    let h = random(&mut rng, &[3, d], -1.0, 1.0);
    let w_out = random(&mut rng, &[3, d], -1.0, 1.0);
    let w_lp = random(&mut rng, &[3, v], -1.0, 1.0);
    let wrt_h = finite_difference_check(
        scalar_fn(|tape, x| {
            let (o, lp) = self_condition(&Scope::eval(tape, &scp), x, &site)?;
            weighted_sum(o, &w_out)?.add(weighted_sum(lp, &w_lp)?)
        }),
        &h,
        EPS,
    )?;
    let wrt_p = check_param_gradients(
        param_fn(|tape, p| {
            let (o, lp) = self_condition(&Scope::train(tape, p), tape.constant(h.clone()), &site)?;
            weighted_sum(o, &w_out)?.add(weighted_sum(lp, &w_lp)?)
        }),
        &scp,
        &all_coordinates(&scp),
        EPS,
    )?;
    out.push(CheckResult {
        name: "self-condition".into(),
        cases: 2,
        max_rel_error: wrt_h.max(wrt_p),
        tolerance: TOLERANCE,
    });

    out.push(CheckResult {
        name: "total-loss".into(),
        cases: 20,
        max_rel_error: end_to_end_check(seed, 20)?,
        tolerance: END_TO_END_TOLERANCE,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let results = run(1, 5).unwrap();
        assert_eq!(results.len(), OpKind::ALL.len() + 4);
        for r in &results {
            assert!(r.passed(), "{r:?}");
        }
    }
}

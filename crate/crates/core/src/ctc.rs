//! Connectionist temporal classification: the log-space forward recursion
//! with its reverse-mode adjoint, a brute-force oracle, greedy decoding and
//! the self-conditioning transform.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Scope};
use crate::tensor::Tensor;

/// The blank label.
pub const BLANK: usize = 0;

/// Row tolerance for [`LogProbs`] normalization.
const ROW_TOLERANCE: f64 = 1e-8;

/// A target token sequence. Ids are `1..=V`; the blank never appears.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<usize>);

impl TokenSeq {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.contains(&BLANK) {
            return Err(Error::invalid("token sequence contains the blank id"));
        }
        Ok(Self(ids))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }
}

/// Per-frame log-probabilities over blank plus `V` tokens, `N × (V+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbs(Tensor);

impl LogProbs {
    pub fn new(t: Tensor) -> Result<Self> {
        let (n, c) = t.dims2()?;
        if c < 2 {
            return Err(Error::shape("log-probs need blank plus at least one token"));
        }
        for i in 0..n {
            let lse = log_sum_exp(t.row(i));
            if (lse).abs() > ROW_TOLERANCE {
                return Err(Error::invalid(format!(
                    "row {i} of log-probs sums to exp({lse}), not 1"
                )));
            }
        }
        Ok(Self(t))
    }

    /// Normalizes arbitrary scores row-wise.
    pub fn from_logits(t: &Tensor) -> Result<Self> {
        let (n, c) = t.dims2()?;
        let mut out = t.clone();
        for i in 0..n {
            let lse = log_sum_exp(t.row(i));
            for v in &mut out.data_mut()[i * c..(i + 1) * c] {
                *v -= lse;
            }
        }
        Self::new(out)
    }

    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    pub fn classes(&self) -> usize {
        self.0.cols()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Per-frame argmax (lowest index wins ties).
    pub fn argmax_path(&self) -> Vec<usize> {
        (0..self.frames()).map(|i| argmax(self.0.row(i))).collect()
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn log_sum_exp(vs: &[f64]) -> f64 {
    let m = vs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn lse2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Minimum number of frames CTC needs for `target`: one per token plus a
/// separating blank between each pair of identical neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// `Ok(())` if `frames` can embed `target`; otherwise the load-bearing
/// "CTC incomputable" error naming `head`.
pub fn check_computable(frames: usize, target: &[usize], head: &str) -> Result<()> {
    let required = min_frames(target);
    if frames < required {
        return Err(Error::CtcIncomputable {
            head: head.to_owned(),
            frames,
            required,
        });
    }
    Ok(())
}

/// Blank-interleaved target `[∅, y1, ∅, y2, …, ∅]`.
fn extended_labels(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &y in target {
        ext.push(y);
        ext.push(BLANK);
    }
    ext
}

/// Whether state `s` may be entered from `s − 2` (skipping a blank).
fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

/// Forward table `log α[t][s]`, row-major `N × S`, and the final `log p(y)`.
fn forward_table(lp: &Tensor, ext: &[usize]) -> (Vec<f64>, f64) {
    let (n, c) = (lp.rows(), lp.cols());
    let s_len = ext.len();
    let mut alpha = vec![f64::NEG_INFINITY; n * s_len];
    let at = |t: usize, k: usize| lp.data()[t * c + k];
    alpha[0] = at(0, ext[0]);
    if s_len > 1 {
        alpha[1] = at(0, ext[1]);
    }
    for t in 1..n {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if can_skip(ext, s) {
                acc = lse2(acc, prev[s - 2]);
            }
            cur[s] = if acc == f64::NEG_INFINITY {
                acc
            } else {
                acc + at(t, ext[s])
            };
        }
    }
    let last = &alpha[(n - 1) * s_len..];
    let log_p = if s_len > 1 {
        lse2(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };
    (alpha, log_p)
}

/// Reverse sweep through the forward recursion: propagates `d loss` (the
/// scalar `upstream`) back to every log-probability entry, accumulating into
/// `out` (same layout as `lp`).
pub(crate) fn accumulate_alpha_adjoint(
    lp: &Tensor,
    ext: &[usize],
    alpha: &[f64],
    upstream: f64,
    out: &mut [f64],
) {
    let (n, c) = (lp.rows(), lp.cols());
    let s_len = ext.len();
    let mut adj = vec![0.0; n * s_len];
    let last = (n - 1) * s_len;
    let finals: &[usize] = if s_len > 1 {
        &[s_len - 1, s_len - 2]
    } else {
        &[0]
    };
    let log_p = log_sum_exp(&finals.iter().map(|&s| alpha[last + s]).collect::<Vec<_>>());
    // loss = −log p, so d loss / d α_final = −softmax over the final states.
    for &s in finals {
        adj[last + s] = -upstream * (alpha[last + s] - log_p).exp();
    }
    for t in (1..n).rev() {
        for s in 0..s_len {
            let a = adj[t * s_len + s];
            let here = alpha[t * s_len + s];
            if a == 0.0 || here == f64::NEG_INFINITY {
                continue;
            }
            let emit = lp.data()[t * c + ext[s]];
            out[t * c + ext[s]] += a;
            let pre = here - emit;
            let mut push = |j: usize| {
                let prev = alpha[(t - 1) * s_len + j];
                if prev != f64::NEG_INFINITY {
                    adj[(t - 1) * s_len + j] += a * (prev - pre).exp();
                }
            };
            push(s);
            if s >= 1 {
                push(s - 1);
            }
            if can_skip(ext, s) {
                push(s - 2);
            }
        }
    }
    for s in 0..s_len.min(2) {
        out[ext[s]] += adj[s];
    }
}

fn check_labels(classes: usize, target: &[usize]) -> Result<()> {
    if let Some(&bad) = target.iter().find(|&&y| y == BLANK || y >= classes) {
        return Err(Error::invalid(format!(
            "target id {bad} outside 1..{classes}"
        )));
    }
    Ok(())
}

/// CTC negative log-likelihood of `target` under `lp` (`N × (V+1)`
/// log-probabilities on the tape). `head` names the output in errors.
pub fn ctc_loss<'t>(lp: Var<'t>, target: &TokenSeq, head: &str) -> Result<Var<'t>> {
    let (loss, ext, alpha) = {
        let lpt = lp.value();
        let (n, c) = lpt.dims2()?;
        check_labels(c, target.as_slice())?;
        check_computable(n, target.as_slice(), head)?;
        let ext = extended_labels(target.as_slice());
        let (alpha, log_p) = forward_table(&lpt, &ext);
        if !log_p.is_finite() {
            return Err(Error::CtcIncomputable {
                head: head.to_owned(),
                frames: n,
                required: min_frames(target.as_slice()),
            });
        }
        (-log_p, ext, alpha)
    };
    Ok(lp.record_ctc(loss, ext, alpha))
}

/// [`ctc_loss`] on plain values, without a tape.
pub fn ctc_loss_value(lp: &LogProbs, target: &TokenSeq) -> Result<f64> {
    let t = lp.tensor();
    check_labels(t.cols(), target.as_slice())?;
    check_computable(t.rows(), target.as_slice(), "final")?;
    let (_, log_p) = forward_table(t, &extended_labels(target.as_slice()));
    if !log_p.is_finite() {
        return Err(Error::CtcIncomputable {
            head: "final".into(),
            frames: t.rows(),
            required: min_frames(target.as_slice()),
        });
    }
    Ok(-log_p)
}

/// Largest alignment space [`ctc_loss_bruteforce`] will enumerate.
pub const BRUTEFORCE_LIMIT: u128 = 10_000_000;

/// Reference CTC loss by enumerating every alignment string.
pub fn ctc_loss_bruteforce(lp: &LogProbs, target: &TokenSeq) -> Result<f64> {
    let (n, c) = (lp.frames(), lp.classes());
    check_labels(c, target.as_slice())?;
    let space = (c as u128).checked_pow(n as u32).unwrap_or(u128::MAX);
    if space > BRUTEFORCE_LIMIT {
        return Err(Error::StateSpaceTooLarge(space));
    }
    let t = lp.tensor();
    let mut path = vec![0usize; n];
    let mut terms = Vec::new();
    loop {
        if collapse(&path) == target.as_slice() {
            terms.push(path.iter().enumerate().map(|(i, &k)| t.row(i)[k]).sum::<f64>());
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == n {
                let log_p = log_sum_exp(&terms);
                if !log_p.is_finite() {
                    return Err(Error::CtcIncomputable {
                        head: "bruteforce".into(),
                        frames: n,
                        required: min_frames(target.as_slice()),
                    });
                }
                return Ok(-log_p);
            }
            path[i] += 1;
            if path[i] < c {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// CTC collapse: merge runs, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Best-path decoding: per-frame argmax, then [`collapse`].
pub fn greedy_decode(lp: &LogProbs) -> TokenSeq {
    TokenSeq(collapse(&lp.argmax_path()))
}

/// Parameters of one self-conditioning site: its own layer norm plus the
/// vocabulary head and back-projection shared across sites.
pub struct SelfCondition<'a> {
    pub norm: &'a LayerNorm,
    pub head: &'a Linear,
    pub back_proj: &'a Linear,
}

/// Self-conditioned CTC transform. Returns
/// `LN(h) + back_proj(softmax(head(LN(h))))` together with the intermediate
/// log-probabilities `log_softmax(head(LN(h)))`.
pub fn self_condition<'t>(
    scope: &Scope<'t, '_>,
    hidden: Var<'t>,
    site: &SelfCondition<'_>,
) -> Result<(Var<'t>, Var<'t>)> {
    let normed = site.norm.forward(scope, hidden)?;
    let logits = site.head.forward(scope, normed)?;
    let log_probs = logits.log_softmax()?;
    let probs = logits.softmax()?;
    let out = normed.add(site.back_proj.forward(scope, probs)?)?;
    Ok((out, log_probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::{finite_difference_check, scalar_fn};
    use crate::tensor::ParamSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lp_from_probs(rows: &[Vec<f64>]) -> LogProbs {
        let logs: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
        LogProbs::new(Tensor::from_rows(&logs).unwrap()).unwrap()
    }

    fn seq(ids: &[usize]) -> TokenSeq {
        TokenSeq::new(ids.to_vec()).unwrap()
    }

    fn random_lp(n: usize, c: usize, rng: &mut ChaCha8Rng) -> LogProbs {
        let data = (0..n * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        LogProbs::from_logits(&Tensor::matrix(n, c, data).unwrap()).unwrap()
    }

    #[test]
    fn single_frame_single_token() {
        let lp = lp_from_probs(&[vec![0.3, 0.7]]);
        let loss = ctc_loss_value(&lp, &seq(&[1])).unwrap();
        assert!((loss - (-(0.7f64).ln())).abs() < 1e-12);
        assert!((loss - 0.35667).abs() < 1e-5);
    }

    #[test]
    fn two_frames_uniform() {
        let lp = lp_from_probs(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let loss = ctc_loss_value(&lp, &seq(&[1])).unwrap();
        let oracle = ctc_loss_bruteforce(&lp, &seq(&[1])).unwrap();
        assert!((loss - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((oracle - loss).abs() < 1e-12);
        assert!((loss - 0.28768).abs() < 1e-5);
    }

    #[test]
    fn target_longer_than_frames_is_incomputable() {
        let lp = lp_from_probs(&[vec![0.2, 0.4, 0.4]]);
        let err = ctc_loss_value(&lp, &seq(&[1, 2])).unwrap_err();
        assert!(err.is_ctc_incomputable());
        assert!(err.to_string().contains("CTC incomputable"));
        assert!(ctc_loss_bruteforce(&lp, &seq(&[1, 2])).unwrap_err().is_ctc_incomputable());
    }

    #[test]
    fn repeated_label_needs_separating_blank() {
        let lp = lp_from_probs(&[vec![0.2, 0.8], vec![0.2, 0.8]]);
        assert_eq!(min_frames(&[1, 1]), 3);
        assert!(ctc_loss_value(&lp, &seq(&[1, 1])).unwrap_err().is_ctc_incomputable());
        assert!(ctc_loss_bruteforce(&lp, &seq(&[1, 1])).unwrap_err().is_ctc_incomputable());
    }

    #[test]
    fn concentrated_path_has_near_zero_loss() {
        let p = 1.0 - 1e-12;
        let q = 1e-12 / 2.0;
        let lp = lp_from_probs(&[vec![q, p, q], vec![p, q, q], vec![q, q, p]]);
        let loss = ctc_loss_value(&lp, &seq(&[1, 2])).unwrap();
        assert!(loss < 1e-9);
        assert!(ctc_loss_bruteforce(&lp, &seq(&[1, 2])).unwrap() < 1e-9);
    }

    #[test]
    fn bruteforce_refuses_large_spaces() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lp = random_lp(12, 5, &mut rng);
        assert!(matches!(
            ctc_loss_bruteforce(&lp, &seq(&[1])),
            Err(Error::StateSpaceTooLarge(_))
        ));
    }

    #[test]
    fn matches_bruteforce_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(1..=6);
            let v = rng.random_range(1..=4);
            let l = rng.random_range(1..=3);
            let y: Vec<usize> = (0..l).map(|_| rng.random_range(1..=v)).collect();
            let lp = random_lp(n, v + 1, &mut rng);
            let a = ctc_loss_value(&lp, &seq(&y));
            let b = ctc_loss_bruteforce(&lp, &seq(&y));
            match (a, b) {
                (Ok(a), Ok(b)) => assert!((a - b).abs() <= 1e-9, "{a} vs {b}"),
                (Err(a), Err(b)) => {
                    assert!(a.is_ctc_incomputable() && b.is_ctc_incomputable())
                }
                (a, b) => panic!("disagree: {a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 50 {
            let n = rng.random_range(1..=6);
            let v = rng.random_range(1..=4);
            let l = rng.random_range(1..=3);
            let y = seq(&(0..l).map(|_| rng.random_range(1..=v)).collect::<Vec<_>>());
            if min_frames(y.as_slice()) > n {
                continue;
            }
            let logits = random_lp(n, v + 1, &mut rng).into_tensor();
            let f = scalar_fn(|_, x| ctc_loss(x.log_softmax()?, &y, "final"));
            let err = finite_difference_check(f, &logits, 1e-5).unwrap();
            assert!(err <= 1e-4, "{err}");
            checked += 1;
        }
    }

    #[test]
    fn invariant_under_label_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let perm = [0usize, 3, 1, 4, 2];
        for _ in 0..20 {
            let lp = random_lp(5, 5, &mut rng);
            let y: Vec<usize> = (0..3).map(|_| rng.random_range(1..=4)).collect();
            let mut permuted = lp.tensor().clone();
            for i in 0..5 {
                for k in 0..5 {
                    permuted.data_mut()[i * 5 + perm[k]] = lp.tensor().row(i)[k];
                }
            }
            let py: Vec<usize> = y.iter().map(|&k| perm[k]).collect();
            let a = ctc_loss_value(&lp, &seq(&y));
            let b = ctc_loss_value(&LogProbs::new(permuted).unwrap(), &seq(&py));
            match (a, b) {
                (Ok(a), Ok(b)) => assert!((a - b).abs() < 1e-12),
                (Err(_), Err(_)) => {}
                _ => panic!("permutation changed computability"),
            }
        }
    }

    fn path_lp(path: &[usize], c: usize) -> LogProbs {
        let rows: Vec<Vec<f64>> = path
            .iter()
            .map(|&k| (0..c).map(|j| if j == k { 0.9 } else { 0.1 / (c - 1) as f64 }).collect())
            .collect();
        lp_from_probs(&rows)
    }

    #[test]
    fn greedy_collapse_rules() {
        assert_eq!(greedy_decode(&path_lp(&[1, 1, 0, 2], 3)).as_slice(), &[1, 2]);
        assert!(greedy_decode(&path_lp(&[0, 0, 0], 3)).is_empty());
        assert_eq!(greedy_decode(&path_lp(&[1, 0, 1], 3)).as_slice(), &[1, 1]);
    }

    #[test]
    fn log_probs_validation() {
        assert!(LogProbs::new(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()).is_err());
        assert!(TokenSeq::new(vec![1, 0]).is_err());
    }

    fn sc_params(d: usize, v: usize) -> (LayerNorm, Linear, Linear, ParamSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let norm = LayerNorm::new("n", d);
        let head = Linear::new("head", d, v + 1);
        let back = Linear::new("back", v + 1, d);
        let mut p = ParamSet::new();
        norm.init(&mut p);
        head.init(&mut p, &mut rng);
        back.init(&mut p, &mut rng);
        (norm, head, back, p)
    }

    #[test]
    fn inert_back_projection() {
        let (norm, head, back, mut p) = sc_params(6, 4);
        p.get_mut(&back.weight).unwrap().data_mut().fill(0.0);
        let tape = Tape::new();
        let scope = Scope::eval(&tape, &p);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = tape.constant(random_lp(5, 6, &mut rng).into_tensor());
        let site = SelfCondition { norm: &norm, head: &head, back_proj: &back };
        let (out, lp) = self_condition(&scope, h, &site).unwrap();
        let normed = norm.forward(&scope, h).unwrap().to_tensor();
        assert_eq!(out.shape(), vec![5, 6]);
        assert_eq!(lp.shape(), vec![5, 5]);
        assert!(out.to_tensor().max_abs_diff(&normed) == 0.0);
        assert!(LogProbs::new(lp.to_tensor()).is_ok());
    }

    #[test]
    fn self_condition_gradient() {
        let (norm, head, back, p) = sc_params(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = random_lp(3, 4, &mut rng).into_tensor();
        let w = random_lp(3, 4, &mut rng).into_tensor();
        let f = scalar_fn(|tape, x| {
            let scope = Scope::eval(tape, &p);
            let site = SelfCondition { norm: &norm, head: &head, back_proj: &back };
            let (out, lp) = self_condition(&scope, x, &site)?;
            out.mul(tape.constant(w.clone()))?.sum().add(lp.sum())
        });
        let err = finite_difference_check(f, &h, 1e-5).unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}

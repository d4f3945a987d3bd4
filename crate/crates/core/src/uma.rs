//! Unimodal aggregation: per-frame scalar weights, valley segmentation, and
//! weighted aggregation of the frames between consecutive valleys.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Ffn, FfnSpec, Scope};
use crate::tensor::ParamSet;

/// Which segment(s) a valley frame between two segments belongs to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Boundary {
    /// Inclusive sums on both sides: the valley frame feeds both neighbours.
    #[default]
    Shared,
    /// The valley frame opens the segment to its right only.
    Right,
}

impl FromStr for Boundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(Boundary::Shared),
            "right" => Ok(Boundary::Right),
            other => Err(Error::invalid(format!(
                "boundary must be `shared` or `right`, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for Boundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Boundary::Shared => "shared",
            Boundary::Right => "right",
        })
    }
}

/// Per-frame aggregation weights, each strictly inside (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct UmaWeights(Vec<f64>);

impl UmaWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if let Some((t, a)) = alpha
            .iter()
            .enumerate()
            .find(|(_, a)| !(**a > 0.0 && **a < 1.0))
        {
            return Err(Error::invalid(format!("weight {a} at frame {t} not in (0, 1)")));
        }
        Ok(Self(alpha))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Valley positions and the segments between them.
///
/// Frames are 1-based. `valleys` always starts with the sentinel 0 and ends
/// with `T`; segment `i` covers `max(τ_i, 1) ..= τ_{i+1}` under
/// [`Boundary::Shared`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UmaSegmentation {
    pub frames: usize,
    pub valleys: Vec<usize>,
    pub segments: Vec<(usize, usize)>,
    pub boundary: Boundary,
}

impl UmaSegmentation {
    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    /// Segments as 0-based inclusive index pairs.
    pub fn zero_based(&self) -> Vec<(usize, usize)> {
        self.segments.iter().map(|&(a, b)| (a - 1, b - 1)).collect()
    }

    pub fn is_valley(&self, frame: usize) -> bool {
        self.valleys[1..].binary_search(&frame).is_ok()
    }

    /// Checks the structural invariants: sentinels, strict ordering, one
    /// segment per valley gap, full coverage, and the boundary rule.
    pub fn check_invariants(&self) -> Result<()> {
        let t = self.frames;
        let v = &self.valleys;
        let fail = |msg: String| Err(Error::invalid(msg));
        if t == 0 {
            return fail("segmentation of an empty sequence".into());
        }
        if v.first() != Some(&0) || v.last() != Some(&t) {
            return fail(format!("valleys {v:?} lack sentinels 0 and {t}"));
        }
        if v.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("valleys {v:?} not strictly increasing"));
        }
        if self.segments.len() != v.len() - 1 {
            return fail("segment count differs from valley gaps".into());
        }
        let n = self.segments.len();
        if n == 0 || n > t {
            return fail(format!("{n} segments for {t} frames"));
        }
        let mut covered = vec![0usize; t + 1];
        for (i, &(a, b)) in self.segments.iter().enumerate() {
            if a < 1 || a > b || b > t {
                return fail(format!("segment {i} = {a}..={b} out of range"));
            }
            covered[a..=b].iter_mut().for_each(|c| *c += 1);
            if i + 1 < n {
                let (next_a, _) = self.segments[i + 1];
                let expected = match self.boundary {
                    Boundary::Shared => b,
                    Boundary::Right => b + 1,
                };
                if next_a != expected {
                    return fail(format!("segments {i} and {} do not meet", i + 1));
                }
            }
        }
        for (f, &c) in covered.iter().enumerate().skip(1) {
            let shared = self.boundary == Boundary::Shared && f < t && self.is_valley(f);
            let expected = if shared { 2 } else { 1 };
            if c != expected {
                return fail(format!("frame {f} covered {c} times, expected {expected}"));
            }
        }
        Ok(())
    }
}

/// Locates valleys: interior frames `t ∈ [2, T−1]` with `α_t ≤ α_{t−1}` and
/// `α_t ≤ α_{t+1}` (ties count), plus the sentinels `0` and `T`.
pub fn find_valleys(alpha: &[f64], boundary: Boundary) -> UmaSegmentation {
    let t = alpha.len();
    assert!(t >= 1, "find_valleys needs at least one frame");
    let mut valleys = vec![0];
    // 0-based index k is frame k + 1
    for k in 1..t.saturating_sub(1) {
        if alpha[k] <= alpha[k - 1] && alpha[k] <= alpha[k + 1] {
            valleys.push(k + 1);
        }
    }
    valleys.push(t);
    let last = valleys.len() - 2;
    let segments = valleys
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let start = w[0].max(1);
            let end = match boundary {
                Boundary::Shared => w[1],
                Boundary::Right if i == last => w[1],
                Boundary::Right => w[1] - 1,
            };
            (start, end)
        })
        .collect();
    UmaSegmentation {
        frames: t,
        valleys,
        segments,
        boundary,
    }
}

/// Weight predictor: `α_t = sigmoid(FFN(e_t))` with expansion 2 and a
/// one-dimensional output.
#[derive(Clone, Debug)]
pub struct WeightPredictor {
    pub ffn: Ffn,
}

impl WeightPredictor {
    pub fn new(prefix: &str, model_dim: usize) -> Self {
        let spec = FfnSpec {
            in_dim: model_dim,
            expansion: 2,
            out_dim: 1,
        };
        Self {
            ffn: Ffn::from_spec(prefix, spec),
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut impl rand::Rng) {
        self.ffn.init(params, rng);
    }

    /// Returns the `T × 1` weight column on the tape.
    pub fn forward<'t>(&self, scope: &Scope<'t, '_>, e_h: Var<'t>) -> Result<Var<'t>> {
        self.ffn.forward(scope, e_h)?.sigmoid()
    }
}

/// Differentiable aggregation `c_i = Σ α_t e_t / Σ α_t` over each segment.
/// The segmentation is a constant of the forward pass.
pub fn aggregate<'t>(
    e_h: Var<'t>,
    alpha: Var<'t>,
    seg: &UmaSegmentation,
) -> Result<Var<'t>> {
    let (t, _) = e_h.value().dims2()?;
    if t != seg.frames {
        return Err(Error::shape(format!(
            "segmentation covers {} frames, features have {t}",
            seg.frames
        )));
    }
    e_h.segment_weighted_mean(alpha, &seg.zero_based())
}

/// One line of the per-frame weight dump.
#[derive(Clone, Debug, PartialEq)]
pub struct DumpRow {
    pub frame: usize,
    pub alpha: f64,
    pub is_valley: bool,
    /// First (lowest) segment containing the frame, 0-based.
    pub segment: usize,
}

pub fn dump_rows(alpha: &UmaWeights, seg: &UmaSegmentation) -> Vec<DumpRow> {
    let mut rows = Vec::with_capacity(alpha.len());
    let mut seg_idx = 0;
    for (k, &a) in alpha.as_slice().iter().enumerate() {
        let frame = k + 1;
        while seg.segments[seg_idx].1 < frame {
            seg_idx += 1;
        }
        rows.push(DumpRow {
            frame,
            alpha: a,
            is_valley: seg.is_valley(frame) && frame < seg.frames,
            segment: seg_idx,
        });
    }
    rows
}

/// Writes the tab-separated dump: `frame_index alpha is_valley segment_id`.
pub fn write_dump(mut w: impl Write, rows: &[DumpRow]) -> io::Result<()> {
    writeln!(w, "frame_index\talpha\tis_valley\tsegment_id")?;
    for r in rows {
        writeln!(
            w,
            "{}\t{:.6}\t{}\t{}",
            r.frame,
            r.alpha,
            u8::from(r.is_valley),
            r.segment
        )?;
    }
    Ok(())
}

//! The split module: every aggregated frame becomes two candidate token
//! slots, `LN(e_i)` and `LN(FFN(e_i))`, interleaved in time.

use rand::Rng;

use crate::autodiff::Var;
use crate::ctc::BLANK;
use crate::error::Result;
use crate::nn::{Ffn, FfnSpec, LayerNorm, Scope};
use crate::tensor::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    First,
    Second,
}

/// Output of [`SplitModule::forward`]: `2I × D` frames plus the origin of
/// each row. Row `2i` (0-based) is slot `First` of segment `i`, row `2i + 1`
/// slot `Second`.
#[derive(Clone, Debug)]
pub struct SplitOutput<'t> {
    pub frames: Var<'t>,
    pub provenance: Vec<(usize, Slot)>,
}

#[derive(Clone, Debug)]
pub struct SplitModule {
    pub norm_first: LayerNorm,
    pub ffn: Ffn,
    pub norm_second: LayerNorm,
    model_dim: usize,
}

impl SplitModule {
    pub fn new(prefix: &str, model_dim: usize) -> Self {
        let spec = FfnSpec {
            in_dim: model_dim,
            expansion: 4,
            out_dim: model_dim,
        };
        Self {
            norm_first: LayerNorm::new(&format!("{prefix}.norm1"), model_dim),
            ffn: Ffn::from_spec(&format!("{prefix}.ffn"), spec),
            norm_second: LayerNorm::new(&format!("{prefix}.norm2"), model_dim),
            model_dim,
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        self.norm_first.init(params);
        self.ffn.init(params, rng);
        self.norm_second.init(params);
    }

    pub fn forward<'t>(&self, scope: &Scope<'t, '_>, e_l: Var<'t>) -> Result<SplitOutput<'t>> {
        let (i, _) = e_l.value().dims2()?;
        let first = self.norm_first.forward(scope, e_l)?;
        let second = self
            .norm_second
            .forward(scope, self.ffn.forward(scope, e_l)?)?;
        // [first_i | second_i] rows reshaped to alternate first, second
        let frames = Var::concat(&[first, second], 1)?.reshape(&[2 * i, self.model_dim])?;
        let provenance = (0..i)
            .flat_map(|k| [(k, Slot::First), (k, Slot::Second)])
            .collect();
        Ok(SplitOutput { frames, provenance })
    }
}

/// What one aggregated frame emits after splitting and greedy decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SlotCase {
    /// Both slots blank.
    BothBlank,
    /// One non-blank token in total: one blank slot, or the same token twice.
    OneToken,
    /// Two different non-blank tokens.
    TwoTokens,
}

impl SlotCase {
    pub fn classify(first: usize, second: usize) -> Self {
        match (first == BLANK, second == BLANK) {
            (true, true) => SlotCase::BothBlank,
            (true, false) | (false, true) => SlotCase::OneToken,
            (false, false) if first == second => SlotCase::OneToken,
            (false, false) => SlotCase::TwoTokens,
        }
    }

    pub fn non_blank_tokens(self) -> usize {
        match self {
            SlotCase::BothBlank => 0,
            SlotCase::OneToken => 1,
            SlotCase::TwoTokens => 2,
        }
    }
}

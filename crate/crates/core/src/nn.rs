//! Neural building blocks on top of the autodiff tape.
//!
//! Layers here are layouts: they know the names and shapes of their
//! parameters but hold no values. Values live in a [`ParamSet`] and are bound
//! to a tape through a [`Scope`], once per forward pass.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

/// Per-forward-pass context: binds named parameters to tape leaves (each at
/// most once) and carries the dropout RNG when training.
pub struct Scope<'t, 'p> {
    tape: &'t Tape,
    params: &'p ParamSet,
    trainable: bool,
    bound: RefCell<HashMap<String, Var<'t>>>,
    dropout_rng: RefCell<Option<ChaCha8Rng>>,
}

impl<'t, 'p> Scope<'t, 'p> {
    /// Parameters are recorded as trainable leaves.
    pub fn train(tape: &'t Tape, params: &'p ParamSet) -> Self {
        Self::build(tape, params, true)
    }

    /// Parameters are recorded as constants; nothing is differentiated.
    pub fn eval(tape: &'t Tape, params: &'p ParamSet) -> Self {
        Self::build(tape, params, false)
    }

    fn build(tape: &'t Tape, params: &'p ParamSet, trainable: bool) -> Self {
        Self {
            tape,
            params,
            trainable,
            bound: RefCell::new(HashMap::new()),
            dropout_rng: RefCell::new(None),
        }
    }

    /// Enables dropout with the given RNG.
    pub fn with_dropout_rng(self, rng: ChaCha8Rng) -> Self {
        *self.dropout_rng.borrow_mut() = Some(rng);
        self
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn param(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let value = self.params.expect(name)?;
        let v = if self.trainable {
            self.tape.param(name, value)
        } else {
            self.tape.constant(value.clone())
        };
        self.bound.borrow_mut().insert(name.to_owned(), v);
        Ok(v)
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    /// Inverted dropout; the identity when no RNG is attached or `p == 0`.
    pub fn dropout(&self, x: Var<'t>, p: f64) -> Result<Var<'t>> {
        let mut rng = self.dropout_rng.borrow_mut();
        let Some(rng) = rng.as_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let shape = x.shape();
        let n = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        x.mul(self.tape.constant(Tensor::new(shape, mask)?))
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// `y = x·W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            in_dim,
            out_dim,
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        let bound = 1.0 / (self.in_dim as f64).sqrt();
        params.insert(
            self.weight.clone(),
            uniform(&[self.in_dim, self.out_dim], bound, rng),
        );
        params.insert(self.bias.clone(), Tensor::zeros(&[self.out_dim]));
    }

    pub fn forward<'t>(&self, scope: &Scope<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(scope.param(&self.weight)?)?
            .add(scope.param(&self.bias)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(prefix: &str, dim: usize) -> Self {
        Self {
            gain: format!("{prefix}.gain"),
            bias: format!("{prefix}.bias"),
            dim,
        }
    }

    pub fn init(&self, params: &mut ParamSet) {
        params.insert(self.gain.clone(), Tensor::full(&[self.dim], 1.0));
        params.insert(self.bias.clone(), Tensor::zeros(&[self.dim]));
    }

    pub fn forward<'t>(&self, scope: &Scope<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(scope.param(&self.gain)?, scope.param(&self.bias)?)
    }
}

/// Shape of a two-layer feed-forward network with a Swish in between.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnSpec {
    pub in_dim: usize,
    pub expansion: usize,
    pub out_dim: usize,
}

impl FfnSpec {
    pub fn hidden_dim(&self) -> usize {
        self.in_dim * self.expansion
    }
}

/// `y = W2·swish(W1·x + b1) + b2`
#[derive(Clone, Debug)]
pub struct Ffn {
    pub first: Linear,
    pub second: Linear,
}

impl Ffn {
    pub fn new(prefix: &str, in_dim: usize, hidden_dim: usize, out_dim: usize) -> Self {
        Self {
            first: Linear::new(&format!("{prefix}.w1"), in_dim, hidden_dim),
            second: Linear::new(&format!("{prefix}.w2"), hidden_dim, out_dim),
        }
    }

    pub fn from_spec(prefix: &str, spec: FfnSpec) -> Self {
        Self::new(prefix, spec.in_dim, spec.hidden_dim(), spec.out_dim)
    }

    pub fn hidden_dim(&self) -> usize {
        self.first.out_dim
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        self.first.init(params, rng);
        self.second.init(params, rng);
    }

    pub fn forward<'t>(&self, scope: &Scope<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.first.forward(scope, x)?.swish()?;
        self.second.forward(scope, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderBlockConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl EncoderBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Pre-norm Transformer encoder block:
/// `h = x + MHA(LN(x))`, `y = h + FFN(LN(h))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub config: EncoderBlockConfig,
    norm_attn: LayerNorm,
    qkv: Linear,
    out: Linear,
    norm_ffn: LayerNorm,
    ffn: Ffn,
}

impl EncoderBlock {
    pub fn new(prefix: &str, config: EncoderBlockConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        Ok(Self {
            config,
            norm_attn: LayerNorm::new(&format!("{prefix}.attn_norm"), d),
            qkv: Linear::new(&format!("{prefix}.attn.qkv"), d, 3 * d),
            out: Linear::new(&format!("{prefix}.attn.out"), d, d),
            norm_ffn: LayerNorm::new(&format!("{prefix}.ffn_norm"), d),
            ffn: Ffn::new(&format!("{prefix}.ffn"), d, config.ffn_dim, d),
        })
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        self.norm_attn.init(params);
        self.qkv.init(params, rng);
        self.out.init(params, rng);
        self.norm_ffn.init(params);
        self.ffn.init(params, rng);
    }

    /// Names of the two projections feeding the residual stream.
    pub fn output_projections(&self) -> [&Linear; 2] {
        [&self.out, &self.ffn.second]
    }

    pub fn forward<'t>(&self, scope: &Scope<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let (_, d) = x.value().dims2()?;
        if d != self.config.model_dim {
            return Err(Error::shape(format!(
                "encoder block expects width {}, got {d}",
                self.config.model_dim
            )));
        }
        let a = self.attention(scope, self.norm_attn.forward(scope, x)?)?;
        let h = x.add(scope.dropout(a, self.config.dropout)?)?;
        let f = self.ffn.forward(scope, self.norm_ffn.forward(scope, h)?)?;
        h.add(scope.dropout(f, self.config.dropout)?)
    }

    fn attention<'t>(&self, scope: &Scope<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let d = self.config.model_dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let qkv = self.qkv.forward(scope, x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = qkv.slice(1, h * dh, dh)?;
            let k = qkv.slice(1, d + h * dh, dh)?;
            let v = qkv.slice(1, 2 * d + h * dh, dh)?;
            let scores = q.matmul(k.transpose()?)?.scale(scale);
            let weights = scores.softmax()?;
            outs.push(weights.matmul(v)?);
        }
        let merged = if heads == 1 {
            outs[0]
        } else {
            Var::concat(&outs, 1)?
        };
        self.out.forward(scope, merged)
    }
}

/// Sinusoidal absolute position table, `n × d`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(n, d, data).expect("n × d values")
}

/// Output length of one kernel-3, stride-2 convolution without padding.
fn conv_out(n: usize) -> usize {
    if n < 3 {
        0
    } else {
        (n - 1) / 2
    }
}

/// Output length of the two-convolution frontend for `t` input frames.
pub fn subsampled_len(t: usize) -> usize {
    conv_out(conv_out(t))
}

/// Smallest input length that survives subsampling.
pub const MIN_SUBSAMPLE_FRAMES: usize = 7;

/// 4× frontend: two kernel-3 stride-2 2-D convolutions over (time, feature)
/// with Swish activations, then frequency folded into channels and projected
/// to the model width.
#[derive(Clone, Debug)]
pub struct ConvSubsample {
    feat_dim: usize,
    channels: usize,
    conv1: Linear,
    conv2: Linear,
    proj: Linear,
}

impl ConvSubsample {
    pub fn new(prefix: &str, feat_dim: usize, channels: usize, model_dim: usize) -> Result<Self> {
        if feat_dim < MIN_SUBSAMPLE_FRAMES {
            return Err(Error::invalid(format!(
                "feature dimension {feat_dim} too small for two stride-2 convolutions (need ≥ 7)"
            )));
        }
        if channels == 0 {
            return Err(Error::invalid("subsampling needs at least one channel"));
        }
        let f2 = subsampled_len(feat_dim);
        Ok(Self {
            feat_dim,
            channels,
            conv1: Linear::new(&format!("{prefix}.conv1"), 9, channels),
            conv2: Linear::new(&format!("{prefix}.conv2"), 9 * channels, channels),
            proj: Linear::new(&format!("{prefix}.proj"), f2 * channels, model_dim),
        })
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        self.conv1.init(params, rng);
        self.conv2.init(params, rng);
        self.proj.init(params, rng);
    }

    /// Row indices of the 3×3 stride-2 patches over a `rows × cols` grid
    /// stored row-major, one group of nine per output position.
    fn patch_rows(rows: usize, cols: usize) -> (Vec<usize>, usize, usize) {
        let (or, oc) = (conv_out(rows), conv_out(cols));
        let mut idx = Vec::with_capacity(or * oc * 9);
        for t in 0..or {
            for f in 0..oc {
                for kt in 0..3 {
                    for kf in 0..3 {
                        idx.push((2 * t + kt) * cols + 2 * f + kf);
                    }
                }
            }
        }
        (idx, or, oc)
    }

    pub fn forward<'t>(&self, scope: &Scope<'t, '_>, features: Var<'t>) -> Result<Var<'t>> {
        let (t, f) = features.value().dims2()?;
        if f != self.feat_dim {
            return Err(Error::shape(format!(
                "expected {} features per frame, got {f}",
                self.feat_dim
            )));
        }
        if t < MIN_SUBSAMPLE_FRAMES {
            return Err(Error::TooShort { frames: t });
        }
        let c = self.channels;
        let grid = features.reshape(&[t * f, 1])?;
        let (idx, t1, f1) = Self::patch_rows(t, f);
        let patches = grid.gather_rows(&idx)?.reshape(&[t1 * f1, 9])?;
        let h1 = self.conv1.forward(scope, patches)?.swish()?;
        let (idx, t2, f2) = Self::patch_rows(t1, f1);
        let patches = h1.gather_rows(&idx)?.reshape(&[t2 * f2, 9 * c])?;
        let h2 = self.conv2.forward(scope, patches)?.swish()?;
        let folded = h2.reshape(&[t2, f2 * c])?;
        self.proj.forward(scope, folded)
    }
}

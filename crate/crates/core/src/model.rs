//! The assembled network and its training objective.
//!
//! ```text
//! features ─ conv subsample ─ +pos ─ high-rate blocks ─┬─ UMA weights ─ valleys
//!                                  (self-conditioning) │        │
//!                                                      └──── aggregate ─ +pos
//!     ─ low-rate blocks ─ split ─ shared CTC head ─ log-probs
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::binfmt::{decode_params, encode_params, tmp_path};
use crate::ctc::{self, LogProbs, SelfCondition, TokenSeq, BLANK};
use crate::error::{Error, Result};
use crate::kv::{format_list, parse_list, KvMap};
use crate::nn::{
    sinusoidal_positions, subsampled_len, ConvSubsample, EncoderBlock, EncoderBlockConfig,
    LayerNorm, Linear, Scope,
};
use crate::split::SplitModule;
use crate::tensor::{ParamSet, Tensor};
use crate::uma::{aggregate, find_valleys, Boundary, UmaSegmentation, UmaWeights, WeightPredictor};

/// Name of the final CTC head in errors and reports.
pub const FINAL_HEAD: &str = "final";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub subsample_channels: usize,
    pub high_rate_layers: usize,
    pub low_rate_layers: usize,
    pub vocab_size: usize,
    /// 1-based high-rate layers followed by a self-conditioning site.
    pub conditioning_layers: Vec<usize>,
    /// 1-based low-rate layers followed by an intermediate CTC head.
    pub low_rate_inter_layers: Vec<usize>,
    pub use_split: bool,
    pub use_self_conditioning: bool,
    pub boundary: Boundary,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat_dim: 8,
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            subsample_channels: 16,
            high_rate_layers: 4,
            low_rate_layers: 6,
            vocab_size: 30,
            conditioning_layers: Self::default_conditioning(4),
            low_rate_inter_layers: vec![2, 4],
            use_split: true,
            use_self_conditioning: true,
            boundary: Boundary::Shared,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    /// Mid, three-quarter and final layer of an `layers`-deep encoder.
    pub fn default_conditioning(layers: usize) -> Vec<usize> {
        let l = layers as f64;
        let mut v = vec![
            ((l / 2.0).round() as usize).max(1),
            ((3.0 * l / 4.0).round() as usize).max(1),
            layers,
        ];
        v.dedup();
        v
    }

    pub fn validate(&self) -> Result<()> {
        self.block_config(0.0).validate()?;
        if self.vocab_size == 0 {
            return Err(Error::invalid("vocab_size must be positive"));
        }
        if self.high_rate_layers == 0 || self.low_rate_layers == 0 {
            return Err(Error::invalid("both encoders need at least one layer"));
        }
        let check = |layers: &[usize], depth: usize, what: &str| {
            if layers.iter().any(|&l| l == 0 || l > depth) || layers.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(format!(
                    "{what} {layers:?} must be increasing within 1..={depth}"
                )));
            }
            Ok(())
        };
        check(&self.conditioning_layers, self.high_rate_layers, "conditioning_layers")?;
        check(&self.low_rate_inter_layers, self.low_rate_layers, "low_rate_inter_layers")?;
        Ok(())
    }

    fn block_config(&self, dropout: f64) -> EncoderBlockConfig {
        EncoderBlockConfig {
            model_dim: self.model_dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            dropout,
        }
    }

    pub fn num_intermediate(&self) -> usize {
        self.conditioning_layers.len() + self.low_rate_inter_layers.len()
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.insert("feat_dim", self.feat_dim);
        kv.insert("model_dim", self.model_dim);
        kv.insert("heads", self.heads);
        kv.insert("ffn_dim", self.ffn_dim);
        kv.insert("subsample_channels", self.subsample_channels);
        kv.insert("high_rate_layers", self.high_rate_layers);
        kv.insert("low_rate_layers", self.low_rate_layers);
        kv.insert("vocab_size", self.vocab_size);
        kv.insert("conditioning_layers", format_list(&self.conditioning_layers));
        kv.insert("low_rate_inter_layers", format_list(&self.low_rate_inter_layers));
        kv.insert("use_split", self.use_split);
        kv.insert("use_self_conditioning", self.use_self_conditioning);
        kv.insert("boundary", self.boundary);
        kv.insert("dropout", self.dropout);
        kv
    }

    pub fn to_text(&self) -> String {
        self.to_kv().to_string()
    }

    /// Applies any recognised keys from `kv`, removing them.
    pub fn apply_kv(&mut self, kv: &mut KvMap) -> Result<()> {
        let high_before = self.high_rate_layers;
        kv.take("feat_dim", &mut self.feat_dim)?;
        kv.take("model_dim", &mut self.model_dim)?;
        kv.take("heads", &mut self.heads)?;
        kv.take("ffn_dim", &mut self.ffn_dim)?;
        kv.take("subsample_channels", &mut self.subsample_channels)?;
        kv.take("high_rate_layers", &mut self.high_rate_layers)?;
        kv.take("low_rate_layers", &mut self.low_rate_layers)?;
        kv.take("vocab_size", &mut self.vocab_size)?;
        match kv.remove("conditioning_layers") {
            Some(raw) => self.conditioning_layers = parse_list(&raw)?,
            None if self.high_rate_layers != high_before => {
                self.conditioning_layers = Self::default_conditioning(self.high_rate_layers)
            }
            None => {}
        }
        if let Some(raw) = kv.remove("low_rate_inter_layers") {
            self.low_rate_inter_layers = parse_list(&raw)?;
        }
        kv.take("use_split", &mut self.use_split)?;
        kv.take("use_self_conditioning", &mut self.use_self_conditioning)?;
        kv.take("boundary", &mut self.boundary)?;
        kv.take("dropout", &mut self.dropout)?;
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let mut cfg = Self::default();
        cfg.apply_kv(&mut kv)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Frame rate at which an intermediate head operates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeBase {
    /// After subsampling, before aggregation.
    High,
    /// After aggregation (split or not).
    Low,
}

#[derive(Clone, Debug)]
pub struct Intermediate<'t> {
    pub head: String,
    pub time_base: TimeBase,
    pub log_probs: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<'t> {
    pub final_log_probs: Var<'t>,
    pub intermediates: Vec<Intermediate<'t>>,
    pub segmentation: UmaSegmentation,
    pub alpha: UmaWeights,
    /// Frames after subsampling (T′).
    pub subsampled_frames: usize,
    pub use_split: bool,
}

impl ForwardOutput<'_> {
    pub fn num_segments(&self) -> usize {
        self.segmentation.num_segments()
    }

    pub fn final_frames(&self) -> usize {
        self.final_log_probs.value().rows()
    }

    /// Checks every CTC head for computability, final head first.
    pub fn check_computable(&self, target: &TokenSeq) -> Result<()> {
        ctc::check_computable(self.final_frames(), target.as_slice(), FINAL_HEAD)?;
        for inter in &self.intermediates {
            let frames = inter.log_probs.value().rows();
            ctc::check_computable(frames, target.as_slice(), &inter.head)?;
        }
        Ok(())
    }
}

/// Loss values of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_ctc: f64,
    pub l_inter: f64,
    pub total: f64,
    pub intermediate: Vec<(String, f64)>,
}

/// `0.5 · (final + mean(intermediates))`. With no intermediate heads the
/// intermediate term falls back to the final loss.
pub fn combine_losses(l_ctc: f64, intermediate: &[f64]) -> (f64, f64) {
    let l_inter = if intermediate.is_empty() {
        l_ctc
    } else {
        intermediate.iter().sum::<f64>() / intermediate.len() as f64
    };
    (l_inter, 0.5 * (l_ctc + l_inter))
}

/// Combined objective on the tape, plus its breakdown.
pub fn total_loss<'t>(out: &ForwardOutput<'t>, target: &TokenSeq) -> Result<(Var<'t>, LossBreakdown)> {
    out.check_computable(target)?;
    let l_ctc = ctc::ctc_loss(out.final_log_probs, target, FINAL_HEAD)?;
    let mut inter_vars = Vec::with_capacity(out.intermediates.len());
    for inter in &out.intermediates {
        inter_vars.push(ctc::ctc_loss(inter.log_probs, target, &inter.head)?);
    }
    let inter_values: Vec<f64> = inter_vars.iter().map(Var::item).collect();
    let (l_inter_value, total_value) = combine_losses(l_ctc.item(), &inter_values);

    let l_inter = if inter_vars.is_empty() {
        l_ctc
    } else {
        let mut acc = inter_vars[0];
        for v in &inter_vars[1..] {
            acc = acc.add(*v)?;
        }
        acc.scale(1.0 / inter_vars.len() as f64)
    };
    let total = l_ctc.add(l_inter)?.scale(0.5);
    let breakdown = LossBreakdown {
        l_ctc: l_ctc.item(),
        l_inter: l_inter_value,
        total: total_value,
        intermediate: out
            .intermediates
            .iter()
            .map(|i| i.head.clone())
            .zip(inter_values)
            .collect(),
    };
    Ok((total, breakdown))
}

/// Greedy decoding of one utterance with the per-segment slot outcomes.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: TokenSeq,
    /// Argmax of the two slots of each aggregated frame; the second is
    /// always blank without the split module.
    pub slots: Vec<(usize, usize)>,
    pub subsampled_frames: usize,
    pub segments: usize,
    pub final_frames: usize,
}

/// Layout of the full network.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    subsample: ConvSubsample,
    high: Vec<EncoderBlock>,
    cond_norms: Vec<LayerNorm>,
    high_norm: LayerNorm,
    weights: WeightPredictor,
    low: Vec<EncoderBlock>,
    split: SplitModule,
    low_norm: LayerNorm,
    head: Linear,
    back_proj: Linear,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let v = config.vocab_size + 1;
        let blocks = |prefix: &str, n: usize| {
            (0..n)
                .map(|i| EncoderBlock::new(&format!("{prefix}.{}", i + 1), config.block_config(config.dropout)))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            subsample: ConvSubsample::new("subsample", config.feat_dim, config.subsample_channels, d)?,
            high: blocks("high", config.high_rate_layers)?,
            cond_norms: config
                .conditioning_layers
                .iter()
                .map(|l| LayerNorm::new(&format!("high.cond{l}.norm"), d))
                .collect(),
            high_norm: LayerNorm::new("high.norm", d),
            weights: WeightPredictor::new("uma", d),
            low: blocks("low", config.low_rate_layers)?,
            split: SplitModule::new("split", d),
            low_norm: LayerNorm::new("low.norm", d),
            head: Linear::new("ctc.head", d, v),
            back_proj: Linear::new("ctc.back_proj", v, d),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        self.subsample.init(&mut p, &mut rng);
        for b in &self.high {
            b.init(&mut p, &mut rng);
        }
        for n in &self.cond_norms {
            n.init(&mut p);
        }
        self.high_norm.init(&mut p);
        self.weights.init(&mut p, &mut rng);
        for b in &self.low {
            b.init(&mut p, &mut rng);
        }
        self.split.init(&mut p, &mut rng);
        self.low_norm.init(&mut p);
        self.head.init(&mut p, &mut rng);
        self.back_proj.init(&mut p, &mut rng);
        p
    }

    /// Runs the high-rate half: subsampling, encoder, self-conditioning.
    fn high_rate<'t>(
        &self,
        scope: &Scope<'t, '_>,
        features: Var<'t>,
        intermediates: &mut Vec<Intermediate<'t>>,
    ) -> Result<Var<'t>> {
        let cfg = &self.config;
        let sub = self.subsample.forward(scope, features)?;
        let (t, d) = sub.value().dims2()?;
        let mut h = sub.add(scope.constant(sinusoidal_positions(t, d)))?;
        for (i, block) in self.high.iter().enumerate() {
            h = block.forward(scope, h)?;
            let layer = i + 1;
            let Some(site) = cfg.conditioning_layers.iter().position(|&l| l == layer) else {
                continue;
            };
            let norm = &self.cond_norms[site];
            let head = format!("high.{layer}");
            if cfg.use_self_conditioning {
                let sc = SelfCondition {
                    norm,
                    head: &self.head,
                    back_proj: &self.back_proj,
                };
                let (next, log_probs) = ctc::self_condition(scope, h, &sc)?;
                intermediates.push(Intermediate { head, time_base: TimeBase::High, log_probs });
                h = next;
            } else {
                let normed = norm.forward(scope, h)?;
                let log_probs = self.head.forward(scope, normed)?.log_softmax()?;
                intermediates.push(Intermediate { head, time_base: TimeBase::High, log_probs });
            }
        }
        self.high_norm.forward(scope, h)
    }

    /// Frames seen by a CTC head on the low-rate side.
    fn low_rate_head<'t>(&self, scope: &Scope<'t, '_>, h: Var<'t>) -> Result<Var<'t>> {
        let frames = if self.config.use_split {
            self.split.forward(scope, h)?.frames
        } else {
            self.low_norm.forward(scope, h)?
        };
        self.head.forward(scope, frames)?.log_softmax()
    }

    pub fn forward<'t>(&self, scope: &Scope<'t, '_>, features: &Tensor) -> Result<ForwardOutput<'t>> {
        let cfg = &self.config;
        let mut intermediates = Vec::with_capacity(cfg.num_intermediate());
        let x = scope.constant(features.clone());
        let e_h = self.high_rate(scope, x, &mut intermediates)?;
        let subsampled_frames = e_h.value().rows();

        let alpha_var = self.weights.forward(scope, e_h)?;
        let alpha_values = alpha_var.value().data().to_vec();
        let segmentation = find_valleys(&alpha_values, cfg.boundary);
        let alpha = UmaWeights::new(alpha_values)?;
        let c = aggregate(e_h, alpha_var, &segmentation)?;
        let (i, d) = c.value().dims2()?;
        let mut h = c.add(scope.constant(sinusoidal_positions(i, d)))?;

        for (k, block) in self.low.iter().enumerate() {
            h = block.forward(scope, h)?;
            let layer = k + 1;
            if cfg.low_rate_inter_layers.contains(&layer) && layer < self.low.len() {
                intermediates.push(Intermediate {
                    head: format!("low.{layer}"),
                    time_base: TimeBase::Low,
                    log_probs: self.low_rate_head(scope, h)?,
                });
            }
        }
        let final_log_probs = self.low_rate_head(scope, h)?;
        // A low-rate intermediate at the last layer would duplicate the final head.
        if cfg.low_rate_inter_layers.contains(&self.low.len()) {
            intermediates.push(Intermediate {
                head: format!("low.{}", self.low.len()),
                time_base: TimeBase::Low,
                log_probs: final_log_probs,
            });
        }
        Ok(ForwardOutput {
            final_log_probs,
            intermediates,
            segmentation,
            alpha,
            subsampled_frames,
            use_split: cfg.use_split,
        })
    }

    /// Evaluation-mode forward pass with all outputs copied off the tape.
    pub fn infer(&self, params: &ParamSet, features: &Tensor) -> Result<Inference> {
        let tape = Tape::new();
        let scope = Scope::eval(&tape, params);
        let out = self.forward(&scope, features)?;
        let lp = |v: Var<'_>| LogProbs::new(v.to_tensor());
        Ok(Inference {
            final_log_probs: lp(out.final_log_probs)?,
            intermediates: out
                .intermediates
                .iter()
                .map(|i| Ok((i.head.clone(), lp(i.log_probs)?)))
                .collect::<Result<_>>()?,
            subsampled_frames: out.subsampled_frames,
            segmentation: out.segmentation,
            alpha: out.alpha,
            use_split: out.use_split,
        })
    }

    /// Greedy decoding of one utterance.
    pub fn decode(&self, params: &ParamSet, features: &Tensor) -> Result<Decoded> {
        Ok(self.infer(params, features)?.decode())
    }

    pub fn num_params(&self, params: &ParamSet) -> usize {
        params.num_values()
    }

    /// Checks that `params` matches this layout exactly.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        self.init_params(0).check_compatible(params)
    }

    /// Expected subsampled length for `frames` input frames.
    pub fn subsampled_len(frames: usize) -> usize {
        subsampled_len(frames)
    }
}

/// Owned evaluation-mode outputs of one utterance.
#[derive(Clone, Debug)]
pub struct Inference {
    pub final_log_probs: LogProbs,
    pub intermediates: Vec<(String, LogProbs)>,
    pub subsampled_frames: usize,
    pub segmentation: UmaSegmentation,
    pub alpha: UmaWeights,
    pub use_split: bool,
}

impl Inference {
    pub fn decode(&self) -> Decoded {
        Decoded {
            tokens: ctc::greedy_decode(&self.final_log_probs),
            slots: slot_outcomes(&self.final_log_probs, self.use_split),
            subsampled_frames: self.subsampled_frames,
            segments: self.segmentation.num_segments(),
            final_frames: self.final_log_probs.frames(),
        }
    }

    /// Loss values without gradients, checking the final head first.
    pub fn losses(&self, target: &TokenSeq) -> Result<LossBreakdown> {
        ctc::check_computable(self.final_log_probs.frames(), target.as_slice(), FINAL_HEAD)?;
        for (head, lp) in &self.intermediates {
            ctc::check_computable(lp.frames(), target.as_slice(), head)?;
        }
        let l_ctc = ctc::ctc_loss_value(&self.final_log_probs, target)?;
        let intermediate = self
            .intermediates
            .iter()
            .map(|(h, lp)| Ok((h.clone(), ctc::ctc_loss_value(lp, target)?)))
            .collect::<Result<Vec<_>>>()?;
        let values: Vec<f64> = intermediate.iter().map(|(_, v)| *v).collect();
        let (l_inter, total) = combine_losses(l_ctc, &values);
        Ok(LossBreakdown { l_ctc, l_inter, total, intermediate })
    }
}

/// Greedy slot outcomes from final log-probabilities.
pub fn slot_outcomes(final_lp: &LogProbs, use_split: bool) -> Vec<(usize, usize)> {
    let path = final_lp.argmax_path();
    if use_split {
        path.chunks_exact(2).map(|c| (c[0], c[1])).collect()
    } else {
        path.into_iter().map(|k| (k, BLANK)).collect()
    }
}

/// Paths of the two files making up a checkpoint with the given stem.
pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let with = |ext: &str| {
        let mut s = stem.as_os_str().to_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".umaw"), with(".conf"))
}

/// Writes `<stem>.umaw` and `<stem>.conf`. Both are staged as temporary files
/// before either is renamed into place.
pub fn save_checkpoint(stem: &Path, config: &ModelConfig, params: &ParamSet) -> Result<()> {
    let (weights, conf) = checkpoint_paths(stem);
    let staged = [
        (tmp_path(&weights), weights, encode_params(params)?),
        (tmp_path(&conf), conf, config.to_text().into_bytes()),
    ];
    for (tmp, _, bytes) in &staged {
        fs::write(tmp, bytes)?;
    }
    for (tmp, dst, _) in &staged {
        fs::rename(tmp, dst)?;
    }
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<(ModelConfig, ParamSet)> {
    let (weights, conf) = checkpoint_paths(stem);
    let config = ModelConfig::from_text(&fs::read_to_string(conf)?)?;
    let params = decode_params(&fs::read(weights)?)?;
    Model::new(config.clone())?.check_params(&params)?;
    Ok((config, params))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_param_gradients, param_fn, Coordinate};
    use rand::Rng;

    fn tiny(use_split: bool) -> ModelConfig {
        ModelConfig {
            feat_dim: 8,
            model_dim: 8,
            heads: 2,
            ffn_dim: 16,
            subsample_channels: 2,
            high_rate_layers: 2,
            low_rate_layers: 2,
            vocab_size: 4,
            conditioning_layers: vec![1, 2],
            low_rate_inter_layers: vec![1],
            use_split,
            use_self_conditioning: true,
            boundary: Boundary::Shared,
            dropout: 0.0,
        }
    }

    fn features(frames: usize, dim: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(frames, dim, data).unwrap()
    }

    #[test]
    fn default_conditioning_sites() {
        assert_eq!(ModelConfig::default_conditioning(4), vec![2, 3, 4]);
        assert_eq!(ModelConfig::default_conditioning(12), vec![6, 9, 12]);
        assert_eq!(ModelConfig::default_conditioning(1), vec![1]);
        assert_eq!(ModelConfig::default().num_intermediate(), 5);
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = tiny(false);
        cfg.boundary = Boundary::Right;
        cfg.dropout = 0.25;
        let back = ModelConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_layers() {
        assert!(ModelConfig::from_text("colour = red\n").is_err());
        assert!(ModelConfig::from_text("conditioning_layers = 3,9\n").is_err());
        assert!(ModelConfig::from_text("low_rate_inter_layers = 4,2\n").is_err());
        let cfg = ModelConfig::from_text("high_rate_layers = 8\n").unwrap();
        assert_eq!(cfg.conditioning_layers, vec![4, 6, 8]);
    }

    #[test]
    fn forward_shapes() {
        for split in [true, false] {
            let model = Model::new(tiny(split)).unwrap();
            let params = model.init_params(3);
            let tape = Tape::new();
            let scope = Scope::eval(&tape, &params);
            let out = model.forward(&scope, &features(40, 8, 1)).unwrap();
            assert_eq!(out.subsampled_frames, subsampled_len(40));
            let i = out.num_segments();
            assert_eq!(out.final_frames(), if split { 2 * i } else { i });
            let heads: Vec<_> = out.intermediates.iter().map(|i| i.head.as_str()).collect();
            assert_eq!(heads, ["high.1", "high.2", "low.1"]);
            assert_eq!(out.final_log_probs.shape(), vec![out.final_frames(), 5]);
            out.segmentation.check_invariants().unwrap();
        }
    }

    #[test]
    fn hundred_frames_bound_the_final_length() {
        let model = Model::new(tiny(true)).unwrap();
        let params = model.init_params(9);
        for seed in 0..5 {
            let inf = model.infer(&params, &features(100, 8, seed)).unwrap();
            assert_eq!(inf.subsampled_frames, 24);
            let i = inf.segmentation.num_segments();
            assert!((1..=24).contains(&i));
            assert_eq!(inf.final_log_probs.frames(), 2 * i);
        }
    }

    #[test]
    fn loss_combination_arithmetic() {
        assert_eq!(combine_losses(2.0, &[1.0, 1.0, 1.0, 3.0, 4.0]), (2.0, 2.0));
        assert_eq!(combine_losses(1.5, &[1.5; 5]), (1.5, 1.5));
    }

    #[test]
    fn total_loss_combines_heads() {
        let model = Model::new(tiny(true)).unwrap();
        let params = model.init_params(4);
        let target = TokenSeq::new(vec![1, 2]).unwrap();
        let feats = features(40, 8, 2);
        let tape = Tape::new();
        let scope = Scope::eval(&tape, &params);
        let out = model.forward(&scope, &feats).unwrap();
        let (total, b) = total_loss(&out, &target).unwrap();
        let finals = ctc::ctc_loss_value(&LogProbs::new(out.final_log_probs.to_tensor()).unwrap(), &target).unwrap();
        let inters: Vec<f64> = out
            .intermediates
            .iter()
            .map(|i| ctc::ctc_loss_value(&LogProbs::new(i.log_probs.to_tensor()).unwrap(), &target).unwrap())
            .collect();
        let expected = 0.5 * (finals + inters.iter().sum::<f64>() / 3.0);
        assert!((total.item() - expected).abs() < 1e-10);
        assert!((b.total - expected).abs() < 1e-10);

        let inf = model.infer(&params, &feats).unwrap();
        let b2 = inf.losses(&target).unwrap();
        assert!((b2.total - b.total).abs() < 1e-10);
        assert_eq!(b2.intermediate.len(), 3);
    }

    #[test]
    fn incomputable_final_head_is_reported_first() {
        let model = Model::new(tiny(false)).unwrap();
        let params = model.init_params(5);
        let target = TokenSeq::new((1..=4).cycle().take(40).collect()).unwrap();
        let err = model.infer(&params, &features(40, 8, 3)).unwrap().losses(&target).unwrap_err();
        match err {
            Error::CtcIncomputable { head, .. } => assert_eq!(head, FINAL_HEAD),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn end_to_end_gradient() {
        let model = Model::new(tiny(true)).unwrap();
        let params = model.init_params(6);
        let feats = features(30, 8, 4);
        let target = TokenSeq::new(vec![2, 1]).unwrap();
        let f = param_fn(|tape, p| {
            let scope = Scope::train(tape, p);
            let out = model.forward(&scope, &feats)?;
            Ok(total_loss(&out, &target)?.0)
        });
        let mut coords = Vec::new();
        for name in ["subsample.conv1.weight", "high.1.attn.qkv.weight", "uma.w1.weight", "split.ffn.w2.weight", "ctc.head.weight", "ctc.back_proj.weight", "low.2.ffn.w1.weight"] {
            for index in [0, 3] {
                coords.push(Coordinate { name: name.into(), index });
            }
        }
        let err = check_param_gradients(f, &params, &coords, 1e-6).unwrap();
        assert!(err <= 1e-3, "{err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let cfg = tiny(true);
        let params = Model::new(cfg.clone()).unwrap().init_params(7);
        save_checkpoint(&stem, &cfg, &params).unwrap();
        let (cfg2, params2) = load_checkpoint(&stem).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(params2, params);
    }

    #[test]
    fn checkpoint_layout_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let params = Model::new(tiny(true)).unwrap().init_params(7);
        let mut other = tiny(true);
        other.low_rate_layers = 3;
        save_checkpoint(&stem, &other, &params).unwrap();
        assert!(load_checkpoint(&stem).is_err());
    }

    #[test]
    fn slot_outcomes_pair_rows() {
        let rows: Vec<Vec<f64>> = [[0.1, 0.8, 0.1], [0.7, 0.2, 0.1], [0.1, 0.1, 0.8], [0.1, 0.8, 0.1]]
            .iter()
            .map(|r| r.iter().map(|p: &f64| p.ln()).collect())
            .collect();
        let lp = LogProbs::new(Tensor::from_rows(&rows).unwrap()).unwrap();
        assert_eq!(slot_outcomes(&lp, true), vec![(1, 0), (2, 1)]);
        assert_eq!(slot_outcomes(&lp, false), vec![(1, 0), (0, 0), (2, 0), (1, 0)]);
    }
}

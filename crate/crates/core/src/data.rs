//! Synthetic utterances with known token spans, and the `UMAD` dataset file.
//!
//! Each utterance is a run of "syllables". A syllable carries one token, or
//! with probability `pair_prob` two distinct tokens sharing one acoustic span.
//! Its frames are the (mean) token embedding plus Gaussian noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::binfmt::{write_atomic, ByteReader, ByteWriter};
use crate::ctc::TokenSeq;
use crate::error::{Error, Result};
use crate::kv::{format_range, parse_range, KvMap};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"UMAD";
pub const DATASET_VERSION: u32 = 1;

/// Input frame shift in seconds, used to turn frame counts into durations.
pub const FRAME_SHIFT: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Non-blank tokens, with ids `1..=vocab_size`.
    pub vocab_size: usize,
    /// Inclusive range of input frames per syllable.
    pub frames_per_token: (usize, usize),
    /// Inclusive range of target tokens per utterance.
    pub tokens_per_utt: (usize, usize),
    pub feat_dim: usize,
    pub noise_std: f64,
    pub pair_prob: f64,
    /// Seed of the frozen token embeddings.
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 30,
            frames_per_token: (16, 24),
            tokens_per_utt: (4, 8),
            feat_dim: 8,
            noise_std: 0.1,
            pair_prob: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.frames_per_token;
        if lo < 1 || hi < lo {
            return Err(Error::invalid(format!("frames per token {lo}:{hi} needs 1 <= lo <= hi")));
        }
        let (lo, hi) = self.tokens_per_utt;
        if lo < 1 || hi < lo {
            return Err(Error::invalid(format!("tokens per utterance {lo}:{hi} needs 1 <= lo <= hi")));
        }
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocab_size must be at least 2"));
        }
        if self.pair_prob > 0.0 && self.vocab_size < 3 {
            return Err(Error::invalid("pairs need vocab_size of at least 3"));
        }
        if self.feat_dim == 0 {
            return Err(Error::invalid("feat_dim must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        if !(0.0..=1.0).contains(&self.pair_prob) {
            return Err(Error::invalid(format!("pair_prob {} outside [0, 1]", self.pair_prob)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.insert("vocab", self.vocab_size);
        kv.insert("frames_per_token", format_range(self.frames_per_token));
        kv.insert("tokens", format_range(self.tokens_per_utt));
        kv.insert("feat_dim", self.feat_dim);
        kv.insert("noise_std", self.noise_std);
        kv.insert("pair_prob", self.pair_prob);
        kv.insert("vocab_seed", self.seed);
        kv
    }

    /// Applies any recognised keys from `kv`, removing them.
    pub fn apply_kv(&mut self, kv: &mut KvMap) -> Result<()> {
        kv.take("vocab", &mut self.vocab_size)?;
        if let Some(raw) = kv.remove("frames_per_token") {
            self.frames_per_token = parse_range(&raw)?;
        }
        if let Some(raw) = kv.remove("tokens") {
            self.tokens_per_utt = parse_range(&raw)?;
        }
        kv.take("feat_dim", &mut self.feat_dim)?;
        kv.take("noise_std", &mut self.noise_std)?;
        kv.take("pair_prob", &mut self.pair_prob)?;
        kv.take("vocab_seed", &mut self.seed)?;
        Ok(())
    }
}

/// Frames `start..=end` (1-based) carrying one or two tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Span {
    pub tokens: Vec<usize>,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn frames(&self) -> usize {
        self.end + 1 - self.start
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Tensor,
    pub tokens: TokenSeq,
    pub spans: Vec<Span>,
}

impl Sample {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    /// Duration in seconds.
    pub fn duration(&self) -> f64 {
        self.frames() as f64 * FRAME_SHIFT
    }

    /// Spans tile `1..=T` in order and their tokens concatenate to `tokens`.
    pub fn check_spans(&self) -> Result<()> {
        let mut next = 1;
        let mut ids = Vec::with_capacity(self.tokens.len());
        for s in &self.spans {
            if s.start != next || s.end < s.start || !(1..=2).contains(&s.tokens.len()) {
                return Err(Error::invalid(format!("span {s:?} does not continue at frame {next}")));
            }
            ids.extend_from_slice(&s.tokens);
            next = s.end + 1;
        }
        if next != self.frames() + 1 {
            return Err(Error::invalid(format!(
                "spans cover {} of {} frames",
                next - 1,
                self.frames()
            )));
        }
        if ids != self.tokens.as_slice() {
            return Err(Error::invalid("span tokens differ from the target"));
        }
        Ok(())
    }
}

/// Sample source for one configuration; holds the frozen embeddings.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: SynthConfig,
    /// Row `k - 1` embeds token `k`.
    embeddings: Vec<Vec<f64>>,
}

impl Generator {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let embeddings = (0..cfg.vocab_size)
            .map(|_| {
                let v: Vec<f64> = (0..cfg.feat_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        Ok(Self { cfg, embeddings })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn embedding(&self, token: usize) -> &[f64] {
        &self.embeddings[token - 1]
    }

    /// Draws a token different from `avoid`.
    fn draw_token(&self, rng: &mut ChaCha8Rng, avoid: &[usize]) -> usize {
        loop {
            let t = rng.random_range(1..=self.cfg.vocab_size);
            if !avoid.contains(&t) {
                return t;
            }
        }
    }

    pub fn sample(&self, seed: u64) -> Sample {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(cfg.tokens_per_utt.0..=cfg.tokens_per_utt.1);
        let noise = Normal::new(0.0, cfg.noise_std).expect("validated noise_std");

        let mut tokens = Vec::with_capacity(n);
        let mut spans = Vec::new();
        let mut rows: Vec<f64> = Vec::new();
        let mut frame = 1;
        while tokens.len() < n {
            let prev: Vec<usize> = tokens.last().copied().into_iter().collect();
            let pair = n - tokens.len() >= 2 && rng.random::<f64>() < cfg.pair_prob;
            let mut syl = vec![self.draw_token(&mut rng, &prev)];
            if pair {
                let mut avoid = prev.clone();
                avoid.push(syl[0]);
                syl.push(self.draw_token(&mut rng, &avoid));
                syl.sort_unstable();
            }
            let len = rng.random_range(cfg.frames_per_token.0..=cfg.frames_per_token.1);
            let centre: Vec<f64> = (0..cfg.feat_dim)
                .map(|d| syl.iter().map(|&t| self.embedding(t)[d]).sum::<f64>() / syl.len() as f64)
                .collect();
            for _ in 0..len {
                rows.extend(centre.iter().map(|c| c + noise.sample(&mut rng)));
            }
            spans.push(Span {
                tokens: syl.clone(),
                start: frame,
                end: frame + len - 1,
            });
            frame += len;
            tokens.extend(syl);
        }
        let t = frame - 1;
        Sample {
            features: Tensor::matrix(t, cfg.feat_dim, rows).expect("rows match frame count"),
            tokens: TokenSeq::new(tokens).expect("synthetic ids are non-blank"),
            spans,
        }
    }

    /// `count` samples; sample `i` depends only on `(seed, i)`.
    pub fn dataset(&self, count: usize, seed: u64) -> Vec<Sample> {
        (0..count).map(|i| self.sample(sample_seed(seed, i))).collect()
    }
}

/// Per-sample seed derived from a dataset seed.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.random()
}

pub fn generate_sample(cfg: &SynthConfig, seed: u64) -> Result<Sample> {
    Ok(Generator::new(cfg.clone())?.sample(seed))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} exceeds u32")))
}

pub fn encode_dataset(samples: &[Sample]) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.len(samples.len())?;
    for s in samples {
        let (t, f) = s.features.dims2()?;
        w.len(t)?;
        w.len(f)?;
        w.f64s(s.features.data());
        w.len(s.tokens.len())?;
        for &id in s.tokens.as_slice() {
            w.u32(to_u32(id, "token id")?);
        }
        w.len(s.spans.len())?;
        for span in &s.spans {
            w.len(span.tokens.len())?;
            for &id in &span.tokens {
                w.u32(to_u32(id, "token id")?);
            }
            w.len(span.start)?;
            w.len(span.end)?;
        }
    }
    Ok(w.into_inner())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Sample>> {
    let mut r = ByteReader::new(bytes);
    r.header(DATASET_MAGIC, DATASET_VERSION)?;
    let count = r.usize()?;
    let mut samples = Vec::new();
    for _ in 0..count {
        let at = r.offset();
        let t = r.usize()?;
        let f = r.usize()?;
        let n = t
            .checked_mul(f)
            .ok_or_else(|| r.error("feature matrix size overflows"))?;
        let features = Tensor::matrix(t, f, r.f64s(n)?)?;
        let ntok = r.usize()?;
        let ids = (0..ntok).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let tokens = TokenSeq::new(ids).map_err(|e| r.error(e.to_string()))?;
        let nspans = r.usize()?;
        let mut spans = Vec::new();
        for _ in 0..nspans {
            let k = r.usize()?;
            let tokens = (0..k).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let start = r.usize()?;
            let end = r.usize()?;
            spans.push(Span { tokens, start, end });
        }
        let sample = Sample { features, tokens, spans };
        sample.check_spans().map_err(|e| Error::Format {
            offset: at,
            msg: format!("record {}: {e}", samples.len()),
        })?;
        samples.push(sample);
    }
    if !r.is_at_end() {
        return Err(r.error("trailing bytes after last record"));
    }
    Ok(samples)
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    write_atomic(path, &encode_dataset(samples)?)
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    decode_dataset(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SynthConfig {
        SynthConfig {
            vocab_size: 6,
            frames_per_token: (2, 5),
            tokens_per_utt: (3, 7),
            feat_dim: 4,
            noise_std: 0.3,
            pair_prob: 0.5,
            seed: 11,
        }
    }

    #[test]
    fn noiseless_spans_are_constant() {
        let g = Generator::new(SynthConfig {
            noise_std: 0.0,
            pair_prob: 0.0,
            ..cfg()
        })
        .unwrap();
        let s = g.sample(3);
        for span in &s.spans {
            let first = s.features.row(span.start - 1).to_vec();
            for f in span.start..=span.end {
                assert_eq!(s.features.row(f - 1), first.as_slice());
            }
            assert_eq!(first, g.embedding(span.tokens[0]));
        }
    }

    #[test]
    fn fixed_lengths() {
        let s = generate_sample(
            &SynthConfig {
                frames_per_token: (4, 4),
                tokens_per_utt: (5, 5),
                pair_prob: 0.0,
                ..cfg()
            },
            0,
        )
        .unwrap();
        assert_eq!(s.frames(), 20);
        assert_eq!(s.tokens.len(), 5);
    }

    #[test]
    fn same_seed_same_sample() {
        let a = generate_sample(&cfg(), 42).unwrap();
        let b = generate_sample(&cfg(), 42).unwrap();
        assert_eq!(a, b);
        let bits = |s: &Sample| s.features.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a, generate_sample(&cfg(), 43).unwrap());
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let g = Generator::new(cfg()).unwrap();
        for k in 1..=6 {
            let n: f64 = g.embedding(k).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pairs_and_structure() {
        let g = Generator::new(SynthConfig { pair_prob: 1.0, ..cfg() }).unwrap();
        for s in g.dataset(50, 1) {
            s.check_spans().unwrap();
            let ids = s.tokens.as_slice();
            assert!(ids.windows(2).all(|w| w[0] != w[1]));
            // every span but possibly the last holds a pair
            for span in &s.spans[..s.spans.len() - 1] {
                assert_eq!(span.tokens.len(), 2);
            }
        }
    }

    #[test]
    fn dataset_round_trip() {
        let samples = Generator::new(cfg()).unwrap().dataset(10, 5);
        let bytes = encode_dataset(&samples).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), samples);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.umad");
        write_dataset(&path, &samples).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), samples);
    }

    #[test]
    fn empty_dataset() {
        let bytes = encode_dataset(&[]).unwrap();
        assert_eq!(bytes.len(), 12);
        assert!(decode_dataset(&bytes).unwrap().is_empty());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let samples = Generator::new(cfg()).unwrap().dataset(2, 5);
        let mut bytes = encode_dataset(&samples).unwrap();
        let cut = bytes.len() - 3;
        match decode_dataset(&bytes[..cut]).unwrap_err() {
            Error::Format { offset, .. } => assert!(offset > 12 && offset <= cut as u64),
            other => panic!("{other}"),
        }
        bytes[0] = b'X';
        assert!(decode_dataset(&bytes).unwrap_err().is_format());
    }

    #[test]
    fn config_kv_round_trip() {
        let mut kv = cfg().to_kv();
        let mut back = SynthConfig::default();
        back.apply_kv(&mut kv).unwrap();
        assert!(kv.is_empty());
        assert_eq!(back, cfg());
    }

    #[test]
    fn invalid_configs() {
        assert!(Generator::new(SynthConfig { frames_per_token: (0, 3), ..cfg() }).is_err());
        assert!(Generator::new(SynthConfig { frames_per_token: (4, 3), ..cfg() }).is_err());
        assert!(Generator::new(SynthConfig { pair_prob: 1.5, ..cfg() }).is_err());
    }
}

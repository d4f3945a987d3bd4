use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use umasplit::ctc::ctc_loss_value;
use umasplit::data::{Generator, SynthConfig};
use umasplit::model::{Model, ModelConfig};
use umasplit::uma::{find_valleys, Boundary};
use umasplit::{LogProbs, Tensor, TokenSeq};

fn random_log_probs(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> LogProbs {
    let data = (0..frames * classes).map(|_| rng.random_range(-3.0..3.0)).collect();
    LogProbs::from_logits(&Tensor::matrix(frames, classes, data).unwrap()).unwrap()
}

fn ctc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lp = random_log_probs(&mut rng, 200, 31);
    let target = TokenSeq::new((0..40).map(|i| 1 + i % 30).collect()).unwrap();
    c.bench_function("ctc_loss T=200 U=40", |b| b.iter(|| ctc_loss_value(&lp, &target).unwrap()));
}

fn valleys(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    c.bench_function("find_valleys T=1000", |b| {
        b.iter_batched(
            || (0..1000).map(|_| rng.random::<f64>()).collect::<Vec<_>>(),
            |alpha| find_valleys(&alpha, Boundary::Shared),
            BatchSize::SmallInput,
        )
    });
}

fn forward(c: &mut Criterion) {
    let cfg = ModelConfig { feat_dim: 16, model_dim: 32, ffn_dim: 64, subsample_channels: 4, ..ModelConfig::default() };
    let model = Model::new(cfg).unwrap();
    let params = model.init_params(0);
    let data = SynthConfig { feat_dim: 16, ..SynthConfig::default() };
    let sample = Generator::new(data).unwrap().sample(3);
    c.bench_function("inference, one utterance", |b| {
        b.iter(|| model.infer(&params, &sample.features).unwrap())
    });
}

criterion_group!(benches, ctc, valleys, forward);
criterion_main!(benches);

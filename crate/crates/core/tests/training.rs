use umasplit::data::{Generator, SynthConfig};
use umasplit::model::{Model, ModelConfig};
use umasplit::train::{train, TrainConfig};

fn window_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn loss_falls_on_the_well_posed_regime() {
    let gen = Generator::new(SynthConfig { vocab_size: 8, feat_dim: 8, ..SynthConfig::default() }).unwrap();
    let data = gen.dataset(64, 1);
    let val = gen.dataset(8, 2);
    let model = Model::new(ModelConfig {
        model_dim: 16,
        ffn_dim: 32,
        subsample_channels: 2,
        low_rate_layers: 4,
        vocab_size: 8,
        dropout: 0.0,
        ..ModelConfig::default()
    })
    .unwrap();
    for seed in 0..2 {
        let cfg = TrainConfig { steps: 120, batch: 4, base_lr: 0.05, warmup: 30, val_every: 60, seed, ..TrainConfig::default() };
        let out = train(&model, model.init_params(seed), &data, &val, &cfg, |_| {}).unwrap();
        let losses: Vec<f64> = out.records.iter().filter_map(|r| r.losses.map(|l| l.0)).collect();
        assert!(losses.len() >= 100, "too many skipped steps");
        let (first, last) = (window_mean(&losses[..20]), window_mean(&losses[losses.len() - 20..]));
        assert!(last < 0.8 * first, "seed {seed}: {first} -> {last}");
    }
}

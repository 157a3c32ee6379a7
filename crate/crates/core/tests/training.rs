use bacap::data::{build_vocab, encode_caption, tokenize, Sample};
use bacap::encoder::FeatureSequence;
use bacap::numerics::Rng;
use bacap::training::{train, ModelConfig, ModelParams, TrainConfig};

fn one_sample(seed: u64) -> (ModelParams, Sample) {
    let vocab = build_vocab(&["walk then run"], 1).unwrap();
    let mut rng = Rng::new(seed);
    let frames = (0..6)
        .map(|_| (0..4).map(|_| rng.normal()).collect::<Vec<_>>().into())
        .collect();
    let reference = tokenize("walk then run");
    let sample = Sample {
        features: FeatureSequence::new("only", frames).unwrap(),
        caption: encode_caption(&vocab, &reference),
        reference,
        boundaries: None,
    };
    let cfg = ModelConfig {
        input_dim: 4,
        embed_dim: 4,
        hidden_dim: 4,
        word_dim: 4,
        vocab_size: vocab.len(),
    };
    (ModelParams::init(&cfg, &mut rng).unwrap(), sample)
}

#[test]
fn single_sample_loss_decreases() {
    let mut decreasing = 0;
    for seed in 0..20 {
        let (model, sample) = one_sample(seed);
        let cfg = TrainConfig {
            batch_size: 1,
            dropout_retain: 1.0,
            max_epochs: 5,
            patience: 5,
            seed,
            ..Default::default()
        };
        let data = [sample];
        let run = train(model, &cfg, &data, &data, None).unwrap();
        let losses: Vec<f64> = run.log.iter().map(|r| r.train_loss).collect();
        if losses.len() == 5 && losses.windows(2).all(|w| w[1] < w[0]) {
            decreasing += 1;
        }
    }
    assert!(decreasing >= 19, "{decreasing}/20 seeds decreased");
}

use twmark::field::Precision;
use twmark::flsim::{self, DatasetConfig, MlpShape};
use twmark::protocol::{self, MlpTrainer, ProtocolConfig};
use twmark::seed;

#[test]
fn single_client_fedavg_is_centralized_training() {
    let shape = MlpShape::default();
    let ds = flsim::gen_dataset(&DatasetConfig { n: 4096, k: 1, n_test: 256, n_aux: 16, ..Default::default() }).unwrap();
    let trainer = MlpTrainer::new(shape, &ds.shards, None, 5);
    let cfg = ProtocolConfig { k: 1, t: 1, rounds: 6, c: 0.0, seed: 5, ..Default::default() };
    let precision = Precision::default();
    let theta0 = protocol::initial_model(&shape, 5);
    let fed = protocol::run_fedavg(&cfg, &precision, theta0.clone(), &trainer).unwrap();

    // Centralized oracle: the same optimizer, batches and model quantization, no protocol.
    let codec = precision.model_codec();
    let mut theta = theta0;
    for round in 1..=cfg.rounds {
        let mut rng = seed::stream(5, "local-train", &[1, round]);
        flsim::local_train(&shape, &mut theta, &ds.shards[0], &trainer.train, &mut rng).unwrap();
        theta = codec.decode_centered(&codec.encode(&theta).unwrap());
        let fed_theta = &fed.trajectory[round as usize].theta;
        assert!(
            theta.iter().zip(fed_theta).all(|(a, b)| a.to_bits() == b.to_bits()),
            "round {round} differs"
        );
    }
}

#[test]
fn smoothed_training_loss_decreases_early() {
    let shape = MlpShape::default();
    let ds = flsim::gen_dataset(&DatasetConfig::default()).unwrap();
    let trainer = MlpTrainer::new(shape, &ds.shards, None, 0);
    let cfg = ProtocolConfig { rounds: 29, c: 0.0, ..Default::default() };
    let out = protocol::run_fedavg(&cfg, &Precision::default(), protocol::initial_model(&shape, 0), &trainer).unwrap();
    let losses: Vec<f64> = out.metrics.iter().map(|m| m.mean_train_loss).collect();
    // Window-10 moving average over the first 20 rounds.
    let smooth: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    assert_eq!(smooth.len(), 20);
    for (i, w) in smooth.windows(2).enumerate() {
        assert!(w[1] < w[0], "smoothed loss rose at window {i}: {} -> {}", w[0], w[1]);
    }
}

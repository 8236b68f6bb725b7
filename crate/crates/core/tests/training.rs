use mdgnn::channel::{generate_channel, SystemConfig};
use mdgnn::model::{Family, HeadKind, Model, ModelConfig};
use mdgnn::train::{evaluate, init_params, test_set, train, write_history, Sampler, TrainConfig};

fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

#[test]
fn fixed_channel_reward_trends_upward() {
    let sys = SystemConfig::new(4, 2, 2);
    let model = Model::new(ModelConfig::new(Family::EdgeMdgnn, HeadKind::Precoding, "2D-GNN-L-K", 8, 2, &sys).unwrap(), sys.clone()).unwrap();
    let real = generate_channel(&sys, 0.0, 3).unwrap();
    let cfg = TrainConfig {
        steps: 500,
        batch_size: 1,
        seed: 5,
        ..TrainConfig::default()
    };
    let out = train(&model, init_params(&model, &cfg), &Sampler::Fixed(Box::new(real)), &cfg).unwrap();
    let rewards: Vec<f64> = out.history.iter().map(|r| r.reward).collect();
    assert!(slope(&rewards) > 0.0);
    assert!(rewards[450..].iter().sum::<f64>() > rewards[..50].iter().sum::<f64>());
}

#[test]
fn trained_model_beats_its_initialization() {
    let sys = SystemConfig::new(4, 2, 2);
    let model = Model::new(ModelConfig::new(Family::EibMdgnn, HeadKind::Precoding, "3D-GNN-L-K-U", 8, 2, &sys).unwrap(), sys.clone()).unwrap();
    let cfg = TrainConfig {
        steps: 300,
        batch_size: 4,
        seed: 2,
        ..TrainConfig::default()
    };
    let init = init_params(&model, &cfg);
    let set = test_set(&sys, 0.1, 50, 9).unwrap();
    let before = evaluate(&model, &init, &set, 0).unwrap().mean_se;
    let out = train(&model, init, &Sampler::Fresh { sigma_i_sq: 0.1 }, &cfg).unwrap();
    let after = evaluate(&model, &out.params, &set, 0).unwrap().mean_se;
    assert!(after > before, "{before} -> {after}");
    let mut csv = Vec::new();
    write_history(&out.history, &mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 301);
}

#[test]
fn checkpoint_reproduces_predictions() {
    let sys = SystemConfig::new(3, 2, 2);
    let model = Model::new(ModelConfig::new(Family::EgibBern, HeadKind::Precoding, "2D-GNN-L-K", 4, 2, &sys).unwrap(), sys.clone()).unwrap();
    let cfg = TrainConfig { steps: 5, batch_size: 2, ..TrainConfig::default() };
    let out = train(&model, init_params(&model, &cfg), &Sampler::Fresh { sigma_i_sq: 0.1 }, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&out.params, std::fs::File::create(&path).unwrap()).unwrap();
    let (m2, p2) = Model::load(std::fs::File::open(&path).unwrap()).unwrap();
    let set = test_set(&sys, 0.1, 10, 1).unwrap();
    assert_eq!(evaluate(&model, &out.params, &set, 3).unwrap(), evaluate(&m2, &p2, &set, 3).unwrap());
}

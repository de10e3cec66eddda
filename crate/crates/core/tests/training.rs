use mactr::checkpoint::encode;
use mactr::cli::run_ab_experiment;
use mactr::data::{generate_synthetic, SyntheticConfig};
use mactr::eval::{auc, evaluate_model, ScoredSet};
use mactr::model::ModelKind;
use mactr::train::{train_on_slice, TrainConfig};

fn small_config(kind: ModelKind) -> TrainConfig {
    TrainConfig {
        model_kind: kind,
        embedding_dim: 8,
        layer_dims: vec![32, 16],
        memory_dim: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn prediction_loss_falls_over_the_first_hundred_batches() {
    let data = generate_synthetic(&SyntheticConfig {
        impressions: 100 * 128 + 10,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let train: Vec<_> = data.impressions[..100 * 128]
        .iter()
        .map(|i| i.record.to_instance(&data.schema))
        .collect();
    for kind in ModelKind::ALL {
        let (_, reports) = train_on_slice(&small_config(kind), &data.schema, &train).unwrap();
        assert_eq!(reports.len(), 100);
        let mean = |r: &[mactr::train::BatchReport]| {
            r.iter().map(|b| b.mean_loss1).sum::<f64>() / r.len() as f64
        };
        let (early, late) = (mean(&reports[..50]), mean(&reports[50..]));
        assert!(late < early, "{kind}: {early} -> {late}");
    }
}

#[test]
fn inert_memory_stays_close_to_plain_network() {
    let synth = SyntheticConfig {
        impressions: 60_000,
        ..SyntheticConfig::default()
    };
    let config = TrainConfig {
        alpha: 0.0,
        loss1_to_memory_input: false,
        ..small_config(ModelKind::MaDnn)
    };
    let r = run_ab_experiment(&synth, ModelKind::MaDnn, ModelKind::Dnn, &config).unwrap();
    assert!(r.auc_delta().abs() < 0.005, "{r:?}");
}

#[test]
fn true_probabilities_reach_the_analytic_optimum() {
    let cfg = SyntheticConfig::default();
    let data = generate_synthetic(&cfg).unwrap();
    let pairs: Vec<(f64, u8)> = data
        .test_impressions()
        .iter()
        .map(|i| (i.click_probability, i.record.label))
        .collect();
    let empirical = auc(&ScoredSet::from_pairs(&pairs)).unwrap();
    let analytic = cfg.bayes_optimal_auc();
    assert!(
        (empirical - analytic).abs() < 0.01,
        "{empirical} vs {analytic}"
    );
}

#[test]
fn evaluation_leaves_state_untouched() {
    let data = generate_synthetic(&SyntheticConfig {
        impressions: 5_000,
        num_buckets: 1 << 14,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let config = TrainConfig {
        num_buckets: 1 << 14,
        ..small_config(ModelKind::MaWd)
    };
    let (state, _) = train_on_slice(&config, &data.schema, &data.train_instances()).unwrap();
    let before = encode(&state);
    let test = data.test_instances();
    let first = evaluate_model(&state.params, &state.memory, test.iter().cloned().map(Ok)).unwrap();
    let second =
        evaluate_model(&state.params, &state.memory, test.iter().cloned().map(Ok)).unwrap();
    assert_eq!(encode(&state), before);
    assert_eq!(first, second);
}

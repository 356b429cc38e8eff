use relikin_core::data::{generate_corpus, split_subjects, Corpus, GeneratorConfig, Split, SplitManifest};
use relikin_core::model::{init_model, ModelConfig};
use relikin_core::training::{train, warm_start_heteroscedastic, Dataset, TrainingConfig};
use relikin_core::uncertainty::{predict, SamplerConfig};

fn tiny() -> (Corpus, SplitManifest, ModelConfig) {
    let config = GeneratorConfig {
        seed: 5,
        num_studies: 1,
        subjects_per_study: 4,
        frames_per_sequence: 16,
        clip_length: 8,
        split_ratios: [0.5, 0.25, 0.25],
        ..GeneratorConfig::default()
    };
    let corpus = generate_corpus(&config).unwrap();
    let splits = split_subjects(&corpus.samples, config.split_ratios, 0).unwrap();
    let model = ModelConfig {
        input_dim: 3 * config.keypoint_count(),
        landmark_count: config.landmark_count(),
        seq_len: 8,
        hidden_size: 6,
        ..ModelConfig::default()
    };
    (corpus, splits, model)
}

#[test]
fn zero_learning_rate_stops_after_patience() {
    let (corpus, splits, model) = tiny();
    let config = TrainingConfig {
        learning_rate: 0.0,
        patience: 3,
        batch_size: 2,
        ..TrainingConfig::default()
    };
    let init = init_model::<f64>(&model, 1).unwrap();
    let (tr, va) = (corpus.select(&splits, Split::Train), corpus.select(&splits, Split::Val));
    let (out, history) = train(init.clone(), &tr, &va, corpus.triplets(), &config).unwrap();
    assert_eq!(history.epochs.len(), 4);
    assert_eq!(history.best_epoch, 1);
    assert!(history.stopped_early);
    assert_eq!(out.layers, init.layers);
    assert_eq!(out.mean_head, init.mean_head);
    assert!(out.normalizer.is_some());
}

#[test]
fn single_epoch_and_history_rows() {
    let (corpus, splits, model) = tiny();
    let config = TrainingConfig {
        learning_rate: 1e-3,
        max_epochs: 1,
        batch_size: 2,
        ..TrainingConfig::default()
    };
    let init = init_model::<f64>(&model, 2).unwrap();
    let (tr, va) = (corpus.select(&splits, Split::Train), corpus.select(&splits, Split::Val));
    let (a, history) = train(init.clone(), &tr, &va, corpus.triplets(), &config).unwrap();
    assert_eq!(history.epochs.len(), 1);
    assert!(!history.stopped_early);
    assert_eq!(history.to_csv().lines().count(), 2);
    assert_ne!(a.layers, init.layers);
    let (b, _) = train(init, &tr, &va, corpus.triplets(), &config).unwrap();
    assert_eq!(a, b);
}

#[test]
fn leaking_splits_are_rejected() {
    let (corpus, splits, model) = tiny();
    let tr = corpus.select(&splits, Split::Train);
    let init = init_model::<f64>(&model, 3).unwrap();
    assert!(train(init, &tr, &tr, corpus.triplets(), &TrainingConfig::default()).is_err());
}

#[test]
fn warm_start_keeps_the_mean_prediction() {
    let (corpus, splits, model) = tiny();
    let config = TrainingConfig {
        max_epochs: 1,
        batch_size: 2,
        ..TrainingConfig::default()
    };
    let init = init_model::<f64>(&model, 4).unwrap();
    let (tr, va) = (corpus.select(&splits, Split::Train), corpus.select(&splits, Split::Val));
    let (base, _) = train(init, &tr, &va, corpus.triplets(), &config).unwrap();
    let hetero = warm_start_heteroscedastic(&base, &model, 9).unwrap();
    assert!(hetero.config.heteroscedastic);
    let data = Dataset::<f64>::from_samples(&corpus.select(&splits, Split::Test)).unwrap();
    let a = base.forward(&data.inputs, false, 0).unwrap();
    let b = hetero.forward(&data.inputs, false, 0).unwrap();
    assert_eq!(a.mean, b.mean);
    assert!(b.log_var.is_some());
    let sampler = SamplerConfig {
        num_samples: 3,
        ..SamplerConfig::default()
    };
    assert_eq!(
        predict(&base, &data.inputs, &sampler, 4).unwrap().mean,
        predict(&hetero, &data.inputs, &sampler, 4).unwrap().mean
    );
    assert!(warm_start_heteroscedastic(&hetero, &model, 9).is_err());
}

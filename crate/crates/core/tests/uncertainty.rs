use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relikin_core::model::{init_model, ModelConfig};
use relikin_core::uncertainty::{
    aleatoric_variance, epistemic_variance, frame_score, mc_sample, predict, sample_mean, total_variance, SamplerConfig,
};
use relikin_core::Tensor;

fn random(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi)).unwrap()
}

fn small() -> ModelConfig {
    ModelConfig {
        input_dim: 6,
        landmark_count: 3,
        seq_len: 5,
        hidden_size: 8,
        ..ModelConfig::default()
    }
}

#[test]
fn epistemic_matches_two_pass_oracle() {
    let (m, n) = (50, 40);
    let s = random(vec![m, n], 1, -2.0, 2.0);
    let got = epistemic_variance(&s).unwrap();
    for i in 0..n {
        let mean: f64 = (0..m).map(|k| s.data()[k * n + i]).sum::<f64>() / m as f64;
        let var: f64 = (0..m).map(|k| (s.data()[k * n + i] - mean).powi(2)).sum::<f64>() / m as f64;
        assert!((got.data()[i] - var).abs() < 1e-12);
        assert!((sample_mean(&s).unwrap().data()[i] - mean).abs() < 1e-12);
    }
}

#[test]
fn aleatoric_matches_mean_of_exp() {
    let (m, n) = (7, 30);
    let lv = random(vec![m, n], 2, -8.0, 1.0);
    let got = aleatoric_variance(&lv).unwrap();
    for i in 0..n {
        let want: f64 = (0..m).map(|k| lv.data()[k * n + i].exp()).sum::<f64>() / m as f64;
        assert!((got.data()[i] - want).abs() < 1e-12);
    }
    let zeros = Tensor::zeros(vec![3, 4]).unwrap();
    assert!(aleatoric_variance(&zeros).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn total_is_exact_sum() {
    let epi = random(vec![4, 3, 3], 3, 0.0, 1e-3);
    let ale = random(vec![4, 3, 3], 4, 0.0, 1e-3);
    let total = total_variance(&epi, Some(&ale)).unwrap();
    for ((t, e), a) in total.data().iter().zip(epi.data()).zip(ale.data()) {
        assert_eq!(*t, e + a);
    }
    assert_eq!(total_variance(&epi, None).unwrap(), epi);
}

#[test]
fn frame_score_matches_masked_loop() {
    let v = random(vec![6, 4, 3], 5, 0.0, 1.0);
    let validity = [true, false, true, true];
    let got = frame_score(&v, &validity).unwrap();
    for (t, g) in got.iter().enumerate() {
        let mut sum = 0.0;
        let mut count = 0.0;
        for (l, &ok) in validity.iter().enumerate() {
            if ok {
                for d in 0..3 {
                    sum += v.at(&[t, l, d]);
                    count += 1.0;
                }
            }
        }
        assert!((g - sum / count).abs() < 1e-12);
    }
    let constant = Tensor::full(vec![2, 4, 3], 0.25).unwrap();
    assert_eq!(frame_score(&constant, &validity).unwrap(), vec![0.25, 0.25]);
}

#[test]
fn zero_rate_gives_identical_passes_and_the_deterministic_mean() {
    let params = init_model::<f64>(&small(), 1).unwrap();
    let x = random(vec![2, 5, 6], 6, -1.0, 1.0);
    let sampler = SamplerConfig {
        num_samples: 4,
        dropout_rate: 0.0,
        ..SamplerConfig::default()
    };
    let s = mc_sample(&params, &x, &sampler).unwrap();
    let per = s.means.len() / 4;
    for k in 1..4 {
        assert_eq!(&s.means.data()[k * per..(k + 1) * per], &s.means.data()[..per]);
    }
    let pred = predict(&params, &x, &sampler, 1).unwrap();
    assert_eq!(pred.mean, params.forward(&x, false, 0).unwrap().mean);
    assert!(pred.epi.data().iter().all(|&v| v == 0.0));
}

#[test]
fn sampling_is_seeded_and_passes_differ() {
    let params = init_model::<f64>(&small().with_heteroscedastic(true), 2).unwrap();
    let x = random(vec![1, 5, 6], 7, -1.0, 1.0);
    let sampler = SamplerConfig::default();
    let a = mc_sample(&params, &x, &sampler).unwrap();
    let b = mc_sample(&params, &x, &sampler).unwrap();
    assert_eq!(a, b);
    assert!(a.log_vars.is_some());
    let per = a.means.len() / 50;
    let passes: Vec<&[f64]> = a.means.data().chunks(per).collect();
    for i in 0..passes.len() {
        for j in i + 1..passes.len() {
            assert_ne!(passes[i], passes[j], "passes {i} and {j} coincide");
        }
    }
}

#[test]
fn fewer_than_two_samples_is_an_error() {
    let params = init_model::<f64>(&small(), 1).unwrap();
    let x = random(vec![1, 5, 6], 8, -1.0, 1.0);
    let sampler = SamplerConfig {
        num_samples: 1,
        ..SamplerConfig::default()
    };
    assert!(mc_sample(&params, &x, &sampler).is_err());
}

#[test]
fn batching_does_not_change_single_clip_results_for_deterministic_passes() {
    let params = init_model::<f64>(&small(), 3).unwrap();
    let x = random(vec![3, 5, 6], 9, -1.0, 1.0);
    let sampler = SamplerConfig {
        dropout_rate: 0.0,
        num_samples: 2,
        ..SamplerConfig::default()
    };
    let whole = predict(&params, &x, &sampler, 3).unwrap();
    let split = predict(&params, &x, &sampler, 2).unwrap();
    assert_eq!(whole.mean, split.mean);
}

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relikin_core::data::{check_disjoint, generate_corpus, split_subjects, GeneratorConfig, Split};
use relikin_core::reliability::degrade_inputs;
use relikin_core::Tensor;

#[test]
fn affine_toy_is_solved_exactly_by_least_squares() {
    let config = GeneratorConfig::affine_toy();
    let corpus = generate_corpus(&config).unwrap();
    let k = config.keypoint_count();
    let valid: Vec<usize> = (0..config.landmark_count())
        .filter(|&l| corpus.samples[0].landmark_validity[l])
        .collect();
    let frames: usize = corpus.samples.iter().map(|s| s.frames()).sum();
    let mut x = DMatrix::<f64>::zeros(frames, 3 * k + 1);
    let mut y = DMatrix::<f64>::zeros(frames, 3 * valid.len());
    let mut row = 0;
    for s in &corpus.samples {
        for t in 0..s.frames() {
            for j in 0..k {
                for d in 0..3 {
                    x[(row, 3 * j + d)] = s.keypoints.at(&[t, j, d]);
                }
            }
            x[(row, 3 * k)] = 1.0;
            for (c, &l) in valid.iter().enumerate() {
                for d in 0..3 {
                    y[(row, 3 * c + d)] = s.landmarks.at(&[t, l, d]);
                }
            }
            row += 1;
        }
    }
    let w = x.clone().svd(true, true).solve(&y, 1e-12).unwrap();
    let residual = (&x * w - &y).amax();
    assert!(residual < 1e-9, "max residual {residual} m");
}

#[test]
fn splits_never_share_a_subject() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let config = GeneratorConfig {
            seed: rng.gen(),
            num_studies: rng.gen_range(1..=5),
            subjects_per_study: rng.gen_range(1..=7),
            sequences_per_subject: rng.gen_range(1..=2),
            frames_per_sequence: 8,
            clip_length: 4,
            split_ratios: [
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.01..1.0),
            ],
            ..GeneratorConfig::default()
        };
        let corpus = generate_corpus(&config).unwrap();
        let splits = split_subjects(&corpus.samples, config.split_ratios, rng.gen()).unwrap();
        let subjects: std::collections::BTreeSet<&str> = corpus.samples.iter().map(|s| s.subject_id.as_str()).collect();
        assert_eq!(splits.assignments.len(), subjects.len());
        let parts: Vec<_> = Split::ALL.iter().map(|&s| corpus.select(&splits, s)).collect();
        assert_eq!(parts.iter().map(Vec::len).sum::<usize>(), corpus.samples.len());
        for a in 0..3 {
            for b in a + 1..3 {
                check_disjoint(&parts[a], "a", &parts[b], "b").unwrap();
                let (sa, sb) = (splits.subjects(Split::ALL[a]), splits.subjects(Split::ALL[b]));
                assert!(sa.is_disjoint(&sb));
            }
        }
    }
}

#[test]
fn degradation_has_the_requested_spread() {
    let clean = Tensor::zeros(vec![400, 20, 3]).unwrap();
    let noisy = degrade_inputs(&clean, 10.0, 7, None).unwrap();
    let n = noisy.len() as f64;
    let mean = noisy.data().iter().sum::<f64>() / n;
    let sd_mm = 1000.0 * (noisy.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((9.9..=10.1).contains(&sd_mm), "{sd_mm}");
    assert!(mean.abs() * 1000.0 < 0.2);
    assert_eq!(degrade_inputs(&clean, 10.0, 7, None).unwrap(), noisy);
    assert_ne!(degrade_inputs(&clean, 10.0, 8, None).unwrap(), noisy);
    assert_eq!(degrade_inputs(&noisy, 0.0, 7, None).unwrap(), noisy);
}

#[test]
fn masked_keypoints_stay_clean() {
    let clean = Tensor::full(vec![5, 4, 3], 0.5).unwrap();
    let valid = [true, false, true, false];
    let noisy = degrade_inputs(&clean, 20.0, 1, Some(&valid)).unwrap();
    for t in 0..5 {
        for (k, &ok) in valid.iter().enumerate() {
            for d in 0..3 {
                assert_eq!(noisy.at(&[t, k, d]) == 0.5, !ok);
            }
        }
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relikin_core::autodiff::grad_check;
use relikin_core::model::{init_model, ModelConfig, Normalizer};
use relikin_core::training::{composite_loss_node, LossWeights};
use relikin_core::{ModelParameters, Tensor};

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.gen_range(-1.0..1.0)).unwrap()
}

fn mini(landmarks: usize, seed: u64) -> (ModelParameters, Tensor, Tensor) {
    let config = ModelConfig {
        input_dim: 6,
        landmark_count: landmarks,
        seq_len: 4,
        hidden_size: 8,
        heteroscedastic: true,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = random(vec![2, 4, 6], &mut rng, 0.3);
    let targets = random(vec![2, 4, landmarks, 3], &mut rng, 0.2);
    let mut params = init_model::<f64>(&config, seed).unwrap();
    let validity = vec![true; landmarks];
    params.normalizer = Some(Normalizer::fit(&inputs, &targets, &validity).unwrap());
    (params, inputs, targets)
}

fn check(params: &ModelParameters, inputs: &Tensor, targets: &Tensor, triplets: &[[usize; 3]]) {
    let validity = vec![true; params.config.landmark_count];
    let weights = LossWeights::default();
    let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let report = grad_check(
        |g, ids| {
            let nodes = params.forward_nodes(g, ids, inputs, None)?;
            let target = g.constant(targets.clone());
            let (loss, _) = composite_loss_node(g, nodes.mean, nodes.log_var, target, &validity, triplets, &weights)?;
            Ok(loss)
        },
        &tensors,
        STEP,
        TOLERANCE,
    )
    .unwrap();
    assert!(report.passed(), "max relative error {}", report.max_rel_error);
    assert_eq!(report.params.len(), tensors.len());
    let total: usize = tensors.iter().map(|t| t.len()).sum();
    assert!(
        report.checked_count() * 10 >= total * 9,
        "too many exclusions: {}",
        report.excluded_count()
    );
}

#[test]
fn composite_loss_matches_central_differences() {
    let (params, inputs, targets) = mini(2, 3);
    check(&params, &inputs, &targets, &[]);
}

#[test]
fn angle_term_matches_central_differences() {
    let (params, inputs, targets) = mini(3, 4);
    check(&params, &inputs, &targets, &[[0, 1, 2]]);
}

#[test]
fn deterministic_head_matches_central_differences() {
    let (params, inputs, targets) = mini(2, 5);
    let params = ModelParameters {
        config: params.config.with_heteroscedastic(false),
        log_var_head: None,
        ..params
    };
    check(&params, &inputs, &targets, &[]);
}

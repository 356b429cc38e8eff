//! End-to-end acceptance run. Prints one line per criterion and exits
//! nonzero if any of them fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relikin_core::autodiff::grad_check;
use relikin_core::data::{check_disjoint, generate_corpus, split_subjects, GeneratorConfig, Split};
use relikin_core::model::{init_model, ModelConfig, Normalizer};
use relikin_core::reliability::{pr_auc, risk_coverage, roc_auc, spearman, spearman_permutation_p, Statistic};
use relikin_core::training::{composite_loss_node, LossWeights};
use relikin_core::uncertainty::{epistemic_variance, total_variance};
use relikin_core::Tensor;

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn relikin(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_relikin"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "relikin {}: {}",
            args[0],
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Columns of a CSV file keyed by header name.
fn columns(path: &Path) -> Result<BTreeMap<String, Vec<String>>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap_or_default().split(',').map(String::from).collect();
    let mut cols: BTreeMap<String, Vec<String>> = header.iter().map(|h| (h.clone(), Vec::new())).collect();
    for line in lines {
        for (h, v) in header.iter().zip(line.split(',')) {
            cols.get_mut(h).unwrap().push(v.to_string());
        }
    }
    Ok(cols)
}

fn numbers(cols: &BTreeMap<String, Vec<String>>, name: &str) -> Result<Vec<f64>, String> {
    cols.get(name)
        .ok_or(format!("missing column {name}"))?
        .iter()
        .map(|v| v.parse::<f64>().map_err(|e| format!("{name}={v}: {e}")))
        .collect()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).expect("config written");
    path
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let n = rng.gen_range(3..=64);
        let tied = i % 2 == 1;
        let draw = |rng: &mut ChaCha8Rng| {
            if tied {
                rng.gen_range(0..5) as f64
            } else {
                rng.gen::<f64>()
            }
        };
        let e: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let u: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        let pairs = [
            (
                spearman(&e, &u),
                oracles::pearson(&oracles::ranks(&e), &oracles::ranks(&u)),
            ),
            (roc_auc(&u, &labels), oracles::roc(&u, &labels)),
            (pr_auc(&u, &labels), oracles::pr(&u, &labels)),
        ];
        for (got, want) in pairs {
            match (got.map_err(|e| e.to_string())?, want) {
                (Statistic::Value(g), Some(w)) => worst = worst.max((g - w).abs()),
                (Statistic::Degenerate, None) => {}
                other => return Err(format!("instance {i}: {other:?}")),
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-9 && secs < 30.0,
        format!("max |diff| {worst:.1e}, {secs:.1} s"),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let config = ModelConfig {
        input_dim: 6,
        landmark_count: 2,
        seq_len: 4,
        hidden_size: 8,
        heteroscedastic: true,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::from_fn(vec![2, 4, 6], |_| rng.gen_range(-0.3..0.3)).unwrap();
    let y = Tensor::from_fn(vec![2, 4, 2, 3], |_| rng.gen_range(-0.2..0.2)).unwrap();
    let validity = [true, true];
    let mut params = init_model::<f64>(&config, 8).map_err(|e| e.to_string())?;
    params.normalizer = Some(Normalizer::fit(&x, &y, &validity).map_err(|e| e.to_string())?);
    let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let weights = LossWeights::default();
    let report = grad_check(
        |g, ids| {
            let nodes = params.forward_nodes(g, ids, &x, None)?;
            let target = g.constant(y.clone());
            Ok(composite_loss_node(g, nodes.mean, nodes.log_var, target, &validity, &[], &weights)?.0)
        },
        &tensors,
        1e-5,
        1e-4,
    )
    .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    check(
        report.passed() && secs < 60.0,
        format!(
            "max rel error {:.2e} over {} entries ({} at kinks), {secs:.1} s",
            report.max_rel_error,
            report.checked_count(),
            report.excluded_count()
        ),
    )
}

fn variance_decomposition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (m, n) = (rng.gen_range(2..60), rng.gen_range(1..200));
        let samples = Tensor::from_fn(vec![m, n], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let epi = epistemic_variance(&samples).map_err(|e| e.to_string())?;
        for i in 0..n {
            let col: Vec<f64> = (0..m).map(|k| samples.data()[k * n + i]).collect();
            let mean = col.iter().sum::<f64>() / m as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            worst = worst.max((epi.data()[i] - var).abs());
        }
        let ale = Tensor::from_fn(vec![n], |_| rng.gen_range(0.0..1e-3)).unwrap();
        let total = total_variance(&epi, Some(&ale)).map_err(|e| e.to_string())?;
        let exact = total
            .data()
            .iter()
            .zip(epi.data())
            .zip(ale.data())
            .all(|((t, e), a)| *t == e + a);
        if !exact {
            return Err("total differs from epi + ale".into());
        }
    }
    check(worst < 1e-12, format!("total exact, epi max |diff| {worst:.1e}"))
}

fn snapshot(dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>, root: &Path) {
    for entry in fs::read_dir(dir).expect("readable output dir") {
        let path = entry.unwrap().path();
        if path.is_dir() {
            snapshot(&path, out, root);
        } else if path.file_name().unwrap() != "run_manifest.json" {
            out.insert(path.strip_prefix(root).unwrap().into(), fs::read(&path).unwrap());
        }
    }
}

fn determinism(work: &Path) -> Outcome {
    let cfg = write_config(
        work,
        "small.toml",
        "[generator]\nseed = 4\nnum_studies = 2\nsubjects_per_study = 3\nframes_per_sequence = 40\nclip_length = 20\n\n\
         [training]\nmax_epochs = 2\nbatch_size = 2\nlearning_rate = 1e-3\n",
    );
    let d = |n: &str| work.join(n);
    let ckpt = d("hetero").join("checkpoint.txt");
    let base_ckpt = d("base").join("checkpoint.txt");
    let sampling = |out: &'static str| {
        vec![
            "--checkpoint".to_string(),
            s(&ckpt).into(),
            "--corpus".into(),
            s(&d("corpus")).into(),
            "--out".into(),
            s(&d(out)).into(),
            "--mc-samples".into(),
            "5".into(),
            "--uncertainty".into(),
            "total".into(),
        ]
    };
    relikin(&["generate", "--out", s(&d("corpus")), "--config", s(&cfg)])?;
    relikin(&[
        "train",
        "--corpus",
        s(&d("corpus")),
        "--out",
        s(&d("base")),
        "--config",
        s(&cfg),
        "--hidden-size",
        "8",
    ])?;
    relikin(&[
        "finetune-hetero",
        "--baseline",
        s(&base_ckpt),
        "--corpus",
        s(&d("corpus")),
        "--out",
        s(&d("hetero")),
        "--config",
        s(&cfg),
    ])?;
    let mut eval = vec!["eval".to_string()];
    eval.extend(sampling("eval"));
    relikin(&eval.iter().map(String::as_str).collect::<Vec<_>>())?;
    let mut sweep = vec!["sweep".to_string()];
    sweep.extend(sampling("sweep"));
    sweep.extend(["--outlier-quantile".into(), "0.9".into()]);
    relikin(&sweep.iter().map(String::as_str).collect::<Vec<_>>())?;

    let mut files = 0;
    for name in ["corpus", "base", "hetero", "eval", "sweep"] {
        let again = d(&format!("{name}.rerun"));
        relikin(&[
            "rerun",
            "--manifest",
            s(&d(name).join("run_manifest.json")),
            "--out",
            s(&again),
        ])?;
        let (mut a, mut b) = (BTreeMap::new(), BTreeMap::new());
        snapshot(&d(name), &mut a, &d(name));
        snapshot(&again, &mut b, &again);
        if a != b {
            return Err(format!("{name} outputs differ after rerun"));
        }
        files += a.len();
    }
    check(
        files > 0,
        format!("5 commands, {files} output files identical on rerun"),
    )
}

const TOY_TRAINING: &str = "[model]\nhidden_size = 64\n\n\
    [training]\nlearning_rate = 3e-3\nbatch_size = 4\nweight_decay = 0.0\nmax_epochs = 200\npatience = 200\n\
    train_dropout = false\n\n\
    [training.loss_weights]\nvel = 0.0\nacc = 0.0\nangle = 0.0\npos = 0.0\n";

fn least_squares_residual(config: &GeneratorConfig) -> f64 {
    let corpus = generate_corpus(config).expect("toy corpus");
    let k = config.keypoint_count();
    let valid: Vec<usize> = (0..config.landmark_count())
        .filter(|&l| corpus.samples[0].landmark_validity[l])
        .collect();
    let rows: usize = corpus.samples.iter().map(|c| c.frames()).sum();
    let mut x = DMatrix::<f64>::zeros(rows, 3 * k + 1);
    let mut y = DMatrix::<f64>::zeros(rows, 3 * valid.len());
    let mut r = 0;
    for c in &corpus.samples {
        for t in 0..c.frames() {
            for j in 0..3 * k {
                x[(r, j)] = c.keypoints.at(&[t, j / 3, j % 3]);
            }
            x[(r, 3 * k)] = 1.0;
            for (i, &l) in valid.iter().enumerate() {
                for d in 0..3 {
                    y[(r, 3 * i + d)] = c.landmarks.at(&[t, l, d]);
                }
            }
            r += 1;
        }
    }
    let w = x.clone().svd(true, true).solve(&y, 1e-12).expect("svd solve");
    (&x * w - &y).amax()
}

fn learnability(work: &Path) -> Outcome {
    let residual = least_squares_residual(&GeneratorConfig::affine_toy());
    let cfg = write_config(work, "toy.toml", TOY_TRAINING);
    let (corpus, model) = (work.join("toy"), work.join("toy_model"));
    let start = Instant::now();
    relikin(&["generate", "--preset", "affine-toy", "--out", s(&corpus)])?;
    relikin(&["train", "--corpus", s(&corpus), "--out", s(&model), "--config", s(&cfg)])?;
    let secs = start.elapsed().as_secs_f64();
    let history = columns(&model.join("history.csv"))?;
    let best = numbers(&history, "val_mpjpe_mm")?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    check(
        best < 5.0 && secs < 600.0 && residual < 1e-9,
        format!("val MPJPE {best:.2} mm in {secs:.0} s, least-squares residual {residual:.1e} m"),
    )
}

fn calibration(work: &Path) -> Outcome {
    let base_cfg = write_config(
        work,
        "cal.toml",
        &TOY_TRAINING.replace("max_epochs = 200", "max_epochs = 80"),
    );
    let head_cfg = write_config(
        work,
        "cal_head.toml",
        &TOY_TRAINING
            .replace("[model]\nhidden_size = 64\n", "")
            .replace("max_epochs = 200", "max_epochs = 40"),
    );
    let d = |n: &str| work.join(n);
    relikin(&["generate", "--preset", "calibration", "--out", s(&d("cal"))])?;
    relikin(&[
        "train",
        "--corpus",
        s(&d("cal")),
        "--out",
        s(&d("cal_base")),
        "--config",
        s(&base_cfg),
    ])?;
    relikin(&[
        "finetune-hetero",
        "--baseline",
        s(&d("cal_base").join("checkpoint.txt")),
        "--corpus",
        s(&d("cal")),
        "--out",
        s(&d("cal_hetero")),
        "--config",
        s(&head_cfg),
    ])?;
    relikin(&[
        "eval",
        "--checkpoint",
        s(&d("cal_hetero").join("checkpoint.txt")),
        "--corpus",
        s(&d("cal")),
        "--out",
        s(&d("cal_eval")),
        "--uncertainty",
        "ale",
        "--mc-samples",
        "20",
        "--no-dump",
    ])?;
    let mut sigma: Vec<f64> = numbers(&columns(&d("cal_eval").join("frames.csv"))?, "ale")?
        .into_iter()
        .map(|v| 1000.0 * v.sqrt())
        .collect();
    sigma.sort_by(f64::total_cmp);
    let n = sigma.len();
    let median = if n % 2 == 1 {
        sigma[n / 2]
    } else {
        0.5 * (sigma[n / 2 - 1] + sigma[n / 2])
    };
    check(
        (7.0..=13.0).contains(&median),
        format!("median aleatoric sigma {median:.2} mm over {n} frames"),
    )
}

struct Benchmark {
    dir: PathBuf,
}

impl Benchmark {
    fn run(work: &Path) -> Result<Self, String> {
        let cfg = write_config(
            work,
            "bench.toml",
            "[model]\nhidden_size = 64\n\n[training]\nlearning_rate = 3e-3\nbatch_size = 8\nweight_decay = 0.0\n\
             max_epochs = 40\npatience = 10\n",
        );
        let d = |n: &str| work.join(n);
        relikin(&["generate", "--preset", "benchmark", "--out", s(&d("bench"))])?;
        relikin(&[
            "train",
            "--corpus",
            s(&d("bench")),
            "--out",
            s(&d("bench_model")),
            "--config",
            s(&cfg),
        ])?;
        let ckpt = d("bench_model").join("checkpoint.txt");
        for (cmd, out) in [("eval", "bench_eval"), ("sweep", "bench_sweep")] {
            relikin(&[
                cmd,
                "--checkpoint",
                s(&ckpt),
                "--corpus",
                s(&d("bench")),
                "--out",
                s(&d(out)),
                "--mc-samples",
                "30",
                "--outlier-quantile",
                "0.95",
            ])?;
        }
        Ok(Self {
            dir: work.to_path_buf(),
        })
    }

    fn frames(&self) -> Result<(Vec<f64>, Vec<f64>), String> {
        let cols = columns(&self.dir.join("bench_eval").join("frames.csv"))?;
        Ok((numbers(&cols, "error_mm")?, numbers(&cols, "epi")?))
    }
}

fn selective_prediction(bench: &Benchmark) -> Outcome {
    let (errors, epi) = bench.frames()?;
    let rho = spearman(&errors, &epi)
        .map_err(|e| e.to_string())?
        .value()
        .unwrap_or(f64::NAN);
    let p = spearman_permutation_p(&errors, &epi, 999, 0).map_err(|e| e.to_string())?;
    let curve = risk_coverage(&errors, &epi, &[0.1, 1.0]).map_err(|e| e.to_string())?;
    let report = columns(&bench.dir.join("bench_eval").join("report.csv"))?;
    let row = report["kind"].iter().position(|k| k == "epi").ok_or("no epi row")?;
    let auc: f64 = report["roc_auc"][row].parse().map_err(|_| "roc_auc is NA")?;
    let (r10, r100) = (curve[0].risk_mm, curve[1].risk_mm);
    check(
        rho > 0.0 && p < 0.01 && r10 < r100 && auc > 0.7,
        format!("rho {rho:.3} (p {p:.3}), Risk(0.1) {r10:.2} < Risk(1.0) {r100:.2} mm, ROC-AUC {auc:.3}"),
    )
}

fn robustness(bench: &Benchmark) -> Outcome {
    let cols = columns(&bench.dir.join("bench_sweep").join("sweep.csv"))?;
    let sigma = numbers(&cols, "sigma_mm")?;
    let error = numbers(&cols, "mean_error_mm")?;
    let rho = numbers(&cols, "spearman_rho")?;
    let monotone = error.windows(2).all(|w| w[1] >= 0.98 * w[0]);
    let drift = (rho[rho.len() - 1] - rho[0]).abs();
    check(
        sigma.first() == Some(&0.0) && sigma.last() == Some(&30.0) && monotone && drift <= 0.15,
        format!(
            "error {:.1} -> {:.1} mm (monotone {monotone}), rho {:.3} -> {:.3} (|drift| {drift:.3})",
            error[0],
            error[error.len() - 1],
            rho[0],
            rho[rho.len() - 1]
        ),
    )
}

fn leakage() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut subjects = 0;
    for i in 0..100 {
        let config = GeneratorConfig {
            seed: rng.gen(),
            num_studies: rng.gen_range(1..=6),
            subjects_per_study: rng.gen_range(1..=8),
            frames_per_sequence: 6,
            clip_length: 6,
            split_ratios: [
                rng.gen_range(0.1..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
            ],
            ..GeneratorConfig::default()
        };
        let corpus = generate_corpus(&config).map_err(|e| e.to_string())?;
        let splits = split_subjects(&corpus.samples, config.split_ratios, config.seed).map_err(|e| e.to_string())?;
        let parts: Vec<_> = Split::ALL.iter().map(|&sp| corpus.select(&splits, sp)).collect();
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            check_disjoint(&parts[a], "a", &parts[b], "b").map_err(|e| format!("config {i}: {e}"))?;
        }
        if parts.iter().map(Vec::len).sum::<usize>() != corpus.samples.len() {
            return Err(format!("config {i}: clips lost by the split"));
        }
        subjects += splits.assignments.len();
    }
    check(true, format!("100 configs, {subjects} subjects, no overlap"))
}

fn risk_definition(bench: &Benchmark) -> Outcome {
    let (errors, epi) = bench.frames()?;
    let grid = relikin_core::reliability::default_coverage_grid();
    let run = |u: &[f64]| risk_coverage(&errors, u, &grid).map_err(|e| e.to_string());
    let base = run(&epi)?;
    let exp_u: Vec<f64> = epi.iter().map(|u| u.exp()).collect();
    let affine: Vec<f64> = epi.iter().map(|u| 2.0 * u + 1.0).collect();
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let full = base.last().map(|p| p.risk_mm);
    check(
        full == Some(mean) && run(&exp_u)? == base && run(&affine)? == base,
        format!("Risk(1.0) = mean = {mean:.4} mm, curve unchanged under exp(u) and 2u+1"),
    )
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let w = work.path();
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "metric oracle equivalence", metric_oracles()),
        (2, "gradient correctness", gradients()),
        (3, "variance decomposition", variance_decomposition()),
        (4, "rerun determinism", determinism(w)),
        (5, "learnability floor", learnability(w)),
        (6, "heteroscedastic calibration", calibration(w)),
    ];
    let bench = Benchmark::run(w);
    let on_bench = |f: fn(&Benchmark) -> Outcome| bench.as_ref().map_err(Clone::clone).and_then(f);
    results.push((7, "selective prediction", on_bench(selective_prediction)));
    results.push((8, "noise robustness", on_bench(robustness)));
    results.push((9, "leakage guard", leakage()));
    results.push((10, "risk-coverage definition", on_bench(risk_definition)));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (n, name, outcome) in &results {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2} {tag} {name}: {detail}");
    }
    println!("{} of {} criteria pass", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use relikin_core::data::{
    generate_corpus, load_corpus, load_splits, save_corpus, save_splits, split_subjects, Corpus, GeneratorConfig, Split,
};
use relikin_core::model::{init_model, load_checkpoint, save_checkpoint, ModelConfig, ModelParameters};
use relikin_core::reliability::{
    assess, quantile, render_risk_coverage_svg, report_csv, risk_coverage_csv, robustness_sweep, score_dataset,
    sweep_csv, SweepOptions, REPORT_CSV, RISK_COVERAGE_CSV, RISK_COVERAGE_SVG, SWEEP_CSV,
};
use relikin_core::training::{train, warm_start_heteroscedastic, Dataset, TrainingConfig, TrainingHistory};
use relikin_core::uncertainty::{predict, write_prediction_dump, SamplerConfig, UncertaintyKind};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::manifest::{RunManifest, TOOL};

pub const SPLITS_FILE: &str = "splits.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const HISTORY_FILE: &str = "history.csv";
pub const FRAMES_FILE: &str = "frames.csv";
pub const PREDICTIONS_DIR: &str = "predictions";

/// A fully resolved command: everything it reads or draws at random is in
/// the serialized value.
pub trait Run: Serialize + DeserializeOwned {
    const NAME: &'static str;
    fn out_dir(&self) -> &Path;
    fn set_out_dir(&mut self, out: PathBuf);
    fn seeds(&self) -> BTreeMap<String, u64>;
    fn inputs(&self) -> BTreeMap<String, PathBuf>;
    /// Writes every output into `out_dir` and returns their names.
    fn execute(&self) -> Result<Vec<String>>;
}

pub fn launch<R: Run>(run: &R) -> Result<RunManifest> {
    let start = Instant::now();
    let out = run.out_dir();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let outputs = run.execute()?;
    let manifest = RunManifest {
        tool: TOOL.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: R::NAME.into(),
        config: serde_json::to_value(run).expect("run config serializes"),
        seeds: run.seeds(),
        inputs: run.inputs(),
        outputs,
        threads: rayon::current_num_threads(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    manifest.save(out)?;
    log::info!("{} finished in {:.1} s", R::NAME, manifest.wall_clock_seconds);
    Ok(manifest)
}

/// Runs the command recorded in `manifest` again, into `out` if given.
pub fn rerun(manifest: &RunManifest, out: Option<PathBuf>) -> Result<RunManifest> {
    fn again<R: Run>(config: &serde_json::Value, out: Option<PathBuf>) -> Result<RunManifest> {
        let mut run: R =
            serde_json::from_value(config.clone()).with_context(|| format!("decoding {} config", R::NAME))?;
        if let Some(out) = out {
            run.set_out_dir(out);
        }
        launch(&run)
    }
    if manifest.tool != TOOL {
        bail!("manifest was written by `{}`, not {TOOL}", manifest.tool);
    }
    if manifest.version != env!("CARGO_PKG_VERSION") {
        log::warn!(
            "manifest version {} differs from {}; outputs may differ",
            manifest.version,
            env!("CARGO_PKG_VERSION")
        );
    }
    match manifest.command.as_str() {
        GenerateRun::NAME => again::<GenerateRun>(&manifest.config, out),
        TrainRun::NAME => again::<TrainRun>(&manifest.config, out),
        FinetuneRun::NAME => again::<FinetuneRun>(&manifest.config, out),
        EvalRun::NAME => again::<EvalRun>(&manifest.config, out),
        SweepRun::NAME => again::<SweepRun>(&manifest.config, out),
        other => bail!("unknown command `{other}` in manifest"),
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<String> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(name.to_string())
}

/// Saves the checkpoint and reads it back to make sure it round-trips.
fn write_checkpoint_checked(params: &ModelParameters<f64>, dir: &Path) -> Result<String> {
    let path = dir.join(CHECKPOINT_FILE);
    save_checkpoint(params, &path)?;
    let back: ModelParameters<f64> = load_checkpoint(&path)?;
    if &back != params {
        bail!("{} does not read back to the saved parameters", path.display());
    }
    Ok(CHECKPOINT_FILE.into())
}

fn history_csv(history: &TrainingHistory) -> String {
    let mut csv = history.to_csv();
    let header_end = csv.find('\n').expect("history header") + 1;
    let initial = format!("0,,{:?},{:?}\n", history.initial.loss, history.initial.mpjpe_mm);
    csv.insert_str(header_end, &initial);
    csv
}

struct LoadedCorpus {
    corpus: Corpus,
    splits: relikin_core::data::SplitManifest,
}

fn load_corpus_with_splits(dir: &Path) -> Result<LoadedCorpus> {
    let corpus = load_corpus(dir)?;
    let path = dir.join(SPLITS_FILE);
    if !path.exists() {
        bail!(
            "{} not found; corpora written by `relikin generate` include it",
            path.display()
        );
    }
    let splits = load_splits(&path)?;
    Ok(LoadedCorpus { corpus, splits })
}

impl LoadedCorpus {
    fn split(&self, split: Split) -> Result<Vec<relikin_core::data::MotionSample>> {
        let samples = self.corpus.select(&self.splits, split);
        if samples.is_empty() {
            bail!("split `{}` has no clips", split.name());
        }
        Ok(samples)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRun {
    pub out: PathBuf,
    pub generator: GeneratorConfig,
}

impl Run for GenerateRun {
    const NAME: &'static str = "generate";

    fn out_dir(&self) -> &Path {
        &self.out
    }
    fn set_out_dir(&mut self, out: PathBuf) {
        self.out = out;
    }
    fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("generator".into(), self.generator.seed),
            ("split".into(), self.generator.seed),
        ])
    }
    fn inputs(&self) -> BTreeMap<String, PathBuf> {
        BTreeMap::new()
    }

    fn execute(&self) -> Result<Vec<String>> {
        let corpus = generate_corpus(&self.generator)?;
        let splits = split_subjects(&corpus.samples, self.generator.split_ratios, self.generator.seed)?;
        for w in &splits.warnings {
            log::warn!("{w}");
        }
        let manifest = save_corpus(&corpus, &self.out)?;
        save_splits(&splits, &self.out.join(SPLITS_FILE))?;
        let mut outputs = vec![
            relikin_core::data::MANIFEST_FILE.to_string(),
            relikin_core::data::VALIDITY_FILE.into(),
        ];
        for c in &manifest.clips {
            outputs.push(relikin_core::data::keypoints_file(&c.clip_id));
            outputs.push(relikin_core::data::landmarks_file(&c.clip_id));
        }
        outputs.push(SPLITS_FILE.into());
        log::info!("wrote {} clips to {}", manifest.clips.len(), self.out.display());
        Ok(outputs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub init_seed: u64,
}

/// `model` with the data dimensions of the corpus.
pub fn fit_model_to_corpus(model: ModelConfig, corpus: &Path) -> Result<ModelConfig> {
    let c = load_corpus(corpus)?;
    Ok(ModelConfig {
        input_dim: 3 * c.manifest.keypoint_count,
        landmark_count: c.manifest.landmark_count,
        seq_len: c.manifest.clip_length,
        ..model
    })
}

impl Run for TrainRun {
    const NAME: &'static str = "train";

    fn out_dir(&self) -> &Path {
        &self.out
    }
    fn set_out_dir(&mut self, out: PathBuf) {
        self.out = out;
    }
    fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([("init".into(), self.init_seed), ("training".into(), self.training.seed)])
    }
    fn inputs(&self) -> BTreeMap<String, PathBuf> {
        BTreeMap::from([("corpus".into(), self.corpus.clone())])
    }

    fn execute(&self) -> Result<Vec<String>> {
        let data = load_corpus_with_splits(&self.corpus)?;
        let init = init_model::<f64>(&self.model, self.init_seed)?;
        let (params, history) = train(
            init,
            &data.split(Split::Train)?,
            &data.split(Split::Val)?,
            data.corpus.triplets(),
            &self.training,
        )?;
        log::info!(
            "best epoch {} of {}, val MPJPE {:.3} mm",
            history.best_epoch,
            history.stopping_epoch,
            history.best().map_or(f64::NAN, |b| b.val_mpjpe_mm)
        );
        Ok(vec![
            write_checkpoint_checked(&params, &self.out)?,
            write(&self.out, HISTORY_FILE, &history_csv(&history))?,
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRun {
    pub baseline: PathBuf,
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub training: TrainingConfig,
    pub head_seed: u64,
}

impl Run for FinetuneRun {
    const NAME: &'static str = "finetune-hetero";

    fn out_dir(&self) -> &Path {
        &self.out
    }
    fn set_out_dir(&mut self, out: PathBuf) {
        self.out = out;
    }
    fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([("head".into(), self.head_seed), ("training".into(), self.training.seed)])
    }
    fn inputs(&self) -> BTreeMap<String, PathBuf> {
        BTreeMap::from([
            ("baseline".into(), self.baseline.clone()),
            ("corpus".into(), self.corpus.clone()),
        ])
    }

    fn execute(&self) -> Result<Vec<String>> {
        let base: ModelParameters<f64> = load_checkpoint(&self.baseline)?;
        let init = warm_start_heteroscedastic(&base, &base.config, self.head_seed)?;
        let data = load_corpus_with_splits(&self.corpus)?;
        let (params, history) = train(
            init,
            &data.split(Split::Train)?,
            &data.split(Split::Val)?,
            data.corpus.triplets(),
            &self.training,
        )?;
        log::info!(
            "val loss {:.6} at epoch 0, {:.6} at best epoch {}",
            history.initial.loss,
            history.best().map_or(f64::NAN, |b| b.val_loss),
            history.best_epoch
        );
        Ok(vec![
            write_checkpoint_checked(&params, &self.out)?,
            write(&self.out, HISTORY_FILE, &history_csv(&history))?,
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierRule {
    /// Frames above this error (mm) are outliers.
    Fixed { mm: f64 },
    /// The threshold is this quantile of the undegraded frame errors.
    Quantile { q: f64 },
}

impl OutlierRule {
    fn threshold(self, errors: &[f64]) -> Result<f64> {
        Ok(match self {
            OutlierRule::Fixed { mm } => mm,
            OutlierRule::Quantile { q } => quantile(errors, q)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub split: Split,
    pub out: PathBuf,
    pub sampler: SamplerConfig,
    pub kind: UncertaintyKind,
    pub outlier: OutlierRule,
    pub coverage_grid: Vec<f64>,
    pub batch_size: usize,
    pub dump_predictions: bool,
}

fn kinds_with_primary(primary: UncertaintyKind) -> Vec<UncertaintyKind> {
    let mut kinds = vec![primary];
    kinds.extend(UncertaintyKind::ALL.into_iter().filter(|&k| k != primary));
    kinds
}

impl Run for EvalRun {
    const NAME: &'static str = "eval";

    fn out_dir(&self) -> &Path {
        &self.out
    }
    fn set_out_dir(&mut self, out: PathBuf) {
        self.out = out;
    }
    fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([("dropout".into(), self.sampler.base_seed)])
    }
    fn inputs(&self) -> BTreeMap<String, PathBuf> {
        BTreeMap::from([
            ("checkpoint".into(), self.checkpoint.clone()),
            ("corpus".into(), self.corpus.clone()),
        ])
    }

    fn execute(&self) -> Result<Vec<String>> {
        self.sampler.validate()?;
        let params: ModelParameters<f64> = load_checkpoint(&self.checkpoint)?;
        let loaded = load_corpus_with_splits(&self.corpus)?;
        let samples = loaded.split(self.split)?;
        let data = Dataset::<f64>::from_samples(&samples)?;
        let pred = predict(&params, &data.inputs, &self.sampler, self.batch_size)?;
        let errors = relikin_core::reliability::frame_error(&pred.mean, &data.targets, &data.validity)?;
        let summary = pred.summary(&data.validity)?;
        let threshold = self.outlier.threshold(&errors)?;
        let report = assess(
            &errors,
            &summary,
            &kinds_with_primary(self.kind),
            &self.coverage_grid,
            threshold,
        )?;
        log::info!(
            "{} frames, mean error {:.3} mm, {} rho {:?}",
            report.frames,
            report.mean_error_mm,
            self.kind,
            report.kinds[0].spearman_rho
        );

        let mut frames = String::from("clip_id,frame,error_mm,epi,ale,total\n");
        let t = data.inputs.shape()[1];
        for (i, e) in errors.iter().enumerate() {
            let _ = writeln!(
                frames,
                "{},{},{:?},{:?},{:?},{:?}",
                data.clip_ids[i / t],
                i % t,
                e,
                summary.epi[i],
                summary.ale[i],
                summary.total[i]
            );
        }
        let mut outputs = vec![
            write(&self.out, REPORT_CSV, &report_csv(&report))?,
            write(&self.out, RISK_COVERAGE_CSV, &risk_coverage_csv(&report))?,
            write(&self.out, RISK_COVERAGE_SVG, &render_risk_coverage_svg(&report))?,
            write(&self.out, FRAMES_FILE, &frames)?,
        ];
        if self.dump_predictions {
            write_prediction_dump(&pred, &data.clip_ids, &self.out.join(PREDICTIONS_DIR))?;
            outputs.push(format!(
                "{PREDICTIONS_DIR}/{}",
                relikin_core::uncertainty::PREDICTION_MANIFEST
            ));
            outputs.extend(
                data.clip_ids
                    .iter()
                    .map(|id| format!("{PREDICTIONS_DIR}/predictions_{id}.csv")),
            );
        }
        Ok(outputs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub split: Split,
    pub out: PathBuf,
    pub sampler: SamplerConfig,
    pub kind: UncertaintyKind,
    pub outlier: OutlierRule,
    pub sigmas_mm: Vec<f64>,
    pub batch_size: usize,
    pub noise_seed: u64,
}

impl Run for SweepRun {
    const NAME: &'static str = "sweep";

    fn out_dir(&self) -> &Path {
        &self.out
    }
    fn set_out_dir(&mut self, out: PathBuf) {
        self.out = out;
    }
    fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("dropout".into(), self.sampler.base_seed),
            ("noise".into(), self.noise_seed),
        ])
    }
    fn inputs(&self) -> BTreeMap<String, PathBuf> {
        BTreeMap::from([
            ("checkpoint".into(), self.checkpoint.clone()),
            ("corpus".into(), self.corpus.clone()),
        ])
    }

    fn execute(&self) -> Result<Vec<String>> {
        self.sampler.validate()?;
        let params: ModelParameters<f64> = load_checkpoint(&self.checkpoint)?;
        let loaded = load_corpus_with_splits(&self.corpus)?;
        let data = Dataset::<f64>::from_samples(&loaded.split(self.split)?)?;
        let outlier_mm = match self.outlier {
            OutlierRule::Fixed { mm } => mm,
            rule => {
                let (errors, _) = score_dataset(&params, &data.inputs, &data, &self.sampler, self.batch_size)?;
                rule.threshold(&errors)?
            }
        };
        let options = SweepOptions {
            kind: self.kind,
            outlier_mm,
            batch_size: self.batch_size,
            noise_seed: self.noise_seed,
        };
        let rows = robustness_sweep(&params, &data, &self.sigmas_mm, &self.sampler, &options)?;
        Ok(vec![write(&self.out, SWEEP_CSV, &sweep_csv(&rows))?])
    }
}

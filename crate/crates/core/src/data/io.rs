//! Corpus directory format.
//!
//! ```text
//! <dir>/manifest.json          dimensions, names, triplets, clip list, checksums
//! <dir>/validity.csv           one row per landmark slot: index,name,valid
//! <dir>/keypoints_<id>.csv     header + T rows of 3K values (k0_x,k0_y,k0_z,k1_x,...)
//! <dir>/landmarks_<id>.csv     header + T rows of 3L values
//! ```
//!
//! Values are meters, written in shortest round-trip decimal form, so a
//! save/load/save cycle reproduces every byte. Checksums are SHA-256 of the
//! file bytes, hex encoded.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generator::GeneratorConfig;
use super::{Corpus, MotionSample, Regime, SplitManifest};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CORPUS_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VALIDITY_FILE: &str = "validity.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub clip_id: String,
    pub subject_id: String,
    pub study_id: String,
    pub sequence_id: String,
    pub regime: Regime,
    pub keypoints_sha256: String,
    pub landmarks_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub keypoint_count: usize,
    pub landmark_count: usize,
    pub clip_length: usize,
    pub sample_rate_hz: f64,
    pub keypoint_names: Vec<String>,
    pub landmark_names: Vec<String>,
    pub landmark_validity: Vec<bool>,
    /// Landmark index triplets (outer, vertex, outer) used by the angle loss.
    pub triplets: Vec<[usize; 3]>,
    #[serde(default)]
    pub generator: Option<GeneratorConfig>,
    pub validity_sha256: String,
    pub clips: Vec<ClipEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn coordinate_header(prefix: char, count: usize) -> String {
    let mut cols = Vec::with_capacity(count * 3);
    for i in 0..count {
        for axis in ["x", "y", "z"] {
            cols.push(format!("{prefix}{i}_{axis}"));
        }
    }
    cols.join(",")
}

fn table_text(prefix: char, tensor: &Tensor<f64>) -> String {
    let (t, n) = (tensor.shape()[0], tensor.shape()[1]);
    let mut out = coordinate_header(prefix, n);
    out.push('\n');
    for row in tensor.data().chunks(n * 3).take(t) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn validity_text(manifest: &CorpusManifest) -> String {
    let mut out = String::from("index,name,valid\n");
    for (i, (name, &v)) in manifest
        .landmark_names
        .iter()
        .zip(&manifest.landmark_validity)
        .enumerate()
    {
        out.push_str(&format!("{i},{name},{}\n", u8::from(v)));
    }
    out
}

pub fn keypoints_file(clip_id: &str) -> String {
    format!("keypoints_{clip_id}.csv")
}

pub fn landmarks_file(clip_id: &str) -> String {
    format!("landmarks_{clip_id}.csv")
}

/// Write the corpus to `dir` (created if missing). Checksums in the written
/// manifest are recomputed from the emitted bytes.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<CorpusManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = corpus.manifest.clone();
    if manifest.clips.len() != corpus.samples.len() {
        return Err(Error::invalid(
            "save_corpus",
            format!(
                "{} manifest clips for {} samples",
                manifest.clips.len(),
                corpus.samples.len()
            ),
        ));
    }
    let validity = validity_text(&manifest);
    write_file(&dir.join(VALIDITY_FILE), &validity)?;
    manifest.validity_sha256 = sha256_hex(validity.as_bytes());
    let digests: Vec<(String, String)> = corpus
        .samples
        .par_iter()
        .map(|s| {
            s.validate()?;
            let kp = table_text('k', &s.keypoints);
            let lm = table_text('l', &s.landmarks);
            write_file(&dir.join(keypoints_file(&s.clip_id)), &kp)?;
            write_file(&dir.join(landmarks_file(&s.clip_id)), &lm)?;
            Ok((sha256_hex(kp.as_bytes()), sha256_hex(lm.as_bytes())))
        })
        .collect::<Result<_>>()?;
    for ((entry, sample), (kp, lm)) in manifest.clips.iter_mut().zip(&corpus.samples).zip(digests) {
        if entry.clip_id != sample.clip_id {
            return Err(Error::invalid(
                "save_corpus",
                format!(
                    "manifest clip {} does not match sample {}",
                    entry.clip_id, sample.clip_id
                ),
            ));
        }
        entry.keypoints_sha256 = kp;
        entry.landmarks_sha256 = lm;
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), &(json + "\n"))?;
    Ok(manifest)
}

fn parse_error(path: &Path, line: usize, field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        field: field.into(),
        reason: reason.into(),
    }
}

fn validation(path: &Path, reason: impl Into<String>) -> Error {
    Error::Validation {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_table(path: &Path, text: &str, prefix: char, rows: usize, count: usize) -> Result<Tensor<f64>> {
    let cols = count * 3;
    let expected = coordinate_header(prefix, count);
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_error(path, 1, "header", "file is empty"))?;
    if header != expected {
        let got = header.split(',').count();
        let reason = if got != cols {
            format!("expected {cols} columns, found {got}")
        } else {
            "unexpected column names".to_string()
        };
        return Err(parse_error(path, 1, "header", reason));
    }
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.is_empty() {
            continue;
        }
        seen += 1;
        let mut n = 0;
        for (c, cell) in line.split(',').enumerate() {
            if c >= cols {
                return Err(parse_error(path, lineno, "row", format!("more than {cols} columns")));
            }
            let field = || format!("{prefix}{}_{}", c / 3, ["x", "y", "z"][c % 3]);
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_error(path, lineno, field(), format!("`{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_error(path, lineno, field(), "value is not finite"));
            }
            data.push(v);
            n += 1;
        }
        if n != cols {
            return Err(parse_error(
                path,
                lineno,
                "row",
                format!("expected {cols} columns, found {n}"),
            ));
        }
    }
    if seen != rows {
        return Err(validation(path, format!("expected {rows} frames, found {seen}")));
    }
    Tensor::new(vec![rows, count, 3], data)
}

fn parse_validity(path: &Path, text: &str, manifest: &CorpusManifest) -> Result<Vec<bool>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("index,name,valid") => {}
        _ => return Err(parse_error(path, 1, "header", "expected `index,name,valid`")),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 {
            return Err(parse_error(
                path,
                lineno,
                "row",
                format!("expected 3 columns, found {}", cells.len()),
            ));
        }
        if cells[0].parse::<usize>().ok() != Some(i) {
            return Err(parse_error(path, lineno, "index", format!("expected {i}")));
        }
        out.push(match cells[2] {
            "1" => true,
            "0" => false,
            other => return Err(parse_error(path, lineno, "valid", format!("`{other}` is not 0 or 1"))),
        });
    }
    if out.len() != manifest.landmark_count {
        return Err(validation(
            path,
            format!("{} rows for {} landmarks", out.len(), manifest.landmark_count),
        ));
    }
    Ok(out)
}

fn check_manifest(path: &Path, m: &CorpusManifest) -> Result<()> {
    if m.format_version != CORPUS_FORMAT_VERSION {
        return Err(validation(
            path,
            format!(
                "format_version {} is not supported (expected {CORPUS_FORMAT_VERSION})",
                m.format_version
            ),
        ));
    }
    if m.keypoint_count == 0 || m.landmark_count == 0 || m.clip_length == 0 {
        return Err(validation(
            path,
            "keypoint_count, landmark_count and clip_length must be positive",
        ));
    }
    if m.keypoint_names.len() != m.keypoint_count {
        return Err(validation(
            path,
            format!("{} keypoint names for K = {}", m.keypoint_names.len(), m.keypoint_count),
        ));
    }
    if m.landmark_names.len() != m.landmark_count || m.landmark_validity.len() != m.landmark_count {
        return Err(validation(
            path,
            format!("landmark names/validity do not match L = {}", m.landmark_count),
        ));
    }
    if m.triplets.iter().flatten().any(|&i| i >= m.landmark_count) {
        return Err(validation(path, "triplet references a landmark out of range"));
    }
    Ok(())
}

/// Load and validate a corpus directory.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = read_file(&mpath)?;
    let manifest: CorpusManifest =
        serde_json::from_str(&text).map_err(|e| parse_error(&mpath, e.line(), "manifest", e.to_string()))?;
    check_manifest(&mpath, &manifest)?;

    let vpath = dir.join(VALIDITY_FILE);
    let vtext = read_file(&vpath)?;
    if sha256_hex(vtext.as_bytes()) != manifest.validity_sha256 {
        return Err(validation(&vpath, "checksum does not match manifest"));
    }
    let validity = parse_validity(&vpath, &vtext, &manifest)?;
    if validity != manifest.landmark_validity {
        return Err(validation(&vpath, "validity flags disagree with manifest"));
    }

    let (t, k, l) = (manifest.clip_length, manifest.keypoint_count, manifest.landmark_count);
    let samples = manifest
        .clips
        .par_iter()
        .map(|clip| {
            let load = |name: String, expected: &str, prefix: char, count: usize| -> Result<Tensor<f64>> {
                let path: PathBuf = dir.join(name);
                let text = read_file(&path)?;
                if sha256_hex(text.as_bytes()) != expected {
                    return Err(validation(&path, "checksum does not match manifest"));
                }
                parse_table(&path, &text, prefix, t, count)
            };
            let keypoints = load(keypoints_file(&clip.clip_id), &clip.keypoints_sha256, 'k', k)?;
            let landmarks = load(landmarks_file(&clip.clip_id), &clip.landmarks_sha256, 'l', l)?;
            let sample = MotionSample {
                clip_id: clip.clip_id.clone(),
                subject_id: clip.subject_id.clone(),
                study_id: clip.study_id.clone(),
                sequence_id: clip.sequence_id.clone(),
                regime: clip.regime,
                keypoints,
                landmarks,
                landmark_validity: validity.clone(),
            };
            sample.validate()?;
            Ok(sample)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { manifest, samples })
}

pub fn save_splits(splits: &SplitManifest, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(splits).expect("split manifest serializes");
    write_file(path, &(json + "\n"))
}

pub fn load_splits(path: &Path) -> Result<SplitManifest> {
    let text = read_file(path)?;
    serde_json::from_str(&text).map_err(|e| parse_error(path, e.line(), "splits", e.to_string()))
}

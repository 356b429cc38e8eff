//! Motion clips, subject-level splitting and fixed-length segmentation.

mod generator;
mod io;
mod skeleton;

pub use generator::{generate_corpus, ChainSpec, GeneratorConfig, JointSpec, LandmarkSpec};
pub use io::{
    keypoints_file, landmarks_file, load_corpus, load_splits, save_corpus, save_splits, ClipEntry, CorpusManifest,
    CORPUS_FORMAT_VERSION, MANIFEST_FILE, VALIDITY_FILE,
};
pub use skeleton::{default_chain, default_landmarks, default_triplets};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// How a clip was generated. Ambiguous clips have hidden segment twist and
/// exaggerated joint ranges, so their landmarks are not a function of the
/// keypoints alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Nominal,
    Ambiguous,
}

/// One fixed-length clip, coordinates in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSample {
    pub clip_id: String,
    pub subject_id: String,
    pub study_id: String,
    pub sequence_id: String,
    pub regime: Regime,
    /// `[T, K, 3]`
    pub keypoints: Tensor<f64>,
    /// `[T, L, 3]`; padded slots are zero
    pub landmarks: Tensor<f64>,
    pub landmark_validity: Vec<bool>,
}

impl MotionSample {
    pub fn frames(&self) -> usize {
        self.keypoints.shape()[0]
    }

    pub fn keypoint_count(&self) -> usize {
        self.keypoints.shape()[1]
    }

    pub fn landmark_count(&self) -> usize {
        self.landmarks.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (k, l) = (self.keypoints.shape(), self.landmarks.shape());
        if k.len() != 3 || l.len() != 3 || k[2] != 3 || l[2] != 3 || k[0] != l[0] {
            return Err(Error::ShapeMismatch {
                op: "motion_sample",
                lhs: k.to_vec(),
                rhs: l.to_vec(),
            });
        }
        if self.landmark_validity.len() != l[1] {
            return Err(Error::invalid(
                "motion_sample",
                format!("{} validity flags for {} landmarks", self.landmark_validity.len(), l[1]),
            ));
        }
        if !self.keypoints.all_finite() || !self.landmarks.all_finite() {
            return Err(Error::NonFinite { op: "motion_sample" });
        }
        Ok(())
    }
}

/// A whole corpus: clips plus the metadata needed to interpret them.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub samples: Vec<MotionSample>,
}

impl Corpus {
    pub fn triplets(&self) -> &[[usize; 3]] {
        &self.manifest.triplets
    }

    /// Clips whose subject is assigned to `split`, in corpus order.
    pub fn select(&self, splits: &SplitManifest, split: Split) -> Vec<MotionSample> {
        self.samples
            .iter()
            .filter(|s| splits.assignments.get(&s.subject_id) == Some(&split))
            .cloned()
            .collect()
    }
}

/// Non-overlapping windows of `len` frames; a trailing remainder shorter
/// than `len` is dropped. Returns the frame ranges.
pub fn segment(frames: usize, len: usize) -> Vec<std::ops::Range<usize>> {
    if len == 0 {
        return Vec::new();
    }
    (0..frames / len).map(|i| i * len..(i + 1) * len).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub assignments: BTreeMap<String, Split>,
    /// Per study: subject counts for train, val, test.
    pub per_study: BTreeMap<String, [usize; 3]>,
    pub warnings: Vec<String>,
}

impl SplitManifest {
    pub fn subjects(&self, split: Split) -> BTreeSet<&str> {
        self.assignments
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(k, _)| k.as_str())
            .collect()
    }
}

/// Largest-remainder apportionment of `n` items over `ratios`. Ties in the
/// remainder go to the earlier split. When `n >= 3`, every split receives at
/// least one item (taken from the currently largest split).
fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let total: f64 = ratios.iter().sum();
    let quotas: Vec<f64> = ratios.iter().map(|r| r / total * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = q.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    if n >= 3 {
        for i in 0..3 {
            if counts[i] == 0 && ratios[i] > 0.0 {
                let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
                counts[donor] -= 1;
                counts[i] += 1;
            }
        }
    }
    counts
}

/// Assign every subject to exactly one split, independently within each
/// study. Subjects of a study are sorted, shuffled with a per-study stream,
/// then cut by the apportioned counts. Studies with fewer than 3 subjects go
/// entirely to train and are reported in `warnings`.
pub fn split_subjects(samples: &[MotionSample], ratios: [f64; 3], seed: u64) -> Result<SplitManifest> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || ratios.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config(format!("invalid split ratios {ratios:?}")));
    }
    let mut by_study: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
    for s in samples {
        if let Some(prev) = owner.insert(&s.subject_id, &s.study_id) {
            if prev != s.study_id {
                return Err(Error::invalid(
                    "split_subjects",
                    format!("subject {} appears in studies {prev} and {}", s.subject_id, s.study_id),
                ));
            }
        }
        by_study.entry(&s.study_id).or_default().insert(&s.subject_id);
    }
    let mut manifest = SplitManifest {
        seed,
        ratios,
        assignments: BTreeMap::new(),
        per_study: BTreeMap::new(),
        warnings: Vec::new(),
    };
    for (study_index, (study, subjects)) in by_study.into_iter().enumerate() {
        let mut subjects: Vec<&str> = subjects.into_iter().collect();
        let counts = if subjects.len() < 3 {
            let msg = format!("study {study} has {} subject(s); all assigned to train", subjects.len());
            log::warn!("{msg}");
            manifest.warnings.push(msg);
            [subjects.len(), 0, 0]
        } else {
            let mut rng = rng::stream(seed, rng::STREAM_SPLIT, study_index as u64);
            subjects.shuffle(&mut rng);
            apportion(subjects.len(), ratios)
        };
        let mut cursor = subjects.into_iter();
        for (split, &count) in Split::ALL.iter().zip(&counts) {
            for subject in cursor.by_ref().take(count) {
                manifest.assignments.insert(subject.to_string(), *split);
            }
        }
        manifest.per_study.insert(study.to_string(), counts);
    }
    Ok(manifest)
}

/// Fails if any subject occurs in both sample sets.
pub fn check_disjoint(
    a: &[MotionSample],
    a_name: &'static str,
    b: &[MotionSample],
    b_name: &'static str,
) -> Result<()> {
    let left: BTreeSet<&str> = a.iter().map(|s| s.subject_id.as_str()).collect();
    if let Some(shared) = b.iter().find(|s| left.contains(s.subject_id.as_str())) {
        return Err(Error::Leakage {
            subject: shared.subject_id.clone(),
            a: a_name,
            b: b_name,
        });
    }
    Ok(())
}

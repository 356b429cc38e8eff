//! Synthetic multi-study motion corpus.
//!
//! A 20-joint kinematic chain is driven by smooth band-limited joint-angle
//! trajectories (a few random sinusoids per degree of freedom). Landmarks
//! are attached to segments: a point interpolated between two keypoints plus
//! an offset expressed in a frame built from three keypoints. Observation
//! noise is added per study.
//!
//! Ambiguous sequences exaggerate joint ranges (limbs pass through full
//! extension, where the segment frame is ill-conditioned) and twist each
//! landmark frame about its segment axis by a hidden angle that the
//! keypoints do not reveal.
//!
//! With `affine_only` the offsets are fixed world vectors, which makes every
//! landmark an exact affine function of the keypoints of its frame.

use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::{ClipEntry, CorpusManifest, CORPUS_FORMAT_VERSION};
use super::skeleton::{default_chain, default_landmarks, default_triplets};
use super::{segment, Corpus, MotionSample, Regime};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    pub parent: Option<usize>,
    /// Offset from the parent joint in the parent's frame, meters.
    pub offset: [f64; 3],
    /// Rest Euler angles (x, y, z), radians.
    pub rest: [f64; 3],
    /// Peak deviation from rest per axis, radians.
    pub amplitude: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub joints: Vec<JointSpec>,
    pub root_height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSpec {
    pub name: String,
    pub anchor_a: usize,
    pub anchor_b: usize,
    /// Interpolation weight from `anchor_a` (0) to `anchor_b` (1).
    pub alpha: f64,
    pub reference: usize,
    /// Offset in the segment frame, meters.
    pub offset: [f64; 3],
}

impl ChainSpec {
    pub fn validate(&self, landmarks: &[LandmarkSpec]) -> Result<()> {
        let k = self.joints.len();
        if k == 0 {
            return Err(Error::Config("kinematic chain has no joints".into()));
        }
        for (i, j) in self.joints.iter().enumerate() {
            match (i, j.parent) {
                (0, None) => {}
                (0, Some(_)) => return Err(Error::Config("root joint must not have a parent".into())),
                (_, None) => return Err(Error::Config(format!("joint {} has no parent", j.name))),
                (_, Some(p)) if p >= i => {
                    return Err(Error::Config(format!(
                        "joint {} has parent {p}, which does not precede it",
                        j.name
                    )))
                }
                _ => {}
            }
            let finite = j
                .offset
                .iter()
                .chain(&j.rest)
                .chain(&j.amplitude)
                .all(|v| v.is_finite());
            if !finite || j.amplitude.iter().any(|&a| a < 0.0) {
                return Err(Error::Config(format!("joint {} has invalid offset or limits", j.name)));
            }
        }
        for l in landmarks {
            if l.anchor_a >= k || l.anchor_b >= k || l.reference >= k || l.anchor_a == l.anchor_b {
                return Err(Error::Config(format!(
                    "landmark {} references invalid keypoints",
                    l.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub num_studies: usize,
    pub subjects_per_study: usize,
    pub sequences_per_subject: usize,
    pub frames_per_sequence: usize,
    pub clip_length: usize,
    pub sample_rate_hz: f64,
    /// Trailing landmark slots that are always invalid and zero.
    pub padded_landmarks: usize,
    /// Per-study observation noise is drawn uniformly from this range (mm).
    pub obs_noise_mm_min: f64,
    pub obs_noise_mm_max: f64,
    /// Per-study keypoint jitter is drawn uniformly from this range (mm).
    /// It perturbs the model inputs only, landmarks see the clean pose.
    pub keypoint_noise_mm_min: f64,
    pub keypoint_noise_mm_max: f64,
    pub affine_only: bool,
    /// Spread of the per-subject body scale around 1.
    pub subject_scale_sd: f64,
    /// Half-width of the per-segment length jitter (relative).
    pub segment_jitter: f64,
    /// Fraction of sequences generated in the ambiguity regime.
    pub ambiguity_fraction: f64,
    /// Joint-range multiplier inside the ambiguity regime.
    pub ambiguity_amplitude: f64,
    /// Peak hidden twist of landmark frames inside the ambiguity regime (rad).
    pub ambiguity_twist_rad: f64,
    pub split_ratios: [f64; 3],
    pub chain: ChainSpec,
    pub landmarks: Vec<LandmarkSpec>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_studies: 16,
            subjects_per_study: 10,
            sequences_per_subject: 1,
            frames_per_sequence: 180,
            clip_length: 60,
            sample_rate_hz: 60.0,
            padded_landmarks: 3,
            obs_noise_mm_min: 2.0,
            obs_noise_mm_max: 6.0,
            keypoint_noise_mm_min: 0.0,
            keypoint_noise_mm_max: 0.0,
            affine_only: false,
            subject_scale_sd: 0.06,
            segment_jitter: 0.03,
            ambiguity_fraction: 0.1,
            ambiguity_amplitude: 2.0,
            ambiguity_twist_rad: 1.2,
            split_ratios: [0.8, 0.1, 0.1],
            chain: default_chain(),
            landmarks: default_landmarks(),
        }
    }
}

impl GeneratorConfig {
    /// Noise-free, affine-only, no ambiguity: solvable exactly by a linear map.
    pub fn affine_toy() -> Self {
        Self {
            seed: 11,
            num_studies: 4,
            subjects_per_study: 10,
            sequences_per_subject: 1,
            frames_per_sequence: 180,
            obs_noise_mm_min: 0.0,
            obs_noise_mm_max: 0.0,
            affine_only: true,
            subject_scale_sd: 0.0,
            segment_jitter: 0.0,
            ambiguity_fraction: 0.0,
            ..Self::default()
        }
    }

    /// The affine toy with a known, study-independent landmark noise of
    /// 10 mm per coordinate.
    pub fn calibration() -> Self {
        Self {
            seed: 13,
            obs_noise_mm_min: 10.0,
            obs_noise_mm_max: 10.0,
            ..Self::affine_toy()
        }
    }

    /// The reference benchmark: full nonlinear map with an ambiguity regime.
    pub fn benchmark() -> Self {
        Self {
            seed: 2024,
            num_studies: 16,
            subjects_per_study: 10,
            sequences_per_subject: 1,
            frames_per_sequence: 120,
            ambiguity_fraction: 0.15,
            keypoint_noise_mm_min: 5.0,
            keypoint_noise_mm_max: 15.0,
            ..Self::default()
        }
    }

    pub fn keypoint_count(&self) -> usize {
        self.chain.joints.len()
    }

    pub fn landmark_count(&self) -> usize {
        self.landmarks.len() + self.padded_landmarks
    }

    pub fn validate(&self) -> Result<()> {
        self.chain.validate(&self.landmarks)?;
        let bad = |m: String| Err(Error::Config(m));
        if self.num_studies == 0 || self.subjects_per_study == 0 || self.sequences_per_subject == 0 {
            return bad("studies, subjects and sequences must be positive".into());
        }
        if self.clip_length == 0 || self.frames_per_sequence < self.clip_length {
            return bad(format!(
                "frames_per_sequence {} shorter than clip_length {}",
                self.frames_per_sequence, self.clip_length
            ));
        }
        if self.sample_rate_hz.is_nan() || self.sample_rate_hz <= 0.0 {
            return bad("sample_rate_hz must be positive".into());
        }
        if !(0.0..=self.obs_noise_mm_max).contains(&self.obs_noise_mm_min) {
            return bad("observation noise range must satisfy 0 <= min <= max".into());
        }
        if !(0.0..=self.keypoint_noise_mm_max).contains(&self.keypoint_noise_mm_min) {
            return bad("keypoint noise range must satisfy 0 <= min <= max".into());
        }
        if !(0.0..0.2).contains(&self.subject_scale_sd) || !(0.0..0.5).contains(&self.segment_jitter) {
            return bad("subject_scale_sd must lie in [0, 0.2) and segment_jitter in [0, 0.5)".into());
        }
        if !(0.0..=1.0).contains(&self.ambiguity_fraction) {
            return bad("ambiguity_fraction outside [0, 1]".into());
        }
        if self.landmarks.is_empty() {
            return bad("no landmarks defined".into());
        }
        Ok(())
    }
}

/// Smooth scalar signal in roughly [-1, 1]: three random sinusoids.
struct Wave {
    parts: [(f64, f64, f64); 3],
}

impl Wave {
    fn draw(rng: &mut ChaCha8Rng, f_lo: f64, f_hi: f64) -> Self {
        let mut parts = [(0.0, 0.0, 0.0); 3];
        let mut total = 0.0;
        for p in parts.iter_mut() {
            let a = rng.gen_range(0.2..1.0);
            total += a;
            *p = (a, rng.gen_range(f_lo..f_hi), rng.gen_range(0.0..std::f64::consts::TAU));
        }
        for p in parts.iter_mut() {
            p.0 /= total;
        }
        Self { parts }
    }

    fn at(&self, t: f64) -> f64 {
        self.parts
            .iter()
            .map(|(a, f, phase)| a * (std::f64::consts::TAU * f * t + phase).sin())
            .sum()
    }
}

struct StudyParams {
    f_lo: f64,
    f_hi: f64,
    amplitude: f64,
    noise_m: f64,
    keypoint_noise_m: f64,
}

struct SubjectParams {
    joint_scale: Vec<f64>,
    offset_scale: f64,
}

fn orthogonal_fallback(e1: &Vector3<f64>) -> Vector3<f64> {
    let probe = if e1.x.abs() < 0.9 { Vector3::x() } else { Vector3::z() };
    (probe - e1 * probe.dot(e1)).normalize()
}

fn landmark_position(
    spec: &LandmarkSpec,
    joints: &[Vector3<f64>],
    offset_scale: f64,
    twist: f64,
    affine_only: bool,
) -> Vector3<f64> {
    let a = joints[spec.anchor_a];
    let b = joints[spec.anchor_b];
    let base = a + (b - a) * spec.alpha;
    let o = Vector3::from(spec.offset);
    if affine_only {
        return base + o;
    }
    let e1 = (b - a).normalize();
    let rel = joints[spec.reference] - a;
    let perp = rel - e1 * rel.dot(&e1);
    let e2 = if perp.norm() < 1e-9 {
        orthogonal_fallback(&e1)
    } else {
        perp.normalize()
    };
    let e3 = e1.cross(&e2);
    let (s, c) = twist.sin_cos();
    let e2t = e2 * c + e3 * s;
    let e3t = e3 * c - e2 * s;
    base + (e1 * o.x + e2t * o.y + e3t * o.z) * offset_scale
}

struct SequenceOutput {
    keypoints: Vec<f64>,
    landmarks: Vec<f64>,
}

fn simulate_sequence(
    config: &GeneratorConfig,
    study: &StudyParams,
    subject: &SubjectParams,
    regime: Regime,
    rng: &mut ChaCha8Rng,
    noise_rng: &mut ChaCha8Rng,
    keypoint_rng: &mut ChaCha8Rng,
) -> SequenceOutput {
    let joints = &config.chain.joints;
    let k = joints.len();
    let l_real = config.landmarks.len();
    let l_total = config.landmark_count();
    let ambiguous = regime == Regime::Ambiguous;
    let range = study.amplitude * if ambiguous { config.ambiguity_amplitude } else { 1.0 };

    let angle_waves: Vec<[Wave; 3]> = (0..k)
        .map(|_| std::array::from_fn(|_| Wave::draw(rng, study.f_lo, study.f_hi)))
        .collect();
    let root_waves: [Wave; 3] = std::array::from_fn(|_| Wave::draw(rng, study.f_lo * 0.5, study.f_hi * 0.5));
    let twist_waves: Vec<Wave> = (0..l_real).map(|_| Wave::draw(rng, study.f_lo, study.f_hi)).collect();
    let twist_amp = if ambiguous { config.ambiguity_twist_rad } else { 0.0 };
    let noise = Normal::new(0.0, study.noise_m.max(0.0)).expect("valid sigma");
    let keypoint_noise = Normal::new(0.0, study.keypoint_noise_m.max(0.0)).expect("valid sigma");

    let frames = config.frames_per_sequence;
    let mut keypoints = Vec::with_capacity(frames * k * 3);
    let mut landmarks = Vec::with_capacity(frames * l_total * 3);
    let mut pos = vec![Vector3::zeros(); k];
    let mut rot = vec![Rotation3::identity(); k];
    for f in 0..frames {
        let t = f as f64 / config.sample_rate_hz;
        for (j, spec) in joints.iter().enumerate() {
            let ang: [f64; 3] = std::array::from_fn(|d| {
                let amp = if j == 0 {
                    spec.amplitude[d] * study.amplitude
                } else {
                    spec.amplitude[d] * range
                };
                spec.rest[d] + amp * angle_waves[j][d].at(t)
            });
            let local = Rotation3::from_euler_angles(ang[0], ang[1], ang[2]);
            match spec.parent {
                None => {
                    let height = config.chain.root_height * subject.joint_scale[0];
                    pos[j] = Vector3::new(
                        0.05 * root_waves[0].at(t),
                        height + 0.02 * root_waves[1].at(t),
                        0.05 * root_waves[2].at(t),
                    );
                    rot[j] = local;
                }
                Some(p) => {
                    let offset = Vector3::from(spec.offset) * subject.joint_scale[j];
                    pos[j] = pos[p] + rot[p] * offset;
                    rot[j] = rot[p] * local;
                }
            }
        }
        for p in &pos {
            for v in [p.x, p.y, p.z] {
                let eps = if study.keypoint_noise_m > 0.0 {
                    keypoint_noise.sample(keypoint_rng)
                } else {
                    0.0
                };
                keypoints.push(v + eps);
            }
        }
        for (i, spec) in config.landmarks.iter().enumerate() {
            let twist = twist_amp * twist_waves[i].at(t);
            let scale = if config.affine_only { 1.0 } else { subject.offset_scale };
            let m = landmark_position(spec, &pos, scale, twist, config.affine_only);
            for v in [m.x, m.y, m.z] {
                let eps = if study.noise_m > 0.0 {
                    noise.sample(noise_rng)
                } else {
                    0.0
                };
                landmarks.push(v + eps);
            }
        }
        landmarks.extend(std::iter::repeat_n(0.0, 3 * config.padded_landmarks));
    }
    SequenceOutput { keypoints, landmarks }
}

/// Build the corpus in memory. Deterministic in `config` (seed included).
pub fn generate_corpus(config: &GeneratorConfig) -> Result<Corpus> {
    config.validate()?;
    let k = config.keypoint_count();
    let l_total = config.landmark_count();
    let t = config.clip_length;
    let validity: Vec<bool> = (0..l_total).map(|i| i < config.landmarks.len()).collect();

    let mut samples = Vec::new();
    let mut clips = Vec::new();
    let mut subject_counter = 0u64;
    let mut sequence_counter = 0u64;
    for s in 0..config.num_studies {
        let mut srng = rng::stream(config.seed, "generator.study", s as u64);
        let f_lo = srng.gen_range(0.3..0.8);
        let study = StudyParams {
            f_lo,
            f_hi: f_lo + srng.gen_range(0.5..1.5),
            amplitude: srng.gen_range(0.7..1.2),
            noise_m: if config.obs_noise_mm_max > config.obs_noise_mm_min {
                srng.gen_range(config.obs_noise_mm_min..config.obs_noise_mm_max) / 1000.0
            } else {
                config.obs_noise_mm_min / 1000.0
            },
            keypoint_noise_m: if config.keypoint_noise_mm_max > config.keypoint_noise_mm_min {
                srng.gen_range(config.keypoint_noise_mm_min..config.keypoint_noise_mm_max) / 1000.0
            } else {
                config.keypoint_noise_mm_min / 1000.0
            },
        };
        let study_id = format!("study{s:02}");
        for sub in 0..config.subjects_per_study {
            let mut subrng = rng::stream(config.seed, "generator.subject", subject_counter);
            subject_counter += 1;
            let z: f64 = subrng.sample(rand_distr::StandardNormal);
            let body = (1.0 + config.subject_scale_sd * z).clamp(0.8, 1.2);
            let j = config.segment_jitter;
            let subject = SubjectParams {
                joint_scale: (0..k).map(|_| body * (1.0 + j * subrng.gen_range(-1.0..1.0))).collect(),
                offset_scale: subrng.gen_range(0.9..1.1),
            };
            let subject_id = format!("{study_id}_sub{sub:02}");
            for q in 0..config.sequences_per_subject {
                let mut qrng = rng::stream(config.seed, rng::STREAM_GENERATOR, sequence_counter);
                let mut nrng = rng::stream(config.seed, "generator.noise", sequence_counter);
                let mut krng = rng::stream(config.seed, "generator.keypoint_noise", sequence_counter);
                sequence_counter += 1;
                let regime = if qrng.gen::<f64>() < config.ambiguity_fraction {
                    Regime::Ambiguous
                } else {
                    Regime::Nominal
                };
                let seq = simulate_sequence(config, &study, &subject, regime, &mut qrng, &mut nrng, &mut krng);
                let sequence_id = format!("{subject_id}_seq{q:02}");
                for (c, range) in segment(config.frames_per_sequence, t).into_iter().enumerate() {
                    let clip_id = format!("{sequence_id}_c{c:02}");
                    let kp = seq.keypoints[range.start * k * 3..range.end * k * 3].to_vec();
                    let lm = seq.landmarks[range.start * l_total * 3..range.end * l_total * 3].to_vec();
                    samples.push(MotionSample {
                        clip_id: clip_id.clone(),
                        subject_id: subject_id.clone(),
                        study_id: study_id.clone(),
                        sequence_id: sequence_id.clone(),
                        regime,
                        keypoints: Tensor::new(vec![t, k, 3], kp)?,
                        landmarks: Tensor::new(vec![t, l_total, 3], lm)?,
                        landmark_validity: validity.clone(),
                    });
                    clips.push(ClipEntry {
                        clip_id,
                        subject_id: subject_id.clone(),
                        study_id: study_id.clone(),
                        sequence_id: sequence_id.clone(),
                        regime,
                        keypoints_sha256: String::new(),
                        landmarks_sha256: String::new(),
                    });
                }
            }
        }
    }
    let mut landmark_names: Vec<String> = config.landmarks.iter().map(|l| l.name.clone()).collect();
    landmark_names.extend((0..config.padded_landmarks).map(|i| format!("pad{i}")));
    let manifest = CorpusManifest {
        format_version: CORPUS_FORMAT_VERSION,
        keypoint_count: k,
        landmark_count: l_total,
        clip_length: t,
        sample_rate_hz: config.sample_rate_hz,
        keypoint_names: config.chain.joints.iter().map(|j| j.name.clone()).collect(),
        landmark_names,
        landmark_validity: validity,
        triplets: default_triplets(&config.landmarks),
        generator: Some(config.clone()),
        validity_sha256: String::new(),
        clips,
    };
    Ok(Corpus { manifest, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(affine: bool) -> GeneratorConfig {
        GeneratorConfig {
            num_studies: 2,
            subjects_per_study: 2,
            sequences_per_subject: 1,
            frames_per_sequence: 130,
            affine_only: affine,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn shapes_and_padding() {
        let corpus = generate_corpus(&tiny(false)).unwrap();
        assert_eq!(corpus.samples.len(), 2 * 2 * 2);
        let s = &corpus.samples[0];
        assert_eq!(s.keypoints.shape(), &[60, 20, 3]);
        assert_eq!(s.landmarks.shape(), &[60, 43, 3]);
        assert_eq!(s.landmark_validity.iter().filter(|v| !**v).count(), 3);
        for t in 0..60 {
            for l in 40..43 {
                for d in 0..3 {
                    assert_eq!(s.landmarks.at(&[t, l, d]), 0.0);
                }
            }
        }
        s.validate().unwrap();
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_corpus(&tiny(false)).unwrap();
        let b = generate_corpus(&tiny(false)).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = generate_corpus(&GeneratorConfig { seed: 5, ..tiny(false) }).unwrap();
        assert_ne!(a.samples[0].keypoints, c.samples[0].keypoints);
    }

    #[test]
    fn default_has_sixteen_studies() {
        let cfg = GeneratorConfig {
            subjects_per_study: 1,
            frames_per_sequence: 60,
            ..GeneratorConfig::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let studies: std::collections::BTreeSet<_> = corpus.samples.iter().map(|s| &s.study_id).collect();
        assert_eq!(studies.len(), 16);
    }

    #[test]
    fn inconsistent_chain_is_rejected() {
        let mut cfg = tiny(false);
        cfg.chain.joints[3].parent = Some(7);
        assert!(matches!(generate_corpus(&cfg), Err(Error::Config(_))));
        let mut cfg = tiny(false);
        cfg.landmarks[0].anchor_b = 99;
        assert!(generate_corpus(&cfg).is_err());
    }

    #[test]
    fn limbs_have_plausible_lengths() {
        let corpus = generate_corpus(&tiny(false)).unwrap();
        let kp = &corpus.samples[0].keypoints;
        let d = |a: usize, b: usize| {
            let v: f64 = (0..3).map(|c| (kp.at(&[0, a, c]) - kp.at(&[0, b, c])).powi(2)).sum();
            v.sqrt()
        };
        let thigh = d(14, 15);
        assert!((0.3..0.55).contains(&thigh), "{thigh}");
    }
}

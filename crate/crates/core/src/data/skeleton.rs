//! Default 20-keypoint chain and 40 anatomically inspired landmarks.
//!
//! Axes: +y up, +x to the subject's left, +z forward. Lengths in meters,
//! angles in radians.

use super::generator::{ChainSpec, JointSpec, LandmarkSpec};

fn joint(name: &str, parent: Option<usize>, offset: [f64; 3], rest: [f64; 3], amplitude: [f64; 3]) -> JointSpec {
    JointSpec {
        name: name.into(),
        parent,
        offset,
        rest,
        amplitude,
    }
}

/// Keypoint order is the flattening order of model inputs.
pub fn default_chain() -> ChainSpec {
    let z = [0.0; 3];
    let joints = vec![
        joint("pelvis", None, [0.0, 0.0, 0.0], z, [0.08, 0.35, 0.08]),
        joint("spine", Some(0), [0.0, 0.12, -0.01], z, [0.15, 0.15, 0.10]),
        joint("chest", Some(1), [0.0, 0.16, 0.0], z, [0.10, 0.15, 0.08]),
        joint("neck", Some(2), [0.0, 0.20, 0.0], z, [0.25, 0.35, 0.15]),
        joint("head", Some(3), [0.0, 0.09, 0.02], z, [0.15, 0.30, 0.15]),
        joint("head_top", Some(4), [0.0, 0.10, 0.06], z, z),
        joint(
            "l_shoulder",
            Some(2),
            [0.17, 0.13, -0.02],
            [0.0, 0.0, 0.25],
            [0.6, 0.3, 0.35],
        ),
        joint(
            "l_elbow",
            Some(6),
            [0.0, -0.28, 0.0],
            [-1.0, 0.0, 0.0],
            [0.6, 0.15, 0.05],
        ),
        joint("l_wrist", Some(7), [0.0, -0.25, 0.0], z, [0.3, 0.25, 0.25]),
        joint("l_hand", Some(8), [0.0, -0.08, 0.01], z, z),
        joint(
            "r_shoulder",
            Some(2),
            [-0.17, 0.13, -0.02],
            [0.0, 0.0, -0.25],
            [0.6, 0.3, 0.35],
        ),
        joint(
            "r_elbow",
            Some(10),
            [0.0, -0.28, 0.0],
            [-1.0, 0.0, 0.0],
            [0.6, 0.15, 0.05],
        ),
        joint("r_wrist", Some(11), [0.0, -0.25, 0.0], z, [0.3, 0.25, 0.25]),
        joint("r_hand", Some(12), [0.0, -0.08, 0.01], z, z),
        joint(
            "l_hip",
            Some(0),
            [0.09, -0.07, 0.0],
            [-0.3, 0.0, 0.05],
            [0.45, 0.15, 0.12],
        ),
        joint(
            "l_knee",
            Some(14),
            [0.0, -0.42, 0.0],
            [0.6, 0.0, 0.0],
            [0.4, 0.05, 0.03],
        ),
        joint("l_ankle", Some(15), [0.0, -0.41, 0.0], z, [0.25, 0.1, 0.1]),
        joint(
            "r_hip",
            Some(0),
            [-0.09, -0.07, 0.0],
            [-0.3, 0.0, -0.05],
            [0.45, 0.15, 0.12],
        ),
        joint(
            "r_knee",
            Some(17),
            [0.0, -0.42, 0.0],
            [0.6, 0.0, 0.0],
            [0.4, 0.05, 0.03],
        ),
        joint("r_ankle", Some(18), [0.0, -0.41, 0.0], z, [0.25, 0.1, 0.1]),
    ];
    ChainSpec {
        joints,
        root_height: 0.95,
    }
}

fn lm(name: &str, a: usize, b: usize, alpha: f64, reference: usize, offset: [f64; 3]) -> LandmarkSpec {
    LandmarkSpec {
        name: name.into(),
        anchor_a: a,
        anchor_b: b,
        alpha,
        reference,
        offset,
    }
}

/// Landmark positions relative to a segment frame: axis 1 runs from
/// `anchor_a` to `anchor_b`, axis 2 points towards `reference` (made
/// orthogonal to axis 1), axis 3 completes a right-handed frame.
pub fn default_landmarks() -> Vec<LandmarkSpec> {
    vec![
        // pelvis, frame: pelvis -> spine, towards l_hip
        lm("l_asis", 0, 1, -0.2, 14, [0.0, 0.12, 0.11]),
        lm("r_asis", 0, 1, -0.2, 14, [0.0, -0.12, 0.11]),
        lm("l_psis", 0, 1, 0.1, 14, [0.0, 0.05, -0.09]),
        lm("r_psis", 0, 1, 0.1, 14, [0.0, -0.05, -0.09]),
        lm("sacrum", 0, 1, 0.0, 14, [0.0, 0.0, -0.11]),
        // trunk, frame: spine -> neck, towards l_shoulder
        lm("sternum", 1, 3, 0.8, 6, [0.0, 0.0, 0.09]),
        lm("xiphoid", 1, 3, 0.35, 6, [0.0, 0.0, 0.11]),
        lm("c7", 1, 3, 1.0, 6, [0.02, 0.0, -0.07]),
        lm("l_clavicle", 1, 3, 0.95, 6, [0.0, 0.08, 0.05]),
        // head, frame: head -> head_top, towards neck
        lm("l_ear", 4, 5, 0.2, 3, [0.0, 0.02, 0.08]),
        lm("r_ear", 4, 5, 0.2, 3, [0.0, 0.02, -0.08]),
        lm("forehead", 4, 5, 0.6, 3, [0.0, -0.09, 0.0]),
        // upper arms, frame: shoulder -> elbow, towards wrist
        lm("l_deltoid", 6, 7, 0.25, 8, [0.0, 0.0, 0.05]),
        lm("l_lat_epicondyle", 6, 7, 1.0, 8, [0.0, -0.01, 0.035]),
        lm("l_med_epicondyle", 6, 7, 1.0, 8, [0.0, -0.01, -0.04]),
        lm("r_deltoid", 10, 11, 0.25, 12, [0.0, 0.0, -0.05]),
        lm("r_lat_epicondyle", 10, 11, 1.0, 12, [0.0, -0.01, -0.035]),
        lm("r_med_epicondyle", 10, 11, 1.0, 12, [0.0, -0.01, 0.04]),
        // forearms, frame: elbow -> wrist, towards shoulder
        lm("l_radial_styloid", 7, 8, 1.0, 6, [0.0, 0.0, 0.03]),
        lm("l_ulnar_styloid", 7, 8, 1.0, 6, [0.0, 0.0, -0.025]),
        lm("l_forearm", 7, 8, 0.4, 6, [0.0, -0.03, 0.0]),
        lm("r_radial_styloid", 11, 12, 1.0, 10, [0.0, 0.0, -0.03]),
        lm("r_ulnar_styloid", 11, 12, 1.0, 10, [0.0, 0.0, 0.025]),
        lm("r_forearm", 11, 12, 0.4, 10, [0.0, -0.03, 0.0]),
        // hands, frame: wrist -> hand, towards elbow
        lm("l_mcp2", 8, 9, 1.0, 7, [0.0, 0.0, 0.035]),
        lm("l_mcp5", 8, 9, 1.0, 7, [0.0, 0.0, -0.03]),
        lm("r_mcp2", 12, 13, 1.0, 11, [0.0, 0.0, -0.035]),
        lm("r_mcp5", 12, 13, 1.0, 11, [0.0, 0.0, 0.03]),
        // thighs, frame: hip -> knee, towards ankle
        lm("l_thigh", 14, 15, 0.5, 16, [0.0, -0.02, 0.07]),
        lm("l_lat_knee", 14, 15, 1.0, 16, [0.0, 0.0, 0.05]),
        lm("l_med_knee", 14, 15, 1.0, 16, [0.0, 0.0, -0.05]),
        lm("r_thigh", 17, 18, 0.5, 19, [0.0, -0.02, -0.07]),
        lm("r_lat_knee", 17, 18, 1.0, 19, [0.0, 0.0, -0.05]),
        lm("r_med_knee", 17, 18, 1.0, 19, [0.0, 0.0, 0.05]),
        // shanks, frame: knee -> ankle, towards hip
        lm("l_tibia", 15, 16, 0.3, 14, [0.0, -0.04, 0.0]),
        lm("l_lat_malleolus", 15, 16, 1.0, 14, [0.0, 0.0, 0.04]),
        lm("l_med_malleolus", 15, 16, 1.0, 14, [0.0, 0.0, -0.035]),
        lm("r_tibia", 18, 19, 0.3, 17, [0.0, -0.04, 0.0]),
        lm("r_lat_malleolus", 18, 19, 1.0, 17, [0.0, 0.0, -0.04]),
        lm("r_med_malleolus", 18, 19, 1.0, 17, [0.0, 0.0, 0.035]),
    ]
}

/// Joint-angle triplets over landmark indices: the angle at the middle
/// landmark between the segments to the outer two.
pub fn default_triplets(landmarks: &[LandmarkSpec]) -> Vec<[usize; 3]> {
    const NAMED: [[&str; 3]; 10] = [
        ["l_deltoid", "l_lat_epicondyle", "l_radial_styloid"],
        ["r_deltoid", "r_lat_epicondyle", "r_radial_styloid"],
        ["l_lat_epicondyle", "l_radial_styloid", "l_mcp2"],
        ["r_lat_epicondyle", "r_radial_styloid", "r_mcp2"],
        ["l_thigh", "l_lat_knee", "l_lat_malleolus"],
        ["r_thigh", "r_lat_knee", "r_lat_malleolus"],
        ["r_asis", "l_asis", "l_lat_knee"],
        ["l_asis", "r_asis", "r_lat_knee"],
        ["xiphoid", "sternum", "forehead"],
        ["sacrum", "c7", "forehead"],
    ];
    let find = |n: &str| landmarks.iter().position(|l| l.name == n);
    NAMED
        .iter()
        .filter_map(|[a, b, c]| Some([find(a)?, find(b)?, find(c)?]))
        .collect()
}

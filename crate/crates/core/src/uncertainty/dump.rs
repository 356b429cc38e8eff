//! Prediction dump.
//!
//! ```text
//! <dir>/manifest.csv                     clip_id,predictions_file,landmarks_file
//! <dir>/predictions_<clip_id>.csv        one row per frame
//! ```
//!
//! Each prediction table has the columns `frame_index`, then `l<i>_x,
//! l<i>_y, l<i>_z` (mean, meters) for every landmark, then `l<i>_epi_x ..`
//! and `l<i>_ale_x ..` (variances, m^2) in the same landmark order.
//! `landmarks_file` names the ground-truth table in the corpus directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::Prediction;
use crate::data::landmarks_file;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const PREDICTION_MANIFEST: &str = "manifest.csv";

fn header(landmarks: usize) -> String {
    let mut cols = vec!["frame_index".to_string()];
    for tag in ["", "_epi", "_ale"] {
        for l in 0..landmarks {
            for axis in ["x", "y", "z"] {
                cols.push(format!("l{l}{tag}_{axis}"));
            }
        }
    }
    cols.join(",")
}

pub fn write_prediction_dump<S: Scalar>(prediction: &Prediction<S>, clip_ids: &[String], dir: &Path) -> Result<()> {
    let shape = prediction.mean.shape();
    if shape.len() != 4 || shape[0] != clip_ids.len() {
        return Err(Error::invalid(
            "write_prediction_dump",
            format!("{} clip ids for predictions of shape {shape:?}", clip_ids.len()),
        ));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (t, l) = (shape[1], shape[2]);
    let frame = 3 * l;
    let head = header(l);
    let mut manifest = String::from("clip_id,predictions_file,landmarks_file\n");
    for (c, id) in clip_ids.iter().enumerate() {
        let name = format!("predictions_{id}.csv");
        let mut out = String::with_capacity(t * frame * 3 * 24);
        out.push_str(&head);
        out.push('\n');
        for f in 0..t {
            let at = (c * t + f) * frame;
            let _ = write!(out, "{f}");
            for field in [&prediction.mean, &prediction.epi, &prediction.ale] {
                for v in &field.data()[at..at + frame] {
                    let _ = write!(out, ",{:?}", v.as_f64());
                }
            }
            out.push('\n');
        }
        let path = dir.join(&name);
        fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        let _ = writeln!(manifest, "{id},{name},{}", landmarks_file(id));
    }
    let path = dir.join(PREDICTION_MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

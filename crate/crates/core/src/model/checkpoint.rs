//! Text checkpoint format.
//!
//! ```text
//! relikin-checkpoint 1
//! input_dim 60
//! landmark_count 43
//! seq_len 60
//! hidden_size 128
//! num_layers 2
//! dropout_rate 0.1
//! heteroscedastic false
//! log_var_clamp -10 4
//! input_skip true
//! normalized true
//! tensor layer0.w_ih 60 512
//! <60 lines of 512 space-separated values>
//! ...
//! end
//! ```
//!
//! Tensors appear in [`ModelParameters::tensors`] order, followed by the
//! four normalizer tensors when `normalized` is true. Values use the
//! shortest representation that round-trips exactly, so save -> load -> save
//! reproduces the file byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Linear, LstmLayer, ModelConfig, ModelParameters, Normalizer};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &str = "relikin-checkpoint";
const FORMAT_VERSION: u32 = 1;
const NORMALIZER_NAMES: [&str; 4] = [
    "normalizer.input_mean",
    "normalizer.input_scale",
    "normalizer.output_mean",
    "normalizer.output_scale",
];

pub fn write_checkpoint<S: Scalar>(params: &ModelParameters<S>) -> String {
    let c = &params.config;
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_MAGIC} {FORMAT_VERSION}");
    let _ = writeln!(out, "input_dim {}", c.input_dim);
    let _ = writeln!(out, "landmark_count {}", c.landmark_count);
    let _ = writeln!(out, "seq_len {}", c.seq_len);
    let _ = writeln!(out, "hidden_size {}", c.hidden_size);
    let _ = writeln!(out, "num_layers {}", c.num_layers);
    let _ = writeln!(out, "dropout_rate {}", c.dropout_rate);
    let _ = writeln!(out, "heteroscedastic {}", c.heteroscedastic);
    let _ = writeln!(out, "log_var_clamp {} {}", c.log_var_clamp.0, c.log_var_clamp.1);
    let _ = writeln!(out, "input_skip {}", c.input_skip);
    let _ = writeln!(out, "normalized {}", params.normalizer.is_some());
    let mut named: Vec<(String, &Tensor<S>)> = params.tensor_names().into_iter().zip(params.tensors()).collect();
    if let Some(n) = &params.normalizer {
        named.extend(NORMALIZER_NAMES.iter().map(|s| s.to_string()).zip(n.tensors()));
    }
    for (name, t) in named {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "tensor {name} {}", dims.join(" "));
        let width = *t.shape().last().unwrap_or(&1);
        for row in t.data().chunks(width) {
            let mut first = true;
            for v in row {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
    }
    out.push_str("end\n");
    out
}

pub fn save_checkpoint<S: Scalar>(params: &ModelParameters<S>, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<ModelParameters<S>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&text, path)
}

struct Lines<'a> {
    path: PathBuf,
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn err(&self, field: &str, reason: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: self.line,
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    fn next_line(&mut self, field: &str) -> Result<&'a str> {
        match self.iter.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => {
                self.line += 1;
                Err(self.err(field, "unexpected end of file"))
            }
        }
    }

    /// Reads `key v1 v2 ...` and returns the values.
    fn keyed(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let line = self.next_line(key)?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(self.err(key, format!("expected `{key}`, found `{line}`")));
        }
        Ok(parts.collect())
    }

    fn parse_one<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let vals = self.keyed(key)?;
        match vals.as_slice() {
            [v] => v.parse().map_err(|_| self.err(key, format!("cannot parse `{v}`"))),
            _ => Err(self.err(key, format!("expected one value, found {}", vals.len()))),
        }
    }
}

pub fn read_checkpoint<S: Scalar>(text: &str, path: &Path) -> Result<ModelParameters<S>> {
    let mut lines = Lines {
        path: path.to_path_buf(),
        iter: text.lines().enumerate(),
        line: 0,
    };
    let version: u32 = lines.parse_one(CHECKPOINT_MAGIC)?;
    if version != FORMAT_VERSION {
        return Err(lines.err("version", format!("unsupported checkpoint version {version}")));
    }
    let input_dim = lines.parse_one("input_dim")?;
    let landmark_count = lines.parse_one("landmark_count")?;
    let seq_len = lines.parse_one("seq_len")?;
    let hidden_size = lines.parse_one("hidden_size")?;
    let num_layers = lines.parse_one("num_layers")?;
    let dropout_rate = lines.parse_one("dropout_rate")?;
    let heteroscedastic = lines.parse_one("heteroscedastic")?;
    let clamp = lines.keyed("log_var_clamp")?;
    let parse_f = |s: &str, l: &Lines| {
        s.parse::<f64>()
            .map_err(|_| l.err("log_var_clamp", format!("cannot parse `{s}`")))
    };
    let log_var_clamp = match clamp.as_slice() {
        [lo, hi] => (parse_f(lo, &lines)?, parse_f(hi, &lines)?),
        _ => return Err(lines.err("log_var_clamp", "expected two values")),
    };
    let input_skip = lines.parse_one("input_skip")?;
    let normalized: bool = lines.parse_one("normalized")?;
    let config = ModelConfig {
        input_dim,
        landmark_count,
        seq_len,
        hidden_size,
        num_layers,
        dropout_rate,
        heteroscedastic,
        log_var_clamp,
        input_skip,
    };
    config.validate().map_err(|e| lines.err("config", e.to_string()))?;

    // Build a skeleton with the right shapes, then fill it in order.
    let h = hidden_size;
    let out_dim = config.output_dim();
    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    for l in 0..num_layers {
        let input = if l == 0 { input_dim } else { h };
        expected.push((format!("layer{l}.w_ih"), vec![input, 4 * h]));
        expected.push((format!("layer{l}.w_hh"), vec![h, 4 * h]));
        expected.push((format!("layer{l}.bias"), vec![4 * h]));
    }
    expected.push(("mean_head.weight".into(), vec![config.mean_head_inputs(), out_dim]));
    expected.push(("mean_head.bias".into(), vec![out_dim]));
    if heteroscedastic {
        expected.push(("log_var_head.weight".into(), vec![h, out_dim]));
        expected.push(("log_var_head.bias".into(), vec![out_dim]));
    }
    if normalized {
        for (name, width) in NORMALIZER_NAMES.iter().zip([input_dim, input_dim, out_dim, out_dim]) {
            expected.push((name.to_string(), vec![width]));
        }
    }

    let mut tensors = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let header = lines.keyed("tensor")?;
        let (got_name, dims) = header
            .split_first()
            .ok_or_else(|| lines.err("tensor", "missing tensor name"))?;
        if got_name != name {
            return Err(lines.err("tensor", format!("expected `{name}`, found `{got_name}`")));
        }
        let dims: Vec<usize> = dims
            .iter()
            .map(|d| d.parse().map_err(|_| lines.err(name, format!("bad dimension `{d}`"))))
            .collect::<Result<_>>()?;
        if &dims != shape {
            return Err(lines.err(name, format!("dimensions {dims:?} do not match config {shape:?}")));
        }
        let width = *shape.last().unwrap();
        let rows = shape.iter().product::<usize>() / width;
        let mut data = Vec::with_capacity(rows * width);
        for _ in 0..rows {
            let row = lines.next_line(name)?;
            let before = data.len();
            for v in row.split_whitespace() {
                let x: S = v
                    .parse()
                    .map_err(|_| lines.err(name, format!("cannot parse value `{v}`")))?;
                if !x.is_finite() {
                    return Err(lines.err(name, "non-finite value"));
                }
                data.push(x);
            }
            if data.len() - before != width {
                return Err(lines.err(name, format!("expected {width} values, found {}", data.len() - before)));
            }
        }
        tensors.push(Tensor::new(shape.clone(), data)?);
    }
    let tail = lines.next_line("end")?;
    if tail != "end" {
        return Err(lines.err("end", format!("expected `end`, found `{tail}`")));
    }

    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("tensor count matches skeleton");
    let layers = (0..num_layers)
        .map(|_| LstmLayer {
            w_ih: next(),
            w_hh: next(),
            bias: next(),
        })
        .collect();
    let mean_head = Linear {
        weight: next(),
        bias: next(),
    };
    let log_var_head = heteroscedastic.then(|| Linear {
        weight: next(),
        bias: next(),
    });
    let normalizer = normalized.then(|| Normalizer {
        input_mean: next(),
        input_scale: next(),
        output_mean: next(),
        output_scale: next(),
    });
    Ok(ModelParameters {
        config,
        layers,
        mean_head,
        log_var_head,
        normalizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn config() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            landmark_count: 2,
            seq_len: 4,
            hidden_size: 5,
            num_layers: 2,
            dropout_rate: 0.1,
            heteroscedastic: true,
            log_var_clamp: (-10.0, 4.0),
            input_skip: true,
        }
    }

    #[test]
    fn save_load_save_is_byte_stable() {
        let mut p = init_model::<f64>(&config(), 9).unwrap();
        let mut n = Normalizer::identity(6, 6);
        n.input_scale.data_mut()[2] = 0.123_456_789_012_345_6;
        n.output_mean.data_mut()[1] = -1.5e-7;
        p.normalizer = Some(n);
        let text = write_checkpoint(&p);
        let loaded: ModelParameters<f64> = read_checkpoint(&text, Path::new("mem")).unwrap();
        assert_eq!(loaded, p);
        assert_eq!(write_checkpoint(&loaded), text);
    }

    #[test]
    fn wrong_dimensions_report_line() {
        let p = init_model::<f64>(&config(), 9).unwrap();
        let text = write_checkpoint(&p).replacen("tensor layer0.w_ih 6 20", "tensor layer0.w_ih 7 20", 1);
        let err = read_checkpoint::<f64>(&text, Path::new("ckpt.txt"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("ckpt.txt:12"), "{err}");
    }

    #[test]
    fn corrupted_value_is_rejected() {
        let p = init_model::<f64>(&config(), 9).unwrap();
        let mut lines: Vec<String> = write_checkpoint(&p).lines().map(String::from).collect();
        lines[12] = lines[12].replacen(' ', " zz ", 1);
        let err = read_checkpoint::<f64>(&lines.join("\n"), Path::new("c"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("c:13"), "{err}");
    }
}

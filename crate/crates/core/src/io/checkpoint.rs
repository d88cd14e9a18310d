//! Plain-text checkpoints for models and classifier heads. Floats are written
//! in shortest round-trip form, so a load reproduces the saved values
//! exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};
use crate::loss::CrystalHead;
use crate::math::{DenseMatrix, DenseVector};
use crate::trainer::{Activation, HeadKind, Layer, MlpModel, TrainHistory};

const HEAD_MAGIC: &str = "crystal-head v1";
const MODEL_MAGIC: &str = "crystal-mlp v1";

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn bad(msg: impl Into<String>) -> Error {
    Error::BadCheckpoint(msg.into())
}

struct Lines<'a> {
    inner: std::iter::Filter<std::str::Lines<'a>, fn(&&str) -> bool>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        fn keep(l: &&str) -> bool {
            !l.trim().is_empty()
        }
        Lines {
            inner: text.lines().filter(keep as fn(&&str) -> bool),
        }
    }

    fn next_line(&mut self, what: &str) -> Result<&'a str> {
        self.inner
            .next()
            .map(str::trim)
            .ok_or_else(|| bad(format!("unexpected end of file, expected {what}")))
    }

    /// Reads `key value...` and returns the value part.
    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next_line(key)?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.trim()),
            _ if line == key => Ok(""),
            _ => Err(bad(format!("expected `{key}`, found `{line}`"))),
        }
    }

    fn keyed_usize(&mut self, key: &str) -> Result<usize> {
        let v = self.keyed(key)?;
        v.parse()
            .map_err(|_| bad(format!("`{key}` value `{v}` is not an integer")))
    }

    fn floats(&mut self, key: &str, expected: usize) -> Result<Vec<f64>> {
        let v = self.keyed(key)?;
        let values = v
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| bad(format!("`{s}` is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != expected {
            return Err(bad(format!(
                "`{key}` has {} values, expected {expected}",
                values.len()
            )));
        }
        Ok(values)
    }
}

fn kind_name(kind: HeadKind) -> &'static str {
    match kind {
        HeadKind::Softmax => "softmax",
        HeadKind::CrystalFixed(_) => "crystal",
        HeadKind::CrystalTrainable => "crystal-trainable",
    }
}

pub fn head_string(head: &CrystalHead, kind: HeadKind) -> String {
    let mut out = format!("{HEAD_MAGIC}\n");
    out.push_str(&format!("kind {}\n", kind_name(kind)));
    out.push_str(&format!("classes {}\n", head.num_classes()));
    out.push_str(&format!("dim {}\n", head.feature_dim()));
    out.push_str(&format!("alpha {:?}\n", head.alpha()));
    out.push_str(&format!("bias {}\n", join(head.bias())));
    for row in head.weights().iter_rows() {
        out.push_str(&format!("w {}\n", join(row)));
    }
    out
}

pub fn parse_head(text: &str) -> Result<(CrystalHead, HeadKind)> {
    let mut lines = Lines::new(text);
    if lines.next_line("header")? != HEAD_MAGIC {
        return Err(bad(format!("missing `{HEAD_MAGIC}` header")));
    }
    let kind = lines.keyed("kind")?;
    let classes = lines.keyed_usize("classes")?;
    let dim = lines.keyed_usize("dim")?;
    let alpha = lines.floats("alpha", 1)?[0];
    let kind = match kind {
        "softmax" => HeadKind::Softmax,
        "crystal" => HeadKind::CrystalFixed(alpha),
        "crystal-trainable" => HeadKind::CrystalTrainable,
        other => return Err(bad(format!("unknown head kind `{other}`"))),
    };
    let bias = lines.floats("bias", classes)?;
    let mut data = Vec::with_capacity(classes * dim);
    for _ in 0..classes {
        data.extend(lines.floats("w", dim)?);
    }
    let head = CrystalHead::new(
        DenseMatrix::new(classes, dim, data)?,
        DenseVector::new(bias)?,
        alpha,
        kind == HeadKind::CrystalTrainable,
    )?;
    Ok((head, kind))
}

pub fn model_string(model: &MlpModel) -> String {
    let mut out = format!("{MODEL_MAGIC}\n");
    out.push_str(&format!("layers {}\n", model.layers().len()));
    for layer in model.layers() {
        out.push_str(&format!(
            "layer {} {} {}\n",
            layer.input_dim(),
            layer.output_dim(),
            layer.activation.name()
        ));
        out.push_str(&format!("bias {}\n", join(&layer.bias)));
        for row in layer.weights.iter_rows() {
            out.push_str(&format!("w {}\n", join(row)));
        }
    }
    out
}

pub fn parse_model(text: &str) -> Result<MlpModel> {
    let mut lines = Lines::new(text);
    if lines.next_line("header")? != MODEL_MAGIC {
        return Err(bad(format!("missing `{MODEL_MAGIC}` header")));
    }
    let count = lines.keyed_usize("layers")?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let spec: Vec<&str> = lines.keyed("layer")?.split_whitespace().collect();
        let [input, output, act] = spec[..] else {
            return Err(bad("`layer` needs input, output and activation"));
        };
        let input: usize = input.parse().map_err(|_| bad("bad layer input size"))?;
        let output: usize = output.parse().map_err(|_| bad("bad layer output size"))?;
        let activation =
            Activation::parse(act).ok_or_else(|| bad(format!("unknown activation `{act}`")))?;
        let bias = lines.floats("bias", output)?;
        let mut data = Vec::with_capacity(input * output);
        for _ in 0..output {
            data.extend(lines.floats("w", input)?);
        }
        layers.push(Layer {
            weights: DenseMatrix::new(output, input, data)?,
            bias: DenseVector::new(bias)?,
            activation,
        });
    }
    MlpModel::new(layers)
}

pub fn write_head(path: &Path, head: &CrystalHead, kind: HeadKind) -> Result<()> {
    write_atomic(path, head_string(head, kind).as_bytes())
}

pub fn read_head(path: &Path) -> Result<(CrystalHead, HeadKind)> {
    parse_head(&read_to_string(path)?)
}

pub fn write_model(path: &Path, model: &MlpModel) -> Result<()> {
    write_atomic(path, model_string(model).as_bytes())
}

pub fn read_model(path: &Path) -> Result<MlpModel> {
    parse_model(&read_to_string(path)?)
}

/// `iter,loss,grad_norm` plus an `alpha` column when alphas were recorded.
pub fn history_csv(history: &TrainHistory) -> String {
    let with_alpha = history.alphas.len() == history.losses.len() && !history.alphas.is_empty();
    let mut out = String::from(if with_alpha {
        "iter,loss,grad_norm,alpha\n"
    } else {
        "iter,loss,grad_norm\n"
    });
    for (i, loss) in history.losses.iter().enumerate() {
        let norm = history.grad_norms.get(i).copied().unwrap_or(f64::NAN);
        if with_alpha {
            out.push_str(&format!("{i},{loss:?},{norm:?},{:?}\n", history.alphas[i]));
        } else {
            out.push_str(&format!("{i},{loss:?},{norm:?}\n"));
        }
    }
    out
}

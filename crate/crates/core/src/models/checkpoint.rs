//! Versioned JSON checkpoints for `(encoder, PCN)` pairs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderParams, Linear, PcnParams};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::numfmt::F17Slice;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub encoder: EncoderParams,
    pub pcn: PcnParams,
}

#[derive(Serialize)]
struct LayerOut<'a> {
    rows: usize,
    cols: usize,
    weight: F17Slice<'a>,
    bias: F17Slice<'a>,
}

#[derive(Serialize)]
struct PcnOut<'a> {
    k_in: usize,
    d: usize,
    weight: F17Slice<'a>,
    bias: Option<F17Slice<'a>>,
}

#[derive(Serialize)]
struct FileOut<'a> {
    format_version: u32,
    config_hash: &'a str,
    encoder: Vec<LayerOut<'a>>,
    pcn: PcnOut<'a>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerIn {
    rows: usize,
    cols: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PcnIn {
    k_in: usize,
    d: usize,
    weight: Vec<f64>,
    bias: Option<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileIn {
    format_version: u32,
    config_hash: String,
    encoder: Vec<LayerIn>,
    pcn: PcnIn,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let file = FileOut {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config_hash: &self.config_hash,
            encoder: self
                .encoder
                .layers
                .iter()
                .map(|l| LayerOut {
                    rows: l.in_dim(),
                    cols: l.out_dim(),
                    weight: F17Slice(l.weight.data()),
                    bias: F17Slice(l.bias.data()),
                })
                .collect(),
            pcn: PcnOut {
                k_in: self.pcn.k_in,
                d: self.pcn.d,
                weight: F17Slice(self.pcn.weight.data()),
                bias: self.pcn.bias.as_ref().map(|b| F17Slice(b.data())),
            },
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Checkpoint(format!("serialize: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: FileIn = serde_json::from_str(text).map_err(|e| Error::Parse(format!("checkpoint: {e}")))?;
        if file.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format_version {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
                file.format_version
            )));
        }
        let shape_err = |e: Error| Error::Checkpoint(e.to_string());
        let layers = file
            .encoder
            .into_iter()
            .map(|l| {
                Ok(Linear {
                    weight: Tensor::matrix(l.rows, l.cols, l.weight)?,
                    bias: Tensor::new(vec![l.bias.len()], l.bias)?,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(shape_err)?;
        let encoder = EncoderParams::new(layers).map_err(shape_err)?;
        let p = file.pcn;
        let bias = match p.bias {
            Some(b) => Some(Tensor::new(vec![b.len()], b).map_err(shape_err)?),
            None => None,
        };
        let weight = Tensor::new(vec![p.k_in * p.d, p.d], p.weight).map_err(shape_err)?;
        let pcn = PcnParams::new(weight, bias, p.k_in, p.d).map_err(shape_err)?;
        if pcn.d != encoder.output_dim() {
            return Err(Error::Checkpoint(format!(
                "PCN width {} does not match encoder output {}",
                pcn.d,
                encoder.output_dim()
            )));
        }
        Ok(Self {
            config_hash: file.config_hash,
            encoder,
            pcn,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Verifies that this checkpoint fits a run with the given encoder widths
    /// and PCN input count.
    pub fn check_compatible(&self, encoder_dims: &[usize], pcn_k_in: usize) -> Result<()> {
        if self.encoder.dims() != encoder_dims {
            return Err(Error::Checkpoint(format!(
                "encoder widths {:?} do not match configured {:?}",
                self.encoder.dims(),
                encoder_dims
            )));
        }
        if self.pcn.k_in != pcn_k_in {
            return Err(Error::Checkpoint(format!(
                "PCN was trained for k_in={} but the run needs k_in={pcn_k_in}; \
                 enable clustering with cluster_k={} to reuse it",
                self.pcn.k_in, self.pcn.k_in
            )));
        }
        Ok(())
    }
}

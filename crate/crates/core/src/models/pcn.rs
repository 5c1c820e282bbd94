use rand::Rng;

use super::encoder::Linear;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Prototype calculator network: one linear layer followed by ReLU, mapping
/// `k_in` concatenated embeddings of width `d` to a prototype of width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PcnParams {
    /// `[(k_in·d)×d]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub k_in: usize,
    pub d: usize,
}

impl PcnParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>, k_in: usize, d: usize) -> Result<Self> {
        if weight.shape() != [k_in * d, d] {
            return Err(Error::dim(format!(
                "PCN weight {:?} does not match k_in={k_in}, d={d}",
                weight.shape()
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [d] {
                return Err(Error::dim(format!("PCN bias {:?}, expected [{d}]", b.shape())));
            }
        }
        Ok(Self { weight, bias, k_in, d })
    }

    pub fn init(k_in: usize, d: usize, with_bias: bool, rng: &mut impl Rng) -> Self {
        let lin = Linear::init(k_in * d, d, rng);
        Self {
            weight: lin.weight,
            bias: with_bias.then_some(lin.bias),
            k_in,
            d,
        }
    }

    /// Weights that average the `k_in` copies of each coordinate. On
    /// nonnegative inputs the network then reproduces the mean prototype.
    pub fn block_average(k_in: usize, d: usize, with_bias: bool) -> Self {
        let mut w = vec![0.0; k_in * d * d];
        for j in 0..k_in {
            for c in 0..d {
                w[(j * d + c) * d + c] = 1.0 / k_in as f64;
            }
        }
        Self {
            weight: Tensor::matrix(k_in * d, d, w).expect("positive extents"),
            bias: with_bias.then(|| Tensor::zeros(vec![d])),
            k_in,
            d,
        }
    }

    /// `(k_in·d + 1)·d` with a bias, `k_in·d·d` without.
    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }

    pub fn all_finite(&self) -> bool {
        self.weight.all_finite() && self.bias.as_ref().is_none_or(Tensor::all_finite)
    }

    pub fn slots_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = vec![("pcn.weight".to_string(), self.weight.data_mut())];
        if let Some(b) = &mut self.bias {
            out.push(("pcn.bias".to_string(), b.data_mut()));
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundPcn {
        BoundPcn {
            weight: tape.leaf(self.weight.clone(), trainable),
            bias: self.bias.as_ref().map(|b| tape.leaf(b.clone(), trainable)),
            k_in: self.k_in,
            d: self.d,
        }
    }

    /// Runs the network on a concatenated input without recording a graph.
    pub fn forward_values(&self, concatenated: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(Tensor::vector(concatenated.to_vec()));
        let p = bound.forward(&mut tape, x)?;
        Ok(tape.value(p).data().to_vec())
    }
}

#[derive(Debug, Clone)]
pub struct BoundPcn {
    weight: Var,
    bias: Option<Var>,
    pub k_in: usize,
    pub d: usize,
}

impl BoundPcn {
    /// Wraps already-recorded weight (and optional bias) variables.
    pub fn from_vars(weight: Var, bias: Option<Var>, k_in: usize, d: usize) -> Self {
        Self { weight, bias, k_in, d }
    }

    /// `ReLU(Wᵀ·x + b)` for a concatenated input of length `k_in·d`.
    pub fn forward(&self, tape: &mut Tape, concatenated: Var) -> Result<Var> {
        let len = tape.value(concatenated).numel();
        if len != self.k_in * self.d {
            return Err(Error::dim(format!(
                "PCN expects {} concatenated values (k_in={}, d={}), got {len}",
                self.k_in * self.d,
                self.k_in,
                self.d
            )));
        }
        let mut h = tape.matmul(concatenated, self.weight)?;
        if let Some(b) = self.bias {
            h = tape.add(h, b)?;
        }
        Ok(tape.relu(h))
    }

    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        std::iter::once(self.weight)
            .chain(self.bias)
            .map(|v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
            })
            .collect()
    }
}

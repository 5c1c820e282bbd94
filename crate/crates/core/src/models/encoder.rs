use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Fully connected layer, `y = x·W + b` with `W` stored `[in×out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Glorot-uniform weights and zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, w).expect("positive extents"),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// MLP feature encoder. ReLU between layers, no activation on the output,
/// so embeddings may be negative.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Linear>,
}

impl EncoderParams {
    pub fn new(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::arg("encoder needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dim(format!(
                    "encoder layer {} outputs {} but layer {} expects {}",
                    i,
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.numel() != l.out_dim() {
                return Err(Error::dim(format!(
                    "encoder layer {i}: bias has {} entries, expected {}",
                    l.bias.numel(),
                    l.out_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn init(input_dim: usize, hidden: &[usize], output_dim: usize, rng: &mut impl Rng) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let layers = dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Linear::out_dim));
        d
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.all_finite() && l.bias.all_finite())
    }

    /// Named flat views over every parameter, in binding order.
    pub fn slots_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("encoder.{i}.weight"), l.weight.data_mut()));
            out.push((format!("encoder.{i}.bias"), l.bias.data_mut()));
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundEncoder {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                (
                    tape.leaf(l.weight.clone(), trainable),
                    tape.leaf(l.bias.clone(), trainable),
                )
            })
            .collect();
        BoundEncoder { layers }
    }

    /// Embeds one input vector without recording a graph.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(Tensor::vector(x.to_vec()));
        let e = bound.forward(&mut tape, xv)?;
        Ok(tape.value(e).data().to_vec())
    }
}

/// Encoder parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundEncoder {
    layers: Vec<(Var, Var)>,
}

impl BoundEncoder {
    /// Wraps already-recorded `[weight, bias, weight, bias, …]` variables.
    pub fn from_vars(vars: &[Var]) -> Result<Self> {
        if vars.is_empty() || vars.len() % 2 != 0 {
            return Err(Error::arg(format!(
                "encoder needs weight/bias pairs, got {} variables",
                vars.len()
            )));
        }
        Ok(Self {
            layers: vars.chunks(2).map(|c| (c[0], c[1])).collect(),
        })
    }

    /// Forward pass for a batch `[m×in]` or a single vector `[in]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let width = *tape.value(h).shape().last().expect("rank >= 1");
            let expect = tape.value(w).rows();
            if width != expect {
                return Err(Error::dim(format!(
                    "encoder layer {i}: expected input width {expect}, got {width}"
                )));
            }
            h = tape.matmul(h, w)?;
            h = tape.add_bias(h, b)?;
            if i != last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Gradients in [`EncoderParams::slots_mut`] order; zeros where the
    /// backward sweep did not reach a parameter.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .map(|v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
            })
            .collect()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

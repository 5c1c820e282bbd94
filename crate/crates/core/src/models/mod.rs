//! Parameterised networks, optimizers and checkpoints.

mod checkpoint;
mod encoder;
mod optim;
mod pcn;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use encoder::{BoundEncoder, EncoderParams, Linear};
pub use optim::{Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use pcn::{BoundPcn, PcnParams};

/// FNV-1a over the bit patterns of every value, for cheap "did this change"
/// assertions.
pub fn checksum<'a>(values: impl IntoIterator<Item = &'a f64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for x in values {
        for b in x.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

impl EncoderParams {
    pub fn checksum(&self) -> u64 {
        checksum(
            self.layers
                .iter()
                .flat_map(|l| l.weight.data().iter().chain(l.bias.data())),
        )
    }
}

impl PcnParams {
    pub fn checksum(&self) -> u64 {
        checksum(self.weight.data().iter().chain(self.bias.iter().flat_map(|b| b.data())))
    }
}

/// Network sizes; the input width comes from the benchmark.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub pcn_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            embed_dim: 16,
            pcn_bias: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.embed_dim == 0 {
            return Err(crate::Error::config("model.embed_dim must be >= 1"));
        }
        if self.hidden.contains(&0) {
            return Err(crate::Error::config("model.hidden widths must be >= 1"));
        }
        Ok(())
    }

    /// Fresh encoder and PCN, each from its own stream derived from `seed`.
    pub fn init(&self, input_dim: usize, k_in: usize, seed: u64) -> (EncoderParams, PcnParams) {
        let mut rng = crate::seed::derive_rng(seed, "init-encoder", 0);
        let enc = EncoderParams::init(input_dim, &self.hidden, self.embed_dim, &mut rng);
        let mut rng = crate::seed::derive_rng(seed, "init-pcn", 0);
        let pcn = PcnParams::init(k_in, self.embed_dim, self.pcn_bias, &mut rng);
        (enc, pcn)
    }
}

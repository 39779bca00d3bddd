//! Attention encoder-decoder policy, value critic and twin action-value
//! networks, all evaluated on a [`Tape`](crate::tape::Tape).

mod checkpoint;
mod forward;
mod params;

use serde::{Deserialize, Serialize};

pub use checkpoint::{checkpoint_bytes, model_from_bytes, read_checkpoint, write_checkpoint};
pub use forward::{
    critic_value, decode_step, encode, q_values, BnMode, DecoderCache, Graph, StepContext,
};
pub(crate) use forward::critic_weights;
pub use params::{
    CriticIds, EncoderIds, Group, LayerIds, Layout, Model, NormIds, Param, ParameterSet, PolicyIds, QIds, QNet,
};

use crate::error::{Error, Result};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Logits are squashed to `clip_c · tanh(·)`.
    pub clip_c: f64,
    pub critic_layers: usize,
    pub critic_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            encoder_layers: 3,
            heads: 8,
            ff_dim: 512,
            clip_c: 10.0,
            critic_layers: 3,
            critic_hidden: 128,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("encoder_layers", self.encoder_layers),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("critic_layers", self.critic_layers),
            ("critic_hidden", self.critic_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(self.clip_c > 0.0 && self.clip_c.is_finite()) {
            return Err(Error::InvalidArgument(format!("clip_c must be positive, got {}", self.clip_c)));
        }
        Ok(())
    }
}

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// State transition attention as the decoder's cross-attention.
    #[serde(rename = "STA")]
    Sta,
    /// Temporal cross-attention over all windowed state tokens.
    #[serde(rename = "STANDARD_XATTN")]
    StandardXattn,
    /// STA restricted to the current step (`k_max = 0`).
    #[serde(rename = "NO_HISTORY")]
    NoHistory,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Sta, Variant::StandardXattn, Variant::NoHistory];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sta => "STA",
            Variant::StandardXattn => "STANDARD_XATTN",
            Variant::NoHistory => "NO_HISTORY",
        }
    }

    pub fn uses_transition(self) -> bool {
        !matches!(self, Variant::StandardXattn)
    }
}

impl core::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "STA" | "sta" => Ok(Variant::Sta),
            "STANDARD_XATTN" | "standard" | "standard_xattn" => Ok(Variant::StandardXattn),
            "NO_HISTORY" | "no_history" | "none" => Ok(Variant::NoHistory),
            other => Err(Error::config("variant", format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub variant: Variant,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Decoder tokens per step, one per joint (`m`).
    pub n_joints: usize,
    /// State tokens per step (`n`): `n - 1` visual tokens plus one
    /// proprioceptive token.
    pub n_state_tokens: usize,
    pub k_max: usize,
    /// `(channels, height, width)` of the rendered observation.
    pub obs_grid: [usize; 3],
    pub proprio_dim: usize,
    pub action_scale: f64,
    pub cnn_channels: [usize; 2],
    pub ffn_mult: usize,
    pub head_hidden: usize,
    /// Multiplier applied to raw joint positions before embedding.
    pub proprio_scale: f64,
    /// Standard deviation of learned embeddings (positions, mask token).
    pub embed_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            variant: Variant::Sta,
            n_layers: 4,
            d_model: 512,
            n_heads: 8,
            n_joints: 2,
            n_state_tokens: 2,
            k_max: 15,
            obs_grid: [1, 16, 16],
            proprio_dim: 2,
            action_scale: 1.0,
            cnn_channels: [16, 32],
            ffn_mult: 4,
            head_hidden: 128,
            proprio_scale: 1.0 / 16.0,
            embed_std: 0.02,
        }
    }
}

/// Number of binary planes decoded from each observation channel.
pub const BIT_PLANES: usize = 3;

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        if self.n_layers == 0 {
            return Err(Error::config("n_layers", "must be positive"));
        }
        if self.n_joints == 0 {
            return Err(Error::config("n_joints", "must be positive"));
        }
        if self.n_state_tokens < 2 {
            return Err(Error::config(
                "n_state_tokens",
                "needs at least one visual and one proprioceptive token",
            ));
        }
        if self.obs_grid.contains(&0) || self.obs_grid[1] < 3 || self.obs_grid[2] < 3 {
            return Err(Error::config("obs_grid", "needs channels >= 1 and extent >= 3"));
        }
        if self.proprio_dim != self.n_joints {
            return Err(Error::config("proprio_dim", "must equal n_joints"));
        }
        if !(self.action_scale > 0.0) {
            return Err(Error::config("action_scale", "must be positive"));
        }
        if self.cnn_channels.contains(&0) || self.ffn_mult == 0 || self.head_hidden == 0
        {
            return Err(Error::config("cnn_channels", "widths must be positive"));
        }
        Ok(())
    }

    /// Past steps visible to attention; zero for [`Variant::NoHistory`].
    pub fn effective_history(&self) -> usize {
        match self.variant {
            Variant::NoHistory => 0,
            _ => self.k_max,
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            max_history: self.effective_history(),
        }
    }

    /// Channels fed to the first convolution.
    pub fn encoder_channels(&self) -> usize {
        self.obs_grid[0] * BIT_PLANES
    }

    pub fn visual_tokens(&self) -> usize {
        self.n_state_tokens - 1
    }

    /// Flattened feature count after two stride-2 convolutions.
    pub fn cnn_features(&self) -> usize {
        let h = (self.obs_grid[1] - 1) / 2 + 1;
        let w = (self.obs_grid[2] - 1) / 2 + 1;
        let h2 = (h - 1) / 2 + 1;
        let w2 = (w - 1) / 2 + 1;
        self.cnn_channels[1] * h2 * w2
    }

    /// The small configuration used for the desk-scale experiments.
    pub fn desk(variant: Variant) -> Self {
        PolicyConfig {
            variant,
            n_layers: 2,
            d_model: 64,
            n_heads: 2,
            cnn_channels: [8, 16],
            ..PolicyConfig::default()
        }
    }
}

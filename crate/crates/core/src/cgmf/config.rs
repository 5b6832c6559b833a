use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid config field `{field}`: {reason}")]
pub struct ConfigError {
    pub field: &'static str,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: &'static str, reason: impl Into<String>) -> Self {
        Self {
            field,
            reason: reason.into(),
        }
    }
}

/// Which parts of the fusion module are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    #[serde(default = "yes")]
    pub enable_geo_bias: bool,
    #[serde(default = "yes")]
    pub enable_token_weight: bool,
    #[serde(default = "yes")]
    pub enable_camera_memory: bool,
    #[serde(default = "yes")]
    pub enable_gate: bool,
}

fn yes() -> bool {
    true
}

impl Default for Toggles {
    fn default() -> Self {
        Self::all()
    }
}

impl Toggles {
    pub const fn all() -> Self {
        Self {
            enable_geo_bias: true,
            enable_token_weight: true,
            enable_camera_memory: true,
            enable_gate: true,
        }
    }

    pub const fn none() -> Self {
        Self {
            enable_geo_bias: false,
            enable_token_weight: false,
            enable_camera_memory: false,
            enable_gate: false,
        }
    }
}

/// Dimensions of the three input streams and the shared attention space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FusionConfig {
    pub n_frames: usize,
    pub m_visual: usize,
    pub m_spatial: usize,
    pub d_visual: usize,
    pub d_spatial: usize,
    pub d_attn: usize,
    pub n_heads: usize,
    pub toggles: Toggles,
}

pub const DEFAULT_HEADS: usize = 8;

impl FusionConfig {
    /// Deployment token counts (32 frames, 448/14 and 518/14 patch grids) at
    /// width 64.
    pub const fn demo() -> Self {
        Self {
            n_frames: 32,
            m_visual: 1024,
            m_spatial: 1369,
            d_visual: 64,
            d_spatial: 64,
            d_attn: 64,
            n_heads: DEFAULT_HEADS,
            toggles: Toggles::all(),
        }
    }

    /// Small enough for finite-difference gradient checks.
    pub const fn tiny() -> Self {
        Self {
            n_frames: 2,
            m_visual: 4,
            m_spatial: 6,
            d_visual: 8,
            d_spatial: 6,
            d_attn: 4,
            n_heads: 2,
            toggles: Toggles::all(),
        }
    }

    pub fn with_toggles(mut self, toggles: Toggles) -> Self {
        self.toggles = toggles;
        self
    }

    pub fn head_width(&self) -> usize {
        self.d_attn / self.n_heads
    }

    /// Memory slots each query attends over.
    pub fn memory_len(&self) -> usize {
        self.m_spatial + usize::from(self.toggles.enable_camera_memory)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("n_frames", self.n_frames),
            ("m_visual", self.m_visual),
            ("d_visual", self.d_visual),
            ("d_spatial", self.d_spatial),
            ("d_attn", self.d_attn),
            ("n_heads", self.n_heads),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(ConfigError::new(field, "must be at least 1"));
            }
        }
        if !self.d_attn.is_multiple_of(self.n_heads) {
            return Err(ConfigError::new(
                "d_attn",
                format!(
                    "{} is not divisible by n_heads = {}",
                    self.d_attn, self.n_heads
                ),
            ));
        }
        if self.m_spatial == 0 && !self.toggles.enable_camera_memory {
            return Err(ConfigError::new(
                "m_spatial",
                "0 spatial tokens requires camera memory (attention memory would be empty)",
            ));
        }
        Ok(())
    }
}

use std::fmt;
use std::str::FromStr;

use super::config::{FusionConfig, Toggles};
use super::fusion::{fuse, FusionInputs, Result};
use super::weights::CgmfWeights;
use crate::tensor::TokenTensor;

/// Structural variants of the fusion stack, from no fusion at all up to the
/// full module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// No fusion: the visual tokens pass through unchanged.
    Baseline,
    /// Plain cross-attention of visual tokens over spatial tokens and the
    /// camera slot.
    Shallow,
    /// Shallow plus the token-weight MLP.
    TokenWeight,
    /// Token weighting plus the camera-conditioned geometric bias.
    GeoBias,
    /// Everything, including the camera gate.
    Full,
}

impl Variant {
    /// The four variants that run the fusion module.
    pub const FUSED: [Variant; 4] = [
        Variant::Shallow,
        Variant::TokenWeight,
        Variant::GeoBias,
        Variant::Full,
    ];

    /// Toggle set for this variant; `None` for [`Variant::Baseline`], which
    /// bypasses fusion entirely.
    pub fn toggles(self) -> Option<Toggles> {
        let shallow = Toggles {
            enable_geo_bias: false,
            enable_token_weight: false,
            enable_camera_memory: true,
            enable_gate: false,
        };
        match self {
            Variant::Baseline => None,
            Variant::Shallow => Some(shallow),
            Variant::TokenWeight => Some(Toggles {
                enable_token_weight: true,
                ..shallow
            }),
            Variant::GeoBias => Some(Toggles {
                enable_token_weight: true,
                enable_geo_bias: true,
                ..shallow
            }),
            Variant::Full => Some(Toggles::all()),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Shallow => "shallow",
            Variant::TokenWeight => "+twMLP",
            Variant::GeoBias => "+geoMLP",
            Variant::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Variant::Baseline),
            "shallow" => Ok(Variant::Shallow),
            "+twmlp" | "twmlp" | "token_weight" => Ok(Variant::TokenWeight),
            "+geomlp" | "geomlp" | "geo_bias" => Ok(Variant::GeoBias),
            "full" => Ok(Variant::Full),
            other => Err(format!("unknown variant `{other}`")),
        }
    }
}

/// Runs `variant` on `inputs`, overriding the toggles in `config`.
pub fn run_variant(
    variant: Variant,
    inputs: &FusionInputs,
    weights: &CgmfWeights,
    config: &FusionConfig,
) -> Result<TokenTensor> {
    match variant.toggles() {
        None => {
            inputs.check(config)?;
            Ok(inputs.f_v.clone())
        }
        Some(toggles) => fuse(inputs, weights, &config.with_toggles(toggles)),
    }
}

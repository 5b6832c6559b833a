use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ConfigError, FusionConfig};
use crate::tensor::{LayerNormParams, LinearMap};

/// Two linear layers with Swish in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: LinearMap,
    pub out: LinearMap,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            hidden: LinearMap::zeros(input, hidden),
            out: LinearMap::zeros(hidden, output),
        }
    }

    pub fn param_count(&self) -> usize {
        self.hidden.param_count() + self.out.param_count()
    }
}

/// Every learnable parameter of the fusion module.
///
/// The same struct doubles as the container for parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct CgmfWeights {
    pub ln_v: LayerNormParams,
    pub ln_s: LayerNormParams,
    pub p_q: LinearMap,
    pub p_k: LinearMap,
    pub p_v: LinearMap,
    pub p_c: LinearMap,
    /// `[f_s, f_c]` (width `2·d_s`) → `d_a` → `d_a`.
    pub geo_mlp: Mlp,
    /// `f_s` → `d_a` → 1 logit per token.
    pub tw_mlp: Mlp,
    pub p_o: LinearMap,
    pub ln_o: LayerNormParams,
    pub p_l: LinearMap,
    pub p_g1: LinearMap,
    pub p_g2: LinearMap,
}

pub type WeightGrads = CgmfWeights;

/// Borrowed view of one parameterised sub-module.
#[derive(Debug, Clone, Copy)]
pub enum ModuleRef<'a> {
    Linear(&'a LinearMap),
    Norm(&'a LayerNormParams),
}

#[derive(Debug)]
pub enum ModuleMut<'a> {
    Linear(&'a mut LinearMap),
    Norm(&'a mut LayerNormParams),
}

/// Sub-module names in canonical (serialization and initialization) order.
pub const MODULE_NAMES: [&str; 15] = [
    "ln_v",
    "ln_s",
    "p_q",
    "p_k",
    "p_v",
    "p_c",
    "geo_mlp.0",
    "geo_mlp.1",
    "tw_mlp.0",
    "tw_mlp.1",
    "p_o",
    "ln_o",
    "p_l",
    "p_g1",
    "p_g2",
];

/// Initialization knobs beyond the seed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InitOptions {
    /// Zero `p_l` so the module starts as the identity on `f_v`.
    pub near_identity: bool,
}

impl CgmfWeights {
    /// Correctly shaped weights with every parameter zero (LN gains included).
    pub fn zeros(config: &FusionConfig) -> Self {
        let (dv, ds, da) = (config.d_visual, config.d_spatial, config.d_attn);
        let ln = |w| LayerNormParams::identity(w).zeros_like();
        Self {
            ln_v: ln(dv),
            ln_s: ln(ds),
            p_q: LinearMap::zeros(dv, da),
            p_k: LinearMap::zeros(ds, da),
            p_v: LinearMap::zeros(ds, da),
            p_c: LinearMap::zeros(ds, da),
            geo_mlp: Mlp::zeros(2 * ds, da, da),
            tw_mlp: Mlp::zeros(ds, da, 1),
            p_o: LinearMap::zeros(da, da),
            ln_o: ln(da),
            p_l: LinearMap::zeros(da, dv),
            p_g1: LinearMap::zeros(da, dv),
            p_g2: LinearMap::zeros(da, dv),
        }
    }

    pub fn init(config: &FusionConfig, seed: u64) -> Result<Self, ConfigError> {
        Self::init_with(config, seed, InitOptions::default())
    }

    /// Linear weights ~ N(0, 1/in_width) drawn in [`MODULE_NAMES`] order from a
    /// ChaCha8 stream; biases zero; LN gain one and shift zero.
    pub fn init_with(
        config: &FusionConfig,
        seed: u64,
        options: InitOptions,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Self::zeros(config);
        for (_, module) in weights.modules_mut() {
            match module {
                ModuleMut::Linear(map) => {
                    *map = LinearMap::random(map.in_width(), map.out_width(), &mut rng);
                }
                ModuleMut::Norm(p) => *p = LayerNormParams::identity(p.width()),
            }
        }
        if options.near_identity {
            weights.p_l = weights.p_l.zeros_like();
        }
        Ok(weights)
    }

    pub fn modules(&self) -> [(&'static str, ModuleRef<'_>); 15] {
        use ModuleRef::{Linear, Norm};
        [
            (MODULE_NAMES[0], Norm(&self.ln_v)),
            (MODULE_NAMES[1], Norm(&self.ln_s)),
            (MODULE_NAMES[2], Linear(&self.p_q)),
            (MODULE_NAMES[3], Linear(&self.p_k)),
            (MODULE_NAMES[4], Linear(&self.p_v)),
            (MODULE_NAMES[5], Linear(&self.p_c)),
            (MODULE_NAMES[6], Linear(&self.geo_mlp.hidden)),
            (MODULE_NAMES[7], Linear(&self.geo_mlp.out)),
            (MODULE_NAMES[8], Linear(&self.tw_mlp.hidden)),
            (MODULE_NAMES[9], Linear(&self.tw_mlp.out)),
            (MODULE_NAMES[10], Linear(&self.p_o)),
            (MODULE_NAMES[11], Norm(&self.ln_o)),
            (MODULE_NAMES[12], Linear(&self.p_l)),
            (MODULE_NAMES[13], Linear(&self.p_g1)),
            (MODULE_NAMES[14], Linear(&self.p_g2)),
        ]
    }

    pub fn modules_mut(&mut self) -> [(&'static str, ModuleMut<'_>); 15] {
        use ModuleMut::{Linear, Norm};
        [
            (MODULE_NAMES[0], Norm(&mut self.ln_v)),
            (MODULE_NAMES[1], Norm(&mut self.ln_s)),
            (MODULE_NAMES[2], Linear(&mut self.p_q)),
            (MODULE_NAMES[3], Linear(&mut self.p_k)),
            (MODULE_NAMES[4], Linear(&mut self.p_v)),
            (MODULE_NAMES[5], Linear(&mut self.p_c)),
            (MODULE_NAMES[6], Linear(&mut self.geo_mlp.hidden)),
            (MODULE_NAMES[7], Linear(&mut self.geo_mlp.out)),
            (MODULE_NAMES[8], Linear(&mut self.tw_mlp.hidden)),
            (MODULE_NAMES[9], Linear(&mut self.tw_mlp.out)),
            (MODULE_NAMES[10], Linear(&mut self.p_o)),
            (MODULE_NAMES[11], Norm(&mut self.ln_o)),
            (MODULE_NAMES[12], Linear(&mut self.p_l)),
            (MODULE_NAMES[13], Linear(&mut self.p_g1)),
            (MODULE_NAMES[14], Linear(&mut self.p_g2)),
        ]
    }

    /// Learnable parameter arrays as `("<module>.<field>", values)`.
    ///
    /// LN epsilons are hyperparameters and are not listed.
    pub fn params(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(30);
        for (name, module) in self.modules() {
            match module {
                ModuleRef::Linear(map) => {
                    out.push((format!("{name}.weight"), map.weight()));
                    if let Some(b) = map.bias() {
                        out.push((format!("{name}.bias"), b));
                    }
                }
                ModuleRef::Norm(p) => {
                    out.push((format!("{name}.gain"), p.gain()));
                    out.push((format!("{name}.shift"), p.shift()));
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::with_capacity(30);
        for (name, module) in self.modules_mut() {
            match module {
                ModuleMut::Linear(map) => {
                    let (w, b) = map.parts_mut();
                    out.push((format!("{name}.weight"), w));
                    if let Some(b) = b {
                        out.push((format!("{name}.bias"), b));
                    }
                }
                ModuleMut::Norm(p) => {
                    let (g, s) = p.parts_mut();
                    out.push((format!("{name}.gain"), g));
                    out.push((format!("{name}.shift"), s));
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, v)| v.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, v) in out.params_mut() {
            v.fill(0.0);
        }
        out
    }
}

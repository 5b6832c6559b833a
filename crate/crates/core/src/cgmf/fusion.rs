use std::time::{Duration, Instant};

use thiserror::Error;

use super::attention::multi_head_attention;
use super::config::{ConfigError, FusionConfig};
use super::weights::{CgmfWeights, Mlp, ModuleRef};
use crate::tensor::{
    broadcast_tokens, concat_tokens, concat_width, layer_norm, matmul_tokens, scale_tokens,
    sigmoid, swish, swish_scalar, TensorError, TokenTensor,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
}

pub type Result<T, E = FusionError> = std::result::Result<T, E>;

/// The three encoder streams, plus the register tokens the spatial encoder
/// also emits. Registers are carried only so callers can hand over the full
/// encoder output; fusion never reads them.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInputs {
    pub f_v: TokenTensor,
    pub f_s: TokenTensor,
    pub f_c: TokenTensor,
    pub f_register: Option<TokenTensor>,
}

fn expect_shape(name: &str, t: &TokenTensor, expected: (usize, usize, usize)) -> Result<()> {
    if t.shape() != expected {
        let (a, b, c) = t.shape();
        return Err(FusionError::Shape {
            name: name.to_owned(),
            expected: vec![expected.0, expected.1, expected.2],
            actual: vec![a, b, c],
        });
    }
    Ok(())
}

impl FusionInputs {
    pub fn new(f_v: TokenTensor, f_s: TokenTensor, f_c: TokenTensor) -> Self {
        Self {
            f_v,
            f_s,
            f_c,
            f_register: None,
        }
    }

    pub fn check(&self, config: &FusionConfig) -> Result<()> {
        let n = config.n_frames;
        expect_shape(
            "f_v",
            &self.f_v,
            (n, config.m_visual, config.d_visual),
        )?;
        expect_shape(
            "f_s",
            &self.f_s,
            (n, config.m_spatial, config.d_spatial),
        )?;
        expect_shape("f_c", &self.f_c, (n, 1, config.d_spatial))?;
        if let Some(r) = &self.f_register {
            if r.frames() != n {
                return Err(FusionError::Shape {
                    name: "f_register".into(),
                    expected: vec![n, r.tokens(), r.width()],
                    actual: vec![r.frames(), r.tokens(), r.width()],
                });
            }
        }
        Ok(())
    }
}

impl CgmfWeights {
    /// Verifies every sub-module against the shapes `config` implies.
    pub fn check(&self, config: &FusionConfig) -> Result<()> {
        let template = CgmfWeights::zeros(config);
        for ((name, have), (_, want)) in self.modules().into_iter().zip(template.modules()) {
            let (actual, expected) = match (have, want) {
                (ModuleRef::Linear(a), ModuleRef::Linear(b)) => (
                    vec![a.in_width(), a.out_width()],
                    vec![b.in_width(), b.out_width()],
                ),
                (ModuleRef::Norm(a), ModuleRef::Norm(b)) => (vec![a.width()], vec![b.width()]),
                _ => unreachable!("module kinds are fixed by the struct layout"),
            };
            if actual != expected {
                return Err(FusionError::Shape {
                    name: name.to_owned(),
                    expected,
                    actual,
                });
            }
        }
        Ok(())
    }
}

/// Queries, keys and values in the shared attention space, plus the camera
/// projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Projections {
    pub q: TokenTensor,
    pub k: TokenTensor,
    pub v: TokenTensor,
    pub c: TokenTensor,
}

/// `Q = P_Q(LN(f_v))`, `K = P_K(LN(f_s))`, `V = P_V(LN(f_s))`, `C = P_C(f_c)`.
/// The camera token is projected without normalization.
pub fn project_qkvc(inputs: &FusionInputs, weights: &CgmfWeights) -> Result<Projections> {
    let ln_v = layer_norm(&inputs.f_v, &weights.ln_v)?;
    let ln_s = layer_norm(&inputs.f_s, &weights.ln_s)?;
    Ok(Projections {
        q: matmul_tokens(&ln_v, &weights.p_q)?,
        k: matmul_tokens(&ln_s, &weights.p_k)?,
        v: matmul_tokens(&ln_s, &weights.p_v)?,
        c: matmul_tokens(&inputs.f_c, &weights.p_c)?,
    })
}

pub(crate) fn mlp_forward(mlp: &Mlp, x: &TokenTensor) -> Result<TokenTensor> {
    let hidden = swish(&matmul_tokens(x, &mlp.hidden)?);
    Ok(matmul_tokens(&hidden, &mlp.out)?)
}

/// Each spatial token concatenated with its frame's camera token.
pub(crate) fn geo_input(f_s: &TokenTensor, f_c: &TokenTensor) -> Result<TokenTensor> {
    let cam = broadcast_tokens(f_c, f_s.tokens())?;
    Ok(concat_width(f_s, &cam)?)
}

/// Camera-conditioned bias `B_g = MLP([f_s, f_c])`, shape `[N × M_s × d_a]`.
pub fn geo_bias(f_s: &TokenTensor, f_c: &TokenTensor, weights: &CgmfWeights) -> Result<TokenTensor> {
    if f_s.frames() != f_c.frames() {
        return Err(TensorError::Dimension {
            op: "geo_bias",
            detail: format!("f_s frames {} vs f_c frames {}", f_s.frames(), f_c.frames()),
        }
        .into());
    }
    mlp_forward(&weights.geo_mlp, &geo_input(f_s, f_c)?)
}

/// Query-independent token weights `W_t = σ(MLP(f_s))`, shape `[N × M_s × 1]`.
pub fn token_weights(f_s: &TokenTensor, weights: &CgmfWeights) -> Result<TokenTensor> {
    Ok(sigmoid(&mlp_forward(&weights.tw_mlp, f_s)?))
}

/// Prepends the camera slot to keys and values when camera memory is on,
/// then runs frame-local multi-head attention of `q` over that memory.
pub fn attend(
    q: &TokenTensor,
    k: &TokenTensor,
    v: &TokenTensor,
    c: &TokenTensor,
    config: &FusionConfig,
) -> Result<TokenTensor> {
    if config.toggles.enable_camera_memory {
        let k_mem = concat_tokens(c, k)?;
        let v_mem = concat_tokens(c, v)?;
        Ok(multi_head_attention(q, &k_mem, &v_mem, config.n_heads)?)
    } else {
        Ok(multi_head_attention(q, k, v, config.n_heads)?)
    }
}

/// `g = Swish(P_g1(C̄)) ⊙ P_g2(C̄)`, one `d_v` row per frame (`[N × 1 × d_v]`).
pub fn camera_gate(c: &TokenTensor, weights: &CgmfWeights) -> Result<TokenTensor> {
    if c.tokens() != 1 {
        return Err(TensorError::Dimension {
            op: "camera_gate",
            detail: format!("camera projection has {} tokens per frame", c.tokens()),
        }
        .into());
    }
    let u = matmul_tokens(c, &weights.p_g1)?;
    let v = matmul_tokens(c, &weights.p_g2)?;
    Ok(u.map(swish_scalar).hadamard(&v)?)
}

/// `x[n, m, :] ⊙ g[n, 0, :]` for every token `m`.
pub(crate) fn gate_tokens(x: &TokenTensor, g: &TokenTensor) -> Result<TokenTensor> {
    if g.shape() != (x.frames(), 1, x.width()) {
        return Err(TensorError::Dimension {
            op: "gate_tokens",
            detail: format!("gate {:?} for tokens {:?}", g.shape(), x.shape()),
        }
        .into());
    }
    let mut out = x.clone();
    for n in 0..x.frames() {
        let gate = g.row(n, 0);
        for m in 0..x.tokens() {
            for (a, &b) in out.row_mut(n, m).iter_mut().zip(gate) {
                *a *= b;
            }
        }
    }
    Ok(out)
}

/// `f_fused = P_L(LN(P_O(f̂))) ⊙ g + f_v`, with `g` replaced by ones when the
/// gate is disabled.
pub fn gate_and_fuse(
    f_hat: &TokenTensor,
    c: &TokenTensor,
    f_v: &TokenTensor,
    weights: &CgmfWeights,
    config: &FusionConfig,
) -> Result<TokenTensor> {
    let f_proj = layer_norm(&matmul_tokens(f_hat, &weights.p_o)?, &weights.ln_o)?;
    let lifted = matmul_tokens(&f_proj, &weights.p_l)?;
    let update = if config.toggles.enable_gate {
        gate_tokens(&lifted, &camera_gate(c, weights)?)?
    } else {
        lifted
    };
    Ok(update.add(f_v)?)
}

/// Wall time of one pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageTiming {
    pub stage: &'static str,
    pub elapsed: Duration,
}

fn timed<T>(
    timings: &mut Vec<StageTiming>,
    stage: &'static str,
    f: impl FnOnce() -> Result<T>,
) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    timings.push(StageTiming {
        stage,
        elapsed: start.elapsed(),
    });
    Ok(out)
}

/// Full fusion: projections, optional camera bias and token weighting,
/// attention over the (camera-augmented) spatial memory, then the gated
/// residual update. Output has the shape of `f_v`.
pub fn fuse(inputs: &FusionInputs, weights: &CgmfWeights, config: &FusionConfig) -> Result<TokenTensor> {
    fuse_timed(inputs, weights, config).map(|(out, _)| out)
}

/// [`fuse`] plus per-stage wall times.
pub fn fuse_timed(
    inputs: &FusionInputs,
    weights: &CgmfWeights,
    config: &FusionConfig,
) -> Result<(TokenTensor, Vec<StageTiming>)> {
    config.validate()?;
    inputs.check(config)?;
    weights.check(config)?;
    let toggles = config.toggles;
    let mut timings = Vec::with_capacity(6);

    let Projections { q, mut k, mut v, c } =
        timed(&mut timings, "project", || project_qkvc(inputs, weights))?;
    if toggles.enable_geo_bias {
        let b_g = timed(&mut timings, "geo_bias", || {
            geo_bias(&inputs.f_s, &inputs.f_c, weights)
        })?;
        k.add_assign(&b_g)?;
        v.add_assign(&b_g)?;
    }
    if toggles.enable_token_weight {
        v = timed(&mut timings, "token_weight", || {
            let w_t = token_weights(&inputs.f_s, weights)?;
            Ok(scale_tokens(&v, &w_t)?)
        })?;
    }
    let f_hat = timed(&mut timings, "attend", || attend(&q, &k, &v, &c, config))?;
    let fused = timed(&mut timings, "gate_and_fuse", || {
        gate_and_fuse(&f_hat, &c, &inputs.f_v, weights, config)
    })?;
    Ok((fused, timings))
}

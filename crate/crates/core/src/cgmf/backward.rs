//! Reverse pass of [`fuse`](super::fuse): the forward graph is re-run keeping
//! every intermediate, then per-kernel VJPs are applied in reverse order.

use super::attention::{multi_head_attention, multi_head_attention_vjp};
use super::config::FusionConfig;
use super::fusion::{gate_tokens, geo_input, FusionError, FusionInputs, Result};
use super::weights::{CgmfWeights, Mlp, WeightGrads};
use crate::tensor::{
    broadcast_tokens_vjp, concat_tokens, concat_tokens_vjp, concat_width_vjp, layer_norm,
    layer_norm_vjp, matmul_tokens, matmul_tokens_vjp, scale_tokens, scale_tokens_vjp, sigmoid,
    swish, swish_scalar, swish_vjp, TokenTensor,
};

/// Gradients with respect to the three fused streams.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrads {
    pub f_v: TokenTensor,
    pub f_s: TokenTensor,
    pub f_c: TokenTensor,
}

struct MlpTrace {
    input: TokenTensor,
    pre: TokenTensor,
    act: TokenTensor,
}

impl MlpTrace {
    fn run(mlp: &Mlp, input: TokenTensor) -> Result<(TokenTensor, Self)> {
        let pre = matmul_tokens(&input, &mlp.hidden)?;
        let act = swish(&pre);
        let out = matmul_tokens(&act, &mlp.out)?;
        Ok((out, Self { input, pre, act }))
    }

    fn vjp(&self, mlp: &Mlp, dy: &TokenTensor, grad: &mut Mlp) -> Result<TokenTensor> {
        let (d_act, g_out) = matmul_tokens_vjp(&self.act, &mlp.out, dy)?;
        let d_pre = swish_vjp(&self.pre, &d_act)?;
        let (dx, g_hidden) = matmul_tokens_vjp(&self.input, &mlp.hidden, &d_pre)?;
        grad.out = g_out;
        grad.hidden = g_hidden;
        Ok(dx)
    }
}

struct TokenWeightTrace {
    mlp: MlpTrace,
    w_t: TokenTensor,
}

struct GateTrace {
    u: TokenTensor,
    v: TokenTensor,
    g: TokenTensor,
}

/// Every intermediate of one forward evaluation.
struct Trace {
    ln_v_out: TokenTensor,
    ln_s_out: TokenTensor,
    q: TokenTensor,
    c: TokenTensor,
    k_mem: TokenTensor,
    v_mem: TokenTensor,
    /// `V` after the bias, before token weighting.
    v_biased: TokenTensor,
    geo: Option<MlpTrace>,
    tw: Option<TokenWeightTrace>,
    f_hat: TokenTensor,
    o: TokenTensor,
    f_proj: TokenTensor,
    lifted: TokenTensor,
    gate: Option<GateTrace>,
    fused: TokenTensor,
}

fn forward_trace(inputs: &FusionInputs, w: &CgmfWeights, config: &FusionConfig) -> Result<Trace> {
    config.validate()?;
    inputs.check(config)?;
    w.check(config)?;
    let t = config.toggles;

    let ln_v_out = layer_norm(&inputs.f_v, &w.ln_v)?;
    let ln_s_out = layer_norm(&inputs.f_s, &w.ln_s)?;
    let q = matmul_tokens(&ln_v_out, &w.p_q)?;
    let mut k = matmul_tokens(&ln_s_out, &w.p_k)?;
    let mut v = matmul_tokens(&ln_s_out, &w.p_v)?;
    let c = matmul_tokens(&inputs.f_c, &w.p_c)?;

    let geo = if t.enable_geo_bias {
        let (b_g, trace) = MlpTrace::run(&w.geo_mlp, geo_input(&inputs.f_s, &inputs.f_c)?)?;
        k.add_assign(&b_g)?;
        v.add_assign(&b_g)?;
        Some(trace)
    } else {
        None
    };
    let v_biased = v.clone();
    let tw = if t.enable_token_weight {
        let (logits, mlp) = MlpTrace::run(&w.tw_mlp, inputs.f_s.clone())?;
        let w_t = sigmoid(&logits);
        v = scale_tokens(&v, &w_t)?;
        Some(TokenWeightTrace { mlp, w_t })
    } else {
        None
    };
    let (k_mem, v_mem) = if t.enable_camera_memory {
        (concat_tokens(&c, &k)?, concat_tokens(&c, &v)?)
    } else {
        (k, v)
    };
    let f_hat = multi_head_attention(&q, &k_mem, &v_mem, config.n_heads)?;
    let o = matmul_tokens(&f_hat, &w.p_o)?;
    let f_proj = layer_norm(&o, &w.ln_o)?;
    let lifted = matmul_tokens(&f_proj, &w.p_l)?;
    let (update, gate) = if t.enable_gate {
        let u = matmul_tokens(&c, &w.p_g1)?;
        let gv = matmul_tokens(&c, &w.p_g2)?;
        let g = u.map(swish_scalar).hadamard(&gv)?;
        (gate_tokens(&lifted, &g)?, Some(GateTrace { u, v: gv, g }))
    } else {
        (lifted.clone(), None)
    };
    let fused = update.add(&inputs.f_v)?;
    Ok(Trace {
        ln_v_out,
        ln_s_out,
        q,
        c,
        k_mem,
        v_mem,
        v_biased,
        geo,
        tw,
        f_hat,
        o,
        f_proj,
        lifted,
        gate,
        fused,
    })
}

/// Forward value and analytic gradients of `⟨cotangent, fuse(inputs)⟩` with
/// respect to all three input streams and every parameter.
///
/// Parameters of disabled sub-modules receive zero gradients.
pub fn fuse_with_grads(
    inputs: &FusionInputs,
    w: &CgmfWeights,
    config: &FusionConfig,
    cotangent: &TokenTensor,
) -> Result<(TokenTensor, InputGrads, WeightGrads)> {
    let tr = forward_trace(inputs, w, config)?;
    if cotangent.shape() != tr.fused.shape() {
        let (a, b, c) = cotangent.shape();
        let (x, y, z) = tr.fused.shape();
        return Err(FusionError::Shape {
            name: "cotangent".into(),
            expected: vec![x, y, z],
            actual: vec![a, b, c],
        });
    }
    let mut grads = w.zeros_like();

    // Residual path.
    let mut d_f_v = cotangent.clone();

    // Gate.
    let mut d_c = TokenTensor::zeros(tr.c.frames(), 1, tr.c.width());
    let d_lifted = match &tr.gate {
        Some(gate) => {
            let d_lifted = gate_tokens(cotangent, &gate.g)?;
            // dg[n] = Σ_m cot[n,m,:] ⊙ lifted[n,m,:]
            let mut d_g = TokenTensor::zeros(gate.g.frames(), 1, gate.g.width());
            for n in 0..cotangent.frames() {
                for m in 0..cotangent.tokens() {
                    let (cot, lif) = (cotangent.row(n, m), tr.lifted.row(n, m));
                    for (j, acc) in d_g.row_mut(n, 0).iter_mut().enumerate() {
                        *acc += cot[j] * lif[j];
                    }
                }
            }
            let d_u = swish_vjp(&gate.u, &d_g.hadamard(&gate.v)?)?;
            let d_gv = d_g.hadamard(&gate.u.map(swish_scalar))?;
            let (dc1, g1) = matmul_tokens_vjp(&tr.c, &w.p_g1, &d_u)?;
            let (dc2, g2) = matmul_tokens_vjp(&tr.c, &w.p_g2, &d_gv)?;
            grads.p_g1 = g1;
            grads.p_g2 = g2;
            d_c.add_assign(&dc1)?;
            d_c.add_assign(&dc2)?;
            d_lifted
        }
        None => cotangent.clone(),
    };

    // Output projections.
    let (d_f_proj, g_l) = matmul_tokens_vjp(&tr.f_proj, &w.p_l, &d_lifted)?;
    grads.p_l = g_l;
    let (d_o, g_ln_o) = layer_norm_vjp(&tr.o, &w.ln_o, &d_f_proj)?;
    grads.ln_o = g_ln_o;
    let (d_f_hat, g_o) = matmul_tokens_vjp(&tr.f_hat, &w.p_o, &d_o)?;
    grads.p_o = g_o;

    // Attention.
    let (d_q, d_k_mem, d_v_mem) =
        multi_head_attention_vjp(&tr.q, &tr.k_mem, &tr.v_mem, config.n_heads, &d_f_hat)?;
    let (mut d_k, mut d_v) = if config.toggles.enable_camera_memory {
        let (dc_k, d_k) = concat_tokens_vjp(1, &d_k_mem)?;
        let (dc_v, d_v) = concat_tokens_vjp(1, &d_v_mem)?;
        d_c.add_assign(&dc_k)?;
        d_c.add_assign(&dc_v)?;
        (d_k, d_v)
    } else {
        (d_k_mem, d_v_mem)
    };

    let mut d_f_s = TokenTensor::zeros(
        inputs.f_s.frames(),
        inputs.f_s.tokens(),
        inputs.f_s.width(),
    );
    let mut d_f_c = TokenTensor::zeros(
        inputs.f_c.frames(),
        inputs.f_c.tokens(),
        inputs.f_c.width(),
    );

    // Token weighting: V ← V_biased ⊙ W_t.
    if let Some(tw) = &tr.tw {
        let (d_vb, d_wt) = scale_tokens_vjp(&tr.v_biased, &tw.w_t, &d_v)?;
        d_v = d_vb;
        let d_logits = tw.w_t.map(|s| s * (1.0 - s)).hadamard(&d_wt)?;
        let dx = tw.mlp.vjp(&w.tw_mlp, &d_logits, &mut grads.tw_mlp)?;
        d_f_s.add_assign(&dx)?;
    }

    // Camera bias, added to both K and V.
    if let Some(geo) = &tr.geo {
        let d_bias = d_k.add(&d_v)?;
        let dx = geo.vjp(&w.geo_mlp, &d_bias, &mut grads.geo_mlp)?;
        let (dxs, dxc) = concat_width_vjp(inputs.f_s.width(), &dx)?;
        d_f_s.add_assign(&dxs)?;
        d_f_c.add_assign(&broadcast_tokens_vjp(&dxc))?;
    }

    // Input projections.
    let (d_ln_s_k, g_k) = matmul_tokens_vjp(&tr.ln_s_out, &w.p_k, &d_k)?;
    let (d_ln_s_v, g_v) = matmul_tokens_vjp(&tr.ln_s_out, &w.p_v, &d_v)?;
    grads.p_k = g_k;
    grads.p_v = g_v;
    d_k = d_ln_s_k;
    d_k.add_assign(&d_ln_s_v)?;
    let (dxs, g_ln_s) = layer_norm_vjp(&inputs.f_s, &w.ln_s, &d_k)?;
    grads.ln_s = g_ln_s;
    d_f_s.add_assign(&dxs)?;

    let (d_ln_v, g_q) = matmul_tokens_vjp(&tr.ln_v_out, &w.p_q, &d_q)?;
    grads.p_q = g_q;
    let (dxv, g_ln_v) = layer_norm_vjp(&inputs.f_v, &w.ln_v, &d_ln_v)?;
    grads.ln_v = g_ln_v;
    d_f_v.add_assign(&dxv)?;

    let (dxc, g_c) = matmul_tokens_vjp(&inputs.f_c, &w.p_c, &d_c)?;
    grads.p_c = g_c;
    d_f_c.add_assign(&dxc)?;

    Ok((
        tr.fused,
        InputGrads {
            f_v: d_f_v,
            f_s: d_f_s,
            f_c: d_f_c,
        },
        grads,
    ))
}

/// Gradients of `⟨cotangent, fuse(inputs)⟩`; see [`fuse_with_grads`].
pub fn fuse_backward(
    inputs: &FusionInputs,
    weights: &CgmfWeights,
    config: &FusionConfig,
    cotangent: &TokenTensor,
) -> Result<(InputGrads, WeightGrads)> {
    fuse_with_grads(inputs, weights, config, cotangent).map(|(_, gi, gw)| (gi, gw))
}

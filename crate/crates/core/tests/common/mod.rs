//! Independent scalar reference implementations used as test oracles.
//!
//! Nothing here calls into the library's kernels: every quantity is
//! recomputed with plain loops over `Vec<f64>` rows.

#![allow(dead_code)]

use cgmf_core::{CgmfWeights, FusionConfig, FusionInputs, LayerNormParams, LinearMap, TokenTensor};

pub fn linear(x: &[f64], map: &LinearMap) -> Vec<f64> {
    let (i_w, o_w) = (map.in_width(), map.out_width());
    assert_eq!(x.len(), i_w);
    (0..o_w)
        .map(|j| {
            let mut acc = map.bias().map_or(0.0, |b| b[j]);
            for (i, xi) in x.iter().enumerate() {
                acc += xi * map.weight()[i * o_w + j];
            }
            acc
        })
        .collect()
}

pub fn norm(x: &[f64], p: &LayerNormParams) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + p.epsilon()).sqrt();
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) * inv * p.gain()[j] + p.shift()[j])
        .collect()
}

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn swish(x: f64) -> f64 {
    x * sig(x)
}

fn mlp(x: &[f64], hidden: &LinearMap, out: &LinearMap) -> Vec<f64> {
    let h: Vec<f64> = linear(x, hidden).into_iter().map(swish).collect();
    linear(&h, out)
}

/// Dense multi-head attention for a single frame; rows are token vectors.
pub fn attention_frame(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    heads: usize,
) -> Vec<Vec<f64>> {
    let width = q[0].len();
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![vec![0.0; width]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (qi, q_row) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|k_row| cols.clone().map(|c| q_row[c] * k_row[c]).sum::<f64>() * scale)
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (e, v_row) in exps.iter().zip(v) {
                for c in cols.clone() {
                    out[qi][c] += e / z * v_row[c];
                }
            }
        }
    }
    out
}

pub fn frame_rows(t: &TokenTensor, n: usize) -> Vec<Vec<f64>> {
    (0..t.tokens()).map(|m| t.row(n, m).to_vec()).collect()
}

pub fn from_frames(frames: Vec<Vec<Vec<f64>>>, width: usize) -> TokenTensor {
    let n = frames.len();
    let m = frames.first().map_or(0, |f| f.len());
    let data = frames.into_iter().flatten().flatten().collect();
    TokenTensor::new(n, m, width, data).unwrap()
}

/// Dense attention oracle over whole tensors.
pub fn attention_oracle(q: &TokenTensor, k: &TokenTensor, v: &TokenTensor, heads: usize) -> TokenTensor {
    let frames = (0..q.frames())
        .map(|n| attention_frame(&frame_rows(q, n), &frame_rows(k, n), &frame_rows(v, n), heads))
        .collect();
    from_frames(frames, v.width())
}

/// Token-by-token reference of the whole fusion module.
pub fn reference_fuse(inputs: &FusionInputs, w: &CgmfWeights, config: &FusionConfig) -> TokenTensor {
    let t = config.toggles;
    let mut frames = Vec::new();
    for n in 0..config.n_frames {
        let cam = inputs.f_c.row(n, 0);
        let c = linear(cam, &w.p_c);
        let q: Vec<Vec<f64>> = (0..config.m_visual)
            .map(|m| linear(&norm(inputs.f_v.row(n, m), &w.ln_v), &w.p_q))
            .collect();
        let mut keys = Vec::new();
        let mut values = Vec::new();
        if t.enable_camera_memory {
            keys.push(c.clone());
            values.push(c.clone());
        }
        for s in 0..config.m_spatial {
            let fs = inputs.f_s.row(n, s);
            let ls = norm(fs, &w.ln_s);
            let mut k = linear(&ls, &w.p_k);
            let mut v = linear(&ls, &w.p_v);
            if t.enable_geo_bias {
                let joined: Vec<f64> = fs.iter().chain(cam).copied().collect();
                let b = mlp(&joined, &w.geo_mlp.hidden, &w.geo_mlp.out);
                for j in 0..k.len() {
                    k[j] += b[j];
                    v[j] += b[j];
                }
            }
            if t.enable_token_weight {
                let wt = sig(mlp(fs, &w.tw_mlp.hidden, &w.tw_mlp.out)[0]);
                v.iter_mut().for_each(|x| *x *= wt);
            }
            keys.push(k);
            values.push(v);
        }
        let f_hat = attention_frame(&q, &keys, &values, config.n_heads);
        let gate: Vec<f64> = if t.enable_gate {
            let u = linear(&c, &w.p_g1);
            let g2 = linear(&c, &w.p_g2);
            u.iter().zip(&g2).map(|(a, b)| swish(*a) * b).collect()
        } else {
            vec![1.0; config.d_visual]
        };
        let rows = (0..config.m_visual)
            .map(|m| {
                let proj = norm(&linear(&f_hat[m], &w.p_o), &w.ln_o);
                let lifted = linear(&proj, &w.p_l);
                let fv = inputs.f_v.row(n, m);
                (0..config.d_visual).map(|j| lifted[j] * gate[j] + fv[j]).collect()
            })
            .collect();
        frames.push(rows);
    }
    from_frames(frames, config.d_visual)
}

/// Central-difference gradient of `objective` with respect to `len` scalars
/// of `state`; `nudge(state, i, delta)` adds `delta` to scalar `i`.
pub fn finite_difference<S: Clone>(
    state: &S,
    len: usize,
    nudge: impl Fn(&mut S, usize, f64),
    objective: impl Fn(&S) -> f64,
    step: f64,
) -> Vec<f64> {
    let mut probe = state.clone();
    (0..len)
        .map(|i| {
            let orig = probe.clone();
            nudge(&mut probe, i, step);
            let plus = objective(&probe);
            probe = orig.clone();
            nudge(&mut probe, i, -step);
            let minus = objective(&probe);
            probe = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `max|a − n| / max(max|a|, max|n|)`, or the raw difference when both vanish.
pub fn group_rel_error(a: &[f64], n: &[f64]) -> f64 {
    assert_eq!(a.len(), n.len());
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(n).map(|x| x.abs()).fold(0.0, f64::max);
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

pub fn dot(a: &TokenTensor, b: &TokenTensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Weights with every parameter drawn at random, biases, LN gains and shifts
/// included, so no term of the forward pass is trivially zero or one.
pub fn random_weights(config: &FusionConfig, seed: u64) -> CgmfWeights {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut w = CgmfWeights::init(config, seed).unwrap();
    for (name, values) in w.params_mut() {
        for v in values.iter_mut() {
            *v = if name.ends_with(".gain") {
                rng.random_range(0.5..1.5)
            } else {
                rng.random_range(-0.6..0.6)
            };
        }
    }
    w
}

pub fn random_tokens(n: usize, m: usize, d: usize, seed: u64) -> TokenTensor {
    use rand::SeedableRng;
    TokenTensor::randn(n, m, d, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
}

/// A small random valid config. Widths stay at or below `max_width`.
pub fn random_config(rng: &mut impl rand::Rng, max_width: usize) -> FusionConfig {
    let n_heads = rng.random_range(1..=2usize);
    let head_width = rng.random_range(1..=max_width / n_heads);
    FusionConfig {
        n_frames: rng.random_range(1..=3),
        m_visual: rng.random_range(1..=5),
        m_spatial: rng.random_range(1..=6),
        d_visual: rng.random_range(1..=max_width),
        d_spatial: rng.random_range(1..=max_width),
        d_attn: n_heads * head_width,
        n_heads,
        toggles: cgmf_core::Toggles::all(),
    }
}

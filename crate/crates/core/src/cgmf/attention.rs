//! Frame-local multi-head scaled dot-product attention.
//!
//! Queries of frame `n` only see memory slots of frame `n`. Frames are
//! processed in parallel; each frame's arithmetic is identical regardless of
//! the thread that runs it, so results are bit-stable across thread counts.

use rayon::prelude::*;

use crate::tensor::{softmax_in_place, Result, TensorError, TokenTensor};

fn check(q: &TokenTensor, k: &TokenTensor, v: &TokenTensor, n_heads: usize) -> Result<()> {
    let err = |detail: String| TensorError::Dimension {
        op: "attention",
        detail,
    };
    if q.frames() != k.frames() || k.frames() != v.frames() {
        return Err(err(format!(
            "frame counts q {} / k {} / v {}",
            q.frames(),
            k.frames(),
            v.frames()
        )));
    }
    if k.tokens() != v.tokens() {
        return Err(err(format!(
            "key slots {} vs value slots {}",
            k.tokens(),
            v.tokens()
        )));
    }
    if q.width() != k.width() || k.width() != v.width() {
        return Err(err(format!(
            "widths q {} / k {} / v {}",
            q.width(),
            k.width(),
            v.width()
        )));
    }
    if n_heads == 0 || !q.width().is_multiple_of(n_heads) {
        return Err(err(format!(
            "width {} not divisible into {n_heads} heads",
            q.width()
        )));
    }
    if k.tokens() == 0 {
        return Err(TensorError::EmptyMemory);
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy)]
struct Dims {
    queries: usize,
    slots: usize,
    width: usize,
    head_width: usize,
    heads: usize,
    scale: f64,
}

impl Dims {
    fn new(q: &TokenTensor, k: &TokenTensor, n_heads: usize) -> Self {
        let head_width = q.width() / n_heads;
        Self {
            queries: q.tokens(),
            slots: k.tokens(),
            width: q.width(),
            head_width,
            heads: n_heads,
            scale: 1.0 / (head_width as f64).sqrt(),
        }
    }

    fn head<'a>(&self, x: &'a [f64], row: usize, h: usize) -> &'a [f64] {
        let o = row * self.width + h * self.head_width;
        &x[o..o + self.head_width]
    }

    /// Softmax-normalised scores of query `i`, head `h`, written into `p`.
    fn probabilities(&self, q: &[f64], k: &[f64], i: usize, h: usize, p: &mut [f64]) {
        let qi = self.head(q, i, h);
        for (j, pj) in p.iter_mut().enumerate() {
            *pj = self.scale * dot(qi, self.head(k, j, h));
        }
        softmax_in_place(p);
    }
}

fn forward_frame(d: Dims, q: &[f64], k: &[f64], v: &[f64], out: &mut [f64]) {
    let mut p = vec![0.0; d.slots];
    for h in 0..d.heads {
        for i in 0..d.queries {
            d.probabilities(q, k, i, h, &mut p);
            let o = i * d.width + h * d.head_width;
            let oi = &mut out[o..o + d.head_width];
            oi.fill(0.0);
            for (j, &pj) in p.iter().enumerate() {
                for (a, &b) in oi.iter_mut().zip(d.head(v, j, h)) {
                    *a += pj * b;
                }
            }
        }
    }
}

/// `softmax(Q_h K_hᵀ / sqrt(d_h)) V_h` per frame and head, heads concatenated
/// back along the width axis.
pub fn multi_head_attention(
    q: &TokenTensor,
    k: &TokenTensor,
    v: &TokenTensor,
    n_heads: usize,
) -> Result<TokenTensor> {
    check(q, k, v, n_heads)?;
    let d = Dims::new(q, k, n_heads);
    let mut out = TokenTensor::zeros(q.frames(), q.tokens(), q.width());
    let stride = d.queries * d.width;
    if stride == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(stride)
        .enumerate()
        .for_each(|(n, of)| forward_frame(d, q.frame(n), k.frame(n), v.frame(n), of));
    Ok(out)
}

/// Attention probabilities, one `[frames × queries × slots]` tensor per head.
pub fn attention_probabilities(
    q: &TokenTensor,
    k: &TokenTensor,
    n_heads: usize,
) -> Result<Vec<TokenTensor>> {
    check(q, k, k, n_heads)?;
    let d = Dims::new(q, k, n_heads);
    let mut heads = vec![TokenTensor::zeros(q.frames(), d.queries, d.slots); n_heads];
    for (h, probs) in heads.iter_mut().enumerate() {
        for n in 0..q.frames() {
            for i in 0..d.queries {
                d.probabilities(q.frame(n), k.frame(n), i, h, probs.row_mut(n, i));
            }
        }
    }
    Ok(heads)
}

#[allow(clippy::too_many_arguments)]
fn backward_frame(
    d: Dims,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dy: &[f64],
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let mut p = vec![0.0; d.slots];
    let mut dp = vec![0.0; d.slots];
    let hw = d.head_width;
    for h in 0..d.heads {
        for i in 0..d.queries {
            d.probabilities(q, k, i, h, &mut p);
            let dyi = d.head(dy, i, h);
            for j in 0..d.slots {
                dp[j] = dot(dyi, d.head(v, j, h));
                let o = j * d.width + h * hw;
                for (a, &g) in dv[o..o + hw].iter_mut().zip(dyi) {
                    *a += p[j] * g;
                }
            }
            let inner = dot(&p, &dp);
            let qi = d.head(q, i, h);
            let oq = i * d.width + h * hw;
            for j in 0..d.slots {
                let ds = d.scale * p[j] * (dp[j] - inner);
                let o = j * d.width + h * hw;
                for (a, &kv) in dq[oq..oq + hw].iter_mut().zip(d.head(k, j, h)) {
                    *a += ds * kv;
                }
                for (a, &qv) in dk[o..o + hw].iter_mut().zip(qi) {
                    *a += ds * qv;
                }
            }
        }
    }
}

/// Cotangents `(dq, dk, dv)` of [`multi_head_attention`] for output
/// cotangent `dy`. Probabilities are recomputed rather than cached.
pub fn multi_head_attention_vjp(
    q: &TokenTensor,
    k: &TokenTensor,
    v: &TokenTensor,
    n_heads: usize,
    dy: &TokenTensor,
) -> Result<(TokenTensor, TokenTensor, TokenTensor)> {
    check(q, k, v, n_heads)?;
    if dy.shape() != q.shape() {
        return Err(TensorError::Dimension {
            op: "attention_vjp",
            detail: format!("cotangent {:?} vs output {:?}", dy.shape(), q.shape()),
        });
    }
    let d = Dims::new(q, k, n_heads);
    let mut dq = TokenTensor::zeros(q.frames(), q.tokens(), q.width());
    let mut dk = TokenTensor::zeros(k.frames(), k.tokens(), k.width());
    let mut dv = TokenTensor::zeros(v.frames(), v.tokens(), v.width());
    let q_stride = d.queries * d.width;
    let m_stride = d.slots * d.width;
    if q_stride == 0 {
        return Ok((dq, dk, dv));
    }
    dq.data_mut()
        .par_chunks_mut(q_stride)
        .zip(dk.data_mut().par_chunks_mut(m_stride))
        .zip(dv.data_mut().par_chunks_mut(m_stride))
        .enumerate()
        .for_each(|(n, ((dqf, dkf), dvf))| {
            backward_frame(
                d,
                q.frame(n),
                k.frame(n),
                v.frame(n),
                dy.frame(n),
                dqf,
                dkf,
                dvf,
            )
        });
    Ok((dq, dk, dv))
}

//! Dense `[frames × tokens × width]` tensors and the handful of kernels the
//! fusion module is built from.
//!
//! Every differentiable kernel has a matching `*_vjp` function returning the
//! cotangents of its inputs (and parameters, where it has any). Reductions
//! always run in a fixed index order so results do not depend on threading.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("data length {actual} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: (usize, usize, usize),
        expected: usize,
        actual: usize,
    },
    #[error("op `{0}` has no vector-Jacobian product")]
    UnsupportedOp(&'static str),
    #[error("op `{op}` expects {expected} input(s), got {actual}")]
    Arity {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("attention memory is empty (no spatial tokens and camera memory disabled)")]
    EmptyMemory,
}

fn dim_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Dimension {
        op,
        detail: detail.into(),
    }
}

/// Row-major rank-3 tensor of `f64`, indexed `[frame, token, channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTensor {
    frames: usize,
    tokens: usize,
    width: usize,
    data: Vec<f64>,
}

impl TokenTensor {
    pub fn new(frames: usize, tokens: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let expected = frames * tokens * width;
        if data.len() != expected {
            return Err(TensorError::DataLength {
                shape: (frames, tokens, width),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            frames,
            tokens,
            width,
            data,
        })
    }

    pub fn zeros(frames: usize, tokens: usize, width: usize) -> Self {
        Self::filled(frames, tokens, width, 0.0)
    }

    pub fn filled(frames: usize, tokens: usize, width: usize, value: f64) -> Self {
        Self {
            frames,
            tokens,
            width,
            data: vec![value; frames * tokens * width],
        }
    }

    pub fn from_fn(
        frames: usize,
        tokens: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(frames * tokens * width);
        for n in 0..frames {
            for m in 0..tokens {
                for d in 0..width {
                    data.push(f(n, m, d));
                }
            }
        }
        Self {
            frames,
            tokens,
            width,
            data,
        }
    }

    /// Standard-normal entries drawn from `rng` in row-major order.
    pub fn randn<R: Rng + ?Sized>(frames: usize, tokens: usize, width: usize, rng: &mut R) -> Self {
        let data = (0..frames * tokens * width)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Self {
            frames,
            tokens,
            width,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.frames, self.tokens, self.width)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    fn offset(&self, n: usize, m: usize) -> usize {
        (n * self.tokens + m) * self.width
    }

    pub fn get(&self, n: usize, m: usize, d: usize) -> f64 {
        self.data[self.offset(n, m) + d]
    }

    pub fn set(&mut self, n: usize, m: usize, d: usize, value: f64) {
        let o = self.offset(n, m);
        self.data[o + d] = value;
    }

    pub fn row(&self, n: usize, m: usize) -> &[f64] {
        let o = self.offset(n, m);
        &self.data[o..o + self.width]
    }

    pub fn row_mut(&mut self, n: usize, m: usize) -> &mut [f64] {
        let o = self.offset(n, m);
        let w = self.width;
        &mut self.data[o..o + w]
    }

    /// All token rows of frame `n`, contiguous.
    pub fn frame(&self, n: usize) -> &[f64] {
        let stride = self.tokens * self.width;
        &self.data[n * stride..(n + 1) * stride]
    }

    pub fn frame_mut(&mut self, n: usize) -> &mut [f64] {
        let stride = self.tokens * self.width;
        &mut self.data[n * stride..(n + 1) * stride]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.width.max(1)).take(self.frames * self.tokens)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            frames: self.frames,
            tokens: self.tokens,
            width: self.width,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Tokens `start..end` of every frame.
    pub fn slice_tokens(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.tokens {
            return Err(dim_err(
                "slice_tokens",
                format!("range {start}..{end} out of 0..{}", self.tokens),
            ));
        }
        let mut data = Vec::with_capacity(self.frames * (end - start) * self.width);
        for n in 0..self.frames {
            let a = self.offset(n, start);
            let b = self.offset(n, end);
            data.extend_from_slice(&self.data[a..b]);
        }
        Ok(Self {
            frames: self.frames,
            tokens: end - start,
            width: self.width,
            data,
        })
    }

    /// Largest element-wise absolute difference; `None` if shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.shape() != other.shape() {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(dim_err(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other, op)?;
        Ok(Self {
            frames: self.frames,
            tokens: self.tokens,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }
}

/// Affine map applied to every token row: `y = x · weight + bias`.
///
/// `weight` is stored row-major as `[in_width × out_width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    in_width: usize,
    out_width: usize,
    weight: Vec<f64>,
    bias: Option<Vec<f64>>,
}

impl LinearMap {
    pub fn new(
        in_width: usize,
        out_width: usize,
        weight: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        if in_width == 0 || out_width == 0 {
            return Err(dim_err("linear_map", "widths must be positive"));
        }
        if weight.len() != in_width * out_width {
            return Err(dim_err(
                "linear_map",
                format!(
                    "weight has {} entries, expected {in_width}x{out_width}",
                    weight.len()
                ),
            ));
        }
        if let Some(b) = &bias {
            if b.len() != out_width {
                return Err(dim_err(
                    "linear_map",
                    format!("bias has {} entries, expected {out_width}", b.len()),
                ));
            }
        }
        Ok(Self {
            in_width,
            out_width,
            weight,
            bias,
        })
    }

    /// All-zero weight and bias.
    pub fn zeros(in_width: usize, out_width: usize) -> Self {
        Self {
            in_width,
            out_width,
            weight: vec![0.0; in_width * out_width],
            bias: Some(vec![0.0; out_width]),
        }
    }

    /// Square identity map with zero bias.
    pub fn identity(width: usize) -> Self {
        let mut map = Self::zeros(width, width);
        for i in 0..width {
            map.weight[i * width + i] = 1.0;
        }
        map
    }

    /// Weight entries drawn from N(0, 1/in_width), bias zero.
    pub fn random<R: Rng + ?Sized>(in_width: usize, out_width: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (in_width as f64).sqrt();
        let weight = (0..in_width * out_width)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect();
        Self {
            in_width,
            out_width,
            weight,
            bias: Some(vec![0.0; out_width]),
        }
    }

    pub fn in_width(&self) -> usize {
        self.in_width
    }

    pub fn out_width(&self) -> usize {
        self.out_width
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [f64]> {
        self.bias.as_deref_mut()
    }

    pub fn parts_mut(&mut self) -> (&mut [f64], Option<&mut [f64]>) {
        (&mut self.weight, self.bias.as_deref_mut())
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// Same shape, every entry zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            in_width: self.in_width,
            out_width: self.out_width,
            weight: vec![0.0; self.weight.len()],
            bias: self.bias.as_ref().map(|b| vec![0.0; b.len()]),
        }
    }

    fn apply_row(&self, x: &[f64], out: &mut [f64]) {
        match &self.bias {
            Some(b) => out.copy_from_slice(b),
            None => out.fill(0.0),
        }
        for (i, &xi) in x.iter().enumerate() {
            let w = &self.weight[i * self.out_width..(i + 1) * self.out_width];
            for (o, &wij) in out.iter_mut().zip(w) {
                *o += xi * wij;
            }
        }
    }
}

/// Per-token normalization over the width axis, followed by `gain ⊙ · + shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    width: usize,
    gain: Vec<f64>,
    shift: Vec<f64>,
    epsilon: f64,
}

pub const DEFAULT_LN_EPSILON: f64 = 1e-6;

impl LayerNormParams {
    pub fn new(gain: Vec<f64>, shift: Vec<f64>, epsilon: f64) -> Result<Self> {
        if gain.is_empty() || gain.len() != shift.len() {
            return Err(dim_err(
                "layer_norm_params",
                format!("gain {} / shift {} widths", gain.len(), shift.len()),
            ));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(dim_err(
                "layer_norm_params",
                format!("epsilon must be positive, got {epsilon}"),
            ));
        }
        Ok(Self {
            width: gain.len(),
            gain,
            shift,
            epsilon,
        })
    }

    /// Gain one, shift zero, default epsilon.
    pub fn identity(width: usize) -> Self {
        Self {
            width,
            gain: vec![1.0; width],
            shift: vec![0.0; width],
            epsilon: DEFAULT_LN_EPSILON,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(dim_err(
                "layer_norm_params",
                format!("epsilon must be positive, got {epsilon}"),
            ));
        }
        self.epsilon = epsilon;
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn gain(&self) -> &[f64] {
        &self.gain
    }

    pub fn gain_mut(&mut self) -> &mut [f64] {
        &mut self.gain
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    pub fn shift_mut(&mut self) -> &mut [f64] {
        &mut self.shift
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn parts_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.gain, &mut self.shift)
    }

    pub fn param_count(&self) -> usize {
        2 * self.width
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            width: self.width,
            gain: vec![0.0; self.width],
            shift: vec![0.0; self.width],
            epsilon: self.epsilon,
        }
    }
}

pub fn matmul_tokens(x: &TokenTensor, map: &LinearMap) -> Result<TokenTensor> {
    if x.width != map.in_width {
        return Err(dim_err(
            "matmul_tokens",
            format!("input width {} vs map in_width {}", x.width, map.in_width),
        ));
    }
    let mut out = TokenTensor::zeros(x.frames, x.tokens, map.out_width);
    for (xr, or) in x
        .data
        .chunks_exact(x.width)
        .zip(out.data.chunks_exact_mut(map.out_width))
    {
        map.apply_row(xr, or);
    }
    Ok(out)
}

/// Returns `(dx, grad)` where `grad` has the map's shape.
pub fn matmul_tokens_vjp(
    x: &TokenTensor,
    map: &LinearMap,
    dy: &TokenTensor,
) -> Result<(TokenTensor, LinearMap)> {
    if x.width != map.in_width {
        return Err(dim_err(
            "matmul_tokens_vjp",
            format!("input width {} vs map in_width {}", x.width, map.in_width),
        ));
    }
    if dy.shape() != (x.frames, x.tokens, map.out_width) {
        return Err(dim_err(
            "matmul_tokens_vjp",
            format!("cotangent shape {:?}", dy.shape()),
        ));
    }
    let (a, b) = (map.in_width, map.out_width);
    let mut dx = TokenTensor::zeros(x.frames, x.tokens, a);
    let mut grad = map.zeros_like();
    for ((xr, dyr), dxr) in x
        .data
        .chunks_exact(a)
        .zip(dy.data.chunks_exact(b))
        .zip(dx.data.chunks_exact_mut(a))
    {
        for i in 0..a {
            let w = &map.weight[i * b..(i + 1) * b];
            dxr[i] = w.iter().zip(dyr).map(|(w, g)| w * g).sum();
            let gw = &mut grad.weight[i * b..(i + 1) * b];
            for (gwj, &g) in gw.iter_mut().zip(dyr) {
                *gwj += xr[i] * g;
            }
        }
        if let Some(gb) = grad.bias.as_mut() {
            for (gbj, &g) in gb.iter_mut().zip(dyr) {
                *gbj += g;
            }
        }
    }
    Ok((dx, grad))
}

fn row_stats(x: &[f64], eps: f64) -> (f64, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

pub fn layer_norm(x: &TokenTensor, p: &LayerNormParams) -> Result<TokenTensor> {
    if x.width != p.width {
        return Err(dim_err(
            "layer_norm",
            format!("input width {} vs params width {}", x.width, p.width),
        ));
    }
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(p.width) {
        let (mean, rstd) = row_stats(row, p.epsilon);
        for ((v, g), s) in row.iter_mut().zip(&p.gain).zip(&p.shift) {
            *v = (*v - mean) * rstd * g + s;
        }
    }
    Ok(out)
}

pub fn layer_norm_vjp(
    x: &TokenTensor,
    p: &LayerNormParams,
    dy: &TokenTensor,
) -> Result<(TokenTensor, LayerNormParams)> {
    if x.width != p.width || dy.shape() != x.shape() {
        return Err(dim_err(
            "layer_norm_vjp",
            format!(
                "input {:?}, cotangent {:?}, params width {}",
                x.shape(),
                dy.shape(),
                p.width
            ),
        ));
    }
    let w = p.width;
    let mut dx = TokenTensor::zeros(x.frames, x.tokens, w);
    let mut grad = p.zeros_like();
    let mut xhat = vec![0.0; w];
    let mut dxhat = vec![0.0; w];
    for ((xr, dyr), dxr) in x
        .data
        .chunks_exact(w)
        .zip(dy.data.chunks_exact(w))
        .zip(dx.data.chunks_exact_mut(w))
    {
        let (mean, rstd) = row_stats(xr, p.epsilon);
        for j in 0..w {
            xhat[j] = (xr[j] - mean) * rstd;
            dxhat[j] = dyr[j] * p.gain[j];
            grad.gain[j] += dyr[j] * xhat[j];
            grad.shift[j] += dyr[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / w as f64;
        let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / w as f64;
        for j in 0..w {
            dxr[j] = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
    }
    Ok((dx, grad))
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax over the width axis of every token row.
pub fn softmax_rows(x: &TokenTensor) -> TokenTensor {
    let mut out = x.clone();
    if out.width > 0 {
        for row in out.data.chunks_exact_mut(x.width) {
            softmax_in_place(row);
        }
    }
    out
}

/// VJP of [`softmax_rows`], expressed through its output `y`.
pub fn softmax_rows_vjp(y: &TokenTensor, dy: &TokenTensor) -> Result<TokenTensor> {
    y.check_same_shape(dy, "softmax_rows_vjp")?;
    let mut dx = TokenTensor::zeros(y.frames, y.tokens, y.width);
    if y.width == 0 {
        return Ok(dx);
    }
    for ((yr, dyr), dxr) in y
        .data
        .chunks_exact(y.width)
        .zip(dy.data.chunks_exact(y.width))
        .zip(dx.data.chunks_exact_mut(y.width))
    {
        let inner: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - inner);
        }
    }
    Ok(dx)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x · σ(x)`.
pub fn swish_scalar(x: f64) -> f64 {
    x * sigmoid_scalar(x)
}

/// d/dx of `x · σ(x)`.
pub fn swish_derivative(x: f64) -> f64 {
    let s = sigmoid_scalar(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn sigmoid(x: &TokenTensor) -> TokenTensor {
    x.map(sigmoid_scalar)
}

pub fn swish(x: &TokenTensor) -> TokenTensor {
    x.map(swish_scalar)
}

pub fn sigmoid_vjp(x: &TokenTensor, dy: &TokenTensor) -> Result<TokenTensor> {
    x.zip_with(dy, "sigmoid_vjp", |x, g| {
        let s = sigmoid_scalar(x);
        g * s * (1.0 - s)
    })
}

pub fn swish_vjp(x: &TokenTensor, dy: &TokenTensor) -> Result<TokenTensor> {
    x.zip_with(dy, "swish_vjp", |x, g| g * swish_derivative(x))
}

/// Stack `b`'s tokens after `a`'s within every frame.
pub fn concat_tokens(a: &TokenTensor, b: &TokenTensor) -> Result<TokenTensor> {
    if a.frames != b.frames || a.width != b.width {
        return Err(dim_err(
            "concat_tokens",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let tokens = a.tokens + b.tokens;
    let mut data = Vec::with_capacity(a.frames * tokens * a.width);
    for n in 0..a.frames {
        data.extend_from_slice(a.frame(n));
        data.extend_from_slice(b.frame(n));
    }
    Ok(TokenTensor {
        frames: a.frames,
        tokens,
        width: a.width,
        data,
    })
}

/// Splits a cotangent of `concat_tokens` back into its two parts.
pub fn concat_tokens_vjp(
    leading_tokens: usize,
    dy: &TokenTensor,
) -> Result<(TokenTensor, TokenTensor)> {
    Ok((
        dy.slice_tokens(0, leading_tokens)?,
        dy.slice_tokens(leading_tokens, dy.tokens)?,
    ))
}

/// Join two tensors with equal frames and tokens along the width axis.
pub fn concat_width(a: &TokenTensor, b: &TokenTensor) -> Result<TokenTensor> {
    if a.frames != b.frames || a.tokens != b.tokens {
        return Err(dim_err(
            "concat_width",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let width = a.width + b.width;
    let mut data = Vec::with_capacity(a.frames * a.tokens * width);
    for n in 0..a.frames {
        for m in 0..a.tokens {
            data.extend_from_slice(a.row(n, m));
            data.extend_from_slice(b.row(n, m));
        }
    }
    Ok(TokenTensor {
        frames: a.frames,
        tokens: a.tokens,
        width,
        data,
    })
}

pub fn concat_width_vjp(
    leading_width: usize,
    dy: &TokenTensor,
) -> Result<(TokenTensor, TokenTensor)> {
    if leading_width > dy.width {
        return Err(dim_err(
            "concat_width_vjp",
            format!("split {leading_width} beyond width {}", dy.width),
        ));
    }
    let trailing = dy.width - leading_width;
    let mut a = TokenTensor::zeros(dy.frames, dy.tokens, leading_width);
    let mut b = TokenTensor::zeros(dy.frames, dy.tokens, trailing);
    for n in 0..dy.frames {
        for m in 0..dy.tokens {
            let row = dy.row(n, m);
            a.row_mut(n, m).copy_from_slice(&row[..leading_width]);
            b.row_mut(n, m).copy_from_slice(&row[leading_width..]);
        }
    }
    Ok((a, b))
}

/// Repeat the single token of each frame `tokens` times.
pub fn broadcast_tokens(x: &TokenTensor, tokens: usize) -> Result<TokenTensor> {
    if x.tokens != 1 {
        return Err(dim_err(
            "broadcast_tokens",
            format!("expected one token per frame, got {}", x.tokens),
        ));
    }
    let mut data = Vec::with_capacity(x.frames * tokens * x.width);
    for n in 0..x.frames {
        for _ in 0..tokens {
            data.extend_from_slice(x.frame(n));
        }
    }
    Ok(TokenTensor {
        frames: x.frames,
        tokens,
        width: x.width,
        data,
    })
}

/// Sums the cotangent over tokens, giving one row per frame.
pub fn broadcast_tokens_vjp(dy: &TokenTensor) -> TokenTensor {
    let mut out = TokenTensor::zeros(dy.frames, 1, dy.width);
    for n in 0..dy.frames {
        let acc = out.row_mut(n, 0);
        for m in 0..dy.tokens {
            for (a, &g) in acc.iter_mut().zip(dy.row(n, m)) {
                *a += g;
            }
        }
    }
    out
}

/// `x ⊙ s`, where `s` holds one scalar per token (`width == 1`).
pub fn scale_tokens(x: &TokenTensor, s: &TokenTensor) -> Result<TokenTensor> {
    if s.shape() != (x.frames, x.tokens, 1) {
        return Err(dim_err(
            "scale_tokens",
            format!("scale {:?} for input {:?}", s.shape(), x.shape()),
        ));
    }
    let mut out = x.clone();
    if x.width > 0 {
        for (row, &k) in out.data.chunks_exact_mut(x.width).zip(&s.data) {
            for v in row {
                *v *= k;
            }
        }
    }
    Ok(out)
}

pub fn scale_tokens_vjp(
    x: &TokenTensor,
    s: &TokenTensor,
    dy: &TokenTensor,
) -> Result<(TokenTensor, TokenTensor)> {
    let dx = scale_tokens(dy, s)?;
    x.check_same_shape(dy, "scale_tokens_vjp")?;
    let mut ds = TokenTensor::zeros(x.frames, x.tokens, 1);
    if x.width > 0 {
        for ((xr, gr), d) in x
            .data
            .chunks_exact(x.width)
            .zip(dy.data.chunks_exact(x.width))
            .zip(ds.data.iter_mut())
        {
            *d = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
        }
    }
    Ok((dx, ds))
}

/// A single kernel, used to drive [`Op::forward`] and [`vjp`] generically
/// (gradient checks, tooling). The fusion module calls the kernels directly.
#[derive(Debug, Clone, Copy)]
pub enum Op<'a> {
    Identity,
    Linear(&'a LinearMap),
    LayerNorm(&'a LayerNormParams),
    SoftmaxRows,
    Sigmoid,
    Swish,
    ConcatTokens,
    /// Element-wise floor. Piecewise constant, so it has no VJP.
    Floor,
}

/// Result of [`vjp`]: one cotangent per input, plus parameter cotangents for
/// ops that own parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Cotangents {
    pub inputs: Vec<TokenTensor>,
    pub linear: Option<LinearMap>,
    pub layer_norm: Option<LayerNormParams>,
}

impl Cotangents {
    fn inputs(inputs: Vec<TokenTensor>) -> Self {
        Self {
            inputs,
            linear: None,
            layer_norm: None,
        }
    }
}

impl Op<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Identity => "identity",
            Op::Linear(_) => "linear",
            Op::LayerNorm(_) => "layer_norm",
            Op::SoftmaxRows => "softmax_rows",
            Op::Sigmoid => "sigmoid",
            Op::Swish => "swish",
            Op::ConcatTokens => "concat_tokens",
            Op::Floor => "floor",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::ConcatTokens => 2,
            _ => 1,
        }
    }

    fn check_arity(&self, inputs: &[&TokenTensor]) -> Result<()> {
        if inputs.len() != self.arity() {
            return Err(TensorError::Arity {
                op: self.name(),
                expected: self.arity(),
                actual: inputs.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, inputs: &[&TokenTensor]) -> Result<TokenTensor> {
        self.check_arity(inputs)?;
        let x = inputs[0];
        match self {
            Op::Identity => Ok(x.clone()),
            Op::Linear(map) => matmul_tokens(x, map),
            Op::LayerNorm(p) => layer_norm(x, p),
            Op::SoftmaxRows => Ok(softmax_rows(x)),
            Op::Sigmoid => Ok(sigmoid(x)),
            Op::Swish => Ok(swish(x)),
            Op::ConcatTokens => concat_tokens(x, inputs[1]),
            Op::Floor => Ok(x.map(f64::floor)),
        }
    }
}

/// Cotangents of `op`'s inputs (and parameters) for the output cotangent
/// `cotangent`, evaluated at `inputs`.
pub fn vjp(op: &Op<'_>, inputs: &[&TokenTensor], cotangent: &TokenTensor) -> Result<Cotangents> {
    op.check_arity(inputs)?;
    let x = inputs[0];
    match op {
        Op::Identity => {
            x.check_same_shape(cotangent, "identity_vjp")?;
            Ok(Cotangents::inputs(vec![cotangent.clone()]))
        }
        Op::Linear(map) => {
            let (dx, grad) = matmul_tokens_vjp(x, map, cotangent)?;
            Ok(Cotangents {
                inputs: vec![dx],
                linear: Some(grad),
                layer_norm: None,
            })
        }
        Op::LayerNorm(p) => {
            let (dx, grad) = layer_norm_vjp(x, p, cotangent)?;
            Ok(Cotangents {
                inputs: vec![dx],
                linear: None,
                layer_norm: Some(grad),
            })
        }
        Op::SoftmaxRows => {
            let y = softmax_rows(x);
            Ok(Cotangents::inputs(vec![softmax_rows_vjp(&y, cotangent)?]))
        }
        Op::Sigmoid => Ok(Cotangents::inputs(vec![sigmoid_vjp(x, cotangent)?])),
        Op::Swish => Ok(Cotangents::inputs(vec![swish_vjp(x, cotangent)?])),
        Op::ConcatTokens => {
            let b = inputs[1];
            if cotangent.shape() != (x.frames, x.tokens + b.tokens, x.width) {
                return Err(dim_err(
                    "concat_tokens_vjp",
                    format!("cotangent shape {:?}", cotangent.shape()),
                ));
            }
            let (da, db) = concat_tokens_vjp(x.tokens, cotangent)?;
            Ok(Cotangents::inputs(vec![da, db]))
        }
        Op::Floor => Err(TensorError::UnsupportedOp(op.name())),
    }
}

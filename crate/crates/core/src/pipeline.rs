//! Everything upstream of fusion that needs no learned weights: which frames
//! to use, how many patch tokens each encoder produces, where a frame lands
//! on each encoder's canvas, and seeded stand-ins for the encoder outputs.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cgmf::{ConfigError, FusionConfig, FusionInputs};
use crate::tensor::TokenTensor;

/// Frames drawn from each clip before the boundary drop.
pub const SAMPLED_FRAMES: usize = 34;
/// Frames that reach the encoders.
pub const KEPT_FRAMES: usize = SAMPLED_FRAMES - 2;
pub const VISUAL_SIZE: usize = 448;
pub const SPATIAL_SIZE: usize = 518;
pub const PATCH_SIZE: usize = 14;
/// Register tokens emitted per frame by the spatial encoder.
pub const REGISTER_TOKENS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PipelineError {
    #[error("cannot sample frames from an empty clip")]
    EmptyClip,
    #[error("source image must have positive size, got {height}x{width}")]
    EmptyImage { height: usize, width: usize },
    #[error("content {content}px does not fit canvas {canvas}px")]
    CanvasTooSmall { content: usize, canvas: usize },
    #[error("image buffer has {actual} pixels, expected {expected}")]
    BufferSize { expected: usize, actual: usize },
}

/// Uniform frame selection for one clip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingPlan {
    pub total_frames: usize,
    /// Strictly increasing frame indices.
    pub sampled_indices: Vec<usize>,
    /// `sampled_indices` without its first and last entries.
    pub kept_indices: Vec<usize>,
}

/// Picks `floor(k·T/34)` for `k = 0..34`, collapses repeats (only possible
/// when `T < 34`), then drops the first and last pick.
pub fn plan_sampling(total_frames: usize) -> Result<SamplingPlan, PipelineError> {
    if total_frames == 0 {
        return Err(PipelineError::EmptyClip);
    }
    let mut sampled: Vec<usize> = (0..SAMPLED_FRAMES)
        .map(|k| k * total_frames / SAMPLED_FRAMES)
        .collect();
    sampled.dedup();
    let kept = if sampled.len() > 2 {
        sampled[1..sampled.len() - 1].to_vec()
    } else {
        Vec::new()
    };
    Ok(SamplingPlan {
        total_frames,
        sampled_indices: sampled,
        kept_indices: kept,
    })
}

/// Tokens produced by a non-overlapping `patch × patch` grid.
pub fn patch_tokens(height: usize, width: usize, patch: usize) -> usize {
    assert!(patch > 0, "patch size must be positive");
    (height / patch) * (width / patch)
}

/// Image size, patch size and the resulting token count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub tokens: usize,
}

impl PatchGeometry {
    pub fn new(height: usize, width: usize, patch: usize) -> Self {
        Self {
            height,
            width,
            patch,
            tokens: patch_tokens(height, width, patch),
        }
    }

    pub fn visual() -> Self {
        Self::new(VISUAL_SIZE, VISUAL_SIZE, PATCH_SIZE)
    }

    pub fn spatial() -> Self {
        Self::new(SPATIAL_SIZE, SPATIAL_SIZE, PATCH_SIZE)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }
}

/// Target sizes for the two encoders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessSpec {
    pub visual_size: (usize, usize),
    pub spatial_size: (usize, usize),
    pub pad_value: f32,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            visual_size: (VISUAL_SIZE, VISUAL_SIZE),
            spatial_size: (SPATIAL_SIZE, SPATIAL_SIZE),
            pad_value: 0.0,
        }
    }
}

/// Plain resize of the source frame to the visual encoder's input size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisualPlacement {
    pub source: (usize, usize),
    pub target: (usize, usize),
    /// Target over source, per axis (row, column).
    pub scale: (f64, f64),
}

/// The resized frame centered on the spatial encoder's padded canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialPlacement {
    pub canvas: (usize, usize),
    pub content: (usize, usize),
    /// Top-left corner of the content (row, column).
    pub offset: (usize, usize),
    pub pad_value: f32,
}

impl SpatialPlacement {
    /// Padding rows/columns on each side: (top, bottom, left, right).
    pub fn margins(&self) -> (usize, usize, usize, usize) {
        let (top, left) = self.offset;
        (
            top,
            self.canvas.0 - self.content.0 - top,
            left,
            self.canvas.1 - self.content.1 - left,
        )
    }

    pub fn is_padding(&self, row: usize, col: usize) -> bool {
        let (top, left) = self.offset;
        row < top || row >= top + self.content.0 || col < left || col >= left + self.content.1
    }

    /// Copies a row-major `content` image onto a freshly padded canvas.
    pub fn place(&self, content: &[f32]) -> Result<Vec<f32>, PipelineError> {
        let (ch, cw) = self.content;
        if content.len() != ch * cw {
            return Err(PipelineError::BufferSize {
                expected: ch * cw,
                actual: content.len(),
            });
        }
        let (h, w) = self.canvas;
        let (top, left) = self.offset;
        let mut canvas = vec![self.pad_value; h * w];
        for (r, src) in content.chunks_exact(cw).enumerate() {
            let start = (top + r) * w + left;
            canvas[start..start + cw].copy_from_slice(src);
        }
        Ok(canvas)
    }
}

/// Geometry for the default targets; see [`preprocess_geometry_with`].
pub fn preprocess_geometry(
    src_h: usize,
    src_w: usize,
) -> Result<(VisualPlacement, SpatialPlacement), PipelineError> {
    preprocess_geometry_with(&PreprocessSpec::default(), src_h, src_w)
}

/// The source frame is resized to `visual_size` without preserving aspect;
/// that resized image is then centered on the `spatial_size` canvas.
pub fn preprocess_geometry_with(
    spec: &PreprocessSpec,
    src_h: usize,
    src_w: usize,
) -> Result<(VisualPlacement, SpatialPlacement), PipelineError> {
    if src_h == 0 || src_w == 0 {
        return Err(PipelineError::EmptyImage {
            height: src_h,
            width: src_w,
        });
    }
    let (vh, vw) = spec.visual_size;
    let (sh, sw) = spec.spatial_size;
    for (content, canvas) in [(vh, sh), (vw, sw)] {
        if content > canvas {
            return Err(PipelineError::CanvasTooSmall { content, canvas });
        }
    }
    let visual = VisualPlacement {
        source: (src_h, src_w),
        target: (vh, vw),
        scale: (vh as f64 / src_h as f64, vw as f64 / src_w as f64),
    };
    let spatial = SpatialPlacement {
        canvas: (sh, sw),
        content: (vh, vw),
        offset: ((sh - vh) / 2, (sw - vw) / 2),
        pad_value: spec.pad_value,
    };
    Ok((visual, spatial))
}

/// Row distribution for synthetic encoder outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TokenDistribution {
    /// I.i.d. standard normal entries.
    #[default]
    Gaussian,
    /// Gaussian rows rescaled to unit L2 norm.
    UnitSphere,
}

impl fmt::Display for TokenDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenDistribution::Gaussian => "gaussian",
            TokenDistribution::UnitSphere => "unit_sphere",
        })
    }
}

impl FromStr for TokenDistribution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(TokenDistribution::Gaussian),
            "unit_sphere" | "unit-sphere" => Ok(TokenDistribution::UnitSphere),
            other => Err(format!("unknown distribution `{other}`")),
        }
    }
}

fn normalize_rows(t: &mut TokenTensor) {
    let width = t.width();
    if width == 0 {
        return;
    }
    for row in t.data_mut().chunks_exact_mut(width) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in row {
                *x /= norm;
            }
        }
    }
}

/// Seeded stand-in for the two encoders: `f_v`, `f_s`, `f_c` and the four
/// register tokens per frame, drawn in that order from one ChaCha8 stream.
pub fn synth_tokens(
    config: &FusionConfig,
    seed: u64,
    distribution: TokenDistribution,
) -> Result<FusionInputs, ConfigError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.n_frames;
    let mut draw = |tokens, width| {
        let mut t = TokenTensor::randn(n, tokens, width, &mut rng);
        if distribution == TokenDistribution::UnitSphere {
            normalize_rows(&mut t);
        }
        t
    };
    let f_v = draw(config.m_visual, config.d_visual);
    let f_s = draw(config.m_spatial, config.d_spatial);
    let f_c = draw(1, config.d_spatial);
    let f_register = draw(REGISTER_TOKENS, config.d_spatial);
    Ok(FusionInputs {
        f_v,
        f_s,
        f_c,
        f_register: Some(f_register),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_identity_for_34_frames() {
        let plan = plan_sampling(34).unwrap();
        assert_eq!(plan.sampled_indices, (0..34).collect::<Vec<_>>());
        assert_eq!(plan.kept_indices, (1..33).collect::<Vec<_>>());
    }

    #[test]
    fn sampling_long_clip() {
        let plan = plan_sampling(3400).unwrap();
        let expected: Vec<usize> = (0..34).map(|k| 100 * k).collect();
        assert_eq!(plan.sampled_indices, expected);
        assert_eq!(plan.kept_indices, expected[1..33].to_vec());
        assert_eq!(plan.kept_indices.len(), KEPT_FRAMES);
    }

    #[test]
    fn sampling_short_clip_collapses_repeats() {
        // floor(k·10/34) for k = 0..34 visits every frame 0..=9.
        let raw: Vec<usize> = (0..34).map(|k| k * 10 / 34).collect();
        let mut unique = raw.clone();
        unique.dedup();
        assert_eq!(unique, (0..10).collect::<Vec<_>>());

        let plan = plan_sampling(10).unwrap();
        assert_eq!(plan.sampled_indices, unique);
        assert_eq!(plan.kept_indices, (1..9).collect::<Vec<_>>());
    }

    #[test]
    fn sampling_tiny_clips() {
        assert_eq!(plan_sampling(0), Err(PipelineError::EmptyClip));
        assert!(plan_sampling(1).unwrap().kept_indices.is_empty());
        assert!(plan_sampling(2).unwrap().kept_indices.is_empty());
        assert_eq!(plan_sampling(3).unwrap().kept_indices, vec![1]);
    }

    #[test]
    fn patch_counts() {
        assert_eq!(patch_tokens(448, 448, 14), 1024);
        assert_eq!(patch_tokens(518, 518, 14), 1369);
        assert_eq!(patch_tokens(449, 448, 14), 1024);
        assert_eq!(PatchGeometry::spatial().grid(), (37, 37));
    }

    #[test]
    fn geometry_defaults() {
        let (visual, spatial) = preprocess_geometry(720, 1280).unwrap();
        assert_eq!(visual.target, (448, 448));
        assert_eq!(spatial.margins(), (35, 35, 35, 35));
        assert_eq!(spatial.canvas, (518, 518));
        assert!(preprocess_geometry(0, 10).is_err());
    }

    #[test]
    fn padding_is_zero() {
        let (_, spatial) = preprocess_geometry(100, 100).unwrap();
        let content = vec![1.0f32; 448 * 448];
        let canvas = spatial.place(&content).unwrap();
        for r in 0..518 {
            for c in 0..518 {
                let v = canvas[r * 518 + c];
                if spatial.is_padding(r, c) {
                    assert_eq!(v.to_bits(), 0.0f32.to_bits());
                } else {
                    assert_eq!(v, 1.0);
                }
            }
        }
        assert!(spatial.place(&content[1..]).is_err());
    }

    #[test]
    fn synth_shapes_and_determinism() {
        let config = FusionConfig::tiny();
        let a = synth_tokens(&config, 7, TokenDistribution::Gaussian).unwrap();
        let b = synth_tokens(&config, 7, TokenDistribution::Gaussian).unwrap();
        assert_eq!(a, b);
        assert!(a.f_v.bit_eq(&b.f_v));
        assert_eq!(a.f_v.shape(), (2, 4, 8));
        assert_eq!(a.f_s.shape(), (2, 6, 6));
        assert_eq!(a.f_c.shape(), (2, 1, 6));
        assert_eq!(a.f_register.as_ref().unwrap().shape(), (2, 4, 6));
        a.check(&config).unwrap();
        let c = synth_tokens(&config, 8, TokenDistribution::Gaussian).unwrap();
        assert_ne!(a.f_v, c.f_v);
    }

    #[test]
    fn unit_sphere_rows() {
        let config = FusionConfig::tiny();
        let x = synth_tokens(&config, 3, TokenDistribution::UnitSphere).unwrap();
        for t in [&x.f_v, &x.f_s, &x.f_c] {
            for row in t.rows() {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-9);
            }
        }
    }
}

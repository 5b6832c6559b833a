//! Central finite-difference check of [`fuse_with_grads`] against the
//! forward pass alone.
//!
//! The scalar probed is `L = ⟨cotangent, fuse(inputs)⟩`. For every parameter
//! tensor and every input stream, the group error is
//! `max_i |analytic_i − numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|)`,
//! i.e. the worst deviation relative to the group's gradient scale. A group
//! whose gradients are exactly zero on both sides reports zero.

use thiserror::Error;

use crate::cgmf::{fuse, fuse_with_grads, CgmfWeights, FusionConfig, FusionError, FusionInputs};
use crate::tensor::TokenTensor;

/// Refuse to run above this many parameters; two forward passes per scalar
/// get slow quickly.
pub const MAX_GRADCHECK_PARAMS: usize = 50_000;
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradcheckError {
    #[error(
        "config has {params} parameters; finite differences are limited to {limit}. \
         Use smaller widths (e.g. d_visual = 8, d_spatial = 6, d_attn = 4)"
    )]
    TooLarge { params: usize, limit: usize },
    #[error("unknown gradient group `{0}`")]
    UnknownGroup(String),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub group: String,
    pub count: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub step: f64,
    pub groups: Vec<GroupError>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    /// Groups at or above `tolerance`, plus any with a NaN error.
    pub fn failures(&self, tolerance: f64) -> Vec<&GroupError> {
        self.groups
            .iter()
            .filter(|g| g.max_rel_error >= tolerance || g.max_rel_error.is_nan())
            .collect()
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.failures(tolerance).is_empty()
    }
}

/// Options for [`check_fuse_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Scales the analytic gradient of the named group by 1.01 before
    /// comparison. Negative control for the checker itself.
    pub corrupt_group: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            corrupt_group: None,
        }
    }
}

fn group_error(group: String, analytic: &[f64], numeric: &[f64]) -> GroupError {
    let max_abs_error = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|x| x.abs())
        .fold(0.0, f64::max);
    let max_rel_error = if scale > 0.0 {
        max_abs_error / scale
    } else {
        max_abs_error
    };
    GroupError {
        group,
        count: analytic.len(),
        max_abs_error,
        max_rel_error,
    }
}

fn objective(
    inputs: &FusionInputs,
    weights: &CgmfWeights,
    config: &FusionConfig,
    cotangent: &TokenTensor,
) -> Result<f64, GradcheckError> {
    let out = fuse(inputs, weights, config)?;
    Ok(out.dot(cotangent).map_err(FusionError::from)?)
}

fn stream_mut<'a>(inputs: &'a mut FusionInputs, name: &str) -> &'a mut TokenTensor {
    match name {
        "f_v" => &mut inputs.f_v,
        "f_s" => &mut inputs.f_s,
        _ => &mut inputs.f_c,
    }
}

/// Compares analytic gradients with central differences for every parameter
/// tensor (named `<module>.<field>`) and the inputs `f_v`, `f_s`, `f_c`.
pub fn check_fuse_gradients(
    inputs: &FusionInputs,
    weights: &CgmfWeights,
    config: &FusionConfig,
    cotangent: &TokenTensor,
    options: &GradcheckOptions,
) -> Result<GradcheckReport, GradcheckError> {
    let params = weights.param_count();
    if params > MAX_GRADCHECK_PARAMS {
        return Err(GradcheckError::TooLarge {
            params,
            limit: MAX_GRADCHECK_PARAMS,
        });
    }
    let (_, input_grads, weight_grads) = fuse_with_grads(inputs, weights, config, cotangent)?;
    let h = options.step;

    let mut analytic: Vec<(String, Vec<f64>)> = weight_grads
        .params()
        .into_iter()
        .map(|(name, g)| (name, g.to_vec()))
        .collect();
    analytic.push(("f_v".into(), input_grads.f_v.into_data()));
    analytic.push(("f_s".into(), input_grads.f_s.into_data()));
    analytic.push(("f_c".into(), input_grads.f_c.into_data()));
    if let Some(target) = &options.corrupt_group {
        let (_, g) = analytic
            .iter_mut()
            .find(|(name, _)| name == target)
            .ok_or_else(|| GradcheckError::UnknownGroup(target.clone()))?;
        g.iter_mut().for_each(|x| *x *= 1.01);
    }

    let mut groups = Vec::with_capacity(analytic.len());
    let mut w = weights.clone();
    let n_param_groups = w.params().len();
    for (gi, (name, grad)) in analytic.iter().enumerate().take(n_param_groups) {
        let mut numeric = Vec::with_capacity(grad.len());
        for j in 0..grad.len() {
            let orig = w.params()[gi].1[j];
            w.params_mut()[gi].1[j] = orig + h;
            let plus = objective(inputs, &w, config, cotangent)?;
            w.params_mut()[gi].1[j] = orig - h;
            let minus = objective(inputs, &w, config, cotangent)?;
            w.params_mut()[gi].1[j] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        groups.push(group_error(name.clone(), grad, &numeric));
    }

    let mut x = inputs.clone();
    for (name, grad) in analytic.iter().skip(n_param_groups) {
        let mut numeric = Vec::with_capacity(grad.len());
        for j in 0..grad.len() {
            let orig = stream_mut(&mut x, name).data()[j];
            stream_mut(&mut x, name).data_mut()[j] = orig + h;
            let plus = objective(&x, weights, config, cotangent)?;
            stream_mut(&mut x, name).data_mut()[j] = orig - h;
            let minus = objective(&x, weights, config, cotangent)?;
            stream_mut(&mut x, name).data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        groups.push(group_error(name.clone(), grad, &numeric));
    }
    Ok(GradcheckReport { step: h, groups })
}

//! Margin softmax, embedding distillation and their combination.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::param::{Builder, Ctx, ParamId};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const DEFAULT_SCALE: f64 = 64.0;
pub const DEFAULT_MARGIN: f64 = 0.5;
pub const DEFAULT_LAMBDA: f64 = 100.0;

/// Class centres plus the scale and additive angular margin.
#[derive(Clone, Debug)]
pub struct ArcFaceHead {
    pub centers: ParamId,
    pub classes: usize,
    pub dim: usize,
    pub scale: f64,
    pub margin: f64,
}

impl ArcFaceHead {
    pub fn build<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        classes: usize,
        dim: usize,
        scale: f64,
        margin: f64,
    ) -> Result<Self> {
        check_head(scale, margin)?;
        let std = (1.0 / dim as f64).sqrt();
        let w = Tensor::randn(&[classes, dim], std, b.rng)?;
        let centers = b.tensor("centers", w)?;
        Ok(Self {
            centers,
            classes,
            dim,
            scale,
            margin,
        })
    }
}

fn check_head(scale: f64, margin: f64) -> Result<()> {
    if !(scale > 0.0) {
        return Err(Error::invalid(format!("arcface scale must be positive, got {scale}")));
    }
    if !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) {
        return Err(Error::invalid(format!("arcface margin must lie in [0, pi/2), got {margin}")));
    }
    Ok(())
}

/// Mean additive-angular-margin cross-entropy of `(M, D)` embeddings
/// against `(C, D)` class centres. Both sides are row-normalised first.
pub fn arcface_from_centers<'t, T: Real>(
    embeddings: Var<'t, T>,
    centers: Var<'t, T>,
    labels: &[usize],
    scale: f64,
    margin: f64,
) -> Result<Var<'t, T>> {
    check_head(scale, margin)?;
    let f = embeddings.l2_normalize()?;
    let w = centers.l2_normalize()?;
    let cos = f.matmul_nt(w)?;
    let logits = cos.arc_margin(labels, T::lit(scale), T::lit(margin))?;
    logits.cross_entropy(labels)
}

pub fn arcface_loss<'t, T: Real>(
    ctx: &mut Ctx<'t, '_, T>,
    embeddings: Var<'t, T>,
    labels: &[usize],
    head: &ArcFaceHead,
) -> Result<Var<'t, T>> {
    let centers = ctx.param(head.centers);
    arcface_from_centers(embeddings, centers, labels, head.scale, head.margin)
}

/// Mean squared difference of the row-normalised student and teacher
/// embeddings. The teacher enters as a constant.
pub fn embed_mse<'t, T: Real>(student: Var<'t, T>, teacher: &Tensor<T>) -> Result<Var<'t, T>> {
    let s = student.value();
    if s.shape() != teacher.shape() {
        return Err(Error::shape("embed_mse", s.shape(), teacher.shape()));
    }
    let t = student.tape().constant(teacher.clone()).l2_normalize()?;
    student.l2_normalize()?.mse_mean(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KdMode {
    None,
    Converged,
    MultiStep,
}

impl fmt::Display for KdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KdMode::None => "none",
            KdMode::Converged => "converged",
            KdMode::MultiStep => "multi-step",
        })
    }
}

impl FromStr for KdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(KdMode::None),
            "converged" => Ok(KdMode::Converged),
            "multi-step" | "multi_step" => Ok(KdMode::MultiStep),
            _ => Err(Error::invalid(format!("unknown kd mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub kd_mode: KdMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            kd_mode: KdMode::MultiStep,
        }
    }
}

impl LossConfig {
    pub fn new(lambda: f64, kd_mode: KdMode) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be finite and non-negative, got {lambda}")));
        }
        Ok(Self { lambda, kd_mode })
    }
}

/// `arc + λ·mse`; the distillation term is left out entirely without KD.
pub fn combined_loss<'t, T: Real>(arc: Var<'t, T>, mse: Option<Var<'t, T>>, config: &LossConfig) -> Result<Var<'t, T>> {
    match (config.kd_mode, mse) {
        (KdMode::None, _) | (_, None) => Ok(arc),
        (_, Some(m)) => arc.add(m.scale(T::lit(config.lambda))),
    }
}

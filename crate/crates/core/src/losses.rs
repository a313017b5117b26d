//! Training losses and evaluation metrics.
//!
//! Both losses are mean-reduced over valid pixels. A ground-truth pixel is
//! valid when it is finite and non-negative; invalid pixels are dropped from
//! every loss and metric.

use crate::autograd::{smooth_l1_value, Graph, Var};
use crate::disparity::DisparityMap;
use crate::error::{ensure, Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Per-pixel error above which a pixel counts as a D1 outlier.
pub const D1_THRESHOLD: f32 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight decay in the stage-1 loss.
    pub alpha1: f64,
    /// Weight of the small-map L1 term in the stage-2 loss.
    pub alpha2: f64,
    /// Weight decay in the stage-2 loss.
    pub beta2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha1: 1e-4,
            alpha2: 0.5,
            beta2: 1e-4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.alpha1 >= 0.0 && self.alpha2 >= 0.0 && self.beta2 >= 0.0,
            "loss coefficients must be non-negative"
        );
        Ok(())
    }
}

/// Elementwise `0.5 x^2` for `|x| < 1`, `|x| - 0.5` otherwise.
pub fn smooth_l1<T: Scalar>(x: T) -> T {
    smooth_l1_value(x)
}

/// Ground truth as a constant `(N, 1, H, W)` tensor with NaN/negative pixels
/// replaced by zero, plus the validity mask.
fn target<T: Scalar>(gt: &[&DisparityMap]) -> Result<(Tensor<T>, Vec<bool>)> {
    ensure!(!gt.is_empty(), "no ground-truth maps");
    let (h, w) = (gt[0].height, gt[0].width);
    let mut data = Vec::with_capacity(gt.len() * h * w);
    let mut mask = Vec::with_capacity(gt.len() * h * w);
    for m in gt {
        ensure!(
            m.height == h && m.width == w,
            "ground-truth maps differ in size"
        );
        for &v in &m.data {
            let ok = v.is_finite() && v >= 0.0;
            mask.push(ok);
            data.push(if ok { T::of(v as f64) } else { T::zero() });
        }
    }
    Ok((Tensor::from_vec(Shape::new(gt.len(), 1, h, w), data)?, mask))
}

fn residual<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: &[&DisparityMap]) -> Result<(Var, Vec<bool>)> {
    let (t, mask) = target::<T>(gt)?;
    ensure!(
        g.shape(pred) == t.shape(),
        "prediction {} and ground truth {} differ",
        g.shape(pred),
        t.shape()
    );
    ensure!(
        mask.iter().any(|&m| m),
        "ground truth has no valid pixels"
    );
    let neg = Tensor::from_vec(t.shape(), t.data().iter().map(|&v| -v).collect())?;
    Ok((g.add_const(pred, &neg)?, mask))
}

fn weight_decay<T: Scalar>(g: &mut Graph<T>, weights: &[Var]) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for &w in weights {
        let s = g.sum_squares(w);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    Ok(total)
}

fn plus_scaled<T: Scalar>(g: &mut Graph<T>, acc: Var, term: Option<Var>, k: f64) -> Result<Var> {
    match term {
        Some(t) if k != 0.0 => {
            let s = g.scale(t, k);
            g.add(acc, s)
        }
        _ => Ok(acc),
    }
}

/// `mean smooth_l1(p_c - T) + alpha1 * sum(w^2)` over `weights` (biases are
/// not passed in).
pub fn loss1<T: Scalar>(
    g: &mut Graph<T>,
    coarse: Var,
    gt: &[&DisparityMap],
    weights: &[Var],
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (r, mask) = residual(g, coarse, gt)?;
    let s = g.smooth_l1(r);
    let data = g.masked_mean(s, &mask)?;
    let wd = weight_decay(g, weights)?;
    plus_scaled(g, data, wd, cfg.alpha1)
}

/// `mean smooth_l1(p_f - T) + alpha2 * mean |p_s - T_s| + beta2 * sum(w^2)`.
pub fn loss2<T: Scalar>(
    g: &mut Graph<T>,
    refined: Var,
    gt: &[&DisparityMap],
    small: Var,
    gt_small: &[&DisparityMap],
    weights: &[Var],
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (r, mask) = residual(g, refined, gt)?;
    let s = g.smooth_l1(r);
    let data = g.masked_mean(s, &mask)?;
    let (rs, mask_s) = residual(g, small, gt_small)?;
    let a = g.abs(rs);
    let small_term = g.masked_mean(a, &mask_s)?;
    let acc = plus_scaled(g, data, Some(small_term), cfg.alpha2)?;
    let wd = weight_decay(g, weights)?;
    plus_scaled(g, acc, wd, cfg.beta2)
}

/// Valid-pixel mask combining the caller's mask with the ground-truth rule.
fn effective_mask(gt: &DisparityMap, mask: Option<&[bool]>) -> Result<Vec<bool>> {
    let mut m = gt.valid_mask();
    if let Some(extra) = mask {
        ensure!(
            extra.len() == m.len(),
            "mask has {} entries for {}x{}",
            extra.len(),
            gt.height,
            gt.width
        );
        for (a, &b) in m.iter_mut().zip(extra) {
            *a &= b;
        }
    }
    Ok(m)
}

fn errors(pred: &DisparityMap, gt: &DisparityMap, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    ensure!(
        pred.height == gt.height && pred.width == gt.width,
        "prediction {}x{} and ground truth {}x{} differ",
        pred.height,
        pred.width,
        gt.height,
        gt.width
    );
    let m = effective_mask(gt, mask)?;
    let errs: Vec<f64> = pred
        .data
        .iter()
        .zip(&gt.data)
        .zip(&m)
        .filter(|(_, &keep)| keep)
        .map(|((&p, &t), _)| (p as f64 - t as f64).abs())
        .collect();
    if errs.is_empty() {
        return Err(Error::contract("metric over an empty mask"));
    }
    Ok(errs)
}

/// Mean absolute disparity error over masked pixels.
pub fn epe(pred: &DisparityMap, gt: &DisparityMap, mask: Option<&[bool]>) -> Result<f64> {
    let e = errors(pred, gt, mask)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Fraction (0..=1) of masked pixels whose error exceeds `threshold`.
pub fn d1_rate(
    pred: &DisparityMap,
    gt: &DisparityMap,
    mask: Option<&[bool]>,
    threshold: f32,
) -> Result<f64> {
    let e = errors(pred, gt, mask)?;
    let bad = e.iter().filter(|&&v| v > threshold as f64).count();
    Ok(bad as f64 / e.len() as f64)
}

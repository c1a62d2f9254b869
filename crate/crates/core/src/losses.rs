//! Training objectives. Each term has a raw kernel over `f64` slices that
//! returns the value and its gradient, and a [`Volume`] wrapper that checks
//! shapes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Weight of the cycle term in the translation objective.
pub const DEFAULT_LAMBDA: f64 = 10.0;
/// Smoothing constant of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-5;
const SIMPLEX_TOL: f64 = 1e-3;

/// `mean((s - target)^2)` and its gradient.
pub fn squared_error_to(scores: &[f64], target: f64) -> (f64, Vec<f64>) {
    let n = scores.len() as f64;
    let value = scores.iter().map(|s| (s - target).powi(2)).sum::<f64>() / n;
    (value, scores.iter().map(|s| 2.0 * (s - target) / n).collect())
}

/// `mean(|x - target|)` and its (sub)gradient w.r.t. `x`.
pub fn mean_abs_error(x: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = x.len() as f64;
    let value = x.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let grad = x.iter().zip(target).map(|(a, b)| (a - b).signum() * f64::from(u8::from(a != b)) / n).collect();
    (value, grad)
}

/// Soft Dice loss of one channel, `1 - (2 Σpy + ε) / (Σp + Σy + ε)`, and its
/// gradient w.r.t. `p`.
pub fn dice_channel(p: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    let inter: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
    let denom = p.iter().sum::<f64>() + y.iter().sum::<f64>() + DICE_EPS;
    let num = 2.0 * inter + DICE_EPS;
    let grad = y.iter().map(|&yi| -(2.0 * yi * denom - num) / (denom * denom)).collect();
    (1.0 - num / denom, grad)
}

/// Mean soft Dice loss over the tumor channels 1..=3 of channel-major 4-class
/// maps; the background channel receives zero gradient.
pub fn soft_dice(p: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    let n = p.len() / 4;
    let mut grad = vec![0.0; p.len()];
    let mut total = 0.0;
    for c in 1..4 {
        let r = c * n..(c + 1) * n;
        let (v, g) = dice_channel(&p[r.clone()], &y[r.clone()]);
        total += v / 3.0;
        for (dst, gi) in grad[r].iter_mut().zip(g) {
            *dst = gi / 3.0;
        }
    }
    (total, grad)
}

fn widen(v: &Volume) -> Vec<f64> {
    v.data().iter().map(|&x| x as f64).collect()
}

fn narrow(like: &Volume, g: Vec<f64>) -> Volume {
    Volume::from_parts(like.channels(), like.dims(), like.spacing(), g.into_iter().map(|x| x as f32).collect())
}

fn nonempty(v: &Volume, what: &'static str) -> Result<()> {
    if v.data().is_empty() {
        return Err(Error::Empty(what));
    }
    Ok(())
}

fn same_shape(a: &Volume, b: &Volume, what: &str) -> Result<()> {
    if a.channels() != b.channels() || a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: {}x{:?} vs {}x{:?}",
            a.channels(),
            a.dims(),
            b.channels(),
            b.dims()
        )));
    }
    Ok(())
}

/// Least-squares discriminator loss `mean((real-1)^2) + mean(fake^2)` with
/// gradients w.r.t. both score maps.
pub fn adv_loss_discriminator_grad(real: &Volume, fake: &Volume) -> Result<(f64, Volume, Volume)> {
    nonempty(real, "real score map")?;
    nonempty(fake, "fake score map")?;
    let (lr, gr) = squared_error_to(&widen(real), 1.0);
    let (lf, gf) = squared_error_to(&widen(fake), 0.0);
    Ok((lr + lf, narrow(real, gr), narrow(fake, gf)))
}

pub fn adv_loss_discriminator(real: &Volume, fake: &Volume) -> Result<f64> {
    Ok(adv_loss_discriminator_grad(real, fake)?.0)
}

/// Least-squares generator loss `mean((fake-1)^2)` and its gradient.
pub fn adv_loss_generator_grad(fake: &Volume) -> Result<(f64, Volume)> {
    nonempty(fake, "fake score map")?;
    let (l, g) = squared_error_to(&widen(fake), 1.0);
    Ok((l, narrow(fake, g)))
}

pub fn adv_loss_generator(fake: &Volume) -> Result<f64> {
    Ok(adv_loss_generator_grad(fake)?.0)
}

/// Cycle reconstruction loss `mean|a_rec - a| + mean|b_rec - b|` with
/// gradients w.r.t. the two reconstructions.
pub fn cycle_loss_grad(a: &Volume, a_rec: &Volume, b: &Volume, b_rec: &Volume) -> Result<(f64, Volume, Volume)> {
    same_shape(a, a_rec, "cycle pair A")?;
    same_shape(b, b_rec, "cycle pair B")?;
    nonempty(a, "cycle input")?;
    nonempty(b, "cycle input")?;
    let (la, ga) = mean_abs_error(&widen(a_rec), &widen(a));
    let (lb, gb) = mean_abs_error(&widen(b_rec), &widen(b));
    Ok((la + lb, narrow(a_rec, ga), narrow(b_rec, gb)))
}

pub fn cycle_loss(a: &Volume, a_rec: &Volume, b: &Volume, b_rec: &Volume) -> Result<f64> {
    Ok(cycle_loss_grad(a, a_rec, b, b_rec)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmftLossReport {
    pub adv_g_ab: f64,
    pub adv_g_ba: f64,
    pub adv_d_a: f64,
    pub adv_d_b: f64,
    pub cyc: f64,
    pub lambda: f64,
    pub total_g: f64,
    pub total_d: f64,
}

fn finite(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::NonFinite { term: name.to_string() });
    }
    Ok(())
}

/// Combines the translation terms: `total_g = adv_g_ab + adv_g_ba + λ·cyc`
/// and `total_d = adv_d_a + adv_d_b`.
pub fn cmft_total(adv_g_ab: f64, adv_g_ba: f64, adv_d_a: f64, adv_d_b: f64, cyc: f64, lambda: f64) -> Result<CmftLossReport> {
    for (name, v) in [
        ("adv_g_ab", adv_g_ab),
        ("adv_g_ba", adv_g_ba),
        ("adv_d_a", adv_d_a),
        ("adv_d_b", adv_d_b),
        ("cyc", cyc),
        ("lambda", lambda),
    ] {
        finite(name, v)?;
    }
    Ok(CmftLossReport {
        adv_g_ab,
        adv_g_ba,
        adv_d_a,
        adv_d_b,
        cyc,
        lambda,
        total_g: adv_g_ab + adv_g_ba + lambda * cyc,
        total_d: adv_d_a + adv_d_b,
    })
}

/// Checks that `v` has 4 channels and sums to one at every voxel.
pub fn check_simplex(v: &Volume, what: &str) -> Result<()> {
    if v.channels() != 4 {
        return Err(Error::Shape(format!("{what} must have 4 channels, got {}", v.channels())));
    }
    let n = v.voxels();
    for i in 0..n {
        let mut s = 0.0f64;
        for c in 0..4 {
            let p = v.data()[c * n + i] as f64;
            if !(-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(&p) {
                return Err(Error::InvalidValue(format!("{what}: value {p} outside [0, 1] at voxel {i}")));
            }
            s += p;
        }
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidValue(format!("{what}: channels sum to {s} at voxel {i}")));
        }
    }
    Ok(())
}

/// Soft Dice loss of a 4-class probability map against a one-hot target,
/// averaged over the three tumor channels, with its gradient w.r.t. `pred`.
pub fn soft_dice_loss_grad(pred: &Volume, target: &Volume) -> Result<(f64, Volume)> {
    same_shape(pred, target, "dice prediction vs target")?;
    check_simplex(pred, "prediction")?;
    let (l, g) = soft_dice(&widen(pred), &widen(target));
    Ok((l, narrow(pred, g)))
}

pub fn soft_dice_loss(pred: &Volume, target: &Volume) -> Result<f64> {
    Ok(soft_dice_loss_grad(pred, target)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmffLossReport {
    pub dice_a: f64,
    pub dice_b: f64,
    pub dice_f: f64,
    pub total: f64,
}

impl CmffLossReport {
    pub fn new(dice_a: f64, dice_b: f64, dice_f: f64) -> Result<Self> {
        for (name, v) in [("dice_a", dice_a), ("dice_b", dice_b), ("dice_f", dice_f)] {
            finite(name, v)?;
        }
        Ok(Self { dice_a, dice_b, dice_f, total: dice_a + dice_b + dice_f })
    }
}

/// Unweighted sum of the Dice losses of both branches and the fusion head.
pub fn cmff_total(pred_a: &Volume, pred_b: &Volume, pred_f: &Volume, target: &Volume) -> Result<CmffLossReport> {
    CmffLossReport::new(
        soft_dice_loss(pred_a, target)?,
        soft_dice_loss(pred_b, target)?,
        soft_dice_loss(pred_f, target)?,
    )
}

#[derive(Serialize)]
struct LogRecord<'a, T: Serialize> {
    step: u64,
    phase: &'a str,
    #[serde(flatten)]
    report: &'a T,
}

/// One JSON line of the training log.
pub fn log_line<T: Serialize>(step: u64, phase: &str, report: &T) -> Result<String> {
    Ok(serde_json::to_string(&LogRecord { step, phase, report })?)
}

//! Pixel losses, the L1→L2 schedule, and PSNR/SSIM.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Var};
use crate::resample::Image;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    L1,
    L2,
}

impl LossKind {
    pub fn apply<T: Scalar>(self, tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
        match self {
            LossKind::L1 => l1_loss(tape, pred, gt),
            LossKind::L2 => l2_loss(tape, pred, gt),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::L1 => "L1",
            LossKind::L2 => "L2",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L1" | "l1" => Ok(LossKind::L1),
            "L2" | "l2" => Ok(LossKind::L2),
            other => Err(Error::Invalid(format!("unknown loss kind {other:?}"))),
        }
    }
}

/// L1 for the first `switch_epoch` epochs (0-based `0..switch_epoch`), L2 after.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossSchedule {
    pub switch_epoch: usize,
}

pub fn scheduled_loss(epoch: usize, schedule: LossSchedule) -> LossKind {
    if epoch < schedule.switch_epoch {
        LossKind::L1
    } else {
        LossKind::L2
    }
}

fn same_shape<T: Scalar>(tape: &Tape<T>, pred: Var, gt: Var, op: &'static str) -> Result<()> {
    if tape.shape(pred) != tape.shape(gt) {
        return Err(Error::shape(op, tape.shape(pred), tape.shape(gt)));
    }
    Ok(())
}

/// Mean absolute error over all elements.
pub fn l1_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    same_shape(tape, pred, gt, "l1_loss")?;
    let d = tape.sub(pred, gt)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Mean squared error over all elements.
pub fn l2_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    same_shape(tape, pred, gt, "l2_loss")?;
    let d = tape.sub(pred, gt)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// PSNR in dB of two equally sized sample sets.
pub fn psnr_slices<T: Scalar>(a: &[T], b: &[T], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("psnr", &[a.len()], &[b.len()]));
    }
    let sse: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    let mse = sse / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    psnr_with_peak(a, b, 1.0)
}

pub fn psnr_with_peak(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::shape("psnr", a.tensor().shape(), b.tensor().shape()));
    }
    psnr_slices(a.data(), b.data(), peak)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// "valid" separable filtering of an `h × w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| taps[k] * src[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| taps[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), `K1 = 0.01`,
/// `K2 = 0.03` and dynamic range 1. Only fully covered window positions are
/// averaged. RGB inputs are converted to Rec.601 luma first.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::shape("ssim", a.tensor().shape(), b.tensor().shape()));
    }
    let (a, b) = match a.channels() {
        1 => (a.clone(), b.clone()),
        3 => (a.luminance(), b.luminance()),
        c => return Err(Error::Invalid(format!("ssim needs 1 or 3 channels, got {c}"))),
    };
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Invalid(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let x: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let taps = gaussian_taps();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mu_x = filter_valid(&x, h, w, &taps);
    let mu_y = filter_valid(&y, h, w, &taps);
    let xx = filter_valid(&prod(&x, &x), h, w, &taps);
    let yy = filter_valid(&prod(&y, &y), h, w, &taps);
    let xy = filter_valid(&prod(&x, &y), h, w, &taps);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let total: f64 = (0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let sxx = xx[i] - mx * mx;
            let syy = yy[i] - my * my;
            let sxy = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        })
        .sum();
    Ok(total / mu_x.len() as f64)
}

use crate::phantom::{ImageSlice, Modality, HU_MAX, HU_MIN};
use crate::{Error, Result};

/// PSNR reported for (near-)identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
/// MSE below which the PSNR cap applies.
pub const PSNR_MIN_MSE: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(a: &ImageSlice, b: &ImageSlice) -> Result<()> {
    if a.size() != b.size() {
        return Err(Error::Shape(format!("images are {} and {} wide", a.size(), b.size())));
    }
    if a.modality() != Modality::CT || b.modality() != Modality::CT {
        return Err(Error::InvalidImage("metrics compare CT-domain images".into()));
    }
    Ok(())
}

/// HU rescaled to `[0, 1]` over the CT range.
pub fn unit_intensity(hu: f32) -> f64 {
    (hu as f64 - HU_MIN as f64) / (HU_MAX - HU_MIN) as f64
}

/// Mean absolute difference in HU over `region` (all pixels when `None`).
///
/// An empty region yields `None`: the metric is absent, not zero.
pub fn mae(a: &ImageSlice, b: &ImageSlice, region: Option<&[bool]>) -> Result<Option<f64>> {
    check_pair(a, b)?;
    if let Some(r) = region {
        if r.len() != a.pixels().len() {
            return Err(Error::Shape(format!(
                "region has {} entries for {} pixels",
                r.len(),
                a.pixels().len()
            )));
        }
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (&x, &y)) in a.pixels().iter().zip(b.pixels()).enumerate() {
        if region.map_or(true, |r| r[i]) {
            sum += (x as f64 - y as f64).abs();
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_MIN_MSE {
        PSNR_CAP_DB
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Peak signal-to-noise ratio on the `[0, 1]` representation, capped.
pub fn psnr(a: &ImageSlice, b: &ImageSlice) -> Result<f64> {
    check_pair(a, b)?;
    let mse = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| (unit_intensity(x) - unit_intensity(y)).powi(2))
        .sum::<f64>()
        / a.pixels().len() as f64;
    Ok(psnr_from_mse(mse))
}

/// Normalized 11x11 Gaussian window, row-major.
pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in &g {
        for x in &g {
            w.push(y * x / (s * s));
        }
    }
    w
}

/// Structural similarity of two `[0, 1]` images of side `n`, averaged over
/// every window position that lies fully inside the image.
pub fn ssim_unit(a: &[f64], b: &[f64], n: usize) -> Result<f64> {
    if a.len() != n * n || b.len() != n * n {
        return Err(Error::Shape("ssim inputs must be n x n".into()));
    }
    if n < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs at least {SSIM_WINDOW} pixels per side, got {n}"
        )));
    }
    let w = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let m = n - SSIM_WINDOW + 1;
    let mut total = 0.0;
    for y0 in 0..m {
        for x0 in 0..m {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let k = (y0 + dy) * n + x0 + dx;
                    let g = w[dy * SSIM_WINDOW + dx];
                    ma += g * a[k];
                    mb += g * b[k];
                    saa += g * a[k] * a[k];
                    sbb += g * b[k] * b[k];
                    sab += g * a[k] * b[k];
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (m * m) as f64)
}

pub fn ssim(a: &ImageSlice, b: &ImageSlice) -> Result<f64> {
    check_pair(a, b)?;
    let ua: Vec<f64> = a.pixels().iter().map(|&v| unit_intensity(v)).collect();
    let ub: Vec<f64> = b.pixels().iter().map(|&v| unit_intensity(v)).collect();
    ssim_unit(&ua, &ub, a.size())
}

/// Dice overlap; two empty masks agree perfectly.
pub fn dsc(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("masks have {} and {} entries", a.len(), b.len())));
    }
    let na = a.iter().filter(|&&v| v).count();
    let nb = b.iter().filter(|&&v| v).count();
    if na + nb == 0 {
        return Ok(1.0);
    }
    let both = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

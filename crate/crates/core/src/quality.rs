//! Losses and image metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::HdrImage;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 8;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_dims(a: &HdrImage, b: &HdrImage) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )))
    }
}

/// Mean absolute difference over all pixels and channels.
pub fn l1_loss(a: &HdrImage, b: &HdrImage) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .sum::<f64>()
        / n)
}

pub fn mse(a: &HdrImage, b: &HdrImage) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / n)
}

pub fn rmse(a: &HdrImage, b: &HdrImage) -> Result<f64> {
    Ok(mse(a, b)?.sqrt())
}

/// PSNR from an RMSE value, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_rmse(rmse: f64, peak: f64) -> f64 {
    if rmse < peak * 1e-5 {
        PSNR_CAP_DB
    } else {
        20.0 * (peak / rmse).log10()
    }
}

pub fn psnr(a: &HdrImage, b: &HdrImage, peak: f64) -> Result<f64> {
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::Validation(format!(
            "peak must be positive, got {peak}"
        )));
    }
    Ok(psnr_from_rmse(rmse(a, b)?, peak))
}

/// Mean SSIM over every 8x8 window position and channel.
pub fn ssim(a: &HdrImage, b: &HdrImage, peak: f64) -> Result<f64> {
    check_dims(a, b)?;
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::Validation(format!(
            "peak must be positive, got {peak}"
        )));
    }
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Validation(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels"
        )));
    }
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let nw = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let rows: Vec<f64> = (0..=h - SSIM_WINDOW)
        .into_par_iter()
        .map(|y0| {
            let mut acc = 0.0;
            for x0 in 0..=w - SSIM_WINDOW {
                for c in 0..3 {
                    let px =
                        |img: &HdrImage, x: usize, y: usize| img.data[(y * w + x) * 3 + c] as f64;
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for y in y0..y0 + SSIM_WINDOW {
                        for x in x0..x0 + SSIM_WINDOW {
                            ma += px(a, x, y);
                            mb += px(b, x, y);
                        }
                    }
                    ma /= nw;
                    mb /= nw;
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    for y in y0..y0 + SSIM_WINDOW {
                        for x in x0..x0 + SSIM_WINDOW {
                            let (da, db) = (px(a, x, y) - ma, px(b, x, y) - mb);
                            va += da * da;
                            vb += db * db;
                            cov += da * db;
                        }
                    }
                    va /= nw;
                    vb /= nw;
                    cov /= nw;
                    acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                }
            }
            acc
        })
        .collect();
    let count = ((w - SSIM_WINDOW + 1) * (h - SSIM_WINDOW + 1) * 3) as f64;
    Ok(rows.iter().sum::<f64>() / count)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MrfConfig {
    /// Patch side at full and at half resolution.
    pub patch_sizes: [usize; 2],
    pub stride: usize,
    pub bandwidth: f64,
    pub epsilon: f64,
}

impl Default for MrfConfig {
    fn default() -> Self {
        MrfConfig {
            patch_sizes: [5, 5],
            stride: 2,
            bandwidth: 0.5,
            epsilon: 1e-5,
        }
    }
}

impl MrfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_sizes.iter().any(|&p| p < 2) {
            return Err(Error::Validation("mrf patch size must be >= 2".into()));
        }
        if self.stride == 0 {
            return Err(Error::Validation("mrf stride must be >= 1".into()));
        }
        if !(self.bandwidth > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Validation(
                "mrf bandwidth and epsilon must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Interleaved RGB raster in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Validation("raster buffer size mismatch".into()));
        }
        Ok(Raster {
            width,
            height,
            data,
        })
    }

    pub fn from_hdr(img: &HdrImage) -> Self {
        Raster {
            width: img.width,
            height: img.height,
            data: img.data.iter().map(|&v| v as f64).collect(),
        }
    }

    fn downsample(&self) -> Raster {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut data = vec![0.0; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let at = |xx: usize, yy: usize| self.data[(yy * self.width + xx) * 3 + c];
                    data[(y * w + x) * 3 + c] = 0.25
                        * (at(2 * x, 2 * y)
                            + at(2 * x + 1, 2 * y)
                            + at(2 * x, 2 * y + 1)
                            + at(2 * x + 1, 2 * y + 1));
                }
            }
        }
        Raster {
            width: w,
            height: h,
            data,
        }
    }

    /// Adjoint of [`Raster::downsample`].
    fn upsample_grad(grad: &[f64], w: usize, h: usize, full_w: usize, full_h: usize) -> Vec<f64> {
        let mut out = vec![0.0; full_w * full_h * 3];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let g = 0.25 * grad[(y * w + x) * 3 + c];
                    for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        out[((2 * y + dy) * full_w + 2 * x + dx) * 3 + c] += g;
                    }
                }
            }
        }
        out
    }
}

fn patch_origins(w: usize, h: usize, p: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    if w < p || h < p {
        return v;
    }
    for y in (0..=h - p).step_by(stride) {
        for x in (0..=w - p).step_by(stride) {
            v.push((x, y));
        }
    }
    v
}

fn extract(r: &Raster, origins: &[(usize, usize)], p: usize) -> Vec<Vec<f64>> {
    origins
        .iter()
        .map(|&(x0, y0)| {
            let mut v = Vec::with_capacity(p * p * 3);
            for y in y0..y0 + p {
                let start = (y * r.width + x0) * 3;
                v.extend_from_slice(&r.data[start..start + p * 3]);
            }
            v
        })
        .collect()
}

/// Mean of the target patches, the common origin for both sides.
fn mean_patch(patches: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; patches[0].len()];
    for q in patches {
        for (a, b) in m.iter_mut().zip(q) {
            *a += b;
        }
    }
    let n = patches.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Centred, epsilon-stabilised unit vector and its norm.
fn normalize(patch: &[f64], mean: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let c: Vec<f64> = patch.iter().zip(mean).map(|(v, m)| v - m).collect();
    let n = (c.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
    (c.iter().map(|v| v / n).collect(), n)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One scale of the matching function; returns the loss and optionally
/// d loss / d x on the raster of that scale.
fn match_scale(
    x: &Raster,
    y: &Raster,
    p: usize,
    cfg: &MrfConfig,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let origins = patch_origins(x.width, x.height, p, cfg.stride);
    if origins.is_empty() {
        return Err(Error::Validation(format!(
            "{}x{} image is smaller than the {p}x{p} mrf patch",
            x.width, x.height
        )));
    }
    let eps = cfg.epsilon;
    let h = cfg.bandwidth;
    let targets = extract(y, &origins, p);
    let mean = mean_patch(&targets);
    let us: Vec<(Vec<f64>, f64)> = extract(x, &origins, p)
        .iter()
        .map(|q| normalize(q, &mean, eps))
        .collect();
    let vs: Vec<Vec<f64>> = targets
        .iter()
        .map(|q| normalize(q, &mean, eps).0)
        .collect();
    let nu = us.len();

    // rows indexed by target patch v, columns by generated patch u
    struct Row {
        d: Vec<f64>,
        w: Vec<f64>,
        z: f64,
        min: f64,
        argmin: usize,
    }
    let rows: Vec<Row> = vs
        .par_iter()
        .map(|v| {
            let d: Vec<f64> = us.iter().map(|(u, _)| 1.0 - dot(v, u)).collect();
            let (mut argmin, mut min) = (0, d[0]);
            for (j, &dj) in d.iter().enumerate().skip(1) {
                if dj < min {
                    min = dj;
                    argmin = j;
                }
            }
            let w: Vec<f64> = d
                .iter()
                .map(|&dj| ((1.0 - dj / (min + eps)) / h).exp())
                .collect();
            let z = w.iter().sum();
            Row {
                d,
                w,
                z,
                min,
                argmin,
            }
        })
        .collect();

    let mut best = vec![(0usize, f64::NEG_INFINITY); nu];
    for (i, r) in rows.iter().enumerate() {
        for j in 0..nu {
            let wb = r.w[j] / r.z;
            if wb > best[j].1 {
                best[j] = (i, wb);
            }
        }
    }
    let total: f64 = best.iter().map(|b| b.1).sum();
    let loss = -(total / nu as f64).ln();
    if !want_grad {
        return Ok((loss, None));
    }

    let g_m = -1.0 / total;
    let mut winners: Vec<Vec<usize>> = vec![Vec::new(); rows.len()];
    for (j, b) in best.iter().enumerate() {
        winners[b.0].push(j);
    }
    // d loss / d S(v, u) per row, then gathered per u
    let ds: Vec<Vec<f64>> = rows
        .par_iter()
        .zip(&winners)
        .map(|(r, won)| {
            let mut out = vec![0.0; nu];
            if won.is_empty() {
                return out;
            }
            // d loss / d wbar is g_m at the winning columns, zero elsewhere
            let s: f64 = won.iter().map(|&j| g_m * r.w[j] / r.z).sum();
            let scale = r.min + eps;
            let mut d_min = 0.0;
            for j in 0..nu {
                let g_wbar = if won.contains(&j) { g_m } else { 0.0 };
                let g_w = (g_wbar - s) / r.z;
                let g_r = -r.w[j] / h * g_w;
                out[j] = g_r / scale;
                d_min -= g_r * r.d[j] / (scale * scale);
            }
            out[r.argmin] += d_min;
            // S = 1 - d
            out.iter_mut().for_each(|v| *v = -*v);
            out
        })
        .collect();

    let dim = p * p * 3;
    let patch_grads: Vec<Vec<f64>> = (0..nu)
        .into_par_iter()
        .map(|j| {
            let mut g_hat = vec![0.0; dim];
            for (i, v) in vs.iter().enumerate() {
                let s = ds[i][j];
                if s != 0.0 {
                    for k in 0..dim {
                        g_hat[k] += s * v[k];
                    }
                }
            }
            let (u_hat, n) = &us[j];
            let proj = dot(&g_hat, u_hat);
            g_hat
                .iter()
                .zip(u_hat)
                .map(|(g, u)| (g - u * proj) / n)
                .collect()
        })
        .collect();

    let mut grad = vec![0.0; x.data.len()];
    for (&(x0, y0), g) in origins.iter().zip(&patch_grads) {
        for dy in 0..p {
            let start = ((y0 + dy) * x.width + x0) * 3;
            for k in 0..p * 3 {
                grad[start + k] += g[dy * p * 3 + k];
            }
        }
    }
    Ok((loss, Some(grad)))
}

fn idmrf_impl(
    x: &Raster,
    y: &Raster,
    cfg: &MrfConfig,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    cfg.validate()?;
    if x.width != y.width || x.height != y.height {
        return Err(Error::Contract("mrf inputs differ in size".into()));
    }
    let (l1, g1) = match_scale(x, y, cfg.patch_sizes[0], cfg, want_grad)?;
    let (xs, ys) = (x.downsample(), y.downsample());
    let (l2, g2) = match_scale(&xs, &ys, cfg.patch_sizes[1], cfg, want_grad)?;
    let grad = match (g1, g2) {
        (Some(mut g1), Some(g2)) => {
            let up = Raster::upsample_grad(&g2, xs.width, xs.height, x.width, x.height);
            g1.iter_mut().zip(&up).for_each(|(a, b)| *a += b);
            Some(g1)
        }
        _ => None,
    };
    Ok((l1 + l2, grad))
}

/// Two-scale ID-MRF loss of generated `x` against target `y`.
pub fn idmrf_loss(x: &HdrImage, y: &HdrImage, cfg: &MrfConfig) -> Result<f64> {
    check_dims(x, y)?;
    idmrf_loss_raster(&Raster::from_hdr(x), &Raster::from_hdr(y), cfg)
}

pub fn idmrf_loss_raster(x: &Raster, y: &Raster, cfg: &MrfConfig) -> Result<f64> {
    Ok(idmrf_impl(x, y, cfg, false)?.0)
}

/// Loss and its gradient with respect to every value of `x`.
pub fn idmrf_grad(x: &Raster, y: &Raster, cfg: &MrfConfig) -> Result<(f64, Vec<f64>)> {
    let (l, g) = idmrf_impl(x, y, cfg, true)?;
    Ok((l, g.expect("gradient requested")))
}

//! Image quality metrics: PSNR and windowed SSIM.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5), `K1 = 0.01`, `K2 = 0.03`
//! and a dynamic range of 1. Only window positions fully inside the image are
//! evaluated; the result is the mean over channels and positions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_C1: f64 = SSIM_K1 * SSIM_K1;
pub const SSIM_C2: f64 = SSIM_K2 * SSIM_K2;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Argument(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    if a.data.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data.len() as f64)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Normalized 1D Gaussian window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Single-channel plane stored row-major.
struct Plane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Plane {
    fn channel(img: &Image, c: usize) -> Self {
        Self {
            width: img.width,
            height: img.height,
            data: img.data.iter().skip(c).step_by(3).copied().collect(),
        }
    }

    fn map2(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        }
    }
}

/// Valid-mode separable filtering: output is `(w - 10) x (h - 10)`.
fn filter_valid(p: &Plane, win: &[f64; SSIM_WINDOW]) -> Plane {
    let ow = p.width + 1 - SSIM_WINDOW;
    let oh = p.height + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; ow * p.height];
    for y in 0..p.height {
        let src = &p.data[y * p.width..(y + 1) * p.width];
        for x in 0..ow {
            rows[y * ow + x] = win.iter().zip(&src[x..x + SSIM_WINDOW]).map(|(w, v)| w * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (k, w) in win.iter().enumerate() {
                s += w * rows[(y + k) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    Plane {
        width: ow,
        height: oh,
        data: out,
    }
}

/// Adjoint of [`filter_valid`]: scatters a `(w - 10) x (h - 10)` plane back
/// to `w x h`.
fn filter_adjoint(p: &Plane, win: &[f64; SSIM_WINDOW], width: usize, height: usize) -> Plane {
    let ow = p.width;
    let mut cols = vec![0.0; ow * height];
    for y in 0..p.height {
        for x in 0..ow {
            let v = p.data[y * ow + x];
            for (k, w) in win.iter().enumerate() {
                cols[(y + k) * ow + x] += w * v;
            }
        }
    }
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..ow {
            let v = cols[y * ow + x];
            for (k, w) in win.iter().enumerate() {
                out[y * width + x + k] += w * v;
            }
        }
    }
    Plane {
        width,
        height,
        data: out,
    }
}

fn check_ssim_size(a: &Image, b: &Image) -> Result<()> {
    check_shapes(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::Argument(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    Ok(())
}

struct SsimTerms {
    mu_a: Plane,
    mu_b: Plane,
    var_a: Plane,
    var_b: Plane,
    cov: Plane,
}

fn ssim_terms(a: &Plane, b: &Plane, win: &[f64; SSIM_WINDOW]) -> SsimTerms {
    let mu_a = filter_valid(a, win);
    let mu_b = filter_valid(b, win);
    let e_aa = filter_valid(&a.map2(a, |x, y| x * y), win);
    let e_bb = filter_valid(&b.map2(b, |x, y| x * y), win);
    let e_ab = filter_valid(&a.map2(b, |x, y| x * y), win);
    let var_a = e_aa.map2(&mu_a, |e, m| e - m * m);
    let var_b = e_bb.map2(&mu_b, |e, m| e - m * m);
    let cov = Plane {
        width: e_ab.width,
        height: e_ab.height,
        data: (0..e_ab.data.len())
            .map(|i| e_ab.data[i] - mu_a.data[i] * mu_b.data[i])
            .collect(),
    };
    SsimTerms {
        mu_a,
        mu_b,
        var_a,
        var_b,
        cov,
    }
}

#[inline]
fn ssim_at(ma: f64, mb: f64, va: f64, vb: f64, cab: f64) -> f64 {
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2))
        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// Mean SSIM over channels and valid window positions.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_ssim_size(a, b)?;
    if a.data == b.data {
        return Ok(1.0);
    }
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let t = ssim_terms(&Plane::channel(a, c), &Plane::channel(b, c), &win);
        for i in 0..t.mu_a.data.len() {
            total += ssim_at(t.mu_a.data[i], t.mu_b.data[i], t.var_a.data[i], t.var_b.data[i], t.cov.data[i]);
        }
        count += t.mu_a.data.len();
    }
    Ok(total / count as f64)
}

/// Mean SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    check_ssim_size(a, b)?;
    let win = gaussian_window();
    let (w, h) = (a.width, a.height);
    let mut grad = Image::new(w, h);
    let mut total = 0.0;
    let n = 3 * (w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW);
    let inv_n = 1.0 / n as f64;
    for c in 0..3 {
        let pa = Plane::channel(a, c);
        let pb = Plane::channel(b, c);
        let t = ssim_terms(&pa, &pb, &win);
        let m = t.mu_a.data.len();
        // S = L * Cs / (D1 * D2); partials w.r.t. mu_a, var_a, cov
        let mut d_mu = vec![0.0; m];
        let mut d_var = vec![0.0; m];
        let mut d_cov = vec![0.0; m];
        for i in 0..m {
            let (ma, mb) = (t.mu_a.data[i], t.mu_b.data[i]);
            let (va, vb, cab) = (t.var_a.data[i], t.var_b.data[i], t.cov.data[i]);
            let l = 2.0 * ma * mb + SSIM_C1;
            let cs = 2.0 * cab + SSIM_C2;
            let d1 = ma * ma + mb * mb + SSIM_C1;
            let d2 = va + vb + SSIM_C2;
            let s = l * cs / (d1 * d2);
            total += s;
            let ds_dmu = 2.0 * mb * cs / (d1 * d2) - s * 2.0 * ma / d1;
            let ds_dvar = -s / d2;
            let ds_dcov = 2.0 * l / (d1 * d2);
            // mu_a, var_a = E[a^2] - mu_a^2, cov = E[ab] - mu_a mu_b, all linear in
            // filtered planes; fold the mu terms into one plane
            d_mu[i] = inv_n * (ds_dmu - 2.0 * ma * ds_dvar - mb * ds_dcov);
            d_var[i] = inv_n * ds_dvar;
            d_cov[i] = inv_n * ds_dcov;
        }
        let shape = |data: Vec<f64>| Plane {
            width: t.mu_a.width,
            height: t.mu_a.height,
            data,
        };
        let g_mu = filter_adjoint(&shape(d_mu), &win, w, h);
        let g_var = filter_adjoint(&shape(d_var), &win, w, h);
        let g_cov = filter_adjoint(&shape(d_cov), &win, w, h);
        for i in 0..w * h {
            grad.data[i * 3 + c] = g_mu.data[i] + 2.0 * pa.data[i] * g_var.data[i] + pb.data[i] * g_cov.data[i];
        }
    }
    Ok((total * inv_n, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    /// Scores named image pairs `(name, rendered, reference)`.
    pub fn evaluate<'a>(pairs: impl IntoIterator<Item = (String, &'a Image, &'a Image)>) -> Result<Self> {
        let mut images = Vec::new();
        for (name, a, b) in pairs {
            images.push(ImageScore {
                name,
                psnr: psnr(a, b)?,
                ssim: ssim(a, b)?,
            });
        }
        if images.is_empty() {
            return Err(Error::Argument("no images to evaluate".into()));
        }
        let n = images.len() as f64;
        Ok(Self {
            mean_psnr: images.iter().map(|s| s.psnr).sum::<f64>() / n,
            mean_ssim: images.iter().map(|s| s.ssim).sum::<f64>() / n,
            images,
        })
    }
}

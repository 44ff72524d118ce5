//! Tile-based Gaussian rasterizer with an analytic backward pass.
//!
//! Per pixel, Gaussians are composited front to back in a global order keyed
//! on `(depth, source index)`. Tiles only decide which Gaussians a pixel looks
//! at; a Gaussian is binned into every tile where its opacity could reach the
//! skip threshold, so the tiled result equals the naive per-pixel loop bit for
//! bit.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{
    covariance, effective_scale, normalize_quaternion, quaternion_norm, rotation_matrix, sigmoid,
    GaussianLevelSet,
};

pub const TILE_SIZE: usize = 16;
/// Upper clamp on a single Gaussian's alpha.
pub const ALPHA_MAX: f64 = 0.99;
/// Contributions below this alpha are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Compositing stops once transmittance drops below this value.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Added to the diagonal of every projected covariance, in px².
pub const DILATION: f64 = 0.3;

/// Render-time attributes of one Gaussian, with activations applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat {
    pub position: [f64; 3],
    pub scale: [f64; 3],
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Anything the rasterizer can draw.
pub trait SplatSource: Sync {
    fn splat_count(&self) -> usize;
    fn splat(&self, index: usize) -> Splat;
}

impl SplatSource for GaussianLevelSet {
    fn splat_count(&self) -> usize {
        self.len()
    }

    fn splat(&self, i: usize) -> Splat {
        Splat {
            position: self.positions[i],
            scale: effective_scale(self.scale_params[i], self.s_min),
            rotation: self.rotations[i],
            opacity: sigmoid(self.opacity_params[i]),
            color: self.colors[i],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    /// Projected mean in pixels.
    pub mu2d: [f64; 2],
    /// Projected covariance `(xx, xy, yy)` in px², dilation included.
    pub cov2d: [f64; 3],
    /// Inverse of `cov2d`, `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    /// Camera-frame z.
    pub depth: f64,
    pub source: usize,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Half-extent in pixels beyond which alpha is guaranteed below
    /// [`ALPHA_MIN`]; `None` when the Gaussian can never reach it.
    pub extent: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub image: Image,
    /// Per-pixel `1 - T`.
    pub alpha: Vec<f64>,
    /// Per-pixel number of blended Gaussians.
    pub counts: Vec<u32>,
}

fn project_splat(s: &Splat, source: usize, cam: &Camera, w: &Matrix3<f64>) -> Option<ProjectedGaussian> {
    let pc = w * Vector3::from(s.position) + Vector3::from(cam.translation);
    if !(pc.z > cam.near) {
        return None;
    }
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let j = projection_jacobian(cam, &pc);
    let t = j * w;
    let sigma = covariance(s.scale, s.rotation);
    let cov = t * sigma * t.transpose();
    let xx = cov[(0, 0)] + DILATION;
    let xy = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    let yy = cov[(1, 1)] + DILATION;
    let det = xx * yy - xy * xy;
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = [yy / det, -xy / det, xx / det];
    let extent = if s.opacity >= ALPHA_MIN {
        let c = 2.0 * (s.opacity / ALPHA_MIN).ln().max(0.0);
        Some([(c * xx).sqrt() + 1.0, (c * yy).sqrt() + 1.0])
    } else {
        None
    };
    Some(ProjectedGaussian {
        mu2d: [cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy],
        cov2d: [xx, xy, yy],
        conic,
        depth: z,
        source,
        opacity: s.opacity,
        color: s.color,
        extent,
    })
}

/// Jacobian of the pinhole projection at a camera-frame point.
pub fn projection_jacobian(cam: &Camera, pc: &Vector3<f64>) -> Matrix2x3<f64> {
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let iz = 1.0 / z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * y * iz * iz,
    )
}

/// Projects every Gaussian in front of the near plane, in source order.
pub fn project<S: SplatSource + ?Sized>(source: &S, cam: &Camera) -> Vec<ProjectedGaussian> {
    let w = cam.rotation_matrix();
    (0..source.splat_count())
        .into_par_iter()
        .filter_map(|i| project_splat(&source.splat(i), i, cam, &w))
        .collect()
}

/// Canonical compositing order: ascending depth, ties by source index.
fn depth_order(projected: &mut [ProjectedGaussian]) {
    projected.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source.cmp(&b.source)));
}

/// Alpha of `g` at pixel `(px, py)` as `(alpha, gaussian value, clamped)`,
/// or `None` when below [`ALPHA_MIN`].
#[inline]
fn alpha_at(g: &ProjectedGaussian, px: f64, py: f64) -> Option<(f64, f64, bool)> {
    let dx = px - g.mu2d[0];
    let dy = py - g.mu2d[1];
    let [a, b, c] = g.conic;
    let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
    if power > 0.0 {
        return None;
    }
    let gval = power.exp();
    let raw = g.opacity * gval;
    let clamped = raw > ALPHA_MAX;
    let alpha = if clamped { ALPHA_MAX } else { raw };
    if alpha < ALPHA_MIN {
        return None;
    }
    Some((alpha, gval, clamped))
}

#[derive(Debug, Clone, Copy)]
struct PixelResult {
    rgb: [f64; 3],
    transmittance: f64,
    count: u32,
}

#[inline]
fn blend_pixel<'a>(
    px: f64,
    py: f64,
    candidates: impl Iterator<Item = &'a ProjectedGaussian>,
    background: [f64; 3],
) -> PixelResult {
    let mut t = 1.0;
    let mut acc = [0.0; 3];
    let mut count = 0;
    for g in candidates {
        let Some((alpha, _, _)) = alpha_at(g, px, py) else {
            continue;
        };
        let w = alpha * t;
        for k in 0..3 {
            acc[k] += g.color[k] * w;
        }
        t *= 1.0 - alpha;
        count += 1;
        if t < TRANSMITTANCE_MIN {
            break;
        }
    }
    PixelResult {
        rgb: [
            acc[0] + t * background[0],
            acc[1] + t * background[1],
            acc[2] + t * background[2],
        ],
        transmittance: t,
        count,
    }
}

struct TileGrid {
    tiles_x: usize,
    tiles_y: usize,
    /// Indices into the depth-ordered projected list, per tile, ascending.
    bins: Vec<Vec<u32>>,
}

fn bin_tiles(ordered: &[ProjectedGaussian], width: usize, height: usize) -> TileGrid {
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    let max_x = (width - 1) as f64;
    let max_y = (height - 1) as f64;
    for (k, g) in ordered.iter().enumerate() {
        let Some([ex, ey]) = g.extent else { continue };
        let (lo_x, hi_x) = (g.mu2d[0] - ex, g.mu2d[0] + ex);
        let (lo_y, hi_y) = (g.mu2d[1] - ey, g.mu2d[1] + ey);
        if !(hi_x >= 0.0 && lo_x <= max_x && hi_y >= 0.0 && lo_y <= max_y) {
            continue;
        }
        let tx0 = (lo_x.max(0.0) as usize) / TILE_SIZE;
        let tx1 = (hi_x.min(max_x) as usize) / TILE_SIZE;
        let ty0 = (lo_y.max(0.0) as usize) / TILE_SIZE;
        let ty1 = (hi_y.min(max_y) as usize) / TILE_SIZE;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    TileGrid {
        tiles_x,
        tiles_y,
        bins,
    }
}

fn tile_pixels(tile: usize, tiles_x: usize, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
    let tx = tile % tiles_x;
    let ty = tile / tiles_x;
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    let x1 = (x0 + TILE_SIZE).min(width);
    let y1 = (y0 + TILE_SIZE).min(height);
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

fn assemble(width: usize, height: usize, pixels: impl Iterator<Item = ((usize, usize), PixelResult)>) -> RenderOutput {
    let mut image = Image::new(width, height);
    let mut alpha = vec![0.0; width * height];
    let mut counts = vec![0; width * height];
    for ((x, y), p) in pixels {
        image.set_pixel(x, y, p.rgb);
        alpha[y * width + x] = 1.0 - p.transmittance;
        counts[y * width + x] = p.count;
    }
    RenderOutput {
        image,
        alpha,
        counts,
    }
}

/// Renders with 16x16 tiles in parallel.
pub fn render<S: SplatSource + ?Sized>(source: &S, cam: &Camera, background: [f64; 3]) -> RenderOutput {
    let (width, height) = (cam.width as usize, cam.height as usize);
    let mut projected = project(source, cam);
    depth_order(&mut projected);
    let grid = bin_tiles(&projected, width, height);
    let tiles: Vec<Vec<((usize, usize), PixelResult)>> = (0..grid.tiles_x * grid.tiles_y)
        .into_par_iter()
        .map(|tile| {
            let bin = &grid.bins[tile];
            tile_pixels(tile, grid.tiles_x, width, height)
                .map(|(x, y)| {
                    let candidates = bin.iter().map(|&k| &projected[k as usize]);
                    ((x, y), blend_pixel(x as f64, y as f64, candidates, background))
                })
                .collect()
        })
        .collect();
    assemble(width, height, tiles.into_iter().flatten())
}

/// Reference renderer: every pixel walks the full depth-ordered list.
pub fn render_oracle<S: SplatSource + ?Sized>(source: &S, cam: &Camera, background: [f64; 3]) -> RenderOutput {
    let (width, height) = (cam.width as usize, cam.height as usize);
    let mut projected = project(source, cam);
    depth_order(&mut projected);
    let pixels = (0..height).flat_map(|y| (0..width).map(move |x| (x, y)));
    let projected = &projected;
    assemble(
        width,
        height,
        pixels.map(|(x, y)| ((x, y), blend_pixel(x as f64, y as f64, projected.iter(), background))),
    )
}

/// Gradients of `<upstream, rendered image>` with respect to every learnable
/// attribute of a level set.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub positions: Vec<[f64; 3]>,
    pub scale_params: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub opacity_params: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    /// Gradient with respect to the projected mean, in pixels.
    pub mean2d: Vec<[f64; 2]>,
    /// Whether the Gaussian touched at least one pixel.
    pub visible: Vec<bool>,
}

impl Gradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![[0.0; 3]; n],
            scale_params: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            opacity_params: vec![0.0; n],
            colors: vec![[0.0; 3]; n],
            mean2d: vec![[0.0; 2]; n],
            visible: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.positions.iter().flatten().all(|v| v.is_finite())
            && self.scale_params.iter().flatten().all(|v| v.is_finite())
            && self.rotations.iter().flatten().all(|v| v.is_finite())
            && self.opacity_params.iter().all(|v| v.is_finite())
            && self.colors.iter().flatten().all(|v| v.is_finite())
    }
}

/// Screen-space gradient accumulated per projected Gaussian.
#[derive(Debug, Clone, Copy, Default)]
struct ScreenGrad {
    /// dL/dA for the conic as a general 2x2 matrix, row-major.
    conic: [f64; 4],
    mu2d: [f64; 2],
    opacity: f64,
    color: [f64; 3],
    touched: bool,
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for k in 0..4 {
            self.conic[k] += o.conic[k];
        }
        self.mu2d[0] += o.mu2d[0];
        self.mu2d[1] += o.mu2d[1];
        self.opacity += o.opacity;
        for k in 0..3 {
            self.color[k] += o.color[k];
        }
        self.touched |= o.touched;
    }
}

struct Contribution {
    slot: usize,
    alpha: f64,
    gval: f64,
    clamped: bool,
    transmittance: f64,
}

/// Backward pass of [`render`] for a level set.
///
/// Per-pixel transmittance is recomputed front to back; tile partial sums are
/// reduced in tile order so the result does not depend on scheduling.
pub fn render_backward(
    set: &GaussianLevelSet,
    cam: &Camera,
    background: [f64; 3],
    upstream: &Image,
) -> Result<Gradients> {
    set.check_consistent()?;
    let (width, height) = (cam.width as usize, cam.height as usize);
    if upstream.width != width || upstream.height != height || upstream.data.len() != width * height * 3 {
        return Err(Error::Contract(format!(
            "upstream gradient is {}x{}, camera renders {width}x{height}",
            upstream.width, upstream.height
        )));
    }
    let mut projected = project(set, cam);
    depth_order(&mut projected);
    let grid = bin_tiles(&projected, width, height);

    let partials: Vec<Vec<ScreenGrad>> = (0..grid.tiles_x * grid.tiles_y)
        .into_par_iter()
        .map(|tile| {
            let bin = &grid.bins[tile];
            let mut acc = vec![ScreenGrad::default(); bin.len()];
            let mut contribs: Vec<Contribution> = Vec::new();
            for (x, y) in tile_pixels(tile, grid.tiles_x, width, height) {
                let (px, py) = (x as f64, y as f64);
                let g_up = upstream.pixel(x, y);
                contribs.clear();
                let mut t = 1.0;
                for (slot, &k) in bin.iter().enumerate() {
                    let g = &projected[k as usize];
                    let Some((alpha, gval, clamped)) = alpha_at(g, px, py) else {
                        continue;
                    };
                    contribs.push(Contribution {
                        slot,
                        alpha,
                        gval,
                        clamped,
                        transmittance: t,
                    });
                    t *= 1.0 - alpha;
                    if t < TRANSMITTANCE_MIN {
                        break;
                    }
                }
                // everything behind the current contribution, as seen by the loss
                let mut behind = t * dot3(g_up, background);
                for c in contribs.iter().rev() {
                    let g = &projected[bin[c.slot] as usize];
                    let a = &mut acc[c.slot];
                    a.touched = true;
                    let w = c.alpha * c.transmittance;
                    for k in 0..3 {
                        a.color[k] += g_up[k] * w;
                    }
                    let gc = dot3(g_up, g.color);
                    let d_alpha = c.transmittance * gc - behind / (1.0 - c.alpha);
                    behind += gc * w;
                    if c.clamped {
                        continue;
                    }
                    a.opacity += d_alpha * c.gval;
                    let d_power = d_alpha * c.alpha;
                    let dx = px - g.mu2d[0];
                    let dy = py - g.mu2d[1];
                    a.conic[0] += -0.5 * d_power * dx * dx;
                    a.conic[1] += -0.5 * d_power * dx * dy;
                    a.conic[2] += -0.5 * d_power * dx * dy;
                    a.conic[3] += -0.5 * d_power * dy * dy;
                    let [ca, cb, cc] = g.conic;
                    a.mu2d[0] += d_power * (ca * dx + cb * dy);
                    a.mu2d[1] += d_power * (cb * dx + cc * dy);
                }
            }
            acc
        })
        .collect();

    let mut screen = vec![ScreenGrad::default(); projected.len()];
    for (tile, partial) in partials.iter().enumerate() {
        for (slot, g) in partial.iter().enumerate() {
            screen[grid.bins[tile][slot] as usize].add(g);
        }
    }

    let w = cam.rotation_matrix();
    let chained: Vec<(usize, GaussianGrad)> = projected
        .par_iter()
        .zip(screen.par_iter())
        .filter(|(_, s)| s.touched)
        .map(|(p, s)| (p.source, chain_to_parameters(set, p.source, cam, &w, p, s)))
        .collect();

    let mut out = Gradients::zeros(set.len());
    for (i, g) in chained {
        out.positions[i] = g.position;
        out.scale_params[i] = g.scale_param;
        out.rotations[i] = g.rotation;
        out.opacity_params[i] = g.opacity_param;
        out.colors[i] = g.color;
        out.mean2d[i] = g.mean2d;
        out.visible[i] = true;
    }
    Ok(out)
}

#[inline]
fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

struct GaussianGrad {
    position: [f64; 3],
    scale_param: [f64; 3],
    rotation: [f64; 4],
    opacity_param: f64,
    color: [f64; 3],
    mean2d: [f64; 2],
}

/// Chains screen-space gradients through projection, covariance assembly and
/// the parameter activations.
fn chain_to_parameters(
    set: &GaussianLevelSet,
    i: usize,
    cam: &Camera,
    w: &Matrix3<f64>,
    p: &ProjectedGaussian,
    s: &ScreenGrad,
) -> GaussianGrad {
    let mu = Vector3::from(set.positions[i]);
    let pc = w * mu + Vector3::from(cam.translation);
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let j = projection_jacobian(cam, &pc);
    let t = j * w;

    let q_raw = set.rotations[i];
    let q_norm = quaternion_norm(q_raw);
    let q = normalize_quaternion(q_raw);
    let r = rotation_matrix(q);
    let scale = effective_scale(set.scale_params[i], set.s_min);
    let m = r * Matrix3::from_diagonal(&Vector3::from(scale));
    let sigma = m * m.transpose();

    // conic -> projected covariance
    let conic = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
    let d_conic = Matrix2::new(s.conic[0], s.conic[1], s.conic[2], s.conic[3]);
    let d_cov2d = -(conic * d_conic * conic);

    // projected covariance -> world covariance and projection Jacobian
    let d_sigma = t.transpose() * d_cov2d * t;
    let d_t = 2.0 * d_cov2d * t * sigma;
    let d_j = d_t * w.transpose();

    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let (fx, fy) = (cam.fx, cam.fy);
    let mut d_pc = Vector3::new(
        s.mu2d[0] * fx * iz,
        s.mu2d[1] * fy * iz,
        -s.mu2d[0] * fx * x * iz2 - s.mu2d[1] * fy * y * iz2,
    );
    d_pc.x += d_j[(0, 2)] * (-fx * iz2);
    d_pc.y += d_j[(1, 2)] * (-fy * iz2);
    d_pc.z += d_j[(0, 0)] * (-fx * iz2)
        + d_j[(0, 2)] * (2.0 * fx * x * iz3)
        + d_j[(1, 1)] * (-fy * iz2)
        + d_j[(1, 2)] * (2.0 * fy * y * iz3);
    let d_mu = w.transpose() * d_pc;

    // world covariance -> scale and rotation
    let d_m = 2.0 * d_sigma * m;
    let mut d_scale_param = [0.0; 3];
    for k in 0..3 {
        let d_s = d_m[(0, k)] * r[(0, k)] + d_m[(1, k)] * r[(1, k)] + d_m[(2, k)] * r[(2, k)];
        d_scale_param[k] = d_s * set.scale_params[i][k].exp();
    }
    let mut d_r = d_m;
    for k in 0..3 {
        for row in 0..3 {
            d_r[(row, k)] = d_m[(row, k)] * scale[k];
        }
    }
    let d_qn = rotation_grad(q, &d_r);
    let proj = q[0] * d_qn[0] + q[1] * d_qn[1] + q[2] * d_qn[2] + q[3] * d_qn[3];
    let d_q = [
        (d_qn[0] - q[0] * proj) / q_norm,
        (d_qn[1] - q[1] * proj) / q_norm,
        (d_qn[2] - q[2] * proj) / q_norm,
        (d_qn[3] - q[3] * proj) / q_norm,
    ];

    let o = p.opacity;
    GaussianGrad {
        position: [d_mu.x, d_mu.y, d_mu.z],
        scale_param: d_scale_param,
        rotation: d_q,
        opacity_param: s.opacity * o * (1.0 - o),
        color: s.color,
        mean2d: s.mu2d,
    }
}

/// dL/dq for `R(q)` given dL/dR, `q` unit `wxyz`.
fn rotation_grad(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let g = |r: usize, c: usize| g[(r, c)];
    [
        2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1)),
        2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2)),
        2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2)),
        2.0 * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1)),
    ]
}

/// Trace of the projected covariance, without dilation.
pub fn footprint_trace(splat: &Splat, cam: &Camera) -> Option<f64> {
    let w = cam.rotation_matrix();
    project_splat(splat, 0, cam, &w).map(|p| p.cov2d[0] + p.cov2d[2] - 2.0 * DILATION)
}

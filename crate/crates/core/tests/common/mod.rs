//! Test-only oracles shared by the integration suites.
//!
//! Nothing here calls into the backward pass or the tiled binning logic that
//! the suites check: gradients come from central differences of the forward
//! renderer, neighbour distances from an all-pairs scan.

#![allow(dead_code)]

use flod_core::camera::Camera;
use flod_core::image::Image;
use flod_core::model::{logit, Gaussian, GaussianLevelSet};
use flod_core::raster::render;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;

/// Objective whose gradient the backward pass returns.
pub fn objective(set: &GaussianLevelSet, cam: &Camera, bg: [f64; 3], upstream: &Image) -> f64 {
    let out = render(set, cam, bg);
    out.image.data.iter().zip(&upstream.data).map(|(a, b)| a * b).sum()
}

/// Which attribute a finite difference perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    Position(usize),
    Scale(usize),
    Rotation(usize),
    Opacity,
    Color(usize),
}

impl Param {
    pub fn all() -> Vec<Param> {
        let mut v = Vec::new();
        v.extend((0..3).map(Param::Position));
        v.extend((0..3).map(Param::Scale));
        v.extend((0..4).map(Param::Rotation));
        v.push(Param::Opacity);
        v.extend((0..3).map(Param::Color));
        v
    }

    pub fn group(&self) -> &'static str {
        match self {
            Param::Position(_) => "position",
            Param::Scale(_) => "scale",
            Param::Rotation(_) => "rotation",
            Param::Opacity => "opacity",
            Param::Color(_) => "color",
        }
    }

    fn slot<'a>(&self, set: &'a mut GaussianLevelSet, i: usize) -> &'a mut f64 {
        match *self {
            Param::Position(k) => &mut set.positions[i][k],
            Param::Scale(k) => &mut set.scale_params[i][k],
            Param::Rotation(k) => &mut set.rotations[i][k],
            Param::Opacity => &mut set.opacity_params[i],
            Param::Color(k) => &mut set.colors[i][k],
        }
    }

    pub fn read(&self, g: &flod_core::raster::Gradients, i: usize) -> f64 {
        match *self {
            Param::Position(k) => g.positions[i][k],
            Param::Scale(k) => g.scale_params[i][k],
            Param::Rotation(k) => g.rotations[i][k],
            Param::Opacity => g.opacity_params[i],
            Param::Color(k) => g.colors[i][k],
        }
    }
}

/// Central difference of [`objective`] for one parameter of Gaussian `i`.
pub fn central_difference(
    set: &GaussianLevelSet,
    i: usize,
    param: Param,
    cam: &Camera,
    bg: [f64; 3],
    upstream: &Image,
    h: f64,
) -> f64 {
    let mut plus = set.clone();
    *param.slot(&mut plus, i) += h;
    let mut minus = set.clone();
    *param.slot(&mut minus, i) -= h;
    (objective(&plus, cam, bg, upstream) - objective(&minus, cam, bg, upstream)) / (2.0 * h)
}

pub fn random_quaternion(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
        if n > 0.2 && n < 1.0 {
            return q.map(|v| v / n);
        }
    }
}

/// A 16x16 scene whose Gaussians cover the whole frame with opacity well
/// above the skip threshold and well below the clamp, so the rendered image
/// is a smooth function of every parameter.
pub fn smooth_scene(seed: u64, n: usize) -> (GaussianLevelSet, Camera, [f64; 3], Image) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = Camera::look_at([0.3, -3.0, 0.2], [0.0; 3], [0.0, 0.0, 1.0], 16.0, 16, 16).unwrap();
    let s_min = if seed % 2 == 0 { 0.0 } else { 0.5 };
    let mut set = GaussianLevelSet::empty(1, s_min);
    for _ in 0..n {
        let scale: [f64; 3] = std::array::from_fn(|_| rng.random_range(2.4f64..3.6));
        set.push(Gaussian {
            position: std::array::from_fn(|_| rng.random_range(-0.5..0.5)),
            scale_param: scale.map(|s| (s - s_min).ln()),
            rotation: random_quaternion(&mut rng),
            opacity_param: logit(rng.random_range(0.3..0.7)),
            color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
        });
    }
    let bg = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let upstream = Image::from_data(16, 16, (0..16 * 16 * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    (set, cam, bg, upstream)
}

/// Relative error with a floor tied to the gradient scale of the group.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst relative error per parameter group over one scene.
pub fn gradient_check(seed: u64, n: usize) -> Vec<(&'static str, f64)> {
    let (set, cam, bg, upstream) = smooth_scene(seed, n);
    let grads = flod_core::raster::render_backward(&set, &cam, bg, &upstream).unwrap();
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for param in Param::all() {
        let numeric: Vec<f64> = (0..set.len())
            .map(|i| central_difference(&set, i, param, &cam, bg, &upstream, FD_STEP))
            .collect();
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = 1e-6 * scale.max(1e-12);
        let err = (0..set.len())
            .map(|i| relative_error(param.read(&grads, i), numeric[i], floor))
            .fold(0.0, f64::max);
        match worst.iter_mut().find(|(g, _)| *g == param.group()) {
            Some((_, e)) => *e = e.max(err),
            None => worst.push((param.group(), err)),
        }
    }
    worst
}

/// Tolerance of a parameter group in the gradient check.
pub fn gradient_tolerance(group: &str) -> f64 {
    match group {
        "color" | "opacity" => 1e-5,
        _ => 1e-3,
    }
}

/// Random Gaussian set for renderer equivalence checks: mixed sizes, some
/// behind the camera, some off-screen, some opaque enough to hit the clamp.
pub fn random_scene(seed: u64, n: usize) -> (GaussianLevelSet, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rng.random_range(17..70);
    let h = rng.random_range(17..70);
    let cam = Camera::look_at([0.0, -3.0, 0.5], [0.0; 3], [0.0, 0.0, 1.0], rng.random_range(20.0..60.0), w, h).unwrap();
    let mut set = GaussianLevelSet::empty(1, 0.0);
    for _ in 0..n {
        let base: f64 = rng.random_range(-4.0f64..-0.5);
        set.push(Gaussian {
            position: [rng.random_range(-2.0..2.0), rng.random_range(-4.0..3.0), rng.random_range(-1.5..1.5)],
            scale_param: std::array::from_fn(|_| base + rng.random_range(-0.7..0.7)),
            rotation: random_quaternion(&mut rng),
            opacity_param: rng.random_range(-6.0..6.0),
            color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
        });
    }
    // exact depth ties exercise the index tie-break
    if n >= 2 {
        set.positions[1] = set.positions[0];
    }
    (set, cam)
}

/// Mean distance to the `k` nearest other points by exhaustive search.
pub fn brute_force_mean_knn(points: &[[f64; 3]], k: usize) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                .collect();
            d.sort_by(f64::total_cmp);
            let k = k.min(d.len());
            d[..k].iter().sum::<f64>() / k as f64
        })
        .collect()
}

/// A multi-level model of random Gaussians spread over a wide box, every
/// level satisfying its own constraint. No training involved.
pub fn layered_model(seed: u64, counts: &[usize], tau: f64, rho: f64, half_width: f64) -> flod_core::MultiLevelModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l_max = counts.len() as u32;
    let levels = counts
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let level = i as u32 + 1;
            let s_min = flod_core::model::scale_constraint(level, tau, rho, l_max).unwrap();
            let mut set = GaussianLevelSet::empty(level, s_min);
            for _ in 0..n {
                set.push(Gaussian {
                    position: std::array::from_fn(|_| rng.random_range(-half_width..half_width)),
                    scale_param: std::array::from_fn(|_| rng.random_range(-5.0..-2.0)),
                    rotation: random_quaternion(&mut rng),
                    opacity_param: rng.random_range(-2.0..2.0),
                    color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
                });
            }
            set
        })
        .collect();
    flod_core::MultiLevelModel::new(levels, tau, rho, l_max).unwrap()
}

/// Camera orbit around the origin, one camera per step.
pub fn orbit(n: usize, radius: f64, focal: f64, w: u32, h: u32) -> Vec<Camera> {
    (0..n)
        .map(|i| {
            let t = i as f64 / n as f64 * std::f64::consts::TAU;
            let eye = [radius * t.cos(), radius * t.sin(), 0.3 * radius];
            Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], focal, w, h).unwrap()
        })
        .collect()
}

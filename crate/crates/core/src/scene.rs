//! Training data and the synthetic scene generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::camera::{mean_center, Camera};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{logit, normalize_quaternion, Gaussian, GaussianLevelSet};
use crate::raster::render;

/// A posed photograph.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    pub image: Image,
}

impl View {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        if self.image.width != self.camera.width as usize || self.image.height != self.camera.height as usize {
            return Err(Error::Validation(format!(
                "view {}: image is {}x{} but camera is {}x{}",
                self.name, self.image.width, self.image.height, self.camera.width, self.camera.height
            )));
        }
        Ok(())
    }
}

/// Training and held-out views plus the sparse point cloud used to seed the
/// first level.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub train: Vec<View>,
    pub test: Vec<View>,
    pub points: Vec<[f64; 3]>,
    pub point_colors: Vec<[f64; 3]>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Validation("dataset has no training views".into()));
        }
        if self.points.len() != self.point_colors.len() {
            return Err(Error::Validation("point and color counts differ".into()));
        }
        for v in self.train.iter().chain(&self.test) {
            v.validate()?;
        }
        Ok(())
    }

    pub fn train_cameras(&self) -> Vec<Camera> {
        self.train.iter().map(|v| v.camera.clone()).collect()
    }

    /// Largest distance of a training camera center from their centroid.
    /// Falls back to 1 when all cameras coincide.
    pub fn extent(&self) -> f64 {
        let cams = self.train_cameras();
        let Some(c) = mean_center(&cams) else { return 1.0 };
        let r = cams
            .iter()
            .map(|cam| {
                let p = cam.center();
                ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt()
            })
            .fold(0.0, f64::max);
        if r > 0.0 {
            r
        } else {
            1.0
        }
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticParams {
    pub seed: u64,
    pub gaussians: usize,
    pub views: usize,
    pub resolution: u32,
}

pub const RING_RADIUS: f64 = 2.5;
pub const POINT_JITTER: f64 = 0.05;

/// Ground-truth set and the dataset rendered from it.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub ground_truth: GaussianLevelSet,
    pub dataset: Dataset,
}

/// Number of held-out views generated alongside `views` training views.
pub fn held_out_count(views: usize) -> usize {
    (views / 2).max(1)
}

fn ring_camera(angle: f64, res: u32) -> Result<Camera> {
    let eye = [
        RING_RADIUS * angle.cos(),
        RING_RADIUS * angle.sin(),
        0.5 * (2.0 * angle).sin(),
    ];
    Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], 0.9 * res as f64, res, res)
}

/// Random Gaussians inside the unit cube seen by a ring of cameras. Held-out
/// cameras sit halfway between consecutive training cameras.
pub fn generate(params: SyntheticParams) -> Result<SyntheticScene> {
    if params.views < 2 {
        return Err(Error::Argument(format!("need at least 2 views, got {}", params.views)));
    }
    if params.gaussians == 0 {
        return Err(Error::Argument("need at least one Gaussian".into()));
    }
    if params.resolution < 11 {
        return Err(Error::Argument("resolution must be at least 11 pixels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut gt = GaussianLevelSet::empty(1, 0.0);
    for _ in 0..params.gaussians {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        gt.push(Gaussian {
            position: std::array::from_fn(|_| rng.random_range(-0.5..0.5)),
            scale_param: std::array::from_fn(|_| rng.random_range(0.08f64..0.25).ln()),
            rotation: normalize_quaternion(q),
            opacity_param: logit(rng.random_range(0.6..0.95)),
            color: std::array::from_fn(|_| rng.random_range(0.1..1.0)),
        });
    }
    let bg = [0.0; 3];
    let n = params.views;
    let step = std::f64::consts::TAU / n as f64;
    let mut train = Vec::with_capacity(n);
    for k in 0..n {
        let camera = ring_camera(k as f64 * step, params.resolution)?;
        let image = render(&gt, &camera, bg).image;
        train.push(View { name: format!("train_{k:03}"), camera, image });
    }
    let mut test = Vec::new();
    for k in 0..held_out_count(n) {
        // spread the held-out views evenly over the ring gaps
        let gap = k * n / held_out_count(n);
        let camera = ring_camera((gap as f64 + 0.5) * step, params.resolution)?;
        let image = render(&gt, &camera, bg).image;
        test.push(View { name: format!("test_{k:03}"), camera, image });
    }
    let points = gt
        .positions
        .iter()
        .map(|p| p.map(|v| v + POINT_JITTER * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let point_colors = gt.colors.clone();
    Ok(SyntheticScene {
        ground_truth: gt,
        dataset: Dataset { train, test, points, point_colors },
    })
}

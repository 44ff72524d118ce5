//! Adam over the attribute arrays of one level set.

use crate::model::{normalize_quaternion, GaussianLevelSet};
use crate::raster::Gradients;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

/// First and second moments for one attribute, `D` values per Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<const D: usize> {
    pub m: Vec<[f64; D]>,
    pub v: Vec<[f64; D]>,
}

impl<const D: usize> Moments<D> {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![[0.0; D]; n],
            v: vec![[0.0; D]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Rebuilds the moments after the set was edited. `origin[j]` is the
    /// index the new Gaussian `j` was kept from, or `None` for a new one.
    pub fn remap(&mut self, origin: &[Option<usize>]) {
        let pick = |src: &[[f64; D]]| origin.iter().map(|o| o.map_or([0.0; D], |i| src[i])).collect();
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }

    fn step(&mut self, params: &mut [[f64; D]], grads: &[[f64; D]], lr: f64, bc1: f64, bc2: f64) {
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for k in 0..D {
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= lr * mh / (vh.sqrt() + EPSILON);
            }
        }
    }
}

/// Per-attribute learning rates for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRates {
    pub position: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub positions: Moments<3>,
    pub scales: Moments<3>,
    pub rotations: Moments<4>,
    pub opacities: Moments<1>,
    pub colors: Moments<3>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            step: 0,
            positions: Moments::zeros(n),
            scales: Moments::zeros(n),
            rotations: Moments::zeros(n),
            opacities: Moments::zeros(n),
            colors: Moments::zeros(n),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn remap(&mut self, origin: &[Option<usize>]) {
        self.positions.remap(origin);
        self.scales.remap(origin);
        self.rotations.remap(origin);
        self.opacities.remap(origin);
        self.colors.remap(origin);
    }

    /// Zeroes the opacity moments of every Gaussian.
    pub fn reset_opacity(&mut self) {
        self.opacities = Moments::zeros(self.len());
    }

    /// One Adam update. Rotations are renormalized and colors clamped to
    /// `[0, 1]` afterwards.
    pub fn apply(&mut self, set: &mut GaussianLevelSet, grads: &Gradients, rates: StepRates) {
        debug_assert_eq!(set.len(), self.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        self.positions.step(&mut set.positions, &grads.positions, rates.position, bc1, bc2);
        self.scales.step(&mut set.scale_params, &grads.scale_params, rates.scale, bc1, bc2);
        self.rotations.step(&mut set.rotations, &grads.rotations, rates.rotation, bc1, bc2);
        let mut opacity: Vec<[f64; 1]> = set.opacity_params.iter().map(|&v| [v]).collect();
        let g: Vec<[f64; 1]> = grads.opacity_params.iter().map(|&v| [v]).collect();
        self.opacities.step(&mut opacity, &g, rates.opacity, bc1, bc2);
        for (dst, [v]) in set.opacity_params.iter_mut().zip(opacity) {
            *dst = v;
        }
        self.colors.step(&mut set.colors, &grads.colors, rates.color, bc1, bc2);
        for q in &mut set.rotations {
            *q = normalize_quaternion(*q);
        }
        for c in &mut set.colors {
            for v in c.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }
}

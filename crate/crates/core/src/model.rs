//! Gaussian parameterization and the multi-level model.
//!
//! Every Gaussian stores a log-domain scale offset `s_opt`. The scale used for
//! rendering is `exp(s_opt) + s_min`, where `s_min` is fixed per level, so no
//! Gaussian of level `l` can ever be smaller than that level's constraint.

use nalgebra::Matrix3;

use crate::error::{Error, Result};

/// Floor applied to the argument of `ln` when re-expressing scales for the
/// next level.
pub const SCALE_CLAMP_FLOOR: f64 = 1e-12;

/// Tolerance on `|q| - 1` before a quaternion is reported as non-unit.
pub const QUATERNION_TOLERANCE: f64 = 1e-6;

/// Scale constraint of a level: `tau * rho^(1 - level)` below the top level and
/// zero at `l_max`.
pub fn scale_constraint(level: u32, tau: f64, rho: f64, l_max: u32) -> Result<f64> {
    if level < 1 || level > l_max {
        return Err(Error::Argument(format!(
            "level {level} outside [1, {l_max}]"
        )));
    }
    if !(tau > 0.0) || !(rho > 1.0) {
        return Err(Error::Argument(format!(
            "scale ladder needs tau > 0 and rho > 1 (got tau={tau}, rho={rho})"
        )));
    }
    if level == l_max {
        return Ok(0.0);
    }
    Ok(tau * rho.powi(1 - level as i32))
}

/// `exp(s_opt) + s_min`, componentwise.
#[inline]
pub fn effective_scale(s_opt: [f64; 3], s_min: f64) -> [f64; 3] {
    [
        s_opt[0].exp() + s_min,
        s_opt[1].exp() + s_min,
        s_opt[2].exp() + s_min,
    ]
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`] for `p` in `(0, 1)`.
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Unit-normalizes a `wxyz` quaternion. A zero quaternion maps to identity.
pub fn normalize_quaternion(q: [f64; 4]) -> [f64; 4] {
    let n = quaternion_norm(q);
    if n == 0.0 || !n.is_finite() {
        return [1.0, 0.0, 0.0, 0.0];
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

#[inline]
pub fn quaternion_norm(q: [f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Rotation matrix of a unit `wxyz` quaternion.
pub fn rotation_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// World-space covariance `R S S^T R^T`.
///
/// The quaternion is normalized before use; in debug builds a quaternion that
/// is off the unit sphere by more than [`QUATERNION_TOLERANCE`] is logged.
pub fn covariance(scale: [f64; 3], q: [f64; 4]) -> Matrix3<f64> {
    if cfg!(debug_assertions) && (quaternion_norm(q) - 1.0).abs() > QUATERNION_TOLERANCE {
        log::debug!("covariance: non-unit quaternion {q:?} normalized");
    }
    let r = rotation_matrix(normalize_quaternion(q));
    let m = r * Matrix3::from_diagonal(&nalgebra::Vector3::from(scale));
    m * m.transpose()
}

/// One level of Gaussians stored as parallel attribute arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLevelSet {
    pub positions: Vec<[f64; 3]>,
    pub scale_params: Vec<[f64; 3]>,
    /// Unit quaternions, `wxyz`.
    pub rotations: Vec<[f64; 4]>,
    pub opacity_params: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub s_min: f64,
    pub level: u32,
}

/// A single Gaussian, used when building or editing sets one entry at a time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub position: [f64; 3],
    pub scale_param: [f64; 3],
    pub rotation: [f64; 4],
    pub opacity_param: f64,
    pub color: [f64; 3],
}

impl GaussianLevelSet {
    pub fn empty(level: u32, s_min: f64) -> Self {
        Self {
            positions: Vec::new(),
            scale_params: Vec::new(),
            rotations: Vec::new(),
            opacity_params: Vec::new(),
            colors: Vec::new(),
            s_min,
            level,
        }
    }

    pub fn from_gaussians(level: u32, s_min: f64, gaussians: &[Gaussian]) -> Self {
        let mut set = Self::empty(level, s_min);
        for g in gaussians {
            set.push(*g);
        }
        set
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, g: Gaussian) {
        self.positions.push(g.position);
        self.scale_params.push(g.scale_param);
        self.rotations.push(g.rotation);
        self.opacity_params.push(g.opacity_param);
        self.colors.push(g.color);
    }

    pub fn get(&self, i: usize) -> Gaussian {
        Gaussian {
            position: self.positions[i],
            scale_param: self.scale_params[i],
            rotation: self.rotations[i],
            opacity_param: self.opacity_params[i],
            color: self.colors[i],
        }
    }

    pub fn effective_scale(&self, i: usize) -> [f64; 3] {
        effective_scale(self.scale_params[i], self.s_min)
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_params[i])
    }

    /// Keeps the Gaussians whose index appears in `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.level, self.s_min);
        for &i in indices {
            out.push(self.get(i));
        }
        out
    }

    /// Checks that all attribute arrays have the same length.
    pub fn check_consistent(&self) -> Result<()> {
        let n = self.positions.len();
        if self.scale_params.len() != n
            || self.rotations.len() != n
            || self.opacity_params.len() != n
            || self.colors.len() != n
        {
            return Err(Error::Contract(format!(
                "attribute arrays disagree in length (positions={n}, scales={}, rotations={}, opacities={}, colors={})",
                self.scale_params.len(),
                self.rotations.len(),
                self.opacity_params.len(),
                self.colors.len()
            )));
        }
        Ok(())
    }

    /// Smallest effective scale component over the set, `None` when empty.
    pub fn min_effective_scale(&self) -> Option<f64> {
        (0..self.len())
            .flat_map(|i| self.effective_scale(i))
            .min_by(f64::total_cmp)
    }

    /// Number of Gaussians with some effective scale component not strictly
    /// above `s_min` (or not positive when `s_min` is zero).
    pub fn scale_violations(&self) -> usize {
        (0..self.len())
            .filter(|&i| {
                self.effective_scale(i)
                    .iter()
                    .any(|&s| !(s > self.s_min) || !(s > 0.0))
            })
            .count()
    }
}

/// Deep copy of a level. The returned set shares no storage with `set`.
pub fn clone_level(set: &GaussianLevelSet) -> GaussianLevelSet {
    set.clone()
}

/// Result of re-expressing a trained level under a smaller constraint.
#[derive(Debug, Clone)]
pub struct LevelTransition {
    pub set: GaussianLevelSet,
    /// Scale components whose `s - s_min_next` fell below the floor.
    pub clamped_components: usize,
}

/// Initializes the next level from a trained one, keeping every effective
/// scale unchanged: `s_opt' = ln(s - s_min_next)`.
pub fn init_next_level(prev: &GaussianLevelSet, s_min_next: f64) -> Result<LevelTransition> {
    prev.check_consistent()?;
    if !(s_min_next < prev.s_min) && !(prev.s_min == 0.0 && s_min_next == 0.0) {
        return Err(Error::Argument(format!(
            "next constraint {s_min_next} must be below the current one {}",
            prev.s_min
        )));
    }
    let mut clamped = 0usize;
    let scale_params = (0..prev.len())
        .map(|i| {
            let s = prev.effective_scale(i);
            let mut out = [0.0; 3];
            for k in 0..3 {
                let mut gap = s[k] - s_min_next;
                if !(gap >= SCALE_CLAMP_FLOOR) {
                    gap = SCALE_CLAMP_FLOOR;
                    clamped += 1;
                }
                out[k] = gap.ln();
            }
            out
        })
        .collect();
    if clamped > 0 {
        log::warn!("level transition clamped {clamped} scale components to the floor");
    }
    Ok(LevelTransition {
        set: GaussianLevelSet {
            positions: prev.positions.clone(),
            scale_params,
            rotations: prev.rotations.clone(),
            opacity_params: prev.opacity_params.clone(),
            colors: prev.colors.clone(),
            s_min: s_min_next,
            level: prev.level + 1,
        },
        clamped_components: clamped,
    })
}

/// The trained levels `1..=l_max` together with the constraint ladder.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLevelModel {
    pub levels: Vec<GaussianLevelSet>,
    pub tau: f64,
    pub rho: f64,
    pub l_max: u32,
}

impl MultiLevelModel {
    pub fn new(levels: Vec<GaussianLevelSet>, tau: f64, rho: f64, l_max: u32) -> Result<Self> {
        let model = Self {
            levels,
            tau,
            rho,
            l_max,
        };
        model.validate()?;
        Ok(model)
    }

    /// Checks level numbering and that each level carries its exact constraint.
    pub fn validate(&self) -> Result<()> {
        if self.l_max < 1 {
            return Err(Error::Argument("l_max must be at least 1".into()));
        }
        if self.levels.len() != self.l_max as usize {
            return Err(Error::Validation(format!(
                "model has {} levels, expected {}",
                self.levels.len(),
                self.l_max
            )));
        }
        for (i, set) in self.levels.iter().enumerate() {
            let level = i as u32 + 1;
            if set.level != level {
                return Err(Error::Validation(format!(
                    "level slot {level} holds level {}",
                    set.level
                )));
            }
            let expected = scale_constraint(level, self.tau, self.rho, self.l_max)?;
            if set.s_min != expected {
                return Err(Error::Validation(format!(
                    "level {level} s_min {} differs from constraint {expected}",
                    set.s_min
                )));
            }
            set.check_consistent()?;
        }
        Ok(())
    }

    /// The level set for a 1-based level index.
    pub fn level(&self, level: u32) -> Result<&GaussianLevelSet> {
        if level < 1 || level > self.l_max {
            return Err(Error::Argument(format!(
                "level {level} outside [1, {}]",
                self.l_max
            )));
        }
        Ok(&self.levels[level as usize - 1])
    }

    pub fn s_min(&self, level: u32) -> Result<f64> {
        scale_constraint(level, self.tau, self.rho, self.l_max)
    }

    pub fn counts(&self) -> Vec<usize> {
        self.levels.iter().map(GaussianLevelSet::len).collect()
    }
}

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Iteration budget of one level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSchedule {
    pub iterations: u32,
    /// Density control (densify, prune, overlap prune, opacity reset) only
    /// runs while `iteration < density_horizon`.
    pub density_horizon: u32,
    pub densify_interval: u32,
}

/// Full-length schedule for levels 1..=5.
pub const LEVEL_SCHEDULE: [LevelSchedule; 5] = [
    LevelSchedule { iterations: 10_000, density_horizon: 5_000, densify_interval: 2_000 },
    LevelSchedule { iterations: 15_000, density_horizon: 6_000, densify_interval: 1_000 },
    LevelSchedule { iterations: 20_000, density_horizon: 8_000, densify_interval: 500 },
    LevelSchedule { iterations: 25_000, density_horizon: 10_000, densify_interval: 500 },
    LevelSchedule { iterations: 30_000, density_horizon: 15_000, densify_interval: 200 },
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    /// Initial position rate, multiplied by the scene extent.
    pub position_init: f64,
    /// Final position rate, multiplied by the scene extent.
    pub position_final: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            scale: 5e-3,
            rotation: 1e-3,
            opacity: 0.05,
            color: 2.5e-3,
        }
    }
}

impl LearningRates {
    /// Position rate at `iteration` of `total`, log-linear between the
    /// initial and final values.
    pub fn position_at(&self, iteration: u32, total: u32, extent: f64) -> f64 {
        let t = if total == 0 { 1.0 } else { (iteration as f64 / total as f64).clamp(0.0, 1.0) };
        let (a, b) = (self.position_init.ln(), self.position_final.ln());
        (a * (1.0 - t) + b * t).exp() * extent
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// One entry per level, level 1 first.
    pub schedules: Vec<LevelSchedule>,
    /// Overlap pruning period; never applied at the top level.
    pub overlap_prune_interval: u32,
    pub opacity_reset_interval: u32,
    /// Mean screen-space positional gradient (NDC units) that triggers
    /// densification.
    pub densify_grad_threshold: f64,
    /// Clone when the largest scale is at most this fraction of the scene
    /// extent, split otherwise.
    pub percent_dense: f64,
    pub prune_opacity: f64,
    pub opacity_reset_value: f64,
    pub split_factor: f64,
    pub learning_rates: LearningRates,
    pub lambda_ssim: f64,
    pub seed: u64,
    pub background: [f64; 3],
    /// Period of progress records in the event log; 0 disables them.
    pub progress_interval: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedules: LEVEL_SCHEDULE.to_vec(),
            overlap_prune_interval: 1000,
            opacity_reset_interval: 3000,
            densify_grad_threshold: 2e-4,
            percent_dense: 0.01,
            prune_opacity: 0.005,
            opacity_reset_value: 0.01,
            split_factor: 1.6,
            learning_rates: LearningRates::default(),
            lambda_ssim: crate::defaults::DEFAULT_LAMBDA_SSIM,
            seed: 0,
            background: [0.0; 3],
            progress_interval: 0,
        }
    }
}

fn scale_count(v: u32, factor: f64) -> u32 {
    ((v as f64 * factor).round() as u32).max(1)
}

impl TrainConfig {
    /// Default schedule for `l_max` levels: the first `l_max` rows of the
    /// five-level table, repeating the last row beyond five.
    pub fn for_levels(l_max: u32) -> Self {
        let schedules = (0..l_max as usize)
            .map(|i| LEVEL_SCHEDULE[i.min(LEVEL_SCHEDULE.len() - 1)])
            .collect();
        Self {
            schedules,
            ..Self::default()
        }
    }

    /// Multiplies every iteration count and interval by `factor`, rounding
    /// to at least one.
    pub fn scaled(mut self, factor: f64) -> Self {
        for s in &mut self.schedules {
            s.iterations = scale_count(s.iterations, factor);
            s.density_horizon = scale_count(s.density_horizon, factor);
            s.densify_interval = scale_count(s.densify_interval, factor);
        }
        self.overlap_prune_interval = scale_count(self.overlap_prune_interval, factor);
        self.opacity_reset_interval = scale_count(self.opacity_reset_interval, factor);
        self
    }

    pub fn schedule(&self, level: u32) -> Result<LevelSchedule> {
        self.schedules
            .get(level as usize - 1)
            .copied()
            .ok_or_else(|| Error::Argument(format!("no schedule for level {level}")))
    }

    pub fn validate(&self, l_max: u32) -> Result<()> {
        if self.schedules.len() < l_max as usize {
            return Err(Error::Argument(format!(
                "{} level schedules given for {l_max} levels",
                self.schedules.len()
            )));
        }
        for (i, s) in self.schedules.iter().enumerate() {
            if s.densify_interval < 1 || s.iterations < 1 {
                return Err(Error::Argument(format!("level {}: intervals must be at least 1", i + 1)));
            }
            if s.density_horizon > s.iterations {
                return Err(Error::Argument(format!(
                    "level {}: density horizon {} exceeds {} iterations",
                    i + 1,
                    s.density_horizon,
                    s.iterations
                )));
            }
        }
        if self.overlap_prune_interval < 1 || self.opacity_reset_interval < 1 {
            return Err(Error::Argument("intervals must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_ssim) {
            return Err(Error::Argument(format!("lambda_ssim {} outside [0, 1]", self.lambda_ssim)));
        }
        if !(self.split_factor > 0.0) || !(self.opacity_reset_value > 0.0 && self.opacity_reset_value < 1.0) {
            return Err(Error::Argument("split factor and reset opacity must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let hash = Sha256::digest(&json);
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

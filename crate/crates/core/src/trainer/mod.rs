//! Level-by-level training.
//!
//! Level 1 is seeded from the sparse point cloud. Each later level starts
//! from the final Gaussians of the previous one, re-expressed under the
//! smaller scale constraint so the rendered image does not change at the
//! hand-over.

pub mod config;
pub mod density;
pub mod loss;
pub mod optim;

use std::sync::atomic::{AtomicBool, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{LearningRates, LevelSchedule, TrainConfig};
pub use density::{DensifyParams, GradStats};
pub use optim::{AdamState, StepRates};

use crate::error::{Error, Result};
use crate::model::{init_next_level, logit, scale_constraint, Gaussian, GaussianLevelSet, MultiLevelModel};
use crate::raster::{render, render_backward};
use crate::scene::Dataset;

/// Initial opacity of Gaussians seeded from points.
pub const INIT_OPACITY: f64 = 0.1;

/// First-level Gaussians: one per point, isotropic with scale equal to the
/// RMS distance to the three nearest points.
pub fn init_from_points(
    points: &[[f64; 3]],
    colors: &[[f64; 3]],
    s_min: f64,
    extent: f64,
) -> Result<GaussianLevelSet> {
    if points.is_empty() {
        return Err(Error::Initialization("point cloud is empty".into()));
    }
    if points.len() != colors.len() {
        return Err(Error::Initialization("point and color counts differ".into()));
    }
    let sq = density::mean_sq_knn(points, 3);
    let mut set = GaussianLevelSet::empty(1, s_min);
    for (i, p) in points.iter().enumerate() {
        let d = if points.len() == 1 { 0.01 * extent } else { sq[i].max(1e-7).sqrt() };
        set.push(Gaussian {
            position: *p,
            scale_param: [d.ln(); 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_param: logit(INIT_OPACITY),
            color: colors[i].map(|c| c.clamp(0.0, 1.0)),
        });
    }
    Ok(set)
}

/// One entry of the training event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEvent {
    pub level: u32,
    pub iteration: u32,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    LevelStart { s_min: f64, gaussians: usize },
    Densify { before: usize, after: usize, cloned: usize, split: usize, pruned: usize },
    OverlapPrune { before: usize, after: usize, d_op: f64 },
    OpacityReset { gaussians: usize, lowered: usize },
    Progress { loss: f64, gaussians: usize },
    /// The finished level was cloned and saved.
    Checkpoint { gaussians: usize, loss: f64 },
    Transition { clamped_components: usize, max_abs_diff: f64 },
}

/// Render change measured when handing a level over to the next one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub clamped_components: usize,
    /// Largest per-channel difference over all training views.
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: u32,
    pub s_min: f64,
    pub iterations: u32,
    pub initial_count: usize,
    pub final_count: usize,
    /// Exponential moving average of the loss.
    pub loss: f64,
    /// Iterations after which some Gaussian violated the scale constraint.
    pub violation_iterations: u32,
    /// Smallest `s - s_min` seen after any iteration.
    pub min_scale_margin: Option<f64>,
    pub transition: Option<TransitionReport>,
}

impl LevelReport {
    fn new(level: u32, s_min: f64, count: usize) -> Self {
        Self {
            level,
            s_min,
            iterations: 0,
            initial_count: count,
            final_count: count,
            loss: 0.0,
            violation_iterations: 0,
            min_scale_margin: None,
            transition: None,
        }
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tau: f64,
    pub rho: f64,
    pub l_max: u32,
    pub config_digest: String,
    pub level: u32,
    pub iteration: u32,
    pub done: bool,
    pub completed: Vec<GaussianLevelSet>,
    pub set: GaussianLevelSet,
    pub adam: AdamState,
    pub stats: GradStats,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub events: Vec<TrainEvent>,
    pub reports: Vec<LevelReport>,
}

/// Result of a finished run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MultiLevelModel,
    pub events: Vec<TrainEvent>,
    pub reports: Vec<LevelReport>,
}

pub struct Trainer<'a> {
    data: &'a Dataset,
    cfg: TrainConfig,
    tau: f64,
    rho: f64,
    l_max: u32,
    extent: f64,
    completed: Vec<GaussianLevelSet>,
    level: u32,
    iteration: u32,
    set: GaussianLevelSet,
    adam: AdamState,
    stats: GradStats,
    rng: ChaCha8Rng,
    events: Vec<TrainEvent>,
    reports: Vec<LevelReport>,
    done: bool,
}

fn check_ladder(tau: f64, rho: f64, l_max: u32) -> Result<()> {
    // level 1 exists for any l_max >= 1, so this checks every argument
    scale_constraint(1, tau, rho, l_max)?;
    Ok(())
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a Dataset, cfg: TrainConfig, tau: f64, rho: f64, l_max: u32) -> Result<Self> {
        check_ladder(tau, rho, l_max)?;
        cfg.validate(l_max)?;
        data.validate()?;
        let extent = data.extent();
        let s_min = scale_constraint(1, tau, rho, l_max)?;
        let set = init_from_points(&data.points, &data.point_colors, s_min, extent)?;
        let n = set.len();
        let mut t = Self {
            data,
            tau,
            rho,
            l_max,
            extent,
            completed: Vec::new(),
            level: 1,
            iteration: 0,
            adam: AdamState::new(n),
            stats: GradStats::new(n),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            set,
            events: Vec::new(),
            reports: vec![LevelReport::new(1, s_min, n)],
            done: false,
        };
        t.push_event(EventKind::LevelStart { s_min, gaussians: n });
        Ok(t)
    }

    pub fn resume(data: &'a Dataset, cfg: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        crate::io::checkpoint::validate_checkpoint(&ckpt)?;
        cfg.validate(ckpt.l_max)?;
        data.validate()?;
        if cfg.digest() != ckpt.config_digest {
            return Err(Error::Validation("checkpoint was written with a different configuration".into()));
        }
        let n = ckpt.set.len();
        if ckpt.adam.len() != n || ckpt.stats.len() != n {
            return Err(Error::Validation("checkpoint optimizer state does not match its Gaussians".into()));
        }
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng_seed);
        rng.set_stream(ckpt.rng_stream);
        rng.set_word_pos(ckpt.rng_word_pos);
        Ok(Self {
            data,
            extent: data.extent(),
            cfg,
            tau: ckpt.tau,
            rho: ckpt.rho,
            l_max: ckpt.l_max,
            completed: ckpt.completed,
            level: ckpt.level,
            iteration: ckpt.iteration,
            set: ckpt.set,
            adam: ckpt.adam,
            stats: ckpt.stats,
            rng,
            events: ckpt.events,
            reports: ckpt.reports,
            done: ckpt.done,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tau: self.tau,
            rho: self.rho,
            l_max: self.l_max,
            config_digest: self.cfg.digest(),
            level: self.level,
            iteration: self.iteration,
            done: self.done,
            completed: self.completed.clone(),
            set: self.set.clone(),
            adam: self.adam.clone(),
            stats: self.stats.clone(),
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
            events: self.events.clone(),
            reports: self.reports.clone(),
        }
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    /// Iterations completed in the current level.
    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn current_set(&self) -> &GaussianLevelSet {
        &self.set
    }

    pub fn events(&self) -> &[TrainEvent] {
        &self.events
    }

    pub fn reports(&self) -> &[LevelReport] {
        &self.reports
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    fn push_event(&mut self, kind: EventKind) {
        log::debug!("level {} iteration {}: {:?}", self.level, self.iteration, kind);
        self.events.push(TrainEvent { level: self.level, iteration: self.iteration, kind });
    }

    fn diverged(&self, iteration: u32, message: impl Into<String>) -> Error {
        Error::Diverged { level: self.level, iteration, message: message.into() }
    }

    /// Runs one iteration. Returns `false` once every level is trained.
    pub fn step(&mut self) -> Result<bool> {
        if self.done {
            return Ok(false);
        }
        let sched = self.cfg.schedule(self.level)?;
        let it = self.iteration + 1;
        let view = &self.data.train[self.rng.random_range(0..self.data.train.len())];
        let bg = self.cfg.background;

        let out = render(&self.set, &view.camera, bg);
        let (loss, upstream) = loss::photometric_loss(&out.image, &view.image, self.cfg.lambda_ssim)?;
        if !loss.is_finite() {
            return Err(self.diverged(it, format!("loss is {loss}")));
        }
        let grads = render_backward(&self.set, &view.camera, bg, &upstream)?;
        if !grads.all_finite() {
            return Err(self.diverged(it, "non-finite gradient"));
        }
        let densifying = it < sched.density_horizon;
        if densifying {
            self.stats.record(&grads.mean2d, &grads.visible, view.camera.width, view.camera.height);
        }
        let lr = &self.cfg.learning_rates;
        let rates = StepRates {
            position: lr.position_at(it, sched.iterations, self.extent),
            scale: lr.scale,
            rotation: lr.rotation,
            opacity: lr.opacity,
            color: lr.color,
        };
        self.adam.apply(&mut self.set, &grads, rates);
        self.iteration = it;

        let report = self.reports.last_mut().expect("level report");
        report.iterations = it;
        report.loss = if it == 1 { loss } else { 0.4 * loss + 0.6 * report.loss };
        if self.set.scale_violations() > 0 {
            report.violation_iterations += 1;
        }
        if let Some(m) = self.set.min_effective_scale() {
            let margin = m - self.set.s_min;
            report.min_scale_margin = Some(report.min_scale_margin.map_or(margin, |v| v.min(margin)));
        }

        if densifying {
            self.density_control(it, sched)?;
        }
        if self.cfg.progress_interval > 0 && it % self.cfg.progress_interval == 0 {
            let gaussians = self.set.len();
            self.push_event(EventKind::Progress { loss, gaussians });
        }
        self.reports.last_mut().expect("level report").final_count = self.set.len();
        if it >= sched.iterations {
            self.finish_level()?;
        }
        Ok(true)
    }

    fn density_control(&mut self, it: u32, sched: LevelSchedule) -> Result<()> {
        if it % sched.densify_interval == 0 {
            let before = self.set.len();
            let params = DensifyParams {
                grad_threshold: self.cfg.densify_grad_threshold,
                clone_max_scale: self.cfg.percent_dense * self.extent,
                split_factor: self.cfg.split_factor,
                prune_opacity: self.cfg.prune_opacity,
            };
            let edit = density::densify_and_prune(&mut self.set, &self.stats, params, &mut self.rng);
            self.adam.remap(&edit.origin);
            self.stats = GradStats::new(self.set.len());
            self.push_event(EventKind::Densify {
                before,
                after: self.set.len(),
                cloned: edit.cloned,
                split: edit.split,
                pruned: edit.pruned,
            });
        }
        if self.level < self.l_max && it % self.cfg.overlap_prune_interval == 0 {
            let before = self.set.len();
            let d_op = self.set.s_min / 2.0;
            let edit = density::overlap_prune(&mut self.set, d_op);
            self.adam.remap(&edit.origin);
            let keep: Vec<usize> = edit.origin.iter().map(|o| o.expect("pruning keeps originals")).collect();
            self.stats = GradStats {
                accum: keep.iter().map(|&i| self.stats.accum[i]).collect(),
                count: keep.iter().map(|&i| self.stats.count[i]).collect(),
            };
            self.push_event(EventKind::OverlapPrune { before, after: self.set.len(), d_op });
        }
        if it % self.cfg.opacity_reset_interval == 0 {
            let lowered = density::opacity_reset(&mut self.set, self.cfg.opacity_reset_value);
            self.adam.reset_opacity();
            self.push_event(EventKind::OpacityReset { gaussians: self.set.len(), lowered });
        }
        Ok(())
    }

    fn finish_level(&mut self) -> Result<()> {
        let loss = self.reports.last().map_or(0.0, |r| r.loss);
        self.push_event(EventKind::Checkpoint { gaussians: self.set.len(), loss });
        self.completed.push(self.set.clone());
        if self.level == self.l_max {
            self.done = true;
            return Ok(());
        }
        let s_next = scale_constraint(self.level + 1, self.tau, self.rho, self.l_max)?;
        let transition = init_next_level(&self.set, s_next)?;
        let bg = self.cfg.background;
        let max_abs_diff = self
            .data
            .train
            .iter()
            .map(|v| render(&self.set, &v.camera, bg).image.max_abs_diff(&render(&transition.set, &v.camera, bg).image))
            .fold(0.0, f64::max);
        let clamped_components = transition.clamped_components;
        self.reports.last_mut().expect("level report").transition =
            Some(TransitionReport { clamped_components, max_abs_diff });
        self.push_event(EventKind::Transition { clamped_components, max_abs_diff });

        self.level += 1;
        self.iteration = 0;
        self.set = transition.set;
        let n = self.set.len();
        self.adam = AdamState::new(n);
        self.stats = GradStats::new(n);
        self.reports.push(LevelReport::new(self.level, s_next, n));
        self.push_event(EventKind::LevelStart { s_min: s_next, gaussians: n });
        Ok(())
    }

    /// Runs up to `n` iterations; returns how many ran.
    pub fn run_steps(&mut self, n: u64) -> Result<u64> {
        let mut ran = 0;
        while ran < n && self.step()? {
            ran += 1;
        }
        Ok(ran)
    }

    /// Trains every remaining level, stopping early when `cancel` is set.
    pub fn run(&mut self, cancel: Option<&AtomicBool>) -> Result<()> {
        while !self.done {
            if cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
                break;
            }
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<TrainOutcome> {
        if !self.done {
            return Err(Error::Argument(format!(
                "training stopped at level {} iteration {}",
                self.level, self.iteration
            )));
        }
        let model = MultiLevelModel::new(self.completed, self.tau, self.rho, self.l_max)?;
        Ok(TrainOutcome { model, events: self.events, reports: self.reports })
    }
}

/// Trains all levels in one call.
pub fn train(data: &Dataset, cfg: TrainConfig, tau: f64, rho: f64, l_max: u32) -> Result<TrainOutcome> {
    let mut t = Trainer::new(data, cfg, tau, rho, l_max)?;
    t.run(None)?;
    t.finish()
}

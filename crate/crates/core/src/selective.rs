//! Selective rendering: each level of a range covers one band of distances
//! from a reference position, coarse levels taking the far field.
//!
//! A level's band starts where a Gaussian of its minimum scale shrinks below
//! `gamma` pixels on screen: `d_proj = s_min * f / gamma`. Level `l` owns
//! `[d_proj(l), d_proj(l - 1))`, the finest level of the range starts at 0
//! and the coarsest extends to infinity.

use std::collections::VecDeque;
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::defaults::{DEFAULT_GAMMA, DEFAULT_UPDATE_PERIOD};
use crate::error::{Error, Result};
use crate::model::MultiLevelModel;
use crate::raster::{render, RenderOutput, Splat, SplatSource};

/// Where band distances are measured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePolicy {
    /// A fixed position, by default the mean training camera center.
    Fixed,
    /// The center of the camera that triggered the rebuild.
    CurrentCamera,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub l_start: u32,
    pub l_end: u32,
    pub gamma: f64,
    pub policy: ReferencePolicy,
    pub update_period: usize,
}

impl SelectionConfig {
    pub fn new(l_start: u32, l_end: u32, gamma: f64) -> Self {
        Self { l_start, l_end, gamma, policy: ReferencePolicy::Fixed, update_period: DEFAULT_UPDATE_PERIOD }
    }

    /// A single level with the default threshold.
    pub fn single(level: u32) -> Self {
        Self::new(level, level, DEFAULT_GAMMA)
    }

    pub fn validate(&self, l_max: u32) -> Result<()> {
        if !(1 <= self.l_start && self.l_start <= self.l_end && self.l_end <= l_max) {
            return Err(Error::Argument(format!(
                "level range {}..{} is not within 1..{l_max}",
                self.l_start, self.l_end
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Argument(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.update_period < 1 {
            return Err(Error::Argument("update period must be at least 1".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> Vec<u32> {
        (self.l_start..=self.l_end).collect()
    }
}

/// Camera distance at which a Gaussian of scale `s_min` covers `gamma`
/// pixels under focal length `f`.
pub fn d_proj(s_min: f64, gamma: f64, f: f64) -> f64 {
    s_min * f / gamma
}

/// Half-open distance band `[lo, hi)` of one level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub level: u32,
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub fn contains(&self, d: f64) -> bool {
        self.lo <= d && d < self.hi
    }
}

/// Bands for `cfg`, finest level first. `s_min(l)` gives each level's
/// constraint.
pub fn bands(s_min: impl Fn(u32) -> f64, cfg: &SelectionConfig, f: f64) -> Vec<Band> {
    (cfg.l_start..=cfg.l_end)
        .rev()
        .map(|level| Band {
            level,
            lo: if level == cfg.l_end { 0.0 } else { d_proj(s_min(level), cfg.gamma, f) },
            hi: if level == cfg.l_start { f64::INFINITY } else { d_proj(s_min(level - 1), cfg.gamma, f) },
        })
        .collect()
}

/// Level whose band holds distance `d`.
pub fn band_of(bands: &[Band], d: f64) -> Option<u32> {
    bands.iter().find(|b| b.contains(d)).map(|b| b.level)
}

/// Gaussians drawn from several levels, each keeping its own attributes and
/// its level's constraint. Order: levels ascending, original order within a
/// level.
#[derive(Debug, Clone)]
pub struct Subset {
    model: Arc<MultiLevelModel>,
    /// `(level index, Gaussian index)` pairs.
    members: Vec<(usize, usize)>,
    pub level_counts: Vec<(u32, usize)>,
}

impl Subset {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// `(level, index within level)` of each member.
    pub fn members(&self) -> impl Iterator<Item = (u32, usize)> + '_ {
        self.members.iter().map(|&(li, gi)| (self.model.levels[li].level, gi))
    }
}

impl SplatSource for Subset {
    fn splat_count(&self) -> usize {
        self.members.len()
    }

    fn splat(&self, i: usize) -> Splat {
        let (li, gi) = self.members[i];
        self.model.levels[li].splat(gi)
    }
}

fn distance(p: &[f64; 3], q: &[f64; 3]) -> f64 {
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

/// Selects, for every level of the range, the Gaussians whose distance to
/// `reference` falls in that level's band.
pub fn build_subset(model: &Arc<MultiLevelModel>, reference: [f64; 3], cfg: &SelectionConfig, f: f64) -> Result<Subset> {
    cfg.validate(model.l_max)?;
    if !(f > 0.0 && f.is_finite()) {
        return Err(Error::Argument(format!("focal length must be positive, got {f}")));
    }
    if !reference.iter().all(|v| v.is_finite()) {
        return Err(Error::Argument(format!("reference position {reference:?} is not finite")));
    }
    let bands = bands(|l| model.levels[l as usize - 1].s_min, cfg, f);
    let mut members = Vec::new();
    let mut level_counts = Vec::new();
    for band in bands.iter().rev() {
        let li = band.level as usize - 1;
        let before = members.len();
        if band.lo == 0.0 && band.hi == f64::INFINITY {
            members.extend((0..model.levels[li].len()).map(|gi| (li, gi)));
        } else {
            for (gi, p) in model.levels[li].positions.iter().enumerate() {
                if band.contains(distance(p, &reference)) {
                    members.push((li, gi));
                }
            }
        }
        level_counts.push((band.level, members.len() - before));
    }
    Ok(Subset { model: Arc::clone(model), members, level_counts })
}

/// Renders a level range from one reference position.
pub fn render_selective(
    model: &Arc<MultiLevelModel>,
    reference: [f64; 3],
    cfg: &SelectionConfig,
    cam: &Camera,
    background: [f64; 3],
) -> Result<(RenderOutput, Subset)> {
    let subset = build_subset(model, reference, cfg, cam.fx)?;
    Ok((render(&subset, cam, background), subset))
}

/// An immutable subset tagged with the rebuild that produced it.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub generation: u64,
    pub reference: [f64; 3],
    pub focal: f64,
    pub subset: Subset,
}

/// How rebuilds reach the renderer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RebuildMode {
    /// A builder thread works while frames keep using the old snapshot.
    Background,
    /// Rebuilds run on the render thread and swap in immediately.
    Synchronous,
    /// Rebuilds run on the render thread, swapping in exactly when the given
    /// per-view generation schedule says so.
    Replay(Vec<u64>),
}

/// Per-view record of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameStats {
    pub view_index: usize,
    pub generation: u64,
    pub gaussian_count: usize,
    /// Rasterization time.
    pub render_ms: f64,
    /// Time from frame start to finished image, including any blocking
    /// rebuild.
    pub latency_ms: f64,
    pub levels_used: Vec<u32>,
    pub level_counts: Vec<(u32, usize)>,
    pub gamma: f64,
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub output: RenderOutput,
    pub stats: FrameStats,
}

#[derive(Debug, Clone, Copy)]
struct Request {
    generation: u64,
    reference: [f64; 3],
    focal: f64,
}

type BuildResult = (Request, Result<Subset>);

struct Builder {
    requests: Option<Sender<Request>>,
    results: Receiver<BuildResult>,
    handle: Option<JoinHandle<()>>,
}

impl Builder {
    fn spawn(model: Arc<MultiLevelModel>, cfg: SelectionConfig) -> Self {
        let (req_tx, req_rx) = mpsc::channel::<Request>();
        let (res_tx, res_rx) = mpsc::channel::<BuildResult>();
        let handle = std::thread::spawn(move || {
            while let Ok(mut req) = req_rx.recv() {
                // only the newest pending request matters
                while let Ok(newer) = req_rx.try_recv() {
                    req = newer;
                }
                let subset = build_subset(&model, req.reference, &cfg, req.focal);
                if res_tx.send((req, subset)).is_err() {
                    break;
                }
            }
        });
        Self { requests: Some(req_tx), results: res_rx, handle: Some(handle) }
    }
}

impl Drop for Builder {
    fn drop(&mut self) {
        self.requests.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Renders a trajectory against periodically rebuilt subsets.
pub struct Session {
    model: Arc<MultiLevelModel>,
    cfg: SelectionConfig,
    fixed_reference: [f64; 3],
    mode: RebuildMode,
    current: Arc<Snapshot>,
    next_generation: u64,
    builder: Option<Builder>,
    pending: VecDeque<Request>,
    diagnostics: Vec<String>,
}

impl Session {
    /// Builds the first snapshot synchronously for `first` and starts the
    /// builder thread in background mode.
    pub fn new(
        model: Arc<MultiLevelModel>,
        cfg: SelectionConfig,
        fixed_reference: [f64; 3],
        first: &Camera,
        mode: RebuildMode,
    ) -> Result<Self> {
        cfg.validate(model.l_max)?;
        let reference = match cfg.policy {
            ReferencePolicy::Fixed => fixed_reference,
            ReferencePolicy::CurrentCamera => first.center(),
        };
        let subset = build_subset(&model, reference, &cfg, first.fx)?;
        let current = Arc::new(Snapshot { generation: 0, reference, focal: first.fx, subset });
        let builder = matches!(mode, RebuildMode::Background).then(|| Builder::spawn(Arc::clone(&model), cfg));
        Ok(Self {
            model,
            cfg,
            fixed_reference,
            mode,
            current,
            next_generation: 1,
            builder,
            pending: VecDeque::new(),
            diagnostics: Vec::new(),
        })
    }

    pub fn config(&self) -> &SelectionConfig {
        &self.cfg
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        Arc::clone(&self.current)
    }

    /// Rebuild failures seen so far.
    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }

    /// Queues a rebuild and returns its generation.
    pub fn request_rebuild(&mut self, reference: [f64; 3], focal: f64) -> u64 {
        let req = Request { generation: self.next_generation, reference, focal };
        self.next_generation += 1;
        match &self.builder {
            Some(b) => {
                let sent = b.requests.as_ref().map(|tx| tx.send(req).is_ok()).unwrap_or(false);
                if !sent {
                    self.diagnostics.push(format!("generation {}: builder thread is gone", req.generation));
                }
            }
            None => self.pending.push_back(req),
        }
        req.generation
    }

    fn accept(&mut self, req: Request, result: Result<Subset>) {
        match result {
            Ok(subset) if req.generation > self.current.generation => {
                self.current = Arc::new(Snapshot {
                    generation: req.generation,
                    reference: req.reference,
                    focal: req.focal,
                    subset,
                });
            }
            Ok(_) => {}
            Err(e) => {
                let msg = format!("rebuild {} failed, keeping generation {}: {e}", req.generation, self.current.generation);
                log::warn!("{msg}");
                self.diagnostics.push(msg);
            }
        }
    }

    /// Swaps in whatever the current mode says should serve view `index`.
    fn refresh(&mut self, index: usize) {
        match self.mode.clone() {
            RebuildMode::Background => {
                let Some(b) = &self.builder else { return };
                let mut done = Vec::new();
                loop {
                    match b.results.try_recv() {
                        Ok(r) => done.push(r),
                        Err(TryRecvError::Empty) | Err(TryRecvError::Disconnected) => break,
                    }
                }
                for (req, res) in done {
                    self.accept(req, res);
                }
            }
            RebuildMode::Synchronous => {
                if let Some(req) = self.pending.drain(..).last() {
                    let res = build_subset(&self.model, req.reference, &self.cfg, req.focal);
                    self.accept(req, res);
                }
            }
            RebuildMode::Replay(schedule) => {
                let target = schedule.get(index).copied().unwrap_or(self.current.generation);
                if target > self.current.generation {
                    while let Some(req) = self.pending.pop_front() {
                        if req.generation == target {
                            let res = build_subset(&self.model, req.reference, &self.cfg, req.focal);
                            self.accept(req, res);
                            break;
                        }
                    }
                }
            }
        }
    }

    /// Renders view `index` of a trajectory. Every `update_period` views a
    /// rebuild is requested for the current camera.
    pub fn render_view(&mut self, index: usize, cam: &Camera, background: [f64; 3]) -> Frame {
        let start = Instant::now();
        if index > 0 && index % self.cfg.update_period == 0 {
            let reference = match self.cfg.policy {
                ReferencePolicy::Fixed => self.fixed_reference,
                ReferencePolicy::CurrentCamera => cam.center(),
            };
            self.request_rebuild(reference, cam.fx);
        }
        self.refresh(index);
        self.render_current(index, cam, background, start)
    }

    fn render_current(&self, index: usize, cam: &Camera, background: [f64; 3], start: Instant) -> Frame {
        let snap = Arc::clone(&self.current);
        let t = Instant::now();
        let output = render(&snap.subset, cam, background);
        let render_ms = t.elapsed().as_secs_f64() * 1e3;
        let stats = FrameStats {
            view_index: index,
            generation: snap.generation,
            gaussian_count: snap.subset.len(),
            render_ms,
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
            levels_used: self.cfg.levels(),
            level_counts: snap.subset.level_counts.clone(),
            gamma: self.cfg.gamma,
        };
        Frame { output, stats }
    }

    /// Renders with the current snapshot, no rebuild bookkeeping.
    pub fn render_now(&self, index: usize, cam: &Camera, background: [f64; 3]) -> Frame {
        self.render_current(index, cam, background, Instant::now())
    }

    /// Replaces the configuration and rebuilds synchronously for `cam`.
    pub fn reconfigure(&mut self, cfg: SelectionConfig, cam: &Camera) -> Result<()> {
        cfg.validate(self.model.l_max)?;
        let reference = match cfg.policy {
            ReferencePolicy::Fixed => self.fixed_reference,
            ReferencePolicy::CurrentCamera => cam.center(),
        };
        let subset = build_subset(&self.model, reference, &cfg, cam.fx)?;
        if self.builder.is_some() {
            // results built under the old configuration must not be swapped in
            self.builder = Some(Builder::spawn(Arc::clone(&self.model), cfg));
        }
        self.pending.clear();
        self.cfg = cfg;
        let generation = self.next_generation;
        self.next_generation += 1;
        self.current = Arc::new(Snapshot { generation, reference, focal: cam.fx, subset });
        Ok(())
    }

    /// Renders a whole trajectory.
    pub fn run(&mut self, trajectory: &[Camera], background: [f64; 3]) -> Vec<Frame> {
        trajectory
            .iter()
            .enumerate()
            .map(|(i, cam)| self.render_view(i, cam, background))
            .collect()
    }
}

/// Generation that served each frame; feed to [`RebuildMode::Replay`].
pub fn swap_schedule(frames: &[Frame]) -> Vec<u64> {
    frames.iter().map(|f| f.stats.generation).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Gaussian, GaussianLevelSet};

    #[test]
    fn d_proj_examples() {
        assert!((d_proj(0.05, 1.0, 1000.0) - 50.0).abs() < 1e-12);
        assert_eq!(d_proj(0.0, 8.0, 1000.0), 0.0);
        assert_eq!(d_proj(0.05, 2.0, 1000.0), d_proj(0.05, 1.0, 1000.0) / 2.0);
    }

    #[test]
    fn bands_assign_by_distance() {
        // s_min 0.5 / 0.05 / 0 for levels 3 / 4 / 5, gamma 1, f 1000
        let s = |l: u32| match l {
            3 => 0.5,
            4 => 0.05,
            _ => 0.0,
        };
        let cfg = SelectionConfig::new(3, 5, 1.0);
        let b = bands(s, &cfg, 1000.0);
        assert_eq!(b.iter().map(|b| b.lo).collect::<Vec<_>>(), [0.0, 50.0, 500.0]);
        assert_eq!(band_of(&b, 10.0), Some(5));
        assert_eq!(band_of(&b, 100.0), Some(4));
        assert_eq!(band_of(&b, 1000.0), Some(3));
        // edges belong to the band they open
        assert_eq!(band_of(&b, 50.0), Some(4));
        assert_eq!(band_of(&b, 500.0), Some(3));
    }

    #[test]
    fn config_validation() {
        assert!(SelectionConfig::new(2, 1, 8.0).validate(3).is_err());
        assert!(SelectionConfig::new(1, 4, 8.0).validate(3).is_err());
        assert!(SelectionConfig::new(0, 1, 8.0).validate(3).is_err());
        assert!(SelectionConfig::new(1, 3, 0.0).validate(3).is_err());
        SelectionConfig::new(1, 3, 8.0).validate(3).unwrap();
    }

    #[test]
    fn empty_model_gives_empty_subset() {
        let levels = vec![GaussianLevelSet::empty(1, 0.1), GaussianLevelSet::empty(2, 0.0)];
        let model = Arc::new(MultiLevelModel::new(levels, 0.1, 4.0, 2).unwrap());
        let s = build_subset(&model, [0.0; 3], &SelectionConfig::new(1, 2, 8.0), 100.0).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn subset_keeps_level_order() {
        let g = |x: f64| Gaussian {
            position: [x, 0.0, 0.0],
            scale_param: [-2.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_param: 0.0,
            color: [0.5; 3],
        };
        let l1 = GaussianLevelSet::from_gaussians(1, 0.1, &[g(100.0), g(1.0), g(200.0)]);
        let l2 = GaussianLevelSet::from_gaussians(2, 0.0, &[g(2.0), g(300.0), g(3.0)]);
        let model = Arc::new(MultiLevelModel::new(vec![l1, l2], 0.1, 4.0, 2).unwrap());
        // level 1 band starts at 0.1 * 100 / 1 = 10
        let s = build_subset(&model, [0.0; 3], &SelectionConfig::new(1, 2, 1.0), 100.0).unwrap();
        assert_eq!(s.members().collect::<Vec<_>>(), [(1, 0), (1, 2), (2, 0), (2, 2)]);
        assert_eq!(s.level_counts, [(1, 2), (2, 2)]);
    }
}

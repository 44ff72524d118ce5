//! Adaptive density control: densification, pruning, overlap pruning and
//! opacity reset. Every operation returns an origin list so optimizer state
//! can follow the Gaussians it belongs to.

use std::collections::HashMap;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::model::{logit, rotation_matrix, Gaussian, GaussianLevelSet, SCALE_CLAMP_FLOOR};

/// Screen-space gradient statistics gathered between densification steps.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStats {
    pub accum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        Self { accum: vec![0.0; n], count: vec![0; n] }
    }

    pub fn len(&self) -> usize {
        self.accum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accum.is_empty()
    }

    /// Adds one view's NDC gradient norm for each visible Gaussian.
    pub fn record(&mut self, mean2d: &[[f64; 2]], visible: &[bool], width: u32, height: u32) {
        let (hw, hh) = (width as f64 / 2.0, height as f64 / 2.0);
        for i in 0..self.accum.len() {
            if visible[i] {
                let g = [mean2d[i][0] * hw, mean2d[i][1] * hh];
                self.accum[i] += (g[0] * g[0] + g[1] * g[1]).sqrt();
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.accum[i] / self.count[i] as f64
        }
    }
}

/// Outcome of one density edit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DensityEdit {
    /// For each Gaussian of the edited set, the index it came from in the
    /// previous set, or `None` if it was created by the edit.
    pub origin: Vec<Option<usize>>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Parameters of [`densify_and_prune`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensifyParams {
    pub grad_threshold: f64,
    /// Largest scale up to which a Gaussian is cloned instead of split, in
    /// world units.
    pub clone_max_scale: f64,
    pub split_factor: f64,
    pub prune_opacity: f64,
}

fn sample_offset<R: Rng + ?Sized>(set: &GaussianLevelSet, i: usize, rng: &mut R) -> [f64; 3] {
    let s = set.effective_scale(i);
    let z = Vector3::new(
        rng.sample::<f64, _>(StandardNormal) * s[0],
        rng.sample::<f64, _>(StandardNormal) * s[1],
        rng.sample::<f64, _>(StandardNormal) * s[2],
    );
    let d = rotation_matrix(set.rotations[i]) * z;
    [d.x, d.y, d.z]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Clones small high-gradient Gaussians, splits large ones, then removes
/// Gaussians with opacity below the pruning threshold. Large Gaussians are
/// never pruned for size.
///
/// Survivors keep their relative order; clones and then split children are
/// appended.
pub fn densify_and_prune<R: Rng + ?Sized>(
    set: &mut GaussianLevelSet,
    stats: &GradStats,
    params: DensifyParams,
    rng: &mut R,
) -> DensityEdit {
    let n = set.len();
    let mut kept: Vec<(Gaussian, Option<usize>)> = Vec::with_capacity(n);
    let mut clones = Vec::new();
    let mut children = Vec::new();
    let (mut cloned, mut split) = (0, 0);
    for i in 0..n {
        let g = set.get(i);
        if stats.mean(i) < params.grad_threshold {
            kept.push((g, Some(i)));
            continue;
        }
        let s = set.effective_scale(i);
        let largest = s[0].max(s[1]).max(s[2]);
        if largest <= params.clone_max_scale {
            kept.push((g, Some(i)));
            let mut copy = g;
            copy.position = add(g.position, sample_offset(set, i, rng));
            clones.push((copy, None));
            cloned += 1;
        } else {
            let scale_param = s.map(|v| (v / params.split_factor - set.s_min).max(SCALE_CLAMP_FLOOR).ln());
            for _ in 0..2 {
                let mut child = g;
                child.position = add(g.position, sample_offset(set, i, rng));
                child.scale_param = scale_param;
                children.push((child, None));
            }
            split += 1;
        }
    }
    kept.extend(clones);
    kept.extend(children);

    let before_prune = kept.len();
    kept.retain(|(g, _)| crate::model::sigmoid(g.opacity_param) >= params.prune_opacity);
    let pruned = before_prune - kept.len();

    let mut out = GaussianLevelSet::empty(set.level, set.s_min);
    let mut origin = Vec::with_capacity(kept.len());
    for (g, o) in kept {
        out.push(g);
        origin.push(o);
    }
    *set = out;
    DensityEdit { origin, cloned, split, pruned }
}

/// Caps every opacity at `value`; lower opacities are left unchanged.
/// Returns how many Gaussians were lowered.
pub fn opacity_reset(set: &mut GaussianLevelSet, value: f64) -> usize {
    let cap = logit(value);
    let mut lowered = 0;
    for o in &mut set.opacity_params {
        if *o > cap {
            *o = cap;
            lowered += 1;
        }
    }
    lowered
}

fn distance(p: &[f64; 3], q: &[f64; 3]) -> f64 {
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

/// Uniform hash grid over points.
struct Grid {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl Grid {
    fn new(points: &[[f64; 3]], cell: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, cells }
    }

    fn key(p: &[f64; 3], cell: f64) -> [i64; 3] {
        p.map(|v| (v / cell).floor() as i64)
    }

    /// Distances from `points[i]` to every other point within `reach` cells
    /// along each axis.
    fn neighbour_distances(&self, points: &[[f64; 3]], i: usize, reach: i64, out: &mut Vec<f64>) {
        out.clear();
        let p = &points[i];
        let c = Self::key(p, self.cell);
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(members) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        out.extend(members.iter().filter(|&&j| j != i).map(|&j| distance(p, &points[j])));
                    }
                }
            }
        }
    }
}

/// Number of neighbours averaged by overlap pruning.
pub const OVERLAP_NEIGHBOURS: usize = 3;

/// Indices of Gaussians whose mean distance to their nearest neighbours is
/// below `d_op`. All decisions use the positions before any removal.
///
/// A point can only fall below `d_op` if its k-th neighbour lies within
/// `k * d_op`, so a grid with cell `d_op` searched `k` cells out decides
/// every point exactly.
pub fn overlap_candidates(points: &[[f64; 3]], d_op: f64) -> Vec<usize> {
    let n = points.len();
    if n <= 1 || !(d_op > 0.0) {
        return Vec::new();
    }
    let k = OVERLAP_NEIGHBOURS.min(n - 1);
    let radius = k as f64 * d_op;
    let grid = Grid::new(points, d_op);
    let mut buf = Vec::new();
    let mut out = Vec::new();
    for i in 0..n {
        grid.neighbour_distances(points, i, k as i64, &mut buf);
        buf.retain(|&d| d <= radius);
        if buf.len() < k {
            continue;
        }
        buf.select_nth_unstable_by(k - 1, f64::total_cmp);
        let nearest = &mut buf[..k];
        nearest.sort_by(f64::total_cmp);
        let mean = nearest.iter().sum::<f64>() / k as f64;
        if mean < d_op {
            out.push(i);
        }
    }
    out
}

/// Removes every Gaussian returned by [`overlap_candidates`] at once.
pub fn overlap_prune(set: &mut GaussianLevelSet, d_op: f64) -> DensityEdit {
    let doomed = overlap_candidates(&set.positions, d_op);
    let mut remove = vec![false; set.len()];
    for &i in &doomed {
        remove[i] = true;
    }
    let keep: Vec<usize> = (0..set.len()).filter(|&i| !remove[i]).collect();
    *set = set.select(&keep);
    DensityEdit {
        origin: keep.into_iter().map(Some).collect(),
        pruned: doomed.len(),
        ..Default::default()
    }
}

/// Mean squared distance to the `k` nearest other points, via the same grid
/// with an expanding search.
pub fn mean_sq_knn(points: &[[f64; 3]], k: usize) -> Vec<f64> {
    let n = points.len();
    if n <= 1 {
        return vec![0.0; n];
    }
    let k = k.min(n - 1);
    let (lo, hi) = points.iter().fold(([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]), |(lo, hi), p| {
        (std::array::from_fn(|a| lo[a].min(p[a])), std::array::from_fn(|a| hi[a].max(p[a])))
    });
    let span = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    // about one point per cell on average
    let cell = if span > 0.0 { (span / (n as f64).cbrt()).max(span * 1e-9) } else { 1.0 };
    let grid = Grid::new(points, cell);
    let mut buf = Vec::new();
    (0..n)
        .map(|i| {
            let mut reach = 1i64;
            loop {
                grid.neighbour_distances(points, i, reach, &mut buf);
                // every point within reach * cell is guaranteed to be found
                let safe = reach as f64 * cell;
                let inside = buf.iter().filter(|&&d| d <= safe).count();
                if inside >= k || buf.len() >= n - 1 {
                    buf.sort_by(f64::total_cmp);
                    return buf[..k].iter().map(|d| d * d).sum::<f64>() / k as f64;
                }
                reach *= 2;
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g(position: [f64; 3], scale: f64, opacity: f64) -> Gaussian {
        Gaussian {
            position,
            scale_param: [scale.ln(); 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_param: logit(opacity),
            color: [0.2, 0.4, 0.6],
        }
    }

    #[test]
    fn opacity_reset_caps_only_high_values() {
        let mut set = GaussianLevelSet::from_gaussians(1, 0.0, &[g([0.0; 3], 1.0, 0.9), g([0.0; 3], 1.0, 0.005)]);
        let before = set.opacity_params[1];
        assert_eq!(opacity_reset(&mut set, 0.01), 1);
        assert!((set.opacity(0) - 0.01).abs() < 1e-12);
        assert_eq!(set.opacity_params[1], before);
        // a reset never pushes anything below the pruning threshold
        assert!(set.opacity(0) >= 0.005);
    }

    #[test]
    fn overlap_prune_removes_both_of_a_close_pair() {
        let mut set = GaussianLevelSet::from_gaussians(
            2,
            0.02,
            &[g([0.0; 3], 1.0, 0.5), g([0.001, 0.0, 0.0], 1.0, 0.5), g([1.0, 0.0, 0.0], 1.0, 0.5)],
        );
        // k = 2 for three points; the pair's mean distances are ~0.5, far above 0.01
        let edit = overlap_prune(&mut set, 0.01);
        assert_eq!(edit.pruned, 0);
        let mut set = GaussianLevelSet::from_gaussians(2, 0.02, &[g([0.0; 3], 1.0, 0.5), g([0.001, 0.0, 0.0], 1.0, 0.5)]);
        let edit = overlap_prune(&mut set, 0.01);
        assert_eq!(edit.pruned, 2);
        assert!(set.is_empty());
    }

    #[test]
    fn overlap_prune_degenerate_inputs() {
        assert!(overlap_candidates(&[], 0.1).is_empty());
        assert!(overlap_candidates(&[[0.0; 3]], 0.1).is_empty());
        assert!(overlap_candidates(&[[0.0; 3], [0.0; 3]], 0.0).is_empty());
    }

    #[test]
    fn densify_splits_large_and_clones_small() {
        let mut set = GaussianLevelSet::from_gaussians(
            1,
            0.0,
            &[g([0.0; 3], 0.5, 0.5), g([1.0; 3], 0.001, 0.5), g([2.0; 3], 0.5, 0.5), g([3.0; 3], 0.5, 0.001)],
        );
        let stats = GradStats { accum: vec![1.0, 1.0, 0.0, 0.0], count: vec![1, 1, 1, 1] };
        let params = DensifyParams { grad_threshold: 0.5, clone_max_scale: 0.01, split_factor: 1.6, prune_opacity: 0.005 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let edit = densify_and_prune(&mut set, &stats, params, &mut rng);
        assert_eq!((edit.cloned, edit.split, edit.pruned), (1, 1, 1));
        assert_eq!(edit.origin, vec![Some(1), Some(2), None, None, None]);
        assert_eq!(set.len(), 5);
        // split children shrink by the split factor
        for i in 3..5 {
            let s = set.effective_scale(i);
            assert!((s[0] - 0.5 / 1.6).abs() < 1e-12);
            assert!((sigmoid(set.opacity_params[i]) - 0.5).abs() < 1e-12);
        }
        assert_eq!(set.effective_scale(2), [0.001; 3].map(|v: f64| v.ln().exp()));
    }

    #[test]
    fn split_respects_constraint_floor() {
        let s_min = 0.4;
        let mut set = GaussianLevelSet::empty(1, s_min);
        let mut big = g([0.0; 3], 0.1, 0.5);
        big.scale_param = [(0.5f64 - s_min).ln(); 3];
        set.push(big);
        let stats = GradStats { accum: vec![1.0], count: vec![1] };
        let params = DensifyParams { grad_threshold: 0.5, clone_max_scale: 0.01, split_factor: 1.6, prune_opacity: 0.005 };
        densify_and_prune(&mut set, &stats, params, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(set.len(), 2);
        assert_eq!(set.scale_violations(), 0);
    }

    #[test]
    fn knn_matches_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<[f64; 3]> = (0..200).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let fast = mean_sq_knn(&pts, 3);
        for (i, p) in pts.iter().enumerate() {
            let mut d: Vec<f64> = pts.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, q)| distance(p, q)).collect();
            d.sort_by(f64::total_cmp);
            let slow = d[..3].iter().map(|v| v * v).sum::<f64>() / 3.0;
            assert_eq!(fast[i], slow);
        }
    }

    #[test]
    fn unit_square_corners_survive() {
        let corners = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
        assert!(overlap_candidates(&corners, 0.5).is_empty());
        // mean 3-NN distance is (2 + sqrt 2) / 3
        let m = (2.0 + 2f64.sqrt()) / 3.0;
        assert!(overlap_candidates(&corners, m).is_empty());
        assert_eq!(overlap_candidates(&corners, m + 1e-9), vec![0, 1, 2, 3]);
    }

    #[test]
    fn coincident_pair_is_pruned_together() {
        assert_eq!(overlap_candidates(&[[0.3; 3], [0.3; 3]], 0.01), vec![0, 1]);
    }
}

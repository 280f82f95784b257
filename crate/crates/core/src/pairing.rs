//! Disturbed point-pixel pairing.
//!
//! For an anchor point `i` the sampler picks another point `j` whose
//! hardness `1/‖g_i − g_j‖` exceeds the current bound, i.e. a point strictly
//! inside radius `1/bound`. The colour of `j` is later spliced onto the
//! geometry of `i` to form a partially negative pair. The bound follows the
//! clipped linear schedule `min(h0 + slope·k, ε)`.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng as _;

use crate::error::{config_err, Error, Result};
use crate::geom::{self, Vec3};
use crate::rng::Rng;

/// Minimum separation for which hardness is defined.
pub const MIN_SEPARATION: f64 = 1e-9;

/// Reciprocal Euclidean distance between two points.
pub fn hardness(p: Vec3, q: Vec3) -> Result<f64> {
    let d = geom::dist(p, q);
    if d < MIN_SEPARATION {
        return Err(Error::DegeneratePair(0, 1));
    }
    Ok(1.0 / d)
}

/// Parameters of `min(h0 + slope·k, epsilon)`, all in 1/metres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardnessSchedule {
    pub h0: f64,
    pub slope: f64,
    pub epsilon: f64,
}

impl HardnessSchedule {
    /// `h0 = 1/extent`, `ε = 20/extent`, reaching the ceiling at 80% of the run.
    pub fn default_for(extent: f64, total_iters: usize) -> Self {
        let h0 = 1.0 / extent;
        let epsilon = 20.0 / extent;
        let ramp = (0.8 * total_iters as f64).max(1.0);
        Self {
            h0,
            slope: (epsilon - h0) / ramp,
            epsilon,
        }
    }

    /// Bound fixed at `h0` for the whole run.
    pub fn easy(&self) -> Self {
        Self { slope: 0.0, ..*self }
    }

    /// Bound fixed at `ε` for the whole run.
    pub fn hard(&self) -> Self {
        Self {
            h0: self.epsilon,
            slope: 0.0,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h0.is_finite() && self.h0 > 0.0) {
            return Err(config_err(format!("hardness.h0 must be > 0, got {}", self.h0)));
        }
        if !(self.slope.is_finite() && self.slope >= 0.0) {
            return Err(config_err(format!("hardness.slope must be >= 0, got {}", self.slope)));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= self.h0) {
            return Err(config_err(format!(
                "hardness.epsilon ({}) must be >= hardness.h0 ({})",
                self.epsilon, self.h0
            )));
        }
        Ok(())
    }

    /// First iteration at which the linear part reaches the ceiling, if ever.
    pub fn ceiling_iteration(&self) -> Option<usize> {
        if self.slope <= 0.0 {
            return (self.h0 >= self.epsilon).then_some(0);
        }
        let mut k = ((self.epsilon - self.h0) / self.slope).ceil().max(0.0) as usize;
        // Guard against rounding on either side of the crossing.
        while k > 0 && self.h0 + self.slope * (k - 1) as f64 >= self.epsilon {
            k -= 1;
        }
        while self.h0 + self.slope * (k as f64) < self.epsilon {
            k += 1;
        }
        Some(k)
    }
}

pub fn hardness_bound(k: usize, s: &HardnessSchedule) -> f64 {
    (s.h0 + s.slope * k as f64).min(s.epsilon)
}

/// Uniform grid over 3D points for radius queries.
#[derive(Debug, Clone)]
pub struct SpatialGrid {
    inv_cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl SpatialGrid {
    pub fn new(points: &[Vec3], cell_size: f64) -> Self {
        assert!(cell_size > 0.0 && cell_size.is_finite());
        let inv_cell = 1.0 / cell_size;
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(inv_cell, *p)).or_default().push(i);
        }
        Self { inv_cell, cells }
    }

    fn key(inv_cell: f64, p: Vec3) -> [i64; 3] {
        std::array::from_fn(|c| (p[c] * inv_cell).floor() as i64)
    }

    /// Calls `f` with every point index stored in a cell that intersects the
    /// axis-aligned box around `center` of half-width `radius`.
    pub fn for_each_in_box(&self, center: Vec3, radius: f64, mut f: impl FnMut(usize)) {
        let lo = Self::key(self.inv_cell, geom::sub(center, [radius; 3]));
        let hi = Self::key(self.inv_cell, geom::add(center, [radius; 3]));
        let span: f64 = (0..3).map(|c| (hi[c] - lo[c] + 1) as f64).product();
        if span > self.cells.len() as f64 {
            for (key, members) in &self.cells {
                if (0..3).all(|c| key[c] >= lo[c] && key[c] <= hi[c]) {
                    members.iter().copied().for_each(&mut f);
                }
            }
            return;
        }
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    if let Some(members) = self.cells.get(&[x, y, z]) {
                        members.iter().copied().for_each(&mut f);
                    }
                }
            }
        }
    }
}

/// Outcome of one disturbance draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Disturbance {
    pub index: usize,
    /// No point satisfied the bound; `index` is the nearest neighbour instead.
    pub fallback: bool,
}

/// Draws disturbance partners for one point set.
#[derive(Debug, Clone)]
pub struct DisturbanceSampler<'a> {
    points: &'a [Vec3],
    grid: SpatialGrid,
}

impl<'a> DisturbanceSampler<'a> {
    /// `cell_size` is normally `1/ε`, the smallest radius the schedule asks for.
    pub fn new(points: &'a [Vec3], cell_size: f64) -> Result<Self> {
        if points.len() < 2 {
            return Err(config_err(format!(
                "disturbance needs at least 2 points, got {}",
                points.len()
            )));
        }
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(config_err("grid cell size must be positive"));
        }
        Ok(Self {
            points,
            grid: SpatialGrid::new(points, cell_size),
        })
    }

    /// Sorted indices `j ≠ i` with `1/‖g_i − g_j‖ > bound`.
    pub fn candidates(&self, i: usize, bound: f64) -> Vec<usize> {
        let center = self.points[i];
        let mut out = Vec::new();
        self.grid.for_each_in_box(center, 1.0 / bound, |j| {
            if j != i && satisfies(center, self.points[j], bound) {
                out.push(j);
            }
        });
        out.sort_unstable();
        out
    }

    /// Nearest other point; ties go to the lower index.
    pub fn nearest(&self, i: usize) -> Result<usize> {
        let center = self.points[i];
        let mut best: Option<(f64, usize)> = None;
        for (j, &q) in self.points.iter().enumerate() {
            if j == i {
                continue;
            }
            let d = geom::dist(center, q);
            if d < MIN_SEPARATION {
                continue;
            }
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        best.map(|(_, j)| j).ok_or(Error::DegeneratePair(i, i))
    }

    pub fn sample(&self, i: usize, bound: f64, rng: &mut Rng) -> Result<Disturbance> {
        if i >= self.points.len() {
            return Err(config_err(format!("point index {i} out of range")));
        }
        if !(bound.is_finite() && bound > 0.0) {
            return Err(config_err(format!("hardness bound must be positive, got {bound}")));
        }
        let cands = self.candidates(i, bound);
        if cands.is_empty() {
            return Ok(Disturbance {
                index: self.nearest(i)?,
                fallback: true,
            });
        }
        Ok(Disturbance {
            index: cands[rng.random_range(0..cands.len())],
            fallback: false,
        })
    }
}

#[inline]
fn satisfies(p: Vec3, q: Vec3, bound: f64) -> bool {
    let d = geom::dist(p, q);
    d >= MIN_SEPARATION && 1.0 / d > bound
}

/// One-off draw that builds its own grid with cell size `1/bound`.
pub fn sample_disturbance(i: usize, points: &[Vec3], bound: f64, rng: &mut Rng) -> Result<Disturbance> {
    if !(bound.is_finite() && bound > 0.0) {
        return Err(config_err(format!("hardness bound must be positive, got {bound}")));
    }
    DisturbanceSampler::new(points, 1.0 / bound)?.sample(i, bound, rng)
}

/// Anchors, positives and disturbance map for one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    /// Point indices in view 1.
    pub anchor_idx: Vec<usize>,
    /// Matching point indices in view 2.
    pub positive_idx: Vec<usize>,
    /// For batch slot `k`, the view-2 point whose colour replaces that of
    /// `positive_idx[k]` in the disturbed negative.
    pub disturb_map: Vec<usize>,
    pub fallback: Vec<bool>,
    pub bound: f64,
    pub iteration: usize,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.anchor_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor_idx.is_empty()
    }

    pub fn fallbacks(&self) -> usize {
        self.fallback.iter().filter(|&&f| f).count()
    }

    /// Batch slots whose positives act as undisturbed negatives of anchor `i`.
    pub fn undisturbed_negatives(&self, i: usize) -> Vec<usize> {
        (0..self.len()).filter(|&j| j != i).collect()
    }

    /// Batch slots of the disturbed negatives; shared by every anchor,
    /// including the anchor's own slot.
    pub fn disturbed_negatives(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// Samples `batch_size` correspondences without replacement and a disturbance
/// partner for each, under the bound of iteration `iteration`.
pub fn build_pair_batch(
    points1: &[Vec3],
    corr: &[(usize, usize)],
    iteration: usize,
    batch_size: usize,
    schedule: &HardnessSchedule,
    rng: &mut Rng,
) -> Result<PairBatch> {
    schedule.validate()?;
    let sampler = DisturbanceSampler::new(points1, 1.0 / schedule.epsilon)?;
    build_pair_batch_with(&sampler, corr, iteration, batch_size, schedule, rng)
}

/// As [`build_pair_batch`] with a prebuilt sampler over the view-1 points.
pub fn build_pair_batch_with(
    sampler: &DisturbanceSampler<'_>,
    corr: &[(usize, usize)],
    iteration: usize,
    batch_size: usize,
    schedule: &HardnessSchedule,
    rng: &mut Rng,
) -> Result<PairBatch> {
    if batch_size < 2 {
        return Err(config_err(format!("batch size must be >= 2, got {batch_size}")));
    }
    if batch_size > corr.len() {
        return Err(config_err(format!(
            "batch size {batch_size} exceeds {} correspondences",
            corr.len()
        )));
    }
    let bound = hardness_bound(iteration, schedule);
    let picks = index::sample(rng, corr.len(), batch_size);
    let mut batch = PairBatch {
        anchor_idx: Vec::with_capacity(batch_size),
        positive_idx: Vec::with_capacity(batch_size),
        disturb_map: Vec::with_capacity(batch_size),
        fallback: Vec::with_capacity(batch_size),
        bound,
        iteration,
    };
    for p in picks.iter() {
        let (a, b) = corr[p];
        let d = sampler.sample(a, bound, rng)?;
        batch.anchor_idx.push(a);
        batch.positive_idx.push(b);
        batch.disturb_map.push(d.index);
        batch.fallback.push(d.fallback);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn hardness_examples() {
        assert_eq!(hardness([0.0; 3], [0.0, 0.0, 2.0]).unwrap(), 0.5);
        assert!((hardness([0.0; 3], [3.0, 4.0, 0.0]).unwrap() - 0.2).abs() < 1e-15);
        assert!(matches!(hardness([1.0; 3], [1.0; 3]), Err(Error::DegeneratePair(..))));
    }

    #[test]
    fn bound_examples() {
        let s = HardnessSchedule {
            h0: 0.5,
            slope: 0.01,
            epsilon: 10.0,
        };
        assert_eq!(hardness_bound(0, &s), 0.5);
        assert_eq!(hardness_bound(2000, &s), 10.0);
        let mut prev = 0.0;
        for k in 0..3000 {
            let b = hardness_bound(k, &s);
            assert!(b >= prev && b <= s.epsilon);
            prev = b;
        }
        let k = s.ceiling_iteration().unwrap();
        assert_eq!(hardness_bound(k, &s), 10.0);
        assert!(hardness_bound(k - 1, &s) < 10.0);
    }

    #[test]
    fn easy_and_hard_are_constant() {
        let s = HardnessSchedule::default_for(1.0, 100);
        for k in [0, 50, 100] {
            assert_eq!(hardness_bound(k, &s.easy()), s.h0);
            assert_eq!(hardness_bound(k, &s.hard()), s.epsilon);
        }
    }

    #[test]
    fn schedule_validation() {
        let bad = HardnessSchedule {
            h0: 2.0,
            slope: 0.0,
            epsilon: 1.0,
        };
        assert!(bad.validate().is_err());
        assert!(HardnessSchedule { h0: 0.0, ..bad }.validate().is_err());
    }

    fn line() -> Vec<Vec3> {
        vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 5.0]]
    }

    #[test]
    fn single_candidate_is_returned() {
        let mut r = rng::rng(1);
        for _ in 0..20 {
            let d = sample_disturbance(0, &line(), 0.5, &mut r).unwrap();
            assert_eq!(
                d,
                Disturbance {
                    index: 1,
                    fallback: false
                }
            );
        }
    }

    #[test]
    fn empty_candidates_fall_back_to_nearest() {
        let pts = vec![[0.0; 3], [0.5, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let mut r = rng::rng(1);
        let d = sample_disturbance(0, &pts, 10.0, &mut r).unwrap();
        assert_eq!(
            d,
            Disturbance {
                index: 1,
                fallback: true
            }
        );
    }

    #[test]
    fn too_few_points_rejected() {
        let mut r = rng::rng(1);
        assert!(sample_disturbance(0, &[[0.0; 3]], 1.0, &mut r).is_err());
    }

    #[test]
    fn batch_counts_and_constraint() {
        let pts: Vec<Vec3> = (0..50).map(|i| [i as f64 * 0.1, 0.0, 0.0]).collect();
        let corr: Vec<_> = (0..50).map(|i| (i, i)).collect();
        let s = HardnessSchedule::default_for(5.0, 10);
        let mut r = rng::rng(4);
        let b = build_pair_batch(&pts, &corr, 3, 2, &s, &mut r).unwrap();
        assert_eq!(b.undisturbed_negatives(0).len(), 1);
        assert_eq!(b.disturbed_negatives().len(), 2);
        for k in 0..b.len() {
            assert_ne!(b.disturb_map[k], b.anchor_idx[k]);
        }
        assert!(build_pair_batch(&pts, &corr[..3], 0, 4, &s, &mut r).is_err());
        assert!(build_pair_batch(&pts, &corr, 0, 1, &s, &mut r).is_err());
    }

    #[test]
    fn batches_are_deterministic() {
        let pts: Vec<Vec3> = (0..64)
            .map(|i| [(i % 8) as f64 * 0.1, (i / 8) as f64 * 0.1, 0.0])
            .collect();
        let corr: Vec<_> = (0..64).map(|i| (i, i)).collect();
        let s = HardnessSchedule::default_for(1.0, 100);
        let a = build_pair_batch(&pts, &corr, 40, 16, &s, &mut rng::rng(3)).unwrap();
        let b = build_pair_batch(&pts, &corr, 40, 16, &s, &mut rng::rng(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grid_candidates_match_brute_force_for_large_radius() {
        let mut r = rng::rng(12);
        let pts: Vec<Vec3> = (0..300)
            .map(|_| std::array::from_fn(|_| r.random_range(-1.0..1.0)))
            .collect();
        let sampler = DisturbanceSampler::new(&pts, 0.05).unwrap();
        for bound in [0.3, 1.0, 4.0, 19.0] {
            for i in [0, 17, 299] {
                let brute: Vec<usize> = (0..pts.len())
                    .filter(|&j| j != i && 1.0 / geom::dist(pts[i], pts[j]) > bound)
                    .collect();
                assert_eq!(sampler.candidates(i, bound), brute);
            }
        }
    }
}

//! Central finite-difference check of the analytic gradient of the full
//! encoder + loss composition.
//!
//! Coordinates whose perturbation flips any relu sign are skipped: the loss
//! is not differentiable across the kink, so the difference quotient is not
//! an oracle there.

use rayon::prelude::*;

use crate::augment::{make_views, AugmentConfig};
use crate::error::Result;
use crate::loss::LossConfig;
use crate::model::{EncoderParams, FusionMode};
use crate::pairing::{build_pair_batch, HardnessSchedule};
use crate::rng;
use crate::scene::{generate_scene, SceneConfig};

use super::inputs::ViewTables;
use super::objective::{batch_blocks, step_loss, Objective, TrainBranches};

pub const DELTA: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;

const CASE_TAG: u64 = 0x6C4E;

/// One (objective, fusion, loss variant) combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCase {
    pub objective: Objective,
    pub branches: TrainBranches,
    pub fusion: FusionMode,
    pub include_positive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub case: GradCase,
    pub trial: u64,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub cases: Vec<CaseResult>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.cases.iter().map(|c| c.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.cases.iter().map(|c| c.skipped).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < TOLERANCE && self.checked() > 0
    }
}

/// Checks every parameter coordinate of one random instance.
pub fn check_case(case: GradCase, trial: u64) -> Result<CaseResult> {
    let seed = rng::derive(CASE_TAG, trial);
    let scene = generate_scene(
        seed,
        &SceneConfig {
            primitives: 2,
            points_per_primitive: 40,
            extent: 1.0,
        },
    )?;
    let mut aug = AugmentConfig::for_extent(scene.extent);
    aug.image_size = 24;
    let (v1, v2, corr) = make_views(&scene, &aug, rng::derive(seed, 1))?;
    let mut r = rng::stream(seed, 2);
    let schedule = HardnessSchedule::default_for(scene.extent, 100);
    let iteration = (trial as usize * 37) % 100;
    let batch = build_pair_batch(&v1.scene.points, &corr, iteration, 4, &schedule, &mut r)?;

    let fusion = if case.objective == Objective::CrossModal {
        FusionMode::Late
    } else {
        case.fusion
    };
    let params = EncoderParams::init(fusion, 5, 4, 3, &mut r)?;
    let with_pixel = fusion.uses_pixel_branch();
    let t1 = ViewTables::new(&v1, fusion);
    let t2 = ViewTables::new(&v2, fusion);
    let blocks = batch_blocks(&t1, &t2, &v1, &v2, &batch, params.knn_k, with_pixel, true);
    let loss_cfg = LossConfig {
        tau: [0.2, 0.4, 1.0][trial as usize % 3],
        include_positive_in_denominator: case.include_positive,
    };

    let base = step_loss(&params, case.objective, case.branches, &blocks, &loss_cfg, true)?;
    let mut p = params.clone();
    let mut res = CaseResult {
        case,
        trial,
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
    };
    for j in 0..params.num_params() {
        let theta = params.get_flat(j);
        p.set_flat(j, theta + DELTA);
        let plus = step_loss(&p, case.objective, case.branches, &blocks, &loss_cfg, false)?;
        p.set_flat(j, theta - DELTA);
        let minus = step_loss(&p, case.objective, case.branches, &blocks, &loss_cfg, false)?;
        p.set_flat(j, theta);
        if plus.activations != base.activations || minus.activations != base.activations {
            res.skipped += 1;
            continue;
        }
        let fd = (plus.loss - minus.loss) / (2.0 * DELTA);
        let err = (base.grads.get_flat(j) - fd).abs() / fd.abs().max(1.0);
        res.max_rel_err = res.max_rel_err.max(err);
        res.checked += 1;
    }
    Ok(res)
}

/// `trials` instances for every fusion mode and both denominator variants
/// of the full pair-of-pairs objective.
pub fn gradcheck(trials: usize) -> Result<GradcheckReport> {
    let mut cases = Vec::new();
    for fusion in [FusionMode::Early, FusionMode::Late, FusionMode::Hybrid] {
        for include_positive in [false, true] {
            cases.push(GradCase {
                objective: Objective::P4Contrast,
                branches: TrainBranches::Joint,
                fusion,
                include_positive,
            });
        }
    }
    let jobs: Vec<(GradCase, u64)> = cases
        .iter()
        .flat_map(|&s| (0..trials as u64).map(move |t| (s, t)))
        .collect();
    let cases = jobs
        .par_iter()
        .map(|&(s, t)| check_case(s, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport { cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn other_objectives_and_separate_branches() {
        for (objective, branches, fusion) in [
            (Objective::PointContrast, TrainBranches::Joint, FusionMode::Early),
            (Objective::CrossModal, TrainBranches::Joint, FusionMode::Late),
            (Objective::P4Contrast, TrainBranches::Separate, FusionMode::Hybrid),
        ] {
            let case = GradCase {
                objective,
                branches,
                fusion,
                include_positive: false,
            };
            let r = check_case(case, 1).unwrap();
            assert!(r.checked > 0);
            assert!(r.max_rel_err < TOLERANCE, "{case:?}: {}", r.max_rel_err);
        }
    }
}

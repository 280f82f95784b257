//! The comparison experiments run by `demo` and the acceptance suite. Every
//! arm shares the default corpus and differs from the default config only by
//! the listed overrides.

use std::sync::OnceLock;

use crate::error::Result;

use super::config::TrainConfig;
use super::corpus::{Corpus, EvalSet};
use super::train::{prepare, pretrain_on, RunReport};

pub const P4CONTRAST_HYBRID: &str = "objective = p4contrast\nfusion_mode = hybrid\n";
pub const POINTCONTRAST_EARLY: &str = "objective = pointcontrast\nfusion_mode = early\n";
pub const CROSSMODAL: &str = "objective = crossmodal\n";
pub const P4CONTRAST_HARD: &str = "objective = p4contrast\nfusion_mode = hybrid\nhardness.mode = hard\n";
pub const P4CONTRAST_ROT_SCAL: &str = "objective = p4contrast\nfusion_mode = hybrid\naugment.mode = rot+scal\n";

/// Default config with `overrides` applied and the run seed set.
pub fn arm_config(overrides: &str, seed: u64) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_text(overrides)?;
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

fn default_data() -> Result<&'static (Corpus, EvalSet)> {
    static DATA: OnceLock<(Corpus, EvalSet)> = OnceLock::new();
    if let Some(d) = DATA.get() {
        return Ok(d);
    }
    let d = prepare(&TrainConfig::default())?;
    Ok(DATA.get_or_init(|| d))
}

/// Pretrains one arm on the default corpus.
pub fn run_arm(overrides: &str, seed: u64) -> Result<RunReport> {
    let cfg = arm_config(overrides, seed)?;
    let defaults = TrainConfig::default();
    if cfg.corpus == defaults.corpus && cfg.knn_k == defaults.knn_k {
        let (corpus, eval) = default_data()?;
        Ok(pretrain_on(&cfg, corpus, eval)?.1)
    } else {
        let (corpus, eval) = prepare(&cfg)?;
        Ok(pretrain_on(&cfg, &corpus, &eval)?.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionOrdering {
    pub p4contrast: f64,
    pub pointcontrast: f64,
    /// Probe on the untrained hybrid encoder.
    pub scratch: f64,
}

pub fn fusion_ordering(seed: u64) -> Result<FusionOrdering> {
    let p4 = run_arm(P4CONTRAST_HYBRID, seed)?;
    let pc = run_arm(POINTCONTRAST_EARLY, seed)?;
    Ok(FusionOrdering {
        p4contrast: p4.probe.miou,
        pointcontrast: pc.probe.miou,
        scratch: p4.scratch_probe.miou,
    })
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

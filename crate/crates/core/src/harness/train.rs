//! Pretraining loop and run report.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::make_views;
use crate::error::{Error, Result};
use crate::io;
use crate::loss::{poly_lr, sgd_step, OptState};
use crate::model::{EncoderParams, FeatureMatrix};
use crate::pairing::{build_pair_batch_with, hardness_bound, DisturbanceSampler};
use crate::rng;

use super::collapse::collapse_metric;
use super::config::TrainConfig;
use super::corpus::{Corpus, EvalSet};
use super::inputs::ViewTables;
use super::objective::{batch_blocks, step_loss, Objective};
use super::probe::{finetune_encoder, probe_encoder, ProbeResult};

const INIT_TAG: u64 = 0x1A17;
const BATCH_TAG: u64 = 0xBA7C;
const COLLAPSE_TAG: u64 = 0xC011;
/// Fresh renders tried when a view pair has fewer correspondences than the batch.
const VIEW_RETRIES: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapsePoint {
    /// Number of completed iterations.
    pub iteration: usize,
    pub value: f64,
}

/// Everything a run reports. Serialised reports omit the wall time so that
/// re-running a fingerprint reproduces the file byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub fingerprint: String,
    pub config: String,
    pub iterations: usize,
    pub loss: Vec<f64>,
    pub lr: Vec<f64>,
    pub hardness_bound: Vec<f64>,
    pub fallbacks: Vec<usize>,
    pub fallback_total: usize,
    pub collapse: Vec<CollapsePoint>,
    pub probe: ProbeResult,
    /// Probe on the untrained encoder: the from-scratch control.
    pub scratch_probe: ProbeResult,
    pub finetune: Option<ProbeResult>,
    pub scratch_finetune: Option<ProbeResult>,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl RunReport {
    pub fn final_collapse(&self) -> Option<f64> {
        self.collapse.last().map(|c| c.value)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Per-iteration metrics as CSV: `iter,loss,lr,hardness_bound,collapse,fallbacks`.
    /// `collapse` is empty except at checkpoints.
    pub fn write_metrics_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iter", "loss", "lr", "hardness_bound", "collapse", "fallbacks"])?;
        let mut cp = self.collapse.iter().peekable();
        for k in 0..self.loss.len() {
            let collapse = match cp.peek() {
                Some(c) if c.iteration == k + 1 => format!("{:?}", cp.next().unwrap().value),
                _ => String::new(),
            };
            out.write_record([
                k.to_string(),
                format!("{:?}", self.loss[k]),
                format!("{:?}", self.lr[k]),
                format!("{:?}", self.hardness_bound[k]),
                collapse,
                self.fallbacks[k].to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes `report.json` and `metrics.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json())?;
        self.write_metrics_csv(std::fs::File::create(dir.join("metrics.csv"))?)
    }
}

/// Fixed rows of the stacked test features on which collapse is measured.
fn collapse_rows(eval: &EvalSet, cfg: &TrainConfig) -> Vec<usize> {
    let total: usize = eval.test.iter().map(|s| s.queries.len()).sum();
    let m = cfg.collapse_samples.min(total);
    let mut r = rng::stream(cfg.corpus.seed, COLLAPSE_TAG);
    let mut idx = index::sample(&mut r, total, m).into_vec();
    idx.sort_unstable();
    idx
}

fn measure_collapse(params: &EncoderParams, eval: &EvalSet, rows: &[usize]) -> Result<f64> {
    let (f, _) = eval.split_features(params, true)?;
    collapse_metric(&f.select_rows(rows))
}

/// Freshly initialised encoder of a run.
pub fn init_params(cfg: &TrainConfig) -> Result<EncoderParams> {
    EncoderParams::init(
        cfg.effective_fusion(),
        cfg.hidden,
        cfg.dim,
        cfg.knn_k,
        &mut rng::stream(cfg.seed, INIT_TAG),
    )
}

/// Seed of the batch drawn at iteration `k`.
pub fn batch_seed(cfg: &TrainConfig, k: usize) -> u64 {
    rng::derive(rng::derive(cfg.seed, BATCH_TAG), k as u64)
}

/// Generates the corpus and evaluation renders a config describes.
pub fn prepare(cfg: &TrainConfig) -> Result<(Corpus, EvalSet)> {
    cfg.validate()?;
    let corpus = Corpus::generate(&cfg.corpus)?;
    let eval = EvalSet::new(&corpus, cfg.corpus.image_size, cfg.knn_k);
    Ok((corpus, eval))
}

pub fn pretrain(cfg: &TrainConfig) -> Result<(EncoderParams, RunReport)> {
    let (corpus, eval) = prepare(cfg)?;
    pretrain_on(cfg, &corpus, &eval)
}

/// Runs pretraining on a prepared corpus, then the probes.
pub fn pretrain_on(cfg: &TrainConfig, corpus: &Corpus, eval: &EvalSet) -> Result<(EncoderParams, RunReport)> {
    cfg.validate()?;
    if eval.knn_k != cfg.knn_k {
        return Err(Error::Shape("evaluation set built for a different knn_k".into()));
    }
    let start = Instant::now();
    let init = init_params(cfg)?;
    let mut params = init.clone();
    let mut opt = OptState::new(&params, &cfg.opt())?;
    let schedule = cfg.schedule();
    let aug = cfg.augment();
    let with_pixel = params.fusion.uses_pixel_branch();
    let with_disturbed = cfg.objective == Objective::P4Contrast;
    let rows = collapse_rows(eval, cfg);
    let scratch = probe_encoder(&init, eval, &cfg.probe)?;

    let n = cfg.iterations;
    let mut report = RunReport {
        fingerprint: cfg.fingerprint(),
        config: cfg.canonical(),
        iterations: n,
        loss: Vec::with_capacity(n),
        lr: Vec::with_capacity(n),
        hardness_bound: Vec::with_capacity(n),
        fallbacks: Vec::with_capacity(n),
        fallback_total: 0,
        collapse: Vec::new(),
        probe: scratch.clone(),
        scratch_probe: scratch,
        finetune: None,
        scratch_finetune: None,
        wall_time_s: 0.0,
    };

    for k in 0..n {
        let seed = batch_seed(cfg, k);
        let mut r = rng::rng(seed);
        let scene = &corpus.train[r.random_range(0..corpus.train.len())];
        let mut attempt = 0;
        let (v1, v2, corr) = loop {
            let views = make_views(scene, &aug, rng::derive(seed, 1 + attempt))?;
            attempt += 1;
            if views.2.len() >= cfg.batch_size || attempt == VIEW_RETRIES {
                break views;
            }
        };
        let sampler = DisturbanceSampler::new(&v1.scene.points, 1.0 / schedule.epsilon)?;
        let batch = build_pair_batch_with(&sampler, &corr, k, cfg.batch_size, &schedule, &mut r)?;
        let t1 = ViewTables::new(&v1, params.fusion);
        let t2 = ViewTables::new(&v2, params.fusion);
        let blocks = batch_blocks(&t1, &t2, &v1, &v2, &batch, cfg.knn_k, with_pixel, with_disturbed);
        let nan = Error::NonFiniteLoss {
            iteration: k,
            batch_seed: seed,
        };
        let out = match step_loss(&params, cfg.objective, cfg.train_branches, &blocks, &cfg.loss, true) {
            Err(Error::DegenerateFeature { norm, .. }) if !norm.is_finite() => return Err(nan),
            r => r?,
        };
        if !out.loss.is_finite() {
            return Err(nan);
        }
        report.lr.push(poly_lr(k, &opt)?);
        sgd_step(&mut params, &out.grads, &mut opt, k)?;
        report.loss.push(out.loss);
        report.hardness_bound.push(hardness_bound(k, &schedule));
        report.fallbacks.push(batch.fallbacks());
        report.fallback_total += batch.fallbacks();

        let done = k + 1;
        if done % cfg.collapse_every.max(1) == 0 || done == n {
            report.collapse.push(CollapsePoint {
                iteration: done,
                value: measure_collapse(&params, eval, &rows)?,
            });
        }
    }

    report.probe = probe_encoder(&params, eval, &cfg.probe)?;
    if cfg.probe.finetune_encoder {
        report.finetune = Some(finetune_encoder(&params, eval, &cfg.probe)?);
        report.scratch_finetune = Some(finetune_encoder(&init, eval, &cfg.probe)?);
    }
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((params, report))
}

/// Writes checkpoint, report, metrics and corpus of a finished run.
pub fn save_run(dir: &Path, params: &EncoderParams, report: &RunReport, corpus: &Corpus) -> Result<()> {
    report.save(dir)?;
    io::save_checkpoint(&dir.join("checkpoint.bin"), params)?;
    corpus.save(&dir.join("corpus"))
}

/// Stacked test features of an encoder; exposed for experiments.
pub fn test_features(params: &EncoderParams, eval: &EvalSet) -> Result<FeatureMatrix> {
    Ok(eval.split_features(params, true)?.0)
}

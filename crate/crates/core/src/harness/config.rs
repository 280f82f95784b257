//! Flat `key = value` configuration.
//!
//! Blank lines and `#` comments are ignored. Every key must be one of
//! [`KEYS`]; anything else is an error so typos never pass silently.
//! Values left unset fall back to defaults, some of which are derived from
//! other settings (jitter from the extent, the hardness schedule from the
//! extent and run length, `opt.total_iters` from `iterations`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::augment::{AugmentConfig, AugmentMode};
use crate::error::{config_err, Error, Result};
use crate::loss::{LossConfig, OptConfig};
use crate::model::FusionMode;
use crate::pairing::HardnessSchedule;
use crate::scene::SceneConfig;

use super::objective::{Objective, TrainBranches};

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "objective",
    "fusion_mode",
    "train_branches",
    "seed",
    "iterations",
    "batch_size",
    "augment.mode",
    "augment.sigma_xyz",
    "augment.sigma_rgb",
    "augment.rot_range",
    "augment.scale_range",
    "augment.trans_range",
    "augment.image_size",
    "hardness.mode",
    "hardness.h0",
    "hardness.slope",
    "hardness.epsilon",
    "loss.tau",
    "loss.include_positive",
    "opt.base_lr",
    "opt.momentum",
    "opt.weight_decay",
    "opt.power",
    "opt.total_iters",
    "model.hidden",
    "model.dim",
    "model.knn_k",
    "corpus.seed",
    "corpus.train_scenes",
    "corpus.test_scenes",
    "corpus.primitives",
    "corpus.points_per_primitive",
    "corpus.extent",
    "probe.steps",
    "probe.lr",
    "probe.standardize",
    "probe.finetune_encoder",
    "probe.finetune_steps",
    "probe.finetune_lr",
    "report.collapse_every",
    "report.collapse_samples",
];

/// Hardness bound policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HardnessMode {
    /// Clipped linear schedule.
    Progressive,
    /// Bound fixed at `h0`.
    Easy,
    /// Bound fixed at `ε`.
    Hard,
}

impl FromStr for HardnessMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "progressive" => Ok(HardnessMode::Progressive),
            "easy" => Ok(HardnessMode::Easy),
            "hard" => Ok(HardnessMode::Hard),
            _ => Err(config_err(format!("unknown hardness mode '{s}'"))),
        }
    }
}

impl std::fmt::Display for HardnessMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HardnessMode::Progressive => "progressive",
            HardnessMode::Easy => "easy",
            HardnessMode::Hard => "hard",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub scene: SceneConfig,
    pub image_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_scenes: 32,
            test_scenes: 8,
            scene: SceneConfig::default(),
            image_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub standardize: bool,
    pub finetune_encoder: bool,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.1,
            standardize: false,
            finetune_encoder: false,
            finetune_steps: 100,
            finetune_lr: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub fusion_mode: FusionMode,
    pub train_branches: TrainBranches,
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub augment_mode: AugmentMode,
    pub sigma_xyz: Option<f64>,
    pub sigma_rgb: f64,
    pub rot_range: f64,
    pub scale_range: f64,
    pub trans_range: Option<f64>,
    pub hardness_mode: HardnessMode,
    pub h0: Option<f64>,
    pub slope: Option<f64>,
    pub epsilon: Option<f64>,
    pub loss: LossConfig,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub total_iters: Option<usize>,
    pub hidden: usize,
    pub dim: usize,
    pub knn_k: usize,
    pub corpus: CorpusConfig,
    pub probe: ProbeConfig,
    pub collapse_every: usize,
    pub collapse_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = OptConfig::default();
        Self {
            objective: Objective::P4Contrast,
            fusion_mode: FusionMode::Hybrid,
            train_branches: TrainBranches::Joint,
            seed: 1,
            iterations: 2000,
            batch_size: 16,
            augment_mode: AugmentMode::jitter_only(),
            sigma_xyz: None,
            sigma_rgb: 0.05,
            rot_range: std::f64::consts::PI,
            scale_range: 0.2,
            trans_range: None,
            hardness_mode: HardnessMode::Progressive,
            h0: None,
            slope: None,
            epsilon: None,
            loss: LossConfig::default(),
            base_lr: opt.base_lr,
            momentum: opt.momentum,
            weight_decay: opt.weight_decay,
            power: opt.power,
            total_iters: None,
            hidden: 32,
            dim: 16,
            knn_k: 8,
            corpus: CorpusConfig::default(),
            probe: ProbeConfig::default(),
            collapse_every: 250,
            collapse_samples: 512,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| config_err(format!("bad value for {key}: '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(config_err(format!("bad boolean for {key}: '{v}'"))),
    }
}

/// Parses `key = value` lines into an ordered list of pairs.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(format!("line {}: expected 'key = value'", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl TrainConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "objective" => self.objective = v.parse()?,
            "fusion_mode" => self.fusion_mode = v.parse()?,
            "train_branches" => self.train_branches = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "augment.mode" => self.augment_mode = v.parse()?,
            "augment.sigma_xyz" => self.sigma_xyz = Some(parse(key, v)?),
            "augment.sigma_rgb" => self.sigma_rgb = parse(key, v)?,
            "augment.rot_range" => self.rot_range = parse(key, v)?,
            "augment.scale_range" => self.scale_range = parse(key, v)?,
            "augment.trans_range" => self.trans_range = Some(parse(key, v)?),
            "augment.image_size" => self.corpus.image_size = parse(key, v)?,
            "hardness.mode" => self.hardness_mode = v.parse()?,
            "hardness.h0" => self.h0 = Some(parse(key, v)?),
            "hardness.slope" => self.slope = Some(parse(key, v)?),
            "hardness.epsilon" => self.epsilon = Some(parse(key, v)?),
            "loss.tau" => self.loss.tau = parse(key, v)?,
            "loss.include_positive" => self.loss.include_positive_in_denominator = parse_bool(key, v)?,
            "opt.base_lr" => self.base_lr = parse(key, v)?,
            "opt.momentum" => self.momentum = parse(key, v)?,
            "opt.weight_decay" => self.weight_decay = parse(key, v)?,
            "opt.power" => self.power = parse(key, v)?,
            "opt.total_iters" => self.total_iters = Some(parse(key, v)?),
            "model.hidden" => self.hidden = parse(key, v)?,
            "model.dim" => self.dim = parse(key, v)?,
            "model.knn_k" => self.knn_k = parse(key, v)?,
            "corpus.seed" => self.corpus.seed = parse(key, v)?,
            "corpus.train_scenes" => self.corpus.train_scenes = parse(key, v)?,
            "corpus.test_scenes" => self.corpus.test_scenes = parse(key, v)?,
            "corpus.primitives" => self.corpus.scene.primitives = parse(key, v)?,
            "corpus.points_per_primitive" => self.corpus.scene.points_per_primitive = parse(key, v)?,
            "corpus.extent" => self.corpus.scene.extent = parse(key, v)?,
            "probe.steps" => self.probe.steps = parse(key, v)?,
            "probe.lr" => self.probe.lr = parse(key, v)?,
            "probe.standardize" => self.probe.standardize = parse_bool(key, v)?,
            "probe.finetune_encoder" => self.probe.finetune_encoder = parse_bool(key, v)?,
            "probe.finetune_steps" => self.probe.finetune_steps = parse(key, v)?,
            "probe.finetune_lr" => self.probe.finetune_lr = parse(key, v)?,
            "report.collapse_every" => self.collapse_every = parse(key, v)?,
            "report.collapse_samples" => self.collapse_samples = parse(key, v)?,
            _ => return Err(config_err(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Effective fusion mode: the cross-modal objective always trains
    /// single-modality branches and concatenates them.
    pub fn effective_fusion(&self) -> FusionMode {
        match self.objective {
            Objective::CrossModal => FusionMode::Late,
            _ => self.fusion_mode,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        let e = self.corpus.scene.extent;
        let mut a = AugmentConfig::for_extent(e);
        a.mode = self.augment_mode.clone();
        if let Some(s) = self.sigma_xyz {
            a.sigma_xyz = s;
        }
        a.sigma_rgb = self.sigma_rgb;
        a.rot_range = self.rot_range;
        a.scale_range = self.scale_range;
        if let Some(t) = self.trans_range {
            a.trans_range = t;
        }
        a.image_size = self.corpus.image_size;
        a
    }

    /// The configured progressive schedule before the hardness mode is applied.
    pub fn base_schedule(&self) -> HardnessSchedule {
        let d = HardnessSchedule::default_for(self.corpus.scene.extent, self.iterations);
        let h0 = self.h0.unwrap_or(d.h0);
        let epsilon = self.epsilon.unwrap_or(d.epsilon);
        let ramp = (0.8 * self.iterations as f64).max(1.0);
        let slope = self.slope.unwrap_or(if self.h0.is_some() || self.epsilon.is_some() {
            ((epsilon - h0) / ramp).max(0.0)
        } else {
            d.slope
        });
        HardnessSchedule { h0, slope, epsilon }
    }

    /// Schedule actually used for the run.
    pub fn schedule(&self) -> HardnessSchedule {
        let s = self.base_schedule();
        match self.hardness_mode {
            HardnessMode::Progressive => s,
            HardnessMode::Easy => s.easy(),
            HardnessMode::Hard => s.hard(),
        }
    }

    pub fn opt(&self) -> OptConfig {
        OptConfig {
            base_lr: self.base_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            power: self.power,
            total_iters: self.total_iters.unwrap_or(self.iterations).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.scene.validate()?;
        if self.corpus.train_scenes == 0 || self.corpus.test_scenes == 0 {
            return Err(config_err("corpus needs at least one train and one test scene"));
        }
        self.augment().validate()?;
        let base = self.base_schedule();
        base.validate()?;
        if base.h0 >= base.epsilon {
            return Err(config_err(format!(
                "hardness.h0 ({}) must be < hardness.epsilon ({})",
                base.h0, base.epsilon
            )));
        }
        self.loss.validate()?;
        self.opt().validate()?;
        if self.total_iters.is_some_and(|t| t < self.iterations) {
            return Err(config_err("opt.total_iters must be >= iterations"));
        }
        if self.batch_size < 2 {
            return Err(config_err("batch_size must be >= 2"));
        }
        if self.hidden < 4 || self.dim < 4 || self.knn_k < 1 {
            return Err(config_err(
                "model.hidden >= 4, model.dim >= 4, model.knn_k >= 1 required",
            ));
        }
        if self.probe.steps == 0 || !(self.probe.lr > 0.0) {
            return Err(config_err("probe.steps >= 1 and probe.lr > 0 required"));
        }
        if self.collapse_samples < 2 {
            return Err(config_err("report.collapse_samples must be >= 2"));
        }
        Ok(())
    }

    /// Canonical text of every effective setting, one `key = value` per line
    /// in [`KEYS`] order. Parsing it back yields the same effective config.
    pub fn canonical(&self) -> String {
        let a = self.augment();
        let s = self.base_schedule();
        let o = self.opt();
        let mut m: BTreeMap<&str, String> = BTreeMap::new();
        m.insert("objective", self.objective.to_string());
        m.insert("fusion_mode", self.fusion_mode.to_string());
        m.insert("train_branches", self.train_branches.to_string());
        m.insert("seed", self.seed.to_string());
        m.insert("iterations", self.iterations.to_string());
        m.insert("batch_size", self.batch_size.to_string());
        m.insert("augment.mode", a.mode.to_string());
        m.insert("augment.sigma_xyz", fmt_f(a.sigma_xyz));
        m.insert("augment.sigma_rgb", fmt_f(a.sigma_rgb));
        m.insert("augment.rot_range", fmt_f(a.rot_range));
        m.insert("augment.scale_range", fmt_f(a.scale_range));
        m.insert("augment.trans_range", fmt_f(a.trans_range));
        m.insert("augment.image_size", a.image_size.to_string());
        m.insert("hardness.mode", self.hardness_mode.to_string());
        m.insert("hardness.h0", fmt_f(s.h0));
        m.insert("hardness.slope", fmt_f(s.slope));
        m.insert("hardness.epsilon", fmt_f(s.epsilon));
        m.insert("loss.tau", fmt_f(self.loss.tau));
        m.insert(
            "loss.include_positive",
            self.loss.include_positive_in_denominator.to_string(),
        );
        m.insert("opt.base_lr", fmt_f(o.base_lr));
        m.insert("opt.momentum", fmt_f(o.momentum));
        m.insert("opt.weight_decay", fmt_f(o.weight_decay));
        m.insert("opt.power", fmt_f(o.power));
        m.insert("opt.total_iters", o.total_iters.to_string());
        m.insert("model.hidden", self.hidden.to_string());
        m.insert("model.dim", self.dim.to_string());
        m.insert("model.knn_k", self.knn_k.to_string());
        m.insert("corpus.seed", self.corpus.seed.to_string());
        m.insert("corpus.train_scenes", self.corpus.train_scenes.to_string());
        m.insert("corpus.test_scenes", self.corpus.test_scenes.to_string());
        m.insert("corpus.primitives", self.corpus.scene.primitives.to_string());
        m.insert(
            "corpus.points_per_primitive",
            self.corpus.scene.points_per_primitive.to_string(),
        );
        m.insert("corpus.extent", fmt_f(self.corpus.scene.extent));
        m.insert("probe.steps", self.probe.steps.to_string());
        m.insert("probe.lr", fmt_f(self.probe.lr));
        m.insert("probe.standardize", self.probe.standardize.to_string());
        m.insert("probe.finetune_encoder", self.probe.finetune_encoder.to_string());
        m.insert("probe.finetune_steps", self.probe.finetune_steps.to_string());
        m.insert("probe.finetune_lr", fmt_f(self.probe.finetune_lr));
        m.insert("report.collapse_every", self.collapse_every.to_string());
        m.insert("report.collapse_samples", self.collapse_samples.to_string());
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", m[k]);
        }
        out
    }

    /// SHA-256 of the canonical text, first 16 hex digits.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Shortest representation that parses back to the same `f64`.
fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.base_lr, 0.8);
        assert_eq!(c.weight_decay, 1e-4);
        assert_eq!(c.power, 0.9);
        let s = c.schedule();
        assert_eq!(s.h0, 1.0);
        assert_eq!(s.epsilon, 20.0);
        assert_eq!(crate::pairing::hardness_bound(1600, &s), 20.0);
        assert!(crate::pairing::hardness_bound(1599, &s) < 20.0);
    }

    #[test]
    fn parses_keys_and_comments() {
        let c = TrainConfig::from_text(
            "# run\nobjective = pointcontrast\nfusion_mode = early # inline\nloss.tau = 0.2\n\
             hardness.mode = hard\naugment.mode = rot+scal\nloss.include_positive = true\n",
        )
        .unwrap();
        assert_eq!(c.objective, Objective::PointContrast);
        assert_eq!(c.fusion_mode, FusionMode::Early);
        assert_eq!(c.loss.tau, 0.2);
        assert!(c.loss.include_positive_in_denominator);
        assert_eq!(c.schedule().h0, c.schedule().epsilon);
        assert_eq!(c.augment().mode.to_string(), "rot+scal");
    }

    #[test]
    fn unknown_key_is_an_error() {
        let e = TrainConfig::from_text("loss.taw = 0.3\n").unwrap_err();
        assert!(e.to_string().contains("loss.taw"));
        assert!(TrainConfig::from_text("no equals sign\n").is_err());
        assert!(TrainConfig::from_text("seed = abc\n").is_err());
    }

    #[test]
    fn h0_must_stay_below_epsilon() {
        assert!(TrainConfig::from_text("hardness.h0 = 5\nhardness.epsilon = 5\n").is_err());
    }

    #[test]
    fn canonical_round_trips_and_fingerprints() {
        let c = TrainConfig::from_text("seed = 9\naugment.mode = mvr\n").unwrap();
        let back = TrainConfig::from_text(&c.canonical()).unwrap();
        assert_eq!(back.canonical(), c.canonical());
        assert_eq!(back.fingerprint(), c.fingerprint());
        let other = TrainConfig::from_text("seed = 10\naugment.mode = mvr\n").unwrap();
        assert_ne!(other.fingerprint(), c.fingerprint());
        assert_eq!(c.fingerprint().len(), 16);
    }
}

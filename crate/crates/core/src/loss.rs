//! Pair InfoNCE loss and the optimiser.
//!
//! For anchors `a_i`, positives `p_i` and disturbed negatives `q_k`:
//!
//! ```text
//! L = −Σ_i log( exp(a_i·p_i/τ) / ( Σ_{j≠i} exp(a_i·p_j/τ) + Σ_k exp(a_i·q_k/τ) ) )
//! ```
//!
//! The positive is not part of the denominator unless
//! [`LossConfig::include_positive_in_denominator`] is set, which gives the
//! usual InfoNCE form. The disturbed sum may be empty, which recovers the
//! point-level loss of the `pointcontrast` objective.

use crate::error::{config_err, Error, Result};
use crate::model::{dot, EncoderParams, FeatureMatrix};

/// Tolerance on `|‖row‖ − 1|` for loss inputs.
pub const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub include_positive_in_denominator: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.4,
            include_positive_in_denominator: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(config_err(format!("loss.tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_anchors: FeatureMatrix,
    pub grad_positives: FeatureMatrix,
    pub grad_disturbed: Option<FeatureMatrix>,
}

fn check_inputs(
    anchors: &FeatureMatrix,
    positives: &FeatureMatrix,
    disturbed: Option<&FeatureMatrix>,
    cfg: &LossConfig,
) -> Result<()> {
    cfg.validate()?;
    let b = anchors.rows;
    if b == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if positives.rows != b || positives.cols != anchors.cols {
        return Err(Error::Shape(format!(
            "anchors {}x{} vs positives {}x{}",
            b, anchors.cols, positives.rows, positives.cols
        )));
    }
    let n_dist = disturbed.map_or(0, |d| d.rows);
    if let Some(d) = disturbed {
        if d.cols != anchors.cols {
            return Err(Error::Shape(format!("disturbed width {} vs {}", d.cols, anchors.cols)));
        }
    }
    if b - 1 + n_dist == 0 && !cfg.include_positive_in_denominator {
        return Err(Error::Contract("denominator has no terms".into()));
    }
    for m in [Some(anchors), Some(positives), disturbed].into_iter().flatten() {
        m.check_unit(UNIT_TOL)?;
    }
    Ok(())
}

/// Stabilised loss with exact gradients for every feature block.
pub fn pair_info_nce(
    anchors: &FeatureMatrix,
    positives: &FeatureMatrix,
    disturbed: Option<&FeatureMatrix>,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    check_inputs(anchors, positives, disturbed, cfg)?;
    let b = anchors.rows;
    let dim = anchors.cols;
    let inv_tau = 1.0 / cfg.tau;
    let n_dist = disturbed.map_or(0, |d| d.rows);

    let mut ga = FeatureMatrix::zeros(b, dim);
    let mut gp = FeatureMatrix::zeros(b, dim);
    let mut gd = disturbed.map(|d| FeatureMatrix::zeros(d.rows, dim));

    // Logits for one anchor: positives 0..b, then disturbed b..b+n_dist.
    let mut logits = vec![0.0; b + n_dist];
    let mut weights = vec![0.0; b + n_dist];
    let mut total = 0.0;
    for i in 0..b {
        let a = anchors.row(i);
        for j in 0..b {
            logits[j] = dot(a, positives.row(j)) * inv_tau;
        }
        if let Some(d) = disturbed {
            for k in 0..n_dist {
                logits[b + k] = dot(a, d.row(k)) * inv_tau;
            }
        }
        let in_den = |t: usize| t != i || cfg.include_positive_in_denominator;
        let max = (0..b + n_dist)
            .filter(|&t| in_den(t))
            .map(|t| logits[t])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for t in 0..b + n_dist {
            weights[t] = if in_den(t) { (logits[t] - max).exp() } else { 0.0 };
            sum += weights[t];
        }
        total += max + sum.ln() - logits[i];

        // dL_i/dlogit_t = softmax weight − [t == i].
        for w in weights.iter_mut() {
            *w /= sum;
        }
        weights[i] -= 1.0;
        let gai = ga.row_mut(i);
        for j in 0..b {
            let c = weights[j] * inv_tau;
            if c == 0.0 {
                continue;
            }
            let pj = positives.row(j);
            for (g, v) in gai.iter_mut().zip(pj) {
                *g += c * v;
            }
            for (g, v) in gp.row_mut(j).iter_mut().zip(a) {
                *g += c * v;
            }
        }
        if let (Some(d), Some(gd)) = (disturbed, gd.as_mut()) {
            for k in 0..n_dist {
                let c = weights[b + k] * inv_tau;
                for (g, v) in gai.iter_mut().zip(d.row(k)) {
                    *g += c * v;
                }
                for (g, v) in gd.row_mut(k).iter_mut().zip(a) {
                    *g += c * v;
                }
            }
        }
    }

    Ok(LossOutput {
        loss: total,
        grad_anchors: ga,
        grad_positives: gp,
        grad_disturbed: gd,
    })
}

/// Direct evaluation of the loss formula with no max-subtraction, using
/// compensated summation. Slow and only meant for small instances.
pub fn loss_oracle(
    anchors: &FeatureMatrix,
    positives: &FeatureMatrix,
    disturbed: Option<&FeatureMatrix>,
    cfg: &LossConfig,
) -> Result<f64> {
    check_inputs(anchors, positives, disturbed, cfg)?;
    let sim = |x: &[f64], y: &[f64]| neumaier(x.iter().zip(y).map(|(a, b)| a * b)) / cfg.tau;
    let b = anchors.rows;
    let mut terms = Vec::with_capacity(b);
    for i in 0..b {
        let a = anchors.row(i);
        let numerator = sim(a, positives.row(i)).exp();
        let mut den = Vec::new();
        for j in 0..b {
            if j != i {
                den.push(sim(a, positives.row(j)).exp());
            }
        }
        if let Some(d) = disturbed {
            for k in 0..d.rows {
                den.push(sim(a, d.row(k)).exp());
            }
        }
        if cfg.include_positive_in_denominator {
            den.push(numerator);
        }
        terms.push(-(numerator / neumaier(den.into_iter())).ln());
    }
    Ok(neumaier(terms.into_iter()))
}

fn neumaier(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// SGD with momentum and polynomial learning-rate decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub velocity: EncoderParams,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub total_iters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub total_iters: usize,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.8,
            momentum: 0.9,
            weight_decay: 1e-4,
            power: 0.9,
            total_iters: 2000,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(config_err("opt.base_lr must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err("opt.momentum must be in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(config_err("opt.weight_decay must be >= 0"));
        }
        if !(self.power.is_finite() && self.power > 0.0) {
            return Err(config_err("opt.power must be > 0"));
        }
        if self.total_iters == 0 {
            return Err(config_err("opt.total_iters must be >= 1"));
        }
        Ok(())
    }
}

impl OptState {
    pub fn new(params: &EncoderParams, cfg: &OptConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            velocity: params.zeros_like(),
            base_lr: cfg.base_lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            power: cfg.power,
            total_iters: cfg.total_iters,
        })
    }
}

/// `base_lr · (1 − k/total)^power`.
pub fn poly_lr(k: usize, opt: &OptState) -> Result<f64> {
    if k > opt.total_iters {
        return Err(config_err(format!(
            "iteration {k} beyond total_iters {}",
            opt.total_iters
        )));
    }
    Ok(opt.base_lr * (1.0 - k as f64 / opt.total_iters as f64).powf(opt.power))
}

/// `v ← μ·v + (g + wd·θ)`, `θ ← θ − lr(k)·v`; weight decay skips biases.
pub fn sgd_step(params: &mut EncoderParams, grads: &EncoderParams, opt: &mut OptState, k: usize) -> Result<()> {
    for (name, g, _) in grads.tensors() {
        if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                iteration: k,
                detail: format!("{name}[{pos}] = {}", g[pos]),
            });
        }
    }
    let lr = poly_lr(k, opt)?;
    let (mu, wd) = (opt.momentum, opt.weight_decay);
    for (((_, theta, is_weight), (_, g, _)), (_, v, _)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(opt.velocity.tensors_mut())
    {
        let decay = if is_weight { wd } else { 0.0 };
        for ((t, gi), vi) in theta.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *vi = mu * *vi + (gi + decay * *t);
            *t -= lr * *vi;
        }
    }
    Ok(())
}

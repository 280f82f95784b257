//! Softmax linear probe on frozen features, per-class IoU, and the variant
//! that fine-tunes the encoder jointly with the probe.
//!
//! Training is full-batch gradient descent from zero weights on the features
//! as given. With `standardize` set, features are first standardised per
//! dimension with train-split statistics; dimensions with zero spread are only
//! centred.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{backward, forward, EncoderParams, FeatureMatrix, Head};

use super::config::ProbeConfig;
use super::corpus::EvalSet;
use super::inputs::{plain_block, ViewTables};

const MIN_STD: f64 = 1e-12;

/// Per-class IoU on the test split. `iou[c]` is `None` for classes excluded
/// from the mean: absent from the train split, or absent from the test split
/// and never predicted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub accuracy: f64,
    pub absent_from_train: Vec<usize>,
}

/// Per-dimension affine map `x ↦ (x − mean) · inv_std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            inv_std: vec![1.0; dim],
        }
    }

    /// Train-split statistics when `enabled`, the identity otherwise.
    pub fn for_probe(x: &FeatureMatrix, enabled: bool) -> Self {
        if enabled {
            Self::fit(x)
        } else {
            Self::identity(x.cols)
        }
    }

    pub fn fit(x: &FeatureMatrix) -> Self {
        let n = x.rows.max(1) as f64;
        let mut mean = vec![0.0; x.cols];
        for i in 0..x.rows {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; x.cols];
        for i in 0..x.rows {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std = var
            .iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > MIN_STD {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, inv_std }
    }

    pub fn apply(&self, x: &FeatureMatrix) -> FeatureMatrix {
        let mut out = x.clone();
        for i in 0..out.rows {
            for ((v, m), s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
        out
    }
}

/// Multinomial logistic regression, `logits = W·x + b`, `W` row-major C×D.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub classes: usize,
    pub dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LinearProbe {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            w: vec![0.0; classes * dim],
            b: vec![0.0; classes],
        }
    }

    fn probs(&self, x: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.b[c]
                + x.iter()
                    .zip(&self.w[c * self.dim..(c + 1) * self.dim])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
        }
        let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for o in out.iter_mut() {
            *o = (*o - m).exp();
            z += *o;
        }
        out.iter_mut().for_each(|o| *o /= z);
    }

    /// Mean cross-entropy gradient. Returns `(grad_w, grad_b, grad_x)`, where
    /// `grad_x` is the gradient with respect to the inputs when requested.
    fn gradient(&self, x: &FeatureMatrix, y: &[u32], want_x: bool) -> (Vec<f64>, Vec<f64>, Option<FeatureMatrix>) {
        let (c_n, d_n) = (self.classes, self.dim);
        let inv_n = 1.0 / x.rows as f64;
        let mut gw = vec![0.0; c_n * d_n];
        let mut gb = vec![0.0; c_n];
        let mut gx = want_x.then(|| FeatureMatrix::zeros(x.rows, d_n));
        let mut p = vec![0.0; c_n];
        for i in 0..x.rows {
            let xi = x.row(i);
            self.probs(xi, &mut p);
            p[y[i] as usize] -= 1.0;
            for c in 0..c_n {
                let g = p[c] * inv_n;
                if g == 0.0 {
                    continue;
                }
                gb[c] += g;
                let w = &self.w[c * d_n..(c + 1) * d_n];
                for d in 0..d_n {
                    gw[c * d_n + d] += g * xi[d];
                }
                if let Some(gx) = gx.as_mut() {
                    for (o, wv) in gx.row_mut(i).iter_mut().zip(w) {
                        *o += g * wv;
                    }
                }
            }
        }
        (gw, gb, gx)
    }

    fn step(&mut self, gw: &[f64], gb: &[f64], lr: f64) {
        self.w.iter_mut().zip(gw).for_each(|(w, g)| *w -= lr * g);
        self.b.iter_mut().zip(gb).for_each(|(b, g)| *b -= lr * g);
    }

    pub fn fit(x: &FeatureMatrix, y: &[u32], classes: usize, steps: usize, lr: f64) -> Self {
        let mut p = Self::zeros(classes, x.cols);
        for _ in 0..steps {
            let (gw, gb, _) = p.gradient(x, y, false);
            p.step(&gw, &gb, lr);
        }
        p
    }

    /// Arg-max class of each row, ties to the lower class.
    pub fn predict(&self, x: &FeatureMatrix) -> Vec<u32> {
        let mut p = vec![0.0; self.classes];
        (0..x.rows)
            .map(|i| {
                self.probs(x.row(i), &mut p);
                let mut best = 0;
                for c in 1..self.classes {
                    if p[c] > p[best] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect()
    }
}

fn check_labels(x: &FeatureMatrix, y: &[u32], classes: usize, split: &str) -> Result<()> {
    if x.rows != y.len() {
        return Err(Error::Shape(format!("{split}: {} rows but {} labels", x.rows, y.len())));
    }
    if x.rows == 0 {
        return Err(Error::Contract(format!("{split} split is empty")));
    }
    if let Some(&l) = y.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Contract(format!("{split}: label {l} >= {classes} classes")));
    }
    Ok(())
}

/// IoU = TP/(TP+FP+FN) per class on `truth`, averaged over included classes.
pub fn score(pred: &[u32], truth: &[u32], classes: usize, in_train: &[bool]) -> Result<ProbeResult> {
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fn_[t as usize] += 1;
        }
    }
    let iou: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let denom = tp[c] + fp[c] + fn_[c];
            (in_train[c] && denom > 0).then(|| tp[c] as f64 / denom as f64)
        })
        .collect();
    let included: Vec<f64> = iou.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(Error::Contract("no class is scoreable".into()));
    }
    Ok(ProbeResult {
        miou: included.iter().sum::<f64>() / included.len() as f64,
        accuracy: tp.iter().sum::<usize>() as f64 / truth.len().max(1) as f64,
        absent_from_train: (0..classes).filter(|&c| !in_train[c]).collect(),
        iou,
    })
}

fn present(y: &[u32], classes: usize) -> Vec<bool> {
    let mut v = vec![false; classes];
    for &l in y {
        v[l as usize] = true;
    }
    v
}

/// Trains on `(train_x, train_y)` and scores on the held-out split.
pub fn linear_probe(
    train_x: &FeatureMatrix,
    train_y: &[u32],
    test_x: &FeatureMatrix,
    test_y: &[u32],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    check_labels(train_x, train_y, classes, "train")?;
    check_labels(test_x, test_y, classes, "test")?;
    if train_x.cols != test_x.cols {
        return Err(Error::Shape("train and test feature widths differ".into()));
    }
    let st = Standardizer::for_probe(train_x, cfg.standardize);
    let probe = LinearProbe::fit(&st.apply(train_x), train_y, classes, cfg.steps, cfg.lr);
    let pred = probe.predict(&st.apply(test_x));
    score(&pred, test_y, classes, &present(train_y, classes))
}

/// Frozen-feature probe of an encoder on an evaluation set.
pub fn probe_encoder(params: &EncoderParams, eval: &EvalSet, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let (tx, ty) = eval.split_features(params, false)?;
    let (vx, vy) = eval.split_features(params, true)?;
    linear_probe(&tx, &ty, &vx, &vy, eval.num_classes, cfg)
}

/// Supervised fine-tuning: the probe is first fitted on frozen features, then
/// encoder and probe are updated jointly by full-batch gradient descent for
/// `finetune_steps` steps. Any standardisation stays fixed at its initial fit.
pub fn finetune_encoder(params: &EncoderParams, eval: &EvalSet, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let classes = eval.num_classes;
    let mut enc = params.clone();
    let (tx, ty) = eval.split_features(&enc, false)?;
    check_labels(&tx, &ty, classes, "train")?;
    let st = Standardizer::for_probe(&tx, cfg.standardize);
    let mut probe = LinearProbe::fit(&st.apply(&tx), &ty, classes, cfg.steps, cfg.lr);
    let total = tx.rows as f64;

    for _ in 0..cfg.finetune_steps {
        let mut grads = enc.zeros_like();
        let mut gw = vec![0.0; probe.w.len()];
        let mut gb = vec![0.0; probe.b.len()];
        for s in &eval.train {
            let tables = ViewTables::new(&s.view, enc.fusion);
            let block = plain_block(&tables, &s.queries, &s.nb);
            let (f, cache) = forward(&enc, &block, Head::Fused)?;
            let (w, b, gx) = probe.gradient(&st.apply(&f), &s.labels, true);
            // Per-scene means reweighted to the mean over all train rows.
            let share = f.rows as f64 / total;
            gw.iter_mut().zip(&w).for_each(|(a, v)| *a += share * v);
            gb.iter_mut().zip(&b).for_each(|(a, v)| *a += share * v);
            let mut gf = gx.expect("input gradient requested");
            for i in 0..gf.rows {
                for (g, s) in gf.row_mut(i).iter_mut().zip(&st.inv_std) {
                    *g *= s * share;
                }
            }
            backward(&enc, &cache, &gf, &mut grads)?;
        }
        if !grads.all_finite() {
            return Err(Error::NonFiniteGradient {
                iteration: 0,
                detail: "fine-tuning gradient".into(),
            });
        }
        grads.scale(-cfg.finetune_lr);
        enc.add_assign(&grads);
        probe.step(&gw, &gb, cfg.lr);
    }

    let (vx, vy) = eval.split_features(&enc, true)?;
    check_labels(&vx, &vy, classes, "test")?;
    let pred = probe.predict(&st.apply(&vx));
    score(&pred, &vy, classes, &present(&ty, classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(labels: &[u32], c: usize) -> FeatureMatrix {
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..c).map(|k| if k == l as usize { 1.0 } else { 0.0 }).collect())
            .collect();
        FeatureMatrix::from_rows(&rows)
    }

    fn labels(n: usize, c: usize) -> Vec<u32> {
        (0..n).map(|i| ((i * 7 + i / 3) % c) as u32).collect()
    }

    #[test]
    fn one_hot_features_are_perfect() {
        let (ytr, yte) = (labels(200, 8), labels(80, 8));
        let r = linear_probe(
            &one_hot(&ytr, 8),
            &ytr,
            &one_hot(&yte, 8),
            &yte,
            8,
            &ProbeConfig::default(),
        )
        .unwrap();
        assert_eq!(r.miou, 1.0);
        assert!(r.absent_from_train.is_empty());
    }

    #[test]
    fn constant_features_predict_one_class() {
        let (ytr, yte) = (labels(200, 8), labels(80, 8));
        let x = |n| FeatureMatrix::from_rows(&vec![vec![0.6, 0.8]; n]);
        let r = linear_probe(&x(200), &ytr, &x(80), &yte, 8, &ProbeConfig::default()).unwrap();
        let scored: Vec<f64> = r.iou.iter().flatten().copied().collect();
        assert_eq!(scored.iter().filter(|&&v| v > 0.0).count(), 1);
        assert!(r.miou <= 1.0 / 8.0 + 1e-12);
    }

    #[test]
    fn class_absent_from_train_is_excluded() {
        let ytr: Vec<u32> = labels(200, 8).into_iter().map(|l| if l == 5 { 4 } else { l }).collect();
        let yte = labels(80, 8);
        let r = linear_probe(
            &one_hot(&ytr, 8),
            &ytr,
            &one_hot(&yte, 8),
            &yte,
            8,
            &ProbeConfig::default(),
        )
        .unwrap();
        assert_eq!(r.absent_from_train, vec![5]);
        assert_eq!(r.iou[5], None);
        assert_eq!(r.iou.iter().flatten().count(), 7);
    }

    #[test]
    fn iou_hand_example() {
        // class 0: tp 1, fp 1, fn 1; class 1: tp 1, fp 1, fn 1.
        let r = score(&[0, 1, 0, 1], &[0, 1, 1, 0], 2, &[true, true]).unwrap();
        assert_eq!(r.iou, vec![Some(1.0 / 3.0), Some(1.0 / 3.0)]);
        assert_eq!(r.accuracy, 0.5);
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let y = labels(10, 3);
        let x = one_hot(&y, 3);
        assert!(linear_probe(&x, &y[..9], &x, &y, 3, &ProbeConfig::default()).is_err());
        assert!(linear_probe(&x, &y, &x, &y, 2, &ProbeConfig::default()).is_err());
    }
}

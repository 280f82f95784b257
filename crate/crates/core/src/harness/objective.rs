//! Pretraining objectives composed from encoder blocks and the loss.

use std::fmt;
use std::str::FromStr;

use crate::augment::View;
use crate::error::{config_err, Error, Result};
use crate::loss::{pair_info_nce, LossConfig};
use crate::model::{backward, forward, EncoderParams, FeatureMatrix, Head, SampleBlock};
use crate::pairing::PairBatch;

use super::inputs::{disturbed_block, plain_block, Neighborhoods, ViewTables};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    /// Pairs of point-pixel pairs with disturbed negatives.
    P4Contrast,
    /// Point-level contrast: undisturbed negatives only.
    PointContrast,
    /// 3D-branch features contrasted against 2D-branch features.
    CrossModal,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::P4Contrast => "p4contrast",
            Objective::PointContrast => "pointcontrast",
            Objective::CrossModal => "crossmodal",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p4contrast" => Ok(Objective::P4Contrast),
            "pointcontrast" => Ok(Objective::PointContrast),
            "crossmodal" => Ok(Objective::CrossModal),
            _ => Err(config_err(format!("unknown objective '{s}'"))),
        }
    }
}

/// Whether the two branches are contrasted through the fused output or each
/// on its own output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainBranches {
    Joint,
    Separate,
}

impl fmt::Display for TrainBranches {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainBranches::Joint => "joint",
            TrainBranches::Separate => "separate-then-fuse",
        })
    }
}

impl FromStr for TrainBranches {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(TrainBranches::Joint),
            "separate-then-fuse" | "separate" => Ok(TrainBranches::Separate),
            _ => Err(config_err(format!("unknown train_branches '{s}'"))),
        }
    }
}

/// The three blocks of one step.
pub struct StepBlocks<'a> {
    pub anchors: SampleBlock<'a>,
    pub positives: SampleBlock<'a>,
    pub disturbed: Option<SampleBlock<'a>>,
}

/// Builds the encoder inputs of a batch. Anchors live in view 1, positives and
/// disturbed samples in view 2; disturbed samples reuse the neighbourhoods of
/// their geometry point.
pub fn batch_blocks<'a>(
    t1: &'a ViewTables,
    t2: &'a ViewTables,
    v1: &View,
    v2: &View,
    batch: &PairBatch,
    knn_k: usize,
    with_pixel: bool,
    with_disturbed: bool,
) -> StepBlocks<'a> {
    let nb1 = Neighborhoods::compute(v1, &batch.anchor_idx, knn_k, with_pixel);
    let nb2 = Neighborhoods::compute(v2, &batch.positive_idx, knn_k, with_pixel);
    StepBlocks {
        anchors: plain_block(t1, &batch.anchor_idx, &nb1),
        positives: plain_block(t2, &batch.positive_idx, &nb2),
        disturbed: with_disturbed.then(|| disturbed_block(t2, v2, &batch.positive_idx, &batch.disturb_map, &nb2)),
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Loss averaged over anchors.
    pub loss: f64,
    pub grads: EncoderParams,
    /// Relu sign pattern of every forward pass, in a fixed order.
    pub activations: Vec<bool>,
}

/// (anchor head, positive/disturbed head) pairs contrasted by an objective.
fn head_pairs(objective: Objective, params: &EncoderParams, branches: TrainBranches) -> Vec<(Head, Head)> {
    match objective {
        Objective::CrossModal => vec![(Head::Point, Head::Pixel)],
        _ if branches == TrainBranches::Separate && params.fusion.uses_pixel_branch() => {
            vec![(Head::Point, Head::Point), (Head::Pixel, Head::Pixel)]
        }
        _ => vec![(Head::Fused, Head::Fused)],
    }
}

/// Loss of one step and, if `with_grad`, its parameter gradient.
pub fn step_loss(
    params: &EncoderParams,
    objective: Objective,
    branches: TrainBranches,
    blocks: &StepBlocks<'_>,
    loss_cfg: &LossConfig,
    with_grad: bool,
) -> Result<StepOutput> {
    let use_disturbed = objective == Objective::P4Contrast;
    if use_disturbed && blocks.disturbed.is_none() {
        return Err(Error::Shape("objective needs a disturbed block".into()));
    }
    let mut grads = params.zeros_like();
    let mut activations = Vec::new();
    let mut loss = 0.0;
    for (ha, hp) in head_pairs(objective, params, branches) {
        let (fa, ca) = forward(params, &blocks.anchors, ha)?;
        let (fp, cp) = forward(params, &blocks.positives, hp)?;
        let dist = match (&blocks.disturbed, use_disturbed) {
            (Some(b), true) => Some(forward(params, b, hp)?),
            _ => None,
        };
        let out = pair_info_nce(&fa, &fp, dist.as_ref().map(|d| &d.0), loss_cfg)?;
        let scale = 1.0 / fa.rows as f64;
        loss += out.loss * scale;
        for c in [Some(&ca), Some(&cp), dist.as_ref().map(|d| &d.1)]
            .into_iter()
            .flatten()
        {
            activations.extend(c.activation_pattern());
        }
        if with_grad {
            let scaled = |m: &FeatureMatrix| {
                let mut m = m.clone();
                m.data.iter_mut().for_each(|v| *v *= scale);
                m
            };
            backward(params, &ca, &scaled(&out.grad_anchors), &mut grads)?;
            backward(params, &cp, &scaled(&out.grad_positives), &mut grads)?;
            if let (Some((_, cd)), Some(gd)) = (&dist, &out.grad_disturbed) {
                backward(params, cd, &scaled(gd), &mut grads)?;
            }
        }
    }
    Ok(StepOutput {
        loss,
        grads,
        activations,
    })
}

//! Training losses: output L1, multi-scale physical disentanglement, and
//! the unsupervised flow-warping loss, combined as
//! total = out + λ_phy·phy + λ_flow·flow.
//!
//! All L1 terms use mean reduction so the λ weights are
//! resolution-independent. Scale s = S−1 is full resolution; scale s
//! carries weight 2^(s−S+1), so the finest scale weighs 1.

use crate::autodiff::Tensor;
use crate::error::{DehazeError, Result};

/// Scalar components of one training step's loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub out: f64,
    pub phy: f64,
    pub flow: f64,
    pub total: f64,
}

/// Per-scale predictions entering the physical loss.
pub struct ScalePrediction<'a> {
    /// Reconstructed hazy input Î_s.
    pub i_hat: &'a Tensor,
    /// Predicted scene radiance Ĵ_s.
    pub j_hat: &'a Tensor,
}

/// Per-scale ground truth for the physical loss.
pub struct ScaleTarget<'a> {
    /// Hazy input I_s.
    pub i: &'a Tensor,
    /// Clear scene J_s.
    pub j: &'a Tensor,
}

/// Mean absolute error over all entries.
pub fn mean_abs_err(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(a.sub(b)?.abs().mean_all())
}

fn scale_weight(s: usize, scales: usize) -> f64 {
    2.0f64.powi(s as i32 - (scales as i32 - 1))
}

/// L1 between the dehazed output and the ground-truth frame.
pub fn output_loss(j_hat: &Tensor, j_gt: &Tensor) -> Result<Tensor> {
    if j_hat.shape() != j_gt.shape() {
        return Err(DehazeError::dim(format!(
            "output_loss: {:?} vs {:?}",
            j_hat.shape(),
            j_gt.shape()
        )));
    }
    mean_abs_err(j_hat, j_gt)
}

/// Σ_s 2^(s−S+1)·(L1(Î_s, I_s) + L1(Ĵ_s, J_s)).
pub fn physical_loss(preds: &[ScalePrediction<'_>], targets: &[ScaleTarget<'_>]) -> Result<Tensor> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(DehazeError::contract(format!(
            "physical_loss: {} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let scales = preds.len();
    let mut acc: Option<Tensor> = None;
    for (s, (p, t)) in preds.iter().zip(targets).enumerate() {
        let term = mean_abs_err(p.i_hat, t.i)?
            .add(&mean_abs_err(p.j_hat, t.j)?)?
            .scale(scale_weight(s, scales));
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    Ok(acc.unwrap())
}

/// Σ_s Σ_r 2^(s−S+1)·L1(sample(gt_stack_sr, flow_sr), gt_s).
///
/// `gt_stacks[s][r]` holds the stacked ground-truth history frames
/// [r, 3, H_s, W_s] (most-recent-first), `flows[s][r]` the learned flow for
/// that scale and range, and `gt_targets[s]` the ground-truth target frame
/// at scale s. Unsupervised: no flow labels enter.
pub fn flow_loss(
    gt_stacks: &[Vec<Tensor>],
    flows: &[Vec<Tensor>],
    gt_targets: &[Tensor],
) -> Result<Tensor> {
    if gt_stacks.len() != flows.len() || gt_stacks.len() != gt_targets.len() {
        return Err(DehazeError::contract(format!(
            "flow_loss: {} stacks, {} flows, {} targets",
            gt_stacks.len(),
            flows.len(),
            gt_targets.len()
        )));
    }
    let scales = gt_stacks.len();
    let mut acc: Option<Tensor> = None;
    for s in 0..scales {
        if gt_stacks[s].len() != flows[s].len() {
            return Err(DehazeError::contract(format!(
                "flow_loss: scale {s} has {} stacks but {} flows",
                gt_stacks[s].len(),
                flows[s].len()
            )));
        }
        for (stack, flow) in gt_stacks[s].iter().zip(&flows[s]) {
            let warped = stack.space_time_sample(flow)?;
            let term = mean_abs_err(&warped, &gt_targets[s])?.scale(scale_weight(s, scales));
            acc = Some(match acc {
                Some(a) => a.add(&term)?,
                None => term,
            });
        }
    }
    acc.ok_or_else(|| DehazeError::contract("flow_loss: no (scale, range) flows supplied"))
}

/// total = out + λ_phy·phy + λ_flow·flow; returns the tracked scalar and
/// the plain-number report.
pub fn total_loss(
    out: &Tensor,
    phy: &Tensor,
    flow: &Tensor,
    lambda_phy: f64,
    lambda_flow: f64,
) -> Result<(Tensor, LossReport)> {
    if lambda_phy < 0.0 || lambda_flow < 0.0 {
        return Err(DehazeError::param("loss weights must be nonnegative"));
    }
    let total = out
        .add(&phy.scale(lambda_phy))?
        .add(&flow.scale(lambda_flow))?;
    let report = LossReport {
        out: out.scalar_value(),
        phy: phy.scalar_value(),
        flow: flow.scalar_value(),
        total: total.scalar_value(),
    };
    Ok((total, report))
}

/// Default λ weights.
pub const DEFAULT_LAMBDA_PHY: f64 = 0.2;
pub const DEFAULT_LAMBDA_FLOW: f64 = 0.04;

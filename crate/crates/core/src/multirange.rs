//! Multi-range scene radiance recovery.
//!
//! Past features are grouped into range sets (the r most recent frames for
//! r = 1…R), each set is aligned to the target frame by space-time
//! deformable attention (sample at an initial flow, refine the flow with a
//! residual offset network, resample, then windowed cross-attention), and
//! the aligned range features are aggregated per pixel with prior-guided
//! softmax weights.

use crate::autodiff::{identity_flow, Tensor};
use crate::error::{DehazeError, Result};

/// Stack of the `r` most recent past features, most-recent-first:
/// `stack` has shape [r, C, H, W].
#[derive(Debug, Clone)]
pub struct RangeSet {
    pub r: usize,
    pub stack: Tensor,
}

/// Learnable pieces of one STDA block (shared across ranges).
pub struct StdaParams<'a> {
    /// Offset network convolutions; input is concat(target, aligned, flow).
    /// The last layer emits 3 channels and is zero-initialized.
    pub offset_net: Vec<(&'a Tensor, &'a Tensor)>,
    /// Query projection, [C, C].
    pub u_q: &'a Tensor,
    /// Joint key/value projection, [C, 2C].
    pub u_kv: &'a Tensor,
    /// Feed-forward network (per-pixel linear layers) [C, Ch], [Ch], [Ch, C], [C].
    pub ffn_w1: &'a Tensor,
    pub ffn_b1: &'a Tensor,
    pub ffn_w2: &'a Tensor,
    pub ffn_b2: &'a Tensor,
    pub window: usize,
    pub heads: usize,
}

/// Range sets for r = 1…R over `history` (most-recent-first). When the
/// history is shorter than r, the oldest available frame is repeated; an
/// empty history uses the target frame itself as the sole entry.
pub fn build_range_sets(history: &[Tensor], target: &Tensor, r_max: usize) -> Result<Vec<RangeSet>> {
    if r_max == 0 {
        return Err(DehazeError::param("range count R must be >= 1"));
    }
    let base: Vec<&Tensor> = if history.is_empty() {
        vec![target]
    } else {
        history.iter().collect()
    };
    let mut sets = Vec::with_capacity(r_max);
    for r in 1..=r_max {
        let mut frames: Vec<Tensor> = Vec::with_capacity(r);
        for k in 0..r {
            let f = base[k.min(base.len() - 1)];
            let mut shape = vec![1];
            shape.extend_from_slice(f.shape());
            frames.push(f.reshape(&shape)?);
        }
        let refs: Vec<&Tensor> = frames.iter().collect();
        sets.push(RangeSet {
            r,
            stack: Tensor::concat_axis0(&refs)?,
        });
    }
    Ok(sets)
}

/// "Copy last frame" flow initialization: the time channel points at the
/// most recent stack slot, spatial channels at each pixel's own position.
pub fn initial_flow(h: usize, w: usize) -> Tensor {
    identity_flow(h, w)
}

/// Residual flow refinement:
/// clamp(offset_net(concat(target, aligned, flow)) + flow, −1, 1).
pub fn refine_flow(
    j_target: &Tensor,
    aligned_init: &Tensor,
    flow_init: &Tensor,
    offset_net: &[(&Tensor, &Tensor)],
) -> Result<Tensor> {
    let shape = j_target.shape();
    if aligned_init.shape() != shape {
        return Err(DehazeError::dim(format!(
            "refine_flow: target {:?} vs aligned {:?}",
            shape,
            aligned_init.shape()
        )));
    }
    if flow_init.shape() != [3, shape[1], shape[2]] {
        return Err(DehazeError::dim(format!(
            "refine_flow: flow {:?} does not match {:?}",
            flow_init.shape(),
            shape
        )));
    }
    if offset_net.is_empty() {
        return Err(DehazeError::contract("refine_flow needs offset convolutions"));
    }
    let mut x = Tensor::concat_axis0(&[j_target, aligned_init, flow_init])?;
    for (i, (w, b)) in offset_net.iter().enumerate() {
        x = x.conv2d(w, b, 1, (w.shape()[2] - 1) / 2)?;
        if i + 1 < offset_net.len() {
            x = x.silu();
        }
    }
    x.add(flow_init)?.clamp(-1.0, 1.0).reshape(flow_init.shape())
}

/// Windowed multi-head cross-attention. Q comes from the target feature,
/// K and V from the aligned feature; attention runs independently inside
/// non-overlapping `window`×`window` tiles (inputs zero-padded to tile
/// multiples, output cropped back).
pub fn windowed_cross_attention(
    q_feat: &Tensor,
    kv_feat: &Tensor,
    u_q: &Tensor,
    u_kv: &Tensor,
    window: usize,
    heads: usize,
) -> Result<Tensor> {
    let shape = q_feat.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if kv_feat.shape() != q_feat.shape() {
        return Err(DehazeError::dim(format!(
            "cross-attention shapes disagree: {:?} vs {:?}",
            q_feat.shape(),
            kv_feat.shape()
        )));
    }
    if u_q.shape() != [c, c] || u_kv.shape() != [c, 2 * c] {
        return Err(DehazeError::dim(format!(
            "projection shapes: u_q {:?}, u_kv {:?} for C={c}",
            u_q.shape(),
            u_kv.shape()
        )));
    }
    if heads == 0 || c % heads != 0 {
        return Err(DehazeError::dim(format!(
            "channels {c} not divisible by {heads} heads"
        )));
    }
    let dh = c / heads;
    let qp = q_feat.pad_to_multiple(window)?;
    let kp = kv_feat.pad_to_multiple(window)?;
    let (hp, wp) = (qp.shape()[1], qp.shape()[2]);
    let qwin = qp.window_partition(window)?;
    let kwin = kp.window_partition(window)?;
    let nwin = qwin.shape()[0];
    let ww = window * window;

    let mut outs: Vec<Tensor> = Vec::with_capacity(nwin);
    for i in 0..nwin {
        // [w², C] token matrices for this window
        let qtok = qwin
            .slice_axis0(i, 1)?
            .reshape(&[c, ww])?
            .transpose2d()?;
        let ktok = kwin
            .slice_axis0(i, 1)?
            .reshape(&[c, ww])?
            .transpose2d()?;
        let q = qtok.matmul(u_q)?; // [w², C]
        let kv = ktok.matmul(u_kv)?; // [w², 2C]
        let kv_t = kv.transpose2d()?; // [2C, w²]
        let k_t = kv_t.slice_axis0(0, c)?; // [C, w²]
        let v_t = kv_t.slice_axis0(c, c)?; // [C, w²]
        let q_t = q.transpose2d()?; // [C, w²]

        let mut head_outs: Vec<Tensor> = Vec::with_capacity(heads);
        for hh in 0..heads {
            let qh = q_t.slice_axis0(hh * dh, dh)?; // [dh, w²]
            let kh = k_t.slice_axis0(hh * dh, dh)?;
            let vh = v_t.slice_axis0(hh * dh, dh)?;
            let scores = qh
                .transpose2d()?
                .matmul(&kh)?
                .scale(1.0 / (dh as f64).sqrt()); // [w², w²]
            let weights = scores.softmax(1)?;
            // [dh, w²] output for this head
            head_outs.push(weights.matmul(&vh.transpose2d()?)?.transpose2d()?);
        }
        let refs: Vec<&Tensor> = head_outs.iter().collect();
        let merged = Tensor::concat_axis0(&refs)?; // [C, w²]
        outs.push(merged.reshape(&[1, c, window, window])?);
    }
    let refs: Vec<&Tensor> = outs.iter().collect();
    let tiled = Tensor::concat_axis0(&refs)?.window_merge(hp, wp)?;
    tiled.crop2d(0, 0, h, w)
}

/// Full STDA block for one range: sample at the initial flow, refine the
/// flow, resample, windowed cross-attention, then a residual feed-forward.
/// Returns the range feature and the refined flow.
pub fn stda(
    j_target: &Tensor,
    set: &RangeSet,
    flow_init: &Tensor,
    params: &StdaParams<'_>,
) -> Result<(Tensor, Tensor)> {
    let aligned_init = set.stack.space_time_sample(flow_init)?;
    let flow_out = refine_flow(j_target, &aligned_init, flow_init, &params.offset_net)?;
    let aligned = set.stack.space_time_sample(&flow_out)?;
    let attn = windowed_cross_attention(
        j_target,
        &aligned,
        params.u_q,
        params.u_kv,
        params.window,
        params.heads,
    )?;
    let j_r = attn.add(&ffn(&attn, params)?)?;
    Ok((j_r, flow_out))
}

fn ffn(x: &Tensor, params: &StdaParams<'_>) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let tokens = x.reshape(&[c, h * w])?.transpose2d()?; // [HW, C]
    let hidden = tokens
        .matmul(params.ffn_w1)?
        .add_bias_rows(params.ffn_b1)?
        .silu();
    let out = hidden.matmul(params.ffn_w2)?.add_bias_rows(params.ffn_b2)?;
    out.transpose2d()?.reshape(&[c, h, w])
}

/// Guided multi-range aggregation. Per pixel, scene and prior affinity
/// scores (scaled dot products against the target features) are summed and
/// softmax-normalized over ranges; the output is the weighted sum of range
/// features. Also returns the [R, H, W] weight maps for inspection.
pub fn gmra(
    range_feats: &[Tensor],
    aligned_priors: &[Tensor],
    j_target: &Tensor,
    p_target: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let r = range_feats.len();
    if r == 0 || aligned_priors.len() != r {
        return Err(DehazeError::dim(format!(
            "gmra: {} range features vs {} aligned priors",
            r,
            aligned_priors.len()
        )));
    }
    let c = j_target.shape()[0] as f64;
    let mut scores: Vec<Tensor> = Vec::with_capacity(r);
    for (jr, pr) in range_feats.iter().zip(aligned_priors) {
        if jr.shape() != j_target.shape() {
            return Err(DehazeError::dim(format!(
                "gmra: range feature {:?} vs target {:?}",
                jr.shape(),
                j_target.shape()
            )));
        }
        let a = j_target.channel_dot(jr)?.scale(1.0 / c.sqrt());
        let b = p_target.channel_dot(pr)?.scale(1.0 / c.sqrt());
        scores.push(a.add(&b)?);
    }
    let refs: Vec<&Tensor> = scores.iter().collect();
    let weights = Tensor::concat_axis0(&refs)?.softmax(0)?; // [R, H, W]
    let mut out: Option<Tensor> = None;
    for (i, jr) in range_feats.iter().enumerate() {
        let wmap = weights.slice_axis0(i, 1)?;
        let term = jr.mul_broadcast_axis0(&wmap)?;
        out = Some(match out {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok((out.unwrap(), weights))
}

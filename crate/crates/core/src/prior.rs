//! Memory-based physical prior guidance.
//!
//! The prior feature is compressed into a transmission-binned token
//! (distribution-weighted pooling), a bounded FIFO memory keeps tokens from
//! past frames, attention reads the memory back into the current prior, and
//! the enhanced prior is fused into the scene feature with a residual add.

use crate::autodiff::Tensor;
use crate::error::{DehazeError, Result};
use std::collections::VecDeque;

/// Bounded FIFO of prior tokens ([D, C] each). Oldest token is evicted
/// first once `capacity` is exceeded.
#[derive(Debug, Clone)]
pub struct TokenMemory {
    capacity: usize,
    queue: VecDeque<Tensor>,
}

impl TokenMemory {
    pub fn new(capacity: usize) -> TokenMemory {
        assert!(capacity > 0, "token memory capacity must be positive");
        TokenMemory {
            capacity,
            queue: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends a token, evicting the oldest entry when full.
    pub fn push(&mut self, token: Tensor) {
        self.queue.push_back(token);
        while self.queue.len() > self.capacity {
            self.queue.pop_front();
        }
    }

    /// Vertical stack of stored tokens in insertion order: [N·D, C].
    pub fn stacked(&self) -> Option<Result<Tensor>> {
        if self.queue.is_empty() {
            return None;
        }
        let refs: Vec<&Tensor> = self.queue.iter().collect();
        Some(Tensor::concat_axis0(&refs))
    }
}

/// Discretizes the prior feature into a transmission distribution and pools
/// it into a compact token.
///
/// `head` is a 3×3 convolution mapping C channels to `d_bins` logits.
/// Returns the per-pixel distribution [D, H, W] (softmax over bins) and the
/// token [D, C] = 𝒟_flat · P̃_flatᵀ (plain matrix product, no
/// renormalization).
pub fn compress_prior(
    p_init: &Tensor,
    head_w: &Tensor,
    head_b: &Tensor,
    d_bins: usize,
) -> Result<(Tensor, Tensor)> {
    if head_w.shape()[0] != d_bins {
        return Err(DehazeError::dim(format!(
            "distribution head emits {} channels, expected {d_bins} bins",
            head_w.shape()[0]
        )));
    }
    let shape = p_init.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let logits = p_init.conv2d(head_w, head_b, 1, (head_w.shape()[2] - 1) / 2)?;
    let dist = logits.softmax(0)?;
    let dist_flat = dist.reshape(&[d_bins, h * w])?;
    let p_flat_t = p_init.reshape(&[c, h * w])?.transpose2d()?;
    let token = dist_flat.matmul(&p_flat_t)?;
    Ok((dist, token))
}

/// Attention read of the token memory with the flattened prior as query.
///
/// Q = flatten(P̃) [HW, C], K = V = stacked tokens [N·D, C],
/// out = softmax(QKᵀ/√C)·V reshaped back to [C, H, W]. An empty memory is
/// an identity pass-through (first frame of a video).
pub fn memory_read(p_init: &Tensor, mem: &TokenMemory) -> Result<Tensor> {
    let shape = p_init.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let Some(stacked) = mem.stacked() else {
        return p_init.reshape(&shape);
    };
    let kv = stacked?;
    if kv.shape()[1] != c {
        return Err(DehazeError::dim(format!(
            "memory token width {} does not match prior channels {c}",
            kv.shape()[1]
        )));
    }
    let q = p_init.reshape(&[c, h * w])?.transpose2d()?;
    let weights = attention_weights(&q, &kv, c as f64)?;
    let out = weights.matmul(&kv)?;
    out.transpose2d()?.reshape(&[c, h, w])
}

/// softmax(Q·Kᵀ/√scale) row-wise.
pub fn attention_weights(q: &Tensor, k: &Tensor, scale: f64) -> Result<Tensor> {
    let scores = q.matmul(&k.transpose2d()?)?.scale(1.0 / scale.sqrt());
    scores.softmax(1)
}

/// Fuses the memory-enhanced prior into the scene feature:
/// j_init + convs(concat(p_enh, j_init)), with a nonlinearity between
/// convolutions and none after the last.
pub fn guide_scene(
    p_enh: &Tensor,
    j_init: &Tensor,
    fuse: &[(&Tensor, &Tensor)],
) -> Result<Tensor> {
    if p_enh.shape() != j_init.shape() {
        return Err(DehazeError::dim(format!(
            "guide_scene shapes disagree: {:?} vs {:?}",
            p_enh.shape(),
            j_init.shape()
        )));
    }
    if fuse.is_empty() {
        return Err(DehazeError::contract("guide_scene needs fusion convolutions"));
    }
    let mut x = Tensor::concat_axis0(&[p_enh, j_init])?;
    for (i, (w, b)) in fuse.iter().enumerate() {
        x = x.conv2d(w, b, 1, (w.shape()[2] - 1) / 2)?;
        if i + 1 < fuse.len() {
            x = x.silu();
        }
    }
    j_init.add(&x)
}

//! Training: AdamW with decoupled weight decay, a polynomial learning-rate
//! schedule, the per-clip training step, and binary checkpoints.

use crate::autodiff::{Tape, Tensor};
use crate::error::{DehazeError, Result};
use crate::losses::{
    flow_loss, mean_abs_err, physical_loss, total_loss, LossReport, ScalePrediction, ScaleTarget,
};
use crate::model::{run_video, NetworkConfig, Parameters};
use crate::multirange::build_range_sets;
use std::collections::BTreeMap;
use std::path::Path;

/// AdamW moment buffers, keyed like the parameter map.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &Parameters) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params
                .map
                .iter()
                .map(|(k, t)| (k.clone(), vec![0.0; t.len()]))
                .collect(),
            v: params
                .map
                .iter()
                .map(|(k, t)| (k.clone(), vec![0.0; t.len()]))
                .collect(),
        }
    }

    /// One decoupled-weight-decay update over all parameters, in stable
    /// key order. `grads` maps parameter name to gradient buffer.
    pub fn update(
        &mut self,
        params: &mut Parameters,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let keys: Vec<String> = params.map.keys().cloned().collect();
        for key in keys {
            let g = grads
                .get(&key)
                .ok_or_else(|| DehazeError::contract(format!("no gradient for {key:?}")))?;
            let p = params.map.get(&key).unwrap();
            let m = self.m.get_mut(&key).unwrap();
            let v = self.v.get_mut(&key).unwrap();
            let mut new = p.data().to_vec();
            for i in 0..new.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                new[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + weight_decay * new[i]);
            }
            let shape = p.shape().to_vec();
            params.map.insert(key, Tensor::from_vec(&shape, new));
        }
        Ok(())
    }
}

/// Polynomial decay: lr₀·(1 − k/K)^power, zero once k reaches K.
pub fn lr_at(cfg: &NetworkConfig, step: u64) -> f64 {
    let k = step as f64;
    let kk = cfg.schedule_steps as f64;
    if k >= kk {
        return 0.0;
    }
    cfg.lr0 * (1.0 - k / kk).powf(cfg.poly_power)
}

/// The training-clip window for a global step: slides one frame per step
/// and wraps around the video.
pub fn clip_window(step: u64, total_frames: usize, clip_len: usize) -> (usize, usize) {
    let len = clip_len.min(total_frames);
    let positions = total_frames - len + 1;
    let start = (step as usize) % positions;
    (start, start + len)
}

/// 2×2 average pooling (untracked; used for ground-truth pyramids).
pub fn avg_pool2(t: &Tensor) -> Result<Tensor> {
    let shape = t.shape();
    if shape.len() != 3 || shape[1] % 2 != 0 || shape[2] % 2 != 0 {
        return Err(DehazeError::dim(format!(
            "avg_pool2 needs even [C, H, W], got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (ho, wo) = (h / 2, w / 2);
    let src = t.data();
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let base = ch * h * w + 2 * y * w + 2 * x;
                out[ch * ho * wo + y * wo + x] =
                    0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
            }
        }
    }
    Ok(Tensor::from_vec(&[c, ho, wo], out))
}

/// Fine-to-coarse image pyramid by repeated 2×2 average pooling.
pub fn pyramid(t: &Tensor, scales: usize) -> Result<Vec<Tensor>> {
    let mut levels = vec![t.clone()];
    for _ in 1..scales {
        let next = avg_pool2(levels.last().unwrap())?;
        levels.push(next);
    }
    Ok(levels)
}

/// Runs one optimization step on a clip of (hazy, clear) frame tensors.
/// Returns the loss report and the learning rate that was applied.
pub fn train_step(
    params: &mut Parameters,
    opt: &mut AdamW,
    cfg: &NetworkConfig,
    hazy: &[Tensor],
    clear: &[Tensor],
) -> Result<(LossReport, f64)> {
    if hazy.is_empty() || hazy.len() != clear.len() {
        return Err(DehazeError::contract(format!(
            "train_step: {} hazy frames vs {} clear frames",
            hazy.len(),
            clear.len()
        )));
    }
    let tape = Tape::new();
    let tracked = params.tracked(&tape);
    let outputs = run_video(&tracked, cfg, hazy)?;

    let inv_n = 1.0 / hazy.len() as f64;
    let mut out_acc: Option<Tensor> = None;
    let mut phy_acc: Option<Tensor> = None;
    let mut flow_acc: Option<Tensor> = None;
    let mut had_flows = false;
    // ground-truth clear-frame history per scale, most-recent-first
    let mut gt_hist: Vec<Vec<Tensor>> = vec![Vec::new(); cfg.scales];

    for (f, out) in outputs.iter().enumerate() {
        let gt_pyr = pyramid(&clear[f], cfg.scales)?;
        let hazy_pyr = pyramid(&hazy[f], cfg.scales)?;

        let term = mean_abs_err(&out.output, &clear[f])?;
        out_acc = Some(match out_acc {
            Some(a) => a.add(&term)?,
            None => term,
        });

        let preds: Vec<ScalePrediction<'_>> = out
            .scales
            .iter()
            .map(|s| ScalePrediction {
                i_hat: &s.i_hat,
                j_hat: &s.j_hat,
            })
            .collect();
        let targets: Vec<ScaleTarget<'_>> = (0..cfg.scales)
            .map(|s| ScaleTarget {
                i: &hazy_pyr[s],
                j: &gt_pyr[s],
            })
            .collect();
        let term = physical_loss(&preds, &targets)?;
        phy_acc = Some(match phy_acc {
            Some(a) => a.add(&term)?,
            None => term,
        });

        if cfg.use_msr {
            let mut gt_stacks: Vec<Vec<Tensor>> = Vec::with_capacity(cfg.scales);
            let mut flows: Vec<Vec<Tensor>> = Vec::with_capacity(cfg.scales);
            for s in 0..cfg.scales {
                let sets = build_range_sets(&gt_hist[s], &gt_pyr[s], cfg.ranges)?;
                gt_stacks.push(sets.into_iter().map(|rs| rs.stack).collect());
                flows.push(out.scales[s].flows.clone());
            }
            let term = flow_loss(&gt_stacks, &flows, &gt_pyr)?;
            flow_acc = Some(match flow_acc {
                Some(a) => a.add(&term)?,
                None => term,
            });
            had_flows = true;
        }

        for s in 0..cfg.scales {
            gt_hist[s].insert(0, gt_pyr[s].clone());
            gt_hist[s].truncate(cfg.ranges);
        }
    }

    let out = out_acc.unwrap().scale(inv_n);
    let phy = phy_acc.unwrap().scale(inv_n);
    let flow = if had_flows {
        flow_acc.unwrap().scale(inv_n)
    } else {
        Tensor::scalar(0.0)
    };
    let (total, report) = total_loss(&out, &phy, &flow, cfg.lambda_phy, cfg.lambda_flow)?;
    if !report.total.is_finite() {
        let part = if !report.out.is_finite() {
            "output loss"
        } else if !report.phy.is_finite() {
            "physical loss"
        } else {
            "flow loss"
        };
        return Err(DehazeError::Numeric(format!(
            "non-finite {part} at optimizer step {}",
            opt.step
        )));
    }

    let store = total.backward()?;
    let grads: BTreeMap<String, Vec<f64>> = tracked
        .map
        .iter()
        .map(|(k, t)| (k.clone(), store.grad(t)))
        .collect();
    for (k, g) in &grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(DehazeError::Numeric(format!(
                "non-finite gradient for parameter {k:?} at optimizer step {}",
                opt.step
            )));
        }
    }
    let lr = lr_at(cfg, opt.step);
    opt.update(params, &grads, lr, cfg.weight_decay)?;
    Ok((report, lr))
}

// --- checkpoint format ------------------------------------------------
//
// Little-endian binary: magic "DHZC", version u32, config block, parameter
// count u32, then for each parameter (sorted by name): name (u32 length +
// UTF-8), rank u32, dims u32…, values f64…. Optimizer state follows: step
// u64 and the m/v moment buffers in the same parameter order.

const CKPT_MAGIC: &[u8; 4] = b"DHZC";
const CKPT_VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.f64(*v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(DehazeError::Format("checkpoint truncated".to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &NetworkConfig,
    params: &Parameters,
    opt: &AdamW,
) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(CKPT_MAGIC);
    w.u32(CKPT_VERSION);
    w.u32(cfg.scales as u32);
    for c in &cfg.channels {
        w.u32(*c as u32);
    }
    w.u32(cfg.ranges as u32);
    w.u32(cfg.d_bins as u32);
    w.u32(cfg.memory as u32);
    w.u32(cfg.window as u32);
    w.u32(cfg.heads as u32);
    w.f64(cfg.lambda_phy);
    w.f64(cfg.lambda_flow);
    w.f64(cfg.lr0);
    w.u64(cfg.schedule_steps as u64);
    w.f64(cfg.poly_power);
    w.f64(cfg.weight_decay);
    w.u32(cfg.clip_len as u32);
    w.u32(u32::from(cfg.use_mpg));
    w.u32(u32::from(cfg.use_msr));
    w.u64(cfg.rng_seed);
    w.u32(params.map.len() as u32);
    for (name, t) in &params.map {
        w.bytes(name.as_bytes());
        w.u32(t.shape().len() as u32);
        for d in t.shape() {
            w.u32(*d as u32);
        }
        w.f64s(t.data());
    }
    w.u64(opt.step);
    for name in params.map.keys() {
        w.f64s(&opt.m[name]);
        w.f64s(&opt.v[name]);
    }
    crate::io::write_atomic(path, &w.buf)
}

pub fn load_checkpoint(path: &Path) -> Result<(NetworkConfig, Parameters, AdamW)> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    if r.take(4)? != CKPT_MAGIC {
        return Err(DehazeError::Format("not a checkpoint file".to_string()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(DehazeError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let scales = r.u32()? as usize;
    let channels: Vec<usize> = (0..scales)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<_>>()?;
    let cfg = NetworkConfig {
        scales,
        channels,
        ranges: r.u32()? as usize,
        d_bins: r.u32()? as usize,
        memory: r.u32()? as usize,
        window: r.u32()? as usize,
        heads: r.u32()? as usize,
        lambda_phy: r.f64()?,
        lambda_flow: r.f64()?,
        lr0: r.f64()?,
        schedule_steps: r.u64()? as usize,
        poly_power: r.f64()?,
        weight_decay: r.f64()?,
        clip_len: r.u32()? as usize,
        use_mpg: r.u32()? != 0,
        use_msr: r.u32()? != 0,
        rng_seed: r.u64()?,
    };
    cfg.validate()?;
    let count = r.u32()? as usize;
    let mut map = BTreeMap::new();
    let mut names = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| DehazeError::Format("parameter name not utf-8".to_string()))?;
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let data = r.f64s(n)?;
        names.push(name.clone());
        map.insert(name, Tensor::from_vec(&shape, data));
    }
    let params = Parameters { map };
    let step = r.u64()?;
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for name in &names {
        let n = params.map[name].len();
        m.insert(name.clone(), r.f64s(n)?);
        v.insert(name.clone(), r.f64s(n)?);
    }
    let opt = AdamW {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        step,
        m,
        v,
    };
    Ok((cfg, params, opt))
}

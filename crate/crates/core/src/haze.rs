//! Atmospheric scattering model and hazy-video synthesis.
//!
//! A hazy frame forms as I(x) = J(x)·t(x) + A·(1−t(x)) with transmission
//! t(x) = exp(−β·d(x)). The synthesizer draws one (β, A) pair per video and
//! applies the model to every frame; `recover_scene` inverts the model
//! exactly and serves as a verification oracle.

use crate::error::{DehazeError, Result};
use crate::rng::Xorshift64;

/// RGB image with channel values in [0, 1], stored planar (R, G, B).
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    /// Planar [3, H, W] layout.
    pub rgb: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, rgb: Vec<f64>) -> Result<Frame> {
        if rgb.len() != 3 * height * width {
            return Err(DehazeError::dim(format!(
                "frame data length {} does not match 3x{height}x{width}",
                rgb.len()
            )));
        }
        if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DehazeError::param("frame values must lie in [0,1]"));
        }
        Ok(Frame { height, width, rgb })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Frame {
        Frame {
            height,
            width,
            rgb: vec![value; 3 * height * width],
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

pub type Video = Vec<Frame>;

/// Per-pixel scene depth in meters.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub d: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, d: Vec<f64>) -> Result<DepthMap> {
        if d.len() != height * width {
            return Err(DehazeError::dim(format!(
                "depth data length {} does not match {height}x{width}",
                d.len()
            )));
        }
        if d.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(DehazeError::param("depth must be finite and nonnegative"));
        }
        Ok(DepthMap { height, width, d })
    }

    /// Replaces non-finite or negative entries with the maximum valid depth
    /// of the map (haze saturates with distance). Errors when no pixel is
    /// valid.
    pub fn from_raw_filled(height: usize, width: usize, raw: Vec<f64>) -> Result<DepthMap> {
        let max_valid = raw
            .iter()
            .copied()
            .filter(|v| v.is_finite() && *v >= 0.0)
            .fold(f64::NEG_INFINITY, f64::max);
        if !max_valid.is_finite() {
            return Err(DehazeError::param("depth map has no valid pixel"));
        }
        let d = raw
            .into_iter()
            .map(|v| if v.is_finite() && v >= 0.0 { v } else { max_valid })
            .collect();
        DepthMap::new(height, width, d)
    }
}

/// Per-pixel transmission in (0, 1].
#[derive(Debug, Clone)]
pub struct TransmissionMap {
    pub height: usize,
    pub width: usize,
    pub t: Vec<f64>,
}

/// Per-video physical parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HazeParams {
    /// Scattering coefficient, per meter.
    pub beta: f64,
    /// Atmospheric light in [0, 1].
    pub a: f64,
}

///// Synthesis controls: the β palette, the A interval, and the seed.
#[derive(Debug, Clone)]
pub struct SynthesisConfig {
    pub beta_choices: Vec<f64>,
    pub a_range: (f64, f64),
    pub rng_seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            beta_choices: vec![0.005, 0.01, 0.02, 0.03],
            a_range: (0.75, 1.0),
            rng_seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta_choices.is_empty() {
            return Err(DehazeError::param("beta_choices must be nonempty"));
        }
        if self.beta_choices.iter().any(|b| *b < 0.0) {
            return Err(DehazeError::param("beta values must be nonnegative"));
        }
        let (lo, hi) = self.a_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(DehazeError::param(format!(
                "A range [{lo}, {hi}] must be a subinterval of [0,1]"
            )));
        }
        Ok(())
    }
}

/// t(x) = exp(−β·d(x)).
pub fn transmission_from_depth(depth: &DepthMap, beta: f64) -> Result<TransmissionMap> {
    if beta < 0.0 {
        return Err(DehazeError::param(format!("beta must be >= 0, got {beta}")));
    }
    Ok(TransmissionMap {
        height: depth.height,
        width: depth.width,
        t: depth.d.iter().map(|d| (-beta * d).exp()).collect(),
    })
}

/// I(x) = J(x)·t(x) + A·(1−t(x)), applied per channel.
pub fn compose_haze(j: &Frame, t: &TransmissionMap, a: f64) -> Result<Frame> {
    if j.height != t.height || j.width != t.width {
        return Err(DehazeError::dim(format!(
            "frame {}x{} vs transmission {}x{}",
            j.height, j.width, t.height, t.width
        )));
    }
    if !(0.0..=1.0).contains(&a) {
        return Err(DehazeError::param(format!("A must lie in [0,1], got {a}")));
    }
    let n = j.pixels();
    let mut rgb = vec![0.0; 3 * n];
    for c in 0..3 {
        for p in 0..n {
            let v = j.rgb[c * n + p] * t.t[p] + a * (1.0 - t.t[p]);
            // convex combination; clip only rounding spill
            rgb[c * n + p] = v.clamp(0.0, 1.0);
        }
    }
    Ok(Frame {
        height: j.height,
        width: j.width,
        rgb,
    })
}

/// Exact inverse of the scattering model with a transmission floor:
/// J(x) = (I(x) − A·(1−t′(x))) / t′(x), t′ = max(t, t_floor), clamped to
/// [0, 1]. Used as an oracle, not a dehazing method.
pub fn recover_scene(i: &Frame, t: &TransmissionMap, a: f64, t_floor: f64) -> Result<Frame> {
    if t_floor <= 0.0 {
        return Err(DehazeError::param(format!(
            "t_floor must be > 0, got {t_floor}"
        )));
    }
    if i.height != t.height || i.width != t.width {
        return Err(DehazeError::dim(format!(
            "frame {}x{} vs transmission {}x{}",
            i.height, i.width, t.height, t.width
        )));
    }
    let n = i.pixels();
    let mut rgb = vec![0.0; 3 * n];
    for c in 0..3 {
        for p in 0..n {
            let tp = t.t[p].max(t_floor);
            let v = (i.rgb[c * n + p] - a * (1.0 - tp)) / tp;
            rgb[c * n + p] = v.clamp(0.0, 1.0);
        }
    }
    Ok(Frame {
        height: i.height,
        width: i.width,
        rgb,
    })
}

/// Draws one (β, A) pair from the config's seeded generator.
pub fn sample_haze_params(cfg: &SynthesisConfig) -> Result<HazeParams> {
    cfg.validate()?;
    let mut rng = Xorshift64::new(cfg.rng_seed);
    let beta = cfg.beta_choices[rng.index(cfg.beta_choices.len())];
    let a = rng.uniform(cfg.a_range.0, cfg.a_range.1);
    Ok(HazeParams { beta, a })
}

/// Applies the scattering model to a whole video with a single per-video
/// (β, A) sample. Deterministic given `cfg.rng_seed`.
pub fn synthesize_video(
    clear: &[Frame],
    depths: &[DepthMap],
    cfg: &SynthesisConfig,
) -> Result<(Video, Vec<TransmissionMap>, HazeParams)> {
    if clear.len() != depths.len() {
        return Err(DehazeError::dim(format!(
            "{} clear frames but {} depth maps",
            clear.len(),
            depths.len()
        )));
    }
    let params = sample_haze_params(cfg)?;
    let mut hazy = Vec::with_capacity(clear.len());
    let mut trans = Vec::with_capacity(clear.len());
    for (frame, depth) in clear.iter().zip(depths) {
        if frame.height != depth.height || frame.width != depth.width {
            return Err(DehazeError::dim(format!(
                "frame {}x{} vs depth {}x{}",
                frame.height, frame.width, depth.height, depth.width
            )));
        }
        let t = transmission_from_depth(depth, params.beta)?;
        hazy.push(compose_haze(frame, &t, params.a)?);
        trans.push(t);
    }
    Ok((hazy, trans, params))
}

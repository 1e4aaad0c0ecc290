//! Reference PSNR/SSIM on [0, 1] frames and a per-video evaluation report.
//!
//! SSIM uses the canonical single-scale definition: 11×11 Gaussian window
//! with σ = 1.5, stabilizers C1 = (0.01·range)², C2 = (0.03·range)²,
//! valid-window coverage, computed per channel and averaged over channels
//! and windows. Metrics are RGB-averaged.

use crate::error::{DehazeError, Result};
use crate::haze::Frame;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Returned when the frames are identical (zero MSE).
pub const PSNR_INFINITE: f64 = f64::INFINITY;

/// Per-frame and aggregate quality numbers.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

fn check_geometry(a: &Frame, b: &Frame, op: &str) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(DehazeError::dim(format!(
            "{op}: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// 10·log10(range² / MSE); identical frames return [`PSNR_INFINITE`].
pub fn psnr(a: &Frame, b: &Frame, data_range: f64) -> Result<f64> {
    check_geometry(a, b, "psnr")?;
    if data_range <= 0.0 {
        return Err(DehazeError::param("data_range must be positive"));
    }
    let mse: f64 = a
        .rgb
        .iter()
        .zip(&b.rgb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.rgb.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_INFINITE);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable weighted local means over valid windows:
/// input H×W plane -> (H−10)×(W−10) map.
fn filter_valid(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let kw = kernel.len();
    let wo = w - kw + 1;
    let ho = h - kw + 1;
    // horizontal pass
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                acc += plane[y * w + x + i] * kv;
            }
            tmp[y * wo + x] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                acc += tmp[(y + i) * wo + x] * kv;
            }
            out[y * wo + x] = acc;
        }
    }
    out
}

/// Single-scale structural similarity, channel-averaged.
pub fn ssim(a: &Frame, b: &Frame, data_range: f64) -> Result<f64> {
    check_geometry(a, b, "ssim")?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(DehazeError::dim(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} frames, got {}x{}",
            a.height, a.width
        )));
    }
    if data_range <= 0.0 {
        return Err(DehazeError::param("data_range must be positive"));
    }
    let c1 = (0.01 * data_range) * (0.01 * data_range);
    let c2 = (0.03 * data_range) * (0.03 * data_range);
    let kernel = gaussian_kernel();
    let (h, w) = (a.height, a.width);
    let n = h * w;
    let mut total = 0.0;
    for ch in 0..3 {
        let pa = &a.rgb[ch * n..(ch + 1) * n];
        let pb = &b.rgb[ch * n..(ch + 1) * n];
        let mu_a = filter_valid(pa, h, w, &kernel);
        let mu_b = filter_valid(pb, h, w, &kernel);
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        let m_aa = filter_valid(&aa, h, w, &kernel);
        let m_bb = filter_valid(&bb, h, w, &kernel);
        let m_ab = filter_valid(&ab, h, w, &kernel);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let va = m_aa[i] - mu_a[i] * mu_a[i];
            let vb = m_bb[i] - mu_b[i] * mu_b[i];
            let cov = m_ab[i] - mu_a[i] * mu_b[i];
            let num = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2);
            let den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2);
            acc += num / den;
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / 3.0)
}

/// Per-frame PSNR/SSIM plus aggregates, frames evaluated in order.
pub fn evaluate_video(pred: &[Frame], gt: &[Frame]) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(DehazeError::dim(format!(
            "evaluate_video: {} predictions vs {} references",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(DehazeError::contract("evaluate_video on empty video"));
    }
    let mut psnrs = Vec::with_capacity(pred.len());
    let mut ssims = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        psnrs.push(psnr(p, g, 1.0)?);
        ssims.push(ssim(p, g, 1.0)?);
    }
    let mean_psnr = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
    let mean_ssim = ssims.iter().sum::<f64>() / ssims.len() as f64;
    Ok(EvalReport {
        psnr: psnrs,
        ssim: ssims,
        mean_psnr,
        mean_ssim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Xorshift64;

    fn pattern_frame(h: usize, w: usize, seed: u64) -> Frame {
        let mut rng = Xorshift64::new(seed);
        let rgb = (0..3 * h * w).map(|_| rng.next_f64()).collect();
        Frame::new(h, w, rgb).unwrap()
    }

    #[test]
    fn identical_frames_hit_the_infinity_sentinel() {
        let a = pattern_frame(12, 12, 1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_INFINITE);
    }

    #[test]
    fn uniform_difference_gives_exact_20db() {
        let a = Frame::constant(8, 8, 0.5);
        let b = Frame::constant(8, 8, 0.6);
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - 20.0).abs() <= 1e-9, "psnr = {p}");
    }

    #[test]
    fn psnr_is_symmetric() {
        let a = pattern_frame(10, 10, 2);
        let b = pattern_frame(10, 10, 3);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let a = Frame::constant(8, 8, 0.5);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.05, 0.1, 0.2] {
            let b = Frame::constant(8, 8, 0.5 + amp);
            let p = psnr(&a, &b, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn self_similarity_is_exactly_one() {
        let a = pattern_frame(16, 16, 4);
        assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = pattern_frame(16, 16, 5);
        let b = pattern_frame(16, 16, 6);
        let x = ssim(&a, &b, 1.0).unwrap();
        let y = ssim(&b, &a, 1.0).unwrap();
        assert!((x - y).abs() <= 1e-12);
    }

    /// Direct-formula SSIM oracle: explicit 2-d window sums, no separable
    /// filtering.
    fn ssim_oracle(a: &Frame, b: &Frame, data_range: f64) -> f64 {
        let c1 = (0.01 * data_range) * (0.01 * data_range);
        let c2 = (0.03 * data_range) * (0.03 * data_range);
        let half = (SSIM_WINDOW / 2) as isize;
        let raw: Vec<f64> = (-half..=half)
            .map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        let k1d: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let (h, w) = (a.height, a.width);
        let n = h * w;
        let mut total = 0.0;
        for ch in 0..3 {
            let pa = &a.rgb[ch * n..(ch + 1) * n];
            let pb = &b.rgb[ch * n..(ch + 1) * n];
            let mut acc = 0.0;
            let mut count = 0usize;
            for y0 in 0..=(h - SSIM_WINDOW) {
                for x0 in 0..=(w - SSIM_WINDOW) {
                    let mut mu_a = 0.0;
                    let mut mu_b = 0.0;
                    let mut m_aa = 0.0;
                    let mut m_bb = 0.0;
                    let mut m_ab = 0.0;
                    for dy in 0..SSIM_WINDOW {
                        for dx in 0..SSIM_WINDOW {
                            let wgt = k1d[dy] * k1d[dx];
                            let va = pa[(y0 + dy) * w + x0 + dx];
                            let vb = pb[(y0 + dy) * w + x0 + dx];
                            mu_a += wgt * va;
                            mu_b += wgt * vb;
                            m_aa += wgt * va * va;
                            m_bb += wgt * vb * vb;
                            m_ab += wgt * va * vb;
                        }
                    }
                    let var_a = m_aa - mu_a * mu_a;
                    let var_b = m_bb - mu_b * mu_b;
                    let cov = m_ab - mu_a * mu_b;
                    acc += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                    count += 1;
                }
            }
            total += acc / count as f64;
        }
        total / 3.0
    }

    #[test]
    fn ssim_matches_direct_formula_oracle() {
        let a = pattern_frame(16, 16, 7);
        let b = pattern_frame(16, 16, 8);
        let got = ssim(&a, &b, 1.0).unwrap();
        let want = ssim_oracle(&a, &b, 1.0);
        assert!((got - want).abs() <= 1e-9, "got {got}, want {want}");
    }

    #[test]
    fn ssim_rejects_small_frames() {
        let a = Frame::constant(8, 8, 0.5);
        assert!(ssim(&a, &a, 1.0).is_err());
    }

    #[test]
    fn evaluate_video_report_shape() {
        let a: Vec<Frame> = (0..3).map(|i| pattern_frame(16, 16, i)).collect();
        let report = evaluate_video(&a, &a).unwrap();
        assert_eq!(report.psnr.len(), 3);
        assert_eq!(report.ssim.len(), 3);
        assert_eq!(report.mean_ssim, 1.0);
        assert_eq!(report.mean_psnr, PSNR_INFINITE);
    }

    #[test]
    fn single_frame_aggregates_equal_per_frame() {
        let a = vec![pattern_frame(16, 16, 9)];
        let b = vec![pattern_frame(16, 16, 10)];
        let report = evaluate_video(&a, &b).unwrap();
        assert_eq!(report.mean_psnr, report.psnr[0]);
        assert_eq!(report.mean_ssim, report.ssim[0]);
    }

    #[test]
    fn count_mismatch_errors() {
        let a = vec![pattern_frame(16, 16, 11)];
        let b = vec![pattern_frame(16, 16, 11), pattern_frame(16, 16, 12)];
        assert!(evaluate_video(&a, &b).is_err());
    }
}

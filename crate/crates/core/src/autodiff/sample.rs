//! Differentiable trilinear sampling of a frame stack at space-time flow
//! coordinates.
//!
//! Coordinates are corner-aligned: normalized −1 maps to index 0 and +1 to
//! index extent−1. Out-of-range coordinates are clamped to the valid range,
//! where the coordinate gradient is zero.

use super::Tensor;
use crate::error::{DehazeError, Result};
use std::rc::Rc;

/// (floor index, ceil index, fraction, d(index)/d(normalized), clamped)
fn locate(coord: f64, extent: usize) -> (usize, usize, f64, f64) {
    if extent == 1 {
        return (0, 0, 0.0, 0.0);
    }
    let max = (extent - 1) as f64;
    let clamped = coord.clamp(-1.0, 1.0);
    let idx = (clamped + 1.0) * 0.5 * max;
    let lo = (idx.floor() as usize).min(extent - 1);
    let hi = (lo + 1).min(extent - 1);
    let frac = idx - lo as f64;
    let scale = if (-1.0..=1.0).contains(&coord) { 0.5 * max } else { 0.0 };
    (lo, hi, frac, scale)
}

impl Tensor {
    /// Sample a stack [r, C, H, W] at flow [3, H, W] (channels: time, y, x,
    /// each in [−1, 1]); returns [C, H, W]. Differentiable with respect to
    /// both the stack and the flow.
    pub fn space_time_sample(&self, flow: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 4 {
            return Err(DehazeError::dim(format!(
                "space_time_sample expects stack [r,C,H,W], got {:?}",
                self.shape
            )));
        }
        let (r, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        if flow.shape() != [3, h, w] {
            return Err(DehazeError::dim(format!(
                "space_time_sample flow {:?} does not match stack {:?}",
                flow.shape(),
                self.shape
            )));
        }
        let stack = Rc::clone(&self.data);
        let fl = Rc::clone(&flow.data);
        let hw = h * w;
        let at = move |t: usize, ch: usize, y: usize, x: usize| -> usize {
            ((t * c + ch) * h + y) * w + x
        };

        let mut out = vec![0.0; c * hw];
        for p in 0..hw {
            let (t0, t1, ft, _) = locate(fl[p], r);
            let (y0, y1, fy, _) = locate(fl[hw + p], h);
            let (x0, x1, fx, _) = locate(fl[2 * hw + p], w);
            let (py, px) = (p / w, p % w);
            debug_assert_eq!(py * w + px, p);
            for ch in 0..c {
                let v = |t: usize, y: usize, x: usize| stack[at(t, ch, y, x)];
                let c00 = v(t0, y0, x0) * (1.0 - fx) + v(t0, y0, x1) * fx;
                let c01 = v(t0, y1, x0) * (1.0 - fx) + v(t0, y1, x1) * fx;
                let c10 = v(t1, y0, x0) * (1.0 - fx) + v(t1, y0, x1) * fx;
                let c11 = v(t1, y1, x0) * (1.0 - fx) + v(t1, y1, x1) * fx;
                let c0 = c00 * (1.0 - fy) + c01 * fy;
                let c1 = c10 * (1.0 - fy) + c11 * fy;
                out[ch * hw + p] = c0 * (1.0 - ft) + c1 * ft;
            }
        }

        let (ids, idf) = (self.node_id(), flow.node_id());
        Ok(Tensor::make(
            &[self, flow],
            vec![c, h, w],
            out,
            move |g, store| {
                for p in 0..hw {
                    let (t0, t1, ft, st) = locate(fl[p], r);
                    let (y0, y1, fy, sy) = locate(fl[hw + p], h);
                    let (x0, x1, fx, sx) = locate(fl[2 * hw + p], w);
                    let wt = [1.0 - ft, ft];
                    let wy = [1.0 - fy, fy];
                    let wx = [1.0 - fx, fx];
                    let ts = [t0, t1];
                    let ys = [y0, y1];
                    let xs = [x0, x1];
                    let mut dft = 0.0;
                    let mut dfy = 0.0;
                    let mut dfx = 0.0;
                    for ch in 0..c {
                        let gv = g[ch * hw + p];
                        if gv == 0.0 {
                            continue;
                        }
                        let v = |t: usize, y: usize, x: usize| stack[at(t, ch, y, x)];
                        if let Some(id) = ids {
                            let buf = store.buf(id);
                            for (it, &t) in ts.iter().enumerate() {
                                for (iy, &y) in ys.iter().enumerate() {
                                    for (ix, &x) in xs.iter().enumerate() {
                                        buf[at(t, ch, y, x)] += gv * wt[it] * wy[iy] * wx[ix];
                                    }
                                }
                            }
                        }
                        if idf.is_some() {
                            for (iy, &y) in ys.iter().enumerate() {
                                for (ix, &x) in xs.iter().enumerate() {
                                    dft += gv * (v(t1, y, x) - v(t0, y, x)) * wy[iy] * wx[ix];
                                }
                            }
                            for (it, &t) in ts.iter().enumerate() {
                                for (ix, &x) in xs.iter().enumerate() {
                                    dfy += gv * (v(t, y1, x) - v(t, y0, x)) * wt[it] * wx[ix];
                                }
                            }
                            for (it, &t) in ts.iter().enumerate() {
                                for (iy, &y) in ys.iter().enumerate() {
                                    dfx += gv * (v(t, y, x1) - v(t, y, x0)) * wt[it] * wy[iy];
                                }
                            }
                        }
                    }
                    if let Some(id) = idf {
                        let buf = store.buf(id);
                        buf[p] += dft * st;
                        buf[hw + p] += dfy * sy;
                        buf[2 * hw + p] += dfx * sx;
                    }
                }
            },
        ))
    }
}

/// Flow that samples the most recent stack slot at each pixel's own
/// position: time channel −1, spatial channels at the pixel's normalized
/// corner-aligned coordinate.
pub fn identity_flow(h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let mut data = vec![-1.0; 3 * hw];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            data[hw + p] = if h > 1 { 2.0 * y as f64 / (h as f64 - 1.0) - 1.0 } else { 0.0 };
            data[2 * hw + p] = if w > 1 { 2.0 * x as f64 / (w as f64 - 1.0) - 1.0 } else { 0.0 };
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

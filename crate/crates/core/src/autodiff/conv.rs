//! Convolution and spatial rearrangement ops on [C, H, W] tensors.

use super::Tensor;
use crate::error::{DehazeError, Result};
use std::rc::Rc;

fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

/// Valid output range along one axis: all `o` with 0 <= o·stride + k − pad
/// < extent_in, clamped to [0, extent_out).
#[inline]
fn valid_range(extent_in: usize, extent_out: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi_in = extent_in + pad;
    if hi_in <= k {
        return (0, 0);
    }
    let hi = ((hi_in - 1 - k) / stride + 1).min(extent_out);
    (lo.min(hi), hi)
}

/// plane[oy, ox] += wval · xplane[oy·stride + ky − pad, ox·stride + kx − pad]
/// over the in-bounds region. Contiguous inner loop when stride is 1.
#[inline]
fn fma_shifted(
    plane: &mut [f64],
    xplane: &[f64],
    wval: f64,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    stride: usize,
    pad: usize,
    (ky, kx): (usize, usize),
) {
    let (oy_lo, oy_hi) = valid_range(h, ho, stride, pad, ky);
    let (ox_lo, ox_hi) = valid_range(w, wo, stride, pad, kx);
    if ox_hi <= ox_lo {
        return;
    }
    for oy in oy_lo..oy_hi {
        let iy = oy * stride + ky - pad;
        if stride == 1 {
            let ix0 = ox_lo + kx - pad;
            let dst = &mut plane[oy * wo + ox_lo..oy * wo + ox_hi];
            let src = &xplane[iy * w + ix0..iy * w + ix0 + (ox_hi - ox_lo)];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wval * s;
            }
        } else {
            for ox in ox_lo..ox_hi {
                plane[oy * wo + ox] += wval * xplane[iy * w + ox * stride + kx - pad];
            }
        }
    }
}

/// Transpose of `fma_shifted`:
/// xgrad[oy·stride + ky − pad, ox·stride + kx − pad] += wval · gplane[oy, ox].
#[inline]
fn fma_scatter(
    xgrad: &mut [f64],
    gplane: &[f64],
    wval: f64,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    stride: usize,
    pad: usize,
    (ky, kx): (usize, usize),
) {
    let (oy_lo, oy_hi) = valid_range(h, ho, stride, pad, ky);
    let (ox_lo, ox_hi) = valid_range(w, wo, stride, pad, kx);
    if ox_hi <= ox_lo {
        return;
    }
    for oy in oy_lo..oy_hi {
        let iy = oy * stride + ky - pad;
        if stride == 1 {
            let ix0 = ox_lo + kx - pad;
            let dst = &mut xgrad[iy * w + ix0..iy * w + ix0 + (ox_hi - ox_lo)];
            let src = &gplane[oy * wo + ox_lo..oy * wo + ox_hi];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wval * s;
            }
        } else {
            for ox in ox_lo..ox_hi {
                xgrad[iy * w + ox * stride + kx - pad] += wval * gplane[oy * wo + ox];
            }
        }
    }
}

/// Σ over the in-bounds region of
/// gplane[oy, ox] · xplane[oy·stride + ky − pad, ox·stride + kx − pad].
#[inline]
fn dot_shifted(
    gplane: &[f64],
    xplane: &[f64],
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    stride: usize,
    pad: usize,
    (ky, kx): (usize, usize),
) -> f64 {
    let (oy_lo, oy_hi) = valid_range(h, ho, stride, pad, ky);
    let (ox_lo, ox_hi) = valid_range(w, wo, stride, pad, kx);
    if ox_hi <= ox_lo {
        return 0.0;
    }
    let mut acc = 0.0;
    for oy in oy_lo..oy_hi {
        let iy = oy * stride + ky - pad;
        if stride == 1 {
            let ix0 = ox_lo + kx - pad;
            let a = &gplane[oy * wo + ox_lo..oy * wo + ox_hi];
            let b = &xplane[iy * w + ix0..iy * w + ix0 + (ox_hi - ox_lo)];
            for (x, y) in a.iter().zip(b) {
                acc += x * y;
            }
        } else {
            for ox in ox_lo..ox_hi {
                acc += gplane[oy * wo + ox] * xplane[iy * w + ox * stride + kx - pad];
            }
        }
    }
    acc
}

impl Tensor {
    /// Cross-correlation with zero padding.
    /// x: [C_in, H, W], w: [C_out, C_in, k, k], b: [C_out].
    pub fn conv2d(&self, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        if self.shape.len() != 3 || w.shape.len() != 4 {
            return Err(DehazeError::dim(format!(
                "conv2d expects x [C,H,W] and w [O,C,k,k], got {:?} and {:?}",
                self.shape, w.shape
            )));
        }
        let (cin, h, wd) = (self.shape[0], self.shape[1], self.shape[2]);
        let (cout, wcin, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
        if wcin != cin || b.shape != [cout] {
            return Err(DehazeError::dim(format!(
                "conv2d: x {:?}, w {:?}, b {:?}",
                self.shape, w.shape, b.shape
            )));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(DehazeError::dim(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        let (ho, wo) = (conv_out(h, kh, stride, pad), conv_out(wd, kw, stride, pad));
        let x = Rc::clone(&self.data);
        let wv = Rc::clone(&w.data);
        let bv = Rc::clone(&b.data);

        let mut out = vec![0.0; cout * ho * wo];
        for oc in 0..cout {
            let plane = &mut out[oc * ho * wo..(oc + 1) * ho * wo];
            plane.fill(bv[oc]);
            for ic in 0..cin {
                let xplane = &x[ic * h * wd..(ic + 1) * h * wd];
                for ky in 0..kh {
                    let wrow = ((oc * cin + ic) * kh + ky) * kw;
                    for kx in 0..kw {
                        let wval = wv[wrow + kx];
                        if wval == 0.0 {
                            continue;
                        }
                        fma_shifted(plane, xplane, wval, (h, wd), (ho, wo), stride, pad, (ky, kx));
                    }
                }
            }
        }

        let (idx, idw, idb) = (self.node_id(), w.node_id(), b.node_id());
        Ok(Tensor::make(
            &[self, w, b],
            vec![cout, ho, wo],
            out,
            move |g, store| {
                if let Some(id) = idb {
                    let buf = store.buf(id);
                    for oc in 0..cout {
                        let mut acc = 0.0;
                        for i in 0..ho * wo {
                            acc += g[oc * ho * wo + i];
                        }
                        buf[oc] += acc;
                    }
                }
                if let Some(id) = idw {
                    let buf = store.buf(id);
                    for oc in 0..cout {
                        let gplane = &g[oc * ho * wo..(oc + 1) * ho * wo];
                        for ic in 0..cin {
                            let xplane = &x[ic * h * wd..(ic + 1) * h * wd];
                            for ky in 0..kh {
                                let wrow = ((oc * cin + ic) * kh + ky) * kw;
                                for kx in 0..kw {
                                    buf[wrow + kx] += dot_shifted(
                                        gplane,
                                        xplane,
                                        (h, wd),
                                        (ho, wo),
                                        stride,
                                        pad,
                                        (ky, kx),
                                    );
                                }
                            }
                        }
                    }
                }
                if let Some(id) = idx {
                    let buf = store.buf(id);
                    for oc in 0..cout {
                        let gplane = &g[oc * ho * wo..(oc + 1) * ho * wo];
                        for ic in 0..cin {
                            let xgrad = &mut buf[ic * h * wd..(ic + 1) * h * wd];
                            for ky in 0..kh {
                                let wrow = ((oc * cin + ic) * kh + ky) * kw;
                                for kx in 0..kw {
                                    let wval = wv[wrow + kx];
                                    if wval == 0.0 {
                                        continue;
                                    }
                                    fma_scatter(
                                        xgrad,
                                        gplane,
                                        wval,
                                        (h, wd),
                                        (ho, wo),
                                        stride,
                                        pad,
                                        (ky, kx),
                                    );
                                }
                            }
                        }
                    }
                }
            },
        ))
    }

    /// Channel-to-space rearrangement: [C·u², H, W] -> [C, uH, uW].
    pub fn pixel_shuffle(&self, u: usize) -> Result<Tensor> {
        if self.shape.len() != 3 {
            return Err(DehazeError::dim(format!(
                "pixel_shuffle expects [C,H,W], got {:?}",
                self.shape
            )));
        }
        let (c_in, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        if u == 0 || c_in % (u * u) != 0 {
            return Err(DehazeError::dim(format!(
                "pixel_shuffle: {c_in} channels not divisible by {u}²"
            )));
        }
        let c = c_in / (u * u);
        let (ho, wo) = (h * u, w * u);
        // out[c, y·u+dy, x·u+dx] = in[c·u² + dy·u + dx, y, x]
        let fwd_index = move |i: usize| -> usize {
            let (ci, rest) = (i / (h * w), i % (h * w));
            let (y, x) = (rest / w, rest % w);
            let co = ci / (u * u);
            let dy = (ci % (u * u)) / u;
            let dx = ci % u;
            (co * ho + (y * u + dy)) * wo + (x * u + dx)
        };
        let mut out = vec![0.0; self.len()];
        for i in 0..self.len() {
            out[fwd_index(i)] = self.data[i];
        }
        let id = self.node_id();
        let n = self.len();
        Ok(Tensor::make(
            &[self],
            vec![c, ho, wo],
            out,
            move |g, store| {
                if let Some(id) = id {
                    let buf = store.buf(id);
                    for i in 0..n {
                        buf[i] += g[fwd_index(i)];
                    }
                }
            },
        ))
    }

    /// Inverse of `pixel_shuffle`: [C, uH, uW] -> [C·u², H, W].
    pub fn pixel_unshuffle(&self, u: usize) -> Result<Tensor> {
        if self.shape.len() != 3 {
            return Err(DehazeError::dim(format!(
                "pixel_unshuffle expects [C,H,W], got {:?}",
                self.shape
            )));
        }
        let (c, ho, wo) = (self.shape[0], self.shape[1], self.shape[2]);
        if u == 0 || ho % u != 0 || wo % u != 0 {
            return Err(DehazeError::dim(format!(
                "pixel_unshuffle: spatial {ho}x{wo} not divisible by {u}"
            )));
        }
        let (h, w) = (ho / u, wo / u);
        let bwd_index = move |i: usize| -> usize {
            // i indexes the [C·u², H, W] output; map to the [C, uH, uW] input
            let (ci, rest) = (i / (h * w), i % (h * w));
            let (y, x) = (rest / w, rest % w);
            let co = ci / (u * u);
            let dy = (ci % (u * u)) / u;
            let dx = ci % u;
            (co * ho + (y * u + dy)) * wo + (x * u + dx)
        };
        let n = self.len();
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.data[bwd_index(i)];
        }
        let id = self.node_id();
        Ok(Tensor::make(
            &[self],
            vec![c * u * u, h, w],
            out,
            move |g, store| {
                if let Some(id) = id {
                    let buf = store.buf(id);
                    for i in 0..n {
                        buf[bwd_index(i)] += g[i];
                    }
                }
            },
        ))
    }

    /// Zero-pad bottom/right so spatial extents become multiples of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> Result<Tensor> {
        if self.shape.len() != 3 {
            return Err(DehazeError::dim(format!(
                "pad_to_multiple expects [C,H,W], got {:?}",
                self.shape
            )));
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let hp = h.div_ceil(m) * m;
        let wp = w.div_ceil(m) * m;
        if hp == h && wp == w {
            return self.reshape(&[c, h, w]);
        }
        let mut out = vec![0.0; c * hp * wp];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ch * hp + y) * wp + x] = self.data[(ch * h + y) * w + x];
                }
            }
        }
        let id = self.node_id();
        Ok(Tensor::make(
            &[self],
            vec![c, hp, wp],
            out,
            move |g, store| {
                if let Some(id) = id {
                    let buf = store.buf(id);
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                buf[(ch * h + y) * w + x] += g[(ch * hp + y) * wp + x];
                            }
                        }
                    }
                }
            },
        ))
    }

    /// Spatial crop: rows y0..y0+h, cols x0..x0+w of a [C, H, W] tensor.
    pub fn crop2d(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
        if self.shape.len() != 3 {
            return Err(DehazeError::dim(format!(
                "crop2d expects [C,H,W], got {:?}",
                self.shape
            )));
        }
        let (c, hf, wf) = (self.shape[0], self.shape[1], self.shape[2]);
        if y0 + h > hf || x0 + w > wf {
            return Err(DehazeError::dim(format!(
                "crop2d [{y0}+{h}, {x0}+{w}] out of bounds for {:?}",
                self.shape
            )));
        }
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ch * h + y) * w + x] = self.data[(ch * hf + y0 + y) * wf + x0 + x];
                }
            }
        }
        let id = self.node_id();
        Ok(Tensor::make(&[self], vec![c, h, w], out, move |g, store| {
            if let Some(id) = id {
                let buf = store.buf(id);
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            buf[(ch * hf + y0 + y) * wf + x0 + x] += g[(ch * h + y) * w + x];
                        }
                    }
                }
            }
        }))
    }

    /// Partition [C, H, W] into non-overlapping w×w windows:
    /// output [nwin, C, w, w] with windows in row-major order.
    /// Spatial extents must be multiples of `w` (pad first).
    pub fn window_partition(&self, win: usize) -> Result<Tensor> {
        if self.shape.len() != 3 {
            return Err(DehazeError::dim(format!(
                "window_partition expects [C,H,W], got {:?}",
                self.shape
            )));
        }
        let (c, h, wd) = (self.shape[0], self.shape[1], self.shape[2]);
        if win == 0 || h % win != 0 || wd % win != 0 {
            return Err(DehazeError::dim(format!(
                "window size {win} does not divide {h}x{wd}"
            )));
        }
        let (nwy, nwx) = (h / win, wd / win);
        let nwin = nwy * nwx;
        let src_index = move |i: usize| -> usize {
            // i indexes [nwin, C, win, win]
            let wi = i / (c * win * win);
            let rest = i % (c * win * win);
            let ch = rest / (win * win);
            let yy = (rest % (win * win)) / win;
            let xx = rest % win;
            let (wy, wx) = (wi / nwx, wi % nwx);
            (ch * h + wy * win + yy) * wd + wx * win + xx
        };
        let n = self.len();
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.data[src_index(i)];
        }
        let id = self.node_id();
        Ok(Tensor::make(
            &[self],
            vec![nwin, c, win, win],
            out,
            move |g, store| {
                if let Some(id) = id {
                    let buf = store.buf(id);
                    for i in 0..n {
                        buf[src_index(i)] += g[i];
                    }
                }
            },
        ))
    }

    /// Inverse of `window_partition`: [nwin, C, w, w] -> [C, H, W].
    pub fn window_merge(&self, h: usize, wd: usize) -> Result<Tensor> {
        if self.shape.len() != 4 {
            return Err(DehazeError::dim(format!(
                "window_merge expects [nwin,C,w,w], got {:?}",
                self.shape
            )));
        }
        let (nwin, c, win) = (self.shape[0], self.shape[1], self.shape[2]);
        if self.shape[3] != win || win == 0 || h % win != 0 || wd % win != 0
            || nwin != (h / win) * (wd / win)
        {
            return Err(DehazeError::dim(format!(
                "window_merge: {:?} does not tile {h}x{wd}",
                self.shape
            )));
        }
        let nwx = wd / win;
        let src_index = move |i: usize| -> usize {
            // i indexes the merged [C, H, W] output
            let ch = i / (h * wd);
            let y = (i % (h * wd)) / wd;
            let x = i % wd;
            let (wy, yy) = (y / win, y % win);
            let (wx, xx) = (x / win, x % win);
            (((wy * nwx + wx) * c + ch) * win + yy) * win + xx
        };
        let n = self.len();
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.data[src_index(i)];
        }
        let id = self.node_id();
        Ok(Tensor::make(
            &[self],
            vec![c, h, wd],
            out,
            move |g, store| {
                if let Some(id) = id {
                    let buf = store.buf(id);
                    for i in 0..n {
                        buf[src_index(i)] += g[i];
                    }
                }
            },
        ))
    }

    /// Corner-aligned bilinear 2× upsampling of a [C, H, W] tensor.
    pub fn bilinear_upsample2x(&self) -> Result<Tensor> {
        if self.shape.len() != 3 {
            return Err(DehazeError::dim(format!(
                "bilinear_upsample2x expects [C,H,W], got {:?}",
                self.shape
            )));
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let (ho, wo) = (h * 2, w * 2);
        // (source coord, corner weights) per output row/col
        let coords = |no: usize, n: usize| -> Vec<(usize, usize, f64)> {
            (0..no)
                .map(|i| {
                    let pos = if no > 1 {
                        i as f64 * (n.max(1) as f64 - 1.0) / (no as f64 - 1.0)
                    } else {
                        0.0
                    };
                    let lo = pos.floor() as usize;
                    let hi = (lo + 1).min(n - 1);
                    (lo, hi, pos - lo as f64)
                })
                .collect()
        };
        let ys = coords(ho, h);
        let xs = coords(wo, w);
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let at = |y: usize, x: usize| self.data[(ch * h + y) * w + x];
                    let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                        + at(y0, x1) * (1.0 - fy) * fx
                        + at(y1, x0) * fy * (1.0 - fx)
                        + at(y1, x1) * fy * fx;
                    out[(ch * ho + oy) * wo + ox] = v;
                }
            }
        }
        let id = self.node_id();
        Ok(Tensor::make(
            &[self],
            vec![c, ho, wo],
            out,
            move |g, store| {
                if let Some(id) = id {
                    let buf = store.buf(id);
                    for ch in 0..c {
                        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                                let gv = g[(ch * ho + oy) * wo + ox];
                                buf[(ch * h + y0) * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                                buf[(ch * h + y0) * w + x1] += gv * (1.0 - fy) * fx;
                                buf[(ch * h + y1) * w + x0] += gv * fy * (1.0 - fx);
                                buf[(ch * h + y1) * w + x1] += gv * fy * fx;
                            }
                        }
                    }
                }
            },
        ))
    }
}

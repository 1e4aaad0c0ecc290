//! Elementwise, reduction, linear-algebra and shape operations.
//!
//! Every op computes its forward result eagerly and, when an input is
//! tracked, records a backward closure over saved inputs. Reductions and
//! products use fixed iteration order so results are bit-stable.

use super::Tensor;
use crate::error::{DehazeError, Result};
use std::rc::Rc;

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DehazeError::dim(format!(
            "{op}: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Raw row-major matmul: a[m,k] · b[k,n].
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

impl Tensor {
    fn binary(
        &self,
        rhs: &Tensor,
        op: &str,
        fwd: impl Fn(f64, f64) -> f64,
        // (grad_out, a, b) -> (da, db)
        bwd: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Tensor> {
        same_shape(self, rhs, op)?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| fwd(*a, *b))
            .collect();
        let (ida, idb) = (self.node_id(), rhs.node_id());
        let (a, b) = (Rc::clone(&self.data), Rc::clone(&rhs.data));
        Ok(Tensor::make(
            &[self, rhs],
            self.shape.clone(),
            data,
            move |g, store| {
                if let Some(id) = ida {
                    let buf = store.buf(id);
                    for i in 0..g.len() {
                        buf[i] += bwd(g[i], a[i], b[i]).0;
                    }
                }
                if let Some(id) = idb {
                    let buf = store.buf(id);
                    for i in 0..g.len() {
                        buf[i] += bwd(g[i], a[i], b[i]).1;
                    }
                }
            },
        ))
    }

    fn unary(
        &self,
        fwd: impl Fn(f64) -> f64,
        // (grad_out, x, y) -> dx
        bwd: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| fwd(*x)).collect();
        let ysaved = Rc::new(data.clone());
        let id = self.node_id();
        let x = Rc::clone(&self.data);
        Tensor::make(&[self], self.shape.clone(), data, move |g, store| {
            if let Some(id) = id {
                let buf = store.buf(id);
                for i in 0..g.len() {
                    buf[i] += bwd(g[i], x[i], ysaved[i]);
                }
            }
        })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "add", |a, b| a + b, |g, _, _| (g, g))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "sub", |a, b| a - b, |g, _, _| (g, -g))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "mul", |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(move |x| c * x, move |g, _, _| c * g)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(move |x| x + c, |g, _, _| g)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |g, _, y| g * y)
    }

    pub fn log(&self) -> Tensor {
        self.unary(f64::ln, |g, x, _| g / x)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), |g, _, y| g * y * (1.0 - y))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |g, x, _| if x > 0.0 { g } else { 0.0 })
    }

    /// Smooth gate x·sigmoid(x); the network nonlinearity.
    pub fn silu(&self) -> Tensor {
        self.mul(&self.sigmoid()).expect("silu shapes always match")
    }

    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, |g, x, _| if x >= 0.0 { g } else { -g })
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |g, x, _| if (lo..=hi).contains(&x) { g } else { 0.0 },
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum();
        let id = self.node_id();
        let n = self.len();
        Tensor::make(&[self], vec![1], vec![s], move |g, store| {
            if let Some(id) = id {
                let buf = store.buf(id);
                for v in buf.iter_mut().take(n) {
                    *v += g[0];
                }
            }
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 {
            return Err(DehazeError::dim(format!(
                "matmul expects 2-d operands, got {:?} and {:?}",
                self.shape, rhs.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (rhs.shape[0], rhs.shape[1]);
        if k != k2 {
            return Err(DehazeError::dim(format!(
                "matmul inner dimensions disagree: {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        let data = matmul_raw(self.data(), rhs.data(), m, k, n);
        let (ida, idb) = (self.node_id(), rhs.node_id());
        let (a, b) = (Rc::clone(&self.data), Rc::clone(&rhs.data));
        Ok(Tensor::make(
            &[self, rhs],
            vec![m, n],
            data,
            move |g, store| {
                if let Some(id) = ida {
                    // da = g · bᵀ
                    let bt = transpose_raw(&b, k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    let buf = store.buf(id);
                    for i in 0..da.len() {
                        buf[i] += da[i];
                    }
                }
                if let Some(id) = idb {
                    // db = aᵀ · g
                    let at = transpose_raw(&a, m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    let buf = store.buf(id);
                    for i in 0..db.len() {
                        buf[i] += db[i];
                    }
                }
            },
        ))
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(DehazeError::dim(format!(
                "transpose2d expects 2-d tensor, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let data = transpose_raw(self.data(), r, c);
        let id = self.node_id();
        Ok(Tensor::make(
            &[self],
            vec![c, r],
            data,
            move |g, store| {
                if let Some(id) = id {
                    let gt = transpose_raw(g, c, r);
                    let buf = store.buf(id);
                    for i in 0..gt.len() {
                        buf[i] += gt[i];
                    }
                }
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(DehazeError::dim(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        let id = self.node_id();
        let n = self.len();
        Ok(Tensor::make(
            &[self],
            shape.to_vec(),
            self.data().to_vec(),
            move |g, store| {
                if let Some(id) = id {
                    let buf = store.buf(id);
                    for i in 0..n {
                        buf[i] += g[i];
                    }
                }
            },
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(DehazeError::dim(format!(
                "softmax axis {axis} out of bounds for shape {:?}",
                self.shape
            )));
        }
        let dims = &self.shape;
        let axis_len = dims[axis];
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * axis_len + j) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for j in 0..axis_len {
                    m = m.max(x[at(j)]);
                }
                let mut z = 0.0;
                for j in 0..axis_len {
                    let e = (x[at(j)] - m).exp();
                    y[at(j)] = e;
                    z += e;
                }
                for j in 0..axis_len {
                    y[at(j)] /= z;
                }
            }
        }
        let id = self.node_id();
        let ysaved = Rc::new(y);
        let ydata = (*ysaved).clone();
        Ok(Tensor::make(
            &[self],
            dims.clone(),
            ydata,
            move |g, store| {
                if let Some(id) = id {
                    let buf = store.buf(id);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * axis_len + j) * inner + i;
                            let mut dot = 0.0;
                            for j in 0..axis_len {
                                dot += g[at(j)] * ysaved[at(j)];
                            }
                            for j in 0..axis_len {
                                buf[at(j)] += ysaved[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            },
        ))
    }

    /// Rows `start .. start+len` along the leading axis.
    pub fn slice_axis0(&self, start: usize, len: usize) -> Result<Tensor> {
        if self.shape.is_empty() || start + len > self.shape[0] {
            return Err(DehazeError::dim(format!(
                "slice_axis0 [{start}, {}) out of bounds for shape {:?}",
                start + len,
                self.shape
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        let data = self.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = self.shape.clone();
        shape[0] = len;
        let id = self.node_id();
        Ok(Tensor::make(&[self], shape, data, move |g, store| {
            if let Some(id) = id {
                let buf = store.buf(id);
                for (i, gv) in g.iter().enumerate() {
                    buf[start * inner + i] += gv;
                }
            }
        }))
    }

    /// Concatenation along the leading axis; trailing dims must agree.
    pub fn concat_axis0(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| DehazeError::dim("concat_axis0 of zero tensors"))?;
        let trailing = &first.shape[1..];
        let mut total = 0;
        for p in parts {
            if &p.shape[1..] != trailing {
                return Err(DehazeError::dim(format!(
                    "concat_axis0 trailing dims disagree: {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
            total += p.shape[0];
        }
        let mut data = Vec::with_capacity(total * trailing.iter().product::<usize>());
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let mut shape = vec![total];
        shape.extend_from_slice(trailing);
        let segs: Vec<(Option<usize>, usize)> =
            parts.iter().map(|p| (p.node_id(), p.len())).collect();
        Ok(Tensor::make(parts, shape, data, move |g, store| {
            let mut off = 0;
            for (id, len) in &segs {
                if let Some(id) = id {
                    let buf = store.buf(*id);
                    for i in 0..*len {
                        buf[i] += g[off + i];
                    }
                }
                off += len;
            }
        }))
    }

    /// Multiply every element by a tracked scalar (shape [1]).
    pub fn mul_scalar_tensor(&self, s: &Tensor) -> Result<Tensor> {
        if s.len() != 1 {
            return Err(DehazeError::dim(format!(
                "mul_scalar_tensor expects scalar rhs, got {:?}",
                s.shape
            )));
        }
        let sv = s.data()[0];
        let data: Vec<f64> = self.data().iter().map(|x| x * sv).collect();
        let (idx, ids) = (self.node_id(), s.node_id());
        let x = Rc::clone(&self.data);
        Ok(Tensor::make(
            &[self, s],
            self.shape.clone(),
            data,
            move |g, store| {
                if let Some(id) = idx {
                    let buf = store.buf(id);
                    for i in 0..g.len() {
                        buf[i] += g[i] * sv;
                    }
                }
                if let Some(id) = ids {
                    let mut acc = 0.0;
                    for i in 0..g.len() {
                        acc += g[i] * x[i];
                    }
                    store.buf(id)[0] += acc;
                }
            },
        ))
    }

    /// Per-location dot product over the leading axis:
    /// [C, ...] · [C, ...] -> [1, ...].
    pub fn channel_dot(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape(self, rhs, "channel_dot")?;
        let c = self.shape[0];
        let inner: usize = self.shape[1..].iter().product();
        let (a, b) = (Rc::clone(&self.data), Rc::clone(&rhs.data));
        let mut out = vec![0.0; inner];
        for ch in 0..c {
            for i in 0..inner {
                out[i] += a[ch * inner + i] * b[ch * inner + i];
            }
        }
        let mut shape = vec![1];
        shape.extend_from_slice(&self.shape[1..]);
        let (ida, idb) = (self.node_id(), rhs.node_id());
        Ok(Tensor::make(&[self, rhs], shape, out, move |g, store| {
            if let Some(id) = ida {
                let buf = store.buf(id);
                for ch in 0..c {
                    for i in 0..inner {
                        buf[ch * inner + i] += g[i] * b[ch * inner + i];
                    }
                }
            }
            if let Some(id) = idb {
                let buf = store.buf(id);
                for ch in 0..c {
                    for i in 0..inner {
                        buf[ch * inner + i] += g[i] * a[ch * inner + i];
                    }
                }
            }
        }))
    }

    /// Broadcast-multiply [C, ...] by a single-channel map [1, ...].
    pub fn mul_broadcast_axis0(&self, m: &Tensor) -> Result<Tensor> {
        self.broadcast_axis0(m, "mul_broadcast_axis0", true)
    }

    /// Broadcast-add a single-channel map [1, ...] onto [C, ...].
    pub fn add_broadcast_axis0(&self, m: &Tensor) -> Result<Tensor> {
        self.broadcast_axis0(m, "add_broadcast_axis0", false)
    }

    fn broadcast_axis0(&self, m: &Tensor, op: &str, multiply: bool) -> Result<Tensor> {
        let inner: usize = self.shape[1..].iter().product();
        if m.shape.first() != Some(&1) || m.len() != inner {
            return Err(DehazeError::dim(format!(
                "{op}: map shape {:?} does not broadcast over {:?}",
                m.shape, self.shape
            )));
        }
        let c = self.shape[0];
        let (x, mm) = (Rc::clone(&self.data), Rc::clone(&m.data));
        let mut out = vec![0.0; self.len()];
        for ch in 0..c {
            for i in 0..inner {
                out[ch * inner + i] = if multiply {
                    x[ch * inner + i] * mm[i]
                } else {
                    x[ch * inner + i] + mm[i]
                };
            }
        }
        let (idx, idm) = (self.node_id(), m.node_id());
        Ok(Tensor::make(
            &[self, m],
            self.shape.clone(),
            out,
            move |g, store| {
                if let Some(id) = idx {
                    let buf = store.buf(id);
                    for ch in 0..c {
                        for i in 0..inner {
                            buf[ch * inner + i] +=
                                if multiply { g[ch * inner + i] * mm[i] } else { g[ch * inner + i] };
                        }
                    }
                }
                if let Some(id) = idm {
                    let buf = store.buf(id);
                    for ch in 0..c {
                        for i in 0..inner {
                            buf[i] += if multiply {
                                g[ch * inner + i] * x[ch * inner + i]
                            } else {
                                g[ch * inner + i]
                            };
                        }
                    }
                }
            },
        ))
    }

    /// Add a bias vector [M] to every row of [N, M].
    pub fn add_bias_rows(&self, bias: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || bias.shape != [self.shape[1]] {
            return Err(DehazeError::dim(format!(
                "add_bias_rows: {:?} with bias {:?}",
                self.shape, bias.shape
            )));
        }
        let (n, m) = (self.shape[0], self.shape[1]);
        let b = Rc::clone(&bias.data);
        let mut out = self.data().to_vec();
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] += b[j];
            }
        }
        let (idx, idb) = (self.node_id(), bias.node_id());
        Ok(Tensor::make(
            &[self, bias],
            self.shape.clone(),
            out,
            move |g, store| {
                if let Some(id) = idx {
                    let buf = store.buf(id);
                    for i in 0..g.len() {
                        buf[i] += g[i];
                    }
                }
                if let Some(id) = idb {
                    let buf = store.buf(id);
                    for i in 0..n {
                        for j in 0..m {
                            buf[j] += g[i * m + j];
                        }
                    }
                }
            },
        ))
    }
}

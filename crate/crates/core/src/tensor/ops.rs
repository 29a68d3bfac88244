//! Primitive differentiable operations.
//!
//! Layout conventions: sequences are channel-first, `[C, L]` or batched
//! `[B, C, L]`; matrices are row-major `[rows, cols]`. No implicit
//! broadcasting.

use super::{check_finite, Graph, Mode, Op, Tensor, Var};
use crate::error::{KwsError, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Splits `[B, C, L]` or `[C, L]` into `(B, C, L)`.
fn bcl(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, c, l] => Ok((b, c, l)),
        [c, l] => Ok((1, c, l)),
        _ => Err(KwsError::dim(op, shape, &[0, 0, 0])),
    }
}

fn with_batch(shape: &[usize], b: usize, c: usize, l: usize) -> Vec<usize> {
    if shape.len() == 3 {
        vec![b, c, l]
    } else {
        vec![c, l]
    }
}

// ---------------------------------------------------------------- matmul

struct MatMul {
    m: usize,
    k: usize,
    p: usize,
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * p];
    for i in 0..m {
        let crow = &mut c[i * p..(i + 1) * p];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &b[kk * p..(kk + 1) * p];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

impl Op for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (m, k, p) = (self.m, self.k, self.p);
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let ga = needs[0].then(|| {
            // G[m×p] · Bᵀ[p×k]
            let mut ga = vec![0.0; m * k];
            for i in 0..m {
                for kk in 0..k {
                    let brow = &b[kk * p..(kk + 1) * p];
                    ga[i * k + kk] = g[i * p..(i + 1) * p].iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
            ga
        });
        let gb = needs[1].then(|| {
            // Aᵀ[k×m] · G[m×p]
            let mut gb = vec![0.0; k * p];
            for i in 0..m {
                let grow = &g[i * p..(i + 1) * p];
                for kk in 0..k {
                    let av = a[i * k + kk];
                    for (o, gv) in gb[kk * p..(kk + 1) * p].iter_mut().zip(grow) {
                        *o += av * gv;
                    }
                }
            }
            gb
        });
        vec![ga, gb]
    }
}

// ---------------------------------------------------------------- elementwise

struct Add;
impl Op for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        needs.iter().map(|&n| n.then(|| g.to_vec())).collect()
    }
}

struct Mul;
impl Op for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        vec![
            needs[0].then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
            needs[1].then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
        ]
    }
}

struct Scale(f64);
impl Op for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|g| g * self.0).collect())]
    }
}

struct Sum;
impl Op for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0]; inputs[0].numel()])]
    }
}

struct Relu;
impl Op for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        vec![Some(g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())]
    }
}

struct Reshape;
impl Op for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec())]
    }
}

struct Transpose {
    rows: usize,
    cols: usize,
}
fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
impl Op for Transpose {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(transpose_raw(g, self.cols, self.rows))]
    }
}

struct ConcatCols {
    widths: Vec<usize>,
    rows: usize,
}
impl Op for ConcatCols {
    fn name(&self) -> &'static str {
        "concat_cols"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let total: usize = self.widths.iter().sum();
        let mut off = 0;
        let mut out = Vec::with_capacity(self.widths.len());
        for (&w, &need) in self.widths.iter().zip(needs) {
            out.push(need.then(|| {
                let mut gi = Vec::with_capacity(self.rows * w);
                for r in 0..self.rows {
                    gi.extend_from_slice(&g[r * total + off..r * total + off + w]);
                }
                gi
            }));
            off += w;
        }
        out
    }
}

// ---------------------------------------------------------------- softmax

struct Softmax {
    outer: usize,
    axis_len: usize,
    inner: usize,
}

impl Op for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, _: &[&Tensor], y: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let y = y.data();
        let (n, inner) = (self.axis_len, self.inner);
        let mut gx = vec![0.0; y.len()];
        for o in 0..self.outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let dot: f64 = (0..n).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                for j in 0..n {
                    let idx = base + j * inner;
                    gx[idx] = y[idx] * (g[idx] - dot);
                }
            }
        }
        vec![Some(gx)]
    }
}

pub(crate) fn softmax_raw(x: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let max = (0..n).map(|j| x[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                let e = (x[base + j * inner] - max).exp();
                y[base + j * inner] = e;
                total += e;
            }
            for j in 0..n {
                y[base + j * inner] /= total;
            }
        }
    }
    y
}

// ---------------------------------------------------------------- conv1d

/// Output length and left padding for "same" convolution: `ceil(L / s)`
/// outputs, symmetric zero padding with the odd extra zero on the right.
pub(crate) fn same_padding(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(len);
    (out, total / 2)
}

struct Conv1d {
    b: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    len: usize,
    out_len: usize,
    pad_left: usize,
    padded_len: usize,
    /// Zero-padded copy of the input, `[B, C_in, padded_len]`.
    xp: Vec<f64>,
}

impl Op for Conv1d {
    fn name(&self) -> &'static str {
        "conv1d"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let w = inputs[1].data();
        let (cin, cout, k, s, lo, lp) = (self.cin, self.cout, self.k, self.stride, self.out_len, self.padded_len);
        let mut gxp = needs[0].then(|| vec![0.0; self.b * cin * lp]);
        let mut gw = needs[1].then(|| vec![0.0; w.len()]);
        for bi in 0..self.b {
            for o in 0..cout {
                let grow = &g[(bi * cout + o) * lo..(bi * cout + o + 1) * lo];
                for i in 0..cin {
                    let xrow = &self.xp[(bi * cin + i) * lp..(bi * cin + i + 1) * lp];
                    for j in 0..k {
                        let widx = (o * cin + i) * k + j;
                        if let Some(gw) = gw.as_mut() {
                            let mut acc = 0.0;
                            for (t, gv) in grow.iter().enumerate() {
                                acc += gv * xrow[t * s + j];
                            }
                            gw[widx] += acc;
                        }
                        if let Some(gxp) = gxp.as_mut() {
                            let wv = w[widx];
                            let gx_row = &mut gxp[(bi * cin + i) * lp..(bi * cin + i + 1) * lp];
                            for (t, gv) in grow.iter().enumerate() {
                                gx_row[t * s + j] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
        let gx = gxp.map(|gxp| {
            let mut gx = vec![0.0; self.b * cin * self.len];
            for row in 0..self.b * cin {
                gx[row * self.len..(row + 1) * self.len]
                    .copy_from_slice(&gxp[row * lp + self.pad_left..row * lp + self.pad_left + self.len]);
            }
            gx
        });
        vec![gx, gw]
    }
}

// ---------------------------------------------------------------- pointwise

/// `y[b, o, t] = Σ_i w[i, o] · x[b, i, t]` with `w: [C_in, C_out]`.
struct Pointwise {
    b: usize,
    cin: usize,
    cout: usize,
    len: usize,
}

impl Op for Pointwise {
    fn name(&self) -> &'static str {
        "pointwise"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let (cin, cout, l) = (self.cin, self.cout, self.len);
        let mut gx = needs[0].then(|| vec![0.0; x.len()]);
        let mut gw = needs[1].then(|| vec![0.0; w.len()]);
        for bi in 0..self.b {
            for i in 0..cin {
                let xrow = &x[(bi * cin + i) * l..(bi * cin + i + 1) * l];
                for o in 0..cout {
                    let grow = &g[(bi * cout + o) * l..(bi * cout + o + 1) * l];
                    if let Some(gw) = gw.as_mut() {
                        gw[i * cout + o] += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    if let Some(gx) = gx.as_mut() {
                        let wv = w[i * cout + o];
                        for (d, gv) in gx[(bi * cin + i) * l..(bi * cin + i + 1) * l].iter_mut().zip(grow) {
                            *d += wv * gv;
                        }
                    }
                }
            }
        }
        vec![gx, gw]
    }
}

// ---------------------------------------------------------------- subsample

struct Subsample {
    rows: usize,
    len: usize,
    out_len: usize,
    stride: usize,
}

impl Op for Subsample {
    fn name(&self) -> &'static str {
        "subsample_time"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut gx = vec![0.0; self.rows * self.len];
        for r in 0..self.rows {
            for t in 0..self.out_len {
                gx[r * self.len + t * self.stride] = g[r * self.out_len + t];
            }
        }
        vec![Some(gx)]
    }
}

// ---------------------------------------------------------------- batch norm

/// Running statistics for one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of train-mode updates folded in so far.
    pub updates: u64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, batch: &BatchStats) {
        let n = batch.count as f64;
        let unbias = if batch.count > 1 { n / (n - 1.0) } else { 1.0 };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - BN_MOMENTUM) * self.mean[c] + BN_MOMENTUM * batch.mean[c];
            self.var[c] = (1.0 - BN_MOMENTUM) * self.var[c] + BN_MOMENTUM * batch.var[c] * unbias;
        }
        self.updates += 1;
    }
}

/// Per-channel statistics of one train-mode batch (biased variance).
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

struct BatchNorm {
    b: usize,
    c: usize,
    l: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

impl Op for BatchNorm {
    fn name(&self) -> &'static str {
        "batchnorm"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let gamma = inputs[1].data();
        let (b, c, l) = (self.b, self.c, self.l);
        let n = (b * l) as f64;
        let mut gx = needs[0].then(|| vec![0.0; b * c * l]);
        let mut ggamma = vec![0.0; c];
        let mut gbeta = vec![0.0; c];
        for ch in 0..c {
            let (mut sg, mut sgx) = (0.0, 0.0);
            for bi in 0..b {
                let off = (bi * c + ch) * l;
                for t in 0..l {
                    sg += g[off + t];
                    sgx += g[off + t] * self.xhat[off + t];
                }
            }
            ggamma[ch] = sgx;
            gbeta[ch] = sg;
            if let Some(gx) = gx.as_mut() {
                let scale = gamma[ch] * self.inv_std[ch];
                for bi in 0..b {
                    let off = (bi * c + ch) * l;
                    for t in 0..l {
                        gx[off + t] = if self.train {
                            scale * (g[off + t] - sg / n - self.xhat[off + t] * sgx / n)
                        } else {
                            scale * g[off + t]
                        };
                    }
                }
            }
        }
        vec![gx, needs[1].then_some(ggamma), needs[2].then_some(gbeta)]
    }
}

// ---------------------------------------------------------------- pooling / affine / loss

struct AvgPoolTime {
    l: usize,
}
impl Op for AvgPoolTime {
    fn name(&self) -> &'static str {
        "avgpool_time"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let inv = 1.0 / self.l as f64;
        vec![Some(g.iter().flat_map(|&gv| std::iter::repeat(gv * inv).take(self.l)).collect())]
    }
}

struct Affine {
    b: usize,
    d: usize,
    o: usize,
}
impl Op for Affine {
    fn name(&self) -> &'static str {
        "affine"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mm = MatMul { m: self.b, k: self.d, p: self.o };
        let mut out = mm.backward(&inputs[..2], inputs[0], g, &needs[..2]);
        out.push(needs[2].then(|| {
            let mut gb = vec![0.0; self.o];
            for row in g.chunks(self.o) {
                gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            gb
        }));
        out
    }
}

struct CrossEntropy {
    probs: Vec<f64>,
    targets: Vec<usize>,
    k: usize,
}
impl Op for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let b = self.targets.len() as f64;
        let mut gl: Vec<f64> = self.probs.iter().map(|p| p * g[0] / b).collect();
        for (i, &t) in self.targets.iter().enumerate() {
            gl[i * self.k + t] -= g[0] / b;
        }
        vec![Some(gl)]
    }
}

// ---------------------------------------------------------------- graph API

impl Graph {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(KwsError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `a[m×k] · b[k×p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, p) = match (sa, sb) {
            ([m, k], [k2, p]) if k == k2 => (*m, *k, *p),
            _ => return Err(KwsError::dim("matmul", sa, sb)),
        };
        let out = matmul_raw(self.data(a), self.data(b), m, k, p);
        self.count("matmul", (m * k * p) as u64);
        Ok(self.push(&[a, b], Tensor::from_parts(vec![m, p], out), Box::new(MatMul { m, k, p })))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let &[rows, cols] = self.shape(a) else {
            return Err(KwsError::dim("transpose", self.shape(a), &[0, 0]));
        };
        let out = transpose_raw(self.data(a), rows, cols);
        Ok(self.push(&[a], Tensor::from_parts(vec![cols, rows], out), Box::new(Transpose { rows, cols })))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(&[a, b], Tensor::from_parts(shape, out), Box::new(Add)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(&[a, b], Tensor::from_parts(shape, out), Box::new(Mul)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(&[a], Tensor::from_parts(shape, out), Box::new(Scale(factor)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(&[a], Tensor::scalar(s), Box::new(Sum))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push(&[a], Tensor::from_parts(shape, out), Box::new(Relu))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(&[a], t, Box::new(Reshape)))
    }

    /// Concatenates matrices `[n×d_i]` along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first().map(|&p| self.shape(p)) {
            Some(&[r, _]) => r,
            _ => return Err(KwsError::Contract("concat_cols needs matrices".into())),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match *self.shape(p) {
                [r, w] if r == rows => widths.push(w),
                _ => return Err(KwsError::dim("concat_cols", self.shape(parts[0]), self.shape(p))),
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(parts, Tensor::from_parts(vec![rows, total], out), Box::new(ConcatCols { widths, rows })))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(KwsError::Contract(format!("softmax axis {axis} invalid for shape {shape:?}")));
        }
        check_finite("softmax", self.data(a))?;
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let y = softmax_raw(self.data(a), outer, n, inner);
        Ok(self.push(&[a], Tensor::from_parts(shape, y), Box::new(Softmax { outer, axis_len: n, inner })))
    }

    /// Cross-correlation with "same" zero padding: output length `ceil(L / stride)`.
    /// `x: [B, C_in, L]` or `[C_in, L]`, `w: [C_out, C_in, k]` with odd `k`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (b, cin, len) = bcl("conv1d", &xs)?;
        let &[cout, wcin, k] = self.shape(w) else {
            return Err(KwsError::dim("conv1d", &xs, self.shape(w)));
        };
        if wcin != cin {
            return Err(KwsError::dim("conv1d", &xs, self.shape(w)));
        }
        if k % 2 == 0 {
            return Err(KwsError::config(format!("conv1d kernel length must be odd, got {k}")));
        }
        if stride == 0 {
            return Err(KwsError::config("conv1d stride must be positive"));
        }
        let (out_len, pad_left) = same_padding(len, k, stride);
        let padded_len = ((out_len - 1) * stride + k).max(len + pad_left);
        let xd = self.data(x);
        let mut xp = vec![0.0; b * cin * padded_len];
        for row in 0..b * cin {
            xp[row * padded_len + pad_left..row * padded_len + pad_left + len]
                .copy_from_slice(&xd[row * len..(row + 1) * len]);
        }
        let wd = self.data(w);
        let mut y = vec![0.0; b * cout * out_len];
        for bi in 0..b {
            for o in 0..cout {
                let yrow = &mut y[(bi * cout + o) * out_len..(bi * cout + o + 1) * out_len];
                for i in 0..cin {
                    let xrow = &xp[(bi * cin + i) * padded_len..(bi * cin + i + 1) * padded_len];
                    for j in 0..k {
                        let wv = wd[(o * cin + i) * k + j];
                        if stride == 1 {
                            for (yv, xv) in yrow.iter_mut().zip(&xrow[j..j + out_len]) {
                                *yv += wv * xv;
                            }
                        } else {
                            for (t, yv) in yrow.iter_mut().enumerate() {
                                *yv += wv * xrow[t * stride + j];
                            }
                        }
                    }
                }
            }
        }
        self.count("conv1d", (b * cout * cin * k * out_len) as u64);
        let shape = with_batch(&xs, b, cout, out_len);
        let op = Conv1d { b, cin, cout, k, stride, len, out_len, pad_left, padded_len, xp };
        Ok(self.push(&[x, w], Tensor::from_parts(shape, y), Box::new(op)))
    }

    /// Position-wise channel mixing, `w: [C_in, C_out]`.
    pub fn pointwise(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (b, cin, l) = bcl("pointwise", &xs)?;
        let &[wcin, cout] = self.shape(w) else {
            return Err(KwsError::dim("pointwise", &xs, self.shape(w)));
        };
        if wcin != cin {
            return Err(KwsError::dim("pointwise", &xs, self.shape(w)));
        }
        let (xd, wd) = (self.data(x), self.data(w));
        let mut y = vec![0.0; b * cout * l];
        for bi in 0..b {
            for i in 0..cin {
                let xrow = &xd[(bi * cin + i) * l..(bi * cin + i + 1) * l];
                for o in 0..cout {
                    let wv = wd[i * cout + o];
                    for (yv, xv) in y[(bi * cout + o) * l..(bi * cout + o + 1) * l].iter_mut().zip(xrow) {
                        *yv += wv * xv;
                    }
                }
            }
        }
        self.count("pointwise", (b * cin * cout * l) as u64);
        let shape = with_batch(&xs, b, cout, l);
        Ok(self.push(&[x, w], Tensor::from_parts(shape, y), Box::new(Pointwise { b, cin, cout, len: l })))
    }

    /// Keeps every `stride`-th time step starting at 0; output length `ceil(L / stride)`.
    pub fn subsample_time(&mut self, x: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (b, c, len) = bcl("subsample_time", &xs)?;
        if stride == 0 {
            return Err(KwsError::config("stride must be positive"));
        }
        let out_len = len.div_ceil(stride);
        let xd = self.data(x);
        let mut y = Vec::with_capacity(b * c * out_len);
        for r in 0..b * c {
            y.extend((0..out_len).map(|t| xd[r * len + t * stride]));
        }
        let op = Subsample { rows: b * c, len, out_len, stride };
        Ok(self.push(&[x], Tensor::from_parts(with_batch(&xs, b, c, out_len), y), Box::new(op)))
    }

    /// Batch normalization over batch and time jointly, per channel.
    ///
    /// In train mode the returned [`BatchStats`] should be folded into the
    /// running statistics by the caller. In eval mode `stats` is used as is;
    /// stats that never saw a train-mode update are logged.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        let (b, c, l) = bcl("batchnorm", &xs)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.channels() != c {
            return Err(KwsError::dim("batchnorm", &xs, self.shape(gamma)));
        }
        let n = b * l;
        let xd = self.data(x);
        let (mean, var, batch) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(KwsError::Contract(
                        "batchnorm in train mode needs more than one value per channel".into(),
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let vals = (0..b).flat_map(|bi| &xd[(bi * c + ch) * l..(bi * c + ch + 1) * l]);
                    let m = vals.clone().sum::<f64>() / n as f64;
                    let v = vals.map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
                    mean[ch] = m;
                    var[ch] = v;
                }
                let batch = BatchStats { mean: mean.clone(), var: var.clone(), count: n };
                (mean, var, Some(batch))
            }
            Mode::Eval => {
                if stats.updates == 0 {
                    log::warn!("batchnorm evaluated before any train-mode update; using initial statistics");
                }
                (stats.mean.clone(), stats.var.clone(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * l;
                for t in 0..l {
                    let h = (xd[off + t] - mean[ch]) * inv_std[ch];
                    xhat[off + t] = h;
                    y[off + t] = gd[ch] * h + bd[ch];
                }
            }
        }
        let op = BatchNorm { b, c, l, xhat, inv_std, train: mode == Mode::Train };
        Ok((self.push(&[x, gamma, beta], Tensor::from_parts(xs, y), Box::new(op)), batch))
    }

    /// Mean over the time axis: `[B, C, L] -> [B, C]`.
    pub fn avgpool_time(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let &[b, c, l] = xs.as_slice() else {
            return Err(KwsError::dim("avgpool_time", &xs, &[0, 0, 0]));
        };
        let y = self.data(x).chunks(l).map(|r| r.iter().sum::<f64>() / l as f64).collect();
        Ok(self.push(&[x], Tensor::from_parts(vec![b, c], y), Box::new(AvgPoolTime { l })))
    }

    /// `x[B×D] · w[D×O] + bias[O]`.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (b, d, o) = match (xs.as_slice(), ws.as_slice()) {
            ([b, d], [d2, o]) if d == d2 => (*b, *d, *o),
            _ => return Err(KwsError::dim("affine", &xs, &ws)),
        };
        if self.shape(bias) != [o] {
            return Err(KwsError::dim("affine", &ws, self.shape(bias)));
        }
        let mut y = matmul_raw(self.data(x), self.data(w), b, d, o);
        let bd = self.data(bias);
        for row in y.chunks_mut(o) {
            row.iter_mut().zip(bd).for_each(|(a, b)| *a += b);
        }
        self.count("affine", (b * d * o) as u64);
        Ok(self.push(&[x, w, bias], Tensor::from_parts(vec![b, o], y), Box::new(Affine { b, d, o })))
    }

    /// Mean negative log-likelihood of `targets` under softmax(`logits`), `logits: [B, K]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        let &[b, k] = ls.as_slice() else {
            return Err(KwsError::dim("cross_entropy", &ls, &[targets.len(), 0]));
        };
        if b != targets.len() {
            return Err(KwsError::dim("cross_entropy", &ls, &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(KwsError::Contract(format!("target class {t} out of range for {k} classes")));
        }
        check_finite("cross_entropy", self.data(logits))?;
        let probs = softmax_raw(self.data(logits), b, k, 1);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -(probs[i * k + t].max(f64::MIN_POSITIVE)).ln())
            .sum::<f64>()
            / b as f64;
        let op = CrossEntropy { probs, targets: targets.to_vec(), k };
        Ok(self.push(&[logits], Tensor::scalar(loss), Box::new(op)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Tensor::uniform([3, 3], 1.0, &mut rng);
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(3));
        let bv = g.constant(b.clone());
        let out = g.matmul(i, bv).unwrap();
        assert_eq!(g.value(out).data(), b.data());

        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = g.constant(t(&[2, 1], &[0.0, 1.0]));
        let out = g.matmul(a, c).unwrap();
        assert_eq!(g.value(out).data(), &[2.0, 4.0]);
        assert_eq!(g.shape(out), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::uniform([4, 5], 1.0, &mut rng);
        let b = Tensor::uniform([5, 3], 1.0, &mut rng);
        let report = check_gradients(&[a, b], GradCheck::default(), |g, v| {
            let p = g.matmul(v[0], v[1])?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn conv1d_identity_kernel_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform([1, 9], 2.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = g.constant(t(&[1, 1, 3], &[0.0, 1.0, 0.0]));
        let y = g.conv1d(xv, w, 1).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn conv1d_box_kernel_zero_pads_the_edges() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let w = g.constant(t(&[1, 1, 3], &[1.0, 1.0, 1.0]));
        let y = g.conv1d(x, w, 1).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv1d_same_padding_halves_with_ceil() {
        let mut len = 100;
        let mut trace = vec![len];
        for _ in 0..4 {
            let mut g = Graph::new();
            let x = g.constant(Tensor::zeros([1, 2, len]));
            let w = g.constant(Tensor::zeros([2, 2, 3]));
            let y = g.conv1d(x, w, 2).unwrap();
            len = g.shape(y)[2];
            trace.push(len);
        }
        assert_eq!(trace, [100, 50, 25, 13, 7]);
    }

    #[test]
    fn conv1d_rejects_even_kernels() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 5]));
        let w = g.constant(Tensor::zeros([1, 1, 2]));
        assert!(matches!(g.conv1d(x, w, 1), Err(KwsError::Config(_))));
    }

    #[test]
    fn conv1d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for stride in [1, 2] {
            let x = Tensor::uniform([2, 7], 1.0, &mut rng);
            let w = Tensor::uniform([3, 2, 3], 1.0, &mut rng);
            let r = Tensor::uniform([3, 7usize.div_ceil(stride)], 1.0, &mut rng);
            let report = check_gradients(&[x, w], GradCheck::default(), |g, v| {
                let y = g.conv1d(v[0], v[1], stride)?;
                let r = g.constant(r.clone());
                let p = g.mul(y, r)?;
                Ok(g.sum(p))
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-6, "stride {stride}: {report:?}");
        }
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([4]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
        let x = g.constant(t(&[2], &[1000.0, 1000.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_non_finite_and_bad_axis() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(g.softmax(x, 0), Err(KwsError::Numeric(_))));
        let x = g.constant(Tensor::zeros([2, 2]));
        assert!(g.softmax(x, 2).is_err());
    }

    #[test]
    fn softmax_jvp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for axis in 0..3 {
            let x = Tensor::uniform([3, 4, 5], 2.0, &mut rng);
            let r = Tensor::uniform([3, 4, 5], 1.0, &mut rng);
            let report = check_gradients(&[x], GradCheck::default(), |g, v| {
                let y = g.softmax(v[0], axis)?;
                let r = g.constant(r.clone());
                let p = g.mul(y, r)?;
                Ok(g.sum(p))
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-6, "axis {axis}: {report:?}");
        }
    }

    fn channel_moments(y: &[f64], b: usize, c: usize, l: usize, ch: usize) -> (f64, f64) {
        let vals: Vec<f64> = (0..b).flat_map(|bi| y[(bi * c + ch) * l..(bi * c + ch + 1) * l].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        (m, v)
    }

    #[test]
    fn batchnorm_train_normalizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform([4, 3, 10], 20.0, &mut rng));
        let gamma = g.constant(Tensor::full([3], 1.0));
        let beta = g.constant(Tensor::zeros([3]));
        let stats = RunningStats::new(3);
        let (y, batch) = g.batchnorm(x, gamma, beta, &stats, Mode::Train).unwrap();
        for ch in 0..3 {
            let (m, v) = channel_moments(g.data(y), 4, 3, 10, ch);
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-6, "{v}");
        }
        let mut stats = stats;
        stats.update(&batch.unwrap());
        assert_eq!(stats.updates, 1);
    }

    #[test]
    fn batchnorm_constant_channel_gives_beta() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([2, 1, 5], 3.0));
        let gamma = g.constant(Tensor::full([1], 2.0));
        let beta = g.constant(Tensor::full([1], 0.25));
        let (y, _) = g.batchnorm(x, gamma, beta, &RunningStats::new(1), Mode::Train).unwrap();
        assert!(g.data(y).iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2], &[2.0, 4.0]));
        let gamma = g.constant(Tensor::full([1], 1.0));
        let beta = g.constant(Tensor::zeros([1]));
        let stats = RunningStats { mean: vec![1.0], var: vec![4.0], updates: 3 };
        let (y, batch) = g.batchnorm(x, gamma, beta, &stats, Mode::Eval).unwrap();
        assert!(batch.is_none());
        let s = (4.0 + BN_EPS).sqrt();
        for (got, want) in g.data(y).iter().zip([1.0 / s, 3.0 / s]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn batchnorm_train_rejects_single_value() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 2, 1]));
        let gamma = g.constant(Tensor::full([2], 1.0));
        let beta = g.constant(Tensor::zeros([2]));
        assert!(g.batchnorm(x, gamma, beta, &RunningStats::new(2), Mode::Train).is_err());
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for mode in [Mode::Train, Mode::Eval] {
            let x = Tensor::uniform([3, 2, 4], 2.0, &mut rng);
            let gamma = Tensor::uniform([2], 1.5, &mut rng);
            let beta = Tensor::uniform([2], 1.0, &mut rng);
            let r = Tensor::uniform([3, 2, 4], 1.0, &mut rng);
            let stats = RunningStats { mean: vec![0.3, -0.2], var: vec![1.5, 0.7], updates: 1 };
            let report = check_gradients(&[x, gamma, beta], GradCheck::default(), |g, v| {
                let (y, _) = g.batchnorm(v[0], v[1], v[2], &stats, mode)?;
                let r = g.constant(r.clone());
                let p = g.mul(y, r)?;
                Ok(g.sum(p))
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-5, "{mode:?}: {report:?}");
        }
    }

    #[test]
    fn relu_pool_affine_identities() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.data(y), &[0.0, 0.0, 2.0]);

        let x = g.constant(t(&[1, 2, 2], &[1.0, 3.0, -2.0, 2.0]));
        let p = g.avgpool_time(x).unwrap();
        assert_eq!(g.data(p), &[2.0, 0.0]);

        let x = g.constant(t(&[1, 2], &[5.0, -1.0]));
        let w = g.constant(Tensor::eye(2));
        let b = g.constant(Tensor::zeros([2]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.data(y), &[5.0, -1.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_k() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros([2, 4]));
        let loss = g.cross_entropy(l, &[0, 3]).unwrap();
        assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-12);
        assert!(g.cross_entropy(l, &[4, 0]).is_err());
    }

    #[test]
    fn remaining_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::uniform([2, 3, 5], 1.0, &mut rng);
        let w = Tensor::uniform([3, 4], 1.0, &mut rng);
        let fc = Tensor::uniform([4, 3], 1.0, &mut rng);
        let bias = Tensor::uniform([3], 1.0, &mut rng);
        let report = check_gradients(&[x, w, fc, bias], GradCheck::default(), |g, v| {
            let h = g.pointwise(v[0], v[1])?;
            let h = g.relu(h);
            let h = g.subsample_time(h, 2)?;
            let p = g.avgpool_time(h)?;
            let logits = g.affine(p, v[2], v[3])?;
            g.cross_entropy(logits, &[2, 0])
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn transpose_concat_scale_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a = Tensor::uniform([3, 2], 1.0, &mut rng);
        let b = Tensor::uniform([3, 4], 1.0, &mut rng);
        let r = Tensor::uniform([6, 3], 1.0, &mut rng);
        let report = check_gradients(&[a, b], GradCheck::default(), |g, v| {
            let c = g.concat_cols(&[v[0], v[1]])?;
            let c = g.scale(c, 0.5);
            let ct = g.transpose(c)?;
            let r = g.constant(r.clone());
            let p = g.mul(ct, r)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn mult_counter_tracks_conv_exactly() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([2, 3, 11]));
        let w = g.constant(Tensor::zeros([4, 3, 3]));
        g.conv1d(x, w, 2).unwrap();
        assert_eq!(g.mults_by_op()["conv1d"], (2 * 4 * 3 * 3 * 6) as u64);
    }
}

//! Temporal lambda layers.
//!
//! Every query position `t` receives a linear function
//! `λ_t = λᶜ + λᵖ_t` built from the whole context:
//!
//! * content lambda `λᶜ = σ(K)ᵀ V`, `σ` a softmax over positions per key
//!   dimension;
//! * position lambda `λᵖ_t = E_tᵀ V`, with `E_t` either a full absolute
//!   table (global context) or an `r`-tap relative table slid along time
//!   (local context, the lambda convolution).
//!
//! The output for head `j` is `λ_tᵀ q_tʲ`; heads are concatenated.
//!
//! Batched layouts used by the graph ops: queries `[B, h·d_k, n]`, keys and
//! values `[B, d, n]`, content lambdas `[B, d_v, d_k]` and position lambdas
//! `[B, n, d_v, d_k]`.

use rand::Rng;

use crate::error::{KwsError, Result};
use crate::tensor::{Graph, Op, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Context {
    /// Absolute `n × n × d_k` embedding for sequences of exactly `n` steps.
    Global { n: usize },
    /// Relative `r × d_k` embedding, `r` odd.
    Local { r: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LambdaConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub h: usize,
    pub d_k: usize,
    pub context: Context,
}

impl LambdaConfig {
    pub const DEFAULT_HEADS: usize = 4;
    pub const DEFAULT_KEY_DEPTH: usize = 16;
    pub const DEFAULT_SCOPE: usize = 23;

    /// `h = 4`, `d_k = 16`, local scope `r = 23`.
    pub fn local(d_in: usize, d_out: usize) -> Result<Self> {
        let c = LambdaConfig {
            d_in,
            d_out,
            h: Self::DEFAULT_HEADS,
            d_k: Self::DEFAULT_KEY_DEPTH,
            context: Context::Local { r: Self::DEFAULT_SCOPE },
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 || self.h == 0 || self.d_k == 0 {
            return Err(KwsError::config(format!("lambda extents must be positive: {self:?}")));
        }
        if self.d_out % self.h != 0 {
            return Err(KwsError::config(format!(
                "lambda d_out = {} is not divisible by h = {}",
                self.d_out, self.h
            )));
        }
        match self.context {
            Context::Local { r } if r % 2 == 0 => {
                Err(KwsError::config(format!("lambda scope r must be odd, got {r}")))
            }
            Context::Global { n: 0 } => Err(KwsError::config("global context length must be positive")),
            _ => Ok(()),
        }
    }

    pub fn d_v(&self) -> usize {
        self.d_out / self.h
    }

    pub fn embedding_shape(&self) -> Vec<usize> {
        match self.context {
            Context::Global { n } => vec![n, n, self.d_k],
            Context::Local { r } => vec![r, self.d_k],
        }
    }

    /// Weights excluding any normalization around the projections.
    pub fn param_count(&self) -> usize {
        let proj = self.d_in * (self.h * self.d_k + self.d_k + self.d_v());
        proj + self.embedding_shape().iter().product::<usize>()
    }

    /// Multiplies for one forward pass over `n` positions (batch 1).
    pub fn mults(&self, n: usize) -> LambdaMults {
        let (dk, dv, h) = (self.d_k as u64, self.d_v() as u64, self.h as u64);
        let n64 = n as u64;
        let taps = match self.context {
            Context::Global { .. } => n64,
            Context::Local { r } => r as u64,
        };
        LambdaMults {
            projections: n64 * self.d_in as u64 * (h * dk + dk + dv),
            content: n64 * dk * dv,
            position: n64 * taps * dk * dv,
            apply: n64 * h * dk * dv,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LambdaMults {
    pub projections: u64,
    pub content: u64,
    pub position: u64,
    pub apply: u64,
}

impl LambdaMults {
    pub fn total(&self) -> u64 {
        self.projections + self.content + self.position + self.apply
    }
}

/// Projection weights (`[d_in, ·]`, applied position-wise) and the positional embedding.
#[derive(Clone, Debug)]
pub struct LambdaParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub e: Tensor,
}

impl LambdaParams {
    /// Projections uniform in `±1/√d_in`; `E` normal with std `1/√d_k`.
    pub fn init<R: Rng + ?Sized>(cfg: &LambdaConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let b = 1.0 / (cfg.d_in as f64).sqrt();
        Ok(LambdaParams {
            w_q: Tensor::uniform([cfg.d_in, cfg.h * cfg.d_k], b, rng),
            w_k: Tensor::uniform([cfg.d_in, cfg.d_k], b, rng),
            w_v: Tensor::uniform([cfg.d_in, cfg.d_v()], b, rng),
            e: Tensor::normal(cfg.embedding_shape(), 1.0 / (cfg.d_k as f64).sqrt(), rng),
        })
    }

    fn check(&self, cfg: &LambdaConfig) -> Result<()> {
        let want = [
            (&self.w_q, vec![cfg.d_in, cfg.h * cfg.d_k]),
            (&self.w_k, vec![cfg.d_in, cfg.d_k]),
            (&self.w_v, vec![cfg.d_in, cfg.d_v()]),
            (&self.e, cfg.embedding_shape()),
        ];
        for (t, s) in want {
            if t.shape() != s.as_slice() {
                return Err(KwsError::dim("lambda params", t.shape(), &s));
            }
        }
        if !self.e.all_finite() {
            return Err(KwsError::Numeric("positional embedding is not finite".into()));
        }
        Ok(())
    }
}

/// Expands a relative `[r, d_k]` table into the absolute `[n, n, d_k]` table
/// it induces: `E[t, m] = R[m − t + r/2]` inside the scope, zero outside.
pub fn materialize_global_embedding(rel: &Tensor, n: usize) -> Result<Tensor> {
    let &[r, dk] = rel.shape() else {
        return Err(KwsError::dim("materialize_global_embedding", rel.shape(), &[0, 0]));
    };
    if r % 2 == 0 {
        return Err(KwsError::config(format!("lambda scope r must be odd, got {r}")));
    }
    let c = (r / 2) as isize;
    let mut e = Tensor::zeros([n, n, dk]);
    for t in 0..n {
        for m in 0..n {
            let o = m as isize - t as isize + c;
            if (0..r as isize).contains(&o) {
                for k in 0..dk {
                    e.set(&[t, m, k], rel.at(&[o as usize, k]));
                }
            }
        }
    }
    Ok(e)
}

// ---------------------------------------------------------------- graph ops

fn batched(g: &Graph, v: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match *g.shape(v) {
        [b, c, n] => Ok((b, c, n)),
        _ => Err(KwsError::dim(op, g.shape(v), &[0, 0, 0])),
    }
}

/// `λᶜ[b, v, k] = Σ_t ks[b, k, t] · v[b, v, t]`.
struct ContentLambda {
    b: usize,
    dk: usize,
    dv: usize,
    n: usize,
}

impl Op for ContentLambda {
    fn name(&self) -> &'static str {
        "lambda_content"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (ks, vs) = (inputs[0].data(), inputs[1].data());
        let (dk, dv, n) = (self.dk, self.dv, self.n);
        let mut gk = needs[0].then(|| vec![0.0; ks.len()]);
        let mut gvv = needs[1].then(|| vec![0.0; vs.len()]);
        for bi in 0..self.b {
            for v in 0..dv {
                let vrow = &vs[(bi * dv + v) * n..(bi * dv + v + 1) * n];
                for k in 0..dk {
                    let gl = g[(bi * dv + v) * dk + k];
                    let krow = (bi * dk + k) * n;
                    if let Some(gk) = gk.as_mut() {
                        for (d, x) in gk[krow..krow + n].iter_mut().zip(vrow) {
                            *d += gl * x;
                        }
                    }
                    if let Some(gvv) = gvv.as_mut() {
                        let dst = &mut gvv[(bi * dv + v) * n..(bi * dv + v + 1) * n];
                        for (d, x) in dst.iter_mut().zip(&ks[krow..krow + n]) {
                            *d += gl * x;
                        }
                    }
                }
            }
        }
        vec![gk, gvv]
    }
}

/// Local: `λᵖ[b, t, v, k] = Σ_o E[o, k] · v[b, v, t + o − r/2]` (zero outside).
/// Global: `λᵖ[b, t, v, k] = Σ_m E[t, m, k] · v[b, v, m]`.
struct PositionLambda {
    b: usize,
    dk: usize,
    dv: usize,
    n: usize,
    /// `None` for the global table.
    r: Option<usize>,
}

impl PositionLambda {
    /// Calls `f(t, m, e_index_base)` for every (query, context) pair the
    /// embedding connects; the embedding row is `e[base..base + d_k]`.
    fn for_each_pair(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (n, dk) = (self.n, self.dk);
        match self.r {
            Some(r) => {
                let c = (r / 2) as isize;
                for t in 0..n {
                    for o in 0..r {
                        let m = t as isize + o as isize - c;
                        if (0..n as isize).contains(&m) {
                            f(t, m as usize, o * dk);
                        }
                    }
                }
            }
            None => {
                for t in 0..n {
                    for m in 0..n {
                        f(t, m, (t * n + m) * dk);
                    }
                }
            }
        }
    }
}

impl Op for PositionLambda {
    fn name(&self) -> &'static str {
        "lambda_position"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (e, vs) = (inputs[0].data(), inputs[1].data());
        let (b, dk, dv, n) = (self.b, self.dk, self.dv, self.n);
        let mut ge = needs[0].then(|| vec![0.0; e.len()]);
        let mut gvv = needs[1].then(|| vec![0.0; vs.len()]);
        for bi in 0..b {
            self.for_each_pair(|t, m, eb| {
                let erow = &e[eb..eb + dk];
                for v in 0..dv {
                    let gl = &g[((bi * n + t) * dv + v) * dk..((bi * n + t) * dv + v + 1) * dk];
                    let x = vs[(bi * dv + v) * n + m];
                    if let Some(ge) = ge.as_mut() {
                        for (d, gv) in ge[eb..eb + dk].iter_mut().zip(gl) {
                            *d += gv * x;
                        }
                    }
                    if let Some(gvv) = gvv.as_mut() {
                        gvv[(bi * dv + v) * n + m] += gl.iter().zip(erow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            });
        }
        vec![ge, gvv]
    }
}

/// `y[b, j·d_v + v, t] = Σ_k q[b, j·d_k + k, t] · (λᶜ[b, v, k] + λᵖ[b, t, v, k])`.
struct ApplyLambda {
    b: usize,
    h: usize,
    dk: usize,
    dv: usize,
    n: usize,
    has_position: bool,
}

impl ApplyLambda {
    /// Fills `lam` (`[d_v, d_k]`) with the combined lambda for `(b, t)`.
    fn lambda_at(&self, lc: &[f64], lp: Option<&[f64]>, bi: usize, t: usize, lam: &mut [f64]) {
        let w = self.dv * self.dk;
        lam.copy_from_slice(&lc[bi * w..(bi + 1) * w]);
        if let Some(lp) = lp {
            let off = (bi * self.n + t) * w;
            lam.iter_mut().zip(&lp[off..off + w]).for_each(|(a, b)| *a += b);
        }
    }
}

impl Op for ApplyLambda {
    fn name(&self) -> &'static str {
        "lambda_apply"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (q, lc) = (inputs[0].data(), inputs[1].data());
        let lp = self.has_position.then(|| inputs[2].data());
        let (b, h, dk, dv, n) = (self.b, self.h, self.dk, self.dv, self.n);
        let w = dv * dk;
        let mut gq = needs[0].then(|| vec![0.0; q.len()]);
        let mut glc = needs[1].then(|| vec![0.0; lc.len()]);
        let mut glp = lp.filter(|_| needs[2]).map(|lp| vec![0.0; lp.len()]);
        let mut lam = vec![0.0; w];
        let mut glam = vec![0.0; w];
        for bi in 0..b {
            for t in 0..n {
                self.lambda_at(lc, lp, bi, t, &mut lam);
                glam.fill(0.0);
                for j in 0..h {
                    for v in 0..dv {
                        let gy = g[(bi * h * dv + j * dv + v) * n + t];
                        for k in 0..dk {
                            let qi = (bi * h * dk + j * dk + k) * n + t;
                            glam[v * dk + k] += gy * q[qi];
                            if let Some(gq) = gq.as_mut() {
                                gq[qi] += gy * lam[v * dk + k];
                            }
                        }
                    }
                }
                if let Some(glc) = glc.as_mut() {
                    glc[bi * w..(bi + 1) * w].iter_mut().zip(&glam).for_each(|(a, b)| *a += b);
                }
                if let Some(glp) = glp.as_mut() {
                    let off = (bi * n + t) * w;
                    glp[off..off + w].copy_from_slice(&glam);
                }
            }
        }
        let mut out = vec![gq, glc];
        if self.has_position {
            out.push(glp);
        }
        out
    }
}

impl Graph {
    /// Content lambda from normalized keys `[B, d_k, n]` and values `[B, d_v, n]`.
    pub fn lambda_content(&mut self, keys: Var, values: Var) -> Result<Var> {
        let (b, dk, n) = batched(self, keys, "lambda_content")?;
        let (b2, dv, n2) = batched(self, values, "lambda_content")?;
        if b != b2 || n != n2 {
            return Err(KwsError::dim("lambda_content", self.shape(keys), self.shape(values)));
        }
        let (ks, vs) = (self.data(keys), self.data(values));
        let mut out = vec![0.0; b * dv * dk];
        for bi in 0..b {
            for v in 0..dv {
                let vrow = &vs[(bi * dv + v) * n..(bi * dv + v + 1) * n];
                for k in 0..dk {
                    let krow = &ks[(bi * dk + k) * n..(bi * dk + k + 1) * n];
                    out[(bi * dv + v) * dk + k] = krow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                }
            }
        }
        self.count("lambda_content", (b * n * dk * dv) as u64);
        let t = Tensor::new([b, dv, dk], out)?;
        Ok(self.push(&[keys, values], t, Box::new(ContentLambda { b, dk, dv, n })))
    }

    /// Position lambdas `[B, n, d_v, d_k]`; `embedding` is `[r, d_k]` (local)
    /// or `[n, n, d_k]` (global).
    pub fn lambda_position(&mut self, embedding: Var, values: Var) -> Result<Var> {
        let (b, dv, n) = batched(self, values, "lambda_position")?;
        let es = self.shape(embedding).to_vec();
        let (dk, r) = match *es.as_slice() {
            [r, dk] if r % 2 == 1 => (dk, Some(r)),
            [r, _] => return Err(KwsError::config(format!("lambda scope r must be odd, got {r}"))),
            [n1, n2, dk] if n1 == n && n2 == n => (dk, None),
            _ => return Err(KwsError::dim("lambda_position", &es, self.shape(values))),
        };
        let op = PositionLambda { b, dk, dv, n, r };
        let (e, vs) = (self.data(embedding), self.data(values));
        let mut out = vec![0.0; b * n * dv * dk];
        for bi in 0..b {
            op.for_each_pair(|t, m, eb| {
                let erow = &e[eb..eb + dk];
                for v in 0..dv {
                    let x = vs[(bi * dv + v) * n + m];
                    let dst = &mut out[((bi * n + t) * dv + v) * dk..((bi * n + t) * dv + v + 1) * dk];
                    dst.iter_mut().zip(erow).for_each(|(d, e)| *d += e * x);
                }
            });
        }
        // Zero-padded taps are counted: the cost is the dense r (or n) per position.
        let taps = r.unwrap_or(n);
        self.count("lambda_position", (b * n * taps * dk * dv) as u64);
        let t = Tensor::new([b, n, dv, dk], out)?;
        Ok(self.push(&[embedding, values], t, Box::new(op)))
    }

    /// Applies content (and optionally position) lambdas to multi-query
    /// queries `[B, h·d_k, n]`, giving `[B, h·d_v, n]`.
    pub fn lambda_apply(&mut self, queries: Var, content: Var, position: Option<Var>) -> Result<Var> {
        let (b, hdk, n) = batched(self, queries, "lambda_apply")?;
        let &[b2, dv, dk] = self.shape(content) else {
            return Err(KwsError::dim("lambda_apply", self.shape(queries), self.shape(content)));
        };
        if b2 != b || hdk % dk != 0 {
            return Err(KwsError::dim("lambda_apply", self.shape(queries), self.shape(content)));
        }
        if let Some(p) = position {
            if self.shape(p) != [b, n, dv, dk] {
                return Err(KwsError::dim("lambda_apply", self.shape(p), &[b, n, dv, dk]));
            }
        }
        let h = hdk / dk;
        let op = ApplyLambda { b, h, dk, dv, n, has_position: position.is_some() };
        let q = self.data(queries);
        let lc = self.data(content);
        let lp = position.map(|p| self.data(p));
        let mut y = vec![0.0; b * h * dv * n];
        let mut lam = vec![0.0; dv * dk];
        for bi in 0..b {
            for t in 0..n {
                op.lambda_at(lc, lp, bi, t, &mut lam);
                for j in 0..h {
                    for v in 0..dv {
                        let mut acc = 0.0;
                        for k in 0..dk {
                            acc += q[(bi * hdk + j * dk + k) * n + t] * lam[v * dk + k];
                        }
                        y[(bi * h * dv + j * dv + v) * n + t] = acc;
                    }
                }
            }
        }
        self.count("lambda_apply", (b * n * h * dk * dv) as u64);
        let mut inputs = vec![queries, content];
        inputs.extend(position);
        let t = Tensor::new([b, h * dv, n], y)?;
        Ok(self.push(&inputs, t, Box::new(op)))
    }

    /// The full layer on `x: [B, d_in, n]` or `[d_in, n]`, with raw
    /// (unnormalized) queries and values.
    pub fn lambda_layer(&mut self, x: Var, w_q: Var, w_k: Var, w_v: Var, e: Var) -> Result<Var> {
        let unbatched = self.shape(x).len() == 2;
        let x3 = if unbatched {
            let s = self.shape(x).to_vec();
            self.reshape(x, &[1, s[0], s[1]])?
        } else {
            x
        };
        let q = self.pointwise(x3, w_q)?;
        let k = self.pointwise(x3, w_k)?;
        let v = self.pointwise(x3, w_v)?;
        let y = self.lambda_from_projections(q, k, v, e)?;
        if unbatched {
            let s = self.shape(y).to_vec();
            self.reshape(y, &s[1..])
        } else {
            Ok(y)
        }
    }

    /// Lambdas from already projected (and normalized) queries, keys and values.
    pub fn lambda_from_projections(&mut self, q: Var, k: Var, v: Var, e: Var) -> Result<Var> {
        let ks = self.softmax(k, 2)?;
        let lc = self.lambda_content(ks, v)?;
        let lp = self.lambda_position(e, v)?;
        self.lambda_apply(q, lc, Some(lp))
    }
}

// ---------------------------------------------------------------- plain functions

fn transpose_to_batched(t: &Tensor, op: &'static str) -> Result<Tensor> {
    let &[n, d] = t.shape() else {
        return Err(KwsError::dim(op, t.shape(), &[0, 0]));
    };
    Ok(Tensor::from_fn([1, d, n], |i| t.at(&[i % n, i / n])))
}

/// `σ(K)ᵀ V` with `K: [n, d_k]`, `V: [n, d_v]`; returns `[d_k, d_v]`.
pub fn content_lambda(k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if k.shape().first() != v.shape().first() {
        return Err(KwsError::dim("content_lambda", k.shape(), v.shape()));
    }
    let mut g = Graph::new();
    let kb = g.constant(transpose_to_batched(k, "content_lambda")?);
    let vb = g.constant(transpose_to_batched(v, "content_lambda")?);
    let ks = g.softmax(kb, 2)?;
    let lc = g.lambda_content(ks, vb)?;
    let &[_, dv, dk] = g.shape(lc) else { unreachable!() };
    let lc = g.value(lc);
    Ok(Tensor::from_fn([dk, dv], |i| lc.at(&[0, i % dv, i / dv])))
}

/// `E_nᵀ V` with `E_n: [n, d_k]`, `V: [n, d_v]`; returns `[d_k, d_v]`.
pub fn position_lambda(e_n: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let e = g.constant(e_n.clone());
    let v = g.constant(v.clone());
    let et = g.transpose(e)?;
    let out = g.matmul(et, v)?;
    Ok(g.take(out))
}

fn forward(x: &Tensor, p: &LambdaParams, cfg: &LambdaConfig) -> Result<Tensor> {
    cfg.validate()?;
    p.check(cfg)?;
    let &[d_in, n] = x.shape() else {
        return Err(KwsError::dim("lambda_forward", x.shape(), &[cfg.d_in, 0]));
    };
    if d_in != cfg.d_in {
        return Err(KwsError::dim("lambda_forward", x.shape(), &[cfg.d_in, n]));
    }
    if let Context::Global { n: gn } = cfg.context {
        if gn != n {
            return Err(KwsError::dim("lambda_forward", x.shape(), &[cfg.d_in, gn]));
        }
    }
    crate::tensor::check_finite("lambda_forward", x.data())?;
    let mut g = Graph::new();
    let vs = [x, &p.w_q, &p.w_k, &p.w_v, &p.e].map(|t| g.constant(t.clone()));
    let y = g.lambda_layer(vs[0], vs[1], vs[2], vs[3], vs[4])?;
    Ok(g.take(y))
}

/// Lambda layer over `x: [d_in, n]` with a global context; returns `[d_out, n]`.
pub fn lambda_forward(x: &Tensor, p: &LambdaParams, cfg: &LambdaConfig) -> Result<Tensor> {
    if !matches!(cfg.context, Context::Global { .. }) {
        return Err(KwsError::config("lambda_forward needs a global context"));
    }
    forward(x, p, cfg)
}

/// Lambda convolution over `x: [d_in, n]` with a local scope; returns `[d_out, n]`.
pub fn lambda_conv_forward(x: &Tensor, p: &LambdaParams, cfg: &LambdaConfig) -> Result<Tensor> {
    if !matches!(cfg.context, Context::Local { .. }) {
        return Err(KwsError::config("lambda_conv_forward needs a local context"));
    }
    forward(x, p, cfg)
}

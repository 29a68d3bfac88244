//! Scaled dot-product and multi-head self-attention, the quadratic reference
//! the lambda layer is compared against.

use rand::Rng;

use crate::error::{KwsError, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub n: usize,
    pub d: usize,
    pub h: usize,
    pub d_k: usize,
    pub d_v: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_k == 0 {
            return Err(KwsError::config("attention d_k must be positive"));
        }
        if self.n == 0 || self.d == 0 || self.h == 0 || self.d_v == 0 {
            return Err(KwsError::config(format!("attention extents must be positive: {self:?}")));
        }
        if self.h * self.d_v != self.d {
            return Err(KwsError::config(format!(
                "h·d_v = {}·{} must equal d = {}",
                self.h, self.d_v, self.d
            )));
        }
        Ok(())
    }
}

/// Per-head projections plus the output projection `W_A: [h·d_v, d]`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: Vec<Tensor>,
    pub w_k: Vec<Tensor>,
    pub w_v: Vec<Tensor>,
    pub w_a: Tensor,
}

impl AttentionParams {
    /// Fan-in scaled uniform initialization.
    pub fn init<R: Rng + ?Sized>(cfg: &AttentionConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let b = 1.0 / (cfg.d as f64).sqrt();
        let mut heads = |cols: usize| -> Vec<Tensor> {
            (0..cfg.h).map(|_| Tensor::uniform([cfg.d, cols], b, rng)).collect()
        };
        let w_q = heads(cfg.d_k);
        let w_k = heads(cfg.d_k);
        let w_v = heads(cfg.d_v);
        let ba = 1.0 / ((cfg.h * cfg.d_v) as f64).sqrt();
        let w_a = Tensor::uniform([cfg.h * cfg.d_v, cfg.d], ba, rng);
        Ok(AttentionParams { w_q, w_k, w_v, w_a })
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }
}

/// Graph form of one attention head; `x: [n, d]`. Returns `(output, weights)`.
pub fn attend_vars(g: &mut Graph, x: Var, w_q: Var, w_k: Var, w_v: Var) -> Result<(Var, Var)> {
    let d_k = g.shape(w_q).get(1).copied().unwrap_or(0);
    if d_k == 0 {
        return Err(KwsError::config("attention d_k must be positive"));
    }
    let q = g.matmul(x, w_q)?;
    let k = g.matmul(x, w_k)?;
    let v = g.matmul(x, w_v)?;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (d_k as f64).sqrt());
    let weights = g.softmax(logits, 1)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Graph form of multi-head attention: `concat(A_1..A_h) · W_A`.
pub fn multi_head_vars(g: &mut Graph, x: Var, w_q: &[Var], w_k: &[Var], w_v: &[Var], w_a: Var) -> Result<Var> {
    let h = w_q.len();
    if h == 0 || w_k.len() != h || w_v.len() != h {
        return Err(KwsError::config("every head needs W_Q, W_K and W_V"));
    }
    let d_v = g.shape(w_v[0])[1];
    let d = g.shape(x)[1];
    if g.shape(w_a) != [h * d_v, d] {
        return Err(KwsError::config(format!(
            "W_A must be [{}, {}] for {h} heads of depth {d_v}, got {:?}",
            h * d_v,
            d,
            g.shape(w_a)
        )));
    }
    let mut heads = Vec::with_capacity(h);
    for i in 0..h {
        heads.push(attend_vars(g, x, w_q[i], w_k[i], w_v[i])?.0);
    }
    let cat = g.concat_cols(&heads)?;
    g.matmul(cat, w_a)
}

/// `softmax(Q Kᵀ / √d_k) V` for one head; `x: [n, d]`.
pub fn attend(x: &Tensor, w_q: &Tensor, w_k: &Tensor, w_v: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vs = [x, w_q, w_k, w_v].map(|t| g.constant(t.clone()));
    let (out, _) = attend_vars(&mut g, vs[0], vs[1], vs[2], vs[3])?;
    Ok(g.take(out))
}

/// The `[n, n]` attention weights of one head.
pub fn attention_weights(x: &Tensor, w_q: &Tensor, w_k: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vs = [x, w_q, w_k].map(|t| g.constant(t.clone()));
    let (_, w) = attend_vars(&mut g, vs[0], vs[1], vs[2], vs[2])?;
    Ok(g.take(w))
}

pub fn multi_head_attend(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(x.clone());
    let mut c = |ts: &[Tensor]| ts.iter().map(|t| g.constant(t.clone())).collect::<Vec<_>>();
    let (q, k, v) = (c(&p.w_q), c(&p.w_k), c(&p.w_v));
    let a = g.constant(p.w_a.clone());
    let out = multi_head_vars(&mut g, x, &q, &k, &v, a)?;
    Ok(g.take(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn proj(x: &Tensor, w: &Tensor) -> Vec<Vec<f64>> {
        let (n, d, c) = (x.shape()[0], x.shape()[1], w.shape()[1]);
        (0..n)
            .map(|i| (0..c).map(|j| (0..d).map(|l| x.at(&[i, l]) * w.at(&[l, j])).sum()).collect())
            .collect()
    }

    /// Literal loop evaluation of one head.
    fn brute_attend(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Vec<Vec<f64>> {
        let (q, k, v) = (proj(x, wq), proj(x, wk), proj(x, wv));
        let n = q.len();
        let dk = q[0].len() as f64;
        let mut out = vec![vec![0.0; v[0].len()]; n];
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..n {
                let w = logits[j].exp() / z;
                for (o, vv) in out[i].iter_mut().zip(&v[j]) {
                    *o += w * vv;
                }
            }
        }
        out
    }

    fn rand_head(rng: &mut ChaCha8Rng, n: usize, d: usize, dk: usize, dv: usize) -> [Tensor; 4] {
        [
            Tensor::uniform([n, d], 1.0, rng),
            Tensor::uniform([d, dk], 1.0, rng),
            Tensor::uniform([d, dk], 1.0, rng),
            Tensor::uniform([d, dv], 1.0, rng),
        ]
    }

    #[test]
    fn single_position_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let [x, wq, wk, wv] = rand_head(&mut rng, 1, 4, 3, 2);
        assert_eq!(attention_weights(&x, &wq, &wk).unwrap().data(), &[1.0]);
        let out = attend(&x, &wq, &wk, &wv).unwrap();
        assert!(out.max_abs_diff(&Tensor::new([1, 2], proj(&x, &wv)[0].clone()).unwrap()) < 1e-15);
    }

    #[test]
    fn zero_queries_average_the_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let [x, _, wk, wv] = rand_head(&mut rng, 5, 4, 3, 2);
        let wq = Tensor::zeros([4, 3]);
        let out = attend(&x, &wq, &wk, &wv).unwrap();
        let v = proj(&x, &wv);
        for col in 0..2 {
            let mean = v.iter().map(|r| r[col]).sum::<f64>() / 5.0;
            for row in 0..5 {
                assert!((out.at(&[row, col]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attend_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let [x, wq, wk, wv] = rand_head(&mut rng, 5, 8, 4, 4);
        let out = attend(&x, &wq, &wk, &wv).unwrap();
        let want = brute_attend(&x, &wq, &wk, &wv);
        for (i, row) in want.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                assert!((out.at(&[i, j]) - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_key_depth_is_a_config_error() {
        let x = Tensor::zeros([2, 2]);
        let err = AttentionConfig { n: 2, d: 2, h: 1, d_k: 0, d_v: 2 }.validate();
        assert!(matches!(err, Err(KwsError::Config(_))));
        let mut g = Graph::new();
        let xv = g.constant(x);
        // A [d, 0] tensor cannot exist, so the graph path sees an empty shape instead.
        let w = g.constant(Tensor::zeros([2]));
        assert!(matches!(attend_vars(&mut g, xv, w, w, w), Err(KwsError::Config(_))));
    }

    #[test]
    fn single_head_with_identity_projection_collapses() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = AttentionConfig { n: 6, d: 4, h: 1, d_k: 3, d_v: 4 };
        let mut p = AttentionParams::init(&cfg, &mut rng).unwrap();
        p.w_a = Tensor::eye(4);
        let x = Tensor::uniform([6, 4], 1.0, &mut rng);
        let mh = multi_head_attend(&x, &p).unwrap();
        let single = attend(&x, &p.w_q[0], &p.w_k[0], &p.w_v[0]).unwrap();
        assert_eq!(mh.data(), single.data());
    }

    #[test]
    fn head_permutation_with_matching_rows_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AttentionConfig { n: 6, d: 8, h: 2, d_k: 3, d_v: 4 };
        let p = AttentionParams::init(&cfg, &mut rng).unwrap();
        let x = Tensor::uniform([6, 8], 1.0, &mut rng);
        let mut swapped = p.clone();
        swapped.w_q.swap(0, 1);
        swapped.w_k.swap(0, 1);
        swapped.w_v.swap(0, 1);
        let a = p.w_a.data();
        let rows: Vec<f64> = [&a[32..64], &a[..32]].concat();
        swapped.w_a = Tensor::new([8, 8], rows).unwrap();
        let d = multi_head_attend(&x, &p).unwrap().max_abs_diff(&multi_head_attend(&x, &swapped).unwrap());
        assert!(d < 1e-12);
    }

    #[test]
    fn multi_head_matches_brute_force_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = AttentionConfig { n: 6, d: 8, h: 2, d_k: 4, d_v: 4 };
        let p = AttentionParams::init(&cfg, &mut rng).unwrap();
        let x = Tensor::uniform([6, 8], 1.0, &mut rng);
        let out = multi_head_attend(&x, &p).unwrap();
        let heads: Vec<_> = (0..2).map(|i| brute_attend(&x, &p.w_q[i], &p.w_k[i], &p.w_v[i])).collect();
        for i in 0..6 {
            let cat: Vec<f64> = heads.iter().flat_map(|h| h[i].clone()).collect();
            for j in 0..8 {
                let want: f64 = cat.iter().enumerate().map(|(r, c)| c * p.w_a.at(&[r, j])).sum();
                assert!((out.at(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_dimension_mismatch_is_a_config_error() {
        let cfg = AttentionConfig { n: 4, d: 8, h: 3, d_k: 2, d_v: 2 };
        assert!(matches!(cfg.validate(), Err(KwsError::Config(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let good = AttentionConfig { n: 4, d: 8, h: 2, d_k: 2, d_v: 4 };
        let mut p = AttentionParams::init(&good, &mut rng).unwrap();
        p.w_a = Tensor::zeros([6, 8]);
        let x = Tensor::zeros([4, 8]);
        assert!(matches!(multi_head_attend(&x, &p), Err(KwsError::Config(_))));
    }

    #[test]
    fn rows_sum_to_one_and_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let [x, wq, wk, wv] = rand_head(&mut rng, 7, 5, 3, 2);
        let w = attention_weights(&x, &wq, &wk).unwrap();
        for row in w.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let xp = Tensor::from_fn([7, 5], |i| x.at(&[perm[i / 5], i % 5]));
        let a = attend(&x, &wq, &wk, &wv).unwrap();
        let b = attend(&xp, &wq, &wk, &wv).unwrap();
        for (i, &pi) in perm.iter().enumerate() {
            for j in 0..2 {
                assert!((b.at(&[i, j]) - a.at(&[pi, j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multi_head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = AttentionConfig { n: 5, d: 4, h: 2, d_k: 3, d_v: 2 };
        let p = AttentionParams::init(&cfg, &mut rng).unwrap();
        let x = Tensor::uniform([5, 4], 1.0, &mut rng);
        let r = Tensor::uniform([5, 4], 1.0, &mut rng);
        let mut inputs = vec![x];
        for i in 0..2 {
            inputs.extend([p.w_q[i].clone(), p.w_k[i].clone(), p.w_v[i].clone()]);
        }
        inputs.push(p.w_a.clone());
        let report = check_gradients(&inputs, GradCheck::default(), |g, v| {
            let out = multi_head_vars(g, v[0], &[v[1], v[4]], &[v[2], v[5]], &[v[3], v[6]], v[7])?;
            let r = g.constant(r.clone());
            let p = g.mul(out, r)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }
}

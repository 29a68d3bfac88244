//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{KwsError, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Check at most this many coordinates per leaf, chosen at random.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Norm-wise relative error per leaf, in input order.
    pub rel_err: Vec<f64>,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Denominator floor so that leaves with an identically zero gradient
/// compare by absolute error.
const NORM_FLOOR: f64 = 1e-7;

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` over the checked coordinates.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied())
        .max(norm(&mut numeric.iter().copied()))
        .max(NORM_FLOOR);
    diff / scale
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences with respect to every tensor in `inputs`.
pub fn check_gradients<F>(inputs: &[Tensor], cfg: GradCheck, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).expect("leaf grad").to_vec()).collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut rel_err = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    for li in 0..inputs.len() {
        let n = inputs[li].numel();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut num = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = work[li].data()[c];
            work[li].data_mut()[c] = orig + cfg.eps;
            let plus = eval(&work)?;
            work[li].data_mut()[c] = orig - cfg.eps;
            let minus = eval(&work)?;
            work[li].data_mut()[c] = orig;
            num.push((plus - minus) / (2.0 * cfg.eps));
        }
        let ana: Vec<f64> = coords.iter().map(|&c| analytic[li][c]).collect();
        rel_err.push(relative_error(&ana, &num));
        checked += coords.len();
    }
    let max_rel_err = rel_err.iter().copied().fold(0.0, f64::max);
    Ok(GradReport {
        rel_err,
        max_rel_err,
        coords_checked: checked,
    })
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if !t.is_scalar() {
        return Err(KwsError::Contract(format!(
            "gradient check needs a scalar output, got {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

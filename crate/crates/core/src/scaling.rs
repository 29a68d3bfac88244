//! Empirical time scaling of attention against lambda layers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alloc;
use crate::attention::{multi_head_attend, AttentionConfig, AttentionParams};
use crate::error::{KwsError, Result};
use crate::lambda::{lambda_conv_forward, lambda_forward, Context, LambdaConfig, LambdaParams};
use crate::tensor::Tensor;

/// Model width, heads and key depth shared by the benchmarked layers.
pub const BENCH_D: usize = 16;
pub const BENCH_HEADS: usize = 2;
pub const BENCH_KEY_DEPTH: usize = 8;
pub const BENCH_SCOPE: usize = 23;
/// A point whose standard error exceeds this fraction of its mean marks
/// the report unreliable.
pub const MAX_REL_STDERR: f64 = 0.1;
/// Each timed repetition runs the layer until at least this much time passed.
const MIN_REP_NS: u128 = 2_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Attention,
    LambdaGlobal,
    LambdaConv,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Attention => "attention",
            LayerKind::LambdaGlobal => "lambda_global",
            LayerKind::LambdaConv => "lambda_conv",
        }
    }
}

impl FromStr for LayerKind {
    type Err = KwsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(LayerKind::Attention),
            "lambda_global" => Ok(LayerKind::LambdaGlobal),
            "lambda_conv" => Ok(LayerKind::LambdaConv),
            _ => Err(KwsError::config(format!(
                "unknown layer {s:?} (expected attention, lambda_global or lambda_conv)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingPoint {
    pub n: usize,
    pub mean_ns: f64,
    pub stderr_ns: f64,
    /// Peak bytes allocated above the baseline during one forward pass; 0
    /// when [`alloc::TrackingAllocator`] is not the global allocator.
    pub peak_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingReport {
    pub layer: LayerKind,
    pub points: Vec<ScalingPoint>,
    /// Least-squares slope of `ln mean_ns` against `ln n`.
    pub slope: f64,
    pub slope_stderr: f64,
    pub unreliable: bool,
}

impl ScalingReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,mean_ns,stderr_ns,peak_bytes\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{},{}", p.n, p.mean_ns, p.stderr_ns, p.peak_bytes);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| KwsError::io(path, e))
    }
}

/// Slope and its standard error of the least-squares line through `(x, y)`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    if x.len() < 2 {
        return (f64::NAN, f64::NAN);
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    if x.len() < 3 {
        return (slope, f64::NAN);
    }
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - my - slope * (a - mx)).powi(2)).sum();
    (slope, (sse / (n - 2.0) / sxx).sqrt())
}

fn check_sweep(n_sweep: &[usize]) -> Result<()> {
    if n_sweep.len() < 4 {
        return Err(KwsError::config("n_sweep needs at least 4 lengths"));
    }
    if n_sweep.windows(2).any(|w| w[1] <= w[0]) || n_sweep[0] == 0 {
        return Err(KwsError::config("n_sweep must be positive and strictly increasing"));
    }
    if n_sweep[n_sweep.len() - 1] < 8 * n_sweep[0] {
        return Err(KwsError::config("n_sweep must span at least a factor of 8"));
    }
    Ok(())
}

/// A ready-to-run forward pass at one length.
fn prepare(layer: LayerKind, n: usize) -> Result<Box<dyn Fn() -> Result<Tensor>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    Ok(match layer {
        LayerKind::Attention => {
            let cfg = AttentionConfig {
                n,
                d: BENCH_D,
                h: BENCH_HEADS,
                d_k: BENCH_KEY_DEPTH,
                d_v: BENCH_D / BENCH_HEADS,
            };
            let p = AttentionParams::init(&cfg, &mut rng)?;
            let x = Tensor::normal([n, BENCH_D], 1.0, &mut rng);
            Box::new(move || multi_head_attend(&x, &p))
        }
        LayerKind::LambdaGlobal | LayerKind::LambdaConv => {
            let context = match layer {
                LayerKind::LambdaGlobal => Context::Global { n },
                _ => Context::Local { r: BENCH_SCOPE },
            };
            let cfg = LambdaConfig { d_in: BENCH_D, d_out: BENCH_D, h: BENCH_HEADS, d_k: BENCH_KEY_DEPTH, context };
            let p = LambdaParams::init(&cfg, &mut rng)?;
            let x = Tensor::normal([BENCH_D, n], 1.0, &mut rng);
            if layer == LayerKind::LambdaGlobal {
                Box::new(move || lambda_forward(&x, &p, &cfg))
            } else {
                Box::new(move || lambda_conv_forward(&x, &p, &cfg))
            }
        }
    })
}

/// Times `reps` repetitions of a batch-1 forward pass at every length of
/// the sweep. Parameter setup is excluded. `reps = 0` measures nothing.
pub fn scaling_benchmark(layer: LayerKind, n_sweep: &[usize], reps: usize) -> Result<ScalingReport> {
    check_sweep(n_sweep)?;
    if reps == 0 {
        return Ok(ScalingReport { layer, points: Vec::new(), slope: f64::NAN, slope_stderr: f64::NAN, unreliable: true });
    }
    let mut points = Vec::new();
    for &n in n_sweep {
        let run = prepare(layer, n)?;
        let base = alloc::reset_peak();
        run()?;
        let peak_bytes = alloc::peak().saturating_sub(base);
        let t = Instant::now();
        let mut inner = 0u32;
        while t.elapsed().as_nanos() < MIN_REP_NS || inner == 0 {
            run()?;
            inner += 1;
        }
        let mut samples = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t = Instant::now();
            for _ in 0..inner {
                run()?;
            }
            samples.push(t.elapsed().as_nanos() as f64 / inner as f64);
        }
        let mean = samples.iter().sum::<f64>() / reps as f64;
        let stderr = if reps > 1 {
            let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
            (var / reps as f64).sqrt()
        } else {
            f64::NAN
        };
        points.push(ScalingPoint { n, mean_ns: mean, stderr_ns: stderr, peak_bytes });
    }
    let x: Vec<f64> = points.iter().map(|p| (p.n as f64).ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.mean_ns.ln()).collect();
    let (slope, slope_stderr) = fit_slope(&x, &y);
    let unreliable = points.iter().any(|p| !(p.stderr_ns <= MAX_REL_STDERR * p.mean_ns));
    Ok(ScalingReport { layer, points, slope, slope_stderr, unreliable })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law_slope() {
        let x: Vec<f64> = [64.0f64, 128.0, 256.0, 512.0].iter().map(|v| v.ln()).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 + 2.0 * v).collect();
        let (s, e) = fit_slope(&x, &y);
        assert!((s - 2.0).abs() < 1e-12);
        assert!(e.abs() < 1e-6);
    }

    #[test]
    fn sweep_validation() {
        assert!(scaling_benchmark(LayerKind::LambdaConv, &[64, 128, 256], 1).is_err());
        assert!(scaling_benchmark(LayerKind::LambdaConv, &[64, 128, 96, 512], 1).is_err());
        assert!(scaling_benchmark(LayerKind::LambdaConv, &[64, 80, 100, 128], 1).is_err());
    }

    #[test]
    fn zero_reps_is_an_empty_report() {
        let r = scaling_benchmark(LayerKind::Attention, &[64, 128, 256, 512], 0).unwrap();
        assert!(r.points.is_empty());
        assert_eq!(r.to_csv(), "n,mean_ns,stderr_ns,peak_bytes\n");
    }

    #[test]
    fn csv_has_one_row_per_length() {
        let r = scaling_benchmark(LayerKind::LambdaConv, &[8, 16, 32, 64], 2).unwrap();
        assert_eq!(r.to_csv().lines().count(), 5);
        assert!(r.points.iter().all(|p| p.mean_ns > 0.0));
    }

    #[test]
    fn layer_names_parse() {
        for l in [LayerKind::Attention, LayerKind::LambdaGlobal, LayerKind::LambdaConv] {
            assert_eq!(l.name().parse::<LayerKind>().unwrap(), l);
        }
        assert!("conv".parse::<LayerKind>().is_err());
    }
}

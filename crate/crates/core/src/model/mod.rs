//! LambdaResNet models: declarative spec, construction, forward pass and
//! cost accounting.

pub mod checkpoint;
mod params;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{KwsError, Result};
use crate::lambda::{Context, LambdaConfig, LambdaParams};
use crate::tensor::{BatchStats, Graph, Mode, Tensor, Var};

pub use params::{Bound, NormId, ParamId, ParamStore};

/// Architecture description. Block `i` of every stage uses `block_strides[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub n_mels: usize,
    pub n_frames: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub block_strides: Vec<usize>,
    pub kernel: usize,
    pub heads: usize,
    pub key_depth: usize,
    pub scope: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    /// LambdaResNet18 with width multiplier `k`.
    pub fn lambda_resnet18_k(k: usize, num_classes: usize) -> Self {
        ModelSpec {
            n_mels: 40,
            n_frames: 100,
            stem_channels: 16 * k,
            stage_channels: [24, 36, 48, 60].iter().map(|c| c * k).collect(),
            blocks_per_stage: 2,
            block_strides: vec![1, 2],
            kernel: 3,
            heads: LambdaConfig::DEFAULT_HEADS,
            key_depth: LambdaConfig::DEFAULT_KEY_DEPTH,
            scope: LambdaConfig::DEFAULT_SCOPE,
            num_classes,
        }
    }

    pub fn lambda_resnet18(num_classes: usize) -> Self {
        Self::lambda_resnet18_k(1, num_classes)
    }

    pub fn lambda_resnet18_2(num_classes: usize) -> Self {
        Self::lambda_resnet18_k(2, num_classes)
    }

    /// Looks up a named architecture: `lambda-resnet18` or `lambda-resnet18-2`.
    pub fn by_name(name: &str, num_classes: usize) -> Result<Self> {
        match name {
            "lambda-resnet18" => Ok(Self::lambda_resnet18(num_classes)),
            "lambda-resnet18-2" => Ok(Self::lambda_resnet18_2(num_classes)),
            _ => Err(KwsError::config(format!(
                "unknown model {name:?}; expected lambda-resnet18 or lambda-resnet18-2"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_mels", self.n_mels),
            ("n_frames", self.n_frames),
            ("stem_channels", self.stem_channels),
            ("heads", self.heads),
            ("key_depth", self.key_depth),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(KwsError::config(format!("model {name} must be positive")));
        }
        if self.kernel % 2 == 0 {
            return Err(KwsError::config(format!("kernel length must be odd, got {}", self.kernel)));
        }
        if self.scope % 2 == 0 {
            return Err(KwsError::config(format!("lambda scope must be odd, got {}", self.scope)));
        }
        if self.block_strides.len() != self.blocks_per_stage {
            return Err(KwsError::config("block_strides needs one entry per block of a stage"));
        }
        if self.block_strides.iter().any(|s| !(1..=2).contains(s)) {
            return Err(KwsError::config("block strides must be 1 or 2"));
        }
        if !self.stage_channels.is_empty() && self.blocks_per_stage == 0 {
            return Err(KwsError::config("stages need at least one block"));
        }
        for &c in &self.stage_channels {
            if c == 0 || c % self.heads != 0 {
                return Err(KwsError::config(format!(
                    "stage width {c} is not a positive multiple of {} heads",
                    self.heads
                )));
            }
        }
        Ok(())
    }

    /// Stem, two layers per residual block, classifier.
    pub fn layer_count(&self) -> usize {
        2 + 2 * self.stage_channels.len() * self.blocks_per_stage
    }

    pub fn lambda_config(&self, channels: usize) -> LambdaConfig {
        LambdaConfig {
            d_in: channels,
            d_out: channels,
            h: self.heads,
            d_k: self.key_depth,
            context: Context::Local { r: self.scope },
        }
    }

    fn blocks(&self) -> impl Iterator<Item = BlockShape> + '_ {
        let mut c_in = self.stem_channels;
        self.stage_channels.iter().enumerate().flat_map(move |(si, &c)| {
            (0..self.blocks_per_stage)
                .map(|bi| {
                    let b = BlockShape {
                        stage: si,
                        index: bi,
                        c_in,
                        c_out: c,
                        stride: self.block_strides[bi],
                    };
                    c_in = c;
                    b
                })
                .collect::<Vec<_>>()
        })
    }

    fn final_channels(&self) -> usize {
        self.stage_channels.last().copied().unwrap_or(self.stem_channels)
    }

    /// Temporal length after the stem and after every stage.
    pub fn temporal_trace(&self) -> Vec<usize> {
        self.trace_for(self.n_frames)
    }

    fn trace_for(&self, frames: usize) -> Vec<usize> {
        let mut n = frames;
        let mut trace = vec![n];
        for _ in &self.stage_channels {
            for &s in &self.block_strides {
                n = n.div_ceil(s);
            }
            trace.push(n);
        }
        trace
    }

    /// Exact number of trainable scalars.
    pub fn count_params(&self) -> usize {
        let bn = |c: usize| 2 * c;
        let mut p = self.n_mels * self.stem_channels * self.kernel + bn(self.stem_channels);
        for b in self.blocks() {
            let lc = self.lambda_config(b.c_out);
            p += b.c_in * b.c_out * self.kernel + bn(b.c_out);
            p += lc.param_count() + bn(self.heads * self.key_depth) + bn(lc.d_v());
            p += bn(b.c_out);
            if b.c_in != b.c_out {
                p += b.c_in * b.c_out + bn(b.c_out);
            }
        }
        p + self.final_channels() * self.num_classes + self.num_classes
    }

    /// Multiplies of one forward pass over a `[n_mels, frames]` input.
    pub fn count_flops(&self, frames: usize) -> FlopBreakdown {
        let mut f = FlopBreakdown::default();
        let mut n = frames as u64;
        let k = self.kernel as u64;
        f.stem = self.n_mels as u64 * self.stem_channels as u64 * k * n;
        for b in self.blocks() {
            n = n.div_ceil(b.stride as u64);
            let (ci, co) = (b.c_in as u64, b.c_out as u64);
            f.block_convs += ci * co * k * n;
            if b.c_in != b.c_out {
                f.shortcuts += ci * co * n;
            }
            let m = self.lambda_config(b.c_out).mults(n as usize);
            f.lambda_projections += m.projections;
            f.lambda_content += m.content;
            f.lambda_position += m.position;
            f.lambda_apply += m.apply;
        }
        f.classifier = (self.final_channels() * self.num_classes) as u64;
        f
    }

    /// `key=value` lines, used in checkpoints and config snapshots.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "n_mels={}", self.n_mels);
        let _ = writeln!(s, "n_frames={}", self.n_frames);
        let _ = writeln!(s, "stem_channels={}", self.stem_channels);
        let _ = writeln!(s, "stage_channels={}", list(&self.stage_channels));
        let _ = writeln!(s, "blocks_per_stage={}", self.blocks_per_stage);
        let _ = writeln!(s, "block_strides={}", list(&self.block_strides));
        let _ = writeln!(s, "kernel={}", self.kernel);
        let _ = writeln!(s, "heads={}", self.heads);
        let _ = writeln!(s, "key_depth={}", self.key_depth);
        let _ = writeln!(s, "scope={}", self.scope);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| KwsError::config(format!("spec line without '=': {line:?}")))?;
            kv.insert(k.trim(), v.trim());
        }
        let mut take = |key: &str| {
            kv.remove(key)
                .ok_or_else(|| KwsError::config(format!("spec is missing {key}")))
        };
        let num = |key: &str, v: &str| {
            v.parse::<usize>()
                .map_err(|_| KwsError::config(format!("spec {key}: {v:?} is not an integer")))
        };
        let list = |key: &str, v: &str| -> Result<Vec<usize>> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|x| num(key, x.trim())).collect()
        };
        let spec = ModelSpec {
            n_mels: num("n_mels", take("n_mels")?)?,
            n_frames: num("n_frames", take("n_frames")?)?,
            stem_channels: num("stem_channels", take("stem_channels")?)?,
            stage_channels: list("stage_channels", take("stage_channels")?)?,
            blocks_per_stage: num("blocks_per_stage", take("blocks_per_stage")?)?,
            block_strides: list("block_strides", take("block_strides")?)?,
            kernel: num("kernel", take("kernel")?)?,
            heads: num("heads", take("heads")?)?,
            key_depth: num("key_depth", take("key_depth")?)?,
            scope: num("scope", take("scope")?)?,
            num_classes: num("num_classes", take("num_classes")?)?,
        };
        if let Some(k) = kv.keys().next() {
            return Err(KwsError::config(format!("unknown spec key {k:?}")));
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug)]
struct BlockShape {
    stage: usize,
    index: usize,
    c_in: usize,
    c_out: usize,
    stride: usize,
}

/// Multiplies per term. Batch norm, ReLU, softmax, pooling and bias
/// additions are not counted; convolution taps over zero padding are.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopBreakdown {
    pub stem: u64,
    pub block_convs: u64,
    pub shortcuts: u64,
    pub lambda_projections: u64,
    pub lambda_content: u64,
    pub lambda_position: u64,
    pub lambda_apply: u64,
    pub classifier: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.conv_terms()
            + self.lambda_projections
            + self.lambda_content
            + self.lambda_position
            + self.lambda_apply
            + self.classifier
    }

    /// Stem, block convolutions and shortcut projections.
    pub fn conv_terms(&self) -> u64 {
        self.stem + self.block_convs + self.shortcuts
    }
}

// ---------------------------------------------------------------- layers

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    stats: NormId,
}

#[derive(Clone, Copy, Debug)]
struct LambdaLayer {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    e: ParamId,
    norm_q: Norm,
    norm_v: Norm,
}

#[derive(Clone, Copy, Debug)]
enum Shortcut {
    Identity,
    Subsample(usize),
    Projection { w: ParamId, stride: usize, norm: Norm },
}

#[derive(Clone, Copy, Debug)]
struct Block {
    conv: ParamId,
    stride: usize,
    bn1: Norm,
    lambda: LambdaLayer,
    bn2: Norm,
    shortcut: Shortcut,
}

/// Per-forward state threaded through the layers.
struct Ctx<'a> {
    g: &'a mut Graph,
    bound: &'a Bound,
    store: &'a ParamStore,
    mode: Mode,
    updates: Vec<(NormId, BatchStats)>,
}

impl Ctx<'_> {
    fn v(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    fn norm(&mut self, x: Var, n: Norm) -> Result<Var> {
        let (gamma, beta) = (self.v(n.gamma), self.v(n.beta));
        let (y, stats) = self.g.batchnorm(x, gamma, beta, self.store.norm(n.stats), self.mode)?;
        if let Some(s) = stats {
            self.updates.push((n.stats, s));
        }
        Ok(y)
    }

    fn lambda(&mut self, x: Var, l: &LambdaLayer) -> Result<Var> {
        let q = self.g.pointwise(x, self.v(l.w_q))?;
        let q = self.norm(q, l.norm_q)?;
        let k = self.g.pointwise(x, self.v(l.w_k))?;
        let v = self.g.pointwise(x, self.v(l.w_v))?;
        let v = self.norm(v, l.norm_v)?;
        let e = self.v(l.e);
        self.g.lambda_from_projections(q, k, v, e)
    }

    fn block(&mut self, x: Var, b: &Block) -> Result<Var> {
        let h = self.g.conv1d(x, self.v(b.conv), b.stride)?;
        let h = self.norm(h, b.bn1)?;
        let h = self.g.relu(h);
        let h = self.lambda(h, &b.lambda)?;
        let h = self.norm(h, b.bn2)?;
        let sc = match b.shortcut {
            Shortcut::Identity => x,
            Shortcut::Subsample(s) => self.g.subsample_time(x, s)?,
            Shortcut::Projection { w, stride, norm } => {
                let xs = if stride > 1 { self.g.subsample_time(x, stride)? } else { x };
                let p = self.g.pointwise(xs, self.v(w))?;
                self.norm(p, norm)?
            }
        };
        let sum = self.g.add(h, sc)?;
        Ok(self.g.relu(sum))
    }
}

/// Output of a graph-level forward pass.
pub struct ForwardPass {
    /// `[B, num_classes]`.
    pub logits: Var,
    pub bound: Bound,
    /// Batch statistics to fold into the running stats after a train step.
    pub norm_updates: Vec<(NormId, BatchStats)>,
}

/// A built model: its spec, layer wiring and parameters.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
    stem: ParamId,
    stem_bn: Norm,
    blocks: Vec<Block>,
    fc_w: ParamId,
    fc_b: ParamId,
}

impl Model {
    /// Deterministic initialization: convolutions and the classifier uniform
    /// in `±1/√fan_in`, lambda weights per [`LambdaParams::init`], batch norm
    /// `γ = 1`, `β = 0`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let k = spec.kernel;
        let conv = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: String, co: usize, ci: usize, k: usize| {
            let b = 1.0 / ((ci * k) as f64).sqrt();
            p.add(name, Tensor::uniform([co, ci, k], b, rng))
        };
        let norm = |p: &mut ParamStore, name: &str, c: usize| Norm {
            gamma: p.add(format!("{name}.gamma"), Tensor::full([c], 1.0)),
            beta: p.add(format!("{name}.beta"), Tensor::zeros([c])),
            stats: p.add_norm(name, c),
        };

        let stem = conv(&mut p, &mut rng, "stem.conv.weight".into(), spec.stem_channels, spec.n_mels, k);
        let stem_bn = norm(&mut p, "stem.bn", spec.stem_channels);
        let mut blocks = Vec::new();
        for b in spec.blocks() {
            let pre = format!("stages.{}.blocks.{}", b.stage, b.index);
            let conv_w = conv(&mut p, &mut rng, format!("{pre}.conv.weight"), b.c_out, b.c_in, k);
            let bn1 = norm(&mut p, &format!("{pre}.bn1"), b.c_out);
            let lc = spec.lambda_config(b.c_out);
            let lp = LambdaParams::init(&lc, &mut rng)?;
            let lambda = LambdaLayer {
                w_q: p.add(format!("{pre}.lambda.w_q"), lp.w_q),
                w_k: p.add(format!("{pre}.lambda.w_k"), lp.w_k),
                w_v: p.add(format!("{pre}.lambda.w_v"), lp.w_v),
                e: p.add(format!("{pre}.lambda.embedding"), lp.e),
                norm_q: norm(&mut p, &format!("{pre}.lambda.norm_q"), lc.h * lc.d_k),
                norm_v: norm(&mut p, &format!("{pre}.lambda.norm_v"), lc.d_v()),
            };
            let bn2 = norm(&mut p, &format!("{pre}.bn2"), b.c_out);
            let shortcut = if b.c_in != b.c_out {
                let bound = 1.0 / (b.c_in as f64).sqrt();
                let w = p.add(format!("{pre}.shortcut.weight"), Tensor::uniform([b.c_in, b.c_out], bound, &mut rng));
                let norm = norm(&mut p, &format!("{pre}.shortcut.bn"), b.c_out);
                Shortcut::Projection { w, stride: b.stride, norm }
            } else if b.stride > 1 {
                Shortcut::Subsample(b.stride)
            } else {
                Shortcut::Identity
            };
            blocks.push(Block { conv: conv_w, stride: b.stride, bn1, lambda, bn2, shortcut });
        }
        let d = spec.final_channels();
        let bound = 1.0 / (d as f64).sqrt();
        let fc_w = p.add("classifier.weight", Tensor::uniform([d, spec.num_classes], bound, &mut rng));
        let fc_b = p.add("classifier.bias", Tensor::uniform([spec.num_classes], bound, &mut rng));
        Ok(Model { spec: spec.clone(), params: p, stem, stem_bn, blocks, fc_w, fc_b })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Layers with weights: stem, two per residual block, classifier.
    pub fn layer_count(&self) -> usize {
        2 + 2 * self.blocks.len()
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = [self.spec.n_mels, self.spec.n_frames];
        let ok = match shape {
            [m, f] => [*m, *f] == want,
            [_, m, f] => [*m, *f] == want,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(KwsError::dim("model input", shape, &want))
        }
    }

    /// Builds the forward pass on `g`. `x` is `[B, n_mels, n_frames]` or
    /// `[n_mels, n_frames]`; parameters are bound as leaves that require
    /// gradients when `requires_grad` is set.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, mode: Mode, requires_grad: bool) -> Result<ForwardPass> {
        let bound = self.params.bind(g, requires_grad);
        self.forward_bound(g, x, mode, bound)
    }

    /// Like [`Model::forward_graph`] with parameters already on `g`.
    pub fn forward_bound(&self, g: &mut Graph, x: Var, mode: Mode, bound: Bound) -> Result<ForwardPass> {
        self.check_input(g.shape(x))?;
        if bound.vars().len() != self.params.len() {
            return Err(KwsError::Contract(format!(
                "{} bound parameters for a model with {}",
                bound.vars().len(),
                self.params.len()
            )));
        }
        let x = if g.shape(x).len() == 2 {
            let s = g.shape(x).to_vec();
            g.reshape(x, &[1, s[0], s[1]])?
        } else {
            x
        };
        let mut ctx = Ctx { g, bound: &bound, store: &self.params, mode, updates: Vec::new() };
        let h = ctx.g.conv1d(x, ctx.v(self.stem), 1)?;
        let h = ctx.norm(h, self.stem_bn)?;
        let mut h = ctx.g.relu(h);
        for b in &self.blocks {
            h = ctx.block(h, b)?;
        }
        let pooled = ctx.g.avgpool_time(h)?;
        let logits = ctx.g.affine(pooled, ctx.v(self.fc_w), ctx.v(self.fc_b))?;
        let norm_updates = ctx.updates;
        Ok(ForwardPass { logits, bound, norm_updates })
    }

    /// Logits for `[n_mels, n_frames]` (returns `[num_classes]`) or a batch
    /// `[B, n_mels, n_frames]` (returns `[B, num_classes]`). Train mode uses
    /// batch statistics without updating the running ones.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let single = x.rank() == 2;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&mut g, xv, mode, false)?;
        let logits = g.take(out.logits);
        if single {
            let k = logits.numel();
            logits.reshape([k])
        } else {
            Ok(logits)
        }
    }

    /// Class probabilities per row.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.forward(x, Mode::Eval)?;
        let k = self.spec.num_classes;
        let rows = logits.numel() / k;
        let p = crate::tensor::softmax_rows(logits.data(), rows, k);
        Tensor::new(logits.shape().to_vec(), p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheck};

    fn tiny(frames: usize) -> ModelSpec {
        ModelSpec {
            n_mels: 6,
            n_frames: frames,
            stem_channels: 4,
            stage_channels: vec![8, 8],
            blocks_per_stage: 2,
            block_strides: vec![1, 2],
            kernel: 3,
            heads: 4,
            key_depth: 4,
            scope: 5,
            num_classes: 3,
        }
    }

    #[test]
    fn trace_halves_per_stage() {
        assert_eq!(ModelSpec::lambda_resnet18(12).temporal_trace(), [100, 50, 25, 13, 7]);
        assert_eq!(ModelSpec::lambda_resnet18_2(12).temporal_trace(), [100, 50, 25, 13, 7]);
    }

    #[test]
    fn forward_shapes_follow_the_trace() {
        let spec = ModelSpec::lambda_resnet18(12);
        let m = Model::build(&spec, 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([40, 100]));
        let out = m.forward_graph(&mut g, x, Mode::Eval, false).unwrap();
        assert_eq!(g.shape(out.logits), &[1, 12]);
        assert_eq!(m.layer_count(), 18);
        assert_eq!(spec.layer_count(), 18);
    }

    #[test]
    fn widths_double_with_k() {
        let s = ModelSpec::lambda_resnet18_2(12);
        assert_eq!(s.stem_channels, 32);
        assert_eq!(s.stage_channels, [48, 72, 96, 120]);
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let spec = ModelSpec::lambda_resnet18(12);
        let a = Model::build(&spec, 7).unwrap();
        let b = Model::build(&spec, 7).unwrap();
        let c = Model::build(&spec, 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn indivisible_channels_are_rejected() {
        let mut s = tiny(20);
        s.stage_channels = vec![8, 10];
        assert!(matches!(Model::build(&s, 0), Err(KwsError::Config(_))));
    }

    #[test]
    fn analytic_param_count_matches_built_model() {
        for spec in [ModelSpec::lambda_resnet18(12), ModelSpec::lambda_resnet18_2(35), tiny(20)] {
            let m = Model::build(&spec, 0).unwrap();
            assert_eq!(m.num_params(), spec.count_params(), "{spec:?}");
        }
    }

    #[test]
    fn pinned_costs_for_the_named_models() {
        let k1 = ModelSpec::lambda_resnet18(12);
        let k2 = ModelSpec::lambda_resnet18_2(12);
        assert_eq!(k1.count_params(), 86_020);
        assert_eq!(k2.count_params(), 269_340);
        assert_eq!(k1.count_flops(100).total(), 3_066_732);
        assert_eq!(k2.count_flops(100).total(), 8_301_072);
    }

    #[test]
    fn zero_stage_spec_is_stem_plus_classifier() {
        let mut s = tiny(10);
        s.stage_channels.clear();
        let want = 6 * 4 * 3 + 2 * 4 + 4 * 3 + 3;
        assert_eq!(s.count_params(), want);
        assert_eq!(Model::build(&s, 0).unwrap().num_params(), want);
        assert_eq!(s.layer_count(), 2);
    }

    #[test]
    fn counted_multiplies_match_the_instrumented_forward() {
        for spec in [tiny(20), ModelSpec::lambda_resnet18(12)] {
            let m = Model::build(&spec, 3).unwrap();
            let mut g = Graph::new();
            let x = g.constant(Tensor::zeros([spec.n_mels, spec.n_frames]));
            m.forward_graph(&mut g, x, Mode::Eval, false).unwrap();
            let f = spec.count_flops(spec.n_frames);
            let counted = g.mults_by_op();
            assert_eq!(g.total_mults(), f.total());
            assert_eq!(counted["conv1d"], f.stem + f.block_convs);
            assert_eq!(counted["pointwise"], f.shortcuts + f.lambda_projections);
            assert_eq!(counted["lambda_position"], f.lambda_position);
            assert_eq!(counted["affine"], f.classifier);
        }
    }

    #[test]
    fn conv_terms_double_with_input_length() {
        // Lengths divisible by 2^(number of strided blocks) halve without rounding.
        let spec = ModelSpec::lambda_resnet18(12);
        let a = spec.count_flops(96);
        let b = spec.count_flops(192);
        assert_eq!(b.conv_terms(), 2 * a.conv_terms());
        assert_eq!(spec.count_flops(200).stem, 2 * spec.count_flops(100).stem);
    }

    #[test]
    fn zero_input_gives_near_uniform_probabilities() {
        let spec = ModelSpec::lambda_resnet18(12);
        let m = Model::build(&spec, 4).unwrap();
        let p = m.predict_proba(&Tensor::zeros([40, 100])).unwrap();
        assert!(p.all_finite());
        assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let entropy: f64 = -p.data().iter().map(|q| q * q.ln()).sum::<f64>();
        assert!(entropy > 0.9 * 12f64.ln(), "{entropy}");
    }

    #[test]
    fn identical_rows_give_identical_logits() {
        let spec = tiny(20);
        let m = Model::build(&spec, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let row = Tensor::uniform([6, 20], 1.0, &mut rng);
        let batch = Tensor::new([3, 6, 20], [row.data(), row.data(), row.data()].concat()).unwrap();
        let l = m.forward(&batch, Mode::Eval).unwrap();
        assert_eq!(&l.data()[0..3], &l.data()[3..6]);
        assert_eq!(&l.data()[0..3], &l.data()[6..9]);
        assert_eq!(l.data(), m.forward(&batch, Mode::Eval).unwrap().data());
    }

    #[test]
    fn wrong_input_shape_names_the_expected_shape() {
        let m = Model::build(&tiny(20), 0).unwrap();
        let err = m.forward(&Tensor::zeros([6, 21]), Mode::Eval).unwrap_err().to_string();
        assert!(err.contains("[6, 20]"), "{err}");
    }

    #[test]
    fn zeroed_residual_branch_is_the_identity() {
        let spec = ModelSpec { block_strides: vec![1, 1], ..tiny(12) };
        let mut m = Model::build(&spec, 6).unwrap();
        let b = m.blocks[1];
        assert!(matches!(b.shortcut, Shortcut::Identity));
        for id in [b.conv, b.lambda.w_q, b.lambda.w_k, b.lambda.w_v, b.lambda.e] {
            let shape = m.params.get(id).shape().to_vec();
            m.params.set(id, Tensor::zeros(shape)).unwrap();
        }
        for n in [b.bn1.stats, b.bn2.stats, b.lambda.norm_q.stats, b.lambda.norm_v.stats] {
            m.params.norm_mut(n).updates = 1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // Block inputs come out of a ReLU, so they are non-negative.
        let x = Tensor::uniform([1, 8, 12], 1.0, &mut rng);
        let x = Tensor::from_fn([1, 8, 12], |i| x.data()[i].abs());
        let mut g = Graph::new();
        let bound = m.params.bind(&mut g, false);
        let mut ctx = Ctx { g: &mut g, bound: &bound, store: &m.params, mode: Mode::Eval, updates: vec![] };
        let xv = ctx.g.constant(x.clone());
        let y = ctx.block(xv, &b).unwrap();
        assert_eq!(g.data(y), x.data());
    }

    fn full_gradient_error(spec: &ModelSpec, stem_only: bool, max_coords: usize) -> f64 {
        let m = Model::build(spec, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::uniform([2, spec.n_mels, spec.n_frames], 1.0, &mut rng);
        let inputs: Vec<Tensor> = m.params.iter().map(|(_, t)| t.clone()).collect();
        let cfg = GradCheck { max_coords: Some(max_coords), ..GradCheck::default() };
        let report = check_gradients(&inputs, cfg, |g, v| {
            let xv = g.constant(x.clone());
            let out = m.forward_bound(g, xv, Mode::Train, Bound::from_vars(v.to_vec()))?;
            g.cross_entropy(out.logits, &[0, 2])
        })
        .unwrap();
        if stem_only {
            report.rel_err[m.stem.0]
        } else {
            report.max_rel_err
        }
    }

    #[test]
    fn stem_gradient_matches_finite_differences() {
        let spec = ModelSpec { n_mels: 40, ..tiny(20) };
        let err = full_gradient_error(&spec, true, 40);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn every_parameter_gradient_matches_finite_differences() {
        let err = full_gradient_error(&tiny(16), false, 12);
        assert!(err < 1e-3, "{err}");
    }
}

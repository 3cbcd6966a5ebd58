//! Conditional noise predictor ε_θ(x_t, t, c).
//!
//! A stack of residual blocks, each built around a gated dilated
//! convolution `tanh(W_f * h) ⊙ σ(W_g * h)`. The diffusion step enters
//! through a sinusoidal embedding passed through two shared dense layers,
//! then a per-block dense projection broadcast over time. The day-ahead
//! forecast enters through two shared dense layers, then a per-block 1×1
//! convolution. Block skip outputs are summed and collapsed to one channel
//! by a two-convolution head whose last layer starts at zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffgraph::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::SEQ_LEN;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub n_blocks: usize,
    pub res_channels: usize,
    /// Width of the first shared time and condition dense layers.
    pub hidden: usize,
    /// Block `k` uses dilation `2^(k mod dilation_cycle)`.
    pub dilation_cycle: usize,
    pub kernel_size: usize,
    /// Length of the sinusoidal step embedding (half sine, half cosine).
    pub time_embed_dim: usize,
    /// Width of the shared time vector each block projects from.
    pub time_proj_dim: usize,
    pub seq_len: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            n_blocks: 8,
            res_channels: 8,
            hidden: 64,
            dilation_cycle: 2,
            kernel_size: 3,
            time_embed_dim: 64,
            time_proj_dim: 16,
            seq_len: SEQ_LEN,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_blocks", self.n_blocks),
            ("res_channels", self.res_channels),
            ("hidden", self.hidden),
            ("dilation_cycle", self.dilation_cycle),
            ("kernel_size", self.kernel_size),
            ("time_embed_dim", self.time_embed_dim),
            ("time_proj_dim", self.time_proj_dim),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("time_embed_dim must be even, got {}", self.time_embed_dim)));
        }
        if self.dilation_cycle > 30 {
            return Err(Error::Config("dilation_cycle too large".into()));
        }
        Ok(())
    }

    pub fn dilation(&self, block: usize) -> usize {
        1 << (block % self.dilation_cycle)
    }

    /// Span of input positions that can influence one output position
    /// through the residual stack: `1 + Σ (k - 1)·d_k`.
    pub fn receptive_field(&self) -> usize {
        1 + (0..self.n_blocks).map(|b| (self.kernel_size - 1) * self.dilation(b)).sum::<usize>()
    }
}

/// Normalized day-ahead forecast used as the conditioning input.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionVector(Vec<f64>);

impl ConditionVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("condition vector is empty".into()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("condition value {v} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    /// All-zero condition, i.e. an unconditional query.
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Sinusoidal step embedding: `dim / 2` sines followed by `dim / 2`
/// cosines of `10^(4i / (dim/2 - 1)) · t`.
pub fn time_embed(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("time embedding dimension must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let freq = |i: usize| {
        if half == 1 {
            1.0
        } else {
            10f64.powf(i as f64 * 4.0 / (half - 1) as f64)
        }
    };
    let t = t as f64;
    let mut out = Vec::with_capacity(dim);
    out.extend((0..half).map(|i| (freq(i) * t).sin()));
    out.extend((0..half).map(|i| (freq(i) * t).cos()));
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct BlockLayout {
    time: Layer,
    cond: Layer,
    filter: Layer,
    gate: Layer,
    residual: Layer,
    skip: Layer,
}

/// Indices of each weight inside the flat parameter list.
#[derive(Clone, Debug)]
struct Layout {
    input: Layer,
    time1: Layer,
    time2: Layer,
    cond1: Layer,
    cond2: Layer,
    blocks: Vec<BlockLayout>,
    head1: Layer,
    head2: Layer,
    /// (name, shape, fan_in) in parameter order
    entries: Vec<(String, Vec<usize>, usize)>,
}

impl Layout {
    fn new(cfg: &DenoiserConfig) -> Self {
        let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let mut layer = |name: String, w_shape: Vec<usize>| {
            let fan_in = w_shape[1..].iter().product();
            let b_shape = vec![w_shape[0]];
            entries.push((format!("{name}.w"), w_shape, fan_in));
            entries.push((format!("{name}.b"), b_shape, fan_in));
            Layer { w: entries.len() - 2, b: entries.len() - 1 }
        };
        let (r, k) = (cfg.res_channels, cfg.kernel_size);
        let input = layer("input".into(), vec![r, 1, 1]);
        let time1 = layer("time.dense1".into(), vec![cfg.hidden, cfg.time_embed_dim]);
        let time2 = layer("time.dense2".into(), vec![cfg.time_proj_dim, cfg.hidden]);
        let cond1 = layer("cond.dense1".into(), vec![cfg.hidden, cfg.seq_len]);
        let cond2 = layer("cond.dense2".into(), vec![cfg.seq_len, cfg.hidden]);
        let blocks = (0..cfg.n_blocks)
            .map(|i| BlockLayout {
                time: layer(format!("block{i}.time"), vec![r, cfg.time_proj_dim]),
                cond: layer(format!("block{i}.cond"), vec![r, 1, 1]),
                filter: layer(format!("block{i}.filter"), vec![r, r, k]),
                gate: layer(format!("block{i}.gate"), vec![r, r, k]),
                residual: layer(format!("block{i}.residual"), vec![r, r, 1]),
                skip: layer(format!("block{i}.skip"), vec![r, r, 1]),
            })
            .collect();
        let head1 = layer("head.conv1".into(), vec![r, r, k]);
        let head2 = layer("head.conv2".into(), vec![1, r, k]);
        Self { input, time1, time2, cond1, cond2, blocks, head1, head2, entries }
    }
}

/// Learnable weights of the noise predictor, kept as a named flat list.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    config: DenoiserConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl DenoiserParams {
    /// Fan-in scaled uniform weights, zero biases, zero final convolution.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let final_w = layout.head2.w;
        let mut names = Vec::with_capacity(layout.entries.len());
        let mut tensors = Vec::with_capacity(layout.entries.len());
        for (idx, (name, shape, fan_in)) in layout.entries.into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".b") || idx == final_w {
                vec![0.0; n]
            } else {
                let bound = (INIT_GAIN / fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Self { config, names, tensors })
    }

    /// Rebuilds a parameter set from named tensors, checking every name and
    /// shape against `config`.
    pub fn from_named(config: DenoiserConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if named.len() != layout.entries.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter tensors, found {}",
                layout.entries.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, t), (want_name, want_shape, _)) in named.into_iter().zip(layout.entries) {
            if name != want_name || t.shape() != want_shape.as_slice() {
                return Err(Error::Invalid(format!(
                    "parameter '{name}' {:?} does not match expected '{want_name}' {want_shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter '{name}'")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { config, names, tensors })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Registers every tensor as a differentiable leaf, in parameter order.
    pub fn register<'t>(&'t self, tape: &mut Tape<'t>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf_ref(t)).collect()
    }

    /// Registers every tensor as a constant (inference only).
    pub fn register_frozen<'t>(&'t self, tape: &mut Tape<'t>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant_ref(t)).collect()
    }

    /// Inference-only prediction of the noise in `x_t`.
    pub fn predict(&self, x_t: &[f64], t: usize, cond: &ConditionVector) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let x = tape.constant(Tensor::from_vec(x_t.to_vec()));
        let out = forward(&self.config, &mut tape, &vars, x, t, cond)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Variance scale of the uniform initializer: `U(±sqrt(gain / fan_in))`.
const INIT_GAIN: f64 = 6.0;

fn silu(tape: &mut Tape<'_>, x: Var) -> Result<Var> {
    let s = tape.sigmoid(x);
    tape.mul(x, s)
}

/// Records ε_θ(x_t, t, c) on `tape`.
///
/// `params` are the parameter vars from [`DenoiserParams::register`] (or
/// any vars with the same shapes, in the same order); `x_t` is a `[seq_len]`
/// var. Returns a `[seq_len]` var.
pub fn forward<'t>(
    cfg: &DenoiserConfig,
    tape: &mut Tape<'t>,
    params: &[Var],
    x_t: Var,
    t: usize,
    cond: &ConditionVector,
) -> Result<Var> {
    let layout = Layout::new(cfg);
    if params.len() != layout.entries.len() {
        return Err(Error::Invalid(format!("expected {} parameter vars, got {}", layout.entries.len(), params.len())));
    }
    let len = cfg.seq_len;
    if tape.value(x_t).shape() != [len] {
        return Err(Error::Invalid(format!("x_t must have shape [{len}], got {:?}", tape.value(x_t).shape())));
    }
    if cond.len() != len {
        return Err(Error::Invalid(format!("condition must have length {len}, got {}", cond.len())));
    }
    if t == 0 {
        return Err(Error::StepOutOfRange { t, steps: usize::MAX });
    }
    let p = |l: Layer| (params[l.w], params[l.b]);

    // shared step embedding
    let temb = tape.constant(Tensor::from_vec(time_embed(t, cfg.time_embed_dim)?));
    let (w, b) = p(layout.time1);
    let h = tape.dense(temb, w, b)?;
    let h = silu(tape, h)?;
    let (w, b) = p(layout.time2);
    let h = tape.dense(h, w, b)?;
    let time_shared = silu(tape, h)?;

    // shared condition embedding, kept aligned with the hours of the day
    let c = tape.constant(Tensor::from_vec(cond.values().to_vec()));
    let (w, b) = p(layout.cond1);
    let h = tape.dense(c, w, b)?;
    let h = silu(tape, h)?;
    let (w, b) = p(layout.cond2);
    let h = tape.dense(h, w, b)?;
    let h = silu(tape, h)?;
    let cond_shared = tape.reshape(h, &[1, len])?;

    let x = tape.reshape(x_t, &[1, len])?;
    let (w, b) = p(layout.input);
    let x = tape.conv1d_dilated(x, w, b, 1)?;
    let mut x = silu(tape, x)?;

    let res_scale = std::f64::consts::FRAC_1_SQRT_2;
    let mut skip_sum: Option<Var> = None;
    for (k, blk) in layout.blocks.iter().enumerate() {
        let (w, b) = p(blk.time);
        let tproj = tape.dense(time_shared, w, b)?;
        let (w, b) = p(blk.cond);
        let cproj = tape.conv1d_dilated(cond_shared, w, b, 1)?;
        let h = tape.add(x, tproj)?;
        let h = tape.add(h, cproj)?;

        let d = cfg.dilation(k);
        let (w, b) = p(blk.filter);
        let filter = tape.conv1d_dilated(h, w, b, d)?;
        let (w, b) = p(blk.gate);
        let gate = tape.conv1d_dilated(h, w, b, d)?;
        let filter = tape.tanh(filter);
        let gate = tape.sigmoid(gate);
        let z = tape.mul(filter, gate)?;

        let (w, b) = p(blk.residual);
        let residual = tape.conv1d_dilated(z, w, b, 1)?;
        let (w, b) = p(blk.skip);
        let skip = tape.conv1d_dilated(z, w, b, 1)?;
        let sum = tape.add(x, residual)?;
        x = tape.scale(sum, res_scale);
        skip_sum = Some(match skip_sum {
            None => skip,
            Some(s) => tape.add(s, skip)?,
        });
    }

    let s = tape.scale(skip_sum.expect("n_blocks >= 1"), 1.0 / (cfg.n_blocks as f64).sqrt());
    let (w, b) = p(layout.head1);
    let s = tape.conv1d_dilated(s, w, b, 1)?;
    let s = silu(tape, s)?;
    let (w, b) = p(layout.head2);
    let out = tape.conv1d_dilated(s, w, b, 1)?;
    tape.reshape(out, &[len])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffgraph::finite_diff_check;
    use rand_distr::StandardNormal;

    fn small_config(blocks: usize) -> DenoiserConfig {
        DenoiserConfig {
            n_blocks: blocks,
            res_channels: 4,
            hidden: 8,
            time_embed_dim: 8,
            time_proj_dim: 4,
            ..DenoiserConfig::default()
        }
    }

    fn randomize(params: &mut DenoiserParams, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v += scale * rng.random_range(-1.0..1.0);
            }
        }
    }

    fn rand_input(seed: u64) -> (Vec<f64>, ConditionVector) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..24).map(|_| rng.sample(StandardNormal)).collect();
        let c = ConditionVector::new((0..24).map(|_| rng.random()).collect()).unwrap();
        (x, c)
    }

    #[test]
    fn time_embed_examples() {
        let e = time_embed(0, 64).unwrap();
        assert!(e[..32].iter().all(|&v| v == 0.0));
        assert!(e[32..].iter().all(|&v| v == 1.0));

        let e = time_embed(1, 4).unwrap();
        let want = [1f64.sin(), 1e4f64.sin(), 1f64.cos(), 1e4f64.cos()];
        for (a, b) in e.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }

        // frequency i of the 64-wide embedding is 10^(4i/31)
        let e = time_embed(3, 64).unwrap();
        assert!((e[31] - (1e4f64 * 3.0).sin()).abs() < 1e-9);
        assert!((e[32 + 1] - (10f64.powf(4.0 / 31.0) * 3.0).cos()).abs() < 1e-12);

        for t in [1, 17, 250, 10_000] {
            assert!(time_embed(t, 64).unwrap().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert!(matches!(time_embed(1, 7), Err(Error::Config(_))));
    }

    #[test]
    fn default_config_matches_reference_table() {
        let c = DenoiserConfig::default();
        assert_eq!((c.n_blocks, c.res_channels, c.dilation_cycle, c.hidden), (8, 8, 2, 64));
        assert_eq!((0..8).map(|k| c.dilation(k)).collect::<Vec<_>>(), vec![1, 2, 1, 2, 1, 2, 1, 2]);
        assert_eq!(c.receptive_field(), 25);
        assert!(c.receptive_field() >= c.seq_len);

        let doubling = DenoiserConfig { dilation_cycle: 8, ..c };
        assert_eq!(doubling.dilation(7), 128);
    }

    #[test]
    fn config_rejects_bad_values() {
        let base = DenoiserConfig::default();
        assert!(DenoiserConfig { kernel_size: 4, ..base.clone() }.validate().is_err());
        assert!(DenoiserConfig { time_embed_dim: 63, ..base.clone() }.validate().is_err());
        assert!(DenoiserConfig { n_blocks: 0, ..base }.validate().is_err());
    }

    #[test]
    fn fresh_params_predict_zero() {
        let params = DenoiserParams::init(DenoiserConfig::default(), 1).unwrap();
        for seed in 0..5 {
            let (x, c) = rand_input(seed);
            let out = params.predict(&x, 1 + seed as usize * 40, &c).unwrap();
            assert_eq!(out.len(), 24);
            assert!(out.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn output_is_deterministic_and_condition_sensitive() {
        let mut params = DenoiserParams::init(DenoiserConfig::default(), 7).unwrap();
        randomize(&mut params, 8, 0.2);
        let (x, c) = rand_input(3);
        let a = params.predict(&x, 10, &c).unwrap();
        let b = params.predict(&x, 10, &c).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));

        let shifted = ConditionVector::new(c.values().iter().map(|v| 1.0 - v).collect()).unwrap();
        let d = params.predict(&x, 10, &shifted).unwrap();
        let max_delta = a.iter().zip(&d).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(max_delta > 0.0);

        let other_step = params.predict(&x, 11, &c).unwrap();
        assert_ne!(a, other_step);
    }

    #[test]
    fn shared_embeddings_feed_every_block() {
        let params = DenoiserParams::init(DenoiserConfig::default(), 0).unwrap();
        let shared: Vec<_> = params.names().iter().filter(|n| n.starts_with("time.") || n.starts_with("cond.")).collect();
        assert_eq!(shared.len(), 8, "{shared:?}");
        assert_eq!(params.names().iter().filter(|n| n.ends_with(".time.w")).count(), 8);

        // Severing one block's path from the shared time vector leaves the
        // others; zeroing the shared layer itself changes all of them.
        let mut p = params.clone();
        randomize(&mut p, 1, 0.3);
        let (x, c) = rand_input(9);
        let base = p.predict(&x, 5, &c).unwrap();
        let mut no_shared = p.clone();
        no_shared.get_mut("time.dense2.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        no_shared.get_mut("time.dense2.b").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        // silu(0) = 0, so every block now receives only its own bias
        let mut no_blocks = p.clone();
        for k in 0..8 {
            no_blocks.get_mut(&format!("block{k}.time.w")).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let a = no_shared.predict(&x, 5, &c).unwrap();
        let b = no_blocks.predict(&x, 5, &c).unwrap();
        assert_ne!(a, base);
        assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let params = DenoiserParams::init(DenoiserConfig::default(), 0).unwrap();
        let c = ConditionVector::zeros(24);
        assert!(params.predict(&[0.0; 23], 1, &c).is_err());
        assert!(params.predict(&[0.0; 24], 0, &c).is_err());
        assert!(params.predict(&[0.0; 24], 1, &ConditionVector::zeros(12)).is_err());
        assert!(ConditionVector::new(vec![0.5, 1.2]).is_err());
    }

    #[test]
    fn two_block_gradients_match_finite_differences() {
        let cfg = small_config(2);
        let mut params = DenoiserParams::init(cfg.clone(), 4).unwrap();
        randomize(&mut params, 5, 0.1);
        let (x, c) = rand_input(6);
        let (eps, _) = rand_input(7);
        let f = |tape: &mut Tape<'_>, vars: &[Var]| {
            let xv = tape.constant(Tensor::from_vec(x.clone()));
            let out = forward(&cfg, tape, vars, xv, 3, &c)?;
            let target = tape.constant(Tensor::from_vec(eps.clone()));
            tape.mse(out, target)
        };
        let r = finite_diff_check(f, params.tensors(), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn from_named_checks_layout() {
        let params = DenoiserParams::init(small_config(2), 0).unwrap();
        let named: Vec<_> = params.names().iter().cloned().zip(params.tensors().iter().cloned()).collect();
        let back = DenoiserParams::from_named(small_config(2), named.clone()).unwrap();
        assert_eq!(back, params);
        assert!(DenoiserParams::from_named(small_config(3), named.clone()).is_err());
        let mut renamed = named;
        renamed[0].0 = "bogus".into();
        assert!(DenoiserParams::from_named(small_config(2), renamed).is_err());
    }
}

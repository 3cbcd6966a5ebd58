//! Forward corruption, the noise-prediction training loss, and conditional
//! ancestral sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::DaySample;
use crate::denoiser::{self, ConditionVector, DenoiserParams};
use crate::diffgraph::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{ScenarioSet, Units};
use crate::schedule::NoiseSchedule;

/// Anything that can predict the noise in `x_t` on a tape.
pub trait NoisePredictor: Sync {
    fn seq_len(&self) -> usize;

    /// Records the prediction on `tape`. When `trainable` is set, the
    /// returned vars are the parameter leaves to read gradients from.
    fn record<'t>(
        &'t self,
        tape: &mut Tape<'t>,
        x_t: Var,
        t: usize,
        cond: &ConditionVector,
        trainable: bool,
    ) -> Result<(Var, Vec<Var>)>;

    fn is_finite(&self) -> bool {
        true
    }

    fn predict(&self, x_t: &[f64], t: usize, cond: &ConditionVector) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(x_t.to_vec()));
        let (out, _) = self.record(&mut tape, x, t, cond, false)?;
        Ok(tape.value(out).data().to_vec())
    }
}

impl NoisePredictor for DenoiserParams {
    fn seq_len(&self) -> usize {
        self.config().seq_len
    }

    fn record<'t>(
        &'t self,
        tape: &mut Tape<'t>,
        x_t: Var,
        t: usize,
        cond: &ConditionVector,
        trainable: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let vars = if trainable { self.register(tape) } else { self.register_frozen(tape) };
        let out = denoiser::forward(self.config(), tape, &vars, x_t, t, cond)?;
        Ok((out, vars))
    }

    fn is_finite(&self) -> bool {
        DenoiserParams::is_finite(self)
    }

    fn predict(&self, x_t: &[f64], t: usize, cond: &ConditionVector) -> Result<Vec<f64>> {
        DenoiserParams::predict(self, x_t, t, cond)
    }
}

/// Variance of the injected noise in each reverse step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReverseVariance {
    /// β̃_t, the variance of q(x_{t-1} | x_t, x_0)
    #[default]
    Posterior,
    /// β_t
    Beta,
}

impl ReverseVariance {
    pub fn as_str(self) -> &'static str {
        match self {
            ReverseVariance::Posterior => "posterior",
            ReverseVariance::Beta => "beta",
        }
    }
}

impl std::str::FromStr for ReverseVariance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "posterior" => Ok(Self::Posterior),
            "beta" => Ok(Self::Beta),
            other => Err(Error::Config(format!("unknown reverse variance '{other}' (posterior|beta)"))),
        }
    }
}

/// A noise schedule paired with a noise predictor.
#[derive(Clone, Debug)]
pub struct DiffusionModel<P = DenoiserParams> {
    pub schedule: NoiseSchedule,
    pub predictor: P,
    pub variance: ReverseVariance,
}

impl<P: NoisePredictor> DiffusionModel<P> {
    pub fn new(schedule: NoiseSchedule, predictor: P) -> Self {
        Self { schedule, predictor, variance: ReverseVariance::default() }
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }
}

/// `x_t = √ᾱ_t·x0 + √(1-ᾱ_t)·eps`.
pub fn forward_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    if x0.len() != eps.len() {
        return Err(Error::Invalid(format!("x0 has {} values, eps has {}", x0.len(), eps.len())));
    }
    let (a, b) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// One `(t, eps)` draw for a training example.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Vec<f64>,
}

/// Draws `t ~ U{1..T}` and `eps ~ N(0, I)` independently per example.
pub fn draw_noise<R: Rng>(count: usize, len: usize, steps: usize, rng: &mut R) -> Vec<NoiseDraw> {
    (0..count)
        .map(|_| {
            let t = rng.random_range(1..=steps);
            let eps = (0..len).map(|_| rng.sample(StandardNormal)).collect();
            NoiseDraw { t, eps }
        })
        .collect()
}

/// Mean loss over a batch and its gradient for every predictor parameter.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Noise-prediction loss with fresh `(t, eps)` draws from `rng`.
pub fn training_loss<P: NoisePredictor, R: Rng>(
    model: &DiffusionModel<P>,
    batch: &[&DaySample],
    rng: &mut R,
    exec: Exec,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Invalid("training batch is empty".into()));
    }
    let draws = draw_noise(batch.len(), model.predictor.seq_len(), model.steps(), rng);
    loss_with_draws(model, batch, &draws, exec)
}

/// Mean over the batch of `mse(ε_θ(x_t, t, c), eps)` with the given draws.
///
/// Each example is differentiated on its own tape (in parallel under
/// [`Exec::Parallel`]); per-example gradients are reduced in batch order so
/// the result does not depend on the execution strategy.
pub fn loss_with_draws<P: NoisePredictor>(
    model: &DiffusionModel<P>,
    batch: &[&DaySample],
    draws: &[NoiseDraw],
    exec: Exec,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Invalid("training batch is empty".into()));
    }
    if batch.len() != draws.len() {
        return Err(Error::Invalid(format!("{} samples but {} noise draws", batch.len(), draws.len())));
    }
    let per_example = exec.try_map(batch.len(), |i| -> Result<(f64, Vec<Vec<f64>>)> {
        let (sample, draw) = (batch[i], &draws[i]);
        let x_t = forward_sample(&sample.actual, draw.t, &draw.eps, &model.schedule)?;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(x_t));
        let (pred, params) = model.predictor.record(&mut tape, x, draw.t, &sample.forecast, true)?;
        let target = tape.constant(Tensor::from_vec(draw.eps.clone()));
        let loss = tape.mse(pred, target)?;
        tape.backward(loss)?;
        let value = tape.value(loss).data()[0];
        let grads = params.iter().map(|&v| tape.take_grad(v).unwrap_or_default()).collect();
        Ok((value, grads))
    })?;

    let scale = 1.0 / batch.len() as f64;
    let mut iter = per_example.into_iter();
    let (first_loss, mut grads) = iter.next().expect("non-empty batch");
    let mut loss = first_loss;
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.iter_mut().zip(gi).for_each(|(a, v)| *a += v);
        }
    }
    grads.iter_mut().flatten().for_each(|v| *v *= scale);
    Ok(BatchLoss { loss: loss * scale, grads })
}

/// `μ_θ + σ_t·z`, with `μ_θ = (x_t - (1-α_t)/√(1-ᾱ_t)·ε_θ) / √α_t`.
///
/// `z` is ignored at `t = 1`, where no noise is injected.
pub fn reverse_step<P: NoisePredictor>(
    model: &DiffusionModel<P>,
    x_t: &[f64],
    t: usize,
    cond: &ConditionVector,
    z: &[f64],
) -> Result<Vec<f64>> {
    let sched = &model.schedule;
    sched.check_step(t)?;
    if z.len() != x_t.len() {
        return Err(Error::Invalid(format!("z has {} values, x_t has {}", z.len(), x_t.len())));
    }
    let eps = model.predictor.predict(x_t, t, cond)?;
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let eps_coef = (1.0 - sched.alpha(t)) / (1.0 - sched.alpha_bar(t)).sqrt();
    let sigma = if t == 1 {
        0.0
    } else {
        match model.variance {
            ReverseVariance::Posterior => sched.posterior_var(t),
            ReverseVariance::Beta => sched.beta(t),
        }
        .sqrt()
    };
    Ok(x_t
        .iter()
        .zip(&eps)
        .zip(z)
        .map(|((x, e), zi)| inv_sqrt_alpha * (x - eps_coef * e) + sigma * zi)
        .collect())
}

/// Runs the reverse chain from `x_T` down to `x_0` without clamping.
///
/// With `rng = None` every injected `z` is zero, so the result is a
/// deterministic function of `x_T`.
pub fn denoise<P: NoisePredictor, R: Rng>(
    model: &DiffusionModel<P>,
    cond: &ConditionVector,
    x_big_t: Vec<f64>,
    mut rng: Option<&mut R>,
) -> Result<Vec<f64>> {
    let len = x_big_t.len();
    let mut x = x_big_t;
    let mut z = vec![0.0; len];
    for t in (1..=model.steps()).rev() {
        if t > 1 {
            if let Some(r) = rng.as_deref_mut() {
                z.iter_mut().for_each(|v| *v = r.sample(StandardNormal));
            }
        }
        x = reverse_step(model, &x, t, cond, &z)?;
    }
    Ok(x)
}

/// RNG for chain `chain` of a sampling run seeded with `seed`.
pub fn chain_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    rng
}

/// Generates `count` independent scenarios for one condition.
///
/// Chain `w` draws `x_T` and every `z` from [`chain_rng`]`(seed, w)`, so
/// the output is identical for any [`Exec`]. Results are clamped to [0, 1].
pub fn sample_scenarios<P: NoisePredictor>(
    model: &DiffusionModel<P>,
    cond: &ConditionVector,
    count: usize,
    seed: u64,
    exec: Exec,
) -> Result<ScenarioSet> {
    if count == 0 {
        return Err(Error::Invalid("scenario count must be at least 1".into()));
    }
    if !model.predictor.is_finite() {
        return Err(Error::NonFinite("model parameters contain NaN or infinite values".into()));
    }
    let len = model.predictor.seq_len();
    let trajectories = exec.try_map(count, |w| -> Result<Vec<f64>> {
        let mut rng = chain_rng(seed, w as u64);
        let x_big_t: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        let x0 = denoise(model, cond, x_big_t, Some(&mut rng))?;
        if let Some(v) = x0.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("chain {w} produced {v}")));
        }
        Ok(x0.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    })?;
    let mut set = ScenarioSet::new(trajectories, Units::Normalized)?;
    set.condition = Some(cond.values().to_vec());
    set.seed = Some(seed);
    Ok(set)
}

//! Noise schedules: per-step variances and the cumulative quantities the
//! forward and reverse processes need.
//!
//! Steps are indexed `1..=T`; `alpha_bar(0)` is the empty product `1`.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
pub const DEFAULT_BETA_MAX: f64 = 0.999;
pub const DEFAULT_BETA_START: f64 = 0.0001;
pub const DEFAULT_BETA_END: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::Config(format!("unknown schedule kind '{other}' (linear|cosine)"))),
        }
    }
}

/// Everything needed to rebuild a schedule bit-for-bit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleSpec {
    Linear { steps: usize, beta_start: f64, beta_end: f64 },
    Cosine { steps: usize, offset: f64, beta_max: f64 },
}

impl ScheduleSpec {
    pub fn kind(&self) -> ScheduleKind {
        match self {
            ScheduleSpec::Linear { .. } => ScheduleKind::Linear,
            ScheduleSpec::Cosine { .. } => ScheduleKind::Cosine,
        }
    }

    pub fn steps(&self) -> usize {
        match *self {
            ScheduleSpec::Linear { steps, .. } | ScheduleSpec::Cosine { steps, .. } => steps,
        }
    }

    /// Default parameters for `kind` with `steps` diffusion steps.
    pub fn with_defaults(kind: ScheduleKind, steps: usize) -> Self {
        match kind {
            ScheduleKind::Linear => {
                ScheduleSpec::Linear { steps, beta_start: DEFAULT_BETA_START, beta_end: DEFAULT_BETA_END }
            }
            ScheduleKind::Cosine => {
                ScheduleSpec::Cosine { steps, offset: DEFAULT_COSINE_OFFSET, beta_max: DEFAULT_BETA_MAX }
            }
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        match *self {
            ScheduleSpec::Linear { steps, beta_start, beta_end } => NoiseSchedule::linear(steps, beta_start, beta_end),
            ScheduleSpec::Cosine { steps, offset, beta_max } => NoiseSchedule::cosine(steps, offset, beta_max),
        }
    }
}

/// Precomputed β, α, ᾱ and posterior variances for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    /// length T + 1, `alpha_bar[0] == 1`
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas interpolated linearly with both endpoints included.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "linear schedule requires 0 < beta_start < beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let span = (steps - 1) as f64;
        let beta = (0..steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / span).collect();
        Ok(Self::from_betas(ScheduleSpec::Linear { steps, beta_start, beta_end }, beta))
    }

    /// Cosine schedule: ᾱ follows `f(t)/f(0)` with
    /// `f(t) = cos²((t/T + s)/(1 + s) · π/2)`, betas are derived from
    /// consecutive ratios and clipped at `beta_max`, and ᾱ is then rebuilt
    /// from the clipped betas.
    pub fn cosine(steps: usize, offset: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(offset > 0.0 && offset < 0.1) {
            return Err(Error::Config(format!("cosine offset must lie in (0, 0.1), got {offset}")));
        }
        if !(beta_max > 0.0 && beta_max <= DEFAULT_BETA_MAX) {
            return Err(Error::Config(format!("beta_max must lie in (0, 0.999], got {beta_max}")));
        }
        let f = |t: usize| {
            let phase = (t as f64 / steps as f64 + offset) / (1.0 + offset) * FRAC_PI_2;
            phase.cos().powi(2)
        };
        let f0 = f(0);
        let raw: Vec<f64> = (0..=steps).map(|t| f(t) / f0).collect();
        let beta = (1..=steps).map(|t| (1.0 - raw[t] / raw[t - 1]).min(beta_max)).collect();
        Ok(Self::from_betas(ScheduleSpec::Cosine { steps, offset, beta_max }, beta))
    }

    fn from_betas(spec: ScheduleSpec, beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        for a in &alpha {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * a);
        }
        let posterior_var = (1..=beta.len())
            .map(|t| (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t - 1])
            .collect();
        Self { spec, beta, alpha, alpha_bar, posterior_var }
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn kind(&self) -> ScheduleKind {
        self.spec.kind()
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange { t, steps: self.steps() });
        }
        Ok(())
    }

    /// Panics unless `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Valid for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Coefficients `(c_xt, c_x0)` of the posterior mean
    /// `μ̃_t = c_xt·x_t + c_x0·x_0` of `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_mean_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        let (ab, ab_prev, b) = (self.alpha_bar(t), self.alpha_bar(t - 1), self.beta(t));
        let coef_xt = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let coef_x0 = ab_prev.sqrt() * b / (1.0 - ab);
        Ok((coef_xt, coef_x0))
    }
}

//! Adam optimization, the epoch loop, and the binary checkpoint format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::dataset::{DaySample, Normalizer, Source};
use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::diffgraph::Tensor;
use crate::diffusion::{training_loss, DiffusionModel, ReverseVariance};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::schedule::{ScheduleKind, ScheduleSpec, DEFAULT_BETA_END, DEFAULT_BETA_MAX, DEFAULT_BETA_START, DEFAULT_COSINE_OFFSET};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ICGD";
pub const CHECKPOINT_VERSION: u32 = 1;

/// RNG stream used for shuffling and noise draws; stream 0 of the same
/// seed initializes the weights.
const TRAIN_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub cosine_offset: f64,
    pub beta_max: f64,
    pub variance: ReverseVariance,
    pub denoiser: DenoiserConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            epochs: 300,
            seed: 0,
            schedule: ScheduleKind::Cosine,
            steps: Source::Pv.default_steps(),
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            cosine_offset: DEFAULT_COSINE_OFFSET,
            beta_max: DEFAULT_BETA_MAX,
            variance: ReverseVariance::default(),
            denoiser: DenoiserConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

impl TrainConfig {
    pub fn for_source(source: Source) -> Self {
        Self { steps: source.default_steps(), ..Self::default() }
    }

    pub fn schedule_spec(&self) -> ScheduleSpec {
        match self.schedule {
            ScheduleKind::Linear => {
                ScheduleSpec::Linear { steps: self.steps, beta_start: self.beta_start, beta_end: self.beta_end }
            }
            ScheduleKind::Cosine => {
                ScheduleSpec::Cosine { steps: self.steps, offset: self.cosine_offset, beta_max: self.beta_max }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("learning_rate", self.learning_rate), ("adam_eps", self.adam_eps)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.denoiser.validate()?;
        self.schedule_spec().build()?;
        Ok(())
    }

    /// Sets one field from its `key = value` spelling.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.denoiser;
        match key {
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "schedule" => self.schedule = value.trim().parse()?,
            "steps" => self.steps = parse(key, value)?,
            "beta_start" => self.beta_start = parse(key, value)?,
            "beta_end" => self.beta_end = parse(key, value)?,
            "cosine_offset" => self.cosine_offset = parse(key, value)?,
            "beta_max" => self.beta_max = parse(key, value)?,
            "variance" => self.variance = value.trim().parse()?,
            "n_blocks" => d.n_blocks = parse(key, value)?,
            "res_channels" => d.res_channels = parse(key, value)?,
            "hidden" => d.hidden = parse(key, value)?,
            "dilation_cycle" => d.dilation_cycle = parse(key, value)?,
            "kernel_size" => d.kernel_size = parse(key, value)?,
            "time_embed_dim" => d.time_embed_dim = parse(key, value)?,
            "time_proj_dim" => d.time_proj_dim = parse(key, value)?,
            "seq_len" => d.seq_len = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)`; floats use the shortest exact form.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let d = &self.denoiser;
        vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("schedule", self.schedule.as_str().to_string()),
            ("steps", self.steps.to_string()),
            ("beta_start", self.beta_start.to_string()),
            ("beta_end", self.beta_end.to_string()),
            ("cosine_offset", self.cosine_offset.to_string()),
            ("beta_max", self.beta_max.to_string()),
            ("variance", self.variance.as_str().to_string()),
            ("n_blocks", d.n_blocks.to_string()),
            ("res_channels", d.res_channels.to_string()),
            ("hidden", d.hidden.to_string()),
            ("dilation_cycle", d.dilation_cycle.to_string()),
            ("kernel_size", d.kernel_size.to_string()),
            ("time_embed_dim", d.time_embed_dim.to_string()),
            ("time_proj_dim", d.time_proj_dim.to_string()),
            ("seq_len", d.seq_len.to_string()),
        ]
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite; the error names the offending tensor.
pub fn adam_step(
    params: &mut [Tensor],
    names: &[String],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Invalid(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let name = names.get(i).map_or("?", String::as_str);
        if g.len() != p.numel() {
            return Err(Error::Invalid(format!("gradient for '{name}' has {} values, expected {}", g.len(), p.numel())));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of '{name}'")));
        }
    }
    state.step += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let step = i32::try_from(state.step).unwrap_or(i32::MAX);
    let (c1, c2) = (1.0 - b1.powi(step), 1.0 - b2.powi(step));
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *w -= cfg.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// A trained model with what is needed to rebuild and use it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: DenoiserParams,
    pub epochs_run: usize,
    pub final_loss: Option<f64>,
    pub normalizer: Option<Normalizer>,
    pub source: Option<Source>,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    /// Mean batch loss for each epoch, in order.
    pub losses: Vec<f64>,
}

/// Mini-batch Adam over `days` for `cfg.epochs` shuffled epochs.
pub fn train(days: &[DaySample], cfg: &TrainConfig, exec: Exec) -> Result<TrainRun> {
    cfg.validate()?;
    if days.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let params = DenoiserParams::init(cfg.denoiser.clone(), cfg.seed)?;
    let mut model = DiffusionModel::new(cfg.schedule_spec().build()?, params);
    model.variance = cfg.variance;
    let mut state = AdamState::new(model.predictor.tensors());
    let mut rng = crate::diffusion::chain_rng(cfg.seed, TRAIN_STREAM);
    let mut order: Vec<usize> = (0..days.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&DaySample> = chunk.iter().map(|&i| &days[i]).collect();
            let out = training_loss(&model, &batch, &mut rng, exec)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}")));
            }
            let names = model.predictor.names().to_vec();
            adam_step(model.predictor.tensors_mut(), &names, &out.grads, &mut state, cfg)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {epoch}")),
                    other => other,
                })?;
            total += out.loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::debug!("epoch {epoch}: mean loss {mean:.6}");
        if epoch % 25 == 0 || epoch == cfg.epochs {
            log::info!("epoch {epoch}/{}: mean loss {mean:.6}", cfg.epochs);
        }
        losses.push(mean);
    }

    Ok(TrainRun {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            params: model.predictor,
            epochs_run: losses.len(),
            final_loss: losses.last().copied(),
            normalizer: None,
            source: None,
        },
        losses,
    })
}

/// `epoch,mean_loss` rows, epochs counted from 1.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{},{l}", i + 1);
    }
    out
}

/// Writes via a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

impl Checkpoint {
    pub fn model(&self) -> Result<DiffusionModel> {
        let mut model = DiffusionModel::new(self.config.schedule_spec().build()?, self.params.clone());
        model.variance = self.config.variance;
        Ok(model)
    }

    fn metadata(&self) -> BTreeMap<String, String> {
        let mut meta: BTreeMap<String, String> =
            self.config.pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        meta.insert("epochs_run".into(), self.epochs_run.to_string());
        meta.insert("final_loss".into(), self.final_loss.map(|l| l.to_string()).unwrap_or_default());
        meta.insert("normalizer".into(), self.normalizer.map(|n| n.to_meta()).unwrap_or_default());
        meta.insert("source".into(), self.source.map(|s| s.as_str().to_string()).unwrap_or_default());
        meta.insert("tensor_count".into(), self.params.tensors().len().to_string());
        meta
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        for (k, v) in self.metadata() {
            let _ = writeln!(header, "{k}={v}");
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic").ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let header_len = r.u32("metadata length")? as usize;
        let header = std::str::from_utf8(r.take(header_len, "metadata")?)
            .map_err(|_| Error::Corrupt("metadata is not UTF-8".into()))?;
        let mut meta = BTreeMap::new();
        for line in header.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Corrupt(format!("metadata line '{line}' has no '='")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let mut take_meta = |k: &str| meta.remove(k).ok_or_else(|| Error::Corrupt(format!("metadata key '{k}' missing")));
        let tensor_count: usize = take_meta("tensor_count")?
            .parse()
            .map_err(|_| Error::Corrupt("bad tensor_count".into()))?;
        let epochs_run: usize = take_meta("epochs_run")?
            .parse()
            .map_err(|_| Error::Corrupt("bad epochs_run".into()))?;
        let final_loss = match take_meta("final_loss")?.as_str() {
            "" => None,
            s => Some(s.parse().map_err(|_| Error::Corrupt("bad final_loss".into()))?),
        };
        let normalizer = match take_meta("normalizer")?.as_str() {
            "" => None,
            s => Some(Normalizer::from_meta(s)?),
        };
        let source = match take_meta("source")?.as_str() {
            "" => None,
            s => Some(s.parse()?),
        };
        let mut config = TrainConfig::default();
        for (k, v) in &meta {
            config.set(k, v).map_err(|e| Error::Corrupt(e.to_string()))?;
        }

        let mut named = Vec::with_capacity(tensor_count.min(1024));
        for _ in 0..tensor_count {
            let name_len = r.u32("tensor name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
            let rank = r.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                let d = r.u64("tensor dimension")?;
                shape.push(usize::try_from(d).map_err(|_| Error::Corrupt(format!("dimension {d} too large")))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Corrupt(format!("tensor '{name}' is too large")))?;
            let raw = r.take(numel.saturating_mul(8), "tensor data")?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            named.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let params = DenoiserParams::from_named(config.denoiser.clone(), named)?;
        config.validate()?;
        Ok(Self { config, params, epochs_run, final_loss, normalizer, source })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Corrupt(format!("truncated while reading {what}")));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Seeded init without training, for tests and tooling.
pub fn init_checkpoint(cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    Ok(Checkpoint {
        config: cfg.clone(),
        params: DenoiserParams::init(cfg.denoiser.clone(), cfg.seed)?,
        epochs_run: 0,
        final_loss: None,
        normalizer: None,
        source: None,
    })
}

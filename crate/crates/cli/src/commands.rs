use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use icgdm::dataset::{self, Normalizer, Source};
use icgdm::diffusion::sample_scenarios;
use icgdm::metrics::{self, ScenarioSet, Units};
use icgdm::schedule::NoiseSchedule;
use icgdm::trainer::{self, write_atomic, Checkpoint};
use icgdm::{Exec, SEQ_LEN};

use crate::config::{parse_levels, RunConfig};
use crate::{scenarios, EvalArgs, KindArg, SampleArgs, ScheduleArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const SCENARIO_FILE: &str = "scenarios.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ACF_FILE: &str = "acf.csv";
pub const SCHEDULE_FILE: &str = "schedule.csv";

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn usage(error: anyhow::Error) -> Self {
        Self { code: 2, error }
    }

    fn runtime(error: anyhow::Error) -> Self {
        Self { code: 1, error }
    }
}

/// Files written by one command; removed again if the command fails.
struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), written: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(path);
        Ok(())
    }

    fn discard(&self) {
        for p in &self.written {
            let _ = std::fs::remove_file(p);
        }
    }

    fn finish(self) {
        for p in &self.written {
            println!("wrote {}", p.display());
        }
    }
}

fn write_all(out: &Path, files: &[(&str, Vec<u8>)]) -> Result<(), Failure> {
    let mut outputs = Outputs::new(out).map_err(Failure::runtime)?;
    for (name, bytes) in files {
        if let Err(e) = outputs.write(name, bytes) {
            outputs.discard();
            return Err(Failure::runtime(e));
        }
    }
    outputs.finish();
    Ok(())
}

fn manifest(command: &str, lines: &[String]) -> Vec<u8> {
    let mut s = format!("# icgdm {} {command} run manifest\n", env!("CARGO_PKG_VERSION"));
    for l in lines {
        s.push_str(l);
        s.push('\n');
    }
    s.into_bytes()
}

fn single_day(series: &dataset::HourlySeries, path: &Path) -> Result<dataset::RawDay> {
    if series.rows.len() != SEQ_LEN {
        bail!("{} has {} rows, expected exactly {SEQ_LEN}", path.display(), series.rows.len());
    }
    Ok(series.days().remove(0))
}

fn require_normalizer(ckpt: &Checkpoint, path: &Path) -> Result<Normalizer> {
    ckpt.normalizer
        .ok_or_else(|| anyhow!("{} carries no normalizer; it was not produced by `train`", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

struct TrainInputs {
    cfg: RunConfig,
    prepared: dataset::Prepared,
}

fn train_inputs(a: &TrainArgs) -> Result<TrainInputs> {
    let mut cfg = RunConfig::load(a.config.as_ref(), a.source)?;
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
    }
    if let Some(k) = a.schedule {
        cfg.train.schedule = k;
    }
    let t = &mut cfg.train;
    t.steps = a.steps.unwrap_or(t.steps);
    t.seed = a.seed.unwrap_or(t.seed);
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.learning_rate = a.learning_rate.unwrap_or(t.learning_rate);
    cfg.test_days = a.test_days.unwrap_or(cfg.test_days);
    cfg.validate()?;

    let data = cfg.data.clone().ok_or_else(|| anyhow!("no training data: pass --data or set 'data' in the config"))?;
    let series = dataset::load_csv(&data, cfg.source).with_context(|| format!("reading {}", data.display()))?;
    let total = series.rows.len() / SEQ_LEN;
    if cfg.test_days >= total {
        bail!("{} holds {total} days; cannot hold out {} test days", data.display(), cfg.test_days);
    }
    let prepared = dataset::prepare(&series, total - cfg.test_days)?;
    Ok(TrainInputs { cfg, prepared })
}

pub fn train(a: &TrainArgs, exec: Exec) -> Result<(), Failure> {
    let TrainInputs { cfg, prepared } = train_inputs(a).map_err(Failure::usage)?;
    log::info!(
        "training on {} days ({} held out), T = {}, {} epochs",
        prepared.train.len(),
        prepared.test.len(),
        cfg.train.steps,
        cfg.train.epochs
    );
    let run = trainer::train(&prepared.train, &cfg.train, exec).map_err(|e| Failure::runtime(e.into()))?;
    let mut ckpt = run.checkpoint;
    ckpt.normalizer = Some(prepared.normalizer);
    ckpt.source = Some(cfg.source);

    let mut lines = cfg.manifest_lines();
    lines.push(format!("normalizer = {}", prepared.normalizer.to_meta()));
    lines.push(format!("train_days = {}", prepared.train.len()));
    if let Some(first) = prepared.test.first() {
        lines.push(format!("first_test_day = {}", first.date));
    }
    if let Some(l) = ckpt.final_loss {
        lines.push(format!("final_loss = {l}"));
    }
    write_all(
        &a.out,
        &[
            (CHECKPOINT_FILE, ckpt.to_bytes()),
            (LOSS_FILE, trainer::loss_csv(&run.losses).into_bytes()),
            ("train_manifest.txt", manifest("train", &lines)),
        ],
    )
}

struct SampleInputs {
    ckpt: Checkpoint,
    normalizer: Normalizer,
    cond: icgdm::denoiser::ConditionVector,
    num: usize,
}

fn sample_inputs(a: &SampleArgs) -> Result<SampleInputs> {
    let cfg = RunConfig::load(a.config.as_ref(), a.source)?;
    let num = a.num.unwrap_or(cfg.num);
    if num == 0 {
        bail!("--num must be at least 1");
    }
    let ckpt = load_checkpoint(&a.model)?;
    let normalizer = require_normalizer(&ckpt, &a.model)?;
    let model_source = ckpt.source.unwrap_or(Source::Pv);
    if let Some(s) = a.source {
        if s != model_source {
            bail!("{} was trained on {model_source} data, not {s}", a.model.display());
        }
    }
    let series = dataset::load_forecast_csv(&a.forecast, model_source)
        .with_context(|| format!("reading {}", a.forecast.display()))?;
    let day = single_day(&series, &a.forecast)?;
    let cond = normalizer.condition(&day.forecast_mw)?;
    Ok(SampleInputs { ckpt, normalizer, cond, num })
}

pub fn sample(a: &SampleArgs, exec: Exec) -> Result<(), Failure> {
    let SampleInputs { ckpt, normalizer, cond, num } = sample_inputs(a).map_err(Failure::usage)?;
    let generate = || -> Result<ScenarioSet> {
        let model = ckpt.model()?;
        let set = sample_scenarios(&model, &cond, num, a.seed, exec)?;
        Ok(set.map_values(Units::Mw, |v| normalizer.denormalize_value(v)))
    };
    let set = generate().map_err(Failure::runtime)?;
    let lines = vec![
        format!("model = {}", a.model.display()),
        format!("forecast = {}", a.forecast.display()),
        format!("num = {num}"),
        format!("seed = {}", a.seed),
    ];
    write_all(
        &a.out,
        &[
            (SCENARIO_FILE, scenarios::to_csv(set.trajectories()).into_bytes()),
            ("sample_manifest.txt", manifest("sample", &lines)),
        ],
    )
}

struct EvalInputs {
    set: ScenarioSet,
    actual: Vec<f64>,
    levels: Vec<f64>,
    normalizer: Option<Normalizer>,
}

fn eval_inputs(a: &EvalArgs) -> Result<EvalInputs> {
    let cfg = RunConfig::load(a.config.as_ref(), None)?;
    let levels = match &a.levels {
        Some(s) => parse_levels(s)?,
        None => cfg.levels,
    };
    let trajectories = scenarios::read(&a.scenarios)?;
    let series = dataset::load_csv(&a.actual, cfg.source).with_context(|| format!("reading {}", a.actual.display()))?;
    let actual = single_day(&series, &a.actual)?.actual_mw.expect("actuals are required by load_csv");
    if trajectories[0].len() != actual.len() {
        bail!("scenarios have {} hours but the actual day has {}", trajectories[0].len(), actual.len());
    }
    if levels.iter().any(|&l| l < 100.0) && trajectories.len() < 2 {
        bail!("levels below 100 need at least two scenarios");
    }
    let normalizer = match &a.model {
        Some(p) => Some(require_normalizer(&load_checkpoint(p)?, p)?),
        None => None,
    };
    Ok(EvalInputs { set: ScenarioSet::new(trajectories, Units::Mw)?, actual, levels, normalizer })
}

pub fn eval(a: &EvalArgs) -> Result<(), Failure> {
    let EvalInputs { set, actual, levels, normalizer } = eval_inputs(a).map_err(Failure::usage)?;
    let report = match normalizer {
        Some(n) => {
            let norm_set = set.map_values(Units::Normalized, |v| n.normalize_value(v).clamp(0.0, 1.0));
            let norm_actual = n.normalize(&actual);
            metrics::evaluate(&set, &actual, &levels, Some((&norm_set, &norm_actual)))
        }
        None => {
            log::warn!("no --model given; AED is reported in MW");
            metrics::evaluate(&set, &actual, &levels, None)
        }
    }
    .map_err(|e| Failure::runtime(e.into()))?;

    let mut files = vec![(METRICS_FILE, report.to_csv().into_bytes())];
    if let Some(acf) = report.acf_csv() {
        files.push((ACF_FILE, acf.into_bytes()));
    }
    let mut lines = vec![
        format!("scenarios = {}", a.scenarios.display()),
        format!("actual = {}", a.actual.display()),
        format!("levels = {}", levels.iter().map(f64::to_string).collect::<Vec<_>>().join(",")),
    ];
    if let Some(m) = &a.model {
        lines.push(format!("model = {}", m.display()));
    }
    files.push(("eval_manifest.txt", manifest("eval", &lines)));
    write_all(&a.out, &files)
}

fn schedule_rows(out: &mut String, label: Option<&str>, s: &NoiseSchedule) {
    for t in 1..=s.steps() {
        if let Some(l) = label {
            let _ = write!(out, "{l},");
        }
        let _ = writeln!(out, "{t},{},{},{}", s.beta(t), s.alpha_bar(t), s.posterior_var(t));
    }
}

pub fn schedule(a: &ScheduleArgs) -> Result<(), Failure> {
    let build = || -> Result<String> {
        let linear = || NoiseSchedule::linear(a.steps, a.beta_start, a.beta_end);
        let cosine = || NoiseSchedule::cosine(a.steps, a.offset, a.beta_max);
        let mut out = String::new();
        match a.kind {
            KindArg::Linear | KindArg::Cosine => {
                let s = if a.kind == KindArg::Linear { linear()? } else { cosine()? };
                out.push_str("t,beta,alpha_bar,posterior_var\n");
                schedule_rows(&mut out, None, &s);
            }
            KindArg::Both => {
                let (l, c) = (linear()?, cosine()?);
                out.push_str("schedule,t,beta,alpha_bar,posterior_var\n");
                schedule_rows(&mut out, Some("linear"), &l);
                schedule_rows(&mut out, Some("cosine"), &c);
            }
        }
        Ok(out)
    };
    let csv = build().map_err(Failure::usage)?;
    write_all(&a.out, &[(SCHEDULE_FILE, csv.into_bytes())])
}

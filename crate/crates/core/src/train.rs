//! Training driver: batch sampling, checkpoints, the loss log and resume.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{RunConfig, TOOL_VERSION};
use crate::data::{self, make_dataset_range, TwoFrameSample};
use crate::diffusion::{train_step, AdamW, DiffusionSchedule, Example, StepStats};
use crate::error::{Error, Result};
use crate::lora;
use crate::model::{init_params, Model};
use crate::tensor::{checkpoint, ParameterStore, Rng, Tensor};

pub const LOG_HEADER: &str = "step,loss,lr,grad_norm";
pub const RESOLVED_CONFIG: &str = "config.resolved.txt";
pub const LOSS_LOG: &str = "loss.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
const STEP_KEY: &str = "train.step";

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint_{step:06}.ckpt")
}

/// Training and held-out samples for `cfg`. The held-out split continues
/// the generator stream right after the training range.
pub fn load_samples(cfg: &RunConfig) -> Result<(Vec<TwoFrameSample>, Vec<TwoFrameSample>)> {
    let (train, task, seed, offset, opts) = match &cfg.data.dir {
        Some(dir) => {
            let ds = data::load_dataset(dir)?;
            if ds.task != cfg.data.task {
                return Err(Error::Config(format!(
                    "dataset in {} is {}, config says {}",
                    dir.display(),
                    ds.task,
                    cfg.data.task
                )));
            }
            let n = ds.samples.len() as u64;
            (ds.samples, ds.task, ds.seed, n, ds.options)
        }
        None => {
            let opts = cfg.data_options();
            let ds = make_dataset_range(cfg.data.task, 0, cfg.data.n, cfg.data.seed, opts)?;
            (ds.samples, cfg.data.task, cfg.data.seed, cfg.data.n as u64, opts)
        }
    };
    let held = make_dataset_range(task, offset, cfg.data.holdout, seed, opts)?;
    Ok((train, held.samples))
}

pub fn to_examples(samples: &[TwoFrameSample], s: usize) -> Result<Vec<Example>> {
    samples.iter().map(|x| x.to_example(s)).collect()
}

/// Strips optimizer and bookkeeping entries from a checkpoint.
pub fn model_params(ckpt: &ParameterStore) -> ParameterStore {
    let mut p = ckpt.filtered(|n| !n.starts_with("opt.") && !n.starts_with("train."));
    lora::set_trainable(&mut p);
    p
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub sched: DiffusionSchedule,
    pub store: ParameterStore,
    pub opt: AdamW,
    /// Optimizer steps completed so far.
    pub step: u64,
    examples: Vec<Example>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, examples: Vec<Example>) -> Result<Self> {
        cfg.validate()?;
        let mcfg = cfg.model_config();
        let mut store = init_params(&mcfg, cfg.train.seed)?;
        if cfg.lora.enabled {
            let pats: Vec<&str> = cfg.lora.targets.iter().map(String::as_str).collect();
            lora::inject(&mut store, &pats, cfg.lora.rank, cfg.lora.alpha, cfg.train.seed)?;
        }
        Ok(Self {
            cfg: cfg.clone(),
            model: Model::new(mcfg, cfg.train.mask)?,
            sched: cfg.schedule()?,
            store,
            opt: cfg.optimizer(),
            step: 0,
            examples,
        })
    }

    /// Restores parameters, optimizer moments and the step counter.
    pub fn from_checkpoint(cfg: &RunConfig, examples: Vec<Example>, ckpt: &ParameterStore) -> Result<Self> {
        let mut tr = Self::new(cfg, examples)?;
        let store = model_params(ckpt);
        let expected: Vec<&str> = tr.store.names().collect();
        let got: Vec<&str> = store.names().collect();
        if expected != got {
            return Err(Error::Checkpoint("checkpoint parameters do not match the configured model".into()));
        }
        tr.store = store;
        tr.opt.import_state(ckpt)?;
        tr.step = ckpt.require(STEP_KEY)?.item()? as u64;
        Ok(tr)
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    /// Parameters, optimizer state and the step counter.
    pub fn checkpoint(&self) -> Result<ParameterStore> {
        let mut out = self.store.clone();
        self.opt.export_state(&mut out)?;
        out.insert(STEP_KEY, Tensor::scalar(self.step as f64))?;
        Ok(out)
    }

    /// The random stream of step `s` depends only on the seed and `s`,
    /// which is what makes resumed runs match uninterrupted ones.
    fn step_rng(&self, s: u64) -> Rng {
        Rng::new(self.cfg.train.seed).derive_str("train.step").derive(s)
    }

    pub fn step_once(&mut self) -> Result<StepStats> {
        if self.examples.is_empty() {
            return Err(Error::Config("no training examples".into()));
        }
        let next = self.step + 1;
        let mut rng = self.step_rng(next);
        let batch: Vec<&Example> = (0..self.cfg.train.batch_size)
            .map(|_| &self.examples[rng.below(self.examples.len())])
            .collect();
        let stats = train_step(
            &self.model,
            &mut self.store,
            &mut self.opt,
            &batch,
            &self.sched,
            self.cfg.train.cfg_drop,
            &mut rng,
        )?;
        self.step = next;
        Ok(stats)
    }

    /// Steps until `self.step == until`, reporting each step.
    pub fn run_until(&mut self, until: u64, mut on_step: impl FnMut(u64, &StepStats) -> Result<()>) -> Result<()> {
        while self.step < until {
            let stats = self.step_once()?;
            on_step(self.step, &stats)?;
        }
        Ok(())
    }
}

/// What [`run_training`] leaves behind.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub last_checkpoint: PathBuf,
}

fn read_log_until(path: &Path, step: u64) -> Result<String> {
    let mut out = format!("{LOG_HEADER}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let s: u64 = line.split(',').next().and_then(|v| v.parse().ok()).unwrap_or(u64::MAX);
            if s <= step {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Trains to `cfg.train.steps`, writing the resolved config, the loss log,
/// periodic checkpoints and `last.ckpt` under `out`. With `resume`, the run
/// continues from that checkpoint and the log is truncated to its step.
/// A non-finite step aborts before anything is overwritten, so the newest
/// checkpoint on disk is the last good state.
pub fn run_training(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.render())?;
    fs::write(out.join("VERSION"), format!("{TOOL_VERSION}\n"))?;
    let (train, _) = load_samples(cfg)?;
    let examples = to_examples(&train, cfg.model.latent_factor)?;
    let mut tr = match resume {
        Some(p) => Trainer::from_checkpoint(cfg, examples, &checkpoint::load(p)?)?,
        None => Trainer::new(cfg, examples)?,
    };
    let log_path = out.join(LOSS_LOG);
    fs::write(&log_path, read_log_until(&log_path, tr.step)?)?;
    let last = out.join(LAST_CHECKPOINT);
    if resume.is_none() {
        checkpoint::save(&tr.checkpoint()?, &last)?;
    }
    let mut log = fs::OpenOptions::new().append(true).open(&log_path)?;
    let (mut first, mut latest) = (None, None);
    let every = cfg.train.checkpoint_every;
    while tr.step < cfg.train.steps {
        let st = tr.step_once()?;
        let step = tr.step;
        writeln!(log, "{step},{:?},{:?},{:?}", st.loss, cfg.optim.lr, st.grad_norm)?;
        first.get_or_insert(st.loss);
        latest = Some(st.loss);
        if every > 0 && step % every == 0 {
            let ck = tr.checkpoint()?;
            checkpoint::save(&ck, out.join(checkpoint_name(step)))?;
            checkpoint::save(&ck, &last)?;
        }
    }
    checkpoint::save(&tr.checkpoint()?, &last)?;
    Ok(TrainSummary { steps: tr.step, first_loss: first, last_loss: latest, last_checkpoint: last })
}

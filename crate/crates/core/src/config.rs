//! Run configuration: line-oriented `key = value` under `[section]` headers.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::DataOptions;
use crate::diffusion::{AdamW, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::lora::DEFAULT_TARGETS;
use crate::model::{MaskStrategy, ModelConfig};
use crate::task::Task;

pub const TOOL_VERSION: &str = concat!("framegen ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub cfg_drop: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub mask: MaskStrategy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    /// `None` picks the task default.
    pub omega: Option<f64>,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraConfig {
    pub enabled: bool,
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub task: Task,
    pub n: usize,
    pub seed: u64,
    pub holdout: usize,
    /// Dataset directory written by `make-data`; `None` generates in memory.
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub lora: LoraConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            schedule: ScheduleConfig { beta_start: 1e-4, beta_end: 2e-2 },
            optim: OptimConfig { lr: 1e-4, beta1: 0.9, beta2: 0.95, weight_decay: 0.01, clip_norm: None },
            train: TrainConfig {
                steps: 5000,
                batch_size: 4,
                cfg_drop: 0.1,
                checkpoint_every: 500,
                seed: 0,
                mask: MaskStrategy::A,
            },
            sample: SampleConfig { omega: None, steps: 50 },
            lora: LoraConfig {
                enabled: false,
                rank: 4,
                alpha: 4.0,
                targets: DEFAULT_TARGETS.iter().map(|s| s.to_string()).collect(),
            },
            data: DataConfig { task: Task::Canny, n: 256, seed: 0, holdout: 16, dir: None },
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_opt_f64(key: &str, v: &str) -> Result<Option<f64>> {
    match v {
        "none" | "auto" => Ok(None),
        _ => parse(key, v).map(Some),
    }
}

fn show_opt(v: Option<f64>, none: &str) -> String {
    v.map_or_else(|| none.to_string(), |x| format!("{x:?}"))
}

impl RunConfig {
    /// Sets one `section.key`; unknown keys are an error.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "model.image_size" => m.image_size = parse(key, v)?,
            "model.channels" => m.channels = parse(key, v)?,
            "model.latent_factor" => m.latent_factor = parse(key, v)?,
            "model.d_model" => m.d_model = parse(key, v)?,
            "model.n_heads" => m.n_heads = parse(key, v)?,
            "model.n_blocks" => m.n_blocks = parse(key, v)?,
            "model.patch" => m.patch = parse(key, v)?,
            "model.vocab_size" => m.vocab_size = parse(key, v)?,
            "model.text_len" => m.text_len = parse(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "model.time_dim" => m.time_dim = parse(key, v)?,
            "model.adaln_hidden" => m.adaln_hidden = parse(key, v)?,
            "model.ln_eps" => m.ln_eps = parse(key, v)?,
            "model.rope_base" => m.rope_base = parse(key, v)?,
            "model.mask_c_blocks_diagonal" => m.mask_c_blocks_diagonal = parse_bool(key, v)?,
            "schedule.t_max" => m.t_max = parse(key, v)?,
            "schedule.beta_start" => self.schedule.beta_start = parse(key, v)?,
            "schedule.beta_end" => self.schedule.beta_end = parse(key, v)?,
            "optim.lr" => self.optim.lr = parse(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "optim.clip_norm" => self.optim.clip_norm = parse_opt_f64(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.cfg_drop" => self.train.cfg_drop = parse(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.mask" => self.train.mask = v.parse()?,
            "sample.omega" => self.sample.omega = parse_opt_f64(key, v)?,
            "sample.steps" => self.sample.steps = parse(key, v)?,
            "lora.enabled" => self.lora.enabled = parse_bool(key, v)?,
            "lora.rank" => self.lora.rank = parse(key, v)?,
            "lora.alpha" => self.lora.alpha = parse(key, v)?,
            "lora.targets" => {
                self.lora.targets = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
            }
            "data.task" => self.data.task = v.parse()?,
            "data.n" => self.data.n = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.holdout" => self.data.holdout = parse(key, v)?,
            "data.dir" => self.data.dir = (v != "none").then(|| PathBuf::from(v)),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `text` on top of `self` and validates the result.
    pub fn apply(mut self, text: &str) -> Result<Self> {
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
            if section.is_empty() {
                return Err(at(format!("key {:?} outside any [section]", k.trim())));
            }
            self.set(&format!("{section}.{}", k.trim()), v.trim())
                .map_err(|e| at(e.to_string()))?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::default().apply(text)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let s = &self.schedule;
        if !(0.0 < s.beta_start && s.beta_start <= s.beta_end && s.beta_end < 1.0) {
            return bad("schedule betas must satisfy 0 < beta_start <= beta_end < 1");
        }
        let o = &self.optim;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            return bad("optim.lr must be finite and nonnegative");
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return bad("optim betas must lie in [0, 1)");
        }
        if o.clip_norm.is_some_and(|c| c <= 0.0) {
            return bad("optim.clip_norm must be positive or none");
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&t.cfg_drop) {
            return bad("train.cfg_drop must lie in [0, 1]");
        }
        if self.sample.steps == 0 || self.sample.steps > self.model.t_max {
            return bad("sample.steps must lie in 1..=t_max");
        }
        if self.lora.enabled && (self.lora.rank == 0 || self.lora.targets.is_empty()) {
            return bad("lora needs a positive rank and at least one target");
        }
        if self.data.n == 0 && self.train.steps > 0 {
            return bad("training needs data.n > 0");
        }
        Ok(())
    }

    /// The model configuration with the adapter scale wired in.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { lora_alpha: self.lora.alpha, ..self.model.clone() }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.model.t_max, self.schedule.beta_start, self.schedule.beta_end)
    }

    pub fn optimizer(&self) -> AdamW {
        let mut opt = AdamW::new(self.optim.lr, (self.optim.beta1, self.optim.beta2), self.optim.weight_decay);
        opt.clip_norm = self.optim.clip_norm;
        opt
    }

    pub fn omega(&self) -> f64 {
        self.sample.omega.unwrap_or_else(|| self.data.task.default_omega())
    }

    pub fn data_options(&self) -> DataOptions {
        DataOptions { image_size: self.model.image_size, text_len: self.model.text_len }
    }

    /// Every key with its resolved value, grouped by section.
    pub fn render(&self) -> String {
        let m = &self.model;
        let (s, o, t, sa, l, d) = (&self.schedule, &self.optim, &self.train, &self.sample, &self.lora, &self.data);
        let sections: [(&str, Vec<(&str, String)>); 7] = [
            (
                "model",
                vec![
                    ("image_size", m.image_size.to_string()),
                    ("channels", m.channels.to_string()),
                    ("latent_factor", m.latent_factor.to_string()),
                    ("d_model", m.d_model.to_string()),
                    ("n_heads", m.n_heads.to_string()),
                    ("n_blocks", m.n_blocks.to_string()),
                    ("patch", m.patch.to_string()),
                    ("vocab_size", m.vocab_size.to_string()),
                    ("text_len", m.text_len.to_string()),
                    ("mlp_ratio", m.mlp_ratio.to_string()),
                    ("time_dim", m.time_dim.to_string()),
                    ("adaln_hidden", m.adaln_hidden.to_string()),
                    ("ln_eps", format!("{:?}", m.ln_eps)),
                    ("rope_base", format!("{:?}", m.rope_base)),
                    ("mask_c_blocks_diagonal", m.mask_c_blocks_diagonal.to_string()),
                ],
            ),
            (
                "schedule",
                vec![
                    ("t_max", m.t_max.to_string()),
                    ("beta_start", format!("{:?}", s.beta_start)),
                    ("beta_end", format!("{:?}", s.beta_end)),
                ],
            ),
            (
                "optim",
                vec![
                    ("lr", format!("{:?}", o.lr)),
                    ("beta1", format!("{:?}", o.beta1)),
                    ("beta2", format!("{:?}", o.beta2)),
                    ("weight_decay", format!("{:?}", o.weight_decay)),
                    ("clip_norm", show_opt(o.clip_norm, "none")),
                ],
            ),
            (
                "train",
                vec![
                    ("steps", t.steps.to_string()),
                    ("batch_size", t.batch_size.to_string()),
                    ("cfg_drop", format!("{:?}", t.cfg_drop)),
                    ("checkpoint_every", t.checkpoint_every.to_string()),
                    ("seed", t.seed.to_string()),
                    ("mask", t.mask.to_string()),
                ],
            ),
            (
                "sample",
                vec![("omega", show_opt(sa.omega, "auto")), ("steps", sa.steps.to_string())],
            ),
            (
                "lora",
                vec![
                    ("enabled", l.enabled.to_string()),
                    ("rank", l.rank.to_string()),
                    ("alpha", format!("{:?}", l.alpha)),
                    ("targets", l.targets.join(",")),
                ],
            ),
            (
                "data",
                vec![
                    ("task", d.task.to_string()),
                    ("n", d.n.to_string()),
                    ("seed", d.seed.to_string()),
                    ("holdout", d.holdout.to_string()),
                    ("dir", d.dir.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())),
                ],
            ),
        ];
        let mut out = format!("# resolved by {TOOL_VERSION}\n");
        for (name, kv) in sections {
            let _ = writeln!(out, "\n[{name}]");
            for (k, v) in kv {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }

    /// Short stable digest of the resolved configuration.
    pub fn hash(&self) -> String {
        let body: String = self.render().lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n");
        let digest = Sha256::digest(body.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

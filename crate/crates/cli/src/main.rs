//! `framegen`: dataset generation, training, sampling, gradient checks and
//! mask ablation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use framegen_core::check::{model_gradcheck, worst, GradCheckOptions};
use framegen_core::config::{RunConfig, TOOL_VERSION};
use framegen_core::data::{make_dataset_with, pnm, write_dataset, DataOptions};
use framegen_core::diffusion::sample;
use framegen_core::metrics::ablate_masks;
use framegen_core::model::{MaskStrategy, Model, ModelConfig, Vocabulary};
use framegen_core::tensor::{checkpoint, Fault};
use framegen_core::train::{model_params, run_training, RESOLVED_CONFIG};
use framegen_core::{Error, Task};

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "framegen", version, about = "Two-frame conditional diffusion at toy scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural two-frame dataset.
    MakeData(MakeDataArgs),
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Generate one target image from a condition image and a prompt.
    Sample(SampleArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train one model per (mask strategy, seed) and compare held-out scores.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct MakeDataArgs {
    #[arg(long)]
    task: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 6)]
    text_len: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override one `section.key=value` after the file is read.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run configuration; defaults to the resolved copy next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cond: PathBuf,
    #[arg(long)]
    prompt: String,
    /// Guidance weight; defaults to the task's value.
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run configuration whose [model] section is checked; defaults to the
    /// miniature model.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Coordinates probed per tensor (0 = all).
    #[arg(long, default_value_t = 8)]
    coords: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "a")]
    mask: String,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "a,b,c,none")]
    strategies: String,
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    #[arg(long)]
    out: PathBuf,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite(_)
            | Error::FullyMaskedRow { .. }
            | Error::Dimension(_)
            | Error::ShapeMismatch { .. }
            | Error::Contract(_) => EXIT_NUMERIC,
            _ => EXIT_CONFIG,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new(EXIT_CONFIG, e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn write_version(dir: &Path) -> std::io::Result<()> {
    fs::write(dir.join("VERSION"), format!("{TOOL_VERSION}\n"))
}

fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::new(EXIT_CONFIG, format!("cannot read {}: {e}", path.display())))?;
    let mut extra = String::new();
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::new(EXIT_USAGE, format!("--set expects KEY=VALUE, got {o:?}")))?;
        let (section, key) = k
            .split_once('.')
            .ok_or_else(|| Failure::new(EXIT_USAGE, format!("--set key needs a section: {k:?}")))?;
        let _ = writeln!(extra, "[{section}]\n{key} = {v}");
    }
    Ok(RunConfig::parse(&format!("{text}\n{extra}"))?)
}

fn cmd_make_data(a: MakeDataArgs) -> CmdResult {
    let task: Task = a.task.parse()?;
    let opts = DataOptions { image_size: a.image_size, text_len: a.text_len };
    let ds = make_dataset_with(task, a.n, a.seed, opts)?;
    let m = write_dataset(&a.out, &ds)?;
    println!("wrote {} {} samples to {} (checksum {})", m.n, task, a.out.display(), m.checksum);
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let cfg = load_config(&a.config, &a.overrides)?;
    match run_training(&cfg, &a.out, a.resume.as_deref()) {
        Ok(s) => {
            println!(
                "trained {} steps; loss {} -> {}; checkpoint {}",
                s.steps,
                s.first_loss.map_or("-".into(), |v| format!("{v:.5}")),
                s.last_loss.map_or("-".into(), |v| format!("{v:.5}")),
                s.last_checkpoint.display()
            );
            Ok(())
        }
        Err(Error::NonFinite(m)) => Err(Failure::new(
            EXIT_NUMERIC,
            format!("non-finite value, training aborted: {m}; last good checkpoint kept in {}", a.out.display()),
        )),
        Err(e) => Err(e.into()),
    }
}

fn cmd_sample(a: SampleArgs) -> CmdResult {
    let cfg_path = a.config.clone().unwrap_or_else(|| {
        a.checkpoint.parent().unwrap_or(Path::new(".")).join(RESOLVED_CONFIG)
    });
    let cfg = load_config(&cfg_path, &[])?;
    let task: Task = match &a.task {
        Some(t) => t.parse()?,
        None => cfg.data.task,
    };
    let omega = a.omega.unwrap_or_else(|| task.default_omega());
    let ids = Vocabulary::shipped().encode(&a.prompt, cfg.model.text_len)?;
    let store = model_params(&checkpoint::load(&a.checkpoint)?);
    let model = Model::new(cfg.model_config(), cfg.train.mask)?;
    let cond = pnm::read_pnm(&a.cond)?;
    let out = sample(&model, &store, &cfg.schedule()?, &cond, &ids, task, a.steps, omega, a.seed)?;
    pnm::write_ppm(&a.out, &out.image)?;
    let meta = format!(
        "omega={omega:?}\nsteps={}\nseed={}\ntask={task}\nprompt={}\nconfig_hash={}\ncheckpoint={}\nversion={TOOL_VERSION}\n",
        a.steps,
        a.seed,
        a.prompt,
        cfg.hash(),
        a.checkpoint.display()
    );
    let mut meta_path = a.out.clone().into_os_string();
    meta_path.push(".meta.txt");
    fs::write(&meta_path, meta)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let cfg = match &a.config {
        Some(p) => load_config(p, &[])?.model_config(),
        None => ModelConfig::miniature(),
    };
    let opts = GradCheckOptions {
        max_coords: (a.coords > 0).then_some(a.coords),
        seed: a.seed,
        strategy: a.mask.parse::<MaskStrategy>()?,
        fault: a.inject_fault.then_some(Fault::SiluBackward),
        ..Default::default()
    };
    let reports = model_gradcheck(&cfg, &opts)?;
    for r in &reports {
        let (name, err) = r.report.worst().unwrap_or(("-", 0.0));
        println!("{:<16} worst {err:.3e}  ({name})", r.scope);
    }
    let Some((scope, name, err)) = worst(&reports) else {
        return Err(Failure::new(EXIT_NUMERIC, "no parameters were checked"));
    };
    println!("worst relative error: {err:.3e} at {name} ({scope}); tolerance {:.1e}", a.tolerance);
    if err <= a.tolerance {
        return Ok(());
    }
    let offenders: Vec<String> = reports
        .iter()
        .flat_map(|r| {
            r.report
                .per_param
                .iter()
                .filter(|(_, e, _)| *e > a.tolerance)
                .map(move |(n, e, _)| format!("{n} ({}, {e:.3e})", r.scope))
        })
        .collect();
    Err(Failure::new(EXIT_NUMERIC, format!("gradient check failed for: {}", offenders.join(", "))))
}

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> Result<Vec<T>, Failure> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|_| Failure::new(EXIT_USAGE, format!("bad {what} {x:?}"))))
        .collect()
}

fn cmd_ablate(a: AblateArgs) -> CmdResult {
    let cfg = load_config(&a.config, &[])?;
    let strategies: Vec<MaskStrategy> = parse_list("strategy", &a.strategies)?;
    let seeds: Vec<u64> = parse_list("seed", &a.seeds)?;
    if strategies.is_empty() || seeds.is_empty() {
        return Err(Failure::new(EXIT_USAGE, "need at least one strategy and one seed"));
    }
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join(RESOLVED_CONFIG), cfg.render())?;
    write_version(&a.out)?;
    let table = ablate_masks(&cfg, &strategies, &seeds)?;
    let csv = table.to_csv();
    fs::write(a.out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    for c in table.cells.iter().filter(|c| c.diverged.is_some()) {
        eprintln!("warning: {} seed {} diverged", c.strategy, c.seed);
    }
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("FRAMEGEN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::new(EXIT_USAGE, format!("FRAMEGEN_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::new(EXIT_USAGE, e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|()| match cli.cmd {
        Command::MakeData(a) => cmd_make_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

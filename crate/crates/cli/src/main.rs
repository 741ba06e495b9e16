use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use mvf_core::config::RunConfig;
use mvf_core::model::Ablation;
use mvf_core::pipeline;
use mvf_core::Error;

#[derive(Debug, Parser)]
#[command(name = "mvf", version, about = "Video forgery detection and localization")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed (mandatory, here or in the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; defaults to runs/<command>-<timestamp>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for data preparation.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Comma-separated ablation flags, e.g. no_optflow_residual,no_temporal_residual.
    #[arg(long, global = true)]
    ablation: Option<String>,
    /// Compute device; only the CPU is supported.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    /// Default settings to start from before the config file is applied.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Paper)]
    preset: Preset,
    /// Extra `section.key=value` overrides.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Full-size model and data.
    Paper,
    /// Small model, 64x64 clips and larger learning rates for one CPU core.
    Desk,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic clip sets and camera-model frames.
    GenData,
    /// Pretrain the spatial trunk on camera-model identification.
    Pretrain {
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the full network.
    Train {
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Pretraining checkpoint (spatial trunk) or full checkpoint to start from.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Continue from a last.ckpt written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a clip set.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Clip-set directory, e.g. <data>/test.
        #[arg(long)]
        clips: PathBuf,
        /// Also report the best F1 over a threshold grid (not a paper metric).
        #[arg(long)]
        sweep_threshold: bool,
        /// Score frames by their mask maximum instead of the detection head.
        #[arg(long)]
        score_from_mask: bool,
    },
    /// Score and localize every frame of a directory of frame_%04d.png files.
    Infer {
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Evaluate a checkpoint across compression levels.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        clips: PathBuf,
    },
    /// Render curves.csv or sweep.json as SVG.
    Plot {
        #[arg(long)]
        input: PathBuf,
        /// Output file; defaults to <out>/plot.svg.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Infer { .. } => "infer",
            Command::Sweep { .. } => "sweep",
            Command::Plot { .. } => "plot",
        }
    }

    fn inputs(&self) -> Vec<&Path> {
        match self {
            Command::GenData => vec![],
            Command::Pretrain { data } => vec![data],
            Command::Train { data, pretrained, resume } => {
                let mut v = vec![data.as_path()];
                v.extend(pretrained.as_deref());
                v.extend(resume.as_deref());
                v
            }
            Command::Eval { ckpt, clips, .. } | Command::Sweep { ckpt, clips } => vec![ckpt, clips],
            Command::Infer { clip, ckpt } => vec![ckpt, clip],
            Command::Plot { input, .. } => vec![input],
        }
    }

    /// Commands that take their model settings from a checkpoint.
    fn uses_checkpoint(&self) -> bool {
        matches!(self, Command::Eval { .. } | Command::Infer { .. } | Command::Sweep { .. } | Command::Plot { .. })
    }
}

/// A failure reported as one line of JSON with its exit status.
struct Failure {
    code: u8,
    body: serde_json::Value,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::Io { path, source } if source.kind() == io::ErrorKind::NotFound => Failure {
                code: 2,
                body: serde_json::json!({ "error": "not_found", "path": path, "message": message }),
            },
            Error::Config(problems) => Failure {
                code: 2,
                body: serde_json::json!({ "error": "config", "problems": problems, "message": message }),
            },
            Error::InvalidArgument(_) => {
                Failure { code: 1, body: serde_json::json!({ "error": "invalid_argument", "message": message }) }
            }
            _ => Failure { code: 1, body: serde_json::json!({ "error": "failed", "message": message }) },
        }
    }
}

/// Copies log output to stderr and the run directory.
struct Tee(File);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        io::stderr().write_all(buf)?;
        self.0.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        io::stderr().flush()?;
        self.0.flush()
    }
}

fn init_logging(out: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    let path = out.join("run.log");
    let file = File::create(&path).map_err(|e| Error::Io { path, source: e })?;
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Pipe(Box::new(Tee(file))))
        .try_init()
        .ok();
    Ok(())
}

fn ablation_literal(list: &str) -> Result<String, Failure> {
    let parsed = Ablation::parse(list)?;
    let items: Vec<String> = parsed.flags().iter().map(|f| format!("\"{}\"", f.name())).collect();
    Ok(format!("ablation=[{}]", items.join(", ")))
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut overrides = Vec::new();
    match cli.seed {
        Some(seed) => overrides.push(format!("seed={seed}")),
        // the seed of a checkpoint command is the one stored in the checkpoint
        None if cli.command.uses_checkpoint() => overrides.push("seed=0".into()),
        None => {}
    }
    if let Some(w) = cli.workers {
        overrides.push(format!("workers={w}"));
    }
    if let Some(a) = &cli.ablation {
        overrides.push(ablation_literal(a)?);
    }
    overrides.extend(cli.overrides.iter().cloned());
    let preset = match cli.preset {
        Preset::Paper => RunConfig::with_seed(0),
        Preset::Desk => RunConfig::desk(0),
    };
    Ok(RunConfig::compose(Some(&preset), cli.config.as_deref(), &overrides)?)
}

fn default_out(command: &Command) -> PathBuf {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    PathBuf::from("runs").join(format!("{}-{stamp}", command.name()))
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string(value).unwrap_or_default());
}

fn run(cli: Cli) -> Result<(), Failure> {
    if cli.device != "cpu" {
        return Err(Error::InvalidArgument(format!("device {:?} is not supported; use cpu", cli.device)).into());
    }
    for path in cli.command.inputs() {
        if !path.exists() {
            return Err(Error::Io { path: path.to_path_buf(), source: io::ErrorKind::NotFound.into() }.into());
        }
    }
    let cfg = resolve_config(&cli)?;
    let out = cli.out.clone().unwrap_or_else(|| default_out(&cli.command));
    init_logging(&out)?;
    info!("{} -> {}", cli.command.name(), out.display());
    match &cli.command {
        Command::GenData => print_json(&pipeline::gen_data(&cfg, &out)?),
        Command::Pretrain { data } => print_json(&pipeline::run_pretrain(&cfg, data, &out)?),
        Command::Train { data, pretrained, resume } => {
            print_json(&pipeline::run_train(&cfg, data, pretrained.as_deref(), resume.as_deref(), &out)?)
        }
        Command::Eval { ckpt, clips, sweep_threshold, score_from_mask } => {
            let mut opts = cfg.eval.clone();
            opts.sweep_threshold |= sweep_threshold;
            opts.score_from_mask |= score_from_mask;
            let report = pipeline::run_eval(ckpt, clips, &opts, cfg.workers, &out)?;
            print_json(&report.metrics);
        }
        Command::Infer { clip, ckpt } => {
            let report = pipeline::run_infer(ckpt, clip, cfg.workers, &out)?;
            print_json(&serde_json::json!({ "frames": report.frames.len(), "out": out }));
        }
        Command::Sweep { ckpt, clips } => {
            let points = pipeline::run_sweep(ckpt, clips, &cfg.eval, &cfg.sweep.qualities, cfg.workers, &out)?;
            let table: Vec<_> = points
                .iter()
                .map(|p| serde_json::json!({ "quality": p.quality.name(), "map": p.report.metrics.pooled_ap, "f1": p.report.metrics.mean_f1 }))
                .collect();
            print_json(&table);
        }
        Command::Plot { input, output } => {
            let target = output.clone().unwrap_or_else(|| out.join("plot.svg"));
            pipeline::plot(input, &target)?;
            print_json(&serde_json::json!({ "plot": target }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.body);
            ExitCode::from(f.code)
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bitta_core::adapter::save_state;
use bitta_core::harness::{
    ablate, build_streams, parse_records_csv, pretrain, run_tta, summary_text, write_timeline,
    ExperimentConfig, InstanceRecord, Mode, Timeline, TtaConfig,
};
use bitta_core::net::{load_checkpoint, save_checkpoint, ModelCheckpoint};
use bitta_core::synth::{generate_stream, read_stream, write_stream, Stream};
use bitta_core::{read_header, Error};
use serde_json::Value;

const DEFAULT_OUT_DIR: &str = "runs";

#[derive(Parser)]
#[command(
    name = "bitta",
    version,
    about = "Streaming test-time adaptation lab for rPPG"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory. Overrides BITTA_OUT_DIR, which overrides the
    /// config's `output_dir`.
    #[arg(long, env = "BITTA_OUT_DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Source,
    Target,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic stream.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        role: Role,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        frames: Option<usize>,
        /// Defaults to `<out-dir>/<role>.stream`.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Apply the configured domain shift to a stream.
    Shift {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to `<out-dir>/shifted.stream`.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Supervised pre-training on a source stream.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Source stream. Generated from the config when omitted.
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stream a target once with one adaptation mode.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
    },
    /// Run every mode on the same target. Without --checkpoint and --target
    /// the whole scenario (streams, shift, pre-training) is built from the
    /// config.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: OptionalRunArgs,
    },
    /// Metrics of a records file, or of a checkpoint on a target without
    /// adaptation.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with_all = ["checkpoint", "target"])]
        records: Option<PathBuf>,
        #[arg(long, requires = "target")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        target: Option<PathBuf>,
        /// Mode label for --records.
        #[arg(long, value_parser = parse_mode, requires = "records")]
        mode: Option<Mode>,
    },
    /// Print the header of a stream, checkpoint or adapter-state file.
    Inspect { path: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[command(flatten)]
    tta: TtaOverrides,
}

#[derive(Args)]
struct OptionalRunArgs {
    #[arg(long, requires = "target")]
    checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    target: Option<PathBuf>,
    #[command(flatten)]
    tta: TtaOverrides,
}

#[derive(Args)]
struct TtaOverrides {
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    max_instances: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

impl TtaOverrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.stride {
            cfg.tta.stride = Some(s);
        }
        if let Some(n) = self.max_instances {
            cfg.tta.max_instances = n;
        }
        if let Some(lr) = self.learning_rate {
            cfg.adapter.learning_rate = lr;
        }
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn load_config(common: &Common) -> CliResult<ExperimentConfig> {
    match &common.config {
        None => Ok(ExperimentConfig::default()),
        Some(path) => ExperimentConfig::load(path)
            .map_err(|e| Failure::Usage(format!("config {}: {e}", path.display()))),
    }
}

fn validated(cfg: ExperimentConfig) -> CliResult<ExperimentConfig> {
    cfg.validate()
        .map_err(|e| Failure::Usage(format!("invalid config: {e}")))?;
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let dir = common
        .out_dir
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    Ok(dir)
}

fn io_failure(path: &Path, source: std::io::Error) -> Failure {
    Failure::Runtime(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

/// Prints the effective config and stores it next to the outputs.
fn dump_config(cfg: &ExperimentConfig, dir: &Path) -> CliResult<()> {
    let json = cfg.to_json();
    eprintln!("effective config:\n{json}");
    write_file(&dir.join("config.json"), &(json + "\n"))
}

fn checkpoint_and_target(checkpoint: &Path, target: &Path) -> CliResult<(ModelCheckpoint, Stream)> {
    Ok((load_checkpoint(checkpoint)?, read_stream(target)?))
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Gen {
            common,
            role,
            seed,
            frames,
            output,
        } => {
            let mut cfg = load_config(&common)?;
            let spec = match role {
                Role::Source => &mut cfg.source,
                Role::Target => &mut cfg.target,
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(n) = frames {
                spec.params.duration_frames = n;
            }
            let (params, seed) = (spec.params.clone(), spec.seed);
            let cfg = validated(cfg)?;
            let dir = out_dir(&common, &cfg)?;
            dump_config(&cfg, &dir)?;
            let name = match role {
                Role::Source => "source.stream",
                Role::Target => "target.stream",
            };
            let path = output.unwrap_or_else(|| dir.join(name));
            let stream = generate_stream(&params, seed)?;
            write_stream(&path, &stream)?;
            println!(
                "wrote {} ({} frames, seed {seed})",
                path.display(),
                stream.data.frames()
            );
        }
        Command::Shift {
            common,
            input,
            seed,
            output,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seed {
                cfg.shift.seed = s;
            }
            let cfg = validated(cfg)?;
            let dir = out_dir(&common, &cfg)?;
            dump_config(&cfg, &dir)?;
            let stream = read_stream(&input)?.shifted(&cfg.shift.shift, cfg.shift.seed)?;
            let path = output.unwrap_or_else(|| dir.join("shifted.stream"));
            write_stream(&path, &stream)?;
            println!("wrote {}", path.display());
        }
        Command::Pretrain {
            common,
            source,
            epochs,
            learning_rate,
            seed,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(e) = epochs {
                cfg.pretrain.epochs = e;
            }
            if let Some(lr) = learning_rate {
                cfg.pretrain.learning_rate = lr;
            }
            if let Some(s) = seed {
                cfg.pretrain.seed = s;
            }
            let cfg = validated(cfg)?;
            let dir = out_dir(&common, &cfg)?;
            dump_config(&cfg, &dir)?;
            let stream = match &source {
                Some(path) => read_stream(path)?,
                None => generate_stream(&cfg.source.params, cfg.source.seed)?,
            };
            let (checkpoint, report) = pretrain(&cfg.pretrain, &cfg.network, &[stream])?;
            let path = dir.join("model.ckpt");
            save_checkpoint(&path, &checkpoint)?;
            write_file(
                &dir.join("pretrain.txt"),
                &format!(
                    "steps = {}\nfirst_mae = {}\nlast_mae = {}\n",
                    report.steps, report.first_mae, report.last_mae
                ),
            )?;
            println!(
                "wrote {} ({} steps, mae {:.3} -> {:.3})",
                path.display(),
                report.steps,
                report.first_mae,
                report.last_mae
            );
        }
        Command::Adapt { common, run, mode } => {
            let mut cfg = load_config(&common)?;
            run.tta.apply(&mut cfg);
            if let Some(m) = mode {
                cfg.tta.mode = m;
            }
            let cfg = validated(cfg)?;
            let dir = out_dir(&common, &cfg)?;
            dump_config(&cfg, &dir)?;
            let (checkpoint, target) = checkpoint_and_target(&run.checkpoint, &run.target)?;
            let result = run_tta(&cfg.tta, &cfg.priors, &cfg.adapter, &checkpoint, &target)?;
            write_timeline(&dir, &result.timeline)?;
            if let Some(state) = &result.state {
                save_checkpoint(
                    &dir.join("adapted.ckpt"),
                    &ModelCheckpoint {
                        config: checkpoint.config.clone(),
                        params: result.params.clone(),
                        note: format!("adapted with {} on {}", cfg.tta.mode, run.target.display()),
                    },
                )?;
                save_state(&dir.join("adapter.state"), state)?;
            }
            print!("{}", summary_text(&result.timeline));
        }
        Command::Ablate { common, run } => {
            let mut cfg = load_config(&common)?;
            run.tta.apply(&mut cfg);
            let cfg = validated(cfg)?;
            let dir = out_dir(&common, &cfg)?;
            dump_config(&cfg, &dir)?;
            let (checkpoint, target) = match (&run.checkpoint, &run.target) {
                (Some(c), Some(t)) => checkpoint_and_target(c, t)?,
                _ => {
                    let streams = build_streams(&cfg)?;
                    let (checkpoint, report) = pretrain(
                        &cfg.pretrain,
                        &cfg.network,
                        std::slice::from_ref(&streams.source),
                    )?;
                    eprintln!(
                        "pretrained {} steps, mae {:.3} -> {:.3}",
                        report.steps, report.first_mae, report.last_mae
                    );
                    save_checkpoint(&dir.join("model.ckpt"), &checkpoint)?;
                    (checkpoint, streams.target)
                }
            };
            let report = ablate(&cfg.tta, &cfg.priors, &cfg.adapter, &checkpoint, &target)?;
            report.write(&dir)?;
            print!("{}", report.table());
        }
        Command::Eval {
            common,
            records,
            checkpoint,
            target,
            mode,
        } => {
            let cfg = validated(load_config(&common)?)?;
            let timeline = match (records, checkpoint, target) {
                (Some(path), _, _) => {
                    let text = fs::read_to_string(&path).map_err(|e| io_failure(&path, e))?;
                    let records = parse_records_csv(&text)?;
                    let mode = match mode {
                        Some(m) => m,
                        None => records_mode(&path, &records)?,
                    };
                    Timeline::from_records(mode, records, cfg.tta.trailing_fraction, 0)?
                }
                (None, Some(c), Some(t)) => {
                    let (checkpoint, target) = checkpoint_and_target(&c, &t)?;
                    let tta = TtaConfig {
                        mode: Mode::NoAdapt,
                        ..cfg.tta.clone()
                    };
                    run_tta(&tta, &cfg.priors, &cfg.adapter, &checkpoint, &target)?.timeline
                }
                _ => {
                    return Err(Failure::Usage(
                        "eval needs --records, or --checkpoint with --target".into(),
                    ))
                }
            };
            print!("{}", summary_text(&timeline));
        }
        Command::Inspect { path } => {
            let mut header = read_header(&path)?;
            // The per-frame HR trace would drown everything else.
            if let Some(trace) = header.get_mut("hr_trace") {
                let n = trace.as_array().map_or(0, Vec::len);
                *trace = Value::String(format!("<{n} values>"));
            }
            println!(
                "{}",
                serde_json::to_string_pretty(&header).expect("header serializes")
            );
        }
    }
    Ok(())
}

/// Records carry no mode column. Falls back to the `summary.txt` written
/// next to them, then to `no-adapt` when no instance was adapted.
fn records_mode(path: &Path, records: &[InstanceRecord]) -> CliResult<Mode> {
    let summary = path.with_file_name("summary.txt");
    if let Ok(text) = fs::read_to_string(summary) {
        if let Some(m) = text
            .lines()
            .find_map(|l| l.strip_prefix("mode = "))
            .and_then(|m| m.parse().ok())
        {
            return Ok(m);
        }
    }
    if records.iter().all(|r| r.branch == "none") {
        return Ok(Mode::NoAdapt);
    }
    Err(Failure::Usage(
        "cannot tell the mode of these records; pass --mode".into(),
    ))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

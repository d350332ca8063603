//! The `frnn` command line: data generation, training, prediction,
//! evaluation, layer-removal analysis and cost accounting.
//!
//! Each subcommand is a plain function over parsed arguments so tests can
//! drive it without spawning a process. [`run`] maps outcomes to exit
//! codes: 0 on success, 2 on usage errors, 1 on runtime errors.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use frnn_core::config::RunConfig;
use frnn_core::data::{gen_sequences, last_frame_baseline, read_seq, write_seq, SequenceBatch};
use frnn_core::folded::{cost_report, frame_at, CallCounts, CostReport, Model};
use frnn_core::metrics::{evaluate, EvalReport};
use frnn_core::training::{load_checkpoint, save_checkpoint, Trainer};
use frnn_core::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] frnn_core::Error),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

pub type CliResult<T> = Result<T, CliError>;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Invalid(msg.into())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Parser)]
#[command(name = "frnn", version, about = "Folded recurrent networks for video prediction")]
pub struct Cli {
    /// `section.key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for training and data generation; overrides the config file and FRNN_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate moving-sprite sequences into a sequence file.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a loss log.
    Train(TrainArgs),
    /// Predict frames for every sequence of a data file.
    Predict(PredictArgs),
    /// Per-step MSE, PSNR and DSSIM of a checkpoint's predictions.
    Evaluate(EvaluateArgs),
    /// Evaluate with the deepest 0..=k recurrent layers removed.
    Ablate(AblateArgs),
    /// Weight, gate-evaluation and state counts of the folded design against a bridged one.
    Cost(CostArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Number of optimisation steps (default: train.steps).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub checkpoint_out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Loss log path (default: checkpoint path with `.loss.txt` appended).
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    #[arg(long)]
    pub g: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args, Clone)]
pub struct EvalSchedule {
    /// Input frames shown to the encoder (default: eval.g).
    #[arg(long)]
    pub g: Option<usize>,
    /// Frames to predict (default: eval.p).
    #[arg(long)]
    pub p: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub schedule: EvalSchedule,
    #[arg(long)]
    pub out: PathBuf,
    /// Write an inputs / targets / predictions PGM grid of one sequence.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Sequence shown in the grid.
    #[arg(long, default_value_t = 0)]
    pub grid_sequence: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub schedule: EvalSchedule,
    /// Also report the last-frame baseline.
    #[arg(long)]
    pub baseline: bool,
    /// Write the table(s) here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub schedule: EvalSchedule,
    #[arg(long)]
    pub max_remove: usize,
    /// Directory for per-k tables and image grids.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long, default_value_t = 10)]
    pub g: u64,
    #[arg(long, default_value_t = 10)]
    pub p: u64,
}

/// Parse `args`, run the command, print to `out`; returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version are not errors and go to stdout.
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return e.exit_code();
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

/// Config file, then `FRNN_SEED`, then `--seed`.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env_seed()?;
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> CliResult<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let text = match &cli.command {
        Command::GenData(a) => cmd_gen_data(&cfg, a)?,
        Command::Train(a) => cmd_train(&cfg, a)?,
        Command::Predict(a) => cmd_predict(&cfg, a)?.summary,
        Command::Evaluate(a) => cmd_evaluate(&cfg, a)?.text,
        Command::Ablate(a) => cmd_ablate(&cfg, a)?.text,
        Command::Cost(a) => format_cost(&cost_report(&cfg.topology, a.g, a.p)?),
    };
    out.write_all(text.as_bytes())
        .map_err(|e| invalid(format!("writing output: {e}")))
}

pub fn cmd_gen_data(cfg: &RunConfig, args: &GenDataArgs) -> CliResult<String> {
    let sprites = cfg.data.sprite_config()?;
    let batch = gen_sequences(&sprites, args.count)?;
    write_seq(&args.out, &batch)?;
    Ok(format!(
        "wrote {} sequences of shape {:?} to {}\n",
        batch.len(),
        batch.shape(),
        args.out.display()
    ))
}

pub fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> CliResult<String> {
    let mut train = cfg.train.clone();
    train.g = args.g.unwrap_or(train.g);
    train.p = args.p.unwrap_or(train.p);
    train.batch_size = args.batch_size.unwrap_or(train.batch_size);
    train.learning_rate = args.learning_rate.unwrap_or(train.learning_rate);
    train.steps = args.steps.unwrap_or(train.steps);
    let data = read_seq(&args.data)?;
    if data.frames() < train.g + train.p {
        return Err(invalid(format!(
            "sequences have {} frames but g + p = {}",
            data.frames(),
            train.g + train.p
        )));
    }
    let mut trainer = match &args.resume {
        Some(path) => Trainer::resume(load_checkpoint(path)?, train.clone())?,
        None => Trainer::new(&cfg.topology, train.clone())?,
    };
    let mut log = String::from("# step loss\n");
    trainer.train(&data, train.steps, |step, loss| {
        let _ = writeln!(log, "{step} {loss:.9e}");
    })?;
    save_checkpoint(&args.checkpoint_out, &trainer.checkpoint())?;
    let log_path = args.loss_log.clone().unwrap_or_else(|| {
        let mut p = args.checkpoint_out.clone().into_os_string();
        p.push(".loss.txt");
        p.into()
    });
    write_file(&log_path, &log)?;
    Ok(format!(
        "trained to step {} ({} steps this run); checkpoint {}, loss log {}\n",
        trainer.step,
        train.steps,
        args.checkpoint_out.display(),
        log_path.display()
    ))
}

/// Evaluation windows: frames `0..g` are inputs, `g..g + p` targets.
pub struct EvalData {
    pub inputs: Tensor<f32>,
    pub targets: Tensor<f32>,
}

pub fn eval_data(data: &SequenceBatch, g: usize, p: usize) -> CliResult<EvalData> {
    if g == 0 || p == 0 {
        return Err(invalid("g and p must be at least 1"));
    }
    if data.frames() < g + p {
        return Err(invalid(format!(
            "sequences have {} frames but g + p = {}",
            data.frames(),
            g + p
        )));
    }
    Ok(EvalData {
        inputs: data.time_slice(0, g)?,
        targets: data.time_slice(g, p)?,
    })
}

fn schedule(cfg: &RunConfig, s: &EvalSchedule) -> (usize, usize) {
    (s.g.unwrap_or(cfg.eval.g), s.p.unwrap_or(cfg.eval.p))
}

fn check_topology(model: &Model, data: &SequenceBatch) -> CliResult<()> {
    let img = model.spec.image;
    if data.shape()[2..] != [img.channels, img.height, img.width] {
        return Err(invalid(format!(
            "data frames {:?} do not match the checkpoint's {img} topology",
            &data.shape()[2..]
        )));
    }
    Ok(())
}

pub struct Prediction {
    pub frames: Tensor<f32>,
    pub calls: CallCounts,
    pub summary: String,
}

pub fn cmd_predict(cfg: &RunConfig, args: &PredictArgs) -> CliResult<Prediction> {
    let (g, p) = schedule(cfg, &args.schedule);
    let model = load_checkpoint(&args.checkpoint)?.model;
    let data = read_seq(&args.data)?;
    check_topology(&model, &data)?;
    let ev = eval_data(&data, g, p)?;
    let (frames, calls) = model.predict(&ev.inputs, p)?;
    write_seq(&args.out, &SequenceBatch::new(frames.clone())?)?;
    let mut summary = format!(
        "predicted {:?} to {}; encoder top-layer calls {} (g = {g}), post-transform calls {}\n",
        frames.shape(),
        args.out.display(),
        calls.encoder_top,
        calls.post_transform
    );
    if let Some(path) = &args.grid {
        let grid = pgm_grid(&ev.inputs, &ev.targets, &frames, args.grid_sequence)?;
        write_file(path, &grid)?;
        let _ = writeln!(summary, "image grid {}", path.display());
    }
    Ok(Prediction {
        frames,
        calls,
        summary,
    })
}

pub struct Evaluation {
    pub model: EvalReport,
    pub baseline: Option<EvalReport>,
    pub text: String,
}

pub fn cmd_evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> CliResult<Evaluation> {
    let (g, p) = schedule(cfg, &args.schedule);
    let model = load_checkpoint(&args.checkpoint)?.model;
    let data = read_seq(&args.data)?;
    check_topology(&model, &data)?;
    let ev = eval_data(&data, g, p)?;
    let (preds, _) = model.predict(&ev.inputs, p)?;
    let report = evaluate(&preds, &ev.targets)?;
    let mut text = format!("## model\n{}", report.to_table());
    let baseline = if args.baseline {
        let b = evaluate(&last_frame_baseline(&ev.inputs, p)?, &ev.targets)?;
        let _ = write!(text, "## last-frame baseline\n{}", b.to_table());
        Some(b)
    } else {
        None
    };
    if let Some(path) = &args.out {
        write_file(path, &text)?;
    }
    Ok(Evaluation {
        model: report,
        baseline,
        text,
    })
}

/// Result for one number of removed layers.
pub struct AblationStep {
    pub removed: usize,
    pub predictions: Tensor<f32>,
    pub report: EvalReport,
}

pub struct Ablation {
    pub steps: Vec<AblationStep>,
    pub text: String,
}

pub fn cmd_ablate(cfg: &RunConfig, args: &AblateArgs) -> CliResult<Ablation> {
    let (g, p) = schedule(cfg, &args.schedule);
    let model = load_checkpoint(&args.checkpoint)?.model;
    let n = model.num_layers();
    if args.max_remove > n {
        return Err(invalid(format!(
            "--max-remove {} exceeds the {n} recurrent layers",
            args.max_remove
        )));
    }
    let data = read_seq(&args.data)?;
    check_topology(&model, &data)?;
    let ev = eval_data(&data, g, p)?;
    if let Some(dir) = &args.out_dir {
        fs::create_dir_all(dir).map_err(|source| CliError::File {
            path: dir.clone(),
            source,
        })?;
    }
    let mut steps = Vec::new();
    let mut text = String::new();
    for k in 0..=args.max_remove {
        let cut = model.truncate(k)?;
        let (preds, _) = cut.predict(&ev.inputs, p)?;
        let report = evaluate(&preds, &ev.targets)?;
        let table = report.to_table();
        let _ = write!(text, "## removed {k} of {n} layers\n{table}");
        if let Some(dir) = &args.out_dir {
            write_file(&dir.join(format!("ablate_k{k}.txt")), &table)?;
            let grid = pgm_grid(&ev.inputs, &ev.targets, &preds, 0)?;
            write_file(&dir.join(format!("ablate_k{k}.pgm")), &grid)?;
        }
        steps.push(AblationStep {
            removed: k,
            predictions: preds,
            report,
        });
    }
    Ok(Ablation { steps, text })
}

pub fn format_cost(r: &CostReport) -> String {
    let mut s = String::from("# layer d_in d_out k^2 positions shared bridged ratio\n");
    for (i, c) in r.layers.iter().enumerate() {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {:.3}",
            i + 1,
            c.d_in,
            c.d_out,
            c.kernel_area,
            c.positions,
            c.shared_weights,
            c.bridged_weights,
            c.bridged_weights as f64 / c.shared_weights as f64
        );
    }
    let _ = writeln!(s, "# quantity folded bridged ratio (g = {}, p = {})", r.g, r.p);
    let mut row = |name: &str, a: u64, b: u64| {
        let _ = writeln!(s, "{name} {a} {b} {:.3}", b as f64 / a as f64);
    };
    row("weights", r.folded_weights, r.bridged_weights);
    row("gate_evaluations", r.folded_gate_evals, r.bridged_gate_evals);
    row("peak_live_states", r.folded_peak_states, r.bridged_peak_states);
    row("weighted_macs", r.folded_macs, r.bridged_macs);
    s
}

/// Binary PGM with three rows of frames (inputs, targets, predictions) for
/// one sequence, `max(g, p)` columns, channel 0 only. Unused cells are black.
pub fn pgm_grid(
    inputs: &Tensor<f32>,
    targets: &Tensor<f32>,
    preds: &Tensor<f32>,
    sequence: usize,
) -> CliResult<Vec<u8>> {
    let s = inputs.shape();
    let (h, w) = (s[3], s[4]);
    if sequence >= s[0] {
        return Err(invalid(format!("grid sequence {sequence} out of range for {} sequences", s[0])));
    }
    let rows = [inputs, targets, preds];
    let cols = rows.iter().map(|t| t.shape()[1]).max().unwrap_or(1);
    let (width, height) = (cols * w, 3 * h);
    let mut pixels = vec![0u8; width * height];
    for (r, t) in rows.iter().enumerate() {
        for c in 0..t.shape()[1] {
            let frame = frame_at(&t.index_outer(sequence)?.reshape(&[1, t.shape()[1], s[2], h, w])?, c)?;
            for y in 0..h {
                for x in 0..w {
                    let v = frame.data()[y * w + x].clamp(0.0, 1.0);
                    pixels[(r * h + y) * width + c * w + x] = (v * 255.0).round() as u8;
                }
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

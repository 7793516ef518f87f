//! The `ddrn` command line: training, evaluation, gradient checks, codebook
//! inspection and synthetic data export.
//!
//! Reports go to stdout and diagnostics to stderr. Exit codes are 0 for
//! success, 1 for usage errors and 2 for runtime failures.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ddrn_core::checkpoint;
use ddrn_core::checks::{broken_backward, registry};
use ddrn_core::config::RunConfig;
use ddrn_core::embedding::cosine_histogram;
use ddrn_core::trainer::{evaluate_split, run_dataset, train, train_split_views, Sample, TrainState};
use ddrn_core::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Parser)]
#[command(
    name = "ddrn",
    version,
    about = "Discrete embedding-space reconstruction network for occluded re-identification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on the synthetic benchmark and write checkpoint, metric log and resolved config.
    Train(TrainArgs),
    /// Evaluate a checkpoint with single-query CMC and mAP.
    Eval(EvalArgs),
    /// Finite-difference gradient checks over every registered op and loss.
    Gradcheck(GradcheckArgs),
    /// Histogram and summary of the codebook's pairwise cosines.
    InspectCodebook(InspectArgs),
    /// Render the synthetic dataset to PPM images plus an index.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct Overrides {
    /// Master seed, replacing the config's.
    #[arg(long)]
    seed: Option<u64>,
    /// Switches, e.g. embedding_space=on,orthogonal_loss=off,hs_arcface=on.
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Test,
    Train,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Text,
    Kv,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset settings; defaults to the config stored in the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Adds a check with a deliberately wrong backward pass.
    #[arg(long, hide = true)]
    inject_broken: bool,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 20)]
    bins: usize,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

/// Parses `args` (program name first) and runs the command, writing reports
/// to `out` and diagnostics to `err`.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => run_train(a, out, err),
        Command::Eval(a) => run_eval(a, out),
        Command::Gradcheck(a) => run_gradcheck(a, out),
        Command::InspectCodebook(a) => run_inspect(a, out),
        Command::Synth(a) => run_synth(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn read_config(path: &Path, o: &Overrides) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(a) = &o.ablation {
        cfg.apply_ablation(a)?;
    }
    Ok(cfg)
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn run_train(a: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let cfg = read_config(&a.config, &a.overrides)?;
    let mut state = match &a.checkpoint {
        Some(path) => {
            let (saved, state) = checkpoint::load(path)?;
            if saved.model != cfg.model {
                return Err(Error::Checkpoint(format!(
                    "{} was trained with a different model configuration",
                    path.display()
                )));
            }
            state
        }
        None => TrainState::init(&cfg)?,
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let config_path = a.out.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_text()).map_err(|e| Error::io(&config_path, e))?;
    let metrics_path = a.out.join(METRICS_FILE);
    let mut metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.checkpoint.is_some())
        .truncate(a.checkpoint.is_none())
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let data = run_dataset(&cfg)?;
    let _ = writeln!(err, "training from step {} on {} images", state.step(), data.train.len());
    train(&cfg, &data, &mut state, |entry, st| {
        writeln!(metrics, "{entry}").map_err(|e| Error::io(&metrics_path, e))?;
        writeln!(out, "{entry}").map_err(stdout_err)?;
        checkpoint::save(&ckpt_path, &cfg, st)
    })?;
    // an already finished run still leaves a checkpoint behind
    checkpoint::save(&ckpt_path, &cfg, &state)?;
    Ok(EXIT_OK)
}

fn run_eval(a: EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let (saved, state) = checkpoint::load(&a.checkpoint)?;
    let cfg = match &a.config {
        Some(path) => {
            let cfg = read_config(path, &a.overrides)?;
            if cfg.model != saved.model {
                return Err(Error::Checkpoint(format!(
                    "{} does not match the model configuration in {}",
                    path.display(),
                    a.checkpoint.display()
                )));
            }
            cfg
        }
        None => {
            let mut cfg = saved;
            if let Some(s) = a.overrides.seed {
                cfg.seed = s;
            }
            if let Some(ab) = &a.overrides.ablation {
                cfg.apply_ablation(ab)?;
            }
            cfg
        }
    };
    let data = run_dataset(&cfg)?;
    let (query, gallery): (Vec<Sample>, Vec<Sample>) = match a.split {
        Split::Test => (data.query, data.gallery),
        Split::Train => train_split_views(&data),
    };
    let eval = evaluate_split(&state.model, &query, &gallery, cfg.train.ablation.embedding_space)?;
    let report = match a.format {
        Format::Text => eval.report(),
        Format::Kv => eval.report_kv(),
    };
    out.write_all(report.as_bytes()).map_err(stdout_err)?;
    Ok(EXIT_OK)
}

fn run_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let mut checks = registry();
    if a.inject_broken {
        checks.push(broken_backward());
        checks.sort_by_key(|c| c.name);
    }
    let mut failed = 0;
    writeln!(out, "op\tmax_rel_error\ttol\tresult").map_err(stdout_err)?;
    for c in &checks {
        let (err, ok) = match c.run() {
            Ok(r) => (format!("{:.3e}", r.max_rel_error), r.passed),
            Err(e) => (format!("error: {e}"), false),
        };
        failed += usize::from(!ok);
        writeln!(out, "{}\t{err}\t{:.0e}\t{}", c.name, c.tol, if ok { "pass" } else { "FAIL" }).map_err(stdout_err)?;
    }
    Ok(if failed == 0 { EXIT_OK } else { EXIT_RUNTIME })
}

fn run_inspect(a: InspectArgs, out: &mut dyn Write) -> Result<i32> {
    let (_, state) = checkpoint::load(&a.checkpoint)?;
    let h = cosine_histogram(state.model.codebook(), a.bins)?;
    let text = format!("{}max_abs_cos {:.6}\nmean_abs_cos {:.6}\n", h.to_text(), h.max_abs, h.mean_abs);
    out.write_all(text.as_bytes()).map_err(stdout_err)?;
    Ok(EXIT_OK)
}

fn write_ppm(path: &Path, s: &Sample) -> Result<()> {
    let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
    let px = s.image.data();
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        for c in 0..3 {
            bytes.push((px[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn run_synth(a: SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let overrides = Overrides { seed: a.seed, ablation: None };
    let cfg = match &a.config {
        Some(p) => read_config(p, &overrides)?,
        None => RunConfig { seed: a.seed.unwrap_or_default(), ..RunConfig::default() },
    };
    let data = run_dataset(&cfg)?;
    let index_path = a.out.join("index.tsv");
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut index = File::create(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut line = |l: String| writeln!(index, "{l}").map_err(|e| Error::io(&index_path, e));
    line("file\tid\tcamera\toccluded_fraction".into())?;
    for (split, samples) in [("train", &data.train), ("query", &data.query), ("gallery", &data.gallery)] {
        let dir = a.out.join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, s) in samples.iter().enumerate() {
            let name = format!("{split}/{i:05}.ppm");
            write_ppm(&a.out.join(&name), s)?;
            line(format!("{name}\t{}\t{}\t{:.6}", s.id, s.camera, s.occluded_fraction))?;
        }
    }
    writeln!(out, "train {}\nquery {}\ngallery {}", data.train.len(), data.query.len(), data.gallery.len())
        .map_err(stdout_err)?;
    Ok(EXIT_OK)
}

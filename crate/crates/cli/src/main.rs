use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use kdlab::config::ExperimentConfig;
use kdlab::derivation::{derivation_check, DerivationOptions};
use kdlab::experiment::{
    aggregate, axis_needs_teacher, prepare_data, run_student, run_sweep, series_text, train_teacher,
    write_rows_csv, write_summary_csv, RunSpec, SweepAxis,
};
use kdlab::metrics::RunReport;
use kdlab::{Error, Method, Mlp};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_ACCEPTANCE: u8 = 5;
const EXIT_INTERNAL: u8 = 1;

#[derive(Parser)]
#[command(name = "kdlab", version, about = "Knowledge distillation experiments on small MLPs")]
struct Cli {
    /// Directory under which run artifacts are written.
    #[arg(long, global = true, env = "KDLAB_OUTPUT_ROOT")]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher with plain cross-entropy and save its checkpoint.
    TrainTeacher {
        config: PathBuf,
    },
    /// Train one student against a saved teacher.
    Distill(DistillArgs),
    /// Run a grid of students along one axis and aggregate medians.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        axis: SweepAxis,
        /// Teacher checkpoint; defaults to the config's or the one from train-teacher.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Compare the exact KD gradient with its high-temperature approximation.
    CheckDerivation {
        #[arg(long, value_delimiter = ',', default_values_t = [4.0, 20.0, 100.0, 500.0])]
        taus: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Constant added to every logit; nonzero values break the zero-mean assumption.
        #[arg(long, default_value_t = 0.0)]
        mean_shift: f64,
        /// Write report.json and report.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DistillArgs {
    config: PathBuf,
    #[arg(long)]
    method: Method,
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Overrides `dataset.few_shot_fraction`.
    #[arg(long)]
    few_shot: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => EXIT_CONFIG,
        Some(Error::Parse { .. } | Error::Data(_) | Error::Io { .. } | Error::Csv(_) | Error::Json(_)) => {
            EXIT_DATA
        }
        Some(Error::Shape { .. } | Error::Index(_)) => EXIT_DATA,
        Some(Error::NonFinite { .. } | Error::Domain(_)) => EXIT_NUMERIC,
        Some(Error::Contract(_)) | None => EXIT_INTERNAL,
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    let root = cli.output_root;
    match cli.command {
        Command::TrainTeacher { config } => cmd_train_teacher(&config, root),
        Command::Distill(args) => cmd_distill(args, root),
        Command::Sweep { config, axis, teacher } => cmd_sweep(&config, axis, teacher, root),
        Command::CheckDerivation {
            taus,
            seed,
            pairs,
            classes,
            mean_shift,
            out,
        } => cmd_check_derivation(
            DerivationOptions {
                seed,
                taus,
                pairs,
                classes,
                mean_shift,
                ..Default::default()
            },
            out,
        ),
    }
}

fn experiment_dir(cfg: &ExperimentConfig, root: Option<PathBuf>) -> PathBuf {
    let root = root
        .or_else(|| cfg.output_dir.as_ref().map(|p| cfg.resolve(p)))
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(&cfg.name)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

/// Timestamps live only here so that every other artifact is reproducible.
fn write_sidecar(dir: &Path, command: &str) -> anyhow::Result<()> {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let text = format!("finished_unix={secs}\ncommand={command}\nversion={}\n", env!("CARGO_PKG_VERSION"));
    let path = dir.join("run.log");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn save_run(dir: &Path, checkpoint: &str, net: &Mlp, report: &RunReport, command: &str) -> anyhow::Result<()> {
    create_dir(dir)?;
    net.save(dir.join(checkpoint))?;
    report.write_jsonl(dir.join("report.jsonl"))?;
    report.write_json(dir.join("report.json"))?;
    write_sidecar(dir, command)
}

fn cmd_train_teacher(config: &Path, root: Option<PathBuf>) -> anyhow::Result<u8> {
    let cfg = ExperimentConfig::load(config)?;
    let data = prepare_data(&cfg)?;
    let (teacher, report) = train_teacher(&cfg, &data)?;
    let dir = experiment_dir(&cfg, root).join("teacher");
    save_run(&dir, "teacher.json", &teacher, &report, "train-teacher")?;
    println!(
        "teacher {:?}: final test accuracy {:.4} ({} epochs)",
        cfg.teacher.widths,
        report.summary.final_test_accuracy,
        report.epochs.len()
    );
    println!("checkpoint {}", dir.join("teacher.json").display());
    Ok(0)
}

/// `--teacher`, then `teacher.checkpoint`, then the output of `train-teacher`.
fn load_teacher(cfg: &ExperimentConfig, explicit: Option<PathBuf>, exp_dir: &Path) -> anyhow::Result<Mlp> {
    let path = explicit
        .or_else(|| cfg.teacher.checkpoint.as_ref().map(|p| cfg.resolve(p)))
        .unwrap_or_else(|| exp_dir.join("teacher").join("teacher.json"));
    if !path.exists() {
        return Err(Error::Config(format!(
            "teacher checkpoint {} not found; run train-teacher first or pass --teacher",
            path.display()
        ))
        .into());
    }
    Mlp::load(&path).with_context(|| format!("loading teacher {}", path.display()))
}

fn cmd_distill(args: DistillArgs, root: Option<PathBuf>) -> anyhow::Result<u8> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if args.method == Method::Vanilla {
        return Err(Error::Config("distill takes --method kd, l2rkd or noisekd".into()).into());
    }
    if let Some(f) = args.few_shot {
        cfg.dataset.few_shot_fraction = f;
    }
    let mut run = RunSpec::new(args.method, args.seed.unwrap_or(cfg.train.seed));
    run.few_shot_fraction = cfg.dataset.few_shot_fraction;
    run.r = args.r;
    run.noise_sigma = args.noise_sigma;
    cfg.validate()?;
    run.train_config(&cfg.train).validate()?;

    let exp_dir = experiment_dir(&cfg, root);
    let teacher = load_teacher(&cfg, args.teacher, &exp_dir)?;
    let data = prepare_data(&cfg)?;
    let (student, report) = run_student(&cfg, &data, Some(&teacher), &run)?;
    let dir = exp_dir.join(format!("{}-seed{}", args.method, run.seed));
    save_run(&dir, "student.json", &student, &report, "distill")?;
    print!(
        "{} seed {}: final test accuracy {:.4}",
        args.method, run.seed, report.summary.final_test_accuracy
    );
    if let Some(d) = report.summary.final_st_dif {
        print!(", S-T DIF {d:.4}");
    }
    println!();
    println!("checkpoint {}", dir.join("student.json").display());
    Ok(0)
}

fn cmd_sweep(config: &Path, axis: SweepAxis, teacher: Option<PathBuf>, root: Option<PathBuf>) -> anyhow::Result<u8> {
    let cfg = ExperimentConfig::load(config)?;
    let exp_dir = experiment_dir(&cfg, root);
    let teacher = if axis_needs_teacher(&cfg, axis)? {
        Some(load_teacher(&cfg, teacher, &exp_dir)?)
    } else {
        None
    };
    let data = prepare_data(&cfg)?;
    let rows = run_sweep(&cfg, &data, teacher.as_ref(), axis)?;
    let cells = aggregate(&rows);

    let dir = exp_dir.join(format!("sweep-{}", axis.name()));
    create_dir(&dir)?;
    write_rows_csv(&rows, dir.join("rows.csv"))?;
    write_summary_csv(axis, &cells, dir.join("summary.csv"))?;
    let series = dir.join("series.dat");
    std::fs::write(&series, series_text(axis, &cells)).map_err(|e| Error::io(&series, e))?;
    write_sidecar(&dir, &format!("sweep --axis {}", axis.name()))?;

    println!("{:<10} {:<8} {:>5} {:>10} {:>10}", axis.name(), "method", "runs", "accuracy", "st_dif");
    for c in &cells {
        let value = c.value.map_or("-".to_string(), |v| v.to_string());
        let dif = c.median_st_dif.map_or("-".to_string(), |d| format!("{d:.4}"));
        println!(
            "{:<10} {:<8} {:>5} {:>10.4} {:>10}",
            value,
            c.method.to_string(),
            c.runs,
            c.median_test_accuracy,
            dif
        );
    }
    println!("{} rows written to {}", rows.len(), dir.display());
    Ok(0)
}

fn cmd_check_derivation(opts: DerivationOptions, out: Option<PathBuf>) -> anyhow::Result<u8> {
    let report = derivation_check(&opts)?;
    println!("{:>12} {:>14} {:>14}", "tau", "taylor_err", "mse_err");
    for row in &report.rows {
        println!(
            "{:>12} {:>14.6e} {:>14.6e}",
            row.tau, row.median_rel_err_taylor, row.median_rel_err_mse
        );
    }
    if report.zero_mean_violated {
        println!(
            "note: logits are not zero-mean (max |row mean| {:.3}); the approximation's assumption does not hold",
            report.max_abs_logit_mean
        );
    }
    if let Some(dir) = &out {
        create_dir(dir)?;
        report.write_json(dir.join("report.json"))?;
        report.write_csv(dir.join("report.csv"))?;
    }
    if report.passed() || report.zero_mean_violated {
        println!("derivation check passed");
        Ok(0)
    } else {
        eprintln!("derivation check failed at tau {:?}", report.violations);
        Ok(EXIT_ACCEPTANCE)
    }
}

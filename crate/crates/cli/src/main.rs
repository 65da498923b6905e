//! Command-line front end: generate a benchmark, train, evaluate, report.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use owdfa::data::{generate, load_dataset, save_dataset, BenchmarkSpec, Protocol};
use owdfa::harness::{evaluate, run, Ablation, RunReport, StageConfig, StageRow, StageSelection};
use owdfa::model::load_checkpoint;
use owdfa::Error;

#[derive(Parser)]
#[command(name = "owdfa", version, about = "Open-world forgery attribution on a synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic benchmark to a directory.
    Generate(GenerateArgs),
    /// Run training stages and write checkpoints plus a report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Print the metric table of one or more finished runs.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    P1,
    P2,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    known: usize,
    #[arg(long, default_value_t = 4)]
    novel: usize,
    #[arg(long, default_value_t = 200)]
    labeled_per_known: usize,
    #[arg(long, default_value_t = 600)]
    unlabeled_per_class: usize,
    #[arg(long, default_value_t = 200)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, value_enum, default_value = "p1")]
    protocol: ProtocolArg,
    /// Protocol 2: add a known real class.
    #[arg(long)]
    real_known: bool,
    /// Protocol 2: add a novel real class.
    #[arg(long)]
    real_novel: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// 1, 2, 3 or all.
    #[arg(long, default_value = "all")]
    stage: String,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// ce, gr, glv, gr+csp, glv+csp or glv+hard.
    #[arg(long)]
    ablation: Option<String>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories; rows are prefixed by directory name when several are given.
    #[arg(long = "run", required = true)]
    runs: Vec<PathBuf>,
    /// Print CSV instead of the text table.
    #[arg(long)]
    csv: bool,
}

fn read_text(path: &Path) -> owdfa::Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        context: format!("reading {}", path.display()),
        source,
    })
}

fn cmd_generate(a: GenerateArgs) -> owdfa::Result<()> {
    let spec = BenchmarkSpec {
        n_known: a.known,
        n_novel: a.novel,
        labeled_per_known: a.labeled_per_known,
        unlabeled_per_class: a.unlabeled_per_class,
        test_per_class: a.test_per_class,
        noise_sigma: a.noise,
        protocol: match a.protocol {
            ProtocolArg::P1 => Protocol::P1,
            ProtocolArg::P2 => Protocol::P2,
        },
        real_known: a.real_known,
        real_novel: a.real_novel,
        seed: a.seed,
        ..BenchmarkSpec::default()
    };
    let ds = generate(&spec)?;
    save_dataset(&a.out, &ds)?;
    println!(
        "wrote {} classes ({} labeled, {} unlabeled, {} test) to {}",
        ds.num_classes(),
        ds.labeled.len(),
        ds.unlabeled.len(),
        ds.test.len(),
        a.out.display()
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> owdfa::Result<StageConfig> {
    let mut cfg = match &a.config {
        Some(p) => StageConfig::parse(&read_text(p)?)?,
        None => StageConfig::default(),
    };
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(ab) = &a.ablation {
        cfg = cfg.with_ablation(ab.parse::<Ablation>()?);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> owdfa::Result<()> {
    let cfg = train_config(&a)?;
    let stages: StageSelection = a.stage.parse()?;
    let ds = load_dataset(&a.data)?;
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    fs::create_dir_all(&a.out).map_err(|source| Error::Io {
        context: format!("creating {}", a.out.display()),
        source,
    })?;
    let t = Instant::now();
    let report = run(&ds, &cfg, stages, resume, Some(&a.out))?;
    let secs = t.elapsed().as_secs_f64();
    report.write(&a.out)?;
    let timing = a.out.join("timing.txt");
    fs::write(&timing, format!("wall_seconds = {secs:.3}\n")).map_err(|source| Error::Io {
        context: format!("writing {}", timing.display()),
        source,
    })?;
    print!("{}", RunReport::table(&report.rows));
    println!("finished in {secs:.1}s; outputs in {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> owdfa::Result<()> {
    let ds = load_dataset(&a.data)?;
    let ck = load_checkpoint(&a.ckpt)?;
    if ck.model.config().num_classes != ds.num_classes() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint has {} class heads, dataset has {} classes",
            ck.model.config().num_classes,
            ds.num_classes()
        )));
    }
    let eval = evaluate(&ck.model, &ds)?;
    print!("{}", RunReport::table(&[StageRow::new(&ck.stage.to_string(), eval)]));
    Ok(())
}

fn cmd_report(a: ReportArgs) -> owdfa::Result<()> {
    let prefix = a.runs.len() > 1;
    let mut rows = Vec::new();
    for dir in &a.runs {
        let path = dir.join("report.csv");
        let mut run_rows = RunReport::rows_from_csv(&path, &read_text(&path)?)?;
        if prefix {
            let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
            for r in &mut run_rows {
                r.name = format!("{name}/{}", r.name);
            }
        }
        rows.extend(run_rows);
    }
    if a.csv {
        print!("{}", RunReport::rows_to_csv(&rows));
    } else {
        print!("{}", RunReport::table(&rows));
    }
    Ok(())
}

/// Distinct exit codes per failure class.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => 3,
        Error::Config(_) => 4,
        Error::IncompatibleCheckpoint(_) => 5,
        Error::BadMagic { .. }
        | Error::VersionMismatch { .. }
        | Error::Truncated { .. }
        | Error::Checksum { .. }
        | Error::Format { .. } => 6,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

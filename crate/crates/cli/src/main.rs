//! Command-line driver: one subcommand per study.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gravalloc::process::ProcessKind;
use gravalloc::study::{self, StudyConfig, StudyKind};
use gravalloc::Error;

#[derive(Parser, Debug)]
#[command(name = "gravalloc", version = gravalloc::report::VERSION, about = "Gravitational allocation studies on the sphere")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Capture frequency of every source over uniform starts.
    Allocate(StudyArgs),
    /// Flow-duration distribution against the exponential law.
    Tau(StudyArgs),
    /// Mean travel distance against the mean force over 2π.
    Identity(StudyArgs),
    /// Allocation distance scaling across sizes.
    Distance(StudyArgs),
    /// Counts of local maxima of the potential across sizes.
    Maxima(StudyArgs),
    /// Optimal, greedy, online and coupling matchings.
    Matching(StudyArgs),
    /// Force at a point for Gaussian polynomial roots.
    #[command(name = "kostlan-force")]
    KostlanForce(StudyArgs),
    /// Allocation distance for Gaussian polynomial roots.
    #[command(name = "kostlan-distance")]
    KostlanDistance(StudyArgs),
    /// Optimal matching of uniform points in a square.
    #[command(name = "square-baseline")]
    SquareBaseline(StudyArgs),
    /// Basin image of one configuration.
    Raster(StudyArgs),
    /// Force of a single uniform source at the chart origin.
    #[command(name = "single-source")]
    SingleSource(StudyArgs),
    /// Runs the study named in the configuration file.
    Run(StudyArgs),
}

#[derive(Args, Debug, Default)]
struct StudyArgs {
    /// JSON study configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    /// Comma-separated sizes for sweeping studies.
    #[arg(long, value_delimiter = ',')]
    ns: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    /// `uniform` or `kostlan`.
    #[arg(long)]
    process: Option<ProcessKind>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// JSON report path; the report goes to standard output otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV path for the per-sample records.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// PPM path of a raster study.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Worker threads; `GRAVALLOC_THREADS` takes precedence.
    #[arg(long)]
    threads: Option<usize>,
}

impl Command {
    fn split(self) -> (Option<StudyKind>, StudyArgs) {
        use Command::*;
        match self {
            Allocate(a) => (Some(StudyKind::Allocate), a),
            Tau(a) => (Some(StudyKind::Tau), a),
            Identity(a) => (Some(StudyKind::Identity), a),
            Distance(a) => (Some(StudyKind::Distance), a),
            Maxima(a) => (Some(StudyKind::Maxima), a),
            Matching(a) => (Some(StudyKind::Matching), a),
            KostlanForce(a) => (Some(StudyKind::KostlanForce), a),
            KostlanDistance(a) => (Some(StudyKind::KostlanDistance), a),
            SquareBaseline(a) => (Some(StudyKind::SquareBaseline), a),
            Raster(a) => (Some(StudyKind::Raster), a),
            SingleSource(a) => (Some(StudyKind::SingleSource), a),
            Run(a) => (None, a),
        }
    }
}

fn build_config(kind: Option<StudyKind>, args: &StudyArgs) -> Result<StudyConfig, Error> {
    let mut c = match (&args.config, kind) {
        (Some(path), _) => StudyConfig::read(path)?,
        (None, Some(k)) => StudyConfig::new(k),
        (None, None) => return Err(Error::ConfigInvalid("run needs --config".into())),
    };
    if let Some(k) = kind {
        if c.study != k {
            return Err(Error::ConfigInvalid(format!(
                "configuration is for study '{}', not '{}'",
                c.study.name(),
                k.name()
            )));
        }
    }
    if args.n.is_some() {
        c.n = args.n;
        c.ns = None;
    }
    if args.ns.is_some() {
        c.ns = args.ns.clone();
        c.n = None;
    }
    if let Some(s) = args.seed {
        c.seed = s;
    }
    c.samples = args.samples.or(c.samples);
    c.trials = args.trials.or(c.trials);
    c.process = args.process.or(c.process);
    c.width = args.width.or(c.width);
    c.height = args.height.or(c.height);
    if args.out.is_some() {
        c.output.report = args.out.clone();
    }
    if args.csv.is_some() {
        c.output.csv = args.csv.clone();
    }
    if args.image.is_some() {
        c.output.image = args.image.clone();
        c.output.sidecar = None;
    }
    c.resolve()
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Error> {
    match std::env::var("GRAVALLOC_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&t| t > 0)
            .map(Some)
            .ok_or_else(|| Error::ConfigInvalid(format!("GRAVALLOC_THREADS must be a positive integer, got '{v}'"))),
        Err(_) => match flag {
            Some(0) => Err(Error::ConfigInvalid("--threads must be positive".into())),
            other => Ok(other),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = cli.command.split();
    let config = match build_config(kind, &args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match thread_count(args.threads) {
        Ok(Some(t)) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
                eprintln!("error: cannot start thread pool: {e}");
                return ExitCode::from(1);
            }
        }
        Ok(None) => {}
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let report = match study::run(&config) {
        Ok(r) => r,
        Err(e @ Error::ConfigInvalid(_)) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if config.output.report.is_none() {
        match report.to_json() {
            Ok(s) => println!("{s}"),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        }
    }
    if report.succeeded() {
        ExitCode::SUCCESS
    } else {
        for n in &report.notes {
            eprintln!("{n}");
        }
        ExitCode::from(1)
    }
}

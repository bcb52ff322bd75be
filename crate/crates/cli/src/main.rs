//! `comptom`: phantoms, forward/adjoint/normal operators, reconstruction,
//! visibility maps, the symbol-order probe and the numerical self-test.
//!
//! Exit codes: 0 success, 1 I/O or file-format error, 2 configuration error,
//! 3 numerical failure (self-test, solver divergence).

use clap::{Parser, Subcommand, ValueEnum};
use comptom_core::harness::{HarnessError, SelftestReport};
use comptom_core::microlocal::VisibilityOptions;
use comptom_core::reconstruct::relative_error;
use comptom_core::{
    adjoint, apply_normal, forward, make_phantom, run_selftest, solve, visibility_map, ArrayFile, ExperimentConfig,
    Preconditioner, ProbeExperiment, ReconstructError,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "comptom", version, about = "Weighted cone transform experiments")]
struct Cli {
    /// Experiment configuration (TOML); the shipped default is used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precond {
    None,
    Riesz,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeDetector {
    Sphere,
    Disk,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize the configured phantom.
    Phantom {
        #[arg(long)]
        out: PathBuf,
    },
    /// Cone data of a volume.
    Forward {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Backprojection of cone data.
    Adjoint {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normal operator applied to a volume.
    Normal {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Iterative reconstruction from cone data.
    Reconstruct {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, value_enum)]
        precond: Option<Precond>,
        /// Volume of weights in [0, 1] for the masked error column.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Ground-truth volume; adds error columns to the log.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Iteration log (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Per-voxel fraction of visible directions.
    Visibility {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        n_dir: usize,
    },
    /// Rayleigh-quotient decay of the normal operator along a frequency ladder.
    ProbeOrder {
        #[arg(long, value_enum, default_value_t = ProbeDetector::Sphere)]
        detector: ProbeDetector,
        /// Volume nodes per axis.
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 0.45)]
        window_radius: f64,
        /// CSV of `k,a_k`; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adjoint identity, canonical round trip and preconditioner pairing.
    Selftest {
        /// Also write the log here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

enum Failure {
    Io(String),
    Config(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Config(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Io(m) | Failure::Config(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Io { .. } | HarnessError::Format(_) => Failure::Io(e.to_string()),
            HarnessError::Reconstruct(ReconstructError::Divergence { .. }) => Failure::Numerical(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

macro_rules! from_core {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                HarnessError::from(e).into()
            }
        }
    )*};
}
from_core!(
    comptom_core::TransformError,
    comptom_core::MicrolocalError,
    comptom_core::ReconstructError
);

type Result<T> = std::result::Result<T, Failure>;

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Failure::Io(format!("I/O error on {}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    eprintln!("config_hash={}", cfg.hash());
    eprintln!("seed={}", cfg.seed);
    for line in cfg.to_toml().lines() {
        eprintln!("# {line}");
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Command::ProbeOrder { detector, n, window_radius, out } = &cli.command {
        return probe_order(*detector, *n, *window_radius, out.as_deref());
    }
    let cfg = load_config(cli.config.as_deref())?;
    let volume = cfg.volume_spec()?;
    let read_volume = |p: &Path| -> Result<_> { Ok(ArrayFile::read(p)?.into_volume(&volume)?) };
    match cli.command {
        Command::Phantom { out } => {
            let f = make_phantom(&cfg.phantom(), &volume)?;
            ArrayFile::from_volume(&f).write(&out)?;
        }
        Command::Forward { input, out } => {
            let (layout, w) = (cfg.layout()?, cfg.weight()?);
            let q = cfg.quadrature(&layout, &volume)?;
            let f = read_volume(&input)?;
            ArrayFile::from_conedata(&forward(&f, &layout, &w, &q)?).write(&out)?;
        }
        Command::Adjoint { input, out } => {
            let (layout, w) = (cfg.layout()?, cfg.weight()?);
            let q = cfg.quadrature(&layout, &volume)?;
            let g = ArrayFile::read(&input)?.into_conedata(&layout)?;
            ArrayFile::from_volume(&adjoint(&g, &volume, &w, &q)?).write(&out)?;
        }
        Command::Normal { input, out } => {
            let (layout, w) = (cfg.layout()?, cfg.weight()?);
            let q = cfg.quadrature(&layout, &volume)?;
            let f = read_volume(&input)?;
            ArrayFile::from_volume(&apply_normal(&f, &layout, &w, &q)?).write(&out)?;
        }
        Command::Reconstruct { input, out, max_iters, tol, precond, mask, truth, log } => {
            let (layout, w) = (cfg.layout()?, cfg.weight()?);
            let q = cfg.quadrature(&layout, &volume)?;
            let mut sc = cfg.solver()?;
            if let Some(m) = max_iters {
                sc.max_iters = m;
            }
            if let Some(t) = tol {
                sc.rel_tol = t;
            }
            if let Some(p) = precond {
                sc.preconditioner = match p {
                    Precond::None => Preconditioner::None,
                    Precond::Riesz => Preconditioner::RieszOrder2,
                };
            }
            if let Some(m) = mask {
                sc.visibility_mask = Some(read_volume(&m)?);
            }
            let truth = truth.map(|p| read_volume(&p)).transpose()?;
            let g = ArrayFile::read(&input)?.into_conedata(&layout)?;
            let op = comptom_core::ConeOperator::new(&layout, &volume, &w, &q);
            let res = solve(&g, &sc, &op, truth.as_ref())?;
            ArrayFile::from_volume(&res.f).write(&out)?;
            if let Some(p) = log {
                write_text(&p, &res.log_csv())?;
            }
            eprintln!("iterations={} stop={:?}", res.iterations(), res.stop);
            if let Some(t) = &truth {
                eprintln!("relative_error={:.6e}", relative_error(&res.f, t, None));
            }
        }
        Command::Visibility { out, n_dir } => {
            let (surface, w) = (cfg.surface()?, cfg.weight()?);
            let map = visibility_map(&surface, &volume, &w, &VisibilityOptions::new(n_dir))?;
            ArrayFile::from_volume(&map).write(&out)?;
        }
        Command::Selftest { log } => {
            let report: SelftestReport = run_selftest(&cfg)?;
            let text = report.log();
            print!("{text}");
            if let Some(p) = log {
                write_text(&p, &text)?;
            }
            if !report.passed {
                return Err(Failure::Numerical("self-test failed".into()));
            }
        }
        Command::ProbeOrder { .. } => unreachable!(),
    }
    Ok(())
}

fn probe_order(detector: ProbeDetector, n: usize, radius: f64, out: Option<&Path>) -> Result<()> {
    if n < 8 {
        return Err(Failure::Config(format!("probe volume needs n >= 8, got {n}")));
    }
    let exp = match detector {
        ProbeDetector::Sphere => ProbeExperiment::sphere(n, radius)?,
        ProbeDetector::Disk => ProbeExperiment::disk(n, radius)?,
    };
    let probe = exp.run()?;
    let mut csv = String::from("k,a_k\n");
    for (k, a) in &probe.samples {
        csv.push_str(&format!("{k},{a:.17e}\n"));
    }
    match out {
        Some(p) => write_text(p, &csv)?,
        None => print!("{csv}"),
    }
    eprintln!("slope={:.6}", probe.slope);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

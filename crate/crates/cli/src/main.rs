use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;
mod io;
mod store;

use config::{load, GenConfig, MarginConfig, Mode, PlantKind, SimConfig, SweepConfig, SynthConfig};
use error::CliError;

/// Robust H-infinity controllers for constrained descriptor systems.
///
/// Exit codes: 0 ok or stabilized, 1 internal error, 2 input error,
/// 3 infeasible margin, 4 not stabilized, 5 diverged.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// File of `key = value` lines; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark plant directory.
    Gen {
        #[arg(long, value_enum)]
        kind: Option<PlantKind>,
        #[arg(long)]
        nv: Option<usize>,
        #[arg(long)]
        np: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        p: Option<usize>,
        /// Planted unstable modes (synthetic plants).
        #[arg(long)]
        unstable: Option<usize>,
        /// Reynolds-like parameter (toy plants).
        #[arg(long)]
        re: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compute the robustness margin and the Riccati factors.
    Margin {
        dir: PathBuf,
        #[arg(long)]
        gamma_max: Option<f64>,
        #[arg(long)]
        rel_gap: Option<f64>,
        #[arg(long)]
        safety: Option<f64>,
        #[arg(long)]
        riccati_tol: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Reduce the plant and build the certified reduced controller.
    Synth {
        dir: PathBuf,
        /// Keep characteristic values at or above this threshold.
        #[arg(long, conflicts_with = "order")]
        tol: Option<f64>,
        /// Fixed reduced order.
        #[arg(long)]
        order: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Simulate the nonlinear plant with the controller of the directory.
    Simulate {
        dir: PathBuf,
        /// Controller directory; defaults to `<dir>/controller` when present.
        #[arg(long)]
        controller: Option<PathBuf>,
        #[arg(long)]
        open_loop: bool,
        #[arg(long)]
        h: Option<f64>,
        #[arg(long)]
        t_end: Option<f64>,
        /// Amplitude of the input perturbation.
        #[arg(long)]
        amp: Option<f64>,
        /// Output directory; defaults to `<dir>/sim`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Linearization-error times truncation-threshold grid on a toy plant.
    Sweep {
        dir: PathBuf,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        ells: Option<Vec<i64>>,
        #[arg(long, value_delimiter = ',')]
        tols: Option<Vec<f64>>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        h: Option<f64>,
        #[arg(long)]
        t_end: Option<f64>,
        #[arg(long)]
        amp: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn resolve(dir: &Path) -> Result<PathBuf, CliError> {
    if dir.is_dir() {
        Ok(dir.canonicalize().map_err(|e| CliError::io(dir, e))?)
    } else {
        Err(CliError::Input(format!(
            "{} is not a directory",
            dir.display()
        )))
    }
}

fn run(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Gen {
            kind,
            nv,
            np,
            m,
            p,
            unstable,
            re,
            seed,
            out,
            common,
        } => {
            let mut c: GenConfig = load(common.config.as_deref())?;
            set(&mut c.kind, kind);
            set_opt(&mut c.nv, nv);
            set_opt(&mut c.np, np);
            set_opt(&mut c.m, m);
            set_opt(&mut c.p, p);
            set_opt(&mut c.unstable, unstable);
            set_opt(&mut c.re, re);
            set_opt(&mut c.seed, seed);
            commands::gen(&c, &out)
        }
        Command::Margin {
            dir,
            gamma_max,
            rel_gap,
            safety,
            riccati_tol,
            common,
        } => {
            let mut c: MarginConfig = load(common.config.as_deref())?;
            set(&mut c.gamma_max, gamma_max);
            set(&mut c.rel_gap, rel_gap);
            set(&mut c.safety, safety);
            set(&mut c.riccati_tol, riccati_tol);
            commands::margin(&c, &resolve(&dir)?)
        }
        Command::Synth {
            dir,
            tol,
            order,
            common,
        } => {
            let mut c: SynthConfig = load(common.config.as_deref())?;
            if tol.is_some() || order.is_some() {
                c.tol = tol;
                c.order = order;
            }
            commands::synth(&c, &resolve(&dir)?)
        }
        Command::Simulate {
            dir,
            controller,
            open_loop,
            h,
            t_end,
            amp,
            out,
            common,
        } => {
            let mut c: SimConfig = load(common.config.as_deref())?;
            c.open_loop |= open_loop;
            set(&mut c.h, h);
            set(&mut c.t_end, t_end);
            set(&mut c.amp, amp);
            let controller = controller.as_deref().map(resolve).transpose()?;
            commands::simulate(&c, &resolve(&dir)?, controller.as_deref(), out.as_deref())
        }
        Command::Sweep {
            dir,
            ells,
            tols,
            mode,
            h,
            t_end,
            amp,
            common,
        } => {
            let mut c: SweepConfig = load(common.config.as_deref())?;
            set(&mut c.ells, ells);
            set(&mut c.tols, tols);
            set(&mut c.mode, mode);
            set(&mut c.h, h);
            set(&mut c.t_end, t_end);
            set(&mut c.amp, amp);
            commands::sweep(&c, &resolve(&dir)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

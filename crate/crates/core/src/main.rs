use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use avgproc::harness::{run_experiment, ExperimentConfig, ExperimentKind, ExperimentReport, THREADS_ENV};
use avgproc::lattice::{FourierMode, FourierSpec};
use avgproc::observables::WeightSpec;

#[derive(Parser)]
#[command(name = "avgproc", version, about = "Averaging process on the discrete torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Also write plot-ready long-format CSV.
    #[arg(long, global = true)]
    emit_plots: bool,
    /// Worker threads (overrides the environment variable).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Lattice and limiting noise constants.
    Constants(Common),
    /// Plain replicas of the process.
    Simulate(Common),
    /// Second moments of discrete gradients.
    Moments {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        k_depth: usize,
        #[arg(long)]
        h: Option<f64>,
    },
    /// Fluctuation fields, martingales and jump sizes.
    Fclt {
        #[command(flatten)]
        common: Common,
        /// Largest Fourier index of the test functions.
        #[arg(long, default_value_t = 1)]
        modes: i64,
    },
    /// Both sides of the Poincaré inequality for the squared-gradient functional.
    Poincare {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long, default_value_t = 8)]
        strata: usize,
    },
    /// Law of large numbers for the squared-gradient functional.
    Lln(Common),
    /// Run an experiment described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 1)]
    d: usize,
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Comma-separated mesh counts for sweeps.
    #[arg(long, value_delimiter = ',')]
    ns: Vec<usize>,
    #[arg(long, default_value_t = 0.2)]
    t: f64,
    #[arg(long, default_value_t = 100)]
    replicas: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Initial condition as a JSON list of `{"mode": [..], "cos": c, "sin": s}`.
    #[arg(long)]
    u0: Option<String>,
    /// Weight as JSON `{"directions": [...], "time": {...}}`.
    #[arg(long)]
    g: Option<String>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 4096)]
    quad: usize,
}

impl Common {
    fn config(&self, kind: ExperimentKind) -> Result<ExperimentConfig, String> {
        let u0 = match &self.u0 {
            Some(s) => serde_json::from_str::<FourierSpec>(s).map_err(|e| format!("--u0: {e}"))?,
            None => {
                let mut m = vec![0; self.d];
                m[0] = 1;
                FourierSpec::single_cos(m)
            }
        };
        let g = match &self.g {
            Some(s) => Some(serde_json::from_str::<WeightSpec>(s).map_err(|e| format!("--g: {e}"))?),
            None => None,
        };
        Ok(ExperimentConfig {
            kind,
            d: self.d,
            n: self.n,
            ns: self.ns.clone(),
            t: self.t,
            u0,
            g,
            replicas: self.replicas,
            seed: self.seed,
            output: self.output.clone(),
            quad: self.quad,
            ..Default::default()
        })
    }
}

/// Cos and sin modes with `0 < |m|_∞ ≤ max`, one of each `±m` pair.
fn mode_set(d: usize, max: i64) -> Vec<FourierMode> {
    let mut out = Vec::new();
    let side = (2 * max + 1) as usize;
    for k in 0..side.pow(d as u32) {
        let mut rem = k;
        let m: Vec<i64> = (0..d)
            .map(|_| {
                let v = (rem % side) as i64 - max;
                rem /= side;
                v
            })
            .collect();
        match m.iter().find(|&&v| v != 0) {
            Some(&first) if first > 0 => {
                out.push(FourierMode::cos(m.clone()));
                out.push(FourierMode::sin(m));
            }
            _ => {}
        }
    }
    out
}

fn print_report(report: &ExperimentReport, out: &mut dyn Write) -> std::io::Result<()> {
    for r in &report.rows {
        let status = match r.pass {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "    ",
        };
        let mut line = format!("{status} {:<48} {:>24.16e}", r.name, r.value);
        if let Some(se) = r.stderr {
            line.push_str(&format!(" ± {se:.3e}"));
        }
        if let Some(t) = r.target {
            line.push_str(&format!("  target {t:.10e}"));
        }
        writeln!(out, "{line}")?;
    }
    writeln!(
        out,
        "events {}  threads {}  wall {:.2}s",
        report.telemetry.events, report.telemetry.threads, report.telemetry.wall_seconds
    )
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig, String> {
    let mut cfg = match &cli.command {
        Command::Constants(c) => c.config(ExperimentKind::Constants)?,
        Command::Simulate(c) => c.config(ExperimentKind::Simulate)?,
        Command::Lln(c) => c.config(ExperimentKind::Lln)?,
        Command::Moments { common, k_depth, h } => ExperimentConfig {
            k_depth: *k_depth,
            h: *h,
            ..common.config(ExperimentKind::Moments)?
        },
        Command::Fclt { common, modes } => ExperimentConfig {
            modes: mode_set(common.d, *modes),
            ..common.config(ExperimentKind::Fclt)?
        },
        Command::Poincare { common, samples, strata } => ExperimentConfig {
            samples: *samples,
            strata: *strata,
            ..common.config(ExperimentKind::Poincare)?
        },
        Command::Run { config } => {
            let text = std::fs::read_to_string(config)
                .map_err(|e| format!("cannot read {}: {e}", config.display()))?;
            ExperimentConfig::from_json(&text).map_err(|e| e.to_string())?
        }
    };
    cfg.emit_plots |= cli.emit_plots;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        std::env::set_var(THREADS_ENV, n.to_string());
    }
    let cfg = match build_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run_experiment(&cfg) {
        Ok(report) => {
            // `constants` prints its table as CSV on stdout and the checks on stderr.
            let printed = if cfg.kind == ExperimentKind::Constants {
                report
                    .table
                    .to_csv()
                    .map_err(|e| std::io::Error::other(e.to_string()))
                    .and_then(|csv| std::io::stdout().write_all(csv.as_bytes()))
                    .and_then(|_| print_report(&report, &mut std::io::stderr()))
            } else {
                print_report(&report, &mut std::io::stdout())
            };
            if let Err(e) = printed {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

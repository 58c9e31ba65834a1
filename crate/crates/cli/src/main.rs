use std::fs::File;
use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use ivpcond::config::{ConfigError, Model, Settings};
use ivpcond::experiment::{run_cases, run_condition, run_scan, scan_configs, Axis};
use ivpcond::output::{to_json, write_csv};
use ivpcond::Row;

#[derive(Parser)]
#[command(name = "ivpcond", version, about = "Global error amplification experiments for ODE trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One row: integrate, build transitions, report the amplification factors.
    Condition(Common),
    /// One row per value of a parameter.
    Scan {
        #[command(flatten)]
        common: Common,
        /// Parameter to vary: tol, T or theta.
        #[arg(long)]
        axis: String,
        /// Sorted comma-separated values; empty for a header-only table.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
    },
    /// KSE rows for one case, or for all four cases of one trajectory.
    Kse(Common),
}

#[derive(Args)]
struct Common {
    /// key=value file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// lorenz, kse-direct or kse-im.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    case: Option<String>,
    #[arg(long)]
    tol: Option<String>,
    /// Final time.
    #[arg(long = "T")]
    t_final: Option<String>,
    #[arg(long)]
    theta: Option<String>,
    /// Dimension of the reduced (y) system.
    #[arg(long)]
    p: Option<String>,
    #[arg(long)]
    dt: Option<String>,
    #[arg(long)]
    tinf: Option<String>,
    #[arg(long)]
    mesh_intervals: Option<String>,
    /// 0 starts Hager's iteration from 1/m; other values seed a random start.
    #[arg(long)]
    seed: Option<String>,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    out: Option<String>,
    /// Largest number of columns of L for which the exact norm is computed.
    #[arg(long)]
    cost_cap: Option<String>,
    /// Direct KSE initial state: manifold or alternating.
    #[arg(long)]
    kse_init: Option<String>,
    /// Also write the rows as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

impl Common {
    fn settings(&self) -> anyhow::Result<Result<Settings, ConfigError>> {
        let file = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                match Settings::parse_file(&text) {
                    Ok(s) => s,
                    Err(e) => return Ok(Err(e)),
                }
            }
            None => Settings::default(),
        };
        let mut flags = Settings::default();
        let pairs = [
            ("model", &self.model),
            ("case", &self.case),
            ("tol", &self.tol),
            ("T", &self.t_final),
            ("theta", &self.theta),
            ("p", &self.p),
            ("dt", &self.dt),
            ("tinf", &self.tinf),
            ("mesh_intervals", &self.mesh_intervals),
            ("seed", &self.seed),
            ("out", &self.out),
            ("cost_cap", &self.cost_cap),
            ("kse_init", &self.kse_init),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                if let Err(e) = flags.set(key, v) {
                    return Ok(Err(e));
                }
            }
        }
        Ok(Ok(file.overlay(flags)))
    }
}

enum Outcome {
    Rows(Vec<Row>, Option<PathBuf>, Option<PathBuf>),
    Usage(String),
}

fn usage(e: impl std::fmt::Display) -> anyhow::Result<Outcome> {
    Ok(Outcome::Usage(e.to_string()))
}

fn execute(command: Command) -> anyhow::Result<Outcome> {
    let (common, scan) = match &command {
        Command::Condition(c) | Command::Kse(c) => (c, None),
        Command::Scan { common, axis, values } => (common, Some((axis, values))),
    };
    let settings = match common.settings()? {
        Ok(s) => s,
        Err(e) => return usage(e),
    };
    let json = common.json.clone();
    let rows = match (&command, scan) {
        (Command::Condition(_), _) => match settings.resolve() {
            Ok(cfg) => vec![run_condition(&cfg)],
            Err(e) => return usage(e),
        },
        (Command::Kse(_), _) => {
            if !settings.model.is_some_and(Model::is_kse) {
                return usage("kse needs --model kse-direct or kse-im");
            }
            let cases: Vec<u8> = match settings.case {
                Some(c) => vec![c],
                None => (1..=4).collect(),
            };
            let mut cfgs = Vec::new();
            for c in cases {
                let mut s = settings.clone();
                s.case = Some(c);
                match s.resolve() {
                    Ok(cfg) => cfgs.push(cfg),
                    Err(e) => return usage(e),
                }
            }
            run_cases(&cfgs)
        }
        (_, Some((axis, values))) => {
            let Ok(axis) = axis.parse::<Axis>() else { return usage("axis must be tol, T or theta") };
            let values: Result<Vec<f64>, _> =
                values.split(',').map(str::trim).filter(|v| !v.is_empty()).map(str::parse).collect();
            let Ok(values) = values else { return usage("scan values must be numbers") };
            // the scanned key needs no base value
            let mut base = settings.clone();
            let first = values.first().copied().unwrap_or(1.0);
            match axis {
                Axis::Tol => base.tol = Some(first),
                Axis::T => base.t_final = Some(first),
                Axis::Theta => base.theta = base.theta.or(values.first().copied()),
            }
            let base = match base.resolve() {
                Ok(cfg) => cfg,
                Err(e) => return usage(e),
            };
            match scan_configs(&base, axis, &values) {
                Ok(cfgs) => run_scan(&cfgs),
                Err(e) => return usage(e),
            }
        }
        _ => unreachable!(),
    };
    Ok(Outcome::Rows(rows, settings.output, json))
}

fn emit(rows: &[Row], out: Option<PathBuf>, json: Option<PathBuf>) -> anyhow::Result<()> {
    match out {
        Some(path) => {
            let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            write_csv(BufWriter::new(f), rows)?;
        }
        None => write_csv(io::stdout().lock(), rows)?,
    }
    if let Some(path) = json {
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        serde_json::to_writer_pretty(BufWriter::new(f), &to_json(rows))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = execute(cli.command).and_then(|outcome| match outcome {
        Outcome::Usage(msg) => {
            eprintln!("error: {msg}");
            Ok(ExitCode::from(1))
        }
        Outcome::Rows(rows, out, json) => {
            emit(&rows, out, json)?;
            for row in rows.iter().filter(|r| r.status.is_failure()) {
                eprintln!("case {}: {}", row.case.index(), row.status.label());
            }
            let failed = rows.iter().any(|r| r.status.is_failure());
            Ok(if failed { ExitCode::from(2) } else { ExitCode::SUCCESS })
        }
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

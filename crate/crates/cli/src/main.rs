//! `flownet`: batch analysis of dynamic flow networks under disruptions.
//!
//! Exit codes: 0 success, 1 invalid input (arguments, scenario or matrix
//! files), 2 failure while computing or writing results.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use flownet::analysis::{analyze, load_matrix, run_trajectory, synthesize, table, trajectory_svg};
use flownet::{ControlSpec, Matrix, Scenario};

#[derive(Parser)]
#[command(
    name = "flownet",
    version,
    about = "Throughput analysis and control synthesis for disrupted flow networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Capacities, certified and simulated throughput, box and certificate.
    Analyze {
        scenario: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Skip the simulated throughput.
        #[arg(long)]
        no_sim: bool,
        /// Directory for summary.csv, box.csv and certificate.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate the md, ol or dd control of a scenario.
    Synthesize {
        scenario: PathBuf,
        /// Control to synthesise instead of the scenario's own.
        #[arg(long, value_enum)]
        control: Option<Kind>,
        #[command(flatten)]
        common: Common,
        /// CSV output file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Throughputs of every control on every row of a matrix file.
    Table {
        matrix: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        no_sim: bool,
        /// CSV output file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One trajectory from the empty network in mode 1.
    Simulate {
        scenario: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Demand; defaults to the scenario's `demand`.
        #[arg(long)]
        alpha: Option<f64>,
        /// CSV output file for the trajectory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// SVG plot of the trajectory.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Md,
    Ol,
    Dd,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Text,
    Csv,
}

/// Overrides of the scenario's analysis options.
#[derive(Args)]
struct Common {
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    /// Grid points per free axis in the extremal problems.
    #[arg(long)]
    grid: Option<usize>,
    /// Bisection tolerance of the certified throughputs.
    #[arg(long)]
    tol: Option<f64>,
    /// Replicates per simulated demand.
    #[arg(long)]
    seeds: Option<usize>,
    /// Format of standard output.
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

impl Common {
    fn apply(&self, sc: &mut Scenario) -> flownet::Result<()> {
        let a = &mut sc.analysis;
        if let Some(v) = self.dt {
            a.dt = v;
        }
        if let Some(v) = self.horizon {
            a.horizon = v;
        }
        if let Some(v) = self.grid {
            a.grid = v;
        }
        if let Some(v) = self.tol {
            a.tol = v;
        }
        if let Some(v) = self.seeds {
            a.seeds = v;
        }
        sc.validate()
    }
}

/// Error with its exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn invalid(err: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        err: err.into(),
    }
}

fn runtime(err: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        err: err.into(),
    }
}

fn load(path: &Path, common: &Common) -> Result<Scenario, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(invalid)?;
    let mut sc = Scenario::from_json(&text)
        .with_context(|| format!("in {}", path.display()))
        .map_err(invalid)?;
    common.apply(&mut sc).map_err(invalid)?;
    sc.build()
        .with_context(|| format!("in {}", path.display()))
        .map_err(invalid)?;
    Ok(sc)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Analyze {
            scenario,
            common,
            no_sim,
            out,
        } => {
            let sc = load(&scenario, &common)?;
            let a = analyze(&sc, !no_sim).map_err(runtime)?;
            if let Some(dir) = out {
                fs::create_dir_all(&dir)
                    .with_context(|| format!("creating {}", dir.display()))
                    .map_err(runtime)?;
                write(&dir.join("summary.csv"), &a.summary_csv())?;
                write(&dir.join("box.csv"), &a.box_csv())?;
                write(&dir.join("certificate.csv"), &a.certificate_csv())?;
            }
            match common.format {
                Format::Text => print!("{}", a.text()),
                Format::Csv => print!("{}", a.summary_csv()),
            }
        }
        Command::Synthesize {
            scenario,
            control,
            common,
            out,
        } => {
            let mut sc = load(&scenario, &common)?;
            if let Some(k) = control {
                sc.control = match k {
                    Kind::Md => ControlSpec::Md,
                    Kind::Ol => ControlSpec::Ol,
                    Kind::Dd => ControlSpec::Dd { rules: None },
                };
                sc.build().map_err(invalid)?;
            }
            let s = synthesize(&sc).map_err(invalid)?;
            if let Some(path) = out {
                write(&path, &s.csv())?;
            }
            match common.format {
                Format::Text => print!("{}", s.text()),
                Format::Csv => print!("{}", s.csv()),
            }
        }
        Command::Table {
            matrix,
            common,
            no_sim,
            out,
        } => {
            let text = fs::read_to_string(&matrix)
                .with_context(|| format!("reading {}", matrix.display()))
                .map_err(invalid)?;
            let m = Matrix::from_json(&text)
                .with_context(|| format!("in {}", matrix.display()))
                .map_err(invalid)?;
            let base_dir = matrix.parent().unwrap_or(Path::new("."));
            let mut base = load_matrix(&m, base_dir).map_err(invalid)?;
            common.apply(&mut base).map_err(invalid)?;
            for v in &m.rows {
                let controls = if m.controls.is_empty() {
                    vec![base.control.clone()]
                } else {
                    m.controls.clone()
                };
                for c in controls {
                    base.clone().with_variant(*v).with_control(c).build().map_err(invalid)?;
                }
            }
            let t = table(&base, &m, !no_sim).map_err(runtime)?;
            if let Some(path) = out {
                write(&path, &t.csv())?;
            }
            match common.format {
                Format::Text => print!("{}", t.text()),
                Format::Csv => print!("{}", t.csv()),
            }
        }
        Command::Simulate {
            scenario,
            common,
            alpha,
            out,
            svg,
        } => {
            let sc = load(&scenario, &common)?;
            if alpha.or(sc.demand).is_none() {
                return Err(invalid(anyhow::anyhow!(
                    "{}: no demand; set \"demand\" or pass --alpha",
                    scenario.display()
                )));
            }
            let (_, tr) = run_trajectory(&sc, alpha).map_err(|e| match e {
                flownet::FlownetError::Scenario(_) => invalid(e),
                e => runtime(e),
            })?;
            if let Some(path) = out {
                write(&path, &tr.to_csv())?;
            }
            if let Some(path) = svg {
                write(&path, &trajectory_svg(&tr))?;
            }
            match common.format {
                Format::Csv => print!("{}", tr.to_csv()),
                Format::Text => {
                    let last = tr.final_state();
                    println!("horizon      {}", tr.times.last().copied().unwrap_or(0.0));
                    println!("mode jumps   {}", tr.jumps);
                    println!("final mode   {}", last.s + 1);
                    let xs: Vec<String> = last.x.iter().map(|v| format!("{v:.4}")).collect();
                    println!("final x      {}", xs.join(" "));
                    println!("running avg  {:.4}", tr.running_avg.last().copied().unwrap_or(0.0));
                    println!("inflow       {:.4}", tr.inflow);
                    println!("outflow      {:.4}", tr.outflow);
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use etmpc::config::{RunConfig, PRESETS};
use etmpc::gp::{Dataset, GpModel, Hyperparams};
use etmpc::run::{self, OUT_ENV};
use etmpc::symbolic::synthesize;
use etmpc::verify;

mod plots;

#[derive(Parser)]
#[command(name = "etmpc", version, about = "Event-triggered learning-based MPC with symbolic terminal sets")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the iterative task and write the artifact tree.
    Run(RunArgs),
    /// Run the property suites.
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Restrict to the named suites.
        #[arg(long = "suite", value_parser = clap::builder::PossibleValuesParser::new(verify::SUITES))]
        suites: Vec<String>,
    },
    /// Synthesize the terminal set from the initial data and export it.
    Synth {
        #[command(flatten)]
        src: Source,
        /// Output CSV of safe and terminal cells.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the GP on the initial data (or a CSV) and serialize it as JSON.
    ExportModel {
        #[command(flatten)]
        src: Source,
        /// Training data CSV; defaults to the config's initial data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Source {
    /// Named preset.
    #[arg(long, conflicts_with = "config", value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
    preset: Option<String>,
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Plant shorthand: toy-1d, toy-2d or unicycle (the desk preset).
    #[arg(long, conflicts_with_all = ["preset", "config"])]
    plant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    src: Source,
    #[arg(long)]
    iterations: Option<usize>,
    /// Output directory; defaults to `$ETMPC_OUT/<name>-seed<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write SVG plots.
    #[arg(long)]
    plots: bool,
}

impl Source {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::from_toml(&text)?
        } else if let Some(p) = &self.plant {
            let name = match p.as_str() {
                "toy-1d" | "toy-2d" => p.as_str(),
                "unicycle" => "desk-unicycle",
                other => bail!("unknown plant `{other}` (known: toy-1d, toy-2d, unicycle)"),
            };
            RunConfig::preset(name)?
        } else {
            RunConfig::preset(self.preset.as_deref().unwrap_or("toy-1d"))?
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    match Cli::parse().cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Verify { seed, suites } => Ok(cmd_verify(seed, &suites)),
        Cmd::Synth { src, out } => cmd_synth(&src, &out),
        Cmd::ExportModel { src, data, out } => cmd_export(&src, data.as_deref(), &out),
    }
}

fn cmd_run(a: RunArgs) -> Result<ExitCode> {
    let mut cfg = a.src.load()?;
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(o) = a.out {
        cfg.output_dir = Some(o);
    }
    cfg.plots |= a.plots;
    cfg.validate()?;
    log::info!("run {} seed {} -> {} (override root with {OUT_ENV})", cfg.name, cfg.seed, run::output_dir(&cfg).display());
    let out = run::run(&cfg)?;
    if cfg.plots {
        plots::write_all(&cfg, &out.report, &out.dir)?;
    }
    print!("{}", run::summary_csv(&cfg, &out.report));
    println!("artifacts: {}", out.dir.display());
    if let Some(msg) = &out.report.aborted {
        eprintln!("run aborted: {msg}");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(seed: u64, only: &[String]) -> ExitCode {
    let names: Vec<&str> = if only.is_empty() { verify::SUITES.to_vec() } else { only.iter().map(String::as_str).collect() };
    let mut ok = true;
    for name in names {
        let started = std::time::Instant::now();
        let r = verify::run_suite(name, seed).expect("suite names are validated by clap");
        ok &= r.passed;
        println!(
            "{:<18} {}  {}/{} cases ok  {}  ({:.1}s)",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.cases - r.failures,
            r.cases,
            r.detail,
            started.elapsed().as_secs_f64()
        );
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn cmd_synth(src: &Source, out: &PathBuf) -> Result<ExitCode> {
    let cfg = src.load()?;
    let data = cfg.initial_dataset()?;
    let model = GpModel::fit(&data, &cfg.hyperparams)?;
    let (sym, _, terminal, report) = synthesize(&model, &cfg.abstraction, cfg.gamma_policy)?;
    let lattice = sym.states();
    let n = lattice.dim();
    let mut s = run::csv_preamble(&cfg);
    let cols: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    s.push_str(&format!("{},terminal\n", cols.join(",")));
    for idx in terminal.safe_cells().iter() {
        let p = lattice.point(idx);
        let row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        s.push_str(&format!("{},{}\n", row.join(","), u8::from(terminal.terminal_cells().contains(idx))));
    }
    std::fs::write(out, s).with_context(|| format!("writing {}", out.display()))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct ExportedModel<'a> {
    schema: u32,
    hyperparams: &'a Hyperparams,
    beta: Vec<f64>,
    /// Training inputs `z = (x, u)`.
    inputs: Vec<&'a [f64]>,
    /// `targets[i]`: observed next-state component `i`.
    targets: Vec<&'a [f64]>,
    /// `weights[i] = (K + σ²I)⁻¹ y_i`.
    weights: Vec<&'a [f64]>,
}

fn cmd_export(src: &Source, data: Option<&std::path::Path>, out: &PathBuf) -> Result<ExitCode> {
    let cfg = src.load()?;
    let d = match data {
        Some(p) => Dataset::read_csv(std::fs::File::open(p).with_context(|| format!("opening {}", p.display()))?)?,
        None => cfg.initial_dataset()?,
    };
    let model = GpModel::fit(&d, &cfg.hyperparams)?;
    let n_x = model.n_x();
    let doc = ExportedModel {
        schema: run::SCHEMA_VERSION,
        hyperparams: model.hyperparams(),
        beta: model.betas(),
        inputs: (0..d.len()).map(|t| d.input(t)).collect(),
        targets: (0..n_x).map(|i| d.targets(i)).collect(),
        weights: (0..n_x).map(|i| model.weights(i)).collect(),
    };
    std::fs::write(out, serde_json::to_string_pretty(&doc)? + "\n").with_context(|| format!("writing {}", out.display()))?;
    println!("model with {} points written to {}", d.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

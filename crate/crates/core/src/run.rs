//! Run orchestration and the artifact tree written for every run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::closed_loop::{iterative_task, PlantKind, TaskError, TaskReport};
use crate::config::{ConfigError, RunConfig};
use crate::gp::GpError;
use crate::plant::Unicycle;
use crate::symbolic::SynthesisReport;

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "ETMPC_OUT";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("dataset export: {0}")]
    Data(#[from] GpError),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// The configured directory, else `<root>/<name>-seed<seed>`.
pub fn output_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir
        .clone()
        .unwrap_or_else(|| default_output_root().join(format!("{}-seed{}", cfg.name, cfg.seed)))
}

/// First line of every CSV artifact.
pub fn csv_preamble(cfg: &RunConfig) -> String {
    format!("# etmpc schema={SCHEMA_VERSION} config={} seed={}\n", cfg.hash(), cfg.seed)
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    schema: u32,
    version: &'static str,
    name: &'a str,
    seed: u64,
    config_hash: String,
    iterations_requested: usize,
    iterations_run: usize,
    aborted: Option<&'a str>,
    final_data_points: usize,
    synthesis: Vec<&'a SynthesisReport>,
    files: Vec<&'static str>,
}

pub struct RunOutput {
    pub dir: PathBuf,
    pub report: TaskReport,
}

/// Runs the iterative task and writes the artifacts into [`output_dir`].
pub fn run(cfg: &RunConfig) -> Result<RunOutput, RunError> {
    cfg.validate()?;
    let dir = output_dir(cfg);
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let data = cfg.initial_dataset()?;
    let report = iterative_task(&cfg.task(), data)?;
    write_artifacts(cfg, &report, &dir)?;
    Ok(RunOutput { dir, report })
}

pub const ARTIFACTS: &[&str] = &[
    "config.toml",
    "summary.csv",
    "timing.csv",
    "trajectory.csv",
    "solves.csv",
    "thresholds.csv",
    "dataset.csv",
    "manifest.json",
];

pub fn write_artifacts(cfg: &RunConfig, report: &TaskReport, dir: &Path) -> Result<(), RunError> {
    let put = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(io(&p))
    };
    put("config.toml", cfg.to_toml())?;
    put("summary.csv", summary_csv(cfg, report))?;
    put("timing.csv", timing_csv(cfg, report))?;
    put("trajectory.csv", trajectory_csv(cfg, report))?;
    put("solves.csv", solves_csv(cfg, report))?;
    put("thresholds.csv", thresholds_csv(cfg, report))?;

    let mut data = csv_preamble(cfg).into_bytes();
    report.final_data.write_csv(&mut data)?;
    let p = dir.join("dataset.csv");
    fs::write(&p, data).map_err(io(&p))?;

    let manifest = Manifest {
        schema: SCHEMA_VERSION,
        version: env!("CARGO_PKG_VERSION"),
        name: &cfg.name,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        iterations_requested: cfg.iterations,
        iterations_run: report.iterations.len(),
        aborted: report.aborted.as_deref(),
        final_data_points: report.final_data.len(),
        synthesis: report.iterations.iter().map(|it| &it.synthesis).collect(),
        files: ARTIFACTS.to_vec(),
    };
    put("manifest.json", serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n")?;
    Ok(())
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn names(prefix: &str, n: usize) -> String {
    (1..=n).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>().join(",")
}

/// Deterministic per-iteration summary; wall times live in `timing.csv`.
pub fn summary_csv(cfg: &RunConfig, report: &TaskReport) -> String {
    let mut s = csv_preamble(cfg);
    s.push_str(
        "iteration,status,triggers,solves,data_points,collected,evaluations,first_in_xs,first_in_xf,\
         resolve_failures,unit_horizon_violations,safe_states,terminal_states\n",
    );
    for it in &report.iterations {
        let m = &it.summary;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            m.iteration,
            m.status.as_str(),
            m.triggers,
            m.solves,
            m.data_points,
            m.collected,
            m.evaluations,
            opt(m.first_in_xs),
            opt(m.first_in_xf),
            m.resolve_failures,
            m.unit_horizon_violations,
            m.safe_states,
            m.terminal_states
        );
    }
    s
}

pub fn timing_csv(cfg: &RunConfig, report: &TaskReport) -> String {
    let mut s = csv_preamble(cfg);
    s.push_str("iteration,solve_ms,synth_ms\n");
    for it in &report.iterations {
        let _ = writeln!(s, "{},{:.3},{:.3}", it.summary.iteration, it.summary.solve_ms, it.summary.synth_ms);
    }
    s
}

/// One row per simulated step plus a final row without input. Unicycle runs
/// add the reconstructed world poses of follower and leader.
pub fn trajectory_csv(cfg: &RunConfig, report: &TaskReport) -> String {
    let n_x = cfg.hyperparams.n_x;
    let n_u = cfg.hyperparams.n_u;
    let uni = match &cfg.plant {
        PlantKind::Unicycle(u) => Some(u),
        PlantKind::Kernel(_) => None,
    };
    let mut s = csv_preamble(cfg);
    let _ = write!(s, "iteration,t,{},{},mode,solve,trigger,collected", names("x", n_x), names("u", n_u));
    if uni.is_some() {
        s.push_str(",px,py,ptheta,rx,ry,rtheta");
    }
    s.push('\n');
    let pose = |s: &mut String, t: usize, x: &[f64]| {
        if let Some(u) = uni {
            let r = u.reference(t as f64 * u.dt);
            let p = Unicycle::world_pose(&r, x);
            let _ = write!(s, ",{},{}", join(&p), join(&r));
        }
    };
    for it in &report.iterations {
        let i = it.summary.iteration;
        for st in &it.phase.steps {
            let mode = match st.mode {
                crate::closed_loop::Mode::Mpc => "mpc",
                crate::closed_loop::Mode::Safe => "safe",
            };
            let _ = write!(
                s,
                "{i},{},{},{},{mode},{},{},{}",
                st.t,
                join(&st.x),
                join(&st.u),
                u8::from(st.solve),
                u8::from(st.trigger),
                u8::from(st.collected)
            );
            pose(&mut s, st.t, &st.x);
            s.push('\n');
        }
        let t_end = it.phase.steps.last().map_or(0, |st| st.t + 1);
        let _ = write!(s, "{i},{t_end},{},{},,,,", join(&it.phase.final_state), vec![""; n_u].join(","));
        pose(&mut s, t_end, &it.phase.final_state);
        s.push('\n');
    }
    s
}

pub fn solves_csv(cfg: &RunConfig, report: &TaskReport) -> String {
    let n_x = cfg.hyperparams.n_x;
    let mut s = csv_preamble(cfg);
    let _ = writeln!(
        s,
        "iteration,k,t_k,horizon,feasible,cost,evaluations,schedule_feasible,m_k,smallness,monotone,{}",
        names("xi0_", n_x)
    );
    for it in &report.iterations {
        for r in &it.phase.solves {
            let xi = if r.xi_first.is_empty() { vec![""; n_x].join(",") } else { join(&r.xi_first) };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{xi}",
                it.summary.iteration,
                r.k,
                r.t_k,
                r.horizon,
                u8::from(r.feasible),
                r.cost,
                r.evaluations,
                u8::from(r.schedule_feasible),
                opt(r.m_k),
                opt(r.smallness.map(u8::from)),
                u8::from(r.monotone)
            );
        }
    }
    s
}

/// `(j, ψ*, ξ*, c)` of every computed schedule.
pub fn thresholds_csv(cfg: &RunConfig, report: &TaskReport) -> String {
    let n_x = cfg.hyperparams.n_x;
    let mut s = csv_preamble(cfg);
    let _ = writeln!(s, "iteration,k,j,{},{},{}", names("psi", n_x), names("xi", n_x), names("c", n_x));
    for it in &report.iterations {
        for r in &it.phase.solves {
            let Some(sc) = &r.schedule else { continue };
            for j in 0..sc.psi.len() {
                let _ = writeln!(
                    s,
                    "{},{},{j},{},{},{}",
                    it.summary.iteration,
                    r.k,
                    join(&sc.psi[j]),
                    join(&sc.xi[j]),
                    join(&sc.c[j])
                );
            }
        }
    }
    s
}

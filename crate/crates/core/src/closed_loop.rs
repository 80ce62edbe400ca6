//! The iterative task: update phases (refit, resynthesize) alternating with
//! event-triggered MPC execution phases and the dual-mode safety controller.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::{Dataset, GpError, GpModel, Hyperparams};
use crate::metric::{IntervalBox, MetricContext};
use crate::ocp::{rollout, solve_multi, solve_seed, OcpProblem, OcpSettings, OcpSolution, StageCost};
use crate::plant::{sample_box, KernelExpansion, Plant, Unicycle};
use crate::symbolic::{synthesize, AbstractionConfig, GammaPolicy, SymbolicError, SynthesisReport, Terminal};
use crate::trigger::{build_schedule, check_trigger, GpObjective, TriggerSchedule};

/// Plants available to the closed loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PlantKind {
    Unicycle(Unicycle),
    Kernel(KernelExpansion),
}

impl Plant for PlantKind {
    fn n_x(&self) -> usize {
        match self {
            PlantKind::Unicycle(p) => p.n_x(),
            PlantKind::Kernel(p) => p.n_x(),
        }
    }

    fn n_u(&self) -> usize {
        match self {
            PlantKind::Unicycle(p) => p.n_u(),
            PlantKind::Kernel(p) => p.n_u(),
        }
    }

    fn nominal(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        match self {
            PlantKind::Unicycle(p) => p.nominal(x, u),
            PlantKind::Kernel(p) => p.nominal(x, u),
        }
    }

    fn noise_bound(&self) -> &[f64] {
        match self {
            PlantKind::Unicycle(p) => p.noise_bound(),
            PlantKind::Kernel(p) => p.noise_bound(),
        }
    }
}

/// Where initial states are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialSet {
    /// A box in the (error) state space.
    State { lower: Vec<f64>, upper: Vec<f64> },
    /// A box of follower world poses; the leader starts at the origin.
    UnicycleWorld { lower: Vec<f64>, upper: Vec<f64> },
}

impl InitialSet {
    pub fn sample(&self, plant: &PlantKind, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            InitialSet::State { lower, upper } => sample_box(&IntervalBox::new(lower.clone(), upper.clone()), rng),
            InitialSet::UnicycleWorld { lower, upper } => {
                let p = sample_box(&IntervalBox::new(lower.clone(), upper.clone()), rng);
                let reference = match plant {
                    PlantKind::Unicycle(u) => u.reference(0.0),
                    PlantKind::Kernel(_) => [0.0; 3],
                };
                Unicycle::error_posture(&reference, &[p[0], p[1], p[2]]).to_vec()
            }
        }
    }
}

/// Policy used for initial data and as an OCP initial guess.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GuessPolicy {
    None,
    /// Tracking law of the unicycle with gains `(k_x, k_y, k_θ)`.
    UnicycleTracking { gains: [f64; 3] },
    /// Linear feedback `u = −K x`, row-major `n_u × n_x`.
    Linear { gain: Vec<f64> },
}

impl GuessPolicy {
    pub fn action(&self, plant: &PlantKind, x: &[f64]) -> Option<Vec<f64>> {
        match (self, plant) {
            (GuessPolicy::None, _) => None,
            (GuessPolicy::UnicycleTracking { gains }, PlantKind::Unicycle(p)) => Some(p.expert(x, *gains).to_vec()),
            (GuessPolicy::UnicycleTracking { .. }, _) => None,
            (GuessPolicy::Linear { gain }, _) => {
                let n_x = x.len();
                Some((0..gain.len() / n_x).map(|r| -(0..n_x).map(|c| gain[r * n_x + c] * x[c]).sum::<f64>()).collect())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Collection {
    /// Keep a sample only when its trigger condition fired.
    Conditional,
    /// Keep every stepped sample.
    Always,
}

/// Parameters of an execution phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSettings {
    pub horizon: usize,
    pub step_cap: usize,
    pub sigma_margin: f64,
    pub objective: GpObjective,
    pub collection: Collection,
    pub cost: StageCost,
    pub input_set: IntervalBox,
    /// Leaving this box counts as divergence.
    pub sim_domain: IntervalBox,
    pub ocp: OcpSettings,
    pub guess: GuessPolicy,
    /// End the phase on entering `X_S` instead of running `C` to the cap.
    pub stop_on_safe: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Mpc,
    Safe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseStatus {
    /// Entered `X_S` and switched to the safety controller.
    ReachedSafe,
    /// Step cap hit while still in MPC mode.
    StepCap,
    /// The threshold recursion was infeasible; the whole plan was applied.
    ScheduleInfeasible,
    /// No OCP candidate reached `X_f` at the first solve.
    InfeasibleStart,
    /// A post-trigger OCP was infeasible.
    InfeasibleResolve,
    /// The state left the safe set under `C`.
    SafeExit,
    Diverged,
}

impl PhaseStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            PhaseStatus::ReachedSafe => "reached-safe",
            PhaseStatus::StepCap => "step-cap",
            PhaseStatus::ScheduleInfeasible => "schedule-infeasible",
            PhaseStatus::InfeasibleStart => "infeasible-start",
            PhaseStatus::InfeasibleResolve => "infeasible-resolve",
            PhaseStatus::SafeExit => "safe-exit",
            PhaseStatus::Diverged => "diverged",
        }
    }
}

/// One simulated step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub mode: Mode,
    /// An OCP was solved at this step.
    pub solve: bool,
    /// A trigger fired on arrival at the next state.
    pub trigger: bool,
    pub collected: bool,
}

/// One OCP solve and its thresholds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveRecord {
    pub k: usize,
    pub t_k: usize,
    pub horizon: usize,
    pub feasible: bool,
    pub cost: f64,
    pub evaluations: usize,
    pub schedule_feasible: bool,
    /// Inter-event time; `None` when the phase ended before the next trigger.
    pub m_k: Option<usize>,
    /// `d_i(0, δ̂(0)) ≤ ξ*_i(1)` for all `i` (requires `H_k ≥ 2`).
    pub smallness: Option<bool>,
    pub monotone: bool,
    pub xi_first: Vec<f64>,
    /// Thresholds of this solve; `None` when the OCP was infeasible.
    pub schedule: Option<TriggerSchedule>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseReport {
    pub status: PhaseStatus,
    pub steps: Vec<StepRecord>,
    pub solves: Vec<SolveRecord>,
    /// Number of fired trigger conditions (excluding the initial solve).
    pub triggers: usize,
    pub collected: Dataset,
    pub final_state: Vec<f64>,
    pub first_in_xs: Option<usize>,
    pub first_in_xf: Option<usize>,
    /// Post-trigger solves that were infeasible.
    pub resolve_failures: usize,
    /// `H_{k+1} = 1` occurrences whose state was not in `X_S`.
    pub unit_horizon_violations: usize,
    pub evaluations: usize,
    pub solve_ms: f64,
}

/// Everything the controller knows during an execution phase.
pub struct Controller<'a> {
    pub model: &'a GpModel,
    pub terminal: &'a Terminal,
    pub gamma: &'a [f64],
}

fn guess_rollout(ctrl: &Controller<'_>, plant: &PlantKind, s: &PhaseSettings, x0: &[f64], h: usize) -> Option<Vec<Vec<f64>>> {
    let mut x = x0.to_vec();
    let mut seq = Vec::with_capacity(h);
    for _ in 0..h {
        let u = match ctrl.terminal.control(&x) {
            Some(u) => u,
            None => s.input_set.clamp(&s.guess.action(plant, &x)?),
        };
        x = ctrl.model.mean_unchecked(&x, &u);
        seq.push(u);
    }
    Some(seq)
}

fn solve_at(
    ctrl: &Controller<'_>,
    plant: &PlantKind,
    s: &PhaseSettings,
    x: &[f64],
    h: usize,
    t_k: usize,
    shifted: Option<Vec<Vec<f64>>>,
) -> OcpSolution {
    let problem = OcpProblem {
        x0: x,
        horizon: h,
        cost: &s.cost,
        input_set: &s.input_set,
        terminal: ctrl.terminal,
        model: ctrl.model,
    };
    let mut starts = Vec::new();
    starts.extend(shifted);
    starts.extend(guess_rollout(ctrl, plant, s, x, h));
    let settings = OcpSettings { seed: solve_seed(s.ocp.seed, t_k), ..s.ocp.clone() };
    solve_multi(&problem, &starts, &settings)
}

/// One execution phase from `x0`.
pub fn execution_phase(
    plant: &PlantKind,
    ctrl: &Controller<'_>,
    s: &PhaseSettings,
    x0: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<PhaseReport, GpError> {
    let ctx = MetricContext::new(ctrl.model.hyperparams());
    let mut rep = PhaseReport {
        status: PhaseStatus::StepCap,
        steps: Vec::new(),
        solves: Vec::new(),
        triggers: 0,
        collected: Dataset::new(plant.n_x(), plant.n_u()),
        final_state: x0.to_vec(),
        first_in_xs: None,
        first_in_xf: None,
        resolve_failures: 0,
        unit_horizon_violations: 0,
        evaluations: 0,
        solve_ms: 0.0,
    };
    let mut x = x0.to_vec();
    let mut t = 0;
    let mut mode = Mode::Mpc;
    let mut h = s.horizon;
    let mut k = 0;
    let mut shifted: Option<Vec<Vec<f64>>> = None;
    let mark = |rep: &mut PhaseReport, t: usize, x: &[f64]| {
        if rep.first_in_xs.is_none() && ctrl.terminal.in_safe_set(x) {
            rep.first_in_xs = Some(t);
        }
        if rep.first_in_xf.is_none() && ctrl.terminal.in_terminal(x) {
            rep.first_in_xf = Some(t);
        }
    };
    mark(&mut rep, 0, &x);

    'phase: while t < s.step_cap {
        if mode == Mode::Safe {
            let Some(u) = ctrl.terminal.control(&x) else {
                rep.status = PhaseStatus::SafeExit;
                break;
            };
            let next = plant.step(&x, &u, rng);
            rep.steps.push(StepRecord { t, x: x.clone(), u, mode, solve: false, trigger: false, collected: false });
            x = next;
            t += 1;
            mark(&mut rep, t, &x);
            continue;
        }
        if ctrl.terminal.in_safe_set(&x) {
            mode = Mode::Safe;
            rep.status = PhaseStatus::ReachedSafe;
            if s.stop_on_safe {
                break;
            }
            continue;
        }

        let started = Instant::now();
        let sol = solve_at(ctrl, plant, s, &x, h, t, shifted.take());
        rep.evaluations += sol.evaluations;
        let schedule = if sol.feasible {
            Some(build_schedule(ctrl.model, &sol.states, &sol.inputs, ctrl.gamma, s.sigma_margin, s.objective)?)
        } else {
            None
        };
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        rep.solve_ms += wall_ms;
        let smallness = schedule.as_ref().filter(|sc| sc.feasible && h >= 2).map(|sc| {
            (0..ctx.n()).all(|i| ctx.metric(i, &vec![0.0; ctx.n()], &sc.delta_hat[0]) <= sc.xi[1][i])
        });
        rep.solves.push(SolveRecord {
            k,
            t_k: t,
            horizon: h,
            feasible: sol.feasible,
            cost: sol.cost,
            evaluations: sol.evaluations,
            schedule_feasible: schedule.as_ref().is_some_and(|sc| sc.feasible),
            m_k: None,
            smallness,
            monotone: schedule.as_ref().is_some_and(|sc| sc.monotone),
            xi_first: schedule.as_ref().and_then(|sc| sc.xi.first().cloned()).unwrap_or_default(),
            schedule: schedule.clone(),
            wall_ms,
        });

        let feasible_schedule: Option<&TriggerSchedule> = schedule.as_ref().filter(|sc| sc.feasible);
        let Some(sc) = feasible_schedule else {
            // apply the whole plan and keep every sample
            rep.status = if !sol.feasible {
                if k == 0 {
                    PhaseStatus::InfeasibleStart
                } else {
                    rep.resolve_failures += 1;
                    PhaseStatus::InfeasibleResolve
                }
            } else {
                PhaseStatus::ScheduleInfeasible
            };
            for (j, u) in sol.inputs.iter().enumerate() {
                if t >= s.step_cap {
                    break;
                }
                let next = plant.step(&x, u, rng);
                rep.collected.push(&x, u, &next)?;
                rep.steps.push(StepRecord { t, x: x.clone(), u: u.clone(), mode, solve: j == 0, trigger: false, collected: true });
                x = next;
                t += 1;
                mark(&mut rep, t, &x);
                if !s.sim_domain.contains(&x) {
                    rep.status = PhaseStatus::Diverged;
                    break;
                }
            }
            break 'phase;
        };

        let t_k = t;
        let mut j = 0;
        loop {
            let u = &sol.inputs[j];
            let next = plant.step(&x, u, rng);
            let check = check_trigger(sc, &ctx, j + 1, &next, &sol.states[j + 1]);
            let keep = match s.collection {
                Collection::Always => true,
                Collection::Conditional => check.fire,
            };
            if keep {
                rep.collected.push(&x, u, &next)?;
            }
            rep.steps.push(StepRecord {
                t,
                x: x.clone(),
                u: u.clone(),
                mode,
                solve: j == 0,
                trigger: check.fire,
                collected: keep,
            });
            x = next;
            t += 1;
            j += 1;
            mark(&mut rep, t, &x);
            if !s.sim_domain.contains(&x) {
                rep.status = PhaseStatus::Diverged;
                break 'phase;
            }
            if check.fire {
                break;
            }
            if t >= s.step_cap {
                break 'phase;
            }
        }
        // trigger at j = m_k
        let m_k = t - t_k;
        rep.triggers += 1;
        if let Some(last) = rep.solves.last_mut() {
            last.m_k = Some(m_k);
        }
        let mut tail: Vec<Vec<f64>> = sol.inputs[m_k..].to_vec();
        let h_next = h - (m_k - 1);
        let x_end = &sol.states[sol.inputs.len()];
        let fill = ctrl
            .terminal
            .control(x_end)
            .unwrap_or_else(|| tail.last().cloned().unwrap_or_else(|| s.input_set.center()));
        tail.push(fill);
        tail.truncate(h_next);
        shifted = Some(tail);
        h = h_next;
        k += 1;
        if h == 1 && !ctrl.terminal.in_safe_set(&x) {
            rep.unit_horizon_violations += 1;
        }
    }
    rep.final_state = x;
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("state {state:?} left the safe set at step {step}")]
pub struct InvarianceViolation {
    pub step: usize,
    pub state: Vec<f64>,
}

/// Trajectory under the safety controller.
#[derive(Debug, Clone, PartialEq)]
pub struct DualModeTrace {
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub in_xf: Vec<bool>,
}

/// Applies `C(x)` for `steps` steps. Fails as soon as the state leaves `X_S`
/// or, after the first step, `X_f`.
pub fn dual_mode_run(
    plant: &PlantKind,
    terminal: &Terminal,
    x0: &[f64],
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DualModeTrace, InvarianceViolation> {
    let mut x = x0.to_vec();
    let mut tr = DualModeTrace { states: vec![x.clone()], inputs: Vec::new(), in_xf: vec![terminal.in_terminal(&x)] };
    for step in 0..steps {
        let Some(u) = terminal.control(&x) else {
            return Err(InvarianceViolation { step, state: x });
        };
        x = plant.step(&x, &u, rng);
        let inside = terminal.in_terminal(&x);
        if !inside {
            return Err(InvarianceViolation { step: step + 1, state: x });
        }
        tr.inputs.push(u);
        tr.states.push(x.clone());
        tr.in_xf.push(inside);
    }
    Ok(tr)
}

/// Configuration of the iterative task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSettings {
    pub plant: PlantKind,
    pub hyperparams: Hyperparams,
    pub abstraction: AbstractionConfig,
    pub gamma_policy: GammaPolicy,
    pub phase: PhaseSettings,
    pub initial_set: InitialSet,
    pub iterations: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub status: PhaseStatus,
    pub triggers: usize,
    pub solves: usize,
    /// Training-set size used by this iteration's model.
    pub data_points: usize,
    pub collected: usize,
    pub evaluations: usize,
    pub first_in_xs: Option<usize>,
    pub first_in_xf: Option<usize>,
    pub resolve_failures: usize,
    pub unit_horizon_violations: usize,
    pub safe_states: usize,
    pub terminal_states: usize,
    /// Wall time of OCP and threshold solves (not reproducible).
    pub solve_ms: f64,
    pub synth_ms: f64,
}

#[derive(Debug, Clone)]
pub struct IterationOutcome {
    pub summary: IterationSummary,
    pub synthesis: SynthesisReport,
    pub phase: PhaseReport,
    pub initial_state: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TaskReport {
    pub iterations: Vec<IterationOutcome>,
    pub final_data: Dataset,
    /// Set when an update phase failed; the run stops there.
    pub aborted: Option<String>,
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Symbolic(#[from] SymbolicError),
}

/// Alternates update and execution phases for the configured iterations.
pub fn iterative_task(cfg: &TaskSettings, initial: Dataset) -> Result<TaskReport, TaskError> {
    let mut data = initial;
    let mut out = TaskReport { iterations: Vec::new(), final_data: Dataset::new(data.n_x(), data.n_u()), aborted: None };
    for it in 0..cfg.iterations {
        let started = Instant::now();
        let model = GpModel::fit(&data, &cfg.hyperparams)?;
        let synth = synthesize(&model, &cfg.abstraction, cfg.gamma_policy);
        let synth_ms = started.elapsed().as_secs_f64() * 1e3;
        let (_, _, terminal, report) = match synth {
            Ok(v) => v,
            Err(e) => {
                let gt = crate::symbolic::contractive_radii(&cfg.hyperparams, &cfg.abstraction.eta_x, &cfg.abstraction.z)
                    .unwrap_or_default();
                let gb = crate::symbolic::gamma_bar_plateau(&model);
                let msg = format!("iteration {}: {e} (gamma_tilde {gt:?}, gamma_bar plateau {gb:?})", it + 1);
                log::error!("{msg}");
                out.aborted = Some(msg);
                break;
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(it as u64));
        let x0 = cfg.initial_set.sample(&cfg.plant, &mut rng);
        let ctrl = Controller { model: &model, terminal: &terminal, gamma: &report.gamma };
        let phase_settings = PhaseSettings {
            ocp: OcpSettings { seed: cfg.seed.wrapping_add((it as u64) << 32), ..cfg.phase.ocp.clone() },
            ..cfg.phase.clone()
        };
        let phase = execution_phase(&cfg.plant, &ctrl, &phase_settings, &x0, &mut rng)?;
        let summary = IterationSummary {
            iteration: it + 1,
            status: phase.status,
            triggers: phase.triggers,
            solves: phase.solves.len(),
            data_points: data.len(),
            collected: phase.collected.len(),
            evaluations: phase.evaluations,
            first_in_xs: phase.first_in_xs,
            first_in_xf: phase.first_in_xf,
            resolve_failures: phase.resolve_failures,
            unit_horizon_violations: phase.unit_horizon_violations,
            safe_states: report.safe,
            terminal_states: report.terminal,
            solve_ms: phase.solve_ms,
            synth_ms,
        };
        log::info!(
            "iteration {}: {} triggers, {} solves, {} data points (+{}), status {}",
            summary.iteration,
            summary.triggers,
            summary.solves,
            summary.data_points,
            summary.collected,
            summary.status.as_str()
        );
        data.extend(&phase.collected)?;
        out.iterations.push(IterationOutcome { summary, synthesis: report, phase, initial_state: x0 });
    }
    out.final_data = data;
    Ok(out)
}

/// Rolls a policy on the true plant to collect training data.
pub fn collect_with_policy(
    plant: &PlantKind,
    policy: impl Fn(&[f64], &mut ChaCha8Rng) -> Vec<f64>,
    starts: &[Vec<f64>],
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset, GpError> {
    let mut d = Dataset::new(plant.n_x(), plant.n_u());
    for x0 in starts {
        let mut x = x0.clone();
        for _ in 0..steps {
            let u = policy(&x, rng);
            let next = plant.step(&x, &u, rng);
            d.push(&x, &u, &next)?;
            x = next;
        }
    }
    Ok(d)
}

/// Predicted trajectory check used in tests: `x̂*` equals a fresh rollout.
pub fn replay_matches(model: &GpModel, sol: &OcpSolution) -> bool {
    rollout(model, &sol.states[0], &sol.inputs) == sol.states
}

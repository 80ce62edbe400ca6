//! Terminal-constrained finite-horizon OCP over a nominal model, solved by
//! cross-entropy sampling followed by coordinate-descent refinement.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::gp::GpModel;
use crate::metric::IntervalBox;
use crate::symbolic::Terminal;

/// One-step nominal model `x̂⁺ = f̂(x̂, u)`.
pub trait Dynamics {
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;
    fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64>;
}

impl Dynamics for GpModel {
    fn n_x(&self) -> usize {
        GpModel::n_x(self)
    }

    fn n_u(&self) -> usize {
        GpModel::n_u(self)
    }

    fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        self.mean_unchecked(x, u)
    }
}

/// Dynamics given by a closure.
pub struct FnDynamics<F> {
    pub n_x: usize,
    pub n_u: usize,
    pub f: F,
}

impl<F: Fn(&[f64], &[f64]) -> Vec<f64>> Dynamics for FnDynamics<F> {
    fn n_x(&self) -> usize {
        self.n_x
    }

    fn n_u(&self) -> usize {
        self.n_u
    }

    fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        (self.f)(x, u)
    }
}

/// Terminal constraint `x̂(H_k) ∈ X_f`.
pub trait TerminalRegion {
    fn contains(&self, x: &[f64]) -> bool;

    /// Nonnegative, zero exactly on the set. Guides the search while no
    /// feasible candidate is known.
    fn distance(&self, x: &[f64]) -> f64;
}

impl TerminalRegion for IntervalBox {
    fn contains(&self, x: &[f64]) -> bool {
        IntervalBox::contains(self, x)
    }

    fn distance(&self, x: &[f64]) -> f64 {
        let c = self.clamp(x);
        x.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }
}

impl TerminalRegion for Terminal {
    fn contains(&self, x: &[f64]) -> bool {
        self.in_terminal(x)
    }

    fn distance(&self, x: &[f64]) -> f64 {
        Terminal::distance(self, x)
    }
}

/// `h_s(x, u) = w_x ‖x‖ + w_u ‖u − u_ref‖` (Euclidean norms), or the squared
/// variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageCost {
    pub w_x: f64,
    pub w_u: f64,
    #[serde(default)]
    pub u_ref: Option<Vec<f64>>,
    #[serde(default)]
    pub squared: bool,
}

impl Default for StageCost {
    fn default() -> Self {
        Self { w_x: 1.0, w_u: 1.0, u_ref: None, squared: false }
    }
}

impl StageCost {
    pub fn eval(&self, x: &[f64], u: &[f64]) -> f64 {
        let nx: f64 = x.iter().map(|v| v * v).sum();
        let nu: f64 = match &self.u_ref {
            Some(r) => u.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum(),
            None => u.iter().map(|v| v * v).sum(),
        };
        if self.squared {
            self.w_x * nx + self.w_u * nu
        } else {
            self.w_x * nx.sqrt() + self.w_u * nu.sqrt()
        }
    }

    /// `Σ_{j<H} h_s(x̂(j), u(j))`.
    pub fn total(&self, states: &[Vec<f64>], inputs: &[Vec<f64>]) -> f64 {
        inputs.iter().zip(states).map(|(u, x)| self.eval(x, u)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcpSettings {
    /// Maximum number of candidate rollouts per solve.
    pub budget: usize,
    pub population: usize,
    pub elites: usize,
    /// Fraction of the budget spent in the sampling phase.
    pub sampling_share: f64,
    /// Initial sampling spread as a fraction of each input range.
    pub init_spread: f64,
    /// Coordinate-descent stops once the step drops below this fraction of
    /// the input range.
    pub min_step: f64,
    pub seed: u64,
}

impl Default for OcpSettings {
    fn default() -> Self {
        Self {
            budget: 20_000,
            population: 64,
            elites: 8,
            sampling_share: 0.5,
            init_spread: 0.3,
            min_step: 1e-9,
            seed: 0,
        }
    }
}

pub struct OcpProblem<'a> {
    pub x0: &'a [f64],
    pub horizon: usize,
    pub cost: &'a StageCost,
    pub input_set: &'a IntervalBox,
    pub terminal: &'a dyn TerminalRegion,
    pub model: &'a dyn Dynamics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OcpSolution {
    pub inputs: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    pub cost: f64,
    pub feasible: bool,
    /// Terminal distance of the returned candidate.
    pub terminal_distance: f64,
    pub evaluations: usize,
    pub iterations: usize,
    pub wall_ms: f64,
}

/// `x̂(0) = x0`, `x̂(j+1) = f̂(x̂(j), u(j))`.
pub fn rollout(model: &dyn Dynamics, x0: &[f64], inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len() + 1);
    out.push(x0.to_vec());
    for u in inputs {
        let next = model.step(out.last().expect("nonempty"), u);
        out.push(next);
    }
    out
}

/// Per-solve RNG seed from the run seed and the solve time.
pub fn solve_seed(seed: u64, t_k: usize) -> u64 {
    seed ^ (t_k as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone)]
struct Candidate {
    inputs: Vec<Vec<f64>>,
    states: Vec<Vec<f64>>,
    cost: f64,
    dist: f64,
}

impl Candidate {
    fn feasible(&self) -> bool {
        self.dist == 0.0
    }

    /// Feasible candidates first by cost, then infeasible by distance.
    fn better_than(&self, other: &Candidate) -> bool {
        match (self.feasible(), other.feasible()) {
            (true, false) => true,
            (false, true) => false,
            (true, true) => self.cost < other.cost,
            (false, false) => self.dist < other.dist || (self.dist == other.dist && self.cost < other.cost),
        }
    }
}

struct Evaluator<'a, 'b> {
    p: &'b OcpProblem<'a>,
    evaluations: usize,
}

impl Evaluator<'_, '_> {
    fn eval(&mut self, inputs: Vec<Vec<f64>>) -> Candidate {
        self.evaluations += 1;
        let states = rollout(self.p.model, self.p.x0, &inputs);
        let last = states.last().expect("nonempty");
        let dist = if self.p.terminal.contains(last) { 0.0 } else { self.p.terminal.distance(last).max(f64::MIN_POSITIVE) };
        let cost = self.p.cost.total(&states, &inputs);
        Candidate { inputs, states, cost, dist }
    }
}

/// Solves the OCP. The warm start is projected onto `U` and padded with the
/// midpoint of `U` when too short.
pub fn solve(problem: &OcpProblem<'_>, warm_start: Option<&[Vec<f64>]>, settings: &OcpSettings) -> OcpSolution {
    let starts: Vec<Vec<Vec<f64>>> = warm_start.map(|w| vec![w.to_vec()]).unwrap_or_default();
    solve_multi(problem, &starts, settings)
}

/// [`solve`] with several initial guesses.
pub fn solve_multi(problem: &OcpProblem<'_>, warm_starts: &[Vec<Vec<f64>>], settings: &OcpSettings) -> OcpSolution {
    let start = Instant::now();
    let h = problem.horizon.max(1);
    let u = problem.input_set;
    let n_u = u.dim();
    let mid = u.center();
    let mut ev = Evaluator { p: problem, evaluations: 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);

    let mut best = ev.eval(vec![mid.clone(); h]);
    for ws in warm_starts {
        let seq: Vec<Vec<f64>> = (0..h).map(|j| u.clamp(ws.get(j).unwrap_or(&mid))).collect();
        let c = ev.eval(seq);
        if c.better_than(&best) {
            best = c;
        }
    }

    // sampling phase
    let range: Vec<f64> = (0..n_u).map(|p| u.width(p)).collect();
    let mut mean = best.inputs.clone();
    let mut std: Vec<Vec<f64>> = vec![range.iter().map(|r| r * settings.init_spread).collect(); h];
    let sampling_budget = (settings.budget as f64 * settings.sampling_share) as usize;
    let pop = settings.population.max(2);
    let elites = settings.elites.clamp(1, pop);
    let mut iterations = 0;
    while ev.evaluations + pop <= sampling_budget {
        iterations += 1;
        let mut batch: Vec<Candidate> = (0..pop)
            .map(|_| {
                let seq = (0..h)
                    .map(|j| {
                        let v: Vec<f64> = (0..n_u)
                            .map(|p| mean[j][p] + std[j][p] * rng.sample::<f64, _>(StandardNormal))
                            .collect();
                        u.clamp(&v)
                    })
                    .collect();
                ev.eval(seq)
            })
            .collect();
        batch.sort_by(|a, b| {
            if a.better_than(b) {
                std::cmp::Ordering::Less
            } else if b.better_than(a) {
                std::cmp::Ordering::Greater
            } else {
                std::cmp::Ordering::Equal
            }
        });
        if batch[0].better_than(&best) {
            best = batch[0].clone();
        }
        // refit around the elites, anchored by the incumbent
        let top = &batch[..elites];
        for j in 0..h {
            for p in 0..n_u {
                let vals: Vec<f64> = top.iter().map(|c| c.inputs[j][p]).chain([best.inputs[j][p]]).collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
                mean[j][p] = 0.3 * mean[j][p] + 0.7 * m;
                std[j][p] = (0.3 * std[j][p] + 0.7 * var.sqrt()).max(1e-6 * range[p]);
            }
        }
        if std.iter().flatten().zip(range.iter().cycle()).all(|(s, r)| *s < 1e-4 * r) {
            break;
        }
    }

    // coordinate descent with shrinking steps, projected onto U
    let mut step = 0.25;
    'outer: while step >= settings.min_step {
        let mut improved = false;
        for j in 0..h {
            for p in 0..n_u {
                for sign in [-1.0, 1.0] {
                    if ev.evaluations >= settings.budget {
                        break 'outer;
                    }
                    let mut seq = best.inputs.clone();
                    let v = (seq[j][p] + sign * step * range[p]).clamp(u.lower[p], u.upper[p]);
                    if v == seq[j][p] {
                        continue;
                    }
                    seq[j][p] = v;
                    let c = ev.eval(seq);
                    if c.better_than(&best) {
                        best = c;
                        improved = true;
                    }
                }
            }
        }
        iterations += 1;
        if !improved {
            step *= 0.5;
        }
    }

    let feasible = best.feasible();
    OcpSolution {
        cost: best.cost,
        feasible,
        terminal_distance: best.dist,
        inputs: best.inputs,
        states: best.states,
        evaluations: ev.evaluations,
        iterations,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

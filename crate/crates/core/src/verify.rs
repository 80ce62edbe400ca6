//! Runtime property suites behind `verify`: each compares an implementation
//! against a brute-force check on randomly drawn instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::game::{solve_safety, ExplicitSystem};
use crate::gp::{Dataset, GpModel, Hyperparams, OutputParams};
use crate::lattice::{int_shrink, out_grow, Lattice, LatticeSet, Stencil};
use crate::metric::{enclosure, IntervalBox, MetricContext};
use crate::plant::KernelExpansion;
use crate::symbolic::contractive_radii;
use crate::trigger::{GpObjective, GpStep};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    pub failures: usize,
    pub detail: String,
}

impl SuiteResult {
    fn new(name: &'static str, cases: usize, failures: usize, detail: String) -> Self {
        Self { name, passed: failures == 0, cases, failures, detail }
    }
}

pub const SUITES: &[&str] = &["metric-axioms", "error-bound", "int-out-duality", "safety-game", "threshold-program"];

pub fn run_suite(name: &str, seed: u64) -> Option<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Some(match name {
        "metric-axioms" => metric_axioms(&mut rng),
        "error-bound" => error_bound(&mut rng),
        "int-out-duality" => int_out_duality(&mut rng),
        "safety-game" => safety_game(&mut rng),
        "threshold-program" => threshold_program(&mut rng),
        _ => return None,
    })
}

pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    SUITES.iter().filter_map(|s| run_suite(s, seed)).collect()
}

fn random_hp(rng: &mut ChaCha8Rng, n_x: usize, n_u: usize) -> Hyperparams {
    Hyperparams {
        n_x,
        n_u,
        outputs: (0..n_x)
            .map(|_| OutputParams {
                alpha: rng.random_range(0.5..2.0),
                lengthscales: (0..n_x + n_u).map(|_| rng.random_range(0.3..2.0)).collect(),
                b: 1.0,
                sigma_w: 0.01,
            })
            .collect(),
    }
}

fn metric_axioms(rng: &mut ChaCha8Rng) -> SuiteResult {
    let mut failures = 0;
    let trials = 1000;
    for _ in 0..trials {
        let n = rng.random_range(1..=4);
        let ctx = MetricContext::new(&random_hp(rng, n, 1));
        let pt = |rng: &mut ChaCha8Rng| (0..n).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>();
        let (a, b, c) = (pt(rng), pt(rng), pt(rng));
        for i in 0..n {
            let ab = ctx.metric(i, &a, &b);
            let ok = ctx.metric(i, &a, &a) == 0.0
                && (ab - ctx.metric(i, &b, &a)).abs() <= 1e-12
                && ab <= ctx.metric(i, &a, &c) + ctx.metric(i, &c, &b) + 1e-12
                && ab <= ctx.sup(i);
            failures += usize::from(!ok);
        }
    }
    SuiteResult::new("metric-axioms", trials, failures, "identity, symmetry, triangle, supremum".into())
}

fn error_bound(rng: &mut ChaCha8Rng) -> SuiteResult {
    let mut failures = 0;
    let (functions, queries) = (50, 1000);
    for _ in 0..functions {
        let hp = random_hp(rng, 1, 1);
        let p = &hp.outputs[0];
        let centers: Vec<Vec<f64>> = (0..5).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let mut f = KernelExpansion {
            n_x: 1,
            n_u: 1,
            alpha: vec![p.alpha],
            lengthscales: vec![p.lengthscales.clone()],
            centers,
            weights: vec![(0..5).map(|_| rng.random_range(-1.0..1.0)).collect()],
            sigma_w: vec![p.sigma_w],
        };
        let norm = f.rkhs_norm(0);
        let b = 0.9 * p.b;
        for w in &mut f.weights[0] {
            *w *= b / norm;
        }
        let mut data = Dataset::new(1, 1);
        for _ in 0..30 {
            let z = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let y = f.eval(0, &z) + rng.random_range(-p.sigma_w..=p.sigma_w);
            data.push(&z[..1], &z[1..], &[y]).expect("dims match");
        }
        let Ok(model) = GpModel::fit(&data, &hp) else {
            failures += 1;
            continue;
        };
        for _ in 0..queries {
            let z = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let bx = enclosure(&model, &z[..1], &z[1..]).expect("dims match");
            failures += usize::from(!bx.contains(&[f.eval(0, &z)]));
        }
    }
    SuiteResult::new("error-bound", functions * queries, failures, "true value inside the enclosure".into())
}

fn random_set(rng: &mut ChaCha8Rng, len: usize, p: f64) -> LatticeSet {
    LatticeSet::from_bits((0..len).map(|_| rng.random_bool(p)).collect())
}

fn int_out_duality(rng: &mut ChaCha8Rng) -> SuiteResult {
    let mut failures = 0;
    let pairs = 200;
    for _ in 0..pairs {
        let n = rng.random_range(1..=2);
        let hp = random_hp(rng, n, 1);
        let ctx = MetricContext::new(&hp);
        let eta = vec![0.1; n];
        let lattice = Lattice::new(&eta, &IntervalBox::symmetric(&vec![1.0; n])).expect("valid lattice");
        let z: Vec<u32> = (0..n).map(|_| rng.random_range(1..=2)).collect();
        let Ok(gt) = contractive_radii(&hp, &eta, &z) else { continue };
        let stencil = Stencil::ball(&lattice, &ctx, &gt).expect("radius below supremum");
        let q2 = random_set(rng, lattice.len(), 0.9);
        let q1 = if rng.random_bool(0.5) {
            // subsets of the interior exercise the positive direction
            let inner = int_shrink(&lattice, &q2, &stencil);
            LatticeSet::from_indices(lattice.len(), inner.iter().filter(|_| rng.random_bool(0.7)))
        } else {
            random_set(rng, lattice.len(), 0.1)
        };
        let lhs = q1.is_subset(&int_shrink(&lattice, &q2, &stencil));
        let rhs = out_grow(&lattice, &q1, &stencil).is_subset(&q2);
        failures += usize::from(lhs != rhs);
    }
    SuiteResult::new("int-out-duality", pairs, failures, "interior inclusion iff dilation inclusion".into())
}

/// Least fixed point of the losing region, the complement of the safe set.
fn brute_force_safe(sys: &ExplicitSystem, n_states: usize, q0: &LatticeSet) -> LatticeSet {
    let mut losing: Vec<bool> = (0..n_states).map(|x| !q0.contains(x)).collect();
    loop {
        let mut changed = false;
        for x in 0..n_states {
            if losing[x] {
                continue;
            }
            let escapes = (0..sys.n_inputs()).all(|u| match sys.successors(x, u) {
                None => true,
                Some(s) => s.iter().any(|&y| losing[y]),
            });
            if escapes {
                losing[x] = true;
                changed = true;
            }
        }
        if !changed {
            return LatticeSet::from_bits(losing.into_iter().map(|l| !l).collect());
        }
    }
}

pub fn random_system(rng: &mut ChaCha8Rng, n_states: usize, n_inputs: usize) -> ExplicitSystem {
    let mut sys = ExplicitSystem::new(n_states, n_inputs);
    for x in 0..n_states {
        for u in 0..n_inputs {
            if rng.random_bool(0.15) {
                continue;
            }
            let k = rng.random_range(1..=3);
            sys.set(x, u, Some((0..k).map(|_| rng.random_range(0..n_states)).collect()));
        }
    }
    sys
}

fn safety_game(rng: &mut ChaCha8Rng) -> SuiteResult {
    let mut failures = 0;
    let systems = 50;
    for _ in 0..systems {
        let n_states = rng.random_range(2..=500);
        let n_inputs = rng.random_range(1..=8);
        let sys = random_system(rng, n_states, n_inputs);
        let q0 = random_set(rng, n_states, 0.8);
        let got = solve_safety(&sys, &q0).set;
        failures += usize::from(got != brute_force_safe(&sys, n_states, &q0));
    }
    SuiteResult::new("safety-game", systems, failures, "fixed point equals the brute-force solver".into())
}

/// Dense grid over the first `n − 1` coordinates; the last coordinate takes
/// its largest feasible value, which is optimal for both objectives.
pub fn grid_oracle(step: &GpStep, kind: GpObjective, per_axis: usize) -> Option<f64> {
    let n = step.lo.len();
    if !step.is_feasible() {
        return None;
    }
    let last = n - 1;
    let mut best = f64::NEG_INFINITY;
    let mut idx = vec![0usize; last];
    loop {
        let mut psi: Vec<f64> = (0..last)
            .map(|p| step.lo[p] + (step.hi[p] - step.lo[p]) * idx[p] as f64 / (per_axis - 1).max(1) as f64)
            .collect();
        psi.push(0.0);
        let mut hi = step.hi[last];
        for i in 0..step.c.len() {
            let rest: f64 = (0..last).map(|p| step.a[i][p] * psi[p] * psi[p]).sum();
            let room = step.c[i] * step.c[i] - rest;
            hi = if room < 0.0 { f64::NEG_INFINITY } else { hi.min((room / step.a[i][last]).sqrt()) };
        }
        if hi >= step.lo[last] {
            psi[last] = hi;
            best = best.max(step.objective(kind, &psi));
        }
        let mut j = 0;
        loop {
            if j == last {
                return Some(best);
            }
            idx[j] += 1;
            if idx[j] < per_axis {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
}

fn threshold_program(rng: &mut ChaCha8Rng) -> SuiteResult {
    let mut failures = 0;
    let instances = 100;
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.random_range(1..=4);
        let step = random_step(rng, n);
        let got = step.solve(GpObjective::Product);
        let oracle = grid_oracle(&step, GpObjective::Product, grid_size(n));
        match (got, oracle) {
            (None, None) => {}
            (Some(p), Some(o)) => {
                let v = step.objective(GpObjective::Product, &p);
                let gap = (o - v) / o.abs().max(1e-300);
                worst = worst.max(gap);
                failures += usize::from(gap > 1e-3 || !step.feasible(&p, 1e-8));
            }
            _ => failures += 1,
        }
    }
    SuiteResult::new("threshold-program", instances, failures, format!("worst relative gap {worst:.2e}"))
}

pub fn grid_size(n: usize) -> usize {
    match n {
        1 => 2,
        2 => 20001,
        3 => 801,
        _ => 121,
    }
}

pub fn random_step(rng: &mut ChaCha8Rng, n: usize) -> GpStep {
    let hp = Hyperparams {
        n_x: n,
        n_u: 1,
        outputs: (0..n)
            .map(|_| OutputParams {
                alpha: rng.random_range(0.5..2.0),
                lengthscales: (0..=n).map(|_| rng.random_range(0.5..3.0)).collect(),
                b: rng.random_range(0.3..1.5),
                sigma_w: 0.01,
            })
            .collect(),
    };
    let ctx = MetricContext::new(&hp);
    let delta: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.3)).collect();
    let c: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.5)).collect();
    GpStep::new(&ctx, &delta, &c, 1e-3)
}

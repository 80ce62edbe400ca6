use etmpc::config::RunConfig;
use etmpc::gp::{Dataset, GpModel, Hyperparams, OutputParams};
use etmpc::metric::MetricContext;
use etmpc::ocp::rollout;
use etmpc::symbolic::contractive_radii;
use etmpc::trigger::{build_schedule, c_step, c_terminal, check_trigger, solve_gp_step, GpObjective, GpStep};
use proptest::prelude::*;

fn hp(n: usize, alpha: f64, ls: f64, b: f64) -> Hyperparams {
    Hyperparams::uniform(n, 1, OutputParams { alpha, lengthscales: vec![ls; n + 1], b, sigma_w: 0.002 })
}

#[test]
fn terminal_radius_is_one_at_half_log() {
    for alpha in [0.5, 1.0, 3.0] {
        let g = (2.0 * alpha * alpha * (1.0 - (-0.5f64).exp())).sqrt();
        let h = hp(1, alpha, 1.0, 1.0);
        assert!((c_terminal(&h, &[g]).unwrap()[0] - 1.0).abs() < 1e-12);
        assert!((c_step(&h, &[g]).unwrap()[0] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn terminal_radius_limits() {
    let h = hp(1, 1.0, 1.0, 1.0);
    for f in [c_terminal, c_step] {
        assert!(f(&h, &[1e-9]).unwrap()[0] < 1e-8);
        let near = f(&h, &[2f64.sqrt() * (1.0 - 1e-12)]).unwrap()[0];
        assert!(near > 7.0);
        assert!(f(&h, &[2f64.sqrt()]).is_err());
        assert!(f(&h, &[2.0]).is_err());
    }
}

#[test]
fn scalar_program_saturates() {
    let h = hp(1, 1.0, 1.0, 1.0);
    let cap = 2f64.sqrt() - 1e-3;
    for c in [0.1, 0.7, 1.2, 5.0] {
        let psi = solve_gp_step(&h, &[0.0], &[c], 1e-3, GpObjective::Product).unwrap();
        assert!((psi[0] - c.min(cap)).abs() < 1e-8, "c = {c}: {}", psi[0]);
    }
}

#[test]
fn infeasible_lower_corner() {
    let h = hp(1, 1.0, 1.0, 1.0);
    assert!(solve_gp_step(&h, &[0.5], &[0.4], 1e-3, GpObjective::Product).is_none());
    assert!(solve_gp_step(&h, &[0.5], &[0.5], 1e-3, GpObjective::Product).is_some());
    let h2 = hp(2, 1.0, 1.0, 1.0);
    assert!(solve_gp_step(&h2, &[0.3, 0.3], &[0.4, 0.4], 1e-3, GpObjective::Product).is_none());
}

#[test]
fn symmetric_planar_instance_matches_grid() {
    let (ls, b, c) = (1.3, 0.8, 0.6);
    let h = hp(2, 1.0, ls, b);
    let psi = solve_gp_step(&h, &[0.0, 0.0], &[c, c], 1e-3, GpObjective::Product).unwrap();
    let expect = c * ls / (b * 2f64.sqrt());
    assert!((psi[0] - psi[1]).abs() < 1e-8);
    assert!((psi[0] - expect).abs() < 1e-6);

    let step = GpStep::new(&MetricContext::new(&h), &[0.0, 0.0], &[c, c], 1e-3);
    let n = 2000;
    let top = step.hi[0];
    let mut best = (0.0, 0.0, 0.0);
    for a in 0..=n {
        for q in 0..=n {
            let v = [top * a as f64 / n as f64, top * q as f64 / n as f64];
            if step.feasible(&v, 0.0) && v[0] * v[1] > best.0 {
                best = (v[0] * v[1], v[0], v[1]);
            }
        }
    }
    assert!((best.1 - psi[0]).abs() < 1e-3 && (best.2 - psi[1]).abs() < 1e-3);
    assert!(psi[0] * psi[1] >= best.0 - 1e-12);
}

fn toy_model() -> (RunConfig, GpModel) {
    let cfg = RunConfig::preset("toy-1d").unwrap();
    let m = GpModel::fit(&cfg.initial_dataset().unwrap(), &cfg.hyperparams).unwrap();
    (cfg, m)
}

fn toy_plan(m: &GpModel, x0: f64, h: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut x = vec![x0];
    let mut inputs = Vec::new();
    for _ in 0..h {
        let u = vec![(-0.6 * x[0]).clamp(-1.0, 1.0)];
        x = m.predict_mean(&x, &u).unwrap();
        inputs.push(u);
    }
    (rollout(m, &[x0], &inputs), inputs)
}

#[test]
fn single_step_schedule_uses_terminal_radius() {
    let (cfg, m) = toy_model();
    let gamma = contractive_radii(&cfg.hyperparams, &cfg.abstraction.eta_x, &cfg.abstraction.z).unwrap();
    let (states, inputs) = toy_plan(&m, 0.4, 1);
    let sc = build_schedule(&m, &states, &inputs, &gamma, 1e-3, GpObjective::Product).unwrap();
    assert!(sc.feasible);
    assert_eq!(sc.horizon, 1);
    assert_eq!(sc.c[0], c_terminal(&cfg.hyperparams, &gamma).unwrap());
}

#[test]
fn learned_toy_schedule_is_feasible_and_positive() {
    let (cfg, m) = toy_model();
    let gamma = contractive_radii(&cfg.hyperparams, &cfg.abstraction.eta_x, &cfg.abstraction.z).unwrap();
    let (states, inputs) = toy_plan(&m, 2.5, 10);
    let sc = build_schedule(&m, &states, &inputs, &gamma, 1e-3, GpObjective::Product).unwrap();
    assert!(sc.feasible, "infeasible at {:?}", sc.infeasible_at);
    assert!(sc.xi.iter().flatten().all(|v| *v > 0.0));
    let b = cfg.hyperparams.outputs[0].b;
    for j in 0..sc.horizon {
        assert!((sc.xi[j][0] - (sc.psi[j][0] - sc.delta_hat[j][0] / b)).abs() < 1e-12);
        assert!(b * b * sc.psi[j][0] * sc.psi[j][0] / 6.25 <= sc.c[j][0] * sc.c[j][0] + 1e-8);
    }
    assert_eq!(sc.xi_at(sc.horizon, 0), -1.0);
}

#[test]
fn untrained_model_fails_at_last_step() {
    let (cfg, _) = toy_model();
    let mut d = Dataset::new(1, 1);
    d.push(&[50.0], &[0.0], &[0.0]).unwrap();
    let m = GpModel::fit(&d, &cfg.hyperparams).unwrap();
    let gamma = contractive_radii(&cfg.hyperparams, &cfg.abstraction.eta_x, &cfg.abstraction.z).unwrap();
    let (states, inputs) = toy_plan(&m, 0.5, 6);
    let sc = build_schedule(&m, &states, &inputs, &gamma, 1e-3, GpObjective::Product).unwrap();
    assert!(!sc.feasible);
    assert_eq!(sc.infeasible_at, Some(5));
}

#[test]
fn trigger_holds_at_start_and_fires_at_horizon() {
    let (cfg, m) = toy_model();
    let gamma = contractive_radii(&cfg.hyperparams, &cfg.abstraction.eta_x, &cfg.abstraction.z).unwrap();
    let (states, inputs) = toy_plan(&m, 2.5, 10);
    let sc = build_schedule(&m, &states, &inputs, &gamma, 1e-3, GpObjective::Product).unwrap();
    let ctx = MetricContext::new(&cfg.hyperparams);
    assert!(!check_trigger(&sc, &ctx, 0, &states[0], &states[0]).fire);
    assert!(check_trigger(&sc, &ctx, 10, &states[10], &states[10]).fire);
}

#[test]
fn trigger_fires_exactly_at_crossing() {
    let (cfg, m) = toy_model();
    let gamma = contractive_radii(&cfg.hyperparams, &cfg.abstraction.eta_x, &cfg.abstraction.z).unwrap();
    let (states, inputs) = toy_plan(&m, 2.5, 10);
    let sc = build_schedule(&m, &states, &inputs, &gamma, 1e-3, GpObjective::Product).unwrap();
    let ctx = MetricContext::new(&cfg.hyperparams);
    let (alpha, ls) = (1.0, 2.5);
    for j in 1..10 {
        let xi = sc.xi[j][0];
        let crossing = ls * (-2.0 * (1.0 - xi * xi / (2.0 * alpha * alpha)).ln()).sqrt();
        let fires = |s: f64| check_trigger(&sc, &ctx, j, &[states[j][0] + s], &states[j]).fire;
        let (mut lo, mut hi) = (0.0, 1.0);
        assert!(!fires(lo) && fires(hi));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if fires(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!((hi - crossing).abs() < 1e-9 * (1.0 + crossing), "j = {j}: {hi} vs {crossing}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn radii_grow_backward_when_lengthscale_dominates(
        n in 1usize..=3,
        alpha in 0.5..2.0f64,
        b in 0.2..1.0f64,
        ratio in 1.0..3.0f64,
        gfrac in 0.01..0.9f64,
        dh in prop::collection::vec(0.0..0.02f64, 1..12),
    ) {
        let ls = ratio * b * alpha * (n as f64).sqrt();
        let h = hp(n, alpha, ls, b);
        let mut d = Dataset::new(n, 1);
        d.push(&vec![0.0; n], &[0.0], &vec![0.0; n]).unwrap();
        let m = GpModel::fit(&d, &h).unwrap();
        let gamma = vec![gfrac * (2f64.sqrt() * alpha - 1e-3); n];
        let ctx = MetricContext::new(&h);
        // replay the recursion with the prescribed δ̂ instead of the model's
        let mut next = c_terminal(&h, &gamma).unwrap();
        let mut cs = vec![next.clone()];
        let mut ok = true;
        for &v in dh.iter().rev() {
            match GpStep::new(&ctx, &vec![v; n], &next, 1e-3).solve(GpObjective::Product) {
                Some(p) => {
                    next = c_step(&h, &p).unwrap();
                    cs.push(next.clone());
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            for w in cs.windows(2) {
                for i in 0..n {
                    prop_assert!(w[1][i] >= w[0][i] * (1.0 - 1e-9), "{:?}", cs);
                }
            }
        }
        // same property through build_schedule on an uninformative model
        let states = vec![vec![0.0; n]; dh.len() + 1];
        let inputs = vec![vec![0.0]; dh.len()];
        let sc = build_schedule(&m, &states, &inputs, &gamma, 1e-3, GpObjective::Product).unwrap();
        if sc.feasible {
            prop_assert!(sc.monotone);
        }
    }

    #[test]
    fn program_solution_is_feasible_and_beats_random_points(
        n in 1usize..=4,
        seed in 0u64..10_000,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let step = etmpc::verify::random_step(&mut rng, n);
        match step.solve(GpObjective::Product) {
            None => prop_assert!(!step.is_feasible()),
            Some(p) => {
                prop_assert!(step.feasible(&p, 1e-8));
                let best = step.objective(GpObjective::Product, &p);
                for _ in 0..200 {
                    let v: Vec<f64> = (0..n).map(|q| rng.random_range(step.lo[q]..=step.hi[q].max(step.lo[q]))).collect();
                    if step.feasible(&v, 0.0) {
                        prop_assert!(step.objective(GpObjective::Product, &v) <= best * (1.0 + 1e-6));
                    }
                }
            }
        }
    }
}

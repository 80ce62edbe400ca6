use etmpc::closed_loop::{
    dual_mode_run, execution_phase, iterative_task, Collection, Controller, Mode, PhaseReport, PhaseStatus, PlantKind,
};
use etmpc::config::RunConfig;
use etmpc::gp::GpModel;
use etmpc::metric::IntervalBox;
use etmpc::plant::sample_box;
use etmpc::symbolic::{synthesize, Terminal};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Toy {
    cfg: RunConfig,
    model: GpModel,
    terminal: Terminal,
    gamma: Vec<f64>,
}

fn toy() -> Toy {
    toy_within(1.0)
}

fn toy_within(spec: f64) -> Toy {
    let mut cfg = RunConfig::preset("toy-1d").unwrap();
    cfg.abstraction.spec_set = IntervalBox::symmetric(&[spec]);
    let model = GpModel::fit(&cfg.initial_dataset().unwrap(), &cfg.hyperparams).unwrap();
    let (_, _, terminal, report) = synthesize(&model, &cfg.abstraction, cfg.gamma_policy).unwrap();
    Toy { cfg, model, terminal, gamma: report.gamma }
}

/// The toy plant with a larger disturbance than the model assumes, so that
/// triggers fire before the end of the horizon.
fn jolted(cfg: &RunConfig, sigma: f64) -> PlantKind {
    let PlantKind::Kernel(mut k) = cfg.plant.clone() else { unreachable!() };
    k.sigma_w = vec![sigma];
    PlantKind::Kernel(k)
}

fn phase(t: &Toy, plant: &PlantKind, x0: f64, seed: u64, collection: Collection) -> PhaseReport {
    phase_within(t, plant, x0, seed, collection, None)
}

fn phase_within(t: &Toy, plant: &PlantKind, x0: f64, seed: u64, collection: Collection, u_max: Option<f64>) -> PhaseReport {
    let ctrl = Controller { model: &t.model, terminal: &t.terminal, gamma: &t.gamma };
    let mut s = t.cfg.task().phase;
    s.collection = collection;
    if let Some(u) = u_max {
        s.input_set = IntervalBox::symmetric(&[u]);
    }
    s.ocp.seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    execution_phase(plant, &ctrl, &s, &[x0], &mut rng).unwrap()
}

#[test]
fn horizon_telescopes_over_triggers() {
    // small target and slow inputs keep the state outside X_S for a few steps
    let t = toy_within(0.2);
    let h0 = t.cfg.controller.horizon;
    let mut shrunk = 0;
    for sigma in [0.03, 0.05] {
        let plant = jolted(&t.cfg, sigma);
        for seed in 0..8 {
            let rep = phase_within(&t, &plant, 2.5, seed, Collection::Conditional, Some(0.05));
            let mut consumed = 0;
            for s in &rep.solves {
                assert_eq!(s.horizon, h0 - consumed, "seed {seed}");
                assert!(s.feasible);
                if let Some(m) = s.m_k {
                    assert!(m >= 1 && m <= s.horizon);
                    consumed += m - 1;
                }
            }
            assert_eq!(rep.resolve_failures, 0);
            shrunk += usize::from(rep.solves.last().unwrap().horizon < h0);
        }
    }
    assert!(shrunk > 0, "no re-solve with a shortened horizon");
}

#[test]
fn conditional_collection_keeps_only_fired_samples() {
    let t = toy_within(0.2);
    let plant = jolted(&t.cfg, 0.03);
    for seed in 0..10 {
        let rep = phase_within(&t, &plant, 2.2, seed, Collection::Conditional, Some(0.05));
        let bulk = matches!(rep.status, PhaseStatus::ScheduleInfeasible | PhaseStatus::InfeasibleResolve | PhaseStatus::InfeasibleStart);
        let fired = rep.steps.iter().filter(|s| s.trigger).count();
        let kept = rep.steps.iter().filter(|s| s.collected).count();
        assert_eq!(kept, rep.collected.len());
        if !bulk {
            assert!(rep.steps.iter().all(|s| s.collected == s.trigger));
            assert_eq!(kept, fired);
            assert_eq!(rep.triggers, fired);
        }
    }
}

#[test]
fn always_collection_keeps_every_mpc_sample() {
    let t = toy();
    let rep = phase(&t, &t.cfg.plant, 2.5, 1, Collection::Always);
    let mpc = rep.steps.iter().filter(|s| s.mode == Mode::Mpc).count();
    assert_eq!(rep.collected.len(), mpc);
}

#[test]
fn safe_mode_is_permanent() {
    let t = toy();
    let plant = jolted(&t.cfg, 0.01);
    for seed in 0..10 {
        let rep = phase(&t, &plant, 2.0 + 0.1 * seed as f64, seed, Collection::Conditional);
        if let Some(first) = rep.steps.iter().position(|s| s.mode == Mode::Safe) {
            assert!(rep.steps[first..].iter().all(|s| s.mode == Mode::Safe));
        }
        assert_eq!(rep.unit_horizon_violations, 0);
    }
}

#[test]
fn safety_controller_keeps_terminal_set_invariant() {
    let t = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dom = IntervalBox::symmetric(&[1.0]);
    let (mut from_xf, mut from_xs) = (0, 0);
    while from_xf + from_xs < 100 {
        let x = sample_box(&dom, &mut rng);
        if !t.terminal.in_safe_set(&x) {
            continue;
        }
        let tr = dual_mode_run(&t.cfg.plant, &t.terminal, &x, 100, &mut rng).unwrap();
        assert!(tr.in_xf[1..].iter().all(|b| *b));
        if t.terminal.in_terminal(&x) {
            from_xf += 1;
        } else {
            from_xs += 1;
        }
    }
    assert!(from_xf > 0);
}

#[test]
fn data_grows_by_collected_samples() {
    let mut cfg = RunConfig::preset("toy-1d").unwrap();
    cfg.iterations = 3;
    let start = cfg.initial_dataset().unwrap().len();
    let rep = iterative_task(&cfg.task(), cfg.initial_dataset().unwrap()).unwrap();
    let mut n = start;
    for it in &rep.iterations {
        assert_eq!(it.summary.data_points, n);
        n += it.summary.collected;
    }
    assert_eq!(rep.final_data.len(), n);
}

#[test]
fn reaching_safe_set_ends_mpc() {
    let t = toy();
    let rep = phase(&t, &t.cfg.plant, 2.5, 3, Collection::Conditional);
    assert_eq!(rep.status, PhaseStatus::ReachedSafe);
    assert_eq!(rep.resolve_failures, 0);
    let k = rep.steps.iter().position(|s| s.mode == Mode::Safe).unwrap();
    assert!(t.terminal.in_safe_set(&rep.steps[k].x));
}

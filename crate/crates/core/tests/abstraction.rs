use etmpc::config::RunConfig;
use etmpc::game::{solve_safety, ExplicitSystem};
use etmpc::gp::{Dataset, GpModel, Hyperparams, OutputParams};
use etmpc::lattice::{int_shrink, out_grow, Lattice, LatticeSet, Stencil};
use etmpc::metric::{IntervalBox, MetricContext};
use etmpc::plant::Plant;
use etmpc::symbolic::{
    contractive_radii, safety_game, synthesize, AbstractionConfig, EpsilonPolicy, GammaPolicy, SymbolicModel,
};
use etmpc::verify::random_system;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn hp(n: usize, alpha: f64, ls: f64, b: f64, sigma_w: f64) -> Hyperparams {
    Hyperparams::uniform(n, 1, OutputParams { alpha, lengthscales: vec![ls; n + 1], b, sigma_w })
}

fn linear_model() -> GpModel {
    let mut d = Dataset::new(1, 1);
    for a in 0..=20 {
        for b in 0..=4 {
            let (x, u) = (-1.5 + 0.15 * a as f64, -0.2 + 0.1 * b as f64);
            d.push(&[x], &[u], &[0.5 * x + u]).unwrap();
        }
    }
    GpModel::fit(&d, &hp(1, 1.0, 2.0, 1.0, 0.001)).unwrap()
}

fn linear_cfg(eps: EpsilonPolicy) -> AbstractionConfig {
    AbstractionConfig {
        spec_set: IntervalBox::symmetric(&[1.0]),
        input_set: IntervalBox::symmetric(&[0.2]),
        eta_x: vec![0.05],
        eta_u: vec![0.1],
        z: vec![1],
        epsilon: eps,
    }
}

fn toy_model(cfg: &RunConfig) -> GpModel {
    GpModel::fit(&cfg.initial_dataset().unwrap(), &cfg.hyperparams).unwrap()
}

/// Closed successor box `μ ± (βσ + σ_w + bε + η)` from a per-point
/// posterior query, as (center, half-width).
fn interval_oracle(model: &GpModel, sym: &SymbolicModel, x: &[f64], u: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let p = model.predict(x, u).unwrap();
    let half = (0..model.n_x())
        .map(|i| model.beta(i) * p.var[i].sqrt() + model.hyperparams().outputs[i].sigma_w + sym.e_half()[i])
        .collect();
    (p.mean, half)
}

fn in_box((c, h): &(Vec<f64>, Vec<f64>), y: &[f64]) -> bool {
    (0..c.len()).all(|i| (y[i] - c[i]).abs() <= h[i])
}

#[test]
fn lattice_spacing_and_coverage() {
    let l = Lattice::new(&[0.1, 0.05], &IntervalBox::symmetric(&[1.0, 0.5])).unwrap();
    let s = 2.0 / 2f64.sqrt();
    assert!((l.spacing()[0] - 0.1 * s).abs() < 1e-15 && (l.spacing()[1] - 0.05 * s).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..2000 {
        let x = [rng.random_range(-0.95..0.95), rng.random_range(-0.45..0.45)];
        let p = l.point(l.nearest(&x).unwrap());
        assert!((p[0] - x[0]).abs() <= 0.1 && (p[1] - x[1]).abs() <= 0.05);
    }
}

#[test]
fn one_step_stencil_matches_metric_enumeration() {
    for n in 1..=3 {
        let h = hp(n, 1.3, 0.7, 1.0, 0.0);
        let ctx = MetricContext::new(&h);
        let eta = vec![0.04; n];
        let l = Lattice::new(&eta, &IntervalBox::symmetric(&vec![1.0; n])).unwrap();
        let gt = contractive_radii(&h, &eta, &vec![1; n]).unwrap();
        let st = Stencil::ball(&l, &ctx, &gt).unwrap();
        let mut expect = Vec::new();
        let mut k = vec![-3i64; n];
        loop {
            let v: Vec<f64> = (0..n).map(|j| k[j] as f64 * l.spacing()[j]).collect();
            if (0..n).any(|i| ctx.metric(i, &vec![0.0; n], &v) <= gt[i] * (1.0 + 1e-9)) {
                expect.push(k.clone());
            }
            let mut j = n;
            let done = loop {
                if j == 0 {
                    break true;
                }
                j -= 1;
                if k[j] < 3 {
                    k[j] += 1;
                    break false;
                }
                k[j] = -3;
            };
            if done {
                break;
            }
        }
        let mut got = st.offsets().to_vec();
        got.sort();
        expect.sort();
        assert_eq!(got, expect, "n = {n}");
        // with uniform scales the z = 1 neighbourhood is every offset with |k|² ≤ n
        assert!(got.iter().all(|k| k.iter().map(|v| v * v).sum::<i64>() <= n as i64));
    }
}

fn brute_interior(l: &Lattice, ctx: &MetricContext, set: &LatticeSet, gamma: &[f64]) -> LatticeSet {
    // neighbours are scanned on a padded lattice; padding cells are non-members
    let pad = Lattice::new(l.eta(), &l.hull().widen(&[0.5, 0.5])).unwrap();
    LatticeSet::from_indices(
        l.len(),
        set.iter().filter(|&s| {
            let x = l.point(s);
            (0..pad.len()).all(|t| {
                let y = pad.point(t);
                let near = (0..ctx.n()).any(|i| ctx.metric(i, &x, &y) <= gamma[i]);
                !near || l.index_of(&pad.coords(t)).is_some_and(|q| set.contains(q))
            })
        }),
    )
}

#[test]
fn interior_matches_membership_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = Hyperparams {
        n_x: 2,
        n_u: 1,
        outputs: vec![
            OutputParams { alpha: 1.0, lengthscales: vec![0.5, 1.0, 1.0], b: 1.0, sigma_w: 0.0 },
            OutputParams { alpha: 0.7, lengthscales: vec![1.0, 0.4, 1.0], b: 1.0, sigma_w: 0.0 },
        ],
    };
    let ctx = MetricContext::new(&h);
    let l = Lattice::new(&[0.05, 0.05], &IntervalBox::symmetric(&[0.5, 0.5])).unwrap();
    for trial in 0..20 {
        let gamma = vec![rng.random_range(0.05..0.25), rng.random_range(0.05..0.2)];
        let st = Stencil::ball(&l, &ctx, &gamma).unwrap();
        let set = if trial == 0 {
            LatticeSet::full(l.len())
        } else {
            LatticeSet::from_bits((0..l.len()).map(|_| rng.random_bool(0.93)).collect())
        };
        let got = int_shrink(&l, &set, &st);
        assert_eq!(got, brute_interior(&l, &ctx, &set, &gamma));
        if trial == 0 {
            assert!(got.count() < l.len() && !got.contains(0) && !got.contains(l.len() - 1));
        }
    }
}

#[test]
fn interior_members_keep_their_neighbours_inside() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = hp(2, 1.0, 0.6, 1.0, 0.0);
    let ctx = MetricContext::new(&h);
    let l = Lattice::new(&[0.04, 0.04], &IntervalBox::symmetric(&[0.6, 0.6])).unwrap();
    let gamma = [0.2, 0.2];
    let st = Stencil::ball(&l, &ctx, &gamma).unwrap();
    let set = LatticeSet::from_bits((0..l.len()).map(|_| rng.random_bool(0.97)).collect());
    let inner: Vec<usize> = int_shrink(&l, &set, &st).iter().collect();
    assert!(!inner.is_empty());
    for _ in 0..1000 {
        let x1 = inner[rng.random_range(0..inner.len())];
        let x2 = rng.random_range(0..l.len());
        if ctx.metric(0, &l.point(x1), &l.point(x2)) <= gamma[0] {
            assert!(set.contains(x2));
        }
    }
}

#[test]
fn zero_growth_is_identity() {
    let l = Lattice::new(&[0.1], &IntervalBox::symmetric(&[1.0])).unwrap();
    let set = LatticeSet::from_indices(l.len(), [0, 3, 4, 9]);
    let st = Stencil::from_offsets(vec![vec![0]]);
    assert_eq!(int_shrink(&l, &set, &st), set);
    assert_eq!(out_grow(&l, &set, &st).set, set);
}

#[test]
fn successor_sets_match_interval_oracle() {
    let model = linear_model();
    let sym = SymbolicModel::build(&model, &linear_cfg(EpsilonPolicy::LowerBound)).unwrap();
    assert_eq!(sym.states().len(), 21);
    let l = sym.states();
    for x in 0..l.len() {
        for k in 0..sym.inputs().len() {
            let xp = l.point(x);
            let u = sym.input_point(k);
            let bx = interval_oracle(&model, &sym, &xp, u);
            let oracle: Vec<usize> = (0..l.len()).filter(|&y| in_box(&bx, &l.point(y))).collect();
            // boxes reaching past the domain are blocked
            let (m, h) = (bx.0[0], bx.1[0]);
            let inside = m - h >= l.axis_value(0, 0) - l.spacing()[0] && m + h < l.axis_value(0, 20) + l.spacing()[0];
            match sym.successors(x, k) {
                Some(s) => assert_eq!(s.iter().collect::<Vec<_>>(), oracle, "x={x} u={k}"),
                None => assert!(!inside || oracle.is_empty(), "x={x} u={k} blocked"),
            }
        }
    }
}

#[test]
fn batched_boxes_match_pointwise_on_toy_2d() {
    let cfg = RunConfig::preset("toy-2d").unwrap();
    let model = toy_model(&cfg);
    let mut ab = cfg.abstraction.clone();
    ab.eta_x = vec![0.1, 0.1];
    ab.eta_u = vec![0.5, 0.5];
    let sym = SymbolicModel::build(&model, &ab).unwrap();
    let l = sym.states();
    for x in (0..l.len()).step_by(7) {
        for k in 0..sym.inputs().len() {
            if let Some(s) = sym.successors(x, k) {
                let bx = interval_oracle(&model, &sym, &l.point(x), sym.input_point(k));
                for y in 0..l.len() {
                    assert_eq!(s.contains(y), in_box(&bx, &l.point(y)));
                }
            }
        }
    }
}

#[test]
fn degenerate_boxes_cover_at_most_corner_cells() {
    for n in 1..=3 {
        let h = hp(n, 1.0, 1.0, 1e-9, 0.0);
        let cfg = AbstractionConfig {
            spec_set: IntervalBox::symmetric(&vec![0.5; n]),
            input_set: IntervalBox::symmetric(&[0.0]),
            eta_x: vec![0.1; n],
            eta_u: vec![0.1],
            z: vec![1; n],
            epsilon: EpsilonPolicy::LowerBound,
        };
        let sym = SymbolicModel::from_boxes(&h, &cfg, |x, _| {
            let c: Vec<f64> = x.iter().map(|v| 0.5 * v + 0.013).collect();
            Some(IntervalBox::new(c.clone(), c))
        })
        .unwrap();
        for x in 0..sym.states().len() {
            let s = sym.successors(x, 0).unwrap();
            assert!(s.count() >= 1 && s.count() <= 1 << n, "n={n} count={}", s.count());
        }
    }
}

#[test]
fn larger_epsilon_enlarges_successors() {
    let model = linear_model();
    let a = SymbolicModel::build(&model, &linear_cfg(EpsilonPolicy::LowerBound)).unwrap();
    let b = SymbolicModel::build(&model, &linear_cfg(EpsilonPolicy::Scaled(3.0))).unwrap();
    let mut grew = 0;
    for x in 0..a.states().len() {
        for k in 0..a.inputs().len() {
            if let Some(sb) = b.successors(x, k) {
                let sa = a.successors(x, k).expect("narrower box cannot be blocked");
                assert!(sa.is_subset(&sb));
                grew += usize::from(sa.count() < sb.count());
            }
        }
    }
    // rasterization can hide the growth of a single box, never of all of them
    assert!(grew > 0);
}

#[test]
fn toy_abstraction_is_an_approximate_relation() {
    let cfg = RunConfig::preset("toy-1d").unwrap();
    let model = toy_model(&cfg);
    let mut ab = cfg.abstraction.clone();
    ab.eta_x = vec![0.02];
    let (sym, syn, term, _) = synthesize(&model, &ab, GammaPolicy::Tilde).unwrap();
    let plant = &cfg.plant;
    let ctx = sym.ctx();
    let l = sym.states();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let x = [rng.random_range(-1.0..1.0)];
        // every state of X has a related lattice state
        let rel = term.related(&x);
        assert!(!rel.is_empty());
        let q = rel[rng.random_range(0..rel.len())];
        assert!(ctx.metric(0, &l.point(q), &x) <= sym.epsilon()[0]);
        let k = rng.random_range(0..sym.inputs().len());
        let Some(succ) = sym.successors(q, k) else { continue };
        let next = plant.step(&x, sym.input_point(k), &mut rng);
        let near = l.nearest(&next).expect("successor box lies in the domain");
        assert!(succ.contains(near));
        // the augmented system only adds successors
        assert!(succ.is_subset(&sym.augmented_successors(q, k).unwrap().set));
    }
    // controlled invariance and contractivity of the fixed point
    for x in syn.fixed_point.iter() {
        let ins = syn.controller(x);
        assert!(!ins.is_empty());
        for &k in ins {
            let s = sym.successors(x, k as usize).unwrap();
            assert!(s.is_subset(&syn.interior));
            assert!(s.is_subset(&syn.fixed_point));
        }
    }
    assert!(term.terminal_cells().is_subset(term.safe_cells()));
    assert_eq!(term.gamma, term.gamma_tilde);
}

#[test]
fn attractor_survives_the_game() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 300;
    let mut sys = random_system(&mut rng, n, 4);
    sys.set(17, 0, Some(vec![17]));
    let fp = solve_safety(&sys, &LatticeSet::full(n));
    assert!(fp.set.contains(17));
}

#[test]
fn game_without_staying_inputs_is_empty() {
    let n = 50;
    let mut sys = ExplicitSystem::new(n, 2);
    for x in 0..n {
        sys.set(x, 0, Some(vec![(x + 1) % n, n - 1]));
        sys.set(x, 1, None);
    }
    let q0 = LatticeSet::from_indices(n, 0..n - 1);
    let fp = solve_safety(&sys, &q0);
    assert!(fp.set.is_empty());
    assert!(fp.iterations <= 2);
}

#[test]
fn game_result_is_controlled_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let n = rng.random_range(10..300);
        let sys = random_system(&mut rng, n, 3);
        let q0 = LatticeSet::from_bits((0..n).map(|_| rng.random_bool(0.8)).collect());
        let fp = solve_safety(&sys, &q0);
        assert!(fp.set.is_subset(&q0));
        for x in fp.set.iter() {
            assert!(!sys.admissible(x, &fp.set).is_empty());
        }
    }
}

#[test]
fn terminal_check_on_model_safety_game() {
    let cfg = RunConfig::preset("toy-1d").unwrap();
    let model = toy_model(&cfg);
    let mut ab = cfg.abstraction.clone();
    ab.eta_x = vec![0.02];
    let sym = SymbolicModel::build(&model, &ab).unwrap();
    let q0 = sym.initial_set(&ab.spec_set).unwrap();
    let syn = safety_game(&sym, &q0);
    assert!(syn.fixed_point.is_subset(&q0));
    assert_eq!(syn.interior, sym.interior(&syn.fixed_point));
}

proptest! {
    #[test]
    fn int_out_duality(seed in 0u64..10_000, p2 in 0.6..1.0f64, p1 in 0.0..0.3f64, z in 1u32..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = hp(2, 1.0, 0.8, 1.0, 0.0);
        let l = Lattice::new(&[0.1, 0.1], &IntervalBox::symmetric(&[1.0, 1.0])).unwrap();
        let gt = contractive_radii(&h, &[0.1, 0.1], &[z, z]).unwrap();
        let st = Stencil::ball(&l, &MetricContext::new(&h), &gt).unwrap();
        let q2 = LatticeSet::from_bits((0..l.len()).map(|_| rng.random_bool(p2)).collect());
        let inner = int_shrink(&l, &q2, &st);
        let q1 = if seed % 2 == 0 {
            LatticeSet::from_indices(l.len(), inner.iter().filter(|_| rng.random_bool(0.5)))
        } else {
            LatticeSet::from_bits((0..l.len()).map(|_| rng.random_bool(p1)).collect())
        };
        prop_assert_eq!(q1.is_subset(&inner), out_grow(&l, &q1, &st).is_subset(&q2));
    }

    #[test]
    fn interior_is_shrinking_and_monotone(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = Lattice::new(&[0.1], &IntervalBox::symmetric(&[1.0])).unwrap();
        let st = Stencil::from_offsets(vec![vec![-1], vec![0], vec![1]]);
        let a = LatticeSet::from_bits((0..l.len()).map(|_| rng.random_bool(0.7)).collect());
        let b = a.union(&LatticeSet::from_bits((0..l.len()).map(|_| rng.random_bool(0.3)).collect()));
        let ia = int_shrink(&l, &a, &st);
        prop_assert!(ia.is_subset(&a));
        prop_assert!(ia.is_subset(&int_shrink(&l, &b, &st)));
    }
}


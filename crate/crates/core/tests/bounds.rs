use etmpc::gp::{Dataset, GpModel, Hyperparams, OutputParams};
use etmpc::metric::{delta, enclosure, enclosure_with_noise, zeta, IntervalBox, MetricContext};
use etmpc::plant::{sample_box, KernelExpansion, Plant};
use etmpc::symbolic::{contractive_radii, epsilon_lower_bound, SymbolicError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D_UNIT: f64 = 0.887_095_643_419_994;

fn unit_hp(n_x: usize) -> Hyperparams {
    Hyperparams::uniform(n_x, 1, OutputParams { alpha: 1.0, lengthscales: vec![1.0; n_x + 1], b: 1.0, sigma_w: 0.0 })
}

/// Hyperparameters matching a kernel expansion, with `b` its exact norm.
fn matched_hp(f: &KernelExpansion) -> Hyperparams {
    Hyperparams {
        n_x: f.n_x,
        n_u: f.n_u,
        outputs: (0..f.n_x)
            .map(|i| OutputParams {
                alpha: f.alpha[i],
                lengthscales: f.lengthscales[i].clone(),
                b: f.rkhs_norm(i) * (1.0 + 1e-9),
                sigma_w: f.sigma_w[i],
            })
            .collect(),
    }
}

fn sampled_model(f: &KernelExpansion, n: usize, rng: &mut ChaCha8Rng) -> GpModel {
    let region = IntervalBox::symmetric(&vec![2.0; f.n_x + f.n_u]);
    let mut d = Dataset::new(f.n_x, f.n_u);
    for _ in 0..n {
        let z = sample_box(&region, rng);
        let (x, u) = z.split_at(f.n_x);
        let y = f.step(x, u, rng);
        d.push(x, u, &y).unwrap();
    }
    GpModel::fit(&d, &matched_hp(f)).unwrap()
}

#[test]
fn metric_examples() {
    let ctx = MetricContext::new(&unit_hp(2));
    assert_eq!(ctx.metric(0, &[0.3, 0.4], &[0.3, 0.4]), 0.0);
    assert!((ctx.metric(0, &[0.0, 0.0], &[0.6, 0.8]) - D_UNIT).abs() < 1e-15);
    let far = ctx.metric(0, &[0.0, 0.0], &[1e3, 0.0]);
    assert!(far <= ctx.sup(0) && (ctx.sup(0) - far) < 1e-12);
}

#[test]
fn metric_ball_round_trip() {
    let ctx = MetricContext::new(&unit_hp(1));
    for g in [1e-6, 0.1, 0.5, 1.0, 1.4] {
        let r2 = ctx.ball_sq_radius(0, g).unwrap();
        assert!((ctx.from_weighted_sq(0, r2) - g).abs() < 1e-12);
    }
    assert!(ctx.ball_sq_radius(0, ctx.sup(0)).is_err());
    assert!(ctx.ball_sq_radius(0, -0.1).is_err());
}

#[test]
fn epsilon_bound_examples() {
    assert_eq!(epsilon_lower_bound(&unit_hp(2), &[0.0, 0.0]), vec![0.0, 0.0]);
    let eps = epsilon_lower_bound(&unit_hp(2), &[0.6, 0.8]);
    assert!(eps.iter().all(|e| (e - D_UNIT).abs() < 1e-15));
    let huge = epsilon_lower_bound(&unit_hp(1), &[1e3]);
    assert!(huge[0] <= std::f64::consts::SQRT_2);
}

#[test]
fn contractive_radius_examples() {
    let g = contractive_radii(&unit_hp(1), &[0.5], &[1]).unwrap();
    assert!((g[0] - D_UNIT).abs() < 1e-15);
    assert!(matches!(contractive_radii(&unit_hp(1), &[0.5], &[0]), Err(SymbolicError::ZeroContraction(0))));
    let tiny = contractive_radii(&unit_hp(1), &[1e-12], &[1]).unwrap();
    assert!(tiny[0] < 1e-11);
    let by_z: Vec<f64> = (1..6).map(|z| contractive_radii(&unit_hp(2), &[0.1, 0.1], &[z, z]).unwrap()[0]).collect();
    assert!(by_z.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn enclosure_at_noise_free_training_point() {
    let hp = Hyperparams::uniform(1, 1, OutputParams { alpha: 1.0, lengthscales: vec![1.0, 1.0], b: 2.0, sigma_w: 0.0 });
    let mut d = Dataset::new(1, 1);
    d.push(&[0.2], &[0.1], &[0.7]).unwrap();
    d.push(&[-0.9], &[0.4], &[-0.2]).unwrap();
    let m = GpModel::fit(&d, &hp).unwrap();
    let b = enclosure(&m, &[0.2], &[0.1]).unwrap();
    assert!(b.width(0) < 1e-6 && (b.center()[0] - 0.7).abs() < 1e-6);
    let dl = delta(&m, &[0.2], &[0.1]).unwrap();
    assert!(dl[0] < 1e-6);
}

#[test]
fn enclosure_width_and_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = KernelExpansion::toy_2d(0.05);
    let m = sampled_model(&f, 40, &mut rng);
    for _ in 0..50 {
        let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let u = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let b = enclosure(&m, &x, &u).unwrap();
        let bw = enclosure_with_noise(&m, &x, &u).unwrap();
        let sd = m.predict_std(&x, &u).unwrap();
        for i in 0..2 {
            assert!((b.width(i) - 2.0 * m.beta(i) * sd[i]).abs() < 1e-12);
            assert!((bw.width(i) - b.width(i) - 0.1).abs() < 1e-12);
        }
    }
}

#[test]
fn delta_far_from_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = KernelExpansion::toy_1d(0.01);
    let m = sampled_model(&f, 10, &mut rng);
    let dl = delta(&m, &[200.0], &[0.0]).unwrap();
    assert!((dl[0] - (m.beta(0) * 1.0 + 0.01)).abs() < 1e-12);
}

#[test]
fn zeta_hat_examples() {
    let hp = Hyperparams::uniform(2, 1, OutputParams { alpha: 0.8, lengthscales: vec![1.5, 2.0, 1.0], b: 0.7, sigma_w: 0.0 });
    let ctx = MetricContext::new(&hp);
    assert_eq!(ctx.zeta_hat(&[0.0, 0.0]), vec![0.0, 0.0]);
    let s = ctx.sup(0);
    let top = ctx.zeta_hat(&[s, s]);
    let w: f64 = (0.7 * s / 1.5_f64).powi(2) + (0.7 * s / 2.0_f64).powi(2);
    let expect = (2.0 * 0.64 * (1.0 - (-0.5 * w).exp())).sqrt();
    assert!((top[0] - expect).abs() < 1e-14);
    assert_eq!(ctx.zeta_with_delta(&[0.0, 0.0], &[0.0, 0.0]), vec![0.0, 0.0]);
    let dl = [0.03, 0.05];
    let z0 = ctx.zeta_with_delta(&[0.0, 0.0], &dl);
    assert_eq!(z0, ctx.metrics(&[0.0, 0.0], &dl));
}

#[test]
fn true_map_respects_zeta_hat() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = KernelExpansion::toy_2d(0.0);
    let hp = matched_hp(&f);
    let ctx = MetricContext::new(&hp);
    for _ in 0..500 {
        let x1 = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let x2 = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let u = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let d = ctx.metrics(&x1, &x2);
        let zh = ctx.zeta_hat(&d);
        let got = ctx.metrics(&f.nominal(&x1, &u), &f.nominal(&x2, &u));
        for i in 0..2 {
            assert!(got[i] <= zh[i] + 1e-12, "{got:?} > {zh:?}");
        }
    }
}

#[test]
fn one_step_error_respects_zeta() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let f = KernelExpansion::toy_2d(0.02);
    let m = sampled_model(&f, 60, &mut rng);
    let ctx = MetricContext::new(m.hyperparams());
    for _ in 0..500 {
        let x1 = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let x2 = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let u = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let bound = zeta(&ctx, &m, &ctx.metrics(&x1, &x2), &x2, &u).unwrap();
        let actual = f.step(&x1, &u, &mut rng);
        let got = ctx.metrics(&actual, &m.predict_mean(&x2, &u).unwrap());
        for i in 0..2 {
            assert!(got[i] <= bound[i] + 1e-12);
        }
    }
}

#[test]
fn true_successor_inside_noisy_enclosure() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let f = KernelExpansion::toy_2d(0.02);
    let m = sampled_model(&f, 60, &mut rng);
    for _ in 0..1000 {
        let x = [rng.random_range(-2.5..2.5), rng.random_range(-2.5..2.5)];
        let u = [rng.random_range(-2.5..2.5), rng.random_range(-2.5..2.5)];
        assert!(enclosure_with_noise(&m, &x, &u).unwrap().contains(&f.step(&x, &u, &mut rng)));
    }
}

#[test]
fn int_box_shrinks_by_ball_extent() {
    let ctx = MetricContext::new(&unit_hp(2));
    let set = IntervalBox::symmetric(&[1.0, 1.0]);
    assert_eq!(ctx.int_box(&set, &[0.0, 0.0]).unwrap(), Some(set.clone()));
    let inner = ctx.int_box(&set, &[D_UNIT, D_UNIT]).unwrap().unwrap();
    assert!((inner.upper[0] - 0.0).abs() < 1e-12 && (inner.lower[1] - 0.0).abs() < 1e-12);
    assert_eq!(ctx.int_box(&set, &[1.2, 1.2]).unwrap(), None);
}

fn ctx_strategy(n: usize) -> impl Strategy<Value = MetricContext> {
    (prop::collection::vec(0.3..3.0f64, n), prop::collection::vec(0.2..3.0f64, n * n)).prop_map(move |(a, l)| {
        let hp = Hyperparams {
            n_x: n,
            n_u: 1,
            outputs: (0..n)
                .map(|i| OutputParams {
                    alpha: a[i],
                    lengthscales: l[i * n..(i + 1) * n].iter().copied().chain([1.0]).collect(),
                    b: 1.0,
                    sigma_w: 0.0,
                })
                .collect(),
        };
        MetricContext::new(&hp)
    })
}

proptest! {
    #[test]
    fn metric_is_a_bounded_metric(
        ctx in ctx_strategy(3),
        a in prop::collection::vec(-4.0..4.0f64, 3),
        b in prop::collection::vec(-4.0..4.0f64, 3),
        c in prop::collection::vec(-4.0..4.0f64, 3),
    ) {
        for i in 0..3 {
            let ab = ctx.metric(i, &a, &b);
            prop_assert_eq!(ctx.metric(i, &a, &a), 0.0);
            prop_assert!((ab - ctx.metric(i, &b, &a)).abs() <= 1e-14);
            prop_assert!(ab <= ctx.metric(i, &a, &c) + ctx.metric(i, &c, &b) + 1e-12);
            prop_assert!(ab <= ctx.sup(i));
        }
    }

    #[test]
    fn zeta_hat_is_monotone(ctx in ctx_strategy(2), d in prop::collection::vec(0.0..1.0f64, 2), s in 1.0..3.0f64) {
        let lo = ctx.zeta_hat(&d);
        let hi = ctx.zeta_hat(&[d[0] * s, d[1] * s]);
        prop_assert!(lo.iter().zip(&hi).all(|(a, b)| a <= b));
    }

    #[test]
    fn delta_is_at_least_noise(seed in 0u64..1000, x in -3.0..3.0f64, u in -3.0..3.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = KernelExpansion::toy_1d(0.03);
        let m = sampled_model(&f, 8, &mut rng);
        prop_assert!(delta(&m, &[x], &[u]).unwrap()[0] >= 0.03);
    }
}

use etmpc::plant::{unicycle_plant, KernelExpansion, Plant, Unicycle};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn noiseless() -> Unicycle {
    unicycle_plant(0.3, 1.0, 1.0, &[0.0; 3])
}

#[test]
fn tracking_equilibrium_is_fixed() {
    assert_eq!(noiseless().nominal(&[0.0, 0.0, 0.0], &[1.0, 1.0]), vec![0.0, 0.0, 0.0]);
}

#[test]
fn standing_still_opens_a_longitudinal_gap() {
    assert_eq!(noiseless().nominal(&[0.0, 0.0, 0.0], &[0.0, 1.0]), vec![0.3, 0.0, 0.0]);
}

#[test]
fn step_is_one_euler_step_of_error_rate() {
    let p = noiseless();
    let (x, u) = ([0.4, -0.7, 1.1], [0.8, 1.6]);
    let r = p.error_rate(&x, &u);
    let expect: Vec<f64> = (0..3).map(|i| x[i] + 0.3 * r[i]).collect();
    assert_eq!(p.nominal(&x, &u), expect);
    let manual = [
        0.4 + 0.3 * (1.6 * -0.7 - 0.8 + 1.1f64.cos()),
        -0.7 + 0.3 * (-1.6 * 0.4 + 1.1f64.sin()),
        1.1 + 0.3 * (1.0 - 1.6),
    ];
    for i in 0..3 {
        assert!((expect[i] - manual[i]).abs() < 1e-15);
    }
}

#[test]
fn noise_stays_in_its_box() {
    let p = unicycle_plant(0.3, 1.0, 1.0, &[0.01; 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..2000 {
        let y = p.step(&[0.1, 0.2, 0.3], &[1.0, 0.5], &mut rng);
        let n = p.nominal(&[0.1, 0.2, 0.3], &[1.0, 0.5]);
        assert!(y.iter().zip(&n).all(|(a, b)| (a - b).abs() <= 0.01));
    }
}

#[test]
fn reference_follows_a_unit_circle() {
    let p = noiseless();
    for k in 0..20 {
        let r = p.reference(0.3 * k as f64);
        assert!((r[0].powi(2) + (r[1] - 1.0).powi(2) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn expert_is_feedforward_at_zero_error() {
    assert_eq!(noiseless().expert(&[0.0, 0.0, 0.0], [2.0, 0.25, 2.0]), [1.0, 1.0]);
}

#[test]
fn toy_expansions_have_finite_norm() {
    for k in [KernelExpansion::toy_1d(0.002), KernelExpansion::toy_2d(0.002)] {
        for i in 0..k.n_x() {
            let n = k.rkhs_norm(i);
            assert!(n.is_finite() && n > 0.0);
        }
    }
}

proptest! {
    #[test]
    fn world_pose_inverts_error_posture(
        rx in -5.0..5.0f64, ry in -5.0..5.0f64, rt in -3.0..3.0f64,
        x in -5.0..5.0f64, y in -5.0..5.0f64, t in -3.0..3.0f64,
    ) {
        let reference = [rx, ry, rt];
        let pose = [x, y, t];
        let xe = Unicycle::error_posture(&reference, &pose);
        let back = Unicycle::world_pose(&reference, &xe);
        for i in 0..3 {
            prop_assert!((back[i] - pose[i]).abs() < 1e-9);
        }
    }
}

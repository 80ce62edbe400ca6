//! True systems used in simulation. Their transition maps are hidden from the
//! controller, which only sees sampled data.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gp::unit_kernel;
use crate::metric::IntervalBox;

/// Discrete-time plant `x⁺ = f(x, u) + w`, `|w_i| ≤ σ_{w,i}`.
pub trait Plant {
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;
    fn nominal(&self, x: &[f64], u: &[f64]) -> Vec<f64>;
    fn noise_bound(&self) -> &[f64];

    /// Noisy step with noise drawn uniformly from the box `W`.
    fn step<R: Rng + ?Sized>(&self, x: &[f64], u: &[f64], rng: &mut R) -> Vec<f64>
    where
        Self: Sized,
    {
        let mut y = self.nominal(x, u);
        for (v, s) in y.iter_mut().zip(self.noise_bound()) {
            if *s > 0.0 {
                *v += rng.random_range(-*s..=*s);
            }
        }
        y
    }
}

/// Reference and error-posture dynamics of the unicycle tracking problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Unicycle {
    pub dt: f64,
    pub v_r: f64,
    pub omega_r: f64,
    pub sigma_w: Vec<f64>,
}

impl Default for Unicycle {
    fn default() -> Self {
        Self { dt: 0.3, v_r: 1.0, omega_r: 1.0, sigma_w: vec![0.01; 3] }
    }
}

pub fn unicycle_plant(dt: f64, v_r: f64, omega_r: f64, sigma_w: &[f64]) -> Unicycle {
    Unicycle { dt, v_r, omega_r, sigma_w: sigma_w.to_vec() }
}

/// World pose `(x, y, θ)`.
pub type Pose = [f64; 3];

impl Unicycle {
    /// Continuous error dynamics `ẋ_e(x_e, (v, Ω))`.
    pub fn error_rate(&self, xe: &[f64], u: &[f64]) -> [f64; 3] {
        let (v, om) = (u[0], u[1]);
        [om * xe[1] - v + self.v_r * xe[2].cos(), -om * xe[0] + self.v_r * xe[2].sin(), self.omega_r - om]
    }

    /// Leader pose at time `t` starting from the origin.
    pub fn reference(&self, t: f64) -> Pose {
        let th = self.omega_r * t;
        if self.omega_r.abs() < 1e-12 {
            return [self.v_r * t, 0.0, 0.0];
        }
        let r = self.v_r / self.omega_r;
        [r * th.sin(), r * (1.0 - th.cos()), th]
    }

    /// `x_e = R(θ)(x_r − x)`.
    pub fn error_posture(reference: &Pose, pose: &Pose) -> [f64; 3] {
        let (s, c) = pose[2].sin_cos();
        let d = [reference[0] - pose[0], reference[1] - pose[1], reference[2] - pose[2]];
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    /// Inverse of [`Unicycle::error_posture`]: the follower pose.
    pub fn world_pose(reference: &Pose, xe: &[f64]) -> Pose {
        let th = reference[2] - xe[2];
        let (s, c) = th.sin_cos();
        [reference[0] - (c * xe[0] - s * xe[1]), reference[1] - (s * xe[0] + c * xe[1]), th]
    }

    /// Kanayama-type tracking law, used as the expert that generates initial
    /// data and OCP initial guesses.
    pub fn expert(&self, xe: &[f64], gains: [f64; 3]) -> [f64; 2] {
        let [kx, ky, kt] = gains;
        let v = self.v_r * xe[2].cos() + kx * xe[0];
        let om = self.omega_r + self.v_r * (ky * xe[1] + kt * xe[2].sin());
        [v, om]
    }
}

impl Plant for Unicycle {
    fn n_x(&self) -> usize {
        3
    }

    fn n_u(&self) -> usize {
        2
    }

    fn nominal(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let r = self.error_rate(x, u);
        (0..3).map(|i| x[i] + self.dt * r[i]).collect()
    }

    fn noise_bound(&self) -> &[f64] {
        &self.sigma_w
    }
}

/// `f_i(z) = Σ_c w_{i,c} k_i(z, c)`: a finite SE expansion, hence an RKHS
/// element with a computable norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelExpansion {
    pub n_x: usize,
    pub n_u: usize,
    pub alpha: Vec<f64>,
    pub lengthscales: Vec<Vec<f64>>,
    /// Expansion centers in `(x, u)` space.
    pub centers: Vec<Vec<f64>>,
    /// `weights[i][c]`.
    pub weights: Vec<Vec<f64>>,
    pub sigma_w: Vec<f64>,
}

impl KernelExpansion {
    pub fn eval(&self, i: usize, z: &[f64]) -> f64 {
        let a2 = self.alpha[i] * self.alpha[i];
        self.centers.iter().zip(&self.weights[i]).map(|(c, w)| w * a2 * unit_kernel(z, c, &self.lengthscales[i])).sum()
    }

    /// `‖f_i‖_k = √(wᵀ K w)`.
    pub fn rkhs_norm(&self, i: usize) -> f64 {
        let a2 = self.alpha[i] * self.alpha[i];
        let w = &self.weights[i];
        let mut s = 0.0;
        for (p, cp) in self.centers.iter().enumerate() {
            for (q, cq) in self.centers.iter().enumerate() {
                s += w[p] * w[q] * a2 * unit_kernel(cp, cq, &self.lengthscales[i]);
            }
        }
        s.max(0.0).sqrt()
    }

    /// One-dimensional toy: a dipole of kernels placed off the operating
    /// region so that `f` is a contraction near the origin.
    pub fn toy_1d(sigma_w: f64) -> Self {
        Self {
            n_x: 1,
            n_u: 1,
            alpha: vec![1.0],
            lengthscales: vec![vec![2.5, 2.5]],
            centers: vec![vec![-1.5, -2.5], vec![1.5, 2.5]],
            weights: vec![vec![-1.8, 1.8]],
            sigma_w: vec![sigma_w],
        }
    }

    /// Two decoupled copies of the 1-D toy with a weak cross term.
    pub fn toy_2d(sigma_w: f64) -> Self {
        let l = vec![2.5, 4.0, 2.5, 4.0];
        Self {
            n_x: 2,
            n_u: 2,
            alpha: vec![1.0, 1.0],
            lengthscales: vec![l.clone(), vec![4.0, 2.5, 4.0, 2.5]],
            centers: vec![
                vec![-1.5, 0.0, -2.5, 0.0],
                vec![1.5, 0.0, 2.5, 0.0],
                vec![0.0, -1.5, 0.0, -2.5],
                vec![0.0, 1.5, 0.0, 2.5],
            ],
            weights: vec![vec![-1.8, 1.8, 0.0, 0.0], vec![0.0, 0.0, -1.8, 1.8]],
            sigma_w: vec![sigma_w; 2],
        }
    }
}

impl Plant for KernelExpansion {
    fn n_x(&self) -> usize {
        self.n_x
    }

    fn n_u(&self) -> usize {
        self.n_u
    }

    fn nominal(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = x.iter().chain(u).copied().collect();
        (0..self.n_x).map(|i| self.eval(i, &z)).collect()
    }

    fn noise_bound(&self) -> &[f64] {
        &self.sigma_w
    }
}

/// Uniform sample from a box.
pub fn sample_box<R: Rng + ?Sized>(b: &IntervalBox, rng: &mut R) -> Vec<f64> {
    b.lower
        .iter()
        .zip(&b.upper)
        .map(|(l, u)| if u > l { rng.random_range(*l..=*u) } else { *l })
        .collect()
}

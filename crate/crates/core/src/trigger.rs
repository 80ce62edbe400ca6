//! Event-trigger thresholds: the backward recursion of small geometric
//! programs and the online trigger test.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::gp::{GpError, GpModel, Hyperparams};
use crate::metric::{delta, MetricContext, MetricError};

/// `c_{N,i}(H_k) = √(2 ln(2α_i² / (2α_i² − γ_i²)))`.
pub fn c_terminal(hp: &Hyperparams, gamma: &[f64]) -> Result<Vec<f64>, MetricError> {
    let ctx = MetricContext::new(hp);
    Ok(ctx.ball_sq_radii(gamma)?.into_iter().map(f64::sqrt).collect())
}

/// `c_{N,i}(j+1)` from `ψ*(j+1)`; the same map as [`c_terminal`].
pub fn c_step(hp: &Hyperparams, psi_next: &[f64]) -> Result<Vec<f64>, MetricError> {
    c_terminal(hp, psi_next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GpObjective {
    /// `max ∏ ψ_i`.
    #[default]
    Product,
    /// `max Σ ψ_i`, a second-order cone program.
    Sum,
}

/// Data of one geometric program: maximize the objective over
/// `lo ≤ ψ ≤ hi` subject to `Σ_p a[i][p] ψ_p² ≤ c_i²`.
#[derive(Debug, Clone, PartialEq)]
pub struct GpStep {
    pub a: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl GpStep {
    pub fn new(ctx: &MetricContext, delta_hat: &[f64], c_next: &[f64], sigma_margin: f64) -> Self {
        let n = ctx.n();
        Self {
            a: (0..n).map(|i| (0..n).map(|p| ctx.b[p] * ctx.b[p] * ctx.inv_lx2[i][p]).collect()).collect(),
            c: c_next.to_vec(),
            lo: (0..n).map(|p| delta_hat[p] / ctx.b[p]).collect(),
            hi: (0..n).map(|p| ctx.sup(p) - sigma_margin).collect(),
        }
    }

    pub fn g(&self, i: usize, psi: &[f64]) -> f64 {
        self.a[i].iter().zip(psi).map(|(a, v)| a * v * v).sum()
    }

    pub fn feasible(&self, psi: &[f64], tol: f64) -> bool {
        (0..self.c.len()).all(|i| self.g(i, psi) <= self.c[i] * self.c[i] + tol)
            && psi.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| *v >= l - tol && *v <= h + tol)
    }

    pub fn objective(&self, kind: GpObjective, psi: &[f64]) -> f64 {
        match kind {
            GpObjective::Product => psi.iter().product(),
            GpObjective::Sum => psi.iter().sum(),
        }
    }

    /// The lower corner decides feasibility: every constraint is monotone
    /// increasing in each `ψ_p ≥ 0`.
    pub fn is_feasible(&self) -> bool {
        self.lo.iter().zip(&self.hi).all(|(l, h)| l <= h) && self.feasible(&self.lo, 0.0)
    }

    /// Barrier-Newton solution; `None` when infeasible.
    pub fn solve(&self, kind: GpObjective) -> Option<Vec<f64>> {
        if !self.is_feasible() {
            return None;
        }
        let n = self.lo.len();
        let free: Vec<usize> = (0..n).filter(|&p| self.hi[p] - self.lo[p] > 1e-14 * self.hi[p].abs().max(1.0)).collect();
        if free.is_empty() {
            return Some(self.lo.clone());
        }
        let mid: Vec<f64> = (0..n).map(|p| 0.5 * (self.lo[p] + self.hi[p])).collect();
        // pull the midpoint toward the (feasible) lower corner until strictly inside
        let mut s = 1.0;
        let mut x = self.lo.clone();
        let mut found = false;
        for _ in 0..200 {
            let cand: Vec<f64> =
                (0..n).map(|p| if free.contains(&p) { self.lo[p] + s * (mid[p] - self.lo[p]) } else { self.lo[p] }).collect();
            if self.strictly_inside(&cand, &free) {
                x = cand;
                found = true;
                break;
            }
            s *= 0.5;
        }
        if !found {
            // the feasible set has no interior: the lower corner is the only point
            return Some(self.lo.clone());
        }
        let m = (self.c.len() + 2 * free.len()) as f64;
        let mut t = 1.0;
        while m / t > 1e-13 {
            self.center(kind, t, &free, &mut x);
            t *= 8.0;
        }
        Some(x)
    }

    fn strictly_inside(&self, x: &[f64], free: &[usize]) -> bool {
        (0..self.c.len()).all(|i| self.g(i, x) < self.c[i] * self.c[i])
            && free.iter().all(|&p| x[p] > self.lo[p] && x[p] < self.hi[p] && x[p] > 0.0)
    }

    fn barrier(&self, kind: GpObjective, t: f64, free: &[usize], x: &[f64]) -> Option<f64> {
        if !self.strictly_inside(x, free) {
            return None;
        }
        let mut f = 0.0;
        for i in 0..self.c.len() {
            f -= (self.c[i] * self.c[i] - self.g(i, x)).ln();
        }
        for &p in free {
            f -= (x[p] - self.lo[p]).ln() + (self.hi[p] - x[p]).ln();
            f -= t * match kind {
                GpObjective::Product => x[p].ln(),
                GpObjective::Sum => x[p],
            };
        }
        Some(f)
    }

    fn center(&self, kind: GpObjective, t: f64, free: &[usize], x: &mut Vec<f64>) {
        let k = free.len();
        for _ in 0..100 {
            let mut grad: DVector<f64> = DVector::zeros(k);
            let mut hess: DMatrix<f64> = DMatrix::zeros(k, k);
            for i in 0..self.c.len() {
                let s = self.c[i] * self.c[i] - self.g(i, x);
                let d: Vec<f64> = free.iter().map(|&p| 2.0 * self.a[i][p] * x[p]).collect();
                for (r, &p) in free.iter().enumerate() {
                    grad[r] += d[r] / s;
                    hess[(r, r)] += 2.0 * self.a[i][p] / s;
                    for q in 0..k {
                        hess[(r, q)] += d[r] * d[q] / (s * s);
                    }
                }
            }
            for (r, &p) in free.iter().enumerate() {
                let (l, h) = (x[p] - self.lo[p], self.hi[p] - x[p]);
                grad[r] += -1.0 / l + 1.0 / h;
                hess[(r, r)] += 1.0 / (l * l) + 1.0 / (h * h);
                match kind {
                    GpObjective::Product => {
                        grad[r] -= t / x[p];
                        hess[(r, r)] += t / (x[p] * x[p]);
                    }
                    GpObjective::Sum => grad[r] -= t,
                }
            }
            let Some(ch) = hess.clone().cholesky() else { return };
            let step = -ch.solve(&grad);
            let decrement = -grad.dot(&step);
            if decrement < 1e-14 {
                return;
            }
            let f0 = self.barrier(kind, t, free, x).expect("iterate stays strictly feasible");
            let mut alpha = 1.0;
            loop {
                let mut cand = x.clone();
                for (r, &p) in free.iter().enumerate() {
                    cand[p] += alpha * step[r];
                }
                if let Some(f) = self.barrier(kind, t, free, &cand) {
                    if f <= f0 - 0.25 * alpha * decrement {
                        *x = cand;
                        break;
                    }
                }
                alpha *= 0.5;
                if alpha < 1e-20 {
                    return;
                }
            }
        }
    }
}

/// Solves one step of the recursion: `ψ*(j)` or `None` when infeasible.
pub fn solve_gp_step(
    hp: &Hyperparams,
    delta_hat: &[f64],
    c_next: &[f64],
    sigma_margin: f64,
    kind: GpObjective,
) -> Option<Vec<f64>> {
    GpStep::new(&MetricContext::new(hp), delta_hat, c_next, sigma_margin).solve(kind)
}

/// Thresholds for one OCP solution, indexed `[j][i]` for `j < H_k`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TriggerSchedule {
    pub horizon: usize,
    pub delta_hat: Vec<Vec<f64>>,
    pub psi: Vec<Vec<f64>>,
    pub xi: Vec<Vec<f64>>,
    /// `c[j][i] = c_{N,i}(j+1)`.
    pub c: Vec<Vec<f64>>,
    pub feasible: bool,
    /// First step (counting backward from `H_k − 1`) that was infeasible.
    pub infeasible_at: Option<usize>,
    /// `c_{N,i}(j+1) ≥ c_{N,i}(j+2)` for all `j ≤ H_k − 2`.
    pub monotone: bool,
}

impl TriggerSchedule {
    /// `ξ*_i(j)`, with `−1` at `j = H_k`.
    pub fn xi_at(&self, j: usize, i: usize) -> f64 {
        if j >= self.horizon {
            -1.0
        } else {
            self.xi[j][i]
        }
    }
}

/// Backward recursion along `(x̂*(j), u*(j))`, `j = H_k − 1, …, 0`.
pub fn build_schedule(
    model: &GpModel,
    states: &[Vec<f64>],
    inputs: &[Vec<f64>],
    gamma: &[f64],
    sigma_margin: f64,
    kind: GpObjective,
) -> Result<TriggerSchedule, GpError> {
    let hp = model.hyperparams();
    let ctx = MetricContext::new(hp);
    let h = inputs.len();
    let delta_hat = (0..h).map(|j| delta(model, &states[j], &inputs[j])).collect::<Result<Vec<_>, _>>()?;
    let n = hp.n_x;
    let mut psi = vec![vec![0.0; n]; h];
    let mut xi = vec![vec![0.0; n]; h];
    let mut c = vec![vec![0.0; n]; h];
    let mut next = match c_terminal(hp, gamma) {
        Ok(v) => v,
        Err(_) => return Ok(infeasible(h, delta_hat, h.saturating_sub(1))),
    };
    for j in (0..h).rev() {
        c[j] = next.clone();
        let Some(p) = GpStep::new(&ctx, &delta_hat[j], &next, sigma_margin).solve(kind) else {
            return Ok(infeasible(h, delta_hat, j));
        };
        xi[j] = (0..n).map(|i| (p[i] - delta_hat[j][i] / ctx.b[i]).max(0.0)).collect();
        next = match c_step(hp, &p) {
            Ok(v) => v,
            Err(_) => return Ok(infeasible(h, delta_hat, j)),
        };
        psi[j] = p;
    }
    let monotone = (0..h.saturating_sub(1)).all(|j| (0..n).all(|i| c[j][i] >= c[j + 1][i] * (1.0 - 1e-12)));
    if !monotone {
        log::debug!("threshold radii not monotone along the horizon");
    }
    Ok(TriggerSchedule { horizon: h, delta_hat, psi, xi, c, feasible: true, infeasible_at: None, monotone })
}

fn infeasible(h: usize, delta_hat: Vec<Vec<f64>>, at: usize) -> TriggerSchedule {
    TriggerSchedule {
        horizon: h,
        delta_hat,
        psi: Vec::new(),
        xi: Vec::new(),
        c: Vec::new(),
        feasible: false,
        infeasible_at: Some(at),
        monotone: false,
    }
}

/// Outcome of the trigger test at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerCheck {
    pub fire: bool,
    /// Per-dimension `d_i(x, x̂*(j)) > ξ*_i(j)`.
    pub dims: Vec<bool>,
    pub distance: Vec<f64>,
}

/// Fires iff `d_i(x(t_k + j), x̂*(j)) > ξ*_i(j)` for some `i`.
pub fn check_trigger(
    schedule: &TriggerSchedule,
    ctx: &MetricContext,
    j: usize,
    x_actual: &[f64],
    x_pred: &[f64],
) -> TriggerCheck {
    let distance = ctx.metrics(x_actual, x_pred);
    let dims: Vec<bool> = distance.iter().enumerate().map(|(i, d)| *d > schedule.xi_at(j, i)).collect();
    TriggerCheck { fire: dims.iter().any(|d| *d), dims, distance }
}

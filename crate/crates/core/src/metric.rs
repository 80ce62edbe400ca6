//! Kernel metric on the state space, uncertainty δ_N, interval enclosures
//! and the one-step propagation bounds ζ̂ and ζ.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::{GpError, GpModel, Hyperparams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("radius {gamma} for output {dim} is not below the metric supremum {sup}")]
    RadiusTooLarge { dim: usize, gamma: f64, sup: f64 },
    #[error("negative radius {gamma} for output {dim}")]
    NegativeRadius { dim: usize, gamma: f64 },
    #[error("expected {expected} radii, got {got}")]
    Arity { expected: usize, got: usize },
}

/// Axis-aligned box `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntervalBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl IntervalBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        debug_assert!(lower.iter().zip(&upper).all(|(l, u)| l <= u));
        Self { lower, upper }
    }

    pub fn symmetric(half: &[f64]) -> Self {
        Self::new(half.iter().map(|h| -h).collect(), half.to_vec())
    }

    pub fn centered(center: &[f64], half: &[f64]) -> Self {
        Self::new(
            center.iter().zip(half).map(|(c, h)| c - h).collect(),
            center.iter().zip(half).map(|(c, h)| c + h).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    pub fn contains_box(&self, other: &IntervalBox) -> bool {
        (0..self.dim()).all(|i| self.lower[i] <= other.lower[i] && other.upper[i] <= self.upper[i])
    }

    /// Minkowski sum with `[−w, w]` per axis.
    pub fn widen(&self, w: &[f64]) -> IntervalBox {
        IntervalBox::new(
            self.lower.iter().zip(w).map(|(l, v)| l - v).collect(),
            self.upper.iter().zip(w).map(|(u, v)| u + v).collect(),
        )
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, u))| v.clamp(*l, *u))
            .collect()
    }
}

/// Parameters of the state-space kernel metrics `d_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricContext {
    pub alpha: Vec<f64>,
    /// `inv_lx2[i][p] = 1/λ_{i,p}` over the first `n_x` length-scales.
    pub inv_lx2: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl MetricContext {
    pub fn new(hp: &Hyperparams) -> Self {
        Self {
            alpha: hp.outputs.iter().map(|p| p.alpha).collect(),
            inv_lx2: hp
                .outputs
                .iter()
                .map(|p| p.lengthscales[..hp.n_x].iter().map(|l| 1.0 / (l * l)).collect())
                .collect(),
            b: hp.outputs.iter().map(|p| p.b).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.alpha.len()
    }

    /// Supremum `√2 α_i` of `d_i`.
    pub fn sup(&self, i: usize) -> f64 {
        std::f64::consts::SQRT_2 * self.alpha[i]
    }

    /// `‖v‖²_{Λ_{x,i}⁻¹}`.
    pub fn weighted_sq(&self, i: usize, v: &[f64]) -> f64 {
        v.iter().zip(&self.inv_lx2[i]).map(|(a, w)| a * a * w).sum()
    }

    /// Maps a weighted squared distance to the metric value.
    pub fn from_weighted_sq(&self, i: usize, w: f64) -> f64 {
        let a = self.alpha[i];
        (2.0 * a * a * -(-0.5 * w).exp_m1()).max(0.0).sqrt()
    }

    /// `d_i(x1, x2) = √(2α_i²(1 − exp(−½‖x1 − x2‖²_{Λ_{x,i}⁻¹})))`.
    pub fn metric(&self, i: usize, x1: &[f64], x2: &[f64]) -> f64 {
        let w: f64 = x1
            .iter()
            .zip(x2)
            .zip(&self.inv_lx2[i])
            .map(|((a, b), s)| (a - b) * (a - b) * s)
            .sum();
        self.from_weighted_sq(i, w)
    }

    pub fn metrics(&self, x1: &[f64], x2: &[f64]) -> Vec<f64> {
        (0..self.n()).map(|i| self.metric(i, x1, x2)).collect()
    }

    /// Weighted squared radius of the `d_i`-ball of radius `gamma`:
    /// `d_i ≤ γ ⇔ ‖Δ‖²_{Λ_{x,i}⁻¹} ≤ −2 ln(1 − γ²/(2α_i²))`.
    pub fn ball_sq_radius(&self, i: usize, gamma: f64) -> Result<f64, MetricError> {
        if gamma < 0.0 {
            return Err(MetricError::NegativeRadius { dim: i, gamma });
        }
        let sup = self.sup(i);
        if gamma >= sup {
            return Err(MetricError::RadiusTooLarge { dim: i, gamma, sup });
        }
        let a = self.alpha[i];
        Ok(-2.0 * (-(gamma * gamma) / (2.0 * a * a)).ln_1p())
    }

    pub fn ball_sq_radii(&self, gamma: &[f64]) -> Result<Vec<f64>, MetricError> {
        if gamma.len() != self.n() {
            return Err(MetricError::Arity { expected: self.n(), got: gamma.len() });
        }
        gamma.iter().enumerate().map(|(i, g)| self.ball_sq_radius(i, *g)).collect()
    }

    /// `ζ̂_i = √(2α_i²(1 − exp(−½‖b ⊙ d‖²_{Λ_{x,i}⁻¹})))`.
    pub fn zeta_hat(&self, d: &[f64]) -> Vec<f64> {
        let bd: Vec<f64> = self.b.iter().zip(d).map(|(b, v)| b * v).collect();
        (0..self.n()).map(|i| self.from_weighted_sq(i, self.weighted_sq(i, &bd))).collect()
    }

    /// `ζ_i` with the uncertainty `δ` added inside the norm.
    pub fn zeta_with_delta(&self, d: &[f64], delta: &[f64]) -> Vec<f64> {
        let v: Vec<f64> = self.b.iter().zip(d).zip(delta).map(|((b, x), e)| b * x + e).collect();
        (0..self.n()).map(|i| self.from_weighted_sq(i, self.weighted_sq(i, &v))).collect()
    }

    /// Continuous `⋂_i Int_{d_i}(box; γ_i)` of an axis-aligned box; `None` if empty.
    pub fn int_box(&self, set: &IntervalBox, gamma: &[f64]) -> Result<Option<IntervalBox>, MetricError> {
        let r2 = self.ball_sq_radii(gamma)?;
        let ext = self.ball_extents(&r2);
        let lower: Vec<f64> = set.lower.iter().zip(&ext).map(|(l, e)| l + e).collect();
        let upper: Vec<f64> = set.upper.iter().zip(&ext).map(|(u, e)| u - e).collect();
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            return Ok(None);
        }
        Ok(Some(IntervalBox::new(lower, upper)))
    }

    /// Per-axis half-extent of the union of the metric balls with weighted
    /// squared radii `r2`.
    pub fn ball_extents(&self, r2: &[f64]) -> Vec<f64> {
        let n = self.inv_lx2[0].len();
        (0..n)
            .map(|p| {
                r2.iter()
                    .zip(&self.inv_lx2)
                    .map(|(r, w)| (r / w[p]).sqrt())
                    .fold(0.0, f64::max)
            })
            .collect()
    }
}

/// `δ_{N,i}(x, u) = β_{N,i} σ_{f_i}(x, u) + σ_{w,i}`.
pub fn delta(model: &GpModel, x: &[f64], u: &[f64]) -> Result<Vec<f64>, GpError> {
    let sd = model.predict_std(x, u)?;
    Ok(sd
        .iter()
        .enumerate()
        .map(|(i, s)| model.beta(i) * s + model.hyperparams().outputs[i].sigma_w)
        .collect())
}

/// `F(x, u) = [μ ± β σ]`.
pub fn enclosure(model: &GpModel, x: &[f64], u: &[f64]) -> Result<IntervalBox, GpError> {
    let p = model.predict(x, u)?;
    let half: Vec<f64> = p.var.iter().enumerate().map(|(i, v)| model.beta(i) * v.sqrt()).collect();
    Ok(IntervalBox::centered(&p.mean, &half))
}

/// `F(x, u) ⊕ W`.
pub fn enclosure_with_noise(model: &GpModel, x: &[f64], u: &[f64]) -> Result<IntervalBox, GpError> {
    let sw: Vec<f64> = model.hyperparams().outputs.iter().map(|p| p.sigma_w).collect();
    Ok(enclosure(model, x, u)?.widen(&sw))
}

/// `ζ_i` evaluated with `δ_N(x2, u)` from the model.
pub fn zeta(ctx: &MetricContext, model: &GpModel, d: &[f64], x2: &[f64], u: &[f64]) -> Result<Vec<f64>, GpError> {
    Ok(ctx.zeta_with_delta(d, &delta(model, x2, u)?))
}

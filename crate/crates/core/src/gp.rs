//! Per-output Gaussian-process regression with squared-exponential kernels
//! and the deterministic RKHS error-bound scalar β.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("kernel matrix of output {dim} not positive definite (jitter up to {jitter:e})")]
    NotPositiveDefinite { dim: usize, jitter: f64 },
    #[error("beta radicand {radicand:e} < 0 for output {dim}: b too small for the data")]
    NegativeBetaRadicand { dim: usize, radicand: f64 },
    #[error("posterior variance {value:e} < 0 for output {dim}")]
    NegativeVariance { dim: usize, value: f64 },
    #[error("dataset csv: {0}")]
    Csv(String),
}

/// Kernel and bound parameters for one output dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputParams {
    pub alpha: f64,
    /// Length-scales over `[x; u]`; the kernel uses their squares.
    pub lengthscales: Vec<f64>,
    pub b: f64,
    pub sigma_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub n_x: usize,
    pub n_u: usize,
    pub outputs: Vec<OutputParams>,
}

impl Hyperparams {
    /// Same parameters for every output dimension.
    pub fn uniform(n_x: usize, n_u: usize, p: OutputParams) -> Self {
        Self { n_x, n_u, outputs: vec![p; n_x] }
    }

    pub fn input_dim(&self) -> usize {
        self.n_x + self.n_u
    }

    pub fn validate(&self) -> Result<(), GpError> {
        let bad = |m: String| Err(GpError::InvalidHyperparams(m));
        if self.n_x == 0 {
            return bad("n_x must be positive".into());
        }
        if self.outputs.len() != self.n_x {
            return bad(format!("{} output blocks for n_x = {}", self.outputs.len(), self.n_x));
        }
        for (i, p) in self.outputs.iter().enumerate() {
            if !(p.alpha > 0.0 && p.alpha.is_finite()) {
                return bad(format!("alpha[{i}] must be positive"));
            }
            if p.lengthscales.len() != self.input_dim() {
                return bad(format!(
                    "lengthscales[{i}] has {} entries, expected {}",
                    p.lengthscales.len(),
                    self.input_dim()
                ));
            }
            if p.lengthscales.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
                return bad(format!("lengthscales[{i}] must be positive"));
            }
            if !(p.b > 0.0) {
                return bad(format!("b[{i}] must be positive"));
            }
            if !(p.sigma_w >= 0.0) {
                return bad(format!("sigma_w[{i}] must be nonnegative"));
            }
        }
        Ok(())
    }

    /// `k_i(z1, z2) = α_i² exp(−½ ‖z1 − z2‖²_{Λ_i⁻¹})`.
    pub fn kernel(&self, i: usize, z1: &[f64], z2: &[f64]) -> Result<f64, GpError> {
        let d = self.input_dim();
        for z in [z1, z2] {
            if z.len() != d {
                return Err(GpError::DimensionMismatch { expected: d, got: z.len() });
            }
        }
        let p = &self.outputs[i];
        Ok(p.alpha * p.alpha * unit_kernel(z1, z2, &p.lengthscales))
    }

    /// Checks `α_i b_p ≤ √λ_{i,p}` for all output pairs (i, p), the condition
    /// used for the backward monotonicity of the trigger radii.
    pub fn assumption3_holds(&self) -> bool {
        self.outputs.iter().all(|pi| {
            self.outputs
                .iter()
                .enumerate()
                .all(|(p, pp)| pi.alpha * pp.b <= pi.lengthscales[p] * (1.0 + 1e-12))
        })
    }
}

pub(crate) fn unit_kernel(z1: &[f64], z2: &[f64], ls: &[f64]) -> f64 {
    let s: f64 = z1
        .iter()
        .zip(z2)
        .zip(ls)
        .map(|((a, b), l)| {
            let d = (a - b) / l;
            d * d
        })
        .sum();
    (-0.5 * s).exp()
}

/// Training data `Z_N` (rows `[x; u]`) and per-output targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    n_x: usize,
    n_u: usize,
    z: Vec<f64>,
    y: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(n_x: usize, n_u: usize) -> Self {
        Self { n_x, n_u, z: Vec::new(), y: vec![Vec::new(); n_x] }
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn len(&self) -> usize {
        self.y[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends the sample `(x, u) ↦ y` where `y` is the observed successor.
    pub fn push(&mut self, x: &[f64], u: &[f64], y: &[f64]) -> Result<(), GpError> {
        for (v, n) in [(x, self.n_x), (u, self.n_u), (y, self.n_x)] {
            if v.len() != n {
                return Err(GpError::DimensionMismatch { expected: n, got: v.len() });
            }
        }
        self.z.extend_from_slice(x);
        self.z.extend_from_slice(u);
        for (col, &v) in self.y.iter_mut().zip(y) {
            col.push(v);
        }
        Ok(())
    }

    pub fn extend(&mut self, other: &Dataset) -> Result<(), GpError> {
        if other.n_x != self.n_x || other.n_u != self.n_u {
            return Err(GpError::DimensionMismatch { expected: self.n_x, got: other.n_x });
        }
        self.z.extend_from_slice(&other.z);
        for (a, b) in self.y.iter_mut().zip(&other.y) {
            a.extend_from_slice(b);
        }
        Ok(())
    }

    pub fn input(&self, t: usize) -> &[f64] {
        let d = self.n_x + self.n_u;
        &self.z[t * d..(t + 1) * d]
    }

    pub fn targets(&self, i: usize) -> &[f64] {
        &self.y[i]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), GpError> {
        let mut wr = csv::Writer::from_writer(w);
        let header: Vec<String> = (1..=self.n_x)
            .map(|i| format!("x{i}"))
            .chain((1..=self.n_u).map(|i| format!("u{i}")))
            .chain((1..=self.n_x).map(|i| format!("y{i}")))
            .collect();
        wr.write_record(&header).map_err(csv_err)?;
        for t in 0..self.len() {
            let row: Vec<String> = self
                .input(t)
                .iter()
                .copied()
                .chain(self.y.iter().map(|c| c[t]))
                .map(|v| format!("{v:e}"))
                .collect();
            wr.write_record(&row).map_err(csv_err)?;
        }
        wr.flush().map_err(|e| GpError::Csv(e.to_string()))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, GpError> {
        let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        let header = rd.headers().map_err(csv_err)?.clone();
        let count = |p: char| header.iter().filter(|h| h.starts_with(p)).count();
        let (n_x, n_u) = (count('x'), count('u'));
        if count('y') != n_x || header.len() != 2 * n_x + n_u {
            return Err(GpError::Csv(format!("unexpected header {header:?}")));
        }
        let mut ds = Dataset::new(n_x, n_u);
        for rec in rd.records() {
            let rec = rec.map_err(csv_err)?;
            let v: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| GpError::Csv(e.to_string())))
                .collect::<Result<_, _>>()?;
            ds.push(&v[..n_x], &v[n_x..n_x + n_u], &v[n_x + n_u..])?;
        }
        Ok(ds)
    }
}

fn csv_err(e: csv::Error) -> GpError {
    GpError::Csv(e.to_string())
}

/// Cholesky factor of `K + σ²I`, stored as packed lower-triangular rows.
#[derive(Debug, Clone)]
struct Factor {
    rows: Vec<f64>,
    n: usize,
    jitter: f64,
}

impl Factor {
    fn row(&self, i: usize) -> &[f64] {
        let s = i * (i + 1) / 2;
        &self.rows[s..s + i + 1]
    }

    /// Solves `L v = k` in place.
    fn forward(&self, v: &mut [f64]) {
        for i in 0..self.n {
            let r = self.row(i);
            let acc: f64 = r[..i].iter().zip(&v[..i]).map(|(a, b)| a * b).sum();
            v[i] = (v[i] - acc) / r[i];
        }
    }

    fn backward(&self, v: &mut [f64]) {
        for i in (0..self.n).rev() {
            let mut acc = v[i];
            for j in i + 1..self.n {
                acc -= self.row(j)[i] * v[j];
            }
            v[i] = acc / self.row(i)[i];
        }
    }

    fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| if j <= i { self.row(i)[j] } else { 0.0 })
    }
}

#[derive(Debug, Clone)]
struct OutputPosterior {
    /// Index into the model's length-scale groups.
    group: usize,
    /// Index into the model's factors.
    factor: usize,
    weights: Vec<f64>,
    beta: f64,
}

/// Fitted GP posterior for all outputs. Immutable after [`GpModel::fit`].
#[derive(Debug, Clone)]
pub struct GpModel {
    hp: Hyperparams,
    z: Vec<f64>,
    n: usize,
    /// Distinct length-scale vectors (as reciprocals) shared between outputs.
    groups: Vec<Vec<f64>>,
    factors: Vec<Factor>,
    outputs: Vec<OutputPosterior>,
}

/// Posterior moments at one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

const JITTER_START: f64 = 1e-12;
const JITTER_MAX: f64 = 1e-6;
const BETA_CLIP: f64 = 1e-9;

impl GpModel {
    pub fn fit(data: &Dataset, hp: &Hyperparams) -> Result<Self, GpError> {
        hp.validate()?;
        if data.n_x != hp.n_x || data.n_u != hp.n_u {
            return Err(GpError::DimensionMismatch { expected: hp.input_dim(), got: data.n_x + data.n_u });
        }
        if data.is_empty() {
            return Err(GpError::EmptyDataset);
        }
        let n = data.len();
        let d = hp.input_dim();
        let mut groups: Vec<Vec<f64>> = Vec::new();
        let mut factor_keys: Vec<(usize, u64, u64)> = Vec::new();
        let mut factors = Vec::new();
        let mut outputs = Vec::with_capacity(hp.n_x);
        for (i, p) in hp.outputs.iter().enumerate() {
            let inv: Vec<f64> = p.lengthscales.iter().map(|l| 1.0 / l).collect();
            let group = match groups.iter().position(|g| *g == inv) {
                Some(g) => g,
                None => {
                    groups.push(inv);
                    groups.len() - 1
                }
            };
            let key = (group, p.alpha.to_bits(), p.sigma_w.to_bits());
            let factor = match factor_keys.iter().position(|k| *k == key) {
                Some(f) => f,
                None => {
                    factors.push(factorize(data, d, n, p, i)?);
                    factor_keys.push(key);
                    factors.len() - 1
                }
            };
            let f = &factors[factor];
            let mut w = data.y[i].clone();
            f.forward(&mut w);
            let yky: f64 = w.iter().map(|v| v * v).sum();
            f.backward(&mut w);
            let radicand = p.b * p.b - yky + n as f64;
            let beta = if radicand >= 0.0 {
                radicand.sqrt()
            } else if radicand >= -BETA_CLIP {
                0.0
            } else {
                return Err(GpError::NegativeBetaRadicand { dim: i, radicand });
            };
            outputs.push(OutputPosterior { group, factor, weights: w, beta });
        }
        Ok(Self { hp: hp.clone(), z: data.z.clone(), n, groups, factors, outputs })
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn n_x(&self) -> usize {
        self.hp.n_x
    }

    pub fn n_u(&self) -> usize {
        self.hp.n_u
    }

    pub fn data_len(&self) -> usize {
        self.n
    }

    pub fn beta(&self, i: usize) -> f64 {
        self.outputs[i].beta
    }

    pub fn betas(&self) -> Vec<f64> {
        self.outputs.iter().map(|o| o.beta).collect()
    }

    pub fn jitter(&self, i: usize) -> f64 {
        self.factors[self.outputs[i].factor].jitter
    }

    pub fn weights(&self, i: usize) -> &[f64] {
        &self.outputs[i].weights
    }

    pub fn training_input(&self, t: usize) -> &[f64] {
        let d = self.hp.input_dim();
        &self.z[t * d..(t + 1) * d]
    }

    /// Lower Cholesky factor of `K_i + σ²I` as a dense matrix.
    pub fn cholesky_factor(&self, i: usize) -> DMatrix<f64> {
        self.factors[self.outputs[i].factor].to_matrix()
    }

    pub(crate) fn group_of(&self, i: usize) -> usize {
        self.outputs[i].group
    }

    pub(crate) fn factor_of(&self, i: usize) -> usize {
        self.outputs[i].factor
    }

    pub(crate) fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub(crate) fn n_factors(&self) -> usize {
        self.factors.len()
    }

    pub(crate) fn group_inv_lengths(&self, g: usize) -> &[f64] {
        &self.groups[g]
    }

    /// Explicit `L⁻¹` of a factor, for batched variance evaluation.
    pub(crate) fn factor_inverse(&self, f: usize) -> DMatrix<f64> {
        let l = self.factors[f].to_matrix();
        let n = l.nrows();
        l.solve_lower_triangular(&DMatrix::identity(n, n)).expect("Cholesky diagonal is positive")
    }

    fn check(&self, x: &[f64], u: &[f64]) -> Result<(), GpError> {
        if x.len() != self.hp.n_x {
            return Err(GpError::DimensionMismatch { expected: self.hp.n_x, got: x.len() });
        }
        if u.len() != self.hp.n_u {
            return Err(GpError::DimensionMismatch { expected: self.hp.n_u, got: u.len() });
        }
        Ok(())
    }

    /// Unit-amplitude kernel vectors, one per length-scale group.
    fn unit_vectors(&self, x: &[f64], u: &[f64]) -> Vec<Vec<f64>> {
        let d = self.hp.input_dim();
        self.groups
            .iter()
            .map(|inv| {
                (0..self.n)
                    .map(|t| {
                        let row = &self.z[t * d..(t + 1) * d];
                        let mut s = 0.0;
                        for (k, q) in x.iter().chain(u).enumerate() {
                            let e = (q - row[k]) * inv[k];
                            s += e * e;
                        }
                        (-0.5 * s).exp()
                    })
                    .collect()
            })
            .collect()
    }

    /// Posterior mean `μ_f(x, u)` stacked over outputs.
    pub fn predict_mean(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, GpError> {
        self.check(x, u)?;
        Ok(self.mean_unchecked(x, u))
    }

    pub(crate) fn mean_unchecked(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let kv = self.unit_vectors(x, u);
        self.outputs
            .iter()
            .zip(&self.hp.outputs)
            .map(|(o, p)| {
                let dot: f64 = kv[o.group].iter().zip(&o.weights).map(|(a, b)| a * b).sum();
                p.alpha * p.alpha * dot
            })
            .collect()
    }

    pub fn predict_variance(&self, x: &[f64], u: &[f64], i: usize) -> Result<f64, GpError> {
        Ok(self.predict(x, u)?.var[i])
    }

    /// Mean and variance for all outputs, sharing kernel evaluations.
    pub fn predict(&self, x: &[f64], u: &[f64]) -> Result<Prediction, GpError> {
        self.check(x, u)?;
        let kv = self.unit_vectors(x, u);
        // ‖L⁻¹ k0‖² per factor; the variance scales it by α⁴.
        let mut quad: Vec<Option<f64>> = vec![None; self.factors.len()];
        let mut mean = Vec::with_capacity(self.hp.n_x);
        let mut var = Vec::with_capacity(self.hp.n_x);
        for (i, (o, p)) in self.outputs.iter().zip(&self.hp.outputs).enumerate() {
            let a2 = p.alpha * p.alpha;
            let k0 = &kv[o.group];
            mean.push(a2 * k0.iter().zip(&o.weights).map(|(a, b)| a * b).sum::<f64>());
            let q = *quad[o.factor].get_or_insert_with(|| {
                let mut v = k0.clone();
                self.factors[o.factor].forward(&mut v);
                v.iter().map(|t| t * t).sum()
            });
            let s2 = a2 - a2 * a2 * q;
            var.push(clamp_variance(s2, a2, i)?);
        }
        Ok(Prediction { mean, var })
    }

    /// Posterior standard deviations `σ_{f_i}(x, u)`.
    pub fn predict_std(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, GpError> {
        Ok(self.predict(x, u)?.var.into_iter().map(f64::sqrt).collect())
    }
}

pub(crate) fn clamp_variance(s2: f64, a2: f64, dim: usize) -> Result<f64, GpError> {
    if s2 >= 0.0 {
        Ok(s2.min(a2))
    } else if s2 >= -1e-8 * a2 {
        Ok(0.0)
    } else {
        Err(GpError::NegativeVariance { dim, value: s2 })
    }
}

fn factorize(data: &Dataset, d: usize, n: usize, p: &OutputParams, dim: usize) -> Result<Factor, GpError> {
    let a2 = p.alpha * p.alpha;
    let base = DMatrix::from_fn(n, n, |r, c| {
        let k = a2 * unit_kernel(&data.z[r * d..(r + 1) * d], &data.z[c * d..(c + 1) * d], &p.lengthscales);
        if r == c {
            k + p.sigma_w * p.sigma_w
        } else {
            k
        }
    });
    let mut jitter = 0.0;
    loop {
        let mut m = base.clone();
        for k in 0..n {
            m[(k, k)] += jitter;
        }
        if let Some(ch) = m.cholesky() {
            if jitter > 0.0 {
                log::warn!("output {dim}: kernel matrix needed jitter {jitter:e}");
            }
            let l = ch.l();
            let mut rows = Vec::with_capacity(n * (n + 1) / 2);
            for r in 0..n {
                rows.extend((0..=r).map(|c| l[(r, c)]));
            }
            return Ok(Factor { rows, n, jitter });
        }
        jitter = if jitter == 0.0 { JITTER_START * a2 } else { jitter * 10.0 };
        if jitter > JITTER_MAX * a2 * (1.0 + 1e-9) {
            return Err(GpError::NotPositiveDefinite { dim, jitter: JITTER_MAX * a2 });
        }
    }
}

/// Log marginal likelihood of output `i` under `hp`.
pub fn log_marginal_likelihood(data: &Dataset, hp: &Hyperparams, i: usize) -> Result<f64, GpError> {
    hp.validate()?;
    let n = data.len();
    let f = factorize(data, hp.input_dim(), n, &hp.outputs[i], i)?;
    let mut v = data.y[i].clone();
    f.forward(&mut v);
    let fit: f64 = v.iter().map(|t| t * t).sum();
    let logdet: f64 = (0..n).map(|k| f.row(k)[k].ln()).sum();
    Ok(-0.5 * fit - logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Coordinate search over `ln α` and `ln ℓ` maximizing the marginal
/// likelihood of each output. Offline utility; the control loop uses the
/// configured hyperparameters as given.
pub fn fit_hyperparams(data: &Dataset, init: &Hyperparams, sweeps: usize) -> Result<Hyperparams, GpError> {
    let mut hp = init.clone();
    for i in 0..hp.n_x {
        let mut best = log_marginal_likelihood(data, &hp, i)?;
        let mut step: f64 = 0.5;
        for _ in 0..sweeps {
            let mut improved = false;
            for k in 0..=hp.input_dim() {
                for dir in [1.0, -1.0] {
                    let mut trial = hp.clone();
                    let slot = match k {
                        0 => &mut trial.outputs[i].alpha,
                        k => &mut trial.outputs[i].lengthscales[k - 1],
                    };
                    *slot *= (dir * step).exp();
                    if let Ok(v) = log_marginal_likelihood(data, &trial, i) {
                        if v > best {
                            best = v;
                            hp = trial;
                            improved = true;
                        }
                    }
                }
            }
            if !improved {
                step *= 0.5;
                if step < 1e-3 {
                    break;
                }
            }
        }
    }
    Ok(hp)
}

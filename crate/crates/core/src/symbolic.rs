//! Symbolic abstraction of the learned model, the γ̃-augmented safety game
//! and the terminal set / safety controller built from its fixed point.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{solve_safety, FixedPoint, GameArena};
use crate::gp::{clamp_variance, GpError, GpModel, Hyperparams};
use crate::lattice::{
    int_shrink, out_grow, squared_distance_transform, BoxCounter, Grown, Lattice, LatticeError,
    LatticeSet, Stencil,
};
use crate::metric::{IntervalBox, MetricContext, MetricError};

/// Largest state dimension handled by the symbolic layer.
pub const MAX_DIM: usize = 4;

#[derive(Debug, Error)]
pub enum SymbolicError {
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("state dimension {0} exceeds the supported {MAX_DIM}")]
    TooManyDims(usize),
    #[error("input lattice is empty")]
    EmptyInputs,
    #[error("epsilon[{dim}] = {eps} outside [{lower}, {sup})")]
    EpsilonInterval { dim: usize, eps: f64, lower: f64, sup: f64 },
    #[error("contraction integer z[{0}] must be at least 1")]
    ZeroContraction(usize),
    #[error(
        "data too uncertain for contractive synthesis: gamma_tilde[{dim}] = {gamma_tilde:.4e} < gamma_bar = {gamma_bar:.4e} (increase z)"
    )]
    TooUncertain { dim: usize, gamma_tilde: f64, gamma_bar: f64 },
    #[error("contractive set is empty")]
    EmptySafeSet,
    #[error("terminal set is empty after shrinking the safe set")]
    EmptyTerminal,
}

/// `√(2α_i²(1 − exp(−½‖η_x‖²_{Λ_{x,i}⁻¹})))`, the smallest admissible ε_i.
pub fn epsilon_lower_bound(hp: &Hyperparams, eta_x: &[f64]) -> Vec<f64> {
    let ctx = MetricContext::new(hp);
    (0..hp.n_x).map(|i| ctx.from_weighted_sq(i, ctx.weighted_sq(i, eta_x))).collect()
}

/// `γ̃_i = √(2α_i²(1 − exp(−(2z_i²/n)‖η_x‖²_{Λ_{x,i}⁻¹})))`.
pub fn contractive_radii(hp: &Hyperparams, eta_x: &[f64], z: &[u32]) -> Result<Vec<f64>, SymbolicError> {
    let ctx = MetricContext::new(hp);
    let n = hp.n_x as f64;
    (0..hp.n_x)
        .map(|i| {
            let zi = z[i];
            if zi == 0 {
                return Err(SymbolicError::ZeroContraction(i));
            }
            let w = 4.0 * (zi as f64).powi(2) / n * ctx.weighted_sq(i, eta_x);
            Ok(ctx.from_weighted_sq(i, w))
        })
        .collect()
}

/// Far-from-data value `d_i(0, β α + σ_w)` of the uncertainty metric.
pub fn gamma_bar_plateau(model: &GpModel) -> Vec<f64> {
    let hp = model.hyperparams();
    let ctx = MetricContext::new(hp);
    let v: Vec<f64> = hp
        .outputs
        .iter()
        .enumerate()
        .map(|(i, p)| model.beta(i) * p.alpha + p.sigma_w)
        .collect();
    (0..hp.n_x).map(|i| ctx.from_weighted_sq(i, ctx.weighted_sq(i, &v))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsilonPolicy {
    /// The lower bound itself.
    LowerBound,
    /// The lower bound times a factor ≥ 1.
    Scaled(f64),
}

/// Quantization and specification parameters of the abstraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbstractionConfig {
    pub spec_set: IntervalBox,
    pub input_set: IntervalBox,
    pub eta_x: Vec<f64>,
    pub eta_u: Vec<f64>,
    pub z: Vec<u32>,
    pub epsilon: EpsilonPolicy,
}

/// Successor box of one (state, input) pair as inclusive zero-based ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub input: u32,
    pub lo: [u16; MAX_DIM],
    pub hi: [u16; MAX_DIM],
}

impl Transition {
    pub fn lo(&self, n: usize) -> [usize; MAX_DIM] {
        let mut o = [0; MAX_DIM];
        for j in 0..n {
            o[j] = self.lo[j] as usize;
        }
        o
    }

    pub fn hi(&self, n: usize) -> [usize; MAX_DIM] {
        let mut o = [0; MAX_DIM];
        for j in 0..n {
            o[j] = self.hi[j] as usize;
        }
        o
    }
}

/// Σ_q: state/input lattices and the over-approximating transition map.
#[derive(Debug, Clone)]
pub struct SymbolicModel {
    states: Lattice,
    inputs: Lattice,
    input_points: Vec<Vec<f64>>,
    ctx: MetricContext,
    eps: Vec<f64>,
    gamma_tilde: Vec<f64>,
    stencil: Stencil,
    /// Half-widths `b_i ε_i + η_{x,i}` of E.
    e_half: Vec<f64>,
    row_start: Vec<usize>,
    transitions: Vec<Transition>,
}

/// Everything Σ_q needs besides the transition map.
struct Skeleton {
    states: Lattice,
    inputs: Lattice,
    input_points: Vec<Vec<f64>>,
    ctx: MetricContext,
    eps: Vec<f64>,
    gamma_tilde: Vec<f64>,
    stencil: Stencil,
    e_half: Vec<f64>,
}

fn skeleton(hp: &Hyperparams, cfg: &AbstractionConfig) -> Result<Skeleton, SymbolicError> {
    hp.validate()?;
    if hp.n_x > MAX_DIM {
        return Err(SymbolicError::TooManyDims(hp.n_x));
    }
    let states = Lattice::new(&cfg.eta_x, &cfg.spec_set)?;
    let inputs = Lattice::new(&cfg.eta_u, &cfg.input_set).map_err(|e| match e {
        LatticeError::EmptyAxis(_) => SymbolicError::EmptyInputs,
        e => e.into(),
    })?;
    let ctx = MetricContext::new(hp);
    let lower = epsilon_lower_bound(hp, &cfg.eta_x);
    let eps: Vec<f64> = match cfg.epsilon {
        EpsilonPolicy::LowerBound => lower.clone(),
        EpsilonPolicy::Scaled(f) => lower.iter().map(|l| l * f).collect(),
    };
    for (i, (&e, &l)) in eps.iter().zip(&lower).enumerate() {
        let sup = ctx.sup(i);
        if !(e >= l && e < sup) {
            return Err(SymbolicError::EpsilonInterval { dim: i, eps: e, lower: l, sup });
        }
    }
    let gamma_tilde = contractive_radii(hp, &cfg.eta_x, &cfg.z)?;
    let stencil = Stencil::ball(&states, &ctx, &gamma_tilde)?;
    let e_half = (0..hp.n_x).map(|i| hp.outputs[i].b * eps[i] + cfg.eta_x[i]).collect();
    let input_points = (0..inputs.len()).map(|k| inputs.point(k)).collect();
    Ok(Skeleton { states, inputs, input_points, ctx, eps, gamma_tilde, stencil, e_half })
}

/// Batched posterior moments over (state lattice × input lattice), using the
/// separability of the SE kernel between state and input coordinates.
struct PairEvaluator<'a> {
    model: &'a GpModel,
    /// `ku[g]`: N × inputs unit kernel factors of the input coordinates.
    ku: Vec<DMatrix<f64>>,
    linv: Vec<DMatrix<f64>>,
}

struct ChunkMoments {
    /// `mean[i]`: chunk × inputs.
    mean: Vec<DMatrix<f64>>,
    /// Unit kernel factors of the state coordinates, per group: chunk × N.
    kx: Vec<DMatrix<f64>>,
}

impl<'a> PairEvaluator<'a> {
    fn new(model: &'a GpModel, input_points: &[Vec<f64>]) -> Self {
        let n_x = model.n_x();
        let n = model.data_len();
        let ku = (0..model.n_groups())
            .map(|g| {
                let inv = model.group_inv_lengths(g);
                DMatrix::from_fn(n, input_points.len(), |t, k| {
                    let z = model.training_input(t);
                    let s: f64 = input_points[k]
                        .iter()
                        .enumerate()
                        .map(|(j, u)| ((u - z[n_x + j]) * inv[n_x + j]).powi(2))
                        .sum();
                    (-0.5 * s).exp()
                })
            })
            .collect();
        let linv = (0..model.n_factors()).map(|f| model.factor_inverse(f)).collect();
        Self { model, ku, linv }
    }

    fn chunk(&self, points: &[Vec<f64>]) -> ChunkMoments {
        let m = self.model;
        let n = m.data_len();
        let n_x = m.n_x();
        let kx: Vec<DMatrix<f64>> = (0..m.n_groups())
            .map(|g| {
                let inv = m.group_inv_lengths(g);
                DMatrix::from_fn(points.len(), n, |s, t| {
                    let z = m.training_input(t);
                    let e: f64 = (0..n_x).map(|j| ((points[s][j] - z[j]) * inv[j]).powi(2)).sum();
                    (-0.5 * e).exp()
                })
            })
            .collect();
        let mean = (0..n_x)
            .map(|i| {
                let g = m.group_of(i);
                let a2 = m.hyperparams().outputs[i].alpha.powi(2);
                let w = m.weights(i);
                let mut a = kx[g].clone();
                for (t, mut col) in a.column_iter_mut().enumerate() {
                    col *= a2 * w[t];
                }
                a * &self.ku[g]
            })
            .collect();
        ChunkMoments { mean, kx }
    }

    /// Variances of all outputs for the chunk rows `rows` under input `k`.
    fn variances(&self, c: &ChunkMoments, k: usize, rows: &[usize]) -> Result<Vec<Vec<f64>>, GpError> {
        let m = self.model;
        let n = m.data_len();
        let mut per_factor: Vec<Option<Vec<f64>>> = vec![None; self.linv.len()];
        let mut out = Vec::with_capacity(m.n_x());
        for i in 0..m.n_x() {
            let f = m.factor_of(i);
            let g = m.group_of(i);
            if per_factor[f].is_none() {
                let p = DMatrix::from_fn(n, rows.len(), |t, r| c.kx[g][(rows[r], t)] * self.ku[g][(t, k)]);
                let v = &self.linv[f] * p;
                per_factor[f] = Some(v.column_iter().map(|col| col.norm_squared()).collect());
            }
            let a2 = m.hyperparams().outputs[i].alpha.powi(2);
            let q = per_factor[f].as_ref().expect("filled above");
            out.push(q.iter().map(|q| clamp_variance(a2 - a2 * a2 * q, a2, i)).collect::<Result<Vec<_>, _>>()?);
        }
        Ok(out)
    }
}

const CHUNK_CELLS: usize = 1 << 21;

impl SymbolicModel {
    /// Builds Σ_q: every pair's successors are the lattice cells whose centers
    /// lie in `F ⊕ W ⊕ E`; pairs whose box leaves the domain are blocked.
    pub fn build(model: &GpModel, cfg: &AbstractionConfig) -> Result<Self, SymbolicError> {
        let sk = skeleton(model.hyperparams(), cfg)?;
        let hp = model.hyperparams();
        let n_x = hp.n_x;
        let h0: Vec<f64> = (0..n_x).map(|i| hp.outputs[i].sigma_w + sk.e_half[i]).collect();
        let beta = model.betas();
        let n_in = sk.inputs.len();
        let eval = PairEvaluator::new(model, &sk.input_points);
        let chunk = (CHUNK_CELLS / n_in.max(1)).max(1);
        let mut row_start = Vec::with_capacity(sk.states.len() + 1);
        let mut transitions = Vec::new();
        row_start.push(0);
        let mut start = 0;
        while start < sk.states.len() {
            let end = (start + chunk).min(sk.states.len());
            let pts: Vec<Vec<f64>> = (start..end).map(|s| sk.states.point(s)).collect();
            let cm = eval.chunk(&pts);
            // pairs whose narrowest possible box already leaves the domain are blocked
            let mut by_input: Vec<Vec<usize>> = vec![Vec::new(); n_in];
            for r in 0..pts.len() {
                for (k, rows) in by_input.iter_mut().enumerate() {
                    let fits = (0..n_x).all(|i| {
                        let mu = cm.mean[i][(r, k)];
                        in_domain(&sk.states, i, mu - h0[i], mu + h0[i])
                    });
                    if fits {
                        rows.push(r);
                    }
                }
            }
            let mut found: Vec<Vec<Transition>> = vec![Vec::new(); pts.len()];
            for (k, rows) in by_input.iter().enumerate() {
                if rows.is_empty() {
                    continue;
                }
                let var = eval.variances(&cm, k, rows)?;
                for (q, &r) in rows.iter().enumerate() {
                    let mut tr = Transition { input: k as u32, lo: [0; MAX_DIM], hi: [0; MAX_DIM] };
                    let ok = (0..n_x).all(|i| {
                        let mu = cm.mean[i][(r, k)];
                        let h = beta[i] * var[i][q].sqrt() + h0[i];
                        let (a, b) = sk.states.cell_range(i, mu - h, mu + h);
                        if a < 0 || b >= sk.states.counts()[i] as i64 || b < a {
                            return false;
                        }
                        tr.lo[i] = a as u16;
                        tr.hi[i] = b as u16;
                        true
                    });
                    if ok {
                        found[r].push(tr);
                    }
                }
            }
            for f in found {
                transitions.extend(f);
                row_start.push(transitions.len());
            }
            start = end;
        }
        let Skeleton { states, inputs, input_points, ctx, eps, gamma_tilde, stencil, e_half } = sk;
        Ok(Self { states, inputs, input_points, ctx, eps, gamma_tilde, stencil, e_half, row_start, transitions })
    }

    /// Σ_q from explicitly given successor boxes, `None` meaning blocked.
    /// Used to build abstractions from known enclosures.
    pub fn from_boxes(
        hp: &Hyperparams,
        cfg: &AbstractionConfig,
        mut boxes: impl FnMut(&[f64], &[f64]) -> Option<IntervalBox>,
    ) -> Result<Self, SymbolicError> {
        let sk = skeleton(hp, cfg)?;
        let mut row_start = vec![0];
        let mut transitions = Vec::new();
        for s in 0..sk.states.len() {
            let x = sk.states.point(s);
            for (k, u) in sk.input_points.iter().enumerate() {
                let Some(bx) = boxes(&x, u) else { continue };
                let bx = bx.widen(&sk.e_half);
                let mut tr = Transition { input: k as u32, lo: [0; MAX_DIM], hi: [0; MAX_DIM] };
                let ok = (0..hp.n_x).all(|i| {
                    let (a, b) = sk.states.cell_range(i, bx.lower[i], bx.upper[i]);
                    if a < 0 || b >= sk.states.counts()[i] as i64 || b < a {
                        return false;
                    }
                    tr.lo[i] = a as u16;
                    tr.hi[i] = b as u16;
                    true
                });
                if ok {
                    transitions.push(tr);
                }
            }
            row_start.push(transitions.len());
        }
        let Skeleton { states, inputs, input_points, ctx, eps, gamma_tilde, stencil, e_half } = sk;
        Ok(Self { states, inputs, input_points, ctx, eps, gamma_tilde, stencil, e_half, row_start, transitions })
    }

    pub fn states(&self) -> &Lattice {
        &self.states
    }

    pub fn inputs(&self) -> &Lattice {
        &self.inputs
    }

    pub fn input_point(&self, k: usize) -> &[f64] {
        &self.input_points[k]
    }

    pub fn ctx(&self) -> &MetricContext {
        &self.ctx
    }

    pub fn epsilon(&self) -> &[f64] {
        &self.eps
    }

    pub fn gamma_tilde(&self) -> &[f64] {
        &self.gamma_tilde
    }

    pub fn stencil(&self) -> &Stencil {
        &self.stencil
    }

    pub fn e_half(&self) -> &[f64] {
        &self.e_half
    }

    pub fn n_transitions(&self) -> usize {
        self.transitions.len()
    }

    /// Non-blocked transitions of a state, ordered by input index.
    pub fn transitions(&self, x: usize) -> &[Transition] {
        &self.transitions[self.row_start[x]..self.row_start[x + 1]]
    }

    pub fn transition(&self, x: usize, u: usize) -> Option<&Transition> {
        let t = self.transitions(x);
        t.binary_search_by_key(&(u as u32), |tr| tr.input).ok().map(|k| &t[k])
    }

    fn box_set(&self, tr: &Transition) -> LatticeSet {
        let n = self.states.dim();
        let (lo, hi) = (tr.lo(n), tr.hi(n));
        LatticeSet::from_indices(
            self.states.len(),
            (0..self.states.len()).filter(|&s| {
                let c = self.states.local(s);
                (0..n).all(|j| lo[j] <= c[j] && c[j] <= hi[j])
            }),
        )
    }

    /// `G_q(x, u)`; `None` when the input is blocked.
    pub fn successors(&self, x: usize, u: usize) -> Option<LatticeSet> {
        self.transition(x, u).map(|tr| self.box_set(tr))
    }

    /// `G_qγ̃(x, u) = ⋃_i Õut_{d_i}(G_q(x, u); γ̃_i)`.
    pub fn augmented_successors(&self, x: usize, u: usize) -> Option<Grown> {
        self.successors(x, u).map(|s| out_grow(&self.states, &s, &self.stencil))
    }

    /// Discrete interior `⋂_i Ĩnt_{d_i}(q; γ̃_i)`.
    pub fn interior(&self, q: &LatticeSet) -> LatticeSet {
        int_shrink(&self.states, q, &self.stencil)
    }

    /// Inputs of `x` with every augmented successor in the set whose interior
    /// is counted by `interior`.
    fn admissible_with(&self, x: usize, interior: &BoxCounter) -> impl Iterator<Item = &Transition> + '_ {
        let n = self.states.dim();
        let interior = interior.clone();
        self.transitions(x).iter().filter(move |tr| interior.box_full(&tr.lo(n)[..n], &tr.hi(n)[..n]))
    }

    /// `[⋂_i Int_{d_i}(X; ε_i)]_η`.
    pub fn initial_set(&self, spec: &IntervalBox) -> Result<LatticeSet, SymbolicError> {
        let inner = self.ctx.int_box(spec, &self.eps)?;
        Ok(match inner {
            None => LatticeSet::empty(self.states.len()),
            Some(b) => {
                LatticeSet::from_indices(self.states.len(), (0..self.states.len()).filter(|&s| b.contains(&self.states.point(s))))
            }
        })
    }
}

fn in_domain(l: &Lattice, axis: usize, lo: f64, hi: f64) -> bool {
    let (a, b) = l.cell_range(axis, lo, hi);
    a >= 0 && b < l.counts()[axis] as i64
}

/// The γ̃-augmented model Σ_qγ̃ as a game arena. Uses
/// `G_qγ̃(x,u) ⊆ Q ⇔ G_q(x,u) ⊆ ⋂_i Ĩnt_{d_i}(Q; γ̃_i)`.
impl GameArena for SymbolicModel {
    fn num_states(&self) -> usize {
        self.states.len()
    }

    fn pre(&self, q: &LatticeSet) -> LatticeSet {
        let counter = BoxCounter::new(&self.states, &self.interior(q));
        let n = self.states.dim();
        LatticeSet::from_indices(
            self.states.len(),
            q.iter().filter(|&x| {
                self.transitions(x).iter().any(|tr| counter.box_full(&tr.lo(n)[..n], &tr.hi(n)[..n]))
            }),
        )
    }
}

/// Fixed point of the augmented safety game and its discrete controller.
#[derive(Debug, Clone)]
pub struct SafeSynthesis {
    pub fixed_point: LatticeSet,
    pub iterations: usize,
    /// `⋂_i Ĩnt_{d_i}(fixed point; γ̃_i)`.
    pub interior: LatticeSet,
    ctrl_start: Vec<usize>,
    ctrl: Vec<u32>,
}

impl SafeSynthesis {
    /// `C_qγ̃(x)`: admissible input indices (empty outside the fixed point).
    pub fn controller(&self, x: usize) -> &[u32] {
        &self.ctrl[self.ctrl_start[x]..self.ctrl_start[x + 1]]
    }
}

/// Runs Pre to its fixed point from `q0` and extracts the controller.
pub fn safety_game(sym: &SymbolicModel, q0: &LatticeSet) -> SafeSynthesis {
    let FixedPoint { set, iterations } = solve_safety(sym, q0);
    let interior = sym.interior(&set);
    let counter = BoxCounter::new(sym.states(), &interior);
    let mut ctrl_start = vec![0];
    let mut ctrl = Vec::new();
    for x in 0..sym.states().len() {
        if set.contains(x) {
            ctrl.extend(sym.admissible_with(x, &counter).map(|tr| tr.input));
        }
        ctrl_start.push(ctrl.len());
    }
    SafeSynthesis { fixed_point: set, iterations, interior, ctrl_start, ctrl }
}

/// Refined terminal set `X_f`, contractive set `X_S`, and the controller `C`.
#[derive(Debug, Clone)]
pub struct Terminal {
    states: Lattice,
    ctx: MetricContext,
    eps: Vec<f64>,
    /// Per-axis half-extent of the ε-relation neighbourhood.
    eps_reach: Vec<f64>,
    xs: LatticeSet,
    xf: LatticeSet,
    xf_dist2: Vec<f64>,
    /// Chosen input per state of `X_S` (lattice input point).
    choice: Vec<Option<Vec<f64>>>,
    admissible: Vec<Vec<Vec<f64>>>,
    pub gamma: Vec<f64>,
    pub gamma_tilde: Vec<f64>,
}

impl Terminal {
    /// `X_f = ⋂_i Ĩnt_{d_i}(X_{S,q}; γ̃_i)` refined through `R(ε)`.
    pub fn refine(sym: &SymbolicModel, syn: &SafeSynthesis, gamma: &[f64]) -> Result<Self, SymbolicError> {
        if syn.fixed_point.is_empty() {
            return Err(SymbolicError::EmptySafeSet);
        }
        if syn.interior.is_empty() {
            return Err(SymbolicError::EmptyTerminal);
        }
        let states = sym.states().clone();
        let n = states.dim();
        let r2: Vec<f64> = sym.ctx().ball_sq_radii(sym.epsilon())?;
        // a point related to all d_i must lie in every ellipsoid, hence the min
        let eps_reach: Vec<f64> = (0..n)
            .map(|p| {
                r2.iter()
                    .zip(&sym.ctx().inv_lx2)
                    .map(|(r, w)| (r / w[p]).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let mut choice = vec![None; states.len()];
        let mut admissible = vec![Vec::new(); states.len()];
        for x in syn.fixed_point.iter() {
            let ins = syn.controller(x);
            admissible[x] = ins.iter().map(|&k| sym.input_point(k as usize).to_vec()).collect();
            // prefer the input whose successor box is centered closest to the origin
            let best = ins.iter().min_by(|&&a, &&b| {
                let ca = box_center_norm(sym, x, a as usize);
                let cb = box_center_norm(sym, x, b as usize);
                ca.total_cmp(&cb)
            });
            choice[x] = best.map(|&k| sym.input_point(k as usize).to_vec());
        }
        let xf_dist2 = squared_distance_transform(&states, &syn.interior);
        Ok(Self {
            states,
            ctx: sym.ctx().clone(),
            eps: sym.epsilon().to_vec(),
            eps_reach,
            xs: syn.fixed_point.clone(),
            xf: syn.interior.clone(),
            xf_dist2,
            choice,
            admissible,
            gamma: gamma.to_vec(),
            gamma_tilde: sym.gamma_tilde().to_vec(),
        })
    }

    pub fn states(&self) -> &Lattice {
        &self.states
    }

    pub fn safe_cells(&self) -> &LatticeSet {
        &self.xs
    }

    pub fn terminal_cells(&self) -> &LatticeSet {
        &self.xf
    }

    pub fn epsilon(&self) -> &[f64] {
        &self.eps
    }

    /// Lattice states related to `x` under `R(ε)`, i.e. `d_i(x_q, x) ≤ ε_i` ∀i.
    pub fn related(&self, x: &[f64]) -> Vec<usize> {
        let n = self.states.dim();
        let mut ranges = Vec::with_capacity(n);
        for j in 0..n {
            let (a, b) = self.states.cell_range(j, x[j] - self.eps_reach[j], x[j] + self.eps_reach[j]);
            let a = a.max(0);
            let b = b.min(self.states.counts()[j] as i64 - 1);
            if a > b {
                return Vec::new();
            }
            ranges.push((a as usize, b as usize));
        }
        let mut out = Vec::new();
        let mut c: Vec<usize> = ranges.iter().map(|r| r.0).collect();
        loop {
            let idx = self.states.index_local(&c);
            let p = self.states.point(idx);
            if (0..self.ctx.n()).all(|i| self.ctx.metric(i, &p, x) <= self.eps[i]) {
                out.push(idx);
            }
            let mut j = n;
            loop {
                if j == 0 {
                    return out;
                }
                j -= 1;
                if c[j] < ranges[j].1 {
                    c[j] += 1;
                    break;
                }
                c[j] = ranges[j].0;
            }
        }
    }

    fn nearest_member(&self, x: &[f64], set: &LatticeSet) -> Option<usize> {
        self.related(x)
            .into_iter()
            .filter(|&s| set.contains(s))
            .map(|s| {
                let p = self.states.point(s);
                let d: f64 = (0..self.ctx.n()).map(|i| self.ctx.metric(i, &p, x).powi(2)).sum();
                (s, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(s, _)| s)
    }

    pub fn in_safe_set(&self, x: &[f64]) -> bool {
        self.nearest_member(x, &self.xs).is_some()
    }

    pub fn in_terminal(&self, x: &[f64]) -> bool {
        self.nearest_member(x, &self.xf).is_some()
    }

    /// `C(x) = C_qγ̃(x_q)` for the nearest related state of `X_{S,q}`.
    pub fn control(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.nearest_member(x, &self.xs).and_then(|s| self.choice[s].clone())
    }

    /// The full admissible set `C(x)`.
    pub fn control_set(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.nearest_member(x, &self.xs).map(|s| self.admissible[s].clone()).unwrap_or_default()
    }

    /// Euclidean distance proxy to `X_f`, zero inside. Used to steer the OCP
    /// search toward feasibility.
    pub fn distance(&self, x: &[f64]) -> f64 {
        if self.in_terminal(x) {
            return 0.0;
        }
        let hull = self.states.hull();
        let c = hull.clamp(x);
        let outside: f64 = x.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let cell = self.states.nearest(&c).expect("clamped point lies in the lattice");
        outside + self.xf_dist2[cell].sqrt() + 1e-12
    }
}

fn box_center_norm(sym: &SymbolicModel, x: usize, k: usize) -> f64 {
    let tr = sym.transition(x, k).expect("admissible inputs are not blocked");
    let l = sym.states();
    (0..l.dim())
        .map(|j| 0.5 * (l.axis_value(j, tr.lo[j] as usize) + l.axis_value(j, tr.hi[j] as usize)))
        .map(|c| c * c)
        .sum()
}

/// How γ is chosen inside the admissible interval `[γ̄, γ̃]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaPolicy {
    /// γ = γ̃ after checking γ̄ (lattice maximum over X × U) ≤ γ̃.
    Strict,
    /// γ = γ̃ without the γ̄ check; γ̄ is still reported when computed.
    Tilde,
}

/// Diagnostics of one Algorithm-2 run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthesisReport {
    pub states: usize,
    pub inputs: usize,
    pub transitions: usize,
    pub initial: usize,
    pub safe: usize,
    pub terminal: usize,
    pub iterations: usize,
    pub epsilon: Vec<f64>,
    pub gamma_tilde: Vec<f64>,
    pub gamma: Vec<f64>,
    pub gamma_bar_lattice: Option<Vec<f64>>,
    pub gamma_bar_plateau: Vec<f64>,
}

/// `max_{(x,u) ∈ [X]×[U]} d_i(0, δ_N(x, u))`.
pub fn gamma_bar_lattice(model: &GpModel, cfg: &AbstractionConfig) -> Result<Vec<f64>, SymbolicError> {
    let sk = skeleton(model.hyperparams(), cfg)?;
    let hp = model.hyperparams();
    let n_x = hp.n_x;
    let beta = model.betas();
    let eval = PairEvaluator::new(model, &sk.input_points);
    let chunk = (CHUNK_CELLS / sk.inputs.len()).max(1);
    let mut best = vec![0.0f64; n_x];
    let mut start = 0;
    while start < sk.states.len() {
        let end = (start + chunk).min(sk.states.len());
        let pts: Vec<Vec<f64>> = (start..end).map(|s| sk.states.point(s)).collect();
        let cm = eval.chunk(&pts);
        let rows: Vec<usize> = (0..pts.len()).collect();
        for k in 0..sk.inputs.len() {
            let var = eval.variances(&cm, k, &rows)?;
            for q in 0..rows.len() {
                let d: Vec<f64> = (0..n_x).map(|i| beta[i] * var[i][q].sqrt() + hp.outputs[i].sigma_w).collect();
                for (i, b) in best.iter_mut().enumerate() {
                    *b = b.max(sk.ctx.from_weighted_sq(i, sk.ctx.weighted_sq(i, &d)));
                }
            }
        }
        start = end;
    }
    Ok(best)
}

/// Algorithm 2: abstraction, safety game and terminal-set refinement.
pub fn synthesize(
    model: &GpModel,
    cfg: &AbstractionConfig,
    policy: GammaPolicy,
) -> Result<(SymbolicModel, SafeSynthesis, Terminal, SynthesisReport), SymbolicError> {
    let gamma_tilde = contractive_radii(model.hyperparams(), &cfg.eta_x, &cfg.z)?;
    let plateau = gamma_bar_plateau(model);
    let lattice_bar = match policy {
        GammaPolicy::Strict => {
            let bar = gamma_bar_lattice(model, cfg)?;
            for (i, (&gt, &gb)) in gamma_tilde.iter().zip(&bar).enumerate() {
                if gt < gb {
                    return Err(SymbolicError::TooUncertain { dim: i, gamma_tilde: gt, gamma_bar: gb });
                }
            }
            Some(bar)
        }
        GammaPolicy::Tilde => None,
    };
    let sym = SymbolicModel::build(model, cfg)?;
    let q0 = sym.initial_set(&cfg.spec_set)?;
    let syn = safety_game(&sym, &q0);
    let gamma = gamma_tilde.clone();
    let report = SynthesisReport {
        states: sym.states().len(),
        inputs: sym.inputs().len(),
        transitions: sym.n_transitions(),
        initial: q0.count(),
        safe: syn.fixed_point.count(),
        terminal: syn.interior.count(),
        iterations: syn.iterations,
        epsilon: sym.epsilon().to_vec(),
        gamma_tilde,
        gamma: gamma.clone(),
        gamma_bar_lattice: lattice_bar,
        gamma_bar_plateau: plateau,
    };
    log::info!(
        "synthesis: {} states, {} transitions, |Q0| = {}, |X_S| = {}, |X_f| = {} after {} iterations",
        report.states,
        report.transitions,
        report.initial,
        report.safe,
        report.terminal,
        report.iterations
    );
    let term = Terminal::refine(&sym, &syn, &gamma)?;
    Ok((sym, syn, term, report))
}

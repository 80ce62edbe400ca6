//! Run configuration (TOML), validation and named presets.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::closed_loop::{
    collect_with_policy, Collection, GuessPolicy, InitialSet, PhaseSettings, PlantKind, TaskSettings,
};
use crate::gp::{Dataset, GpError, Hyperparams, OutputParams};
use crate::metric::IntervalBox;
use crate::ocp::{OcpSettings, StageCost};
use crate::plant::{sample_box, KernelExpansion, Plant, Unicycle};
use crate::symbolic::{AbstractionConfig, EpsilonPolicy, GammaPolicy};
use crate::trigger::GpObjective;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config field `{field}`: {reason}")]
    Field { field: &'static str, reason: String },
    #[error("unknown preset `{0}` (known: {known})", known = PRESETS.join(", "))]
    UnknownPreset(String),
    #[error("initial data: {0}")]
    Data(#[from] GpError),
    #[error("initial data file {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn field(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Field { field, reason: reason.into() }
}

/// Parameters of the execution phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub horizon: usize,
    pub step_cap: usize,
    /// Margin ς below the metric supremum in the threshold programs.
    pub sigma_margin: f64,
    #[serde(default)]
    pub objective: GpObjective,
    pub collection: Collection,
    #[serde(default)]
    pub stop_on_safe: bool,
    pub sim_domain: IntervalBox,
    pub cost: StageCost,
    pub guess: GuessPolicy,
    /// Input set of the OCP and of data collection; defaults to the
    /// abstraction's input set, which must lie inside it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_set: Option<IntervalBox>,
}

/// Source of the initial training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialData {
    /// Roll the guess policy from sampled starts, with uniform exploration
    /// noise on the inputs.
    Policy { starts: InitialSet, episodes: usize, steps: usize, exploration: Vec<f64> },
    /// Uniform samples of `(x, u)`.
    Random { n: usize, lower: Vec<f64>, upper: Vec<f64> },
    /// Full tensor grid over `(x, u)` with `points[j]` values on axis `j`.
    Grid { lower: Vec<f64>, upper: Vec<f64>, points: Vec<usize> },
    Csv { path: PathBuf },
    /// Union of several sources, generated in order from one RNG stream.
    Combined { parts: Vec<InitialData> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub plots: bool,
    pub plant: PlantKind,
    pub hyperparams: Hyperparams,
    pub abstraction: AbstractionConfig,
    pub gamma_policy: GammaPolicy,
    pub controller: ControllerConfig,
    pub ocp: OcpSettings,
    pub initial_set: InitialSet,
    pub initial_data: InitialData,
}

pub const PRESETS: &[&str] = &["unicycle-full", "desk-unicycle", "toy-1d", "toy-2d"];

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialization, excluding the output
    /// directory.
    pub fn hash(&self) -> String {
        let canonical = RunConfig { output_dir: None, ..self.clone() };
        hex::encode(Sha256::digest(canonical.to_toml().as_bytes()))
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "unicycle-full" => Ok(unicycle_full()),
            "desk-unicycle" => Ok(desk_unicycle()),
            "toy-1d" => Ok(toy_1d()),
            "toy-2d" => Ok(toy_2d()),
            _ => Err(ConfigError::UnknownPreset(name.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let n_x = self.plant.n_x();
        let n_u = self.plant.n_u();
        self.hyperparams.validate().map_err(|e| field("hyperparams", e.to_string()))?;
        if self.hyperparams.n_x != n_x || self.hyperparams.n_u != n_u {
            return Err(field("hyperparams", format!("dimensions must match the plant ({n_x}, {n_u})")));
        }
        let noise = self.plant.noise_bound();
        if noise.len() != n_x || noise.iter().any(|s| !(*s >= 0.0)) {
            return Err(field("plant.sigma_w", format!("needs {n_x} nonnegative entries")));
        }
        let a = &self.abstraction;
        check_box("abstraction.spec_set", &a.spec_set, n_x)?;
        check_box("abstraction.input_set", &a.input_set, n_u)?;
        if a.eta_x.len() != n_x || a.eta_x.iter().any(|e| !(*e > 0.0)) {
            return Err(field("abstraction.eta_x", format!("needs {n_x} positive entries")));
        }
        if a.eta_u.len() != n_u || a.eta_u.iter().any(|e| !(*e > 0.0)) {
            return Err(field("abstraction.eta_u", format!("needs {n_u} positive entries")));
        }
        if a.z.len() != n_x || a.z.contains(&0) {
            return Err(field("abstraction.z", format!("needs {n_x} integers ≥ 1")));
        }
        if let EpsilonPolicy::Scaled(f) = a.epsilon {
            if !(f >= 1.0) {
                return Err(field("abstraction.epsilon", "scale must be at least 1"));
            }
        }
        let c = &self.controller;
        if c.horizon == 0 {
            return Err(field("controller.horizon", "must be at least 1"));
        }
        if c.step_cap == 0 {
            return Err(field("controller.step_cap", "must be at least 1"));
        }
        if !(c.sigma_margin >= 0.0) {
            return Err(field("controller.sigma_margin", "must be nonnegative"));
        }
        check_box("controller.sim_domain", &c.sim_domain, n_x)?;
        if let Some(u) = &c.input_set {
            check_box("controller.input_set", u, n_u)?;
            if !u.contains_box(&a.input_set) {
                return Err(field("controller.input_set", "must contain abstraction.input_set"));
            }
        }
        if let Some(r) = &c.cost.u_ref {
            if r.len() != n_u {
                return Err(field("controller.cost.u_ref", format!("needs {n_u} entries")));
            }
        }
        if self.ocp.budget == 0 || self.ocp.population < 2 || self.ocp.elites == 0 {
            return Err(field("ocp", "budget, population ≥ 2 and elites must be positive"));
        }
        match &self.initial_set {
            InitialSet::State { lower, upper } => check_vecs("initial_set", lower, upper, n_x)?,
            InitialSet::UnicycleWorld { lower, upper } => {
                if !matches!(self.plant, PlantKind::Unicycle(_)) {
                    return Err(field("initial_set", "unicycle-world needs the unicycle plant"));
                }
                check_vecs("initial_set", lower, upper, 3)?
            }
        }
        self.check_data(&self.initial_data, n_x, n_u)
    }

    fn check_data(&self, data: &InitialData, n_x: usize, n_u: usize) -> Result<(), ConfigError> {
        match data {
            InitialData::Policy { exploration, episodes, steps, .. } => {
                if exploration.len() != n_u {
                    return Err(field("initial_data.exploration", format!("needs {n_u} entries")));
                }
                if episodes * steps == 0 {
                    return Err(field("initial_data", "episodes and steps must be positive"));
                }
                if matches!(self.controller.guess, GuessPolicy::None) {
                    return Err(field("controller.guess", "policy data needs a guess policy"));
                }
            }
            InitialData::Random { n, lower, upper } => {
                check_vecs("initial_data", lower, upper, n_x + n_u)?;
                if *n == 0 {
                    return Err(field("initial_data.n", "must be positive"));
                }
            }
            InitialData::Grid { lower, upper, points } => {
                check_vecs("initial_data", lower, upper, n_x + n_u)?;
                if points.len() != n_x + n_u || points.contains(&0) {
                    return Err(field("initial_data.points", format!("needs {} positive counts", n_x + n_u)));
                }
            }
            InitialData::Combined { parts } => {
                if parts.is_empty() {
                    return Err(field("initial_data.parts", "must not be empty"));
                }
                for p in parts {
                    self.check_data(p, n_x, n_u)?;
                }
            }
            InitialData::Csv { .. } => {}
        }
        Ok(())
    }

    /// Inputs available to the OCP.
    pub fn control_inputs(&self) -> &IntervalBox {
        self.controller.input_set.as_ref().unwrap_or(&self.abstraction.input_set)
    }

    pub fn task(&self) -> TaskSettings {
        let c = &self.controller;
        TaskSettings {
            plant: self.plant.clone(),
            hyperparams: self.hyperparams.clone(),
            abstraction: self.abstraction.clone(),
            gamma_policy: self.gamma_policy,
            phase: PhaseSettings {
                horizon: c.horizon,
                step_cap: c.step_cap,
                sigma_margin: c.sigma_margin,
                objective: c.objective,
                collection: c.collection,
                cost: c.cost.clone(),
                input_set: self.control_inputs().clone(),
                sim_domain: c.sim_domain.clone(),
                ocp: self.ocp.clone(),
                guess: c.guess.clone(),
                stop_on_safe: c.stop_on_safe,
            },
            initial_set: self.initial_set.clone(),
            iterations: self.iterations,
            seed: self.seed,
        }
    }

    /// Builds the initial training set deterministically from the seed.
    pub fn initial_dataset(&self) -> Result<Dataset, ConfigError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_da7a);
        self.generate(&self.initial_data, &mut rng)
    }

    fn generate(&self, spec: &InitialData, rng: &mut ChaCha8Rng) -> Result<Dataset, ConfigError> {
        let plant = &self.plant;
        let (n_x, n_u) = (plant.n_x(), plant.n_u());
        let u_box = self.control_inputs();
        match spec {
            InitialData::Combined { parts } => {
                let mut d = Dataset::new(n_x, n_u);
                for p in parts {
                    d.extend(&self.generate(p, rng)?)?;
                }
                Ok(d)
            }
            InitialData::Policy { starts, episodes, steps, exploration } => {
                let xs: Vec<Vec<f64>> = (0..*episodes).map(|_| starts.sample(plant, rng)).collect();
                let guess = &self.controller.guess;
                Ok(collect_with_policy(
                    plant,
                    |x, rng| {
                        let base = guess.action(plant, x).unwrap_or_else(|| u_box.center());
                        let v: Vec<f64> = base
                            .iter()
                            .zip(exploration)
                            .map(|(b, e)| if *e > 0.0 { b + rng.random_range(-*e..=*e) } else { *b })
                            .collect();
                        u_box.clamp(&v)
                    },
                    &xs,
                    *steps,
                    rng,
                )?)
            }
            InitialData::Random { n, lower, upper } => {
                let b = IntervalBox::new(lower.clone(), upper.clone());
                let mut d = Dataset::new(n_x, n_u);
                for _ in 0..*n {
                    let z = sample_box(&b, rng);
                    let y = plant.step(&z[..n_x], &z[n_x..], rng);
                    d.push(&z[..n_x], &z[n_x..], &y)?;
                }
                Ok(d)
            }
            InitialData::Grid { lower, upper, points } => {
                let mut d = Dataset::new(n_x, n_u);
                let total: usize = points.iter().product();
                let mut z = vec![0.0; n_x + n_u];
                for mut idx in 0..total {
                    for j in (0..points.len()).rev() {
                        let c = idx % points[j];
                        idx /= points[j];
                        z[j] = if points[j] == 1 {
                            0.5 * (lower[j] + upper[j])
                        } else {
                            lower[j] + (upper[j] - lower[j]) * c as f64 / (points[j] - 1) as f64
                        };
                    }
                    let y = plant.step(&z[..n_x], &z[n_x..], rng);
                    d.push(&z[..n_x], &z[n_x..], &y)?;
                }
                Ok(d)
            }
            InitialData::Csv { path } => {
                let f = std::fs::File::open(path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
                Ok(Dataset::read_csv(f)?)
            }
        }
    }
}

fn check_box(name: &'static str, b: &IntervalBox, n: usize) -> Result<(), ConfigError> {
    check_vecs(name, &b.lower, &b.upper, n)
}

fn check_vecs(name: &'static str, lower: &[f64], upper: &[f64], n: usize) -> Result<(), ConfigError> {
    if lower.len() != n || upper.len() != n {
        return Err(field(name, format!("bounds need {n} entries")));
    }
    if lower.iter().zip(upper).any(|(l, u)| !(l <= u)) {
        return Err(field(name, "lower bound above upper bound"));
    }
    Ok(())
}

fn unicycle_inputs() -> IntervalBox {
    IntervalBox::new(vec![-3.0, -std::f64::consts::PI], vec![3.0, std::f64::consts::PI])
}

/// Full-scale unicycle settings. The hyperparameters are set by hand.
pub fn unicycle_full() -> RunConfig {
    let sigma_w = 0.01;
    let out = OutputParams { alpha: 2.0, lengthscales: vec![4.0, 4.0, 4.0, 5.0, 5.0], b: 2.0, sigma_w };
    RunConfig {
        name: "unicycle-full".into(),
        seed: 7,
        iterations: 10,
        output_dir: None,
        plots: false,
        plant: PlantKind::Unicycle(Unicycle { dt: 0.3, v_r: 1.0, omega_r: 1.0, sigma_w: vec![sigma_w; 3] }),
        hyperparams: Hyperparams::uniform(3, 2, out),
        abstraction: AbstractionConfig {
            spec_set: IntervalBox::symmetric(&[0.3; 3]),
            input_set: unicycle_inputs(),
            eta_x: vec![0.01; 3],
            eta_u: vec![0.25; 2],
            z: vec![3; 3],
            epsilon: EpsilonPolicy::LowerBound,
        },
        gamma_policy: GammaPolicy::Tilde,
        controller: ControllerConfig {
            horizon: 30,
            step_cap: 40,
            sigma_margin: 1e-3,
            objective: GpObjective::Product,
            collection: Collection::Conditional,
            stop_on_safe: false,
            sim_domain: IntervalBox::symmetric(&[20.0, 20.0, 20.0]),
            cost: StageCost::default(),
            guess: GuessPolicy::UnicycleTracking { gains: [1.0, 2.0, 2.0] },
            input_set: None,
        },
        ocp: OcpSettings::default(),
        initial_set: InitialSet::UnicycleWorld {
            lower: vec![-3.0, -3.0, 0.0],
            upper: vec![-2.0, -2.0, std::f64::consts::PI],
        },
        initial_data: InitialData::Policy {
            starts: InitialSet::UnicycleWorld { lower: vec![-3.0, -3.0, 0.0], upper: vec![-2.0, -2.0, std::f64::consts::PI] },
            episodes: 1,
            steps: 30,
            exploration: vec![0.2, 0.2],
        },
    }
}

/// Desk-scale unicycle benchmark; see the README for the deviations from
/// [`unicycle_full`].
pub fn desk_unicycle() -> RunConfig {
    let mut c = unicycle_full();
    let sigma_w = 0.002;
    c.name = "desk-unicycle".into();
    c.plant = PlantKind::Unicycle(Unicycle { dt: 0.3, v_r: 1.0, omega_r: 1.0, sigma_w: vec![sigma_w; 3] });
    // bα√n < √λ: the threshold radii then grow backward along the horizon
    let out = OutputParams { alpha: 4.0, lengthscales: vec![3.0, 3.0, 3.0, 10.0, 10.0], b: 0.375, sigma_w };
    c.hyperparams = Hyperparams::uniform(3, 2, out);
    c.abstraction.input_set = IntervalBox::new(vec![0.2, 0.2], vec![1.8, 1.8]);
    c.abstraction.eta_u = vec![0.125; 2];
    c.abstraction.z = vec![1; 3];
    c.controller.input_set = Some(unicycle_inputs());
    c.controller.guess = GuessPolicy::UnicycleTracking { gains: [2.0, 0.25, 2.0] };
    c.ocp.budget = 5000;
    c.controller.cost.u_ref = Some(vec![1.0, 1.0]);
    c.initial_data = InitialData::Combined {
        parts: vec![
            InitialData::Policy { starts: c.initial_set.clone(), episodes: 4, steps: 30, exploration: vec![0.3, 0.3] },
            InitialData::Policy {
                starts: InitialSet::State { lower: vec![-0.3; 3], upper: vec![0.3; 3] },
                episodes: 10,
                steps: 12,
                exploration: vec![0.3, 0.3],
            },
        ],
    };
    c
}

fn toy_input_set() -> IntervalBox {
    IntervalBox::symmetric(&[1.0])
}

/// Scalar plant that is an exact RKHS element of the model's kernel.
pub fn toy_1d() -> RunConfig {
    let sigma_w = 0.002;
    let plant = KernelExpansion::toy_1d(sigma_w);
    let out = OutputParams { alpha: 1.0, lengthscales: vec![2.5, 2.5], b: 2.5, sigma_w };
    RunConfig {
        name: "toy-1d".into(),
        seed: 7,
        iterations: 3,
        output_dir: None,
        plots: false,
        plant: PlantKind::Kernel(plant),
        hyperparams: Hyperparams::uniform(1, 1, out),
        abstraction: AbstractionConfig {
            spec_set: IntervalBox::symmetric(&[1.0]),
            input_set: toy_input_set(),
            eta_x: vec![0.01],
            eta_u: vec![0.05],
            z: vec![2],
            epsilon: EpsilonPolicy::LowerBound,
        },
        gamma_policy: GammaPolicy::Tilde,
        controller: ControllerConfig {
            horizon: 10,
            step_cap: 40,
            sigma_margin: 1e-3,
            objective: GpObjective::Product,
            collection: Collection::Conditional,
            stop_on_safe: false,
            sim_domain: IntervalBox::symmetric(&[10.0]),
            cost: StageCost::default(),
            guess: GuessPolicy::Linear { gain: vec![0.6] },
            input_set: None,
        },
        ocp: OcpSettings { budget: 4000, ..OcpSettings::default() },
        initial_set: InitialSet::State { lower: vec![2.0], upper: vec![3.0] },
        initial_data: InitialData::Grid { lower: vec![-3.0, -1.0], upper: vec![3.0, 1.0], points: vec![25, 9] },
    }
}

pub fn toy_2d() -> RunConfig {
    let sigma_w = 0.002;
    let plant = KernelExpansion::toy_2d(sigma_w);
    let hp = Hyperparams {
        n_x: 2,
        n_u: 2,
        outputs: vec![
            OutputParams { alpha: 1.0, lengthscales: vec![2.5, 4.0, 2.5, 4.0], b: 2.5, sigma_w },
            OutputParams { alpha: 1.0, lengthscales: vec![4.0, 2.5, 4.0, 2.5], b: 2.5, sigma_w },
        ],
    };
    RunConfig {
        name: "toy-2d".into(),
        seed: 7,
        iterations: 3,
        output_dir: None,
        plots: false,
        plant: PlantKind::Kernel(plant),
        hyperparams: hp,
        abstraction: AbstractionConfig {
            spec_set: IntervalBox::symmetric(&[1.0, 1.0]),
            input_set: IntervalBox::symmetric(&[1.0, 1.0]),
            eta_x: vec![0.02, 0.02],
            eta_u: vec![0.1, 0.1],
            z: vec![2, 2],
            epsilon: EpsilonPolicy::LowerBound,
        },
        gamma_policy: GammaPolicy::Tilde,
        controller: ControllerConfig {
            horizon: 10,
            step_cap: 40,
            sigma_margin: 1e-3,
            objective: GpObjective::Product,
            collection: Collection::Conditional,
            stop_on_safe: false,
            sim_domain: IntervalBox::symmetric(&[10.0, 10.0]),
            cost: StageCost::default(),
            guess: GuessPolicy::Linear { gain: vec![0.6, 0.0, 0.0, 0.6] },
            input_set: None,
        },
        ocp: OcpSettings { budget: 4000, ..OcpSettings::default() },
        initial_set: InitialSet::State { lower: vec![1.5, -2.5], upper: vec![2.5, -1.5] },
        initial_data: InitialData::Grid {
            lower: vec![-3.0, -3.0, -1.0, -1.0],
            upper: vec![3.0, 3.0, 1.0, 1.0],
            points: vec![9, 9, 5, 5],
        },
    }
}

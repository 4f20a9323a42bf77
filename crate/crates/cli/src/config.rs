//! JSON run configuration and its translation into core types.
//!
//! Every semantic error carries the dotted path of the offending field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qmf_core::filtering::{OneParticleModel, Scheme};
use qmf_core::hilbert::{presets, presets::MatrixLiteral, random, BoundedOp, DensityOp, Ket, PairKernel, C64};
use qmf_core::manybody::{ControlPolicy, Variant};
use qmf_core::meanfield::{EtaMethod, PicardOptions};
use qmf_core::noise::TimeGrid;

#[derive(Debug, thiserror::Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl ToString) -> Self {
        ConfigError {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

/// An operator: a preset name, a matrix literal, or `exp(i·angle·G)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OperatorSpec {
    Named(String),
    Literal(MatrixLiteral),
    UnitaryExp { unitary_exp: Box<OperatorSpec>, angle: f64 },
}

impl OperatorSpec {
    pub fn build(&self, dim: usize, path: &str) -> Result<BoundedOp, ConfigError> {
        let op = match self {
            OperatorSpec::Named(name) => presets::named(name, dim).map_err(|e| ConfigError::new(path, e))?,
            OperatorSpec::Literal(lit) => {
                let m = lit.to_matrix().map_err(|e| ConfigError::new(path, e))?;
                BoundedOp::new(m).map_err(|e| ConfigError::new(path, e))?
            }
            OperatorSpec::UnitaryExp { unitary_exp, angle } => {
                let g = unitary_exp.build(dim, &format!("{path}.unitary_exp"))?;
                BoundedOp::unitary_exp(&g, *angle).map_err(|e| ConfigError::new(path, e))?
            }
        };
        if op.dim() != dim {
            return Err(ConfigError::new(path, format!("operator has dimension {}, model.dim is {dim}", op.dim())));
        }
        Ok(op)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSpec {
    Zero,
    Identity,
    /// Random swap-symmetric Hermitian kernel with the given HS norm.
    Random { seed: u64, hs_norm: f64 },
    /// `S ⊗ T + T ⊗ S`.
    Separable(OperatorSpec, OperatorSpec),
    /// Full `d² × d²` kernel.
    Matrix(MatrixLiteral),
}

impl KernelSpec {
    pub fn build(&self, dim: usize, path: &str) -> Result<PairKernel, ConfigError> {
        match self {
            KernelSpec::Zero => Ok(PairKernel::zero(dim)),
            KernelSpec::Identity => Ok(PairKernel::identity(dim)),
            KernelSpec::Random { seed, hs_norm } => {
                if !(*hs_norm >= 0.0) {
                    return Err(ConfigError::new(format!("{path}.random.hs_norm"), "must be ≥ 0"));
                }
                Ok(random::pair_kernel(&mut random::rng(*seed), dim, *hs_norm))
            }
            KernelSpec::Separable(s, t) => {
                let s = s.build(dim, &format!("{path}.separable[0]"))?;
                let t = t.build(dim, &format!("{path}.separable[1]"))?;
                PairKernel::separable(&s, &t).map_err(|e| ConfigError::new(path, e))
            }
            KernelSpec::Matrix(lit) => {
                let m = lit.to_matrix().map_err(|e| ConfigError::new(path, e))?;
                PairKernel::new(dim, m).map_err(|e| ConfigError::new(path, e))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub dim: usize,
    pub h: OperatorSpec,
    pub hhat: OperatorSpec,
    pub couplings: Vec<OperatorSpec>,
    #[serde(default = "zero_kernel")]
    pub interaction: KernelSpec,
}

fn zero_kernel() -> KernelSpec {
    KernelSpec::Zero
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlBlock {
    Constant { u0: f64 },
    /// `u = clamp(U tr(γW), −U, U)`; the Lipschitz constant is `U‖W‖`.
    Feedback { bound: f64, w: OperatorSpec },
}

impl Default for ControlBlock {
    fn default() -> Self {
        ControlBlock::Constant { u0: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateSpec {
    Basis(usize),
    Amplitudes(Vec<[f64; 2]>),
}

impl Default for StateSpec {
    fn default() -> Self {
        StateSpec::Basis(0)
    }
}

/// Which one-particle equation `simulate` integrates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    #[default]
    Ket,
    Density,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimBlock {
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub t_end: f64,
    #[serde(default = "default_particles")]
    pub particles: Vec<usize>,
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub renormalize: bool,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub initial_state: StateSpec,
    #[serde(default)]
    pub filter: FilterKind,
    #[serde(default)]
    pub scheme: Scheme,
}

fn default_dt() -> f64 {
    1e-3
}

fn default_particles() -> Vec<usize> {
    vec![2, 4, 8]
}

fn default_trajectories() -> usize {
    200
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanFieldBlock {
    #[serde(default)]
    pub method: EtaMethod,
    #[serde(default = "default_ensemble")]
    pub ensemble: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_window")]
    pub window: f64,
    #[serde(default = "default_iterations")]
    pub max_iterations: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_ensemble() -> usize {
    1000
}

fn default_tolerance() -> f64 {
    1e-3
}

fn default_window() -> f64 {
    0.25
}

fn default_iterations() -> usize {
    50
}

impl Default for MeanFieldBlock {
    fn default() -> Self {
        MeanFieldBlock {
            method: EtaMethod::default(),
            ensemble: default_ensemble(),
            tolerance: default_tolerance(),
            window: default_window(),
            max_iterations: default_iterations(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    /// Raw little-endian state dumps of one-particle trajectories.
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

fn default_directory() -> PathBuf {
    PathBuf::from("out")
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv]
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock {
            directory: default_directory(),
            formats: default_formats(),
        }
    }
}

/// Sample counts for `verify`; `None` picks each suite's default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyBlock {
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelBlock,
    #[serde(default)]
    pub control: ControlBlock,
    pub sim: SimBlock,
    #[serde(default)]
    pub meanfield: MeanFieldBlock,
    #[serde(default)]
    pub output: OutputBlock,
    #[serde(default)]
    pub verify: VerifyBlock,
}

pub const PRESETS: &[(&str, &str)] = &[
    ("diffusive", include_str!("../presets/diffusive.json")),
    ("counting", include_str!("../presets/counting.json")),
    ("qubit", include_str!("../presets/qubit.json")),
];

/// Everything a run needs, validated.
#[derive(Clone, Debug)]
pub struct Built {
    pub one: OneParticleModel,
    pub hhat: BoundedOp,
    pub a: PairKernel,
    pub control: ControlPolicy,
    pub grid: TimeGrid,
    pub psi0: Ket,
}

impl Built {
    pub fn gamma0(&self) -> DensityOp {
        self.psi0.projector().expect("initial state is normalized")
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::new(if path == "." { "<root>".into() } else { path }, e.into_inner())
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ConfigError::new("--preset", format!("unknown preset `{name}`")))?;
        Self::parse(text)
    }

    /// Replace every seed in the file.
    pub fn override_seed(&mut self, seed: u64) {
        self.sim.seed = seed;
        self.meanfield.seed = seed;
        self.verify.seed = seed;
    }

    /// Canonical serialization; its hash identifies the run.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn picard_options(&self) -> PicardOptions {
        PicardOptions {
            ensemble: self.meanfield.ensemble,
            tolerance: self.meanfield.tolerance,
            window: self.meanfield.window,
            max_iterations: self.meanfield.max_iterations,
            seed: self.meanfield.seed,
            variant: self.sim.variant,
        }
    }

    pub fn build(&self) -> Result<Built, ConfigError> {
        let m = &self.model;
        let d = m.dim;
        if d == 0 {
            return Err(ConfigError::new("model.dim", "must be at least 1"));
        }
        let h = m.h.build(d, "model.h")?;
        if !h.is_hermitian(qmf_core::hilbert::HERMITIAN_TOL) {
            return Err(ConfigError::new("model.h", "Hamiltonian must be Hermitian"));
        }
        let hhat = m.hhat.build(d, "model.hhat")?;
        if !hhat.is_hermitian(qmf_core::hilbert::HERMITIAN_TOL) {
            return Err(ConfigError::new("model.hhat", "control Hamiltonian must be Hermitian"));
        }
        if m.couplings.is_empty() {
            return Err(ConfigError::new("model.couplings", "at least one coupling operator is required"));
        }
        let couplings = m
            .couplings
            .iter()
            .enumerate()
            .map(|(i, c)| c.build(d, &format!("model.couplings[{i}]")))
            .collect::<Result<Vec<_>, _>>()?;
        let one = OneParticleModel::new(h, couplings).map_err(|e| ConfigError::new("model", e))?;
        let a = m.interaction.build(d, "model.interaction")?;
        let control = match &self.control {
            ControlBlock::Constant { u0 } => ControlPolicy::constant(*u0).map_err(|e| ConfigError::new("control.u0", e))?,
            ControlBlock::Feedback { bound, w } => {
                let w = w.build(d, "control.w")?;
                ControlPolicy::feedback(*bound, w).map_err(|e| ConfigError::new("control", e))?
            }
        };
        let grid = TimeGrid::new(self.sim.t_end, self.sim.dt).map_err(|e| ConfigError::new("sim", e))?;
        let psi0 = match &self.sim.initial_state {
            StateSpec::Basis(k) => Ket::basis(d, *k).map_err(|e| ConfigError::new("sim.initial_state.basis", e))?,
            StateSpec::Amplitudes(v) => {
                if v.len() != d {
                    return Err(ConfigError::new(
                        "sim.initial_state.amplitudes",
                        format!("{} amplitudes for model.dim {d}", v.len()),
                    ));
                }
                let amps: Vec<C64> = v.iter().map(|[re, im]| C64::new(*re, *im)).collect();
                Ket::from_slice(&amps)
                    .and_then(|k| k.normalized())
                    .map_err(|e| ConfigError::new("sim.initial_state.amplitudes", e))?
            }
        };
        if self.sim.particles.iter().any(|&n| n == 0) {
            return Err(ConfigError::new("sim.particles", "particle counts must be positive"));
        }
        if self.sim.trajectories == 0 {
            return Err(ConfigError::new("sim.trajectories", "must be positive"));
        }
        Ok(Built {
            one,
            hhat,
            a,
            control,
            grid,
            psi0,
        })
    }

    /// Counting convergence needs unitary couplings.
    pub fn require_unitary_couplings(&self, built: &Built) -> Result<(), ConfigError> {
        for (i, c) in built.one.channels().iter().enumerate() {
            if !c.op().is_unitary(qmf_core::hilbert::HERMITIAN_TOL) {
                return Err(ConfigError::new(
                    format!("model.couplings[{i}]"),
                    "counting convergence runs need unitary couplings",
                ));
            }
        }
        Ok(())
    }
}

//! Experiment configuration and its translation into a controller network.

use std::path::PathBuf;

use dsmpc::casestudy::{self, ThreeRoomConfig};
use dsmpc::exchange::{ExchangeConfig, ExchangeVariant};
use dsmpc::model::{partition_system, AffineMatrix, BlockSize, Polytope, UncertainSystem};
use dsmpc::mpc::{ControllerMode, ControllerSettings, Network, ReliabilityTarget, SoftCommConfig};
use dsmpc::scenario::{DisturbanceModel, NoiseProcess, UncertaintyModel};
use dsmpc::softcomm::{Centering, CertificateDimension};
use nalgebra::{DMatrix, DVector};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub system: SystemSpec,
    #[serde(default)]
    pub budgets: BudgetSpec,
    /// Prediction horizon.
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Closed-loop simulation length in sampling periods.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Sampling time of the first step; hour of the day for the three-room preset.
    #[serde(default)]
    pub start_time: usize,
    /// Controller labels: csmpc, dsmpc, desmpc, dsmpcs or dsmpcs-<alpha>.
    #[serde(default = "default_modes")]
    pub modes: Vec<String>,
    #[serde(default)]
    pub soft: SoftSpec,
    #[serde(default)]
    pub admm: AdmmSpec,
    /// Scenarios averaged in each agent's cost.
    #[serde(default = "default_cost_samples")]
    pub cost_samples: usize,
    #[serde(default = "default_max_retries")]
    pub max_retries: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Out-of-sample draws per solved program in validation.
    #[serde(default = "default_mc")]
    pub mc: usize,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub plugdemo: PlugDemoSpec,
}

fn default_horizon() -> usize {
    4
}
fn default_steps() -> usize {
    24
}
fn default_modes() -> Vec<String> {
    vec!["dsmpc".into()]
}
fn default_cost_samples() -> usize {
    20
}
fn default_max_retries() -> usize {
    dsmpc::mpc::DEFAULT_MAX_RETRIES
}
fn default_seeds() -> Vec<u64> {
    vec![11]
}
fn default_mc() -> usize {
    10_000
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum SystemSpec {
    /// Three coupled rooms, modelled in deviations from their setpoints.
    #[serde(rename = "three-room")]
    ThreeRoom(ThreeRoomSpec),
    #[serde(rename = "inline")]
    Inline(InlineSystem),
}

impl Default for SystemSpec {
    fn default() -> Self {
        SystemSpec::ThreeRoom(ThreeRoomSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ThreeRoomSpec {
    /// Afternoon plateau of the outside-temperature forecast.
    pub peak: f64,
    /// Night forecast as a fraction of the peak.
    pub night_fraction: f64,
    /// Relative half-width of the uniform disturbance band.
    pub disturbance_band: f64,
    /// Bound on each parametric uncertainty.
    pub delta_cap: f64,
    pub delta_std: f64,
    /// Initial room temperatures.
    pub initial_temperatures: [f64; 3],
}

impl Default for ThreeRoomSpec {
    fn default() -> Self {
        let c = ThreeRoomConfig::default();
        Self {
            peak: c.peak,
            night_fraction: c.night_fraction,
            disturbance_band: c.disturbance_band,
            delta_cap: c.delta_cap,
            delta_std: c.delta_std,
            initial_temperatures: casestudy::SETPOINT,
        }
    }
}

type Rows = Vec<Vec<f64>>;

/// Matrix with optional uncertainty terms, one per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct MatrixSpec {
    pub nominal: Rows,
    #[serde(default)]
    pub terms: Vec<Rows>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub nx: usize,
    pub nu: usize,
    pub nw: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Nominal disturbance per time step, repeated periodically. Empty means zero.
    #[serde(default)]
    pub nominal: Rows,
    #[serde(default)]
    pub fraction: f64,
    /// Truncated Gaussian for every uncertainty channel of the agent.
    #[serde(default)]
    pub uncertainty: Option<UncertaintySpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct UncertaintySpec {
    #[serde(default)]
    pub mean: f64,
    pub std_dev: f64,
    pub cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct InlineSystem {
    pub a: MatrixSpec,
    pub b: MatrixSpec,
    pub c: MatrixSpec,
    pub state_box: BoxSpec,
    pub input_box: BoxSpec,
    pub q: Rows,
    pub r: Rows,
    /// Terminal weight; zero when omitted.
    #[serde(default)]
    pub p: Option<Rows>,
    /// Prestabilizing gain; zero when omitted.
    #[serde(default)]
    pub k: Option<Rows>,
    pub blocks: Vec<BlockSpec>,
    /// One entry per block.
    pub noise: Vec<NoiseSpec>,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct BudgetSpec {
    pub epsilon: f64,
    pub beta: f64,
    /// Relative shares of the budgets; uniform when omitted.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

impl Default for BudgetSpec {
    fn default() -> Self {
        Self { epsilon: 0.05, beta: 0.03, weights: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SoftSpec {
    /// Confidence of each box certificate.
    pub beta: f64,
    /// Reliability used by the plain `dsmpcs` label.
    pub alpha: f64,
    /// Fixed fitting sample count; overrides `alpha` for the plain label.
    pub samples: Option<usize>,
    pub centering: CenteringSpec,
    pub certificate: CertificateSpec,
}

impl Default for SoftSpec {
    fn default() -> Self {
        Self {
            beta: 0.01,
            alpha: 0.85,
            samples: None,
            centering: CenteringSpec::SampleMeanCentered,
            certificate: CertificateSpec::Trajectory,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum CenteringSpec {
    OriginSymmetric,
    SampleMeanCentered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum CertificateSpec {
    Trajectory,
    State,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct AdmmSpec {
    pub variant: VariantSpec,
    pub mu: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub parallel: bool,
}

impl Default for AdmmSpec {
    fn default() -> Self {
        let e = ExchangeConfig::default();
        Self {
            variant: VariantSpec::Consensus,
            mu: e.mu,
            tolerance: e.tolerance,
            max_iterations: e.max_iterations,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum VariantSpec {
    Consensus,
    Projection,
}

/// Plugs a fourth room next to the third one and removes it again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PlugDemoSpec {
    pub plug_in_step: usize,
    pub plug_out_step: usize,
    /// Self-coupling of the new room.
    pub a_self: f64,
    /// Heat exchange between the new room and the third room, in both directions.
    pub coupling: f64,
}

impl Default for PlugDemoSpec {
    fn default() -> Self {
        Self { plug_in_step: 8, plug_out_step: 16, a_self: 0.3, coupling: 0.1 }
    }
}

fn matrix(rows: &Rows, what: &str) -> Result<DMatrix<f64>, CliError> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(CliError::Config(format!("{what}: rows have different lengths")));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn affine(spec: &MatrixSpec, channels: usize, what: &str) -> Result<AffineMatrix, CliError> {
    let nominal = matrix(&spec.nominal, what)?;
    if spec.terms.is_empty() {
        return Ok(AffineMatrix::constant(nominal, channels));
    }
    let terms = spec.terms.iter().map(|t| matrix(t, what)).collect::<Result<Vec<_>, _>>()?;
    Ok(AffineMatrix::new(nominal, terms)?)
}

/// Network, initial states and horizon described by a configuration.
pub struct Instance {
    pub network: Network,
    pub x0: Vec<DVector<f64>>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn instance(&self) -> Result<Instance, CliError> {
        if self.horizon == 0 {
            return Err(CliError::Config("horizon must be positive".into()));
        }
        let (agents, noise, x0) = match &self.system {
            SystemSpec::ThreeRoom(s) => {
                let cfg = ThreeRoomConfig {
                    horizon: self.horizon,
                    peak: s.peak,
                    night_fraction: s.night_fraction,
                    disturbance_band: s.disturbance_band,
                    delta_cap: s.delta_cap,
                    delta_std: s.delta_std,
                };
                let (agents, _) = casestudy::agents(&cfg)?;
                let x0 = (0..3)
                    .map(|i| DVector::from_element(1, s.initial_temperatures[i] - casestudy::SETPOINT[i]))
                    .collect();
                (agents, vec![cfg.noise(); 3], x0)
            }
            SystemSpec::Inline(s) => {
                let channels = s.a.terms.len().max(s.b.terms.len()).max(s.c.terms.len());
                let a = affine(&s.a, channels, "a")?;
                let b = affine(&s.b, channels, "b")?;
                let c = affine(&s.c, channels, "c")?;
                let (nx, nu) = (a.nrows(), b.ncols());
                let q = matrix(&s.q, "q")?;
                let r = matrix(&s.r, "r")?;
                let p = s.p.as_ref().map_or(Ok(DMatrix::zeros(nx, nx)), |p| matrix(p, "p"))?;
                let k = s.k.as_ref().map_or(Ok(DMatrix::zeros(nu, nx)), |k| matrix(k, "k"))?;
                let boxed = |b: &BoxSpec, what: &str| {
                    if b.lower.len() != b.upper.len() {
                        return Err(CliError::Config(format!("{what}: bounds of different lengths")));
                    }
                    Ok(Polytope::from_box(&b.lower, &b.upper))
                };
                let sys = UncertainSystem::new(
                    a,
                    b,
                    c,
                    boxed(&s.state_box, "state_box")?,
                    boxed(&s.input_box, "input_box")?,
                    q,
                    r,
                    p,
                    k,
                    self.horizon,
                )?;
                let blocks: Vec<_> = s.blocks.iter().map(|b| BlockSize::new(b.nx, b.nu, b.nw)).collect();
                let (agents, partition) = partition_system(&sys, &blocks)?;
                if s.noise.len() != agents.len() {
                    return Err(CliError::Config("one noise entry per block expected".into()));
                }
                if s.x0.len() != sys.nx() {
                    return Err(CliError::Config("x0 does not match the state dimension".into()));
                }
                let noise = agents
                    .iter()
                    .zip(&s.noise)
                    .map(|(ag, n)| noise_process(ag.nw, ag.delta_dim(), n))
                    .collect::<Result<Vec<_>, _>>()?;
                (agents, noise, partition.split_state(&DVector::from_vec(s.x0.clone())))
            }
        };
        let b = &self.budgets;
        let network = match &b.weights {
            Some(w) => Network::with_weights(agents, noise, b.epsilon, b.beta, w)?,
            None => Network::new(agents, noise, b.epsilon, b.beta)?,
        };
        Ok(Instance { network, x0 })
    }

    pub fn settings(&self) -> ControllerSettings {
        let variant = match self.admm.variant {
            VariantSpec::Consensus => ExchangeVariant::Consensus,
            VariantSpec::Projection => ExchangeVariant::Projection,
        };
        ControllerSettings {
            exchange: ExchangeConfig {
                variant,
                mu: self.admm.mu,
                tolerance: self.admm.tolerance,
                max_iterations: self.admm.max_iterations,
                parallel: self.admm.parallel,
                ..ExchangeConfig::default()
            },
            cost_samples: self.cost_samples,
            max_retries: self.max_retries,
            start_time: self.start_time,
        }
    }

    pub fn controller_modes(&self) -> Result<Vec<ControllerMode>, CliError> {
        if self.modes.is_empty() {
            return Err(CliError::Config("no controller mode selected".into()));
        }
        self.modes.iter().map(|m| self.parse_mode(m)).collect()
    }

    pub fn parse_mode(&self, name: &str) -> Result<ControllerMode, CliError> {
        let soft = |reliability| {
            ControllerMode::SoftComm(SoftCommConfig {
                beta: self.soft.beta,
                reliability,
                centering: match self.soft.centering {
                    CenteringSpec::OriginSymmetric => Centering::OriginSymmetric,
                    CenteringSpec::SampleMeanCentered => Centering::SampleMeanCentered,
                },
                certificate: match self.soft.certificate {
                    CertificateSpec::Trajectory => CertificateDimension::Trajectory,
                    CertificateSpec::State => CertificateDimension::State,
                },
            })
        };
        let mode = match name {
            "csmpc" | "centralized" => ControllerMode::Centralized,
            "dsmpc" | "distributed" => ControllerMode::Distributed,
            "desmpc" | "decoupled" => ControllerMode::Decoupled,
            "dsmpcs" | "soft" => soft(match self.soft.samples {
                Some(s) => ReliabilityTarget::Samples(s),
                None => ReliabilityTarget::Alpha(self.soft.alpha),
            }),
            other => match other.strip_prefix("dsmpcs-").map(str::parse::<f64>) {
                Some(Ok(a)) if a > 0.0 && a < 1.0 => soft(ReliabilityTarget::Alpha(a)),
                _ => return Err(CliError::Config(format!("unknown mode '{name}'"))),
            },
        };
        Ok(mode)
    }
}

fn noise_process(nw: usize, delta_dim: usize, spec: &NoiseSpec) -> Result<NoiseProcess, CliError> {
    if spec.nominal.iter().any(|w| w.len() != nw) {
        return Err(CliError::Config("nominal disturbance does not match the block size".into()));
    }
    let disturbance = if spec.nominal.is_empty() {
        DisturbanceModel::Zero
    } else {
        DisturbanceModel::UniformBand { nominal: spec.nominal.clone(), fraction: spec.fraction }
    };
    let uncertainty = match &spec.uncertainty {
        Some(u) if delta_dim > 0 => {
            UncertaintyModel::TruncatedGaussian { mean: u.mean, std_dev: u.std_dev, cap: u.cap }
        }
        _ => UncertaintyModel::Zero,
    };
    Ok(NoiseProcess { nw, delta_dim, disturbance, uncertainty })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_three_room_default() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        let inst = cfg.instance().unwrap();
        assert_eq!(inst.network.len(), 3);
        assert!(inst.x0.iter().all(|x| x[0] == 0.0));
        assert_eq!(inst.network.budgets[0].sample_count, 600);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"horizn": 4}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"system": {"kind": "three-room", "peek": 7}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"admm": {"rho": 1}}"#).is_err());
    }

    #[test]
    fn mode_labels_round_trip() {
        let cfg = ExperimentConfig::default();
        for label in ["csmpc", "dsmpc", "desmpc", "dsmpcs-0.85", "dsmpcs-0.50"] {
            assert_eq!(cfg.parse_mode(label).unwrap().label(), label);
        }
        assert_eq!(cfg.parse_mode("dsmpcs").unwrap().label(), "dsmpcs-0.85");
        assert!(cfg.parse_mode("dsmpcs-1.5").is_err());
        assert!(cfg.parse_mode("mpc").is_err());
    }

    #[test]
    fn inline_scalar_system() {
        let text = r#"{
            "system": {
                "kind": "inline",
                "a": {"nominal": [[0.5]]},
                "b": {"nominal": [[1.0]]},
                "c": {"nominal": [[1.0]]},
                "state_box": {"lower": [-1.0], "upper": [1.0]},
                "input_box": {"lower": [-1.0], "upper": [1.0]},
                "q": [[1.0]],
                "r": [[1.0]],
                "blocks": [{"nx": 1, "nu": 1, "nw": 1}],
                "noise": [{"nominal": [[0.0]], "fraction": 0.1}],
                "x0": [0.2]
            }
        }"#;
        let inst = ExperimentConfig::from_json(text).unwrap().instance().unwrap();
        assert_eq!(inst.network.len(), 1);
        assert_eq!(inst.x0[0][0], 0.2);
    }
}

//! Soft communication: reliability-certified trajectory boxes.
//!
//! Instead of exchanging scenario sets every iteration, an agent samples its own
//! trajectory, fits the smallest axis-aligned box around the samples and sends that
//! box once per step. Followers tighten their constraints so that they hold for every
//! point in the box.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AgentModel;
use crate::program::ScenarioPrediction;
use crate::scenario::reliability_level;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    /// `[-b, b]` around the origin.
    OriginSymmetric,
    /// Midrange center with half-range widths.
    #[default]
    SampleMeanCentered,
}

/// Dimension entering the reliability certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateDimension {
    /// The full box dimension `T n_j`.
    #[default]
    Trajectory,
    /// The neighbor state dimension `n_j` only.
    State,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBox {
    pub center: DVector<f64>,
    pub half_width: DVector<f64>,
    pub samples: usize,
    pub beta: f64,
    pub alpha: f64,
}

impl ReliabilityBox {
    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Zero-width box at a known trajectory.
    pub fn point(x: DVector<f64>) -> Self {
        let n = x.len();
        Self { center: x, half_width: DVector::zeros(n), samples: 0, beta: 0.0, alpha: 1.0 }
    }

    /// Fits a box to `samples` and certifies it with `cert_dim` support constraints.
    pub fn fit(samples: &[DVector<f64>], centering: Centering, beta: f64, cert_dim: usize) -> Result<Self> {
        let (center, half_width) = fit_box(samples, centering)?;
        let alpha = certify_box(samples.len(), cert_dim, beta)?;
        Ok(Self { center, half_width, samples: samples.len(), beta, alpha })
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.len() == self.dim() && (0..x.len()).all(|d| (x[d] - self.center[d]).abs() <= self.half_width[d] + tol)
    }

    /// Little-endian layout: `D u32, S u32, beta f64, alpha f64, c[D], b[D]`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dim();
        let mut out = Vec::with_capacity(24 + 16 * d);
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&(self.samples as u32).to_le_bytes());
        out.extend_from_slice(&self.beta.to_le_bytes());
        out.extend_from_slice(&self.alpha.to_le_bytes());
        for v in self.center.iter().chain(self.half_width.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 {
            return Err(Error::Codec(format!("box header needs 24 bytes, got {}", bytes.len())));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let d = u32_at(0);
        if bytes.len() != 24 + 16 * d {
            return Err(Error::Codec(format!("box of dimension {d} needs {} bytes, got {}", 24 + 16 * d, bytes.len())));
        }
        Ok(Self {
            samples: u32_at(4),
            beta: f64_at(8),
            alpha: f64_at(16),
            center: DVector::from_fn(d, |k, _| f64_at(24 + 8 * k)),
            half_width: DVector::from_fn(d, |k, _| f64_at(24 + 8 * (d + k))),
        })
    }
}

/// Smallest axis-aligned box containing every sample.
pub fn fit_box(samples: &[DVector<f64>], centering: Centering) -> Result<(DVector<f64>, DVector<f64>)> {
    let first = samples.first().ok_or(Error::EmptySampleSet)?;
    let d = first.len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::DimensionMismatch("box samples differ in dimension".into()));
    }
    match centering {
        Centering::OriginSymmetric => {
            let b = DVector::from_fn(d, |k, _| samples.iter().map(|s| s[k].abs()).fold(0.0, f64::max));
            Ok((DVector::zeros(d), b))
        }
        Centering::SampleMeanCentered => {
            let lo = DVector::from_fn(d, |k, _| samples.iter().map(|s| s[k]).fold(f64::INFINITY, f64::min));
            let hi = DVector::from_fn(d, |k, _| samples.iter().map(|s| s[k]).fold(f64::NEG_INFINITY, f64::max));
            let c = (&lo + &hi) * 0.5;
            // Half-range rounded up so the box still contains the extreme samples.
            let b = DVector::from_fn(d, |k, _| (hi[k] - c[k]).max(c[k] - lo[k]));
            Ok((c, b))
        }
    }
}

/// Reliability level of a box fitted to `samples` draws with `dim` support constraints.
pub fn certify_box(samples: usize, dim: usize, beta: f64) -> Result<f64> {
    reliability_level(beta, samples, dim)
}

/// `|coef| b` row by row: the largest value `coef y` takes over `y` in `[-b, b]`.
pub fn support_offsets(coef: &DMatrix<f64>, half_width: &DVector<f64>) -> DVector<f64> {
    coef.abs() * half_width
}

/// Right-hand-side offsets for the state rows (`T` blocks of polytope rows) and the
/// input rows of steps `1 .. T-1` of one scenario, making each row hold for every
/// neighbor trajectory in the boxes.
pub fn tighten_constraints(
    agent: &AgentModel,
    prediction: &ScenarioPrediction,
    boxes: &BTreeMap<usize, ReliabilityBox>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let (nx, nu, t) = (agent.nx, agent.nu, agent.horizon);
    let g = &agent.state_set;
    let h = &agent.input_set;
    let mut st = DVector::zeros(t * g.rows());
    let mut it = DVector::zeros(t.saturating_sub(1) * h.rows());
    for (j, sz) in &prediction.states_z {
        let bx = boxes.get(j).ok_or(Error::MissingNeighborState(*j))?;
        if bx.dim() != sz.ncols() {
            return Err(Error::DimensionMismatch(format!("box of neighbor {j}")));
        }
        for l in 0..t {
            let coef = &g.a * sz.rows(l * nx, nx);
            let off = support_offsets(&coef, &bx.half_width);
            let mut blk = st.rows_mut(l * g.rows(), g.rows());
            blk += off;
        }
        let iz = &prediction.inputs_z[j];
        for l in 1..t {
            let coef = &h.a * iz.rows(l * nu, nu);
            let off = support_offsets(&coef, &bx.half_width);
            let mut blk = it.rows_mut((l - 1) * h.rows(), h.rows());
            blk += off;
        }
    }
    Ok((st, it))
}

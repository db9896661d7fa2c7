//! Three-room building preset.
//!
//! The model is written in deviations from the room setpoints `(21, 19, 23)`, so the
//! comfort band becomes `[-0.5, 0.5]` for every room and the initial state is zero.
//! Each room owns one uncertainty channel that perturbs the nonzero entries of its
//! rows of `A`, `B` and `C`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{partition_system, AffineMatrix, AgentModel, BlockSize, Partition, Polytope, UncertainSystem};
use crate::scenario::{DisturbanceModel, NoiseProcess, UncertaintyModel};

pub const A: [[f64; 3]; 3] = [[0.2, 0.3, 0.0], [0.2, 0.1, 0.1], [0.2, 0.0, 0.4]];
pub const B_DIAG: f64 = 0.01;
pub const C_DIAG: f64 = 0.02;
pub const SETPOINT: [f64; 3] = [21.0, 19.0, 23.0];
pub const BAND: f64 = 0.5;
pub const INPUT_LIMIT: f64 = 1.5;
pub const DELTA_CAP: f64 = 0.01;
pub const DISTURBANCE_BAND: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThreeRoomConfig {
    pub horizon: usize,
    /// Outside-temperature forecast level during the afternoon plateau.
    pub peak: f64,
    /// Night level as a fraction of `peak`.
    pub night_fraction: f64,
    pub disturbance_band: f64,
    pub delta_cap: f64,
    pub delta_std: f64,
}

impl Default for ThreeRoomConfig {
    fn default() -> Self {
        Self {
            horizon: 4,
            peak: 7.6,
            night_fraction: 0.7,
            disturbance_band: DISTURBANCE_BAND,
            delta_cap: DELTA_CAP,
            delta_std: 1.0,
        }
    }
}

impl ThreeRoomConfig {
    /// Hourly nominal forecast over one day: a plateau at `peak` from 10:00 to 17:00
    /// with linear ramps of five hours down to the night level.
    pub fn forecast(&self) -> Vec<f64> {
        let night = self.night_fraction * self.peak;
        (0..24)
            .map(|t: i32| {
                if (10..=17).contains(&t) {
                    self.peak
                } else {
                    let dist = (t - 10).abs().min((t - 17).abs()) as f64;
                    let ramp = (1.0 - dist / 5.0).clamp(0.0, 1.0);
                    night + (self.peak - night) * ramp
                }
            })
            .collect()
    }

    pub fn noise(&self) -> NoiseProcess {
        NoiseProcess {
            nw: 1,
            delta_dim: 1,
            disturbance: DisturbanceModel::UniformBand {
                nominal: self.forecast().into_iter().map(|w| vec![w]).collect(),
                fraction: self.disturbance_band,
            },
            uncertainty: UncertaintyModel::TruncatedGaussian {
                mean: 0.0,
                std_dev: self.delta_std,
                cap: self.delta_cap,
            },
        }
    }
}

fn a_nominal() -> DMatrix<f64> {
    DMatrix::from_fn(3, 3, |r, c| A[r][c])
}

/// Channel `i` adds one to every structurally nonzero entry of row `i` of `m`.
fn row_channels(m: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    (0..m.nrows())
        .map(|i| DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| if r == i && m[(r, c)] != 0.0 { 1.0 } else { 0.0 }))
        .collect()
}

pub fn system(config: &ThreeRoomConfig) -> Result<UncertainSystem> {
    let a = a_nominal();
    let b = DMatrix::from_diagonal_element(3, 3, B_DIAG);
    let c = DMatrix::from_diagonal_element(3, 3, C_DIAG);
    UncertainSystem::new(
        AffineMatrix::new(a.clone(), row_channels(&a))?,
        AffineMatrix::new(b.clone(), row_channels(&b))?,
        AffineMatrix::new(c.clone(), row_channels(&c))?,
        Polytope::from_box(&[-BAND; 3], &[BAND; 3]),
        Polytope::from_box(&[-INPUT_LIMIT; 3], &[INPUT_LIMIT; 3]),
        DMatrix::zeros(3, 3),
        DMatrix::identity(3, 3),
        DMatrix::zeros(3, 3),
        DMatrix::zeros(3, 3),
        config.horizon,
    )
}

pub fn blocks() -> Vec<BlockSize> {
    vec![BlockSize::new(1, 1, 1); 3]
}

pub fn agents(config: &ThreeRoomConfig) -> Result<(Vec<AgentModel>, Partition)> {
    partition_system(&system(config)?, &blocks())
}

pub fn initial_state() -> DVector<f64> {
    DVector::zeros(3)
}

/// Converts deviations back to room temperatures.
pub fn absolute(x: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(3, |i, _| x[i] + SETPOINT[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{step_agent, step_global};
    use std::collections::BTreeMap;

    #[test]
    fn neighbor_sets() {
        let (_, part) = agents(&ThreeRoomConfig::default()).unwrap();
        assert_eq!(part.neighbors, vec![vec![1], vec![0, 2], vec![0]]);
    }

    #[test]
    fn hand_multiplied_steps() {
        let cfg = ThreeRoomConfig::default();
        let sys = system(&cfg).unwrap();
        let x = DVector::from_vec(SETPOINT.to_vec());
        let next = step_global(&sys, &x, &DVector::zeros(3), &DVector::zeros(3), &[0.0; 3]).unwrap();
        for (got, want) in next.iter().zip([9.9, 8.4, 13.4]) {
            assert!((got - want).abs() < 1e-12);
        }
        let (ags, _) = agents(&cfg).unwrap();
        let nb: BTreeMap<usize, DVector<f64>> = [(1, DVector::from_element(1, 19.0))].into();
        let one = DVector::from_element(1, 21.0);
        let z = DVector::zeros(1);
        let x1 = step_agent(&ags[0], &one, &z, &nb, &z, &[0.0]).unwrap();
        assert!((x1[0] - 9.9).abs() < 1e-12);
    }

    #[test]
    fn forecast_shape() {
        let f = ThreeRoomConfig::default().forecast();
        assert_eq!(f.len(), 24);
        assert_eq!(f[12], 7.6);
        assert!((f[0] - 0.7 * 7.6).abs() < 1e-12);
        assert!(f[8] > f[4] && f[8] < f[10]);
    }
}

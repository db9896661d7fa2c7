//! Fingerprints, output schemas and file emission.

use std::fs;
use std::path::{Path, PathBuf};

use dsmpc::mpc::TraceSummary;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, ExperimentConfig};

/// Hex SHA-256 of the canonical JSON form of the resolved configuration, ignoring
/// where outputs are written.
pub fn fingerprint(config: &ExperimentConfig) -> String {
    let canonical =
        serde_json::to_vec(&ExperimentConfig { output: None, ..config.clone() }).expect("configuration serializes");
    Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
}

/// JSON summary written next to every closed-loop trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub fingerprint: String,
    pub seed: u64,
    pub mode: String,
    pub steps: usize,
    /// Fraction of agent-steps whose realized next state left the constraints.
    pub violation_rate: f64,
    /// Fraction of steps with a violation in any agent.
    pub step_violation_rate: f64,
    pub mean_stage_cost: f64,
    pub messages: usize,
    pub iterations: usize,
    pub redraws: usize,
    pub unconverged_steps: usize,
    /// Composed violation level per agent under soft communication.
    pub epsilon_bar: Vec<f64>,
    /// Agent labels at the end of the run.
    pub final_ids: Vec<usize>,
}

impl RunSummary {
    pub fn new(fingerprint: &str, s: &TraceSummary, final_ids: &[usize]) -> Self {
        Self {
            fingerprint: fingerprint.to_string(),
            seed: s.seed,
            mode: s.mode.clone(),
            steps: s.steps,
            violation_rate: s.violation_rate,
            step_violation_rate: s.step_violation_rate,
            mean_stage_cost: s.mean_stage_cost,
            messages: s.messages,
            iterations: s.iterations,
            redraws: s.redraws,
            unconverged_steps: s.unconverged_steps,
            epsilon_bar: s.epsilon_bar.clone(),
            final_ids: final_ids.to_vec(),
        }
    }
}

pub fn experiment_schema() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(ExperimentConfig)).expect("schema serializes")
}

pub fn summary_schema() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(RunSummary)).expect("schema serializes")
}

/// Single writer for one output directory.
pub struct OutputDir {
    root: PathBuf,
    pub written: Vec<PathBuf>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self { root: root.to_path_buf(), written: Vec::new() })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.root.join(name);
        fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        log::info!("wrote {}", path.display());
        self.written.push(path);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("output serializes");
        text.push('\n');
        self.write(name, &text)
    }
}

/// Appends constant columns to every row of a CSV table with a header.
pub fn append_columns(csv: &str, columns: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(csv.len() * 2);
    for (n, line) in csv.lines().enumerate() {
        out += line;
        for (name, value) in columns {
            out.push(',');
            out += if n == 0 { name } else { value };
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(fingerprint(&a), fingerprint(&b));
        b.steps += 1;
        assert_ne!(fingerprint(&a), fingerprint(&b));
        assert_eq!(fingerprint(&a).len(), 64);
        let c = ExperimentConfig { output: Some("elsewhere".into()), ..a.clone() };
        assert_eq!(fingerprint(&a), fingerprint(&c));
    }

    #[test]
    fn appended_columns() {
        let csv = append_columns("a,b\n1,2\n", &[("seed", "7")]);
        assert_eq!(csv, "a,b,seed\n1,2,7\n");
    }
}

//! Subcommand implementations.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use dsmpc::casestudy;
use dsmpc::model::{AffineMatrix, AgentModel, Coupling, Polytope};
use dsmpc::mpc::{composed_violation, plug_in, plug_out, simulate, Network, PlugEvent, ScheduledEvent};
use dsmpc::scenario::{explicit_sample_count, sample_count, split_budget};
use dsmpc::validation::{compare_modes, comparison_csv};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::config::SystemSpec;
use crate::output::{append_columns, fingerprint, OutputDir, RunSummary};
use crate::{CliError, ExperimentConfig};

/// Options shared by the experiment subcommands.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Experiment configuration (JSON). The three-room defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Controller label, or a comma-separated list; overrides the configuration.
    #[arg(long)]
    pub mode: Option<String>,
    /// Single seed overriding the configured seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Out-of-sample draws per program in validation.
    #[arg(long)]
    pub mc: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Scenario redraws before a step is declared infeasible.
    #[arg(long)]
    pub max_retries: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct BoundsArgs {
    /// Violation level.
    #[arg(long)]
    pub eps: f64,
    /// Confidence parameter.
    #[arg(long, default_value_t = 0.01)]
    pub beta: f64,
    /// Number of decision variables.
    #[arg(long, default_value_t = 1)]
    pub dim: usize,
    /// Split the budgets uniformly over this many agents.
    #[arg(long)]
    pub agents: Option<usize>,
    /// Neighbor box reliability for the composed violation level.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Neighbors per agent used with `--alpha`.
    #[arg(long, default_value_t = 2)]
    pub neighbors: usize,
}

/// Configuration with command-line overrides applied.
pub fn load_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(m) = &common.mode {
        cfg.modes = m.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(m) = common.mc {
        cfg.mc = m;
    }
    if let Some(o) = &common.out {
        cfg.output = Some(o.clone());
    }
    if let Some(r) = common.max_retries {
        cfg.max_retries = r;
    }
    if cfg.seeds.is_empty() {
        return Err(CliError::Config("no seeds configured".into()));
    }
    Ok(cfg)
}

fn output_dir(cfg: &ExperimentConfig) -> Result<OutputDir, CliError> {
    OutputDir::create(cfg.output.as_deref().unwrap_or_else(|| "dsmpc-out".as_ref()))
}

pub fn bounds(args: &BoundsArgs) -> Result<String, CliError> {
    let mut out = String::new();
    let row = |label: &str, eps: f64, beta: f64| -> Result<String, CliError> {
        let s = sample_count(eps, beta, args.dim)?;
        let e = explicit_sample_count(eps, beta, args.dim)?;
        let mut line = format!("{label:<8} {eps:>10.6} {beta:>10.6} {:>5} {s:>9} {e:>9}", args.dim);
        if let Some(a) = args.alpha {
            let bar = composed_violation(eps, &vec![a; args.neighbors])?;
            line += &format!(" {bar:>10.6}");
        }
        Ok(line + "\n")
    };
    out += &format!("{:<8} {:>10} {:>10} {:>5} {:>9} {:>9}", "scope", "epsilon", "beta", "dim", "samples", "explicit");
    if args.alpha.is_some() {
        out += &format!(" {:>10}", "eps_bar");
    }
    out.push('\n');
    match args.agents {
        Some(n) => {
            let (eps, betas) = split_budget(args.eps, args.beta, n)?;
            for i in 0..n {
                out += &row(&format!("agent{i}"), eps[i], betas[i])?;
            }
            let per_agent = match args.alpha {
                Some(a) => eps
                    .iter()
                    .map(|&e| composed_violation(e, &vec![a; args.neighbors]))
                    .collect::<Result<Vec<_>, _>>()?,
                None => eps,
            };
            out += &format!("global violation bound {:.6}\n", per_agent.iter().sum::<f64>());
        }
        None => out += &row("single", args.eps, args.beta)?,
    }
    Ok(out)
}

pub fn run(common: &Common) -> Result<Vec<PathBuf>, CliError> {
    let cfg = load_config(common)?;
    let inst = cfg.instance()?;
    let modes = cfg.controller_modes()?;
    let settings = cfg.settings();
    let fp = fingerprint(&cfg);
    let mut dir = output_dir(&cfg)?;
    for mode in &modes {
        for &seed in &cfg.seeds {
            let mut trace = simulate(&inst.network, &inst.x0, mode, &settings, cfg.steps, seed, &[])?;
            trace.fingerprint = Some(fp.clone());
            let stem = format!("{}_seed{seed}", mode.label());
            dir.write(&format!("trace_{stem}.csv"), &trace.to_csv())?;
            let summary = RunSummary::new(&fp, &trace.summary(&inst.network), &trace.final_ids);
            dir.write_json(&format!("summary_{stem}.json"), &summary)?;
        }
    }
    Ok(dir.written)
}

#[derive(Serialize)]
struct ComparisonFile<'a> {
    fingerprint: &'a str,
    seeds: &'a [u64],
    draws_per_program: usize,
    rows: &'a [dsmpc::validation::ModeComparison],
}

pub fn validate(common: &Common) -> Result<Vec<PathBuf>, CliError> {
    let cfg = load_config(common)?;
    let inst = cfg.instance()?;
    let modes = cfg.controller_modes()?;
    let fp = fingerprint(&cfg);
    let rows = compare_modes(&inst.network, &inst.x0, &modes, &cfg.settings(), cfg.steps, &cfg.seeds, cfg.mc)?;
    let seeds = cfg.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
    let provenance = [("fingerprint", fp.as_str()), ("seeds", seeds.as_str())];
    let mut dir = output_dir(&cfg)?;
    for r in &rows {
        dir.write(&format!("violation_{}.csv", r.mode), &append_columns(&r.pooled.to_csv(), &provenance))?;
    }
    dir.write("comparison.csv", &append_columns(&comparison_csv(&rows), &provenance))?;
    let file = ComparisonFile { fingerprint: &fp, seeds: &cfg.seeds, draws_per_program: cfg.mc, rows: &rows };
    dir.write_json("comparison.json", &file)?;
    Ok(dir.written)
}

/// A fourth room next to the third, built like the preset rooms.
fn fourth_room(horizon: usize, a_self: f64, coupling: f64) -> Result<(AgentModel, AffineMatrix), CliError> {
    let scalar = |v: f64| -> Result<AffineMatrix, CliError> {
        let ch = if v == 0.0 { 0.0 } else { 1.0 };
        Ok(AffineMatrix::new(DMatrix::from_element(1, 1, v), vec![DMatrix::from_element(1, 1, ch)])?)
    };
    let agent = AgentModel {
        index: 3,
        nx: 1,
        nu: 1,
        nw: 1,
        a_self: scalar(a_self)?,
        b: scalar(casestudy::B_DIAG)?,
        c: scalar(casestudy::C_DIAG)?,
        couplings: vec![Coupling { neighbor: 2, matrix: scalar(coupling)? }],
        k: DMatrix::zeros(1, 1),
        q: DMatrix::zeros(1, 1),
        r: DMatrix::identity(1, 1),
        p: DMatrix::zeros(1, 1),
        state_set: Polytope::from_box(&[-casestudy::BAND], &[casestudy::BAND]),
        input_set: Polytope::from_box(&[-casestudy::INPUT_LIMIT], &[casestudy::INPUT_LIMIT]),
        horizon,
    };
    Ok((agent, scalar(coupling)?))
}

#[derive(Serialize)]
struct Topology {
    step: usize,
    event: String,
    ids: Vec<usize>,
    epsilon: Vec<f64>,
    beta: Vec<f64>,
    samples: Vec<usize>,
    epsilon_sum: f64,
    beta_sum: f64,
}

impl Topology {
    fn of(step: usize, event: &str, net: &Network) -> Self {
        let epsilon: Vec<f64> = net.budgets.iter().map(|b| b.epsilon).collect();
        let beta: Vec<f64> = net.budgets.iter().map(|b| b.beta).collect();
        Self {
            step,
            event: event.into(),
            ids: net.ids.clone(),
            epsilon_sum: epsilon.iter().sum(),
            beta_sum: beta.iter().sum(),
            samples: net.budgets.iter().map(|b| b.sample_count).collect(),
            epsilon,
            beta,
        }
    }
}

pub fn plugdemo(common: &Common) -> Result<Vec<PathBuf>, CliError> {
    let cfg = load_config(common)?;
    let SystemSpec::ThreeRoom(room) = &cfg.system else {
        return Err(CliError::Config("plugdemo needs the three-room preset".into()));
    };
    let demo = &cfg.plugdemo;
    if demo.plug_in_step >= demo.plug_out_step || demo.plug_out_step >= cfg.steps {
        return Err(CliError::Config("plugdemo needs plug_in_step < plug_out_step < steps".into()));
    }
    let inst = cfg.instance()?;
    let (agent, follower) = fourth_room(cfg.horizon, demo.a_self, demo.coupling)?;
    let three = casestudy::ThreeRoomConfig {
        horizon: cfg.horizon,
        peak: room.peak,
        night_fraction: room.night_fraction,
        disturbance_band: room.disturbance_band,
        delta_cap: room.delta_cap,
        delta_std: room.delta_std,
    };
    let noise = three.noise();
    let bigger = plug_in(&inst.network, agent.clone(), noise.clone(), vec![(2, follower.clone())])?;
    let new_id = *bigger.ids.last().expect("network is not empty");
    let back = plug_out(&bigger, new_id)?;
    let topology = [
        Topology::of(0, "start", &inst.network),
        Topology::of(demo.plug_in_step, "plug_in", &bigger),
        Topology::of(demo.plug_out_step, "plug_out", &back),
    ];
    let events = vec![
        ScheduledEvent {
            step: demo.plug_in_step,
            event: PlugEvent::In { agent, noise, followers: vec![(2, follower)], x0: DVector::zeros(1) },
        },
        ScheduledEvent { step: demo.plug_out_step, event: PlugEvent::Out { id: new_id } },
    ];
    let fp = fingerprint(&cfg);
    let settings = cfg.settings();
    let mut dir = output_dir(&cfg)?;
    dir.write_json("topology.json", &topology)?;
    for mode in &cfg.controller_modes()? {
        for &seed in &cfg.seeds {
            let mut trace = simulate(&inst.network, &inst.x0, mode, &settings, cfg.steps, seed, &events)?;
            trace.fingerprint = Some(fp.clone());
            let stem = format!("{}_seed{seed}", mode.label());
            dir.write(&format!("plug_trace_{stem}.csv"), &trace.to_csv())?;
            let summary = RunSummary::new(&fp, &trace.summary(&inst.network), &trace.final_ids);
            dir.write_json(&format!("plug_summary_{stem}.json"), &summary)?;
        }
    }
    Ok(dir.written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_table() {
        let args = BoundsArgs { eps: 0.1, beta: 0.01, dim: 1, agents: None, alpha: None, neighbors: 2 };
        let table = bounds(&args).unwrap();
        let row: Vec<_> = table.lines().nth(1).unwrap().split_whitespace().collect();
        assert_eq!(row[4], "44");
    }

    #[test]
    fn bounds_split() {
        let args = BoundsArgs { eps: 0.05, beta: 0.01, dim: 4, agents: Some(3), alpha: Some(0.85), neighbors: 2 };
        let table = bounds(&args).unwrap();
        assert!(table.contains("0.016667"));
        assert!(table.contains("0.023068"));
    }
}

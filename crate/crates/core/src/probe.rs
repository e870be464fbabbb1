//! Empirical probes relating SMILING's performance gap to the cost variance
//! of the expert and the learner. Read-only over [`smiling_run`] outputs:
//! each configuration runs unchanged, then its final policy is evaluated.

use crate::envs::{collect_demos, evaluate, expert_policy, make_env};
use crate::error::{Error, Result};
use crate::imitation::{smiling_run, SmilingConfig};
use crate::rng::Rng;
use crate::stats;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub smiling: SmilingConfig,
    /// Expert episodes collected as demonstrations.
    pub demo_episodes: usize,
    pub demo_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub dynamics_noise: f64,
    pub demo_episodes: usize,
    pub seed: u64,
    /// `V^π − V^{π^e}` in expected episodic true cost; positive when the
    /// learner is worse.
    pub gap: f64,
    pub var_expert: f64,
    pub var_learner: f64,
    /// Mean imitation cost over the last iteration's states.
    pub ds_value: f64,
}

impl ProbeRow {
    pub fn min_var(&self) -> f64 {
        self.var_expert.min(self.var_learner)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
    /// Spearman correlation of `min(Var^{π^e}, Var^π)` with the gap; `NaN`
    /// with fewer than two rows or a constant column.
    pub spearman_min_var_gap: f64,
}

pub const PROBE_CSV_HEADER: &str = "dynamics_noise,demo_episodes,seed,gap,var_expert,var_learner,min_var,ds_value";

impl ProbeReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(PROBE_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out += &format!(
                "{},{},{},{},{},{},{},{}\n",
                r.dynamics_noise,
                r.demo_episodes,
                r.seed,
                r.gap,
                r.var_expert,
                r.var_learner,
                r.min_var(),
                r.ds_value
            );
        }
        out
    }
}

/// Runs SMILING once per configuration and measures, with `eval_episodes`
/// true-cost rollouts each, the expert and final-policy value and variance.
pub fn probe_second_order(cfgs: &[ProbeConfig], eval_episodes: usize, rng: &mut Rng) -> Result<ProbeReport> {
    if cfgs.is_empty() {
        return Err(Error::Argument("probe needs at least one configuration".into()));
    }
    if eval_episodes < 2 {
        return Err(Error::Argument(format!("need at least two evaluation episodes for a variance, got {eval_episodes}")));
    }
    let mut rows = Vec::with_capacity(cfgs.len());
    for pc in cfgs {
        let spec = &pc.smiling.env;
        let (demos, _) = collect_demos(spec, pc.demo_episodes, pc.smiling.state_action, pc.demo_seed)?;
        let run = smiling_run(&pc.smiling, &demos)?;
        let mut env = make_env(spec)?;
        let (v_expert, var_expert) = evaluate(&mut env, &expert_policy(spec), eval_episodes, rng)?;
        let (v_learner, var_learner) = evaluate(&mut env, &run.final_policy, eval_episodes, rng)?;
        let row = ProbeRow {
            dynamics_noise: spec.dynamics_noise,
            demo_episodes: pc.demo_episodes,
            seed: pc.smiling.seed,
            gap: v_learner - v_expert,
            var_expert,
            var_learner,
            ds_value: run.records.last().map_or(f64::NAN, |r| r.ds.value),
        };
        let values = [row.gap, row.var_expert, row.var_learner, row.ds_value];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite probe measurement {row:?}")));
        }
        rows.push(row);
    }
    let min_vars: Vec<f64> = rows.iter().map(ProbeRow::min_var).collect();
    let gaps: Vec<f64> = rows.iter().map(|r| r.gap).collect();
    Ok(ProbeReport { spearman_min_var_gap: stats::spearman(&min_vars, &gaps), rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(gap: f64, ve: f64, vl: f64) -> ProbeRow {
        ProbeRow { dynamics_noise: 0.0, demo_episodes: 5, seed: 0, gap, var_expert: ve, var_learner: vl, ds_value: 0.1 }
    }

    #[test]
    fn csv_has_one_line_per_row() {
        let report = ProbeReport { rows: vec![row(1.0, 0.5, 2.0), row(2.0, 3.0, 1.0)], spearman_min_var_gap: 1.0 };
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], PROBE_CSV_HEADER);
        assert_eq!(lines[1], "0,5,0,1,0.5,2,0.5,0.1");
        assert_eq!(report.rows[1].min_var(), 1.0);
    }

    #[test]
    fn rejects_empty_and_short_evaluations() {
        let mut rng = crate::rng::seeded(0);
        assert!(matches!(probe_second_order(&[], 10, &mut rng), Err(Error::Argument(_))));
    }
}

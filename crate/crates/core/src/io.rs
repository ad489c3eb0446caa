//! Run ledgers and figure data.
//!
//! A ledger directory holds `config.json`, `metrics.csv`, `selections.csv`,
//! `selection_details.csv`, `costs.csv`, one CSV per user under `users/`,
//! the figure tables and `summary.json`. Figure tables are long format with
//! the columns `time_s, entity, variable, value`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buildings::Building;
use crate::harness::{Comparison, RunResult, Totals};
use crate::scenario::ScenarioConfig;

pub const LEDGER_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("file `{path}`: {source}")]
    File { path: String, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File { path: path.display().to_string(), source }
}

/// One observation of a figure table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub time_s: f64,
    pub entity: String,
    pub variable: String,
    pub value: f64,
}

impl LongRow {
    fn new(time_s: f64, entity: impl Into<String>, variable: &str, value: f64) -> Self {
        Self { time_s, entity: entity.into(), variable: variable.into(), value }
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(file_err(path))?;
    Ok(())
}

pub fn read_long(path: &Path) -> Result<Vec<LongRow>, IoError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Supplied, bypass and user mass flow of each run over time.
pub fn fig_mass_flows(runs: &[&RunResult]) -> Vec<LongRow> {
    let mut rows = Vec::new();
    for run in runs {
        for m in &run.steps {
            rows.push(LongRow::new(m.time_s, run.label.as_str(), "supply_kg_s", m.supply_kg_s));
            rows.push(LongRow::new(m.time_s, run.label.as_str(), "bypass_kg_s", m.bypass_kg_s));
            rows.push(LongRow::new(m.time_s, run.label.as_str(), "users_kg_s", m.users_kg_s));
        }
    }
    rows
}

/// Mass flow through every user.
pub fn fig_user_flows(run: &RunResult) -> Vec<LongRow> {
    let mut rows = Vec::new();
    for (id, recs) in &run.users {
        for r in recs {
            rows.push(LongRow::new(r.time_s, id.as_str(), "mass_flow_kg_s", r.flow_kg_s));
        }
    }
    rows
}

/// Used flexibility at the end of every step with the envelope limits.
pub fn fig_flexibility(run: &RunResult, buildings: &[Building]) -> Vec<LongRow> {
    let mut rows = Vec::new();
    for b in buildings {
        let Some(recs) = run.users.get(&b.id) else { continue };
        for r in recs {
            let t = r.time_s + interval_of(run);
            rows.push(LongRow::new(t, b.id.as_str(), "used_flexibility_j", r.used_flexibility_j));
            rows.push(LongRow::new(t, b.id.as_str(), "lower_limit_j", b.lower_bound()));
            rows.push(LongRow::new(t, b.id.as_str(), "upper_limit_j", b.upper_bound()));
        }
    }
    rows
}

fn interval_of(run: &RunResult) -> f64 {
    match run.steps.as_slice() {
        [a, b, ..] => b.time_s - a.time_s,
        _ => 0.0,
    }
}

/// Cost against candidate pressure drop for every subsystem at one step.
/// Entities are `<subsystem>:<candidate index>`; infeasible candidates
/// carry only their pressure drop and a zero `feasible` flag.
pub fn fig_costs(run: &RunResult, step: usize) -> Vec<LongRow> {
    let mut rows = Vec::new();
    let mut index = 0;
    let mut current = String::new();
    for c in run.costs.iter().filter(|c| c.step == step) {
        if c.subsystem != current {
            current = c.subsystem.clone();
            index = 0;
        }
        let t = run.steps.get(step).map_or(0.0, |m| m.time_s);
        let entity = format!("{}:{index}", c.subsystem);
        rows.push(LongRow::new(t, entity.as_str(), "head_pa", c.head_pa));
        rows.push(LongRow::new(t, entity.as_str(), "feasible", if c.feasible { 1.0 } else { 0.0 }));
        if let (Some(cost), Some(s)) = (c.cost_kg, c.supply_kg_s) {
            rows.push(LongRow::new(t, entity.as_str(), "cost_kg", cost));
            rows.push(LongRow::new(t, entity.as_str(), "supply_kg_s", s));
        }
        index += 1;
    }
    rows
}

/// One row per step of the coordinator's choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSelection {
    pub step: usize,
    /// Chosen pressure drop per subsystem, `;`-separated.
    pub choice: String,
    pub total_cost_kg: f64,
    pub total_mdot_kg_s: f64,
    pub pressure_residual_pa: f64,
}

pub fn step_selections(run: &RunResult) -> Vec<StepSelection> {
    let mut out: Vec<StepSelection> = Vec::new();
    for s in &run.selections {
        match out.last_mut() {
            Some(last) if last.step == s.step => {
                last.choice.push(';');
                last.choice.push_str(&s.head_pa.to_string());
                last.pressure_residual_pa = last.pressure_residual_pa.max(s.pressure_residual_pa);
            }
            _ => out.push(StepSelection {
                step: s.step,
                choice: s.head_pa.to_string(),
                total_cost_kg: s.total_cost_kg,
                total_mdot_kg_s: s.total_supply_kg_s,
                pressure_residual_pa: s.pressure_residual_pa,
            }),
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub format: u32,
    pub label: String,
    pub steps_planned: usize,
    pub steps_completed: usize,
    pub max_equivalent_deviation_k: f64,
    pub totals: Totals,
    pub final_flexibility_j: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub infeasibility: Option<String>,
}

pub fn max_equivalent_deviation(run: &RunResult) -> f64 {
    run.users.values().flatten().map(|r| r.equivalent_deviation_k.abs()).fold(0.0, f64::max)
}

/// Everything written to one ledger directory.
pub struct Ledger<'a> {
    pub config: &'a ScenarioConfig,
    pub buildings: &'a [Building],
    pub run: &'a RunResult,
    pub comparison: Option<&'a Comparison>,
    /// Reason the run stopped early.
    pub failure: Option<String>,
}

pub fn write_ledger(dir: &Path, ledger: &Ledger) -> Result<(), IoError> {
    let run = ledger.run;
    fs::create_dir_all(dir.join("users")).map_err(file_err(dir))?;
    let path = dir.join("config.json");
    fs::write(&path, ledger.config.to_json()).map_err(file_err(&path))?;
    write_csv(&dir.join("metrics.csv"), &run.steps)?;
    write_csv(&dir.join("selections.csv"), &step_selections(run))?;
    write_csv(&dir.join("selection_details.csv"), &run.selections)?;
    write_csv(&dir.join("costs.csv"), &run.costs)?;
    for (id, recs) in &run.users {
        write_csv(&dir.join("users").join(format!("{id}.csv")), recs)?;
    }
    write_csv(&dir.join("fig_mI.csv"), &fig_mass_flows(&[run]))?;
    write_csv(&dir.join("fig_mdot.csv"), &fig_user_flows(run))?;
    write_csv(&dir.join("fig_flex.csv"), &fig_flexibility(run, ledger.buildings))?;
    if !run.costs.is_empty() {
        write_csv(&dir.join("fig_costs.csv"), &fig_costs(run, 0))?;
    }
    let summary = Summary {
        format: LEDGER_FORMAT,
        label: run.label.clone(),
        steps_planned: ledger.config.steps(),
        steps_completed: run.steps.len(),
        max_equivalent_deviation_k: max_equivalent_deviation(run),
        totals: run.totals.clone(),
        final_flexibility_j: run.final_flexibility_j.clone(),
        comparison: ledger.comparison.cloned(),
        infeasibility: ledger.failure.clone(),
    };
    let path = dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(file_err(&path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn long_rows_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let rows: Vec<LongRow> = (0..50)
            .map(|i| {
                let x = (i as f64 * 0.731).sin() * 10f64.powi(i % 17 - 8);
                LongRow::new(i as f64 * 600.0, format!("u{i}"), "v", x + 1.0 / 3.0)
            })
            .collect();
        write_csv(&path, &rows).unwrap();
        assert_eq!(read_long(&path).unwrap(), rows);
    }
}

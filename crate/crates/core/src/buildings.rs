//! Building flexibility envelopes.
//!
//! A building is reduced to an energy bucket: the used flexibility `F` is
//! the running integral of delivered minus nominal heat plus an initial
//! offset `C·(T_nom − T_B(t_0))`. Keeping `C·ΔT_L ≤ F ≤ C·ΔT_U` keeps the
//! indoor temperature within the comfort band.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative slack on the envelope check, as a fraction of `C` (J/K).
pub const ENVELOPE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum BuildingError {
    #[error("building `{id}` left its flexibility envelope: F = {used:e} J not in [{lower:e}, {upper:e}]")]
    EnvelopeViolation { id: String, used: f64, lower: f64, upper: f64 },
    #[error("time step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("invalid building `{id}`: {reason}")]
    InvalidBuilding { id: String, reason: String },
    #[error("invalid demand data: {0}")]
    InvalidDemand(String),
    #[error("no demand profile for building `{0}`")]
    MissingDemand(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Building {
    pub id: String,
    /// Lumped heat capacity `C`, J/K.
    pub heat_capacity: f64,
    /// Lower temperature deviation, K (≤ 0).
    pub lower_deviation: f64,
    /// Upper temperature deviation, K (≥ 0).
    pub upper_deviation: f64,
    pub nominal_temperature: f64,
    /// Used flexibility `F`, J.
    pub used_flexibility: f64,
}

impl Building {
    pub fn new(id: impl Into<String>, heat_capacity: f64) -> Self {
        Self {
            id: id.into(),
            heat_capacity,
            lower_deviation: -2.0,
            upper_deviation: 2.0,
            nominal_temperature: 21.0,
            used_flexibility: 0.0,
        }
    }

    pub fn with_deviations(mut self, lower: f64, upper: f64) -> Self {
        self.lower_deviation = lower;
        self.upper_deviation = upper;
        self
    }

    pub fn validate(&self) -> Result<(), BuildingError> {
        let bad = |reason: &str| BuildingError::InvalidBuilding { id: self.id.clone(), reason: reason.into() };
        if !(self.heat_capacity > 0.0) {
            return Err(bad("heat capacity must be positive"));
        }
        if !(self.lower_deviation <= 0.0) || !(self.upper_deviation >= 0.0) {
            return Err(bad("deviations must bracket zero"));
        }
        Ok(())
    }

    pub fn lower_bound(&self) -> f64 {
        self.heat_capacity * self.lower_deviation
    }

    pub fn upper_bound(&self) -> f64 {
        self.heat_capacity * self.upper_deviation
    }

    /// Add `(Q̇_p − Q̇_out)·Δt` to the used flexibility.
    pub fn update_flexibility(&self, delivered_w: f64, demand_w: f64, dt: f64) -> Result<Building, BuildingError> {
        if !(dt > 0.0) {
            return Err(BuildingError::InvalidStep(dt));
        }
        self.apply_energy(delivered_w * dt, demand_w * dt)
    }

    /// Energy form of [`update_flexibility`](Self::update_flexibility).
    pub fn apply_energy(&self, delivered_j: f64, demand_j: f64) -> Result<Building, BuildingError> {
        let mut next = self.clone();
        next.used_flexibility += delivered_j - demand_j;
        next.check_envelope()?;
        Ok(next)
    }

    pub fn check_envelope(&self) -> Result<(), BuildingError> {
        let slack = ENVELOPE_TOLERANCE * self.heat_capacity;
        let (lo, hi) = (self.lower_bound(), self.upper_bound());
        if self.used_flexibility < lo - slack || self.used_flexibility > hi + slack {
            return Err(BuildingError::EnvelopeViolation {
                id: self.id.clone(),
                used: self.used_flexibility,
                lower: lo,
                upper: hi,
            });
        }
        Ok(())
    }

    /// `F/C`, K.
    pub fn equivalent_temperature_deviation(&self) -> f64 {
        self.used_flexibility / self.heat_capacity
    }
}

/// Initial used flexibility `C·(T_nom − T_B(t_0))`, J.
pub fn initial_flexibility(b: &Building, indoor_temperature: f64) -> f64 {
    b.heat_capacity * (b.nominal_temperature - indoor_temperature)
}

/// Piecewise-constant nominal heat demand sampled at a fixed interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandProfile {
    pub step_s: f64,
    /// `Q̇_out` per sample, W; sample `k` covers `[k·step, (k+1)·step)`.
    pub values: Vec<f64>,
}

impl DemandProfile {
    pub fn constant(value: f64, step_s: f64, samples: usize) -> Self {
        Self { step_s, values: vec![value; samples] }
    }

    pub fn duration(&self) -> f64 {
        self.step_s * self.values.len() as f64
    }

    /// Demand at time `t`, W.
    pub fn at(&self, t: f64) -> f64 {
        let k = ((t / self.step_s) + 1e-9).floor().max(0.0) as usize;
        self.values[k.min(self.values.len() - 1)]
    }

    /// `∫ Q̇_out dt` over `[t, t + dt]`, J.
    pub fn energy(&self, t: f64, dt: f64) -> f64 {
        let mut acc = 0.0;
        let mut a = t;
        let end = t + dt;
        while a < end - 1e-9 {
            let k = ((a / self.step_s) + 1e-9).floor().max(0.0) as usize;
            let b = (((k + 1) as f64) * self.step_s).min(end);
            acc += self.values[k.min(self.values.len() - 1)] * (b - a);
            a = b;
        }
        acc
    }

    pub fn covers(&self, until: f64) -> bool {
        self.duration() + 1e-9 >= until
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CatalogRow {
    id: String,
    #[serde(rename = "C_J_per_K")]
    c_j_per_k: f64,
    #[serde(rename = "dTL_K")]
    dtl_k: f64,
    #[serde(rename = "dTU_K")]
    dtu_k: f64,
    #[serde(rename = "TB_nom_C")]
    tb_nom_c: f64,
}

pub fn read_catalog(path: impl AsRef<Path>) -> Result<Vec<Building>, BuildingError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let r: CatalogRow = row?;
        let b = Building {
            id: r.id,
            heat_capacity: r.c_j_per_k,
            lower_deviation: r.dtl_k,
            upper_deviation: r.dtu_k,
            nominal_temperature: r.tb_nom_c,
            used_flexibility: 0.0,
        };
        b.validate()?;
        out.push(b);
    }
    Ok(out)
}

pub fn write_catalog(path: impl AsRef<Path>, buildings: &[Building]) -> Result<(), BuildingError> {
    let mut w = csv::Writer::from_path(path)?;
    for b in buildings {
        w.serialize(CatalogRow {
            id: b.id.clone(),
            c_j_per_k: b.heat_capacity,
            dtl_k: b.lower_deviation,
            dtu_k: b.upper_deviation,
            tb_nom_c: b.nominal_temperature,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct DemandRow {
    time_s: f64,
    building_id: String,
    qdot_out_w: f64,
}

/// Read a long-format demand file into one profile per building.
pub fn read_demand(path: impl AsRef<Path>) -> Result<BTreeMap<String, DemandProfile>, BuildingError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for row in rdr.deserialize() {
        let r: DemandRow = row?;
        if !(r.qdot_out_w >= 0.0) {
            return Err(BuildingError::InvalidDemand(format!(
                "negative demand {} for `{}` at t = {}",
                r.qdot_out_w, r.building_id, r.time_s
            )));
        }
        series.entry(r.building_id).or_default().push((r.time_s, r.qdot_out_w));
    }
    let mut out = BTreeMap::new();
    for (id, mut s) in series {
        s.sort_by(|a, b| a.0.total_cmp(&b.0));
        if s.len() < 2 {
            return Err(BuildingError::InvalidDemand(format!("`{id}` needs at least two samples")));
        }
        let step = s[1].0 - s[0].0;
        if !(step > 0.0) || s[0].0.abs() > 1e-9 {
            return Err(BuildingError::InvalidDemand(format!("`{id}` samples must start at 0 and increase")));
        }
        for (k, (t, _)) in s.iter().enumerate() {
            if (t - k as f64 * step).abs() > 1e-6 * step {
                return Err(BuildingError::InvalidDemand(format!("`{id}` samples are not uniformly spaced")));
            }
        }
        out.insert(id, DemandProfile { step_s: step, values: s.into_iter().map(|p| p.1).collect() });
    }
    Ok(out)
}

pub fn write_demand(
    path: impl AsRef<Path>,
    profiles: &[(String, DemandProfile)],
) -> Result<(), BuildingError> {
    let mut w = csv::Writer::from_path(path)?;
    for (id, p) in profiles {
        for (k, v) in p.values.iter().enumerate() {
            w.serialize(DemandRow { time_s: k as f64 * p.step_s, building_id: id.clone(), qdot_out_w: *v })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initial_offset() {
        let b = Building::new("R-3561", 78e6);
        assert_eq!(initial_flexibility(&b, b.nominal_temperature), 0.0);
        assert!((initial_flexibility(&b, b.nominal_temperature - 1.0) - 78e6).abs() < 1e-6);
        assert!(initial_flexibility(&b, b.nominal_temperature + 0.5) < 0.0);
    }

    #[test]
    fn update_rules() {
        let b = Building::new("b", 1e7);
        let same = b.update_flexibility(5000.0, 5000.0, 600.0).unwrap();
        assert_eq!(same.used_flexibility, 0.0);
        let more = b.update_flexibility(6000.0, 5000.0, 3600.0).unwrap();
        assert!((more.used_flexibility - 3.6e6).abs() < 1e-6);
        let err = b.update_flexibility(1e5, 0.0, 3600.0).unwrap_err();
        assert!(matches!(err, BuildingError::EnvelopeViolation { .. }));
        assert!(matches!(b.update_flexibility(1.0, 1.0, 0.0), Err(BuildingError::InvalidStep(_))));
    }

    #[test]
    fn deviation() {
        let mut b = Building::new("b", 4e6);
        assert_eq!(b.equivalent_temperature_deviation(), 0.0);
        b.used_flexibility = b.upper_bound();
        assert_eq!(b.equivalent_temperature_deviation(), 2.0);
        b.used_flexibility = 0.5 * b.lower_bound();
        assert_eq!(b.equivalent_temperature_deviation(), -1.0);
    }

    #[test]
    fn profile_energy() {
        let p = DemandProfile { step_s: 600.0, values: vec![100.0, 200.0, 300.0] };
        assert_eq!(p.at(0.0), 100.0);
        assert_eq!(p.at(650.0), 200.0);
        assert!((p.energy(300.0, 600.0) - (300.0 * 100.0 + 300.0 * 200.0)).abs() < 1e-9);
        assert!(p.covers(1800.0) && !p.covers(1801.0));
    }

    #[test]
    fn catalog_and_demand_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bs = vec![Building::new("u1", 78e6), Building::new("u2", 1.2562e10).with_deviations(-1.0, 0.5)];
        write_catalog(dir.path().join("b.csv"), &bs).unwrap();
        assert_eq!(read_catalog(dir.path().join("b.csv")).unwrap(), bs);
        let profiles = vec![
            ("u1".to_string(), DemandProfile { step_s: 600.0, values: vec![1.0, 2.5, 0.1 + 0.2] }),
            ("u2".to_string(), DemandProfile::constant(7e4, 600.0, 3)),
        ];
        write_demand(dir.path().join("d.csv"), &profiles).unwrap();
        let back = read_demand(dir.path().join("d.csv")).unwrap();
        assert_eq!(back["u1"], profiles[0].1);
        assert_eq!(back["u2"], profiles[1].1);
    }
}

//! CSV ingestion and export, TOML configuration loading and key-value fit
//! output.
//!
//! A dataset is three files: `subjects.csv` (id, arm, sex, age,
//! prior_history, enroll_time, tau, switch_time), `events.csv` (id, time)
//! and `tv.csv` (id, week, value). An empty `switch_time` means no switch.

use crate::data_model::{complete_weeks, locf_impute, CountingProcessRow, Subject, TvSeries};
use crate::error::{Error, Result};
use crate::inference::{Estimate, EstimatorSpec};
use crate::ipw::WeightSeries;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const SUBJECTS_FILE: &str = "subjects.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const TV_FILE: &str = "tv.csv";

#[derive(Debug, Serialize, Deserialize)]
struct SubjectRecord {
    id: u64,
    arm: u8,
    sex: u8,
    age: f64,
    prior_history: u8,
    enroll_time: f64,
    tau: f64,
    switch_time: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EventRecord {
    id: u64,
    time: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TvRecord {
    id: u64,
    week: usize,
    value: f64,
}

#[derive(Debug, Serialize)]
struct RowRecord {
    id: u64,
    start: f64,
    stop: f64,
    status: u32,
    arm: f64,
    sex: f64,
    age: f64,
    prior_history: f64,
    weight: f64,
}

#[derive(Debug, Serialize)]
struct WeightRecord {
    id: u64,
    week: usize,
    weight: f64,
    cumulative_prob_num: f64,
    cumulative_prob_den: f64,
}

fn records<T: DeserializeOwned, R: Read>(reader: R) -> Result<Vec<T>> {
    csv::Reader::from_reader(reader).deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Builds an imputed series from sparse measurements. The measurement
/// interval is the gcd of the measured weeks, and the series covers at least
/// the complete weeks of follow-up.
fn series_from(id: u64, points: &[(usize, f64)], tau: f64) -> Result<TvSeries> {
    let last = points.iter().map(|p| p.0).max().unwrap_or(0);
    let len = (last + 1).max(complete_weeks(tau) + 1);
    let mut values = vec![None; len];
    for &(w, v) in points {
        if values[w].replace(v).is_some() {
            return Err(Error::InvalidSeries { id, reason: format!("week {w} measured twice") });
        }
    }
    let m = points.iter().map(|p| p.0).fold(0, gcd).max(1);
    locf_impute(&TvSeries { values, measurement_interval: m }).map_err(|_| Error::InvalidSeries {
        id,
        reason: "no week-0 measurement".into(),
    })
}

/// Assembles subjects from the three tables. Ingested subjects carry no
/// counterfactual data.
pub fn read_dataset_from<S: Read, E: Read, V: Read>(subjects: S, events: E, tv: V) -> Result<Vec<Subject>> {
    let subjects: Vec<SubjectRecord> = records(subjects)?;
    let mut events_by_id: HashMap<u64, Vec<f64>> = HashMap::new();
    for e in records::<EventRecord, _>(events)? {
        events_by_id.entry(e.id).or_default().push(e.time);
    }
    let mut tv_by_id: HashMap<u64, Vec<(usize, f64)>> = HashMap::new();
    for r in records::<TvRecord, _>(tv)? {
        tv_by_id.entry(r.id).or_default().push((r.week, r.value));
    }
    let mut seen = HashMap::with_capacity(subjects.len());
    let mut out = Vec::with_capacity(subjects.len());
    for r in subjects {
        if seen.insert(r.id, ()).is_some() {
            return Err(Error::InvalidSubject { id: r.id, reason: "duplicate id".into() });
        }
        let mut event_times = events_by_id.remove(&r.id).unwrap_or_default();
        event_times.sort_by(f64::total_cmp);
        let points = tv_by_id.remove(&r.id).unwrap_or_default();
        let s = Subject {
            id: r.id,
            arm: r.arm,
            sex: r.sex,
            age: r.age,
            prior_history: r.prior_history,
            enroll_time: r.enroll_time,
            tau: r.tau,
            event_times,
            switch_time: r.switch_time,
            tv: series_from(r.id, &points, r.tau)?,
            counterfactual: None,
        };
        s.validate()?;
        out.push(s);
    }
    if let Some(id) = events_by_id.keys().chain(tv_by_id.keys()).min() {
        return Err(Error::InvalidSubject { id: *id, reason: "events or measurements for unknown subject".into() });
    }
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Subject>> {
    read_dataset_from(
        fs::File::open(dir.join(SUBJECTS_FILE))?,
        fs::File::open(dir.join(EVENTS_FILE))?,
        fs::File::open(dir.join(TV_FILE))?,
    )
}

/// Writes the observed data of `subjects`. Only measured weeks (multiples of
/// the measurement interval) go to the covariate table.
pub fn write_dataset_to<S: Write, E: Write, V: Write>(subjects: &[Subject], s: S, e: E, v: V) -> Result<()> {
    let mut sw = csv::Writer::from_writer(s);
    let mut ew = csv::Writer::from_writer(e);
    let mut vw = csv::Writer::from_writer(v);
    for x in subjects {
        sw.serialize(SubjectRecord {
            id: x.id,
            arm: x.arm,
            sex: x.sex,
            age: x.age,
            prior_history: x.prior_history,
            enroll_time: x.enroll_time,
            tau: x.tau,
            switch_time: x.switch_time,
        })?;
        for &time in &x.event_times {
            ew.serialize(EventRecord { id: x.id, time })?;
        }
        let m = x.tv.measurement_interval.max(1);
        for (week, value) in x.tv.values.iter().enumerate().step_by(m) {
            if let Some(value) = *value {
                vw.serialize(TvRecord { id: x.id, week, value })?;
            }
        }
    }
    sw.flush()?;
    ew.flush()?;
    vw.flush()?;
    Ok(())
}

pub fn write_dataset(dir: &Path, subjects: &[Subject]) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_dataset_to(
        subjects,
        fs::File::create(dir.join(SUBJECTS_FILE))?,
        fs::File::create(dir.join(EVENTS_FILE))?,
        fs::File::create(dir.join(TV_FILE))?,
    )
}

/// Counting-process rows with the four fixed covariates.
pub fn write_rows<W: Write>(writer: W, rows: &[CountingProcessRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        let [arm, sex, age, prior_history]: [f64; 4] = r
            .covariates
            .as_slice()
            .try_into()
            .map_err(|_| Error::InvalidParameter(format!("row for subject {} does not carry 4 covariates", r.id)))?;
        w.serialize(RowRecord {
            id: r.id,
            start: r.start,
            stop: r.stop,
            status: r.status,
            arm,
            sex,
            age,
            prior_history,
            weight: r.weight,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Weekly weights in ascending id order.
pub fn write_weights<W: Write>(writer: W, weights: &HashMap<u64, WeightSeries>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let sorted: BTreeMap<_, _> = weights.iter().collect();
    for (&id, ws) in sorted {
        for (week, &weight) in ws.weights.iter().enumerate() {
            w.serialize(WeightRecord {
                id,
                week,
                weight,
                cumulative_prob_num: ws.prob_num.get(week).copied().unwrap_or(1.0),
                cumulative_prob_den: ws.prob_den.get(week).copied().unwrap_or(f64::NAN),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a TOML configuration file.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
}

/// `key = value` lines describing one fit.
pub fn format_estimate(spec: EstimatorSpec, est: &Estimate, alpha: f64) -> String {
    let mut out = String::new();
    let na = |x: Option<f64>| x.map_or_else(|| "NA".into(), |v| v.to_string());
    let _ = writeln!(out, "estimator = {spec}");
    let _ = writeln!(out, "beta_arm = {}", est.beta);
    let _ = writeln!(out, "se_arm = {}", na(est.se));
    let _ = writeln!(out, "rate_ratio = {}", est.beta.exp());
    if let Some(se) = est.se {
        if let Ok(ci) = crate::inference::wald_interval(est.beta, se, alpha) {
            let _ = writeln!(out, "ci_low = {}", ci.low);
            let _ = writeln!(out, "ci_high = {}", ci.high);
        }
    }
    for (name, b) in crate::data_model::COVARIATE_NAMES.iter().zip(&est.fit.beta) {
        let _ = writeln!(out, "coef_{name} = {b}");
    }
    if let Some(a) = est.fit.intercept {
        let _ = writeln!(out, "intercept = {a}");
    }
    if let Some(phi) = est.fit.phi {
        let _ = writeln!(out, "phi = {phi}");
        let _ = writeln!(out, "phi_at_boundary = {}", est.fit.phi_at_boundary);
    }
    let _ = writeln!(out, "objective = {}", est.fit.objective);
    let _ = writeln!(out, "iterations = {}", est.fit.n_iterations);
    let _ = writeln!(out, "converged = {}", est.fit.converged);
    out
}

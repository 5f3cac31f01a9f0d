//! Monte Carlo study: replicate simulation, every model/approach fit,
//! per-cell Est/SD/Bias/RR/CP/power and report rendering.

use crate::data_model::{summarize, DataView};
use crate::error::{Error, Result};
use crate::inference::{
    estimate_many, percentile_bootstrap_many, reject_null, wald_interval, warm_start, Approach, EstimatorSpec,
    Interval, Model,
};
use crate::simulation::{replicate_seed, simulate_trial, SimConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Seed offset separating bootstrap streams from simulation streams.
const BOOTSTRAP_STREAM: u64 = 0x5eed_b007;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub n_replicates: usize,
    pub sim: SimConfig,
    pub approaches: Vec<Approach>,
    pub models: Vec<Model>,
    /// Bootstrap replicates per weighted fit; 0 skips the bootstrap.
    pub bootstrap: usize,
    pub alpha: f64,
    /// Worker threads; 0 uses the rayon default.
    pub threads: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            n_replicates: 100,
            sim: SimConfig::default(),
            approaches: Approach::ALL.to_vec(),
            models: Model::ALL.to_vec(),
            bootstrap: 0,
            alpha: 0.05,
            threads: 0,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        if self.n_replicates == 0 {
            return Err(Error::Config("n_replicates must be at least 1".into()));
        }
        if self.bootstrap == 1 {
            return Err(Error::Config("bootstrap needs at least 2 replicates (or 0 to skip)".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        Ok(())
    }

    /// Valid model/approach combinations in report order.
    pub fn specs(&self) -> Vec<EstimatorSpec> {
        EstimatorSpec::all()
            .into_iter()
            .filter(|s| self.models.contains(&s.model) && self.approaches.contains(&s.approach))
            .collect()
    }
}

/// Outcome of one estimator on one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CellOutcome {
    pub beta: Option<f64>,
    pub se: Option<f64>,
    pub boot: Option<Interval>,
    pub boot_failed: bool,
}

/// Everything retained from one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateResult {
    pub index: usize,
    /// Per view, per arm: event rate, follow-up, switcher percentage, events
    /// per subject.
    pub arms: Vec<ArmRow>,
    pub cells: Vec<(EstimatorSpec, CellOutcome)>,
}

impl ReplicateResult {
    pub fn cell(&self, spec: EstimatorSpec) -> Option<&CellOutcome> {
        self.cells.iter().find(|(s, _)| *s == spec).map(|(_, c)| c)
    }
}

/// Dataset summary row (one view and arm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmRow {
    pub view: DataView,
    pub arm: u8,
    pub event_rate: f64,
    pub mean_followup: f64,
    pub pct_switchers: f64,
    pub mean_events: f64,
}

/// Monte Carlo summary of one model/approach cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub model: Model,
    pub approach: Approach,
    pub measurement_interval: usize,
    pub n_ok: usize,
    pub n_failed: usize,
    pub est: Option<f64>,
    pub sd: Option<f64>,
    pub bias: Option<f64>,
    pub rr: Option<f64>,
    pub cp: Option<f64>,
    /// Percent rejecting zero with the Wald interval from the fit's variance.
    pub power_robust: Option<f64>,
    /// Percent rejecting zero with the percentile bootstrap interval.
    pub power_boot: Option<f64>,
    pub n_boot_failed: usize,
}

impl CellSummary {
    pub fn spec(&self) -> EstimatorSpec {
        EstimatorSpec { model: self.model, approach: self.approach }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub scenario: u8,
    pub n_replicates: usize,
    pub n_subjects: usize,
    pub measurement_interval: usize,
    pub bootstrap: usize,
    pub alpha: f64,
    pub seed: u64,
    pub arms: Vec<ArmRow>,
    pub cells: Vec<CellSummary>,
}

impl StudyReport {
    pub fn cell(&self, model: Model, approach: Approach) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.model == model && c.approach == approach)
    }

    pub fn arm(&self, view: DataView, arm: u8) -> Option<&ArmRow> {
        self.arms.iter().find(|a| a.view == view && a.arm == arm)
    }
}

const VIEWS: [DataView; 3] = [DataView::Hypothetical, DataView::TreatmentPolicy, DataView::SimpleCensoring];

/// Runs one replicate.
pub fn run_replicate(config: &StudyConfig, index: usize) -> Result<ReplicateResult> {
    let seed = replicate_seed(config.sim.seed, index as u64);
    let sim = simulate_trial(&config.sim, seed)?;
    let subjects = &sim.subjects;
    let mut arms = Vec::with_capacity(6);
    for view in VIEWS {
        let s = summarize(subjects, view)?;
        for (arm, a) in s.arms.iter().enumerate() {
            arms.push(ArmRow {
                view,
                arm: arm as u8,
                event_rate: a.event_rate_per_year,
                mean_followup: a.mean_followup_years,
                pct_switchers: a.pct_switchers,
                mean_events: a.mean_events_per_subject,
            });
        }
    }
    let specs = config.specs();
    let (fits, weights) = estimate_many(subjects, &specs, None);
    for (spec, r) in specs.iter().zip(&fits) {
        if let Err(e) = r {
            log::warn!("replicate {index}: {spec} failed: {e}");
        }
    }
    let mut cells: Vec<(EstimatorSpec, CellOutcome)> = specs
        .iter()
        .zip(&fits)
        .map(|(&spec, r)| {
            let (beta, se) = r.as_ref().map_or((None, None), |e| (Some(e.beta), e.se));
            (spec, CellOutcome { beta, se, ..CellOutcome::default() })
        })
        .collect();

    let boot_specs: Vec<EstimatorSpec> = specs.iter().copied().filter(|s| s.approach.is_weighted()).collect();
    if config.bootstrap >= 2 && !boot_specs.is_empty() {
        let ok: Vec<_> = specs.iter().zip(&fits).filter_map(|(s, r)| r.as_ref().ok().map(|e| (*s, e))).collect();
        let warm = warm_start(weights.as_ref(), &ok);
        let boot_seed = replicate_seed(config.sim.seed ^ BOOTSTRAP_STREAM, index as u64);
        let boots = percentile_bootstrap_many(subjects, &boot_specs, config.bootstrap, config.alpha, boot_seed, Some(&warm));
        for (spec, b) in boot_specs.iter().zip(boots) {
            let cell = &mut cells.iter_mut().find(|(s, _)| s == spec).expect("bootstrap spec is a study spec").1;
            match b {
                Ok(b) => cell.boot = Some(b.interval()),
                Err(e) => {
                    log::warn!("replicate {index}: bootstrap for {spec} failed: {e}");
                    cell.boot_failed = true;
                }
            }
        }
    }
    Ok(ReplicateResult { index, arms, cells })
}

/// Runs all replicates. Results are in replicate order and independent of
/// the number of threads.
pub fn run_replicates(config: &StudyConfig) -> Result<Vec<ReplicateResult>> {
    config.validate()?;
    let work = || (0..config.n_replicates).into_par_iter().map(|k| run_replicate(config, k)).collect();
    if config.threads == 0 {
        work()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(work)
    }
}

fn mean_sd(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.len() > 1).then(|| (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(m), sd)
}

fn percent(hits: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| 100.0 * hits as f64 / total as f64)
}

/// Aggregates replicate results into the report tables. The empirical truth
/// of each model is the Monte Carlo mean of its hypothetical estimates.
pub fn summarize_study(config: &StudyConfig, reps: &[ReplicateResult]) -> StudyReport {
    let mut arms = Vec::new();
    for view in VIEWS {
        for arm in 0..2u8 {
            let rows: Vec<&ArmRow> =
                reps.iter().flat_map(|r| &r.arms).filter(|a| a.view == view && a.arm == arm).collect();
            if rows.is_empty() {
                continue;
            }
            let n = rows.len() as f64;
            let avg = |f: fn(&ArmRow) -> f64| rows.iter().map(|a| f(a)).sum::<f64>() / n;
            arms.push(ArmRow {
                view,
                arm,
                event_rate: avg(|a| a.event_rate),
                mean_followup: avg(|a| a.mean_followup),
                pct_switchers: avg(|a| a.pct_switchers),
                mean_events: avg(|a| a.mean_events),
            });
        }
    }

    let specs = config.specs();
    let betas = |spec: EstimatorSpec| -> Vec<f64> { reps.iter().filter_map(|r| r.cell(spec)?.beta).collect() };
    let truth: BTreeMap<Model, f64> = config
        .models
        .iter()
        .filter_map(|&m| {
            let spec = EstimatorSpec::new(m, Approach::Hypothetical).ok()?;
            specs.contains(&spec).then(|| mean_sd(&betas(spec)).0).flatten().map(|t| (m, t))
        })
        .collect();

    let cells = specs
        .iter()
        .map(|&spec| {
            let outcomes: Vec<&CellOutcome> = reps.iter().filter_map(|r| r.cell(spec)).collect();
            let ok: Vec<f64> = outcomes.iter().filter_map(|c| c.beta).collect();
            let (est, sd) = mean_sd(&ok);
            let t = truth.get(&spec.model).copied();
            let wald: Vec<Interval> = outcomes
                .iter()
                .filter_map(|c| wald_interval(c.beta?, c.se?, config.alpha).ok())
                .collect();
            let boot: Vec<Interval> = outcomes.iter().filter_map(|c| c.boot).collect();
            let coverage_set = if spec.approach.is_weighted() { &boot } else { &wald };
            CellSummary {
                model: spec.model,
                approach: spec.approach,
                measurement_interval: config.sim.measurement_interval,
                n_ok: ok.len(),
                n_failed: outcomes.len() - ok.len(),
                est,
                sd,
                bias: est.zip(t).map(|(e, t)| e - t),
                rr: est.map(f64::exp),
                cp: t.and_then(|t| percent(coverage_set.iter().filter(|ci| ci.contains(t)).count(), coverage_set.len())),
                power_robust: percent(wald.iter().filter(|ci| reject_null(**ci)).count(), wald.len()),
                power_boot: percent(boot.iter().filter(|ci| reject_null(**ci)).count(), boot.len()),
                n_boot_failed: outcomes.iter().filter(|c| c.boot_failed).count(),
            }
        })
        .collect();

    StudyReport {
        scenario: config.sim.scenario.into(),
        n_replicates: reps.len(),
        n_subjects: config.sim.n_subjects,
        measurement_interval: config.sim.measurement_interval,
        bootstrap: config.bootstrap,
        alpha: config.alpha,
        seed: config.sim.seed,
        arms,
        cells,
    }
}

pub fn run_study(config: &StudyConfig) -> Result<StudyReport> {
    let reps = run_replicates(config)?;
    Ok(summarize_study(config, &reps))
}

/// Output format of [`render_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
}

const META_HEADER: [&str; 7] =
    ["scenario", "n_replicates", "n_subjects", "measurement_interval", "bootstrap", "alpha", "seed"];
const ARM_HEADER: [&str; 6] = ["view", "arm", "event_rate", "mean_followup", "pct_switchers", "mean_events"];
const EST_HEADER: [&str; 11] =
    ["model", "approach", "measurement_interval", "est", "sd", "bias", "rr", "cp", "n_ok", "n_failed", "n_boot_failed"];
const POWER_HEADER: [&str; 5] = ["model", "approach", "measurement_interval", "power_robust", "power_boot"];

fn num(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".into(), |v| v.to_string())
}

fn fixed(x: Option<f64>, digits: usize) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.digits$}"))
}

pub fn render_report(report: &StudyReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Text => render_text(report),
    }
}

fn render_csv(r: &StudyReport) -> String {
    let mut out = String::new();
    let mut section = |name: &str, header: &[&str], rows: Vec<Vec<String>>| {
        let _ = writeln!(out, "# {name}");
        let _ = writeln!(out, "{}", header.join(","));
        for row in rows {
            let _ = writeln!(out, "{}", row.join(","));
        }
    };
    section(
        "meta",
        &META_HEADER,
        vec![vec![
            r.scenario.to_string(),
            r.n_replicates.to_string(),
            r.n_subjects.to_string(),
            r.measurement_interval.to_string(),
            r.bootstrap.to_string(),
            r.alpha.to_string(),
            r.seed.to_string(),
        ]],
    );
    section(
        "summary",
        &ARM_HEADER,
        r.arms
            .iter()
            .map(|a| {
                vec![
                    a.view.label().to_string(),
                    a.arm.to_string(),
                    a.event_rate.to_string(),
                    a.mean_followup.to_string(),
                    a.pct_switchers.to_string(),
                    a.mean_events.to_string(),
                ]
            })
            .collect(),
    );
    section(
        "estimates",
        &EST_HEADER,
        r.cells
            .iter()
            .map(|c| {
                vec![
                    c.model.label().into(),
                    c.approach.label().into(),
                    c.measurement_interval.to_string(),
                    num(c.est),
                    num(c.sd),
                    num(c.bias),
                    num(c.rr),
                    num(c.cp),
                    c.n_ok.to_string(),
                    c.n_failed.to_string(),
                    c.n_boot_failed.to_string(),
                ]
            })
            .collect(),
    );
    section(
        "power",
        &POWER_HEADER,
        r.cells
            .iter()
            .map(|c| {
                vec![
                    c.model.label().into(),
                    c.approach.label().into(),
                    c.measurement_interval.to_string(),
                    num(c.power_robust),
                    num(c.power_boot),
                ]
            })
            .collect(),
    );
    out
}

fn render_text(r: &StudyReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Scenario {}: {} replicates, n = {}, measurement every {} week(s), bootstrap B = {}, alpha = {}, seed = {}",
        r.scenario, r.n_replicates, r.n_subjects, r.measurement_interval, r.bootstrap, r.alpha, r.seed
    );
    let _ = writeln!(out, "\nDataset summary");
    let _ = writeln!(out, "{:<18} {:>4} {:>10} {:>10} {:>10} {:>10}", "view", "arm", "rate/yr", "follow-up", "%switch", "events");
    for a in &r.arms {
        let _ = writeln!(
            out,
            "{:<18} {:>4} {:>10.3} {:>10.2} {:>10.1} {:>10.3}",
            a.view.label(),
            a.arm,
            a.event_rate,
            a.mean_followup,
            a.pct_switchers,
            a.mean_events
        );
    }
    let _ = writeln!(out, "\nEstimates");
    let _ = writeln!(
        out,
        "{:<6} {:<18} {:>8} {:>8} {:>8} {:>8} {:>6}",
        "model", "approach", "Est", "SD", "Bias", "RR", "CP"
    );
    for c in &r.cells {
        let _ = writeln!(
            out,
            "{:<6} {:<18} {:>8} {:>8} {:>8} {:>8} {:>6}",
            c.model.label(),
            c.approach.label(),
            fixed(c.est, 3),
            fixed(c.sd, 3),
            fixed(c.bias, 3),
            fixed(c.rr, 3),
            fixed(c.cp, 1)
        );
    }
    let _ = writeln!(out, "\nPower (%)");
    let _ = writeln!(out, "{:<6} {:<18} {:>8} {:>8}", "model", "approach", "robust", "boot");
    for c in &r.cells {
        let _ = writeln!(
            out,
            "{:<6} {:<18} {:>8} {:>8}",
            c.model.label(),
            c.approach.label(),
            fixed(c.power_robust, 1),
            fixed(c.power_boot, 1)
        );
    }
    let failures: Vec<&CellSummary> = r.cells.iter().filter(|c| c.n_failed > 0 || c.n_boot_failed > 0).collect();
    if !failures.is_empty() {
        let _ = writeln!(out, "\nFailures");
        for c in failures {
            let _ = writeln!(
                out,
                "{} {}: {} fit failure(s), {} bootstrap failure(s)",
                c.model.label(),
                c.approach.label(),
                c.n_failed,
                c.n_boot_failed
            );
        }
    }
    out
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == "NA" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Parse(format!("bad number '{s}'")))
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse(format!("bad value '{s}'")))
}

fn parse_view(s: &str) -> Result<DataView> {
    VIEWS.into_iter().find(|v| v.label() == s).ok_or_else(|| Error::Parse(format!("unknown view '{s}'")))
}

fn parse_spec(model: &str, approach: &str) -> Result<EstimatorSpec> {
    format!("{model}+{approach}").parse()
}

/// Parses the CSV produced by [`render_report`].
pub fn parse_report_csv(text: &str) -> Result<StudyReport> {
    let mut sections: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    let mut current: Option<String> = None;
    for line in text.lines() {
        if let Some(name) = line.strip_prefix("# ") {
            current = Some(name.trim().to_string());
            sections.insert(name.trim().to_string(), Vec::new());
        } else if !line.trim().is_empty() {
            let name = current.as_ref().ok_or_else(|| Error::Parse("data before first section".into()))?;
            sections.get_mut(name).unwrap().push(line.split(',').map(str::to_string).collect());
        }
    }
    let table = |name: &str, header: &[&str]| -> Result<Vec<Vec<String>>> {
        let rows = sections.get(name).ok_or_else(|| Error::Parse(format!("missing section '{name}'")))?;
        let (head, body) = rows.split_first().ok_or_else(|| Error::Parse(format!("section '{name}' has no header")))?;
        if head.iter().map(String::as_str).ne(header.iter().copied()) {
            return Err(Error::Parse(format!("unexpected header in section '{name}'")));
        }
        if let Some(bad) = body.iter().find(|r| r.len() != header.len()) {
            return Err(Error::Parse(format!("row with {} fields in section '{name}'", bad.len())));
        }
        Ok(body.to_vec())
    };
    let meta = table("meta", &META_HEADER)?;
    let m = meta.first().ok_or_else(|| Error::Parse("empty meta section".into()))?;
    let arms = table("summary", &ARM_HEADER)?
        .iter()
        .map(|r| {
            Ok(ArmRow {
                view: parse_view(&r[0])?,
                arm: parse(&r[1])?,
                event_rate: parse(&r[2])?,
                mean_followup: parse(&r[3])?,
                pct_switchers: parse(&r[4])?,
                mean_events: parse(&r[5])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let power = table("power", &POWER_HEADER)?;
    let cells = table("estimates", &EST_HEADER)?
        .iter()
        .map(|r| {
            let spec = parse_spec(&r[0], &r[1])?;
            let p = power
                .iter()
                .find(|p| p[0] == r[0] && p[1] == r[1] && p[2] == r[2])
                .ok_or_else(|| Error::Parse(format!("no power row for {spec}")))?;
            Ok(CellSummary {
                model: spec.model,
                approach: spec.approach,
                measurement_interval: parse(&r[2])?,
                est: parse_opt(&r[3])?,
                sd: parse_opt(&r[4])?,
                bias: parse_opt(&r[5])?,
                rr: parse_opt(&r[6])?,
                cp: parse_opt(&r[7])?,
                n_ok: parse(&r[8])?,
                n_failed: parse(&r[9])?,
                n_boot_failed: parse(&r[10])?,
                power_robust: parse_opt(&p[3])?,
                power_boot: parse_opt(&p[4])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyReport {
        scenario: parse(&m[0])?,
        n_replicates: parse(&m[1])?,
        n_subjects: parse(&m[2])?,
        measurement_interval: parse(&m[3])?,
        bootstrap: parse(&m[4])?,
        alpha: parse(&m[5])?,
        seed: parse(&m[6])?,
        arms,
        cells,
    })
}

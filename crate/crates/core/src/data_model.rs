//! Trial data: subjects, weekly time-varying covariates, counting-process
//! expansion with optional censoring at treatment switch, and per-arm
//! dataset summaries.

use crate::error::{Error, Result};
use crate::ipw::WeightSeries;
use crate::scalar::Real;
use std::collections::HashMap;

/// Weeks per year used for every week/year conversion.
pub const WEEKS_PER_YEAR: f64 = 52.0;

const WEEK_EPS: f64 = 1e-9;

/// Index of the week containing time `t` (years) when weeks are half-open on
/// the left, `(k/52, (k+1)/52]`. Time zero maps to week 0.
#[inline]
pub fn week_containing(t: f64) -> usize {
    let w = (t * WEEKS_PER_YEAR - WEEK_EPS).ceil() - 1.0;
    if w <= 0.0 {
        0
    } else {
        w as usize
    }
}

/// Number of complete weeks in `(0, t]`.
#[inline]
pub fn complete_weeks(t: f64) -> usize {
    let w = (t * WEEKS_PER_YEAR + WEEK_EPS).floor();
    if w <= 0.0 {
        0
    } else {
        w as usize
    }
}

/// Weekly series of a time-varying covariate `L(t)`. Entry `k` is the value
/// during week `k`; `None` marks an unmeasured week.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TvSeries {
    pub values: Vec<Option<f64>>,
    /// Weeks between actual measurements (1 or 12 in the simulations).
    pub measurement_interval: usize,
}

impl TvSeries {
    /// A fully observed weekly series.
    pub fn weekly(values: Vec<f64>) -> Self {
        Self { values: values.into_iter().map(Some).collect(), measurement_interval: 1 }
    }

    /// Keeps only weeks `0, m, 2m, ...`; everything else becomes unmeasured.
    pub fn subsample(&self, m: usize) -> Self {
        let m = m.max(1);
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(w, v)| if w % m == 0 { *v } else { None })
            .collect();
        Self { values, measurement_interval: m }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, week: usize) -> Option<f64> {
        self.values.get(week).copied().flatten()
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().all(Option::is_some)
    }

    /// Dense copy of the values; fails on the first unmeasured week.
    pub fn dense(&self) -> Option<Vec<f64>> {
        self.values.iter().copied().collect()
    }
}

/// Last-observation-carried-forward imputation. Measured weeks are kept,
/// every other week takes the most recent measured value.
pub fn locf_impute(series: &TvSeries) -> Result<TvSeries> {
    if series.values.is_empty() {
        return Ok(series.clone());
    }
    let mut last = series.values[0].ok_or(Error::MissingBaselineMeasurement)?;
    let values = series
        .values
        .iter()
        .map(|v| {
            if let Some(x) = v {
                last = *x;
            }
            Some(last)
        })
        .collect();
    Ok(TvSeries { values, measurement_interval: series.measurement_interval })
}

/// Counterfactual (no-switching) outcome data attached to simulated subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct Counterfactual {
    pub event_times: Vec<f64>,
    pub tv: TvSeries,
}

/// One trial participant.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: u64,
    /// 0 placebo, 1 active treatment.
    pub arm: u8,
    pub sex: u8,
    pub age: f64,
    pub prior_history: u8,
    /// Years from trial start.
    pub enroll_time: f64,
    /// Follow-up duration in years.
    pub tau: f64,
    /// Sorted event times in `(0, tau]`.
    pub event_times: Vec<f64>,
    /// Switching time in years; `None` means the subject never switches.
    pub switch_time: Option<f64>,
    pub tv: TvSeries,
    pub counterfactual: Option<Counterfactual>,
}

/// Number of fixed covariates carried on every counting-process row.
pub const N_FIXED_COVARIATES: usize = 4;

/// Names of the fixed covariates, in row order.
pub const COVARIATE_NAMES: [&str; N_FIXED_COVARIATES] = ["arm", "sex", "age", "prior_history"];

impl Subject {
    /// Fixed covariates in the order `arm, sex, age, prior_history`.
    pub fn covariates(&self) -> [f64; N_FIXED_COVARIATES] {
        [f64::from(self.arm), f64::from(self.sex), self.age, f64::from(self.prior_history)]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidSubject { id: self.id, reason };
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(bad(format!("follow-up must be positive, got {}", self.tau)));
        }
        if self.arm > 1 || self.sex > 1 || self.prior_history > 1 {
            return Err(bad("arm, sex and prior_history must be 0 or 1".into()));
        }
        if !self.age.is_finite() {
            return Err(bad("age must be finite".into()));
        }
        if let Some(s) = self.switch_time {
            if !(s > 0.0 && s <= self.tau) {
                return Err(bad(format!("switch time {s} outside (0, {}]", self.tau)));
            }
        }
        check_events(self.id, &self.event_times, self.tau)?;
        if let Some(cf) = &self.counterfactual {
            check_events(self.id, &cf.event_times, self.tau)?;
        }
        Ok(())
    }

    /// End of the analysed follow-up: `min(tau, S)` when censoring at the
    /// switch, `tau` otherwise.
    pub fn followup_end(&self, censor_at_switch: bool) -> f64 {
        match (censor_at_switch, self.switch_time) {
            (true, Some(s)) => s.min(self.tau),
            _ => self.tau,
        }
    }

    /// Events retained in the analysis. Under censoring, events at or after
    /// the switch are dropped.
    pub fn retained_events(&self, censor_at_switch: bool) -> impl Iterator<Item = f64> + '_ {
        let cut = if censor_at_switch { self.switch_time } else { None };
        self.event_times
            .iter()
            .copied()
            .filter(move |&t| t <= self.tau && cut.is_none_or(|s| t < s))
    }

    pub fn is_switcher(&self) -> bool {
        self.switch_time.is_some_and(|s| s < self.tau)
    }

    /// The subject as it would have been observed without switching.
    pub fn hypothetical_view(&self) -> Result<Subject> {
        let cf = self
            .counterfactual
            .as_ref()
            .ok_or(Error::MissingCounterfactual { mode: "hypothetical" })?;
        Ok(Subject {
            event_times: cf.event_times.clone(),
            tv: cf.tv.clone(),
            switch_time: None,
            counterfactual: None,
            ..self.clone()
        })
    }
}

fn check_events(id: u64, times: &[f64], tau: f64) -> Result<()> {
    let mut prev = 0.0;
    for &t in times {
        if t > tau {
            return Err(Error::EventBeyondFollowUp { id, time: t, tau });
        }
        if !(t > 0.0) || t < prev {
            return Err(Error::InvalidSubject {
                id,
                reason: format!("event times must be sorted and positive, got {t} after {prev}"),
            });
        }
        prev = t;
    }
    Ok(())
}

/// One `(start, stop]` interval of a subject's follow-up.
#[derive(Debug, Clone, PartialEq)]
pub struct CountingProcessRow<T = f64> {
    pub id: u64,
    pub start: T,
    pub stop: T,
    /// Number of events at `stop` (1 or 0; larger only for tied events).
    pub status: u32,
    pub covariates: Vec<T>,
    pub weight: T,
}

impl CountingProcessRow<f64> {
    /// Converts to another scalar type.
    pub fn cast<T: Real>(&self) -> CountingProcessRow<T> {
        CountingProcessRow {
            id: self.id,
            start: T::lit(self.start),
            stop: T::lit(self.stop),
            status: self.status,
            covariates: self.covariates.iter().map(|&x| T::lit(x)).collect(),
            weight: T::lit(self.weight),
        }
    }
}

impl<T: Clone> CountingProcessRow<T> {
    /// Keeps only the covariates at the given positions.
    pub fn select(&self, columns: &[usize]) -> Self {
        Self { covariates: columns.iter().map(|&c| self.covariates[c].clone()).collect(), ..self.clone() }
    }
}

/// Splits each subject's follow-up at its event times.
///
/// With `censor_at_switch`, follow-up ends at `min(tau, S)` and events at or
/// after `S` are dropped. When `weights` are supplied, intervals are further
/// split at week boundaries wherever the weekly weight changes, and each row
/// carries the weight of the week containing its stop time.
pub fn expand_counting_process(
    subjects: &[Subject],
    censor_at_switch: bool,
    weights: Option<&HashMap<u64, WeightSeries>>,
) -> Result<Vec<CountingProcessRow>> {
    let mut rows = Vec::new();
    for s in subjects {
        expand_subject(s, censor_at_switch, weights, &mut rows)?;
    }
    Ok(rows)
}

fn expand_subject(
    s: &Subject,
    censor_at_switch: bool,
    weights: Option<&HashMap<u64, WeightSeries>>,
    rows: &mut Vec<CountingProcessRow>,
) -> Result<()> {
    if let Some(&t) = s.event_times.iter().find(|&&t| t > s.tau) {
        return Err(Error::EventBeyondFollowUp { id: s.id, time: t, tau: s.tau });
    }
    let end = s.followup_end(censor_at_switch);
    let covariates = s.covariates().to_vec();
    let series = match weights {
        Some(map) => {
            let ws = map.get(&s.id).ok_or(Error::MissingWeight { id: s.id, week: 0 })?;
            if ws.weights.is_empty() {
                return Err(Error::MissingWeight { id: s.id, week: 0 });
            }
            Some(ws)
        }
        None => None,
    };

    // Event cut points with multiplicities.
    let mut cuts: Vec<(f64, u32)> = Vec::new();
    for t in s.retained_events(censor_at_switch) {
        match cuts.last_mut() {
            Some((last, n)) if *last == t => *n += 1,
            _ => cuts.push((t, 1)),
        }
    }
    if cuts.last().is_none_or(|&(t, _)| t < end) {
        cuts.push((end, 0));
    }

    let first = rows.len();
    let mut start = 0.0;
    for (stop, status) in cuts {
        match series {
            None => rows.push(CountingProcessRow {
                id: s.id,
                start,
                stop,
                status,
                covariates: covariates.clone(),
                weight: 1.0,
            }),
            Some(ws) => {
                // Week boundaries strictly inside (start, stop).
                let mut a = start;
                let mut k = week_containing(start) + 1;
                if start == 0.0 {
                    k = 1;
                }
                loop {
                    let boundary = k as f64 / WEEKS_PER_YEAR;
                    let (b, st) = if boundary < stop - WEEK_EPS { (boundary, 0) } else { (stop, status) };
                    let w = ws.at_time(b);
                    push_merged(rows, first, s.id, a, b, st, &covariates, w);
                    if b == stop {
                        break;
                    }
                    a = b;
                    k += 1;
                }
            }
        }
        start = stop;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn push_merged(
    rows: &mut Vec<CountingProcessRow>,
    first: usize,
    id: u64,
    start: f64,
    stop: f64,
    status: u32,
    covariates: &[f64],
    weight: f64,
) {
    if rows.len() > first {
        let last = rows.last_mut().unwrap();
        if last.status == 0 && last.weight == weight && last.stop == start {
            last.stop = stop;
            last.status = status;
            return;
        }
    }
    rows.push(CountingProcessRow { id, start, stop, status, covariates: covariates.to_vec(), weight });
}

/// Which event and follow-up definition a summary or analysis uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DataView {
    /// Counterfactual events without switching, followed to `tau`.
    Hypothetical,
    /// All observed events to `tau`, regardless of switching.
    TreatmentPolicy,
    /// Observed events and follow-up truncated at the switch.
    SimpleCensoring,
}

impl DataView {
    pub fn label(self) -> &'static str {
        match self {
            DataView::Hypothetical => "hypothetical",
            DataView::TreatmentPolicy => "treatment_policy",
            DataView::SimpleCensoring => "simple_censoring",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ArmSummary {
    pub n_subjects: usize,
    pub total_events: usize,
    pub mean_followup_years: f64,
    pub event_rate_per_year: f64,
    pub mean_events_per_subject: f64,
    pub pct_switchers: f64,
}

/// Per-arm statistics; index 0 is placebo, 1 active.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DatasetSummary {
    pub arms: [ArmSummary; 2],
}

pub fn summarize(subjects: &[Subject], view: DataView) -> Result<DatasetSummary> {
    let mut events = [0usize; 2];
    let mut followup = [0.0f64; 2];
    let mut n = [0usize; 2];
    let mut switchers = [0usize; 2];
    for s in subjects {
        let arm = usize::from(s.arm.min(1));
        n[arm] += 1;
        if s.is_switcher() {
            switchers[arm] += 1;
        }
        match view {
            DataView::Hypothetical => {
                let cf = s
                    .counterfactual
                    .as_ref()
                    .ok_or(Error::MissingCounterfactual { mode: "hypothetical" })?;
                events[arm] += cf.event_times.len();
                followup[arm] += s.tau;
            }
            DataView::TreatmentPolicy => {
                events[arm] += s.retained_events(false).count();
                followup[arm] += s.tau;
            }
            DataView::SimpleCensoring => {
                events[arm] += s.retained_events(true).count();
                followup[arm] += s.followup_end(true);
            }
        }
    }
    let mut out = DatasetSummary::default();
    for arm in 0..2 {
        if n[arm] == 0 {
            continue;
        }
        let nf = n[arm] as f64;
        out.arms[arm] = ArmSummary {
            n_subjects: n[arm],
            total_events: events[arm],
            mean_followup_years: followup[arm] / nf,
            event_rate_per_year: if followup[arm] > 0.0 { events[arm] as f64 / followup[arm] } else { 0.0 },
            mean_events_per_subject: events[arm] as f64 / nf,
            pct_switchers: 100.0 * switchers[arm] as f64 / nf,
        };
    }
    Ok(out)
}

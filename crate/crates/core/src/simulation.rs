//! Monte Carlo trial generator: baseline covariates, weekly covariate
//! trajectories with responder dynamics, weekly Bernoulli switching, three
//! recurrent-event mechanisms, and the matching no-switching counterfactual.

use crate::data_model::{complete_weeks, locf_impute, Counterfactual, Subject, TvSeries, WEEKS_PER_YEAR};
use crate::error::{Error, Result};
use crate::scalar::expit;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

/// Which recurrent-event mechanism generates the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Scenario {
    /// Event probability depends on covariates only.
    Independent = 1,
    /// Event probability also depends on whether any event has occurred.
    History = 2,
    /// Subject-level gamma frailty multiplies the event probability.
    Frailty = 3,
}

impl TryFrom<u8> for Scenario {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Self::Independent),
            2 => Ok(Self::History),
            3 => Ok(Self::Frailty),
            _ => Err(format!("scenario must be 1, 2 or 3, got {v}")),
        }
    }
}

impl From<Scenario> for u8 {
    fn from(s: Scenario) -> u8 {
        s as u8
    }
}

/// Coefficients of the switching and event models. Vectors are ordered
/// `(intercept, arm, prior_history, sex, age, L)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    pub scenario: Scenario,
    pub beta_s: [f64; 6],
    pub beta_e: [f64; 6],
    /// Logit shift once any event has occurred (scenario 2).
    pub history_coef: f64,
    /// Variance of the mean-one gamma frailty (scenario 3).
    pub frailty_variance: f64,
}

pub const BETA_S: [f64; 6] = [-13.76, -0.4, 0.8, 0.4, 0.016, 0.264];
pub const BETA_E1: [f64; 6] = [-5.6, -0.07, 0.07, 0.035, 0.0035, 0.028];
pub const BETA_E2: [f64; 6] = [-5.74, -0.07, 0.07, 0.035, 0.0035, 0.028];
pub const BETA_E3: [f64; 6] = [-5.46, -0.105, 0.07, 0.035, 0.0035, 0.028];

impl ScenarioParams {
    pub fn new(scenario: Scenario) -> Self {
        let beta_e = match scenario {
            Scenario::Independent => BETA_E1,
            Scenario::History => BETA_E2,
            Scenario::Frailty => BETA_E3,
        };
        Self { scenario, beta_s: BETA_S, beta_e, history_coef: 0.7, frailty_variance: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenario == Scenario::Frailty && !(self.frailty_variance > 0.0) {
            return Err(Error::Config("frailty variance must be positive in scenario 3".into()));
        }
        if self.beta_s.iter().chain(&self.beta_e).any(|b| !b.is_finite()) {
            return Err(Error::Config("coefficients must be finite".into()));
        }
        Ok(())
    }
}

/// Trial design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_subjects: usize,
    pub trial_years: f64,
    pub enrollment_years: f64,
    /// Exponential loss-to-follow-up rate per year.
    pub ltfu_rate: f64,
    /// Weeks between measurements of `L(t)` (1 or 12).
    pub measurement_interval: usize,
    pub scenario: Scenario,
    pub seed: u64,
    /// Overrides the scenario's default coefficients when present.
    pub params: Option<ScenarioParams>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_subjects: 2000,
            trial_years: 4.0,
            enrollment_years: 2.0,
            ltfu_rate: 0.032,
            measurement_interval: 1,
            scenario: Scenario::Independent,
            seed: 1,
            params: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || !self.n_subjects.is_multiple_of(2) {
            return Err(Error::Config(format!("n_subjects must be positive and even, got {}", self.n_subjects)));
        }
        if !matches!(self.measurement_interval, 1 | 12) {
            return Err(Error::Config(format!(
                "measurement_interval must be 1 or 12, got {}",
                self.measurement_interval
            )));
        }
        if !(self.enrollment_years >= 0.0 && self.trial_years > self.enrollment_years) {
            return Err(Error::Config("trial must last longer than enrollment".into()));
        }
        if !(self.ltfu_rate >= 0.0) {
            return Err(Error::Config("ltfu_rate must be non-negative".into()));
        }
        self.scenario_params().validate()
    }

    pub fn scenario_params(&self) -> ScenarioParams {
        self.params.clone().unwrap_or_else(|| ScenarioParams::new(self.scenario))
    }
}

/// Baseline draws that are not stored on [`Subject`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineExtras {
    pub l0: f64,
    pub responder: bool,
    /// Gamma frailty (1 outside scenario 3).
    pub frailty: f64,
}

/// Baseline covariates and follow-up for every subject, with arms assigned
/// exactly 1:1 by a random permutation. Time-varying data and events are
/// left empty.
pub fn gen_baseline<R: Rng>(config: &SimConfig, rng: &mut R) -> Vec<(Subject, BaselineExtras)> {
    let n = config.n_subjects;
    let mut arms: Vec<u8> = (0..n).map(|i| u8::from(i >= n / 2)).collect();
    arms.shuffle(rng);
    let params = config.scenario_params();
    let l0_dist = Normal::new(18.0, 5.0).unwrap();
    let ltfu = (config.ltfu_rate > 0.0).then(|| Exp::new(config.ltfu_rate).unwrap());
    let frailty = (params.scenario == Scenario::Frailty).then(|| {
        let shape = 1.0 / params.frailty_variance;
        Gamma::new(shape, params.frailty_variance).unwrap()
    });
    arms.into_iter()
        .enumerate()
        .map(|(i, arm)| {
            let enroll = rng.random::<f64>() * config.enrollment_years;
            let admin = config.trial_years - enroll;
            let lost = ltfu.map_or(f64::INFINITY, |d| d.sample(rng));
            let tau = lost.min(admin);
            let l0 = l0_dist.sample(rng);
            let sex = u8::from(rng.random::<f64>() < 0.5);
            let age = 50.0 + 15.0 * rng.random::<f64>();
            let prior = u8::from(rng.random::<f64>() < if l0 > 16.0 { 0.1 } else { 0.05 });
            let responder_draw = rng.random::<f64>();
            let responder = l0 >= 15.0 && responder_draw < 0.8;
            let gamma = frailty.map_or(1.0, |g| g.sample(rng));
            let subject = Subject {
                id: i as u64 + 1,
                arm,
                sex,
                age,
                prior_history: prior,
                enroll_time: enroll,
                tau,
                event_times: Vec::new(),
                switch_time: None,
                tv: TvSeries::default(),
                counterfactual: None,
            };
            (subject, BaselineExtras { l0, responder, frailty: gamma })
        })
        .collect()
}

/// Mean of `L` in `week` for a subject with the given responder status.
/// `treated_from` is the week from which the subject is on active treatment.
fn tv_mean(l0: f64, responder: bool, treated_from: Option<usize>, week: usize) -> f64 {
    match (responder, treated_from) {
        (true, Some(start)) if week >= start => (l0 - 0.14 * (week - start) as f64).max(15.0),
        _ => l0,
    }
}

/// Weekly trajectory of `L` over weeks `0..n_weeks`. Week 0 is the
/// baseline value itself; later weeks add standard normal noise to the mean.
/// Placebo responders switching in `switch_week` follow the treated profile
/// from the next week on.
pub fn gen_tv_trajectory<R: Rng>(
    arm: u8,
    extras: &BaselineExtras,
    switch_week: Option<usize>,
    n_weeks: usize,
    rng: &mut R,
) -> TvSeries {
    let treated_from = if arm == 1 { Some(0) } else { switch_week };
    let values = (0..n_weeks)
        .map(|w| {
            if w == 0 {
                extras.l0
            } else {
                let z: f64 = StandardNormal.sample(rng);
                tv_mean(extras.l0, extras.responder, treated_from, w) + z
            }
        })
        .collect();
    TvSeries::weekly(values)
}

/// Linear predictor `b' beta` for `b = (1, arm, prior_history, sex, age, L)`,
/// where `arm` is the treatment currently received.
fn linear(beta: &[f64; 6], s: &Subject, arm: u8, l: f64) -> f64 {
    beta[0]
        + beta[1] * f64::from(arm)
        + beta[2] * f64::from(s.prior_history)
        + beta[3] * f64::from(s.sex)
        + beta[4] * s.age
        + beta[5] * l
}

/// Weekly switching probability.
pub fn switch_probability(params: &ScenarioParams, s: &Subject, l: f64) -> f64 {
    expit(linear(&params.beta_s, s, s.arm, l))
}

/// Weekly event probability given the treatment received, the current
/// covariate value and whether any earlier event has occurred.
pub fn event_probability(params: &ScenarioParams, s: &Subject, arm: u8, l: f64, any_event: bool, frailty: f64) -> f64 {
    let eta = linear(&params.beta_e, s, arm, l);
    match params.scenario {
        Scenario::Independent => expit(eta),
        Scenario::History => expit(eta + if any_event { params.history_coef } else { 0.0 }),
        Scenario::Frailty => (frailty * expit(eta)).min(1.0),
    }
}

/// Week in which the first switch occurs. Only weeks fully inside
/// follow-up are eligible.
pub fn gen_switching<R: Rng>(params: &ScenarioParams, s: &Subject, tv: &[f64], rng: &mut R) -> Option<usize> {
    let eligible = complete_weeks(s.tau).min(tv.len());
    (0..eligible).find(|&w| rng.random::<f64>() < switch_probability(params, s, tv[w]))
}

/// Event weeks for one subject. Weeks whose midpoint lies beyond follow-up
/// are not simulated.
pub fn gen_events<R: Rng>(params: &ScenarioParams, s: &Subject, tv: &[f64], frailty: f64, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::new();
    for (w, &l) in tv.iter().enumerate() {
        if week_midpoint(w) > s.tau {
            break;
        }
        if rng.random::<f64>() < event_probability(params, s, s.arm, l, !out.is_empty(), frailty) {
            out.push(w);
        }
    }
    out
}

fn week_midpoint(w: usize) -> f64 {
    (w as f64 + 0.5) / WEEKS_PER_YEAR
}

/// Simulated trial: subjects carry observed data plus the no-switching
/// counterfactual events and covariate path.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub subjects: Vec<Subject>,
}

impl SimOutput {
    /// Subjects as observed in the counterfactual world without switching.
    pub fn hypothetical(&self) -> Result<Vec<Subject>> {
        self.subjects.iter().map(Subject::hypothetical_view).collect()
    }
}

/// Generates one subject week by week: covariate update, then the event draw
/// (one uniform shared by the observed and counterfactual processes), then
/// the switch draw.
fn simulate_subject<R: Rng>(
    params: &ScenarioParams,
    mut s: Subject,
    extras: &BaselineExtras,
    rng: &mut R,
) -> (Subject, Vec<f64>, Vec<f64>) {
    let n_weeks = complete_weeks(s.tau) + 1;
    let eligible = complete_weeks(s.tau);
    let mut l_obs = Vec::with_capacity(n_weeks);
    let mut l_cf = Vec::with_capacity(n_weeks);
    let mut ev_obs = Vec::new();
    let mut ev_cf = Vec::new();
    let mut switch_week: Option<usize> = None;
    let cf_from = if s.arm == 1 { Some(0) } else { None };
    for w in 0..n_weeks {
        let z: f64 = StandardNormal.sample(rng);
        let u: f64 = rng.random();
        let v: f64 = rng.random();
        let (lo, lc) = if w == 0 {
            (extras.l0, extras.l0)
        } else {
            let obs_from = if s.arm == 1 { Some(0) } else { switch_week };
            (
                tv_mean(extras.l0, extras.responder, obs_from, w) + z,
                tv_mean(extras.l0, extras.responder, cf_from, w) + z,
            )
        };
        l_obs.push(lo);
        l_cf.push(lc);
        if week_midpoint(w) <= s.tau {
            // Placebo switchers are on active treatment from the week after the switch.
            let treated = if switch_week.is_some() { 1 } else { s.arm };
            if u < event_probability(params, &s, treated, lo, !ev_obs.is_empty(), extras.frailty) {
                ev_obs.push(week_midpoint(w));
            }
            if u < event_probability(params, &s, s.arm, lc, !ev_cf.is_empty(), extras.frailty) {
                ev_cf.push(week_midpoint(w));
            }
        }
        if switch_week.is_none() && w < eligible && v < switch_probability(params, &s, lo) {
            switch_week = Some(w);
        }
    }
    s.event_times = ev_obs;
    s.switch_time = switch_week.map(|w| (w + 1) as f64 / WEEKS_PER_YEAR);
    s.counterfactual = Some(Counterfactual { event_times: ev_cf, tv: TvSeries::default() });
    (s, l_obs, l_cf)
}

/// Simulates one trial. Observed and counterfactual processes share every
/// random draw, so they differ only after a placebo subject switches.
pub fn simulate_trial(config: &SimConfig, seed: u64) -> Result<SimOutput> {
    config.validate()?;
    let params = config.scenario_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let baseline = gen_baseline(config, &mut rng);
    let mut subjects = Vec::with_capacity(baseline.len());
    for (s, extras) in baseline {
        let (mut s, l_obs, l_cf) = simulate_subject(&params, s, &extras, &mut rng);
        let m = config.measurement_interval;
        s.tv = locf_impute(&TvSeries::weekly(l_obs).subsample(m))?;
        if let Some(cf) = s.counterfactual.as_mut() {
            cf.tv = locf_impute(&TvSeries::weekly(l_cf).subsample(m))?;
        }
        subjects.push(s);
    }
    Ok(SimOutput { subjects })
}

/// Seed for replicate `k` of a study seeded with `seed`.
pub fn replicate_seed(seed: u64, k: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k + 1);
    rng.random()
}

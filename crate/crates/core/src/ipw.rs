//! Inverse probability of switching weights: person-period expansion, pooled
//! logistic regression for the weekly switching hazard, cumulative
//! unswitched probabilities and (stabilized) weekly weights.

use crate::data_model::{complete_weeks, week_containing, Subject};
use crate::error::{Error, Result};
use crate::linalg::{max_abs, solve_with_ridge, Matrix};
use crate::scalar::{expit, log1p_exp, Real};
use rustc_hash::FxHashMap;
use std::collections::HashMap;

/// Number of switching-model covariates on a person-period record.
pub const N_SWITCH_COVARIATES: usize = 5;

/// Names of the person-period covariates, in record order.
pub const SWITCH_COVARIATE_NAMES: [&str; N_SWITCH_COVARIATES] = ["arm", "sex", "age", "prior_history", "L"];

/// Columns of the denominator model: every covariate including `L(t)`.
pub const DENOMINATOR_COLUMNS: [usize; 5] = [0, 1, 2, 3, 4];

/// Columns of the numerator model: baseline covariates only.
pub const NUMERATOR_COLUMNS: [usize; 4] = [0, 1, 2, 3];

const POSITIVITY_FLOOR: f64 = 1e-12;

/// One subject-week at risk of switching.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonPeriodRecord {
    pub id: u64,
    pub week: usize,
    /// Whether the subject switched during this week.
    pub switched: bool,
    /// `(arm, sex, age, prior_history, L(week))`.
    pub covariates: [f64; N_SWITCH_COVARIATES],
}

fn switch_covariates(s: &Subject, week: usize) -> Result<[f64; N_SWITCH_COVARIATES]> {
    let l = s.tv.value(week).ok_or_else(|| Error::InvalidSeries {
        id: s.id,
        reason: format!("no value for week {week}"),
    })?;
    let [arm, sex, age, prior] = s.covariates();
    Ok([arm, sex, age, prior, l])
}

/// Weeks in which a subject is at risk of switching, and the switch week if any.
/// A switcher contributes weeks up to and including the week containing `S`;
/// everyone else contributes the complete weeks of `(0, tau]`.
fn weeks_at_risk(s: &Subject) -> (usize, Option<usize>) {
    match s.switch_time {
        Some(t) if t <= s.tau => {
            let w = week_containing(t);
            (w + 1, Some(w))
        }
        _ => (complete_weeks(s.tau), None),
    }
}

/// One record per subject-week over the switch-truncated follow-up. The
/// time-varying series must already be imputed.
pub fn build_person_period(subjects: &[Subject]) -> Result<Vec<PersonPeriodRecord>> {
    let mut out = Vec::with_capacity(subjects.iter().map(|s| weeks_at_risk(s).0).sum());
    for s in subjects {
        let (n, switch_week) = weeks_at_risk(s);
        for week in 0..n {
            out.push(PersonPeriodRecord {
                id: s.id,
                week,
                switched: switch_week == Some(week),
                covariates: switch_covariates(s, week)?,
            });
        }
    }
    Ok(out)
}

/// Fitted pooled logistic model for the weekly switching hazard.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit<T = f64> {
    /// Record columns used as covariates.
    pub columns: Vec<usize>,
    /// Intercept followed by one coefficient per column.
    pub coefficients: Vec<T>,
    /// No switches were observed: the hazard is identically zero.
    pub degenerate: bool,
    pub converged: bool,
    pub n_iterations: usize,
    pub score_norm_at_solution: T,
    pub log_likelihood: T,
}

impl LogisticFit<f64> {
    /// Fitted switching probability for covariates `b` (full record layout).
    pub fn hazard(&self, b: &[f64; N_SWITCH_COVARIATES]) -> f64 {
        if self.degenerate {
            return 0.0;
        }
        let eta = self.coefficients[0]
            + self.columns.iter().zip(&self.coefficients[1..]).map(|(&c, beta)| beta * b[c]).sum::<f64>();
        expit(eta)
    }

    /// Zero-hazard model, used when nothing switches.
    pub fn zero_hazard(columns: &[usize]) -> Self {
        Self {
            columns: columns.to_vec(),
            coefficients: vec![0.0; columns.len() + 1],
            degenerate: true,
            converged: true,
            n_iterations: 0,
            score_norm_at_solution: 0.0,
            log_likelihood: 0.0,
        }
    }
}

/// Logistic regression with binomial responses on a row-major design that
/// already carries the intercept column. Row `g` has `trials[g]` Bernoulli
/// trials of which `successes[g]` are ones.
pub fn fit_logistic<T: Real>(
    design: &[T],
    p: usize,
    trials: &[T],
    successes: &[T],
    init: Option<&[T]>,
) -> Result<(Vec<T>, bool, usize, T, T)> {
    let n = trials.len();
    assert_eq!(design.len(), n * p, "design does not match the response");
    let total: T = trials.iter().copied().sum();
    let k: T = successes.iter().copied().sum();
    let mut beta = match init {
        Some(b) => b.to_vec(),
        None => {
            let mut b = vec![T::zero(); p];
            if p > 0 {
                b[0] = (k / (total - k)).ln();
            }
            b
        }
    };
    let tol = T::default_tolerance(1e-10);
    let eval = |beta: &[T]| -> (T, Vec<T>, Matrix<T>) {
        let mut ll = T::zero();
        let mut grad = vec![T::zero(); p];
        let mut upper = vec![T::zero(); p * p];
        for ((x, &m), &y) in design.chunks_exact(p).zip(trials).zip(successes) {
            let eta: T = x.iter().zip(beta).map(|(a, b)| *a * *b).sum();
            // One exponential serves both the probability and log(1 + e^eta).
            let e = (-eta.abs()).exp();
            let prob = if eta >= T::zero() { T::one() / (T::one() + e) } else { e / (T::one() + e) };
            ll += y * eta - m * (eta.max(T::zero()) + e.ln_1p());
            let r = y - m * prob;
            let v = m * prob * (T::one() - prob);
            for (j, &xj) in x.iter().enumerate() {
                grad[j] += r * xj;
                let vj = v * xj;
                for (u, &xl) in upper[j * p + j..(j + 1) * p].iter_mut().zip(&x[j..]) {
                    *u += vj * xl;
                }
            }
        }
        let mut info = Matrix::zeros(p, p);
        for j in 0..p {
            for l in j..p {
                info[(j, l)] = upper[j * p + l];
                info[(l, j)] = upper[j * p + l];
            }
        }
        (ll, grad, info)
    };

    let (mut ll, mut grad, mut info) = eval(&beta);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < 100 {
        if max_abs(&grad) < tol {
            converged = true;
            break;
        }
        iterations += 1;
        let step = solve_with_ridge(&info, &grad, T::lit(1e-8)).ok_or(Error::SingularInformation)?;
        if max_abs(&step) < tol * (T::one() + max_abs(&beta)) {
            converged = true;
            break;
        }
        let gnorm = max_abs(&grad);
        let noise = T::lit(1e-13) * (T::one() + ll.abs());
        let mut t = T::one();
        let mut moved = false;
        for _ in 0..40 {
            let cand: Vec<T> = beta.iter().zip(&step).map(|(b, s)| *b + t * *s).collect();
            let e = eval(&cand);
            let flat = t == T::one() && e.0 >= ll - noise && max_abs(&e.1) < gnorm;
            if e.0.is_finite() && (e.0 >= ll || flat) {
                let change = cand.iter().zip(&beta).fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()));
                beta = cand;
                ll = e.0;
                grad = e.1;
                info = e.2;
                moved = true;
                if change < tol * (T::one() + max_abs(&beta)) {
                    converged = true;
                }
                break;
            }
            t /= T::lit(2.0);
        }
        if converged || !moved {
            converged = converged || max_abs(&grad) < tol;
            break;
        }
    }
    if !beta.iter().all(|b| b.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok((beta, converged, iterations, max_abs(&grad), ll))
}

/// Pooled logistic regression of the weekly switch indicator on the selected
/// record columns (plus intercept). Records with identical selected
/// covariates are pooled into binomial cells before fitting.
pub fn fit_pooled_logistic(records: &[PersonPeriodRecord], columns: &[usize]) -> Result<LogisticFit> {
    fit_pooled_logistic_from(records, columns, None)
}

/// As [`fit_pooled_logistic`], starting Newton from `init` when given.
pub fn fit_pooled_logistic_from(
    records: &[PersonPeriodRecord],
    columns: &[usize],
    init: Option<&[f64]>,
) -> Result<LogisticFit> {
    if records.is_empty() {
        return Err(Error::InvalidParameter("no person-period records".into()));
    }
    if columns.iter().any(|&c| c >= N_SWITCH_COVARIATES) {
        return Err(Error::InvalidParameter("switch-model column out of range".into()));
    }
    let n_switch = records.iter().filter(|r| r.switched).count();
    if n_switch == 0 {
        log::warn!("no switches observed; using a zero-hazard switching model");
        return Ok(LogisticFit::zero_hazard(columns));
    }
    let p = columns.len() + 1;
    let mut cell_of: FxHashMap<[u64; N_SWITCH_COVARIATES], usize> = FxHashMap::default();
    let mut design = Vec::new();
    let mut trials = Vec::new();
    let mut successes = Vec::new();
    for r in records {
        let mut key = [0u64; N_SWITCH_COVARIATES];
        for (k, &c) in key.iter_mut().zip(columns) {
            *k = r.covariates[c].to_bits();
        }
        let g = *cell_of.entry(key).or_insert_with(|| {
            design.push(1.0);
            design.extend(columns.iter().map(|&c| r.covariates[c]));
            trials.push(0.0);
            successes.push(0.0);
            trials.len() - 1
        });
        trials[g] += 1.0;
        if r.switched {
            successes[g] += 1.0;
        }
    }
    let (coefficients, converged, n_iterations, score, ll) = fit_logistic(&design, p, &trials, &successes, init)?;
    if !converged {
        log::warn!("pooled logistic regression did not converge (possible separation)");
    }
    Ok(LogisticFit {
        columns: columns.to_vec(),
        coefficients,
        degenerate: false,
        converged,
        n_iterations,
        score_norm_at_solution: score,
        log_likelihood: ll,
    })
}

/// Pooled-logistic log-likelihood of `records` at arbitrary coefficients.
pub fn pooled_log_likelihood(records: &[PersonPeriodRecord], columns: &[usize], coefficients: &[f64]) -> f64 {
    records
        .iter()
        .map(|r| {
            let eta = coefficients[0]
                + columns.iter().zip(&coefficients[1..]).map(|(&c, b)| b * r.covariates[c]).sum::<f64>();
            let y = if r.switched { 1.0 } else { 0.0 };
            y * eta - log1p_exp(eta)
        })
        .sum()
}

/// Number of weeks a subject's weight series must cover, including week 0.
fn weight_weeks(s: &Subject) -> usize {
    week_containing(s.followup_end(true)) + 1
}

/// `P{S >= t | B}` for the weeks `0..=K` of the subject's truncated
/// follow-up, where entry `k` is `prod_{s<k} (1 - h(B(s)))`. Entry 0 is 1.
pub fn cumulative_unswitched_prob(model: &LogisticFit, subject: &Subject) -> Result<Vec<f64>> {
    let n = weight_weeks(subject);
    let mut out = Vec::with_capacity(n);
    let mut cum = 1.0;
    out.push(cum);
    for week in 0..n - 1 {
        if !model.degenerate {
            cum *= 1.0 - model.hazard(&switch_covariates(subject, week)?);
        }
        out.push(cum);
    }
    Ok(out)
}

/// Weekly inverse-probability weights for one subject. Entry `k` applies to
/// follow-up time in `(k/52, (k+1)/52]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSeries {
    pub id: u64,
    pub weights: Vec<f64>,
    /// Numerator cumulative probabilities (all ones when unstabilized).
    pub prob_num: Vec<f64>,
    pub prob_den: Vec<f64>,
    pub stabilized: bool,
}

impl WeightSeries {
    /// A series from precomputed weights; the probability columns are left empty.
    pub fn from_weights(id: u64, weights: Vec<f64>, stabilized: bool) -> Self {
        Self { id, weights, prob_num: Vec::new(), prob_den: Vec::new(), stabilized }
    }

    /// Weight in week `week`, clamped to the last available week.
    pub fn at_week(&self, week: usize) -> f64 {
        self.weights[week.min(self.weights.len() - 1)]
    }

    /// Weight applying at time `t` (years).
    pub fn at_time(&self, t: f64) -> f64 {
        self.at_week(week_containing(t))
    }
}

fn ratio_series(id: u64, num: Vec<f64>, den: Vec<f64>, stabilized: bool) -> Result<WeightSeries> {
    if let Some((week, &prob)) = den.iter().enumerate().find(|(_, &p)| !(p >= POSITIVITY_FLOOR)) {
        return Err(Error::Positivity { id, week, prob });
    }
    let weights = num.iter().zip(&den).map(|(a, b)| a / b).collect();
    Ok(WeightSeries { id, weights, prob_num: num, prob_den: den, stabilized })
}

/// Stabilized weights: numerator over denominator cumulative unswitched
/// probability, week by week.
pub fn stabilized_weights(num: &LogisticFit, den: &LogisticFit, subject: &Subject) -> Result<WeightSeries> {
    let pn = cumulative_unswitched_prob(num, subject)?;
    let pd = cumulative_unswitched_prob(den, subject)?;
    ratio_series(subject.id, pn, pd, true)
}

/// Unstabilized weights `1 / P{S >= t | B(t)}`.
pub fn unstabilized_weights(den: &LogisticFit, subject: &Subject) -> Result<WeightSeries> {
    let pd = cumulative_unswitched_prob(den, subject)?;
    ratio_series(subject.id, vec![1.0; pd.len()], pd, false)
}

/// Weight construction settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightOptions {
    pub stabilized: bool,
    /// Truncate weights above this quantile of all subject-week weights.
    pub cap_quantile: Option<f64>,
}

impl Default for WeightOptions {
    fn default() -> Self {
        Self { stabilized: true, cap_quantile: None }
    }
}

/// Both switching models and the resulting per-subject weights.
#[derive(Debug, Clone)]
pub struct WeightModel {
    pub numerator: Option<LogisticFit>,
    pub denominator: LogisticFit,
    pub weights: HashMap<u64, WeightSeries>,
}

/// Fits the switching models on `subjects` and builds every subject's
/// weights. `init` optionally supplies starting values for the
/// (denominator, numerator) fits.
pub fn estimate_weights(
    subjects: &[Subject],
    opts: &WeightOptions,
    init: Option<(&[f64], &[f64])>,
) -> Result<WeightModel> {
    let records = build_person_period(subjects)?;
    let fit = |cols: &[usize], start: Option<&[f64]>| -> Result<LogisticFit> {
        if records.is_empty() {
            return Ok(LogisticFit::zero_hazard(cols));
        }
        fit_pooled_logistic_from(&records, cols, start)
    };
    let denominator = fit(&DENOMINATOR_COLUMNS, init.map(|i| i.0))?;
    let numerator = if opts.stabilized { Some(fit(&NUMERATOR_COLUMNS, init.map(|i| i.1))?) } else { None };
    let mut weights = HashMap::with_capacity(subjects.len());
    for s in subjects {
        let ws = match &numerator {
            Some(num) => stabilized_weights(num, &denominator, s)?,
            None => unstabilized_weights(&denominator, s)?,
        };
        weights.insert(s.id, ws);
    }
    if let Some(q) = opts.cap_quantile {
        cap_weights(subjects, &mut weights, q)?;
    }
    Ok(WeightModel { numerator, denominator, weights })
}

/// Truncates weights above the `q` quantile of all subject-week weights.
pub fn cap_weights(subjects: &[Subject], weights: &mut HashMap<u64, WeightSeries>, q: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidParameter(format!("weight cap quantile {q} outside (0, 1]")));
    }
    let mut all: Vec<f64> = subjects
        .iter()
        .filter_map(|s| weights.get(&s.id))
        .flat_map(|w| w.weights.iter().copied())
        .collect();
    if all.is_empty() {
        return Ok(());
    }
    all.sort_by(f64::total_cmp);
    let idx = ((q * all.len() as f64).ceil() as usize).clamp(1, all.len()) - 1;
    let cap = all[idx];
    for w in weights.values_mut() {
        for v in &mut w.weights {
            *v = v.min(cap);
        }
    }
    Ok(())
}

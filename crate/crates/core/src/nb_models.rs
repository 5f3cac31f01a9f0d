//! Negative-binomial (gamma frailty) recurrent-event models: the
//! constant-baseline likelihood, its weighted non-switcher restriction, and
//! the semiparametric pseudo-likelihood with a profiled Breslow-type baseline.

use crate::data_model::{week_containing, DataView, Subject, WEEKS_PER_YEAR};
use crate::error::{Error, Result};
use crate::estimators::{fit_lwyy_with, newton_ascent, Eval, FitResult, SolverOptions};
use crate::ipw::WeightSeries;
use crate::linalg::{max_abs, Matrix};
use crate::scalar::Real;
use std::collections::HashMap;

/// One subject as seen by the NB models.
#[derive(Debug, Clone, PartialEq)]
pub struct NbSubject<T = f64> {
    pub id: u64,
    /// Sorted event times within `(0, exposure]`.
    pub event_times: Vec<T>,
    /// End of the analysed follow-up (`tau` or `min(tau, S)`).
    pub exposure: T,
    pub covariates: Vec<T>,
    /// Subject-level weight used by the constant-baseline likelihood.
    pub weight: T,
    /// Weekly weights used by the semiparametric pseudo-likelihood; `None`
    /// means unit weights.
    pub weekly_weights: Option<Vec<T>>,
}

impl<T: Real> NbSubject<T> {
    pub fn count(&self) -> usize {
        self.event_times.len()
    }

    /// Weight in force at time `t`.
    pub fn weight_at(&self, t: T) -> T {
        match &self.weekly_weights {
            None => T::one(),
            Some(w) => w[week_containing(t.as_f64()).min(w.len() - 1)],
        }
    }
}

/// Data for the NB fits.
#[derive(Debug, Clone, PartialEq)]
pub struct NbData<T = f64> {
    pub subjects: Vec<NbSubject<T>>,
    pub n_covariates: usize,
}

impl<T: Real> NbData<T> {
    pub fn new(subjects: Vec<NbSubject<T>>) -> Result<Self> {
        let p = subjects.first().map_or(0, |s| s.covariates.len());
        for s in &subjects {
            let bad = |reason: &str| Error::InvalidSubject { id: s.id, reason: reason.into() };
            if s.covariates.len() != p {
                return Err(bad("covariate count differs from the first subject"));
            }
            if !(s.exposure > T::zero()) {
                return Err(bad("exposure must be positive"));
            }
            if !(s.weight > T::zero()) {
                return Err(bad("weight must be positive"));
            }
            if s.event_times.iter().any(|&t| !(t > T::zero()) || t > s.exposure)
                || s.event_times.windows(2).any(|w| w[1] < w[0])
            {
                return Err(bad("event times must be sorted within (0, exposure]"));
            }
            if let Some(w) = &s.weekly_weights {
                if w.is_empty() || w.iter().any(|v| !(*v > T::zero())) {
                    return Err(bad("weekly weights must be non-empty and positive"));
                }
            }
        }
        Ok(Self { subjects, n_covariates: p })
    }

    pub fn total_events(&self) -> usize {
        self.subjects.iter().map(NbSubject::count).sum()
    }
}

impl NbData<f64> {
    /// Unweighted data under one of the analysis views.
    pub fn from_subjects(subjects: &[Subject], view: DataView) -> Result<Self> {
        let mut out = Vec::with_capacity(subjects.len());
        for s in subjects {
            let (events, exposure): (Vec<f64>, f64) = match view {
                DataView::Hypothetical => {
                    let h = s.hypothetical_view()?;
                    (h.event_times, s.tau)
                }
                DataView::TreatmentPolicy => (s.retained_events(false).collect(), s.tau),
                DataView::SimpleCensoring => (s.retained_events(true).collect(), s.followup_end(true)),
            };
            out.push(NbSubject {
                id: s.id,
                event_times: events,
                exposure,
                covariates: s.covariates().to_vec(),
                weight: 1.0,
                weekly_weights: None,
            });
        }
        Self::new(out)
    }

    /// Switch-censored data carrying weekly inverse-probability weights.
    pub fn weighted(subjects: &[Subject], weights: &HashMap<u64, WeightSeries>) -> Result<Self> {
        let mut data = Self::from_subjects(subjects, DataView::SimpleCensoring)?;
        for (d, s) in data.subjects.iter_mut().zip(subjects) {
            let ws = weights.get(&s.id).ok_or(Error::MissingWeight { id: s.id, week: 0 })?;
            if ws.weights.is_empty() {
                return Err(Error::MissingWeight { id: s.id, week: 0 });
            }
            d.weekly_weights = Some(ws.weights.clone());
        }
        Ok(data)
    }

    /// Non-switchers only (`S >= tau`), each weighted by its weight at `tau`.
    pub fn naive_ipw(subjects: &[Subject], weights: &HashMap<u64, WeightSeries>) -> Result<Self> {
        let mut out = Vec::new();
        for s in subjects.iter().filter(|s| s.switch_time.is_none_or(|t| t >= s.tau)) {
            let ws = weights.get(&s.id).ok_or(Error::MissingWeight { id: s.id, week: 0 })?;
            if ws.weights.is_empty() {
                return Err(Error::MissingWeight { id: s.id, week: 0 });
            }
            out.push(NbSubject {
                id: s.id,
                event_times: s.retained_events(false).collect(),
                exposure: s.tau,
                covariates: s.covariates().to_vec(),
                weight: ws.at_time(s.tau),
                weekly_weights: None,
            });
        }
        Self::new(out)
    }
}

/// Posterior mean of the gamma frailty given `n_before` events and cumulative
/// mean `mu_t`: `(1 + phi n) / (1 + phi mu)`.
pub fn conditional_frailty_mean<T: Real>(phi: T, n_before: T, mu_t: T) -> T {
    (T::one() + phi * n_before) / (T::one() + phi * mu_t)
}

// ---------------------------------------------------------------------------
// Constant baseline

const SERIES_CUTOFF: f64 = 0.1;
const SERIES_TERMS: i32 = 24;

/// `log(1 + x) / x`, continuous at 0.
fn log1p_over_x<T: Real>(x: T) -> T {
    if x.abs() < T::lit(SERIES_CUTOFF) {
        let mut s = T::zero();
        for k in (0..SERIES_TERMS).rev() {
            let c = T::one() / T::lit(f64::from(k + 1));
            s = if k % 2 == 0 { c } else { -c } + x * s;
        }
        s
    } else {
        x.ln_1p() / x
    }
}

/// `(log(1+x)/x - 1/(1+x)) / x`, continuous at 0 with value 1/2.
fn dispersion_a<T: Real>(x: T) -> T {
    if x.abs() < T::lit(SERIES_CUTOFF) {
        let mut s = T::zero();
        for k in (1..=SERIES_TERMS).rev() {
            let kf = f64::from(k);
            let c = T::lit(kf / (kf + 1.0));
            s = if k % 2 == 1 { c } else { -c } + x * s;
        }
        s
    } else {
        (x.ln_1p() / x - T::one() / (T::one() + x)) / x
    }
}

/// `-2 log(1+x)/x^3 + 2/(x^2 (1+x)) + 1/(x (1+x)^2)`, continuous at 0 with
/// value -2/3.
fn dispersion_b<T: Real>(x: T) -> T {
    if x.abs() < T::lit(SERIES_CUTOFF) {
        let mut s = T::zero();
        for k in (2..=SERIES_TERMS + 1).rev() {
            let kf = f64::from(k);
            let c = T::lit(kf * (kf - 1.0) / (kf + 1.0));
            s = if k % 2 == 1 { c } else { -c } + x * s;
        }
        s
    } else {
        let one = T::one();
        let two = T::lit(2.0);
        -two * x.ln_1p() / (x * x * x) + two / (x * x * (one + x)) + one / (x * (one + x) * (one + x))
    }
}

/// Per-subject pieces of the constant-baseline likelihood and its derivatives.
struct ConstTerms<T> {
    loglik: T,
    /// `d l / d eta`.
    score_eta: T,
    score_phi: T,
    /// `-d2 l / d eta2`.
    info_eta: T,
    /// `d2 l / d eta d phi`.
    hess_eta_phi: T,
    hess_phi_phi: T,
}

fn const_terms<T: Real>(n: usize, exposure: T, eta: T, phi: T) -> ConstTerms<T> {
    let one = T::one();
    let nf = T::from_usize(n).unwrap();
    let mu = eta.exp() * exposure;
    let x = phi * mu;
    let onex = one + x;
    let (mut sum_log, mut sum_j, mut sum_j2) = (T::zero(), T::zero(), T::zero());
    for j in 1..n {
        let jf = T::from_usize(j).unwrap();
        let d = one + phi * jf;
        sum_log += (phi * jf).ln_1p();
        sum_j += jf / d;
        sum_j2 += jf * jf / (d * d);
    }
    // n log mu - n log tau = n eta.
    let loglik = nf * eta - nf * x.ln_1p() - mu * log1p_over_x(x) + sum_log;
    ConstTerms {
        loglik,
        score_eta: (nf - mu) / onex,
        score_phi: sum_j + mu * mu * dispersion_a(x) - nf * mu / onex,
        info_eta: mu * (one + phi * nf) / (onex * onex),
        hess_eta_phi: -(nf - mu) * mu / (onex * onex),
        hess_phi_phi: -sum_j2 + mu * mu * mu * dispersion_b(x) + nf * mu * mu / (onex * onex),
    }
}

fn linear_predictor<T: Real>(s: &NbSubject<T>, alpha0: T, beta: &[T]) -> T {
    alpha0 + s.covariates.iter().zip(beta).map(|(x, b)| *x * *b).sum::<T>()
}

/// Weighted constant-baseline NB log-likelihood `sum_i w_i l_i` with
/// `mu_i = exp(alpha0 + x_i'beta) * exposure_i`. At `phi = 0` this is the
/// Poisson log-likelihood.
pub fn nb_loglik_constant<T: Real>(data: &NbData<T>, alpha0: T, beta: &[T], phi: T) -> Result<T> {
    if !(phi >= T::zero()) {
        return Err(Error::InvalidParameter(format!("dispersion must be non-negative, got {phi}")));
    }
    let v: T = data
        .subjects
        .iter()
        .map(|s| s.weight * const_terms(s.count(), s.exposure, linear_predictor(s, alpha0, beta), phi).loglik)
        .sum();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite)
    }
}

/// Score of the weighted constant-baseline likelihood, ordered
/// `(alpha0, beta..., phi)`.
pub fn nb_constant_score<T: Real>(data: &NbData<T>, alpha0: T, beta: &[T], phi: T) -> Vec<T> {
    let q = beta.len() + 1;
    let mut g = vec![T::zero(); q + 1];
    for s in &data.subjects {
        let t = const_terms(s.count(), s.exposure, linear_predictor(s, alpha0, beta), phi);
        g[0] += s.weight * t.score_eta;
        for (j, x) in s.covariates.iter().enumerate() {
            g[j + 1] += s.weight * t.score_eta * *x;
        }
        g[q] += s.weight * t.score_phi;
    }
    g
}

/// Objective, gradient and information in `(alpha0, beta, psi = log phi)`,
/// or in `(alpha0, beta)` at fixed `phi` when `psi` is `None`.
fn constant_eval<T: Real>(data: &NbData<T>, gamma: &[T], psi: Option<T>, fixed_phi: T) -> Option<Eval<T>> {
    let q = gamma.len();
    let dim = q + usize::from(psi.is_some());
    let phi = psi.map_or(fixed_phi, T::exp);
    let mut value = T::zero();
    let mut grad = vec![T::zero(); dim];
    let mut info = Matrix::zeros(dim, dim);
    let mut z = vec![T::zero(); q];
    for s in &data.subjects {
        z[0] = T::one();
        z[1..].copy_from_slice(&s.covariates);
        let t = const_terms(s.count(), s.exposure, linear_predictor(s, gamma[0], &gamma[1..]), phi);
        let w = s.weight;
        value += w * t.loglik;
        for j in 0..q {
            grad[j] += w * t.score_eta * z[j];
            for l in j..q {
                info[(j, l)] += w * t.info_eta * z[j] * z[l];
            }
        }
        if psi.is_some() {
            grad[q] += w * phi * t.score_phi;
            for j in 0..q {
                info[(j, q)] -= w * phi * t.hess_eta_phi * z[j];
            }
            info[(q, q)] -= w * (phi * phi * t.hess_phi_phi + phi * t.score_phi);
        }
    }
    for j in 0..dim {
        for l in 0..j {
            info[(j, l)] = info[(l, j)];
        }
    }
    value.is_finite().then_some(Eval { value, grad, info })
}

/// Subject-level sandwich for `(alpha0, beta)` at fixed `phi`; returns the
/// `beta` block.
fn constant_sandwich<T: Real>(data: &NbData<T>, gamma: &[T], phi: T) -> Option<Matrix<T>> {
    let q = gamma.len();
    let e = constant_eval(data, gamma, None, phi)?;
    let bread = e.info.inverse_spd().or_else(|| e.info.inverse())?;
    let mut meat = Matrix::zeros(q, q);
    let mut u = vec![T::zero(); q];
    for s in &data.subjects {
        let t = const_terms(s.count(), s.exposure, linear_predictor(s, gamma[0], &gamma[1..]), phi);
        u[0] = s.weight * t.score_eta;
        for (j, x) in s.covariates.iter().enumerate() {
            u[j + 1] = u[0] * *x;
        }
        meat.add_outer(&u, T::one());
    }
    let full = Matrix::sandwich(&bread, &meat);
    let p = q - 1;
    let mut v = Matrix::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            v[(i, j)] = full[(i + 1, j + 1)];
        }
    }
    Some(v)
}

/// Maximum likelihood for the constant-baseline NB model. `phi` is
/// constrained to `[0, inf)`; when the dispersion score at `phi = 0` is not
/// positive the boundary is reported and `beta` is the Poisson estimate.
/// The attached variance is the subject-level sandwich for `beta` with `phi`
/// and the subject weights held fixed.
pub fn fit_nb_constant<T: Real>(data: &NbData<T>) -> Result<FitResult<T>> {
    fit_nb_constant_with(data, &SolverOptions::default())
}

pub fn fit_nb_constant_with<T: Real>(data: &NbData<T>, opts: &SolverOptions<T>) -> Result<FitResult<T>> {
    let p = data.n_covariates;
    if data.total_events() == 0 {
        return Err(Error::NoEvents);
    }
    let q = p + 1;
    let events: T = data.subjects.iter().map(|s| s.weight * T::from_usize(s.count()).unwrap()).sum();
    let exposure: T = data.subjects.iter().map(|s| s.weight * s.exposure).sum();
    let mut init = vec![T::zero(); q];
    init[0] = (events / exposure).ln();

    let start = constant_eval(data, &init, None, T::zero()).ok_or(Error::NonFinite)?;
    if start.info.cholesky().is_none() {
        return Err(Error::RankDeficient);
    }
    let pois = newton_ascent(init, opts, |g| constant_eval(data, g, None, T::zero())).ok_or(Error::NonFinite)?;

    // Dispersion score at the boundary, evaluated at the Poisson fit.
    let boundary_score: T = data
        .subjects
        .iter()
        .map(|s| {
            let t = const_terms(s.count(), s.exposure, linear_predictor(s, pois.params[0], &pois.params[1..]), T::zero());
            s.weight * t.score_phi
        })
        .sum();

    let boundary_fit = |pois: crate::estimators::NewtonOutcome<T>| FitResult {
        beta: pois.params[1..].to_vec(),
        intercept: Some(pois.params[0]),
        phi: Some(T::zero()),
        phi_at_boundary: true,
        variance: constant_sandwich(data, &pois.params, T::zero()),
        converged: pois.converged,
        n_iterations: pois.iterations,
        score_norm_at_solution: max_abs(&pois.eval.grad),
        objective: pois.eval.value,
    };
    if !(boundary_score > T::zero()) || !pois.converged {
        return Ok(boundary_fit(pois));
    }

    // Moment estimate of phi as the starting value.
    let (mut num, mut den) = (T::zero(), T::zero());
    for s in &data.subjects {
        let mu = linear_predictor(s, pois.params[0], &pois.params[1..]).exp() * s.exposure;
        let n = T::from_usize(s.count()).unwrap();
        num += s.weight * ((n - mu) * (n - mu) - n);
        den += s.weight * mu * mu;
    }
    let phi0 = (num / den).max(T::lit(1e-3));
    let mut theta = pois.params.clone();
    theta.push(phi0.ln());
    let interior = newton_ascent(theta, opts, |th| constant_eval(data, &th[..q], Some(th[q]), T::zero()));
    match interior {
        Some(fit) if fit.eval.value >= pois.eval.value && fit.params[q].exp() > T::lit(1e-10) => {
            let phi = fit.params[q].exp();
            let gamma = &fit.params[..q];
            // Report the score in the natural (alpha0, beta, phi) scale.
            let score = nb_constant_score(data, gamma[0], &gamma[1..], phi);
            Ok(FitResult {
                beta: gamma[1..].to_vec(),
                intercept: Some(gamma[0]),
                phi: Some(phi),
                phi_at_boundary: false,
                variance: constant_sandwich(data, gamma, phi),
                converged: fit.converged,
                n_iterations: fit.iterations,
                score_norm_at_solution: max_abs(&score),
                objective: fit.eval.value,
            })
        }
        _ => Ok(boundary_fit(pois)),
    }
}

// ---------------------------------------------------------------------------
// Semiparametric baseline

/// Risk-set layout for the pseudo-likelihood, fixed across parameter values.
struct SemiparamLayout<T> {
    p: usize,
    jump_times: Vec<T>,
    /// Weighted event count at each jump.
    d_at: Vec<T>,
    /// Per subject: offset into the pair arrays and number of jumps at risk.
    offset: Vec<usize>,
    n_at_risk: Vec<usize>,
    /// Weight and prior event count at each (subject, jump) pair.
    pair_weight: Vec<T>,
    pair_n_before: Vec<T>,
    /// Events as (subject, jump, weight, multiplicity).
    events: Vec<(usize, usize, T, T)>,
    x: Vec<T>,
}

impl<T: Real> SemiparamLayout<T> {
    fn new(data: &NbData<T>) -> Result<Self> {
        let p = data.n_covariates;
        let mut times: Vec<T> = data.subjects.iter().flat_map(|s| s.event_times.iter().copied()).collect();
        if times.is_empty() {
            return Err(Error::NoEvents);
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        times.dedup();
        let k_of = |t: T| times.partition_point(|s| *s < t);
        let mut d_at = vec![T::zero(); times.len()];
        let mut offset = Vec::with_capacity(data.subjects.len());
        let mut n_at_risk = Vec::with_capacity(data.subjects.len());
        let mut pair_weight = Vec::new();
        let mut pair_n_before = Vec::new();
        let mut events = Vec::new();
        let mut x = Vec::with_capacity(data.subjects.len() * p);
        for (i, s) in data.subjects.iter().enumerate() {
            x.extend_from_slice(&s.covariates);
            let kend = times.partition_point(|t| *t <= s.exposure);
            offset.push(pair_weight.len());
            n_at_risk.push(kend);
            let mut before = 0usize;
            for &t in &times[..kend] {
                while before < s.count() && s.event_times[before] < t {
                    before += 1;
                }
                pair_weight.push(s.weight_at(t));
                pair_n_before.push(T::from_usize(before).unwrap());
            }
            let mut j = 0;
            while j < s.count() {
                let t = s.event_times[j];
                let mut m = 0;
                while j < s.count() && s.event_times[j] == t {
                    m += 1;
                    j += 1;
                }
                let k = k_of(t);
                let w = s.weight_at(t);
                let mf = T::from_usize(m).unwrap();
                d_at[k] += w * mf;
                events.push((i, k, w, mf));
            }
        }
        Ok(Self { p, jump_times: times, d_at, offset, n_at_risk, pair_weight, pair_n_before, events, x })
    }

    fn xi(&self, i: usize) -> &[T] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    /// Pseudo-log-likelihood and its gradient in `(beta, phi)`.
    fn eval(&self, beta: &[T], phi: T, want_grad: bool) -> Result<(T, Vec<T>)> {
        let p = self.p;
        let nk = self.jump_times.len();
        let ns = self.offset.len();
        let one = T::one();
        let e: Vec<T> = (0..ns).map(|i| crate::linalg::dot(self.xi(i), beta).exp()).collect();

        // Pass 1: weighted risk sums.
        let mut r0 = vec![T::zero(); nk];
        let mut r1 = vec![T::zero(); if want_grad { nk * p } else { 0 }];
        for i in 0..ns {
            let (o, kend) = (self.offset[i], self.n_at_risk[i]);
            let xi = self.xi(i);
            for k in 0..kend {
                let we = self.pair_weight[o + k] * e[i];
                r0[k] += we;
                if want_grad {
                    for j in 0..p {
                        r1[k * p + j] += we * xi[j];
                    }
                }
            }
        }
        let mut d = vec![T::zero(); nk];
        let mut m = vec![T::zero(); nk];
        let mut acc = T::zero();
        for k in 0..nk {
            if !(r0[k] > T::zero()) {
                return Err(Error::EmptyRiskSet { time: self.jump_times[k].as_f64() });
            }
            d[k] = self.d_at[k] / r0[k];
            m[k] = acc;
            acc += d[k];
        }

        // Pass 2: integral terms.
        let mut value = T::zero();
        let mut c = vec![T::zero(); if want_grad { ns } else { 0 }];
        let mut i_k = vec![T::zero(); nk];
        let mut b_k = vec![T::zero(); nk];
        let mut dphi = T::zero();
        for i in 0..ns {
            let (o, kend) = (self.offset[i], self.n_at_risk[i]);
            let ei = e[i];
            let mut ci = T::zero();
            for k in 0..kend {
                let w = self.pair_weight[o + k];
                let nb = self.pair_n_before[o + k];
                let em = ei * m[k];
                let den = one + phi * em;
                let f = (one + phi * nb) / den;
                let integ = w * ei * d[k] * f;
                value -= integ;
                if want_grad {
                    let b = integ * phi * ei / den;
                    ci -= integ - b * m[k];
                    i_k[k] += integ;
                    b_k[k] += b;
                    dphi -= w * ei * d[k] * (nb - em) / (den * den);
                }
            }
            if want_grad {
                c[i] = ci;
            }
        }

        // Event terms.
        let mut alpha_k = vec![T::zero(); nk];
        for &(i, k, w, mult) in &self.events {
            let o = self.offset[i];
            let nb = self.pair_n_before[o + k];
            let ei = e[i];
            let em = ei * m[k];
            let den = one + phi * em;
            value += mult * w * ((phi * nb).ln_1p() - (phi * em).ln_1p() + ei.ln() + d[k].ln());
            if want_grad {
                let a = w * phi * ei / den;
                c[i] += mult * (w - a * m[k]);
                alpha_k[k] += mult * a;
                dphi += mult * w * (nb / (one + phi * nb) - em / den);
            }
        }
        if !value.is_finite() {
            return Err(Error::NonFinite);
        }
        if !want_grad {
            return Ok((value, Vec::new()));
        }

        let mut grad = vec![T::zero(); p + 1];
        for i in 0..ns {
            for (g, x) in grad.iter_mut().zip(self.xi(i)) {
                *g += *x * c[i];
            }
        }
        // g_k = -R1_k / R0_k and G_k = sum_{l<k} d_l g_l.
        let mut big_g = vec![T::zero(); p];
        for k in 0..nk {
            for j in 0..p {
                let gk = -r1[k * p + j] / r0[k];
                grad[j] += gk * (self.d_at[k] - i_k[k]) + big_g[j] * (b_k[k] - alpha_k[k]);
                big_g[j] += d[k] * gk;
            }
        }
        grad[p] = dphi;
        Ok((value, grad))
    }
}

/// Weighted semiparametric pseudo-log-likelihood at `(beta, phi)`, with the
/// baseline profiled out by the weighted Breslow form at `beta`.
pub fn nb_pseudo_loglik<T: Real>(data: &NbData<T>, beta: &[T], phi: T) -> Result<T> {
    if !(phi >= T::zero()) {
        return Err(Error::InvalidParameter(format!("dispersion must be non-negative, got {phi}")));
    }
    SemiparamLayout::new(data)?.eval(beta, phi, false).map(|v| v.0)
}

/// Pseudo-log-likelihood and its analytic gradient in `(beta..., phi)`.
pub fn nb_pseudo_loglik_grad<T: Real>(data: &NbData<T>, beta: &[T], phi: T) -> Result<(T, Vec<T>)> {
    if !(phi >= T::zero()) {
        return Err(Error::InvalidParameter(format!("dispersion must be non-negative, got {phi}")));
    }
    SemiparamLayout::new(data)?.eval(beta, phi, true)
}

/// Counting-process rows equivalent to the data at `phi = 0`, used to obtain
/// the profile maximizer there (the weighted LWYY estimate). Intervals are
/// split at week boundaries where the weekly weight changes.
fn semiparam_rows<T: Real>(data: &NbData<T>) -> Vec<crate::data_model::CountingProcessRow<T>> {
    let mut rows: Vec<crate::data_model::CountingProcessRow<T>> = Vec::new();
    for s in &data.subjects {
        let mut cuts: Vec<(T, u32)> = Vec::new();
        for &t in &s.event_times {
            match cuts.last_mut() {
                Some((last, n)) if *last == t => *n += 1,
                _ => cuts.push((t, 1)),
            }
        }
        if cuts.last().is_none_or(|c| c.0 < s.exposure) {
            cuts.push((s.exposure, 0));
        }
        let first = rows.len();
        let mut push = |start: T, stop: T, status: u32, weight: T| {
            if rows.len() > first {
                let last = rows.last_mut().unwrap();
                if last.status == 0 && last.weight == weight && last.stop == start {
                    last.stop = stop;
                    last.status = status;
                    return;
                }
            }
            rows.push(crate::data_model::CountingProcessRow {
                id: s.id,
                start,
                stop,
                status,
                covariates: s.covariates.clone(),
                weight,
            });
        };
        let mut start = T::zero();
        for (stop, status) in cuts {
            let mut a = start;
            if s.weekly_weights.is_some() {
                let mut k = week_containing(start.as_f64()) + 1;
                loop {
                    let b = T::lit(k as f64 / WEEKS_PER_YEAR);
                    if b >= stop - T::lit(1e-9) {
                        break;
                    }
                    if b > a {
                        push(a, b, 0, s.weight_at(b));
                        a = b;
                    }
                    k += 1;
                }
            }
            push(a, stop, status, s.weight_at(stop));
            start = stop;
        }
    }
    rows
}

/// Settings for [`fit_nb_semiparam`].
#[derive(Debug, Clone)]
pub struct SemiparamOptions<T> {
    /// Maximizer of the pseudo-likelihood at `phi = 0`, i.e. the (weighted)
    /// LWYY estimate on the same data. Computed when absent.
    pub profile_beta: Option<Vec<T>>,
    /// Starting dispersion for the interior search.
    pub start_phi: Option<T>,
    /// Stop when the objective changes by less than this between iterations.
    pub objective_tolerance: T,
    pub gradient_tolerance: T,
    pub max_iterations: usize,
}

impl<T: Real> Default for SemiparamOptions<T> {
    fn default() -> Self {
        Self {
            profile_beta: None,
            start_phi: None,
            objective_tolerance: T::default_tolerance(1e-8),
            gradient_tolerance: T::default_tolerance(1e-5),
            max_iterations: 200,
        }
    }
}

/// Maximum pseudo-likelihood for the NB model with a semiparametric baseline.
/// Weekly weights on the subjects turn this into the IPW-weighted fit. No
/// closed-form variance is attached; use the bootstrap.
pub fn fit_nb_semiparam<T: Real>(data: &NbData<T>) -> Result<FitResult<T>> {
    fit_nb_semiparam_with(data, &SemiparamOptions::default())
}

pub fn fit_nb_semiparam_with<T: Real>(data: &NbData<T>, opts: &SemiparamOptions<T>) -> Result<FitResult<T>> {
    let layout = SemiparamLayout::new(data)?;
    let p = layout.p;
    let profile = match &opts.profile_beta {
        Some(b) => b.clone(),
        None => {
            let fit = fit_lwyy_with(&semiparam_rows(data), &SolverOptions::default(), None)?;
            if !fit.converged {
                return Ok(FitResult { phi: Some(T::zero()), phi_at_boundary: true, variance: None, ..fit });
            }
            fit.beta
        }
    };
    let (v0, g0) = layout.eval(&profile, T::zero(), true)?;
    let boundary = FitResult {
        beta: profile.clone(),
        intercept: None,
        phi: Some(T::zero()),
        phi_at_boundary: true,
        variance: None,
        converged: true,
        n_iterations: 0,
        score_norm_at_solution: max_abs(&g0[..p]),
        objective: v0,
    };
    if !(g0[p] > T::zero()) {
        return Ok(boundary);
    }

    // Quasi-Newton ascent in (beta, psi = log phi).
    let phi0 = opts.start_phi.unwrap_or_else(|| T::lit(0.3));
    let mut theta = profile.clone();
    theta.push(phi0.ln());
    let to_psi = |th: &[T]| -> Result<(T, Vec<T>)> {
        let phi = th[p].exp();
        let (v, mut g) = layout.eval(&th[..p], phi, true)?;
        g[p] *= phi;
        Ok((v, g))
    };
    let (mut f, mut g) = to_psi(&theta)?;
    // Initial inverse Hessian from a finite-difference curvature along each axis.
    let dim = p + 1;
    let mut h = Matrix::identity(dim);
    for j in 0..dim {
        let step = T::lit(1e-4) * (T::one() + theta[j].abs());
        let mut t2 = theta.clone();
        t2[j] += step;
        let curv = to_psi(&t2).map(|(_, g2)| -(g2[j] - g[j]) / step).unwrap_or(T::one());
        h[(j, j)] = if curv > T::zero() { T::one() / curv } else { T::one() };
    }
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        if max_abs(&g) < opts.gradient_tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let dir = h.mul_vec(&g);
        let slope = crate::linalg::dot(&dir, &g);
        let (dir, slope) = if slope > T::zero() {
            (dir, slope)
        } else {
            h = Matrix::identity(dim);
            (g.clone(), crate::linalg::dot(&g, &g))
        };
        let mut t = T::one();
        let mut next = None;
        for _ in 0..50 {
            let cand: Vec<T> = theta.iter().zip(&dir).map(|(a, b)| *a + t * *b).collect();
            if let Ok((fc, gc)) = to_psi(&cand) {
                if fc >= f + T::lit(1e-4) * t * slope {
                    next = Some((cand, fc, gc));
                    break;
                }
            }
            t /= T::lit(2.0);
        }
        let Some((cand, fc, gc)) = next else {
            converged = max_abs(&g) < T::lit(1e3) * opts.gradient_tolerance;
            break;
        };
        let s: Vec<T> = cand.iter().zip(&theta).map(|(a, b)| *a - *b).collect();
        // Ascent on f is descent on -f: y = -(gc - g).
        let y: Vec<T> = gc.iter().zip(&g).map(|(a, b)| *b - *a).collect();
        let sy = crate::linalg::dot(&s, &y);
        let df = (fc - f).abs();
        theta = cand;
        f = fc;
        g = gc;
        if sy > T::zero() {
            let hy = h.mul_vec(&y);
            let yhy = crate::linalg::dot(&y, &hy);
            let rho = T::one() / sy;
            for a in 0..dim {
                for b in 0..dim {
                    h[(a, b)] += (T::one() + yhy * rho) * rho * s[a] * s[b] - rho * (hy[a] * s[b] + s[a] * hy[b]);
                }
            }
        }
        if df < opts.objective_tolerance && max_abs(&g) < T::lit(1e3) * opts.gradient_tolerance {
            converged = true;
            break;
        }
    }
    if f < v0 || !(theta[p].exp() > T::lit(1e-10)) {
        return Ok(boundary);
    }
    Ok(FitResult {
        beta: theta[..p].to_vec(),
        intercept: None,
        phi: Some(theta[p].exp()),
        phi_at_boundary: false,
        variance: None,
        converged,
        n_iterations: iterations,
        score_norm_at_solution: max_abs(&g),
        objective: f,
    })
}

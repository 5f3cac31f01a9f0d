//! Poisson regression with a constant baseline, the Andersen-Gill / LWYY
//! profile-score estimator (optionally weighted), the weighted Breslow-type
//! baseline and the subject-clustered sandwich variance.

use crate::data_model::CountingProcessRow;
use crate::error::{Error, Result};
use crate::linalg::{max_abs, solve_with_ridge, Matrix};
use crate::scalar::Real;
use rustc_hash::FxHashMap;

/// Outcome of a model fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult<T> {
    /// Covariate coefficients, in the column order of the input covariates.
    pub beta: Vec<T>,
    /// Log baseline rate for constant-baseline models.
    pub intercept: Option<T>,
    /// Negative-binomial dispersion.
    pub phi: Option<T>,
    /// True when the dispersion estimate sits on the `phi = 0` boundary.
    pub phi_at_boundary: bool,
    /// Covariance of `beta` (robust where the model defines one).
    pub variance: Option<Matrix<T>>,
    pub converged: bool,
    pub n_iterations: usize,
    pub score_norm_at_solution: T,
    /// Objective at the solution (log-likelihood, log partial likelihood or
    /// pseudo-log-likelihood depending on the model).
    pub objective: T,
}

impl<T: Real> FitResult<T> {
    /// Standard error of coefficient `j`, when a variance is attached.
    pub fn std_error(&self, j: usize) -> Option<T> {
        self.variance.as_ref().map(|v| v[(j, j)].max(T::zero()).sqrt())
    }
}

/// Newton solver settings.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions<T> {
    /// Convergence when the score max-norm falls below this.
    pub score_tolerance: T,
    /// Iteration also stops when the relative coefficient change falls below this.
    pub step_tolerance: T,
    /// A fit that stalls on the step criterion still counts as converged if
    /// its score max-norm is below this.
    pub stall_score_tolerance: T,
    pub max_iterations: usize,
}

impl<T: Real> Default for SolverOptions<T> {
    fn default() -> Self {
        Self {
            score_tolerance: T::default_tolerance(1e-8),
            step_tolerance: T::default_tolerance(1e-10),
            stall_score_tolerance: T::default_tolerance(1e-6),
            max_iterations: 100,
        }
    }
}

/// Objective, gradient and negated Hessian at one parameter value.
pub(crate) struct Eval<T> {
    pub value: T,
    pub grad: Vec<T>,
    pub info: Matrix<T>,
}

pub(crate) struct NewtonOutcome<T> {
    pub params: Vec<T>,
    pub eval: Eval<T>,
    pub converged: bool,
    pub iterations: usize,
}

/// Damped Newton ascent with step halving for a (locally) concave objective.
pub(crate) fn newton_ascent<T: Real>(
    init: Vec<T>,
    opts: &SolverOptions<T>,
    mut eval: impl FnMut(&[T]) -> Option<Eval<T>>,
) -> Option<NewtonOutcome<T>> {
    let mut params = init;
    let mut cur = eval(&params)?;
    if !cur.value.is_finite() {
        return None;
    }
    let start_diag: Vec<T> = cur.info.diagonal().iter().map(|d| d.abs()).collect();
    let mut iterations = 0;
    loop {
        let gnorm = max_abs(&cur.grad);
        let step = solve_with_ridge(&cur.info, &cur.grad, T::lit(1e-8))?;
        // A vanishing score with a non-vanishing Newton step signals a
        // likelihood that keeps increasing towards infinity.
        // Information that has collapsed relative to the start also means the
        // optimum sits at infinity, even when the score rounds to zero.
        let collapsed = cur.info.diagonal().iter().zip(&start_diag).any(|(d, d0)| !(*d > T::lit(1e-10) * *d0));
        let step_small = !collapsed && max_abs(&step) <= T::lit(1e-6) * (T::one() + max_abs(&params));
        if gnorm < opts.score_tolerance && step_small {
            return Some(NewtonOutcome { params, eval: cur, converged: true, iterations });
        }
        if iterations >= opts.max_iterations {
            return Some(NewtonOutcome { params, eval: cur, converged: false, iterations });
        }
        iterations += 1;
        let mut t = T::one();
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<T> = params.iter().zip(&step).map(|(p, s)| *p + t * *s).collect();
            if cand.iter().all(|c| c.is_finite()) {
                if let Some(e) = eval(&cand) {
                    // Near the optimum the objective change drops below its
                    // rounding error; a full step that shrinks the score is
                    // then accepted on that basis.
                    let noise = T::lit(1e-13) * (T::one() + cur.value.abs());
                    let flat = t == T::one() && e.value >= cur.value - noise && max_abs(&e.grad) < gnorm;
                    if e.value.is_finite() && (e.value >= cur.value || flat) {
                        accepted = Some((cand, e));
                        break;
                    }
                }
            }
            t /= T::lit(2.0);
        }
        let Some((cand, e)) = accepted else {
            // No ascent direction left; the current point is as good as it gets.
            let converged = gnorm < opts.stall_score_tolerance && step_small;
            return Some(NewtonOutcome { params, eval: cur, converged, iterations });
        };
        let scale = T::one() + max_abs(&params);
        let change = params.iter().zip(&cand).fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()));
        params = cand;
        cur = e;
        if change / scale < opts.step_tolerance {
            let gnorm = max_abs(&cur.grad);
            let converged = gnorm < opts.stall_score_tolerance && step_small;
            return Some(NewtonOutcome { params, eval: cur, converged, iterations });
        }
    }
}

fn check_rows<T: Real>(rows: &[CountingProcessRow<T>]) -> Result<usize> {
    let p = rows.first().map_or(0, |r| r.covariates.len());
    for r in rows {
        if r.covariates.len() != p {
            return Err(Error::InvalidParameter("rows carry different covariate counts".into()));
        }
        if !(r.start >= T::zero() && r.start < r.stop) {
            return Err(Error::InvalidParameter(format!(
                "row for subject {} has invalid interval ({}, {}]",
                r.id, r.start, r.stop
            )));
        }
        if !(r.weight > T::zero()) || !r.weight.is_finite() {
            return Err(Error::InvalidParameter(format!("row for subject {} has weight {}", r.id, r.weight)));
        }
    }
    if !rows.iter().any(|r| r.status > 0) {
        return Err(Error::NoEvents);
    }
    Ok(p)
}

// ---------------------------------------------------------------------------
// Poisson regression with constant baseline

/// Poisson regression with baseline `exp(alpha0)` and log-exposure offset.
///
/// `intercept` holds `alpha0`; the attached variance is the model-based
/// inverse information for `beta`.
pub fn fit_poisson_constant<T: Real>(rows: &[CountingProcessRow<T>]) -> Result<FitResult<T>> {
    fit_poisson_constant_with(rows, &SolverOptions::default())
}

pub fn fit_poisson_constant_with<T: Real>(
    rows: &[CountingProcessRow<T>],
    opts: &SolverOptions<T>,
) -> Result<FitResult<T>> {
    let p = check_rows(rows)?;
    let q = p + 1;
    let total_events: T = rows.iter().map(|r| r.weight * T::from_u32(r.status).unwrap()).sum();
    let exposure: T = rows.iter().map(|r| r.weight * (r.stop - r.start)).sum();
    let mut init = vec![T::zero(); q];
    init[0] = (total_events / exposure).ln();

    let eval = |theta: &[T]| -> Option<Eval<T>> {
        let mut value = T::zero();
        let mut grad = vec![T::zero(); q];
        let mut info = Matrix::zeros(q, q);
        let mut z = vec![T::zero(); q];
        for r in rows {
            z[0] = T::one();
            z[1..].copy_from_slice(&r.covariates);
            let eta: T = theta.iter().zip(&z).map(|(a, b)| *a * *b).sum();
            let mu = eta.exp() * (r.stop - r.start);
            let d = T::from_u32(r.status).unwrap();
            value += r.weight * (d * eta - mu);
            for j in 0..q {
                grad[j] += r.weight * (d - mu) * z[j];
            }
            info.add_outer(&z, r.weight * mu);
        }
        Some(Eval { value, grad, info })
    };

    let start = eval(&init).ok_or(Error::NonFinite)?;
    if start.info.cholesky().is_none() {
        return Err(Error::RankDeficient);
    }
    let out = newton_ascent(init, opts, eval).ok_or(Error::NonFinite)?;
    let variance = out.eval.info.inverse_spd().map(|inv| {
        let mut v = Matrix::zeros(p, p);
        for i in 0..p {
            for j in 0..p {
                v[(i, j)] = inv[(i + 1, j + 1)];
            }
        }
        v
    });
    Ok(FitResult {
        beta: out.params[1..].to_vec(),
        intercept: Some(out.params[0]),
        phi: None,
        phi_at_boundary: false,
        variance,
        converged: out.converged,
        n_iterations: out.iterations,
        score_norm_at_solution: max_abs(&out.eval.grad),
        objective: out.eval.value,
    })
}

// ---------------------------------------------------------------------------
// Andersen-Gill / LWYY

/// Adds `risk[r] * (1, x_r, x_r x_r')` over rows `range`; the second
/// moment is skipped when `a2` is empty.
#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate<T: Real>(
    x: &[T],
    risk: &[T],
    p: usize,
    range: std::ops::Range<usize>,
    a0: &mut T,
    a1: &mut [T],
    a2: &mut [T],
) {
    let second = !a2.is_empty();
    for r in range {
        let rr = risk[r];
        *a0 += rr;
        let xr = &x[r * p..(r + 1) * p];
        for (j, &xj) in xr.iter().enumerate() {
            let v = rr * xj;
            a1[j] += v;
            if second {
                for (a, &xl) in a2[j * p + j..(j + 1) * p].iter_mut().zip(&xr[j..]) {
                    *a += v * xl;
                }
            }
        }
    }
}

/// Rows prepared for risk-set sweeps.
///
/// A row `(start, stop]` is at risk at `t` iff `stop >= t` and not
/// `start >= t`, so sweeping `t` downwards adds `w e^eta` at `stop` and
/// removes it at `start`. Both changes are stored as signed points sorted by
/// decreasing threshold; consecutive rows of one subject with equal
/// covariates share a single point carrying the weight difference.
pub(crate) struct RiskSetData<T> {
    pub p: usize,
    pub n_rows: usize,
    /// Per row, in input order: weighted event count at the stop time,
    /// weight, covariates (row-major), dense subject index.
    pub wd: Vec<T>,
    pub weight: Vec<T>,
    pub x: Vec<T>,
    pub cluster: Vec<usize>,
    pub n_clusters: usize,
    /// Event-time index range `lo..hi` of the times in `(start, stop]`.
    pub time_range: Vec<(usize, usize)>,
    /// Distinct event times, ascending.
    pub times: Vec<T>,
    /// Weighted number of events at each distinct time.
    pub d_at: Vec<T>,
    /// Sweep points: signed weight and covariates, by decreasing threshold.
    point_coef: Vec<T>,
    point_x: Vec<T>,
    /// Number of points with threshold `>= times[k]`.
    point_count: Vec<usize>,
    /// Sum of `w * d * x` over all event rows.
    pub event_x_sum: Vec<T>,
}

impl<T: Real> RiskSetData<T> {
    pub fn new(rows: &[CountingProcessRow<T>]) -> Result<Self> {
        let p = check_rows(rows)?;
        let n = rows.len();
        let mut ids = FxHashMap::default();
        let cluster: Vec<usize> = rows
            .iter()
            .map(|r| {
                let next = ids.len();
                *ids.entry(r.id).or_insert(next)
            })
            .collect();
        let mut event_x_sum = vec![T::zero(); p];
        let mut events: Vec<(T, T)> = Vec::new();
        for r in rows.iter().filter(|r| r.status > 0) {
            let wd = r.weight * T::from_u32(r.status).unwrap();
            for (s, v) in event_x_sum.iter_mut().zip(&r.covariates) {
                *s += wd * *v;
            }
            events.push((r.stop, wd));
        }
        events.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut times: Vec<T> = Vec::new();
        let mut d_at: Vec<T> = Vec::new();
        for (t, d) in events {
            if times.last() == Some(&t) {
                *d_at.last_mut().unwrap() += d;
            } else {
                times.push(t);
                d_at.push(d);
            }
        }

        // (threshold, coefficient, source row)
        let mut raw: Vec<(T, T, usize)> = Vec::with_capacity(n + n / 8);
        for (i, r) in rows.iter().enumerate() {
            let chained = i > 0 && {
                let prev = &rows[i - 1];
                prev.id == r.id && prev.stop == r.start && prev.covariates == r.covariates
            };
            if chained {
                let last = raw.last_mut().expect("previous row pushed its stop point");
                last.1 -= r.weight;
            } else {
                raw.push((r.start, -r.weight, i));
            }
            raw.push((r.stop, r.weight, i));
        }
        // Times are non-negative, so their bit patterns sort like the values.
        let mut order: Vec<(u64, u32)> = raw
            .iter()
            .enumerate()
            .filter(|(_, pt)| pt.1 != T::zero())
            .map(|(j, pt)| (!(pt.0.as_f64() + 0.0).to_bits(), j as u32))
            .collect();
        order.sort_unstable();
        let mut point_count = vec![0; times.len()];
        let mut i = 0;
        for k in (0..times.len()).rev() {
            while i < order.len() && raw[order[i].1 as usize].0 >= times[k] {
                i += 1;
            }
            point_count[k] = i;
        }
        let point_coef = order.iter().map(|&(_, j)| raw[j as usize].1).collect();
        let point_x = order.iter().flat_map(|&(_, j)| rows[raw[j as usize].2].covariates.iter().copied()).collect();

        let pos = |t: T| times.partition_point(|s| *s <= t);
        Ok(Self {
            p,
            n_rows: n,
            wd: rows.iter().map(|r| r.weight * T::from_u32(r.status).unwrap()).collect(),
            weight: rows.iter().map(|r| r.weight).collect(),
            x: rows.iter().flat_map(|r| r.covariates.iter().copied()).collect(),
            cluster,
            n_clusters: ids.len(),
            time_range: rows.iter().map(|r| (pos(r.start), pos(r.stop))).collect(),
            point_coef,
            point_x,
            point_count,
            times,
            d_at,
            event_x_sum,
        })
    }

    #[inline]
    fn row_x(&self, r: usize) -> &[T] {
        &self.x[r * self.p..(r + 1) * self.p]
    }

    /// Weighted risk-set sums at each distinct event time:
    /// `S0 = sum w e^eta`, `S1 = sum w e^eta x`, and `S2 = sum w e^eta x x'`
    /// when `second` is set (upper triangle, row-major `p*p`).
    pub fn risk_sums(&self, beta: &[T], second: bool) -> (Vec<T>, Vec<T>, Vec<T>) {
        let p = self.p;
        let k = self.times.len();
        let risk: Vec<T> = if p == 0 {
            self.point_coef.clone()
        } else {
            self.point_x
                .chunks_exact(p)
                .zip(&self.point_coef)
                .map(|(xr, c)| *c * xr.iter().zip(beta).map(|(a, b)| *a * *b).sum::<T>().exp())
                .collect()
        };
        let mut s0 = vec![T::zero(); k];
        let mut s1 = vec![T::zero(); k * p];
        let mut s2 = if second { vec![T::zero(); k * p * p] } else { Vec::new() };
        let mut a0 = T::zero();
        let mut a1 = vec![T::zero(); p];
        let mut a2 = vec![T::zero(); if second { p * p } else { 0 }];
        let mut done = 0;
        for ti in (0..k).rev() {
            accumulate(&self.point_x, &risk, p, done..self.point_count[ti], &mut a0, &mut a1, &mut a2);
            done = self.point_count[ti];
            s0[ti] = a0;
            s1[ti * p..(ti + 1) * p].copy_from_slice(&a1);
            if second {
                s2[ti * p * p..(ti + 1) * p * p].copy_from_slice(&a2);
            }
        }
        (s0, s1, s2)
    }

    pub fn eval(&self, beta: &[T]) -> Option<Eval<T>> {
        let p = self.p;
        let (s0, s1, s2) = self.risk_sums(beta, true);
        let mut value: T = self.event_x_sum.iter().zip(beta).map(|(a, b)| *a * *b).sum();
        let mut grad = self.event_x_sum.clone();
        let mut info = Matrix::zeros(p, p);
        for k in 0..self.times.len() {
            if !(s0[k] > T::zero()) {
                return None;
            }
            let d = self.d_at[k];
            value -= d * s0[k].ln();
            let inv = T::one() / s0[k];
            for j in 0..p {
                let xbar_j = s1[k * p + j] * inv;
                grad[j] -= d * xbar_j;
                for l in j..p {
                    let xbar_l = s1[k * p + l] * inv;
                    info[(j, l)] += d * (s2[k * p * p + j * p + l] * inv - xbar_j * xbar_l);
                }
            }
        }
        for j in 0..p {
            for l in 0..j {
                info[(j, l)] = info[(l, j)];
            }
        }
        Some(Eval { value, grad, info })
    }
}

/// Weighted log partial likelihood with Breslow ties,
/// `sum_events w (x'beta - log S0(t))`.
pub fn log_partial_likelihood<T: Real>(rows: &[CountingProcessRow<T>], beta: &[T]) -> Result<T> {
    let data = RiskSetData::new(rows)?;
    data.eval(beta).map(|e| e.value).ok_or(Error::NonFinite)
}

/// Weighted Andersen-Gill profile score at `beta`.
pub fn profile_score<T: Real>(rows: &[CountingProcessRow<T>], beta: &[T]) -> Result<Vec<T>> {
    let data = RiskSetData::new(rows)?;
    data.eval(beta).map(|e| e.grad).ok_or(Error::NonFinite)
}

/// LWYY fit: solves the weighted profile score and attaches the sandwich
/// variance clustered by subject id.
pub fn fit_lwyy<T: Real>(rows: &[CountingProcessRow<T>]) -> Result<FitResult<T>> {
    fit_lwyy_with(rows, &SolverOptions::default(), None)
}

pub fn fit_lwyy_with<T: Real>(
    rows: &[CountingProcessRow<T>],
    opts: &SolverOptions<T>,
    init: Option<&[T]>,
) -> Result<FitResult<T>> {
    let data = RiskSetData::new(rows)?;
    let p = data.p;
    let init = init.map_or_else(|| vec![T::zero(); p], <[T]>::to_vec);
    let start = data.eval(&init).ok_or(Error::NonFinite)?;
    if p > 0 && start.info.cholesky().is_none() {
        return Err(Error::RankDeficient);
    }
    let out = newton_ascent(init, opts, |b| data.eval(b)).ok_or(Error::NonFinite)?;
    let variance = if out.converged { sandwich_from(&data, &out.params, &out.eval.info).ok() } else { None };
    Ok(FitResult {
        beta: out.params,
        intercept: None,
        phi: None,
        phi_at_boundary: false,
        variance,
        converged: out.converged,
        n_iterations: out.iterations,
        score_norm_at_solution: max_abs(&out.eval.grad),
        objective: out.eval.value,
    })
}

/// Jumps of the weighted Breslow-type baseline mean function.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineEstimate<T> {
    pub jump_times: Vec<T>,
    pub jumps: Vec<T>,
}

impl<T: Real> BaselineEstimate<T> {
    /// Cumulative baseline mean `mu0(t)` (right-continuous).
    pub fn cumulative_at(&self, t: T) -> T {
        self.jump_times.iter().zip(&self.jumps).take_while(|(s, _)| **s <= t).map(|(_, j)| *j).sum()
    }
}

/// `d mu0(t) = sum Y* w dN / sum Y* w exp(x'beta)` at each distinct event time.
pub fn breslow_baseline<T: Real>(rows: &[CountingProcessRow<T>], beta: &[T]) -> Result<BaselineEstimate<T>> {
    let data = RiskSetData::new(rows)?;
    if beta.len() != data.p || beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::InvalidParameter("beta must be finite and match the covariates".into()));
    }
    let (s0, _, _) = data.risk_sums(beta, false);
    let mut jumps = Vec::with_capacity(s0.len());
    for (k, s) in s0.iter().enumerate() {
        if !(*s > T::zero()) {
            return Err(Error::EmptyRiskSet { time: data.times[k].as_f64() });
        }
        jumps.push(data.d_at[k] / *s);
    }
    Ok(BaselineEstimate { jump_times: data.times.clone(), jumps })
}

/// Robust variance `A^-1 B A^-1` at `beta`, with `A` the negated derivative of
/// the weighted profile score and `B` the sum over subjects of outer products
/// of their score residuals. Weights are treated as fixed.
pub fn sandwich_variance<T: Real>(rows: &[CountingProcessRow<T>], beta: &[T]) -> Result<Matrix<T>> {
    let data = RiskSetData::new(rows)?;
    let eval = data.eval(beta).ok_or(Error::NonFinite)?;
    sandwich_from(&data, beta, &eval.info)
}

/// Per-subject score residuals, indexed by dense cluster number.
pub(crate) fn score_residuals<T: Real>(data: &RiskSetData<T>, beta: &[T]) -> Vec<Vec<T>> {
    let p = data.p;
    let k = data.times.len();
    let (s0, s1, _) = data.risk_sums(beta, false);
    // Prefix sums of dLambda_k and xbar_k dLambda_k.
    let mut c0 = vec![T::zero(); k + 1];
    let mut c1 = vec![T::zero(); (k + 1) * p];
    let mut xbar = vec![T::zero(); k * p];
    for t in 0..k {
        let dl = data.d_at[t] / s0[t];
        c0[t + 1] = c0[t] + dl;
        for j in 0..p {
            xbar[t * p + j] = s1[t * p + j] / s0[t];
            c1[(t + 1) * p + j] = c1[t * p + j] + xbar[t * p + j] * dl;
        }
    }
    let mut resid = vec![vec![T::zero(); p]; data.n_clusters];
    for r in 0..data.n_rows {
        let x = data.row_x(r);
        let u = &mut resid[data.cluster[r]];
        let (lo, hi) = data.time_range[r];
        if data.wd[r] > T::zero() {
            let ti = hi - 1;
            for j in 0..p {
                u[j] += data.wd[r] * (x[j] - xbar[ti * p + j]);
            }
        }
        if hi > lo {
            let eta: T = x.iter().zip(beta).map(|(a, b)| *a * *b).sum();
            let risk = data.weight[r] * eta.exp();
            let dl = c0[hi] - c0[lo];
            for j in 0..p {
                let cx = c1[hi * p + j] - c1[lo * p + j];
                u[j] -= risk * (x[j] * dl - cx);
            }
        }
    }
    resid
}

fn sandwich_from<T: Real>(data: &RiskSetData<T>, beta: &[T], info: &Matrix<T>) -> Result<Matrix<T>> {
    let bread = info.inverse_spd().or_else(|| info.inverse()).ok_or(Error::SingularInformation)?;
    let mut meat = Matrix::zeros(data.p, data.p);
    for u in score_residuals(data, beta) {
        meat.add_outer(&u, T::one());
    }
    Ok(Matrix::sandwich(&bread, &meat))
}

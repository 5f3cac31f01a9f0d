//! Oracle and gradient checks shared by the integration tests and the
//! acceptance runner. Every check returns `Err` with a description on
//! mismatch. The oracles below are written from the model definitions and
//! share no code with the library beyond the public data types.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recurrent_ipw::data_model::{expand_counting_process, CountingProcessRow, Subject, TvSeries};
use recurrent_ipw::estimators::{fit_lwyy, fit_poisson_constant, sandwich_variance};
use recurrent_ipw::inference::{estimate, percentile_bootstrap, EstimatorSpec};
use recurrent_ipw::ipw::{build_person_period, fit_pooled_logistic};
use recurrent_ipw::nb_models::{
    fit_nb_constant, fit_nb_semiparam, nb_constant_score, nb_loglik_constant, nb_pseudo_loglik,
    nb_pseudo_loglik_grad, NbData, NbSubject,
};
use recurrent_ipw::simulation::{simulate_trial, Scenario, ScenarioParams, SimConfig};
use recurrent_ipw::DataView;
use statrs::function::gamma::ln_gamma;

pub type Check = (&'static str, fn() -> Result<(), String>);

/// Oracle comparisons and exact reductions.
pub const ORACLE_CHECKS: &[Check] = &[
    ("poisson closed form, arm-only model", poisson_arm_only),
    ("poisson closed form, intercept only", poisson_intercept_only),
    ("lwyy two-subject example", lwyy_two_subject),
    ("lwyy vs direct partial-likelihood maximization", lwyy_brute_force),
    ("sandwich vs direct score-residual computation", sandwich_brute_force),
    ("nb constant log-likelihood, three subjects", nb_loglik_three_subjects),
    ("nb constant fit vs grid search", nb_constant_grid),
    ("nb pseudo-likelihood vs direct summation", nb_pseudo_brute_force),
    ("nb semiparametric fit vs grid search", nb_semiparam_grid),
    ("pooled logistic intercept-only closed form", logistic_intercept_only),
    ("unit weights reduce lwyy+ipw to lwyy", unit_weights_lwyy),
    ("unit weights reduce nb+ipw and naive nb+ipw", unit_weights_nb),
    ("phi = 0 reduces to poisson", phi_zero_poisson),
    ("phi = 0 pseudo-likelihood is the andersen-gill likelihood", phi_zero_pseudo),
    ("no switchers: nb semiparametric equals lwyy", no_switchers_semiparam),
    ("no switchers: bootstrap of lwyy+ipw equals lwyy", no_switchers_bootstrap),
];

/// Analytic gradients against central differences.
pub const GRADIENT_CHECKS: &[Check] = &[
    ("nb constant score, 20 random points", gradient_nb_constant),
    ("nb pseudo-likelihood gradient, 20 random points", gradient_nb_pseudo),
];

/// Runs checks, returning the names and messages of failures.
pub fn run(checks: &[Check]) -> Vec<(String, String)> {
    checks.iter().filter_map(|(name, f)| f().err().map(|e| (name.to_string(), e))).collect()
}

fn close(what: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{what}: got {got}, expected {want} (tolerance {tol})"))
    }
}

fn row(id: u64, start: f64, stop: f64, status: u32, x: &[f64], weight: f64) -> CountingProcessRow {
    CountingProcessRow { id, start, stop, status, covariates: x.to_vec(), weight }
}

fn nb_subject(id: u64, events: &[f64], exposure: f64, x: &[f64]) -> NbSubject {
    NbSubject {
        id,
        event_times: events.to_vec(),
        exposure,
        covariates: x.to_vec(),
        weight: 1.0,
        weekly_weights: None,
    }
}

// ---------------------------------------------------------------------------
// Generic maximizers used by the oracles

/// Golden-section maximization of a unimodal function on `[lo, hi]`.
fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - r * (hi - lo);
    let mut b = lo + r * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > tol {
        if fa > fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - r * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + r * (hi - lo);
            fb = f(b);
        }
    }
    (lo + hi) / 2.0
}

/// Maximizes `f` over a box by repeatedly evaluating a lattice and zooming in
/// around the best point until the spacing drops below `tol`.
fn grid_max(f: impl Fn(&[f64]) -> f64, lo: &[f64], hi: &[f64], tol: f64) -> Vec<f64> {
    const POINTS: usize = 11;
    let dim = lo.len();
    let mut lo = lo.to_vec();
    let mut hi = hi.to_vec();
    let floor = lo.clone();
    let mut best = lo.clone();
    loop {
        let step: Vec<f64> = (0..dim).map(|j| (hi[j] - lo[j]) / (POINTS - 1) as f64).collect();
        let mut best_val = f64::NEG_INFINITY;
        let mut idx = vec![0usize; dim];
        'lattice: loop {
            let pt: Vec<f64> = (0..dim).map(|j| lo[j] + step[j] * idx[j] as f64).collect();
            let v = f(&pt);
            if v > best_val {
                best_val = v;
                best = pt;
            }
            for j in 0..dim {
                idx[j] += 1;
                if idx[j] < POINTS {
                    continue 'lattice;
                }
                idx[j] = 0;
            }
            break;
        }
        if step.iter().all(|s| *s < tol) {
            return best;
        }
        for j in 0..dim {
            lo[j] = (best[j] - 2.0 * step[j]).max(floor[j]);
            hi[j] = best[j] + 2.0 * step[j];
        }
    }
}

/// Cyclic coordinate ascent with golden-section line searches.
fn coordinate_max(f: impl Fn(&[f64]) -> f64, start: &[f64], radius: f64) -> Vec<f64> {
    let mut x = start.to_vec();
    for _ in 0..200 {
        let before = x.clone();
        for j in 0..x.len() {
            let c = x[j];
            let best = golden_max(
                |v| {
                    let mut y = x.clone();
                    y[j] = v;
                    f(&y)
                },
                c - radius,
                c + radius,
                1e-11,
            );
            x[j] = best;
        }
        if x.iter().zip(&before).all(|(a, b)| (a - b).abs() < 1e-10) {
            break;
        }
    }
    newton_polish(&f, x)
}

/// Newton iterations on finite-difference derivatives of `f`, for two
/// parameters; sharpens a point found by coordinate ascent along flat ridges.
fn newton_polish(f: &impl Fn(&[f64]) -> f64, mut x: Vec<f64>) -> Vec<f64> {
    assert_eq!(x.len(), 2);
    let h = 1e-4;
    for _ in 0..20 {
        let at = |dx: f64, dy: f64| f(&[x[0] + dx, x[1] + dy]);
        let g = [(at(h, 0.0) - at(-h, 0.0)) / (2.0 * h), (at(0.0, h) - at(0.0, -h)) / (2.0 * h)];
        let f0 = at(0.0, 0.0);
        let hxx = (at(h, 0.0) - 2.0 * f0 + at(-h, 0.0)) / (h * h);
        let hyy = (at(0.0, h) - 2.0 * f0 + at(0.0, -h)) / (h * h);
        let hxy = (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h);
        let det = hxx * hyy - hxy * hxy;
        if !(det > 0.0 && hxx < 0.0) {
            break;
        }
        let step = [-(hyy * g[0] - hxy * g[1]) / det, -(hxx * g[1] - hxy * g[0]) / det];
        if f(&[x[0] + step[0], x[1] + step[1]]) < f0 {
            break;
        }
        x[0] += step[0];
        x[1] += step[1];
        if step[0].abs().max(step[1].abs()) < 1e-12 {
            break;
        }
    }
    x
}

// ---------------------------------------------------------------------------
// Poisson and LWYY

fn poisson_arm_only() -> Result<(), String> {
    let rows = vec![
        row(1, 0.0, 0.3, 1, &[0.0], 1.0),
        row(1, 0.3, 0.7, 1, &[0.0], 1.0),
        row(1, 0.7, 1.0, 0, &[0.0], 1.0),
        row(2, 0.0, 0.4, 1, &[1.0], 1.0),
        row(2, 0.4, 1.0, 0, &[1.0], 1.0),
    ];
    let fit = fit_poisson_constant(&rows).map_err(|e| e.to_string())?;
    // Per-arm MLE rate is events / exposure: 2 and 1.
    close("beta_arm", fit.beta[0], (1.0f64 / 2.0).ln(), 1e-8)?;
    close("alpha0", fit.intercept.unwrap(), 2f64.ln(), 1e-8)
}

fn poisson_intercept_only() -> Result<(), String> {
    let rows = vec![row(1, 0.0, 0.5, 1, &[], 1.0), row(1, 0.5, 1.5, 2, &[], 1.0), row(1, 1.5, 2.0, 0, &[], 1.0)];
    let fit = fit_poisson_constant(&rows).map_err(|e| e.to_string())?;
    close("alpha0", fit.intercept.unwrap(), (3.0f64 / 2.0).ln(), 1e-8)
}

/// Weighted log partial likelihood summed event by event over explicit risk
/// sets.
fn partial_likelihood(rows: &[CountingProcessRow], beta: &[f64]) -> f64 {
    let lin = |r: &CountingProcessRow| r.covariates.iter().zip(beta).map(|(x, b)| x * b).sum::<f64>();
    let mut total = 0.0;
    for ev in rows.iter().filter(|r| r.status > 0) {
        let t = ev.stop;
        let s0: f64 = rows.iter().filter(|r| r.start < t && t <= r.stop).map(|r| r.weight * lin(r).exp()).sum();
        total += f64::from(ev.status) * ev.weight * (lin(ev) - s0.ln());
    }
    total
}

fn lwyy_two_subject() -> Result<(), String> {
    let rows = vec![
        row(1, 0.0, 1.0, 1, &[1.0], 1.0),
        row(1, 1.0, 3.0, 0, &[1.0], 1.0),
        row(2, 0.0, 2.0, 1, &[0.0], 1.0),
        row(2, 2.0, 3.0, 0, &[0.0], 1.0),
    ];
    let oracle = golden_max(|b| partial_likelihood(&rows, &[b]), -5.0, 5.0, 1e-10);
    close("oracle beta", oracle, 0.0, 1e-7)?;
    let fit = fit_lwyy(&rows).map_err(|e| e.to_string())?;
    close("beta", fit.beta[0], oracle, 1e-6)
}

/// Random weighted instance with up to 5 subjects and 4 events.
fn random_instance(rng: &mut ChaCha8Rng, p: usize) -> Vec<CountingProcessRow> {
    let n = rng.random_range(3..=5);
    let mut events_left = 4;
    let mut rows = Vec::new();
    for id in 1..=n as u64 {
        let x: Vec<f64> = (0..p).map(|j| if j == 0 { f64::from(rng.random_range(0..2u8)) } else { rng.random_range(-1.0..1.0) }).collect();
        let w = rng.random_range(0.5..2.0);
        let tau = rng.random_range(1.0..3.0);
        let k = rng.random_range(0..=events_left.min(2));
        events_left -= k;
        let mut times: Vec<f64> = (0..k).map(|_| (rng.random_range(0.05f64..1.0) * tau * 100.0).round() / 100.0).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let mut start = 0.0;
        for &t in &times {
            rows.push(row(id, start, t, 1, &x, w));
            start = t;
        }
        if start < tau {
            rows.push(row(id, start, tau, 0, &x, w));
        }
    }
    rows
}

fn lwyy_brute_force() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut compared = 0;
    for _ in 0..200 {
        if compared == 25 {
            break;
        }
        let rows = random_instance(&mut rng, 2);
        if rows.iter().filter(|r| r.status > 0).count() < 2 {
            continue;
        }
        let Ok(fit) = fit_lwyy(&rows) else { continue };
        let oracle = coordinate_max(|b| partial_likelihood(&rows, b), &[0.0, 0.0], 6.0);
        // Skip instances whose likelihood keeps increasing towards infinity.
        if !fit.converged || oracle.iter().any(|b| b.abs() > 5.0) {
            continue;
        }
        for j in 0..2 {
            close(&format!("beta[{j}] on instance {compared}"), fit.beta[j], oracle[j], 1e-6)?;
        }
        compared += 1;
    }
    if compared < 10 {
        return Err(format!("only {compared} instances had a finite maximizer"));
    }
    Ok(())
}

fn sandwich_brute_force() -> Result<(), String> {
    // Five independent subjects with one event each and two covariates.
    let data = [
        (1.0, 0.3, 0.8, 2.0),
        (0.0, -0.5, 1.1, 2.0),
        (1.0, 0.9, 1.6, 2.5),
        (0.0, 0.1, 0.4, 1.8),
        (1.0, -0.7, 1.3, 2.2),
    ];
    let mut rows = Vec::new();
    for (i, &(a, z, t, tau)) in data.iter().enumerate() {
        rows.push(row(i as u64 + 1, 0.0, t, 1, &[a, z], 1.0));
        rows.push(row(i as u64 + 1, t, tau, 0, &[a, z], 1.0));
    }
    let fit = fit_lwyy(&rows).map_err(|e| e.to_string())?;
    let beta = &fit.beta;
    let v = sandwich_variance(&rows, beta).map_err(|e| e.to_string())?;

    let at_risk = |t: f64| rows.iter().filter(move |r| r.start < t && t <= r.stop);
    let risk = |r: &CountingProcessRow| r.weight * (r.covariates[0] * beta[0] + r.covariates[1] * beta[1]).exp();
    let sums = |t: f64| {
        let (mut s0, mut s1, mut s2) = (0.0, [0.0; 2], [[0.0; 2]; 2]);
        for r in at_risk(t) {
            let e = risk(r);
            s0 += e;
            for a in 0..2 {
                s1[a] += e * r.covariates[a];
                for b in 0..2 {
                    s2[a][b] += e * r.covariates[a] * r.covariates[b];
                }
            }
        }
        (s0, s1, s2)
    };
    let events: Vec<&CountingProcessRow> = rows.iter().filter(|r| r.status > 0).collect();
    let mut a_mat = [[0.0; 2]; 2];
    for ev in &events {
        let (s0, s1, s2) = sums(ev.stop);
        for a in 0..2 {
            for b in 0..2 {
                a_mat[a][b] += ev.weight * (s2[a][b] / s0 - s1[a] * s1[b] / (s0 * s0));
            }
        }
    }
    let mut b_mat = [[0.0; 2]; 2];
    for id in 1..=5u64 {
        let mut u = [0.0; 2];
        for ev in &events {
            let (s0, s1, _) = sums(ev.stop);
            let xbar = [s1[0] / s0, s1[1] / s0];
            let dl = ev.weight * f64::from(ev.status) / s0;
            for r in at_risk(ev.stop).filter(|r| r.id == id) {
                for a in 0..2 {
                    u[a] -= risk(r) * (r.covariates[a] - xbar[a]) * dl;
                }
            }
            if ev.id == id {
                for a in 0..2 {
                    u[a] += ev.weight * (ev.covariates[a] - xbar[a]);
                }
            }
        }
        for a in 0..2 {
            for b in 0..2 {
                b_mat[a][b] += u[a] * u[b];
            }
        }
    }
    let det = a_mat[0][0] * a_mat[1][1] - a_mat[0][1] * a_mat[1][0];
    let inv = [[a_mat[1][1] / det, -a_mat[0][1] / det], [-a_mat[1][0] / det, a_mat[0][0] / det]];
    for a in 0..2 {
        for b in 0..2 {
            let mut s = 0.0;
            for k in 0..2 {
                for l in 0..2 {
                    s += inv[a][k] * b_mat[k][l] * inv[l][b];
                }
            }
            close(&format!("variance[{a}][{b}]"), v[(a, b)], s, 1e-9 * (1.0 + s.abs()))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Negative binomial

/// Per-subject log-likelihood written term by term from the gamma-frailty
/// marginal likelihood with constant baseline `exp(alpha0)`.
fn nb_subject_loglik(n: usize, tau: f64, eta: f64, phi: f64) -> f64 {
    let rho0 = eta.exp();
    let mu0_tau = rho0 * tau;
    let mu = mu0_tau;
    let nf = n as f64;
    if phi == 0.0 {
        return nf * (rho0 / mu0_tau).ln() + nf * mu.ln() - mu;
    }
    let n_star = n.saturating_sub(1);
    let history: f64 = (0..=n_star).map(|j| (phi * j as f64).ln_1p()).sum();
    nf * (rho0 / mu0_tau).ln() + nf * mu.ln() - (nf + 1.0 / phi) * (phi * mu).ln_1p() + history
}

/// The same quantity through gamma functions.
fn nb_subject_loglik_gamma(n: usize, tau: f64, eta: f64, phi: f64) -> f64 {
    let mu = eta.exp() * tau;
    let nf = n as f64;
    -nf * tau.ln() + ln_gamma(1.0 / phi + nf) - ln_gamma(1.0 / phi) + nf * (phi * mu).ln()
        - (nf + 1.0 / phi) * (phi * mu).ln_1p()
}

fn nb_oracle_loglik(data: &[(usize, f64, f64)], theta: &[f64]) -> f64 {
    data.iter().map(|&(n, tau, x)| nb_subject_loglik(n, tau, theta[0] + theta[1] * x, theta[2])).sum()
}

fn nb_data(spec: &[(usize, f64, f64)]) -> NbData {
    let subjects = spec
        .iter()
        .enumerate()
        .map(|(i, &(n, tau, x))| {
            let events: Vec<f64> = (1..=n).map(|k| tau * k as f64 / (n + 1) as f64).collect();
            nb_subject(i as u64 + 1, &events, tau, &[x])
        })
        .collect();
    NbData::new(subjects).unwrap()
}

fn nb_loglik_three_subjects() -> Result<(), String> {
    let spec = [(0, 1.0, 0.0), (1, 1.0, 0.0), (3, 2.0, 1.0)];
    let data = nb_data(&spec);
    for &(a0, b, phi) in &[(0.2, -0.4, 0.7), (-0.5, 0.3, 1.5), (0.0, 0.0, 0.05)] {
        let got = nb_loglik_constant(&data, a0, &[b], phi).map_err(|e| e.to_string())?;
        let direct = nb_oracle_loglik(&spec, &[a0, b, phi]);
        let via_gamma: f64 = spec.iter().map(|&(n, tau, x)| nb_subject_loglik_gamma(n, tau, a0 + b * x, phi)).sum();
        close("direct evaluation", got, direct, 1e-10)?;
        close("gamma-function evaluation", got, via_gamma, 1e-9)?;
    }
    Ok(())
}

fn nb_constant_grid() -> Result<(), String> {
    let spec = [(0, 1.0, 0.0), (5, 1.0, 0.0), (1, 1.5, 0.0), (7, 1.2, 1.0), (0, 2.0, 1.0), (2, 0.8, 1.0)];
    let data = nb_data(&spec);
    let fit = fit_nb_constant(&data).map_err(|e| e.to_string())?;
    let phi = fit.phi.unwrap();
    if fit.phi_at_boundary || phi <= 0.0 {
        return Err(format!("expected an interior dispersion, got {phi}"));
    }
    let best = grid_max(|t| nb_oracle_loglik(&spec, t), &[-3.0, -3.0, 0.0], &[3.0, 3.0, 5.0], 1e-6);
    close("alpha0", fit.intercept.unwrap(), best[0], 1e-3)?;
    close("beta", fit.beta[0], best[1], 1e-3)?;
    close("phi", phi, best[2], 1e-3)
}

/// Pseudo-log-likelihood summed directly over jump times, with the weighted
/// Breslow baseline recomputed at `beta`.
fn pseudo_oracle(subjects: &[NbSubject], beta: &[f64], phi: f64) -> f64 {
    let mut jumps: Vec<f64> = subjects.iter().flat_map(|s| s.event_times.iter().copied()).collect();
    jumps.sort_by(f64::total_cmp);
    jumps.dedup();
    let e = |s: &NbSubject| s.covariates.iter().zip(beta).map(|(x, b)| x * b).sum::<f64>().exp();
    let d: Vec<f64> = jumps
        .iter()
        .map(|&t| {
            let num: f64 = subjects
                .iter()
                .map(|s| s.weight_at(t) * s.event_times.iter().filter(|&&u| u == t).count() as f64)
                .sum();
            let den: f64 = subjects.iter().filter(|s| t <= s.exposure).map(|s| s.weight_at(t) * e(s)).sum();
            num / den
        })
        .collect();
    let mut total = 0.0;
    for s in subjects {
        for (k, &t) in jumps.iter().enumerate() {
            if t > s.exposure {
                continue;
            }
            let mu_before: f64 = e(s) * d[..k].iter().sum::<f64>();
            let n_before = s.event_times.iter().filter(|&&u| u < t).count() as f64;
            let frailty = (1.0 + phi * n_before) / (1.0 + phi * mu_before);
            let intensity = frailty * e(s) * d[k];
            let w = s.weight_at(t);
            let events_here = s.event_times.iter().filter(|&&u| u == t).count() as f64;
            total += w * events_here * intensity.ln() - w * intensity;
        }
    }
    total
}

fn pseudo_subjects() -> Vec<NbSubject> {
    let mut s = vec![
        nb_subject(1, &[0.2, 0.5, 0.9], 1.5, &[1.0, 0.3]),
        nb_subject(2, &[0.5], 2.0, &[0.0, -0.2]),
        nb_subject(3, &[], 1.0, &[1.0, 0.8]),
        nb_subject(4, &[0.3, 0.9, 1.2, 1.2], 1.8, &[0.0, 0.1]),
    ];
    s[1].weekly_weights = Some((0..110).map(|k| 1.0 + 0.01 * k as f64).collect());
    s
}

fn nb_pseudo_brute_force() -> Result<(), String> {
    let subjects = pseudo_subjects();
    let data = NbData::new(subjects.clone()).unwrap();
    for &(b0, b1, phi) in &[(0.0, 0.0, 0.0), (0.4, -0.3, 0.6), (-0.8, 1.1, 2.5)] {
        let got = nb_pseudo_loglik(&data, &[b0, b1], phi).map_err(|e| e.to_string())?;
        let want = pseudo_oracle(&subjects, &[b0, b1], phi);
        close(&format!("pseudo-likelihood at ({b0}, {b1}, {phi})"), got, want, 1e-10 * (1.0 + want.abs()))?;
    }
    Ok(())
}

fn nb_semiparam_grid() -> Result<(), String> {
    let subjects = vec![
        nb_subject(1, &[0.1, 0.2, 0.35, 0.5, 0.8], 1.0, &[1.0]),
        nb_subject(2, &[], 1.2, &[1.0]),
        nb_subject(3, &[0.15, 0.3, 0.45, 0.6, 0.7, 0.9], 1.0, &[0.0]),
        nb_subject(4, &[0.4], 1.5, &[0.0]),
        nb_subject(5, &[], 0.9, &[0.0]),
    ];
    let data = NbData::new(subjects.clone()).unwrap();
    let fit = fit_nb_semiparam(&data).map_err(|e| e.to_string())?;
    let phi = fit.phi.unwrap();
    if fit.phi_at_boundary || !fit.converged {
        return Err(format!("expected a converged interior fit, got phi {phi}"));
    }
    let best = grid_max(|t| pseudo_oracle(&subjects, &t[..1], t[1]), &[-4.0, 0.0], &[4.0, 10.0], 1e-6);
    close("beta", fit.beta[0], best[0], 1e-3)?;
    close("phi", phi, best[1], 1e-3)
}

// ---------------------------------------------------------------------------
// Weights

fn subject(id: u64, arm: u8, tau: f64, events: Vec<f64>, switch: Option<f64>) -> Subject {
    let weeks = (tau * 52.0).floor() as usize + 1;
    Subject {
        id,
        arm,
        sex: (id % 2) as u8,
        age: 50.0 + (id % 15) as f64,
        prior_history: u8::from(id.is_multiple_of(3)),
        enroll_time: 0.0,
        tau,
        event_times: events,
        switch_time: switch,
        tv: TvSeries::weekly(vec![18.0; weeks]),
        counterfactual: None,
    }
}

fn logistic_intercept_only() -> Result<(), String> {
    // Four person-weeks with one switch in the last one.
    let s = subject(1, 0, 5.5 / 52.0, vec![], Some(3.5 / 52.0));
    let records = build_person_period(&[s]).map_err(|e| e.to_string())?;
    if records.len() != 4 {
        return Err(format!("expected 4 records, got {}", records.len()));
    }
    let fit = fit_pooled_logistic(&records, &[]).map_err(|e| e.to_string())?;
    close("intercept", fit.coefficients[0], (1.0f64 / 3.0).ln(), 1e-8)
}

/// A simulated trial in which nobody switches.
fn no_switch_trial(n: usize, seed: u64) -> Vec<Subject> {
    let mut params = ScenarioParams::new(Scenario::Independent);
    params.beta_s[0] = -50.0;
    let cfg = SimConfig { n_subjects: n, params: Some(params), ..SimConfig::default() };
    simulate_trial(&cfg, seed).unwrap().subjects
}

fn unit_weights_lwyy() -> Result<(), String> {
    let subjects = no_switch_trial(300, 5);
    let weighted = estimate(&subjects, EstimatorSpec::LWYY_IPW).map_err(|e| e.to_string())?;
    let rows = expand_counting_process(&subjects, false, None).map_err(|e| e.to_string())?;
    let plain = fit_lwyy(&rows).map_err(|e| e.to_string())?;
    if weighted.beta.to_bits() != plain.beta[0].to_bits() || weighted.se != plain.std_error(0) {
        return Err(format!("lwyy+ipw {} vs lwyy {}", weighted.beta, plain.beta[0]));
    }
    Ok(())
}

fn unit_weights_nb() -> Result<(), String> {
    let subjects = no_switch_trial(300, 6);
    let naive = estimate(&subjects, EstimatorSpec::NAIVE_NB_IPW).map_err(|e| e.to_string())?;
    let plain = fit_nb_constant(&NbData::from_subjects(&subjects, DataView::TreatmentPolicy).unwrap())
        .map_err(|e| e.to_string())?;
    if naive.fit != plain {
        return Err(format!("naive nb+ipw {} vs nb {}", naive.beta, plain.beta[0]));
    }
    let ipw = estimate(&subjects, EstimatorSpec::NB_IPW).map_err(|e| e.to_string())?;
    let semi = fit_nb_semiparam(&NbData::from_subjects(&subjects, DataView::SimpleCensoring).unwrap())
        .map_err(|e| e.to_string())?;
    if ipw.fit != semi {
        return Err(format!("nb+ipw {} vs semiparametric nb {}", ipw.beta, semi.beta[0]));
    }
    Ok(())
}

fn phi_zero_poisson() -> Result<(), String> {
    let spec = [(0, 1.0, 0.0), (2, 1.3, 1.0), (4, 2.0, 0.0), (1, 0.4, 1.0)];
    let data = nb_data(&spec);
    for &(a0, b) in &[(0.1, -0.2), (-1.0, 0.8)] {
        let got = nb_loglik_constant(&data, a0, &[b], 0.0).map_err(|e| e.to_string())?;
        let poisson: f64 = spec
            .iter()
            .map(|&(n, tau, x)| {
                let eta = a0 + b * x;
                n as f64 * eta - eta.exp() * tau
            })
            .sum();
        close("phi = 0 log-likelihood", got, poisson, 1e-10)?;
    }
    Ok(())
}

fn phi_zero_pseudo() -> Result<(), String> {
    let subjects: Vec<NbSubject> = pseudo_subjects().into_iter().map(|s| NbSubject { weekly_weights: None, ..s }).collect();
    let data = NbData::new(subjects.clone()).unwrap();
    let beta = [0.3, -0.6];
    let got = nb_pseudo_loglik(&data, &beta, 0.0).map_err(|e| e.to_string())?;
    // Andersen-Gill log-likelihood at the Breslow baseline.
    let mut jumps: Vec<f64> = subjects.iter().flat_map(|s| s.event_times.clone()).collect();
    jumps.sort_by(f64::total_cmp);
    jumps.dedup();
    let e = |s: &NbSubject| (s.covariates[0] * beta[0] + s.covariates[1] * beta[1]).exp();
    let mut want = 0.0;
    for &t in &jumps {
        let dn = subjects.iter().map(|s| s.event_times.iter().filter(|&&u| u == t).count()).sum::<usize>() as f64;
        let s0: f64 = subjects.iter().filter(|s| t <= s.exposure).map(e).sum();
        let d = dn / s0;
        for s in subjects.iter().filter(|s| t <= s.exposure) {
            let m = s.event_times.iter().filter(|&&u| u == t).count() as f64;
            want += m * (e(s) * d).ln() - e(s) * d;
        }
    }
    close("phi = 0 pseudo-likelihood", got, want, 1e-10)
}

fn no_switchers_semiparam() -> Result<(), String> {
    let subjects = no_switch_trial(300, 8);
    let data = NbData::from_subjects(&subjects, DataView::TreatmentPolicy).unwrap();
    let nb = fit_nb_semiparam(&data).map_err(|e| e.to_string())?;
    let lwyy = fit_lwyy(&expand_counting_process(&subjects, false, None).unwrap()).map_err(|e| e.to_string())?;
    if !nb.phi_at_boundary {
        return Err(format!("dispersion profile maximized at {:?}, not at 0", nb.phi));
    }
    for j in 0..4 {
        close(&format!("beta[{j}]"), nb.beta[j], lwyy.beta[j], 1e-6)?;
    }
    Ok(())
}

fn no_switchers_bootstrap() -> Result<(), String> {
    let subjects = no_switch_trial(150, 9);
    let weighted = percentile_bootstrap(&subjects, EstimatorSpec::LWYY_IPW, 5, 0.05, 17).map_err(|e| e.to_string())?;
    let plain_spec: EstimatorSpec = "lwyy+simple_censoring".parse().unwrap();
    let plain = percentile_bootstrap(&subjects, plain_spec, 5, 0.05, 17).map_err(|e| e.to_string())?;
    if weighted.replicates != plain.replicates {
        return Err(format!("{:?} vs {:?}", weighted.replicates, plain.replicates));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Gradients

fn gradient_close(what: &str, analytic: &[f64], numeric: &[f64]) -> Result<(), String> {
    for (j, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        if (a - n).abs() > 1e-4 * n.abs().max(1.0) {
            return Err(format!("{what}, component {j}: analytic {a} vs numeric {n}"));
        }
    }
    Ok(())
}

fn central_difference(f: impl Fn(&[f64]) -> f64, theta: &[f64]) -> Vec<f64> {
    (0..theta.len())
        .map(|j| {
            let h = 1e-6 * theta[j].abs().max(1.0);
            let mut up = theta.to_vec();
            let mut down = theta.to_vec();
            up[j] += h;
            down[j] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

fn gradient_subjects() -> Vec<Subject> {
    let cfg = SimConfig { n_subjects: 120, scenario: Scenario::Frailty, ..SimConfig::default() };
    simulate_trial(&cfg, 31).unwrap().subjects
}

fn gradient_nb_constant() -> Result<(), String> {
    let subjects = gradient_subjects();
    let data = NbData::from_subjects(&subjects, DataView::TreatmentPolicy).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for point in 0..20 {
        let theta: Vec<f64> = vec![
            rng.random_range(-1.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.5..0.5),
            rng.random_range(0.01..2.0),
        ];
        let f = |t: &[f64]| nb_loglik_constant(&data, t[0], &t[1..5], t[5]).unwrap();
        let numeric = central_difference(f, &theta);
        let analytic = nb_constant_score(&data, theta[0], &theta[1..5], theta[5]);
        gradient_close(&format!("point {point}"), &analytic, &numeric)?;
    }
    Ok(())
}

fn gradient_nb_pseudo() -> Result<(), String> {
    let subjects = gradient_subjects();
    let mut data = NbData::from_subjects(&subjects, DataView::SimpleCensoring).unwrap();
    // Varying weekly weights exercise the weighted form.
    for (i, s) in data.subjects.iter_mut().enumerate() {
        s.weekly_weights = Some((0..300).map(|k| 1.0 + 0.3 * ((i + k) as f64 * 0.05).sin()).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    for point in 0..20 {
        let theta: Vec<f64> = vec![
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.5..0.5),
            rng.random_range(0.01..2.0),
        ];
        let f = |t: &[f64]| nb_pseudo_loglik(&data, &t[..4], t[4]).unwrap();
        let numeric = central_difference(f, &theta);
        let (_, analytic) = nb_pseudo_loglik_grad(&data, &theta[..4], theta[4]).map_err(|e| e.to_string())?;
        gradient_close(&format!("point {point}"), &analytic, &numeric)?;
    }
    Ok(())
}

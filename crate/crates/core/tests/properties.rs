use proptest::prelude::*;
use recurrent_ipw::data_model::{
    complete_weeks, expand_counting_process, locf_impute, summarize, CountingProcessRow, Subject, TvSeries,
};
use recurrent_ipw::estimators::{fit_lwyy, fit_poisson_constant, profile_score, sandwich_variance};
use recurrent_ipw::inference::order_statistic_quantile;
use recurrent_ipw::ipw::{
    build_person_period, estimate_weights, fit_pooled_logistic, pooled_log_likelihood, WeightOptions, WeightSeries,
    DENOMINATOR_COLUMNS,
};
use recurrent_ipw::nb_models::{conditional_frailty_mean, fit_nb_constant, nb_constant_score, NbData};
use recurrent_ipw::simulation::{simulate_trial, Scenario, SimConfig};
use recurrent_ipw::DataView;
use std::collections::HashMap;

fn arb_subject(id: u64) -> impl Strategy<Value = Subject> {
    (
        0.05f64..4.0,
        prop::collection::vec(0.001f64..=1.0, 0..6),
        prop::option::of(0.001f64..=1.0),
        any::<bool>(),
        (0u8..2, 0u8..2, 50.0f64..65.0, 0u8..2),
    )
        .prop_map(move |(tau, fracs, switch, event_at_tau, (arm, sex, age, prior))| {
            let mut events: Vec<f64> = fracs.iter().map(|f| f * tau).collect();
            if event_at_tau {
                events.push(tau);
            }
            events.sort_by(f64::total_cmp);
            let switch_time = switch.map(|f| f * tau);
            let weeks = complete_weeks(tau) + 1;
            Subject {
                id,
                arm,
                sex,
                age,
                prior_history: prior,
                enroll_time: 0.0,
                tau,
                event_times: events,
                switch_time,
                tv: TvSeries::weekly((0..weeks).map(|w| 18.0 - 0.01 * w as f64).collect()),
                counterfactual: None,
            }
        })
}

fn arb_subjects(max: u64) -> impl Strategy<Value = Vec<Subject>> {
    (1..=max).prop_flat_map(|n| (1..=n).map(arb_subject).collect::<Vec<_>>())
}

fn rows_of(rows: &[CountingProcessRow], id: u64) -> Vec<&CountingProcessRow> {
    rows.iter().filter(|r| r.id == id).collect()
}

/// Weight series that varies from week to week.
fn varying_weights(subjects: &[Subject]) -> HashMap<u64, WeightSeries> {
    subjects
        .iter()
        .map(|s| {
            let n = complete_weeks(s.tau) + 2;
            let w = (0..n).map(|k| 1.0 + 0.1 * ((s.id as usize + k) % 3) as f64).collect();
            (s.id, WeightSeries::from_weights(s.id, w, true))
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rows_partition_the_followup(subjects in arb_subjects(6), censor in any::<bool>(), weighted in any::<bool>()) {
        let weights = varying_weights(&subjects);
        let rows = expand_counting_process(&subjects, censor, weighted.then_some(&weights)).unwrap();
        for s in &subjects {
            let end = s.followup_end(censor);
            let mine = rows_of(&rows, s.id);
            prop_assert!(!mine.is_empty());
            prop_assert_eq!(mine[0].start, 0.0);
            prop_assert_eq!(mine.last().unwrap().stop, end);
            for pair in mine.windows(2) {
                prop_assert_eq!(pair[0].stop, pair[1].start);
            }
            prop_assert!(mine.iter().all(|r| r.start < r.stop && r.weight > 0.0));
            let length: f64 = mine.iter().map(|r| r.stop - r.start).sum();
            prop_assert!((length - end).abs() < 1e-12);
            if weighted {
                for r in &mine {
                    prop_assert_eq!(r.weight, weights[&s.id].at_time(r.stop));
                }
            }
        }
    }

    #[test]
    fn rows_preserve_event_counts(subjects in arb_subjects(6), censor in any::<bool>()) {
        let rows = expand_counting_process(&subjects, censor, None).unwrap();
        for s in &subjects {
            let cut = if censor { s.switch_time } else { None };
            let expected = s.event_times.iter().filter(|&&t| cut.is_none_or(|c| t < c)).count();
            let got: u32 = rows_of(&rows, s.id).iter().map(|r| r.status).sum();
            prop_assert_eq!(got as usize, expected);
        }
    }

    #[test]
    fn locf_keeps_measurements_and_is_idempotent(
        values in prop::collection::vec(-50.0f64..50.0, 1..120),
        m in prop::sample::select(vec![1usize, 4, 12]),
    ) {
        let sparse = TvSeries::weekly(values.clone()).subsample(m);
        let once = locf_impute(&sparse).unwrap();
        prop_assert!(once.is_complete());
        for (w, v) in once.values.iter().enumerate() {
            prop_assert_eq!(v.unwrap(), values[w - w % m]);
        }
        prop_assert_eq!(locf_impute(&once).unwrap(), once);
    }

    #[test]
    fn views_agree_without_switches(subjects in arb_subjects(8)) {
        let subjects: Vec<Subject> = subjects.into_iter().map(|s| Subject { switch_time: None, ..s }).collect();
        prop_assert_eq!(
            summarize(&subjects, DataView::TreatmentPolicy).unwrap(),
            summarize(&subjects, DataView::SimpleCensoring).unwrap()
        );
    }

    #[test]
    fn summary_rate_is_events_over_exposure(subjects in arb_subjects(8)) {
        let s = summarize(&subjects, DataView::SimpleCensoring).unwrap();
        for a in &s.arms {
            if a.n_subjects > 0 && a.mean_followup_years > 0.0 {
                let rate = a.total_events as f64 / (a.n_subjects as f64 * a.mean_followup_years);
                prop_assert!((rate - a.event_rate_per_year).abs() <= 1e-12 * (1.0 + rate));
            }
        }
    }

    #[test]
    fn person_period_has_single_final_switch(subjects in arb_subjects(6)) {
        let records = build_person_period(&subjects).unwrap();
        for s in &subjects {
            let mine: Vec<_> = records.iter().filter(|r| r.id == s.id).collect();
            let switches = mine.iter().filter(|r| r.switched).count();
            prop_assert!(switches <= 1);
            if switches == 1 {
                prop_assert!(mine.last().unwrap().switched);
            }
            prop_assert!(mine.iter().enumerate().all(|(k, r)| r.week == k));
        }
    }

    #[test]
    fn quantiles_are_order_statistics(
        mut v in prop::collection::vec(-10.0f64..10.0, 2..300),
        alpha in 0.01f64..0.5,
    ) {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let lo = order_statistic_quantile(&v, alpha / 2.0);
        let hi = order_statistic_quantile(&v, 1.0 - alpha / 2.0);
        prop_assert!(lo <= hi);
        let k = |p: f64| ((n as f64 * p - 1e-9).ceil() as usize).clamp(1, n) - 1;
        prop_assert_eq!(lo, v[k(alpha / 2.0)]);
        prop_assert_eq!(hi, v[k(1.0 - alpha / 2.0)]);
    }

    #[test]
    fn frailty_mean_in_history(phi in 0.0f64..5.0, mu in 0.0f64..10.0, n in 0u32..20) {
        let n = f64::from(n);
        let here = conditional_frailty_mean(phi, n, mu);
        let next = conditional_frailty_mean(phi, n + 1.0, mu);
        if phi > 0.0 {
            prop_assert!(next > here);
        } else {
            prop_assert_eq!(next, here);
        }
        prop_assert_eq!(conditional_frailty_mean(phi, 0.0, 0.0), 1.0);
    }
}

/// Small two-arm datasets with one covariate besides arm, for fitting.
fn arb_fit_rows() -> impl Strategy<Value = Vec<CountingProcessRow>> {
    prop::collection::vec((0u8..2, -1.0f64..1.0, 0.5f64..3.0, 0usize..5, 0.2f64..3.0), 12..40).prop_map(|subs| {
        let mut rows = Vec::new();
        for (i, (arm, z, tau, k, w)) in subs.into_iter().enumerate() {
            let id = i as u64 + 1;
            let x = vec![f64::from(arm), z];
            let mut start = 0.0;
            for j in 1..=k {
                let t = tau * (j as f64 / (k + 1) as f64) * (1.0 + 0.013 * i as f64).min(1.4) / 1.4;
                if t > start {
                    rows.push(CountingProcessRow { id, start, stop: t, status: 1, covariates: x.clone(), weight: w });
                    start = t;
                }
            }
            rows.push(CountingProcessRow { id, start, stop: tau, status: 0, covariates: x, weight: w });
        }
        rows
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn converged_lwyy_has_zero_score(rows in arb_fit_rows()) {
        let fit = fit_lwyy(&rows);
        prop_assume!(fit.as_ref().is_ok_and(|f| f.converged));
        let fit = fit.unwrap();
        let score = profile_score(&rows, &fit.beta).unwrap();
        prop_assert!(score.iter().all(|g| g.abs() < 1e-6), "score {:?}", score);
    }

    #[test]
    fn weight_scale_does_not_move_lwyy(rows in arb_fit_rows(), c in 0.1f64..10.0) {
        let fit = fit_lwyy(&rows);
        prop_assume!(fit.as_ref().is_ok_and(|f| f.converged));
        let scaled: Vec<_> = rows.iter().map(|r| CountingProcessRow { weight: r.weight * c, ..r.clone() }).collect();
        let a = fit.unwrap();
        let b = fit_lwyy(&scaled).unwrap();
        for (x, y) in a.beta.iter().zip(&b.beta) {
            prop_assert!((x - y).abs() < 1e-8, "{} vs {}", x, y);
        }
    }

    #[test]
    fn sandwich_is_symmetric_psd(rows in arb_fit_rows(), probe in prop::collection::vec(-1.0f64..1.0, 2)) {
        let fit = fit_lwyy(&rows);
        prop_assume!(fit.as_ref().is_ok_and(|f| f.converged));
        let v = sandwich_variance(&rows, &fit.unwrap().beta).unwrap();
        prop_assert!((v[(0, 1)] - v[(1, 0)]).abs() <= 1e-12 * (1.0 + v[(0, 1)].abs()));
        let q: f64 = (0..2).map(|i| (0..2).map(|j| probe[i] * v[(i, j)] * probe[j]).sum::<f64>()).sum();
        prop_assert!(q >= -1e-12);
    }

    #[test]
    fn poisson_and_lwyy_agree_with_common_followup(
        subjects in prop::collection::vec((0u8..2, 0usize..4), 6..30),
    ) {
        // Distinct event times, everyone followed to the same tau.
        let tau = 2.0;
        let mut rows = Vec::new();
        let mut counter = 0usize;
        for (i, (arm, k)) in subjects.iter().enumerate() {
            let x = vec![f64::from(*arm)];
            let mut start = 0.0;
            for _ in 0..*k {
                counter += 1;
                let t = start + (tau - start) * (0.1 + 0.001 * counter as f64);
                rows.push(CountingProcessRow { id: i as u64, start, stop: t, status: 1, covariates: x.clone(), weight: 1.0 });
                start = t;
            }
            rows.push(CountingProcessRow { id: i as u64, start, stop: tau, status: 0, covariates: x, weight: 1.0 });
        }
        let ag = fit_lwyy(&rows);
        let pois = fit_poisson_constant(&rows);
        prop_assume!(ag.as_ref().is_ok_and(|f| f.converged) && pois.as_ref().is_ok_and(|f| f.converged));
        prop_assert!((ag.unwrap().beta[0] - pois.unwrap().beta[0]).abs() < 1e-6);
    }

    #[test]
    fn nb_constant_solves_its_score(seed in 0u64..1000) {
        let cfg = SimConfig { n_subjects: 200, scenario: Scenario::Frailty, ..SimConfig::default() };
        let subjects = simulate_trial(&cfg, seed).unwrap().subjects;
        let data = NbData::from_subjects(&subjects, DataView::TreatmentPolicy).unwrap();
        let fit = fit_nb_constant(&data).unwrap();
        prop_assume!(fit.converged);
        let phi = fit.phi.unwrap();
        let score = nb_constant_score(&data, fit.intercept.unwrap(), &fit.beta, phi);
        let k = score.len() - 1;
        prop_assert!(score[..k].iter().all(|g| g.abs() < 1e-6), "score {:?}", score);
        if !fit.phi_at_boundary {
            prop_assert!(score[k].abs() < 1e-6, "dispersion score {}", score[k]);
        } else {
            prop_assert!(score[k] <= 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn unstabilized_weights_are_at_least_one_and_grow(seed in 0u64..10_000) {
        let cfg = SimConfig { n_subjects: 300, ..SimConfig::default() };
        let subjects = simulate_trial(&cfg, seed).unwrap().subjects;
        let wm = estimate_weights(&subjects, &WeightOptions { stabilized: false, cap_quantile: None }, None).unwrap();
        for ws in wm.weights.values() {
            prop_assert!(ws.weights.iter().all(|&w| w >= 1.0));
            prop_assert!(ws.weights.windows(2).all(|p| p[1] >= p[0]));
            prop_assert!(ws.prob_den.windows(2).all(|p| p[1] <= p[0]));
        }
    }

    #[test]
    fn logistic_fit_beats_zero_and_is_reproducible(seed in 0u64..10_000) {
        let cfg = SimConfig { n_subjects: 300, ..SimConfig::default() };
        let subjects = simulate_trial(&cfg, seed).unwrap().subjects;
        let records = build_person_period(&subjects).unwrap();
        prop_assume!(records.iter().any(|r| r.switched));
        let fit = fit_pooled_logistic(&records, &DENOMINATOR_COLUMNS).unwrap();
        let again = fit_pooled_logistic(&records, &DENOMINATOR_COLUMNS).unwrap();
        prop_assert_eq!(&fit, &again);
        let zero = vec![0.0; fit.coefficients.len()];
        prop_assert!(
            pooled_log_likelihood(&records, &DENOMINATOR_COLUMNS, &fit.coefficients)
                >= pooled_log_likelihood(&records, &DENOMINATOR_COLUMNS, &zero)
        );
    }

    #[test]
    fn simulated_events_stay_in_followup(seed in 0u64..10_000, scenario in 1u8..=3) {
        let cfg = SimConfig { n_subjects: 100, scenario: Scenario::try_from(scenario).unwrap(), ..SimConfig::default() };
        for s in simulate_trial(&cfg, seed).unwrap().subjects {
            let cf = s.counterfactual.as_ref().unwrap();
            for &t in s.event_times.iter().chain(&cf.event_times) {
                let week = (t * 52.0).floor();
                prop_assert!(week <= 52.0 * s.tau);
                prop_assert!(t > 0.0 && t <= s.tau);
            }
            prop_assert!((50.0..=65.0).contains(&s.age));
        }
    }
}

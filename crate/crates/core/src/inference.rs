//! Point estimation for every model/approach combination, percentile
//! bootstrap with subject resampling, Wald intervals and the two-sided test.

use crate::data_model::{expand_counting_process, DataView, Subject};
use crate::error::{Error, Result};
use crate::estimators::{fit_lwyy_with, FitResult, SolverOptions};
use crate::ipw::{estimate_weights, WeightModel, WeightOptions};
use crate::nb_models::{fit_nb_constant, fit_nb_semiparam_with, NbData, SemiparamOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

/// Position of the treatment indicator among the fixed covariates.
pub const ARM: usize = 0;

/// Outcome model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Lwyy,
    /// Negative binomial: constant baseline for the unweighted and naive
    /// approaches, semiparametric baseline for the weighted one.
    Nb,
}

/// How switching is handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    /// Counterfactual data without switching (simulation only).
    Hypothetical,
    /// Weighted analysis of switch-censored data.
    Ipw,
    /// Non-switchers only, one weight per subject (NB only).
    NaiveIpw,
    SimpleCensoring,
    TreatmentPolicy,
}

impl Approach {
    pub const ALL: [Approach; 5] = [
        Approach::Hypothetical,
        Approach::Ipw,
        Approach::NaiveIpw,
        Approach::SimpleCensoring,
        Approach::TreatmentPolicy,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Approach::Hypothetical => "hypothetical",
            Approach::Ipw => "ipw",
            Approach::NaiveIpw => "naive_ipw",
            Approach::SimpleCensoring => "simple_censoring",
            Approach::TreatmentPolicy => "treatment_policy",
        }
    }

    pub fn is_weighted(self) -> bool {
        matches!(self, Approach::Ipw | Approach::NaiveIpw)
    }

    fn view(self) -> Option<DataView> {
        match self {
            Approach::Hypothetical => Some(DataView::Hypothetical),
            Approach::SimpleCensoring => Some(DataView::SimpleCensoring),
            Approach::TreatmentPolicy => Some(DataView::TreatmentPolicy),
            Approach::Ipw | Approach::NaiveIpw => None,
        }
    }
}

impl Model {
    pub const ALL: [Model; 2] = [Model::Lwyy, Model::Nb];

    pub fn label(self) -> &'static str {
        match self {
            Model::Lwyy => "lwyy",
            Model::Nb => "nb",
        }
    }
}

/// One model/approach combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub model: Model,
    pub approach: Approach,
}

impl EstimatorSpec {
    pub const LWYY_IPW: Self = Self { model: Model::Lwyy, approach: Approach::Ipw };
    pub const NB_IPW: Self = Self { model: Model::Nb, approach: Approach::Ipw };
    pub const NAIVE_NB_IPW: Self = Self { model: Model::Nb, approach: Approach::NaiveIpw };

    pub fn new(model: Model, approach: Approach) -> Result<Self> {
        if model == Model::Lwyy && approach == Approach::NaiveIpw {
            return Err(Error::InvalidParameter("the naive weighted approach is defined for NB only".into()));
        }
        Ok(Self { model, approach })
    }

    /// All valid combinations, in report order.
    pub fn all() -> Vec<Self> {
        Model::ALL
            .iter()
            .flat_map(|&m| Approach::ALL.iter().filter_map(move |&a| Self::new(m, a).ok()))
            .collect()
    }

    /// Whether the fit carries a variance usable for a Wald interval.
    pub fn has_robust_variance(self) -> bool {
        !(self.model == Model::Nb && self.approach == Approach::Ipw)
    }
}

impl fmt::Display for EstimatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}", self.model.label(), self.approach.label())
    }
}

impl FromStr for EstimatorSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        let (m, a) = norm.split_once('+').unwrap_or((norm.as_str(), "treatment_policy"));
        let model = match m {
            "lwyy" => Model::Lwyy,
            "nb" => Model::Nb,
            "naive_nb" => return Self::new(Model::Nb, Approach::NaiveIpw),
            _ => return Err(Error::Parse(format!("unknown model '{m}'"))),
        };
        let approach = Approach::ALL
            .into_iter()
            .find(|x| x.label() == a)
            .ok_or_else(|| Error::Parse(format!("unknown approach '{a}'")))?;
        Self::new(model, approach)
    }
}

/// Treatment-effect estimate from one fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    /// Log rate ratio for the treatment indicator.
    pub beta: f64,
    /// Standard error from the fit's variance (robust where defined).
    pub se: Option<f64>,
    pub fit: FitResult<f64>,
}

/// Starting values carried from a fit on the full data into refits on
/// resamples.
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    pub denominator: Option<Vec<f64>>,
    pub numerator: Option<Vec<f64>>,
    pub lwyy_ipw_beta: Option<Vec<f64>>,
    pub nb_ipw_phi: Option<f64>,
}

/// Fits several estimators on one dataset, sharing the weight models and the
/// weighted LWYY fit among the weighted approaches.
pub fn estimate_many(
    subjects: &[Subject],
    specs: &[EstimatorSpec],
    warm: Option<&WarmStart>,
) -> (Vec<Result<Estimate>>, Option<WeightModel>) {
    let weights = if specs.iter().any(|s| s.approach.is_weighted()) {
        let init = warm.and_then(|w| Some((w.denominator.as_deref()?, w.numerator.as_deref()?)));
        Some(estimate_weights(subjects, &WeightOptions::default(), init))
    } else {
        None
    };
    let mut lwyy_ipw: Option<Result<Estimate>> = None;
    let mut out = Vec::with_capacity(specs.len());
    for &spec in specs {
        let res = match (spec.approach.view(), &weights) {
            (Some(view), _) => estimate_view(subjects, spec.model, view),
            (None, Some(Err(e))) => Err(e.clone()),
            (None, Some(Ok(wm))) => match spec {
                EstimatorSpec { model: Model::Lwyy, .. } => {
                    lwyy_ipw.get_or_insert_with(|| fit_lwyy_ipw(subjects, wm, warm)).clone()
                }
                EstimatorSpec { approach: Approach::NaiveIpw, .. } => fit_naive(subjects, wm),
                _ => {
                    let base = lwyy_ipw.get_or_insert_with(|| fit_lwyy_ipw(subjects, wm, warm)).clone();
                    fit_nb_ipw(subjects, wm, base.ok().map(|e| e.fit.beta), warm)
                }
            },
            (None, None) => unreachable!("weights are fitted whenever a weighted approach is requested"),
        };
        out.push(res);
    }
    (out, weights.and_then(Result::ok))
}

/// Fits one estimator.
pub fn estimate(subjects: &[Subject], spec: EstimatorSpec) -> Result<Estimate> {
    estimate_many(subjects, &[spec], None).0.remove(0)
}

fn finish(fit: FitResult<f64>) -> Result<Estimate> {
    if !fit.converged {
        return Err(Error::InvalidParameter("fit did not converge".into()));
    }
    let beta = *fit.beta.get(ARM).ok_or(Error::RankDeficient)?;
    if !beta.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(Estimate { beta, se: fit.std_error(ARM), fit })
}

fn estimate_view(subjects: &[Subject], model: Model, view: DataView) -> Result<Estimate> {
    match model {
        Model::Lwyy => {
            let rows = match view {
                DataView::Hypothetical => {
                    let h: Vec<Subject> = subjects.iter().map(Subject::hypothetical_view).collect::<Result<_>>()?;
                    expand_counting_process(&h, false, None)?
                }
                DataView::TreatmentPolicy => expand_counting_process(subjects, false, None)?,
                DataView::SimpleCensoring => expand_counting_process(subjects, true, None)?,
            };
            finish(fit_lwyy_with(&rows, &SolverOptions::default(), None)?)
        }
        Model::Nb => finish(fit_nb_constant(&NbData::from_subjects(subjects, view)?)?),
    }
}

fn fit_lwyy_ipw(subjects: &[Subject], wm: &WeightModel, warm: Option<&WarmStart>) -> Result<Estimate> {
    let rows = expand_counting_process(subjects, true, Some(&wm.weights))?;
    let init = warm.and_then(|w| w.lwyy_ipw_beta.as_deref());
    finish(fit_lwyy_with(&rows, &SolverOptions::default(), init)?)
}

fn fit_nb_ipw(
    subjects: &[Subject],
    wm: &WeightModel,
    profile_beta: Option<Vec<f64>>,
    warm: Option<&WarmStart>,
) -> Result<Estimate> {
    let data = NbData::weighted(subjects, &wm.weights)?;
    let opts = SemiparamOptions {
        profile_beta,
        start_phi: warm.and_then(|w| w.nb_ipw_phi).filter(|&p| p > 1e-3),
        ..SemiparamOptions::default()
    };
    finish(fit_nb_semiparam_with(&data, &opts)?)
}

fn fit_naive(subjects: &[Subject], wm: &WeightModel) -> Result<Estimate> {
    finish(fit_nb_constant(&NbData::naive_ipw(subjects, &wm.weights)?)?)
}

/// Warm start built from fits on the full data.
pub fn warm_start(weights: Option<&WeightModel>, estimates: &[(EstimatorSpec, &Estimate)]) -> WarmStart {
    let find = |spec| estimates.iter().find(|(s, _)| *s == spec).map(|(_, e)| *e);
    WarmStart {
        denominator: weights.map(|w| w.denominator.coefficients.clone()),
        numerator: weights.and_then(|w| w.numerator.as_ref()).map(|n| n.coefficients.clone()),
        lwyy_ipw_beta: find(EstimatorSpec::LWYY_IPW).map(|e| e.fit.beta.clone()),
        nb_ipw_phi: find(EstimatorSpec::NB_IPW).and_then(|e| e.fit.phi),
    }
}

/// Percentile bootstrap summary for one estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub spec: EstimatorSpec,
    /// Per-replicate estimate; `None` for failed replicates.
    pub replicates: Vec<Option<f64>>,
    /// Successful estimates in replicate order.
    pub estimates: Vec<f64>,
    pub ci_low: f64,
    pub ci_high: f64,
    pub se_boot: f64,
    pub n_failed: usize,
}

impl BootstrapResult {
    pub fn interval(&self) -> Interval {
        Interval { low: self.ci_low, high: self.ci_high }
    }

    /// Writes the per-replicate trace as CSV: `replicate, estimate, converged`.
    pub fn write_trace<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["replicate", "estimate", "converged"])?;
        for (k, r) in self.replicates.iter().enumerate() {
            let est = r.map_or_else(|| "NA".to_string(), |v| v.to_string());
            w.write_record([k.to_string(), est, r.is_some().to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Closed confidence interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.low <= x && x <= self.high
    }
}

/// Order-statistic quantile of sorted data: the `ceil(n p)`-th smallest value.
pub fn order_statistic_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let k = ((n as f64 * p - 1e-9).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

/// Seed of bootstrap replicate `k`.
fn replicate_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64 + 1);
    rng
}

/// Draws `n` subjects with replacement and gives them fresh ids `1..=n`.
pub fn resample<R: Rng>(subjects: &[Subject], rng: &mut R) -> Vec<Subject> {
    let n = subjects.len();
    (0..n)
        .map(|i| {
            let mut s = subjects[rng.random_range(0..n)].clone();
            s.id = i as u64 + 1;
            s
        })
        .collect()
}

/// Percentile bootstrap for several estimators on shared resamples.
/// Replicate `k` draws from a stream derived from `(seed, k)`, so results do
/// not depend on the number of threads.
pub fn percentile_bootstrap_many(
    subjects: &[Subject],
    specs: &[EstimatorSpec],
    b: usize,
    alpha: f64,
    seed: u64,
    warm: Option<&WarmStart>,
) -> Vec<Result<BootstrapResult>> {
    if b < 2 {
        let e = Error::InvalidParameter(format!("bootstrap needs at least 2 replicates, got {b}"));
        return specs.iter().map(|_| Err(e.clone())).collect();
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        let e = Error::InvalidParameter(format!("alpha {alpha} outside (0, 1)"));
        return specs.iter().map(|_| Err(e.clone())).collect();
    }
    let per_rep: Vec<Vec<Option<f64>>> = (0..b)
        .into_par_iter()
        .map(|k| {
            let mut rng = replicate_rng(seed, k);
            let sample = resample(subjects, &mut rng);
            let (res, _) = estimate_many(&sample, specs, warm);
            res.into_iter().map(|r| r.ok().map(|e| e.beta)).collect()
        })
        .collect();
    specs
        .iter()
        .enumerate()
        .map(|(j, &spec)| summarize_bootstrap(spec, per_rep.iter().map(|r| r[j]).collect(), alpha))
        .collect()
}

/// Percentile bootstrap for one estimator.
pub fn percentile_bootstrap(
    subjects: &[Subject],
    spec: EstimatorSpec,
    b: usize,
    alpha: f64,
    seed: u64,
) -> Result<BootstrapResult> {
    percentile_bootstrap_many(subjects, &[spec], b, alpha, seed, None).remove(0)
}

fn summarize_bootstrap(spec: EstimatorSpec, replicates: Vec<Option<f64>>, alpha: f64) -> Result<BootstrapResult> {
    let total = replicates.len();
    let estimates: Vec<f64> = replicates.iter().flatten().copied().collect();
    let failed = total - estimates.len();
    if failed * 10 > total || estimates.len() < 2 {
        return Err(Error::BootstrapFailures { failed, total });
    }
    let mut sorted = estimates.clone();
    sorted.sort_by(f64::total_cmp);
    let n = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let var = estimates.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(BootstrapResult {
        spec,
        ci_low: order_statistic_quantile(&sorted, alpha / 2.0),
        ci_high: order_statistic_quantile(&sorted, 1.0 - alpha / 2.0),
        se_boot: var.sqrt(),
        n_failed: failed,
        replicates,
        estimates,
    })
}

/// Normal-approximation interval `beta ± z_{1-alpha/2} se`.
pub fn wald_interval(beta: f64, se: f64, alpha: f64) -> Result<Interval> {
    if !(alpha > 0.0 && alpha < 1.0) || !(se >= 0.0) {
        return Err(Error::InvalidParameter(format!("invalid Wald inputs: se {se}, alpha {alpha}")));
    }
    let z = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
    Ok(Interval { low: beta - z * se, high: beta + z * se })
}

/// Wald interval for the treatment coefficient of a fit.
pub fn wald_ci(fit: &FitResult<f64>, alpha: f64) -> Result<Interval> {
    let se = fit.std_error(ARM).ok_or(Error::MissingVariance("treatment coefficient"))?;
    wald_interval(fit.beta[ARM], se, alpha)
}

/// Two-sided test of no treatment effect: reject iff zero lies outside the
/// closed interval.
pub fn reject_null(ci: Interval) -> bool {
    !ci.contains(0.0)
}

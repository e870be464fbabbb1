//! Numeric checks of the score-matching identities against Gaussian oracles.
//!
//! Each suite returns one [`Check`] per comparison; callers decide how to
//! report them. Every check is seeded, so a suite is reproducible.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::cost::CostFn;
use crate::diffusion::{reverse_sample, DiffusionSchedule, DEFAULT_EULER_STEPS};
use crate::divergence::{ds_divergence_gaussian, ds_divergence_mc, naive_vs_corrected_gap};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::rng::{self, Rng};
use crate::score::{GaussianScore, ScoreModel, ShiftedScore};
use crate::scorematch::dsm_offset_terms;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Identities,
    Oracles,
    AppendixB,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Identities, Suite::Oracles, Suite::AppendixB];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Identities => "identities",
            Suite::Oracles => "oracles",
            Suite::AppendixB => "appendixB",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Suite> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown diagnostic suite '{s}' (identities, oracles, appendixB)")))
    }
}

/// One measured-versus-expected comparison. `passed` means
/// `|measured − expected| ≤ tolerance` unless `kind` says otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub kind: CheckKind,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    /// `|measured − expected| ≤ tolerance`.
    Within,
    /// `measured ≥ expected`.
    AtLeast,
    /// `measured ≤ expected + tolerance`.
    AtMost,
}

impl Check {
    pub fn new(name: impl Into<String>, measured: f64, expected: f64, tolerance: f64, kind: CheckKind) -> Check {
        let passed = match kind {
            CheckKind::Within => (measured - expected).abs() <= tolerance,
            CheckKind::AtLeast => measured >= expected,
            CheckKind::AtMost => measured <= expected + tolerance,
        };
        Check { name: name.into(), measured, expected, tolerance, kind, passed }
    }

    fn relation(&self) -> String {
        match self.kind {
            CheckKind::Within => format!("{:.6} ± {:.2e}", self.expected, self.tolerance),
            CheckKind::AtLeast => format!(">= {:.6}", self.expected),
            CheckKind::AtMost => format!("<= {:.6} + {:.2e}", self.expected, self.tolerance),
        }
    }
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

/// Fixed-width table, one line per check.
pub fn format_table(suite: Suite, checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  {:>14}  {:<30}  result\n", "check", "measured", "expected");
    for c in checks {
        out += &format!(
            "{:<width$}  {:>14.6}  {:<30}  {}\n",
            c.name,
            c.measured,
            c.relation(),
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    let n_pass = checks.iter().filter(|c| c.passed).count();
    out += &format!("{suite}: {n_pass}/{} checks passed\n", checks.len());
    out
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<Check>> {
    match suite {
        Suite::Identities => identities(seed),
        Suite::Oracles => oracles(seed),
        Suite::AppendixB => estimator_gap(seed),
    }
}

fn standard_normal_states(n: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, 1), || rng::normal(rng))
}

fn gaussian_states(mu: &[f64], sigma2: f64, n: usize, rng: &mut Rng) -> Array2<f64> {
    let sd = sigma2.sqrt();
    Array2::from_shape_fn((n, mu.len()), |(_, j)| mu[j] + sd * rng::normal(rng))
}

pub const OFFSET_DRAWS: usize = 200_000;
pub const OFFSET_MODELS: usize = 5;

/// Score-matching offset `E[‖g − c‖² − ‖g − ∇log p_t‖²]` at `t = ln 2` on
/// `N(0, 1)` data for one randomly initialised network `g`. The exact value
/// is `1/(1 − e^{−2t}) − 1 = 1/3`. Returns `(mean, std_error)`.
pub fn offset_at_ln2(model_seed: u64, n_draws: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    let schedule = DiffusionSchedule::fixed(std::f64::consts::LN_2)?;
    let g = ScoreModel::new(1, &[32], &schedule, Activation::Relu, model_seed)?;
    let truth = GaussianScore::new(vec![0.0], 1.0);
    // fresh state per draw so the data law is exactly N(0, 1)
    let states = standard_normal_states(n_draws, rng);
    let terms = dsm_offset_terms(&g, &truth, states.view(), &schedule, n_draws, rng)?;
    Ok(stats::mean_and_stderr(&terms))
}

/// Mean cost over learner states with the exact learner score, against the
/// closed-form DS divergence of learner from expert. Returns
/// `(mean cost, std_error, closed form)`.
pub fn cost_matches_divergence(
    learner: (&[f64], f64),
    expert: (&[f64], f64),
    schedule: &DiffusionSchedule,
    n_states: usize,
    rng: &mut Rng,
) -> Result<(f64, f64, f64)> {
    let cf = CostFn::new(
        GaussianScore::new(expert.0.to_vec(), expert.1),
        GaussianScore::new(learner.0.to_vec(), learner.1),
        *schedule,
        1,
    )?;
    let states = gaussian_states(learner.0, learner.1, n_states, rng);
    let terms = cf.cost_terms(states.view(), rng)?;
    let (m, se) = stats::mean_and_stderr(&terms);
    let exact = ds_divergence_gaussian(learner.0, learner.1, expert.0, expert.1, schedule)?;
    Ok((m, se, exact))
}

fn identities(seed: u64) -> Result<Vec<Check>> {
    let mut rng = rng::stream(seed, 0xD1);
    let mut checks = Vec::new();
    for k in 0..OFFSET_MODELS as u64 {
        let (m, se) = offset_at_ln2(seed.wrapping_mul(31).wrapping_add(k), OFFSET_DRAWS, &mut rng)?;
        checks.push(Check::new(format!("offset t=ln2, model {k}"), m, 1.0 / 3.0, 3.0 * se, CheckKind::Within));
    }
    let schedule = DiffusionSchedule::default();
    let (m, se, exact) = cost_matches_divergence((&[1.0], 0.5), (&[0.0], 1.0), &schedule, 400_000, &mut rng)?;
    checks.push(Check::new("mean cost = DS(learner, expert)", m, exact, 3.0 * se, CheckKind::Within));
    Ok(checks)
}

/// `(mu1, s1, mu2, s2)` in one dimension.
pub const DS_PARAMETER_SETS: [(f64, f64, f64, f64); 5] = [
    (0.0, 1.0, 1.0, 1.0),
    (0.0, 1.0, 0.0, 4.0),
    (2.0, 0.25, 0.0, 1.0),
    (-1.0, 0.5, 1.0, 2.0),
    (0.5, 2.0, -0.5, 0.3),
];

pub const DS_DRAWS: usize = 1_000_000;

/// Monte-Carlo DS divergence with analytic scores against the closed form
/// on `N(mu1, s1)` vs `N(mu2, s2)`. Returns `(estimate, std_error, exact)`.
pub fn ds_mc_vs_closed_form(
    set: (f64, f64, f64, f64),
    schedule: &DiffusionSchedule,
    n_draws: usize,
    rng: &mut Rng,
) -> Result<(f64, f64, f64)> {
    let (mu1, s1, mu2, s2) = set;
    let p = GaussianScore::new(vec![mu1], s1);
    let q = GaussianScore::new(vec![mu2], s2);
    let samples = gaussian_states(&[mu1], s1, n_draws, rng);
    let est = ds_divergence_mc(&p, &q, samples.view(), schedule, n_draws, rng)?;
    let exact = ds_divergence_gaussian(&[mu1], s1, &[mu2], s2, schedule)?;
    Ok((est.value, est.std_error, exact))
}

/// Sample mean and (biased) variance of [`reverse_sample`] draws for a
/// one-dimensional Gaussian target.
pub fn reverse_sampler_moments(mu: f64, sigma2: f64, n: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    let score = GaussianScore::new(vec![mu], sigma2);
    let z = reverse_sample(&score, &DiffusionSchedule::default(), n, DEFAULT_EULER_STEPS, rng)?;
    let xs: Vec<f64> = z.iter().copied().collect();
    let m = stats::mean(&xs);
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    Ok((m, v))
}

fn oracles(seed: u64) -> Result<Vec<Check>> {
    let mut rng = rng::stream(seed, 0xD2);
    let mut checks = Vec::new();
    let schedule = DiffusionSchedule::new(1.0, 5000, 1e-3)?;
    for set in DS_PARAMETER_SETS {
        let (est, se, exact) = ds_mc_vs_closed_form(set, &schedule, DS_DRAWS, &mut rng)?;
        let name = format!("DS MC N({},{}) vs N({},{})", set.0, set.1, set.2, set.3);
        checks.push(Check::new(name, est, exact, 3.0 * se, CheckKind::Within));
    }
    // T = 1 with t_min → 0 has the value (1 − e^{−2})/2
    let fine = DiffusionSchedule::new(1.0, 20_000, 1e-9)?;
    let value = ds_divergence_gaussian(&[0.0], 1.0, &[1.0], 1.0, &fine)?;
    checks.push(Check::new(
        "closed form N(0,1) vs N(1,1), T=1",
        value,
        (1.0 - (-2.0f64).exp()) / 2.0,
        1e-4,
        CheckKind::Within,
    ));
    let (m, v) = reverse_sampler_moments(2.0, 0.25, 10_000, &mut rng)?;
    checks.push(Check::new("reverse sampler mean, N(2,0.25)", m, 2.0, 0.1, CheckKind::Within));
    checks.push(Check::new("reverse sampler variance, N(2,0.25)", v, 0.25, 0.1, CheckKind::Within));
    Ok(checks)
}

pub const GAP_SHIFTS: [f64; 4] = [0.0, 1.0, 3.0, 10.0];
/// Constant misfit of the learner score estimate in the gap testbed.
pub const GAP_FIT_OFFSET: f64 = 0.1;
pub const GAP_DRAWS: usize = 1_000_000;

/// Naive and corrected errors on the `N(0, 1)` testbed: the learner score
/// estimate is the truth plus [`GAP_FIT_OFFSET`], the expert score is the
/// truth plus `shift`.
pub fn gap_at_shift(shift: f64, n_draws: usize, rng: &mut Rng) -> Result<crate::divergence::GapReport> {
    let schedule = DiffusionSchedule::default();
    let truth = GaussianScore::new(vec![0.0], 1.0);
    let g_e = ShiftedScore { inner: truth.clone(), shift: vec![shift] };
    let g_pi = ShiftedScore { inner: truth.clone(), shift: vec![GAP_FIT_OFFSET] };
    let states = standard_normal_states(n_draws, rng);
    naive_vs_corrected_gap(&g_e, &g_pi, &truth, states.view(), &schedule, n_draws, rng)
}

fn estimator_gap(seed: u64) -> Result<Vec<Check>> {
    let mut rng = rng::stream(seed, 0xD3);
    let mut checks = Vec::new();
    let mut naive = Vec::new();
    for shift in GAP_SHIFTS {
        let r = gap_at_shift(shift, GAP_DRAWS, &mut rng)?;
        checks.push(Check::new(
            format!("corrected error <= fit error, shift {shift}"),
            r.corrected_err,
            r.fit_err,
            3.0 * r.corrected_se,
            CheckKind::AtMost,
        ));
        naive.push((r.naive_err, r.corrected_err));
    }
    let increases = naive.windows(2).filter(|w| w[1].0 > w[0].0).count();
    checks.push(Check::new(
        "naive error increases with shift",
        increases as f64,
        (GAP_SHIFTS.len() - 1) as f64,
        0.0,
        CheckKind::AtLeast,
    ));
    let (n10, c10) = naive[naive.len() - 1];
    checks.push(Check::new("naive/corrected ratio, shift 10", n10 / c10, 5.0, 0.0, CheckKind::AtLeast));
    Ok(checks)
}

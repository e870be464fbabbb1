//! Diffusion-score (DS) divergence
//! `DS(P, Q) = E_{s∼P} E_t E_{s_t∼q_t(·|s)} ‖∇log P_t(s_t) − ∇log Q_t(s_t)‖²`,
//! its Gaussian closed form, and a grid Hellinger distance.

use ndarray::{Array2, ArrayView2, Axis};

use crate::diffusion::{diffuse_rows, diffused_var, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::score::ScoreFn;
use crate::scorematch::{draw_noise, EVAL_CHUNK};
use crate::stats;

/// Number of trapezoid nodes for the time integral of the Gaussian oracle.
const QUADRATURE_NODES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_mc: usize,
}

/// Unbiased Monte-Carlo DS estimate. Draw `k` uses `samples_p[k mod n]`, so
/// with `n_mc == samples_p.len()` every sample is used exactly once.
pub fn ds_divergence_mc<P: ScoreFn + ?Sized, Q: ScoreFn + ?Sized>(
    score_p: &P,
    score_q: &Q,
    samples_p: ArrayView2<f64>,
    schedule: &DiffusionSchedule,
    n_mc: usize,
    rng: &mut Rng,
) -> Result<DsEstimate> {
    if samples_p.nrows() == 0 {
        return Err(Error::Argument("no samples from the first distribution".into()));
    }
    if n_mc == 0 {
        return Err(Error::Argument("need at least one draw".into()));
    }
    let d = samples_p.ncols();
    let mut terms = Vec::with_capacity(n_mc);
    let mut start = 0;
    while start < n_mc {
        let end = (start + EVAL_CHUNK).min(n_mc);
        let rows: Vec<usize> = (start..end).map(|k| k % samples_p.nrows()).collect();
        let batch = samples_p.select(Axis(0), &rows);
        let (times, eps) = draw_noise(schedule, end - start, d, rng);
        let (s_t, _) = diffuse_rows(batch.view(), &times, eps.view());
        let a = score_p.score_batch(s_t.view(), &times)?;
        let b = score_q.score_batch(s_t.view(), &times)?;
        push_sq_diffs(&a, &b, &mut terms)?;
        start = end;
    }
    let (value, std_error) = stats::mean_and_stderr(&terms);
    Ok(DsEstimate { value, std_error, n_mc })
}

fn push_sq_diffs(a: &Array2<f64>, b: &Array2<f64>, out: &mut Vec<f64>) -> Result<()> {
    for (ra, rb) in a.outer_iter().zip(b.outer_iter()) {
        let v: f64 = ra.iter().zip(rb).map(|(x, y)| (x - y).powi(2)).sum();
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite score value in DS estimate".into()));
        }
        out.push(v);
    }
    Ok(())
}

/// Exact DS divergence between isotropic Gaussians `N(mu1, s1 I)` and
/// `N(mu2, s2 I)` under `schedule`.
///
/// At time `t` both stay Gaussian with means `mu_i e^{−t}` and variances
/// `v_i = s_i e^{−2t} + 1 − e^{−2t}`. The score difference is affine in `x`,
/// `a x + b` with `a = 1/v2 − 1/v1`, `b = m1/v1 − m2/v2`, so under `P_t`
/// its squared norm has mean `‖a m1 + b‖² + a² v1 d`. That integrand is
/// averaged over the schedule's time grid exactly when the grid has at most
/// 10⁴ points, otherwise by a 10⁴-node trapezoid rule on `[t_min, T]`.
pub fn ds_divergence_gaussian(
    mu1: &[f64],
    s1: f64,
    mu2: &[f64],
    s2: f64,
    schedule: &DiffusionSchedule,
) -> Result<f64> {
    if !(s1 > 0.0 && s2 > 0.0) {
        return Err(Error::Domain(format!("variances must be positive, got {s1} and {s2}")));
    }
    if mu1.len() != mu2.len() {
        return Err(Error::Shape(format!("{} vs {} dimensions", mu1.len(), mu2.len())));
    }
    let d = mu1.len() as f64;
    let integrand = |t: f64| {
        let decay = (-t).exp();
        let v1 = diffused_var(s1, t);
        let v2 = diffused_var(s2, t);
        let a = 1.0 / v2 - 1.0 / v1;
        let mean_sq: f64 = mu1
            .iter()
            .zip(mu2)
            .map(|(m1, m2)| {
                let (m1, m2) = (m1 * decay, m2 * decay);
                (a * m1 + m1 / v1 - m2 / v2).powi(2)
            })
            .sum();
        mean_sq + a * a * v1 * d
    };
    let n = schedule.n_steps();
    if n <= QUADRATURE_NODES {
        return Ok((0..n).map(|i| integrand(schedule.time(i))).sum::<f64>() / n as f64);
    }
    let (lo, hi) = (schedule.t_min(), schedule.horizon());
    let h = (hi - lo) / (QUADRATURE_NODES - 1) as f64;
    let mut acc = 0.5 * (integrand(lo) + integrand(hi));
    for i in 1..QUADRATURE_NODES - 1 {
        acc += integrand(lo + i as f64 * h);
    }
    Ok(acc * h / (hi - lo))
}

/// Squared Hellinger distance `½ ∫ (√p − √q)²` by the trapezoid rule on a
/// sorted grid.
pub fn hellinger_grid<P: Fn(f64) -> f64, Q: Fn(f64) -> f64>(
    pdf_p: P,
    pdf_q: Q,
    grid: &[f64],
) -> Result<f64> {
    if grid.len() < 2 {
        return Err(Error::Argument("grid needs at least two points".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Argument("grid must be strictly increasing".into()));
    }
    let f = |x: f64| {
        let (p, q) = (pdf_p(x), pdf_q(x));
        (p.max(0.0).sqrt() - q.max(0.0).sqrt()).powi(2)
    };
    let mut acc = 0.0;
    let mut prev = f(grid[0]);
    for w in grid.windows(2) {
        let next = f(w[1]);
        acc += 0.5 * (prev + next) * (w[1] - w[0]);
        prev = next;
    }
    Ok(0.5 * acc)
}

/// Errors of the two ways of estimating `ℓ(π) = E‖g_e − ∇log p^π_t‖²` when
/// the learner score is only available through an estimate `g_pi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    /// `ℓ(π)` computed with the true learner score.
    pub true_value: f64,
    /// `|E‖g_e − g_pi‖² − ℓ(π)|`.
    pub naive_err: f64,
    /// `|E[‖g_e − c‖² − ‖g_pi − c‖²] − ℓ(π)|`, `c` the conditional score.
    pub corrected_err: f64,
    pub naive_se: f64,
    pub corrected_se: f64,
    /// `E‖g_pi − ∇log p^π_t‖²`, the fit error of the learner score.
    pub fit_err: f64,
}

/// All three quantities are computed on the same `(s, t, ε)` draws, so the
/// reported standard errors are those of the paired differences.
pub fn naive_vs_corrected_gap<E, G, T>(
    g_e: &E,
    g_pi: &G,
    score_true: &T,
    states: ArrayView2<f64>,
    schedule: &DiffusionSchedule,
    n_mc: usize,
    rng: &mut Rng,
) -> Result<GapReport>
where
    E: ScoreFn + ?Sized,
    G: ScoreFn + ?Sized,
    T: ScoreFn + ?Sized,
{
    if states.nrows() == 0 || n_mc == 0 {
        return Err(Error::Argument("need states and at least one draw".into()));
    }
    let d = states.ncols();
    let mut truth = Vec::with_capacity(n_mc);
    let mut naive_diff = Vec::with_capacity(n_mc);
    let mut corrected_diff = Vec::with_capacity(n_mc);
    let mut fit = Vec::with_capacity(n_mc);
    let sq = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
    };
    let mut start = 0;
    while start < n_mc {
        let end = (start + EVAL_CHUNK).min(n_mc);
        let rows: Vec<usize> = (start..end).map(|k| k % states.nrows()).collect();
        let batch = states.select(Axis(0), &rows);
        let (times, eps) = draw_noise(schedule, end - start, d, rng);
        let (s_t, cond) = diffuse_rows(batch.view(), &times, eps.view());
        let e = g_e.score_batch(s_t.view(), &times)?;
        let p = g_pi.score_batch(s_t.view(), &times)?;
        let s = score_true.score_batch(s_t.view(), &times)?;
        for i in 0..end - start {
            let l_true = sq(e.row(i), s.row(i));
            let l_naive = sq(e.row(i), p.row(i));
            let l_corr = sq(e.row(i), cond.row(i)) - sq(p.row(i), cond.row(i));
            if !(l_true.is_finite() && l_naive.is_finite() && l_corr.is_finite()) {
                return Err(Error::Numeric("non-finite score value in gap diagnostic".into()));
            }
            truth.push(l_true);
            naive_diff.push(l_naive - l_true);
            corrected_diff.push(l_corr - l_true);
            fit.push(sq(p.row(i), s.row(i)));
        }
        start = end;
    }
    let (naive, naive_se) = stats::mean_and_stderr(&naive_diff);
    let (corr, corrected_se) = stats::mean_and_stderr(&corrected_diff);
    Ok(GapReport {
        true_value: stats::mean(&truth),
        naive_err: naive.abs(),
        corrected_err: corr.abs(),
        naive_se,
        corrected_se,
        fit_err: stats::mean(&fit),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::score::{GaussianScore, ShiftedScore};

    fn normal_pdf(mu: f64, var: f64) -> impl Fn(f64) -> f64 {
        move |x| (-(x - mu).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    }

    fn gaussian_samples(mu: f64, var: f64, n: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::seeded(seed);
        Array2::from_shape_simple_fn((n, 1), || mu + var.sqrt() * rng::normal(&mut r))
    }

    #[test]
    fn identical_scores_give_exact_zero() {
        let sched = DiffusionSchedule::default();
        let p = GaussianScore::new(vec![0.3], 0.7);
        let xs = gaussian_samples(0.3, 0.7, 100, 1);
        let mut r = rng::seeded(2);
        let est = ds_divergence_mc(&p, &p, xs.view(), &sched, 1000, &mut r).unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn gaussian_oracle_equal_variance_closed_form() {
        // v_t = 1 for unit variances, so the integrand is e^{-2t}.
        let sched = DiffusionSchedule::new(1.0, 1_000_000, 1e-9).unwrap();
        let v = ds_divergence_gaussian(&[1.0], 1.0, &[0.0], 1.0, &sched).unwrap();
        let want = (1.0 - (-2.0f64).exp()) / 2.0;
        assert!((v - want).abs() < 1e-6, "{v} vs {want}");
        assert!((want - 0.43233).abs() < 1e-5);
        assert_eq!(ds_divergence_gaussian(&[0.4], 0.5, &[0.4], 0.5, &sched).unwrap(), 0.0);
        assert!(matches!(
            ds_divergence_gaussian(&[0.0], 0.0, &[0.0], 1.0, &sched),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn mc_scaling_is_quadratic() {
        let sched = DiffusionSchedule::default();
        let p = GaussianScore::new(vec![0.0], 1.0);
        let q = GaussianScore::new(vec![1.0], 1.0);
        let q2 = ShiftedScore { inner: p.clone(), shift: vec![0.0] };
        let xs = gaussian_samples(0.0, 1.0, 20_000, 3);
        let base = ds_divergence_mc(&p, &q, xs.view(), &sched, 20_000, &mut rng::seeded(4)).unwrap();
        // Doubling the score gap: compare p against p + 2(q − p).
        let doubled = crate::score::FnScore::new(1, |x: &[f64], t| {
            let a = crate::diffusion::gaussian_marginal_score(&[0.0], 1.0, x, t)[0];
            let b = crate::diffusion::gaussian_marginal_score(&[1.0], 1.0, x, t)[0];
            vec![a + 2.0 * (b - a)]
        });
        let big = ds_divergence_mc(&q2, &doubled, xs.view(), &sched, 20_000, &mut rng::seeded(4)).unwrap();
        assert!((big.value / base.value - 4.0).abs() < 1e-9, "{}", big.value / base.value);
    }

    #[test]
    fn ds_is_asymmetric() {
        let sched = DiffusionSchedule::default();
        let pq = ds_divergence_gaussian(&[0.0], 1.0, &[2.0], 0.25, &sched).unwrap();
        let qp = ds_divergence_gaussian(&[2.0], 0.25, &[0.0], 1.0, &sched).unwrap();
        assert!((pq - qp).abs() > 0.05, "{pq} vs {qp}");
        let p = GaussianScore::new(vec![0.0], 1.0);
        let q = GaussianScore::new(vec![2.0], 0.25);
        let xs = gaussian_samples(0.0, 1.0, 200_000, 5);
        let est = ds_divergence_mc(&p, &q, xs.view(), &sched, 200_000, &mut rng::seeded(6)).unwrap();
        assert!((est.value - pq).abs() < 3.0 * est.std_error, "{} ± {} vs {pq}", est.value, est.std_error);
    }

    #[test]
    fn ds_gaussian_is_nonnegative() {
        let sched = DiffusionSchedule::default();
        for (m1, s1, m2, s2) in [(0.0, 1.0, 0.0, 2.0), (1.0, 0.1, -1.0, 3.0), (0.5, 0.5, 0.5, 0.5)] {
            assert!(ds_divergence_gaussian(&[m1], s1, &[m2], s2, &sched).unwrap() >= 0.0);
        }
    }

    #[test]
    fn hellinger_gaussian_closed_form() {
        let grid: Vec<f64> = (0..=17_000).map(|i| -8.0 + i as f64 * 1e-3).collect();
        let h = hellinger_grid(normal_pdf(0.0, 1.0), normal_pdf(1.0, 1.0), &grid).unwrap();
        let want = 1.0 - (-1.0f64 / 8.0).exp();
        assert!((h - want).abs() < 1e-4, "{h} vs {want}");
        let same = hellinger_grid(normal_pdf(0.0, 1.0), normal_pdf(0.0, 1.0), &grid).unwrap();
        assert_eq!(same, 0.0);
        assert!(hellinger_grid(normal_pdf(0.0, 1.0), normal_pdf(0.0, 1.0), &[1.0, 0.0]).is_err());
    }

    #[test]
    fn hellinger_is_bounded() {
        let grid: Vec<f64> = (0..=40_000).map(|i| -20.0 + i as f64 * 1e-3).collect();
        for (m, v) in [(0.0, 0.01), (5.0, 1.0), (15.0, 0.5)] {
            let h = hellinger_grid(normal_pdf(0.0, 1.0), normal_pdf(m, v), &grid).unwrap();
            assert!((0.0..=1.0 + 1e-9).contains(&h), "{h}");
        }
    }

    #[test]
    fn small_ds_implies_small_hellinger() {
        let sched = DiffusionSchedule::default();
        let grid: Vec<f64> = (0..=20_000).map(|i| -10.0 + i as f64 * 1e-3).collect();
        for (m2, s2) in [(0.05, 1.0), (0.0, 1.05), (0.03, 0.97)] {
            let ds = ds_divergence_gaussian(&[0.0], 1.0, &[m2], s2, &sched).unwrap();
            assert!(ds < 0.01, "ds {ds}");
            let h = hellinger_grid(normal_pdf(0.0, 1.0), normal_pdf(m2, s2), &grid).unwrap();
            assert!(h < 0.05, "hellinger {h}");
        }
    }

    #[test]
    fn gap_vanishes_with_exact_learner_score() {
        let sched = DiffusionSchedule::default();
        let truth = GaussianScore::new(vec![0.0], 1.0);
        let g_e = ShiftedScore { inner: truth.clone(), shift: vec![2.0] };
        let xs = gaussian_samples(0.0, 1.0, 50_000, 7);
        let rep = naive_vs_corrected_gap(&g_e, &truth, &truth, xs.view(), &sched, 50_000, &mut rng::seeded(8)).unwrap();
        assert_eq!(rep.naive_err, 0.0);
        assert!(rep.corrected_err < 3.0 * rep.corrected_se + 1e-12, "{rep:?}");
        assert_eq!(rep.fit_err, 0.0);
    }
}

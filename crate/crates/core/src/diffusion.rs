//! Ornstein–Uhlenbeck forward process `dx = −x dt + √2 dB`.
//!
//! Conditional law: `x_t | x ~ N(x e^{−t}, (1 − e^{−2t}) I)`; stationary law
//! `N(0, I)`. Everything here is closed form except [`reverse_sample`], which
//! integrates the reverse-time SDE with Euler–Maruyama.

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::score::ScoreFn;

pub const DEFAULT_HORIZON: f64 = 3.0;
pub const DEFAULT_STEPS: usize = 5000;
pub const DEFAULT_T_MIN: f64 = 1e-2;
pub const DEFAULT_EULER_STEPS: usize = 200;

/// Diffusion horizon and the uniform time grid `t_i = t_min + i (T − t_min)/(n − 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionSchedule {
    horizon: f64,
    n_steps: usize,
    t_min: f64,
}

/// A point on the time grid: the bin feeds learned embeddings, `t` feeds
/// closed forms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridTime {
    pub bin: usize,
    pub t: f64,
}

/// One `(t, ε)` draw of the forward process.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePair {
    pub time: GridTime,
    pub eps: Vec<f64>,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        DiffusionSchedule { horizon: DEFAULT_HORIZON, n_steps: DEFAULT_STEPS, t_min: DEFAULT_T_MIN }
    }
}

impl DiffusionSchedule {
    pub fn new(horizon: f64, n_steps: usize, t_min: f64) -> Result<DiffusionSchedule> {
        if !(t_min > 0.0 && t_min < horizon && horizon.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < t_min < T, got t_min={t_min}, T={horizon}"
            )));
        }
        if n_steps < 2 {
            return Err(Error::Config(format!("need at least 2 time steps, got {n_steps}")));
        }
        Ok(DiffusionSchedule { horizon, n_steps, t_min })
    }

    /// Degenerate one-point grid at time `t`; used by diagnostics that hold
    /// the diffusion time fixed.
    pub fn fixed(t: f64) -> Result<DiffusionSchedule> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Domain(format!("fixed time must be positive, got {t}")));
        }
        Ok(DiffusionSchedule { horizon: t, n_steps: 1, t_min: t })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn time(&self, bin: usize) -> f64 {
        debug_assert!(bin < self.n_steps);
        if self.n_steps == 1 {
            self.t_min
        } else {
            self.t_min + bin as f64 * (self.horizon - self.t_min) / (self.n_steps - 1) as f64
        }
    }

    pub fn grid_time(&self, bin: usize) -> GridTime {
        GridTime { bin, t: self.time(bin) }
    }

    /// Closest grid point to `t` (clamped to the grid).
    pub fn nearest(&self, t: f64) -> GridTime {
        if self.n_steps == 1 {
            return self.grid_time(0);
        }
        let step = (self.horizon - self.t_min) / (self.n_steps - 1) as f64;
        let bin = ((t - self.t_min) / step).round().clamp(0.0, (self.n_steps - 1) as f64) as usize;
        self.grid_time(bin)
    }

    /// Uniform draw from the time grid.
    pub fn sample(&self, rng: &mut Rng) -> GridTime {
        self.grid_time(rng.random_range(0..self.n_steps))
    }

    pub fn sample_noise(&self, dim: usize, rng: &mut Rng) -> NoisePair {
        let time = self.sample(rng);
        let mut eps = vec![0.0; dim];
        rng::fill_normal(rng, &mut eps);
        NoisePair { time, eps }
    }
}

pub fn sample_time(schedule: &DiffusionSchedule, rng: &mut Rng) -> f64 {
    schedule.sample(rng).t
}

/// `1 − e^{−2t}`, the conditional variance at time `t`.
#[inline]
pub fn noise_var(t: f64) -> f64 {
    -(-2.0 * t).exp_m1()
}

/// `s e^{−t} + √(1 − e^{−2t}) ε`.
pub fn forward_sample(s: &[f64], t: f64, eps: &[f64]) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("diffusion time must be positive, got {t}")));
    }
    if s.len() != eps.len() {
        return Err(Error::Shape(format!("state has {} entries, noise {}", s.len(), eps.len())));
    }
    let decay = (-t).exp();
    let scale = noise_var(t).sqrt();
    Ok(s.iter().zip(eps).map(|(x, e)| x * decay + scale * e).collect())
}

/// `∇ log q_t(s_t | s) = (s e^{−t} − s_t)/(1 − e^{−2t})`.
///
/// Defined for `t ≥ t_min` of `schedule`; below that the denominator is too
/// close to zero for the result to be meaningful.
pub fn conditional_score(
    s: &[f64],
    s_t: &[f64],
    t: f64,
    schedule: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    if !(t >= schedule.t_min()) {
        return Err(Error::Domain(format!(
            "t={t} is below the schedule minimum {}",
            schedule.t_min()
        )));
    }
    if s.len() != s_t.len() {
        return Err(Error::Shape(format!("{} vs {} entries", s.len(), s_t.len())));
    }
    let decay = (-t).exp();
    let var = noise_var(t);
    Ok(s.iter().zip(s_t).map(|(x, xt)| (x * decay - xt) / var).collect())
}

/// Exact score of `N(mu, sigma2 I)` pushed through the forward process to
/// time `t`: `(mu e^{−t} − x)/(sigma2 e^{−2t} + 1 − e^{−2t})`.
pub fn gaussian_marginal_score(mu: &[f64], sigma2: f64, x: &[f64], t: f64) -> Vec<f64> {
    debug_assert!(sigma2 > 0.0 && t >= 0.0);
    let decay = (-t).exp();
    let var = diffused_var(sigma2, t);
    mu.iter().zip(x).map(|(m, xi)| (m * decay - xi) / var).collect()
}

/// Per-coordinate variance at time `t` of a Gaussian with variance `sigma2`.
#[inline]
pub fn diffused_var(sigma2: f64, t: f64) -> f64 {
    sigma2 * (-2.0 * t).exp() + noise_var(t)
}

/// Draws samples by integrating the reverse-time SDE
/// `dz = (z + 2 score(z, T − τ)) dτ + √2 dB` from `z ~ N(0, I)` at `τ = 0` to
/// `τ = T − t_min` in `n_euler_steps` equal steps.
pub fn reverse_sample<S: ScoreFn + ?Sized>(
    score: &S,
    schedule: &DiffusionSchedule,
    n_samples: usize,
    n_euler_steps: usize,
    rng: &mut Rng,
) -> Result<Array2<f64>> {
    if n_euler_steps < 10 {
        return Err(Error::Argument(format!("need at least 10 Euler steps, got {n_euler_steps}")));
    }
    let dim = score.dim();
    let mut z = Array2::from_shape_simple_fn((n_samples, dim), || rng::normal(rng));
    if n_samples == 0 {
        return Ok(z);
    }
    let span = schedule.horizon() - schedule.t_min();
    let dtau = span / n_euler_steps as f64;
    let noise_scale = (2.0 * dtau).sqrt();
    let mut times = vec![schedule.grid_time(0); n_samples];
    for step in 0..n_euler_steps {
        let tau = step as f64 * dtau;
        let t = schedule.horizon() - tau;
        let gt = GridTime { bin: schedule.nearest(t).bin, t };
        times.fill(gt);
        let sc = score.score_batch(z.view(), &times)?;
        if sc.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite score at tau={tau:.6} (t={t:.6})")));
        }
        Zip::from(&mut z).and(&sc).for_each(|zi, &si| {
            *zi += (*zi + 2.0 * si) * dtau + noise_scale * rng::normal(rng);
        });
    }
    Ok(z)
}

/// Diffuses each row of `states` with its own noise row; returns `(s_t, targets)`
/// where targets are the conditional scores.
pub(crate) fn diffuse_rows(
    states: ArrayView2<f64>,
    times: &[GridTime],
    eps: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let mut s_t = Array2::zeros(states.raw_dim());
    let mut target = Array2::zeros(states.raw_dim());
    for (i, gt) in times.iter().enumerate() {
        let decay = (-gt.t).exp();
        let var = noise_var(gt.t);
        let scale = var.sqrt();
        for j in 0..states.ncols() {
            let e = eps[[i, j]];
            s_t[[i, j]] = states[[i, j]] * decay + scale * e;
            // (s e^{-t} - s_t)/var simplifies to -eps/scale
            target[[i, j]] = -e / scale;
        }
    }
    (s_t, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{FnScore, GaussianScore};
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

    const LN2: f64 = std::f64::consts::LN_2;

    fn ks_statistic_vs_std_normal(mut xs: Vec<f64>) -> f64 {
        let n = Normal::new(0.0, 1.0).unwrap();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let c = n.cdf(x);
                (c - i as f64 / m).abs().max(((i + 1) as f64 / m - c).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn schedule_validation() {
        assert!(DiffusionSchedule::new(1.0, 1, 0.01).is_err());
        assert!(DiffusionSchedule::new(1.0, 10, 0.0).is_err());
        assert!(DiffusionSchedule::new(1.0, 10, 1.5).is_err());
        let s = DiffusionSchedule::new(1.0, 5, 0.2).unwrap();
        assert_eq!(s.time(0), 0.2);
        assert!((s.time(4) - 1.0).abs() < 1e-15);
        assert_eq!(s.nearest(0.61).bin, 2);
        assert_eq!(s.nearest(-3.0).bin, 0);
        assert_eq!(s.nearest(9.0).bin, 4);
    }

    #[test]
    fn two_point_grid_is_uniform() {
        let sched = DiffusionSchedule::new(1.0, 2, 0.01).unwrap();
        let mut rng = rng::seeded(11);
        let n = 10_000;
        let mut low = 0usize;
        for _ in 0..n {
            let t = sample_time(&sched, &mut rng);
            assert!(t == 0.01 || t == 1.0);
            if t == 0.01 {
                low += 1;
            }
        }
        let expected = n as f64 / 2.0;
        let chi2 = 2.0 * (low as f64 - expected).powi(2) / expected;
        let p = 1.0 - ChiSquared::new(1.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2={chi2}, p={p}");
    }

    #[test]
    fn sample_time_is_seeded_and_in_range() {
        let sched = DiffusionSchedule::default();
        let a: Vec<f64> = {
            let mut r = rng::seeded(5);
            (0..100).map(|_| sample_time(&sched, &mut r)).collect()
        };
        let b: Vec<f64> = {
            let mut r = rng::seeded(5);
            (0..100).map(|_| sample_time(&sched, &mut r)).collect()
        };
        assert_eq!(a, b);
        assert!(a.iter().all(|&t| t >= sched.t_min() && t <= sched.horizon()));
    }

    #[test]
    fn forward_sample_closed_form() {
        let x = forward_sample(&[1.0], LN2, &[0.0]).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-15);
        let x = forward_sample(&[1.0], LN2, &[1.0]).unwrap();
        assert!((x[0] - 1.366_025_403_784_438_6).abs() < 1e-12);
        assert!(matches!(forward_sample(&[1.0], 0.0, &[0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn forward_sample_converges_to_standard_normal() {
        let mut rng = rng::seeded(3);
        let xs: Vec<f64> = (0..10_000)
            .map(|_| forward_sample(&[0.0], 12.0, &[rng::normal(&mut rng)]).unwrap()[0])
            .collect();
        let d = ks_statistic_vs_std_normal(xs);
        // p > 0.01 ⇔ D < 1.628/√n asymptotically
        assert!(d < 1.628 / 100.0, "KS D={d}");
    }

    #[test]
    fn stationarity_from_far_start() {
        let mut rng = rng::seeded(4);
        for start in [-10.0, 3.0, 10.0] {
            let xs: Vec<f64> = (0..5_000)
                .map(|_| forward_sample(&[start], 8.0, &[rng::normal(&mut rng)]).unwrap()[0])
                .collect();
            // drift e^{-8}·10 ≈ 3.4e-3 is far below the KS resolution here
            let d = ks_statistic_vs_std_normal(xs);
            assert!(d < 1.628 / 5_000f64.sqrt(), "start {start}: KS D={d}");
        }
    }

    #[test]
    fn conditional_score_values() {
        let sched = DiffusionSchedule::default();
        let g = conditional_score(&[1.0], &[1.0], LN2, &sched).unwrap();
        assert!((g[0] + 2.0 / 3.0).abs() < 1e-12);
        let st = forward_sample(&[1.0], LN2, &[2.0]).unwrap();
        let g = conditional_score(&[1.0], &st, LN2, &sched).unwrap();
        assert!((g[0] + 2.309_401_076_758_503).abs() < 1e-12);
        assert!(matches!(conditional_score(&[1.0], &[1.0], 1e-3, &sched), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn conditional_score_noise_identity(
            s in proptest::collection::vec(-10.0f64..10.0, 3),
            eps in proptest::collection::vec(-4.0f64..4.0, 3),
            t in 0.01f64..5.0,
        ) {
            let sched = DiffusionSchedule::default();
            let st = forward_sample(&s, t, &eps).unwrap();
            let g = conditional_score(&s, &st, t, &sched).unwrap();
            let scale = noise_var(t).sqrt();
            for (gi, ei) in g.iter().zip(&eps) {
                let want = -ei / scale;
                prop_assert!((gi - want).abs() <= 1e-9 * (1.0 + want.abs()) / scale.min(1.0),
                    "{} vs {}", gi, want);
            }
        }
    }

    #[test]
    fn gaussian_marginal_score_values() {
        for t in [0.0, 0.3, 2.0] {
            let g = gaussian_marginal_score(&[0.0, 0.0], 1.0, &[0.7, -1.2], t);
            assert!((g[0] + 0.7).abs() < 1e-12 && (g[1] - 1.2).abs() < 1e-12);
        }
        let g = gaussian_marginal_score(&[1.0], 1.0, &[0.0], LN2);
        assert!((g[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gaussian_marginal_score_matches_log_density_gradient() {
        let (mu, sigma2, t) = (1.3, 0.4, 0.7);
        let m = mu * (-t as f64).exp();
        let v = sigma2 * (-2.0 * t as f64).exp() + 1.0 - (-2.0 * t as f64).exp();
        let logp = |x: f64| -0.5 * (x - m).powi(2) / v - 0.5 * (2.0 * std::f64::consts::PI * v).ln();
        for x in [-2.0, 0.1, 1.7] {
            let h = 1e-5;
            let fd = (logp(x + h) - logp(x - h)) / (2.0 * h);
            let g = gaussian_marginal_score(&[mu], sigma2, &[x], t)[0];
            assert!((fd - g).abs() < 1e-6, "x={x}: {fd} vs {g}");
        }
    }

    #[test]
    fn reverse_sampler_stationary() {
        let sched = DiffusionSchedule::default();
        let score = FnScore::new(1, |x: &[f64], _t| vec![-x[0]]);
        let mut rng = rng::seeded(21);
        let z = reverse_sample(&score, &sched, 10_000, DEFAULT_EULER_STEPS, &mut rng).unwrap();
        let mean = z.mean().unwrap();
        let var = z.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn reverse_sampler_hits_gaussian_target() {
        let sched = DiffusionSchedule::default();
        let score = GaussianScore::new(vec![2.0], 0.25);
        let mut rng = rng::seeded(22);
        let z = reverse_sample(&score, &sched, 10_000, DEFAULT_EULER_STEPS, &mut rng).unwrap();
        let mean = z.mean().unwrap();
        let var = z.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        assert!((mean - 2.0).abs() < 0.1, "mean {mean}");
        assert!((var - 0.25).abs() < 0.1, "var {var}");
    }

    #[test]
    fn reverse_sampler_edge_cases() {
        let sched = DiffusionSchedule::default();
        let score = GaussianScore::new(vec![0.0], 1.0);
        let mut rng = rng::seeded(0);
        let z = reverse_sample(&score, &sched, 0, 50, &mut rng).unwrap();
        assert_eq!(z.nrows(), 0);
        assert!(matches!(reverse_sample(&score, &sched, 5, 9, &mut rng), Err(Error::Argument(_))));
        let bad = FnScore::new(1, |_x: &[f64], t| vec![if t < 1.0 { f64::NAN } else { 0.0 }]);
        match reverse_sample(&bad, &sched, 3, 20, &mut rng) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("tau="), "{msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }
}

//! Score functions `g(x, t) → ℝ^d`: learned networks and analytic oracles.

use ndarray::{Array2, ArrayView2};

use crate::diffusion::{conditional_score, diffused_var, gaussian_marginal_score, noise_var, DiffusionSchedule, GridTime};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, ApproximatorParams};

/// Anything that can be evaluated as a diffusion score on a batch.
pub trait ScoreFn {
    fn dim(&self) -> usize;

    /// Row `i` of the result is `g(xs[i], times[i])`.
    fn score_batch(&self, xs: ArrayView2<f64>, times: &[GridTime]) -> Result<Array2<f64>>;

    fn score(&self, x: &[f64], time: GridTime) -> Result<Vec<f64>> {
        let xs = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.score_batch(xs, &[time])?.into_raw_vec_and_offset().0)
    }
}

impl<S: ScoreFn + ?Sized> ScoreFn for &S {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn score_batch(&self, xs: ArrayView2<f64>, times: &[GridTime]) -> Result<Array2<f64>> {
        (**self).score_batch(xs, times)
    }
}

/// A network-backed score `g(x, t)`; time enters through the embedding row
/// of the grid bin.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    pub params: ApproximatorParams,
}

impl ScoreModel {
    /// `[dim, hidden.., dim]` network with one embedding row per grid bin.
    pub fn new(
        dim: usize,
        hidden: &[usize],
        schedule: &DiffusionSchedule,
        activation: Activation,
        seed: u64,
    ) -> Result<ScoreModel> {
        let mut sizes = vec![dim];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        let params = nn::init_params(&sizes, schedule.n_steps(), activation, seed)?;
        Ok(ScoreModel { params })
    }

    pub(crate) fn bins(times: &[GridTime]) -> Vec<usize> {
        times.iter().map(|gt| gt.bin).collect()
    }
}

impl ScoreFn for ScoreModel {
    fn dim(&self) -> usize {
        self.params.output_dim()
    }

    fn score_batch(&self, xs: ArrayView2<f64>, times: &[GridTime]) -> Result<Array2<f64>> {
        self.params.forward_batch(xs, &Self::bins(times))
    }
}

fn check_dim(xs: &ArrayView2<f64>, dim: usize, times: &[GridTime]) -> Result<()> {
    if xs.ncols() != dim || xs.nrows() != times.len() {
        return Err(Error::Shape(format!(
            "batch {:?} with {} times for a {dim}-dimensional score",
            xs.dim(),
            times.len()
        )));
    }
    Ok(())
}

/// Exact diffused score of `N(mu, sigma2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScore {
    pub mu: Vec<f64>,
    pub sigma2: f64,
}

impl GaussianScore {
    pub fn new(mu: Vec<f64>, sigma2: f64) -> GaussianScore {
        assert!(sigma2 > 0.0, "variance must be positive");
        GaussianScore { mu, sigma2 }
    }
}

impl ScoreFn for GaussianScore {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn score_batch(&self, xs: ArrayView2<f64>, times: &[GridTime]) -> Result<Array2<f64>> {
        check_dim(&xs, self.dim(), times)?;
        let mut out = Array2::zeros(xs.raw_dim());
        for (i, gt) in times.iter().enumerate() {
            let row = gaussian_marginal_score(&self.mu, self.sigma2, &xs.row(i).to_vec(), gt.t);
            out.row_mut(i).assign(&ndarray::aview1(&row));
        }
        Ok(out)
    }
}

/// Exact diffused score of an isotropic Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureScore {
    /// `(weight, mean, variance)`; weights need not be normalized.
    pub components: Vec<(f64, Vec<f64>, f64)>,
}

impl ScoreFn for MixtureScore {
    fn dim(&self) -> usize {
        self.components[0].1.len()
    }

    fn score_batch(&self, xs: ArrayView2<f64>, times: &[GridTime]) -> Result<Array2<f64>> {
        let d = self.dim();
        check_dim(&xs, d, times)?;
        let mut out = Array2::zeros(xs.raw_dim());
        let mut log_w = vec![0.0; self.components.len()];
        for (i, gt) in times.iter().enumerate() {
            let decay = (-gt.t).exp();
            let x = xs.row(i);
            for (k, (w, mu, s2)) in self.components.iter().enumerate() {
                let v = diffused_var(*s2, gt.t);
                let sq: f64 = x.iter().zip(mu).map(|(xi, m)| (xi - m * decay).powi(2)).sum();
                log_w[k] = w.ln() - 0.5 * sq / v - 0.5 * d as f64 * v.ln();
            }
            let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = log_w.iter().map(|l| (l - max).exp()).sum();
            for (k, (_, mu, s2)) in self.components.iter().enumerate() {
                let r = (log_w[k] - max).exp() / z;
                let v = diffused_var(*s2, gt.t);
                for j in 0..d {
                    out[[i, j]] += r * (mu[j] * decay - x[j]) / v;
                }
            }
        }
        Ok(out)
    }
}

/// Diffused score of a point mass at `center`, i.e. the conditional score.
#[derive(Debug, Clone, PartialEq)]
pub struct DiracScore {
    pub center: Vec<f64>,
}

impl ScoreFn for DiracScore {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn score_batch(&self, xs: ArrayView2<f64>, times: &[GridTime]) -> Result<Array2<f64>> {
        check_dim(&xs, self.dim(), times)?;
        let mut out = Array2::zeros(xs.raw_dim());
        for (i, gt) in times.iter().enumerate() {
            let decay = (-gt.t).exp();
            let var = noise_var(gt.t);
            for (j, c) in self.center.iter().enumerate() {
                out[[i, j]] = (c * decay - xs[[i, j]]) / var;
            }
        }
        Ok(out)
    }
}

impl DiracScore {
    /// Same values through [`conditional_score`], which also enforces `t_min`.
    pub fn checked(&self, x: &[f64], t: f64, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
        conditional_score(&self.center, x, t, schedule)
    }
}

/// `inner(x, t) + shift`.
#[derive(Debug, Clone)]
pub struct ShiftedScore<S> {
    pub inner: S,
    pub shift: Vec<f64>,
}

impl<S: ScoreFn> ScoreFn for ShiftedScore<S> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn score_batch(&self, xs: ArrayView2<f64>, times: &[GridTime]) -> Result<Array2<f64>> {
        let mut out = self.inner.score_batch(xs, times)?;
        out += &ndarray::aview1(&self.shift);
        Ok(out)
    }
}

/// Wraps a closure `(x, t) → score`.
pub struct FnScore<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], f64) -> Vec<f64>> FnScore<F> {
    pub fn new(dim: usize, f: F) -> FnScore<F> {
        FnScore { dim, f }
    }
}

impl<F: Fn(&[f64], f64) -> Vec<f64>> ScoreFn for FnScore<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score_batch(&self, xs: ArrayView2<f64>, times: &[GridTime]) -> Result<Array2<f64>> {
        check_dim(&xs, self.dim, times)?;
        let mut out = Array2::zeros(xs.raw_dim());
        for (i, gt) in times.iter().enumerate() {
            let row = (self.f)(&xs.row(i).to_vec(), gt.t);
            if row.len() != self.dim {
                return Err(Error::Shape(format!("closure returned {} values", row.len())));
            }
            out.row_mut(i).assign(&ndarray::aview1(&row));
        }
        Ok(out)
    }
}

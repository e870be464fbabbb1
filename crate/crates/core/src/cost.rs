//! The imitation cost
//!
//! ```text
//! c(s) = E_t E_{s_t|s} [ ‖g_e(s_t,t) − ∇log q_t(s_t|s)‖² − ‖g_k(s_t,t) − ∇log q_t(s_t|s)‖² ]
//! ```
//!
//! The second term estimates (and removes) the variance of the conditional
//! score, so that averaging `c` over the learner's state distribution gives
//! the DS divergence from the learner to the expert rather than a biased
//! plug-in. Both terms are evaluated on the same `(t, ε)` draw.

use ndarray::{Array2, ArrayView2, Axis};

use crate::diffusion::{diffuse_rows, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::score::ScoreFn;
use crate::scorematch::{draw_noise, EVAL_CHUNK};
use crate::stats;

pub const DEFAULT_COST_MC: usize = 500;
pub const DEFAULT_NORM_STD: f64 = 0.1;

/// Per-state cost used by the policy optimizer. Rows of `features` are
/// states (or state–action concatenations).
pub trait StateCost {
    fn costs(&self, features: ArrayView2<f64>, rng: &mut Rng) -> Result<Vec<f64>>;
}

/// Frozen expert/learner score pair defining one iteration's cost.
#[derive(Debug, Clone)]
pub struct CostFn<E, L> {
    pub g_expert: E,
    pub g_learner: L,
    pub schedule: DiffusionSchedule,
    pub n_mc: usize,
}

impl<E: ScoreFn, L: ScoreFn> CostFn<E, L> {
    pub fn new(g_expert: E, g_learner: L, schedule: DiffusionSchedule, n_mc: usize) -> Result<Self> {
        if n_mc == 0 {
            return Err(Error::Config("cost needs at least one Monte-Carlo draw".into()));
        }
        if g_expert.dim() != g_learner.dim() {
            return Err(Error::Shape(format!(
                "expert score is {}-dimensional, learner score {}",
                g_expert.dim(),
                g_learner.dim()
            )));
        }
        Ok(CostFn { g_expert, g_learner, schedule, n_mc })
    }

    /// Per-draw bracketed differences for every state, `n_mc` per state in
    /// state order.
    pub fn cost_terms(&self, states: ArrayView2<f64>, rng: &mut Rng) -> Result<Vec<f64>> {
        let d = self.g_expert.dim();
        if states.ncols() != d {
            return Err(Error::Shape(format!("cost expects {d} columns, got {}", states.ncols())));
        }
        let n_mc = self.n_mc;
        let total = states.nrows() * n_mc;
        let mut terms = Vec::with_capacity(total);
        let mut start = 0;
        while start < total {
            let end = (start + EVAL_CHUNK).min(total);
            let rows: Vec<usize> = (start..end).map(|k| k / n_mc).collect();
            let batch = states.select(Axis(0), &rows);
            let (times, eps) = draw_noise(&self.schedule, end - start, d, rng);
            let (s_t, cond) = diffuse_rows(batch.view(), &times, eps.view());
            let e = self.g_expert.score_batch(s_t.view(), &times)?;
            check_finite(&e, "expert score")?;
            let l = self.g_learner.score_batch(s_t.view(), &times)?;
            check_finite(&l, "learner score")?;
            for i in 0..end - start {
                let mut acc = 0.0;
                for j in 0..d {
                    let c = cond[[i, j]];
                    acc += (e[[i, j]] - c).powi(2) - (l[[i, j]] - c).powi(2);
                }
                terms.push(acc);
            }
            start = end;
        }
        Ok(terms)
    }

    /// Monte-Carlo cost of each row of `states`.
    pub fn eval_batch(&self, states: ArrayView2<f64>, rng: &mut Rng) -> Result<Vec<f64>> {
        let terms = self.cost_terms(states, rng)?;
        Ok(terms.chunks(self.n_mc).map(stats::mean).collect())
    }
}

impl<E: ScoreFn, L: ScoreFn> StateCost for CostFn<E, L> {
    fn costs(&self, features: ArrayView2<f64>, rng: &mut Rng) -> Result<Vec<f64>> {
        self.eval_batch(features, rng)
    }
}

fn check_finite(a: &Array2<f64>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} produced a non-finite value")))
    }
}

/// Cost of a single state.
pub fn cost_eval<E: ScoreFn, L: ScoreFn>(cf: &CostFn<E, L>, s: &[f64], rng: &mut Rng) -> Result<f64> {
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("state is not finite".into()));
    }
    let states = ArrayView2::from_shape((1, s.len()), s).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(cf.eval_batch(states, rng)?[0])
}

/// Rescales a batch to mean 0 and population standard deviation `target_std`.
/// Batches with standard deviation at most 1e-8 map to all zeros.
pub fn cost_batch_normalize_to(costs: &[f64], target_std: f64) -> Result<Vec<f64>> {
    if costs.is_empty() {
        return Err(Error::Argument("cannot normalize an empty batch".into()));
    }
    let n = costs.len() as f64;
    let mean = costs.iter().sum::<f64>() / n;
    let std = (costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(std > 1e-8) {
        return Ok(vec![0.0; costs.len()]);
    }
    let scale = target_std / std;
    Ok(costs.iter().map(|c| (c - mean) * scale).collect())
}

/// [`cost_batch_normalize_to`] with the default 0.1 target.
pub fn cost_batch_normalize(costs: &[f64]) -> Result<Vec<f64>> {
    cost_batch_normalize_to(costs, DEFAULT_NORM_STD)
}

/// Plug-in cost `E_t E_{s_t|s} ‖g_e(s_t,t) − g_pi(s_t,t)‖²`, with the learner's
/// diffused score replaced directly by its estimate.
pub fn naive_cost_eval<E: ScoreFn + ?Sized, P: ScoreFn + ?Sized>(
    g_e: &E,
    g_pi_hat: &P,
    schedule: &DiffusionSchedule,
    s: &[f64],
    n_mc: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if n_mc == 0 {
        return Err(Error::Argument("need at least one draw".into()));
    }
    let d = s.len();
    let states = ArrayView2::from_shape((1, d), s).map_err(|e| Error::Shape(e.to_string()))?;
    let mut acc = 0.0;
    let mut done = 0;
    while done < n_mc {
        let n = (n_mc - done).min(EVAL_CHUNK);
        let batch = states.broadcast((n, d)).expect("row broadcast").to_owned();
        let (times, eps) = draw_noise(schedule, n, d, rng);
        let (s_t, _) = diffuse_rows(batch.view(), &times, eps.view());
        let a = g_e.score_batch(s_t.view(), &times)?;
        check_finite(&a, "expert score")?;
        let b = g_pi_hat.score_batch(s_t.view(), &times)?;
        check_finite(&b, "learner score estimate")?;
        acc += (a - b).mapv(|v| v * v).sum();
        done += n;
    }
    Ok(acc / n_mc as f64)
}

/// Always returns the same value.
#[derive(Debug, Clone, Copy)]
pub struct ConstantCost(pub f64);

impl StateCost for ConstantCost {
    fn costs(&self, features: ArrayView2<f64>, _rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(vec![self.0; features.nrows()])
    }
}

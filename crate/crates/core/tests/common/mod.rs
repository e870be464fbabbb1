//! Checks shared by the gradient tests and the acceptance suite.
#![allow(dead_code)]

use ndarray::{Array2, Axis};
use statrs::distribution::{ContinuousCDF, Normal};

use smiling::envs::{EnvKind, EnvSpec, Policy};
use smiling::nn::{self, Activation, ApproximatorParams};
use smiling::rl::likelihood_ratio_grad;
use smiling::rng;

/// Central-difference step for the network checks.
pub const FD_STEP: f64 = 1e-6;
/// Relative errors are taken against `max(|analytic|, |fd|, FD_FLOOR)`, so a
/// gradient that is zero to rounding is compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub n_coords: usize,
    pub max_rel_err: f64,
    /// `(block, index)` of the worst coordinate.
    pub worst: (usize, usize),
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Compares the squared-loss gradient of a random network against central
/// differences on every parameter, time embedding included.
pub fn nn_gradient_check(sizes: &[usize], n_time_bins: usize, activation: Activation, seed: u64) -> GradCheck {
    let params = nn::init_params(sizes, n_time_bins, activation, seed).unwrap();
    let mut r = rng::seeded(seed + 1);
    let n = 5;
    let xs = Array2::from_shape_simple_fn((n, sizes[0]), || rng::normal(&mut r));
    let ys = Array2::from_shape_simple_fn((n, sizes[sizes.len() - 1]), || rng::normal(&mut r));
    let bins: Vec<usize> = if n_time_bins == 0 { Vec::new() } else { (0..n).map(|i| i % n_time_bins).collect() };
    let loss = |p: &ApproximatorParams| nn::sq_loss_grad_batch(p, xs.view(), &bins, ys.view()).unwrap().0;
    let (_, grads) = nn::sq_loss_grad_batch(&params, xs.view(), &bins, ys.view()).unwrap();
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();

    let mut check = GradCheck { n_coords: 0, max_rel_err: 0.0, worst: (0, 0) };
    let mut p = params.clone();
    for (b, block) in analytic.iter().enumerate() {
        for i in 0..block.len() {
            let orig = p.slices()[b][i];
            p.slices_mut()[b][i] = orig + FD_STEP;
            let up = loss(&p);
            p.slices_mut()[b][i] = orig - FD_STEP;
            let down = loss(&p);
            p.slices_mut()[b][i] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(block[i], fd);
            check.n_coords += 1;
            if e > check.max_rel_err {
                check.max_rel_err = e;
                check.worst = (b, i);
            }
        }
    }
    check
}

/// Midpoint quantiles `Φ⁻¹((i + ½)/n)` of the standard normal.
pub fn stratified_normals(n: usize) -> Vec<f64> {
    let z = Normal::new(0.0, 1.0).unwrap();
    (0..n).map(|i| z.inverse_cdf((i as f64 + 0.5) / n as f64)).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct ScalarPgCheck {
    pub lr_mean: f64,
    pub lr_log_std: f64,
    pub fd_mean: f64,
    pub fd_log_std: f64,
}

impl ScalarPgCheck {
    pub fn max_rel_err(&self) -> f64 {
        rel_err(self.lr_mean, self.fd_mean).max(rel_err(self.lr_log_std, self.fd_log_std))
    }
}

/// Likelihood-ratio gradient of `J(b, σ) = E_{a∼N(b,σ²)} (a − 1)²` from `n`
/// stratified actions, against central differences of the closed form
/// `J = (b − 1)² + σ²`.
pub fn scalar_pg_check(b: f64, sigma: f64, n: usize) -> ScalarPgCheck {
    let z = stratified_normals(n);
    let actions = Array2::from_shape_fn((n, 1), |(i, _)| b + sigma * z[i]);
    let means = Array2::from_elem((n, 1), b);
    let weights: Vec<f64> = actions.iter().map(|a| (a - 1.0).powi(2)).collect();
    let (d_mean, d_log_std) = likelihood_ratio_grad(means.view(), &[sigma.ln()], actions.view(), &weights).unwrap();
    let j = |b: f64, log_std: f64| (b - 1.0).powi(2) + (2.0 * log_std).exp();
    let h = 1e-5;
    let ls = sigma.ln();
    ScalarPgCheck {
        lr_mean: d_mean.sum(),
        lr_log_std: d_log_std[0],
        fd_mean: (j(b + h, ls) - j(b - h, ls)) / (2.0 * h),
        fd_log_std: (j(b, ls + h) - j(b, ls - h)) / (2.0 * h),
    }
}

#[derive(Debug, Clone)]
pub struct NetworkPgCheck {
    /// `‖g_lr − g_fd‖ / ‖g_fd‖` over all mean-network parameters.
    pub net_rel_err: f64,
    pub log_std_rel_err: f64,
    pub n_samples: usize,
}

/// The same estimator pushed through a policy network with a 1-d action:
/// for fixed states, `J(θ) = mean_s E_a (a − 1)²` with `a ∼ N(μ_θ(s), σ²)`,
/// whose closed form is `mean_s (μ_θ(s) − 1)² + σ²`. Each state gets the
/// same `k` stratified actions.
pub fn network_pg_check(n_states: usize, k: usize, seed: u64) -> NetworkPgCheck {
    let spec = EnvSpec::new(EnvKind::ExpfamGauss);
    let mut policy = Policy::gaussian_net(&spec, &[16], (0.4f64).ln(), seed).unwrap();
    // move the means away from the small initialisation
    if let Some(p) = policy.net_mut() {
        let last = p.n_layers() - 1;
        p.layer_weights[last].mapv_inplace(|w| 30.0 * w);
    }
    let net = policy.net().unwrap().clone();
    let sigma = policy.log_std[0].exp();
    let mut r = rng::seeded(seed + 7);
    let states = Array2::from_shape_simple_fn((n_states, 1), || 1.5 + rng::normal(&mut r));
    let (mu, cache) = net.forward_cached(states.view(), &[]).unwrap();

    let z = stratified_normals(k);
    let n = n_states * k;
    let means = Array2::from_shape_fn((n, 1), |(row, _)| mu[[row / k, 0]]);
    let actions = Array2::from_shape_fn((n, 1), |(row, _)| mu[[row / k, 0]] + sigma * z[row % k]);
    let weights: Vec<f64> = actions.iter().map(|a| (a - 1.0).powi(2)).collect();
    let (d_mean, d_log_std) =
        likelihood_ratio_grad(means.view(), &policy.log_std, actions.view(), &weights).unwrap();
    // a state's rows share its mean, so their gradients add up
    let mut d_mu = Array2::zeros((n_states, 1));
    for (s, block) in d_mean.axis_chunks_iter(Axis(0), k).enumerate() {
        d_mu.row_mut(s).assign(&block.sum_axis(Axis(0)));
    }
    let lr_grads = net.backward(&cache, d_mu.view());

    let objective = |p: &ApproximatorParams| -> f64 {
        let m = p.forward_batch(states.view(), &[]).unwrap();
        m.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / n_states as f64
    };
    let h = 1e-6;
    let mut p = net.clone();
    let (mut num, mut den) = (0.0, 0.0);
    let lr_blocks: Vec<Vec<f64>> = lr_grads.slices().iter().map(|s| s.to_vec()).collect();
    for (b, block) in lr_blocks.iter().enumerate() {
        for i in 0..block.len() {
            let orig = p.slices()[b][i];
            p.slices_mut()[b][i] = orig + h;
            let up = objective(&p);
            p.slices_mut()[b][i] = orig - h;
            let down = objective(&p);
            p.slices_mut()[b][i] = orig;
            let fd = (up - down) / (2.0 * h);
            num += (block[i] - fd).powi(2);
            den += fd * fd;
        }
    }
    // d/d log σ of σ²
    let log_std_rel_err = rel_err(d_log_std[0], 2.0 * sigma * sigma);
    NetworkPgCheck { net_rel_err: (num / den).sqrt(), log_std_rel_err, n_samples: n }
}

//! Episodic policy gradient with a learned value baseline.
//!
//! The solver minimizes expected cumulative cost under whatever
//! [`StateCost`] it is handed. It never sees ground-truth costs.

use ndarray::{Array2, ArrayView2, Axis};

use crate::cost::{cost_batch_normalize_to, StateCost, DEFAULT_NORM_STD};
use crate::envs::{episode_features, rollout_learner, Env, EnvSpec, LearnerEpisode, Policy};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, ApproximatorParams, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use crate::rng::{self, Rng};
use crate::stats;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RlConfig {
    pub episodes_per_update: usize,
    pub updates_per_iteration: usize,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub entropy_bonus: f64,
    pub warm_start: bool,
    /// Value-net regression steps per update.
    pub value_steps: usize,
    pub policy_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    pub init_log_std: f64,
    /// Rescale each update batch of costs (mean 0, std `norm_std`).
    pub normalize: bool,
    pub norm_std: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            episodes_per_update: 16,
            updates_per_iteration: 10,
            policy_lr: 1e-2,
            value_lr: 1e-2,
            entropy_bonus: 1e-3,
            warm_start: true,
            value_steps: 10,
            policy_hidden: vec![64],
            value_hidden: vec![64],
            init_log_std: (0.5f64).ln(),
            normalize: true,
            norm_std: DEFAULT_NORM_STD,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes_per_update == 0 || self.updates_per_iteration == 0 || self.value_steps == 0 {
            return Err(Error::Config("rl episode, update and value-step counts must be positive".into()));
        }
        for (name, v) in [("rl.policy_lr", self.policy_lr), ("rl.value_lr", self.value_lr), ("cost.norm_std", self.norm_std)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.entropy_bonus >= 0.0) {
            return Err(Error::Config("rl.entropy_bonus must be ≥ 0".into()));
        }
        if !self.init_log_std.is_finite() {
            return Err(Error::Config("rl.init_log_std must be finite".into()));
        }
        Ok(())
    }
}

/// Score-function gradient of `E[w · ...]` for a diagonal Gaussian.
///
/// Rows of `means` and `actions` pair up with `weights`. Returns the
/// per-row gradient of `(1/n) Σ w_i log π(a_i)` with respect to each row's
/// mean, and the same objective's gradient with respect to `log_std`.
pub fn likelihood_ratio_grad(
    means: ArrayView2<f64>,
    log_std: &[f64],
    actions: ArrayView2<f64>,
    weights: &[f64],
) -> Result<(Array2<f64>, Vec<f64>)> {
    let (n, d) = means.dim();
    if actions.dim() != (n, d) || weights.len() != n || log_std.len() != d {
        return Err(Error::Shape(format!(
            "means {:?}, actions {:?}, {} weights, {} log-stds",
            means.dim(),
            actions.dim(),
            weights.len(),
            log_std.len()
        )));
    }
    if n == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    let inv_var: Vec<f64> = log_std.iter().map(|l| (-2.0 * l).exp()).collect();
    let mut d_mean = Array2::zeros((n, d));
    let mut d_log_std = vec![0.0; d];
    let scale = 1.0 / n as f64;
    for i in 0..n {
        let w = weights[i] * scale;
        for j in 0..d {
            let r = actions[[i, j]] - means[[i, j]];
            d_mean[[i, j]] = w * r * inv_var[j];
            d_log_std[j] += w * (r * r * inv_var[j] - 1.0);
        }
    }
    Ok((d_mean, d_log_std))
}

/// Plain Adam over a flat vector.
#[derive(Debug, Clone, PartialEq)]
struct VecAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
}

impl VecAdam {
    fn new(n: usize, lr: f64) -> VecAdam {
        VecAdam { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }

    fn step(&mut self, p: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powf(self.t as f64);
        let c2 = 1.0 - ADAM_BETA2.powf(self.t as f64);
        for i in 0..p.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            p[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Summary of one call to [`PgSolver::solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct RlStats {
    /// Mean per-step cost (before batch normalization) of the last update batch.
    pub cost_mean: f64,
    pub value_loss: f64,
    pub env_steps: usize,
}

/// Policy-gradient learner whose optimizer and baseline persist across calls.
#[derive(Debug, Clone)]
pub struct PgSolver {
    pub policy: Policy,
    pub value: ApproximatorParams,
    cfg: RlConfig,
    policy_opt: OptimizerState,
    log_std_opt: VecAdam,
    value_opt: OptimizerState,
    initial: Policy,
}

impl PgSolver {
    pub fn new(policy: Policy, spec: &EnvSpec, cfg: RlConfig, seed: u64) -> Result<PgSolver> {
        cfg.validate()?;
        let net = policy
            .net()
            .ok_or_else(|| Error::Config("policy search needs a network policy".into()))?;
        if net.input_dim() != spec.state_dim || net.output_dim() != spec.action_dim {
            return Err(Error::Shape(format!(
                "policy maps {} → {}, environment is {} → {}",
                net.input_dim(),
                net.output_dim(),
                spec.state_dim,
                spec.action_dim
            )));
        }
        let policy_opt = OptimizerState::new(net, cfg.policy_lr);
        let log_std_opt = VecAdam::new(policy.action_dim(), cfg.policy_lr);
        let mut sizes = vec![spec.state_dim + 1];
        sizes.extend_from_slice(&cfg.value_hidden);
        sizes.push(1);
        let mut value = nn::init_params(&sizes, 0, Activation::Relu, seed ^ 0x5A5A)?;
        let last = value.n_layers() - 1;
        value.layer_weights[last].fill(0.0);
        let value_opt = OptimizerState::new(&value, cfg.value_lr);
        Ok(PgSolver { initial: policy.clone(), policy, value, cfg, policy_opt, log_std_opt, value_opt })
    }

    /// Fresh learner policy plus solver for `spec`.
    pub fn fresh(spec: &EnvSpec, cfg: RlConfig, seed: u64) -> Result<PgSolver> {
        let policy = Policy::gaussian_net(spec, &cfg.policy_hidden, cfg.init_log_std, seed)?;
        PgSolver::new(policy, spec, cfg, seed)
    }

    pub fn config(&self) -> &RlConfig {
        &self.cfg
    }

    /// Runs `updates_per_iteration` updates against `cost`. Without warm
    /// starting, the policy and optimizers first reset to their initial state.
    pub fn solve(&mut self, env: &mut Env, cost: &dyn StateCost, state_action: bool, rng: &mut Rng) -> Result<RlStats> {
        if !self.cfg.warm_start {
            self.policy = self.initial.clone();
            self.policy_opt = OptimizerState::new(self.policy.net().expect("network policy"), self.cfg.policy_lr);
            self.log_std_opt = VecAdam::new(self.policy.action_dim(), self.cfg.policy_lr);
        }
        let mut stats = RlStats { cost_mean: 0.0, value_loss: 0.0, env_steps: 0 };
        for u in 0..self.cfg.updates_per_iteration {
            stats = self.update(env, cost, state_action, rng).map_err(|e| e.at_iteration(u))?;
        }
        Ok(stats)
    }

    fn update(&mut self, env: &mut Env, cost: &dyn StateCost, state_action: bool, rng: &mut Rng) -> Result<RlStats> {
        let h = env.horizon();
        let e = self.cfg.episodes_per_update;
        let episodes = (0..e).map(|_| rollout_learner(env, &self.policy, rng)).collect::<Result<Vec<LearnerEpisode>>>()?;
        let features = episode_features(&episodes, state_action);
        let raw_costs = cost.costs(features.view(), rng)?;
        if raw_costs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numeric("cost function returned a non-finite value".into()));
        }
        let cost_mean = stats::mean(&raw_costs);
        let costs = if self.cfg.normalize {
            cost_batch_normalize_to(&raw_costs, self.cfg.norm_std)?
        } else {
            raw_costs
        };

        // returns-to-go per episode
        let mut togo = vec![0.0; e * h];
        for ep in 0..e {
            let mut acc = 0.0;
            for t in (0..h).rev() {
                acc += costs[ep * h + t];
                togo[ep * h + t] = acc;
            }
        }

        let d = env.spec().state_dim;
        let mut states = Array2::zeros((e * h, d));
        let mut value_in = Array2::zeros((e * h, d + 1));
        let mut actions = Array2::zeros((e * h, self.policy.action_dim()));
        for (ep, episode) in episodes.iter().enumerate() {
            for t in 0..h {
                let row = ep * h + t;
                for j in 0..d {
                    states[[row, j]] = episode.states[t][j];
                    value_in[[row, j]] = episode.states[t][j];
                }
                value_in[[row, d]] = t as f64 / h as f64;
                for (j, a) in episode.raw_actions[t].iter().enumerate() {
                    actions[[row, j]] = *a;
                }
            }
        }

        let baseline = self.value.forward_batch(value_in.view(), &[])?;
        let mut adv: Vec<f64> = togo.iter().zip(baseline.iter()).map(|(g, b)| g - b).collect();
        let (m, _) = stats::mean_and_stderr(&adv);
        let sd = (adv.iter().map(|a| (a - m).powi(2)).sum::<f64>() / adv.len() as f64).sqrt();
        if sd > 1e-8 {
            adv.iter_mut().for_each(|a| *a = (*a - m) / sd);
        } else {
            adv.iter_mut().for_each(|a| *a = 0.0);
        }

        // Minimizing cost: descend on E[A log π] minus the entropy bonus.
        let net = self.policy.net().expect("network policy");
        let (means, cache) = net.forward_cached(states.view(), &[])?;
        let (d_mean, mut d_log_std) = likelihood_ratio_grad(means.view(), &self.policy.log_std, actions.view(), &adv)?;
        for g in d_log_std.iter_mut() {
            *g -= self.cfg.entropy_bonus;
        }
        let grads = net.backward(&cache, d_mean.view());
        if !grads.is_finite() || d_log_std.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("policy gradient is not finite".into()));
        }
        let net = self.policy.net_mut().expect("network policy");
        self.policy_opt.step(net, &grads);
        self.log_std_opt.step(&mut self.policy.log_std, &d_log_std);
        for l in self.policy.log_std.iter_mut() {
            *l = l.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }

        let targets = ndarray::Array1::from(togo).insert_axis(Axis(1));
        let mut value_loss = 0.0;
        for _ in 0..self.cfg.value_steps {
            let (loss, g) = nn::sq_loss_grad_batch(&self.value, value_in.view(), &[], targets.view())?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("value loss is {loss}")));
            }
            value_loss = loss;
            self.value_opt.step(&mut self.value, &g);
        }
        Ok(RlStats { cost_mean, value_loss, env_steps: e * h })
    }
}

/// One-shot best response starting from `pi_init` with fresh optimizers.
pub fn rl_solve(
    env: &mut Env,
    cost: &dyn StateCost,
    state_action: bool,
    pi_init: &Policy,
    cfg: &RlConfig,
    rng: &mut Rng,
) -> Result<Policy> {
    let seed = rng::normal(rng).to_bits();
    let mut solver = PgSolver::new(pi_init.clone(), env.spec(), cfg.clone(), seed)?;
    solver.solve(env, cost, state_action, rng)?;
    Ok(solver.policy)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueEstimate {
    pub mean: f64,
    /// Sample variance of the episodic cost; 0 when only one episode ran.
    pub variance: f64,
    /// False when `variance` is a placeholder (a single episode).
    pub variance_defined: bool,
    pub n_episodes: usize,
}

/// Empirical mean and variance of the episodic cumulative cost under `cost`.
pub fn policy_value(
    env: &mut Env,
    policy: &Policy,
    cost: &dyn StateCost,
    state_action: bool,
    n_episodes: usize,
    rng: &mut Rng,
) -> Result<ValueEstimate> {
    if n_episodes == 0 {
        return Err(Error::Argument("need at least one episode".into()));
    }
    let h = env.horizon();
    let mut totals = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let ep = rollout_learner(env, policy, rng)?;
        let c = cost.costs(episode_features(std::slice::from_ref(&ep), state_action).view(), rng)?;
        debug_assert_eq!(c.len(), h);
        totals.push(c.iter().sum::<f64>());
    }
    let defined = n_episodes > 1;
    Ok(ValueEstimate {
        mean: stats::mean(&totals),
        variance: if defined { stats::variance(&totals) } else { 0.0 },
        variance_defined: defined,
        n_episodes,
    })
}

//! The outer imitation loop and its two baselines.
//!
//! Each SMILING iteration:
//! 1. roll out `π^(k-1)` and append the visited states to the buffer,
//! 2. one score-matching update of the learner score `g^(k)` on the whole buffer,
//! 3. freeze `(g^e, g^(k))` into a cost and improve the policy against it,
//! 4. evaluate `π^(k)` and the uniform mixture of `π^(1..k)` on the true cost.
//!
//! DAC-lite runs the same loop with a logistic discriminator in place of the
//! learner score. BC fits the expert's actions directly.

use std::fmt;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;

use crate::cost::{CostFn, StateCost, DEFAULT_COST_MC};
use crate::diffusion::DiffusionSchedule;
use crate::divergence::DsEstimate;
use crate::envs::{
    episode_features, evaluate, expert_policy, make_env, normalized_return, random_policy, rollout_learner, Actor,
    Demonstrations, Env, EnvSpec, Policy,
};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, ApproximatorParams, OptimizerState};
use crate::rl::{likelihood_ratio_grad, PgSolver, RlConfig};
use crate::rng::{self, Rng};
use crate::score::ScoreModel;
use crate::scorematch::{pretrain_expert, ScoreTrainConfig, ScoreTrainer, StateBuffer};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Smiling,
    Bc,
    DacLite,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Smiling => "smiling",
            Method::Bc => "bc",
            Method::DacLite => "dac_lite",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        match s {
            "smiling" => Ok(Method::Smiling),
            "bc" => Ok(Method::Bc),
            "dac_lite" => Ok(Method::DacLite),
            other => Err(Error::Config(format!("unknown method '{other}' (expected smiling, bc or dac_lite)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmilingConfig {
    pub env: EnvSpec,
    pub schedule: DiffusionSchedule,
    /// Training of `g^e` on the demonstrations.
    pub expert_score: ScoreTrainConfig,
    /// Per-iteration update of the learner score (or discriminator).
    pub learner_score: ScoreTrainConfig,
    pub rl: RlConfig,
    /// Outer iterations `K`.
    pub iterations: usize,
    /// Episodes of `π^(k-1)` appended to the buffer per iteration.
    pub rollouts_per_iteration: usize,
    pub cost_n_mc: usize,
    pub state_action: bool,
    /// Linear score networks and discriminator (no hidden layer).
    pub linear_mode: bool,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl SmilingConfig {
    pub fn new(env: EnvSpec) -> SmilingConfig {
        SmilingConfig {
            env,
            schedule: DiffusionSchedule::default(),
            expert_score: ScoreTrainConfig { epochs: 20, ..ScoreTrainConfig::default() },
            learner_score: ScoreTrainConfig { samples_per_update: 20_000, ..ScoreTrainConfig::default() },
            rl: RlConfig::default(),
            iterations: 12,
            rollouts_per_iteration: 8,
            cost_n_mc: DEFAULT_COST_MC,
            state_action: false,
            linear_mode: false,
            eval_episodes: 50,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.expert_score.validate()?;
        self.learner_score.validate()?;
        self.rl.validate()?;
        if self.iterations == 0 {
            return Err(Error::Config("run.iterations must be at least 1".into()));
        }
        if self.rollouts_per_iteration == 0 || self.eval_episodes == 0 || self.cost_n_mc == 0 {
            return Err(Error::Config("rollout, evaluation and Monte-Carlo counts must be positive".into()));
        }
        Ok(())
    }

    /// Width of the rows the diffusion model sees.
    pub fn feature_dim(&self) -> usize {
        self.env.state_dim + if self.state_action { self.env.action_dim } else { 0 }
    }

    fn score_arch(&self, base: &ScoreTrainConfig) -> ScoreTrainConfig {
        if self.linear_mode {
            ScoreTrainConfig { hidden: Vec::new(), activation: Activation::Identity, ..base.clone() }
        } else {
            base.clone()
        }
    }
}

/// Plays one uniformly chosen member for a whole episode.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePolicy {
    members: Vec<Policy>,
}

pub fn mixture_policy(policies: Vec<Policy>) -> Result<MixturePolicy> {
    if policies.is_empty() {
        return Err(Error::Argument("a mixture needs at least one policy".into()));
    }
    Ok(MixturePolicy { members: policies })
}

impl MixturePolicy {
    pub fn members(&self) -> &[Policy] {
        &self.members
    }

    pub fn push(&mut self, p: Policy) {
        self.members.push(p);
    }

    /// Draws the member index for a new episode. A single member consumes no
    /// randomness.
    pub fn select(&self, rng: &mut Rng) -> usize {
        if self.members.len() == 1 {
            0
        } else {
            rng.random_range(0..self.members.len())
        }
    }
}

impl Actor for MixturePolicy {
    fn episode_policy(&self, rng: &mut Rng) -> &Policy {
        &self.members[self.select(rng)]
    }
}

/// Metrics of one outer iteration (or one BC checkpoint).
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    /// Cumulative environment steps used for learning (evaluation excluded).
    pub env_steps: usize,
    pub norm_return_current: f64,
    pub norm_return_mixture: f64,
    /// Mean imitation cost over the states collected this iteration.
    pub ds: DsEstimate,
    pub score_loss: f64,
    pub rl_cost_mean: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub records: Vec<IterationRecord>,
    pub final_policy: Policy,
    pub mixture: Option<MixturePolicy>,
    /// Final current-policy return; for BC the best checkpoint's.
    pub headline_return: f64,
    pub expert_cost: f64,
    pub random_cost: f64,
    pub wall_clock_secs: f64,
    pub config_digest: String,
}

pub const CSV_HEADER: &str =
    "iter,env_steps,norm_return_current,norm_return_mixture,ds_value,ds_stderr,score_loss,rl_cost_mean,seed,config_digest";

impl RunResult {
    /// One line per record under [`CSV_HEADER`]. Wall-clock time is left out
    /// so identical runs give identical bytes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.iter,
                r.env_steps,
                r.norm_return_current,
                r.norm_return_mixture,
                r.ds.value,
                r.ds.std_error,
                r.score_loss,
                r.rl_cost_mean,
                self.seed,
                self.config_digest
            ));
        }
        out
    }
}

/// True-cost evaluation against fixed expert and random references.
struct Evaluator {
    env: Env,
    rng: Rng,
    episodes: usize,
    expert_cost: f64,
    random_cost: f64,
}

impl Evaluator {
    fn new(spec: &EnvSpec, episodes: usize, seed: u64) -> Result<Evaluator> {
        let mut env = make_env(&spec.clone().with_seed(seed ^ 0xE7A1))?;
        let mut rng = rng::stream(seed, 7);
        let (expert_cost, _) = evaluate(&mut env, &expert_policy(spec), episodes, &mut rng)?;
        let (random_cost, _) = evaluate(&mut env, &random_policy(spec), episodes, &mut rng)?;
        Ok(Evaluator { env, rng, episodes, expert_cost, random_cost })
    }

    fn normalized<A: Actor + ?Sized>(&mut self, actor: &A) -> Result<f64> {
        let (c, _) = evaluate(&mut self.env, actor, self.episodes, &mut self.rng)?;
        normalized_return(-c, -self.expert_cost, -self.random_cost)
    }
}

fn check_demos(cfg: &SmilingConfig, demos: &Demonstrations) -> Result<Array2<f64>> {
    if demos.env != cfg.env.kind {
        return Err(Error::Config(format!("demonstrations are for {}, config is for {}", demos.env, cfg.env.kind)));
    }
    // state-only mode never touches expert actions
    let feats = if cfg.state_action { demos.features(true)? } else { demos.strip_actions().features(false)? };
    if feats.ncols() != cfg.feature_dim() {
        return Err(Error::Shape(format!("demonstrations have {} columns, expected {}", feats.ncols(), cfg.feature_dim())));
    }
    if feats.nrows() < 2 {
        return Err(Error::Config("need at least two demonstration states".into()));
    }
    Ok(feats)
}

/// Learned per-iteration cost model for the adversarial-style loop.
trait LearnerModel {
    /// Updates on the aggregated buffer; returns the held-out / training loss.
    fn update(&mut self, buffer: &StateBuffer, rng: &mut Rng) -> Result<f64>;
    fn cost(&self) -> Box<dyn StateCost + '_>;
}

struct ScoreLearner {
    g_expert: ScoreModel,
    trainer: ScoreTrainer,
    schedule: DiffusionSchedule,
    n_mc: usize,
}

impl LearnerModel for ScoreLearner {
    fn update(&mut self, buffer: &StateBuffer, rng: &mut Rng) -> Result<f64> {
        let epochs = self.trainer.config().epochs;
        let report = self.trainer.train(buffer.states(), &self.schedule, epochs, false, rng)?;
        Ok(report.final_eval_loss)
    }

    fn cost(&self) -> Box<dyn StateCost + '_> {
        Box::new(
            CostFn::new(&self.g_expert, &self.trainer.model, self.schedule.clone(), self.n_mc)
                .expect("dimensions checked at construction"),
        )
    }
}

/// Logistic discriminator `D(s) = σ(f(s))`, expert labelled 1.
pub struct Discriminator {
    pub params: ApproximatorParams,
    opt: OptimizerState,
    expert: Array2<f64>,
    cfg: ScoreTrainConfig,
}

impl Discriminator {
    pub fn new(expert: Array2<f64>, cfg: ScoreTrainConfig, seed: u64) -> Result<Discriminator> {
        cfg.validate()?;
        let mut sizes = vec![expert.ncols()];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(1);
        let params = nn::init_params(&sizes, 0, cfg.activation, seed)?;
        let opt = OptimizerState::new(&params, cfg.learning_rate);
        Ok(Discriminator { params, opt, expert, cfg })
    }

    /// Binary cross-entropy steps, half expert and half learner rows per
    /// minibatch. Returns the mean loss of the last pass.
    pub fn train(&mut self, learner: ArrayView2<f64>, rng: &mut Rng) -> Result<f64> {
        if learner.nrows() == 0 {
            return Err(Error::Argument("no learner states for the discriminator".into()));
        }
        let half = (self.cfg.batch_size / 2).max(1);
        let steps = self.cfg.samples_per_update.div_ceil(self.cfg.batch_size).max(1);
        let mut last = 0.0;
        for _ in 0..self.cfg.epochs {
            let mut sum = 0.0;
            for _ in 0..steps {
                let e_rows: Vec<usize> = (0..half).map(|_| rng.random_range(0..self.expert.nrows())).collect();
                let l_rows: Vec<usize> = (0..half).map(|_| rng.random_range(0..learner.nrows())).collect();
                let xs = ndarray::concatenate(
                    ndarray::Axis(0),
                    &[self.expert.select(ndarray::Axis(0), &e_rows).view(), learner.select(ndarray::Axis(0), &l_rows).view()],
                )
                .expect("same width");
                let (logits, cache) = self.params.forward_cached(xs.view(), &[])?;
                let n = xs.nrows() as f64;
                let mut d_out = Array2::zeros((xs.nrows(), 1));
                let mut loss = 0.0;
                for i in 0..xs.nrows() {
                    let z = logits[[i, 0]];
                    let y = if i < half { 1.0 } else { 0.0 };
                    // softplus(z) − y z, computed stably
                    loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
                    d_out[[i, 0]] = (sigmoid(z) - y) / n;
                }
                loss /= n;
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!("discriminator loss is {loss}")));
                }
                let grads = self.params.backward(&cache, d_out.view());
                self.opt.step(&mut self.params, &grads);
                sum += loss;
            }
            last = sum / steps as f64;
        }
        Ok(last)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 − D(s)) − log D(s)`, which is minus the discriminator logit.
#[derive(Debug, Clone)]
pub struct DiscriminatorCost<'a> {
    pub params: &'a ApproximatorParams,
}

impl StateCost for DiscriminatorCost<'_> {
    fn costs(&self, features: ArrayView2<f64>, _rng: &mut Rng) -> Result<Vec<f64>> {
        let out = self.params.forward_batch(features, &[])?;
        let c: Vec<f64> = out.iter().map(|z| -z).collect();
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("discriminator produced a non-finite value".into()));
        }
        Ok(c)
    }
}

struct DacLearner {
    disc: Discriminator,
}

impl LearnerModel for DacLearner {
    fn update(&mut self, buffer: &StateBuffer, rng: &mut Rng) -> Result<f64> {
        self.disc.train(buffer.states(), rng)
    }

    fn cost(&self) -> Box<dyn StateCost + '_> {
        Box::new(DiscriminatorCost { params: &self.disc.params })
    }
}

/// Algorithm loop shared by SMILING and DAC-lite.
fn interactive_loop(
    cfg: &SmilingConfig,
    method: Method,
    learner: &mut dyn LearnerModel,
    started: Instant,
) -> Result<RunResult> {
    let seed = cfg.seed;
    let mut env = make_env(&cfg.env.clone().with_seed(seed))?;
    let mut eval = Evaluator::new(&cfg.env, cfg.eval_episodes, seed)?;
    let mut solver = PgSolver::fresh(&cfg.env, cfg.rl.clone(), rng::stream(seed, 3).random())?;
    let mut rollout_rng = rng::stream(seed, 4);
    let mut model_rng = rng::stream(seed, 5);
    let mut cost_rng = rng::stream(seed, 6);
    let mut buffer = StateBuffer::new(cfg.feature_dim());
    let mut mixture: Option<MixturePolicy> = None;
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut env_steps = 0;

    for k in 1..=cfg.iterations {
        let episodes = (0..cfg.rollouts_per_iteration)
            .map(|_| rollout_learner(&mut env, &solver.policy, &mut rollout_rng))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.at_iteration(k))?;
        env_steps += cfg.rollouts_per_iteration * cfg.env.horizon;
        let new_rows = episode_features(&episodes, cfg.state_action);
        buffer.append(new_rows.view()).map_err(|e| e.at_iteration(k))?;

        let score_loss = learner.update(&buffer, &mut model_rng).map_err(|e| e.at_iteration(k))?;
        let cost = learner.cost();
        let ds_terms = cost.costs(new_rows.view(), &mut cost_rng).map_err(|e| e.at_iteration(k))?;
        let (ds_value, ds_se) = stats::mean_and_stderr(&ds_terms);

        let rl = solver
            .solve(&mut env, cost.as_ref(), cfg.state_action, &mut rollout_rng)
            .map_err(|e| e.at_iteration(k))?;
        drop(cost);
        env_steps += cfg.rl.updates_per_iteration * rl.env_steps;

        match mixture.as_mut() {
            Some(m) => m.push(solver.policy.clone()),
            None => mixture = Some(mixture_policy(vec![solver.policy.clone()])?),
        }
        let norm_current = eval.normalized(&solver.policy)?;
        let norm_mixture = eval.normalized(mixture.as_ref().expect("just set"))?;
        records.push(IterationRecord {
            iter: k,
            env_steps,
            norm_return_current: norm_current,
            norm_return_mixture: norm_mixture,
            ds: DsEstimate { value: ds_value, std_error: ds_se, n_mc: cfg.cost_n_mc },
            score_loss,
            rl_cost_mean: rl.cost_mean,
        });
    }
    let headline_return = records.last().expect("K ≥ 1").norm_return_current;
    Ok(RunResult {
        method,
        seed,
        records,
        final_policy: solver.policy,
        mixture,
        headline_return,
        expert_cost: eval.expert_cost,
        random_cost: eval.random_cost,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        config_digest: String::new(),
    })
}

/// Pretrains `g^e` on the demonstrations and runs `K` SMILING iterations.
pub fn smiling_run(cfg: &SmilingConfig, demos: &Demonstrations) -> Result<RunResult> {
    let started = Instant::now();
    cfg.validate()?;
    let expert_rows = check_demos(cfg, demos)?;
    let expert_cfg = cfg.score_arch(&cfg.expert_score);
    let (g_expert, _) = pretrain_expert(expert_rows.view(), &cfg.schedule, &expert_cfg, rng::stream(cfg.seed, 1).random())?;
    let learner_cfg = cfg.score_arch(&cfg.learner_score);
    let trainer = ScoreTrainer::fresh(cfg.feature_dim(), &cfg.schedule, learner_cfg, rng::stream(cfg.seed, 2).random())?;
    let mut learner = ScoreLearner {
        g_expert,
        trainer,
        schedule: cfg.schedule.clone(),
        n_mc: cfg.cost_n_mc,
    };
    interactive_loop(cfg, Method::Smiling, &mut learner, started)
}

/// The same loop with a logistic discriminator (same architecture as the
/// learner score network, minus the time embedding).
pub fn dac_lite_run(cfg: &SmilingConfig, demos: &Demonstrations) -> Result<RunResult> {
    let started = Instant::now();
    cfg.validate()?;
    let expert_rows = check_demos(cfg, demos)?;
    let disc_cfg = cfg.score_arch(&cfg.learner_score);
    let disc = Discriminator::new(expert_rows, disc_cfg, rng::stream(cfg.seed, 2).random())?;
    let mut learner = DacLearner { disc };
    interactive_loop(cfg, Method::DacLite, &mut learner, started)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Evaluate every this many epochs (and after the last).
    pub eval_every: usize,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig { epochs: 500, learning_rate: 5e-3, eval_every: 50 }
    }
}

/// Gaussian maximum-likelihood fit of expert actions; reports the best
/// checkpoint. `cfg.rl` supplies the policy architecture and initial std.
pub fn bc_run(cfg: &SmilingConfig, bc: &BcConfig, demos: &Demonstrations) -> Result<RunResult> {
    let started = Instant::now();
    cfg.validate()?;
    if demos.env != cfg.env.kind {
        return Err(Error::Config(format!("demonstrations are for {}, config is for {}", demos.env, cfg.env.kind)));
    }
    let actions = demos.actions.as_ref().ok_or_else(|| {
        Error::Config("behavior cloning needs state-action demonstrations; these demos are state-only".into())
    })?;
    if bc.eval_every == 0 || !(bc.learning_rate > 0.0) {
        return Err(Error::Config("bc.eval_every and bc.learning_rate must be positive".into()));
    }
    let seed = cfg.seed;
    let mut eval = Evaluator::new(&cfg.env, cfg.eval_episodes, seed)?;
    let mut policy = Policy::gaussian_net(&cfg.env, &cfg.rl.policy_hidden, cfg.rl.init_log_std, rng::stream(seed, 3).random())?;
    let mut opt = OptimizerState::new(policy.net().expect("network policy"), bc.learning_rate);
    let mut std_m = vec![0.0; policy.action_dim()];
    let mut std_v = vec![0.0; policy.action_dim()];
    let ones = vec![1.0; demos.len()];
    let mut records = Vec::new();
    let mut best: Option<(f64, Policy)> = None;
    let mut nll = f64::NAN;

    let mut checkpoint = |epoch: usize, policy: &Policy, nll: f64, records: &mut Vec<IterationRecord>| -> Result<()> {
        let r = eval.normalized(policy)?;
        records.push(IterationRecord {
            iter: epoch,
            env_steps: 0,
            norm_return_current: r,
            norm_return_mixture: r,
            ds: DsEstimate { value: f64::NAN, std_error: f64::NAN, n_mc: 0 },
            score_loss: nll,
            rl_cost_mean: f64::NAN,
        });
        if best.as_ref().is_none_or(|(b, _)| r > *b) {
            best = Some((r, policy.clone()));
        }
        Ok(())
    };

    checkpoint(0, &policy, nll, &mut records)?;
    for epoch in 1..=bc.epochs {
        let net = policy.net().expect("network policy");
        let (means, cache) = net.forward_cached(demos.states.view(), &[])?;
        // gradient of the mean negative log-likelihood
        let (d_mean, d_log_std) = likelihood_ratio_grad(means.view(), &policy.log_std, actions.view(), &ones)?;
        let d_mean = -d_mean;
        let d_log_std: Vec<f64> = d_log_std.iter().map(|g| -g).collect();
        nll = means
            .rows()
            .into_iter()
            .zip(actions.rows())
            .map(|(m, a)| {
                m.iter()
                    .zip(a)
                    .zip(&policy.log_std)
                    .map(|((m, a), l)| 0.5 * ((a - m) * (-l).exp()).powi(2) + l)
                    .sum::<f64>()
            })
            .sum::<f64>()
            / demos.len() as f64;
        if !nll.is_finite() {
            return Err(Error::Diverged(format!("behavior-cloning loss is {nll} at epoch {epoch}")));
        }
        let grads = net.backward(&cache, d_mean.view());
        opt.step(policy.net_mut().expect("network policy"), &grads);
        let t = epoch as f64;
        for j in 0..policy.action_dim() {
            let g = d_log_std[j];
            std_m[j] = nn::ADAM_BETA1 * std_m[j] + (1.0 - nn::ADAM_BETA1) * g;
            std_v[j] = nn::ADAM_BETA2 * std_v[j] + (1.0 - nn::ADAM_BETA2) * g * g;
            let mh = std_m[j] / (1.0 - nn::ADAM_BETA1.powf(t));
            let vh = std_v[j] / (1.0 - nn::ADAM_BETA2.powf(t));
            policy.log_std[j] =
                (policy.log_std[j] - bc.learning_rate * mh / (vh.sqrt() + nn::ADAM_EPS)).clamp(crate::rl::LOG_STD_MIN, crate::rl::LOG_STD_MAX);
        }
        if epoch % bc.eval_every == 0 || epoch == bc.epochs {
            checkpoint(epoch, &policy, nll, &mut records)?;
        }
    }
    let (headline_return, best_policy) = best.expect("checkpoint 0 recorded");
    Ok(RunResult {
        method: Method::Bc,
        seed,
        records,
        final_policy: best_policy,
        mixture: None,
        headline_return,
        expert_cost: eval.expert_cost,
        random_cost: eval.random_cost,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        config_digest: String::new(),
    })
}

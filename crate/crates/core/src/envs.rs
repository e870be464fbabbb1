//! Toy fixed-horizon MDPs with hidden ground-truth costs.
//!
//! * `point_goal`: `s' = s + 0.1·clip(a, [-1,1]²) + σξ`, start `N((-1,-1), 0.01 I)`,
//!   `H = 32`, cost `‖s − (1,1)‖`.
//! * `bimodal_goal`: as `point_goal`, but each episode draws its goal uniformly
//!   from `{(1,1), (1,-1)}`; the goal is not part of the observation.
//! * `expfam_gauss`: one-dimensional direct placement `s' = clip(a, [-4,4]) + σξ`,
//!   start `N(1.5, 0.05²)`, `H = 16`, cost `(s − 1.5)²/2`. Its expert state law
//!   is Gaussian, so the true score is linear in `s`.
//!
//! The learner-facing [`Env`] API (`reset`/`step`) returns observations only.
//! Ground-truth costs appear solely in evaluation [`Trajectory`] records.
//!
//! Visited states of an episode are `s_0 .. s_{H-1}`; the cost of step `h` is
//! `c*(s_h)` and the terminal `s_H` is recorded but never charged.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::Rng as _;

use crate::cost::StateCost;
use crate::error::{Error, Result};
use crate::nn::{self, Activation, ApproximatorParams};
use crate::rng::{self, Rng};
use crate::stats;

pub const POINT_STEP: f64 = 0.1;
pub const EXPFAM_TARGET: f64 = 1.5;
pub const EXPFAM_CLIP: f64 = 4.0;
pub const DEFAULT_DYNAMICS_NOISE: f64 = 0.01;
pub const EXPERT_LOG_STD: f64 = -2.995_732_273_553_991; // ln 0.05

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvKind {
    PointGoal,
    BimodalGoal,
    ExpfamGauss,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::PointGoal => "point_goal",
            EnvKind::BimodalGoal => "bimodal_goal",
            EnvKind::ExpfamGauss => "expfam_gauss",
        }
    }

    pub fn default_horizon(self) -> usize {
        match self {
            EnvKind::PointGoal | EnvKind::BimodalGoal => 32,
            EnvKind::ExpfamGauss => 16,
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            EnvKind::PointGoal | EnvKind::BimodalGoal => 2,
            EnvKind::ExpfamGauss => 1,
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<EnvKind> {
        match s {
            "point_goal" => Ok(EnvKind::PointGoal),
            "bimodal_goal" => Ok(EnvKind::BimodalGoal),
            "expfam_gauss" => Ok(EnvKind::ExpfamGauss),
            other => Err(Error::Config(format!(
                "unknown environment '{other}' (expected point_goal, bimodal_goal or expfam_gauss)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub dynamics_noise: f64,
    pub seed: u64,
}

impl EnvSpec {
    pub fn new(kind: EnvKind) -> EnvSpec {
        EnvSpec {
            kind,
            state_dim: kind.state_dim(),
            action_dim: kind.state_dim(),
            horizon: kind.default_horizon(),
            dynamics_noise: DEFAULT_DYNAMICS_NOISE,
            seed: 0,
        }
    }

    pub fn with_noise(mut self, noise: f64) -> EnvSpec {
        self.dynamics_noise = noise;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> EnvSpec {
        self.seed = seed;
        self
    }

    pub fn with_horizon(mut self, horizon: usize) -> EnvSpec {
        self.horizon = horizon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.state_dim != self.kind.state_dim() || self.action_dim != self.kind.state_dim() {
            return Err(Error::Config(format!(
                "{} has {}-dimensional states and actions",
                self.kind,
                self.kind.state_dim()
            )));
        }
        if !(self.dynamics_noise >= 0.0 && self.dynamics_noise.is_finite()) {
            return Err(Error::Config(format!("dynamics noise must be ≥ 0, got {}", self.dynamics_noise)));
        }
        Ok(())
    }

    /// Box the environment clips actions to.
    pub fn action_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let b = match self.kind {
            EnvKind::PointGoal | EnvKind::BimodalGoal => 1.0,
            EnvKind::ExpfamGauss => EXPFAM_CLIP,
        };
        (vec![-b; self.action_dim], vec![b; self.action_dim])
    }
}

/// A running environment instance. Dynamics noise and initial states come
/// from an internal stream seeded by `spec.seed`.
#[derive(Debug, Clone)]
pub struct Env {
    spec: EnvSpec,
    rng: Rng,
    state: Vec<f64>,
    goal: Vec<f64>,
    steps: usize,
}

pub fn make_env(spec: &EnvSpec) -> Result<Env> {
    spec.validate()?;
    Ok(Env {
        spec: spec.clone(),
        rng: rng::stream(spec.seed, 0xE4),
        state: vec![0.0; spec.state_dim],
        goal: vec![0.0; spec.state_dim],
        steps: 0,
    })
}

impl Env {
    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn horizon(&self) -> usize {
        self.spec.horizon
    }

    /// Starts a new episode and returns `s_0`.
    pub fn reset(&mut self) -> Vec<f64> {
        self.steps = 0;
        match self.spec.kind {
            EnvKind::PointGoal | EnvKind::BimodalGoal => {
                self.state = (0..2).map(|_| -1.0 + 0.1 * rng::normal(&mut self.rng)).collect();
                self.goal = if self.spec.kind == EnvKind::BimodalGoal && self.rng.random_bool(0.5) {
                    vec![1.0, -1.0]
                } else {
                    vec![1.0, 1.0]
                };
            }
            EnvKind::ExpfamGauss => {
                self.state = vec![EXPFAM_TARGET + 0.05 * rng::normal(&mut self.rng)];
                self.goal = vec![EXPFAM_TARGET];
            }
        }
        self.state.clone()
    }

    /// Applies `action` (clipped to the action box) and returns the next state.
    pub fn step(&mut self, action: &[f64]) -> Result<Vec<f64>> {
        if action.len() != self.spec.action_dim {
            return Err(Error::Shape(format!(
                "action has {} entries, expected {}",
                action.len(),
                self.spec.action_dim
            )));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Numeric(format!("non-finite action {action:?}")));
        }
        if self.steps >= self.spec.horizon {
            return Err(Error::Argument("episode is over; call reset".into()));
        }
        let (lo, hi) = self.spec.action_bounds();
        let noise = self.spec.dynamics_noise;
        for (j, s) in self.state.iter_mut().enumerate() {
            let a = action[j].clamp(lo[j], hi[j]);
            let xi = if noise > 0.0 { noise * rng::normal(&mut self.rng) } else { 0.0 };
            *s = match self.spec.kind {
                EnvKind::PointGoal | EnvKind::BimodalGoal => *s + POINT_STEP * a + xi,
                EnvKind::ExpfamGauss => a + xi,
            };
        }
        self.steps += 1;
        Ok(self.state.clone())
    }

    pub(crate) fn goal(&self) -> &[f64] {
        &self.goal
    }

    /// Ground-truth cost `c*(s)` against the current episode's goal.
    pub(crate) fn true_cost(&self, s: &[f64]) -> f64 {
        match self.spec.kind {
            EnvKind::PointGoal | EnvKind::BimodalGoal => {
                s.iter().zip(&self.goal).map(|(x, g)| (x - g).powi(2)).sum::<f64>().sqrt()
            }
            EnvKind::ExpfamGauss => 0.5 * (s[0] - EXPFAM_TARGET).powi(2),
        }
    }

    /// Whether `c*` depends on the state alone (not on a hidden per-episode goal).
    pub fn cost_is_state_function(&self) -> bool {
        self.spec.kind != EnvKind::BimodalGoal
    }
}

/// How a policy turns a state into a mean action.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyMean {
    /// Learned network `s → μ(s)`.
    Net(ApproximatorParams),
    /// Scripted `gain·(goal − s)`, reading the episode goal.
    GoalSeeking { gain: f64 },
    Constant(Vec<f64>),
}

/// Diagonal-Gaussian policy; sampled actions are clipped to the action box.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub mean: PolicyMean,
    pub log_std: Vec<f64>,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
}

impl Policy {
    /// Learner policy with a ReLU mean network `[state, hidden.., action]`.
    pub fn gaussian_net(spec: &EnvSpec, hidden: &[usize], log_std: f64, seed: u64) -> Result<Policy> {
        let mut sizes = vec![spec.state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(spec.action_dim);
        let mut params = nn::init_params(&sizes, 0, Activation::Relu, seed)?;
        // small initial means so an untrained policy starts out unbiased
        let last = params.n_layers() - 1;
        params.layer_weights[last].mapv_inplace(|w| 0.01 * w);
        let (action_low, action_high) = spec.action_bounds();
        Ok(Policy {
            mean: PolicyMean::Net(params),
            log_std: vec![log_std; spec.action_dim],
            action_low,
            action_high,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn net(&self) -> Option<&ApproximatorParams> {
        match &self.mean {
            PolicyMean::Net(p) => Some(p),
            _ => None,
        }
    }

    pub fn net_mut(&mut self) -> Option<&mut ApproximatorParams> {
        match &mut self.mean {
            PolicyMean::Net(p) => Some(p),
            _ => None,
        }
    }

    pub fn mean_action(&self, s: &[f64], goal: &[f64]) -> Result<Vec<f64>> {
        match &self.mean {
            PolicyMean::Net(p) => p.forward(s, 0),
            PolicyMean::GoalSeeking { gain } => Ok(s.iter().zip(goal).map(|(x, g)| gain * (g - x)).collect()),
            PolicyMean::Constant(c) => Ok(c.clone()),
        }
    }

    pub fn clip(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(a, (lo, hi))| a.clamp(*lo, *hi))
            .collect()
    }

    /// Returns `(raw, clipped)`; log-likelihoods refer to the raw sample.
    pub fn sample(&self, s: &[f64], goal: &[f64], rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>)> {
        let mean = self.mean_action(s, goal)?;
        let raw: Vec<f64> = mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| {
                let z = rng::normal(rng);
                if ls.exp() == 0.0 {
                    *m
                } else {
                    m + ls.exp() * z
                }
            })
            .collect();
        if raw.iter().any(|a| !a.is_finite()) {
            return Err(Error::Numeric(format!("policy produced non-finite action {raw:?}")));
        }
        let clipped = self.clip(&raw);
        Ok((raw, clipped))
    }
}

/// Scripted expert: `clip(2(goal − s))` on the goal tasks, `μ* = 1.5` on
/// `expfam_gauss`, with action noise `std = 0.05`.
pub fn expert_policy(spec: &EnvSpec) -> Policy {
    let (action_low, action_high) = spec.action_bounds();
    let mean = match spec.kind {
        EnvKind::PointGoal | EnvKind::BimodalGoal => PolicyMean::GoalSeeking { gain: 2.0 },
        EnvKind::ExpfamGauss => PolicyMean::Constant(vec![EXPFAM_TARGET]),
    };
    Policy { mean, log_std: vec![EXPERT_LOG_STD; spec.action_dim], action_low, action_high }
}

/// Reference "random" policy for return normalization: zero-mean, unit-std
/// actions, clipped.
pub fn random_policy(spec: &EnvSpec) -> Policy {
    let (action_low, action_high) = spec.action_bounds();
    Policy {
        mean: PolicyMean::Constant(vec![0.0; spec.action_dim]),
        log_std: vec![0.0; spec.action_dim],
        action_low,
        action_high,
    }
}

/// Chooses the policy that acts for a whole episode.
pub trait Actor {
    fn episode_policy(&self, rng: &mut Rng) -> &Policy;
}

impl Actor for Policy {
    fn episode_policy(&self, _rng: &mut Rng) -> &Policy {
        self
    }
}

/// Evaluation record of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `s_0 .. s_H`.
    pub states: Vec<Vec<f64>>,
    /// Clipped actions `a_0 .. a_{H-1}`.
    pub actions: Vec<Vec<f64>>,
    /// `c*(s_h)` for `h < H`; never shown to learners.
    pub true_costs: Vec<f64>,
}

impl Trajectory {
    pub fn total_cost(&self) -> f64 {
        self.true_costs.iter().sum()
    }
}

/// What a learner gets to see of an episode: no costs.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerEpisode {
    pub states: Vec<Vec<f64>>,
    pub raw_actions: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

pub fn rollout<A: Actor + ?Sized>(env: &mut Env, actor: &A, rng: &mut Rng) -> Result<Trajectory> {
    let policy = actor.episode_policy(rng);
    let ep = run_episode(env, policy, rng, true)?;
    Ok(Trajectory { states: ep.0.states, actions: ep.0.actions, true_costs: ep.1 })
}

pub fn rollout_learner(env: &mut Env, policy: &Policy, rng: &mut Rng) -> Result<LearnerEpisode> {
    Ok(run_episode(env, policy, rng, false)?.0)
}

fn run_episode(env: &mut Env, policy: &Policy, rng: &mut Rng, with_costs: bool) -> Result<(LearnerEpisode, Vec<f64>)> {
    let h = env.horizon();
    let mut states = Vec::with_capacity(h + 1);
    let mut raw_actions = Vec::with_capacity(h);
    let mut actions = Vec::with_capacity(h);
    let mut costs = Vec::with_capacity(if with_costs { h } else { 0 });
    let mut s = env.reset();
    for _ in 0..h {
        if with_costs {
            costs.push(env.true_cost(&s));
        }
        let (raw, a) = policy.sample(&s, env.goal(), rng)?;
        let next = env.step(&a)?;
        states.push(s);
        raw_actions.push(raw);
        actions.push(a);
        s = next;
    }
    states.push(s);
    Ok((LearnerEpisode { states, raw_actions, actions }, costs))
}

/// Mean and sample variance of the episodic true cost over `n` episodes.
pub fn evaluate<A: Actor + ?Sized>(env: &mut Env, actor: &A, n: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::Argument("need at least one evaluation episode".into()));
    }
    let totals = (0..n).map(|_| rollout(env, actor, rng).map(|t| t.total_cost())).collect::<Result<Vec<_>>>()?;
    Ok((stats::mean(&totals), stats::variance(&totals)))
}

/// Affine rescaling with expert = 1, random = 0. Inputs are average returns
/// (negated episodic costs), so higher is better.
pub fn normalized_return(v_pi: f64, v_expert: f64, v_random: f64) -> Result<f64> {
    let denom = v_expert - v_random;
    if !(denom.abs() > 1e-12) {
        return Err(Error::Argument(format!(
            "expert and random returns coincide ({v_expert} vs {v_random})"
        )));
    }
    Ok((v_pi - v_random) / denom)
}

/// Expert data set: visited states and, optionally, the expert's actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstrations {
    pub env: EnvKind,
    pub states: Array2<f64>,
    pub actions: Option<Array2<f64>>,
}

const DEMO_MAGIC: &[u8; 8] = b"SMLDEM01";

impl Demonstrations {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    /// The same demonstrations without actions.
    pub fn strip_actions(&self) -> Demonstrations {
        Demonstrations { env: self.env, states: self.states.clone(), actions: None }
    }

    /// Rows fed to the diffusion model: states, or `[state, action]` in
    /// state-action mode.
    pub fn features(&self, state_action: bool) -> Result<Array2<f64>> {
        if !state_action {
            return Ok(self.states.clone());
        }
        match &self.actions {
            Some(a) => Ok(concatenate(Axis(1), &[self.states.view(), a.view()]).expect("row counts agree")),
            None => Err(Error::Config("state-action mode needs demonstrations with actions".into())),
        }
    }

    /// Layout (little-endian): magic `SMLDEM01`, u8 name length, env name
    /// bytes, u32 count, u32 state dim, u8 has-actions flag, u32 action dim,
    /// states row-major f64, then actions row-major f64 if present.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(DEMO_MAGIC)?;
        let name = self.env.name().as_bytes();
        out.write_all(&[name.len() as u8])?;
        out.write_all(name)?;
        out.write_all(&(self.states.nrows() as u32).to_le_bytes())?;
        out.write_all(&(self.states.ncols() as u32).to_le_bytes())?;
        out.write_all(&[self.actions.is_some() as u8])?;
        let adim = self.actions.as_ref().map_or(0, |a| a.ncols());
        out.write_all(&(adim as u32).to_le_bytes())?;
        for v in self.states.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        if let Some(a) = &self.actions {
            for v in a.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Demonstrations> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != DEMO_MAGIC {
            return Err(Error::Format("not a demonstration file (bad magic)".into()));
        }
        let mut len = [0u8; 1];
        input.read_exact(&mut len)?;
        let mut name = vec![0u8; len[0] as usize];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("env name is not UTF-8".into()))?;
        let env: EnvKind = name.parse().map_err(|_| Error::Format(format!("unknown env '{name}'")))?;
        let count = nn::read_u32(input)?;
        let dim = nn::read_u32(input)?;
        let mut flag = [0u8; 1];
        input.read_exact(&mut flag)?;
        let adim = nn::read_u32(input)?;
        let states = read_matrix(input, count, dim)?;
        let actions = match flag[0] {
            0 => None,
            1 => Some(read_matrix(input, count, adim)?),
            f => return Err(Error::Format(format!("bad action flag {f}"))),
        };
        Ok(Demonstrations { env, states, actions })
    }
}

fn read_matrix<R: Read>(input: &mut R, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut data = vec![0.0; rows * cols];
    let mut buf = [0u8; 8];
    for v in data.iter_mut() {
        input.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))
}

pub const POLICY_MAGIC: &[u8; 8] = b"SMLPOL01";

/// Writes a network policy: magic, u32 action dim, `log_std` as f64, then
/// the mean network in the network checkpoint format. Action bounds are not
/// stored; they come from the environment on reading.
pub fn write_policy<W: Write>(out: &mut W, policy: &Policy) -> Result<()> {
    let net = policy
        .net()
        .ok_or_else(|| Error::Argument("only network policies can be checkpointed".into()))?;
    out.write_all(POLICY_MAGIC)?;
    out.write_all(&(policy.log_std.len() as u32).to_le_bytes())?;
    for v in &policy.log_std {
        out.write_all(&v.to_le_bytes())?;
    }
    nn::write_params(out, net)
}

pub fn read_policy<R: Read>(input: &mut R, spec: &EnvSpec) -> Result<Policy> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != POLICY_MAGIC {
        return Err(Error::Format("not a policy checkpoint (bad magic)".into()));
    }
    let adim = nn::read_u32(input)?;
    let log_std = read_matrix(input, 1, adim)?.into_raw_vec_and_offset().0;
    let params = nn::read_params(input)?;
    let sizes = params.layer_sizes();
    if adim != spec.action_dim || sizes[0] != spec.state_dim || sizes[sizes.len() - 1] != adim {
        return Err(Error::Shape(format!(
            "checkpoint maps {} states to {} actions, {} needs {} to {}",
            sizes[0], adim, spec.kind, spec.state_dim, spec.action_dim
        )));
    }
    let (action_low, action_high) = spec.action_bounds();
    Ok(Policy { mean: PolicyMean::Net(params), log_std, action_low, action_high })
}

/// Rolls out the scripted expert for `episodes` episodes. Returns the
/// demonstrations and the expert's mean episodic true cost.
pub fn collect_demos(spec: &EnvSpec, episodes: usize, with_actions: bool, seed: u64) -> Result<(Demonstrations, f64)> {
    if episodes == 0 {
        return Err(Error::Config("need at least one demonstration episode".into()));
    }
    let mut env = make_env(&spec.clone().with_seed(seed))?;
    let expert = expert_policy(spec);
    let mut rng = rng::stream(seed, 0xDE);
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut totals = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let traj = rollout(&mut env, &expert, &mut rng)?;
        totals.push(traj.total_cost());
        for h in 0..spec.horizon {
            states.extend_from_slice(&traj.states[h]);
            actions.extend_from_slice(&traj.actions[h]);
        }
    }
    let n = episodes * spec.horizon;
    let states = Array2::from_shape_vec((n, spec.state_dim), states).expect("sizes agree");
    let actions = with_actions.then(|| Array2::from_shape_vec((n, spec.action_dim), actions).expect("sizes agree"));
    Ok((Demonstrations { env: spec.kind, states, actions }, stats::mean(&totals)))
}

/// Flattens visited states (`s_0 .. s_{H-1}`) of several episodes into rows,
/// optionally followed by the clipped actions.
pub fn episode_features(episodes: &[LearnerEpisode], state_action: bool) -> Array2<f64> {
    let mut rows = Vec::new();
    let mut width = 0;
    for ep in episodes {
        for (s, a) in ep.states.iter().zip(&ep.actions) {
            rows.extend_from_slice(s);
            width = s.len();
            if state_action {
                rows.extend_from_slice(a);
                width = s.len() + a.len();
            }
        }
    }
    if width == 0 {
        return Array2::zeros((0, 0));
    }
    let n = rows.len() / width;
    Array2::from_shape_vec((n, width), rows).expect("uniform widths")
}

/// The ground-truth cost packaged as a [`StateCost`], for oracle experiments
/// and evaluation. Only available where `c*` is a function of the state.
/// Extra feature columns (actions) are ignored.
#[derive(Debug, Clone)]
pub struct TrueCostOracle {
    env: Env,
}

impl TrueCostOracle {
    pub fn new(spec: &EnvSpec) -> Result<TrueCostOracle> {
        let mut env = make_env(spec)?;
        if !env.cost_is_state_function() {
            return Err(Error::Config(format!("{} has no state-only cost oracle", spec.kind)));
        }
        env.reset();
        Ok(TrueCostOracle { env })
    }
}

impl StateCost for TrueCostOracle {
    fn costs(&self, features: ArrayView2<f64>, _rng: &mut Rng) -> Result<Vec<f64>> {
        let d = self.env.spec.state_dim;
        if features.ncols() < d {
            return Err(Error::Shape(format!("oracle needs {d} state columns, got {}", features.ncols())));
        }
        Ok(features.rows().into_iter().map(|r| self.env.true_cost(&r.to_vec()[..d])).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_checkpoint_round_trips() {
        let spec = EnvSpec::new(EnvKind::PointGoal);
        let p = Policy::gaussian_net(&spec, &[8], -1.25, 4).unwrap();
        let mut buf = Vec::new();
        write_policy(&mut buf, &p).unwrap();
        assert_eq!(read_policy(&mut buf.as_slice(), &spec).unwrap(), p);
        let other = EnvSpec::new(EnvKind::ExpfamGauss);
        assert!(matches!(read_policy(&mut buf.as_slice(), &other), Err(Error::Shape(_))));
        assert!(matches!(write_policy(&mut Vec::new(), &expert_policy(&spec)), Err(Error::Argument(_))));
        buf[0] = b'X';
        assert!(matches!(read_policy(&mut buf.as_slice(), &spec), Err(Error::Format(_))));
    }

    #[test]
    fn point_goal_step_is_deterministic_without_noise() {
        let spec = EnvSpec::new(EnvKind::PointGoal).with_noise(0.0);
        let mut env = make_env(&spec).unwrap();
        env.reset();
        env.state = vec![0.0, 0.0];
        let s = env.step(&[1.0, 1.0]).unwrap();
        assert_eq!(s, vec![0.1, 0.1]);
        // clipped to the unit box
        let s = env.step(&[5.0, -5.0]).unwrap();
        assert!((s[0] - 0.2).abs() < 1e-15 && s[1].abs() < 1e-15);
    }

    #[test]
    fn unknown_env_name_is_a_config_error() {
        assert!(matches!("cartpole".parse::<EnvKind>(), Err(Error::Config(_))));
        for k in [EnvKind::PointGoal, EnvKind::BimodalGoal, EnvKind::ExpfamGauss] {
            assert_eq!(k.name().parse::<EnvKind>().unwrap(), k);
        }
    }

    #[test]
    fn step_rejects_bad_actions() {
        let spec = EnvSpec::new(EnvKind::PointGoal);
        let mut env = make_env(&spec).unwrap();
        env.reset();
        assert!(matches!(env.step(&[f64::NAN, 0.0]), Err(Error::Numeric(_))));
        assert!(matches!(env.step(&[0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn bimodal_goals_split_evenly() {
        let spec = EnvSpec::new(EnvKind::BimodalGoal).with_seed(3);
        let mut env = make_env(&spec).unwrap();
        let n = 10_000;
        let up = (0..n)
            .filter(|_| {
                env.reset();
                env.goal()[1] > 0.0
            })
            .count();
        let frac = up as f64 / n as f64;
        assert!(frac > 0.47 && frac < 0.53, "{frac}");
    }

    #[test]
    fn horizon_one_rollout_lengths() {
        let spec = EnvSpec::new(EnvKind::PointGoal).with_horizon(1);
        let mut env = make_env(&spec).unwrap();
        let t = rollout(&mut env, &expert_policy(&spec), &mut rng::seeded(0)).unwrap();
        assert_eq!(t.states.len(), 2);
        assert_eq!(t.actions.len(), 1);
        assert_eq!(t.true_costs.len(), 1);
    }

    #[test]
    fn every_episode_has_full_length() {
        for kind in [EnvKind::PointGoal, EnvKind::BimodalGoal, EnvKind::ExpfamGauss] {
            let spec = EnvSpec::new(kind);
            let mut env = make_env(&spec).unwrap();
            let mut r = rng::seeded(1);
            for _ in 0..5 {
                let t = rollout(&mut env, &random_policy(&spec), &mut r).unwrap();
                assert_eq!(t.actions.len(), spec.horizon);
                assert_eq!(t.states.len(), spec.horizon + 1);
            }
        }
    }

    #[test]
    fn actions_stay_in_the_clip_box() {
        let spec = EnvSpec::new(EnvKind::ExpfamGauss);
        let mut p = random_policy(&spec);
        p.log_std = vec![3.0];
        let mut env = make_env(&spec).unwrap();
        let t = rollout(&mut env, &p, &mut rng::seeded(2)).unwrap();
        assert!(t.actions.iter().all(|a| a[0].abs() <= EXPFAM_CLIP));
    }

    #[test]
    fn point_goal_expert_reaches_goal() {
        let spec = EnvSpec::new(EnvKind::PointGoal).with_noise(0.0);
        let mut env = make_env(&spec).unwrap();
        env.reset();
        env.state = vec![-1.0, -1.0];
        let mut expert = expert_policy(&spec);
        expert.log_std = vec![f64::NEG_INFINITY; 2];
        let mut s = env.state.clone();
        for _ in 0..spec.horizon {
            let (_, a) = expert.sample(&s, env.goal(), &mut rng::seeded(0)).unwrap();
            s = env.step(&a).unwrap();
        }
        let dist = ((s[0] - 1.0).powi(2) + (s[1] - 1.0).powi(2)).sqrt();
        assert!(dist < 0.05, "final distance {dist}");
    }

    #[test]
    fn expert_beats_zero_action_policy() {
        let spec = EnvSpec::new(EnvKind::PointGoal);
        let zero = Policy { log_std: vec![f64::NEG_INFINITY; 2], ..random_policy(&spec) };
        let (expert_cost, _) = evaluate(&mut make_env(&spec).unwrap(), &expert_policy(&spec), 200, &mut rng::seeded(1)).unwrap();
        let (zero_cost, _) = evaluate(&mut make_env(&spec).unwrap(), &zero, 200, &mut rng::seeded(1)).unwrap();
        // distance 2√2 at speed ≤ 0.1√2 per step bounds the ratio near 2.9
        assert!(zero_cost >= 2.75 * expert_cost, "expert {expert_cost}, zero-action {zero_cost}");
    }

    #[test]
    fn deterministic_expert_is_reproducible() {
        let spec = EnvSpec::new(EnvKind::PointGoal).with_seed(7);
        let mut expert = expert_policy(&spec);
        expert.log_std = vec![f64::NEG_INFINITY; 2];
        let a = rollout(&mut make_env(&spec).unwrap(), &expert, &mut rng::seeded(1)).unwrap();
        let b = rollout(&mut make_env(&spec).unwrap(), &expert, &mut rng::seeded(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rollouts_repeat_under_fixed_seeds() {
        let spec = EnvSpec::new(EnvKind::BimodalGoal).with_seed(5);
        let p = random_policy(&spec);
        let a = rollout(&mut make_env(&spec).unwrap(), &p, &mut rng::seeded(8)).unwrap();
        let b = rollout(&mut make_env(&spec).unwrap(), &p, &mut rng::seeded(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn expert_visitation_stays_near_segment() {
        let spec = EnvSpec::new(EnvKind::PointGoal).with_seed(11);
        let mut env = make_env(&spec).unwrap();
        let expert = expert_policy(&spec);
        let mut r = rng::seeded(12);
        let (mut inside, mut total) = (0usize, 0usize);
        for _ in 0..10_000 {
            let t = rollout(&mut env, &expert, &mut r).unwrap();
            for s in &t.states[..spec.horizon] {
                total += 1;
                if s.iter().all(|v| v.abs() <= 1.2) {
                    inside += 1;
                }
            }
        }
        assert!(inside as f64 / total as f64 >= 0.95, "{inside}/{total}");
    }

    #[test]
    fn expfam_expert_mean() {
        let spec = EnvSpec::new(EnvKind::ExpfamGauss);
        let (demos, _) = collect_demos(&spec, 5, false, 0).unwrap();
        let m = demos.states.mean().unwrap();
        assert!((m - EXPFAM_TARGET).abs() < 0.05, "{m}");
    }

    #[test]
    fn bimodal_expert_states_are_bimodal() {
        // Two-component EM on the second coordinate of late-episode states.
        let spec = EnvSpec::new(EnvKind::BimodalGoal);
        let (demos, _) = collect_demos(&spec, 10_000, false, 4).unwrap();
        let ys: Vec<f64> = demos.states.column(1).to_vec();
        let (mut w, mut mu, mut var) = ([0.5, 0.5], [-0.5, 0.5], [0.5, 0.5]);
        for _ in 0..200 {
            let mut acc = [[0.0; 3]; 2];
            for &y in &ys {
                let p: Vec<f64> = (0..2)
                    .map(|k| w[k] * (-(y - mu[k]).powi(2) / (2.0 * var[k])).exp() / var[k].sqrt())
                    .collect();
                let z = p[0] + p[1];
                for k in 0..2 {
                    let r = p[k] / z;
                    acc[k][0] += r;
                    acc[k][1] += r * y;
                    acc[k][2] += r * y * y;
                }
            }
            for k in 0..2 {
                w[k] = acc[k][0] / ys.len() as f64;
                mu[k] = acc[k][1] / acc[k][0];
                var[k] = (acc[k][2] / acc[k][0] - mu[k] * mu[k]).max(1e-6);
            }
        }
        assert!(w[0] >= 0.3 && w[1] >= 0.3, "weights {w:?}, means {mu:?}");
    }

    #[test]
    fn normalized_return_anchors() {
        assert_eq!(normalized_return(-10.0, -10.0, -50.0).unwrap(), 1.0);
        assert_eq!(normalized_return(-50.0, -10.0, -50.0).unwrap(), 0.0);
        assert_eq!(normalized_return(-30.0, -10.0, -50.0).unwrap(), 0.5);
        assert!(matches!(normalized_return(1.0, 2.0, 2.0), Err(Error::Argument(_))));
    }

    #[test]
    fn demo_counts_and_file_round_trip() {
        let spec = EnvSpec::new(EnvKind::PointGoal);
        let (d, _) = collect_demos(&spec, 5, true, 1).unwrap();
        assert_eq!(d.states.nrows(), 160);
        assert_eq!(d.actions.as_ref().unwrap().nrows(), 160);
        let mut bytes = Vec::new();
        d.write_to(&mut bytes).unwrap();
        assert_eq!(Demonstrations::read_from(&mut bytes.as_slice()).unwrap(), d);
        let s = d.strip_actions();
        assert!(s.actions.is_none());
        assert!(s.features(true).is_err());
        assert_eq!(d.features(true).unwrap().ncols(), 4);
        let mut bytes = Vec::new();
        s.write_to(&mut bytes).unwrap();
        assert_eq!(Demonstrations::read_from(&mut bytes.as_slice()).unwrap(), s);
        let (again, _) = collect_demos(&spec, 5, true, 1).unwrap();
        assert_eq!(again, d);
    }
}

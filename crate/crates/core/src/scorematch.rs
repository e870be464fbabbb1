//! Denoising score matching.
//!
//! A network `g(x, t)` is regressed onto the conditional score
//! `∇ log q_t(s_t | s)` with `s` from a data set, `t` uniform on the grid and
//! `s_t` drawn from the forward process. The Bayes-optimal regressor is the
//! marginal diffused score of the data distribution.
//!
//! The expert score is fit once on demonstrations; learner scores are fit on
//! a [`StateBuffer`] that aggregates every state the learner has produced so
//! far (follow-the-leader over all past losses).

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng as _;

use crate::diffusion::{diffuse_rows, noise_var, DiffusionSchedule, GridTime};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, OptimizerState, DEFAULT_LEARNING_RATE};
use crate::rng::{self, Rng};
use crate::score::{ScoreFn, ScoreModel};

/// Rows evaluated per network call when a computation fans out over many draws.
pub(crate) const EVAL_CHUNK: usize = 8192;

const EVAL_SET_SIZE: usize = 4096;

/// Append-only store of learner states, one block per outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBuffer {
    dim: usize,
    data: Vec<f64>,
    per_iteration_counts: Vec<usize>,
}

impl StateBuffer {
    pub fn new(dim: usize) -> StateBuffer {
        assert!(dim > 0, "state dimension must be positive");
        StateBuffer { dim, data: Vec::new(), per_iteration_counts: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn per_iteration_counts(&self) -> &[usize] {
        &self.per_iteration_counts
    }

    /// Appends one iteration's states as a new block.
    pub fn append(&mut self, states: ArrayView2<f64>) -> Result<()> {
        if states.ncols() != self.dim {
            return Err(Error::Shape(format!(
                "buffer holds {}-dimensional states, got {}",
                self.dim,
                states.ncols()
            )));
        }
        self.data.extend(states.iter());
        self.per_iteration_counts.push(states.nrows());
        Ok(())
    }

    pub fn states(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len(), self.dim), &self.data).expect("consistent buffer")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Layout: magic `SMLBUF01`, u32 count, u32 dim, u32 number of blocks,
    /// u32 per-block counts, then `count × dim` little-endian f64 row-major.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(b"SMLBUF01")?;
        for v in [self.len(), self.dim, self.per_iteration_counts.len()] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        for &c in &self.per_iteration_counts {
            out.write_all(&(c as u32).to_le_bytes())?;
        }
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<StateBuffer> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != b"SMLBUF01" {
            return Err(Error::Format("not a state buffer (bad magic)".into()));
        }
        let count = nn::read_u32(input)?;
        let dim = nn::read_u32(input)?;
        let blocks = nn::read_u32(input)?;
        if dim == 0 {
            return Err(Error::Format("zero state dimension".into()));
        }
        let per_iteration_counts = (0..blocks).map(|_| nn::read_u32(input)).collect::<Result<Vec<_>>>()?;
        if per_iteration_counts.iter().sum::<usize>() != count {
            return Err(Error::Format("block counts do not sum to the state count".into()));
        }
        let mut data = vec![0.0; count * dim];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            input.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        Ok(StateBuffer { dim, data, per_iteration_counts })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTrainConfig {
    /// Passes of `samples_per_update` draws each.
    pub epochs: usize,
    pub batch_size: usize,
    /// `(t, ε)` pairs drawn per sampled state.
    pub mc_pairs_per_state: usize,
    pub learning_rate: f64,
    /// States drawn with replacement from the data set per epoch.
    pub samples_per_update: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ScoreTrainConfig {
    fn default() -> Self {
        ScoreTrainConfig {
            epochs: 1,
            batch_size: 1024,
            mc_pairs_per_state: 1,
            learning_rate: DEFAULT_LEARNING_RATE,
            samples_per_update: 100_000,
            hidden: vec![256],
            activation: Activation::Relu,
        }
    }
}

impl ScoreTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0
            || self.batch_size == 0
            || self.mc_pairs_per_state == 0
            || self.samples_per_update == 0
            || !(self.learning_rate > 0.0)
        {
            return Err(Error::Config(format!("score training settings must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Per-draw squared errors `‖g(s_t, t) − ∇ log q_t(s_t | s)‖²`, `n_mc` per
/// state, in state order.
pub fn dsm_loss_terms<S: ScoreFn + ?Sized>(
    g: &S,
    states: ArrayView2<f64>,
    schedule: &DiffusionSchedule,
    n_mc: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if states.nrows() == 0 {
        return Err(Error::Argument("no states to evaluate".into()));
    }
    if n_mc == 0 {
        return Err(Error::Argument("need at least one Monte-Carlo draw per state".into()));
    }
    let d = states.ncols();
    let total = states.nrows() * n_mc;
    let mut terms = Vec::with_capacity(total);
    let mut start = 0;
    while start < total {
        let end = (start + EVAL_CHUNK).min(total);
        let rows: Vec<usize> = (start..end).map(|k| k / n_mc).collect();
        let batch = states.select(Axis(0), &rows);
        let (times, eps) = draw_noise(schedule, end - start, d, rng);
        let (s_t, target) = diffuse_rows(batch.view(), &times, eps.view());
        let out = g.score_batch(s_t.view(), &times)?;
        for (o, y) in out.outer_iter().zip(target.outer_iter()) {
            terms.push(o.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum());
        }
        start = end;
    }
    Ok(terms)
}

/// Monte-Carlo estimate of the denoising score-matching objective.
pub fn dsm_loss<S: ScoreFn + ?Sized>(
    g: &S,
    states: ArrayView2<f64>,
    schedule: &DiffusionSchedule,
    n_mc: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let terms = dsm_loss_terms(g, states, schedule, n_mc, rng)?;
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Per-draw `‖g − ∇log q_t(s_t|s)‖² − ‖g − oracle‖²` on shared draws from
/// `states`. Its mean is the part of the score-matching objective that does
/// not depend on `g` when `oracle` is the true diffused score.
pub fn dsm_offset_terms<G: ScoreFn + ?Sized, O: ScoreFn + ?Sized>(
    g: &G,
    oracle: &O,
    states: ArrayView2<f64>,
    schedule: &DiffusionSchedule,
    n_draws: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if states.nrows() == 0 || n_draws == 0 {
        return Err(Error::Argument("need states and at least one draw".into()));
    }
    let d = states.ncols();
    let mut terms = Vec::with_capacity(n_draws);
    let mut start = 0;
    while start < n_draws {
        let end = (start + EVAL_CHUNK).min(n_draws);
        let rows: Vec<usize> = (start..end).map(|k| k % states.nrows()).collect();
        let batch = states.select(Axis(0), &rows);
        let (times, eps) = draw_noise(schedule, end - start, d, rng);
        let (s_t, target) = diffuse_rows(batch.view(), &times, eps.view());
        let a = g.score_batch(s_t.view(), &times)?;
        let b = oracle.score_batch(s_t.view(), &times)?;
        for i in 0..end - start {
            let mut v = 0.0;
            for j in 0..d {
                v += (a[[i, j]] - target[[i, j]]).powi(2) - (a[[i, j]] - b[[i, j]]).powi(2);
            }
            terms.push(v);
        }
        start = end;
    }
    Ok(terms)
}

/// `n` grid times followed by an `n × d` block of standard normals.
pub(crate) fn draw_noise(
    schedule: &DiffusionSchedule,
    n: usize,
    d: usize,
    rng: &mut Rng,
) -> (Vec<GridTime>, Array2<f64>) {
    let times: Vec<GridTime> = (0..n).map(|_| schedule.sample(rng)).collect();
    let eps = Array2::from_shape_simple_fn((n, d), || rng::normal(rng));
    (times, eps)
}

/// Fixed `(s, t, ε)` draws used to compare a model against itself over training.
#[derive(Debug, Clone)]
struct EvalSet {
    s_t: Array2<f64>,
    target: Array2<f64>,
    times: Vec<GridTime>,
}

impl EvalSet {
    fn draw(data: ArrayView2<f64>, schedule: &DiffusionSchedule, rng: &mut Rng) -> EvalSet {
        let n = EVAL_SET_SIZE.min(data.nrows() * 4).max(1);
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..data.nrows())).collect();
        let batch = data.select(Axis(0), &rows);
        let (times, eps) = draw_noise(schedule, n, data.ncols(), rng);
        let (s_t, target) = diffuse_rows(batch.view(), &times, eps.view());
        EvalSet { s_t, target, times }
    }

    fn loss(&self, g: &ScoreModel) -> Result<f64> {
        let out = g.score_batch(self.s_t.view(), &self.times)?;
        Ok((out - &self.target).mapv(|v| v * v).sum() / self.times.len() as f64)
    }
}

/// Outcome of a training call.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Held-out loss before the first step and after each epoch.
    pub eval_losses: Vec<f64>,
    /// Held-out loss of the model that was kept.
    pub final_eval_loss: f64,
    /// Mean minibatch loss of the last epoch.
    pub last_train_loss: f64,
}

/// A score network together with its optimizer, so repeated updates on a
/// growing data set continue from where the previous one stopped.
#[derive(Debug, Clone)]
pub struct ScoreTrainer {
    pub model: ScoreModel,
    opt: OptimizerState,
    cfg: ScoreTrainConfig,
}

impl ScoreTrainer {
    pub fn new(model: ScoreModel, cfg: ScoreTrainConfig) -> Result<ScoreTrainer> {
        cfg.validate()?;
        let opt = OptimizerState::new(&model.params, cfg.learning_rate);
        Ok(ScoreTrainer { model, opt, cfg })
    }

    pub fn fresh(dim: usize, schedule: &DiffusionSchedule, cfg: ScoreTrainConfig, seed: u64) -> Result<ScoreTrainer> {
        let model = ScoreModel::new(dim, &cfg.hidden, schedule, cfg.activation, seed)?;
        ScoreTrainer::new(model, cfg)
    }

    pub fn config(&self) -> &ScoreTrainConfig {
        &self.cfg
    }

    /// Runs `epochs` passes over states drawn with replacement from `data`.
    /// With `keep_best`, the returned model is the epoch snapshot (or the
    /// starting point) with the lowest held-out loss.
    pub fn train(
        &mut self,
        data: ArrayView2<f64>,
        schedule: &DiffusionSchedule,
        epochs: usize,
        keep_best: bool,
        rng: &mut Rng,
    ) -> Result<TrainReport> {
        if data.nrows() == 0 {
            return Err(Error::Argument("no states to train on".into()));
        }
        if data.ncols() != self.model.dim() {
            return Err(Error::Shape(format!(
                "model is {}-dimensional, data has {} columns",
                self.model.dim(),
                data.ncols()
            )));
        }
        if self.model.params.n_time_bins() != schedule.n_steps() {
            return Err(Error::Config(format!(
                "model has {} time bins, schedule has {} steps",
                self.model.params.n_time_bins(),
                schedule.n_steps()
            )));
        }
        let eval = EvalSet::draw(data, schedule, rng);
        let mut eval_losses = vec![eval.loss(&self.model)?];
        let mut best = (eval_losses[0], self.model.clone());
        let mut last_train_loss = f64::NAN;
        let d = data.ncols();
        let mc = self.cfg.mc_pairs_per_state;
        for epoch in 0..epochs {
            let mut remaining = self.cfg.samples_per_update;
            let mut loss_sum = 0.0;
            let mut n_batches = 0usize;
            while remaining > 0 {
                let b = remaining.min(self.cfg.batch_size);
                remaining -= b;
                let rows: Vec<usize> = (0..b)
                    .flat_map(|_| {
                        let r = rng.random_range(0..data.nrows());
                        std::iter::repeat_n(r, mc)
                    })
                    .collect();
                let batch = data.select(Axis(0), &rows);
                let (times, eps) = draw_noise(schedule, rows.len(), d, rng);
                let (s_t, target) = diffuse_rows(batch.view(), &times, eps.view());
                let bins = ScoreModel::bins(&times);
                let (loss, grads) =
                    nn::sq_loss_grad_batch(&self.model.params, s_t.view(), &bins, target.view())?;
                if !loss.is_finite() || !grads.is_finite() {
                    return Err(Error::Diverged(format!("non-finite score-matching loss at epoch {epoch}")));
                }
                self.opt.step(&mut self.model.params, &grads);
                loss_sum += loss;
                n_batches += 1;
            }
            last_train_loss = loss_sum / n_batches as f64;
            let l = eval.loss(&self.model)?;
            if !l.is_finite() {
                return Err(Error::Diverged(format!("non-finite held-out loss at epoch {epoch}")));
            }
            eval_losses.push(l);
            if keep_best && l < best.0 {
                best = (l, self.model.clone());
            }
        }
        let final_eval_loss = if keep_best {
            self.model = best.1;
            best.0
        } else {
            *eval_losses.last().expect("initial loss recorded")
        };
        Ok(TrainReport { eval_losses, final_eval_loss, last_train_loss })
    }
}

/// Fits the expert score `g^e` on demonstration states.
pub fn pretrain_expert(
    expert_states: ArrayView2<f64>,
    schedule: &DiffusionSchedule,
    cfg: &ScoreTrainConfig,
    seed: u64,
) -> Result<(ScoreModel, TrainReport)> {
    if expert_states.nrows() < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 expert states, got {}",
            expert_states.nrows()
        )));
    }
    let mut trainer = ScoreTrainer::fresh(expert_states.ncols(), schedule, cfg.clone(), seed)?;
    let mut rng = rng::stream(seed, 1);
    let report = trainer.train(expert_states, schedule, cfg.epochs, true, &mut rng)?;
    Ok((trainer.model, report))
}

/// Learner-score update on the whole aggregated buffer, warm-started from
/// `g_prev` with a fresh optimizer.
pub fn ftl_update(
    g_prev: &ScoreModel,
    buffer: &StateBuffer,
    schedule: &DiffusionSchedule,
    cfg: &ScoreTrainConfig,
    seed: u64,
) -> Result<(ScoreModel, TrainReport)> {
    if buffer.is_empty() {
        return Err(Error::Argument("state buffer is empty".into()));
    }
    let mut trainer = ScoreTrainer::new(g_prev.clone(), cfg.clone())?;
    let mut rng = rng::stream(seed, 2);
    let report = trainer.train(buffer.states(), schedule, cfg.epochs, false, &mut rng)?;
    Ok((trainer.model, report))
}

/// Noise-weighted score error
/// `E_t E_{x ~ p_t} (1 − e^{−2t}) ‖g(x, t) − oracle(x, t)‖²`, where `p_t`
/// is `samples` pushed through the forward process. Returns `(mean, std_error)`.
///
/// The `(1 − e^{−2t})` weight makes every time contribute on the scale of a
/// unit-variance target; without it the `t → t_min` end dominates.
pub fn weighted_score_error<G: ScoreFn + ?Sized, O: ScoreFn + ?Sized>(
    g: &G,
    oracle: &O,
    samples: ArrayView2<f64>,
    schedule: &DiffusionSchedule,
    n_draws: usize,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    if samples.nrows() == 0 || n_draws == 0 {
        return Err(Error::Argument("need samples and at least one draw".into()));
    }
    let d = samples.ncols();
    let mut terms = Vec::with_capacity(n_draws);
    let mut start = 0;
    while start < n_draws {
        let end = (start + EVAL_CHUNK).min(n_draws);
        let rows: Vec<usize> = (start..end).map(|k| k % samples.nrows()).collect();
        let batch = samples.select(Axis(0), &rows);
        let (times, eps) = draw_noise(schedule, end - start, d, rng);
        let (s_t, _) = diffuse_rows(batch.view(), &times, eps.view());
        let a = g.score_batch(s_t.view(), &times)?;
        let b = oracle.score_batch(s_t.view(), &times)?;
        for ((ra, rb), gt) in a.outer_iter().zip(b.outer_iter()).zip(&times) {
            let sq: f64 = ra.iter().zip(rb).map(|(x, y)| (x - y).powi(2)).sum();
            terms.push(noise_var(gt.t) * sq);
        }
        start = end;
    }
    Ok(crate::stats::mean_and_stderr(&terms))
}

//! Line-based `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default (see [`KEYS`]); unknown keys are rejected. Lists are
//! comma-separated, optionally in brackets: `run.seeds = [0,1,2]`.
//!
//! Sign convention: environments define costs; a policy's return is its
//! negated average episodic cost, and normalized return maps the expert to 1
//! and the random policy to 0.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::diffusion::DiffusionSchedule;
use crate::envs::{EnvKind, EnvSpec};
use crate::error::{Error, Result};
use crate::imitation::{BcConfig, Method, SmilingConfig};
use crate::nn::Activation;
use crate::rl::RlConfig;
use crate::scorematch::ScoreTrainConfig;

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn k(key: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec { key, default, help }
}

pub const KEYS: &[KeySpec] = &[
    k("env.name", "point_goal", "point_goal | bimodal_goal | expfam_gauss"),
    k("env.horizon", "default", "episode length; 'default' = 32 (goal tasks) or 16 (expfam_gauss)"),
    k("env.dynamics_noise", "0.01", "std of the additive transition noise"),
    k("diffusion.T", "3", "forward-process horizon"),
    k("diffusion.n_steps", "5000", "time grid size"),
    k("diffusion.t_min", "0.01", "smallest diffusion time"),
    k("score.epochs", "1", "learner-score passes per outer iteration"),
    k("score.batch_size", "1024", "score-matching minibatch size"),
    k("score.mc_pairs_per_state", "1", "(t, eps) pairs per sampled state"),
    k("score.learning_rate", "0.005", "Adam step size for score networks"),
    k("score.samples_per_update", "20000", "states drawn with replacement per learner-score pass"),
    k("score.hidden", "256", "hidden widths of score networks and the discriminator"),
    k("expert.epochs", "20", "passes when pretraining the expert score"),
    k("expert.samples_per_update", "100000", "states drawn per expert pretraining pass"),
    k("cost.n_mc", "500", "Monte-Carlo draws per state cost"),
    k("cost.normalize", "true", "rescale each batch of costs to mean 0"),
    k("cost.norm_std", "0.1", "target std of normalized cost batches"),
    k("rl.episodes_per_update", "16", "episodes per policy-gradient update"),
    k("rl.updates_per_iteration", "10", "policy-gradient updates per outer iteration"),
    k("rl.policy_lr", "0.01", "Adam step size for the policy"),
    k("rl.value_lr", "0.01", "Adam step size for the value baseline"),
    k("rl.value_steps", "10", "baseline regression steps per update"),
    k("rl.entropy_bonus", "0.001", "entropy coefficient"),
    k("rl.warm_start", "true", "continue from the previous iteration's policy"),
    k("rl.policy_hidden", "64", "hidden widths of the policy mean network"),
    k("rl.value_hidden", "64", "hidden widths of the value network"),
    k("rl.init_log_std", "-0.6931471805599453", "initial policy log standard deviation"),
    k("run.method", "smiling", "smiling | bc | dac_lite"),
    k("run.seeds", "0", "seeds to run, e.g. 0,1,2,3,4"),
    k("run.iterations", "12", "outer iterations K"),
    k("run.rollouts_per_iteration", "8", "episodes added to the learner buffer per iteration"),
    k("run.eval_episodes", "50", "episodes per true-cost evaluation"),
    k("run.state_action", "false", "diffuse [state, action] instead of states"),
    k("run.linear_mode", "false", "linear score networks and discriminator"),
    k("demos.path", "demos.bin", "demonstration file"),
    k("demos.episodes", "5", "expert episodes collected by collect-demos"),
    k("demos.seed", "1000", "seed for collect-demos"),
    k("demos.with_actions", "true", "store expert actions (needed by bc and state-action mode)"),
    k("bc.epochs", "500", "behavior-cloning full-batch steps"),
    k("bc.learning_rate", "0.005", "behavior-cloning Adam step size"),
    k("bc.eval_every", "50", "evaluate a checkpoint every this many steps"),
    k("probe.noise_levels", "0,0.01,0.05", "dynamics noise levels swept by probe"),
    k("probe.demo_episodes", "1,2,5", "demonstration counts swept by probe"),
    k("output.dir", "out", "directory for CSV output (overridden by SMILING_OUTPUT_DIR)"),
];

/// Environment variable that replaces `output.dir` when set.
pub const OUTPUT_DIR_ENV: &str = "SMILING_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig { values: KEYS.iter().map(|s| (s.key.to_string(), s.default.to_string())).collect() }
    }
}

impl ExperimentConfig {
    /// Defaults overlaid with the settings in `text`, then validated.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        ExperimentConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key '{key}'"))),
        }
    }

    /// Applies a command-line `key=value` override and revalidates.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, value) =
            kv.split_once('=').ok_or_else(|| Error::Config(format!("override '{kv}' is not key=value")))?;
        self.set(key.trim(), value.trim())?;
        self.validate()
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    /// Every key with its effective value, sorted, one `key=value` per line.
    pub fn canonical(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of [`canonical`](Self::canonical),
    /// leaving out `output.dir`, which does not affect results.
    pub fn digest(&self) -> String {
        let text: String = self
            .values
            .iter()
            .filter(|(k, _)| k.as_str() != "output.dir")
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        let hash = Sha256::digest(text.as_bytes());
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn parse_key<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key);
        raw.parse().map_err(|_| Error::Config(format!("key '{key}': cannot parse '{raw}'")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.get(key).trim().trim_start_matches('[').trim_end_matches(']');
        let items: Vec<&str> = raw.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if items.is_empty() {
            return Err(Error::Config(format!("key '{key}': empty list")));
        }
        items
            .iter()
            .map(|s| s.parse().map_err(|_| Error::Config(format!("key '{key}': cannot parse '{s}'"))))
            .collect()
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::Config(format!("key '{key}': expected true or false, got '{other}'"))),
        }
    }

    /// Checks that every key parses and the assembled settings are valid.
    pub fn validate(&self) -> Result<()> {
        self.method()?;
        self.seeds()?;
        self.smiling_config(0)?.validate()?;
        self.bc_config()?;
        self.flag("demos.with_actions")?;
        let episodes: usize = self.parse_key("demos.episodes")?;
        if episodes == 0 {
            return Err(Error::Config("key 'demos.episodes': must be at least 1".into()));
        }
        self.parse_key::<u64>("demos.seed")?;
        self.list::<f64>("probe.noise_levels")?;
        self.list::<usize>("probe.demo_episodes")?;
        Ok(())
    }

    pub fn method(&self) -> Result<Method> {
        self.get("run.method").parse().map_err(|e: Error| Error::Config(format!("key 'run.method': {e}")))
    }

    pub fn seeds(&self) -> Result<Vec<u64>> {
        self.list("run.seeds")
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        let kind: EnvKind =
            self.get("env.name").parse().map_err(|e: Error| Error::Config(format!("key 'env.name': {e}")))?;
        let mut spec = EnvSpec::new(kind).with_noise(self.parse_key("env.dynamics_noise")?);
        if self.get("env.horizon") != "default" {
            spec = spec.with_horizon(self.parse_key("env.horizon")?);
        }
        spec.validate().map_err(|e| Error::Config(format!("env settings: {e}")))?;
        Ok(spec)
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(
            self.parse_key("diffusion.T")?,
            self.parse_key("diffusion.n_steps")?,
            self.parse_key("diffusion.t_min")?,
        )
        .map_err(|e| Error::Config(format!("diffusion settings: {e}")))
    }

    fn score_cfg(&self, epochs_key: &str, samples_key: &str) -> Result<ScoreTrainConfig> {
        let cfg = ScoreTrainConfig {
            epochs: self.parse_key(epochs_key)?,
            batch_size: self.parse_key("score.batch_size")?,
            mc_pairs_per_state: self.parse_key("score.mc_pairs_per_state")?,
            learning_rate: self.parse_key("score.learning_rate")?,
            samples_per_update: self.parse_key(samples_key)?,
            hidden: self.list("score.hidden")?,
            activation: Activation::Relu,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn rl_config(&self) -> Result<RlConfig> {
        let cfg = RlConfig {
            episodes_per_update: self.parse_key("rl.episodes_per_update")?,
            updates_per_iteration: self.parse_key("rl.updates_per_iteration")?,
            policy_lr: self.parse_key("rl.policy_lr")?,
            value_lr: self.parse_key("rl.value_lr")?,
            entropy_bonus: self.parse_key("rl.entropy_bonus")?,
            warm_start: self.flag("rl.warm_start")?,
            value_steps: self.parse_key("rl.value_steps")?,
            policy_hidden: self.list("rl.policy_hidden")?,
            value_hidden: self.list("rl.value_hidden")?,
            init_log_std: self.parse_key("rl.init_log_std")?,
            normalize: self.flag("cost.normalize")?,
            norm_std: self.parse_key("cost.norm_std")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn smiling_config(&self, seed: u64) -> Result<SmilingConfig> {
        let cfg = SmilingConfig {
            env: self.env_spec()?,
            schedule: self.schedule()?,
            expert_score: self.score_cfg("expert.epochs", "expert.samples_per_update")?,
            learner_score: self.score_cfg("score.epochs", "score.samples_per_update")?,
            rl: self.rl_config()?,
            iterations: self.parse_key("run.iterations")?,
            rollouts_per_iteration: self.parse_key("run.rollouts_per_iteration")?,
            cost_n_mc: self.parse_key("cost.n_mc")?,
            state_action: self.flag("run.state_action")?,
            linear_mode: self.flag("run.linear_mode")?,
            eval_episodes: self.parse_key("run.eval_episodes")?,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn bc_config(&self) -> Result<BcConfig> {
        Ok(BcConfig {
            epochs: self.parse_key("bc.epochs")?,
            learning_rate: self.parse_key("bc.learning_rate")?,
            eval_every: self.parse_key("bc.eval_every")?,
        })
    }

    pub fn demo_episodes(&self) -> usize {
        self.parse_key("demos.episodes").expect("validated")
    }

    pub fn demo_seed(&self) -> u64 {
        self.parse_key("demos.seed").expect("validated")
    }

    pub fn demo_with_actions(&self) -> bool {
        self.flag("demos.with_actions").expect("validated")
    }

    pub fn probe_noise_levels(&self) -> Vec<f64> {
        self.list("probe.noise_levels").expect("validated")
    }

    pub fn probe_demo_episodes(&self) -> Vec<usize> {
        self.list("probe.demo_episodes").expect("validated")
    }

    pub fn demos_path(&self) -> PathBuf {
        PathBuf::from(self.get("demos.path"))
    }

    /// `output.dir`, unless [`OUTPUT_DIR_ENV`] is set.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => PathBuf::from(self.get("output.dir")),
        }
    }

    /// Table of every key, its default and a short description.
    pub fn help_text() -> String {
        let width = KEYS.iter().map(|s| s.key.len()).max().unwrap_or(0);
        let mut out = String::new();
        for s in KEYS {
            out.push_str(&format!("  {:width$}  (default: {})  {}\n", s.key, s.default, s.help));
        }
        out
    }
}

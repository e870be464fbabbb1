//! `smiling` command-line front end: experiment runs, demonstration
//! collection, diagnostics, checkpoint evaluation and theory probes.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use smiling::config::{ExperimentConfig, OUTPUT_DIR_ENV};
use smiling::diagnostics::{self, Suite};
use smiling::envs::{self, make_env, random_policy, Demonstrations};
use smiling::imitation::{bc_run, dac_lite_run, smiling_run, Method, RunResult};
use smiling::probe::{probe_second_order, ProbeConfig};
use smiling::{rng, stats, Error};

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIAGNOSTIC: u8 = 3;

#[derive(Parser)]
#[command(
    name = "smiling",
    version,
    about = "Score-matching imitation learning experiments and diagnostics",
    after_help = after_help()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every config-driven subcommand.
#[derive(clap::Args)]
struct ConfigArgs {
    /// key = value config file; keys not set there keep their defaults
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// override one key, e.g. --set cost.n_mc=100 (repeatable)
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured method for every seed and write per-seed and aggregate CSVs
    #[command(after_help = after_help())]
    Run(ConfigArgs),
    /// Roll out the scripted expert and write the demonstration file
    CollectDemos(ConfigArgs),
    /// Run a diagnostic suite and print a pass/fail table
    Diag {
        #[arg(value_parser = parse_suite)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-evaluate a checkpointed policy on the configured environment
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// policy checkpoint written by `run`
        #[arg(long)]
        policy: PathBuf,
        /// evaluation episodes (default: run.eval_episodes)
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sweep dynamics noise and demonstration counts; write probe.csv
    Probe(ConfigArgs),
}

fn after_help() -> String {
    format!(
        "Configuration keys (key = value, one per line):\n{}\nThe {OUTPUT_DIR_ENV} environment variable overrides output.dir.\n\
         Exit codes: 0 ok, 1 runtime failure, 2 config error, 3 diagnostic failure.",
        ExperimentConfig::help_text()
    )
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Error paired with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        let code = match e {
            Error::Config(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        Failure { code, message: e.to_string() }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: EXIT_RUNTIME, message: format!("{}: {e}", path.display()) }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::CollectDemos(args) => cmd_collect_demos(&args),
        Command::Diag { suite, seed } => cmd_diag(suite, seed),
        Command::Eval { cfg, policy, episodes, seed } => cmd_eval(&cfg, &policy, episodes, seed),
        Command::Probe(args) => cmd_probe(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for kv in &args.overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_demos(path: &Path) -> Result<Demonstrations, Failure> {
    let file = fs::File::open(path).map_err(|e| Failure {
        code: EXIT_CONFIG,
        message: format!("cannot open demonstration file {}: {e}", path.display()),
    })?;
    Ok(Demonstrations::read_from(&mut BufReader::new(file))?)
}

fn output_dir(cfg: &ExperimentConfig) -> Result<PathBuf, Failure> {
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    Ok(dir)
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn cmd_run(args: &ConfigArgs) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let method = cfg.method()?;
    let demos = load_demos(&cfg.demos_path())?;
    let dir = output_dir(&cfg)?;
    let digest = cfg.digest();
    println!("config digest {digest}");
    let mut results = Vec::new();
    for seed in cfg.seeds()? {
        let sc = cfg.smiling_config(seed)?;
        let mut result = match method {
            Method::Smiling => smiling_run(&sc, &demos)?,
            Method::DacLite => dac_lite_run(&sc, &demos)?,
            Method::Bc => bc_run(&sc, &cfg.bc_config()?, &demos)?,
        };
        result.config_digest = digest.clone();
        let stem = format!("{method}_seed{seed}");
        write_file(&dir.join(format!("{stem}.csv")), &result.to_csv())?;
        let policy_path = dir.join(format!("{stem}.policy"));
        let file = fs::File::create(&policy_path).map_err(|e| io_failure(&policy_path, e))?;
        let mut out = BufWriter::new(file);
        envs::write_policy(&mut out, &result.final_policy)?;
        out.flush().map_err(|e| io_failure(&policy_path, e))?;
        println!(
            "seed {seed}: normalized return {:.4} ({:.1}s)",
            result.headline_return, result.wall_clock_secs
        );
        results.push(result);
    }
    let aggregate = aggregate_csv(&results, &digest)?;
    write_file(&dir.join(format!("{method}_aggregate.csv")), &aggregate)?;
    let headline: Vec<f64> = results.iter().map(|r| r.headline_return).collect();
    let (m, se) = stats::mean_and_stderr(&headline);
    println!("{method}: normalized return {m:.4} ± {se:.4} over {} seed(s)", headline.len());
    Ok(())
}

pub const AGGREGATE_HEADER: &str = "iter,env_steps,norm_return_current_mean,norm_return_current_stderr,\
norm_return_mixture_mean,norm_return_mixture_stderr,ds_value_mean,ds_value_stderr,n_seeds,config_digest";

/// Per-iteration mean and standard error across seeds.
fn aggregate_csv(results: &[RunResult], digest: &str) -> Result<String, Failure> {
    let n_rec = results.first().map_or(0, |r| r.records.len());
    if results.iter().any(|r| r.records.len() != n_rec) {
        return Err(Error::Shape("seeds produced different numbers of records".into()).into());
    }
    let mut out = format!("{AGGREGATE_HEADER}\n");
    for i in 0..n_rec {
        let col = |f: &dyn Fn(&RunResult) -> f64| stats::mean_and_stderr(&results.iter().map(f).collect::<Vec<_>>());
        let first = &results[0].records[i];
        let (cur, cur_se) = col(&|r| r.records[i].norm_return_current);
        let (mix, mix_se) = col(&|r| r.records[i].norm_return_mixture);
        let (ds, ds_se) = col(&|r| r.records[i].ds.value);
        out += &format!(
            "{},{},{cur},{cur_se},{mix},{mix_se},{ds},{ds_se},{},{digest}\n",
            first.iter,
            first.env_steps,
            results.len()
        );
    }
    Ok(out)
}

fn cmd_collect_demos(args: &ConfigArgs) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let spec = cfg.env_spec()?;
    let (demos, expert_cost) = envs::collect_demos(&spec, cfg.demo_episodes(), cfg.demo_with_actions(), cfg.demo_seed())?;
    let path = cfg.demos_path();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_failure(parent, e))?;
    }
    let file = fs::File::create(&path).map_err(|e| io_failure(&path, e))?;
    let mut out = BufWriter::new(file);
    demos.write_to(&mut out)?;
    out.flush().map_err(|e| io_failure(&path, e))?;
    println!(
        "wrote {} states{} to {}",
        demos.len(),
        if demos.actions.is_some() { " and actions" } else { "" },
        path.display()
    );
    println!("expert mean return {:.6} (mean episodic cost {expert_cost:.6})", -expert_cost);
    Ok(())
}

fn cmd_diag(suite: Suite, seed: u64) -> Result<(), Failure> {
    let checks = diagnostics::run_suite(suite, seed)?;
    print!("{}", diagnostics::format_table(suite, &checks));
    if diagnostics::all_passed(&checks) {
        Ok(())
    } else {
        Err(Failure { code: EXIT_DIAGNOSTIC, message: format!("{suite} suite has failing checks") })
    }
}

fn cmd_eval(args: &ConfigArgs, policy_path: &Path, episodes: Option<usize>, seed: u64) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let spec = cfg.env_spec()?;
    let file = fs::File::open(policy_path).map_err(|e| Failure {
        code: EXIT_CONFIG,
        message: format!("cannot open policy checkpoint {}: {e}", policy_path.display()),
    })?;
    let policy = envs::read_policy(&mut BufReader::new(file), &spec)?;
    let n = episodes.unwrap_or(cfg.smiling_config(seed)?.eval_episodes);
    let mut env = make_env(&spec)?;
    let mut r = rng::stream(seed, 0xEE);
    let (cost, var) = envs::evaluate(&mut env, &policy, n, &mut r)?;
    let (expert, _) = envs::evaluate(&mut env, &envs::expert_policy(&spec), n, &mut r)?;
    let (random, _) = envs::evaluate(&mut env, &random_policy(&spec), n, &mut r)?;
    let norm = envs::normalized_return(-cost, -expert, -random)?;
    println!("episodes {n}");
    println!("mean episodic cost {cost:.6} (variance {var:.6})");
    println!("normalized return {norm:.6} (expert cost {expert:.6}, random cost {random:.6})");
    Ok(())
}

fn cmd_probe(args: &ConfigArgs) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let mut cfgs = Vec::new();
    for &noise in &cfg.probe_noise_levels() {
        for &n in &cfg.probe_demo_episodes() {
            for seed in cfg.seeds()? {
                let mut sc = cfg.smiling_config(seed)?;
                sc.env = sc.env.with_noise(noise);
                sc.validate()?;
                cfgs.push(ProbeConfig { smiling: sc, demo_episodes: n, demo_seed: cfg.demo_seed() });
            }
        }
    }
    let eval_episodes = cfg.smiling_config(0)?.eval_episodes.max(2);
    let mut r = rng::stream(cfg.seeds()?[0], 0xB0);
    let report = probe_second_order(&cfgs, eval_episodes, &mut r)?;
    let dir = output_dir(&cfg)?;
    let path = dir.join("probe.csv");
    write_file(&path, &report.to_csv())?;
    print!("{}", report.to_csv());
    println!("spearman(min variance, gap) = {:.4}", report.spearman_min_var_gap);
    println!("wrote {}", path.display());
    Ok(())
}

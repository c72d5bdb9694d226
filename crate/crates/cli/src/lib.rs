//! `greensim` command line.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage error, 3 invalid
//! configuration or input, 4 missing or unwritable file, 5 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use greensim::bayes::{FractionDataset, PosteriorState};
use greensim::bioenv::{fractions_from_trajectories, BioEnv, Scenario, HORIZON};
use greensim::estimators::EstimatorKind;
use greensim::harness::{evaluate_policy_crn, run_comparison, write_comparison, CompareConfig};
use greensim::mdp::{rollout, trajectory_return, write_trajectories_ndjson};
use greensim::oracle::run_checks;
use greensim::policy::{AnyPolicy, LinearSoftmax, Mlp, ParamShape, PolicyParams};
use greensim::rng::SeedTree;
use greensim::trainer::{train_detailed, TrainConfig};
use greensim::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_RUNTIME: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "greensim", version, about = "Model-risk-aware policy optimisation for a biomanufacturing process")]
struct Cli {
    /// Worker threads for parallel runs [default: all cores]
    #[arg(long, global = true, env = "GREENSIM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario JSON [default: built-in scenario]
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Overrides the seed of the configuration
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Roll out a policy under the true model and write the trajectories
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Training configuration, for the policy architecture
        #[arg(long)]
        config: Option<PathBuf>,
        /// Policy checkpoint [default: the initial policy of the configuration]
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        trajectories: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one policy and write its history and checkpoints
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_estimator)]
        estimator: Option<EstimatorKind>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean return of a checkpoint under the true model
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 200)]
        r_test: usize,
        /// Discount factor
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Macro-replicated comparison of estimators
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run only this estimator
        #[arg(long, value_parser = parse_estimator)]
        estimator: Option<EstimatorKind>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the estimators against exact enumeration on small tabular MDPs
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Posterior samples and chain diagnostics for a fraction dataset
    PosteriorDiag {
        #[command(flatten)]
        common: Common,
        /// Training configuration, for the MCMC settings and the data size
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fraction CSV [default: collect under the initial policy]
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_estimator(s: &str) -> Result<EstimatorKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    Checks(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult = Result<(), Failure>;

/// Parses `args` (program name first) and runs the command. Returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_USAGE;
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Checks(n)) => {
            eprintln!("{n} check(s) failed");
            EXIT_CHECK_FAILED
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Csv(_) | Error::ShapeMismatch { .. } => EXIT_CONFIG,
        Error::Io { .. } => EXIT_IO,
        _ => EXIT_RUNTIME,
    }
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Simulate {
            common,
            config,
            policy,
            trajectories,
            out,
        } => simulate(common, config, policy, trajectories, &out),
        Command::Train {
            common,
            config,
            estimator,
            out,
        } => train_cmd(common, config, estimator, &out),
        Command::Evaluate {
            common,
            policy,
            r_test,
            gamma,
            out,
        } => evaluate(common, &policy, r_test, gamma, out.as_deref()),
        Command::Compare {
            common,
            config,
            estimator,
            out,
        } => compare(common, config, estimator, &out),
        Command::OracleCheck { seed } => oracle_check(seed),
        Command::PosteriorDiag {
            common,
            config,
            data,
            samples,
            out,
        } => posterior_diag(common, config, data, samples, &out),
    }
}

fn load_scenario(path: Option<&Path>) -> Result<Scenario, Error> {
    let scn = match path {
        Some(p) => Scenario::load(p)?,
        None => Scenario::default(),
    };
    scn.validate()?;
    Ok(scn)
}

fn load_train_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig, Error> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Rebuilds the policy a checkpoint belongs to from its parameter layout.
fn policy_for(shape: ParamShape, scn: &Scenario) -> Result<AnyPolicy<f64>, Error> {
    let features = scn.feature_map();
    let (inputs, actions) = match shape {
        ParamShape::Linear { features, actions } => (features, actions),
        ParamShape::Mlp { inputs, actions, .. } => (inputs, actions),
    };
    if inputs != features.dim() || actions != scn.actions() {
        return Err(Error::Config(format!(
            "checkpoint expects {inputs} features and {actions} actions, scenario has {} and {}",
            features.dim(),
            scn.actions()
        )));
    }
    Ok(match shape {
        ParamShape::Linear { .. } => AnyPolicy::Linear(LinearSoftmax::new(features, actions)),
        ParamShape::Mlp { hidden, .. } => AnyPolicy::Mlp(Mlp::new(features, hidden, actions)),
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_sha256: Option<String>,
    scenario_sha256: String,
}

fn manifest<C: Serialize>(command: &str, seed: u64, config: Option<&C>, scn: &Scenario) -> Result<Vec<u8>, Error> {
    let config_sha256 = config.map(serde_json::to_vec).transpose()?.map(|b| sha256_hex(&b));
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config_sha256,
        scenario_sha256: sha256_hex(&serde_json::to_vec(scn)?),
    };
    let mut bytes = serde_json::to_vec_pretty(&m)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Output directory built under a temporary sibling and renamed into place on
/// commit. Dropped uncommitted, the temporary directory is removed.
struct Staging {
    tmp: PathBuf,
    dest: PathBuf,
    committed: bool,
}

impl Staging {
    fn new(dest: &Path) -> Result<Self, Error> {
        if dest.is_file() {
            return Err(Error::Config(format!("output path {} is a file", dest.display())));
        }
        if dest.is_dir() {
            let mut entries = fs::read_dir(dest).map_err(|e| Error::io(dest, e))?;
            if entries.next().is_some() {
                return Err(Error::Config(format!(
                    "output directory {} exists and is not empty",
                    dest.display()
                )));
            }
        }
        let name = dest
            .file_name()
            .ok_or_else(|| Error::Config(format!("invalid output path {}", dest.display())))?;
        let parent = match dest.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
        let tmp = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
        Ok(Self {
            tmp,
            dest: dest.to_path_buf(),
            committed: false,
        })
    }

    fn path(&self) -> &Path {
        &self.tmp
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<(), Error> {
        let path = self.tmp.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    fn create(&self, name: &str) -> Result<BufWriter<fs::File>, Error> {
        let path = self.tmp.join(name);
        Ok(BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?))
    }

    fn commit(mut self) -> Result<(), Error> {
        if self.dest.is_dir() {
            fs::remove_dir(&self.dest).map_err(|e| Error::io(&self.dest, e))?;
        }
        fs::rename(&self.tmp, &self.dest).map_err(|e| Error::io(&self.dest, e))?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

fn simulate(common: Common, config: Option<PathBuf>, policy: Option<PathBuf>, n: usize, out: &Path) -> CliResult {
    if n == 0 {
        return Err(Error::Config("--trajectories must be at least 1".into()).into());
    }
    let scn = load_scenario(common.scenario.as_deref())?;
    let cfg = load_train_config(config.as_deref(), common.seed)?;
    let seed = cfg.seed;
    let tree = SeedTree::new(seed);
    let (pol, theta) = match policy {
        Some(p) => {
            let theta = PolicyParams::<f64>::load_json(&p)?;
            (policy_for(theta.shape, &scn)?, theta)
        }
        None => {
            let mlp = cfg.policy(&scn);
            let theta = PolicyParams::random(mlp.shape(), cfg.init_sd, &mut tree.child(0).rng());
            (AnyPolicy::Mlp(mlp), theta)
        }
    };
    let env = BioEnv::new(scn.clone())?;
    let trajs = (0..n)
        .map(|j| rollout(&env, &pol, &theta, &scn.true_model, 0, &mut tree.child(1).child(j as u64).rng()))
        .collect::<Result<Vec<_>, _>>()?;
    let fractions = fractions_from_trajectories(&trajs)?;
    let mean = trajs.iter().map(|t| trajectory_return(t, 1.0)).sum::<f64>() / n as f64;

    let stage = Staging::new(out)?;
    let mut w = stage.create("trajectories.ndjson")?;
    write_trajectories_ndjson(&trajs, &mut w)?;
    w.flush().map_err(|e| Error::io(stage.path().join("trajectories.ndjson"), e))?;
    fractions.write_csv(stage.create("fractions.csv")?)?;
    stage.write("policy.json", &serde_json::to_vec_pretty(&theta).map_err(Error::from)?)?;
    stage.write("manifest.json", &manifest("simulate", seed, Some(&cfg), &scn)?)?;
    stage.commit()?;
    println!("{n} trajectories, mean return {mean:.4}");
    Ok(())
}

#[derive(Serialize)]
struct FailureDump {
    iteration: usize,
    error: String,
}

fn train_cmd(common: Common, config: Option<PathBuf>, estimator: Option<EstimatorKind>, out: &Path) -> CliResult {
    let scn = load_scenario(common.scenario.as_deref())?;
    let mut cfg = load_train_config(config.as_deref(), common.seed)?;
    if let Some(est) = estimator {
        cfg.estimator = est;
    }
    let stage = Staging::new(out)?;
    let result = train_detailed(&scn, &cfg);
    stage.write("manifest.json", &manifest("train", cfg.seed, Some(&cfg), &scn)?)?;
    match result {
        Ok(history) => {
            history.write_dir(stage.path())?;
            stage.commit()?;
            if let Some(last) = history.iterations.last() {
                println!(
                    "{} iterations with {}, final return estimate {:.4}",
                    history.iterations.len(),
                    cfg.estimator,
                    last.return_estimate
                );
            }
            Ok(())
        }
        Err(failure) => {
            failure.partial.write_dir(stage.path())?;
            let dump = FailureDump {
                iteration: failure.iteration,
                error: failure.error.to_string(),
            };
            stage.write("failure.json", &serde_json::to_vec_pretty(&dump).map_err(Error::from)?)?;
            stage.commit()?;
            eprintln!("training failed at iteration {}; partial results in {}", failure.iteration, out.display());
            Err(failure.error.into())
        }
    }
}

#[derive(Serialize)]
struct EvaluationReport {
    policy_sha256: String,
    r_test: usize,
    gamma: f64,
    mean_return: f64,
}

fn evaluate(common: Common, policy: &Path, r_test: usize, gamma: f64, out: Option<&Path>) -> CliResult {
    if r_test == 0 {
        return Err(Error::Config("--r-test must be at least 1".into()).into());
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!("--gamma must lie in (0, 1], got {gamma}")).into());
    }
    let scn = load_scenario(common.scenario.as_deref())?;
    let bytes = fs::read(policy).map_err(|e| Error::io(policy, e))?;
    let theta: PolicyParams<f64> = serde_json::from_slice(&bytes).map_err(Error::from)?;
    let pol = policy_for(theta.shape, &scn)?;
    let env = BioEnv::new(scn.clone())?;
    let seed = common.seed.unwrap_or(0);
    let mean = evaluate_policy_crn(&env, &pol, &theta, &scn.true_model, gamma, r_test, &SeedTree::new(seed))?;
    println!("mean return {mean:.6} over {r_test} rollouts");
    if let Some(out) = out {
        let report = EvaluationReport {
            policy_sha256: sha256_hex(&bytes),
            r_test,
            gamma,
            mean_return: mean,
        };
        let stage = Staging::new(out)?;
        stage.write("evaluation.json", &serde_json::to_vec_pretty(&report).map_err(Error::from)?)?;
        stage.write("manifest.json", &manifest::<()>("evaluate", seed, None, &scn)?)?;
        stage.commit()?;
    }
    Ok(())
}

fn compare(common: Common, config: Option<PathBuf>, estimator: Option<EstimatorKind>, out: &Path) -> CliResult {
    let scn = load_scenario(common.scenario.as_deref())?;
    let mut cfg = match config.as_deref() {
        Some(p) => CompareConfig::load(p)?,
        None => CompareConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(est) = estimator {
        cfg.estimators = vec![est];
    }
    cfg.validate()?;
    let stage = Staging::new(out)?;
    let cells = run_comparison(&scn, &cfg)?;
    write_comparison(&cells, stage.path())?;
    stage.write("manifest.json", &manifest("compare", cfg.seed, Some(&cfg), &scn)?)?;
    stage.commit()?;
    let mut failed = 0;
    for cell in &cells {
        match &cell.outcome {
            Ok(data) => println!(
                "{:<4} n_i={:<4} mean {:>9.4}  se {:.4}",
                cell.estimator, cell.n_i, data.summary.mean, data.summary.se
            ),
            Err(reason) => {
                failed += 1;
                println!("{:<4} n_i={:<4} FAILED: {reason}", cell.estimator, cell.n_i);
            }
        }
    }
    if failed > 0 {
        return Err(Error::NonFinite(format!("{failed} cell(s) failed; see failures.csv")).into());
    }
    Ok(())
}

fn oracle_check(seed: u64) -> CliResult {
    let outcomes = run_checks(seed)?;
    let mut failed = 0;
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
        if !o.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Failure::Checks(failed));
    }
    Ok(())
}

fn posterior_diag(
    common: Common,
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    samples: usize,
    out: &Path,
) -> CliResult {
    if samples == 0 {
        return Err(Error::Config("--samples must be at least 1".into()).into());
    }
    let scn = load_scenario(common.scenario.as_deref())?;
    let cfg = load_train_config(config.as_deref(), common.seed)?;
    let tree = SeedTree::new(cfg.seed);
    let dataset = match data {
        Some(p) => FractionDataset::read_csv(fs::File::open(&p).map_err(|e| Error::io(&p, e))?)?,
        None => {
            let mlp = cfg.policy(&scn);
            let theta = PolicyParams::random(mlp.shape(), cfg.init_sd, &mut tree.child(0).rng());
            BioEnv::new(scn.clone())?.collect_real_data(
                &mlp,
                &theta,
                cfg.real_data_per_period,
                &mut tree.child(1).child(0).rng(),
            )?
        }
    };
    let mut posterior = PosteriorState::new(scn.true_model.steps(), scn.actions(), dataset.clone(), cfg.mcmc)?;
    let draws = posterior.sample(samples, &mut tree.child(2).rng())?;

    let stage = Staging::new(out)?;
    dataset.write_csv(stage.create("fractions.csv")?)?;
    posterior.write_diagnostics_csv(stage.create("chains.csv")?)?;
    let mut w = stage.create("posterior_mean.csv")?;
    let io = |e| Error::io(stage.path().join("posterior_mean.csv"), e);
    writeln!(w, "step,action,psi_l,psi_u,eta_l,eta_u,true_psi_l,true_psi_u,true_eta_l,true_eta_u").map_err(io)?;
    for t in 1..HORIZON {
        for a in 0..scn.actions() {
            let mut mean = [0.0; 4];
            for d in &draws {
                for (m, s) in mean.iter_mut().zip(d.shapes(t, a)) {
                    *m += s / samples as f64;
                }
            }
            let truth = scn.true_model.shapes(t, a);
            let row: Vec<String> = mean.iter().chain(&truth).map(|v| v.to_string()).collect();
            writeln!(w, "{t},{a},{}", row.join(",")).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    drop(w);
    stage.write("manifest.json", &manifest("posterior-diag", cfg.seed, Some(&cfg), &scn)?)?;
    stage.commit()?;
    println!("{} observations, {samples} posterior draws", dataset.len());
    Ok(())
}

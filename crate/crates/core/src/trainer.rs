//! The online training loop.
//!
//! ```text
//! D_1 ← real data under θ_0
//! for each period p:
//!     for each iteration k:
//!         ω_k ~ p(ω | D_p)                (TLR: ω_k = ω^c)
//!         n trajectories under (θ_k, ω_k) → buffer record k
//!         θ_{k+1} = θ_k + η ∇̂μ(θ_k)
//!     D_{p+1} = D_p ∪ real data under θ_{k+1}; refresh posterior
//! ```
//!
//! Random streams are addressed hierarchically from `seed`, so every draw is
//! tied to its role and iteration rather than to the order of consumption.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bayes::{McmcSettings, PosteriorState};
use crate::bioenv::{BioEnv, ModelParams, Scenario, HORIZON};
use crate::error::{Error, Result};
use crate::estimators::{
    ilr_gradient, mlr_gradient, pg_gradient, tlr_gradient, write_diagnostics_csv, BufferRecord, Credit, DiagnosticRow,
    EstimatorKind, GradientEstimate, ReplayBuffer,
};
use crate::mdp::{rollout, trajectory_return, Trajectory};
use crate::policy::{l2_norm, Mlp, PolicyParams};
use crate::rng::SeedTree;

const STREAM_INIT: u64 = 0;
const STREAM_REAL_DATA: u64 = 1;
const STREAM_POSTERIOR: u64 = 2;
const STREAM_ROLLOUT: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub periods: usize,
    pub iterations_per_period: usize,
    /// Trajectories simulated per iteration, n_k.
    pub replications: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub estimator: EstimatorKind,
    /// k_r: records used by MLR and TLR.
    pub rolling_window: usize,
    /// Real-world trajectories collected per period, m.
    pub real_data_per_period: usize,
    pub seed: u64,
    /// Width of the policy's hidden layer.
    pub hidden: usize,
    /// Standard deviation of the initial policy weights.
    pub init_sd: f64,
    /// Rescale gradients whose norm exceeds this.
    pub grad_clip: Option<f64>,
    pub mcmc: McmcSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            periods: 5,
            iterations_per_period: 100,
            replications: 25,
            learning_rate: 0.01,
            gamma: 1.0,
            estimator: EstimatorKind::Mlr,
            rolling_window: 10,
            real_data_per_period: 20,
            seed: 0,
            hidden: 16,
            init_sd: 0.1,
            grad_clip: None,
            mcmc: McmcSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("periods", self.periods),
            ("iterations_per_period", self.iterations_per_period),
            ("replications", self.replications),
            ("rolling_window", self.rolling_window),
            ("real_data_per_period", self.real_data_per_period),
            ("hidden", self.hidden),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be nonnegative", self.learning_rate)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(self.init_sd >= 0.0 && self.init_sd.is_finite()) {
            return Err(Error::Config("init_sd must be nonnegative".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        self.mcmc.validate()
    }

    pub fn total_iterations(&self) -> usize {
        self.periods * self.iterations_per_period
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn policy(&self, scn: &Scenario) -> Mlp<f64> {
        Mlp::new(scn.feature_map(), self.hidden, scn.actions())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub period: usize,
    pub grad_norm: f64,
    /// Mean return of this iteration's simulated trajectories.
    pub return_estimate: f64,
    pub max_ratio: f64,
    pub ess: f64,
    /// Policy after this iteration's update.
    pub theta: PolicyParams<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodRecord {
    pub period: usize,
    /// Observations in the dataset the period's posterior was built from.
    pub dataset_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub estimator: EstimatorKind,
    pub initial_theta: PolicyParams<f64>,
    pub iterations: Vec<IterationRecord>,
    pub periods: Vec<PeriodRecord>,
}

#[derive(Serialize)]
struct HistoryRow {
    iteration: usize,
    estimator: EstimatorKind,
    grad_norm: f64,
    return_estimate: f64,
}

impl TrainHistory {
    pub fn write_history_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.iterations {
            w.serialize(HistoryRow {
                iteration: r.iteration,
                estimator: self.estimator,
                grad_norm: r.grad_norm,
                return_estimate: r.return_estimate,
            })?;
        }
        w.flush().map_err(|e| Error::io("<history csv>", e))?;
        Ok(())
    }

    pub fn diagnostics(&self) -> Vec<DiagnosticRow> {
        self.iterations
            .iter()
            .map(|r| DiagnosticRow {
                iteration: r.iteration,
                estimator: self.estimator,
                grad_norm: r.grad_norm,
                max_ratio: r.max_ratio,
                ess: r.ess,
            })
            .collect()
    }

    /// `history.csv`, `diagnostics.csv` and `ckpt/iter_<k>/policy.json` for
    /// every iteration (`iter_0` is the initial policy).
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let file = |name: &str| {
            let p = dir.join(name);
            fs::File::create(&p).map_err(|e| Error::io(&p, e))
        };
        self.write_history_csv(file("history.csv")?)?;
        write_diagnostics_csv(&self.diagnostics(), file("diagnostics.csv")?)?;
        let thetas = std::iter::once((0, &self.initial_theta)).chain(self.iterations.iter().map(|r| (r.iteration, &r.theta)));
        for (k, theta) in thetas {
            let d = dir.join("ckpt").join(format!("iter_{k}"));
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            theta.save_json(&d.join("policy.json"))?;
        }
        Ok(())
    }
}

/// `θ + η g`.
pub fn policy_update(theta: &PolicyParams<f64>, grad: &[f64], eta: f64) -> Result<PolicyParams<f64>> {
    if grad.len() != theta.len() {
        return Err(Error::ShapeMismatch {
            expected: theta.len(),
            got: grad.len(),
        });
    }
    let values: Vec<f64> = theta.values.iter().zip(grad).map(|(t, g)| t + eta * g).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("policy parameters after update".into()));
    }
    PolicyParams::new(theta.shape, values)
}

/// Training failure with everything completed before it.
#[derive(Debug)]
pub struct TrainFailure {
    pub iteration: usize,
    pub error: Error,
    pub partial: TrainHistory,
}

/// Runs the full loop; see the module docs.
pub fn train(scn: &Scenario, cfg: &TrainConfig) -> Result<TrainHistory> {
    train_detailed(scn, cfg).map_err(|f| f.error)
}

/// As [`train`], but on failure also returns the partial history and the
/// iteration that failed.
pub fn train_detailed(scn: &Scenario, cfg: &TrainConfig) -> std::result::Result<TrainHistory, Box<TrainFailure>> {
    let fail = |iteration, error, partial| Box::new(TrainFailure { iteration, error, partial });
    let empty = |theta: PolicyParams<f64>| TrainHistory {
        estimator: cfg.estimator,
        initial_theta: theta,
        iterations: Vec::new(),
        periods: Vec::new(),
    };
    let zero = PolicyParams::zeros(cfg.policy(scn).shape());
    if let Err(e) = cfg.validate() {
        return Err(fail(0, e, empty(zero)));
    }
    let env = match BioEnv::new(scn.clone()) {
        Ok(env) => env,
        Err(e) => return Err(fail(0, e, empty(zero))),
    };
    let mut run = Run::new(&env, cfg);
    match run.execute() {
        Ok(()) => Ok(run.history),
        Err((k, e)) => Err(fail(k, e, run.history)),
    }
}

struct Run<'a> {
    env: &'a BioEnv,
    cfg: &'a TrainConfig,
    policy: Mlp<f64>,
    seeds: SeedTree,
    history: TrainHistory,
}

impl<'a> Run<'a> {
    fn new(env: &'a BioEnv, cfg: &'a TrainConfig) -> Self {
        let seeds = SeedTree::new(cfg.seed);
        let policy = cfg.policy(env.scenario());
        let theta0 = PolicyParams::random(policy.shape(), cfg.init_sd, &mut seeds.child(STREAM_INIT).rng());
        Self {
            env,
            cfg,
            policy,
            seeds,
            history: TrainHistory {
                estimator: cfg.estimator,
                initial_theta: theta0,
                iterations: Vec::new(),
                periods: Vec::new(),
            },
        }
    }

    fn execute(&mut self) -> std::result::Result<(), (usize, Error)> {
        let cfg = self.cfg;
        let scn = self.env.scenario();
        let mut theta = self.history.initial_theta.clone();
        let real_data = |theta: &PolicyParams<f64>, p: u64| {
            let mut rng = self.seeds.child(STREAM_REAL_DATA).child(p).rng();
            self.env.collect_real_data(&self.policy, theta, cfg.real_data_per_period, &mut rng)
        };
        let d1 = real_data(&theta, 0).map_err(|e| (0, e))?;
        let mut posterior =
            PosteriorState::new(HORIZON, scn.actions(), d1, cfg.mcmc).map_err(|e| (0, e))?;
        let credit = Credit::reward_to_go(cfg.gamma);
        let mut buffer: ReplayBuffer<f64, PolicyParams<f64>, ModelParams> = ReplayBuffer::new();
        let mut k = 0;
        for p in 1..=cfg.periods {
            self.history.periods.push(PeriodRecord {
                period: p,
                dataset_size: posterior.dataset.len(),
            });
            for _ in 0..cfg.iterations_per_period {
                k += 1;
                let model = if cfg.estimator == EstimatorKind::Tlr {
                    scn.true_model.clone()
                } else {
                    let mut rng = self.seeds.child(STREAM_POSTERIOR).child(k as u64).rng();
                    posterior
                        .sample(1, &mut rng)
                        .map_err(|e| (k, e))?
                        .pop()
                        .expect("one posterior draw")
                };
                let trajs = self.simulate(&theta, &model, k).map_err(|e| (k, e))?;
                let return_estimate =
                    trajs.iter().map(|t| trajectory_return(t, cfg.gamma)).sum::<f64>() / trajs.len() as f64;
                let record = BufferRecord::new(k, theta.clone(), model.clone(), trajs, self.env, &self.policy)
                    .map_err(|e| (k, e))?;
                buffer.push(record).map_err(|e| (k, e))?;
                let est = self.gradient(&buffer, &theta, &model, &credit).map_err(|e| (k, e))?;
                let grad_norm = l2_norm(&est.gradient);
                let step: Vec<f64> = match cfg.grad_clip {
                    Some(c) if grad_norm > c => est.gradient.iter().map(|g| g * c / grad_norm).collect(),
                    _ => est.gradient.clone(),
                };
                theta = policy_update(&theta, &step, cfg.learning_rate).map_err(|e| (k, e))?;
                self.history.iterations.push(IterationRecord {
                    iteration: k,
                    period: p,
                    grad_norm,
                    return_estimate,
                    max_ratio: est.max_ratio,
                    ess: est.ess,
                    theta: theta.clone(),
                });
                // only the window is ever read again unless ILR needs the lot
                if cfg.estimator != EstimatorKind::Ilr {
                    trim(&mut buffer, cfg.rolling_window);
                }
            }
            let new_data = real_data(&theta, p as u64).map_err(|e| (k, e))?;
            posterior.update_dataset(&new_data).map_err(|e| (k, e))?;
        }
        Ok(())
    }

    fn simulate(&self, theta: &PolicyParams<f64>, model: &ModelParams, k: usize) -> Result<Vec<Trajectory<f64>>> {
        let streams = self.seeds.child(STREAM_ROLLOUT).child(k as u64);
        (0..self.cfg.replications)
            .map(|j| rollout(self.env, &self.policy, theta, model, k, &mut streams.child(j as u64).rng()))
            .collect()
    }

    fn gradient(
        &self,
        buffer: &ReplayBuffer<f64, PolicyParams<f64>, ModelParams>,
        theta: &PolicyParams<f64>,
        model: &ModelParams,
        credit: &Credit<f64>,
    ) -> Result<GradientEstimate<f64>> {
        let (env, pol, kr) = (self.env, &self.policy, self.cfg.rolling_window);
        match self.cfg.estimator {
            EstimatorKind::Pg => pg_gradient(buffer.last().ok_or(Error::EmptyBuffer)?, theta, credit, pol),
            EstimatorKind::Ilr => ilr_gradient(buffer, theta, model, credit, env, pol),
            EstimatorKind::Mlr => mlr_gradient(buffer, theta, model, kr, credit, env, pol),
            EstimatorKind::Tlr => tlr_gradient(buffer, theta, kr, credit, pol),
        }
    }
}

fn trim<T: crate::Real, Th: Clone, M: Clone>(buffer: &mut ReplayBuffer<T, Th, M>, keep: usize) {
    if buffer.len() > keep {
        let mut kept = ReplayBuffer::new();
        for r in buffer.window(keep) {
            kept.push(r.clone()).expect("window records are contiguous");
        }
        *buffer = kept;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(estimator: EstimatorKind) -> TrainConfig {
        TrainConfig {
            periods: 2,
            iterations_per_period: 3,
            replications: 4,
            real_data_per_period: 3,
            estimator,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn policy_update_examples() {
        let shape = crate::policy::ParamShape::Linear { features: 2, actions: 2 };
        let zero = PolicyParams::zeros(shape);
        assert_eq!(policy_update(&zero, &[0.0; 4], 0.5).unwrap(), zero);
        let step = policy_update(&zero, &[1.0; 4], 0.01).unwrap();
        assert!(step.values.iter().all(|v| *v == 0.01));
        let g1 = [1.0, -2.0, 0.5, 4.0];
        let g2 = [0.25, 1.0, -1.0, 2.0];
        let two = policy_update(&policy_update(&zero, &g1, 0.5).unwrap(), &g2, 0.5).unwrap();
        for i in 0..4 {
            assert!((two.values[i] - 0.5 * (g1[i] + g2[i])).abs() < 1e-15);
        }
        assert!(policy_update(&zero, &[f64::INFINITY, 0.0, 0.0, 0.0], 1.0).is_err());
        assert!(policy_update(&zero, &[1.0; 3], 1.0).is_err());
    }

    #[test]
    fn single_step_moves_by_eta_times_gradient() {
        let cfg = TrainConfig {
            periods: 1,
            iterations_per_period: 1,
            replications: 1,
            estimator: EstimatorKind::Pg,
            ..tiny(EstimatorKind::Pg)
        };
        let h = train(&Scenario::default(), &cfg).unwrap();
        assert_eq!(h.iterations.len(), 1);
        let moved: Vec<f64> = h.iterations[0]
            .theta
            .values
            .iter()
            .zip(&h.initial_theta.values)
            .map(|(a, b)| a - b)
            .collect();
        assert!((l2_norm(&moved) - cfg.learning_rate * h.iterations[0].grad_norm).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_freezes_policy() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..tiny(EstimatorKind::Mlr)
        };
        let h = train(&Scenario::default(), &cfg).unwrap();
        assert!(h.iterations.iter().all(|r| r.theta == h.initial_theta));
    }

    #[test]
    fn repeated_runs_are_identical() {
        for est in EstimatorKind::ALL {
            let a = train(&Scenario::default(), &tiny(est)).unwrap();
            let b = train(&Scenario::default(), &tiny(est)).unwrap();
            assert_eq!(a, b, "{est}");
            assert_eq!(a.iterations.len(), 6);
        }
    }

    #[test]
    fn dataset_grows_each_period() {
        let h = train(&Scenario::default(), &tiny(EstimatorKind::Ilr)).unwrap();
        let sizes: Vec<usize> = h.periods.iter().map(|p| p.dataset_size).collect();
        assert_eq!(sizes, vec![6, 12]);
    }

    #[test]
    fn first_iteration_streams_shared_across_estimators() {
        // until θ first changes, MLR, ILR and PG see the same trajectories
        let pg = train(&Scenario::default(), &tiny(EstimatorKind::Pg)).unwrap();
        let ilr = train(&Scenario::default(), &tiny(EstimatorKind::Ilr)).unwrap();
        let mlr = train(&Scenario::default(), &tiny(EstimatorKind::Mlr)).unwrap();
        assert_eq!(pg.initial_theta, mlr.initial_theta);
        assert_eq!(pg.iterations[0].return_estimate, ilr.iterations[0].return_estimate);
        assert_eq!(pg.iterations[0].return_estimate, mlr.iterations[0].return_estimate);
        // one record: all three estimators coincide
        assert!((pg.iterations[0].grad_norm - mlr.iterations[0].grad_norm).abs() < 1e-10);
        assert!((pg.iterations[0].grad_norm - ilr.iterations[0].grad_norm).abs() < 1e-10);
    }

    #[test]
    fn config_validation_and_json() {
        assert!(TrainConfig {
            periods: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::from_json(r#"{"gamma": 1.5}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"unknown": 1}"#).is_err());
        let cfg = TrainConfig::from_json(r#"{"estimator": "tlr", "seed": 3}"#).unwrap();
        assert_eq!(cfg.estimator, EstimatorKind::Tlr);
        assert_eq!(cfg.replications, 25);
    }

    #[test]
    fn output_directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        let h = train(&Scenario::default(), &tiny(EstimatorKind::Tlr)).unwrap();
        h.write_dir(dir.path()).unwrap();
        let history = fs::read_to_string(dir.path().join("history.csv")).unwrap();
        assert!(history.starts_with("iteration,estimator,grad_norm,return_estimate\n1,tlr,"));
        assert_eq!(history.lines().count(), 7);
        let last = PolicyParams::load_json(&dir.path().join("ckpt/iter_6/policy.json")).unwrap();
        assert_eq!(last, h.iterations[5].theta);
        assert!(dir.path().join("ckpt/iter_0/policy.json").exists());
    }
}

//! Comparison experiments: macro replications under common random numbers,
//! evaluation of every iterate under the true model, and curve statistics.
//!
//! For `M` macro replications `r_h(k)` of the evaluated reward at iteration `k`:
//!
//! ```text
//! r̄(k)     = (1/M) Σ_h r_h(k)
//! SE(k)    = √( Σ_h (r_h(k) − r̄(k))² / (M(M−1)) )
//! CI95(k)  = r̄(k) ± 1.96 SE(k)
//! ```
//!
//! and over the last `w` iterations of a curve, `μ_a` is the mean and
//! `SE = (1/√w) √( Σ (r̄(k) − μ_a)² / (w−1) )`.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bioenv::{BioEnv, Scenario};
use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::mdp::{rollout, trajectory_return, Environment, Policy};
use crate::rng::SeedTree;
use crate::scalar::Real;
use crate::trainer::{train_detailed, TrainConfig};

/// Stream of the macro seed used for evaluation rollouts; training uses 0–3.
const STREAM_EVAL: u64 = 4;

/// Mean return of `r_test` rollouts.
pub fn evaluate_policy<T, E, P, R>(
    env: &E,
    policy: &P,
    theta: &P::Params,
    model: &E::Model,
    gamma: T,
    r_test: usize,
    rng: &mut R,
) -> Result<T>
where
    T: Real,
    E: Environment<T>,
    P: Policy<T>,
    R: Rng + ?Sized,
{
    if r_test == 0 {
        return Err(Error::Config("r_test must be at least 1".into()));
    }
    let mut total = T::zero();
    for _ in 0..r_test {
        total = total + trajectory_return(&rollout(env, policy, theta, model, 0, rng)?, gamma);
    }
    Ok(total / T::from_count(r_test))
}

/// Evaluation with one stream per rollout, so two policies evaluated from the
/// same `streams` share initial states and noise draw by draw.
pub fn evaluate_policy_crn<T, E, P>(
    env: &E,
    policy: &P,
    theta: &P::Params,
    model: &E::Model,
    gamma: T,
    r_test: usize,
    streams: &SeedTree,
) -> Result<T>
where
    T: Real,
    E: Environment<T>,
    P: Policy<T>,
{
    if r_test == 0 {
        return Err(Error::Config("r_test must be at least 1".into()));
    }
    let mut total = T::zero();
    for j in 0..r_test {
        let tr = rollout(env, policy, theta, model, 0, &mut streams.child(j as u64).rng())?;
        total = total + trajectory_return(&tr, gamma);
    }
    Ok(total / T::from_count(r_test))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub mean: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Per-iteration mean, standard error and 95% band across macros.
/// `macros[h][k]` is `r_h(k+1)`.
pub fn aggregate_curves(macros: &[Vec<f64>]) -> Result<Vec<CurvePoint>> {
    let m = macros.len();
    if m < 2 {
        return Err(Error::Undefined(format!("standard error needs at least 2 macro replications, got {m}")));
    }
    let len = macros[0].len();
    if macros.iter().any(|r| r.len() != len) {
        return Err(Error::Config("macro replications have different lengths".into()));
    }
    let mf = m as f64;
    Ok((0..len)
        .map(|k| {
            let mean = macros.iter().map(|r| r[k]).sum::<f64>() / mf;
            let ss: f64 = macros.iter().map(|r| (r[k] - mean).powi(2)).sum();
            let se = (ss / (mf * (mf - 1.0))).sqrt();
            CurvePoint {
                iteration: k + 1,
                mean,
                se,
                lo: mean - 1.96 * se,
                hi: mean + 1.96 * se,
            }
        })
        .collect())
}

/// `(μ_a, SE)` over the last `window` values.
pub fn summarize_last_window(curve: &[f64], window: usize) -> Result<(f64, f64)> {
    if window > curve.len() {
        return Err(Error::Config(format!("window {window} longer than curve of {}", curve.len())));
    }
    if window < 2 {
        return Err(Error::Undefined("last-window standard error needs a window of at least 2".into()));
    }
    let tail = &curve[curve.len() - window..];
    let w = window as f64;
    let mean = tail.iter().sum::<f64>() / w;
    let ss: f64 = tail.iter().map(|x| (x - mean).powi(2)).sum();
    Ok((mean, (ss / (w - 1.0)).sqrt() / w.sqrt()))
}

/// OLS slope of the `window`-point trailing moving average of
/// `curve[..first]`, over the iterations where the average is defined.
pub fn smoothed_trend_slope(curve: &[f64], window: usize, first: usize) -> Result<f64> {
    let n = first.min(curve.len());
    if window == 0 || n < window + 1 {
        return Err(Error::Undefined(format!(
            "trend needs more than {window} points, got {n}"
        )));
    }
    let mut ma = Vec::with_capacity(n - window + 1);
    let mut acc: f64 = curve[..window].iter().sum();
    ma.push(acc / window as f64);
    for k in window..n {
        acc += curve[k] - curve[k - window];
        ma.push(acc / window as f64);
    }
    let xs: Vec<f64> = (0..ma.len()).map(|i| i as f64).collect();
    let xm = xs.iter().sum::<f64>() / xs.len() as f64;
    let ym = ma.iter().sum::<f64>() / ma.len() as f64;
    let sxy: f64 = xs.iter().zip(&ma).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - xm).powi(2)).sum();
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub estimator: EstimatorKind,
    pub n_i: usize,
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    /// Base training configuration; `estimator`, `replications` and `seed`
    /// are overridden per cell and macro.
    pub train: TrainConfig,
    pub estimators: Vec<EstimatorKind>,
    /// Grid of per-iteration replication counts n_i.
    pub replications: Vec<usize>,
    pub macros: usize,
    pub r_test: usize,
    pub summary_window: usize,
    pub seed: u64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            estimators: EstimatorKind::ALL.to_vec(),
            replications: vec![25],
            macros: 5,
            r_test: 200,
            summary_window: 100,
            seed: 0,
        }
    }
}

impl CompareConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.macros < 2 {
            return Err(Error::Config("compare needs at least 2 macro replications".into()));
        }
        if self.estimators.is_empty() || self.replications.is_empty() || self.replications.contains(&0) {
            return Err(Error::Config("estimators and replications must be non-empty and positive".into()));
        }
        if self.r_test == 0 {
            return Err(Error::Config("r_test must be at least 1".into()));
        }
        if self.summary_window < 2 || self.summary_window > self.train.total_iterations() {
            return Err(Error::Config(format!(
                "summary_window {} must lie in [2, {}]",
                self.summary_window,
                self.train.total_iterations()
            )));
        }
        Ok(())
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

    /// Training seed of macro `h`; shared by every cell.
    pub fn macro_seed(&self, h: usize) -> u64 {
        SeedTree::new(self.seed).child(h as u64).key()
    }
}

/// Evaluated reward of each iterate of one macro replication.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroResult {
    pub estimator: EstimatorKind,
    pub n_i: usize,
    pub macro_index: usize,
    pub seed: u64,
    /// `r_h(k)` for `k = 1..=P·K`.
    pub rewards: Vec<f64>,
}

/// Trains one macro replication and evaluates every iterate under ω^c.
pub fn run_macro(scn: &Scenario, cfg: &CompareConfig, estimator: EstimatorKind, n_i: usize, h: usize) -> Result<MacroResult> {
    let seed = cfg.macro_seed(h);
    let train_cfg = TrainConfig {
        estimator,
        replications: n_i,
        seed,
        ..cfg.train.clone()
    };
    let history = train_detailed(scn, &train_cfg).map_err(|f| {
        Error::NonFinite(format!(
            "{estimator} n_i={n_i} macro {h} failed at iteration {}: {}",
            f.iteration, f.error
        ))
    })?;
    let env = BioEnv::new(scn.clone())?;
    let policy = train_cfg.policy(scn);
    let eval = SeedTree::new(seed).child(STREAM_EVAL);
    let rewards = history
        .iterations
        .iter()
        .map(|r| {
            evaluate_policy_crn(
                &env,
                &policy,
                &r.theta,
                &scn.true_model,
                train_cfg.gamma,
                cfg.r_test,
                &eval.child(r.iteration as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MacroResult {
        estimator,
        n_i,
        macro_index: h,
        seed,
        rewards,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub estimator: EstimatorKind,
    pub n_i: usize,
    /// Either the aggregated curve, the summary row and the raw macro curves,
    /// or the reason the cell failed.
    pub outcome: std::result::Result<CellData, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellData {
    pub curve: Vec<CurvePoint>,
    pub summary: SummaryRow,
    pub macros: Vec<MacroResult>,
}

impl CellResult {
    pub fn file_stem(&self) -> String {
        format!("{}_{}", self.estimator, self.n_i)
    }
}

/// Every (estimator, n_i) cell with `M` macro replications each, all in
/// parallel. A failing cell is reported without affecting the others.
pub fn run_comparison(scn: &Scenario, cfg: &CompareConfig) -> Result<Vec<CellResult>> {
    cfg.validate()?;
    scn.validate()?;
    let cells: Vec<(EstimatorKind, usize)> = cfg
        .estimators
        .iter()
        .flat_map(|&e| cfg.replications.iter().map(move |&n| (e, n)))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..cfg.macros).map(move |h| (c, h))).collect();
    let runs: Vec<Result<MacroResult>> = jobs
        .par_iter()
        .map(|&(c, h)| run_macro(scn, cfg, cells[c].0, cells[c].1, h))
        .collect();
    let mut runs = runs.into_iter();
    let mut out = Vec::with_capacity(cells.len());
    for &(estimator, n_i) in &cells {
        let macros: Vec<Result<MacroResult>> = runs.by_ref().take(cfg.macros).collect();
        let outcome = assemble_cell(estimator, n_i, macros, cfg.summary_window);
        out.push(CellResult {
            estimator,
            n_i,
            outcome,
        });
    }
    Ok(out)
}

fn assemble_cell(
    estimator: EstimatorKind,
    n_i: usize,
    macros: Vec<Result<MacroResult>>,
    window: usize,
) -> std::result::Result<CellData, String> {
    let macros: Vec<MacroResult> = macros.into_iter().collect::<Result<_>>().map_err(|e| e.to_string())?;
    let rewards: Vec<Vec<f64>> = macros.iter().map(|m| m.rewards.clone()).collect();
    let curve = aggregate_curves(&rewards).map_err(|e| e.to_string())?;
    let means: Vec<f64> = curve.iter().map(|p| p.mean).collect();
    let (mean, se) = summarize_last_window(&means, window).map_err(|e| e.to_string())?;
    Ok(CellData {
        curve,
        summary: SummaryRow {
            estimator,
            n_i,
            mean,
            se,
        },
        macros,
    })
}

/// `curves/<estimator>_<n_i>.csv` per successful cell, `summary.csv`, and
/// `failures.csv` when any cell failed.
pub fn write_comparison(cells: &[CellResult], dir: &Path) -> Result<()> {
    let curves = dir.join("curves");
    fs::create_dir_all(&curves).map_err(|e| Error::io(&curves, e))?;
    let create = |p: &Path| fs::File::create(p).map_err(|e| Error::io(p, e));
    let mut summary = csv::Writer::from_writer(create(&dir.join("summary.csv"))?);
    let mut failures = Vec::new();
    for cell in cells {
        match &cell.outcome {
            Ok(data) => {
                let mut w = csv::Writer::from_writer(create(&curves.join(format!("{}.csv", cell.file_stem())))?);
                for p in &data.curve {
                    w.serialize(p)?;
                }
                w.flush().map_err(|e| Error::io(&curves, e))?;
                summary.serialize(&data.summary)?;
            }
            Err(reason) => failures.push((cell.estimator, cell.n_i, reason.clone())),
        }
    }
    summary.flush().map_err(|e| Error::io(dir, e))?;
    if !failures.is_empty() {
        let mut w = csv::Writer::from_writer(create(&dir.join("failures.csv"))?);
        w.write_record(["estimator", "n_i", "reason"])?;
        for (e, n, r) in failures {
            w.write_record([e.to_string(), n.to_string(), r])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregation_hand_case() {
        let c = aggregate_curves(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        assert_eq!(c[0].mean, 2.0);
        assert!((c[0].se - (2.0f64 / 6.0).sqrt()).abs() < 1e-12);
        assert!((c[0].lo - (2.0 - 1.96 * (1.0f64 / 3.0).sqrt())).abs() < 1e-12);
        assert!((c[0].lo - 0.868).abs() < 1e-3 && (c[0].hi - 3.132).abs() < 1e-3);
    }

    #[test]
    fn aggregation_edge_cases() {
        assert!(aggregate_curves(&[vec![1.0, 2.0]]).is_err());
        assert!(aggregate_curves(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        let same = aggregate_curves(&[vec![4.0, 5.0], vec![4.0, 5.0]]).unwrap();
        assert!(same.iter().all(|p| p.se == 0.0));
        let a = aggregate_curves(&[vec![1.0, 7.0], vec![3.0, 2.0], vec![8.0, 0.5]]).unwrap();
        let b = aggregate_curves(&[vec![8.0, 0.5], vec![1.0, 7.0], vec![3.0, 2.0]]).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p.mean - q.mean).abs() < 1e-15 && (p.se - q.se).abs() < 1e-15);
        }
    }

    #[test]
    fn last_window_cases() {
        assert_eq!(summarize_last_window(&[3.0; 10], 5).unwrap(), (3.0, 0.0));
        assert!(summarize_last_window(&[1.0, 2.0], 1).is_err());
        assert!(summarize_last_window(&[1.0, 2.0], 3).is_err());
        let curve: Vec<f64> = (1..=500).map(|k| k as f64 / 100.0).collect();
        let (mean, se) = summarize_last_window(&curve, 100).unwrap();
        assert!((mean - 4.505).abs() < 1e-12);
        // sample sd of 100 consecutive values spaced 0.01 is 0.01·√(100·101/12)
        let want = 0.01 * (100.0f64 * 101.0 / 12.0).sqrt() / 10.0;
        assert!((se - want).abs() < 1e-12);
    }

    #[test]
    fn trend_slope_signs() {
        let up: Vec<f64> = (0..200).map(|k| k as f64).collect();
        assert!((smoothed_trend_slope(&up, 50, 200).unwrap() - 1.0).abs() < 1e-12);
        let flat = vec![2.0; 200];
        assert_eq!(smoothed_trend_slope(&flat, 50, 200).unwrap(), 0.0);
        let down: Vec<f64> = up.iter().map(|x| -x).collect();
        assert!(smoothed_trend_slope(&down, 50, 200).unwrap() < 0.0);
        assert!(smoothed_trend_slope(&up[..40], 50, 200).is_err());
    }

    #[test]
    fn compare_config_validation() {
        assert!(CompareConfig::from_json(r#"{"macros": 1}"#).is_err());
        assert!(CompareConfig::from_json(r#"{"summary_window": 1000}"#).is_err());
        assert!(CompareConfig::from_json(r#"{"estimators": ["mlr", "xyz"]}"#).is_err());
        let c = CompareConfig::from_json(r#"{"estimators": ["pg"], "train": {"periods": 1}}"#).unwrap();
        assert_eq!(c.train.iterations_per_period, 100);
    }
}

//! Likelihood-ratio policy-gradient estimators over a replay buffer.
//!
//! Every estimator has the shape
//!
//! ```text
//! (1/R) Σ_i Σ_j w_ij · f(τ_ij) · Σ_t ∇log π_θk(a_t | s_t) · c_t
//! ```
//!
//! over `R` records, with `w_ij = 1/n_i` for sampled data, `c_t` the
//! discounted reward-to-go and `f` a density ratio that depends on the
//! estimator:
//!
//! * PG: `f = 1` on the current record only.
//! * ILR: `f = D_k / D_i`, every record in the buffer.
//! * MLR: `f = D_k / Σ_l α_l D_l` over the last `k_r` records, `α_l ∝ n_l`.
//! * TLR: MLR with the transition factors dropped (shared, known model).
//!
//! Densities are relative: the initial-state density and any
//! change-of-variables terms are left out, since they are the same in every
//! numerator and denominator. All ratio arithmetic stays in the log domain.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{trajectory_return, Environment, Policy, Trajectory};
use crate::scalar::{weighted_log_sum_exp, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Pg,
    Ilr,
    Mlr,
    Tlr,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [Self::Pg, Self::Ilr, Self::Mlr, Self::Tlr];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pg => "pg",
            Self::Ilr => "ilr",
            Self::Mlr => "mlr",
            Self::Tlr => "tlr",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pg" => Ok(Self::Pg),
            "ilr" => Ok(Self::Ilr),
            "mlr" => Ok(Self::Mlr),
            "tlr" => Ok(Self::Tlr),
            other => Err(Error::Config(format!(
                "unknown estimator '{other}' (expected pg, ilr, mlr or tlr)"
            ))),
        }
    }
}

/// How rewards are credited to the score at each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Credit<T> {
    pub gamma: T,
    /// Weight every step by the whole return instead of the reward-to-go.
    pub full_return: bool,
}

impl<T: Real> Credit<T> {
    pub fn reward_to_go(gamma: T) -> Self {
        Self {
            gamma,
            full_return: false,
        }
    }

    pub fn full_return(gamma: T) -> Self {
        Self {
            gamma,
            full_return: true,
        }
    }

    fn weights(&self, traj: &Trajectory<T>) -> Vec<T> {
        if self.full_return {
            vec![trajectory_return(traj, self.gamma); traj.len()]
        } else {
            traj.rewards_to_go(self.gamma)
        }
    }
}

/// Trajectories generated under one `(θ_i, ω_i)` pair, with their generating
/// log-densities cached.
#[derive(Debug, Clone)]
pub struct BufferRecord<T, Th, M> {
    pub iteration: usize,
    pub theta: Th,
    pub model: M,
    trajectories: Vec<Trajectory<T>>,
    policy_logdens: Vec<T>,
    model_logdens: Vec<T>,
}

impl<T: Real, Th, M> BufferRecord<T, Th, M> {
    pub fn new<E, P>(
        iteration: usize,
        theta: Th,
        model: M,
        trajectories: Vec<Trajectory<T>>,
        env: &E,
        policy: &P,
    ) -> Result<Self>
    where
        E: Environment<T, Model = M>,
        P: Policy<T, Params = Th>,
    {
        if trajectories.is_empty() {
            return Err(Error::EmptyRecord(iteration));
        }
        let mut policy_logdens = Vec::with_capacity(trajectories.len());
        let mut model_logdens = Vec::with_capacity(trajectories.len());
        for (j, tr) in trajectories.iter().enumerate() {
            if tr.provenance != iteration {
                return Err(Error::InvalidState(format!(
                    "trajectory {j} has provenance {} in record {iteration}",
                    tr.provenance
                )));
            }
            let lp = policy_logdensity(tr, &theta, policy);
            let lm = model_logdensity(tr, &model, env);
            if !(lp + lm).is_finite() {
                return Err(Error::AbsoluteContinuity {
                    record: iteration,
                    trajectory: j,
                });
            }
            policy_logdens.push(lp);
            model_logdens.push(lm);
        }
        Ok(Self {
            iteration,
            theta,
            model,
            trajectories,
            policy_logdens,
            model_logdens,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory<T>] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// `log D_i(τ_ij)` under the record's own pair.
    pub fn generator_logdensity(&self, j: usize) -> T {
        self.policy_logdens[j] + self.model_logdens[j]
    }

    /// Policy factor of `log D_i(τ_ij)`.
    pub fn generator_policy_logdensity(&self, j: usize) -> T {
        self.policy_logdens[j]
    }
}

/// Records in iteration order, indices contiguous.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T, Th, M> {
    records: Vec<BufferRecord<T, Th, M>>,
}

impl<T, Th, M> Default for ReplayBuffer<T, Th, M> {
    fn default() -> Self {
        Self { records: Vec::new() }
    }
}

impl<T: Real, Th, M> ReplayBuffer<T, Th, M> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: BufferRecord<T, Th, M>) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.iteration != last.iteration + 1 {
                return Err(Error::InvalidState(format!(
                    "record {} does not follow record {}",
                    record.iteration, last.iteration
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[BufferRecord<T, Th, M>] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&BufferRecord<T, Th, M>> {
        self.records.last()
    }

    /// The most recent `min(k_r, k)` records.
    pub fn window(&self, k_r: usize) -> &[BufferRecord<T, Th, M>] {
        let start = self.records.len().saturating_sub(k_r);
        &self.records[start..]
    }

    pub fn total_trajectories(&self) -> usize {
        self.records.iter().map(BufferRecord::len).sum()
    }
}

/// Mixture weights `α_i = n_i / Σ n`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureWeights<T> {
    alphas: Vec<T>,
}

impl<T: Real> MixtureWeights<T> {
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if counts.is_empty() || counts.contains(&0) {
            return Err(Error::Config("mixture counts must be positive".into()));
        }
        let total = T::from_count(counts.iter().sum());
        Ok(Self {
            alphas: counts.iter().map(|&n| T::from_count(n) / total).collect(),
        })
    }

    /// Explicit weights; must be positive and sum to one within `1e-12`
    /// (relative to the scalar's precision).
    pub fn new(alphas: Vec<T>) -> Result<Self> {
        let sum: T = alphas.iter().copied().sum();
        let tol = T::lit(1e-12).max(T::epsilon() * T::lit(16.0));
        if alphas.is_empty() || alphas.iter().any(|a| !(*a > T::zero())) || (sum - T::one()).abs() > tol {
            return Err(Error::Config("mixture weights must be positive and sum to 1".into()));
        }
        Ok(Self { alphas })
    }

    pub fn for_records<Th, M>(records: &[BufferRecord<T, Th, M>]) -> Result<Self> {
        Self::from_counts(&records.iter().map(BufferRecord::len).collect::<Vec<_>>())
    }

    pub fn alphas(&self) -> &[T] {
        &self.alphas
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }
}

/// `Σ_t log π_θ(a_t | s_t)`.
pub fn policy_logdensity<T: Real, P: Policy<T>>(traj: &Trajectory<T>, theta: &P::Params, policy: &P) -> T {
    traj.steps
        .iter()
        .map(|s| policy.log_prob(theta, &s.state, s.action))
        .sum()
}

/// `Σ_t log p(s_{t+1} | s_t, a_t; ω)`.
pub fn model_logdensity<T: Real, E: Environment<T>>(traj: &Trajectory<T>, model: &E::Model, env: &E) -> T {
    traj.steps
        .iter()
        .map(|s| env.transition_logpdf(&s.state, s.action, &s.next_state, model))
        .sum()
}

/// Relative trajectory log-density `log D^{π_θ}_{ω}(τ)` (no initial-state term).
pub fn traj_rel_logdensity<T, E, P>(traj: &Trajectory<T>, theta: &P::Params, model: &E::Model, env: &E, policy: &P) -> T
where
    T: Real,
    E: Environment<T>,
    P: Policy<T>,
{
    policy_logdensity(traj, theta, policy) + model_logdensity(traj, model, env)
}

/// `log Σ_i α_i D_i(τ)` over `(θ_i, ω_i)` components.
pub fn mixture_logdensity<T, E, P>(
    traj: &Trajectory<T>,
    components: &[(&P::Params, &E::Model)],
    alphas: &MixtureWeights<T>,
    env: &E,
    policy: &P,
) -> Result<T>
where
    T: Real,
    E: Environment<T>,
    P: Policy<T>,
{
    if components.len() != alphas.len() {
        return Err(Error::ShapeMismatch {
            expected: alphas.len(),
            got: components.len(),
        });
    }
    let logs: Vec<T> = components
        .iter()
        .map(|&(th, m)| traj_rel_logdensity(traj, th, m, env, policy))
        .collect();
    Ok(weighted_log_sum_exp(&logs, alphas.alphas()))
}

/// `f_k(τ) = D_target(τ) / Σ_i α_i D_i(τ)`. When the target is one of the
/// components with weight `α_k`, the ratio is at most `1/α_k`.
pub fn mlr_ratio<T, E, P>(
    traj: &Trajectory<T>,
    target: (&P::Params, &E::Model),
    components: &[(&P::Params, &E::Model)],
    alphas: &MixtureWeights<T>,
    env: &E,
    policy: &P,
) -> Result<T>
where
    T: Real,
    E: Environment<T>,
    P: Policy<T>,
{
    let log_target = traj_rel_logdensity(traj, target.0, target.1, env, policy);
    let log_mix = mixture_logdensity(traj, components, alphas, env, policy)?;
    ratio_from_logs(log_target, log_mix, 0, 0)
}

fn ratio_from_logs<T: Real>(log_num: T, log_den: T, record: usize, trajectory: usize) -> Result<T> {
    if log_num == T::neg_infinity() {
        return Ok(T::zero());
    }
    if log_den == T::neg_infinity() {
        return Err(Error::AbsoluteContinuity { record, trajectory });
    }
    let r = (log_num - log_den).exp();
    if r.is_nan() {
        return Err(Error::NonFinite(format!(
            "likelihood ratio for trajectory {trajectory} of record {record}"
        )));
    }
    Ok(r)
}

/// A gradient estimate and the likelihood ratios behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate<T> {
    pub gradient: Vec<T>,
    /// Largest per-trajectory ratio `f`.
    pub max_ratio: T,
    /// `(Σ f)² / Σ f²` over all reweighted trajectories.
    pub ess: T,
}

impl<T: Real> GradientEstimate<T> {
    pub fn norm(&self) -> T {
        self.gradient.iter().map(|g| *g * *g).sum::<T>().sqrt()
    }
}

/// `Σ_t ∇log π_θ(a_t|s_t) c_t` and `Σ_t log π_θ(a_t|s_t)` in one pass.
fn score_terms<T: Real, P: Policy<T>>(traj: &Trajectory<T>, theta: &P::Params, policy: &P, credit: &Credit<T>) -> (T, Vec<T>) {
    let c = credit.weights(traj);
    let mut logp = T::zero();
    let mut acc: Option<Vec<T>> = None;
    for (step, ct) in traj.steps.iter().zip(c) {
        let (lp, g) = policy.log_prob_and_grad(theta, &step.state, step.action);
        logp = logp + lp;
        match acc.as_mut() {
            Some(a) => a.iter_mut().zip(&g).for_each(|(a, g)| *a = *a + *g * ct),
            None => acc = Some(g.into_iter().map(|g| g * ct).collect()),
        }
    }
    (logp, acc.unwrap_or_default())
}

fn uniform_weights<T: Real, Th, M>(records: &[BufferRecord<T, Th, M>]) -> Vec<Vec<T>> {
    records
        .iter()
        .map(|r| vec![T::one() / T::from_count(r.len()); r.len()])
        .collect()
}

fn check_weights<T, Th, M>(records: &[BufferRecord<T, Th, M>], weights: &[Vec<T>]) -> Result<()>
where
    T: Real,
{
    if records.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    if weights.len() != records.len() {
        return Err(Error::ShapeMismatch {
            expected: records.len(),
            got: weights.len(),
        });
    }
    for (r, w) in records.iter().zip(weights) {
        if w.len() != r.len() {
            return Err(Error::ShapeMismatch {
                expected: r.len(),
                got: w.len(),
            });
        }
    }
    Ok(())
}

/// `(1/R) Σ_i Σ_j w_ij f_ij g_ij`, where `log_ratio(i, j, τ, log π_θk(τ))`
/// supplies `log f_ij`.
fn reweighted_gradient<T, Th, M, P, F>(
    records: &[BufferRecord<T, Th, M>],
    weights: &[Vec<T>],
    theta_k: &Th,
    policy: &P,
    credit: &Credit<T>,
    mut log_ratio: F,
) -> Result<GradientEstimate<T>>
where
    T: Real,
    P: Policy<T, Params = Th>,
    F: FnMut(usize, usize, &Trajectory<T>, T) -> Result<(T, T)>,
{
    check_weights(records, weights)?;
    let mut grad: Option<Vec<T>> = None;
    let (mut max_ratio, mut sum_f, mut sum_f2) = (T::zero(), T::zero(), T::zero());
    for (i, (rec, w)) in records.iter().zip(weights).enumerate() {
        for (j, (tr, &wij)) in rec.trajectories.iter().zip(w).enumerate() {
            let (logp, g) = score_terms(tr, theta_k, policy, credit);
            let (log_num, log_den) = log_ratio(i, j, tr, logp)?;
            let f = ratio_from_logs(log_num, log_den, rec.iteration, j)?;
            max_ratio = max_ratio.max(f);
            sum_f = sum_f + f;
            sum_f2 = sum_f2 + f * f;
            let scale = wij * f;
            match grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, g)| *a = *a + scale * *g),
                None => grad = Some(g.into_iter().map(|g| scale * g).collect()),
            }
        }
    }
    let r = T::from_count(records.len());
    let gradient: Vec<T> = grad.unwrap_or_default().into_iter().map(|g| g / r).collect();
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient estimate".into()));
    }
    let ess = if sum_f2 > T::zero() {
        sum_f * sum_f / sum_f2
    } else {
        T::zero()
    };
    Ok(GradientEstimate {
        gradient,
        max_ratio,
        ess,
    })
}

/// On-policy estimate from one record, `θ` equal to the record's parameters.
pub fn pg_gradient<T, M, P>(record: &BufferRecord<T, P::Params, M>, theta: &P::Params, credit: &Credit<T>, policy: &P) -> Result<GradientEstimate<T>>
where
    T: Real,
    P: Policy<T>,
{
    let records = std::slice::from_ref(record);
    pg_gradient_weighted(records, &uniform_weights(records), theta, credit, policy)
}

/// Plain score-function average with explicit per-trajectory weights.
pub fn pg_gradient_weighted<T, M, P>(
    records: &[BufferRecord<T, P::Params, M>],
    weights: &[Vec<T>],
    theta: &P::Params,
    credit: &Credit<T>,
    policy: &P,
) -> Result<GradientEstimate<T>>
where
    T: Real,
    P: Policy<T>,
{
    reweighted_gradient(records, weights, theta, policy, credit, |_, _, _, _| Ok((T::zero(), T::zero())))
}

pub fn ilr_gradient<T, E, P>(
    buffer: &ReplayBuffer<T, P::Params, E::Model>,
    theta_k: &P::Params,
    model_k: &E::Model,
    credit: &Credit<T>,
    env: &E,
    policy: &P,
) -> Result<GradientEstimate<T>>
where
    T: Real,
    E: Environment<T>,
    P: Policy<T>,
{
    let records = buffer.records();
    ilr_gradient_weighted(records, &uniform_weights(records), theta_k, model_k, credit, env, policy)
}

pub fn ilr_gradient_weighted<T, E, P>(
    records: &[BufferRecord<T, P::Params, E::Model>],
    weights: &[Vec<T>],
    theta_k: &P::Params,
    model_k: &E::Model,
    credit: &Credit<T>,
    env: &E,
    policy: &P,
) -> Result<GradientEstimate<T>>
where
    T: Real,
    E: Environment<T>,
    P: Policy<T>,
{
    reweighted_gradient(records, weights, theta_k, policy, credit, |i, j, tr, logp| {
        let log_num = logp + model_logdensity(tr, model_k, env);
        Ok((log_num, records[i].generator_logdensity(j)))
    })
}

/// Log-densities of a trajectory from record `i` under every component in
/// `records`; the generator's own entry is passed in from the cache.
fn component_logdens<T, Th, M>(records: &[BufferRecord<T, Th, M>], i: usize, own: T, mut eval: impl FnMut(&BufferRecord<T, Th, M>) -> T) -> Vec<T>
where
    T: Real,
{
    records
        .iter()
        .enumerate()
        .map(|(l, rec)| if l == i { own } else { eval(rec) })
        .collect()
}

pub fn mlr_gradient<T, E, P>(
    buffer: &ReplayBuffer<T, P::Params, E::Model>,
    theta_k: &P::Params,
    model_k: &E::Model,
    k_r: usize,
    credit: &Credit<T>,
    env: &E,
    policy: &P,
) -> Result<GradientEstimate<T>>
where
    T: Real,
    E: Environment<T>,
    P: Policy<T>,
{
    if k_r == 0 {
        return Err(Error::Config("rolling window must be at least 1".into()));
    }
    let window = buffer.window(k_r);
    if window.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let alphas = MixtureWeights::for_records(window)?;
    mlr_gradient_weighted(window, &uniform_weights(window), &alphas, theta_k, model_k, credit, env, policy)
}

/// MLR over exactly the given records, which also form the mixture.
#[allow(clippy::too_many_arguments)]
pub fn mlr_gradient_weighted<T, E, P>(
    records: &[BufferRecord<T, P::Params, E::Model>],
    weights: &[Vec<T>],
    alphas: &MixtureWeights<T>,
    theta_k: &P::Params,
    model_k: &E::Model,
    credit: &Credit<T>,
    env: &E,
    policy: &P,
) -> Result<GradientEstimate<T>>
where
    T: Real,
    E: Environment<T>,
    P: Policy<T>,
{
    if alphas.len() != records.len() {
        return Err(Error::ShapeMismatch {
            expected: records.len(),
            got: alphas.len(),
        });
    }
    reweighted_gradient(records, weights, theta_k, policy, credit, |i, j, tr, logp| {
        let log_num = logp + model_logdensity(tr, model_k, env);
        let logs = component_logdens(records, i, records[i].generator_logdensity(j), |rec| {
            traj_rel_logdensity(tr, &rec.theta, &rec.model, env, policy)
        });
        Ok((log_num, weighted_log_sum_exp(&logs, alphas.alphas())))
    })
}

/// MLR when every record was generated under the same, known transition
/// model: only policy factors enter the ratio.
pub fn tlr_gradient<T, M, P>(
    buffer: &ReplayBuffer<T, P::Params, M>,
    theta_k: &P::Params,
    k_r: usize,
    credit: &Credit<T>,
    policy: &P,
) -> Result<GradientEstimate<T>>
where
    T: Real,
    P: Policy<T>,
{
    if k_r == 0 {
        return Err(Error::Config("rolling window must be at least 1".into()));
    }
    let window = buffer.window(k_r);
    if window.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let alphas = MixtureWeights::for_records(window)?;
    tlr_gradient_weighted(window, &uniform_weights(window), &alphas, theta_k, credit, policy)
}

pub fn tlr_gradient_weighted<T, M, P>(
    records: &[BufferRecord<T, P::Params, M>],
    weights: &[Vec<T>],
    alphas: &MixtureWeights<T>,
    theta_k: &P::Params,
    credit: &Credit<T>,
    policy: &P,
) -> Result<GradientEstimate<T>>
where
    T: Real,
    P: Policy<T>,
{
    if alphas.len() != records.len() {
        return Err(Error::ShapeMismatch {
            expected: records.len(),
            got: alphas.len(),
        });
    }
    reweighted_gradient(records, weights, theta_k, policy, credit, |i, j, tr, logp| {
        let logs = component_logdens(records, i, records[i].generator_policy_logdensity(j), |rec| {
            policy_logdensity(tr, &rec.theta, policy)
        });
        Ok((logp, weighted_log_sum_exp(&logs, alphas.alphas())))
    })
}

/// `(1/k) Σ_i (1/n_i) Σ_j (D_k/D_i)(τ_ij) R(τ_ij)`.
pub fn ilr_mean_estimate<T, E, P>(
    buffer: &ReplayBuffer<T, P::Params, E::Model>,
    theta_k: &P::Params,
    model_k: &E::Model,
    gamma: T,
    env: &E,
    policy: &P,
) -> Result<T>
where
    T: Real,
    E: Environment<T>,
    P: Policy<T>,
{
    let records = buffer.records();
    ilr_mean_estimate_weighted(records, &uniform_weights(records), theta_k, model_k, gamma, env, policy)
}

pub fn ilr_mean_estimate_weighted<T, E, P>(
    records: &[BufferRecord<T, P::Params, E::Model>],
    weights: &[Vec<T>],
    theta_k: &P::Params,
    model_k: &E::Model,
    gamma: T,
    env: &E,
    policy: &P,
) -> Result<T>
where
    T: Real,
    E: Environment<T>,
    P: Policy<T>,
{
    check_weights(records, weights)?;
    let mut total = T::zero();
    for (rec, w) in records.iter().zip(weights) {
        for (j, (tr, &wij)) in rec.trajectories.iter().zip(w).enumerate() {
            let log_num = traj_rel_logdensity(tr, theta_k, model_k, env, policy);
            let f = ratio_from_logs(log_num, rec.generator_logdensity(j), rec.iteration, j)?;
            total = total + wij * f * trajectory_return(tr, gamma);
        }
    }
    let est = total / T::from_count(records.len());
    if !est.is_finite() {
        return Err(Error::NonFinite("mean-response estimate".into()));
    }
    Ok(est)
}

/// One row of the per-iteration ratio diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub iteration: usize,
    pub estimator: EstimatorKind,
    pub grad_norm: f64,
    pub max_ratio: f64,
    pub ess: f64,
}

impl DiagnosticRow {
    pub fn new<T: Real>(iteration: usize, estimator: EstimatorKind, est: &GradientEstimate<T>) -> Self {
        Self {
            iteration,
            estimator,
            grad_norm: est.norm().as_f64(),
            max_ratio: est.max_ratio.as_f64(),
            ess: est.ess.as_f64(),
        }
    }
}

pub fn write_diagnostics_csv<W: Write>(rows: &[DiagnosticRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<diagnostics csv>", e))?;
    Ok(())
}

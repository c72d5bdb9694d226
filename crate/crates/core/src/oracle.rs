//! Exact answers on tiny tabular MDPs by enumerating every trajectory.
//!
//! Used to check the estimators: with enumeration probabilities as weights,
//! the weighted estimators compute exact expectations, which must equal the
//! exact policy gradient.

use rand::Rng;

use crate::error::{Error, Result};
use crate::estimators::{
    ilr_gradient_weighted, ilr_mean_estimate_weighted, mlr_gradient_weighted, mlr_ratio, pg_gradient_weighted,
    tlr_gradient_weighted, BufferRecord, Credit, MixtureWeights,
};
use crate::mdp::{trajectory_return, ActionId, Environment, Policy, StateVec, Step, Trajectory};
use crate::policy::{FeatureMap, LinearSoftmax, PolicyParams};
use crate::rng::SeedTree;
use crate::scalar::Real;

/// Largest trajectory count [`enumerate_trajectories`] will produce.
pub const ENUMERATION_CAP: u128 = 1_000_000;

/// Transition tensor `p[s][a][s']`: the tabular model ω.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularModel<T> {
    pub p: Vec<Vec<Vec<T>>>,
}

/// Finite MDP with states `0..n_states` stored as the single coordinate of a
/// [`StateVec`].
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMDP<T> {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub initial: Vec<T>,
    /// `r[s][a]`.
    pub rewards: Vec<Vec<T>>,
}

fn check_distribution<T: Real>(p: &[T], n: usize, what: &str) -> Result<()> {
    if p.len() != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            got: p.len(),
        });
    }
    let sum: T = p.iter().copied().sum();
    let tol = T::lit(1e-12).max(T::epsilon() * T::lit(16.0));
    if p.iter().any(|x| !(x.is_finite() && *x >= T::zero())) || (sum - T::one()).abs() > tol {
        return Err(Error::Config(format!("{what} is not a probability vector")));
    }
    Ok(())
}

impl<T: Real> TabularMDP<T> {
    pub fn new(n_states: usize, n_actions: usize, horizon: usize, initial: Vec<T>, rewards: Vec<Vec<T>>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || horizon == 0 {
            return Err(Error::Config("tabular MDP needs at least one state, action and epoch".into()));
        }
        check_distribution(&initial, n_states, "initial distribution")?;
        if rewards.len() != n_states || rewards.iter().any(|r| r.len() != n_actions || r.iter().any(|x| !x.is_finite())) {
            return Err(Error::Config(format!("reward table must be {n_states}×{n_actions} and finite")));
        }
        Ok(Self {
            n_states,
            n_actions,
            horizon,
            initial,
            rewards,
        })
    }

    pub fn model(&self, p: Vec<Vec<Vec<T>>>) -> Result<TabularModel<T>> {
        if p.len() != self.n_states || p.iter().any(|row| row.len() != self.n_actions) {
            return Err(Error::Config(format!(
                "transition tensor must be {}×{}×{}",
                self.n_states, self.n_actions, self.n_states
            )));
        }
        for (s, row) in p.iter().enumerate() {
            for (a, dist) in row.iter().enumerate() {
                check_distribution(dist, self.n_states, &format!("transition row ({s}, {a})"))?;
            }
        }
        Ok(TabularModel { p })
    }

    /// One-hot state features with a linear softmax over the actions.
    pub fn linear_policy(&self) -> LinearSoftmax<T> {
        LinearSoftmax::new(
            FeatureMap::OneHot {
                coord: 0,
                size: self.n_states,
            },
            self.n_actions,
        )
    }

    fn state(s: usize) -> StateVec<T> {
        StateVec(vec![T::from_count(s)])
    }

    fn index(state: &StateVec<T>) -> usize {
        state.values()[0].round().to_usize().unwrap_or(usize::MAX)
    }

    /// Number of (state sequence, action sequence) pairs.
    pub fn trajectory_count(&self) -> u128 {
        (self.n_states as u128).saturating_pow(self.horizon as u32)
            .saturating_mul((self.n_actions as u128).saturating_pow(self.horizon as u32 - 1))
    }
}

fn categorical<T: Real, R: Rng + ?Sized>(p: &[T], rng: &mut R) -> usize {
    let u = T::lit(rng.random::<f64>());
    let mut acc = T::zero();
    for (i, &x) in p.iter().enumerate() {
        acc = acc + x;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|x| *x > T::zero()).unwrap_or(0)
}

impl<T: Real> Environment<T> for TabularMDP<T> {
    type Model = TabularModel<T>;

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn action_count(&self) -> usize {
        self.n_actions
    }

    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<StateVec<T>> {
        Ok(Self::state(categorical(&self.initial, rng)))
    }

    fn sample_transition<R: Rng + ?Sized>(
        &self,
        state: &StateVec<T>,
        action: ActionId,
        model: &TabularModel<T>,
        rng: &mut R,
    ) -> Result<StateVec<T>> {
        let s = Self::index(state);
        let row = model
            .p
            .get(s)
            .and_then(|r| r.get(action.0))
            .ok_or_else(|| Error::InvalidState(format!("no transition row for ({s}, {})", action.0)))?;
        Ok(Self::state(categorical(row, rng)))
    }

    fn transition_logpdf(&self, state: &StateVec<T>, action: ActionId, next_state: &StateVec<T>, model: &TabularModel<T>) -> T {
        model.p[Self::index(state)][action.0][Self::index(next_state)].ln()
    }

    fn reward(&self, state: &StateVec<T>, action: ActionId, _step: usize) -> T {
        self.rewards[Self::index(state)][action.0]
    }
}

/// Every trajectory with nonzero probability under `(θ, model)`, with that
/// probability (including the initial-state factor).
pub fn enumerate_trajectories<T, P>(
    mdp: &TabularMDP<T>,
    model: &TabularModel<T>,
    theta: &P::Params,
    policy: &P,
    provenance: usize,
) -> Result<Vec<(Trajectory<T>, T)>>
where
    T: Real,
    P: Policy<T>,
{
    let count = mdp.trajectory_count();
    if count > ENUMERATION_CAP {
        return Err(Error::EnumerationTooLarge {
            count,
            cap: ENUMERATION_CAP,
        });
    }
    let mut out = Vec::new();
    let mut stack: Vec<(Vec<Step<T>>, StateVec<T>, T)> = mdp
        .initial
        .iter()
        .enumerate()
        .filter(|(_, p)| **p > T::zero())
        .map(|(s, &p)| (Vec::new(), TabularMDP::state(s), p))
        .collect();
    stack.reverse();
    while let Some((steps, state, prob)) = stack.pop() {
        if steps.len() + 1 == mdp.horizon {
            out.push((Trajectory::new(provenance, steps, T::zero()), prob));
            continue;
        }
        let s = TabularMDP::index(&state);
        let probs = policy.action_probs(theta, &state);
        let mut children = Vec::new();
        for (a, &pa) in probs.iter().enumerate() {
            for (s2, &ps) in model.p[s][a].iter().enumerate() {
                let p = prob * pa * ps;
                if p > T::zero() {
                    let mut next = steps.clone();
                    next.push(Step {
                        state: state.clone(),
                        action: ActionId(a),
                        reward: mdp.rewards[s][a],
                        next_state: TabularMDP::state(s2),
                    });
                    children.push((next, TabularMDP::state(s2), p));
                }
            }
        }
        children.reverse();
        stack.extend(children);
    }
    Ok(out)
}

pub fn exact_expected_return<T, P>(mdp: &TabularMDP<T>, model: &TabularModel<T>, theta: &P::Params, gamma: T, policy: &P) -> Result<T>
where
    T: Real,
    P: Policy<T>,
{
    Ok(enumerate_trajectories(mdp, model, theta, policy, 0)?
        .iter()
        .map(|(tr, p)| *p * trajectory_return(tr, gamma))
        .sum())
}

/// `Σ_τ Pr(τ) Σ_t ∇log π(a_t|s_t) c_t` with the given credit assignment.
pub fn exact_policy_gradient<T, P>(mdp: &TabularMDP<T>, model: &TabularModel<T>, theta: &P::Params, credit: &Credit<T>, policy: &P) -> Result<Vec<T>>
where
    T: Real,
    P: Policy<T>,
    P::Params: Clone,
{
    let (rec, w) = enumerated_record(mdp, model, theta.clone(), policy, 1)?;
    Ok(pg_gradient_weighted(&[rec], &[w], theta, credit, policy)?.gradient)
}

/// `Σ_τ Pr(τ) Σ_t ∇log π(a_t|s_t)`; zero for every θ.
pub fn exact_score_mean<T, P>(mdp: &TabularMDP<T>, model: &TabularModel<T>, theta: &P::Params, policy: &P) -> Result<Vec<T>>
where
    T: Real,
    P: Policy<T>,
{
    let mut acc: Vec<T> = Vec::new();
    for (tr, p) in enumerate_trajectories(mdp, model, theta, policy, 0)? {
        for step in &tr.steps {
            let g = policy.grad_log_prob(theta, &step.state, step.action);
            if acc.is_empty() {
                acc = vec![T::zero(); g.len()];
            }
            acc.iter_mut().zip(&g).for_each(|(a, g)| *a = *a + p * *g);
        }
    }
    Ok(acc)
}

/// Central differences of [`exact_expected_return`].
pub fn finite_difference_gradient<T, P>(mdp: &TabularMDP<T>, model: &TabularModel<T>, theta: &PolicyParams<T>, gamma: T, h: T, policy: &P) -> Result<Vec<T>>
where
    T: Real,
    P: Policy<T, Params = PolicyParams<T>>,
{
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus.values[i] = plus.values[i] + h;
        let mut minus = theta.clone();
        minus.values[i] = minus.values[i] - h;
        let up = exact_expected_return(mdp, model, &plus, gamma, policy)?;
        let down = exact_expected_return(mdp, model, &minus, gamma, policy)?;
        out.push((up - down) / (h + h));
    }
    Ok(out)
}

/// A buffer record holding every trajectory of `(θ, model)`, and the
/// trajectory probabilities to use as weights.
pub fn enumerated_record<T, P>(
    mdp: &TabularMDP<T>,
    model: &TabularModel<T>,
    theta: P::Params,
    policy: &P,
    iteration: usize,
) -> Result<(BufferRecord<T, P::Params, TabularModel<T>>, Vec<T>)>
where
    T: Real,
    P: Policy<T>,
{
    let (trs, probs): (Vec<_>, Vec<_>) = enumerate_trajectories(mdp, model, &theta, policy, iteration)?
        .into_iter()
        .unzip();
    let rec = BufferRecord::new(iteration, theta, model.clone(), trs, mdp, policy)?;
    Ok((rec, probs))
}

/// Exact expectations of the four estimators for a buffer with one record
/// per `(θ_i, ω_i)` pair and equal nominal replication counts. The target is
/// the last pair. TLR records are regenerated under the target's model, as
/// TLR requires one shared model.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorExpectations<T> {
    pub exact: Vec<T>,
    pub pg: Vec<T>,
    pub ilr: Vec<T>,
    pub mlr: Vec<T>,
    pub tlr: Vec<T>,
}

impl<T: Real> EstimatorExpectations<T> {
    /// Largest absolute coordinate error of each estimator, in the order
    /// PG, ILR, MLR, TLR.
    pub fn max_errors(&self) -> [T; 4] {
        let err = |v: &[T]| {
            v.iter()
                .zip(&self.exact)
                .map(|(a, b)| (*a - *b).abs())
                .fold(T::zero(), T::max)
        };
        [err(&self.pg), err(&self.ilr), err(&self.mlr), err(&self.tlr)]
    }
}

pub fn estimator_expectations<T, P>(
    mdp: &TabularMDP<T>,
    pairs: &[(P::Params, TabularModel<T>)],
    credit: &Credit<T>,
    policy: &P,
) -> Result<EstimatorExpectations<T>>
where
    T: Real,
    P: Policy<T>,
    P::Params: Clone,
{
    let (theta_k, model_k) = pairs.last().ok_or(Error::EmptyBuffer)?;
    let exact = exact_policy_gradient(mdp, model_k, theta_k, &reward_to_go_like(credit), policy)?;
    let mut recs = Vec::new();
    let mut weights = Vec::new();
    let mut shared = Vec::new();
    let mut shared_w = Vec::new();
    for (i, (th, m)) in pairs.iter().enumerate() {
        let (r, w) = enumerated_record(mdp, m, th.clone(), policy, i + 1)?;
        recs.push(r);
        weights.push(w);
        let (r, w) = enumerated_record(mdp, model_k, th.clone(), policy, i + 1)?;
        shared.push(r);
        shared_w.push(w);
    }
    let alphas = MixtureWeights::from_counts(&vec![1; pairs.len()])?;
    let k = pairs.len() - 1;
    Ok(EstimatorExpectations {
        exact,
        pg: pg_gradient_weighted(&recs[k..], &weights[k..], theta_k, credit, policy)?.gradient,
        ilr: ilr_gradient_weighted(&recs, &weights, theta_k, model_k, credit, mdp, policy)?.gradient,
        mlr: mlr_gradient_weighted(&recs, &weights, &alphas, theta_k, model_k, credit, mdp, policy)?.gradient,
        tlr: tlr_gradient_weighted(&shared, &shared_w, &alphas, theta_k, credit, policy)?.gradient,
    })
}

// The exact gradient does not depend on how credit is assigned; always use
// reward-to-go for the reference.
fn reward_to_go_like<T: Real>(credit: &Credit<T>) -> Credit<T> {
    Credit::reward_to_go(credit.gamma)
}

/// Random tabular MDP with strictly positive transition rows and initial
/// distribution and rewards in [-1, 1].
pub fn random_mdp<R: Rng + ?Sized>(n_states: usize, n_actions: usize, horizon: usize, rng: &mut R) -> Result<TabularMDP<f64>> {
    let initial = random_simplex(n_states, rng);
    let rewards = (0..n_states)
        .map(|_| (0..n_actions).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    TabularMDP::new(n_states, n_actions, horizon, initial, rewards)
}

pub fn random_model<R: Rng + ?Sized>(mdp: &TabularMDP<f64>, rng: &mut R) -> Result<TabularModel<f64>> {
    let p = (0..mdp.n_states)
        .map(|_| (0..mdp.n_actions).map(|_| random_simplex(mdp.n_states, rng)).collect())
        .collect();
    mdp.model(p)
}

fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|x| x / total).collect();
    // put the rounding residue in the last entry so the row sums to 1 closely
    let head: f64 = p[..n - 1].iter().sum();
    p[n - 1] = 1.0 - head;
    p
}

/// Outcome of one oracle invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, err: f64, tol: f64) -> CheckOutcome {
    CheckOutcome {
        name,
        passed: err <= tol,
        detail: format!("max error {err:.3e} (tolerance {tol:.0e})"),
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// The unbiasedness configuration: 2 states, 2 actions, horizon 3, three
/// records with distinct random `(θ_i, ω_i)`.
pub fn unbiasedness_setup(seed: u64) -> Result<(TabularMDP<f64>, Vec<(PolicyParams<f64>, TabularModel<f64>)>)> {
    let mut rng = SeedTree::new(seed).rng();
    let mdp = random_mdp(2, 2, 3, &mut rng)?;
    let policy = mdp.linear_policy();
    let pairs = (0..3)
        .map(|_| {
            let th = PolicyParams::random(policy.shape(), 1.0, &mut rng);
            random_model(&mdp, &mut rng).map(|m| (th, m))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((mdp, pairs))
}

/// Runs the oracle invariant suite; one outcome per invariant.
pub fn run_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let tree = SeedTree::new(seed);
    let mut rng = tree.child(0).rng();

    // enumeration
    let one = TabularMDP::<f64>::new(1, 1, 2, vec![1.0], vec![vec![0.0]])?;
    let one_model = one.model(vec![vec![vec![1.0]]])?;
    let trs = enumerate_trajectories(&one, &one_model, &PolicyParams::zeros(one.linear_policy().shape()), &one.linear_policy(), 0)?;
    out.push(CheckOutcome {
        name: "enumeration: single-path MDP",
        passed: trs.len() == 1 && trs[0].1 == 1.0,
        detail: format!("{} trajectories", trs.len()),
    });
    let two = TabularMDP::<f64>::new(2, 2, 2, vec![0.5, 0.5], vec![vec![0.0; 2]; 2])?;
    let two_model = two.model(vec![vec![vec![0.5, 0.5]; 2]; 2])?;
    let trs = enumerate_trajectories(&two, &two_model, &PolicyParams::zeros(two.linear_policy().shape()), &two.linear_policy(), 0)?;
    out.push(CheckOutcome {
        name: "enumeration: uniform counting",
        passed: trs.len() == 8 && trs.iter().all(|(_, p)| (*p - 0.125).abs() < 1e-15),
        detail: format!("{} trajectories", trs.len()),
    });
    let mdp = random_mdp(3, 2, 4, &mut rng)?;
    let model = random_model(&mdp, &mut rng)?;
    let policy = mdp.linear_policy();
    let theta = PolicyParams::random(policy.shape(), 1.0, &mut rng);
    let total: f64 = enumerate_trajectories(&mdp, &model, &theta, &policy, 0)?.iter().map(|(_, p)| p).sum();
    out.push(outcome("enumeration: probabilities sum to one", (total - 1.0).abs(), 1e-10));

    // exact return and gradient
    let bandit = TabularMDP::<f64>::new(1, 2, 2, vec![1.0], vec![vec![1.0, 0.0]])?;
    let bandit_model = bandit.model(vec![vec![vec![1.0]; 2]])?;
    let bp = bandit.linear_policy();
    let b0 = PolicyParams::zeros(bp.shape());
    let ret = exact_expected_return(&bandit, &bandit_model, &b0, 1.0, &bp)?;
    let g = exact_policy_gradient(&bandit, &bandit_model, &b0, &Credit::reward_to_go(1.0), &bp)?;
    out.push(outcome("exact return: two-armed bandit", (ret - 0.5).abs(), 1e-15));
    out.push(outcome("exact gradient: two-armed bandit", (g[0] - 0.25).abs().max((g[1] + 0.25).abs()), 1e-15));
    let constant = TabularMDP::new(3, 2, 3, mdp.initial[..3].to_vec(), vec![vec![2.5; 2]; 3])?;
    let cmodel = random_model(&constant, &mut rng)?;
    let cth = PolicyParams::random(constant.linear_policy().shape(), 1.0, &mut rng);
    let cret = exact_expected_return(&constant, &cmodel, &cth, 1.0, &constant.linear_policy())?;
    out.push(outcome("exact return: constant reward", (cret - 5.0).abs(), 1e-12));
    let cg = exact_policy_gradient(&constant, &cmodel, &cth, &Credit::reward_to_go(1.0), &constant.linear_policy())?;
    out.push(outcome("exact gradient: constant reward is zero", max_abs(&cg), 1e-10));

    let exact = exact_policy_gradient(&mdp, &model, &theta, &Credit::reward_to_go(0.9), &policy)?;
    let fd = finite_difference_gradient(&mdp, &model, &theta, 0.9, 1e-6, &policy)?;
    out.push(outcome(
        "exact gradient: finite differences (relative)",
        max_diff(&exact, &fd) / max_abs(&exact),
        1e-7,
    ));
    let score = exact_score_mean(&mdp, &model, &theta, &policy)?;
    out.push(outcome("score has zero mean", max_abs(&score), 1e-10));

    // estimator unbiasedness
    let (umdp, pairs) = unbiasedness_setup(tree.child(1).key())?;
    let upol = umdp.linear_policy();
    for (label, credit) in [
        ("reward-to-go", Credit::reward_to_go(1.0)),
        ("full return", Credit::full_return(1.0)),
    ] {
        let e = estimator_expectations(&umdp, &pairs, &credit, &upol)?;
        let errs = e.max_errors();
        let names: [&'static str; 4] = if label == "reward-to-go" {
            [
                "unbiased: PG",
                "unbiased: ILR",
                "unbiased: MLR",
                "unbiased: TLR",
            ]
        } else {
            [
                "unbiased with full-return credit: PG",
                "unbiased with full-return credit: ILR",
                "unbiased with full-return credit: MLR",
                "unbiased with full-return credit: TLR",
            ]
        };
        for (name, err) in names.into_iter().zip(errs) {
            out.push(outcome(name, err, 1e-10));
        }
    }
    let (theta_k, model_k) = pairs.last().expect("three pairs");
    let mut recs = Vec::new();
    let mut ws = Vec::new();
    for (i, (th, m)) in pairs.iter().enumerate() {
        let (r, w) = enumerated_record(&umdp, m, th.clone(), &upol, i + 1)?;
        recs.push(r);
        ws.push(w);
    }
    let mean = ilr_mean_estimate_weighted(&recs, &ws, theta_k, model_k, 1.0, &umdp, &upol)?;
    let mu = exact_expected_return(&umdp, model_k, theta_k, 1.0, &upol)?;
    out.push(outcome("unbiased: ILR mean response", (mean - mu).abs(), 1e-12));

    // Σ_τ mixture(τ) f_k(τ) = 1: sum over the mixture's own trajectories
    let alphas = MixtureWeights::from_counts(&[2, 1, 1])?;
    let comps: Vec<_> = pairs.iter().map(|(t, m)| (t, m)).collect();
    let mut total = 0.0;
    for ((rec, w), alpha) in recs.iter().zip(&ws).zip(alphas.alphas()) {
        for (tr, p) in rec.trajectories().iter().zip(w) {
            total += alpha * p * mlr_ratio(tr, comps[2], &comps, &alphas, &umdp, &upol)?;
        }
    }
    out.push(outcome("mixture ratio integrates to one", (total - 1.0).abs(), 1e-12));
    Ok(out)
}

//! Finite-horizon decision-process vocabulary shared by every other module:
//! states, actions, trajectories, returns, and the environment and policy
//! contracts.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense real state vector. Coordinate meaning is environment-defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVec<T>(pub Vec<T>);

impl<T: Real> StateVec<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub usize);

impl ActionId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step<T> {
    pub state: StateVec<T>,
    pub action: ActionId,
    pub reward: T,
    pub next_state: StateVec<T>,
}

/// A sampled episode together with the buffer iteration that generated it.
///
/// `terminal_reward` is the reward collected on arriving in the final state
/// `s_H`, where no further action is taken. It is discounted by `γ^(H-1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<T> {
    pub provenance: usize,
    pub steps: Vec<Step<T>>,
    #[serde(default)]
    pub terminal_reward: T,
}

impl<T: Real> Trajectory<T> {
    pub fn new(provenance: usize, steps: Vec<Step<T>>, terminal_reward: T) -> Self {
        Self {
            provenance,
            steps,
            terminal_reward,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// True when every `next_state` equals the following step's `state`.
    pub fn is_chained(&self) -> bool {
        self.steps
            .windows(2)
            .all(|w| w[0].next_state == w[1].state)
    }

    /// Discounted reward-to-go `Σ_{t'≥t} γ^(t'-1) r_t'` for every step `t`,
    /// with the terminal reward folded into the tail. The weights keep the
    /// absolute `γ^(t'-1)` factor, not a re-based one.
    pub fn rewards_to_go(&self, gamma: T) -> Vec<T> {
        let n = self.steps.len();
        let mut out = vec![T::zero(); n];
        let mut acc = gamma.powi(n as i32) * self.terminal_reward;
        for t in (0..n).rev() {
            acc = acc + gamma.powi(t as i32) * self.steps[t].reward;
            out[t] = acc;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscountedReturnConfig<T> {
    pub gamma: T,
}

impl<T: Real> DiscountedReturnConfig<T> {
    pub fn new(gamma: T) -> Result<Self> {
        if gamma > T::zero() && gamma <= T::one() {
            Ok(Self { gamma })
        } else {
            Err(Error::Config(format!("discount factor {gamma} outside (0, 1]")))
        }
    }
}

/// `Σ_t γ^(t-1) r_t` plus the discounted terminal reward. Zero for an empty
/// trajectory.
pub fn trajectory_return<T: Real>(traj: &Trajectory<T>, gamma: T) -> T {
    let mut discount = T::one();
    let mut total = T::zero();
    for step in &traj.steps {
        total = total + discount * step.reward;
        discount = discount * gamma;
    }
    total + discount * traj.terminal_reward
}

/// What an environment must provide to be simulated and to have its
/// trajectories reweighted.
///
/// `transition_logpdf` must be the log-density of the measure
/// `sample_transition` draws from, up to an additive term that depends on the
/// trajectory alone and is the same for every model. Initial-state densities
/// are never needed: every likelihood ratio shares `p(s_1)`.
pub trait Environment<T: Real> {
    /// Transition-model parameters (ω).
    type Model;

    /// Number of states in a full episode; trajectories carry `horizon() - 1` steps.
    fn horizon(&self) -> usize;

    fn action_count(&self) -> usize;

    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<StateVec<T>>;

    fn sample_transition<R: Rng + ?Sized>(
        &self,
        state: &StateVec<T>,
        action: ActionId,
        model: &Self::Model,
        rng: &mut R,
    ) -> Result<StateVec<T>>;

    fn transition_logpdf(
        &self,
        state: &StateVec<T>,
        action: ActionId,
        next_state: &StateVec<T>,
        model: &Self::Model,
    ) -> T;

    /// Reward for taking `action` in `state` at 1-based decision epoch `step`.
    fn reward(&self, state: &StateVec<T>, action: ActionId, step: usize) -> T;

    /// Reward on reaching the final state.
    fn terminal_reward(&self, _state: &StateVec<T>) -> T {
        T::zero()
    }
}

/// Parameterised stochastic policy over a finite action set.
///
/// Implementors supply logits and the score function; probabilities, log
/// probabilities and sampling follow from the logits.
pub trait Policy<T: Real> {
    type Params;

    fn action_count(&self) -> usize;

    fn logits(&self, theta: &Self::Params, state: &StateVec<T>) -> Vec<T>;

    /// `∇_θ log π_θ(a | s)`, same length as the flat parameter vector.
    fn grad_log_prob(&self, theta: &Self::Params, state: &StateVec<T>, action: ActionId) -> Vec<T>;

    fn action_probs(&self, theta: &Self::Params, state: &StateVec<T>) -> Vec<T> {
        softmax(&self.logits(theta, state))
    }

    fn log_prob(&self, theta: &Self::Params, state: &StateVec<T>, action: ActionId) -> T {
        log_softmax_at(&self.logits(theta, state), action.index())
    }

    /// Both at once; implementations with a shared forward pass override this.
    fn log_prob_and_grad(
        &self,
        theta: &Self::Params,
        state: &StateVec<T>,
        action: ActionId,
    ) -> (T, Vec<T>) {
        (
            self.log_prob(theta, state, action),
            self.grad_log_prob(theta, state, action),
        )
    }

    fn sample_action<R: Rng + ?Sized>(
        &self,
        theta: &Self::Params,
        state: &StateVec<T>,
        rng: &mut R,
    ) -> ActionId {
        let probs = self.action_probs(theta, state);
        let u = T::lit(rng.random::<f64>());
        let mut acc = T::zero();
        for (a, p) in probs.iter().enumerate() {
            acc = acc + *p;
            if u < acc {
                return ActionId(a);
            }
        }
        // u landed in the rounding gap above the last cumulative sum
        let last = probs.iter().rposition(|p| *p > T::zero()).unwrap_or(0);
        ActionId(last)
    }
}

/// Numerically stable softmax (max-shifted).
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn log_softmax_at<T: Real>(logits: &[T], index: usize) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = logits.iter().map(|&z| (z - max).exp()).sum();
    logits[index] - max - total.ln()
}

/// Samples one episode under policy parameters `theta` and model `model`.
pub fn rollout<T, E, P, R>(
    env: &E,
    policy: &P,
    theta: &P::Params,
    model: &E::Model,
    provenance: usize,
    rng: &mut R,
) -> Result<Trajectory<T>>
where
    T: Real,
    E: Environment<T>,
    P: Policy<T>,
    R: Rng + ?Sized,
{
    let horizon = env.horizon();
    let mut state = env.sample_initial(rng)?;
    let mut steps = Vec::with_capacity(horizon.saturating_sub(1));
    for t in 1..horizon {
        let action = policy.sample_action(theta, &state, rng);
        let reward = env.reward(&state, action, t);
        let next_state = env.sample_transition(&state, action, model, rng)?;
        if !next_state.is_finite() {
            return Err(Error::InvalidState(format!(
                "non-finite state {:?} after step {t}",
                next_state.values()
            )));
        }
        steps.push(Step {
            state: std::mem::replace(&mut state, next_state.clone()),
            action,
            reward,
            next_state,
        });
    }
    let terminal_reward = env.terminal_reward(&state);
    Ok(Trajectory::new(provenance, steps, terminal_reward))
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord<T> {
    provenance: usize,
    /// Each step as `[state..., action, reward, next_state...]`.
    steps: Vec<Vec<T>>,
    state_dim: usize,
    terminal_reward: T,
}

/// Writes trajectories as newline-delimited JSON, one object per trajectory.
pub fn write_trajectories_ndjson<T, W>(trajs: &[Trajectory<T>], mut out: W) -> Result<()>
where
    T: Real + Serialize,
    W: Write,
{
    for traj in trajs {
        let state_dim = traj.steps.first().map_or(0, |s| s.state.dim());
        let steps = traj
            .steps
            .iter()
            .map(|s| {
                let mut row = s.state.0.clone();
                row.push(T::from_count(s.action.0));
                row.push(s.reward);
                row.extend_from_slice(&s.next_state.0);
                row
            })
            .collect();
        let rec = TrajectoryRecord {
            provenance: traj.provenance,
            steps,
            state_dim,
            terminal_reward: traj.terminal_reward,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")
            .map_err(|e| Error::io("<trajectory stream>", e))?;
    }
    Ok(())
}

pub fn read_trajectories_ndjson<T, R>(input: R) -> Result<Vec<Trajectory<T>>>
where
    T: Real + for<'de> Deserialize<'de>,
    R: BufRead,
{
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<trajectory stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord<T> = serde_json::from_str(&line)?;
        let d = rec.state_dim;
        let mut steps = Vec::with_capacity(rec.steps.len());
        for row in rec.steps {
            if row.len() != 2 * d + 2 {
                return Err(Error::ShapeMismatch {
                    expected: 2 * d + 2,
                    got: row.len(),
                });
            }
            let action = row[d]
                .to_usize()
                .ok_or_else(|| Error::InvalidState(format!("bad action code {}", row[d])))?;
            steps.push(Step {
                state: StateVec(row[..d].to_vec()),
                action: ActionId(action),
                reward: row[d + 1],
                next_state: StateVec(row[d + 2..].to_vec()),
            });
        }
        out.push(Trajectory::new(rec.provenance, steps, rec.terminal_reward));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    fn synthetic(rewards: &[f64]) -> Trajectory<f64> {
        let steps = rewards
            .iter()
            .enumerate()
            .map(|(t, &r)| Step {
                state: StateVec(vec![t as f64]),
                action: ActionId(0),
                reward: r,
                next_state: StateVec(vec![t as f64 + 1.0]),
            })
            .collect();
        Trajectory::new(1, steps, 0.0)
    }

    #[test]
    fn return_examples() {
        assert_eq!(trajectory_return(&synthetic(&[-8.0, -8.0, 40.0]), 1.0), 24.0);
        assert_eq!(trajectory_return(&synthetic(&[]), 0.3), 0.0);
        assert_eq!(trajectory_return(&synthetic(&[1.0, 1.0, 1.0]), 0.5), 1.75);
    }

    #[test]
    fn terminal_reward_is_discounted_last() {
        let mut t = synthetic(&[-8.0, -8.0]);
        t.terminal_reward = 40.0;
        assert_eq!(trajectory_return(&t, 1.0), 24.0);
        assert_eq!(trajectory_return(&t, 0.5), -8.0 - 4.0 + 10.0);
        assert_eq!(t.rewards_to_go(0.5), vec![-2.0, 6.0]);
    }

    #[test]
    fn gamma_validation() {
        assert!(DiscountedReturnConfig::new(1.0).is_ok());
        assert!(DiscountedReturnConfig::new(0.0).is_err());
        assert!(DiscountedReturnConfig::new(1.5).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0_f64; 10]);
        assert!(p.iter().all(|&x| (x - 0.1).abs() < 1e-15));
        let p = softmax(&[1.0_f64, 0.0]);
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
        let a = softmax(&[0.3_f64, 0.3, 0.3]);
        let b = softmax(&[7.3_f64, 7.3, 7.3]);
        assert_eq!(a, b);
    }

    /// One action, deterministic chain, constant reward.
    struct Constant {
        reward: f64,
        horizon: usize,
    }

    impl Environment<f64> for Constant {
        type Model = ();
        fn horizon(&self) -> usize {
            self.horizon
        }
        fn action_count(&self) -> usize {
            1
        }
        fn sample_initial<R: Rng + ?Sized>(&self, _rng: &mut R) -> Result<StateVec<f64>> {
            Ok(StateVec(vec![0.0]))
        }
        fn sample_transition<R: Rng + ?Sized>(
            &self,
            state: &StateVec<f64>,
            _a: ActionId,
            _m: &(),
            _rng: &mut R,
        ) -> Result<StateVec<f64>> {
            Ok(StateVec(vec![state.0[0] + 1.0]))
        }
        fn transition_logpdf(&self, _: &StateVec<f64>, _: ActionId, _: &StateVec<f64>, _: &()) -> f64 {
            0.0
        }
        fn reward(&self, _: &StateVec<f64>, _: ActionId, _: usize) -> f64 {
            self.reward
        }
    }

    struct OnlyAction;

    impl Policy<f64> for OnlyAction {
        type Params = ();
        fn action_count(&self) -> usize {
            1
        }
        fn logits(&self, _: &(), _: &StateVec<f64>) -> Vec<f64> {
            vec![0.0]
        }
        fn grad_log_prob(&self, _: &(), _: &StateVec<f64>, _: ActionId) -> Vec<f64> {
            vec![]
        }
    }

    #[test]
    fn degenerate_rollout() {
        let env = Constant { reward: 2.5, horizon: 3 };
        let mut rng = SeedTree::new(0).rng();
        let traj = rollout(&env, &OnlyAction, &(), &(), 4, &mut rng).unwrap();
        assert_eq!(traj.len(), 2);
        assert_eq!(traj.provenance, 4);
        assert!(traj.is_chained());
        assert_eq!(trajectory_return(&traj, 1.0), 5.0);
    }

    #[test]
    fn ndjson_round_trip() {
        let mut t = synthetic(&[1.5, -2.0]);
        t.terminal_reward = 0.25;
        let mut buf = Vec::new();
        write_trajectories_ndjson(&[t.clone(), synthetic(&[])], &mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 2);
        let back: Vec<Trajectory<f64>> = read_trajectories_ndjson(&buf[..]).unwrap();
        assert_eq!(back[0], t);
        assert!(back[1].is_empty());
    }
}

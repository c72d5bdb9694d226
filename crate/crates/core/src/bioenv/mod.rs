//! Downstream purification environment.
//!
//! State is `(protein mg, impurity mg, step)`. The initial state comes from the
//! upstream fermentation plus harvest noise; each chromatography step keeps a
//! Beta-distributed fraction of protein and of impurity, with shapes chosen by
//! the pooling-window action. Purity is `p / (p + i)`.

pub mod upstream;

use std::path::Path;

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::bayes::{FractionDataset, FractionObs};
use crate::error::{Error, Result};
use crate::mdp::{rollout, ActionId, Environment, Policy, StateVec, Trajectory};
use crate::policy::FeatureMap;

pub use upstream::{integrate_biomass, integrate_upstream, UpstreamParams};

/// Lower clamp on harvested masses (mg).
pub const MASS_FLOOR: f64 = 1e-6;
/// Sampled removal fractions are kept inside `[FRACTION_EPS, 1 - FRACTION_EPS]`.
pub const FRACTION_EPS: f64 = 1e-12;
/// Three decision epochs: two transitions, reward on the third state.
pub const HORIZON: usize = 3;

pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// `log Beta(x; a, b)`, `-inf` outside (0, 1).
pub fn beta_ln_pdf(x: f64, a: f64, b: f64) -> f64 {
    beta_ln_pdf_with_norm(x, a, b, ln_beta(a, b))
}

fn beta_ln_pdf_with_norm(x: f64, a: f64, b: f64, ln_norm: f64) -> f64 {
    if !(x > 0.0 && x < 1.0) {
        return f64::NEG_INFINITY;
    }
    (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p() - ln_norm
}

/// Transition model ω: per (step, action), Beta shapes `[ψˡ, ψᵘ, ηˡ, ηᵘ]` for
/// the retained impurity (Ψ) and protein (H) fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<[f64; 4]>>", into = "Vec<Vec<[f64; 4]>>")]
pub struct ModelParams {
    steps: usize,
    actions: usize,
    shapes: Vec<[f64; 4]>,
    /// `ln B` for the impurity and protein pairs of every entry.
    ln_norms: Vec<[f64; 2]>,
}

impl ModelParams {
    pub fn new(table: Vec<Vec<[f64; 4]>>) -> Result<Self> {
        let steps = table.len();
        let actions = table.first().map_or(0, Vec::len);
        if steps == 0 || actions == 0 || table.iter().any(|row| row.len() != actions) {
            return Err(Error::Config("beta shape table must be a non-empty rectangle".into()));
        }
        let shapes: Vec<[f64; 4]> = table.into_iter().flatten().collect();
        if let Some(bad) = shapes
            .iter()
            .flatten()
            .find(|s| !(s.is_finite() && **s > 0.0))
        {
            return Err(Error::Config(format!("beta shapes must be positive and finite, got {bad}")));
        }
        let ln_norms = shapes
            .iter()
            .map(|s| [ln_beta(s[0], s[1]), ln_beta(s[2], s[3])])
            .collect();
        Ok(Self {
            steps,
            actions,
            shapes,
            ln_norms,
        })
    }

    /// Every entry set to the same four shapes.
    pub fn uniform(steps: usize, actions: usize, entry: [f64; 4]) -> Result<Self> {
        Self::new(vec![vec![entry; actions]; steps])
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    /// `[ψˡ, ψᵘ, ηˡ, ηᵘ]` at 1-based `step` and 0-based `action`.
    pub fn shapes(&self, step: usize, action: usize) -> [f64; 4] {
        self.shapes[self.index(step, action)]
    }

    fn index(&self, step: usize, action: usize) -> usize {
        (step - 1) * self.actions + action
    }

    pub fn table(&self) -> Vec<Vec<[f64; 4]>> {
        self.shapes.chunks(self.actions).map(<[_]>::to_vec).collect()
    }

    /// Joint log-density of retained fractions `(h, ψ)` at (step, action).
    pub fn fraction_logpdf(&self, step: usize, action: usize, h: f64, psi: f64) -> f64 {
        let idx = self.index(step, action);
        let s = &self.shapes[idx];
        let n = &self.ln_norms[idx];
        beta_ln_pdf_with_norm(h, s[2], s[3], n[1]) + beta_ln_pdf_with_norm(psi, s[0], s[1], n[0])
    }
}

impl TryFrom<Vec<Vec<[f64; 4]>>> for ModelParams {
    type Error = Error;
    fn try_from(table: Vec<Vec<[f64; 4]>>) -> Result<Self> {
        Self::new(table)
    }
}

impl From<ModelParams> for Vec<Vec<[f64; 4]>> {
    fn from(m: ModelParams) -> Self {
        m.table()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    /// Failure cost when purity misses the requirement ($).
    pub failure_cost: f64,
    /// Shortage cost per missing mg ($/mg).
    pub shortage_cost: f64,
    /// Product price ($/mg).
    pub price: f64,
    /// Protein requirement p_d (mg).
    pub protein_target: f64,
    /// Purity requirement r_d.
    pub purity_target: f64,
    /// Cost per chromatography column ($).
    pub op_cost: f64,
    /// Also charge `op_cost` in the terminal epoch.
    #[serde(default)]
    pub charge_terminal_op_cost: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            failure_cost: 48.0,
            shortage_cost: 6.0,
            price: 5.0,
            protein_target: 8.0,
            purity_target: 0.85,
            op_cost: 8.0,
            charge_terminal_op_cost: false,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let costs = [
            self.failure_cost,
            self.shortage_cost,
            self.price,
            self.protein_target,
            self.op_cost,
        ];
        if costs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::Config("reward constants must be finite and nonnegative".into()));
        }
        if !(self.purity_target > 0.0 && self.purity_target < 1.0) {
            return Err(Error::Config(format!(
                "purity target {} outside (0, 1)",
                self.purity_target
            )));
        }
        Ok(())
    }
}

/// Reward at the state's own epoch: a column cost before the last epoch,
/// the sale/shortage/failure outcome at the last.
pub fn reward(state: &StateVec<f64>, cfg: &RewardConfig) -> f64 {
    let [p, i, t] = <[f64; 3]>::try_from(state.values()).expect("bioprocess state has three coordinates");
    if (t.round() as usize) < HORIZON {
        return -cfg.op_cost;
    }
    let extra = if cfg.charge_terminal_op_cost { -cfg.op_cost } else { 0.0 };
    let total = p + i;
    if total <= 0.0 || p / total < cfg.purity_target {
        return -cfg.failure_cost + extra;
    }
    let sale = if p >= cfg.protein_target {
        cfg.price * cfg.protein_target
    } else {
        cfg.price * p - cfg.shortage_cost * (cfg.protein_target - p)
    };
    sale + extra
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateBounds {
    /// P̄ (mg).
    pub protein_max: f64,
    /// Ī (mg).
    pub impurity_max: f64,
}

/// Full environment description, including the "real world" model ω^c.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub upstream: UpstreamParams,
    pub true_model: ModelParams,
    pub reward: RewardConfig,
    pub bounds: StateBounds,
}

impl Default for Scenario {
    /// Synthetic calibration. Window `a` keeps a protein fraction with mean
    /// `0.99 − 0.02a` and an impurity fraction with mean `0.55 − 0.05a`, both
    /// with concentration 40: later windows purify harder and lose more product.
    fn default() -> Self {
        let row: Vec<[f64; 4]> = (0..10)
            .map(|a| {
                let a = a as f64;
                let keep_protein = 0.99 - 0.02 * a;
                let keep_impurity = 0.55 - 0.05 * a;
                let k = 40.0;
                [
                    k * keep_impurity,
                    k * (1.0 - keep_impurity),
                    k * keep_protein,
                    k * (1.0 - keep_protein),
                ]
            })
            .collect();
        Self {
            upstream: UpstreamParams::default(),
            true_model: ModelParams::new(vec![row; HORIZON]).expect("valid default shapes"),
            reward: RewardConfig::default(),
            bounds: StateBounds {
                protein_max: 40.0,
                impurity_max: 40.0,
            },
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.upstream.validate()?;
        self.reward.validate()?;
        if !(self.bounds.protein_max > 0.0 && self.bounds.impurity_max > 0.0) {
            return Err(Error::Config("state bounds must be positive".into()));
        }
        if self.true_model.steps() < HORIZON - 1 {
            return Err(Error::Config(format!(
                "true model covers {} steps, need at least {}",
                self.true_model.steps(),
                HORIZON - 1
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scn: Self = serde_json::from_str(text)?;
        scn.validate()?;
        Ok(scn)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn actions(&self) -> usize {
        self.true_model.actions()
    }

    /// Normalised policy input `(p / P̄, i / Ī, t / H)`.
    pub fn feature_map(&self) -> FeatureMap<f64> {
        FeatureMap::Scaled {
            divisors: vec![
                self.bounds.protein_max,
                self.bounds.impurity_max,
                HORIZON as f64,
            ],
        }
    }
}

/// The purification MDP built from a [`Scenario`].
#[derive(Debug, Clone)]
pub struct BioEnv {
    scenario: Scenario,
    /// With no feed, the final biomass does not depend on the inlet
    /// concentration and is integrated once.
    batch_biomass: Option<f64>,
}

impl BioEnv {
    pub fn new(scenario: Scenario) -> Result<Self> {
        scenario.validate()?;
        let batch_biomass = if scenario.upstream.feed_rate == 0.0 {
            Some(integrate_biomass(&scenario.upstream, scenario.upstream.s_in_mean, scenario.upstream.dt)?)
        } else {
            None
        };
        Ok(Self {
            scenario,
            batch_biomass,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    /// Harvested masses plus noise, clamped to `[MASS_FLOOR, bound]`.
    pub fn sample_initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<StateVec<f64>> {
        let up = &self.scenario.upstream;
        let nu1 = normal(up.nu1_mean, up.nu1_sd, rng)?;
        let nu2 = normal(up.nu2_mean, up.nu2_sd, rng)?;
        let s_in = normal(up.s_in_mean, up.s_in_sd, rng)?;
        let x_end = match self.batch_biomass {
            Some(x) => x,
            None => integrate_biomass(up, s_in, up.dt)?,
        };
        let (pu, iu) = upstream::harvest_masses(up, x_end, nu1, nu2);
        let p = pu + normal(0.0, up.harvest_noise_sd, rng)?;
        let i = iu + normal(0.0, up.harvest_noise_sd, rng)?;
        let b = &self.scenario.bounds;
        Ok(StateVec(vec![
            p.clamp(MASS_FLOOR, b.protein_max),
            i.clamp(MASS_FLOOR, b.impurity_max),
            1.0,
        ]))
    }

    /// One chromatography step under model `model`.
    pub fn transition<R: Rng + ?Sized>(
        &self,
        state: &StateVec<f64>,
        action: ActionId,
        model: &ModelParams,
        rng: &mut R,
    ) -> Result<StateVec<f64>> {
        let (p, i, t) = self.checked_state(state, action, model)?;
        let [psi_l, psi_u, eta_l, eta_u] = model.shapes(t, action.0);
        let h = beta(eta_l, eta_u, rng)?;
        let psi = beta(psi_l, psi_u, rng)?;
        Ok(StateVec(vec![h * p, psi * i, (t + 1) as f64]))
    }

    fn checked_state(&self, state: &StateVec<f64>, action: ActionId, model: &ModelParams) -> Result<(f64, f64, usize)> {
        let v = state.values();
        if v.len() != 3 {
            return Err(Error::InvalidState(format!("expected 3 coordinates, got {}", v.len())));
        }
        let (p, i) = (v[0], v[1]);
        if !(p > 0.0 && i > 0.0) {
            return Err(Error::InvalidState(format!("masses must be positive, got p={p}, i={i}")));
        }
        let t = v[2].round() as usize;
        if t == 0 || t >= HORIZON || t > model.steps() {
            return Err(Error::InvalidState(format!("no transition from step {}", v[2])));
        }
        if action.0 >= model.actions() {
            return Err(Error::InvalidState(format!("action {} out of range", action.0)));
        }
        Ok((p, i, t))
    }

    /// Log-density of the retained fractions implied by `state → next_state`.
    /// The Jacobian `−log(p_t i_t)` is left out; it is the same under every model.
    pub fn transition_logpdf(
        &self,
        state: &StateVec<f64>,
        action: ActionId,
        next_state: &StateVec<f64>,
        model: &ModelParams,
    ) -> f64 {
        let (s, n) = (state.values(), next_state.values());
        let t = s[2].round() as usize;
        if n[2].round() as usize != t + 1 || t == 0 || t > model.steps() || s[0] <= 0.0 || s[1] <= 0.0 {
            return f64::NEG_INFINITY;
        }
        model.fraction_logpdf(t, action.0, n[0] / s[0], n[1] / s[1])
    }

    /// Rolls out `m` episodes under the true model and records every executed
    /// transition as a removal-fraction observation.
    pub fn collect_real_data<P, R>(&self, policy: &P, theta: &P::Params, m: usize, rng: &mut R) -> Result<FractionDataset>
    where
        P: Policy<f64>,
        R: Rng + ?Sized,
    {
        let trajs = (0..m)
            .map(|_| rollout(self, policy, theta, &self.scenario.true_model, 0, rng))
            .collect::<Result<Vec<_>>>()?;
        fractions_from_trajectories(&trajs)
    }
}

/// Removal fractions `(p_{t+1}/p_t, i_{t+1}/i_t)` of every transition.
pub fn fractions_from_trajectories(trajs: &[Trajectory<f64>]) -> Result<FractionDataset> {
    let mut observations = Vec::new();
    for traj in trajs {
        for step in &traj.steps {
            let (s, n) = (step.state.values(), step.next_state.values());
            observations.push(FractionObs {
                step: s[2].round() as usize,
                action: step.action.0,
                h_fraction: n[0] / s[0],
                psi_fraction: n[1] / s[1],
            });
        }
    }
    FractionDataset::new(observations)
}

fn normal<R: Rng + ?Sized>(mean: f64, sd: f64, rng: &mut R) -> Result<f64> {
    Normal::new(mean, sd)
        .map(|d| d.sample(rng))
        .map_err(|e| Error::Config(format!("normal({mean}, {sd}): {e}")))
}

fn beta<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    let d = Beta::new(a, b).map_err(|e| Error::Config(format!("beta({a}, {b}): {e}")))?;
    Ok(d.sample(rng).clamp(FRACTION_EPS, 1.0 - FRACTION_EPS))
}

impl Environment<f64> for BioEnv {
    type Model = ModelParams;

    fn horizon(&self) -> usize {
        HORIZON
    }

    fn action_count(&self) -> usize {
        self.scenario.actions()
    }

    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<StateVec<f64>> {
        self.sample_initial_state(rng)
    }

    fn sample_transition<R: Rng + ?Sized>(
        &self,
        state: &StateVec<f64>,
        action: ActionId,
        model: &ModelParams,
        rng: &mut R,
    ) -> Result<StateVec<f64>> {
        self.transition(state, action, model, rng)
    }

    fn transition_logpdf(
        &self,
        state: &StateVec<f64>,
        action: ActionId,
        next_state: &StateVec<f64>,
        model: &ModelParams,
    ) -> f64 {
        BioEnv::transition_logpdf(self, state, action, next_state, model)
    }

    fn reward(&self, state: &StateVec<f64>, _action: ActionId, _step: usize) -> f64 {
        reward(state, &self.scenario.reward)
    }

    fn terminal_reward(&self, state: &StateVec<f64>) -> f64 {
        reward(state, &self.scenario.reward)
    }
}

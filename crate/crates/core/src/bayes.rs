//! Posterior over the Beta removal-fraction model.
//!
//! Every (step, action, channel) pair has its own Beta shape pair with an
//! independent `Unif(0, 300]²` prior, and the data for one pair never touches
//! another, so the joint posterior factorises. Each factor is sampled by its own
//! random-walk Metropolis–Hastings chain on log-shapes.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bioenv::{ln_beta, ModelParams};
use crate::error::{Error, Result};
use crate::rng::SeedTree;

/// Upper end of the uniform prior on every shape parameter.
pub const PRIOR_UPPER: f64 = 300.0;

/// One observed chromatography step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FractionObs {
    /// 1-based decision epoch the transition started from.
    pub step: usize,
    pub action: usize,
    /// Retained protein fraction `p_{t+1} / p_t`.
    pub h_fraction: f64,
    /// Retained impurity fraction `i_{t+1} / i_t`.
    pub psi_fraction: f64,
}

/// Real-world removal-fraction observations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FractionDataset {
    pub observations: Vec<FractionObs>,
}

impl FractionDataset {
    pub fn new(observations: Vec<FractionObs>) -> Result<Self> {
        for o in &observations {
            check_obs(o)?;
        }
        Ok(Self { observations })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn extend(&mut self, other: &FractionDataset) {
        self.observations.extend_from_slice(&other.observations);
    }

    /// Fractions recorded for one (step, action, channel) pair.
    pub fn fractions(&self, step: usize, action: usize, channel: Channel) -> Vec<f64> {
        self.observations
            .iter()
            .filter(|o| o.step == step && o.action == action)
            .map(|o| match channel {
                Channel::Impurity => o.psi_fraction,
                Channel::Protein => o.h_fraction,
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for o in &self.observations {
            w.serialize(o)?;
        }
        w.flush().map_err(|e| Error::io("<dataset csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let observations = r
            .deserialize()
            .collect::<std::result::Result<Vec<FractionObs>, _>>()?;
        Self::new(observations)
    }
}

fn check_obs(o: &FractionObs) -> Result<()> {
    let inside = |x: f64| x > 0.0 && x < 1.0;
    if o.step == 0 || !inside(o.h_fraction) || !inside(o.psi_fraction) {
        return Err(Error::Config(format!("invalid fraction observation {o:?}")));
    }
    Ok(())
}

/// Which removal fraction a chain describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// Ψ, shapes (ψˡ, ψᵘ).
    Impurity,
    /// H, shapes (ηˡ, ηᵘ).
    Protein,
}

impl Channel {
    pub const ALL: [Channel; 2] = [Channel::Impurity, Channel::Protein];

    fn offset(self) -> usize {
        match self {
            Channel::Impurity => 0,
            Channel::Protein => 1,
        }
    }
}

/// `Σ log Beta(x_i; α, β)` restricted to the prior support; the flat prior
/// contributes only a constant, which is dropped.
pub fn log_posterior_pair(shapes: (f64, f64), fractions: &[f64]) -> f64 {
    SuffStats::from_fractions(fractions).log_posterior(shapes)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct SuffStats {
    n: f64,
    sum_ln_x: f64,
    sum_ln_1mx: f64,
}

impl SuffStats {
    fn from_fractions(xs: &[f64]) -> Self {
        xs.iter().fold(Self::default(), |s, &x| Self {
            n: s.n + 1.0,
            sum_ln_x: s.sum_ln_x + x.ln(),
            sum_ln_1mx: s.sum_ln_1mx + (-x).ln_1p(),
        })
    }

    fn log_posterior(&self, (a, b): (f64, f64)) -> f64 {
        if !(a > 0.0 && a <= PRIOR_UPPER && b > 0.0 && b <= PRIOR_UPPER) {
            return f64::NEG_INFINITY;
        }
        if self.n == 0.0 {
            return 0.0;
        }
        (a - 1.0) * self.sum_ln_x + (b - 1.0) * self.sum_ln_1mx - self.n * ln_beta(a, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcSettings {
    pub burn_in: usize,
    pub thin: usize,
    /// Initial random-walk standard deviation on log-shapes.
    pub initial_step: f64,
    /// Burn-in steps between step-size adjustments.
    pub adapt_every: usize,
}

impl Default for McmcSettings {
    fn default() -> Self {
        Self {
            burn_in: 500,
            thin: 5,
            initial_step: 0.5,
            adapt_every: 50,
        }
    }
}

impl McmcSettings {
    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 || self.adapt_every == 0 || !(self.initial_step > 0.0) {
            return Err(Error::Config(format!("invalid MCMC settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub shapes: (f64, f64),
    pub step_size: f64,
    pub accepted: u64,
    pub proposed: u64,
}

impl ChainState {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// Dataset plus the per-channel chains targeting `p(ω | D)`.
#[derive(Debug, Clone)]
pub struct PosteriorState {
    pub dataset: FractionDataset,
    pub settings: McmcSettings,
    steps: usize,
    actions: usize,
    chains: Vec<ChainState>,
    stats: Vec<SuffStats>,
    burned_in: bool,
}

impl PosteriorState {
    /// `steps × actions × 2` chains, all started at shapes (1, 1).
    pub fn new(steps: usize, actions: usize, dataset: FractionDataset, settings: McmcSettings) -> Result<Self> {
        settings.validate()?;
        let chains = vec![
            ChainState {
                shapes: (1.0, 1.0),
                step_size: settings.initial_step,
                accepted: 0,
                proposed: 0,
            };
            steps * actions * 2
        ];
        let mut state = Self {
            dataset,
            settings,
            steps,
            actions,
            chains,
            stats: Vec::new(),
            burned_in: false,
        };
        state.refresh_stats()?;
        Ok(state)
    }

    fn index(&self, step: usize, action: usize, channel: Channel) -> usize {
        ((step - 1) * self.actions + action) * 2 + channel.offset()
    }

    fn refresh_stats(&mut self) -> Result<()> {
        let mut stats = vec![SuffStats::default(); self.chains.len()];
        for o in &self.dataset.observations {
            if o.step > self.steps || o.action >= self.actions {
                return Err(Error::Config(format!(
                    "observation {o:?} outside the {}×{} model table",
                    self.steps, self.actions
                )));
            }
            for ch in Channel::ALL {
                let x = match ch {
                    Channel::Impurity => o.psi_fraction,
                    Channel::Protein => o.h_fraction,
                };
                let s = &mut stats[self.index(o.step, o.action, ch)];
                s.n += 1.0;
                s.sum_ln_x += x.ln();
                s.sum_ln_1mx += (-x).ln_1p();
            }
        }
        self.stats = stats;
        Ok(())
    }

    pub fn chain(&self, step: usize, action: usize, channel: Channel) -> &ChainState {
        &self.chains[self.index(step, action, channel)]
    }

    pub fn is_burned_in(&self) -> bool {
        self.burned_in
    }

    /// `D ← D ∪ new`. Chains keep their positions; acceptance counters reset
    /// and the next call to [`PosteriorState::sample`] re-runs burn-in.
    pub fn update_dataset(&mut self, new_data: &FractionDataset) -> Result<()> {
        self.dataset.extend(new_data);
        self.refresh_stats()?;
        for c in &mut self.chains {
            c.accepted = 0;
            c.proposed = 0;
        }
        self.burned_in = false;
        Ok(())
    }

    /// Draws `n` thinned posterior samples of the full model table.
    ///
    /// One `u64` is taken from `rng`; every chain then runs on its own stream
    /// derived from it, so a chain's draws depend only on its own data.
    pub fn sample<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> Result<Vec<ModelParams>> {
        if n == 0 {
            return Err(Error::Config("posterior sample count must be at least 1".into()));
        }
        let root = SeedTree::new(rng.random::<u64>());
        let settings = self.settings;
        let burn = !self.burned_in;
        let mut draws = vec![vec![(0.0, 0.0); self.chains.len()]; n];
        for (idx, (chain, stats)) in self.chains.iter_mut().zip(&self.stats).enumerate() {
            let mut crng = root.child(idx as u64).rng();
            if burn {
                burn_in(chain, stats, &settings, &mut crng);
            }
            for draw in draws.iter_mut() {
                for _ in 0..settings.thin {
                    mh_step(chain, stats, &mut crng);
                }
                draw[idx] = chain.shapes;
            }
        }
        self.burned_in = true;
        draws
            .into_iter()
            .map(|d| self.assemble(&d))
            .collect()
    }

    fn assemble(&self, shapes: &[(f64, f64)]) -> Result<ModelParams> {
        let mut table = Vec::with_capacity(self.steps);
        for t in 1..=self.steps {
            let mut row = Vec::with_capacity(self.actions);
            for a in 0..self.actions {
                let psi = shapes[self.index(t, a, Channel::Impurity)];
                let eta = shapes[self.index(t, a, Channel::Protein)];
                row.push([psi.0, psi.1, eta.0, eta.1]);
            }
            table.push(row);
        }
        ModelParams::new(table)
    }

    /// Per-chain diagnostics as CSV: step,action,channel,alpha,beta,step_size,acceptance_rate.
    pub fn write_diagnostics_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "step",
            "action",
            "channel",
            "alpha",
            "beta",
            "step_size",
            "acceptance_rate",
        ])?;
        for t in 1..=self.steps {
            for a in 0..self.actions {
                for ch in Channel::ALL {
                    let c = self.chain(t, a, ch);
                    let name = match ch {
                        Channel::Impurity => "impurity",
                        Channel::Protein => "protein",
                    };
                    w.write_record([
                        t.to_string(),
                        a.to_string(),
                        name.to_string(),
                        c.shapes.0.to_string(),
                        c.shapes.1.to_string(),
                        c.step_size.to_string(),
                        c.acceptance_rate().to_string(),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("<diagnostics csv>", e))?;
        Ok(())
    }
}

/// Log target on log-shapes, including the Jacobian `log α + log β`.
fn log_target(stats: &SuffStats, (la, lb): (f64, f64)) -> f64 {
    let lp = stats.log_posterior((la.exp(), lb.exp()));
    if lp == f64::NEG_INFINITY {
        lp
    } else {
        lp + la + lb
    }
}

fn mh_step<R: Rng + ?Sized>(chain: &mut ChainState, stats: &SuffStats, rng: &mut R) -> bool {
    let current = (chain.shapes.0.ln(), chain.shapes.1.ln());
    let z1: f64 = StandardNormal.sample(rng);
    let z2: f64 = StandardNormal.sample(rng);
    let proposal = (current.0 + chain.step_size * z1, current.1 + chain.step_size * z2);
    let delta = log_target(stats, proposal) - log_target(stats, current);
    let u: f64 = rng.random();
    chain.proposed += 1;
    if u.ln() < delta {
        chain.shapes = (proposal.0.exp(), proposal.1.exp());
        chain.accepted += 1;
        true
    } else {
        false
    }
}

/// Burn-in with step-size adaptation toward 30–50 % acceptance; the step size
/// is frozen afterwards and acceptance counters restart.
fn burn_in<R: Rng + ?Sized>(chain: &mut ChainState, stats: &SuffStats, settings: &McmcSettings, rng: &mut R) {
    let mut window_accepts = 0usize;
    for i in 1..=settings.burn_in {
        if mh_step(chain, stats, rng) {
            window_accepts += 1;
        }
        if i % settings.adapt_every == 0 {
            let rate = window_accepts as f64 / settings.adapt_every as f64;
            if rate < 0.3 {
                chain.step_size *= 0.75;
            } else if rate > 0.5 {
                chain.step_size *= 1.3;
            }
            window_accepts = 0;
        }
    }
    chain.accepted = 0;
    chain.proposed = 0;
}

//! Fed-batch fermentation producing the harvest that enters purification.
//!
//! ```text
//! dX/dt = (−F/V + μ) X
//! dS/dt = F/V (S_i − S) − q_s X
//! q_s   = q_s,max S / (S + K)
//! μ     = (q_s − q_m) Y_em
//! ```
//!
//! Protein and impurity are proportional to final biomass, `P = ν₁ X`,
//! `I = ν₂ X`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpstreamParams {
    /// Medium volume (L).
    pub volume: f64,
    /// Inlet substrate concentration S_i (g/L), mean and standard deviation.
    pub s_in_mean: f64,
    pub s_in_sd: f64,
    /// Maximum specific substrate consumption rate (g/g/h).
    pub q_s_max: f64,
    /// Half-saturation constant of the substrate uptake (g/L).
    pub monod_k: f64,
    /// Maintenance coefficient (g/g/h).
    pub q_m: f64,
    /// Biomass yield exclusive of maintenance.
    pub y_em: f64,
    pub nu1_mean: f64,
    pub nu1_sd: f64,
    pub nu2_mean: f64,
    pub nu2_sd: f64,
    /// Initial biomass X0 (g/L).
    pub x0: f64,
    /// Initial substrate S0 (g/L).
    pub s0: f64,
    /// Constant feed rate F (L/h); zero is a pure batch.
    pub feed_rate: f64,
    /// Fermentation length (h).
    pub duration: f64,
    /// RK4 step (h).
    pub dt: f64,
    /// Standard deviation of the additive noise on harvested masses (mg).
    pub harvest_noise_sd: f64,
    /// Scale from `ν · X · V` to the milligram masses seen downstream.
    pub harvest_to_mg: f64,
}

impl Default for UpstreamParams {
    fn default() -> Self {
        Self {
            volume: 1000.0,
            s_in_mean: 780.0,
            s_in_sd: 40f64.sqrt(),
            q_s_max: 0.57,
            monod_k: 0.1,
            q_m: 0.013,
            y_em: 0.3,
            nu1_mean: 0.11,
            nu1_sd: 0.01,
            nu2_mean: 0.11,
            nu2_sd: 0.01,
            x0: 0.1,
            s0: 40.0,
            feed_rate: 0.0,
            duration: 50.0 * 24.0,
            dt: 0.01,
            harvest_noise_sd: 5.0,
            harvest_to_mg: 0.74,
        }
    }
}

impl UpstreamParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("volume", self.volume),
            ("dt", self.dt),
            ("duration", self.duration),
            ("q_s_max", self.q_s_max),
            ("harvest_to_mg", self.harvest_to_mg),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("upstream.{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("s_in_sd", self.s_in_sd),
            ("nu1_sd", self.nu1_sd),
            ("nu2_sd", self.nu2_sd),
            ("harvest_noise_sd", self.harvest_noise_sd),
            ("monod_k", self.monod_k),
            ("q_m", self.q_m),
            ("x0", self.x0),
            ("s0", self.s0),
            ("feed_rate", self.feed_rate),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("upstream.{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    fn derivative(&self, x: f64, s: f64, s_in: f64) -> (f64, f64) {
        let s = s.max(0.0);
        let q_s = self.q_s_max * s / (s + self.monod_k);
        let mu = (q_s - self.q_m) * self.y_em;
        let dilution = self.feed_rate / self.volume;
        ((-dilution + mu) * x, dilution * (s_in - s) - q_s * x)
    }
}

/// Final biomass concentration X(duration) (g/L) from fixed-step RK4 with
/// step `dt`. Substrate is clamped at zero after every step.
pub fn integrate_biomass(p: &UpstreamParams, s_in: f64, dt: f64) -> Result<f64> {
    let steps = (p.duration / dt).ceil().max(1.0) as u64;
    let h = p.duration / steps as f64;
    let (mut x, mut s) = (p.x0, p.s0);
    for n in 0..steps {
        let (k1x, k1s) = p.derivative(x, s, s_in);
        let (k2x, k2s) = p.derivative(x + 0.5 * h * k1x, s + 0.5 * h * k1s, s_in);
        let (k3x, k3s) = p.derivative(x + 0.5 * h * k2x, s + 0.5 * h * k2s, s_in);
        let (k4x, k4s) = p.derivative(x + h * k3x, s + h * k3s, s_in);
        x += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
        s += h / 6.0 * (k1s + 2.0 * k2s + 2.0 * k3s + k4s);
        s = s.max(0.0);
        if !(x.is_finite() && s.is_finite()) {
            return Err(Error::IntegrationDiverged {
                time: (n + 1) as f64 * h,
            });
        }
    }
    Ok(x)
}

/// Harvested protein and impurity masses (mg) for given production rates and
/// inlet substrate concentration.
pub fn integrate_upstream(p: &UpstreamParams, nu1: f64, nu2: f64, s_in: f64) -> Result<(f64, f64)> {
    let x_end = integrate_biomass(p, s_in, p.dt)?;
    Ok(harvest_masses(p, x_end, nu1, nu2))
}

pub(crate) fn harvest_masses(p: &UpstreamParams, x_end: f64, nu1: f64, nu2: f64) -> (f64, f64) {
    let scale = x_end * p.volume * p.harvest_to_mg;
    (nu1 * scale, nu2 * scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_biomass_is_a_fixed_point() {
        let p = UpstreamParams {
            x0: 0.0,
            ..Default::default()
        };
        assert_eq!(integrate_upstream(&p, 0.11, 0.11, 780.0).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn starved_culture_decays() {
        let p = UpstreamParams {
            s0: 0.0,
            feed_rate: 0.0,
            duration: 10.0,
            ..Default::default()
        };
        let short = integrate_biomass(&UpstreamParams { duration: 5.0, ..p.clone() }, 780.0, p.dt).unwrap();
        let long = integrate_biomass(&p, 780.0, p.dt).unwrap();
        assert!(short < p.x0 && long < short);
        // μ = −q_m Y_em exactly, so X decays exponentially.
        let want = p.x0 * (-p.q_m * p.y_em * 10.0).exp();
        assert!((long - want).abs() / want < 1e-12);
    }

    #[test]
    fn default_matches_fine_step_reference() {
        let p = UpstreamParams::default();
        let coarse = integrate_biomass(&p, 780.0, p.dt).unwrap();
        let fine = integrate_biomass(&p, 780.0, p.dt / 100.0).unwrap();
        assert!((coarse - fine).abs() / fine < 1e-4, "{coarse} vs {fine}");
    }

    #[test]
    fn fourth_order_convergence_on_smooth_segment() {
        // growth phase only: substrate far from exhaustion
        let p = UpstreamParams {
            duration: 10.0,
            feed_rate: 5.0,
            ..Default::default()
        };
        let reference = integrate_biomass(&p, 780.0, 0.01).unwrap();
        let e1 = (integrate_biomass(&p, 780.0, 1.0).unwrap() - reference).abs();
        let e2 = (integrate_biomass(&p, 780.0, 0.5).unwrap() - reference).abs();
        let ratio = e1 / e2;
        assert!((12.0..20.0).contains(&ratio), "error ratio {ratio}");
    }

    #[test]
    fn default_harvest_is_about_ten_mg() {
        let p = UpstreamParams::default();
        let (pu, iu) = integrate_upstream(&p, p.nu1_mean, p.nu2_mean, p.s_in_mean).unwrap();
        assert!((pu - 10.0).abs() < 0.1, "{pu}");
        assert_eq!(pu, iu);
    }

    #[test]
    fn divergence_is_reported() {
        let p = UpstreamParams {
            q_m: -1e6,
            s0: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            integrate_biomass(&p, 780.0, 0.5),
            Err(Error::IntegrationDiverged { .. })
        ));
    }
}

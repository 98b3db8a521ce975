//! Step-size, batch-size, delay-tolerance, and epoch-length schedules.
//!
//! Iteration indexing starts at k = 1 for the first update, so eta(1) = 1 and
//! the starting point never influences the trajectory beyond the first
//! direction. Batch formulas are real-valued; we take ceilings, floor at 1,
//! and clamp to an optional cap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::ProblemConstants;

/// Sentinel for "no staleness limit".
pub const TAU_INFINITE: usize = usize::MAX;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum BatchRule {
    /// batch(k) = ceil(coeff * (k+1)^2)
    Growing { coeff: f64 },
    /// k-independent batch size.
    Constant { size: usize, c: f64 },
    /// batch(k) = ceil(96 * (k+1) / tau)
    SvrfInner { tau: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schedule {
    pub batch_rule: BatchRule,
    /// Max accepted staleness; TAU_INFINITE disables the check.
    pub tau: usize,
    pub batch_cap: Option<usize>,
    /// Set for SVRF schedules: epoch t has length 2^{t+3} - 2.
    pub has_svrf_epochs: bool,
}

impl Schedule {
    /// eta(k) = 2 / (k + 1), defined for k >= 1.
    pub fn eta(&self, k: usize) -> f64 {
        debug_assert!(k >= 1);
        2.0 / (k as f64 + 1.0)
    }

    pub fn batch(&self, k: usize) -> usize {
        debug_assert!(k >= 1);
        let raw = match &self.batch_rule {
            BatchRule::Growing { coeff } => (coeff * ((k + 1) as f64).powi(2)).ceil(),
            BatchRule::Constant { size, .. } => *size as f64,
            BatchRule::SvrfInner { tau } => (96.0 * (k + 1) as f64 / tau).ceil(),
        };
        let mut b = if raw.is_finite() && raw >= 1.0 { raw as usize } else { 1 };
        if let Some(cap) = self.batch_cap {
            b = b.min(cap);
        }
        b.max(1)
    }

    /// N_t = 2^{t+3} - 2 for SVRF schedules.
    pub fn svrf_epoch_len(&self, t: usize) -> Result<usize> {
        if !self.has_svrf_epochs {
            return Err(Error::Parameter("schedule has no SVRF epochs".into()));
        }
        Ok((1usize << (t + 3)) - 2)
    }
}

fn check_constants(c: &ProblemConstants) -> Result<()> {
    if c.l <= 0.0 || c.g <= 0.0 || c.d <= 0.0 {
        return Err(Error::Parameter("problem constants must be positive".into()));
    }
    Ok(())
}

/// Growing-batch schedule for sequential/synchronous SFW:
/// batch(k) = ceil(G^2 (k+1)^2 / (L^2 D^2)).
pub fn sfw_schedule(constants: &ProblemConstants, cap: Option<usize>) -> Result<Schedule> {
    check_constants(constants)?;
    let coeff = constants.g.powi(2) / (constants.l.powi(2) * constants.d.powi(2));
    Ok(Schedule {
        batch_rule: BatchRule::Growing { coeff },
        tau: TAU_INFINITE,
        batch_cap: cap,
        has_svrf_epochs: false,
    })
}

/// Growing-batch schedule for asynchronous SFW:
/// batch(k) = ceil(G^2 (k+1)^2 / (tau^2 L^2 D^2)). tau = 0 delegates to the
/// synchronous schedule.
pub fn sfw_asyn_schedule(
    constants: &ProblemConstants,
    tau: usize,
    cap: Option<usize>,
) -> Result<Schedule> {
    check_constants(constants)?;
    if tau == 0 {
        return sfw_schedule(constants, cap);
    }
    let coeff = constants.g.powi(2)
        / ((tau as f64).powi(2) * constants.l.powi(2) * constants.d.powi(2));
    Ok(Schedule {
        batch_rule: BatchRule::Growing { coeff },
        tau,
        batch_cap: cap,
        has_svrf_epochs: false,
    })
}

/// Constant-batch schedule: batch = ceil(G^2 c^2 / (max(tau,1)^2 L^2 D^2)).
/// The synchronous variant (tau <= 1) is the tau-free form.
pub fn constant_batch_schedule(
    constants: &ProblemConstants,
    c: f64,
    tau: usize,
) -> Result<Schedule> {
    check_constants(constants)?;
    if c <= 0.0 {
        return Err(Error::Parameter("constant-batch c must be positive".into()));
    }
    let tau_eff = tau.max(1) as f64;
    let raw = constants.g.powi(2) * c * c
        / (tau_eff * tau_eff * constants.l.powi(2) * constants.d.powi(2));
    let size = raw.ceil().max(1.0) as usize;
    Ok(Schedule {
        batch_rule: BatchRule::Constant { size, c },
        tau: if tau == 0 { TAU_INFINITE } else { tau },
        batch_cap: None,
        has_svrf_epochs: false,
    })
}

/// SVRF schedule: inner batch(k) = ceil(96(k+1)/tau), epoch t length
/// 2^{t+3} - 2.
pub fn svrf_asyn_schedule(tau: usize) -> Result<Schedule> {
    if tau < 1 {
        return Err(Error::Parameter("svrf schedule needs tau >= 1".into()));
    }
    Ok(Schedule {
        batch_rule: BatchRule::SvrfInner { tau: tau as f64 },
        tau,
        batch_cap: None,
        has_svrf_epochs: true,
    })
}

/// Closed-form gradient-evaluation and linear-optimization counts to reach
/// accuracy `epsilon` with a constant-batch schedule. With eps_t =
/// epsilon/(L D^2) and the schedule's (c, tau):
/// grads = c^2 / (tau*eps_t - tau^2/c), lins = tau / (eps_t - tau/c);
/// tau <= 1 gives the synchronous row. Targets below the residual floor
/// tau*L*D^2/c are infeasible.
pub fn complexity_estimate(
    schedule: &Schedule,
    epsilon: f64,
    constants: &ProblemConstants,
) -> Result<(f64, f64)> {
    check_constants(constants)?;
    if epsilon <= 0.0 {
        return Err(Error::Parameter("epsilon must be positive".into()));
    }
    let c = match &schedule.batch_rule {
        BatchRule::Constant { c, .. } => *c,
        _ => {
            return Err(Error::Parameter(
                "complexity estimate is defined for constant-batch schedules".into(),
            ))
        }
    };
    if schedule.tau == TAU_INFINITE {
        return Err(Error::Parameter("complexity estimate needs a finite tau".into()));
    }
    let tau = schedule.tau.max(1) as f64;
    let eps_t = epsilon / (constants.l * constants.d.powi(2));
    if eps_t <= tau / c {
        return Err(Error::InfeasibleTarget(format!(
            "epsilon {epsilon} is below the residual floor {}",
            tau * constants.l * constants.d.powi(2) / c
        )));
    }
    let grads = c * c / (tau * eps_t - tau * tau / c);
    let lins = tau / (eps_t - tau / c);
    Ok((grads, lins))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_constants() -> ProblemConstants {
        ProblemConstants { l: 1.0, g: 1.0, d: 1.0 }
    }

    #[test]
    fn eta_first_step_is_full() {
        let s = sfw_schedule(&unit_constants(), None).unwrap();
        assert_eq!(s.eta(1), 1.0);
        // Strictly decreasing.
        for k in 1..50 {
            assert!(s.eta(k + 1) < s.eta(k));
            assert!(s.eta(k) > 0.0 && s.eta(k) <= 1.0);
        }
    }

    #[test]
    fn asyn_batch_direct_substitution() {
        // G = L = D = 1, tau = 2, k = 3 -> ceil(16/4) = 4.
        let s = sfw_asyn_schedule(&unit_constants(), 2, None).unwrap();
        assert_eq!(s.batch(3), 4);
    }

    #[test]
    fn tau_squared_batch_ratio() {
        let s1 = sfw_asyn_schedule(&unit_constants(), 1, None).unwrap();
        let s2 = sfw_asyn_schedule(&unit_constants(), 2, None).unwrap();
        for k in [1, 3, 9, 31, 99] {
            // (k+1)^2 is divisible by 4 for odd k, so the ratio is exact.
            assert_eq!(s1.batch(k), 4 * s2.batch(k), "k = {k}");
        }
    }

    #[test]
    fn uncapped_ratio_with_ceil_slack() {
        let mut c = unit_constants();
        c.g = 1.3;
        let tau = 3;
        let s_sync = sfw_schedule(&c, None).unwrap();
        let s_asyn = sfw_asyn_schedule(&c, tau, None).unwrap();
        for k in 1..200 {
            let ratio_num = s_sync.batch(k) as f64;
            let ratio_den = s_asyn.batch(k) as f64;
            // ceil effects are bounded by 1 on each side of the tau^2 ratio.
            assert!((ratio_num / ratio_den - (tau * tau) as f64).abs() <= (tau * tau) as f64 / ratio_den + 1.0);
        }
    }

    #[test]
    fn sfw_batch_example_and_caps() {
        let s = sfw_schedule(&unit_constants(), None).unwrap();
        assert_eq!(s.batch(9), 100);
        let capped = sfw_schedule(&unit_constants(), Some(10_000)).unwrap();
        assert_eq!(capped.batch(500), 10_000);
        let pnn = sfw_schedule(&unit_constants(), Some(3_000)).unwrap();
        assert_eq!(pnn.batch(500), 3_000);
    }

    #[test]
    fn tau_zero_routes_to_sync() {
        let a = sfw_asyn_schedule(&unit_constants(), 0, Some(50)).unwrap();
        let b = sfw_schedule(&unit_constants(), Some(50)).unwrap();
        for k in 1..40 {
            assert_eq!(a.batch(k), b.batch(k));
        }
        assert_eq!(a.tau, TAU_INFINITE);
    }

    #[test]
    fn nonpositive_constants_rejected() {
        let bad = ProblemConstants { l: 0.0, g: 1.0, d: 1.0 };
        assert!(sfw_schedule(&bad, None).is_err());
        assert!(sfw_asyn_schedule(&bad, 2, None).is_err());
        assert!(constant_batch_schedule(&bad, 5.0, 1).is_err());
    }

    #[test]
    fn constant_batch_examples() {
        let s = constant_batch_schedule(&unit_constants(), 10.0, 1).unwrap();
        for k in [1, 7, 100] {
            assert_eq!(s.batch(k), 100);
        }
        // Synchronous form (tau treated as 1).
        let sync = constant_batch_schedule(&unit_constants(), 10.0, 0).unwrap();
        assert_eq!(sync.batch(1), 100);
        // Doubling c quadruples the batch.
        let s2 = constant_batch_schedule(&unit_constants(), 20.0, 1).unwrap();
        assert_eq!(s2.batch(1), 400);
    }

    #[test]
    fn svrf_epoch_lengths() {
        let s = svrf_asyn_schedule(4).unwrap();
        assert_eq!(s.svrf_epoch_len(0).unwrap(), 6);
        assert_eq!(s.svrf_epoch_len(2).unwrap(), 30);
        // Recurrence N_{t+1} = 2 N_t + 2.
        for t in 0..10 {
            assert_eq!(
                s.svrf_epoch_len(t + 1).unwrap(),
                2 * s.svrf_epoch_len(t).unwrap() + 2
            );
        }
        // tau = 4, k = 3 -> 96*4/4 = 96.
        assert_eq!(s.batch(3), 96);
        assert!(svrf_asyn_schedule(0).is_err());
    }

    #[test]
    fn complexity_feasible_and_floor() {
        let c = unit_constants();
        let sched = constant_batch_schedule(&c, 100.0, 2).unwrap();
        let (g, l) = complexity_estimate(&sched, 0.5, &c).unwrap();
        assert!(g.is_finite() && g > 0.0);
        assert!(l.is_finite() && l > 0.0);
        // Below the residual floor tau*L*D^2/c = 0.02.
        assert!(matches!(
            complexity_estimate(&sched, 0.01, &c),
            Err(Error::InfeasibleTarget(_))
        ));
    }

    #[test]
    fn complexity_asyn_vs_sync_scaling() {
        // Large c: asyn grads ~ sync grads / tau, asyn lins ~ sync lins * tau.
        let c = unit_constants();
        let tau = 4usize;
        let big_c = 1e6;
        let asyn = constant_batch_schedule(&c, big_c, tau).unwrap();
        let sync = constant_batch_schedule(&c, big_c, 1).unwrap();
        let eps = 0.1;
        let (ga, la) = complexity_estimate(&asyn, eps, &c).unwrap();
        let (gs, ls) = complexity_estimate(&sync, eps, &c).unwrap();
        assert!((ga / (gs / tau as f64) - 1.0).abs() < 0.01);
        assert!((la / (ls * tau as f64) - 1.0).abs() < 0.01);
    }

    #[test]
    fn complexity_rejects_growing_schedules() {
        let c = unit_constants();
        let sched = sfw_schedule(&c, None).unwrap();
        assert!(complexity_estimate(&sched, 0.1, &c).is_err());
    }

    #[test]
    fn batch_floor_is_one() {
        let mut c = unit_constants();
        c.g = 1e-6;
        let s = sfw_schedule(&c, None).unwrap();
        assert_eq!(s.batch(1), 1);
    }
}

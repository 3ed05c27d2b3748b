//! System model for binary computation offloading: per-terminal parameters,
//! offloading strategies, the weighted delay/energy cost functions and the
//! C1-C4 feasibility constraints.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack used when checking the allocation simplex sum (C4).
pub const C4_SLACK: f64 = 1e-9;
/// Slack used when checking per-MT delay bounds (C2).
pub const C2_SLACK: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("MT {index} offloads but has zero compute allocation")]
    ZeroAllocation { index: usize },
    #[error("vector length {got} does not match MT count {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Per-mobile-terminal job and link parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtParams {
    /// Required compute, clock cycles.
    pub c: f64,
    /// Local compute capacity, cycles/s.
    pub r_local: f64,
    /// Upload payload, bits.
    pub p: f64,
    /// Result payload, bits.
    pub q: f64,
    /// Uplink rate, bits/s.
    pub u: f64,
    /// Downlink rate, bits/s.
    pub d: f64,
    /// Upload power, W.
    pub p_up: f64,
    /// Execute power, W.
    pub p_exec: f64,
    /// Download power, W.
    pub p_down: f64,
    /// Maximum tolerable delay, s.
    pub theta: f64,
}

impl MtParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let pos = [
            (self.c, "c"),
            (self.r_local, "r_local"),
            (self.u, "u"),
            (self.d, "d"),
            (self.theta, "theta"),
        ];
        for (v, name) in pos {
            if !v.is_finite() || v <= 0.0 {
                return Err(ModelError::InvalidParameter(format!(
                    "{name} must be strictly positive, got {v}"
                )));
            }
        }
        let nonneg = [
            (self.p, "p"),
            (self.q, "q"),
            (self.p_up, "p_up"),
            (self.p_exec, "p_exec"),
            (self.p_down, "p_down"),
        ];
        for (v, name) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(ModelError::InvalidParameter(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Upload plus download transfer latency, independent of allocation.
    pub fn transfer_delay(&self) -> f64 {
        self.p / self.u + self.q / self.d
    }
}

/// One problem instance: N terminals plus the global constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub mts: Vec<MtParams>,
    /// Delay/energy emphasis, in [0, 1]; 1 = pure delay.
    pub alpha: f64,
    /// Energy efficiency coefficient, > 0.
    pub kappa: f64,
    /// Total MES compute capacity, cycles/s. The per-MT allocated rate is
    /// `r[n] * f_mes`.
    pub f_mes: f64,
}

impl Environment {
    pub fn n_mts(&self) -> usize {
        self.mts.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.mts.is_empty() {
            return Err(ModelError::InvalidParameter("N must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ModelError::InvalidParameter(format!(
                "alpha must be in [0,1], got {}",
                self.alpha
            )));
        }
        if !self.kappa.is_finite() || self.kappa <= 0.0 || !self.f_mes.is_finite() || self.f_mes <= 0.0 {
            return Err(ModelError::InvalidParameter(
                "kappa and f_mes must be strictly positive".into(),
            ));
        }
        for mt in &self.mts {
            mt.validate()?;
        }
        Ok(())
    }
}

/// Joint offloading decision and MES allocation, canonical form:
/// `r[n] == 0` whenever `d[n] == 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffloadStrategy {
    pub d: Vec<u8>,
    pub r: Vec<f64>,
}

impl OffloadStrategy {
    /// All-local strategy for `n` terminals.
    pub fn all_local(n: usize) -> Self {
        Self {
            d: vec![0; n],
            r: vec![0.0; n],
        }
    }

    pub fn n_offloaders(&self) -> usize {
        self.d.iter().filter(|&&b| b == 1).count()
    }

    /// Canonicalize: zero out allocations of non-offloading terminals.
    pub fn canonicalize(&mut self) {
        for (dn, rn) in self.d.iter().zip(self.r.iter_mut()) {
            if *dn == 0 {
                *rn = 0.0;
            }
        }
    }
}

/// Local execution cost: weighted CPU energy plus computation delay.
pub fn local_cost(mt: &MtParams, alpha: f64, kappa: f64) -> f64 {
    (1.0 - alpha) * kappa * mt.r_local * mt.r_local * mt.c + alpha * mt.c / mt.r_local
}

/// Offloading cost at an allocated MES rate of `r_offload` cycles/s.
pub fn offload_cost(mt: &MtParams, alpha: f64, r_offload: f64) -> Result<f64, ModelError> {
    if r_offload.is_nan() || r_offload <= 0.0 {
        return Err(ModelError::ZeroAllocation { index: 0 });
    }
    let energy = mt.p_up * mt.p / mt.u + mt.p_exec * mt.c / r_offload + mt.p_down * mt.q / mt.d;
    let delay = mt.p / mt.u + mt.c / r_offload + mt.q / mt.d;
    Ok((1.0 - alpha) * energy + alpha * delay)
}

/// Weighted sum cost over all terminals. Allocations of non-offloading
/// terminals are ignored; an offloading terminal with zero allocation is an
/// error.
pub fn total_cost(env: &Environment, s: &OffloadStrategy) -> Result<f64, ModelError> {
    let n = env.n_mts();
    if s.d.len() != n || s.r.len() != n {
        return Err(ModelError::LengthMismatch {
            expected: n,
            got: s.d.len().min(s.r.len()),
        });
    }
    let mut total = 0.0;
    for (i, mt) in env.mts.iter().enumerate() {
        if s.d[i] == 1 {
            total += offload_cost(mt, env.alpha, s.r[i] * env.f_mes)
                .map_err(|_| ModelError::ZeroAllocation { index: i })?;
        } else {
            total += local_cost(mt, env.alpha, env.kappa);
        }
    }
    Ok(total)
}

/// Per-constraint outcome of the C1-C4 feasibility check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// C1: every decision entry is 0 or 1.
    pub c1_binary: bool,
    /// C2: every terminal meets its delay bound.
    pub c2_delay: bool,
    /// C3: every allocation lies in [0, 1].
    pub c3_range: bool,
    /// C4: allocations sum to at most 1.
    pub c4_simplex: bool,
    /// Indices of terminals violating C2.
    pub c2_violators: Vec<usize>,
}

impl FeasibilityReport {
    pub fn feasible(&self) -> bool {
        self.c1_binary && self.c2_delay && self.c3_range && self.c4_simplex
    }
}

/// Execution delay of terminal `i` under strategy `s`; +inf for an offloader
/// with zero allocation.
pub fn mt_delay(env: &Environment, s: &OffloadStrategy, i: usize) -> f64 {
    let mt = &env.mts[i];
    if s.d[i] == 1 {
        let r_off = s.r[i] * env.f_mes;
        if r_off > 0.0 {
            mt.transfer_delay() + mt.c / r_off
        } else {
            f64::INFINITY
        }
    } else {
        mt.c / mt.r_local
    }
}

/// Check constraints C1-C4; infeasibility is reported, never an error.
pub fn check_feasible(env: &Environment, s: &OffloadStrategy) -> FeasibilityReport {
    let c1_binary = s.d.iter().all(|&b| b <= 1);
    let c3_range = s.r.iter().all(|&r| (0.0..=1.0).contains(&r));
    let c4_simplex = s.r.iter().sum::<f64>() <= 1.0 + C4_SLACK;
    let mut c2_violators = Vec::new();
    for i in 0..env.n_mts() {
        if mt_delay(env, s, i) > env.mts[i].theta + C2_SLACK {
            c2_violators.push(i);
        }
    }
    FeasibilityReport {
        c1_binary,
        c2_delay: c2_violators.is_empty(),
        c3_range,
        c4_simplex,
        c2_violators,
    }
}

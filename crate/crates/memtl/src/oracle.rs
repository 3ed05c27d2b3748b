//! Ground-truth solver for the joint offloading problem: outer enumeration of
//! the binary decision vector, inner continuous allocation solved either in
//! closed form (sqrt-weight rule with iterative deadline clamping) or by
//! exhaustive simplex-lattice search. The two inner solvers are independent
//! and cross-check each other.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{featurize, LabeledSample, SamplingRanges};
use crate::mec::{check_feasible, total_cost, Environment, OffloadStrategy, C2_SLACK};

/// Default outer-enumeration bound; 2^N decision vectors are evaluated.
pub const DEFAULT_MAX_N: usize = 12;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("no feasible strategy exists for this environment")]
    Unlabelable,
    #[error("N = {0} exceeds the enumeration bound {1}")]
    TooManyMts(usize, usize),
    #[error("decision vector has no offloader")]
    NoOffloader,
    #[error("invalid grid resolution {0}")]
    BadResolution(f64),
    #[error(transparent)]
    Model(#[from] crate::mec::ModelError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InnerSolver {
    ClosedForm,
    Grid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleSolution {
    pub strategy: OffloadStrategy,
    pub cost: f64,
    pub feasible: bool,
    pub method: InnerSolver,
}

/// Coefficient of 1/R_n in the total cost for offloader `i`:
/// ((1-alpha) * P_e + alpha) * c / f_mes.
pub fn offload_weight(env: &Environment, i: usize) -> f64 {
    let mt = &env.mts[i];
    ((1.0 - env.alpha) * mt.p_exec + env.alpha) * mt.c / env.f_mes
}

/// Smallest allocation proportion meeting the C2 deadline for offloader `i`,
/// or `None` when the transfer time alone exceeds the deadline.
pub fn c2_allocation_floor(env: &Environment, i: usize) -> Option<f64> {
    let mt = &env.mts[i];
    let slack = mt.theta - mt.transfer_delay();
    if slack <= 0.0 {
        return None;
    }
    Some(mt.c / (env.f_mes * slack))
}

/// Minimize sum w_n / R_n over the allocation simplex at a fixed decision
/// vector. Returns the full-length allocation vector (zeros for local MTs),
/// or `None` when the C2 floors are incompatible with the unit budget.
pub fn inner_allocation_closed_form(env: &Environment, d: &[u8]) -> Option<Vec<f64>> {
    let offloaders: Vec<usize> = (0..d.len()).filter(|&i| d[i] == 1).collect();
    assert!(!offloaders.is_empty(), "decision vector has no offloader");

    let mut floors = Vec::with_capacity(offloaders.len());
    for &i in &offloaders {
        let l = c2_allocation_floor(env, i)?;
        if l > 1.0 {
            return None;
        }
        floors.push(l);
    }
    if floors.iter().sum::<f64>() > 1.0 {
        return None;
    }

    let weights: Vec<f64> = offloaders.iter().map(|&i| offload_weight(env, i)).collect();
    let m = offloaders.len();
    let mut alloc = vec![0.0; m];
    let mut fixed = vec![false; m];
    let mut budget = 1.0;

    // Sqrt-weight rule on the free set; clamp deadline violators to their
    // floors and re-solve on the remaining budget. Each pass fixes at least
    // one entry, so this terminates in at most m passes.
    loop {
        let free: Vec<usize> = (0..m).filter(|&j| !fixed[j]).collect();
        if free.is_empty() {
            break;
        }
        let sqrt_sum: f64 = free.iter().map(|&j| weights[j].sqrt()).sum();
        for &j in &free {
            alloc[j] = if sqrt_sum > 0.0 {
                budget * weights[j].sqrt() / sqrt_sum
            } else {
                budget / free.len() as f64
            };
        }
        let violators: Vec<usize> = free.iter().copied().filter(|&j| alloc[j] < floors[j]).collect();
        if violators.is_empty() {
            break;
        }
        for &j in &violators {
            alloc[j] = floors[j];
            fixed[j] = true;
            budget -= floors[j];
        }
        if budget < 0.0 {
            // Floors sum to <= 1, so this cannot happen; guard anyway.
            return None;
        }
    }

    // Exhaust any leftover budget (possible only when zero-weight entries
    // were all clamped); cost is non-increasing in every allocation.
    let assigned: f64 = alloc.iter().sum();
    let leftover = 1.0 - assigned;
    if leftover > 0.0 && assigned < 1.0 {
        let share = leftover / m as f64;
        for a in alloc.iter_mut() {
            *a += share;
        }
    }

    let mut full = vec![0.0; d.len()];
    for (j, &i) in offloaders.iter().enumerate() {
        full[i] = alloc[j];
    }
    Some(full)
}

/// Exhaustive search over the simplex lattice with step `resolution`:
/// all compositions of K = round(1/resolution) among the offloaders, subject
/// to the per-offloader C2 floors. Independent verification oracle for the
/// closed form.
pub fn inner_allocation_grid(
    env: &Environment,
    d: &[u8],
    resolution: f64,
) -> Result<Option<Vec<f64>>, OracleError> {
    if !(resolution > 0.0 && resolution < 1.0) {
        return Err(OracleError::BadResolution(resolution));
    }
    let offloaders: Vec<usize> = (0..d.len()).filter(|&i| d[i] == 1).collect();
    if offloaders.is_empty() {
        return Err(OracleError::NoOffloader);
    }
    let k_total = (1.0 / resolution).round() as usize;
    let m = offloaders.len();

    // Per-offloader minimum lattice index satisfying C2 (at least 1: an
    // offloader needs a positive rate).
    let mut k_min = Vec::with_capacity(m);
    for &i in &offloaders {
        let mt = &env.mts[i];
        let slack = mt.theta - mt.transfer_delay();
        if slack <= 0.0 {
            return Ok(None);
        }
        let mut k = ((mt.c / (env.f_mes * slack)) * k_total as f64).ceil() as usize;
        k = k.max(1);
        // Float-safe adjustment around the analytic ceiling.
        while k > 1 && mt.transfer_delay() + mt.c / (env.f_mes * (k - 1) as f64 / k_total as f64) <= mt.theta + C2_SLACK {
            k -= 1;
        }
        while k <= k_total && mt.transfer_delay() + mt.c / (env.f_mes * k as f64 / k_total as f64) > mt.theta + C2_SLACK {
            k += 1;
        }
        if k > k_total {
            return Ok(None);
        }
        k_min.push(k);
    }
    if k_min.iter().sum::<usize>() > k_total {
        return Ok(None);
    }

    let weights: Vec<f64> = offloaders.iter().map(|&i| offload_weight(env, i)).collect();

    // The cost is strictly decreasing in every allocation, so only full-budget
    // compositions (sum k_j == K) can be optimal.
    let mut best_cost = f64::INFINITY;
    let mut best_k = vec![0usize; m];
    let mut current = vec![0usize; m];
    // Suffix sums of weights bound the cheapest possible completion
    // (each term is at least w_j, attained at k_j = K).
    let mut suffix_w = vec![0.0; m + 1];
    for j in (0..m).rev() {
        suffix_w[j] = suffix_w[j + 1] + weights[j];
    }
    let suffix_kmin: Vec<usize> = {
        let mut s = vec![0usize; m + 1];
        for j in (0..m).rev() {
            s[j] = s[j + 1] + k_min[j];
        }
        s
    };

    #[allow(clippy::too_many_arguments)]
    fn recurse(
        level: usize,
        remaining: usize,
        partial: f64,
        weights: &[f64],
        k_min: &[usize],
        suffix_w: &[f64],
        suffix_kmin: &[usize],
        k_total: usize,
        current: &mut Vec<usize>,
        best_cost: &mut f64,
        best_k: &mut Vec<usize>,
    ) {
        let m = weights.len();
        if partial + suffix_w[level] >= *best_cost {
            return;
        }
        if level == m - 1 {
            // Last coordinate is fixed by the budget.
            if remaining >= k_min[level] {
                let cost = partial + weights[level] * k_total as f64 / remaining as f64;
                if cost < *best_cost {
                    *best_cost = cost;
                    current[level] = remaining;
                    best_k.copy_from_slice(current);
                }
            }
            return;
        }
        let hi = remaining - suffix_kmin[level + 1];
        for k in k_min[level]..=hi {
            current[level] = k;
            recurse(
                level + 1,
                remaining - k,
                partial + weights[level] * k_total as f64 / k as f64,
                weights,
                k_min,
                suffix_w,
                suffix_kmin,
                k_total,
                current,
                best_cost,
                best_k,
            );
        }
    }

    recurse(
        0,
        k_total,
        0.0,
        &weights,
        &k_min,
        &suffix_w,
        &suffix_kmin,
        k_total,
        &mut current,
        &mut best_cost,
        &mut best_k,
    );

    if best_cost.is_infinite() {
        return Ok(None);
    }
    let mut full = vec![0.0; d.len()];
    for (j, &i) in offloaders.iter().enumerate() {
        full[i] = best_k[j] as f64 / k_total as f64;
    }
    Ok(Some(full))
}

/// Default lattice step for grid-based labeling and cross-checks.
pub const DEFAULT_GRID_RESOLUTION: f64 = 1e-3;

fn decision_binary_value(d: &[u8]) -> u64 {
    d.iter().fold(0u64, |acc, &b| (acc << 1) | b as u64)
}

/// Enumerate all 2^N decision vectors, solve the inner allocation for each,
/// and return the feasible minimum. Ties break toward fewer offloaders, then
/// the lowest binary value of the decision vector.
pub fn solve_exhaustive(env: &Environment, inner: InnerSolver) -> Result<OracleSolution, OracleError> {
    solve_exhaustive_with(env, inner, DEFAULT_GRID_RESOLUTION, DEFAULT_MAX_N)
}

pub fn solve_exhaustive_with(
    env: &Environment,
    inner: InnerSolver,
    resolution: f64,
    max_n: usize,
) -> Result<OracleSolution, OracleError> {
    let n = env.n_mts();
    if n > max_n {
        return Err(OracleError::TooManyMts(n, max_n));
    }

    let mut best: Option<(f64, usize, u64, OffloadStrategy)> = None;
    for mask in 0u64..(1u64 << n) {
        let d: Vec<u8> = (0..n).map(|i| ((mask >> (n - 1 - i)) & 1) as u8).collect();

        // Local terminals must meet their deadlines regardless of allocation.
        let locals_ok = (0..n).all(|i| {
            d[i] == 1 || env.mts[i].c / env.mts[i].r_local <= env.mts[i].theta + C2_SLACK
        });
        if !locals_ok {
            continue;
        }

        let r = if mask == 0 {
            vec![0.0; n]
        } else {
            let alloc = match inner {
                InnerSolver::ClosedForm => inner_allocation_closed_form(env, &d),
                InnerSolver::Grid => inner_allocation_grid(env, &d, resolution)?,
            };
            match alloc {
                Some(r) => r,
                None => continue,
            }
        };

        let s = OffloadStrategy { d, r };
        let cost = total_cost(env, &s)?;
        let n_off = s.n_offloaders();
        let binval = decision_binary_value(&s.d);
        let better = match &best {
            None => true,
            Some((bc, bn, bv, _)) => {
                let tol = 1e-12 * bc.abs().max(1.0);
                if cost < bc - tol {
                    true
                } else if cost > bc + tol {
                    false
                } else {
                    (n_off, binval) < (*bn, *bv)
                }
            }
        };
        if better {
            best = Some((cost, n_off, binval, s));
        }
    }

    match best {
        Some((cost, _, _, strategy)) => {
            debug_assert!(check_feasible(env, &strategy).feasible());
            Ok(OracleSolution {
                strategy,
                cost,
                feasible: true,
                method: inner,
            })
        }
        None => Err(OracleError::Unlabelable),
    }
}

/// Upper bound on the cost excess of the best feasible lattice point over the
/// continuum optimum `s_opt`: each allocation moves by at most m lattice
/// steps, and the 1/R terms are locally Lipschitz away from zero.
pub fn grid_gap_bound(env: &Environment, s_opt: &OffloadStrategy, resolution: f64) -> f64 {
    let m = s_opt.n_offloaders() as f64;
    let delta = m * resolution;
    let mut bound = 0.0;
    for i in 0..env.n_mts() {
        if s_opt.d[i] == 1 {
            let w = offload_weight(env, i);
            let r = s_opt.r[i];
            let down = (r - delta).max(resolution / 2.0);
            bound += w * (1.0 / down - 1.0 / r).max(0.0);
        }
    }
    bound + 1e-9
}

/// Solve an environment and package it as a labeled training sample.
pub fn label_sample(env: &Environment, ranges: &SamplingRanges) -> Result<LabeledSample, OracleError> {
    let sol = solve_exhaustive(env, InnerSolver::ClosedForm)?;
    let x = featurize(env, ranges)?;
    Ok(LabeledSample {
        x,
        d_star: sol.strategy.d.clone(),
        r_star: sol.strategy.r.clone(),
        cost_star: sol.cost,
        raw_env: env.clone(),
    })
}

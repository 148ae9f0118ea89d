//! Robustness margin search: repeated filter/regulator solves and the
//! spectral radius test `gamma^2 > lambda_max(Y E^T X E)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowdae::ConstrainedSystem;
use crate::linalg::eigenvalues;
use crate::riccati::{
    beta_sq, closed_loop_is_stable, lqg_initial_factor, solve_projected_lr_from, LowRankFactor,
    LrOptions, RiccatiKind, RiccatiProblem, RiccatiSolution, RiccatiSystem,
};

/// `lambda_max(Y E^T X E)` from the factors through the `k_Y x k_Y` matrix
/// `(Z_Y^T E^T Z_X)(Z_X^T E Z_Y)`.
pub fn spectral_radius(x: &LowRankFactor, y: &LowRankFactor, e: &DMatrix<f64>) -> f64 {
    if x.rank() == 0 || y.rank() == 0 {
        return 0.0;
    }
    // the core is K^T K with K = Z_X^T E Z_Y, so its largest eigenvalue is
    // the squared spectral norm of K
    let k = x.z.transpose() * e * &y.z;
    let s = k.svd(false, false).singular_values.max();
    s * s
}

/// Same quantity from the dense product, for reference.
pub fn spectral_radius_dense(x: &DMatrix<f64>, y: &DMatrix<f64>, e: &DMatrix<f64>) -> Result<f64> {
    let prod = y * e.transpose() * x * e;
    Ok(eigenvalues(&prod)?
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Spectral part of the existence test: `(gamma^2 > rho, rho)`. Both
/// solutions are expected to come from stabilizing solvers; use
/// [`existence_check_full`] to also recheck the closed-loop pencils.
pub fn existence_check(
    x: &RiccatiSolution,
    y: &RiccatiSolution,
    e: &DMatrix<f64>,
    gamma: f64,
) -> (bool, f64) {
    let rho = spectral_radius(&x.low_rank(), &y.low_rank(), e);
    (gamma * gamma > rho, rho)
}

/// Spectral test plus stability of both closed-loop pencils.
pub fn existence_check_full(
    cs: &ConstrainedSystem,
    x: &LowRankFactor,
    y: &LowRankFactor,
    gamma: f64,
) -> Result<(bool, f64)> {
    let rho = spectral_radius(x, y, &cs.e);
    let b2 = beta_sq(gamma);
    let stable = closed_loop_is_stable(cs, RiccatiKind::Filter, b2, &y.dense())?
        && closed_loop_is_stable(cs, RiccatiKind::Regulator, b2, &x.dense())?;
    Ok((gamma * gamma > rho && stable, rho))
}

#[derive(Debug, Clone)]
pub struct MarginOptions {
    pub gamma_max: f64,
    pub rel_gap: f64,
    pub safety: f64,
    pub solver: LrOptions,
}

impl Default for MarginOptions {
    fn default() -> Self {
        Self {
            gamma_max: 1e6,
            rel_gap: 0.01,
            safety: 1.05,
            solver: LrOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub gamma: f64,
    /// Absent when a solver did not converge.
    pub rho: Option<f64>,
    pub feasible: bool,
}

#[derive(Debug, Clone)]
pub struct MarginReport {
    pub gamma: f64,
    pub feasible: bool,
    pub rho: f64,
    /// Sorted by `gamma` descending.
    pub probes: Vec<Probe>,
    pub x_factor: LowRankFactor,
    pub y_factor: LowRankFactor,
}

/// JSON form of a [`MarginReport`]; the factors are stored separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginSummary {
    pub gamma: f64,
    pub feasible: bool,
    pub rho: f64,
    pub probes: Vec<Probe>,
    pub ranks: Ranks,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ranks {
    pub filter: usize,
    pub regulator: usize,
}

impl MarginReport {
    pub fn summary(&self) -> MarginSummary {
        MarginSummary {
            gamma: self.gamma,
            feasible: self.feasible,
            rho: self.rho,
            probes: self.probes.clone(),
            ranks: Ranks {
                filter: self.y_factor.rank(),
                regulator: self.x_factor.rank(),
            },
        }
    }

    /// Smallest feasible probe, the upper edge of the bracket on `gamma_opt`.
    pub fn smallest_feasible(&self) -> Option<f64> {
        self.probes
            .iter()
            .filter(|p| p.feasible)
            .map(|p| p.gamma)
            .fold(None, |acc, g| Some(acc.map_or(g, |a: f64| a.min(g))))
    }
}

/// Riccati pair at one margin together with the outcome of the test.
pub struct PairSolve {
    pub x: LowRankFactor,
    pub y: LowRankFactor,
    pub probe: Probe,
}

/// Solves both equations at `gamma`, starting from the LQG factors.
/// `Ok(None)` means a solver failed to converge, which counts as infeasible.
pub fn solve_pair(
    cs: &ConstrainedSystem,
    gamma: f64,
    lqg: &LqgStart,
    opts: &LrOptions,
) -> Result<Option<PairSolve>> {
    let solve = |kind, init: Option<&LowRankFactor>| -> Result<Option<LowRankFactor>> {
        let prob = RiccatiProblem::new(kind, RiccatiSystem::Constrained(cs), beta_sq(gamma))?;
        match solve_projected_lr_from(&prob, opts, init) {
            Ok(sol) => Ok(Some(sol.low_rank())),
            Err(Error::NoConvergence { .. }) | Err(Error::RankRunaway { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let Some(y) = solve(RiccatiKind::Filter, lqg.filter.as_ref())? else {
        return Ok(None);
    };
    let Some(x) = solve(RiccatiKind::Regulator, lqg.regulator.as_ref())? else {
        return Ok(None);
    };
    let (feasible, rho) = existence_check_full(cs, &x, &y, gamma)?;
    Ok(Some(PairSolve {
        x,
        y,
        probe: Probe {
            gamma,
            rho: Some(rho),
            feasible,
        },
    }))
}

/// LQG solutions reused as starting points for every margin.
#[derive(Debug, Clone, Default)]
pub struct LqgStart {
    pub filter: Option<LowRankFactor>,
    pub regulator: Option<LowRankFactor>,
}

impl LqgStart {
    pub fn new(cs: &ConstrainedSystem, opts: &LrOptions) -> Result<Self> {
        let sys = RiccatiSystem::Constrained(cs);
        Ok(Self {
            filter: lqg_initial_factor(sys, RiccatiKind::Filter, opts)?,
            regulator: lqg_initial_factor(sys, RiccatiKind::Regulator, opts)?,
        })
    }
}

/// Bisection in `log gamma` between the largest infeasible and the smallest
/// feasible probe. The bracket starts at `gamma_max` and moves down by
/// halving `log gamma` until a probe fails.
pub fn compute_margin(plant: &ConstrainedSystem, opts: &MarginOptions) -> Result<MarginReport> {
    if !(opts.gamma_max > 1.0 && opts.rel_gap > 0.0 && opts.safety >= 1.0) {
        return Err(Error::InvalidArgument(
            "need gamma_max > 1, rel_gap > 0 and safety >= 1".into(),
        ));
    }
    let lqg = LqgStart::new(plant, &opts.solver)?;
    let mut probes = Vec::new();
    let run = |gamma: f64, probes: &mut Vec<Probe>| -> Result<bool> {
        let out = solve_pair(plant, gamma, &lqg, &opts.solver)?;
        let probe = match out {
            Some(p) => p.probe,
            None => Probe {
                gamma,
                rho: None,
                feasible: false,
            },
        };
        probes.push(probe);
        Ok(probe.feasible)
    };

    let mut hi = opts.gamma_max;
    if !run(hi, &mut probes)? {
        return Err(Error::InfeasibleAtGammaMax(hi));
    }
    // lower edge of the bracket; gamma_opt >= 1 for normalized plants
    let mut lo = 1.0;
    loop {
        let next = hi.sqrt();
        if next - 1.0 < opts.rel_gap {
            break;
        }
        if run(next, &mut probes)? {
            hi = next;
        } else {
            lo = next;
            break;
        }
    }
    while hi / lo - 1.0 >= opts.rel_gap {
        let mid = (hi * lo).sqrt();
        if run(mid, &mut probes)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }

    let gamma = opts.safety * hi;
    let accepted = solve_pair(plant, gamma, &lqg, &opts.solver)?.ok_or(Error::NoConvergence {
        iterations: opts.solver.max_iter,
        residual: f64::NAN,
    })?;
    probes.sort_by(|a, b| b.gamma.total_cmp(&a.gamma));
    Ok(MarginReport {
        gamma,
        feasible: accepted.probe.feasible,
        rho: accepted.probe.rho.unwrap_or(f64::NAN),
        probes,
        x_factor: accepted.x,
        y_factor: accepted.y,
    })
}

/// Feasibility boundary of the scalar plant `(1, a, 1, 1)`, where
/// `x = y = (a + sqrt(a^2 + beta^2)) / beta^2` and the test reads
/// `gamma^2 > x y`. Grid search over `gamma` with the given step.
pub fn scalar_gamma_opt(a: f64, step: f64) -> f64 {
    let feasible = |g: f64| {
        let b2 = beta_sq(g);
        let x = (a + (a * a + b2).sqrt()) / b2;
        g * g > x * x
    };
    let mut g = 1.0 + step;
    while !feasible(g) {
        g += step;
    }
    g
}

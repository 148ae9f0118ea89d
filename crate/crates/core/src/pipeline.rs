//! Reduction, controller synthesis and certification in one pass, and the
//! linearization-error sweep built on it.

use serde::{Deserialize, Serialize};

use crate::controller::{
    central_controller_reduced, reduced_riccati_lift, robustness_predicate, CentralController,
};
use crate::coprime::coprime_error;
use crate::error::{Error, Result};
use crate::flowdae::{perturb_linearization, ConstrainedSystem, NonlinearPlant, PerturbationMode};
use crate::hinfbt::{aposteriori_stab_check, reduce, Certificate, Cut, ReducedModel};
use crate::margin::{solve_pair, LqgStart};
use crate::riccati::{LowRankFactor, LrOptions};
use crate::simulate::{simulate_closed_loop, stabilization_verdict, Rationale, SimulationConfig};

/// Relative accuracy of every H-infinity norm evaluated here.
pub const NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub rom: ReducedModel,
    pub controller: CentralController,
    pub certificate: Certificate,
}

/// Reduced model and reduced central controller from the Riccati factors
/// `x` (regulator) and `y` (filter) at `gamma`, with both certificates.
///
/// A reduced closed loop without a finite norm, or a reduced model without a
/// stabilizing filter solution, fails the a-posteriori test.
pub fn synthesize(
    g: &ConstrainedSystem,
    x: &LowRankFactor,
    y: &LowRankFactor,
    gamma: f64,
    cut: Cut,
) -> Result<Synthesis> {
    let rom = reduce(g, x, y, gamma, cut)?;
    let mut certificate = Certificate::apriori(rom.tail(), gamma, rom.r);
    let (yh, xh) = reduced_riccati_lift(&rom.w, &rom.t, &g.e, y, x);
    let controller = central_controller_reduced(&rom, &yh, &xh, gamma)?;
    match aposteriori_stab_check(g, y, &rom, &controller.system()?, NORM_TOL) {
        Ok(post) => {
            certificate.eps_hat = Some(post.eps_hat);
            certificate.gamma_hat = Some(post.gamma_hat);
            certificate.aposteriori_ok = Some(post.ok);
        }
        Err(Error::UnstableSystem(_) | Error::NotStabilizing | Error::NoStabilizingSolution(_)) => {
            certificate.aposteriori_ok = Some(false)
        }
        Err(e) => return Err(e),
    }
    Ok(Synthesis {
        rom,
        controller,
        certificate,
    })
}

/// Riccati factors of an inexact linearization at the common margin and its
/// coprime factor distance to the exact one.
#[derive(Debug, Clone)]
pub struct LinearizationDesign {
    pub ell: i64,
    pub system: ConstrainedSystem,
    pub x: LowRankFactor,
    pub y: LowRankFactor,
    pub delta_norm: f64,
}

/// Solves both equations of the `ell`-th linearization at `gamma` and
/// measures `||[N - N_l, M - M_l]||` against the exact linearization, whose
/// filter factor at `gamma` is `y_exact`.
pub fn design_at(
    plant: &NonlinearPlant,
    mode: PerturbationMode,
    ell: i64,
    gamma: f64,
    y_exact: &LowRankFactor,
    opts: &LrOptions,
) -> Result<LinearizationDesign> {
    let fam = perturb_linearization(plant, mode, ell)?;
    let lqg = LqgStart::new(&fam.system, opts)?;
    let pair = solve_pair(&fam.system, gamma, &lqg, opts)?
        .filter(|p| p.probe.feasible)
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "linearization {ell} is infeasible at gamma = {gamma}"
            ))
        })?;
    let delta_norm = coprime_error(
        &plant.linear,
        &fam.system,
        y_exact,
        Some(&pair.y),
        gamma,
        NORM_TOL,
    )?;
    Ok(LinearizationDesign {
        ell,
        system: fam.system,
        x: pair.x,
        y: pair.y,
        delta_norm,
    })
}

/// One `(ell, tol)` cell: controller designed on the inexact linearization,
/// run on the nonlinear plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ell: i64,
    pub tol: f64,
    pub r: usize,
    pub stabilized: bool,
    pub eps: f64,
    pub eps_hat: Option<f64>,
    pub delta_norm: f64,
    pub apriori_ok: bool,
    pub aposteriori_ok: Option<bool>,
    pub robcov_ok: bool,
    pub gamma_gk: Option<f64>,
    pub rationale: Rationale,
}

impl SweepRow {
    /// Both a-priori conditions hold: truncation and linearization error.
    pub fn certified(&self) -> bool {
        self.apriori_ok && self.robcov_ok
    }
}

pub fn sweep_cell(
    plant: &NonlinearPlant,
    design: &LinearizationDesign,
    gamma: f64,
    tol: f64,
    cfg: &SimulationConfig,
) -> Result<SweepRow> {
    let syn = synthesize(&design.system, &design.x, &design.y, gamma, Cut::Tol(tol))?;
    let trace = simulate_closed_loop(plant, Some(&syn.controller), cfg)?;
    let verdict = stabilization_verdict(&trace)?;
    let cert = &syn.certificate;
    Ok(SweepRow {
        ell: design.ell,
        tol,
        r: syn.rom.r,
        stabilized: verdict.stabilized,
        eps: cert.eps,
        eps_hat: cert.eps_hat,
        delta_norm: design.delta_norm,
        apriori_ok: cert.apriori_ok,
        aposteriori_ok: cert.aposteriori_ok,
        robcov_ok: cert
            .gamma_gk
            .is_some_and(|g| robustness_predicate(design.delta_norm, g)),
        gamma_gk: cert.gamma_gk,
        rationale: verdict.rationale,
    })
}

/// Row for a linearization without a design at the common margin: the plant
/// runs uncontrolled and nothing is certified.
pub fn undesigned_cell(
    plant: &NonlinearPlant,
    ell: i64,
    tol: f64,
    cfg: &SimulationConfig,
) -> Result<SweepRow> {
    let verdict = stabilization_verdict(&simulate_closed_loop(plant, None, cfg)?)?;
    Ok(SweepRow {
        ell,
        tol,
        r: 0,
        stabilized: verdict.stabilized,
        eps: f64::NAN,
        eps_hat: None,
        delta_norm: f64::NAN,
        apriori_ok: false,
        aposteriori_ok: None,
        robcov_ok: false,
        gamma_gk: None,
        rationale: verdict.rationale,
    })
}

//! Normalized left coprime factorizations `G = M^{-1} N` of constrained
//! systems built from the stabilizing filter solution, and the coprime factor
//! distance between two plants.

use nalgebra::DMatrix;

use crate::error::{dim_err, Error, Result};
use crate::flowdae::ConstrainedSystem;
use crate::linalg::hstack;
use crate::lti::{difference, hinf_norm, is_stable, DescriptorSystem};
use crate::riccati::RiccatiKind;
use crate::riccati::{beta_sq, solve_projected_lr, LowRankFactor, LrOptions, RiccatiProblem};

/// Factors `N` (p x m) and `M` (p x p) sharing the observer pencil
/// `s E - (A - beta^2 E Y C^T C)` in `ker J` coordinates.
///
/// With `beta < 1` the normalized pair is `[beta N, M]`, which is what
/// `stacked` realizes; `N` and `M` themselves satisfy `G = M^{-1} N`.
#[derive(Debug, Clone)]
pub struct CoprimePair {
    pub n_sys: DescriptorSystem,
    pub m_sys: DescriptorSystem,
    pub gamma: f64,
    pub beta: f64,
    pub stacked: DescriptorSystem,
}

impl CoprimePair {
    /// Unscaled joint realization `[N M]`.
    pub fn joint(&self) -> DescriptorSystem {
        let mut sys = self.stacked.clone();
        let m = self.n_sys.inputs();
        let scaled = sys.b.columns(0, m) / self.beta;
        sys.b.columns_mut(0, m).copy_from(&scaled);
        sys
    }
}

/// `[N M] = C (sE - A_Y)^{-1} [B, -L] + [0 I]` with
/// `A_Y = A - beta^2 E Y C^T C` and `L = beta^2 E Y C^T`, kept factored as
/// `(E Z)(Z^T C^T)`.
pub fn coprime_realization(
    csys: &ConstrainedSystem,
    y: &LowRankFactor,
    gamma: f64,
) -> Result<CoprimePair> {
    if !(gamma > 1.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma = {gamma} must exceed 1"
        )));
    }
    if y.z.nrows() != csys.n_v() {
        return Err(dim_err("filter factor does not match the system order"));
    }
    let b2 = beta_sq(gamma);
    let comp = csys.compress();
    let zr = comp.theta.transpose() * &y.z;
    let g = &comp.sys;
    let ez = &g.e * &zr;
    let zc = (&g.c * &zr).transpose();
    let l = &ez * &zc * b2;
    let a_y = &g.a - &l * &g.c;
    let (p, m) = (g.outputs(), g.inputs());
    let n_sys = DescriptorSystem {
        e: g.e.clone(),
        a: a_y.clone(),
        b: g.b.clone(),
        c: g.c.clone(),
        d: DMatrix::zeros(p, m),
        e_invertible: true,
    };
    if !is_stable(&n_sys)?.stable {
        return Err(Error::NotStabilizing);
    }
    let m_sys = DescriptorSystem {
        b: -&l,
        d: DMatrix::identity(p, p),
        ..n_sys.clone()
    };
    let beta = b2.sqrt();
    let stacked = DescriptorSystem {
        b: hstack(&[&(&g.b * beta), &(-&l)]),
        d: hstack(&[&DMatrix::zeros(p, m), &DMatrix::identity(p, p)]),
        ..n_sys.clone()
    };
    Ok(CoprimePair {
        n_sys,
        m_sys,
        gamma,
        beta,
        stacked,
    })
}

/// Filter factor of `csys` at margin `gamma` by the projected low-rank
/// solver.
pub fn filter_factor(
    csys: &ConstrainedSystem,
    gamma: f64,
    opts: &LrOptions,
) -> Result<LowRankFactor> {
    let prob = RiccatiProblem::constrained(RiccatiKind::Filter, csys, gamma)?;
    Ok(solve_projected_lr(&prob, opts)?.low_rank())
}

/// `||[N - N_d, M - M_d]||_inf` with both factorizations taken at the same
/// margin. When `y_delta` is absent the filter equation of `g_delta` is
/// solved here.
pub fn coprime_error(
    g: &ConstrainedSystem,
    g_delta: &ConstrainedSystem,
    y: &LowRankFactor,
    y_delta: Option<&LowRankFactor>,
    gamma: f64,
    tol: f64,
) -> Result<f64> {
    if g.inputs() != g_delta.inputs() || g.outputs() != g_delta.outputs() {
        return Err(dim_err("plants have different input/output sizes"));
    }
    let owned;
    let y_delta = match y_delta {
        Some(f) => f,
        None => {
            owned = filter_factor(g_delta, gamma, &LrOptions::default())?;
            &owned
        }
    };
    let f = coprime_realization(g, y, gamma)?;
    let fd = coprime_realization(g_delta, y_delta, gamma)?;
    hinf_norm(&difference(&f.joint(), &fd.joint())?, tol)
}

/// `||[beta (N1 - N2), M1 - M2]||_inf` between two factorizations at a
/// common margin.
pub fn scaled_coprime_distance(f1: &CoprimePair, f2: &CoprimePair, tol: f64) -> Result<f64> {
    hinf_norm(&difference(&f1.stacked, &f2.stacked)?, tol)
}

//! Stabilizing solutions of the normalized H-infinity Riccati equations
//!
//! filter:    `A Y E^T + E Y A^T - beta^2 E Y C^T C Y E^T + B B^T = 0`
//! regulator: `A^T X E + E^T X A - beta^2 E^T X B B^T X E + C^T C = 0`
//!
//! with `beta^2 = 1 - gamma^-2`. Constrained systems use the projected form
//! where every term is wrapped as `Pi (.) Pi^T`.

mod lowrank;

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowdae::{explicit_projector, ConstrainedSystem, Leray};
use crate::linalg::{care, hstack, kernel_basis, symmetrize, C64};
use crate::lti::{is_stable, DescriptorSystem};

pub use lowrank::{lqg_initial_factor, solve_projected_lr, solve_projected_lr_from, LrOptions};

/// Guard for the dense Schur solver.
pub const DENSE_LIMIT: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiccatiKind {
    Filter,
    Regulator,
}

#[derive(Debug, Clone, Copy)]
pub enum RiccatiSystem<'a> {
    Descriptor(&'a DescriptorSystem),
    Constrained(&'a ConstrainedSystem),
}

#[derive(Debug, Clone, Copy)]
pub struct RiccatiProblem<'a> {
    pub kind: RiccatiKind,
    pub system: RiccatiSystem<'a>,
    pub beta_sq: f64,
}

/// `beta^2 = 1 - gamma^-2`.
pub fn beta_sq(gamma: f64) -> f64 {
    1.0 - 1.0 / (gamma * gamma)
}

impl<'a> RiccatiProblem<'a> {
    pub fn new(kind: RiccatiKind, system: RiccatiSystem<'a>, beta_sq: f64) -> Result<Self> {
        if !(beta_sq > 0.0 && beta_sq <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "beta^2 = {beta_sq} not in (0, 1]"
            )));
        }
        Ok(Self {
            kind,
            system,
            beta_sq,
        })
    }

    pub fn descriptor(kind: RiccatiKind, sys: &'a DescriptorSystem, gamma: f64) -> Result<Self> {
        Self::new(kind, RiccatiSystem::Descriptor(sys), beta_sq(gamma))
    }

    pub fn constrained(kind: RiccatiKind, sys: &'a ConstrainedSystem, gamma: f64) -> Result<Self> {
        Self::new(kind, RiccatiSystem::Constrained(sys), beta_sq(gamma))
    }
}

/// Tall factor `Z` with `X ~ Z Z^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactor {
    pub z: DMatrix<f64>,
    pub column_tol: f64,
}

impl LowRankFactor {
    pub fn new(z: DMatrix<f64>) -> Self {
        Self {
            z,
            column_tol: lowrank::COLUMN_TOL,
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(DMatrix::zeros(n, 0))
    }

    pub fn rank(&self) -> usize {
        self.z.ncols()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        &self.z * self.z.transpose()
    }

    /// Factor of a symmetric PSD matrix; negative roundoff eigenvalues are
    /// dropped.
    pub fn from_psd(x: &DMatrix<f64>) -> Self {
        let n = x.nrows();
        if n == 0 {
            return Self::zeros(0);
        }
        let eig = SymmetricEigen::new(symmetrize(x));
        let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let keep: Vec<usize> = (0..n)
            .filter(|&i| eig.eigenvalues[i] > 1e-14 * lmax && lmax > 0.0)
            .collect();
        let mut z = DMatrix::zeros(n, keep.len());
        for (k, &i) in keep.iter().enumerate() {
            z.set_column(k, &(eig.eigenvectors.column(i) * eig.eigenvalues[i].sqrt()));
        }
        Self::new(z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SolutionFactor {
    LowRank(LowRankFactor),
    Dense(DMatrix<f64>),
}

/// One line of the optional iteration log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// ADI step inside the Newton step, absent for Newton-level records.
    pub adi: Option<usize>,
    pub residual: f64,
    pub rank: usize,
    pub shift: Option<[f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub factor: SolutionFactor,
    pub residual_rel: f64,
    pub iterations: usize,
    pub shifts_used: Vec<C64>,
    pub log: Vec<IterationRecord>,
}

impl RiccatiSolution {
    pub fn dense(&self) -> DMatrix<f64> {
        match &self.factor {
            SolutionFactor::Dense(x) => x.clone(),
            SolutionFactor::LowRank(f) => f.dense(),
        }
    }

    pub fn low_rank(&self) -> LowRankFactor {
        match &self.factor {
            SolutionFactor::Dense(x) => LowRankFactor::from_psd(x),
            SolutionFactor::LowRank(f) => f.clone(),
        }
    }

    /// Writes the iteration log as JSON lines.
    pub fn write_log<W: Write>(&self, mut out: W) -> Result<()> {
        for rec in &self.log {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn dense_solution(x: DMatrix<f64>, residual_rel: f64) -> RiccatiSolution {
    RiccatiSolution {
        factor: SolutionFactor::Dense(x),
        residual_rel,
        iterations: 1,
        shifts_used: Vec::new(),
        log: Vec::new(),
    }
}

/// Dense stabilizing solution by the ordered Schur method on the equivalent
/// standard equation.
pub fn solve_care_dense(prob: &RiccatiProblem) -> Result<RiccatiSolution> {
    let sys = match prob.system {
        RiccatiSystem::Descriptor(s) => s,
        RiccatiSystem::Constrained(_) => {
            return Err(Error::InvalidArgument(
                "dense solver needs an unconstrained system; use oracle_projected_dense".into(),
            ))
        }
    };
    let x = care_descriptor(sys, prob.kind, prob.beta_sq)?;
    let res = riccati_residual(prob, &SolutionFactor::Dense(x.clone()));
    Ok(dense_solution(x, res))
}

fn care_descriptor(
    sys: &DescriptorSystem,
    kind: RiccatiKind,
    beta_sq: f64,
) -> Result<DMatrix<f64>> {
    let n = sys.order();
    if n > DENSE_LIMIT {
        return Err(Error::InvalidArgument(format!(
            "order {n} exceeds the dense limit {DENSE_LIMIT}"
        )));
    }
    let (at, bt) = sys.to_standard()?;
    let c = &sys.c;
    let x = match kind {
        RiccatiKind::Filter => {
            // At Y + Y At^T - beta^2 Y C^T C Y + Bt Bt^T = 0
            let g = c.transpose() * c * beta_sq;
            care(&at.transpose(), &g, &(&bt * bt.transpose()))?
        }
        RiccatiKind::Regulator => {
            // P = E^T X E solves At^T P + P At - beta^2 P Bt Bt^T P + C^T C = 0
            let g = &bt * bt.transpose() * beta_sq;
            let p = care(&at, &g, &(c.transpose() * c))?;
            let lu = sys.e.transpose().lu();
            let tmp = lu.solve(&p).ok_or(Error::SingularPencil("E".into()))?;
            let x = lu
                .solve(&tmp.transpose())
                .ok_or(Error::SingularPencil("E".into()))?;
            symmetrize(&x)
        }
    };
    // the closed-loop pencil must be stable
    let acl = closed_loop_matrix(&sys.e, &sys.a, &sys.b, c, kind, beta_sq, &x);
    let rep = is_stable(&DescriptorSystem {
        e: sys.e.clone(),
        a: acl,
        b: DMatrix::zeros(n, 0),
        c: DMatrix::zeros(0, n),
        d: DMatrix::zeros(0, 0),
        e_invertible: true,
    })?;
    if !rep.stable {
        return Err(Error::NoStabilizingSolution(format!(
            "closed-loop abscissa {:e}",
            rep.abscissa()
        )));
    }
    Ok(x)
}

/// Filter: `A - beta^2 E Y C^T C`; regulator: `A - beta^2 B B^T X E`.
pub fn closed_loop_matrix(
    e: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    kind: RiccatiKind,
    beta_sq: f64,
    x: &DMatrix<f64>,
) -> DMatrix<f64> {
    match kind {
        RiccatiKind::Filter => a - (e * x * c.transpose()) * c * beta_sq,
        RiccatiKind::Regulator => a - b * (b.transpose() * x * e) * beta_sq,
    }
}

/// Filter-form coefficients `(E, A, B, C)`; the regulator equation is the
/// filter equation of `(E^T, A^T, C^T, B^T)`.
fn filter_form(
    e: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    kind: RiccatiKind,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    match kind {
        RiccatiKind::Filter => (e.clone(), a.clone(), b.clone(), c.clone()),
        RiccatiKind::Regulator => (e.transpose(), a.transpose(), c.transpose(), b.transpose()),
    }
}

/// Relative residual `||R||_F / (||B B^T||_F + ||E Y A^T||_F)` in filter
/// form (regulator: `||C^T C||_F + ||E^T X A||_F`). Low-rank inputs are
/// evaluated in factored form; constrained systems use the projected
/// residual.
pub fn riccati_residual(prob: &RiccatiProblem, x: &SolutionFactor) -> f64 {
    match prob.system {
        RiccatiSystem::Descriptor(sys) => {
            let (e, a, b, c) = filter_form(&sys.e, &sys.a, &sys.b, &sys.c, prob.kind);
            match x {
                SolutionFactor::Dense(y) => dense_residual(&e, &a, &b, &c, prob.beta_sq, y, None),
                SolutionFactor::LowRank(f) => {
                    factored_residual(&e, &a, &b, &c, prob.beta_sq, &f.z, None)
                }
            }
        }
        RiccatiSystem::Constrained(cs) => {
            let fs = match prob.kind {
                RiccatiKind::Filter => cs.clone(),
                RiccatiKind::Regulator => cs.transposed(),
            };
            match x {
                SolutionFactor::Dense(y) => {
                    let pi = explicit_projector(&fs);
                    dense_residual(&fs.e, &fs.a, &fs.b, &fs.c, prob.beta_sq, y, Some(&pi))
                }
                SolutionFactor::LowRank(f) => match Leray::new(&fs) {
                    Ok(l) => {
                        factored_residual(&fs.e, &fs.a, &fs.b, &fs.c, prob.beta_sq, &f.z, Some(&l))
                    }
                    Err(_) => f64::INFINITY,
                },
            }
        }
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn dense_residual(
    e: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    beta_sq: f64,
    y: &DMatrix<f64>,
    pi: Option<&DMatrix<f64>>,
) -> f64 {
    let eya = e * y * a.transpose();
    let eyc = e * y * c.transpose();
    let bb = b * b.transpose();
    let mut r = &eya + eya.transpose() - &eyc * eyc.transpose() * beta_sq + &bb;
    let (mut bbn, mut eyan) = (bb.norm(), eya.norm());
    if let Some(pi) = pi {
        r = pi * r * pi.transpose();
        bbn = (pi * &bb * pi.transpose()).norm();
        eyan = (pi * &eya * pi.transpose()).norm();
    }
    ratio(r.norm(), bbn + eyan)
}

/// Frobenius norm of `U core U^T` via a thin QR of `U`.
fn congruence_norm(u: &DMatrix<f64>, core: &DMatrix<f64>) -> f64 {
    if u.ncols() == 0 {
        return 0.0;
    }
    let r = u.clone().qr().r();
    (&r * core * r.transpose()).norm()
}

fn product_norm(u: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
    if u.ncols() == 0 {
        return 0.0;
    }
    let ru = u.clone().qr().r();
    let rv = v.clone().qr().r();
    (ru * rv.transpose()).norm()
}

pub(crate) fn factored_residual(
    e: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    beta_sq: f64,
    z: &DMatrix<f64>,
    leray: Option<&Leray>,
) -> f64 {
    let k = z.ncols();
    let m = b.ncols();
    let (az, pb) = match leray {
        Some(l) => match (l.apply(&(a * z)), l.apply(b)) {
            (Ok(x), Ok(y)) => (x, y),
            _ => return f64::INFINITY,
        },
        None => (a * z, b.clone()),
    };
    let ez = e * z;
    let cz = c * z;
    let u = hstack(&[&az, &ez, &pb]);
    let mut core = DMatrix::zeros(2 * k + m, 2 * k + m);
    for i in 0..k {
        core[(i, k + i)] = 1.0;
        core[(k + i, i)] = 1.0;
    }
    let q = cz.transpose() * &cz * (-beta_sq);
    core.view_mut((k, k), (k, k)).copy_from(&q);
    for i in 0..m {
        core[(2 * k + i, 2 * k + i)] = 1.0;
    }
    let num = congruence_norm(&u, &core);
    let bbn = congruence_norm(&pb, &DMatrix::identity(m, m));
    ratio(num, bbn + product_norm(&ez, &az))
}

/// Brute-force reference for the projected equations: assembles `Pi A Pi^T`,
/// `Pi B`, `C Pi^T` with the explicit projector, restricts to an orthonormal
/// basis of `ker J`, solves densely and lifts back.
pub fn oracle_projected_dense(prob: &RiccatiProblem) -> Result<RiccatiSolution> {
    let cs = match prob.system {
        RiccatiSystem::Constrained(cs) => cs,
        RiccatiSystem::Descriptor(_) => {
            return Err(Error::InvalidArgument(
                "oracle needs a constrained system".into(),
            ))
        }
    };
    if cs.n_v() > 300 {
        return Err(Error::InvalidArgument(
            "dense oracle limited to n_v <= 300".into(),
        ));
    }
    let pi = explicit_projector(cs);
    let ap = &pi * &cs.a * pi.transpose();
    let bp = &pi * &cs.b;
    let cp = &cs.c * pi.transpose();
    let theta = kernel_basis(&cs.j);
    let tt = theta.transpose();
    let reduced = DescriptorSystem {
        e: &tt * &cs.e * &theta,
        a: &tt * ap * &theta,
        b: &tt * bp,
        c: cp * &theta,
        d: DMatrix::zeros(cs.outputs(), cs.inputs()),
        e_invertible: true,
    };
    let xr = care_descriptor(&reduced, prob.kind, prob.beta_sq)?;
    let x = symmetrize(&(&theta * xr * &tt));
    let res = riccati_residual(prob, &SolutionFactor::Dense(x.clone()));
    Ok(dense_solution(x, res))
}

/// Whether the closed-loop pencil of a (possibly projected) solution is
/// stable, checked in `ker J` coordinates.
pub fn closed_loop_is_stable(
    cs: &ConstrainedSystem,
    kind: RiccatiKind,
    beta_sq: f64,
    x: &DMatrix<f64>,
) -> Result<bool> {
    let acl = closed_loop_matrix(&cs.e, &cs.a, &cs.b, &cs.c, kind, beta_sq, x);
    let comp = cs.with_a(acl).compress();
    Ok(is_stable(&comp.sys)?.stable)
}

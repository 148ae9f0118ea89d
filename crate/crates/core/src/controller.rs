//! Central H-infinity controllers for the normalized plant, full order from
//! the Riccati factors and reduced order from a balanced truncation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::flowdae::ConstrainedSystem;
use crate::hinfbt::ReducedModel;
use crate::linalg::symmetrize;
use crate::lti::DescriptorSystem;
use crate::riccati::{beta_sq, LowRankFactor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Full,
    Reduced,
}

/// `E_k x' = A_k x + B_k y`, `u = C_k x`. Full-order controllers of
/// constrained plants carry the plant's `J`: their state obeys `J x = 0`
/// with a multiplier `J^T lambda` in the state equation.
#[derive(Debug, Clone)]
pub struct CentralController {
    pub e_k: DMatrix<f64>,
    pub a_k: DMatrix<f64>,
    pub b_k: DMatrix<f64>,
    pub c_k: DMatrix<f64>,
    pub j: Option<DMatrix<f64>>,
    pub order: usize,
    pub gamma: f64,
    pub kind: ControllerKind,
}

impl CentralController {
    pub fn inputs(&self) -> usize {
        self.b_k.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.c_k.nrows()
    }

    /// Unconstrained realization; a constraint is removed by restricting to
    /// an orthonormal basis of `ker J`.
    pub fn system(&self) -> Result<DescriptorSystem> {
        match &self.j {
            Some(j) if j.nrows() > 0 => {
                let cs = ConstrainedSystem::new(
                    self.e_k.clone(),
                    self.a_k.clone(),
                    j.clone(),
                    self.b_k.clone(),
                    self.c_k.clone(),
                )?;
                Ok(cs.compress().sys)
            }
            _ => DescriptorSystem::new(
                self.e_k.clone(),
                self.a_k.clone(),
                self.b_k.clone(),
                self.c_k.clone(),
            ),
        }
    }
}

/// `X E Z` with `Z = (I - gamma^-2 Y E^T X E)^{-1}` by the Woodbury identity
/// on the `k_Y x k_Y` core `K = Z_Y^T E^T Z_X Z_X^T E Z_Y`:
/// `Z = I + gamma^-2 Z_Y (I - gamma^-2 K)^{-1} Z_Y^T E^T X E`.
fn xez(x: &LowRankFactor, y: &LowRankFactor, e: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    let g2 = 1.0 / (gamma * gamma);
    let xe = &x.z * (x.z.transpose() * e);
    if x.rank() == 0 || y.rank() == 0 {
        return Ok(xe);
    }
    let ety = e.transpose() * &y.z;
    let k_half = x.z.transpose() * &ety;
    let k = symmetrize(&(k_half.transpose() * &k_half));
    let rho = k.clone().symmetric_eigen().eigenvalues.max();
    if gamma * gamma <= rho {
        return Err(Error::SpectralRadiusViolation {
            gamma_sq: gamma * gamma,
            rho,
        });
    }
    let core = DMatrix::identity(y.rank(), y.rank()) - &k * g2;
    let inner = core
        .lu()
        .solve(&(y.z.transpose() * e.transpose() * &xe))
        .ok_or_else(|| Error::SpectralRadiusViolation {
            gamma_sq: gamma * gamma,
            rho,
        })?;
    // X E Z = X E + gamma^-2 (X E Z_Y) inner
    Ok(&xe + (&xe * &y.z) * inner * g2)
}

/// Central controller of the normalized plant:
/// `A_k = A - beta^2 E Y C^T C - B B^T X E Z`, `B_k = E Y C^T`,
/// `C_k = -B^T X E Z`, `E_k = E`.
pub fn central_controller_full(
    sys: &ConstrainedSystem,
    x: &LowRankFactor,
    y: &LowRankFactor,
    gamma: f64,
) -> Result<CentralController> {
    let n = sys.n_v();
    if x.z.nrows() != n || y.z.nrows() != n {
        return Err(dim_err("factors do not match the system order"));
    }
    let b2 = beta_sq(gamma);
    let m = xez(x, y, &sys.e, gamma)?;
    let eyct = &sys.e * &y.z * (&sys.c * &y.z).transpose();
    let c_k = -(sys.b.transpose() * m);
    let a_k = &sys.a - &eyct * &sys.c * b2 + &sys.b * &c_k;
    Ok(CentralController {
        e_k: sys.e.clone(),
        a_k,
        b_k: eyct,
        c_k,
        j: (sys.n_p() > 0).then(|| sys.j.clone()),
        order: n,
        gamma,
        kind: ControllerKind::Full,
    })
}

/// `Y_r = W^T E Z_f Z_f^T E^T W` and `X_r = T^T E^T Z_r Z_r^T E T`.
pub fn reduced_riccati_lift(
    w: &DMatrix<f64>,
    t: &DMatrix<f64>,
    e: &DMatrix<f64>,
    z_f: &LowRankFactor,
    z_r: &LowRankFactor,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let yf = w.transpose() * e * &z_f.z;
    let xr = t.transpose() * e.transpose() * &z_r.z;
    (
        symmetrize(&(&yf * yf.transpose())),
        symmetrize(&(&xr * xr.transpose())),
    )
}

/// Order-`r` central controller from the lifted solutions:
/// `A_k = A_r - beta^2 Y_r C_r^T C_r - B_r B_r^T X_r Z_r`, `B_k = Y_r C_r^T`,
/// `C_k = -B_r^T X_r Z_r` with `Z_r = (I - gamma^-2 Y_r X_r)^{-1}`.
pub fn central_controller_reduced(
    rom: &ReducedModel,
    y_hat: &DMatrix<f64>,
    x_hat: &DMatrix<f64>,
    gamma: f64,
) -> Result<CentralController> {
    let r = rom.r;
    if y_hat.shape() != (r, r) || x_hat.shape() != (r, r) {
        return Err(dim_err("lifted solutions must be r x r"));
    }
    let b2 = beta_sq(gamma);
    let core = DMatrix::identity(r, r) - y_hat * x_hat / (gamma * gamma);
    let sv = core.clone().svd(false, false).singular_values;
    let cond = sv.max() / sv.min();
    if !(cond < 1e12) {
        return Err(Error::NearSingularZ(cond));
    }
    let z = core
        .try_inverse()
        .ok_or(Error::NearSingularZ(f64::INFINITY))?;
    let c_k = -(rom.b.transpose() * x_hat * z);
    let b_k = y_hat * rom.c.transpose();
    let a_k = &rom.a - &b_k * &rom.c * b2 + &rom.b * &c_k;
    Ok(CentralController {
        e_k: DMatrix::identity(r, r),
        a_k,
        b_k,
        c_k,
        j: None,
        order: r,
        gamma,
        kind: ControllerKind::Reduced,
    })
}

/// Coprime factor perturbations below `1 / gamma_effective` are tolerated.
pub fn robustness_predicate(delta_norm: f64, gamma_effective: f64) -> bool {
    delta_norm < 1.0 / gamma_effective
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hinfbt::{reduce, Cut};
    use crate::linalg::C64;
    use crate::lti::{
        build_normalized_plant, eval_transfer, hinf_norm, is_stable, lft_closed_loop,
    };
    use crate::riccati::{solve_care_dense, RiccatiKind, RiccatiProblem};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn dense_pair(sys: &DescriptorSystem, gamma: f64) -> (LowRankFactor, LowRankFactor) {
        let solve = |kind| {
            solve_care_dense(&RiccatiProblem::descriptor(kind, sys, gamma).unwrap())
                .unwrap()
                .low_rank()
        };
        (solve(RiccatiKind::Regulator), solve(RiccatiKind::Filter))
    }

    fn random_plant(seed: u64, n: usize) -> DescriptorSystem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |rows, cols| DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        let a = r(n, n) - DMatrix::identity(n, n) * 0.5;
        let b = r(n, 2);
        let c = r(2, n);
        DescriptorSystem::standard(a, b, c).unwrap()
    }

    #[test]
    fn scalar_controller_matches_formulas() {
        let gamma = 10.0;
        let sys = DescriptorSystem::new(m1(1.0), m1(-1.0), m1(1.0), m1(1.0)).unwrap();
        let cs = ConstrainedSystem::from_descriptor(&sys).unwrap();
        let (x, y) = dense_pair(&sys, gamma);
        let k = central_controller_full(&cs, &x, &y, gamma).unwrap();
        let b2 = 0.99;
        let xs = (-1.0 + (1.0f64 + b2).sqrt()) / b2;
        let z = 1.0 / (1.0 - 0.01 * xs * xs);
        let a_k = -1.0 - b2 * xs - xs * z;
        assert!((k.a_k[(0, 0)] - a_k).abs() < 1e-12);
        assert!((k.b_k[(0, 0)] - xs).abs() < 1e-12);
        assert!((k.c_k[(0, 0)] + xs * z).abs() < 1e-12);
    }

    #[test]
    fn no_control_authority_gives_zero_output() {
        let sys = DescriptorSystem::standard(m1(-2.0), m1(0.0), m1(1.0)).unwrap();
        let cs = ConstrainedSystem::from_descriptor(&sys).unwrap();
        let (x, y) = dense_pair(&sys, 5.0);
        let k = central_controller_full(&cs, &x, &y, 5.0).unwrap();
        assert_eq!(k.c_k[(0, 0)], 0.0);
    }

    #[test]
    fn spectral_radius_violation_is_reported() {
        let x = LowRankFactor::new(m1(2.0));
        let y = LowRankFactor::new(m1(2.0));
        let sys = DescriptorSystem::new(m1(1.0), m1(1.0), m1(1.0), m1(1.0)).unwrap();
        let cs = ConstrainedSystem::from_descriptor(&sys).unwrap();
        assert!(matches!(
            central_controller_full(&cs, &x, &y, 3.0),
            Err(Error::SpectralRadiusViolation { .. })
        ));
    }

    #[test]
    fn full_controller_meets_margin() {
        for seed in 0..3 {
            let sys = random_plant(seed, 8);
            let (x, y) = dense_pair(&sys, 1e3);
            let rho = crate::margin::spectral_radius(&x, &y, &sys.e);
            let gamma = 2.0 * rho.sqrt() + 2.0;
            let (x, y) = dense_pair(&sys, gamma);
            let cs = ConstrainedSystem::from_descriptor(&sys).unwrap();
            let k = central_controller_full(&cs, &x, &y, gamma).unwrap();
            let plant = build_normalized_plant(&sys.e, &sys.a, &sys.b, &sys.c).unwrap();
            let cl = lft_closed_loop(&plant, &k.system().unwrap()).unwrap();
            assert!(is_stable(&cl).unwrap().stable);
            assert!(hinf_norm(&cl, 1e-6).unwrap() < gamma);
        }
    }

    #[test]
    fn full_order_reduction_reproduces_controller() {
        let sys = random_plant(11, 6);
        let gamma = 20.0;
        let (x, y) = dense_pair(&sys, gamma);
        let cs = ConstrainedSystem::from_descriptor(&sys).unwrap();
        let rom = reduce(&cs, &x, &y, gamma, Cut::Order(6)).unwrap();
        let (yh, xh) = reduced_riccati_lift(&rom.w, &rom.t, &cs.e, &y, &x);
        for (k, s) in rom.sigma.iter().enumerate() {
            assert!((yh[(k, k)] - s).abs() < 1e-8);
            assert!((xh[(k, k)] - s).abs() < 1e-8);
        }
        assert!((&yh - yh.transpose()).norm() < 1e-12);
        let kr = central_controller_reduced(&rom, &yh, &xh, gamma).unwrap();
        let kf = central_controller_full(&cs, &x, &y, gamma).unwrap();
        for &w in &[0.1, 1.0, 10.0] {
            let s = C64::new(0.0, w);
            let a = eval_transfer(&kr.system().unwrap(), s).unwrap().value;
            let b = eval_transfer(&kf.system().unwrap(), s).unwrap().value;
            assert!((a - &b).norm() < 1e-6 * b.norm().max(1.0));
        }
    }

    #[test]
    fn zero_lift_copies_model() {
        let sys = random_plant(5, 4);
        let (x, y) = dense_pair(&sys, 10.0);
        let cs = ConstrainedSystem::from_descriptor(&sys).unwrap();
        let rom = reduce(&cs, &x, &y, 10.0, Cut::Order(2)).unwrap();
        let zero = LowRankFactor::zeros(4);
        let (yh, xh) = reduced_riccati_lift(&rom.w, &rom.t, &cs.e, &zero, &zero);
        assert_eq!(yh, DMatrix::zeros(2, 2));
        let k = central_controller_reduced(&rom, &yh, &xh, 10.0).unwrap();
        assert_eq!(k.a_k, rom.a);
        assert_eq!(k.c_k, DMatrix::zeros(2, 2));
    }

    #[test]
    fn predicate_reference_values() {
        assert!(robustness_predicate(0.0029, 313.0176));
        assert!(!robustness_predicate(0.0034, 313.0176));
        assert!(robustness_predicate(0.0775, 12.5418));
        assert!(!robustness_predicate(0.0807, 12.5418));
    }
}

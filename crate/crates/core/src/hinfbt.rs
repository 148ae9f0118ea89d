//! H-infinity balanced truncation by the square root method on the Riccati
//! factors, the truncation error bound and the stabilization certificates.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::coprime::{coprime_realization, scaled_coprime_distance};
use crate::error::{dim_err, Error, Result};
use crate::flowdae::ConstrainedSystem;
use crate::lti::{build_normalized_plant, hinf_norm, lft_closed_loop, DescriptorSystem};
use crate::riccati::{beta_sq, solve_care_dense, LowRankFactor, RiccatiKind, RiccatiProblem};

/// Reduced model with `E_r = I`.
#[derive(Debug, Clone)]
pub struct ReducedModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub t: DMatrix<f64>,
    /// All computed characteristic values, nonincreasing.
    pub sigma: Vec<f64>,
    pub r: usize,
    pub gamma: f64,
}

impl ReducedModel {
    pub fn system(&self) -> DescriptorSystem {
        DescriptorSystem {
            e: DMatrix::identity(self.r, self.r),
            a: self.a.clone(),
            b: self.b.clone(),
            c: self.c.clone(),
            d: DMatrix::zeros(self.c.nrows(), self.b.ncols()),
            e_invertible: true,
        }
    }

    /// Discarded characteristic values.
    pub fn tail(&self) -> &[f64] {
        &self.sigma[self.r..]
    }
}

/// Truncation rule: fixed order or keep every `sigma_k >= tol`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cut {
    Order(usize),
    Tol(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub eps: f64,
    pub eps_hat: Option<f64>,
    pub beta: f64,
    pub gamma: f64,
    pub apriori_ok: bool,
    pub aposteriori_ok: Option<bool>,
    /// Performance bound; absent when the a-priori condition fails.
    #[serde(rename = "gamma_GK")]
    pub gamma_gk: Option<f64>,
    pub gamma_hat: Option<f64>,
    pub r: usize,
}

impl Certificate {
    /// A-priori part from the discarded characteristic values.
    pub fn apriori(tail: &[f64], gamma: f64, r: usize) -> Self {
        let eps = error_bound(tail, gamma);
        Self {
            eps,
            eps_hat: None,
            beta: beta_sq(gamma).sqrt(),
            gamma,
            apriori_ok: apriori_stab_check(eps, gamma),
            aposteriori_ok: None,
            gamma_gk: performance_bound(eps, gamma).ok(),
            gamma_hat: None,
            r,
        }
    }
}

/// Singular values of `L^T E R`, nonincreasing.
pub fn characteristic_values(l: &LowRankFactor, r: &LowRankFactor, e: &DMatrix<f64>) -> Vec<f64> {
    if l.rank() == 0 || r.rank() == 0 {
        return vec![0.0; l.rank().min(r.rank())];
    }
    let core = l.z.transpose() * e * &r.z;
    let mut s: Vec<f64> = core
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Order selected by `cut`, refusing to split a cluster of equal values.
pub fn truncation_order(sigma: &[f64], cut: Cut) -> Result<usize> {
    let r = match cut {
        Cut::Order(r) => {
            if r > sigma.len() {
                return Err(Error::InvalidArgument(format!(
                    "order {r} exceeds the {} available values",
                    sigma.len()
                )));
            }
            r
        }
        Cut::Tol(tol) => {
            if !(tol > 0.0) {
                return Err(Error::InvalidArgument("tol must be positive".into()));
            }
            sigma.iter().take_while(|&&s| s >= tol).count()
        }
    };
    if r == 0 {
        return Err(Error::EmptyModel);
    }
    if r < sigma.len() && sigma[r - 1] - sigma[r] < 1e-12 * sigma[0] {
        return Err(Error::TieAtCut(r));
    }
    Ok(r)
}

/// Square root balanced truncation: `W = L U1 S1^{-1/2}`, `T = R V1 S1^{-1/2}`,
/// `A_r = W^T A T`, `B_r = W^T B`, `C_r = C T`. `L` factors the regulator and
/// `R` the filter solution. Both factors already live in `ker J`, so plain
/// products with `A` equal the projected ones.
pub fn reduce(
    sys: &ConstrainedSystem,
    l: &LowRankFactor,
    rf: &LowRankFactor,
    gamma: f64,
    cut: Cut,
) -> Result<ReducedModel> {
    let n = sys.n_v();
    if l.z.nrows() != n || rf.z.nrows() != n {
        return Err(dim_err("factors do not match the system order"));
    }
    if l.rank() == 0 || rf.rank() == 0 {
        return Err(Error::EmptyModel);
    }
    let core = l.z.transpose() * &sys.e * &rf.z;
    let svd = core.svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sigma: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let r = truncation_order(&sigma, cut)?;
    if sigma[r - 1] <= 0.0 {
        return Err(Error::EmptyModel);
    }
    let mut w = DMatrix::zeros(n, r);
    let mut t = DMatrix::zeros(n, r);
    for (k, &i) in order.iter().take(r).enumerate() {
        let s = sigma[k].sqrt();
        w.set_column(k, &(&l.z * u.column(i) / s));
        t.set_column(k, &(&rf.z * vt.row(i).transpose() / s));
    }
    Ok(ReducedModel {
        a: w.transpose() * &sys.a * &t,
        b: w.transpose() * &sys.b,
        c: &sys.c * &t,
        w,
        t,
        sigma,
        r,
        gamma,
    })
}

/// `eps = 2 sum sigma_k / sqrt(1 + beta^2 sigma_k^2)` over the discarded
/// values.
pub fn error_bound(tail: &[f64], gamma: f64) -> f64 {
    let b2 = beta_sq(gamma);
    2.0 * tail
        .iter()
        .fold(0.0, |acc, &s| acc + s / (1.0 + b2 * s * s).sqrt())
}

/// `eps (beta + gamma) < 1`.
pub fn apriori_stab_check(eps: f64, gamma: f64) -> bool {
    eps * (beta_sq(gamma).sqrt() + gamma) < 1.0
}

/// `gamma + eps (1 + gamma)(1 + beta + gamma) / (1 - eps (beta + gamma))`.
pub fn performance_bound(eps: f64, gamma: f64) -> Result<f64> {
    let beta = beta_sq(gamma).sqrt();
    let q = eps * (beta + gamma);
    if q >= 1.0 {
        return Err(Error::BoundVacuous(q));
    }
    Ok(gamma + eps * (1.0 + gamma) * (1.0 + beta + gamma) / (1.0 - q))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aposteriori {
    pub ok: bool,
    pub eps_hat: f64,
    pub gamma_hat: f64,
}

/// Measured counterpart of the a-priori test: `eps_hat` from the scaled
/// coprime error between the plant and the reduced model (both factorized at
/// the margin of the reduction) and `gamma_hat = ||F(G_r, K_r)||_inf`.
pub fn aposteriori_stab_check(
    g: &ConstrainedSystem,
    y: &LowRankFactor,
    rom: &ReducedModel,
    controller: &DescriptorSystem,
    tol: f64,
) -> Result<Aposteriori> {
    let gamma = rom.gamma;
    let beta = beta_sq(gamma).sqrt();
    let full = coprime_realization(g, y, gamma)?;
    let rsys = rom.system();
    let y_r = solve_care_dense(&RiccatiProblem::descriptor(
        RiccatiKind::Filter,
        &rsys,
        gamma,
    )?)?
    .low_rank();
    let red = coprime_realization(&ConstrainedSystem::from_descriptor(&rsys)?, &y_r, gamma)?;
    let eps_hat = scaled_coprime_distance(&full, &red, tol)? / beta;
    let plant = build_normalized_plant(&rsys.e, &rsys.a, &rsys.b, &rsys.c)?;
    let gamma_hat = hinf_norm(&lft_closed_loop(&plant, controller)?, tol)?;
    Ok(Aposteriori {
        ok: eps_hat * (beta + gamma_hat) < 1.0,
        eps_hat,
        gamma_hat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::C64;
    use crate::lti::eval_transfer;
    use proptest::prelude::*;

    fn scalar_factor(v: f64) -> LowRankFactor {
        LowRankFactor::new(DMatrix::from_element(1, 1, v.sqrt()))
    }

    #[test]
    fn scalar_characteristic_value() {
        let x = 2f64.sqrt() - 1.0;
        let e = DMatrix::from_element(1, 1, 1.0);
        let s = characteristic_values(&scalar_factor(x), &scalar_factor(x), &e);
        assert!((s[0] - 0.4142135623730951).abs() < 1e-12);
    }

    #[test]
    fn zero_factor_gives_zero_values() {
        let e = DMatrix::identity(3, 3);
        let l = LowRankFactor::new(DMatrix::zeros(3, 2));
        let r = LowRankFactor::new(DMatrix::from_element(3, 2, 1.0));
        assert!(characteristic_values(&l, &r, &e).iter().all(|&s| s == 0.0));
    }

    #[test]
    fn scalar_reduction_is_exact() {
        let m = |x| DMatrix::from_element(1, 1, x);
        let sys = DescriptorSystem::new(m(1.0), m(-1.0), m(1.0), m(1.0)).unwrap();
        let cs = ConstrainedSystem::from_descriptor(&sys).unwrap();
        let gamma = 4.0;
        let x = solve_care_dense(
            &RiccatiProblem::descriptor(RiccatiKind::Regulator, &sys, gamma).unwrap(),
        )
        .unwrap()
        .low_rank();
        let y = solve_care_dense(
            &RiccatiProblem::descriptor(RiccatiKind::Filter, &sys, gamma).unwrap(),
        )
        .unwrap()
        .low_rank();
        let rom = reduce(&cs, &x, &y, gamma, Cut::Order(1)).unwrap();
        assert!((rom.a[(0, 0)] + 1.0).abs() < 1e-12);
        assert!(((rom.w.transpose() * &cs.e * &rom.t)[(0, 0)] - 1.0).abs() < 1e-12);
        let s = C64::new(0.0, 1.0);
        let g = eval_transfer(&sys, s).unwrap().value[(0, 0)];
        let gr = eval_transfer(&rom.system(), s).unwrap().value[(0, 0)];
        assert!((g - gr).norm() < 1e-12);
    }

    #[test]
    fn tie_at_cut_is_refused() {
        assert!(matches!(
            truncation_order(&[1.0, 0.5, 0.5, 0.1], Cut::Order(2)),
            Err(Error::TieAtCut(2))
        ));
        assert_eq!(
            truncation_order(&[1.0, 0.5, 0.5, 0.1], Cut::Order(3)).unwrap(),
            3
        );
        assert!(matches!(
            truncation_order(&[1.0, 0.5], Cut::Tol(2.0)),
            Err(Error::EmptyModel)
        ));
        assert_eq!(
            truncation_order(&[1.0, 0.5, 1e-5], Cut::Tol(1e-4)).unwrap(),
            2
        );
    }

    #[test]
    fn error_bound_examples() {
        assert_eq!(error_bound(&[], 3.0), 0.0);
        assert!((error_bound(&[1.0], 1e12) - 2f64.sqrt()).abs() < 1e-9);
        let gamma = 2.0 / 3f64.sqrt();
        assert!((error_bound(&[2.0], gamma) - 4.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn apriori_examples() {
        assert!(apriori_stab_check(0.0, 5.0));
        assert!(!apriori_stab_check(1.0, 2.0));
        let gamma = 313.0176;
        let thr = 1.0 / (beta_sq(gamma).sqrt() + gamma);
        assert!((thr - 3.1845e-3).abs() < 1e-7);
        assert!(apriori_stab_check(thr * 0.999, gamma));
        assert!(!apriori_stab_check(thr * 1.001, gamma));
    }

    #[test]
    fn performance_bound_examples() {
        assert_eq!(performance_bound(0.0, 3.0).unwrap(), 3.0);
        let beta = 3f64.sqrt() / 2.0;
        let expect = 2.0 + 0.1 * 3.0 * (3.0 + beta) / (1.0 - 0.1 * (2.0 + beta));
        let v = performance_bound(0.1, 2.0).unwrap();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 3.6257).abs() < 1e-4);
        assert!(matches!(
            performance_bound(1.0, 2.0),
            Err(Error::BoundVacuous(_))
        ));
        // diverges towards the edge of the admissible range
        let edge = 1.0 / (beta + 2.0);
        let ramp: Vec<f64> = [0.9, 0.99, 0.999, 0.9999, 0.99999]
            .iter()
            .map(|f| performance_bound(edge * f, 2.0).unwrap())
            .collect();
        assert!(ramp.windows(2).all(|w| w[1] > w[0]));
        assert!(ramp[4] > 1e5);
    }

    proptest! {
        #[test]
        fn performance_bound_monotone(eps in 0.0f64..0.05, gamma in 1.01f64..10.0) {
            let q = eps * (beta_sq(gamma).sqrt() + gamma);
            prop_assume!(q < 0.9);
            let base = performance_bound(eps, gamma).unwrap();
            prop_assert!(performance_bound(eps + 1e-6, gamma).unwrap() > base);
            let bigger = gamma * 1.001;
            if eps * (beta_sq(bigger).sqrt() + bigger) < 1.0 {
                prop_assert!(performance_bound(eps, bigger).unwrap() > base);
            }
        }

        #[test]
        fn tol_order_monotone(mut s in proptest::collection::vec(1e-8f64..1.0, 1..20),
                              t1 in 1e-8f64..1.0, t2 in 1e-8f64..1.0) {
            s.sort_by(|a, b| b.total_cmp(a));
            s.dedup();
            let count = |t: f64| match truncation_order(&s, Cut::Tol(t)) {
                Ok(r) => r,
                Err(Error::EmptyModel) => 0,
                Err(e) => panic!("{e}"),
            };
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(count(lo) >= count(hi));
        }
    }
}

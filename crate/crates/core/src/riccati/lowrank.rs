//! Low-rank Newton-Kleinman iteration with LR-ADI inner solves for the
//! projected equations. All shifted solves with `Pi A Pi^T + p E` go through
//! saddle-point systems; the projector is never formed.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    factored_residual, IterationRecord, LowRankFactor, RiccatiKind, RiccatiProblem,
    RiccatiSolution, RiccatiSystem, SolutionFactor,
};
use crate::error::{Error, Result};
use crate::flowdae::{ConstrainedSystem, Leray, Saddle};
use crate::linalg::{
    care, compress_columns, hstack, imag_part, orth, real_complex_schur, real_part, reorder_schur,
    symmetrize, to_complex, C64,
};

/// Relative tolerance on the Gram matrix `Z Z^T` used when dropping columns.
pub(crate) const COLUMN_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LrOptions {
    /// Newton steps.
    pub max_iter: usize,
    /// Number of ADI shifts chosen per Newton step.
    pub shift_count: usize,
    /// Target relative Riccati residual.
    pub tol: f64,
    /// Relative Lyapunov residual at which the inner ADI loop stops.
    pub adi_tol: f64,
    pub max_adi: usize,
    /// Arnoldi steps for each of the two Ritz-value samples.
    pub arnoldi_steps: usize,
    /// Maximum rank of the factor; defaults to `n_v / 2`, or `n_v` below
    /// 16 states where a full-rank factor is no sign of trouble.
    pub max_rank: Option<usize>,
}

impl Default for LrOptions {
    fn default() -> Self {
        Self {
            max_iter: 40,
            shift_count: 12,
            tol: 1e-8,
            adi_tol: 1e-12,
            max_adi: 800,
            arnoldi_steps: 24,
            max_rank: None,
        }
    }
}

/// Filter-form data `(E, A, J, B, C)` with cached complex copies and the
/// mass-matrix saddle factorization.
struct Ctx {
    e: DMatrix<f64>,
    a: DMatrix<f64>,
    j: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    ec: DMatrix<C64>,
    ac: DMatrix<C64>,
    leray: Leray,
    /// `Pi B`.
    g0: DMatrix<f64>,
}

impl Ctx {
    fn new(fs: &ConstrainedSystem) -> Result<Self> {
        let leray = Leray::new(fs)?;
        let g0 = leray.apply(&fs.b)?;
        Ok(Self {
            ec: to_complex(&fs.e),
            ac: to_complex(&fs.a),
            e: fs.e.clone(),
            a: fs.a.clone(),
            j: fs.j.clone(),
            b: fs.b.clone(),
            c: fs.c.clone(),
            leray,
            g0,
        })
    }

    fn n(&self) -> usize {
        self.e.nrows()
    }

    fn kernel_dim(&self) -> usize {
        self.e.nrows() - self.j.nrows()
    }

    /// Solves `(A - K C + pE) V = W` on `ker J` by a saddle solve with the
    /// closed-loop matrix. Factoring `A + pE` alone and correcting for `K C`
    /// fails when a shift meets an open-loop eigenvalue.
    fn shifted_solve(&self, p: C64, kmat: &DMatrix<f64>, w: &DMatrix<C64>) -> Result<DMatrix<C64>> {
        let mut k = &self.ac + &self.ec * p;
        if kmat.ncols() > 0 {
            k -= to_complex(&(kmat * &self.c));
        }
        let saddle = Saddle::new(&k, &self.j).map_err(|e| match e {
            Error::SaddleSingular(_) => Error::SaddleSingular(format!("{p}")),
            other => other,
        })?;
        saddle.solve_top(w)
    }

    fn apply_closed(&self, kmat: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
        let mut out = &self.a * v;
        if kmat.ncols() > 0 {
            out -= kmat * (&self.c * v);
        }
        out
    }
}

fn col(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

/// Arnoldi with repeated Gram-Schmidt. Returns the basis and the square
/// Hessenberg matrix, truncated at breakdown.
///
/// Every new vector is mapped back into `ker J` with `Pi^T` before the final
/// orthogonalization pass; without this, roundoff in late Krylov vectors
/// drifts out of the constraint space.
fn arnoldi<F>(
    leray: &Leray,
    mut op: F,
    v0: &DVector<f64>,
    k: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let n = v0.len();
    let mut v = DMatrix::zeros(n, k + 1);
    let mut h = DMatrix::zeros(k + 1, k);
    v.set_column(0, &(v0 / v0.norm()));
    let mut steps = k;
    for jj in 0..k {
        let mut w = op(&v.column(jj).clone_owned())?;
        let scale = w.norm();
        for pass in 0..3 {
            if pass == 2 {
                w = leray.apply_t(&col(&w))?.column(0).clone_owned();
            }
            for i in 0..=jj {
                let hij = v.column(i).dot(&w);
                h[(i, jj)] += hij;
                w.axpy(-hij, &v.column(i), 1.0);
            }
        }
        let hn = w.norm();
        if hn <= 1e-12 * scale.max(f64::MIN_POSITIVE) || !hn.is_finite() {
            steps = jj + 1;
            break;
        }
        h[(jj + 1, jj)] = hn;
        v.set_column(jj + 1, &(w / hn));
    }
    Ok((
        v.columns(0, steps).clone_owned(),
        h.view((0, 0), (steps, steps)).clone_owned(),
    ))
}

fn start_vector(ctx: &Ctx) -> Result<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xad1);
    let r = DMatrix::from_fn(ctx.n(), 1, |_, _| StandardNormal.sample(&mut rng));
    let v = ctx.leray.apply_t(&r)?;
    Ok(v.column(0).clone_owned())
}

fn ritz_values(h: &DMatrix<f64>) -> Result<Vec<C64>> {
    if h.nrows() == 0 {
        return Ok(Vec::new());
    }
    let (_, t) = real_complex_schur(h)?;
    Ok((0..t.nrows()).map(|i| t[(i, i)]).collect())
}

/// Heuristic Penzl shifts from Ritz values of `E^{-1} A_k` and its inverse on
/// `ker J`. Conjugate pairs are represented by their member with positive
/// imaginary part.
fn penzl_shifts(ctx: &Ctx, kmat: &DMatrix<f64>, opts: &LrOptions) -> Result<Vec<C64>> {
    let v0 = start_vector(ctx)?;
    let kp = opts.arnoldi_steps.min(ctx.kernel_dim()).max(1);
    let (_, hp) = arnoldi(
        &ctx.leray,
        |v| {
            let w = ctx.apply_closed(kmat, v);
            Ok(ctx.leray.solve_mass(&col(&w))?.column(0).clone_owned())
        },
        &v0,
        kp,
    )?;
    let mut cand = ritz_values(&hp)?;
    let inverse = arnoldi(
        &ctx.leray,
        |v| {
            let w = to_complex(&col(&(&ctx.e * v)));
            let x = ctx.shifted_solve(C64::new(0.0, 0.0), kmat, &w)?;
            Ok(real_part(&x).column(0).clone_owned())
        },
        &v0,
        kp,
    );
    if let Ok((_, hm)) = inverse {
        for z in ritz_values(&hm)? {
            if z.norm() > 0.0 {
                cand.push(C64::new(1.0, 0.0) / z);
            }
        }
    }
    let mut stable: Vec<C64> = cand
        .iter()
        .filter(|z| z.re < 0.0 && z.is_finite())
        .map(|z| if z.im < 0.0 { z.conj() } else { *z })
        .collect();
    if stable.is_empty() {
        stable = cand
            .iter()
            .filter(|z| z.norm() > 0.0 && z.is_finite())
            .map(|z| C64::new(-z.norm(), 0.0))
            .collect();
    }
    if stable.is_empty() {
        stable.push(C64::new(-1.0, 0.0));
    }
    // treat nearly real candidates as real
    for z in stable.iter_mut() {
        if z.im.abs() <= 1e-10 * z.norm() {
            z.im = 0.0;
        }
    }
    Ok(select_penzl(&stable, opts.shift_count.max(1)))
}

/// `|r_S(x)|` for the ADI rational function with shift set `S`.
fn rational(shifts: &[C64], x: C64) -> f64 {
    let mut r = 1.0;
    for &p in shifts {
        r *= ((x - p.conj()) / (x + p)).norm();
        if p.im != 0.0 {
            let q = p.conj();
            r *= ((x - q.conj()) / (x + q)).norm();
        }
    }
    r
}

fn select_penzl(cand: &[C64], count: usize) -> Vec<C64> {
    // full candidate set including conjugates
    let mut all = Vec::new();
    for &z in cand {
        all.push(z);
        if z.im != 0.0 {
            all.push(z.conj());
        }
    }
    let mut best = cand[0];
    let mut best_val = f64::INFINITY;
    for &p in cand {
        let v = all
            .iter()
            .map(|&x| rational(&[p], x))
            .fold(0.0f64, f64::max);
        if v < best_val {
            best_val = v;
            best = p;
        }
    }
    let mut shifts = vec![best];
    let width = |s: &[C64]| {
        s.iter()
            .map(|p| if p.im != 0.0 { 2 } else { 1 })
            .sum::<usize>()
    };
    while width(&shifts) < count {
        let (x, val) =
            cand.iter()
                .map(|&x| (x, rational(&shifts, x)))
                .fold(
                    (cand[0], -1.0),
                    |acc, it| if it.1 > acc.1 { it } else { acc },
                );
        if val <= 0.0 || shifts.iter().any(|&p| (p - x).norm() <= 1e-14 * x.norm()) {
            break;
        }
        shifts.push(x);
    }
    shifts
}

fn compress(z: &DMatrix<f64>) -> DMatrix<f64> {
    compress_columns(z, COLUMN_TOL.sqrt())
}

/// LR-ADI for `A_k Y E + E Y A_k^T + G G^T = 0` on `ker J`, `A_k = A - K C`.
fn lr_adi(
    ctx: &Ctx,
    kmat: &DMatrix<f64>,
    g: &DMatrix<f64>,
    shifts: &[C64],
    opts: &LrOptions,
    newton_iter: usize,
    log: &mut Vec<IterationRecord>,
    used: &mut Vec<C64>,
) -> Result<DMatrix<f64>> {
    let n = ctx.n();
    let g_norm = (g.transpose() * g).norm();
    if g_norm == 0.0 {
        return Ok(DMatrix::zeros(n, 0));
    }
    let mut w = g.clone();
    let mut z = DMatrix::zeros(n, 0);
    let mut res = 1.0;
    for step in 0..opts.max_adi {
        let p = shifts[step % shifts.len()];
        let v = ctx.shifted_solve(p, kmat, &to_complex(&w))?;
        if p.im == 0.0 {
            let v = real_part(&v);
            let s = (-2.0 * p.re).sqrt();
            z = hstack(&[&z, &(&v * s)]);
            w -= &ctx.e * &v * (2.0 * p.re);
        } else {
            // real formulation of the pair (p, conj p)
            let gam = (-2.0 * p.re).sqrt();
            let delta = p.re / p.im;
            let vr = real_part(&v);
            let vi = imag_part(&v);
            let v1 = &vr + &vi * delta;
            let s2 = 2f64.sqrt() * gam;
            z = hstack(&[
                &z,
                &(&v1 * s2),
                &(&vi * (s2 * (delta * delta + 1.0).sqrt())),
            ]);
            w -= &ctx.e * &v1 * (4.0 * p.re);
        }
        used.push(p);
        // components of W along range(J^T) are invisible to the saddle
        // solves, so the residual is measured after projection
        let pw = ctx.leray.apply(&w)?;
        res = (pw.transpose() * &pw).norm() / g_norm;
        log.push(IterationRecord {
            iter: newton_iter,
            adi: Some(step),
            residual: res,
            rank: z.ncols(),
            shift: Some([p.re, p.im]),
        });
        if !res.is_finite() {
            break;
        }
        if res < opts.adi_tol {
            return Ok(compress(&z));
        }
        if z.ncols() > 2 * n {
            z = compress(&z);
        }
    }
    Err(Error::NoConvergence {
        iterations: opts.max_adi,
        residual: res,
    })
}

/// Stabilizing initial factor from the unstable invariant subspace of
/// `E^{-1} A` on `ker J`, or `None` when that operator is already stable.
fn bernoulli_init(ctx: &Ctx, beta_sq: f64) -> Result<Option<DMatrix<f64>>> {
    let v0 = start_vector(ctx)?;
    let d = ctx.kernel_dim();
    let (v, h) = arnoldi(
        &ctx.leray,
        |x| {
            let w = &ctx.a * x;
            Ok(ctx.leray.solve_mass(&col(&w))?.column(0).clone_owned())
        },
        &v0,
        d,
    )?;
    let (mut q, mut t) = real_complex_schur(&h)?;
    let nu = reorder_schur(&mut q, &mut t, |z| z.re >= 0.0);
    if nu == 0 {
        return Ok(None);
    }
    let qu = q.columns(0, nu).clone_owned();
    let r = to_complex(&v) * qu;
    let basis = orth(&hstack(&[&real_part(&r), &imag_part(&r)]), 1e-8);
    if basis.ncols() != nu {
        return Err(Error::NoStabilizingSolution(
            "unstable invariant subspace is not conjugation closed".into(),
        ));
    }
    let er = basis.transpose() * &ctx.e * &basis;
    let au = er
        .lu()
        .solve(&(basis.transpose() * &ctx.a * &basis))
        .ok_or_else(|| Error::NoStabilizingSolution("singular projected mass".into()))?;
    let cr = &ctx.c * &basis;
    let g = cr.transpose() * &cr * beta_sq;
    let yu = care(&au.transpose(), &g, &DMatrix::zeros(nu, nu))?;
    let fu = LowRankFactor::from_psd(&symmetrize(&yu));
    Ok(Some(&basis * fu.z))
}

/// Newton steps without a new best residual before giving up.
const NEWTON_PATIENCE: usize = 5;

fn default_rank_limit(n: usize) -> usize {
    if n < 16 {
        n
    } else {
        n / 2
    }
}

fn newton(
    ctx: &Ctx,
    beta_sq: f64,
    z_init: DMatrix<f64>,
    opts: &LrOptions,
) -> Result<RiccatiSolution> {
    let beta = beta_sq.sqrt();
    let max_rank = opts.max_rank.unwrap_or_else(|| default_rank_limit(ctx.n()));
    let mut z = z_init;
    let mut log = Vec::new();
    let mut used = Vec::new();
    let mut res = f64::INFINITY;
    let (mut best, mut best_it) = (f64::INFINITY, 0);
    for it in 1..=opts.max_iter {
        let ez = &ctx.e * &z;
        let czt = (&ctx.c * &z).transpose();
        let k_half = &ez * &czt;
        let kmat = &k_half * beta_sq;
        let g = hstack(&[&ctx.g0, &(&k_half * beta)]);
        let shifts = penzl_shifts(ctx, &kmat, opts)?;
        let z_new = lr_adi(ctx, &kmat, &g, &shifts, opts, it, &mut log, &mut used)?;
        res = factored_residual(
            &ctx.e,
            &ctx.a,
            &ctx.b,
            &ctx.c,
            beta_sq,
            &z_new,
            Some(&ctx.leray),
        );
        z = z_new;
        log.push(IterationRecord {
            iter: it,
            adi: None,
            residual: res,
            rank: z.ncols(),
            shift: None,
        });
        if z.ncols() > max_rank {
            return Err(Error::RankRunaway {
                rank: z.ncols(),
                limit: max_rank,
            });
        }
        if res < opts.tol {
            return Ok(RiccatiSolution {
                factor: SolutionFactor::LowRank(LowRankFactor::new(z)),
                residual_rel: res,
                iterations: it,
                shifts_used: used,
                log,
            });
        }
        // Newton-Kleinman residuals need not decrease monotonically, so
        // only a long run without a new best counts as stagnation
        if res < 0.999 * best {
            (best, best_it) = (res, it);
        }
        if !res.is_finite() || it >= best_it + NEWTON_PATIENCE {
            break;
        }
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
        residual: res,
    })
}

fn filter_system(prob: &RiccatiProblem) -> Result<ConstrainedSystem> {
    let cs = match prob.system {
        RiccatiSystem::Constrained(cs) => cs.clone(),
        RiccatiSystem::Descriptor(sys) => ConstrainedSystem::from_descriptor(sys)?,
    };
    Ok(match prob.kind {
        RiccatiKind::Filter => cs,
        RiccatiKind::Regulator => cs.transposed(),
    })
}

/// Solution of the LQG equation (`beta^2 = 1`) used to start the iteration
/// for other margins; `None` when zero is already stabilizing.
pub fn lqg_initial_factor(
    system: RiccatiSystem,
    kind: RiccatiKind,
    opts: &LrOptions,
) -> Result<Option<LowRankFactor>> {
    let prob = RiccatiProblem::new(kind, system, 1.0)?;
    let fs = filter_system(&prob)?;
    let ctx = Ctx::new(&fs)?;
    match bernoulli_init(&ctx, 1.0)? {
        None => Ok(None),
        Some(z0) => {
            let sol = newton(&ctx, 1.0, z0, opts)?;
            Ok(Some(sol.low_rank()))
        }
    }
}

/// Projected low-rank solve, started from the LQG solution `lqg` (scaled by
/// `1 / beta`, which keeps the closed loop unchanged) or from zero.
pub fn solve_projected_lr_from(
    prob: &RiccatiProblem,
    opts: &LrOptions,
    lqg: Option<&LowRankFactor>,
) -> Result<RiccatiSolution> {
    let fs = filter_system(prob)?;
    let ctx = Ctx::new(&fs)?;
    let z0 = match lqg {
        Some(f) => &f.z / prob.beta_sq.sqrt(),
        None => DMatrix::zeros(ctx.n(), 0),
    };
    newton(&ctx, prob.beta_sq, z0, opts)
}

/// Projected low-rank solve from scratch.
pub fn solve_projected_lr(prob: &RiccatiProblem, opts: &LrOptions) -> Result<RiccatiSolution> {
    let lqg = lqg_initial_factor(prob.system, prob.kind, opts)?;
    solve_projected_lr_from(prob, opts, lqg.as_ref())
}

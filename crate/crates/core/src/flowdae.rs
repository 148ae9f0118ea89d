//! Constrained descriptor systems `E v' = A v + J^T q + B u`, `J v = 0`: the
//! discrete Leray projector, shifted saddle-point solves, seeded benchmark
//! generators and a nonlinear toy flow plant with its linearization families.

use nalgebra::{ComplexField, DMatrix, DVector, Dyn, SymmetricEigen, LU};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::{kernel_basis, pencil_eigenvalues, to_complex, C64};
use crate::lti::DescriptorSystem;

/// Linearized constrained system with SPD mass matrix `E` and full-row-rank
/// constraint `J`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedSystem {
    pub e: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub j: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

/// Descriptor system in orthonormal `ker J` coordinates, `v = theta * x`.
#[derive(Debug, Clone)]
pub struct Compressed {
    pub theta: DMatrix<f64>,
    pub sys: DescriptorSystem,
}

impl ConstrainedSystem {
    pub fn new(
        e: DMatrix<f64>,
        a: DMatrix<f64>,
        j: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
    ) -> Result<Self> {
        let n = e.nrows();
        if e.ncols() != n
            || a.shape() != (n, n)
            || j.ncols() != n
            || b.nrows() != n
            || c.ncols() != n
        {
            return Err(dim_err(format!(
                "E {:?}, A {:?}, J {:?}, B {:?}, C {:?}",
                e.shape(),
                a.shape(),
                j.shape(),
                b.shape(),
                c.shape()
            )));
        }
        if j.nrows() >= n && n > 0 {
            return Err(dim_err("n_p must be smaller than n_v"));
        }
        if (&e - e.transpose()).norm() > 1e-12 * e.norm().max(1.0) {
            return Err(Error::InvalidArgument("E is not symmetric".into()));
        }
        if n > 0 && e.clone().cholesky().is_none() {
            return Err(Error::InvalidArgument("E is not positive definite".into()));
        }
        if !full_row_rank(&j) {
            return Err(Error::RankDeficientJ);
        }
        Ok(Self { e, a, j, b, c })
    }

    pub fn n_v(&self) -> usize {
        self.e.nrows()
    }

    pub fn n_p(&self) -> usize {
        self.j.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    /// Same structure with `A` replaced.
    pub fn with_a(&self, a: DMatrix<f64>) -> Self {
        Self { a, ..self.clone() }
    }

    /// The dual system `(E, A^T, J, C^T, B^T)`.
    pub fn transposed(&self) -> Self {
        Self {
            e: self.e.clone(),
            a: self.a.transpose(),
            j: self.j.clone(),
            b: self.c.transpose(),
            c: self.b.transpose(),
        }
    }

    /// Restriction to an orthonormal basis of `ker J`. The transfer function
    /// is unchanged.
    pub fn compress(&self) -> Compressed {
        let theta = kernel_basis(&self.j);
        let tt = theta.transpose();
        let sys = DescriptorSystem {
            e: &tt * &self.e * &theta,
            a: &tt * &self.a * &theta,
            b: &tt * &self.b,
            c: &self.c * &theta,
            d: DMatrix::zeros(self.outputs(), self.inputs()),
            e_invertible: true,
        };
        Compressed { theta, sys }
    }

    /// Unconstrained systems are the `n_p = 0` case.
    pub fn from_descriptor(sys: &DescriptorSystem) -> Result<Self> {
        Self::new(
            sys.e.clone(),
            sys.a.clone(),
            DMatrix::zeros(0, sys.order()),
            sys.b.clone(),
            sys.c.clone(),
        )
    }
}

fn full_row_rank(j: &DMatrix<f64>) -> bool {
    if j.nrows() == 0 {
        return true;
    }
    let s = j.clone().svd(false, false).singular_values;
    let smax = s.max();
    smax > 0.0 && s.min() > 1e-10 * smax
}

/// LU factorization of a saddle-point matrix `[[K, J^T], [J, 0]]`.
pub struct Saddle<T: ComplexField<RealField = f64>> {
    lu: LU<T, Dyn, Dyn>,
    n_v: usize,
    n_p: usize,
    pub condition: f64,
}

impl<T: ComplexField<RealField = f64> + Copy> Saddle<T> {
    pub fn new(k: &DMatrix<T>, j: &DMatrix<f64>) -> Result<Self> {
        let n_v = k.nrows();
        let n_p = j.nrows();
        let n = n_v + n_p;
        let mut s = DMatrix::<T>::zeros(n, n);
        s.view_mut((0, 0), (n_v, n_v)).copy_from(k);
        for r in 0..n_p {
            for c in 0..n_v {
                let v = T::from_real(j[(r, c)]);
                s[(n_v + r, c)] = v;
                s[(c, n_v + r)] = v;
            }
        }
        let snorm = s.norm();
        let lu = s.lu();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut x = DVector::<T>::from_fn(n, |_, _| T::from_real(rng.random_range(-1.0..1.0)));
        let mut est = 0.0f64;
        for _ in 0..4 {
            let xn = x.norm();
            let y = match lu.solve(&x) {
                Some(y) if y.iter().all(|v| v.is_finite()) => y,
                _ => return Err(Error::SaddleSingular("zero pivot".into())),
            };
            let yn = y.norm();
            est = est.max(yn / xn);
            if yn == 0.0 {
                break;
            }
            x = y.unscale(yn);
        }
        let condition = est * snorm;
        if !condition.is_finite() {
            return Err(Error::SaddleSingular("non-finite solve".into()));
        }
        if condition > 1e14 {
            return Err(Error::IllConditioned(condition));
        }
        Ok(Self {
            lu,
            n_v,
            n_p,
            condition,
        })
    }

    /// Solves with right-hand side `[top; 0]`, returning `(x, multiplier)`.
    pub fn solve(&self, top: &DMatrix<T>) -> Result<(DMatrix<T>, DMatrix<T>)> {
        let k = top.ncols();
        let mut rhs = DMatrix::<T>::zeros(self.n_v + self.n_p, k);
        rhs.view_mut((0, 0), (self.n_v, k)).copy_from(top);
        let x = self
            .lu
            .solve(&rhs)
            .ok_or_else(|| Error::SaddleSingular("zero pivot".into()))?;
        Ok((
            x.view((0, 0), (self.n_v, k)).clone_owned(),
            x.view((self.n_v, 0), (self.n_p, k)).clone_owned(),
        ))
    }

    pub fn solve_top(&self, top: &DMatrix<T>) -> Result<DMatrix<T>> {
        Ok(self.solve(top)?.0)
    }
}

/// Projector-free application of the discrete Leray projector
/// `Pi^T = I - E^{-1} J^T (J E^{-1} J^T)^{-1} J` and of `Pi = E Pi^T E^{-1}`,
/// both via the mass-matrix saddle system.
pub struct Leray {
    e: DMatrix<f64>,
    saddle: Saddle<f64>,
}

impl Leray {
    pub fn new(csys: &ConstrainedSystem) -> Result<Self> {
        Ok(Self {
            e: csys.e.clone(),
            saddle: Saddle::new(&csys.e, &csys.j)?,
        })
    }

    /// `Pi^T w`, which lies in `ker J`.
    pub fn apply_t(&self, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.saddle.solve_top(&(&self.e * w))
    }

    /// `Pi w`.
    pub fn apply(&self, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(&self.e * self.saddle.solve_top(w)?)
    }

    /// `s = Theta Er^{-1} Theta^T w`, the constrained inverse of `E`.
    pub fn solve_mass(&self, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.saddle.solve_top(w)
    }
}

/// Applies `Pi^T` to one vector.
pub fn leray_apply(csys: &ConstrainedSystem, w: &DVector<f64>) -> Result<DVector<f64>> {
    let l = Leray::new(csys)?;
    let m = DMatrix::from_column_slice(w.len(), 1, w.as_slice());
    Ok(l.apply_t(&m)?.column(0).clone_owned())
}

/// Explicit `Pi = I - J^T (J E^{-1} J^T)^{-1} J E^{-1}` for small problems.
pub fn explicit_projector(csys: &ConstrainedSystem) -> DMatrix<f64> {
    let n = csys.n_v();
    if csys.n_p() == 0 {
        return DMatrix::identity(n, n);
    }
    let einv = csys.e.clone().cholesky().expect("E is SPD").inverse();
    let s = &csys.j * &einv * csys.j.transpose();
    let inner = s
        .lu()
        .solve(&(&csys.j * &einv))
        .expect("J E^-1 J^T invertible");
    DMatrix::identity(n, n) - csys.j.transpose() * inner
}

/// Solves `(Pi A Pi^T + p E) Z = Pi E W` on `ker J` through the saddle system
/// `[[A + pE, J^T], [J, 0]] [Z; Z_perp] = [E W; 0]` after projecting `W`.
pub fn saddle_shifted_solve(
    csys: &ConstrainedSystem,
    p: C64,
    w: &DMatrix<f64>,
    transpose: bool,
) -> Result<(DMatrix<C64>, DMatrix<C64>)> {
    if w.nrows() != csys.n_v() {
        return Err(dim_err("right-hand side has wrong row count"));
    }
    let leray = Leray::new(csys)?;
    let wp = leray.apply_t(w)?;
    let a = if transpose {
        csys.a.transpose()
    } else {
        csys.a.clone()
    };
    let k = to_complex(&a) + to_complex(&csys.e) * p;
    let saddle = Saddle::new(&k, &csys.j)?;
    saddle.solve(&to_complex(&(&csys.e * wp)))
}

/// Parameters for [`gen_synthetic_dae`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub n_v: usize,
    pub n_p: usize,
    pub m: usize,
    pub p: usize,
    pub n_unstable: usize,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            n_v: 60,
            n_p: 10,
            m: 2,
            p: 3,
            n_unstable: 2,
            seed: 7,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Sparse random matrix with about `per_row` entries per row.
fn sparse_random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, per_row: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for _ in 0..per_row {
            let j = rng.random_range(0..cols);
            m[(i, j)] += gaussian(rng);
        }
    }
    m
}

/// Sparse SPD matrix with spectral norm one.
fn sparse_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let r = sparse_random(rng, n, n, 2);
    let s = &r * r.transpose() + DMatrix::identity(n, n) * 1e-3;
    let lmax = SymmetricEigen::new(s.clone()).eigenvalues.max();
    s / lmax
}

fn mass_matrix(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let mut e = DMatrix::identity(n, n) + sparse_spd(rng, n) * 0.1;
    e = (&e + e.transpose()) * 0.5;
    e
}

/// Random sparse constraint with a guaranteed nonzero pivot per row.
fn constraint_matrix(rng: &mut ChaCha8Rng, n_p: usize, n_v: usize) -> DMatrix<f64> {
    let mut j = sparse_random(rng, n_p, n_v, 3);
    let stride = n_v / n_p.max(1);
    for i in 0..n_p {
        j[(i, i * stride)] += 2.0 + rng.random_range(0.0..1.0);
    }
    j
}

fn unit_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(rows, cols, |_, _| gaussian(rng));
    for mut c in m.column_iter_mut() {
        let n = c.norm();
        c /= n;
    }
    m
}

/// Unit columns whose entries fade along the index, i.e. towards the
/// strongly damped coordinates of the toy plant.
fn smooth_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(rows, cols, |i, _| {
        let x = 8.0 * i as f64 / rows as f64;
        gaussian(rng) / (1.0 + x * x)
    });
    for mut c in m.column_iter_mut() {
        let n = c.norm();
        c /= n;
    }
    m
}

/// Random index within `TRIAD_BAND` of `i`.
fn near(rng: &mut ChaCha8Rng, i: usize, n: usize) -> usize {
    let lo = i.saturating_sub(TRIAD_BAND);
    let hi = (i + TRIAD_BAND).min(n - 1);
    rng.random_range(lo..=hi)
}

/// Minimal real part distance of a spectrum from the imaginary axis and the
/// number of eigenvalues in the right half-plane.
fn unstable_count(sys: &DescriptorSystem) -> Result<(usize, f64)> {
    let ev = pencil_eigenvalues(&sys.e, &sys.a)?;
    let count = ev.iter().filter(|z| z.re > 0.0).count();
    let gap = ev.iter().map(|z| z.re.abs()).fold(f64::INFINITY, f64::min);
    Ok((count, gap))
}

/// Smallest singular value of `[lambda E - A, B]` over the unstable
/// eigenvalues, and of the dual observability test.
fn pbh_margin(sys: &DescriptorSystem) -> Result<f64> {
    let ev = pencil_eigenvalues(&sys.e, &sys.a)?;
    let mut worst = f64::INFINITY;
    let n = sys.order();
    for z in ev.iter().filter(|z| z.re > 0.0) {
        let pencil = to_complex(&sys.e) * *z - to_complex(&sys.a);
        let mut ctrb = DMatrix::<C64>::zeros(n, n + sys.inputs());
        ctrb.view_mut((0, 0), (n, n)).copy_from(&pencil);
        ctrb.view_mut((0, n), (n, sys.inputs()))
            .copy_from(&to_complex(&sys.b));
        let mut obsv = DMatrix::<C64>::zeros(n + sys.outputs(), n);
        obsv.view_mut((0, 0), (n, n)).copy_from(&pencil);
        obsv.view_mut((n, 0), (sys.outputs(), n))
            .copy_from(&to_complex(&sys.c));
        let s1 = ctrb.svd(false, false).singular_values.min();
        let s2 = obsv.svd(false, false).singular_values.min();
        worst = worst.min(s1).min(s2);
    }
    Ok(worst)
}

/// Seeded synthetic constrained benchmark with `n_unstable` planted unstable
/// modes in `ker J`.
pub fn gen_synthetic_dae(params: &SyntheticParams) -> Result<ConstrainedSystem> {
    let SyntheticParams {
        n_v,
        n_p,
        m,
        p,
        n_unstable,
        seed,
    } = *params;
    if n_unstable > 4 {
        return Err(Error::InvalidArgument("at most 4 unstable modes".into()));
    }
    if 2 * n_p >= n_v {
        return Err(Error::InvalidArgument("n_p must be below n_v / 2".into()));
    }
    if m == 0 || p == 0 {
        return Err(Error::InvalidArgument(
            "need at least one input and output".into(),
        ));
    }
    let mut last = Error::RankDeficientJ;
    for offset in 0..16u64 {
        match try_synthetic(
            n_v,
            n_p,
            m,
            p,
            n_unstable,
            seed.wrapping_add(offset * 0x9e37_79b9),
        ) {
            Ok(sys) => return Ok(sys),
            Err(e) => last = e,
        }
    }
    Err(last)
}

fn try_synthetic(
    n_v: usize,
    n_p: usize,
    m: usize,
    p: usize,
    n_unstable: usize,
    seed: u64,
) -> Result<ConstrainedSystem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = mass_matrix(&mut rng, n_v);
    let j = constraint_matrix(&mut rng, n_p, n_v);
    if !full_row_rank(&j) {
        return Err(Error::RankDeficientJ);
    }
    let diag = DMatrix::from_diagonal(&DVector::from_fn(n_v, |_, _| {
        rng.random_range(SYNTHETIC_DAMPING.0..SYNTHETIC_DAMPING.1)
    }));
    let k = sparse_spd(&mut rng, n_v);
    let sk = sparse_random(&mut rng, n_v, n_v, 2);
    let skew = (&sk - sk.transpose()) * 0.1;
    let mut a = -(diag + k) + skew;
    if n_unstable > 0 {
        // E-orthonormal directions inside ker J
        let theta = kernel_basis(&j);
        let g = DMatrix::from_fn(theta.ncols(), n_unstable, |_, _| gaussian(&mut rng));
        let raw = &theta * g;
        let gram = raw.transpose() * &e * &raw;
        let chol = gram.cholesky().ok_or(Error::RankDeficientJ)?;
        let phi = &raw * chol.l().transpose().try_inverse().unwrap();
        // lift each planted direction above its own damping
        let damping = -(phi.transpose() * &a * &phi).diagonal();
        let lam = DMatrix::from_diagonal(&DVector::from_fn(n_unstable, |i, _| {
            damping[i] + rng.random_range(0.5..1.5)
        }));
        let ephi = &e * &phi;
        a += &ephi * lam * ephi.transpose();
    }
    let b = unit_columns(&mut rng, n_v, m);
    let c = unit_columns(&mut rng, n_v, p).transpose();
    let sys = ConstrainedSystem::new(e, a, j, b, c)?;
    let comp = sys.compress();
    let (count, gap) = unstable_count(&comp.sys)?;
    if count != n_unstable || gap < 0.05 {
        return Err(Error::InvalidArgument(format!(
            "planted {n_unstable} unstable modes, found {count} (axis gap {gap:e})"
        )));
    }
    if n_unstable > 0 && pbh_margin(&comp.sys)? < 1e-6 {
        return Err(Error::InvalidArgument(
            "planted modes not controllable/observable".into(),
        ));
    }
    Ok(sys)
}

/// Bilinear convection analogue `N(v, w)_i = sum val * v_k * w_j` over the
/// stored entries `(k, i, j, val)`, built skew in `(i, j)` so that
/// `z^T N(z, z) = 0` for every `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm {
    pub n: usize,
    pub entries: Vec<(usize, usize, usize, f64)>,
}

impl QuadraticForm {
    pub fn apply(&self, v: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for &(k, i, j, val) in &self.entries {
            out[i] += val * v[k] * w[j];
        }
        out
    }

    /// Matrix of `w -> N(v, w) + N(w, v)`.
    pub fn jacobian(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.n, self.n);
        for &(k, i, j, val) in &self.entries {
            l[(i, j)] += val * v[k];
            l[(i, k)] += val * v[j];
        }
        l
    }

    /// Matrix of `w -> N(v, w)`, the frozen convection operator.
    pub fn convection(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.n, self.n);
        for &(k, i, j, val) in &self.entries {
            l[(i, j)] += val * v[k];
        }
        l
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            n: self.n,
            entries: self
                .entries
                .iter()
                .map(|&(k, i, j, v)| (k, i, j, v * s))
                .collect(),
        }
    }
}

/// Parameters for [`gen_toy_nonlinear`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyParams {
    pub n_v: usize,
    pub n_p: usize,
    pub m: usize,
    pub p: usize,
    pub reynolds_like: f64,
    pub seed: u64,
}

impl Default for ToyParams {
    fn default() -> Self {
        Self {
            n_v: 80,
            n_p: 12,
            m: 2,
            p: 2,
            reynolds_like: 90.0,
            seed: 3,
        }
    }
}

/// Reynolds-like value at which the generated toy plants lose stability.
pub const TOY_CRITICAL_REYNOLDS: f64 = 50.0;
const DIFFUSION_SPREAD: f64 = 1500.0;
const TRIAD_BAND: usize = 6;
/// Range of the diagonal damping of synthetic plants.
const SYNTHETIC_DAMPING: (f64, f64) = (0.5, 2.0);

/// Nonlinear plant `E v' = A_S v + N(v, v) + J^T q + B u + f`, `J v = 0`.
#[derive(Debug, Clone)]
pub struct NonlinearPlant {
    /// Linearization at the steady state: `A = A_S + dN(v_inf)`.
    pub linear: ConstrainedSystem,
    pub quad: QuadraticForm,
    pub steady_state: DVector<f64>,
    pub pressure: DVector<f64>,
    pub forcing: DVector<f64>,
    /// Diffusion analogue `K`, with `A_S = -K / reynolds_like`.
    pub diffusion: DMatrix<f64>,
    pub reynolds_like: f64,
}

impl NonlinearPlant {
    /// Linear plant `E v' = A v + J^T q + B u` around `v_inf = 0`.
    pub fn from_linear(linear: ConstrainedSystem) -> Self {
        let (n, n_p) = (linear.n_v(), linear.n_p());
        Self {
            diffusion: -&linear.a,
            quad: QuadraticForm {
                n,
                entries: Vec::new(),
            },
            steady_state: DVector::zeros(n),
            pressure: DVector::zeros(n_p),
            forcing: DVector::zeros(n),
            reynolds_like: 1.0,
            linear,
        }
    }

    pub fn a_s(&self) -> DMatrix<f64> {
        &self.diffusion * (-1.0 / self.reynolds_like)
    }

    pub fn nonlinearity(&self, v: &DVector<f64>) -> DVector<f64> {
        self.quad.apply(v, v)
    }

    /// `A_S v + N(v, v) + J^T q + f` at the given Reynolds-like value.
    pub fn steady_residual_at(&self, re: f64, v: &DVector<f64>, q: &DVector<f64>) -> DVector<f64> {
        &self.diffusion * v * (-1.0 / re)
            + self.nonlinearity(v)
            + self.linear.j.transpose() * q
            + &self.forcing
    }

    pub fn steady_residual(&self, v: &DVector<f64>, q: &DVector<f64>) -> DVector<f64> {
        self.steady_residual_at(self.reynolds_like, v, q)
    }

    /// `A_S + dN(v)`.
    pub fn linearization_at(&self, v: &DVector<f64>) -> DMatrix<f64> {
        self.a_s() + self.quad.jacobian(v)
    }
}

fn projected_abscissa(e: &DMatrix<f64>, a: &DMatrix<f64>, theta: &DMatrix<f64>) -> Result<f64> {
    let tt = theta.transpose();
    let ev = pencil_eigenvalues(&(&tt * e * theta), &(&tt * a * theta))?;
    Ok(ev.first().map_or(f64::NEG_INFINITY, |z| z.re))
}

/// Seeded toy flow plant whose linearization becomes unstable once
/// `reynolds_like` exceeds [`TOY_CRITICAL_REYNOLDS`].
pub fn gen_toy_nonlinear(params: &ToyParams) -> Result<NonlinearPlant> {
    if 2 * params.n_p >= params.n_v {
        return Err(Error::InvalidArgument("n_p must be below n_v / 2".into()));
    }
    if !(params.reynolds_like > 0.0) {
        return Err(Error::InvalidArgument(
            "reynolds_like must be positive".into(),
        ));
    }
    let mut last = Error::RankDeficientJ;
    for offset in 0..16u64 {
        match try_toy(params, params.seed.wrapping_add(offset * 0x9e37_79b9)) {
            Ok(p) => return Ok(p),
            Err(e) => last = e,
        }
    }
    Err(last)
}

fn try_toy(params: &ToyParams, seed: u64) -> Result<NonlinearPlant> {
    let ToyParams {
        n_v,
        n_p,
        m,
        p,
        reynolds_like,
        ..
    } = *params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = mass_matrix(&mut rng, n_v);
    let j = constraint_matrix(&mut rng, n_p, n_v);
    if !full_row_rank(&j) {
        return Err(Error::RankDeficientJ);
    }
    // Laplacian-like spread: few slow modes, many strongly damped ones
    let diffusion = DMatrix::from_diagonal(&DVector::from_fn(n_v, |i, _| {
        let k = (i + 1) as f64 / n_v as f64;
        (0.5 + DIFFUSION_SPREAD * k * k) * rng.random_range(0.8..1.2)
    })) + sparse_spd(&mut rng, n_v);
    let theta = kernel_basis(&j);
    // skew bilinear form with a few entries per output row
    let mut entries = Vec::new();
    for i in 0..n_v {
        for _ in 0..4 {
            // local triads, like a low-order stencil
            let jj = near(&mut rng, i, n_v);
            let k = near(&mut rng, i, n_v);
            if jj == i {
                continue;
            }
            let val = gaussian(&mut rng);
            entries.push((k, i, jj, val));
            entries.push((k, jj, i, -val));
        }
    }
    let quad = QuadraticForm { n: n_v, entries };
    let xi = DVector::from_fn(theta.ncols(), |_, _| gaussian(&mut rng));
    let mut v_inf = &theta * xi;
    v_inf /= v_inf.norm();
    // locate the stability boundary of -K/re + dN(v_inf) in re
    let jac = quad.jacobian(&v_inf);
    let abscissa = |re: f64| projected_abscissa(&e, &(&diffusion * (-1.0 / re) + &jac), &theta);
    let (mut lo, mut hi) = (1e-3, 1e6);
    if abscissa(hi)? <= 0.0 || abscissa(lo)? >= 0.0 {
        return Err(Error::InvalidArgument(
            "toy plant has no stability boundary".into(),
        ));
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if abscissa(mid)? > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi / lo < 1.0 + 1e-12 {
            break;
        }
    }
    // scaling N by s moves the boundary from re_c to re_c / s
    let scale = hi / TOY_CRITICAL_REYNOLDS;
    let quad = quad.scaled(scale);
    let a_s = &diffusion * (-1.0 / reynolds_like);
    let a_inf = &a_s + quad.jacobian(&v_inf);
    let crit_gap = projected_abscissa(&e, &a_inf, &theta)?;
    if reynolds_like > TOY_CRITICAL_REYNOLDS * 1.05 && crit_gap <= 1e-3 {
        return Err(Error::InvalidArgument(
            "stability boundary is not monotone".into(),
        ));
    }
    let p_inf = DVector::from_fn(n_p, |_, _| gaussian(&mut rng));
    let forcing = -(&a_s * &v_inf) - quad.apply(&v_inf, &v_inf) - j.transpose() * &p_inf;
    let b = smooth_columns(&mut rng, n_v, m);
    let c = smooth_columns(&mut rng, n_v, p).transpose();
    let linear = ConstrainedSystem::new(e, a_inf, j, b, c)?;
    Ok(NonlinearPlant {
        linear,
        quad,
        steady_state: v_inf,
        pressure: p_inf,
        forcing,
        diffusion,
        reynolds_like,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationMode {
    /// Linearize at the `ell`-th damped Picard iterate toward the steady state.
    PicardLike,
    /// Linearize at the steady state of the Reynolds-like value scaled by
    /// `1 + ell / 1000`.
    ParameterLike,
}

/// An inexact linearization `A^(ell) = A_S + dN(v_ell)` of a toy plant.
#[derive(Debug, Clone)]
pub struct PerturbationFamily {
    pub base: ConstrainedSystem,
    pub mode: PerturbationMode,
    pub ell: i64,
    pub system: ConstrainedSystem,
    pub linearization_point: DVector<f64>,
    /// `||A^(ell) - A^(inf)||_F`.
    pub distance: f64,
}

pub const PICARD_CAP: i64 = 200;
const PICARD_DAMPING: f64 = 0.5;

/// Steady state of the plant at another Reynolds-like value by damped Newton
/// iteration on the saddle system, continued from `v_inf` in substeps when a
/// direct solve fails.
pub fn steady_state_at(plant: &NonlinearPlant, re: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    continue_steady(
        plant,
        plant.reynolds_like,
        re,
        plant.steady_state.clone(),
        plant.pressure.clone(),
        0,
    )
}

const CONTINUATION_DEPTH: usize = 8;

fn continue_steady(
    plant: &NonlinearPlant,
    from: f64,
    to: f64,
    v: DVector<f64>,
    q: DVector<f64>,
    depth: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    match newton_steady(plant, to, v.clone(), q.clone()) {
        Err(Error::SteadyStateDivergence) if depth < CONTINUATION_DEPTH => {
            let mid = (from * to).sqrt();
            let (vm, qm) = continue_steady(plant, from, mid, v, q, depth + 1)?;
            continue_steady(plant, mid, to, vm, qm, depth + 1)
        }
        r => r,
    }
}

fn newton_steady(
    plant: &NonlinearPlant,
    re: f64,
    mut v: DVector<f64>,
    mut q: DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let j = &plant.linear.j;
    let scale = plant.forcing.norm().max(1.0);
    let mut res = plant.steady_residual_at(re, &v, &q);
    for _ in 0..60 {
        if res.norm() < 1e-12 * scale {
            return Ok((v, q));
        }
        let jac = &plant.diffusion * (-1.0 / re) + plant.quad.jacobian(&v);
        let saddle = Saddle::new(&jac, j)?;
        let rhs = DMatrix::from_column_slice(res.len(), 1, (-&res).as_slice());
        let (dv, dq) = saddle.solve(&rhs)?;
        let dv = dv.column(0).clone_owned();
        let dq = dq.column(0).clone_owned();
        let mut t = 1.0;
        loop {
            let vt = &v + &dv * t;
            let qt = &q + &dq * t;
            let rt = plant.steady_residual_at(re, &vt, &qt);
            if rt.norm() < (1.0 - 1e-4 * t) * res.norm() || t < 1e-6 {
                v = vt;
                q = qt;
                res = rt;
                break;
            }
            t *= 0.5;
        }
        if t < 1e-6 || !res.norm().is_finite() {
            return Err(Error::SteadyStateDivergence);
        }
    }
    if res.norm() < 1e-10 * scale {
        Ok((v, q))
    } else {
        Err(Error::SteadyStateDivergence)
    }
}

/// Damped Picard iterate `ell` from `0.5 v_inf`: each step solves the Oseen
/// problem with frozen convection and relaxes with factor 0.5.
pub fn picard_iterate(plant: &NonlinearPlant, ell: i64) -> Result<DVector<f64>> {
    let j = &plant.linear.j;
    let a_s = plant.a_s();
    let mut v = &plant.steady_state * 0.5;
    let rhs = DMatrix::from_column_slice(plant.forcing.len(), 1, (-&plant.forcing).as_slice());
    for _ in 0..ell.clamp(0, PICARD_CAP) {
        let k = &a_s + plant.quad.convection(&v);
        let saddle = Saddle::new(&k, j)?;
        let vt = saddle.solve_top(&rhs)?.column(0).clone_owned();
        v = &v + (vt - &v) * PICARD_DAMPING;
    }
    Ok(v)
}

/// Linearization of the toy plant at a perturbed point.
pub fn perturb_linearization(
    plant: &NonlinearPlant,
    mode: PerturbationMode,
    ell: i64,
) -> Result<PerturbationFamily> {
    let a_s = plant.a_s();
    let point = match mode {
        PerturbationMode::ParameterLike => {
            if ell == 0 {
                plant.steady_state.clone()
            } else {
                steady_state_at(plant, plant.reynolds_like * (1.0 + ell as f64 / 1000.0))?.0
            }
        }
        PerturbationMode::PicardLike => picard_iterate(plant, ell)?,
    };
    let a = if mode == PerturbationMode::ParameterLike && ell == 0 {
        plant.linear.a.clone()
    } else {
        &a_s + plant.quad.jacobian(&point)
    };
    let distance = (&a - &plant.linear.a).norm();
    Ok(PerturbationFamily {
        base: plant.linear.clone(),
        mode,
        ell,
        system: plant.linear.with_a(a),
        linearization_point: point,
        distance,
    })
}

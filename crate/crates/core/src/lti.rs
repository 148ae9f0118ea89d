//! Descriptor systems, transfer-function evaluation, stability, H-infinity
//! norms and lower linear fractional interconnection.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::linalg::{
    block_diag, eigenvalues, hstack, pencil_eigenvalues, sigma_max, to_complex, vstack,
    FrequencyResponse, C64,
};

/// Real part below which a finite eigenvalue counts as stable.
pub const STABILITY_MARGIN: f64 = -1e-10;

/// Linear time-invariant system `E x' = A x + B u`, `y = C x + D u`.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSystem {
    pub e: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub e_invertible: bool,
}

impl DescriptorSystem {
    /// Builds a system with zero feedthrough and probes `E` for solvability.
    pub fn new(e: DMatrix<f64>, a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let d = DMatrix::zeros(c.nrows(), b.ncols());
        Self::with_feedthrough(e, a, b, c, d)
    }

    pub fn with_feedthrough(
        e: DMatrix<f64>,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || e.shape() != (n, n) {
            return Err(dim_err(format!(
                "E is {:?} and A is {:?}, expected square of equal size",
                e.shape(),
                a.shape()
            )));
        }
        if b.nrows() != n || c.ncols() != n {
            return Err(dim_err(format!(
                "B has {} rows and C has {} columns, expected {n}",
                b.nrows(),
                c.ncols()
            )));
        }
        if d.shape() != (c.nrows(), b.ncols()) {
            return Err(dim_err(format!("D is {:?}", d.shape())));
        }
        if !probe_invertible(&e) {
            return Err(Error::SingularPencil(
                "E fails the solvability probe".into(),
            ));
        }
        Ok(Self {
            e,
            a,
            b,
            c,
            d,
            e_invertible: true,
        })
    }

    /// State-space system with `E = I`.
    pub fn standard(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        Self::new(DMatrix::identity(n, n), a, b, c)
    }

    /// The system with no states and zero transfer function.
    pub fn zero(p: usize, m: usize) -> Self {
        Self {
            e: DMatrix::zeros(0, 0),
            a: DMatrix::zeros(0, 0),
            b: DMatrix::zeros(0, m),
            c: DMatrix::zeros(p, 0),
            d: DMatrix::zeros(p, m),
            e_invertible: true,
        }
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    /// `(E^{-1} A, E^{-1} B)`.
    pub fn to_standard(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let lu = self.e.clone().lu();
        let a = lu
            .solve(&self.a)
            .ok_or_else(|| Error::SingularPencil("E".into()))?;
        let b = lu
            .solve(&self.b)
            .ok_or_else(|| Error::SingularPencil("E".into()))?;
        Ok((a, b))
    }
}

fn probe_invertible(e: &DMatrix<f64>) -> bool {
    let n = e.nrows();
    if n == 0 {
        return true;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let r = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    match e.clone().lu().solve(&r) {
        Some(x) => {
            let res = (e * &x - &r).norm() / r.norm();
            res < 1e-10 && x.iter().all(|v| v.is_finite())
        }
        None => false,
    }
}

/// `G(s)` at one complex frequency.
#[derive(Debug, Clone)]
pub struct TransferSample {
    pub s: C64,
    pub value: DMatrix<C64>,
}

/// Evaluates `C (sE - A)^{-1} B + D` by a single complex solve.
pub fn eval_transfer(sys: &DescriptorSystem, s: C64) -> Result<TransferSample> {
    let n = sys.order();
    let mut value = to_complex(&sys.d);
    if n > 0 {
        let pencil = to_complex(&sys.e) * s - to_complex(&sys.a);
        let rhs = to_complex(&sys.b);
        let x = pencil
            .clone()
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::SingularPencil(format!("{s}")))?;
        let bn = rhs.norm().max(f64::MIN_POSITIVE);
        let res = (&pencil * &x - &rhs).norm() / bn;
        if !(res <= 1e-8) {
            return Err(Error::SingularPencil(format!("{s}")));
        }
        value += to_complex(&sys.c) * x;
    }
    Ok(TransferSample { s, value })
}

/// Finite spectrum of a pencil together with the stability decision.
#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub stable: bool,
    /// Eigenvalues sorted by real part, largest first.
    pub eigenvalues: Vec<C64>,
}

impl StabilityReport {
    pub fn from_eigenvalues(mut eigenvalues: Vec<C64>) -> Self {
        eigenvalues.sort_by(|x, y| y.re.total_cmp(&x.re));
        let stable = eigenvalues.iter().all(|z| z.re < STABILITY_MARGIN);
        Self {
            stable,
            eigenvalues,
        }
    }

    pub fn abscissa(&self) -> f64 {
        self.eigenvalues.first().map_or(f64::NEG_INFINITY, |z| z.re)
    }
}

pub fn is_stable(sys: &DescriptorSystem) -> Result<StabilityReport> {
    if sys.order() == 0 {
        return Ok(StabilityReport::from_eigenvalues(Vec::new()));
    }
    let ev = pencil_eigenvalues(&sys.e, &sys.a).map_err(|e| match e {
        Error::SchurFailure => Error::EigFailure,
        other => other,
    })?;
    Ok(StabilityReport::from_eigenvalues(ev))
}

const SWEEP_POINTS: usize = 400;

/// Frequency grid used for the initial sweep: 400 log-spaced points on
/// `[1e-4, 1e4]`.
pub fn sweep_grid() -> Vec<f64> {
    (0..SWEEP_POINTS)
        .map(|i| 10f64.powf(-4.0 + 8.0 * i as f64 / (SWEEP_POINTS - 1) as f64))
        .collect()
}

/// Peak of `sigma_max(G(i w))` over the sweep grid, refined around the best
/// grid point by golden-section search in log frequency.
fn sweep_peak(fr: &FrequencyResponse, d: &DMatrix<f64>) -> (f64, f64) {
    let grid = sweep_grid();
    let mut best = (sigma_max(&to_complex(d)), f64::INFINITY);
    let dc = fr.sigma_max_at(0.0);
    if dc > best.0 {
        best = (dc, 0.0);
    }
    let vals: Vec<f64> = grid.iter().map(|&w| fr.sigma_max_at(w)).collect();
    let (k, &vk) = vals
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(y.1))
        .unwrap();
    if vk > best.0 {
        best = (vk, grid[k]);
    }
    let lo = grid[k.saturating_sub(1)].ln();
    let hi = grid[(k + 1).min(grid.len() - 1)].ln();
    let (mut a, mut b) = (lo, hi);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let mut f1 = fr.sigma_max_at(x1.exp());
    let mut f2 = fr.sigma_max_at(x2.exp());
    for _ in 0..60 {
        if f1 > f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = fr.sigma_max_at(x1.exp());
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = fr.sigma_max_at(x2.exp());
        }
        if (b - a).abs() < 1e-12 {
            break;
        }
    }
    for (f, x) in [(f1, x1), (f2, x2)] {
        if f > best.0 {
            best = (f, x.exp());
        }
    }
    best
}

/// Candidate imaginary-axis eigenvalue frequencies of the Hamiltonian at
/// level `gamma`.
fn hamiltonian_axis_frequencies(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    gamma: f64,
) -> Result<Vec<f64>> {
    let n = a.nrows();
    let m = b.ncols();
    let p = c.nrows();
    let r = DMatrix::<f64>::identity(m, m) * (gamma * gamma) - d.transpose() * d;
    let r_lu = r.lu();
    let rinv_dt_c = r_lu
        .solve(&(d.transpose() * c))
        .ok_or_else(|| Error::InvalidArgument("gamma below sigma_max(D)".into()))?;
    let rinv_bt = r_lu.solve(&b.transpose()).unwrap();
    let a11 = a + b * &rinv_dt_c;
    let a12 = b * &rinv_bt;
    let rinv_dt = r_lu.solve(&d.transpose()).unwrap();
    let s = DMatrix::<f64>::identity(p, p) + d * rinv_dt;
    let a21 = -(c.transpose() * s * c);
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(&a11);
    h.view_mut((0, n), (n, n)).copy_from(&a12);
    h.view_mut((n, 0), (n, n)).copy_from(&a21);
    h.view_mut((n, n), (n, n)).copy_from(&(-a11.transpose()));
    let scale = h.norm().max(1.0);
    let ev = eigenvalues(&h)?;
    let mut freqs: Vec<f64> = ev
        .iter()
        .filter(|z| z.re.abs() <= 1e-6 * scale.sqrt() * (1.0 + z.im.abs()).sqrt())
        .map(|z| z.im.abs())
        .collect();
    freqs.sort_by(f64::total_cmp);
    freqs.dedup_by(|x, y| (*x - *y).abs() <= 1e-10 * (1.0 + y.abs()));
    Ok(freqs)
}

/// H-infinity norm of a stable system to relative accuracy `tol`.
pub fn hinf_norm(sys: &DescriptorSystem, tol: f64) -> Result<f64> {
    if !(tol > 0.0 && tol <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "tol = {tol} not in (0, 1e-2]"
        )));
    }
    let dnorm = sigma_max(&to_complex(&sys.d));
    if sys.order() == 0 {
        return Ok(dnorm);
    }
    let report = is_stable(sys)?;
    if !report.stable {
        return Err(Error::UnstableSystem(report.abscissa()));
    }
    let (a, b) = sys.to_standard()?;
    let fr = FrequencyResponse::new(
        &DMatrix::identity(a.nrows(), a.nrows()),
        &a,
        &b,
        &sys.c,
        &sys.d,
    )?;
    let (peak, _) = sweep_peak(&fr, &sys.d);
    if peak == 0.0 {
        return Ok(0.0);
    }
    let mut lo = peak;
    // upper end: grow until the Hamiltonian has no confirmed axis eigenvalue
    let mut hi = peak * (1.0 + tol);
    let confirm = |gamma: f64, freqs: &[f64]| -> f64 {
        let mut best = 0.0f64;
        for &w in freqs {
            best = best.max(fr.sigma_max_at(w));
        }
        // eigenvalues of the Hamiltonian on the axis imply sigma_max >= gamma
        if best >= gamma * (1.0 - 1e-9) {
            best
        } else {
            0.0
        }
    };
    let mut grow = 0;
    loop {
        let freqs = hamiltonian_axis_frequencies(&a, &b, &sys.c, &sys.d, hi)?;
        let found = confirm(hi, &freqs);
        if found == 0.0 {
            break;
        }
        lo = lo.max(found);
        hi = lo * 2.0;
        grow += 1;
        if grow > 60 {
            return Err(Error::BracketFailure {
                sweep: peak,
                bisection: hi,
            });
        }
    }
    let mut iter = 0;
    while (hi - lo) > tol * lo && iter < 200 {
        let mid = if lo > dnorm {
            (lo * hi).sqrt()
        } else {
            0.5 * (lo + hi)
        };
        let freqs = hamiltonian_axis_frequencies(&a, &b, &sys.c, &sys.d, mid)?;
        let found = confirm(mid, &freqs);
        if found > 0.0 {
            lo = lo.max(found).max(mid);
            // midpoints between axis crossings carry the next lower bound
            for pair in freqs.windows(2) {
                lo = lo.max(fr.sigma_max_at(0.5 * (pair[0] + pair[1])));
            }
        } else {
            hi = mid;
        }
        if lo > hi {
            hi = lo * (1.0 + 0.5 * tol);
        }
        iter += 1;
    }
    let value = 0.5 * (lo + hi);
    if value < peak * (1.0 - 10.0 * tol) {
        return Err(Error::BracketFailure {
            sweep: peak,
            bisection: value,
        });
    }
    Ok(value)
}

/// Structured block of a partitioned plant; identity and zero parts are not
/// stored densely.
#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Dense(DMatrix<f64>),
    Zero {
        rows: usize,
        cols: usize,
    },
    /// `[M 0]` with `zero_cols` trailing zero columns.
    DenseThenZeroCols {
        m: DMatrix<f64>,
        zero_cols: usize,
    },
    /// `[M; 0]` with `zero_rows` trailing zero rows.
    DenseThenZeroRows {
        m: DMatrix<f64>,
        zero_rows: usize,
    },
    /// `[0; I_k]` with `zero_rows` leading zero rows.
    ZeroOverIdentity {
        zero_rows: usize,
        k: usize,
    },
    /// `[0 I_k]` with `zero_cols` leading zero columns.
    ZeroBesideIdentity {
        zero_cols: usize,
        k: usize,
    },
}

impl Block {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Block::Dense(m) => m.shape(),
            Block::Zero { rows, cols } => (*rows, *cols),
            Block::DenseThenZeroCols { m, zero_cols } => (m.nrows(), m.ncols() + zero_cols),
            Block::DenseThenZeroRows { m, zero_rows } => (m.nrows() + zero_rows, m.ncols()),
            Block::ZeroOverIdentity { zero_rows, k } => (zero_rows + k, *k),
            Block::ZeroBesideIdentity { zero_cols, k } => (*k, zero_cols + k),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Block::Zero { .. } => true,
            Block::Dense(m) => m.iter().all(|&x| x == 0.0),
            _ => false,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let (r, c) = self.shape();
        let mut out = DMatrix::zeros(r, c);
        match self {
            Block::Dense(m) => out.copy_from(m),
            Block::Zero { .. } => {}
            Block::DenseThenZeroCols { m, .. } | Block::DenseThenZeroRows { m, .. } => {
                out.view_mut((0, 0), m.shape()).copy_from(m)
            }
            Block::ZeroOverIdentity { zero_rows, k } => {
                for i in 0..*k {
                    out[(zero_rows + i, i)] = 1.0;
                }
            }
            Block::ZeroBesideIdentity { zero_cols, k } => {
                for i in 0..*k {
                    out[(i, zero_cols + i)] = 1.0;
                }
            }
        }
        out
    }
}

/// Two-port plant `[z; y] = G [w; u]` with `E x' = A x + B1 w + B2 u`.
#[derive(Debug, Clone)]
pub struct PartitionedPlant {
    pub e: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b1: Block,
    pub b2: DMatrix<f64>,
    pub c1: Block,
    pub c2: DMatrix<f64>,
    pub d11: Block,
    pub d12: Block,
    pub d21: Block,
    pub d22: Block,
}

impl PartitionedPlant {
    /// Splits a system so that the last `m2` inputs and last `p2` outputs form
    /// the control channels.
    pub fn from_system(sys: &DescriptorSystem, m2: usize, p2: usize) -> Result<Self> {
        let (p, m) = (sys.outputs(), sys.inputs());
        if m2 > m || p2 > p {
            return Err(dim_err("control channels exceed system size"));
        }
        let (m1, p1) = (m - m2, p - p2);
        let n = sys.order();
        Ok(Self {
            e: sys.e.clone(),
            a: sys.a.clone(),
            b1: Block::Dense(sys.b.view((0, 0), (n, m1)).clone_owned()),
            b2: sys.b.view((0, m1), (n, m2)).clone_owned(),
            c1: Block::Dense(sys.c.view((0, 0), (p1, n)).clone_owned()),
            c2: sys.c.view((p1, 0), (p2, n)).clone_owned(),
            d11: Block::Dense(sys.d.view((0, 0), (p1, m1)).clone_owned()),
            d12: Block::Dense(sys.d.view((0, m1), (p1, m2)).clone_owned()),
            d21: Block::Dense(sys.d.view((p1, 0), (p2, m1)).clone_owned()),
            d22: Block::Dense(sys.d.view((p1, m1), (p2, m2)).clone_owned()),
        })
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    /// Width of the disturbance channel `w`.
    pub fn m1(&self) -> usize {
        self.b1.shape().1
    }

    /// Height of the performance channel `z`.
    pub fn p1(&self) -> usize {
        self.c1.shape().0
    }

    pub fn m2(&self) -> usize {
        self.b2.ncols()
    }

    pub fn p2(&self) -> usize {
        self.c2.nrows()
    }

    /// The `w -> z` block.
    pub fn g11(&self) -> DescriptorSystem {
        DescriptorSystem {
            e: self.e.clone(),
            a: self.a.clone(),
            b: self.b1.to_dense(),
            c: self.c1.to_dense(),
            d: self.d11.to_dense(),
            e_invertible: true,
        }
    }

    /// The whole plant as one system with inputs `[w; u]` and outputs `[z; y]`.
    pub fn to_system(&self) -> DescriptorSystem {
        let b = hstack(&[&self.b1.to_dense(), &self.b2]);
        let c = vstack(&[&self.c1.to_dense(), &self.c2]);
        let top = hstack(&[&self.d11.to_dense(), &self.d12.to_dense()]);
        let bottom = hstack(&[&self.d21.to_dense(), &self.d22.to_dense()]);
        DescriptorSystem {
            e: self.e.clone(),
            a: self.a.clone(),
            b,
            c,
            d: vstack(&[&top, &bottom]),
            e_invertible: true,
        }
    }
}

/// The normalized LQG plant: `B1 = [B 0]`, `B2 = B`, `C1 = [C; 0]`, `C2 = C`,
/// `D12 = [0; I]`, `D21 = [0 I]`, `D11 = D22 = 0`.
pub fn build_normalized_plant(
    e: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<PartitionedPlant> {
    let n = a.nrows();
    if a.ncols() != n || e.shape() != (n, n) || b.nrows() != n || c.ncols() != n {
        return Err(dim_err("inconsistent (E, A, B, C) dimensions"));
    }
    let (m, p) = (b.ncols(), c.nrows());
    Ok(PartitionedPlant {
        e: e.clone(),
        a: a.clone(),
        b1: Block::DenseThenZeroCols {
            m: b.clone(),
            zero_cols: p,
        },
        b2: b.clone(),
        c1: Block::DenseThenZeroRows {
            m: c.clone(),
            zero_rows: m,
        },
        c2: c.clone(),
        d11: Block::Zero {
            rows: p + m,
            cols: m + p,
        },
        d12: Block::ZeroOverIdentity { zero_rows: p, k: m },
        d21: Block::ZeroBesideIdentity { zero_cols: m, k: p },
        d22: Block::Zero { rows: p, cols: m },
    })
}

/// Lower linear fractional transformation `F(G, K)` for `D22 = 0`.
pub fn lft_closed_loop(g: &PartitionedPlant, k: &DescriptorSystem) -> Result<DescriptorSystem> {
    if k.inputs() != g.p2() || k.outputs() != g.m2() {
        return Err(dim_err(format!(
            "controller is {}x{}, plant control channels need {}x{}",
            k.outputs(),
            k.inputs(),
            g.m2(),
            g.p2()
        )));
    }
    if !g.d22.is_zero() {
        return Err(Error::InvalidArgument("D22 must be zero".into()));
    }
    let b1 = g.b1.to_dense();
    let c1 = g.c1.to_dense();
    let d11 = g.d11.to_dense();
    let d12 = g.d12.to_dense();
    let d21 = g.d21.to_dense();
    let b2dk = &g.b2 * &k.d;
    let a11 = &g.a + &b2dk * &g.c2;
    let a12 = &g.b2 * &k.c;
    let a21 = &k.b * &g.c2;
    let a = vstack(&[&hstack(&[&a11, &a12]), &hstack(&[&a21, &k.a])]);
    let b = vstack(&[&(&b1 + &b2dk * &d21), &(&k.b * &d21)]);
    let c = hstack(&[&(&c1 + &d12 * &k.d * &g.c2), &(&d12 * &k.c)]);
    let d = &d11 + &d12 * &k.d * &d21;
    Ok(DescriptorSystem {
        e: block_diag(&g.e, &k.e),
        a,
        b,
        c,
        d,
        e_invertible: g.order() == 0 || k.e_invertible,
    })
}

/// Parallel difference `G1 - G2` with stacked states.
pub fn difference(g1: &DescriptorSystem, g2: &DescriptorSystem) -> Result<DescriptorSystem> {
    if g1.inputs() != g2.inputs() || g1.outputs() != g2.outputs() {
        return Err(dim_err("systems have different input/output sizes"));
    }
    Ok(DescriptorSystem {
        e: block_diag(&g1.e, &g2.e),
        a: block_diag(&g1.a, &g2.a),
        b: vstack(&[&g1.b, &g2.b]),
        c: hstack(&[&g1.c, &(-&g2.c)]),
        d: &g1.d - &g2.d,
        e_invertible: g1.e_invertible && g2.e_invertible,
    })
}

/// `sigma_max(G(i w))` at each requested frequency.
pub fn sigma_sweep(sys: &DescriptorSystem, omegas: &[f64]) -> Result<Vec<f64>> {
    let fr = FrequencyResponse::new(&sys.e, &sys.a, &sys.b, &sys.c, &sys.d)?;
    Ok(omegas.iter().map(|&w| fr.sigma_max_at(w)).collect())
}

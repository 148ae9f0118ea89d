//! Dense linear-algebra kernels shared by the solvers: complex Schur with
//! eigenvalue reordering, Riccati and Lyapunov solvers for small dense
//! problems, column compression of low-rank factors and a Hessenberg-based
//! frequency-response evaluator.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<C64> {
    m.map(|x| C64::new(x, 0.0))
}

pub fn real_part(m: &DMatrix<C64>) -> DMatrix<f64> {
    m.map(|z| z.re)
}

pub fn imag_part(m: &DMatrix<C64>) -> DMatrix<f64> {
    m.map(|z| z.im)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Complex Schur decomposition `a = q t q^H` with `t` upper triangular.
pub fn complex_schur(a: &DMatrix<C64>) -> Result<(DMatrix<C64>, DMatrix<C64>)> {
    let n = a.nrows();
    if n == 0 {
        return Ok((DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)));
    }
    let (q, mut t) = match nalgebra::Schur::try_new(a.clone(), f64::EPSILON, 100 * n.max(10)) {
        Some(s) => s.unpack(),
        None => {
            // the shifted QR iteration occasionally stalls; restart it on a
            // Householder-reflected copy, which changes the Hessenberg form
            let v =
                DVector::<C64>::from_fn(n, |i, _| C64::new(1.0 + (i % 7) as f64, (i % 3) as f64));
            let h = DMatrix::<C64>::identity(n, n)
                - &v * v.adjoint() * C64::from(2.0 / v.norm_squared());
            let (q, t) = nalgebra::Schur::try_new(&h * a * &h, f64::EPSILON, 100 * n.max(10))
                .ok_or(Error::SchurFailure)?
                .unpack();
            (h * q, t)
        }
    };
    // clean the strictly lower part, which only carries roundoff
    for j in 0..n {
        for i in (j + 1)..n {
            t[(i, j)] = C64::new(0.0, 0.0);
        }
    }
    Ok((q, t))
}

/// Complex Schur form of a real matrix through the real Schur form, whose
/// 2x2 blocks are split by one complex rotation each. Much cheaper than the
/// complex QR iteration.
pub fn real_complex_schur(a: &DMatrix<f64>) -> Result<(DMatrix<C64>, DMatrix<C64>)> {
    let n = a.nrows();
    if n == 0 {
        return Ok((DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)));
    }
    let Some(s) = nalgebra::Schur::try_new(a.clone(), f64::EPSILON, 100 * n.max(10)) else {
        return complex_schur(&to_complex(a));
    };
    let (q, t) = s.unpack();
    let (mut q, mut t) = (to_complex(&q), to_complex(&t));
    for m in (1..n).rev() {
        let sub = t[(m, m - 1)].re;
        if sub == 0.0 {
            continue;
        }
        let (a11, a12, a22) = (t[(m - 1, m - 1)], t[(m - 1, m)], t[(m, m)]);
        let half = (a11 - a22) * 0.5;
        let root = (half * half + a12 * sub).sqrt();
        let mu = half + root;
        let r = (mu.norm_sqr() + sub * sub).sqrt();
        let (c, sn) = (mu / r, sub / r);
        // G = [conj(c) s; -s c] applied from the left to rows m-1, m and
        // its adjoint from the right to columns m-1, m
        for j in (m - 1)..n {
            let (x, y) = (t[(m - 1, j)], t[(m, j)]);
            t[(m - 1, j)] = c.conj() * x + y * sn;
            t[(m, j)] = c * y - x * sn;
        }
        for i in 0..=m {
            let (x, y) = (t[(i, m - 1)], t[(i, m)]);
            t[(i, m - 1)] = x * c + y * sn;
            t[(i, m)] = y * c.conj() - x * sn;
        }
        for i in 0..n {
            let (x, y) = (q[(i, m - 1)], q[(i, m)]);
            q[(i, m - 1)] = x * c + y * sn;
            q[(i, m)] = y * c.conj() - x * sn;
        }
        t[(m, m - 1)] = C64::new(0.0, 0.0);
    }
    for j in 0..n {
        for i in (j + 1)..n {
            t[(i, j)] = C64::new(0.0, 0.0);
        }
    }
    Ok((q, t))
}

fn givens(f: C64, g: C64) -> (f64, C64) {
    // returns (c, s) with [c s; -conj(s) c] [f; g] = [r; 0]
    let fa = f.norm();
    let ga = g.norm();
    if ga == 0.0 {
        return (1.0, C64::new(0.0, 0.0));
    }
    if fa == 0.0 {
        return (0.0, g.conj() / ga);
    }
    let nrm = fa.hypot(ga);
    let c = fa / nrm;
    let s = (f / fa) * g.conj() / nrm;
    (c, s)
}

/// Swap the adjacent diagonal entries `k` and `k+1` of the triangular factor.
fn swap_adjacent(q: &mut DMatrix<C64>, t: &mut DMatrix<C64>, k: usize) {
    let n = t.nrows();
    let t11 = t[(k, k)];
    let t22 = t[(k + 1, k + 1)];
    let (c, s) = givens(t[(k, k + 1)], t22 - t11);
    // rows k, k+1 for columns k+2..n
    for j in (k + 2)..n {
        let x = t[(k, j)];
        let y = t[(k + 1, j)];
        t[(k, j)] = x * c + s * y;
        t[(k + 1, j)] = y * c - s.conj() * x;
    }
    // columns k, k+1 for rows 0..k
    let sc = s.conj();
    for i in 0..k {
        let x = t[(i, k)];
        let y = t[(i, k + 1)];
        t[(i, k)] = x * c + sc * y;
        t[(i, k + 1)] = y * c - sc.conj() * x;
    }
    t[(k, k)] = t22;
    t[(k + 1, k + 1)] = t11;
    for i in 0..n {
        let x = q[(i, k)];
        let y = q[(i, k + 1)];
        q[(i, k)] = x * c + sc * y;
        q[(i, k + 1)] = y * c - sc.conj() * x;
    }
}

/// Reorders a complex Schur form so that the eigenvalues accepted by `select`
/// lead the diagonal. Returns the number of selected eigenvalues.
pub fn reorder_schur<F: Fn(C64) -> bool>(
    q: &mut DMatrix<C64>,
    t: &mut DMatrix<C64>,
    select: F,
) -> usize {
    let n = t.nrows();
    let mut placed = 0;
    for j in 0..n {
        if select(t[(j, j)]) {
            let mut k = j;
            while k > placed {
                swap_adjacent(q, t, k - 1);
                k -= 1;
            }
            placed += 1;
        }
    }
    placed
}

/// Eigenvalues of a real square matrix.
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<C64>> {
    if a.nrows() == 0 {
        return Ok(Vec::new());
    }
    let (_, t) = real_complex_schur(a)?;
    Ok((0..t.nrows()).map(|i| t[(i, i)]).collect())
}

/// Finite eigenvalues of the pencil `(e, a)` for invertible `e`, sorted by
/// real part descending.
pub fn pencil_eigenvalues(e: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<Vec<C64>> {
    let m = solve_real(e, a).ok_or_else(|| Error::SingularPencil("E".into()))?;
    let mut ev = eigenvalues(&m)?;
    ev.sort_by(|x, y| y.re.partial_cmp(&x.re).unwrap_or(std::cmp::Ordering::Equal));
    Ok(ev)
}

pub fn solve_real(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if a.nrows() == 0 {
        return Some(DMatrix::zeros(0, b.ncols()));
    }
    a.clone().lu().solve(b)
}

const CARE_REFINE_STEPS: usize = 30;

/// Stabilizing solution of `a^T p + p a - p g p + q = 0` by the ordered complex
/// Schur method on the Hamiltonian matrix, followed by Newton refinement.

pub fn care(a: &DMatrix<f64>, g: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let mut h = DMatrix::<f64>::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    let scale = h.norm().max(1.0);
    let (mut qs, mut t) = real_complex_schur(&h)?;
    let axis_tol = 1e-12 * scale;
    for i in 0..2 * n {
        if t[(i, i)].re.abs() <= axis_tol {
            return Err(Error::NoStabilizingSolution(format!(
                "Hamiltonian eigenvalue {} on the imaginary axis",
                t[(i, i)]
            )));
        }
    }
    let k = reorder_schur(&mut qs, &mut t, |z| z.re < 0.0);
    if k != n {
        return Err(Error::NoStabilizingSolution(format!(
            "{k} stable Hamiltonian eigenvalues, expected {n}"
        )));
    }
    let u1 = qs.view((0, 0), (n, n)).clone_owned();
    let u2 = qs.view((n, 0), (n, n)).clone_owned();
    let svd = u1.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 1e-13 * smax {
        return Err(Error::NoStabilizingSolution(
            "stable invariant subspace is not a graph subspace".into(),
        ));
    }
    // p = u2 u1^{-1}  <=>  u1^T p^T = u2^T
    let pt = u1
        .transpose()
        .lu()
        .solve(&u2.transpose())
        .ok_or_else(|| Error::NoStabilizingSolution("singular U1".into()))?;
    let mut p = symmetrize(&real_part(&pt.transpose()));
    // Newton refinement on the residual; an ill-conditioned U1 can leave
    // the Schur solution far from converged
    for _ in 0..CARE_REFINE_STEPS {
        let res = care_residual(a, g, q, &p);
        let denom = q.norm() + (a.transpose() * &p).norm() + 1e-300;
        if res.norm() / denom < 1e-13 {
            break;
        }
        let acl = a - g * &p;
        let delta = lyap(&acl.transpose(), &res)?;
        let cand = symmetrize(&(&p + delta));
        if care_residual(a, g, q, &cand).norm() < res.norm() {
            p = cand;
        } else {
            break;
        }
    }
    let acl = a - g * &p;
    let ev = eigenvalues(&acl)?;
    if ev.iter().any(|z| z.re >= -1e-12 * scale) {
        return Err(Error::NoStabilizingSolution(
            "closed-loop matrix is not stable".into(),
        ));
    }
    Ok(p)
}

pub fn care_residual(
    a: &DMatrix<f64>,
    g: &DMatrix<f64>,
    q: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> DMatrix<f64> {
    a.transpose() * p + p * a - p * g * p + q
}

/// Solves `a x + x a^T + q = 0` by complex Bartels-Stewart.
pub fn lyap(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let (u, t) = real_complex_schur(a)?;
    let f = u.adjoint() * to_complex(q) * &u;
    let mut y = DMatrix::<C64>::zeros(n, n);
    for j in (0..n).rev() {
        let mut rhs: DVector<C64> = -f.column(j).clone_owned();
        for k in (j + 1)..n {
            let c = t[(j, k)].conj();
            rhs.axpy(-c, &y.column(k).clone_owned(), C64::new(1.0, 0.0));
        }
        let shift = t[(j, j)].conj();
        // back substitution with (t + shift I)
        for i in (0..n).rev() {
            let mut s = rhs[i];
            for l in (i + 1)..n {
                s -= t[(i, l)] * y[(l, j)];
            }
            let d = t[(i, i)] + shift;
            if d.norm() < 1e-300 {
                return Err(Error::NoStabilizingSolution(
                    "Lyapunov operator is singular".into(),
                ));
            }
            y[(i, j)] = s / d;
        }
    }
    let x = &u * y * u.adjoint();
    Ok(symmetrize(&real_part(&x)))
}

/// Orthonormal basis of the kernel of `j` (`n x (n - rank)`).
pub fn kernel_basis(j: &DMatrix<f64>) -> DMatrix<f64> {
    let n = j.ncols();
    if j.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    let jjt = j * j.transpose();
    let proj = DMatrix::<f64>::identity(n, n)
        - j.transpose() * jjt.lu().solve(j).expect("J has full row rank");
    let eig = SymmetricEigen::new(symmetrize(&proj));
    let cols: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
    let mut basis = DMatrix::zeros(n, cols.len());
    for (k, &i) in cols.iter().enumerate() {
        basis.set_column(k, &eig.eigenvectors.column(i));
    }
    basis
}

/// Orthonormal basis for the range of `z` with relative tolerance `tol`.
pub fn orth(z: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    if z.ncols() == 0 || z.nrows() == 0 {
        return DMatrix::zeros(z.nrows(), 0);
    }
    let svd = z.clone().svd(true, false);
    let u = svd.u.unwrap();
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > tol * smax && smax > 0.0)
        .collect();
    let mut out = DMatrix::zeros(z.nrows(), keep.len());
    for (k, &i) in keep.iter().enumerate() {
        out.set_column(k, &u.column(i));
    }
    out
}

/// Column compression of `z` so that `z z^T` is preserved up to singular
/// values of `z` below `tol * sigma_max`.
pub fn compress_columns(z: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = z.nrows();
    if z.ncols() == 0 {
        return DMatrix::zeros(n, 0);
    }
    let qr = z.clone().qr();
    let (q, r) = qr.unpack();
    let svd = r.svd(true, false);
    let u = svd.u.unwrap();
    let s = &svd.singular_values;
    let smax = s.max();
    if smax == 0.0 {
        return DMatrix::zeros(n, 0);
    }
    let keep: Vec<usize> = (0..s.len()).filter(|&i| s[i] > tol * smax).collect();
    let mut out = DMatrix::zeros(n, keep.len());
    for (k, &i) in keep.iter().enumerate() {
        let col = &q * u.column(i) * s[i];
        out.set_column(k, &col);
    }
    out
}

pub fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.iter().map(|b| b.nrows()).max().unwrap_or(0);
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        if b.ncols() > 0 {
            out.view_mut((0, c), (b.nrows(), b.ncols())).copy_from(*b);
        }
        c += b.ncols();
    }
    out
}

pub fn vstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.iter().map(|b| b.ncols()).max().unwrap_or(0);
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        if b.nrows() > 0 {
            out.view_mut((r, 0), (b.nrows(), b.ncols())).copy_from(*b);
        }
        r += b.nrows();
    }
    out
}

pub fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((a.nrows(), a.ncols()), b.shape()).copy_from(b);
    out
}

/// Largest singular value of a complex matrix.
pub fn sigma_max(m: &DMatrix<C64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Frequency response evaluator working on the Hessenberg form of
/// `E^{-1} A`, so each frequency costs `O(n^2)`.
#[derive(Debug, Clone)]
pub struct FrequencyResponse {
    h: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
}

impl FrequencyResponse {
    pub fn new(
        e: &DMatrix<f64>,
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        c: &DMatrix<f64>,
        d: &DMatrix<f64>,
    ) -> Result<Self> {
        let lu = e.clone().lu();
        let ea = lu
            .solve(a)
            .ok_or_else(|| Error::SingularPencil("E".into()))?;
        let eb = lu
            .solve(b)
            .ok_or_else(|| Error::SingularPencil("E".into()))?;
        let n = a.nrows();
        if n == 0 {
            return Ok(Self {
                h: ea,
                b: eb,
                c: c.clone(),
                d: d.clone(),
            });
        }
        let hess = ea.hessenberg();
        let (q, h) = hess.unpack();
        Ok(Self {
            b: q.transpose() * eb,
            c: c * &q,
            h,
            d: d.clone(),
        })
    }

    pub fn eval(&self, s: C64) -> DMatrix<C64> {
        let n = self.h.nrows();
        let m = self.b.ncols();
        let mut out = to_complex(&self.d);
        if n == 0 {
            return out;
        }
        // (s I - H) x = B with H upper Hessenberg: eliminate the subdiagonal
        let mut mat: DMatrix<C64> = self.h.map(|x| C64::new(-x, 0.0));
        for i in 0..n {
            mat[(i, i)] += s;
        }
        let mut rhs = to_complex(&self.b);
        for k in 0..n - 1 {
            if mat[(k + 1, k)].norm() > mat[(k, k)].norm() {
                mat.swap_rows(k, k + 1);
                rhs.swap_rows(k, k + 1);
            }
            let piv = mat[(k, k)];
            if piv.norm() == 0.0 {
                continue;
            }
            let f = mat[(k + 1, k)] / piv;
            if f.norm() != 0.0 {
                for j in k..n {
                    let v = mat[(k, j)];
                    mat[(k + 1, j)] -= f * v;
                }
                for j in 0..m {
                    let v = rhs[(k, j)];
                    rhs[(k + 1, j)] -= f * v;
                }
            }
        }
        for j in 0..m {
            for i in (0..n).rev() {
                let mut acc = rhs[(i, j)];
                for l in (i + 1)..n {
                    acc -= mat[(i, l)] * rhs[(l, j)];
                }
                rhs[(i, j)] = acc / mat[(i, i)];
            }
        }
        out += to_complex(&self.c) * rhs;
        out
    }

    pub fn sigma_max_at(&self, omega: f64) -> f64 {
        sigma_max(&self.eval(C64::new(0.0, omega)))
    }
}

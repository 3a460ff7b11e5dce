//! Dense complex linear-algebra helpers shared by the optimization blocks.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

pub const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
pub const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

#[inline]
pub fn cplx(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// `x^H y`.
#[inline]
pub fn inner(x: &CVec, y: &CVec) -> Complex64 {
    x.dotc(y)
}

/// `Re(x^H A x)`; the imaginary part vanishes for Hermitian `A`.
pub fn quad_form(a: &CMat, x: &CVec) -> f64 {
    x.dotc(&(a * x)).re
}

pub fn norm_sq(x: &CVec) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum()
}

pub fn inf_norm(x: &CVec) -> f64 {
    x.iter().map(|v| v.norm()).fold(0.0, f64::max)
}

/// `x x^H`.
pub fn outer(x: &CVec) -> CMat {
    x * x.adjoint()
}

/// Largest deviation from Hermitian symmetry, `max |A - A^H|`.
pub fn hermitian_defect(a: &CMat) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((a[(i, j)] - a[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Symmetrize in place: `A <- (A + A^H) / 2`.
pub fn hermitize(a: &mut CMat) {
    let n = a.nrows();
    for i in 0..n {
        a[(i, i)] = cplx(a[(i, i)].re, 0.0);
        for j in (i + 1)..n {
            let v = (a[(i, j)] + a[(j, i)].conj()) * 0.5;
            a[(i, j)] = v;
            a[(j, i)] = v.conj();
        }
    }
}

pub fn trace_re(a: &CMat) -> f64 {
    (0..a.nrows()).map(|i| a[(i, i)].re).sum()
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(a: &CMat) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(a.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ev
}

pub fn max_eigenvalue(a: &CMat) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    *hermitian_eigenvalues(a).last().unwrap()
}

/// Cholesky factorization that fails on indefinite input. nalgebra's complex
/// Cholesky takes complex square roots of negative pivots instead of failing,
/// so the pivots are checked here.
pub fn cholesky_hpd(a: &CMat) -> Option<Cholesky<Complex64, Dyn>> {
    let ch = Cholesky::new(a.clone())?;
    let l = ch.l_dirty();
    let ok = (0..a.nrows()).all(|i| {
        let d = l[(i, i)];
        d.re > 0.0 && d.re.is_finite() && d.im.abs() <= 1e-12 * d.re
    });
    ok.then_some(ch)
}

/// Solve `A x = b` for Hermitian positive definite `A`.
pub fn solve_hpd(a: &CMat, b: &CVec) -> Option<CVec> {
    cholesky_hpd(a).map(|ch| ch.solve(b))
}

/// Dominant eigenvector of the pencil `E2 v = mu E1 v` with `E1` positive
/// definite, normalized to unit Euclidean norm.
pub fn dominant_generalized_eigvec(e2: &CMat, e1: &CMat) -> Option<CVec> {
    let chol = cholesky_hpd(e1)?;
    let l = chol.l();
    let l_inv = l.clone().try_inverse()?;
    let mut c = &l_inv * e2 * l_inv.adjoint();
    hermitize(&mut c);
    let eig = SymmetricEigen::new(c);
    let (idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let y = eig.eigenvectors.column(idx).into_owned();
    let u = l.adjoint().solve_upper_triangular(&y)?;
    let n = u.norm();
    (n > 0.0).then(|| u / cplx(n, 0.0))
}

/// `I_n ⊗ B`.
pub fn kron_identity(n: usize, b: &CMat) -> CMat {
    let (r, c) = b.shape();
    let mut out = CMat::zeros(n * r, n * c);
    for k in 0..n {
        out.view_mut((k * r, k * c), (r, c)).copy_from(b);
    }
    out
}

/// Column-stacking `vec(W)`.
pub fn vectorize(w: &CMat) -> CVec {
    CVec::from_column_slice(w.as_slice())
}

pub fn unvectorize(w: &CVec, rows: usize, cols: usize) -> CMat {
    CMat::from_column_slice(rows, cols, w.as_slice())
}

/// Real embedding of a Hermitian form: `x^H A x = z^T Ā z` with `z = [Re x; Im x]`.
pub fn real_embed(a: &CMat) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let v = a[(i, j)];
            out[(i, j)] = v.re;
            out[(i, j + n)] = -v.im;
            out[(i + n, j)] = v.im;
            out[(i + n, j + n)] = v.re;
        }
    }
    out
}

/// `[Re x; Im x]`, so that `Re(b^H x) = embed(b)^T embed(x)`.
pub fn real_embed_vec(x: &CVec) -> DVector<f64> {
    let n = x.len();
    DVector::from_fn(2 * n, |i, _| if i < n { x[i].re } else { x[i - n].im })
}

pub fn from_real_embed(z: &DVector<f64>) -> CVec {
    let n = z.len() / 2;
    CVec::from_fn(n, |i, _| cplx(z[i], z[i + n]))
}

/// Entrywise projection onto the unit circle; zero entries map to `fallback`.
pub fn unit_modulus(x: &CVec, fallback: &CVec) -> CVec {
    CVec::from_fn(x.len(), |i, _| {
        let m = x[i].norm();
        if m < 1e-15 {
            fallback[i]
        } else {
            x[i] / m
        }
    })
}

/// Standard circular complex Gaussian, `E|z|^2 = 1`.
pub fn cn_sample<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    cplx(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

pub fn cn_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> CVec {
    CVec::from_fn(n, |_, _| cn_sample(rng))
}

pub fn cn_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> CMat {
    // Column-major fill order keeps draws reproducible across nalgebra versions.
    let mut m = CMat::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = cn_sample(rng);
        }
    }
    m
}

pub fn random_phases<R: Rng + ?Sized>(rng: &mut R, n: usize) -> CVec {
    CVec::from_fn(n, |_, _| {
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        Complex64::from_polar(1.0, theta)
    })
}

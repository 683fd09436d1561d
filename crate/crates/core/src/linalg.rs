//! Small dense complex matrix helpers: Hermitian functional calculus, the
//! principal matrix logarithm, norms and metric frames.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMat = DMatrix<Complex64>;

pub const I: Complex64 = Complex64::new(0.0, 1.0);

pub fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

pub fn identity(r: usize) -> CMat {
    CMat::identity(r, r)
}

pub fn zeros(r: usize) -> CMat {
    CMat::zeros(r, r)
}

pub fn from_real_diag(d: &[f64]) -> CMat {
    let mut m = zeros(d.len());
    for (i, &v) in d.iter().enumerate() {
        m[(i, i)] = c(v);
    }
    m
}

pub fn from_rows(rows: &[&[f64]]) -> CMat {
    let r = rows.len();
    CMat::from_fn(r, r, |i, j| c(rows[i][j]))
}

pub fn hermitize(m: &CMat) -> CMat {
    (m + m.adjoint()).scale(0.5)
}

pub fn trace(m: &CMat) -> Complex64 {
    m.trace()
}

pub fn frob(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Largest singular value.
pub fn spectral_norm(m: &CMat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone()
        .singular_values()
        .iter()
        .cloned()
        .fold(0.0_f64, f64::max)
}

pub fn commutator(a: &CMat, b: &CMat) -> CMat {
    a * b - b * a
}

/// Trace-free part.
pub fn trace_free(m: &CMat) -> CMat {
    let r = m.nrows();
    let t = m.trace() / c(r as f64);
    m - identity(r) * t
}

/// Eigen-decomposition of a Hermitian matrix; eigenvalues ascending.
pub fn herm_eig(m: &CMat) -> (Vec<f64>, CMat) {
    let r = m.nrows();
    if r == 1 {
        return (vec![m[(0, 0)].re], identity(1));
    }
    let e = hermitize(m).symmetric_eigen();
    let mut idx: Vec<usize> = (0..r).collect();
    idx.sort_by(|&a, &b| e.eigenvalues[a].total_cmp(&e.eigenvalues[b]));
    let vals = idx.iter().map(|&i| e.eigenvalues[i]).collect();
    let vecs = CMat::from_fn(r, r, |i, j| e.eigenvectors[(i, idx[j])]);
    (vals, vecs)
}

/// `f(m)` for Hermitian `m`.
pub fn herm_fn(m: &CMat, f: impl Fn(f64) -> f64) -> CMat {
    let r = m.nrows();
    if r == 1 {
        return CMat::from_element(1, 1, c(f(m[(0, 0)].re)));
    }
    let (vals, v) = herm_eig(m);
    let mut d = v.clone();
    for j in 0..r {
        let fj = f(vals[j]);
        for i in 0..r {
            d[(i, j)] *= fj;
        }
    }
    d * v.adjoint()
}

pub fn herm_exp(m: &CMat) -> CMat {
    herm_fn(m, f64::exp)
}

pub fn herm_log(m: &CMat) -> Result<CMat> {
    let (vals, _) = herm_eig(m);
    if vals.iter().any(|&v| v <= 0.0) {
        return Err(Error::NotPositive);
    }
    Ok(herm_fn(m, f64::ln))
}

pub fn herm_sqrt(m: &CMat) -> CMat {
    herm_fn(m, |x| x.max(0.0).sqrt())
}

pub fn min_eig(m: &CMat) -> f64 {
    herm_eig(m).0[0]
}

/// Inverse of a square matrix.
pub fn inv(m: &CMat) -> Result<CMat> {
    m.clone().try_inverse().ok_or(Error::Singular)
}

/// General matrix exponential (Padé scaling and squaring, delegated to nalgebra).
pub fn expm(m: &CMat) -> CMat {
    m.exp()
}

/// Principal square root by the scaled Denman-Beavers iteration.
pub fn sqrtm(a: &CMat) -> Result<CMat> {
    let r = a.nrows();
    let mut y = a.clone();
    let mut z = identity(r);
    for _ in 0..100 {
        let yi = inv(&y)?;
        let zi = inv(&z)?;
        let yn = (&y + &zi).scale(0.5);
        let zn = (&z + &yi).scale(0.5);
        let delta = frob(&(&yn - &y)) / frob(&yn).max(1e-300);
        y = yn;
        z = zn;
        if delta < 1e-15 {
            break;
        }
    }
    Ok(y)
}

/// Principal logarithm by inverse scaling and squaring. Fails when an
/// eigenvalue lies on the closed negative real axis.
pub fn logm(a: &CMat) -> Result<CMat> {
    let r = a.nrows();
    let ev = eigenvalues(a)?;
    for z in ev.iter() {
        if z.norm() < 1e-14 {
            return Err(Error::Singular);
        }
        if z.re <= 0.0 && z.im.abs() <= 1e-14 * z.norm() {
            return Err(Error::NoPrincipalLog);
        }
    }
    let id = identity(r);
    let mut x = a.clone();
    let mut k = 0;
    while frob(&(&x - &id)) > 0.25 && k < 60 {
        x = sqrtm(&x)?;
        k += 1;
    }
    // log(I + E) = 2 atanh(E (2I + E)^-1), odd series in the Cayley variable
    let e = &x - &id;
    let w = &e * inv(&(id.scale(2.0) + &e))?;
    let w2 = &w * &w;
    let mut term = w.clone();
    let mut sum = w.clone();
    for j in 1..40 {
        term = &term * &w2;
        let add = term.scale(1.0 / (2 * j + 1) as f64);
        let small = frob(&add) < 1e-18 * frob(&sum).max(1e-300);
        sum += add;
        if small {
            break;
        }
    }
    Ok(sum.scale(2.0 * (1u64 << k) as f64))
}

/// Eigenvalues of a general complex matrix via the Schur form.
pub fn eigenvalues(a: &CMat) -> Result<Vec<Complex64>> {
    let r = a.nrows();
    if r == 1 {
        return Ok(vec![a[(0, 0)]]);
    }
    let schur = nalgebra::Schur::try_new(a.clone(), 1e-15, 10_000).ok_or(Error::NoConvergence)?;
    let (_, t) = schur.unpack();
    Ok((0..r).map(|i| t[(i, i)]).collect())
}

/// Orthonormal basis of the numerical null space of `m` (columns).
pub fn null_space(m: &CMat, tol: f64) -> CMat {
    let n = m.ncols();
    // pad to square so the SVD returns a full right basis
    let rows = m.nrows().max(n);
    let mut padded = CMat::zeros(rows, n);
    padded.view_mut((0, 0), (m.nrows(), n)).copy_from(m);
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("requested");
    let scale = svd.singular_values.iter().cloned().fold(1.0_f64, f64::max);
    let cols: Vec<usize> = (0..n)
        .filter(|&i| svd.singular_values[i] <= tol * scale)
        .collect();
    CMat::from_fn(n, cols.len(), |i, j| vt[(cols[j], i)].conj())
}

/// Upper-triangular frame `g` with `h = g^† g`.
pub fn metric_frame(h: &CMat) -> Result<CMat> {
    let ch = nalgebra::Cholesky::new(hermitize(h)).ok_or(Error::NotPositive)?;
    Ok(ch.l().adjoint())
}

/// Solve `x g = b` for upper-triangular `g`, i.e. `x = b g^{-1}`.
pub fn right_div_upper(b: &CMat, g: &CMat) -> CMat {
    // x g = b  <=>  g^† x^† = b^†, with g^† lower triangular
    let gt = g.adjoint();
    let sol = gt
        .solve_lower_triangular(&b.adjoint())
        .expect("frame has positive diagonal");
    sol.adjoint()
}

/// `g^{-1} b` for upper-triangular `g`.
pub fn left_div_upper(g: &CMat, b: &CMat) -> CMat {
    g.solve_upper_triangular(b).expect("frame has positive diagonal")
}

/// Real inner product `Re tr(a b^†)`.
pub fn re_inner(a: &CMat, b: &CMat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x * y.conj()).re).sum()
}

/// `Re tr(a b^{*K})` where `b^{*K} = K^{-1} b^† K`.
pub fn k_inner(a: &CMat, b: &CMat, k: &CMat, k_inv: &CMat) -> f64 {
    (a * k_inv * b.adjoint() * k).trace().re
}

/// H-adjoint `H^{-1} m^† H`.
pub fn h_adjoint(m: &CMat, h: &CMat, h_inv: &CMat) -> CMat {
    h_inv * m.adjoint() * h
}

/// Average with the H-adjoint.
pub fn h_hermitize(m: &CMat, h: &CMat, h_inv: &CMat) -> CMat {
    (m + h_adjoint(m, h, h_inv)).scale(0.5)
}

/// Neumaier compensated accumulator.
#[derive(Debug, Default, Clone, Copy)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl std::iter::FromIterator<f64> for KahanSum {
    fn from_iter<T: IntoIterator<Item = f64>>(iter: T) -> Self {
        let mut k = KahanSum::default();
        for x in iter {
            k.add(x);
        }
        k
    }
}

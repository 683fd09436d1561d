//! Reference solutions for tests: closed forms on the circle and a brute-force
//! energy gradient that shares no code path with the tension in `bundle`.

use crate::bundle::{EndoField, FlatConnection, MetricField};
use crate::error::{Error, Result};
use crate::linalg::{self, CMat};
use crate::mesh::{DomainKind, LatticeDomain};

/// Rank-one flat bundle on a circle of length `length` with holonomy of
/// modulus `modulus`.
#[derive(Debug, Clone, Copy)]
pub struct CircleRankOneSolution {
    pub modulus: f64,
    pub length: f64,
}

impl CircleRankOneSolution {
    /// Harmonic metric in the flat gauge, `exp(2 ln|rho| x / L)`.
    pub fn profile(&self, x: f64) -> f64 {
        (2.0 * self.modulus.ln() * x / self.length).exp()
    }

    /// Constant value of `psi` on the harmonic metric.
    pub fn psi_coefficient(&self) -> f64 {
        -self.modulus.ln() / self.length
    }

    /// Integral of `tr psi` over the loop.
    pub fn alpha1_period(&self) -> f64 {
        -self.modulus.ln()
    }
}

/// Eigen-decomposition `M = P diag(mu) P^{-1}`; Jordan blocks are rejected.
pub fn diagonalize(m: &CMat) -> Result<(CMat, Vec<num_complex::Complex64>)> {
    let r = m.nrows();
    let mut vals = linalg::eigenvalues(m)?;
    vals.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    let mut cols: Vec<CMat> = Vec::new();
    let mut mus = Vec::new();
    let scale = linalg::frob(m).max(1.0);
    let mut i = 0;
    while i < r {
        let lam = vals[i];
        let mut mult = 1;
        while i + mult < r && (vals[i + mult] - lam).norm() < 1e-8 * scale {
            mult += 1;
        }
        let ns = linalg::null_space(&(m - linalg::identity(r) * lam), 1e-8);
        if ns.ncols() < mult {
            return Err(Error::NotDiagonalizable);
        }
        for j in 0..mult {
            cols.push(ns.columns(j, 1).into_owned());
            mus.push(lam);
        }
        i += mult;
    }
    let p = CMat::from_fn(r, r, |a, b| cols[b][(a, 0)]);
    linalg::inv(&p)?;
    Ok((p, mus))
}

/// Harmonic metric of a diagonalizable circle monodromy, as the lattice
/// sampling of the direct sum of rank-one exponential profiles in the
/// eigenframe, carried from the flat gauge into the lattice gauge of
/// `FlatConnection::from_monodromy`.
pub fn circle_harmonic_exact(dom: &LatticeDomain, monodromy: &CMat) -> Result<MetricField> {
    if dom.kind != DomainKind::Circle {
        return Err(Error::Domain("closed form needs a circle".into()));
    }
    let (p, mus) = diagonalize(monodromy)?;
    let pinv = linalg::inv(&p)?;
    let a = linalg::logm(monodromy)?;
    let l = dom.lengths[0];
    Ok(MetricField(
        (0..dom.n_sites())
            .map(|x| {
                let t = dom.coords(x)[0] / l;
                let diag: Vec<f64> = mus
                    .iter()
                    .map(|mu| CircleRankOneSolution { modulus: mu.norm(), length: l }.profile(t * l))
                    .collect();
                let flat = pinv.adjoint() * linalg::from_real_diag(&diag) * &pinv;
                // lattice-gauge frame: v(x) = E(x) v(0)
                let e = linalg::expm(&a.scale(t));
                let ei = linalg::inv(&e)?;
                Ok(linalg::hermitize(&(ei.adjoint() * flat * ei)))
            })
            .collect::<Result<_>>()?,
    ))
}

/// `sum_e mu_e |psi_e|^2` from the eigenvalues of the pulled-back metric
/// pencil, computed through symmetric square roots rather than frames.
fn edge_energy(hx: &CMat, hy: &CMat, u: &CMat, spacing: f64) -> Result<f64> {
    let s = linalg::herm_fn(hx, |v| 1.0 / v.sqrt());
    let pencil = linalg::hermitize(&(&s * u.adjoint() * hy * u * &s));
    let (vals, _) = linalg::herm_eig(&pencil);
    if vals.iter().any(|&v| v <= 0.0) {
        return Err(Error::NotPositive);
    }
    Ok(vals.iter().map(|v| v.ln().powi(2)).sum::<f64>() / (4.0 * spacing * spacing))
}

/// Energy of the metric, edge by edge.
pub fn independent_energy(dom: &LatticeDomain, conn: &FlatConnection, h: &MetricField) -> Result<f64> {
    let mut acc = linalg::KahanSum::default();
    for (i, e) in dom.edges.iter().enumerate() {
        acc.add(e.weight * e.measure * edge_energy(&h.0[e.tail], &h.0[e.head], &conn.transport[i], e.spacing)?);
    }
    Ok(acc.value())
}

/// Frobenius-orthonormal basis of Hermitian `r x r` matrices.
pub fn hermitian_basis(r: usize) -> Vec<CMat> {
    let mut out = Vec::new();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..r {
        for j in i..r {
            let mut m = linalg::zeros(r);
            if i == j {
                m[(i, i)] = linalg::c(1.0);
                out.push(m);
            } else {
                m[(i, j)] = linalg::c(s);
                m[(j, i)] = linalg::c(s);
                out.push(m.clone());
                let mut n = linalg::zeros(r);
                n[(i, j)] = linalg::I * s;
                n[(j, i)] = -linalg::I * s;
                out.push(n);
            }
        }
    }
    out
}

pub const BRUTE_FORCE_LIMIT: usize = 5000;

/// Central finite-difference gradient of the energy in every Hermitian
/// direction of every `H(x)`, converted to the tension through the flow
/// pairing: for `H(x) -> H(x) + eps B`, `dE = -vol tr(B T H^{-1}) eps`.
pub fn brute_force_tension(dom: &LatticeDomain, conn: &FlatConnection, h: &MetricField) -> Result<EndoField> {
    let r = conn.rank;
    let dof = dom.n_sites() * r * r;
    if dof > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(dof));
    }
    let basis = hermitian_basis(r);
    let step = 1e-5;
    let mut out = Vec::with_capacity(dom.n_sites());
    for x in 0..dom.n_sites() {
        // only edges touching x change; the rest of the sum cancels exactly
        let local = |hx: &CMat| -> Result<f64> {
            let mut acc = linalg::KahanSum::default();
            for o in &dom.out[x] {
                let e = &dom.edges[o.edge];
                let (ht, hh) = if o.forward { (hx, &h.0[e.head]) } else { (&h.0[e.tail], hx) };
                acc.add(e.weight * e.measure * edge_energy(ht, hh, &conn.transport[o.edge], e.spacing)?);
            }
            Ok(acc.value())
        };
        let eps = step * linalg::spectral_norm(&h.0[x]);
        let mut s = linalg::zeros(r);
        for b in &basis {
            let plus = local(&(&h.0[x] + b.scale(eps)))?;
            let minus = local(&(&h.0[x] - b.scale(eps)))?;
            let g = (plus - minus) / (2.0 * eps);
            s -= b.scale(g / dom.volume[x]);
        }
        out.push(s * &h.0[x]);
    }
    Ok(EndoField(out))
}

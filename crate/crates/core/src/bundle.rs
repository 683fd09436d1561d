//! Flat bundles as lattice parallel transport, and the metric splitting
//! `D = D_H + psi_H` with its codifferential and tension field.
//!
//! Conventions. A stored edge `e = (x -> y)` carries `U_e` with
//! `v(y) = U_e v(x)` for a parallel section, so the covariant difference of a
//! section is `(U_e^{-1} v(y) - v(x)) / h`. One-forms hold one value per stored
//! edge, in the frame of the tail; the value seen from the head is
//! `-U_e w U_e^{-1}`.
//!
//! On each edge the metric `H(y)` pulled back to `x` is `U^† H(y) U`; with
//! `A = H(x)^{-1} U^† H(y) U` the edge value of the self-adjoint part is
//! `psi = -log(A) / 2h`. It is exactly `H(x)`-self-adjoint and exactly
//! antisymmetric under edge reversal, and `U exp(h psi)` carries `H(y)`
//! isometrically onto `H(x)`. The energy `sum_e mu_e |psi_e|^2` is the
//! squared-distance energy of the equivariant map into `GL(r)/U(r)`, and the
//! tension below is its exact negative gradient.
//!
//! Numerically everything is evaluated in orthonormal frames `H = g^† g`
//! (`g` upper triangular), where `psi` becomes `-log(B^† B)/2h` with
//! `B = g_y U g_x^{-1}`. This keeps metrics with very large condition numbers
//! usable.

use nalgebra::DVector;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{self, CMat};
use crate::mesh::{LatticeDomain, OutEdge};

/// Per-edge transport of a flat connection.
#[derive(Debug, Clone)]
pub struct FlatConnection {
    pub rank: usize,
    pub transport: Vec<CMat>,
    pub inverse: Vec<CMat>,
    /// Prescribed holonomy of each periodic axis, at site 0.
    pub generators: Vec<CMat>,
}

/// Per-site Hermitian positive-definite fiber metric.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricField(pub Vec<CMat>);

/// Per-site endomorphism field.
#[derive(Debug, Clone, PartialEq)]
pub struct EndoField(pub Vec<CMat>);

/// One value per stored edge, in the tail frame.
#[derive(Debug, Clone, PartialEq)]
pub struct OneForm(pub Vec<CMat>);

/// Per-site section.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionField(pub Vec<DVector<Complex64>>);

/// Projection field onto a sub-bundle, orthogonal for the reference metric.
#[derive(Debug, Clone)]
pub struct SubBundleSpec {
    pub rank: usize,
    /// Column basis of the subspace at each site.
    pub basis: Vec<CMat>,
    pub proj: Vec<CMat>,
    pub invariance_residual: f64,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub psi: OneForm,
    /// `U exp(h psi)`: transport of the metric-preserving part `D_H`.
    pub metric_transport: Vec<CMat>,
}

#[derive(Debug, Clone)]
pub enum TensionMode<'a> {
    Direct,
    ViaReference(&'a MetricField),
}

impl MetricField {
    pub fn constant(n: usize, m: &CMat) -> Self {
        MetricField(vec![m.clone(); n])
    }

    pub fn identity(n: usize, r: usize) -> Self {
        Self::constant(n, &linalg::identity(r))
    }

    pub fn rank(&self) -> usize {
        self.0.first().map_or(0, |m| m.nrows())
    }

    pub fn validate(&self) -> Result<()> {
        for h in &self.0 {
            let dev = linalg::frob(&(h - h.adjoint()));
            if dev > 1e-12 * linalg::frob(h).max(1e-300) {
                return Err(Error::NotHermitian(dev));
            }
            if linalg::min_eig(h) <= 0.0 {
                return Err(Error::NotPositive);
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> Result<Vec<CMat>> {
        self.0.iter().map(linalg::metric_frame).collect()
    }

    pub fn inverses(&self) -> Result<Vec<CMat>> {
        self.0.iter().map(linalg::inv).collect()
    }

    /// `h = K^{-1} H` per site.
    pub fn relative_to(&self, k: &MetricField) -> Result<EndoField> {
        Ok(EndoField(
            self.0
                .iter()
                .zip(&k.0)
                .map(|(h, k)| Ok(linalg::inv(k)? * h))
                .collect::<Result<_>>()?,
        ))
    }

    pub fn scaled(&self, c: f64) -> Self {
        MetricField(self.0.iter().map(|h| h.scale(c)).collect())
    }
}

impl EndoField {
    pub fn zeros(n: usize, r: usize) -> Self {
        EndoField(vec![linalg::zeros(r); n])
    }

    pub fn sup_norm(&self) -> f64 {
        self.0.iter().map(linalg::frob).fold(0.0, f64::max)
    }

    pub fn trace(&self) -> Vec<f64> {
        self.0.iter().map(|m| m.trace().re).collect()
    }
}

impl OneForm {
    pub fn zeros(n_edges: usize, r: usize) -> Self {
        OneForm(vec![linalg::zeros(r); n_edges])
    }

    pub fn sup_norm(&self) -> f64 {
        self.0.iter().map(linalg::frob).fold(0.0, f64::max)
    }
}

fn check_sites(dom: &LatticeDomain, n: usize) -> Result<()> {
    if n != dom.n_sites() {
        return Err(Error::SizeMismatch { expected: dom.n_sites(), got: n });
    }
    Ok(())
}

fn check_edges(dom: &LatticeDomain, n: usize) -> Result<()> {
    if n != dom.edges.len() {
        return Err(Error::SizeMismatch { expected: dom.edges.len(), got: n });
    }
    Ok(())
}

impl FlatConnection {
    /// Spread each generator evenly along its periodic axis using the
    /// principal logarithm.
    pub fn from_monodromy(dom: &LatticeDomain, generators: &[CMat]) -> Result<Self> {
        let logs = generators
            .iter()
            .map(linalg::logm)
            .collect::<Result<Vec<_>>>()?;
        Self::from_logarithms(dom, generators, &logs)
    }

    /// As `from_monodromy`, with caller-chosen logarithms of the generators.
    pub fn from_logarithms(dom: &LatticeDomain, generators: &[CMat], logs: &[CMat]) -> Result<Self> {
        let loops = dom.kind.loop_count();
        if generators.len() != loops || logs.len() != loops {
            return Err(Error::GeneratorCount { expected: loops, got: generators.len() });
        }
        let rank = generators.first().map_or(1, |m| m.nrows());
        for (m, l) in generators.iter().zip(logs) {
            if m.nrows() != rank || m.ncols() != rank || l.nrows() != rank {
                return Err(Error::SizeMismatch { expected: rank, got: m.nrows() });
            }
            if linalg::inv(m).is_err() {
                return Err(Error::Singular);
            }
            let back = linalg::expm(l);
            if linalg::frob(&(back - m)) > 1e-9 * linalg::frob(m) {
                return Err(Error::Precondition("supplied logarithm does not exponentiate to its generator".into()));
            }
        }
        if loops == 2 {
            let (a, b) = (&generators[0], &generators[1]);
            let res = linalg::frob(&linalg::commutator(a, b));
            if res > 1e-10 * (1.0 + linalg::frob(a) * linalg::frob(b)) {
                return Err(Error::NonCommuting(res));
            }
            let lres = linalg::frob(&linalg::commutator(&logs[0], &logs[1]));
            if lres > 1e-9 * (1.0 + linalg::frob(&logs[0]) * linalg::frob(&logs[1])) {
                return Err(Error::NonCommuting(lres));
            }
        }
        let periodic_axes: Vec<usize> = (0..dom.dim()).filter(|&a| dom.periodic[a]).collect();
        let per_axis: Vec<CMat> = (0..dom.dim())
            .map(|a| match periodic_axes.iter().position(|&p| p == a) {
                Some(i) => linalg::expm(&logs[i].scale(dom.spacing[a] / dom.lengths[a])),
                None => linalg::identity(rank),
            })
            .collect();
        let per_axis_inv = per_axis.iter().map(linalg::inv).collect::<Result<Vec<_>>>()?;
        let transport = dom.edges.iter().map(|e| per_axis[e.axis].clone()).collect();
        let inverse = dom.edges.iter().map(|e| per_axis_inv[e.axis].clone()).collect();
        Ok(FlatConnection { rank, transport, inverse, generators: generators.to_vec() })
    }

    /// The trivial connection.
    pub fn trivial(dom: &LatticeDomain, rank: usize) -> Self {
        let id = linalg::identity(rank);
        FlatConnection {
            rank,
            transport: vec![id.clone(); dom.edges.len()],
            inverse: vec![id.clone(); dom.edges.len()],
            generators: vec![id; dom.kind.loop_count()],
        }
    }

    /// Transport along an outgoing direction (maps the fiber at `x` to the
    /// neighbour's fiber).
    pub fn out_transport(&self, o: OutEdge) -> &CMat {
        if o.forward {
            &self.transport[o.edge]
        } else {
            &self.inverse[o.edge]
        }
    }

    pub fn out_inverse(&self, o: OutEdge) -> &CMat {
        if o.forward {
            &self.inverse[o.edge]
        } else {
            &self.transport[o.edge]
        }
    }

    /// Holonomy of the closed site path (consecutive sites must be lattice
    /// neighbours).
    pub fn path_holonomy(&self, dom: &LatticeDomain, path: &[usize]) -> Result<CMat> {
        if path.len() < 2 || path.first() != path.last() {
            return Err(Error::OpenPath);
        }
        let mut hol = linalg::identity(self.rank);
        for w in path.windows(2) {
            let o = dom.out[w[0]]
                .iter()
                .find(|&&o| dom.other(w[0], o) == w[1])
                .ok_or(Error::OpenPath)?;
            hol = self.out_transport(*o) * hol;
        }
        Ok(hol)
    }

    /// Holonomy of every elementary plaquette `(x, x+e0, x+e0+e1, x+e1)`.
    pub fn plaquettes(&self, dom: &LatticeDomain) -> Vec<(usize, CMat)> {
        if dom.dim() < 2 {
            return Vec::new();
        }
        let mut fwd = vec![[None, None]; dom.n_sites()];
        for (i, e) in dom.edges.iter().enumerate() {
            fwd[e.tail][e.axis] = Some(i);
        }
        let mut out = Vec::new();
        for x in 0..dom.n_sites() {
            let (Some(a), Some(b)) = (fwd[x][0], fwd[x][1]) else { continue };
            let xa = dom.edges[a].head;
            let xb = dom.edges[b].head;
            let (Some(c), Some(d)) = (fwd[xa][1], fwd[xb][0]) else { continue };
            let hol = &self.inverse[b] * &self.inverse[d] * &self.transport[c] * &self.transport[a];
            out.push((x, hol));
        }
        out
    }

    /// Largest deviation of a plaquette holonomy from the identity, or of a
    /// designated loop holonomy from its prescribed generator.
    pub fn flatness_residual(&self, dom: &LatticeDomain) -> f64 {
        let id = linalg::identity(self.rank);
        let mut worst = self
            .plaquettes(dom)
            .iter()
            .map(|(_, p)| linalg::spectral_norm(&(p - &id)))
            .fold(0.0, f64::max);
        let periodic: Vec<usize> = (0..dom.dim()).filter(|&a| dom.periodic[a]).collect();
        for (i, &a) in periodic.iter().enumerate() {
            if let (Ok(path), Some(gen)) = (dom.axis_loop(a, 0), self.generators.get(i)) {
                if let Ok(hol) = self.path_holonomy(dom, &path) {
                    worst = worst.max(linalg::spectral_norm(&(hol - gen)));
                }
            }
        }
        worst
    }

    /// Holonomies of the periodic axis loops through site 0.
    pub fn loop_holonomies(&self, dom: &LatticeDomain) -> Result<Vec<CMat>> {
        (0..dom.dim())
            .filter(|&a| dom.periodic[a])
            .map(|a| self.path_holonomy(dom, &dom.axis_loop(a, 0)?))
            .collect()
    }

    /// Change of frame by per-site `g(x)`: `U_e -> g(y) U_e g(x)^{-1}`.
    pub fn gauge(&self, dom: &LatticeDomain, g: &[CMat]) -> Result<Self> {
        check_sites(dom, g.len())?;
        let gi = g.iter().map(linalg::inv).collect::<Result<Vec<_>>>()?;
        let transport: Vec<CMat> = dom
            .edges
            .iter()
            .zip(&self.transport)
            .map(|(e, u)| &g[e.head] * u * &gi[e.tail])
            .collect();
        let inverse = transport.iter().map(linalg::inv).collect::<Result<Vec<_>>>()?;
        let generators = self.generators.iter().map(|m| &g[0] * m * &gi[0]).collect();
        Ok(FlatConnection { rank: self.rank, transport, inverse, generators })
    }
}

/// Metric in the gauge-transformed frames: `H -> g^{-†} H g^{-1}`.
pub fn gauge_metric(h: &MetricField, g: &[CMat]) -> Result<MetricField> {
    Ok(MetricField(
        h.0.iter()
            .zip(g)
            .map(|(h, g)| {
                let gi = linalg::inv(g)?;
                Ok(linalg::hermitize(&(gi.adjoint() * h * gi)))
            })
            .collect::<Result<_>>()?,
    ))
}

/// Gauge-covariant difference of an endomorphism field.
pub fn covariant_d(dom: &LatticeDomain, conn: &FlatConnection, field: &EndoField) -> Result<OneForm> {
    check_sites(dom, field.0.len())?;
    Ok(OneForm(
        dom.edges
            .iter()
            .enumerate()
            .map(|(i, e)| {
                (&conn.inverse[i] * &field.0[e.head] * &conn.transport[i] - &field.0[e.tail])
                    .unscale(e.spacing)
            })
            .collect(),
    ))
}

/// Gauge-covariant difference of a section, one vector per stored edge.
pub fn covariant_d_section(
    dom: &LatticeDomain,
    conn: &FlatConnection,
    field: &SectionField,
) -> Result<Vec<DVector<Complex64>>> {
    check_sites(dom, field.0.len())?;
    Ok(dom
        .edges
        .iter()
        .enumerate()
        .map(|(i, e)| (&conn.inverse[i] * &field.0[e.head] - &field.0[e.tail]).unscale(e.spacing))
        .collect())
}

/// Edge value of `psi` in the orthonormal frame at `x`, for the outgoing
/// direction with transport `u` (fiber `x` -> fiber `y`).
pub(crate) fn frame_psi(g_x: &CMat, g_y: &CMat, u: &CMat, spacing: f64) -> CMat {
    let b = linalg::right_div_upper(&(g_y * u), g_x);
    let ata = linalg::hermitize(&(b.adjoint() * b));
    linalg::herm_fn(&ata, f64::ln).unscale(-2.0 * spacing)
}

/// `D = D_H + psi_H` edge by edge.
pub fn split_metric(dom: &LatticeDomain, conn: &FlatConnection, h: &MetricField) -> Result<Split> {
    check_sites(dom, h.0.len())?;
    let g = h.frames()?;
    let (psi, mt): (Vec<CMat>, Vec<CMat>) = dom
        .edges
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let u = &conn.transport[i];
            let fpsi = frame_psi(&g[e.tail], &g[e.head], u, e.spacing);
            let psi = linalg::left_div_upper(&g[e.tail], &(&fpsi * &g[e.tail]));
            let half = linalg::herm_exp(&fpsi.scale(e.spacing));
            let v = u * linalg::left_div_upper(&g[e.tail], &(half * &g[e.tail]));
            (psi, v)
        })
        .unzip();
    Ok(Split { psi: OneForm(psi), metric_transport: mt })
}

/// Energy `||psi_H||^2_{L^2}` as a sum over stored edges.
pub fn energy(dom: &LatticeDomain, conn: &FlatConnection, h: &MetricField) -> Result<f64> {
    check_sites(dom, h.0.len())?;
    Ok(frame_energy(dom, conn, &h.frames()?))
}

pub(crate) fn frame_energy(dom: &LatticeDomain, conn: &FlatConnection, g: &[CMat]) -> f64 {
    let terms: Vec<f64> = dom
        .edges
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let p = frame_psi(&g[e.tail], &g[e.head], &conn.transport[i], e.spacing);
            e.weight * e.measure * linalg::frob(&p).powi(2)
        })
        .collect();
    terms.into_iter().collect::<linalg::KahanSum>().value()
}

/// `D_H^*` of a one-form: the exact adjoint of the `D_H` difference operator
/// for the pairings `sum_x vol tr(a b^{*H})` and `sum_e mu tr(a b^{*H})`.
pub fn codifferential(
    dom: &LatticeDomain,
    conn: &FlatConnection,
    h: &MetricField,
    omega: &OneForm,
) -> Result<EndoField> {
    check_edges(dom, omega.0.len())?;
    let split = split_metric(dom, conn, h)?;
    let vinv = split
        .metric_transport
        .iter()
        .map(linalg::inv)
        .collect::<Result<Vec<_>>>()?;
    let r = conn.rank;
    Ok(EndoField(
        (0..dom.n_sites())
            .map(|x| {
                let mut acc = linalg::zeros(r);
                for o in &dom.out[x] {
                    let e = &dom.edges[o.edge];
                    let w = e.weight * e.measure / e.spacing;
                    if o.forward {
                        acc -= omega.0[o.edge].scale(w);
                    } else {
                        let v = &split.metric_transport[o.edge];
                        acc += (v * &omega.0[o.edge] * &vinv[o.edge]).scale(w);
                    }
                }
                acc.unscale(dom.volume[x])
            })
            .collect(),
    ))
}

/// Tension `D_H^* psi_H` in the orthonormal frames of `g` (Hermitian values).
pub(crate) fn frame_tension(dom: &LatticeDomain, conn: &FlatConnection, g: &[CMat]) -> Vec<CMat> {
    let r = conn.rank;
    (0..dom.n_sites())
        .into_par_iter()
        .map(|x| {
            let mut acc = linalg::zeros(r);
            for &o in &dom.out[x] {
                let e = &dom.edges[o.edge];
                let y = dom.other(x, o);
                let p = frame_psi(&g[x], &g[y], conn.out_transport(o), e.spacing);
                acc -= p.scale(e.weight * e.measure / e.spacing);
            }
            linalg::hermitize(&acc.unscale(dom.volume[x]))
        })
        .collect()
}

/// `D_H^* psi_H`.
pub fn tension(
    dom: &LatticeDomain,
    conn: &FlatConnection,
    h: &MetricField,
    mode: TensionMode<'_>,
) -> Result<EndoField> {
    check_sites(dom, h.0.len())?;
    match mode {
        TensionMode::Direct => {
            let g = h.frames()?;
            let s = frame_tension(dom, conn, &g);
            Ok(EndoField(
                s.iter()
                    .zip(&g)
                    .map(|(s, g)| linalg::left_div_upper(g, &(s * g)))
                    .collect(),
            ))
        }
        TensionMode::ViaReference(k) => tension_via_reference(dom, conn, h, k),
    }
}

/// `D_K^* psi_K + 1/2 sum_i D_i(h^{-1} delta_{K,i} h)` with `h = K^{-1} H`, with
/// the stencil pulled into the frame of each site by the flat transport and
/// centred differences at edge midpoints.
fn tension_via_reference(
    dom: &LatticeDomain,
    conn: &FlatConnection,
    h: &MetricField,
    k: &MetricField,
) -> Result<EndoField> {
    check_sites(dom, k.0.len())?;
    k.validate()?;
    let tk = tension(dom, conn, k, TensionMode::Direct)?;
    let hrel = h.relative_to(k)?;
    let hinv = h.inverses()?;
    let r = conn.rank;
    let out = (0..dom.n_sites())
        .map(|x| {
            let mut acc = linalg::zeros(r);
            for &o in &dom.out[x] {
                let e = &dom.edges[o.edge];
                let y = dom.other(x, o);
                let u = conn.out_transport(o);
                let ui = conn.out_inverse(o);
                let ky = u.adjoint() * &k.0[y] * u;
                let hy = ui * &hrel.0[y] * u;
                // derivative in the outgoing direction, at the midpoint
                let dk = (&ky - &k.0[x]).unscale(e.spacing);
                let dh = (&hy - &hrel.0[x]).unscale(e.spacing);
                let km = (&ky + &k.0[x]).scale(0.5);
                let hm = (&hy + &hrel.0[x]).scale(0.5);
                let conn_k = linalg::inv(&km)? * dk;
                let xval = linalg::inv(&hm)? * (dh + linalg::commutator(&conn_k, &hm));
                acc += xval.scale(e.weight * e.measure / e.spacing);
            }
            let t = &tk.0[x] + acc.scale(0.5 / dom.volume[x]);
            Ok(linalg::h_hermitize(&t, &h.0[x], &hinv[x]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EndoField(out))
}

/// Common invariant subspaces of the loop holonomies at site 0 (rank <= 3),
/// spread over the lattice by parallel transport.
pub fn invariant_subbundles(
    dom: &LatticeDomain,
    conn: &FlatConnection,
    k: &MetricField,
) -> Result<Vec<SubBundleSpec>> {
    let r = conn.rank;
    if r > 3 {
        return Err(Error::RankTooLarge(r));
    }
    let hols = conn.loop_holonomies(dom)?;
    let mut cands: Vec<CMat> = Vec::new();
    for line in common_eigenlines(&hols, r)? {
        cands.push(line);
    }
    if r == 3 {
        let adj: Vec<CMat> = hols.iter().map(|m| m.adjoint()).collect();
        for w in common_eigenlines(&adj, r)? {
            cands.push(linalg::null_space(&w.adjoint(), 1e-10));
        }
    }
    let mut out: Vec<SubBundleSpec> = Vec::new();
    for c in cands {
        let spec = extend_subbundle(dom, conn, k, &c)?;
        let dup = out.iter().any(|s| {
            s.rank == spec.rank && linalg::frob(&(&s.proj[0] - &spec.proj[0])) < 1e-8
        });
        if !dup && spec.rank > 0 && spec.rank < r {
            out.push(spec);
        }
    }
    Ok(out)
}

/// Lines spanned by common eigenvectors of all matrices. Degenerate common
/// eigenspaces contribute an orthonormal basis of lines.
fn common_eigenlines(mats: &[CMat], r: usize) -> Result<Vec<CMat>> {
    if mats.is_empty() {
        return Ok((0..r)
            .map(|i| CMat::from_fn(r, 1, |j, _| linalg::c(if i == j { 1.0 } else { 0.0 })))
            .collect());
    }
    let spectra = mats.iter().map(linalg::eigenvalues).collect::<Result<Vec<_>>>()?;
    let mut combos: Vec<Vec<Complex64>> = vec![Vec::new()];
    for sp in &spectra {
        let mut next = Vec::new();
        for c in &combos {
            for &l in sp {
                let mut c2 = c.clone();
                c2.push(l);
                next.push(c2);
            }
        }
        combos = next;
    }
    let mut lines: Vec<CMat> = Vec::new();
    for combo in combos {
        let mut stacked = CMat::zeros(r * mats.len(), r);
        for (i, (m, &l)) in mats.iter().zip(&combo).enumerate() {
            let block = m - linalg::identity(r) * l;
            let scale = linalg::frob(m).max(1.0);
            stacked
                .view_mut((i * r, 0), (r, r))
                .copy_from(&block.unscale(scale));
        }
        let ns = linalg::null_space(&stacked, 1e-7);
        for j in 0..ns.ncols() {
            let v = ns.columns(j, 1).into_owned();
            let dup = lines.iter().any(|w| {
                let overlap = (w.adjoint() * &v)[(0, 0)].norm();
                (overlap - 1.0).abs() < 1e-8
            });
            if !dup {
                lines.push(v);
            }
        }
    }
    Ok(lines)
}

/// Spread a subspace given at site 0 over the lattice by parallel transport
/// along a spanning tree (axis 0 first within each row, then axis 1 from the
/// row start), and form the `K`-orthogonal projections.
pub fn extend_subbundle(
    dom: &LatticeDomain,
    conn: &FlatConnection,
    k: &MetricField,
    basis0: &CMat,
) -> Result<SubBundleSpec> {
    let n = dom.n_sites();
    let mut basis: Vec<Option<CMat>> = vec![None; n];
    basis[0] = Some(basis0.clone());
    // breadth-first over the fixed out-edge order keeps this deterministic
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(x) = queue.pop_front() {
        for &o in &dom.out[x] {
            let y = dom.other(x, o);
            if basis[y].is_none() {
                let b = conn.out_transport(o) * basis[x].as_ref().expect("visited");
                basis[y] = Some(orthonormal_columns(&b));
                queue.push_back(y);
            }
        }
    }
    let basis: Vec<CMat> = basis.into_iter().map(|b| b.expect("connected lattice")).collect();
    let proj = basis
        .iter()
        .zip(&k.0)
        .map(|(y, k)| k_projection(y, k))
        .collect::<Result<Vec<_>>>()?;
    let mut spec = SubBundleSpec { rank: basis0.ncols(), basis, proj, invariance_residual: 0.0 };
    spec.invariance_residual = invariance_residual(dom, conn, &spec);
    Ok(spec)
}

fn orthonormal_columns(b: &CMat) -> CMat {
    let qr = b.clone().qr();
    qr.q().columns(0, b.ncols()).into_owned()
}

/// `Y (Y^† K Y)^{-1} Y^† K`.
pub fn k_projection(y: &CMat, k: &CMat) -> Result<CMat> {
    let gram = y.adjoint() * k * y;
    Ok(y * linalg::inv(&gram)? * y.adjoint() * k)
}

/// `max_e ||(1 - pi(y)) U_e pi(x)||`: how far transport moves the subspace at
/// the tail out of the subspace at the head.
pub fn invariance_residual(dom: &LatticeDomain, conn: &FlatConnection, spec: &SubBundleSpec) -> f64 {
    let id = linalg::identity(conn.rank);
    dom.edges
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let fwd = (&id - &spec.proj[e.head]) * &conn.transport[i] * &spec.proj[e.tail];
            let bwd = (&id - &spec.proj[e.tail]) * &conn.inverse[i] * &spec.proj[e.head];
            linalg::spectral_norm(&fwd).max(linalg::spectral_norm(&bwd))
        })
        .fold(0.0, f64::max)
}

//! Degrees and stability, Donaldson's distance, the `Theta` functional
//! calculus, residuals of the metric-comparison identities, polystable
//! splittings and the first Kamber-Tondeur period.

use crate::bundle::{self, FlatConnection, MetricField, SubBundleSpec, TensionMode};
use crate::error::{Error, Result};
use crate::linalg::{self, CMat};
use crate::mesh::{LatticeDomain, OutEdge};

/// `tr(K^{-1} H) + tr(H^{-1} K) - 2r` at one site.
pub fn sigma_at(h: &CMat, k: &CMat) -> Result<f64> {
    let r = h.nrows() as f64;
    let a = (linalg::inv(k)? * h).trace().re;
    let b = (linalg::inv(h)? * k).trace().re;
    Ok((a + b - 2.0 * r).max(0.0))
}

/// Donaldson's distance per site and its supremum.
pub fn donaldson_distance(h: &MetricField, k: &MetricField) -> Result<(Vec<f64>, f64)> {
    if h.0.len() != k.0.len() {
        return Err(Error::SizeMismatch { expected: k.0.len(), got: h.0.len() });
    }
    if h.rank() != k.rank() {
        return Err(Error::SizeMismatch { expected: k.rank(), got: h.rank() });
    }
    let field = h.0.iter().zip(&k.0).map(|(h, k)| sigma_at(h, k)).collect::<Result<Vec<_>>>()?;
    let sup = field.iter().cloned().fold(0.0, f64::max);
    Ok((field, sup))
}

/// `g^{-†} H g^{-1}`: `K^{-1} H` in the orthonormal frame `g` of `K`.
pub fn metric_in_frame(h: &CMat, k_frame: &CMat) -> CMat {
    let a = linalg::right_div_upper(h, k_frame);
    linalg::hermitize(&linalg::right_div_upper(&a.adjoint(), k_frame))
}

/// Eigenvalues of `log(K^{-1} H)` at one site, given the frame of `K`.
pub fn relative_log_eigs(h: &CMat, k_frame: &CMat) -> Vec<f64> {
    let (vals, _) = linalg::herm_eig(&metric_in_frame(h, k_frame));
    vals.iter().map(|v| v.ln()).collect()
}

/// `A -> g A g^{-1}`: an endomorphism in the orthonormal frame of `g`.
fn to_frame(a: &CMat, g: &CMat) -> CMat {
    linalg::right_div_upper(&(g * a), g)
}

/// `-integrate(tr T_K)`, or for a sub-bundle the Chern-Weil form
/// `-integrate(tr(pi T_K)) - 1/2 ||D pi||^2_K`.
pub fn degree(dom: &LatticeDomain, conn: &FlatConnection, k: &MetricField, sub: Option<&SubBundleSpec>) -> Result<f64> {
    let t = bundle::tension(dom, conn, k, TensionMode::Direct)?;
    let Some(sub) = sub else {
        let tr: Vec<f64> = t.0.iter().map(|m| m.trace().re).collect();
        return Ok(-dom.integrate(&tr, None)?);
    };
    if sub.invariance_residual > 1e-6 {
        return Err(Error::NotInvariant(sub.invariance_residual));
    }
    let tr: Vec<f64> = t.0.iter().zip(&sub.proj).map(|(t, p)| (p * t).trace().re).collect();
    let bulk = dom.integrate(&tr, None)?;
    let dpi = bundle::covariant_d(dom, conn, &bundle::EndoField(sub.proj.clone()))?;
    let g = k.frames()?;
    let mut acc = linalg::KahanSum::default();
    for (i, e) in dom.edges.iter().enumerate() {
        acc.add(e.measure * linalg::frob(&to_frame(&dpi.0[i], &g[e.tail])).powi(2));
    }
    Ok(-bulk - 0.5 * acc.value())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StabilityVerdict {
    Stable,
    StrictlySemistable,
    Unstable,
}

impl StabilityVerdict {
    pub fn as_str(self) -> &'static str {
        match self {
            StabilityVerdict::Stable => "stable",
            StabilityVerdict::StrictlySemistable => "strictly semistable",
            StabilityVerdict::Unstable => "unstable",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubDegree {
    pub rank: usize,
    pub invariance_residual: f64,
    pub degree: f64,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub rank: usize,
    pub degree: f64,
    pub slope: f64,
    pub subs: Vec<SubDegree>,
    pub verdict: StabilityVerdict,
    /// Index into `subs` of the sub-bundle deciding the verdict.
    pub witness: Option<usize>,
    pub tolerance: f64,
}

impl StabilityReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("verdict: {}\n", self.verdict.as_str()));
        s.push_str(&format!("total: rank {} degree {:.12e} slope {:.12e}\n", self.rank, self.degree, self.slope));
        s.push_str(&format!("slope tolerance: {:e}\n", self.tolerance));
        s.push_str("relative to the enumerated invariant sub-bundles only\n");
        s.push_str("sub rank degree slope residual\n");
        for (i, d) in self.subs.iter().enumerate() {
            let mark = if Some(i) == self.witness { " *" } else { "" };
            s.push_str(&format!(
                "{} {} {:.12e} {:.12e} {:.3e}{}\n",
                i, d.rank, d.degree, d.slope, d.invariance_residual, mark
            ));
        }
        s
    }

    pub fn csv_rows(&self) -> String {
        let mut s = String::from("sub,rank,degree,slope,residual\n");
        for (i, d) in self.subs.iter().enumerate() {
            s.push_str(&format!("{},{},{:e},{:e},{:e}\n", i, d.rank, d.degree, d.slope, d.invariance_residual));
        }
        s
    }
}

/// Compare sub-bundle slopes with the total slope. Equal slopes within
/// `1e-8 (1 + |deg|)` count as strictly semistable.
pub fn stability_report(
    dom: &LatticeDomain,
    conn: &FlatConnection,
    k: &MetricField,
    subs: &[SubBundleSpec],
) -> Result<StabilityReport> {
    if subs.is_empty() {
        return Err(Error::Precondition("stability needs at least one sub-bundle".into()));
    }
    let deg = degree(dom, conn, k, None)?;
    let r = conn.rank;
    let slope = deg / r as f64;
    let tol = 1e-8 * (1.0 + deg.abs());
    let mut rows = Vec::new();
    for s in subs {
        let d = degree(dom, conn, k, Some(s))?;
        rows.push(SubDegree { rank: s.rank, invariance_residual: s.invariance_residual, degree: d, slope: d / s.rank as f64 });
    }
    let (imax, max) = rows
        .iter()
        .enumerate()
        .map(|(i, d)| (i, d.slope))
        .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let verdict = if max > slope + tol {
        StabilityVerdict::Unstable
    } else if max >= slope - tol {
        StabilityVerdict::StrictlySemistable
    } else {
        StabilityVerdict::Stable
    };
    Ok(StabilityReport { rank: r, degree: deg, slope, subs: rows, verdict, witness: Some(imax), tolerance: tol })
}

/// `(e^{y-x} - 1) / (y - x)`, with its Taylor series near the diagonal.
pub fn theta(x: f64, y: f64) -> f64 {
    let d = y - x;
    if d.abs() < 1e-7 {
        1.0 + d / 2.0 + d * d / 6.0
    } else {
        d.exp_m1() / d
    }
}

pub enum Calculus<'a> {
    /// `rho[s] = sum rho(l_a) e_a (x) e^a`.
    Rho(&'a dyn Fn(f64) -> f64),
    /// `Theta[s](chi)`: entry `(a, b)` in the eigenbasis of `s` scaled by
    /// `Theta(l_a, l_b)`.
    Theta(&'a dyn Fn(f64, f64) -> f64),
}

/// Functional calculus of a `K`-self-adjoint `s`, in a `K`-orthonormal
/// eigenbasis.
pub fn theta_apply(s: &CMat, chi: &CMat, k: &CMat, calc: Calculus<'_>) -> Result<CMat> {
    let g = linalg::metric_frame(k)?;
    let st = to_frame(s, &g);
    let dev = linalg::frob(&(&st - st.adjoint()));
    if dev > 1e-8 * (1.0 + linalg::frob(&st)) {
        return Err(Error::NotHermitian(dev));
    }
    let out = theta_in_frame(&linalg::hermitize(&st), &to_frame(chi, &g), calc);
    Ok(linalg::left_div_upper(&g, &(out * &g)))
}

fn theta_in_frame(s: &CMat, chi: &CMat, calc: Calculus<'_>) -> CMat {
    let r = s.nrows();
    let (vals, v) = linalg::herm_eig(s);
    let mut c = match calc {
        Calculus::Rho(_) => linalg::zeros(r),
        Calculus::Theta(_) => v.adjoint() * chi * &v,
    };
    for a in 0..r {
        for b in 0..r {
            match calc {
                Calculus::Rho(f) => {
                    if a == b {
                        c[(a, a)] = linalg::c(f(vals[a]));
                    }
                }
                Calculus::Theta(f) => c[(a, b)] *= f(vals[a], vals[b]),
            }
        }
    }
    &v * c * v.adjoint()
}

#[derive(Debug, Clone)]
pub struct IdentityResiduals {
    /// `(T_H - T_K, h) - (1/2 Lap tr h - 1/2 |h^{-1/2} delta_K h|^2)` per site.
    pub trace_identity_field: Vec<f64>,
    /// `int (T_H - T_K, s) + 1/2 int (Theta[s](delta_K s), delta_K s)`.
    pub key_identity_gap: f64,
    /// The two integrals of the key identity.
    pub key_lhs: f64,
    pub key_rhs: f64,
}

/// Per out-direction data in `K`-orthonormal frames: `delta_K` pulls an
/// endomorphism at the neighbour back by `A -> B^† A B^{-†}`.
struct KFrames {
    g: Vec<CMat>,
}

impl KFrames {
    fn pull(&self, conn: &FlatConnection, dom: &LatticeDomain, x: usize, o: OutEdge, a_y: &CMat) -> Result<CMat> {
        let y = dom.other(x, o);
        let b = linalg::right_div_upper(&(&self.g[y] * conn.out_transport(o)), &self.g[x]);
        let bi = linalg::inv(&b)?;
        Ok(b.adjoint() * a_y * bi.adjoint())
    }
}

pub fn identity_residuals(
    dom: &LatticeDomain,
    conn: &FlatConnection,
    h: &MetricField,
    k: &MetricField,
    s_boundary_zero: bool,
) -> Result<IdentityResiduals> {
    let kf = KFrames { g: k.frames()? };
    let th = bundle::tension(dom, conn, h, TensionMode::Direct)?;
    let tk = bundle::tension(dom, conn, k, TensionMode::Direct)?;
    let n = dom.n_sites();
    // h and s = log h in K-orthonormal frames
    let hf: Vec<CMat> = (0..n).map(|x| metric_in_frame(&h.0[x], &kf.g[x])).collect();
    for m in &hf {
        if linalg::min_eig(m) <= 0.0 {
            return Err(Error::NotPositive);
        }
    }
    let sf: Vec<CMat> = hf.iter().map(|m| linalg::herm_fn(m, f64::ln)).collect();
    if s_boundary_zero && dom.has_boundary() {
        let worst = (0..n).filter(|&x| dom.boundary[x]).map(|x| linalg::frob(&sf[x])).fold(0.0, f64::max);
        if worst > 1e-10 {
            return Err(Error::Precondition(format!("s does not vanish on the boundary ({worst:e})")));
        }
    }
    let trh: Vec<f64> = hf.iter().map(|m| m.trace().re).collect();
    let lap = dom.laplacian(&trh)?;
    let mut field = Vec::with_capacity(n);
    let mut lhs = linalg::KahanSum::default();
    let mut rhs = linalg::KahanSum::default();
    for x in 0..n {
        let diff = to_frame(&(&th.0[x] - &tk.0[x]), &kf.g[x]);
        let hinv = linalg::inv(&hf[x])?;
        let mut sq = 0.0;
        let mut theta_sum = 0.0;
        for &o in &dom.out[x] {
            let e = &dom.edges[o.edge];
            let y = dom.other(x, o);
            let dh = (kf.pull(conn, dom, x, o, &hf[y])? - &hf[x]).unscale(e.spacing);
            sq += 0.5 * e.measure / dom.volume[x] * (&hinv * &dh * dh.adjoint()).trace().re;
            let ds = (kf.pull(conn, dom, x, o, &sf[y])? - &sf[x]).unscale(e.spacing);
            let th_ds = theta_in_frame(&sf[x], &ds, Calculus::Theta(&theta));
            theta_sum += 0.5 * e.measure * linalg::re_inner(&th_ds, &ds);
        }
        let l = linalg::re_inner(&diff, &hf[x]);
        field.push(l - (0.5 * lap[x] - 0.5 * sq));
        lhs.add(dom.volume[x] * linalg::re_inner(&diff, &sf[x]));
        rhs.add(-0.5 * theta_sum);
    }
    Ok(IdentityResiduals {
        trace_identity_field: field,
        key_identity_gap: lhs.value() - rhs.value(),
        key_lhs: lhs.value(),
        key_rhs: rhs.value(),
    })
}

/// If `H^{-1} H_other` is parallel, its eigenbundles (eigenvalues closer
/// than `1e-6` merged), each with its `H`-orthogonal spectral projection.
pub fn polystable_split(
    dom: &LatticeDomain,
    conn: &FlatConnection,
    h: &MetricField,
    h_other: &MetricField,
) -> Result<Option<Vec<SubBundleSpec>>> {
    let rel = h_other.relative_to(h)?;
    let scale = rel.sup_norm().max(1.0);
    let d = bundle::covariant_d(dom, conn, &rel)?;
    if d.sup_norm() > 1e-8 * scale / dom.spacing.iter().cloned().fold(f64::INFINITY, f64::min) {
        return Ok(None);
    }
    let g = h.frames()?;
    let n = dom.n_sites();
    let mut eig: Vec<(Vec<f64>, CMat)> = Vec::with_capacity(n);
    for x in 0..n {
        eig.push(linalg::herm_eig(&linalg::hermitize(&to_frame(&rel.0[x], &g[x]))));
    }
    let vals0 = &eig[0].0;
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for (i, &v) in vals0.iter().enumerate() {
        match clusters.last_mut() {
            Some(c) if (v - vals0[*c.last().expect("nonempty")]).abs() <= 1e-6 * v.abs().max(1.0) => c.push(i),
            _ => clusters.push(vec![i]),
        }
    }
    let mut out = Vec::new();
    for c in &clusters {
        let mut basis = Vec::with_capacity(n);
        let mut proj = Vec::with_capacity(n);
        for x in 0..n {
            let v = &eig[x].1;
            let cols = CMat::from_fn(v.nrows(), c.len(), |i, j| v[(i, c[j])]);
            let p = &cols * cols.adjoint();
            // back to the original frame: g^{-1} P g, and columns g^{-1} V
            proj.push(linalg::left_div_upper(&g[x], &(p * &g[x])));
            basis.push(linalg::left_div_upper(&g[x], &cols));
        }
        let mut spec = SubBundleSpec { rank: c.len(), basis, proj, invariance_residual: 0.0 };
        spec.invariance_residual = bundle::invariance_residual(dom, conn, &spec);
        out.push(spec);
    }
    Ok(Some(out))
}

/// `sum spacing * tr psi_H` along a closed site path.
pub fn alpha1_period(dom: &LatticeDomain, conn: &FlatConnection, h: &MetricField, path: &[usize]) -> Result<f64> {
    if path.len() < 2 || path.first() != path.last() {
        return Err(Error::OpenPath);
    }
    let split = bundle::split_metric(dom, conn, h)?;
    let mut acc = linalg::KahanSum::default();
    for w in path.windows(2) {
        let o = dom.out[w[0]]
            .iter()
            .find(|&&o| dom.other(w[0], o) == w[1])
            .ok_or(Error::OpenPath)?;
        let v = dom.edges[o.edge].spacing * split.psi.0[o.edge].trace().re;
        acc.add(if o.forward { v } else { -v });
    }
    Ok(acc.value())
}

/// Site values of `psi_i` (centred) and `|psi|^2`, in `H`-orthonormal frames.
fn site_psi(dom: &LatticeDomain, conn: &FlatConnection, h: &MetricField) -> Result<(Vec<Vec<CMat>>, Vec<f64>)> {
    let g = h.frames()?;
    let r = conn.rank;
    let mut comps = vec![vec![linalg::zeros(r); dom.dim()]; dom.n_sites()];
    let mut counts = vec![vec![0usize; dom.dim()]; dom.n_sites()];
    for x in 0..dom.n_sites() {
        for &o in &dom.out[x] {
            let e = &dom.edges[o.edge];
            let y = dom.other(x, o);
            let p = bundle::frame_psi(&g[x], &g[y], conn.out_transport(o), e.spacing);
            let sign = if o.forward { 1.0 } else { -1.0 };
            comps[x][e.axis] += p.scale(sign);
            counts[x][e.axis] += 1;
        }
    }
    let mut sq = Vec::with_capacity(dom.n_sites());
    for x in 0..dom.n_sites() {
        let mut s = 0.0;
        for a in 0..dom.dim() {
            if counts[x][a] > 0 {
                comps[x][a] = comps[x][a].unscale(counts[x][a] as f64);
            }
            s += linalg::frob(&comps[x][a]).powi(2);
        }
        sq.push(s);
    }
    Ok((comps, sq))
}

/// `sup |(d/dt - Lap)|psi|^2 + |[psi, psi]|^2 + 2 |nabla_H psi|^2|` over
/// interior sites, with the time derivative centred over three snapshots
/// spaced `dt` apart. `[psi, psi](e_i, e_j) = 2 [psi_i, psi_j]`.
pub fn bochner_residual(dom: &LatticeDomain, conn: &FlatConnection, snaps: &[MetricField], dt: f64) -> Result<f64> {
    if snaps.len() != 3 || snaps.iter().any(|s| s.0.len() != dom.n_sites()) {
        return Err(Error::Precondition("need three snapshots on the domain".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::Precondition("dt must be positive".into()));
    }
    let (_, sq0) = site_psi(dom, conn, &snaps[0])?;
    let (comps, sq1) = site_psi(dom, conn, &snaps[1])?;
    let (_, sq2) = site_psi(dom, conn, &snaps[2])?;
    let lap = dom.laplacian(&sq1)?;
    let g = snaps[1].frames()?;
    let mut worst = 0.0_f64;
    for x in 0..dom.n_sites() {
        if dom.boundary[x] {
            continue;
        }
        let dtf = (sq2[x] - sq0[x]) / (2.0 * dt);
        // covariant derivative of psi_j along axis i: centred difference
        // with the metric transport, which is `B exp(h Psi)` in frames
        let mut grad = 0.0;
        for i in 0..dom.dim() {
            let mut fwd = None;
            let mut bwd = None;
            for &o in &dom.out[x] {
                let e = &dom.edges[o.edge];
                if e.axis != i {
                    continue;
                }
                let y = dom.other(x, o);
                let u = conn.out_transport(o);
                let b = linalg::right_div_upper(&(&g[y] * u), &g[x]);
                let p = bundle::frame_psi(&g[x], &g[y], u, e.spacing);
                let v = b * linalg::herm_exp(&p.scale(e.spacing));
                let vi = linalg::inv(&v)?;
                let pulled: Vec<CMat> = comps[y].iter().map(|c| &vi * c * &v).collect();
                if o.forward {
                    fwd = Some((pulled, e.spacing));
                } else {
                    bwd = Some((pulled, e.spacing));
                }
            }
            if let (Some((f, h1)), Some((b, h2))) = (fwd, bwd) {
                for j in 0..dom.dim() {
                    grad += linalg::frob(&(&f[j] - &b[j]).unscale(h1 + h2)).powi(2);
                }
            }
        }
        let mut comm = 0.0;
        for i in 0..dom.dim() {
            for j in (i + 1)..dom.dim() {
                comm += 4.0 * linalg::frob(&linalg::commutator(&comps[x][i], &comps[x][j])).powi(2);
            }
        }
        worst = worst.max((dtf - lap[x] + comm + 2.0 * grad).abs());
    }
    Ok(worst)
}

//! Higgs structures on two-dimensional lattice domains with the complex
//! coordinate `z = x + i y` (axis 0 is `x`). A Higgs structure is stored as
//! the unitary (Chern) transports of a reference metric, which fix `dbar_E`,
//! and a per-site coefficient `theta` of `dz`.
//!
//! For another metric `H' = H_0 h` the Chern connection is
//! `nabla + h^{-1} d_z h dz`, and the Hitchin-Simpson connection adds
//! `theta + theta^{*H'}`. Edge transports of a connection `nabla + B` are
//! `V exp(-h B)` with `B` taken at the edge midpoint.

use num_complex::Complex64;

use crate::analysis::{self, StabilityReport, StabilityVerdict, SubDegree};
use crate::bundle::{self, EndoField, FlatConnection, MetricField, OneForm, SubBundleSpec};
use crate::error::{Error, Result};
use crate::flow::{self, HistoryRow, SolveOptions, StepPolicy, Verdict};
use crate::linalg::{self, CMat, KahanSum, I};
use crate::mesh::{DomainKind, LatticeDomain};

#[derive(Debug, Clone)]
pub struct HiggsData {
    pub rank: usize,
    /// Metric whose Chern connection `chern` is.
    pub metric: MetricField,
    /// Unitary transports of the Chern connection, per stored edge.
    pub chern: Vec<CMat>,
    pub chern_inverse: Vec<CMat>,
    /// Coefficient of `dz` per site.
    pub theta: Vec<CMat>,
    /// `sup |dbar_E theta|` for `metric`.
    pub holomorphy_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitchinResiduals {
    pub holomorphy: f64,
    /// Largest `||P - 1||` over plaquettes of the Hitchin-Simpson connection.
    pub hs_curvature_sup: f64,
    /// Largest `||F_xy||` with `F_xy = (P - 1) / area`.
    pub lambda_f_sup: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParallelMode {
    FlatToHiggs,
    HiggsToFlat,
}

fn require_complex(dom: &LatticeDomain) -> Result<()> {
    if !dom.complex || dom.dim() != 2 {
        return Err(Error::NoComplexStructure);
    }
    Ok(())
}

/// Neighbours of a site along an axis: `(edge, site)` forwards and backwards.
#[derive(Debug, Clone, Copy, Default)]
struct AxisStencil {
    fwd: Option<(usize, usize)>,
    bwd: Option<(usize, usize)>,
}

fn stencils(dom: &LatticeDomain) -> Vec<[AxisStencil; 2]> {
    let mut out = vec![[AxisStencil::default(); 2]; dom.n_sites()];
    for x in 0..dom.n_sites() {
        for &o in &dom.out[x] {
            let e = &dom.edges[o.edge];
            let y = dom.other(x, o);
            if o.forward {
                out[x][e.axis].fwd = Some((o.edge, y));
            } else {
                out[x][e.axis].bwd = Some((o.edge, y));
            }
        }
    }
    out
}

/// Site-centred covariant derivatives of an endomorphism field along both
/// axes, one-sided where a neighbour is missing.
fn site_derivatives(dom: &LatticeDomain, v: &[CMat], vinv: &[CMat], f: &[CMat]) -> Vec<[CMat; 2]> {
    let st = stencils(dom);
    (0..dom.n_sites())
        .map(|x| {
            let d = |a: usize| {
                let s = st[x][a];
                let h = dom.spacing[a];
                let fwd = s.fwd.map(|(e, y)| &vinv[e] * &f[y] * &v[e]);
                let bwd = s.bwd.map(|(e, y)| &v[e] * &f[y] * &vinv[e]);
                match (fwd, bwd) {
                    (Some(p), Some(m)) => (p - m).unscale(2.0 * h),
                    (Some(p), None) => (p - &f[x]).unscale(h),
                    (None, Some(m)) => (&f[x] - m).unscale(h),
                    (None, None) => linalg::zeros(f[x].nrows()),
                }
            };
            [d(0), d(1)]
        })
        .collect()
}

/// Site components `(a_x, a_y)` of a one-form whose reverse-edge value is
/// `-X w X^{-1}` for the edge transport `X`.
fn site_components(dom: &LatticeDomain, x_t: &[CMat], x_inv: &[CMat], omega: &OneForm) -> Vec<[CMat; 2]> {
    let st = stencils(dom);
    (0..dom.n_sites())
        .map(|x| {
            let c = |a: usize| {
                let s = st[x][a];
                let fwd = s.fwd.map(|(e, _)| omega.0[e].clone());
                let bwd = s.bwd.map(|(e, _)| &x_t[e] * &omega.0[e] * &x_inv[e]);
                match (fwd, bwd) {
                    (Some(p), Some(m)) => (p + m).scale(0.5),
                    (Some(p), None) => p,
                    (None, Some(m)) => m,
                    (None, None) => linalg::zeros(omega.0[0].nrows()),
                }
            };
            [c(0), c(1)]
        })
        .collect()
}

/// `(1,0)` and `(0,1)` parts per site: `(a_x - i a_y)/2` and `(a_x + i a_y)/2`.
pub fn complex_split(dom: &LatticeDomain, conn: &FlatConnection, omega: &OneForm) -> Result<(Vec<CMat>, Vec<CMat>)> {
    require_complex(dom)?;
    if omega.0.len() != dom.edges.len() {
        return Err(Error::SizeMismatch { expected: dom.edges.len(), got: omega.0.len() });
    }
    let comps = site_components(dom, &conn.transport, &conn.inverse, omega);
    Ok(split_components(&comps))
}

fn split_components(comps: &[[CMat; 2]]) -> (Vec<CMat>, Vec<CMat>) {
    comps
        .iter()
        .map(|[ax, ay]| ((ax - ay * I).scale(0.5), (ax + ay * I).scale(0.5)))
        .unzip()
}

/// `(a_x, a_y)` back from the two parts.
pub fn reassemble(p10: &[CMat], p01: &[CMat]) -> Vec<[CMat; 2]> {
    p10.iter().zip(p01).map(|(a, b)| [a + b, (a - b) * I]).collect()
}

fn dbar(d: &[CMat; 2]) -> CMat {
    (&d[0] + &d[1] * I).scale(0.5)
}

/// `H`-norm of an endomorphism: Frobenius norm in an orthonormal frame.
fn h_norm(a: &CMat, g: &CMat) -> f64 {
    linalg::frob(&linalg::right_div_upper(&(g * a), g))
}

fn holomorphy(dom: &LatticeDomain, v: &[CMat], vinv: &[CMat], theta: &[CMat], frames: &[CMat]) -> f64 {
    site_derivatives(dom, v, vinv, theta)
        .iter()
        .zip(frames)
        .map(|(d, g)| h_norm(&dbar(d), g))
        .fold(0.0, f64::max)
}

/// Higgs structure `(D_H^{0,1}, psi_H^{perp,1,0})` of a flat bundle with a
/// harmonic or Poisson metric: requires the trace-free tension below
/// `10 tol`.
pub fn higgs_from_harmonic(dom: &LatticeDomain, conn: &FlatConnection, h: &MetricField, tol: f64) -> Result<HiggsData> {
    require_complex(dom)?;
    let t = bundle::tension(dom, conn, h, bundle::TensionMode::Direct)?;
    let g = h.frames()?;
    let worst = t
        .0
        .iter()
        .zip(&g)
        .map(|(t, g)| h_norm(&linalg::trace_free(t), g))
        .fold(0.0, f64::max);
    if worst > 10.0 * tol {
        return Err(Error::Precondition(format!("metric is not harmonic: trace-free tension {worst:e}")));
    }
    let split = bundle::split_metric(dom, conn, h)?;
    let vinv = split.metric_transport.iter().map(linalg::inv).collect::<Result<Vec<_>>>()?;
    let psi_perp = OneForm(split.psi.0.iter().map(linalg::trace_free).collect());
    let comps = site_components(dom, &split.metric_transport, &vinv, &psi_perp);
    let (theta, _) = split_components(&comps);
    let hol = holomorphy(dom, &split.metric_transport, &vinv, &theta, &g);
    Ok(HiggsData {
        rank: conn.rank,
        metric: h.clone(),
        chern: split.metric_transport,
        chern_inverse: vinv,
        theta,
        holomorphy_residual: hol,
    })
}

impl HiggsData {
    fn check(&self, dom: &LatticeDomain, h: &MetricField) -> Result<()> {
        require_complex(dom)?;
        if self.chern.len() != dom.edges.len() || self.theta.len() != dom.n_sites() || h.0.len() != dom.n_sites() {
            return Err(Error::SizeMismatch { expected: dom.n_sites(), got: h.0.len() });
        }
        if h.rank() != self.rank {
            return Err(Error::SizeMismatch { expected: self.rank, got: h.rank() });
        }
        Ok(())
    }

    /// Chern transports for `h_new` together with its Higgs field adjoint.
    fn connection_terms(&self, dom: &LatticeDomain, h_new: &MetricField) -> Result<Vec<[CMat; 2]>> {
        let rel = h_new.relative_to(&self.metric)?;
        let drel = site_derivatives(dom, &self.chern, &self.chern_inverse, &rel.0);
        (0..dom.n_sites())
            .map(|x| {
                let hinv = linalg::inv(&rel.0[x])?;
                // h^{-1} d_z h, on d/dx and d/dy
                let dz = (&drel[x][0] - &drel[x][1] * I).scale(0.5);
                let gx = &hinv * dz;
                let hn_inv = linalg::inv(&h_new.0[x])?;
                let th = &self.theta[x];
                let ths = linalg::h_adjoint(th, &h_new.0[x], &hn_inv);
                let bx = &gx + th + &ths;
                let by = (&gx + th - &ths) * I;
                Ok([bx, by])
            })
            .collect()
    }

    /// Edge transports `V exp(-h B_e)` of the Hitchin-Simpson connection.
    pub fn hitchin_simpson(&self, dom: &LatticeDomain, h: &MetricField) -> Result<FlatConnection> {
        self.check(dom, h)?;
        let b = self.connection_terms(dom, h)?;
        let transport: Vec<CMat> = dom
            .edges
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let v = &self.chern[i];
                let vi = &self.chern_inverse[i];
                let mid = (&b[e.tail][e.axis] + vi * &b[e.head][e.axis] * v).scale(0.5);
                v * linalg::expm(&mid.scale(-e.spacing))
            })
            .collect();
        let inverse = transport.iter().map(linalg::inv).collect::<Result<Vec<_>>>()?;
        let mut c = FlatConnection { rank: self.rank, transport, inverse, generators: Vec::new() };
        c.generators = c.loop_holonomies(dom)?;
        Ok(c)
    }

    /// `sqrt(-1) Lambda F` of the Hitchin-Simpson connection of `h`, made
    /// `h`-self-adjoint, per site (zero where a site has no plaquette).
    pub fn contracted_curvature(&self, dom: &LatticeDomain, h: &MetricField) -> Result<EndoField> {
        let hs = self.hitchin_simpson(dom, h)?;
        contracted_curvature_of(dom, &hs, h)
    }
}

fn contracted_curvature_of(dom: &LatticeDomain, conn: &FlatConnection, h: &MetricField) -> Result<EndoField> {
    let area = dom.spacing[0] * dom.spacing[1];
    let mut out = vec![linalg::zeros(conn.rank); dom.n_sites()];
    for (x, p) in conn.plaquettes(dom) {
        let f = linalg::logm(&p)?.unscale(area);
        let hinv = linalg::inv(&h.0[x])?;
        // skew part for h, times sqrt(-1); the counterclockwise plaquette
        // is exp(-area F_xy) to leading order
        let skew = (&f - linalg::h_adjoint(&f, &h.0[x], &hinv)).scale(0.5);
        out[x] = skew * (-I);
    }
    Ok(EndoField(out))
}

pub fn hitchin_residuals(dom: &LatticeDomain, higgs: &HiggsData, h: &MetricField) -> Result<HitchinResiduals> {
    let hs = higgs.hitchin_simpson(dom, h)?;
    let g = h.frames()?;
    let b = higgs.connection_terms(dom, h)?;
    // Chern transports of h carry the holomorphy check
    let chern: Vec<CMat> = dom
        .edges
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let v = &higgs.chern[i];
            let vi = &higgs.chern_inverse[i];
            let strip = |x: usize, a: usize, m: &CMat| -> CMat {
                let th = &higgs.theta[x];
                let hi = linalg::inv(&h.0[x]).expect("validated metric");
                let ths = linalg::h_adjoint(th, &h.0[x], &hi);
                if a == 0 { m - th - ths } else { m - (th - ths) * I }
            };
            let mid = (strip(e.tail, e.axis, &b[e.tail][e.axis])
                + vi * strip(e.head, e.axis, &b[e.head][e.axis]) * v)
                .scale(0.5);
            v * linalg::expm(&mid.scale(-e.spacing))
        })
        .collect();
    let chern_inv = chern.iter().map(linalg::inv).collect::<Result<Vec<_>>>()?;
    let holo = holomorphy(dom, &chern, &chern_inv, &higgs.theta, &g);
    let id = linalg::identity(higgs.rank);
    let area = dom.spacing[0] * dom.spacing[1];
    let mut curv = 0.0_f64;
    let mut lam = 0.0_f64;
    for (_, p) in hs.plaquettes(dom) {
        let dev = linalg::spectral_norm(&(p - &id));
        curv = curv.max(dev);
        lam = lam.max(dev / area);
    }
    Ok(HitchinResiduals { holomorphy: holo, hs_curvature_sup: curv, lambda_f_sup: lam })
}

/// The Hitchin-Simpson connection as a flat connection, with its loop
/// holonomies recorded as generators.
pub fn flat_from_higgs(dom: &LatticeDomain, higgs: &HiggsData, h: &MetricField, tol: f64) -> Result<FlatConnection> {
    let res = hitchin_residuals(dom, higgs, h)?;
    if res.hs_curvature_sup > 10.0 * tol {
        return Err(Error::Precondition(format!(
            "Hitchin-Simpson connection is not flat: {:e}",
            res.hs_curvature_sup
        )));
    }
    higgs.hitchin_simpson(dom, h)
}

/// `sup ||(1 - pi) theta pi||` in the metric `k`.
pub fn theta_invariance_residual(higgs: &HiggsData, k: &MetricField, sub: &SubBundleSpec) -> Result<f64> {
    let id = linalg::identity(higgs.rank);
    let g = k.frames()?;
    Ok(higgs
        .theta
        .iter()
        .zip(&sub.proj)
        .zip(&g)
        .map(|((t, p), g)| h_norm(&((&id - p) * t * p), g))
        .fold(0.0, f64::max))
}

/// `int tr(pi sqrt(-1) Lambda F_K) - ||dbar pi||^2_K`, or the total degree
/// without a sub-bundle.
pub fn higgs_degree(dom: &LatticeDomain, higgs: &HiggsData, k: &MetricField, sub: Option<&SubBundleSpec>) -> Result<f64> {
    higgs.check(dom, k)?;
    let bare = HiggsData { theta: vec![linalg::zeros(higgs.rank); dom.n_sites()], ..higgs.clone() };
    let Some(sub) = sub else {
        // sum of plaquette phases of the determinant line, exact up to 2 pi k
        let chern = bare.hitchin_simpson(dom, k)?;
        let mut acc = KahanSum::default();
        for (_, p) in chern.plaquettes(dom) {
            acc.add(p.determinant().arg());
        }
        return Ok(acc.value());
    };
    let m = bare.contracted_curvature(dom, k)?;
    let tr: Vec<f64> = m.0.iter().zip(&sub.proj).map(|(a, p)| (p * a).trace().re).collect();
    let bulk = dom.integrate(&tr, None)?;
    let chern = bare.hitchin_simpson(dom, k)?;
    let d = site_derivatives(dom, &chern.transport, &chern.inverse, &sub.proj);
    let g = k.frames()?;
    let mut acc = KahanSum::default();
    for x in 0..dom.n_sites() {
        acc.add(dom.volume[x] * 2.0 * h_norm(&dbar(&d[x]), &g[x]).powi(2));
    }
    Ok(bulk - acc.value())
}

/// Slopes of `theta`-invariant sub-bundles against the total slope.
pub fn higgs_degree_stability(
    dom: &LatticeDomain,
    higgs: &HiggsData,
    k: &MetricField,
    subs: &[SubBundleSpec],
) -> Result<StabilityReport> {
    if subs.is_empty() {
        return Err(Error::Precondition("stability needs at least one sub-bundle".into()));
    }
    let deg = higgs_degree(dom, higgs, k, None)?;
    let slope = deg / higgs.rank as f64;
    let tol = 1e-8 * (1.0 + deg.abs());
    let mut rows = Vec::new();
    for s in subs {
        let res = theta_invariance_residual(higgs, k, s)?;
        if res > 1e-6 {
            return Err(Error::NotInvariant(res));
        }
        let d = higgs_degree(dom, higgs, k, Some(s))?;
        rows.push(SubDegree { rank: s.rank, invariance_residual: res, degree: d, slope: d / s.rank as f64 });
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
    Ok(StabilityReport { rank: higgs.rank, degree: deg, slope, subs: rows, verdict, witness: Some(imax), tolerance: tol })
}

#[derive(Debug, Clone)]
pub struct HermitianEinsteinReport {
    pub verdict: Verdict,
    pub h: MetricField,
    pub steps: usize,
    pub time: f64,
    /// `energy` holds `||(sqrt(-1) Lambda F)^perp||^2_{L^2}`.
    pub history: Vec<HistoryRow>,
    pub det_defect: f64,
}

/// Flow `H^{-1} dH/dt = -2 (sqrt(-1) Lambda F)^perp` on a torus, then fix
/// `det(K^{-1} H) = 1`.
pub fn hermitian_einstein_solve(
    dom: &LatticeDomain,
    higgs: &HiggsData,
    k: &MetricField,
    opts: &SolveOptions,
) -> Result<HermitianEinsteinReport> {
    higgs.check(dom, k)?;
    if dom.kind != DomainKind::Torus {
        return Err(Error::Domain("the Hermitian-Einstein flow runs on the torus".into()));
    }
    opts.validate(dom)?;
    let mut dt = opts.dt.unwrap_or_else(|| SolveOptions::default_dt(dom));
    let mut h = k.clone();
    let kf = k.frames()?;
    let mut history = Vec::new();
    let mut streak = 0usize;
    let mut diverging = 0usize;
    let mut steps = 0usize;
    let mut time = 0.0;
    let measure = |h: &MetricField| -> Result<(Vec<CMat>, f64, f64, f64, f64, f64)> {
        let m = higgs.contracted_curvature(dom, h)?;
        let g = h.frames()?;
        // orthonormal-frame values
        let mf: Vec<CMat> = m.0.iter().zip(&g).map(|(a, g)| linalg::hermitize(&linalg::right_div_upper(&(g * a), g))).collect();
        let mut l2 = KahanSum::default();
        let mut sup = 0.0_f64;
        let (mut ldmin, mut ldmax, mut logsup) = (f64::INFINITY, f64::NEG_INFINITY, 0.0_f64);
        for x in 0..dom.n_sites() {
            let tf = linalg::frob(&linalg::trace_free(&mf[x]));
            sup = sup.max(tf);
            l2.add(dom.volume[x] * tf * tf);
            let l = analysis::relative_log_eigs(&h.0[x], &kf[x]);
            let ld: f64 = l.iter().sum();
            ldmin = ldmin.min(ld);
            ldmax = ldmax.max(ld);
            logsup = logsup.max(l.iter().map(|v| v.abs()).fold(0.0, f64::max));
        }
        Ok((mf, l2.value(), sup, ldmin, ldmax, logsup))
    };
    let (mut mf, mut energy, mut sup, mut ldmin, mut ldmax, mut logsup) = measure(&h)?;
    let row = |step: usize, time: f64, dt: f64, energy: f64, sup: f64, ldmin: f64, ldmax: f64, h: &MetricField| -> Result<HistoryRow> {
        Ok(HistoryRow {
            step,
            time,
            dt,
            energy,
            residual_sup: sup,
            residual_l2: energy.sqrt(),
            tracefree_residual_sup: sup,
            logdet_min: ldmin,
            logdet_max: ldmax,
            sigma_to_reference: analysis::donaldson_distance(h, k)?.1,
        })
    };
    history.push(row(0, 0.0, dt, energy, sup, ldmin, ldmax, &h)?);
    let verdict = loop {
        if sup < opts.tol {
            break Verdict::Converged;
        }
        if logsup > opts.divergence_threshold {
            diverging += 1;
        } else {
            diverging = 0;
        }
        if diverging >= opts.divergence_patience {
            break Verdict::Diverged;
        }
        if steps >= opts.max_steps {
            break Verdict::MaxSteps;
        }
        let g = h.frames()?;
        let cand = MetricField(
            (0..dom.n_sites())
                .map(|x| {
                    let e = linalg::herm_exp(&linalg::trace_free(&mf[x]).scale(-dt));
                    let eg = e * &g[x];
                    linalg::hermitize(&(eg.adjoint() * eg))
                })
                .collect(),
        );
        let next = measure(&cand)?;
        let used = dt;
        if let StepPolicy::Adaptive { shrink, grow, grow_after } = opts.policy {
            if next.1 > energy + 1e-12 * (1.0 + energy) {
                dt *= shrink;
                streak = 0;
                if dt < 1e-300 {
                    return Err(Error::NoConvergence);
                }
                continue;
            }
            streak += 1;
            if streak >= grow_after {
                dt *= grow;
                streak = 0;
            }
        }
        h = cand;
        (mf, energy, sup, ldmin, ldmax, logsup) = next;
        steps += 1;
        time += used;
        history.push(row(steps, time, used, energy, sup, ldmin, ldmax, &h)?);
    };
    let h = if verdict == Verdict::Converged && opts.normalize_det { flow::normalize_det(&h, k)? } else { h };
    let det_defect = flow::det_defect(&h, k)?;
    Ok(HermitianEinsteinReport { verdict, h, steps, time, history, det_defect })
}

/// Target operator applied to an endomorphism field that is parallel for
/// the source operator.
///
/// `FlatToHiggs`: source `D`, target `D_H^{0,1} + [psi_H^{1,0}, .]`.
/// `HiggsToFlat`: source `dbar_E + [theta, .]`, target the Hitchin-Simpson
/// connection of `H`.
pub fn parallel_section_residual(
    dom: &LatticeDomain,
    conn: &FlatConnection,
    h: &MetricField,
    f: &EndoField,
    mode: ParallelMode,
    tol: f64,
) -> Result<f64> {
    require_complex(dom)?;
    let split = bundle::split_metric(dom, conn, h)?;
    let v = &split.metric_transport;
    let vinv = v.iter().map(linalg::inv).collect::<Result<Vec<_>>>()?;
    let g = h.frames()?;
    let comps = site_components(dom, v, &vinv, &split.psi);
    let (p10, p01) = split_components(&comps);
    let d = site_derivatives(dom, v, &vinv, &f.0);
    match mode {
        ParallelMode::FlatToHiggs => {
            let src = bundle::covariant_d(dom, conn, f)?.sup_norm();
            if src > tol {
                return Err(Error::Precondition(format!("section is not parallel: {src:e}")));
            }
            Ok((0..dom.n_sites())
                .map(|x| h_norm(&(dbar(&d[x]) + linalg::commutator(&p10[x], &f.0[x])), &g[x]))
                .fold(0.0, f64::max))
        }
        ParallelMode::HiggsToFlat => {
            let theta: Vec<CMat> = p10.iter().map(linalg::trace_free).collect();
            let src = (0..dom.n_sites())
                .map(|x| h_norm(&(dbar(&d[x]) + linalg::commutator(&theta[x], &f.0[x])), &g[x]))
                .fold(0.0, f64::max);
            if src > tol {
                return Err(Error::Precondition(format!("section is not holomorphic: {src:e}")));
            }
            let ths: Vec<CMat> = p01.iter().map(linalg::trace_free).collect();
            Ok((0..dom.n_sites())
                .map(|x| {
                    let phi_x = &theta[x] + &ths[x];
                    let phi_y = (&theta[x] - &ths[x]) * I;
                    let a = &d[x][0] + linalg::commutator(&phi_x, &f.0[x]);
                    let b = &d[x][1] + linalg::commutator(&phi_y, &f.0[x]);
                    h_norm(&a, &g[x]).max(h_norm(&b, &g[x]))
                })
                .fold(0.0, f64::max))
        }
    }
}

/// Direct sum of lattice line bundles on a torus with uniform curvature and
/// degrees `2 pi k` for the given `k`, with `theta = 0` and the identity
/// metric.
pub fn magnetic_higgs(dom: &LatticeDomain, fluxes: &[i64]) -> Result<HiggsData> {
    require_complex(dom)?;
    if dom.kind != DomainKind::Torus {
        return Err(Error::Domain("magnetic line bundles live on the torus".into()));
    }
    let (n0, n1) = (dom.sites[0], dom.sites[1]);
    let chern: Vec<CMat> = dom
        .edges
        .iter()
        .map(|e| {
            let m = dom.multi_index(e.tail);
            let diag: Vec<Complex64> = fluxes
                .iter()
                .map(|&k| {
                    let phi = std::f64::consts::TAU * k as f64 / (n0 * n1) as f64;
                    let t = match e.axis {
                        1 => phi * m[0] as f64,
                        _ if m[0] + 1 == n0 => -phi * (n0 * m[1]) as f64,
                        _ => 0.0,
                    };
                    Complex64::from_polar(1.0, t)
                })
                .collect();
            CMat::from_diagonal(&nalgebra::DVector::from_vec(diag))
        })
        .collect();
    let chern_inverse = chern.iter().map(|u| u.adjoint()).collect();
    let r = fluxes.len();
    Ok(HiggsData {
        rank: r,
        metric: MetricField::identity(dom.n_sites(), r),
        chern,
        chern_inverse,
        theta: vec![linalg::zeros(r); dom.n_sites()],
        holomorphy_residual: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{from_real_diag, from_rows};
    use crate::mesh::DomainOptions;

    fn torus(n: usize) -> LatticeDomain {
        LatticeDomain::build(DomainKind::Torus, &[n, n], &[1.0, 1.0], &DomainOptions::default()).unwrap()
    }

    fn bump(d: &LatticeDomain, x: usize) -> f64 {
        let c = d.coords(x);
        let tau = std::f64::consts::TAU;
        0.3 * (tau * c[0]).sin() + 0.2 * (tau * c[1]).cos()
    }

    #[test]
    fn split_reassembles() {
        let d = torus(6);
        let c = FlatConnection::trivial(&d, 2);
        let omega = OneForm(
            (0..d.edges.len())
                .map(|i| from_rows(&[&[i as f64, 1.0], &[0.5, -(i as f64)]]))
                .collect(),
        );
        let (p, q) = complex_split(&d, &c, &omega).unwrap();
        let back = reassemble(&p, &q);
        let direct = site_components(&d, &c.transport, &c.inverse, &omega);
        for (a, b) in back.iter().zip(&direct) {
            assert!(linalg::frob(&(&a[0] - &b[0])) < 1e-12);
            assert!(linalg::frob(&(&a[1] - &b[1])) < 1e-12);
        }
        let line = LatticeDomain::build(DomainKind::Circle, &[6], &[1.0], &DomainOptions::default()).unwrap();
        let cl = FlatConnection::trivial(&line, 1);
        assert!(matches!(
            complex_split(&line, &cl, &OneForm::zeros(6, 1)),
            Err(Error::NoComplexStructure)
        ));
    }

    #[test]
    fn conformal_curvature_is_half_laplacian() {
        let n = 32;
        let d = torus(n);
        let c = FlatConnection::trivial(&d, 1);
        let u: Vec<f64> = (0..d.n_sites()).map(|x| bump(&d, x)).collect();
        let h = MetricField(u.iter().map(|v| from_real_diag(&[v.exp()])).collect());
        let higgs = higgs_from_harmonic(&d, &c, &MetricField::identity(d.n_sites(), 1), 1e-10).unwrap();
        let m = higgs.contracted_curvature(&d, &h).unwrap();
        let lap = d.laplacian(&u).unwrap();
        // the plaquette at x sits at the centre of its four corners
        let corner = |x: usize, i: usize, j: usize| {
            let m = d.multi_index(x);
            lap[d.flat_index(&[(m[0] + i) % n, (m[1] + j) % n])]
        };
        let err = (0..d.n_sites())
            .map(|x| {
                let centre = 0.25 * (corner(x, 0, 0) + corner(x, 1, 0) + corner(x, 0, 1) + corner(x, 1, 1));
                (m.0[x][(0, 0)].re + 0.5 * centre).abs()
            })
            .fold(0.0, f64::max);
        let scale = lap.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        assert!(err < 0.01 * scale, "{err} {scale}");
        assert!(higgs_degree(&d, &higgs, &h, None).unwrap().abs() < 1e-10);
    }

    #[test]
    fn round_trip_recovers_holonomy() {
        let d = torus(12);
        let gens = [from_real_diag(&[2.0, 0.5]), from_real_diag(&[1.5, 1.0 / 1.5])];
        let c = FlatConnection::from_monodromy(&d, &gens).unwrap();
        let opts = SolveOptions { tol: 1e-10, ..SolveOptions::default() };
        let run = flow::solve_harmonic(&d, &c, &MetricField::identity(d.n_sites(), 2), &opts).unwrap();
        assert_eq!(run.verdict, Verdict::Converged);
        let higgs = higgs_from_harmonic(&d, &c, &run.h, 1e-9).unwrap();
        assert!(higgs.holomorphy_residual < 1e-8, "{}", higgs.holomorphy_residual);
        let res = hitchin_residuals(&d, &higgs, &run.h).unwrap();
        assert!(res.hs_curvature_sup < 1e-8, "{res:?}");
        let back = flat_from_higgs(&d, &higgs, &run.h, 1e-8).unwrap();
        for (a, b) in back.generators.iter().zip(&gens) {
            assert!(linalg::frob(&(a - b)) < 1e-8, "{a} {b}");
        }
    }

    #[test]
    fn flat_parallel_sections_stay_holomorphic() {
        let d = torus(10);
        let gens = [from_real_diag(&[2.0, 0.5]), from_real_diag(&[1.0, 1.0])];
        let c = FlatConnection::from_monodromy(&d, &gens).unwrap();
        let opts = SolveOptions { tol: 1e-11, ..SolveOptions::default() };
        let run = flow::solve_harmonic(&d, &c, &MetricField::identity(d.n_sites(), 2), &opts).unwrap();
        // diagonal endomorphisms commute with the diagonal transports
        let f = EndoField(vec![from_real_diag(&[1.0, -2.0]); d.n_sites()]);
        let r = parallel_section_residual(&d, &c, &run.h, &f, ParallelMode::FlatToHiggs, 1e-12).unwrap();
        assert!(r < 1e-8, "{r}");
        let r = parallel_section_residual(&d, &c, &run.h, &f, ParallelMode::HiggsToFlat, 1e-8).unwrap();
        assert!(r < 1e-8, "{r}");
    }

    #[test]
    fn magnetic_lines_have_integer_degree() {
        let d = torus(8);
        let higgs = magnetic_higgs(&d, &[1, -1]).unwrap();
        let k = MetricField::identity(d.n_sites(), 2);
        let hs = higgs.hitchin_simpson(&d, &k).unwrap();
        let phases: Vec<f64> = hs.plaquettes(&d).iter().map(|(_, p)| p[(0, 0)].arg()).collect();
        let spread = phases.iter().fold(0.0_f64, |a, p| a.max((p - phases[0]).abs()));
        assert!(spread < 1e-12, "{phases:?}");
        assert!(higgs_degree(&d, &higgs, &k, None).unwrap().abs() < 1e-12);
        let one = magnetic_higgs(&d, &[1]).unwrap();
        let deg = higgs_degree(&d, &one, &MetricField::identity(d.n_sites(), 1), None).unwrap();
        assert!((deg - std::f64::consts::TAU).abs() < 1e-9, "{deg}");
    }

    fn coordinate_line(d: &LatticeDomain, k: &MetricField, j: usize) -> SubBundleSpec {
        let basis: Vec<CMat> = (0..d.n_sites())
            .map(|_| CMat::from_fn(2, 1, |a, _| linalg::c(if a == j { 1.0 } else { 0.0 })))
            .collect();
        let proj = basis.iter().zip(&k.0).map(|(y, k)| bundle::k_projection(y, k).unwrap()).collect();
        SubBundleSpec { rank: 1, basis, proj, invariance_residual: 0.0 }
    }

    #[test]
    fn einstein_flow_fixed_points() {
        let d = torus(8);
        let k = MetricField::identity(d.n_sites(), 2);
        let c = FlatConnection::trivial(&d, 2);
        let higgs = higgs_from_harmonic(&d, &c, &k, 1e-10).unwrap();
        let run = hermitian_einstein_solve(&d, &higgs, &k, &SolveOptions::default()).unwrap();
        assert_eq!((run.verdict, run.steps), (Verdict::Converged, 0));

        let gens = [from_real_diag(&[2.0, 0.5]), linalg::identity(2)];
        let c = FlatConnection::from_monodromy(&d, &gens).unwrap();
        let opts = SolveOptions { tol: 1e-11, ..SolveOptions::default() };
        let p = flow::solve_poisson(&d, &c, &k, &opts).unwrap();
        let higgs = higgs_from_harmonic(&d, &c, &p.h, 1e-10).unwrap();
        let run = hermitian_einstein_solve(&d, &higgs, &p.h, &SolveOptions { tol: 1e-6, ..SolveOptions::default() }).unwrap();
        assert_eq!(run.verdict, Verdict::Converged);
        assert!(analysis::donaldson_distance(&run.h, &p.h).unwrap().1 < 1e-6);
    }

    #[test]
    fn destabilized_sum_diverges() {
        let d = torus(8);
        let k = MetricField::identity(d.n_sites(), 2);
        let higgs = magnetic_higgs(&d, &[1, -1]).unwrap();
        // the metric blows up as exp(4 pi t); a moderate threshold keeps the
        // frames well conditioned
        let opts = SolveOptions { divergence_threshold: 5.0, divergence_patience: 5, ..SolveOptions::default() };
        let run = hermitian_einstein_solve(&d, &higgs, &k, &opts).unwrap();
        assert_eq!(run.verdict, Verdict::Diverged);
        let rep = higgs_degree_stability(&d, &higgs, &k, &[coordinate_line(&d, &k, 0), coordinate_line(&d, &k, 1)]).unwrap();
        assert_eq!(rep.verdict, StabilityVerdict::Unstable);
        assert_eq!(rep.witness, Some(0));
        assert!((rep.subs[0].degree - std::f64::consts::TAU).abs() < 1e-6, "{:?}", rep.subs);
        assert!((rep.subs[0].degree + rep.subs[1].degree - rep.degree).abs() < 1e-8);
    }

    #[test]
    fn non_invariant_line_rejected() {
        let d = torus(6);
        let k = MetricField::identity(d.n_sites(), 2);
        let mut higgs = magnetic_higgs(&d, &[0, 0]).unwrap();
        for t in &mut higgs.theta {
            *t = from_rows(&[&[0.0, 0.0], &[1.0, 0.0]]);
        }
        assert!(matches!(
            higgs_degree_stability(&d, &higgs, &k, &[coordinate_line(&d, &k, 0)]),
            Err(Error::NotInvariant(_))
        ));
        let rep = higgs_degree_stability(&d, &higgs, &k, &[coordinate_line(&d, &k, 1)]).unwrap();
        assert_eq!(rep.verdict, StabilityVerdict::StrictlySemistable);
    }

    #[test]
    fn sub_degrees_match_flat_side() {
        let d = torus(12);
        let k = MetricField::identity(d.n_sites(), 2);
        let gens = [from_real_diag(&[2.0, 0.5]), from_real_diag(&[1.5, 1.0 / 1.5])];
        let c = FlatConnection::from_monodromy(&d, &gens).unwrap();
        let run = flow::solve_harmonic(&d, &c, &k, &SolveOptions { tol: 1e-10, ..SolveOptions::default() }).unwrap();
        let higgs = higgs_from_harmonic(&d, &c, &run.h, 1e-9).unwrap();
        let subs = bundle::invariant_subbundles(&d, &c, &run.h).unwrap();
        assert_eq!(subs.len(), 2);
        for s in &subs {
            let flat = analysis::degree(&d, &c, &run.h, Some(s)).unwrap();
            let hd = higgs_degree(&d, &higgs, &run.h, Some(s)).unwrap();
            assert!((flat - hd).abs() < 1e-6, "{flat} {hd}");
        }
    }

    #[test]
    fn theta_matches_rank_one_blocks() {
        let d = torus(10);
        let gens = [from_real_diag(&[2.0, 0.5]), linalg::identity(2)];
        let c = FlatConnection::from_monodromy(&d, &gens).unwrap();
        let k = MetricField::identity(d.n_sites(), 2);
        let run = flow::solve_harmonic(&d, &c, &k, &SolveOptions { tol: 1e-11, ..SolveOptions::default() }).unwrap();
        let higgs = higgs_from_harmonic(&d, &c, &run.h, 1e-10).unwrap();
        let want = 2f64.ln() / 2.0;
        for t in &higgs.theta {
            assert!((t[(0, 0)].norm() - want).abs() < 1e-8 && (t[(0, 0)] + t[(1, 1)]).norm() < 1e-10, "{t}");
            assert!(t[(0, 1)].norm() < 1e-10);
        }
    }

    #[test]
    fn unitary_data_returns_itself() {
        let d = torus(6);
        let t = 0.7_f64;
        let rot = from_rows(&[&[t.cos(), -t.sin()], &[t.sin(), t.cos()]]);
        let c = FlatConnection::from_monodromy(&d, &[rot, linalg::identity(2)]).unwrap();
        let k = MetricField::identity(d.n_sites(), 2);
        let higgs = higgs_from_harmonic(&d, &c, &k, 1e-12).unwrap();
        assert!(higgs.theta.iter().all(|t| linalg::frob(t) < 1e-14));
        let res = hitchin_residuals(&d, &higgs, &k).unwrap();
        assert!(res.holomorphy < 1e-10 && res.hs_curvature_sup < 1e-10 && res.lambda_f_sup < 1e-10);
        let back = flat_from_higgs(&d, &higgs, &k, 1e-12).unwrap();
        for (a, b) in back.transport.iter().zip(&c.transport) {
            assert!(linalg::frob(&(a - b)) < 1e-12);
        }
        assert!(higgs_degree(&d, &higgs, &k, None).unwrap().abs() < 1e-10);
    }
}

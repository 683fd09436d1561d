//! Metric heat flow `H^{-1} dH/dt = 2 D_H^* psi_H` with a multiplicative
//! exponential update, drivers for harmonic, Poisson, Dirichlet and exhaustion
//! problems, run histories and checkpoints.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rayon::prelude::*;

use crate::analysis;
use crate::bundle::{self, FlatConnection, MetricField};
use crate::error::{Error, Result};
use crate::linalg::{self, CMat, KahanSum};
use crate::mesh::LatticeDomain;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepPolicy {
    Fixed,
    Adaptive { grow: f64, shrink: f64, grow_after: usize },
}

impl Default for StepPolicy {
    fn default() -> Self {
        StepPolicy::Adaptive { grow: 1.2, shrink: 0.5, grow_after: 20 }
    }
}

#[derive(Debug, Clone, Default)]
pub enum Boundary {
    #[default]
    Free,
    /// Sites flagged in `fixed` are held at `data`.
    Dirichlet { fixed: Vec<bool>, data: MetricField },
}

impl Boundary {
    /// Hold the domain boundary at `k`.
    pub fn on_boundary(dom: &LatticeDomain, k: &MetricField) -> Self {
        Boundary::Dirichlet { fixed: dom.boundary.clone(), data: k.clone() }
    }

    fn fixed(&self, x: usize) -> bool {
        match self {
            Boundary::Free => false,
            Boundary::Dirichlet { fixed, .. } => fixed[x],
        }
    }
}

/// Which part of the tension drives the flow and decides convergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Harmonic,
    Poisson,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_steps: usize,
    /// Initial step; `None` means `0.2 * min(spacing)^2`.
    pub dt: Option<f64>,
    pub policy: StepPolicy,
    pub divergence_threshold: f64,
    pub divergence_patience: usize,
    pub boundary: Boundary,
    pub normalize_det: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-8,
            max_steps: 200_000,
            dt: None,
            policy: StepPolicy::default(),
            divergence_threshold: 50.0,
            divergence_patience: 100,
            boundary: Boundary::Free,
            normalize_det: true,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self, dom: &LatticeDomain) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Precondition("tolerance must be positive".into()));
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(Error::Precondition("divergence threshold must be positive".into()));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0) {
                return Err(Error::Precondition("dt must be positive".into()));
            }
        }
        if let StepPolicy::Adaptive { grow, shrink, .. } = self.policy {
            if !(grow >= 1.0) || !(shrink > 0.0 && shrink < 1.0) {
                return Err(Error::Precondition("adaptive factors need grow >= 1 and 0 < shrink < 1".into()));
            }
        }
        if let Boundary::Dirichlet { fixed, data } = &self.boundary {
            if fixed.len() != dom.n_sites() || data.0.len() != dom.n_sites() {
                return Err(Error::SizeMismatch { expected: dom.n_sites(), got: fixed.len() });
            }
            if !fixed.iter().any(|&f| f) {
                return Err(Error::Precondition("Dirichlet problem without fixed sites".into()));
            }
            if fixed.iter().all(|&f| f) {
                return Err(Error::Precondition("Dirichlet problem with no free sites".into()));
            }
            data.validate()?;
        }
        Ok(())
    }

    pub fn default_dt(dom: &LatticeDomain) -> f64 {
        0.2 * dom.spacing.iter().cloned().fold(f64::INFINITY, f64::min).powi(2)
    }
}

/// One accepted step of diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub time: f64,
    pub dt: f64,
    pub energy: f64,
    pub residual_sup: f64,
    pub residual_l2: f64,
    pub tracefree_residual_sup: f64,
    pub logdet_min: f64,
    pub logdet_max: f64,
    pub sigma_to_reference: f64,
}

pub const CSV_VERSION: &str = "# bundleflow run.csv v1";
pub const CSV_HEADER: &str = "step,time,dt,energy,residual_sup,residual_l2,tracefree_residual_sup,logdet_min,logdet_max,sigma_to_reference";

impl HistoryRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step,
            self.time,
            self.dt,
            self.energy,
            self.residual_sup,
            self.residual_l2,
            self.tracefree_residual_sup,
            self.logdet_min,
            self.logdet_max,
            self.sigma_to_reference
        )
    }
}

pub fn write_csv<W: Write>(mut w: W, rows: &[HistoryRow]) -> Result<()> {
    writeln!(w, "{CSV_VERSION}")?;
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv())?;
    }
    Ok(())
}

/// Flow state with cached per-step quantities of the current metric.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub step: usize,
    pub time: f64,
    pub dt: f64,
    pub h: MetricField,
    pub reference: MetricField,
    pub history: Vec<HistoryRow>,
    pub accepted_streak: usize,
    pub divergent_streak: usize,
    frames: Vec<CMat>,
    ref_frames: Vec<CMat>,
    /// Tension in the orthonormal frames of `h` (Hermitian).
    stension: Vec<CMat>,
    energy: f64,
}

/// Site diagnostics of the current state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Monitors {
    pub residual_sup: f64,
    pub residual_l2: f64,
    pub tracefree_residual_sup: f64,
    pub logdet_min: f64,
    pub logdet_max: f64,
    pub log_h_sup: f64,
    pub sigma_to_reference: f64,
}

impl FlowState {
    pub fn new(dom: &LatticeDomain, conn: &FlatConnection, h: MetricField, reference: MetricField, dt: f64) -> Result<Self> {
        if h.0.len() != dom.n_sites() || reference.0.len() != dom.n_sites() {
            return Err(Error::SizeMismatch { expected: dom.n_sites(), got: h.0.len() });
        }
        if h.rank() != conn.rank || reference.rank() != conn.rank {
            return Err(Error::SizeMismatch { expected: conn.rank, got: h.rank() });
        }
        h.validate()?;
        reference.validate()?;
        let frames = h.frames()?;
        let ref_frames = reference.frames()?;
        let stension = bundle::frame_tension(dom, conn, &frames);
        let energy = bundle::frame_energy(dom, conn, &frames);
        Ok(FlowState {
            step: 0,
            time: 0.0,
            dt,
            h,
            reference,
            history: Vec::new(),
            accepted_streak: 0,
            divergent_streak: 0,
            frames,
            ref_frames,
            stension,
            energy,
        })
    }

    pub fn energy(&self) -> f64 {
        self.energy
    }

    /// Tension `T = g^{-1} S g` of the current metric.
    pub fn tension(&self) -> bundle::EndoField {
        bundle::EndoField(
            self.stension
                .iter()
                .zip(&self.frames)
                .map(|(s, g)| linalg::left_div_upper(g, &(s * g)))
                .collect(),
        )
    }

    pub fn monitors(&self, dom: &LatticeDomain, boundary: &Boundary) -> Result<Monitors> {
        let n = dom.n_sites();
        let per_site: Vec<(f64, f64, f64, f64)> = (0..n)
            .into_par_iter()
            .map(|x| {
                let s = &self.stension[x];
                let full = linalg::frob(s);
                let tf = linalg::frob(&linalg::trace_free(s));
                let logs = analysis::relative_log_eigs(&self.h.0[x], &self.ref_frames[x]);
                let logdet = logs.iter().sum::<f64>();
                let logsup = logs.iter().map(|v| v.abs()).fold(0.0, f64::max);
                (full, tf, logdet, logsup)
            })
            .collect();
        let mut m = Monitors {
            residual_sup: 0.0,
            residual_l2: 0.0,
            tracefree_residual_sup: 0.0,
            logdet_min: f64::INFINITY,
            logdet_max: f64::NEG_INFINITY,
            log_h_sup: 0.0,
            sigma_to_reference: 0.0,
        };
        let mut l2 = KahanSum::default();
        for (x, &(full, tf, logdet, logsup)) in per_site.iter().enumerate() {
            m.logdet_min = m.logdet_min.min(logdet);
            m.logdet_max = m.logdet_max.max(logdet);
            m.log_h_sup = m.log_h_sup.max(logsup);
            if boundary.fixed(x) {
                continue;
            }
            m.residual_sup = m.residual_sup.max(full);
            m.tracefree_residual_sup = m.tracefree_residual_sup.max(tf);
            l2.add(dom.volume[x] * full * full);
        }
        m.residual_l2 = l2.value().sqrt();
        m.sigma_to_reference = analysis::donaldson_distance(&self.h, &self.reference)?.1;
        Ok(m)
    }

    fn record(&mut self, dom: &LatticeDomain, boundary: &Boundary) -> Result<Monitors> {
        let m = self.monitors(dom, boundary)?;
        self.history.push(HistoryRow {
            step: self.step,
            time: self.time,
            dt: self.dt,
            energy: self.energy,
            residual_sup: m.residual_sup,
            residual_l2: m.residual_l2,
            tracefree_residual_sup: m.tracefree_residual_sup,
            logdet_min: m.logdet_min,
            logdet_max: m.logdet_max,
            sigma_to_reference: m.sigma_to_reference,
        });
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Accepted,
    Rejected,
}

/// One explicit step `H <- H exp(2 dt T)`, taken as `(e g)^†(e g)` with
/// `e = exp(dt S)` in the orthonormal frame. Poisson runs use the trace-free
/// part of the tension. Fixed sites are reset to their data. In adaptive mode
/// a step that raises the energy beyond `1e-12 (1 + E)` is rejected and `dt`
/// shrinks.
pub fn flow_step(
    dom: &LatticeDomain,
    conn: &FlatConnection,
    state: &mut FlowState,
    opts: &SolveOptions,
    target: Target,
) -> Result<StepOutcome> {
    let dt = state.dt;
    let new_h: Vec<CMat> = (0..dom.n_sites())
        .into_par_iter()
        .map(|x| {
            if let Boundary::Dirichlet { fixed, data } = &opts.boundary {
                if fixed[x] {
                    return data.0[x].clone();
                }
            }
            let s = match target {
                Target::Harmonic => state.stension[x].clone(),
                Target::Poisson => linalg::trace_free(&state.stension[x]),
            };
            let eg = linalg::herm_exp(&s.scale(dt)) * &state.frames[x];
            linalg::hermitize(&(eg.adjoint() * eg))
        })
        .collect();
    // frames are always recomputed from the stored metric so that a state
    // rebuilt from a checkpoint is bitwise identical
    let new_frames: Vec<CMat> = new_h.par_iter().map(linalg::metric_frame).collect::<Result<_>>()?;
    let new_energy = bundle::frame_energy(dom, conn, &new_frames);
    if let StepPolicy::Adaptive { shrink, .. } = opts.policy {
        if new_energy > state.energy + 1e-12 * (1.0 + state.energy) {
            state.dt *= shrink;
            state.accepted_streak = 0;
            return Ok(StepOutcome::Rejected);
        }
    }
    state.h = MetricField(new_h);
    state.stension = bundle::frame_tension(dom, conn, &new_frames);
    state.frames = new_frames;
    state.energy = new_energy;
    state.time += dt;
    state.step += 1;
    state.accepted_streak += 1;
    if let StepPolicy::Adaptive { grow, grow_after, .. } = opts.policy {
        if state.accepted_streak >= grow_after {
            state.dt *= grow;
            state.accepted_streak = 0;
        }
    }
    Ok(StepOutcome::Accepted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Converged,
    Diverged,
    MaxSteps,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Converged => "converged",
            Verdict::Diverged => "diverged",
            Verdict::MaxSteps => "max_steps",
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub verdict: Verdict,
    pub target: Target,
    pub h: MetricField,
    pub history: Vec<HistoryRow>,
    pub steps: usize,
    pub rejected: usize,
    pub time: f64,
    pub final_monitors: Monitors,
    /// `tr(T) / r` per site, for Poisson runs.
    pub poisson_c: Option<Vec<f64>>,
    /// Largest `|det(K^{-1} H) - 1|` after normalization.
    pub det_defect: Option<f64>,
    /// The state at exit, for checkpointing.
    pub state: FlowState,
}

fn residual_of(m: &Monitors, target: Target) -> f64 {
    match target {
        Target::Harmonic => m.residual_sup,
        Target::Poisson => m.tracefree_residual_sup,
    }
}

/// Run the flow from `state` until a verdict.
pub fn run_flow(
    dom: &LatticeDomain,
    conn: &FlatConnection,
    mut state: FlowState,
    opts: &SolveOptions,
    target: Target,
) -> Result<RunReport> {
    opts.validate(dom)?;
    let mut rejected = 0;
    let mut m = state.record(dom, &opts.boundary)?;
    let verdict = loop {
        let res = residual_of(&m, target);
        if res < opts.tol {
            break Verdict::Converged;
        }
        if m.log_h_sup > opts.divergence_threshold {
            state.divergent_streak += 1;
        } else {
            state.divergent_streak = 0;
        }
        if state.divergent_streak >= opts.divergence_patience {
            break Verdict::Diverged;
        }
        if state.step >= opts.max_steps {
            break Verdict::MaxSteps;
        }
        match flow_step(dom, conn, &mut state, opts, target)? {
            StepOutcome::Accepted => m = state.record(dom, &opts.boundary)?,
            StepOutcome::Rejected => {
                rejected += 1;
                if state.dt < 1e-300 {
                    return Err(Error::NoConvergence);
                }
            }
        }
    };
    let mut report = RunReport {
        verdict,
        target,
        h: state.h.clone(),
        history: state.history.clone(),
        steps: state.step,
        rejected,
        time: state.time,
        final_monitors: m,
        poisson_c: None,
        det_defect: None,
        state,
    };
    if target == Target::Poisson {
        let t = report.state.tension();
        let r = conn.rank as f64;
        report.poisson_c = Some(t.0.iter().map(|m| m.trace().re / r).collect());
        if opts.normalize_det && verdict == Verdict::Converged {
            let k = &report.state.reference;
            let h = normalize_det(&report.h, k)?;
            report.det_defect = Some(det_defect(&h, k)?);
            report.h = h;
        }
    }
    Ok(report)
}

/// `H <- H e^f` with `f = log det(H^{-1} K) / r`, so that `det(K^{-1} H) = 1`.
pub fn normalize_det(h: &MetricField, k: &MetricField) -> Result<MetricField> {
    let kf = k.frames()?;
    Ok(MetricField(
        h.0.iter()
            .zip(&kf)
            .map(|(h, g)| {
                let logs = analysis::relative_log_eigs(h, g);
                let f = -logs.iter().sum::<f64>() / h.nrows() as f64;
                h.scale(f.exp())
            })
            .collect(),
    ))
}

/// Largest `|det(K^{-1} H) - 1|`.
pub fn det_defect(h: &MetricField, k: &MetricField) -> Result<f64> {
    let kf = k.frames()?;
    Ok(h
        .0
        .iter()
        .zip(&kf)
        .map(|(h, g)| (analysis::relative_log_eigs(h, g).iter().sum::<f64>().exp() - 1.0).abs())
        .fold(0.0, f64::max))
}

fn start(
    dom: &LatticeDomain,
    conn: &FlatConnection,
    k: &MetricField,
    h0: Option<&MetricField>,
    opts: &SolveOptions,
) -> Result<FlowState> {
    opts.validate(dom)?;
    let mut h = h0.cloned().unwrap_or_else(|| k.clone());
    if let Boundary::Dirichlet { fixed, data } = &opts.boundary {
        for x in 0..dom.n_sites() {
            if fixed[x] {
                h.0[x] = data.0[x].clone();
            }
        }
    }
    FlowState::new(dom, conn, h, k.clone(), opts.dt.unwrap_or_else(|| SolveOptions::default_dt(dom)))
}

/// Flow from `K` until the tension vanishes.
pub fn solve_harmonic(dom: &LatticeDomain, conn: &FlatConnection, k: &MetricField, opts: &SolveOptions) -> Result<RunReport> {
    solve_harmonic_from(dom, conn, k, None, opts)
}

/// As `solve_harmonic`, from a given initial metric.
pub fn solve_harmonic_from(
    dom: &LatticeDomain,
    conn: &FlatConnection,
    k: &MetricField,
    h0: Option<&MetricField>,
    opts: &SolveOptions,
) -> Result<RunReport> {
    let state = start(dom, conn, k, h0, opts)?;
    run_flow(dom, conn, state, opts, Target::Harmonic)
}

/// Flow by the trace-free tension from `K`, then fix `det(K^{-1} H) = 1`.
pub fn solve_poisson(dom: &LatticeDomain, conn: &FlatConnection, k: &MetricField, opts: &SolveOptions) -> Result<RunReport> {
    let state = start(dom, conn, k, None, opts)?;
    run_flow(dom, conn, state, opts, Target::Poisson)
}

/// Per-level result of the exhaustion driver.
#[derive(Debug, Clone)]
pub struct ExhaustionLevel {
    pub level: f64,
    pub interior_sites: usize,
    pub log_h_sup: f64,
    /// `||D h_s||_{L^2(M_s)}`.
    pub dh_l2: f64,
    pub report: RunReport,
}

/// Dirichlet Poisson problems on the sublevel sets `M_s = {level <= s}`, with
/// `H = K` on `level >= s` and on the domain boundary.
pub fn exhaustion_solve(
    dom: &LatticeDomain,
    conn: &FlatConnection,
    k: &MetricField,
    levels: &[f64],
    opts: &SolveOptions,
) -> Result<Vec<ExhaustionLevel>> {
    let mut levels = levels.to_vec();
    levels.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    for &s in &levels {
        let fixed: Vec<bool> = (0..dom.n_sites())
            .map(|x| dom.level[x] >= s || dom.boundary[x])
            .collect();
        let interior = fixed.iter().filter(|&&f| !f).count();
        if interior == 0 {
            return Err(Error::Precondition(format!("exhaustion level {s} has empty interior")));
        }
        let mut o = opts.clone();
        o.boundary = Boundary::Dirichlet { fixed, data: k.clone() };
        let report = solve_poisson(dom, conn, k, &o)?;
        let (log_h_sup, dh_l2) = exhaustion_monitors(dom, conn, &report.h, k, s)?;
        out.push(ExhaustionLevel { level: s, interior_sites: interior, log_h_sup, dh_l2, report });
    }
    Ok(out)
}

/// `sup |log h|` and `||D h||_{L^2}` over the sublevel `level <= s`, with
/// `|Dh|^2` measured in `K` on edges whose tail lies in the sublevel.
pub fn exhaustion_monitors(
    dom: &LatticeDomain,
    conn: &FlatConnection,
    h: &MetricField,
    k: &MetricField,
    s: f64,
) -> Result<(f64, f64)> {
    let inside = dom.sublevel(s);
    let kf = k.frames()?;
    let kinv = k.inverses()?;
    let rel = h.relative_to(k)?;
    let mut sup = 0.0_f64;
    for x in 0..dom.n_sites() {
        if inside[x] {
            let l = analysis::relative_log_eigs(&h.0[x], &kf[x]);
            sup = sup.max(l.iter().map(|v| v.abs()).fold(0.0, f64::max));
        }
    }
    let dh = bundle::covariant_d(dom, conn, &rel)?;
    let mut acc = KahanSum::default();
    for (i, e) in dom.edges.iter().enumerate() {
        if inside[e.tail] && inside[e.head] {
            acc.add(e.measure * linalg::k_inner(&dh.0[i], &dh.0[i], &k.0[e.tail], &kinv[e.tail]));
        }
    }
    Ok((sup, acc.value().max(0.0).sqrt()))
}

/// Extra state carried by a checkpoint so that a resumed run replays the
/// unsplit one exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    pub rank: usize,
    pub sites: usize,
    pub time: f64,
    pub step: usize,
    pub dt: f64,
    pub accepted_streak: usize,
    pub divergent_streak: usize,
}

fn write_matrix_lines(out: &mut String, fields: &[CMat]) {
    for m in fields {
        let mut line = String::new();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if !line.is_empty() {
                    line.push(' ');
                }
                let z = m[(i, j)];
                let _ = write!(line, "{:e} {:e}", z.re, z.im);
            }
        }
        out.push_str(&line);
        out.push('\n');
    }
}

/// Header `rank r, sites n, time t`, a `#` line with the step controller
/// state, then one line per site of row-major `re im` pairs. Extra named
/// blocks follow as `block <name>` and the same per-site layout.
pub fn write_checkpoint<W: Write>(mut w: W, meta: &CheckpointMeta, h: &MetricField, blocks: &[(&str, &[CMat])]) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "rank {}, sites {}, time {:e}", meta.rank, meta.sites, meta.time);
    let _ = writeln!(
        s,
        "# step {}, dt {:e}, accepted {}, divergent {}",
        meta.step, meta.dt, meta.accepted_streak, meta.divergent_streak
    );
    write_matrix_lines(&mut s, &h.0);
    for (name, field) in blocks {
        let _ = writeln!(s, "block {name}");
        write_matrix_lines(&mut s, field);
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn checkpoint_state<W: Write>(w: W, state: &FlowState, blocks: &[(&str, &[CMat])]) -> Result<()> {
    let meta = CheckpointMeta {
        rank: state.h.rank(),
        sites: state.h.0.len(),
        time: state.time,
        step: state.step,
        dt: state.dt,
        accepted_streak: state.accepted_streak,
        divergent_streak: state.divergent_streak,
    };
    write_checkpoint(w, &meta, &state.h, blocks)
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub h: MetricField,
    pub blocks: Vec<(String, Vec<CMat>)>,
}

fn parse_kv<'a>(part: &'a str, key: &str) -> Result<&'a str> {
    part.trim()
        .strip_prefix(key)
        .map(str::trim)
        .ok_or_else(|| Error::Checkpoint(format!("expected `{key}` in `{part}`")))
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Checkpoint(format!("bad number `{s}`")))
}

fn parse_matrix_line(line: &str, r: usize) -> Result<CMat> {
    let vals: Vec<f64> = line.split_whitespace().map(parse_num).collect::<Result<_>>()?;
    if vals.len() != 2 * r * r {
        return Err(Error::Checkpoint(format!("expected {} numbers per site, got {}", 2 * r * r, vals.len())));
    }
    Ok(CMat::from_fn(r, r, |i, j| {
        let k = 2 * (i * r + j);
        num_complex::Complex64::new(vals[k], vals[k + 1])
    }))
}

pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Checkpoint> {
    let mut lines = r.lines();
    let mut next = || -> Result<Option<String>> { lines.next().transpose().map_err(Error::from) };
    let header = next()?.ok_or_else(|| Error::Checkpoint("empty checkpoint".into()))?;
    let parts: Vec<&str> = header.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Checkpoint(format!("bad header `{header}`")));
    }
    let rank: usize = parse_num(parse_kv(parts[0], "rank")?)?;
    let sites: usize = parse_num(parse_kv(parts[1], "sites")?)?;
    let time: f64 = parse_num(parse_kv(parts[2], "time")?)?;
    let mut meta = CheckpointMeta { rank, sites, time, step: 0, dt: 0.0, accepted_streak: 0, divergent_streak: 0 };
    let mut h = Vec::with_capacity(sites);
    let mut blocks: Vec<(String, Vec<CMat>)> = Vec::new();
    while let Some(line) = next()? {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(rest) = t.strip_prefix('#') {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() == 4 {
                meta.step = parse_num(parse_kv(parts[0], "step")?)?;
                meta.dt = parse_num(parse_kv(parts[1], "dt")?)?;
                meta.accepted_streak = parse_num(parse_kv(parts[2], "accepted")?)?;
                meta.divergent_streak = parse_num(parse_kv(parts[3], "divergent")?)?;
            }
            continue;
        }
        if let Some(name) = t.strip_prefix("block ") {
            blocks.push((name.trim().to_string(), Vec::new()));
            continue;
        }
        let m = parse_matrix_line(t, rank)?;
        match blocks.last_mut() {
            Some((_, v)) => v.push(m),
            None => h.push(m),
        }
    }
    if h.len() != sites || blocks.iter().any(|(_, v)| v.len() != sites) {
        return Err(Error::Checkpoint(format!("expected {sites} site lines")));
    }
    Ok(Checkpoint { meta, h: MetricField(h), blocks })
}

/// Rebuild a flow state from a checkpoint.
pub fn resume_state(
    dom: &LatticeDomain,
    conn: &FlatConnection,
    ck: &Checkpoint,
    reference: &MetricField,
) -> Result<FlowState> {
    if ck.meta.sites != dom.n_sites() {
        return Err(Error::Checkpoint(format!("checkpoint has {} sites, domain has {}", ck.meta.sites, dom.n_sites())));
    }
    if ck.meta.rank != conn.rank {
        return Err(Error::Checkpoint(format!("checkpoint has rank {}, bundle has rank {}", ck.meta.rank, conn.rank)));
    }
    let mut s = FlowState::new(dom, conn, ck.h.clone(), reference.clone(), ck.meta.dt)?;
    s.step = ck.meta.step;
    s.time = ck.meta.time;
    s.accepted_streak = ck.meta.accepted_streak;
    s.divergent_streak = ck.meta.divergent_streak;
    Ok(s)
}

//! wasm-bindgen entry points for the static page in `www/`.
//!
//! Every function takes plain numbers and returns a JSON string, so the page
//! needs no generated TypeScript glue beyond `JSON.parse`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use bundleflow::analysis;
use bundleflow::bundle::{self, FlatConnection, MetricField};
use bundleflow::config::random_smooth_metric;
use bundleflow::flow::{self, SolveOptions, Verdict};
use bundleflow::linalg::{self, CMat};
use bundleflow::mesh::{DomainKind, DomainOptions, LatticeDomain};
use bundleflow::Result;

fn circle(sites: usize) -> Result<LatticeDomain> {
    LatticeDomain::build(DomainKind::Circle, &[sites], &[1.0], &DomainOptions::default())
}

fn monodromy(a: f64, b: f64, c: f64, d: f64) -> CMat {
    linalg::from_rows(&[&[a, b], &[c, d]])
}

fn to_json<T: Serialize>(r: Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e.to_string()),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

#[derive(Serialize)]
pub struct FlowResult {
    pub verdict: &'static str,
    pub steps: usize,
    pub time: f64,
    pub residual: f64,
    pub log_h_sup: f64,
    /// `(step, energy, residual_sup)` for every accepted step, thinned to at most 400 rows.
    pub history: Vec<(usize, f64, f64)>,
    /// Log eigenvalues of the final metric at each site.
    pub profile: Vec<Vec<f64>>,
}

pub fn flow_circle_impl(
    sites: usize,
    m: [f64; 4],
    amplitude: f64,
    seed: u64,
    max_steps: usize,
) -> Result<FlowResult> {
    let dom = circle(sites)?;
    let conn = FlatConnection::from_monodromy(&dom, &[monodromy(m[0], m[1], m[2], m[3])])?;
    let h0 = random_smooth_metric(&dom, 2, amplitude, seed);
    let k = MetricField::identity(dom.n_sites(), 2);
    let opts = SolveOptions { max_steps, divergence_threshold: 12.0, ..SolveOptions::default() };
    opts.validate(&dom)?;
    let rep = flow::solve_harmonic_from(&dom, &conn, &k, Some(&h0), &opts)?;
    let stride = rep.history.len().div_ceil(400).max(1);
    let mut history: Vec<_> = rep.history.iter().step_by(stride).map(|r| (r.step, r.energy, r.residual_sup)).collect();
    if let Some(last) = rep.history.last() {
        if history.last().map(|r| r.0) != Some(last.step) {
            history.push((last.step, last.energy, last.residual_sup));
        }
    }
    let id = linalg::identity(2);
    let profile = rep.h.0.iter().map(|h| analysis::relative_log_eigs(h, &id)).collect();
    Ok(FlowResult {
        verdict: rep.verdict.as_str(),
        steps: rep.steps,
        time: rep.time,
        residual: rep.final_monitors.residual_sup,
        log_h_sup: rep.final_monitors.log_h_sup,
        history,
        profile,
    })
}

/// Run the harmonic metric flow on a circle of `sites` sites with rank-2
/// monodromy `[[a, b], [c, d]]`, starting from a seeded random metric.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn flow_circle(sites: usize, a: f64, b: f64, c: f64, d: f64, amplitude: f64, seed: u32, max_steps: usize) -> String {
    to_json(flow_circle_impl(sites, [a, b, c, d], amplitude, seed as u64, max_steps))
}

#[derive(Serialize)]
pub struct StabilityResult {
    pub verdict: &'static str,
    pub degree: f64,
    pub slope: f64,
    /// `(rank, degree, slope)` per invariant sub-bundle.
    pub subs: Vec<(usize, f64, f64)>,
    pub converged: bool,
}

pub fn stability_circle_impl(sites: usize, m: [f64; 4]) -> Result<StabilityResult> {
    let dom = circle(sites)?;
    let conn = FlatConnection::from_monodromy(&dom, &[monodromy(m[0], m[1], m[2], m[3])])?;
    // degrees are computed against the harmonic metric when the flow finds one
    let id = MetricField::identity(dom.n_sites(), 2);
    let opts = SolveOptions { max_steps: 20_000, divergence_threshold: 12.0, ..SolveOptions::default() };
    let rep = flow::solve_harmonic(&dom, &conn, &id, &opts)?;
    let converged = rep.verdict == Verdict::Converged;
    let k = if converged { rep.h } else { id };
    let subs = bundle::invariant_subbundles(&dom, &conn, &k)?;
    if subs.is_empty() {
        let deg = analysis::degree(&dom, &conn, &k, None)?;
        return Ok(StabilityResult { verdict: "stable", degree: deg, slope: deg / 2.0, subs: vec![], converged });
    }
    let rep = analysis::stability_report(&dom, &conn, &k, &subs)?;
    Ok(StabilityResult {
        verdict: rep.verdict.as_str(),
        degree: rep.degree,
        slope: rep.slope,
        subs: rep.subs.iter().map(|s| (s.rank, s.degree, s.slope)).collect(),
        converged,
    })
}

/// Invariant sub-bundles of the circle bundle with monodromy `[[a, b], [c, d]]`
/// and their slopes.
#[wasm_bindgen]
pub fn stability_circle(sites: usize, a: f64, b: f64, c: f64, d: f64) -> String {
    to_json(stability_circle_impl(sites, [a, b, c, d]))
}

#[derive(Serialize)]
pub struct DistanceResult {
    pub total: f64,
    pub pointwise: Vec<f64>,
}

pub fn distance_impl(sites: usize, rank: usize, amp_h: f64, amp_k: f64, seed: u64) -> Result<DistanceResult> {
    let dom = circle(sites)?;
    let h = random_smooth_metric(&dom, rank, amp_h, seed);
    let k = random_smooth_metric(&dom, rank, amp_k, seed.wrapping_add(1));
    let (pointwise, total) = analysis::donaldson_distance(&h, &k)?;
    Ok(DistanceResult { total, pointwise })
}

/// Donaldson distance between two seeded random metrics on a circle.
#[wasm_bindgen]
pub fn donaldson_distance(sites: usize, rank: usize, amp_h: f64, amp_k: f64, seed: u32) -> String {
    to_json(distance_impl(sites, rank, amp_h, amp_k, seed as u64))
}

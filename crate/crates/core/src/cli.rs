//! Scenario runner behind the `bundleflow` binary.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::analysis;
use crate::bundle::{self, FlatConnection, MetricField};
use crate::config::{RunConfig, Scenario};
use crate::error::{Error, Result};
use crate::flow::{self, Boundary, FlowState, HistoryRow, RunReport, SolveOptions, Target, Verdict};
use crate::hodge;
use crate::linalg::{self, CMat};
use crate::mesh::LatticeDomain;

#[derive(Debug, Clone, Default)]
pub struct RunArgs {
    pub resume: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    /// 0 completed, 2 diverged.
    pub status: i32,
    pub out_dir: PathBuf,
    pub report: String,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    dom: LatticeDomain,
    conn: FlatConnection,
    k: MetricField,
    opts: SolveOptions,
    out: PathBuf,
    seed: u64,
    resume: Option<flow::Checkpoint>,
    report: String,
}

pub fn run_scenario(cfg: &RunConfig, args: &RunArgs) -> Result<Outcome> {
    cfg.validate()?;
    let dom = cfg.build_domain()?;
    let gens = cfg.generators();
    let conn = if gens.is_empty() {
        FlatConnection::trivial(&dom, cfg.bundle.rank)
    } else {
        FlatConnection::from_monodromy(&dom, &gens)?
    };
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let k = cfg.reference_metric(&dom, seed)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    std::fs::create_dir_all(&out)?;
    let resume = match &args.resume {
        Some(p) => {
            let f = File::open(p).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))?;
            let ck = flow::read_checkpoint(BufReader::new(f))?;
            if ck.meta.rank != cfg.bundle.rank {
                return Err(Error::Checkpoint(format!(
                    "checkpoint has rank {}, config has rank {}",
                    ck.meta.rank, cfg.bundle.rank
                )));
            }
            if ck.meta.sites != dom.n_sites() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint has {} sites, domain has {}",
                    ck.meta.sites,
                    dom.n_sites()
                )));
            }
            Some(ck)
        }
        None => None,
    };
    let mut ctx = Ctx { cfg, dom, conn, k, opts: cfg.solve_options(), out, seed, resume, report: String::new() };
    let _ = writeln!(ctx.report, "scenario: {}", cfg.scenario.as_str());
    let _ = writeln!(
        ctx.report,
        "domain: {} sites {:?} lengths {:?}, rank {}",
        cfg.domain.kind, cfg.domain.sites, cfg.domain.lengths, cfg.bundle.rank
    );
    let status = match cfg.scenario {
        Scenario::SolveHarmonic => ctx.flow_scenario(Target::Harmonic, Boundary::Free)?,
        Scenario::SolvePoisson => ctx.flow_scenario(Target::Poisson, Boundary::Free)?,
        Scenario::Dirichlet => {
            if !ctx.dom.has_boundary() {
                return Err(Error::Config("domain.kind: the Dirichlet scenario needs a domain with boundary".into()));
            }
            let b = Boundary::on_boundary(&ctx.dom, &ctx.k);
            ctx.flow_scenario(Target::Harmonic, b)?
        }
        Scenario::Exhaustion => ctx.exhaustion()?,
        Scenario::Stability => ctx.stability()?,
        Scenario::HiggsRoundtrip => ctx.higgs_roundtrip()?,
    };
    std::fs::write(ctx.out.join("report.txt"), &ctx.report)?;
    Ok(Outcome { status, out_dir: ctx.out, report: ctx.report })
}

fn status_of(v: Verdict) -> i32 {
    if v == Verdict::Diverged {
        2
    } else {
        0
    }
}

impl Ctx<'_> {
    fn start_state(&mut self) -> Result<FlowState> {
        let dt = self.opts.dt.unwrap_or_else(|| SolveOptions::default_dt(&self.dom));
        match &self.resume {
            Some(ck) => {
                let s = flow::resume_state(&self.dom, &self.conn, ck, &self.k)?;
                let _ = writeln!(self.report, "resumed at step {} (time {:e})", ck.meta.step, ck.meta.time);
                if let Some(cfg_dt) = self.opts.dt {
                    if cfg_dt != ck.meta.dt {
                        let _ = writeln!(
                            self.report,
                            "note: step-size policy changed on resume (checkpoint dt {:e}, config dt {:e}); using config",
                            ck.meta.dt, cfg_dt
                        );
                        let mut s = s;
                        s.dt = cfg_dt;
                        s.accepted_streak = 0;
                        return Ok(s);
                    }
                }
                Ok(s)
            }
            None => {
                let h0 = self.cfg.initial_metric(&self.dom, &self.k, self.seed)?;
                FlowState::new(&self.dom, &self.conn, h0, self.k.clone(), dt)
            }
        }
    }

    /// Run in chunks of `checkpoint_every` steps, writing `step_<n>.ckpt`
    /// between chunks. Split runs replay unsplit ones exactly.
    fn chunked_run(&mut self, mut state: FlowState, opts: &SolveOptions, target: Target) -> Result<RunReport> {
        let every = self.cfg.output.checkpoint_every;
        let mut rows: Vec<HistoryRow> = Vec::new();
        let mut rejected = 0;
        loop {
            let mut o = opts.clone();
            if every > 0 {
                o.max_steps = opts.max_steps.min((state.step / every + 1) * every);
            }
            let mut rep = flow::run_flow(&self.dom, &self.conn, state, &o, target)?;
            for r in rep.history.drain(..) {
                if rows.last().is_none_or(|l| r.step > l.step) {
                    rows.push(r);
                }
            }
            rejected += rep.rejected;
            if rep.verdict == Verdict::MaxSteps && rep.steps < opts.max_steps {
                let p = self.out.join(format!("step_{}.ckpt", rep.steps));
                flow::checkpoint_state(BufWriter::new(File::create(p)?), &rep.state, &[])?;
                state = rep.state;
                state.history.clear();
                continue;
            }
            rep.history = rows;
            rep.rejected = rejected;
            return Ok(rep);
        }
    }

    fn write_csv(&self, rows: &[HistoryRow], start_step: usize) -> Result<()> {
        let path = self.out.join("run.csv");
        let mut keep: Vec<HistoryRow> = Vec::new();
        if start_step > 0 {
            // continue an existing history from an earlier run
            if let Ok(text) = std::fs::read_to_string(&path) {
                keep = parse_csv_rows(&text).into_iter().filter(|r| r.step < start_step).collect();
            }
        }
        let every = self.cfg.output.csv_every;
        let last = rows.last().map(|r| r.step);
        keep.extend(rows.iter().filter(|r| r.step % every == 0 || Some(r.step) == last).copied());
        flow::write_csv(BufWriter::new(File::create(path)?), &keep)
    }

    fn report_run(&mut self, rep: &RunReport) {
        let m = &rep.final_monitors;
        let _ = writeln!(self.report, "verdict: {}", rep.verdict);
        let _ = writeln!(self.report, "steps: {} (rejected {}), time {:e}", rep.steps, rep.rejected, rep.time);
        let _ = writeln!(self.report, "final residual sup: {:e}", m.residual_sup);
        let _ = writeln!(self.report, "final residual l2: {:e}", m.residual_l2);
        let _ = writeln!(self.report, "final trace-free residual sup: {:e}", m.tracefree_residual_sup);
        let _ = writeln!(self.report, "sup |log h|: {:e}", m.log_h_sup);
        let _ = writeln!(self.report, "sigma to reference: {:e}", m.sigma_to_reference);
        if let Some(e) = rep.history.last() {
            let _ = writeln!(self.report, "final energy: {:e}", e.energy);
        }
        if let Some(d) = rep.det_defect {
            let _ = writeln!(self.report, "det defect: {:e}", d);
        }
        if let Some(c) = &rep.poisson_c {
            let lo = c.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let _ = writeln!(self.report, "poisson c range: [{lo:e}, {hi:e}]");
        }
    }

    fn finish_run(&mut self, rep: &RunReport, start_step: usize, blocks: &[(&str, &[CMat])]) -> Result<()> {
        self.write_csv(&rep.history, start_step)?;
        let mut st = rep.state.clone();
        st.h = rep.h.clone();
        flow::checkpoint_state(BufWriter::new(File::create(self.out.join("final.ckpt"))?), &st, blocks)?;
        self.report_run(rep);
        Ok(())
    }

    fn flow_scenario(&mut self, target: Target, boundary: Boundary) -> Result<i32> {
        let state = self.start_state()?;
        let start = state.step;
        let mut opts = self.opts.clone();
        opts.boundary = boundary;
        let rep = self.chunked_run(state, &opts, target)?;
        self.finish_run(&rep, start, &[])?;
        Ok(status_of(rep.verdict))
    }

    fn exhaustion(&mut self) -> Result<i32> {
        let levels = &self.cfg.exhaustion.as_ref().expect("validated").levels;
        let res = flow::exhaustion_solve(&self.dom, &self.conn, &self.k, levels, &self.opts)?;
        let _ = writeln!(self.report, "level,interior_sites,verdict,steps,log_h_sup,dh_l2");
        let mut status = 0;
        for l in &res {
            let _ = writeln!(
                self.report,
                "{:e},{},{},{},{:e},{:e}",
                l.level, l.interior_sites, l.report.verdict, l.report.steps, l.log_h_sup, l.dh_l2
            );
            status = status.max(status_of(l.report.verdict));
        }
        let last = res.last().expect("levels validated");
        let _ = writeln!(self.report, "top level:");
        self.finish_run(&last.report, 0, &[])?;
        Ok(status)
    }

    fn stability(&mut self) -> Result<i32> {
        let subs = bundle::invariant_subbundles(&self.dom, &self.conn, &self.k)?;
        if subs.is_empty() {
            let deg = analysis::degree(&self.dom, &self.conn, &self.k, None)?;
            let _ = writeln!(self.report, "verdict: stable");
            let _ = writeln!(self.report, "total: rank {} degree {:.12e}", self.conn.rank, deg);
            let _ = writeln!(self.report, "no proper invariant sub-bundles");
            return Ok(0);
        }
        let rep = analysis::stability_report(&self.dom, &self.conn, &self.k, &subs)?;
        self.report.push_str(&rep.to_text());
        std::fs::write(self.out.join("stability.csv"), rep.csv_rows())?;
        Ok(0)
    }

    fn higgs_roundtrip(&mut self) -> Result<i32> {
        let state = self.start_state()?;
        let start = state.step;
        let opts = self.opts.clone();
        let rep = self.chunked_run(state, &opts, Target::Poisson)?;
        if rep.verdict != Verdict::Converged {
            self.finish_run(&rep, start, &[])?;
            let _ = writeln!(self.report, "round trip skipped: Poisson solve did not converge");
            return Ok(status_of(rep.verdict));
        }
        let tol = opts.tol;
        let higgs = hodge::higgs_from_harmonic(&self.dom, &self.conn, &rep.h, tol)?;
        let res = hodge::hitchin_residuals(&self.dom, &higgs, &rep.h)?;
        self.finish_run(&rep, start, &[("theta", &higgs.theta)])?;
        let _ = writeln!(self.report, "holomorphy residual: {:e}", res.holomorphy);
        let _ = writeln!(self.report, "hs curvature sup: {:e}", res.hs_curvature_sup);
        let _ = writeln!(self.report, "lambda F sup: {:e}", res.lambda_f_sup);
        // the flatness check uses the residual itself as the tolerance scale
        let back = hodge::flat_from_higgs(&self.dom, &higgs, &rep.h, res.hs_curvature_sup.max(tol))?;
        let mut worst = 0.0_f64;
        for (i, (a, b)) in back.generators.iter().zip(&self.conn.generators).enumerate() {
            let ea = sorted_eigs(a)?;
            let eb = sorted_eigs(b)?;
            let d = ea.iter().zip(&eb).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
            worst = worst.max(d);
            let _ = writeln!(self.report, "loop {i}: eigenvalue deviation {d:e}");
        }
        let _ = writeln!(self.report, "holonomy eigenvalue deviation: {worst:e}");
        Ok(0)
    }
}

fn sorted_eigs(m: &CMat) -> Result<Vec<num_complex::Complex64>> {
    let mut v = linalg::eigenvalues(m)?;
    v.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    Ok(v)
}

fn parse_csv_rows(text: &str) -> Vec<HistoryRow> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("step"))
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 10 {
                return None;
            }
            let n = |i: usize| f[i].parse::<f64>().ok();
            Some(HistoryRow {
                step: f[0].parse().ok()?,
                time: n(1)?,
                dt: n(2)?,
                energy: n(3)?,
                residual_sup: n(4)?,
                residual_l2: n(5)?,
                tracefree_residual_sup: n(6)?,
                logdet_min: n(7)?,
                logdet_max: n(8)?,
                sigma_to_reference: n(9)?,
            })
        })
        .collect()
}

/// Configure the global thread pool; later calls are ignored.
pub fn set_threads(n: usize) {
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path)
}

//! Run configuration files (TOML).
//!
//! ```toml
//! scenario = "solve_harmonic"
//!
//! [domain]
//! kind = "circle"          # circle | interval | torus | rectangle | annulus
//! sites = [200]
//! lengths = [1.0]
//!
//! [bundle]
//! rank = 2
//! # one matrix per loop generator, rows of [re, im] entries
//! monodromy = [[[[2.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.5, 0.0]]]]
//!
//! [reference]
//! kind = "identity"        # identity | diagonal | checkpoint | random
//! # diagonal = [1.0, 2.0]
//! # path = "start.ckpt"
//! # amplitude = 0.3
//!
//! [solver]
//! tol = 1e-8
//! policy = "adaptive"      # adaptive | fixed
//!
//! [output]
//! dir = "out"
//! csv_every = 1
//! checkpoint_every = 0
//! ```
//!
//! `[initial]` takes the same keys as `[reference]` and sets the starting
//! metric (default: the reference). `[exhaustion] levels = [...]` lists the
//! sublevels for the exhaustion scenario.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use serde::Deserialize;

use crate::bundle::MetricField;
use crate::error::{Error, Result};
use crate::flow::{self, SolveOptions, StepPolicy};
use crate::linalg::{self, CMat};
use crate::mesh::{DomainKind, DomainOptions, LatticeDomain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    SolveHarmonic,
    SolvePoisson,
    Dirichlet,
    Exhaustion,
    Stability,
    HiggsRoundtrip,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::SolveHarmonic => "solve_harmonic",
            Scenario::SolvePoisson => "solve_poisson",
            Scenario::Dirichlet => "dirichlet",
            Scenario::Exhaustion => "exhaustion",
            Scenario::Stability => "stability",
            Scenario::HiggsRoundtrip => "higgs_roundtrip",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainBlock {
    pub kind: String,
    pub sites: Vec<usize>,
    pub lengths: Vec<f64>,
    pub complex: Option<bool>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleBlock {
    pub rank: usize,
    pub monodromy: Option<Vec<Vec<Vec<[f64; 2]>>>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricBlock {
    pub kind: String,
    pub diagonal: Option<Vec<f64>>,
    pub path: Option<PathBuf>,
    pub amplitude: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    pub tol: Option<f64>,
    pub max_steps: Option<usize>,
    pub dt: Option<f64>,
    pub policy: Option<String>,
    pub grow: Option<f64>,
    pub shrink: Option<f64>,
    pub grow_after: Option<usize>,
    pub divergence_threshold: Option<f64>,
    pub divergence_patience: Option<usize>,
    pub normalize_det: Option<bool>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "one")]
    pub csv_every: usize,
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn one() -> usize {
    1
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock { dir: default_dir(), csv_every: 1, checkpoint_every: 0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExhaustionBlock {
    pub levels: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub seed: Option<u64>,
    pub domain: DomainBlock,
    pub bundle: BundleBlock,
    pub reference: Option<MetricBlock>,
    pub initial: Option<MetricBlock>,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub output: OutputBlock,
    pub exhaustion: Option<ExhaustionBlock>,
}

fn field(name: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{name}: {msg}"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| field("config", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let kind = self.domain_kind()?;
        if self.domain.sites.len() != kind.dim() {
            return Err(field("domain.sites", format!("expected {} entries", kind.dim())));
        }
        if self.domain.lengths.len() != kind.dim() {
            return Err(field("domain.lengths", format!("expected {} entries", kind.dim())));
        }
        let r = self.bundle.rank;
        if r == 0 {
            return Err(field("bundle.rank", "must be positive"));
        }
        let Some(mono) = &self.bundle.monodromy else {
            return Err(field("bundle.monodromy", "missing"));
        };
        if mono.len() != kind.loop_count() {
            return Err(field(
                "bundle.monodromy",
                format!("{} generators for a domain with {} loops", mono.len(), kind.loop_count()),
            ));
        }
        for (i, m) in mono.iter().enumerate() {
            if m.len() != r || m.iter().any(|row| row.len() != r) {
                return Err(field("bundle.monodromy", format!("generator {i} is not {r}x{r}")));
            }
        }
        for (name, b) in [("reference", &self.reference), ("initial", &self.initial)] {
            if let Some(b) = b {
                match b.kind.as_str() {
                    "identity" | "random" => {}
                    "diagonal" => match &b.diagonal {
                        Some(d) if d.len() == r && d.iter().all(|v| *v > 0.0) => {}
                        _ => return Err(field(&format!("{name}.diagonal"), format!("need {r} positive entries"))),
                    },
                    "checkpoint" => {
                        if b.path.is_none() {
                            return Err(field(&format!("{name}.path"), "missing"));
                        }
                    }
                    other => return Err(field(&format!("{name}.kind"), format!("unknown `{other}`"))),
                }
            }
        }
        if self.scenario == Scenario::Exhaustion && self.exhaustion.as_ref().is_none_or(|e| e.levels.is_empty()) {
            return Err(field("exhaustion.levels", "missing"));
        }
        if let Some(p) = &self.solver.policy {
            if p != "adaptive" && p != "fixed" {
                return Err(field("solver.policy", format!("unknown `{p}`")));
            }
        }
        if self.output.csv_every == 0 {
            return Err(field("output.csv_every", "must be positive"));
        }
        Ok(())
    }

    pub fn domain_kind(&self) -> Result<DomainKind> {
        Ok(match self.domain.kind.as_str() {
            "circle" => DomainKind::Circle,
            "interval" => DomainKind::Interval,
            "torus" => DomainKind::Torus,
            "rectangle" => DomainKind::Rectangle,
            "annulus" => DomainKind::Annulus,
            other => return Err(field("domain.kind", format!("unknown `{other}`"))),
        })
    }

    pub fn build_domain(&self) -> Result<LatticeDomain> {
        let opts = DomainOptions { complex_structure: self.domain.complex };
        LatticeDomain::build(self.domain_kind()?, &self.domain.sites, &self.domain.lengths, &opts)
    }

    pub fn generators(&self) -> Vec<CMat> {
        let r = self.bundle.rank;
        self.bundle
            .monodromy
            .iter()
            .flatten()
            .map(|m| CMat::from_fn(r, r, |i, j| Complex64::new(m[i][j][0], m[i][j][1])))
            .collect()
    }

    pub fn solve_options(&self) -> SolveOptions {
        let s = &self.solver;
        let d = SolveOptions::default();
        let policy = match s.policy.as_deref() {
            Some("fixed") => StepPolicy::Fixed,
            _ => {
                let StepPolicy::Adaptive { grow, shrink, grow_after } = StepPolicy::default() else {
                    unreachable!()
                };
                StepPolicy::Adaptive {
                    grow: s.grow.unwrap_or(grow),
                    shrink: s.shrink.unwrap_or(shrink),
                    grow_after: s.grow_after.unwrap_or(grow_after),
                }
            }
        };
        SolveOptions {
            tol: s.tol.unwrap_or(d.tol),
            max_steps: s.max_steps.unwrap_or(d.max_steps),
            dt: s.dt.or(d.dt),
            policy,
            divergence_threshold: s.divergence_threshold.unwrap_or(d.divergence_threshold),
            divergence_patience: s.divergence_patience.unwrap_or(d.divergence_patience),
            boundary: d.boundary,
            normalize_det: s.normalize_det.unwrap_or(d.normalize_det),
        }
    }

    /// Reference metric `K`; `seed` feeds the `random` kind.
    pub fn reference_metric(&self, dom: &LatticeDomain, seed: u64) -> Result<MetricField> {
        match &self.reference {
            None => Ok(MetricField::identity(dom.n_sites(), self.bundle.rank)),
            Some(b) => metric_from_block(b, "reference", dom, self.bundle.rank, seed),
        }
    }

    /// Starting metric; the reference unless `[initial]` is given.
    pub fn initial_metric(&self, dom: &LatticeDomain, k: &MetricField, seed: u64) -> Result<MetricField> {
        match &self.initial {
            None => Ok(k.clone()),
            Some(b) => metric_from_block(b, "initial", dom, self.bundle.rank, seed.wrapping_add(1)),
        }
    }
}

fn metric_from_block(b: &MetricBlock, name: &str, dom: &LatticeDomain, r: usize, seed: u64) -> Result<MetricField> {
    let n = dom.n_sites();
    let h = match b.kind.as_str() {
        "identity" => MetricField::identity(n, r),
        "diagonal" => MetricField::constant(n, &linalg::from_real_diag(b.diagonal.as_deref().unwrap_or(&[]))),
        "random" => random_smooth_metric(dom, r, b.amplitude.unwrap_or(0.3), seed),
        "checkpoint" => {
            let path = b.path.as_ref().ok_or_else(|| field(&format!("{name}.path"), "missing"))?;
            let f = std::fs::File::open(path).map_err(|e| field(&format!("{name}.path"), format!("{}: {e}", path.display())))?;
            let ck = flow::read_checkpoint(std::io::BufReader::new(f))?;
            if ck.meta.rank != r || ck.meta.sites != n {
                return Err(field(
                    &format!("{name}.path"),
                    format!("checkpoint is rank {} on {} sites", ck.meta.rank, ck.meta.sites),
                ));
            }
            ck.h
        }
        other => return Err(field(&format!("{name}.kind"), format!("unknown `{other}`"))),
    };
    h.validate()?;
    Ok(h)
}

/// `exp` of a Hermitian field `sum_axis A cos(t) + B sin(t)`, `t = 2 pi x / L`,
/// with seeded Hermitian coefficients of size `amplitude`.
pub fn random_smooth_metric(dom: &LatticeDomain, r: usize, amplitude: f64, seed: u64) -> MetricField {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let d = dom.dim();
    let mut coef = || {
        let a = CMat::from_fn(r, r, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        linalg::hermitize(&a).scale(amplitude / (2 * d) as f64)
    };
    let coef: Vec<(CMat, CMat)> = (0..d).map(|_| (coef(), coef())).collect();
    MetricField(
        (0..dom.n_sites())
            .map(|x| {
                let p = dom.coords(x);
                let mut a = linalg::zeros(r);
                for (ax, (c, s)) in coef.iter().enumerate() {
                    let t = std::f64::consts::TAU * p[ax] / dom.lengths[ax];
                    a += c.scale(t.cos()) + s.scale(t.sin());
                }
                linalg::herm_exp(&a)
            })
            .collect(),
    )
}

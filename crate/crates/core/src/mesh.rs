//! Structured lattices over flat model domains.
//!
//! Sites are numbered with axis 0 varying fastest. Every undirected edge is
//! stored once, oriented along increasing index; each site keeps a fixed
//! ordered list of outgoing directions (axis by axis, forward before
//! backward) so that every reduction runs in the same order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::KahanSum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    Circle,
    Interval,
    Torus,
    Rectangle,
    Annulus,
}

impl DomainKind {
    pub fn dim(self) -> usize {
        match self {
            DomainKind::Circle | DomainKind::Interval => 1,
            _ => 2,
        }
    }

    /// Periodicity per axis. The annulus is a flat cylinder: angular axis 0,
    /// radial axis 1.
    pub fn periodic(self) -> Vec<bool> {
        match self {
            DomainKind::Circle => vec![true],
            DomainKind::Interval => vec![false],
            DomainKind::Torus => vec![true, true],
            DomainKind::Rectangle => vec![false, false],
            DomainKind::Annulus => vec![true, false],
        }
    }

    /// Number of independent loops carrying a monodromy generator.
    pub fn loop_count(self) -> usize {
        self.periodic().iter().filter(|&&p| p).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub tail: usize,
    pub head: usize,
    pub axis: usize,
    pub spacing: f64,
    /// Dual-cell measure: spacing times transverse dual widths.
    pub measure: f64,
    /// Inverse-metric weight g^{ii}; 1 on the flat model domains.
    pub weight: f64,
}

/// An outgoing direction at a site: the stored edge and whether the site is
/// its tail (`forward`) or its head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutEdge {
    pub edge: usize,
    pub forward: bool,
}

#[derive(Debug, Clone, Default)]
pub struct DomainOptions {
    /// Override the complex-structure flag (defaults to true in dimension 2).
    pub complex_structure: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct LatticeDomain {
    pub kind: DomainKind,
    pub sites: Vec<usize>,
    pub lengths: Vec<f64>,
    pub spacing: Vec<f64>,
    pub periodic: Vec<bool>,
    pub volume: Vec<f64>,
    pub boundary: Vec<bool>,
    /// Exhaustion level per site; sublevel sets are the nested domains.
    pub level: Vec<f64>,
    pub complex: bool,
    pub edges: Vec<Edge>,
    pub out: Vec<Vec<OutEdge>>,
}

fn band(j: usize, n: usize) -> f64 {
    // distance of index j from the central band, in whole bands
    let d = (2 * j as i64 - (n as i64 - 1)).unsigned_abs() as usize;
    (d / 2) as f64
}

impl LatticeDomain {
    pub fn build(
        kind: DomainKind,
        sites: &[usize],
        lengths: &[f64],
        options: &DomainOptions,
    ) -> Result<Self> {
        let d = kind.dim();
        if sites.len() != d || lengths.len() != d {
            return Err(Error::Domain(format!(
                "{kind:?} needs {d} axes, got {} site counts and {} lengths",
                sites.len(),
                lengths.len()
            )));
        }
        if let Some(n) = sites.iter().find(|&&n| n < 3) {
            return Err(Error::Domain(format!("need at least 3 sites per axis, got {n}")));
        }
        if let Some(l) = lengths.iter().find(|&&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Domain(format!("lengths must be positive, got {l}")));
        }
        let periodic = kind.periodic();
        let spacing: Vec<f64> = (0..d)
            .map(|a| {
                if periodic[a] {
                    lengths[a] / sites[a] as f64
                } else {
                    lengths[a] / (sites[a] - 1) as f64
                }
            })
            .collect();
        let total: usize = sites.iter().product();
        let mut dom = LatticeDomain {
            kind,
            sites: sites.to_vec(),
            lengths: lengths.to_vec(),
            spacing,
            periodic,
            volume: vec![0.0; total],
            boundary: vec![false; total],
            level: vec![0.0; total],
            complex: options.complex_structure.unwrap_or(d == 2),
            edges: Vec::new(),
            out: vec![Vec::new(); total],
        };
        if dom.complex && d != 2 {
            return Err(Error::Domain("complex structure needs a 2-dimensional domain".into()));
        }
        for x in 0..total {
            let idx = dom.multi_index(x);
            dom.volume[x] = (0..d).map(|a| dom.dual_width(a, idx[a])).product();
            dom.boundary[x] = (0..d).any(|a| !dom.periodic[a] && (idx[a] == 0 || idx[a] == sites[a] - 1));
            dom.level[x] = match kind {
                DomainKind::Rectangle => (0..d).map(|a| band(idx[a], sites[a])).fold(0.0, f64::max),
                DomainKind::Annulus => band(idx[1], sites[1]),
                _ => 0.0,
            };
        }
        for x in 0..total {
            let idx = dom.multi_index(x);
            for a in 0..d {
                if !dom.periodic[a] && idx[a] == sites[a] - 1 {
                    continue;
                }
                let mut nidx = idx.clone();
                nidx[a] = (idx[a] + 1) % sites[a];
                let y = dom.flat_index(&nidx);
                let transverse: f64 = (0..d)
                    .filter(|&b| b != a)
                    .map(|b| dom.dual_width(b, idx[b]))
                    .product();
                dom.edges.push(Edge {
                    tail: x,
                    head: y,
                    axis: a,
                    spacing: dom.spacing[a],
                    measure: dom.spacing[a] * transverse,
                    weight: 1.0,
                });
            }
        }
        // outgoing lists: per axis, forward then backward
        let mut fwd = vec![vec![None; d]; total];
        let mut bwd = vec![vec![None; d]; total];
        for (i, e) in dom.edges.iter().enumerate() {
            fwd[e.tail][e.axis] = Some(i);
            bwd[e.head][e.axis] = Some(i);
        }
        for x in 0..total {
            for a in 0..d {
                if let Some(e) = fwd[x][a] {
                    dom.out[x].push(OutEdge { edge: e, forward: true });
                }
                if let Some(e) = bwd[x][a] {
                    dom.out[x].push(OutEdge { edge: e, forward: false });
                }
            }
        }
        Ok(dom)
    }

    fn dual_width(&self, axis: usize, i: usize) -> f64 {
        let h = self.spacing[axis];
        if !self.periodic[axis] && (i == 0 || i == self.sites[axis] - 1) {
            0.5 * h
        } else {
            h
        }
    }

    pub fn dim(&self) -> usize {
        self.sites.len()
    }

    pub fn n_sites(&self) -> usize {
        self.volume.len()
    }

    pub fn multi_index(&self, mut x: usize) -> Vec<usize> {
        self.sites
            .iter()
            .map(|&n| {
                let i = x % n;
                x /= n;
                i
            })
            .collect()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.sites)
            .rev()
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    /// Physical coordinates of a site.
    pub fn coords(&self, x: usize) -> Vec<f64> {
        self.multi_index(x)
            .iter()
            .zip(&self.spacing)
            .map(|(&i, &h)| i as f64 * h)
            .collect()
    }

    pub fn has_boundary(&self) -> bool {
        self.boundary.iter().any(|&b| b)
    }

    pub fn total_volume(&self) -> f64 {
        self.volume.iter().cloned().collect::<KahanSum>().value()
    }

    /// Distinct exhaustion levels in increasing order.
    pub fn levels(&self) -> Vec<f64> {
        let mut v = self.level.clone();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    /// The neighbour reached through an outgoing direction.
    pub fn other(&self, x: usize, o: OutEdge) -> usize {
        let e = &self.edges[o.edge];
        if o.forward {
            debug_assert_eq!(e.tail, x);
            e.head
        } else {
            debug_assert_eq!(e.head, x);
            e.tail
        }
    }

    /// Sites ordered along axis 0 from site 0; the fundamental loop on the
    /// circle, or the axis-0 loop through site 0 on a torus/annulus.
    pub fn axis_loop(&self, axis: usize, start: usize) -> Result<Vec<usize>> {
        if !self.periodic[axis] {
            return Err(Error::OpenPath);
        }
        let mut idx = self.multi_index(start);
        let mut path = Vec::with_capacity(self.sites[axis] + 1);
        for _ in 0..=self.sites[axis] {
            path.push(self.flat_index(&idx));
            idx[axis] = (idx[axis] + 1) % self.sites[axis];
        }
        Ok(path)
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.n_sites() {
            return Err(Error::SizeMismatch { expected: self.n_sites(), got: n });
        }
        Ok(())
    }

    /// Second-order Laplacian (negative semi-definite convention). Values on
    /// boundary sites use the one-sided stencil; see `boundary` for the flag.
    pub fn laplacian(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_len(f.len())?;
        Ok((0..self.n_sites())
            .map(|x| {
                let s: KahanSum = self.out[x]
                    .iter()
                    .map(|&o| {
                        let e = &self.edges[o.edge];
                        let y = self.other(x, o);
                        e.weight * e.measure * (f[y] - f[x]) / (e.spacing * e.spacing)
                    })
                    .collect();
                s.value() / self.volume[x]
            })
            .collect())
    }

    /// Volume-weighted sum, optionally restricted to masked sites.
    pub fn integrate(&self, f: &[f64], mask: Option<&[bool]>) -> Result<f64> {
        self.check_len(f.len())?;
        if let Some(m) = mask {
            self.check_len(m.len())?;
        }
        let s: KahanSum = (0..self.n_sites())
            .filter(|&x| mask.is_none_or(|m| m[x]))
            .map(|x| self.volume[x] * f[x])
            .collect();
        Ok(s.value())
    }

    /// Sublevel mask `{level <= s}`.
    pub fn sublevel(&self, s: f64) -> Vec<bool> {
        self.level.iter().map(|&l| l <= s).collect()
    }
}

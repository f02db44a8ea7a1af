//! Contours and contour networks: extraction from configurations, the
//! matching bijection, the nesting forest, contour weights, and contour
//! partition functions on torus and `Z^d` regions.

use crate::error::{budget, Error, Result};
use crate::lattice::{cube_offsets, Lattice};
use crate::models::{r_boundary, Configuration, Energy, SpinModel};
use crate::numeric::pairwise_sum;
use crate::polymer::independent_set_sum;
use crate::torus_exact::CompiledTorus;
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const DEFAULT_REGION_BUDGET: u128 = 1 << 22;

/// `G_R(σ)`: vertices `B_R(σ)`, edges between sites sharing a non-constant box.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContourGraph {
    pub boundary: Vec<bool>,
    /// Connected components, each sorted, ordered by smallest site.
    pub components: Vec<Vec<usize>>,
    /// Whether each component has diameter `≥ L/2` (torus only).
    pub large: Vec<bool>,
}

struct Dsu(Vec<usize>);

impl Dsu {
    fn new(n: usize) -> Self {
        Dsu((0..n).collect())
    }
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

pub fn contour_graph(cfg: &Configuration, r: usize) -> Result<ContourGraph> {
    let lat = &cfg.lattice;
    let boundary = r_boundary(cfg, r)?;
    let offs = cube_offsets(lat.dim(), -(r as i64), r as i64);
    let mut dsu = Dsu::new(lat.len());
    let mut buf = vec![0i64; lat.dim()];
    for c in 0..lat.len() {
        let cc = lat.coords(c);
        let mut sites = Vec::with_capacity(offs.len());
        let mut nonconst = false;
        for o in &offs {
            for k in 0..lat.dim() {
                buf[k] = cc[k] + o[k];
            }
            match lat.index(&buf) {
                Some(i) => {
                    nonconst |= cfg.spins[i] != cfg.spins[c];
                    sites.push(i);
                }
                None => {
                    nonconst |= cfg.background != cfg.spins[c];
                }
            }
        }
        if nonconst {
            for w in sites.windows(2) {
                dsu.union(w[0], w[1]);
            }
        }
    }
    let mut by_root: HashMap<usize, usize> = HashMap::new();
    let mut components: Vec<Vec<usize>> = Vec::new();
    for i in 0..lat.len() {
        if boundary[i] {
            let root = dsu.find(i);
            let k = *by_root.entry(root).or_insert_with(|| {
                components.push(Vec::new());
                components.len() - 1
            });
            components[k].push(i);
        }
    }
    let large = components
        .iter()
        .map(|c| lat.is_periodic() && 2 * lat.diameter(c) >= lat.side())
        .collect();
    Ok(ContourGraph {
        boundary,
        components,
        large,
    })
}

/// Exterior and interior components of the complement of `support`.
///
/// On the torus the exterior is the unique complement component with more
/// than half the sites, or empty when `support` has diameter `≥ L/2`. On a
/// window it is the component meeting the window border.
pub fn exterior_interior(lat: &Lattice, support: &[usize]) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
    let mut mask = vec![true; lat.len()];
    for &s in support {
        mask[s] = false;
    }
    let comps = lat.components(&mask);
    let network = lat.is_periodic() && 2 * lat.diameter(support) >= lat.side();
    if network {
        return Ok((Vec::new(), comps));
    }
    let is_ext = |c: &Vec<usize>| {
        if lat.is_periodic() {
            2 * c.len() > lat.len()
        } else {
            c.iter().any(|&i| {
                lat.coords(i)
                    .iter()
                    .zip(lat.shape())
                    .any(|(&x, &s)| x == 0 || x == s as i64 - 1)
            })
        }
    };
    let ext: Vec<usize> = comps.iter().filter(|c| is_ext(c)).flatten().copied().collect();
    let n_ext = comps.iter().filter(|c| is_ext(c)).count();
    if n_ext != 1 {
        return Err(Error::Internal(format!("support has {n_ext} exterior components")));
    }
    let int = comps.into_iter().filter(|c| !is_ext(c)).collect();
    Ok((ext, int))
}

/// A contour: support with its configuration `σ_Y` and induced labels.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Contour {
    pub support: Vec<usize>,
    /// `σ_Y` on the host lattice; on windows the background equals the exterior label.
    pub config: Configuration,
    pub exterior_label: u8,
    pub exterior: Vec<usize>,
    pub interior: Vec<(Vec<usize>, u8)>,
}

/// The union of the large boundary components on a torus.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContourNetwork {
    pub support: Vec<usize>,
    pub config: Configuration,
    /// Complement components with their labels.
    pub components: Vec<(Vec<usize>, u8)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchingCollection {
    pub lattice: Lattice,
    pub background: u8,
    pub contours: Vec<Contour>,
    pub network: Option<ContourNetwork>,
    /// Label of the constant configuration when both are empty.
    pub vacuum_label: Option<u8>,
}

impl Contour {
    /// Sites of `Int_m Y`.
    pub fn interior_with_label(&self, m: u8) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .interior
            .iter()
            .filter(|(_, l)| *l == m)
            .flat_map(|(c, _)| c.iter().copied())
            .collect();
        v.sort_unstable();
        v
    }

    pub fn interior_sites(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.interior.iter().flat_map(|(c, _)| c.iter().copied()).collect();
        v.sort_unstable();
        v
    }

    /// `V(Y) = supp Y ∪ Int Y`.
    pub fn volume(&self) -> Vec<usize> {
        let mut v = self.support.clone();
        v.extend(self.interior_sites());
        v.sort_unstable();
        v
    }

    /// Support as `Z^d` offsets from an anchor site, unwrapped across the torus.
    pub fn embedded(&self) -> (usize, Vec<Vec<i64>>) {
        embed(&self.config.lattice, &self.support)
    }
}

/// Unwrap a set of small diameter into `Z^d` offsets relative to an anchor.
pub fn embed(lat: &Lattice, sites: &[usize]) -> (usize, Vec<Vec<i64>>) {
    let d = lat.dim();
    let coords: Vec<Vec<i64>> = sites.iter().map(|&i| lat.coords(i)).collect();
    let mut start = vec![0i64; d];
    if lat.is_periodic() {
        for k in 0..d {
            let l = lat.shape()[k] as i64;
            let mut xs: Vec<i64> = coords.iter().map(|c| c[k]).collect();
            xs.sort_unstable();
            xs.dedup();
            // the arc starts right after the largest gap
            let mut best = (l - 1 - xs[xs.len() - 1] + xs[0], xs[0]);
            for w in xs.windows(2) {
                if w[1] - w[0] - 1 > best.0 {
                    best = (w[1] - w[0] - 1, w[1]);
                }
            }
            start[k] = best.1;
        }
    } else {
        for k in 0..d {
            start[k] = coords.iter().map(|c| c[k]).min().unwrap_or(0);
        }
    }
    let rel: Vec<Vec<i64>> = coords
        .iter()
        .map(|c| {
            (0..d)
                .map(|k| {
                    let x = c[k] - start[k];
                    if lat.is_periodic() {
                        x.rem_euclid(lat.shape()[k] as i64)
                    } else {
                        x
                    }
                })
                .collect()
        })
        .collect();
    (lat.index(&start).unwrap_or(0), rel)
}

/// Labels of complement components, read from support sites adjacent to them.
fn component_labels(lat: &Lattice, spins: &[u8], support: &[bool], comps: &[Vec<usize>]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(comps.len());
    for c in comps {
        let mut label: Option<u8> = None;
        for &x in c {
            for y in lat.neighbors(x) {
                if support[y] {
                    match label {
                        None => label = Some(spins[y]),
                        Some(l) if l != spins[y] => {
                            return Err(Error::Internal(format!(
                                "spins on the support border of the component at site {x} are not constant"
                            )))
                        }
                        _ => {}
                    }
                }
            }
        }
        out.push(label.ok_or_else(|| Error::Internal("complement component not adjacent to support".into()))?);
    }
    Ok(out)
}

/// Sites of `set` none of whose neighbours lie outside it: `Λ°`.
fn interior_of(lat: &Lattice, set: &[bool]) -> Vec<bool> {
    let rim = lat.inner_boundary(set);
    (0..lat.len()).map(|i| set[i] && !rim[i]).collect()
}

struct Built {
    config: Configuration,
    comps: Vec<(Vec<usize>, u8)>,
}

/// `σ_Λ`: `σ` on `support`, component labels elsewhere; asserts constancy on
/// complement components of `Λ°`.
fn build_object(cfg: &Configuration, support: &[usize]) -> Result<Built> {
    let lat = &cfg.lattice;
    let mut mask = vec![false; lat.len()];
    for &s in support {
        mask[s] = true;
    }
    let comp_mask: Vec<bool> = mask.iter().map(|b| !b).collect();
    let comps = lat.components(&comp_mask);
    let labels = component_labels(lat, &cfg.spins, &mask, &comps)?;
    let mut spins = cfg.spins.clone();
    for (c, &l) in comps.iter().zip(&labels) {
        for &x in c {
            spins[x] = l;
        }
    }
    let inner = interior_of(lat, &mask);
    let outer: Vec<bool> = inner.iter().map(|b| !b).collect();
    for c in lat.components(&outer) {
        if c.iter().any(|&x| spins[x] != spins[c[0]]) {
            return Err(Error::Internal(format!(
                "σ_Y not constant on the complement component of Λ° at site {}",
                c[0]
            )));
        }
    }
    let background = if lat.is_periodic() {
        0
    } else {
        // the window border lies in the exterior component
        let border = (0..lat.len()).find(|&i| !mask[i] && lat.coords(i).contains(&0));
        border.map(|i| spins[i]).unwrap_or(cfg.background)
    };
    Ok(Built {
        config: Configuration {
            lattice: lat.clone(),
            spins,
            background,
        },
        comps: comps.into_iter().zip(labels).collect(),
    })
}

/// Build the contour with the given connected support from a configuration.
pub fn make_contour(cfg: &Configuration, support: Vec<usize>) -> Result<Contour> {
    let lat = &cfg.lattice;
    let built = build_object(cfg, &support)?;
    let (ext, _) = exterior_interior(lat, &support)?;
    let ext_first = *ext.first().ok_or_else(|| Error::Internal("empty exterior".into()))?;
    let mut exterior_label = 0;
    let mut interior = Vec::new();
    for (c, l) in built.comps {
        if c.binary_search(&ext_first).is_ok() {
            exterior_label = l;
        } else {
            interior.push((c, l));
        }
    }
    Ok(Contour {
        support,
        config: built.config,
        exterior_label,
        exterior: ext,
        interior,
    })
}

/// Lemma-3.2 extraction: the unique matching collection of `σ`.
pub fn extract(cfg: &Configuration, r: usize) -> Result<MatchingCollection> {
    let g = contour_graph(cfg, r)?;
    let lat = &cfg.lattice;
    let mut contours = Vec::new();
    let mut net_support = Vec::new();
    for (c, &big) in g.components.iter().zip(&g.large) {
        if big {
            net_support.extend_from_slice(c);
        } else {
            contours.push(make_contour(cfg, c.clone())?);
        }
    }
    let network = if net_support.is_empty() {
        None
    } else {
        net_support.sort_unstable();
        let built = build_object(cfg, &net_support)?;
        Some(ContourNetwork {
            support: net_support,
            config: built.config,
            components: built.comps,
        })
    };
    let vacuum_label = if contours.is_empty() && network.is_none() {
        Some(if lat.is_empty() { cfg.background } else { cfg.spins[0] })
    } else {
        None
    };
    Ok(MatchingCollection {
        lattice: lat.clone(),
        background: cfg.background,
        contours,
        network,
        vacuum_label,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchReport {
    pub ok: bool,
    pub diagnostics: Vec<String>,
    /// A site of the first offending complement component, with the labels it received.
    pub offending: Option<(usize, Vec<u8>)>,
}

struct Resolved {
    spins: Vec<u8>,
    report: MatchReport,
}

fn resolve(col: &MatchingCollection) -> Resolved {
    let lat = &col.lattice;
    let n = lat.len();
    let mut diagnostics = Vec::new();
    let mut offending = None;
    let mut objects: Vec<(&[usize], &Configuration)> =
        col.contours.iter().map(|c| (c.support.as_slice(), &c.config)).collect();
    if let Some(nw) = &col.network {
        objects.push((nw.support.as_slice(), &nw.config));
    }
    let mut owner = vec![usize::MAX; n];
    let mut union = vec![false; n];
    let mut interior_union = vec![false; n];
    for (k, (supp, _)) in objects.iter().enumerate() {
        let mut m = vec![false; n];
        for &s in supp.iter() {
            if owner[s] != usize::MAX {
                diagnostics.push(format!("supports of objects {} and {k} overlap at site {s}", owner[s]));
            }
            owner[s] = k;
            union[s] = true;
            m[s] = true;
        }
        for (i, b) in interior_of(lat, &m).into_iter().enumerate() {
            interior_union[i] |= b;
        }
    }
    let mut spins = vec![0u8; n];
    let outside: Vec<bool> = interior_union.iter().map(|b| !b).collect();
    for c in lat.components(&outside) {
        let mut labels: Vec<u8> = Vec::new();
        for (supp, cfg) in &objects {
            let meets =
                supp.iter().any(|s| c.binary_search(s).is_ok()) || c.iter().any(|&x| supp.binary_search(&x).is_ok());
            if meets {
                let l = cfg.spins[*c.iter().find(|x| !union[**x]).unwrap_or(&c[0])];
                if !labels.contains(&l) {
                    labels.push(l);
                }
            }
        }
        if labels.is_empty() {
            match col.vacuum_label {
                Some(v) if objects.is_empty() => labels.push(v),
                _ => {
                    if objects.is_empty() {
                        diagnostics.push("empty collection without vacuum label".into());
                    } else if !lat.is_periodic() {
                        labels.push(col.background);
                    } else {
                        diagnostics.push(format!("component at site {} meets no object", c[0]));
                    }
                }
            }
        }
        if labels.len() > 1 {
            diagnostics.push(format!("component at site {} receives labels {:?}", c[0], labels));
            if offending.is_none() {
                offending = Some((c[0], labels.clone()));
            }
        }
        if !lat.is_periodic()
            && c.iter().any(|&x| lat.coords(x).contains(&0))
            && labels.first().is_some_and(|&l| l != col.background)
        {
            diagnostics.push("exterior label differs from the window background".into());
        }
        let l = labels.first().copied().unwrap_or(0);
        for &x in &c {
            spins[x] = l;
        }
    }
    for (supp, cfg) in &objects {
        for &s in supp.iter() {
            spins[s] = cfg.spins[s];
        }
    }
    Resolved {
        spins,
        report: MatchReport {
            ok: diagnostics.is_empty(),
            diagnostics,
            offending,
        },
    }
}

/// Disjoint supports and one label per complement component of `∪ (supp)°`.
pub fn is_matching(col: &MatchingCollection) -> MatchReport {
    resolve(col).report
}

/// Inverse of [`extract`].
pub fn reconstruct(col: &MatchingCollection) -> Result<Configuration> {
    let r = resolve(col);
    if let Some((site, labels)) = r.report.offending {
        return Err(Error::LabelMismatch { site, labels });
    }
    if !r.report.ok {
        return Err(Error::InvalidParameter(r.report.diagnostics.join("; ")));
    }
    Ok(Configuration {
        lattice: col.lattice.clone(),
        spins: r.spins,
        background: col.background,
    })
}

/// Parent/child forest of `Λ_0` (index 0: network support, possibly empty)
/// and the contour supports (index `k+1` for contour `k`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Forest {
    pub parent: Vec<Option<usize>>,
    pub children: Vec<Vec<usize>>,
}

impl Forest {
    pub fn depth(&self, mut i: usize) -> usize {
        let mut d = 0;
        while let Some(p) = self.parent[i] {
            d += 1;
            i = p;
        }
        d
    }
}

pub fn nesting_order(col: &MatchingCollection) -> Result<Forest> {
    let lat = &col.lattice;
    let n = lat.len();
    let to_mask = |v: &[usize]| {
        let mut m = vec![false; n];
        for &x in v {
            m[x] = true;
        }
        m
    };
    // (support, interior, exterior) masks
    let mut nodes: Vec<(Vec<bool>, Vec<bool>, Vec<bool>)> = Vec::new();
    let net = col.network.as_ref().map(|w| w.support.clone()).unwrap_or_default();
    let net_mask = to_mask(&net);
    nodes.push((net_mask.clone(), net_mask.iter().map(|b| !b).collect(), vec![false; n]));
    for c in &col.contours {
        nodes.push((to_mask(&c.support), to_mask(&c.interior_sites()), to_mask(&c.exterior)));
    }
    let subset = |a: &[bool], b: &[bool]| a.iter().zip(b).all(|(&x, &y)| !x || y);
    let or = |a: &[bool], b: &[bool]| a.iter().zip(b).map(|(&x, &y)| x || y).collect::<Vec<bool>>();
    let k = nodes.len();
    let mut below = vec![vec![false; k]; k];
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let (si, ii, ei) = &nodes[i];
            let (sj, ij, ej) = &nodes[j];
            let vi = or(si, ii);
            let vj = or(sj, ij);
            let alt1 = subset(&vi, ij) && subset(&or(sj, ej), ei);
            let alt2 = subset(&vj, ii) && subset(&or(si, ei), ej);
            let alt3 = subset(&vi, ej) && subset(&vj, ei);
            let count = alt1 as u8 + alt2 as u8 + alt3 as u8;
            if count != 1 {
                return Err(Error::Internal(format!(
                    "nesting trichotomy fails for supports {i} and {j} ({count} alternatives hold)"
                )));
            }
            below[i][j] = alt1;
        }
    }
    let mut parent = vec![None; k];
    for i in 1..k {
        let mut best: Option<(usize, usize)> = None;
        for j in 0..k {
            if below[i][j] {
                let size = nodes[j].1.iter().filter(|&&b| b).count();
                if best.is_none_or(|(s, _)| size < s) {
                    best = Some((size, j));
                }
            }
        }
        parent[i] = Some(best.map(|b| b.1).unwrap_or(0));
    }
    let mut children = vec![Vec::new(); k];
    for i in 1..k {
        children[parent[i].unwrap()].push(i);
    }
    Ok(Forest { parent, children })
}

/// `E(Y)` as an energy pair: local energies of `σ_Y` summed over the support.
pub fn contour_energy(model: &SpinModel, config: &Configuration, support: &[usize]) -> Energy {
    model.excitation_on(config, support.iter().copied())
}

/// `ρ_z(Y) = e^{-E(Y,z)}`.
pub fn contour_weight(model: &SpinModel, y: &Contour, z: C64) -> C64 {
    contour_energy(model, &y.config, &y.support).boltzmann(z)
}

pub fn network_weight(model: &SpinModel, n: &ContourNetwork, z: C64) -> C64 {
    contour_energy(model, &n.config, &n.support).boltzmann(z)
}

/// `Σ_m e_m|Λ_m| + Σ_Y E(Y) + E(N)` for the extraction of `σ`, as an energy pair.
pub fn energy_decomposition(model: &SpinModel, col: &MatchingCollection) -> Result<Energy> {
    let cfg = reconstruct(col)?;
    let mut covered = vec![false; cfg.lattice.len()];
    let mut e = Energy::ZERO;
    for c in &col.contours {
        e += contour_energy(model, &c.config, &c.support);
        for &s in &c.support {
            covered[s] = true;
        }
    }
    if let Some(nw) = &col.network {
        e += contour_energy(model, &nw.config, &nw.support);
        for &s in &nw.support {
            covered[s] = true;
        }
    }
    for (i, &cov) in covered.iter().enumerate() {
        if !cov {
            e += model.ground_energy(cfg.spins[i]);
        }
    }
    Ok(e)
}

/// Weight `Π_m θ_m^{|Λ_m|} Π_Y ρ(Y) ρ(N)` of a matching collection, as an energy pair.
fn collection_energy(model: &SpinModel, cfg: &Configuration, col: &MatchingCollection, sites: &[bool]) -> Energy {
    let mut covered = vec![false; cfg.lattice.len()];
    let mut e = Energy::ZERO;
    for c in &col.contours {
        e += contour_energy(model, &c.config, &c.support);
        for &s in &c.support {
            covered[s] = true;
        }
    }
    if let Some(nw) = &col.network {
        e += contour_energy(model, &nw.config, &nw.support);
        for &s in &nw.support {
            covered[s] = true;
        }
    }
    for i in 0..covered.len() {
        if sites[i] && !covered[i] {
            e += model.ground_energy(cfg.spins[i]);
        }
    }
    e
}

/// Result of comparing both torus contour representations with `Z_L^per`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub z: C64,
    pub exact: C64,
    pub zl1: C64,
    pub zl2: C64,
    pub max_relative_deviation: f64,
}

fn torus_budget(model: &SpinModel, l: usize, limit: u128) -> Result<()> {
    let states = (model.n_spins() as u128)
        .checked_pow(l.pow(model.d as u32) as u32)
        .unwrap_or(u128::MAX);
    if states > limit {
        return Err(budget("torus_contour_identity_check", states, limit));
    }
    Ok(())
}

fn all_torus_configs(model: &SpinModel, l: usize) -> Result<Vec<Vec<u8>>> {
    let c = CompiledTorus::new(model, l)?;
    let mut out = Vec::new();
    c.for_each_in_block(model, 0, 0, |s, _| out.push(s.to_vec()));
    Ok(out)
}

/// `Z_m(Λ)` for a torus region: contours (never networks) with `V(Y) ⊂ Λ`,
/// external contours being `m`-contours.
pub fn torus_region_partition(model: &SpinModel, l: usize, region: &[bool], m: u8, z: C64) -> Result<C64> {
    let lat = Lattice::torus(model.d, l);
    let r2 = 2 * model.range as i64;
    let offs = cube_offsets(model.d, -r2, r2);
    let free: Vec<usize> = (0..lat.len())
        .filter(|&x| offs.iter().all(|o| region[lat.shift(x, o).unwrap()]))
        .collect();
    let n = model.n_spins();
    let count = (n as u128).checked_pow(free.len() as u32).unwrap_or(u128::MAX);
    if count > DEFAULT_REGION_BUDGET {
        return Err(budget("torus_region_partition", count, DEFAULT_REGION_BUDGET));
    }
    let mut terms = Vec::new();
    for idx in 0..count as usize {
        let mut spins = vec![m; lat.len()];
        let mut r = idx;
        for &x in &free {
            spins[x] = (r % n) as u8;
            r /= n;
        }
        let cfg = Configuration {
            lattice: lat.clone(),
            spins,
            background: 0,
        };
        let col = extract(&cfg, model.range)?;
        if col.network.is_some() || col.vacuum_label.is_some_and(|v| v != m) {
            continue;
        }
        let mut covered = vec![false; lat.len()];
        let mut inside = true;
        for c in &col.contours {
            for x in c.volume() {
                inside &= region[x];
                covered[x] = true;
            }
        }
        if !inside || (0..lat.len()).any(|x| !covered[x] && cfg.spins[x] != m) {
            continue;
        }
        terms.push(collection_energy(model, &cfg, &col, region).boltzmann(z));
    }
    Ok(pairwise_sum(&terms))
}

/// Compare the full contour/network sum and the network-times-`Z_m` sum with
/// exact enumeration on `T_L`.
pub fn torus_contour_identity_check(model: &SpinModel, l: usize, zs: &[C64]) -> Result<Vec<IdentityReport>> {
    torus_budget(model, l, 1 << 20)?;
    let lat = Lattice::torus(model.d, l);
    let configs = all_torus_configs(model, l)?;
    let all = vec![true; lat.len()];
    // ZL1: one term per matching collection, i.e. per configuration.
    let zl1_energies: Vec<Energy> = configs
        .par_iter()
        .map(|s| {
            let cfg = Configuration {
                lattice: lat.clone(),
                spins: s.clone(),
                background: 0,
            };
            let col = extract(&cfg, model.range)?;
            Ok(collection_energy(model, &cfg, &col, &all))
        })
        .collect::<Result<Vec<_>>>()?;
    // ZL2: networks (and the vacuum), each with Z_m on its labelled complement.
    struct NetTerm {
        energy: Energy,
        regions: Vec<(u8, Vec<bool>)>,
    }
    let mut net_terms = Vec::new();
    for s in &configs {
        let cfg = Configuration {
            lattice: lat.clone(),
            spins: s.clone(),
            background: 0,
        };
        let col = extract(&cfg, model.range)?;
        if !col.contours.is_empty() {
            continue;
        }
        if let Some(v) = col.vacuum_label {
            net_terms.push(NetTerm {
                energy: Energy::ZERO,
                regions: vec![(v, all.clone())],
            });
            continue;
        }
        let nw = col.network.as_ref().unwrap();
        let mut regions: Vec<(u8, Vec<bool>)> = Vec::new();
        for (c, label) in &nw.components {
            let slot = match regions.iter().position(|(l, _)| l == label) {
                Some(p) => p,
                None => {
                    regions.push((*label, vec![false; lat.len()]));
                    regions.len() - 1
                }
            };
            for &x in c {
                regions[slot].1[x] = true;
            }
        }
        net_terms.push(NetTerm {
            energy: contour_energy(model, &nw.config, &nw.support),
            regions,
        });
    }
    let mut reports = Vec::new();
    for &z in zs {
        let exact = crate::torus_exact::partition_function_exact(model, l, z)?;
        let zl1 = pairwise_sum(&zl1_energies.iter().map(|e| e.boltzmann(z)).collect::<Vec<_>>());
        let mut cache: HashMap<(u8, Vec<bool>), C64> = HashMap::new();
        let mut parts = Vec::with_capacity(net_terms.len());
        for t in &net_terms {
            let mut w = t.energy.boltzmann(z);
            for (m, region) in &t.regions {
                let key = (*m, region.clone());
                let zm = match cache.get(&key) {
                    Some(v) => *v,
                    None => {
                        let v = torus_region_partition(model, l, region, *m, z)?;
                        cache.insert(key, v);
                        v
                    }
                };
                w *= zm;
            }
            parts.push(w);
        }
        let zl2 = pairwise_sum(&parts);
        let dev = ((zl1 - exact).norm() / exact.norm()).max((zl2 - exact).norm() / exact.norm());
        reports.push(IdentityReport {
            z,
            exact,
            zl1,
            zl2,
            max_relative_deviation: dev,
        });
    }
    Ok(reports)
}

/// A finite subset of `Z^d`, stored sorted.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Region {
    pub points: Vec<Vec<i64>>,
}

impl Region {
    pub fn new(mut points: Vec<Vec<i64>>) -> Self {
        points.sort();
        points.dedup();
        Region { points }
    }

    /// The box `[0, side_0) × … × [0, side_{d-1})`.
    pub fn rect(shape: &[usize]) -> Self {
        let lat = Lattice::window(shape.to_vec());
        Region::new((0..lat.len()).map(|i| lat.coords(i)).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map(|p| p.len()).unwrap_or(0)
    }

    pub fn contains(&self, p: &[i64]) -> bool {
        self.points.binary_search_by(|q| q.as_slice().cmp(p)).is_ok()
    }

    /// Translate so that the bounding box starts at the origin.
    pub fn canonical(&self) -> (Region, Vec<i64>) {
        if self.is_empty() {
            return (self.clone(), Vec::new());
        }
        let d = self.dim();
        let lo: Vec<i64> = (0..d)
            .map(|k| self.points.iter().map(|p| p[k]).min().unwrap())
            .collect();
        let pts = self
            .points
            .iter()
            .map(|p| p.iter().zip(&lo).map(|(a, b)| a - b).collect())
            .collect();
        (Region { points: pts }, lo)
    }

    pub fn bounding_shape(&self) -> Vec<usize> {
        let d = self.dim();
        (0..d)
            .map(|k| {
                let lo = self.points.iter().map(|p| p[k]).min().unwrap();
                let hi = self.points.iter().map(|p| p[k]).max().unwrap();
                (hi - lo + 1) as usize
            })
            .collect()
    }

    /// Points whose `2R`-neighbourhood lies in the region: the only places a
    /// configuration with all contours inside may differ from the boundary spin.
    pub fn free_sites(&self, r: usize) -> Vec<Vec<i64>> {
        if self.is_empty() {
            return Vec::new();
        }
        let offs = cube_offsets(self.dim(), -2 * r as i64, 2 * r as i64);
        self.points
            .iter()
            .filter(|p| {
                offs.iter().all(|o| {
                    let q: Vec<i64> = p.iter().zip(o).map(|(a, b)| a + b).collect();
                    self.contains(&q)
                })
            })
            .cloned()
            .collect()
    }
}

/// A `Z^d` region embedded in a padded window.
pub struct RegionWindow {
    pub lattice: Lattice,
    pub origin: Vec<i64>,
    pub in_region: Vec<bool>,
}

impl RegionWindow {
    pub fn new(region: &Region, pad: usize) -> Self {
        let d = region.dim();
        let lo: Vec<i64> = (0..d)
            .map(|k| region.points.iter().map(|p| p[k]).min().unwrap())
            .collect();
        let shape: Vec<usize> = region.bounding_shape().iter().map(|s| s + 2 * pad).collect();
        let lattice = Lattice::window(shape);
        let origin: Vec<i64> = lo.iter().map(|x| x - pad as i64).collect();
        let mut in_region = vec![false; lattice.len()];
        for p in &region.points {
            in_region[lattice.index(&sub(p, &origin)).unwrap()] = true;
        }
        RegionWindow {
            lattice,
            origin,
            in_region,
        }
    }

    pub fn site(&self, p: &[i64]) -> usize {
        self.lattice.index(&sub(p, &self.origin)).expect("point inside window")
    }

    pub fn point(&self, i: usize) -> Vec<i64> {
        self.lattice
            .coords(i)
            .iter()
            .zip(&self.origin)
            .map(|(a, b)| a + b)
            .collect()
    }
}

fn sub(a: &[i64], b: &[i64]) -> Vec<i64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// A contour of `Z^d` in absolute coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZdContour {
    pub support: Region,
    pub exterior_label: u8,
    /// Interior components with their labels.
    pub interior: Vec<(Region, u8)>,
    /// Sites of `V(Y)` where `σ_Y` differs from the exterior label.
    pub spins: Vec<(Vec<i64>, u8)>,
    pub energy: Energy,
}

impl ZdContour {
    pub fn interior_with_label(&self, m: u8) -> Region {
        Region::new(
            self.interior
                .iter()
                .filter(|(_, l)| *l == m)
                .flat_map(|(r, _)| r.points.iter().cloned())
                .collect(),
        )
    }

    pub fn interior_all(&self) -> Region {
        Region::new(
            self.interior
                .iter()
                .flat_map(|(r, _)| r.points.iter().cloned())
                .collect(),
        )
    }

    pub fn volume(&self) -> Region {
        let mut pts = self.support.points.clone();
        pts.extend(self.interior_all().points);
        Region::new(pts)
    }

    pub fn weight(&self, z: C64) -> C64 {
        self.energy.boltzmann(z)
    }
}

fn to_zd(model: &SpinModel, w: &RegionWindow, cfg: &Configuration, c: &Contour) -> ZdContour {
    let pts = |v: &[usize]| Region::new(v.iter().map(|&i| w.point(i)).collect());
    let mut spins = Vec::new();
    for x in c.volume() {
        if c.config.spins[x] != c.exterior_label {
            spins.push((w.point(x), c.config.spins[x]));
        }
    }
    spins.sort();
    ZdContour {
        support: pts(&c.support),
        exterior_label: c.exterior_label,
        interior: c.interior.iter().map(|(v, l)| (pts(v), *l)).collect(),
        spins,
        energy: contour_energy(model, cfg, &c.support),
    }
}

/// Extract the contours of a finitely supported configuration given by its
/// non-background sites in `Z^d`.
pub fn zd_extract(model: &SpinModel, background: u8, sites: &[(Vec<i64>, u8)]) -> Result<Vec<ZdContour>> {
    if sites.is_empty() {
        return Ok(Vec::new());
    }
    let region = Region::new(sites.iter().map(|(p, _)| p.clone()).collect());
    let w = RegionWindow::new(&region, 2 * model.range + 1);
    let mut spins = vec![background; w.lattice.len()];
    for (p, s) in sites {
        spins[w.site(p)] = *s;
    }
    let cfg = Configuration {
        lattice: w.lattice.clone(),
        spins,
        background,
    };
    let col = extract(&cfg, model.range)?;
    Ok(col.contours.iter().map(|c| to_zd(model, &w, &cfg, c)).collect())
}

/// Enumerate configurations on the free sites of `region` (boundary spin `q`
/// elsewhere) and call `f` with the extracted collection of each one whose
/// contours all satisfy `V(Y) ⊂ Λ`.
fn for_each_admissible<F>(model: &SpinModel, region: &Region, q: u8, limit: u128, mut f: F) -> Result<()>
where
    F: FnMut(&RegionWindow, &Configuration, &MatchingCollection) -> Result<()>,
{
    let w = RegionWindow::new(region, model.range + 1);
    let free: Vec<usize> = region.free_sites(model.range).iter().map(|p| w.site(p)).collect();
    let n = model.n_spins();
    let count = (n as u128).checked_pow(free.len() as u32).unwrap_or(u128::MAX);
    if count > limit {
        return Err(budget("contour_partition_function", count, limit));
    }
    for idx in 0..count as usize {
        let mut spins = vec![q; w.lattice.len()];
        let mut r = idx;
        for &x in &free {
            spins[x] = (r % n) as u8;
            r /= n;
        }
        let cfg = Configuration {
            lattice: w.lattice.clone(),
            spins,
            background: q,
        };
        let col = extract(&cfg, model.range)?;
        let inside = col.contours.iter().all(|c| {
            c.support
                .iter()
                .chain(c.interior_sites().iter())
                .all(|&x| w.in_region[x])
        });
        if inside {
            f(&w, &cfg, &col)?;
        }
    }
    Ok(())
}

/// `Z_q(Λ)` by enumeration of all matching collections in `M(Λ, q)`.
pub fn contour_partition_enumerated(model: &SpinModel, region: &Region, q: u8, z: C64, limit: u128) -> Result<C64> {
    if region.is_empty() {
        return Ok(C64::new(1.0, 0.0));
    }
    let mut terms = Vec::new();
    for_each_admissible(model, region, q, limit, |w, cfg, col| {
        terms.push(collection_energy(model, cfg, col, &w.in_region).boltzmann(z));
        Ok(())
    })?;
    Ok(pairwise_sum(&terms))
}

/// All `q`-contours `Y` with `V(Y) ⊂ Λ`.
pub fn q_contours_in(model: &SpinModel, region: &Region, q: u8, limit: u128) -> Result<Vec<ZdContour>> {
    let mut out = Vec::new();
    for_each_admissible(model, region, q, limit, |w, cfg, col| {
        if col.contours.len() == 1 {
            out.push(to_zd(model, w, cfg, &col.contours[0]));
        }
        Ok(())
    })?;
    Ok(out)
}

/// Memoized contour partition functions `Z_m(Λ)` at a fixed `z`, computed by
/// recursion over external contours and their interiors.
pub struct RegionPartition<'a> {
    pub model: &'a SpinModel,
    pub z: C64,
    pub limit: u128,
    memo: HashMap<(Region, u8), C64>,
    contours: HashMap<(Region, u8), std::sync::Arc<Vec<ZdContour>>>,
}

impl<'a> RegionPartition<'a> {
    pub fn new(model: &'a SpinModel, z: C64) -> Self {
        RegionPartition {
            model,
            z,
            limit: DEFAULT_REGION_BUDGET,
            memo: HashMap::new(),
            contours: HashMap::new(),
        }
    }

    /// `q`-contours of `Λ` in absolute coordinates.
    pub fn contours(&mut self, region: &Region, q: u8) -> Result<Vec<ZdContour>> {
        let (canon, lo) = region.canonical();
        let key = (canon.clone(), q);
        let list = match self.contours.get(&key) {
            Some(l) => l.clone(),
            None => {
                let l = std::sync::Arc::new(q_contours_in(self.model, &canon, q, self.limit)?);
                self.contours.insert(key, l.clone());
                l
            }
        };
        Ok(list.iter().map(|c| shift_contour(c, &lo)).collect())
    }

    /// `Z_q(Λ)` by the external-contour recursion.
    pub fn z(&mut self, region: &Region, q: u8) -> Result<C64> {
        if region.is_empty() {
            return Ok(C64::new(1.0, 0.0));
        }
        let (canon, _) = region.canonical();
        if let Some(v) = self.memo.get(&(canon.clone(), q)) {
            return Ok(*v);
        }
        let theta_q = self.model.theta(q, self.z);
        let ys = self.contours(&canon, q)?;
        // Each external contour contributes ρ(Y) θ_q^{-|V(Y)|} Π_m Z_m(Int_m Y).
        let mut weights = Vec::with_capacity(ys.len());
        let mut volumes = Vec::with_capacity(ys.len());
        for y in &ys {
            let mut w = y.weight(self.z) / theta_q.powi(y.volume().len() as i32);
            for m in self.model.phases_and_members() {
                let int_m = y.interior_with_label(m);
                if !int_m.is_empty() {
                    w *= self.z(&int_m, m)?;
                }
            }
            weights.push(w);
            volumes.push(y.volume());
        }
        let disjoint = |a: &Region, b: &Region| a.points.iter().all(|p| !b.contains(p));
        let sum = independent_set_sum(&weights, |i, j| !disjoint(&volumes[i], &volumes[j]));
        let v = theta_q.powi(canon.len() as i32) * sum;
        self.memo.insert((canon, q), v);
        Ok(v)
    }
}

impl SpinModel {
    /// Every spin value (interior labels range over all of `S`).
    pub fn phases_and_members(&self) -> Vec<u8> {
        (0..self.n_spins() as u8).collect()
    }
}

pub(crate) fn shift_contour(c: &ZdContour, by: &[i64]) -> ZdContour {
    let sh = |r: &Region| Region {
        points: r
            .points
            .iter()
            .map(|p| p.iter().zip(by).map(|(a, b)| a + b).collect())
            .collect(),
    };
    ZdContour {
        support: sh(&c.support),
        exterior_label: c.exterior_label,
        interior: c.interior.iter().map(|(r, l)| (sh(r), *l)).collect(),
        spins: c
            .spins
            .iter()
            .map(|(p, s)| (p.iter().zip(by).map(|(a, b)| a + b).collect(), *s))
            .collect(),
        energy: c.energy,
    }
}

/// `Z_q(Λ) = Σ_{M(Λ,q)} Π_m θ_m^{|Λ_m|} Π_Y ρ_z(Y)` via the recursion.
pub fn contour_partition_function(model: &SpinModel, region: &Region, q: u8, z: C64) -> Result<C64> {
    RegionPartition::new(model, z).z(region, q)
}

/// Outcome of extracting and reconstructing every configuration of a torus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BijectionReport {
    pub d: usize,
    pub l: usize,
    pub total: u64,
    pub round_trips: u64,
    /// Smallest configuration code that failed, if any.
    pub first_failure: Option<u64>,
}

impl BijectionReport {
    pub fn pass(&self) -> bool {
        self.round_trips == self.total
    }
}

/// `reconstruct(extract(σ)) = σ` over all `|S|^{L^d}` configurations of `T_L`.
pub fn bijection_check(n_spins: usize, d: usize, l: usize, r: usize, limit: u128) -> Result<BijectionReport> {
    let n = l.pow(d as u32);
    let total = (n_spins as u128).checked_pow(n as u32).unwrap_or(u128::MAX);
    if total > limit {
        return Err(budget("bijection_check", total, limit));
    }
    let failures: Vec<u64> = (0..total as u64)
        .into_par_iter()
        .filter(|&code| {
            let mut c = code;
            let spins: Vec<u8> = (0..n)
                .map(|_| {
                    let s = (c % n_spins as u64) as u8;
                    c /= n_spins as u64;
                    s
                })
                .collect();
            let cfg = Configuration::torus(d, l, spins);
            !matches!(extract(&cfg, r).and_then(|col| reconstruct(&col)), Ok(back) if back.spins == cfg.spins)
        })
        .collect();
    Ok(BijectionReport {
        d,
        l,
        total: total as u64,
        round_trips: total as u64 - failures.len() as u64,
        first_failure: failures.first().copied(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Normalization;

    fn ising() -> SpinModel {
        SpinModel::ising(2, 1.0, Normalization::Shifted).unwrap()
    }

    #[test]
    fn single_flip_graph_and_contour() {
        let m = ising();
        let mut cfg = Configuration::constant_torus(2, 11, 1);
        cfg.spins[60] = 0;
        let g = contour_graph(&cfg, 1).unwrap();
        assert_eq!(g.components.len(), 1);
        assert_eq!(g.components[0].len(), 25);
        assert_eq!(g.large, vec![false]);
        let col = extract(&cfg, m.range).unwrap();
        assert_eq!(col.contours.len(), 1);
        let y = &col.contours[0];
        assert_eq!(y.exterior_label, 1);
        assert!(y.interior.is_empty());
        assert_eq!(reconstruct(&col).unwrap(), cfg);
    }

    #[test]
    fn ring_support_has_single_site_interior() {
        let lat = Lattice::torus(2, 9);
        let ring: Vec<usize> = (0..9usize)
            .filter(|&k| k != 4)
            .map(|k| lat.index(&[3 + (k / 3) as i64, 3 + (k % 3) as i64]).unwrap())
            .collect();
        let mut ring = ring;
        ring.sort_unstable();
        let (ext, int) = exterior_interior(&lat, &ring).unwrap();
        assert_eq!(ext.len(), 81 - 9);
        assert_eq!(int, vec![vec![lat.index(&[4, 4]).unwrap()]]);
    }

    #[test]
    fn full_block_has_empty_interior() {
        let lat = Lattice::torus(2, 7);
        let block: Vec<usize> = (0..9).map(|k| lat.index(&[2 + k / 3, 2 + k % 3]).unwrap()).collect();
        let (ext, int) = exterior_interior(&lat, &block).unwrap();
        assert!(int.is_empty());
        assert_eq!(ext.len(), 40);
    }

    #[test]
    fn embedding_unwraps_across_the_seam() {
        let lat = Lattice::torus(2, 11);
        let sites = vec![lat.index(&[10, 0]).unwrap(), lat.index(&[0, 0]).unwrap()];
        let (anchor, rel) = embed(&lat, &sites);
        assert_eq!(anchor, lat.index(&[10, 0]).unwrap());
        assert!(rel.contains(&vec![0, 0]) && rel.contains(&vec![1, 0]));
    }

    #[test]
    fn region_free_sites() {
        let r = Region::rect(&[7, 7]);
        assert_eq!(r.free_sites(1).len(), 9);
        assert_eq!(Region::rect(&[4, 4]).free_sites(1).len(), 0);
    }
}

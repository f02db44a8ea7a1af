//! Truncated contour weights, polymer pressures and metastable free energies.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contours::{contour_energy, extract, zd_extract, Region, RegionPartition, ZdContour};
use crate::error::{Error, Result};
use crate::lattice::cube_offsets;
use crate::models::{Configuration, Energy, Regime, SpinModel};
use crate::numeric::{pairwise_sum, wirtinger, zpow};
use crate::polymer::{estimate_c0, independent_set_sum};
use crate::C64;

/// `a_m` below this counts as stable.
pub const STABLE_TOLERANCE: f64 = 1e-9;
/// Default number of defect sites in the pressure series.
pub const DEFAULT_ORDER: usize = 3;
const ZKEY_SCALE: f64 = 1048576.0;

/// The smooth cutoff `χ`: zero below −2, one above −1, a quintic smoothstep between.
#[derive(Clone, Copy, Debug, Default)]
pub struct Mollifier;

impl Mollifier {
    pub fn eval(x: f64) -> (f64, f64, f64) {
        mollifier_eval(x)
    }
}

/// `(χ, χ′, χ″)` at `x`.
pub fn mollifier_eval(x: f64) -> (f64, f64, f64) {
    if x <= -2.0 {
        return (0.0, 0.0, 0.0);
    }
    if x >= -1.0 {
        return (1.0, 0.0, 0.0);
    }
    let t = x + 2.0;
    let s = t * t * t * (t * (6.0 * t - 15.0) + 10.0);
    let ds = 30.0 * t * t * (t - 1.0) * (t - 1.0);
    let dds = 60.0 * t * (t - 1.0) * (2.0 * t - 1.0);
    (s, ds, dds)
}

pub fn chi(x: f64) -> f64 {
    mollifier_eval(x).0
}

/// What to do when a truncated weight exceeds `e^{-(c0+τ/2)|Y|}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapPolicy {
    /// Replace the weight by zero.
    Enforce,
    /// Keep the weight and log the event.
    Record,
}

impl CapPolicy {
    /// `Enforce` when the regime satisfies the truncation hypothesis, `Record` otherwise.
    pub fn for_regime(r: &Regime) -> Self {
        if r.certified() {
            CapPolicy::Enforce
        } else {
            CapPolicy::Record
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapEvent {
    pub phase: u8,
    pub size: usize,
    pub z: C64,
    pub magnitude: f64,
    pub cap: f64,
}

/// Cap activations of one contour class, aggregated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapSummary {
    pub phase: u8,
    pub size: usize,
    pub count: usize,
    /// Largest `|K′|/cap` seen and where.
    pub worst_ratio: f64,
    pub worst_z: C64,
}

/// Thread-safe record of cap activations, aggregated per `(phase, size)` so
/// that its contents do not depend on evaluation order.
#[derive(Debug, Default)]
pub struct CapLog {
    inner: Mutex<BTreeMap<(u8, usize), CapSummary>>,
}

impl CapLog {
    pub fn record(&self, e: CapEvent) {
        let ratio = e.magnitude / e.cap;
        let mut g = self.inner.lock().expect("cap log poisoned");
        let entry = g.entry((e.phase, e.size)).or_insert(CapSummary {
            phase: e.phase,
            size: e.size,
            count: 0,
            worst_ratio: ratio,
            worst_z: e.z,
        });
        entry.count += 1;
        if (ratio, e.z.re, e.z.im) > (entry.worst_ratio, entry.worst_z.re, entry.worst_z.im) {
            entry.worst_ratio = ratio;
            entry.worst_z = e.z;
        }
    }

    pub fn summary(&self) -> Vec<CapSummary> {
        self.inner.lock().expect("cap log poisoned").values().cloned().collect()
    }

    /// Total number of activations.
    pub fn len(&self) -> usize {
        self.inner
            .lock()
            .expect("cap log poisoned")
            .values()
            .map(|s| s.count)
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.inner.lock().expect("cap log poisoned").clear();
    }
}

fn cap_value(regime: &Regime, size: usize) -> f64 {
    (-(regime.c0 + regime.tau / 2.0) * size as f64).exp()
}

/// Where the pressure series lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Geometry {
    Plane { d: usize },
    Torus { d: usize, l: usize },
}

type Points = Vec<Vec<i64>>;

impl Geometry {
    pub fn dim(&self) -> usize {
        match *self {
            Geometry::Plane { d } | Geometry::Torus { d, .. } => d,
        }
    }

    fn wrap(&self, mut p: Vec<i64>) -> Vec<i64> {
        if let Geometry::Torus { l, .. } = *self {
            for x in p.iter_mut() {
                *x = x.rem_euclid(l as i64);
            }
        }
        p
    }

    fn dist(&self, a: &[i64], b: &[i64]) -> i64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| {
                let d = (x - y).abs();
                match *self {
                    Geometry::Plane { .. } => d,
                    Geometry::Torus { l, .. } => d.min(l as i64 - d),
                }
            })
            .max()
            .unwrap_or(0)
    }

    fn shifted(&self, pts: &[Vec<i64>], anchor: &[i64]) -> Vec<(Vec<i64>, usize)> {
        let mut v: Vec<(Vec<i64>, usize)> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| (self.wrap(p.iter().zip(anchor).map(|(a, b)| a - b).collect()), i))
            .collect();
        v.sort();
        v
    }

    /// Canonical translate and the permutation taking it back:
    /// `canonical[k]` is the translate of `pts[perm[k]]`.
    fn canonical(&self, pts: &[Vec<i64>]) -> (Points, Vec<usize>) {
        let best = match *self {
            Geometry::Plane { .. } => {
                let lo = pts.iter().min().expect("nonempty point set");
                self.shifted(pts, lo)
            }
            Geometry::Torus { .. } => pts
                .iter()
                .map(|a| self.shifted(pts, a))
                .min_by(|x, y| x.iter().map(|(p, _)| p).cmp(y.iter().map(|(p, _)| p)))
                .expect("nonempty point set"),
        };
        let perm = best.iter().map(|(_, i)| *i).collect();
        (best.into_iter().map(|(p, _)| p).collect(), perm)
    }

    /// Number of translations fixing a canonical set.
    fn stabilizer(&self, canon: &[Vec<i64>]) -> usize {
        match *self {
            Geometry::Plane { .. } => 1,
            Geometry::Torus { .. } => canon
                .iter()
                .filter(|a| {
                    let s: Points = self.shifted(canon, a).into_iter().map(|(p, _)| p).collect();
                    s == canon
                })
                .count(),
        }
    }

    fn components(&self, pts: &[Vec<i64>], rho: i64) -> Vec<Vec<usize>> {
        let n = pts.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for i in 0..n {
            for j in i + 1..n {
                if self.dist(&pts[i], &pts[j]) <= rho {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..n {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
        groups.into_values().collect()
    }
}

/// Connected (Chebyshev distance ≤ `rho`) sets of at most `n` points, one per translation class.
fn animals(geom: Geometry, rho: i64, n: usize) -> Vec<Points> {
    let d = geom.dim();
    let offs: Vec<Vec<i64>> = cube_offsets(d, -rho, rho)
        .into_iter()
        .filter(|o| o.iter().any(|&x| x != 0))
        .collect();
    let mut out = Vec::new();
    let mut level: BTreeSet<Points> = BTreeSet::new();
    if n == 0 {
        return out;
    }
    level.insert(vec![vec![0; d]]);
    for k in 1..=n {
        out.extend(level.iter().cloned());
        if k == n {
            break;
        }
        let next: BTreeSet<Points> = level
            .par_iter()
            .flat_map_iter(|set| {
                let mut local = Vec::new();
                for p in set {
                    for o in &offs {
                        let q = geom.wrap(p.iter().zip(o).map(|(a, b)| a + b).collect());
                        if set.contains(&q) {
                            continue;
                        }
                        let mut s = set.clone();
                        s.push(q);
                        local.push(geom.canonical(&s).0);
                    }
                }
                local
            })
            .collect();
        level = next;
    }
    out
}

/// Contour data that the weights depend on: size and energy relative to the
/// exterior ground state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContourClass {
    pub size: usize,
    /// `E(Y) − |Y| e_q`, so that `K_q(Y) = e^{-Δa} z^{Δp}` when the interior is empty.
    pub delta: Energy,
    pub occurrences: usize,
}

/// Sparse Laurent polynomial in `(z, φ)`: key `(round(2^20·p), φ-power)`.
type Poly = BTreeMap<(i64, u32), C64>;

trait Coef: Clone + Send + Sync {
    fn zero() -> Self;
    fn add_assign(&mut self, o: &Self);
    fn mul(&self, o: &Self) -> Self;
    fn scale(&self, s: f64) -> Self;
}

impl Coef for C64 {
    fn zero() -> Self {
        C64::new(0.0, 0.0)
    }
    fn add_assign(&mut self, o: &Self) {
        *self += o;
    }
    fn mul(&self, o: &Self) -> Self {
        self * o
    }
    fn scale(&self, s: f64) -> Self {
        self * s
    }
}

impl Coef for Poly {
    fn zero() -> Self {
        BTreeMap::new()
    }
    fn add_assign(&mut self, o: &Self) {
        for (k, v) in o {
            *self.entry(*k).or_insert(C64::new(0.0, 0.0)) += v;
        }
    }
    fn mul(&self, o: &Self) -> Self {
        let mut out = BTreeMap::new();
        for (ka, va) in self {
            for (kb, vb) in o {
                *out.entry((ka.0 + kb.0, ka.1 + kb.1)).or_insert(C64::new(0.0, 0.0)) += va * vb;
            }
        }
        out
    }
    fn scale(&self, s: f64) -> Self {
        self.iter().map(|(k, v)| (*k, v * s)).collect()
    }
}

/// Truncated power series in the defect-count variable `t`; index 0 is unused.
fn series_mul<R: Coef>(a: &[R], b: &[R]) -> Vec<R> {
    let n = a.len() - 1;
    let mut out = vec![R::zero(); n + 1];
    for i in 1..=n {
        for j in 1..=n - i {
            let p = a[i].mul(&b[j]);
            out[i + j].add_assign(&p);
        }
    }
    out
}

/// `log(1 + u)` for `u` without constant term.
fn series_log<R: Coef>(u: &[R]) -> Vec<R> {
    let n = u.len() - 1;
    let mut out = vec![R::zero(); n + 1];
    let mut power = u.to_vec();
    for j in 1..=n {
        let c = if j % 2 == 1 { 1.0 } else { -1.0 } / j as f64;
        for k in 1..=n {
            out[k].add_assign(&power[k].scale(c));
        }
        if j < n {
            power = series_mul(&power, u);
        }
    }
    out
}

/// One term of `Z(C) − 1`: defect count and the contour classes present.
#[derive(Clone, Debug)]
struct ConfigTerm {
    degree: usize,
    classes: Vec<u32>,
}

/// Inclusion–exclusion data of one canonical defect set.
#[derive(Clone, Debug)]
struct MoebiusTerm {
    sign: f64,
    components: Vec<usize>,
}

/// Cluster sum for the pressure of one phase, as a function of the contour
/// activities, organised by defect sets.
///
/// `s_q = Σ_D ψ(D)/|Stab D|` over connected defect sets `D` of at most `order`
/// sites up to translation, where `ψ(D) = Σ_{D′⊂D} (−1)^{|D∖D′|} log Z(D′)`
/// truncated at `order` defects, and `Z(D′)` sums the contour weights of every
/// configuration whose non-`q` sites lie in `D′`.
#[derive(Clone, Debug)]
pub struct PressureSeries {
    pub phase: u8,
    pub order: usize,
    pub geometry: Geometry,
    pub classes: Vec<ContourClass>,
    pub n_sets: usize,
    sets: Vec<Points>,
    stabilizers: Vec<usize>,
    configs: Vec<Vec<ConfigTerm>>,
    moebius: Vec<Vec<MoebiusTerm>>,
    /// Symbolic result per defect order `1..=order`.
    terms: Vec<Vec<((i64, u32), C64)>>,
}

impl PressureSeries {
    pub fn build(model: &SpinModel, q: u8, geometry: Geometry, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidParameter("pressure order must be at least 1".into()));
        }
        if q as usize >= model.n_spins() {
            return Err(Error::InvalidParameter(format!("phase {q} out of range")));
        }
        if geometry.dim() != model.d {
            return Err(Error::InvalidParameter(
                "geometry dimension differs from the model".into(),
            ));
        }
        if let Geometry::Torus { l, .. } = geometry {
            if l < 2 * model.range + 1 {
                return Err(Error::InvalidParameter(format!("torus side {l} below 2R+1")));
            }
        }
        let rho = 4 * model.range as i64;
        let sets = animals(geometry, rho, order);
        let index: HashMap<Points, usize> = sets.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        let stabilizers: Vec<usize> = sets.iter().map(|s| geometry.stabilizer(s)).collect();
        let others: Vec<u8> = (0..model.n_spins() as u8).filter(|&s| s != q).collect();

        // Contours of every connected configuration: (set, spins) -> class list or None.
        type Extracted = Result<Vec<(Vec<u8>, Option<Vec<(usize, Energy)>>)>>;
        let extracted: Vec<Extracted> = sets
            .par_iter()
            .map(|set| {
                let k = set.len();
                let mut out = Vec::new();
                for code in 0..others.len().pow(k as u32) {
                    let spins = decode_spins(code, k, &others);
                    out.push((spins.clone(), contour_summaries(model, q, geometry, set, &spins)?));
                }
                Ok(out)
            })
            .collect();
        let mut class_index: HashMap<(usize, i64, i64, i64), u32> = HashMap::new();
        let mut classes: Vec<ContourClass> = Vec::new();
        let mut weights_of: HashMap<(usize, Vec<u8>), Option<Vec<u32>>> = HashMap::new();
        for (si, ex) in extracted.into_iter().enumerate() {
            for (spins, summ) in ex? {
                let ids = summ.map(|list| {
                    list.into_iter()
                        .map(|(size, delta)| {
                            let key = (
                                size,
                                (delta.p * ZKEY_SCALE).round() as i64,
                                (delta.a.re * 1e9).round() as i64,
                                (delta.a.im * 1e9).round() as i64,
                            );
                            let id = *class_index.entry(key).or_insert_with(|| {
                                classes.push(ContourClass {
                                    size,
                                    delta,
                                    occurrences: 0,
                                });
                                (classes.len() - 1) as u32
                            });
                            classes[id as usize].occurrences += 1;
                            id
                        })
                        .collect()
                });
                weights_of.insert((si, spins), ids);
            }
        }

        // Z(C) − 1 for each canonical set, expanded into configuration terms.
        let configs: Vec<Vec<ConfigTerm>> = sets
            .iter()
            .map(|set| {
                let k = set.len();
                let mut terms = Vec::new();
                for mask in 1usize..(1 << k) {
                    let members: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
                    let pts: Points = members.iter().map(|&i| set[i].clone()).collect();
                    let comps = geometry.components(&pts, rho);
                    let e = members.len();
                    'assign: for code in 0..others.len().pow(e as u32) {
                        let spins = decode_spins(code, e, &others);
                        let mut classes_here = Vec::new();
                        for comp in &comps {
                            let cp: Points = comp.iter().map(|&i| pts[i].clone()).collect();
                            let (canon, perm) = geometry.canonical(&cp);
                            let cs: Vec<u8> = perm.iter().map(|&j| spins[comp[j]]).collect();
                            let idx = index[&canon];
                            match &weights_of[&(idx, cs)] {
                                Some(ids) => classes_here.extend(ids.iter().copied()),
                                None => continue 'assign,
                            }
                        }
                        classes_here.sort_unstable();
                        terms.push(ConfigTerm {
                            degree: e,
                            classes: classes_here,
                        });
                    }
                }
                terms
            })
            .collect();

        let moebius: Vec<Vec<MoebiusTerm>> = sets
            .iter()
            .map(|set| {
                let k = set.len();
                (1usize..(1 << k))
                    .map(|mask| {
                        let members: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
                        let pts: Points = members.iter().map(|&i| set[i].clone()).collect();
                        let components = geometry
                            .components(&pts, rho)
                            .iter()
                            .map(|c| {
                                let cp: Points = c.iter().map(|&i| pts[i].clone()).collect();
                                index[&geometry.canonical(&cp).0]
                            })
                            .collect();
                        MoebiusTerm {
                            sign: if (k - members.len()).is_multiple_of(2) {
                                1.0
                            } else {
                                -1.0
                            },
                            components,
                        }
                    })
                    .collect()
            })
            .collect();

        let mut series = PressureSeries {
            phase: q,
            order,
            geometry,
            n_sets: sets.len(),
            classes,
            sets,
            stabilizers,
            configs,
            moebius,
            terms: Vec::new(),
        };
        let class_poly: Vec<Poly> = series
            .classes
            .iter()
            .map(|c| {
                let mut p = BTreeMap::new();
                p.insert(((c.delta.p * ZKEY_SCALE).round() as i64, 1u32), (-c.delta.a).exp());
                p
            })
            .collect();
        let by_order: Vec<Poly> = series.assemble(&|id| class_poly[id as usize].clone());
        series.terms = by_order
            .into_iter()
            .skip(1)
            .map(|p| p.into_iter().filter(|(_, v)| *v != C64::new(0.0, 0.0)).collect())
            .collect();
        Ok(series)
    }

    /// `Σ_D ψ(D)/|Stab D|` per defect order for activities `w(class)`.
    fn assemble<R: Coef>(&self, w: &(dyn Fn(u32) -> R + Sync)) -> Vec<R> {
        let n = self.order;
        let logs: Vec<Vec<R>> = self
            .configs
            .par_iter()
            .map(|terms| {
                let mut u = vec![R::zero(); n + 1];
                for t in terms {
                    if t.degree > n {
                        continue;
                    }
                    let mut prod: Option<R> = None;
                    for &c in &t.classes {
                        let wc = w(c);
                        prod = Some(match prod {
                            None => wc,
                            Some(p) => p.mul(&wc),
                        });
                    }
                    if let Some(p) = prod {
                        u[t.degree].add_assign(&p);
                    }
                }
                series_log(&u)
            })
            .collect();
        let psis: Vec<Vec<R>> = self
            .moebius
            .par_iter()
            .zip(&self.stabilizers)
            .map(|(terms, &stab)| {
                let mut psi = vec![R::zero(); n + 1];
                for t in terms {
                    for &c in &t.components {
                        for k in 1..=n {
                            psi[k].add_assign(&logs[c][k].scale(t.sign));
                        }
                    }
                }
                psi.iter().map(|x| x.scale(1.0 / stab as f64)).collect()
            })
            .collect();
        let mut total = vec![R::zero(); n + 1];
        for psi in &psis {
            for k in 1..=n {
                total[k].add_assign(&psi[k]);
            }
        }
        total
    }

    /// Activity of a class with empty interior: `φ · e^{-Δa} z^{Δp}`.
    pub fn class_activity(&self, id: usize, z: C64, phi: f64) -> C64 {
        self.classes[id].delta.boltzmann(z) * phi
    }

    /// Pressure at `z` with truncation factor `phi`, from the symbolic form.
    pub fn eval(&self, z: C64, phi: f64) -> C64 {
        let per: Vec<C64> = (1..=self.order).map(|k| self.eval_order(k, z, phi)).collect();
        pairwise_sum(&per)
    }

    /// Contribution of clusters with exactly `k` defects.
    pub fn eval_order(&self, k: usize, z: C64, phi: f64) -> C64 {
        let terms: Vec<C64> = self.terms[k - 1]
            .iter()
            .map(|((zk, pk), c)| c * zpow(z, *zk as f64 / ZKEY_SCALE) * phi.powi(*pk as i32))
            .collect();
        pairwise_sum(&terms)
    }

    /// Pressure for arbitrary per-class activities (used when the cap removes contours).
    pub fn eval_numeric(&self, activity: &[C64]) -> C64 {
        let per = self.assemble(&|id| activity[id as usize]);
        pairwise_sum(&per[1..])
    }

    /// `(p, φ-power, coefficient)` for each term of order `k`.
    pub fn terms_of_order(&self, k: usize) -> Vec<(f64, u32, C64)> {
        self.terms[k - 1]
            .iter()
            .map(|((zk, pk), c)| (*zk as f64 / ZKEY_SCALE, *pk, *c))
            .collect()
    }

    pub fn defect_sets(&self) -> usize {
        self.sets.len()
    }
}

fn decode_spins(mut code: usize, k: usize, others: &[u8]) -> Vec<u8> {
    let mut s = Vec::with_capacity(k);
    for _ in 0..k {
        s.push(others[code % others.len()]);
        code /= others.len();
    }
    s
}

/// `(|Y|, E(Y) − |Y| e_q)` for each contour of the configuration equal to `q`
/// away from `pts`; `None` when the configuration contains a torus network.
fn contour_summaries(
    model: &SpinModel,
    q: u8,
    geometry: Geometry,
    pts: &[Vec<i64>],
    spins: &[u8],
) -> Result<Option<Vec<(usize, Energy)>>> {
    let eq = model.ground_energy(q);
    let check = |interior_empty: bool, exterior: u8| -> Result<()> {
        if exterior != q {
            return Err(Error::Internal(format!(
                "contour exterior {exterior} differs from phase {q}"
            )));
        }
        if !interior_empty {
            return Err(Error::Unsupported(
                "pressure order large enough for contours with interiors".into(),
            ));
        }
        Ok(())
    };
    match geometry {
        Geometry::Plane { .. } => {
            let sites: Vec<(Vec<i64>, u8)> = pts.iter().cloned().zip(spins.iter().copied()).collect();
            let ys: Vec<ZdContour> = zd_extract(model, q, &sites)?;
            let mut out = Vec::new();
            for y in ys {
                check(y.interior.is_empty(), y.exterior_label)?;
                let size = y.support.len();
                out.push((size, y.energy - eq * size as f64));
            }
            Ok(Some(out))
        }
        Geometry::Torus { d, l } => {
            let mut cfg = Configuration::constant_torus(d, l, q);
            for (p, &s) in pts.iter().zip(spins) {
                let i = cfg.lattice.index(p).expect("torus index");
                cfg.spins[i] = s;
            }
            let col = extract(&cfg, model.range)?;
            if col.network.is_some() {
                return Ok(None);
            }
            let mut out = Vec::new();
            for c in &col.contours {
                check(c.interior.is_empty(), c.exterior_label)?;
                let size = c.support.len();
                out.push((size, contour_energy(model, &c.config, &c.support) - eq * size as f64));
            }
            Ok(Some(out))
        }
    }
}

/// `φ_q(z)` for contours with empty interior: `Π_m χ(τ/4 + log|θ_q/θ_m|)`;
/// zero when `θ_q = 0`, factors with `θ_m = 0` count as one.
pub fn empty_interior_phi(model: &SpinModel, q: u8, z: C64, tau: f64) -> f64 {
    let tq = model.theta(q, z).norm();
    if tq == 0.0 {
        return 0.0;
    }
    (0..model.n_spins() as u8)
        .map(|m| {
            let tm = model.theta(m, z).norm();
            if tm == 0.0 {
                1.0
            } else {
                chi(tau / 4.0 + (tq / tm).ln())
            }
        })
        .product()
}

/// Truncation cutoffs: number of defect sites in the pressure series.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cutoffs {
    pub order: usize,
}

impl Default for Cutoffs {
    fn default() -> Self {
        Cutoffs { order: DEFAULT_ORDER }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseFreeEnergy {
    pub phase: u8,
    pub zeta: C64,
    pub s: C64,
    /// `−log|ζ|`; `+∞` when `θ = 0`.
    pub f: f64,
    pub a: f64,
    /// Size of the highest-order contribution to `s`.
    pub error_estimate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetastableFreeEnergy {
    pub z: C64,
    pub phases: Vec<PhaseFreeEnergy>,
    pub f: f64,
    pub stable: Vec<u8>,
    pub order: usize,
    pub certified: bool,
}

impl MetastableFreeEnergy {
    pub fn phase(&self, m: u8) -> Option<&PhaseFreeEnergy> {
        self.phases.iter().find(|p| p.phase == m)
    }
}

/// Finite-volume metastable free energy on `T_L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteVolumeZeta {
    pub zeta: C64,
    pub s: C64,
    /// True when no contour fits on the torus, so that `ζ^{(L)} = θ` exactly.
    pub exact: bool,
    pub note: String,
}

/// Metastable free energies of one model, with pressure series per phase.
pub struct FreeEnergyModel {
    pub model: SpinModel,
    pub regime: Regime,
    pub policy: CapPolicy,
    pub cutoffs: Cutoffs,
    series: Vec<PressureSeries>,
    torus: Mutex<HashMap<(u8, usize), Arc<PressureSeries>>>,
    log: Arc<CapLog>,
}

impl FreeEnergyModel {
    pub fn new(model: SpinModel, regime: Regime, policy: CapPolicy, cutoffs: Cutoffs) -> Result<Self> {
        let phases = model.phases();
        let series = phases
            .iter()
            .map(|&q| PressureSeries::build(&model, q, Geometry::Plane { d: model.d }, cutoffs.order))
            .collect::<Result<Vec<_>>>()?;
        Ok(FreeEnergyModel {
            model,
            regime,
            policy,
            cutoffs,
            series,
            torus: Mutex::new(HashMap::new()),
            log: Arc::new(CapLog::default()),
        })
    }

    /// Regime estimated from the model at the sample points, policy chosen accordingly.
    pub fn with_estimated_regime(model: SpinModel, samples: &[C64], cutoffs: Cutoffs) -> Result<Self> {
        let regime = estimate_regime(&model, samples, cutoffs.order)?;
        let policy = CapPolicy::for_regime(&regime);
        Self::new(model, regime, policy, cutoffs)
    }

    pub fn cap_log(&self) -> Arc<CapLog> {
        self.log.clone()
    }

    pub fn series(&self, q: u8) -> Result<&PressureSeries> {
        self.series
            .iter()
            .find(|s| s.phase == self.model.representative(q))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown phase {q}")))
    }

    pub fn phi(&self, q: u8, z: C64) -> f64 {
        empty_interior_phi(&self.model, q, z, self.regime.tau)
    }

    fn pressure_with(&self, series: &PressureSeries, q: u8, z: C64) -> C64 {
        let phi = self.phi(q, z);
        if phi == 0.0 {
            return C64::new(0.0, 0.0);
        }
        let mut capped = Vec::new();
        for (id, c) in series.classes.iter().enumerate() {
            let mag = series.class_activity(id, z, phi).norm();
            let cap = cap_value(&self.regime, c.size);
            if mag > cap {
                capped.push(id);
                self.log.record(CapEvent {
                    phase: q,
                    size: c.size,
                    z,
                    magnitude: mag,
                    cap,
                });
            }
        }
        if capped.is_empty() || self.policy == CapPolicy::Record {
            return series.eval(z, phi);
        }
        let act: Vec<C64> = (0..series.classes.len())
            .map(|id| {
                if capped.contains(&id) {
                    C64::new(0.0, 0.0)
                } else {
                    series.class_activity(id, z, phi)
                }
            })
            .collect();
        series.eval_numeric(&act)
    }

    /// Polymer pressure `s_q(z)`. Under `Enforce` the regime must be certified.
    pub fn polymer_pressure(&self, q: u8, z: C64) -> Result<C64> {
        if self.policy == CapPolicy::Enforce && !self.regime.certified() {
            return Err(Error::NotCertified(format!(
                "τ = {:.3} below 4c0+16 = {:.3}",
                self.regime.tau,
                4.0 * self.regime.c0 + 16.0
            )));
        }
        let s = self.series(q)?;
        Ok(self.pressure_with(s, q, z))
    }

    /// `ζ_q(z) = θ_q(z) e^{s_q(z)}`.
    pub fn zeta(&self, q: u8, z: C64) -> Result<C64> {
        let theta = self.model.theta(q, z);
        if theta == C64::new(0.0, 0.0) {
            return Ok(theta);
        }
        Ok(theta * self.polymer_pressure(q, z)?.exp())
    }

    /// `ζ`, `f`, `a` for every phase and the stable set at `z`.
    pub fn free_energies(&self, z: C64) -> Result<MetastableFreeEnergy> {
        let mut phases = Vec::new();
        for s in &self.series {
            let q = s.phase;
            let theta = self.model.theta(q, z);
            if theta == C64::new(0.0, 0.0) {
                phases.push(PhaseFreeEnergy {
                    phase: q,
                    zeta: theta,
                    s: C64::new(0.0, 0.0),
                    f: f64::INFINITY,
                    a: f64::INFINITY,
                    error_estimate: 0.0,
                });
                continue;
            }
            let sq = self.polymer_pressure(q, z)?;
            let zeta = theta * sq.exp();
            let err = s.eval_order(s.order, z, self.phi(q, z)).norm();
            phases.push(PhaseFreeEnergy {
                phase: q,
                zeta,
                s: sq,
                f: -zeta.norm().ln(),
                a: 0.0,
                error_estimate: err,
            });
        }
        let f = phases.iter().map(|p| p.f).fold(f64::INFINITY, f64::min);
        for p in phases.iter_mut() {
            if p.f.is_finite() {
                p.a = p.f - f;
            }
        }
        let stable = phases
            .iter()
            .filter(|p| p.a < STABLE_TOLERANCE)
            .map(|p| p.phase)
            .collect();
        Ok(MetastableFreeEnergy {
            z,
            phases,
            f,
            stable,
            order: self.cutoffs.order,
            certified: self.regime.certified(),
        })
    }

    /// `ζ_m^{(L)}` from the torus polymer pressure `|T_L|^{-1} log 𝒵′_m(T_L)`.
    pub fn finite_volume_zeta(&self, m: u8, l: usize, z: C64) -> Result<FiniteVolumeZeta> {
        let q = self.model.representative(m);
        let theta = self.model.theta(q, z);
        // The smallest contour has diameter 4R+1; it is a network once that reaches L/2.
        if 2 * (4 * self.model.range + 1) >= l {
            return Ok(FiniteVolumeZeta {
                zeta: theta,
                s: C64::new(0.0, 0.0),
                exact: true,
                note: "exact: no torus contours".into(),
            });
        }
        let series = {
            let mut cache = self.torus.lock().expect("torus cache poisoned");
            match cache.get(&(q, l)) {
                Some(s) => s.clone(),
                None => {
                    let s = Arc::new(PressureSeries::build(
                        &self.model,
                        q,
                        Geometry::Torus { d: self.model.d, l },
                        self.cutoffs.order,
                    )?);
                    cache.insert((q, l), s.clone());
                    s
                }
            }
        };
        let s = if theta == C64::new(0.0, 0.0) {
            C64::new(0.0, 0.0)
        } else {
            self.pressure_with(&series, q, z)
        };
        Ok(FiniteVolumeZeta {
            zeta: theta * s.exp(),
            s,
            exact: false,
            note: format!("torus clusters with at most {} defects", self.cutoffs.order),
        })
    }
}

/// Estimated `τ`, `M`, `α` and `c0` at the sample points.
///
/// `τ` is the smallest Peierls rate `−log(|ρ(Y)|/θ^{|Y|})/|Y|` over the contours
/// enumerated by the pressure series; `M` bounds `|∂^ℓθ_m|^{1/ℓ}/θ^{1/ℓ}` for
/// `ℓ = 1, 2`; `α` is the smallest separation `|v_m − v_n|` of the logarithmic
/// derivatives among nearly dominant phase pairs.
pub fn estimate_regime(model: &SpinModel, samples: &[C64], order: usize) -> Result<Regime> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("regime estimate needs sample points".into()));
    }
    let plane = Geometry::Plane { d: model.d };
    let series: Vec<PressureSeries> = model
        .phases()
        .into_iter()
        .map(|q| PressureSeries::build(model, q, plane, order.min(2)))
        .collect::<Result<_>>()?;
    let mut tau = f64::INFINITY;
    let mut m_bound: f64 = 0.0;
    let mut alpha = f64::INFINITY;
    for &z in samples {
        let th = model.theta_max(z);
        for s in &series {
            let tq = model.theta(s.phase, z).norm();
            for c in &s.classes {
                let rho = c.delta.boltzmann(z).norm() * tq.powi(c.size as i32);
                let t = -(rho / th.powi(c.size as i32)).ln() / c.size as f64;
                tau = tau.min(t);
            }
        }
        for m in 0..model.n_spins() as u8 {
            let p = model.ground_energy(m).p;
            let r = model.theta(m, z).norm() / th;
            m_bound = m_bound.max(p.abs() * r / z.norm());
            m_bound = m_bound.max((p * (p - 1.0)).abs().sqrt() * r.sqrt() / z.norm());
        }
        let near: Vec<u8> = model
            .phases()
            .into_iter()
            .filter(|&m| model.theta(m, z).norm() >= th * (-1.0f64).exp())
            .collect();
        for (i, &a) in near.iter().enumerate() {
            for &b in &near[i + 1..] {
                alpha = alpha.min((model.dlog_theta(a, z) - model.dlog_theta(b, z)).norm());
            }
        }
    }
    let cap = 2 * (2 * model.range + 1).pow(model.d as u32) - 2;
    let c0 = estimate_c0(model.d, model.n_spins(), model.range, cap)?.c0;
    Ok(Regime {
        tau,
        m: m_bound,
        alpha,
        c0,
    })
}

/// A truncated weight with its ingredients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    /// Untruncated `K_q(Y)`.
    pub k: C64,
    /// `K′_q(Y)`.
    pub k_prime: C64,
    /// `K̃′_q(Y)` after the cap.
    pub k_tilde: C64,
    pub phi: f64,
    pub capped: bool,
}

/// Inductively built truncated weights and partition functions on `Z^d` regions at fixed `z`.
pub struct TruncatedTable<'a> {
    pub model: &'a SpinModel,
    pub z: C64,
    pub regime: Regime,
    pub policy: CapPolicy,
    exact: RegionPartition<'a>,
    zprime: HashMap<(Region, u8), C64>,
    log: Vec<CapEvent>,
}

impl<'a> TruncatedTable<'a> {
    pub fn new(model: &'a SpinModel, z: C64, regime: Regime, policy: CapPolicy) -> Self {
        TruncatedTable {
            model,
            z,
            regime,
            policy,
            exact: RegionPartition::new(model, z),
            zprime: HashMap::new(),
            log: Vec::new(),
        }
    }

    pub fn cap_events(&self) -> &[CapEvent] {
        &self.log
    }

    /// Exact `Z_q(Λ)`.
    pub fn z_exact(&mut self, region: &Region, q: u8) -> Result<C64> {
        self.exact.z(region, q)
    }

    /// `K_q(Y)`, `K′_q(Y)` and `K̃′_q(Y)` for a `q`-contour.
    pub fn truncated_weight(&mut self, y: &ZdContour) -> Result<WeightEntry> {
        let q = y.exterior_label;
        let z = self.z;
        let theta_q = self.model.theta(q, z);
        let size = y.support.len();
        let base = y.weight(z) / theta_q.powi(size as i32);
        let mut ratio_exact = C64::new(1.0, 0.0);
        let mut ratio_prime = C64::new(1.0, 0.0);
        for m in 0..self.model.n_spins() as u8 {
            let int_m = y.interior_with_label(m);
            if int_m.is_empty() || m == q {
                continue;
            }
            let zm = self.exact.z(&int_m, m)?;
            ratio_exact *= zm / self.exact.z(&int_m, q)?;
            if theta_q != C64::new(0.0, 0.0) {
                ratio_prime *= zm / self.z_prime(&int_m, q)?;
            }
        }
        let k = base * ratio_exact;
        if theta_q == C64::new(0.0, 0.0) {
            return Ok(WeightEntry {
                k,
                k_prime: C64::new(0.0, 0.0),
                k_tilde: C64::new(0.0, 0.0),
                phi: 0.0,
                capped: false,
            });
        }
        let int = y.interior_all();
        let zq_int = self.z_prime(&int, q)?;
        let mut phi = 1.0;
        for m in 0..self.model.n_spins() as u8 {
            let theta_m = self.model.theta(m, z);
            if theta_m == C64::new(0.0, 0.0) {
                continue;
            }
            let zm_int = self.z_prime(&int, m)?;
            if zm_int == C64::new(0.0, 0.0) {
                continue;
            }
            let arg = self.regime.tau / 4.0
                + ((zq_int.norm().ln() - zm_int.norm().ln()) / size as f64 + (theta_q.norm() / theta_m.norm()).ln());
            phi *= chi(arg);
        }
        let k_prime = base * phi * ratio_prime;
        let cap = cap_value(&self.regime, size);
        let capped = k_prime.norm() > cap;
        if capped {
            self.log.push(CapEvent {
                phase: q,
                size,
                z,
                magnitude: k_prime.norm(),
                cap,
            });
        }
        let k_tilde = if capped && self.policy == CapPolicy::Enforce {
            C64::new(0.0, 0.0)
        } else {
            k_prime
        };
        Ok(WeightEntry {
            k,
            k_prime,
            k_tilde,
            phi,
            capped,
        })
    }

    /// `Z′_q(Λ) = θ_q^{|Λ|} Σ Π K̃′_q` over families of `q`-contours with disjoint supports.
    pub fn z_prime(&mut self, region: &Region, q: u8) -> Result<C64> {
        if region.is_empty() {
            return Ok(C64::new(1.0, 0.0));
        }
        let theta_q = self.model.theta(q, self.z);
        if theta_q == C64::new(0.0, 0.0) {
            return Ok(theta_q);
        }
        let (canon, _) = region.canonical();
        if let Some(v) = self.zprime.get(&(canon.clone(), q)) {
            return Ok(*v);
        }
        let ys = self.exact.contours(&canon, q)?;
        let mut w = Vec::with_capacity(ys.len());
        for y in &ys {
            w.push(self.truncated_weight(y)?.k_tilde);
        }
        let v = theta_q.powi(canon.len() as i32) * polymer_sum(&ys, &w);
        self.zprime.insert((canon, q), v);
        Ok(v)
    }

    /// `θ_q^{|Λ|} Σ Π K_q` over families of `q`-contours with disjoint supports;
    /// equals `Z_q(Λ)` whenever all interiors have nonzero partition functions.
    pub fn z_from_k(&mut self, region: &Region, q: u8) -> Result<C64> {
        if region.is_empty() {
            return Ok(C64::new(1.0, 0.0));
        }
        let theta_q = self.model.theta(q, self.z);
        let (canon, _) = region.canonical();
        let ys = self.exact.contours(&canon, q)?;
        let mut w = Vec::with_capacity(ys.len());
        for y in &ys {
            w.push(self.truncated_weight(y)?.k);
        }
        Ok(theta_q.powi(canon.len() as i32) * polymer_sum(&ys, &w))
    }

    /// `q`-contours of `Λ`.
    pub fn contours(&mut self, region: &Region, q: u8) -> Result<Vec<ZdContour>> {
        self.exact.contours(region, q)
    }
}

fn polymer_sum(ys: &[ZdContour], w: &[C64]) -> C64 {
    let supports: Vec<&Region> = ys.iter().map(|y| &y.support).collect();
    independent_set_sum(w, |i, j| supports[i].points.iter().any(|p| supports[j].contains(p)))
}

/// `Z′_q(Λ)` at `z`.
pub fn truncated_partition(model: &SpinModel, region: &Region, q: u8, z: C64, regime: Regime) -> Result<C64> {
    TruncatedTable::new(model, z, regime, CapPolicy::for_regime(&regime)).z_prime(region, q)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCPoint {
    pub z: C64,
    /// Phases `m` with `|θ_m| ≥ θ e^{-α}`.
    pub near: Vec<u8>,
    /// `min |v_m − v_n|` over distinct near phases.
    pub separation: Option<f64>,
    /// Smallest distance of a `v_m` from the convex hull of the others, for three or more near phases.
    pub convexity_margin: Option<f64>,
    /// `min |∂ζ_m/ζ_m − ∂ζ_n/ζ_n|` over near phases, when free energies were supplied.
    pub zeta_separation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCReport {
    pub alpha: f64,
    pub points: Vec<AssumptionCPoint>,
    /// Smallest separation attained over all points.
    pub attained_alpha: Option<f64>,
    pub attained_margin: Option<f64>,
    pub pass: bool,
}

/// Numerical check of the nondegeneracy and convex-position conditions on the
/// ground-state weights, and of their analogue for `ζ` when `fe` is given.
pub fn assumption_c_check(
    model: &SpinModel,
    zs: &[C64],
    alpha: f64,
    fe: Option<&FreeEnergyModel>,
) -> Result<AssumptionCReport> {
    let mut points = Vec::new();
    for &z in zs {
        let th = model.theta_max(z);
        let near: Vec<u8> = model
            .phases()
            .into_iter()
            .filter(|&m| model.theta(m, z).norm() >= th * (-alpha).exp())
            .collect();
        let v: Vec<C64> = near.iter().map(|&m| model.dlog_theta(m, z)).collect();
        let separation = min_pair_distance(&v);
        let convexity_margin = (v.len() >= 3).then(|| {
            (0..v.len())
                .map(|i| {
                    let others: Vec<C64> = v.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, x)| *x).collect();
                    hull_distance(v[i], &others)
                })
                .fold(f64::INFINITY, f64::min)
        });
        let zeta_separation = match fe {
            Some(fe) if near.len() >= 2 => {
                let mut w = Vec::new();
                for &m in &near {
                    let f = |x: C64| fe.zeta(m, x).map(|v| v.ln()).unwrap_or(C64::new(f64::NAN, 0.0));
                    w.push(wirtinger(f, z, 1e-5).0);
                }
                min_pair_distance(&w)
            }
            _ => None,
        };
        points.push(AssumptionCPoint {
            z,
            near,
            separation,
            convexity_margin,
            zeta_separation,
        });
    }
    let attained_alpha = points.iter().filter_map(|p| p.separation).reduce(f64::min);
    let attained_margin = points.iter().filter_map(|p| p.convexity_margin).reduce(f64::min);
    let pass = attained_alpha.is_none_or(|a| a >= alpha) && attained_margin.is_none_or(|a| a >= alpha);
    Ok(AssumptionCReport {
        alpha,
        points,
        attained_alpha,
        attained_margin,
        pass,
    })
}

fn min_pair_distance(v: &[C64]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            let d = (v[i] - v[j]).norm();
            best = Some(best.map_or(d, |b: f64| b.min(d)));
        }
    }
    best
}

/// Euclidean distance from `p` to the convex hull of `pts`.
fn hull_distance(p: C64, pts: &[C64]) -> f64 {
    let cross = |a: C64, b: C64| a.re * b.im - a.im * b.re;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            for k in j + 1..pts.len() {
                let (a, b, c) = (pts[i], pts[j], pts[k]);
                let s1 = cross(b - a, p - a);
                let s2 = cross(c - b, p - b);
                let s3 = cross(a - c, p - c);
                if (s1 >= 0.0 && s2 >= 0.0 && s3 >= 0.0) || (s1 <= 0.0 && s2 <= 0.0 && s3 <= 0.0) {
                    return 0.0;
                }
            }
        }
    }
    let mut best = pts.iter().map(|&a| (p - a).norm()).fold(f64::INFINITY, f64::min);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let (a, b) = (pts[i], pts[j]);
            let ab = b - a;
            let t = ((p - a).re * ab.re + (p - a).im * ab.im) / ab.norm_sqr().max(f64::MIN_POSITIVE);
            if (0.0..=1.0).contains(&t) {
                best = best.min((p - (a + ab * t)).norm());
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Normalization;

    #[test]
    fn mollifier_endpoints_and_midpoint() {
        assert_eq!(mollifier_eval(-2.0), (0.0, 0.0, 0.0));
        assert_eq!(mollifier_eval(-1.0), (1.0, 0.0, 0.0));
        assert_eq!(mollifier_eval(0.0).0, 1.0);
        let (v, _, _) = mollifier_eval(-1.5);
        assert!((v - 0.5).abs() < 1e-15);
        let (_, d, dd) = mollifier_eval(-2.0 + 1e-9);
        assert!(d.abs() < 1e-12 && dd.abs() < 1e-6);
    }

    #[test]
    fn series_log_of_one_plus_t() {
        let u: Vec<C64> = vec![
            C64::new(0.0, 0.0),
            C64::new(1.0, 0.0),
            C64::new(0.0, 0.0),
            C64::new(0.0, 0.0),
        ];
        let l = series_log(&u);
        assert!((l[1].re - 1.0).abs() < 1e-15);
        assert!((l[2].re + 0.5).abs() < 1e-15);
        assert!((l[3].re - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn plane_animals_of_size_two() {
        let a = animals(Geometry::Plane { d: 2 }, 4, 2);
        assert_eq!(a.len(), 1 + 40);
    }

    #[test]
    fn torus_canonical_form_is_translation_invariant() {
        let g = Geometry::Torus { d: 2, l: 11 };
        let a = g.canonical(&[vec![3, 4], vec![10, 4]]).0;
        let b = g.canonical(&[vec![0, 0], vec![4, 0]]).0;
        assert_eq!(a, b);
        assert_eq!(g.stabilizer(&a), 1);
    }

    #[test]
    fn ising_first_order_is_single_flip() {
        let m = SpinModel::ising(2, 1.0, Normalization::Shifted).unwrap();
        let s = PressureSeries::build(&m, 1, Geometry::Plane { d: 2 }, 1).unwrap();
        let t = s.terms_of_order(1);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].0, -1.0);
        assert_eq!(t[0].1, 1);
        assert!((t[0].2.re - (-8.0f64).exp()).abs() < 1e-15);
        assert_eq!(s.classes[0].size, 25);
    }

    #[test]
    fn hull_distance_basic() {
        let tri = [C64::new(0.0, 0.0), C64::new(1.0, 0.0), C64::new(0.0, 1.0)];
        assert_eq!(hull_distance(C64::new(0.2, 0.2), &tri), 0.0);
        assert!((hull_distance(C64::new(-1.0, 0.0), &tri) - 1.0).abs() < 1e-15);
    }
}

//! Abstract polymer models and their cluster expansion.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{budget, Error, Result};
use crate::numeric::{pairwise_sum, pairwise_sum_real};
use crate::C64;

pub const DEFAULT_PARTITION_BUDGET: usize = 24;
pub const DEFAULT_URSELL_BUDGET: usize = 8;
const MAX_CLUSTER_POLYMERS: usize = 128;

/// Finite polymer system with a reflexive, symmetric incompatibility relation.
#[derive(Clone, Debug)]
pub struct PolymerSystem {
    weights: Vec<C64>,
    sizes: Vec<f64>,
    a: Vec<f64>,
    incompatible: Vec<Vec<bool>>,
}

/// On-disk form: incompatibility given as an edge list; self-incompatibility is implied.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolymerSystemSpec {
    pub weights: Vec<C64>,
    #[serde(default)]
    pub sizes: Option<Vec<f64>>,
    #[serde(default)]
    pub a: Option<Vec<f64>>,
    pub incompatible: Vec<(usize, usize)>,
}

impl PolymerSystem {
    /// Sizes default to 1 and `a` to the sizes.
    pub fn new(weights: Vec<C64>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = weights.len();
        Self::with_sizes(weights, vec![1.0; n], vec![1.0; n], edges)
    }

    pub fn with_sizes(weights: Vec<C64>, sizes: Vec<f64>, a: Vec<f64>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = weights.len();
        if sizes.len() != n || a.len() != n {
            return Err(Error::InvalidParameter(format!(
                "{n} weights but {} sizes and {} a-values",
                sizes.len(),
                a.len()
            )));
        }
        if let Some(s) = sizes.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParameter(format!("polymer size {s} must be positive")));
        }
        if let Some(x) = a.iter().find(|x| !(**x >= 0.0)) {
            return Err(Error::InvalidParameter(format!("a-value {x} must be nonnegative")));
        }
        let mut incompatible = vec![vec![false; n]; n];
        for (i, row) in incompatible.iter_mut().enumerate() {
            row[i] = true;
        }
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidParameter(format!(
                    "edge ({i},{j}) out of range for {n} polymers"
                )));
            }
            incompatible[i][j] = true;
            incompatible[j][i] = true;
        }
        Ok(Self {
            weights,
            sizes,
            a,
            incompatible,
        })
    }

    pub fn from_spec(spec: &PolymerSystemSpec) -> Result<Self> {
        let n = spec.weights.len();
        let sizes = spec.sizes.clone().unwrap_or_else(|| vec![1.0; n]);
        let a = spec.a.clone().unwrap_or_else(|| sizes.clone());
        Self::with_sizes(spec.weights.clone(), sizes, a, &spec.incompatible)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: PolymerSystemSpec =
            serde_json::from_str(text).map_err(|e| Error::InvalidParameter(format!("polymer system json: {e}")))?;
        Self::from_spec(&spec)
    }

    pub fn to_spec(&self) -> PolymerSystemSpec {
        let mut edges = Vec::new();
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                if self.incompatible[i][j] {
                    edges.push((i, j));
                }
            }
        }
        PolymerSystemSpec {
            weights: self.weights.clone(),
            sizes: Some(self.sizes.clone()),
            a: Some(self.a.clone()),
            incompatible: edges,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weight(&self, i: usize) -> C64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[C64] {
        &self.weights
    }

    pub fn size(&self, i: usize) -> f64 {
        self.sizes[i]
    }

    pub fn a(&self, i: usize) -> f64 {
        self.a[i]
    }

    pub fn incompatible(&self, i: usize, j: usize) -> bool {
        self.incompatible[i][j]
    }

    /// Same relation and sizes, new weights.
    pub fn with_weights(&self, weights: Vec<C64>) -> Result<Self> {
        if weights.len() != self.len() {
            return Err(Error::InvalidParameter("weight vector length mismatch".into()));
        }
        Ok(Self {
            weights,
            ..self.clone()
        })
    }

    pub fn all(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// `Σ_I Π_{i∈I} w_i` over independent sets `I` of the graph given by `incompatible`
/// (which need not mention the diagonal).
pub fn independent_set_sum<F: Fn(usize, usize) -> bool>(weights: &[C64], incompatible: F) -> C64 {
    let n = weights.len();
    let words = n.div_ceil(64).max(1);
    let mut adj = vec![vec![0u64; words]; n];
    for i in 0..n {
        for j in i + 1..n {
            if incompatible(i, j) {
                adj[i][j / 64] |= 1 << (j % 64);
                adj[j][i / 64] |= 1 << (i % 64);
            }
        }
    }
    let mut all = vec![0u64; words];
    for i in 0..n {
        all[i / 64] |= 1 << (i % 64);
    }
    independent_rec(weights, &adj, all)
}

fn independent_rec(w: &[C64], adj: &[Vec<u64>], cand: Vec<u64>) -> C64 {
    // Factor out vertices with no neighbours among the candidates.
    let mut factor = C64::new(1.0, 0.0);
    let mut rest = cand.clone();
    let mut branch = None;
    let mut best_deg = 0;
    for (wi, &word) in cand.iter().enumerate() {
        let mut bits = word;
        while bits != 0 {
            let b = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            let v = wi * 64 + b;
            let deg: u32 = adj[v].iter().zip(&cand).map(|(a, c)| (a & c).count_ones()).sum();
            if deg == 0 {
                factor *= 1.0 + w[v];
                rest[wi] &= !(1 << b);
            } else if deg > best_deg {
                best_deg = deg;
                branch = Some(v);
            }
        }
    }
    let Some(v) = branch else {
        return factor;
    };
    let mut without = rest.clone();
    without[v / 64] &= !(1 << (v % 64));
    let mut with = without.clone();
    for (x, a) in with.iter_mut().zip(&adj[v]) {
        *x &= !a;
    }
    factor * (independent_rec(w, adj, without) + w[v] * independent_rec(w, adj, with))
}

/// Polymer partition function of the subset `subset`.
pub fn polymer_partition_function(sys: &PolymerSystem, subset: &[usize]) -> Result<C64> {
    polymer_partition_function_with(sys, subset, DEFAULT_PARTITION_BUDGET)
}

pub fn polymer_partition_function_with(sys: &PolymerSystem, subset: &[usize], limit: usize) -> Result<C64> {
    if subset.len() > limit {
        return Err(budget(
            "polymer_partition_function",
            subset.len() as u128,
            limit as u128,
        ));
    }
    check_subset(sys, subset)?;
    let w: Vec<C64> = subset.iter().map(|&i| sys.weights[i]).collect();
    Ok(independent_set_sum(&w, |i, j| sys.incompatible[subset[i]][subset[j]]))
}

fn check_subset(sys: &PolymerSystem, subset: &[usize]) -> Result<()> {
    let mut seen = HashSet::new();
    for &i in subset {
        if i >= sys.len() || !seen.insert(i) {
            return Err(Error::InvalidParameter(format!("bad or repeated polymer index {i}")));
        }
    }
    Ok(())
}

/// Exact rational Ursell coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ursell {
    pub num: i64,
    pub den: i64,
}

impl Ursell {
    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn is_zero(&self) -> bool {
        self.num == 0
    }
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Ursell coefficient of the multi-index given as `(polymer, multiplicity)` pairs.
pub fn ursell_coefficient(sys: &PolymerSystem, x: &[(usize, u32)]) -> Result<Ursell> {
    ursell_coefficient_with(sys, x, DEFAULT_URSELL_BUDGET)
}

pub fn ursell_coefficient_with(sys: &PolymerSystem, x: &[(usize, u32)], limit: usize) -> Result<Ursell> {
    let n: usize = x.iter().map(|&(_, m)| m as usize).sum();
    if n > limit || n > 16 {
        return Err(budget("ursell_coefficient", n as u128, limit.min(16) as u128));
    }
    if n == 0 {
        return Err(Error::InvalidParameter("empty multi-index".into()));
    }
    for &(p, _) in x {
        if p >= sys.len() {
            return Err(Error::InvalidParameter(format!("polymer {p} out of range")));
        }
    }
    let mut vertex = Vec::with_capacity(n);
    for &(p, m) in x {
        vertex.extend(std::iter::repeat_n(p, m as usize));
    }
    let c = connected_signed_count(n, |i, j| sys.incompatible[vertex[i]][vertex[j]]);
    let mut den: i64 = 1;
    for &(_, m) in x {
        den *= (1..=m as i64).product::<i64>();
    }
    let g = gcd(c, den).max(1);
    Ok(Ursell {
        num: c / g,
        den: den / g,
    })
}

/// `Σ_g (−1)^{|g|}` over connected spanning subgraphs `g` of the graph on `n` vertices.
fn connected_signed_count<F: Fn(usize, usize) -> bool>(n: usize, edge: F) -> i64 {
    let full = (1usize << n) - 1;
    let mut nbr = vec![0usize; n];
    for i in 0..n {
        for j in 0..n {
            if i != j && edge(i, j) {
                nbr[i] |= 1 << j;
            }
        }
    }
    // The alternating sum over all edge subsets of an induced subgraph vanishes
    // unless it has no edges.
    let independent = |s: usize| (0..n).all(|i| s & (1 << i) == 0 || nbr[i] & s == 0);
    let f: Vec<i64> = (0..=full).map(|s| independent(s) as i64).collect();
    let mut c = vec![0i64; full + 1];
    for s in 1..=full {
        let low = s & s.wrapping_neg();
        let rest = s ^ low;
        let mut acc = f[s];
        // Proper subsets T of s containing the lowest vertex.
        let mut sub = rest;
        loop {
            let t = sub | low;
            if t != s {
                acc -= c[t] * f[s ^ t];
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
        c[s] = acc;
    }
    c[full]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub multiplicity: Vec<(usize, u32)>,
    pub ursell: Ursell,
    pub weight_product: C64,
    pub norm: f64,
}

impl Cluster {
    pub fn z_t(&self) -> C64 {
        self.weight_product * self.ursell.value()
    }

    pub fn count(&self, p: usize) -> u32 {
        self.multiplicity
            .iter()
            .find(|(q, _)| *q == p)
            .map(|(_, m)| *m)
            .unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.multiplicity.iter().map(|(_, m)| *m as usize).sum()
    }
}

/// All clusters supported in `subset` with norm at most `max_norm`, ordered by root polymer.
/// Clusters with vanishing Ursell coefficient are dropped.
pub fn clusters(sys: &PolymerSystem, subset: &[usize], max_norm: f64) -> Result<Vec<Cluster>> {
    check_subset(sys, subset)?;
    let m = subset.len();
    if m > MAX_CLUSTER_POLYMERS {
        return Err(budget("clusters", m as u128, MAX_CLUSTER_POLYMERS as u128));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let min_size = subset.iter().map(|&i| sys.sizes[i]).fold(f64::INFINITY, f64::min);
    let max_copies = ((max_norm + 1e-9) / min_size).floor() as usize;
    if max_copies > DEFAULT_URSELL_BUDGET {
        return Err(Error::Budget {
            stage: "clusters",
            needed: max_copies as u128,
            budget: DEFAULT_URSELL_BUDGET as u128,
            hint: "; lower max_norm",
        });
    }
    let adj: Vec<u128> = (0..m)
        .map(|i| {
            (0..m)
                .filter(|&j| j != i && sys.incompatible[subset[i]][subset[j]])
                .fold(0u128, |acc, j| acc | (1 << j))
        })
        .collect();
    let per_root: Vec<Result<Vec<Cluster>>> = (0..m)
        .into_par_iter()
        .map(|root| {
            let mut supports = Vec::new();
            connected_sets(
                root,
                &adj,
                |set| {
                    let s: f64 = set.iter().map(|&i| sys.sizes[subset[i]]).sum();
                    s <= max_norm + 1e-9
                },
                &mut supports,
            );
            let mut out = Vec::new();
            let mut ursell_cache: HashMap<Vec<(usize, u32)>, Ursell> = HashMap::new();
            for set in supports {
                let polys: Vec<usize> = set.iter().map(|&i| subset[i]).collect();
                let mut mult = vec![1u32; polys.len()];
                loop {
                    let norm: f64 = polys.iter().zip(&mult).map(|(&p, &k)| sys.sizes[p] * k as f64).sum();
                    if norm <= max_norm + 1e-9 {
                        let x: Vec<(usize, u32)> = polys.iter().copied().zip(mult.iter().copied()).collect();
                        let key = pattern_key(sys, &x);
                        let u = match ursell_cache.get(&key) {
                            Some(u) => *u,
                            None => {
                                let u = ursell_coefficient(sys, &x)?;
                                ursell_cache.insert(key, u);
                                u
                            }
                        };
                        if !u.is_zero() {
                            let wp = x
                                .iter()
                                .fold(C64::new(1.0, 0.0), |acc, &(p, k)| acc * sys.weights[p].powu(k));
                            out.push(Cluster {
                                multiplicity: x,
                                ursell: u,
                                weight_product: wp,
                                norm,
                            });
                        }
                    }
                    if !next_multiplicity(&mut mult, &polys, sys, max_norm) {
                        break;
                    }
                }
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for r in per_root {
        all.extend(r?);
    }
    all.sort_by(|a, b| {
        a.norm
            .total_cmp(&b.norm)
            .then_with(|| a.multiplicity.cmp(&b.multiplicity))
    });
    Ok(all)
}

/// The Ursell coefficient depends only on multiplicities and the induced incompatibility pattern.
fn pattern_key(sys: &PolymerSystem, x: &[(usize, u32)]) -> Vec<(usize, u32)> {
    let mut key: Vec<(usize, u32)> = x.iter().map(|&(_, m)| (0, m)).collect();
    let mut bits = 0usize;
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            if sys.incompatible[x[i].0][x[j].0] {
                key.push((i * x.len() + j, 0));
                bits += 1;
            }
        }
    }
    key.push((usize::MAX, bits as u32));
    key
}

fn next_multiplicity(mult: &mut [u32], polys: &[usize], sys: &PolymerSystem, max_norm: f64) -> bool {
    for i in 0..mult.len() {
        mult[i] += 1;
        let norm: f64 = polys
            .iter()
            .zip(mult.iter())
            .map(|(&p, &k)| sys.sizes[p] * k as f64)
            .sum();
        if norm <= max_norm + 1e-9 {
            return true;
        }
        mult[i] = 1;
    }
    false
}

/// Connected vertex sets with minimum element `root`, each produced once.
fn connected_sets<F: Fn(&[usize]) -> bool>(root: usize, adj: &[u128], keep: F, out: &mut Vec<Vec<usize>>) {
    let above = |v: usize| -> u128 { !((1u128 << v) | ((1u128 << v) - 1)) };
    let mut current = vec![root];
    if !keep(&current) {
        return;
    }
    out.push(current.clone());
    let ext = adj[root] & above(root);
    extend(root, adj, &keep, &mut current, adj[root] | (1u128 << root), ext, out);
}

fn extend<F: Fn(&[usize]) -> bool>(
    root: usize,
    adj: &[u128],
    keep: &F,
    current: &mut Vec<usize>,
    closed: u128,
    mut ext: u128,
    out: &mut Vec<Vec<usize>>,
) {
    let above_root = !((1u128 << root) | ((1u128 << root) - 1));
    while ext != 0 {
        let w = ext.trailing_zeros() as usize;
        ext &= ext - 1;
        current.push(w);
        if keep(current) {
            out.push(current.clone());
            let fresh = adj[w] & !closed & above_root;
            extend(root, adj, keep, current, closed | adj[w], ext | fresh, out);
        }
        current.pop();
    }
}

/// Majorant `𝔷₀` together with the decay rate `η` such that `|w(γ)| ≤ 𝔷₀(γ) e^{−η|γ|}`.
#[derive(Clone, Debug)]
pub struct Certificate {
    pub z0: Vec<f64>,
    pub eta: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct KpReport {
    pub pass: bool,
    pub worst_margin: f64,
    pub worst_polymer: Option<usize>,
    pub margins: Vec<f64>,
}

/// Checks `Σ_{γ′≁γ} 𝔷₀(γ′) e^{a(γ′)} ≤ a(γ)` for every polymer.
pub fn kp_certificate(sys: &PolymerSystem, z0: &[f64]) -> KpReport {
    let n = sys.len();
    let margins: Vec<f64> = (0..n)
        .map(|g| {
            let terms: Vec<f64> = (0..n)
                .filter(|&h| sys.incompatible[g][h])
                .map(|h| z0[h] * sys.a[h].exp())
                .collect();
            sys.a[g] - pairwise_sum_real(&terms)
        })
        .collect();
    let (worst_polymer, worst_margin) = margins
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, m)| (Some(i), m))
        .unwrap_or((None, f64::INFINITY));
    KpReport {
        pass: worst_margin >= -1e-15,
        worst_margin,
        worst_polymer,
        margins,
    }
}

/// Truncated expansion of `log Z(A)` together with a rigorous bound on the omitted clusters.
#[derive(Clone, Debug, Serialize)]
pub struct Expansion {
    pub value: C64,
    /// Bound on `Σ_{‖X‖ > k} |𝔷ᵀ(X)|`, hence on `|log Z(A) − value|`.
    pub tail_bound: f64,
    /// Bound on `|exp(value) − Z(A)| / |Z(A)|` implied by `tail_bound`.
    pub relative_bound: f64,
    /// `(norm, Σ|𝔷ᵀ|, Σ𝔷ᵀ)` per attained norm.
    pub by_norm: Vec<(f64, f64, C64)>,
    pub n_clusters: usize,
}

fn check_certificate(sys: &PolymerSystem, cert: &Certificate) -> Result<KpReport> {
    if cert.z0.len() != sys.len() || !(cert.eta >= 0.0) {
        return Err(Error::InvalidParameter(
            "certificate has wrong length or negative eta".into(),
        ));
    }
    let kp = kp_certificate(sys, &cert.z0);
    if !kp.pass {
        return Err(Error::NotCertified(format!(
            "convergence condition fails at polymer {:?} with margin {:.3e}",
            kp.worst_polymer, kp.worst_margin
        )));
    }
    for i in 0..sys.len() {
        let cap = cert.z0[i] * (-cert.eta * sys.sizes[i]).exp();
        if sys.weights[i].norm() > cap * (1.0 + 1e-12) {
            return Err(Error::NotCertified(format!(
                "|w({i})| = {:.3e} exceeds majorant {:.3e}",
                sys.weights[i].norm(),
                cap
            )));
        }
    }
    Ok(kp)
}

fn next_norm_above(sys: &PolymerSystem, subset: &[usize], k: f64) -> f64 {
    let integral = subset
        .iter()
        .all(|&i| (sys.sizes[i] - sys.sizes[i].round()).abs() < 1e-12);
    if integral {
        k.floor() + 1.0
    } else {
        k
    }
}

/// `Σ_{X ⊂ A, ‖X‖ ≤ k} 𝔷ᵀ(X)`; refuses unless the certificate holds.
pub fn log_partition_expansion(
    sys: &PolymerSystem,
    subset: &[usize],
    max_norm: f64,
    cert: &Certificate,
) -> Result<Expansion> {
    check_certificate(sys, cert)?;
    let cl = clusters(sys, subset, max_norm)?;
    let k_next = next_norm_above(sys, subset, max_norm);
    let mass: Vec<f64> = subset.iter().map(|&i| cert.z0[i] * sys.a[i].exp()).collect();
    let tail_bound = (-cert.eta * k_next).exp() * pairwise_sum_real(&mass);
    let terms: Vec<C64> = cl.iter().map(Cluster::z_t).collect();
    let by_norm = group_by_norm(&cl);
    Ok(Expansion {
        value: pairwise_sum(&terms),
        tail_bound,
        relative_bound: tail_bound.exp_m1(),
        by_norm,
        n_clusters: cl.len(),
    })
}

fn group_by_norm(cl: &[Cluster]) -> Vec<(f64, f64, C64)> {
    let mut out: Vec<(f64, f64, C64)> = Vec::new();
    for c in cl {
        let zt = c.z_t();
        match out.last_mut() {
            Some(last) if (last.0 - c.norm).abs() < 1e-9 => {
                last.1 += zt.norm();
                last.2 += zt;
            }
            _ => out.push((c.norm, zt.norm(), zt)),
        }
    }
    out
}

/// Least-squares slope of `log Σ_{‖X‖=j}|𝔷ᵀ|` against `j`; `None` with fewer than two nonzero levels.
pub fn fitted_decay_slope(by_norm: &[(f64, f64, C64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = by_norm
        .iter()
        .filter(|(_, s, _)| *s > 0.0)
        .map(|(k, s, _)| (*k, s.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Derivative of the truncated expansion along a parameter, given `∂w`.
#[derive(Clone, Debug, Serialize)]
pub struct DerivativeExpansion {
    pub value: C64,
    pub tail_bound: f64,
}

/// Term-wise derivative of the truncated expansion. Requires the certificate to
/// dominate both `|w|` and `|∂w|`.
pub fn log_partition_derivative(
    sys: &PolymerSystem,
    dweights: &[C64],
    subset: &[usize],
    max_norm: f64,
    cert: &Certificate,
) -> Result<DerivativeExpansion> {
    check_certificate(sys, cert)?;
    if dweights.len() != sys.len() {
        return Err(Error::InvalidParameter("derivative vector length mismatch".into()));
    }
    for i in 0..sys.len() {
        let cap = cert.z0[i] * (-cert.eta * sys.sizes[i]).exp();
        if dweights[i].norm() > cap * (1.0 + 1e-12) {
            return Err(Error::NotCertified(format!(
                "|∂w({i})| = {:.3e} exceeds majorant {:.3e}",
                dweights[i].norm(),
                cap
            )));
        }
    }
    let cl = clusters(sys, subset, max_norm)?;
    let terms: Vec<C64> = cl
        .iter()
        .map(|c| {
            let mut d = C64::new(0.0, 0.0);
            for (idx, &(p, k)) in c.multiplicity.iter().enumerate() {
                let mut prod = dweights[p] * k as f64 * sys.weights[p].powu(k - 1);
                for (jdx, &(q, kq)) in c.multiplicity.iter().enumerate() {
                    if jdx != idx {
                        prod *= sys.weights[q].powu(kq);
                    }
                }
                d += prod;
            }
            d * c.ursell.value()
        })
        .collect();
    let k = next_norm_above(sys, subset, max_norm);
    let min_size = subset.iter().map(|&i| sys.sizes[i]).fold(f64::INFINITY, f64::min);
    let peak = if cert.eta == 0.0 {
        f64::INFINITY
    } else if k * cert.eta >= 1.0 {
        k * (-cert.eta * k).exp()
    } else {
        1.0 / (std::f64::consts::E * cert.eta)
    };
    let mass: Vec<f64> = subset.iter().map(|&i| cert.z0[i] * sys.a[i].exp()).collect();
    Ok(DerivativeExpansion {
        value: pairwise_sum(&terms),
        tail_bound: peak * pairwise_sum_real(&mass) / min_size.max(f64::MIN_POSITIVE),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TailBoundReport {
    pub polymer: usize,
    pub max_norm: f64,
    pub kp_holds: bool,
    /// `Σ_{X(γ)≥1} |𝔷ᵀ(X)|` over the enumerated clusters.
    pub touching: f64,
    /// `Σ X(γ) |𝔷ᵀ(X)|`.
    pub weighted: f64,
    /// `|w(γ)| e^{a(γ)}`.
    pub weighted_bound: f64,
    /// `Σ_{X ≁ γ} |𝔷ᵀ(X)|`.
    pub incompatible: f64,
    /// `a(γ)`.
    pub incompatible_bound: f64,
    pub holds: bool,
}

/// Evaluates both per-polymer cluster bounds on all clusters of the system up to `max_norm`.
/// The enumerated sums are lower bounds of the full sums, so a violation is conclusive.
pub fn tail_bounds_check(sys: &PolymerSystem, gamma: usize, max_norm: f64) -> Result<TailBoundReport> {
    if gamma >= sys.len() {
        return Err(Error::InvalidParameter(format!("polymer {gamma} out of range")));
    }
    let z0: Vec<f64> = sys.weights.iter().map(|w| w.norm()).collect();
    let kp = kp_certificate(sys, &z0);
    let cl = clusters(sys, &sys.all(), max_norm)?;
    let mut touching = Vec::new();
    let mut weighted = Vec::new();
    let mut incompatible = Vec::new();
    for c in &cl {
        let a = c.z_t().norm();
        let k = c.count(gamma);
        if k > 0 {
            touching.push(a);
            weighted.push(a * k as f64);
        }
        if c.multiplicity.iter().any(|&(p, _)| sys.incompatible[p][gamma]) {
            incompatible.push(a);
        }
    }
    let touching = pairwise_sum_real(&touching);
    let weighted = pairwise_sum_real(&weighted);
    let incompatible = pairwise_sum_real(&incompatible);
    let weighted_bound = sys.weights[gamma].norm() * sys.a[gamma].exp();
    let incompatible_bound = sys.a[gamma];
    let tol = 1e-12;
    Ok(TailBoundReport {
        polymer: gamma,
        max_norm,
        kp_holds: kp.pass,
        touching,
        weighted,
        weighted_bound,
        incompatible,
        incompatible_bound,
        holds: touching <= weighted + tol
            && weighted <= weighted_bound + tol
            && incompatible <= incompatible_bound + tol,
    })
}

/// Result of the contour-counting estimate.
#[derive(Clone, Debug, Serialize)]
pub struct C0Estimate {
    pub c0: f64,
    /// No support fits under the size cap; `c0 = 0` holds vacuously.
    pub vacuous: bool,
    /// Truncated sum at the returned `c0`.
    pub truncated_sum: f64,
    /// Branching-bound estimate of the sizes above the cap at the returned `c0`.
    pub remainder: f64,
    /// Smallest grid value at which truncated sum plus remainder is at most 1.
    pub c0_with_remainder: f64,
    /// `(size, Σ_{supports of that size, V∋0} |V|/|V| weighting)` counts.
    pub counts: Vec<(usize, f64)>,
}

/// Smallest `c0` on a grid of step 0.1 with
/// `Σ_{Y: V(Y)∋0, |Y| ≤ cap} e^{(2−c0)|Y|} ≤ 1`, counting every support
/// (a connected union of interaction boxes) with `|S|^{|supp|}` spin assignments
/// and every phase as exterior.
pub fn estimate_c0(d: usize, n_spins: usize, r: usize, size_cap: usize) -> Result<C0Estimate> {
    if d == 0 || n_spins < 2 || r == 0 {
        return Err(Error::InvalidParameter(
            "estimate_c0 needs d ≥ 1, |S| ≥ 2, R ≥ 1".into(),
        ));
    }
    let side = 2 * r + 1;
    let box_size = side.pow(d as u32);
    let shapes = support_shapes(d, r, size_cap)?;
    // counts[s] = Σ over translation classes of supports of size s of |V|.
    let mut by_size: HashMap<usize, f64> = HashMap::new();
    for (size, vol) in &shapes {
        *by_size.entry(*size).or_insert(0.0) += *vol as f64;
    }
    let mut counts: Vec<(usize, f64)> = by_size.into_iter().collect();
    counts.sort_by_key(|c| c.0);
    let ln_s = (n_spins as f64).ln();
    let truncated = |c0: f64| -> f64 {
        counts
            .iter()
            .map(|&(s, v)| (v.ln() + ln_s + s as f64 * (ln_s + 2.0 - c0)).exp())
            .sum()
    };
    let branching = |c0: f64| -> f64 {
        let x = std::f64::consts::E * (2 * d) as f64 * n_spins as f64 * (2.0 - c0).exp();
        if x >= 1.0 {
            return f64::INFINITY;
        }
        let mut total = 0.0;
        let mut s = size_cap.max(box_size - 1) + 1;
        loop {
            let t = (n_spins as f64) * (s as f64).powi(2) * x.powi(s as i32);
            total += t;
            if t < 1e-18 * total.max(1e-300) || s > size_cap + 100_000 {
                break;
            }
            s += 1;
        }
        total
    };
    if counts.is_empty() {
        let mut c1 = 0.0;
        while branching(c1) > 1.0 {
            c1 = ((c1 + 0.1) * 10.0f64).round() / 10.0;
        }
        return Ok(C0Estimate {
            c0: 0.0,
            vacuous: true,
            truncated_sum: 0.0,
            remainder: branching(0.0),
            c0_with_remainder: c1,
            counts,
        });
    }
    let mut c0 = 0.0f64;
    while truncated(c0) > 1.0 {
        c0 = ((c0 + 0.1) * 10.0).round() / 10.0;
    }
    let mut c1 = c0;
    while truncated(c1) + branching(c1) > 1.0 {
        c1 = ((c1 + 0.1) * 10.0).round() / 10.0;
    }
    Ok(C0Estimate {
        c0,
        vacuous: false,
        truncated_sum: truncated(c0),
        remainder: branching(c0),
        c0_with_remainder: c1,
        counts,
    })
}

/// Distinct (up to translation) connected unions of `(2R+1)^d` boxes with at most
/// `cap` sites, returned as `(|support|, |V(support)|)`.
fn support_shapes(d: usize, r: usize, cap: usize) -> Result<Vec<(usize, usize)>> {
    let side = (2 * r + 1) as i64;
    if (side as usize).pow(d as u32) > cap {
        return Ok(Vec::new());
    }
    let reach = 2 * r as i64;
    let offsets = crate::lattice::cube_offsets(d, -reach, reach);
    let box_sites = crate::lattice::cube_offsets(d, 0, side - 1);
    let mut seen_boxes: HashSet<Vec<Vec<i64>>> = HashSet::new();
    let mut seen_unions: HashSet<Vec<Vec<i64>>> = HashSet::new();
    let mut out = Vec::new();
    let mut stack: Vec<Vec<Vec<i64>>> = vec![vec![vec![0; d]]];
    let mut work = 0u128;
    while let Some(boxes) = stack.pop() {
        work += 1;
        if work > 1 << 22 {
            return Err(Error::Budget {
                stage: "estimate_c0",
                needed: work,
                budget: 1 << 22,
                hint: "; lower size_cap",
            });
        }
        let union = box_union(&boxes, &box_sites);
        let canon = canonical_points(&union);
        if seen_unions.insert(canon.clone()) {
            out.push((canon.len(), volume_of(&canon)));
        }
        for b in &boxes {
            for o in &offsets {
                let nb: Vec<i64> = b.iter().zip(o).map(|(x, y)| x + y).collect();
                if boxes.contains(&nb) {
                    continue;
                }
                let mut next = boxes.clone();
                next.push(nb);
                let u = box_union(&next, &box_sites);
                if u.len() > cap {
                    continue;
                }
                let key = canonical_points(&next);
                if seen_boxes.insert(key.clone()) {
                    stack.push(key);
                }
            }
        }
    }
    Ok(out)
}

fn box_union(boxes: &[Vec<i64>], box_sites: &[Vec<i64>]) -> Vec<Vec<i64>> {
    let mut set: HashSet<Vec<i64>> = HashSet::new();
    for b in boxes {
        for s in box_sites {
            set.insert(b.iter().zip(s).map(|(x, y)| x + y).collect());
        }
    }
    set.into_iter().collect()
}

fn canonical_points(points: &[Vec<i64>]) -> Vec<Vec<i64>> {
    let d = points[0].len();
    let lo: Vec<i64> = (0..d).map(|k| points.iter().map(|p| p[k]).min().unwrap()).collect();
    let mut out: Vec<Vec<i64>> = points
        .iter()
        .map(|p| p.iter().zip(&lo).map(|(x, l)| x - l).collect())
        .collect();
    out.sort();
    out.dedup();
    out
}

/// `|A ∪ holes(A)|` for a finite point set.
fn volume_of(points: &[Vec<i64>]) -> usize {
    use crate::lattice::Lattice;
    let d = points[0].len();
    let hi: Vec<usize> = (0..d)
        .map(|k| points.iter().map(|p| p[k]).max().unwrap() as usize + 3)
        .collect();
    let lat = Lattice::window(hi);
    let mut mask = vec![true; lat.len()];
    for p in points {
        let q: Vec<i64> = p.iter().map(|x| x + 1).collect();
        mask[lat.index(&q).unwrap()] = false;
    }
    let comps = lat.components(&mask);
    let outside = comps
        .iter()
        .find(|c| c.iter().any(|&i| lat.coords(i).contains(&0)))
        .map(|c| c.len())
        .unwrap_or(0);
    lat.len() - outside
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(x: f64) -> C64 {
        C64::new(x, 0.0)
    }

    #[test]
    fn partition_function_small_cases() {
        let s = PolymerSystem::new(vec![c(0.3)], &[]).unwrap();
        assert_eq!(polymer_partition_function(&s, &[0]).unwrap(), c(1.3));
        let s = PolymerSystem::new(vec![c(0.3), c(0.5)], &[]).unwrap();
        assert!((polymer_partition_function(&s, &[0, 1]).unwrap() - c(1.3 * 1.5)).norm() < 1e-15);
        let s = PolymerSystem::new(vec![c(0.3), c(0.5)], &[(0, 1)]).unwrap();
        assert!((polymer_partition_function(&s, &[0, 1]).unwrap() - c(1.8)).norm() < 1e-15);
        assert_eq!(polymer_partition_function(&s, &[]).unwrap(), c(1.0));
    }

    #[test]
    fn partition_function_budget() {
        let s = PolymerSystem::new(vec![c(0.1); 30], &[]).unwrap();
        assert!(matches!(
            polymer_partition_function(&s, &s.all()),
            Err(Error::Budget { .. })
        ));
    }

    #[test]
    fn ursell_small_cases() {
        let s = PolymerSystem::new(vec![c(0.1), c(0.2)], &[(0, 1)]).unwrap();
        assert_eq!(ursell_coefficient(&s, &[(0, 1)]).unwrap(), Ursell { num: 1, den: 1 });
        assert_eq!(ursell_coefficient(&s, &[(0, 2)]).unwrap(), Ursell { num: -1, den: 2 });
        assert_eq!(
            ursell_coefficient(&s, &[(0, 1), (1, 1)]).unwrap(),
            Ursell { num: -1, den: 1 }
        );
        assert_eq!(ursell_coefficient(&s, &[(0, 3)]).unwrap(), Ursell { num: 1, den: 3 });
        let t = PolymerSystem::new(vec![c(0.1), c(0.2)], &[]).unwrap();
        assert!(ursell_coefficient(&t, &[(0, 1), (1, 1)]).unwrap().is_zero());
    }

    #[test]
    fn single_polymer_series() {
        let w = 0.1;
        let s = PolymerSystem::new(vec![c(w)], &[]).unwrap();
        let cert = Certificate { z0: vec![w], eta: 0.0 };
        let e = log_partition_expansion(&s, &[0], 3.0, &cert).unwrap();
        assert!((e.value - c(w - w * w / 2.0 + w * w * w / 3.0)).norm() < 1e-15);
        let empty = log_partition_expansion(&s, &[], 3.0, &cert).unwrap();
        assert_eq!(empty.value, c(0.0));
        assert_eq!(empty.tail_bound, 0.0);
    }

    #[test]
    fn expansion_refuses_without_certificate() {
        let s = PolymerSystem::new(vec![c(0.9)], &[]).unwrap();
        let cert = Certificate {
            z0: vec![0.9],
            eta: 0.0,
        };
        assert!(matches!(
            log_partition_expansion(&s, &[0], 3.0, &cert),
            Err(Error::NotCertified(_))
        ));
    }

    #[test]
    fn kp_single_polymer_threshold() {
        let s = PolymerSystem::new(vec![c(0.0)], &[]).unwrap();
        assert!(kp_certificate(&s, &[0.0]).pass);
        let e = std::f64::consts::E;
        assert!(kp_certificate(&s, &[0.99 / e]).pass);
        assert!(!kp_certificate(&s, &[1.01 / e]).pass);
    }

    #[test]
    fn tail_bounds_single_polymer() {
        let s = PolymerSystem::new(vec![c(0.1)], &[]).unwrap();
        let r = tail_bounds_check(&s, 0, 8.0).unwrap();
        let full = -(0.9f64).ln();
        assert!((r.touching - full).abs() < 1e-9);
        assert!(r.holds);
        assert!((r.weighted_bound - 0.1 * std::f64::consts::E).abs() < 1e-15);
        let z = PolymerSystem::new(vec![c(0.0)], &[]).unwrap();
        let r = tail_bounds_check(&z, 0, 4.0).unwrap();
        assert_eq!(r.touching, 0.0);
        assert_eq!(r.weighted_bound, 0.0);
    }

    #[test]
    fn connected_set_enumeration_counts() {
        // Path 0-1-2: connected sets are 6.
        let adj = vec![0b010u128, 0b101, 0b010];
        let mut out = Vec::new();
        for r in 0..3 {
            connected_sets(r, &adj, |_| true, &mut out);
        }
        assert_eq!(out.len(), 6);
    }

    #[test]
    fn c0_vacuous_and_monotone() {
        let v = estimate_c0(2, 2, 1, 8).unwrap();
        assert!(v.vacuous);
        assert_eq!(v.c0, 0.0);
        let a = estimate_c0(2, 2, 1, 16).unwrap();
        let b = estimate_c0(2, 2, 1, 20).unwrap();
        assert!(!a.vacuous);
        assert!(b.c0 >= a.c0);
        let c = estimate_c0(2, 4, 1, 16).unwrap();
        assert!(c.c0 >= a.c0);
    }

    #[test]
    fn json_round_trip() {
        let s = PolymerSystem::new(vec![c(0.1), C64::new(0.0, 0.2)], &[(0, 1)]).unwrap();
        let text = serde_json::to_string(&s.to_spec()).unwrap();
        let t = PolymerSystem::from_json(&text).unwrap();
        assert!(t.incompatible(0, 1));
        assert_eq!(t.weight(1), C64::new(0.0, 0.2));
    }
}

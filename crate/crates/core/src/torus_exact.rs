//! Exact periodic partition functions `Z_L^per(z)` by enumeration and by
//! transfer matrix, the partition polynomial, and its roots.

use crate::error::{budget, Error, Result};
use crate::lattice::Lattice;
use crate::models::{Energy, SpinModel, Term};
use crate::numeric::{horner, pairwise_sum};
use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const DEFAULT_ENUMERATION_BUDGET: u128 = 1 << 27;
pub const DEFAULT_MATRIX_BUDGET: usize = 1 << 12;

/// Number of leading sites fixed per enumeration block; depends only on the
/// problem size so block boundaries never depend on the worker count.
fn block_prefix(n_spins: usize, n_sites: usize) -> usize {
    let mut m = 0;
    while m < n_sites && n_spins.pow(m as u32) < 256 && n_sites - m > 4 {
        m += 1;
    }
    m
}

/// All interaction translates on `T_L`, with per-site incidence lists.
pub(crate) struct CompiledTorus {
    pub lattice: Lattice,
    pub n_spins: usize,
    /// (term index, sites of the translate)
    pub translates: Vec<(usize, Vec<usize>)>,
    pub incidence: Vec<Vec<usize>>,
}

impl CompiledTorus {
    pub fn new(model: &SpinModel, l: usize) -> Result<Self> {
        if l < 2 * model.range + 1 {
            return Err(Error::InvalidParameter(format!(
                "torus side {l} below 2R+1 = {}",
                2 * model.range + 1
            )));
        }
        let lattice = Lattice::torus(model.d, l);
        let mut translates = Vec::new();
        let mut incidence = vec![Vec::new(); lattice.len()];
        for (ti, t) in model.terms.iter().enumerate() {
            for a in 0..lattice.len() {
                let sites: Vec<usize> = t.shape.iter().map(|o| lattice.shift(a, o).unwrap()).collect();
                for &s in &sites {
                    if !incidence[s].contains(&translates.len()) {
                        incidence[s].push(translates.len());
                    }
                }
                translates.push((ti, sites));
            }
        }
        Ok(CompiledTorus {
            lattice,
            n_spins: model.n_spins(),
            translates,
            incidence,
        })
    }

    fn translate_energy(&self, model: &SpinModel, k: usize, spins: &[u8]) -> Energy {
        let (ti, sites) = &self.translates[k];
        model.terms[*ti].table[Term::index(sites.iter().map(|&s| spins[s]), self.n_spins)]
    }

    pub fn energy(&self, model: &SpinModel, spins: &[u8]) -> Energy {
        let mut e = Energy::ZERO;
        for k in 0..self.translates.len() {
            e += self.translate_energy(model, k, spins);
        }
        e
    }

    fn site_energy(&self, model: &SpinModel, site: usize, spins: &[u8]) -> Energy {
        let mut e = Energy::ZERO;
        for &k in &self.incidence[site] {
            e += self.translate_energy(model, k, spins);
        }
        e
    }

    /// Visit every configuration in one block: the first `prefix` sites are
    /// fixed to `block`'s digits, the rest run through a reflected Gray code
    /// with incremental energy updates.
    pub fn for_each_in_block<F: FnMut(&[u8], Energy)>(&self, model: &SpinModel, prefix: usize, block: usize, mut f: F) {
        let n = self.n_spins;
        let sites = self.lattice.len();
        let mut spins = vec![0u8; sites];
        let mut b = block;
        for j in (0..prefix).rev() {
            spins[j] = (b % n) as u8;
            b /= n;
        }
        let free: Vec<usize> = (prefix..sites).collect();
        let mut dir = vec![1i8; free.len()];
        let mut energy = self.energy(model, &spins);
        let mut steps = 0u64;
        loop {
            f(&spins, energy);
            let mut j = 0;
            while j < free.len() {
                let v = spins[free[j]] as i32 + dir[j] as i32;
                if v >= 0 && v < n as i32 {
                    break;
                }
                dir[j] = -dir[j];
                j += 1;
            }
            if j == free.len() {
                break;
            }
            let site = free[j];
            let before = self.site_energy(model, site, &spins);
            spins[site] = (spins[site] as i32 + dir[j] as i32) as u8;
            let after = self.site_energy(model, site, &spins);
            energy += after - before;
            steps += 1;
            if steps.is_multiple_of(1024) {
                energy = self.energy(model, &spins);
            }
        }
    }
}

fn check_budget(model: &SpinModel, l: usize, limit: u128) -> Result<u128> {
    let sites = l.pow(model.d as u32) as u32;
    let states = (model.n_spins() as u128).checked_pow(sites).unwrap_or(u128::MAX);
    if states > limit {
        return Err(Error::Budget {
            stage: "partition_function_exact",
            needed: states,
            budget: limit,
            hint: "; use transfer_matrix_pf for larger tori",
        });
    }
    Ok(states)
}

/// `Z_L^per(z)` by full enumeration with the default budget.
pub fn partition_function_exact(model: &SpinModel, l: usize, z: C64) -> Result<C64> {
    partition_function_exact_with(model, l, z, DEFAULT_ENUMERATION_BUDGET)
}

pub fn partition_function_exact_with(model: &SpinModel, l: usize, z: C64, limit: u128) -> Result<C64> {
    check_budget(model, l, limit)?;
    let c = CompiledTorus::new(model, l)?;
    let prefix = block_prefix(c.n_spins, c.lattice.len());
    let blocks = c.n_spins.pow(prefix as u32);
    let parts: Vec<C64> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = C64::new(0.0, 0.0);
            c.for_each_in_block(model, prefix, b, |_, e| acc += e.boltzmann(z));
            acc
        })
        .collect();
    Ok(pairwise_sum(&parts))
}

/// `Z_L^per(z) = tr T^L` with the layer-to-layer transfer matrix (range 1 only).
pub fn transfer_matrix_pf(model: &SpinModel, l: usize, z: C64) -> Result<C64> {
    transfer_matrix_pf_with(model, l, z, DEFAULT_MATRIX_BUDGET)
}

pub fn transfer_matrix_pf_with(model: &SpinModel, l: usize, z: C64, limit: usize) -> Result<C64> {
    let t = transfer_matrix(model, l, z, limit)?;
    let mut p = t.clone();
    for _ in 1..l {
        p = &p * &t;
    }
    Ok(p.trace())
}

/// The transfer matrix between consecutive layers `x_0 = const`.
pub fn transfer_matrix(model: &SpinModel, l: usize, z: C64, limit: usize) -> Result<DMatrix<C64>> {
    if model.range != 1 {
        return Err(Error::Unsupported(
            "transfer matrix needs interaction range R = 1".into(),
        ));
    }
    if l < 3 {
        return Err(Error::InvalidParameter("torus side below 2R+1".into()));
    }
    let d = model.d;
    let n = model.n_spins();
    let layer = Lattice::torus(d - 1, l);
    let layer_sites = layer.len();
    let dim = (n as u128).checked_pow(layer_sites as u32).unwrap_or(u128::MAX);
    if dim > limit as u128 {
        return Err(budget("transfer_matrix_pf", dim, limit as u128));
    }
    let dim = dim as usize;
    // Each term is placed with its smallest axis-0 offset on layer 0.
    let mut placed: Vec<(usize, Vec<(bool, usize)>)> = Vec::new();
    for (ti, t) in model.terms.iter().enumerate() {
        let lo = t.shape.iter().map(|o| o[0]).min().unwrap();
        for a in 0..layer_sites {
            let ac = layer.coords(a);
            let sites = t
                .shape
                .iter()
                .map(|o| {
                    let rest: Vec<i64> = (1..d).map(|k| ac[k - 1] + o[k]).collect();
                    ((o[0] - lo) == 1, layer.index(&rest).unwrap())
                })
                .collect();
            placed.push((ti, sites));
        }
    }
    let decode = |mut s: usize| {
        let mut out = vec![0u8; layer_sites];
        for j in (0..layer_sites).rev() {
            out[j] = (s % n) as u8;
            s /= n;
        }
        out
    };
    let states: Vec<Vec<u8>> = (0..dim).map(decode).collect();
    let rows: Vec<Vec<C64>> = (0..dim)
        .into_par_iter()
        .map(|i| {
            (0..dim)
                .map(|j| {
                    let mut e = Energy::ZERO;
                    for (ti, sites) in &placed {
                        let spins = sites
                            .iter()
                            .map(|&(upper, s)| if upper { states[j][s] } else { states[i][s] });
                        e += model.terms[*ti].energy(spins, n);
                    }
                    e.boltzmann(z)
                })
                .collect()
        })
        .collect();
    Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
}

/// `Z_L^per(z) = z^{low} Σ_k c_k z^k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPolynomial {
    pub coefficients: Vec<C64>,
    pub low_power: i64,
    pub tag: String,
}

impl PartitionPolynomial {
    pub fn degree(&self) -> usize {
        self.coefficients.len().saturating_sub(1)
    }

    pub fn eval(&self, z: C64) -> C64 {
        horner(&self.coefficients, z).0 * z.powi(self.low_power as i32)
    }
}

/// Exact coefficients of `Z_L^per` grouped by total `z`-power.
pub fn partition_polynomial(model: &SpinModel, l: usize) -> Result<PartitionPolynomial> {
    partition_polynomial_with(model, l, DEFAULT_ENUMERATION_BUDGET)
}

pub fn partition_polynomial_with(model: &SpinModel, l: usize, limit: u128) -> Result<PartitionPolynomial> {
    if !model.is_polynomial() {
        return Err(Error::NotPolynomial(format!(
            "{} has non-integer z-exponents; use the shifted normalization",
            model.name
        )));
    }
    check_budget(model, l, limit)?;
    let c = CompiledTorus::new(model, l)?;
    let (mut lo, mut hi) = (0i64, 0i64);
    for t in &model.terms {
        let ps: Vec<i64> = t.table.iter().map(|e| e.p.round() as i64).collect();
        let count = c.lattice.len() as i64;
        lo += count * ps.iter().min().unwrap();
        hi += count * ps.iter().max().unwrap();
    }
    let width = (hi - lo + 1) as usize;
    let prefix = block_prefix(c.n_spins, c.lattice.len());
    let blocks = c.n_spins.pow(prefix as u32);
    let parts: Vec<Vec<C64>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut bins = vec![C64::new(0.0, 0.0); width];
            c.for_each_in_block(model, prefix, b, |_, e| {
                let k = (e.p.round() as i64 - lo) as usize;
                bins[k] += (-e.a).exp();
            });
            bins
        })
        .collect();
    let mut coefficients: Vec<C64> = (0..width)
        .map(|k| pairwise_sum(&parts.iter().map(|p| p[k]).collect::<Vec<_>>()))
        .collect();
    let mut low = lo;
    while coefficients.len() > 1 && coefficients[0] == C64::new(0.0, 0.0) {
        coefficients.remove(0);
        low += 1;
    }
    while coefficients.len() > 1 && *coefficients.last().unwrap() == C64::new(0.0, 0.0) {
        coefficients.pop();
    }
    Ok(PartitionPolynomial {
        coefficients,
        low_power: low,
        tag: format!("{} d={} L={}", model.name, model.d, l),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactZeroSet {
    pub roots: Vec<C64>,
    /// Largest `|p(root)| / Σ|c_k||root|^k` after polishing.
    pub residual: f64,
    pub notes: Vec<String>,
}

/// Scale rows and columns by powers of two to equalize norms.
fn balance(m: &mut DMatrix<C64>) {
    let n = m.nrows();
    let radix = 2.0f64;
    let mut converged = false;
    while !converged {
        converged = true;
        for i in 0..n {
            let mut c = 0.0;
            let mut r = 0.0;
            for j in 0..n {
                if j != i {
                    c += m[(j, i)].norm();
                    r += m[(i, j)].norm();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let (mut c2, mut r2) = (c, r);
            while c2 < r2 / radix {
                c2 *= radix;
                r2 /= radix;
                f *= radix;
            }
            while c2 >= r2 * radix {
                c2 /= radix;
                r2 *= radix;
                f /= radix;
            }
            if (c2 + r2) < 0.95 * s {
                converged = false;
                for j in 0..n {
                    m[(i, j)] /= f;
                    m[(j, i)] *= f;
                }
            }
        }
    }
}

/// All roots of `Σ c_k z^k`: balanced companion-matrix eigenvalues, then five
/// Newton steps on the original coefficients.
pub fn polynomial_roots(coeffs: &[C64]) -> Result<ExactZeroSet> {
    let mut notes = Vec::new();
    let scale = coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max);
    if scale == 0.0 || coeffs.len() < 2 {
        return Err(Error::InvalidParameter("polynomial of degree >= 1 required".into()));
    }
    let tiny = scale * 1e-300;
    let mut hi = coeffs.len() - 1;
    while hi > 0 && coeffs[hi].norm() <= tiny {
        hi -= 1;
    }
    if hi < coeffs.len() - 1 {
        notes.push(format!(
            "degenerate leading coefficient: deflated degree {} -> {}",
            coeffs.len() - 1,
            hi
        ));
    }
    let mut lo = 0;
    while lo < hi && coeffs[lo].norm() <= tiny {
        lo += 1;
    }
    let mut roots = vec![C64::new(0.0, 0.0); lo];
    if lo > 0 {
        notes.push(format!("root z = 0 with multiplicity {lo}"));
    }
    let core = &coeffs[lo..=hi];
    let deg = core.len() - 1;
    if deg == 0 {
        return Err(Error::InvalidParameter("polynomial is constant after deflation".into()));
    }
    let lead = core[deg];
    let mut comp = DMatrix::<C64>::zeros(deg, deg);
    for j in 0..deg {
        comp[(0, j)] = -core[deg - 1 - j] / lead;
    }
    for i in 1..deg {
        comp[(i, i - 1)] = C64::new(1.0, 0.0);
    }
    balance(&mut comp);
    let schur = nalgebra::linalg::Schur::try_new(comp, 1e-15, 10_000)
        .ok_or_else(|| Error::Numerical("Schur iteration did not converge".into()))?;
    let (_, t) = schur.unpack();
    for i in 0..deg {
        let mut z = t[(i, i)];
        for _ in 0..5 {
            let (p, dp) = horner(core, z);
            if dp.norm() == 0.0 || p.norm() == 0.0 {
                break;
            }
            let step = p / dp;
            if !step.re.is_finite() || !step.im.is_finite() {
                break;
            }
            z -= step;
        }
        roots.push(z);
    }
    let residual = roots
        .iter()
        .map(|&z| {
            let (p, _) = horner(coeffs, z);
            let mag: f64 = coeffs
                .iter()
                .enumerate()
                .map(|(k, c)| c.norm() * z.norm().powi(k as i32))
                .sum();
            if mag == 0.0 {
                0.0
            } else {
                p.norm() / mag
            }
        })
        .fold(0.0, f64::max);
    Ok(ExactZeroSet { roots, residual, notes })
}

/// Zeros of a partition polynomial (the `z^{low}` prefactor contributes none).
pub fn exact_zeros(poly: &PartitionPolynomial) -> Result<ExactZeroSet> {
    polynomial_roots(&poly.coefficients)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Normalization;

    #[test]
    fn gray_blocks_visit_every_configuration_once() {
        let m = SpinModel::blume_capel(2, 1.0, 0.2, Normalization::Shifted).unwrap();
        let c = CompiledTorus::new(&m, 3).unwrap();
        let prefix = block_prefix(3, 9);
        let mut seen = std::collections::HashSet::new();
        for b in 0..3usize.pow(prefix as u32) {
            c.for_each_in_block(&m, prefix, b, |s, e| {
                assert!(seen.insert(s.to_vec()));
                let full = c.energy(&m, s);
                assert!((full.a - e.a).norm() < 1e-10 && (full.p - e.p).abs() < 1e-10);
            });
        }
        assert_eq!(seen.len(), 19683);
    }

    #[test]
    fn roots_of_z9_plus_one() {
        let mut c = vec![C64::new(0.0, 0.0); 10];
        c[0] = C64::new(1.0, 0.0);
        c[9] = C64::new(1.0, 0.0);
        let z = polynomial_roots(&c).unwrap();
        assert_eq!(z.roots.len(), 9);
        for r in &z.roots {
            assert!((r.powi(9) + 1.0).norm() < 1e-12);
        }
        assert!(z.residual < 1e-14);
    }

    #[test]
    fn deflation_of_zero_coefficients() {
        let c = [
            C64::new(0.0, 0.0),
            C64::new(-1.0, 0.0),
            C64::new(1.0, 0.0),
            C64::new(0.0, 0.0),
        ];
        let z = polynomial_roots(&c).unwrap();
        assert_eq!(z.roots.len(), 2);
        assert_eq!(z.notes.len(), 2);
    }

    #[test]
    fn transfer_matrix_rejects_longer_range() {
        let m =
            SpinModel::perturbed_ising(2, 1.0, &[(vec![vec![0, 0], vec![2, 0]], 0.1)], Normalization::Shifted).unwrap();
        assert!(matches!(
            transfer_matrix_pf(&m, 5, C64::new(1.0, 0.0)),
            Err(Error::Unsupported(_))
        ));
    }
}

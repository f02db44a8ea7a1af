//! Finite-range, translation-invariant lattice spin models with one complex
//! parameter `z`, and the built-in Ising, perturbed Ising, Blume-Capel and
//! Potts families.
//!
//! Every interaction term stores, for each spin assignment on its shape, a
//! dimensionless energy `a - p·log z`. Keeping the `z`-exponent separate lets
//! Boltzmann factors `e^{-a} z^p` be formed without a branch cut whenever the
//! total exponent is an integer, and makes the partition function a
//! polynomial in `z` under the shifted field normalization.

use crate::error::{Error, Result};
use crate::lattice::{cube_offsets, zd_diameter, Lattice};
use crate::numeric::zpow;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

/// Dimensionless energy `a - p·log z`; its Boltzmann factor is `e^{-a} z^p`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Energy {
    pub a: C64,
    pub p: f64,
}

impl Energy {
    pub const ZERO: Energy = Energy {
        a: C64 { re: 0.0, im: 0.0 },
        p: 0.0,
    };

    pub fn new(a: C64, p: f64) -> Self {
        Energy { a, p }
    }

    pub fn real(a: f64, p: f64) -> Self {
        Energy { a: C64::new(a, 0.0), p }
    }

    /// Value at `z` with the principal logarithm.
    pub fn value(&self, z: C64) -> C64 {
        if self.p == 0.0 {
            self.a
        } else {
            self.a - z.ln() * self.p
        }
    }

    /// `e^{-a} z^p`.
    pub fn boltzmann(&self, z: C64) -> C64 {
        (-self.a).exp() * zpow(z, self.p)
    }
}

impl Add for Energy {
    type Output = Energy;
    fn add(self, o: Energy) -> Energy {
        Energy::new(self.a + o.a, self.p + o.p)
    }
}

impl AddAssign for Energy {
    fn add_assign(&mut self, o: Energy) {
        self.a += o.a;
        self.p += o.p;
    }
}

impl Sub for Energy {
    type Output = Energy;
    fn sub(self, o: Energy) -> Energy {
        Energy::new(self.a - o.a, self.p - o.p)
    }
}

impl Neg for Energy {
    type Output = Energy;
    fn neg(self) -> Energy {
        Energy::new(-self.a, -self.p)
    }
}

impl Mul<f64> for Energy {
    type Output = Energy;
    fn mul(self, s: f64) -> Energy {
        Energy::new(self.a * s, self.p * s)
    }
}

/// One translation class of interaction: a shape of lattice offsets (containing
/// the origin) and the energy of every spin assignment on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub shape: Vec<Vec<i64>>,
    /// Mixed-radix table, first shape site most significant.
    pub table: Vec<Energy>,
}

impl Term {
    pub fn index(spins: impl IntoIterator<Item = u8>, n_spins: usize) -> usize {
        spins.into_iter().fold(0, |acc, s| acc * n_spins + s as usize)
    }

    pub fn energy(&self, spins: impl IntoIterator<Item = u8>, n_spins: usize) -> Energy {
        self.table[Self::index(spins, n_spins)]
    }

    fn from_fn(shape: Vec<Vec<i64>>, labels: &[i32], f: impl Fn(&[i32]) -> Energy) -> Term {
        let n = labels.len();
        let k = shape.len();
        let size = n.pow(k as u32);
        let mut table = Vec::with_capacity(size);
        let mut vals = vec![0i32; k];
        for idx in 0..size {
            let mut r = idx;
            for j in (0..k).rev() {
                vals[j] = labels[r % n];
                r /= n;
            }
            table.push(f(&vals));
        }
        Term { shape, table }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Field term `-h(σ+1)`: weights are polynomials in `z`.
    #[default]
    Shifted,
    /// Field term `-hσ`.
    Original,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpinModel {
    pub name: String,
    pub labels: Vec<i32>,
    pub d: usize,
    pub range: usize,
    pub terms: Vec<Term>,
    /// Partition of spin indices into symmetry orbits; the first member of
    /// each orbit represents the phase.
    pub orbits: Vec<Vec<u8>>,
    pub parameter: String,
    pub domain: String,
}

/// A spin configuration on a torus, or on a window of `Z^d` with a constant
/// background outside it.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Configuration {
    pub lattice: Lattice,
    pub spins: Vec<u8>,
    pub background: u8,
}

/// Torus configurations are the periodic case of [`Configuration`].
pub type TorusConfiguration = Configuration;

impl Configuration {
    pub fn torus(d: usize, l: usize, spins: Vec<u8>) -> Self {
        let lattice = Lattice::torus(d, l);
        assert_eq!(spins.len(), lattice.len());
        Configuration {
            lattice,
            spins,
            background: 0,
        }
    }

    pub fn constant_torus(d: usize, l: usize, m: u8) -> Self {
        Self::torus(d, l, vec![m; l.pow(d as u32)])
    }

    pub fn window(shape: Vec<usize>, spins: Vec<u8>, background: u8) -> Self {
        let lattice = Lattice::window(shape);
        assert_eq!(spins.len(), lattice.len());
        Configuration {
            lattice,
            spins,
            background,
        }
    }

    pub fn spin_at(&self, c: &[i64]) -> u8 {
        match self.lattice.index(c) {
            Some(i) => self.spins[i],
            None => self.background,
        }
    }
}

/// Estimated model constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub tau: f64,
    pub m: f64,
    pub alpha: f64,
    pub c0: f64,
}

impl Regime {
    /// Whether `τ ≥ 4c0 + 16`, the hypothesis of the truncation theorem.
    pub fn certified(&self) -> bool {
        self.tau >= 4.0 * self.c0 + 16.0
    }

    /// `ε̃ = e^{-τ/2}`.
    pub fn epsilon(&self) -> f64 {
        (-self.tau / 2.0).exp()
    }
}

fn check_coupling(name: &str, j: f64) -> Result<()> {
    if !j.is_finite() || j <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "{name} requires a finite ferromagnetic coupling J > 0, got {j}"
        )));
    }
    Ok(())
}

fn check_dim(d: usize) -> Result<()> {
    if d < 2 {
        return Err(Error::InvalidParameter(format!("dimension must be >= 2, got {d}")));
    }
    Ok(())
}

fn unit(d: usize, k: usize) -> Vec<i64> {
    let mut e = vec![0; d];
    e[k] = 1;
    e
}

impl SpinModel {
    /// Generic validated constructor.
    pub fn new(
        name: impl Into<String>,
        labels: Vec<i32>,
        d: usize,
        terms: Vec<Term>,
        orbits: Vec<Vec<u8>>,
        parameter: impl Into<String>,
        domain: impl Into<String>,
    ) -> Result<Self> {
        check_dim(d)?;
        let n = labels.len();
        if n < 2 {
            return Err(Error::InvalidParameter("spin set needs two labels".into()));
        }
        let mut seen = vec![false; n];
        for o in &orbits {
            for &s in o {
                if s as usize >= n || seen[s as usize] {
                    return Err(Error::InvalidParameter("orbits must partition S".into()));
                }
                seen[s as usize] = true;
            }
        }
        if seen.iter().any(|&b| !b) {
            return Err(Error::InvalidParameter("orbits must partition S".into()));
        }
        let mut max_diam = 1;
        for t in &terms {
            if t.shape.iter().any(|o| o.len() != d) || !t.shape.iter().any(|o| o.iter().all(|&x| x == 0)) {
                return Err(Error::InvalidParameter(
                    "term shapes must be d-dimensional and contain the origin".into(),
                ));
            }
            if t.table.len() != n.pow(t.shape.len() as u32) {
                return Err(Error::InvalidParameter("energy table has wrong size".into()));
            }
            max_diam = max_diam.max(zd_diameter(&t.shape));
        }
        let range = (max_diam - 1).max(1);
        let model = SpinModel {
            name: name.into(),
            labels,
            d,
            range,
            terms,
            orbits,
            parameter: parameter.into(),
            domain: domain.into(),
        };
        model.check_orbit_symmetry()?;
        Ok(model)
    }

    fn check_orbit_symmetry(&self) -> Result<()> {
        for o in &self.orbits {
            for w in o.windows(2) {
                let perm = self.transposition(w[0], w[1]);
                for t in &self.terms {
                    let k = t.shape.len();
                    let n = self.n_spins();
                    for idx in 0..t.table.len() {
                        let spins = decode(idx, k, n);
                        let image = spins.iter().map(|&s| perm[s as usize]);
                        let e1 = t.table[idx];
                        let e2 = t.energy(image, n);
                        if (e1.a - e2.a).norm() > 1e-12 || (e1.p - e2.p).abs() > 1e-12 {
                            return Err(Error::InvalidParameter(format!(
                                "orbit {:?} is not a symmetry of the potential",
                                o
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn transposition(&self, a: u8, b: u8) -> Vec<u8> {
        (0..self.n_spins() as u8)
            .map(|s| {
                if s == a {
                    b
                } else if s == b {
                    a
                } else {
                    s
                }
            })
            .collect()
    }

    pub fn n_spins(&self) -> usize {
        self.labels.len()
    }

    /// Index of a spin label.
    pub fn spin(&self, label: i32) -> Option<u8> {
        self.labels.iter().position(|&l| l == label).map(|i| i as u8)
    }

    /// Phase representatives, one per orbit.
    pub fn phases(&self) -> Vec<u8> {
        self.orbits.iter().map(|o| o[0]).collect()
    }

    pub fn orbit_size(&self, m: u8) -> usize {
        self.orbits
            .iter()
            .find(|o| o.contains(&m))
            .map(|o| o.len())
            .unwrap_or(1)
    }

    /// Representative of the orbit containing `s`.
    pub fn representative(&self, s: u8) -> u8 {
        self.orbits.iter().find(|o| o.contains(&s)).map(|o| o[0]).unwrap_or(s)
    }

    /// `e_m` as an energy pair: `Σ_{Λ∋0} Φ_Λ(σ^m)/|Λ|`.
    pub fn ground_energy(&self, m: u8) -> Energy {
        let n = self.n_spins();
        let mut e = Energy::ZERO;
        for t in &self.terms {
            let k = t.shape.len();
            let per = t.energy(std::iter::repeat_n(m, k), n);
            // |Λ| translates contain the origin, each weighted 1/|Λ|.
            e += per;
        }
        e
    }

    pub fn ground_state_energy(&self, m: u8, z: C64) -> C64 {
        self.ground_energy(m).value(z)
    }

    pub fn theta(&self, m: u8, z: C64) -> C64 {
        self.ground_energy(m).boltzmann(z)
    }

    /// `θ(z) = max_m |θ_m(z)|` over phase representatives.
    pub fn theta_max(&self, z: C64) -> f64 {
        self.phases()
            .into_iter()
            .map(|m| self.theta(m, z).norm())
            .fold(0.0, f64::max)
    }

    /// `∂_z log θ_m = p_m / z`.
    pub fn dlog_theta(&self, m: u8, z: C64) -> C64 {
        C64::new(self.ground_energy(m).p, 0.0) / z
    }

    /// Whether every term's `z`-exponents are integers.
    pub fn is_polynomial(&self) -> bool {
        self.terms
            .iter()
            .all(|t| t.table.iter().all(|e| (e.p - e.p.round()).abs() < 1e-12))
    }

    /// Energy density at site `x`: `Σ_{Λ∋x} Φ_Λ(σ)/|Λ|`.
    pub fn local_energy(&self, cfg: &Configuration, x: usize) -> Energy {
        let n = self.n_spins();
        let cx = cfg.lattice.coords(x);
        let mut e = Energy::ZERO;
        let mut buf = vec![0i64; self.d];
        for t in &self.terms {
            let k = t.shape.len() as f64;
            for anchor_off in &t.shape {
                let spins = t.shape.iter().map(|o| {
                    for j in 0..self.d {
                        buf[j] = cx[j] - anchor_off[j] + o[j];
                    }
                    cfg.spin_at(&buf)
                });
                let en = t.energy(spins.collect::<Vec<_>>(), n);
                e += en * (1.0 / k);
            }
        }
        e
    }

    /// `B_R(σ)`: union of the `(2R+1)`-boxes on which `σ` is not constant.
    pub fn r_boundary(&self, cfg: &Configuration) -> Result<Vec<bool>> {
        r_boundary(cfg, self.range)
    }

    /// `E(σ) = Σ_{x∈B_R(σ)} Σ_{Λ∋x} Φ_Λ(σ)/|Λ|` as an energy pair.
    pub fn excitation(&self, cfg: &Configuration) -> Result<Energy> {
        let b = self.r_boundary(cfg)?;
        Ok(self.excitation_on(cfg, (0..b.len()).filter(|&i| b[i])))
    }

    /// Sum of local energies over the given sites.
    pub fn excitation_on(&self, cfg: &Configuration, sites: impl IntoIterator<Item = usize>) -> Energy {
        let mut e = Energy::ZERO;
        for x in sites {
            e += self.local_energy(cfg, x);
        }
        e
    }

    pub fn excitation_energy(&self, cfg: &Configuration, z: C64) -> Result<C64> {
        Ok(self.excitation(cfg)?.value(z))
    }

    /// `βH_L(σ) = Σ_{Λ⊂T_L} Φ_Λ(σ)` over torus-wrapped translates.
    pub fn hamiltonian(&self, cfg: &Configuration) -> Energy {
        assert!(cfg.lattice.is_periodic(), "hamiltonian_torus needs a torus");
        let n = self.n_spins();
        let lat = &cfg.lattice;
        let mut e = Energy::ZERO;
        for t in &self.terms {
            for a in 0..lat.len() {
                let spins: Vec<u8> = t.shape.iter().map(|o| cfg.spins[lat.shift(a, o).unwrap()]).collect();
                e += t.energy(spins, n);
            }
        }
        e
    }

    pub fn hamiltonian_torus(&self, cfg: &Configuration, z: C64) -> C64 {
        self.hamiltonian(cfg).value(z)
    }

    /// Largest value of `log|ρ_z(σ)| - |B_R(σ)|(log θ(z) - τ)` over the samples;
    /// positive means a Peierls violation.
    pub fn peierls_violation(&self, samples: &[Configuration], z: C64, tau: f64) -> Result<f64> {
        let lt = self.theta_max(z).ln();
        let mut worst = f64::NEG_INFINITY;
        for cfg in samples {
            let b = self.r_boundary(cfg)?;
            let size = b.iter().filter(|&&x| x).count() as f64;
            if size == 0.0 {
                continue;
            }
            let rho = self.excitation_on(cfg, (0..b.len()).filter(|&i| b[i])).boltzmann(z);
            worst = worst.max(rho.norm().ln() - size * (lt - tau));
        }
        Ok(worst)
    }

    /// Nearest-neighbour Ising model, `Φ = -Jσσ'` on edges.
    pub fn ising(d: usize, j: f64, norm: Normalization) -> Result<Self> {
        check_coupling("ising", j)?;
        Self::perturbed_ising(d, j, &[], norm).map(|mut m| {
            m.name = "ising".into();
            m
        })
    }

    /// Ising model with additional multi-spin couplings `-J_Λ Π σ_x`.
    pub fn perturbed_ising(d: usize, j: f64, couplings: &[(Vec<Vec<i64>>, f64)], norm: Normalization) -> Result<Self> {
        check_dim(d)?;
        check_coupling("perturbed_ising", j)?;
        let labels = vec![-1, 1];
        let mut terms = vec![Term::from_fn(vec![vec![0; d]], &labels, |s| {
            let p = match norm {
                Normalization::Shifted => (s[0] + 1) as f64 / 2.0,
                Normalization::Original => s[0] as f64 / 2.0,
            };
            Energy::real(0.0, p)
        })];
        for k in 0..d {
            terms.push(Term::from_fn(vec![vec![0; d], unit(d, k)], &labels, |s| {
                Energy::real(-j * (s[0] * s[1]) as f64, 0.0)
            }));
        }
        for (shape, jl) in couplings {
            if shape.len() < 2 || !jl.is_finite() {
                return Err(Error::InvalidParameter(
                    "multi-spin couplings need |Λ| >= 2 and finite J_Λ".into(),
                ));
            }
            let mut shape = shape.clone();
            shape.sort();
            shape.dedup();
            let origin = shape[0].clone();
            let shape: Vec<Vec<i64>> = shape
                .iter()
                .map(|o| o.iter().zip(&origin).map(|(a, b)| a - b).collect())
                .collect();
            terms.push(Term::from_fn(shape, &labels, |s| {
                Energy::real(-jl * s.iter().product::<i32>() as f64, 0.0)
            }));
        }
        let name = if couplings.is_empty() {
            "ising"
        } else {
            "perturbed_ising"
        };
        Self::new(
            name,
            labels,
            d,
            terms,
            vec![vec![1], vec![0]],
            "z = exp(2h)",
            "z in C \\ {0}",
        )
    }

    /// Blume-Capel model: `-λσ² - h(σ+1)` on sites, `J(σ-σ')²` on edges.
    pub fn blume_capel(d: usize, j: f64, lambda: f64, norm: Normalization) -> Result<Self> {
        check_dim(d)?;
        check_coupling("blume_capel", j)?;
        if !lambda.is_finite() {
            return Err(Error::InvalidParameter("lambda must be finite".into()));
        }
        let labels = vec![-1, 0, 1];
        let mut terms = vec![Term::from_fn(vec![vec![0; d]], &labels, |s| {
            let p = match norm {
                Normalization::Shifted => (s[0] + 1) as f64,
                Normalization::Original => s[0] as f64,
            };
            Energy::real(-lambda * (s[0] * s[0]) as f64, p)
        })];
        for k in 0..d {
            terms.push(Term::from_fn(vec![vec![0; d], unit(d, k)], &labels, |s| {
                let diff = (s[0] - s[1]) as f64;
                Energy::real(j * diff * diff, 0.0)
            }));
        }
        Self::new(
            "blume_capel",
            labels,
            d,
            terms,
            vec![vec![2], vec![1], vec![0]],
            "z = exp(h)",
            "z in C \\ {0}",
        )
    }

    /// `q`-state Potts model: `-h δ_{σ,1}` on sites, `-J δ_{σσ'}` on edges.
    pub fn potts(d: usize, q: usize, j: f64) -> Result<Self> {
        check_dim(d)?;
        check_coupling("potts", j)?;
        if !(2..=255).contains(&q) {
            return Err(Error::InvalidParameter(format!("potts needs 2 <= q <= 255, got {q}")));
        }
        if j <= (q as f64).ln() {
            return Err(Error::InvalidParameter(format!(
                "potts is supported only at low temperature, J > log q (J = {j}, q = {q})"
            )));
        }
        let labels: Vec<i32> = (1..=q as i32).collect();
        let mut terms = vec![Term::from_fn(vec![vec![0; d]], &labels, |s| {
            Energy::real(0.0, if s[0] == 1 { 1.0 } else { 0.0 })
        })];
        for k in 0..d {
            terms.push(Term::from_fn(vec![vec![0; d], unit(d, k)], &labels, |s| {
                Energy::real(if s[0] == s[1] { -j } else { 0.0 }, 0.0)
            }));
        }
        Self::new(
            "potts",
            labels,
            d,
            terms,
            vec![vec![0], (1..q as u8).collect()],
            "z = exp(h)",
            "z in C",
        )
    }
}

pub(crate) fn decode(mut idx: usize, k: usize, n: usize) -> Vec<u8> {
    let mut out = vec![0u8; k];
    for j in (0..k).rev() {
        out[j] = (idx % n) as u8;
        idx /= n;
    }
    out
}

/// `B_R(σ)` for a torus or window configuration.
///
/// On a window every non-constant box must lie inside the window; otherwise the
/// boundary is not representable and an error is returned.
pub fn r_boundary(cfg: &Configuration, r: usize) -> Result<Vec<bool>> {
    let lat = &cfg.lattice;
    let d = lat.dim();
    let offs = cube_offsets(d, -(r as i64), r as i64);
    let mut mask = vec![false; lat.len()];
    let mut buf = vec![0i64; d];
    for c in 0..lat.len() {
        let cc = lat.coords(c);
        let first = cfg.spins[c];
        let mut nonconst = false;
        let mut outside = false;
        for o in &offs {
            for k in 0..d {
                buf[k] = cc[k] + o[k];
            }
            match lat.index(&buf) {
                Some(i) => nonconst |= cfg.spins[i] != first,
                None => {
                    outside = true;
                    nonconst |= cfg.background != first;
                }
            }
        }
        if !nonconst {
            continue;
        }
        if outside {
            return Err(Error::NonFiniteBoundary(format!(
                "non-constant box at site {:?} leaves the window",
                cc
            )));
        }
        for o in &offs {
            for k in 0..d {
                buf[k] = cc[k] + o[k];
            }
            mask[lat.index(&buf).unwrap()] = true;
        }
    }
    Ok(mask)
}

/// Declarative model description, as read from scenario files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Ising {
        d: usize,
        #[serde(rename = "J")]
        j: f64,
        #[serde(default)]
        normalization: Normalization,
    },
    PerturbedIsing {
        d: usize,
        #[serde(rename = "J")]
        j: f64,
        couplings: Vec<CouplingSpec>,
        #[serde(default)]
        normalization: Normalization,
    },
    BlumeCapel {
        d: usize,
        #[serde(rename = "J")]
        j: f64,
        lambda: f64,
        #[serde(default)]
        normalization: Normalization,
    },
    Potts {
        d: usize,
        q: usize,
        #[serde(rename = "J")]
        j: f64,
    },
    Custom {
        d: usize,
        labels: Vec<i32>,
        /// Orbits as lists of labels; singletons when omitted.
        #[serde(default)]
        orbits: Option<Vec<Vec<i32>>>,
        terms: Vec<TermSpec>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSpec {
    pub shape: Vec<Vec<i64>>,
    #[serde(rename = "J")]
    pub j: f64,
}

/// A custom term: energies `a` (real, optional imaginary parts) and `z`-exponents
/// `p`, one per spin assignment in mixed-radix order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub shape: Vec<Vec<i64>>,
    pub energy: Vec<f64>,
    #[serde(default)]
    pub energy_im: Option<Vec<f64>>,
    #[serde(default)]
    pub zpow: Option<Vec<f64>>,
}

impl ModelSpec {
    pub fn build(&self) -> Result<SpinModel> {
        match self {
            ModelSpec::Ising { d, j, normalization } => SpinModel::ising(*d, *j, *normalization),
            ModelSpec::PerturbedIsing {
                d,
                j,
                couplings,
                normalization,
            } => {
                let c: Vec<_> = couplings.iter().map(|c| (c.shape.clone(), c.j)).collect();
                SpinModel::perturbed_ising(*d, *j, &c, *normalization)
            }
            ModelSpec::BlumeCapel {
                d,
                j,
                lambda,
                normalization,
            } => SpinModel::blume_capel(*d, *j, *lambda, *normalization),
            ModelSpec::Potts { d, q, j } => SpinModel::potts(*d, *q, *j),
            ModelSpec::Custom {
                d,
                labels,
                orbits,
                terms,
            } => {
                let idx = |l: &i32| -> Result<u8> {
                    labels
                        .iter()
                        .position(|x| x == l)
                        .map(|i| i as u8)
                        .ok_or_else(|| Error::InvalidParameter(format!("unknown label {l}")))
                };
                let orbits = match orbits {
                    Some(os) => os
                        .iter()
                        .map(|o| o.iter().map(idx).collect::<Result<Vec<_>>>())
                        .collect::<Result<Vec<_>>>()?,
                    None => (0..labels.len() as u8).map(|s| vec![s]).collect(),
                };
                let mut built = Vec::new();
                for t in terms {
                    let n = t.energy.len();
                    let im = t.energy_im.clone().unwrap_or_else(|| vec![0.0; n]);
                    let zp = t.zpow.clone().unwrap_or_else(|| vec![0.0; n]);
                    if im.len() != n || zp.len() != n {
                        return Err(Error::InvalidParameter(
                            "energy, energy_im and zpow must have equal length".into(),
                        ));
                    }
                    let table = (0..n)
                        .map(|i| Energy::new(C64::new(t.energy[i], im[i]), zp[i]))
                        .collect();
                    built.push(Term {
                        shape: t.shape.clone(),
                        table,
                    });
                }
                SpinModel::new("custom", labels.clone(), *d, built, orbits, "z", "user declared")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn ising_ground_energy_original_normalization() {
        let m = SpinModel::ising(2, 1.0, Normalization::Original).unwrap();
        let plus = m.spin(1).unwrap();
        let z = c((2.0 * 0.3f64).exp());
        let e = m.ground_state_energy(plus, z);
        assert!((e - c(-2.3)).norm() < 1e-12);
    }

    #[test]
    fn blume_capel_zero_phase_has_zero_energy() {
        let m = SpinModel::blume_capel(2, 1.7, 0.4, Normalization::Original).unwrap();
        let zero = m.spin(0).unwrap();
        assert_eq!(m.ground_state_energy(zero, C64::new(0.3, 0.9)), c(0.0));
        let b = SpinModel::blume_capel(2, 1.0, 0.0, Normalization::Original).unwrap();
        for s in 0..3 {
            assert!((b.theta(s, c(1.0)) - 1.0).norm() < 1e-15);
        }
    }

    #[test]
    fn potts_ground_energies() {
        let m = SpinModel::potts(2, 3, 2.0).unwrap();
        let z = c(0.5f64.exp());
        assert!((m.ground_state_energy(0, z) - c(-4.5)).norm() < 1e-12);
        assert!((m.ground_state_energy(1, z) - c(-4.0)).norm() < 1e-12);
        assert_eq!(m.orbits, vec![vec![0], vec![1, 2]]);
        assert_eq!(m.orbit_size(2), 2);
    }

    #[test]
    fn ising_theta_at_zero_field() {
        let m = SpinModel::ising(2, 1.0, Normalization::Original).unwrap();
        for s in 0..2 {
            assert!((m.theta(s, c(1.0)) - c(2f64.exp())).norm() < 1e-12);
        }
        assert!((m.theta_max(c(1.0)) - 2f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn blume_capel_pair_costs() {
        let m = SpinModel::blume_capel(2, 1.0, 0.1, Normalization::Shifted).unwrap();
        let edge = &m.terms[1];
        let (minus, zero, plus) = (0u8, 1u8, 2u8);
        assert_eq!(edge.energy([plus, minus], 3).a, c(4.0));
        assert_eq!(edge.energy([zero, plus], 3).a, c(1.0));
        let _ = minus;
    }

    #[test]
    fn builtins_reject_bad_parameters() {
        assert!(SpinModel::ising(2, 0.0, Normalization::Shifted).is_err());
        assert!(SpinModel::ising(2, -1.0, Normalization::Shifted).is_err());
        assert!(SpinModel::potts(2, 1, 3.0).is_err());
        assert!(SpinModel::ising(1, 1.0, Normalization::Shifted).is_err());
    }

    #[test]
    fn r_boundary_of_single_flip() {
        let m = SpinModel::ising(2, 1.0, Normalization::Shifted).unwrap();
        let mut cfg = Configuration::constant_torus(2, 7, 1);
        assert!(m.r_boundary(&cfg).unwrap().iter().all(|&b| !b));
        cfg.spins[24] = 0;
        let b = m.r_boundary(&cfg).unwrap();
        // every 3x3 box containing the flip is non-constant: a 5x5 block
        assert_eq!(b.iter().filter(|&&x| x).count(), 25);
    }

    #[test]
    fn window_boundary_must_fit() {
        let mut cfg = Configuration::window(vec![5, 5], vec![1; 25], 1);
        cfg.spins[12] = 0;
        assert_eq!(r_boundary(&cfg, 1).unwrap().iter().filter(|&&x| x).count(), 25);
        cfg.spins[6] = 0;
        assert!(matches!(r_boundary(&cfg, 1), Err(Error::NonFiniteBoundary(_))));
    }

    #[test]
    fn ground_state_hamiltonian() {
        let m = SpinModel::blume_capel(2, 1.3, 0.2, Normalization::Shifted).unwrap();
        let z = C64::new(0.4, -0.8);
        for s in 0..3u8 {
            let cfg = Configuration::constant_torus(2, 3, s);
            let h = m.hamiltonian_torus(&cfg, z);
            assert!((h - m.ground_state_energy(s, z) * 9.0).norm() < 1e-12);
        }
    }

    #[test]
    fn model_spec_round_trip() {
        let spec = ModelSpec::Potts { d: 2, q: 3, j: 3.0 };
        let m = spec.build().unwrap();
        assert_eq!(m.n_spins(), 3);
        let custom = ModelSpec::Custom {
            d: 2,
            labels: vec![0, 1],
            orbits: None,
            terms: vec![TermSpec {
                shape: vec![vec![0, 0]],
                energy: vec![0.0, 0.5],
                energy_im: None,
                zpow: Some(vec![0.0, 1.0]),
            }],
        };
        let m = custom.build().unwrap();
        assert_eq!(m.range, 1);
        assert!(m.is_polynomial());
    }

    #[test]
    fn orbit_that_is_not_a_symmetry_is_rejected() {
        let labels = vec![-1, 1];
        let t = Term::from_fn(vec![vec![0, 0]], &labels, |s| Energy::real(s[0] as f64, 0.0));
        assert!(SpinModel::new("x", labels, 2, vec![t], vec![vec![0, 1]], "z", "C").is_err());
    }
}

//! The pipelines a scenario can select, run in a fixed order.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use pszeros::contours::{bijection_check, torus_contour_identity_check};
use pszeros::metastable::{assumption_c_check, CapSummary, Cutoffs, FreeEnergyModel};
use pszeros::torus_exact::{exact_zeros, partition_polynomial};
use pszeros::zeros::{
    density_of_zeros, match_predicted_exact, solve_zero_equations, theorem_b_residual, trace_coexistence,
    CoexistenceCurve, FiniteVolume, PredictedZero, TraceOptions,
};
use pszeros::{SpinModel, C64};
use serde::Serialize;

use crate::emit::{zeros_svg, Artifacts, Csv};
use crate::scenario::{Pipeline, Scenario};
use crate::CliError;

/// Configurations enumerated by the bijection pipeline at most.
pub const BIJECTION_BUDGET: u128 = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    #[serde(skip)]
    pub files: Vec<PathBuf>,
    pub checks: Vec<Check>,
    pub cap_activations: usize,
}

impl RunSummary {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

#[derive(Serialize)]
struct ExactRecord {
    tag: String,
    low_power: i64,
    coefficients: Vec<[f64; 2]>,
    roots: Vec<[f64; 2]>,
    residual: f64,
    notes: Vec<String>,
}

#[derive(Serialize)]
struct CapLogRecord {
    total: usize,
    classes: Vec<CapSummary>,
}

#[derive(Serialize)]
struct RegimeRecord {
    tau: f64,
    m: f64,
    alpha: f64,
    c0: f64,
    certified: bool,
    policy: String,
    order: usize,
}

struct Context<'a> {
    sc: &'a Scenario,
    model: SpinModel,
    points: Vec<C64>,
    art: Artifacts,
    checks: Vec<Check>,
    exact: BTreeMap<usize, Vec<C64>>,
    predicted: BTreeMap<usize, Vec<PredictedZero>>,
    curves: Vec<CoexistenceCurve>,
    fe: Option<FreeEnergyModel>,
}

fn c2(z: C64) -> [f64; 2] {
    [z.re, z.im]
}

fn arg01(z: C64) -> f64 {
    z.arg().rem_euclid(std::f64::consts::TAU)
}

fn sort_roots(mut r: Vec<C64>) -> Vec<C64> {
    r.sort_by(|a, b| {
        (arg01(*a), a.norm())
            .partial_cmp(&(arg01(*b), b.norm()))
            .expect("finite roots")
    });
    r
}

impl Context<'_> {
    fn check(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            pass,
            detail: detail.into(),
        });
    }

    fn label(&self, m: u8) -> i32 {
        self.model.labels[m as usize]
    }

    fn exact_roots(&mut self, l: usize) -> Result<Vec<C64>, CliError> {
        if let Some(r) = self.exact.get(&l) {
            return Ok(r.clone());
        }
        let poly = partition_polynomial(&self.model, l).map_err(|e| CliError::stage("exact", e))?;
        let zs = exact_zeros(&poly).map_err(|e| CliError::stage("exact", e))?;
        let roots = sort_roots(zs.roots.clone());
        let record = ExactRecord {
            tag: poly.tag.clone(),
            low_power: poly.low_power,
            coefficients: poly.coefficients.iter().map(|c| c2(*c)).collect(),
            roots: roots.iter().map(|c| c2(*c)).collect(),
            residual: zs.residual,
            notes: zs.notes.clone(),
        };
        self.art.json(format!("exact_L{l}.json"), &record)?;
        let mut csv = Csv::new(&["re", "im", "abs", "arg"]);
        for z in &roots {
            csv.row(vec![z.re.into(), z.im.into(), z.norm().into(), z.arg().into()]);
        }
        self.art.add(format!("exact_zeros_L{l}.csv"), csv.finish());
        self.exact.insert(l, roots.clone());
        Ok(roots)
    }

    fn exact(&mut self) -> Result<(), CliError> {
        for l in self.sc.sides.clone() {
            self.exact_roots(l)?;
        }
        Ok(())
    }

    fn bijection(&mut self) -> Result<(), CliError> {
        for l in self.sc.sides.clone() {
            let r = bijection_check(
                self.model.n_spins(),
                self.model.d,
                l,
                self.model.range,
                BIJECTION_BUDGET,
            )
            .map_err(|e| CliError::stage("bijection", e))?;
            self.art.json(format!("bijection_L{l}.json"), &r)?;
            let detail = format!("{}/{} round trips on T_{l}", r.round_trips, r.total);
            self.check(format!("bijection L={l}"), r.pass(), detail);
        }
        Ok(())
    }

    fn contour_check(&mut self) -> Result<(), CliError> {
        let tol = self.sc.tolerances.relative;
        for l in self.sc.sides.clone() {
            let reps = torus_contour_identity_check(&self.model, l, &self.points)
                .map_err(|e| CliError::stage("contour-check", e))?;
            let mut csv = Csv::new(&[
                "z_re",
                "z_im",
                "exact_re",
                "exact_im",
                "zl1_re",
                "zl1_im",
                "zl2_re",
                "zl2_im",
                "max_rel_dev",
            ]);
            let mut worst: f64 = 0.0;
            for r in &reps {
                worst = worst.max(r.max_relative_deviation);
                csv.row(vec![
                    r.z.re.into(),
                    r.z.im.into(),
                    r.exact.re.into(),
                    r.exact.im.into(),
                    r.zl1.re.into(),
                    r.zl1.im.into(),
                    r.zl2.re.into(),
                    r.zl2.im.into(),
                    r.max_relative_deviation.into(),
                ]);
            }
            self.art.add(format!("contour_check_L{l}.csv"), csv.finish());
            self.check(
                format!("contour representation L={l}"),
                worst < tol,
                format!("max relative deviation {worst:.3e} (tolerance {tol:.1e})"),
            );
        }
        Ok(())
    }

    fn free_energy_model(&mut self) -> Result<&FreeEnergyModel, CliError> {
        if self.fe.is_none() {
            let mut samples = self.points.clone();
            samples.extend(self.sc.curves.iter().map(|c| C64::new(c.seed[0], c.seed[1])));
            if samples.is_empty() {
                samples.push(C64::new(1.0, 0.0));
            }
            let cut = Cutoffs {
                order: self.sc.cutoffs.order,
            };
            let fe = FreeEnergyModel::with_estimated_regime(self.model.clone(), &samples, cut)
                .map_err(|e| CliError::stage("free-energy", e))?;
            let reg = RegimeRecord {
                tau: fe.regime.tau,
                m: fe.regime.m,
                alpha: fe.regime.alpha,
                c0: fe.regime.c0,
                certified: fe.regime.certified(),
                policy: format!("{:?}", fe.policy).to_lowercase(),
                order: cut.order,
            };
            self.art.json("regime.json", &reg)?;
            self.fe = Some(fe);
        }
        Ok(self.fe.as_ref().expect("free-energy model built"))
    }

    fn free_energy(&mut self) -> Result<(), CliError> {
        self.free_energy_model()?;
        let fe = self.fe.as_ref().expect("free-energy model built");
        let mut csv = Csv::new(&[
            "z_re",
            "z_im",
            "phase",
            "zeta_re",
            "zeta_im",
            "s_re",
            "s_im",
            "f",
            "a",
            "error_estimate",
            "stable",
        ]);
        for &z in &self.points {
            let p = fe.free_energies(z).map_err(|e| CliError::stage("free-energy", e))?;
            for ph in &p.phases {
                csv.row(vec![
                    z.re.into(),
                    z.im.into(),
                    self.model.labels[ph.phase as usize].into(),
                    ph.zeta.re.into(),
                    ph.zeta.im.into(),
                    ph.s.re.into(),
                    ph.s.im.into(),
                    ph.f.into(),
                    ph.a.into(),
                    ph.error_estimate.into(),
                    p.stable.contains(&ph.phase).into(),
                ]);
            }
        }
        self.art.add("free_energy.csv", csv.finish());
        if !self.points.is_empty() {
            let rep = assumption_c_check(&self.model, &self.points, 1.0, None)
                .map_err(|e| CliError::stage("free-energy", e))?;
            self.art.json("assumption_c.json", &rep)?;
        }
        Ok(())
    }

    fn zeros(&mut self) -> Result<(), CliError> {
        self.free_energy_model()?;
        let fe = self.fe.as_ref().expect("free-energy model built");
        let mut curves = Vec::new();
        for spec in &self.sc.curves {
            let m = self
                .model
                .representative(self.model.spin(spec.phases[0]).expect("validated label"));
            let n = self
                .model
                .representative(self.model.spin(spec.phases[1]).expect("validated label"));
            let opts = TraceOptions {
                step: spec.step,
                length: spec.length,
                stop_at_multiple: true,
            };
            let c = trace_coexistence(fe, m, n, C64::new(spec.seed[0], spec.seed[1]), opts)
                .map_err(|e| CliError::stage("zeros", e))?;
            curves.push(c);
        }
        let mut new_checks = Vec::new();
        for (i, c) in curves.iter().enumerate() {
            self.art.json(format!("curve_{i}.json"), c)?;
        }
        for l in self.sc.sides.clone() {
            let mut csv = Csv::new(&[
                "curve",
                "m",
                "n",
                "k",
                "re",
                "im",
                "abs",
                "arg",
                "modulus_residual",
                "phase_residual",
                "density",
                "degraded",
            ]);
            let mut all = Vec::new();
            for (i, c) in curves.iter().enumerate() {
                let zs = solve_zero_equations(fe, c, l).map_err(|e| CliError::stage("zeros", e))?;
                let worst = zs
                    .zeros
                    .iter()
                    .map(|z| z.modulus_residual.max(z.phase_residual))
                    .fold(0.0, f64::max);
                new_checks.push((
                    format!("zero equations L={l} curve {i}"),
                    worst < 1e-9 && zs.multi_solution_windows.is_empty(),
                    format!(
                        "{} solutions, worst residual {worst:.2e}, {} multi-solution windows",
                        zs.zeros.len(),
                        zs.multi_solution_windows.len()
                    ),
                ));
                if c.closed {
                    let w = zs.winding.abs();
                    new_checks.push((
                        format!("zero count L={l} curve {i}"),
                        (w - w.round()).abs() < 1e-6 && zs.zeros.len() == w.round() as usize,
                        format!("winding {w:.9}, {} zeros", zs.zeros.len()),
                    ));
                }
                let dens = density_of_zeros(&zs.corrected, self.model.d, l);
                let mut dcsv = Csv::new(&["s", "rho"]);
                for (s, r) in dens.s.iter().zip(&dens.rho) {
                    dcsv.row(vec![(*s).into(), (*r).into()]);
                }
                self.art.add(format!("density_curve_{i}_L{l}.csv"), dcsv.finish());
                for z in &zs.zeros {
                    csv.row(vec![
                        i.into(),
                        self.label(z.m).into(),
                        self.label(z.n).into(),
                        z.k.into(),
                        z.z.re.into(),
                        z.z.im.into(),
                        z.z.norm().into(),
                        z.z.arg().into(),
                        z.modulus_residual.into(),
                        z.phase_residual.into(),
                        z.density.into(),
                        z.degraded.into(),
                    ]);
                }
                all.extend(zs.zeros);
            }
            self.art.add(format!("predicted_L{l}.csv"), csv.finish());
            self.predicted.insert(l, all);
        }
        for (n, p, d) in new_checks {
            self.check(n, p, d);
        }
        self.curves = curves;
        Ok(())
    }

    fn compare(&mut self) -> Result<(), CliError> {
        for l in self.sc.sides.clone() {
            let exact = self.exact_roots(l)?;
            let predicted: Vec<C64> = self
                .predicted
                .get(&l)
                .map(|p| p.iter().map(|z| z.z).collect())
                .unwrap_or_default();
            let rep = match_predicted_exact(&predicted, &exact);
            self.art.json(format!("compare_L{l}.json"), &rep)?;
            let mut csv = Csv::new(&["kind", "index", "re", "im", "abs", "arg", "partner", "distance"]);
            for (i, z) in predicted.iter().enumerate() {
                let pair = rep.pairs.iter().find(|p| p.0 == i);
                csv.row(vec![
                    "predicted".into(),
                    i.into(),
                    z.re.into(),
                    z.im.into(),
                    z.norm().into(),
                    z.arg().into(),
                    pair.map_or(-1, |p| p.1 as i64).into(),
                    pair.map_or(f64::NAN, |p| p.2).into(),
                ]);
            }
            for (j, z) in exact.iter().enumerate() {
                let pair = rep.pairs.iter().find(|p| p.1 == j);
                csv.row(vec![
                    "exact".into(),
                    j.into(),
                    z.re.into(),
                    z.im.into(),
                    z.norm().into(),
                    z.arg().into(),
                    pair.map_or(-1, |p| p.0 as i64).into(),
                    pair.map_or(f64::NAN, |p| p.2).into(),
                ]);
            }
            self.art.add(format!("zeros_L{l}.csv"), csv.finish());
            let polylines: Vec<Vec<C64>> = self
                .curves
                .iter()
                .map(|c| c.points.iter().map(|p| p.z).collect())
                .collect();
            let title = format!("{} L={l}", self.sc.name);
            self.art.add(
                format!("zeros_L{l}.svg"),
                zeros_svg(&title, &exact, &predicted, &polylines),
            );
            self.check(
                format!("zero matching L={l}"),
                !rep.cardinality_mismatch,
                format!(
                    "{} predicted, {} exact, max distance {:.3e}, mean {:.3e}",
                    predicted.len(),
                    exact.len(),
                    rep.max_distance,
                    rep.mean_distance
                ),
            );
        }
        Ok(())
    }

    fn residual(&mut self) -> Result<(), CliError> {
        self.free_energy_model()?;
        let fe = self.fe.as_ref().expect("free-energy model built");
        let mut csv = Csv::new(&[
            "L", "z_re", "z_im", "exact_re", "exact_im", "xi_abs", "ratio", "phases", "warning",
        ]);
        for &l in &self.sc.sides {
            let fv = FiniteVolume { fe, l };
            for &z in &self.points {
                let r = theorem_b_residual(&fv, l, z, None, true).map_err(|e| CliError::stage("residual", e))?;
                let phases: Vec<String> = r
                    .phases
                    .iter()
                    .map(|&m| self.model.labels[m as usize].to_string())
                    .collect();
                csv.row(vec![
                    l.into(),
                    z.re.into(),
                    z.im.into(),
                    r.exact.re.into(),
                    r.exact.im.into(),
                    r.xi.norm().into(),
                    r.ratio.into(),
                    phases.join(" ").into(),
                    r.warning.unwrap_or_default().into(),
                ]);
            }
        }
        self.art.add("residual.csv", csv.finish());
        Ok(())
    }
}

/// Runs every selected pipeline and writes the results under `out`.
pub fn run(sc: &Scenario, out: &Path, seed: u64) -> Result<RunSummary, CliError> {
    let model = sc.model()?;
    let mut ctx = Context {
        sc,
        points: sc.sample_points(seed),
        model,
        art: Artifacts::default(),
        checks: Vec::new(),
        exact: BTreeMap::new(),
        predicted: BTreeMap::new(),
        curves: Vec::new(),
        fe: None,
    };
    let selected: BTreeSet<Pipeline> = sc.pipelines.iter().copied().collect();
    for p in &selected {
        match p {
            Pipeline::Exact => ctx.exact()?,
            Pipeline::Bijection => ctx.bijection()?,
            Pipeline::ContourCheck => ctx.contour_check()?,
            Pipeline::FreeEnergy => ctx.free_energy()?,
            Pipeline::Zeros => ctx.zeros()?,
            Pipeline::Compare => ctx.compare()?,
            Pipeline::Residual => ctx.residual()?,
        }
    }
    let cap_activations = match &ctx.fe {
        Some(fe) => {
            let log = fe.cap_log();
            let rec = CapLogRecord {
                total: log.len(),
                classes: log.summary(),
            };
            ctx.art.json("cap_log.json", &rec)?;
            rec.total
        }
        None => 0,
    };
    let mut summary = RunSummary {
        scenario: sc.name.clone(),
        seed,
        files: Vec::new(),
        checks: ctx.checks,
        cap_activations,
    };
    ctx.art.json("summary.json", &summary)?;
    summary.files = ctx.art.write(out, &sc.name, seed)?;
    Ok(summary)
}

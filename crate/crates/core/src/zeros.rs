//! Coexistence curves, the zero quantization equations and comparison with exact roots.

use std::f64::consts::{PI, TAU};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metastable::FreeEnergyModel;
use crate::models::SpinModel;
use crate::torus_exact::{partition_function_exact, transfer_matrix_pf};
use crate::C64;

/// Anything that assigns a metastable free energy `ζ_m(z)` to each phase.
pub trait ZetaSource: Sync {
    fn model(&self) -> &SpinModel;
    fn zeta(&self, m: u8, z: C64) -> Result<C64>;
}

/// `ζ_m = θ_m`: ground-state weights only.
pub struct GroundStates<'a>(pub &'a SpinModel);

impl ZetaSource for GroundStates<'_> {
    fn model(&self) -> &SpinModel {
        self.0
    }
    fn zeta(&self, m: u8, z: C64) -> Result<C64> {
        Ok(self.0.theta(m, z))
    }
}

impl ZetaSource for FreeEnergyModel {
    fn model(&self) -> &SpinModel {
        &self.model
    }
    fn zeta(&self, m: u8, z: C64) -> Result<C64> {
        FreeEnergyModel::zeta(self, m, z)
    }
}

/// Finite-volume `ζ_m^{(L)}` on `T_L`.
pub struct FiniteVolume<'a> {
    pub fe: &'a FreeEnergyModel,
    pub l: usize,
}

impl ZetaSource for FiniteVolume<'_> {
    fn model(&self) -> &SpinModel {
        &self.fe.model
    }
    fn zeta(&self, m: u8, z: C64) -> Result<C64> {
        Ok(self.fe.finite_volume_zeta(m, self.l, z)?.zeta)
    }
}

fn log_modulus<S: ZetaSource + ?Sized>(src: &S, m: u8, z: C64) -> Result<(f64, C64)> {
    let v = src.zeta(m, z)?;
    let l = v.norm().ln();
    if !l.is_finite() || !v.re.is_finite() || !v.im.is_finite() {
        return Err(Error::Numerical(format!("ζ_{m} not finite or zero at z = {z}")));
    }
    Ok((l, v))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub z: C64,
    /// Arc length from the start of the curve.
    pub s: f64,
    /// Unwrapped `Arg(ζ_m/ζ_n)`.
    pub delta: f64,
    /// `|log|ζ_m| − log|ζ_n||` after correction.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopReason {
    Closed,
    MultiplePoint { phase: u8, z: C64 },
    Length,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoexistenceCurve {
    pub m: u8,
    pub n: u8,
    pub points: Vec<CurvePoint>,
    pub closed: bool,
    pub start: StopReason,
    pub end: StopReason,
}

impl CoexistenceCurve {
    pub fn length(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.s)
    }

    /// Total variation of `Δ` from start to end.
    pub fn phase_winding(&self) -> f64 {
        match (self.points.first(), self.points.last()) {
            (Some(a), Some(b)) => b.delta - a.delta,
            _ => 0.0,
        }
    }

    pub fn max_residual(&self) -> f64 {
        self.points.iter().map(|p| p.residual).fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceOptions {
    /// Largest predictor step in `z`.
    pub step: f64,
    /// Arc-length budget per direction.
    pub length: f64,
    /// Stop where a third phase becomes as stable as the pair.
    pub stop_at_multiple: bool,
}

impl Default for TraceOptions {
    fn default() -> Self {
        TraceOptions {
            step: 0.05,
            length: 20.0,
            stop_at_multiple: true,
        }
    }
}

const NEWTON_TOL: f64 = 1e-13;
const MIN_STEP: f64 = 1e-10;

/// `log|ζ_m| − log|ζ_n| + shift` on the `(m, n)` pair.
struct Pair<'a, S: ZetaSource + ?Sized> {
    src: &'a S,
    m: u8,
    n: u8,
    shift: f64,
}

impl<S: ZetaSource + ?Sized> Pair<'_, S> {
    fn eval(&self, z: C64) -> Result<(f64, C64)> {
        let (lm, vm) = log_modulus(self.src, self.m, z)?;
        let (ln, vn) = log_modulus(self.src, self.n, z)?;
        Ok((lm - ln + self.shift, vm / vn))
    }

    fn gradient(&self, z: C64) -> Result<C64> {
        let h = 1e-6 * z.norm().max(1.0);
        let gx = (self.eval(z + h)?.0 - self.eval(z - h)?.0) / (2.0 * h);
        let gy = (self.eval(z + C64::new(0.0, h))?.0 - self.eval(z - C64::new(0.0, h))?.0) / (2.0 * h);
        Ok(C64::new(gx, gy))
    }

    /// Newton iteration along the gradient onto the zero set of `g`.
    fn correct(&self, mut z: C64) -> Result<(C64, f64, C64)> {
        let mut last = f64::INFINITY;
        for _ in 0..60 {
            let (g, r) = self.eval(z)?;
            if g.abs() < NEWTON_TOL {
                return Ok((z, g.abs(), r));
            }
            let grad = self.gradient(z)?;
            let n2 = grad.norm_sqr();
            if n2 == 0.0 || !n2.is_finite() {
                break;
            }
            z -= grad * (g / n2);
            last = g.abs();
        }
        let (g, r) = self.eval(z)?;
        if g.abs() < 1e-10 {
            return Ok((z, g.abs(), r));
        }
        Err(Error::Numerical(format!(
            "coexistence correction failed near z = {z}: residual {:.3e}",
            g.abs().min(last)
        )))
    }

    /// `log|ζ_p| − max(log|ζ_m|, log|ζ_n|)` for the most stable other phase.
    fn third_phase_gap(&self, z: C64) -> Result<Option<(u8, f64)>> {
        let model = self.src.model();
        let (lm, _) = log_modulus(self.src, self.m, z)?;
        let (ln, _) = log_modulus(self.src, self.n, z)?;
        let top = lm.max(ln);
        let mut best: Option<(u8, f64)> = None;
        for p in model.phases() {
            if p == model.representative(self.m) || p == model.representative(self.n) {
                continue;
            }
            let v = self.src.zeta(p, z)?;
            let gap = if v.norm() == 0.0 {
                f64::NEG_INFINITY
            } else {
                v.norm().ln() - top
            };
            if best.is_none_or(|b| gap > b.1) {
                best = Some((p, gap));
            }
        }
        Ok(best)
    }
}

/// Nearest point to `seed` with `|ζ_m(z)| = |ζ_n(z)|`.
pub fn locate_coexistence<S: ZetaSource + ?Sized>(src: &S, m: u8, n: u8, seed: C64) -> Result<C64> {
    Pair { src, m, n, shift: 0.0 }.correct(seed).map(|x| x.0)
}

fn principal(x: f64) -> f64 {
    let mut y = x.rem_euclid(TAU);
    if y > PI {
        y -= TAU;
    }
    y
}

/// Traces the locus `|ζ_m| = |ζ_n|` through `seed` by predictor–corrector
/// continuation, following the direction in which `Δ` increases first and then
/// the opposite one, unless the curve closes.
pub fn trace_coexistence<S: ZetaSource + ?Sized>(
    src: &S,
    m: u8,
    n: u8,
    seed: C64,
    opts: TraceOptions,
) -> Result<CoexistenceCurve> {
    trace_with_shift(src, m, n, seed, opts, 0.0)
}

fn trace_with_shift<S: ZetaSource + ?Sized>(
    src: &S,
    m: u8,
    n: u8,
    seed: C64,
    opts: TraceOptions,
    shift: f64,
) -> Result<CoexistenceCurve> {
    if m == n {
        return Err(Error::InvalidParameter("coexistence needs two distinct phases".into()));
    }
    if !(opts.step > 0.0 && opts.length > 0.0) {
        return Err(Error::InvalidParameter("trace step and length must be positive".into()));
    }
    let pair = Pair { src, m, n, shift };
    let (z0, res0, r0) = pair.correct(seed)?;
    if opts.stop_at_multiple {
        if let Some((p, gap)) = pair.third_phase_gap(z0)? {
            if gap > 1e-9 {
                return Err(Error::InvalidParameter(format!(
                    "phase {p} is more stable than {m} and {n} at the seed (gap {gap:.3e})"
                )));
            }
        }
    }
    let delta0 = r0.arg();
    let grad = pair.gradient(z0)?;
    let mut t = C64::new(0.0, 1.0) * grad / grad.norm();
    // Orient so that Δ increases.
    let probe = (opts.step * 1e-3).max(1e-7);
    if let Ok((_, _, rp)) = pair.correct(z0 + t * probe) {
        if principal(rp.arg() - delta0) < 0.0 {
            t = -t;
        }
    }
    let start = CurvePoint {
        z: z0,
        s: 0.0,
        delta: delta0,
        residual: res0,
    };
    let (fwd, end, closed) = march(&pair, start, t, r0, opts, true)?;
    if closed {
        return Ok(CoexistenceCurve {
            m,
            n,
            points: fwd,
            closed: true,
            start: StopReason::Closed,
            end: StopReason::Closed,
        });
    }
    let (bwd, start_reason, _) = march(&pair, start, -t, r0, opts, false)?;
    let mut points: Vec<CurvePoint> = bwd.iter().rev().cloned().collect();
    points.pop();
    points.extend(fwd);
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        if i > 0 {
            acc += (p.z - points[i - 1].z).norm();
        }
        out.push(CurvePoint { s: acc, ..*p });
    }
    Ok(CoexistenceCurve {
        m,
        n,
        points: out,
        closed: false,
        start: start_reason,
        end,
    })
}

/// March from `start` in direction `t`; `Δ` values stay consistent with the
/// start point. Returns the points (first is `start`), the stop reason and
/// whether the curve closed.
fn march<S: ZetaSource + ?Sized>(
    pair: &Pair<'_, S>,
    start: CurvePoint,
    mut t: C64,
    r_start: C64,
    opts: TraceOptions,
    allow_close: bool,
) -> Result<(Vec<CurvePoint>, StopReason, bool)> {
    let mut pts = vec![start];
    let mut z = start.z;
    let mut r = r_start;
    let mut h = opts.step;
    let mut s = 0.0;
    let mut delta = start.delta;
    let mut gap_prev = if opts.stop_at_multiple {
        pair.third_phase_gap(z)?.map(|g| g.1)
    } else {
        None
    };
    while s < opts.length {
        if allow_close && s > 4.0 * opts.step && (z - start.z).norm() < h {
            let inc = principal((r_start / r).arg());
            if inc.abs() < PI / 4.0 {
                s += (start.z - z).norm();
                let delta_end = delta + inc;
                pts.push(CurvePoint {
                    z: start.z,
                    s,
                    delta: delta_end,
                    residual: start.residual,
                });
                return Ok((pts, StopReason::Closed, true));
            }
        }
        let pred = z + t * h;
        let attempt = pair.correct(pred);
        let ok = match &attempt {
            Ok((zc, _, rc)) => {
                let inc = principal((rc / r).arg());
                inc.abs() < PI / 4.0 && (zc - pred).norm() < 0.5 * h
            }
            Err(_) => false,
        };
        if !ok {
            h *= 0.5;
            if h < MIN_STEP {
                return Err(Error::Numerical(format!("curve tracing stalled near z = {z}")));
            }
            continue;
        }
        let (zc, res, rc) = attempt?;
        let inc = principal((rc / r).arg());
        if opts.stop_at_multiple {
            if let Some((p, gap)) = pair.third_phase_gap(zc)? {
                if gap > 0.0 {
                    let g0 = gap_prev.unwrap_or(gap);
                    // Secant estimate of where the third phase catches up.
                    let frac = if g0 < 0.0 { -g0 / (gap - g0) } else { 0.0 };
                    let zm = pair.correct(z + (zc - z) * frac).map(|x| x.0).unwrap_or(z);
                    let (_, _, rm) = pair.correct(zm)?;
                    let incm = principal((rm / r).arg());
                    s += (zm - z).norm();
                    pts.push(CurvePoint {
                        z: zm,
                        s,
                        delta: delta + incm,
                        residual: pair.eval(zm)?.0.abs(),
                    });
                    return Ok((pts, StopReason::MultiplePoint { phase: p, z: zm }, false));
                }
                gap_prev = Some(gap);
            }
        }
        s += (zc - z).norm();
        delta += inc;
        pts.push(CurvePoint {
            z: zc,
            s,
            delta,
            residual: res,
        });
        let grad = pair.gradient(zc)?;
        let tn = C64::new(0.0, 1.0) * grad / grad.norm();
        t = if (tn * t.conj()).re >= 0.0 { tn } else { -tn };
        z = zc;
        r = rc;
        h = (h * 1.5).min(opts.step);
    }
    Ok((pts, StopReason::Length, false))
}

/// A solution of the two quantization equations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedZero {
    pub m: u8,
    pub n: u8,
    pub l: usize,
    /// `k` with `L^d Δ = (2k+1)π`, reduced mod `L^d`.
    pub k: usize,
    pub z: C64,
    pub s: f64,
    pub delta: f64,
    /// `|log(q_m^{1/N}|ζ_m|) − log(q_n^{1/N}|ζ_n|)|`.
    pub modulus_residual: f64,
    /// `|L^d Δ − (2k+1)π|`.
    pub phase_residual: f64,
    /// Local density `(L^d/2π)|dΔ/ds|`.
    pub density: f64,
    /// A third phase is within `1/L` of stability here.
    pub degraded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroSet {
    pub l: usize,
    pub volume: usize,
    pub zeros: Vec<PredictedZero>,
    /// Unreduced `k` values hit more than once.
    pub multi_solution_windows: Vec<i64>,
    /// `L^d (Δ_end − Δ_start)/2π` on the corrected curve.
    pub winding: f64,
    pub corrected: CoexistenceCurve,
}

impl ZeroSet {
    pub fn points(&self) -> Vec<C64> {
        self.zeros.iter().map(|z| z.z).collect()
    }
}

/// Solves `q_m^{1/N}|ζ_m| = q_n^{1/N}|ζ_n|` and `N Arg(ζ_m/ζ_n) = π mod 2π`, `N = L^d`,
/// along a traced curve.
pub fn solve_zero_equations<S: ZetaSource + ?Sized>(src: &S, curve: &CoexistenceCurve, l: usize) -> Result<ZeroSet> {
    let model = src.model();
    let volume = l.pow(model.d as u32);
    let nf = volume as f64;
    let (m, n) = (curve.m, curve.n);
    let shift = ((model.orbit_size(m) as f64).ln() - (model.orbit_size(n) as f64).ln()) / nf;
    let pair = Pair { src, m, n, shift };
    if curve.points.len() < 2 {
        return Err(Error::InvalidParameter("curve has fewer than two points".into()));
    }

    // Re-correct the curve for the orbit factors.
    let corrected: Vec<(C64, f64, C64)> = if shift == 0.0 {
        curve
            .points
            .par_iter()
            .map(|p| pair.eval(p.z).map(|(g, r)| (p.z, g.abs(), r)))
            .collect::<Result<_>>()?
    } else {
        curve
            .points
            .par_iter()
            .map(|p| pair.correct(p.z))
            .collect::<Result<_>>()?
    };
    let mut pts = Vec::with_capacity(corrected.len());
    let mut delta = curve.points[0].delta;
    let mut s = 0.0;
    for (i, (z, res, r)) in corrected.iter().enumerate() {
        if i > 0 {
            let (zp, _, rp) = corrected[i - 1];
            delta += principal((r / rp).arg());
            s += (z - zp).norm();
        }
        pts.push(CurvePoint {
            z: *z,
            s,
            delta,
            residual: *res,
        });
    }
    let corrected_curve = CoexistenceCurve {
        points: pts.clone(),
        ..curve.clone()
    };

    // Targets (2k+1)π/N crossed on each segment, half-open at the far end.
    let mut jobs = Vec::new();
    for i in 0..pts.len() - 1 {
        let (a, b) = (pts[i].delta * nf, pts[i + 1].delta * nf);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let kmin = ((lo - PI) / TAU).ceil() as i64;
        let kmax = ((hi - PI) / TAU).floor() as i64;
        for k in kmin..=kmax {
            let target = PI + TAU * k as f64;
            if target == b && i + 1 < pts.len() - 1 {
                continue;
            }
            if curve.closed && i + 1 == pts.len() - 1 && target == b {
                continue;
            }
            jobs.push((i, k, target));
        }
    }
    let zeros: Vec<(i64, PredictedZero)> = jobs
        .par_iter()
        .map(|&(i, k, target)| {
            let (p0, p1) = (pts[i], pts[i + 1]);
            let r0 = corrected[i].2;
            let at = |t: f64| -> Result<(C64, f64, f64, f64)> {
                let guess = p0.z + (p1.z - p0.z) * t;
                let (zc, res, rc) = if t == 0.0 {
                    (p0.z, p0.residual, r0)
                } else {
                    pair.correct(guess)?
                };
                let d = p0.delta + principal((rc / r0).arg());
                Ok((zc, res, d, nf * d - target))
            };
            let f0 = at(0.0)?.3;
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            let mut best = at(0.5)?;
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                best = at(mid)?;
                if best.3.abs() < 1e-12 {
                    break;
                }
                if (best.3 < 0.0) == (f0 < 0.0) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let (zc, res, d, f) = best;
            let seg = (p1.z - p0.z).norm();
            let slope = if seg > 0.0 {
                (p1.delta - p0.delta).abs() / seg
            } else {
                0.0
            };
            let degraded = pair.third_phase_gap(zc)?.is_some_and(|(_, gap)| gap > -1.0 / l as f64);
            Ok((
                k,
                PredictedZero {
                    m,
                    n,
                    l,
                    k: k.rem_euclid(volume as i64) as usize,
                    z: zc,
                    s: p0.s + seg * 0.5 * (lo + hi),
                    delta: d,
                    modulus_residual: res,
                    phase_residual: f.abs(),
                    density: nf / TAU * slope,
                    degraded,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let mut counts = std::collections::BTreeMap::new();
    for (k, _) in &zeros {
        *counts.entry(*k).or_insert(0usize) += 1;
    }
    let multi = counts.into_iter().filter(|(_, c)| *c > 1).map(|(k, _)| k).collect();
    let winding = nf * (pts[pts.len() - 1].delta - pts[0].delta) / TAU;
    Ok(ZeroSet {
        l,
        volume,
        zeros: zeros.into_iter().map(|(_, z)| z).collect(),
        multi_solution_windows: multi,
        winding,
        corrected: corrected_curve,
    })
}

/// `θ_k = (2k+1)π/N + 2e^{-2dJ} sin((2k+1)π/N)` with `N = L^d`.
pub fn ising_theta_k(j: f64, d: usize, l: usize, k: usize) -> f64 {
    let nv = l.pow(d as u32) as f64;
    let base = (2 * k + 1) as f64 * PI / nv;
    base + 2.0 * (-2.0 * d as f64 * j).exp() * base.sin()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityProfile {
    pub s: Vec<f64>,
    pub rho: Vec<f64>,
    /// `∫ρ ds`, the number of zeros the curve carries.
    pub integral: f64,
}

/// `ρ(s) = (L^d/2π)|dΔ/ds|` by differences on the traced polyline.
pub fn density_of_zeros(curve: &CoexistenceCurve, d: usize, l: usize) -> DensityProfile {
    let nf = l.pow(d as u32) as f64;
    let p = &curve.points;
    let mut s = Vec::with_capacity(p.len());
    let mut rho = Vec::with_capacity(p.len());
    let mut integral = 0.0;
    for i in 0..p.len() {
        let (a, b) = (i.saturating_sub(1), (i + 1).min(p.len() - 1));
        let ds = p[b].s - p[a].s;
        let slope = if ds > 0.0 {
            (p[b].delta - p[a].delta).abs() / ds
        } else {
            0.0
        };
        s.push(p[i].s);
        rho.push(nf / TAU * slope);
        if i > 0 {
            integral += nf / TAU * (p[i].delta - p[i - 1].delta).abs();
        }
    }
    DensityProfile { s, rho, integral }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    /// `(predicted index, exact index, distance)`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub max_distance: f64,
    pub mean_distance: f64,
    pub unmatched_predicted: Vec<usize>,
    pub unmatched_exact: Vec<usize>,
    pub cardinality_mismatch: bool,
    /// Optimality confirmed by exhaustive search.
    pub brute_force_verified: bool,
}

/// Largest side for which optimality is re-checked by brute force.
pub const BRUTE_FORCE_LIMIT: usize = 8;

/// Minimum total distance assignment between predicted and exact zeros.
pub fn match_predicted_exact(predicted: &[C64], exact: &[C64]) -> MatchReport {
    let (np, ne) = (predicted.len(), exact.len());
    let pairs: Vec<(usize, usize)> = if np <= ne {
        let cost: Vec<Vec<f64>> = predicted
            .iter()
            .map(|p| exact.iter().map(|e| (p - e).norm()).collect())
            .collect();
        hungarian(&cost).into_iter().enumerate().collect()
    } else {
        let cost: Vec<Vec<f64>> = exact
            .iter()
            .map(|e| predicted.iter().map(|p| (p - e).norm()).collect())
            .collect();
        hungarian(&cost).into_iter().enumerate().map(|(e, p)| (p, e)).collect()
    };
    let mut pairs: Vec<(usize, usize, f64)> = pairs
        .into_iter()
        .map(|(i, j)| (i, j, (predicted[i] - exact[j]).norm()))
        .collect();
    pairs.sort_by_key(|p| p.0);
    let total: f64 = pairs.iter().map(|p| p.2).sum();
    let brute_force_verified = np.min(ne) <= BRUTE_FORCE_LIMIT && np.max(ne) <= BRUTE_FORCE_LIMIT && {
        let best = brute_force_cost(predicted, exact);
        (best - total).abs() <= 1e-12 * total.max(1.0)
    };
    let unmatched_predicted = (0..np).filter(|i| !pairs.iter().any(|p| p.0 == *i)).collect();
    let unmatched_exact = (0..ne).filter(|j| !pairs.iter().any(|p| p.1 == *j)).collect();
    let max_distance = pairs.iter().map(|p| p.2).fold(0.0, f64::max);
    let mean_distance = if pairs.is_empty() {
        0.0
    } else {
        total / pairs.len() as f64
    };
    MatchReport {
        pairs,
        max_distance,
        mean_distance,
        unmatched_predicted,
        unmatched_exact,
        cardinality_mismatch: np != ne,
        brute_force_verified,
    }
}

/// Rows to distinct columns, `rows ≤ cols`, minimizing the total cost.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut ans = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            ans[p[j] - 1] = j - 1;
        }
    }
    ans
}

fn brute_force_cost(a: &[C64], b: &[C64]) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    fn rec(i: usize, small: &[C64], large: &[C64], used: &mut [bool], acc: f64, best: &mut f64) {
        if acc >= *best {
            return;
        }
        if i == small.len() {
            *best = acc;
            return;
        }
        for j in 0..large.len() {
            if !used[j] {
                used[j] = true;
                rec(i + 1, small, large, used, acc + (small[i] - large[j]).norm(), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(0, small, large, &mut vec![false; large.len()], 0.0, &mut best);
    if small.is_empty() {
        0.0
    } else {
        best
    }
}

/// `Z_L^per(z)`: full enumeration when affordable, transfer matrix otherwise.
pub fn exact_partition_function(model: &SpinModel, l: usize, z: C64) -> Result<C64> {
    match partition_function_exact(model, l, z) {
        Err(Error::Budget { .. }) => transfer_matrix_pf(model, l, z),
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub l: usize,
    pub z: C64,
    pub exact: C64,
    pub predicted: C64,
    /// `Ξ = Z_L^per − Σ_{m∈Q} q_m (ζ_m^{(L)})^{L^d}`.
    pub xi: C64,
    /// `|Ξ| / max_m |ζ_m^{(L)}|^{L^d}`.
    pub ratio: f64,
    pub phases: Vec<u8>,
    pub orbit_weighted: bool,
    pub warning: Option<String>,
}

/// Residual of the finite-volume phase decomposition of `Z_L^per`. With
/// `q = None` the phases within `1/L` of stability are used.
pub fn theorem_b_residual<S: ZetaSource + ?Sized>(
    finite: &S,
    l: usize,
    z: C64,
    q: Option<&[u8]>,
    orbit_weighted: bool,
) -> Result<ResidualReport> {
    let model = finite.model();
    let volume = l.pow(model.d as u32) as i32;
    let phases = model.phases();
    let logs: Vec<(u8, f64, C64)> = phases
        .iter()
        .map(|&m| finite.zeta(m, z).map(|v| (m, v.norm().ln(), v)))
        .collect::<Result<_>>()?;
    let top = logs.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    let kappa = 1.0 / l as f64;
    let chosen: Vec<u8> = match q {
        Some(q) => q.iter().map(|&m| model.representative(m)).collect(),
        None => logs.iter().filter(|x| top - x.1 < kappa).map(|x| x.0).collect(),
    };
    let warning = logs
        .iter()
        .filter(|x| !chosen.contains(&x.0) && top - x.1 < kappa)
        .map(|x| format!("excluded phase {} is within {:.3} of stability", x.0, top - x.1))
        .reduce(|a, b| a + "; " + &b);
    let exact = exact_partition_function(model, l, z)?;
    // Work relative to the dominant modulus to avoid overflow.
    let scale = (top * volume as f64).exp();
    let mut predicted = C64::new(0.0, 0.0);
    for &(m, lm, v) in &logs {
        if !chosen.contains(&m) {
            continue;
        }
        let w = if orbit_weighted {
            model.orbit_size(m) as f64
        } else {
            1.0
        };
        predicted += (v / lm.exp()).powi(volume) * ((lm - top) * volume as f64).exp() * w;
    }
    let xi_scaled = exact / scale - predicted;
    Ok(ResidualReport {
        l,
        z,
        exact,
        predicted: predicted * scale,
        xi: xi_scaled * scale,
        ratio: xi_scaled.norm(),
        phases: chosen,
        orbit_weighted,
        warning,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiplePoint {
    pub z: C64,
    pub phases: Vec<u8>,
    pub residual: f64,
}

/// Rectangle `[re0, re1] × [im0, im1]` sampled on an `nx × ny` grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub re: (f64, f64),
    pub im: (f64, f64),
    pub nx: usize,
    pub ny: usize,
}

impl Grid {
    pub fn nodes(&self) -> Vec<C64> {
        let step = |lo: f64, hi: f64, n: usize, i: usize| {
            if n <= 1 {
                0.5 * (lo + hi)
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        };
        let mut out = Vec::with_capacity(self.nx * self.ny);
        for j in 0..self.ny {
            for i in 0..self.nx {
                out.push(C64::new(
                    step(self.re.0, self.re.1, self.nx, i),
                    step(self.im.0, self.im.1, self.ny, j),
                ));
            }
        }
        out
    }
}

/// Points where three phases are simultaneously stable, by Newton on
/// `(f_m − f_n, f_n − f_p)` started from every grid node.
pub fn find_multiple_points<S: ZetaSource + ?Sized>(src: &S, grid: Grid) -> Result<Vec<MultiplePoint>> {
    let model = src.model();
    let phases = model.phases();
    let mut triples = Vec::new();
    for a in 0..phases.len() {
        for b in a + 1..phases.len() {
            for c in b + 1..phases.len() {
                triples.push([phases[a], phases[b], phases[c]]);
            }
        }
    }
    if triples.is_empty() {
        return Ok(Vec::new());
    }
    let nodes = grid.nodes();
    let lm = |m: u8, z: C64| -> Option<f64> {
        let v = src.zeta(m, z).ok()?;
        let l = v.norm().ln();
        l.is_finite().then_some(l)
    };
    let found: Vec<Option<MultiplePoint>> = nodes
        .par_iter()
        .flat_map_iter(|&z0| triples.iter().map(move |t| (z0, *t)))
        .map(|(z0, [a, b, c])| {
            let f = |z: C64| -> Option<(f64, f64)> {
                let (la, lb, lc) = (lm(a, z)?, lm(b, z)?, lm(c, z)?);
                Some((la - lb, lb - lc))
            };
            let mut z = z0;
            for _ in 0..40 {
                let (g1, g2) = f(z)?;
                if g1.abs().max(g2.abs()) < 1e-12 {
                    break;
                }
                let h = 1e-6 * z.norm().max(1.0);
                let (a1, a2) = f(z + h)?;
                let (b1, b2) = f(z - h)?;
                let (c1, c2) = f(z + C64::new(0.0, h))?;
                let (d1, d2) = f(z - C64::new(0.0, h))?;
                let (j11, j21) = ((a1 - b1) / (2.0 * h), (a2 - b2) / (2.0 * h));
                let (j12, j22) = ((c1 - d1) / (2.0 * h), (c2 - d2) / (2.0 * h));
                let det = j11 * j22 - j12 * j21;
                if det.abs() < 1e-300 {
                    return None;
                }
                let dx = (g1 * j22 - g2 * j12) / det;
                let dy = (j11 * g2 - j21 * g1) / det;
                z -= C64::new(dx, dy);
                if !z.re.is_finite() || !z.im.is_finite() || z.norm() == 0.0 {
                    return None;
                }
            }
            let (g1, g2) = f(z)?;
            let residual = g1.abs().max(g2.abs());
            if residual > 1e-10 {
                return None;
            }
            let top = lm(a, z)?;
            let dominated = phases
                .iter()
                .any(|&p| ![a, b, c].contains(&p) && lm(p, z).is_some_and(|v| v > top + 1e-9));
            (!dominated).then_some(MultiplePoint {
                z,
                phases: vec![a, b, c],
                residual,
            })
        })
        .collect();
    let mut out: Vec<MultiplePoint> = Vec::new();
    for p in found.into_iter().flatten() {
        if !out.iter().any(|q| q.phases == p.phases && (q.z - p.z).norm() < 1e-6) {
            out.push(p);
        }
    }
    out.sort_by(|a, b| {
        (a.phases.clone(), a.z.re, a.z.im)
            .partial_cmp(&(b.phases.clone(), b.z.re, b.z.im))
            .expect("finite multiple points")
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Normalization;

    #[test]
    fn theta_k_middle_is_pi() {
        assert_eq!(ising_theta_k(1.5, 2, 3, 4), PI);
        let t0 = ising_theta_k(1.5, 2, 3, 0);
        assert!((t0 - (PI / 9.0 + 2.0 * (-6.0f64).exp() * (PI / 9.0).sin())).abs() < 1e-15);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let a: Vec<C64> = (0..6).map(|i| C64::new(i as f64, (i * i % 5) as f64)).collect();
        let b: Vec<C64> = (0..7).map(|i| C64::new((7 - i) as f64 * 0.9, (i % 3) as f64)).collect();
        let r = match_predicted_exact(&a, &b);
        assert!(r.brute_force_verified);
        assert!(r.cardinality_mismatch);
        assert_eq!(r.unmatched_exact.len(), 1);
    }

    #[test]
    fn identical_sets_match_with_zero_distance() {
        let a: Vec<C64> = (0..5).map(|i| C64::from_polar(1.0, i as f64)).collect();
        let r = match_predicted_exact(&a, &a);
        assert_eq!(r.max_distance, 0.0);
        assert!(r.pairs.iter().all(|p| p.0 == p.1));
    }

    #[test]
    fn ground_state_ising_curve_is_unit_circle() {
        let m = SpinModel::ising(2, 1.0, Normalization::Shifted).unwrap();
        let g = GroundStates(&m);
        let c = trace_coexistence(&g, 1, 0, C64::new(1.0, 0.0), TraceOptions::default()).unwrap();
        assert!(c.closed);
        assert!(c.points.iter().all(|p| (p.z.norm() - 1.0).abs() < 1e-9));
        assert!((c.phase_winding() - TAU).abs() < 1e-9);
        let zs = solve_zero_equations(&g, &c, 3).unwrap();
        assert_eq!(zs.zeros.len(), 9);
        for z in &zs.zeros {
            assert!((z.z.arg().rem_euclid(TAU) - (2 * z.k + 1) as f64 * PI / 9.0).abs() < 1e-9);
        }
        let dens = density_of_zeros(&c, 2, 3);
        assert!((dens.integral - 9.0).abs() < 1e-9);
    }

    #[test]
    fn seed_far_from_single_phase_locus_errors() {
        let m = SpinModel::ising(2, 1.0, Normalization::Shifted).unwrap();
        let g = GroundStates(&m);
        assert!(trace_coexistence(&g, 1, 1, C64::new(2.0, 0.0), TraceOptions::default()).is_err());
    }
}

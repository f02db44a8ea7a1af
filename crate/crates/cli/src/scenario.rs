//! Scenario files.

use std::path::Path;

use pszeros::{ModelSpec, SpinModel, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    Exact,
    Bijection,
    ContourCheck,
    FreeEnergy,
    Zeros,
    Compare,
    Residual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub pipelines: Vec<Pipeline>,
    /// Torus sides `L`.
    #[serde(default)]
    pub sides: Vec<usize>,
    pub model: ModelSpec,
    #[serde(default)]
    pub points: PointSpec,
    #[serde(default)]
    pub curves: Vec<CurveSpec>,
    #[serde(default)]
    pub cutoffs: CutoffSpec,
    #[serde(default)]
    pub tolerances: ToleranceSpec,
}

/// Sample points in the `z`-plane: explicit ones plus seeded random ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointSpec {
    #[serde(default)]
    pub explicit: Vec<[f64; 2]>,
    #[serde(default)]
    pub random: usize,
    /// Modulus range of random points.
    #[serde(default = "default_radius")]
    pub radius: [f64; 2],
}

fn default_radius() -> [f64; 2] {
    [0.5, 1.5]
}

impl Default for PointSpec {
    fn default() -> Self {
        PointSpec {
            explicit: Vec::new(),
            random: 0,
            radius: default_radius(),
        }
    }
}

/// A coexistence curve between two phases, given by spin labels, traced from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveSpec {
    pub phases: [i32; 2],
    pub seed: [f64; 2],
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_length")]
    pub length: f64,
}

fn default_step() -> f64 {
    0.05
}

fn default_length() -> f64 {
    20.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutoffSpec {
    /// Defect sites per cluster in the pressure series.
    #[serde(default = "default_order")]
    pub order: usize,
}

fn default_order() -> usize {
    3
}

impl Default for CutoffSpec {
    fn default() -> Self {
        CutoffSpec { order: default_order() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceSpec {
    /// Relative tolerance of the contour representation check.
    #[serde(default = "default_relative")]
    pub relative: f64,
}

fn default_relative() -> f64 {
    1e-10
}

impl Default for ToleranceSpec {
    fn default() -> Self {
        ToleranceSpec {
            relative: default_relative(),
        }
    }
}

pub const PRESETS: &[(&str, &str)] = &[
    ("zeros-ising", include_str!("../../../scenarios/zeros-ising.toml")),
    (
        "bijection-check",
        include_str!("../../../scenarios/bijection-check.toml"),
    ),
    ("blume-capel", include_str!("../../../scenarios/blume-capel.toml")),
    ("contour-check", include_str!("../../../scenarios/contour-check.toml")),
    ("residual-ising", include_str!("../../../scenarios/residual-ising.toml")),
];

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let s: Scenario = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn preset(name: &str) -> Result<Self, CliError> {
        let text = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| {
                let names: Vec<&str> = PRESETS.iter().map(|p| p.0).collect();
                CliError::Config(format!("unknown preset {name:?}; available: {}", names.join(", ")))
            })?;
        Self::parse(text)
    }

    pub fn model(&self) -> Result<SpinModel, CliError> {
        self.model.build().map_err(|e| CliError::Config(format!("model: {e}")))
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.pipelines.is_empty() {
            return Err(CliError::Config("pipelines: at least one pipeline is required".into()));
        }
        let model = self.model()?;
        let min_side = 2 * model.range + 1;
        if let Some(l) = self.sides.iter().find(|&&l| l < min_side) {
            return Err(CliError::Config(format!("sides: L = {l} is below 2R+1 = {min_side}")));
        }
        let needs_sides = [
            Pipeline::Exact,
            Pipeline::Bijection,
            Pipeline::ContourCheck,
            Pipeline::Zeros,
            Pipeline::Compare,
            Pipeline::Residual,
        ];
        if self.sides.is_empty() && self.pipelines.iter().any(|p| needs_sides.contains(p)) {
            return Err(CliError::Config("sides: required by the selected pipelines".into()));
        }
        for (i, c) in self.curves.iter().enumerate() {
            for l in c.phases {
                if model.spin(l).is_none() {
                    return Err(CliError::Config(format!("curves[{i}].phases: unknown spin label {l}")));
                }
            }
            if c.phases[0] == c.phases[1] {
                return Err(CliError::Config(format!("curves[{i}].phases: labels must differ")));
            }
            if !(c.step > 0.0 && c.length > 0.0) {
                return Err(CliError::Config(format!(
                    "curves[{i}]: step and length must be positive"
                )));
            }
        }
        if self.pipelines.contains(&Pipeline::Zeros) && self.curves.is_empty() {
            return Err(CliError::Config(
                "curves: the zeros pipeline needs at least one curve".into(),
            ));
        }
        if self.pipelines.contains(&Pipeline::Compare) && !self.pipelines.contains(&Pipeline::Zeros) {
            return Err(CliError::Config("pipelines: compare needs the zeros pipeline".into()));
        }
        let r = self.points.radius;
        if !(r[0] > 0.0 && r[1] >= r[0]) {
            return Err(CliError::Config("points.radius: need 0 < r0 ≤ r1".into()));
        }
        if self.cutoffs.order == 0 {
            return Err(CliError::Config("cutoffs.order: must be at least 1".into()));
        }
        Ok(())
    }

    /// Explicit points followed by `random` points drawn from the seed.
    pub fn sample_points(&self, seed: u64) -> Vec<C64> {
        let mut out: Vec<C64> = self.points.explicit.iter().map(|p| C64::new(p[0], p[1])).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [r0, r1] = self.points.radius;
        for _ in 0..self.points.random {
            let r = if r1 > r0 { rng.gen_range(r0..r1) } else { r0 };
            let t = rng.gen_range(0.0..std::f64::consts::TAU);
            out.push(C64::from_polar(r, t));
        }
        out
    }
}

//! Result files: CSV, JSON, SVG and the checksum manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use pszeros::numeric::fmt17;
use pszeros::C64;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Collects output files in memory and writes them with a manifest.
#[derive(Default)]
pub struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
}

#[derive(Serialize)]
struct ManifestEntry<'a> {
    path: &'a str,
    bytes: usize,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    scenario: &'a str,
    seed: u64,
    files: Vec<ManifestEntry<'a>>,
}

impl Artifacts {
    pub fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }

    pub fn json<T: Serialize>(&mut self, name: impl Into<String>, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
        text.push('\n');
        self.add(name, text);
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.files.iter().map(|f| f.0.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|f| f.0 == name).map(|f| f.1.as_slice())
    }

    /// Writes every file and `manifest.json` under `dir`; returns the written paths.
    pub fn write(mut self, dir: &Path, scenario: &str, seed: u64) -> Result<Vec<PathBuf>, CliError> {
        self.files.sort_by(|a, b| a.0.cmp(&b.0));
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        let entries: Vec<ManifestEntry> = self
            .files
            .iter()
            .map(|(name, bytes)| ManifestEntry {
                path: name,
                bytes: bytes.len(),
                sha256: hex(&Sha256::digest(bytes)),
            })
            .collect();
        let mut manifest = serde_json::to_string_pretty(&Manifest {
            scenario,
            seed,
            files: entries,
        })
        .map_err(|e| CliError::Internal(e.to_string()))?;
        manifest.push('\n');
        let mut written = Vec::new();
        for (name, bytes) in self
            .files
            .iter()
            .chain(std::iter::once(&("manifest.json".to_string(), manifest.into_bytes())))
        {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            written.push(path);
        }
        Ok(written)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// CSV with a header row; every float in 17 significant digits.
pub struct Csv {
    text: String,
}

pub enum Cell {
    F(f64),
    I(i64),
    S(String),
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::F(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::I(x as i64)
    }
}

impl From<i64> for Cell {
    fn from(x: i64) -> Self {
        Cell::I(x)
    }
}

impl From<i32> for Cell {
    fn from(x: i32) -> Self {
        Cell::I(x as i64)
    }
}

impl From<bool> for Cell {
    fn from(x: bool) -> Self {
        Cell::S(x.to_string())
    }
}

impl From<&str> for Cell {
    fn from(x: &str) -> Self {
        Cell::S(x.to_string())
    }
}

impl From<String> for Cell {
    fn from(x: String) -> Self {
        Cell::S(x)
    }
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Csv {
            text: header.join(",") + "\n",
        }
    }

    pub fn row(&mut self, cells: Vec<Cell>) {
        let parts: Vec<String> = cells
            .into_iter()
            .map(|c| match c {
                Cell::F(x) if x.is_finite() => fmt17(x),
                Cell::F(x) => x.to_string(),
                Cell::I(i) => i.to_string(),
                Cell::S(s) if s.contains([',', '"', '\n']) => format!("\"{}\"", s.replace('"', "\"\"")),
                Cell::S(s) => s,
            })
            .collect();
        self.text.push_str(&parts.join(","));
        self.text.push('\n');
    }

    pub fn finish(self) -> String {
        self.text
    }
}

/// Scatter plot of zeros around the unit circle: exact zeros filled, predicted
/// ones hollow, coexistence curves as polylines.
pub fn zeros_svg(title: &str, exact: &[C64], predicted: &[C64], curves: &[Vec<C64>]) -> String {
    let size = 520.0;
    let pad = 30.0;
    let extent = exact
        .iter()
        .chain(predicted)
        .chain(curves.iter().flatten())
        .map(|z| z.re.abs().max(z.im.abs()))
        .fold(1.0f64, f64::max)
        * 1.15;
    let scale = (size - 2.0 * pad) / (2.0 * extent);
    let px = |z: C64| (size / 2.0 + z.re * scale, size / 2.0 - z.im * scale);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">"
    );
    let _ = writeln!(s, "<title>{}</title>", escape(title));
    let _ = writeln!(s, "<rect width=\"{size}\" height=\"{size}\" fill=\"white\"/>");
    let c = size / 2.0;
    let _ = writeln!(
        s,
        "<line x1=\"{pad}\" y1=\"{c}\" x2=\"{:.3}\" y2=\"{c}\" stroke=\"#bbb\" stroke-width=\"1\"/>",
        size - pad
    );
    let _ = writeln!(
        s,
        "<line x1=\"{c}\" y1=\"{pad}\" x2=\"{c}\" y2=\"{:.3}\" stroke=\"#bbb\" stroke-width=\"1\"/>",
        size - pad
    );
    let _ = writeln!(
        s,
        "<circle cx=\"{c}\" cy=\"{c}\" r=\"{:.3}\" fill=\"none\" stroke=\"#888\" stroke-dasharray=\"4 3\"/>",
        scale
    );
    for curve in curves {
        if curve.is_empty() {
            continue;
        }
        let pts: Vec<String> = curve
            .iter()
            .map(|&z| {
                let (x, y) = px(z);
                format!("{x:.3},{y:.3}")
            })
            .collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#3b6fb6\" stroke-width=\"1\"/>",
            pts.join(" ")
        );
    }
    for &z in exact {
        let (x, y) = px(z);
        let _ = writeln!(s, "<circle cx=\"{x:.3}\" cy=\"{y:.3}\" r=\"3\" fill=\"black\"/>");
    }
    for &z in predicted {
        let (x, y) = px(z);
        let _ = writeln!(
            s,
            "<circle cx=\"{x:.3}\" cy=\"{y:.3}\" r=\"6\" fill=\"none\" stroke=\"#c0392b\" stroke-width=\"1.5\"/>"
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_plot_has_only_the_circle() {
        let s = zeros_svg("empty", &[], &[], &[]);
        assert_eq!(s.matches("<circle").count(), 1);
        assert_eq!(s, zeros_svg("empty", &[], &[], &[]));
    }

    #[test]
    fn csv_quotes_and_formats() {
        let mut c = Csv::new(&["a", "b"]);
        c.row(vec![0.1.into(), "x,y".into()]);
        assert_eq!(c.finish(), "a,b\n1.0000000000000001e-1,\"x,y\"\n");
    }
}

//! Synthetic hierarchical sales panels.
//!
//! Each hierarchy has a shared AR(1) driver; every bottom series mixes it
//! with its own AR(1) driver at the requested sharing coefficient, then adds
//! white noise and clips at zero.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::SalesPanel;
use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;

pub const ROOT_ID: &str = "Total";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub hierarchies: usize,
    pub bottoms: usize,
    /// Middle-level groups; 0 attaches bottoms directly to the root.
    pub groups: usize,
    pub length: usize,
    /// Standard deviation of the additive white noise.
    pub noise: f64,
    /// Weight in [0, 1] of the shared driver in each bottom's signal.
    pub sharing: f64,
    pub phi: f64,
    pub level: f64,
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            hierarchies: 5,
            bottoms: 4,
            groups: 2,
            length: 300,
            noise: 1.0,
            sharing: 0.8,
            phi: 0.6,
            level: 20.0,
            amplitude: 5.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.hierarchies == 0 {
            errors.push("hierarchies must be >= 1".to_string());
        }
        if self.bottoms == 0 {
            errors.push("bottoms must be >= 1".to_string());
        }
        if self.groups > self.bottoms {
            errors.push(format!("groups ({}) cannot exceed bottoms ({})", self.groups, self.bottoms));
        }
        if self.length < 2 {
            errors.push("length must be >= 2".to_string());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            errors.push(format!("noise {} must be >= 0", self.noise));
        }
        if !(0.0..=1.0).contains(&self.sharing) {
            errors.push(format!("sharing {} must lie in [0, 1]", self.sharing));
        }
        if !(self.phi > -1.0 && self.phi < 1.0) {
            errors.push(format!("phi {} must lie in (-1, 1)", self.phi));
        }
        if !(self.level.is_finite() && self.amplitude.is_finite() && self.amplitude >= 0.0) {
            errors.push("level and amplitude must be finite, amplitude >= 0".to_string());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParam(errors.join("; ")))
        }
    }

    fn width(n: usize) -> usize {
        n.to_string().len().max(2)
    }

    pub fn hierarchy_id(&self, i: usize) -> String {
        format!("H{:0w$}", i + 1, w = Self::width(self.hierarchies).max(4))
    }

    pub fn bottom_id(&self, j: usize) -> String {
        format!("B{:0w$}", j + 1, w = Self::width(self.bottoms))
    }

    fn group_id(&self, g: usize) -> String {
        format!("G{:0w$}", g + 1, w = Self::width(self.groups))
    }

    /// Template tree: root, then groups, then bottoms split into contiguous
    /// near-equal blocks.
    pub fn edges(&self) -> Vec<(String, String)> {
        let mut edges = Vec::new();
        if self.groups == 0 {
            for j in 0..self.bottoms {
                edges.push((ROOT_ID.to_string(), self.bottom_id(j)));
            }
            return edges;
        }
        for g in 0..self.groups {
            edges.push((ROOT_ID.to_string(), self.group_id(g)));
        }
        for j in 0..self.bottoms {
            edges.push((self.group_id(j * self.groups / self.bottoms), self.bottom_id(j)));
        }
        edges
    }

    pub fn bottom_order(&self) -> Vec<String> {
        (0..self.bottoms).map(|j| self.bottom_id(j)).collect()
    }

    pub fn hierarchy(&self) -> Result<Hierarchy> {
        Hierarchy::build(&self.edges(), &self.bottom_order())
    }
}

/// Unit-variance AR(1) path started from its stationary distribution.
fn ar1(rng: &mut ChaCha8Rng, phi: f64, n: usize) -> Vec<f64> {
    let innovation = (1.0 - phi * phi).sqrt();
    let mut x: f64 = StandardNormal.sample(rng);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(x);
        let e: f64 = StandardNormal.sample(rng);
        x = phi * x + innovation * e;
    }
    out
}

/// The mixed unit-variance signals before level, noise and clipping, per
/// hierarchy and bottom.
pub fn signals(spec: &SynthSpec) -> Result<Vec<Vec<Vec<f64>>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (ws, wu) = (spec.sharing.sqrt(), (1.0 - spec.sharing).sqrt());
    Ok((0..spec.hierarchies)
        .map(|_| {
            let shared = ar1(&mut rng, spec.phi, spec.length);
            (0..spec.bottoms)
                .map(|_| {
                    let own = ar1(&mut rng, spec.phi, spec.length);
                    shared.iter().zip(&own).map(|(z, u)| ws * z + wu * u).collect()
                })
                .collect()
        })
        .collect())
}

pub fn generate(spec: &SynthSpec) -> Result<SalesPanel> {
    let signals = signals(spec)?;
    // Noise comes from a separate stream so the signals do not depend on it.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut panel = BTreeMap::new();
    for (i, bottoms) in signals.into_iter().enumerate() {
        let mut nodes = BTreeMap::new();
        for (j, s) in bottoms.into_iter().enumerate() {
            let values = s
                .into_iter()
                .map(|v| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    (spec.level + spec.amplitude * v + spec.noise * e).max(0.0)
                })
                .collect();
            nodes.insert(spec.bottom_id(j), values);
        }
        panel.insert(spec.hierarchy_id(i), nodes);
    }
    SalesPanel::from_series(panel)
}

/// Paths written by [`write_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthFiles {
    pub sales: std::path::PathBuf,
    pub edges: std::path::PathBuf,
    pub bottom_order: std::path::PathBuf,
}

/// Writes `sales.csv`, `edges.csv` and `bottom_order.txt` into `dir`.
pub fn write_dataset(spec: &SynthSpec, dir: &Path) -> Result<SynthFiles> {
    let panel = generate(spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = SynthFiles {
        sales: dir.join("sales.csv"),
        edges: dir.join("edges.csv"),
        bottom_order: dir.join("bottom_order.txt"),
    };
    let sales = fs::File::create(&files.sales).map_err(|e| Error::io(&files.sales, e))?;
    panel.write_csv(BufWriter::new(sales))?;

    let mut w = csv::Writer::from_path(&files.edges)?;
    w.write_record(["parent_id", "child_id"])?;
    for (p, c) in spec.edges() {
        w.write_record([p, c])?;
    }
    w.flush().map_err(|e| Error::io(&files.edges, e))?;

    let mut order = spec.bottom_order().join("\n");
    order.push('\n');
    fs::write(&files.bottom_order, order).map_err(|e| Error::io(&files.bottom_order, e))?;
    Ok(files)
}

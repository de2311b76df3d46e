//! Sales ingestion, hierarchy aggregation and rolling-window embeddings.
//!
//! Each embedding row holds `lags + 1` explanatory values (the lagged sales
//! plus the current day's sale, oldest first) followed by the sale `horizon`
//! days ahead as the target.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, SummingMatrix};

pub const DEFAULT_LAGS: usize = 60;
pub const DEFAULT_HOLDOUT: usize = 28;

/// Bottom-level sales keyed by hierarchy id, then bottom node id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SalesPanel {
    series: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
struct SalesRecord {
    hierarchy_id: String,
    node_id: String,
    t: String,
    value: String,
}

impl SalesPanel {
    /// Builds a panel from in-memory series after the same validation the
    /// CSV loader applies.
    pub fn from_series(series: BTreeMap<String, BTreeMap<String, Vec<f64>>>) -> Result<Self> {
        for (hid, nodes) in &series {
            let mut len = None;
            for (node, values) in nodes {
                if let Some((t, v)) = values.iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
                    return Err(Error::Data(format!(
                        "negative sales (or non-finite) {v} for {hid}/{node} at t={}",
                        t + 1
                    )));
                }
                match len {
                    None => len = Some(values.len()),
                    Some(l) if l != values.len() => {
                        return Err(Error::Data(format!(
                            "hierarchy {hid}: series lengths differ ({l} vs {} for {node})",
                            values.len()
                        )))
                    }
                    _ => {}
                }
                if values.is_empty() {
                    return Err(Error::Data(format!("{hid}/{node}: empty series")));
                }
            }
        }
        Ok(Self { series })
    }

    /// Reads a `hierarchy_id,node_id,t,value` CSV.
    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(BufReader::new(file), &path.display().to_string())
    }

    pub fn read_csv<R: Read>(reader: R, origin: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        for col in ["hierarchy_id", "node_id", "t", "value"] {
            if !headers.iter().any(|h| h == col) {
                return Err(Error::Data(format!("{origin}: missing column '{col}'")));
            }
        }
        let mut points: BTreeMap<String, BTreeMap<String, BTreeMap<i64, f64>>> = BTreeMap::new();
        for (line, rec) in rdr.deserialize::<SalesRecord>().enumerate() {
            let line = line + 2;
            let rec = rec?;
            let t: i64 = rec.t.parse().map_err(|_| {
                Error::Data(format!("{origin}:{line}: non-integer t '{}'", rec.t))
            })?;
            let value: f64 = rec.value.parse().map_err(|_| {
                Error::Data(format!("{origin}:{line}: non-numeric value '{}'", rec.value))
            })?;
            if !value.is_finite() {
                return Err(Error::Data(format!("{origin}:{line}: non-numeric value '{}'", rec.value)));
            }
            if value < 0.0 {
                return Err(Error::Data(format!("{origin}:{line}: negative sales {value}")));
            }
            let series = points.entry(rec.hierarchy_id.clone()).or_default().entry(rec.node_id.clone()).or_default();
            match series.entry(t) {
                Entry::Occupied(_) => {
                    return Err(Error::Data(format!(
                        "{origin}:{line}: duplicate key ({}, {}, {t})",
                        rec.hierarchy_id, rec.node_id
                    )))
                }
                Entry::Vacant(slot) => {
                    slot.insert(value);
                }
            }
        }

        let mut series = BTreeMap::new();
        for (hid, nodes) in points {
            let mut out = BTreeMap::new();
            for (node, by_t) in nodes {
                for (expect, &t) in (1i64..).zip(by_t.keys()) {
                    if t != expect {
                        return Err(Error::Data(format!(
                            "{origin}: non-contiguous t for {hid}/{node}: expected t={expect}, found t={t}"
                        )));
                    }
                }
                out.insert(node, by_t.into_values().collect::<Vec<_>>());
            }
            series.insert(hid, out);
        }
        Self::from_series(series)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["hierarchy_id", "node_id", "t", "value"])?;
        for (hid, nodes) in &self.series {
            for (node, values) in nodes {
                for (t, v) in values.iter().enumerate() {
                    w.write_record([hid.as_str(), node.as_str(), &(t + 1).to_string(), &v.to_string()])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn hierarchy_ids(&self) -> impl Iterator<Item = &str> {
        self.series.keys().map(String::as_str)
    }

    pub fn series(&self) -> &BTreeMap<String, BTreeMap<String, Vec<f64>>> {
        &self.series
    }

    pub fn record_count(&self) -> usize {
        self.series.values().flat_map(|n| n.values()).map(Vec::len).sum()
    }
}

/// One node's series within one hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFrame {
    pub hierarchy_id: String,
    pub node_id: String,
    /// Row index of the node in the hierarchy's node order.
    pub node: usize,
    pub values: Vec<f64>,
}

/// Aggregates a panel to every node of `h`. Frames come out grouped by
/// hierarchy id (sorted) and within each hierarchy in node order.
pub fn to_hierarchy_series(panel: &SalesPanel, h: &Hierarchy) -> Result<Vec<SeriesFrame>> {
    let s = SummingMatrix::new(h);
    let mut frames = Vec::with_capacity(panel.series.len() * h.n_total());
    for (hid, nodes) in &panel.series {
        if nodes.len() != h.m_bottom() || h.bottom_order().iter().any(|b| !nodes.contains_key(b)) {
            let mut unknown: Vec<&str> = nodes
                .keys()
                .filter(|k| !h.bottom_order().contains(k))
                .map(String::as_str)
                .collect();
            unknown.truncate(5);
            return Err(Error::Data(format!(
                "hierarchy {hid}: bottom ids do not match the hierarchy ({} given, {} expected; unknown: [{}])",
                nodes.len(),
                h.m_bottom(),
                unknown.join(", ")
            )));
        }
        let bottoms: Vec<&Vec<f64>> = h.bottom_order().iter().map(|b| &nodes[b]).collect();
        let len = bottoms[0].len();
        if bottoms.iter().any(|b| b.len() != len) {
            return Err(Error::Data(format!("hierarchy {hid}: bottom series lengths differ")));
        }
        let mut values = vec![Vec::with_capacity(len); h.n_total()];
        let mut b = vec![0.0; h.m_bottom()];
        for t in 0..len {
            for (slot, series) in b.iter_mut().zip(&bottoms) {
                *slot = series[t];
            }
            for (node, y) in s.aggregate_bottom(&b)?.into_iter().enumerate() {
                values[node].push(y);
            }
        }
        for (node, values) in values.into_iter().enumerate() {
            frames.push(SeriesFrame {
                hierarchy_id: hid.clone(),
                node_id: h.nodes()[node].clone(),
                node,
                values,
            });
        }
    }
    Ok(frames)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SeriesKey {
    pub hierarchy_id: String,
    pub node_id: String,
}

/// Rolling-window matrix for one series, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub key: SeriesKey,
    n_features: usize,
    horizon: usize,
    rows: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    /// Builds the embedding of `values` with `lags` lagged values plus the
    /// current value as features and the value `horizon` steps ahead as the
    /// target.
    pub fn build(key: SeriesKey, values: &[f64], lags: usize, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidParam("horizon must be >= 1".into()));
        }
        let window = lags + 1 + horizon;
        if values.len() < window {
            return Err(Error::Data(format!(
                "series {}/{} too short: {} values, need at least {window}",
                key.hierarchy_id,
                key.node_id,
                values.len()
            )));
        }
        let n_features = lags + 1;
        let rows = values.len() - window + 1;
        let mut data = Vec::with_capacity(rows * (n_features + 1));
        for r in 0..rows {
            data.extend_from_slice(&values[r..r + n_features]);
            data.push(values[r + lags + horizon]);
        }
        Ok(Self {
            key,
            n_features,
            horizon,
            rows,
            data,
        })
    }

    pub fn from_frame(frame: &SeriesFrame, lags: usize, horizon: usize) -> Result<Self> {
        let key = SeriesKey {
            hierarchy_id: frame.hierarchy_id.clone(),
            node_id: frame.node_id.clone(),
        };
        Self::build(key, &frame.values, lags, horizon)
    }

    pub fn row_count(&self) -> usize {
        self.rows
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_cols(&self) -> usize {
        self.n_features + 1
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Full row: features then target.
    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.n_cols();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn features(&self, r: usize) -> &[f64] {
        &self.row(r)[..self.n_features]
    }

    pub fn target(&self, r: usize) -> f64 {
        self.row(r)[self.n_features]
    }

    /// 1-based day index of the target of row `r`.
    pub fn target_day(&self, r: usize) -> usize {
        r + self.n_features - 1 + self.horizon + 1
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_binary_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Writes the `HTSF-EMB` columnar format: 16-byte magic, u16 version,
    /// u32 rows, u32 cols, then row-major little-endian f64s.
    pub fn write_binary_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&EMB_MAGIC)?;
        w.write_all(&EMB_VERSION.to_le_bytes())?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.n_cols() as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a matrix written by [`write_binary_to`](Self::write_binary_to).
    /// The file carries no series key or horizon; the caller supplies them.
    pub fn read_binary_from<R: Read>(r: &mut R, key: SeriesKey, horizon: usize) -> Result<Self> {
        let io = |e| Error::io("<embedding>", e);
        let mut magic = [0u8; 16];
        r.read_exact(&mut magic).map_err(io)?;
        if magic != EMB_MAGIC {
            return Err(Error::Data("embedding file: bad magic header".into()));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2).map_err(io)?;
        let version = u16::from_le_bytes(b2);
        if version != EMB_VERSION {
            return Err(Error::Data(format!("embedding file: unsupported version {version}")));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(io)?;
        let rows = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4).map_err(io)?;
        let cols = u32::from_le_bytes(b4) as usize;
        if cols < 2 {
            return Err(Error::Data(format!("embedding file: {cols} columns")));
        }
        let mut data = Vec::with_capacity(rows * cols);
        let mut b8 = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut b8).map_err(io)?;
            data.push(f64::from_le_bytes(b8));
        }
        Ok(Self {
            key,
            n_features: cols - 1,
            horizon,
            rows,
            data,
        })
    }
}

pub const EMB_MAGIC: [u8; 16] = *b"HTSF-EMB\0\0\0\0\0\0\0\0";
pub const EMB_VERSION: u16 = 1;

/// Train/test partition of an embedding's rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub holdout_len: usize,
    pub train_rows: Range<usize>,
    pub test_rows: Range<usize>,
}

/// Reserves the final `holdout` rows for testing.
pub fn split_holdout(row_count: usize, holdout: usize) -> Result<SplitSpec> {
    if holdout == 0 || holdout >= row_count {
        return Err(Error::Data(format!(
            "holdout {holdout} must be in 1..{row_count} (embedding row count)"
        )));
    }
    let cut = row_count - holdout;
    Ok(SplitSpec {
        holdout_len: holdout,
        train_rows: 0..cut,
        test_rows: cut..row_count,
    })
}

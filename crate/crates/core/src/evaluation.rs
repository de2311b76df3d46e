//! Forecast accuracy: MASE, level- and product-averaged aggregates,
//! rank-based multiple comparisons with the best, and boxplot statistics.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::ForecastSet;
use crate::hierarchy::LevelClass;

/// In-sample one-step naive mean absolute error, the MASE denominator.
pub fn naive_scale(train: &[f64]) -> Result<f64> {
    if train.len() < 2 {
        return Err(Error::Data(format!(
            "MASE scaling needs at least 2 training values, got {}",
            train.len()
        )));
    }
    let sum: f64 = train.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    Ok(sum / (train.len() - 1) as f64)
}

/// MASE against a precomputed naive scale. `None` when the scale is zero.
pub fn mase_scaled(scale: f64, actuals: &[f64], forecasts: &[f64]) -> Result<Option<f64>> {
    if actuals.len() != forecasts.len() {
        return Err(Error::Dimension {
            what: "forecasts",
            expected: actuals.len(),
            got: forecasts.len(),
        });
    }
    if actuals.is_empty() {
        return Err(Error::Data("MASE needs at least one forecast".into()));
    }
    if scale == 0.0 {
        return Ok(None);
    }
    let mae = actuals.iter().zip(forecasts).map(|(a, f)| (a - f).abs()).sum::<f64>() / actuals.len() as f64;
    Ok(Some(mae / scale))
}

pub fn mase(train: &[f64], actuals: &[f64], forecasts: &[f64]) -> Result<Option<f64>> {
    mase_scaled(naive_scale(train)?, actuals, forecasts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaseScore {
    pub hierarchy_id: String,
    pub node_id: String,
    pub level: LevelClass,
    /// `None` when the naive scale is zero.
    pub value: Option<f64>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Level means and their average.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelAverages {
    /// Indexed by [`LevelClass::index`]: mean over hierarchies of the mean
    /// over that hierarchy's series at the level.
    pub level_means: [f64; 3],
    pub avg_levels: f64,
    pub excluded: usize,
}

/// Mean over levels of (mean over hierarchies of (mean over the level's
/// series)). Undefined scores are dropped and counts renormalised.
pub fn avg_levels(scores: &[MaseScore]) -> Result<LevelAverages> {
    let mut by_level: [BTreeMap<&str, Vec<f64>>; 3] = Default::default();
    let mut excluded = 0;
    for s in scores {
        match s.value {
            Some(v) => by_level[s.level.index()].entry(&s.hierarchy_id).or_default().push(v),
            None => excluded += 1,
        }
    }
    let mut level_means = [0.0; 3];
    for level in LevelClass::ALL {
        let groups = &by_level[level.index()];
        if groups.is_empty() {
            return Err(Error::Data(format!("empty level: no defined scores at the {} level", level.as_str())));
        }
        let per_hierarchy: Vec<f64> = groups.values().map(|v| mean(v)).collect();
        level_means[level.index()] = mean(&per_hierarchy);
    }
    Ok(LevelAverages {
        level_means,
        avg_levels: mean(&level_means),
        excluded,
    })
}

/// Mean over hierarchies of the mean over that hierarchy's series.
pub fn avg_products(scores: &[MaseScore]) -> Result<f64> {
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for s in scores {
        if let Some(v) = s.value {
            groups.entry(&s.hierarchy_id).or_default().push(v);
        }
    }
    if groups.is_empty() {
        return Err(Error::Data("empty hierarchy set: no defined scores".into()));
    }
    let per_hierarchy: Vec<f64> = groups.values().map(|v| mean(v)).collect();
    Ok(mean(&per_hierarchy))
}

/// Upper 5% points of the studentized range with infinite degrees of
/// freedom, for k = 2..=20 groups.
pub const STUDENTIZED_RANGE_Q05: [f64; 19] = [
    2.772, 3.314, 3.633, 3.858, 4.030, 4.170, 4.286, 4.387, 4.474, 4.552, 4.622, 4.685, 4.743, 4.796,
    4.845, 4.891, 4.934, 4.974, 5.012,
];

pub fn studentized_range_q(k: usize, alpha: f64) -> Result<f64> {
    if (alpha - 0.05).abs() > 1e-12 {
        return Err(Error::InvalidParam(format!(
            "studentized range table is available for alpha = 0.05 only, got {alpha}"
        )));
    }
    if !(2..=20).contains(&k) {
        return Err(Error::InvalidParam(format!("MCB supports 2..=20 models, got {k}")));
    }
    Ok(STUDENTIZED_RANGE_Q05[k - 2])
}

/// Ranks with ties sharing their average rank (1 = smallest).
pub fn average_ranks(row: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
    let mut ranks = vec![0.0; row.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && row[idx[j + 1]] == row[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, PartialEq)]
pub struct McbResult {
    pub models: Vec<String>,
    pub mean_ranks: Vec<f64>,
    pub half_width: f64,
    pub best: usize,
    pub significant_vs_best: Vec<bool>,
    /// `overlap[i][j]`: the intervals of models i and j intersect.
    pub overlap: Vec<Vec<bool>>,
    pub n_obs: usize,
    pub dropped_rows: usize,
}

impl McbResult {
    pub fn interval(&self, i: usize) -> (f64, f64) {
        (self.mean_ranks[i] - self.half_width, self.mean_ranks[i] + self.half_width)
    }
}

/// Multiple comparisons with the best on an observations-by-models score
/// matrix (lower is better). Rows containing an undefined score are dropped.
pub fn mcb_test(models: &[String], rows: &[Vec<Option<f64>>], alpha: f64) -> Result<McbResult> {
    let k = models.len();
    let q = studentized_range_q(k, alpha)?;
    let mut complete = Vec::with_capacity(rows.len());
    for row in rows {
        if row.len() != k {
            return Err(Error::Dimension {
                what: "MCB score row",
                expected: k,
                got: row.len(),
            });
        }
        if let Some(vals) = row.iter().copied().collect::<Option<Vec<f64>>>() {
            complete.push(vals);
        }
    }
    let n = complete.len();
    if n < 2 {
        return Err(Error::Data(format!("MCB needs at least 2 complete observations, got {n}")));
    }
    let mut rank_sums = vec![0.0; k];
    for row in &complete {
        for (acc, r) in rank_sums.iter_mut().zip(average_ranks(row)) {
            *acc += r;
        }
    }
    let mean_ranks: Vec<f64> = rank_sums.iter().map(|s| s / n as f64).collect();
    let half_width = 0.5 * q * ((k * (k + 1)) as f64 / (6.0 * n as f64)).sqrt();
    let best = (0..k).fold(0, |b, i| if mean_ranks[i] < mean_ranks[b] { i } else { b });
    let (blo, bhi) = (mean_ranks[best] - half_width, mean_ranks[best] + half_width);
    let significant_vs_best = mean_ranks
        .iter()
        .map(|&r| r - half_width > bhi || r + half_width < blo)
        .collect();
    let overlap = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| (mean_ranks[i] - mean_ranks[j]).abs() <= 2.0 * half_width)
                .collect()
        })
        .collect();
    Ok(McbResult {
        models: models.to_vec(),
        mean_ranks,
        half_width,
        best,
        significant_vs_best,
        overlap,
        n_obs: n,
        dropped_rows: rows.len() - n,
    })
}

/// Tukey five-number summary with 1.5 IQR whiskers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub lower_whisker: f64,
    pub upper_whisker: f64,
}

/// Quantile by linear interpolation between order statistics
/// (`h = (n - 1) p`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn distribution_stats(values: &[f64]) -> Result<DistributionStats> {
    if values.is_empty() {
        return Err(Error::Data("distribution statistics need a non-empty group".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let median = quantile_sorted(&sorted, 0.5);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let lower_whisker = *sorted.iter().find(|&&v| v >= lo_fence).expect("q1 lies inside the fence");
    let upper_whisker = *sorted.iter().rev().find(|&&v| v <= hi_fence).expect("q3 lies inside the fence");
    Ok(DistributionStats {
        min: sorted[0],
        q1,
        median,
        q3,
        max: sorted[sorted.len() - 1],
        lower_whisker,
        upper_whisker,
    })
}

/// Formats with four decimals, rounding halves away from zero on the
/// value's shortest decimal representation (so `0.82345` becomes `0.8235`).
pub fn format_4dp(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let text = format!("{:.12}", x.abs());
    let (int_part, frac) = text.split_once('.').expect("fixed-point format");
    let int_part: i128 = int_part.parse().expect("digits");
    let frac = frac.as_bytes();
    let first4: i128 = std::str::from_utf8(&frac[..4]).expect("ascii").parse().expect("digits");
    let mut scaled = int_part * 10_000 + first4;
    if frac[4] >= b'5' {
        scaled += 1;
    }
    let sign = if x < 0.0 && scaled != 0 { "-" } else { "" };
    format!("{sign}{}.{:04}", scaled / 10_000, scaled % 10_000)
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub label: String,
    pub level_means: [f64; 3],
    pub avg_levels: f64,
    pub avg_products: f64,
    pub excluded: usize,
}

pub const RESULTS_HEADER: &str = "Model,TopLevel,MiddleLevel,BottomLevel,AvgLevels,AvgProducts";

pub fn render_results_table(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.label,
            format_4dp(r.level_means[0]),
            format_4dp(r.level_means[1]),
            format_4dp(r.level_means[2]),
            format_4dp(r.avg_levels),
            format_4dp(r.avg_products)
        );
    }
    out
}

/// Per-series metadata needed to score forecasts without the raw data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub hierarchy_id: String,
    pub node_id: String,
    pub level: LevelClass,
    /// Naive one-step MAE over the training portion.
    pub scale: f64,
}

pub fn write_series_meta<W: Write>(w: W, meta: &[SeriesMeta]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["hierarchy_id", "node_id", "level", "scale"])?;
    for m in meta {
        out.write_record([
            m.hierarchy_id.as_str(),
            m.node_id.as_str(),
            m.level.as_str(),
            &m.scale.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<series csv>", e))?;
    Ok(())
}

pub fn read_series_meta<R: Read>(r: R) -> Result<Vec<SeriesMeta>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Data(format!("series file line {}: bad {what}", line + 2));
        if rec.len() != 4 {
            return Err(bad("column count"));
        }
        out.push(SeriesMeta {
            hierarchy_id: rec[0].to_string(),
            node_id: rec[1].to_string(),
            level: LevelClass::parse(&rec[2]).ok_or_else(|| bad("level"))?,
            scale: rec[3].parse().map_err(|_| bad("scale"))?,
        });
    }
    Ok(out)
}

/// Scores of one model variant.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantScores {
    pub label: String,
    pub scores: Vec<MaseScore>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub rows: Vec<ResultRow>,
    pub variants: Vec<VariantScores>,
}

pub fn score_set(set: &ForecastSet, meta: &[SeriesMeta]) -> Result<VariantScores> {
    let lookup: HashMap<(&str, &str), &SeriesMeta> = meta
        .iter()
        .map(|m| ((m.hierarchy_id.as_str(), m.node_id.as_str()), m))
        .collect();
    let scores = set
        .series
        .iter()
        .map(|s| {
            let m = lookup
                .get(&(s.hierarchy_id.as_str(), s.node_id.as_str()))
                .ok_or_else(|| Error::Data(format!("no series metadata for {}/{}", s.hierarchy_id, s.node_id)))?;
            Ok(MaseScore {
                hierarchy_id: s.hierarchy_id.clone(),
                node_id: s.node_id.clone(),
                level: m.level,
                value: mase_scaled(m.scale, &s.actuals, &s.forecasts)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VariantScores {
        label: set.label(),
        scores,
    })
}

pub fn evaluate(sets: &[ForecastSet], meta: &[SeriesMeta]) -> Result<EvaluationReport> {
    let mut rows = Vec::with_capacity(sets.len());
    let mut variants = Vec::with_capacity(sets.len());
    for set in sets {
        let v = score_set(set, meta)?;
        let levels = avg_levels(&v.scores)?;
        rows.push(ResultRow {
            label: v.label.clone(),
            level_means: levels.level_means,
            avg_levels: levels.avg_levels,
            avg_products: avg_products(&v.scores)?,
            excluded: levels.excluded,
        });
        variants.push(v);
    }
    Ok(EvaluationReport { rows, variants })
}

/// Observation matrix for MCB: one row per series, one column per variant.
/// Variants must score the same series in the same order.
pub fn mcb_matrix(variants: &[VariantScores]) -> Result<Vec<Vec<Option<f64>>>> {
    let Some(first) = variants.first() else {
        return Ok(Vec::new());
    };
    for v in variants {
        if v.scores.len() != first.scores.len()
            || v.scores.iter().zip(&first.scores).any(|(a, b)| a.hierarchy_id != b.hierarchy_id || a.node_id != b.node_id)
        {
            return Err(Error::Data(format!("variant {} scores a different series set", v.label)));
        }
    }
    Ok((0..first.scores.len())
        .map(|i| variants.iter().map(|v| v.scores[i].value).collect())
        .collect())
}

pub fn mcb_csv(r: &McbResult) -> String {
    let mut out = String::from("model,mean_rank,lo,hi,significant_vs_best\n");
    for (i, m) in r.models.iter().enumerate() {
        let (lo, hi) = r.interval(i);
        let _ = writeln!(
            out,
            "{m},{:.6},{:.6},{:.6},{}",
            r.mean_ranks[i], lo, hi, r.significant_vs_best[i]
        );
    }
    out
}

pub fn boxplot_csv(variants: &[VariantScores]) -> Result<String> {
    let mut out = String::from("model,level,min,q1,median,q3,max\n");
    for v in variants {
        for level in LevelClass::ALL {
            let values: Vec<f64> = v.scores.iter().filter(|s| s.level == level).filter_map(|s| s.value).collect();
            if values.is_empty() {
                continue;
            }
            let d = distribution_stats(&values)?;
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                v.label,
                level.as_str(),
                d.min,
                d.q1,
                d.median,
                d.q3,
                d.max
            );
        }
    }
    Ok(out)
}

/// Static SVG of the MCB intervals: one horizontal bar per model, the best
/// model's band shaded.
pub fn mcb_svg(r: &McbResult) -> String {
    let k = r.models.len();
    let (width, row_h, left, right, top) = (720.0, 26.0, 170.0, 30.0, 40.0);
    let height = top + row_h * k as f64 + 40.0;
    let lo = r.mean_ranks.iter().fold(f64::INFINITY, |a, &b| a.min(b)) - r.half_width;
    let hi = r.mean_ranks.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) + r.half_width;
    let span = (hi - lo).max(1e-9);
    let x = |v: f64| left + (v - lo) / span * (width - left - right);
    let (blo, bhi) = r.interval(r.best);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="20">MCB mean ranks (N = {}, half-width = {:.4})</text>"#,
        r.n_obs, r.half_width
    );
    let _ = writeln!(
        s,
        r##"<rect x="{:.2}" y="{top}" width="{:.2}" height="{:.2}" fill="#dde8f5"/>"##,
        x(blo),
        x(bhi) - x(blo),
        row_h * k as f64
    );
    for (i, m) in r.models.iter().enumerate() {
        let y = top + row_h * (i as f64 + 0.5);
        let (a, b) = r.interval(i);
        let color = if i == r.best {
            "#1f5fa8"
        } else if r.significant_vs_best[i] {
            "#b22222"
        } else {
            "#555555"
        };
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{m}</text>"#, left - 8.0, y + 4.0);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-width="2"/>"#,
            x(a),
            x(b)
        );
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{y:.2}" r="3.5" fill="{color}"/>"#,
            x(r.mean_ranks[i])
        );
    }
    let _ = writeln!(s, "</svg>");
    s
}

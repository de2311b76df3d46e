//! Forecast sets and their CSV persistence.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reconciliation::Reconciliation;

/// Model family that produced a set of base forecasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelFamily {
    #[serde(rename = "es")]
    Es,
    #[serde(rename = "arima")]
    Arima,
    #[serde(rename = "gbdt-local")]
    GbdtLocal,
    #[serde(rename = "gbdt-nfg")]
    GbdtNfg,
    #[serde(rename = "gbdt-fg")]
    GbdtFg,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 5] = [
        ModelFamily::Es,
        ModelFamily::Arima,
        ModelFamily::GbdtLocal,
        ModelFamily::GbdtNfg,
        ModelFamily::GbdtFg,
    ];

    /// Tag used in forecast files.
    pub fn tag(self) -> &'static str {
        match self {
            ModelFamily::Es => "ES",
            ModelFamily::Arima => "ARIMA",
            ModelFamily::GbdtLocal => "loc",
            ModelFamily::GbdtNfg => "nfg",
            ModelFamily::GbdtFg => "fg",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.tag() == tag)
    }

    pub fn config_name(self) -> &'static str {
        match self {
            ModelFamily::Es => "es",
            ModelFamily::Arima => "arima",
            ModelFamily::GbdtLocal => "gbdt-local",
            ModelFamily::GbdtNfg => "gbdt-nfg",
            ModelFamily::GbdtFg => "gbdt-fg",
        }
    }

    pub fn from_config_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.config_name() == name)
    }

    /// Row label in result tables.
    pub fn label(self) -> &'static str {
        match self {
            ModelFamily::Es => "ES",
            ModelFamily::Arima => "ARIMA",
            ModelFamily::GbdtLocal => "loc_GBDT",
            ModelFamily::GbdtNfg => "nfg_GBDT",
            ModelFamily::GbdtFg => "fg_GBDT",
        }
    }

    pub fn is_gbdt(self) -> bool {
        matches!(self, ModelFamily::GbdtLocal | ModelFamily::GbdtNfg | ModelFamily::GbdtFg)
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// `ES`, `ES-BU`, `loc_GBDT-MinT`, ...
pub fn variant_label(model: ModelFamily, rec: Reconciliation) -> String {
    match rec {
        Reconciliation::None => model.label().to_string(),
        r => format!("{}-{}", model.label(), r.tag()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesForecast {
    pub hierarchy_id: String,
    pub node_id: String,
    pub forecasts: Vec<f64>,
    pub actuals: Vec<f64>,
}

/// Test-window forecasts of one model variant for every series. Series of
/// a hierarchy are contiguous and in hierarchy node order.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSet {
    pub model: ModelFamily,
    pub reconciliation: Reconciliation,
    pub series: Vec<SeriesForecast>,
}

impl ForecastSet {
    pub fn label(&self) -> String {
        variant_label(self.model, self.reconciliation)
    }

    pub fn forecast_count(&self) -> usize {
        self.series.iter().map(|s| s.forecasts.len()).sum()
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        for s in &self.series {
            if s.forecasts.len() != horizon || s.actuals.len() != horizon {
                return Err(Error::Data(format!(
                    "{} {}/{}: expected {horizon} forecasts, got {}",
                    self.label(),
                    s.hierarchy_id,
                    s.node_id,
                    s.forecasts.len()
                )));
            }
            if let Some(v) = s.forecasts.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "{} {}/{}: non-finite forecast {v}",
                    self.label(),
                    s.hierarchy_id,
                    s.node_id
                )));
            }
        }
        Ok(())
    }
}

pub const FORECAST_HEADER: [&str; 7] = [
    "hierarchy_id",
    "node_id",
    "step",
    "model",
    "reconciliation",
    "forecast",
    "actual",
];

/// Writes `hierarchy_id,node_id,step,model,reconciliation,forecast,actual`
/// with shortest round-trip float formatting.
pub fn write_forecasts_csv<W: Write>(w: W, sets: &[ForecastSet]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(FORECAST_HEADER)?;
    for set in sets {
        for s in &set.series {
            for (step, (f, a)) in s.forecasts.iter().zip(&s.actuals).enumerate() {
                out.write_record([
                    s.hierarchy_id.as_str(),
                    s.node_id.as_str(),
                    &(step + 1).to_string(),
                    set.model.tag(),
                    set.reconciliation.tag(),
                    &f.to_string(),
                    &a.to_string(),
                ])?;
            }
        }
    }
    out.flush().map_err(|e| Error::io("<forecast csv>", e))?;
    Ok(())
}

/// Reads forecast sets back in first-appearance order.
pub fn read_forecasts_csv<R: Read>(r: R) -> Result<Vec<ForecastSet>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(FORECAST_HEADER.iter().copied()) {
        return Err(Error::Data(format!("forecast file: unexpected header {headers:?}")));
    }
    let mut sets: Vec<ForecastSet> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Data(format!("forecast file line {}: bad {what}", line + 2));
        let model = ModelFamily::from_tag(&rec[3]).ok_or_else(|| bad("model"))?;
        let rec_tag = Reconciliation::from_tag(&rec[4]).ok_or_else(|| bad("reconciliation"))?;
        let step: usize = rec[2].parse().map_err(|_| bad("step"))?;
        let f: f64 = rec[5].parse().map_err(|_| bad("forecast"))?;
        let a: f64 = rec[6].parse().map_err(|_| bad("actual"))?;

        let set_idx = match sets.iter().position(|s| s.model == model && s.reconciliation == rec_tag) {
            Some(i) => i,
            None => {
                sets.push(ForecastSet {
                    model,
                    reconciliation: rec_tag,
                    series: Vec::new(),
                });
                sets.len() - 1
            }
        };
        let set = &mut sets[set_idx];
        let same_series = set
            .series
            .last()
            .is_some_and(|s| s.hierarchy_id == rec[0] && s.node_id == rec[1] && step == s.forecasts.len() + 1);
        if !same_series {
            if step != 1 {
                return Err(bad("step order"));
            }
            set.series.push(SeriesForecast {
                hierarchy_id: rec[0].to_string(),
                node_id: rec[1].to_string(),
                forecasts: Vec::new(),
                actuals: Vec::new(),
            });
        }
        let s = set.series.last_mut().expect("pushed above");
        s.forecasts.push(f);
        s.actuals.push(a);
    }
    Ok(sets)
}

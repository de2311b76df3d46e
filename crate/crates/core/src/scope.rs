//! Training-scope orchestration: builds per-series embeddings, stacks them
//! into local, per-hierarchy or global training matrices, runs the
//! hyperparameter grid and produces one-step base forecasts over the test
//! window.

use std::hash::Hasher;
use std::ops::Range;

use fnv::FnvHasher;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split_holdout, to_hierarchy_series, EmbeddingMatrix, SalesPanel, SeriesFrame, SeriesKey, SplitSpec};
use crate::error::{Error, Result};
use crate::evaluation::{mase_scaled, naive_scale, SeriesMeta};
use crate::forecast::{ForecastSet, ModelFamily, SeriesForecast};
use crate::forecasters::arima::ARIMA_SCHEMA;
use crate::forecasters::ses::SES_SCHEMA;
use crate::forecasters::{arima_fit, arima_forecast, gbdt_train, ses_fit, ses_forecast};
use crate::forecasters::{ArimaModel, ArimaOrder, GbdtModel, GbdtParams, SesParams};
use crate::hierarchy::{Hierarchy, LevelClass, SummingMatrix};
use crate::matrix::RowMatrix;
use crate::reconciliation::Reconciliation;

/// One series with its embedding and train/test split.
#[derive(Debug, Clone)]
pub struct SeriesData {
    pub frame: SeriesFrame,
    pub level: LevelClass,
    pub embedding: EmbeddingMatrix,
    pub split: SplitSpec,
}

impl SeriesData {
    pub fn key(&self) -> &SeriesKey {
        &self.embedding.key
    }

    /// Values observed before the first test target.
    pub fn train_values(&self) -> &[f64] {
        let first_test_day = self.embedding.target_day(self.split.test_rows.start);
        &self.frame.values[..first_test_day - 1]
    }
}

#[derive(Debug, Clone)]
pub struct HierarchyData {
    pub id: String,
    /// In hierarchy node order.
    pub series: Vec<SeriesData>,
}

/// Every series of every hierarchy, embedded and split. All hierarchies
/// share one template tree.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub hierarchy: Hierarchy,
    pub summing: SummingMatrix,
    pub lags: usize,
    pub holdout: usize,
    /// Sorted by hierarchy id.
    pub hierarchies: Vec<HierarchyData>,
}

impl Dataset {
    pub fn build(panel: &SalesPanel, hierarchy: Hierarchy, lags: usize, holdout: usize) -> Result<Self> {
        if lags == 0 {
            return Err(Error::InvalidParam("lags must be >= 1".into()));
        }
        let frames = to_hierarchy_series(panel, &hierarchy)?;
        let series = frames
            .into_par_iter()
            .map(|frame| {
                let embedding = EmbeddingMatrix::from_frame(&frame, lags, 1)?;
                let split = split_holdout(embedding.row_count(), holdout)?;
                Ok(SeriesData {
                    level: hierarchy.level_class(frame.node),
                    frame,
                    embedding,
                    split,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut hierarchies: Vec<HierarchyData> = Vec::new();
        for s in series {
            match hierarchies.last_mut() {
                Some(h) if h.id == s.frame.hierarchy_id => h.series.push(s),
                _ => hierarchies.push(HierarchyData {
                    id: s.frame.hierarchy_id.clone(),
                    series: vec![s],
                }),
            }
        }
        if hierarchies.is_empty() {
            return Err(Error::Data("sales panel holds no hierarchies".into()));
        }
        Ok(Self {
            summing: SummingMatrix::new(&hierarchy),
            hierarchy,
            lags,
            holdout,
            hierarchies,
        })
    }

    pub fn series_count(&self) -> usize {
        self.hierarchies.iter().map(|h| h.series.len()).sum()
    }

    pub fn series(&self, at: SeriesIndex) -> &SeriesData {
        &self.hierarchies[at.0].series[at.1]
    }

    pub fn hierarchy_index(&self, id: &str) -> Option<usize> {
        self.hierarchies.binary_search_by(|h| h.id.as_str().cmp(id)).ok()
    }

    /// Level class and naive training scale of every series, in dataset order.
    pub fn series_meta(&self) -> Result<Vec<SeriesMeta>> {
        self.hierarchies
            .iter()
            .flat_map(|h| &h.series)
            .map(|s| {
                Ok(SeriesMeta {
                    hierarchy_id: s.frame.hierarchy_id.clone(),
                    node_id: s.frame.node_id.clone(),
                    level: s.level,
                    scale: naive_scale(s.train_values())?,
                })
            })
            .collect()
    }
}

/// (hierarchy position, node position) within a [`Dataset`].
pub type SeriesIndex = (usize, usize);

/// How much of the panel a single model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scope {
    /// One model per series.
    Local,
    /// One model per hierarchy, pooling all of its nodes.
    PerHierarchy,
    /// One model over every node of every hierarchy.
    Global,
}

impl Scope {
    pub fn for_family(family: ModelFamily) -> Option<Scope> {
        match family {
            ModelFamily::GbdtLocal => Some(Scope::Local),
            ModelFamily::GbdtNfg => Some(Scope::PerHierarchy),
            ModelFamily::GbdtFg => Some(Scope::Global),
            ModelFamily::Es | ModelFamily::Arima => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Scope::Local => "loc",
            Scope::PerHierarchy => "nfg",
            Scope::Global => "fg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Series { hierarchy_id: String, node_id: String },
    Hierarchy(String),
    All,
}

/// Stacked features and targets with the origin of every row.
#[derive(Debug, Clone)]
pub struct TrainingMatrix {
    pub x: RowMatrix,
    pub y: Vec<f64>,
    /// `(hierarchy_id, node_id, target day)` per row.
    pub provenance: Vec<(String, String, usize)>,
}

impl TrainingMatrix {
    pub fn rows(&self) -> usize {
        self.y.len()
    }
}

/// Which embedding rows of each series to stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RowPart {
    Train,
    /// Training rows minus the trailing validation window.
    Fit,
    Validation,
}

fn row_range(split: &SplitSpec, part: RowPart, window: usize) -> Range<usize> {
    let train = split.train_rows.clone();
    let cut = train.end.saturating_sub(window).max(train.start);
    match part {
        RowPart::Train => train,
        RowPart::Fit => train.start..cut,
        RowPart::Validation => cut..train.end,
    }
}

fn stack(dataset: &Dataset, members: &[SeriesIndex], part: RowPart) -> TrainingMatrix {
    let n_features = dataset.lags + 1;
    let mut x = RowMatrix::with_cols(n_features);
    let mut y = Vec::new();
    let mut provenance = Vec::new();
    for &at in members {
        let s = dataset.series(at);
        for r in row_range(&s.split, part, dataset.holdout) {
            x.push_row(s.embedding.features(r));
            y.push(s.embedding.target(r));
            provenance.push((s.frame.hierarchy_id.clone(), s.frame.node_id.clone(), s.embedding.target_day(r)));
        }
    }
    TrainingMatrix { x, y, provenance }
}

fn members(scope: Scope, dataset: &Dataset, target: &Target) -> Result<Vec<SeriesIndex>> {
    let unknown = |what: String| Error::Data(format!("unknown target: {what}"));
    match (scope, target) {
        (
            Scope::Local,
            Target::Series {
                hierarchy_id,
                node_id,
            },
        ) => {
            let hi = dataset.hierarchy_index(hierarchy_id).ok_or_else(|| unknown(format!("hierarchy {hierarchy_id}")))?;
            let node = dataset
                .hierarchy
                .node_index(node_id)
                .ok_or_else(|| unknown(format!("node {hierarchy_id}/{node_id}")))?;
            Ok(vec![(hi, node)])
        }
        (Scope::PerHierarchy, Target::Hierarchy(id)) => {
            let hi = dataset.hierarchy_index(id).ok_or_else(|| unknown(format!("hierarchy {id}")))?;
            Ok((0..dataset.hierarchies[hi].series.len()).map(|n| (hi, n)).collect())
        }
        (Scope::Global, Target::All) => Ok(dataset
            .hierarchies
            .iter()
            .enumerate()
            .flat_map(|(hi, h)| (0..h.series.len()).map(move |n| (hi, n)))
            .collect()),
        (scope, target) => Err(Error::InvalidParam(format!(
            "target {target:?} does not match scope {scope:?}"
        ))),
    }
}

/// Training rows for one model. Rows are ordered by hierarchy id, then node
/// order, then time.
pub fn assemble_training_matrix(scope: Scope, dataset: &Dataset, target: &Target) -> Result<TrainingMatrix> {
    let m = stack(dataset, &members(scope, dataset, target)?, RowPart::Train);
    if m.rows() == 0 {
        return Err(Error::Data(format!("empty training matrix for {target:?}")));
    }
    Ok(m)
}

/// One model to train: its key and the series it pools.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub scope: Scope,
    pub key: String,
    pub members: Vec<SeriesIndex>,
}

impl Task {
    /// Generator seed for this task, independent of scheduling order.
    pub fn seed(&self, base: u64) -> u64 {
        let mut h = FnvHasher::default();
        h.write(self.key.as_bytes());
        base ^ h.finish()
    }
}

pub fn tasks(scope: Scope, dataset: &Dataset) -> Vec<Task> {
    match scope {
        Scope::Local => dataset
            .hierarchies
            .iter()
            .enumerate()
            .flat_map(|(hi, h)| {
                h.series.iter().enumerate().map(move |(n, s)| Task {
                    scope,
                    key: format!("loc/{}/{}", h.id, s.frame.node_id),
                    members: vec![(hi, n)],
                })
            })
            .collect(),
        Scope::PerHierarchy => dataset
            .hierarchies
            .iter()
            .enumerate()
            .map(|(hi, h)| Task {
                scope,
                key: format!("nfg/{}", h.id),
                members: (0..h.series.len()).map(|n| (hi, n)).collect(),
            })
            .collect(),
        Scope::Global => vec![Task {
            scope,
            key: "fg".into(),
            members: dataset
                .hierarchies
                .iter()
                .enumerate()
                .flat_map(|(hi, h)| (0..h.series.len()).map(move |n| (hi, n)))
                .collect(),
        }],
    }
}

/// Learning-rate by feature-fraction search grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub learning_rates: Vec<f64>,
    pub feature_fractions: Vec<f64>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        Self {
            learning_rates: vec![0.01, 0.03, 0.05, 0.07, 0.09, 0.11],
            feature_fractions: vec![0.3, 0.5, 0.7],
        }
    }
}

impl HyperGrid {
    /// Cross product, learning rate ascending then feature fraction ascending.
    pub fn candidates(&self) -> Vec<(f64, f64)> {
        let mut lrs = self.learning_rates.clone();
        let mut ffs = self.feature_fractions.clone();
        lrs.sort_by(f64::total_cmp);
        ffs.sort_by(f64::total_cmp);
        lrs.iter().flat_map(|&lr| ffs.iter().map(move |&ff| (lr, ff))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub learning_rate: f64,
    pub feature_fraction: f64,
    /// Mean validation MASE over series with a defined score; `None` when
    /// no series had one.
    pub mean_mase: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub best: GbdtParams,
    pub scores: Vec<GridScore>,
}

/// Trains every grid candidate on the task's training rows minus the last
/// `holdout` rows of each series and keeps the candidate with the lowest
/// mean MASE on those held-back rows. Ties go to the earlier candidate.
pub fn grid_search(task: &Task, dataset: &Dataset, grid: &HyperGrid, base: &GbdtParams) -> Result<GridOutcome> {
    let window = dataset.holdout;
    for &at in &task.members {
        let s = dataset.series(at);
        if s.split.train_rows.len() < 2 * window {
            return Err(Error::Data(format!(
                "insufficient rows for grid search on {}/{}: {} training rows, need {}",
                s.frame.hierarchy_id,
                s.frame.node_id,
                s.split.train_rows.len(),
                2 * window
            )));
        }
    }
    let candidates = grid.candidates();
    if candidates.is_empty() {
        return Err(Error::InvalidParam("hyperparameter grid is empty".into()));
    }
    let fit = stack(dataset, &task.members, RowPart::Fit);

    // Per series: validation rows and the naive scale of everything before them.
    let validation: Vec<(Range<usize>, f64)> = task
        .members
        .iter()
        .map(|&at| {
            let s = dataset.series(at);
            let rows = row_range(&s.split, RowPart::Validation, window);
            let first_day = s.embedding.target_day(rows.start);
            Ok((rows, naive_scale(&s.frame.values[..first_day - 1])?))
        })
        .collect::<Result<_>>()?;

    let mut scores = Vec::with_capacity(candidates.len());
    let mut best: Option<(f64, GbdtParams)> = None;
    for (lr, ff) in candidates {
        let params = GbdtParams {
            learning_rate: lr,
            feature_fraction: ff,
            ..base.clone()
        };
        let model = gbdt_train(&fit.x, &fit.y, &params)?;
        let mut defined = Vec::new();
        for (&at, (rows, scale)) in task.members.iter().zip(&validation) {
            let s = dataset.series(at);
            let mut actual = Vec::with_capacity(rows.len());
            let mut pred = Vec::with_capacity(rows.len());
            for r in rows.clone() {
                actual.push(s.embedding.target(r));
                pred.push(model.predict_row(s.embedding.features(r))?);
            }
            if let Some(v) = mase_scaled(*scale, &actual, &pred)? {
                defined.push(v);
            }
        }
        let mean_mase = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        let criterion = mean_mase.unwrap_or(f64::INFINITY);
        if best.as_ref().is_none_or(|(b, _)| criterion < *b) {
            best = Some((criterion, params));
        }
        scores.push(GridScore {
            learning_rate: lr,
            feature_fraction: ff,
            mean_mase,
        });
    }
    let (_, best) = best.expect("grid is non-empty");
    Ok(GridOutcome { best, scores })
}

/// Settings shared by every base-forecast run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForecastOptions {
    pub gbdt: GbdtParams,
    /// Run the hyperparameter grid per training task when set.
    pub grid: Option<HyperGrid>,
    pub seed: u64,
    pub arima_order: ArimaOrder,
}

/// A trained boosted model together with how it was chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedGbdt {
    pub task: String,
    pub members: usize,
    pub training_rows: usize,
    pub grid: Option<Vec<GridScore>>,
    pub model: GbdtModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineParams {
    Ses(SesParams),
    Arima(ArimaModel),
}

/// Parameters of one baseline fit on one test window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineFit {
    pub schema: String,
    pub hierarchy_id: String,
    pub node_id: String,
    pub step: usize,
    pub params: BaselineParams,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FittedModels {
    Gbdt(Vec<TrainedGbdt>),
    Baseline(Vec<BaselineFit>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseForecasts {
    pub set: ForecastSet,
    pub models: FittedModels,
}

fn test_actuals(s: &SeriesData) -> Vec<f64> {
    s.split.test_rows.clone().map(|r| s.embedding.target(r)).collect()
}

fn trained_for(task: &Task, dataset: &Dataset, opts: &ForecastOptions) -> Result<TrainedGbdt> {
    let base = GbdtParams {
        seed: task.seed(opts.seed),
        ..opts.gbdt.clone()
    };
    let (params, grid) = match &opts.grid {
        Some(grid) => {
            let outcome = grid_search(task, dataset, grid, &base)?;
            (outcome.best, Some(outcome.scores))
        }
        None => (base, None),
    };
    let train = stack(dataset, &task.members, RowPart::Train);
    let model = gbdt_train(&train.x, &train.y, &params)?;
    Ok(TrainedGbdt {
        task: task.key.clone(),
        members: task.members.len(),
        training_rows: train.rows(),
        grid,
        model,
    })
}

fn gbdt_forecasts(scope: Scope, dataset: &Dataset, opts: &ForecastOptions) -> Result<(Vec<SeriesForecast>, Vec<TrainedGbdt>)> {
    let tasks = tasks(scope, dataset);
    let trained = tasks
        .par_iter()
        .map(|t| trained_for(t, dataset, opts).map_err(|e| annotate(e, &t.key)))
        .collect::<Result<Vec<_>>>()?;

    let mut by_series: Vec<Option<SeriesForecast>> = vec![None; dataset.series_count()];
    let offsets: Vec<usize> = dataset
        .hierarchies
        .iter()
        .scan(0, |acc, h| {
            let start = *acc;
            *acc += h.series.len();
            Some(start)
        })
        .collect();
    for (task, fitted) in tasks.iter().zip(&trained) {
        for &at in &task.members {
            let s = dataset.series(at);
            let forecasts = s
                .split
                .test_rows
                .clone()
                .map(|r| fitted.model.predict_row(s.embedding.features(r)))
                .collect::<Result<Vec<_>>>()?;
            by_series[offsets[at.0] + at.1] = Some(SeriesForecast {
                hierarchy_id: s.frame.hierarchy_id.clone(),
                node_id: s.frame.node_id.clone(),
                forecasts,
                actuals: test_actuals(s),
            });
        }
    }
    let series = by_series.into_iter().map(|s| s.expect("every series belongs to a task")).collect();
    Ok((series, trained))
}

fn annotate(e: Error, what: &str) -> Error {
    match e {
        Error::Data(m) => Error::Data(format!("{what}: {m}")),
        Error::InvalidParam(m) => Error::InvalidParam(format!("{what}: {m}")),
        Error::Numerical(m) => Error::Numerical(format!("{what}: {m}")),
        other => other,
    }
}

fn baseline_forecasts(family: ModelFamily, dataset: &Dataset, opts: &ForecastOptions) -> Result<(Vec<SeriesForecast>, Vec<BaselineFit>)> {
    let all: Vec<&SeriesData> = dataset.hierarchies.iter().flat_map(|h| &h.series).collect();
    let per_series = all
        .par_iter()
        .map(|s| {
            let mut forecasts = Vec::with_capacity(s.split.holdout_len);
            let mut fits = Vec::with_capacity(s.split.holdout_len);
            for (step, r) in s.split.test_rows.clone().enumerate() {
                let window = s.embedding.features(r);
                let (f, schema, params) = match family {
                    ModelFamily::Es => {
                        let p = ses_fit(window)?;
                        (ses_forecast(window, p.alpha)?, SES_SCHEMA, BaselineParams::Ses(p))
                    }
                    ModelFamily::Arima => {
                        let m = arima_fit(window, opts.arima_order)?;
                        (arima_forecast(&m, window)?, ARIMA_SCHEMA, BaselineParams::Arima(m))
                    }
                    other => unreachable!("{other} is not a baseline"),
                };
                forecasts.push(f);
                fits.push(BaselineFit {
                    schema: schema.to_string(),
                    hierarchy_id: s.frame.hierarchy_id.clone(),
                    node_id: s.frame.node_id.clone(),
                    step: step + 1,
                    params,
                });
            }
            let forecast = SeriesForecast {
                hierarchy_id: s.frame.hierarchy_id.clone(),
                node_id: s.frame.node_id.clone(),
                forecasts,
                actuals: test_actuals(s),
            };
            Ok((forecast, fits))
        })
        .map(|r: Result<_>| r.map_err(|e| annotate(e, family.label())))
        .collect::<Result<Vec<_>>>()?;
    let mut series = Vec::with_capacity(per_series.len());
    let mut fits = Vec::new();
    for (s, f) in per_series {
        series.push(s);
        fits.extend(f);
    }
    Ok((series, fits))
}

/// One-step-ahead base forecasts for every test row of every series. Each
/// forecast uses only the row's observed history as input.
pub fn produce_base_forecasts(family: ModelFamily, dataset: &Dataset, opts: &ForecastOptions) -> Result<BaseForecasts> {
    let (series, models) = match Scope::for_family(family) {
        Some(scope) => {
            let (series, trained) = gbdt_forecasts(scope, dataset, opts)?;
            (series, FittedModels::Gbdt(trained))
        }
        None => {
            let (series, fits) = baseline_forecasts(family, dataset, opts)?;
            (series, FittedModels::Baseline(fits))
        }
    };
    let set = ForecastSet {
        model: family,
        reconciliation: Reconciliation::None,
        series,
    };
    set.validate(dataset.holdout)?;
    Ok(BaseForecasts { set, models })
}

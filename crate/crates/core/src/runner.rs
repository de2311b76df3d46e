//! Config-driven pipeline: load, embed, forecast, reconcile, evaluate, and
//! persist everything under one output directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{SalesPanel, DEFAULT_HOLDOUT, DEFAULT_LAGS};
use crate::error::{Error, Result};
use crate::evaluation::{
    boxplot_csv, evaluate, mcb_csv, mcb_matrix, mcb_svg, mcb_test, read_series_meta, render_results_table,
    write_series_meta,
};
use crate::forecast::{read_forecasts_csv, write_forecasts_csv, ForecastSet, ModelFamily, SeriesForecast};
use crate::forecasters::GbdtParams;
use crate::hierarchy::{read_bottom_order, read_edges_csv, Hierarchy};
use crate::reconciliation::{
    g_bottom_up, g_mint_structural, g_top_down, reconcile_with, td_proportions, MappingMatrix, Reconciliation,
};
use crate::scope::{produce_base_forecasts, Dataset, FittedModels, ForecastOptions, HyperGrid};
use crate::synth::{write_dataset, SynthSpec};

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOG_FILE: &str = "run.log";
pub const MODELS_DIR: &str = "models";
pub const FORECASTS_FILE: &str = "forecasts.csv";
pub const SERIES_FILE: &str = "series.csv";
pub const RESULTS_FILE: &str = "results_table.csv";
pub const MCB_FILE: &str = "mcb.csv";
pub const MCB_SVG_FILE: &str = "mcb.svg";
pub const BOXPLOT_FILE: &str = "boxplot.csv";
pub const THREADS_ENV: &str = "HTSF_THREADS";

const MANIFEST_SCHEMA: &str = "htsf.run.v1";
const MCB_ALPHA: f64 = 0.05;

/// Optional GBDT settings; unset fields keep the library defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GbdtOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_rounds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_leaves: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_leaf_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_bins: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tweedie_power: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l2_lambda: Option<f64>,
}

impl GbdtOverrides {
    pub fn apply(&self, mut p: GbdtParams) -> GbdtParams {
        p.learning_rate = self.learning_rate.unwrap_or(p.learning_rate);
        p.feature_fraction = self.feature_fraction.unwrap_or(p.feature_fraction);
        p.num_rounds = self.num_rounds.unwrap_or(p.num_rounds);
        p.max_leaves = self.max_leaves.unwrap_or(p.max_leaves);
        p.min_leaf_samples = self.min_leaf_samples.unwrap_or(p.min_leaf_samples);
        p.max_bins = self.max_bins.unwrap_or(p.max_bins);
        p.tweedie_power = self.tweedie_power.unwrap_or(p.tweedie_power);
        p.l2_lambda = self.l2_lambda.unwrap_or(p.l2_lambda);
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub sales: PathBuf,
    pub edges: PathBuf,
    pub bottom_order: PathBuf,
    pub lags: usize,
    pub holdout: usize,
    pub models: Vec<ModelFamily>,
    /// Reconciliations applied on top of the unreconciled base forecasts,
    /// which are always reported.
    pub reconciliations: Vec<Reconciliation>,
    pub grid_search: bool,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub workers: Option<usize>,
    /// Clip negative bottom-level values before aggregating reconciled
    /// forecasts.
    pub floor_at_zero: bool,
    #[serde(default)]
    pub gbdt: GbdtOverrides,
}

impl RunConfig {
    /// A config for the given data files with default settings.
    pub fn new(sales: impl Into<PathBuf>, edges: impl Into<PathBuf>, bottom_order: impl Into<PathBuf>) -> Self {
        Self {
            sales: sales.into(),
            edges: edges.into(),
            bottom_order: bottom_order.into(),
            lags: DEFAULT_LAGS,
            holdout: DEFAULT_HOLDOUT,
            models: ModelFamily::ALL.to_vec(),
            reconciliations: Reconciliation::ALL.to_vec(),
            grid_search: false,
            seed: 0,
            output_dir: PathBuf::from("htsf-out"),
            workers: None,
            floor_at_zero: false,
            gbdt: GbdtOverrides::default(),
        }
    }

    /// Parses a JSON config, resolving relative paths against `base_dir`.
    /// Every field problem is reported, not just the first.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(vec![format!("line {}, column {}: {e}", e.line(), e.column())]))?;
        let Some(obj) = value.as_object() else {
            return Err(Error::Config(vec!["top level must be a JSON object".into()]));
        };
        let mut p = FieldParser {
            obj,
            text,
            errors: Vec::new(),
        };
        const KNOWN: [&str; 13] = [
            "sales",
            "edges",
            "bottom_order",
            "lags",
            "holdout",
            "models",
            "reconciliations",
            "grid_search",
            "seed",
            "output_dir",
            "workers",
            "floor_at_zero",
            "gbdt",
        ];
        for key in obj.keys().filter(|k| !KNOWN.contains(&k.as_str())) {
            let msg = p.at(key, "unknown field");
            p.errors.push(msg);
        }

        let resolve = |path: PathBuf| if path.is_absolute() { path } else { base_dir.join(path) };
        let sales = p.path("sales", true).map(resolve);
        let edges = p.path("edges", true).map(resolve);
        let bottom_order = p.path("bottom_order", true).map(resolve);
        let output_dir = p.path("output_dir", false).map(resolve);
        let lags = p.count("lags", 1).unwrap_or(DEFAULT_LAGS);
        let holdout = p.count("holdout", 1).unwrap_or(DEFAULT_HOLDOUT);
        let workers = p.count("workers", 1);
        let seed = p.uint("seed").unwrap_or(0);
        let grid_search = p.flag("grid_search").unwrap_or(false);
        let floor_at_zero = p.flag("floor_at_zero").unwrap_or(false);
        let models = p.names("models", true, ModelFamily::from_config_name).unwrap_or_default();
        let reconciliations = p
            .names("reconciliations", false, Reconciliation::from_config_name)
            .unwrap_or_default();
        let gbdt = match obj.get("gbdt") {
            None | Some(Value::Null) => GbdtOverrides::default(),
            Some(v) => match serde_json::from_value::<GbdtOverrides>(v.clone()) {
                Ok(g) => {
                    if let Err(e) = g.apply(GbdtParams::default()).validate() {
                        let msg = p.at("gbdt", &e.to_string());
                        p.errors.push(msg);
                    }
                    g
                }
                Err(e) => {
                    let msg = p.at("gbdt", &e.to_string());
                    p.errors.push(msg);
                    GbdtOverrides::default()
                }
            },
        };

        if !p.errors.is_empty() {
            return Err(Error::Config(p.errors));
        }
        Ok(Self {
            sales: sales.expect("required"),
            edges: edges.expect("required"),
            bottom_order: bottom_order.expect("required"),
            lags,
            holdout,
            models,
            reconciliations,
            grid_search,
            seed,
            output_dir: output_dir.unwrap_or_else(|| base_dir.join("htsf-out")),
            workers,
            floor_at_zero,
            gbdt,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Variants in output order: each model family unreconciled, then with
    /// every requested reconciliation.
    pub fn variants(&self) -> Vec<(ModelFamily, Reconciliation)> {
        let recs: Vec<Reconciliation> = Reconciliation::ALL
            .into_iter()
            .filter(|r| *r == Reconciliation::None || self.reconciliations.contains(r))
            .collect();
        self.models
            .iter()
            .flat_map(|&m| recs.iter().map(move |&r| (m, r)))
            .collect()
    }

    pub fn forecast_options(&self) -> ForecastOptions {
        ForecastOptions {
            gbdt: self.gbdt.apply(GbdtParams::default()),
            grid: self.grid_search.then(HyperGrid::default),
            seed: self.seed,
            ..ForecastOptions::default()
        }
    }
}

struct FieldParser<'a> {
    obj: &'a Map<String, Value>,
    text: &'a str,
    errors: Vec<String>,
}

impl FieldParser<'_> {
    /// `line N, field 'key': msg`, pointing at the first mention of the key.
    fn at(&self, key: &str, msg: &str) -> String {
        let needle = format!("\"{key}\"");
        match self.text.lines().position(|l| l.contains(&needle)) {
            Some(i) => format!("line {}, field '{key}': {msg}", i + 1),
            None => format!("field '{key}': {msg}"),
        }
    }

    fn fail<T>(&mut self, key: &str, msg: &str) -> Option<T> {
        let m = self.at(key, msg);
        self.errors.push(m);
        None
    }

    fn get(&self, key: &str) -> Option<&Value> {
        self.obj.get(key).filter(|v| !v.is_null())
    }

    fn path(&mut self, key: &str, required: bool) -> Option<PathBuf> {
        match self.get(key) {
            None if required => self.fail(key, "required path is missing"),
            None => None,
            Some(Value::String(s)) if !s.is_empty() => Some(PathBuf::from(s)),
            Some(_) => self.fail(key, "expected a non-empty path string"),
        }
    }

    fn uint(&mut self, key: &str) -> Option<u64> {
        match self.get(key) {
            None => None,
            Some(v) => match v.as_u64() {
                Some(n) => Some(n),
                None => self.fail(key, &format!("expected a non-negative integer, got {v}")),
            },
        }
    }

    fn count(&mut self, key: &str, min: usize) -> Option<usize> {
        let n = self.uint(key)?;
        if (n as usize) < min {
            return self.fail(key, &format!("must be >= {min}, got {n}"));
        }
        Some(n as usize)
    }

    fn flag(&mut self, key: &str) -> Option<bool> {
        match self.get(key) {
            None => None,
            Some(Value::Bool(b)) => Some(*b),
            Some(v) => self.fail(key, &format!("expected true or false, got {v}")),
        }
    }

    fn names<T: PartialEq>(&mut self, key: &str, required: bool, lookup: fn(&str) -> Option<T>) -> Option<Vec<T>> {
        let items = match self.get(key) {
            None if required => return self.fail(key, "required list is missing"),
            None => return None,
            Some(Value::Array(items)) => items.clone(),
            Some(_) => return self.fail(key, "expected a list of names"),
        };
        let mut out = Vec::new();
        for item in &items {
            match item.as_str().and_then(lookup) {
                Some(v) if !out.contains(&v) => out.push(v),
                Some(_) => {}
                None => {
                    self.fail::<()>(key, &format!("unknown name {item}"));
                }
            }
        }
        if required && items.is_empty() {
            return self.fail(key, "must not be empty");
        }
        Some(out)
    }
}

/// Command-line settings that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub models: Option<Vec<ModelFamily>>,
    pub reconciliations: Option<Vec<Reconciliation>>,
    pub grid_search: Option<bool>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(m) = &self.models {
            cfg.models = m.clone();
        }
        if let Some(r) = &self.reconciliations {
            cfg.reconciliations = r.clone();
        }
        if let Some(g) = self.grid_search {
            cfg.grid_search = g;
        }
    }
}

/// Worker threads: flag, then `HTSF_THREADS`, then config, then the
/// machine's available parallelism.
pub fn worker_count(cfg: &RunConfig, flag: Option<usize>) -> Result<usize> {
    let env = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Some(n),
            _ => return Err(Error::Config(vec![format!("{THREADS_ENV}='{v}' must be a positive integer")])),
        },
        Err(_) => None,
    };
    let n = flag
        .or(env)
        .or(cfg.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if n == 0 {
        return Err(Error::Config(vec!["workers must be >= 1".into()]));
    }
    Ok(n)
}

fn load_inputs(cfg: &RunConfig) -> Result<(Hierarchy, SalesPanel)> {
    let edges = read_edges_csv(&cfg.edges)?;
    let order = read_bottom_order(&cfg.bottom_order)?;
    let hierarchy = Hierarchy::build(&edges, &order)?;
    let panel = SalesPanel::load_csv(&cfg.sales)?;
    Ok((hierarchy, panel))
}

/// Summary printed by `validate`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub hierarchies: usize,
    pub nodes: usize,
    pub series_length: usize,
    pub embedding_rows: usize,
}

/// Checks the config fields, that every input file exists, and that the
/// data fit the hierarchy and are long enough for the embedding.
pub fn cmd_validate(config_path: &Path) -> Result<ValidationReport> {
    let cfg = RunConfig::load(config_path)?;
    let missing: Vec<String> = [("sales", &cfg.sales), ("edges", &cfg.edges), ("bottom_order", &cfg.bottom_order)]
        .iter()
        .filter(|(_, p)| !p.is_file())
        .map(|(k, p)| format!("field '{k}': file not found: {}", p.display()))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(missing));
    }
    let as_config = |e: Error| Error::Config(vec![e.to_string()]);
    let (hierarchy, panel) = load_inputs(&cfg).map_err(as_config)?;
    let nodes = hierarchy.n_total();
    let ds = Dataset::build(&panel, hierarchy, cfg.lags, cfg.holdout).map_err(as_config)?;
    let first = &ds.hierarchies[0].series[0];
    Ok(ValidationReport {
        hierarchies: ds.hierarchies.len(),
        nodes,
        series_length: first.frame.values.len(),
        embedding_rows: first.embedding.row_count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Incomplete,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub status: RunStatus,
    pub stages: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Manifest {
    fn write(&self, dir: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        write_file(&dir.join(MANIFEST_FILE), s.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Line-delimited JSON stage log.
struct StageLog {
    out: BufWriter<File>,
    path: PathBuf,
}

#[derive(Serialize)]
struct StageRecord<'a> {
    stage: &'a str,
    wall_ms: u128,
    rows: usize,
}

impl StageLog {
    fn create(path: PathBuf) -> Result<Self> {
        Ok(Self { out: create(&path)?, path })
    }

    fn record(&mut self, stage: &str, started: Instant, rows: usize) -> Result<()> {
        let rec = StageRecord {
            stage,
            wall_ms: started.elapsed().as_millis(),
            rows,
        };
        let line = serde_json::to_string(&rec)?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Reconciles every step of every hierarchy in `base`.
pub fn reconcile_set(ds: &Dataset, base: &ForecastSet, method: Reconciliation, floor_at_zero: bool) -> Result<ForecastSet> {
    if method == Reconciliation::None {
        return Ok(base.clone());
    }
    let n = ds.hierarchy.n_total();
    if base.series.len() != ds.series_count() {
        return Err(Error::Dimension {
            what: "series in forecast set",
            expected: ds.series_count(),
            got: base.series.len(),
        });
    }
    let shared = match method {
        Reconciliation::BottomUp => Some(g_bottom_up(&ds.hierarchy)),
        Reconciliation::MinT => Some(g_mint_structural(&ds.summing)?),
        _ => None,
    };
    let bottom_nodes: Vec<usize> = ds
        .hierarchy
        .bottom_order()
        .iter()
        .map(|b| ds.hierarchy.node_index(b).expect("bottom is a node"))
        .collect();

    let mut series = Vec::with_capacity(base.series.len());
    for (hi, h) in ds.hierarchies.iter().enumerate() {
        let block = &base.series[hi * n..(hi + 1) * n];
        if block.iter().zip(&h.series).any(|(f, s)| f.hierarchy_id != h.id || f.node_id != s.frame.node_id) {
            return Err(Error::Data(format!("forecast set is not in dataset order at hierarchy {}", h.id)));
        }
        let td;
        let g: &MappingMatrix = match &shared {
            Some(g) => g,
            None => {
                let top = h.series[ds.hierarchy.root()].train_values();
                let bottoms: Vec<&[f64]> = bottom_nodes.iter().map(|&b| h.series[b].train_values()).collect();
                td = g_top_down(&ds.hierarchy, &td_proportions(top, &bottoms)?)?;
                &td
            }
        };
        let steps = block[0].forecasts.len();
        let mut out: Vec<SeriesForecast> = block
            .iter()
            .map(|f| SeriesForecast {
                forecasts: Vec::with_capacity(steps),
                ..f.clone()
            })
            .collect();
        let mut y = vec![0.0; n];
        for k in 0..steps {
            for (slot, f) in y.iter_mut().zip(block) {
                *slot = f.forecasts[k];
            }
            for (o, v) in out.iter_mut().zip(reconcile_with(g, &ds.summing, &y, floor_at_zero)?) {
                o.forecasts.push(v);
            }
        }
        series.extend(out);
    }
    Ok(ForecastSet {
        model: base.model,
        reconciliation: method,
        series,
    })
}

fn file_stem(task: &str) -> String {
    task.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

fn persist_models(dir: &Path, family: ModelFamily, models: &FittedModels) -> Result<usize> {
    let models_dir = dir.join(MODELS_DIR);
    fs::create_dir_all(&models_dir).map_err(|e| Error::io(&models_dir, e))?;
    match models {
        FittedModels::Gbdt(trained) => {
            let sub = models_dir.join(family.config_name());
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for t in trained {
                let mut s = serde_json::to_string_pretty(t)?;
                s.push('\n');
                write_file(&sub.join(format!("{}.json", file_stem(&t.task))), s.as_bytes())?;
            }
            Ok(trained.len())
        }
        FittedModels::Baseline(fits) => {
            let path = models_dir.join(format!("{}.jsonl", family.config_name()));
            let mut w = create(&path)?;
            for f in fits {
                writeln!(w, "{}", serde_json::to_string(f)?).map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            Ok(fits.len())
        }
    }
}

/// Removes outputs of an earlier run in `dir`, leaving anything else alone.
fn clear_previous(dir: &Path) -> Result<()> {
    for name in [
        MANIFEST_FILE,
        CONFIG_FILE,
        LOG_FILE,
        FORECASTS_FILE,
        SERIES_FILE,
        RESULTS_FILE,
        MCB_FILE,
        MCB_SVG_FILE,
        BOXPLOT_FILE,
    ] {
        let p = dir.join(name);
        if p.is_file() {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    let models = dir.join(MODELS_DIR);
    if models.is_dir() {
        fs::remove_dir_all(&models).map_err(|e| Error::io(&models, e))?;
    }
    Ok(())
}

/// Result of a completed run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub results_table: String,
}

pub fn cmd_run(config_path: &Path, overrides: &Overrides) -> Result<RunOutcome> {
    let mut cfg = RunConfig::load(config_path)?;
    overrides.apply(&mut cfg);
    run_config(&cfg, overrides.workers)
}

/// Runs the whole pipeline for an already-loaded config.
pub fn run_config(cfg: &RunConfig, workers_flag: Option<usize>) -> Result<RunOutcome> {
    if cfg.models.is_empty() {
        return Err(Error::Config(vec!["field 'models': must not be empty".into()]));
    }
    let workers = worker_count(cfg, workers_flag)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidParam(format!("cannot start {workers} workers: {e}")))?;

    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    clear_previous(&dir)?;
    write_file(&dir.join(CONFIG_FILE), cfg.to_json()?.as_bytes())?;
    let mut manifest = Manifest {
        schema: MANIFEST_SCHEMA.into(),
        status: RunStatus::Incomplete,
        stages: Vec::new(),
        error: None,
    };
    manifest.write(&dir)?;

    let result = pool.install(|| execute(cfg, &dir, &mut manifest));
    match result {
        Ok(table) => {
            manifest.status = RunStatus::Complete;
            manifest.write(&dir)?;
            Ok(RunOutcome {
                output_dir: dir,
                results_table: table,
            })
        }
        Err(e) => {
            manifest.error = Some(e.to_string());
            manifest.write(&dir)?;
            Err(e)
        }
    }
}

fn execute(cfg: &RunConfig, dir: &Path, manifest: &mut Manifest) -> Result<String> {
    let mut log = StageLog::create(dir.join(LOG_FILE))?;
    let done = |manifest: &mut Manifest, stage: &str| -> Result<()> {
        manifest.stages.push(stage.to_string());
        manifest.write(dir)
    };

    let t = Instant::now();
    let ds = (|| {
        let (hierarchy, panel) = load_inputs(cfg)?;
        Dataset::build(&panel, hierarchy, cfg.lags, cfg.holdout)
    })()
    .map_err(|e| e.in_stage("load"))?;
    let rows = ds.hierarchies.iter().flat_map(|h| &h.series).map(|s| s.embedding.row_count()).sum();
    log.record("load", t, rows)?;
    done(manifest, "load")?;

    let opts = cfg.forecast_options();
    let mut base_sets = Vec::with_capacity(cfg.models.len());
    for &family in &cfg.models {
        let stage = format!("forecast:{}", family.config_name());
        let t = Instant::now();
        let base = produce_base_forecasts(family, &ds, &opts).map_err(|e| e.in_stage("forecast"))?;
        persist_models(dir, family, &base.models)?;
        log.record(&stage, t, base.set.forecast_count())?;
        done(manifest, &stage)?;
        base_sets.push(base.set);
    }

    let t = Instant::now();
    let mut sets = Vec::new();
    for base in &base_sets {
        for (family, rec) in cfg.variants() {
            if family == base.model {
                sets.push(reconcile_set(&ds, base, rec, cfg.floor_at_zero).map_err(|e| e.in_stage("reconcile"))?);
            }
        }
    }
    let mut w = create(&dir.join(FORECASTS_FILE))?;
    write_forecasts_csv(&mut w, &sets)?;
    w.flush().map_err(|e| Error::io(dir.join(FORECASTS_FILE), e))?;
    let meta = ds.series_meta().map_err(|e| e.in_stage("reconcile"))?;
    let mut w = create(&dir.join(SERIES_FILE))?;
    write_series_meta(&mut w, &meta)?;
    w.flush().map_err(|e| Error::io(dir.join(SERIES_FILE), e))?;
    log.record("reconcile", t, sets.iter().map(ForecastSet::forecast_count).sum())?;
    done(manifest, "reconcile")?;

    let t = Instant::now();
    let table = write_report(dir).map_err(|e| e.in_stage("evaluate"))?;
    log.record("evaluate", t, sets.len())?;
    done(manifest, "evaluate")?;
    Ok(table)
}

/// Recomputes every evaluation output of an artifact from its persisted
/// forecasts and series metadata. Returns the results table.
pub fn write_report(dir: &Path) -> Result<String> {
    let forecasts = dir.join(FORECASTS_FILE);
    let series = dir.join(SERIES_FILE);
    for p in [&forecasts, &series] {
        if !p.is_file() {
            return Err(Error::IncompleteArtifact(format!("{} is missing", p.display())));
        }
    }
    let sets = read_forecasts_csv(File::open(&forecasts).map_err(|e| Error::io(&forecasts, e))?)?;
    let meta = read_series_meta(File::open(&series).map_err(|e| Error::io(&series, e))?)?;
    if sets.is_empty() {
        return Err(Error::IncompleteArtifact(format!("{} holds no forecasts", forecasts.display())));
    }
    let report = evaluate(&sets, &meta)?;
    let table = render_results_table(&report.rows);
    write_file(&dir.join(RESULTS_FILE), table.as_bytes())?;
    write_file(&dir.join(BOXPLOT_FILE), boxplot_csv(&report.variants)?.as_bytes())?;

    let svg_path = dir.join(MCB_SVG_FILE);
    if report.variants.len() >= 2 {
        let labels: Vec<String> = report.variants.iter().map(|v| v.label.clone()).collect();
        let mcb = mcb_test(&labels, &mcb_matrix(&report.variants)?, MCB_ALPHA)?;
        write_file(&dir.join(MCB_FILE), mcb_csv(&mcb).as_bytes())?;
        write_file(&svg_path, mcb_svg(&mcb).as_bytes())?;
    } else {
        write_file(&dir.join(MCB_FILE), b"model,mean_rank,lo,hi,significant_vs_best\n")?;
        if svg_path.is_file() {
            fs::remove_file(&svg_path).map_err(|e| Error::io(&svg_path, e))?;
        }
    }
    Ok(table)
}

/// Regenerates the evaluation files of a completed run.
pub fn cmd_report(dir: &Path) -> Result<String> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(Error::IncompleteArtifact(format!("{} has no {MANIFEST_FILE}", dir.display())));
    }
    let manifest = Manifest::read(dir)?;
    if manifest.status != RunStatus::Complete {
        return Err(Error::IncompleteArtifact(format!(
            "run in {} did not finish (stages done: {})",
            dir.display(),
            manifest.stages.join(", ")
        )));
    }
    write_report(dir)
}

/// Writes a synthetic dataset plus a ready-to-run `config.json` into `dir`.
pub fn cmd_synth(spec: &SynthSpec, dir: &Path) -> Result<PathBuf> {
    write_dataset(spec, dir)?;
    let mut cfg = RunConfig::new("sales.csv", "edges.csv", "bottom_order.txt");
    cfg.seed = spec.seed;
    cfg.output_dir = PathBuf::from("run");
    let path = dir.join(CONFIG_FILE);
    write_file(&path, cfg.to_json()?.as_bytes())?;
    Ok(path)
}

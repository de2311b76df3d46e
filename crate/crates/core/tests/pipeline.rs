use std::fs;

use htsf_core::forecast::{read_forecasts_csv, ModelFamily};
use htsf_core::hierarchy::SummingMatrix;
use htsf_core::reconciliation::Reconciliation;
use htsf_core::runner::{cmd_report, cmd_synth, cmd_validate, run_config, RunConfig, FORECASTS_FILE};
use htsf_core::synth::SynthSpec;
use htsf_core::Error;

fn small_run(dir: &std::path::Path, models: Vec<ModelFamily>, recs: Vec<Reconciliation>) -> RunConfig {
    let spec = SynthSpec {
        hierarchies: 5,
        length: 140,
        seed: 3,
        ..SynthSpec::default()
    };
    let config = cmd_synth(&spec, &dir.join("data")).unwrap();
    let mut cfg = RunConfig::load(&config).unwrap();
    cfg.models = models;
    cfg.reconciliations = recs;
    cfg.output_dir = dir.join("out");
    cfg.gbdt.num_rounds = Some(20);
    cfg
}

#[test]
fn two_families_one_reconciliation_give_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), vec![ModelFamily::Es, ModelFamily::GbdtNfg], vec![Reconciliation::BottomUp]);
    let out = run_config(&cfg, Some(1)).unwrap();
    let labels: Vec<&str> = out.results_table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["ES", "ES-BU", "nfg_GBDT", "nfg_GBDT-BU"]);
    assert_eq!(fs::read_dir(cfg.output_dir.join("models/gbdt-nfg")).unwrap().count(), 5);
    let mcb = fs::read_to_string(cfg.output_dir.join("mcb.csv")).unwrap();
    assert_eq!(mcb.lines().count(), 5);
}

#[test]
fn global_scope_persists_one_model_and_reconciled_sets_are_coherent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), vec![ModelFamily::GbdtFg], vec![Reconciliation::TopDown, Reconciliation::MinT]);
    run_config(&cfg, Some(2)).unwrap();
    let models: Vec<_> = fs::read_dir(cfg.output_dir.join("models/gbdt-fg")).unwrap().collect();
    assert_eq!(models.len(), 1);

    let h = SynthSpec::default().hierarchy().unwrap();
    let s = SummingMatrix::new(&h);
    let sets = read_forecasts_csv(fs::File::open(cfg.output_dir.join(FORECASTS_FILE)).unwrap()).unwrap();
    assert_eq!(sets.len(), 3);
    for set in sets.iter().filter(|s| s.reconciliation != Reconciliation::None) {
        for block in set.series.chunks(h.n_total()) {
            for k in 0..28 {
                let y: Vec<f64> = block.iter().map(|f| f.forecasts[k]).collect();
                assert!(s.coherence_check(&y, 1e-9).unwrap().coherent, "{}", set.label());
            }
        }
    }
}

#[test]
fn report_regenerates_identical_outputs_without_touching_forecasts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), vec![ModelFamily::Es, ModelFamily::GbdtFg], vec![Reconciliation::MinT]);
    run_config(&cfg, None).unwrap();
    let out = &cfg.output_dir;
    let files = ["results_table.csv", "mcb.csv", "boxplot.csv", "mcb.svg"];
    let before: Vec<Vec<u8>> = files.iter().map(|f| fs::read(out.join(f)).unwrap()).collect();
    let forecasts = fs::read(out.join(FORECASTS_FILE)).unwrap();
    for f in files {
        fs::remove_file(out.join(f)).unwrap();
    }
    cmd_report(out).unwrap();
    for (f, b) in files.iter().zip(&before) {
        assert_eq!(&fs::read(out.join(f)).unwrap(), b, "{f}");
    }
    assert_eq!(fs::read(out.join(FORECASTS_FILE)).unwrap(), forecasts);

    fs::remove_file(out.join(FORECASTS_FILE)).unwrap();
    let err = cmd_report(out).unwrap_err();
    assert!(matches!(err, Error::IncompleteArtifact(_)));
    assert!(err.to_string().contains("incomplete artifact"));
}

#[test]
fn failed_stage_is_tagged_and_artifact_left_incomplete() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run(dir.path(), vec![ModelFamily::GbdtLocal], vec![]);
    // 140 values leave too few rows per series for min_leaf_samples = 60
    cfg.gbdt.min_leaf_samples = Some(60);
    let err = run_config(&cfg, Some(1)).unwrap_err();
    assert!(err.to_string().starts_with("[forecast]"), "{err}");
    assert!(err.is_user_error());
    let manifest = fs::read_to_string(cfg.output_dir.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"incomplete\""));
    assert!(cmd_report(&cfg.output_dir).is_err());
}

#[test]
fn validate_reports_shape_and_short_series() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), vec![ModelFamily::Es], vec![]);
    let config = dir.path().join("data/config.json");
    let report = cmd_validate(&config).unwrap();
    assert_eq!((report.hierarchies, report.nodes, report.series_length), (5, 7, 140));
    assert_eq!(report.embedding_rows, 140 - 62 + 1);

    let mut short = cfg.clone();
    short.lags = 200;
    fs::write(&config, short.to_json().unwrap()).unwrap();
    let err = cmd_validate(&config).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("too short"), "{err}");
}

//! Acceptance checks. Each criterion prints one PASS/FAIL line; the test
//! fails if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use htsf_core::data::{split_holdout, EmbeddingMatrix, SeriesKey};
use htsf_core::evaluation::{avg_levels, avg_products, evaluate, format_4dp, mase, mcb_test, MaseScore};
use htsf_core::forecast::ModelFamily;
use htsf_core::forecasters::gbdt::{gbdt_train, GbdtParams};
use htsf_core::forecasters::tweedie::{tweedie_grad_hess, tweedie_loss};
use htsf_core::hierarchy::{Hierarchy, LevelClass, SummingMatrix};
use htsf_core::matrix::RowMatrix;
use htsf_core::reconciliation::{
    g_bottom_up, g_gls_diagonal, g_mint_structural, g_top_down, reconcile, td_proportions, TdProportions,
};
use htsf_core::scope::{produce_base_forecasts, Dataset, ForecastOptions};
use htsf_core::synth::{generate, SynthSpec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Random tree on 2..=max_nodes nodes: node i attaches to a uniformly drawn
/// earlier node. Returns the hierarchy and the parent of every node id.
fn random_tree(rng: &mut ChaCha8Rng, max_nodes: usize) -> (Hierarchy, BTreeMap<String, String>) {
    let n = rng.gen_range(2..=max_nodes);
    let mut parent = BTreeMap::new();
    let mut has_child = vec![false; n];
    let mut edges = Vec::new();
    for i in 1..n {
        let p = rng.gen_range(0..i);
        has_child[p] = true;
        edges.push((format!("n{p}"), format!("n{i}")));
        parent.insert(format!("n{i}"), format!("n{p}"));
    }
    let mut bottoms: Vec<String> = (0..n).filter(|&i| !has_child[i]).map(|i| format!("n{i}")).collect();
    // exercise bottom orders that differ from creation order
    if rng.gen_bool(0.5) {
        bottoms.reverse();
    }
    (Hierarchy::build(&edges, &bottoms).unwrap(), parent)
}

/// Summing matrix rebuilt from the parent map: entry (i, j) is 1 when
/// bottom j has node i on its path to the root.
fn oracle_s(h: &Hierarchy, parent: &BTreeMap<String, String>) -> DMatrix<f64> {
    let rows = h.nodes();
    let cols = h.bottom_order();
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
        let mut cur = Some(cols[j].clone());
        while let Some(c) = cur {
            if c == rows[i] {
                return 1.0;
            }
            cur = parent.get(&c).cloned();
        }
        0.0
    })
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (h, _) = random_tree(&mut rng, 20);
        let s = SummingMatrix::new(&h);
        let (n, m) = (h.n_total(), h.m_bottom());
        let base: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..100.0)).collect();
        let history: Vec<Vec<f64>> = (0..m).map(|_| (0..30).map(|_| rng.gen_range(0.0..10.0)).collect()).collect();
        let top: Vec<f64> = (0..30).map(|t| history.iter().map(|b| b[t]).sum()).collect();
        let refs: Vec<&[f64]> = history.iter().map(Vec::as_slice).collect();
        let maps = [
            g_bottom_up(&h),
            g_top_down(&h, &td_proportions(&top, &refs).unwrap()).unwrap(),
            g_mint_structural(&s).unwrap(),
        ];
        for g in &maps {
            let y = reconcile(g, &s, &base).unwrap();
            let c = s.coherence_check(&y, 1e-9).unwrap();
            ensure(c.coherent, format!("{:?} incoherent, violation {}", g.method, c.max_violation))?;
            worst = worst.max(c.max_violation);
        }
        let bu = reconcile(&maps[0], &s, &base).unwrap();
        ensure(bu[n - m..] == base[n - m..], "BU changed a bottom forecast")?;
        let td = reconcile(&maps[1], &s, &base).unwrap();
        let root = h.root();
        ensure(
            (td[root] - base[root]).abs() <= 1e-12 * base[root].abs().max(1.0),
            format!("TD moved the top: {} -> {}", base[root], td[root]),
        )?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), format!("took {elapsed:?}"))?;
    Ok(format!("1000 trees x 3 methods coherent (max violation {worst:.1e}) in {elapsed:.2?}"))
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut g_err, mut idem_err, mut k_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let (h, parent) = random_tree(&mut rng, 20);
        let s = SummingMatrix::new(&h);
        let so = oracle_s(&h, &parent);
        ensure(&so == s.matrix(), "summing matrix differs from the path oracle")?;
        let lambda = DVector::from_iterator(so.nrows(), so.row_iter().map(|r| r.sum()));
        let winv = DMatrix::from_diagonal(&lambda.map(|l| 1.0 / l));
        let oracle = (so.transpose() * &winv * &so).try_inverse().unwrap() * so.transpose() * &winv;
        let g = g_mint_structural(&s).unwrap().g;
        g_err = g_err.max(max_abs(&(&g - &oracle)) / max_abs(&oracle).max(1.0));

        let p = &so * &g;
        idem_err = idem_err.max(max_abs(&(&p * &p - &p)));

        let k = rng.gen_range(0.1..50.0);
        let scaled: Vec<f64> = lambda.iter().map(|l| k * l).collect();
        let gk = g_gls_diagonal(&s, &scaled).unwrap();
        k_err = k_err.max(max_abs(&(&gk - &g)) / max_abs(&g).max(1.0));
    }
    let elapsed = start.elapsed();
    ensure(g_err <= 1e-8, format!("G vs explicit inverse: {g_err:e}"))?;
    ensure(idem_err <= 1e-9, format!("SG not idempotent: {idem_err:e}"))?;
    ensure(k_err <= 1e-12, format!("k-scaling changed G: {k_err:e}"))?;
    ensure(elapsed < Duration::from_secs(10), format!("took {elapsed:?}"))?;
    Ok(format!(
        "100 trees: G err {g_err:.1e}, idempotence {idem_err:.1e}, k-scaling {k_err:.1e} in {elapsed:.2?}"
    ))
}

fn criterion_3() -> Check {
    let h = Hierarchy::build(&[("root", "a"), ("root", "b")], &["a", "b"]).unwrap();
    let s = SummingMatrix::new(&h);
    let base = [10.0, 4.0, 4.0];

    // explicit-formula oracle: y = S G base
    let so = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
    let b = DVector::from_column_slice(&base);
    let g_bu = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let g_td = DMatrix::from_row_slice(2, 3, &[0.5, 0.0, 0.0, 0.5, 0.0, 0.0]);
    let w = DMatrix::from_diagonal(&DVector::from_column_slice(&[0.5, 1.0, 1.0]));
    let g_mint = (so.transpose() * &w * &so).try_inverse().unwrap() * so.transpose() * &w;
    let oracle = |g: &DMatrix<f64>| (&so * g * &b).iter().copied().collect::<Vec<f64>>();

    let td_props = TdProportions {
        p: vec![0.5, 0.5],
        uniform_fallback: false,
    };
    let got = [
        reconcile(&g_bottom_up(&h), &s, &base).unwrap(),
        reconcile(&g_top_down(&h, &td_props).unwrap(), &s, &base).unwrap(),
        reconcile(&g_mint_structural(&s).unwrap(), &s, &base).unwrap(),
    ];
    let want = [oracle(&g_bu), oracle(&g_td), oracle(&g_mint)];
    let pinned = [[8.0, 4.0, 4.0], [10.0, 5.0, 5.0], [9.0, 4.5, 4.5]];
    for ((name, g), (w, p)) in ["BU", "TD", "MinT"].iter().zip(&got).zip(want.iter().zip(&pinned)) {
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        ensure(close(g, w), format!("{name}: {g:?} vs oracle {w:?}"))?;
        ensure(close(g, p), format!("{name}: {g:?} vs pinned {p:?}"))?;
    }
    Ok("BU [8,4,4], TD [10,5,5], MinT [9,4.5,4.5]".into())
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let y = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..50.0) };
        let f = rng.gen_range(-3.0..3.0);
        let rho = rng.gen_range(1.05..1.95);
        let (g, hs) = tweedie_grad_hess(y, f, rho).unwrap();
        let e = 1e-5;
        let g_fd = (tweedie_loss(y, f + e, rho) - tweedie_loss(y, f - e, rho)) / (2.0 * e);
        let h_fd = (tweedie_grad_hess(y, f + e, rho).unwrap().0 - tweedie_grad_hess(y, f - e, rho).unwrap().0) / (2.0 * e);
        let rg = (g - g_fd).abs() / g.abs().max(1.0);
        let rh = (hs - h_fd).abs() / hs.abs().max(1.0);
        worst = worst.max(rg).max(rh);
        ensure(rg <= 1e-6 && rh <= 1e-6, format!("y={y} F={f} rho={rho}: grad {rg:e}, hess {rh:e}"))?;
    }
    Ok(format!("1000 samples, worst relative error {worst:.1e}"))
}

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut x = RowMatrix::with_cols(3);
    let mut y = Vec::new();
    for _ in 0..1000 {
        let row = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        y.push(if row[0] < 0.5 { 1.0 } else { 3.0 });
        x.push_row(&row);
    }
    let params = GbdtParams {
        learning_rate: 0.1,
        feature_fraction: 1.0,
        num_rounds: 100,
        seed: 11,
        ..GbdtParams::default()
    };
    let model = gbdt_train(&x, &y, &params).unwrap();
    let pred = model.predict(&x).unwrap();
    let rmse = (pred.iter().zip(&y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
    ensure(rmse < 0.05, format!("training RMSE {rmse}"))?;
    ensure(model.train_loss.len() == 101, "loss history length")?;
    ensure(model.train_loss.windows(2).all(|w| w[1] <= w[0]), "training loss increased")?;

    let sampled = GbdtParams {
        feature_fraction: 0.5,
        ..params
    };
    let train_on = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| gbdt_train(&x, &y, &sampled).unwrap())
    };
    let (a, b) = (train_on(1), train_on(4));
    ensure(a.to_json().unwrap() == b.to_json().unwrap(), "1 vs 4 workers differ")?;
    Ok(format!("RMSE {rmse:.4}, loss non-increasing, identical at 1 and 4 workers"))
}

fn criterion_6() -> Check {
    let values: Vec<f64> = (0..1941).map(|t| (t % 7) as f64).collect();
    let key = SeriesKey {
        hierarchy_id: "h".into(),
        node_id: "n".into(),
    };
    let e = EmbeddingMatrix::build(key, &values, 60, 1).unwrap();
    let split = split_holdout(e.row_count(), 28).unwrap();
    ensure(e.row_count() == 1880 && e.n_cols() == 62, format!("{} x {}", e.row_count(), e.n_cols()))?;
    ensure(split.train_rows.len() == 1852 && split.test_rows.len() == 28, format!("{split:?}"))?;
    ensure(e.target(e.row_count() - 1) == values[1940], "last target is not the last value")?;
    Ok("1880 x 62, split 1852/28".into())
}

fn brute_force(scores: &[MaseScore]) -> (f64, f64) {
    let mut hs: Vec<&str> = scores.iter().map(|s| s.hierarchy_id.as_str()).collect();
    hs.sort();
    hs.dedup();
    let mut levels = 0.0;
    for level in LevelClass::ALL {
        let mut acc = 0.0;
        for h in &hs {
            let (mut sum, mut cnt) = (0.0, 0.0);
            for s in scores {
                if s.hierarchy_id == *h && s.level == level {
                    sum += s.value.unwrap();
                    cnt += 1.0;
                }
            }
            acc += sum / cnt;
        }
        levels += acc / hs.len() as f64;
    }
    let mut products = 0.0;
    for h in &hs {
        let (mut sum, mut cnt) = (0.0, 0.0);
        for s in scores.iter().filter(|s| s.hierarchy_id == *h) {
            sum += s.value.unwrap();
            cnt += 1.0;
        }
        products += sum / cnt;
    }
    (levels / 3.0, products / hs.len() as f64)
}

fn criterion_7() -> Check {
    let m = mase(&[1.0, 2.0, 3.0, 4.0], &[5.0], &[4.0]).unwrap();
    ensure(m == Some(1.0), format!("hand case gave {m:?}"))?;
    let es = format_4dp((2.6054 + 1.2055 + 1.0412) / 3.0);
    ensure(es == "1.6174", format!("ES row gave {es}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let levels = [LevelClass::Top, LevelClass::Middle, LevelClass::Middle, LevelClass::Middle];
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n_h = rng.gen_range(1..6);
        let mut scores = Vec::new();
        for h in 0..n_h {
            let n_b = rng.gen_range(1..5);
            for (i, &l) in levels[..rng.gen_range(2..=4)].iter().enumerate() {
                scores.push(MaseScore {
                    hierarchy_id: format!("h{h}"),
                    node_id: format!("n{i}"),
                    level: l,
                    value: Some(rng.gen_range(0.0..3.0)),
                });
            }
            for b in 0..n_b {
                scores.push(MaseScore {
                    hierarchy_id: format!("h{h}"),
                    node_id: format!("b{b}"),
                    level: LevelClass::Bottom,
                    value: Some(rng.gen_range(0.0..3.0)),
                });
            }
        }
        let (lv, pr) = brute_force(&scores);
        worst = worst
            .max((avg_levels(&scores).unwrap().avg_levels - lv).abs())
            .max((avg_products(&scores).unwrap() - pr).abs());
    }
    ensure(worst <= 1e-12, format!("averages differ from triple loop by {worst:e}"))?;
    Ok(format!("MASE hand case 1.0, ES row 1.6174, averages within {worst:.1e}"))
}

fn criterion_8() -> Check {
    let names = |k: usize| (0..k).map(|i| format!("m{i}")).collect::<Vec<_>>();
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    let same: Vec<Vec<Option<f64>>> = (0..50)
        .map(|_| {
            let v = rng.gen_range(0.0..5.0);
            vec![Some(v); 4]
        })
        .collect();
    let r = mcb_test(&names(4), &same, 0.05).unwrap();
    ensure(r.mean_ranks.iter().all(|&m| m == r.mean_ranks[0]), "identical columns ranked differently")?;
    ensure(r.overlap.iter().flatten().all(|&o| o), "identical columns do not fully overlap")?;

    let dominated: Vec<Vec<Option<f64>>> = (0..100)
        .map(|_| {
            let mut row = vec![Some(rng.gen_range(0.0..0.5))];
            row.extend((0..3).map(|_| Some(rng.gen_range(1.0..2.0))));
            row
        })
        .collect();
    let r = mcb_test(&names(4), &dominated, 0.05).unwrap();
    let (lo0, hi0) = r.interval(0);
    let disjoint = (1..4).all(|j| {
        let (lo, hi) = r.interval(j);
        lo > hi0 || hi < lo0
    });
    ensure(r.best == 0 && disjoint, "best interval overlaps another model")?;

    let two: Vec<Vec<Option<f64>>> = (0..10).map(|_| vec![Some(rng.gen()), Some(rng.gen())]).collect();
    let r = mcb_test(&names(2), &two, 0.05).unwrap();
    ensure((r.half_width - 0.438).abs() < 1e-3, format!("k=2 N=10 half-width {}", r.half_width))?;
    Ok(format!("equal ranks, disjoint best interval, k=2 N=10 half-width {:.4}", r.half_width))
}

fn criterion_9() -> Check {
    let start = Instant::now();
    let seeds = 20u64;
    let (mut nfg_wins, mut fg_wins) = (0, 0);
    for seed in 0..seeds {
        let spec = SynthSpec {
            hierarchies: 6,
            bottoms: 4,
            groups: 2,
            length: 300,
            sharing: 0.8,
            seed,
            ..SynthSpec::default()
        };
        let ds = Dataset::build(&generate(&spec).unwrap(), spec.hierarchy().unwrap(), 60, 28).unwrap();
        let meta = ds.series_meta().unwrap();
        let opts = ForecastOptions {
            seed,
            ..ForecastOptions::default()
        };
        let score = |family| {
            let base = produce_base_forecasts(family, &ds, &opts).unwrap();
            evaluate(&[base.set], &meta).unwrap().rows[0].avg_products
        };
        let local = score(ModelFamily::GbdtLocal);
        if score(ModelFamily::GbdtNfg) < local {
            nfg_wins += 1;
        }
        if score(ModelFamily::GbdtFg) < local {
            fg_wins += 1;
        }
    }
    let elapsed = start.elapsed();
    let need = (seeds as f64 * 0.7).ceil() as usize;
    ensure(
        nfg_wins >= need && fg_wins >= need,
        format!("per-hierarchy won {nfg_wins}/{seeds}, global won {fg_wins}/{seeds}, need {need}"),
    )?;
    ensure(elapsed < Duration::from_secs(600), format!("took {elapsed:?}"))?;
    Ok(format!(
        "sharing 0.8, T=300: per-hierarchy beat local {nfg_wins}/{seeds}, global {fg_wins}/{seeds}, in {elapsed:.1?}"
    ))
}

fn htsf(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_htsf")).args(args).output().expect("binary runs")
}

fn criterion_10() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let synth = htsf(&[
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--hierarchies",
        "3",
        "--length",
        "150",
        "--seed",
        "10",
    ]);
    ensure(synth.status.success(), String::from_utf8_lossy(&synth.stderr).to_string())?;
    let config = data.join("config.json");
    let text = fs::read_to_string(&config).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["models"] = serde_json::json!(["es", "gbdt-nfg", "gbdt-fg"]);
    v["reconciliations"] = serde_json::json!(["bu", "mint"]);
    fs::write(&config, serde_json::to_string_pretty(&v).unwrap()).unwrap();

    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let o = htsf(&["run", config.to_str().unwrap(), "--output-dir", out.to_str().unwrap()]);
            (out, o)
        })
        .collect();
    for (_, o) in &runs {
        ensure(o.status.success(), String::from_utf8_lossy(&o.stderr).to_string())?;
    }
    let same = |f: &str| fs::read(runs[0].0.join(f)).ok() == fs::read(runs[1].0.join(f)).ok();
    let read = |p: &Path| fs::read(p).map(|b| b.len()).unwrap_or(0);
    for f in ["results_table.csv", "boxplot.csv", "mcb.csv", "forecasts.csv"] {
        ensure(read(&runs[0].0.join(f)) > 0, format!("{f} missing or empty"))?;
        ensure(same(f), format!("{f} differs between runs"))?;
    }
    let rows = fs::read_to_string(runs[0].0.join("results_table.csv")).unwrap().lines().count() - 1;
    ensure(rows == 9, format!("expected 9 result rows, got {rows}"))?;
    Ok("results, boxplot, MCB and forecast CSVs byte-identical across two runs".into())
}

#[test]
fn acceptance() {
    type Criterion = (&'static str, fn() -> Check);
    let criteria: [Criterion; 10] = [
        ("reconciliation coherency", criterion_1),
        ("MinT correctness", criterion_2),
        ("worked example", criterion_3),
        ("Tweedie derivatives", criterion_4),
        ("GBDT sanity", criterion_5),
        ("embedding counts", criterion_6),
        ("metric identities", criterion_7),
        ("MCB", criterion_8),
        ("pooled beats local on shared signals", criterion_9),
        ("end-to-end determinism", criterion_10),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail}", i + 1),
            Err(why) => {
                println!("FAIL criterion {}: {name}: {why}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

mod common;

use std::fs;

use cmr::cluster_store::{generate_clusters, GeneratorSpec, ShiftSpec};
use cmr::harness::{
    dynamics_grid, expand_grid, run_method, run_reference_frozen, sweep, write_run, Benchmark, ClusterSource,
    DynamicsVariant, RunConfig, StreamSource, SweepOptions, UpstreamSource,
};
use cmr::learner::{Arch, UpstreamOptions};
use cmr::metrics::{efr, okr, recompute_csr, MetricSettings};
use cmr::refiners::{Method, Refiner, RefinerConfig};
use cmr::stream::{sample_stream, StreamConfig};
use common::*;

fn metrics() -> MetricSettings {
    MetricSettings::default()
}

#[test]
fn frozen_reference_never_changes() {
    let bench = small_bench();
    let stream = small_stream(&bench, 3);
    let r = run_reference_frozen(&bench, &stream, &metrics(), 0).unwrap();
    assert_eq!(r.final_model, bench.f0);
    let ukr0 = r.trace.records[0].ukr;
    for rec in &r.trace.records {
        assert_eq!(rec.ukr, ukr0);
        assert!(rec.efr.is_none() || rec.efr == Some(0.0));
    }
    // fewer than 1024 past queries, so the OKR sample is all of them
    assert!(stream.episodes.iter().map(|e| e.examples.len()).sum::<usize>() < 1024);
    for rec in &r.trace.records {
        let past: Vec<_> = stream.episodes[..rec.t - 1]
            .iter()
            .flat_map(|e| e.examples.clone())
            .collect();
        if past.is_empty() {
            assert_eq!(rec.okr, None);
        } else {
            assert_eq!(rec.okr, okr(&bench.f0, &past).unwrap());
        }
    }
}

#[test]
fn perfect_upstream_model_sees_no_errors() {
    let spec = GeneratorSpec {
        d: 2,
        k: 2,
        per_cluster_size: 50,
        heldout_per_cluster: 10,
        base_means: vec![vec![5.0, 0.0], vec![-5.0, 0.0]],
        noise_scale: 1e-3,
        shifts: vec![ShiftSpec {
            angle: 3.0,
            translation: vec![],
        }],
        seed: 0,
    };
    let bench = Benchmark::generate(
        &spec,
        &UpstreamOptions {
            arch: Arch::Softmax,
            epochs: 30,
            lr: 0.05,
            ..UpstreamOptions::default()
        },
    )
    .unwrap();
    let cfg = StreamConfig {
        alpha: 1.0,
        ..small_stream_config(1)
    };
    let stream = sample_stream(&bench.clusters, &cfg).unwrap();
    let r = run_method(&bench, &stream, &small_refiner(Method::Cft), &metrics(), 0).unwrap();
    assert!(r.trace.records.iter().all(|x| x.errors == 0 && x.efr.is_none()));
    assert_eq!(r.final_model, bench.f0);
    assert_eq!(r.report.last.csr, Some(1.0));
}

#[test]
fn logs_reproduce_the_trace() {
    let bench = small_bench();
    let stream = small_stream(&bench, 4);
    for method in [Method::Cft, Method::Mir] {
        let r = run_method(&bench, &stream, &small_refiner(method), &metrics(), 2).unwrap();
        let logged = r.predictions.iter().filter(|p| p.label != p.predicted).count();
        let traced: usize = r.trace.records.iter().map(|x| x.errors).sum();
        assert_eq!(logged, traced);
        for rec in &r.trace.records {
            let per_t = r
                .predictions
                .iter()
                .filter(|p| p.t == rec.t && p.label != p.predicted)
                .count();
            assert_eq!(per_t, rec.errors, "t = {}", rec.t);
        }
        // CSR recounted from the log
        let mut wrong = 0;
        let mut seen = 0;
        for rec in &r.trace.records {
            let expected = (seen > 0).then(|| 1.0 - wrong as f64 / seen as f64);
            assert_eq!(rec.csr, expected);
            wrong += r
                .predictions
                .iter()
                .filter(|p| p.t == rec.t && p.label != p.predicted)
                .count();
            seen += r.predictions.iter().filter(|p| p.t == rec.t).count();
        }
        // EFR recounted from the refined predictions
        for rec in &r.trace.records {
            let errs: Vec<_> = r
                .predictions
                .iter()
                .filter(|p| p.t == rec.t && p.label != p.predicted)
                .collect();
            let fixed = errs.iter().filter(|p| p.refined == Some(p.label)).count();
            let expected = (!errs.is_empty()).then(|| fixed as f64 / errs.len() as f64);
            assert_eq!(rec.efr, expected, "t = {}", rec.t);
            assert!(r
                .predictions
                .iter()
                .filter(|p| p.label == p.predicted)
                .all(|p| p.refined.is_none()));
        }
        assert_eq!(
            recompute_csr(&r.trace),
            r.trace.records.iter().map(|x| x.csr).collect::<Vec<_>>()
        );
    }
}

#[test]
fn efr_is_measured_with_the_refined_model() {
    let bench = small_bench();
    let stream = small_stream(&bench, 5);
    let cfg = small_refiner(Method::Cft);
    let r = run_method(&bench, &stream, &cfg, &metrics(), 6).unwrap();
    // replay the loop by hand
    let mut refiner = Refiner::new(cfg, &bench.f0, bench.upstream_pool(), cmr::harness::method_seed(6)).unwrap();
    let mut model = bench.f0.clone();
    for (ep, rec) in stream.episodes.iter().zip(&r.trace.records) {
        let errors: Vec<_> = ep
            .examples
            .iter()
            .filter(|e| !model.is_correct(e).unwrap())
            .cloned()
            .collect();
        let before = efr(&model, &errors).unwrap();
        model = refiner.refine(&model, &errors, ep.t).unwrap();
        assert_eq!(rec.efr, efr(&model, &errors).unwrap());
        if !errors.is_empty() {
            assert_eq!(before, Some(0.0));
        }
    }
    assert_eq!(model, r.final_model);
}

fn small_run_config(method: Method, seed: u64) -> RunConfig {
    RunConfig {
        run_id: format!("{method}-{seed}"),
        seed,
        clusters: ClusterSource::Generate(small_spec()),
        stream: StreamSource::Sample(small_stream_config(12)),
        upstream: UpstreamSource::Train(small_upstream()),
        refiner: small_refiner(method),
        metrics: metrics(),
    }
}

#[test]
fn identical_configs_write_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_run_config(Method::MirL2reg, 3);
    for dir in ["a", "b"] {
        let (bench, stream) = cfg.materialize().unwrap();
        let result = run_method(&bench, &stream, &cfg.refiner, &cfg.metrics, cfg.seed).unwrap();
        write_run(tmp.path().join(dir), &cfg, &bench, &stream, &result).unwrap();
    }
    let mut names: Vec<_> = fs::read_dir(tmp.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(names.contains(&"predictions.csv".to_string()));
    for name in names.iter().filter(|n| *n != "timing.json") {
        assert_eq!(
            fs::read(tmp.path().join("a").join(name)).unwrap(),
            fs::read(tmp.path().join("b").join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn changing_the_method_keeps_the_stream() {
    let (_, a) = small_run_config(Method::Cft, 3).materialize().unwrap();
    let (_, b) = small_run_config(Method::Er, 3).materialize().unwrap();
    let (_, c) = small_run_config(Method::Er, 99).materialize().unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn config_toml_round_trips() {
    let cfg = small_run_config(Method::OnlineEwc, 1);
    let back = cmr::harness::parse_run_config(&cfg.to_toml().unwrap(), "mem").unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn offline_retrains_on_the_frozen_errors() {
    let bench = small_bench();
    let stream = small_stream(&bench, 8);
    let frozen = run_reference_frozen(&bench, &stream, &metrics(), 0).unwrap();
    let cfg = small_refiner(Method::Offline);
    let off = run_method(&bench, &stream, &cfg, &metrics(), 0).unwrap();
    let strip = |r: &cmr::harness::RunResult| {
        r.predictions
            .iter()
            .map(|p| (p.t, p.id, p.label, p.predicted))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&off), strip(&frozen));
    // offline EFR covers every error of the stream
    let errs: Vec<_> = off.predictions.iter().filter(|p| p.label != p.predicted).collect();
    let fixed = errs.iter().filter(|p| p.refined == Some(p.label)).count();
    assert_eq!(off.report.last.efr, Some(fixed as f64 / errs.len() as f64));
    assert_eq!(off.trace.records.len(), 1);
    let again = run_method(&bench, &stream, &cfg, &metrics(), 0).unwrap();
    assert_eq!(off.final_model, again.final_model);
    assert_eq!(off.trace, again.trace);
}

#[test]
fn dynamics_grid_gains() {
    let bench = small_bench();
    let base = small_stream_config(0);
    let variants = [
        DynamicsVariant {
            alpha: 0.85,
            beta: 0.1,
            gamma: 0.8,
        },
        DynamicsVariant {
            alpha: 0.85,
            beta: 0.9,
            gamma: 0.8,
        },
    ];
    let configs = [small_refiner(Method::Frozen), small_refiner(Method::Er)];
    let seeds = [0, 1, 2, 3, 4];
    let table = dynamics_grid(&bench, &base, &variants, &configs, 2, 5, &seeds, &metrics()).unwrap();
    assert_eq!(table.rows.len(), 2);
    for row in &table.rows {
        assert_eq!(row.gains[0].mean, 0.0);
        assert_eq!(row.gains[0].std, 0.0);
        assert_eq!(row.gains[1].n, 10);
    }
    assert_ne!(table.rows[0].gains[1], table.rows[1].gains[1]);
    assert!(dynamics_grid(&bench, &base, &[], &configs, 2, 5, &seeds, &metrics()).is_err());
}

#[test]
fn sweep_selection_is_order_invariant() {
    let bench = small_bench();
    let val: Vec<_> = (0..2).map(|s| small_stream(&bench, 100 + s)).collect();
    let test: Vec<_> = (0..2).map(|s| small_stream(&bench, 200 + s)).collect();
    let opts = SweepOptions {
        seeds: vec![0, 1],
        metrics: metrics(),
    };
    let mut base = toml::Table::new();
    base.insert("epochs".into(), toml::Value::Integer(3));
    base.insert("replay_size".into(), toml::Value::Integer(8));
    base.insert("upstream_memory".into(), toml::Value::Integer(64));
    let mut axes = std::collections::BTreeMap::new();
    axes.insert(
        "lr".to_string(),
        vec![
            toml::Value::Float(0.001),
            toml::Value::Float(0.03),
            toml::Value::Float(0.01),
        ],
    );
    let grid = expand_grid(Method::Er, &base, &axes).unwrap();
    let mut reversed = grid.clone();
    reversed.reverse();
    let a = sweep(&bench, &[(Method::Er, grid.clone())], &val, &test, &opts).unwrap();
    let b = sweep(&bench, &[(Method::Er, reversed)], &val, &test, &opts).unwrap();
    assert_eq!(a, b);
    let entry = &a.entries[0];
    assert_eq!(entry.runs.len(), 4);
    assert_eq!(entry.grid_scores.len(), 3);
    let best = entry.grid_scores.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(entry.validation_score, best);

    let single = vec![grid[1].clone()];
    let s = sweep(&bench, &[(Method::Er, single.clone())], &val, &test, &opts).unwrap();
    assert_eq!(s.entries[0].config, single[0]);
    assert!(sweep(&bench, &[(Method::Er, vec![])], &val, &test, &opts).is_err());
    let wrong: Vec<RefinerConfig> = vec![small_refiner(Method::Cft)];
    assert!(sweep(&bench, &[(Method::Er, wrong)], &val, &test, &opts).is_err());
}

#[test]
fn clusters_from_file_and_generated_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let set = generate_clusters(&small_spec()).unwrap();
    let path = tmp.path().join("c.jsonl");
    cmr::cluster_store::save_clusters(&set, &path).unwrap();
    let mut cfg = small_run_config(Method::Cft, 0);
    let (gen_bench, gen_stream) = cfg.materialize().unwrap();
    cfg.clusters = ClusterSource::File(path);
    let (file_bench, file_stream) = cfg.materialize().unwrap();
    assert_eq!(gen_bench.f0, file_bench.f0);
    assert_eq!(gen_stream, file_stream);
}

mod common;

use std::fs;
use std::path::Path;

use leakguard_core::harness::{emit_report, evaluate, run_pipeline, SessionKind, REPORT_FILES};
use leakguard_core::{ExperimentReport, Method, PipelineConfig};

use common::{fixture, small_config};

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    REPORT_FILES
        .iter()
        .map(|name| (name.to_string(), fs::read(dir.join(name)).unwrap()))
        .collect()
}

fn header(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn fixed_seed_gives_byte_identical_reports() {
    let cfg = small_config();
    let a = run_pipeline(&cfg).unwrap();
    let b = run_pipeline(&cfg).unwrap();
    assert_eq!(a, b);
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    emit_report(&a, da.path()).unwrap();
    emit_report(&b, db.path()).unwrap();
    assert_eq!(files(da.path()), files(db.path()));
    emit_report(&a, da.path()).unwrap();
    assert_eq!(files(da.path()), files(db.path()));

    let other = run_pipeline(&PipelineConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(other.sessions, a.sessions);
}

#[test]
fn pool_streams_are_shared_by_every_method() {
    let f = fixture();
    let report = evaluate(&f.dep, &f.data, &f.cfg).unwrap();
    let s = &report.summary;
    assert_eq!((s.pool.benign, s.pool.random, s.pool.perturbed), (12, 6, 6));
    assert_eq!(report.sessions.len(), 24);
    for (i, session) in report.sessions.iter().enumerate() {
        assert_eq!(session.index, i);
        assert_eq!(session.trajectory.len(), f.cfg.horizon);
        let methods: Vec<Method> = session.baselines.iter().map(|b| b.method).collect();
        assert_eq!(methods, Method::BASELINES.to_vec());
        assert_eq!(session.attack_metric.is_some(), session.kind != SessionKind::Benign);
    }
    assert_eq!(report.curve.len(), f.cfg.horizon);
    assert_eq!(report.curve.last().unwrap().accuracy, report.methods[0].accuracy);
}

#[test]
fn metrics_are_recomputable_from_confusion_counts() {
    let f = fixture();
    let report = evaluate(&f.dep, &f.data, &f.cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path()).unwrap();
    let mut reader = csv::Reader::from_path(dir.path().join("metrics.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let n = |i: usize| row[i].parse::<f64>().unwrap();
        let (tp, fp, tn, fn_) = (n(1), n(2), n(3), n(4));
        assert_eq!(tp + fp + tn + fn_, 24.0);
        assert_eq!(n(5), (tp + tn) / 24.0);
        let precision = if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) };
        assert_eq!(n(6), precision);
        assert_eq!(n(7), tp / (tp + fn_));
    }
}

#[test]
fn benign_only_pool_reports_null_recall() {
    let f = fixture();
    let cfg = PipelineConfig {
        adversaries: 0,
        ..f.cfg.clone()
    };
    let report = evaluate(&f.dep, &f.data, &cfg).unwrap();
    for m in &report.methods {
        assert_eq!(m.recall, None);
        assert_eq!(m.confusion.tp + m.confusion.fn_, 0);
        if m.confusion.fp == 0 {
            assert_eq!(m.precision, 1.0);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path()).unwrap();
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(metrics.lines().skip(1).all(|l| l.ends_with(',')));
    assert_eq!(fs::read_to_string(dir.path().join("attacks.csv")).unwrap().lines().count(), 1);
}

#[test]
fn empty_report_writes_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    emit_report(&ExperimentReport::default(), dir.path()).unwrap();
    for name in REPORT_FILES {
        let text = fs::read_to_string(dir.path().join(name)).unwrap();
        match name {
            "summary.json" => assert!(serde_json::from_str::<serde_json::Value>(&text).is_ok()),
            n if n.ends_with(".jsonl") => assert!(text.is_empty(), "{n}"),
            n => assert_eq!(text.lines().count(), 1, "{n}"),
        }
    }
}

#[test]
fn emitted_schemas() {
    let f = fixture();
    let report = evaluate(&f.dep, &f.data, &f.cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path()).unwrap();
    let d = dir.path();
    assert_eq!(header(d, "metrics.csv"), "method,tp,fp,tn,fn,accuracy,precision,recall");
    assert_eq!(header(d, "curve.csv"), "t,accuracy,precision,recall");
    assert_eq!(header(d, "component_means.csv"), "kind,t,norm_r,norm_d,norm_o,l,l_tr");
    assert_eq!(header(d, "timings.csv"), "t,r_us,d_us,o_us");
    assert_eq!(header(d, "attacks.csv"), "session,kind,metric,value");

    let traj = fs::read_to_string(d.join("trajectories.jsonl")).unwrap();
    assert_eq!(traj.lines().count(), 24 * f.cfg.horizon);
    let line: serde_json::Value = serde_json::from_str(traj.lines().next().unwrap()).unwrap();
    let mut keys: Vec<&str> = line.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(
        keys,
        ["kind", "l", "l_tr", "norm_d", "norm_o", "norm_r", "raw_d", "raw_o", "raw_r", "session", "t", "timing_us", "verdict"]
    );
    assert_eq!(line["timing_us"]["r"], 0.0);

    let base = fs::read_to_string(d.join("baselines.jsonl")).unwrap();
    assert_eq!(base.lines().count(), 24 * 3);
    let line: serde_json::Value = serde_json::from_str(base.lines().next().unwrap()).unwrap();
    for key in ["session", "kind", "method", "verdict", "score"] {
        assert!(line.get(key).is_some(), "{key}");
    }
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(d.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["summary"]["pool"]["benign"], 12);
    assert_eq!(summary["methods"].as_array().unwrap().len(), 4);

    // Rows per (t, kind) in the long-format component table.
    let means = fs::read_to_string(d.join("component_means.csv")).unwrap();
    assert_eq!(means.lines().count(), 1 + 3 * f.cfg.horizon);
}

#[test]
fn recorded_timings_are_positive() {
    let f = fixture();
    let cfg = PipelineConfig {
        record_timings: true,
        ..f.cfg.clone()
    };
    let report = evaluate(&f.dep, &f.data, &cfg).unwrap();
    assert!(report.sessions.iter().flat_map(|s| &s.trajectory).any(|b| b.timing_us.d > 0.0));
}

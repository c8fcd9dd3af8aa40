use std::path::Path;

use atlas_service::cli::{run, Cli};
use atlas_service::engine::{CounterfactualRequest, QueryRequest};
use atlas_service::{Engine, ServiceConfig, ServiceError};
use clap::Parser;

fn atlas(args: &[&str]) {
    let mut argv = vec!["atlas"];
    argv.extend_from_slice(args);
    let cli = Cli::try_parse_from(&argv).unwrap_or_else(|e| panic!("{e}"));
    run(cli).unwrap_or_else(|e| panic!("{args:?}: {e:#}"));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

/// synth, train, index build, returning (data, checkpoint dir, index).
fn pipeline(root: &Path) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    let data = root.join("data");
    let ck = root.join("ck");
    let index = root.join("mif.hki");
    atlas(&["synth", "--patients", "12", "--patches-per-slice", "10", "--out", p(&data)]);
    let cfg = root.join("align.toml");
    std::fs::write(&cfg, "batch_size = 32\nepochs = 2\nwarmup_steps = 2\nd_hidden = 32\nd_out = 16\n").unwrap();
    atlas(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&ck), "--holdout", "0.25"]);
    atlas(&["index", "build", "--data", p(&data), "--checkpoint", p(&ck), "--out", p(&index)]);
    (data, ck, index)
}

fn files_config(data: &Path, ck: &Path, index: &Path, crc: &str) -> ServiceConfig {
    ServiceConfig::parse(&format!(
        "[source]\nkind = \"files\"\ndata = {data:?}\ncheckpoint = {ck:?}\n[[source.galleries]]\nname = \"mif\"\npath = {index:?}\ncrc32 = \"{crc}\"\n",
        data = p(data),
        ck = p(&ck.join("heads.hkck")),
        index = p(index),
    ))
    .unwrap()
}

#[test]
fn file_pipeline_serves_queries_and_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ck, index) = pipeline(tmp.path());
    assert!(ck.join("loss.csv").exists());
    assert!(!std::fs::read_to_string(ck.join("holdout.txt")).unwrap().trim().is_empty());

    let crc = format!("{:08x}", crc32fast::hash(&std::fs::read(&index).unwrap()));
    let engine = Engine::from_config(&files_config(&data, &ck, &index, &crc)).unwrap();
    assert_eq!(engine.rows(), 120);

    let resp = engine
        .query(&QueryRequest {
            patch_id: Some("S-0003-0-p004".into()),
            k: Some(5),
            exclude_own_slice: true,
            ..QueryRequest::default()
        })
        .unwrap();
    assert_eq!(resp.query.mode, "fused");
    assert_eq!(resp.results.len(), 5);
    assert!(resp.results.iter().all(|h| h.region.as_deref() != Some("S-0003-0")));
    assert!(resp.results.windows(2).all(|w| w[0].score >= w[1].score));

    let out = tmp.path().join("report");
    let req = CounterfactualRequest {
        slice_id: Some("S-0003-0".into()),
        k: Some(20),
        clusters: Some(2),
        ..CounterfactualRequest::default()
    };
    let resp = atlas_service::cli::counterfactual_report(&engine, &req, &out).unwrap();
    assert_eq!(resp.queries.len(), 10);
    assert!(resp.queries.iter().all(|q| q.identical));
    for f in ["composition.csv", "cluster_shift.csv", "shifts.csv", "retrieval.csv", "summary.json", "prototypes.txt"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    for row in csv_rows(&out.join("shifts.csv")) {
        assert!(row.iter().skip(2).all(|v| v == "0.000000"), "null edit shift {row:?}");
    }

    let clusters = engine.clusters(&resp.run).unwrap();
    let body = serde_json::to_value(&clusters).unwrap();
    let cells: usize = body["heatmap"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["cells"].as_array().map_or(1, Vec::len).max(1))
        .sum();
    assert_eq!(csv_rows(&out.join("cluster_shift.csv")).len(), cells);

    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["run"], resp.run);
    assert_eq!(summary["identical_sets"], 10);

    let again = atlas_service::cli::counterfactual_report(&engine, &req, &tmp.path().join("again")).unwrap();
    assert_eq!(again.run, resp.run);
    assert_eq!(
        std::fs::read(out.join("cluster_shift.csv")).unwrap(),
        std::fs::read(tmp.path().join("again/cluster_shift.csv")).unwrap()
    );
}

#[test]
fn checksum_mismatch_refuses_the_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ck, index) = pipeline(tmp.path());
    let crc = crc32fast::hash(&std::fs::read(&index).unwrap());
    let wrong = format!("{:08x}", crc ^ 1);
    match Engine::from_config(&files_config(&data, &ck, &index, &wrong)) {
        Err(ServiceError::Checksum { found, .. }) => assert_eq!(found, format!("{crc:08x}")),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("mismatched snapshot was loaded"),
    }
}

#[test]
fn evaluation_commands_write_their_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ck, _) = pipeline(tmp.path());
    let eval = tmp.path().join("recall.csv");
    atlas(&["index", "eval", "--data", p(&data), "--checkpoint", p(&ck), "--ks", "1,5", "--out", p(&eval)]);
    let rows = csv_rows(&eval);
    assert_eq!(rows.len(), 12);
    for r in &rows {
        let v: f64 = r[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }

    let probe = tmp.path().join("probe");
    atlas(&["probe", "--data", p(&data), "--checkpoint", p(&ck), "--folds", "3", "--out", p(&probe)]);
    let summary = csv_rows(&probe.join("probe_summary.csv"));
    assert_eq!(summary.iter().filter(|r| r[3] == "true").count(), 1);

    let mil = tmp.path().join("mil");
    atlas(&["mil", "--data", p(&data), "--task", "response", "--folds", "3", "--epochs", "2", "--out", p(&mil)]);
    let folds: std::collections::BTreeSet<String> = csv_rows(&mil.join("mil_folds.csv")).into_iter().map(|r| r[0].clone()).collect();
    assert_eq!(folds.len(), 3);
}

#[test]
fn planted_counterfactual_from_the_command_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cf");
    atlas(&["counterfactual", "--planted", "--queries", "slice:c0", "--edit", "n_stage=N2", "--out", p(&out)]);
    let comp = csv_rows(&out.join("composition.csv"));
    assert!(comp.iter().any(|r| r[0] == "N2"));
}

#[test]
fn preprocess_and_textgen_describe_raw_slices() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    atlas(&["synth", "--patients", "2", "--patches-per-slice", "4", "--out", p(&data)]);

    let raw = tmp.path().join("raw/S-0000-0");
    std::fs::create_dir_all(&raw).unwrap();
    let mask = image::GrayImage::from_fn(64, 64, |x, _| image::Luma([if x < 48 { 255 } else { 0 }]));
    mask.save(raw.join("mask.png")).unwrap();
    let cd8 = image::ImageBuffer::<image::Luma<u16>, _>::from_fn(64, 64, |x, y| image::Luma([(x * 400 + y * 50) as u16]));
    cd8.save(raw.join("CD8.png")).unwrap();
    let panck = image::ImageBuffer::<image::Luma<u16>, _>::from_fn(64, 64, |x, y| image::Luma([if (x / 8 + y / 8) % 2 == 0 { 30000 } else { 100 }]));
    panck.save(raw.join("PanCK.png")).unwrap();

    let pre = tmp.path().join("pre");
    atlas(&["preprocess", "--in", p(&tmp.path().join("raw")), "--out", p(&pre), "--patch", "16"]);
    let slice = pre.join("S-0000-0");
    let coords = std::fs::read_to_string(slice.join("coords.txt")).unwrap();
    let n = coords.lines().count();
    assert!(n > 0);
    for line in coords.lines() {
        let f: Vec<usize> = line.split_whitespace().skip(1).map(|v| v.parse().unwrap()).collect();
        assert_eq!(f[2] - f[0], 16);
        assert_eq!(f[3] - f[1], 16);
        assert!(f[2] <= 48, "patch outside the mask: {line}");
    }
    assert_eq!(csv_rows(&slice.join("means.csv")).len(), n);
    assert_eq!(std::fs::read_dir(slice.join("thumbs")).unwrap().count(), n);

    let out = tmp.path().join("described.hkm");
    atlas(&["textgen", "--patches", p(&pre), "--metadata", p(&data.join("manifest.hkm")), "--out", p(&out)]);
    let ds = atlas_core::ingest::load_manifest(&out).unwrap();
    assert_eq!(ds.patches.len(), n);
    assert_eq!(ds.slices[0].channels, ["CD8", "PanCK"]);
    assert!(ds.patches.iter().all(|r| r.text.contains("CD8") && r.text.contains("PanCK")));
    atlas(&["ingest", "--manifest", p(&out)]);
}

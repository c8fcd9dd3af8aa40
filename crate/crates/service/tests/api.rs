use std::sync::{Arc, OnceLock};

use atlas_service::api::router;
use atlas_service::config::Defaults;
use atlas_service::report::{fmt_p, fmt_value};
use atlas_service::Engine;
use atlas_core::counterfactual::planted::PlantedConfig;
use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn engine() -> Arc<Engine> {
    static ENGINE: OnceLock<Arc<Engine>> = OnceLock::new();
    ENGINE
        .get_or_init(|| Arc::new(Engine::planted(&PlantedConfig::default(), Defaults::default()).unwrap()))
        .clone()
}

async fn call(method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let app = router(engine(), &["http://localhost:8000".to_string()]);
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn json_of(method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap())
}

/// Body with the trailing timing member cut off.
fn untimed(bytes: &[u8]) -> String {
    let s = String::from_utf8(bytes.to_vec()).unwrap();
    let cut = s.rfind(",\"timing\":").expect("timing member present");
    s[..cut].to_string()
}

#[tokio::test]
async fn health_reports_index_rows() {
    let (s, v) = json_of("GET", "/v1/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["index_rows"], 4 * 40 * 3);
}

#[tokio::test]
async fn galleries_lists_queries_and_fields() {
    let (s, v) = json_of("GET", "/v1/galleries", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["galleries"][0]["name"], "planted");
    assert_eq!(v["galleries"][0]["rows"], 480);
    assert_eq!(v["queries"].as_array().unwrap().len(), 60);
    assert!(v["editable_fields"].as_array().unwrap().contains(&json!("n_stage")));
    assert_eq!(v["defaults"]["counterfactual_alpha"], 0.6);
}

#[tokio::test]
async fn self_query_ranks_itself_first_with_score_one() {
    let e = engine();
    let idx = &e.galleries[0].index;
    for id in ["g0-000-N0", "g2-017-N2", "g3-039-N1"] {
        let row: Vec<f64> = idx.row(idx.position(id).unwrap()).iter().map(|v| f64::from(*v)).collect();
        let (s, v) = json_of("POST", "/v1/query", Some(json!({"embedding": row, "k": 5}))).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["results"][0]["id"], id);
        assert!((v["results"][0]["score"].as_f64().unwrap() - 1.0).abs() < 1e-6);
        assert!(v["results"].as_array().unwrap().len() <= 5);
    }
    let (_, v) = json_of("POST", "/v1/query", Some(json!({"patch_id": "g1-005-N0", "k": 1}))).await;
    assert_eq!(v["results"][0]["id"], "g1-005-N0");
    assert_eq!(v["query"]["mode"], "gallery");
}

#[tokio::test]
async fn response_length_never_exceeds_k() {
    for k in [1, 7, 50, 480, 1000] {
        let (s, v) = json_of("POST", "/v1/query", Some(json!({"patch_id": "q0-000", "k": k}))).await;
        assert_eq!(s, StatusCode::OK);
        let n = v["results"].as_array().unwrap().len();
        assert_eq!(n, k.min(480));
        if k > 480 {
            assert_eq!(v["status"]["status"], "clipped");
        }
    }
}

#[tokio::test]
async fn fused_query_follows_the_edited_stage() {
    let (_, n0) = json_of("POST", "/v1/query", Some(json!({"patch_id": "q1-003", "alpha": 0.6, "k": 10}))).await;
    let (_, n2) = json_of(
        "POST",
        "/v1/query",
        Some(json!({"patch_id": "q1-003", "alpha": 0.6, "k": 10, "edits": {"n_stage": "N2"}})),
    )
    .await;
    let stages = |v: &Value| -> Vec<String> {
        v["results"]
            .as_array()
            .unwrap()
            .iter()
            .map(|h| h["labels"]["n_stage"].as_str().unwrap().to_string())
            .collect()
    };
    assert!(stages(&n0).iter().all(|s| s == "N0"));
    assert!(stages(&n2).iter().all(|s| s == "N2"));
    let (_, a1) = json_of(
        "POST",
        "/v1/query",
        Some(json!({"patch_id": "q1-003", "alpha": 1.0, "k": 10, "edits": {"n_stage": "N2"}})),
    )
    .await;
    let (_, a1b) = json_of("POST", "/v1/query", Some(json!({"patch_id": "q1-003", "alpha": 1.0, "k": 10}))).await;
    assert_eq!(a1["results"], a1b["results"]);
}

#[tokio::test]
async fn exclude_own_slice_drops_the_query_region() {
    let (_, v) = json_of(
        "POST",
        "/v1/query",
        Some(json!({"patch_id": "q2-000", "k": 20, "exclude_own_slice": true})),
    )
    .await;
    assert!(v["results"].as_array().unwrap().iter().all(|h| h["region"] != "c2"));
}

#[tokio::test]
async fn bad_requests_are_rejected() {
    let cases = [
        json!({"patch_id": "q0-000", "alpha": 1.5}),
        json!({"patch_id": "q0-000", "k": 0}),
        json!({"patch_id": "q0-000", "k": 5000}),
        json!({"patch_id": "q0-000", "edits": {"colour": "red"}}),
        json!({"patch_id": "q0-000", "edits": {"n_stage": "N7"}}),
        json!({}),
        json!({"embedding": [1.0, 0.0]}),
        json!({"patch_id": "q0-000", "bogus": 1}),
    ];
    for c in cases {
        let (s, v) = json_of("POST", "/v1/query", Some(c.clone())).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{c}: {v}");
        assert!(v["error"].is_string());
    }
    let (s, _) = json_of("POST", "/v1/query", Some(json!({"patch_id": "nope"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call("POST", "/v1/query", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn identical_requests_give_identical_bodies() {
    let q = json!({"patch_id": "q3-010", "k": 25, "edits": {"n_stage": "N1"}});
    let (_, a) = call("POST", "/v1/query", Some(q.clone())).await;
    let (_, b) = call("POST", "/v1/query", Some(q)).await;
    assert_eq!(untimed(&a), untimed(&b));

    let cf = json!({"edits": {"n_stage": "N2"}, "k": 30});
    let (_, a) = call("POST", "/v1/counterfactual", Some(cf.clone())).await;
    let (_, b) = call("POST", "/v1/counterfactual", Some(cf)).await;
    assert_eq!(untimed(&a), untimed(&b));

    let run: Value = serde_json::from_slice(&a).unwrap();
    let run = run["run"].as_str().unwrap();
    let (_, c1) = call("GET", &format!("/v1/clusters/{run}"), None).await;
    let (_, c2) = call("GET", &format!("/v1/clusters/{run}"), None).await;
    assert_eq!(c1, c2);
}

#[tokio::test]
async fn concurrent_identical_requests_agree() {
    let q = json!({"patch_id": "q2-004", "k": 40, "edits": {"n_stage": "N2"}});
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let q = q.clone();
            tokio::spawn(async move { call("POST", "/v1/query", Some(q)).await.1 })
        })
        .collect();
    let mut bodies = Vec::new();
    for h in handles {
        bodies.push(untimed(&h.await.unwrap()));
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn empty_edits_give_identical_sets_and_zero_shifts() {
    let (s, v) = json_of("POST", "/v1/counterfactual", Some(json!({"edits": {}}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let queries = v["queries"].as_array().unwrap();
    assert_eq!(queries.len(), 60);
    for q in queries {
        assert_eq!(q["identical"], true);
        assert_eq!(q["original"], q["counterfactual"]);
    }
    for cell in v["shift"].as_array().unwrap() {
        assert_eq!(cell["mean_d"], "0.000000");
    }
    for bar in v["composition"]["rows"].as_array().unwrap() {
        assert_eq!(bar["shift"], "0.000000");
    }
    assert_eq!(v["control_text"], v["counterfactual_text"]);
}

#[tokio::test]
async fn alpha_one_makes_edits_irrelevant() {
    let (_, v) = json_of("POST", "/v1/counterfactual", Some(json!({"edits": {"n_stage": "N2"}, "alpha": 1.0}))).await;
    assert!(v["queries"].as_array().unwrap().iter().all(|q| q["identical"] == true));
}

#[tokio::test]
async fn staging_edit_recovers_the_planted_shift() {
    let (s, v) = json_of("POST", "/v1/counterfactual", Some(json!({"edits": {"n_stage": "N2"}}))).await;
    assert_eq!(s, StatusCode::OK);
    let run = v["run"].as_str().unwrap().to_string();
    let bars = v["composition"]["rows"].as_array().unwrap();
    let n2 = bars.iter().find(|b| b["category"] == "N2").unwrap();
    let frac = |k: &str| n2[k].as_str().unwrap().parse::<f64>().unwrap();
    assert!(frac("counterfactual") > frac("original") + 0.3);
    assert_eq!(n2["significant"], true);
    assert_eq!(bars.last().unwrap()["category"], "unlabeled");

    let (s, c) = json_of("GET", &format!("/v1/clusters/{run}"), None).await;
    assert_eq!(s, StatusCode::OK);
    let rows = c["heatmap"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    let mut flagged = Vec::new();
    for r in rows {
        for cell in r["cells"].as_array().unwrap() {
            if cell["significant"] == true {
                flagged.push((r["cluster"].as_u64().unwrap(), cell["channel"].as_str().unwrap().to_string()));
            }
        }
    }
    assert_eq!(flagged.len(), 1, "{flagged:?}");
    assert_eq!(flagged[0].1, "CD8");

    // Heatmap strings are the stored report values under the shared rules.
    let stored = engine().run(&run).unwrap();
    let table = atlas_core::counterfactual::shift_table(&stored.report.cluster_tests);
    for r in rows {
        let k = r["cluster"].as_u64().unwrap() as usize;
        for cell in r["cells"].as_array().unwrap() {
            let b = table[&(k, cell["channel"].as_str().unwrap().to_string())];
            assert_eq!(cell["mean_d"], fmt_value(b.mean_d));
            assert_eq!(cell["adjusted_p"], fmt_p(b.adjusted_p));
        }
    }

    let (s, p) = json_of("GET", &format!("/v1/prototypes/{run}"), None).await;
    assert_eq!(s, StatusCode::OK);
    let clusters = p["clusters"].as_array().unwrap();
    assert_eq!(clusters.len(), 4);
    for c in clusters {
        assert_eq!(c["prototypes"].as_array().unwrap().len(), 3);
    }
    assert_eq!(c["pca"]["points"].as_array().unwrap().len(), 60);
}

#[tokio::test]
async fn subset_and_slice_selection() {
    let (s, v) = json_of(
        "POST",
        "/v1/counterfactual",
        Some(json!({"query_ids": ["q0-000", "q0-001"], "slice_id": "c1", "edits": {"n_stage": "N1"}, "clusters": 2})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let ids: Vec<&str> = v["queries"].as_array().unwrap().iter().map(|q| q["query_id"].as_str().unwrap()).collect();
    assert_eq!(ids.len(), 17);
    assert_eq!(&ids[..2], &["q0-000", "q0-001"]);
    assert_eq!(v["clusters"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn unknown_runs_and_patches_are_not_found() {
    let (s, _) = json_of("GET", "/v1/clusters/deadbeef", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = json_of("GET", "/v1/prototypes/deadbeef", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = json_of("GET", "/v1/patches/none", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn patches_and_thumbnails() {
    let (s, v) = json_of("GET", "/v1/patches/q0-002", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["kind"], "query");
    assert_eq!(v["metadata"]["n_stage"], "N0");
    let (s, v) = json_of("GET", "/v1/patches/g2-000-N2", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["kind"], "gallery");
    assert_eq!(v["labels"]["n_stage"], "N2");
    assert_eq!(v["abundance"].as_array().unwrap().len(), 8);

    let (s, png) = call("GET", "/v1/patches/g2-000-N2/thumbnail", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
}

#[tokio::test]
async fn cors_allows_configured_origin_only() {
    let app = router(engine(), &["http://localhost:8000".to_string()]);
    let req = |origin: &str| {
        Request::builder()
            .uri("/v1/health")
            .header("origin", origin)
            .body(Body::empty())
            .unwrap()
    };
    let ok = app.clone().oneshot(req("http://localhost:8000")).await.unwrap();
    assert_eq!(ok.headers()["access-control-allow-origin"], "http://localhost:8000");
    let other = app.oneshot(req("http://evil.example")).await.unwrap();
    assert!(other.headers().get("access-control-allow-origin").is_none());
}

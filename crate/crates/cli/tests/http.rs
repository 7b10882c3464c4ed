use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use sssd_cli::{router, AppState, Cache};
use tower::ServiceExt;

fn config(delta_star: f64, informative: bool, gamma: f64, power: f64) -> String {
    let priors = if informative {
        r#""priors": {"group1": [{"dist": "gamma", "shape": 33.79, "rate": 15.66}, {"dist": "gamma", "shape": 26.96, "rate": 37.92}],
                      "group2": [{"dist": "gamma", "shape": 105.53, "rate": 42.97}, {"dist": "gamma", "shape": 85.43, "rate": 106.31}]},"#
    } else {
        ""
    };
    format!(
        r#"{{"design": {{"family": "gamma", "eta1": [2.11, 0.69], "eta2": [2.43, 0.79],
                       "characteristic": {{"kind": "tail_probability", "threshold": 4.29}}, "comparison": "log_ratio"}},
            {priors}
            "test": {{"rope": {{"kind": "equivalence", "delta_star": {delta_star}}}, "gamma": {gamma}, "target_power": {power}}},
            "seed": 3}}"#
    )
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: &str) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, bytes)
}

#[tokio::test]
async fn health_is_ok() {
    let app = router(AppState::new(Cache::default()));
    let (status, _, body) = call(&app, "GET", "/api/health", "").await;
    assert_eq!(status, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["status"], "ok");
}

#[tokio::test]
async fn second_design_request_hits_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(Cache::new(Some(dir.path().to_path_buf()))));
    let cfg = config(0.25, false, 0.5, 0.6);
    let (s1, h1, b1) = call(&app, "POST", "/api/design", &cfg).await;
    assert_eq!(s1, StatusCode::OK);
    assert_eq!(h1["x-sssd-cache"], "miss");
    assert!(h1.contains_key("x-sssd-timings-ms"));
    let (s2, h2, b2) = call(&app, "POST", "/api/design", &cfg).await;
    assert_eq!(s2, StatusCode::OK);
    assert_eq!(h2["x-sssd-cache"], "hit");
    assert_eq!(b1, b2);
}

#[tokio::test]
async fn informative_setting_a_mean_is_near_table_value() {
    let app = router(AppState::new(Cache::default()));
    let (status, _, body) = call(&app, "POST", "/api/design", &config(0.25, true, 0.5, 0.6)).await;
    assert_eq!(status, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    let mu = v["recommendation"]["mu_hat"].as_f64().unwrap();
    assert!((mu - 60.95).abs() < 0.1 * 60.95, "mu_hat {mu}");
}

#[tokio::test]
async fn http_and_core_reports_agree_byte_for_byte() {
    let app = router(AppState::new(Cache::default()));
    let cfg = config(0.3, false, 0.9, 0.7);
    let (_, _, body) = call(&app, "POST", "/api/design", &cfg).await;
    let direct = sssd_core::report::run_design(&sssd_core::report::RunConfig::from_json(&cfg).unwrap()).unwrap();
    assert_eq!(String::from_utf8(body).unwrap(), direct.to_text());
}

#[tokio::test]
async fn malformed_bodies_are_400_with_field() {
    let app = router(AppState::new(Cache::default()));
    let (status, _, body) = call(&app, "POST", "/api/design", "{not json").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["error"]["code"], "configuration");

    let bad = config(0.3, false, 0.9, 0.7).replace("\"gamma\": 0.9", "\"gamma\": 1.5");
    let (status, _, body) = call(&app, "POST", "/api/design", &bad).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["error"]["field"], "test.gamma");
}

#[tokio::test]
async fn engine_errors_are_422_with_code() {
    let app = router(AppState::new(Cache::default()));
    let cfg = config(0.3, false, 0.9, 0.7)
        .replace(r#""rope": {"kind": "equivalence", "delta_star": 0.3}"#, r#""delta1": 0.1, "delta2": 0.3"#);
    let (status, _, body) = call(&app, "POST", "/api/design", &cfg).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["error"]["code"], "unattainable_design");
}

#[tokio::test]
async fn validation_runs_as_a_job() {
    let app = router(AppState::new(Cache::default()));
    let body =
        format!(r#"{{"config": {}, "reps": 100, "m": 2000, "percentiles": [0.5]}}"#, config(0.3, false, 0.9, 0.7));
    let (status, _, resp) = call(&app, "POST", "/api/validate", &body).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let id = serde_json::from_slice::<serde_json::Value>(&resp).unwrap()["job_id"].as_str().unwrap().to_string();
    let mut last = serde_json::Value::Null;
    for _ in 0..600 {
        let (s, _, b) = call(&app, "GET", &format!("/api/jobs/{id}"), "").await;
        assert_eq!(s, StatusCode::OK);
        last = serde_json::from_slice(&b).unwrap();
        if last["status"] != "running" {
            break;
        }
        tokio::time::sleep(std::time::Duration::from_millis(100)).await;
    }
    assert_eq!(last["status"], "done", "{last}");
    assert_eq!(last["result"]["rows"].as_array().unwrap().len(), 1);
    let (s, _, _) = call(&app, "GET", "/api/jobs/999", "").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn validation_job_reports_config_errors() {
    let app = router(AppState::new(Cache::default()));
    let body = format!(r#"{{"config": {}, "reps": 10}}"#, config(0.3, false, 0.9, 0.7));
    let (_, _, resp) = call(&app, "POST", "/api/validate", &body).await;
    let id = serde_json::from_slice::<serde_json::Value>(&resp).unwrap()["job_id"].as_str().unwrap().to_string();
    let mut last = serde_json::Value::Null;
    for _ in 0..100 {
        let (_, _, b) = call(&app, "GET", &format!("/api/jobs/{id}"), "").await;
        last = serde_json::from_slice(&b).unwrap();
        if last["status"] != "running" {
            break;
        }
        tokio::time::sleep(std::time::Duration::from_millis(50)).await;
    }
    assert_eq!(last["status"], "failed");
    assert_eq!(last["error"]["code"], "configuration");
}

use std::path::PathBuf;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use faas_cli::http::{router, AppState};
use faas_core::scenario::{parse_scenario, run_commands, Command, Session};

const CLOUDS: &str = r#"
cloud {"id":"A","users":[{"user":"admin","secret":"a","kind":"MEMBER_CLOUD_ADMIN"}]}
cloud {"id":"B","users":[{"user":"admin","secret":"b","kind":"MEMBER_CLOUD_ADMIN"},{"user":"bob","secret":"bob"}]}
cloud {"id":"C","users":[{"user":"admin","secret":"c","kind":"MEMBER_CLOUD_ADMIN"}]}
cloud {"id":"D","users":[{"user":"admin","secret":"d","kind":"MEMBER_CLOUD_ADMIN"}]}
create-federation {"federation_id":"f","members":["A","B"],"grace":60000}
login {"as":"adminA","cloud":"A","user":"admin","secret":"a"}
login {"as":"adminB","cloud":"B","user":"admin","secret":"b"}
"#;

const PUBLISH: &str = r#"publish {"as":"adminA","offer":{"service_id":"s","provider_cloud":"A","tenant":"t","capacity":4,"unit_cost":1.0,"availability":0.9},"policies":[{"id":"all","effect":"PERMIT"}],"sla":[{"service_id":"s","metric":"latency","comparator":"<=","threshold":100.0,"window":60000}],"backend":{"kind":"STATIC","data":{"v":1}},"new_tenant":{"id":"t","kind":"OP_STANDARD","sections":["A-s2","B-s2"]}}"#;

fn commands(script: &str) -> Vec<Command> {
    parse_scenario(script).unwrap().into_iter().map(|(_, c)| c).collect()
}

fn app(ledger: Option<PathBuf>) -> Router {
    router(AppState::new(Session::new(7, ledger.clone()), ledger))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or(Body::empty(), |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

/// Replays script commands through `POST /commands`, asserting each succeeds.
async fn replay(app: &Router, script: &str) {
    for cmd in commands(script) {
        let body = serde_json::to_value(&cmd).unwrap();
        let (status, out) = call(app, "POST", "/commands", Some(body.clone())).await;
        assert_eq!(status, StatusCode::OK, "{body} -> {out}");
    }
}

fn temp_ledger(name: &str) -> PathBuf {
    let path = std::env::temp_dir().join(format!("faas-http-{}-{name}.jsonl", std::process::id()));
    let _ = std::fs::remove_file(&path);
    path
}

#[tokio::test]
async fn members_lists_founders_and_joiners() {
    let app = app(None);
    replay(&app, CLOUDS).await;
    for (cloud, secret) in [("C", "c"), ("D", "d")] {
        let (status, _) = call(&app, "POST", "/join", Some(json!({"cloud": cloud, "user": "admin", "secret": secret}))).await;
        assert_eq!(status, StatusCode::OK);
    }
    let (status, members) = call(&app, "GET", "/members", None).await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<&str> = members.as_array().unwrap().iter().map(|m| m["cloud_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["A", "B", "C", "D"]);
}

#[tokio::test]
async fn reads_before_founding_are_not_found() {
    let app = app(None);
    let (status, body) = call(&app, "GET", "/members", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "NoFederation");
}

#[tokio::test]
async fn amendment_outside_admin_policy_is_forbidden() {
    let app = app(None);
    replay(&app, CLOUDS).await;
    replay(&app, PUBLISH).await;
    let narrowed = json!([{"id":"all","effect":"PERMIT","target":[{"attribute":"subject.home_cloud","op":"equals","value":"B"}]}]);
    let amend = json!({"as": "adminB", "service_id": "s", "policies": narrowed});
    let (status, body) = call(&app, "POST", "/policy/amend", Some(amend.clone())).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    assert_eq!(body["error"], "Forbidden");

    let admin = json!({"as": "adminA", "service_id": "s", "allowed_editors": ["admin@B"], "editable_fields": ["target"]});
    assert_eq!(call(&app, "POST", "/policy/admin", Some(admin)).await.0, StatusCode::OK);
    assert_eq!(call(&app, "POST", "/policy/amend", Some(amend)).await.0, StatusCode::OK);
}

#[tokio::test]
async fn verify_reports_tampering_of_the_ledger_file() {
    let path = temp_ledger("verify");
    let app = app(Some(path.clone()));
    replay(&app, CLOUDS).await;
    replay(&app, PUBLISH).await;
    assert_eq!(call(&app, "GET", "/ledger/verify", None).await.1, json!({"status": "VALID"}));

    let mut bytes = std::fs::read(&path).unwrap();
    let at = bytes.len() - 10;
    bytes[at] ^= 0x01;
    std::fs::write(&path, bytes).unwrap();
    let (status, report) = call(&app, "GET", "/ledger/verify", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report["status"], "VIOLATION");
    assert!(report["index"].as_u64().is_some());
    let _ = std::fs::remove_file(path);
}

#[tokio::test]
async fn alert_feed_pages_by_cursor() {
    let app = app(None);
    replay(&app, CLOUDS).await;
    replay(&app, PUBLISH).await;
    replay(&app, "sla {\"service_id\":\"s\",\"metric\":\"latency\",\"value\":500.0}\nscan").await;

    let (status, page) = call(&app, "GET", "/alerts?cursor=0", None).await;
    assert_eq!(status, StatusCode::OK);
    let alerts = page["alerts"].as_array().unwrap();
    assert!(!alerts.is_empty());
    let cursor = page["cursor"].as_u64().unwrap();
    assert_eq!(alerts.last().unwrap()["id"].as_u64(), Some(cursor));

    let (_, next) = call(&app, "GET", &format!("/alerts?cursor={cursor}&wait_ms=20"), None).await;
    assert_eq!(next["alerts"], json!([]));
    assert_eq!(next["cursor"], cursor);

    replay(&app, "advance-clock {\"minutes\":2}\nscan").await;
    let (_, later) = call(&app, "GET", &format!("/alerts?cursor={cursor}"), None).await;
    assert!(later["alerts"].as_array().unwrap().iter().all(|a| a["id"].as_u64().unwrap() > cursor));
    assert!(!later["alerts"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn errors_map_to_http_statuses() {
    let app = app(None);
    replay(&app, CLOUDS).await;
    let (status, body) = call(&app, "POST", "/join", Some(json!({"cloud":"C","user":"admin","secret":"wrong"}))).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    assert_eq!(body["error"], "AuthFailed");

    let (status, body) = call(&app, "POST", "/commands", Some(json!({"command":"no-such","args":{}}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "BadRequest");

    let (status, _) = call(&app, "POST", "/expect", Some(json!({"ok": true}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn service_request_and_selection_over_http() {
    let app = app(None);
    replay(&app, CLOUDS).await;
    replay(&app, PUBLISH).await;
    replay(&app, r#"login {"as":"bob","cloud":"B","user":"bob","secret":"bob"}"#).await;
    let (status, outcome) = call(&app, "POST", "/request", Some(json!({"as":"bob","demand":1}))).await;
    assert_eq!(status, StatusCode::OK, "{outcome}");
    let (status, _) = call(&app, "POST", "/select", Some(json!({"as":"bob","service_id":"s"}))).await;
    assert_eq!(status, StatusCode::OK);
    let (status, used) = call(&app, "POST", "/use", Some(json!({"as":"bob","service_id":"s"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(used["result"], json!({"v": 1}));

    let (_, services) = call(&app, "GET", "/services", None).await;
    assert_eq!(services.as_array().unwrap().len(), 1);
    let (status, _) = call(&app, "GET", "/sla", None).await;
    assert_eq!(status, StatusCode::OK);
    let (_, tenants) = call(&app, "GET", "/tenants", None).await;
    assert_eq!(tenants.as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn http_and_scenario_reach_the_same_ledger() {
    let script = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/end_to_end.scn")).unwrap();
    let parsed = parse_scenario(&script).unwrap();

    let mut direct = Session::new(7, None);
    run_commands(&mut direct, &parsed).unwrap();
    let direct_blocks = serde_json::to_value(direct.orchestrator().unwrap().registry().blocks_range(0, usize::MAX)).unwrap();

    // The same commands over HTTP; failures the script expects fail here too.
    let app = app(None);
    for (_, cmd) in parsed.iter().filter(|(_, c)| !matches!(c, Command::Expect(_))) {
        call(&app, "POST", "/commands", Some(serde_json::to_value(cmd).unwrap())).await;
    }
    let (_, http_blocks) = call(&app, "GET", &format!("/ledger/blocks?from=0&limit={}", usize::MAX), None).await;
    assert!(!direct_blocks.as_array().unwrap().is_empty());
    assert_eq!(http_blocks, direct_blocks);
}

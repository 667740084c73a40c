use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use backstep::config::{Condition, RunConfig};
use backstep::curriculum::{CurriculumConfig, StopReason};
use backstep::demo::{validate_replay, Demonstration};
use backstep::env::cliff::BlindCliffWalkConfig;
use backstep::env::EnvSpec;
use backstep::service::http::router;
use backstep::service::{ActionRef, RunRequest, RunState, Service, SessionState, SHIPPED_DEMO_NAME};
use backstep::Error;
use futures_util::{SinkExt, StreamExt};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;
use tower::ServiceExt;

fn cliff(n: usize) -> EnvSpec {
    EnvSpec::BlindCliffWalk(BlindCliffWalkConfig::seeded(n, 0))
}

fn open() -> (tempfile::TempDir, Service) {
    let dir = tempfile::tempdir().unwrap();
    let service = Service::open(dir.path()).unwrap();
    (dir, service)
}

/// Record the perfect walk through the service and save it under `name`.
fn record_cliff(service: &Service, n: usize, name: &str) {
    let created = service.session_create(&cliff(n), Some("walk".into())).unwrap();
    let id = created.session.session_id.clone();
    for a in BlindCliffWalkConfig::seeded(n, 0).correct_actions() {
        service.session_step(&id, &created.token, &ActionRef::Index(a.0)).unwrap();
    }
    service.session_save(&id, &created.token, name).unwrap();
}

fn quick_cliff_run(n: usize) -> RunConfig {
    RunConfig {
        curriculum: CurriculumConfig { batch_steps: 16, workers: 2, ..CurriculumConfig::cliff_walk() },
        ..RunConfig::cliff_walk(n)
    }
}

#[test]
fn fresh_data_dir_ships_the_key_door_demo() {
    let (_dir, s) = open();
    let names: Vec<String> = s.demo_list().into_iter().map(|d| d.name).collect();
    assert_eq!(names, [SHIPPED_DEMO_NAME]);
    let json = s.demo_get(SHIPPED_DEMO_NAME).unwrap();
    assert_eq!(json["total_return"], json!(400.0));
}

#[test]
fn rewinding_a_session_fully_restores_the_initial_view() {
    let (_dir, s) = open();
    let created = s.session_create(&"keydoor".parse().unwrap(), None).unwrap();
    let id = &created.session.session_id;
    let initial = s.session_view(id).unwrap();
    for name in ["right", "right", "down", "left"] {
        s.session_step(id, &created.token, &ActionRef::Name(name.into())).unwrap();
    }
    assert_eq!(s.session_view(id).unwrap().steps, 4);
    let back = s.session_rewind(id, &created.token, 4).unwrap();
    assert_eq!(back, initial);
    assert!(matches!(s.session_rewind(id, &created.token, 1), Err(Error::Validation(_))));
    assert!(matches!(
        s.session_step(id, &created.token, &ActionRef::Name("fly".into())),
        Err(Error::Validation(_))
    ));
}

#[test]
fn only_the_controller_can_drive_a_session() {
    let (_dir, s) = open();
    let created = s.session_create(&cliff(3), None).unwrap();
    let id = &created.session.session_id;
    assert!(matches!(s.session_step(id, "intruder", &ActionRef::Index(0)), Err(Error::Conflict(_))));
    assert!(matches!(s.session_discard(id, "intruder"), Err(Error::Conflict(_))));
    assert!(s.session_view(id).is_ok());
    s.session_discard(id, &created.token).unwrap();
    assert_eq!(s.session_view(id).unwrap().state, SessionState::Discarded);
    assert!(matches!(s.session_step(id, &created.token, &ActionRef::Index(0)), Err(Error::Conflict(_))));
    assert!(matches!(s.session_view("s-missing"), Err(Error::NotFound(_))));
}

#[test]
fn saved_sessions_become_valid_demonstrations() {
    let (dir, s) = open();
    let created = s.session_create(&cliff(4), None).unwrap();
    let id = created.session.session_id.clone();
    assert!(matches!(s.session_save(&id, &created.token, "early"), Err(Error::Validation(_))));
    let correct = BlindCliffWalkConfig::seeded(4, 0).correct_actions();
    for a in &correct {
        s.session_step(&id, &created.token, &ActionRef::Index(a.0)).unwrap();
    }
    assert!(matches!(s.session_step(&id, &created.token, &ActionRef::Index(0)), Err(Error::Conflict(_))));
    assert!(matches!(s.session_save(&id, &created.token, "../escape"), Err(Error::Validation(_))));
    let entry = s.session_save(&id, &created.token, "walk4").unwrap();
    assert_eq!(entry.name, "walk4");
    assert_eq!(s.session_view(&id).unwrap().state, SessionState::Finalized);

    let bytes = std::fs::read(dir.path().join("demos/walk4.demo")).unwrap();
    let demo = Demonstration::from_bytes(&bytes).unwrap();
    assert!(demo.is_finalized());
    assert!(demo.header().created_unix > 0);
    assert!(validate_replay(&demo, &cliff(4)).unwrap().is_exact());

    // the same name cannot be taken twice
    let again = s.session_create(&cliff(4), None).unwrap();
    for a in &correct {
        s.session_step(&again.session.session_id, &again.token, &ActionRef::Index(a.0)).unwrap();
    }
    assert!(matches!(s.session_save(&again.session.session_id, &again.token, "walk4"), Err(Error::Conflict(_))));
    s.demo_delete("walk4").unwrap();
    assert!(matches!(s.demo_get("walk4"), Err(Error::NotFound(_))));
}

#[test]
fn runs_are_checked_before_they_start() {
    let (_dir, s) = open();
    let no_demo = RunRequest { run_id: None, demo: None, config: quick_cliff_run(5) };
    assert!(matches!(s.run_start(no_demo), Err(Error::Validation(_))));
    let wrong = RunRequest { run_id: None, demo: Some(SHIPPED_DEMO_NAME.into()), config: quick_cliff_run(5) };
    assert!(matches!(s.run_start(wrong), Err(Error::Incompatible(_))));
    let missing = RunRequest { run_id: None, demo: Some("nope".into()), config: quick_cliff_run(5) };
    assert!(matches!(s.run_start(missing), Err(Error::NotFound(_))));
    let bad = RunRequest { run_id: Some("x".into()), demo: None, config: RunConfig { budget: 0, condition: Condition::FromStart, ..quick_cliff_run(5) } };
    assert!(matches!(s.run_start(bad), Err(Error::Validation(_))));
    assert!(matches!(s.run_status("ghost"), Err(Error::NotFound(_))));
}

#[test]
fn a_run_converges_and_persists_its_history() {
    let (dir, s) = open();
    record_cliff(&s, 6, "walk6");
    let view = s.run_start(RunRequest { run_id: Some("r1".into()), demo: Some("walk6".into()), config: quick_cliff_run(6) }).unwrap();
    assert_eq!(view.run_id, "r1");
    let done = s.run_wait("r1").unwrap();
    assert_eq!(done.state, RunState::Finished);
    let summary = done.summary.unwrap();
    assert!(summary.converged);
    assert_eq!(summary.reason, StopReason::Converged);
    assert!(matches!(
        s.run_start(RunRequest { run_id: Some("r1".into()), demo: Some("walk6".into()), config: quick_cliff_run(6) }),
        Err(Error::Conflict(_))
    ));
    let statuses = s.store().read_statuses("r1").unwrap();
    assert!(statuses.windows(2).all(|w| w[1].tau <= w[0].tau && w[1].iteration == w[0].iteration + 1));
    assert_eq!(statuses.last().unwrap().tau, 0);

    drop(s);
    let reopened = Service::open(dir.path()).unwrap();
    let view = reopened.run_status("r1").unwrap();
    assert_eq!(view.state, RunState::Finished);
    assert_eq!(view.latest.unwrap().iteration, summary.iterations);
    assert_eq!(reopened.run_list().unwrap().len(), 1);
    assert_eq!(reopened.demo_list().len(), 2);
}

#[test]
fn stopped_runs_resume_where_they_left_off() {
    let (_dir, s) = open();
    let config = RunConfig { condition: Condition::FromStart, target_return: Some(1.0), ..quick_cliff_run(16) };
    s.run_start(RunRequest { run_id: Some("long".into()), demo: None, config }).unwrap();
    let sub = s.run_subscribe("long").unwrap();
    let mut rx = sub.events.unwrap();
    let first = rx.blocking_recv().unwrap();
    let paused = s.run_stop("long").unwrap();
    assert_eq!(paused.state, RunState::Paused);
    let stopped_at = paused.summary.as_ref().unwrap().iterations;
    assert!(stopped_at >= first.iteration);
    assert!(matches!(s.run_request_stop("ghost"), Err(Error::NotFound(_))));

    let late = s.run_subscribe("long").unwrap();
    assert_eq!(late.last.as_ref().map(|l| l.iteration), Some(stopped_at));
    assert!(late.events.is_none());

    s.run_resume("long").unwrap();
    assert!(matches!(s.run_resume("long"), Err(Error::Conflict(_))));
    let mut rx = s.run_subscribe("long").unwrap().events.unwrap();
    let next = loop {
        let st = rx.blocking_recv().unwrap();
        if st.iteration > stopped_at {
            break st;
        }
    };
    assert_eq!(next.iteration, stopped_at + 1);
    assert!(next.live_steps > paused.summary.as_ref().unwrap().live_steps);
    let again = s.run_stop("long").unwrap();
    assert_eq!(again.state, RunState::Paused);
    let statuses = s.store().read_statuses("long").unwrap();
    assert!(statuses.windows(2).all(|w| w[1].iteration == w[0].iteration + 1));
}

// ---------------------------------------------------------------- HTTP

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn http_session_flow_and_error_mapping() {
    let (_dir, s) = open();
    let app = router(s);
    let (code, health) = call(&app, "GET", "/health", None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(health["status"], "ok");

    let env = serde_json::to_value(cliff(3)).unwrap();
    let (code, created) = call(&app, "POST", "/sessions", Some(json!({ "env": env }))).await;
    assert_eq!(code, StatusCode::OK);
    let id = created["session_id"].as_str().unwrap().to_owned();
    let token = created["token"].as_str().unwrap().to_owned();
    assert_eq!(created["action_names"], json!(["a0", "a1"]));

    let (code, err) = call(&app, "POST", &format!("/sessions/{id}/step"), Some(json!({ "token": "nope", "action": 0 }))).await;
    assert_eq!(code, StatusCode::CONFLICT);
    assert_eq!(err["error"]["kind"], "conflict");

    let (code, err) = call(&app, "POST", &format!("/sessions/{id}/save"), Some(json!({ "token": token, "name": "x" }))).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"]["kind"], "validation");

    for a in BlindCliffWalkConfig::seeded(3, 0).correct_actions() {
        let (code, step) = call(&app, "POST", &format!("/sessions/{id}/step"), Some(json!({ "token": token, "action": a.0 }))).await;
        assert_eq!(code, StatusCode::OK);
        assert!(step["reward"].is_number());
    }
    let (code, saved) = call(&app, "POST", &format!("/sessions/{id}/save"), Some(json!({ "token": token, "name": "three" }))).await;
    assert_eq!(code, StatusCode::OK, "{saved}");
    let (_, list) = call(&app, "GET", "/demos", None).await;
    assert_eq!(list.as_array().unwrap().len(), 2);
    let (code, demo) = call(&app, "GET", "/demos/three", None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(demo["total_return"], json!(1.0));

    let (code, err) = call(&app, "GET", "/demos/ghost", None).await;
    assert_eq!((code, err["error"]["kind"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));
    let (code, _) = call(&app, "DELETE", "/demos/three", None).await;
    assert_eq!(code, StatusCode::NO_CONTENT);

    let (code, err) = call(&app, "POST", "/runs", Some(json!({ "demo": SHIPPED_DEMO_NAME, "config": serde_json::to_value(quick_cliff_run(4)).unwrap() }))).await;
    assert_eq!((code, err["error"]["kind"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("incompatible")));
    let (code, err) = call(&app, "POST", "/sessions", Some(json!({ "env": { "env": "nothing" } }))).await;
    assert_eq!((code, err["error"]["kind"].as_str()), (StatusCode::BAD_REQUEST, Some("decode")));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn http_run_lifecycle() {
    let (_dir, s) = open();
    record_cliff(&s, 5, "walk5");
    let app = router(s.clone());
    let config = serde_json::to_value(quick_cliff_run(5)).unwrap();
    let (code, view) = call(&app, "POST", "/runs", Some(json!({ "run_id": "h1", "demo": "walk5", "config": config }))).await;
    assert_eq!(code, StatusCode::CREATED, "{view}");
    let s2 = s.clone();
    tokio::task::spawn_blocking(move || s2.run_wait("h1")).await.unwrap().unwrap();
    let (code, view) = call(&app, "GET", "/runs/h1", None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(view["state"], "finished");
    assert_eq!(view["summary"]["converged"], true);
    let (_, list) = call(&app, "GET", "/runs", None).await;
    assert_eq!(list.as_array().unwrap().len(), 1);
    let (code, view) = call(&app, "POST", "/runs/h1/stop", None).await;
    assert_eq!((code, view["state"].as_str()), (StatusCode::OK, Some("finished")));
}

// ----------------------------------------------------------- WebSocket

async fn spawn_server(s: Service) -> std::net::SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(backstep::service::http::serve(s, listener));
    addr
}

async fn next_json<S>(ws: &mut S) -> Option<Value>
where
    S: futures_util::Stream<Item = Result<Message, tokio_tungstenite::tungstenite::Error>> + Unpin,
{
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(60), ws.next()).await.ok()??.ok()?;
        match msg {
            Message::Text(t) => return Some(serde_json::from_str(&t).unwrap()),
            Message::Close(_) => return None,
            _ => continue,
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn session_socket_drives_the_recorder() {
    let (_dir, s) = open();
    let created = s.session_create(&cliff(4), None).unwrap();
    let id = created.session.session_id.clone();
    let addr = spawn_server(s.clone()).await;

    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/{id}/ws?token={}", created.token)).await.unwrap();
    let hello = next_json(&mut ws).await.unwrap();
    assert_eq!(hello["steps"], 0);
    let correct = BlindCliffWalkConfig::seeded(4, 0).correct_actions();
    ws.send(Message::text(json!({ "op": "step", "action": correct[0].0 }).to_string())).await.unwrap();
    assert_eq!(next_json(&mut ws).await.unwrap()["steps"], 1);
    ws.send(Message::text(json!({ "op": "rewind", "k": 1 }).to_string())).await.unwrap();
    assert_eq!(next_json(&mut ws).await.unwrap(), hello);
    ws.send(Message::text("{\"op\":\"fly\"}")).await.unwrap();
    assert_eq!(next_json(&mut ws).await.unwrap()["error"]["kind"], "validation");

    // a second client with a different token can watch but not drive
    let (mut other, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/{id}/ws?token=other")).await.unwrap();
    next_json(&mut other).await.unwrap();
    other.send(Message::text(json!({ "op": "step", "action": 0 }).to_string())).await.unwrap();
    assert_eq!(next_json(&mut other).await.unwrap()["error"]["kind"], "conflict");

    for a in &correct {
        ws.send(Message::text(json!({ "op": "step", "action": a.0 }).to_string())).await.unwrap();
        next_json(&mut ws).await.unwrap();
    }
    ws.send(Message::text(json!({ "op": "save", "name": "ws4" }).to_string())).await.unwrap();
    assert_eq!(next_json(&mut ws).await.unwrap()["saved"]["name"], "ws4");
    assert!(s.demo_get("ws4").is_ok());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn run_stream_reports_a_shrinking_curriculum() {
    let (_dir, s) = open();
    record_cliff(&s, 6, "walk6");
    let config = RunConfig {
        curriculum: CurriculumConfig { batch_steps: 16, workers: 4, ..CurriculumConfig::cliff_walk() },
        ..RunConfig::cliff_walk(6)
    };
    let addr = spawn_server(s.clone()).await;
    s.run_start(RunRequest { run_id: Some("ws-run".into()), demo: Some("walk6".into()), config }).unwrap();
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/runs/ws-run/stream")).await.unwrap();
    let mut taus = Vec::new();
    let end = loop {
        let ev = next_json(&mut ws).await.expect("stream ended without an end event");
        match ev["type"].as_str() {
            Some("status") => taus.push(ev["tau"].as_u64().unwrap()),
            Some("end") => break ev,
            other => panic!("unexpected event {other:?}"),
        }
    };
    assert_eq!(end["run"]["state"], "finished");
    assert!(!taus.is_empty());
    assert!(taus.windows(2).all(|w| w[1] <= w[0]), "{taus:?}");
    assert_eq!(*taus.last().unwrap(), 0);

    // a late subscriber still gets the final status before the end marker
    let (mut late, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/runs/ws-run/stream")).await.unwrap();
    let last = next_json(&mut late).await.unwrap();
    assert_eq!(last["type"], "status");
    assert_eq!(last["tau"], 0);
    assert_eq!(next_json(&mut late).await.unwrap()["type"], "end");
}

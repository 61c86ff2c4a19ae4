use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use futures::{SinkExt, StreamExt};
use http_body_util::BodyExt;
use tokio_tungstenite::tungstenite::Message as WsMessage;
use tower::ServiceExt;
use ttc_core::detectors::{MissMode, MissPolicy};
use ttc_core::engine::{run_episode, EngineConfig, EpisodeLog};
use ttc_core::oa::{OaConfig, OaParams};
use ttc_core::scenesim::{generate_scenario, ScenarioConfig};
use ttc_service::protocol::{AckPayload, Control, ErrorPayload, FramePayload};
use ttc_service::{router, CreateSession, Created, Hub, Message, MessageType, ScenarioEntry, SessionSpec};

fn scenario() -> ScenarioConfig {
    ScenarioConfig {
        name: "live".into(),
        seed: 21,
        frames: 12,
        entity_count: 10,
        ..ScenarioConfig::default()
    }
}

fn policy() -> MissPolicy {
    MissPolicy::new(
        MissMode::DistantMiss {
            range_m: 20.0,
            miss_rate: 0.8,
        },
        4,
    )
}

fn params() -> Arc<OaParams> {
    Arc::new(OaParams::init(OaConfig::default(), 9).unwrap())
}

fn spec(params: Arc<OaParams>) -> SessionSpec {
    SessionSpec {
        scenario: scenario(),
        policy: policy(),
        engine: EngineConfig {
            feedback: None,
            seed: 21,
            ..EngineConfig::default()
        },
        params: Some(params),
        fps: 2.0,
    }
}

fn hub() -> Hub {
    let entry = ScenarioEntry {
        name: "live".into(),
        config: scenario(),
        policy: policy(),
    };
    Hub::new(vec![entry], BTreeMap::from([("default".to_string(), params())]))
}

#[tokio::test]
async fn scripted_clicks_reproduce_offline_feedback() {
    let p = params();
    let s = generate_scenario(&scenario()).unwrap();
    let offline_cfg = EngineConfig {
        seed: 21,
        ..EngineConfig::default()
    };
    let offline = run_episode(&s, &policy(), Some(p.clone()), &offline_cfg).unwrap();
    assert!(!offline.feedback.is_empty());

    let hub = hub();
    let live = hub.get(hub.start(spec(p)).unwrap()).unwrap();
    for f in 0..scenario().frames {
        live.control(Control::Step).await.unwrap();
        for ev in offline.feedback.iter().filter(|e| e.frame == f) {
            let got = live.click(ev.frame, ev.click).await.unwrap();
            assert_eq!(got.prompt_id, ev.prompt_id);
            assert_eq!(got.resolved_box2d, ev.resolved_box2d);
        }
    }
    let log: EpisodeLog = live.log().await.unwrap();
    assert_eq!(log.detections(), offline.detections());
    assert_eq!(log.buffer_trace(), offline.buffer_trace());
}

fn code(e: &ttc_service::ServiceError) -> &'static str {
    e.code()
}

#[tokio::test]
async fn clicks_outside_staleness_window_are_rejected() {
    let hub = hub();
    let h = hub.get(hub.start(spec(params())).unwrap()).unwrap();
    assert_eq!(code(&h.click(0, [30.0, 30.0]).await.unwrap_err()), "stale_click");
    for _ in 0..3 {
        h.control(Control::Step).await.unwrap();
    }
    assert_eq!(code(&h.click(0, [30.0, 30.0]).await.unwrap_err()), "stale_click");
    assert_eq!(code(&h.click(3, [30.0, 30.0]).await.unwrap_err()), "stale_click");
    assert!(h.click(1, [30.0, 30.0]).await.is_ok());
    assert!(h.click(2, [30.0, 30.0]).await.is_ok());
    assert_eq!(code(&h.click(2, [-1.0, 3.0]).await.unwrap_err()), "click_outside_grid");
    assert_eq!(h.buffer().await.unwrap().entries.len(), 2);
}

#[tokio::test]
async fn pause_freezes_frames_but_accepts_clicks() {
    let hub = hub();
    let h = hub.get(hub.start(spec(params())).unwrap()).unwrap();
    assert!(h.playback().await.unwrap().paused);
    h.control(Control::SetSpeed { fps: 50.0 }).await.unwrap();
    h.control(Control::Resume).await.unwrap();
    tokio::time::sleep(Duration::from_millis(120)).await;
    let paused = h.control(Control::Pause).await.unwrap();
    assert!(paused.next_frame > 0);
    tokio::time::sleep(Duration::from_millis(120)).await;
    assert_eq!(h.playback().await.unwrap().next_frame, paused.next_frame);
    assert!(h.click(paused.next_frame - 1, [32.0, 32.0]).await.is_ok());
    assert!(h.control(Control::SetSpeed { fps: 0.0 }).await.is_err());
}

#[tokio::test]
async fn playback_stops_at_the_last_frame() {
    let hub = hub();
    let h = hub.get(hub.start(spec(params())).unwrap()).unwrap();
    h.control(Control::SetSpeed { fps: 60.0 }).await.unwrap();
    h.control(Control::Resume).await.unwrap();
    tokio::time::sleep(Duration::from_millis(600)).await;
    let p = h.playback().await.unwrap();
    assert_eq!(p.next_frame, p.total_frames);
    assert!(p.paused);
    assert_eq!(code(&h.control(Control::Step).await.unwrap_err()), "finished");
}

#[tokio::test]
async fn sessions_are_isolated() {
    let hub = hub();
    let a = hub.get(hub.start(spec(params())).unwrap()).unwrap();
    let b = hub.get(hub.start(spec(params())).unwrap()).unwrap();
    a.control(Control::Step).await.unwrap();
    b.control(Control::Step).await.unwrap();
    a.click(0, [32.0, 32.0]).await.unwrap();
    a.control(Control::Step).await.unwrap();
    b.control(Control::Step).await.unwrap();
    assert_eq!(a.buffer().await.unwrap().entries.len(), 1);
    assert!(b.buffer().await.unwrap().entries.is_empty());
    assert!(b.log().await.unwrap().feedback.is_empty());
    assert_eq!(hub.list().await.len(), 2);
}

#[tokio::test]
async fn concurrent_clicks_apply_in_some_sequential_order() {
    let hub = hub();
    let h = hub.get(hub.start(spec(params())).unwrap()).unwrap();
    h.control(Control::Step).await.unwrap();
    let mut tasks = Vec::new();
    for c in 0..3 {
        let h = h.clone();
        tasks.push(tokio::spawn(async move {
            let mut ids = Vec::new();
            for i in 0..4 {
                ids.push(h.click(0, [10.0 + 12.0 * c as f64, 8.0 + 10.0 * i as f64]).await.unwrap().prompt_id);
            }
            ids
        }));
    }
    let mut acked = Vec::new();
    for t in tasks {
        let ids = t.await.unwrap();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        acked.extend(ids);
    }
    let log = h.log().await.unwrap();
    let logged: Vec<u64> = log.feedback.iter().map(|e| e.prompt_id).collect();
    assert!(logged.windows(2).all(|w| w[0] < w[1]));
    acked.sort();
    assert_eq!(acked, logged);
}

#[tokio::test]
async fn frames_hide_truth_until_revealed() {
    let hub = hub();
    let h = hub.get(hub.start(spec(params())).unwrap()).unwrap();
    let mut rx = h.subscribe();
    h.control(Control::Step).await.unwrap();
    let m = rx.recv().await.unwrap();
    assert_eq!(m.kind, MessageType::Frame);
    assert_eq!(m.frame, Some(0));
    let p: FramePayload = m.payload_as().unwrap();
    assert!(p.truths.is_none());
    assert_eq!(p.playback.next_frame, 1);
    h.control(Control::ToggleTruthReveal).await.unwrap();
    let p: FramePayload = rx.recv().await.unwrap().payload_as().unwrap();
    assert!(!p.truths.unwrap().is_empty());
}

async fn next_text<S>(ws: &mut S) -> Message
where
    S: futures::Stream<Item = Result<WsMessage, tokio_tungstenite::tungstenite::Error>> + Unpin,
{
    loop {
        match tokio::time::timeout(Duration::from_secs(5), ws.next()).await.unwrap().unwrap().unwrap() {
            WsMessage::Text(t) => return serde_json::from_str(t.as_str()).unwrap(),
            _ => continue,
        }
    }
}

#[tokio::test]
async fn websocket_protocol_errors_leave_session_usable() {
    let hub = Arc::new(hub());
    let id = hub.create(&CreateSession {
        scenario: "live".into(),
        ..CreateSession::default()
    })
    .unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(hub.clone());
    tokio::spawn(async move { axum::serve(listener, app).await });
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/{id}/ws")).await.unwrap();

    let error_code = |m: &Message| m.payload_as::<ErrorPayload>().unwrap().code;
    for bad in [
        "garbage".to_string(),
        format!(r#"{{"type":"teleport","session":{id},"payload":{{}}}}"#),
        format!(r#"{{"type":"frame","session":{id},"payload":{{}}}}"#),
        format!(r#"{{"type":"control","session":{id},"payload":{{"command":"rewind"}}}}"#),
    ] {
        ws.send(WsMessage::Text(bad.into())).await.unwrap();
        let m = next_text(&mut ws).await;
        assert_eq!(m.kind, MessageType::Error);
        assert_eq!(error_code(&m), "protocol");
    }
    ws.send(WsMessage::Text(Message::new(MessageType::Control, id + 7, None, Control::Step).to_text().into()))
        .await
        .unwrap();
    assert_eq!(error_code(&next_text(&mut ws).await), "unknown_session");

    // still works: step, then click the displayed frame
    ws.send(WsMessage::Text(Message::new(MessageType::Control, id, None, Control::Step).to_text().into()))
        .await
        .unwrap();
    let mut kinds = vec![next_text(&mut ws).await, next_text(&mut ws).await];
    kinds.sort_by_key(|m| m.kind == MessageType::Frame);
    assert_eq!(kinds[0].kind, MessageType::Ack);
    assert_eq!(kinds[1].kind, MessageType::Frame);
    assert_eq!(kinds[1].frame, Some(0));

    let click = format!(r#"{{"type":"click","session":{id},"frame":0,"payload":{{"x":20.5,"y":31.0}},"note":"ignored"}}"#);
    ws.send(WsMessage::Text(click.into())).await.unwrap();
    let mut got = vec![next_text(&mut ws).await, next_text(&mut ws).await];
    got.sort_by_key(|m| m.kind == MessageType::Buffer);
    assert_eq!(got[0].kind, MessageType::Ack);
    assert!(matches!(got[0].payload_as::<AckPayload>().unwrap(), AckPayload::Click { prompt_id: 1, .. }));
    assert_eq!(got[1].kind, MessageType::Buffer);

    ws.send(WsMessage::Text(format!(r#"{{"type":"buffer","session":{id}}}"#).into())).await.unwrap();
    let m = next_text(&mut ws).await;
    assert_eq!(m.kind, MessageType::Buffer);
    assert_eq!(m.payload["entries"].as_array().unwrap().len(), 1);
    assert_eq!(hub.get(id).unwrap().info().await.unwrap().clients, 1);
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<serde_json::Value>) -> (StatusCode, serde_json::Value) {
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
    (status, serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null))
}

#[tokio::test]
async fn rest_endpoints_create_list_and_replay() {
    let hub = Arc::new(hub());
    let app = router(hub.clone());
    let (s, v) = call(&app, "GET", "/scenarios", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v[0]["name"], "live");

    let (s, v) = call(&app, "POST", "/sessions", Some(serde_json::json!({"scenario": "nowhere"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "unknown_scenario");

    let (s, v) = call(&app, "POST", "/sessions", Some(serde_json::json!({"scenario": "live", "seed": 5}))).await;
    assert_eq!(s, StatusCode::OK);
    let created: Created = serde_json::from_value(v).unwrap();
    hub.get(created.session).unwrap().control(Control::Step).await.unwrap();

    let (_, v) = call(&app, "GET", "/sessions", None).await;
    assert_eq!(v.as_array().unwrap().len(), 1);
    assert_eq!(v[0]["seed"], 5);
    let (s, v) = call(&app, "GET", &format!("/sessions/{}/log", created.session), None).await;
    assert_eq!(s, StatusCode::OK);
    let log: EpisodeLog = serde_json::from_value(v).unwrap();
    assert_eq!(log.frames.len(), 1);
    assert_eq!(log.scenario.seed, 5);
    let (s, _) = call(&app, "GET", &format!("/sessions/{}/buffer", created.session), None).await;
    assert_eq!(s, StatusCode::OK);

    let (s, v) = call(&app, "GET", "/sessions/999/log", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "unknown_session");
    let (s, _) = call(&app, "DELETE", &format!("/sessions/{}", created.session), None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    assert!(hub.get(created.session).is_err());
}

use std::sync::Arc;
use std::time::Duration;

use chronochat_core::dataset::import_conversations;
use chronochat_service::{router, AppState, ServiceConfig};
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};

struct Server {
    base: String,
    state: Arc<AppState>,
    task: tokio::task::JoinHandle<()>,
}

impl Drop for Server {
    fn drop(&mut self) {
        self.task.abort();
    }
}

async fn start(dir: &std::path::Path) -> Server {
    let mut config = ServiceConfig::new(dir);
    config.poll_wait = Duration::from_millis(300);
    let state = AppState::open(&config).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let app = router(state.clone());
    let task = tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    Server { base, state, task }
}

async fn post(client: &Client, url: String, body: Value) -> (StatusCode, Value) {
    let resp = client.post(url).json(&body).send().await.unwrap();
    let status = resp.status();
    (status, resp.json().await.unwrap())
}

async fn get(client: &Client, url: String) -> (StatusCode, Value) {
    let resp = client.get(url).send().await.unwrap();
    let status = resp.status();
    (status, resp.json().await.unwrap())
}

async fn create(client: &Client, base: &str, body: Value) -> String {
    let (status, v) = post(client, format!("{base}/rooms"), body).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    v["room_id"].as_str().unwrap().to_string()
}

async fn join(client: &Client, base: &str, room: &str, name: &str) -> (StatusCode, Value) {
    post(client, format!("{base}/rooms/{room}/join"), json!({ "display_name": name })).await
}

async fn say(client: &Client, base: &str, room: &str, token: &str, text: &str) -> (StatusCode, Value) {
    post(client, format!("{base}/rooms/{room}/utterances"), json!({ "token": token, "text": text })).await
}

async fn two_joined(client: &Client, base: &str, body: Value) -> (String, String, String) {
    let room = create(client, base, body).await;
    let (_, a) = join(client, base, &room, "ann").await;
    let (_, b) = join(client, base, &room, "bo").await;
    (room, a["token"].as_str().unwrap().into(), b["token"].as_str().unwrap().into())
}

#[tokio::test]
async fn three_session_room_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path()).await;
    let (c, base) = (Client::new(), server.base.clone());

    let room = create(&c, &base, json!({ "seed": 5 })).await;
    let (status, a) = join(&c, &base, &room, "ann").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(a["speaker"], "A");
    assert_eq!(a["state"]["phase"], "WaitingForPartner");
    assert!(!a["initial_events"].as_array().unwrap().is_empty());
    let (_, b) = join(&c, &base, &room, "bo").await;
    assert_eq!(b["state"]["phase"], "InSession");
    assert!(!b["initial_events"].as_array().unwrap().is_empty());
    let (status, full) = join(&c, &base, &room, "cy").await;
    assert_eq!((status, full["error"].as_str()), (StatusCode::CONFLICT, Some("RoomFull")));
    let ta = a["token"].as_str().unwrap().to_string();
    let tb = b["token"].as_str().unwrap().to_string();

    for session in 1..=3u64 {
        let mut last_seq = None;
        for i in 0..20 {
            let token = if i % 2 == 0 { &ta } else { &tb };
            let (status, r) = say(&c, &base, &room, token, &format!("message {i}")).await;
            assert_eq!(status, StatusCode::OK, "{r}");
            let seq = r["seq"].as_u64().unwrap();
            if let Some(prev) = last_seq {
                assert_eq!(seq, prev + 1);
            }
            last_seq = Some(seq);
            assert_eq!(r["end_session_available"], i == 19);
            if i == 16 {
                assert_eq!(r["end_session_hint"], "3 more messages needed");
            }
            if i == 18 {
                let (status, e) = post(&c, format!("{base}/rooms/{room}/end-session"), json!({ "token": tb })).await;
                assert_eq!(status, StatusCode::CONFLICT);
                assert_eq!(e["error"], "TooFewUtterances");
                assert_eq!(e["remaining_utterances"], 1);
            }
        }
        let (status, end) = post(&c, format!("{base}/rooms/{room}/end-session"), json!({ "token": tb })).await;
        assert_eq!(status, StatusCode::OK, "{end}");
        if session < 3 {
            assert_eq!(end["phase"], "BetweenSessions");
            assert!(end["gap"].is_string());
            assert!(end["updates"]["card_lines"].is_array());
            let (status, e) = say(&c, &base, &room, &ta, "too early").await;
            assert_eq!((status, e["error"].as_str()), (StatusCode::CONFLICT, Some("WrongPhase")));
            let (_, view) = get(&c, format!("{base}/rooms/{room}/state?token={ta}")).await;
            assert_eq!(view["me"]["pending_updates"]["gap"], end["gap"]);
            for t in [&ta, &tb] {
                let (status, r) = post(&c, format!("{base}/rooms/{room}/start-session"), json!({ "token": t })).await;
                assert_eq!(status, StatusCode::OK, "{r}");
            }
            let (_, view) = get(&c, format!("{base}/rooms/{room}/state")).await;
            assert_eq!(view["phase"], "InSession");
            assert_eq!(view["session_index"], session + 1);
            assert_eq!(view["last_gap"], end["gap"]);
        } else {
            assert_eq!(end["phase"], "Completed");
            assert_eq!(end["conversation_id"], room.as_str());
        }
    }

    let (_, polled) = get(&c, format!("{base}/rooms/{room}/events?since=0&token={ta}&wait=0")).await;
    let kinds: Vec<&str> = polled["events"].as_array().unwrap().iter().map(|e| e["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds.last(), Some(&"completed"));
    assert_eq!(kinds.iter().filter(|k| **k == "session_ended").count(), 3);

    let (convs, report) = import_conversations(server.state.store().conversations_path()).unwrap();
    assert!(report.issues.is_empty());
    assert_eq!(convs.len(), 1);
    convs[0].validate().unwrap();
    assert_eq!(convs[0].id, room);
    assert_eq!(convs[0].sessions.len(), 3);
    assert!(convs[0].sessions.iter().all(|s| s.utterances.len() == 20));
}

#[tokio::test]
async fn error_responses() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path()).await;
    let (c, base) = (Client::new(), server.base.clone());

    let (status, e) = post(&c, format!("{base}/rooms"), json!({ "seed": 1, "num_sessions": 6 })).await;
    assert_eq!((status, e["error"].as_str()), (StatusCode::BAD_REQUEST, Some("BadConfig")));
    let (status, e) = post(&c, format!("{base}/rooms"), json!({ "num_sessions": 3 })).await;
    assert_eq!((status, e["error"].as_str()), (StatusCode::BAD_REQUEST, Some("BadConfig")));
    let (status, e) = post(&c, format!("{base}/rooms"), json!({ "seed": 1, "pool": "/no/such/pool.json" })).await;
    assert_eq!((status, e["error"].as_str()), (StatusCode::BAD_REQUEST, Some("BadConfig")));
    let (status, e) = join(&c, &base, "nope", "x").await;
    assert_eq!((status, e["error"].as_str()), (StatusCode::NOT_FOUND, Some("NoSuchRoom")));

    let room = create(&c, &base, json!({ "seed": 1 })).await;
    let (_, a) = join(&c, &base, &room, "ann").await;
    let ta = a["token"].as_str().unwrap();
    let (status, e) = say(&c, &base, &room, ta, "hello").await;
    assert_eq!((status, e["error"].as_str()), (StatusCode::CONFLICT, Some("WrongPhase")));
    join(&c, &base, &room, "bo").await;
    let (status, e) = say(&c, &base, &room, "forged", "hello").await;
    assert_eq!((status, e["error"].as_str()), (StatusCode::UNAUTHORIZED, Some("InvalidToken")));
    let (status, e) = say(&c, &base, &room, ta, "   ").await;
    assert_eq!((status, e["error"].as_str()), (StatusCode::BAD_REQUEST, Some("EmptyText")));
    let (status, e) = get(&c, format!("{base}/rooms/{room}/events?since=0&token=forged")).await;
    assert_eq!((status, e["error"].as_str()), (StatusCode::UNAUTHORIZED, Some("InvalidToken")));

    // Bearer header works in place of a body token.
    let resp = c
        .post(format!("{base}/rooms/{room}/utterances"))
        .bearer_auth(ta)
        .json(&json!({ "text": "via header" }))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
}

#[tokio::test]
async fn short_gap_shows_no_significant_progress() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path()).await;
    let (c, base) = (Client::new(), server.base.clone());
    let (room, ta, tb) = two_joined(
        &c,
        &base,
        json!({ "seed": 3, "min_utterances": 2, "gaps": ["10 minutes", "10 minutes"] }),
    )
    .await;
    say(&c, &base, &room, &ta, "hi").await;
    say(&c, &base, &room, &tb, "hello").await;
    let (status, end) = post(&c, format!("{base}/rooms/{room}/end-session"), json!({ "token": ta })).await;
    assert_eq!(status, StatusCode::OK, "{end}");
    assert_eq!(end["gap"], "10 minutes");
    let lines: Vec<String> = end["updates"]["card_lines"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l.as_str().unwrap().to_string())
        .collect();
    assert!(lines.iter().any(|l| l.contains("No significant progress.")), "{lines:?}");
}

#[tokio::test]
async fn views_hide_partner_events() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path()).await;
    let (c, base) = (Client::new(), server.base.clone());
    let (room, ta, tb) = two_joined(&c, &base, json!({ "seed": 8, "min_utterances": 1 })).await;

    let (_, va) = get(&c, format!("{base}/rooms/{room}/state?token={ta}")).await;
    let (_, vb) = get(&c, format!("{base}/rooms/{room}/state?token={tb}")).await;
    assert_eq!(va["me"]["speaker"], "A");
    assert_eq!(vb["me"]["speaker"], "B");
    let (_, public) = get(&c, format!("{base}/rooms/{room}/state")).await;
    assert!(public.get("me").is_none());

    let (_, ev) = get(&c, format!("{base}/rooms/{room}/events?since=0&token={tb}&wait=0")).await;
    let events = ev["events"].as_array().unwrap();
    assert_eq!(events.len(), 2);
    assert_eq!(events[0]["redacted"], true);
    assert!(events[0].get("private").is_none());
    assert!(events[1]["private"]["initial_cards"].is_array());
    let raw = ev.to_string();
    assert!(!raw.contains(&ta) && !raw.contains(&tb));

    say(&c, &base, &room, &ta, "hi").await;
    post(&c, format!("{base}/rooms/{room}/end-session"), json!({ "token": ta })).await;
    let (_, ev) = get(&c, format!("{base}/rooms/{room}/events?since=3&token={tb}&wait=0")).await;
    let ended = &ev["events"][0];
    assert_eq!(ended["kind"], "session_ended");
    let theirs = ended["private"].clone();
    let (_, vb) = get(&c, format!("{base}/rooms/{room}/state?token={tb}")).await;
    assert_eq!(vb["me"]["pending_updates"]["card_lines"], theirs["card_lines"]);
}

#[tokio::test]
async fn empty_poll_waits_then_returns_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path()).await;
    let (c, base) = (Client::new(), server.base.clone());
    let room = create(&c, &base, json!({ "seed": 2 })).await;
    let (_, a) = join(&c, &base, &room, "ann").await;
    let ta = a["token"].as_str().unwrap();
    let (_, ev) = get(&c, format!("{base}/rooms/{room}/events?since=0&token={ta}")).await;
    assert_eq!(ev["events"].as_array().unwrap().len(), 1);
    let started = std::time::Instant::now();
    let (_, ev) = get(&c, format!("{base}/rooms/{room}/events?since=1&token={ta}")).await;
    assert!(started.elapsed() >= Duration::from_millis(250));
    assert!(ev["events"].as_array().unwrap().is_empty());
    assert_eq!(ev["seq"], 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_pollers_see_one_order() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path()).await;
    let c = Client::new();
    let base = server.base.clone();
    let (room, ta, tb) = two_joined(&c, &base, json!({ "seed": 4 })).await;
    const PER_POSTER: u64 = 25;
    let target = 2 + 2 * PER_POSTER;

    let poller = |token: String| {
        let (c, base, room) = (c.clone(), base.clone(), room.clone());
        tokio::spawn(async move {
            let mut seen: Vec<(u64, String)> = Vec::new();
            let mut since = 0;
            while since < target {
                let (_, ev) = get(&c, format!("{base}/rooms/{room}/events?since={since}&token={token}&wait=2")).await;
                for e in ev["events"].as_array().unwrap() {
                    let seq = e["seq"].as_u64().unwrap();
                    seen.push((seq, e["payload"]["text"].as_str().unwrap_or("").to_string()));
                    since = seq;
                }
            }
            seen
        })
    };
    let pa = poller(ta.clone());
    let pb = poller(tb.clone());
    let poster = |token: String, tag: &'static str| {
        let (c, base, room) = (c.clone(), base.clone(), room.clone());
        tokio::spawn(async move {
            for i in 0..PER_POSTER {
                let (status, _) = say(&c, &base, &room, &token, &format!("{tag}{i}")).await;
                assert_eq!(status, StatusCode::OK);
            }
        })
    };
    let (x, y) = (poster(ta, "a"), poster(tb, "b"));
    x.await.unwrap();
    y.await.unwrap();
    let (sa, sb) = (pa.await.unwrap(), pb.await.unwrap());
    assert_eq!(sa, sb);
    let seqs: Vec<u64> = sa.iter().map(|(s, _)| *s).collect();
    assert_eq!(seqs, (1..=target).collect::<Vec<_>>());
}

#[tokio::test]
async fn restart_replays_to_identical_state() {
    let dir = tempfile::tempdir().unwrap();
    let (room, ta, before_a, before_b, before_events);
    {
        let server = start(dir.path()).await;
        let (c, base) = (Client::new(), server.base.clone());
        let (r, a, b) = two_joined(&c, &base, json!({ "seed": 6, "min_utterances": 3 })).await;
        for i in 0..3 {
            say(&c, &base, &r, if i % 2 == 0 { &a } else { &b }, &format!("s1 {i}")).await;
        }
        post(&c, format!("{base}/rooms/{r}/end-session"), json!({ "token": a })).await;
        post(&c, format!("{base}/rooms/{r}/start-session"), json!({ "token": b })).await;
        post(&c, format!("{base}/rooms/{r}/start-session"), json!({ "token": a })).await;
        say(&c, &base, &r, &b, "after the gap").await;
        before_a = get(&c, format!("{base}/rooms/{r}/state?token={a}")).await.1;
        before_b = get(&c, format!("{base}/rooms/{r}/state?token={b}")).await.1;
        before_events = get(&c, format!("{base}/rooms/{r}/events?since=0&token={a}&wait=0")).await.1;
        (room, ta) = (r, a);
    }
    // A crash mid-write leaves a torn final line.
    let log = dir.path().join("rooms").join(&room).join("events.log");
    let mut text = std::fs::read_to_string(&log).unwrap();
    text.push_str("{\"seq\":99,\"kind\":\"utter");
    std::fs::write(&log, text).unwrap();

    let server = start(dir.path()).await;
    let (c, base) = (Client::new(), server.base.clone());
    let after_a = get(&c, format!("{base}/rooms/{room}/state?token={ta}")).await.1;
    assert_eq!(after_a, before_a);
    let after_events = get(&c, format!("{base}/rooms/{room}/events?since=0&token={ta}&wait=0")).await.1;
    assert_eq!(after_events, before_events);
    assert_eq!(before_b["me"]["speaker"], "B");
    let (status, r) = say(&c, &base, &room, &ta, "still going").await;
    assert_eq!(status, StatusCode::OK, "{r}");
    assert_eq!(r["seq"], before_a["seq"].as_u64().unwrap() + 1);
}

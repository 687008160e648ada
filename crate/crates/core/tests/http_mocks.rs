use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use coldstart_core::embed::{embed, EmbeddingProvider, HttpEmbedder, HttpEmbedderConfig};
use coldstart_core::gateway::{ChatClient, RemoteChatClient, RemoteChatConfig};
use coldstart_core::prompt::{PromptBundle, PromptKind, PromptMetadata};
use coldstart_core::{AdRecord, Error, Lifecycle};
use serde_json::{json, Value};

#[derive(Default)]
struct Mock {
    hits: AtomicUsize,
    fail_first: usize,
    status: u16,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    delay_ms: u64,
    bodies: Mutex<Vec<Value>>,
    auth: Mutex<Vec<Option<String>>>,
}

/// Serves `router` on an ephemeral port from a background runtime.
fn spawn(router: Router) -> SocketAddr {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router).await.unwrap();
        });
    });
    rx.recv_timeout(Duration::from_secs(10)).unwrap()
}

async fn admit(mock: &Mock, headers: &HeaderMap, body: Value) -> Option<StatusCode> {
    let n = mock.hits.fetch_add(1, Ordering::SeqCst);
    mock.bodies.lock().unwrap().push(body);
    mock.auth
        .lock()
        .unwrap()
        .push(headers.get("authorization").map(|v| v.to_str().unwrap().to_owned()));
    let now = mock.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    mock.peak.fetch_max(now, Ordering::SeqCst);
    tokio::time::sleep(Duration::from_millis(mock.delay_ms)).await;
    mock.in_flight.fetch_sub(1, Ordering::SeqCst);
    (n < mock.fail_first).then(|| StatusCode::from_u16(mock.status).unwrap())
}

async fn embed_handler(State(mock): State<Arc<Mock>>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    if let Some(code) = admit(&mock, &headers, body.clone()).await {
        return (code, Json(json!({"error": "busy"})));
    }
    let len = body["title"].as_str().unwrap().len() as f64;
    (StatusCode::OK, Json(json!({"vector": [len, 1.0, if body.get("image_b64").is_some() { 1.0 } else { 0.0 }]})))
}

async fn chat_handler(State(mock): State<Arc<Mock>>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    if let Some(code) = admit(&mock, &headers, body.clone()).await {
        return (code, Json(json!({"error": {"message": "try later"}})));
    }
    let content = format!(r#"```json
{{"sports": 0.25, "travel": -0.5, "seed": {}}}
```"#, body["seed"]);
    (StatusCode::OK, Json(json!({"choices": [{"message": {"role": "assistant", "content": content}}]})))
}

fn chat_server(mock: Mock) -> (Arc<Mock>, String) {
    let mock = Arc::new(mock);
    let addr = spawn(Router::new().route("/v1/chat/completions", post(chat_handler)).with_state(Arc::clone(&mock)));
    (mock, format!("http://{addr}/v1/chat/completions"))
}

fn bundle() -> PromptBundle {
    PromptBundle {
        system_text: "You are a CTR model.".into(),
        user_text: "Ad: hiking boots".into(),
        format_text: "Answer in JSON.".into(),
        image_refs: vec!["images/ad0001.png".into()],
        feature_batch: vec!["sports".into(), "travel".into()],
        metadata: PromptMetadata {
            kind: PromptKind::Weights,
            ad_id: Some("ad0001".into()),
            shot_count: 0,
            with_image: true,
            template_version: "t".into(),
        },
    }
}

fn chat_config(endpoint: String) -> RemoteChatConfig {
    RemoteChatConfig { endpoint, timeout_secs: 5, retries: 2, ..RemoteChatConfig::default() }
}

#[test]
fn chat_client_retries_server_errors_and_reads_content() {
    let (mock, url) = chat_server(Mock { fail_first: 2, status: 503, ..Mock::default() });
    std::env::set_var("MOCK_CHAT_KEY", "s3cret");
    let client = RemoteChatClient::new(RemoteChatConfig {
        api_key_env: Some("MOCK_CHAT_KEY".into()),
        multimodal: true,
        ..chat_config(url)
    })
    .unwrap();
    let reply = client.complete(&bundle(), 0.5, Some(77)).unwrap();
    assert!(reply.contains(r#""seed": 77"#));
    assert_eq!(mock.hits.load(Ordering::SeqCst), 3);
    assert!(mock.auth.lock().unwrap().iter().all(|a| a.as_deref() == Some("Bearer s3cret")));

    let body = mock.bodies.lock().unwrap()[0].clone();
    assert_eq!(body["temperature"], 0.5);
    assert_eq!(body["messages"][0]["role"], "system");
    let parts = body["messages"][1]["content"].as_array().unwrap();
    assert_eq!(parts[0]["type"], "text");
    assert!(parts[0]["text"].as_str().unwrap().ends_with("Answer in JSON."));
    assert_eq!(parts[1]["image_url"]["url"], "images/ad0001.png");
}

#[test]
fn chat_client_gives_up_and_does_not_retry_client_errors() {
    let (mock, url) = chat_server(Mock { fail_first: 100, status: 500, ..Mock::default() });
    let client = RemoteChatClient::new(RemoteChatConfig { retries: 1, ..chat_config(url) }).unwrap();
    assert!(matches!(client.complete(&bundle(), 0.0, None), Err(Error::Transport(_))));
    assert_eq!(mock.hits.load(Ordering::SeqCst), 2);

    let (mock, url) = chat_server(Mock { fail_first: 100, status: 401, ..Mock::default() });
    let client = RemoteChatClient::new(chat_config(url)).unwrap();
    assert!(matches!(client.complete(&bundle(), 0.0, None), Err(Error::Transport(_))));
    assert_eq!(mock.hits.load(Ordering::SeqCst), 1);

    let closed = RemoteChatClient::new(RemoteChatConfig { retries: 0, ..chat_config("http://127.0.0.1:9/v1".into()) }).unwrap();
    assert!(matches!(closed.complete(&bundle(), 0.0, None), Err(Error::Transport(_))));

    assert!(matches!(
        RemoteChatClient::new(RemoteChatConfig { api_key_env: Some("SURELY_UNSET_KEY_VAR".into()), ..RemoteChatConfig::default() }),
        Err(Error::Config(_))
    ));
}

#[test]
fn chat_client_bounds_concurrency() {
    let (mock, url) = chat_server(Mock { delay_ms: 40, ..Mock::default() });
    let client = Arc::new(RemoteChatClient::new(RemoteChatConfig { max_in_flight: 2, ..chat_config(url) }).unwrap());
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let c = Arc::clone(&client);
            std::thread::spawn(move || c.complete(&bundle(), 0.0, Some(i)).unwrap())
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(mock.hits.load(Ordering::SeqCst), 8);
    assert!(mock.peak.load(Ordering::SeqCst) <= 2);
}

#[test]
fn http_embedder_round_trip_with_image_and_retry() {
    let mock = Arc::new(Mock { fail_first: 1, status: 502, ..Mock::default() });
    let addr = spawn(Router::new().route("/embed", post(embed_handler)).with_state(Arc::clone(&mock)));
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    std::fs::write(dir.path().join("images/a.png"), [0x89, b'P', b'N', b'G']).unwrap();
    let e = HttpEmbedder::new(HttpEmbedderConfig {
        endpoint: format!("http://{addr}/"),
        dimension: 3,
        timeout_secs: 5,
        retries: 2,
        image_root: Some(dir.path().to_path_buf()),
    });
    let mut ad = AdRecord::new("a", "hiking boots", "boots on a trail", Lifecycle::Active).unwrap();
    ad.image_ref = Some("images/a.png".into());
    let r = embed(&ad, &e).unwrap();
    assert_eq!(r.vector, [12.0, 1.0, 1.0]);
    assert_eq!(r.provider_tag, e.tag());
    let sent = mock.bodies.lock().unwrap().last().cloned().unwrap();
    assert_eq!(sent["image_b64"], "iVBORw==");
    assert_eq!(sent["caption"], "boots on a trail");

    let wrong_dim = HttpEmbedder::new(HttpEmbedderConfig {
        endpoint: format!("http://{addr}"),
        dimension: 4,
        timeout_secs: 5,
        retries: 0,
        image_root: None,
    });
    assert!(matches!(embed(&ad, &wrong_dim), Err(Error::Schema(_))));
}

//! The HTTP backend against a local stand-in server.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use rkt_core::gateway::prompts::PromptSet;
use rkt_core::gateway::{
    Gateway, GatewayConfig, GatewayError, RemoteBackend, RemoteConfig, RetryPolicy, SubCondition,
};
use serde_json::{json, Value};

/// Request bodies with their authorization header.
type Seen = Arc<std::sync::Mutex<Vec<(Value, Option<String>)>>>;

#[derive(Clone)]
struct Script {
    calls: Arc<AtomicUsize>,
    bodies: Seen,
    /// One response per call; the last repeats.
    replies: Arc<Vec<(StatusCode, String)>>,
}

fn chat(content: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

async fn handler(
    State(s): State<Script>,
    headers: HeaderMap,
    Json(body): Json<Value>,
) -> (StatusCode, String) {
    let auth = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .map(String::from);
    s.bodies.lock().unwrap().push((body, auth));
    let i = s.calls.fetch_add(1, Ordering::SeqCst);
    s.replies[i.min(s.replies.len() - 1)].clone()
}

async fn serve(replies: Vec<(StatusCode, String)>) -> (String, Script) {
    let script = Script {
        calls: Arc::new(AtomicUsize::new(0)),
        bodies: Arc::default(),
        replies: Arc::new(replies),
    };
    let app = Router::new()
        .route("/v1/chat/completions", post(handler))
        .with_state(script.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}/v1"), script)
}

fn gateway(base: String) -> Gateway {
    let backend = RemoteBackend::new(
        RemoteConfig {
            api_base: base,
            api_key: "test-key".into(),
            model: "stand-in".into(),
            temperature: 0.0,
        },
        PromptSet::default(),
    )
    .unwrap();
    Gateway::new(
        Arc::new(backend),
        GatewayConfig {
            retry: RetryPolicy {
                base_delay: Duration::from_millis(5),
                ..RetryPolicy::default()
            },
            rate_limit: None,
            ..GatewayConfig::default()
        },
    )
}

const VALID_SSR: &str = r#"{"fulfilled": 1, "matched_level": 0, "lqap": 0.9, "related_content": "layers", "reason": "Covers the layers."}"#;

#[tokio::test]
async fn malformed_twice_then_valid_takes_three_attempts() {
    let (base, script) = serve(vec![
        (StatusCode::OK, chat("I think the answer is fine")),
        (StatusCode::OK, chat(r#"{"fulfilled": 1}"#)),
        (StatusCode::OK, chat(VALID_SSR)),
    ])
    .await;
    let gw = gateway(base);
    let verdict = gw
        .ssr(
            "It stacks encoder layers.",
            "Explain the architecture.",
            &[SubCondition::new("Detailed", 1.0)],
        )
        .await
        .unwrap();
    assert_eq!(verdict.fulfilled, 1.0);
    assert_eq!(verdict.matched_level_index, Some(0));
    assert_eq!(gw.attempts_made(), 3);
    assert_eq!(script.calls.load(Ordering::SeqCst), 3);

    let bodies = script.bodies.lock().unwrap();
    let (body, auth) = &bodies[0];
    assert_eq!(auth.as_deref(), Some("Bearer test-key"));
    assert_eq!(body["model"], "stand-in");
    assert_eq!(body["response_format"]["type"], "json_object");
    let user = body["messages"][1]["content"].as_str().unwrap();
    assert!(user.contains("Explain the architecture."));
    assert!(user.contains("It stacks encoder layers."));
}

#[tokio::test]
async fn server_errors_and_rate_limits_are_retried() {
    let (base, script) = serve(vec![
        (StatusCode::SERVICE_UNAVAILABLE, String::new()),
        (StatusCode::TOO_MANY_REQUESTS, String::new()),
        (
            StatusCode::OK,
            chat(r#"{"rules": ["Define overfitting."]}"#),
        ),
    ])
    .await;
    let gw = gateway(base);
    assert_eq!(
        gw.ctm("Define overfitting.").await.unwrap(),
        vec!["Define overfitting."]
    );
    assert_eq!(script.calls.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn client_errors_are_fatal() {
    let (base, script) = serve(vec![(StatusCode::UNAUTHORIZED, "bad key".into())]).await;
    let gw = gateway(base);
    let err = gw.ctm("Define overfitting.").await.unwrap_err();
    assert!(matches!(err, GatewayError::Fatal { .. }), "{err:?}");
    assert_eq!(script.calls.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn persistent_garbage_exhausts_the_budget() {
    let (base, script) = serve(vec![(StatusCode::OK, chat(r#"{"segment": 3}"#))]).await;
    let gw = gateway(base);
    let err = gw
        .segment_answer("Some answer.", "A rule")
        .await
        .unwrap_err();
    assert!(
        matches!(err, GatewayError::Exhausted { attempts: 3, .. }),
        "{err:?}"
    );
    assert_eq!(script.calls.load(Ordering::SeqCst), 3);
}

/// Talks to the configured real endpoint; skipped unless a key is present.
#[tokio::test]
async fn live_endpoint_smoke() {
    let Ok(config) = RemoteConfig::from_env() else {
        eprintln!("skipping live smoke test: RATAS_API_KEY is not set");
        return;
    };
    let gw = Gateway::new(
        Arc::new(RemoteBackend::new(config, PromptSet::default()).unwrap()),
        GatewayConfig::default(),
    );
    let rules = gw
        .ctm("The response must define overfitting and explain one way to prevent it.")
        .await
        .unwrap();
    assert!(!rules.is_empty());
    let levels = [
        SubCondition::new("Precise definition and a concrete prevention method", 1.0),
        SubCondition::new("Vague definition", 0.5),
    ];
    let assigned = gw.csc(&rules, &levels).await.unwrap();
    assert_eq!(assigned.len(), rules.len());
    let verdict = gw
        .ssr(
            "Overfitting is when a model memorizes training noise. Early stopping helps prevent it.",
            &rules[0],
            &levels,
        )
        .await
        .unwrap();
    assert!(!verdict.reason_text.is_empty());
}

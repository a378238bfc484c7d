use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::Value;
use zoomtrace::policy::{GenerateParams, PolicyClient, PolicyError};
use zoomtrace::remote::{ChatClient, EndpointConfig, RemotePolicy};
use zoomtrace::toolbox::{ImageStore, RasterImage};
use zoomtrace::trajectory::{ContentPart, Message, Role, StateView};

/// Serves the given (status, body) pairs in order, one per connection, and
/// records each request body.
fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Value>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut req = vec![0; len];
            reader.read_exact(&mut req).unwrap();
            log.lock().unwrap().push(serde_json::from_slice(&req).unwrap());
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen)
}

fn cfg(url: String) -> EndpointConfig {
    EndpointConfig {
        url,
        backoff_base_ms: 1,
        backoff_max_ms: 4,
        timeout_ms: 5_000,
        ..EndpointConfig::default()
    }
}

fn view() -> (StateView, ImageStore) {
    let mut store = ImageStore::new();
    store.insert(RasterImage::filled("in", 8, 8, [0, 0, 0]));
    store.insert(RasterImage::filled("in/zoom[0, 0, 4, 4]", 4, 4, [9, 9, 9]));
    let v = StateView {
        messages: vec![
            Message::text(Role::System, "sys"),
            Message {
                role: Role::User,
                content: vec![
                    ContentPart::Image { image_ref: "in".into() },
                    ContentPart::Text { text: "q".into() },
                ],
            },
            Message::text(Role::Assistant, "<think>z</think><tool_call>{}</tool_call>"),
            Message {
                role: Role::ToolObservation,
                content: vec![
                    ContentPart::Text { text: "crop".into() },
                    ContentPart::Image {
                        image_ref: "in/zoom[0, 0, 4, 4]".into(),
                    },
                ],
            },
        ],
    };
    (v, store)
}

const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"<think>red</think><answer>red"}}],"usage":{"completion_tokens":7}}"#;

#[test]
fn retries_server_errors_then_succeeds() {
    let (url, seen) = serve(vec![
        (500, "{}".into()),
        (503, "{}".into()),
        (200, OK.into()),
    ]);
    let client = ChatClient::new(cfg(url)).unwrap();
    let (v, store) = view();
    let params = GenerateParams {
        stop: vec!["</tool_call>".into(), "</answer>".into()],
        seed: Some(3),
        ..GenerateParams::default()
    };
    let g = client.complete(&v, &store, &params).unwrap();
    assert_eq!(g.text, "<think>red</think><answer>red");
    assert_eq!((g.token_len, g.estimated, g.retries), (7, false, 2));
    let reqs = seen.lock().unwrap();
    assert_eq!(reqs.len(), 3);
    let msgs = reqs[2]["messages"].as_array().unwrap();
    let roles: Vec<&str> = msgs.iter().map(|m| m["role"].as_str().unwrap()).collect();
    assert_eq!(roles, ["system", "user", "assistant", "user"]);
    assert_eq!(msgs[3]["content"][1]["type"], "image_url");
    assert!(msgs[1]["content"][0]["image_url"]["url"]
        .as_str()
        .unwrap()
        .starts_with("data:image/png;base64,"));
    assert_eq!(reqs[2]["stop"], serde_json::json!(["</tool_call>", "</answer>"]));
}

#[test]
fn missing_usage_falls_back_to_word_count() {
    let body = r#"{"choices":[{"message":{"content":"<think>two words</think> <answer>x</answer>"}}]}"#;
    let (url, _) = serve(vec![(200, body.into())]);
    let policy = RemotePolicy::new(cfg(url)).unwrap();
    let (v, store) = view();
    let g = policy.generate(&v, &store, &GenerateParams::default()).unwrap();
    assert!(g.estimated);
    assert_eq!(g.token_len, 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![(400, r#"{"error":"bad"}"#.into()), (200, OK.into())]);
    let client = ChatClient::new(cfg(url)).unwrap();
    let (v, store) = view();
    let err = client.complete(&v, &store, &GenerateParams::default()).unwrap_err();
    assert!(matches!(err, PolicyError::Protocol(_)));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn retries_are_bounded() {
    let (url, seen) = serve(vec![(502, "{}".into()); 4]);
    let client = ChatClient::new(EndpointConfig {
        max_retries: 3,
        ..cfg(url)
    })
    .unwrap();
    let (v, store) = view();
    assert!(matches!(
        client.complete(&v, &store, &GenerateParams::default()),
        Err(PolicyError::Transport(_))
    ));
    assert_eq!(seen.lock().unwrap().len(), 4);
}

//! HTTP adapters against a scripted local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use bame_core::backend::{
    AnthropicCompatible, Backend, BackendError, ChatMessage, FinishReason, OpenAiCompatible, RetryPolicy, Transport,
};

#[derive(Debug, Clone)]
struct Captured {
    headers: Vec<String>,
    body: String,
}

/// Serves the scripted (status, body) replies in order, one per connection,
/// then stops accepting.
struct Server {
    url: String,
    requests: Arc<Mutex<Vec<Captured>>>,
    handle: Option<JoinHandle<()>>,
}

impl Server {
    fn start(replies: Vec<(u16, &'static str)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let seen = requests.clone();
        let handle = std::thread::spawn(move || {
            for (status, body) in replies {
                let Ok((stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut headers = Vec::new();
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap() == 0 {
                        break;
                    }
                    let line = line.trim_end().to_string();
                    if line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    headers.push(line);
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                seen.lock().unwrap().push(Captured {
                    headers,
                    body: String::from_utf8(buf).unwrap(),
                });
                let mut stream = stream;
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.flush();
            }
        });
        Self {
            url,
            requests,
            handle: Some(handle),
        }
    }

    fn count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }

    fn captured(&self) -> Vec<Captured> {
        self.requests.lock().unwrap().clone()
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        // Leave the thread detached if it is still waiting for a connection.
        drop(self.handle.take());
    }
}

const OPENAI_OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"1. A story."},"finish_reason":"stop"}],"usage":{"prompt_tokens":12,"completion_tokens":4}}"#;
const ANTHROPIC_OK: &str = r#"{"content":[{"type":"text","text":"Hello "},{"type":"text","text":"there."}],"stop_reason":"max_tokens","usage":{"input_tokens":3,"output_tokens":2}}"#;

fn backend(transport: impl Transport + 'static, retries: u32) -> Backend {
    Backend::new("test-model", Box::new(transport)).with_retry(RetryPolicy {
        max_retries: retries,
        base_delay: Duration::from_millis(1),
        max_delay: Duration::from_millis(2),
    })
}

fn openai(server: &Server, retries: u32) -> Backend {
    backend(OpenAiCompatible::new(server.url.clone(), "sk-test".into(), Duration::from_secs(5)).unwrap(), retries)
}

fn ask(b: &Backend) -> Result<bame_core::backend::CompletionResponse, BackendError> {
    b.complete(&b.request(vec![ChatMessage::system("Be brief."), ChatMessage::user("Tell a story.")], "t#1"))
}

#[test]
fn unauthorized_is_not_retried() {
    let server = Server::start(vec![(401, r#"{"error":"bad key"}"#), (200, OPENAI_OK)]);
    let err = ask(&openai(&server, 3)).unwrap_err();
    assert!(matches!(err, BackendError::Authentication(_)), "{err:?}");
    assert_eq!(server.count(), 1);
}

#[test]
fn server_errors_are_retried() {
    let server = Server::start(vec![(503, "busy"), (500, "oops"), (200, OPENAI_OK)]);
    let resp = ask(&openai(&server, 3)).unwrap();
    assert_eq!(resp.text, "1. A story.");
    assert_eq!(resp.finish_reason, FinishReason::Complete);
    assert_eq!(resp.usage.unwrap().prompt_tokens, 12);
    assert_eq!(server.count(), 3);
}

#[test]
fn rate_limit_exhaustion_reports_attempts() {
    let server = Server::start(vec![(429, "slow down"); 3]);
    let err = ask(&openai(&server, 2)).unwrap_err();
    assert_eq!(err, BackendError::RateLimitExhausted { attempts: 3 });
    assert_eq!(server.count(), 3);
}

#[test]
fn malformed_body_is_not_retried() {
    let server = Server::start(vec![(200, "not json"), (200, OPENAI_OK)]);
    let err = ask(&openai(&server, 3)).unwrap_err();
    assert!(matches!(err, BackendError::MalformedResponse(_)), "{err:?}");
    assert_eq!(server.count(), 1);
}

#[test]
fn openai_request_shape() {
    let server = Server::start(vec![(200, OPENAI_OK)]);
    ask(&openai(&server, 0)).unwrap();
    let req = &server.captured()[0];
    assert!(req.headers[0].starts_with("POST /v1/chat"), "{:?}", req.headers);
    assert!(req.headers.iter().any(|h| h.eq_ignore_ascii_case("authorization: Bearer sk-test")));
    let body: serde_json::Value = serde_json::from_str(&req.body).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "Tell a story.");
}

#[test]
fn anthropic_round_trip() {
    let server = Server::start(vec![(200, ANTHROPIC_OK)]);
    let b = backend(AnthropicCompatible::new(server.url.clone(), "key-1".into(), Duration::from_secs(5)).unwrap(), 0);
    let resp = ask(&b).unwrap();
    assert_eq!(resp.text, "Hello there.");
    assert_eq!(resp.finish_reason, FinishReason::Length);
    let req = &server.captured()[0];
    assert!(req.headers.iter().any(|h| h.eq_ignore_ascii_case("x-api-key: key-1")));
    let body: serde_json::Value = serde_json::from_str(&req.body).unwrap();
    assert_eq!(body["system"], "Be brief.");
    assert_eq!(body["messages"].as_array().unwrap().len(), 1);
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let t = OpenAiCompatible::new(format!("http://127.0.0.1:{port}/v1"), "k".into(), Duration::from_secs(2)).unwrap();
    let err = ask(&backend(t, 1)).unwrap_err();
    assert!(matches!(err, BackendError::Transport(_) | BackendError::Timeout), "{err:?}");
}

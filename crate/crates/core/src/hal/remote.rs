use std::time::Duration;

use super::{Backend, BackendRequest, BackendResponse, HalError};

pub const URL_VAR: &str = "ARBITER_BACKEND_URL";
pub const TOKEN_VAR: &str = "ARBITER_BACKEND_TOKEN";

/// Posts each request as JSON to an HTTP endpoint that answers with a
/// `BackendResponse` body. A 4xx/5xx status with a body of
/// `{"error": "tool"}` is reported as a tool error.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    url: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(url: impl Into<String>, token: Option<String>) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(120)).build();
        RemoteBackend { url: url.into(), token, agent }
    }

    pub fn from_env() -> Result<Self, HalError> {
        let url = std::env::var(URL_VAR).map_err(|_| HalError::NotSupported(format!("{URL_VAR} is not set")))?;
        Ok(Self::new(url, std::env::var(TOKEN_VAR).ok()))
    }
}

impl Backend for RemoteBackend {
    fn invoke(&self, request: &BackendRequest) -> Result<BackendResponse, HalError> {
        let mut call = self.agent.post(&self.url);
        if let Some(t) = &self.token {
            call = call.set("Authorization", &format!("Bearer {t}"));
        }
        match call.send_json(request) {
            Ok(resp) => resp.into_json::<BackendResponse>().map_err(|e| HalError::Transport(format!("bad response body: {e}"))),
            Err(ureq::Error::Status(code, resp)) => {
                let body: serde_json::Value = resp.into_json().unwrap_or_default();
                let message = body.get("message").and_then(|m| m.as_str()).unwrap_or("").to_string();
                if body.get("error").and_then(|e| e.as_str()) == Some("tool") {
                    Err(HalError::Tool(message))
                } else {
                    Err(HalError::Transport(format!("HTTP {code} {message}").trim_end().to_string()))
                }
            }
            Err(e) => Err(HalError::Transport(e.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn serve_once(status: &str, body: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/invoke", listener.local_addr().unwrap());
        let status = status.to_string();
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut auth = String::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = line.trim().to_string();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            write!(stream, "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len()).unwrap();
            format!("{auth}\n{}", String::from_utf8(buf).unwrap())
        });
        (url, handle)
    }

    #[test]
    fn posts_request_and_parses_response() {
        let (url, h) = serve_once("200 OK", r#"{"output":{"summary":"s"},"tokens_used":7,"latency_ticks":0}"#);
        let b = RemoteBackend::new(url, Some("sekret".into()));
        let r = b.invoke(&BackendRequest::new("summarize", json!({"document": "d"}))).unwrap();
        assert_eq!(r.output, json!({"summary": "s"}));
        assert_eq!(r.tokens_used, 7);
        let seen = h.join().unwrap();
        assert!(seen.starts_with("Authorization: Bearer sekret"));
        assert!(seen.contains(r#""binding_id":"summarize""#));
    }

    #[test]
    fn status_errors_are_classified() {
        let (url, h) = serve_once("500 Internal Server Error", r#"{"error":"tool","message":"db down"}"#);
        let err = RemoteBackend::new(url, None).invoke(&BackendRequest::new("t", json!({}))).unwrap_err();
        assert_eq!(err, HalError::Tool("db down".into()));
        h.join().unwrap();
        let (url, h) = serve_once("503 Service Unavailable", "{}");
        let err = RemoteBackend::new(url, None).invoke(&BackendRequest::new("t", json!({}))).unwrap_err();
        assert!(matches!(err, HalError::Transport(_)));
        h.join().unwrap();
    }
}

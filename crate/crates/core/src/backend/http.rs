use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    BackendError, Completion, CompletionBackend, CompletionCandidate, CompletionRequest,
    TokenLogprob,
};

pub const API_KEY_ENV: &str = "EXPLCAL_API_KEY";

/// Temperature used for the extra samples when more than one candidate is requested.
pub const CANDIDATE_SAMPLING_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    pub requests_per_minute: f64,
    pub max_in_flight: usize,
    pub max_attempts: usize,
    pub initial_backoff_ms: u64,
    pub timeout_secs: u64,
    /// Alternatives requested per token position.
    pub top_logprobs: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com".into(),
            model: "gpt-3.5-turbo-instruct".into(),
            requests_per_minute: 60.0,
            max_in_flight: 4,
            max_attempts: 5,
            initial_backoff_ms: 500,
            timeout_secs: 60,
            top_logprobs: 5,
        }
    }
}

/// Token bucket refilled continuously at `rate_per_minute`, holding at most `burst` tokens.
#[derive(Debug)]
pub struct TokenBucket {
    state: Mutex<(f64, Instant)>,
    per_second: f64,
    burst: f64,
}

impl TokenBucket {
    pub fn new(rate_per_minute: f64, burst: f64) -> Self {
        Self {
            state: Mutex::new((burst, Instant::now())),
            per_second: rate_per_minute / 60.0,
            burst,
        }
    }

    /// Takes one token if available, otherwise returns how long to wait.
    pub fn try_acquire(&self) -> Result<(), Duration> {
        let mut state = self.state.lock().unwrap();
        let now = Instant::now();
        let (tokens, last) = *state;
        let tokens = (tokens + now.duration_since(last).as_secs_f64() * self.per_second).min(self.burst);
        if tokens >= 1.0 {
            *state = (tokens - 1.0, now);
            Ok(())
        } else {
            *state = (tokens, now);
            Err(Duration::from_secs_f64((1.0 - tokens) / self.per_second))
        }
    }

    pub fn acquire(&self) {
        while let Err(wait) = self.try_acquire() {
            std::thread::sleep(wait);
        }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(limit: usize) -> Self {
        Self {
            count: Mutex::new(0),
            freed: Condvar::new(),
            limit: limit.max(1),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.count.lock().unwrap();
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.count.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// Client for `POST {base_url}/v1/completions`.
pub struct HttpBackend {
    config: HttpConfig,
    api_key: String,
    agent: ureq::Agent,
    bucket: TokenBucket,
    in_flight: InFlight,
}

impl HttpBackend {
    /// Reads the bearer token from `EXPLCAL_API_KEY`.
    pub fn from_env(config: HttpConfig) -> Result<Self, BackendError> {
        let key = std::env::var(API_KEY_ENV).map_err(|_| BackendError::MissingCredentials(API_KEY_ENV))?;
        Ok(Self::new(config, key))
    }

    pub fn new(config: HttpConfig, api_key: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let burst = config.max_in_flight.max(1) as f64;
        Self {
            bucket: TokenBucket::new(config.requests_per_minute, burst),
            in_flight: InFlight::new(config.max_in_flight),
            agent,
            config,
            api_key: api_key.into(),
        }
    }

    fn url(&self) -> String {
        format!("{}/v1/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn body(&self, request: &CompletionRequest, n: usize, temperature: f64) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "prompt": request.prompt_text,
            "max_tokens": request.max_tokens,
            "temperature": temperature,
            "n": n,
            "stop": request.stop_sequences,
        });
        if request.want_token_logprobs {
            body["logprobs"] = json!(self.config.top_logprobs);
        }
        body
    }

    fn post_once(&self, body: &Value) -> Result<Value, BackendError> {
        let _permit = self.in_flight.acquire();
        self.bucket.acquire();
        let mut resp = self
            .agent
            .post(&self.url())
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Http {
                status,
                body: text,
                retriable: status == 429 || status >= 500,
            });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Response(e.to_string()))
    }

    fn post(&self, body: &Value) -> Result<Value, BackendError> {
        let mut backoff = Duration::from_millis(self.config.initial_backoff_ms);
        let attempts = self.config.max_attempts.max(1);
        for attempt in 1..=attempts {
            match self.post_once(body) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retriable() && attempt < attempts => {
                    log::warn!("attempt {attempt}/{attempts} failed: {e}; retrying in {backoff:?}");
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
                Err(BackendError::Http { status: 429, .. }) => {
                    return Err(BackendError::RateLimited { attempts })
                }
                Err(e) => return Err(e),
            }
        }
        unreachable!("loop returns on the last attempt")
    }
}

/// Extracts `choices[].text` and `choices[].logprobs` from a completions response.
pub fn parse_choices(value: &Value) -> Result<(String, Vec<CompletionCandidate>), BackendError> {
    let bad = |m: &str| BackendError::Response(m.to_string());
    let model = value["model"].as_str().unwrap_or("unknown").to_string();
    let choices = value["choices"].as_array().ok_or_else(|| bad("missing choices"))?;
    let mut out = Vec::with_capacity(choices.len());
    for choice in choices {
        let text = choice["text"].as_str().ok_or_else(|| bad("choice without text"))?.to_string();
        let lp = &choice["logprobs"];
        let token_logprobs = match (lp["tokens"].as_array(), lp["token_logprobs"].as_array()) {
            (Some(tokens), Some(lps)) if tokens.len() == lps.len() => {
                let tops = lp["top_logprobs"].as_array();
                let mut v = Vec::with_capacity(tokens.len());
                for (i, (tok, l)) in tokens.iter().zip(lps).enumerate() {
                    let mut top: Vec<(String, f64)> = tops
                        .and_then(|t| t.get(i))
                        .and_then(Value::as_object)
                        .map(|m| {
                            m.iter()
                                .filter_map(|(k, v)| v.as_f64().map(|f| (k.clone(), f)))
                                .collect()
                        })
                        .unwrap_or_default();
                    top.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                    v.push(TokenLogprob {
                        token: tok.as_str().unwrap_or("").to_string(),
                        logprob: l.as_f64().unwrap_or(f64::NEG_INFINITY),
                        top,
                    });
                }
                Some(v)
            }
            _ => None,
        };
        out.push(CompletionCandidate { text, token_logprobs });
    }
    if out.is_empty() {
        return Err(bad("empty choices"));
    }
    Ok((model, out))
}

impl CompletionBackend for HttpBackend {
    fn backend_id(&self) -> String {
        format!("http:{}:{}", self.config.base_url.trim_end_matches('/'), self.config.model)
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        request.validate()?;
        let (model_id, mut candidates) =
            parse_choices(&self.post(&self.body(request, 1, request.temperature))?)?;
        candidates.truncate(1);
        if request.candidate_count > 1 {
            // Greedy decoding returns duplicates for n > 1, so extra candidates are sampled.
            let sampled = self.post(&self.body(
                request,
                request.candidate_count,
                CANDIDATE_SAMPLING_TEMPERATURE,
            ))?;
            let (_, extra) = parse_choices(&sampled)?;
            let greedy = candidates[0].text.clone();
            candidates.extend(extra.into_iter().filter(|c| c.text != greedy));
            candidates.truncate(request.candidate_count);
        }
        Ok(Completion {
            candidates,
            model_id,
            cached: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    use super::*;

    /// Serves canned responses, recording request bodies.
    fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let hits = Arc::new(AtomicUsize::new(0));
        let (b, h) = (bodies.clone(), hits.clone());
        std::thread::spawn(move || {
            for (status, payload) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                let body = loop {
                    let n = stream.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    let text = String::from_utf8_lossy(&buf).to_string();
                    if let Some(idx) = text.find("\r\n\r\n") {
                        let len = text[..idx]
                            .lines()
                            .find_map(|l| {
                                let l = l.to_ascii_lowercase();
                                l.strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap())
                            })
                            .unwrap_or(0);
                        if buf.len() >= idx + 4 + len {
                            break text[idx + 4..idx + 4 + len].to_string();
                        }
                    }
                };
                b.lock().unwrap().push(body);
                h.fetch_add(1, Ordering::SeqCst);
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}"), bodies, hits)
    }

    fn config(base_url: String) -> HttpConfig {
        HttpConfig {
            base_url,
            model: "test-model".into(),
            requests_per_minute: 6000.0,
            initial_backoff_ms: 1,
            max_attempts: 3,
            ..HttpConfig::default()
        }
    }

    const OK: &str = r#"{"model":"test-model","choices":[{"text":" Mary","logprobs":{"tokens":[" Mary"],"token_logprobs":[-0.25],"top_logprobs":[{" Mary":-0.25," Kevin":-2.0}]}}]}"#;

    #[test]
    fn posts_openai_body_and_parses_logprobs() {
        let (url, bodies, _) = serve(vec![(200, OK.into())]);
        let backend = HttpBackend::new(config(url), "secret");
        let c = backend.complete(&CompletionRequest::greedy("Q: who?\nA: ", 16)).unwrap();
        assert_eq!(c.candidates[0].text, " Mary");
        let lp = c.candidates[0].token_logprobs.as_ref().unwrap();
        assert_eq!(lp[0].logprob, -0.25);
        assert_eq!(lp[0].top[1], (" Kevin".to_string(), -2.0));
        let sent: Value = serde_json::from_str(&bodies.lock().unwrap()[0]).unwrap();
        assert_eq!(sent["model"], "test-model");
        assert_eq!(sent["n"], 1);
        assert_eq!(sent["temperature"], 0.0);
        assert_eq!(sent["logprobs"], 5);
        assert_eq!(sent["stop"][0], "\n");
    }

    #[test]
    fn retries_rate_limit_then_succeeds() {
        let (url, _, hits) = serve(vec![(429, "{}".into()), (200, OK.into())]);
        let backend = HttpBackend::new(config(url), "k");
        assert!(backend.complete(&CompletionRequest::greedy("p", 4)).is_ok());
        assert_eq!(hits.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn gives_up_after_attempts() {
        let (url, _, _) = serve(vec![(429, "{}".into()), (429, "{}".into()), (429, "{}".into())]);
        let backend = HttpBackend::new(config(url), "k");
        let err = backend.complete(&CompletionRequest::greedy("p", 4)).unwrap_err();
        assert!(matches!(err, BackendError::RateLimited { attempts: 3 }), "{err}");
    }

    #[test]
    fn client_error_is_not_retried() {
        let (url, _, hits) = serve(vec![(400, r#"{"error":"bad"}"#.into())]);
        let backend = HttpBackend::new(config(url), "k");
        let err = backend.complete(&CompletionRequest::greedy("p", 4)).unwrap_err();
        assert!(matches!(err, BackendError::Http { status: 400, retriable: false, .. }));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn multiple_candidates_pin_greedy_first() {
        let sampled = r#"{"model":"m","choices":[{"text":" Mary"},{"text":" Kevin"},{"text":" Tom"}]}"#;
        let (url, bodies, _) = serve(vec![(200, OK.into()), (200, sampled.into())]);
        let backend = HttpBackend::new(config(url), "k");
        let c = backend
            .complete(&CompletionRequest::greedy("p", 4).with_candidates(3))
            .unwrap();
        let texts: Vec<_> = c.candidates.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, vec![" Mary", " Kevin", " Tom"]);
        let second: Value = serde_json::from_str(&bodies.lock().unwrap()[1]).unwrap();
        assert_eq!(second["n"], 3);
        assert_eq!(second["temperature"], CANDIDATE_SAMPLING_TEMPERATURE);
    }

    #[test]
    fn token_bucket_limits_rate() {
        let bucket = TokenBucket::new(60.0, 1.0);
        assert!(bucket.try_acquire().is_ok());
        let wait = bucket.try_acquire().unwrap_err();
        assert!(wait > Duration::from_millis(900) && wait <= Duration::from_secs(1));
    }
}

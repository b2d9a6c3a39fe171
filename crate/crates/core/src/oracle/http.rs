//! Oracle backed by a chat-completions-compatible HTTP endpoint.

use std::collections::BTreeSet;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::prompts;
use super::{AnnotationOracle, Answer, Capability, Request, Response, MIN_LOGPROB};
use crate::error::OracleError;
use crate::model::{estimate_tokens, RecordId};
use crate::money::{SharedLedger, Usage};
use crate::seed::rng_for;

/// Environment variable holding the bearer credential.
pub const API_KEY_ENV: &str = "HOLDUP_API_KEY";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpOracleConfig {
    /// Base URL; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    #[serde(skip)]
    pub api_key: Option<String>,
    /// Retries after the first attempt, for transport and parse failures.
    pub max_retries: usize,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    pub backoff_ms: u64,
    pub seed: u64,
}

impl Default for HttpOracleConfig {
    fn default() -> Self {
        HttpOracleConfig {
            base_url: "https://api.openai.com/v1".into(),
            api_key: None,
            max_retries: 3,
            max_in_flight: 8,
            timeout_secs: 120,
            backoff_ms: 500,
            seed: 0,
        }
    }
}

impl HttpOracleConfig {
    /// Fills `api_key` from [`API_KEY_ENV`] when it is set.
    pub fn with_env_key(mut self) -> Self {
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            if !key.trim().is_empty() {
                self.api_key = Some(key.trim().to_string());
            }
        }
        self
    }
}

struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut count = self.count.lock().unwrap_or_else(|e| e.into_inner());
        while *count >= self.limit {
            count = self.freed.wait(count).unwrap_or_else(|e| e.into_inner());
        }
        *count += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut count = self.0.count.lock().unwrap_or_else(|e| e.into_inner());
        *count -= 1;
        self.0.freed.notify_one();
    }
}

pub struct HttpOracle {
    config: HttpOracleConfig,
    agent: ureq::Agent,
    in_flight: InFlight,
    ledger: SharedLedger,
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
    usage: Option<ProviderUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
    logprobs: Option<LogProbs>,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

#[derive(Deserialize)]
struct LogProbs {
    content: Option<Vec<TokenLogProb>>,
}

#[derive(Deserialize)]
struct TokenLogProb {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<TopLogProb>,
}

#[derive(Deserialize)]
struct TopLogProb {
    token: String,
    logprob: f64,
}

#[derive(Deserialize)]
struct ProviderUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

enum Failure {
    Retry(String),
    Fatal(OracleError),
}

impl HttpOracle {
    pub fn new(config: HttpOracleConfig, ledger: SharedLedger) -> Result<Self, OracleError> {
        if config.base_url.trim().is_empty() {
            return Err(OracleError::Config("base URL is empty".into()));
        }
        if config.max_in_flight == 0 {
            return Err(OracleError::Config("max_in_flight must be at least 1".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        let in_flight = InFlight {
            count: Mutex::new(0),
            freed: Condvar::new(),
            limit: config.max_in_flight,
        };
        Ok(HttpOracle {
            config,
            agent,
            in_flight,
            ledger,
        })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn max_tokens(request: &Request<'_>) -> u64 {
        match request.capability {
            Capability::SameClassPairs => {
                let n = request.records.len() as u64;
                (16 + 8 * n * n.saturating_sub(1) / 2).min(4096)
            }
            Capability::ClusterLabelScore => 1,
            Capability::PairwiseOrder => 4,
            Capability::RowClassification => 64,
            Capability::ClusterSummary => 128,
        }
    }

    fn body(&self, request: &Request<'_>, prompt: &str) -> Value {
        let mut body = json!({
            "model": request.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
            "max_tokens": Self::max_tokens(request),
        });
        if matches!(
            request.capability,
            Capability::ClusterLabelScore | Capability::RowClassification
        ) {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(10);
        }
        body
    }

    fn post(&self, body: &Value) -> Result<Completion, Failure> {
        let _permit = self.in_flight.acquire();
        let mut req = self.agent.post(&self.endpoint());
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| Failure::Retry(format!("transport: {e}")))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Failure::Retry(format!("HTTP status {status}")));
        }
        if status >= 400 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Failure::Fatal(OracleError::Transport(format!(
                "HTTP status {status}: {}",
                text.chars().take(300).collect::<String>()
            ))));
        }
        resp.body_mut()
            .read_json::<Completion>()
            .map_err(|e| Failure::Retry(format!("malformed completion body: {e}")))
    }

    fn interpret(request: &Request<'_>, choice: &Choice) -> Result<Response, String> {
        let content = choice.message.content.as_deref().unwrap_or("");
        match request.capability {
            Capability::SameClassPairs => {
                let shown: BTreeSet<RecordId> = request.records.iter().map(|r| r.id).collect();
                prompts::parse_pairs(content, &shown)
                    .map(|pairs| Response::Pairs { pairs })
                    .ok_or_else(|| format!("no pair list in reply {content:?}"))
            }
            Capability::ClusterLabelScore => {
                let first = choice
                    .logprobs
                    .as_ref()
                    .and_then(|l| l.content.as_ref())
                    .and_then(|c| c.first())
                    .ok_or("reply carries no log-probabilities")?;
                Ok(Response::LogProb {
                    logprob: yes_logprob(first),
                })
            }
            Capability::PairwiseOrder => prompts::parse_order(content)
                .map(|order| Response::Order { order })
                .ok_or_else(|| format!("expected LESS or GREATER, got {content:?}")),
            Capability::RowClassification => {
                let label = prompts::clean_label(content);
                if request.task.resolve_label(&label).is_none() {
                    return Err(format!("`{label}` is not one of the task labels"));
                }
                let tokens = choice
                    .logprobs
                    .as_ref()
                    .and_then(|l| l.content.as_ref())
                    .ok_or("reply carries no log-probabilities")?;
                let sum: f64 = tokens.iter().map(|t| t.logprob).sum();
                Ok(Response::Classified {
                    label,
                    confidence: sum.exp().clamp(0.0, 1.0),
                })
            }
            Capability::ClusterSummary => prompts::parse_summary(content)
                .map(Response::Summary)
                .ok_or_else(|| format!("no summary object in reply {content:?}")),
        }
    }

    fn backoff(&self, digest: &str, attempt: usize) {
        if self.config.backoff_ms == 0 {
            return;
        }
        let mut rng = rng_for(self.config.seed, digest, attempt as u64);
        let base = self.config.backoff_ms.saturating_mul(1 << attempt.min(10));
        let jitter: f64 = rng.random_range(0.5..1.5);
        std::thread::sleep(Duration::from_millis((base as f64 * jitter) as u64));
    }
}

/// Log-probability of a "yes" first token, summed over case and spacing
/// variants in the top list. Absent from the list means below every listed
/// alternative, so the smallest listed value bounds it.
fn yes_logprob(first: &TokenLogProb) -> f64 {
    let is_yes = |t: &str| t.trim().eq_ignore_ascii_case("yes");
    let mut seen: Vec<(&str, f64)> = first.top_logprobs.iter().map(|t| (t.token.as_str(), t.logprob)).collect();
    if !seen.iter().any(|(t, _)| *t == first.token) {
        seen.push((first.token.as_str(), first.logprob));
    }
    let p: f64 = seen.iter().filter(|(t, _)| is_yes(t)).map(|(_, lp)| lp.exp()).sum();
    if p > 0.0 {
        return p.ln().min(0.0);
    }
    seen.iter()
        .map(|(_, lp)| *lp)
        .fold(0.0_f64, f64::min)
        .max(MIN_LOGPROB)
}

impl AnnotationOracle for HttpOracle {
    fn answer(&self, request: &Request<'_>) -> Result<Answer, OracleError> {
        self.ledger.quote(request.model, Usage::default())?;
        let prompt = prompts::render(request);
        let body = self.body(request, &prompt);
        let digest = request.digest();
        let mut spent = Usage::default();
        let mut last = String::new();
        let attempts = self.config.max_retries + 1;
        for attempt in 0..attempts {
            if attempt > 0 {
                self.backoff(&digest, attempt - 1);
            }
            let completion = match self.post(&body) {
                Ok(c) => c,
                Err(Failure::Fatal(e)) => {
                    self.charge_spent(request.model, spent)?;
                    return Err(e);
                }
                Err(Failure::Retry(msg)) => {
                    tracing::warn!(capability = %request.capability, attempt, "{msg}");
                    last = msg;
                    continue;
                }
            };
            let Some(choice) = completion.choices.first() else {
                last = "completion has no choices".into();
                continue;
            };
            let usage = match &completion.usage {
                Some(u) => Usage::new(u.prompt_tokens, u.completion_tokens),
                None => Usage::new(
                    estimate_tokens(&prompt),
                    estimate_tokens(choice.message.content.as_deref().unwrap_or("")),
                ),
            };
            spent = Usage::new(spent.input + usage.input, spent.output + usage.output);
            match Self::interpret(request, choice) {
                Ok(response) => {
                    self.ledger.charge(request.model, spent)?;
                    return Ok(Answer { response, usage: spent });
                }
                Err(msg) => {
                    tracing::warn!(capability = %request.capability, attempt, "{msg}");
                    last = msg;
                }
            }
        }
        self.charge_spent(request.model, spent)?;
        Err(OracleError::Parse {
            attempts,
            message: last,
        })
    }

    /// Per-attempt estimate: the rendered prompt with headroom for provider
    /// tokenization, plus the completion cap sent with the request.
    fn quote(&self, request: &Request<'_>) -> Usage {
        let prompt = estimate_tokens(&prompts::render(request));
        Usage::new(prompt + prompt / 2 + 32, Self::max_tokens(request))
    }

    fn ledger(&self) -> &SharedLedger {
        &self.ledger
    }
}

impl HttpOracle {
    fn charge_spent(&self, model: &str, spent: Usage) -> Result<(), OracleError> {
        if spent.total() > 0 {
            self.ledger.charge(model, spent)?;
        }
        Ok(())
    }
}

//! Chat model clients: the remote adapter and two deterministic mocks.

use std::collections::{HashMap, VecDeque};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model::AdId;
use crate::prompt::{Modification, PromptBundle, PromptKind};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub multimodal: bool,
    pub max_tokens: u32,
}

/// A chat model. Implementations must tolerate concurrent calls.
pub trait ChatClient: Send + Sync {
    fn complete(&self, bundle: &PromptBundle, temperature: f64, seed: Option<u64>) -> Result<String>;

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            multimodal: false,
            max_tokens: 2048,
        }
    }
}

type Responder = Box<dyn Fn(&PromptBundle, Option<u64>) -> Result<String> + Send + Sync>;

/// Replays scripted responses in order, then defers to an optional responder.
///
/// Every received bundle is recorded so tests can assert call accounting.
pub struct ScriptedClient {
    script: Mutex<VecDeque<Result<String>>>,
    responder: Option<Responder>,
    calls: Mutex<Vec<PromptBundle>>,
}

impl ScriptedClient {
    pub fn new<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        Self {
            script: Mutex::new(responses.into_iter().map(|s| Ok(s.into())).collect()),
            responder: None,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn from_fn<F>(f: F) -> Self
    where
        F: Fn(&PromptBundle, Option<u64>) -> Result<String> + Send + Sync + 'static,
    {
        Self {
            script: Mutex::new(VecDeque::new()),
            responder: Some(Box::new(f)),
            calls: Mutex::new(Vec::new()),
        }
    }

    /// Always answers with `response`.
    pub fn constant(response: impl Into<String>) -> Self {
        let response = response.into();
        Self::from_fn(move |_, _| Ok(response.clone()))
    }

    pub fn then_fn<F>(mut self, f: F) -> Self
    where
        F: Fn(&PromptBundle, Option<u64>) -> Result<String> + Send + Sync + 'static,
    {
        self.responder = Some(Box::new(f));
        self
    }

    pub fn push_error(self, err: Error) -> Self {
        self.script.lock().unwrap().push_back(Err(err));
        self
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().unwrap().len()
    }

    pub fn calls(&self) -> Vec<PromptBundle> {
        self.calls.lock().unwrap().clone()
    }
}

impl ChatClient for ScriptedClient {
    fn complete(&self, bundle: &PromptBundle, _temperature: f64, seed: Option<u64>) -> Result<String> {
        self.calls.lock().unwrap().push(bundle.clone());
        if let Some(next) = self.script.lock().unwrap().pop_front() {
            return next;
        }
        match &self.responder {
            Some(f) => f(bundle, seed),
            None => Err(Error::Transport("scripted client ran out of responses".into())),
        }
    }
}

/// Separates an ad id from the modification applied to it in counterfactual runs.
pub const COUNTERFACTUAL_SEPARATOR: char = '~';

pub fn counterfactual_ad_id(ad_id: &AdId, m: Modification) -> AdId {
    AdId::new(format!("{ad_id}{COUNTERFACTUAL_SEPARATOR}{m}"))
}

pub fn split_counterfactual_ad_id(ad_id: &AdId) -> (AdId, Option<Modification>) {
    match ad_id.as_str().rsplit_once(COUNTERFACTUAL_SEPARATOR) {
        Some((base, m)) => match m.parse() {
            Ok(m) => (AdId::from(base), Some(m)),
            Err(_) => (ad_id.clone(), None),
        },
        None => (ad_id.clone(), None),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Standard deviation of the Gaussian noise added to every emitted weight.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Noise multiplier applied when the prompt carries no image information.
    pub image_penalty: f64,
    /// Noise grows by `1 + shot_penalty / (1 + shots)`.
    pub shot_penalty: f64,
    /// Shift applied to target features of enhanced / diminished rewrites.
    pub counterfactual_shift: f64,
    /// Factor applied to target features of neutralized rewrites.
    pub neutralize_factor: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            seed: 0,
            image_penalty: 1.0,
            shot_penalty: 0.0,
            counterfactual_shift: 0.5,
            neutralize_factor: 0.5,
        }
    }
}

/// Test double that "knows" the ground-truth weights of every ad and answers
/// prompts with them plus seeded Gaussian noise.
///
/// Counterfactual rewrites are tracked through the ad id (`<ad>~<modification>`)
/// and move the batch's weights in the direction the modification intends.
pub struct OracleClient {
    truth: HashMap<AdId, HashMap<String, f64>>,
    cfg: OracleConfig,
}

impl OracleClient {
    pub fn new(truth: HashMap<AdId, HashMap<String, f64>>, cfg: OracleConfig) -> Self {
        Self { truth, cfg }
    }

    /// Noise-free oracle; counterfactual directions are then always honoured.
    pub fn noiseless(truth: HashMap<AdId, HashMap<String, f64>>) -> Self {
        Self::new(truth, OracleConfig { noise_sigma: 0.0, ..OracleConfig::default() })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }

    fn effective_sigma(&self, bundle: &PromptBundle) -> f64 {
        let image = if bundle.metadata.with_image { 1.0 } else { self.cfg.image_penalty };
        let shots = 1.0 + self.cfg.shot_penalty / (1.0 + bundle.metadata.shot_count as f64);
        self.cfg.noise_sigma * image * shots
    }

    /// The oracle's estimate for each batch feature, or `None` for unknown ads.
    pub fn estimates(&self, bundle: &PromptBundle, call_seed: Option<u64>) -> Option<Vec<(String, f64)>> {
        let ad_id = bundle.metadata.ad_id.as_ref()?;
        let (base, modification) = split_counterfactual_ad_id(ad_id);
        let truth = self.truth.get(&base)?;
        let sigma = self.effective_sigma(bundle);
        let call = call_seed.unwrap_or(0).to_string();
        bundle
            .feature_batch
            .iter()
            .map(|f| {
                let mut w = *truth.get(f)?;
                w = match modification {
                    Some(Modification::Enhanced) => w + self.cfg.counterfactual_shift,
                    Some(Modification::Diminished) => w - self.cfg.counterfactual_shift,
                    Some(Modification::Neutralized) => w * self.cfg.neutralize_factor,
                    None => w,
                };
                if sigma > 0.0 {
                    let s = seed::derive(self.cfg.seed, &[ad_id.as_str(), f, &call]);
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    w += Normal::new(0.0, sigma).expect("finite sigma").sample(&mut rng);
                }
                Some((f.clone(), w))
            })
            .collect()
    }

    fn reasoning_for(score: f64) -> (&'static str, &'static str) {
        if score > 0.05 {
            (
                "Strong alignment: the ad's product category matches this feature's interests.",
                "The feature is a relevant positive signal for engagement with this ad.",
            )
        } else if score < -0.05 {
            (
                "Conflicting focus: the ad content is a mismatch for this feature's interests.",
                "The feature signals lower engagement; the categories conflict.",
            )
        } else {
            (
                "Weak overlap between the ad and this feature.",
                "Weak relevance; the signal is neutral.",
            )
        }
    }
}

fn number(v: f64) -> Value {
    // six decimals keeps transcripts readable and parsing exact enough
    json!((v * 1e6).round() / 1e6)
}

impl ChatClient for OracleClient {
    fn complete(&self, bundle: &PromptBundle, _temperature: f64, seed: Option<u64>) -> Result<String> {
        match bundle.metadata.kind {
            PromptKind::Weights => Ok(match self.estimates(bundle, seed) {
                Some(est) => {
                    let obj: serde_json::Map<String, Value> = est.into_iter().map(|(f, w)| (f, number(w))).collect();
                    format!("```json\n{}\n```", Value::Object(obj))
                }
                None => "I do not have enough information about this ad.".to_owned(),
            }),
            PromptKind::Reasoning => Ok(match self.estimates(bundle, seed) {
                Some(est) => {
                    let obj: serde_json::Map<String, Value> = est
                        .into_iter()
                        .map(|(f, w)| {
                            let (alignment, summary) = Self::reasoning_for(w);
                            let v = json!({
                                "ad_analysis": "product category inferred from title and image summary",
                                "alignment": alignment,
                                "key_factors": [f.clone()],
                                "reasoning_summary": summary,
                                "predicted_score": number(w),
                            });
                            (f, v)
                        })
                        .collect();
                    Value::Object(obj).to_string()
                }
                None => "I do not have enough information about this ad.".to_owned(),
            }),
            PromptKind::Counterfactual => {
                let title = line_value(&bundle.user_text, "- Title: ").unwrap_or("Ad");
                let summary = line_value(&bundle.user_text, "- Image Summary: ").unwrap_or("");
                let m = line_value(&bundle.user_text, "**Modification Type: ")
                    .map(|s| s.trim_end_matches("**"))
                    .unwrap_or("neutralized");
                Ok(json!({
                    "modified_title": format!("{title} ({m})"),
                    "modified_summary": format!("{summary} ({m})"),
                    "modification_explanation": format!("{m} rewrite of the original ad"),
                })
                .to_string())
            }
            PromptKind::JudgeValidation => {
                let obj: serde_json::Map<String, Value> =
                    bundle.feature_batch.iter().map(|f| (f.clone(), json!("pass"))).collect();
                Ok(Value::Object(obj).to_string())
            }
            PromptKind::JudgePolarity => Ok("neutral".to_owned()),
        }
    }
}

fn line_value<'a>(text: &'a str, prefix: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.strip_prefix(prefix)).map(str::trim)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteChatConfig {
    /// Full URL of a chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub retries: u32,
    pub max_tokens: u32,
    pub multimodal: bool,
}

impl Default for RemoteChatConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "default".into(),
            api_key_env: None,
            timeout_secs: 120,
            max_in_flight: 4,
            retries: 2,
            max_tokens: 2048,
            multimodal: false,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
struct InFlight {
    used: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.limit {
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// Minimal chat-completions adapter: `messages[]`, `temperature`, optional
/// `seed` and image parts; the reply is read from `choices[0].message.content`.
pub struct RemoteChatClient {
    cfg: RemoteChatConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    in_flight: InFlight,
}

impl RemoteChatClient {
    pub fn new(cfg: RemoteChatConfig) -> Result<Self> {
        if cfg.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be positive".into()));
        }
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| Error::Config(format!("environment variable {var} is not set")))?),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        let in_flight = InFlight {
            used: Mutex::new(0),
            freed: Condvar::new(),
            limit: cfg.max_in_flight,
        };
        Ok(Self { cfg, api_key, agent, in_flight })
    }

    pub fn request_body(&self, bundle: &PromptBundle, temperature: f64, seed: Option<u64>) -> Value {
        let text = bundle.user_message();
        let user_content = if self.cfg.multimodal && !bundle.image_refs.is_empty() {
            let mut parts = vec![json!({"type": "text", "text": text})];
            parts.extend(
                bundle
                    .image_refs
                    .iter()
                    .map(|r| json!({"type": "image_url", "image_url": {"url": r}})),
            );
            Value::Array(parts)
        } else {
            Value::String(text)
        };
        let mut body = json!({
            "model": self.cfg.model,
            "messages": [
                {"role": "system", "content": bundle.system_text},
                {"role": "user", "content": user_content},
            ],
            "temperature": temperature,
            "max_tokens": self.cfg.max_tokens,
        });
        if let Some(s) = seed {
            body["seed"] = json!(s);
        }
        body
    }

    fn send_once(&self, body: &Value) -> std::result::Result<String, (bool, String)> {
        let mut req = self.agent.post(&self.cfg.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| (true, e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err((true, format!("HTTP {status}: {text}")));
        }
        if status >= 400 {
            return Err((false, format!("HTTP {status}: {text}")));
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| (false, format!("invalid response JSON: {e}")))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| (false, "response has no choices[0].message.content".to_owned()))
    }
}

impl ChatClient for RemoteChatClient {
    fn complete(&self, bundle: &PromptBundle, temperature: f64, seed: Option<u64>) -> Result<String> {
        let body = self.request_body(bundle, temperature, seed);
        let _permit = self.in_flight.acquire();
        let mut last = String::new();
        for attempt in 0..=self.cfg.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(100 << attempt.min(6)));
            }
            match self.send_once(&body) {
                Ok(text) => return Ok(text),
                Err((true, msg)) => {
                    log::warn!("chat request attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                }
                Err((false, msg)) => return Err(Error::Transport(msg)),
            }
        }
        Err(Error::Transport(format!(
            "chat endpoint failed after {} attempts: {last}",
            self.cfg.retries + 1
        )))
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            multimodal: self.cfg.multimodal,
            max_tokens: self.cfg.max_tokens,
        }
    }
}

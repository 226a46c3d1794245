//! The boundary to language models: prompt templates, the [`Judge`] trait,
//! transcript replay and recording, an HTTP chat-completion backend and
//! verdict parsing.

mod http;
pub mod template;
pub mod verdict;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{self, sha256_hex, Artifact, ArtifactError};
use crate::dataset::{ModelHandle, ModelKind};

pub use http::{EndpointConfig, HttpGateway, RetryPolicy, Throttle};
pub use template::{PromptTemplate, RenderError, TemplateRegistry};
pub use verdict::{parse_verdict, Verdict, VerdictKind, VerdictParseError, VerdictValue};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CallParams {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeCall {
    pub model: ModelHandle,
    pub template_id: String,
    pub prompt: String,
    pub params: CallParams,
    /// 0 for the first ask, then 1, 2, ... for re-asks of the same prompt.
    pub attempt: u32,
}

/// Transcript key of a call: sha256 over the model name and prompt, with
/// the re-ask index appended for attempts after the first.
pub fn transcript_key(model_name: &str, prompt: &str, attempt: u32) -> String {
    let mut bytes = Vec::with_capacity(model_name.len() + prompt.len() + 8);
    bytes.extend_from_slice(model_name.as_bytes());
    bytes.push(0);
    bytes.extend_from_slice(prompt.as_bytes());
    if attempt > 0 {
        bytes.push(0);
        bytes.extend_from_slice(attempt.to_string().as_bytes());
    }
    sha256_hex(&bytes)
}

impl JudgeCall {
    pub fn transcript_key(&self) -> String {
        transcript_key(&self.model.name, &self.prompt, self.attempt)
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("no transcript for key {key} (model `{model}`, template `{template_id}`)")]
    MissingTranscript {
        key: String,
        model: String,
        template_id: String,
    },
    #[error("model `{model}`: request failed after {attempts} attempt(s): {message}")]
    Transport {
        model: String,
        attempts: u32,
        message: String,
    },
    #[error("model `{model}`: endpoint returned HTTP {status}: {body}")]
    Http {
        model: String,
        status: u16,
        body: String,
    },
    #[error("model `{model}`: {message}")]
    Config { model: String, message: String },
    #[error("malformed response from `{model}`: {message}")]
    Response { model: String, message: String },
    #[error("{0}")]
    Other(String),
}

/// Anything that answers a rendered prompt.
pub trait Judge: Send + Sync {
    fn complete(&self, call: &JudgeCall) -> Result<String, GatewayError>;
}

impl<J: Judge + ?Sized> Judge for &J {
    fn complete(&self, call: &JudgeCall) -> Result<String, GatewayError> {
        (**self).complete(call)
    }
}

impl<J: Judge + ?Sized> Judge for std::sync::Arc<J> {
    fn complete(&self, call: &JudgeCall) -> Result<String, GatewayError> {
        (**self).complete(call)
    }
}

impl<J: Judge + ?Sized> Judge for Box<J> {
    fn complete(&self, call: &JudgeCall) -> Result<String, GatewayError> {
        (**self).complete(call)
    }
}

/// One recorded response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub key: String,
    pub response: String,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub template_id: String,
}

impl Artifact for TranscriptEntry {
    const KIND: &'static str = "transcript";
}

/// Replays responses from a transcript store. A miss is an error; nothing
/// is ever fabricated.
#[derive(Debug, Clone, Default)]
pub struct MockGateway {
    entries: HashMap<String, String>,
}

impl MockGateway {
    pub fn new(entries: impl IntoIterator<Item = TranscriptEntry>) -> Self {
        Self {
            entries: entries.into_iter().map(|e| (e.key, e.response)).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ArtifactError> {
        Ok(Self::new(artifact::read_artifact::<TranscriptEntry>(path)?))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Judge for MockGateway {
    fn complete(&self, call: &JudgeCall) -> Result<String, GatewayError> {
        let key = call.transcript_key();
        if let Some(r) = self.entries.get(&key) {
            return Ok(r.clone());
        }
        // A re-ask without its own entry replays the first answer.
        if call.attempt > 0 {
            if let Some(r) = self.entries.get(&transcript_key(&call.model.name, &call.prompt, 0)) {
                return Ok(r.clone());
            }
        }
        Err(GatewayError::MissingTranscript {
            key,
            model: call.model.name.clone(),
            template_id: call.template_id.clone(),
        })
    }
}

/// Wraps a judge and records every successful response for later replay.
pub struct RecordingJudge<J> {
    inner: J,
    entries: Mutex<BTreeMap<String, TranscriptEntry>>,
}

impl<J: Judge> RecordingJudge<J> {
    pub fn new(inner: J) -> Self {
        Self {
            inner,
            entries: Mutex::new(BTreeMap::new()),
        }
    }

    /// Recorded entries, sorted by key.
    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.entries.lock().expect("recorder lock").values().cloned().collect()
    }

    /// Merge with any entries already in `path` and write the store.
    pub fn save(&self, path: &Path) -> Result<usize, ArtifactError> {
        let mut all: BTreeMap<String, TranscriptEntry> = BTreeMap::new();
        if path.is_file() {
            for e in artifact::read_artifact::<TranscriptEntry>(path)? {
                all.insert(e.key.clone(), e);
            }
        }
        for e in self.entries() {
            all.insert(e.key.clone(), e);
        }
        let list: Vec<TranscriptEntry> = all.into_values().collect();
        artifact::write_artifact(&list, path)
    }
}

impl<J: Judge> Judge for RecordingJudge<J> {
    fn complete(&self, call: &JudgeCall) -> Result<String, GatewayError> {
        let response = self.inner.complete(call)?;
        let key = call.transcript_key();
        self.entries.lock().expect("recorder lock").insert(
            key.clone(),
            TranscriptEntry {
                key,
                response: response.clone(),
                model: call.model.name.clone(),
                template_id: call.template_id.clone(),
            },
        );
        Ok(response)
    }
}

/// A judge backed by a closure; used for scripted judges.
pub struct FnJudge<F>(pub F);

impl<F> Judge for FnJudge<F>
where
    F: Fn(&JudgeCall) -> Result<String, GatewayError> + Send + Sync,
{
    fn complete(&self, call: &JudgeCall) -> Result<String, GatewayError> {
        (self.0)(call)
    }
}

/// Counts calls per template id.
pub struct CountingJudge<J> {
    inner: J,
    counts: Mutex<BTreeMap<String, usize>>,
}

impl<J: Judge> CountingJudge<J> {
    pub fn new(inner: J) -> Self {
        Self {
            inner,
            counts: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn count(&self, template_id: &str) -> usize {
        self.counts
            .lock()
            .expect("counter lock")
            .get(template_id)
            .copied()
            .unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.lock().expect("counter lock").values().sum()
    }

    pub fn counts(&self) -> BTreeMap<String, usize> {
        self.counts.lock().expect("counter lock").clone()
    }
}

impl<J: Judge> Judge for CountingJudge<J> {
    fn complete(&self, call: &JudgeCall) -> Result<String, GatewayError> {
        *self
            .counts
            .lock()
            .expect("counter lock")
            .entry(call.template_id.clone())
            .or_default() += 1;
        self.inner.complete(call)
    }
}

#[derive(Debug, Error)]
pub enum AskError {
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Decoding defaults applied per model kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Decoding {
    pub judge_temperature: f64,
    pub generator_temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            judge_temperature: 0.0,
            generator_temperature: 0.7,
            max_tokens: 1024,
            seed: None,
        }
    }
}

impl Decoding {
    pub fn params_for(&self, model: &ModelHandle) -> CallParams {
        CallParams {
            temperature: match model.kind {
                ModelKind::Generator => self.generator_temperature,
                ModelKind::Judge | ModelKind::Scorer => self.judge_temperature,
            },
            max_tokens: self.max_tokens,
            seed: self.seed,
        }
    }
}

pub const DEFAULT_MAX_REASKS: u32 = 2;

/// Result of asking for a structured verdict with re-asks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictAttempt {
    pub verdict: Option<Verdict>,
    pub responses: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl VerdictAttempt {
    /// Yes/no reading with the fail-closed default: anything unreadable is
    /// a no.
    pub fn positive_or_no(&self) -> bool {
        self.verdict.as_ref().and_then(Verdict::positive).unwrap_or(false)
    }
}

/// Renders templates and sends them through a judge.
#[derive(Clone, Copy)]
pub struct JudgeClient<'a> {
    pub judge: &'a dyn Judge,
    pub templates: &'a TemplateRegistry,
    pub decoding: Decoding,
    pub max_reasks: u32,
}

impl<'a> JudgeClient<'a> {
    pub fn new(judge: &'a dyn Judge, templates: &'a TemplateRegistry) -> Self {
        Self {
            judge,
            templates,
            decoding: Decoding::default(),
            max_reasks: DEFAULT_MAX_REASKS,
        }
    }

    pub fn render(&self, template_id: &str, bindings: &[(&str, &str)]) -> Result<String, RenderError> {
        self.templates.render(template_id, bindings)
    }

    pub fn call(&self, model: &ModelHandle, template_id: &str, prompt: String, attempt: u32) -> JudgeCall {
        JudgeCall {
            model: model.clone(),
            template_id: template_id.to_string(),
            params: self.decoding.params_for(model),
            prompt,
            attempt,
        }
    }

    /// Send an already rendered prompt.
    pub fn send(&self, model: &ModelHandle, template_id: &str, prompt: String) -> Result<String, GatewayError> {
        self.judge.complete(&self.call(model, template_id, prompt, 0))
    }

    pub fn ask(
        &self,
        model: &ModelHandle,
        template_id: &str,
        bindings: &[(&str, &str)],
    ) -> Result<String, AskError> {
        let prompt = self.render(template_id, bindings)?;
        Ok(self.send(model, template_id, prompt)?)
    }

    /// Ask, parse, and re-ask up to `max_reasks` times on unreadable
    /// answers. Gateway errors end the attempt immediately.
    pub fn ask_verdict(
        &self,
        model: &ModelHandle,
        template_id: &str,
        bindings: &[(&str, &str)],
        kind: VerdictKind,
    ) -> VerdictAttempt {
        let prompt = match self.render(template_id, bindings) {
            Ok(p) => p,
            Err(e) => {
                return VerdictAttempt {
                    verdict: None,
                    responses: vec![],
                    error: Some(e.to_string()),
                }
            }
        };
        let mut responses = Vec::new();
        let mut last_error = None;
        for attempt in 0..=self.max_reasks {
            let call = self.call(model, template_id, prompt.clone(), attempt);
            match self.judge.complete(&call) {
                Ok(text) => {
                    let parsed = parse_verdict(&text, kind);
                    responses.push(text);
                    match parsed {
                        Ok(v) => {
                            return VerdictAttempt {
                                verdict: Some(v),
                                responses,
                                error: None,
                            }
                        }
                        Err(e) => last_error = Some(e.to_string()),
                    }
                }
                Err(e) => {
                    last_error = Some(e.to_string());
                    break;
                }
            }
        }
        VerdictAttempt {
            verdict: None,
            responses,
            error: last_error,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn judge_handle() -> ModelHandle {
        ModelHandle::new("j1", ModelKind::Judge)
    }

    #[test]
    fn keys_are_deterministic_and_attempt_sensitive() {
        let a = transcript_key("m", "p", 0);
        assert_eq!(a, transcript_key("m", "p", 0));
        assert_ne!(a, transcript_key("m", "p", 1));
        assert_ne!(a, transcript_key("m2", "p", 0));
        assert_ne!(transcript_key("ab", "c", 0), transcript_key("a", "bc", 0));
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn mock_replays_and_reports_misses() {
        let key = transcript_key("j1", "hello", 0);
        let mock = MockGateway::new([TranscriptEntry {
            key: key.clone(),
            response: "Yes".into(),
            model: "j1".into(),
            template_id: "t".into(),
        }]);
        let reg = TemplateRegistry::builtin();
        let client = JudgeClient::new(&mock, &reg);
        assert_eq!(client.send(&judge_handle(), "t", "hello".into()).unwrap(), "Yes");
        // re-ask falls back to the first answer
        let call = client.call(&judge_handle(), "t", "hello".into(), 1);
        assert_eq!(mock.complete(&call).unwrap(), "Yes");
        let err = client.send(&judge_handle(), "t", "other".into()).unwrap_err();
        let missing = transcript_key("j1", "other", 0);
        assert!(err.to_string().contains(&missing), "{err}");
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let rec = RecordingJudge::new(FnJudge(|c: &JudgeCall| Ok(format!("echo {}", c.prompt))));
        let reg = TemplateRegistry::builtin();
        let client = JudgeClient::new(&rec, &reg);
        client.send(&judge_handle(), "t", "a".into()).unwrap();
        client.send(&judge_handle(), "t", "b".into()).unwrap();
        assert_eq!(rec.save(&path).unwrap(), 2);
        let mock = MockGateway::load(&path).unwrap();
        let replay = JudgeClient::new(&mock, &reg);
        assert_eq!(replay.send(&judge_handle(), "t", "b".into()).unwrap(), "echo b");
    }

    #[test]
    fn reasks_then_fails_closed() {
        let calls = AtomicUsize::new(0);
        let judge = FnJudge(|_: &JudgeCall| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok("perhaps".to_string())
        });
        let reg = TemplateRegistry::builtin();
        let client = JudgeClient::new(&judge, &reg);
        let r = client.ask_verdict(
            &judge_handle(),
            template::FLUENCY_CHECK,
            &[("query", "q")],
            VerdictKind::YesNo,
        );
        assert!(r.verdict.is_none());
        assert!(!r.positive_or_no());
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        assert_eq!(r.responses.len(), 3);
    }

    #[test]
    fn reask_recovers() {
        let judge = FnJudge(|c: &JudgeCall| Ok(if c.attempt == 0 { "hmm" } else { "yes" }.to_string()));
        let reg = TemplateRegistry::builtin();
        let client = JudgeClient::new(&judge, &reg);
        let r = client.ask_verdict(&judge_handle(), template::FLUENCY_CHECK, &[("query", "q")], VerdictKind::YesNo);
        assert!(r.positive_or_no());
        assert_eq!(r.responses, vec!["hmm".to_string(), "yes".to_string()]);
    }

    #[test]
    fn temperatures_follow_model_kind() {
        let d = Decoding::default();
        assert_eq!(d.params_for(&judge_handle()).temperature, 0.0);
        assert_eq!(
            d.params_for(&ModelHandle::new("g", ModelKind::Generator)).temperature,
            0.7
        );
    }

    #[test]
    fn counting_by_template() {
        let j = CountingJudge::new(FnJudge(|_: &JudgeCall| Ok(String::new())));
        let reg = TemplateRegistry::builtin();
        let client = JudgeClient::new(&j, &reg);
        client.send(&judge_handle(), "a", "x".into()).unwrap();
        client.send(&judge_handle(), "a", "y".into()).unwrap();
        client.send(&judge_handle(), "b", "y".into()).unwrap();
        assert_eq!(j.count("a"), 2);
        assert_eq!(j.count("c"), 0);
        assert_eq!(j.total(), 3);
    }
}

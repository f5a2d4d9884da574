//! Language kernels: the completion interface agents talk through, an HTTP
//! client for chat-completion endpoints with bounded retries, a
//! deterministic scripted kernel that always reinforces the cheapest
//! reported option, and recording/replay wrappers that capture transcripts
//! and play them back with strict request matching.

use std::collections::HashMap;
use std::collections::VecDeque;
use std::io::{BufRead, Write};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialog::{serialize_probs, DialogHistory, Message, Role};
use crate::strategy::{quantized_probs, MixedStrategy};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },
    #[error("endpoint returned status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed completion response: {0}")]
    MalformedResponse(String),
    #[error("scripted kernel could not interpret the conversation: {0}")]
    Script(String),
    #[error("replay transcript for run {run_id} class {class_id} is exhausted")]
    ReplayExhausted { run_id: usize, class_id: usize },
    #[error("replay request mismatch for run {run_id} class {class_id} day {day}: {detail}")]
    ReplayMismatch { run_id: usize, class_id: usize, day: usize, detail: String },
    #[error("transcript io: {0}")]
    Io(#[from] std::io::Error),
    #[error("transcript encoding: {0}")]
    Json(#[from] serde_json::Error),
}

/// Which agent is asking, and when. Lets wrappers attribute calls without
/// inspecting message content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CallContext {
    pub run_id: usize,
    pub class_id: usize,
    pub day: usize,
}

/// A completion backend: given the conversation so far, produce the next
/// assistant reply.
pub trait Kernel: Send + Sync {
    fn complete(&self, ctx: &CallContext, history: &DialogHistory)
        -> Result<String, KernelError>;
}

impl Kernel for Box<dyn Kernel> {
    fn complete(
        &self,
        ctx: &CallContext,
        history: &DialogHistory,
    ) -> Result<String, KernelError> {
        (**self).complete(ctx, history)
    }
}

/// Connection settings for a chat-completion endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    /// Transient failures (transport errors, 429, 5xx) are retried this many
    /// times, so at most `max_retries + 1` attempts reach the wire.
    pub max_retries: usize,
    /// Environment variable holding the bearer token. When the variable is
    /// unset the request is sent without an authorization header.
    pub api_key_env: String,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".to_string(),
            model: "gpt-4o-mini".to_string(),
            temperature: 1.0,
            timeout_secs: 120,
            max_retries: 3,
            api_key_env: "LLM_API_KEY".to_string(),
        }
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: &'a [Message],
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

/// Blocking HTTP kernel for chat-completion endpoints.
pub struct HttpKernel {
    config: KernelConfig,
    client: reqwest::blocking::Client,
}

impl HttpKernel {
    pub fn new(config: KernelConfig) -> Result<Self, KernelError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| KernelError::Transport { attempts: 0, message: e.to_string() })?;
        Ok(HttpKernel { config, client })
    }

    fn send_once(&self, history: &DialogHistory) -> Result<String, KernelError> {
        let body = ChatRequest {
            model: &self.config.model,
            temperature: self.config.temperature,
            messages: &history.messages,
        };
        let mut request = self.client.post(&self.config.endpoint).json(&body);
        if let Ok(key) = std::env::var(&self.config.api_key_env) {
            if !key.is_empty() {
                request = request.bearer_auth(key);
            }
        }
        let response = request.send().map_err(|e| KernelError::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = response.status();
        let text = response.text().map_err(|e| KernelError::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        if !status.is_success() {
            return Err(KernelError::Http { status: status.as_u16(), body: truncate(&text) });
        }
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| KernelError::MalformedResponse(format!("{e}: {}", truncate(&text))))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| KernelError::MalformedResponse("no choices in response".into()))?;
        Ok(choice.message.content)
    }
}

fn truncate(text: &str) -> String {
    const LIMIT: usize = 200;
    if text.chars().count() <= LIMIT {
        text.to_string()
    } else {
        let head: String = text.chars().take(LIMIT).collect();
        format!("{head}...")
    }
}

fn retryable(err: &KernelError) -> bool {
    match err {
        KernelError::Transport { .. } => true,
        KernelError::Http { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

impl Kernel for HttpKernel {
    fn complete(
        &self,
        _ctx: &CallContext,
        history: &DialogHistory,
    ) -> Result<String, KernelError> {
        let attempts = self.config.max_retries + 1;
        let mut last = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(100 << (attempt - 1)));
            }
            match self.send_once(history) {
                Ok(reply) => return Ok(reply),
                Err(err) if retryable(&err) => last = Some(err),
                Err(err) => return Err(err),
            }
        }
        Err(match last.expect("at least one attempt") {
            KernelError::Transport { message, .. } => {
                KernelError::Transport { attempts, message }
            }
            other => other,
        })
    }
}

static OPTION_COUNT_CLASSIC: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"choose from (\d+) available routes").expect("static regex"));
static OPTION_COUNT_TOLLING: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"these (\d+) available routes").expect("static regex"));
static FEEDBACK_CLASSIC: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"realized as follows: \[([^\]]+)\]\.").expect("static regex"));
static FEEDBACK_ROUTE1: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"Route 1 has a travel time of ([0-9]+(?:\.[0-9]+)?) minutes")
        .expect("static regex")
});
static FEEDBACK_ROUTE2: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"Route 2 takes ([0-9]+(?:\.[0-9]+)?) minutes").expect("static regex")
});
static FEEDBACK_ROUTE3: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"Route 3 takes ([0-9]+(?:\.[0-9]+)?) minutes").expect("static regex")
});
static FEEDBACK_DRIVING: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"takes approximately ([0-9]+(?:\.[0-9]+)?) minutes in total")
        .expect("static regex")
});
static FEEDBACK_PARK_RIDE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"takes ([0-9]+(?:\.[0-9]+)?) minutes, with a parking fee")
        .expect("static regex")
});

/// Fixed multimodal time components the scripted kernel adds to the numbers
/// it reads out of feedback text: transit is entirely fixed, driving gains
/// the parking-lot walk, park-and-ride gains the station legs.
const SCRIPT_TRANSIT_MINUTES: f64 = 58.0;
const SCRIPT_DRIVING_EXTRA: f64 = 3.0;
const SCRIPT_PARK_RIDE_EXTRA: f64 = 16.0;

/// A deterministic stand-in for a language model: it reads the latest
/// feedback, totals each option's reported door-to-door time, and reinforces
/// the cheapest option (lowest label on ties). Strategy requests get a
/// one-hot on that option; an initial-strategy request gets the uniform mix.
/// Pure in the conversation: equal histories always yield equal replies.
pub struct ScriptedMinCostKernel;

impl ScriptedMinCostKernel {
    fn option_count(history: &DialogHistory) -> Result<usize, KernelError> {
        let system = history
            .messages
            .iter()
            .find(|m| m.role == Role::System)
            .ok_or_else(|| KernelError::Script("no system prompt in history".into()))?;
        if let Some(cap) = OPTION_COUNT_CLASSIC.captures(&system.content) {
            return Ok(cap[1].parse().expect("digits"));
        }
        if let Some(cap) = OPTION_COUNT_TOLLING.captures(&system.content) {
            return Ok(cap[1].parse().expect("digits"));
        }
        if system.content.contains("following three options") {
            return Ok(3);
        }
        Err(KernelError::Script("could not infer the option count".into()))
    }

    /// Reported per-option times from the most recent feedback message.
    fn latest_reported_times(history: &DialogHistory) -> Result<Vec<f64>, KernelError> {
        let feedback = history
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User && m.content.starts_with("Today,"))
            .ok_or_else(|| KernelError::Script("no feedback message found".into()))?;
        let text = &feedback.content;
        if let Some(cap) = FEEDBACK_CLASSIC.captures(text) {
            let mut times = Vec::new();
            for token in cap[1].split(',') {
                let token = token.trim();
                times.push(token.parse().map_err(|_| {
                    KernelError::Script(format!("unreadable travel time {token:?}"))
                })?);
            }
            return Ok(times);
        }
        if text.contains("the traveler's experiences") {
            let driving = FEEDBACK_DRIVING
                .captures(text)
                .ok_or_else(|| KernelError::Script("no driving time in feedback".into()))?[1]
                .parse::<f64>()
                .expect("regex-matched number");
            let park_ride = FEEDBACK_PARK_RIDE
                .captures(text)
                .ok_or_else(|| KernelError::Script("no park-and-ride time in feedback".into()))?
                [1]
                .parse::<f64>()
                .expect("regex-matched number");
            return Ok(vec![
                SCRIPT_TRANSIT_MINUTES,
                driving + SCRIPT_DRIVING_EXTRA,
                park_ride + SCRIPT_PARK_RIDE_EXTRA,
            ]);
        }
        if let Some(cap1) = FEEDBACK_ROUTE1.captures(text) {
            let mut times = vec![cap1[1].parse::<f64>().expect("regex-matched number")];
            if let Some(cap2) = FEEDBACK_ROUTE2.captures(text) {
                times.push(cap2[1].parse().expect("regex-matched number"));
            }
            if let Some(cap3) = FEEDBACK_ROUTE3.captures(text) {
                times.push(cap3[1].parse().expect("regex-matched number"));
            }
            return Ok(times);
        }
        Err(KernelError::Script("unrecognized feedback format".into()))
    }

    fn cheapest_option(history: &DialogHistory) -> Result<usize, KernelError> {
        let times = Self::latest_reported_times(history)?;
        let mut best = 0;
        for (i, &t) in times.iter().enumerate().skip(1) {
            if t < times[best] {
                best = i;
            }
        }
        Ok(best + 1)
    }

    fn one_hot_reply(history: &DialogHistory) -> Result<String, KernelError> {
        let n = Self::option_count(history)?;
        let label = match Self::cheapest_option(history) {
            Ok(label) => label,
            // No feedback yet: nothing to prefer, stay uniform.
            Err(KernelError::Script(_)) => return Ok(Self::uniform_reply(n)),
            Err(other) => return Err(other),
        };
        let mut probs = vec![0.0; n];
        probs[label - 1] = 1.0;
        Ok(format!("<result> Updated strategy: {}. </result>", serialize_probs(&probs)))
    }

    fn uniform_reply(n: usize) -> String {
        let uniform = MixedStrategy::uniform(n).expect("n >= 1");
        format!(
            "<result> Updated strategy: {}. </result>",
            serialize_probs(&quantized_probs(&uniform))
        )
    }

    fn selection_reply(history: &DialogHistory) -> Result<String, KernelError> {
        let label = Self::cheapest_option(history)?;
        Ok(format!("<result> Options selected for increase: [{label}]. </result>"))
    }
}

impl Kernel for ScriptedMinCostKernel {
    fn complete(
        &self,
        _ctx: &CallContext,
        history: &DialogHistory,
    ) -> Result<String, KernelError> {
        let last_user = history
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .ok_or_else(|| KernelError::Script("no user message to answer".into()))?;
        let content = last_user.content.as_str();
        if content.contains("please think first, then provide the initial mixed strategy") {
            return Ok(Self::uniform_reply(Self::option_count(history)?));
        }
        if content.starts_with("Please revise your strategy")
            || content.starts_with("Please indicate how you will update")
        {
            return Self::one_hot_reply(history);
        }
        if content.starts_with("Please reflect on your current strategy") {
            return Self::selection_reply(history);
        }
        if content.starts_with("Your previous reply could not be used:") {
            return if content.contains("Updated strategy") {
                Self::one_hot_reply(history)
            } else {
                Self::selection_reply(history)
            };
        }
        Err(KernelError::Script(format!(
            "unrecognized request {:?}",
            truncate(content)
        )))
    }
}

/// One kernel call as persisted to a transcript: who asked, the full request
/// history, and what came back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub run_id: usize,
    pub class_id: usize,
    pub day: usize,
    pub request: Vec<Message>,
    pub reply: String,
    pub latency_ms: u64,
}

/// Wraps another kernel and captures every call, preserving per-class call
/// order. Transcripts are written as JSON lines sorted by run, class, then
/// call order, so equal runs produce byte-equal files.
pub struct RecordingKernel<K> {
    inner: K,
    records: Mutex<Vec<TranscriptRecord>>,
}

impl<K> RecordingKernel<K> {
    pub fn new(inner: K) -> Self {
        RecordingKernel { inner, records: Mutex::new(Vec::new()) }
    }

    pub fn records(&self) -> Vec<TranscriptRecord> {
        let mut records = self.records.lock().expect("record mutex").clone();
        sort_records(&mut records);
        records
    }

    pub fn write_jsonl(&self, mut writer: impl Write) -> Result<(), KernelError> {
        for record in self.records() {
            serde_json::to_writer(&mut writer, &record)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Stable order for transcripts: by run, then class; same-key records keep
/// their capture order, which is each agent's own call sequence.
fn sort_records(records: &mut [TranscriptRecord]) {
    records.sort_by_key(|r| (r.run_id, r.class_id));
}

impl<K: Kernel> Kernel for RecordingKernel<K> {
    fn complete(
        &self,
        ctx: &CallContext,
        history: &DialogHistory,
    ) -> Result<String, KernelError> {
        let start = Instant::now();
        let reply = self.inner.complete(ctx, history)?;
        let latency_ms = start.elapsed().as_millis() as u64;
        self.records.lock().expect("record mutex").push(TranscriptRecord {
            run_id: ctx.run_id,
            class_id: ctx.class_id,
            day: ctx.day,
            request: history.messages.clone(),
            reply: reply.clone(),
            latency_ms,
        });
        Ok(reply)
    }
}

/// Parses a JSONL transcript back into records.
pub fn read_transcript(reader: impl BufRead) -> Result<Vec<TranscriptRecord>, KernelError> {
    let mut records = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

/// Replays a recorded transcript: each agent's calls are answered in their
/// recorded order, and every request must match the recorded one exactly —
/// any divergence means the replayed run is not the recorded run.
pub struct ReplayKernel {
    queues: Mutex<HashMap<(usize, usize), VecDeque<TranscriptRecord>>>,
}

impl ReplayKernel {
    pub fn from_records(records: Vec<TranscriptRecord>) -> Self {
        let mut queues: HashMap<(usize, usize), VecDeque<TranscriptRecord>> = HashMap::new();
        for record in records {
            queues.entry((record.run_id, record.class_id)).or_default().push_back(record);
        }
        ReplayKernel { queues: Mutex::new(queues) }
    }

    /// Records not yet consumed; zero after a faithful full replay.
    pub fn remaining(&self) -> usize {
        self.queues.lock().expect("queue mutex").values().map(VecDeque::len).sum()
    }
}

impl Kernel for ReplayKernel {
    fn complete(
        &self,
        ctx: &CallContext,
        history: &DialogHistory,
    ) -> Result<String, KernelError> {
        let mut queues = self.queues.lock().expect("queue mutex");
        let queue = queues
            .get_mut(&(ctx.run_id, ctx.class_id))
            .ok_or(KernelError::ReplayExhausted { run_id: ctx.run_id, class_id: ctx.class_id })?;
        let record = queue
            .pop_front()
            .ok_or(KernelError::ReplayExhausted { run_id: ctx.run_id, class_id: ctx.class_id })?;
        if record.day != ctx.day {
            return Err(KernelError::ReplayMismatch {
                run_id: ctx.run_id,
                class_id: ctx.class_id,
                day: ctx.day,
                detail: format!("recorded call was for day {}", record.day),
            });
        }
        if record.request != history.messages {
            let detail = first_difference(&record.request, &history.messages);
            return Err(KernelError::ReplayMismatch {
                run_id: ctx.run_id,
                class_id: ctx.class_id,
                day: ctx.day,
                detail,
            });
        }
        Ok(record.reply)
    }
}

fn first_difference(recorded: &[Message], live: &[Message]) -> String {
    if recorded.len() != live.len() {
        return format!(
            "recorded request had {} messages, live request has {}",
            recorded.len(),
            live.len()
        );
    }
    for (i, (a, b)) in recorded.iter().zip(live).enumerate() {
        if a != b {
            return format!("message {i} differs: recorded {:?}, live {:?}",
                truncate(&a.content), truncate(&b.content));
        }
    }
    "requests match".to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialog::{
        render_feedback, render_system_prompt, selection_prompt, RequirementStyle,
    };
    use crate::network::FlowProfile;
    use crate::scenarios::{compute_experiences, scenario};
    use std::io::Read;
    use std::net::TcpListener;

    fn ctx() -> CallContext {
        CallContext { run_id: 0, class_id: 0, day: 0 }
    }

    fn classic_history(times: &str, prompt: &str) -> DialogHistory {
        let n = times.split(',').count();
        let mut history = DialogHistory::default();
        history.push(Message::system(format!(
            "You are a daily commuter in a transportation network. Each day, you may choose from {n} available routes (indexed by 1, ..., {n}) as your commuting option."
        )));
        history.push(Message::user(format!(
            "Today, the travel times of the {n} routes are realized as follows: [{times}]."
        )));
        history.push(Message::user(prompt.to_string()));
        history
    }

    #[test]
    fn scripted_kernel_reinforces_the_cheapest_route() {
        let history = classic_history("5.0, 3.0, 4.0", selection_prompt());
        let reply = ScriptedMinCostKernel.complete(&ctx(), &history).unwrap();
        assert_eq!(reply, "<result> Options selected for increase: [2]. </result>");
    }

    #[test]
    fn scripted_kernel_breaks_ties_to_the_lowest_label() {
        let history = classic_history("7.0, 7.0", selection_prompt());
        let reply = ScriptedMinCostKernel.complete(&ctx(), &history).unwrap();
        assert_eq!(reply, "<result> Options selected for increase: [1]. </result>");
    }

    #[test]
    fn scripted_kernel_handles_four_route_feedback() {
        let history = classic_history("3880.1, 3679.7, 3657.7, 3902.1", selection_prompt());
        let reply = ScriptedMinCostKernel.complete(&ctx(), &history).unwrap();
        assert_eq!(reply, "<result> Options selected for increase: [3]. </result>");
    }

    #[test]
    fn scripted_kernel_revision_is_one_hot_on_the_cheapest_route() {
        let history = classic_history(
            "5.0, 3.0, 4.0",
            "Please revise your strategy by reflecting on your current strategy and your travel experiences in recent days.",
        );
        let reply = ScriptedMinCostKernel.complete(&ctx(), &history).unwrap();
        assert_eq!(
            reply,
            "<result> Updated strategy: [0.000000, 1.000000, 0.000000]. </result>"
        );
    }

    #[test]
    fn scripted_kernel_initial_strategy_is_uniform() {
        let mut history = DialogHistory::default();
        history.push(Message::system(
            "Each day, you may choose from 3 available routes (indexed by 1, ..., 3) as your commuting option.".to_string(),
        ));
        history.push(Message::user(
            "Based on your prior information about all commuting options, please think first, then provide the initial mixed strategy for exploration.",
        ));
        let reply = ScriptedMinCostKernel.complete(&ctx(), &history).unwrap();
        assert_eq!(
            reply,
            "<result> Updated strategy: [0.333334, 0.333333, 0.333333]. </result>"
        );
    }

    #[test]
    fn scripted_kernel_reads_tolling_feedback() {
        let spec = scenario("tolling_A_with3").unwrap();
        let system = render_system_prompt(&spec, 0, RequirementStyle::TwoTaskGuarded).unwrap();
        let flows = FlowProfile { per_class: vec![vec![2.0, 5.0, 3.0]] };
        let exps = compute_experiences(&spec, &flows).unwrap();
        let feedback = render_feedback(&spec, 0, &exps[0]).unwrap();
        let mut history = DialogHistory::default();
        history.push(Message::system(system));
        history.push(Message::user(feedback));
        history.push(Message::user(selection_prompt()));
        let reply = ScriptedMinCostKernel.complete(&ctx(), &history).unwrap();
        // Route 2's short free-flow time keeps it fastest at this split
        // (30.7 vs 45.0 and 37.1 minutes); the toll does not enter.
        assert_eq!(reply, "<result> Options selected for increase: [2]. </result>");
    }

    #[test]
    fn scripted_kernel_totals_multimodal_reported_times() {
        let spec = scenario("multimodal").unwrap();
        let system = render_system_prompt(&spec, 0, RequirementStyle::TwoTaskGuarded).unwrap();
        // Everyone on transit: driving 30.0+3 = 33, park-and-ride 15.0+16 = 31,
        // transit fixed 58. Park-and-ride wins.
        let flows = FlowProfile {
            per_class: vec![
                vec![7.5, 0.0, 0.0],
                vec![15.0, 0.0, 0.0],
                vec![7.5, 0.0, 0.0],
            ],
        };
        let exps = compute_experiences(&spec, &flows).unwrap();
        let feedback = render_feedback(&spec, 0, &exps[0]).unwrap();
        let mut history = DialogHistory::default();
        history.push(Message::system(system));
        history.push(Message::user(feedback));
        history.push(Message::user(selection_prompt()));
        let reply = ScriptedMinCostKernel.complete(&ctx(), &history).unwrap();
        assert_eq!(reply, "<result> Options selected for increase: [3]. </result>");
    }

    #[test]
    fn scripted_kernel_uses_the_latest_feedback() {
        let mut history = classic_history("5.0, 3.0, 4.0", selection_prompt());
        // A newer feedback message flips the cheapest route.
        history.messages.insert(
            2,
            Message::user(
                "Today, the travel times of the 3 routes are realized as follows: [1.0, 9.0, 9.0].",
            ),
        );
        let reply = ScriptedMinCostKernel.complete(&ctx(), &history).unwrap();
        assert_eq!(reply, "<result> Options selected for increase: [1]. </result>");
    }

    #[test]
    fn recording_kernel_captures_calls_and_replay_returns_them() {
        let recorder = RecordingKernel::new(ScriptedMinCostKernel);
        let history = classic_history("5.0, 3.0, 4.0", selection_prompt());
        let reply = recorder.complete(&ctx(), &history).unwrap();
        let records = recorder.records();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].reply, reply);
        assert_eq!(records[0].request, history.messages);

        let replay = ReplayKernel::from_records(records);
        assert_eq!(replay.remaining(), 1);
        let replayed = replay.complete(&ctx(), &history).unwrap();
        assert_eq!(replayed, reply);
        assert_eq!(replay.remaining(), 0);
        assert!(matches!(
            replay.complete(&ctx(), &history),
            Err(KernelError::ReplayExhausted { .. })
        ));
    }

    #[test]
    fn replay_rejects_diverging_requests() {
        let recorder = RecordingKernel::new(ScriptedMinCostKernel);
        let history = classic_history("5.0, 3.0, 4.0", selection_prompt());
        recorder.complete(&ctx(), &history).unwrap();
        let replay = ReplayKernel::from_records(recorder.records());
        let mut other = history.clone();
        other.messages[1].content = "Today, the travel times of the 3 routes are realized as follows: [9.0, 9.0, 1.0].".into();
        assert!(matches!(
            replay.complete(&ctx(), &other),
            Err(KernelError::ReplayMismatch { .. })
        ));
    }

    #[test]
    fn transcript_jsonl_round_trips() {
        let recorder = RecordingKernel::new(ScriptedMinCostKernel);
        let history = classic_history("5.0, 3.0", selection_prompt());
        recorder.complete(&CallContext { run_id: 1, class_id: 2, day: 3 }, &history).unwrap();
        recorder.complete(&CallContext { run_id: 0, class_id: 0, day: 0 }, &history).unwrap();
        let mut buffer = Vec::new();
        recorder.write_jsonl(&mut buffer).unwrap();
        let parsed = read_transcript(&buffer[..]).unwrap();
        assert_eq!(parsed, recorder.records());
        // Sorted by run then class regardless of call order.
        assert_eq!(parsed[0].run_id, 0);
        assert_eq!(parsed[1].run_id, 1);
    }

    /// Minimal single-purpose HTTP server: answers each connection with the
    /// next canned (status, body) pair.
    fn serve_responses(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = vec![0u8; 65536];
                let mut request = Vec::new();
                loop {
                    let n = stream.read(&mut buf).unwrap();
                    request.extend_from_slice(&buf[..n]);
                    let text = String::from_utf8_lossy(&request);
                    if let Some(header_end) = text.find("\r\n\r\n") {
                        let content_length = text
                            .lines()
                            .find(|l| l.to_ascii_lowercase().starts_with("content-length:"))
                            .and_then(|l| l.split(':').nth(1))
                            .and_then(|v| v.trim().parse::<usize>().ok())
                            .unwrap_or(0);
                        if request.len() >= header_end + 4 + content_length {
                            break;
                        }
                    }
                    if n == 0 {
                        break;
                    }
                }
                seen.push(String::from_utf8_lossy(&request).to_string());
                let reason = if status == 200 { "OK" } else { "Error" };
                let response = format!(
                    "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                use std::io::Write as _;
                stream.write_all(response.as_bytes()).unwrap();
            }
            seen
        });
        (format!("http://{addr}/v1/chat/completions"), handle)
    }

    fn ok_body(content: &str) -> String {
        serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]})
            .to_string()
    }

    fn test_config(endpoint: String, max_retries: usize, key_env: &str) -> KernelConfig {
        KernelConfig {
            endpoint,
            model: "test-model".to_string(),
            temperature: 1.0,
            timeout_secs: 5,
            max_retries,
            api_key_env: key_env.to_string(),
        }
    }

    #[test]
    fn http_kernel_sends_the_full_history_and_reads_the_first_choice() {
        let (endpoint, server) = serve_responses(vec![(200, ok_body("hello"))]);
        std::env::set_var("TEST_KEY_FULL_HISTORY", "secret-token");
        let kernel =
            HttpKernel::new(test_config(endpoint, 0, "TEST_KEY_FULL_HISTORY")).unwrap();
        let history = classic_history("5.0, 3.0", selection_prompt());
        let reply = kernel.complete(&ctx(), &history).unwrap();
        assert_eq!(reply, "hello");
        let seen = server.join().unwrap();
        assert!(seen[0].contains("authorization: Bearer secret-token")
            || seen[0].contains("Authorization: Bearer secret-token"));
        assert!(seen[0].contains("\"model\":\"test-model\""));
        assert!(seen[0].contains("\"temperature\":1.0"));
        assert!(seen[0].contains("\"role\":\"system\""));
        assert!(seen[0].contains("realized as follows"));
    }

    #[test]
    fn http_kernel_omits_auth_when_the_key_is_absent() {
        let (endpoint, server) = serve_responses(vec![(200, ok_body("ok"))]);
        std::env::remove_var("TEST_KEY_ABSENT");
        let kernel = HttpKernel::new(test_config(endpoint, 0, "TEST_KEY_ABSENT")).unwrap();
        let history = classic_history("5.0, 3.0", selection_prompt());
        kernel.complete(&ctx(), &history).unwrap();
        let seen = server.join().unwrap();
        assert!(!seen[0].to_ascii_lowercase().contains("authorization"));
    }

    #[test]
    fn http_kernel_retries_server_errors_then_succeeds() {
        let (endpoint, server) = serve_responses(vec![
            (500, "{\"error\": \"boom\"}".to_string()),
            (429, "{\"error\": \"slow down\"}".to_string()),
            (200, ok_body("eventually")),
        ]);
        let kernel = HttpKernel::new(test_config(endpoint, 2, "TEST_KEY_RETRY")).unwrap();
        let history = classic_history("5.0, 3.0", selection_prompt());
        let reply = kernel.complete(&ctx(), &history).unwrap();
        assert_eq!(reply, "eventually");
        assert_eq!(server.join().unwrap().len(), 3);
    }

    #[test]
    fn http_kernel_fails_fast_on_client_errors() {
        let (endpoint, server) = serve_responses(vec![(400, "{\"error\": \"bad\"}".to_string())]);
        let kernel = HttpKernel::new(test_config(endpoint, 3, "TEST_KEY_400")).unwrap();
        let history = classic_history("5.0, 3.0", selection_prompt());
        match kernel.complete(&ctx(), &history) {
            Err(KernelError::Http { status: 400, .. }) => {}
            other => panic!("expected 400 failure, got {other:?}"),
        }
        assert_eq!(server.join().unwrap().len(), 1);
    }

    #[test]
    fn http_kernel_gives_up_after_the_retry_budget() {
        let (endpoint, server) = serve_responses(vec![
            (503, "{}".to_string()),
            (503, "{}".to_string()),
        ]);
        let kernel = HttpKernel::new(test_config(endpoint, 1, "TEST_KEY_EXHAUST")).unwrap();
        let history = classic_history("5.0, 3.0", selection_prompt());
        match kernel.complete(&ctx(), &history) {
            Err(KernelError::Http { status: 503, .. }) => {}
            other => panic!("expected 503 failure, got {other:?}"),
        }
        assert_eq!(server.join().unwrap().len(), 2);
    }

    #[test]
    fn http_kernel_rejects_responses_without_choices() {
        let (endpoint, _server) = serve_responses(vec![(200, "{\"choices\": []}".to_string())]);
        let kernel = HttpKernel::new(test_config(endpoint, 0, "TEST_KEY_EMPTY")).unwrap();
        let history = classic_history("5.0, 3.0", selection_prompt());
        assert!(matches!(
            kernel.complete(&ctx(), &history),
            Err(KernelError::MalformedResponse(_))
        ));
    }
}

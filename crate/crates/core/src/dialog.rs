//! Conversation plumbing between agents and the language kernel: chat
//! message types, prompt and feedback rendering from fixed templates, the
//! 6-decimal strategy serialization embedded in messages, and the strict
//! parsers that extract reinforced option sets and updated strategies from
//! `<result> ... </result>` segments of a reply.

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenarios::{
    Crowding, CrowdingLevel, ExperienceDetail, OptionExperience, ScenarioDetail,
    ScenarioSpec,
};
use crate::strategy::MixedStrategy;

macro_rules! template {
    ($name:literal) => {
        include_str!(concat!("dialog/templates/", $name, ".txt")).trim_end_matches('\n')
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message { role: Role::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Message { role: Role::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Message { role: Role::Assistant, content: content.into() }
    }
}

/// The running transcript of one agent's conversation, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DialogHistory {
    pub messages: Vec<Message>,
}

impl DialogHistory {
    pub fn push(&mut self, message: Message) {
        self.messages.push(message);
    }
    pub fn len(&self) -> usize {
        self.messages.len()
    }
    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }
}

/// Which requirement block the system prompt carries: a plain daily strategy
/// revision, the two-task select-then-update flow, or the two-task flow with
/// the stricter output guard on the selection answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequirementStyle {
    Revision,
    TwoTask,
    TwoTaskGuarded,
}

/// Whether a reinforced set naming every option is accepted or rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FullSetPolicy {
    Allow,
    Reject,
}

#[derive(Debug, Error)]
pub enum DialogError {
    #[error("class index {class} out of range for {count} classes")]
    ClassOutOfRange { class: usize, count: usize },
    #[error("no traveler profile is defined for class {name:?}")]
    UnknownProfile { name: String },
    #[error("expected {want} option experiences, got {got}")]
    ExperienceArityMismatch { got: usize, want: usize },
    #[error("experience detail does not match the scenario family")]
    MalformedExperience,
}

/// Why a kernel reply could not be used. The display text doubles as the
/// diagnostic embedded in a corrective re-ask.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseRejection {
    #[error("no <result> ... </result> segment was found")]
    NoResultSegment,
    #[error("the result segment {segment:?} does not match the required format")]
    MalformedSegment { segment: String },
    #[error("the option list is empty; reply None to decline reinforcement")]
    EmptyList,
    #[error("option label {token:?} is not an integer")]
    LabelNotAnInteger { token: String },
    #[error("option label {label} is out of range 1..={count}")]
    LabelOutOfRange { label: usize, count: usize },
    #[error("option label {label} appears more than once")]
    DuplicateLabel { label: usize },
    #[error("reinforcing every option at once is not allowed")]
    FullSetNotAllowed,
    #[error("the selected options currently have zero total probability")]
    DegenerateSelection,
    #[error("probability {token:?} is not a number")]
    NotANumber { token: String },
    #[error("expected {want} probabilities, got {got}")]
    WrongArity { got: usize, want: usize },
    #[error("probability {value} is negative")]
    NegativeProbability { value: f64 },
    #[error("probabilities sum to {sum}, outside the accepted range [0.98, 1.02]")]
    SumOutOfTolerance { sum: f64 },
}

pub const SELECTION_FORMAT: &str =
    "<result> None. </result> or <result> Options selected for increase: [xx, xx, ...]. </result>";
pub const SELECTION_FORMAT_GUARDED: &str =
    "<result> Options selected for increase: None. </result> or <result> Options selected for increase: [xx, xx, ...]. </result>";
pub const STRATEGY_FORMAT: &str = "<result> Updated strategy: [xx, xx, ...]. </result>";

/// Probability vector as embedded in messages: six decimals, bracketed.
pub fn serialize_probs(probs: &[f64]) -> String {
    let parts: Vec<String> = probs.iter().map(|p| format!("{p:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

fn minutes_1dp(minutes: f64) -> String {
    format!("{minutes:.1}")
}

fn profile_text(name: &str) -> Result<&'static str, DialogError> {
    match name {
        "high_income" => Ok(template!("profile_high")),
        "middle_income" => Ok(template!("profile_middle")),
        "low_income" => Ok(template!("profile_low")),
        other => Err(DialogError::UnknownProfile { name: other.to_string() }),
    }
}

fn scenario_text(spec: &ScenarioSpec, class: usize) -> Result<String, DialogError> {
    match &spec.detail {
        ScenarioDetail::Classic => {
            let n = spec.option_count(class).to_string();
            Ok(template!("scenario_classic").replace("{n}", &n))
        }
        ScenarioDetail::Tolling { with_road3: true } => {
            Ok(template!("scenario_tolling_with3").to_string())
        }
        ScenarioDetail::Tolling { with_road3: false } => {
            Ok(template!("scenario_tolling_without3").to_string())
        }
        ScenarioDetail::Multimodal(_) => {
            let profile = profile_text(&spec.network.classes[class].name)?;
            Ok(template!("scenario_multimodal").replace("{profile}", profile))
        }
    }
}

/// Composes the system prompt: scenario description, the exploration goal,
/// and the requirement block, with the behavioral items the richer
/// scenarios append.
pub fn render_system_prompt(
    spec: &ScenarioSpec,
    class: usize,
    style: RequirementStyle,
) -> Result<String, DialogError> {
    if class >= spec.network.classes.len() {
        return Err(DialogError::ClassOutOfRange {
            class,
            count: spec.network.classes.len(),
        });
    }
    let scenario = scenario_text(spec, class)?;
    let mut requirement = match style {
        RequirementStyle::Revision => template!("requirement_revision").to_string(),
        RequirementStyle::TwoTask => template!("requirement_twotask").to_string(),
        RequirementStyle::TwoTaskGuarded => {
            template!("requirement_twotask_guarded").to_string()
        }
    };
    match spec.detail {
        ScenarioDetail::Classic => {}
        ScenarioDetail::Tolling { .. } => {
            requirement.push('\n');
            requirement.push_str(template!("item_bounded_rationality"));
        }
        ScenarioDetail::Multimodal(_) => {
            requirement.push('\n');
            requirement.push_str(template!("item_bounded_rationality"));
            requirement.push('\n');
            requirement.push_str(template!("item_multifactor"));
        }
    }
    Ok(format!(
        "{scenario}\n\n{goal}\n\n{requirement}",
        goal = template!("strategy_block")
    ))
}

/// Opening user message when the initial strategy is imposed externally.
pub fn render_initial_external(strategy: &MixedStrategy) -> String {
    template!("init_external").replace("{p}", &serialize_probs(strategy.probs()))
}

/// Opening user message when the agent chooses its own initial strategy.
pub fn initial_self_chosen_prompt() -> &'static str {
    template!("init_self_chosen")
}

/// Daily request to revise the whole strategy (single-task flow).
pub fn revision_prompt() -> &'static str {
    template!("u_new")
}

/// Daily request to pick the options to reinforce (two-task flows).
pub fn selection_prompt() -> &'static str {
    template!("u_positive")
}

/// Follow-up request for the updated strategy after a selection.
pub fn reinforcement_prompt() -> &'static str {
    template!("u_revise")
}

/// Agent-voiced confirmation embedding the already-quantized strategy.
pub fn render_confirmation(quantized_probs: &[f64]) -> String {
    template!("confirmation").replace("{p}", &serialize_probs(quantized_probs))
}

/// Ephemeral re-ask after an unusable reply.
pub fn render_corrective(rejection: &ParseRejection, format_hint: &str) -> String {
    template!("corrective")
        .replace("{diagnostic}", &rejection.to_string())
        .replace("{format}", format_hint)
}

fn crowding_phrase(crowding: &Crowding) -> String {
    match crowding.level() {
        CrowdingLevel::SeatsForEveryone => "seats available for everyone".to_string(),
        CrowdingLevel::SomeStanding => format!(
            "all seats taken and some passengers standing (about {}% of riders standing)",
            crowding.standing_percent()
        ),
        CrowdingLevel::HeavilyCrowded => format!(
            "a heavily crowded vehicle with most passengers standing (about {}% of riders standing)",
            crowding.standing_percent()
        ),
    }
}

/// Renders the day's travel feedback for one class. Times appear with one
/// decimal; everything a traveler later reasons about comes from this text.
pub fn render_feedback(
    spec: &ScenarioSpec,
    class: usize,
    experiences: &[OptionExperience],
) -> Result<String, DialogError> {
    if class >= spec.network.classes.len() {
        return Err(DialogError::ClassOutOfRange {
            class,
            count: spec.network.classes.len(),
        });
    }
    let want = spec.option_count(class);
    if experiences.len() != want {
        return Err(DialogError::ExperienceArityMismatch { got: experiences.len(), want });
    }
    match &spec.detail {
        ScenarioDetail::Classic => {
            let times: Vec<String> =
                experiences.iter().map(|e| minutes_1dp(e.time_minutes)).collect();
            Ok(template!("feedback_classic")
                .replace("{n}", &want.to_string())
                .replace("{times}", &format!("[{}]", times.join(", "))))
        }
        ScenarioDetail::Tolling { with_road3 } => {
            let t: Vec<String> =
                experiences.iter().map(|e| minutes_1dp(e.time_minutes)).collect();
            if *with_road3 {
                Ok(template!("feedback_tolling_with3")
                    .replace("{t1}", &t[0])
                    .replace("{t2}", &t[1])
                    .replace("{t3}", &t[2]))
            } else {
                Ok(template!("feedback_tolling_without3")
                    .replace("{t1}", &t[0])
                    .replace("{t2}", &t[1]))
            }
        }
        ScenarioDetail::Multimodal(_) => {
            let (bus, line1, line2) = match &experiences[0].detail {
                ExperienceDetail::Transit { bus, line1, line2 } => (bus, line1, line2),
                _ => return Err(DialogError::MalformedExperience),
            };
            let (drive_minutes, highway_minutes, ratio) = match &experiences[1].detail {
                ExperienceDetail::Driving {
                    drive_minutes,
                    highway_minutes,
                    congestion_ratio,
                } => (*drive_minutes, *highway_minutes, *congestion_ratio),
                _ => return Err(DialogError::MalformedExperience),
            };
            let (pnr_drive, pnr_line2) = match &experiences[2].detail {
                ExperienceDetail::ParkRide { drive_minutes, line2 } => (*drive_minutes, line2),
                _ => return Err(DialogError::MalformedExperience),
            };
            Ok(template!("feedback_multimodal")
                .replace("{bus_crowding}", &crowding_phrase(bus))
                .replace("{line1_crowding}", &crowding_phrase(line1))
                .replace("{line2_crowding}", &crowding_phrase(line2))
                .replace("{drive_total}", &minutes_1dp(drive_minutes))
                .replace("{highway}", &minutes_1dp(highway_minutes))
                .replace("{ratio}", &format!("{ratio:.2}"))
                .replace("{pnr_drive}", &minutes_1dp(pnr_drive))
                .replace("{pnr_line2_crowding}", &crowding_phrase(pnr_line2)))
        }
    }
}

static RESULT_SEGMENT: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"(?s)<result>(.*?)</result>").expect("static regex"));
static REINFORCED_NONE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"^(?:Options selected for increase:\s*)?None\.?$").expect("static regex")
});
static REINFORCED_LIST: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"^Options selected for increase:\s*\[([^\[\]]*)\]\s*\.?$")
        .expect("static regex")
});
static STRATEGY_LIST: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"^Updated strategy:\s*\[([^\[\]]*)\]\s*\.?$").expect("static regex")
});

fn truncated(segment: &str) -> String {
    const LIMIT: usize = 80;
    if segment.chars().count() <= LIMIT {
        segment.to_string()
    } else {
        let head: String = segment.chars().take(LIMIT).collect();
        format!("{head}...")
    }
}

fn last_parseable<T>(
    text: &str,
    parse_segment: impl Fn(&str) -> Result<T, ParseRejection>,
) -> Result<T, ParseRejection> {
    let mut last_ok = None;
    let mut last_err = None;
    for cap in RESULT_SEGMENT.captures_iter(text) {
        match parse_segment(cap[1].trim()) {
            Ok(value) => last_ok = Some(value),
            Err(err) => last_err = Some(err),
        }
    }
    match (last_ok, last_err) {
        (Some(value), _) => Ok(value),
        (None, Some(err)) => Err(err),
        (None, None) => Err(ParseRejection::NoResultSegment),
    }
}

fn parse_reinforced_segment(
    segment: &str,
    option_count: usize,
    policy: FullSetPolicy,
) -> Result<Option<Vec<usize>>, ParseRejection> {
    if REINFORCED_NONE.is_match(segment) {
        return Ok(None);
    }
    let caps = REINFORCED_LIST
        .captures(segment)
        .ok_or_else(|| ParseRejection::MalformedSegment { segment: truncated(segment) })?;
    let body = caps[1].trim();
    if body.is_empty() {
        return Err(ParseRejection::EmptyList);
    }
    let mut labels = Vec::new();
    for token in body.split(',') {
        let token = token.trim();
        let label: usize = token
            .parse()
            .map_err(|_| ParseRejection::LabelNotAnInteger { token: token.to_string() })?;
        if label == 0 || label > option_count {
            return Err(ParseRejection::LabelOutOfRange { label, count: option_count });
        }
        if labels.contains(&label) {
            return Err(ParseRejection::DuplicateLabel { label });
        }
        labels.push(label);
    }
    labels.sort_unstable();
    if labels.len() == option_count && matches!(policy, FullSetPolicy::Reject) {
        return Err(ParseRejection::FullSetNotAllowed);
    }
    Ok(Some(labels))
}

/// Extracts the reinforced option set from a selection reply. Returns
/// `Ok(None)` when the agent declines to reinforce anything; labels are
/// 1-based and sorted. When several result segments appear, the last
/// syntactically valid one wins.
pub fn parse_reinforced_set(
    text: &str,
    option_count: usize,
    policy: FullSetPolicy,
) -> Result<Option<Vec<usize>>, ParseRejection> {
    last_parseable(text, |segment| parse_reinforced_segment(segment, option_count, policy))
}

fn parse_strategy_segment(
    segment: &str,
    option_count: usize,
) -> Result<MixedStrategy, ParseRejection> {
    let caps = STRATEGY_LIST
        .captures(segment)
        .ok_or_else(|| ParseRejection::MalformedSegment { segment: truncated(segment) })?;
    let body = caps[1].trim();
    let tokens: Vec<&str> = if body.is_empty() {
        Vec::new()
    } else {
        body.split(',').map(str::trim).collect()
    };
    if tokens.len() != option_count {
        return Err(ParseRejection::WrongArity { got: tokens.len(), want: option_count });
    }
    let mut probs = Vec::with_capacity(tokens.len());
    for token in tokens {
        let value: f64 = token
            .parse()
            .map_err(|_| ParseRejection::NotANumber { token: token.to_string() })?;
        if !value.is_finite() {
            return Err(ParseRejection::NotANumber { token: token.to_string() });
        }
        if value < 0.0 {
            return Err(ParseRejection::NegativeProbability { value });
        }
        probs.push(value);
    }
    let sum: f64 = probs.iter().sum();
    if !(0.98..=1.02).contains(&sum) {
        return Err(ParseRejection::SumOutOfTolerance { sum });
    }
    for p in &mut probs {
        *p /= sum;
    }
    MixedStrategy::new(probs)
        .map_err(|_| ParseRejection::MalformedSegment { segment: truncated(segment) })
}

/// Extracts an updated strategy from a reply. Sums within 2% of 1 are
/// renormalized; anything else is rejected. When several result segments
/// appear, the last syntactically valid one wins.
pub fn parse_strategy(
    text: &str,
    option_count: usize,
) -> Result<MixedStrategy, ParseRejection> {
    last_parseable(text, |segment| parse_strategy_segment(segment, option_count))
}

//! The four daily update mechanisms and the day loop that drives them: a
//! free-form strategy revision, a two-task select-then-revise flow, the
//! guided flow where an explicit rule turns the selected options into the
//! next strategy, and a kernel-free best response that applies the same rule
//! to the cheapest reported option. One representative agent per traveler
//! class; flows are expected flows under each class's mixed strategy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{self, AssignmentError};
use crate::dialog::{
    initial_self_chosen_prompt, parse_reinforced_set, parse_strategy,
    reinforcement_prompt, render_confirmation, render_corrective, render_feedback,
    render_initial_external, render_system_prompt, revision_prompt, selection_prompt,
    DialogError, DialogHistory, FullSetPolicy, Message, ParseRejection,
    RequirementStyle, SELECTION_FORMAT, SELECTION_FORMAT_GUARDED, STRATEGY_FORMAT,
};
use crate::exec::Parallelism;
use crate::kernel::{CallContext, Kernel, KernelError};
use crate::network::FlowProfile;
use crate::scenarios::{
    compute_experiences, reported_minutes, ScenarioError, ScenarioSpec,
};
use crate::strategy::{
    flows_from_strategy, quantized_probs, rule1_update, rule2_update, MixedStrategy,
    StepSchedule, StrategyError,
};

#[derive(Debug, Error)]
pub enum MechanismError {
    #[error("invalid mechanism configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Assignment(#[from] AssignmentError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Dialog(#[from] DialogError),
    #[error("class {class_id} gave no usable initial strategy: {rejection}")]
    UnusableInitialStrategy { class_id: usize, rejection: ParseRejection },
}

/// Which daily mechanism drives each agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    /// The kernel freely rewrites the whole strategy each day.
    LlmBaseline,
    /// The kernel selects options to reinforce, then states the new strategy.
    LlmRl,
    /// The kernel only selects options; an explicit rule computes the update.
    GuidedRl,
    /// No kernel: reinforce the cheapest reported option with the same rule.
    BestResponse,
}

/// Explicit update rule used by the guided mechanism and the best response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// Proportional mass shift onto the reinforced set.
    Proportional,
    /// Multiplicative weights: reinforced options scaled by `e^η`.
    MultiplicativeWeights,
}

/// Where the day-0 strategy comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialStrategyChoice {
    /// Imposed uniform mix, announced to the agent.
    External,
    /// The kernel is asked to propose its own opening mix.
    SelfChosen,
}

impl Default for InitialStrategyChoice {
    fn default() -> Self {
        InitialStrategyChoice::External
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismConfig {
    pub kind: MechanismKind,
    /// Required for the guided mechanism, forbidden otherwise. The best
    /// response always uses the proportional rule.
    #[serde(default)]
    pub rule: Option<UpdateRule>,
    #[serde(default)]
    pub schedule: StepSchedule,
    #[serde(default)]
    pub init: InitialStrategyChoice,
    /// Corrective re-asks allowed per query before falling back.
    #[serde(default = "default_max_reasks")]
    pub max_reasks: usize,
}

fn default_max_reasks() -> usize {
    3
}

impl MechanismConfig {
    pub fn new(kind: MechanismKind) -> Self {
        let rule = match kind {
            MechanismKind::GuidedRl => Some(UpdateRule::Proportional),
            _ => None,
        };
        MechanismConfig {
            kind,
            rule,
            schedule: StepSchedule::default(),
            init: InitialStrategyChoice::External,
            max_reasks: 3,
        }
    }

    pub fn validate(&self) -> Result<(), MechanismError> {
        self.schedule.validate()?;
        match (self.kind, self.rule) {
            (MechanismKind::GuidedRl, None) => {
                return Err(MechanismError::Config(
                    "the guided mechanism requires an update rule".into(),
                ));
            }
            (MechanismKind::GuidedRl, Some(_)) => {}
            (_, Some(_)) => {
                return Err(MechanismError::Config(
                    "only the guided mechanism takes an update rule".into(),
                ));
            }
            (_, None) => {}
        }
        if self.kind == MechanismKind::BestResponse
            && self.init == InitialStrategyChoice::SelfChosen
        {
            return Err(MechanismError::Config(
                "the best response has no kernel to choose an initial strategy".into(),
            ));
        }
        Ok(())
    }
}

/// One representative agent: its class, current mixed strategy, and the
/// conversation accumulated so far.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub class_id: usize,
    pub strategy: MixedStrategy,
    pub history: DialogHistory,
    pub day: usize,
}

fn requirement_style(kind: MechanismKind) -> RequirementStyle {
    match kind {
        MechanismKind::LlmBaseline => RequirementStyle::Revision,
        MechanismKind::LlmRl => RequirementStyle::TwoTask,
        MechanismKind::GuidedRl | MechanismKind::BestResponse => {
            RequirementStyle::TwoTaskGuarded
        }
    }
}

/// Outcome of one query loop: either a reply that parsed, or the last reply
/// after the re-ask budget ran out. Corrective exchanges stay out of the
/// durable history; callers append only the returned reply.
enum QueryOutcome<T> {
    Parsed { value: T, reply: String },
    Unusable { last_reply: String, rejection: ParseRejection },
}

/// Asks the kernel, re-asking with a corrective message after each unusable
/// reply, at most `max_reasks` times.
fn query_with_retries<T>(
    kernel: &dyn Kernel,
    ctx: &CallContext,
    base: &DialogHistory,
    parse: impl Fn(&str) -> Result<T, ParseRejection>,
    format_hint: &str,
    max_reasks: usize,
) -> Result<QueryOutcome<T>, KernelError> {
    let mut scratch = base.clone();
    let mut reply = kernel.complete(ctx, &scratch)?;
    let mut reasks = 0;
    loop {
        match parse(&reply) {
            Ok(value) => return Ok(QueryOutcome::Parsed { value, reply }),
            Err(rejection) => {
                if reasks == max_reasks {
                    return Ok(QueryOutcome::Unusable { last_reply: reply, rejection });
                }
                scratch.push(Message::assistant(reply));
                scratch.push(Message::user(render_corrective(&rejection, format_hint)));
                reply = kernel.complete(ctx, &scratch)?;
                reasks += 1;
            }
        }
    }
}

/// Builds one agent. External initialization announces the uniform mix in
/// the opening message; self-chosen initialization queries the kernel for
/// its own opening mix.
pub fn initialize_agent(
    spec: &ScenarioSpec,
    config: &MechanismConfig,
    kernel: &dyn Kernel,
    run_id: usize,
    class_id: usize,
) -> Result<AgentState, MechanismError> {
    let option_count = spec.option_count(class_id);
    let mut history = DialogHistory::default();
    history.push(Message::system(render_system_prompt(
        spec,
        class_id,
        requirement_style(config.kind),
    )?));
    let uniform = MixedStrategy::uniform(option_count)?;
    let strategy = match config.init {
        InitialStrategyChoice::External => {
            history.push(Message::user(render_initial_external(&uniform)));
            uniform
        }
        InitialStrategyChoice::SelfChosen => {
            history.push(Message::user(initial_self_chosen_prompt()));
            let ctx = CallContext { run_id, class_id, day: 0 };
            match query_with_retries(
                kernel,
                &ctx,
                &history,
                |text| parse_strategy(text, option_count),
                STRATEGY_FORMAT,
                config.max_reasks,
            )? {
                QueryOutcome::Parsed { value, reply } => {
                    history.push(Message::assistant(reply));
                    value
                }
                QueryOutcome::Unusable { rejection, .. } => {
                    return Err(MechanismError::UnusableInitialStrategy {
                        class_id,
                        rejection,
                    });
                }
            }
        }
    };
    Ok(AgentState { class_id, strategy, history, day: 0 })
}

/// What one class's step reports back to the day loop.
struct StepOutcome {
    /// 1-based labels the agent reinforced; `Some(vec![])` is an explicit
    /// decline, `None` means no usable selection was made.
    reinforced: Option<Vec<usize>>,
    parse_failure: bool,
}

fn apply_rule(
    rule: UpdateRule,
    strategy: &MixedStrategy,
    zero_based: &[usize],
    eta: f64,
) -> Result<MixedStrategy, StrategyError> {
    match rule {
        UpdateRule::Proportional => rule1_update(strategy, zero_based, eta),
        UpdateRule::MultiplicativeWeights => rule2_update(strategy, zero_based, eta),
    }
}

fn step_llm_baseline(
    agent: &mut AgentState,
    option_count: usize,
    feedback: String,
    kernel: &dyn Kernel,
    ctx: &CallContext,
    max_reasks: usize,
) -> Result<StepOutcome, MechanismError> {
    agent.history.push(Message::user(feedback));
    agent.history.push(Message::user(revision_prompt()));
    match query_with_retries(
        kernel,
        ctx,
        &agent.history,
        |text| parse_strategy(text, option_count),
        STRATEGY_FORMAT,
        max_reasks,
    )? {
        QueryOutcome::Parsed { value, reply } => {
            agent.history.push(Message::assistant(reply));
            agent.strategy = value;
            Ok(StepOutcome { reinforced: None, parse_failure: false })
        }
        QueryOutcome::Unusable { last_reply, .. } => {
            agent.history.push(Message::assistant(last_reply));
            Ok(StepOutcome { reinforced: None, parse_failure: true })
        }
    }
}

fn step_llm_rl(
    agent: &mut AgentState,
    option_count: usize,
    feedback: String,
    kernel: &dyn Kernel,
    ctx: &CallContext,
    max_reasks: usize,
) -> Result<StepOutcome, MechanismError> {
    agent.history.push(Message::user(feedback));
    agent.history.push(Message::user(selection_prompt()));
    let selection = query_with_retries(
        kernel,
        ctx,
        &agent.history,
        |text| parse_reinforced_set(text, option_count, FullSetPolicy::Allow),
        SELECTION_FORMAT,
        max_reasks,
    )?;
    let labels = match selection {
        QueryOutcome::Parsed { value, reply } => {
            agent.history.push(Message::assistant(reply));
            match value {
                None => {
                    // Nothing to reinforce; the day ends without a revision.
                    return Ok(StepOutcome {
                        reinforced: Some(Vec::new()),
                        parse_failure: false,
                    });
                }
                Some(labels) => labels,
            }
        }
        QueryOutcome::Unusable { last_reply, .. } => {
            agent.history.push(Message::assistant(last_reply));
            return Ok(StepOutcome { reinforced: None, parse_failure: true });
        }
    };
    agent.history.push(Message::user(reinforcement_prompt()));
    match query_with_retries(
        kernel,
        ctx,
        &agent.history,
        |text| parse_strategy(text, option_count),
        STRATEGY_FORMAT,
        max_reasks,
    )? {
        QueryOutcome::Parsed { value, reply } => {
            agent.history.push(Message::assistant(reply));
            agent.strategy = value;
            Ok(StepOutcome { reinforced: Some(labels), parse_failure: false })
        }
        QueryOutcome::Unusable { last_reply, .. } => {
            agent.history.push(Message::assistant(last_reply));
            Ok(StepOutcome { reinforced: Some(labels), parse_failure: true })
        }
    }
}

fn step_guided_rl(
    agent: &mut AgentState,
    option_count: usize,
    feedback: String,
    rule: UpdateRule,
    eta: f64,
    kernel: &dyn Kernel,
    ctx: &CallContext,
    max_reasks: usize,
) -> Result<StepOutcome, MechanismError> {
    agent.history.push(Message::user(feedback));
    agent.history.push(Message::user(selection_prompt()));
    let current = agent.strategy.clone();
    let selection = query_with_retries(
        kernel,
        ctx,
        &agent.history,
        |text| {
            let parsed = parse_reinforced_set(text, option_count, FullSetPolicy::Reject)?;
            if let Some(labels) = &parsed {
                let mass: f64 = labels.iter().map(|&l| current.probs()[l - 1]).sum();
                if mass == 0.0 {
                    return Err(ParseRejection::DegenerateSelection);
                }
            }
            Ok(parsed)
        },
        SELECTION_FORMAT_GUARDED,
        max_reasks,
    )?;
    match selection {
        QueryOutcome::Parsed { value: None, reply } => {
            agent.history.push(Message::assistant(reply));
            Ok(StepOutcome { reinforced: Some(Vec::new()), parse_failure: false })
        }
        QueryOutcome::Parsed { value: Some(labels), reply } => {
            agent.history.push(Message::assistant(reply));
            let zero_based: Vec<usize> = labels.iter().map(|&l| l - 1).collect();
            let next = apply_rule(rule, &agent.strategy, &zero_based, eta)?;
            agent.history.push(Message::user(reinforcement_prompt()));
            agent
                .history
                .push(Message::assistant(render_confirmation(&quantized_probs(&next))));
            agent.strategy = next;
            Ok(StepOutcome { reinforced: Some(labels), parse_failure: false })
        }
        QueryOutcome::Unusable { last_reply, .. } => {
            agent.history.push(Message::assistant(last_reply));
            Ok(StepOutcome { reinforced: None, parse_failure: true })
        }
    }
}

/// Index of the smallest reported time, lowest index on ties — the same
/// choice the scripted kernel makes from the rendered feedback.
fn cheapest_option(reported: &[f64]) -> usize {
    let mut best = 0;
    for (i, &t) in reported.iter().enumerate().skip(1) {
        if t < reported[best] {
            best = i;
        }
    }
    best
}

fn step_best_response(
    agent: &mut AgentState,
    reported: &[f64],
    eta: f64,
) -> Result<StepOutcome, MechanismError> {
    let k = cheapest_option(reported);
    agent.strategy = rule1_update(&agent.strategy, &[k], eta)?;
    Ok(StepOutcome { reinforced: Some(vec![k + 1]), parse_failure: false })
}

/// Everything recorded about one day, before that day's update: the
/// strategies that generated the flows, the exact costs realized, the
/// equilibrium gap where route flows make it meaningful, and what each
/// agent chose to reinforce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayRecord {
    pub day: usize,
    pub strategies: Vec<MixedStrategy>,
    pub flows: Vec<Vec<f64>>,
    pub time_costs: Vec<Vec<f64>>,
    pub money_costs: Vec<Vec<f64>>,
    pub relative_gap: Option<f64>,
    pub reinforced: Vec<Option<Vec<usize>>>,
    pub parse_failures: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed { day: usize, class_id: usize, message: String },
}

/// A full run of the day loop: per-day records plus how the run ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: usize,
    pub scenario: String,
    pub mechanism: MechanismKind,
    pub seed: u64,
    pub days: Vec<DayRecord>,
    pub status: RunStatus,
}

impl RunRecord {
    pub fn completed(&self) -> bool {
        matches!(self.status, RunStatus::Completed)
    }
}

/// Runs `num_days` of the daily dynamics: expected flows from each class's
/// strategy, realized experiences, one-decimal reported times, and one
/// mechanism step per class. A class whose kernel fails outright ends the
/// run early with the partial record; unusable-but-well-formed replies never
/// end a run (they fall back to an unchanged strategy).
pub fn run_day_loop(
    spec: &ScenarioSpec,
    config: &MechanismConfig,
    kernel: &dyn Kernel,
    run_id: usize,
    seed: u64,
    num_days: usize,
    par: Parallelism,
) -> Result<RunRecord, MechanismError> {
    config.validate()?;
    let classes = spec.network.classes.len();

    let init_results: Vec<Result<AgentState, MechanismError>> =
        par.map_indexed(classes, |c| initialize_agent(spec, config, kernel, run_id, c));
    let mut agents = Vec::with_capacity(classes);
    for (class_id, result) in init_results.into_iter().enumerate() {
        match result {
            Ok(agent) => agents.push(agent),
            Err(err) => {
                return Ok(RunRecord {
                    run_id,
                    scenario: spec.name.clone(),
                    mechanism: config.kind,
                    seed,
                    days: Vec::new(),
                    status: RunStatus::Failed {
                        day: 0,
                        class_id,
                        message: err.to_string(),
                    },
                });
            }
        }
    }

    let mut days = Vec::with_capacity(num_days);
    for t in 0..num_days {
        let strategies: Vec<MixedStrategy> =
            agents.iter().map(|a| a.strategy.clone()).collect();
        let flows = FlowProfile {
            per_class: agents
                .iter()
                .enumerate()
                .map(|(c, a)| {
                    flows_from_strategy(spec.network.classes[c].demand, &a.strategy)
                })
                .collect(),
        };
        let experiences = compute_experiences(spec, &flows)?;
        let relative_gap = if spec.has_route_gap() {
            Some(assignment::relative_gap(&spec.network, &flows, par)?.relative_gap)
        } else {
            None
        };
        let time_costs: Vec<Vec<f64>> = experiences
            .iter()
            .map(|exps| exps.iter().map(|e| e.time_minutes).collect())
            .collect();
        let money_costs: Vec<Vec<f64>> = experiences
            .iter()
            .map(|exps| exps.iter().map(|e| e.money).collect())
            .collect();
        let reported: Vec<Vec<f64>> = time_costs
            .iter()
            .map(|times| times.iter().map(|&t| reported_minutes(t)).collect())
            .collect();
        let mut feedbacks = Vec::with_capacity(classes);
        for c in 0..classes {
            feedbacks.push(render_feedback(spec, c, &experiences[c])?);
        }
        let eta = config.schedule.eta(t);

        let outcomes: Vec<Result<StepOutcome, MechanismError>> =
            par.zip_map(&mut agents, |c, agent| {
                let ctx = CallContext { run_id, class_id: c, day: t };
                let n = spec.option_count(c);
                let result = match config.kind {
                    MechanismKind::LlmBaseline => step_llm_baseline(
                        agent,
                        n,
                        feedbacks[c].clone(),
                        kernel,
                        &ctx,
                        config.max_reasks,
                    ),
                    MechanismKind::LlmRl => step_llm_rl(
                        agent,
                        n,
                        feedbacks[c].clone(),
                        kernel,
                        &ctx,
                        config.max_reasks,
                    ),
                    MechanismKind::GuidedRl => step_guided_rl(
                        agent,
                        n,
                        feedbacks[c].clone(),
                        config.rule.expect("validated"),
                        eta,
                        kernel,
                        &ctx,
                        config.max_reasks,
                    ),
                    MechanismKind::BestResponse => {
                        step_best_response(agent, &reported[c], eta)
                    }
                };
                agent.day = t + 1;
                result
            });

        let mut reinforced = Vec::with_capacity(classes);
        let mut parse_failures = Vec::with_capacity(classes);
        for (class_id, outcome) in outcomes.into_iter().enumerate() {
            match outcome {
                Ok(step) => {
                    reinforced.push(step.reinforced);
                    parse_failures.push(step.parse_failure);
                }
                Err(err) => {
                    return Ok(RunRecord {
                        run_id,
                        scenario: spec.name.clone(),
                        mechanism: config.kind,
                        seed,
                        days,
                        status: RunStatus::Failed {
                            day: t,
                            class_id,
                            message: err.to_string(),
                        },
                    });
                }
            }
        }

        days.push(DayRecord {
            day: t,
            strategies,
            flows: flows.per_class,
            time_costs,
            money_costs,
            relative_gap,
            reinforced,
            parse_failures,
        });
    }

    Ok(RunRecord {
        run_id,
        scenario: spec.name.clone(),
        mechanism: config.kind,
        seed,
        days,
        status: RunStatus::Completed,
    })
}

//! Day-to-day traffic dynamics with representative agents.
//!
//! Each traveler class is represented by a single agent that maintains a mixed
//! strategy over its commuting options. Every simulated day the strategies
//! induce a flow profile, the network returns travel experiences, and a
//! learning mechanism — a conversational kernel that flags options worth
//! reinforcing, an explicit update rule, or both — revises the strategy.
//!
//! The crate is organised bottom-up:
//!
//! - [`network`]: directed road networks with flow-dependent link costs.
//! - [`assignment`]: equilibrium metrics and the averaging solver used as a
//!   benchmark oracle.
//! - [`strategy`]: mixed strategies, the two update rules, step schedules.
//! - [`scenarios`]: the three scenario families and their daily experiences.
//! - [`dialog`]: prompt rendering and reply parsing.
//! - [`kernel`]: live chat-completions client, scripted kernels, transcripts.
//! - [`mechanisms`]: the per-agent learning maps and the day loop.
//! - [`runner`]: experiment orchestration, ensembles, persistence.

pub mod assignment;
pub mod dialog;
pub mod exec;
pub mod kernel;
pub mod mechanisms;
pub mod network;
pub mod runner;
pub mod scenarios;
pub mod strategy;

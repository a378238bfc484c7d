//! Trajectory rewards: answer accuracy, a format penalty and a tool-use bonus.

use std::fmt;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{parse_turn, validate_format, FormatVerdict, ToolSchema};
use crate::trajectory::{Segment, Terminal, Trajectory};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RewardError {
    #[error("judge unavailable: {0}")]
    JudgeUnavailable(String),
    #[error("trajectory is not terminal")]
    NotTerminal,
}

/// When the tool bonus is paid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ToolRewardMode {
    /// Correct answer and at least one tool call.
    #[default]
    Conditional,
    /// At least one tool call.
    Unconditional,
    /// Never.
    None,
}

impl ToolRewardMode {
    pub const ALL: [ToolRewardMode; 3] = [
        ToolRewardMode::Conditional,
        ToolRewardMode::Unconditional,
        ToolRewardMode::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ToolRewardMode::Conditional => "conditional",
            ToolRewardMode::Unconditional => "unconditional",
            ToolRewardMode::None => "none",
        }
    }

    pub fn grants(self, correct: bool, tool_calls: usize) -> bool {
        match self {
            ToolRewardMode::Conditional => correct && tool_calls >= 1,
            ToolRewardMode::Unconditional => tool_calls >= 1,
            ToolRewardMode::None => false,
        }
    }
}

impl fmt::Display for ToolRewardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub r_acc: f64,
    pub r_format_penalty: f64,
    pub r_tool: f64,
    pub mode: ToolRewardMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            r_acc: 1.0,
            r_format_penalty: -0.5,
            r_tool: 0.5,
            mode: ToolRewardMode::Conditional,
        }
    }
}

impl RewardConfig {
    pub fn with_mode(mode: ToolRewardMode) -> Self {
        Self { mode, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub acc: f64,
    pub format: f64,
    pub tool: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn correct(&self) -> bool {
        self.acc > 0.0
    }
}

/// Decides whether an answer matches the gold label by asking some outside
/// authority (an LLM judge, a rule table, ...).
pub trait AnswerJudge: Send + Sync {
    fn judge(&self, question: &str, answer: &str, gold: &str) -> Result<bool, RewardError>;
}

#[derive(Clone)]
pub enum Verifier {
    ExactMatch,
    NumericTolerance { eps: f64 },
    ChoiceLetter,
    ExternalJudge(Arc<dyn AnswerJudge>),
}

impl fmt::Debug for Verifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verifier::ExactMatch => f.write_str("ExactMatch"),
            Verifier::NumericTolerance { eps } => write!(f, "NumericTolerance {{ eps: {eps} }}"),
            Verifier::ChoiceLetter => f.write_str("ChoiceLetter"),
            Verifier::ExternalJudge(_) => f.write_str("ExternalJudge"),
        }
    }
}

/// Lowercases, trims, collapses inner whitespace, and strips wrapping quotes
/// and trailing sentence punctuation.
pub fn normalize_answer(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let mut t = collapsed.as_str();
    loop {
        let before = t;
        t = t.trim_end_matches(['.', '!', '?', ';', ',']).trim();
        for (open, close) in [('"', '"'), ('\'', '\''), ('`', '`')] {
            if t.len() >= 2 && t.starts_with(open) && t.ends_with(close) {
                t = t[1..t.len() - 1].trim();
            }
        }
        if t == before {
            break;
        }
    }
    t.to_string()
}

fn number_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"[-+]?(?:\d[\d,]*\.?\d*|\.\d+)(?:[eE][-+]?\d+)?(?:\s*/\s*[-+]?(?:\d+\.?\d*|\.\d+))?")
            .expect("valid number regex")
    })
}

/// Parses the first number in `s`; accepts thousands separators, a trailing
/// percent sign and simple fractions like `1/3`.
pub fn parse_number(s: &str) -> Option<f64> {
    let m = number_regex().find(s)?;
    let token: String = m.as_str().chars().filter(|c| *c != ',' && !c.is_whitespace()).collect();
    match token.split_once('/') {
        Some((n, d)) => {
            let (n, d) = (n.parse::<f64>().ok()?, d.parse::<f64>().ok()?);
            (d != 0.0).then(|| n / d)
        }
        None => token.parse().ok(),
    }
}

fn choice_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^(?i:(?:the\s+)?(?:answer|option)\s*(?:is)?\s*:?\s*)?\(?([A-Za-z])\)?(?:[.):,]|\s|$)")
            .expect("valid choice regex")
    })
}

/// Extracts a leading option letter such as `B`, `(B)`, `B.` or `Option B`.
pub fn parse_choice(s: &str) -> Option<char> {
    let caps = choice_regex().captures(s.trim())?;
    caps.get(1)?.as_str().chars().next().map(|c| c.to_ascii_uppercase())
}

impl Verifier {
    pub fn is_correct(&self, question: &str, answer: &str, gold: &str) -> Result<bool, RewardError> {
        Ok(match self {
            Verifier::ExactMatch => normalize_answer(answer) == normalize_answer(gold),
            Verifier::NumericTolerance { eps } => match (parse_number(answer), parse_number(gold)) {
                (Some(a), Some(g)) => (a - g).abs() <= *eps,
                _ => false,
            },
            Verifier::ChoiceLetter => match (parse_choice(answer), parse_choice(gold)) {
                (Some(a), Some(g)) => a == g,
                _ => false,
            },
            Verifier::ExternalJudge(judge) => judge.judge(question, answer, gold)?,
        })
    }
}

/// `r_acc` if the answer verifies against `gold`, else 0.
pub fn accuracy_reward(answer: Option<&str>, gold: &str, v: &Verifier, r_acc: f64) -> Result<f64, RewardError> {
    accuracy_reward_for(answer, "", gold, v, r_acc)
}

pub fn accuracy_reward_for(
    answer: Option<&str>,
    question: &str,
    gold: &str,
    v: &Verifier,
    r_acc: f64,
) -> Result<f64, RewardError> {
    match answer {
        Some(a) if v.is_correct(question, a, gold)? => Ok(r_acc),
        _ => Ok(0.0),
    }
}

pub fn format_reward(verdict: &FormatVerdict, penalty: f64) -> f64 {
    if verdict.well_formed {
        0.0
    } else {
        penalty
    }
}

/// True when every policy turn is well formed and the trajectory did not end
/// malformed.
pub fn trajectory_well_formed(traj: &Trajectory, schemas: &[ToolSchema]) -> bool {
    if matches!(traj.terminal(), Some(Terminal::Malformed { .. })) {
        return false;
    }
    traj.segments().iter().all(|seg| match seg {
        Segment::Policy { text, .. } => validate_format(&parse_turn(text), schemas).well_formed,
        Segment::Observation { .. } => true,
    })
}

/// Scores a finished trajectory.
pub fn total_reward(
    traj: &Trajectory,
    question: &str,
    gold: &str,
    v: &Verifier,
    cfg: &RewardConfig,
    schemas: &[ToolSchema],
) -> Result<RewardBreakdown, RewardError> {
    let terminal = traj.terminal().ok_or(RewardError::NotTerminal)?;
    let answer = match terminal {
        Terminal::Answered { answer } => Some(answer.as_str()),
        Terminal::BudgetExhausted | Terminal::Malformed { .. } => None,
    };
    let acc = accuracy_reward_for(answer, question, gold, v, cfg.r_acc)?;
    let format = if trajectory_well_formed(traj, schemas) {
        0.0
    } else {
        cfg.r_format_penalty
    };
    Ok(combine(acc, format, traj.tool_call_count(), cfg))
}

/// Adds the tool bonus to already computed accuracy and format terms.
pub fn combine(acc: f64, format: f64, tool_calls: usize, cfg: &RewardConfig) -> RewardBreakdown {
    let tool = if cfg.mode.grants(acc > 0.0, tool_calls) {
        cfg.r_tool
    } else {
        0.0
    };
    RewardBreakdown {
        acc,
        format,
        tool,
        total: acc + format + tool,
    }
}

//! Run configuration: built-in defaults, then an optional TOML file, then
//! command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zoomtrace::curation::CurationConfig;
use zoomtrace::policy::MockPolicy;
use zoomtrace::remote::EndpointConfig;
use zoomtrace::reward::{RewardConfig, ToolRewardMode};
use zoomtrace::rollout::RolloutConfig;
use zoomtrace::toyrl::ToyConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Seeded stand-in keyed by sample id.
    #[default]
    Mock,
    /// Fixed list of turns.
    Scripted,
    /// Chat-completion endpoint.
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub mock: MockPolicy,
    /// Turns emitted by the scripted policy; the last one repeats.
    pub scripted_turns: Vec<String>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Mock,
            mock: MockPolicy::default(),
            scripted_turns: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VerifierKind {
    #[default]
    Exact,
    Numeric,
    Choice,
    /// Ask the judge endpoint.
    Judge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifierConfig {
    pub kind: VerifierKind,
    /// Relative tolerance for numeric answers.
    pub eps: f64,
    /// Endpoint used by the judge verifier; defaults to the policy endpoint.
    pub judge_endpoint: Option<EndpointConfig>,
    /// JSON object mapping sample id to the trusted answer, used by the
    /// label check during curation.
    pub truth_file: Option<PathBuf>,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            kind: VerifierKind::Exact,
            eps: 1e-6,
            judge_endpoint: None,
            truth_file: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupConfig {
    /// Rollouts per prompt.
    pub size: usize,
    /// Prompts rolled out together.
    pub prompts_per_batch: usize,
}

impl Default for GroupConfig {
    fn default() -> Self {
        Self {
            size: 16,
            prompts_per_batch: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for rollouts and the toy ablation.
    pub seed: u64,
    /// Expose the rotate tool next to zoom-in.
    pub enable_rotate: bool,
    /// Directory receiving every output file.
    pub output_dir: PathBuf,
    pub endpoint: EndpointConfig,
    pub policy: PolicyConfig,
    pub verifier: VerifierConfig,
    pub rollout: RolloutConfig,
    pub group: GroupConfig,
    pub reward: RewardConfig,
    pub curation: CurationConfig,
    pub toy: ToyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            enable_rotate: false,
            output_dir: PathBuf::from("out"),
            endpoint: EndpointConfig::default(),
            policy: PolicyConfig::default(),
            verifier: VerifierConfig::default(),
            rollout: RolloutConfig::default(),
            group: GroupConfig::default(),
            reward: RewardConfig::default(),
            curation: CurationConfig::default(),
            toy: ToyConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Seed for rollouts, curation and the toy ablation [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory [default: out]
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Policy backend [default: mock]
    #[arg(long, global = true, value_enum)]
    pub policy: Option<PolicyKind>,
    /// Tool reward mode: conditional, unconditional or none [default: conditional]
    #[arg(long, global = true, value_parser = parse_mode)]
    pub mode: Option<ToolRewardMode>,
    /// Rollouts per prompt [default: 16]
    #[arg(long, global = true)]
    pub group_size: Option<usize>,
    /// Concurrent rollouts, 0 for all cores [default: 0]
    #[arg(long, global = true)]
    pub max_concurrency: Option<usize>,
    /// Chat-completion URL [default: http://127.0.0.1:8000/v1/chat/completions]
    #[arg(long, global = true)]
    pub endpoint_url: Option<String>,
    /// Toy training steps [default: 500]
    #[arg(long, global = true)]
    pub steps: Option<usize>,
}

fn parse_mode(s: &str) -> Result<ToolRewardMode, String> {
    ToolRewardMode::ALL
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| format!("expected one of conditional, unconditional, none; got '{s}'"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Defaults, then `path` if given, then `o`; validated.
    pub fn load(path: Option<&Path>, o: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply(o);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
            self.curation.seed = s;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        if let Some(p) = o.policy {
            self.policy.kind = p;
        }
        if let Some(m) = o.mode {
            self.reward.mode = m;
        }
        if let Some(g) = o.group_size {
            self.group.size = g;
        }
        if let Some(c) = o.max_concurrency {
            self.rollout.max_concurrency = c;
        }
        if let Some(u) = &o.endpoint_url {
            self.endpoint.url = u.clone();
        }
        if let Some(s) = o.steps {
            self.toy.steps = s;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !self.rollout.budget.is_valid() {
            return bad("rollout.budget: max_tool_calls and max_policy_tokens must be positive".into());
        }
        if !(self.rollout.temperature.is_finite() && self.rollout.temperature >= 0.0) {
            return bad("rollout.temperature must be finite and non-negative".into());
        }
        if self.rollout.tools.patch_size == 0 || self.rollout.tools.min_side.is_nan() || self.rollout.tools.min_side < 1.0 {
            return bad("rollout.tools: patch_size and min_side must be at least 1".into());
        }
        if self.group.size < 2 || self.group.prompts_per_batch < 1 {
            return bad("group.size must be at least 2 and group.prompts_per_batch at least 1".into());
        }
        let r = &self.reward;
        if ![r.r_acc, r.r_format_penalty, r.r_tool].iter().all(|v| v.is_finite()) || r.r_acc <= 0.0 || r.r_format_penalty > 0.0 || r.r_tool < 0.0 {
            return bad("reward: r_acc > 0, r_format_penalty <= 0 and r_tool >= 0 required".into());
        }
        if !(self.verifier.eps.is_finite() && self.verifier.eps >= 0.0) {
            return bad("verifier.eps must be non-negative".into());
        }
        let c = &self.curation;
        if c.k < 4 {
            return bad(format!("curation.k must be at least 4, got {}", c.k));
        }
        if !(0.0..=1.0).contains(&c.delta) {
            return bad("curation.delta must be in [0, 1]".into());
        }
        c.weights
            .validate()
            .map_err(|e| CliError::Config(format!("curation.weights: {e}")))?;
        self.toy.validate().map_err(|e| CliError::Config(format!("toy: {e}")))?;
        if self.policy.kind == PolicyKind::Scripted && self.policy.scripted_turns.is_empty() {
            return bad("policy.scripted_turns must not be empty for the scripted policy".into());
        }
        if !(0.0..=1.0).contains(&self.policy.mock.accuracy) {
            return bad("policy.mock.accuracy must be in [0, 1]".into());
        }
        let e = &self.endpoint;
        if e.url.is_empty() || e.timeout_ms == 0 || e.backoff_base_ms > e.backoff_max_ms {
            return bad("endpoint: url non-empty, timeout_ms > 0 and backoff_base_ms <= backoff_max_ms required".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }
}

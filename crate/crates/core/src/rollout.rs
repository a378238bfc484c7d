//! Multi-turn rollouts: generate, parse, run tools, append observations,
//! repeat until an answer, a malformed turn or the budget ends the episode.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::grpo::{Group, GrpoError};
use crate::policy::{stable_hash, GenerateParams, PolicyClient, PROVIDED_REGION_NOTE, STOP_MARKERS};
use crate::protocol::{PromptTemplate, ToolCall, ANSWER_CLOSE, ANSWER_OPEN, TOOL_CALL_CLOSE, TOOL_CALL_OPEN};
use crate::reward::{combine, total_reward, trajectory_well_formed, RewardBreakdown, RewardConfig, Verifier};
use crate::toolbox::{estimate_text_tokens, execute, BBox, ImageStore, RasterImage, ToolConfig};
pub use crate::trajectory::Budget;
use crate::trajectory::{state_view, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutPlan {
    pub prompts_per_batch: usize,
    pub rollouts_per_prompt: usize,
    pub seed: u64,
}

impl Default for RolloutPlan {
    fn default() -> Self {
        Self {
            prompts_per_batch: 256,
            rollouts_per_prompt: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub budget: Budget,
    pub temperature: f64,
    /// Upper bound on concurrent rollouts; 0 uses every available core.
    pub max_concurrency: usize,
    pub tools: ToolConfig,
    pub max_tokens_per_turn: Option<usize>,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            budget: Budget::default(),
            temperature: 1.0,
            max_concurrency: 0,
            tools: ToolConfig::default(),
            max_tokens_per_turn: None,
        }
    }
}

/// One prompt to roll out.
#[derive(Debug, Clone)]
pub struct RolloutTask {
    pub id: String,
    pub question: String,
    pub image: RasterImage,
    pub gold: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutedCall {
    pub tool_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RolloutOutput {
    pub trajectory: Trajectory,
    pub executed: Vec<ExecutedCall>,
    pub images: ImageStore,
    pub retries: u32,
    pub tokens_estimated: bool,
}

#[derive(Debug, Clone)]
pub struct ScoredGroup {
    pub group: Group,
    pub executed: Vec<Vec<ExecutedCall>>,
}

/// Scoring setup for [`RolloutEngine::run_group`].
#[derive(Debug, Clone)]
pub struct RewardSpec {
    pub config: RewardConfig,
    pub verifier: Verifier,
}

/// Re-appends the stop marker an endpoint strips from the end of a turn.
pub fn close_dangling_tag(text: &str) -> String {
    let mut out = text.to_string();
    if text.matches(TOOL_CALL_OPEN).count() > text.matches(TOOL_CALL_CLOSE).count() {
        out.push_str(TOOL_CALL_CLOSE);
    } else if text.matches(ANSWER_OPEN).count() > text.matches(ANSWER_CLOSE).count() {
        out.push_str(ANSWER_CLOSE);
    }
    out
}

/// Seed for rollout `index` of prompt `prompt_id`.
pub fn rollout_seed(base: u64, prompt_id: &str, index: usize) -> u64 {
    stable_hash(&[b"rollout", &base.to_le_bytes(), prompt_id.as_bytes(), &(index as u64).to_le_bytes()])
}

pub struct RolloutEngine {
    template: PromptTemplate,
    cfg: RolloutConfig,
    pool: Arc<rayon::ThreadPool>,
}

impl RolloutEngine {
    pub fn new(template: PromptTemplate, cfg: RolloutConfig) -> Self {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.max_concurrency)
            .build()
            .expect("rollout thread pool");
        Self {
            template,
            cfg,
            pool: Arc::new(pool),
        }
    }

    /// Same engine and worker pool with a different budget.
    pub fn with_budget(&self, budget: Budget) -> Self {
        Self {
            template: self.template.clone(),
            cfg: RolloutConfig { budget, ..self.cfg.clone() },
            pool: Arc::clone(&self.pool),
        }
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.template
    }

    pub fn config(&self) -> &RolloutConfig {
        &self.cfg
    }

    pub fn run_rollout(&self, task: &RolloutTask, policy: &dyn PolicyClient, seed: u64) -> RolloutOutput {
        self.run_rollout_with_crops(task, policy, seed, &[])
    }

    /// Rollout whose first observations are crops of `forced` boxes, each
    /// introduced by a synthetic zoom turn and noted as a provided region.
    pub fn run_rollout_with_crops(
        &self,
        task: &RolloutTask,
        policy: &dyn PolicyClient,
        seed: u64,
        forced: &[BBox],
    ) -> RolloutOutput {
        let mut traj = Trajectory::new(&task.id, &task.image.id, self.cfg.budget);
        let mut images = ImageStore::new();
        images.insert(task.image.clone());
        let mut executed = Vec::new();
        let mut retries = 0;
        let mut tokens_estimated = false;

        for b in forced {
            let call = ToolCall::zoom(b.to_array());
            let text = format!("<think>{PROVIDED_REGION_NOTE}</think>\n{TOOL_CALL_OPEN}\n{}\n{TOOL_CALL_CLOSE}", call.body_json());
            if traj.is_terminal() {
                break;
            }
            if traj.append_policy_text(&text, estimate_text_tokens(&text).max(1)).is_err() || traj.is_terminal() {
                break;
            }
            self.observe(&mut traj, &mut images, &mut executed, &call, task, Some(PROVIDED_REGION_NOTE));
        }

        let params = GenerateParams {
            stop: STOP_MARKERS.iter().map(|s| s.to_string()).collect(),
            temperature: self.cfg.temperature,
            seed: Some(seed),
            max_tokens: self.cfg.max_tokens_per_turn,
        };
        while !traj.is_terminal() {
            let view = match state_view(&self.template, &task.question, &traj) {
                Ok(v) => v,
                Err(e) => {
                    traj.fail(format!("invalid prompt: {e}"));
                    break;
                }
            };
            let generation = match policy.generate(&view, &images, &params) {
                Ok(g) => g,
                Err(e) => {
                    warn!(prompt = %task.id, error = %e, "rollout aborted");
                    traj.fail(e.to_string());
                    break;
                }
            };
            retries += generation.retries;
            tokens_estimated |= generation.estimated;
            let text = close_dangling_tag(&generation.text);
            let parsed = match traj.append_policy_text(&text, generation.token_len.max(1)) {
                Ok(p) => p,
                Err(e) => {
                    traj.fail(e.to_string());
                    break;
                }
            };
            if traj.is_terminal() {
                break;
            }
            for call in &parsed.tool_calls {
                self.observe(&mut traj, &mut images, &mut executed, call, task, None);
            }
        }
        RolloutOutput {
            trajectory: traj,
            executed,
            images,
            retries,
            tokens_estimated,
        }
    }

    fn observe(
        &self,
        traj: &mut Trajectory,
        images: &mut ImageStore,
        executed: &mut Vec<ExecutedCall>,
        call: &ToolCall,
        task: &RolloutTask,
        note_prefix: Option<&str>,
    ) {
        let obs = execute(call, &task.image, &self.cfg.tools);
        let token_len = obs.token_len(&self.cfg.tools);
        let note = match note_prefix {
            Some(p) => format!("{p}: {}", obs.note),
            None => obs.note.clone(),
        };
        let image_ref = obs.image.clone().map(|img| images.insert(img));
        executed.push(ExecutedCall {
            tool_name: obs.tool_name.clone(),
            bbox: obs.bbox,
            error: obs.error.as_ref().map(|e| e.to_string()),
        });
        traj.append_observation(&obs.tool_name, image_ref, &note, token_len)
            .expect("observation follows a pending call");
    }

    /// Scores one trajectory. A judge failure scores the answer as wrong.
    pub fn score(&self, traj: &Trajectory, task: &RolloutTask, reward: &RewardSpec) -> RewardBreakdown {
        total_reward(traj, &task.question, &task.gold, &reward.verifier, &reward.config, self.template.tools())
            .unwrap_or_else(|e| {
                warn!(prompt = %task.id, error = %e, "scoring as incorrect");
                let format = if trajectory_well_formed(traj, self.template.tools()) {
                    0.0
                } else {
                    reward.config.r_format_penalty
                };
                combine(0.0, format, traj.tool_call_count(), &reward.config)
            })
    }

    /// `n` rollouts of one prompt with distinct seeds, scored and grouped.
    pub fn run_group(
        &self,
        task: &RolloutTask,
        n: usize,
        policy: &dyn PolicyClient,
        reward: &RewardSpec,
        base_seed: u64,
    ) -> Result<ScoredGroup, GrpoError> {
        let mut groups = self.run_batch(std::slice::from_ref(task), n, policy, reward, base_seed)?;
        Ok(groups.remove(0))
    }

    /// Rolls out every task `n` times in parallel; output order follows input order.
    pub fn run_batch(
        &self,
        tasks: &[RolloutTask],
        n: usize,
        policy: &dyn PolicyClient,
        reward: &RewardSpec,
        base_seed: u64,
    ) -> Result<Vec<ScoredGroup>, GrpoError> {
        if n < 2 {
            return Err(GrpoError::GroupTooSmall(n));
        }
        let jobs: Vec<(usize, usize)> = (0..tasks.len()).flat_map(|t| (0..n).map(move |i| (t, i))).collect();
        let results: Vec<(Trajectory, RewardBreakdown, Vec<ExecutedCall>)> = self.pool.install(|| {
            jobs.par_iter()
                .map(|&(t, i)| {
                    let task = &tasks[t];
                    let out = self.run_rollout(task, policy, rollout_seed(base_seed, &task.id, i));
                    let r = self.score(&out.trajectory, task, reward);
                    (out.trajectory, r, out.executed)
                })
                .collect()
        });
        let mut it = results.into_iter();
        let mut groups = Vec::with_capacity(tasks.len());
        for task in tasks {
            let mut trajs = Vec::with_capacity(n);
            let mut rewards = Vec::with_capacity(n);
            let mut executed = Vec::with_capacity(n);
            for (t, r, e) in it.by_ref().take(n) {
                trajs.push(t);
                rewards.push(r);
                executed.push(e);
            }
            groups.push(ScoredGroup {
                group: Group::new(task.id.clone(), trajs, rewards)?,
                executed,
            });
        }
        Ok(groups)
    }

    /// Runs `f` on the engine's worker pool.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }
}

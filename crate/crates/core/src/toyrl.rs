//! A needle-in-a-grid task and a tabular softmax policy trained with
//! group-relative REINFORCE, using the same trajectory, reward and advantage
//! code as real rollouts.
//!
//! Each episode shows `K` regions, each holding one glyph from an alphabet of
//! `G`. Glyphs are only legible inside a crop of their region. Two episode
//! kinds exist:
//!
//! * cued: the question names a marker that sits in the target region. The
//!   policy has one region distribution per marker, so it can learn where
//!   each marker lives. Answering blind is a uniform guess.
//! * coarse: the target glyph is printed large enough to be read off the full
//!   image with probability `coarse_accuracy`, but nothing says where it is,
//!   so zooming means searching.
//!
//! After zooming, the answer is read from the crops seen so far; when several
//! regions were inspected the policy cannot tell which glyph was asked for and
//! picks one of them at random. Zoom turns occasionally come out malformed
//! (`format_slip`), which costs the format penalty.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grpo::group_advantages;
use crate::policy::stable_hash;
use crate::protocol::{ToolSchema, ZOOM_TOOL};
use crate::reward::{total_reward, RewardBreakdown, RewardConfig, ToolRewardMode, Verifier};
use crate::toolbox::{iou, BBox};
use crate::trajectory::{Budget, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToyError {
    #[error("gradient is not finite")]
    NonFiniteGradient,
    #[error("at least {min} steps required, got {got}")]
    TooFewSteps { min: usize, got: usize },
    #[error("invalid toy config: {0}")]
    InvalidConfig(String),
}

pub const ZOOM_TURN_TOKENS: usize = 2;
pub const ANSWER_TURN_TOKENS: usize = 2;
pub const OBSERVATION_TOKENS: usize = 4;
pub const MIN_ABLATION_STEPS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    /// Number of candidate regions.
    pub regions: usize,
    /// Glyph alphabet size.
    pub glyphs: usize,
    /// Side of the square rendered image in pixels.
    pub render_size: u32,
    /// Share of coarse episodes.
    pub coarse_rate: f64,
    /// Chance of reading a coarse glyph correctly without zooming.
    pub coarse_accuracy: f64,
    /// Chance that a zoom turn is emitted without its think span.
    pub format_slip: f64,
    /// Crops make glyphs legible. Off gives a control task where zooming
    /// carries no information.
    pub crops_legible: bool,
    /// Initial zoom-vs-answer logit before anything has been inspected.
    pub init_zoom_logit: f64,
    /// Initial zoom-vs-answer logit after at least one crop.
    pub init_followup_zoom_logit: f64,
    pub learning_rate: f64,
    pub group_size: usize,
    pub batch_prompts: usize,
    pub steps: usize,
    pub max_tool_calls: usize,
    pub r_acc: f64,
    pub r_format_penalty: f64,
    pub r_tool: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            regions: 8,
            glyphs: 10,
            render_size: 1024,
            coarse_rate: 0.1,
            coarse_accuracy: 0.4,
            format_slip: 0.08,
            crops_legible: true,
            init_zoom_logit: 0.0,
            init_followup_zoom_logit: 2.5,
            learning_rate: 0.05,
            group_size: 16,
            batch_prompts: 64,
            steps: 500,
            max_tool_calls: 6,
            r_acc: 1.0,
            r_format_penalty: -0.5,
            r_tool: 0.5,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        let bad = |m: &str| Err(ToyError::InvalidConfig(m.to_string()));
        if self.regions < 2 {
            return bad("regions must be at least 2");
        }
        if self.glyphs < 2 || self.glyphs > 26 {
            return bad("glyphs must be in 2..=26");
        }
        if self.render_size < self.regions as u32 {
            return bad("render_size too small for the grid");
        }
        for (name, p) in [
            ("coarse_rate", self.coarse_rate),
            ("coarse_accuracy", self.coarse_accuracy),
            ("format_slip", self.format_slip),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ToyError::InvalidConfig(format!("{name} must be in [0, 1]")));
            }
        }
        if self.group_size < 2 || self.batch_prompts < 1 || self.max_tool_calls < 1 {
            return bad("group_size >= 2, batch_prompts >= 1 and max_tool_calls >= 1 required");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    pub fn reward(&self, mode: ToolRewardMode) -> RewardConfig {
        RewardConfig {
            r_acc: self.r_acc,
            r_format_penalty: self.r_format_penalty,
            r_tool: self.r_tool,
            mode,
        }
    }

    pub fn budget(&self) -> Budget {
        Budget::new(self.max_tool_calls, 20480)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeKind {
    Cued,
    Coarse,
}

pub fn glyph_char(i: usize) -> char {
    (b'A' + i as u8) as char
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeedleGridEnv {
    pub k: usize,
    pub g: usize,
    pub kind: EpisodeKind,
    pub target_region: usize,
    /// Glyph index shown in each region.
    pub region_glyphs: Vec<usize>,
    pub render_size: u32,
    pub coarse_accuracy: f64,
    pub crops_legible: bool,
    pub seed: u64,
}

impl NeedleGridEnv {
    pub fn sample(cfg: &ToyConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = if rng.gen::<f64>() < cfg.coarse_rate {
            EpisodeKind::Coarse
        } else {
            EpisodeKind::Cued
        };
        let target_region = rng.gen_range(0..cfg.regions);
        let target_glyph = rng.gen_range(0..cfg.glyphs);
        let others: Vec<usize> = (0..cfg.glyphs).filter(|&g| g != target_glyph).collect();
        let mut pool = others.clone();
        let region_glyphs = (0..cfg.regions)
            .map(|r| {
                if r == target_region {
                    return target_glyph;
                }
                if pool.is_empty() {
                    pool = others.clone();
                }
                pool.swap_remove(rng.gen_range(0..pool.len()))
            })
            .collect();
        Self {
            k: cfg.regions,
            g: cfg.glyphs,
            kind,
            target_region,
            region_glyphs,
            render_size: cfg.render_size,
            coarse_accuracy: cfg.coarse_accuracy,
            crops_legible: cfg.crops_legible,
            seed,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        let cols = (self.k as f64).sqrt().ceil() as usize;
        (cols, self.k.div_ceil(cols))
    }

    pub fn region_box(&self, r: usize) -> BBox {
        let (cols, rows) = self.grid();
        let (cw, ch) = (self.render_size as f64 / cols as f64, self.render_size as f64 / rows as f64);
        let (c, row) = ((r % cols) as f64, (r / cols) as f64);
        BBox::new(c * cw, row * ch, (c + 1.0) * cw, (row + 1.0) * ch)
    }

    pub fn target_glyph(&self) -> char {
        glyph_char(self.region_glyphs[self.target_region])
    }

    /// Region distribution the policy should use: one per marker, plus a
    /// shared one for coarse episodes.
    pub fn cue_row(&self) -> usize {
        match self.kind {
            EpisodeKind::Cued => self.target_region,
            EpisodeKind::Coarse => self.k,
        }
    }

    pub fn question(&self) -> String {
        match self.kind {
            EpisodeKind::Cued => format!("Which glyph sits next to marker {}?", self.target_region),
            EpisodeKind::Coarse => "Which glyph is printed in large type?".to_string(),
        }
    }

    /// Glyphs legible in `crop`: those whose region lies inside the crop,
    /// provided the crop is at most twice the region's area.
    pub fn legible(&self, crop: &BBox) -> Vec<(usize, char)> {
        if !self.crops_legible {
            return Vec::new();
        }
        (0..self.k)
            .filter(|&r| {
                let b = self.region_box(r);
                b.x1 >= crop.x1 && b.y1 >= crop.y1 && b.x2 <= crop.x2 && b.y2 <= crop.y2 && crop.area() <= 2.0 * b.area()
            })
            .map(|r| (r, glyph_char(self.region_glyphs[r])))
            .collect()
    }
}

/// Index into the zoom-vs-answer table.
pub fn act_context(kind: EpisodeKind, inspected: bool) -> usize {
    let base = match kind {
        EpisodeKind::Cued => 0,
        EpisodeKind::Coarse => 2,
    };
    base + usize::from(inspected)
}

pub const ACT_CONTEXTS: usize = 4;
pub const ZOOM: usize = 0;
pub const ANSWER: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyAction {
    /// Zoom (`choice == ZOOM`) or answer in context `context`.
    Act { context: usize, choice: usize },
    Region { row: usize, region: usize },
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax_at(logits: &[f64], i: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits[i] - lse
}

fn sample_index(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut c = 0.0;
    for (i, v) in p.iter().enumerate() {
        c += v;
        if u < c {
            return i;
        }
    }
    p.len() - 1
}

/// Parameters (or a gradient with the same shape).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyParams {
    /// Zoom/answer logits per [`act_context`].
    pub act: Vec<[f64; 2]>,
    /// Region logits, one row per marker plus one for coarse episodes.
    pub region: Vec<Vec<f64>>,
}

impl ToyParams {
    pub fn zeros(k: usize) -> Self {
        Self {
            act: vec![[0.0; 2]; ACT_CONTEXTS],
            region: vec![vec![0.0; k]; k + 1],
        }
    }

    pub fn len(&self) -> usize {
        self.act.len() * 2 + self.region.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.act.iter().flat_map(|a| a.iter().copied()).collect();
        for row in &self.region {
            v.extend_from_slice(row);
        }
        v
    }

    pub fn assign(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for a in &mut self.act {
            for x in a.iter_mut() {
                *x = it.next().expect("flat vector long enough");
            }
        }
        for row in &mut self.region {
            for x in row.iter_mut() {
                *x = it.next().expect("flat vector long enough");
            }
        }
    }

    pub fn add_scaled(&mut self, other: &ToyParams, scale: f64) {
        for (a, b) in self.act.iter_mut().zip(&other.act) {
            a[0] += scale * b[0];
            a[1] += scale * b[1];
        }
        for (ra, rb) in self.region.iter_mut().zip(&other.region) {
            for (x, y) in ra.iter_mut().zip(rb) {
                *x += scale * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub params: ToyParams,
    pub learning_rate: f64,
    pub format_slip: f64,
}

impl ToyPolicy {
    pub fn new(cfg: &ToyConfig) -> Self {
        let mut params = ToyParams::zeros(cfg.regions);
        for kind in [EpisodeKind::Cued, EpisodeKind::Coarse] {
            params.act[act_context(kind, false)][ZOOM] = cfg.init_zoom_logit;
            params.act[act_context(kind, true)][ZOOM] = cfg.init_followup_zoom_logit;
        }
        Self {
            params,
            learning_rate: cfg.learning_rate,
            format_slip: cfg.format_slip,
        }
    }

    pub fn act_probs(&self, context: usize) -> Vec<f64> {
        softmax(&self.params.act[context])
    }

    pub fn region_probs(&self, row: usize) -> Vec<f64> {
        softmax(&self.params.region[row])
    }

    pub fn log_prob(&self, actions: &[ToyAction]) -> f64 {
        actions
            .iter()
            .map(|a| match *a {
                ToyAction::Act { context, choice } => log_softmax_at(&self.params.act[context], choice),
                ToyAction::Region { row, region } => log_softmax_at(&self.params.region[row], region),
            })
            .sum()
    }

    /// Gradient of [`Self::log_prob`]: `onehot(choice) - softmax` per decision.
    pub fn grad_log_prob(&self, actions: &[ToyAction]) -> ToyParams {
        let mut g = ToyParams::zeros(self.params.region.len() - 1);
        self.accumulate_grad(actions, 1.0, &mut g);
        g
    }

    fn accumulate_grad(&self, actions: &[ToyAction], scale: f64, g: &mut ToyParams) {
        for a in actions {
            match *a {
                ToyAction::Act { context, choice } => {
                    let p = self.act_probs(context);
                    for (j, pj) in p.iter().enumerate() {
                        g.act[context][j] += scale * (f64::from(u8::from(j == choice)) - pj);
                    }
                }
                ToyAction::Region { row, region } => {
                    let p = self.region_probs(row);
                    for (j, pj) in p.iter().enumerate() {
                        g.region[row][j] += scale * (f64::from(u8::from(j == region)) - pj);
                    }
                }
            }
        }
    }

    /// `sum_i adv_i * grad log pi(actions_i)` over one group.
    pub fn group_gradient(&self, rollouts: &[ToyRollout], advantages: &[f64]) -> ToyParams {
        let mut g = ToyParams::zeros(self.params.region.len() - 1);
        for (r, &a) in rollouts.iter().zip(advantages) {
            if a != 0.0 {
                self.accumulate_grad(&r.actions, a, &mut g);
            }
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyRollout {
    pub trajectory: Trajectory,
    pub actions: Vec<ToyAction>,
    pub zooms: usize,
    pub target_hits: usize,
    pub answer: char,
}

/// Plays one episode through the shared trajectory model.
pub fn toy_rollout(env: &NeedleGridEnv, policy: &ToyPolicy, budget: &Budget, rng: &mut impl Rng) -> ToyRollout {
    assert!(budget.max_tool_calls >= 1, "toy rollouts need a tool budget");
    let mut traj = Trajectory::new(format!("toy-{}", env.seed), format!("needle-grid-{}", env.seed), *budget);
    let mut actions = Vec::new();
    let mut read: Vec<(usize, char)> = Vec::new();
    let mut zooms = 0;
    let mut target_hits = 0;
    let target_box = env.region_box(env.target_region);
    loop {
        let inspected = zooms > 0;
        if traj.tool_call_count() < budget.max_tool_calls {
            let context = act_context(env.kind, inspected);
            let choice = sample_index(&policy.act_probs(context), rng);
            actions.push(ToyAction::Act { context, choice });
            if choice == ZOOM {
                let row = env.cue_row();
                let region = sample_index(&policy.region_probs(row), rng);
                actions.push(ToyAction::Region { row, region });
                let b = env.region_box(region);
                let call = format!(
                    "<tool_call>{{\"name\": \"{ZOOM_TOOL}\", \"arguments\": {{\"bbox_2d\": [{}, {}, {}, {}]}}}}</tool_call>",
                    b.x1, b.y1, b.x2, b.y2
                );
                let text = if rng.gen::<f64>() < policy.format_slip {
                    call
                } else {
                    format!("<think>inspect region {region}</think>{call}")
                };
                traj.append_policy_text(&text, ZOOM_TURN_TOKENS).expect("open trajectory");
                zooms += 1;
                if iou(&b, &target_box) >= 0.5 {
                    target_hits += 1;
                }
                let legible = env.legible(&b);
                let note = match legible.first() {
                    Some((r, g)) => format!("region {r} shows glyph {g}"),
                    None => format!("region {region} is unreadable"),
                };
                for item in legible {
                    if !read.contains(&item) {
                        read.push(item);
                    }
                }
                traj.append_observation(ZOOM_TOOL, None, &note, OBSERVATION_TOKENS)
                    .expect("observation follows the call");
                continue;
            }
        }
        let answer = if !read.is_empty() {
            read[rng.gen_range(0..read.len())].1
        } else {
            match env.kind {
                EpisodeKind::Coarse if rng.gen::<f64>() < env.coarse_accuracy => env.target_glyph(),
                EpisodeKind::Coarse => {
                    let target = env.region_glyphs[env.target_region];
                    let mut g = rng.gen_range(0..env.g - 1);
                    if g >= target {
                        g += 1;
                    }
                    glyph_char(g)
                }
                EpisodeKind::Cued => glyph_char(rng.gen_range(0..env.g)),
            }
        };
        traj.append_policy_text(&format!("<think>reading</think><answer>{answer}</answer>"), ANSWER_TURN_TOKENS)
            .expect("open trajectory");
        return ToyRollout {
            trajectory: traj,
            actions,
            zooms,
            target_hits,
            answer,
        };
    }
}

pub fn score_toy(rollout: &ToyRollout, env: &NeedleGridEnv, reward: &RewardConfig) -> RewardBreakdown {
    total_reward(
        &rollout.trajectory,
        &env.question(),
        &env.target_glyph().to_string(),
        &Verifier::ExactMatch,
        reward,
        &[ToolSchema::zoom_in()],
    )
    .expect("exact-match scoring of a terminal trajectory")
}

/// `θ + η Σ_i adv_i ∇log π(τ_i)` for one group.
pub fn reinforce_update(policy: &ToyPolicy, rollouts: &[ToyRollout], advantages: &[f64]) -> Result<ToyPolicy, ToyError> {
    let g = policy.group_gradient(rollouts, advantages);
    if !g.is_finite() {
        return Err(ToyError::NonFiniteGradient);
    }
    let mut next = policy.clone();
    next.params.add_scaled(&g, policy.learning_rate);
    if !next.params.is_finite() {
        return Err(ToyError::NonFiniteGradient);
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRow {
    pub step: usize,
    pub tool_rate: f64,
    pub mean_tool_calls: f64,
    pub accuracy: f64,
    pub mean_reward: f64,
    pub response_len: f64,
    pub region_hit_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DynamicsLog {
    pub rows: Vec<DynamicsRow>,
}

fn mean_of(rows: &[DynamicsRow], f: impl Fn(&DynamicsRow) -> f64) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

impl DynamicsLog {
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn last(&self, n: usize) -> &[DynamicsRow] {
        &self.rows[self.rows.len().saturating_sub(n)..]
    }

    pub fn first(&self, n: usize) -> &[DynamicsRow] {
        &self.rows[..n.min(self.rows.len())]
    }

    pub fn summary(&self) -> AblationSummary {
        let fin = self.last(FINAL_WINDOW);
        AblationSummary {
            final_tool_rate: mean_of(fin, |r| r.tool_rate),
            final_accuracy: mean_of(fin, |r| r.accuracy),
            final_mean_tool_calls: mean_of(fin, |r| r.mean_tool_calls),
            final_region_hit_rate: mean_of(fin, |r| r.region_hit_rate),
            early_accuracy: mean_of(self.first(EARLY_ACC_WINDOW), |r| r.accuracy),
            early_peak_calls: self
                .first(PEAK_WINDOW)
                .iter()
                .map(|r| r.mean_tool_calls)
                .fold(0.0, f64::max),
            late_mean_calls: mean_of(self.last(LATE_CALLS_WINDOW), |r| r.mean_tool_calls),
        }
    }
}

pub const FINAL_WINDOW: usize = 20;
pub const EARLY_ACC_WINDOW: usize = 50;
pub const PEAK_WINDOW: usize = 150;
pub const LATE_CALLS_WINDOW: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub final_tool_rate: f64,
    pub final_accuracy: f64,
    pub final_mean_tool_calls: f64,
    pub final_region_hit_rate: f64,
    pub early_accuracy: f64,
    pub early_peak_calls: f64,
    pub late_mean_calls: f64,
}

impl AblationSummary {
    /// Tool calls peak early and settle at least 20% lower, while accuracy
    /// improves.
    pub fn explore_then_exploit(&self) -> bool {
        self.early_peak_calls >= 1.2 * self.late_mean_calls && self.final_accuracy > self.early_accuracy
    }
}

/// Step-by-step trainer; [`run_ablation`] drives it for a fixed number of steps.
pub struct ToyTrainer {
    pub cfg: ToyConfig,
    pub mode: ToolRewardMode,
    pub policy: ToyPolicy,
    pub seed: u64,
    step: usize,
}

struct GroupOutcome {
    grad: ToyParams,
    rows: [f64; 6],
}

impl ToyTrainer {
    pub fn new(cfg: ToyConfig, mode: ToolRewardMode, seed: u64) -> Result<Self, ToyError> {
        cfg.validate()?;
        let policy = ToyPolicy::new(&cfg);
        Ok(Self {
            cfg,
            mode,
            policy,
            seed,
            step: 0,
        })
    }

    fn run_group(&self, group: usize) -> Result<GroupOutcome, ToyError> {
        let step = (self.step as u64).to_le_bytes();
        let g = (group as u64).to_le_bytes();
        let seed = self.seed.to_le_bytes();
        let env = NeedleGridEnv::sample(&self.cfg, stable_hash(&[b"toy-env", &seed, &step, &g]));
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[b"toy-rollouts", &seed, &step, &g]));
        let reward = self.cfg.reward(self.mode);
        let budget = self.cfg.budget();
        let rollouts: Vec<ToyRollout> = (0..self.cfg.group_size)
            .map(|_| toy_rollout(&env, &self.policy, &budget, &mut rng))
            .collect();
        let rewards: Vec<RewardBreakdown> = rollouts.iter().map(|r| score_toy(r, &env, &reward)).collect();
        let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
        let (adv, _) = group_advantages(&totals).expect("group size validated");
        let grad = self.policy.group_gradient(&rollouts, &adv);
        if !grad.is_finite() {
            return Err(ToyError::NonFiniteGradient);
        }
        let mut rows = [0.0; 6];
        for (r, rw) in rollouts.iter().zip(&rewards) {
            rows[0] += f64::from(u8::from(r.zooms > 0));
            rows[1] += r.zooms as f64;
            rows[2] += f64::from(u8::from(rw.correct()));
            rows[3] += rw.total;
            rows[4] += r.trajectory.policy_tokens() as f64;
            rows[5] += r.target_hits as f64;
        }
        Ok(GroupOutcome { grad, rows })
    }

    /// One batch: sample environments, roll out groups, score, compute
    /// group advantages and apply the mean of the per-group updates.
    pub fn step(&mut self) -> Result<DynamicsRow, ToyError> {
        let outcomes: Vec<GroupOutcome> = (0..self.cfg.batch_prompts)
            .into_par_iter()
            .map(|g| self.run_group(g))
            .collect::<Result<_, _>>()?;
        let mut total = ToyParams::zeros(self.cfg.regions);
        let mut sums = [0.0; 6];
        for o in &outcomes {
            total.add_scaled(&o.grad, 1.0);
            for (s, v) in sums.iter_mut().zip(o.rows) {
                *s += v;
            }
        }
        let scale = self.policy.learning_rate / self.cfg.batch_prompts as f64;
        self.policy.params.add_scaled(&total, scale);
        if !self.policy.params.is_finite() {
            return Err(ToyError::NonFiniteGradient);
        }
        self.step += 1;
        let n = (self.cfg.batch_prompts * self.cfg.group_size) as f64;
        Ok(DynamicsRow {
            step: self.step,
            tool_rate: sums[0] / n,
            mean_tool_calls: sums[1] / n,
            accuracy: sums[2] / n,
            mean_reward: sums[3] / n,
            response_len: sums[4] / n,
            region_hit_rate: if sums[1] > 0.0 { sums[5] / sums[1] } else { 0.0 },
        })
    }
}

/// Full training run for one reward mode.
pub fn run_ablation(cfg: &ToyConfig, mode: ToolRewardMode, steps: usize, seed: u64) -> Result<DynamicsLog, ToyError> {
    if steps < MIN_ABLATION_STEPS {
        return Err(ToyError::TooFewSteps {
            min: MIN_ABLATION_STEPS,
            got: steps,
        });
    }
    train(cfg, mode, steps, seed).map(|(log, _)| log)
}

/// Like [`run_ablation`] without the minimum-length check; also returns the
/// final policy.
pub fn train(cfg: &ToyConfig, mode: ToolRewardMode, steps: usize, seed: u64) -> Result<(DynamicsLog, ToyPolicy), ToyError> {
    let mut t = ToyTrainer::new(cfg.clone(), mode, seed)?;
    let mut log = DynamicsLog::default();
    for _ in 0..steps {
        log.rows.push(t.step()?);
    }
    Ok((log, t.policy))
}

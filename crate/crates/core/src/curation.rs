//! Training-data selection: difficulty, open-ended rewrite, label check,
//! crop-utility filter, and a weighted source mixture sampler.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::dataset::{SampleRecord, SourceTag};
use crate::policy::PolicyClient;
use crate::reward::{normalize_answer, RewardError, Verifier};
use crate::rollout::{rollout_seed, RolloutEngine, RolloutTask};
use crate::toolbox::RasterImage;
use crate::trajectory::Terminal;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurationError {
    #[error("gold letter '{letter}' has no option text")]
    UnmappableChoice { letter: char },
    #[error("sample {0} has no ground-truth box")]
    MissingGtBox(String),
    #[error("mixture weights must be non-negative and sum to 1, got {0}")]
    InvalidWeights(f64),
    #[error("source {0} has positive weight but no samples")]
    EmptyStratum(SourceTag),
    #[error("difficulty needs at least 4 rollouts, got {0}")]
    TooFewRollouts(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    ImageUnavailable,
    TooEasy,
    TooHard,
    UnmappableChoice,
    BadLabel,
    MissingGtBox,
    NoUtility,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision {
    Keep,
    Drop { reason: DropReason },
    /// The label judge could not be reached; neither kept nor dropped.
    Deferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Difficulty,
    Standardize,
    Verify,
    PerceptionUtility,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("stage serializes");
        f.write_str(s.as_str().unwrap_or_default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationRecord {
    pub id: String,
    pub acc_plain: Option<f64>,
    pub acc_with_crop: Option<f64>,
    pub verified: Option<bool>,
    /// Rollouts that ended on a transport failure (scored as incorrect).
    pub transport_errors: usize,
    pub decision: Decision,
}

impl CurationRecord {
    fn new(id: &str) -> Self {
        Self {
            id: id.to_string(),
            acc_plain: None,
            acc_with_crop: None,
            verified: None,
            transport_errors: 0,
            decision: Decision::Keep,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub id: String,
    pub stage: Stage,
    pub decision: String,
    pub metrics: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureWeights {
    pub visual_search: f64,
    pub chart: f64,
    pub reasoning: f64,
}

impl Default for MixtureWeights {
    fn default() -> Self {
        Self {
            visual_search: 0.47,
            chart: 0.30,
            reasoning: 0.23,
        }
    }
}

impl MixtureWeights {
    pub fn get(&self, tag: SourceTag) -> f64 {
        match tag {
            SourceTag::VisualSearch => self.visual_search,
            SourceTag::Chart => self.chart,
            SourceTag::Reasoning => self.reasoning,
        }
    }

    pub fn validate(&self) -> Result<(), CurationError> {
        let ws = [self.visual_search, self.chart, self.reasoning];
        let sum: f64 = ws.iter().sum();
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(CurationError::InvalidWeights(sum));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurationConfig {
    /// Rollouts per sample for each accuracy estimate.
    pub k: usize,
    /// Minimum accuracy gain from the provided crop.
    pub delta: f64,
    pub verify_labels: bool,
    pub perception_filter: bool,
    pub weights: MixtureWeights,
    pub seed: u64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            k: 8,
            delta: 0.25,
            verify_labels: true,
            perception_filter: true,
            weights: MixtureWeights::default(),
            seed: 0,
        }
    }
}

/// Checks that a (question, answer) pair is labelled correctly.
pub trait LabelJudge: Send + Sync {
    fn verify(&self, sample: &SampleRecord) -> Result<bool, RewardError>;
}

/// Compares labels against a table of known answers; unknown ids pass.
#[derive(Debug, Clone, Default)]
pub struct RuleJudge {
    pub truth: BTreeMap<String, String>,
}

impl LabelJudge for RuleJudge {
    fn verify(&self, sample: &SampleRecord) -> Result<bool, RewardError> {
        Ok(match self.truth.get(&sample.id) {
            Some(t) => normalize_answer(t) == normalize_answer(&sample.answer),
            None => true,
        })
    }
}

/// Everything the pipeline needs besides the pool.
pub struct CurationContext<'a> {
    pub engine: &'a RolloutEngine,
    pub policy: &'a dyn PolicyClient,
    pub verifier: &'a Verifier,
    pub judge: &'a dyn LabelJudge,
    pub load_image: &'a (dyn Fn(&SampleRecord) -> Result<RasterImage, String> + Sync),
}

#[derive(Debug, Clone, Default)]
pub struct CurationOutcome {
    pub kept: Vec<SampleRecord>,
    pub records: Vec<CurationRecord>,
    pub audit: Vec<AuditEntry>,
}

/// Accuracy over `k` rollouts; transport failures count as wrong.
fn estimate_accuracy(
    ctx: &CurationContext<'_>,
    task: &RolloutTask,
    k: usize,
    seed: u64,
    crops: &[crate::toolbox::BBox],
) -> (f64, usize) {
    let mut correct = 0;
    let mut transport = 0;
    for i in 0..k {
        let out = ctx
            .engine
            .run_rollout_with_crops(task, ctx.policy, rollout_seed(seed, &task.id, i), crops);
        match out.trajectory.terminal() {
            Some(Terminal::Answered { answer }) => {
                if ctx.verifier.is_correct(&task.question, answer, &task.gold).unwrap_or(false) {
                    correct += 1;
                }
            }
            Some(Terminal::Malformed { note: Some(_) }) => transport += 1,
            _ => {}
        }
    }
    (correct as f64 / k as f64, transport)
}

/// Estimates plain accuracy and drops samples that are always or never solved.
pub fn difficulty_filter(
    ctx: &CurationContext<'_>,
    sample: &SampleRecord,
    image: &RasterImage,
    k: usize,
    seed: u64,
) -> Result<CurationRecord, CurationError> {
    if k < 4 {
        return Err(CurationError::TooFewRollouts(k));
    }
    let task = RolloutTask {
        id: sample.id.clone(),
        question: sample.question.clone(),
        image: image.clone(),
        gold: sample.answer.clone(),
    };
    let (acc, transport) = estimate_accuracy(ctx, &task, k, seed, &[]);
    let mut rec = CurationRecord::new(&sample.id);
    rec.acc_plain = Some(acc);
    rec.transport_errors = transport;
    rec.decision = if acc >= 1.0 {
        Decision::Drop { reason: DropReason::TooEasy }
    } else if acc <= 0.0 {
        Decision::Drop { reason: DropReason::TooHard }
    } else {
        Decision::Keep
    };
    Ok(rec)
}

fn option_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(([A-Z])\)").expect("valid option regex"))
}

fn gold_letter(answer: &str) -> Option<char> {
    let t = answer.trim().trim_start_matches('(').trim_end_matches([')', '.']).trim();
    let mut chars = t.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_alphabetic() => Some(c.to_ascii_uppercase()),
        _ => None,
    }
}

/// Rewrites a multiple-choice question `stem (A) x (B) y` into its stem, with
/// a letter label replaced by the option text.
pub fn standardize_open_ended(sample: &SampleRecord) -> Result<SampleRecord, CurationError> {
    let q = &sample.question;
    let marks: Vec<_> = option_regex().captures_iter(q).collect();
    if marks.is_empty() {
        return Ok(sample.clone());
    }
    let stem_end = marks[0].get(0).expect("whole match").start();
    let mut options = BTreeMap::new();
    for (i, cap) in marks.iter().enumerate() {
        let letter = cap[1].chars().next().expect("one letter");
        let start = cap.get(0).expect("whole match").end();
        let end = marks.get(i + 1).map(|m| m.get(0).expect("whole match").start()).unwrap_or(q.len());
        let text = q[start..end].trim().trim_end_matches([',', ';']).trim();
        options.insert(letter, text.to_string());
    }
    let answer = match gold_letter(&sample.answer) {
        Some(letter) => match options.get(&letter) {
            Some(text) if !text.is_empty() => text.clone(),
            _ => return Err(CurationError::UnmappableChoice { letter }),
        },
        None => sample.answer.clone(),
    };
    let stem = q[..stem_end].trim().trim_end_matches(|c: char| c == ':' || c.is_whitespace());
    Ok(SampleRecord {
        question: stem.to_string(),
        answer,
        ..sample.clone()
    })
}

/// Accuracy with the ground-truth crops provided up front, compared against
/// plain accuracy. Only visual-search samples are filtered.
pub fn perception_utility_filter(
    ctx: &CurationContext<'_>,
    sample: &SampleRecord,
    image: &RasterImage,
    rec: &mut CurationRecord,
    k: usize,
    delta: f64,
    seed: u64,
) -> Result<(), CurationError> {
    if sample.source != SourceTag::VisualSearch {
        return Ok(());
    }
    let boxes = match &sample.gt_bboxes {
        Some(b) if !b.is_empty() => b.clone(),
        _ => return Err(CurationError::MissingGtBox(sample.id.clone())),
    };
    let task = RolloutTask {
        id: sample.id.clone(),
        question: sample.question.clone(),
        image: image.clone(),
        gold: sample.answer.clone(),
    };
    let (acc, transport) = estimate_accuracy(ctx, &task, k, seed ^ 0x5eed_c0de, &boxes);
    rec.acc_with_crop = Some(acc);
    rec.transport_errors += transport;
    let plain = rec.acc_plain.unwrap_or(0.0);
    rec.decision = if acc > 0.0 && acc - plain >= delta - 1e-12 {
        Decision::Keep
    } else {
        Decision::Drop { reason: DropReason::NoUtility }
    };
    Ok(())
}

fn decision_label(d: &Decision) -> String {
    match d {
        Decision::Keep => "pass".to_string(),
        Decision::Deferred => "deferred".to_string(),
        Decision::Drop { reason } => format!(
            "drop:{}",
            serde_json::to_value(reason).expect("reason serializes").as_str().unwrap_or_default()
        ),
    }
}

fn curate_one(ctx: &CurationContext<'_>, cfg: &CurationConfig, sample: &SampleRecord) -> (Option<SampleRecord>, CurationRecord, Vec<AuditEntry>) {
    let mut audit = Vec::new();
    let entry = |stage: Stage, rec: &CurationRecord, metrics: Value| AuditEntry {
        id: sample.id.clone(),
        stage,
        decision: decision_label(&rec.decision),
        metrics,
    };

    let image = match (ctx.load_image)(sample) {
        Ok(img) => img,
        Err(e) => {
            let mut rec = CurationRecord::new(&sample.id);
            rec.decision = Decision::Drop { reason: DropReason::ImageUnavailable };
            audit.push(entry(Stage::Load, &rec, json!({ "error": e })));
            return (None, rec, audit);
        }
    };

    let mut rec = match difficulty_filter(ctx, sample, &image, cfg.k, cfg.seed) {
        Ok(r) => r,
        Err(e) => {
            let mut rec = CurationRecord::new(&sample.id);
            rec.decision = Decision::Drop { reason: DropReason::TooHard };
            audit.push(entry(Stage::Difficulty, &rec, json!({ "error": e.to_string() })));
            return (None, rec, audit);
        }
    };
    audit.push(entry(
        Stage::Difficulty,
        &rec,
        json!({ "acc_plain": rec.acc_plain, "k": cfg.k, "transport_errors": rec.transport_errors }),
    ));
    if rec.decision != Decision::Keep {
        return (None, rec, audit);
    }

    let standardized = match standardize_open_ended(sample) {
        Ok(s) => s,
        Err(e) => {
            rec.decision = Decision::Drop { reason: DropReason::UnmappableChoice };
            audit.push(entry(Stage::Standardize, &rec, json!({ "error": e.to_string() })));
            return (None, rec, audit);
        }
    };
    audit.push(entry(
        Stage::Standardize,
        &rec,
        json!({ "changed": standardized.question != sample.question || standardized.answer != sample.answer }),
    ));

    if cfg.verify_labels {
        match ctx.judge.verify(&standardized) {
            Ok(ok) => {
                rec.verified = Some(ok);
                if !ok {
                    rec.decision = Decision::Drop { reason: DropReason::BadLabel };
                }
                audit.push(entry(Stage::Verify, &rec, json!({ "verified": ok })));
                if !ok {
                    return (None, rec, audit);
                }
            }
            Err(e) => {
                rec.decision = Decision::Deferred;
                audit.push(entry(Stage::Verify, &rec, json!({ "error": e.to_string() })));
                return (None, rec, audit);
            }
        }
    }

    if cfg.perception_filter && standardized.source == SourceTag::VisualSearch {
        match perception_utility_filter(ctx, &standardized, &image, &mut rec, cfg.k, cfg.delta, cfg.seed) {
            Ok(()) => {
                let uplift = rec.acc_with_crop.zip(rec.acc_plain).map(|(c, p)| c - p);
                audit.push(entry(
                    Stage::PerceptionUtility,
                    &rec,
                    json!({ "acc_with_crop": rec.acc_with_crop, "uplift": uplift, "delta": cfg.delta }),
                ));
            }
            Err(e) => {
                rec.decision = Decision::Drop { reason: DropReason::MissingGtBox };
                audit.push(entry(Stage::PerceptionUtility, &rec, json!({ "error": e.to_string() })));
            }
        }
        if rec.decision != Decision::Keep {
            return (None, rec, audit);
        }
    }
    (Some(standardized), rec, audit)
}

/// Runs every stage in order over `pool`. Samples are processed in parallel
/// on the engine's pool; outputs keep input order.
pub fn curate(ctx: &CurationContext<'_>, cfg: &CurationConfig, pool: &[SampleRecord]) -> Result<CurationOutcome, CurationError> {
    if cfg.k < 4 {
        return Err(CurationError::TooFewRollouts(cfg.k));
    }
    let per_sample: Vec<_> = ctx
        .engine
        .install(|| pool.par_iter().map(|s| curate_one(ctx, cfg, s)).collect());
    let mut out = CurationOutcome::default();
    for (kept, rec, audit) in per_sample {
        out.kept.extend(kept);
        out.records.push(rec);
        out.audit.extend(audit);
    }
    Ok(out)
}

/// Seeded draws whose source proportions follow the mixture weights.
#[derive(Debug, Clone)]
pub struct MixtureSampler<'a> {
    strata: Vec<(f64, Vec<&'a SampleRecord>)>,
    rng: ChaCha8Rng,
}

impl<'a> MixtureSampler<'a> {
    pub fn new(pool: &'a [SampleRecord], weights: &MixtureWeights, seed: u64) -> Result<Self, CurationError> {
        weights.validate()?;
        let mut strata = Vec::new();
        for tag in SourceTag::ALL {
            let w = weights.get(tag);
            let members: Vec<&SampleRecord> = pool.iter().filter(|s| s.source == tag).collect();
            if w > 0.0 && members.is_empty() {
                return Err(CurationError::EmptyStratum(tag));
            }
            if w > 0.0 {
                strata.push((w, members));
            }
        }
        Ok(Self {
            strata,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl<'a> Iterator for MixtureSampler<'a> {
    type Item = &'a SampleRecord;

    fn next(&mut self) -> Option<Self::Item> {
        let total: f64 = self.strata.iter().map(|(w, _)| w).sum();
        let mut u = self.rng.gen::<f64>() * total;
        let mut pick = self.strata.len() - 1;
        for (i, (w, _)) in self.strata.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        let members = &self.strata[pick].1;
        Some(members[self.rng.gen_range(0..members.len())])
    }
}

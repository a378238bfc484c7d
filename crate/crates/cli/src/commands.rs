use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use tracing::{info, warn};
use zoomtrace::curation::{curate, CurationContext, Decision, MixtureSampler, RuleJudge};
use zoomtrace::dataset::{read_jsonl, write_jsonl, SampleRecord};
use zoomtrace::grpo::export_batch;
use zoomtrace::policy::{MockSample, PolicyClient, ScriptedPolicy};
use zoomtrace::protocol::{PromptTemplate, ToolSchema};
use zoomtrace::remote::{ChatJudge, RemotePolicy};
use zoomtrace::reward::{ToolRewardMode, Verifier};
use zoomtrace::rollout::{rollout_seed, ExecutedCall, RewardSpec, RolloutEngine, RolloutTask};
use zoomtrace::toolbox::{iou, RasterImage};
use zoomtrace::toyrl::{run_ablation, AblationSummary};
use zoomtrace::trajectory::{Terminal, Trajectory};

use crate::config::{PolicyKind, RunConfig, VerifierKind};
use crate::CliError;

fn output_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Output {
        path: path.display().to_string(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(output_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(output_err(path))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| output_err(path)(e.into()))?;
    w.write_all(b"\n").map_err(output_err(path))?;
    w.flush().map_err(output_err(path))
}

pub fn build_template(cfg: &RunConfig) -> PromptTemplate {
    let mut tools = vec![ToolSchema::zoom_in()];
    if cfg.enable_rotate {
        tools.push(ToolSchema::rotate());
    }
    PromptTemplate::new(tools).expect("at least one tool")
}

pub fn build_engine(cfg: &RunConfig) -> RolloutEngine {
    RolloutEngine::new(build_template(cfg), cfg.rollout.clone())
}

pub fn build_verifier(cfg: &RunConfig) -> Result<Verifier, CliError> {
    Ok(match cfg.verifier.kind {
        VerifierKind::Exact => Verifier::ExactMatch,
        VerifierKind::Numeric => Verifier::NumericTolerance { eps: cfg.verifier.eps },
        VerifierKind::Choice => Verifier::ChoiceLetter,
        VerifierKind::Judge => {
            let ep = cfg.verifier.judge_endpoint.clone().unwrap_or_else(|| cfg.endpoint.clone());
            let judge = ChatJudge::new(ep).map_err(|e| CliError::Transport(e.to_string()))?;
            Verifier::ExternalJudge(Arc::new(judge))
        }
    })
}

/// The configured policy. The mock policy answers each sample's gold label
/// unless the config gives that sample its own entry.
pub fn build_policy(cfg: &RunConfig, samples: &[SampleRecord]) -> Result<Arc<dyn PolicyClient>, CliError> {
    Ok(match cfg.policy.kind {
        PolicyKind::Mock => {
            let mut mock = cfg.policy.mock.clone();
            for s in samples {
                mock.samples.entry(s.id.clone()).or_insert_with(|| MockSample {
                    answer: s.answer.clone(),
                    accuracy: None,
                    crop_accuracy: None,
                });
            }
            Arc::new(mock)
        }
        PolicyKind::Scripted => Arc::new(ScriptedPolicy::new(cfg.policy.scripted_turns.clone())),
        PolicyKind::Remote => Arc::new(RemotePolicy::new(cfg.endpoint.clone()).map_err(|e| CliError::Transport(e.to_string()))?),
    })
}

fn load_dataset(path: &Path) -> Result<(Vec<SampleRecord>, PathBuf), CliError> {
    let records = read_jsonl(path).map_err(|e| CliError::Data(e.to_string()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((records, base))
}

fn load_image(sample: &SampleRecord, base: &Path) -> Result<RasterImage, String> {
    RasterImage::load(&sample.id, &sample.resolved_image_path(base)).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleError {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RolloutMetrics {
    pub samples: usize,
    pub groups: usize,
    pub trajectories: usize,
    pub accuracy: f64,
    pub mean_reward: f64,
    pub mean_tool_calls: f64,
    pub mean_response_tokens: f64,
    /// Mean best IoU of executed zoom boxes against ground-truth boxes.
    pub mean_iou: Option<f64>,
    pub iou_calls: usize,
    pub degenerate_groups: usize,
    pub transport_failures: usize,
    pub errors: Vec<SampleError>,
}

#[derive(Default)]
struct Tally {
    n: usize,
    correct: usize,
    reward: f64,
    calls: usize,
    tokens: usize,
    iou_sum: f64,
    iou_calls: usize,
    transport: usize,
}

impl Tally {
    fn add(&mut self, traj: &Trajectory, correct: bool, reward: f64, executed: &[ExecutedCall], sample: &SampleRecord) {
        self.n += 1;
        self.correct += usize::from(correct);
        self.reward += reward;
        self.calls += traj.tool_call_count();
        self.tokens += traj.policy_tokens();
        if matches!(traj.terminal(), Some(Terminal::Malformed { note: Some(_) })) {
            self.transport += 1;
        }
        if let Some(gt) = sample.gt_bboxes.as_ref().filter(|g| !g.is_empty()) {
            for b in executed.iter().filter_map(|c| c.bbox) {
                self.iou_sum += gt.iter().map(|g| iou(&b, g)).fold(0.0, f64::max);
                self.iou_calls += 1;
            }
        }
    }

    fn mean(&self, v: f64) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            v / self.n as f64
        }
    }

    fn metrics(&self, samples: usize, groups: usize, degenerate: usize, errors: Vec<SampleError>) -> RolloutMetrics {
        RolloutMetrics {
            samples,
            groups,
            trajectories: self.n,
            accuracy: self.mean(self.correct as f64),
            mean_reward: self.mean(self.reward),
            mean_tool_calls: self.mean(self.calls as f64),
            mean_response_tokens: self.mean(self.tokens as f64),
            mean_iou: (self.iou_calls > 0).then(|| self.iou_sum / self.iou_calls as f64),
            iou_calls: self.iou_calls,
            degenerate_groups: degenerate,
            transport_failures: self.transport,
            errors,
        }
    }
}

fn tasks_for<'a>(records: &'a [SampleRecord], base: &Path) -> (Vec<(RolloutTask, &'a SampleRecord)>, Vec<SampleError>) {
    let mut tasks = Vec::new();
    let mut errors = Vec::new();
    for r in records {
        match load_image(r, base) {
            Ok(image) => tasks.push((
                RolloutTask {
                    id: r.id.clone(),
                    question: r.question.clone(),
                    image,
                    gold: r.answer.clone(),
                },
                r,
            )),
            Err(e) => {
                warn!(sample = %r.id, error = %e, "skipping sample");
                errors.push(SampleError { id: r.id.clone(), error: e });
            }
        }
    }
    (tasks, errors)
}

fn all_failed_in_transport(m: &RolloutMetrics) -> Result<(), CliError> {
    if m.trajectories > 0 && m.transport_failures == m.trajectories {
        return Err(CliError::Transport(format!("all {} rollouts failed to reach the policy", m.trajectories)));
    }
    Ok(())
}

pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const ROLLOUT_METRICS_FILE: &str = "rollout_metrics.json";

/// Rolls out every sample in groups, scores, computes advantages, and writes
/// the trajectory records and summary metrics.
pub fn cmd_rollout(cfg: &RunConfig, dataset: &Path) -> Result<RolloutMetrics, CliError> {
    let (records, base) = load_dataset(dataset)?;
    let engine = build_engine(cfg);
    let policy = build_policy(cfg, &records)?;
    let reward = RewardSpec {
        config: cfg.reward,
        verifier: build_verifier(cfg)?,
    };
    let (tasks, errors) = tasks_for(&records, &base);

    let traj_path = cfg.output_dir.join(TRAJECTORIES_FILE);
    let mut out = create(&traj_path)?;
    let mut tally = Tally::default();
    let (mut groups, mut degenerate) = (0, 0);
    for (b, chunk) in tasks.chunks(cfg.group.prompts_per_batch).enumerate() {
        let batch: Vec<RolloutTask> = chunk.iter().map(|(t, _)| t.clone()).collect();
        let scored = engine
            .run_batch(&batch, cfg.group.size, policy.as_ref(), &reward, cfg.seed)
            .map_err(|e| CliError::Config(e.to_string()))?;
        for (sg, (_, sample)) in scored.iter().zip(chunk) {
            groups += 1;
            degenerate += usize::from(sg.group.advantages().degenerate);
            for ((t, r), ex) in sg.group.trajectories.iter().zip(&sg.group.rewards).zip(&sg.executed) {
                tally.add(t, r.correct(), r.total, ex, sample);
            }
        }
        let groups_only: Vec<_> = scored.into_iter().map(|s| s.group).collect();
        export_batch(&groups_only, &mut out).map_err(|e| CliError::Output {
            path: traj_path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
        info!(batch = b, prompts = chunk.len(), "batch exported");
    }
    out.flush().map_err(output_err(&traj_path))?;

    let metrics = tally.metrics(records.len(), groups, degenerate, errors);
    write_json(&cfg.output_dir.join(ROLLOUT_METRICS_FILE), &metrics)?;
    all_failed_in_transport(&metrics)?;
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub id: String,
    pub answer: Option<String>,
    pub correct: bool,
    pub tool_calls: usize,
    pub iou: Option<f64>,
}

pub const EVAL_METRICS_FILE: &str = "eval_metrics.json";
pub const EVAL_RESULTS_FILE: &str = "eval_results.jsonl";

/// One rollout per sample; accuracy and zoom-box IoU.
pub fn cmd_eval(cfg: &RunConfig, dataset: &Path) -> Result<RolloutMetrics, CliError> {
    let (records, base) = load_dataset(dataset)?;
    let engine = build_engine(cfg);
    let policy = build_policy(cfg, &records)?;
    let reward = RewardSpec {
        config: cfg.reward,
        verifier: build_verifier(cfg)?,
    };
    let (tasks, errors) = tasks_for(&records, &base);
    let outputs: Vec<_> = engine.install(|| {
        tasks
            .par_iter()
            .map(|(task, _)| {
                let out = engine.run_rollout(task, policy.as_ref(), rollout_seed(cfg.seed, &task.id, 0));
                let r = engine.score(&out.trajectory, task, &reward);
                (out, r)
            })
            .collect()
    });
    let mut tally = Tally::default();
    let path = cfg.output_dir.join(EVAL_RESULTS_FILE);
    let mut w = create(&path)?;
    for ((out, r), (_, sample)) in outputs.iter().zip(&tasks) {
        let before = (tally.iou_sum, tally.iou_calls);
        tally.add(&out.trajectory, r.correct(), r.total, &out.executed, sample);
        let calls = tally.iou_calls - before.1;
        let row = EvalRow {
            id: sample.id.clone(),
            answer: out.trajectory.answer().map(str::to_string),
            correct: r.correct(),
            tool_calls: out.trajectory.tool_call_count(),
            iou: (calls > 0).then(|| (tally.iou_sum - before.0) / calls as f64),
        };
        serde_json::to_writer(&mut w, &row).map_err(|e| output_err(&path)(e.into()))?;
        w.write_all(b"\n").map_err(output_err(&path))?;
    }
    w.flush().map_err(output_err(&path))?;
    let metrics = tally.metrics(records.len(), 0, 0, errors);
    write_json(&cfg.output_dir.join(EVAL_METRICS_FILE), &metrics)?;
    all_failed_in_transport(&metrics)?;
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurationSummary {
    pub input: usize,
    pub kept: usize,
    pub deferred: usize,
    pub dropped: BTreeMap<String, usize>,
    pub mixture_draws: usize,
}

pub const CURATED_FILE: &str = "curated.jsonl";
pub const AUDIT_FILE: &str = "audit.jsonl";
pub const CURATION_SUMMARY_FILE: &str = "curation_summary.json";
pub const MIXTURE_FILE: &str = "mixture.jsonl";

fn load_truth(path: Option<&Path>) -> Result<BTreeMap<String, String>, CliError> {
    let Some(p) = path else {
        return Ok(BTreeMap::new());
    };
    let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("cannot read {}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
}

/// Runs the filtering pipeline. The audit log is always written; when
/// `mixture_draws > 0` that many samples are drawn from the kept pool.
pub fn cmd_curate(cfg: &RunConfig, dataset: &Path, mixture_draws: usize) -> Result<CurationSummary, CliError> {
    let (records, base) = load_dataset(dataset)?;
    let engine = build_engine(cfg);
    let policy = build_policy(cfg, &records)?;
    let verifier = build_verifier(cfg)?;
    let judge = RuleJudge {
        truth: load_truth(cfg.verifier.truth_file.as_deref())?,
    };
    let loader = |s: &SampleRecord| load_image(s, &base);
    let ctx = CurationContext {
        engine: &engine,
        policy: policy.as_ref(),
        verifier: &verifier,
        judge: &judge,
        load_image: &loader,
    };
    let outcome = curate(&ctx, &cfg.curation, &records).map_err(|e| CliError::Config(e.to_string()))?;

    let audit_path = cfg.output_dir.join(AUDIT_FILE);
    let mut w = create(&audit_path)?;
    for entry in &outcome.audit {
        serde_json::to_writer(&mut w, entry).map_err(|e| output_err(&audit_path)(e.into()))?;
        w.write_all(b"\n").map_err(output_err(&audit_path))?;
    }
    w.flush().map_err(output_err(&audit_path))?;

    let curated_path = cfg.output_dir.join(CURATED_FILE);
    write_jsonl(&outcome.kept, create(&curated_path)?).map_err(output_err(&curated_path))?;

    let mut summary = CurationSummary {
        input: records.len(),
        kept: outcome.kept.len(),
        deferred: 0,
        dropped: BTreeMap::new(),
        mixture_draws: 0,
    };
    for r in &outcome.records {
        match r.decision {
            Decision::Keep => {}
            Decision::Deferred => summary.deferred += 1,
            Decision::Drop { reason } => {
                let key = serde_json::to_value(reason).expect("reason serializes");
                *summary.dropped.entry(key.as_str().unwrap_or_default().to_string()).or_default() += 1;
            }
        }
    }
    if mixture_draws > 0 {
        let sampler = MixtureSampler::new(&outcome.kept, &cfg.curation.weights, cfg.curation.seed)
            .map_err(|e| CliError::Data(e.to_string()))?;
        let draws: Vec<SampleRecord> = sampler.take(mixture_draws).cloned().collect();
        let path = cfg.output_dir.join(MIXTURE_FILE);
        write_jsonl(&draws, create(&path)?).map_err(output_err(&path))?;
        summary.mixture_draws = draws.len();
    }
    write_json(&cfg.output_dir.join(CURATION_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub seed: u64,
    pub steps: usize,
    pub modes: BTreeMap<String, AblationSummary>,
    /// Final accuracy ranks conditional, then unconditional, then none.
    pub ordering_holds: bool,
}

pub const ABLATION_SUMMARY_FILE: &str = "ablation_summary.json";

pub fn ablation_csv_name(mode: ToolRewardMode) -> String {
    format!("ablation_{}.csv", mode.as_str())
}

/// Trains the toy policy under each tool-reward mode with a shared seed.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationReport, CliError> {
    let mut modes = BTreeMap::new();
    let mut acc = Vec::new();
    for mode in ToolRewardMode::ALL {
        let log = run_ablation(&cfg.toy, mode, cfg.toy.steps, cfg.seed).map_err(|e| CliError::Config(e.to_string()))?;
        let path = cfg.output_dir.join(ablation_csv_name(mode));
        log.write_csv(create(&path)?)
            .map_err(|e| output_err(&path)(std::io::Error::other(e.to_string())))?;
        let s = log.summary();
        info!(mode = mode.as_str(), accuracy = s.final_accuracy, tool_rate = s.final_tool_rate, "ablation finished");
        acc.push(s.final_accuracy);
        modes.insert(mode.as_str().to_string(), s);
    }
    let report = AblationReport {
        seed: cfg.seed,
        steps: cfg.toy.steps,
        modes,
        ordering_holds: acc[0] >= acc[1] && acc[1] >= acc[2],
    };
    write_json(&cfg.output_dir.join(ABLATION_SUMMARY_FILE), &report)?;
    Ok(report)
}

/// The fully resolved configuration as TOML.
pub fn cmd_validate_config(cfg: &RunConfig) -> String {
    cfg.to_toml()
}

//! The policy contract plus offline policies for tests, curation and demos.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{ANSWER_CLOSE, TOOL_CALL_CLOSE};
use crate::toolbox::{estimate_text_tokens, ImageStore};
use crate::trajectory::{Role, StateView};

pub const STOP_MARKERS: [&str; 2] = [TOOL_CALL_CLOSE, ANSWER_CLOSE];

/// Note on the synthetic observation that carries a ground-truth crop.
pub const PROVIDED_REGION_NOTE: &str = "provided region";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("request timed out")]
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateParams {
    pub stop: Vec<String>,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub max_tokens: Option<usize>,
}

impl Default for GenerateParams {
    fn default() -> Self {
        Self {
            stop: STOP_MARKERS.iter().map(|s| s.to_string()).collect(),
            temperature: 1.0,
            seed: None,
            max_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub token_len: usize,
    /// Token count was estimated locally because the endpoint reported none.
    pub estimated: bool,
    pub retries: u32,
}

impl Generation {
    /// Wraps text with a whitespace-token estimate (at least 1).
    pub fn estimated(text: impl Into<String>) -> Self {
        let text = text.into();
        let token_len = estimate_text_tokens(&text).max(1);
        Self {
            text,
            token_len,
            estimated: true,
            retries: 0,
        }
    }
}

pub trait PolicyClient: Send + Sync {
    fn generate(&self, view: &StateView, images: &ImageStore, params: &GenerateParams) -> Result<Generation, PolicyError>;

    fn supports_images(&self) -> bool {
        true
    }
}

impl<P: PolicyClient + ?Sized> PolicyClient for Arc<P> {
    fn generate(&self, view: &StateView, images: &ImageStore, params: &GenerateParams) -> Result<Generation, PolicyError> {
        (**self).generate(view, images, params)
    }

    fn supports_images(&self) -> bool {
        (**self).supports_images()
    }
}

/// Adapts a closure to [`PolicyClient`].
pub struct FnPolicy<F>(pub F);

impl<F> PolicyClient for FnPolicy<F>
where
    F: Fn(&StateView, &GenerateParams) -> Result<Generation, PolicyError> + Send + Sync,
{
    fn generate(&self, view: &StateView, _images: &ImageStore, params: &GenerateParams) -> Result<Generation, PolicyError> {
        (self.0)(view, params)
    }
}

/// Emits a fixed list of turns; the turn index is the number of assistant
/// messages already in the view. Past the end the last turn repeats.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedPolicy {
    turns: Vec<String>,
}

impl ScriptedPolicy {
    pub fn new<S: Into<String>>(turns: impl IntoIterator<Item = S>) -> Self {
        let turns: Vec<String> = turns.into_iter().map(Into::into).collect();
        assert!(!turns.is_empty(), "scripted policy needs at least one turn");
        Self { turns }
    }
}

impl PolicyClient for ScriptedPolicy {
    fn generate(&self, view: &StateView, _images: &ImageStore, _params: &GenerateParams) -> Result<Generation, PolicyError> {
        let i = view.count_role(Role::Assistant).min(self.turns.len() - 1);
        Ok(Generation::estimated(self.turns[i].clone()))
    }
}

/// Uniform draw in [0, 1) from a stable hash of its inputs.
pub fn hash_unit(parts: &[&[u8]]) -> f64 {
    (stable_hash(parts) >> 11) as f64 / (1u64 << 53) as f64
}

/// FNV-1a over length-prefixed parts, finished with a splitmix64 round.
pub fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for b in (part.len() as u64).to_le_bytes().iter().chain(part.iter()) {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    splitmix64(h)
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-sample behaviour of [`MockPolicy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockSample {
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Accuracy once a provided ground-truth crop is in view.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_accuracy: Option<f64>,
}

/// A seeded stand-in policy keyed by the input image id.
///
/// It zooms into each configured box in turn and then answers. The answer is
/// the gold label with the configured probability; correctness is drawn from
/// a hash of the request seed and image id, so a fixed seed gives a fixed
/// answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockPolicy {
    #[serde(default = "default_accuracy")]
    pub accuracy: f64,
    #[serde(default)]
    pub zoom_boxes: Vec<[f64; 4]>,
    #[serde(default)]
    pub samples: BTreeMap<String, MockSample>,
    #[serde(default = "default_wrong_answer")]
    pub wrong_answer: String,
}

fn default_accuracy() -> f64 {
    0.5
}

fn default_wrong_answer() -> String {
    "unsure".to_string()
}

impl Default for MockPolicy {
    fn default() -> Self {
        Self {
            accuracy: default_accuracy(),
            zoom_boxes: Vec::new(),
            samples: BTreeMap::new(),
            wrong_answer: default_wrong_answer(),
        }
    }
}

impl MockPolicy {
    pub fn with_accuracy(accuracy: f64) -> Self {
        Self { accuracy, ..Self::default() }
    }

    pub fn sample(mut self, image_id: impl Into<String>, s: MockSample) -> Self {
        self.samples.insert(image_id.into(), s);
        self
    }

    fn answer_turn(&self, view: &StateView, params: &GenerateParams) -> String {
        let image_id = view.input_image_ref().unwrap_or_default();
        let sample = self.samples.get(image_id);
        let has_provided_crop = view.messages.iter().any(|m| {
            m.role == Role::ToolObservation && m.joined_text().contains(PROVIDED_REGION_NOTE)
        });
        let p = match sample {
            Some(MockSample { crop_accuracy: Some(c), .. }) if has_provided_crop => *c,
            Some(MockSample { accuracy: Some(a), .. }) => *a,
            _ => self.accuracy,
        };
        let seed = params.seed.unwrap_or(0).to_le_bytes();
        let u = hash_unit(&[b"mock-answer", &seed, image_id.as_bytes()]);
        let answer = match sample {
            Some(s) if u < p => s.answer.as_str(),
            _ => self.wrong_answer.as_str(),
        };
        format!("<think>I can answer now.</think>\n<answer>{answer}</answer>")
    }
}

impl PolicyClient for MockPolicy {
    fn generate(&self, view: &StateView, _images: &ImageStore, params: &GenerateParams) -> Result<Generation, PolicyError> {
        let k = view.count_role(Role::Assistant);
        let text = match self.zoom_boxes.get(k) {
            Some(b) => format!(
                "<think>Zoom into region {k}.</think>\n<tool_call>\n{{\"name\": \"image_zoom_in_tool\", \"arguments\": {{\"bbox_2d\": {}}}}}\n</tool_call>",
                serde_json::to_string(b).expect("box serializes")
            ),
            None => self.answer_turn(view, params),
        };
        Ok(Generation::estimated(text))
    }
}

/// Always fails with a transport error.
#[derive(Debug, Clone, Default)]
pub struct UnreachablePolicy;

impl PolicyClient for UnreachablePolicy {
    fn generate(&self, _: &StateView, _: &ImageStore, _: &GenerateParams) -> Result<Generation, PolicyError> {
        Err(PolicyError::Transport("endpoint unreachable".into()))
    }
}

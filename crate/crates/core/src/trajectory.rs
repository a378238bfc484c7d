//! Interleaved rollout state: policy text and tool observations, budgets,
//! terminal status and the token-level loss mask.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{parse_turn, ParsedTurn, PromptTemplate, ProtocolError};
use crate::reward::RewardBreakdown;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TrajectoryError {
    #[error("trajectory is already terminal")]
    AppendAfterTerminal,
    #[error("observation does not follow a pending tool call")]
    ObservationWithoutCall,
    #[error("segment token_len must be positive")]
    EmptySegment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budget {
    pub max_tool_calls: usize,
    pub max_policy_tokens: usize,
    #[serde(with = "duration_ms", rename = "call_timeout_ms")]
    pub call_timeout: Duration,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            max_tool_calls: 6,
            max_policy_tokens: 20480,
            call_timeout: Duration::from_secs(120),
        }
    }
}

impl Budget {
    pub fn new(max_tool_calls: usize, max_policy_tokens: usize) -> Self {
        Self {
            max_tool_calls,
            max_policy_tokens,
            ..Self::default()
        }
    }

    pub fn is_valid(&self) -> bool {
        self.max_tool_calls > 0 && self.max_policy_tokens > 0 && !self.call_timeout.is_zero()
    }
}

mod duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    Policy {
        text: String,
        token_len: usize,
        tool_calls: usize,
        /// Cut at the token budget; the text is kept but never acted on.
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        truncated: bool,
    },
    Observation {
        tool_name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        image_ref: Option<String>,
        note: String,
        token_len: usize,
    },
}

impl Segment {
    pub fn token_len(&self) -> usize {
        match self {
            Segment::Policy { token_len, .. } | Segment::Observation { token_len, .. } => *token_len,
        }
    }

    pub fn is_policy(&self) -> bool {
        matches!(self, Segment::Policy { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Terminal {
    Answered { answer: String },
    BudgetExhausted,
    Malformed {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        note: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question_id: String,
    pub image_ref: String,
    budget: Budget,
    segments: Vec<Segment>,
    tool_call_count: usize,
    policy_tokens: usize,
    terminal: Option<Terminal>,
}

impl Trajectory {
    pub fn new(question_id: impl Into<String>, image_ref: impl Into<String>, budget: Budget) -> Self {
        Self {
            question_id: question_id.into(),
            image_ref: image_ref.into(),
            budget,
            segments: Vec::new(),
            tool_call_count: 0,
            policy_tokens: 0,
            terminal: None,
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn budget(&self) -> &Budget {
        &self.budget
    }

    /// Tool calls parsed across all policy turns, including any that
    /// overflowed the budget and were never executed.
    pub fn tool_call_count(&self) -> usize {
        self.tool_call_count
    }

    pub fn policy_tokens(&self) -> usize {
        self.policy_tokens
    }

    pub fn total_tokens(&self) -> usize {
        self.segments.iter().map(Segment::token_len).sum()
    }

    pub fn observation_count(&self) -> usize {
        self.segments.iter().filter(|s| !s.is_policy()).count()
    }

    pub fn terminal(&self) -> Option<&Terminal> {
        self.terminal.as_ref()
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal.is_some()
    }

    pub fn answer(&self) -> Option<&str> {
        match &self.terminal {
            Some(Terminal::Answered { answer }) => Some(answer),
            _ => None,
        }
    }

    /// Tool calls from the last policy turn that still await an observation.
    pub fn pending_calls(&self) -> usize {
        let mut observed = 0;
        for seg in self.segments.iter().rev() {
            match seg {
                Segment::Observation { .. } => observed += 1,
                Segment::Policy { tool_calls, .. } => return tool_calls.saturating_sub(observed),
            }
        }
        0
    }

    /// Appends one policy turn and updates the call count and terminal
    /// status from its parse.
    ///
    /// A turn longer than the remaining token budget is clipped to the budget
    /// and ends the trajectory as [`Terminal::BudgetExhausted`] without being
    /// acted on. A turn pushing the call count past the budget is recorded but
    /// ends the trajectory before any of its calls run.
    pub fn append_policy_text(&mut self, text: &str, token_len: usize) -> Result<ParsedTurn, TrajectoryError> {
        self.check_open(token_len)?;
        let parsed = parse_turn(text);
        let remaining = self.budget.max_policy_tokens - self.policy_tokens;
        if token_len > remaining {
            self.push_truncated(text, remaining);
            return Ok(parsed);
        }
        let calls = parsed.tool_calls.len();
        self.segments.push(Segment::Policy {
            text: text.to_string(),
            token_len,
            tool_calls: calls,
            truncated: false,
        });
        self.tool_call_count += calls;
        self.policy_tokens += token_len;
        self.terminal = if let Some(answer) = &parsed.answer {
            Some(Terminal::Answered { answer: answer.clone() })
        } else if calls == 0 {
            Some(Terminal::Malformed { note: None })
        } else if self.tool_call_count > self.budget.max_tool_calls
            || self.policy_tokens >= self.budget.max_policy_tokens
        {
            Some(Terminal::BudgetExhausted)
        } else {
            None
        };
        Ok(parsed)
    }

    fn check_open(&self, token_len: usize) -> Result<(), TrajectoryError> {
        if self.terminal.is_some() {
            return Err(TrajectoryError::AppendAfterTerminal);
        }
        if token_len == 0 {
            return Err(TrajectoryError::EmptySegment);
        }
        Ok(())
    }

    fn push_truncated(&mut self, text: &str, token_len: usize) {
        self.segments.push(Segment::Policy {
            text: text.to_string(),
            token_len,
            tool_calls: 0,
            truncated: true,
        });
        self.policy_tokens += token_len;
        self.terminal = Some(Terminal::BudgetExhausted);
    }

    pub fn append_observation(
        &mut self,
        tool_name: &str,
        image_ref: Option<String>,
        note: &str,
        token_len: usize,
    ) -> Result<(), TrajectoryError> {
        if self.terminal.is_some() || self.pending_calls() == 0 {
            return Err(TrajectoryError::ObservationWithoutCall);
        }
        if token_len == 0 {
            return Err(TrajectoryError::EmptySegment);
        }
        self.segments.push(Segment::Observation {
            tool_name: tool_name.to_string(),
            image_ref,
            note: note.to_string(),
            token_len,
        });
        Ok(())
    }

    /// Ends an open trajectory as malformed, e.g. after a transport failure.
    pub fn fail(&mut self, note: impl Into<String>) {
        if self.terminal.is_none() {
            self.terminal = Some(Terminal::Malformed { note: Some(note.into()) });
        }
    }

    /// Rebuilds a trajectory by feeding `segments` through the append operations.
    pub fn replay(
        question_id: &str,
        image_ref: &str,
        budget: Budget,
        segments: &[Segment],
    ) -> Result<Self, TrajectoryError> {
        let mut t = Self::new(question_id, image_ref, budget);
        for seg in segments {
            match seg {
                Segment::Policy { text, token_len, truncated: true, .. } => {
                    t.check_open(*token_len)?;
                    t.push_truncated(text, *token_len);
                }
                Segment::Policy { text, token_len, .. } => {
                    t.append_policy_text(text, *token_len)?;
                }
                Segment::Observation { tool_name, image_ref, note, token_len } => {
                    t.append_observation(tool_name, image_ref.clone(), note, *token_len)?;
                }
            }
        }
        Ok(t)
    }

    pub fn loss_mask(&self) -> LossMask {
        let mut bits = Vec::with_capacity(self.total_tokens());
        for seg in &self.segments {
            let bit = u8::from(seg.is_policy());
            bits.extend(std::iter::repeat_n(bit, seg.token_len()));
        }
        LossMask(bits)
    }
}

/// One bit per token: 1 for policy-generated, 0 for injected observation.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LossMask(pub Vec<u8>);

impl LossMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ones(&self) -> usize {
        self.0.iter().map(|&b| b as usize).sum()
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    /// Run-length encoding as `(bit, run)` pairs.
    pub fn rle(&self) -> Vec<(u8, usize)> {
        let mut runs: Vec<(u8, usize)> = Vec::new();
        for &b in &self.0 {
            match runs.last_mut() {
                Some((bit, n)) if *bit == b => *n += 1,
                _ => runs.push((b, 1)),
            }
        }
        runs
    }

    pub fn from_rle(runs: &[(u8, usize)]) -> Self {
        let mut bits = Vec::new();
        for &(b, n) in runs {
            bits.extend(std::iter::repeat_n(b, n));
        }
        LossMask(bits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    System,
    User,
    Assistant,
    ToolObservation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    Image { image_ref: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

impl Message {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            content: vec![ContentPart::Text { text: text.into() }],
        }
    }

    pub fn image_refs(&self) -> impl Iterator<Item = &str> {
        self.content.iter().filter_map(|p| match p {
            ContentPart::Image { image_ref } => Some(image_ref.as_str()),
            ContentPart::Text { .. } => None,
        })
    }

    pub fn joined_text(&self) -> String {
        self.content
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text { text } => Some(text.as_str()),
                ContentPart::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateView {
    pub messages: Vec<Message>,
}

impl StateView {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("state view serializes")
    }

    pub fn count_role(&self, role: Role) -> usize {
        self.messages.iter().filter(|m| m.role == role).count()
    }

    /// The image attached to the user prompt.
    pub fn input_image_ref(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == Role::User)
            .and_then(|m| m.image_refs().next())
    }
}

/// Conversation so far: system prompt, user prompt with the input image, then
/// one message per segment.
pub fn state_view(template: &PromptTemplate, question: &str, traj: &Trajectory) -> Result<StateView, ProtocolError> {
    let mut messages = Vec::with_capacity(traj.segments.len() + 2);
    messages.push(Message::text(Role::System, template.system_prompt()));
    messages.push(Message {
        role: Role::User,
        content: vec![
            ContentPart::Image { image_ref: traj.image_ref.clone() },
            ContentPart::Text { text: template.user_prompt(question)? },
        ],
    });
    for seg in &traj.segments {
        messages.push(match seg {
            Segment::Policy { text, .. } => Message::text(Role::Assistant, text.clone()),
            Segment::Observation { image_ref, note, .. } => {
                let mut content = vec![ContentPart::Text { text: note.clone() }];
                if let Some(r) = image_ref {
                    content.push(ContentPart::Image { image_ref: r.clone() });
                }
                Message { role: Role::ToolObservation, content }
            }
        });
    }
    Ok(StateView { messages })
}

/// One line of the trajectory export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub question_id: String,
    pub image_ref: String,
    pub segments: Vec<Segment>,
    pub tool_call_count: usize,
    pub terminal: Option<Terminal>,
    pub mask: Vec<(u8, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<RewardBreakdown>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantage: Option<f64>,
}

impl TrajectoryRecord {
    pub fn new(traj: &Trajectory, reward: Option<RewardBreakdown>, advantage: Option<f64>) -> Self {
        Self {
            question_id: traj.question_id.clone(),
            image_ref: traj.image_ref.clone(),
            segments: traj.segments.clone(),
            tool_call_count: traj.tool_call_count,
            terminal: traj.terminal.clone(),
            mask: traj.loss_mask().rle(),
            reward,
            advantage,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ZOOM: &str = r#"<think>look</think><tool_call>{"name": "image_zoom_in_tool", "arguments": {"bbox_2d": [0, 0, 50, 50]}}</tool_call>"#;
    const TWO_ZOOMS: &str = r#"<think>two</think><tool_call>{"name": "image_zoom_in_tool", "arguments": {"bbox_2d": [0, 0, 50, 50]}}</tool_call><tool_call>{"name": "image_zoom_in_tool", "arguments": {"bbox_2d": [50, 50, 90, 90]}}</tool_call>"#;

    fn traj() -> Trajectory {
        Trajectory::new("q1", "img1", Budget::default())
    }

    #[test]
    fn answer_only_turn_terminates_answered() {
        let mut t = traj();
        t.append_policy_text("<answer>cat</answer>", 3).unwrap();
        assert_eq!(t.terminal(), Some(&Terminal::Answered { answer: "cat".into() }));
        assert_eq!(t.append_policy_text("<answer>dog</answer>", 3), Err(TrajectoryError::AppendAfterTerminal));
    }

    #[test]
    fn seventh_call_exhausts_budget() {
        let mut t = traj();
        for _ in 0..6 {
            t.append_policy_text(ZOOM, 10).unwrap();
            t.append_observation("image_zoom_in_tool", Some("c".into()), "crop", 4).unwrap();
        }
        assert!(!t.is_terminal());
        t.append_policy_text(ZOOM, 10).unwrap();
        assert_eq!(t.tool_call_count(), 7);
        assert_eq!(t.terminal(), Some(&Terminal::BudgetExhausted));
        assert_eq!(t.observation_count(), 6);
        assert_eq!(
            t.append_observation("image_zoom_in_tool", None, "x", 1),
            Err(TrajectoryError::ObservationWithoutCall)
        );
    }

    #[test]
    fn no_action_turns_are_malformed() {
        for text in ["<think>only</think>", "plain words", ""] {
            let mut t = traj();
            t.append_policy_text(text, 2).unwrap();
            assert_eq!(t.terminal(), Some(&Terminal::Malformed { note: None }), "{text:?}");
        }
    }

    #[test]
    fn observation_contract() {
        let mut t = traj();
        t.append_policy_text(ZOOM, 10).unwrap();
        t.append_observation("image_zoom_in_tool", Some("c".into()), "crop", 4).unwrap();
        assert_eq!(t.segments().len(), 2);
        assert_eq!(
            t.append_observation("image_zoom_in_tool", None, "again", 4),
            Err(TrajectoryError::ObservationWithoutCall)
        );

        let mut answered = traj();
        answered.append_policy_text("<think>a</think><answer>x</answer>", 4).unwrap();
        assert_eq!(
            answered.append_observation("image_zoom_in_tool", None, "late", 4),
            Err(TrajectoryError::ObservationWithoutCall)
        );

        let mut two = traj();
        two.append_policy_text(TWO_ZOOMS, 20).unwrap();
        assert_eq!(two.pending_calls(), 2);
        two.append_observation("image_zoom_in_tool", Some("a".into()), "a", 4).unwrap();
        two.append_observation("image_zoom_in_tool", Some("b".into()), "b", 4).unwrap();
        assert_eq!(two.pending_calls(), 0);
    }

    #[test]
    fn loss_mask_definition() {
        let mut t = traj();
        t.append_policy_text(ZOOM, 5).unwrap();
        t.append_observation("image_zoom_in_tool", None, "crop", 3).unwrap();
        t.append_policy_text("<think>a</think><answer>x</answer>", 4).unwrap();
        assert_eq!(t.loss_mask().bits(), &[1, 1, 1, 1, 1, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(t.loss_mask().rle(), vec![(1, 5), (0, 3), (1, 4)]);

        let mut direct = traj();
        direct.append_policy_text("<think>a</think><answer>x</answer>", 7).unwrap();
        assert!(direct.loss_mask().bits().iter().all(|&b| b == 1));
    }

    #[test]
    fn token_overflow_truncates_and_exhausts() {
        let mut t = Trajectory::new("q", "i", Budget::new(6, 100));
        t.append_policy_text(ZOOM, 60).unwrap();
        t.append_observation("image_zoom_in_tool", None, "crop", 30).unwrap();
        t.append_policy_text("<think>long</think><answer>x</answer>", 80).unwrap();
        assert_eq!(t.policy_tokens(), 100);
        assert_eq!(t.terminal(), Some(&Terminal::BudgetExhausted));
        assert!(matches!(t.segments()[2], Segment::Policy { truncated: true, token_len: 40, .. }));
        let replayed = Trajectory::replay("q", "i", *t.budget(), t.segments()).unwrap();
        assert_eq!(replayed, t);
    }

    #[test]
    fn state_view_shapes() {
        let tpl = PromptTemplate::zoom_only();
        let mut t = traj();
        let empty = state_view(&tpl, "What?", &t).unwrap();
        assert_eq!(
            empty.messages.iter().map(|m| m.role).collect::<Vec<_>>(),
            vec![Role::System, Role::User]
        );
        assert_eq!(empty.input_image_ref(), Some("img1"));
        t.append_policy_text(ZOOM, 10).unwrap();
        t.append_observation("image_zoom_in_tool", Some("img1/crop".into()), "crop", 4).unwrap();
        let v = state_view(&tpl, "What?", &t).unwrap();
        assert_eq!(
            v.messages.iter().map(|m| m.role).collect::<Vec<_>>(),
            vec![Role::System, Role::User, Role::Assistant, Role::ToolObservation]
        );
        assert_eq!(v.to_json(), state_view(&tpl, "What?", &t).unwrap().to_json());
        assert!(v.to_json().contains("\"role\":\"tool-observation\""));
    }

    #[test]
    fn fail_marks_malformed_once() {
        let mut t = traj();
        t.fail("transport: connection refused");
        assert!(matches!(t.terminal(), Some(Terminal::Malformed { note: Some(_) })));
        let mut done = traj();
        done.append_policy_text("<answer>a</answer>", 1).unwrap();
        done.fail("late");
        assert!(matches!(done.terminal(), Some(Terminal::Answered { .. })));
    }

    #[test]
    fn record_round_trips_through_json() {
        let mut t = traj();
        t.append_policy_text(ZOOM, 5).unwrap();
        t.append_observation("image_zoom_in_tool", Some("c".into()), "crop", 3).unwrap();
        t.append_policy_text("<think>a</think><answer>x</answer>", 4).unwrap();
        let rec = TrajectoryRecord::new(&t, None, Some(0.5));
        let line = rec.to_json_line();
        let back: TrajectoryRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec);
        assert!(line.contains("\"mask\":[[1,5],[0,3],[1,4]]"));
        assert_eq!(LossMask::from_rle(&back.mask), t.loss_mask());
    }
}

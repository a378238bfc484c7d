//! Prompt rendering and the `<think>` / `<tool_call>` / `<answer>` turn grammar.
//!
//! The system prompt advertises the available tools as JSON function
//! signatures inside `<tools></tools>`. A policy turn is a sequence of tagged
//! spans separated by optional whitespace:
//!
//! ```text
//! <think>...</think>
//! <tool_call>{"name": "image_zoom_in_tool", "arguments": {"bbox_2d": [10, 20, 100, 200]}}</tool_call>
//! <answer>...</answer>
//! ```
//!
//! Parsing never fails. Anything that does not fit the grammar is kept as a
//! [`Violation`] on the [`ParsedTurn`] and surfaces again in the
//! [`FormatVerdict`] produced by [`validate_format`].

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const TOOL_CALL_OPEN: &str = "<tool_call>";
pub const TOOL_CALL_CLOSE: &str = "</tool_call>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

pub const ZOOM_TOOL: &str = "image_zoom_in_tool";
pub const ROTATE_TOOL: &str = "image_rotate_tool";

const SYSTEM_HEAD: &str = "You are a helpful assistant.

# Tools
You may call one or more functions to assist with the user query.
You are provided with function signatures within <tools></tools> XML tags:
<tools>
";

// The example lines end in two spaces.
const SYSTEM_TAIL: &str = "\n</tools>\n\n# How to call a tool\n\
Return a json object with function name and arguments within <tool_call></tool_call> XML tags:\n\
<tool_call>\n\
{\"name\": <function-name>, \"arguments\": <args-json-object>}\n\
</tool_call>\n\n\
**Example**:  \n\
<tool_call>  \n\
{\"name\": \"image_zoom_in_tool\", \"arguments\": {\"bbox_2d\": [10, 20, 100, 200], \"label\": \"the apple on the desk\"}}  \n\
</tool_call>";

const USER_HEAD: &str = "Question: ";
const USER_TAIL: &str = "

Think first, call **image_zoom_in_tool** if needed, then answer. Format strictly as:  <think>...</think>  <tool_call>...</tool_call> (if tools needed)  <answer>...</answer>";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("at least one tool schema is required")]
    NoTools,
    #[error("question must not be empty")]
    EmptyQuestion,
}

/// Type of a single tool parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum ParamKind {
    Number,
    Integer,
    String,
    /// Fixed-length array of numbers, e.g. a `[x1, y1, x2, y2]` box.
    NumberArray { len: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub description: String,
    pub required: bool,
    /// Allowed integer values, advertised as a JSON-schema `enum`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub allowed: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub params: Vec<ParamSpec>,
}

impl ToolSchema {
    /// The zoom-in crop tool.
    pub fn zoom_in() -> Self {
        Self {
            name: ZOOM_TOOL.to_string(),
            description: "Zoom in on a specific region of an image by cropping it based on a bounding box (bbox) and an optional object label.".to_string(),
            params: vec![
                ParamSpec {
                    name: "bbox_2d".to_string(),
                    kind: ParamKind::NumberArray { len: 4 },
                    description: "The bounding box of the region to zoom in, as [x1, y1, x2, y2], where (x1, y1) is the top-left corner and (x2, y2) is the bottom-right corner.".to_string(),
                    required: true,
                    allowed: Vec::new(),
                },
                ParamSpec {
                    name: "label".to_string(),
                    kind: ParamKind::String,
                    description: "The name or label of the object in the specified bounding box (optional).".to_string(),
                    required: false,
                    allowed: Vec::new(),
                },
            ],
        }
    }

    /// Right-angle rotation of the input image.
    pub fn rotate() -> Self {
        Self {
            name: ROTATE_TOOL.to_string(),
            description: "Rotate the image clockwise by a right angle. Use it when text or objects in the image appear rotated.".to_string(),
            params: vec![ParamSpec {
                name: "degrees".to_string(),
                kind: ParamKind::Integer,
                description: "The clockwise rotation angle in degrees; one of 0, 90, 180, 270.".to_string(),
                required: true,
                allowed: vec![0, 90, 180, 270],
            }],
        }
    }

    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    /// JSON function signature in the form listed inside `<tools>`.
    pub fn to_json(&self) -> Value {
        let mut properties = Map::new();
        for p in &self.params {
            let mut prop = Map::new();
            match &p.kind {
                ParamKind::Number => {
                    prop.insert("type".into(), json!("number"));
                }
                ParamKind::Integer => {
                    prop.insert("type".into(), json!("integer"));
                }
                ParamKind::String => {
                    prop.insert("type".into(), json!("string"));
                }
                ParamKind::NumberArray { len } => {
                    prop.insert("type".into(), json!("array"));
                    prop.insert("items".into(), json!({ "type": "number" }));
                    prop.insert("minItems".into(), json!(len));
                    prop.insert("maxItems".into(), json!(len));
                }
            }
            if !p.allowed.is_empty() {
                prop.insert("enum".into(), json!(p.allowed));
            }
            prop.insert("description".into(), json!(p.description));
            properties.insert(p.name.clone(), Value::Object(prop));
        }
        let required: Vec<&str> = self
            .params
            .iter()
            .filter(|p| p.required)
            .map(|p| p.name.as_str())
            .collect();
        json!({
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": {
                    "type": "object",
                    "properties": properties,
                    "required": required,
                }
            }
        })
    }
}

/// Renders the system prompt listing `tools`.
///
/// Each schema is pretty-printed with two-space indentation; multiple schemas
/// are separated by a newline. Everything outside the tool list is fixed.
pub fn render_system_prompt(tools: &[ToolSchema]) -> Result<String, ProtocolError> {
    if tools.is_empty() {
        return Err(ProtocolError::NoTools);
    }
    let listed: Vec<String> = tools
        .iter()
        .map(|t| serde_json::to_string_pretty(&t.to_json()).expect("schema json"))
        .collect();
    let mut out = String::with_capacity(SYSTEM_HEAD.len() + SYSTEM_TAIL.len() + 1024);
    out.push_str(SYSTEM_HEAD);
    out.push_str(&listed.join("\n"));
    out.push_str(SYSTEM_TAIL);
    Ok(out)
}

/// Renders the user prompt. The question is inserted verbatim.
pub fn render_user_prompt(question: &str) -> Result<String, ProtocolError> {
    if question.trim().is_empty() {
        return Err(ProtocolError::EmptyQuestion);
    }
    Ok(format!("{USER_HEAD}{question}{USER_TAIL}"))
}

/// Recovers the question from a rendered user prompt.
pub fn extract_question(user_prompt: &str) -> Option<&str> {
    user_prompt.strip_prefix(USER_HEAD)?.strip_suffix(USER_TAIL)
}

/// System prompt plus the tools it advertises.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    tools: Vec<ToolSchema>,
    system: String,
}

impl PromptTemplate {
    pub fn new(tools: Vec<ToolSchema>) -> Result<Self, ProtocolError> {
        let system = render_system_prompt(&tools)?;
        Ok(Self { tools, system })
    }

    pub fn zoom_only() -> Self {
        Self::new(vec![ToolSchema::zoom_in()]).expect("non-empty tool list")
    }

    pub fn tools(&self) -> &[ToolSchema] {
        &self.tools
    }

    pub fn system_prompt(&self) -> &str {
        &self.system
    }

    pub fn user_prompt(&self, question: &str) -> Result<String, ProtocolError> {
        render_user_prompt(question)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    MissingThink,
    /// Neither a tool call nor an answer.
    NoAction,
    /// `<think>` appears after a tool call or answer.
    OutOfOrder,
    AnswerWithCall,
    UnknownTool,
    BadArity,
    NonNumeric,
    BadType,
    MissingParam,
    TrailingGarbage,
    MalformedJson,
    /// Valid JSON that is not `{"name": ..., "arguments": {...}}`.
    MalformedCall,
    UnclosedTag,
    DuplicateThink,
    MultipleAnswers,
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("code serializes");
        write!(f, "{}", s.as_str().unwrap_or_default())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub span: Range<usize>,
}

impl Violation {
    fn new(code: ViolationCode, span: Range<usize>) -> Self {
        Self { code, span }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolCall {
    pub name: String,
    pub arguments: Map<String, Value>,
    /// Byte range of the whole `<tool_call>...</tool_call>` element.
    pub raw_span: Range<usize>,
}

impl ToolCall {
    pub fn new(name: impl Into<String>, arguments: Map<String, Value>) -> Self {
        Self {
            name: name.into(),
            arguments,
            raw_span: 0..0,
        }
    }

    /// Convenience constructor for a zoom call on `bbox`.
    pub fn zoom(bbox: [f64; 4]) -> Self {
        let mut args = Map::new();
        args.insert("bbox_2d".into(), json!(bbox));
        Self::new(ZOOM_TOOL, args)
    }

    /// `{"name": ..., "arguments": ...}` body in compact JSON.
    pub fn body_json(&self) -> String {
        let mut obj = Map::new();
        obj.insert("name".into(), Value::String(self.name.clone()));
        obj.insert("arguments".into(), Value::Object(self.arguments.clone()));
        Value::Object(obj).to_string()
    }

    pub fn bbox(&self) -> Option<[f64; 4]> {
        let arr = self.arguments.get("bbox_2d")?.as_array()?;
        if arr.len() != 4 {
            return None;
        }
        let mut out = [0.0; 4];
        for (slot, v) in out.iter_mut().zip(arr) {
            *slot = v.as_f64()?;
        }
        Some(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementKind {
    Think,
    ToolCall,
    Answer,
}

impl ElementKind {
    const ALL: [ElementKind; 3] = [ElementKind::Think, ElementKind::ToolCall, ElementKind::Answer];

    fn open(self) -> &'static str {
        match self {
            ElementKind::Think => THINK_OPEN,
            ElementKind::ToolCall => TOOL_CALL_OPEN,
            ElementKind::Answer => ANSWER_OPEN,
        }
    }

    fn close(self) -> &'static str {
        match self {
            ElementKind::Think => THINK_CLOSE,
            ElementKind::ToolCall => TOOL_CALL_CLOSE,
            ElementKind::Answer => ANSWER_CLOSE,
        }
    }
}

/// A tagged element in source order, including ones whose body was invalid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Element {
    pub kind: ElementKind,
    pub span: Range<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedTurn {
    pub think: Option<String>,
    pub tool_calls: Vec<ToolCall>,
    pub answer: Option<String>,
    pub trailing_garbage: bool,
    pub elements: Vec<Element>,
    /// Problems found while parsing (bad JSON, unclosed tags, stray text, ...).
    pub issues: Vec<Violation>,
}

impl ParsedTurn {
    pub fn has_action(&self) -> bool {
        !self.tool_calls.is_empty() || self.answer.is_some()
    }

    /// Canonical text for this turn: think, then calls, then answer.
    pub fn to_canonical_text(&self) -> String {
        let mut out = String::new();
        if let Some(t) = &self.think {
            out.push_str(THINK_OPEN);
            out.push_str(t);
            out.push_str(THINK_CLOSE);
            out.push('\n');
        }
        for call in &self.tool_calls {
            out.push_str(TOOL_CALL_OPEN);
            out.push('\n');
            out.push_str(&call.body_json());
            out.push('\n');
            out.push_str(TOOL_CALL_CLOSE);
            out.push('\n');
        }
        if let Some(a) = &self.answer {
            out.push_str(ANSWER_OPEN);
            out.push_str(a);
            out.push_str(ANSWER_CLOSE);
        }
        out
    }
}

fn next_open_tag(text: &str, from: usize) -> Option<(usize, ElementKind)> {
    ElementKind::ALL
        .iter()
        .filter_map(|&k| text[from..].find(k.open()).map(|i| (from + i, k)))
        .min_by_key(|(i, _)| *i)
}

fn skip_whitespace(text: &str, mut pos: usize) -> usize {
    let bytes = text.as_bytes();
    while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    pos
}

fn parse_call_body(body: &str) -> Result<(String, Map<String, Value>), ViolationCode> {
    let value: Value = serde_json::from_str(body.trim()).map_err(|_| ViolationCode::MalformedJson)?;
    let Value::Object(mut obj) = value else {
        return Err(ViolationCode::MalformedCall);
    };
    let name = match obj.remove("name") {
        Some(Value::String(s)) if !s.trim().is_empty() => s,
        _ => return Err(ViolationCode::MalformedCall),
    };
    let arguments = match obj.remove("arguments") {
        Some(Value::Object(m)) => m,
        _ => return Err(ViolationCode::MalformedCall),
    };
    Ok((name, arguments))
}

/// Parses one policy emission.
pub fn parse_turn(text: &str) -> ParsedTurn {
    let mut turn = ParsedTurn::default();
    let mut pos = 0;
    loop {
        pos = skip_whitespace(text, pos);
        if pos >= text.len() {
            break;
        }
        let Some((start, kind)) = next_open_tag(text, pos) else {
            turn.trailing_garbage = true;
            turn.issues
                .push(Violation::new(ViolationCode::TrailingGarbage, pos..text.len()));
            break;
        };
        if start > pos {
            // Stray text before the next tag; whitespace was already skipped.
            turn.trailing_garbage = true;
            turn.issues
                .push(Violation::new(ViolationCode::TrailingGarbage, pos..start));
        }
        let body_start = start + kind.open().len();
        let Some(rel_close) = text[body_start..].find(kind.close()) else {
            turn.issues
                .push(Violation::new(ViolationCode::UnclosedTag, start..text.len()));
            break;
        };
        let body_end = body_start + rel_close;
        let end = body_end + kind.close().len();
        let body = &text[body_start..body_end];
        turn.elements.push(Element {
            kind,
            span: start..end,
        });
        match kind {
            ElementKind::Think => {
                if turn.think.is_some() {
                    turn.issues
                        .push(Violation::new(ViolationCode::DuplicateThink, start..end));
                } else {
                    turn.think = Some(body.to_string());
                }
            }
            ElementKind::ToolCall => match parse_call_body(body) {
                Ok((name, arguments)) => turn.tool_calls.push(ToolCall {
                    name,
                    arguments,
                    raw_span: start..end,
                }),
                Err(code) => turn.issues.push(Violation::new(code, start..end)),
            },
            ElementKind::Answer => {
                if turn.answer.is_some() {
                    turn.issues
                        .push(Violation::new(ViolationCode::MultipleAnswers, start..end));
                } else {
                    turn.answer = Some(body.trim().to_string());
                }
            }
        }
        pos = end;
    }
    turn
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatVerdict {
    pub well_formed: bool,
    pub violations: Vec<Violation>,
}

impl FormatVerdict {
    pub fn codes(&self) -> Vec<ViolationCode> {
        let mut codes: Vec<_> = self.violations.iter().map(|v| v.code).collect();
        codes.sort();
        codes.dedup();
        codes
    }

    pub fn has(&self, code: ViolationCode) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }
}

fn is_integral(v: &Value) -> bool {
    v.is_i64() || v.is_u64() || v.as_f64().is_some_and(|f| f.is_finite() && f.fract() == 0.0)
}

fn check_arguments(call: &ToolCall, schema: &ToolSchema, out: &mut Vec<Violation>) {
    let span = call.raw_span.clone();
    for spec in &schema.params {
        let Some(value) = call.arguments.get(&spec.name) else {
            if spec.required {
                out.push(Violation::new(ViolationCode::MissingParam, span.clone()));
            }
            continue;
        };
        match &spec.kind {
            ParamKind::NumberArray { len } => match value.as_array() {
                Some(items) => {
                    if items.len() != *len {
                        out.push(Violation::new(ViolationCode::BadArity, span.clone()));
                    }
                    if items.iter().any(|v| !v.is_number()) {
                        out.push(Violation::new(ViolationCode::NonNumeric, span.clone()));
                    }
                }
                None => out.push(Violation::new(ViolationCode::BadType, span.clone())),
            },
            ParamKind::Number if !value.is_number() => {
                out.push(Violation::new(ViolationCode::BadType, span.clone()))
            }
            ParamKind::Integer if !is_integral(value) => {
                out.push(Violation::new(ViolationCode::BadType, span.clone()))
            }
            ParamKind::String if !value.is_string() => {
                out.push(Violation::new(ViolationCode::BadType, span.clone()))
            }
            _ => {}
        }
    }
}

/// Checks a parsed turn against the grammar and the tool schemas.
pub fn validate_format(turn: &ParsedTurn, schemas: &[ToolSchema]) -> FormatVerdict {
    let mut violations = turn.issues.clone();

    if turn.think.is_none() {
        violations.push(Violation::new(ViolationCode::MissingThink, 0..0));
    }
    let has_call_element = turn.elements.iter().any(|e| e.kind == ElementKind::ToolCall);
    let has_answer_element = turn.elements.iter().any(|e| e.kind == ElementKind::Answer);
    if !has_call_element && !has_answer_element {
        violations.push(Violation::new(ViolationCode::NoAction, 0..0));
    }
    if let Some(think) = turn.elements.iter().find(|e| e.kind == ElementKind::Think) {
        if let Some(action) = turn
            .elements
            .iter()
            .find(|e| e.kind != ElementKind::Think && e.span.start < think.span.start)
        {
            violations.push(Violation::new(
                ViolationCode::OutOfOrder,
                action.span.start..think.span.end,
            ));
        }
    }
    if !turn.tool_calls.is_empty() && turn.answer.is_some() {
        let answer_span = turn
            .elements
            .iter()
            .find(|e| e.kind == ElementKind::Answer)
            .map(|e| e.span.clone())
            .unwrap_or(0..0);
        violations.push(Violation::new(ViolationCode::AnswerWithCall, answer_span));
    }
    for call in &turn.tool_calls {
        match schemas.iter().find(|s| s.name == call.name) {
            Some(schema) => check_arguments(call, schema, &mut violations),
            None => violations.push(Violation::new(ViolationCode::UnknownTool, call.raw_span.clone())),
        }
    }

    FormatVerdict {
        well_formed: violations.is_empty(),
        violations,
    }
}

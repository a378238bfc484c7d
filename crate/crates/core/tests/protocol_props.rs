use proptest::prelude::*;
use serde::Deserialize;
use serde_json::{json, Map, Value};
use zoomtrace::protocol::*;

#[derive(Deserialize)]
struct Case {
    case: String,
    text: String,
    codes: Vec<String>,
}

fn corpus() -> Vec<Case> {
    include_str!("data/format_corpus.jsonl")
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn schemas() -> Vec<ToolSchema> {
    vec![ToolSchema::zoom_in(), ToolSchema::rotate()]
}

#[test]
fn mutated_corpus_matches_labels() {
    let cases = corpus();
    assert_eq!(cases.len(), 200);
    let mut mismatches = Vec::new();
    for c in &cases {
        let verdict = validate_format(&parse_turn(&c.text), &schemas());
        let mut got: Vec<String> = verdict.codes().iter().map(|c| c.to_string()).collect();
        got.sort();
        if got != c.codes || verdict.well_formed != c.codes.is_empty() {
            mismatches.push(format!("{}: expected {:?}, got {:?}", c.case, c.codes, got));
        }
    }
    assert!(mismatches.is_empty(), "{}", mismatches.join("\n"));
}

#[test]
fn arity_and_unknown_tool_examples() {
    let codes = |t: &str| validate_format(&parse_turn(t), &schemas()).codes();
    assert_eq!(
        codes(r#"<think>x</think><tool_call>{"name": "image_zoom_in_tool", "arguments": {"bbox_2d": [10, 20, 100]}}</tool_call>"#),
        vec![ViolationCode::BadArity]
    );
    assert_eq!(
        codes(r#"<think>x</think><tool_call>{"name": "zoom_tool", "arguments": {"bbox_2d": [10, 20, 100, 200]}}</tool_call>"#),
        vec![ViolationCode::UnknownTool]
    );
}

fn span_text() -> impl Strategy<Value = String> {
    // Bodies never contain tag openers, and have no surrounding whitespace
    // for answers since extraction trims.
    "[a-zA-Z0-9 ,.?!]{0,24}".prop_filter("no tags", |s| !s.contains('<'))
}

fn arg_value() -> impl Strategy<Value = Value> {
    prop_oneof![
        (-1000i64..1000).prop_map(Value::from),
        (-1.0e3f64..1.0e3).prop_map(|f| json!(f)),
        "[a-z ]{0,8}".prop_map(Value::from),
        prop::collection::vec(-500i64..500, 0..6).prop_map(|v| json!(v)),
    ]
}

fn tool_call() -> impl Strategy<Value = ToolCall> {
    (
        prop::sample::select(vec![ZOOM_TOOL, ROTATE_TOOL, "other_tool"]),
        prop::collection::btree_map("[a-z_]{1,8}", arg_value(), 0..4),
    )
        .prop_map(|(name, args)| ToolCall::new(name, args.into_iter().collect::<Map<String, Value>>()))
}

proptest! {
    #[test]
    fn canonical_text_round_trips(
        think in proptest::option::of(span_text()),
        calls in prop::collection::vec(tool_call(), 0..3),
        answer in proptest::option::of(span_text().prop_map(|s| s.trim().to_string())),
    ) {
        let mut turn = ParsedTurn { think, answer, ..ParsedTurn::default() };
        turn.tool_calls = calls;
        let text = turn.to_canonical_text();
        let once = parse_turn(&text);
        prop_assert_eq!(&once.think, &turn.think);
        prop_assert_eq!(&once.answer, &turn.answer);
        let names: Vec<_> = once.tool_calls.iter().map(|c| (&c.name, &c.arguments)).collect();
        let expected: Vec<_> = turn.tool_calls.iter().map(|c| (&c.name, &c.arguments)).collect();
        prop_assert_eq!(names, expected);
        // Re-rendering the parsed turn is a fixed point, spans included.
        let again = parse_turn(&once.to_canonical_text());
        prop_assert_eq!(again, once);
    }

    #[test]
    fn parser_is_total_on_bytes(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let text = String::from_utf8_lossy(&bytes);
        let turn = parse_turn(&text);
        let _ = validate_format(&turn, &schemas());
    }

    #[test]
    fn parser_is_total_on_tag_soup(parts in prop::collection::vec(
        prop::sample::select(vec![
            "<think>", "</think>", "<tool_call>", "</tool_call>", "<answer>", "</answer>",
            "{", "}", "\"name\"", ":", " ", "\n", "x", "é", "[1,2]",
        ]),
        0..40,
    )) {
        let text: String = parts.concat();
        let a = validate_format(&parse_turn(&text), &schemas());
        let b = validate_format(&parse_turn(&text), &schemas());
        prop_assert_eq!(a, b);
    }
}

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zoomtrace::policy::{FnPolicy, Generation};
use zoomtrace::protocol::PromptTemplate;
use zoomtrace::rollout::{RolloutConfig, RolloutEngine, RolloutTask};
use zoomtrace::toolbox::RasterImage;
use zoomtrace::trajectory::{Budget, Role, Segment, Terminal, Trajectory};

const TURNS: [&str; 10] = [
    "<think>zoom</think><tool_call>{\"name\": \"image_zoom_in_tool\", \"arguments\": {\"bbox_2d\": [0, 0, 30, 30]}}</tool_call>",
    "<think>two</think><tool_call>{\"name\": \"image_zoom_in_tool\", \"arguments\": {\"bbox_2d\": [5, 5, 40, 40]}}</tool_call><tool_call>{\"name\": \"image_rotate_tool\", \"arguments\": {\"degrees\": 90}}</tool_call>",
    "<think>far away</think><tool_call>{\"name\": \"image_zoom_in_tool\", \"arguments\": {\"bbox_2d\": [900, 900, 950, 950]}}</tool_call>",
    "<think>bad</think><tool_call>{\"name\": \"image_zoom_in_tool\", \"arguments\": {\"bbox_2d\": [1, 2]}}</tool_call>",
    "<think>odd</think><tool_call>{\"name\": \"magnifier\", \"arguments\": {}}</tool_call>",
    "<tool_call>{\"name\": \"image_zoom_in_tool\", \"arguments\": {\"bbox_2d\": [0, 0, 64, 64]}}",
    "<think>done</think><answer>cat</answer>",
    "<think>done</think><answer>dog",
    "just rambling",
    "<think>hmm</think>",
];

fn script_turn(rng: &mut impl Rng) -> (String, usize) {
    // Zoom-heavy so budgets are actually reached.
    let i = if rng.gen_bool(0.6) { rng.gen_range(0..6) } else { rng.gen_range(0..TURNS.len()) };
    (TURNS[i].to_string(), rng.gen_range(1..120))
}

fn check_invariants(t: &Trajectory) {
    let b = t.budget();
    let policy: usize = t.segments().iter().filter(|s| s.is_policy()).map(Segment::token_len).sum();
    assert_eq!(t.loss_mask().ones(), policy);
    assert_eq!(t.policy_tokens(), policy);
    assert!(t.policy_tokens() <= b.max_policy_tokens);
    if t.tool_call_count() > b.max_tool_calls {
        assert_eq!(t.terminal(), Some(&Terminal::BudgetExhausted));
    }
    if t.policy_tokens() == b.max_policy_tokens {
        assert!(t.is_terminal());
    }
    assert!(t.observation_count() <= b.max_tool_calls);
    let again = Trajectory::replay(&t.question_id, &t.image_ref, *b, t.segments()).unwrap();
    assert_eq!(again.tool_call_count(), t.tool_call_count());
    assert_eq!(again.terminal(), t.terminal());
    assert_eq!(again.loss_mask(), t.loss_mask());
}

#[test]
fn fuzzed_scripted_rollouts_respect_budgets() {
    let engine = RolloutEngine::new(
        PromptTemplate::new(vec![
            zoomtrace::protocol::ToolSchema::zoom_in(),
            zoomtrace::protocol::ToolSchema::rotate(),
        ])
        .unwrap(),
        RolloutConfig {
            max_concurrency: 1,
            ..RolloutConfig::default()
        },
    );
    let task = RolloutTask {
        id: "fuzz".into(),
        question: "What animal is shown?".into(),
        image: RasterImage::filled("fuzz", 64, 64, [30, 60, 90]),
        gold: "cat".into(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut violations = 0;
    for case in 0..10_000u64 {
        let script: Vec<(String, usize)> = (0..12).map(|_| script_turn(&mut rng)).collect();
        let budget = Budget::new(6, rng.gen_range(20..800));
        let policy = FnPolicy(move |view: &zoomtrace::trajectory::StateView, _: &_| {
            let (text, n) = &script[view.count_role(Role::Assistant).min(11)];
            Ok(Generation {
                text: text.clone(),
                token_len: *n,
                estimated: false,
                retries: 0,
            })
        });
        let engine = engine.with_budget(budget);
        let out = engine.run_rollout(&task, &policy, case);
        let t = &out.trajectory;
        if out.executed.len() > 6 || t.policy_tokens() > budget.max_policy_tokens || !t.is_terminal() {
            violations += 1;
        }
        assert_eq!(out.executed.len(), t.observation_count());
        check_invariants(t);
    }
    assert_eq!(violations, 0);
}

proptest! {
    #[test]
    fn append_sequences_keep_invariants(
        ops in prop::collection::vec((0usize..12, 1usize..50), 0..30),
        max_calls in 1usize..8,
        max_tokens in 10usize..300,
    ) {
        let mut t = Trajectory::new("q", "img", Budget::new(max_calls, max_tokens));
        for (op, n) in ops {
            if op < TURNS.len() {
                let _ = t.append_policy_text(TURNS[op], n);
            } else {
                let _ = t.append_observation("image_zoom_in_tool", None, "crop", n);
            }
            prop_assert!(t.tool_call_count() <= max_calls || t.terminal() == Some(&Terminal::BudgetExhausted));
            prop_assert!(t.policy_tokens() <= max_tokens);
        }
        check_invariants(&t);
        let rle = t.loss_mask().rle();
        prop_assert_eq!(zoomtrace::trajectory::LossMask::from_rle(&rle), t.loss_mask());
    }
}

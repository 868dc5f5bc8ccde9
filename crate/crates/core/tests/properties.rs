use std::collections::BTreeMap;

use callstep::annotator::{annotate, label_step, AnnotateOptions};
use callstep::corpus_io::{read_prm_dataset, write_prm_dataset, Granularity};
use callstep::eval::{ast_accuracy, tool_f1, Predictions};
use callstep::masking::{mask_universe, remap_sequence, Direction};
use callstep::scorer::logits_to_prob;
use callstep::stepper::{byte_offset, segment};
use callstep::{
    canonicalize, CallSequence, Category, FunctionCall, FunctionSpec, MachineState, ParamKind,
    ParamSpec, Query, ToolUniverse,
};
use proptest::prelude::*;
use serde_json::{json, Value};

fn leaf() -> impl Strategy<Value = Value> {
    prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::from),
        (-10_000i64..10_000).prop_map(Value::from),
        (-1000i32..1000).prop_map(|x| json!(x as f64 / 16.0)),
        "[a-z \\\\\"é中,:{}\\[\\]]{0,6}".prop_map(Value::from),
    ]
}

fn value() -> impl Strategy<Value = Value> {
    leaf().prop_recursive(3, 12, 3, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..3).prop_map(Value::Array),
            prop::collection::btree_map("[a-z]{1,3}", inner, 0..3)
                .prop_map(|m| Value::Object(m.into_iter().collect())),
        ]
    })
}

fn call() -> impl Strategy<Value = FunctionCall> {
    (
        "[a-z][a-z0-9_]{0,5}",
        prop::collection::btree_map("[a-z]{1,4}", value(), 0..4),
    )
        .prop_map(|(name, args)| {
            args.into_iter()
                .fold(FunctionCall::new(name), |c, (k, v)| c.with_arg(k, v))
        })
}

fn sequence() -> impl Strategy<Value = CallSequence> {
    prop::collection::vec(call(), 0..4).prop_map(CallSequence::new)
}

fn query_with(truths: Vec<CallSequence>) -> Query {
    Query {
        id: "p".into(),
        text: String::new(),
        universe: ToolUniverse::default(),
        ground_truths: truths,
        category: None,
    }
}

fn chars(s: &str) -> Vec<char> {
    s.chars().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn chunking_never_changes_events(seq in sequence(), cuts in prop::collection::vec(1usize..7, 1..64), pretty in any::<bool>()) {
        let text = if pretty { serde_json::to_string_pretty(&seq.to_json()).unwrap() } else { seq.to_response_text() };
        let whole = segment(&text, &query_with(vec![])).unwrap();
        let cs = chars(&text);
        let mut m = MachineState::default();
        let mut got = Vec::new();
        let (mut pos, mut i) = (0, 0);
        while pos < cs.len() {
            let n = cuts[i % cuts.len()].min(cs.len() - pos);
            got.extend(m.feed(&cs[pos..pos + n].iter().collect::<String>()).unwrap());
            pos += n;
            i += 1;
        }
        prop_assert_eq!(got, whole.clone());
        let rebuilt: String = whole.iter().flat_map(|e| cs[e.span.start..e.span.end].iter()).collect();
        prop_assert_eq!(rebuilt, text);
    }

    #[test]
    fn canonical_form_ignores_argument_order(seq in sequence()) {
        let mut shuffled = seq.clone();
        for c in &mut shuffled.calls {
            c.args.reverse();
        }
        prop_assert_eq!(canonicalize(&seq), canonicalize(&shuffled));
        let parsed = callstep::stepper::parse_response(&seq.to_response_text()).unwrap();
        prop_assert_eq!(canonicalize(&parsed), canonicalize(&seq));
    }

    #[test]
    fn ground_truth_is_labeled_all_positive(seq in sequence(), other in sequence()) {
        let q = query_with(vec![other, seq.clone()]);
        let t = annotate(&seq.to_response_text(), &q);
        prop_assert!(t.steps.iter().all(|s| s.reward.is_pos()));
    }

    #[test]
    fn labels_are_prefix_monotone_and_match_label_step(truth in sequence(), resp in sequence()) {
        let q = query_with(vec![truth]);
        let text = resp.to_response_text();
        let t = annotate(&text, &q);
        let first_neg = t.steps.iter().position(|s| !s.reward.is_pos());
        if let Some(i) = first_neg {
            prop_assert!(t.steps[i..].iter().all(|s| !s.reward.is_pos()));
        }
        for s in &t.steps {
            let a = byte_offset(&text, s.event.span.start);
            let b = byte_offset(&text, s.event.span.end);
            let r = label_step(&q, &text[..a], &text[a..b], AnnotateOptions::default());
            prop_assert_eq!(r, s.reward);
        }
    }

    #[test]
    fn masking_round_trips(names in prop::collection::btree_set("[a-z]{1,6}", 1..5), params in prop::collection::vec(prop::collection::btree_set("[a-z]{1,4}", 0..4), 5), seed in any::<u64>()) {
        let functions: Vec<FunctionSpec> = names.iter().zip(&params).map(|(n, ps)| {
            ps.iter().fold(FunctionSpec::new(n.clone(), "d"), |f, p| f.with_param(ParamSpec::new(p.clone(), ParamKind::Integer, true)))
        }).collect();
        let u = ToolUniverse::new(functions);
        let (masked, map) = mask_universe(&u, seed);
        prop_assert_eq!(masked.functions.len(), u.functions.len());
        let seq = CallSequence::new(u.functions.iter().map(|f| {
            f.params.iter().fold(FunctionCall::new(f.name.clone()), |c, p| c.with_arg(p.name.clone(), json!(1)))
        }).collect());
        let fwd = remap_sequence(&seq, &map, Direction::Forward).unwrap();
        for c in &fwd.calls {
            prop_assert!(masked.function(&c.name).is_some());
            prop_assert!(!names.contains(&c.name));
        }
        prop_assert_eq!(remap_sequence(&fwd, &map, Direction::Inverse).unwrap(), seq);
    }

    #[test]
    fn logits_give_complementary_probabilities(a in -1e4f64..1e4, b in -1e4f64..1e4) {
        let p = logits_to_prob(a, b).unwrap();
        let q = logits_to_prob(b, a).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((p + q - 1.0).abs() < 1e-12);
        prop_assert_eq!(p >= 0.5, a >= b);
    }

    #[test]
    fn metrics_do_not_depend_on_input_order(truths in prop::collection::vec(sequence(), 1..6), preds in prop::collection::vec(prop::option::of(sequence()), 6), rot in 0usize..6) {
        let queries: Vec<Query> = truths.iter().enumerate().map(|(i, t)| Query {
            id: format!("q{i}"),
            category: Some(Category::ALL[i % 4]),
            ..query_with(vec![t.clone()])
        }).collect();
        let predictions: Predictions = queries.iter().zip(&preds).map(|(q, p)| (q.id.clone(), p.clone())).collect();
        let mut rotated = queries.clone();
        rotated.rotate_left(rot % queries.len());
        prop_assert_eq!(ast_accuracy(&predictions, &queries), ast_accuracy(&predictions, &rotated));
        prop_assert_eq!(tool_f1(&predictions, &queries), tool_f1(&predictions, &rotated));
        let perfect: Predictions = queries.iter().map(|q| (q.id.clone(), Some(q.ground_truths[0].clone()))).collect();
        let report = ast_accuracy(&perfect, &queries);
        prop_assert_eq!(report.avg_accuracy, 1.0);
        prop_assert_eq!(tool_f1(&perfect, &queries), (1.0, 1.0));
    }

    #[test]
    fn prm_records_round_trip_through_jsonl(truth in sequence(), resp in sequence(), cut in 0usize..200) {
        let q = query_with(vec![truth]);
        let full = resp.to_response_text();
        let text: String = full.chars().take(cut.max(1)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prm.jsonl");
        let records: Vec<_> = [Granularity::Orm, Granularity::Coarse, Granularity::Fine]
            .into_iter()
            .map(|g| annotate(&text, &q).to_record(g))
            .collect();
        write_prm_dataset(&path, &records).unwrap();
        prop_assert_eq!(read_prm_dataset(&path).unwrap(), records);
    }
}

#[test]
fn irrelevance_query_accepts_empty_answer() {
    let q = query_with(vec![CallSequence::empty()]);
    let t = annotate("[]", &q);
    assert_eq!(t.steps.len(), 1);
    assert!(t.steps[0].reward.is_pos());
    let mut by_kind = BTreeMap::new();
    for s in annotate(r#"[{"name":"f","arguments":{}}]"#, &q).steps {
        by_kind.insert(s.event.kind, s.reward.is_pos());
    }
    assert!(by_kind.values().all(|p| !p));
}

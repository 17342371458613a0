use std::collections::BTreeSet;

use proptest::prelude::*;

use dbdiag_core::engine::Engine;
use dbdiag_core::eval::{builtin_transcript_dir, run_scripted_benchmark, EvalMethod};
use dbdiag_core::knowledge::{kb_lookup, segment_document, ExperienceSegment, KnowledgeBase};
use dbdiag_core::llm::{
    complete, ChatMessage, CompletionRequest, CompletionResponse, Embedder, FnBackend, RecordingBackend,
    ScriptedBackend,
};
use dbdiag_core::planner::{uct_value, DiagnosisTree, NodeStatus, TreeConfig};
use dbdiag_core::prompt_gen::{select_template, PromptCandidate};
use dbdiag_core::retrieval::{bm25_rank, embedding_rank, AnomalyQuery, Bm25Params};
use dbdiag_core::tokens;
use dbdiag_core::toolbox::{builtin_registry, builtin_scenarios};
use dbdiag_core::tools::ToolSpec;

const WORDS: &[&str] = &[
    "cpu", "memory", "disk", "lock", "index", "query", "slow", "usage", "high", "wait", "vacuum", "scan",
];

fn words(max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(WORDS), 1..max).prop_map(|w| w.join(" "))
}

fn registry_from(descriptions: &[String]) -> Vec<ToolSpec> {
    let template = builtin_registry()[0].clone();
    descriptions
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let mut t = template.clone();
            t.name = format!("tool_{i:02}");
            t.description = d.clone();
            t
        })
        .collect()
}

/// Tree ops: (kind, target) where kind 0 adds a child, 1 visits, 2 confirms
/// a cause, 3 fails, 4 demotes.
fn build_tree(ops: &[(u8, usize)]) -> DiagnosisTree {
    let mut tree = DiagnosisTree::new(TreeConfig::default());
    for &(kind, target) in ops {
        let id = target % tree.nodes.len();
        match kind {
            0 if tree.node(id).children.len() < 3 && tree.node(id).status != NodeStatus::Failed => {
                let child = tree.add_child(id, None);
                tree.node_mut(child).status = NodeStatus::Live;
                tree.node_mut(child).judged = true;
            }
            1 if id != 0 && tree.node(id).status != NodeStatus::Failed => tree.record_visit(id),
            2 if id != 0 && tree.node(id).status != NodeStatus::Failed => tree.backpropagate_cause(id, &[format!("C{id}")]),
            3 if id != 0 && tree.node(id).children.is_empty() => tree.fail(id),
            4 if id != 0 && tree.node(id).status == NodeStatus::Live => {
                tree.demote(id);
            }
            _ => {}
        }
    }
    tree
}

fn tree_ops() -> impl Strategy<Value = Vec<(u8, usize)>> {
    prop::collection::vec((0u8..5, 0usize..40), 1..120)
}

fn segment(name: String, metrics: BTreeSet<String>) -> ExperienceSegment {
    ExperienceSegment {
        content: format!("{name} content"),
        steps: "look at it".into(),
        provenance: vec!["prop#0".into()],
        metrics: metrics.into_iter().collect(),
        name,
    }
}

fn kb_strategy() -> impl Strategy<Value = Vec<ExperienceSegment>> {
    let metric = prop::sample::select(vec!["cpu_usage", "memory_usage", "disk_io", "locks", "tps", "swap"]);
    prop::collection::btree_map("[a-z]{1,6}", prop::collection::btree_set(metric.prop_map(String::from), 1..4), 0..10)
        .prop_map(|m| m.into_iter().map(|(n, ms)| segment(n, ms)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn uct_matches_closed_form(w in -50.0f64..50.0, n in 1u64..500, extra in 0u64..5000, c in 0.0f64..3.0) {
        let total = n + extra;
        let expected = w / n as f64 + c * ((total as f64).ln() / n as f64).sqrt();
        prop_assert!((uct_value(w, n, total, c) - expected).abs() <= 1e-12);
    }

    #[test]
    fn tree_invariants_hold_under_random_operations(ops in tree_ops()) {
        let tree = build_tree(&ops);
        prop_assert_eq!(tree.node(0).n, tree.simulations);
        for node in &tree.nodes {
            if node.status == NodeStatus::Failed {
                prop_assert_eq!(node.w, -1.0);
            }
            let child_visits: u64 = node.children.iter().map(|&c| tree.node(c).n).sum();
            prop_assert!(node.n >= child_visits);
            if let Some(p) = node.parent {
                prop_assert!(p < node.id);
                prop_assert!(tree.node(p).children.contains(&node.id));
            }
        }
        if let Some(best) = tree.best_by_uct() {
            prop_assert_ne!(tree.node(best).status, NodeStatus::Failed);
        }
        let back = DiagnosisTree::from_json(&tree.to_json()).unwrap();
        prop_assert_eq!(back.to_json(), tree.to_json());
    }

    #[test]
    fn demotion_lands_on_parent_score(ops in tree_ops(), pick in 0usize..40) {
        let mut tree = build_tree(&ops);
        let visited: Vec<usize> = (1..tree.nodes.len()).filter(|&i| tree.node(i).n > 0).collect();
        prop_assume!(!visited.is_empty());
        let id = visited[pick % visited.len()];
        prop_assert!(tree.demote(id));
        let parent = tree.node(id).parent.unwrap();
        prop_assert!((tree.uct(id) - tree.uct(parent)).abs() <= 1e-9);
    }

    #[test]
    fn segmentation_is_lossless_and_bounded(
        sections in prop::collection::vec((0u8..3, prop::collection::vec(words(200), 0..4)), 0..6),
        limit in 64usize..300,
    ) {
        let mut doc = String::from("intro line\n\n");
        for (i, (kind, paras)) in sections.iter().enumerate() {
            match kind {
                0 => doc.push_str(&format!("# Part {i}\n")),
                1 => doc.push_str(&format!("{}.1 Numbered {i}\n", i + 1)),
                _ => doc.push_str("```\n# fenced\n```\n"),
            }
            for p in paras {
                doc.push_str(p);
                doc.push_str("\n\n");
            }
        }
        let chunks = segment_document("prop", &doc, limit).unwrap();
        let joined: String = chunks.iter().map(|c| c.content.as_str()).collect();
        prop_assert_eq!(joined, doc);
        for c in &chunks {
            prop_assert!(c.token_estimate <= limit);
            prop_assert_eq!(c.token_estimate, tokens::estimate(&c.content));
            prop_assert!(!c.section_path.is_empty());
        }
    }

    #[test]
    fn kb_round_trip_and_index(segments in kb_strategy()) {
        let kb = KnowledgeBase::from_segments(segments).unwrap();
        prop_assert!(kb.index_is_consistent());
        let text = kb.to_json();
        let again = KnowledgeBase::from_json(&text).unwrap();
        prop_assert_eq!(again.to_json(), text);
        prop_assert!(again.index_is_consistent());
    }

    #[test]
    fn kb_lookup_matches_brute_force(segments in kb_strategy(), abnormal in prop::collection::vec(
        prop::sample::select(vec!["cpu_usage", "memory_usage", "disk_io", "locks", "tps", "swap"]), 0..4)) {
        let abnormal: Vec<String> = abnormal.into_iter().map(String::from).collect();
        let kb = KnowledgeBase::from_segments(segments.clone()).unwrap();
        let got: Vec<&str> = kb_lookup(&kb, &abnormal).iter().map(|s| s.name.as_str()).collect();
        let mut want: Vec<(usize, &str)> = segments
            .iter()
            .map(|s| (s.metrics.iter().filter(|m| abnormal.contains(m)).count(), s.name.as_str()))
            .filter(|(n, _)| *n > 0)
            .collect();
        want.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
        let want: Vec<&str> = want.into_iter().map(|(_, n)| n).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn rankers_ignore_registry_order(docs in prop::collection::vec(words(10), 1..15), query in words(4), seed in any::<u64>()) {
        let registry = registry_from(&docs);
        let mut shuffled = registry.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed.rotate_left(i as u32) as usize) % (i + 1));
        }
        let q = AnomalyQuery::new(query, Vec::new(), [0, 1]);
        let a = bm25_rank(&q, &registry, Bm25Params::default()).unwrap();
        let b = bm25_rank(&q, &shuffled, Bm25Params::default()).unwrap();
        prop_assert_eq!(a.names(), b.names());
        let embedder = Embedder::hashing(64);
        let a = embedding_rank(&q, &registry, &embedder).unwrap();
        let b = embedding_rank(&q, &shuffled, &embedder).unwrap();
        prop_assert_eq!(a.names(), b.names());
    }

    #[test]
    fn embedding_rank_keeps_relative_order_when_a_tool_is_added(docs in prop::collection::vec(words(10), 2..12), query in words(4)) {
        let registry = registry_from(&docs);
        let q = AnomalyQuery::new(query, Vec::new(), [0, 1]);
        let embedder = Embedder::hashing(64);
        let without: Vec<String> = embedding_rank(&q, &registry[..registry.len() - 1], &embedder)
            .unwrap()
            .names()
            .into_iter()
            .map(String::from)
            .collect();
        let last = registry.last().unwrap().name.clone();
        let with: Vec<String> = embedding_rank(&q, &registry, &embedder)
            .unwrap()
            .names()
            .into_iter()
            .filter(|n| *n != last)
            .map(String::from)
            .collect();
        prop_assert_eq!(with, without);
    }

    #[test]
    fn hashing_embeddings_have_unit_norm(text in "[a-z ]{0,40}[a-z]") {
        let v = Embedder::hashing(32).embed(&text).unwrap();
        prop_assert_eq!(v.len(), 32);
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn scripted_replay_is_a_pure_function_of_the_request(
        turns in prop::collection::vec("[a-z ]{1,30}", 1..5),
        tools in prop::sample::subsequence((0..14usize).collect::<Vec<_>>(), 0..5),
    ) {
        let registry = builtin_registry();
        let offered: Vec<ToolSpec> = tools.iter().filter_map(|&i| registry.get(i).cloned()).collect();
        let messages: Vec<ChatMessage> = turns.iter().map(|t| ChatMessage::user(format!("q {t}"))).collect();
        let request = CompletionRequest::new(messages).with_tools(offered);
        let echo = FnBackend(|r: &CompletionRequest| Ok(CompletionResponse::text(format!("seen {}", r.messages.len()))));
        let recorder = RecordingBackend::new(echo);
        let first = complete(&recorder, &request).unwrap();
        let replay = ScriptedBackend::new(recorder.script());
        prop_assert_eq!(&complete(&replay, &request).unwrap(), &first);
        prop_assert_eq!(&complete(&replay, &request.clone()).unwrap(), &first);
    }

    #[test]
    fn template_selection_is_scale_invariant(scores in prop::collection::vec(0.0f64..1.0, 1..10), factor in 0.01f64..100.0, approved in prop::collection::vec(any::<bool>(), 10)) {
        let make = |k: f64| -> Vec<PromptCandidate> {
            scores
                .iter()
                .enumerate()
                .map(|(i, s)| PromptCandidate {
                    id: format!("c{i}"),
                    template: "{anomaly} {tools} {experience}".into(),
                    score: Some(s * k),
                    human_approved: approved[i],
                })
                .collect()
        };
        let a = select_template(&make(1.0), 5).unwrap();
        let b = select_template(&make(factor), 5).unwrap();
        prop_assert_eq!(a.selected.id, b.selected.id);
    }
}

#[test]
fn scripted_benchmark_is_idempotent_and_success_implies_legal() {
    let scenarios = builtin_scenarios();
    let engine = Engine::default();
    for method in [EvalMethod::Full, EvalMethod::Baseline] {
        let a = run_scripted_benchmark(method, &scenarios, &engine, &builtin_transcript_dir()).unwrap();
        let b = run_scripted_benchmark(method, &scenarios, &engine, &builtin_transcript_dir()).unwrap();
        assert_eq!(a, b);
        assert!(a.outcomes.iter().all(|o| !o.success || o.legal));
        let wins = a.outcomes.iter().filter(|o| o.success).count() as f64;
        assert!((a.success_rate - wins / a.outcomes.len() as f64).abs() < 1e-12);
    }
}

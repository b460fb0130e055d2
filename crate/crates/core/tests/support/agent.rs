//! Agent fixtures: a small indexed corpus, an adversarial backend and the
//! per-case checks shared by the loop tests and the acceptance run.

use qms_core::agent::{build_prompt, run_react, AgentContext, AgentError, BackendConfig, LlmBackend};
use qms_core::compliance::CfrTree;
use qms_core::corpus::{Chunk, ChunkId, DocId, DocKind};
use qms_core::retrieval::{index_chunks, Evidence, HashingEmbedder, IndexSnapshot, RetrievalConfig, Retriever, TermOverlapReranker};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub fn chunk(id: &str, kind: DocKind, text: &str) -> Chunk {
    Chunk { chunk_id: ChunkId(id.into()), doc_id: DocId(id.into()), kind, text: text.into(), char_span: (0, text.chars().count()), seq: 0, overlap_chars: 0 }
}

pub fn snapshot() -> IndexSnapshot {
    let chunks = vec![
        chunk("reg-a", DocKind::Regulatory, "211.42 design and construction features aseptic processing areas"),
        chunk("reg-b", DocKind::Regulatory, "211.113 control of microbiological contamination sterile drug products"),
        chunk("reg-c", DocKind::Regulatory, "211.192 production record review"),
        chunk("483-a", DocKind::Form483, "aseptic processing smoke studies were not performed under dynamic conditions"),
        chunk("qa-a", DocKind::QA, "Q: what is a media fill\nA: a simulation of aseptic processing"),
    ];
    index_chunks(&chunks, &HashingEmbedder::default()).unwrap()
}

pub fn ctx<'a>(snap: &'a IndexSnapshot, tree: &'a CfrTree) -> AgentContext<'a> {
    let embedder: &'static HashingEmbedder = Box::leak(Box::default());
    AgentContext { retriever: Retriever { snapshot: snap, embedder, reranker: &TermOverlapReranker }, tree }
}

/// Replies drawn from protocol fragments, garbage, oversized text, bogus
/// citations and transport failures.
pub struct Adversary {
    pub rng: StdRng,
    pub calls: usize,
}

impl LlmBackend for Adversary {
    fn complete(&mut self, _prompt: &str, _max_tokens: usize) -> Result<String, AgentError> {
        self.calls += 1;
        let ids = ["reg-a", "reg-b", "reg-c", "483-a", "qa-a", "ghost", "", "reg-a\"", "../etc"];
        let corpora = ["regulations", "cases", "qa", "laws", "REGULATIONS"];
        let r = &mut self.rng;
        Ok(match r.gen_range(0..10) {
            0 => return Err(AgentError::BackendUnavailable("connection reset".into())),
            1 => return Err(AgentError::Timeout),
            2 => String::new(),
            3 => "x".repeat(r.gen_range(0..50_000)),
            4 | 5 => (0..r.gen_range(0..40))
                .map(|_| {
                    format!(
                        "ACTION: retrieve(corpus={}, query=\"{}\")",
                        corpora[r.gen_range(0..corpora.len())],
                        ["aseptic", "", "contamination sterile", "\\\"quoted\\\""][r.gen_range(0..4)]
                    )
                })
                .collect::<Vec<_>>()
                .join("\n"),
            6 => "FINAL: {not json".into(),
            7 => "THOUGHT: hmm\nACTION: retrieve(corpus=regulations query=missing-comma)\nFINAL:".into(),
            _ => {
                let cite = |r: &mut StdRng| format!("\"{}\"", ids[r.gen_range(0..ids.len())]);
                let cites: Vec<String> = (0..r.gen_range(0..4)).map(|_| cite(r)).collect();
                format!(
                    r#"FINAL: {{"regulatory_basis":[{{"citation":{},"excerpt":""}}],"precedents":[{{"chunk_id":{},"summary":"s"}}],"checklist":[{{"risk_summary":"r","action_item":"a","citations":[{}]}}],"disclaimer":""}}"#,
                    cite(r),
                    cite(r),
                    cites.join(",")
                )
            }
        })
    }
}

/// Runs one randomized adversarial case. Returns whether the run produced an
/// answer; panics on any invariant violation.
pub fn adversarial_case(seed: u64, snap: &IndexSnapshot, tree: &CfrTree) -> bool {
    let rcfg = RetrievalConfig { rerank_threshold: 0.3, ..RetrievalConfig::default() };
    let mut rng = StdRng::seed_from_u64(seed);
    let cfg = BackendConfig { max_steps: rng.gen_range(0..10), context_window: [131_072, 600, 60][rng.gen_range(0..3)], ..BackendConfig::default() };
    let mut backend = Adversary { rng, calls: 0 };
    let result = run_react("aseptic contamination", ctx(snap, tree), &mut backend, &cfg, &rcfg, &mut |_| {});
    assert!(backend.calls <= 3, "seed {seed}: {} calls", backend.calls);
    match result {
        Ok((t, answer)) => {
            assert!(t.is_well_formed(), "seed {seed}");
            assert!(t.action_count() <= cfg.max_steps);
            let evidence = t.evidence_ids();
            assert!(answer.citations().all(|c| evidence.contains(c)), "seed {seed}");
            assert!(answer.checklist.iter().all(|c| !c.citations.is_empty()));
            true
        }
        Err(AgentError::BudgetExhausted(t)) => {
            assert!(t.partial && t.is_well_formed() && t.action_count() <= cfg.max_steps);
            false
        }
        Err(
            AgentError::BackendUnavailable(_)
            | AgentError::Timeout
            | AgentError::UnparseableFinal(_)
            | AgentError::ContextOverflow { .. }
            | AgentError::QueryAloneExceedsBudget { .. },
        ) => false,
        Err(other) => panic!("seed {seed}: unexpected {other:?}"),
    }
}

pub fn evidence(rng: &mut StdRng, n: usize) -> Vec<Evidence> {
    (0..n)
        .map(|i| {
            let score = [0.7, 0.75, 0.8, 0.9, 1.0][rng.gen_range(0..5)];
            Evidence {
                chunk_id: ChunkId(format!("c{i:03}")),
                doc_id: DocId("d".into()),
                kind: DocKind::Regulatory,
                text: "w".repeat(rng.gen_range(20_000..60_000)),
                rerank_score: score,
                fused_score: score,
            }
        })
        .collect()
}

/// One oversized-evidence case: the prompt must fit the window, keep the
/// highest-priority chunks, and come out identical on a second build.
pub fn truncation_case(rng: &mut StdRng, cfg: &BackendConfig) {
    let n = rng.gen_range(30..60);
    let ev = evidence(rng, n);
    let total: usize = ev.iter().map(|e| e.text.len()).sum();
    assert!(total / 4 > cfg.context_window);
    let a = build_prompt("role", "plan", &ev, "query", cfg).unwrap();
    let b = build_prompt("role", "plan", &ev, "query", cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.estimated_tokens <= cfg.context_window);
    assert_eq!(a.estimated_tokens, a.text.chars().count().div_ceil(4));
    assert!(!a.dropped.is_empty());
    assert_eq!(a.included.len() + a.dropped.len(), ev.len());
    // Every kept chunk outranks every dropped one.
    let key = |id: &ChunkId| {
        let e = ev.iter().find(|e| &e.chunk_id == id).unwrap();
        (e.rerank_score, std::cmp::Reverse(e.chunk_id.clone()))
    };
    let worst_kept = a.included.iter().map(key).min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let best_dropped = a.dropped.iter().map(key).max_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    if let (Some(k), Some(d)) = (worst_kept, best_dropped) {
        assert!(k.0 > d.0 || (k.0 == d.0 && k.1 > d.1));
    }
    // Nothing more fits: adding the next dropped chunk overflows.
    let next = &a.dropped[0];
    let mut with_next: Vec<Evidence> = ev.iter().filter(|e| a.included.contains(&e.chunk_id) || &e.chunk_id == next).cloned().collect();
    with_next.sort_by(|x, y| x.chunk_id.cmp(&y.chunk_id));
    let grown = build_prompt("role", "plan", &with_next, "query", &BackendConfig { context_window: usize::MAX, ..cfg.clone() }).unwrap();
    assert!(grown.estimated_tokens > cfg.context_window);
}

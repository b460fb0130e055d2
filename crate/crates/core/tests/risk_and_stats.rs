//! Risk profiles and corpus statistics against brute-force recounts.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use qms_core::compliance::{extract_refs, CfrRef, CfrTree, RiskFilter};
use qms_core::corpus::{Corpus, DocKind};
use qms_core::ingest::ChunkConfig;
use qms_core::kb::{DocumentInput, KnowledgeBase};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const PARTS: &[(u32, u32)] = &[(211, 42), (211, 113), (211, 100), (210, 3), (312, 50), (314, 81), (600, 14), (820, 30), (11, 10)];
const FIRMS: &[&str] = &["Acme Pharma, Inc.", "ACME PHARMA", "Beta Biologics LLC", "Gamma Labs"];

struct Generated {
    inputs: Vec<DocumentInput>,
    /// Per observation: firm, date and distinct cited parts.
    truth: Vec<(String, NaiveDate, BTreeSet<u32>)>,
}

fn generate(rng: &mut StdRng, docs: usize) -> Generated {
    let mut inputs = Vec::new();
    let mut truth = Vec::new();
    for d in 0..docs {
        let firm = FIRMS[rng.gen_range(0..FIRMS.len())];
        let date = NaiveDate::from_ymd_opt(2020 + rng.gen_range(0..5), rng.gen_range(1..=12), rng.gen_range(1..=28)).unwrap();
        let mut body = format!("Firm: {firm}\nInspector: Inspector {}\nDate: {date}\n", rng.gen_range(0..3));
        for o in 0..rng.gen_range(1..6) {
            let mut parts = BTreeSet::new();
            let mut text = format!("Observation {o} of document {d}.");
            for _ in 0..rng.gen_range(0..4) {
                let (part, sec) = PARTS[rng.gen_range(0..PARTS.len())];
                parts.insert(part);
                text.push_str(&format!(" Contrary to 21 CFR {part}.{sec}(a), controls were lacking."));
            }
            body.push_str("===OBS===\n");
            body.push_str(&text);
            body.push('\n');
            truth.push((firm.to_string(), date, parts));
        }
        inputs.push(DocumentInput { title: format!("483 #{d}"), body, source_uri: format!("file:///483/{d}.txt"), verified: rng.gen_bool(0.8) });
    }
    Generated { inputs, truth }
}

#[test]
fn risk_profile_matches_brute_force_tally() {
    let mut rng = StdRng::seed_from_u64(99);
    let generated = generate(&mut rng, 40);
    let mut kb = KnowledgeBase::in_memory(ChunkConfig::default()).unwrap();
    kb.ingest_documents(DocKind::Form483, generated.inputs.clone()).unwrap();
    let tree = CfrTree::default_tree();

    let report = kb.risk_report(&RiskFilter { top_n: 100, ..RiskFilter::default() });
    let mut known: BTreeMap<u32, u64> = BTreeMap::new();
    let mut unknown: BTreeMap<u32, u64> = BTreeMap::new();
    for (_, _, parts) in &generated.truth {
        for p in parts {
            *if tree.contains(*p) { &mut known } else { &mut unknown }.entry(*p).or_insert(0) += 1;
        }
    }
    assert_eq!(report.total_observations, generated.truth.len() as u64);
    assert_eq!(report.per_part, known);
    assert_eq!(report.unknown_parts, unknown);
    let mut top: Vec<(u32, u64)> = known.into_iter().collect();
    top.sort_by_key(|&(p, c)| (std::cmp::Reverse(c), p));
    assert_eq!(report.top_parts, top);

    // Date window and part filter.
    let from = NaiveDate::from_ymd_opt(2022, 1, 1).unwrap();
    let to = NaiveDate::from_ymd_opt(2023, 12, 31).unwrap();
    let filtered = kb.risk_report(&RiskFilter { from: Some(from), to: Some(to), part: Some(211), ..RiskFilter::default() });
    let expect = generated.truth.iter().filter(|(_, d, parts)| *d >= from && *d <= to && parts.contains(&211)).count();
    assert_eq!(filtered.total_observations, expect as u64);

    // Firm grouping: "Acme Pharma, Inc." and "ACME PHARMA" share a key.
    let acme = kb.risk_report(&RiskFilter { firm_group: Some("firm:acme pharma".into()), ..RiskFilter::default() });
    let expect = generated.truth.iter().filter(|(f, _, _)| f.to_lowercase().starts_with("acme")).count();
    assert_eq!(acme.total_observations, expect as u64);
}

#[test]
fn stats_match_recount_after_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = StdRng::seed_from_u64(5);
    let generated = generate(&mut rng, 12);
    {
        let mut kb = KnowledgeBase::open(dir.path(), ChunkConfig::default()).unwrap();
        kb.ingest_documents(DocKind::Form483, generated.inputs.clone()).unwrap();
        let reg = (0..5)
            .map(|i| DocumentInput { title: format!("reg {i}"), body: "Section text.\n\n".repeat(100 * (i + 1)), source_uri: String::new(), verified: true })
            .collect();
        kb.ingest_documents(DocKind::Regulatory, reg).unwrap();
        // Re-ingesting identical content is a no-op.
        kb.ingest_documents(DocKind::Form483, generated.inputs[..3].to_vec()).unwrap();
    }
    let corpus = Corpus::open(dir.path()).unwrap();
    let stats = corpus.corpus_stats();
    assert_eq!(stats.documents.get(DocKind::Form483), 12);
    assert_eq!(stats.documents.get(DocKind::Regulatory), 5);
    assert_eq!(stats.observation_count, generated.truth.len() as u64);
    assert_eq!(stats.chunks.get(DocKind::Form483), generated.truth.len() as u64);
    assert_eq!(stats.chunks.total(), corpus.all_chunks().count() as u64);
    assert_eq!(stats.unverified_documents, generated.inputs.iter().filter(|d| !d.verified).count() as u64);
    let firms: BTreeSet<String> = generated.truth.iter().map(|(f, _, _)| f.to_lowercase().replace([',', '.'], "").replace(" inc", "").replace(" llc", "")).collect();
    assert_eq!(stats.firm_group_count, firms.len() as u64);
    assert!((1..=3).contains(&stats.inspector_group_count));
    assert!(corpus.audit().is_empty());
}

#[test]
fn citation_extraction() {
    let tree = CfrTree::default_tree();
    let refs = extract_refs("See 21 CFR 211.113(b) and 21 CFR Part 212, also 211.42(c)(1) and 820.30.", &tree);
    let shown: Vec<String> = refs.iter().map(CfrRef::to_string).collect();
    assert!(shown.contains(&"21 CFR 211.113(b)".to_string()));
    assert!(shown.contains(&"21 CFR Part 212".to_string()));
    assert!(shown.contains(&"21 CFR 211.42(c)(1)".to_string()));
    // Bare numbers are only taken as citations for parts in the tree.
    assert!(!refs.iter().any(|r| r.part == 820));
    for p in [210, 211, 312, 314, 600, 680] {
        assert!(tree.contains(p), "{p}");
    }
}

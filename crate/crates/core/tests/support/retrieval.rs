//! Exhaustive reference for hybrid retrieval.
//!
//! Corpora use lowercase ASCII vocabulary so the oracle can tokenize by
//! splitting on non-alphanumerics.

use std::collections::{BTreeMap, BTreeSet};

use qms_core::corpus::{Chunk, ChunkId, DocId, DocKind};
use qms_core::retrieval::RetrievalConfig;
use rand::rngs::StdRng;
use rand::Rng;

pub const VOCAB: &[&str] = &[
    "aseptic", "processing", "sterile", "filling", "gowning", "airflow", "hepa", "filter", "batch", "record", "deviation", "capa", "cleaning", "validation",
    "equipment", "buildings", "contamination", "microbial", "procedure", "written", "quality", "unit", "investigation", "environmental", "monitoring",
    "media", "fill", "operators", "training", "complaint",
];

pub fn oracle_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

pub fn fnv(bytes: &[u8]) -> u64 {
    let mut h = 14_695_981_039_346_656_037u64;
    for &b in bytes {
        h = (h ^ b as u64).wrapping_mul(1_099_511_628_211);
    }
    h
}

pub fn oracle_embed(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for t in oracle_tokens(text) {
        v[(fnv(t.as_bytes()) % dim as u64) as usize] += 1.0;
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub struct Oracle {
    pub chunks: Vec<Chunk>,
}

impl Oracle {
    pub fn bm25(&self, query: &str) -> Vec<f64> {
        let docs: Vec<Vec<String>> = self.chunks.iter().map(|c| oracle_tokens(&c.text)).collect();
        let n = docs.len() as f64;
        let avg = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
        let terms: BTreeSet<String> = oracle_tokens(query).into_iter().collect();
        let df: BTreeMap<&String, f64> = terms.iter().map(|t| (t, docs.iter().filter(|x| x.contains(t)).count() as f64)).collect();
        docs.iter()
            .map(|d| {
                let mut s = 0.0;
                for t in &terms {
                    let df = df[t];
                    if df == 0.0 {
                        continue;
                    }
                    let tf = d.iter().filter(|x| *x == t).count() as f64;
                    if tf == 0.0 {
                        continue;
                    }
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    s += idf * (tf * 2.2) / (tf + 1.2 * (1.0 - 0.75 + 0.75 * d.len() as f64 / avg));
                }
                s
            })
            .collect()
    }

    pub fn cosine(&self, query: &str) -> Vec<f64> {
        let q = oracle_embed(query, 64);
        self.chunks.iter().map(|c| oracle_embed(&c.text, 64).iter().zip(&q).map(|(a, b)| a * b).sum()).collect()
    }

    pub fn admitted(&self, filter: Option<DocKind>) -> Vec<usize> {
        (0..self.chunks.len()).filter(|&i| filter.is_none_or(|k| self.chunks[i].kind == k)).collect()
    }

    pub fn ranked(&self, scores: &[f64], idx: Vec<usize>, k: usize) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = idx.into_iter().map(|i| (i, scores[i])).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(self.chunks[a.0].chunk_id.cmp(&self.chunks[b.0].chunk_id)));
        v.truncate(k);
        v
    }

    pub fn norm(list: &[(usize, f64)]) -> BTreeMap<usize, f64> {
        let lo = list.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
        let hi = list.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
        list.iter().map(|&(i, s)| (i, if hi > lo { (s - lo) / (hi - lo) } else { 1.0 })).collect()
    }

    /// Returns `(chunk id, rerank score, fused score)` for the final hits.
    pub fn retrieve(&self, query: &str, cfg: &RetrievalConfig, filter: Option<DocKind>) -> Vec<(ChunkId, f64, f64)> {
        let bm = self.bm25(query);
        let cos = self.cosine(query);
        let kw = self.ranked(&bm, self.admitted(filter).into_iter().filter(|&i| bm[i] > 0.0).collect(), cfg.k_candidates);
        let vec = self.ranked(&cos, self.admitted(filter), cfg.k_candidates);
        let (kn, vn) = (Self::norm(&kw), Self::norm(&vec));
        let pool: BTreeSet<usize> = kn.keys().chain(vn.keys()).copied().collect();
        let q: BTreeSet<String> = oracle_tokens(query).into_iter().collect();
        let mut scored: Vec<(ChunkId, f64, f64)> = pool
            .into_iter()
            .map(|i| {
                let fused = cfg.w_kw * kn.get(&i).copied().unwrap_or(0.0) + cfg.w_vec * vn.get(&i).copied().unwrap_or(0.0);
                let c: BTreeSet<String> = oracle_tokens(&self.chunks[i].text).into_iter().collect();
                let rr = q.intersection(&c).count() as f64 / q.len() as f64;
                (self.chunks[i].chunk_id.clone(), rr, fused)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp(&b.0)));
        scored.into_iter().filter(|s| s.1 >= cfg.rerank_threshold).take(cfg.top_k).collect()
    }
}

pub fn random_text(rng: &mut StdRng, max_words: usize) -> String {
    let n = rng.gen_range(1..=max_words);
    (0..n).map(|_| VOCAB[rng.gen_range(0..VOCAB.len())]).collect::<Vec<_>>().join(" ")
}

pub fn random_corpus(rng: &mut StdRng, n: usize) -> Vec<Chunk> {
    (0..n)
        .map(|i| {
            let kind = [DocKind::Regulatory, DocKind::Form483, DocKind::QA][rng.gen_range(0..3)];
            let text = random_text(rng, 40);
            Chunk {
                chunk_id: ChunkId(format!("doc-{:03}-c0000", i)),
                doc_id: DocId(format!("doc-{:03}", i)),
                kind,
                char_span: (0, text.len()),
                text,
                seq: 0,
                overlap_chars: 0,
            }
        })
        .collect()
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

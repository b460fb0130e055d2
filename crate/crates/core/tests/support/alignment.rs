//! Union-find oracle with decision replay for entity alignment.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{TimeZone, Utc};
use qms_core::ingest::{AlignmentAction, AlignmentDecision, EntityKind, EntityRegistry};

pub struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    pub fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            let root = self.find(self.parent[x]);
            self.parent[x] = root;
        }
        self.parent[x]
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }

    pub fn component(&mut self, x: usize) -> BTreeSet<usize> {
        let r = self.find(x);
        (0..self.parent.len()).filter(|&y| self.find(y) == r).collect()
    }
}

/// Independent key derivation for the fixture: the same rules written as a
/// straight pipeline.
pub fn oracle_key(raw: &str, kind: EntityKind) -> Option<String> {
    let mut s = raw.trim().to_string();
    if kind == EntityKind::Inspector {
        if let Some(i) = s.find(',') {
            s = format!("{} {}", &s[i + 1..], &s[..i]);
        }
    }
    let s: String = s.to_lowercase().chars().map(|c| if c.is_alphanumeric() { c } else { ' ' }).collect();
    let mut words: Vec<&str> = s.split_whitespace().collect();
    match kind {
        EntityKind::Firm => {
            while matches!(words.last(), Some(&("inc" | "llc" | "ltd" | "corp" | "co" | "gmbh"))) {
                words.pop();
            }
        }
        EntityKind::Inspector => words.retain(|w| !matches!(*w, "mr" | "mrs" | "ms" | "miss" | "dr" | "prof" | "sir")),
    }
    (!words.is_empty()).then(|| words.join(" "))
}

/// Final partition of surface forms, as sets of `(kind, raw)`.
pub type Partition = BTreeSet<BTreeSet<(EntityKind, String)>>;

/// Replays merges as unions. A split rebuilds the union-find without the
/// split proposal's links, or explodes a proposal that was never merged.
pub fn oracle_replay(forms: &[(String, EntityKind)], decisions: &[AlignmentDecision]) -> Result<Partition, &'static str> {
    let mut keyed: BTreeMap<(EntityKind, String), BTreeSet<String>> = BTreeMap::new();
    for (raw, kind) in forms {
        if let Some(k) = oracle_key(raw, *kind) {
            keyed.entry((*kind, k)).or_default().insert(raw.clone());
        }
    }
    let ids: Vec<(EntityKind, String)> = keyed.keys().cloned().collect();
    let index = |target: &str| -> Option<usize> {
        let (prefix, key) = target.split_once(':').map_or((None, target), |(p, k)| (Some(p), k));
        let hits: Vec<usize> = ids
            .iter()
            .enumerate()
            .filter(|(_, (kind, k))| {
                k == key && prefix.is_none_or(|p| p == if *kind == EntityKind::Firm { "firm" } else { "inspector" })
            })
            .map(|(i, _)| i)
            .collect();
        (hits.len() == 1).then(|| hits[0])
    };

    let mut links: Vec<BTreeSet<usize>> = Vec::new();
    let mut exploded: BTreeSet<usize> = BTreeSet::new();
    let build = |links: &[BTreeSet<usize>]| {
        let mut uf = UnionFind::new(ids.len());
        for set in links {
            let first = *set.iter().next().unwrap();
            for &x in set {
                uf.union(first, x);
            }
        }
        uf
    };
    for d in decisions {
        let targets: BTreeSet<usize> = d.targets.iter().map(|t| index(t).ok_or("unknown")).collect::<Result<_, _>>()?;
        match d.action {
            AlignmentAction::Merge => {
                if targets.iter().map(|&t| ids[t].0).collect::<BTreeSet<_>>().len() > 1 {
                    return Err("mixed");
                }
                if targets.len() < 2 {
                    continue;
                }
                let mut uf = build(&links);
                for &t in &targets {
                    let comp = uf.component(t);
                    if comp.len() > 1 && !comp.is_subset(&targets) {
                        return Err("conflict");
                    }
                }
                links.push(targets.clone());
                exploded.retain(|x| !targets.contains(x));
            }
            AlignmentAction::Split => {
                for &t in &targets {
                    let mut uf = build(&links);
                    let comp = uf.component(t);
                    if comp.len() > 1 {
                        let rest: BTreeSet<usize> = comp.into_iter().filter(|&x| x != t).collect();
                        links.retain(|l| !l.contains(&t) && l.is_disjoint(&rest));
                        if rest.len() > 1 {
                            links.push(rest);
                        }
                    } else {
                        exploded.insert(t);
                    }
                }
            }
        }
    }
    let mut uf = build(&links);
    let mut groups: BTreeMap<usize, BTreeSet<(EntityKind, String)>> = BTreeMap::new();
    let mut out = Partition::new();
    for (i, id) in ids.iter().enumerate() {
        let members = keyed[id].iter().map(|m| (id.0, m.clone()));
        if exploded.contains(&i) && uf.component(i).len() == 1 {
            for m in members {
                out.insert(BTreeSet::from([m]));
            }
        } else {
            groups.entry(uf.find(i)).or_default().extend(members);
        }
    }
    out.extend(groups.into_values());
    Ok(out)
}

pub fn partition_of(registry: &EntityRegistry) -> Partition {
    registry.groups.values().map(|g| g.members.iter().map(|m| (g.kind, m.clone())).collect()).collect()
}

pub fn decision(action: AlignmentAction, targets: &[&str]) -> AlignmentDecision {
    AlignmentDecision {
        action,
        targets: targets.iter().map(|s| s.to_string()).collect(),
        confirmed_by: "qa.lead".into(),
        timestamp: Utc.with_ymd_and_hms(2025, 1, 2, 3, 4, 5).unwrap(),
    }
}

pub fn firms(names: &[&str]) -> Vec<(String, EntityKind)> {
    names.iter().map(|n| (n.to_string(), EntityKind::Firm)).collect()
}

/// Fifty surface forms: firm variants by case, punctuation and suffix, and
/// inspector variants by order, honorific and spacing.
pub fn fifty_variants() -> Vec<(String, EntityKind)> {
    let mut out = Vec::new();
    for base in ["Acme Pharma", "Beta Biologics", "Gamma Sterile Products", "Delta Labs", "Epsilon Fill Finish"] {
        for v in [
            base.to_string(),
            base.to_uppercase(),
            format!("{base}, Inc."),
            format!("{base} LLC"),
            format!("{base} Co"),
            format!("  {}  ", base.to_lowercase()),
        ] {
            out.push((v, EntityKind::Firm));
        }
    }
    for (first, last) in [("Jane", "Doe"), ("Rahul", "Mehta"), ("Ana", "Souza"), ("Kim", "Lee"), ("Omar", "Haddad")] {
        for v in [format!("{first} {last}"), format!("{last}, {first}"), format!("Dr. {first} {last}"), format!("{} {}", first.to_uppercase(), last)] {
            out.push((v, EntityKind::Inspector));
        }
    }
    assert_eq!(out.len(), 50);
    out
}

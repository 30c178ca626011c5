//! Knowledge-graph data model: vocabularies, the indexed training-triple
//! store, text store and dataset splits.

mod analytics;
mod io;

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedStream;

pub use analytics::{csv_field, degree_stats, relation_jaccard, DegreeStats, JaccardMatrix};
pub use io::{load_dataset, read_triples, write_text, write_triples, DatasetPaths, LoadReport};

/// Prefix marking the text of an inverse relation.
pub const INVERSE_PREFIX: &str = "inverse of ";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

/// Interning table from raw names to dense ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Interner {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Interner {
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Raw names or descriptions per entity and relation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TextStore {
    pub entity_text: Vec<String>,
    pub relation_text: Vec<String>,
    /// Maximum retained token count of an assembled text sequence.
    pub max_len: usize,
}

impl TextStore {
    pub const DEFAULT_MAX_LEN: usize = 64;

    pub fn empty_entity_entries(&self) -> usize {
        self.entity_text
            .iter()
            .filter(|s| s.trim().is_empty())
            .count()
    }

    pub fn empty_relation_entries(&self) -> usize {
        self.relation_text
            .iter()
            .filter(|s| s.trim().is_empty())
            .count()
    }
}

/// Entity/relation sets with labels over every split, for filtering.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelIndex {
    tails: HashMap<(usize, usize), Vec<usize>>,
}

impl LabelIndex {
    pub fn build<'a>(triples: impl IntoIterator<Item = &'a Triple>) -> Self {
        let mut sets: HashMap<(usize, usize), BTreeSet<usize>> = HashMap::new();
        for t in triples {
            sets.entry((t.head, t.relation)).or_default().insert(t.tail);
        }
        Self {
            tails: sets
                .into_iter()
                .map(|(k, v)| (k, v.into_iter().collect()))
                .collect(),
        }
    }

    /// All tails valid for `(head, relation)`, sorted.
    pub fn tails(&self, head: usize, relation: usize) -> &[usize] {
        self.tails
            .get(&(head, relation))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.tails(t.head, t.relation)
            .binary_search(&t.tail)
            .is_ok()
    }

    pub fn num_queries(&self) -> usize {
        self.tails.len()
    }
}

/// Train / valid / test triples plus the filtering index over their union.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TripleSplit {
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub label_index: LabelIndex,
}

impl TripleSplit {
    pub fn new(train: Vec<Triple>, valid: Vec<Triple>, test: Vec<Triple>) -> Result<Self> {
        check_disjoint(&train, &valid, "train", "valid")?;
        check_disjoint(&train, &test, "train", "test")?;
        check_disjoint(&valid, &test, "valid", "test")?;
        let label_index = LabelIndex::build(train.iter().chain(&valid).chain(&test));
        Ok(Self {
            train,
            valid,
            test,
            label_index,
        })
    }

    pub fn all(&self) -> impl Iterator<Item = &Triple> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }
}

fn check_disjoint(a: &[Triple], b: &[Triple], na: &'static str, nb: &'static str) -> Result<()> {
    let set: HashSet<&Triple> = a.iter().collect();
    if let Some(t) = b.iter().find(|t| set.contains(t)) {
        return Err(Error::Leakage(format!("{t:?}"), na, nb));
    }
    Ok(())
}

/// Entities, relations, the indexed training-triple store and text.
///
/// Adjacency is built from the training split only. After
/// [`augment_inverse`] relation ids `0..n` are the originals and
/// `n..2n` their inverses.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    entities: Interner,
    relations: Interner,
    num_base_relations: usize,
    augmented: bool,
    triples: Vec<Triple>,
    out_edges: Vec<Vec<(usize, usize)>>,
    incident: Vec<Vec<usize>>,
    hr_tails: HashMap<(usize, usize), Vec<usize>>,
    text: TextStore,
}

impl KnowledgeGraph {
    /// Builds a graph over fixed vocabularies with `train` as the stored
    /// triples.
    pub fn new(
        entities: Interner,
        relations: Interner,
        train: &[Triple],
        text: TextStore,
    ) -> Result<Self> {
        let num_base_relations = relations.len();
        let mut g = Self {
            entities,
            relations,
            num_base_relations,
            augmented: false,
            triples: Vec::new(),
            out_edges: Vec::new(),
            incident: Vec::new(),
            hr_tails: HashMap::new(),
            text,
        };
        g.set_triples(train.to_vec())?;
        Ok(g)
    }

    fn set_triples(&mut self, triples: Vec<Triple>) -> Result<()> {
        let ne = self.num_entities();
        let nr = self.num_relations();
        for t in &triples {
            check_id("entity", t.head, ne)?;
            check_id("entity", t.tail, ne)?;
            check_id("relation", t.relation, nr)?;
        }
        let mut out_edges = vec![Vec::new(); ne];
        let mut incident = vec![Vec::new(); ne];
        let mut hr: HashMap<(usize, usize), BTreeSet<usize>> = HashMap::new();
        for (i, t) in triples.iter().enumerate() {
            out_edges[t.head].push((t.relation, t.tail));
            incident[t.head].push(i);
            if t.tail != t.head {
                incident[t.tail].push(i);
            }
            hr.entry((t.head, t.relation)).or_default().insert(t.tail);
        }
        self.out_edges = out_edges;
        self.incident = incident;
        self.hr_tails = hr
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().collect()))
            .collect();
        self.triples = triples;
        Ok(())
    }

    /// Same vocabularies and text, with `train` as the stored triples.
    pub fn with_train(&self, train: &[Triple]) -> Result<Self> {
        let mut g = self.clone();
        g.set_triples(train.to_vec())?;
        Ok(g)
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// Relation count, including inverses once augmented.
    pub fn num_relations(&self) -> usize {
        if self.augmented {
            2 * self.num_base_relations
        } else {
            self.num_base_relations
        }
    }

    pub fn num_base_relations(&self) -> usize {
        self.num_base_relations
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    /// Inverse relation id; an involution on augmented graphs.
    pub fn inverse(&self, r: usize) -> usize {
        let n = self.num_base_relations;
        (r + n) % (2 * n)
    }

    pub fn base_relation(&self, r: usize) -> usize {
        r % self.num_base_relations
    }

    pub fn entities(&self) -> &Interner {
        &self.entities
    }

    pub fn entity_name(&self, e: usize) -> &str {
        self.entities.name(e)
    }

    pub fn relation_name(&self, r: usize) -> String {
        let base = self.relations.name(r % self.num_base_relations.max(1));
        if r >= self.num_base_relations {
            format!("{base}_inverse")
        } else {
            base.to_string()
        }
    }

    pub fn relations(&self) -> &Interner {
        &self.relations
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn text(&self) -> &TextStore {
        &self.text
    }

    pub fn text_mut(&mut self) -> &mut TextStore {
        &mut self.text
    }

    /// Outgoing `(relation, tail)` pairs of `e`.
    pub fn out_edges(&self, e: usize) -> &[(usize, usize)] {
        &self.out_edges[e]
    }

    /// Stored tails of `(head, relation)`, sorted.
    pub fn tails(&self, head: usize, relation: usize) -> &[usize] {
        self.hr_tails
            .get(&(head, relation))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.tails(t.head, t.relation)
            .binary_search(&t.tail)
            .is_ok()
    }

    /// Relations of the outgoing edges of `e`, sorted and distinct.
    pub fn outgoing_relations(&self, e: usize) -> Vec<usize> {
        let set: BTreeSet<usize> = self.out_edges[e].iter().map(|&(r, _)| r).collect();
        set.into_iter().collect()
    }

    /// Stored triples sharing at least one entity with `t`, excluding `t`.
    pub fn neighbors(&self, t: &Triple) -> Vec<Triple> {
        let mut idx: BTreeSet<usize> = BTreeSet::new();
        for e in [t.head, t.tail] {
            if e < self.incident.len() {
                idx.extend(self.incident[e].iter().copied());
            }
        }
        let mut out: Vec<Triple> = idx
            .into_iter()
            .map(|i| self.triples[i])
            .filter(|n| n != t)
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Order-independent fingerprint of the stored triples.
    pub fn fingerprint(&self) -> u64 {
        let mut sorted = self.triples.clone();
        sorted.sort();
        let mut h: u64 = 0xcbf29ce484222325;
        for t in sorted {
            for x in [t.head, t.relation, t.tail] {
                for b in (x as u64).to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h ^ (self.num_relations() as u64)
    }
}

fn check_id(what: &'static str, id: usize, size: usize) -> Result<()> {
    if id >= size {
        return Err(Error::OutOfRange { what, id, size });
    }
    Ok(())
}

/// Adds an inverse relation `r + |R|` for every relation and mirrors every
/// triple of the graph and of each split.
pub fn augment_inverse(
    graph: &KnowledgeGraph,
    split: &TripleSplit,
) -> Result<(KnowledgeGraph, TripleSplit)> {
    if graph.augmented {
        return Err(Error::AlreadyAugmented);
    }
    let n = graph.num_base_relations;
    let mirror = |ts: &[Triple]| -> Vec<Triple> {
        ts.iter()
            .copied()
            .chain(
                ts.iter()
                    .map(|t| Triple::new(t.tail, t.relation + n, t.head)),
            )
            .collect()
    };
    let mut g = graph.clone();
    g.augmented = true;
    let inverse_text: Vec<String> = g
        .text
        .relation_text
        .iter()
        .map(|s| format!("{INVERSE_PREFIX}{s}"))
        .collect();
    g.text.relation_text.extend(inverse_text);
    g.set_triples(mirror(&graph.triples))?;
    let split = TripleSplit::new(
        mirror(&split.train),
        mirror(&split.valid),
        mirror(&split.test),
    )?;
    Ok((g, split))
}

/// Uniformly samples `round(fraction · |train|)` training triples; valid
/// and test are kept. Deterministic in `seed`; keeps input order.
pub fn sparsify(split: &TripleSplit, fraction: f64, seed: u64) -> Result<TripleSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidFraction(fraction));
    }
    let n = split.train.len();
    let keep = (fraction * n as f64).round() as usize;
    let mut rng = SeedStream::new(seed).rng("sparsify");
    let mut idx = sample(&mut rng, n, keep).into_vec();
    idx.sort_unstable();
    let train = idx.into_iter().map(|i| split.train[i]).collect();
    TripleSplit::new(train, split.valid.clone(), split.test.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn tiny_graph(train: &[Triple], ne: usize, nr: usize) -> KnowledgeGraph {
        let mut ents = Interner::default();
        for i in 0..ne {
            ents.intern(&format!("e{i}"));
        }
        let mut rels = Interner::default();
        for i in 0..nr {
            rels.intern(&format!("r{i}"));
        }
        let text = TextStore {
            entity_text: (0..ne).map(|i| format!("entity {i}")).collect(),
            relation_text: (0..nr).map(|i| format!("relation {i}")).collect(),
            max_len: 64,
        };
        KnowledgeGraph::new(ents, rels, train, text).unwrap()
    }

    #[test]
    fn augmentation_mirrors_triples() {
        let train = vec![Triple::new(0, 0, 1)];
        let g = tiny_graph(&train, 2, 1);
        let split = TripleSplit::new(train, vec![], vec![]).unwrap();
        let (g2, s2) = augment_inverse(&g, &split).unwrap();
        assert_eq!(g2.num_relations(), 2);
        assert_eq!(g2.triples(), &[Triple::new(0, 0, 1), Triple::new(1, 1, 0)]);
        assert_eq!(s2.train.len(), 2);
        assert_eq!(g2.text().relation_text[1], "inverse of relation 0");
        assert_eq!(g2.inverse(g2.inverse(0)), 0);
        assert!(matches!(
            augment_inverse(&g2, &s2),
            Err(Error::AlreadyAugmented)
        ));
    }

    #[test]
    fn neighbors_share_an_entity() {
        // e1,r1,e2 and e3,r2,e1
        let a = Triple::new(1, 1, 2);
        let b = Triple::new(3, 2, 1);
        let g = tiny_graph(&[a, b], 10, 3);
        assert_eq!(g.neighbors(&b), vec![a]);
        assert!(g.neighbors(&Triple::new(9, 1, 8)).is_empty());
    }

    #[test]
    fn sparsify_examples() {
        let train: Vec<Triple> = (0..1000)
            .map(|i| Triple::new(i % 50, i % 7, (i * 13) % 50 + 50))
            .collect();
        let mut uniq = train.clone();
        uniq.sort();
        uniq.dedup();
        let split = TripleSplit::new(uniq.clone(), vec![], vec![]).unwrap();
        let s = sparsify(&split, 1.0, 3).unwrap();
        assert_eq!(s, split);
        let s = sparsify(&split, 0.2, 3).unwrap();
        assert_eq!(s.train.len(), (0.2 * uniq.len() as f64).round() as usize);
        assert!(sparsify(&split, 0.0, 3).is_err());
        assert!(sparsify(&split, 1.5, 3).is_err());
    }

    #[test]
    fn leakage_is_rejected() {
        let t = Triple::new(0, 0, 1);
        assert!(matches!(
            TripleSplit::new(vec![t], vec![], vec![t]),
            Err(Error::Leakage(..))
        ));
    }

    fn arb_triples() -> impl Strategy<Value = Vec<Triple>> {
        prop::collection::vec((0usize..8, 0usize..3, 0usize..8), 1..25).prop_map(|v| {
            let mut t: Vec<Triple> = v
                .into_iter()
                .map(|(h, r, t)| Triple::new(h, r, t))
                .collect();
            t.sort();
            t.dedup();
            t
        })
    }

    proptest! {
        #[test]
        fn adjacency_reconstructs_triples(train in arb_triples()) {
            let g = tiny_graph(&train, 8, 3);
            let mut rebuilt: Vec<Triple> = (0..8)
                .flat_map(|h| g.out_edges(h).iter().map(move |&(r, t)| Triple::new(h, r, t)))
                .collect();
            rebuilt.sort();
            prop_assert_eq!(rebuilt, train.clone());
            for t in &train {
                prop_assert!(g.contains(t));
            }
        }

        #[test]
        fn inverse_exists_iff_forward(train in arb_triples()) {
            let g = tiny_graph(&train, 8, 3);
            let split = TripleSplit::new(train.clone(), vec![], vec![]).unwrap();
            let (g2, _) = augment_inverse(&g, &split).unwrap();
            prop_assert_eq!(g2.triples().len(), 2 * train.len());
            for t in g2.triples() {
                prop_assert!(g2.contains(&Triple::new(t.tail, g2.inverse(t.relation), t.head)));
            }
        }

        #[test]
        fn neighbor_relation_is_symmetric(train in arb_triples()) {
            let g = tiny_graph(&train, 8, 3);
            for a in &train {
                for b in &train {
                    let brute = a != b
                        && (a.head == b.head || a.head == b.tail || a.tail == b.head || a.tail == b.tail);
                    prop_assert_eq!(g.neighbors(a).contains(b), brute);
                    prop_assert_eq!(g.neighbors(a).contains(b), g.neighbors(b).contains(a));
                }
            }
        }

        #[test]
        fn sparsify_is_deterministic_subset(train in arb_triples(), f in 0.05f64..1.0, seed in 0u64..100) {
            let split = TripleSplit::new(train.clone(), vec![], vec![]).unwrap();
            let a = sparsify(&split, f, seed).unwrap();
            let b = sparsify(&split, f, seed).unwrap();
            prop_assert_eq!(&a, &b);
            let all: HashSet<_> = train.iter().collect();
            prop_assert!(a.train.iter().all(|t| all.contains(t)));
        }
    }
}

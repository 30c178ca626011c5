use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::KnowledgeGraph;

/// Relation-by-relation Jaccard similarity of head-entity sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JaccardMatrix {
    pub size: usize,
    /// Row-major `size × size` values.
    pub values: Vec<f64>,
    /// Relations with no head entity; their rows and columns are zero.
    pub empty: Vec<usize>,
}

impl JaccardMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    /// Mean over `i != j` pairs where both relations are nonempty.
    pub fn off_diagonal_mean(&self) -> f64 {
        let live: Vec<usize> = (0..self.size).filter(|r| !self.empty.contains(r)).collect();
        let (mut s, mut n) = (0.0, 0usize);
        for &i in &live {
            for &j in &live {
                if i != j {
                    s += self.get(i, j);
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("relation");
        for n in names {
            out.push(',');
            out.push_str(&csv_field(n));
        }
        out.push('\n');
        for i in 0..self.size {
            out.push_str(&csv_field(&names[i]));
            for j in 0..self.size {
                out.push_str(&format!(",{:.6}", self.get(i, j)));
            }
            out.push('\n');
        }
        out
    }
}

pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Jaccard similarity of the head sets of every pair of base relations,
/// computed on the stored (training) triples.
pub fn relation_jaccard(graph: &KnowledgeGraph) -> JaccardMatrix {
    let n = graph.num_base_relations();
    let mut heads: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for t in graph.triples() {
        if t.relation < n {
            heads[t.relation].insert(t.head);
        }
    }
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let inter = heads[i].intersection(&heads[j]).count();
            let union = heads[i].len() + heads[j].len() - inter;
            let v = if union == 0 {
                0.0
            } else {
                inter as f64 / union as f64
            };
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    let empty = (0..n).filter(|&r| heads[r].is_empty()).collect();
    JaccardMatrix {
        size: n,
        values,
        empty,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegreeStats {
    pub num_entities: usize,
    pub num_triples: usize,
    /// Entities touching at least one stored triple.
    pub active_entities: usize,
    /// `|T_train| / |E|`.
    pub avg_out_degree: f64,
    /// `|T_train| / active_entities`.
    pub avg_out_degree_active: f64,
    /// Out-degree → number of entities.
    pub histogram: BTreeMap<usize, usize>,
}

/// Out-degree summary over base-relation triples (inverse edges ignored).
pub fn degree_stats(graph: &KnowledgeGraph) -> DegreeStats {
    let ne = graph.num_entities();
    let nb = graph.num_base_relations();
    let mut out = vec![0usize; ne];
    let mut active = vec![false; ne];
    let mut m = 0;
    for t in graph.triples().iter().filter(|t| t.relation < nb) {
        out[t.head] += 1;
        active[t.head] = true;
        active[t.tail] = true;
        m += 1;
    }
    let mut histogram = BTreeMap::new();
    for d in out {
        *histogram.entry(d).or_insert(0) += 1;
    }
    let active_entities = active.iter().filter(|&&a| a).count();
    let ratio = |d: usize| if d == 0 { 0.0 } else { m as f64 / d as f64 };
    DegreeStats {
        num_entities: ne,
        num_triples: m,
        active_entities,
        avg_out_degree: ratio(ne),
        avg_out_degree_active: ratio(active_entities),
        histogram,
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Interner, TextStore, Triple};
    use super::*;
    use proptest::prelude::*;

    fn graph(ne: usize, nr: usize, triples: &[(usize, usize, usize)]) -> KnowledgeGraph {
        let mut e = Interner::default();
        let mut r = Interner::default();
        (0..ne).for_each(|i| {
            e.intern(&format!("e{i}"));
        });
        (0..nr).for_each(|i| {
            r.intern(&format!("r{i}"));
        });
        let ts: Vec<Triple> = triples
            .iter()
            .map(|&(h, r, t)| Triple::new(h, r, t))
            .collect();
        KnowledgeGraph::new(e, r, &ts, TextStore::default()).unwrap()
    }

    #[test]
    fn jaccard_examples() {
        // H0 = {a, b}, H1 = {b, c}
        let g = graph(4, 3, &[(0, 0, 3), (1, 0, 3), (1, 1, 3), (2, 1, 3)]);
        let m = relation_jaccard(&g);
        assert_eq!(m.get(0, 1), 1.0 / 3.0);
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(2, 2), 0.0);
        assert_eq!(m.empty, vec![2]);
        let g = graph(3, 2, &[(0, 0, 2), (0, 1, 1)]);
        assert_eq!(relation_jaccard(&g).get(0, 1), 1.0);
    }

    #[test]
    fn degree_example() {
        let g = graph(4, 2, &[(0, 0, 1), (2, 1, 3), (0, 1, 3)]);
        let s = degree_stats(&g);
        assert_eq!(s.avg_out_degree, 0.75);
        assert_eq!(s.histogram[&0], 2);
        assert_eq!(s.histogram[&2], 1);
    }

    proptest! {
        #[test]
        fn jaccard_matches_set_oracle(
            triples in prop::collection::vec((0usize..12, 0usize..5, 0usize..12), 0..40)
        ) {
            let g = graph(12, 5, &triples);
            let m = relation_jaccard(&g);
            for i in 0..5 {
                for j in 0..5 {
                    let hi: Vec<usize> = triples.iter().filter(|t| t.1 == i).map(|t| t.0).collect();
                    let hj: Vec<usize> = triples.iter().filter(|t| t.1 == j).map(|t| t.0).collect();
                    let inter = (0..12).filter(|e| hi.contains(e) && hj.contains(e)).count();
                    let union = (0..12).filter(|e| hi.contains(e) || hj.contains(e)).count();
                    let want = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
                    prop_assert_eq!(m.get(i, j), want);
                    prop_assert_eq!(m.get(i, j), m.get(j, i));
                    prop_assert!((0.0..=1.0).contains(&m.get(i, j)));
                }
            }
        }
    }
}

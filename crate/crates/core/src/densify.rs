//! Graph densification: unobserved queries picked by relation-embedding
//! similarity, neighbour triples labelled by the text model, and the
//! temporary overlay that carries them into message passing.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use vemfuse_diffmath::{dist, Scalar, Tensor};

use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, Triple};
use crate::losses::{FusionConfig, RelationSelection};
use crate::rng::SeedStream;
use crate::structure::StructModel;
use crate::text::TextModel;

/// Resampling attempts per generated query before giving up.
pub const MAX_RETRIES: usize = 1000;

/// Extra edges layered over the base graph for one batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GraphOverlay {
    pub edges: Vec<Triple>,
    /// Text-model probability of each edge's label.
    pub confidence: Vec<f32>,
}

impl GraphOverlay {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedQuery {
    pub head: usize,
    pub relation: usize,
    /// Max cosine between the chosen relation and the head's relations.
    pub similarity: f64,
    pub neighbor_slots: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DensifyCounters {
    /// Sampled entities without outgoing relations that were redrawn.
    pub resampled: usize,
    /// Sampled entities already connected through every relation.
    pub skipped_saturated: usize,
    /// Queries that got fewer than `M` neighbour relations.
    pub short_neighbors: usize,
    /// Neighbour labels replaced by an observed tail.
    pub ground_truth_labels: usize,
}

impl DensifyCounters {
    pub fn merge(&mut self, o: &DensifyCounters) {
        self.resampled += o.resampled;
        self.skipped_saturated += o.skipped_saturated;
        self.short_neighbors += o.short_neighbors;
        self.ground_truth_labels += o.ground_truth_labels;
    }
}

/// Pairwise cosine similarity of relation embeddings.
#[derive(Clone, Debug)]
pub struct RelationSimilarity {
    n: usize,
    cos: Vec<f64>,
}

impl RelationSimilarity {
    pub fn new<T: Scalar>(emb: &Tensor<T>) -> Self {
        let n = emb.rows();
        let mut cos = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let c = dist::cosine(emb.row(i), emb.row(j));
                cos[i * n + j] = c;
                cos[j * n + i] = c;
            }
        }
        Self { n, cos }
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.cos[a * self.n + b]
    }

    /// Relations outside `r1` and `exclude`, scored by max cosine to `r1`,
    /// best first with ties to the smaller id.
    pub fn rank(&self, r1: &[usize], exclude: &[usize]) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = (0..self.n)
            .filter(|r| !r1.contains(r) && !exclude.contains(r))
            .map(|r| {
                let s = r1
                    .iter()
                    .map(|&o| self.get(r, o))
                    .fold(f64::NEG_INFINITY, f64::max);
                (r, s)
            })
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        out
    }
}

fn select<R: Rng>(
    ranked: &[(usize, f64)],
    count: usize,
    cfg: &FusionConfig,
    rng: &mut R,
) -> Vec<(usize, f64)> {
    match cfg.relation_selection {
        RelationSelection::Argmax => ranked.iter().take(count).copied().collect(),
        RelationSelection::Softmax => {
            let mut pool = ranked.to_vec();
            let mut out = Vec::new();
            while out.len() < count && !pool.is_empty() {
                let top = pool.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = pool
                    .iter()
                    .map(|p| ((p.1 - top) / cfg.selection_temperature).exp())
                    .collect();
                let i = WeightedIndex::new(&w).map(|d| d.sample(rng)).unwrap_or(0);
                out.push(pool.remove(i));
            }
            out
        }
    }
}

/// Draws `cfg.n` unobserved queries `(e, r, ?)` with `r` outside the
/// outgoing relations of `e`. Query `i` uses its own sub-stream of
/// `stream`.
pub fn generate_queries(
    graph: &KnowledgeGraph,
    sim: &RelationSimilarity,
    cfg: &FusionConfig,
    stream: SeedStream,
) -> Result<(Vec<GeneratedQuery>, DensifyCounters)> {
    let mut counters = DensifyCounters::default();
    let mut out = Vec::with_capacity(cfg.n);
    let ne = graph.num_entities();
    if ne == 0 || cfg.n == 0 {
        return Ok((out, counters));
    }
    for i in 0..cfg.n {
        let mut rng = stream.index(i as u64).rng("query");
        let mut tries = 0;
        let (e, r1) = loop {
            let e = rng.gen_range(0..ne);
            let r1 = graph.outgoing_relations(e);
            if !r1.is_empty() {
                break (e, r1);
            }
            counters.resampled += 1;
            tries += 1;
            if tries >= MAX_RETRIES {
                return Err(Error::RetriesExhausted(MAX_RETRIES));
            }
        };
        let ranked = sim.rank(&r1, &[]);
        let Some(&(r, s)) = select(&ranked, 1, cfg, &mut rng).first() else {
            counters.skipped_saturated += 1;
            continue;
        };
        debug_assert!(graph.tails(e, r).is_empty());
        out.push(GeneratedQuery {
            head: e,
            relation: r,
            similarity: s,
            neighbor_slots: cfg.m,
        });
    }
    Ok((out, counters))
}

/// Labelled neighbour triples `(e, r_j, t̂_j)` for each query, anchored at
/// the query head. Labels are drawn from the text model's top-k tempered
/// predictions; an observed tail wins where one exists.
pub fn sample_neighbors<T: Scalar>(
    queries: &[GeneratedQuery],
    graph: &KnowledgeGraph,
    sim: &RelationSimilarity,
    text: &TextModel<T>,
    cfg: &FusionConfig,
    stream: SeedStream,
) -> Result<(Vec<Vec<(Triple, f32)>>, DensifyCounters)> {
    let mut counters = DensifyCounters::default();
    let mut chosen: Vec<Vec<(usize, usize)>> = Vec::with_capacity(queries.len());
    for (i, q) in queries.iter().enumerate() {
        let mut rng = stream.index(i as u64).rng("neighbor-relations");
        let r1 = graph.outgoing_relations(q.head);
        let ranked = sim.rank(&r1, &[q.relation]);
        let picked = select(&ranked, q.neighbor_slots, cfg, &mut rng);
        if picked.len() < q.neighbor_slots {
            counters.short_neighbors += 1;
        }
        chosen.push(picked.into_iter().map(|(r, _)| (q.head, r)).collect());
    }
    let flat: Vec<(usize, usize)> = chosen.iter().flatten().copied().collect();
    let probs = if flat.is_empty() {
        Vec::new()
    } else {
        text.predict_q(&flat, T::of(cfg.tx_vem_t))?
    };
    let mut out = Vec::with_capacity(queries.len());
    let mut k = 0;
    for (i, slots) in chosen.iter().enumerate() {
        let mut rng = stream.index(i as u64).rng("neighbor-labels");
        let mut triples = Vec::with_capacity(slots.len());
        for &(e, r) in slots {
            let p = &probs[k];
            k += 1;
            let observed = graph.tails(e, r);
            let (tail, conf) = if let Some(&t) = observed.first() {
                counters.ground_truth_labels += 1;
                (t, 1.0)
            } else {
                sample_top_k(p, cfg.label_top_k, &mut rng)
            };
            triples.push((Triple::new(e, r, tail), conf));
        }
        out.push(triples);
    }
    Ok((out, counters))
}

/// Categorical draw restricted to the `k` most probable entries (ties to
/// smaller ids); returns the entity and its unrestricted probability.
pub fn sample_top_k<T: Scalar, R: Rng>(p: &[T], k: usize, rng: &mut R) -> (usize, f32) {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k.max(1));
    let w: Vec<f64> = idx.iter().map(|&i| p[i].as_f64()).collect();
    let pick = match WeightedIndex::new(&w) {
        Ok(d) => idx[d.sample(rng)],
        Err(_) => idx[0],
    };
    (pick, p[pick].as_f64() as f32)
}

/// Neighbour triples plus inverse mirrors, deduplicated, without any base
/// triple.
pub fn build_overlay(graph: &KnowledgeGraph, neighbors: &[Vec<(Triple, f32)>]) -> GraphOverlay {
    let mut edges: Vec<(Triple, f32)> = Vec::new();
    for &(t, c) in neighbors.iter().flatten() {
        edges.push((t, c));
        if graph.is_augmented() {
            edges.push((Triple::new(t.tail, graph.inverse(t.relation), t.head), c));
        }
    }
    edges.retain(|(t, _)| !graph.contains(t));
    edges.sort_by(|a, b| a.0.cmp(&b.0));
    edges.dedup_by(|a, b| a.0 == b.0);
    GraphOverlay {
        edges: edges.iter().map(|e| e.0).collect(),
        confidence: edges.iter().map(|e| e.1).collect(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DensifyStats {
    pub generated_queries: usize,
    pub neighbor_triples: usize,
    pub overlay_edges: usize,
    pub mean_confidence: f64,
    pub counters: DensifyCounters,
}

impl DensifyStats {
    pub fn merge(&mut self, o: &DensifyStats) {
        let total = self.overlay_edges + o.overlay_edges;
        if total > 0 {
            self.mean_confidence = (self.mean_confidence * self.overlay_edges as f64
                + o.mean_confidence * o.overlay_edges as f64)
                / total as f64;
        }
        self.generated_queries += o.generated_queries;
        self.neighbor_triples += o.neighbor_triples;
        self.overlay_edges = total;
        self.counters.merge(&o.counters);
    }
}

/// One densification round.
#[derive(Clone, Debug)]
pub struct Densified {
    pub queries: Vec<GeneratedQuery>,
    pub overlay: GraphOverlay,
    pub stats: DensifyStats,
}

/// Generates queries, labels their neighbours and builds the overlay.
pub fn densify<T: Scalar, U: Scalar>(
    graph: &KnowledgeGraph,
    structure: &StructModel<T>,
    text: &TextModel<U>,
    cfg: &FusionConfig,
    stream: SeedStream,
) -> Result<Densified> {
    if !graph.is_augmented() {
        return Err(Error::NotAugmented);
    }
    let sim = RelationSimilarity::new(structure.relation_embeddings());
    let (queries, mut counters) = generate_queries(graph, &sim, cfg, stream.child("generate"))?;
    let (neighbors, c2) =
        sample_neighbors(&queries, graph, &sim, text, cfg, stream.child("neighbors"))?;
    counters.merge(&c2);
    let overlay = build_overlay(graph, &neighbors);
    let mean_confidence = if overlay.is_empty() {
        0.0
    } else {
        overlay.confidence.iter().map(|&c| c as f64).sum::<f64>() / overlay.len() as f64
    };
    let stats = DensifyStats {
        generated_queries: queries.len(),
        neighbor_triples: neighbors.iter().map(Vec::len).sum(),
        overlay_edges: overlay.len(),
        mean_confidence,
        counters,
    };
    Ok(Densified {
        queries,
        overlay,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{augment_inverse, Interner, TextStore, TripleSplit};
    use crate::text::{build_vocab, TextConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn augmented(ne: usize, nr: usize, triples: &[(usize, usize, usize)]) -> KnowledgeGraph {
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
        let text = TextStore {
            entity_text: (0..ne).map(|i| format!("entity {i}")).collect(),
            relation_text: (0..nr).map(|i| format!("relation {i}")).collect(),
            max_len: 16,
        };
        let g = KnowledgeGraph::new(e, r, &ts, text).unwrap();
        let split = TripleSplit::new(ts, vec![], vec![]).unwrap();
        augment_inverse(&g, &split).unwrap().0
    }

    #[test]
    fn forced_argmax() {
        // e0 only has r0; cos(r1, r0) = 0.9, cos(r2, r0) = 0.1
        let s = 0.9f64;
        let t = 0.1f64;
        let emb = Tensor::matrix(
            3,
            2,
            vec![1.0, 0.0, s, (1.0 - s * s).sqrt(), t, (1.0 - t * t).sqrt()],
        )
        .unwrap();
        let sim = RelationSimilarity::new(&emb);
        let ranked = sim.rank(&[0], &[]);
        assert_eq!(ranked[0].0, 1);
        assert!((ranked[0].1 - 0.9).abs() < 1e-12);
        // ties go to the smaller id
        let flat = Tensor::matrix(3, 1, vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(RelationSimilarity::new(&flat).rank(&[1], &[])[0].0, 0);
    }

    #[test]
    fn one_hot_sampling_is_certain() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = [0.0f32, 0.0, 1.0, 0.0];
        for _ in 0..50 {
            assert_eq!(sample_top_k(&p, 10, &mut rng).0, 2);
        }
    }

    #[test]
    fn overlay_counts() {
        let g = augmented(6, 3, &[(0, 0, 1)]);
        assert!(build_overlay(&g, &[]).is_empty());
        let n = vec![
            vec![
                (Triple::new(2, 1, 3), 0.5),
                (Triple::new(2, 2, 4), 0.5),
                (Triple::new(2, 0, 5), 0.5),
            ],
            vec![
                (Triple::new(3, 1, 4), 0.5),
                (Triple::new(3, 2, 5), 0.5),
                (Triple::new(2, 1, 3), 0.5),
            ],
        ];
        let ov = build_overlay(&g, &n);
        assert_eq!(ov.len(), 10);
        // base triple and its mirror are excluded
        let ov = build_overlay(&g, &[vec![(Triple::new(0, 0, 1), 1.0)]]);
        assert!(ov.is_empty());
    }

    fn ring(ne: usize, nr: usize) -> KnowledgeGraph {
        let triples: Vec<(usize, usize, usize)> =
            (0..ne).map(|i| (i, i % nr, (i * 7 + 3) % ne)).collect();
        augmented(ne, nr, &triples)
    }

    #[test]
    fn densify_invariants_and_determinism() {
        let g = ring(30, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sm: StructModel<f32> = StructModel::new(Default::default(), 30, 10, &mut rng).unwrap();
        let vocab = Arc::new(build_vocab(g.text(), 1));
        let cfg_t = TextConfig {
            dim: 8,
            max_len: 16,
            ..Default::default()
        };
        let tm: TextModel<f32> = TextModel::new(cfg_t, vocab, g.text(), 30, &mut rng).unwrap();
        let cfg = FusionConfig {
            n: 16,
            m: 3,
            ..Default::default()
        };
        let fp = g.fingerprint();
        let a = densify(&g, &sm, &tm, &cfg, SeedStream::new(5)).unwrap();
        let b = densify(&g, &sm, &tm, &cfg, SeedStream::new(5)).unwrap();
        assert_eq!(a.overlay, b.overlay);
        assert_eq!(g.fingerprint(), fp);
        assert_eq!(a.queries.len(), 16);
        assert!(a.overlay.len() <= 2 * cfg.n * cfg.m);
        for q in &a.queries {
            assert!(!g.outgoing_relations(q.head).contains(&q.relation));
            assert!(g.tails(q.head, q.relation).is_empty());
        }
        for t in &a.overlay.edges {
            assert!(!g.contains(t));
        }
        let none = densify(
            &g,
            &sm,
            &tm,
            &FusionConfig { n: 16, m: 0, ..cfg },
            SeedStream::new(5),
        )
        .unwrap();
        assert!(none.overlay.is_empty());
    }
}

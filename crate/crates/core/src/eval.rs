//! Filtered bidirectional ranking evaluation.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vemfuse_diffmath::Scalar;

use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, Triple, TripleSplit};
use crate::rng::SeedStream;
use crate::structure::{EdgeIndex, Encoded, StructModel};
use crate::text::TextModel;

/// Queries scored per call to a [`Scorer`].
const CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    /// Target placed uniformly at random among equal scores.
    #[default]
    Random,
    /// `1 + greater + ties / 2`.
    Expected,
}

impl std::str::FromStr for TiePolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "random" => Ok(Self::Random),
            "expected" => Ok(Self::Expected),
            other => Err(format!("unknown tie policy {other:?} (random|expected)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Dev,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `(h, r, ?)` with target `t`.
    Tail,
    /// `(t, r⁻¹, ?)` with target `h`.
    Head,
}

/// Filtered rank of `target` among all entities except `valid_others`
/// (sorted ascending). `seed` drives the RANDOM tie draw.
pub fn filtered_rank<T: Scalar>(
    scores: &[T],
    target: usize,
    valid_others: &[usize],
    policy: TiePolicy,
    seed: u64,
) -> Result<f64> {
    if target >= scores.len() {
        return Err(Error::OutOfRange {
            what: "entity",
            id: target,
            size: scores.len(),
        });
    }
    if valid_others.binary_search(&target).is_ok() {
        return Err(Error::TargetFiltered(target));
    }
    let st = scores[target].as_f64();
    if !st.is_finite() {
        return Err(Error::NonFinite {
            what: "score".into(),
            context: format!("target {target}"),
        });
    }
    let (mut greater, mut ties) = (0usize, 0usize);
    let mut skip = valid_others.iter().peekable();
    for (c, s) in scores.iter().enumerate() {
        while skip.peek().is_some_and(|&&v| v < c) {
            skip.next();
        }
        if c == target || skip.peek() == Some(&&c) {
            continue;
        }
        let s = s.as_f64();
        if s > st {
            greater += 1;
        } else if s == st {
            ties += 1;
        }
    }
    Ok(match policy {
        TiePolicy::Expected => 1.0 + greater as f64 + ties as f64 / 2.0,
        TiePolicy::Random => {
            let offset = SeedStream::new(seed).into_rng().gen_range(0..=ties);
            (1 + greater + offset) as f64
        }
    })
}

/// Anything that produces one logit row over all entities per query.
pub trait Scorer: Sync {
    fn num_entities(&self) -> usize;
    fn score(&self, queries: &[(usize, usize)]) -> Result<Vec<Vec<f32>>>;
}

/// Structure model with representations encoded once.
pub struct StructScorer<'a> {
    model: &'a StructModel<f32>,
    encoded: Encoded<f32>,
}

impl<'a> StructScorer<'a> {
    pub fn new(model: &'a StructModel<f32>, graph: &KnowledgeGraph) -> Result<Self> {
        let encoded = model.encode_values(&EdgeIndex::new(graph, None)?)?;
        Ok(Self { model, encoded })
    }
}

impl Scorer for StructScorer<'_> {
    fn num_entities(&self) -> usize {
        self.model.num_entities()
    }

    fn score(&self, queries: &[(usize, usize)]) -> Result<Vec<Vec<f32>>> {
        self.model.score_values(&self.encoded, queries)
    }
}

impl Scorer for TextModel<f32> {
    fn num_entities(&self) -> usize {
        TextModel::num_entities(self)
    }

    fn score(&self, queries: &[(usize, usize)]) -> Result<Vec<Vec<f32>>> {
        self.logits_values(queries, CHUNK)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    /// Base-relation triple being evaluated.
    pub triple: Triple,
    pub direction: Direction,
    pub query: (usize, usize),
    pub target: usize,
    pub rank: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub top_k: Vec<(usize, f32)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub mrr: f64,
    pub hits_at: BTreeMap<usize, f64>,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits_at: BTreeMap<usize, f64>,
    pub count: usize,
    pub tail: DirectionMetrics,
    pub head: DirectionMetrics,
    /// Sequence-encoder forwards spent, when the scorer counts them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forward_passes: Option<u64>,
}

pub const HITS_AT: [usize; 3] = [1, 3, 10];

fn summarize<'a>(ranks: impl Iterator<Item = &'a f64>) -> DirectionMetrics {
    let mut n = 0usize;
    let mut rr = 0.0;
    let mut hits = [0usize; 3];
    for &r in ranks {
        n += 1;
        rr += 1.0 / r;
        for (h, k) in hits.iter_mut().zip(HITS_AT) {
            if r <= k as f64 {
                *h += 1;
            }
        }
    }
    let div = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
    DirectionMetrics {
        mrr: div(rr),
        hits_at: HITS_AT
            .iter()
            .zip(hits)
            .map(|(&k, h)| (k, div(h as f64)))
            .collect(),
        count: n,
    }
}

impl Metrics {
    pub fn from_ranks(results: &[RankResult]) -> Self {
        let all = summarize(results.iter().map(|r| &r.rank));
        let tail = summarize(
            results
                .iter()
                .filter(|r| r.direction == Direction::Tail)
                .map(|r| &r.rank),
        );
        let head = summarize(
            results
                .iter()
                .filter(|r| r.direction == Direction::Head)
                .map(|r| &r.rank),
        );
        Self {
            mrr: all.mrr,
            hits_at: all.hits_at,
            count: all.count,
            tail,
            head,
            forward_passes: None,
        }
    }

    pub fn hits(&self, k: usize) -> f64 {
        self.hits_at.get(&k).copied().unwrap_or(0.0)
    }

    /// Monotone hits and `hits@1 <= mrr <= 1`.
    pub fn is_consistent(&self) -> bool {
        let (h1, h3, h10) = (self.hits(1), self.hits(3), self.hits(10));
        h1 <= h3 && h3 <= h10 && (self.count == 0 || (h1 <= self.mrr + 1e-12 && self.mrr <= 1.0))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub policy: TiePolicy,
    pub seed: u64,
    /// Evaluate a seeded subsample of this many triples.
    pub limit: Option<usize>,
    /// Keep the `k` best candidates per query in the results.
    pub top_k: usize,
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            policy: TiePolicy::Random,
            seed: 0,
            limit: None,
            top_k: 0,
            workers: 1,
        }
    }
}

/// Evaluation triples over base relations.
pub fn eval_triples(
    graph: &KnowledgeGraph,
    split: &TripleSplit,
    which: Split,
    limit: Option<usize>,
    seed: u64,
) -> Vec<Triple> {
    let src = match which {
        Split::Dev => &split.valid,
        Split::Test => &split.test,
    };
    let base: Vec<Triple> = src
        .iter()
        .copied()
        .filter(|t| t.relation < graph.num_base_relations())
        .collect();
    match limit {
        Some(n) if n < base.len() => {
            let mut rng = SeedStream::new(seed).rng("eval-subsample");
            let mut idx = rand::seq::index::sample(&mut rng, base.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| base[i]).collect()
        }
        _ => base,
    }
}

fn top_k(scores: &[f32], k: usize) -> Vec<(usize, f32)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i, scores[i])).collect()
}

/// Ranks the tail of every `(h, r, t)` and the head through `(t, r⁻¹, ?)`,
/// filtered by all splits. Per-query tie seeds derive from the master
/// seed and the query index, so worker count never changes results.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    graph: &KnowledgeGraph,
    split: &TripleSplit,
    which: Split,
    opts: &EvalOptions,
) -> Result<(Metrics, Vec<RankResult>)> {
    if !graph.is_augmented() {
        return Err(Error::NotAugmented);
    }
    let triples = eval_triples(graph, split, which, opts.limit, opts.seed);
    let mut queries = Vec::with_capacity(2 * triples.len());
    for t in &triples {
        queries.push((*t, Direction::Tail, (t.head, t.relation), t.tail));
        queries.push((
            *t,
            Direction::Head,
            (t.tail, graph.inverse(t.relation)),
            t.head,
        ));
    }
    let tie = SeedStream::new(opts.seed).child("tie-break");
    let chunks: Vec<(usize, &[_])> = queries
        .chunks(CHUNK)
        .enumerate()
        .map(|(i, c)| (i * CHUNK, c))
        .collect();
    let run = |&(offset, chunk): &(usize, &[(Triple, Direction, (usize, usize), usize)])| {
        let qs: Vec<(usize, usize)> = chunk.iter().map(|q| q.2).collect();
        let scores = scorer.score(&qs)?;
        chunk
            .iter()
            .zip(scores)
            .enumerate()
            .map(|(j, (&(triple, direction, query, target), row))| {
                let others: Vec<usize> = split
                    .label_index
                    .tails(query.0, query.1)
                    .iter()
                    .copied()
                    .filter(|&e| e != target)
                    .collect();
                let seed = tie.index((offset + j) as u64).seed();
                let rank = filtered_rank(&row, target, &others, opts.policy, seed)?;
                Ok(RankResult {
                    triple,
                    direction,
                    query,
                    target,
                    rank,
                    top_k: if opts.top_k > 0 {
                        top_k(&row, opts.top_k)
                    } else {
                        Vec::new()
                    },
                })
            })
            .collect::<Result<Vec<_>>>()
    };
    let parts: Vec<Vec<RankResult>> = if opts.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| chunks.par_iter().map(run).collect::<Result<Vec<_>>>())?
    } else {
        chunks.iter().map(run).collect::<Result<Vec<_>>>()?
    };
    let results: Vec<RankResult> = parts.into_iter().flatten().collect();
    Ok((Metrics::from_ranks(&results), results))
}

/// Text-model evaluation that also records encoder forwards.
pub fn evaluate_text(
    model: &TextModel<f32>,
    graph: &KnowledgeGraph,
    split: &TripleSplit,
    which: Split,
    opts: &EvalOptions,
) -> Result<(Metrics, Vec<RankResult>)> {
    let before = model.forward_count();
    let (mut m, r) = evaluate(model, graph, split, which, opts)?;
    m.forward_passes = Some(model.forward_count() - before);
    Ok((m, r))
}

type QueryKey = (Triple, Direction);

fn keyed(rs: &[RankResult]) -> HashMap<QueryKey, f64> {
    rs.iter()
        .map(|r| ((r.triple, r.direction), r.rank))
        .collect()
}

fn check_same(a: &[RankResult], b: &[RankResult]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::QueryMismatch(format!(
            "{} vs {} results",
            a.len(),
            b.len()
        )));
    }
    let kb = keyed(b);
    for r in a {
        if !kb.contains_key(&(r.triple, r.direction)) {
            return Err(Error::QueryMismatch(format!(
                "{:?} {:?} missing",
                r.triple, r.direction
            )));
        }
    }
    Ok(())
}

/// Per base relation, queries whose rank strictly decreased.
pub fn improvement_diff(
    before: &[RankResult],
    after: &[RankResult],
) -> Result<BTreeMap<usize, usize>> {
    check_same(before, after)?;
    let kb = keyed(before);
    let mut out = BTreeMap::new();
    for r in after {
        let entry = out.entry(r.triple.relation).or_insert(0);
        if r.rank < kb[&(r.triple, r.direction)] {
            *entry += 1;
        }
    }
    Ok(out)
}

/// Improvement counts of two methods against one baseline, counting only
/// queries improved by exactly one of them.
pub fn improvement_diff_exclusive(
    baseline: &[RankResult],
    a: &[RankResult],
    b: &[RankResult],
) -> Result<(BTreeMap<usize, usize>, BTreeMap<usize, usize>)> {
    check_same(baseline, a)?;
    check_same(baseline, b)?;
    let (kb, ka, kbb) = (keyed(baseline), keyed(a), keyed(b));
    let mut ca = BTreeMap::new();
    let mut cb = BTreeMap::new();
    for r in baseline {
        let key = (r.triple, r.direction);
        let ia = ka[&key] < kb[&key];
        let ib = kbb[&key] < kb[&key];
        *ca.entry(r.triple.relation).or_insert(0) += (ia && !ib) as usize;
        *cb.entry(r.triple.relation).or_insert(0) += (ib && !ia) as usize;
    }
    Ok((ca, cb))
}

pub fn improvement_csv(
    graph: &KnowledgeGraph,
    counts: &[(&str, &BTreeMap<usize, usize>)],
) -> String {
    let mut out = String::from("relation");
    for (name, _) in counts {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for r in 0..graph.num_base_relations() {
        out.push_str(&crate::kg::csv_field(&graph.relation_name(r)));
        for (_, c) in counts {
            out.push_str(&format!(",{}", c.get(&r).copied().unwrap_or(0)));
        }
        out.push('\n');
    }
    out
}

pub fn ranks_jsonl(results: &[RankResult]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(r).expect("rank serialize"));
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub query: (usize, usize),
    pub candidates: Vec<(usize, f32)>,
    pub gold: Option<usize>,
    /// `1 + |{c : score(c) > score(gold)}|`, unfiltered.
    pub gold_rank: Option<usize>,
}

/// Best `k` candidates per query, score-descending and stable by id.
pub fn dump_topk<S: Scorer + ?Sized>(
    scorer: &S,
    queries: &[(usize, usize)],
    gold: &[Option<usize>],
    k: usize,
) -> Result<Vec<TopK>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if gold.len() != queries.len() {
        return Err(Error::Misaligned(queries.len(), gold.len()));
    }
    let mut out = Vec::with_capacity(queries.len());
    for (chunk, golds) in queries.chunks(CHUNK).zip(gold.chunks(CHUNK)) {
        for ((&q, &g), row) in chunk.iter().zip(golds).zip(scorer.score(chunk)?) {
            let gold_rank = g.map(|g| 1 + row.iter().filter(|&&s| s > row[g]).count());
            out.push(TopK {
                query: q,
                candidates: top_k(&row, k),
                gold: g,
                gold_rank,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<Vec<f32>>, HashMap<(usize, usize), usize>);

    impl Scorer for Fixed {
        fn num_entities(&self) -> usize {
            self.0[0].len()
        }
        fn score(&self, qs: &[(usize, usize)]) -> Result<Vec<Vec<f32>>> {
            Ok(qs.iter().map(|q| self.0[self.1[q]].clone()).collect())
        }
    }

    #[test]
    fn rank_examples() {
        let s = [0.1f64, 0.9, 0.3];
        for p in [TiePolicy::Random, TiePolicy::Expected] {
            assert_eq!(filtered_rank(&s, 1, &[], p, 0).unwrap(), 1.0);
        }
        let s = [0.9f64, 0.9, 0.1];
        assert_eq!(
            filtered_rank(&s, 0, &[], TiePolicy::Expected, 0).unwrap(),
            1.5
        );
        let mut seen = [false; 2];
        for seed in 0..64 {
            let r = filtered_rank(&s, 0, &[], TiePolicy::Random, seed).unwrap();
            seen[r as usize - 1] = true;
        }
        assert_eq!(seen, [true, true]);
        let s = [0.5f64, 0.95, 0.1, 0.1];
        assert_eq!(
            filtered_rank(&s, 0, &[1], TiePolicy::Expected, 0).unwrap(),
            1.0
        );
        assert!(matches!(
            filtered_rank(&s, 1, &[1], TiePolicy::Expected, 0),
            Err(Error::TargetFiltered(1))
        ));
        assert!(filtered_rank(&[f64::NAN, 0.0], 0, &[], TiePolicy::Expected, 0).is_err());
    }

    #[test]
    fn single_query_metrics() {
        let r = RankResult {
            triple: Triple::new(0, 0, 1),
            direction: Direction::Tail,
            query: (0, 0),
            target: 1,
            rank: 2.0,
            top_k: vec![],
        };
        let m = Metrics::from_ranks(&[r]);
        assert_eq!(m.mrr, 0.5);
        assert_eq!((m.hits(1), m.hits(3), m.hits(10)), (0.0, 1.0, 1.0));
        assert!(m.is_consistent());
    }

    fn result(rel: usize, tail: usize, rank: f64) -> RankResult {
        RankResult {
            triple: Triple::new(0, rel, tail),
            direction: Direction::Tail,
            query: (0, rel),
            target: tail,
            rank,
            top_k: vec![],
        }
    }

    #[test]
    fn improvement_examples() {
        let before = vec![result(0, 1, 5.0), result(1, 2, 3.0)];
        let same = improvement_diff(&before, &before).unwrap();
        assert!(same.values().all(|&c| c == 0));
        let after = vec![result(0, 1, 2.0), result(1, 2, 3.0)];
        let d = improvement_diff(&before, &after).unwrap();
        assert_eq!((d[&0], d[&1]), (1, 0));
        let other = vec![result(0, 1, 1.0), result(1, 2, 1.0)];
        let (a, b) = improvement_diff_exclusive(&before, &after, &other).unwrap();
        assert_eq!((a[&0], b[&0], b[&1]), (0, 0, 1));
        assert!(improvement_diff(&before, &after[..1]).is_err());
    }

    #[test]
    fn topk_contract() {
        let f = Fixed(vec![vec![0.3, 0.9, 0.3, 0.1]], HashMap::from([((0, 0), 0)]));
        let d = dump_topk(&f, &[(0, 0)], &[Some(1)], 3).unwrap();
        assert_eq!(d[0].candidates, vec![(1, 0.9), (0, 0.3), (2, 0.3)]);
        assert_eq!(d[0].gold_rank, Some(1));
        let one = Fixed(vec![vec![0.0]], HashMap::from([((0, 0), 0)]));
        assert_eq!(
            dump_topk(&one, &[(0, 0)], &[None], 1).unwrap()[0].candidates[0].0,
            0
        );
    }
}

//! Deterministic synthetic datasets for tests and experiments.
//!
//! The split-signal generator builds a graph whose held-out triples are of
//! two kinds. Structure-tagged ones follow a two-hop rule: each item links
//! to a hub, each hub to a few targets, and `chain{k}` connects the item to
//! its hub's targets. Nothing in the item's name reveals the hub. Text-tagged
//! ones follow a name rule: an item whose name carries marker `m{k}v{j}`
//! has `token{k}` pointing at class entity `j`, and no edge reveals the
//! marker. Per rule, some items lose all their answers to dev/test and some
//! lose only one.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{
    write_text, write_triples, Interner, KnowledgeGraph, TextStore, Triple, TripleSplit,
};
use crate::rng::SeedStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalTag {
    Structure,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_entities: usize,
    pub chain_rules: usize,
    pub token_rules: usize,
    pub hubs_per_rule: usize,
    pub targets_per_rule: usize,
    /// Answers of a chain query.
    pub targets_per_hub: usize,
    pub markers_per_rule: usize,
    /// Answers of a token query.
    pub markers_per_item: usize,
    /// Fraction of items, per rule, whose answers are all held out.
    pub full_holdout: f64,
    /// Fraction of items, per rule, with exactly one answer held out.
    pub partial_holdout: f64,
    /// Share of held-out items sent to dev; the rest go to test.
    pub dev_share: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_entities: 200,
            chain_rules: 2,
            token_rules: 2,
            hubs_per_rule: 8,
            targets_per_rule: 10,
            targets_per_hub: 2,
            markers_per_rule: 10,
            markers_per_item: 2,
            full_holdout: 0.25,
            partial_holdout: 0.4,
            dev_share: 0.7,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn num_relations(&self) -> usize {
        3 * self.chain_rules + self.token_rules
    }

    fn reserved(&self) -> usize {
        self.token_rules * self.markers_per_rule
            + self.chain_rules * (self.hubs_per_rule + self.targets_per_rule)
    }

    pub fn num_items(&self) -> usize {
        self.num_entities.saturating_sub(self.reserved())
    }

    fn counts(&self) -> (usize, usize) {
        let n = self.num_items() as f64;
        (
            (self.full_holdout * n).round() as usize,
            (self.partial_holdout * n).round() as usize,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.chain_rules == 0 || self.token_rules == 0 {
            return bad("needs at least one chain rule and one token rule");
        }
        if self.hubs_per_rule == 0 {
            return bad("hubs_per_rule must be positive");
        }
        if self.targets_per_hub == 0 || self.targets_per_hub > self.targets_per_rule {
            return bad("targets_per_hub must lie in 1..=targets_per_rule");
        }
        if self.markers_per_item == 0 || self.markers_per_item > self.markers_per_rule {
            return bad("markers_per_item must lie in 1..=markers_per_rule");
        }
        let fracs = [self.full_holdout, self.partial_holdout, self.dev_share];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("holdout fractions and dev_share must lie in [0, 1]");
        }
        let (full, partial) = self.counts();
        if self.num_items() < 10 || full + partial == 0 || full + partial >= self.num_items() {
            return bad("too few item entities for the requested holdout");
        }
        if partial > 0 && self.targets_per_hub.min(self.markers_per_item) < 2 {
            return bad("partial holdout needs at least two answers per query");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SplitSignal {
    pub graph: KnowledgeGraph,
    pub split: TripleSplit,
    /// Tag of every dev and test triple.
    pub tags: BTreeMap<Triple, SignalTag>,
}

impl SplitSignal {
    pub fn tagged(&self, tag: SignalTag, triples: &[Triple]) -> Vec<Triple> {
        triples
            .iter()
            .copied()
            .filter(|t| self.tags.get(t) == Some(&tag))
            .collect()
    }
}

#[derive(Clone, Copy)]
enum Holdout {
    Full { dev: bool },
    Partial { dev: bool },
}

struct Sink {
    train: Vec<Triple>,
    valid: Vec<Triple>,
    test: Vec<Triple>,
    tags: BTreeMap<Triple, SignalTag>,
}

impl Sink {
    fn place(
        &mut self,
        answers: &[Triple],
        hold: Option<Holdout>,
        tag: SignalTag,
        rng: &mut ChaCha8Rng,
    ) {
        let (held, dev): (Vec<usize>, bool) = match hold {
            None => (Vec::new(), false),
            Some(Holdout::Full { dev }) => ((0..answers.len()).collect(), dev),
            Some(Holdout::Partial { dev }) => (vec![rng.gen_range(0..answers.len())], dev),
        };
        for (i, &t) in answers.iter().enumerate() {
            if held.contains(&i) {
                self.tags.insert(t, tag);
                if dev {
                    self.valid.push(t);
                } else {
                    self.test.push(t);
                }
            } else {
                self.train.push(t);
            }
        }
    }
}

/// Builds the split-signal dataset. Relations are laid out as
/// `hub{k}, map{k}, chain{k}` per chain rule followed by `token{k}`.
pub fn generate_split_signal(spec: &SyntheticSpec) -> Result<SplitSignal> {
    spec.validate()?;
    let mut rng = SeedStream::new(spec.seed).rng("split-signal");

    let mut names = Vec::with_capacity(spec.num_entities);
    let mut texts = Vec::with_capacity(spec.num_entities);
    let mut class_ids = vec![Vec::new(); spec.token_rules];
    for (k, ids) in class_ids.iter_mut().enumerate() {
        for j in 0..spec.markers_per_rule {
            ids.push(names.len());
            texts.push(format!("class m{k}v{j}"));
            names.push(format!("e{}", names.len()));
        }
    }
    let mut hub_ids = vec![Vec::new(); spec.chain_rules];
    let mut target_ids = vec![Vec::new(); spec.chain_rules];
    for k in 0..spec.chain_rules {
        for _ in 0..spec.hubs_per_rule {
            hub_ids[k].push(names.len());
            texts.push(format!("hub h{}", names.len()));
            names.push(format!("e{}", names.len()));
        }
        for _ in 0..spec.targets_per_rule {
            target_ids[k].push(names.len());
            texts.push(format!("target t{}", names.len()));
            names.push(format!("e{}", names.len()));
        }
    }
    let items: Vec<usize> = (names.len()..spec.num_entities).collect();
    let pool: Vec<usize> = (0..spec.markers_per_rule).collect();
    let markers: Vec<Vec<Vec<usize>>> = items
        .iter()
        .map(|_| {
            (0..spec.token_rules)
                .map(|_| {
                    let mut m: Vec<usize> = pool
                        .choose_multiple(&mut rng, spec.markers_per_item)
                        .copied()
                        .collect();
                    m.sort_unstable();
                    m
                })
                .collect()
        })
        .collect();
    for (i, &e) in items.iter().enumerate() {
        // no per-item token: an identity token would let the text model
        // memorize hub membership and answer chain queries
        let mut t = String::from("item");
        for (k, ms) in markers[i].iter().enumerate() {
            for m in ms {
                t.push_str(&format!(" m{k}v{m}"));
            }
        }
        texts.push(t);
        names.push(format!("e{e}"));
    }

    let mut relations = Interner::default();
    let mut relation_text = Vec::new();
    for k in 0..spec.chain_rules {
        for (name, text) in [
            ("hub", "member of hub"),
            ("map", "hub leads to"),
            ("chain", "reaches via hub"),
        ] {
            relations.intern(&format!("{name}{k}"));
            relation_text.push(format!("{text} {k}"));
        }
    }
    for k in 0..spec.token_rules {
        relations.intern(&format!("token{k}"));
        relation_text.push(format!("has class {k}"));
    }

    let (n_full, n_partial) = spec.counts();
    let assign = |rng: &mut ChaCha8Rng| -> BTreeMap<usize, Holdout> {
        let mut order = items.clone();
        order.shuffle(rng);
        let dev_cut = |n: usize| (spec.dev_share * n as f64).round() as usize;
        let (df, dp) = (dev_cut(n_full), dev_cut(n_partial));
        let mut out = BTreeMap::new();
        for (i, &e) in order[..n_full].iter().enumerate() {
            out.insert(e, Holdout::Full { dev: i < df });
        }
        for (i, &e) in order[n_full..n_full + n_partial].iter().enumerate() {
            out.insert(e, Holdout::Partial { dev: i < dp });
        }
        out
    };
    let mut sink = Sink {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        tags: BTreeMap::new(),
    };

    for k in 0..spec.chain_rules {
        let (hub_r, map_r, chain_r) = (3 * k, 3 * k + 1, 3 * k + 2);
        let mut hub_targets = Vec::with_capacity(spec.hubs_per_rule);
        for &h in &hub_ids[k] {
            let mut ts: Vec<usize> = target_ids[k]
                .choose_multiple(&mut rng, spec.targets_per_hub)
                .copied()
                .collect();
            ts.sort_unstable();
            sink.train
                .extend(ts.iter().map(|&t| Triple::new(h, map_r, t)));
            hub_targets.push(ts);
        }
        let holdout = assign(&mut rng);
        for &e in &items {
            let hub = rng.gen_range(0..spec.hubs_per_rule);
            sink.train.push(Triple::new(e, hub_r, hub_ids[k][hub]));
            let answers: Vec<Triple> = hub_targets[hub]
                .iter()
                .map(|&t| Triple::new(e, chain_r, t))
                .collect();
            sink.place(
                &answers,
                holdout.get(&e).copied(),
                SignalTag::Structure,
                &mut rng,
            );
        }
    }
    for k in 0..spec.token_rules {
        let r = 3 * spec.chain_rules + k;
        let holdout = assign(&mut rng);
        for (i, &e) in items.iter().enumerate() {
            let answers: Vec<Triple> = markers[i][k]
                .iter()
                .map(|&m| Triple::new(e, r, class_ids[k][m]))
                .collect();
            sink.place(
                &answers,
                holdout.get(&e).copied(),
                SignalTag::Text,
                &mut rng,
            );
        }
    }

    let mut entities = Interner::default();
    for n in &names {
        entities.intern(n);
    }
    let text = TextStore {
        entity_text: texts,
        relation_text,
        max_len: TextStore::DEFAULT_MAX_LEN,
    };
    let graph = KnowledgeGraph::new(entities, relations, &sink.train, text)?;
    let split = TripleSplit::new(sink.train, sink.valid, sink.test)?;
    Ok(SplitSignal {
        graph,
        split,
        tags: sink.tags,
    })
}

/// Writes `train.tsv`, `valid.tsv`, `test.tsv` and the text files.
pub fn write_dataset(dir: &Path, graph: &KnowledgeGraph, split: &TripleSplit) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_triples(&dir.join("train.tsv"), graph, &split.train)?;
    write_triples(&dir.join("valid.tsv"), graph, &split.valid)?;
    write_triples(&dir.join("test.tsv"), graph, &split.test)?;
    write_text(dir, graph)?;
    Ok(())
}

/// `n` distinct random triples over `n / 4` entities and 12 relations,
/// plus small dev and test sets disjoint from them.
pub fn random_dataset(n: usize, seed: u64) -> Result<(KnowledgeGraph, TripleSplit)> {
    let ne = (n / 4).max(8);
    let nr = 12;
    let mut rng = SeedStream::new(seed).rng("random-dataset");
    let extra = (n / 20).max(2);
    let mut seen = std::collections::BTreeSet::new();
    let mut all = Vec::with_capacity(n + 2 * extra);
    while all.len() < n + 2 * extra {
        let t = Triple::new(
            rng.gen_range(0..ne),
            rng.gen_range(0..nr),
            rng.gen_range(0..ne),
        );
        if t.head != t.tail && seen.insert(t) {
            all.push(t);
        }
    }
    let test = all.split_off(n + extra);
    let valid = all.split_off(n);
    let mut entities = Interner::default();
    (0..ne).for_each(|i| {
        entities.intern(&format!("e{i}"));
    });
    let mut relations = Interner::default();
    (0..nr).for_each(|i| {
        relations.intern(&format!("r{i}"));
    });
    let text = TextStore {
        entity_text: (0..ne).map(|i| format!("entity {i}")).collect(),
        relation_text: (0..nr).map(|i| format!("relation {i}")).collect(),
        max_len: TextStore::DEFAULT_MAX_LEN,
    };
    let graph = KnowledgeGraph::new(entities, relations, &all, text)?;
    let split = TripleSplit::new(all, valid, test)?;
    Ok((graph, split))
}

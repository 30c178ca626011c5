//! Text model: `[CLS] head [SEP] relation [SEP]` sequences encoded with
//! token and position embeddings, an optional self-attention block and a
//! pooled linear classifier over all entities.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use vemfuse_diffmath::{ParamId, ParamSet, Scalar, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::kg::{TextStore, INVERSE_PREFIX};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const INV: usize = 4;
const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[INV]"];

/// Upper bound on tokens per attention block; longer batches are split.
const ATTENTION_BLOCK: usize = 128;

/// Lowercased alphanumeric runs; everything else separates tokens.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{t}\t{i}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path)?;
        let mut tokens = Vec::new();
        for (i, line) in content.lines().enumerate() {
            let parse_err = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: msg.into(),
            };
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected token<TAB>id"))?;
            let id: usize = id.trim().parse().map_err(|_| parse_err("bad id"))?;
            if id != tokens.len() {
                return Err(parse_err("ids must be dense and ordered"));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Config(
                "vocabulary lacks the reserved special tokens".into(),
            ));
        }
        Ok(Self::from_tokens(tokens))
    }
}

fn strip_inverse(s: &str) -> (bool, &str) {
    match s.strip_prefix(INVERSE_PREFIX) {
        Some(rest) => (true, rest),
        None => (false, s),
    }
}

/// Tokens of frequency `>= min_count`, ordered by frequency then
/// lexicographically, after the reserved specials.
pub fn build_vocab(text: &TextStore, min_count: usize) -> Vocab {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let rel = text.relation_text.iter().map(|s| strip_inverse(s).1);
    for s in text.entity_text.iter().map(String::as_str).chain(rel) {
        for tok in tokenize(s) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count.max(1) && !SPECIALS.contains(&t.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(t, _)| t))
        .collect();
    Vocab::from_tokens(tokens)
}

/// Pre-tokenized entity and relation segments.
#[derive(Debug)]
pub struct TokenCache {
    entity: Vec<Vec<usize>>,
    relation: Vec<Vec<usize>>,
    max_len: usize,
    empty_inputs: AtomicUsize,
}

impl Clone for TokenCache {
    fn clone(&self) -> Self {
        Self {
            entity: self.entity.clone(),
            relation: self.relation.clone(),
            max_len: self.max_len,
            empty_inputs: AtomicUsize::new(self.empty_inputs.load(Ordering::Relaxed)),
        }
    }
}

impl TokenCache {
    pub fn new(text: &TextStore, vocab: &Vocab, max_len: usize) -> Result<Self> {
        if max_len < 3 {
            return Err(Error::Config(format!(
                "max_len must be at least 3, got {max_len}"
            )));
        }
        let ids = |s: &str| tokenize(s).iter().map(|t| vocab.id(t)).collect::<Vec<_>>();
        let entity = text.entity_text.iter().map(|s| ids(s)).collect();
        let relation = text
            .relation_text
            .iter()
            .map(|s| {
                let (inv, rest) = strip_inverse(s);
                let mut v = if inv { vec![INV] } else { Vec::new() };
                v.extend(ids(rest));
                v
            })
            .collect();
        Ok(Self {
            entity,
            relation,
            max_len,
            empty_inputs: AtomicUsize::new(0),
        })
    }

    pub fn num_entities(&self) -> usize {
        self.entity.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relation.len()
    }

    /// Inputs assembled with both segments empty so far.
    pub fn empty_inputs(&self) -> usize {
        self.empty_inputs.load(Ordering::Relaxed)
    }

    /// `[CLS] head [SEP] relation [SEP]`, at most `max_len` ids.
    ///
    /// When too long, the relation segment keeps at least `max_len / 4`
    /// tokens (or all of it if shorter) and the head segment is cut to fit;
    /// the relation is cut as well only if it alone exceeds that share.
    pub fn assemble(&self, head: usize, relation: usize) -> Result<Vec<usize>> {
        let h = self.entity.get(head).ok_or(Error::OutOfRange {
            what: "entity",
            id: head,
            size: self.entity.len(),
        })?;
        let r = self.relation.get(relation).ok_or(Error::OutOfRange {
            what: "relation",
            id: relation,
            size: self.relation.len(),
        })?;
        if h.is_empty() && r.is_empty() {
            self.empty_inputs.fetch_add(1, Ordering::Relaxed);
        }
        let budget = self.max_len - 3;
        let (mut nh, mut nr) = (h.len(), r.len());
        if nh + nr > budget {
            nr = nr
                .min((self.max_len / 4).max(budget.saturating_sub(nh)))
                .min(budget);
            nh = budget - nr;
        }
        let mut out = Vec::with_capacity(nh + nr + 3);
        out.push(CLS);
        out.extend_from_slice(&h[..nh]);
        out.push(SEP);
        out.extend_from_slice(&r[..nr]);
        out.push(SEP);
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Cls,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub dim: usize,
    pub max_len: usize,
    pub attention: bool,
    pub pooling: Pooling,
    pub min_count: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            max_len: TextStore::DEFAULT_MAX_LEN,
            attention: true,
            pooling: Pooling::Cls,
            min_count: 1,
        }
    }
}

#[derive(Clone, Debug)]
struct AttentionIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

/// Parameters, vocabulary and tokenized text of the text model.
#[derive(Debug)]
pub struct TextModel<T: Scalar> {
    config: TextConfig,
    params: ParamSet<T>,
    vocab: Arc<Vocab>,
    cache: Arc<TokenCache>,
    token: ParamId,
    position: ParamId,
    attention: Option<AttentionIds>,
    pool_w: ParamId,
    pool_b: ParamId,
    entity_out: ParamId,
    entity_bias: ParamId,
    forwards: AtomicU64,
}

impl<T: Scalar> Clone for TextModel<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            vocab: Arc::clone(&self.vocab),
            cache: Arc::clone(&self.cache),
            token: self.token,
            position: self.position,
            attention: self.attention.clone(),
            pool_w: self.pool_w,
            pool_b: self.pool_b,
            entity_out: self.entity_out,
            entity_bias: self.entity_bias,
            forwards: AtomicU64::new(self.forward_count()),
        }
    }
}

impl<T: Scalar> TextModel<T> {
    pub fn new<R: Rng + ?Sized>(
        config: TextConfig,
        vocab: Arc<Vocab>,
        text: &TextStore,
        num_entities: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = config.dim;
        if d == 0 {
            return Err(Error::Config("text dim must be positive".into()));
        }
        let cache = Arc::new(TokenCache::new(text, &vocab, config.max_len)?);
        let mut params = ParamSet::new();
        params.add("token_emb", Tensor::xavier_uniform(vocab.len(), d, rng))?;
        params.add(
            "position_emb",
            Tensor::xavier_uniform(config.max_len, d, rng),
        )?;
        if config.attention {
            for name in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                params.add(name, Tensor::xavier_uniform(d, d, rng))?;
            }
        }
        params.add("pooler.w", Tensor::xavier_uniform(d, d, rng))?;
        params.add("pooler.b", Tensor::zeros(&[1, d]))?;
        params.add("entity_out", Tensor::xavier_uniform(num_entities, d, rng))?;
        // start at the uniform log-prior so early steps don't saturate the pooler
        let prior = T::of(-(num_entities.max(1) as f64).ln());
        params.add("entity_out.bias", Tensor::full(&[1, num_entities], prior))?;
        Self::from_parts(config, params, vocab, cache)
    }

    /// Rebuilds a model around loaded parameters.
    pub fn from_params(
        config: TextConfig,
        params: ParamSet<T>,
        vocab: Arc<Vocab>,
        text: &TextStore,
    ) -> Result<Self> {
        let cache = Arc::new(TokenCache::new(text, &vocab, config.max_len)?);
        Self::from_parts(config, params, vocab, cache)
    }

    fn from_parts(
        config: TextConfig,
        params: ParamSet<T>,
        vocab: Arc<Vocab>,
        cache: Arc<TokenCache>,
    ) -> Result<Self> {
        let get = |name: &str| {
            params
                .lookup(name)
                .ok_or_else(|| Error::Config(format!("missing text parameter {name}")))
        };
        let attention = if config.attention {
            Some(AttentionIds {
                wq: get("attn.wq")?,
                wk: get("attn.wk")?,
                wv: get("attn.wv")?,
                wo: get("attn.wo")?,
            })
        } else {
            None
        };
        let token = get("token_emb")?;
        let position = get("position_emb")?;
        let entity_out = get("entity_out")?;
        let d = params.value(token).cols();
        if d != config.dim
            || params.value(token).rows() != vocab.len()
            || params.value(position).rows() != config.max_len
            || params.value(entity_out).rows() != cache.num_entities()
        {
            return Err(Error::Config(
                "text parameters do not match config/vocabulary".into(),
            ));
        }
        Ok(Self {
            attention,
            token,
            position,
            pool_w: get("pooler.w")?,
            pool_b: get("pooler.b")?,
            entity_out,
            entity_bias: get("entity_out.bias")?,
            config,
            params,
            vocab,
            cache,
            forwards: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &TextConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn vocab(&self) -> &Arc<Vocab> {
        &self.vocab
    }

    pub fn tokens(&self) -> &TokenCache {
        &self.cache
    }

    pub fn num_entities(&self) -> usize {
        self.params.value(self.entity_out).rows()
    }

    /// Sequence-encoder forward passes so far (one per query sequence).
    pub fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forwards.store(0, Ordering::Relaxed);
    }

    pub fn cast<U: Scalar>(&self) -> TextModel<U> {
        TextModel {
            config: self.config.clone(),
            params: self.params.cast(),
            vocab: Arc::clone(&self.vocab),
            cache: Arc::clone(&self.cache),
            token: self.token,
            position: self.position,
            attention: self.attention.clone(),
            pool_w: self.pool_w,
            pool_b: self.pool_b,
            entity_out: self.entity_out,
            entity_bias: self.entity_bias,
            forwards: AtomicU64::new(0),
        }
    }

    fn attend(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        lens: &[usize],
        ids: &AttentionIds,
    ) -> Result<Var> {
        let wq = tape.param(&self.params, ids.wq);
        let wk = tape.param(&self.params, ids.wk);
        let wv = tape.param(&self.params, ids.wv);
        let wo = tape.param(&self.params, ids.wo);
        let scale = T::of(1.0 / (self.config.dim as f64).sqrt());
        let mut blocks = Vec::new();
        let mut start = 0;
        let mut i = 0;
        while i < lens.len() {
            // group whole sequences into one block-diagonal attention
            let mut group = Vec::new();
            let mut total = 0;
            while i < lens.len() && (group.is_empty() || total + lens[i] <= ATTENTION_BLOCK) {
                group.push(lens[i]);
                total += lens[i];
                i += 1;
            }
            let rows: Vec<usize> = (start..start + total).collect();
            start += total;
            let xb = tape.gather_rows(x, rows)?;
            let q = tape.matmul(xb, wq)?;
            let k = tape.matmul(xb, wk)?;
            let v = tape.matmul(xb, wv)?;
            let s = tape.matmul_nt(q, k)?;
            let s = tape.scale(s, scale)?;
            let mut mask = vec![T::of(-1e9); total * total];
            let mut off = 0;
            for &l in &group {
                for a in off..off + l {
                    for b in off..off + l {
                        mask[a * total + b] = T::zero();
                    }
                }
                off += l;
            }
            let mask = tape.constant(Tensor::matrix(total, total, mask)?);
            let s = tape.add(s, mask)?;
            let a = tape.softmax(s, T::one())?;
            let h = tape.matmul(a, v)?;
            let h = tape.matmul(h, wo)?;
            blocks.push(tape.add(xb, h)?);
        }
        Ok(tape.concat_rows(&blocks)?)
    }

    /// Logits over all entities, one row per query.
    pub fn forward(&self, tape: &mut Tape<T>, queries: &[(usize, usize)]) -> Result<Var> {
        if queries.is_empty() {
            return Err(Error::Config("empty query batch".into()));
        }
        let seqs = queries
            .iter()
            .map(|&(h, r)| self.cache.assemble(h, r))
            .collect::<Result<Vec<_>>>()?;
        self.forwards
            .fetch_add(seqs.len() as u64, Ordering::Relaxed);
        let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let flat: Vec<usize> = seqs.iter().flatten().copied().collect();
        let pos: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
        let tok = tape.param(&self.params, self.token);
        let pemb = tape.param(&self.params, self.position);
        let x = tape.gather_rows(tok, flat.clone())?;
        let p = tape.gather_rows(pemb, pos)?;
        let mut x = tape.add(x, p)?;
        if let Some(ids) = &self.attention {
            x = self.attend(tape, x, &lens, ids)?;
        }
        let pooled = match self.config.pooling {
            Pooling::Cls => {
                let starts: Vec<usize> = lens
                    .iter()
                    .scan(0, |acc, &l| {
                        let s = *acc;
                        *acc += l;
                        Some(s)
                    })
                    .collect();
                tape.gather_rows(x, starts)?
            }
            Pooling::Mean => {
                let total = flat.len();
                let mut m = vec![T::zero(); queries.len() * total];
                let mut off = 0;
                for (b, s) in seqs.iter().enumerate() {
                    let n = s.iter().filter(|&&t| t != PAD).count().max(1);
                    for (j, &t) in s.iter().enumerate() {
                        if t != PAD {
                            m[b * total + off + j] = T::of(1.0 / n as f64);
                        }
                    }
                    off += s.len();
                }
                let m = tape.constant(Tensor::matrix(queries.len(), total, m)?);
                tape.matmul(m, x)?
            }
        };
        let w = tape.param(&self.params, self.pool_w);
        let b = tape.param(&self.params, self.pool_b);
        let v = tape.matmul(pooled, w)?;
        let v = tape.add_row(v, b)?;
        let v = tape.tanh(v)?;
        let out = tape.param(&self.params, self.entity_out);
        let bias = tape.param(&self.params, self.entity_bias);
        let logits = tape.matmul_nt(v, out)?;
        Ok(tape.add_row(logits, bias)?)
    }

    /// Logit rows without recording gradients, in chunks of `chunk`.
    pub fn logits_values(&self, queries: &[(usize, usize)], chunk: usize) -> Result<Vec<Vec<T>>> {
        let mut out = Vec::with_capacity(queries.len());
        for part in queries.chunks(chunk.max(1)) {
            let mut tape = Tape::new();
            let l = self.forward(&mut tape, part)?;
            let v = tape.value(l);
            out.extend((0..v.rows()).map(|i| v.row(i).to_vec()));
        }
        Ok(out)
    }

    /// Tempered predictive distributions `q_π(· | h, r)`.
    pub fn predict_q(&self, queries: &[(usize, usize)], temperature: T) -> Result<Vec<Vec<T>>> {
        self.logits_values(queries, 256)?
            .iter()
            .map(|l| Ok(vemfuse_diffmath::dist::softmax_t(l, temperature)?))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(entities: &[&str], relations: &[&str]) -> TextStore {
        TextStore {
            entity_text: entities.iter().map(|s| s.to_string()).collect(),
            relation_text: relations.iter().map(|s| s.to_string()).collect(),
            max_len: 64,
        }
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(
            tokenize("Barack Obama, /film/genre"),
            ["barack", "obama", "film", "genre"]
        );
    }

    #[test]
    fn vocab_counts_and_orders() {
        let v = build_vocab(&store(&["a a b"], &[]), 2);
        assert_eq!(v.len(), SPECIALS.len() + 1);
        assert_eq!(v.id("a"), SPECIALS.len());
        assert_eq!(v.id("b"), UNK);
        let again = build_vocab(&store(&["a a b"], &[]), 2);
        assert_eq!(v, again);
        let v = build_vocab(&store(&["c b b", "a"], &["a"]), 1);
        assert_eq!(&v.tokens[SPECIALS.len()..], ["a", "b", "c"]);
    }

    #[test]
    fn vocab_tsv_round_trip() {
        let v = build_vocab(&store(&["x y z y"], &["has part"]), 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.tsv");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }

    #[test]
    fn assembled_template() {
        let text = store(&["barack obama"], &["profession", "inverse of profession"]);
        let vocab = build_vocab(&text, 1);
        let cache = TokenCache::new(&text, &vocab, 64).unwrap();
        let seq = cache.assemble(0, 0).unwrap();
        let words: Vec<&str> = seq.iter().map(|&i| vocab.token(i)).collect();
        assert_eq!(
            words,
            ["[CLS]", "barack", "obama", "[SEP]", "profession", "[SEP]"]
        );
        let seq = cache.assemble(0, 1).unwrap();
        assert_eq!(seq[4], INV);
        assert_eq!(cache.empty_inputs(), 0);
    }

    #[test]
    fn truncation_contract() {
        let long: String = (0..200).map(|i| format!("w{i} ")).collect();
        let text = store(&[&long], &["born in", &long]);
        let vocab = build_vocab(&text, 1);
        let cache = TokenCache::new(&text, &vocab, 64).unwrap();
        let seq = cache.assemble(0, 0).unwrap();
        assert_eq!(seq.len(), 64);
        // short relation kept whole
        assert_eq!(&seq[61..], &[vocab.id("born"), vocab.id("in"), SEP]);
        let seq = cache.assemble(0, 1).unwrap();
        assert_eq!(seq.len(), 64);
        let sep = seq.iter().skip(1).position(|&t| t == SEP).unwrap() + 1;
        assert_eq!(64 - sep - 2, 16);
    }

    #[test]
    fn empty_text_counts() {
        let text = store(&[""], &[""]);
        let vocab = build_vocab(&text, 1);
        let cache = TokenCache::new(&text, &vocab, 64).unwrap();
        assert_eq!(cache.assemble(0, 0).unwrap(), vec![CLS, SEP, SEP]);
        assert_eq!(cache.empty_inputs(), 1);
    }

    fn model(attention: bool, pooling: Pooling) -> TextModel<f64> {
        let text = store(
            &["red cube", "blue cube", "red ball", "green", "tiny blue"],
            &["has color"],
        );
        let vocab = Arc::new(build_vocab(&text, 1));
        let cfg = TextConfig {
            dim: 8,
            max_len: 16,
            attention,
            pooling,
            min_count: 1,
        };
        TextModel::new(cfg, vocab, &text, 5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform() {
        let mut m = model(true, Pooling::Cls);
        for name in ["token_emb", "position_emb", "entity_out"] {
            let id = m.params.lookup(name).unwrap();
            m.params_mut().value_mut(id).fill(0.0);
        }
        let q = m.predict_q(&[(0, 0)], 1.0).unwrap();
        for p in &q[0] {
            assert_abs_diff_eq!(*p, 0.2, epsilon = 1e-12);
        }
    }

    #[test]
    fn identical_sequences_identical_distributions() {
        let m = model(true, Pooling::Mean);
        let q = m.predict_q(&[(1, 0), (2, 0), (1, 0)], 0.7).unwrap();
        assert_eq!(q[0], q[2]);
        assert!((q[1].iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn batching_does_not_change_predictions() {
        for (att, pool) in [
            (true, Pooling::Cls),
            (false, Pooling::Mean),
            (true, Pooling::Mean),
        ] {
            let m = model(att, pool);
            let all = m.logits_values(&[(0, 0), (3, 0), (4, 0)], 16).unwrap();
            let one = m.logits_values(&[(3, 0)], 16).unwrap();
            for (a, b) in all[1].iter().zip(&one[0]) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn no_attention_matches_loop_oracle() {
        let mut m = model(false, Pooling::Cls);
        let bias = m.params.lookup("entity_out.bias").unwrap();
        m.params_mut()
            .value_mut(bias)
            .data_mut()
            .copy_from_slice(&[0.3, -0.2, 0.0, 0.5, -0.7]);
        let get = |n: &str| m.params.value(m.params.lookup(n).unwrap());
        let seq = m.cache.assemble(2, 0).unwrap();
        let d = 8;
        let x: Vec<f64> = (0..d)
            .map(|k| get("token_emb").row(seq[0])[k] + get("position_emb").row(0)[k])
            .collect();
        let v: Vec<f64> = (0..d)
            .map(|j| {
                let s: f64 = (0..d).map(|k| x[k] * get("pooler.w").row(k)[j]).sum();
                (s + get("pooler.b").data()[j]).tanh()
            })
            .collect();
        let logits: Vec<f64> = (0..5)
            .map(|e| {
                let s: f64 = (0..d).map(|k| v[k] * get("entity_out").row(e)[k]).sum();
                s + get("entity_out.bias").data()[e]
            })
            .collect();
        let want = vemfuse_diffmath::dist::softmax_t(&logits, 1.0).unwrap();
        let got = m.predict_q(&[(2, 0)], 1.0).unwrap();
        for (a, b) in got[0].iter().zip(&want) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_counter_counts_sequences() {
        let m = model(true, Pooling::Cls);
        m.logits_values(&[(0, 0), (1, 0), (2, 0)], 2).unwrap();
        assert_eq!(m.forward_count(), 3);
    }
}

//! Pre-training, continued training and the alternating E/M fusion loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use vemfuse_diffmath::optim::{Adam, AdamConfig};
use vemfuse_diffmath::{checkpoint, ParamSet, Tape, Tensor, Var};

use crate::densify::{densify, DensifyStats};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, Metrics, Split, StructScorer, TiePolicy};
use crate::kg::{KnowledgeGraph, TextStore, TripleSplit};
use crate::losses::{
    combined_e_objective, combined_m_objective, ml_loss_struct, ml_loss_text, supervised_loss,
    vem_e_loss, vem_m_loss, FusionConfig,
};
use crate::rng::SeedStream;
use crate::structure::{EdgeIndex, StructConfig, StructModel};
use crate::text::{TextConfig, TextModel, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_struct: f64,
    pub lr_text: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub fusion_epochs: usize,
    pub grad_clip: f64,
    pub seed: u64,
    /// Dev evaluation period in epochs (rounds during fusion); 0 disables.
    pub eval_every: usize,
    /// Per-round dev evaluation subsample; final selection uses all of dev.
    pub dev_limit: Option<usize>,
    pub label_smoothing: f64,
    pub tie_policy: TiePolicy,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_struct: 1e-3,
            lr_text: 1e-3,
            batch_size: 64,
            pretrain_epochs: 100,
            fusion_epochs: 30,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 1,
            dev_limit: Some(2000),
            label_smoothing: 0.1,
            tie_policy: TiePolicy::Random,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_struct > 0.0 && self.lr_text > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || !(self.grad_clip > 0.0) || self.workers == 0 {
            return Err(Error::Config(
                "batch_size, grad_clip and workers must be positive".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must lie in [0, 0.5)".into()));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            clip_norm: Some(self.grad_clip),
            ..AdamConfig::default()
        }
    }

    fn eval_options(&self, limit: Option<usize>) -> EvalOptions {
        EvalOptions {
            policy: self.tie_policy,
            seed: self.seed,
            limit,
            top_k: 0,
            workers: self.workers,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Structure,
    Text,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PretrainStructure,
    PretrainText,
    ContinueStructure,
    ContinueText,
    EStep,
    MStep,
    Select,
}

/// Mean loss components of an epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub supervised: f64,
    pub vem: f64,
    pub ml: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub steps: usize,
    pub loss: LossParts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub densify: Option<DensifyStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_structure: Option<Metrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_text: Option<Metrics>,
    pub wall_clock_s: f64,
    /// Total objective of every step, in order.
    #[serde(skip)]
    pub step_losses: Vec<f64>,
}

/// Append-only per-epoch log, optionally mirrored to a JSON-lines file.
#[derive(Debug, Default)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
    sink: Option<BufWriter<File>>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(Self {
            records: Vec::new(),
            sink: Some(BufWriter::new(f)),
        })
    }

    pub fn push(&mut self, rec: EpochRecord) -> Result<()> {
        if let Some(w) = &mut self.sink {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        log::info!(
            "{:?} epoch {} loss {:.5} (sup {:.5} vem {:.5} ml {:.5}){}{}",
            rec.phase,
            rec.epoch,
            rec.loss.total,
            rec.loss.supervised,
            rec.loss.vem,
            rec.loss.ml,
            rec.dev_structure
                .as_ref()
                .map(|m| format!(" dev-structure MRR {:.4}", m.mrr))
                .unwrap_or_default(),
            rec.dev_text
                .as_ref()
                .map(|m| format!(" dev-text MRR {:.4}", m.mrr))
                .unwrap_or_default(),
        );
        self.records.push(rec);
        Ok(())
    }

    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.phase == phase)
    }
}

/// Augmented graph and split with the training queries and their labels.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub graph: KnowledgeGraph,
    pub split: TripleSplit,
    pub queries: Vec<(usize, usize)>,
    pub labels: Vec<Vec<usize>>,
    edges: EdgeIndex,
}

impl TrainData {
    pub fn new(graph: KnowledgeGraph, split: TripleSplit) -> Result<Self> {
        if !graph.is_augmented() {
            return Err(Error::NotAugmented);
        }
        let mut queries: Vec<(usize, usize)> = graph
            .triples()
            .iter()
            .map(|t| (t.head, t.relation))
            .collect();
        queries.sort_unstable();
        queries.dedup();
        let labels = queries
            .iter()
            .map(|&(h, r)| graph.tails(h, r).to_vec())
            .collect();
        let edges = EdgeIndex::new(&graph, None)?;
        Ok(Self {
            graph,
            split,
            queries,
            labels,
            edges,
        })
    }

    pub fn edges(&self) -> &EdgeIndex {
        &self.edges
    }

    fn batches(&self, batch_size: usize, stream: SeedStream) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.queries.len()).collect();
        order.shuffle(&mut stream.into_rng());
        order.chunks(batch_size).map(<[usize]>::to_vec).collect()
    }

    fn batch(&self, idx: &[usize]) -> (Vec<(usize, usize)>, Vec<&[usize]>) {
        (
            idx.iter().map(|&i| self.queries[i]).collect(),
            idx.iter().map(|&i| self.labels[i].as_slice()).collect(),
        )
    }
}

fn shuffle_stream(seed: u64, kind: ModelKind, epoch: usize) -> SeedStream {
    let name = match kind {
        ModelKind::Structure => "shuffle/structure",
        ModelKind::Text => "shuffle/text",
    };
    SeedStream::new(seed).child(name).index(epoch as u64)
}

fn rows_to_tensor(rows: Vec<Vec<f32>>) -> Result<Tensor<f32>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    Ok(Tensor::matrix(r, c, rows.into_iter().flatten().collect())?)
}

fn finite(v: f64, what: &str, phase: Phase, epoch: usize, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            what: what.into(),
            context: format!("{phase:?} epoch {epoch} step {step}"),
        })
    }
}

#[derive(Default)]
struct Accum {
    parts: LossParts,
    steps: usize,
    step_losses: Vec<f64>,
    densify: Option<DensifyStats>,
}

impl Accum {
    fn add(&mut self, sup: f64, vem: f64, ml: f64, total: f64) {
        self.parts.supervised += sup;
        self.parts.vem += vem;
        self.parts.ml += ml;
        self.parts.total += total;
        self.steps += 1;
        self.step_losses.push(total);
    }

    fn add_densify(&mut self, s: &DensifyStats) {
        self.densify.get_or_insert_with(Default::default).merge(s);
    }

    fn finish(mut self, phase: Phase, epoch: usize, start: Instant) -> EpochRecord {
        let n = self.steps.max(1) as f64;
        self.parts.supervised /= n;
        self.parts.vem /= n;
        self.parts.ml /= n;
        self.parts.total /= n;
        EpochRecord {
            phase,
            epoch,
            steps: self.steps,
            loss: self.parts,
            densify: self.densify,
            dev_structure: None,
            dev_text: None,
            wall_clock_s: start.elapsed().as_secs_f64(),
            step_losses: self.step_losses,
        }
    }
}

fn value(tape: &Tape<f32>, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| tape.value(v).item() as f64)
}

/// Per-query, per-entity mean of a summed distillation term, matching the
/// reduction of the supervised loss.
fn mean_term(tape: &mut Tape<f32>, v: Var, queries: usize, entities: usize) -> Result<Var> {
    Ok(tape.scale(v, 1.0 / (queries * entities) as f32)?)
}

/// Peer model and weights for a fusion epoch.
struct Peer<'a, M> {
    model: &'a M,
    cfg: &'a FusionConfig,
    round: usize,
}

/// One epoch over the structure model: supervised loss plus, during the
/// M-step, the weighted generated-query and mimicry terms.
fn structure_epoch(
    p: &mut StructModel<f32>,
    opt: &mut Adam<f32>,
    data: &TrainData,
    cfg: &TrainConfig,
    phase: Phase,
    epoch: usize,
    peer: Option<Peer<'_, TextModel<f32>>>,
) -> Result<EpochRecord> {
    let start = Instant::now();
    let mut acc = Accum::default();
    let smoothing = peer
        .as_ref()
        .map_or(cfg.label_smoothing, |f| f.cfg.label_smoothing);
    let batches = data.batches(
        cfg.batch_size,
        shuffle_stream(cfg.seed, ModelKind::Structure, epoch),
    );
    for (step, idx) in batches.iter().enumerate() {
        let (qs, labels) = data.batch(idx);
        let mut tape = Tape::new();
        let (ent, rel) = p.encode(&mut tape, data.edges())?;
        let logits = p.score(&mut tape, ent, rel, &qs)?;
        let sup = supervised_loss(&mut tape, logits, &labels, smoothing)?;
        let (mut ml, mut vem) = (None, None);
        let total = match &peer {
            None => sup,
            Some(peer) => {
                let f = peer.cfg;
                if f.beta_s > 0.0 {
                    let ql = tape.constant(rows_to_tensor(peer.model.logits_values(&qs, 256)?)?);
                    let l = ml_loss_struct(&mut tape, ql, logits, f)?;
                    ml = Some(mean_term(
                        &mut tape,
                        l,
                        qs.len(),
                        data.graph.num_entities(),
                    )?);
                }
                if f.beta_t > 0.0 && f.n > 0 {
                    let stream = SeedStream::new(cfg.seed)
                        .child("densify/m")
                        .index(peer.round as u64)
                        .index(step as u64);
                    let d = densify(&data.graph, p, peer.model, f, stream)?;
                    acc.add_densify(&d.stats);
                    if !d.queries.is_empty() {
                        let gq: Vec<(usize, usize)> =
                            d.queries.iter().map(|q| (q.head, q.relation)).collect();
                        let edges = EdgeIndex::new(&data.graph, Some(&d.overlay))?;
                        let (e2, r2) = p.encode(&mut tape, &edges)?;
                        let pl = p.score(&mut tape, e2, r2, &gq)?;
                        let ql =
                            tape.constant(rows_to_tensor(peer.model.logits_values(&gq, 256)?)?);
                        let l = vem_m_loss(&mut tape, ql, pl, f)?;
                        vem = Some(mean_term(
                            &mut tape,
                            l,
                            gq.len(),
                            data.graph.num_entities(),
                        )?);
                    }
                }
                combined_m_objective(&mut tape, sup, vem, ml, f)?
            }
        };
        let tv = finite(value(&tape, Some(total)), "loss", phase, epoch, step)?;
        acc.add(
            value(&tape, Some(sup)),
            value(&tape, vem),
            value(&tape, ml),
            tv,
        );
        tape.backward(total, &mut [p.params_mut()])?;
        opt.step(p.params_mut());
        p.params_mut().zero_grad();
    }
    Ok(acc.finish(phase, epoch, start))
}

/// One epoch over the text model; the E-step adds its weighted terms.
fn text_epoch(
    q: &mut TextModel<f32>,
    opt: &mut Adam<f32>,
    data: &TrainData,
    cfg: &TrainConfig,
    phase: Phase,
    epoch: usize,
    peer: Option<Peer<'_, StructModel<f32>>>,
) -> Result<EpochRecord> {
    let start = Instant::now();
    let mut acc = Accum::default();
    let smoothing = peer
        .as_ref()
        .map_or(cfg.label_smoothing, |f| f.cfg.label_smoothing);
    // the structure model is frozen for the whole E-step
    let base = match &peer {
        Some(peer) if peer.cfg.alpha_s > 0.0 => Some(peer.model.encode_values(data.edges())?),
        _ => None,
    };
    let batches = data.batches(
        cfg.batch_size,
        shuffle_stream(cfg.seed, ModelKind::Text, epoch),
    );
    for (step, idx) in batches.iter().enumerate() {
        let (qs, labels) = data.batch(idx);
        let mut tape = Tape::new();
        let logits = q.forward(&mut tape, &qs)?;
        let sup = supervised_loss(&mut tape, logits, &labels, smoothing)?;
        let (mut ml, mut vem) = (None, None);
        let total = match &peer {
            None => sup,
            Some(peer) => {
                let f = peer.cfg;
                if let Some(enc) = &base {
                    let pl = tape.constant(rows_to_tensor(peer.model.score_values(enc, &qs)?)?);
                    let l = ml_loss_text(&mut tape, pl, logits, f)?;
                    ml = Some(mean_term(
                        &mut tape,
                        l,
                        qs.len(),
                        data.graph.num_entities(),
                    )?);
                }
                if f.alpha_t > 0.0 && f.n > 0 {
                    let stream = SeedStream::new(cfg.seed)
                        .child("densify/e")
                        .index(peer.round as u64)
                        .index(step as u64);
                    let d = densify(&data.graph, peer.model, q, f, stream)?;
                    acc.add_densify(&d.stats);
                    if !d.queries.is_empty() {
                        let gq: Vec<(usize, usize)> =
                            d.queries.iter().map(|g| (g.head, g.relation)).collect();
                        let enc = peer
                            .model
                            .encode_values(&EdgeIndex::new(&data.graph, Some(&d.overlay))?)?;
                        let pl =
                            tape.constant(rows_to_tensor(peer.model.score_values(&enc, &gq)?)?);
                        let ql = q.forward(&mut tape, &gq)?;
                        let l = vem_e_loss(&mut tape, ql, pl, f)?;
                        vem = Some(mean_term(
                            &mut tape,
                            l,
                            gq.len(),
                            data.graph.num_entities(),
                        )?);
                    }
                }
                combined_e_objective(&mut tape, sup, vem, ml, f)?
            }
        };
        let tv = finite(value(&tape, Some(total)), "loss", phase, epoch, step)?;
        acc.add(
            value(&tape, Some(sup)),
            value(&tape, vem),
            value(&tape, ml),
            tv,
        );
        tape.backward(total, &mut [q.params_mut()])?;
        opt.step(q.params_mut());
        q.params_mut().zero_grad();
    }
    Ok(acc.finish(phase, epoch, start))
}

pub fn dev_metrics_structure(
    p: &StructModel<f32>,
    data: &TrainData,
    cfg: &TrainConfig,
    limit: Option<usize>,
) -> Result<Metrics> {
    let scorer = StructScorer::new(p, &data.graph)?;
    Ok(evaluate(
        &scorer,
        &data.graph,
        &data.split,
        Split::Dev,
        &cfg.eval_options(limit),
    )?
    .0)
}

pub fn dev_metrics_text(
    q: &TextModel<f32>,
    data: &TrainData,
    cfg: &TrainConfig,
    limit: Option<usize>,
) -> Result<Metrics> {
    Ok(evaluate(
        q,
        &data.graph,
        &data.split,
        Split::Dev,
        &cfg.eval_options(limit),
    )?
    .0)
}

fn due(cfg: &TrainConfig, epoch: usize, total: usize, has_dev: bool) -> bool {
    has_dev && cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == total)
}

/// Outcome of a single-model training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs: usize,
    /// Epoch whose parameters were kept (`None`: final parameters).
    pub best_epoch: Option<usize>,
    pub best_dev_mrr: Option<f64>,
}

enum Model<'a> {
    Structure(&'a mut StructModel<f32>),
    Text(&'a mut TextModel<f32>),
}

impl Model<'_> {
    fn params(&self) -> &ParamSet<f32> {
        match self {
            Model::Structure(m) => m.params(),
            Model::Text(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamSet<f32> {
        match self {
            Model::Structure(m) => m.params_mut(),
            Model::Text(m) => m.params_mut(),
        }
    }
}

fn train_single(
    mut model: Model<'_>,
    data: &TrainData,
    cfg: &TrainConfig,
    epochs: usize,
    phase: Phase,
    keep_best: bool,
    log: &mut RunLog,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let lr = match model {
        Model::Structure(_) => cfg.lr_struct,
        Model::Text(_) => cfg.lr_text,
    };
    let mut opt = Adam::new(cfg.adam(lr), model.params());
    let has_dev = !data.split.valid.is_empty();
    let mut best: Option<(usize, f64, ParamSet<f32>)> = None;
    for epoch in 0..epochs {
        let mut rec = match &mut model {
            Model::Structure(p) => structure_epoch(p, &mut opt, data, cfg, phase, epoch, None)?,
            Model::Text(q) => text_epoch(q, &mut opt, data, cfg, phase, epoch, None)?,
        };
        if due(cfg, epoch, epochs, has_dev) {
            let m = match &model {
                Model::Structure(p) => {
                    let m = dev_metrics_structure(p, data, cfg, cfg.dev_limit)?;
                    rec.dev_structure = Some(m.clone());
                    m
                }
                Model::Text(q) => {
                    let m = dev_metrics_text(q, data, cfg, cfg.dev_limit)?;
                    rec.dev_text = Some(m.clone());
                    m
                }
            };
            if keep_best && best.as_ref().map_or(true, |b| m.mrr > b.1) {
                best = Some((epoch, m.mrr, model.params().clone()));
            }
        }
        log.push(rec)?;
    }
    if let Some((epoch, mrr, params)) = best {
        model.params_mut().copy_values_from(&params)?;
        return Ok(TrainOutcome {
            epochs,
            best_epoch: Some(epoch),
            best_dev_mrr: Some(mrr),
        });
    }
    Ok(TrainOutcome {
        epochs,
        best_epoch: None,
        best_dev_mrr: None,
    })
}

/// Supervised pre-training; keeps the best-dev-MRR parameters.
pub fn pretrain_structure(
    p: &mut StructModel<f32>,
    data: &TrainData,
    cfg: &TrainConfig,
    log: &mut RunLog,
) -> Result<TrainOutcome> {
    train_single(
        Model::Structure(p),
        data,
        cfg,
        cfg.pretrain_epochs,
        Phase::PretrainStructure,
        true,
        log,
    )
}

pub fn pretrain_text(
    q: &mut TextModel<f32>,
    data: &TrainData,
    cfg: &TrainConfig,
    log: &mut RunLog,
) -> Result<TrainOutcome> {
    train_single(
        Model::Text(q),
        data,
        cfg,
        cfg.pretrain_epochs,
        Phase::PretrainText,
        true,
        log,
    )
}

/// Continued supervised training with a fresh optimizer; final parameters
/// are kept. Shuffles match the fusion loop's under the same seed.
pub fn continue_structure(
    p: &mut StructModel<f32>,
    data: &TrainData,
    cfg: &TrainConfig,
    epochs: usize,
    log: &mut RunLog,
) -> Result<TrainOutcome> {
    train_single(
        Model::Structure(p),
        data,
        cfg,
        epochs,
        Phase::ContinueStructure,
        false,
        log,
    )
}

pub fn continue_text(
    q: &mut TextModel<f32>,
    data: &TrainData,
    cfg: &TrainConfig,
    epochs: usize,
    log: &mut RunLog,
) -> Result<TrainOutcome> {
    train_single(
        Model::Text(q),
        data,
        cfg,
        epochs,
        Phase::ContinueText,
        false,
        log,
    )
}

/// E-step: one epoch updating the text model with the structure model
/// frozen (enforced by the shared borrow).
#[allow(clippy::too_many_arguments)]
pub fn e_step(
    p: &StructModel<f32>,
    q: &mut TextModel<f32>,
    opt: &mut Adam<f32>,
    data: &TrainData,
    fusion: &FusionConfig,
    cfg: &TrainConfig,
    round: usize,
) -> Result<EpochRecord> {
    let peer = Peer {
        model: p,
        cfg: fusion,
        round,
    };
    text_epoch(q, opt, data, cfg, Phase::EStep, round, Some(peer))
}

/// M-step: one epoch updating the structure model with the text model
/// frozen.
#[allow(clippy::too_many_arguments)]
pub fn m_step(
    q: &TextModel<f32>,
    p: &mut StructModel<f32>,
    opt: &mut Adam<f32>,
    data: &TrainData,
    fusion: &FusionConfig,
    cfg: &TrainConfig,
    round: usize,
) -> Result<EpochRecord> {
    let peer = Peer {
        model: q,
        cfg: fusion,
        round,
    };
    structure_epoch(p, opt, data, cfg, Phase::MStep, round, Some(peer))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuseOutcome {
    pub chosen: ModelKind,
    pub dev_structure: Metrics,
    pub dev_text: Metrics,
    pub rounds: usize,
}

impl FuseOutcome {
    pub fn chosen_mrr(&self) -> f64 {
        match self.chosen {
            ModelKind::Structure => self.dev_structure.mrr,
            ModelKind::Text => self.dev_text.mrr,
        }
    }
}

/// Alternates E-step and M-step for `cfg.fusion_epochs` rounds, then picks
/// the model with the better full-dev MRR.
pub fn fuse(
    p: &mut StructModel<f32>,
    q: &mut TextModel<f32>,
    data: &TrainData,
    fusion: &FusionConfig,
    cfg: &TrainConfig,
    log: &mut RunLog,
) -> Result<FuseOutcome> {
    cfg.validate()?;
    fusion.validate()?;
    let mut opt_q = Adam::new(cfg.adam(cfg.lr_text), q.params());
    let mut opt_p = Adam::new(cfg.adam(cfg.lr_struct), p.params());
    let has_dev = !data.split.valid.is_empty();
    let rounds = cfg.fusion_epochs;
    for round in 0..rounds {
        let e = e_step(p, q, &mut opt_q, data, fusion, cfg, round)?;
        log.push(e)?;
        let mut m = m_step(q, p, &mut opt_p, data, fusion, cfg, round)?;
        if due(cfg, round, rounds, has_dev) {
            m.dev_structure = Some(dev_metrics_structure(p, data, cfg, cfg.dev_limit)?);
            m.dev_text = Some(dev_metrics_text(q, data, cfg, cfg.dev_limit)?);
        }
        log.push(m)?;
    }
    let dev_structure = dev_metrics_structure(p, data, cfg, None)?;
    let dev_text = dev_metrics_text(q, data, cfg, None)?;
    let chosen = if dev_text.mrr > dev_structure.mrr {
        ModelKind::Text
    } else {
        ModelKind::Structure
    };
    log.push(EpochRecord {
        phase: Phase::Select,
        epoch: rounds,
        steps: 0,
        loss: LossParts::default(),
        densify: None,
        dev_structure: Some(dev_structure.clone()),
        dev_text: Some(dev_text.clone()),
        wall_clock_s: 0.0,
        step_losses: Vec::new(),
    })?;
    Ok(FuseOutcome {
        chosen,
        dev_structure,
        dev_text,
        rounds,
    })
}

/// Structure checkpoint: parameters plus config in the manifest.
pub fn save_structure(stem: &Path, p: &StructModel<f32>, meta: serde_json::Value) -> Result<()> {
    let meta = serde_json::json!({
        "kind": ModelKind::Structure,
        "config": p.config(),
        "extra": meta,
    });
    checkpoint::save(stem, p.params(), meta)?;
    Ok(())
}

pub fn load_structure(stem: &Path) -> Result<(StructModel<f32>, serde_json::Value)> {
    let (params, manifest) = checkpoint::load::<f32>(stem)?;
    expect_kind(&manifest.meta, ModelKind::Structure)?;
    let cfg: StructConfig = serde_json::from_value(manifest.meta["config"].clone())?;
    Ok((
        StructModel::from_params(cfg, params)?,
        manifest.meta["extra"].clone(),
    ))
}

fn vocab_path(stem: &Path) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".vocab.tsv");
    PathBuf::from(s)
}

/// Text checkpoint: parameters, config and the vocabulary beside them.
pub fn save_text(stem: &Path, q: &TextModel<f32>, meta: serde_json::Value) -> Result<()> {
    let meta = serde_json::json!({
        "kind": ModelKind::Text,
        "config": q.config(),
        "extra": meta,
    });
    checkpoint::save(stem, q.params(), meta)?;
    q.vocab().save(&vocab_path(stem))?;
    Ok(())
}

pub fn load_text(stem: &Path, text: &TextStore) -> Result<(TextModel<f32>, serde_json::Value)> {
    let (params, manifest) = checkpoint::load::<f32>(stem)?;
    expect_kind(&manifest.meta, ModelKind::Text)?;
    let cfg: TextConfig = serde_json::from_value(manifest.meta["config"].clone())?;
    let vocab = Arc::new(Vocab::load(&vocab_path(stem))?);
    Ok((
        TextModel::from_params(cfg, params, vocab, text)?,
        manifest.meta["extra"].clone(),
    ))
}

fn expect_kind(meta: &serde_json::Value, kind: ModelKind) -> Result<()> {
    let found: ModelKind = serde_json::from_value(meta["kind"].clone())
        .map_err(|_| Error::Config("checkpoint manifest has no model kind".into()))?;
    if found != kind {
        return Err(Error::Config(format!(
            "checkpoint holds a {found:?} model, expected {kind:?}"
        )));
    }
    Ok(())
}

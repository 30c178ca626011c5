//! Structure model: relational message passing with composition operators
//! and a diagonal bilinear decoder over all entities.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use vemfuse_diffmath::{ParamId, ParamSet, Scalar, Tape, Tensor, Var};

use crate::densify::GraphOverlay;
use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    #[default]
    Subtract,
    Multiply,
    CircularCorrelation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructConfig {
    pub dim: usize,
    pub layers: usize,
    pub composition: Composition,
    pub activation: Activation,
}

impl Default for StructConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 1,
            composition: Composition::Subtract,
            activation: Activation::Tanh,
        }
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    w_in: ParamId,
    w_out: ParamId,
    w_self: ParamId,
    w_rel: ParamId,
}

/// Parameters and configuration of the structure model.
#[derive(Clone, Debug)]
pub struct StructModel<T: Scalar> {
    config: StructConfig,
    params: ParamSet<T>,
    entity: ParamId,
    relation: ParamId,
    layers: Vec<LayerIds>,
}

/// Edge list of a graph plus optional overlay, with per-direction mean
/// coefficients.
#[derive(Clone, Debug)]
pub struct EdgeIndex {
    num_entities: usize,
    heads: Arc<[usize]>,
    relations: Arc<[usize]>,
    tails: Arc<[usize]>,
    /// `1 / in-degree(tail)` per edge.
    in_coef: Vec<f64>,
    /// `1 / out-degree(head)` per edge.
    out_coef: Vec<f64>,
}

impl EdgeIndex {
    pub fn new(graph: &KnowledgeGraph, overlay: Option<&GraphOverlay>) -> Result<Self> {
        let ne = graph.num_entities();
        let nr = graph.num_relations();
        let extra = overlay.map(|o| o.edges.as_slice()).unwrap_or(&[]);
        let mut heads = Vec::with_capacity(graph.triples().len() + extra.len());
        let mut relations = Vec::with_capacity(heads.capacity());
        let mut tails = Vec::with_capacity(heads.capacity());
        for t in graph.triples().iter().chain(extra) {
            for (what, id, size) in [
                ("entity", t.head, ne),
                ("entity", t.tail, ne),
                ("relation", t.relation, nr),
            ] {
                if id >= size {
                    return Err(Error::OutOfRange { what, id, size });
                }
            }
            heads.push(t.head);
            relations.push(t.relation);
            tails.push(t.tail);
        }
        let mut indeg = vec![0usize; ne];
        let mut outdeg = vec![0usize; ne];
        for (&h, &t) in heads.iter().zip(&tails) {
            outdeg[h] += 1;
            indeg[t] += 1;
        }
        let in_coef = tails.iter().map(|&t| 1.0 / indeg[t] as f64).collect();
        let out_coef = heads.iter().map(|&h| 1.0 / outdeg[h] as f64).collect();
        Ok(Self {
            num_entities: ne,
            heads: heads.into(),
            relations: relations.into(),
            tails: tails.into(),
            in_coef,
            out_coef,
        })
    }

    pub fn num_edges(&self) -> usize {
        self.heads.len()
    }
}

/// Encoded entity and relation representations, detached from any tape.
#[derive(Clone, Debug)]
pub struct Encoded<T> {
    pub entities: Tensor<T>,
    pub relations: Tensor<T>,
}

impl<T: Scalar> StructModel<T> {
    pub fn new<R: Rng + ?Sized>(
        config: StructConfig,
        num_entities: usize,
        num_relations: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if config.dim == 0 || config.layers == 0 {
            return Err(Error::Config(
                "structure dim and layers must be positive".into(),
            ));
        }
        let d = config.dim;
        let mut params = ParamSet::new();
        let entity = params.add("entity_emb", Tensor::xavier_uniform(num_entities, d, rng))?;
        let relation = params.add(
            "relation_emb",
            Tensor::xavier_uniform(num_relations, d, rng),
        )?;
        let mut layers = Vec::new();
        for l in 0..config.layers {
            let mut w = |name: &str, rng: &mut R| {
                params.add(
                    format!("layer{l}.{name}"),
                    Tensor::xavier_uniform(d, d, rng),
                )
            };
            layers.push(LayerIds {
                w_in: w("w_in", rng)?,
                w_out: w("w_out", rng)?,
                w_self: w("w_self", rng)?,
                w_rel: w("w_rel", rng)?,
            });
        }
        Ok(Self {
            config,
            params,
            entity,
            relation,
            layers,
        })
    }

    /// Rebuilds a model around loaded parameters (e.g. from a checkpoint).
    pub fn from_params(config: StructConfig, params: ParamSet<T>) -> Result<Self> {
        let get = |name: String| {
            params
                .lookup(&name)
                .ok_or_else(|| Error::Config(format!("missing structure parameter {name}")))
        };
        let entity = get("entity_emb".into())?;
        let relation = get("relation_emb".into())?;
        let layers = (0..config.layers)
            .map(|l| {
                Ok(LayerIds {
                    w_in: get(format!("layer{l}.w_in"))?,
                    w_out: get(format!("layer{l}.w_out"))?,
                    w_self: get(format!("layer{l}.w_self"))?,
                    w_rel: get(format!("layer{l}.w_rel"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let d = params.value(entity).cols();
        if d != config.dim || params.value(relation).cols() != d {
            return Err(Error::Config(format!(
                "structure dim {} does not match parameters ({d})",
                config.dim
            )));
        }
        Ok(Self {
            config,
            params,
            entity,
            relation,
            layers,
        })
    }

    pub fn config(&self) -> &StructConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn num_entities(&self) -> usize {
        self.params.value(self.entity).rows()
    }

    pub fn num_relations(&self) -> usize {
        self.params.value(self.relation).rows()
    }

    pub fn cast<U: Scalar>(&self) -> StructModel<U> {
        StructModel {
            config: self.config.clone(),
            params: self.params.cast(),
            entity: self.entity,
            relation: self.relation,
            layers: self.layers.clone(),
        }
    }

    /// Input-layer relation embedding row.
    pub fn relation_embedding(&self, r: usize) -> Result<&[T]> {
        let emb = self.params.value(self.relation);
        if r >= emb.rows() {
            return Err(Error::OutOfRange {
                what: "relation",
                id: r,
                size: emb.rows(),
            });
        }
        Ok(emb.row(r))
    }

    pub fn relation_embeddings(&self) -> &Tensor<T> {
        self.params.value(self.relation)
    }

    fn compose(&self, tape: &mut Tape<T>, u: Var, r: Var) -> Result<Var> {
        Ok(match self.config.composition {
            Composition::Subtract => tape.sub(u, r)?,
            Composition::Multiply => tape.mul(u, r)?,
            Composition::CircularCorrelation => tape.circ_corr(u, r)?,
        })
    }

    /// Message passing over `edges`; returns `(|E| × d, |R| × d)` reprs.
    pub fn encode(&self, tape: &mut Tape<T>, edges: &EdgeIndex) -> Result<(Var, Var)> {
        if edges.num_entities != self.num_entities() {
            return Err(Error::Misaligned(edges.num_entities, self.num_entities()));
        }
        let mut ent = tape.param(&self.params, self.entity);
        let mut rel = tape.param(&self.params, self.relation);
        let ne = edges.num_entities;
        let in_coef: Arc<[T]> = edges.in_coef.iter().map(|&c| T::of(c)).collect();
        let out_coef: Arc<[T]> = edges.out_coef.iter().map(|&c| T::of(c)).collect();
        for layer in &self.layers {
            let w_in = tape.param(&self.params, layer.w_in);
            let w_out = tape.param(&self.params, layer.w_out);
            let w_self = tape.param(&self.params, layer.w_self);
            let w_rel = tape.param(&self.params, layer.w_rel);
            let mut total = tape.matmul(ent, w_self)?;
            if edges.num_edges() > 0 {
                let er = tape.gather_rows(rel, Arc::clone(&edges.relations))?;
                // messages into the tail from the head
                let src = tape.gather_rows(ent, Arc::clone(&edges.heads))?;
                let msg = self.compose(tape, src, er)?;
                let msg = tape.scale_rows(msg, Arc::clone(&in_coef))?;
                let agg = tape.scatter_add_rows(msg, Arc::clone(&edges.tails), ne)?;
                let agg = tape.matmul(agg, w_in)?;
                total = tape.add(total, agg)?;
                // messages into the head from the tail
                let src = tape.gather_rows(ent, Arc::clone(&edges.tails))?;
                let msg = self.compose(tape, src, er)?;
                let msg = tape.scale_rows(msg, Arc::clone(&out_coef))?;
                let agg = tape.scatter_add_rows(msg, Arc::clone(&edges.heads), ne)?;
                let agg = tape.matmul(agg, w_out)?;
                total = tape.add(total, agg)?;
            }
            ent = match self.config.activation {
                Activation::Tanh => tape.tanh(total)?,
                Activation::Identity => total,
            };
            rel = tape.matmul(rel, w_rel)?;
        }
        Ok((ent, rel))
    }

    /// Logits `(e_h ⊙ e_r) · e_t` for every query against every entity.
    pub fn score(
        &self,
        tape: &mut Tape<T>,
        ent: Var,
        rel: Var,
        queries: &[(usize, usize)],
    ) -> Result<Var> {
        let hs: Vec<usize> = queries.iter().map(|q| q.0).collect();
        let rs: Vec<usize> = queries.iter().map(|q| q.1).collect();
        self.check_queries(queries)?;
        let eh = tape.gather_rows(ent, hs)?;
        let er = tape.gather_rows(rel, rs)?;
        let x = tape.mul(eh, er)?;
        Ok(tape.matmul_nt(x, ent)?)
    }

    fn check_queries(&self, queries: &[(usize, usize)]) -> Result<()> {
        let (ne, nr) = (self.num_entities(), self.num_relations());
        for &(h, r) in queries {
            if h >= ne {
                return Err(Error::OutOfRange {
                    what: "entity",
                    id: h,
                    size: ne,
                });
            }
            if r >= nr {
                return Err(Error::OutOfRange {
                    what: "relation",
                    id: r,
                    size: nr,
                });
            }
        }
        Ok(())
    }

    /// Encodes without recording gradients.
    pub fn encode_values(&self, edges: &EdgeIndex) -> Result<Encoded<T>> {
        let mut tape = Tape::new();
        let (e, r) = self.encode(&mut tape, edges)?;
        Ok(Encoded {
            entities: tape.value(e).clone(),
            relations: tape.value(r).clone(),
        })
    }

    /// Logit rows for `queries` from cached representations.
    pub fn score_values(
        &self,
        enc: &Encoded<T>,
        queries: &[(usize, usize)],
    ) -> Result<Vec<Vec<T>>> {
        self.check_queries(queries)?;
        let d = self.config.dim;
        let ne = enc.entities.rows();
        let mut out = Vec::with_capacity(queries.len());
        let mut x = vec![T::zero(); d];
        for &(h, r) in queries {
            let (eh, er) = (enc.entities.row(h), enc.relations.row(r));
            for k in 0..d {
                x[k] = eh[k] * er[k];
            }
            let row = (0..ne)
                .map(|t| {
                    let et = enc.entities.row(t);
                    let mut s = T::zero();
                    for k in 0..d {
                        s += x[k] * et[k];
                    }
                    s
                })
                .collect();
            out.push(row);
        }
        Ok(out)
    }

    /// Tempered predictive distributions `p_θ(· | h, r)` under the graph
    /// plus optional overlay.
    pub fn predict_p(
        &self,
        graph: &KnowledgeGraph,
        overlay: Option<&GraphOverlay>,
        queries: &[(usize, usize)],
        temperature: T,
    ) -> Result<Vec<Vec<T>>> {
        let enc = self.encode_values(&EdgeIndex::new(graph, overlay)?)?;
        self.score_values(&enc, queries)?
            .iter()
            .map(|l| Ok(vemfuse_diffmath::dist::softmax_t(l, temperature)?))
            .collect()
    }
}

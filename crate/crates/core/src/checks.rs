//! Numerical self-checks on toy models at 64-bit: finite-difference
//! gradients of every training objective and bit-level teacher detachment
//! of the distillation terms.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use vemfuse_diffmath::gradcheck::{finite_diff_check, GradCheckOptions};
use vemfuse_diffmath::{ParamSet, Tape, Var};

use crate::densify::GraphOverlay;
use crate::error::Result;
use crate::kg::{augment_inverse, Interner, KnowledgeGraph, TextStore, Triple, TripleSplit};
use crate::losses::{
    combined_e_objective, combined_m_objective, ml_loss_struct, ml_loss_text, supervised_loss,
    vem_e_loss, vem_m_loss, FusionConfig,
};
use crate::rng::SeedStream;
use crate::structure::{EdgeIndex, StructConfig, StructModel};
use crate::text::{build_vocab, Pooling, TextConfig, TextModel};

/// Small augmented graph with both models at 64-bit and a fixed overlay.
pub struct Toy {
    pub graph: KnowledgeGraph,
    pub p: StructModel<f64>,
    pub q: TextModel<f64>,
    pub queries: Vec<(usize, usize)>,
    pub labels: Vec<Vec<usize>>,
    pub generated: Vec<(usize, usize)>,
    pub overlay: GraphOverlay,
    pub fusion: FusionConfig,
}

pub fn toy_graph() -> Result<KnowledgeGraph> {
    let mut ents = Interner::default();
    let words = [
        "red fox",
        "brown dog",
        "lazy cat",
        "quick fox den",
        "old barn",
        "green field",
    ];
    for w in words {
        ents.intern(&w.replace(' ', "_"));
    }
    let mut rels = Interner::default();
    rels.intern("chases");
    rels.intern("lives_near");
    let triples = [
        (0, 0, 1),
        (1, 0, 2),
        (2, 1, 3),
        (3, 1, 4),
        (0, 1, 5),
        (4, 0, 5),
        (0, 0, 2),
    ]
    .map(|(h, r, t)| Triple::new(h, r, t));
    let text = TextStore {
        entity_text: words.iter().map(|w| w.to_string()).collect(),
        relation_text: vec!["chases".into(), "lives near".into()],
        max_len: 16,
    };
    let g = KnowledgeGraph::new(ents, rels, &triples, text)?;
    let split = TripleSplit::new(triples.to_vec(), vec![], vec![])?;
    Ok(augment_inverse(&g, &split)?.0)
}

impl Toy {
    pub fn new(text: TextConfig, seed: u64) -> Result<Self> {
        let graph = toy_graph()?;
        let s = SeedStream::new(seed).child("toy");
        let p = StructModel::<f64>::new(
            StructConfig {
                dim: 4,
                ..StructConfig::default()
            },
            graph.num_entities(),
            graph.num_relations(),
            &mut s.rng("structure"),
        )?;
        let vocab = Arc::new(build_vocab(graph.text(), 1));
        let q = TextModel::<f64>::new(
            text,
            vocab,
            graph.text(),
            graph.num_entities(),
            &mut s.rng("text"),
        )?;
        let queries = vec![(0, 0), (1, 0), (2, 1), (5, 3)];
        let labels = queries
            .iter()
            .map(|&(h, r)| graph.tails(h, r).to_vec())
            .collect();
        // (5, chases, 2) and its mirror are absent from the graph
        let overlay = GraphOverlay {
            edges: vec![Triple::new(5, 0, 2), Triple::new(2, 2, 5)],
            confidence: vec![0.7, 0.7],
        };
        let fusion = FusionConfig {
            alpha_t: 0.7,
            alpha_s: 1.3,
            beta_t: 2.0,
            beta_s: 0.4,
            tx_vem_s: 1.5,
            tx_vem_t: 2.0,
            st_vem_s: 0.8,
            st_vem_t: 1.2,
            tx_ml_s: 0.9,
            tx_ml_t: 3.0,
            st_ml_s: 1.1,
            st_ml_t: 0.6,
            ..FusionConfig::default()
        };
        Ok(Self {
            graph,
            p,
            q,
            queries,
            labels,
            generated: vec![(5, 0), (3, 0)],
            overlay,
            fusion,
        })
    }

    fn label_refs(&self) -> Vec<&[usize]> {
        self.labels.iter().map(|l| l.as_slice()).collect()
    }

    fn p_logits(
        &self,
        tape: &mut Tape<f64>,
        p: &StructModel<f64>,
        overlay: bool,
        qs: &[(usize, usize)],
    ) -> Result<Var> {
        let edges = EdgeIndex::new(&self.graph, overlay.then_some(&self.overlay))?;
        let (e, r) = p.encode(tape, &edges)?;
        p.score(tape, e, r, qs)
    }

    fn rebuild_p(&self, ps: &ParamSet<f64>) -> Result<StructModel<f64>> {
        StructModel::from_params(self.p.config().clone(), ps.alias())
    }

    fn rebuild_q(&self, ps: &ParamSet<f64>) -> Result<TextModel<f64>> {
        TextModel::from_params(
            self.q.config().clone(),
            ps.alias(),
            Arc::clone(self.q.vocab()),
            self.graph.text(),
        )
    }

    fn const_p(&self, tape: &mut Tape<f64>, overlay: bool, qs: &[(usize, usize)]) -> Result<Var> {
        let mut t = Tape::new();
        let v = self.p_logits(&mut t, &self.p, overlay, qs)?;
        Ok(tape.constant(t.value(v).clone()))
    }

    fn const_q(&self, tape: &mut Tape<f64>, qs: &[(usize, usize)]) -> Result<Var> {
        let mut t = Tape::new();
        let v = self.q.forward(&mut t, qs)?;
        Ok(tape.constant(t.value(v).clone()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckLine {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Structure-side objectives; the student is `p`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum StructObjective {
    Supervised,
    MlStruct,
    VemM,
    CombinedM,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TextObjective {
    Supervised,
    MlText,
    VemE,
    CombinedE,
}

fn struct_loss(
    toy: &Toy,
    tape: &mut Tape<f64>,
    p: &StructModel<f64>,
    which: StructObjective,
) -> Result<Var> {
    let f = &toy.fusion;
    let labels = toy.label_refs();
    let logits = toy.p_logits(tape, p, false, &toy.queries)?;
    let ml = |tape: &mut Tape<f64>| -> Result<Var> {
        let ql = toy.const_q(tape, &toy.queries)?;
        ml_loss_struct(tape, ql, logits, f)
    };
    let vem = |tape: &mut Tape<f64>| -> Result<Var> {
        let pl = toy.p_logits(tape, p, true, &toy.generated)?;
        let ql = toy.const_q(tape, &toy.generated)?;
        vem_m_loss(tape, ql, pl, f)
    };
    Ok(match which {
        StructObjective::Supervised => supervised_loss(tape, logits, &labels, 0.1)?,
        StructObjective::MlStruct => ml(tape)?,
        StructObjective::VemM => vem(tape)?,
        StructObjective::CombinedM => {
            let s = supervised_loss(tape, logits, &labels, 0.1)?;
            let v = vem(tape)?;
            let m = ml(tape)?;
            combined_m_objective(tape, s, Some(v), Some(m), f)?
        }
    })
}

fn text_loss(
    toy: &Toy,
    tape: &mut Tape<f64>,
    q: &TextModel<f64>,
    which: TextObjective,
) -> Result<Var> {
    let f = &toy.fusion;
    let labels = toy.label_refs();
    let logits = q.forward(tape, &toy.queries)?;
    let ml = |tape: &mut Tape<f64>| -> Result<Var> {
        let pl = toy.const_p(tape, false, &toy.queries)?;
        ml_loss_text(tape, pl, logits, f)
    };
    let vem = |tape: &mut Tape<f64>| -> Result<Var> {
        let ql = q.forward(tape, &toy.generated)?;
        let pl = toy.const_p(tape, true, &toy.generated)?;
        vem_e_loss(tape, ql, pl, f)
    };
    Ok(match which {
        TextObjective::Supervised => supervised_loss(tape, logits, &labels, 0.1)?,
        TextObjective::MlText => ml(tape)?,
        TextObjective::VemE => vem(tape)?,
        TextObjective::CombinedE => {
            let s = supervised_loss(tape, logits, &labels, 0.1)?;
            let v = vem(tape)?;
            let m = ml(tape)?;
            combined_e_objective(tape, s, Some(v), Some(m), f)?
        }
    })
}

/// Finite-difference check of every objective against its student's
/// parameters, for a CLS/attention and a mean-pooled text model.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckLine>> {
    let opts = GradCheckOptions {
        seed,
        coords_per_tensor: 16,
        ..GradCheckOptions::default()
    };
    let mut out = Vec::new();
    let mut push = |name: String, r: vemfuse_diffmath::gradcheck::GradCheckReport| {
        out.push(GradCheckLine {
            name,
            max_rel_error: r.max_rel_error,
            coords_checked: r.coords_checked,
        })
    };
    let variants = [
        (
            "cls+attention",
            TextConfig {
                dim: 4,
                max_len: 16,
                ..TextConfig::default()
            },
        ),
        (
            "mean",
            TextConfig {
                dim: 4,
                max_len: 16,
                attention: false,
                pooling: Pooling::Mean,
                ..TextConfig::default()
            },
        ),
    ];
    for (vi, (tag, cfg)) in variants.into_iter().enumerate() {
        let toy = Toy::new(cfg, seed)?;
        if vi == 0 {
            for (name, which) in [
                ("supervised_loss/structure", StructObjective::Supervised),
                ("ml_loss_struct", StructObjective::MlStruct),
                ("vem_m_loss", StructObjective::VemM),
                ("combined_m_objective", StructObjective::CombinedM),
            ] {
                let mut ps = toy.p.params().clone();
                let r = finite_diff_check(&mut ps, &opts, |tape, ps| {
                    let p = toy.rebuild_p(ps).map_err(to_diff)?;
                    struct_loss(&toy, tape, &p, which).map_err(to_diff)
                })?;
                push(name.to_string(), r);
            }
        }
        for (name, which) in [
            ("supervised_loss/text", TextObjective::Supervised),
            ("ml_loss_text", TextObjective::MlText),
            ("vem_e_loss", TextObjective::VemE),
            ("combined_e_objective", TextObjective::CombinedE),
        ] {
            let mut ps = toy.q.params().clone();
            let r = finite_diff_check(&mut ps, &opts, |tape, ps| {
                let q = toy.rebuild_q(ps).map_err(to_diff)?;
                text_loss(&toy, tape, &q, which).map_err(to_diff)
            })?;
            push(format!("{name} ({tag})"), r);
        }
    }
    Ok(out)
}

fn to_diff(e: crate::Error) -> vemfuse_diffmath::DiffError {
    match e {
        crate::Error::Diff(d) => d,
        other => vemfuse_diffmath::DiffError::InvalidArgument(other.to_string()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetachLine {
    pub name: String,
    /// Teacher-side gradient entries that are not bit-identical to `+0.0`.
    pub teacher_nonzero: usize,
    /// Largest student gradient magnitude; positive when the student is
    /// actually trained by the term.
    pub student_max_grad: f64,
}

fn nonzero_bits(ps: &ParamSet<f64>) -> usize {
    ps.ids()
        .map(|id| {
            ps.grad(id)
                .data()
                .iter()
                .filter(|g| g.to_bits() != 0)
                .count()
        })
        .sum()
}

fn max_abs_grad(ps: &ParamSet<f64>) -> f64 {
    ps.ids()
        .flat_map(|id| ps.grad(id).data().to_vec())
        .fold(0.0, |m, g| m.max(g.abs()))
}

/// Builds every distillation term with the teacher's parameters live on
/// the tape, back-propagates into both models and counts teacher gradient
/// entries that are not exactly zero.
pub fn detachment_suite(seed: u64) -> Result<Vec<DetachLine>> {
    let mut toy = Toy::new(
        TextConfig {
            dim: 4,
            max_len: 16,
            ..TextConfig::default()
        },
        seed,
    )?;
    let f = toy.fusion.clone();
    let mut out = Vec::new();
    type Build = fn(&Toy, &mut Tape<f64>, &FusionConfig) -> Result<Var>;
    let text_students: [(&str, Build); 2] = [
        ("ml_loss_text", |toy, tape, f| {
            let pl = toy.p_logits(tape, &toy.p, false, &toy.queries)?;
            let ql = toy.q.forward(tape, &toy.queries)?;
            ml_loss_text(tape, pl, ql, f)
        }),
        ("vem_e_loss", |toy, tape, f| {
            let pl = toy.p_logits(tape, &toy.p, true, &toy.generated)?;
            let ql = toy.q.forward(tape, &toy.generated)?;
            vem_e_loss(tape, ql, pl, f)
        }),
    ];
    let struct_students: [(&str, Build); 2] = [
        ("ml_loss_struct", |toy, tape, f| {
            let ql = toy.q.forward(tape, &toy.queries)?;
            let pl = toy.p_logits(tape, &toy.p, false, &toy.queries)?;
            ml_loss_struct(tape, ql, pl, f)
        }),
        ("vem_m_loss", |toy, tape, f| {
            let ql = toy.q.forward(tape, &toy.generated)?;
            let pl = toy.p_logits(tape, &toy.p, true, &toy.generated)?;
            vem_m_loss(tape, ql, pl, f)
        }),
    ];
    for (students_are_text, list) in [(true, text_students), (false, struct_students)] {
        for (name, build) in list {
            toy.p.params_mut().zero_grad();
            toy.q.params_mut().zero_grad();
            let mut tape = Tape::new();
            let loss = build(&toy, &mut tape, &f)?;
            let mut pp = std::mem::take(toy.p.params_mut());
            let mut qp = std::mem::take(toy.q.params_mut());
            tape.backward(loss, &mut [&mut pp, &mut qp])?;
            let (teacher, student) = if students_are_text {
                (&pp, &qp)
            } else {
                (&qp, &pp)
            };
            out.push(DetachLine {
                name: name.to_string(),
                teacher_nonzero: nonzero_bits(teacher),
                student_max_grad: max_abs_grad(student),
            });
            *toy.p.params_mut() = pp;
            *toy.q.params_mut() = qp;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_objective_passes_gradcheck() {
        let lines = gradient_suite(0).unwrap();
        assert_eq!(lines.len(), 12);
        for l in &lines {
            assert!(l.max_rel_error < 1e-4, "{l:?}");
            assert!(l.coords_checked > 0);
        }
    }

    #[test]
    fn teachers_receive_no_gradient() {
        for l in detachment_suite(0).unwrap() {
            assert_eq!(l.teacher_nonzero, 0, "{l:?}");
            assert!(l.student_max_grad > 0.0, "{l:?}");
        }
    }
}

//! Exact-enumeration check of `log p(Y_L) = ELBO(q) + KL(q ‖ p(Y_U | Y_L))`.
//!
//! The joint is `p(Y_U) · p(Y_L | Y_U)` where each unobserved label is
//! predicted by the structure model on the base graph and the observed
//! labels are predicted with the unobserved assignment added as overlay
//! edges. `q(Y_U)` is the mean-field product of text-model predictions.

use serde::{Deserialize, Serialize};
use vemfuse_diffmath::dist;

use crate::densify::GraphOverlay;
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, Triple};
use crate::structure::StructModel;
use crate::text::TextModel;

pub const MAX_CONFIGURATIONS: u128 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub log_likelihood: f64,
    pub elbo: f64,
    pub kl: f64,
    pub residual: f64,
    /// Largest `|KL(q‖p) + H(q) + E_q[ln p]|` over unobserved queries.
    pub identity_error: f64,
    pub configurations: usize,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-likelihood, ELBO and posterior KL from the log joint of every
/// configuration and the variational distribution over configurations.
/// Also returns the exact posterior.
pub fn elbo_from_joint(log_joint: &[f64], q: &[f64]) -> Result<(ElboReport, Vec<f64>)> {
    if log_joint.len() != q.len() {
        return Err(Error::Misaligned(log_joint.len(), q.len()));
    }
    let ll = log_sum_exp(log_joint);
    let posterior: Vec<f64> = log_joint.iter().map(|l| (l - ll).exp()).collect();
    let mut elbo = 0.0;
    let mut kl = 0.0;
    for (&lj, &qi) in log_joint.iter().zip(q) {
        if qi > 0.0 {
            elbo += qi * (lj - qi.ln());
            kl += qi * (qi.ln() - (lj - ll));
        }
    }
    let report = ElboReport {
        log_likelihood: ll,
        elbo,
        kl,
        residual: (ll - (elbo + kl)).abs(),
        identity_error: 0.0,
        configurations: log_joint.len(),
    };
    Ok((report, posterior))
}

fn overlay_for(
    graph: &KnowledgeGraph,
    unobserved: &[(usize, usize)],
    labels: &[usize],
) -> GraphOverlay {
    let mut edges = Vec::new();
    for (&(h, r), &y) in unobserved.iter().zip(labels) {
        let t = Triple::new(h, r, y);
        if !graph.contains(&t) {
            edges.push(t);
        }
        if graph.is_augmented() {
            let inv = Triple::new(y, graph.inverse(r), h);
            if !graph.contains(&inv) {
                edges.push(inv);
            }
        }
    }
    edges.sort();
    edges.dedup();
    let confidence = vec![1.0; edges.len()];
    GraphOverlay { edges, confidence }
}

/// Runs the decomposition on `graph` with `observed` labelled queries and
/// `unobserved` queries whose labels range over all entities.
pub fn elbo_diagnostic(
    graph: &KnowledgeGraph,
    observed: &[Triple],
    unobserved: &[(usize, usize)],
    p_model: &StructModel<f64>,
    q_model: &TextModel<f64>,
) -> Result<ElboReport> {
    let ne = graph.num_entities();
    let k = unobserved.len();
    let total = (ne as u128).checked_pow(k as u32).unwrap_or(u128::MAX);
    if total > MAX_CONFIGURATIONS {
        return Err(Error::EnumerationTooLarge(total, MAX_CONFIGURATIONS));
    }
    let total = total as usize;
    let prior = p_model.predict_p(graph, None, unobserved, 1.0)?;
    let q = q_model.predict_q(unobserved, 1.0)?;
    let obs_queries: Vec<(usize, usize)> = observed.iter().map(|t| (t.head, t.relation)).collect();

    let mut log_joint = Vec::with_capacity(total);
    let mut q_joint = Vec::with_capacity(total);
    let mut labels = vec![0usize; k];
    for c in 0..total {
        let mut rest = c;
        for l in labels.iter_mut() {
            *l = rest % ne;
            rest /= ne;
        }
        let mut lj = 0.0;
        let mut qj = 1.0;
        for (i, &y) in labels.iter().enumerate() {
            lj += prior[i][y].ln();
            qj *= q[i][y];
        }
        if !observed.is_empty() {
            let ov = overlay_for(graph, unobserved, &labels);
            let cond = p_model.predict_p(graph, Some(&ov), &obs_queries, 1.0)?;
            for (row, t) in cond.iter().zip(observed) {
                lj += row[t.tail].ln();
            }
        }
        log_joint.push(lj);
        q_joint.push(qj);
    }
    let (mut report, _) = elbo_from_joint(&log_joint, &q_joint)?;
    for (qi, pi) in q.iter().zip(&prior) {
        let err = dist::kl_div(qi, pi)? + dist::entropy(qi)? + dist::expected_log(qi, pi)?;
        report.identity_error = report.identity_error.max(err.abs());
    }
    Ok(report)
}

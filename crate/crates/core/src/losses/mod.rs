//! Training objectives: supervised multi-label loss, mutual-learning KL
//! terms, the variational-EM terms over generated queries and the weighted
//! E/M objectives.
//!
//! Every KL-style loss returns the sum of its per-query terms; callers
//! divide by the query count where a mean is wanted. Teacher logits are
//! detached on the tape, so no gradient can reach the teacher's parameters.

mod elbo;

use std::path::Path;

use serde::{Deserialize, Serialize};
use vemfuse_diffmath::{Scalar, Tape, Tensor, Var};

use crate::error::{Error, Result};

pub use elbo::{elbo_diagnostic, elbo_from_joint, ElboReport, MAX_CONFIGURATIONS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationSelection {
    /// Highest max-cosine relation, ties to the smallest id.
    #[default]
    Argmax,
    /// Sample proportionally to `exp(score / selection_temperature)`.
    Softmax,
}

/// Trade-off weights, temperatures and densification sizes of the joint
/// objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub alpha_t: f64,
    pub alpha_s: f64,
    pub beta_t: f64,
    pub beta_s: f64,
    /// Text student in the E-step term.
    pub tx_vem_s: f64,
    /// Text teacher in the M-step term; also tempers neighbour labelling.
    pub tx_vem_t: f64,
    /// Structure student in the M-step term.
    pub st_vem_s: f64,
    /// Structure teacher in the E-step term.
    pub st_vem_t: f64,
    pub tx_ml_s: f64,
    pub tx_ml_t: f64,
    pub st_ml_s: f64,
    pub st_ml_t: f64,
    /// Generated unobserved queries per batch.
    #[serde(rename = "N")]
    pub n: usize,
    /// Neighbour triples sampled per generated query.
    #[serde(rename = "M")]
    pub m: usize,
    pub label_smoothing: f64,
    /// Neighbour labels are drawn from this many top text predictions.
    pub label_top_k: usize,
    pub relation_selection: RelationSelection,
    pub selection_temperature: f64,
    /// Multiply distillation terms by the squared student temperature.
    pub t2_scaling: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha_t: 1.0,
            alpha_s: 1.0,
            beta_t: 1.0,
            beta_s: 1.0,
            tx_vem_s: 1.0,
            tx_vem_t: 1.0,
            st_vem_s: 1.0,
            st_vem_t: 1.0,
            tx_ml_s: 1.0,
            tx_ml_t: 1.0,
            st_ml_s: 1.0,
            st_ml_t: 1.0,
            n: 32,
            m: 8,
            label_smoothing: 0.1,
            label_top_k: 10,
            relation_selection: RelationSelection::Argmax,
            selection_temperature: 0.1,
            t2_scaling: false,
        }
    }
}

impl FusionConfig {
    pub fn fb15k237_20() -> Self {
        Self {
            m: 4,
            beta_t: 6.0,
            beta_s: 4.0,
            ..Self::default()
        }
    }

    pub fn wn18rr() -> Self {
        Self {
            m: 4,
            tx_ml_t: 2.0,
            st_ml_t: 2.0,
            ..Self::default()
        }
    }

    pub fn cn100k() -> Self {
        Self {
            m: 8,
            tx_vem_t: 5.0,
            tx_ml_t: 5.0,
            beta_t: 4.0,
            beta_s: 1.0,
            ..Self::default()
        }
    }

    /// All weights zero and no densification.
    pub fn disabled() -> Self {
        Self {
            alpha_t: 0.0,
            alpha_s: 0.0,
            beta_t: 0.0,
            beta_s: 0.0,
            n: 0,
            m: 0,
            ..Self::default()
        }
    }

    pub fn temperatures(&self) -> [(&'static str, f64); 8] {
        [
            ("tx_vem_s", self.tx_vem_s),
            ("tx_vem_t", self.tx_vem_t),
            ("st_vem_s", self.st_vem_s),
            ("st_vem_t", self.st_vem_t),
            ("tx_ml_s", self.tx_ml_s),
            ("tx_ml_t", self.tx_ml_t),
            ("st_ml_s", self.st_ml_s),
            ("st_ml_t", self.st_ml_t),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in self.temperatures() {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {t}")));
            }
        }
        for (name, w) in [
            ("alpha_t", self.alpha_t),
            ("alpha_s", self.alpha_s),
            ("beta_t", self.beta_t),
            ("beta_s", self.beta_s),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be nonnegative, got {w}"
                )));
            }
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must lie in [0, 0.5), got {}",
                self.label_smoothing
            )));
        }
        if self.label_top_k == 0 || !(self.selection_temperature > 0.0) {
            return Err(Error::Config(
                "label_top_k and selection_temperature must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Whether any generated-query term is active.
    pub fn densifies(&self) -> bool {
        self.n > 0 && (self.alpha_t > 0.0 || self.beta_t > 0.0)
    }

    fn kd_scale(&self, student_t: f64) -> f64 {
        if self.t2_scaling {
            student_t * student_t
        } else {
            1.0
        }
    }
}

/// Multi-hot targets: `1 − ε` on labels, `ε / n` elsewhere.
pub fn smoothed_targets<T: Scalar>(
    label_sets: &[&[usize]],
    num_entities: usize,
    smoothing: f64,
) -> Result<Tensor<T>> {
    let off = T::of(smoothing / num_entities as f64);
    let on = T::of(1.0 - smoothing);
    let mut data = vec![off; label_sets.len() * num_entities];
    for (i, labels) in label_sets.iter().enumerate() {
        if labels.is_empty() {
            return Err(Error::EmptyLabelSet);
        }
        for &y in labels.iter() {
            if y >= num_entities {
                return Err(Error::OutOfRange {
                    what: "entity",
                    id: y,
                    size: num_entities,
                });
            }
            data[i * num_entities + y] = on;
        }
    }
    Ok(Tensor::matrix(label_sets.len(), num_entities, data)?)
}

/// Binary cross-entropy of `logits` (`B × |E|`) against smoothed multi-hot
/// targets, averaged over all entries.
pub fn supervised_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    label_sets: &[&[usize]],
    smoothing: f64,
) -> Result<Var> {
    let (b, n) = tape.value(logits).dims2();
    if b != label_sets.len() {
        return Err(Error::Misaligned(b, label_sets.len()));
    }
    let targets = smoothed_targets(label_sets, n, smoothing)?;
    Ok(tape.bce_with_logits(logits, targets)?)
}

fn check_aligned<T: Scalar>(tape: &Tape<T>, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        let rows = |s: &[usize]| s.first().copied().unwrap_or(0);
        return Err(Error::Misaligned(rows(sa), rows(sb)));
    }
    Ok(())
}

/// `Σ_rows KL(teacher ‖ student)` with the teacher detached.
fn distill<T: Scalar>(
    tape: &mut Tape<T>,
    teacher_logits: Var,
    teacher_t: f64,
    student_logits: Var,
    student_t: f64,
    scale: f64,
) -> Result<Var> {
    check_aligned(tape, teacher_logits, student_logits)?;
    let t = tape.detach(teacher_logits)?;
    let pt = tape.softmax(t, T::of(teacher_t))?;
    let lt = tape.log_softmax(t, T::of(teacher_t))?;
    let ls = tape.log_softmax(student_logits, T::of(student_t))?;
    let diff = tape.sub(lt, ls)?;
    let terms = tape.mul(pt, diff)?;
    let kl = tape.sum(terms)?;
    Ok(if scale == 1.0 {
        kl
    } else {
        tape.scale(kl, T::of(scale))?
    })
}

/// Text learns from structure: `Σ KL(p_θ ‖ q_π)`; structure detached.
pub fn ml_loss_text<T: Scalar>(
    tape: &mut Tape<T>,
    p_logits: Var,
    q_logits: Var,
    cfg: &FusionConfig,
) -> Result<Var> {
    distill(
        tape,
        p_logits,
        cfg.st_ml_t,
        q_logits,
        cfg.tx_ml_s,
        cfg.kd_scale(cfg.tx_ml_s),
    )
}

/// Structure learns from text: `Σ KL(q_π ‖ p_θ)`; text detached.
pub fn ml_loss_struct<T: Scalar>(
    tape: &mut Tape<T>,
    q_logits: Var,
    p_logits: Var,
    cfg: &FusionConfig,
) -> Result<Var> {
    distill(
        tape,
        q_logits,
        cfg.tx_ml_t,
        p_logits,
        cfg.st_ml_s,
        cfg.kd_scale(cfg.st_ml_s),
    )
}

/// E-step term `Σ_m KL(q_π(y_m) ‖ p_θ(y_m | overlay))` over generated
/// queries; `p` is detached, the gradient reaches `q` through both the
/// entropy and the cross term.
pub fn vem_e_loss<T: Scalar>(
    tape: &mut Tape<T>,
    q_logits: Var,
    p_logits: Var,
    cfg: &FusionConfig,
) -> Result<Var> {
    check_aligned(tape, q_logits, p_logits)?;
    let ts = T::of(cfg.tx_vem_s);
    let q = tape.softmax(q_logits, ts)?;
    let lq = tape.log_softmax(q_logits, ts)?;
    let p = tape.detach(p_logits)?;
    let lp = tape.log_softmax(p, T::of(cfg.st_vem_t))?;
    let diff = tape.sub(lq, lp)?;
    let terms = tape.mul(q, diff)?;
    let kl = tape.sum(terms)?;
    let scale = cfg.kd_scale(cfg.tx_vem_s);
    Ok(if scale == 1.0 {
        kl
    } else {
        tape.scale(kl, T::of(scale))?
    })
}

/// M-step term `−Σ_n Σ_y q(y) ln p_θ(y | overlay)`; `q` detached.
pub fn vem_m_loss<T: Scalar>(
    tape: &mut Tape<T>,
    q_logits: Var,
    p_logits: Var,
    cfg: &FusionConfig,
) -> Result<Var> {
    check_aligned(tape, q_logits, p_logits)?;
    let q = tape.detach(q_logits)?;
    let q = tape.softmax(q, T::of(cfg.tx_vem_t))?;
    let lp = tape.log_softmax(p_logits, T::of(cfg.st_vem_s))?;
    let terms = tape.mul(q, lp)?;
    let s = tape.sum(terms)?;
    Ok(tape.scale(s, T::of(-cfg.kd_scale(cfg.st_vem_s)))?)
}

fn weighted<T: Scalar>(tape: &mut Tape<T>, base: Var, terms: &[(f64, Option<Var>)]) -> Result<Var> {
    let mut total = base;
    for &(w, v) in terms {
        if let (Some(v), true) = (v, w != 0.0) {
            let s = tape.scale(v, T::of(w))?;
            total = tape.add(total, s)?;
        }
    }
    Ok(total)
}

/// `sup + α_t · vem_e + α_s · ml`; absent or zero-weighted terms are
/// skipped.
pub fn combined_e_objective<T: Scalar>(
    tape: &mut Tape<T>,
    sup: Var,
    vem_e: Option<Var>,
    ml_q: Option<Var>,
    cfg: &FusionConfig,
) -> Result<Var> {
    weighted(tape, sup, &[(cfg.alpha_t, vem_e), (cfg.alpha_s, ml_q)])
}

/// `sup + β_t · vem_m + β_s · ml`.
pub fn combined_m_objective<T: Scalar>(
    tape: &mut Tape<T>,
    sup: Var,
    vem_m: Option<Var>,
    ml_p: Option<Var>,
    cfg: &FusionConfig,
) -> Result<Var> {
    weighted(tape, sup, &[(cfg.beta_t, vem_m), (cfg.beta_s, ml_p)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use vemfuse_diffmath::dist;

    fn logits_of(p: &[f64]) -> Tensor<f64> {
        Tensor::matrix(1, p.len(), p.iter().map(|x| x.ln()).collect()).unwrap()
    }

    fn scalar(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn supervised_examples() {
        let mut tape = Tape::<f64>::new();
        let perfect = tape.constant(Tensor::matrix(1, 3, vec![40.0, -40.0, -40.0]).unwrap());
        let l = supervised_loss(&mut tape, perfect, &[&[0]], 0.0).unwrap();
        assert!(scalar(&tape, l) < 1e-6);
        let zero = tape.constant(Tensor::zeros(&[1, 2]));
        let l = supervised_loss(&mut tape, zero, &[&[1]], 0.0).unwrap();
        assert_abs_diff_eq!(scalar(&tape, l), 2f64.ln(), epsilon = 1e-12);
        assert!(matches!(
            supervised_loss(&mut tape, zero, &[&[]], 0.0),
            Err(Error::EmptyLabelSet)
        ));
    }

    #[test]
    fn smoothing_bounds() {
        let t: Tensor<f64> = smoothed_targets(&[&[0, 3], &[1]], 10, 0.1).unwrap();
        assert!(t.data().iter().all(|&x| (0.01..=0.9).contains(&x)));
        assert_eq!(t.row(0)[3], 0.9);
        assert_eq!(t.row(1)[0], 0.01);
    }

    #[test]
    fn ml_text_value() {
        let cfg = FusionConfig::default();
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(logits_of(&[0.25, 0.75]));
        let q = tape.input(logits_of(&[0.5, 0.5]));
        let l = ml_loss_text(&mut tape, p, q, &cfg).unwrap();
        assert_abs_diff_eq!(scalar(&tape, l), 0.13081, epsilon = 1e-4);
        let same = ml_loss_text(&mut tape, p, p, &cfg).unwrap();
        assert_abs_diff_eq!(scalar(&tape, same), 0.0, epsilon = 1e-12);
        // KL(q‖p) differs
        let s = ml_loss_struct(&mut tape, q, p, &cfg).unwrap();
        assert!((scalar(&tape, s) - scalar(&tape, l)).abs() > 1e-3);
    }

    #[test]
    fn vem_values() {
        let cfg = FusionConfig::default();
        let mut tape = Tape::<f64>::new();
        let qd = [0.1, 0.6, 0.3];
        let pd = [0.5, 0.2, 0.3];
        let q = tape.input(logits_of(&qd));
        let p = tape.input(logits_of(&pd));
        let e = vem_e_loss(&mut tape, q, p, &cfg).unwrap();
        assert_abs_diff_eq!(
            scalar(&tape, e),
            dist::kl_div(&qd, &pd).unwrap(),
            epsilon = 1e-12
        );
        let one_hot = tape.constant(Tensor::matrix(1, 3, vec![0.0, 60.0, 0.0]).unwrap());
        let m = vem_m_loss(&mut tape, one_hot, p, &cfg).unwrap();
        assert_abs_diff_eq!(scalar(&tape, m), -(0.2f64.ln()), epsilon = 1e-12);
        let uniform = tape.input(Tensor::zeros(&[1, 4]));
        let q4 = tape.input(logits_of(&[0.1, 0.2, 0.3, 0.4]));
        let m = vem_m_loss(&mut tape, q4, uniform, &cfg).unwrap();
        assert_abs_diff_eq!(scalar(&tape, m), 4f64.ln(), epsilon = 1e-12);
        assert!(vem_m_loss(&mut tape, q4, p, &cfg).is_err());
    }

    #[test]
    fn combined_is_linear_in_weights() {
        let mut tape = Tape::<f64>::new();
        let sup = tape.input(Tensor::scalar(0.7));
        let vem = tape.input(Tensor::scalar(0.3));
        let ml = tape.input(Tensor::scalar(0.2));
        let zero = FusionConfig::disabled();
        let l = combined_e_objective(&mut tape, sup, Some(vem), Some(ml), &zero).unwrap();
        assert_eq!(scalar(&tape, l), 0.7);
        let one = FusionConfig {
            alpha_t: 1.0,
            alpha_s: 0.0,
            ..zero.clone()
        };
        let two = FusionConfig {
            alpha_t: 2.0,
            ..one.clone()
        };
        let a = combined_e_objective(&mut tape, sup, Some(vem), Some(ml), &one).unwrap();
        let b = combined_e_objective(&mut tape, sup, Some(vem), Some(ml), &two).unwrap();
        assert_abs_diff_eq!(
            scalar(&tape, b) - 0.7,
            2.0 * (scalar(&tape, a) - 0.7),
            epsilon = 1e-12
        );
        let m = combined_m_objective(
            &mut tape,
            sup,
            Some(vem),
            Some(ml),
            &FusionConfig::fb15k237_20(),
        )
        .unwrap();
        assert_abs_diff_eq!(
            scalar(&tape, m),
            0.7 + 6.0 * 0.3 + 4.0 * 0.2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn presets_and_json_names() {
        let cn = FusionConfig::cn100k();
        assert_eq!(
            (cn.alpha_t, cn.alpha_s, cn.beta_t, cn.beta_s),
            (1.0, 1.0, 4.0, 1.0)
        );
        assert_eq!((cn.tx_vem_t, cn.tx_ml_t, cn.m), (5.0, 5.0, 8));
        let wn = FusionConfig::wn18rr();
        assert_eq!((wn.tx_ml_t, wn.st_ml_t, wn.m), (2.0, 2.0, 4));
        let json = serde_json::to_value(&cn).unwrap();
        for (name, _) in cn.temperatures() {
            assert!(json.get(name).is_some(), "{name}");
        }
        assert_eq!(json["N"], 32);
        let parsed: FusionConfig = serde_json::from_str(r#"{"beta_t": 4, "M": 2}"#).unwrap();
        assert_eq!((parsed.beta_t, parsed.m, parsed.n), (4.0, 2, 32));
        assert!(serde_json::from_str::<FusionConfig>(r#"{"betat": 4}"#).is_err());
        let bad = FusionConfig {
            tx_ml_s: 0.0,
            ..FusionConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}

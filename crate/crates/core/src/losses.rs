//! Training objectives.
//!
//! * [`classification_loss`]: batch-mean cross-entropy against hard labels.
//! * [`oe_uniform_loss`]: outlier-exposure regulariser, batch-mean `H(u, p)`.
//! * [`kd_loss`]: softened-target distillation from a frozen teacher,
//!   `T² · H(p̃_teacher, p̃_student)`.
//! * [`oscl_loss`]: supervised contrastive loss whose denominator also runs
//!   over outlier embeddings; outliers are never anchors or positives.
//! * [`total_loss`]: the weighted sum of all four.
//!
//! Every cross-entropy is evaluated from logits through log-sum-exp.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Tolerance on `‖f̃‖₂ = 1` accepted by [`oscl_loss`].
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_reg: f64,
    pub lambda_kd: f64,
    pub lambda_sc: f64,
    pub t_kd: f64,
    pub tau_sc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_reg: 5.0,
            lambda_kd: 1.0,
            lambda_sc: 1.0,
            t_kd: 4.0,
            tau_sc: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_reg", self.lambda_reg),
            ("lambda_kd", self.lambda_kd),
            ("lambda_sc", self.lambda_sc),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::param(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        for (name, v) in [("t_kd", self.t_kd), ("tau_sc", self.tau_sc)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::param(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// How per-anchor contrastive terms are reduced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScReduction {
    /// `Σ_i L_i`, as the objective is written.
    #[default]
    Sum,
    /// `Σ_i L_i / |B_in|`.
    Mean,
}

/// Component values of one evaluation of the combined objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub reg: f64,
    pub kd: f64,
    pub sc: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted sum in the same association order as [`total_loss`].
    pub fn from_components(classification: f64, reg: f64, kd: f64, sc: f64, w: &LossWeights) -> Self {
        let total = classification + reg * w.lambda_reg + kd * w.lambda_kd + sc * w.lambda_sc;
        Self {
            classification,
            reg,
            kd,
            sc,
            total,
        }
    }

    /// `|total − Σ λ·component|`.
    pub fn residual(&self, w: &LossWeights) -> f64 {
        let expect = self.classification
            + w.lambda_reg * self.reg
            + w.lambda_kd * self.kd
            + w.lambda_sc * self.sc;
        (self.total - expect).abs()
    }
}

fn one_hot(labels: &[usize], k: usize) -> Result<Vec<f64>> {
    let mut y = vec![0.0; labels.len() * k];
    for (i, &c) in labels.iter().enumerate() {
        if c >= k {
            return Err(Error::shape(format!("label {c} out of range for {k} classes")));
        }
        y[i * k + c] = 1.0;
    }
    Ok(y)
}

/// Mean over the batch of `−log p_y(x)`, computed from `logits` (`B×K`).
pub fn classification_loss<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let (b, k) = logits.dims2();
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for {b} rows", labels.len())));
    }
    let y = logits.tape().constant(vec![b, k], one_hot(labels, k)?)?;
    let logp = logits.log_softmax_rows(1.0)?;
    Ok(logp.mul(&y)?.sum().scale(-1.0 / b as f64))
}

/// Mean over outliers of `H(u, p) = −(1/K) Σ_i log p_i`.
///
/// `None` (an empty outlier batch) yields `None`: no contribution.
pub fn oe_uniform_loss<'t>(logits_out: Option<Var<'t>>) -> Result<Option<Var<'t>>> {
    let Some(logits) = logits_out else {
        return Ok(None);
    };
    let (b, k) = logits.dims2();
    let logp = logits.log_softmax_rows(1.0)?;
    Ok(Some(logp.sum().scale(-1.0 / (b * k) as f64)))
}

/// Batch mean of `T² · H(softmax(z_t/T), softmax(z_s/T))`.
///
/// The teacher logits are detached; no gradient ever reaches them.
pub fn kd_loss<'t>(student_logits: Var<'t>, teacher_logits: Var<'t>, t_kd: f64) -> Result<Var<'t>> {
    let (s_shape, t_shape) = (student_logits.shape(), teacher_logits.shape());
    if s_shape != t_shape {
        return Err(Error::shape(format!(
            "student logits {s_shape:?} vs teacher logits {t_shape:?}"
        )));
    }
    let (b, _) = student_logits.dims2();
    let target = teacher_logits.detach().softmax_rows(t_kd)?.detach();
    let logq = student_logits.log_softmax_rows(t_kd)?;
    Ok(target.mul(&logq)?.sum().scale(-t_kd * t_kd / b as f64))
}

fn check_unit_rows(e: &Var<'_>, what: &str) -> Result<()> {
    let (r, c) = e.dims2();
    e.with_value(|v| {
        for i in 0..r {
            let n = v[i * c..(i + 1) * c].iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Precondition(format!(
                    "{what} embedding row {i} has norm {n}, expected 1"
                )));
            }
        }
        Ok(())
    })
}

/// Per-anchor contrastive terms `L_i`, shape `[B_in]`.
///
/// Anchors are the in-distribution rows. Positives of anchor `i` are the other
/// in-distribution rows sharing its label; the denominator runs over every
/// row of `B_in ∪ B_out` except `i` itself. Anchors without a positive
/// contribute exactly zero.
pub fn oscl_anchor_losses<'t>(
    emb_in: Var<'t>,
    labels_in: &[usize],
    emb_out: Option<Var<'t>>,
    tau_sc: f64,
) -> Result<Var<'t>> {
    if !(tau_sc > 0.0) || !tau_sc.is_finite() {
        return Err(Error::param(format!("tau_sc must be positive, got {tau_sc}")));
    }
    let (bi, n) = emb_in.dims2();
    if emb_in.shape().len() != 2 {
        return Err(Error::shape("in-distribution embeddings must be a matrix"));
    }
    if labels_in.len() != bi {
        return Err(Error::shape(format!("{} labels for {bi} anchors", labels_in.len())));
    }
    check_unit_rows(&emb_in, "in-distribution")?;
    let all = match emb_out {
        Some(out) => {
            if out.dims2().1 != n {
                return Err(Error::shape("outlier embedding width differs"));
            }
            check_unit_rows(&out, "outlier")?;
            emb_in.concat_rows(&out)?
        }
        None => emb_in,
    };
    all.contrastive_rows(labels_in, tau_sc)
}

/// Outlier-aware supervised contrastive loss over unit-norm embeddings.
pub fn oscl_loss<'t>(
    emb_in: Var<'t>,
    labels_in: &[usize],
    emb_out: Option<Var<'t>>,
    tau_sc: f64,
    reduction: ScReduction,
) -> Result<Var<'t>> {
    let per_anchor = oscl_anchor_losses(emb_in, labels_in, emb_out, tau_sc)?;
    let total = per_anchor.sum();
    Ok(match reduction {
        ScReduction::Sum => total,
        ScReduction::Mean => total.scale(1.0 / labels_in.len() as f64),
    })
}

/// Component losses of one training step; absent terms count as zero.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'t> {
    pub classification: Var<'t>,
    pub reg: Option<Var<'t>>,
    pub kd: Option<Var<'t>>,
    pub sc: Option<Var<'t>>,
}

/// `L_cls + λ_reg·L_reg + λ_KD·L_KD + λ_SC·L_SC`, plus the value breakdown.
pub fn total_loss<'t>(terms: &LossTerms<'t>, w: &LossWeights) -> Result<(Var<'t>, LossBreakdown)> {
    let tape = terms.classification.tape();
    let term = |v: Option<Var<'t>>| v.unwrap_or_else(|| tape.scalar(0.0));
    let (reg, kd, sc) = (term(terms.reg), term(terms.kd), term(terms.sc));
    let total = terms
        .classification
        .add(&reg.scale(w.lambda_reg))?
        .add(&kd.scale(w.lambda_kd))?
        .add(&sc.scale(w.lambda_sc))?;
    let breakdown = LossBreakdown {
        classification: terms.classification.item(),
        reg: reg.item(),
        kd: kd.item(),
        sc: sc.item(),
        total: total.item(),
    };
    Ok((total, breakdown))
}

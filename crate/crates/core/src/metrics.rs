//! OOD scores and detection metrics. Every score is oriented so that higher
//! means more in-distribution.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::log_sum_exp;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    #[default]
    Msp,
    Energy,
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msp" => Ok(ScoreKind::Msp),
            "energy" => Ok(ScoreKind::Energy),
            _ => Err(Error::param(format!("unknown score {s:?}; expected msp or energy"))),
        }
    }
}

impl ScoreKind {
    pub fn score(self, logits: &[f64]) -> f64 {
        match self {
            ScoreKind::Msp => msp_score(logits),
            ScoreKind::Energy => energy_score(logits),
        }
    }
}

/// `max_i softmax(z)_i = 1 / Σ_j exp(z_j − max z)`.
pub fn msp_score(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    1.0 / logits.iter().map(|z| (z - m).exp()).sum::<f64>()
}

/// `log Σ_j exp(z_j)`.
pub fn energy_score(logits: &[f64]) -> f64 {
    log_sum_exp(logits)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(predictions: &[usize], truths: &[usize]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Degenerate("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truths.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> Result<Self> {
        let s = Self { id_scores, ood_scores };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id_scores.is_empty() || self.ood_scores.is_empty() {
            return Err(Error::Degenerate("score sets must both be nonempty".into()));
        }
        if self.id_scores.iter().chain(&self.ood_scores).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite score".into()));
        }
        Ok(())
    }

    /// Roles swapped and scores negated: OOD becomes the positive class.
    pub fn flipped(&self) -> Self {
        Self {
            id_scores: self.ood_scores.iter().map(|v| -v).collect(),
            ood_scores: self.id_scores.iter().map(|v| -v).collect(),
        }
    }

    /// Scores labelled `is_id`, sorted by descending score.
    fn ranked(&self) -> Vec<(f64, bool)> {
        let mut all: Vec<(f64, bool)> = self
            .id_scores
            .iter()
            .map(|&s| (s, true))
            .chain(self.ood_scores.iter().map(|&s| (s, false)))
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0));
        all
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample_id", "score", "is_id"])?;
        let rows = self
            .id_scores
            .iter()
            .map(|s| (s, 1))
            .chain(self.ood_scores.iter().map(|s| (s, 0)));
        for (i, (s, is_id)) in rows.enumerate() {
            w.write_record([i.to_string(), s.to_string(), is_id.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Groups of equal scores in descending order as `(score, n_id, n_ood)`.
fn tie_groups(s: &ScoreSet) -> Vec<(f64, usize, usize)> {
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for (v, is_id) in s.ranked() {
        match groups.last_mut() {
            Some(g) if g.0.total_cmp(&v) == Ordering::Equal => {
                if is_id {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((v, is_id as usize, (!is_id) as usize)),
        }
    }
    groups
}

/// `P(s_id > s_ood) + ½·P(s_id = s_ood)`.
pub fn auroc(s: &ScoreSet) -> Result<f64> {
    s.validate()?;
    // Walking thresholds upward: each id score beats the ood scores strictly
    // below it and ties with its own group.
    let mut ood_below = 0usize;
    let mut credit = 0.0;
    for &(_, n_id, n_ood) in tie_groups(s).iter().rev() {
        credit += n_id as f64 * (ood_below as f64 + 0.5 * n_ood as f64);
        ood_below += n_ood;
    }
    Ok(credit / (s.id_scores.len() as f64 * s.ood_scores.len() as f64))
}

/// Fraction of OOD scores at or above the `⌈tpr·N_id⌉`-th largest ID score.
pub fn fpr_at_tpr(s: &ScoreSet, tpr_target: f64) -> Result<f64> {
    s.validate()?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::param(format!("tpr target must lie in (0, 1], got {tpr_target}")));
    }
    let n = s.id_scores.len();
    let k = ((tpr_target * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut id = s.id_scores.clone();
    id.sort_by(|a, b| b.total_cmp(a));
    let tau = id[k - 1];
    let fp = s.ood_scores.iter().filter(|&&v| v >= tau).count();
    Ok(fp as f64 / s.ood_scores.len() as f64)
}

pub fn fpr95(s: &ScoreSet) -> Result<f64> {
    fpr_at_tpr(s, 0.95)
}

/// Average precision with ID as the positive class; equal scores form one
/// threshold.
pub fn aupr(s: &ScoreSet) -> Result<f64> {
    s.validate()?;
    let positives = s.id_scores.len() as f64;
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    for (_, n_id, n_ood) in tie_groups(s) {
        tp += n_id;
        fp += n_ood;
        if n_id > 0 {
            ap += (tp as f64 / (tp + fp) as f64) * (n_id as f64 / positives);
        }
    }
    Ok(ap)
}

/// Average precision with OOD as the positive class.
pub fn aupr_out(s: &ScoreSet) -> Result<f64> {
    aupr(&s.flipped())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
    pub precision: f64,
}

/// ROC/PR points at every distinct score, descending threshold.
pub fn curve_points(s: &ScoreSet) -> Result<Vec<CurvePoint>> {
    s.validate()?;
    let (np, nn) = (s.id_scores.len() as f64, s.ood_scores.len() as f64);
    let (mut tp, mut fp) = (0usize, 0usize);
    Ok(tie_groups(s)
        .into_iter()
        .map(|(threshold, n_id, n_ood)| {
            tp += n_id;
            fp += n_ood;
            CurvePoint {
                threshold,
                fpr: fp as f64 / nn,
                tpr: tp as f64 / np,
                precision: tp as f64 / (tp + fp) as f64,
            }
        })
        .collect())
}

pub fn write_curve_csv(points: &[CurvePoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub fpr95: f64,
    pub auroc: f64,
    pub aupr: f64,
}

impl DetectionMetrics {
    pub fn compute(s: &ScoreSet, aupr_positive_id: bool) -> Result<Self> {
        Ok(Self {
            fpr95: fpr95(s)?,
            auroc: auroc(s)?,
            aupr: if aupr_positive_id { aupr(s)? } else { aupr_out(s)? },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub name: String,
    #[serde(flatten)]
    pub metrics: DetectionMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub acc: f64,
    pub per_set: Vec<SetMetrics>,
    /// Unweighted mean over `per_set`.
    pub average: DetectionMetrics,
}

impl MetricsReport {
    pub fn new(seed: u64, acc: f64, per_set: Vec<SetMetrics>) -> Result<Self> {
        if per_set.is_empty() {
            return Err(Error::Data("no OOD test sets evaluated".into()));
        }
        let n = per_set.len() as f64;
        let mean = |f: fn(&DetectionMetrics) -> f64| per_set.iter().map(|s| f(&s.metrics)).sum::<f64>() / n;
        let average = DetectionMetrics {
            fpr95: mean(|m| m.fpr95),
            auroc: mean(|m| m.auroc),
            aupr: mean(|m| m.aupr),
        };
        Ok(Self {
            seed,
            acc,
            per_set,
            average,
        })
    }

    pub fn headline(&self) -> Summary {
        Summary {
            acc: self.acc,
            fpr95: self.average.fpr95,
            auroc: self.average.auroc,
            aupr: self.average.aupr,
        }
    }
}

/// The four headline numbers: ACC and the averaged FPR95/AUROC/AUPR.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub acc: f64,
    pub fpr95: f64,
    pub auroc: f64,
    pub aupr: f64,
}

impl Summary {
    fn fields(&self) -> [f64; 4] {
        [self.acc, self.fpr95, self.auroc, self.aupr]
    }

    fn from_fields(f: [f64; 4]) -> Self {
        Self {
            acc: f[0],
            fpr95: f[1],
            auroc: f[2],
            aupr: f[3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: Summary,
    /// Sample standard deviation; zero for a single run.
    pub std: Summary,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate(reports: &[Summary]) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(Error::Degenerate("nothing to aggregate".into()));
    }
    let mut mean = [0.0; 4];
    let mut std = [0.0; 4];
    for j in 0..4 {
        let col: Vec<f64> = reports.iter().map(|r| r.fields()[j]).collect();
        (mean[j], std[j]) = mean_std(&col);
    }
    Ok(Aggregate {
        n: reports.len(),
        mean: Summary::from_fields(mean),
        std: Summary::from_fields(std),
    })
}

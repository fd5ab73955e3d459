//! Independent reference implementations and fixtures shared by the
//! integration tests. Oracles use plain loops and no library code.
#![allow(dead_code)]

use oe_tune::harness::{AugmentConfig, ExperimentConfig, ModelConfig, OptimConfig, Rung};
use oe_tune::sampling::SamplePlan;

pub fn log_softmax(z: &[f64], t: f64) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / t));
    let s: f64 = z.iter().map(|v| (v / t - m).exp()).sum();
    z.iter().map(|v| v / t - m - s.ln()).collect()
}

pub fn ce_oracle(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let b = labels.len();
    let mut total = 0.0;
    for i in 0..b {
        total -= log_softmax(&logits[i * k..(i + 1) * k], 1.0)[labels[i]];
    }
    total / b as f64
}

pub fn oe_oracle(logits: &[f64], k: usize) -> f64 {
    let b = logits.len() / k;
    let mut total = 0.0;
    for i in 0..b {
        total -= log_softmax(&logits[i * k..(i + 1) * k], 1.0).iter().sum::<f64>() / k as f64;
    }
    total / b as f64
}

pub fn kd_oracle(student: &[f64], teacher: &[f64], k: usize, t: f64) -> f64 {
    let b = student.len() / k;
    let mut total = 0.0;
    for i in 0..b {
        let lt = log_softmax(&teacher[i * k..(i + 1) * k], t);
        let ls = log_softmax(&student[i * k..(i + 1) * k], t);
        for c in 0..k {
            total -= lt[c].exp() * ls[c];
        }
    }
    t * t * total / b as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-anchor supervised contrastive loss written straight from its
/// definition: for anchor `i` with positives `P(i)`,
/// `−1/|P| Σ_p log(exp(s_ip) / Σ_{a≠i} exp(s_ia))`, where `a` ranges over
/// anchors and outliers alike.
pub fn scl_oracle(emb_in: &[Vec<f64>], labels: &[usize], emb_out: &[Vec<f64>], tau: f64) -> Vec<f64> {
    let all: Vec<&Vec<f64>> = emb_in.iter().chain(emb_out).collect();
    (0..emb_in.len())
        .map(|i| {
            let denom: f64 = (0..all.len())
                .filter(|&a| a != i)
                .map(|a| (dot(&emb_in[i], all[a]) / tau).exp())
                .sum();
            let pos: Vec<usize> = (0..emb_in.len()).filter(|&p| p != i && labels[p] == labels[i]).collect();
            if pos.is_empty() {
                return 0.0;
            }
            let mut l = 0.0;
            for &p in &pos {
                l -= ((dot(&emb_in[i], &emb_in[p]) / tau).exp() / denom).ln();
            }
            l / pos.len() as f64
        })
        .collect()
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Pairwise `P(id > ood) + ½ P(id = ood)`.
pub fn auroc_oracle(id: &[f64], ood: &[f64]) -> f64 {
    let mut credit = 0.0;
    for &a in id {
        for &b in ood {
            if a > b {
                credit += 1.0;
            } else if a == b {
                credit += 0.5;
            }
        }
    }
    credit / (id.len() * ood.len()) as f64
}

fn thresholds(id: &[f64], ood: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = id.iter().chain(ood).copied().collect();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

/// Smallest FPR over every threshold `t` (predict ID when `s ≥ t`) whose TPR
/// is at least 95%.
pub fn fpr95_oracle(id: &[f64], ood: &[f64]) -> f64 {
    let mut best = f64::INFINITY;
    for t in thresholds(id, ood) {
        let tp = id.iter().filter(|&&s| s >= t).count();
        if tp * 100 >= 95 * id.len() {
            let fp = ood.iter().filter(|&&s| s >= t).count();
            best = best.min(fp as f64 / ood.len() as f64);
        }
    }
    best
}

/// Average precision with ID positive: `Σ_t precision(t) · ΔRecall(t)` over
/// every distinct threshold, each counted from scratch.
pub fn ap_oracle(id: &[f64], ood: &[f64]) -> f64 {
    let mut ap = 0.0;
    for t in thresholds(id, ood) {
        let tp = id.iter().filter(|&&s| s >= t).count();
        let fp = ood.iter().filter(|&&s| s >= t).count();
        let hits = id.iter().filter(|&&s| s == t).count();
        if hits > 0 {
            ap += tp as f64 / (tp + fp) as f64 * hits as f64 / id.len() as f64;
        }
    }
    ap
}

/// A configuration small enough for a full `run` in a couple of seconds.
pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        name: "tiny".into(),
        seeds: vec![1, 2],
        model: ModelConfig {
            hidden: vec![8],
            feature: 8,
            embed: 4,
        },
        optim: OptimConfig {
            epochs_pretrain: 4,
            epochs_finetune: 2,
            batch_in: 16,
            batch_out: 32,
            ..OptimConfig::default()
        },
        sampling: SamplePlan { q: 0.5, step: 1, m: 60 },
        augment: AugmentConfig {
            n: 2,
            ..AugmentConfig::default()
        },
        ladder: vec![Rung::CeOnly, Rung::Oe, Rung::OeAll],
        ..ExperimentConfig::default()
    };
    c.data.classes = 3;
    c.data.n_max = 40;
    c.data.test_per_class = 20;
    c.data.pool_size = 300;
    c.data.ood_count = 60;
    c
}

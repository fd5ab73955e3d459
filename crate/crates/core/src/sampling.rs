//! Hardness scoring of the outlier pool and quantile-anchored strided
//! selection of semi-hard outliers.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{open_error, Error, Result};
use crate::model::ModelParams;

const SIDECAR_FORMAT: &str = "oe-tune/scored-pool";
const SIDECAR_VERSION: u32 = 1;
const SCORE_CHUNK: usize = 256;

/// Maximum softmax probability of one distribution.
pub fn hardness(probs: &[f64]) -> f64 {
    probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPool {
    pub pool_id: String,
    pub teacher_hash: String,
    pub dim: usize,
    /// Row-major `M × dim`.
    pub samples: Vec<f64>,
    pub hardness: Vec<f64>,
    /// Pool indices ordered by ascending hardness, ties by index.
    pub sorted_index: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format: String,
    version: u32,
    pool_id: String,
    teacher_hash: String,
    hardness: Vec<f64>,
    sorted_index: Vec<usize>,
}

fn argsort_stable(h: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..h.len()).collect();
    idx.sort_by(|&a, &b| h[a].total_cmp(&h[b]));
    idx
}

/// Scores every pool sample by teacher MSP (inference only).
pub fn score_pool(teacher: &ModelParams, pool: &Dataset) -> Result<ScoredPool> {
    score_samples(teacher, &pool.inputs, pool.dim(), pool.provenance())
}

pub fn score_samples(
    teacher: &ModelParams,
    samples: &[f64],
    dim: usize,
    pool_id: String,
) -> Result<ScoredPool> {
    if samples.is_empty() {
        return Err(Error::Data("cannot score an empty outlier pool".into()));
    }
    if dim != teacher.dims().input || samples.len() % dim != 0 {
        return Err(Error::shape(format!(
            "pool rows of width {dim} for a model with input width {}",
            teacher.dims().input
        )));
    }
    let k = teacher.dims().classes;
    let chunks: Vec<Vec<f64>> = samples
        .par_chunks(SCORE_CHUNK * dim)
        .map(|chunk| -> Result<Vec<f64>> {
            let probs = teacher.probs(chunk, chunk.len() / dim)?;
            Ok(probs.chunks(k).map(hardness).collect())
        })
        .collect::<Result<_>>()?;
    let hardness: Vec<f64> = chunks.into_iter().flatten().collect();
    if hardness.iter().any(|h| !h.is_finite()) {
        return Err(Error::Numeric("non-finite hardness from teacher".into()));
    }
    Ok(ScoredPool {
        pool_id,
        teacher_hash: teacher.checksum(),
        dim,
        samples: samples.to_vec(),
        sorted_index: argsort_stable(&hardness),
        hardness,
    })
}

impl ScoredPool {
    pub fn len(&self) -> usize {
        self.hardness.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hardness.is_empty()
    }

    pub fn save_sidecar(&self, path: &Path) -> Result<()> {
        let side = Sidecar {
            format: SIDECAR_FORMAT.into(),
            version: SIDECAR_VERSION,
            pool_id: self.pool_id.clone(),
            teacher_hash: self.teacher_hash.clone(),
            hardness: self.hardness.clone(),
            sorted_index: self.sorted_index.clone(),
        };
        fs::write(path, serde_json::to_vec_pretty(&side)?)?;
        Ok(())
    }

    /// Reattaches a stored scoring pass to the pool it was computed on.
    pub fn load_sidecar(path: &Path, pool: &Dataset) -> Result<Self> {
        let text = fs::read(path).map_err(|e| open_error(path, e))?;
        let side: Sidecar =
            serde_json::from_slice(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if side.format != SIDECAR_FORMAT || side.version != SIDECAR_VERSION {
            return Err(Error::format(path, "not a scored-pool sidecar of a known version"));
        }
        if side.pool_id != pool.provenance() || side.hardness.len() != pool.len() {
            return Err(Error::format(path, "sidecar was computed on a different pool"));
        }
        let mut seen = vec![false; side.hardness.len()];
        for &i in &side.sorted_index {
            if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::format(path, "sorted_index is not a permutation"));
            }
        }
        if side.sorted_index.len() != seen.len()
            || side
                .sorted_index
                .windows(2)
                .any(|w| side.hardness[w[0]] > side.hardness[w[1]])
        {
            return Err(Error::format(path, "sorted_index does not sort hardness"));
        }
        Ok(Self {
            pool_id: side.pool_id,
            teacher_hash: side.teacher_hash,
            dim: pool.dim(),
            samples: pool.inputs.clone(),
            hardness: side.hardness,
            sorted_index: side.sorted_index,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub q: f64,
    pub step: usize,
    pub m: usize,
}

impl SamplePlan {
    /// `⌊q·M⌋`, tolerant of `q` values that are not exact binary fractions.
    pub fn start(&self, pool: usize) -> usize {
        (self.q * pool as f64 + 1e-9).floor() as usize
    }

    pub fn validate(&self, pool: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.q) || self.step == 0 || self.m == 0 {
            return Err(Error::param(format!(
                "plan needs q in [0,1), step ≥ 1, m ≥ 1; got q={}, step={}, m={}",
                self.q, self.step, self.m
            )));
        }
        let end = self.m.checked_mul(self.step).and_then(|s| s.checked_add(self.start(pool)));
        if end.is_none_or(|e| e > pool) {
            return Err(Error::PlanOutOfBounds {
                q: self.q,
                step: self.step,
                m: self.m,
                pool,
            });
        }
        Ok(())
    }

    /// Sorted-pool positions visited by the plan.
    pub fn positions(&self, pool: usize) -> Result<Vec<usize>> {
        self.validate(pool)?;
        let s = self.start(pool);
        Ok((0..self.m).map(|j| s + j * self.step).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub dim: usize,
    /// Pool indices, in selection order.
    pub indices: Vec<usize>,
    pub hardness: Vec<f64>,
    /// Row-major `m × dim`.
    pub samples: Vec<f64>,
}

impl Selection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn mean_hardness(&self) -> f64 {
        self.hardness.iter().sum::<f64>() / self.hardness.len() as f64
    }
}

pub fn select(pool: &ScoredPool, plan: &SamplePlan) -> Result<Selection> {
    let positions = plan.positions(pool.len())?;
    let indices: Vec<usize> = positions.iter().map(|&p| pool.sorted_index[p]).collect();
    let d = pool.dim;
    Ok(Selection {
        dim: d,
        hardness: indices.iter().map(|&i| pool.hardness[i]).collect(),
        samples: indices
            .iter()
            .flat_map(|&i| pool.samples[i * d..(i + 1) * d].iter().copied())
            .collect(),
        indices,
    })
}

/// The first `m` pool rows, in pool order (no hardness sampling).
pub fn take_first(pool: &ScoredPool, m: usize) -> Result<Selection> {
    if m == 0 || m > pool.len() {
        return Err(Error::param(format!("cannot take {m} of {} pool samples", pool.len())));
    }
    let d = pool.dim;
    Ok(Selection {
        dim: d,
        indices: (0..m).collect(),
        hardness: pool.hardness[..m].to_vec(),
        samples: pool.samples[..m * d].to_vec(),
    })
}

/// `q ∈ {0.00, 0.05, …, 0.90}`.
pub fn default_q_grid() -> Vec<f64> {
    (0..=18).map(|j| j as f64 / 20.0).collect()
}

pub fn default_step_grid() -> Vec<usize> {
    vec![1, 2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;

    fn pool_from(h: &[f64]) -> ScoredPool {
        ScoredPool {
            pool_id: "t".into(),
            teacher_hash: "t".into(),
            dim: 1,
            samples: (0..h.len()).map(|i| i as f64).collect(),
            hardness: h.to_vec(),
            sorted_index: argsort_stable(h),
        }
    }

    #[test]
    fn hardness_examples() {
        assert_eq!(hardness(&[0.1; 10]), 0.1);
        assert_eq!(hardness(&[0.0, 1.0, 0.0]), 1.0);
        assert_eq!(hardness(&[0.5, 0.3, 0.2]), 0.5);
    }

    #[test]
    fn sort_by_hand() {
        assert_eq!(pool_from(&[0.9, 0.2, 0.5]).sorted_index, vec![1, 2, 0]);
        assert_eq!(pool_from(&[0.3; 5]).sorted_index, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn select_positions() {
        let h: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let pool = pool_from(&h);
        let plan = |q, m, step| SamplePlan { q, step, m };
        assert_eq!(select(&pool, &plan(0.5, 3, 1)).unwrap().indices, vec![5, 6, 7]);
        assert_eq!(select(&pool, &plan(0.5, 2, 2)).unwrap().indices, vec![5, 7]);
        assert_eq!(
            select(&pool, &plan(0.0, 10, 1)).unwrap().indices,
            (0..10).collect::<Vec<_>>()
        );
        match select(&pool, &plan(0.5, 3, 2)) {
            Err(Error::PlanOutOfBounds { q, step, m, pool }) => {
                assert_eq!((q, step, m, pool), (0.5, 2, 3, 10))
            }
            other => panic!("expected bounds error, got {other:?}"),
        }
    }

    #[test]
    fn start_tolerates_decimal_q() {
        let plan = SamplePlan { q: 0.57, step: 1, m: 1 };
        assert_eq!(plan.start(100), 57);
        assert_eq!(default_q_grid().len(), 19);
        assert_eq!(default_q_grid()[18], 0.9);
    }

    #[test]
    fn zero_teacher_scores_uniform() {
        let dims = ModelDims {
            input: 2,
            feature: 4,
            embed: 3,
            classes: 5,
        };
        let mut teacher = ModelParams::init(dims, &[], 1).unwrap();
        for t in teacher.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let samples: Vec<f64> = (0..600).map(|i| (i as f64).sin()).collect();
        let before = teacher.checksum();
        let scored = score_samples(&teacher, &samples, 2, "p".into()).unwrap();
        assert_eq!(before, teacher.checksum());
        assert!(scored.hardness.iter().all(|&h| (h - 0.2).abs() < 1e-15));
        assert_eq!(scored.sorted_index, (0..300).collect::<Vec<_>>());
        assert!(score_samples(&teacher, &[], 2, "p".into()).is_err());
    }
}

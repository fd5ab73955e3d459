use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{DataSpecs, ExperimentConfig, MethodConfig};
use super::eval::evaluate;
use super::train::{finetune, pretrain, EpochLog};
use crate::data::{gen_id, gen_ood_testsets, gen_outlier_pool, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, Aggregate, MetricsReport};
use crate::model::ModelParams;
use crate::sampling::{score_pool, select, take_first, SamplePlan, ScoredPool, Selection};

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub train: Dataset,
    pub test: Dataset,
    pub pool: Dataset,
    pub ood: Vec<Dataset>,
}

impl Datasets {
    pub fn generate(specs: &DataSpecs) -> Result<Self> {
        Ok(Self {
            train: gen_id(&specs.train)?,
            test: gen_id(&specs.test)?,
            pool: gen_outlier_pool(&specs.pool)?,
            ood: gen_ood_testsets(&specs.ood)?,
        })
    }
}

/// The fine-tuning outlier set of a method: the planned hardness slice, or
/// the first `m` pool samples when sampling is off.
pub fn choose_outliers(scored: &ScoredPool, method: &MethodConfig, plan: &SamplePlan) -> Result<Selection> {
    if method.use_sampling {
        select(scored, plan)
    } else {
        take_first(scored, plan.m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherRecord {
    pub seed: u64,
    pub checkpoint: Option<String>,
    pub epochs: Vec<EpochLog>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub report: Option<MetricsReport>,
    pub epochs: Vec<EpochLog>,
    /// Checksum of the fine-tuned parameters.
    pub checkpoint: Option<String>,
    pub outlier_hardness: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRecord {
    pub name: String,
    pub method: MethodConfig,
    pub seeds: Vec<SeedRecord>,
    /// Over the seeds that succeeded; `n` says how many. Absent when none did.
    pub aggregate: Option<Aggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub teachers: Vec<TeacherRecord>,
    pub methods: Vec<MethodRecord>,
    pub failed: bool,
}

impl RunRecord {
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("record serialises");
        hex::encode(Sha256::digest(json))
    }

    pub fn method(&self, name: &str) -> Option<&MethodRecord> {
        self.methods.iter().find(|m| m.name == name)
    }
}

/// A run's record plus the trained parameters, keyed by `(method, seed)`.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    pub teachers: BTreeMap<u64, ModelParams>,
    pub students: BTreeMap<(String, u64), ModelParams>,
}

struct SeedOutcome {
    teacher: TeacherRecord,
    teacher_model: Option<ModelParams>,
    methods: Vec<(SeedRecord, Option<ModelParams>)>,
}

fn failed_seed(seed: u64, err: &Error) -> SeedRecord {
    SeedRecord {
        seed,
        report: None,
        epochs: Vec::new(),
        checkpoint: None,
        outlier_hardness: None,
        error: Some(err.to_string()),
    }
}

fn run_method(
    cfg: &ExperimentConfig,
    data: &Datasets,
    teacher: &ModelParams,
    scored: &ScoredPool,
    method: &MethodConfig,
    seed: u64,
) -> Result<(SeedRecord, ModelParams)> {
    let (outliers, hardness) = if method.needs_outliers() {
        let sel = choose_outliers(scored, method, &cfg.sampling)?;
        let h = sel.mean_hardness();
        (sel.samples, Some(h))
    } else {
        (Vec::new(), None)
    };
    let (student, epochs) = finetune(teacher, &data.train, &outliers, cfg, method, seed)?;
    let eval = evaluate(&student, &data.test, &data.ood, cfg.score, cfg.aupr_positive_id, seed)?;
    Ok((
        SeedRecord {
            seed,
            report: Some(eval.report),
            epochs,
            checkpoint: Some(student.checksum()),
            outlier_hardness: hardness,
            error: None,
        },
        student,
    ))
}

fn run_seed(cfg: &ExperimentConfig, data: &Datasets, methods: &[(String, MethodConfig)], seed: u64) -> SeedOutcome {
    let prepared = pretrain(cfg, &data.train, seed)
        .and_then(|(teacher, logs)| Ok((score_pool(&teacher, &data.pool)?, teacher, logs)));
    let (scored, teacher, logs) = match prepared {
        Ok(v) => v,
        Err(e) => {
            log::warn!("seed {seed}: teacher preparation failed: {e}");
            return SeedOutcome {
                teacher: TeacherRecord {
                    seed,
                    checkpoint: None,
                    epochs: Vec::new(),
                    error: Some(e.to_string()),
                },
                teacher_model: None,
                methods: methods.iter().map(|_| (failed_seed(seed, &e), None)).collect(),
            };
        }
    };
    let results = methods
        .iter()
        .map(|(name, method)| match run_method(cfg, data, &teacher, &scored, method, seed) {
            Ok((rec, student)) => (rec, Some(student)),
            Err(e) => {
                log::warn!("seed {seed}, method {name}: {e}");
                (failed_seed(seed, &e), None)
            }
        })
        .collect();
    SeedOutcome {
        teacher: TeacherRecord {
            seed,
            checkpoint: Some(teacher.checksum()),
            epochs: logs,
            error: None,
        },
        teacher_model: Some(teacher),
        methods: results,
    }
}

/// Runs every configured method on every seed. Seeds run in parallel; one
/// teacher and one pool scoring pass are shared by all methods of a seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let data = Datasets::generate(&cfg.data.specs())?;
    run_experiment_on(cfg, &data)
}

pub fn run_experiment_on(cfg: &ExperimentConfig, data: &Datasets) -> Result<RunOutput> {
    let methods = cfg.methods();
    let outcomes: Vec<SeedOutcome> = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, data, &methods, seed))
        .collect();

    let mut teachers = BTreeMap::new();
    let mut students = BTreeMap::new();
    let mut teacher_records = Vec::new();
    let mut per_method: Vec<Vec<SeedRecord>> = vec![Vec::new(); methods.len()];
    for o in outcomes {
        if let Some(t) = o.teacher_model {
            teachers.insert(o.teacher.seed, t);
        }
        teacher_records.push(o.teacher);
        for (j, (rec, student)) in o.methods.into_iter().enumerate() {
            if let Some(s) = student {
                students.insert((methods[j].0.clone(), rec.seed), s);
            }
            per_method[j].push(rec);
        }
    }
    let mut failed = false;
    let mut records = Vec::new();
    for ((name, method), seeds) in methods.into_iter().zip(per_method) {
        let summaries: Vec<_> = seeds
            .iter()
            .filter_map(|s| s.report.as_ref().map(MetricsReport::headline))
            .collect();
        failed |= summaries.len() < seeds.len();
        let aggregate = if summaries.is_empty() {
            None
        } else {
            Some(aggregate(&summaries)?)
        };
        records.push(MethodRecord {
            name,
            method,
            seeds,
            aggregate,
        });
    }
    Ok(RunOutput {
        record: RunRecord {
            config_hash: cfg.hash(),
            teachers: teacher_records,
            methods: records,
            failed,
        },
        teachers,
        students,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub q: f64,
    pub step: usize,
    pub status: String,
    pub acc: Option<f64>,
    pub fpr95: Option<f64>,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub mean_hardness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: Option<(f64, usize)>,
    pub rows: Vec<GridRow>,
}

/// Evaluates every `(q, step)` plan with `cfg.method` (sampling forced on),
/// averaging over the configured seeds. Each seed is scored once. Plans that
/// do not fit the pool are kept as `skipped` rows.
pub fn grid_search_sampling(cfg: &ExperimentConfig, q_grid: &[f64], step_grid: &[usize]) -> Result<GridResult> {
    cfg.validate()?;
    let data = Datasets::generate(&cfg.data.specs())?;
    let teachers: Vec<(u64, ModelParams, ScoredPool)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let (t, _) = pretrain(cfg, &data.train, seed)?;
            let scored = score_pool(&t, &data.pool)?;
            Ok((seed, t, scored))
        })
        .collect::<Result<_>>()?;
    let method = MethodConfig {
        use_sampling: true,
        ..cfg.method.clone()
    };
    let pool_size = data.pool.len();
    let mut rows = Vec::new();
    let mut best: Option<(f64, usize, f64)> = None;
    for &q in q_grid {
        for &step in step_grid {
            let plan = SamplePlan { q, step, m: cfg.sampling.m };
            if let Err(e) = plan.validate(pool_size) {
                log::warn!("skipping plan q={q}, step={step}: {e}");
                rows.push(GridRow {
                    q,
                    step,
                    status: "skipped".into(),
                    acc: None,
                    fpr95: None,
                    auroc: None,
                    aupr: None,
                    mean_hardness: None,
                });
                continue;
            }
            let per_seed: Vec<(MetricsReport, f64)> = teachers
                .par_iter()
                .map(|(seed, teacher, scored)| {
                    let sel = select(scored, &plan)?;
                    let (student, _) = finetune(teacher, &data.train, &sel.samples, cfg, &method, *seed)?;
                    let e = evaluate(&student, &data.test, &data.ood, cfg.score, cfg.aupr_positive_id, *seed)?;
                    Ok((e.report, sel.mean_hardness()))
                })
                .collect::<Result<_>>()?;
            let summaries: Vec<_> = per_seed.iter().map(|(r, _)| r.headline()).collect();
            let agg = aggregate(&summaries)?;
            let hardness = per_seed.iter().map(|(_, h)| h).sum::<f64>() / per_seed.len() as f64;
            if best.is_none_or(|(_, _, a)| agg.mean.auroc > a) {
                best = Some((q, step, agg.mean.auroc));
            }
            rows.push(GridRow {
                q,
                step,
                status: "ok".into(),
                acc: Some(agg.mean.acc),
                fpr95: Some(agg.mean.fpr95),
                auroc: Some(agg.mean.auroc),
                aupr: Some(agg.mean.aupr),
                mean_hardness: Some(hardness),
            });
        }
    }
    Ok(GridResult {
        best: best.map(|(q, s, _)| (q, s)),
        rows,
    })
}

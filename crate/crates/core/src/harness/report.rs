use std::fs;
use std::path::Path;

use super::config::ExperimentConfig;
use super::run::{GridResult, RunOutput, RunRecord};
use crate::error::{open_error, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::param(format!("unknown format {s:?}; expected csv or json"))),
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One row per (method, seed), then `mean` and `std` rows per method.
pub fn aggregate_csv(record: &RunRecord) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "seed", "acc", "fpr95", "auroc", "aupr"])?;
    for m in &record.methods {
        for s in &m.seeds {
            let h = s.report.as_ref().map(|r| r.headline());
            w.write_record([
                m.name.clone(),
                s.seed.to_string(),
                opt(h.map(|h| h.acc)),
                opt(h.map(|h| h.fpr95)),
                opt(h.map(|h| h.auroc)),
                opt(h.map(|h| h.aupr)),
            ])?;
        }
        if let Some(a) = &m.aggregate {
            for (label, s) in [("mean", a.mean), ("std", a.std)] {
                w.write_record([
                    m.name.clone(),
                    label.to_string(),
                    s.acc.to_string(),
                    s.fpr95.to_string(),
                    s.auroc.to_string(),
                    s.aupr.to_string(),
                ])?;
            }
        }
    }
    finish(w)
}

/// Per-OOD-set metrics of every (method, seed).
pub fn per_set_csv(record: &RunRecord) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "seed", "set", "fpr95", "auroc", "aupr"])?;
    for m in &record.methods {
        for s in &m.seeds {
            let Some(r) = &s.report else { continue };
            for p in &r.per_set {
                w.write_record([
                    m.name.clone(),
                    s.seed.to_string(),
                    p.name.clone(),
                    p.metrics.fpr95.to_string(),
                    p.metrics.auroc.to_string(),
                    p.metrics.aupr.to_string(),
                ])?;
            }
            w.write_record([
                m.name.clone(),
                s.seed.to_string(),
                "average".into(),
                r.average.fpr95.to_string(),
                r.average.auroc.to_string(),
                r.average.aupr.to_string(),
            ])?;
        }
    }
    finish(w)
}

pub fn grid_csv(grid: &GridResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["q", "step", "status", "acc", "fpr95", "auroc", "aupr", "mean_hardness"])?;
    for r in &grid.rows {
        w.write_record([
            r.q.to_string(),
            r.step.to_string(),
            r.status.clone(),
            opt(r.acc),
            opt(r.fpr95),
            opt(r.auroc),
            opt(r.aupr),
            opt(r.mean_hardness),
        ])?;
    }
    finish(w)
}

/// Writes config, record, CSV summaries, per-seed reports and checkpoints.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    fs::write(dir.join("record.json"), serde_json::to_vec_pretty(&out.record)?)?;
    fs::write(dir.join("aggregate.csv"), aggregate_csv(&out.record)?)?;
    fs::write(dir.join("per_set.csv"), per_set_csv(&out.record)?)?;
    for m in &out.record.methods {
        let reports = dir.join("reports").join(&m.name);
        fs::create_dir_all(&reports)?;
        for s in &m.seeds {
            fs::write(
                reports.join(format!("seed-{}.json", s.seed)),
                serde_json::to_vec_pretty(s)?,
            )?;
        }
    }
    let ckpt = dir.join("checkpoints");
    for (seed, t) in &out.teachers {
        t.save(&ckpt.join(format!("teacher-seed-{seed}.json")))?;
    }
    for ((name, seed), s) in &out.students {
        s.save(&ckpt.join(name).join(format!("seed-{seed}.json")))?;
    }
    Ok(())
}

pub fn read_record(run_dir: &Path) -> Result<RunRecord> {
    let path = run_dir.join("record.json");
    let bytes = fs::read(&path).map_err(|e| open_error(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use oe_tune::data::{generate, Dataset, DatasetKind};
use oe_tune::harness::{
    aggregate_csv, evaluate, finetune, grid_csv, grid_search_sampling, pretrain, read_record, run_experiment,
    write_run, Datasets, ExperimentConfig, ReportFormat,
};
use oe_tune::metrics::{curve_points, write_curve_csv, ScoreKind};
use oe_tune::model::ModelParams;
use oe_tune::sampling::{default_q_grid, default_step_grid, score_pool, select, take_first, SamplePlan, ScoredPool};
use oe_tune::{Error, Result};

#[derive(Parser)]
#[command(name = "oe-tune", version, about = "Outlier-exposure fine-tuning experiments on synthetic data")]
struct Cli {
    /// Root directory for all outputs.
    #[arg(long, env = "OE_TUNE_OUT", default_value = "runs", global = true)]
    out: PathBuf,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the default experiment config as TOML.
    DefaultConfig {
        /// Emit the long-tailed variant.
        #[arg(long)]
        long_tailed: bool,
    },
    /// Generate every dataset of a config into <out>/<name>/data.
    GenData {
        config: PathBuf,
        /// Also write CSV copies.
        #[arg(long)]
        csv: bool,
    },
    /// Train the teacher on in-distribution data.
    Pretrain {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score the outlier pool with the teacher and write the selected subset.
    SampleOutliers {
        config: PathBuf,
        #[arg(long)]
        q: Option<f64>,
        #[arg(long)]
        step: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune a copy of the teacher with the configured method.
    Finetune {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate the fine-tuned model (or the teacher) on the test sets.
    Eval {
        config: PathBuf,
        #[arg(long, default_value = "msp")]
        score: ScoreKind,
        #[arg(long)]
        seed: Option<u64>,
        /// Evaluate the teacher instead of the fine-tuned model.
        #[arg(long)]
        teacher: bool,
    },
    /// Full pipeline over seeds and methods; writes <out>/<name>/run.
    Run {
        config: PathBuf,
        /// `a..b` (inclusive) or a comma list; overrides the config.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Grid search over sampling quantile and step.
    Grid {
        config: PathBuf,
    },
    /// Print the aggregate of a finished run.
    Report {
        run_dir: PathBuf,
        #[arg(long, default_value = "csv")]
        format: ReportFormat,
    },
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("cannot parse seed list {s:?}"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect()
}

struct Ctx {
    cfg: ExperimentConfig,
    dir: PathBuf,
}

impl Ctx {
    fn new(out: &Path, config: &Path) -> Result<Self> {
        let cfg = ExperimentConfig::load(config)?;
        let dir = out.join(&cfg.name);
        Ok(Self { cfg, dir })
    }

    fn seed(&self, seed: Option<u64>) -> u64 {
        seed.unwrap_or(self.cfg.seeds[0])
    }

    fn seed_dir(&self, seed: u64) -> PathBuf {
        self.dir.join(format!("seed-{seed}"))
    }

    fn data(&self) -> Result<Datasets> {
        Datasets::generate(&self.cfg.data.specs())
    }
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, serde_json::to_vec_pretty(v)?)?;
    Ok(())
}

fn load_or_score(teacher: &ModelParams, pool: &Dataset, sidecar: &Path) -> Result<ScoredPool> {
    if let Ok(cached) = ScoredPool::load_sidecar(sidecar, pool) {
        if cached.teacher_hash == teacher.checksum() {
            return Ok(cached);
        }
    }
    let scored = score_pool(teacher, pool)?;
    scored.save_sidecar(sidecar)?;
    Ok(scored)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::DefaultConfig { long_tailed } => {
            let cfg = if long_tailed {
                ExperimentConfig::long_tailed()
            } else {
                ExperimentConfig::default()
            };
            print!("{}", cfg.to_toml()?);
        }
        Cmd::GenData { config, csv } => {
            let ctx = Ctx::new(&cli.out, &config)?;
            let specs = ctx.cfg.data.specs();
            let dir = ctx.dir.join("data");
            fs::create_dir_all(&dir)?;
            for spec in std::iter::once(&specs.train)
                .chain([&specs.test, &specs.pool])
                .chain(&specs.ood)
            {
                let ds = generate(spec)?;
                ds.save(&dir.join(format!("{}.bin", spec.name)))?;
                if csv {
                    ds.save_csv(&dir.join(format!("{}.csv", spec.name)))?;
                }
                println!("{:<18} {:>6} rows  {}", spec.name, ds.len(), &ds.provenance()[..12]);
            }
        }
        Cmd::Pretrain { config, seed } => {
            let ctx = Ctx::new(&cli.out, &config)?;
            let seed = ctx.seed(seed);
            let data = ctx.data()?;
            let (teacher, logs) = pretrain(&ctx.cfg, &data.train, seed)?;
            let dir = ctx.seed_dir(seed);
            teacher.save(&dir.join("teacher.json"))?;
            write_json(&dir.join("pretrain-log.json"), &logs)?;
            if let Some(l) = logs.last() {
                println!("epoch {}: loss {:.6}", l.epoch, l.loss.total);
            }
            println!("teacher {}", teacher.checksum());
        }
        Cmd::SampleOutliers { config, q, step, m, seed } => {
            let ctx = Ctx::new(&cli.out, &config)?;
            let seed = ctx.seed(seed);
            let dir = ctx.seed_dir(seed);
            let teacher = ModelParams::load(&dir.join("teacher.json"))?;
            let pool = oe_tune::data::gen_outlier_pool(&ctx.cfg.data.specs().pool)?;
            let scored = load_or_score(&teacher, &pool, &dir.join("pool-scores.json"))?;
            let plan = SamplePlan {
                q: q.unwrap_or(ctx.cfg.sampling.q),
                step: step.unwrap_or(ctx.cfg.sampling.step),
                m: m.unwrap_or(ctx.cfg.sampling.m),
            };
            let sel = if ctx.cfg.method.use_sampling {
                select(&scored, &plan)?
            } else {
                take_first(&scored, plan.m)?
            };
            let mut spec = pool.spec.derive(DatasetKind::OutlierPool, "sampled-outliers", pool.spec.seed);
            spec.count = sel.len();
            Dataset {
                spec,
                inputs: sel.samples.clone(),
                labels: None,
            }
            .save(&dir.join("outliers.bin"))?;
            write_json(
                &dir.join("selection.json"),
                &serde_json::json!({ "plan": plan, "indices": sel.indices, "hardness": sel.hardness }),
            )?;
            println!("selected {} outliers, mean hardness {:.6}", sel.len(), sel.mean_hardness());
        }
        Cmd::Finetune { config, seed } => {
            let ctx = Ctx::new(&cli.out, &config)?;
            let seed = ctx.seed(seed);
            let dir = ctx.seed_dir(seed);
            let teacher = ModelParams::load(&dir.join("teacher.json"))?;
            let data = ctx.data()?;
            let outliers = if ctx.cfg.method.needs_outliers() {
                Dataset::load(&dir.join("outliers.bin"))?.inputs
            } else {
                Vec::new()
            };
            let (student, logs) = finetune(&teacher, &data.train, &outliers, &ctx.cfg, &ctx.cfg.method, seed)?;
            student.save(&dir.join("student.json"))?;
            write_json(&dir.join("finetune-log.json"), &logs)?;
            for l in &logs {
                println!(
                    "epoch {:>3}  total {:.6}  ce {:.6}  reg {:.6}  kd {:.6}  sc {:.6}",
                    l.epoch, l.loss.total, l.loss.classification, l.loss.reg, l.loss.kd, l.loss.sc
                );
            }
        }
        Cmd::Eval { config, score, seed, teacher } => {
            let ctx = Ctx::new(&cli.out, &config)?;
            let seed = ctx.seed(seed);
            let dir = ctx.seed_dir(seed);
            let which = if teacher { "teacher" } else { "student" };
            let model = ModelParams::load(&dir.join(format!("{which}.json")))?;
            let data = ctx.data()?;
            let e = evaluate(&model, &data.test, &data.ood, score, ctx.cfg.aupr_positive_id, seed)?;
            let tag = format!("{which}-{}", serde_json::to_value(score)?.as_str().unwrap_or("score"));
            write_json(&dir.join(format!("eval-{tag}.json")), &e.report)?;
            let curves = dir.join(format!("curves-{tag}"));
            fs::create_dir_all(&curves)?;
            for (name, set) in &e.scores {
                write_curve_csv(&curve_points(set)?, &curves.join(format!("{name}.csv")))?;
                set.write_csv(&curves.join(format!("{name}-scores.csv")))?;
            }
            println!("acc {:.4}", e.report.acc);
            for s in &e.report.per_set {
                println!(
                    "{:<18} fpr95 {:.4}  auroc {:.4}  aupr {:.4}",
                    s.name, s.metrics.fpr95, s.metrics.auroc, s.metrics.aupr
                );
            }
            let a = e.report.average;
            println!("{:<18} fpr95 {:.4}  auroc {:.4}  aupr {:.4}", "average", a.fpr95, a.auroc, a.aupr);
        }
        Cmd::Run { config, seeds } => {
            let mut ctx = Ctx::new(&cli.out, &config)?;
            if let Some(s) = seeds {
                ctx.cfg.seeds = parse_seeds(&s)?;
            }
            let out = run_experiment(&ctx.cfg)?;
            let dir = ctx.dir.join("run");
            write_run(&dir, &ctx.cfg, &out)?;
            print!("{}", aggregate_csv(&out.record)?);
            println!("record {}", out.record.hash());
            if out.record.failed {
                return Err(Error::Diverged(format!(
                    "some seeds failed; see {}",
                    dir.join("record.json").display()
                )));
            }
        }
        Cmd::Grid { config } => {
            let ctx = Ctx::new(&cli.out, &config)?;
            let grid = grid_search_sampling(&ctx.cfg, &default_q_grid(), &default_step_grid())?;
            let csv = grid_csv(&grid)?;
            fs::create_dir_all(&ctx.dir)?;
            fs::write(ctx.dir.join("grid.csv"), &csv)?;
            print!("{csv}");
            if let Some((q, step)) = grid.best {
                println!("best q={q} step={step}");
            }
        }
        Cmd::Report { run_dir, format } => {
            let record = read_record(&run_dir)?;
            match format {
                ReportFormat::Csv => print!("{}", aggregate_csv(&record)?),
                ReportFormat::Json => {
                    let summary: Vec<_> = record
                        .methods
                        .iter()
                        .map(|m| serde_json::json!({ "method": m.name, "aggregate": m.aggregate }))
                        .collect();
                    println!("{}", serde_json::to_string_pretty(&summary)?);
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

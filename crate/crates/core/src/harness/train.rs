use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, MethodConfig};
use crate::augment::{feature_std, multi_batch_transform};
use crate::autodiff::{Gradients, Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    classification_loss, kd_loss, oe_uniform_loss, oscl_loss, total_loss, LossBreakdown, LossTerms,
};
use crate::model::{ModelParams, ParamVars};

/// Purpose tags for [`sub_seed`].
pub(crate) mod stream {
    pub const INIT: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    pub const FINETUNE: u64 = 3;
    pub const AUGMENT: u64 = 4;
}

/// Independent 64-bit seed for one purpose of one run seed (splitmix64).
pub fn sub_seed(seed: u64, purpose: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(purpose.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr_first: f64,
    pub lr_last: f64,
    pub steps: usize,
    /// Step-averaged components; `total` is the average of step totals.
    pub loss: LossBreakdown,
}

struct EpochAccumulator {
    sum: [f64; 5],
    steps: usize,
    lr_first: f64,
    lr_last: f64,
}

impl EpochAccumulator {
    fn new() -> Self {
        Self {
            sum: [0.0; 5],
            steps: 0,
            lr_first: f64::NAN,
            lr_last: f64::NAN,
        }
    }

    fn add(&mut self, b: &LossBreakdown, lr: f64) {
        if self.steps == 0 {
            self.lr_first = lr;
        }
        self.lr_last = lr;
        for (s, v) in self.sum.iter_mut().zip([b.classification, b.reg, b.kd, b.sc, b.total]) {
            *s += v;
        }
        self.steps += 1;
    }

    fn finish(self, epoch: usize) -> EpochLog {
        let n = self.steps.max(1) as f64;
        let [c, r, k, s, t] = self.sum.map(|v| v / n);
        EpochLog {
            epoch,
            lr_first: self.lr_first,
            lr_last: self.lr_last,
            steps: self.steps,
            loss: LossBreakdown {
                classification: c,
                reg: r,
                kd: k,
                sc: s,
                total: t,
            },
        }
    }
}

fn collect_grads(grads: &Gradients, pv: &ParamVars<'_>) -> Vec<Vec<f64>> {
    pv.vars
        .iter()
        .map(|v| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; v.numel()]))
        .collect()
}

fn zero_velocity(model: &ModelParams) -> Vec<Vec<f64>> {
    model.tensors().iter().map(|t| vec![0.0; t.numel()]).collect()
}

fn check_step(model: &ModelParams, loss: &LossBreakdown, phase: &str, epoch: usize, step: usize) -> Result<()> {
    if !loss.total.is_finite() {
        return Err(Error::Diverged(format!(
            "{phase}: non-finite loss at epoch {epoch}, step {step}: {loss:?}"
        )));
    }
    if !model.is_finite() {
        return Err(Error::Diverged(format!(
            "{phase}: non-finite parameters after epoch {epoch}, step {step} (loss {loss:?})"
        )));
    }
    Ok(())
}

fn labels_of(train: &Dataset) -> Result<&[usize]> {
    train
        .labels
        .as_deref()
        .ok_or_else(|| Error::Data("training set has no labels".into()))
}

/// Cross-entropy training from a fresh initialisation.
pub fn pretrain(cfg: &ExperimentConfig, train: &Dataset, seed: u64) -> Result<(ModelParams, Vec<EpochLog>)> {
    let labels = labels_of(train)?;
    let mut model = ModelParams::init(cfg.model_dims(), &cfg.model.hidden, sub_seed(seed, stream::INIT))?;
    let o = &cfg.optim;
    let n = train.len();
    let d = train.dim();
    let per_epoch = n.div_ceil(o.batch_in);
    let total = per_epoch * o.epochs_pretrain;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, stream::PRETRAIN));
    let mut velocity = zero_velocity(&model);
    let mut order: Vec<usize> = (0..n).collect();
    let mut logs = Vec::with_capacity(o.epochs_pretrain);
    let mut t = 0;
    for epoch in 0..o.epochs_pretrain {
        order.shuffle(&mut rng);
        let mut acc = EpochAccumulator::new();
        for (step, idx) in order.chunks(o.batch_in).enumerate() {
            let lr = o.schedule.lr(o.lr_pretrain, t, total);
            t += 1;
            let tape = Tape::new();
            let pv = model.record(&tape);
            let x = tape.constant(vec![idx.len(), d], train.gather(idx))?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let out = model.forward_tape(&pv, x, false)?;
            let loss = classification_loss(out.logits, &y)?;
            let value = loss.item();
            let b = LossBreakdown {
                classification: value,
                total: value,
                ..LossBreakdown::default()
            };
            let grads = tape.backward(loss)?;
            let g = collect_grads(&grads, &pv);
            model.sgd_step(&g, &mut velocity, lr, o.momentum, o.weight_decay);
            check_step(&model, &b, "pretrain", epoch, step)?;
            acc.add(&b, lr);
        }
        logs.push(acc.finish(epoch));
    }
    Ok((model, logs))
}

/// Replacement-free cycling over a shuffled index set.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

fn gather_rows(x: &[f64], d: usize, idx: &[usize]) -> Vec<f64> {
    idx.iter().flat_map(|&i| x[i * d..(i + 1) * d].iter().copied()).collect()
}

/// Combined-objective fine-tuning of a copy of `teacher`; the teacher is only read.
///
/// `outliers` is a row-major `m × D` buffer of the sampled auxiliary set.
pub fn finetune(
    teacher: &ModelParams,
    train: &Dataset,
    outliers: &[f64],
    cfg: &ExperimentConfig,
    method: &MethodConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<EpochLog>)> {
    let labels = labels_of(train)?;
    let w = method.effective_weights();
    w.validate()?;
    let d = train.dim();
    if outliers.len() % d != 0 {
        return Err(Error::shape("outlier buffer is not a whole number of rows"));
    }
    let m = outliers.len() / d;
    if method.needs_outliers() && m == 0 {
        return Err(Error::Config(
            "the method needs outliers but the sampled set is empty".into(),
        ));
    }
    let use_out = method.needs_outliers();
    let noise_std = feature_std(&train.inputs);

    let mut student = teacher.clone();
    student.push_lineage(seed);
    let o = &cfg.optim;
    let n = train.len();
    let per_epoch = n.div_ceil(o.batch_in);
    let total = per_epoch * o.epochs_finetune;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, stream::FINETUNE));
    let aug_seed = sub_seed(seed, stream::AUGMENT);
    let mut velocity = zero_velocity(&student);
    let mut order: Vec<usize> = (0..n).collect();
    let mut out_cycle = Cycler::new(if use_out { m } else { 0 }, &mut rng);
    let mut logs = Vec::with_capacity(o.epochs_finetune);
    let mut t = 0usize;

    for epoch in 0..o.epochs_finetune {
        order.shuffle(&mut rng);
        let mut acc = EpochAccumulator::new();
        for (step, idx) in order.chunks(o.batch_in).enumerate() {
            let lr = o.schedule.lr(o.lr_finetune, t, total);
            let x_in = train.gather(idx);
            let y_in: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let x_out = if use_out {
                gather_rows(outliers, d, &out_cycle.next_batch(o.batch_out, &mut rng))
            } else {
                Vec::new()
            };

            let tape = Tape::new();
            let pv = student.record(&tape);
            let terms = step_terms(
                &tape,
                &pv,
                &student,
                teacher,
                method,
                cfg,
                StepBatch {
                    x_in: &x_in,
                    y_in: &y_in,
                    x_out: &x_out,
                    dim: d,
                    aug_seed: aug_seed.wrapping_add(t as u64),
                    noise_std,
                },
            )?;
            let (loss, b) = total_loss(&terms, &w)?;
            t += 1;
            let grads = tape.backward(loss)?;
            let g = collect_grads(&grads, &pv);
            student.sgd_step(&g, &mut velocity, lr, o.momentum, o.weight_decay);
            check_step(&student, &b, "finetune", epoch, step)?;
            acc.add(&b, lr);
        }
        logs.push(acc.finish(epoch));
    }
    Ok((student, logs))
}

struct StepBatch<'a> {
    x_in: &'a [f64],
    y_in: &'a [usize],
    x_out: &'a [f64],
    dim: usize,
    aug_seed: u64,
    noise_std: f64,
}

fn step_terms<'t>(
    tape: &'t Tape,
    pv: &ParamVars<'t>,
    student: &ModelParams,
    teacher: &ModelParams,
    method: &MethodConfig,
    cfg: &ExperimentConfig,
    batch: StepBatch<'_>,
) -> Result<LossTerms<'t>> {
    let w = method.effective_weights();
    let d = batch.dim;
    let b_in = batch.y_in.len();
    let b_out = batch.x_out.len() / d;
    let x_in = tape.constant(vec![b_in, d], batch.x_in.to_vec())?;
    let z_in = student.forward_tape(pv, x_in, false)?.logits;
    let classification = classification_loss(z_in, batch.y_in)?;

    let z_out = if b_out > 0 && (w.lambda_reg > 0.0 || (w.lambda_kd > 0.0 && method.kd_on_outliers)) {
        let x_out = tape.constant(vec![b_out, d], batch.x_out.to_vec())?;
        Some(student.forward_tape(pv, x_out, false)?.logits)
    } else {
        None
    };

    let reg = if w.lambda_reg > 0.0 { oe_uniform_loss(z_out)? } else { None };

    let kd = if w.lambda_kd > 0.0 {
        let k = student.dims().classes;
        let t_in = tape.constant(vec![b_in, k], teacher.logits(batch.x_in, b_in)?)?;
        match z_out.filter(|_| method.kd_on_outliers) {
            Some(z_out) => {
                let t_out = tape.constant(vec![b_out, k], teacher.logits(batch.x_out, b_out)?)?;
                Some(kd_loss(z_in.concat_rows(&z_out)?, t_in.concat_rows(&t_out)?, w.t_kd)?)
            }
            None => Some(kd_loss(z_in, t_in, w.t_kd)?),
        }
    } else {
        None
    };

    let sc = if w.lambda_sc > 0.0 {
        Some(contrastive_term(tape, pv, student, method, cfg, &batch)?)
    } else {
        None
    };

    Ok(LossTerms {
        classification,
        reg,
        kd,
        sc,
    })
}

/// n-batch transform of `B_in ∪ B_out`, then the outlier-aware contrastive loss.
fn contrastive_term<'t>(
    tape: &'t Tape,
    pv: &ParamVars<'t>,
    student: &ModelParams,
    method: &MethodConfig,
    cfg: &ExperimentConfig,
    batch: &StepBatch<'_>,
) -> Result<Var<'t>> {
    let d = batch.dim;
    let b_in = batch.y_in.len();
    let b_out = batch.x_out.len() / d;
    let mut x_all = batch.x_in.to_vec();
    x_all.extend_from_slice(batch.x_out);
    let mut y_all = batch.y_in.to_vec();
    y_all.resize(b_in + b_out, 0);
    let mut flags = vec![false; b_in];
    flags.resize(b_in + b_out, true);
    let spec = cfg.augment.transform(batch.noise_std, batch.aug_seed);
    let mb = multi_batch_transform(&x_all, d, &y_all, &flags, &spec)?;

    let (mut xi, mut yi, mut xo) = (Vec::new(), Vec::new(), Vec::new());
    for (r, (&y, &is_out)) in mb.labels.iter().zip(&mb.is_outlier).enumerate() {
        let row = &mb.inputs[r * d..(r + 1) * d];
        if is_out {
            xo.extend_from_slice(row);
        } else {
            xi.extend_from_slice(row);
            yi.push(y);
        }
    }
    let ni = yi.len();
    let e_in = student
        .forward_tape(pv, tape.constant(vec![ni, d], xi)?, true)?
        .embedding
        .expect("embedding requested");
    let e_out = if xo.is_empty() {
        None
    } else {
        let no = xo.len() / d;
        student.forward_tape(pv, tape.constant(vec![no, d], xo)?, true)?.embedding
    };
    oscl_loss(e_in, &yi, e_out, method.weights.tau_sc, method.sc_reduction)
}

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{
    accuracy, argmax, DetectionMetrics, MetricsReport, ScoreKind, ScoreSet, SetMetrics,
};
use crate::model::ModelParams;

/// Report plus the raw score sets, one per OOD set, in input order.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub scores: Vec<(String, ScoreSet)>,
}

fn scores(model: &ModelParams, ds: &Dataset, kind: ScoreKind) -> Result<(Vec<f64>, Vec<usize>)> {
    let k = model.dims().classes;
    let logits = model.logits(&ds.inputs, ds.len())?;
    Ok(logits.chunks(k).map(|z| (kind.score(z), argmax(z))).unzip())
}

pub fn evaluate(
    model: &ModelParams,
    id_test: &Dataset,
    ood: &[Dataset],
    kind: ScoreKind,
    aupr_positive_id: bool,
    seed: u64,
) -> Result<Evaluation> {
    if !model.is_finite() {
        return Err(Error::Numeric("model has non-finite parameters".into()));
    }
    if ood.is_empty() {
        return Err(Error::Data("no OOD test sets given".into()));
    }
    let truths = id_test
        .labels
        .as_deref()
        .ok_or_else(|| Error::Data("id test set has no labels".into()))?;
    let (id_scores, preds) = scores(model, id_test, kind)?;
    let acc = accuracy(&preds, truths)?;
    let per: Vec<(SetMetrics, (String, ScoreSet))> = ood
        .par_iter()
        .map(|ds| {
            let (ood_scores, _) = scores(model, ds, kind)?;
            let set = ScoreSet::new(id_scores.clone(), ood_scores)?;
            let metrics = DetectionMetrics::compute(&set, aupr_positive_id)?;
            let name = ds.spec.name.clone();
            Ok((
                SetMetrics {
                    name: name.clone(),
                    metrics,
                },
                (name, set),
            ))
        })
        .collect::<Result<_>>()?;
    let (per_set, scores) = per.into_iter().unzip();
    Ok(Evaluation {
        report: MetricsReport::new(seed, acc, per_set)?,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_ood_specs, gen_id, gen_ood_testsets, DatasetSpec};
    use crate::model::ModelDims;

    #[test]
    fn zero_model_is_chance() {
        let dims = ModelDims {
            input: 2,
            feature: 4,
            embed: 3,
            classes: 10,
        };
        let mut m = ModelParams::init(dims, &[5], 0).unwrap();
        for t in m.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut spec = DatasetSpec::id_test(1);
        spec.n_max = 10;
        let test = gen_id(&spec).unwrap();
        let ood = gen_ood_testsets(&default_ood_specs(&spec, 5)).unwrap();
        let e = evaluate(&m, &test, &ood, ScoreKind::Msp, true, 1).unwrap();
        assert!(e.report.per_set.iter().all(|s| s.metrics.auroc == 0.5));
        let mean = e.report.per_set.iter().map(|s| s.metrics.fpr95).sum::<f64>() / 6.0;
        assert!((e.report.average.fpr95 - mean).abs() < 1e-12);
        assert!(evaluate(&m, &test, &[], ScoreKind::Msp, true, 1).is_err());
    }
}

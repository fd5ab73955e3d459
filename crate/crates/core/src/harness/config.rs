use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::TransformSpec;
use crate::data::{default_ood_specs, DatasetKind, DatasetSpec, OodShape, PoolGeometry};
use crate::error::{open_error, Error, Result};
use crate::losses::{LossWeights, ScReduction};
use crate::metrics::ScoreKind;
use crate::model::ModelDims;
use crate::sampling::SamplePlan;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub dim: usize,
    pub n_max: usize,
    /// Long-tail ratio of the training set; the test set is always balanced.
    pub imbalance: f64,
    pub class_radius: f64,
    pub class_sigma: f64,
    pub test_per_class: usize,
    pub pool_size: usize,
    pub pool: PoolGeometry,
    pub ood_count: usize,
    /// Replaces the six default OOD sets when non-empty.
    pub ood_sets: Vec<OodSetConfig>,
    /// Datasets are fixed per config; training seeds do not change them.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodSetConfig {
    pub name: String,
    pub shape: OodShape,
}

impl Default for DataConfig {
    fn default() -> Self {
        let base = DatasetSpec::default();
        Self {
            classes: base.classes,
            dim: base.dim,
            n_max: base.n_max,
            imbalance: 1.0,
            class_radius: base.class_radius,
            class_sigma: base.class_sigma,
            test_per_class: 200,
            pool_size: 5000,
            pool: PoolGeometry::default(),
            ood_count: 1000,
            ood_sets: Vec::new(),
            seed: 2024,
        }
    }
}

/// Every dataset an experiment touches.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpecs {
    pub train: DatasetSpec,
    pub test: DatasetSpec,
    pub pool: DatasetSpec,
    pub ood: Vec<DatasetSpec>,
}

impl DataConfig {
    fn base(&self) -> DatasetSpec {
        DatasetSpec {
            classes: self.classes,
            dim: self.dim,
            n_max: self.n_max,
            imbalance: self.imbalance,
            class_radius: self.class_radius,
            class_sigma: self.class_sigma,
            pool: self.pool.clone(),
            ..DatasetSpec::default()
        }
    }

    pub fn specs(&self) -> DataSpecs {
        let base = self.base();
        let s = self.seed;
        let mut test = base.derive(DatasetKind::IdTest, "id-test", s.wrapping_add(1));
        test.n_max = self.test_per_class;
        test.imbalance = 1.0;
        let mut pool = base.derive(DatasetKind::OutlierPool, "outlier-pool", s.wrapping_add(2));
        pool.count = self.pool_size;
        let ood_seed = s.wrapping_add(100);
        let mut ood = if self.ood_sets.is_empty() {
            default_ood_specs(&base, ood_seed)
        } else {
            self.ood_sets
                .iter()
                .enumerate()
                .map(|(i, o)| DatasetSpec {
                    kind: DatasetKind::OodTest,
                    name: o.name.clone(),
                    shape: Some(o.shape.clone()),
                    seed: ood_seed.wrapping_add(i as u64),
                    ..base.clone()
                })
                .collect()
        };
        for o in &mut ood {
            o.count = self.ood_count;
            o.imbalance = 1.0;
        }
        DataSpecs {
            train: base.derive(DatasetKind::IdTrain, "id-train", s),
            test,
            pool,
            ood,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub feature: usize,
    pub embed: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            feature: 64,
            embed: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    #[default]
    Cosine,
}

impl Schedule {
    /// Learning rate at step `t` of `total`.
    pub fn lr(self, base: f64, t: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine if total <= 1 => base,
            Schedule::Cosine => {
                let frac = t as f64 / (total - 1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub batch_in: usize,
    pub batch_out: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_pretrain: 0.02,
            lr_finetune: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::Cosine,
            epochs_pretrain: 50,
            epochs_finetune: 20,
            batch_in: 128,
            batch_out: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub n: usize,
    /// Additive noise σ as a fraction of the training-feature std.
    pub noise_fraction: f64,
    pub jitter_scale: f64,
    pub max_rows: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            n: 8,
            noise_fraction: 0.05,
            jitter_scale: 0.05,
            max_rows: 8192,
        }
    }
}

impl AugmentConfig {
    pub fn transform(&self, feature_std: f64, seed: u64) -> TransformSpec {
        TransformSpec {
            n: self.n,
            noise_sigma: self.noise_fraction * feature_std,
            jitter_scale: self.jitter_scale,
            max_rows: self.max_rows,
            seed,
        }
    }
}

/// Which fine-tuning factors are active, and their coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub use_oe: bool,
    pub use_kd: bool,
    pub use_sampling: bool,
    pub use_oscl: bool,
    pub weights: LossWeights,
    pub sc_reduction: ScReduction,
    /// Also distil on outlier inputs.
    pub kd_on_outliers: bool,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            use_oe: true,
            use_kd: true,
            use_sampling: true,
            use_oscl: true,
            weights: LossWeights::default(),
            sc_reduction: ScReduction::Mean,
            kd_on_outliers: false,
        }
    }
}

impl MethodConfig {
    /// Coefficients with inactive factors zeroed.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            lambda_reg: if self.use_oe { self.weights.lambda_reg } else { 0.0 },
            lambda_kd: if self.use_kd { self.weights.lambda_kd } else { 0.0 },
            lambda_sc: if self.use_oscl { self.weights.lambda_sc } else { 0.0 },
            ..self.weights
        }
    }

    pub fn needs_outliers(&self) -> bool {
        let w = self.effective_weights();
        w.lambda_reg > 0.0 || w.lambda_sc > 0.0 || (w.lambda_kd > 0.0 && self.kd_on_outliers)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rung {
    #[serde(rename = "ce-only")]
    CeOnly,
    #[serde(rename = "oe")]
    Oe,
    #[serde(rename = "oe+kd")]
    OeKd,
    #[serde(rename = "oe+sampling")]
    OeSampling,
    #[serde(rename = "oe+oscl")]
    OeOscl,
    #[default]
    #[serde(rename = "oe+all")]
    OeAll,
}

impl Rung {
    pub const ALL: [Rung; 6] = [
        Rung::CeOnly,
        Rung::Oe,
        Rung::OeKd,
        Rung::OeSampling,
        Rung::OeOscl,
        Rung::OeAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Rung::CeOnly => "ce-only",
            Rung::Oe => "oe",
            Rung::OeKd => "oe+kd",
            Rung::OeSampling => "oe+sampling",
            Rung::OeOscl => "oe+oscl",
            Rung::OeAll => "oe+all",
        }
    }

    /// The rung's method, derived from `base` by toggling flags. Rungs with
    /// any factor keep `base.weights`; the plain OE rung uses
    /// `oe_lambda_reg`.
    pub fn method(self, base: &MethodConfig, oe_lambda_reg: f64) -> MethodConfig {
        let (oe, kd, sampling, oscl) = match self {
            Rung::CeOnly => (false, false, false, false),
            Rung::Oe => (true, false, false, false),
            Rung::OeKd => (true, true, false, false),
            Rung::OeSampling => (true, false, true, false),
            Rung::OeOscl => (true, false, false, true),
            Rung::OeAll => (true, true, true, true),
        };
        let mut m = MethodConfig {
            use_oe: oe,
            use_kd: kd,
            use_sampling: sampling,
            use_oscl: oscl,
            ..base.clone()
        };
        if self == Rung::Oe {
            m.weights.lambda_reg = oe_lambda_reg;
        }
        m
    }
}

impl std::str::FromStr for Rung {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Rung::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub method: MethodConfig,
    pub sampling: SamplePlan,
    pub augment: AugmentConfig,
    /// `λ_reg` of the plain OE rung.
    pub oe_lambda_reg: f64,
    /// Methods run by `run`; empty runs `method` alone under the name "custom".
    pub ladder: Vec<Rung>,
    pub score: ScoreKind,
    pub aupr_positive_id: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            name: "balanced".into(),
            seeds: (1..=8).collect(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            method: MethodConfig::default(),
            sampling: SamplePlan {
                q: 0.5,
                step: 1,
                m: 500,
            },
            augment: AugmentConfig::default(),
            oe_lambda_reg: 0.5,
            ladder: Rung::ALL.to_vec(),
            score: ScoreKind::Msp,
            aupr_positive_id: true,
        }
    }
}

impl ExperimentConfig {
    /// The long-tailed variant: training ratio 0.01 from a 2000-sample head,
    /// so the rarest class keeps 20 samples; the test set stays balanced.
    pub fn long_tailed() -> Self {
        let mut c = Self {
            name: "long-tailed".into(),
            ..Self::default()
        };
        c.data.imbalance = 0.01;
        c.data.n_max = 2000;
        c
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            input: self.data.dim,
            feature: self.model.feature,
            embed: self.model.embed,
            classes: self.data.classes,
        }
    }

    /// `(name, method)` pairs executed by `run`.
    pub fn methods(&self) -> Vec<(String, MethodConfig)> {
        if self.ladder.is_empty() {
            vec![("custom".into(), self.method.clone())]
        } else {
            self.ladder
                .iter()
                .map(|r| (r.name().to_string(), r.method(&self.method, self.oe_lambda_reg)))
                .collect()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return cfg(format!("config version {} unsupported (expected {CONFIG_VERSION})", self.version));
        }
        if self.seeds.is_empty() {
            return cfg("at least one seed is required".into());
        }
        let o = &self.optim;
        if !(o.lr_pretrain > 0.0) || !(o.lr_finetune > 0.0) {
            return cfg("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) {
            return cfg("momentum must lie in [0,1) and weight decay be ≥ 0".into());
        }
        if o.batch_in == 0 || o.batch_out == 0 {
            return cfg("batch sizes must be positive".into());
        }
        if o.epochs_finetune == 0 {
            return cfg("epochs_finetune must be ≥ 1".into());
        }
        if self.model.feature == 0 || self.model.embed == 0 || self.model.hidden.contains(&0) {
            return cfg("model widths must be positive".into());
        }
        if !(self.oe_lambda_reg >= 0.0) {
            return cfg("oe_lambda_reg must be ≥ 0".into());
        }
        self.method.weights.validate()?;
        self.sampling.validate(self.data.pool_size)?;
        self.augment.transform(1.0, 0).validate()?;
        let specs = self.data.specs();
        for s in std::iter::once(&specs.train)
            .chain([&specs.test, &specs.pool])
            .chain(&specs.ood)
        {
            s.validate()?;
        }
        specs.train.class_counts()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| open_error(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::TomlDe(e) => Error::format(path, e.to_string()),
            other => other,
        })
    }

    /// sha256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_document_uses_defaults() {
        let c = ExperimentConfig::from_toml("version = 1\nseeds = [3]\n[optim]\nepochs_finetune = 2\n")
            .unwrap();
        assert_eq!(c.seeds, vec![3]);
        assert_eq!(c.optim.epochs_finetune, 2);
        assert_eq!(c.optim.batch_in, 128);
    }

    #[test]
    fn rejects_bad_documents() {
        assert!(matches!(
            ExperimentConfig::from_toml("version = 2"),
            Err(Error::Config(_))
        ));
        assert!(ExperimentConfig::from_toml("version = 1\nbogus = 3").is_err());
        assert!(ExperimentConfig::from_toml("version = 1\nseeds = []").is_err());
        assert!(matches!(
            ExperimentConfig::from_toml("version = 1\n[sampling]\nq = 0.9\nstep = 2\nm = 500"),
            Err(Error::PlanOutOfBounds { .. })
        ));
    }

    #[test]
    fn schedules() {
        assert_eq!(Schedule::Constant.lr(0.1, 7, 10), 0.1);
        assert_eq!(Schedule::Cosine.lr(0.1, 0, 10), 0.1);
        assert!(Schedule::Cosine.lr(0.1, 9, 10).abs() < 1e-15);
        assert!(Schedule::Cosine.lr(0.1, 5, 10) < 0.1);
    }

    #[test]
    fn ladder_containment() {
        let c = ExperimentConfig::default();
        let methods = c.methods();
        assert_eq!(methods.len(), 6);
        let oe = Rung::Oe.method(&c.method, c.oe_lambda_reg);
        let all = Rung::OeAll.method(&c.method, c.oe_lambda_reg);
        assert_eq!(oe.weights.lambda_reg, 0.5);
        assert_eq!(all.weights.lambda_reg, 5.0);
        let mut stripped = all.clone();
        stripped.use_kd = false;
        stripped.use_sampling = false;
        stripped.use_oscl = false;
        stripped.weights.lambda_reg = oe.weights.lambda_reg;
        assert_eq!(stripped, oe);
        let ce = Rung::CeOnly.method(&c.method, c.oe_lambda_reg).effective_weights();
        assert_eq!((ce.lambda_reg, ce.lambda_kd, ce.lambda_sc), (0.0, 0.0, 0.0));
    }

    #[test]
    fn long_tailed_keeps_test_balanced() {
        let specs = ExperimentConfig::long_tailed().data.specs();
        let train = specs.train.class_counts().unwrap();
        assert_eq!((train[0], train[9]), (2000, 20));
        assert!(specs.test.class_counts().unwrap().iter().all(|&n| n == 200));
    }
}

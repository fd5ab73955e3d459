//! Encoder `g`, linear classifier `w` and projection head `h`.
//!
//! Logits are `w(g(x))`; the contrastive embedding is `h(g(x))` scaled to
//! unit Euclidean norm.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{kernels, Tape, Tensor, Var};
use crate::error::{open_error, Error, Result};

pub const CHECKPOINT_FORMAT: &str = "oe-tune/checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// `D` input, `L` feature, `N` embedding, `K` classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub feature: usize,
    pub embed: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let std = (gain / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Tensor::matrix(fan_out, fan_in, w).unwrap().with_grad(),
            bias: Tensor::vector(vec![0.0; fan_out]).unwrap().with_grad(),
        }
    }

    fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }

    fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }

    fn apply(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let (out, inp) = (self.fan_out(), self.fan_in());
        let mut y = kernels::mm_bt(x, self.weight.data(), rows, inp, out);
        for row in y.chunks_exact_mut(out) {
            row.iter_mut().zip(self.bias.data()).for_each(|(v, b)| *v += b);
        }
        y
    }

    fn apply_tape<'t>(&self, x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        x.matmul_t(&w)?.add_row(&b)
    }
}

/// All trainable weights of the classifier/projector decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    hidden: Vec<usize>,
    encoder: Vec<Linear>,
    classifier: Linear,
    projector: Linear,
    seed_lineage: Vec<u64>,
}

/// Batched inference output; row-major `rows × width` arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub rows: usize,
    pub feature: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub embedding: Vec<f64>,
}

/// Tape nodes produced by a differentiable forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TapeOutput<'t> {
    pub feature: Var<'t>,
    pub logits: Var<'t>,
    pub embedding: Option<Var<'t>>,
}

/// Parameter leaves on a tape, in [`ModelParams::tensors`] order.
#[derive(Debug, Clone)]
pub struct ParamVars<'t> {
    pub vars: Vec<Var<'t>>,
}

impl ModelParams {
    /// Fan-in scaled Gaussian weights (He gain inside the encoder), zero biases.
    pub fn init(dims: ModelDims, hidden: &[usize], seed: u64) -> Result<Self> {
        if dims.input == 0 || dims.feature == 0 || dims.embed == 0 || dims.classes == 0 {
            return Err(Error::param(format!("all model dims must be ≥ 1, got {dims:?}")));
        }
        if let Some(i) = hidden.iter().position(|&h| h == 0) {
            return Err(Error::param(format!("hidden layer {i} has zero width")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![dims.input];
        widths.extend_from_slice(hidden);
        widths.push(dims.feature);
        let encoder = widths
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], 2.0, &mut rng))
            .collect();
        let classifier = Linear::init(dims.feature, dims.classes, 1.0, &mut rng);
        let projector = Linear::init(dims.feature, dims.embed, 1.0, &mut rng);
        Ok(Self {
            dims,
            hidden: hidden.to_vec(),
            encoder,
            classifier,
            projector,
            seed_lineage: vec![seed],
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn seed_lineage(&self) -> &[u64] {
        &self.seed_lineage
    }

    pub fn push_lineage(&mut self, seed: u64) {
        self.seed_lineage.push(seed);
    }

    fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.encoder
            .iter()
            .chain(std::iter::once(&self.classifier))
            .chain(std::iter::once(&self.projector))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.encoder
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
            .chain(std::iter::once(&mut self.projector))
    }

    /// Weight and bias of every layer: encoder layers, classifier, projector.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn projector_mut(&mut self) -> &mut Linear {
        &mut self.projector
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// SHA-256 over the little-endian bytes of every parameter.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Records every parameter as a gradient-carrying leaf.
    pub fn record<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            vars: self.tensors().into_iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    fn check_width(&self, x_width: usize) -> Result<()> {
        if x_width != self.dims.input {
            return Err(Error::shape(format!(
                "input width {x_width} does not match model input dim {}",
                self.dims.input
            )));
        }
        Ok(())
    }

    /// Differentiable forward pass; `with_embedding` adds the normalised projection.
    pub fn forward_tape<'t>(
        &self,
        params: &ParamVars<'t>,
        x: Var<'t>,
        with_embedding: bool,
    ) -> Result<TapeOutput<'t>> {
        let (_, width) = x.dims2();
        self.check_width(width)?;
        let v = &params.vars;
        let mut h = x;
        let depth = self.encoder.len();
        for (i, layer) in self.encoder.iter().enumerate() {
            h = layer.apply_tape(h, v[2 * i], v[2 * i + 1])?;
            if i + 1 < depth {
                h = h.relu();
            }
        }
        let c = 2 * depth;
        let logits = self.classifier.apply_tape(h, v[c], v[c + 1])?;
        let embedding = if with_embedding {
            Some(self.projector.apply_tape(h, v[c + 2], v[c + 3])?.l2_normalize_rows()?)
        } else {
            None
        };
        Ok(TapeOutput {
            feature: h,
            logits,
            embedding,
        })
    }

    fn features(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        if rows == 0 || x.len() % rows != 0 {
            return Err(Error::shape(format!("{} values for {rows} rows", x.len())));
        }
        self.check_width(x.len() / rows)?;
        let mut h = x.to_vec();
        let depth = self.encoder.len();
        for (i, layer) in self.encoder.iter().enumerate() {
            h = layer.apply(&h, rows);
            if i + 1 < depth {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Logits only, `rows × K`. No gradient bookkeeping.
    pub fn logits(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        let h = self.features(x, rows)?;
        Ok(self.classifier.apply(&h, rows))
    }

    /// Full inference pass. Fails with [`Error::Degenerate`] if a projection
    /// row is exactly zero, since it has no direction to normalise.
    pub fn forward(&self, x: &[f64], rows: usize) -> Result<ForwardOutput> {
        let feature = self.features(x, rows)?;
        let logits = self.classifier.apply(&feature, rows);
        let k = self.dims.classes;
        let mut probs = vec![0.0; logits.len()];
        for (z, p) in logits.chunks_exact(k).zip(probs.chunks_exact_mut(k)) {
            kernels::softmax_into(z, 1.0, p);
        }
        let mut embedding = self.projector.apply(&feature, rows);
        for (i, row) in embedding.chunks_exact_mut(self.dims.embed).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0) {
                return Err(Error::Degenerate(format!("projection of row {i} is zero")));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(ForwardOutput {
            rows,
            feature,
            logits,
            probs,
            embedding,
        })
    }

    /// Softmax probabilities, `rows × K`.
    pub fn probs(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        let logits = self.logits(x, rows)?;
        let k = self.dims.classes;
        let mut probs = vec![0.0; logits.len()];
        for (z, p) in logits.chunks_exact(k).zip(probs.chunks_exact_mut(k)) {
            kernels::softmax_into(z, 1.0, p);
        }
        Ok(probs)
    }

    /// SGD-with-momentum step; `velocity` is indexed like [`Self::tensors`].
    pub fn sgd_step(
        &mut self,
        grads: &[Vec<f64>],
        velocity: &mut [Vec<f64>],
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) {
        for ((t, g), v) in self.tensors_mut().into_iter().zip(grads).zip(velocity.iter_mut()) {
            for ((w, g), v) in t.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                let d = g + weight_decay * *w;
                *v = momentum * *v + d;
                *w -= lr * *v;
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = Checkpoint::from(self);
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec_pretty(&doc)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| open_error(path, e))?;
        let doc: Checkpoint =
            serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        doc.into_params().map_err(|e| Error::format(path, e.to_string()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerDoc {
    name: String,
    rows: usize,
    cols: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    dims: ModelDims,
    hidden: Vec<usize>,
    seed_lineage: Vec<u64>,
    layers: Vec<LayerDoc>,
}

impl From<&ModelParams> for Checkpoint {
    fn from(p: &ModelParams) -> Self {
        let names = (0..p.encoder.len())
            .map(|i| format!("encoder.{i}"))
            .chain(["classifier".to_string(), "projector".to_string()]);
        let layers = names
            .zip(p.layers())
            .map(|(name, l)| LayerDoc {
                name,
                rows: l.fan_out(),
                cols: l.fan_in(),
                weight: l.weight.data().to_vec(),
                bias: l.bias.data().to_vec(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dims: p.dims,
            hidden: p.hidden.clone(),
            seed_lineage: p.seed_lineage.clone(),
            layers,
        }
    }
}

impl Checkpoint {
    fn into_params(self) -> Result<ModelParams> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::param(format!("unknown format tag {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::param(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let mut params = ModelParams::init(self.dims, &self.hidden, 0)?;
        let expected = params.encoder.len() + 2;
        if self.layers.len() != expected {
            return Err(Error::shape(format!(
                "{} layers stored, architecture needs {expected}",
                self.layers.len()
            )));
        }
        for (layer, doc) in params.layers_mut().zip(self.layers) {
            if (doc.rows, doc.cols) != (layer.fan_out(), layer.fan_in()) {
                return Err(Error::shape(format!(
                    "layer {} is {}×{}, expected {}×{}",
                    doc.name,
                    doc.rows,
                    doc.cols,
                    layer.fan_out(),
                    layer.fan_in()
                )));
            }
            layer.weight = Tensor::matrix(doc.rows, doc.cols, doc.weight)?.with_grad();
            layer.bias = Tensor::vector(doc.bias)?.with_grad();
        }
        params.seed_lineage = self.seed_lineage;
        if !params.is_finite() {
            return Err(Error::Numeric("checkpoint holds non-finite parameters".into()));
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dims() -> ModelDims {
        ModelDims {
            input: 2,
            feature: 8,
            embed: 4,
            classes: 3,
        }
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        let p = ModelParams::init(small_dims(), &[16], 1).unwrap();
        // (2·16+16)+(16·8+8)+(8·3+3)+(8·4+4)
        assert_eq!(p.param_count(), 48 + 136 + 27 + 36);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = ModelParams::init(small_dims(), &[16], 7).unwrap();
        let b = ModelParams::init(small_dims(), &[16], 7).unwrap();
        let c = ModelParams::init(small_dims(), &[16], 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn zero_size_layer_is_rejected() {
        assert!(ModelParams::init(small_dims(), &[0], 1).is_err());
        let mut d = small_dims();
        d.classes = 0;
        assert!(ModelParams::init(d, &[4], 1).is_err());
    }

    #[test]
    fn zero_model_gives_uniform_probabilities() {
        let mut p = ModelParams::init(small_dims(), &[16], 3).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let probs = p.probs(&[1.0, -2.0, 0.5, 0.5], 2).unwrap();
        for v in probs {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // no direction to normalise
        assert!(matches!(p.forward(&[1.0, 2.0], 1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let p = ModelParams::init(small_dims(), &[16], 3).unwrap();
        assert!(matches!(p.forward(&[1.0, 2.0, 3.0], 1), Err(Error::Shape(_))));
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let p = ModelParams::init(small_dims(), &[16, 5], 11).unwrap();
        let x = vec![0.3, -1.0, 2.0, 0.7, -0.4, -0.9];
        let plain = p.forward(&x, 3).unwrap();
        let tape = Tape::new();
        let vars = p.record(&tape);
        let xv = tape.constant(vec![3, 2], x).unwrap();
        let out = p.forward_tape(&vars, xv, true).unwrap();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(&plain.logits, &out.logits.value()));
        assert!(close(&plain.embedding, &out.embedding.unwrap().value()));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut p = ModelParams::init(small_dims(), &[16], 5).unwrap();
        p.push_lineage(99);
        p.save(&path).unwrap();
        let q = ModelParams::load(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.checksum(), q.checksum());
        assert_eq!(q.seed_lineage(), &[5, 99]);
    }

    #[test]
    fn missing_checkpoint_is_not_found() {
        let r = ModelParams::load(Path::new("/nonexistent/ckpt.json"));
        assert!(matches!(r, Err(Error::NotFound(_))));
    }
}

//! Synthetic datasets: Gaussian class clusters, an unlabeled outlier pool and
//! a family of geometrically distinct OOD test sets.
//!
//! Class means sit on a circle of radius `class_radius` when `dim == 2`, and
//! on centred, rescaled simplex vertices otherwise (`dim ≥ classes`). All
//! other radii in a spec are multiples of `class_radius`.

use std::f64::consts::TAU;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{open_error, Error, Result};

const MAGIC: &[u8; 8] = b"OETDATA\0";
const FORMAT_VERSION: u32 = 1;
const CSV_TAG: &str = "# oe-tune dataset v";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    IdTrain,
    IdTest,
    OutlierPool,
    OodTest,
}

impl DatasetKind {
    pub fn is_labeled(self) -> bool {
        matches!(self, DatasetKind::IdTrain | DatasetKind::IdTest)
    }

    fn code(self) -> u8 {
        match self {
            DatasetKind::IdTrain => 0,
            DatasetKind::IdTest => 1,
            DatasetKind::OutlierPool => 2,
            DatasetKind::OodTest => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => DatasetKind::IdTrain,
            1 => DatasetKind::IdTest,
            2 => DatasetKind::OutlierPool,
            3 => DatasetKind::OodTest,
            _ => return None,
        })
    }
}

/// Geometry of one OOD test set, radii relative to the class radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OodShape {
    /// Uniform direction, radius uniform in `[inner, outer]`.
    Shell { inner: f64, outer: f64 },
    /// Isotropic Gaussian at the origin.
    Blob { sigma: f64 },
    /// One Gaussian per class at `scale · ((1−mix)·μ_c + mix·μ_{c+1})`.
    Clusters { mix: f64, scale: f64, sigma: f64 },
    /// Uniform over `[−half_width, half_width]^D`.
    Box { half_width: f64 },
}

/// Outlier pool mixture, radii relative to the class radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolGeometry {
    /// Fraction of the pool drawn from the uniform box; the rest is split
    /// evenly across the shells.
    pub box_fraction: f64,
    pub box_half_width: f64,
    pub shells: Vec<[f64; 2]>,
    /// Draws closer than `exclusion · class_sigma` to any class mean are
    /// redrawn, so the pool holds no in-distribution look-alikes.
    pub exclusion: f64,
}

impl Default for PoolGeometry {
    fn default() -> Self {
        Self {
            box_fraction: 0.4,
            box_half_width: 2.5,
            shells: vec![[0.0, 0.45], [1.2, 1.6], [1.6, 2.2]],
            exclusion: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub name: String,
    pub classes: usize,
    pub dim: usize,
    /// Count of class 0 for labelled sets.
    pub n_max: usize,
    /// Total count for unlabelled sets.
    pub count: usize,
    /// `ρ ∈ (0, 1]`; class `c` gets `round(n_max · ρ^{c/(K−1)})` samples.
    pub imbalance: f64,
    pub class_radius: f64,
    pub class_sigma: f64,
    pub pool: PoolGeometry,
    pub shape: Option<OodShape>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::IdTrain,
            name: "id-train".into(),
            classes: 10,
            dim: 2,
            n_max: 500,
            count: 5000,
            imbalance: 1.0,
            class_radius: 4.0,
            class_sigma: 0.6,
            pool: PoolGeometry::default(),
            shape: None,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn id_train(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn id_test(seed: u64) -> Self {
        Self {
            kind: DatasetKind::IdTest,
            name: "id-test".into(),
            n_max: 200,
            seed,
            ..Self::default()
        }
    }

    pub fn outlier_pool(seed: u64) -> Self {
        Self {
            kind: DatasetKind::OutlierPool,
            name: "outlier-pool".into(),
            count: 5000,
            seed,
            ..Self::default()
        }
    }

    pub fn ood_test(name: &str, shape: OodShape, seed: u64) -> Self {
        Self {
            kind: DatasetKind::OodTest,
            name: name.into(),
            count: 1000,
            shape: Some(shape),
            seed,
            ..Self::default()
        }
    }

    /// Same class geometry as `self`, with a different kind/name/seed.
    pub fn derive(&self, kind: DatasetKind, name: &str, seed: u64) -> Self {
        Self {
            kind,
            name: name.into(),
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.dim == 0 {
            return Err(Error::Data("classes and dim must be positive".into()));
        }
        if self.dim != 2 && self.dim < self.classes {
            return Err(Error::Data(format!(
                "dim {} < classes {}: simplex means need dim ≥ classes",
                self.dim, self.classes
            )));
        }
        if !(self.imbalance > 0.0 && self.imbalance <= 1.0) {
            return Err(Error::Data(format!("imbalance must lie in (0, 1], got {}", self.imbalance)));
        }
        if !(self.class_radius > 0.0) || !(self.class_sigma >= 0.0) {
            return Err(Error::Data("class radius must be > 0 and sigma ≥ 0".into()));
        }
        match self.kind {
            DatasetKind::IdTrain | DatasetKind::IdTest if self.n_max == 0 => {
                Err(Error::Data("n_max must be positive".into()))
            }
            DatasetKind::OutlierPool | DatasetKind::OodTest if self.count == 0 => {
                Err(Error::Data("count must be positive".into()))
            }
            DatasetKind::OodTest if self.shape.is_none() => {
                Err(Error::Data(format!("ood set {:?} has no shape", self.name)))
            }
            DatasetKind::OutlierPool
                if !(0.0..=1.0).contains(&self.pool.box_fraction)
                    || (self.pool.shells.is_empty() && self.pool.box_fraction < 1.0)
                    || !(self.pool.exclusion >= 0.0 && self.pool.exclusion.is_finite()) =>
            {
                Err(Error::Data("pool mixture is empty or invalid".into()))
            }
            _ => Ok(()),
        }
    }

    /// Per-class counts under the long-tail law.
    pub fn class_counts(&self) -> Result<Vec<usize>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let exp = if k > 1 { c as f64 / (k - 1) as f64 } else { 0.0 };
                let n = (self.n_max as f64 * self.imbalance.powf(exp)).round() as usize;
                if n == 0 {
                    Err(Error::Data(format!("class {c} rounds to zero samples")))
                } else {
                    Ok(n)
                }
            })
            .collect()
    }

    /// Row-major `K×D` class means; independent of the seed.
    pub fn class_means(&self) -> Vec<f64> {
        let (k, d, r) = (self.classes, self.dim, self.class_radius);
        let mut means = vec![0.0; k * d];
        if d == 2 {
            for c in 0..k {
                let a = TAU * c as f64 / k as f64;
                means[c * d] = r * a.cos();
                means[c * d + 1] = r * a.sin();
            }
        } else if k == 1 {
            means[0] = r;
        } else {
            // e_c − (1/K)·Σe, rescaled to norm r
            let norm = ((1.0 - 1.0 / k as f64).powi(2) + (k - 1) as f64 / (k * k) as f64).sqrt();
            for c in 0..k {
                for j in 0..k {
                    let v = if j == c { 1.0 } else { 0.0 } - 1.0 / k as f64;
                    means[c * d + j] = r * v / norm;
                }
            }
        }
        means
    }

    /// Hex sha256 of the canonical JSON encoding.
    pub fn provenance(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serialises");
        hex::encode(Sha256::digest(json))
    }
}

/// The six default OOD test sets.
pub fn default_ood_specs(base: &DatasetSpec, seed: u64) -> Vec<DatasetSpec> {
    let shapes = [
        ("far-annulus", OodShape::Shell { inner: 2.6, outer: 3.2 }),
        ("near-annulus", OodShape::Shell { inner: 1.35, outer: 1.55 }),
        ("center-blob", OodShape::Blob { sigma: 0.15 }),
        ("between-clusters", OodShape::Clusters { mix: 0.5, scale: 1.3, sigma: 0.08 }),
        ("inner-clusters", OodShape::Clusters { mix: 0.0, scale: 0.5, sigma: 0.08 }),
        ("uniform-box", OodShape::Box { half_width: 3.0 }),
    ];
    shapes
        .into_iter()
        .enumerate()
        .map(|(i, (name, shape))| DatasetSpec {
            kind: DatasetKind::OodTest,
            name: name.into(),
            count: 1000,
            shape: Some(shape),
            seed: seed.wrapping_add(i as u64),
            ..base.clone()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: DatasetSpec,
    /// Row-major `len × dim`.
    pub inputs: Vec<f64>,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len() / self.spec.dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.spec.dim;
        &self.inputs[i * d..(i + 1) * d]
    }

    pub fn provenance(&self) -> String {
        self.spec.provenance()
    }

    /// Rows at `idx`, in order, as a row-major buffer.
    pub fn gather(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect()
    }

    fn check(&self) -> Result<()> {
        let d = self.spec.dim;
        if d == 0 || self.inputs.len() % d != 0 {
            return Err(Error::Data("input buffer is not a whole number of rows".into()));
        }
        match (&self.labels, self.spec.kind.is_labeled()) {
            (Some(l), true) => {
                if l.len() != self.len() {
                    return Err(Error::Data("label count differs from row count".into()));
                }
                if let Some(bad) = l.iter().find(|&&y| y >= self.spec.classes) {
                    return Err(Error::Data(format!("label {bad} out of range")));
                }
                Ok(())
            }
            (None, false) => Ok(()),
            _ => Err(Error::Data("labels must be present exactly for id sets".into())),
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn push_shell(rng: &mut ChaCha8Rng, out: &mut Vec<f64>, d: usize, inner: f64, outer: f64) {
    let dir: Vec<f64> = loop {
        let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            break v.into_iter().map(|x| x / n).collect();
        }
    };
    let r = rng.random_range(inner..=outer);
    out.extend(dir.into_iter().map(|x| x * r));
}

fn push_box(rng: &mut ChaCha8Rng, out: &mut Vec<f64>, d: usize, half: f64) {
    out.extend((0..d).map(|_| rng.random_range(-half..=half)));
}

fn push_gaussian(rng: &mut ChaCha8Rng, out: &mut Vec<f64>, center: &[f64], sigma: f64) {
    out.extend(center.iter().map(|m| m + sigma * gaussian(rng)));
}

pub fn gen_id(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    if !spec.kind.is_labeled() {
        return Err(Error::Data(format!("gen_id called with kind {:?}", spec.kind)));
    }
    let counts = spec.class_counts()?;
    let means = spec.class_means();
    let d = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total: usize = counts.iter().sum();
    let mut inputs = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    for (c, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            push_gaussian(&mut rng, &mut inputs, &means[c * d..(c + 1) * d], spec.class_sigma);
            labels.push(c);
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        inputs,
        labels: Some(labels),
    })
}

/// Rejection budget per pool sample.
const MAX_POOL_DRAWS: usize = 10_000;

pub fn gen_outlier_pool(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    if spec.kind != DatasetKind::OutlierPool {
        return Err(Error::Data(format!("gen_outlier_pool called with kind {:?}", spec.kind)));
    }
    let (d, r) = (spec.dim, spec.class_radius);
    let g = &spec.pool;
    let n_box = ((spec.count as f64) * g.box_fraction).round() as usize;
    let n_box = if g.shells.is_empty() { spec.count } else { n_box.min(spec.count) };
    let means = spec.class_means();
    let min_dist2 = (g.exclusion * spec.class_sigma).powi(2);
    let far_from_classes = |x: &[f64]| {
        means
            .chunks_exact(d)
            .all(|m| m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() >= min_dist2)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut inputs = Vec::with_capacity(spec.count * d);
    for i in 0..spec.count {
        let mut accepted = false;
        for _ in 0..MAX_POOL_DRAWS {
            let at = inputs.len();
            if i < n_box {
                push_box(&mut rng, &mut inputs, d, g.box_half_width * r);
            } else {
                let [a, b] = g.shells[(i - n_box) % g.shells.len()];
                push_shell(&mut rng, &mut inputs, d, a * r, b * r);
            }
            if far_from_classes(&inputs[at..]) {
                accepted = true;
                break;
            }
            inputs.truncate(at);
        }
        if !accepted {
            return Err(Error::Data(format!(
                "pool sample {i}: no draw in {MAX_POOL_DRAWS} clears the class exclusion radius"
            )));
        }
    }
    // interleave sources so any prefix of the pool is a representative subset
    let mut order: Vec<usize> = (0..spec.count).collect();
    order.shuffle(&mut rng);
    let inputs = order.iter().flat_map(|&i| inputs[i * d..(i + 1) * d].iter().copied()).collect();
    Ok(Dataset {
        spec: spec.clone(),
        inputs,
        labels: None,
    })
}

fn gen_ood(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let shape = spec
        .shape
        .as_ref()
        .ok_or_else(|| Error::Data(format!("ood set {:?} has no shape", spec.name)))?;
    let (d, k, r) = (spec.dim, spec.classes, spec.class_radius);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut inputs = Vec::with_capacity(spec.count * d);
    match *shape {
        OodShape::Shell { inner, outer } => {
            for _ in 0..spec.count {
                push_shell(&mut rng, &mut inputs, d, inner * r, outer * r);
            }
        }
        OodShape::Blob { sigma } => {
            let origin = vec![0.0; d];
            for _ in 0..spec.count {
                push_gaussian(&mut rng, &mut inputs, &origin, sigma * r);
            }
        }
        OodShape::Clusters { mix, scale, sigma } => {
            let means = spec.class_means();
            let centers: Vec<f64> = (0..k)
                .flat_map(|c| {
                    let next = (c + 1) % k;
                    let means = &means;
                    (0..d).map(move |j| {
                        scale * ((1.0 - mix) * means[c * d + j] + mix * means[next * d + j])
                    })
                })
                .collect();
            for i in 0..spec.count {
                let c = i % k;
                push_gaussian(&mut rng, &mut inputs, &centers[c * d..(c + 1) * d], sigma * r);
            }
        }
        OodShape::Box { half_width } => {
            for _ in 0..spec.count {
                push_box(&mut rng, &mut inputs, d, half_width * r);
            }
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        inputs,
        labels: None,
    })
}

pub fn gen_ood_testsets(specs: &[DatasetSpec]) -> Result<Vec<Dataset>> {
    if specs.is_empty() {
        return Err(Error::Data("no OOD test set specs given".into()));
    }
    specs.iter().map(gen_ood).collect()
}

/// Dispatches on `spec.kind`.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    match spec.kind {
        DatasetKind::IdTrain | DatasetKind::IdTest => gen_id(spec),
        DatasetKind::OutlierPool => gen_outlier_pool(spec),
        DatasetKind::OodTest => gen_ood(spec),
    }
}

impl Dataset {
    /// Binary layout, little endian: magic, version u32, kind u8, K u32,
    /// D u32, count u64, seed u64, spec-json length u32 + bytes, inputs f64,
    /// then labels u32 for labelled kinds.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.check()?;
        let spec = serde_json::to_vec(&self.spec)?;
        let mut buf = Vec::with_capacity(48 + spec.len() + self.inputs.len() * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.push(self.spec.kind.code());
        buf.extend_from_slice(&(self.spec.classes as u32).to_le_bytes());
        buf.extend_from_slice(&(self.spec.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        buf.extend_from_slice(&self.spec.seed.to_le_bytes());
        buf.extend_from_slice(&(spec.len() as u32).to_le_bytes());
        buf.extend_from_slice(&spec);
        for v in &self.inputs {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            for &y in labels {
                buf.extend_from_slice(&(y as u32).to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| open_error(path, e))?;
        let mut r = ByteReader { bytes: &bytes, pos: 0, path };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::format(path, "bad magic bytes"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let kind = DatasetKind::from_code(r.take(1)?[0])
            .ok_or_else(|| Error::format(path, "unknown dataset kind"))?;
        let classes = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let count = r.u64()? as usize;
        let seed = r.u64()?;
        let spec_len = r.u32()? as usize;
        let spec: DatasetSpec = serde_json::from_slice(r.take(spec_len)?)
            .map_err(|e| Error::format(path, format!("bad spec block: {e}")))?;
        if spec.kind != kind || spec.classes != classes || spec.dim != dim || spec.seed != seed {
            return Err(Error::format(path, "header disagrees with spec block"));
        }
        let n = count
            .checked_mul(dim)
            .ok_or_else(|| Error::format(path, "row count overflow"))?;
        let inputs = r
            .take(n.checked_mul(8).ok_or_else(|| Error::format(path, "row count overflow"))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = if kind.is_labeled() {
            Some(
                r.take(count * 4)?
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
                    .collect(),
            )
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes"));
        }
        let ds = Dataset { spec, inputs, labels };
        ds.check().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(ds)
    }

    /// CSV with columns `x0..x{D-1},label,kind`; the first line is a
    /// `#`-comment carrying the format version and the JSON spec.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.check()?;
        let mut file = fs::File::create(path)?;
        writeln!(file, "{CSV_TAG}{FORMAT_VERSION} {}", serde_json::to_string(&self.spec)?)?;
        let mut w = csv::Writer::from_writer(file);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        header.push("kind".into());
        w.write_record(&header)?;
        let kind = serde_json::to_value(self.spec.kind)?;
        let kind = kind.as_str().unwrap_or_default().to_string();
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels.as_ref().map(|l| l[i].to_string()).unwrap_or_default());
            rec.push(kind.clone());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| open_error(path, e))?;
        let (first, body) = text.split_once('\n').unwrap_or((text.as_str(), ""));
        let rest = first
            .strip_prefix(CSV_TAG)
            .ok_or_else(|| Error::format(path, "missing version comment"))?;
        let (version, spec_json) = rest
            .split_once(' ')
            .ok_or_else(|| Error::format(path, "malformed version comment"))?;
        if version.parse::<u32>().ok() != Some(FORMAT_VERSION) {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let spec: DatasetSpec = serde_json::from_str(spec_json)
            .map_err(|e| Error::format(path, format!("bad spec comment: {e}")))?;
        let d = spec.dim;
        let mut rdr = csv::Reader::from_reader(body.as_bytes());
        let headers = rdr.headers()?.clone();
        if headers.len() != d + 2 {
            return Err(Error::format(path, format!("expected {} columns", d + 2)));
        }
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            for j in 0..d {
                let v: f64 = rec[j]
                    .parse()
                    .map_err(|_| Error::format(path, format!("bad value {:?}", &rec[j])))?;
                inputs.push(v);
            }
            if spec.kind.is_labeled() {
                let y: usize = rec[d]
                    .parse()
                    .map_err(|_| Error::format(path, format!("bad label {:?}", &rec[d])))?;
                labels.push(y);
            }
        }
        let ds = Dataset {
            labels: spec.kind.is_labeled().then_some(labels),
            spec,
            inputs,
        };
        ds.check().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(ds)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(k: usize, n_max: usize, rho: f64) -> Result<Vec<usize>> {
        DatasetSpec {
            classes: k,
            n_max,
            imbalance: rho,
            ..DatasetSpec::default()
        }
        .class_counts()
    }

    #[test]
    fn long_tail_counts() {
        assert_eq!(counts(2, 100, 1.0).unwrap(), vec![100, 100]);
        assert_eq!(counts(2, 100, 0.1).unwrap(), vec![100, 10]);
        assert_eq!(counts(3, 100, 0.01).unwrap(), vec![100, 10, 1]);
        let c = counts(10, 500, 0.01).unwrap();
        assert!(c.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!((c[0], c[9]), (500, 5));
    }

    #[test]
    fn zero_count_class_is_named() {
        let err = counts(3, 10, 0.001).unwrap_err();
        assert!(err.to_string().contains("class 1"), "{err}");
    }

    #[test]
    fn train_and_test_share_means() {
        let train = DatasetSpec::id_train(1);
        let test = DatasetSpec::id_test(2);
        assert_eq!(train.class_means(), test.class_means());
        let mut hi = train.clone();
        hi.dim = 12;
        let m = hi.class_means();
        for c in 0..10 {
            let n: f64 = m[c * 12..(c + 1) * 12].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - hi.class_radius).abs() < 1e-12);
        }
        let sum: f64 = (0..10).map(|c| m[c * 12]).sum();
        assert!(sum.abs() < 1e-12);
    }

    #[test]
    fn simplex_needs_enough_dims() {
        let spec = DatasetSpec {
            dim: 5,
            ..DatasetSpec::default()
        };
        assert!(matches!(gen_id(&spec), Err(Error::Data(_))));
    }

    #[test]
    fn generation_is_deterministic_and_labelled() {
        let a = gen_id(&DatasetSpec::id_train(7)).unwrap();
        let b = gen_id(&DatasetSpec::id_train(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5000);
        assert!(a.labels.as_ref().unwrap().iter().all(|&y| y < 10));

        let p = gen_outlier_pool(&DatasetSpec::outlier_pool(3)).unwrap();
        assert_eq!(p.len(), 5000);
        assert!(p.labels.is_none());
        assert_eq!(p, gen_outlier_pool(&DatasetSpec::outlier_pool(3)).unwrap());
        assert_ne!(p, gen_outlier_pool(&DatasetSpec::outlier_pool(4)).unwrap());
    }

    #[test]
    fn pool_prefix_mixes_all_sources() {
        let spec = DatasetSpec::outlier_pool(3);
        let p = gen_outlier_pool(&spec).unwrap();
        let inner = 0.45 * spec.class_radius;
        let central = |rows: &[f64]| {
            let n = rows.len() / 2;
            rows.chunks_exact(2).filter(|x| x[0].hypot(x[1]) < inner).count() as f64 / n as f64
        };
        let whole = central(&p.inputs);
        let prefix = central(&p.inputs[..1000]);
        assert!(whole > 0.15, "{whole}");
        assert!((prefix - whole).abs() < 0.06, "prefix {prefix} vs pool {whole}");
    }

    #[test]
    fn ood_sets() {
        let specs = default_ood_specs(&DatasetSpec::default(), 100);
        let sets = gen_ood_testsets(&specs).unwrap();
        assert_eq!(sets.len(), 6);
        let mut hashes: Vec<String> = sets.iter().map(|s| s.provenance()).collect();
        hashes.sort();
        hashes.dedup();
        assert_eq!(hashes.len(), 6);
        assert!(sets.iter().all(|s| s.labels.is_none() && s.len() == 1000));
        assert!(gen_ood_testsets(&[]).is_err());
    }

    #[test]
    fn binary_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let mut spec = DatasetSpec::id_train(5);
        spec.n_max = 20;
        spec.imbalance = 0.1;
        let ds = gen_id(&spec).unwrap();
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Format { .. })));

        bytes[0] ^= 0xff;
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Format { .. })));

        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 9;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Format { .. })));

        assert!(matches!(
            Dataset::load(&dir.path().join("missing.bin")),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = DatasetSpec::id_test(5);
        spec.n_max = 7;
        let ds = gen_id(&spec).unwrap();
        let path = dir.path().join("d.csv");
        ds.save_csv(&path).unwrap();
        assert_eq!(Dataset::load_csv(&path).unwrap(), ds);

        let mut pool_spec = DatasetSpec::outlier_pool(1);
        pool_spec.count = 11;
        let pool = gen_outlier_pool(&pool_spec).unwrap();
        pool.save_csv(&path).unwrap();
        assert_eq!(Dataset::load_csv(&path).unwrap(), pool);

        let text = fs::read_to_string(&path).unwrap().replacen("v1", "v7", 1);
        fs::write(&path, text).unwrap();
        assert!(matches!(Dataset::load_csv(&path), Err(Error::Format { .. })));
    }
}

//! Datasets, client partitioning and trigger injection.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::Batch;

/// Labelled samples with features in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Batch,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("dataset must hold at least one sample"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} >= num_classes {num_classes}"
            )));
        }
        Ok(Self {
            samples: Batch::new(inputs, labels)?,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.inputs.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn inputs(&self) -> &Matrix {
        &self.samples.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.samples.labels
    }

    pub fn as_batch(&self) -> &Batch {
        &self.samples
    }

    /// Rows `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::invalid(format!("row {i} out of range")));
            }
            data.extend_from_slice(self.inputs().row(i));
            labels.push(self.labels()[i]);
        }
        Dataset::new(Matrix::new(idx.len(), d, data)?, labels, self.num_classes)
    }

    /// Per-class sample counts.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in self.labels() {
            h[l] += 1;
        }
        h
    }
}

/// Per-coordinate noise of the synthetic blobs.
pub const SYNTH_NOISE_STD: f64 = 0.25;
const SYNTH_BASE: f64 = 0.3;
/// Background coordinates sit near zero, like the dark border of a scanned digit.
const SYNTH_BORDER_MEAN: f64 = 0.05;
const SYNTH_BORDER_STD: f64 = 0.05;

/// Gaussian class blobs. The first three quarters of the coordinates carry
/// class signal (coordinate `j` belongs to class `j % num_classes`); the
/// last quarter is a dim, low-noise background. Means are placed so any two class
/// means are exactly distance 1 apart. Values are clipped to `[0, 1]`.
pub fn synth_dataset(seed: u64, num_classes: usize, per_class: usize, d: usize) -> Result<Dataset> {
    if num_classes < 2 || d < 4 {
        return Err(Error::invalid(format!(
            "synthetic data needs >= 2 classes and >= 4 features (got {num_classes}, {d})"
        )));
    }
    let signal = d - d / 4;
    if signal < num_classes {
        return Err(Error::invalid("too few features for the number of classes"));
    }
    if per_class == 0 {
        return Err(Error::invalid("per_class must be positive"));
    }
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|c| {
            let owned = (0..signal).filter(|j| j % num_classes == c).count();
            let lift = 1.0 / (2.0 * owned as f64).sqrt();
            (0..d)
                .map(|j| {
                    if j < signal && j % num_classes == c {
                        SYNTH_BASE + lift
                    } else {
                        SYNTH_BASE
                    }
                })
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, SYNTH_NOISE_STD).unwrap();
    let border = Normal::new(SYNTH_BORDER_MEAN, SYNTH_BORDER_STD).unwrap();
    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    // interleave classes so prefixes stay balanced
    for _ in 0..per_class {
        for (c, mean) in means.iter().enumerate() {
            for (j, m) in mean.iter().enumerate() {
                let v = if j < signal {
                    m + noise.sample(&mut rng)
                } else {
                    border.sample(&mut rng)
                };
                data.push(v.clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    Dataset::new(Matrix::new(n, d, data)?, labels, num_classes)
}

/// Uniform `[0, 1]` inputs with all-zero labels; an out-of-distribution
/// probe set for representation extraction.
pub fn uniform_noise_dataset(seed: u64, n: usize, d: usize, num_classes: usize) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d).map(|_| rng.random::<f64>()).collect();
    Dataset::new(Matrix::new(n, d, data)?, vec![0; n], num_classes)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Parse {
            offset,
            message: "truncated IDX header".into(),
        })
}

/// Parses an IDX3 unsigned-byte image file into an `n x (rows*cols)`
/// matrix with pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Matrix> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad image magic {magic:#010x}"),
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let d = rows * cols;
    let body = &bytes[16..];
    if body.len() < n * d {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("expected {} pixel bytes, found {}", n * d, body.len()),
        });
    }
    let data = body[..n * d].iter().map(|&b| b as f64 / 255.0).collect();
    Matrix::new(n, d, data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad label magic {magic:#010x}"),
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("expected {n} label bytes, found {}", body.len()),
        });
    }
    Ok(body[..n].iter().map(|&b| b as usize).collect())
}

/// Loads an MNIST-style image/label file pair.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let inputs = parse_idx_images(&img)?;
    let labels = parse_idx_labels(&lab)?;
    if labels.len() != inputs.rows() {
        return Err(Error::invalid(format!(
            "{} images but {} labels",
            inputs.rows(),
            labels.len()
        )));
    }
    let num_classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(inputs, labels, num_classes)
}

/// Disjoint per-client sample indices.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub client_indices: Vec<Vec<usize>>,
    /// Dirichlet concentration; `None` for an IID split.
    pub alpha: Option<f64>,
}

impl PartitionPlan {
    pub fn sizes(&self) -> Vec<usize> {
        self.client_indices.iter().map(Vec::len).collect()
    }
}

/// Draws `Dir(alpha, ..., alpha)` in log space so that tiny concentrations
/// do not underflow to an all-zero vector.
fn sample_dirichlet<R: Rng + ?Sized>(k: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    // Gamma(a) = Gamma(a + 1) * U^(1/a)
    let gamma = Gamma::new(alpha + 1.0, 1.0).unwrap();
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Splits `total` into integer counts proportional to `props`, handing the
/// remainder to the largest fractional parts (lowest index on ties).
fn largest_remainder(total: usize, props: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Label-skewed split: for every class, client shares are drawn from
/// `Dir(alpha)` and that class's (shuffled) samples are dealt out in those
/// proportions. Clients left empty take one sample from the largest client.
pub fn dirichlet_partition(ds: &Dataset, num_clients: usize, alpha: f64, seed: u64) -> Result<PartitionPlan> {
    if num_clients < 2 {
        return Err(Error::invalid("need at least 2 clients"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    if num_clients > ds.len() {
        return Err(Error::invalid(format!(
            "{num_clients} clients but only {} samples",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clients = vec![Vec::new(); num_clients];
    for class in 0..ds.num_classes() {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == class).collect();
        members.shuffle(&mut rng);
        let props = sample_dirichlet(num_clients, alpha, &mut rng);
        let counts = largest_remainder(members.len(), &props);
        let mut start = 0;
        for (client, count) in counts.into_iter().enumerate() {
            clients[client].extend_from_slice(&members[start..start + count]);
            start += count;
        }
    }
    repair_empty(&mut clients);
    clients.iter_mut().for_each(|c| c.sort_unstable());
    Ok(PartitionPlan {
        client_indices: clients,
        alpha: Some(alpha),
    })
}

fn repair_empty(clients: &mut [Vec<usize>]) {
    while let Some(empty) = clients.iter().position(Vec::is_empty) {
        let donor = (0..clients.len())
            .max_by(|&a, &b| clients[a].len().cmp(&clients[b].len()).then(b.cmp(&a)))
            .unwrap();
        let moved = clients[donor].pop().unwrap();
        clients[empty].push(moved);
    }
}

/// Shuffled, near-equal split.
pub fn iid_partition(n: usize, num_clients: usize, seed: u64) -> Result<PartitionPlan> {
    if num_clients < 2 || num_clients > n {
        return Err(Error::invalid(format!(
            "cannot split {n} samples over {num_clients} clients"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut clients = vec![Vec::new(); num_clients];
    for (k, i) in idx.into_iter().enumerate() {
        clients[k % num_clients].push(i);
    }
    clients.iter_mut().for_each(|c| c.sort_unstable());
    Ok(PartitionPlan {
        client_indices: clients,
        alpha: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    /// Every trigger coordinate is set to `value`.
    PixelPatch,
    /// Alternating `value` / `0.0` along the coordinate list.
    Pattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerSpec {
    pub kind: TriggerKind,
    pub coordinates: Vec<usize>,
    pub value: f64,
    pub target_label: usize,
    pub poison_fraction: f64,
}

impl TriggerSpec {
    /// Three-coordinate patch in the last features, set to 1.0, target 0.
    pub fn corner_patch(d: usize, poison_fraction: f64) -> Self {
        Self {
            kind: TriggerKind::PixelPatch,
            coordinates: (d.saturating_sub(3)..d).collect(),
            value: 1.0,
            target_label: 0,
            poison_fraction,
        }
    }

    pub fn validate(&self, d: usize, num_classes: usize) -> Result<()> {
        if let Some(c) = self.coordinates.iter().find(|&&c| c >= d) {
            return Err(Error::invalid(format!("trigger coordinate {c} >= {d}")));
        }
        if !(self.poison_fraction > 0.0 && self.poison_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "poison fraction {} outside (0, 1]",
                self.poison_fraction
            )));
        }
        if self.target_label >= num_classes {
            return Err(Error::invalid("trigger target label out of range"));
        }
        if !self.value.is_finite() {
            return Err(Error::invalid("trigger value must be finite"));
        }
        Ok(())
    }

    /// Writes the trigger into one feature row.
    pub fn stamp(&self, row: &mut [f64]) {
        for (k, &c) in self.coordinates.iter().enumerate() {
            row[c] = match self.kind {
                TriggerKind::PixelPatch => self.value,
                TriggerKind::Pattern if k % 2 == 0 => self.value,
                TriggerKind::Pattern => 0.0,
            };
        }
    }

    pub fn poison_count(&self, n: usize) -> usize {
        (self.poison_fraction * n as f64).floor() as usize
    }
}

/// The rows a seeded poisoning pass would select, ascending.
pub fn poisoned_rows(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = index::sample(&mut rng, n, count.min(n)).into_vec();
    rows.sort_unstable();
    rows
}

/// Stamps the trigger on `floor(poison_fraction * n)` seeded rows and
/// relabels them to the target; every other row is copied unchanged.
pub fn inject_trigger(ds: &Dataset, spec: &TriggerSpec, seed: u64) -> Result<Dataset> {
    spec.validate(ds.dim(), ds.num_classes())?;
    let rows = poisoned_rows(ds.len(), spec.poison_count(ds.len()), seed);
    stamp_rows(ds, spec, &rows)
}

pub(crate) fn stamp_rows(ds: &Dataset, spec: &TriggerSpec, rows: &[usize]) -> Result<Dataset> {
    let d = ds.dim();
    let mut data = ds.inputs().data().to_vec();
    let mut labels = ds.labels().to_vec();
    for &r in rows {
        spec.stamp(&mut data[r * d..(r + 1) * d]);
        labels[r] = spec.target_label;
    }
    Dataset::new(Matrix::new(ds.len(), d, data)?, labels, ds.num_classes())
}

/// Triggered copies of every test sample whose true label differs from the
/// target, all labelled with the target. `None` when no such sample exists.
pub fn backdoor_test_set(test: &Dataset, spec: &TriggerSpec) -> Result<Option<Dataset>> {
    spec.validate(test.dim(), test.num_classes())?;
    let keep: Vec<usize> = (0..test.len())
        .filter(|&i| test.labels()[i] != spec.target_label)
        .collect();
    if keep.is_empty() {
        return Ok(None);
    }
    let sub = test.subset(&keep)?;
    let all: Vec<usize> = (0..sub.len()).collect();
    stamp_rows(&sub, spec, &all).map(Some)
}

/// Server-side probe set: `size` distinct rows drawn uniformly from `source`.
pub fn make_root(source: &Dataset, size: usize, seed: u64) -> Result<Dataset> {
    if size == 0 || size > source.len() {
        return Err(Error::invalid(format!(
            "root size {size} must be in 1..={}",
            source.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = index::sample(&mut rng, source.len(), size).into_vec();
    source.subset(&idx)
}

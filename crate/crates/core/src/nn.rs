//! A small multi-layer perceptron trained with plain mini-batch SGD.
//!
//! Parameters live in one flat vector ([`FlatParams`]); each layer stores
//! its weights as a row-major `d_in x d_out` block followed by `d_out`
//! biases. Hidden layers use ReLU, the output layer emits raw logits.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub d_in: usize,
    pub d_out: usize,
}

impl LayerShape {
    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }
}

/// All parameters of a model, flattened in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    values: Vec<f64>,
    shapes: Vec<LayerShape>,
}

impl FlatParams {
    pub fn new(values: Vec<f64>, shapes: Vec<LayerShape>) -> Result<Self> {
        let expected: usize = shapes.iter().map(LayerShape::param_count).sum();
        if values.len() != expected {
            return Err(Error::invalid(format!(
                "parameter vector has {} values, shapes need {expected}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite parameter"));
        }
        Ok(Self { values, shapes })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let shapes = shapes_for(dims);
        let n = shapes.iter().map(LayerShape::param_count).sum();
        Self {
            values: vec![0.0; n],
            shapes,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    /// Same shape, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(values, self.shapes.clone())
    }

    /// `self - base`, element-wise.
    pub fn delta_from(&self, base: &FlatParams) -> Result<Vec<f64>> {
        if self.len() != base.len() {
            return Err(Error::invalid(format!(
                "parameter length mismatch: {} vs {}",
                self.len(),
                base.len()
            )));
        }
        Ok(self
            .values
            .iter()
            .zip(&base.values)
            .map(|(a, b)| a - b)
            .collect())
    }

    /// Checkpoint blob: `u64` layer count, `(u64 d_in, u64 d_out)` per
    /// layer, `u64` value count, then the values as little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 16 * self.shapes.len() + 8 * self.values.len());
        out.extend_from_slice(&(self.shapes.len() as u64).to_le_bytes());
        for s in &self.shapes {
            out.extend_from_slice(&(s.d_in as u64).to_le_bytes());
            out.extend_from_slice(&(s.d_out as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut offset = 0;
        let read_u64 = |offset: &mut usize| -> Result<u64> {
            let chunk = bytes.get(*offset..*offset + 8).ok_or_else(|| Error::Parse {
                offset: *offset,
                message: "truncated parameter blob".into(),
            })?;
            *offset += 8;
            Ok(u64::from_le_bytes(chunk.try_into().unwrap()))
        };
        let layers = read_u64(&mut offset)? as usize;
        let mut shapes = Vec::with_capacity(layers.min(1024));
        for _ in 0..layers {
            let d_in = read_u64(&mut offset)? as usize;
            let d_out = read_u64(&mut offset)? as usize;
            shapes.push(LayerShape { d_in, d_out });
        }
        let count = read_u64(&mut offset)? as usize;
        let mut values = Vec::with_capacity(count.min(bytes.len() / 8));
        for _ in 0..count {
            values.push(f64::from_bits(read_u64(&mut offset)?));
        }
        if offset != bytes.len() {
            return Err(Error::Parse {
                offset,
                message: "trailing bytes after parameter blob".into(),
            });
        }
        Self::new(values, shapes)
    }
}

fn shapes_for(dims: &[usize]) -> Vec<LayerShape> {
    dims.windows(2)
        .map(|w| LayerShape {
            d_in: w[0],
            d_out: w[1],
        })
        .collect()
}

/// Inputs with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn select(&self, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let d = self.inputs.cols();
        let mut x = Vec::with_capacity(idx.len() * d);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.inputs.row(i));
            y.push(self.labels[i]);
        }
        (x, y)
    }
}

pub struct ForwardOutput {
    pub logits: Matrix,
    /// Activations of the representation layer (by default the last hidden layer).
    pub penultimate: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    dims: Vec<usize>,
    params: FlatParams,
    rep_layer: usize,
}

impl MlpModel {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(dims)?;
        let mut offset = 0;
        for s in model.params.shapes.clone() {
            let bound = (6.0 / (s.d_in + s.d_out) as f64).sqrt();
            for w in &mut model.params.values[offset..offset + s.d_in * s.d_out] {
                *w = rng.random_range(-bound..bound);
            }
            offset += s.param_count();
        }
        Ok(model)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::from_params(dims, FlatParams::zeros(dims))
    }

    pub fn from_params(dims: &[usize], params: FlatParams) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!("invalid layer dims {dims:?}")));
        }
        if params.shapes != shapes_for(dims) {
            return Err(Error::invalid("parameter shapes do not match layer dims"));
        }
        Ok(Self {
            dims: dims.to_vec(),
            rep_layer: dims.len() - 2,
            params,
        })
    }

    /// Selects which activation feeds the representation output: `k` is an
    /// index into `dims`, `1..=dims.len()-2` for hidden layers. `0` (the raw
    /// input) is only allowed for networks without hidden layers.
    pub fn with_representation_layer(mut self, k: usize) -> Result<Self> {
        let last_hidden = self.dims.len() - 2;
        let ok = if last_hidden == 0 {
            k == 0
        } else {
            (1..=last_hidden).contains(&k)
        };
        if !ok {
            return Err(Error::invalid(format!(
                "representation layer {k} out of range for dims {:?}",
                self.dims
            )));
        }
        self.rep_layer = k;
        Ok(self)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn params(&self) -> &FlatParams {
        &self.params
    }

    pub fn representation_layer(&self) -> usize {
        self.rep_layer
    }

    pub fn feature_dim(&self) -> usize {
        self.dims[self.rep_layer]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Same architecture, different parameters.
    pub fn with_params(&self, params: FlatParams) -> Result<Self> {
        if params.shapes != self.params.shapes {
            return Err(Error::invalid("parameter shapes do not match model"));
        }
        Ok(Self {
            dims: self.dims.clone(),
            rep_layer: self.rep_layer,
            params,
        })
    }

    fn layer_slices(&self) -> impl Iterator<Item = (LayerShape, &[f64], &[f64])> {
        let mut offset = 0;
        self.params.shapes.iter().map(move |s| {
            let w = &self.params.values[offset..offset + s.d_in * s.d_out];
            let b = &self.params.values[offset + s.d_in * s.d_out..offset + s.param_count()];
            offset += s.param_count();
            (*s, w, b)
        })
    }

    /// Activations for every layer: index 0 is the input, the last entry the
    /// logits. Hidden entries are post-ReLU.
    fn activations(&self, x: &[f64], n: usize) -> Vec<Vec<f64>> {
        let layers = self.params.shapes.len();
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(x.to_vec());
        for (l, (s, w, b)) in self.layer_slices().enumerate() {
            let input = &acts[l];
            let mut out = vec![0.0; n * s.d_out];
            for r in 0..n {
                let o = &mut out[r * s.d_out..(r + 1) * s.d_out];
                o.copy_from_slice(b);
                for (i, &xi) in input[r * s.d_in..(r + 1) * s.d_in].iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    for (oj, wij) in o.iter_mut().zip(&w[i * s.d_out..(i + 1) * s.d_out]) {
                        *oj += xi * wij;
                    }
                }
            }
            if l + 1 < layers {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        acts
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<ForwardOutput> {
        if inputs.cols() != self.dims[0] {
            return Err(Error::invalid(format!(
                "input width {} != model input {}",
                inputs.cols(),
                self.dims[0]
            )));
        }
        let n = inputs.rows();
        let mut acts = self.activations(inputs.data(), n);
        let logits = Matrix::new(n, self.num_classes(), acts.pop().unwrap())?;
        let penultimate = Matrix::new(n, self.feature_dim(), acts.swap_remove(self.rep_layer))?;
        Ok(ForwardOutput {
            logits,
            penultimate,
        })
    }

    /// Mean softmax cross-entropy over the batch and its gradient with
    /// respect to the flat parameter vector.
    pub fn loss_and_gradient(&self, data: &Batch) -> Result<(f64, Vec<f64>)> {
        if data.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        self.check_batch(data)?;
        let idx: Vec<usize> = (0..data.len()).collect();
        let (x, y) = data.select(&idx);
        Ok(self.loss_grad_raw(&x, &y))
    }

    fn check_batch(&self, data: &Batch) -> Result<()> {
        if data.inputs.cols() != self.dims[0] {
            return Err(Error::invalid(format!(
                "input width {} != model input {}",
                data.inputs.cols(),
                self.dims[0]
            )));
        }
        if let Some(bad) = data.labels.iter().find(|&&l| l >= self.num_classes()) {
            return Err(Error::invalid(format!("label {bad} out of range")));
        }
        Ok(())
    }

    fn loss_grad_raw(&self, x: &[f64], y: &[usize]) -> (f64, Vec<f64>) {
        let n = y.len();
        let acts = self.activations(x, n);
        let k = self.num_classes();
        let logits = acts.last().unwrap();

        let mut loss = 0.0;
        let mut dz = vec![0.0; n * k];
        for r in 0..n {
            let z = &logits[r * k..(r + 1) * k];
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let log_sum = max + sum.ln();
            loss += log_sum - z[y[r]];
            for c in 0..k {
                let p = (z[c] - log_sum).exp();
                dz[r * k + c] = (p - if c == y[r] { 1.0 } else { 0.0 }) / n as f64;
            }
        }
        loss /= n as f64;

        let mut grad = vec![0.0; self.params.len()];
        let shapes = &self.params.shapes;
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut acc = 0;
        for s in shapes {
            offsets.push(acc);
            acc += s.param_count();
        }

        for l in (0..shapes.len()).rev() {
            let s = shapes[l];
            let a_prev = &acts[l];
            let off = offsets[l];
            let w = &self.params.values[off..off + s.d_in * s.d_out];
            {
                let (gw, gb) = grad[off..off + s.param_count()].split_at_mut(s.d_in * s.d_out);
                for r in 0..n {
                    let dzr = &dz[r * s.d_out..(r + 1) * s.d_out];
                    for (gbj, d) in gb.iter_mut().zip(dzr) {
                        *gbj += d;
                    }
                    for (i, &ai) in a_prev[r * s.d_in..(r + 1) * s.d_in].iter().enumerate() {
                        if ai == 0.0 {
                            continue;
                        }
                        for (g, d) in gw[i * s.d_out..(i + 1) * s.d_out].iter_mut().zip(dzr) {
                            *g += ai * d;
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            // back through W and the ReLU of the previous layer
            let mut da = vec![0.0; n * s.d_in];
            for r in 0..n {
                let dzr = &dz[r * s.d_out..(r + 1) * s.d_out];
                for i in 0..s.d_in {
                    if a_prev[r * s.d_in + i] > 0.0 {
                        da[r * s.d_in + i] = crate::linalg::dot(&w[i * s.d_out..(i + 1) * s.d_out], dzr);
                    }
                }
            }
            dz = da;
        }
        (loss, grad)
    }
}

/// One pass over `data` in a shuffled order drawn from `rng`, applying an
/// SGD step per mini-batch.
pub fn sgd_epoch<R: Rng + ?Sized>(
    model: &MlpModel,
    data: &Batch,
    lr: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<MlpModel> {
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate {lr} must be >= 0")));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    model.check_batch(data)?;

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut out = model.clone();
    if lr == 0.0 {
        return Ok(out);
    }
    for chunk in order.chunks(batch_size) {
        let (x, y) = data.select(chunk);
        let (_, grad) = out.loss_grad_raw(&x, &y);
        for (p, g) in out.params.values.iter_mut().zip(&grad) {
            *p -= lr * g;
        }
    }
    if out.params.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("training diverged to non-finite parameters"));
    }
    Ok(out)
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose arg-max logit equals the label. Empty data
/// scores 0.
pub fn evaluate(model: &MlpModel, data: &Batch) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let out = model.forward(&data.inputs)?;
    let hits = (0..data.len())
        .filter(|&r| argmax(out.logits.row(r)) == data.labels[r])
        .count();
    Ok(hits as f64 / data.len() as f64)
}

//! The classifier: a ReLU feature extractor followed by a linear head, with
//! analytic backpropagation, an SGD optimizer and a binary checkpoint format.

use std::io::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, CodagError, Result};
use crate::objective::Objective;
use crate::rng::Rng;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"CODAGCKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub hidden: Vec<usize>,
    pub feat_dim: usize,
    pub k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 16,
            hidden: vec![64, 64],
            feat_dim: 32,
            k: 5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.feat_dim == 0 || self.k == 0 || self.hidden.contains(&0) {
            return Err(invalid("all layer widths must be positive"));
        }
        Ok(())
    }

    /// Input/output widths of every extractor layer.
    fn extractor_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.d];
        widths.extend(&self.hidden);
        widths.push(self.feat_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// `y = x W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight);
        z += &self.bias;
        z
    }
}

/// Parameters of one classifier. The same shape doubles as a gradient.
///
/// Values are always representable as `f32` (initialization and optimizer
/// steps round to single precision) so checkpoints reproduce them exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    config: ModelConfig,
    pub extractor: Vec<Linear>,
    pub head: Linear,
}

pub type Gradients = ClassifierParams;

/// One named parameter tensor, flattened row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Extractor,
    Head,
}

impl ClassifierParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            extractor: config
                .extractor_dims()
                .into_iter()
                .map(|(i, o)| Linear::zeros(i, o))
                .collect(),
            head: Linear::zeros(config.feat_dim, config.k),
            config: config.clone(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Block names in checkpoint order.
    pub fn block_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.extractor.len() {
            names.push(format!("extractor.{i}.weight"));
            names.push(format!("extractor.{i}.bias"));
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    /// Every block as `(kind, shape, values)` in checkpoint order.
    pub fn blocks(&self) -> Vec<(BlockKind, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        let layers = self
            .extractor
            .iter()
            .map(|l| (BlockKind::Extractor, l))
            .chain(std::iter::once((BlockKind::Head, &self.head)));
        for (kind, layer) in layers {
            out.push((
                kind,
                layer.weight.shape().to_vec(),
                layer.weight.as_slice().expect("standard layout"),
            ));
            out.push((
                kind,
                layer.bias.shape().to_vec(),
                layer.bias.as_slice().expect("standard layout"),
            ));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(BlockKind, &mut [f64])> {
        let mut out = Vec::new();
        let layers = self
            .extractor
            .iter_mut()
            .map(|l| (BlockKind::Extractor, l))
            .chain(std::iter::once((BlockKind::Head, &mut self.head)));
        for (kind, layer) in layers {
            out.push((kind, layer.weight.as_slice_mut().expect("standard layout")));
            out.push((kind, layer.bias.as_slice_mut().expect("standard layout")));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    pub fn shape_compatible(&self, other: &ClassifierParams) -> bool {
        self.config == other.config
    }
}

/// Glorot-style uniform weights with bound `sqrt(6 / (fan_in + fan_out))`,
/// zero biases.
pub fn init_params(config: &ModelConfig, rng: &mut Rng) -> Result<ClassifierParams> {
    config.validate()?;
    let mut params = ClassifierParams::zeros(config);
    for layer in params
        .extractor
        .iter_mut()
        .chain(std::iter::once(&mut params.head))
    {
        let (fan_in, fan_out) = layer.weight.dim();
        // shrink slightly so rounding to f32 cannot cross the bound
        let bound = init_bound(fan_in, fan_out) * (1.0 - 1e-6);
        layer
            .weight
            .mapv_inplace(|_| to_f32_grid(rng.random_range(-bound..=bound)));
    }
    Ok(params)
}

pub fn init_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn to_f32_grid(v: f64) -> f64 {
    v as f32 as f64
}

fn check_input(params: &ClassifierParams, x: ArrayView2<'_, f64>) -> Result<()> {
    if x.ncols() != params.config.d {
        return Err(invalid(format!(
            "input has dimension {}, model expects {}",
            x.ncols(),
            params.config.d
        )));
    }
    Ok(())
}

fn relu_inplace(z: &mut Array2<f64>) {
    z.mapv_inplace(|v| v.max(0.0));
}

/// Extractor output `phi(x)` for a batch (rows are samples).
pub fn features(params: &ClassifierParams, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_input(params, x)?;
    let last = params.extractor.len() - 1;
    let mut a = x.to_owned();
    for (i, layer) in params.extractor.iter().enumerate() {
        a = layer.apply(a.view());
        if i < last {
            relu_inplace(&mut a);
        }
    }
    Ok(a)
}

pub fn head(params: &ClassifierParams, feats: ArrayView2<'_, f64>) -> Array2<f64> {
    params.head.apply(feats)
}

/// Logits for a batch.
pub fn forward(params: &ClassifierParams, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let f = features(params, x)?;
    Ok(head(params, f.view()))
}

pub fn forward_one(params: &ClassifierParams, x: &[f64]) -> Result<Vec<f64>> {
    let x = ArrayView2::from_shape((1, x.len()), x).map_err(|e| invalid(e.to_string()))?;
    Ok(forward(params, x)?.into_raw_vec_and_offset().0)
}

/// Numerically stable softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(invalid("softmax needs nonempty finite logits"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / sum).collect())
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    log_softmax_rows(logits).mapv(f64::exp)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &ClassifierParams, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let logits = forward(params, x)?;
    Ok(logits
        .rows()
        .into_iter()
        .map(|r| argmax(r.as_slice().expect("standard layout")))
        .collect())
}

/// Loss of `objective` on `batch` and its gradient with respect to every
/// parameter block. With `freeze_head` the head blocks are exactly zero.
pub fn gradient(
    objective: &dyn Objective,
    params: &ClassifierParams,
    batch: ArrayView2<'_, f64>,
    freeze_head: bool,
) -> Result<(f64, Gradients)> {
    check_input(params, batch)?;
    let last = params.extractor.len() - 1;
    // inputs[i] feeds extractor layer i; inputs[last + 1] is the feature matrix
    let mut inputs = Vec::with_capacity(params.extractor.len() + 1);
    let mut pre = Vec::with_capacity(params.extractor.len());
    let mut a = batch.to_owned();
    for (i, layer) in params.extractor.iter().enumerate() {
        let z = layer.apply(a.view());
        inputs.push(a);
        a = z.clone();
        if i < last {
            relu_inplace(&mut a);
        }
        pre.push(z);
    }
    let logits = params.head.apply(a.view());
    inputs.push(a);

    let (loss, dlogits) = objective.loss_and_grad(logits.view())?;
    if !loss.is_finite() {
        return Err(CodagError::Numerical(format!("loss is {loss}")));
    }

    let mut grads = params.zeros_like();
    let feats = &inputs[last + 1];
    if !freeze_head {
        grads.head.weight = feats.t().dot(&dlogits);
        grads.head.bias = dlogits.sum_axis(Axis(0));
    }
    let mut delta = dlogits.dot(&params.head.weight.t());
    for i in (0..params.extractor.len()).rev() {
        if i < last {
            Zip::from(&mut delta).and(&pre[i]).for_each(|d, &z| {
                if z <= 0.0 {
                    *d = 0.0
                }
            });
        }
        grads.extractor[i].weight = inputs[i].t().dot(&delta);
        grads.extractor[i].bias = delta.sum_axis(Axis(0));
        if i > 0 {
            delta = delta.dot(&params.extractor[i].weight.t());
        }
    }
    if !grads.is_finite() {
        return Err(CodagError::Numerical("non-finite gradient".into()));
    }
    Ok((loss, grads))
}

/// Plain SGD with momentum. Frozen blocks are never touched.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &mut ClassifierParams, grads: &Gradients, freeze_head: bool) {
        let velocity = self.velocity.get_or_insert_with(|| grads.zeros_like());
        let (lr, mu) = (self.lr, self.momentum);
        let blocks = params.blocks_mut().into_iter();
        let vel = velocity.blocks_mut().into_iter();
        let grad = grads.blocks().into_iter();
        for (((kind, p), (_, v)), (_, _, g)) in blocks.zip(vel).zip(grad) {
            if freeze_head && kind == BlockKind::Head {
                continue;
            }
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + g;
                *p = to_f32_grid(*p - lr * *v);
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    dtype: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

/// Layout: magic, version byte, `u32` little-endian header length, JSON
/// header, then little-endian `f32` payload.
pub fn encode_checkpoint(params: &ClassifierParams) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, (_, shape, values)) in params.block_names().into_iter().zip(params.blocks()) {
        tensors.push(TensorEntry {
            name,
            shape,
            offset: payload.len(),
        });
        for v in values {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        dtype: "f32".into(),
        config: params.config.clone(),
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 5 + header.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ClassifierParams> {
    let corrupt = |m: &str| CodagError::CorruptCheckpoint(m.to_string());
    let rest = bytes
        .strip_prefix(CHECKPOINT_MAGIC.as_slice())
        .ok_or_else(|| corrupt("bad magic"))?;
    let (&version, rest) = rest
        .split_first()
        .ok_or_else(|| corrupt("missing version"))?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    if rest.len() < 4 {
        return Err(corrupt("missing header length"));
    }
    let (len, rest) = rest.split_at(4);
    let len = u32::from_le_bytes(len.try_into().expect("4 bytes")) as usize;
    if rest.len() < len {
        return Err(corrupt("truncated header"));
    }
    let (header, payload) = rest.split_at(len);
    let header: CheckpointHeader =
        serde_json::from_slice(header).map_err(|e| corrupt(&format!("header: {e}")))?;
    if header.dtype != "f32" {
        return Err(corrupt(&format!("unsupported dtype {}", header.dtype)));
    }
    header
        .config
        .validate()
        .map_err(|e| corrupt(&e.to_string()))?;
    let mut params = ClassifierParams::zeros(&header.config);
    let names = params.block_names();
    let shapes: Vec<Vec<usize>> = params.blocks().into_iter().map(|(_, s, _)| s).collect();
    if header.tensors.len() != names.len() {
        return Err(corrupt("tensor count does not match config"));
    }
    let mut expected_end = 0;
    for (((entry, name), shape), (_, dst)) in header
        .tensors
        .iter()
        .zip(&names)
        .zip(&shapes)
        .zip(params.blocks_mut())
    {
        if &entry.name != name || &entry.shape != shape {
            return Err(corrupt(&format!(
                "unexpected tensor {} {:?}",
                entry.name, entry.shape
            )));
        }
        let end = entry.offset + 4 * dst.len();
        if end > payload.len() {
            return Err(corrupt("truncated payload"));
        }
        for (v, chunk) in dst
            .iter_mut()
            .zip(payload[entry.offset..end].chunks_exact(4))
        {
            *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
        expected_end = expected_end.max(end);
    }
    if expected_end != payload.len() {
        return Err(corrupt("trailing bytes after payload"));
    }
    if !params.is_finite() {
        return Err(corrupt("non-finite parameter"));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ClassifierParams, path: &Path) -> Result<()> {
    let mut file =
        std::fs::File::create(path).map_err(io_err(format!("creating {}", path.display())))?;
    file.write_all(&encode_checkpoint(params))
        .map_err(io_err(format!("writing {}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<ClassifierParams> {
    let bytes = std::fs::read(path).map_err(io_err(format!("reading {}", path.display())))?;
    decode_checkpoint(&bytes)
}

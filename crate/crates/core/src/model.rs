//! A small tanh MLP with L2-normalized output, analytic backprop and Adam.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{OdmlError, Result};
use crate::tensor::{dot, Matrix, NORM_EPS};

const MODEL_MAGIC: &[u8; 4] = b"ODML";
const MODEL_VERSION: u32 = 1;

/// Anything that maps a batch of input rows to embedding rows.
pub trait Embedder {
    fn embed(&self, batch: &Matrix) -> Result<Matrix>;
    fn embedding_dim(&self) -> usize;
}

/// One affine layer: `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weight.data().iter().chain(&self.bias)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.data_mut().iter_mut().chain(self.bias.iter_mut())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    layer_dims: Vec<usize>,
    layers: Vec<Dense>,
}

/// Parameter gradients, laid out like the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.params().all(|v| v.is_finite()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Dense::params)
    }
}

/// Intermediate values of one forward pass, consumed by [`EmbeddingModel::backward`].
#[derive(Debug)]
pub struct ForwardCache {
    /// Input to each layer; `activations[0]` is the batch itself.
    activations: Vec<Matrix>,
    /// Final-layer output before normalization.
    pre_norm: Matrix,
    norms: Vec<f64>,
    embeddings: Matrix,
}

impl ForwardCache {
    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }
}

impl EmbeddingModel {
    /// Glorot-uniform weights, zero biases.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(OdmlError::invalid(format!(
                "layer dims must have at least two positive entries, got {layer_dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
                Dense {
                    weight: Matrix::new(fan_out, fan_in, data).expect("sized"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            layers,
        })
    }

    /// Builds a model from explicit layers, checking shape consistency.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| OdmlError::invalid("model needs at least one layer"))?;
        let mut dims = vec![first.weight.cols()];
        for (i, l) in layers.iter().enumerate() {
            if l.weight.cols() != *dims.last().unwrap() || l.bias.len() != l.weight.rows() {
                return Err(OdmlError::shape(format!("layer {i} is inconsistent")));
            }
            if l.weight.rows() == 0 || l.weight.cols() == 0 {
                return Err(OdmlError::shape(format!("layer {i} is empty")));
            }
            dims.push(l.weight.rows());
        }
        let model = Self {
            layer_dims: dims,
            layers,
        };
        if !model.params().all(|v| v.is_finite()) {
            return Err(OdmlError::NonFinite("model parameters"));
        }
        Ok(model)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len() + l.bias.len()).sum()
    }

    /// Parameters in storage order: per layer, weight (row-major) then bias.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Dense::params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(Dense::params_mut)
    }

    /// Deep copy. Kept as a named operation because the training code
    /// reads better with it (`student = teacher.clone_weights()`).
    pub fn clone_weights(&self) -> Self {
        self.clone()
    }

    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if batch.cols() != self.input_dim() {
            return Err(OdmlError::shape(format!(
                "batch has {} features, model expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut current = batch.clone();
        let mut pre_norm = None;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = current.matmul_t(&layer.weight)?;
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            activations.push(current);
            if li == last {
                pre_norm = Some(z);
                break;
            }
            current = z.map(f64::tanh);
        }
        let pre_norm = pre_norm.expect("at least one layer");

        let mut embeddings = pre_norm.clone();
        let mut norms = Vec::with_capacity(pre_norm.rows());
        for r in 0..embeddings.rows() {
            let row = embeddings.row_mut(r);
            let n = dot(row, row).sqrt();
            let denom = if n < NORM_EPS { n + NORM_EPS } else { n };
            row.iter_mut().for_each(|v| *v /= denom);
            norms.push(denom);
        }
        let cache = ForwardCache {
            activations,
            pre_norm,
            norms,
            embeddings: embeddings.clone(),
        };
        Ok((embeddings, cache))
    }

    /// Gradients of `Σ ⟨grad_embeddings, embeddings⟩` w.r.t. every parameter.
    pub fn backward(&self, cache: ForwardCache, grad_embeddings: &Matrix) -> Result<Gradients> {
        if grad_embeddings.shape() != cache.embeddings.shape() {
            return Err(OdmlError::shape(format!(
                "upstream gradient {:?} vs embeddings {:?}",
                grad_embeddings.shape(),
                cache.embeddings.shape()
            )));
        }
        // Through the normalization: dz = (g - (g·e) e) / ‖z‖ per row.
        let mut dz = Matrix::zeros(cache.pre_norm.rows(), cache.pre_norm.cols());
        for r in 0..dz.rows() {
            let g = grad_embeddings.row(r);
            let e = cache.embeddings.row(r);
            let ge = dot(g, e);
            let n = cache.norms[r];
            for ((d, &gv), &ev) in dz.row_mut(r).iter_mut().zip(g).zip(e) {
                *d = (gv - ge * ev) / n;
            }
        }

        let mut grads: Vec<Dense> = self.layers.iter().map(Dense::zeros_like).collect();
        for li in (0..self.layers.len()).rev() {
            let input = &cache.activations[li];
            grads[li].weight = dz.t_matmul(input)?;
            for r in 0..dz.rows() {
                for (b, &d) in grads[li].bias.iter_mut().zip(dz.row(r)) {
                    *b += d;
                }
            }
            if li == 0 {
                break;
            }
            // `input` is tanh output of layer li-1.
            let mut da = dz.matmul(&self.layers[li].weight)?;
            for (d, &a) in da.data_mut().iter_mut().zip(input.data()) {
                *d *= 1.0 - a * a;
            }
            dz = da;
        }
        Ok(Gradients { layers: grads })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 8 * self.num_params());
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.layer_dims.len() as u32).to_le_bytes());
        for &d in &self.layer_dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.params() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| OdmlError::io(path, e))?;
        f.write_all(&buf).map_err(|e| OdmlError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| OdmlError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| OdmlError::Format {
            path: path.to_path_buf(),
            msg,
        })
    }

    fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MODEL_MAGIC {
            return Err("bad magic, expected ODML".into());
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(format!("unsupported model version {version}"));
        }
        let count = r.u32()? as usize;
        if !(2..=1024).contains(&count) {
            return Err(format!("implausible layer count {count}"));
        }
        let dims = (0..count)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if dims.contains(&0) {
            return Err("zero layer dimension".into());
        }
        let expected: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if r.remaining() != expected * 8 {
            return Err(format!(
                "expected {} parameter bytes, found {}",
                expected * 8,
                r.remaining()
            ));
        }
        let mut model = Self::init(&dims, 0).map_err(|e| e.to_string())?;
        for p in model.params_mut() {
            *p = r.f64()?;
        }
        if !model.params().all(|v| v.is_finite()) {
            return Err("non-finite parameter".into());
        }
        Ok(model)
    }
}

impl Embedder for EmbeddingModel {
    fn embed(&self, batch: &Matrix) -> Result<Matrix> {
        self.forward(batch).map(|(e, _)| e)
    }

    fn embedding_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }
}

/// Little-endian cursor shared by the binary formats.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.remaining() < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Adam with bias correction. Moments are stored flat, in the model's
/// parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(model: &EmbeddingModel, lr: f64) -> Self {
        let n = model.num_params();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, model: &mut EmbeddingModel, grads: &Gradients) -> Result<()> {
        let n_grads = grads.iter().count();
        if n_grads != self.m.len() || model.num_params() != self.m.len() {
            return Err(OdmlError::shape(format!(
                "adam state for {} params, model has {}, gradients {}",
                self.m.len(),
                model.num_params(),
                n_grads
            )));
        }
        if !grads.is_finite() {
            return Err(OdmlError::NonFinite("gradients"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, &g), m), v) in model
            .params_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

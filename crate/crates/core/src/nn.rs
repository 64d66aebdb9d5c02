//! Dense feed-forward networks with analytic gradients.
//!
//! Parameters live in one flat `Vec<f64>`: for each layer the weight matrix
//! (row-major, `out x in`) followed by its bias vector. Optimizers, soft
//! updates, finite-difference checks and checkpoints all work on that flat
//! layout; the forward and backward passes borrow ndarray views into it.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const CHECKPOINT_MAGIC: &[u8; 4] = b"RPAF";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Smallest distance a logistic output keeps from 0 and 1.
pub const LOGISTIC_MARGIN: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("network shapes differ")]
    ShapeMismatch,
    #[error("invalid layer dims {0:?}")]
    InvalidDims(Vec<usize>),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("unsupported checkpoint version or magic: {0}")]
    Version(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    Logistic,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
            Activation::Logistic => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            2 => Some(Activation::Logistic),
            _ => None,
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
            Activation::Logistic => {
                let s = if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                };
                s.clamp(LOGISTIC_MARGIN, 1.0 - LOGISTIC_MARGIN)
            }
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Logistic => h * (1.0 - h),
        }
    }
}

/// Weights, biases and activations of a fully connected network.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNetParams {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

/// Activations recorded by a forward pass; row `i` belongs to sample `i`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    layers: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.layers.last().expect("trace holds at least the input")
    }

    pub fn batch_size(&self) -> usize {
        self.layers[0].nrows()
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl DenseNetParams {
    /// Builds a network with hidden rectifier layers and the given output activation.
    pub fn zeros(dims: &[usize], output: Activation) -> Result<Self, NnError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NnError::InvalidDims(dims.to_vec()));
        }
        let layers = dims.len() - 1;
        let mut activations = vec![Activation::Relu; layers];
        activations[layers - 1] = output;
        Ok(Self {
            dims: dims.to_vec(),
            activations,
            params: vec![0.0; param_count(dims)],
        })
    }

    /// He-uniform weights for rectifier layers, Glorot-uniform for the head, zero biases.
    pub fn random<R: Rng + ?Sized>(
        dims: &[usize],
        output: Activation,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let mut net = Self::zeros(dims, output)?;
        let mut offset = 0;
        for l in 0..net.num_layers() {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let limit = match net.activations[l] {
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            for w in &mut net.params[offset..offset + fan_in * fan_out] {
                *w = dist.sample(rng);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    /// Assembles a network from explicit parts; used by checkpoint loading and tests.
    pub fn from_parts(
        dims: Vec<usize>,
        activations: Vec<Activation>,
        params: Vec<f64>,
    ) -> Result<Self, NnError> {
        if dims.len() < 2 || dims.contains(&0) || activations.len() != dims.len() - 1 {
            return Err(NnError::InvalidDims(dims));
        }
        let expected = param_count(&dims);
        if params.len() != expected {
            return Err(NnError::Dimension {
                expected,
                got: params.len(),
            });
        }
        Ok(Self {
            dims,
            activations,
            params,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims == other.dims && self.activations == other.activations
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn layer_offsets(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.dims.windows(2).map(move |w| {
            let start = offset;
            offset += w[1] * w[0] + w[1];
            (start, w[0], w[1])
        })
    }

    fn weights(&self, start: usize, fan_in: usize, fan_out: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(
            (fan_out, fan_in),
            &self.params[start..start + fan_in * fan_out],
        )
        .expect("layout matches dims")
    }

    fn bias(&self, start: usize, fan_in: usize, fan_out: usize) -> ArrayView1<'_, f64> {
        let b = start + fan_in * fan_out;
        ArrayView1::from(&self.params[b..b + fan_out])
    }

    /// Forward pass for a single input vector.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardTrace), NnError> {
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row vector");
        let trace = self.forward_batch(x)?;
        let out = trace.output().row(0).to_vec();
        Ok((out, trace))
    }

    /// Output only, without keeping the trace.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        self.forward(input).map(|(out, _)| out)
    }

    /// Forward pass over a batch whose rows are samples.
    pub fn forward_batch(&self, input: Array2<f64>) -> Result<ForwardTrace, NnError> {
        if input.ncols() != self.input_dim() {
            return Err(NnError::Dimension {
                expected: self.input_dim(),
                got: input.ncols(),
            });
        }
        let mut layers = Vec::with_capacity(self.dims.len());
        layers.push(input);
        for (l, (start, fan_in, fan_out)) in self.layer_offsets().enumerate() {
            let w = self.weights(start, fan_in, fan_out);
            let b = self.bias(start, fan_in, fan_out);
            let act = self.activations[l];
            let mut z = layers[l].dot(&w.t());
            z += &b;
            z.mapv_inplace(|v| act.apply(v));
            layers.push(z);
        }
        Ok(ForwardTrace { layers })
    }

    /// Backpropagates `output_grad` (one row per sample) through a recorded trace.
    ///
    /// Returns the parameter gradient summed over the batch, in the flat
    /// parameter layout, and the gradient with respect to each input row.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        output_grad: &Array2<f64>,
    ) -> Result<(Vec<f64>, Array2<f64>), NnError> {
        let out = trace.output();
        if output_grad.dim() != out.dim() {
            return Err(NnError::Dimension {
                expected: out.len(),
                got: output_grad.len(),
            });
        }
        let offsets: Vec<_> = self.layer_offsets().collect();
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = output_grad.clone();
        for l in (0..self.num_layers()).rev() {
            let (start, fan_in, fan_out) = offsets[l];
            let act = self.activations[l];
            let h = &trace.layers[l + 1];
            ndarray::Zip::from(&mut delta)
                .and(h)
                .for_each(|d, &hv| *d *= act.derivative_from_output(hv));
            let input = &trace.layers[l];
            let gw = delta.t().dot(input);
            let gb = delta.sum_axis(Axis(0));
            grads[start..start + fan_in * fan_out]
                .copy_from_slice(gw.as_slice().expect("standard layout"));
            grads[start + fan_in * fan_out..start + fan_in * fan_out + fan_out]
                .copy_from_slice(gb.as_slice().expect("standard layout"));
            let w = self.weights(start, fan_in, fan_out);
            delta = delta.dot(&w);
        }
        Ok((grads, delta))
    }

    /// Single-sample backward; `output_grad` has one entry per output unit.
    pub fn backward_single(
        &self,
        trace: &ForwardTrace,
        output_grad: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), NnError> {
        let g = Array2::from_shape_vec((1, output_grad.len()), output_grad.to_vec())
            .expect("row vector");
        let (grads, input_grad) = self.backward(trace, &g)?;
        Ok((grads, input_grad.row(0).to_vec()))
    }

    /// `self <- (1 - tau) * self + tau * online`, elementwise.
    pub fn soft_update(&mut self, online: &Self, tau: f64) -> Result<(), NnError> {
        if !self.same_shape(online) {
            return Err(NnError::ShapeMismatch);
        }
        for (t, &o) in self.params.iter_mut().zip(&online.params) {
            *t = (1.0 - tau) * *t + tau * o;
        }
        Ok(())
    }
}

/// Free-function form of [`DenseNetParams::soft_update`].
pub fn soft_update(
    target: &mut DenseNetParams,
    online: &DenseNetParams,
    tau: f64,
) -> Result<(), NnError> {
    target.soft_update(online, tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn for_net(net: &DenseNetParams, config: AdamConfig) -> Self {
        Self::new(net.num_params(), config)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    /// One bias-corrected Adam update of `params` with gradient `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(NnError::Dimension {
                expected: self.first.len(),
                got: grads.len().min(params.len()),
            });
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * g;
            self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g * g;
            let m_hat = self.first[i] / c1;
            let v_hat = self.second[i] / c2;
            params[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

pub fn adam_step(
    net: &mut DenseNetParams,
    grads: &[f64],
    state: &mut AdamState,
) -> Result<(), NnError> {
    state.step(net.params_mut(), grads)
}

/// Writes networks in the binary checkpoint format.
///
/// Layout: magic `RPAF`, `u32` version, `u32` network count, then per network
/// `u32` layer count, `u32` dims (layer count + 1), one activation tag byte
/// per layer, and the flat parameters as little-endian `f64`.
pub fn encode_checkpoint(nets: &[DenseNetParams]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(nets.len() as u32).to_le_bytes());
    for net in nets {
        buf.extend_from_slice(&(net.num_layers() as u32).to_le_bytes());
        for &d in &net.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend(net.activations.iter().map(|a| a.tag()));
        for p in &net.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.bytes.len() {
            return Err(NnError::Malformed(format!(
                "unexpected end of data at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64, NnError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<DenseNetParams>, NnError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r
        .take(4)
        .map_err(|_| NnError::Version("missing magic".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(NnError::Version(format!("bad magic {magic:?}")));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Version(format!("version {version}")));
    }
    let count = r.u32()? as usize;
    let mut nets = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let layers = r.u32()? as usize;
        if layers == 0 || layers > 1024 {
            return Err(NnError::Malformed(format!("layer count {layers}")));
        }
        let dims = (0..=layers)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let activations = r
            .take(layers)?
            .iter()
            .map(|&t| {
                Activation::from_tag(t).ok_or(NnError::Malformed(format!("activation tag {t}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if dims.contains(&0) {
            return Err(NnError::Malformed(format!("zero dim in {dims:?}")));
        }
        let n = param_count(&dims);
        if n * 8 > bytes.len() {
            return Err(NnError::Malformed(format!(
                "{n} parameters exceed file size"
            )));
        }
        let params = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        nets.push(DenseNetParams::from_parts(dims, activations, params)?);
    }
    if r.pos != bytes.len() {
        return Err(NnError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(nets)
}

pub fn save_checkpoint(nets: &[DenseNetParams], path: &Path) -> Result<(), NnError> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode_checkpoint(nets))?;
    file.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<DenseNetParams>, NnError> {
    decode_checkpoint(&fs::read(path)?)
}

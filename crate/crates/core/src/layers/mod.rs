//! Context-sensitive two-point layers and the point-neuron baseline.
//!
//! A two-point unit keeps the feedforward drive `r` (receptive field) apart
//! from its context `c`, and only lets `r` through in proportion to `c`:
//!
//! ```text
//! r = θ_rf·A + λ                      receptive field
//! p = θ_p·r + λ                       proximal context (same stream)
//! d = θ_d·r̄_prev + λ                  distal context (other stream)
//! m = θ_rec·m_prev + θ_own·A + θ_cross·Ā + λ    universal context
//! c = ζ_c(W_p·p + W_d·d + W_m·m + λ)  integrated context
//! a = r ⊙ c,   A' = ζ(a)
//! ```

mod conv;
mod dense;
mod point;

pub use conv::{ConvDims, TwoPointConvLayer};
pub use dense::{ContextIntegrator, DenseDims, IntegrationMode, TwoPointDenseLayer, TwoPointOptions, TRILINEAR_CAP};
pub use point::{Fusion, PointConvLayer, PointDenseLayer};

use mcc_tensor::{glorot_uniform, ParamId, ParameterStore, Rng, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

/// How the integrated context is applied to the receptive field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modulation {
    /// `a = r ⊙ c`
    Hadamard,
    /// `a = r ⊙ c ⊙ s(c)` where `s` is the neighbourhood mean of `c`.
    Neighborhood,
}

impl Modulation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hadamard" => Ok(Modulation::Hadamard),
            "neighborhood" => Ok(Modulation::Neighborhood),
            other => Err(Error::Config(format!("unknown modulation {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modulation::Hadamard => "hadamard",
            Modulation::Neighborhood => "neighborhood",
        }
    }
}

/// Whether the universal context is one reservoir per layer pair or one per
/// stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MemorySharing {
    Shared,
    PerStream,
}

impl MemorySharing {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(MemorySharing::Shared),
            "per-stream" => Ok(MemorySharing::PerStream),
            other => Err(Error::Config(format!("unknown memory sharing {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MemorySharing::Shared => "shared",
            MemorySharing::PerStream => "per-stream",
        }
    }
}

/// Universal-context reservoir `m`, zero at the start of a stack.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    pub m: Tensor,
}

impl MemoryState {
    pub fn zeros(batch: usize, extent: usize) -> Self {
        MemoryState {
            m: Tensor::zeros(&[batch, extent]),
        }
    }
}

/// Affine map `x·W + b` on `[n×in]` rows; `W` is `[in×out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParameterStore, rng: &mut Rng, name: &str, input: usize, output: usize) -> Self {
        let weight = store.insert(format!("{name}.w"), glorot_uniform(rng, input, output, &[input, output]));
        let bias = store.insert(format!("{name}.b"), Tensor::zeros(&[output]));
        Linear {
            weight,
            bias: Some(bias),
        }
    }

    pub fn without_bias(store: &mut ParameterStore, rng: &mut Rng, name: &str, input: usize, output: usize) -> Self {
        let weight = store.insert(format!("{name}.w"), glorot_uniform(rng, input, output, &[input, output]));
        Linear { weight, bias: None }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                Ok(tape.add_bias(y, b)?)
            }
            None => Ok(y),
        }
    }

    pub fn dims(&self, store: &ParameterStore) -> (usize, usize) {
        let d = store.value(self.weight).dims();
        (d[0], d[1])
    }
}

/// Convolution with a per-output-channel bias.
#[derive(Clone, Copy, Debug)]
pub struct ConvMap {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvMap {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let fan_out = out_channels * kernel * kernel;
        let k = glorot_uniform(rng, fan_in, fan_out, &[out_channels, in_channels, kernel, kernel]);
        ConvMap {
            kernel: store.insert(format!("{name}.k"), k),
            bias: store.insert(format!("{name}.b"), Tensor::zeros(&[out_channels])),
            stride,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let k = tape.param(store, self.kernel);
        let y = tape.conv2d(x, k, self.stride)?;
        let b = tape.param(store, self.bias);
        Ok(tape.add_channels(y, b)?)
    }
}

/// Transposed convolution with a per-output-channel bias.
#[derive(Clone, Copy, Debug)]
pub struct ConvTransposeMap {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvTransposeMap {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let fan_out = out_channels * kernel * kernel;
        let k = glorot_uniform(rng, fan_in, fan_out, &[in_channels, out_channels, kernel, kernel]);
        ConvTransposeMap {
            kernel: store.insert(format!("{name}.k"), k),
            bias: store.insert(format!("{name}.b"), Tensor::zeros(&[out_channels])),
            stride,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let k = tape.param(store, self.kernel);
        let y = tape.conv2d_transpose(x, k, self.stride)?;
        let b = tape.param(store, self.bias);
        Ok(tape.add_channels(y, b)?)
    }
}

/// Weights of the universal-context update
/// `m = m_prev·W_rec + pool(A)·W_own + pool(Ā)·W_cross + λ`.
#[derive(Clone, Copy, Debug)]
pub struct MemoryMaps {
    pub recurrent: ParamId,
    pub own: ParamId,
    pub cross: ParamId,
    pub bias: ParamId,
}

impl MemoryMaps {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        own_dim: usize,
        cross_dim: usize,
        extent: usize,
    ) -> Self {
        MemoryMaps {
            recurrent: store.insert(
                format!("{name}.rec"),
                glorot_uniform(rng, extent, extent, &[extent, extent]),
            ),
            own: store.insert(
                format!("{name}.own"),
                glorot_uniform(rng, own_dim, extent, &[own_dim, extent]),
            ),
            cross: store.insert(
                format!("{name}.cross"),
                glorot_uniform(rng, cross_dim, extent, &[cross_dim, extent]),
            ),
            bias: store.insert(format!("{name}.b"), Tensor::zeros(&[extent])),
        }
    }

    /// All arguments are `[n×·]` rows (spatial inputs pooled beforehand).
    pub fn update(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        m_prev: Var,
        own: Var,
        cross: Var,
    ) -> Result<Var> {
        let w_rec = tape.param(store, self.recurrent);
        let w_own = tape.param(store, self.own);
        let w_cross = tape.param(store, self.cross);
        let a = tape.matmul(m_prev, w_rec)?;
        let b = tape.matmul(own, w_own)?;
        let c = tape.matmul(cross, w_cross)?;
        let ab = tape.add(a, b)?;
        let abc = tape.add(ab, c)?;
        let bias = tape.param(store, self.bias);
        Ok(tape.add_bias(abc, bias)?)
    }

    pub fn extent(&self, store: &ParameterStore) -> usize {
        store.value(self.recurrent).dims()[0]
    }
}

/// `r ⊙ c`.
pub fn modulate(tape: &mut Tape, r: Var, c: Var) -> Result<Var> {
    if tape.dims(r) != tape.dims(c) {
        return Err(Error::Tensor(mcc_tensor::TensorError::Shape {
            op: "modulate",
            lhs: tape.dims(r).to_vec(),
            rhs: tape.dims(c).to_vec(),
        }));
    }
    Ok(tape.mul(r, c)?)
}

/// `r ⊙ c ⊙ neighbor_mean(c)`.
pub fn modulate_neighborhood(tape: &mut Tape, r: Var, c: Var) -> Result<Var> {
    let rc = modulate(tape, r, c)?;
    let s = tape.neighbor_mean(c)?;
    Ok(tape.mul(rc, s)?)
}

/// Spatial inputs `[n×c×h×w]` reduce to `[n×c]`; rows pass through.
pub(crate) fn pooled(tape: &mut Tape, x: Var) -> Result<Var> {
    match tape.dims(x).len() {
        4 => Ok(tape.channel_mean(x)?),
        2 => Ok(x),
        _ => Err(Error::Tensor(mcc_tensor::TensorError::Shape {
            op: "pooled",
            lhs: tape.dims(x).to_vec(),
            rhs: vec![],
        })),
    }
}

/// Everything a layer reads from the layer below.
#[derive(Clone, Copy, Debug)]
pub struct LayerInputs {
    /// This stream's activation `A^{ℓ−1}`.
    pub own: Var,
    /// The other stream's activation `Ā^{ℓ−1}`.
    pub other: Var,
    /// The other stream's receptive field `r̄^{ℓ−1}` (its raw input at the
    /// first layer).
    pub other_rf: Var,
    /// Universal context from the layer below.
    pub memory: Var,
    /// Universal context already computed for this layer pair; when set,
    /// the layer uses it instead of running its own memory update.
    pub shared_memory: Option<Var>,
}

/// Intermediate streams of one two-point forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutputs {
    pub activation: Var,
    pub rf: Var,
    pub proximal: Var,
    pub distal: Var,
    pub memory: Var,
    pub context: Var,
    pub modulated: Var,
}

use mcc_tensor::{ParameterStore, Rng, Tape, Var};

use super::{pooled, Activation, ConvMap, Linear};
use crate::error::{Error, Result};

/// How a point neuron merges its two input streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Fusion {
    Concat,
    Add,
    Mul,
}

impl Fusion {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Fusion::Concat),
            "add" => Ok(Fusion::Add),
            "mul" => Ok(Fusion::Mul),
            other => Err(Error::Config(format!("unknown fusion {other:?}"))),
        }
    }

    /// Width of the fused input.
    pub fn fused_extent(self, own: usize, other: usize) -> Result<usize> {
        match self {
            Fusion::Concat => Ok(own + other),
            _ if own == other => Ok(own),
            _ => Err(Error::Contract(format!(
                "{self:?} fusion needs equal widths, got {own} and {other}"
            ))),
        }
    }

    pub fn apply(self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        Ok(match self {
            Fusion::Concat => tape.concat_cols(a, b)?,
            Fusion::Add => tape.add(a, b)?,
            Fusion::Mul => tape.mul(a, b)?,
        })
    }
}

/// Point neuron `A = ζ(fuse(A_prev, Ā_prev)·W + λ)`.
#[derive(Clone, Debug)]
pub struct PointDenseLayer {
    pub map: Linear,
    pub fusion: Fusion,
    pub activation: Activation,
}

impl PointDenseLayer {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        own: usize,
        other: usize,
        units: usize,
        fusion: Fusion,
        activation: Activation,
    ) -> Result<Self> {
        let input = fusion.fused_extent(own, other)?;
        Ok(PointDenseLayer {
            map: Linear::new(store, rng, name, input, units),
            fusion,
            activation,
        })
    }

    pub fn baseline_forward(&self, tape: &mut Tape, store: &ParameterStore, own: Var, other: Var) -> Result<Var> {
        let fused = self.fusion.apply(tape, own, other)?;
        let pre = self.map.forward(tape, store, fused)?;
        Ok(self.activation.apply(tape, pre))
    }
}

/// Convolutional point neuron: `ζ(conv(A) + λ + bcast(pool(Ā)·W))`.
#[derive(Clone, Debug)]
pub struct PointConvLayer {
    pub conv: ConvMap,
    pub cross: Linear,
    pub activation: Activation,
}

impl PointConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        in_channels: usize,
        other_channels: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
    ) -> Self {
        PointConvLayer {
            conv: ConvMap::new(store, rng, &format!("{name}.conv"), in_channels, filters, kernel, stride),
            cross: Linear::without_bias(store, rng, &format!("{name}.cross"), other_channels, filters),
            activation,
        }
    }

    pub fn baseline_forward(&self, tape: &mut Tape, store: &ParameterStore, own: Var, other: Var) -> Result<Var> {
        let local = self.conv.forward(tape, store, own)?;
        let pooled = pooled(tape, other)?;
        let cross = self.cross.forward(tape, store, pooled)?;
        let pre = tape.add_channels(local, cross)?;
        Ok(self.activation.apply(tape, pre))
    }
}

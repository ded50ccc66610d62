use mcc_tensor::{ParameterStore, Rng, Tape, Var};

use super::dense::{IntegrationMode, TwoPointOptions};
use super::{
    modulate, modulate_neighborhood, pooled, Activation, ConvMap, LayerInputs, LayerOutputs, Linear, MemoryMaps,
    Modulation,
};
use crate::error::{Error, Result};

/// Geometry of a convolutional two-point layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    /// Channels of this stream's input.
    pub in_channels: usize,
    /// Channels of the other stream's input.
    pub other_channels: usize,
    /// Channels of the other stream's receptive field at the layer below.
    pub other_rf_channels: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub memory: usize,
}

impl ConvDims {
    /// Output extent of the receptive-field convolution on an `h`-sized side.
    pub fn out_extent(&self, h: usize) -> usize {
        (h - self.kernel) / self.stride + 1
    }
}

/// Convolutional two-point layer with one context per filter and position.
///
/// The receptive field and proximal context are convolutions over this
/// stream. The other stream generally lives on a different grid, so the
/// distal context and memory read its channel means and are broadcast over
/// the receptive-field positions of each filter.
#[derive(Clone, Debug)]
pub struct TwoPointConvLayer {
    pub dims: ConvDims,
    pub rf: ConvMap,
    /// 1×1 convolution `r → p`.
    pub proximal: ConvMap,
    /// `pool(r̄_prev) → d`, one value per filter.
    pub distal: Linear,
    pub memory: Option<MemoryMaps>,
    /// 1×1 convolution `p → c`.
    pub context_proximal: ConvMap,
    pub context_distal: Linear,
    pub context_memory: Linear,
    pub context_activation: Activation,
    pub activation: Activation,
    pub modulation: Modulation,
}

impl TwoPointConvLayer {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        dims: ConvDims,
        opts: TwoPointOptions,
    ) -> Result<Self> {
        if opts.integration != IntegrationMode::Additive {
            return Err(Error::Config("convolutional layers support additive integration only".into()));
        }
        let f = dims.filters;
        let rf = ConvMap::new(store, rng, &format!("{name}.rf"), dims.in_channels, f, dims.kernel, dims.stride);
        let proximal = ConvMap::new(store, rng, &format!("{name}.prox"), f, f, 1, 1);
        let distal = Linear::new(store, rng, &format!("{name}.dist"), dims.other_rf_channels, f);
        let memory = opts.owns_memory.then(|| {
            MemoryMaps::new(store, rng, &format!("{name}.mem"), dims.in_channels, dims.other_channels, dims.memory)
        });
        let context_proximal = ConvMap::new(store, rng, &format!("{name}.ctx.p"), f, f, 1, 1);
        let context_distal = Linear::without_bias(store, rng, &format!("{name}.ctx.d"), f, f);
        let context_memory = Linear::without_bias(store, rng, &format!("{name}.ctx.m"), dims.memory, f);
        Ok(TwoPointConvLayer {
            dims,
            rf,
            proximal,
            distal,
            memory,
            context_proximal,
            context_distal,
            context_memory,
            context_activation: opts.context_activation,
            activation: opts.activation,
            modulation: opts.modulation,
        })
    }

    pub fn rf_transform(&self, tape: &mut Tape, store: &ParameterStore, a_prev: Var) -> Result<Var> {
        self.rf.forward(tape, store, a_prev)
    }

    pub fn proximal_context(&self, tape: &mut Tape, store: &ParameterStore, r: Var) -> Result<Var> {
        self.proximal.forward(tape, store, r)
    }

    /// `[n×F]` distal context from the other stream's pooled receptive field.
    pub fn distal_context(&self, tape: &mut Tape, store: &ParameterStore, other_rf_prev: Var) -> Result<Var> {
        let pooled = pooled(tape, other_rf_prev)?;
        self.distal.forward(tape, store, pooled)
    }

    pub fn universal_context_update(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        m_prev: Var,
        a_prev: Var,
        other_prev: Var,
    ) -> Result<Var> {
        let maps = self
            .memory
            .as_ref()
            .ok_or_else(|| Error::Contract("layer has no memory maps; pass the shared reservoir".into()))?;
        let own = pooled(tape, a_prev)?;
        let cross = pooled(tape, other_prev)?;
        maps.update(tape, store, m_prev, own, cross)
    }

    /// `c = ζ_c(conv₁ₓ₁(p) + bcast(d·W_d + m·W_m))`
    pub fn integrate_context(&self, tape: &mut Tape, store: &ParameterStore, p: Var, d: Var, m: Var) -> Result<Var> {
        let local = self.context_proximal.forward(tape, store, p)?;
        let dd = self.context_distal.forward(tape, store, d)?;
        let mm = self.context_memory.forward(tape, store, m)?;
        let global = tape.add(dd, mm)?;
        let pre = tape.add_channels(local, global)?;
        Ok(self.context_activation.apply(tape, pre))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, inputs: LayerInputs) -> Result<LayerOutputs> {
        self.forward_with(tape, store, inputs, self.modulation)
    }

    pub fn forward_neighborhood(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        inputs: LayerInputs,
    ) -> Result<LayerOutputs> {
        self.forward_with(tape, store, inputs, Modulation::Neighborhood)
    }

    pub fn forward_with(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        inputs: LayerInputs,
        modulation: Modulation,
    ) -> Result<LayerOutputs> {
        let r = self.rf_transform(tape, store, inputs.own)?;
        let p = self.proximal_context(tape, store, r)?;
        let d = self.distal_context(tape, store, inputs.other_rf)?;
        let m = match inputs.shared_memory {
            Some(m) => m,
            None => self.universal_context_update(tape, store, inputs.memory, inputs.own, inputs.other)?,
        };
        let c = self.integrate_context(tape, store, p, d, m)?;
        let a = match modulation {
            Modulation::Hadamard => modulate(tape, r, c)?,
            Modulation::Neighborhood => modulate_neighborhood(tape, r, c)?,
        };
        let activation = self.activation.apply(tape, a);
        Ok(LayerOutputs {
            activation,
            rf: r,
            proximal: p,
            distal: d,
            memory: m,
            context: c,
            modulated: a,
        })
    }
}

use mcc_tensor::{glorot_uniform, ParamId, ParameterStore, Rng, Tape, Tensor, Var};

use super::{
    modulate, modulate_neighborhood, Activation, LayerInputs, LayerOutputs, Linear, MemoryMaps, Modulation,
};
use crate::error::{Error, Result};

/// Largest `|p|·|d|·|m|·|c|` a trilinear integrator may allocate (8⁴).
pub const TRILINEAR_CAP: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntegrationMode {
    /// `c = ζ_c(W_p·p + W_d·d + W_m·m + λ)`
    Additive,
    /// `c_ε = ζ_c(Θ^ε_{μνξ} p_μ d_ν m_ξ + λ_ε)`
    Trilinear,
}

impl IntegrationMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(IntegrationMode::Additive),
            "trilinear" => Ok(IntegrationMode::Trilinear),
            other => Err(Error::Config(format!("unknown integration mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
enum IntegratorWeights {
    Additive {
        proximal: ParamId,
        distal: ParamId,
        memory: ParamId,
    },
    Trilinear {
        theta: ParamId,
    },
}

/// Combines proximal, distal and universal context into one gain per unit.
#[derive(Clone, Debug)]
pub struct ContextIntegrator {
    weights: IntegratorWeights,
    pub bias: ParamId,
    pub activation: Activation,
    extents: [usize; 4],
}

impl ContextIntegrator {
    pub fn additive(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        [p, d, m, out]: [usize; 4],
        activation: Activation,
    ) -> Self {
        let mut w = |tag: &str, input: usize| {
            store.insert(format!("{name}.{tag}"), glorot_uniform(rng, input, out, &[input, out]))
        };
        let weights = IntegratorWeights::Additive {
            proximal: w("wp", p),
            distal: w("wd", d),
            memory: w("wm", m),
        };
        ContextIntegrator {
            weights,
            bias: store.insert(format!("{name}.b"), Tensor::zeros(&[out])),
            activation,
            extents: [p, d, m, out],
        }
    }

    pub fn trilinear(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        [p, d, m, out]: [usize; 4],
        activation: Activation,
        cap: usize,
    ) -> Result<Self> {
        let size = p * d * m * out;
        if size > cap {
            return Err(Error::Resource(format!(
                "trilinear context needs {p}·{d}·{m}·{out} = {size} weights, cap is {cap}"
            )));
        }
        let theta = glorot_uniform(rng, p * d * m, out, &[p * d * m, out]);
        Ok(ContextIntegrator {
            weights: IntegratorWeights::Trilinear {
                theta: store.insert(format!("{name}.theta"), theta),
            },
            bias: store.insert(format!("{name}.b"), Tensor::zeros(&[out])),
            activation,
            extents: [p, d, m, out],
        })
    }

    pub fn mode(&self) -> IntegrationMode {
        match self.weights {
            IntegratorWeights::Additive { .. } => IntegrationMode::Additive,
            IntegratorWeights::Trilinear { .. } => IntegrationMode::Trilinear,
        }
    }

    /// Weight ids: `[W_p, W_d, W_m]` for additive, `[Θ]` for trilinear.
    /// `Θ` is stored as `[(μ·|d| + ν)·|m| + ξ, ε]`.
    pub fn weight_ids(&self) -> Vec<ParamId> {
        match self.weights {
            IntegratorWeights::Additive {
                proximal,
                distal,
                memory,
            } => vec![proximal, distal, memory],
            IntegratorWeights::Trilinear { theta } => vec![theta],
        }
    }

    pub fn extents(&self) -> [usize; 4] {
        self.extents
    }

    pub fn integrate(&self, tape: &mut Tape, store: &ParameterStore, p: Var, d: Var, m: Var) -> Result<Var> {
        let pre = match self.weights {
            IntegratorWeights::Additive {
                proximal,
                distal,
                memory,
            } => {
                let wp = tape.param(store, proximal);
                let wd = tape.param(store, distal);
                let wm = tape.param(store, memory);
                let a = tape.matmul(p, wp)?;
                let b = tape.matmul(d, wd)?;
                let c = tape.matmul(m, wm)?;
                let ab = tape.add(a, b)?;
                tape.add(ab, c)?
            }
            IntegratorWeights::Trilinear { theta } => {
                let pd = tape.outer(p, d)?;
                let pdm = tape.outer(pd, m)?;
                let th = tape.param(store, theta);
                tape.matmul(pdm, th)?
            }
        };
        let bias = tape.param(store, self.bias);
        let pre = tape.add_bias(pre, bias)?;
        Ok(self.activation.apply(tape, pre))
    }
}

/// Extents of a dense two-point layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseDims {
    /// Width of this stream's input `A^{ℓ−1}`.
    pub input: usize,
    /// Width of the other stream's input `Ā^{ℓ−1}`.
    pub other_input: usize,
    /// Width of the other stream's receptive field `r̄^{ℓ−1}`.
    pub other_rf: usize,
    /// Units `|r| = |c| = |a|`.
    pub units: usize,
    /// Universal-context extent `|m|`.
    pub memory: usize,
}

/// Fully connected two-point layer.
#[derive(Clone, Debug)]
pub struct TwoPointDenseLayer {
    pub dims: DenseDims,
    pub rf: Linear,
    pub proximal: Linear,
    pub distal: Linear,
    /// `None` when this layer reads a reservoir owned by its partner.
    pub memory: Option<MemoryMaps>,
    pub integrator: ContextIntegrator,
    pub activation: Activation,
    pub modulation: Modulation,
}

/// Construction options shared by dense and convolutional two-point layers.
#[derive(Clone, Copy, Debug)]
pub struct TwoPointOptions {
    pub activation: Activation,
    pub context_activation: Activation,
    pub modulation: Modulation,
    pub integration: IntegrationMode,
    pub owns_memory: bool,
}

impl Default for TwoPointOptions {
    fn default() -> Self {
        TwoPointOptions {
            activation: Activation::Relu,
            context_activation: Activation::Sigmoid,
            modulation: Modulation::Hadamard,
            integration: IntegrationMode::Additive,
            owns_memory: true,
        }
    }
}

impl TwoPointDenseLayer {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        dims: DenseDims,
        opts: TwoPointOptions,
    ) -> Result<Self> {
        let u = dims.units;
        let rf = Linear::new(store, rng, &format!("{name}.rf"), dims.input, u);
        let proximal = Linear::new(store, rng, &format!("{name}.prox"), u, u);
        let distal = Linear::new(store, rng, &format!("{name}.dist"), dims.other_rf, u);
        let memory = opts.owns_memory.then(|| {
            MemoryMaps::new(store, rng, &format!("{name}.mem"), dims.input, dims.other_input, dims.memory)
        });
        let extents = [u, u, dims.memory, u];
        let integrator = match opts.integration {
            IntegrationMode::Additive => {
                ContextIntegrator::additive(store, rng, &format!("{name}.ctx"), extents, opts.context_activation)
            }
            IntegrationMode::Trilinear => ContextIntegrator::trilinear(
                store,
                rng,
                &format!("{name}.ctx"),
                extents,
                opts.context_activation,
                TRILINEAR_CAP,
            )?,
        };
        Ok(TwoPointDenseLayer {
            dims,
            rf,
            proximal,
            distal,
            memory,
            integrator,
            activation: opts.activation,
            modulation: opts.modulation,
        })
    }

    /// Closed-form scalar parameter count (additive integration).
    pub fn expected_parameter_count(dims: &DenseDims, owns_memory: bool) -> usize {
        let DenseDims {
            input,
            other_input,
            other_rf,
            units: u,
            memory: m,
        } = *dims;
        let rf = input * u + u;
        let prox = u * u + u;
        let dist = other_rf * u + u;
        let mem = if owns_memory {
            m * m + input * m + other_input * m + m
        } else {
            0
        };
        let ctx = u * u + u * u + m * u + u;
        rf + prox + dist + mem + ctx
    }

    /// `r = A·θ_rf + λ_rf`
    pub fn rf_transform(&self, tape: &mut Tape, store: &ParameterStore, a_prev: Var) -> Result<Var> {
        self.rf.forward(tape, store, a_prev)
    }

    /// `p = r·θ_p + λ_p`
    pub fn proximal_context(&self, tape: &mut Tape, store: &ParameterStore, r: Var) -> Result<Var> {
        self.proximal.forward(tape, store, r)
    }

    /// `d = r̄_prev·θ_d + λ_d`
    pub fn distal_context(&self, tape: &mut Tape, store: &ParameterStore, other_rf_prev: Var) -> Result<Var> {
        self.distal.forward(tape, store, other_rf_prev)
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
        maps.update(tape, store, m_prev, a_prev, other_prev)
    }

    pub fn integrate_context(&self, tape: &mut Tape, store: &ParameterStore, p: Var, d: Var, m: Var) -> Result<Var> {
        self.integrator.integrate(tape, store, p, d, m)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, inputs: LayerInputs) -> Result<LayerOutputs> {
        self.forward_with(tape, store, inputs, self.modulation)
    }

    /// Forward pass with neighbourhood-weighted modulation regardless of the
    /// layer's configured mode.
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

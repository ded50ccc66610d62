//! Two-stream encoder/decoder networks built from two-point or point layers.

use mcc_tensor::{ParameterStore, Rng, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::layers::{
    Activation, ConvDims, ConvTransposeMap, ConvMap, DenseDims, Fusion, LayerInputs, Linear, MemorySharing,
    Modulation, PointConvLayer, PointDenseLayer, TwoPointConvLayer, TwoPointDenseLayer, TwoPointOptions,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// Two-point layers in both streams.
    Mcc,
    /// [`ModelKind::Mcc`] with conv units randomly silenced.
    MccSparse,
    /// Point-neuron layers with additive cross-stream fusion.
    Baseline,
    /// Single-stream point-neuron autoencoder.
    Ae,
    /// Single-stream variational autoencoder.
    Vae,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [ModelKind::Mcc, ModelKind::MccSparse, ModelKind::Baseline, ModelKind::Ae, ModelKind::Vae];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mcc => "mcc",
            ModelKind::MccSparse => "mcc-sparse",
            ModelKind::Baseline => "baseline",
            ModelKind::Ae => "ae",
            ModelKind::Vae => "vae",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model {s:?}")))
    }

    pub fn is_two_stream(self) -> bool {
        !matches!(self, ModelKind::Ae | ModelKind::Vae)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Reconstruction,
    Mi,
    Mask,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Reconstruction => "reconstruction",
            Task::Mi => "mi",
            Task::Mask => "mask",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Task::Reconstruction, Task::Mi, Task::Mask]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

/// Layer sizes shared by every model.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub conv_layers: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub channel_embed: usize,
    pub global_embed: usize,
    pub memory: usize,
    /// Channels of the decoder's first spatial map.
    pub decoder_channels: usize,
    /// Side of the decoder's first spatial map.
    pub decoder_side: usize,
    /// Filters of the hidden transposed convolutions; a final one-filter
    /// step is always appended.
    pub decoder_filters: Vec<usize>,
    pub modulation: Modulation,
    pub memory_sharing: MemorySharing,
    pub context_activation: Activation,
    /// Latent width of the VAE.
    pub latent: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            conv_layers: 2,
            filters: 16,
            kernel: 3,
            stride: 2,
            channel_embed: 32,
            global_embed: 64,
            memory: 16,
            decoder_channels: 64,
            decoder_side: 2,
            decoder_filters: vec![16, 8],
            modulation: Modulation::Hadamard,
            memory_sharing: MemorySharing::Shared,
            context_activation: Activation::Sigmoid,
            latent: 16,
        }
    }
}

/// Spatial sizes of the two input streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputGeometry {
    pub audio: (usize, usize),
    pub visual: (usize, usize),
}

impl ArchConfig {
    fn conv_out(&self, side: usize) -> Result<usize> {
        if side < self.kernel {
            return Err(Error::Config(format!(
                "input side {side} smaller than kernel {}",
                self.kernel
            )));
        }
        Ok((side - self.kernel) / self.stride + 1)
    }

    /// Spatial size after each conv layer.
    pub fn conv_sides(&self, (h, w): (usize, usize)) -> Result<Vec<(usize, usize)>> {
        let mut out = Vec::with_capacity(self.conv_layers);
        let (mut h, mut w) = (h, w);
        for _ in 0..self.conv_layers {
            h = self.conv_out(h)?;
            w = self.conv_out(w)?;
            out.push((h, w));
        }
        Ok(out)
    }

    /// Side of the decoder output before cropping.
    pub fn decoder_out_side(&self) -> usize {
        (0..=self.decoder_filters.len()).fold(self.decoder_side, |s, _| (s - 1) * self.stride + self.kernel)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("conv_layers", self.conv_layers),
            ("filters", self.filters),
            ("kernel", self.kernel),
            ("stride", self.stride),
            ("channel_embed", self.channel_embed),
            ("global_embed", self.global_embed),
            ("memory", self.memory),
            ("decoder_channels", self.decoder_channels),
            ("decoder_side", self.decoder_side),
            ("latent", self.latent),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

fn flat_dim(tape: &Tape, v: Var) -> usize {
    let d = tape.dims(v);
    d[1..].iter().product()
}

fn flatten(tape: &mut Tape, v: Var) -> Result<Var> {
    let n = tape.dims(v)[0];
    let f = flat_dim(tape, v);
    Ok(tape.reshape(v, &[n, f])?)
}

/// Random silencing of conv units: each unit is zeroed with probability
/// `prob`, without rescaling the survivors.
pub struct Damage<'a> {
    pub prob: f64,
    pub rng: &'a mut Rng,
}

fn kill(tape: &mut Tape, x: Var, damage: &mut Option<Damage<'_>>) -> Result<Var> {
    match damage {
        Some(d) if d.prob > 0.0 => {
            let dims = tape.dims(x).to_vec();
            let len: usize = dims.iter().product();
            let mask: Vec<f64> = (0..len).map(|_| if d.rng.bernoulli(d.prob) { 0.0 } else { 1.0 }).collect();
            let m = tape.constant(Tensor::new(&dims, mask)?);
            Ok(tape.mul(x, m)?)
        }
        _ => Ok(x),
    }
}

#[derive(Clone, Debug)]
enum Encoder {
    Mcc {
        audio: Vec<TwoPointConvLayer>,
        visual: Vec<TwoPointConvLayer>,
        embed_audio: TwoPointDenseLayer,
        embed_visual: TwoPointDenseLayer,
        global: PointDenseLayer,
    },
    Point {
        audio: Vec<PointConvLayer>,
        visual: Vec<PointConvLayer>,
        embed_audio: Linear,
        embed_visual: Linear,
        global: PointDenseLayer,
    },
    Single {
        convs: Vec<ConvMap>,
        embed: Linear,
        global: Linear,
    },
}

#[derive(Clone, Debug)]
struct Decoder {
    fc: Linear,
    steps: Vec<ConvTransposeMap>,
}

#[derive(Clone, Debug)]
enum Head {
    Decoder(Decoder),
    Vae { mu: Linear, logvar: Linear, decoder: Decoder },
    Score(Linear),
}

/// Hidden streams of one forward pass.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Global embedding.
    pub embedding: Var,
    /// Rectified hidden activations used for the energy term and firing
    /// statistics: conv layers, channel embeddings, global embedding.
    pub hidden: Vec<Var>,
    /// Conv-layer activations, `conv[layer]` = streams (audio first).
    pub conv: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub encoder: EncoderOutput,
    /// Reconstruction, mask logits (`[n×1×h×w]`) or scores (`[n×1]`).
    pub output: Var,
    /// KL term of the VAE, averaged over the batch.
    pub kl: Option<Var>,
}

/// A model with its parameters.
#[derive(Clone, Debug)]
pub struct Network {
    pub kind: ModelKind,
    pub task: Task,
    pub arch: ArchConfig,
    pub geometry: InputGeometry,
    pub store: ParameterStore,
    encoder: Encoder,
    head: Head,
}

impl Network {
    pub fn new(kind: ModelKind, task: Task, arch: &ArchConfig, geometry: InputGeometry, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        if !kind.is_two_stream() && task == Task::Mi {
            return Err(Error::Config(format!("model {} has no second stream to score", kind.name())));
        }
        if kind == ModelKind::Vae && task != Task::Reconstruction {
            return Err(Error::Config("vae supports the reconstruction task only".into()));
        }
        let mut store = ParameterStore::new();
        let audio_sides = arch.conv_sides(geometry.audio)?;
        let visual_sides = arch.conv_sides(geometry.visual)?;
        let f = arch.filters;
        let last = |sides: &[(usize, usize)]| {
            let (h, w) = sides[sides.len() - 1];
            f * h * w
        };
        let (flat_a, flat_v) = (last(&audio_sides), last(&visual_sides));
        let relu_concat = |store: &mut ParameterStore, rng: &mut Rng, name: &str, a: usize, b: usize| {
            PointDenseLayer::new(store, rng, name, a, b, arch.global_embed, Fusion::Concat, Activation::Relu)
        };

        let encoder = match kind {
            ModelKind::Mcc | ModelKind::MccSparse => {
                let per_stream = arch.memory_sharing == MemorySharing::PerStream;
                let opts = |owns_memory| TwoPointOptions {
                    context_activation: arch.context_activation,
                    modulation: arch.modulation,
                    owns_memory,
                    ..Default::default()
                };
                let (mut audio, mut visual) = (Vec::new(), Vec::new());
                for l in 0..arch.conv_layers {
                    let inc = if l == 0 { 1 } else { f };
                    let dims = ConvDims {
                        in_channels: inc,
                        other_channels: inc,
                        other_rf_channels: inc,
                        filters: f,
                        kernel: arch.kernel,
                        stride: arch.stride,
                        memory: arch.memory,
                    };
                    audio.push(TwoPointConvLayer::new(&mut store, rng, &format!("enc.a{l}"), dims, opts(true))?);
                    visual.push(TwoPointConvLayer::new(&mut store, rng, &format!("enc.v{l}"), dims, opts(per_stream))?);
                }
                let dense = |input, other| DenseDims {
                    input,
                    other_input: other,
                    other_rf: other,
                    units: arch.channel_embed,
                    memory: arch.memory,
                };
                let embed_audio = TwoPointDenseLayer::new(&mut store, rng, "enc.ea", dense(flat_a, flat_v), opts(true))?;
                let embed_visual =
                    TwoPointDenseLayer::new(&mut store, rng, "enc.ev", dense(flat_v, flat_a), opts(per_stream))?;
                let global = relu_concat(&mut store, rng, "enc.g", arch.channel_embed, arch.channel_embed)?;
                Encoder::Mcc {
                    audio,
                    visual,
                    embed_audio,
                    embed_visual,
                    global,
                }
            }
            ModelKind::Baseline => {
                let (mut audio, mut visual) = (Vec::new(), Vec::new());
                for l in 0..arch.conv_layers {
                    let inc = if l == 0 { 1 } else { f };
                    let mk = |store: &mut ParameterStore, rng: &mut Rng, name: String| {
                        PointConvLayer::new(store, rng, &name, inc, inc, f, arch.kernel, arch.stride, Activation::Relu)
                    };
                    audio.push(mk(&mut store, rng, format!("enc.a{l}")));
                    visual.push(mk(&mut store, rng, format!("enc.v{l}")));
                }
                let embed_audio = Linear::new(&mut store, rng, "enc.ea", flat_a, arch.channel_embed);
                let embed_visual = Linear::new(&mut store, rng, "enc.ev", flat_v, arch.channel_embed);
                let global = relu_concat(&mut store, rng, "enc.g", arch.channel_embed, arch.channel_embed)?;
                Encoder::Point {
                    audio,
                    visual,
                    embed_audio,
                    embed_visual,
                    global,
                }
            }
            ModelKind::Ae | ModelKind::Vae => {
                let convs = (0..arch.conv_layers)
                    .map(|l| {
                        let inc = if l == 0 { 1 } else { f };
                        ConvMap::new(&mut store, rng, &format!("enc.a{l}"), inc, f, arch.kernel, arch.stride)
                    })
                    .collect();
                let embed = Linear::new(&mut store, rng, "enc.ea", flat_a, arch.channel_embed);
                let global = Linear::new(&mut store, rng, "enc.g", arch.channel_embed, arch.global_embed);
                Encoder::Single { convs, embed, global }
            }
        };

        let (h, w) = geometry.audio;
        let out_side = arch.decoder_out_side();
        let decoder = |store: &mut ParameterStore, rng: &mut Rng, input: usize| -> Result<Decoder> {
            if out_side < h || out_side < w {
                return Err(Error::Config(format!(
                    "decoder produces {out_side}×{out_side}, smaller than the {h}×{w} target"
                )));
            }
            let fc = Linear::new(
                store,
                rng,
                "dec.fc",
                input,
                arch.decoder_channels * arch.decoder_side * arch.decoder_side,
            );
            let mut channels = arch.decoder_channels;
            let mut steps = Vec::new();
            for (i, &out) in arch.decoder_filters.iter().chain(&[1]).enumerate() {
                steps.push(ConvTransposeMap::new(store, rng, &format!("dec.t{i}"), channels, out, arch.kernel, arch.stride));
                channels = out;
            }
            Ok(Decoder { fc, steps })
        };
        let head = match (kind, task) {
            (_, Task::Mi) => Head::Score(Linear::new(&mut store, rng, "head.score", arch.global_embed, 1)),
            (ModelKind::Vae, _) => {
                let mu = Linear::new(&mut store, rng, "head.mu", arch.global_embed, arch.latent);
                let logvar = Linear::new(&mut store, rng, "head.logvar", arch.global_embed, arch.latent);
                let decoder = decoder(&mut store, rng, arch.latent)?;
                Head::Vae { mu, logvar, decoder }
            }
            _ => Head::Decoder(decoder(&mut store, rng, arch.global_embed)?),
        };
        Ok(Network {
            kind,
            task,
            arch: arch.clone(),
            geometry,
            store,
            encoder,
            head,
        })
    }

    /// Encodes a batch; `visual` is ignored by single-stream models.
    pub fn encode(
        &self,
        tape: &mut Tape,
        audio: Var,
        visual: Var,
        damage: &mut Option<Damage<'_>>,
    ) -> Result<EncoderOutput> {
        let store = &self.store;
        let n = tape.dims(audio)[0];
        let mut hidden = Vec::new();
        let mut conv = Vec::new();
        match &self.encoder {
            Encoder::Mcc {
                audio: al,
                visual: vl,
                embed_audio,
                embed_visual,
                global,
            } => {
                let shared = self.arch.memory_sharing == MemorySharing::Shared;
                let m0 = tape.constant(Tensor::zeros(&[n, self.arch.memory]));
                let (mut a, mut v) = (audio, visual);
                let (mut ra, mut rv) = (audio, visual);
                let (mut ma, mut mv) = (m0, m0);
                for (la, lv) in al.iter().zip(vl) {
                    let oa = la.forward(
                        tape,
                        store,
                        LayerInputs {
                            own: a,
                            other: v,
                            other_rf: rv,
                            memory: ma,
                            shared_memory: None,
                        },
                    )?;
                    let ov = lv.forward(
                        tape,
                        store,
                        LayerInputs {
                            own: v,
                            other: a,
                            other_rf: ra,
                            memory: mv,
                            shared_memory: shared.then_some(oa.memory),
                        },
                    )?;
                    a = kill(tape, oa.activation, damage)?;
                    v = kill(tape, ov.activation, damage)?;
                    ra = oa.rf;
                    rv = ov.rf;
                    ma = oa.memory;
                    mv = ov.memory;
                    hidden.extend([a, v]);
                    conv.push(vec![a, v]);
                }
                let (fa, fv) = (flatten(tape, a)?, flatten(tape, v)?);
                let (fra, frv) = (flatten(tape, ra)?, flatten(tape, rv)?);
                let ea = embed_audio.forward(
                    tape,
                    store,
                    LayerInputs {
                        own: fa,
                        other: fv,
                        other_rf: frv,
                        memory: ma,
                        shared_memory: None,
                    },
                )?;
                let ev = embed_visual.forward(
                    tape,
                    store,
                    LayerInputs {
                        own: fv,
                        other: fa,
                        other_rf: fra,
                        memory: mv,
                        shared_memory: shared.then_some(ea.memory),
                    },
                )?;
                let g = global.baseline_forward(tape, store, ea.activation, ev.activation)?;
                hidden.extend([ea.activation, ev.activation, g]);
                Ok(EncoderOutput {
                    embedding: g,
                    hidden,
                    conv,
                })
            }
            Encoder::Point {
                audio: al,
                visual: vl,
                embed_audio,
                embed_visual,
                global,
            } => {
                let (mut a, mut v) = (audio, visual);
                for (la, lv) in al.iter().zip(vl) {
                    let na = la.baseline_forward(tape, store, a, v)?;
                    let nv = lv.baseline_forward(tape, store, v, a)?;
                    a = kill(tape, na, damage)?;
                    v = kill(tape, nv, damage)?;
                    hidden.extend([a, v]);
                    conv.push(vec![a, v]);
                }
                let (fa, fv) = (flatten(tape, a)?, flatten(tape, v)?);
                let ea = embed_audio.forward(tape, store, fa)?;
                let ea = tape.relu(ea);
                let ev = embed_visual.forward(tape, store, fv)?;
                let ev = tape.relu(ev);
                let g = global.baseline_forward(tape, store, ea, ev)?;
                hidden.extend([ea, ev, g]);
                Ok(EncoderOutput {
                    embedding: g,
                    hidden,
                    conv,
                })
            }
            Encoder::Single { convs, embed, global } => {
                let mut a = audio;
                for c in convs {
                    let y = c.forward(tape, store, a)?;
                    let y = tape.relu(y);
                    a = kill(tape, y, damage)?;
                    hidden.push(a);
                    conv.push(vec![a]);
                }
                let fa = flatten(tape, a)?;
                let e = embed.forward(tape, store, fa)?;
                let e = tape.relu(e);
                let g = global.forward(tape, store, e)?;
                let g = tape.relu(g);
                hidden.extend([e, g]);
                Ok(EncoderOutput {
                    embedding: g,
                    hidden,
                    conv,
                })
            }
        }
    }

    fn decode(&self, tape: &mut Tape, decoder: &Decoder, z: Var) -> Result<Var> {
        let n = tape.dims(z)[0];
        let a = &self.arch;
        let x = decoder.fc.forward(tape, &self.store, z)?;
        let x = tape.relu(x);
        let mut x = tape.reshape(x, &[n, a.decoder_channels, a.decoder_side, a.decoder_side])?;
        let last = decoder.steps.len() - 1;
        for (i, step) in decoder.steps.iter().enumerate() {
            x = step.forward(tape, &self.store, x)?;
            if i < last {
                x = tape.relu(x);
            }
        }
        let (h, w) = self.geometry.audio;
        Ok(tape.crop(x, h, w)?)
    }

    /// Full forward pass. `latent_rng` draws the VAE's reparameterisation
    /// noise; without it the posterior mean is decoded.
    pub fn forward(
        &self,
        tape: &mut Tape,
        audio: Var,
        visual: Var,
        damage: &mut Option<Damage<'_>>,
        latent_rng: Option<&mut Rng>,
    ) -> Result<ForwardOutput> {
        let encoder = self.encode(tape, audio, visual, damage)?;
        let (output, kl) = match &self.head {
            Head::Decoder(d) => (self.decode(tape, d, encoder.embedding)?, None),
            Head::Score(s) => (s.forward(tape, &self.store, encoder.embedding)?, None),
            Head::Vae { mu, logvar, decoder } => {
                let m = mu.forward(tape, &self.store, encoder.embedding)?;
                let lv = logvar.forward(tape, &self.store, encoder.embedding)?;
                let z = match latent_rng {
                    Some(rng) => {
                        let eps = tape.constant(rng.normal_tensor(tape.dims(m)));
                        let half = tape.scale(lv, 0.5);
                        let sd = tape.exp(half);
                        let noise = tape.mul(sd, eps)?;
                        tape.add(m, noise)?
                    }
                    None => m,
                };
                // KL(q‖N(0,I)) = −½ Σ (1 + log σ² − μ² − σ²), averaged over the batch
                let n = tape.dims(m)[0] as f64;
                let var = tape.exp(lv);
                let m2 = tape.mul(m, m)?;
                let t = tape.add_scalar(lv, 1.0);
                let t = tape.sub(t, m2)?;
                let t = tape.sub(t, var)?;
                let s = tape.sum(t);
                let kl = tape.scale(s, -0.5 / n);
                (self.decode(tape, decoder, z)?, Some(kl))
            }
        };
        Ok(ForwardOutput { encoder, output, kl })
    }

    /// Names of parameters, in store order, for checkpoints.
    pub fn parameter_names(&self) -> Vec<String> {
        self.store.ids().map(|id| self.store.name(id).to_string()).collect()
    }
}

/// Concatenates rectified hidden activations into `[samples×units]`.
pub fn activity_records(tape: &Tape, hidden: &[Var]) -> Result<Tensor> {
    let n = tape.dims(hidden[0])[0];
    let widths: Vec<usize> = hidden.iter().map(|&v| flat_dim(tape, v)).collect();
    let total: usize = widths.iter().sum();
    let mut out = vec![0.0; n * total];
    let mut offset = 0;
    for (&v, &w) in hidden.iter().zip(&widths) {
        let data = tape.value(v).data();
        for i in 0..n {
            out[i * total + offset..i * total + offset + w].copy_from_slice(&data[i * w..(i + 1) * w]);
        }
        offset += w;
    }
    Ok(Tensor::new(&[n, total], out)?)
}

/// Per-filter spatial means of a conv activation, `[n×F]`.
pub fn pooled_filters(t: &Tensor) -> Result<Tensor> {
    let d = t.dims();
    if d.len() != 4 {
        return Err(Error::Contract(format!("expected [n×F×h×w], got {d:?}")));
    }
    let (n, f, plane) = (d[0], d[1], d[2] * d[3]);
    let data = t
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Ok(Tensor::new(&[n, f], data)?)
}

//! Training harness, evaluation, checkpoints and analyses.

mod analysis;
mod gaussian;

pub use analysis::{
    conv_layer_units, correlation_csv, correlation_matrix, filter_relevance_map, firing_histogram,
    isotonic_violation, mean_abs_offdiag, plateau_update, relevance_csv, relevance_frames, resilience_csv,
    resilience_sweep, ResiliencePoint, HISTOGRAM_BINS,
};
pub use gaussian::{dv_estimate, train_gaussian_mi, Critic, GaussianMiConfig, MiEstimate, MiRun, GAUSSIAN_KEYS};

use std::path::{Path, PathBuf};

use mcc_tensor::{adam_step, io, AdamConfig, ParameterStore, Rng, Tape, Tensor, Var};

use crate::config::{list, KvConfig};
use crate::datagen::{make_corpus, Batch, CorpusConfig, NoiseKind, Split, TwoStreamCorpus};
use crate::error::{Error, Result};
use crate::layers::{Activation, MemorySharing, Modulation};
use crate::network::{activity_records, ArchConfig, Damage, InputGeometry, ModelKind, Network, Task};
use crate::objectives::{
    dv_bound, energy_term, firing_probability, gamma_balance, ideal_binary_mask, mask_loss, mse, GammaBalance,
    LossConfig,
};
use crate::report::Csv;

/// Every key understood by [`ExperimentConfig::from_kv`].
pub const KEYS: &[&str] = &[
    "task",
    "model",
    "seeds",
    "updates",
    "batch",
    "lr",
    "alpha",
    "beta",
    "gamma",
    "tau_f",
    "theta_f",
    "conv_layers",
    "filters",
    "kernel",
    "stride",
    "channel_embed",
    "global_embed",
    "memory",
    "decoder_channels",
    "decoder_side",
    "decoder_filters",
    "modulation",
    "memory_sharing",
    "context_activation",
    "latent",
    "kill_prob",
    "vae_beta",
    "mask_threshold_db",
    "firing_every",
    "corpus_n",
    "height",
    "width",
    "snr_grid",
    "noise_kinds",
    "train_fraction",
    "corpus_seed",
    "out",
];

/// Silencing probability used by `mcc-sparse` unless configured.
pub const SPARSE_KILL_PROB: f64 = 0.35;

/// One experiment: task, model, optimisation and corpus settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub model: ModelKind,
    pub seeds: Vec<u64>,
    pub updates: usize,
    pub batch: usize,
    pub lr: f64,
    pub loss: LossConfig,
    pub arch: ArchConfig,
    /// Probability of silencing each conv unit during training.
    pub kill_prob: f64,
    /// Weight of the KL term of the VAE.
    pub vae_beta: f64,
    pub mask_threshold_db: f64,
    /// Updates between firing-histogram snapshots.
    pub firing_every: usize,
    pub corpus: CorpusConfig,
    pub corpus_seed: u64,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::Reconstruction,
            model: ModelKind::Mcc,
            seeds: vec![0],
            updates: 500,
            batch: 64,
            lr: 1e-3,
            loss: LossConfig::default(),
            arch: ArchConfig::default(),
            kill_prob: 0.0,
            vae_beta: 4.0,
            mask_threshold_db: 0.0,
            firing_every: 50,
            corpus: CorpusConfig::default(),
            corpus_seed: 0,
            out: PathBuf::from("runs"),
        }
    }
}

/// Named bundles of config overrides.
pub fn preset(name: &str) -> Result<KvConfig> {
    let mut kv = KvConfig::new();
    match name {
        "desk" => {}
        "full" => {
            kv.set("filters", 32);
            kv.set("kernel", 5);
            kv.set("channel_embed", 128);
            kv.set("global_embed", 256);
            kv.set("batch", 256);
            kv.set("decoder_filters", "32,16");
            kv.set("lr", 1e-4);
            kv.set("height", 32);
            kv.set("width", 32);
        }
        "fast" => {
            kv.set("model", "mcc");
            kv.set("lr", 1e-2);
        }
        "mcc-sparse" => {
            kv.set("model", "mcc-sparse");
            kv.set("kill_prob", SPARSE_KILL_PROB);
        }
        other => match ModelKind::parse(other) {
            Ok(kind) => kv.set("model", kind.name()),
            Err(_) => return Err(Error::Config(format!("unknown preset {other:?}"))),
        },
    }
    Ok(kv)
}

impl ExperimentConfig {
    /// Builds a config from resolved pairs. `task` and `model` are
    /// required; every other key falls back to its default.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.check_keys(KEYS)?;
        let d = ExperimentConfig::default();
        let task = Task::parse(kv.require("task")?)?;
        let model = ModelKind::parse(kv.require("model")?)?;
        let a = &d.arch;
        let arch = ArchConfig {
            conv_layers: kv.parse_or("conv_layers", a.conv_layers)?,
            filters: kv.parse_or("filters", a.filters)?,
            kernel: kv.parse_or("kernel", a.kernel)?,
            stride: kv.parse_or("stride", a.stride)?,
            channel_embed: kv.parse_or("channel_embed", a.channel_embed)?,
            global_embed: kv.parse_or("global_embed", a.global_embed)?,
            memory: kv.parse_or("memory", a.memory)?,
            decoder_channels: kv.parse_or("decoder_channels", a.decoder_channels)?,
            decoder_side: kv.parse_or("decoder_side", a.decoder_side)?,
            decoder_filters: kv.parse_list("decoder_filters")?.unwrap_or_else(|| a.decoder_filters.clone()),
            modulation: kv.get("modulation").map(Modulation::parse).transpose()?.unwrap_or(a.modulation),
            memory_sharing: kv
                .get("memory_sharing")
                .map(MemorySharing::parse)
                .transpose()?
                .unwrap_or(a.memory_sharing),
            context_activation: kv
                .get("context_activation")
                .map(Activation::parse)
                .transpose()?
                .unwrap_or(a.context_activation),
            latent: kv.parse_or("latent", a.latent)?,
        };
        let l = d.loss;
        let loss = LossConfig {
            alpha: kv.parse_or("alpha", l.alpha)?,
            beta: kv.parse_or("beta", l.beta)?,
            gamma: kv.parse_or("gamma", l.gamma)?,
            tau_f: kv.parse_or("tau_f", l.tau_f)?,
            theta_f: kv.parse_or("theta_f", l.theta_f)?,
        };
        let corpus = corpus_from_kv(kv)?;
        let default_kill = if model == ModelKind::MccSparse { SPARSE_KILL_PROB } else { 0.0 };
        let cfg = ExperimentConfig {
            task,
            model,
            seeds: kv.parse_list("seeds")?.unwrap_or(d.seeds),
            updates: kv.parse_or("updates", d.updates)?,
            batch: kv.parse_or("batch", d.batch)?,
            lr: kv.parse_or("lr", d.lr)?,
            loss,
            arch,
            kill_prob: kv.parse_or("kill_prob", default_kill)?,
            vae_beta: kv.parse_or("vae_beta", d.vae_beta)?,
            mask_threshold_db: kv.parse_or("mask_threshold_db", d.mask_threshold_db)?,
            firing_every: kv.parse_or("firing_every", d.firing_every)?,
            corpus,
            corpus_seed: kv.parse_or("corpus_seed", d.corpus_seed)?,
            out: kv.get("out").map(PathBuf::from).unwrap_or(d.out),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its resolved value.
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        let a = &self.arch;
        kv.set("task", self.task.name());
        kv.set("model", self.model.name());
        kv.set("seeds", list(&self.seeds));
        kv.set("updates", self.updates);
        kv.set("batch", self.batch);
        kv.set("lr", self.lr);
        kv.set("alpha", self.loss.alpha);
        kv.set("beta", self.loss.beta);
        kv.set("gamma", self.loss.gamma);
        kv.set("tau_f", self.loss.tau_f);
        kv.set("theta_f", self.loss.theta_f);
        kv.set("conv_layers", a.conv_layers);
        kv.set("filters", a.filters);
        kv.set("kernel", a.kernel);
        kv.set("stride", a.stride);
        kv.set("channel_embed", a.channel_embed);
        kv.set("global_embed", a.global_embed);
        kv.set("memory", a.memory);
        kv.set("decoder_channels", a.decoder_channels);
        kv.set("decoder_side", a.decoder_side);
        kv.set("decoder_filters", list(&a.decoder_filters));
        kv.set("modulation", a.modulation.name());
        kv.set("memory_sharing", a.memory_sharing.name());
        kv.set("context_activation", a.context_activation.name());
        kv.set("latent", a.latent);
        kv.set("kill_prob", self.kill_prob);
        kv.set("vae_beta", self.vae_beta);
        kv.set("mask_threshold_db", self.mask_threshold_db);
        kv.set("firing_every", self.firing_every);
        kv.set("corpus_n", self.corpus.n);
        kv.set("height", self.corpus.height);
        kv.set("width", self.corpus.width);
        kv.set("snr_grid", list(&self.corpus.snr_grid));
        let kinds: Vec<&str> = self.corpus.noise_kinds.iter().map(|k| k.name()).collect();
        kv.set("noise_kinds", kinds.join(","));
        kv.set("train_fraction", self.corpus.train_fraction);
        kv.set("corpus_seed", self.corpus_seed);
        kv.set("out", self.out.display());
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.batch < 2 && self.task == Task::Mi {
            return Err(Error::Config("the mi task needs batch >= 2 to shuffle marginals".into()));
        }
        if self.batch == 0 || self.updates == 0 || self.firing_every == 0 {
            return Err(Error::Config("batch, updates and firing_every must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.kill_prob) {
            return Err(Error::Config(format!("kill_prob must lie in [0, 1), got {}", self.kill_prob)));
        }
        if !(self.vae_beta >= 0.0 && self.vae_beta.is_finite()) {
            return Err(Error::Config(format!("vae_beta must be non-negative, got {}", self.vae_beta)));
        }
        self.loss.validate()?;
        self.arch.validate()
    }

    /// Generates the configured synthetic corpus.
    pub fn make_corpus(&self) -> Result<TwoStreamCorpus> {
        make_corpus(&self.corpus, &mut Rng::new(self.corpus_seed))
    }
}

/// Corpus keys understood by [`corpus_from_kv`].
pub const CORPUS_KEYS: &[&str] = &[
    "corpus_n",
    "height",
    "width",
    "snr_grid",
    "noise_kinds",
    "train_fraction",
    "corpus_seed",
];

/// Corpus generation parameters; missing keys keep their defaults.
pub fn corpus_from_kv(kv: &KvConfig) -> Result<CorpusConfig> {
    let c = CorpusConfig::default();
    let noise_kinds = match kv.get("noise_kinds") {
        Some(v) => v
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(NoiseKind::parse)
            .collect::<Result<Vec<_>>>()?,
        None => c.noise_kinds.clone(),
    };
    Ok(CorpusConfig {
        n: kv.parse_or("corpus_n", c.n)?,
        height: kv.parse_or("height", c.height)?,
        width: kv.parse_or("width", c.width)?,
        snr_grid: kv.parse_list("snr_grid")?.unwrap_or(c.snr_grid),
        noise_kinds,
        train_fraction: kv.parse_or("train_fraction", c.train_fraction)?,
    })
}

/// Stream geometry of a corpus.
pub fn corpus_geometry(corpus: &TwoStreamCorpus) -> InputGeometry {
    let v = corpus.visual.dims();
    InputGeometry {
        audio: corpus.patch_dims(),
        visual: (v[2], v[3]),
    }
}

/// Worker cap from `MCC_THREADS`; unset or 0 means sequential.
pub fn worker_count() -> usize {
    std::env::var("MCC_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0)
        .max(1)
}

/// Runs `f` over `items` on at most [`worker_count`] threads, keeping order.
pub(crate) fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let workers = worker_count().min(items.len().max(1));
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, t)| f(c * chunk + i, t))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Metrics of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub mi_estimate: Option<f64>,
    pub mse: Option<f64>,
    pub energy: f64,
    pub mean_firing_prob: f64,
}

pub const METRICS_HEADER: [&str; 6] = ["step", "loss", "mi_estimate", "mse", "energy", "mean_firing_prob"];

fn cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl MetricsRow {
    fn cells(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            self.loss.to_string(),
            cell(self.mi_estimate),
            cell(self.mse),
            self.energy.to_string(),
            self.mean_firing_prob.to_string(),
        ]
    }
}

/// Per-unit firing probabilities on a fixed training probe after `step`
/// updates.
#[derive(Clone, Debug, PartialEq)]
pub struct FiringSnapshot {
    pub step: usize,
    pub probabilities: Tensor,
    pub histogram: [usize; HISTOGRAM_BINS],
}

/// Outcome of one seed.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub seed: u64,
    pub metrics: Vec<MetricsRow>,
    pub firing: Vec<FiringSnapshot>,
    pub gamma_balance: GammaBalance,
    pub network: Network,
    pub checkpoint: Option<PathBuf>,
}

impl RunRecord {
    pub fn metrics_csv(&self) -> Csv {
        let mut csv = Csv::new(&METRICS_HEADER);
        for row in &self.metrics {
            csv.row(&row.cells());
        }
        csv
    }
}

fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut csv = Csv::new(&METRICS_HEADER);
    for row in rows {
        csv.row(&row.cells());
    }
    csv.write(path)
}

fn firing_csv(snap: &FiringSnapshot) -> Csv {
    let mut csv = Csv::new(&["step", "bin_lo", "bin_hi", "count"]);
    let w = 1.0 / HISTOGRAM_BINS as f64;
    for (b, &count) in snap.histogram.iter().enumerate() {
        csv.row(&[
            snap.step.to_string(),
            (b as f64 * w).to_string(),
            ((b + 1) as f64 * w).to_string(),
            count.to_string(),
        ]);
    }
    csv
}

/// Supervision of one batch.
enum Target {
    Clean(Tensor),
    Mask(Tensor),
    Pairs(Tensor),
}

fn target_for(cfg: &ExperimentConfig, corpus: &TwoStreamCorpus, batch: &Batch, rng: &mut Rng) -> Result<Target> {
    Ok(match cfg.task {
        Task::Reconstruction => Target::Clean(batch.clean.clone()),
        Task::Mask => {
            let noise = corpus.interference(batch)?;
            Target::Mask(ideal_binary_mask(&batch.clean, &noise, cfg.mask_threshold_db)?)
        }
        Task::Mi => {
            let n = batch.visual.dims()[0];
            Target::Pairs(batch.visual.select_rows(&rng.permutation(n))?)
        }
    })
}

struct Graph {
    loss: Var,
    task: Var,
    energy: Var,
    output: Var,
    hidden: Vec<Var>,
    marginal: Option<Var>,
}

fn build_graph(
    tape: &mut Tape,
    net: &Network,
    cfg: &ExperimentConfig,
    batch: &Batch,
    target: &Target,
    damage: &mut Option<Damage<'_>>,
    latent: Option<&mut Rng>,
) -> Result<Graph> {
    let audio = tape.constant(batch.noisy.clone());
    let visual = tape.constant(batch.visual.clone());
    let fwd = net.forward(tape, audio, visual, damage, latent)?;
    let energy = energy_term(tape, &fwd.encoder.hidden, cfg.loss.tau_f)?;
    let mut marginal = None;
    let task = match target {
        Target::Clean(clean) => {
            let z = tape.constant(clean.clone());
            let err = mse(tape, z, fwd.output)?;
            let mut t = tape.scale(err, cfg.loss.beta);
            if let Some(kl) = fwd.kl {
                let (h, w) = net.geometry.audio;
                let kl = tape.scale(kl, cfg.vae_beta / (h * w) as f64);
                t = tape.add(t, kl)?;
            }
            t
        }
        Target::Mask(ibm) => {
            let bce = mask_loss(tape, fwd.output, ibm)?;
            tape.scale(bce, cfg.loss.beta)
        }
        Target::Pairs(shuffled) => {
            let v = tape.constant(shuffled.clone());
            let m = net.forward(tape, audio, v, damage, None)?;
            let dv = dv_bound(tape, fwd.output, m.output)?;
            marginal = Some(m.output);
            tape.scale(dv, -cfg.loss.alpha)
        }
    };
    let weighted = tape.scale(energy, cfg.loss.gamma);
    let loss = tape.add(task, weighted)?;
    Ok(Graph {
        loss,
        task,
        energy,
        output: fwd.output,
        hidden: fwd.encoder.hidden,
        marginal,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn param_grad_norm(tape: &Tape, root: Var, vars: &[Var]) -> Result<f64> {
    let grads = tape.gradients(root)?;
    let sq: f64 = vars
        .iter()
        .filter_map(|&v| grads.get(v))
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum();
    Ok(sq.sqrt())
}

/// Cycles through shuffled training positions.
struct Sampler {
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl Sampler {
    fn new(n: usize, rng: Rng) -> Self {
        Sampler {
            order: (0..n).collect(),
            cursor: n,
            rng,
        }
    }

    fn next(&mut self, batch: usize) -> Vec<usize> {
        let n = self.order.len();
        (0..batch)
            .map(|_| {
                if self.cursor == n {
                    self.order = self.rng.permutation(n);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

fn probe_positions(corpus: &TwoStreamCorpus) -> Vec<usize> {
    (0..corpus.train.len().min(256)).collect()
}

fn firing_snapshot(
    net: &Network,
    cfg: &ExperimentConfig,
    corpus: &TwoStreamCorpus,
    step: usize,
) -> Result<FiringSnapshot> {
    let batch = corpus.batch(Split::Train, &probe_positions(corpus))?;
    let mut tape = Tape::new();
    let audio = tape.constant(batch.noisy);
    let visual = tape.constant(batch.visual);
    let enc = net.encode(&mut tape, audio, visual, &mut None)?;
    let probs = firing_probability(&activity_records(&tape, &enc.hidden)?, cfg.loss.theta_f)?;
    Ok(FiringSnapshot {
        step,
        histogram: firing_histogram(&probs),
        probabilities: probs,
    })
}

/// Trains one seed on the training split of `corpus`. With `out`, writes
/// `metrics.csv`, `firing_epoch_*.csv` and a checkpoint there; a diverged
/// run leaves its metrics so far and `divergence.txt` behind.
pub fn train(cfg: &ExperimentConfig, seed: u64, corpus: &TwoStreamCorpus, out: Option<&Path>) -> Result<RunRecord> {
    cfg.validate()?;
    let base = Rng::new(seed);
    let mut net = Network::new(cfg.model, cfg.task, &cfg.arch, corpus_geometry(corpus), &mut base.fork(0))?;
    let mut sampler = Sampler::new(corpus.train.len(), base.fork(1));
    let mut kill_rng = base.fork(2);
    let mut latent_rng = base.fork(3);
    let mut pair_rng = base.fork(4);
    let adam = AdamConfig::new(cfg.lr);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut metrics = Vec::with_capacity(cfg.updates);
    let mut firing = vec![firing_snapshot(&net, cfg, corpus, 0)?];
    let mut balance = None;
    for step in 1..=cfg.updates {
        let batch = corpus.batch(Split::Train, &sampler.next(cfg.batch))?;
        let target = target_for(cfg, corpus, &batch, &mut pair_rng)?;
        let mut tape = Tape::new();
        let mut damage = (cfg.kill_prob > 0.0).then(|| Damage {
            prob: cfg.kill_prob,
            rng: &mut kill_rng,
        });
        let latent = (cfg.model == ModelKind::Vae).then_some(&mut latent_rng);
        let g = build_graph(&mut tape, &net, cfg, &batch, &target, &mut damage, latent)?;
        let loss = tape.value(g.loss).item();
        if !loss.is_finite() {
            let reason = format!("non-finite loss {loss}");
            if let Some(dir) = out {
                write_metrics(&metrics, &dir.join("metrics.csv"))?;
                let path = dir.join("divergence.txt");
                std::fs::write(&path, format!("update = {step}\nreason = {reason}\n")).map_err(|e| Error::io(&path, e))?;
            }
            return Err(Error::Divergence { update: step, reason });
        }
        if balance.is_none() {
            let vars: Vec<Var> = net.store.ids().map(|id| tape.param(&net.store, id)).collect();
            let task_norm = param_grad_norm(&tape, g.task, &vars)?;
            let energy_norm = param_grad_norm(&tape, g.energy, &vars)?;
            balance = Some(gamma_balance(cfg.loss.gamma, energy_norm, task_norm));
        }
        let records = activity_records(&tape, &g.hidden)?;
        let firing_mean = firing_probability(&records, cfg.loss.theta_f)?.mean();
        let (mi_estimate, mse_value) = match &target {
            Target::Clean(clean) => {
                let pred = tape.value(g.output);
                (None, Some(squared_error(pred, clean)? / clean.len() as f64))
            }
            Target::Mask(_) => {
                let mask = tape.value(g.output).map(sigmoid);
                let raw = corpus.raw_noisy(&batch);
                let est = mask.zip_map(&raw, |m, x| m * x)?;
                (None, Some(squared_error(&est, &batch.clean)? / batch.clean.len() as f64))
            }
            Target::Pairs(_) => {
                let m = g.marginal.expect("marginal scores");
                (Some(dv_value(&tape, g.output, m)?), None)
            }
        };
        metrics.push(MetricsRow {
            step,
            loss,
            mi_estimate,
            mse: mse_value,
            energy: tape.value(g.energy).item(),
            mean_firing_prob: firing_mean,
        });
        tape.backward(g.loss, &mut net.store)?;
        adam_step(&mut net.store, &adam);
        if step % cfg.firing_every == 0 || step == cfg.updates {
            firing.push(firing_snapshot(&net, cfg, corpus, step)?);
        }
    }

    let mut checkpoint = None;
    if let Some(dir) = out {
        write_metrics(&metrics, &dir.join("metrics.csv"))?;
        for (k, snap) in firing.iter().enumerate() {
            firing_csv(snap).write(&dir.join(format!("firing_epoch_{k:03}.csv")))?;
        }
        let ck = dir.join("checkpoint");
        let mut resolved = cfg.clone();
        resolved.seeds = vec![seed];
        save_checkpoint(&net, &resolved, &ck)?;
        checkpoint = Some(ck);
    }
    Ok(RunRecord {
        seed,
        metrics,
        firing,
        gamma_balance: balance.expect("at least one update"),
        network: net,
        checkpoint,
    })
}

fn dv_value(tape: &Tape, joint: Var, marginal: Var) -> Result<f64> {
    crate::objectives::dv_bound_values(tape.value(joint).data(), tape.value(marginal).data())
}

fn squared_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.zip_map(b, |x, y| (x - y) * (x - y))?.sum())
}

/// Mean squared error between a reconstruction and its target.
pub fn reconstruction_mse(prediction: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(squared_error(prediction, target)? / target.len() as f64)
}

/// Trains every seed of `cfg`, each into `out/seed_<s>/`, and writes
/// `summary.csv` with the per-step mean over seeds.
pub fn train_seeds(cfg: &ExperimentConfig, corpus: &TwoStreamCorpus, out: Option<&Path>) -> Result<Vec<RunRecord>> {
    let runs = parallel_map(&cfg.seeds, |_, &seed| {
        let dir = out.map(|o| o.join(format!("seed_{seed}")));
        train(cfg, seed, corpus, dir.as_deref())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out {
        let tables: Vec<Vec<Vec<String>>> = cfg
            .seeds
            .iter()
            .map(|s| crate::report::read_csv(&dir.join(format!("seed_{s}")).join("metrics.csv")).map(|(_, rows)| rows))
            .collect::<Result<_>>()?;
        seed_mean(&tables)?.write(&dir.join("summary.csv"))?;
    }
    Ok(runs)
}

/// Per-step mean over seeds of metrics tables read back from disk; an empty
/// cell stays empty.
pub fn seed_mean(tables: &[Vec<Vec<String>>]) -> Result<Csv> {
    let mut csv = Csv::new(&METRICS_HEADER);
    let Some(first) = tables.first() else {
        return Ok(csv);
    };
    for (r, row) in first.iter().enumerate() {
        let mut cells = vec![row[0].clone()];
        for c in 1..METRICS_HEADER.len() {
            if row[c].is_empty() {
                cells.push(String::new());
                continue;
            }
            let mut sum = 0.0;
            for t in tables {
                let v = t.get(r).and_then(|row| row.get(c)).ok_or_else(|| {
                    Error::Contract(format!("seed tables differ in length at row {r}"))
                })?;
                sum += v
                    .parse::<f64>()
                    .map_err(|e| Error::Contract(format!("bad metric {v:?}: {e}")))?;
            }
            cells.push((sum / tables.len() as f64).to_string());
        }
        csv.row(&cells);
    }
    Ok(csv)
}

/// Mask quality against the ideal binary mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskMetrics {
    /// Per-cell agreement of the thresholded mask with the IBM.
    pub accuracy: f64,
    /// Frequency of the majority IBM class.
    pub prior: f64,
    /// MSE of the soft mask applied to the noisy magnitudes.
    pub mse: f64,
    /// MSE of the all-zero mask.
    pub mse_all_zero: f64,
    /// MSE of the all-one mask, i.e. of the unprocessed noisy magnitudes.
    pub mse_all_one: f64,
}

/// Fraction of cells where a binary mask agrees with `ibm`.
pub fn mask_accuracy(mask: &Tensor, ibm: &Tensor) -> Result<f64> {
    let hits = mask.zip_map(ibm, |m, t| if (m >= 0.5) == (t >= 0.5) { 1.0 } else { 0.0 })?;
    Ok(hits.mean())
}

/// Frequency of the majority class of a binary mask.
pub fn class_prior(ibm: &Tensor) -> f64 {
    let ones = ibm.mean();
    ones.max(1.0 - ones)
}

/// Test-time numbers of one model on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub split: Split,
    pub samples: usize,
    pub mse: Option<f64>,
    pub mi_estimate: Option<f64>,
    pub mask: Option<MaskMetrics>,
    pub energy: f64,
    pub mean_firing_prob: f64,
    /// Per-unit firing probabilities.
    pub firing: Tensor,
}

impl EvalMetrics {
    /// The error tracked by the resilience sweep: MSE, or the mask error
    /// rate for the mask task.
    pub fn error(&self) -> Result<f64> {
        match (self.mse, self.mask) {
            (_, Some(m)) => Ok(1.0 - m.accuracy),
            (Some(e), None) => Ok(e),
            _ => Err(Error::Config("no error metric for the mi task".into())),
        }
    }

    pub fn to_csv(&self) -> Csv {
        let mut csv = Csv::new(&["metric", "value"]);
        let mut put = |k: &str, v: f64| csv.row(&[k.to_string(), v.to_string()]);
        put("samples", self.samples as f64);
        if let Some(v) = self.mse {
            put("mse", v);
        }
        if let Some(v) = self.mi_estimate {
            put("mi_estimate", v);
        }
        if let Some(m) = self.mask {
            put("mask_accuracy", m.accuracy);
            put("mask_prior", m.prior);
            put("mask_mse", m.mse);
            put("mask_mse_all_zero", m.mse_all_zero);
            put("mask_mse_all_one", m.mse_all_one);
        }
        put("energy", self.energy);
        put("mean_firing_prob", self.mean_firing_prob);
        csv
    }
}

const EVAL_CHUNK: usize = 200;

/// Evaluates on a whole split without touching the parameters.
pub fn evaluate(net: &Network, cfg: &ExperimentConfig, corpus: &TwoStreamCorpus, split: Split) -> Result<EvalMetrics> {
    evaluate_damaged(net, cfg, corpus, split, None)
}

/// [`evaluate`] with conv units silenced with probability `damage.0`.
pub fn evaluate_damaged(
    net: &Network,
    cfg: &ExperimentConfig,
    corpus: &TwoStreamCorpus,
    split: Split,
    damage: Option<(f64, &mut Rng)>,
) -> Result<EvalMetrics> {
    if corpus_geometry(corpus) != net.geometry {
        return Err(Error::Config(format!(
            "model expects {:?}, corpus provides {:?}",
            net.geometry,
            corpus_geometry(corpus)
        )));
    }
    let full = corpus.full(split)?;
    let n = full.clean.dims()[0];
    let mut damage = damage.map(|(prob, rng)| Damage { prob, rng });
    let shuffled = match net.task {
        Task::Mi => Some(full.visual.select_rows(&Rng::new(cfg.corpus_seed).fork(7).permutation(n))?),
        _ => None,
    };
    let ibm = match net.task {
        Task::Mask => Some(ideal_binary_mask(&full.clean, &corpus.interference(&full)?, cfg.mask_threshold_db)?),
        _ => None,
    };
    let raw = corpus.raw_noisy(&full);

    let (mut sq, mut mask_sq, mut hits) = (0.0, 0.0, 0.0);
    let (mut joint, mut marginal) = (Vec::new(), Vec::new());
    let mut records = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let rows: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let pick = |t: &Tensor| t.select_rows(&rows);
        let batch = Batch {
            clean: pick(&full.clean)?,
            noisy: pick(&full.noisy)?,
            visual: pick(&full.visual)?,
            snr: rows.iter().map(|&r| full.snr[r]).collect(),
        };
        let mut tape = Tape::new();
        let audio = tape.constant(batch.noisy.clone());
        let visual = tape.constant(batch.visual.clone());
        let fwd = net.forward(&mut tape, audio, visual, &mut damage, None)?;
        records.push(activity_records(&tape, &fwd.encoder.hidden)?);
        let out = tape.value(fwd.output);
        match net.task {
            Task::Reconstruction => sq += squared_error(out, &batch.clean)?,
            Task::Mask => {
                let target = pick(ibm.as_ref().expect("mask target"))?;
                let soft = out.map(sigmoid);
                hits += mask_accuracy(&soft, &target)? * target.len() as f64;
                let est = soft.zip_map(&pick(&raw)?, |m, x| m * x)?;
                mask_sq += squared_error(&est, &batch.clean)?;
            }
            Task::Mi => {
                joint.extend_from_slice(out.data());
                let v = tape.constant(pick(shuffled.as_ref().expect("shuffled pairs"))?);
                let m = net.forward(&mut tape, audio, v, &mut damage, None)?;
                marginal.extend_from_slice(tape.value(m.output).data());
            }
        }
    }
    let records = Tensor::stack_rows(&records)?;
    let firing = firing_probability(&records, cfg.loss.theta_f)?;
    let tau = cfg.loss.tau_f;
    let energy = records.data().iter().map(|a| (a / tau).tanh()).sum::<f64>() / records.len() as f64;
    let cells = full.clean.len() as f64;
    let mask = match &ibm {
        Some(ibm) => Some(MaskMetrics {
            accuracy: hits / cells,
            prior: class_prior(ibm),
            mse: mask_sq / cells,
            mse_all_zero: full.clean.data().iter().map(|c| c * c).sum::<f64>() / cells,
            mse_all_one: squared_error(&raw, &full.clean)? / cells,
        }),
        None => None,
    };
    Ok(EvalMetrics {
        split,
        samples: n,
        mse: (net.task == Task::Reconstruction).then_some(sq / cells),
        mi_estimate: match net.task {
            Task::Mi => Some(crate::objectives::dv_bound_values(&joint, &marginal)?),
            _ => None,
        },
        mask,
        energy,
        mean_firing_prob: firing.mean(),
        firing,
    })
}

/// Writes parameters as `MCCT` files plus `params.txt` (name = file) and
/// the resolved `config.txt`.
pub fn save_checkpoint(net: &Network, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = KvConfig::new();
    for (i, id) in net.store.ids().enumerate() {
        let file = format!("p{i:03}.mcct");
        io::save(&dir.join(&file), net.store.value(id), io::DType::F64)?;
        index.set(net.store.name(id), file);
    }
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write("params.txt", index.render())?;
    write("config.txt", cfg.to_kv().render())
}

/// Rebuilds a network from [`save_checkpoint`] output.
pub fn load_checkpoint(dir: &Path) -> Result<(ExperimentConfig, Network)> {
    let cfg = ExperimentConfig::from_kv(&KvConfig::read(&dir.join("config.txt"))?)?;
    let index = KvConfig::read(&dir.join("params.txt"))?;
    let c = &cfg.corpus;
    let geometry = InputGeometry {
        audio: (c.height, c.width),
        visual: (c.height / 2, c.width / 2),
    };
    let mut net = Network::new(cfg.model, cfg.task, &cfg.arch, geometry, &mut Rng::new(0))?;
    let ids: Vec<_> = net.store.ids().collect();
    if index.iter().count() != ids.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} tensors, model has {}",
            index.iter().count(),
            ids.len()
        )));
    }
    for id in ids {
        let name = net.store.name(id).to_string();
        let file = index
            .get(&name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{name}`")))?;
        let value = io::load(&dir.join(file))?;
        net.store
            .set_value(id, value)
            .map_err(|e| Error::Config(format!("parameter `{name}`: {e}")))?;
    }
    Ok((cfg, net))
}

/// Evaluates a saved checkpoint on a corpus split.
pub fn evaluate_checkpoint(dir: &Path, corpus: &TwoStreamCorpus, split: Split) -> Result<EvalMetrics> {
    let (cfg, net) = load_checkpoint(dir)?;
    evaluate(&net, &cfg, corpus, split)
}

/// Parameters of `store` as plain tensors, for before/after comparisons.
pub fn parameter_snapshot(store: &ParameterStore) -> Vec<Tensor> {
    store.ids().map(|id| store.value(id).clone()).collect()
}

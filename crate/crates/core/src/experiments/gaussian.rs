//! Statistics networks trained on correlated Gaussian pairs.

use mcc_tensor::{adam_step, AdamConfig, ParameterStore, Rng, Tape, Tensor, Var};

use crate::config::KvConfig;
use crate::datagen::{sample_correlated_gaussians, GaussianPairSpec};
use crate::error::{Error, Result};
use crate::layers::{Activation, DenseDims, LayerInputs, Linear, TwoPointDenseLayer, TwoPointOptions};
use crate::objectives::{analytic_gaussian_mi, dv_bound, energy_term, loss_mi, shuffle_marginals, LossConfig};
use crate::report::Csv;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Critic {
    /// One two-point layer per variable, sharing a universal context.
    Mcc,
    /// Point neurons on the concatenated pair.
    Baseline,
}

impl Critic {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mcc" => Ok(Critic::Mcc),
            "baseline" => Ok(Critic::Baseline),
            other => Err(Error::Config(format!("unknown critic {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Critic::Mcc => "mcc",
            Critic::Baseline => "baseline",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMiConfig {
    pub critic: Critic,
    pub dim: usize,
    pub rho: f64,
    pub batch: usize,
    pub updates: usize,
    pub lr: f64,
    /// Learning rate reached at the last update, decaying geometrically.
    pub lr_final: f64,
    pub loss: LossConfig,
    /// Width of each stream's layer.
    pub units: usize,
    pub memory: usize,
    /// Width of the joint hidden layer.
    pub hidden: usize,
    pub eval_every: usize,
    /// Fresh pairs per held-out estimate.
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for GaussianMiConfig {
    fn default() -> Self {
        GaussianMiConfig {
            critic: Critic::Mcc,
            dim: 20,
            rho: 0.5,
            batch: 256,
            updates: 20_000,
            lr: 3e-3,
            lr_final: 1e-4,
            loss: LossConfig::default(),
            units: 32,
            memory: 16,
            hidden: 64,
            eval_every: 1000,
            eval_samples: 100_000,
            seed: 0,
        }
    }
}

pub const GAUSSIAN_KEYS: &[&str] = &[
    "critic",
    "dim",
    "rho",
    "batch",
    "updates",
    "lr",
    "lr_final",
    "alpha",
    "gamma",
    "tau_f",
    "units",
    "memory",
    "hidden",
    "eval_every",
    "eval_samples",
    "seed",
];

impl GaussianMiConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.check_keys(GAUSSIAN_KEYS)?;
        let d = GaussianMiConfig::default();
        let cfg = GaussianMiConfig {
            critic: kv.get("critic").map(Critic::parse).transpose()?.unwrap_or(d.critic),
            dim: kv.parse_or("dim", d.dim)?,
            rho: kv.parse_or("rho", d.rho)?,
            batch: kv.parse_or("batch", d.batch)?,
            updates: kv.parse_or("updates", d.updates)?,
            lr: kv.parse_or("lr", d.lr)?,
            lr_final: kv.parse_or("lr_final", d.lr_final)?,
            loss: LossConfig {
                alpha: kv.parse_or("alpha", d.loss.alpha)?,
                gamma: kv.parse_or("gamma", d.loss.gamma)?,
                tau_f: kv.parse_or("tau_f", d.loss.tau_f)?,
                ..d.loss
            },
            units: kv.parse_or("units", d.units)?,
            memory: kv.parse_or("memory", d.memory)?,
            hidden: kv.parse_or("hidden", d.hidden)?,
            eval_every: kv.parse_or("eval_every", d.eval_every)?,
            eval_samples: kv.parse_or("eval_samples", d.eval_samples)?,
            seed: kv.parse_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("critic", self.critic.name());
        kv.set("dim", self.dim);
        kv.set("rho", self.rho);
        kv.set("batch", self.batch);
        kv.set("updates", self.updates);
        kv.set("lr", self.lr);
        kv.set("lr_final", self.lr_final);
        kv.set("alpha", self.loss.alpha);
        kv.set("gamma", self.loss.gamma);
        kv.set("tau_f", self.loss.tau_f);
        kv.set("units", self.units);
        kv.set("memory", self.memory);
        kv.set("hidden", self.hidden);
        kv.set("eval_every", self.eval_every);
        kv.set("eval_samples", self.eval_samples);
        kv.set("seed", self.seed);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 || self.eval_samples < 2 {
            return Err(Error::Config("batch and eval_samples must be at least 2".into()));
        }
        if [self.dim, self.updates, self.units, self.memory, self.hidden, self.eval_every].contains(&0) {
            return Err(Error::Config("sizes and update counts must be positive".into()));
        }
        for (name, lr) in [("lr", self.lr), ("lr_final", self.lr_final)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {lr}")));
            }
        }
        if (self.lr == 0.0) != (self.lr_final == 0.0) {
            return Err(Error::Config("lr and lr_final must both be zero or both positive".into()));
        }
        self.loss.validate()?;
        analytic_gaussian_mi(&[self.rho]).map(|_| ())
    }

    /// `lr·(lr_final/lr)^((t−1)/(T−1))`
    pub fn learning_rate(&self, step: usize) -> f64 {
        if self.lr == 0.0 || self.updates < 2 {
            return self.lr;
        }
        let frac = (step - 1) as f64 / (self.updates - 1) as f64;
        self.lr * (self.lr_final / self.lr).powf(frac)
    }

    fn pairs(&self, n: usize) -> GaussianPairSpec {
        GaussianPairSpec::uniform(self.dim, self.rho, n, self.seed)
    }
}

enum Body {
    Mcc { x: TwoPointDenseLayer, y: TwoPointDenseLayer },
    Baseline { x: Linear },
}

struct CriticNet {
    store: ParameterStore,
    body: Body,
    hidden: Linear,
    out: Linear,
    memory: usize,
}

impl CriticNet {
    fn new(cfg: &GaussianMiConfig, rng: &mut Rng) -> Result<Self> {
        let mut store = ParameterStore::new();
        let (body, width) = match cfg.critic {
            Critic::Mcc => {
                let dims = DenseDims {
                    input: cfg.dim,
                    other_input: cfg.dim,
                    other_rf: cfg.dim,
                    units: cfg.units,
                    memory: cfg.memory,
                };
                let x = TwoPointDenseLayer::new(&mut store, rng, "x", dims, TwoPointOptions::default())?;
                let y = TwoPointDenseLayer::new(
                    &mut store,
                    rng,
                    "y",
                    dims,
                    TwoPointOptions {
                        owns_memory: false,
                        ..Default::default()
                    },
                )?;
                (Body::Mcc { x, y }, 2 * cfg.units)
            }
            Critic::Baseline => {
                let x = Linear::new(&mut store, rng, "xy", 2 * cfg.dim, 2 * cfg.units);
                (Body::Baseline { x }, 2 * cfg.units)
            }
        };
        let hidden = Linear::new(&mut store, rng, "h", width, cfg.hidden);
        let out = Linear::new(&mut store, rng, "out", cfg.hidden, 1);
        Ok(CriticNet {
            store,
            body,
            hidden,
            out,
            memory: cfg.memory,
        })
    }

    /// Scores `[n×1]` and rectified hidden activations.
    fn score(&self, tape: &mut Tape, x: Var, y: Var) -> Result<(Var, Vec<Var>)> {
        let s = &self.store;
        let first = match &self.body {
            Body::Mcc { x: lx, y: ly } => {
                let n = tape.dims(x)[0];
                let m0 = tape.constant(Tensor::zeros(&[n, self.memory]));
                let ox = lx.forward(
                    tape,
                    s,
                    LayerInputs {
                        own: x,
                        other: y,
                        other_rf: y,
                        memory: m0,
                        shared_memory: None,
                    },
                )?;
                let oy = ly.forward(
                    tape,
                    s,
                    LayerInputs {
                        own: y,
                        other: x,
                        other_rf: x,
                        memory: m0,
                        shared_memory: Some(ox.memory),
                    },
                )?;
                vec![ox.activation, oy.activation]
            }
            Body::Baseline { x: l } => {
                let xy = tape.concat_cols(x, y)?;
                let h = l.forward(tape, s, xy)?;
                vec![Activation::Relu.apply(tape, h)]
            }
        };
        let joined = match first[..] {
            [a, b] => tape.concat_cols(a, b)?,
            [a] => a,
            _ => unreachable!("one or two streams"),
        };
        let h = self.hidden.forward(tape, s, joined)?;
        let h = tape.relu(h);
        let t = self.out.forward(tape, s, h)?;
        let mut hidden = first;
        hidden.push(h);
        Ok((t, hidden))
    }

    fn score_values(&self, x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(x.dims()[0]);
        let n = x.dims()[0];
        for start in (0..n).step_by(4096) {
            let end = (start + 4096).min(n);
            let mut tape = Tape::new();
            let xv = tape.constant(x.slice_rows(start, end - start)?);
            let yv = tape.constant(y.slice_rows(start, end - start)?);
            let (t, _) = self.score(&mut tape, xv, yv)?;
            out.extend_from_slice(tape.value(t).data());
        }
        Ok(out)
    }
}

/// A held-out DV estimate with its Monte-Carlo standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiEstimate {
    pub step: usize,
    pub estimate: f64,
    pub se: f64,
}

/// DV estimate on independent joint and product-of-marginal scores. The
/// standard error follows the delta method on `log mean exp`.
pub fn dv_estimate(joint: &[f64], marginal: &[f64]) -> (f64, f64) {
    let nj = joint.len() as f64;
    let mean_j = joint.iter().sum::<f64>() / nj;
    let var_j = joint.iter().map(|t| (t - mean_j).powi(2)).sum::<f64>() / (nj - 1.0);
    let shift = marginal.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = marginal.iter().map(|t| (t - shift).exp()).collect();
    let nm = e.len() as f64;
    let mean_e = e.iter().sum::<f64>() / nm;
    let var_e = e.iter().map(|v| (v - mean_e).powi(2)).sum::<f64>() / (nm - 1.0);
    let estimate = mean_j - (mean_e.ln() + shift);
    let se = (var_j / nj + var_e / (nm * mean_e * mean_e)).sqrt();
    (estimate, se)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiRun {
    pub analytic: f64,
    /// `(update, training-batch bound)`.
    pub train_bound: Vec<(usize, f64)>,
    /// Held-out estimates every `eval_every` updates, the last at the end.
    pub evals: Vec<MiEstimate>,
}

impl MiRun {
    pub fn last(&self) -> MiEstimate {
        *self.evals.last().expect("at least one evaluation")
    }

    pub fn curve_csv(&self) -> Csv {
        let mut csv = Csv::new(&["step", "estimate", "se", "analytic"]);
        for e in &self.evals {
            csv.row(&[
                e.step.to_string(),
                e.estimate.to_string(),
                e.se.to_string(),
                self.analytic.to_string(),
            ]);
        }
        csv
    }

    pub fn train_csv(&self) -> Csv {
        let mut csv = Csv::new(&["step", "mi_estimate"]);
        for (s, v) in &self.train_bound {
            csv.row(&[s.to_string(), v.to_string()]);
        }
        csv
    }
}

/// Maximises the DV bound on fresh batches, scoring held-out pairs as it
/// goes.
pub fn train_gaussian_mi(cfg: &GaussianMiConfig) -> Result<MiRun> {
    cfg.validate()?;
    let base = Rng::new(cfg.seed);
    let mut net = CriticNet::new(cfg, &mut base.fork(0))?;
    let mut data = base.fork(1);
    let mut held_out = base.fork(2);
    let analytic = analytic_gaussian_mi(&vec![cfg.rho; cfg.dim])?;
    let mut train_bound = Vec::with_capacity(cfg.updates);
    let mut evals = Vec::new();
    for step in 1..=cfg.updates {
        let (x, y) = sample_correlated_gaussians(&cfg.pairs(cfg.batch), &mut data)?;
        let y_marg = shuffle_marginals(&y, &mut data)?;
        let mut tape = Tape::new();
        let (xv, yv, ym) = (tape.constant(x), tape.constant(y), tape.constant(y_marg));
        let (tj, hidden) = net.score(&mut tape, xv, yv)?;
        let (tm, _) = net.score(&mut tape, xv, ym)?;
        let bound = dv_bound(&mut tape, tj, tm)?;
        let energy = energy_term(&mut tape, &hidden, cfg.loss.tau_f)?;
        let loss = loss_mi(&mut tape, bound, energy, &cfg.loss)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                update: step,
                reason: format!("non-finite loss {value}"),
            });
        }
        train_bound.push((step, tape.value(bound).item()));
        tape.backward(loss, &mut net.store)?;
        adam_step(&mut net.store, &AdamConfig::new(cfg.learning_rate(step)));
        if step % cfg.eval_every == 0 || step == cfg.updates {
            let (x, y) = sample_correlated_gaussians(&cfg.pairs(cfg.eval_samples), &mut held_out)?;
            let (xm, _) = sample_correlated_gaussians(&cfg.pairs(cfg.eval_samples), &mut held_out)?;
            let joint = net.score_values(&x, &y)?;
            let marginal = net.score_values(&xm, &y)?;
            let (estimate, se) = dv_estimate(&joint, &marginal);
            log::info!("update {step}: held-out MI {estimate:.4} ± {se:.4} (analytic {analytic:.4})");
            evals.push(MiEstimate { step, estimate, se });
        }
    }
    Ok(MiRun {
        analytic,
        train_bound,
        evals,
    })
}

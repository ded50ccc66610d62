//! Training objectives and activity metrics.

use mcc_tensor::{logmeanexp, Rng, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Loss weights and firing parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the MI bound in `L1`.
    pub alpha: f64,
    /// Weight of the reconstruction error in `L2`.
    pub beta: f64,
    /// Weight of the energy term `𝓔`.
    pub gamma: f64,
    /// Energy temperature `τ_f`.
    pub tau_f: f64,
    /// Hard firing threshold `θ_f`.
    pub theta_f: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1e-3,
            tau_f: 0.1,
            theta_f: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("theta_f", self.theta_f)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.tau_f > 0.0 && self.tau_f.is_finite()) {
            return Err(Error::Config(format!("tau_f must be positive, got {}", self.tau_f)));
        }
        Ok(())
    }
}

/// Relative pull of the energy term against the task at initialisation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaBalance {
    /// `γ·‖∇𝓔‖ / ‖∇task‖`
    pub ratio: f64,
    pub ok: bool,
}

/// The energy term must stay secondary: `γ·‖∇𝓔‖ ≤ 0.1·‖∇task‖`.
pub fn gamma_balance(gamma: f64, energy_grad_norm: f64, task_grad_norm: f64) -> GammaBalance {
    let weighted = gamma * energy_grad_norm;
    let ratio = if task_grad_norm > 0.0 {
        weighted / task_grad_norm
    } else if weighted == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    let ok = ratio <= 0.1;
    if ok {
        log::info!("gamma balance ratio {ratio:.3e}");
    } else {
        log::warn!("gamma balance ratio {ratio:.3e} exceeds 0.1; energy term dominates the task");
    }
    GammaBalance { ratio, ok }
}

fn check_batch(op: &str, n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Contract(format!("{op} needs at least 2 samples, got {n}")));
    }
    Ok(())
}

/// Donsker–Varadhan bound `mean(T_joint) − log mean exp(T_marginal)`.
pub fn dv_bound(tape: &mut Tape, joint: Var, marginal: Var) -> Result<Var> {
    check_batch("dv_bound", tape.value(joint).len())?;
    check_batch("dv_bound", tape.value(marginal).len())?;
    let j = tape.mean(joint);
    let m = tape.logmeanexp(marginal);
    Ok(tape.sub(j, m)?)
}

/// [`dv_bound`] on plain score slices.
pub fn dv_bound_values(joint: &[f64], marginal: &[f64]) -> Result<f64> {
    check_batch("dv_bound", joint.len())?;
    check_batch("dv_bound", marginal.len())?;
    Ok(joint.iter().sum::<f64>() / joint.len() as f64 - logmeanexp(marginal))
}

/// Rows of `y` in a uniformly random order (Fisher–Yates).
pub fn shuffle_marginals(y: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let n = y.dims()[0];
    if n < 2 {
        return Ok(y.clone());
    }
    Ok(y.select_rows(&rng.permutation(n))?)
}

/// `𝓔 = mean over all units of tanh(a/τ_f)`.
///
/// Activations must already be rectified.
pub fn energy_term(tape: &mut Tape, activations: &[Var], tau_f: f64) -> Result<Var> {
    if activations.is_empty() {
        return Err(Error::Contract("energy term over no activations".into()));
    }
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for &a in activations {
        let value = tape.value(a);
        if let Some(bad) = value.data().iter().find(|&&x| x < 0.0 || x.is_nan()) {
            return Err(Error::Contract(format!(
                "energy term expects non-negative activations, found {bad}"
            )));
        }
        count += value.len();
        let scaled = tape.scale(a, 1.0 / tau_f);
        let t = tape.tanh(scaled);
        let s = tape.sum(t);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let total = total.expect("non-empty");
    Ok(tape.scale(total, 1.0 / count as f64))
}

/// `L1 = −α·I_f + γ·𝓔`
pub fn loss_mi(tape: &mut Tape, mi_estimate: Var, energy: Var, cfg: &LossConfig) -> Result<Var> {
    let mi = tape.scale(mi_estimate, -cfg.alpha);
    let e = tape.scale(energy, cfg.gamma);
    Ok(tape.add(mi, e)?)
}

/// Mean squared error between equally shaped tensors.
pub fn mse(tape: &mut Tape, target: Var, prediction: Var) -> Result<Var> {
    if tape.dims(target) != tape.dims(prediction) {
        return Err(Error::Tensor(mcc_tensor::TensorError::Shape {
            op: "mse",
            lhs: tape.dims(target).to_vec(),
            rhs: tape.dims(prediction).to_vec(),
        }));
    }
    let diff = tape.sub(prediction, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// `L2 = β·MSE(Z, Ẑ) + γ·𝓔`
pub fn loss_reconstruction(tape: &mut Tape, target: Var, prediction: Var, energy: Var, cfg: &LossConfig) -> Result<Var> {
    let err = mse(tape, target, prediction)?;
    let err = tape.scale(err, cfg.beta);
    let e = tape.scale(energy, cfg.gamma);
    Ok(tape.add(err, e)?)
}

/// 1 where the local SNR `20·log10(clean/noise)` exceeds `threshold_db`.
pub fn ideal_binary_mask(clean: &Tensor, noise: &Tensor, threshold_db: f64) -> Result<Tensor> {
    if clean.dims() != noise.dims() {
        return Err(Error::Tensor(mcc_tensor::TensorError::Shape {
            op: "ideal_binary_mask",
            lhs: clean.dims().to_vec(),
            rhs: noise.dims().to_vec(),
        }));
    }
    if clean.data().iter().chain(noise.data()).any(|&x| x < 0.0 || x.is_nan()) {
        return Err(Error::Domain("magnitudes must be non-negative".into()));
    }
    Ok(clean.zip_map(noise, |c, n| {
        if n == 0.0 {
            1.0
        } else if 20.0 * (c / n).log10() > threshold_db {
            1.0
        } else {
            0.0
        }
    })?)
}

/// Mean binary cross-entropy of mask logits against a binary target.
pub fn mask_loss(tape: &mut Tape, logits: Var, ibm: &Tensor) -> Result<Var> {
    if ibm.data().iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Domain("mask targets must be 0 or 1".into()));
    }
    Ok(tape.bce_with_logits(logits, ibm.clone())?)
}

/// Per-unit fraction of samples whose activation exceeds `θ_f`.
pub fn firing_probability(records: &Tensor, theta_f: f64) -> Result<Tensor> {
    if records.rank() != 2 {
        return Err(Error::Contract(format!("records must be samples×units, got {:?}", records.dims())));
    }
    if !records.is_finite() {
        return Err(Error::Domain("activation records must be finite".into()));
    }
    let (n, u) = (records.dims()[0], records.dims()[1]);
    let mut counts = vec![0.0; u];
    for row in records.data().chunks(u) {
        for (c, &a) in counts.iter_mut().zip(row) {
            if a > theta_f {
                *c += 1.0;
            }
        }
    }
    Ok(Tensor::new(&[u], counts.into_iter().map(|c| c / n as f64).collect())?)
}

/// `I = −½ Σ ln(1 − ρ_k²)` for independent correlated Gaussian pairs.
pub fn analytic_gaussian_mi(correlations: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for &rho in correlations {
        if !(rho.abs() < 1.0) {
            return Err(Error::Domain(format!("correlation {rho} must satisfy |rho| < 1")));
        }
        total += -0.5 * (1.0 - rho * rho).ln();
    }
    Ok(total)
}

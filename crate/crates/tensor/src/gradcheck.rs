//! Central finite-difference gradient checking.
//!
//! Numeric derivatives come from forward evaluations only, so the check is
//! independent of the backward rules it is used to validate.

use crate::error::Result;
use crate::param::ParameterStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Analytic vs. numeric comparison for one differentiated tensor.
#[derive(Clone, Debug)]
pub struct GradComparison {
    pub label: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradComparison {
    /// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, or the absolute error when both vanish.
    pub fn relative_error(&self) -> f64 {
        let diff = norm(self.analytic.iter().zip(&self.numeric).map(|(a, n)| a - n));
        let scale = norm(self.analytic.iter().copied()).max(norm(self.numeric.iter().copied()));
        if scale < 1e-12 {
            diff
        } else {
            diff / scale
        }
    }
}

fn norm(it: impl Iterator<Item = f64>) -> f64 {
    it.map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub comparisons: Vec<GradComparison>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.comparisons
            .iter()
            .map(GradComparison::relative_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradComparison> {
        self.comparisons.iter().max_by(|a, b| {
            a.relative_error()
                .partial_cmp(&b.relative_error())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    }
}

fn scalar_of(tape: &Tape, v: Var) -> f64 {
    tape.value(v).item()
}

/// Checks `∂f/∂input` for every input tensor. `f` must build a scalar.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok(scalar_of(&tape, root))
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.gradients(root)?;
    let mut report = GradCheckReport::default();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = Vec::with_capacity(input.len());
        let mut work = inputs.to_vec();
        for j in 0..input.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        report.comparisons.push(GradComparison {
            label: format!("input[{i}]"),
            analytic,
            numeric,
        });
    }
    Ok(report)
}

/// Checks `∂f/∂θ` for every parameter in `store` via [`Tape::backward`].
pub fn check_params<F>(store: &mut ParameterStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = f(&mut tape, store)?;
    tape.backward(root, store)?;
    let ids: Vec<_> = store.ids().collect();
    let mut report = GradCheckReport::default();
    for id in ids {
        let analytic = store.grad(id).data().to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..analytic.len() {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + h;
            let mut t = Tape::new();
            let r = f(&mut t, store)?;
            let plus = scalar_of(&t, r);
            store.value_mut(id).data_mut()[j] = orig - h;
            let mut t = Tape::new();
            let r = f(&mut t, store)?;
            let minus = scalar_of(&t, r);
            store.value_mut(id).data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        report.comparisons.push(GradComparison {
            label: store.name(id).to_string(),
            analytic,
            numeric,
        });
    }
    Ok(report)
}

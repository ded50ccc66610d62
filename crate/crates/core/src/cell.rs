//! Single-cell modulatory transfer functions `Pr(Y = 1 | R = r, C = c)`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::report::sig6;

/// Transfer-function family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// `σ_k(r)`, context ignored.
    RfDominant,
    /// `σ_k(r(1 + exp(2rc))/2)`
    KayModulatory,
    /// `rc + (1 − r)(1 − c)`
    Xnor,
    /// `min(0.49, σ_k(r(1 + c)))`
    WeakAmplify,
    /// Half-Gaussian filter applied to `T(r, c)`.
    ProposedHgf,
    /// `min(1, max(0, T(r, c)))`
    ReluThreshold,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::RfDominant,
        Variant::KayModulatory,
        Variant::Xnor,
        Variant::WeakAmplify,
        Variant::ProposedHgf,
        Variant::ReluThreshold,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown transfer function {s:?}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::RfDominant => "rf-dominant",
            Variant::KayModulatory => "kay-modulatory",
            Variant::Xnor => "xnor",
            Variant::WeakAmplify => "weak-amplify",
            Variant::ProposedHgf => "proposed-hgf",
            Variant::ReluThreshold => "relu-threshold",
        }
    }

    pub fn is_proposed(self) -> bool {
        matches!(self, Variant::ProposedHgf | Variant::ReluThreshold)
    }
}

/// A transfer function and its parameters.
///
/// `σ_k(x) = 1 / (1 + exp(−k(x − τ)))` is the logistic used by the
/// conventional variants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransferFunctionSpec {
    pub variant: Variant,
    /// Half-Gaussian width.
    pub sigma: f64,
    /// Logistic gain.
    pub gain: f64,
    /// Logistic midpoint.
    pub threshold: f64,
}

impl TransferFunctionSpec {
    pub fn new(variant: Variant) -> Self {
        TransferFunctionSpec {
            variant,
            sigma: 0.35,
            gain: 10.0,
            threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Domain(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !self.gain.is_finite() || !self.threshold.is_finite() {
            return Err(Error::Domain("gain and threshold must be finite".into()));
        }
        Ok(())
    }

    fn logistic(&self, x: f64) -> f64 {
        1.0 / (1.0 + (-self.gain * (x - self.threshold)).exp())
    }
}

/// Modulatory drive `T(r, c) = c(1 + r)/2`.
pub fn drive(r: f64, c: f64) -> f64 {
    c * (1.0 + r) / 2.0
}

/// Half-Gaussian filter centred at 1, saturating to the right.
pub fn half_gaussian(t: f64, sigma: f64) -> f64 {
    if t <= 1.0 {
        (-(t - 1.0).powi(2) / (2.0 * sigma * sigma)).exp()
    } else {
        1.0
    }
}

pub fn amtf_eval(r: f64, c: f64, spec: &TransferFunctionSpec) -> Result<f64> {
    spec.validate()?;
    for (name, v) in [("r", r), ("c", c)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain(format!("{name} = {v} outside [0, 1]")));
        }
    }
    Ok(match spec.variant {
        Variant::RfDominant => spec.logistic(r),
        Variant::KayModulatory => spec.logistic(r * (1.0 + (2.0 * r * c).exp()) / 2.0),
        Variant::Xnor => r * c + (1.0 - r) * (1.0 - c),
        Variant::WeakAmplify => spec.logistic(r * (1.0 + c)).min(0.49),
        Variant::ProposedHgf => half_gaussian(drive(r, c), spec.sigma),
        Variant::ReluThreshold => drive(r, c).clamp(0.0, 1.0),
    })
}

/// `Y` sampled on a uniform `n×n` grid over `[0,1]²`; `y[i][j]` is at
/// `(r_axis[i], c_axis[j])`.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceGrid {
    pub spec: TransferFunctionSpec,
    pub r_axis: Vec<f64>,
    pub c_axis: Vec<f64>,
    pub y: Vec<Vec<f64>>,
}

pub fn surface_grid(spec: &TransferFunctionSpec, n: usize) -> Result<SurfaceGrid> {
    if n < 2 {
        return Err(Error::Domain(format!("grid size must be at least 2, got {n}")));
    }
    let axis: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let y = axis
        .iter()
        .map(|&r| axis.iter().map(|&c| amtf_eval(r, c, spec)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(SurfaceGrid {
        spec: *spec,
        r_axis: axis.clone(),
        c_axis: axis,
        y,
    })
}

impl SurfaceGrid {
    pub fn max(&self) -> f64 {
        self.y.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("r,c,Y\n");
        for (i, &r) in self.r_axis.iter().enumerate() {
            for (j, &c) in self.c_axis.iter().enumerate() {
                let _ = writeln!(out, "{},{},{}", sig6(r), sig6(c), sig6(self.y[i][j]));
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Outcome of [`ordering_check`]; empty `violations` means every ordering held.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OrderingReport {
    pub checked: Vec<String>,
    pub violations: Vec<String>,
}

impl OrderingReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    fn expect(&mut self, what: String, ok: bool) {
        if !ok {
            self.violations.push(what.clone());
        }
        self.checked.push(what);
    }
}

/// Verifies the qualitative orderings a variant is meant to show.
///
/// Proposed variants: `Y(0,1) > Y(1,0)`, `Y(1,1)` is the grid maximum and
/// `Y` never decreases along `c`. Rf-dominant: `Y(1,0) = Y(1,1)`.
/// Weak-amplify: the surface stays below 0.5.
pub fn ordering_check(spec: &TransferFunctionSpec, n: usize) -> Result<OrderingReport> {
    let y = |r, c| amtf_eval(r, c, spec);
    let mut report = OrderingReport::default();
    match spec.variant {
        v if v.is_proposed() => {
            let (y01, y10, y11) = (y(0.0, 1.0)?, y(1.0, 0.0)?, y(1.0, 1.0)?);
            report.expect(format!("Y(0,1)={} > Y(1,0)={}", sig6(y01), sig6(y10)), y01 > y10);
            let grid = surface_grid(spec, n)?;
            let max = grid.max();
            report.expect(format!("Y(1,1)={} equals grid max {}", sig6(y11), sig6(max)), y11 >= max);
            let mut worst = 0.0f64;
            for row in &grid.y {
                for w in row.windows(2) {
                    worst = worst.min(w[1] - w[0]);
                }
            }
            report.expect(format!("dY/dc >= 0 (min step {})", sig6(worst)), worst >= 0.0);
        }
        Variant::RfDominant => {
            let gap = (y(1.0, 0.0)? - y(1.0, 1.0)?).abs();
            report.expect(format!("|Y(1,0) - Y(1,1)| = {} is 0", sig6(gap)), gap == 0.0);
        }
        Variant::WeakAmplify => {
            let max = surface_grid(spec, n)?.max();
            report.expect(format!("max Y = {} < 0.5", sig6(max)), max < 0.5);
        }
        other => {
            return Err(Error::Contract(format!("no ordering defined for {}", other.name())));
        }
    }
    Ok(report)
}

//! One-class goodness losses evaluated on a layer's output `h` (`n x q`).
//!
//! | kind               | per-sample term `D_i`                 | total                 |
//! |--------------------|---------------------------------------|-----------------------|
//! | `Goodness`         | `sigmoid(‖h_i‖² − C)`                 | `Σ D_i`               |
//! | `GoodnessAdjusted` | `softplus(‖h_i‖² − C)`                | `Σ D_i`               |
//! | `HbSvdd`           | `‖h_i − a‖²`                          | `Σ D_i`               |
//! | `Svdd`             | `C · max(0, ‖h_i − a‖² − R²)`         | `R² + Σ D_i`          |
//! | `LsSvdd`           | `(C/2) · (‖h_i − a‖² − R²)²`          | `R² + Σ D_i`          |
//!
//! The center `a` and radius `R²` live in a [`LossState`] fitted on a batch by
//! [`calibrate_state`] and held constant while differentiating.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;
use crate::tensor::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Goodness,
    GoodnessAdjusted,
    HbSvdd,
    Svdd,
    LsSvdd,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Goodness,
        LossKind::GoodnessAdjusted,
        LossKind::HbSvdd,
        LossKind::Svdd,
        LossKind::LsSvdd,
    ];

    /// Default `C`: a norm threshold for the goodness pair, a penalty weight
    /// for the soft-boundary pair. Unused by `HbSvdd`.
    pub fn default_c(self) -> f64 {
        match self {
            LossKind::Goodness | LossKind::GoodnessAdjusted => 2.0,
            LossKind::HbSvdd | LossKind::Svdd | LossKind::LsSvdd => 1.0,
        }
    }

    /// Whether the loss carries a radius `R²`.
    pub fn has_radius(self) -> bool {
        matches!(self, LossKind::Svdd | LossKind::LsSvdd)
    }

    /// Whether the loss measures distances to the center `a`.
    pub fn uses_center(self) -> bool {
        matches!(self, LossKind::HbSvdd | LossKind::Svdd | LossKind::LsSvdd)
    }

    /// Identifier used in configs and CSV files.
    pub fn key(self) -> &'static str {
        match self {
            LossKind::Goodness => "goodness",
            LossKind::GoodnessAdjusted => "goodness_adjusted",
            LossKind::HbSvdd => "hb_svdd",
            LossKind::Svdd => "svdd",
            LossKind::LsSvdd => "ls_svdd",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Goodness => "Goodness",
            LossKind::GoodnessAdjusted => "GoodnessAdjusted",
            LossKind::HbSvdd => "HB-SVDD",
            LossKind::Svdd => "SVDD",
            LossKind::LsSvdd => "LS-SVDD",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        match norm.as_str() {
            "goodness" => Ok(LossKind::Goodness),
            "goodness_adjusted" | "goodnessadjusted" => Ok(LossKind::GoodnessAdjusted),
            "hb_svdd" | "hbsvdd" => Ok(LossKind::HbSvdd),
            "svdd" => Ok(LossKind::Svdd),
            "ls_svdd" | "lssvdd" => Ok(LossKind::LsSvdd),
            _ => Err(Error::config(format!("unknown loss `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub c: f64,
    pub nu: f64,
}

impl LossSpec {
    pub const DEFAULT_NU: f64 = 0.05;

    pub fn new(kind: LossKind) -> Self {
        LossSpec {
            kind,
            c: kind.default_c(),
            nu: Self::DEFAULT_NU,
        }
    }

    pub fn with_c(mut self, c: f64) -> Self {
        self.c = c;
        self
    }

    pub fn with_nu(mut self, nu: f64) -> Self {
        self.nu = nu;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu < 1.0) {
            return Err(Error::config(format!("nu must lie in (0, 1), got {}", self.nu)));
        }
        if !self.c.is_finite() {
            return Err(Error::config("C must be finite"));
        }
        if self.kind.has_radius() && self.c <= 0.0 {
            return Err(Error::config(format!(
                "{} needs a positive penalty weight C, got {}",
                self.kind, self.c
            )));
        }
        Ok(())
    }
}

/// Center and squared radius fitted on one batch of activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossState {
    pub center: Vector,
    pub radius_sq: f64,
}

impl LossState {
    /// `‖h_i − a‖²` for every row.
    pub fn sq_distances(&self, h: &Matrix) -> Result<Vector> {
        self.check_width(h)?;
        let a = self.center.as_slice();
        Ok(Vector::new(
            (0..h.rows())
                .map(|i| h.row(i).iter().zip(a).map(|(x, c)| (x - c) * (x - c)).sum())
                .collect(),
        ))
    }

    fn check_width(&self, h: &Matrix) -> Result<()> {
        if h.cols() != self.center.len() {
            return Err(Error::Shape {
                op: "loss state",
                left: h.shape(),
                right: (1, self.center.len()),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub per_sample: Vector,
    pub total: f64,
    pub grad_h: Matrix,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Fits the center (column means) and, for the soft-boundary losses, the
/// squared radius as the `(1 − ν)` quantile of squared center distances.
pub fn calibrate_state(h: &Matrix, spec: &LossSpec) -> Result<LossState> {
    let center = h.col_means()?;
    let mut state = LossState {
        center,
        radius_sq: 0.0,
    };
    if spec.kind.has_radius() {
        let d = state.sq_distances(h)?;
        state.radius_sq = stats::quantile(d.as_slice(), 1.0 - spec.nu).unwrap_or(0.0).max(0.0);
    }
    Ok(state)
}

pub fn evaluate(h: &Matrix, spec: &LossSpec, state: &LossState) -> Result<LossEval> {
    state.check_width(h)?;
    let (n, q) = h.shape();
    let c = spec.c;
    let r2 = state.radius_sq;
    let mut per_sample = Vec::with_capacity(n);
    // dL/dh_i = coef_i * (h_i - offset), offset = a or 0
    let mut coef = Vec::with_capacity(n);

    match spec.kind {
        LossKind::Goodness | LossKind::GoodnessAdjusted => {
            for s in h.row_sq_norms().iter() {
                let z = s - c;
                let sig = sigmoid(z);
                if spec.kind == LossKind::Goodness {
                    per_sample.push(sig);
                    coef.push(2.0 * sig * (1.0 - sig));
                } else {
                    per_sample.push(softplus(z));
                    coef.push(2.0 * sig);
                }
            }
        }
        LossKind::HbSvdd | LossKind::Svdd | LossKind::LsSvdd => {
            for d in state.sq_distances(h)?.iter() {
                let excess = d - r2;
                match spec.kind {
                    LossKind::HbSvdd => {
                        per_sample.push(*d);
                        coef.push(2.0);
                    }
                    LossKind::Svdd => {
                        // subgradient 0 at the kink
                        if excess > 0.0 {
                            per_sample.push(c * excess);
                            coef.push(2.0 * c);
                        } else {
                            per_sample.push(0.0);
                            coef.push(0.0);
                        }
                    }
                    _ => {
                        per_sample.push(0.5 * c * excess * excess);
                        coef.push(2.0 * c * excess);
                    }
                }
            }
        }
    }

    let sum: f64 = per_sample.iter().sum();
    let total = if spec.kind.has_radius() { r2 + sum } else { sum };

    let offset: Option<&[f64]> = spec.kind.uses_center().then(|| state.center.as_slice());
    let mut grad = Vec::with_capacity(n * q);
    for (i, &k) in coef.iter().enumerate() {
        let row = h.row(i);
        match offset {
            Some(a) => grad.extend(row.iter().zip(a).map(|(x, c)| k * (x - c))),
            None => grad.extend(row.iter().map(|x| k * x)),
        }
    }

    Ok(LossEval {
        per_sample: Vector::new(per_sample),
        total,
        grad_h: Matrix::from_vec(n, q, grad)?,
    })
}

/// Per-sample anomaly scores; larger means more anomalous.
pub fn distance_scores(h: &Matrix, spec: &LossSpec, state: &LossState) -> Result<Vector> {
    Ok(evaluate(h, spec, state)?.per_sample)
}

/// Largest relative disagreement between the analytic `grad_h` and central
/// finite differences of `total`, with `a` and `R²` held fixed. Below a
/// magnitude of `1e-8` the absolute error is used instead.
pub fn grad_check(spec: &LossSpec, state: &LossState, h: &Matrix, eps: f64) -> Result<f64> {
    let analytic = evaluate(h, spec, state)?.grad_h;
    let (n, q) = h.shape();
    let base = h.as_slice().to_vec();
    let mut worst = 0.0f64;
    for idx in 0..n * q {
        let mut plus = base.clone();
        plus[idx] += eps;
        let mut minus = base.clone();
        minus[idx] -= eps;
        let fp = evaluate(&Matrix::from_vec(n, q, plus)?, spec, state)?.total;
        let fm = evaluate(&Matrix::from_vec(n, q, minus)?, spec, state)?.total;
        let numeric = (fp - fm) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.as_slice()[idx], numeric));
    }
    Ok(worst)
}

pub(crate) fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

//! Scalar GLM losses, their derivatives and convex conjugates.
//!
//! Squared loss is `0.5 * (s - y)^2`, so its derivative is the residual
//! `s - y`. Logistic loss is `log(1 + exp(-y s))` with labels in `{-1, +1}`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{top_singular_value_sq, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Squared,
    Logistic,
}

impl LossKind {
    /// Curvature bound of the scalar loss in `s`.
    pub fn curvature(self) -> f64 {
        match self {
            LossKind::Squared => 1.0,
            LossKind::Logistic => 0.25,
        }
    }

    pub fn check_label(self, y: f64) -> Result<()> {
        match self {
            LossKind::Squared if y.is_finite() => Ok(()),
            LossKind::Squared => Err(Error::input(format!("non-finite response {y}"))),
            LossKind::Logistic if y == 1.0 || y == -1.0 => Ok(()),
            LossKind::Logistic => Err(Error::input(format!(
                "logistic labels must be -1 or +1, found {y}"
            ))),
        }
    }

    #[inline]
    pub(crate) fn value(self, s: f64, y: f64) -> f64 {
        match self {
            LossKind::Squared => {
                let r = s - y;
                0.5 * r * r
            }
            LossKind::Logistic => softplus(-y * s),
        }
    }

    #[inline]
    pub(crate) fn derivative(self, s: f64, y: f64) -> f64 {
        match self {
            LossKind::Squared => s - y,
            LossKind::Logistic => -y * sigmoid(-y * s),
        }
    }

    #[inline]
    pub(crate) fn conjugate(self, zeta: f64, y: f64) -> f64 {
        match self {
            LossKind::Squared => 0.5 * zeta * zeta + zeta * y,
            LossKind::Logistic => {
                let u = zeta * y;
                if (-1.0..=0.0).contains(&u) {
                    xlogx(1.0 + u) + xlogx(-u)
                } else {
                    f64::INFINITY
                }
            }
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Squared => "squared",
            LossKind::Logistic => "logistic",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "squared" | "linear" | "ls" => Ok(LossKind::Squared),
            "logistic" | "logit" => Ok(LossKind::Logistic),
            other => Err(Error::input(format!("unknown loss '{other}'"))),
        }
    }
}

/// `log(1 + exp(t))` without overflow.
#[inline]
pub(crate) fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn xlogx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

pub fn loss_value(kind: LossKind, s: f64, y: f64) -> Result<f64> {
    kind.check_label(y)?;
    Ok(kind.value(s, y))
}

pub fn loss_derivative(kind: LossKind, s: f64, y: f64) -> Result<f64> {
    kind.check_label(y)?;
    Ok(kind.derivative(s, y))
}

/// Convex conjugate of `s -> loss(s, y)`, `+inf` outside its domain.
pub fn loss_conjugate(kind: LossKind, zeta: f64, y: f64) -> f64 {
    kind.conjugate(zeta, y)
}

const SMOOTHNESS_FLOOR: f64 = 1e-12;
const SMOOTHNESS_INFLATION: f64 = 1.01;

/// Lipschitz constant of the gradient of `beta -> sum_i loss(x_i' beta, y_i)`,
/// estimated as `c * sigma_max(X)^2 * 1.01`.
pub fn smoothness_constant(kind: LossKind, x: &Matrix) -> f64 {
    let sigma_sq = top_singular_value_sq(x, 1e-4, 100);
    (kind.curvature() * sigma_sq * SMOOTHNESS_INFLATION).max(SMOOTHNESS_FLOOR)
}

//! Model parameters, admissibility classification, the taxis sensitivity law
//! and the regularization of initial data.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::ScalarField;
use crate::power::Power;

pub const DEFAULT_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FKind {
    /// `f(u) = Cf * u * (u + 1)^(alpha - 1)`
    ProductLaw,
    /// `f(u) = Cf * u^alpha`
    PowerLaw,
}

/// Admissible parameter regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Case {
    /// `1 <= m < 2`, product law, `m-1 < alpha < m`
    I,
    /// `2 <= m < 3`, power law, `m-1 < alpha < m/2+1`
    II,
    /// `3 <= m < 4`, power law, `m-1 < alpha < m/2+1`, `u0 > 0`
    III,
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Case::I => "I",
            Case::II => "II",
            Case::III => "III",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("{name} = {value} out of range: requires {requirement}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        requirement: &'static str,
    },
    #[error("{window}: {detail}")]
    Inadmissible { window: String, detail: String },
    #[error("f evaluated at negative density {0}")]
    NegativeDensity(f64),
    #[error("invalid initial data: {0}")]
    InitialData(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub m: f64,
    pub alpha: f64,
    pub ell: f64,
    #[serde(rename = "Cf")]
    pub cf: f64,
    pub f_kind: FKind,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl ModelParams {
    pub fn new(m: f64, alpha: f64, ell: f64, cf: f64, f_kind: FKind, epsilon: f64) -> Self {
        ModelParams {
            m,
            alpha,
            ell,
            cf,
            f_kind,
            epsilon,
        }
    }

    pub fn classify(&self) -> Result<Case, ModelError> {
        classify(self)
    }

    /// Taxis sensitivity `f(u)`.
    pub fn f(&self, u: f64) -> Result<f64, ModelError> {
        f_eval(u, self)
    }

    pub(crate) fn taxis_law(&self) -> TaxisLaw {
        TaxisLaw::new(self)
    }
}

/// Returns the unique admissible case or the violated inequality.
///
/// All inequalities on `alpha` are strict; ties are rejected.
pub fn classify(p: &ModelParams) -> Result<Case, ModelError> {
    check_finite("m", p.m)?;
    check_finite("alpha", p.alpha)?;
    check_finite("ell", p.ell)?;
    check_finite("Cf", p.cf)?;
    check_finite("epsilon", p.epsilon)?;
    if !(1.0..4.0).contains(&p.m) {
        return Err(ModelError::OutOfRange {
            name: "m",
            value: p.m,
            requirement: "1 <= m < 4",
        });
    }
    if p.ell < 0.0 {
        return Err(ModelError::OutOfRange {
            name: "ell",
            value: p.ell,
            requirement: "ell >= 0",
        });
    }
    if p.cf <= 0.0 {
        return Err(ModelError::OutOfRange {
            name: "Cf",
            value: p.cf,
            requirement: "Cf > 0",
        });
    }
    if !(p.epsilon > 0.0 && p.epsilon < 1.0) {
        return Err(ModelError::OutOfRange {
            name: "epsilon",
            value: p.epsilon,
            requirement: "0 < epsilon < 1",
        });
    }

    let (case, law, upper, upper_text, window) = if p.m < 2.0 {
        (
            Case::I,
            FKind::ProductLaw,
            p.m,
            "alpha < m",
            "case I (1 <= m < 2) needs the product law and m-1 < alpha < m, strictly",
        )
    } else if p.m < 3.0 {
        (
            Case::II,
            FKind::PowerLaw,
            p.m / 2.0 + 1.0,
            "alpha < m/2+1",
            "case II (2 <= m < 3) needs the power law and m-1 < alpha < m/2+1, strictly",
        )
    } else {
        (
            Case::III,
            FKind::PowerLaw,
            p.m / 2.0 + 1.0,
            "alpha < m/2+1",
            "case III (3 <= m < 4) needs the power law and m-1 < alpha < m/2+1, strictly",
        )
    };
    let inadmissible = |detail: String| ModelError::Inadmissible {
        window: window.to_string(),
        detail,
    };
    if p.f_kind != law {
        return Err(inadmissible(format!(
            "f_kind {:?} given, {:?} required",
            p.f_kind, law
        )));
    }
    if p.alpha <= p.m - 1.0 {
        return Err(inadmissible(format!(
            "m-1 < alpha violated: alpha = {} <= m-1 = {}",
            p.alpha,
            p.m - 1.0
        )));
    }
    if p.alpha >= upper {
        return Err(inadmissible(format!(
            "{upper_text} violated: alpha = {} >= {upper}",
            p.alpha
        )));
    }
    Ok(case)
}

fn check_finite(name: &'static str, value: f64) -> Result<(), ModelError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(ModelError::OutOfRange {
            name,
            value,
            requirement: "a finite value",
        })
    }
}

/// Evaluates `f(u)`; both laws attain their growth bound with equality.
pub fn f_eval(u: f64, p: &ModelParams) -> Result<f64, ModelError> {
    if u < 0.0 || u.is_nan() {
        return Err(ModelError::NegativeDensity(u));
    }
    Ok(TaxisLaw::new(p).f(u))
}

/// Precomputed form of `f` used in the inner loops.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TaxisLaw {
    kind: FKind,
    cf: f64,
    alpha: f64,
    pow: Power,
}

impl TaxisLaw {
    pub(crate) fn new(p: &ModelParams) -> Self {
        let pow = match p.f_kind {
            FKind::PowerLaw => Power::new(p.alpha),
            FKind::ProductLaw => Power::new(p.alpha - 1.0),
        };
        TaxisLaw {
            kind: p.f_kind,
            cf: p.cf,
            alpha: p.alpha,
            pow,
        }
    }

    #[inline(always)]
    pub(crate) fn f(&self, u: f64) -> f64 {
        match self.kind {
            FKind::PowerLaw => self.cf * self.pow.eval(u),
            FKind::ProductLaw => self.cf * u * self.pow.eval(u + 1.0),
        }
    }

    /// Bound on the taxis transport speed per unit `v |grad v|`:
    /// `max(f'(u), f(u)/u)`. The second term matters for the product law
    /// with `alpha < 1`, where `f(u)/u` exceeds `f'(u)`.
    #[inline]
    pub(crate) fn speed(&self, u: f64) -> f64 {
        match self.kind {
            FKind::PowerLaw => {
                if u == 0.0 {
                    if self.alpha > 1.0 {
                        0.0
                    } else if self.alpha == 1.0 {
                        self.cf
                    } else {
                        f64::INFINITY
                    }
                } else {
                    // u^(alpha-1) = u^alpha / u
                    self.cf * self.pow.eval(u) / u * self.alpha.max(1.0)
                }
            }
            FKind::ProductLaw => {
                let w = u + 1.0;
                let ratio = self.cf * self.pow.eval(w);
                let deriv = ratio / w * (1.0 + self.alpha * u);
                ratio.max(deriv)
            }
        }
    }
}

/// Initial densities; `v0` must be strictly positive and `u0` nonnegative
/// with positive mass.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialData {
    pub u0: ScalarField,
    pub v0: ScalarField,
}

impl InitialData {
    pub fn new(u0: ScalarField, v0: ScalarField) -> Self {
        InitialData { u0, v0 }
    }

    pub fn validate(&self, case: Case) -> Result<(), ModelError> {
        if self.u0.grid() != self.v0.grid() {
            return Err(ModelError::InitialData(
                "u0 and v0 are on different grids".into(),
            ));
        }
        let vmin = self.v0.min();
        if !(vmin > 0.0) {
            return Err(ModelError::InitialData(format!(
                "v0 must be positive everywhere, min v0 = {vmin}"
            )));
        }
        let umin = self.u0.min();
        if umin < 0.0 {
            return Err(ModelError::InitialData(format!(
                "u0 must be nonnegative, min u0 = {umin}"
            )));
        }
        if !(self.u0.integrate() > 0.0) {
            return Err(ModelError::InitialData(
                "u0 must not vanish identically".into(),
            ));
        }
        if case == Case::III && !(umin > 0.0) {
            return Err(ModelError::InitialData(format!(
                "case III needs u0 > 0 everywhere, min u0 = {umin}"
            )));
        }
        Ok(())
    }
}

/// `u0 + epsilon` for `1 <= m < 3`, `u0` unchanged for `3 <= m < 4`.
pub fn regularize_initial(data: &InitialData, params: &ModelParams) -> ScalarField {
    if params.m < 3.0 {
        data.u0.map(|u| u + params.epsilon)
    } else {
        data.u0.clone()
    }
}

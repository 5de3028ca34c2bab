//! Value weighting curves, time decay and weight normalization.
//!
//! The value curve `f` maps a qualifier-scale value in `[0, 4]` back onto
//! `[0, 4]`. It always passes through `(0, 0)`, `(2, y)` and `(4, 4)`:
//!
//! * `y < 2`: exponential `a·e^(b·x) + c`, emphasizing severe problems,
//! * `y = 2`: identity,
//! * `y > 2`: logarithmic `a·ln(b·x + 1)`, emphasizing mild problems.
//!
//! Time decay discounts a qualifier observed `TE` days before the evaluation
//! day by `α = γ^TE`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Residual tolerance for the interpolation constraints of a fitted curve.
pub const FIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WeightingError {
    #[error("curve parameter y = {0} must lie in the open interval (0, 4)")]
    InvalidY(f64),
    #[error("decay constant gamma = {0} must lie in (0, 1]")]
    InvalidGamma(f64),
    #[error("cannot parse decay constant {0:?}; expected a number or FRACTION@DAYS such as 1/3@30")]
    GammaSyntax(String),
    #[error("value {0} lies outside the qualifier range [0, 4]")]
    OutOfRange(f64),
    #[error(
        "logarithmic fit for y = {y} did not converge: ln(b) bracket [{lo}, {hi}], residual {residual:e}"
    )]
    NoConvergence {
        y: f64,
        lo: f64,
        hi: f64,
        residual: f64,
    },
    #[error("qualifier on day {day} is newer than the reference day {reference_day}")]
    FutureQualifier { day: u32, reference_day: u32 },
    #[error("weights must be finite and non-negative, got {0}")]
    NegativeWeight(f64),
    #[error("all weights are zero")]
    ZeroWeights,
}

/// A fitted value-weighting curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ValueCurve {
    /// `a·e^(b·x) + c` with `c = −a`.
    Exponential { a: f64, b: f64, c: f64 },
    Linear,
    /// `a·ln(b·x + 1)`. `b` is stored as `ln_b` because it grows without
    /// bound as `y → 4`.
    Logarithmic { a: f64, ln_b: f64 },
}

/// Which curve family a `y` selects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveKind {
    Exponential,
    Linear,
    Logarithmic,
}

impl fmt::Display for CurveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CurveKind::Exponential => "exponential",
            CurveKind::Linear => "linear",
            CurveKind::Logarithmic => "logarithmic",
        })
    }
}

impl ValueCurve {
    /// Fits the curve through `(0,0)`, `(2,y)`, `(4,4)`.
    pub fn fit(y: f64) -> Result<Self, WeightingError> {
        if !(y > 0.0 && y < 4.0) {
            return Err(WeightingError::InvalidY(y));
        }
        if y == 2.0 {
            return Ok(ValueCurve::Linear);
        }
        if y < 2.0 {
            // a(t − 1) = y and a(t² − 1) = 4 with t = e^(2b) give t = 4/y − 1.
            let t = 4.0 / y - 1.0;
            let a = y / (t - 1.0);
            let b = t.ln() / 2.0;
            return Ok(ValueCurve::Exponential { a, b, c: -a });
        }
        fit_logarithmic(y)
    }

    pub fn kind(&self) -> CurveKind {
        match self {
            ValueCurve::Exponential { .. } => CurveKind::Exponential,
            ValueCurve::Linear => CurveKind::Linear,
            ValueCurve::Logarithmic { .. } => CurveKind::Logarithmic,
        }
    }

    /// `(a, b, c)` in the textbook parameterization. For the logarithmic
    /// curve `c` is 0 and `b` may overflow to infinity for `y` close to 4.
    pub fn params(&self) -> (f64, f64, f64) {
        match *self {
            ValueCurve::Exponential { a, b, c } => (a, b, c),
            ValueCurve::Linear => (1.0, 0.0, 0.0),
            ValueCurve::Logarithmic { a, ln_b } => (a, ln_b.exp(), 0.0),
        }
    }

    /// Evaluates the curve without range checks.
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            ValueCurve::Exponential { a, b, c } => a * (b * x).exp() + c,
            ValueCurve::Linear => x,
            ValueCurve::Logarithmic { a, ln_b } => a * ln_scaled_1p(ln_b, x),
        }
    }

    /// Evaluates the curve on the qualifier range.
    pub fn apply(&self, x: f64) -> Result<f64, WeightingError> {
        if !(0.0..=4.0).contains(&x) {
            return Err(WeightingError::OutOfRange(x));
        }
        Ok(self.eval(x).clamp(0.0, 4.0))
    }
}

/// `ln(e^ln_b · x + 1)` without overflowing for large `ln_b`.
fn ln_scaled_1p(ln_b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let ln_bx = ln_b + x.ln();
    if ln_bx > 0.0 {
        ln_bx + (-ln_bx).exp().ln_1p()
    } else {
        ln_bx.exp().ln_1p()
    }
}

fn fit_logarithmic(y: f64) -> Result<ValueCurve, WeightingError> {
    // a = y / ln(2b + 1) pins f(2) = y; solve y·ln(4b+1)/ln(2b+1) = 4 for b.
    // The ratio falls from 2 (b → 0) to 1 (b → ∞), so the root is unique.
    let residual = |ln_b: f64| y * ln_scaled_1p(ln_b, 4.0) / ln_scaled_1p(ln_b, 2.0) - 4.0;

    let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
    while residual(lo) <= 0.0 && lo > -700.0 {
        lo *= 2.0;
    }
    while residual(hi) >= 0.0 && hi < 1e300 {
        hi *= 2.0;
    }
    let (r_lo, r_hi) = (residual(lo), residual(hi));
    if !(r_lo > 0.0 && r_hi < 0.0) {
        return Err(WeightingError::NoConvergence {
            y,
            lo,
            hi,
            residual: r_lo.abs().min(r_hi.abs()),
        });
    }

    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if residual(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let ln_b = if residual(lo).abs() < residual(hi).abs() {
        lo
    } else {
        hi
    };
    let a = y / ln_scaled_1p(ln_b, 2.0);
    let curve = ValueCurve::Logarithmic { a, ln_b };
    let miss = (curve.eval(4.0) - 4.0).abs().max((curve.eval(2.0) - y).abs());
    if miss >= FIT_TOLERANCE {
        return Err(WeightingError::NoConvergence {
            y,
            lo,
            hi,
            residual: miss,
        });
    }
    Ok(curve)
}

/// Fits the value-weighting curve for `y`; see [`ValueCurve::fit`].
pub fn fit_curve(y: f64) -> Result<ValueCurve, WeightingError> {
    ValueCurve::fit(y)
}

/// Time-decay constant `γ ∈ (0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Gamma(f64);

impl Gamma {
    pub const NONE: Gamma = Gamma(1.0);

    pub fn new(value: f64) -> Result<Self, WeightingError> {
        if value > 0.0 && value <= 1.0 {
            Ok(Self(value))
        } else {
            Err(WeightingError::InvalidGamma(value))
        }
    }

    /// The γ for which a qualifier `horizon_days` old keeps `fraction` of its
    /// weight: `fraction^(1/horizon_days)`.
    pub fn from_fraction(fraction: f64, horizon_days: f64) -> Result<Self, WeightingError> {
        if !(horizon_days > 0.0) {
            return Err(WeightingError::InvalidGamma(f64::NAN));
        }
        Self::new(fraction.powf(1.0 / horizon_days))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `(1/20)^(1/30)`: a month-old qualifier keeps 5 % of its weight.
    pub fn heavy() -> Self {
        Self((1.0_f64 / 20.0).powf(1.0 / 30.0))
    }

    /// `(1/3)^(1/30)`: a month-old qualifier keeps a third of its weight.
    pub fn moderate() -> Self {
        Self((1.0_f64 / 3.0).powf(1.0 / 30.0))
    }
}

impl fmt::Display for Gamma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

fn parse_fraction(text: &str) -> Option<f64> {
    match text.split_once('/') {
        Some((num, den)) => {
            let num: f64 = num.trim().parse().ok()?;
            let den: f64 = den.trim().parse().ok()?;
            Some(num / den)
        }
        None => text.trim().parse().ok(),
    }
}

impl FromStr for Gamma {
    type Err = WeightingError;

    /// Accepts `0.964`, `1/3@30` (keep a third after 30 days), `0.05@30`, or
    /// one of the names `heavy`, `moderate`, `none`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "heavy" => return Ok(Self::heavy()),
            "moderate" => return Ok(Self::moderate()),
            "none" => return Ok(Self::NONE),
            _ => {}
        }
        let syntax = || WeightingError::GammaSyntax(s.to_string());
        match s.split_once('@') {
            Some((fraction, horizon)) => {
                let fraction = parse_fraction(fraction).ok_or_else(syntax)?;
                let horizon: f64 = horizon.trim().parse().map_err(|_| syntax())?;
                Self::from_fraction(fraction, horizon)
            }
            None => Self::new(parse_fraction(s).ok_or_else(syntax)?),
        }
    }
}

/// Value curve plus decay constant: everything the engine needs to weight
/// contributions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightingSpec {
    y: f64,
    gamma: Gamma,
    curve: ValueCurve,
}

impl WeightingSpec {
    pub fn new(y: f64, gamma: Gamma) -> Result<Self, WeightingError> {
        Ok(Self {
            y,
            gamma,
            curve: ValueCurve::fit(y)?,
        })
    }

    /// Linear value weighting with the given decay.
    pub fn linear(gamma: Gamma) -> Self {
        Self {
            y: 2.0,
            gamma,
            curve: ValueCurve::Linear,
        }
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn gamma(&self) -> Gamma {
        self.gamma
    }

    pub fn curve(&self) -> &ValueCurve {
        &self.curve
    }

    pub fn apply_curve(&self, x: f64) -> Result<f64, WeightingError> {
        self.curve.apply(x)
    }

    pub fn time_weight(&self, elapsed_days: u32) -> f64 {
        time_weight(elapsed_days, self.gamma)
    }
}

/// Applies the spec's curve to `x`.
pub fn apply_curve(spec: &WeightingSpec, x: f64) -> Result<f64, WeightingError> {
    spec.apply_curve(x)
}

/// Days between a qualifier and the evaluation reference day.
pub fn time_elapsed(day_of_qualifier: u32, reference_day: u32) -> Result<u32, WeightingError> {
    reference_day
        .checked_sub(day_of_qualifier)
        .ok_or(WeightingError::FutureQualifier {
            day: day_of_qualifier,
            reference_day,
        })
}

/// `α = γ^TE`.
pub fn time_weight(elapsed_days: u32, gamma: Gamma) -> f64 {
    if elapsed_days == 0 || gamma.0 == 1.0 {
        1.0
    } else {
        gamma.0.powf(f64::from(elapsed_days))
    }
}

/// Divides each weight by the total so the result sums to one.
pub fn normalize_weights(weights: &[f64]) -> Result<Vec<f64>, WeightingError> {
    if let Some(&bad) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(WeightingError::NegativeWeight(bad));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(WeightingError::ZeroWeights);
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn linear_at_two() {
        let curve = fit_curve(2.0).unwrap();
        assert_eq!(curve, ValueCurve::Linear);
        let spec = WeightingSpec::new(2.0, Gamma::NONE).unwrap();
        assert_eq!(apply_curve(&spec, 3.1).unwrap(), 3.1);
    }

    #[test]
    fn exponential_closed_form() {
        let curve = fit_curve(0.75).unwrap();
        let (a, b, c) = curve.params();
        assert!(close(a, 0.225, 1e-12));
        assert!(close(b, (13.0_f64 / 3.0).ln() / 2.0, 1e-12));
        assert!(close(b, 0.73317, 1e-5));
        assert!(close(c, -0.225, 1e-12));
        assert!(close(curve.eval(2.0), 0.75, 1e-12));
        assert!(close(curve.eval(4.0), 4.0, 1e-12));
        assert_eq!(curve.kind(), CurveKind::Exponential);
    }

    #[test]
    fn logarithmic_matches_bisection_oracle() {
        // Plain bisection on b itself over (0, 1e6), independent of the
        // ln(b) parameterization used by the fit.
        let y = 3.25;
        let g = |b: f64| y * (4.0 * b + 1.0).ln() / (2.0 * b + 1.0).ln() - 4.0;
        let (mut lo, mut hi) = (1e-12, 1e6);
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        let b_oracle = 0.5 * (lo + hi);
        let a_oracle = y / (2.0 * b_oracle + 1.0).ln();

        let curve = fit_curve(3.25).unwrap();
        let (a, b, c) = curve.params();
        assert!(close(b, b_oracle, 1e-8 * b_oracle), "{b} vs {b_oracle}");
        assert!(close(a, a_oracle, 1e-8), "{a} vs {a_oracle}");
        assert_eq!(c, 0.0);
        assert!(close(a * (2.0 * b + 1.0).ln(), 3.25, 1e-9));
        assert!(close(a * (4.0 * b + 1.0).ln(), 4.0, 1e-9));
        assert_eq!(curve.apply(0.0).unwrap(), 0.0);
    }

    #[test]
    fn extreme_y_values_fit() {
        for y in [1e-6, 0.01, 1.999_999, 2.000_001, 3.99, 3.999_999] {
            let curve = fit_curve(y).unwrap();
            assert!(close(curve.eval(0.0), 0.0, 1e-9), "y={y}");
            assert!(close(curve.eval(2.0), y, 1e-9), "y={y}");
            assert!(close(curve.eval(4.0), 4.0, 1e-9), "y={y}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        for y in [0.0, 4.0, -1.0, f64::NAN, 5.0] {
            assert!(matches!(fit_curve(y), Err(WeightingError::InvalidY(_))));
        }
        let spec = WeightingSpec::new(3.0, Gamma::NONE).unwrap();
        assert!(spec.apply_curve(4.01).is_err());
        assert!(spec.apply_curve(-0.01).is_err());
        assert!(Gamma::new(0.0).is_err());
        assert!(Gamma::new(1.01).is_err());
    }

    #[test]
    fn elapsed_days() {
        assert_eq!(time_elapsed(0, 30).unwrap(), 30);
        assert_eq!(time_elapsed(15, 15).unwrap(), 0);
        assert_eq!(time_elapsed(10, 25).unwrap(), 15);
        assert_eq!(
            time_elapsed(26, 25).unwrap_err(),
            WeightingError::FutureQualifier {
                day: 26,
                reference_day: 25
            }
        );
    }

    #[test]
    fn decay_constants() {
        assert!(close(time_weight(30, Gamma::moderate()), 1.0 / 3.0, 1e-12));
        assert!(close(time_weight(30, Gamma::heavy()), 0.05, 1e-12));
        for te in [0, 1, 30, 10_000] {
            assert_eq!(time_weight(te, Gamma::NONE), 1.0);
        }
        assert_eq!(time_weight(0, Gamma::heavy()), 1.0);
    }

    #[test]
    fn gamma_syntax() {
        let parsed: Gamma = "1/3@30".parse().unwrap();
        assert_eq!(parsed, Gamma::moderate());
        let parsed: Gamma = "0.05@30".parse().unwrap();
        assert!(close(parsed.value(), Gamma::heavy().value(), 1e-15));
        let parsed: Gamma = "1".parse().unwrap();
        assert_eq!(parsed, Gamma::NONE);
        assert!("abc".parse::<Gamma>().is_err());
        assert!("1/3@0".parse::<Gamma>().is_err());
        assert!("2".parse::<Gamma>().is_err());
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_weights(&[1.0; 4]).unwrap(), vec![0.25; 4]);
        assert_eq!(normalize_weights(&[2.0, 1.0, 1.0]).unwrap(), vec![0.5, 0.25, 0.25]);
        let w = normalize_weights(&[0.9, 0.3]).unwrap();
        assert!(close(w[0], 0.75, 1e-15) && close(w[1], 0.25, 1e-15));
        assert_eq!(normalize_weights(&[0.0, 0.0]), Err(WeightingError::ZeroWeights));
        assert_eq!(normalize_weights(&[]), Err(WeightingError::ZeroWeights));
        assert!(matches!(
            normalize_weights(&[1.0, -0.5]),
            Err(WeightingError::NegativeWeight(_))
        ));
    }
}

//! Lévy triplets with finite-activity parametric jump parts, path-class
//! classification and the standing-assumption checks.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::cost::CostSpec;
use crate::error::{AssumptionViolation, Error, Result};
use crate::quad::GaussLegendre;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Up,
    Down,
}

impl Side {
    pub fn sign(self) -> f64 {
        match self {
            Side::Up => 1.0,
            Side::Down => -1.0,
        }
    }
}

/// Shape of one jump term. Point-mass sizes are magnitudes; the sign comes
/// from the term's side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpKind {
    Exponential { decay: f64 },
    PointMass { size: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpTerm {
    pub side: Side,
    pub rate: f64,
    pub kind: JumpKind,
}

impl JumpTerm {
    pub fn exponential(side: Side, rate: f64, decay: f64) -> Self {
        Self {
            side,
            rate,
            kind: JumpKind::Exponential { decay },
        }
    }

    pub fn point_mass(side: Side, rate: f64, size: f64) -> Self {
        Self {
            side,
            rate,
            kind: JumpKind::PointMass { size },
        }
    }

    /// `int_{|z|<1} z nu(dz)` for this term.
    fn small_jump_mean(&self) -> f64 {
        let s = self.side.sign();
        match self.kind {
            JumpKind::PointMass { size } => {
                if size < 1.0 {
                    self.rate * s * size
                } else {
                    0.0
                }
            }
            JumpKind::Exponential { decay } => self.rate * s * truncated_mean(decay),
        }
    }

    /// `int (e^{theta z} - 1) nu(dz)`, infinite when the moment diverges.
    fn mgf_minus_one(&self, theta: f64) -> f64 {
        let t = theta * self.side.sign();
        match self.kind {
            JumpKind::PointMass { size } => self.rate * ((t * size).exp() - 1.0),
            JumpKind::Exponential { decay } => {
                if t >= decay {
                    f64::INFINITY
                } else {
                    self.rate * (decay / (decay - t) - 1.0)
                }
            }
        }
    }

    /// `int (1 - e^{i lam z}) nu(dz)`.
    fn char_one_minus(&self, lam: f64) -> Complex64 {
        let l = lam * self.side.sign();
        match self.kind {
            JumpKind::PointMass { size } => {
                self.rate * (Complex64::new(1.0, 0.0) - Complex64::new(0.0, l * size).exp())
            }
            JumpKind::Exponential { decay } => {
                let eta = Complex64::new(decay, 0.0);
                self.rate * (1.0 - eta / (eta - Complex64::new(0.0, l)))
            }
        }
    }
}

/// `int_0^1 u eta e^{-eta u} du`.
fn truncated_mean(eta: f64) -> f64 {
    (1.0 - (-eta).exp() * (1.0 + eta)) / eta
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JumpSpec {
    pub terms: Vec<JumpTerm>,
}

impl JumpSpec {
    pub fn new(terms: Vec<JumpTerm>) -> Self {
        Self { terms }
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.terms.iter().enumerate() {
            if !(t.rate.is_finite() && t.rate >= 0.0) {
                return Err(Error::InvalidModel(format!("jump term {i}: rate must be >= 0, got {}", t.rate)));
            }
            match t.kind {
                JumpKind::Exponential { decay } if !(decay.is_finite() && decay > 0.0) => {
                    return Err(Error::InvalidModel(format!("jump term {i}: decay must be > 0")));
                }
                JumpKind::PointMass { size } if !(size.is_finite() && size > 0.0) => {
                    return Err(Error::InvalidModel(format!(
                        "jump term {i}: point-mass size must be a positive magnitude"
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Terms with positive rate.
    pub fn active(&self) -> impl Iterator<Item = &JumpTerm> {
        self.terms.iter().filter(|t| t.rate > 0.0)
    }

    pub fn total_rate(&self) -> f64 {
        self.active().map(|t| t.rate).sum()
    }

    pub fn side_rate(&self, side: Side) -> f64 {
        self.active().filter(|t| t.side == side).map(|t| t.rate).sum()
    }

    pub fn side(&self, side: Side) -> JumpSpec {
        JumpSpec::new(self.active().filter(|t| t.side == side).copied().collect())
    }

    /// Supremum of the exponents `theta` with `int_{|z|>=1} e^{theta|z|} nu(dz) < inf`.
    pub fn moment_abscissa(&self) -> f64 {
        self.active()
            .filter_map(|t| match t.kind {
                JumpKind::Exponential { decay } => Some(decay),
                JumpKind::PointMass { .. } => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Expectation of `g(J)` under the normalised jump law, restricted to the
    /// given terms. Exponential terms use panel quadrature truncated where the
    /// density is below 1e-16 of its peak.
    pub fn expect_rate_weighted<F: Fn(f64) -> f64>(&self, g: F) -> f64 {
        let rule = GaussLegendre::g16();
        self.active()
            .map(|t| {
                let s = t.side.sign();
                t.rate
                    * match t.kind {
                        JumpKind::PointMass { size } => g(s * size),
                        JumpKind::Exponential { decay } => {
                            let top = 40.0 / decay;
                            rule.integrate_panels(0.0, top, 64, |u| decay * (-decay * u).exp() * g(s * u))
                        }
                    }
            })
            .sum()
    }
}

/// Lévy triplet `(gamma, sigma, Pi)` with `Pi` finite and parametric.
/// `gamma` follows the `1_{|z|<1}` compensation convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevyModel {
    pub gamma: f64,
    pub sigma: f64,
    pub jumps: JumpSpec,
}

/// Path regularity of the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathClass {
    UnboundedVariation,
    BoundedVariation { delta: f64 },
}

impl PathClass {
    pub fn delta(&self) -> Option<f64> {
        match self {
            PathClass::BoundedVariation { delta } => Some(*delta),
            PathClass::UnboundedVariation => None,
        }
    }
}

/// Case 2 holds iff the model has bounded variation with drift in `[0, alpha]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseTag {
    Case1,
    Case2,
}

impl LevyModel {
    pub fn new(gamma: f64, sigma: f64, jumps: JumpSpec) -> Result<Self> {
        let m = Self { gamma, sigma, jumps };
        m.validate()?;
        Ok(m)
    }

    pub fn brownian(gamma: f64, sigma: f64) -> Self {
        Self {
            gamma,
            sigma,
            jumps: JumpSpec::none(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() {
            return Err(Error::InvalidModel("gamma must be finite".into()));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::InvalidModel(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        self.jumps.validate()
    }

    /// `int_{(-1,1)\{0}} z Pi(dz)`.
    pub fn small_jump_mean(&self) -> f64 {
        self.jumps.active().map(JumpTerm::small_jump_mean).sum()
    }

    /// Drift of the continuous part once the compensator is absorbed:
    /// `gamma - int_{|z|<1} z Pi(dz)`. Equals `delta` for bounded variation.
    pub fn effective_drift(&self) -> f64 {
        self.gamma - self.small_jump_mean()
    }

    pub fn is_spectrally_negative(&self) -> bool {
        self.jumps.side_rate(Side::Up) == 0.0
    }

    /// `Psi(lam)` with `E e^{i lam X_t} = e^{-t Psi(lam)}`.
    pub fn characteristic_exponent(&self, lam: f64) -> Complex64 {
        let i = Complex64::new(0.0, 1.0);
        let mut psi = -i * self.gamma * lam + 0.5 * self.sigma * self.sigma * lam * lam;
        for t in self.jumps.active() {
            psi += t.char_one_minus(lam) + i * lam * t.small_jump_mean();
        }
        psi
    }

    /// Bounded-variation form `-i delta lam + int (1 - e^{i lam z}) Pi(dz)`.
    /// Only meaningful when `sigma == 0`.
    pub fn characteristic_exponent_bv(&self, lam: f64) -> Complex64 {
        let i = Complex64::new(0.0, 1.0);
        let mut psi = -i * self.effective_drift() * lam;
        for t in self.jumps.active() {
            psi += t.char_one_minus(lam);
        }
        psi
    }

    /// Cumulant `log E e^{theta X_1}`, `+inf` where the moment diverges.
    pub fn cumulant(&self, theta: f64) -> f64 {
        let mut k = self.effective_drift() * theta + 0.5 * self.sigma * self.sigma * theta * theta;
        for t in self.jumps.active() {
            k += t.mgf_minus_one(theta);
        }
        k
    }

    pub fn path_class(&self) -> PathClass {
        if self.sigma > 0.0 {
            PathClass::UnboundedVariation
        } else {
            PathClass::BoundedVariation {
                delta: self.effective_drift(),
            }
        }
    }

    pub fn classify(&self, alpha: f64) -> (PathClass, CaseTag) {
        let class = self.path_class();
        let tag = match class {
            PathClass::BoundedVariation { delta } if (0.0..=alpha).contains(&delta) => CaseTag::Case2,
            _ => CaseTag::Case1,
        };
        (class, tag)
    }
}

/// Full control-problem instance.
#[derive(Clone, Debug)]
pub struct ProblemSpec {
    pub model: LevyModel,
    pub cost: CostSpec,
    pub q: f64,
    pub beta: f64,
    pub alpha: f64,
}

impl ProblemSpec {
    pub fn new(model: LevyModel, cost: CostSpec, q: f64, beta: f64, alpha: f64) -> Result<Self> {
        model.validate()?;
        if !(q.is_finite() && q > 0.0) {
            return Err(Error::InvalidProblem(format!("q must be > 0, got {q}")));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidProblem(format!("alpha must be > 0, got {alpha}")));
        }
        if !beta.is_finite() {
            return Err(Error::InvalidProblem("beta must be finite".into()));
        }
        Ok(Self {
            model,
            cost,
            q,
            beta,
            alpha,
        })
    }

    pub fn classify(&self) -> (PathClass, CaseTag) {
        self.model.classify(self.alpha)
    }
}

/// Outcome of [`check_assumptions`] when every check passes.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub theta_bar: f64,
    pub moment_abscissa: f64,
    pub grid_points: usize,
    pub f_prime_limits: (f64, f64),
}

/// Checks the exponential-moment condition at `theta_bar` and samples the
/// cost invariants (monotone `f'`, polynomial growth, `f' ` integrates to
/// `f`) on `grid`.
pub fn check_assumptions(spec: &ProblemSpec, theta_bar: f64, grid: &[f64]) -> Result<AssumptionReport> {
    if grid.is_empty() || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(AssumptionViolation::BadGrid.into());
    }
    for (term, t) in spec.model.jumps.terms.iter().enumerate() {
        if let JumpKind::Exponential { decay } = t.kind {
            if t.rate > 0.0 && theta_bar >= decay {
                return Err(AssumptionViolation::ExponentialMoment { theta_bar, term, decay }.into());
            }
        }
    }
    let cost = &spec.cost;
    let growth = cost.growth;
    for &x in grid {
        let v = cost.f(x);
        let bound = growth.bound(x);
        if v.abs() > bound {
            return Err(AssumptionViolation::Growth { x, value: v, bound }.into());
        }
    }
    let rule = GaussLegendre::g16();
    for w in grid.windows(2) {
        let (x0, x1) = (w[0], w[1]);
        let (d0, d1) = (cost.f_prime(x0), cost.f_prime(x1));
        if d1 < d0 - 1e-10 * (1.0 + d0.abs()) {
            return Err(AssumptionViolation::Convexity { x0, x1, d0, d1 }.into());
        }
        let diff = cost.f(x1) - cost.f(x0);
        let integral = rule.integrate_panels(x0, x1, 4, |x| cost.f_prime(x));
        if (diff - integral).abs() > 1e-8 * (1.0 + cost.f(x0).abs() + cost.f(x1).abs()) {
            return Err(AssumptionViolation::Derivative { x0, x1, diff, integral }.into());
        }
    }
    Ok(AssumptionReport {
        theta_bar,
        moment_abscissa: spec.model.jumps.moment_abscissa(),
        grid_points: grid.len(),
        f_prime_limits: cost.f_prime_limits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn two_sided_exp(eta: f64) -> LevyModel {
        LevyModel::new(
            0.3,
            0.0,
            JumpSpec::new(vec![
                JumpTerm::exponential(Side::Up, 1.0, eta),
                JumpTerm::exponential(Side::Down, 2.0, eta),
            ]),
        )
        .unwrap()
    }

    #[test]
    fn exponent_pure_gaussian() {
        let m = LevyModel::brownian(0.0, 1.0);
        let psi = m.characteristic_exponent(2.0);
        assert_abs_diff_eq!(psi.re, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(psi.im, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn exponent_pure_drift() {
        let psi = LevyModel::brownian(1.0, 0.0).characteristic_exponent(1.0);
        assert_abs_diff_eq!(psi.re, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(psi.im, -1.0, epsilon = 1e-15);
    }

    #[test]
    fn exponent_unit_point_mass_is_uncompensated() {
        let m = LevyModel::new(0.0, 0.0, JumpSpec::new(vec![JumpTerm::point_mass(Side::Up, 1.0, 1.0)])).unwrap();
        let psi = m.characteristic_exponent(PI);
        assert_abs_diff_eq!(psi.re, 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(psi.im, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn exponent_matches_direct_quadrature_for_exponential_terms() {
        let m = LevyModel::new(
            0.2,
            0.5,
            JumpSpec::new(vec![
                JumpTerm::exponential(Side::Up, 1.5, 2.0),
                JumpTerm::exponential(Side::Down, 0.7, 0.8),
            ]),
        )
        .unwrap();
        let lam = 1.3;
        let rule = GaussLegendre::new(20);
        let mut direct = Complex64::new(0.5 * 0.25 * lam * lam, -0.2 * lam);
        for (rate, eta, s) in [(1.5, 2.0, 1.0), (0.7, 0.8, -1.0)] {
            for (a, b) in [(0.0, 1.0), (1.0, 80.0)] {
                let panels = if a == 0.0 { 4 } else { 200 };
                let re = rule.integrate_panels(a, b, panels, |u| {
                    let z: f64 = s * u;
                    rate * eta * (-eta * u).exp() * (1.0 - (lam * z).cos())
                });
                let im = rule.integrate_panels(a, b, panels, |u| {
                    let z: f64 = s * u;
                    let comp = if u < 1.0 { lam * z } else { 0.0 };
                    rate * eta * (-eta * u).exp() * (-(lam * z).sin() + comp)
                });
                direct += Complex64::new(re, im);
            }
        }
        let psi = m.characteristic_exponent(lam);
        assert!((psi - direct).norm() < 1e-9, "{psi} vs {direct}");
    }

    #[test]
    fn classify_examples() {
        let m = LevyModel::new(
            2.0,
            0.0,
            JumpSpec::new(vec![
                JumpTerm::point_mass(Side::Up, 1.0, 0.5),
                JumpTerm::point_mass(Side::Down, 1.0, 0.5),
            ]),
        )
        .unwrap();
        assert_eq!(m.classify(1.0), (PathClass::BoundedVariation { delta: 2.0 }, CaseTag::Case1));
        assert_eq!(m.classify(3.0), (PathClass::BoundedVariation { delta: 2.0 }, CaseTag::Case2));
        let g = LevyModel { sigma: 1.0, ..m };
        assert_eq!(g.classify(3.0), (PathClass::UnboundedVariation, CaseTag::Case1));
    }

    #[test]
    fn classify_ignores_zero_rate_terms() {
        let mut m = LevyModel::new(0.5, 0.0, JumpSpec::new(vec![JumpTerm::exponential(Side::Down, 1.0, 2.0)])).unwrap();
        let before = m.classify(1.0);
        m.jumps.terms.push(JumpTerm::point_mass(Side::Up, 0.0, 0.3));
        assert_eq!(m.classify(1.0), before);
    }

    #[test]
    fn assumption_moment_condition() {
        let spec = ProblemSpec::new(two_sided_exp(3.0), CostSpec::quadratic(1.0, 0.0), 1.0, 1.0, 1.0).unwrap();
        let grid: Vec<f64> = (-50..=50).map(|k| k as f64 * 0.1).collect();
        let ok = check_assumptions(&spec, 1.0, &grid).unwrap();
        assert_eq!(ok.f_prime_limits, (f64::NEG_INFINITY, f64::INFINITY));
        let err = check_assumptions(&spec, 3.0, &grid).unwrap_err();
        assert!(matches!(err, Error::Assumption(AssumptionViolation::ExponentialMoment { .. })));
    }

    #[test]
    fn assumption_flags_nonconvex_cost() {
        let bad = CostSpec::custom(
            "concave",
            |x: f64| -x * x,
            |x: f64| -2.0 * x,
            None,
            crate::cost::Growth { k1: 1.0, k2: 2.0, n: 2 },
            (f64::INFINITY, f64::NEG_INFINITY),
        );
        let spec = ProblemSpec::new(LevyModel::brownian(0.0, 1.0), bad, 1.0, 1.0, 1.0).unwrap();
        let err = check_assumptions(&spec, 1.0, &[-1.0, 0.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::Assumption(AssumptionViolation::Convexity { .. })));
        assert!(matches!(
            check_assumptions(&spec, 1.0, &[1.0, 0.0]).unwrap_err(),
            Error::Assumption(AssumptionViolation::BadGrid)
        ));
    }

    #[test]
    fn rejects_invalid_models() {
        assert!(LevyModel::new(0.0, -1.0, JumpSpec::none()).is_err());
        assert!(LevyModel::new(0.0, 1.0, JumpSpec::new(vec![JumpTerm::exponential(Side::Up, 1.0, 0.0)])).is_err());
        assert!(LevyModel::new(0.0, 1.0, JumpSpec::new(vec![JumpTerm::point_mass(Side::Up, -1.0, 1.0)])).is_err());
    }

    proptest! {
        #[test]
        fn exponent_is_hermitian(lam in -20.0f64..20.0, gamma in -3.0f64..3.0, sigma in 0.0f64..2.0,
                                 r1 in 0.0f64..3.0, eta in 0.2f64..5.0, z in 0.05f64..3.0) {
            let m = LevyModel::new(gamma, sigma, JumpSpec::new(vec![
                JumpTerm::exponential(Side::Down, r1, eta),
                JumpTerm::point_mass(Side::Up, 1.0, z),
            ])).unwrap();
            let a = m.characteristic_exponent(lam);
            let b = m.characteristic_exponent(-lam).conj();
            prop_assert!((a - b).norm() < 1e-12 * (1.0 + a.norm()));
        }

        #[test]
        fn bv_form_matches_compensated_form(lam in -20.0f64..20.0, gamma in -3.0f64..3.0,
                                            r1 in 0.0f64..3.0, eta in 0.2f64..5.0, z in 0.05f64..3.0) {
            let m = LevyModel::new(gamma, 0.0, JumpSpec::new(vec![
                JumpTerm::exponential(Side::Down, r1, eta),
                JumpTerm::exponential(Side::Up, 0.5, eta + 1.0),
                JumpTerm::point_mass(Side::Up, 1.0, z),
            ])).unwrap();
            let a = m.characteristic_exponent(lam);
            let b = m.characteristic_exponent_bv(lam);
            prop_assert!((a - b).norm() < 1e-12 * (1.0 + a.norm()));
        }
    }
}

//! Spectrally negative machinery: Laplace exponents, their right inverses
//! and the q-scale functions `W^{(q)}` (shift 0) and `WW^{(q)}` (the scale
//! function of `X - alpha t`, shift `alpha`).
//!
//! When every downward jump term is exponential the transform
//! `1 / (psi(theta) - a theta - q)` is rational and the scale function is
//! an exact exponential sum obtained by partial fractions. Otherwise it is
//! inverted numerically with a shifted fixed-Talbot contour.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::levy_model::{JumpKind, JumpSpec, JumpTerm, LevyModel, Side};

/// Spectrally negative Lévy process in uncompensated form:
/// `psi(theta) = drift theta + sigma^2 theta^2 / 2 + sum lambda (E e^{-theta |J|} - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnModel {
    pub sigma: f64,
    pub drift: f64,
    pub down_jumps: JumpSpec,
}

impl SnModel {
    pub fn new(sigma: f64, drift: f64, down_jumps: JumpSpec) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite() && drift.is_finite()) {
            return Err(Error::InvalidModel("sigma must be >= 0 and drift finite".into()));
        }
        down_jumps.validate()?;
        if down_jumps.active().any(|t| t.side != Side::Down) {
            return Err(Error::InvalidModel("spectrally negative model has an upward jump term".into()));
        }
        let m = Self {
            sigma,
            drift,
            down_jumps,
        };
        if m.sigma == 0.0 && m.drift <= 0.0 {
            return Err(Error::InvalidModel(
                "bounded-variation spectrally negative model needs a positive drift".into(),
            ));
        }
        Ok(m)
    }

    /// Brownian motion with drift.
    pub fn brownian(drift: f64, sigma: f64) -> Result<Self> {
        Self::new(sigma, drift, JumpSpec::none())
    }

    /// Splits a model into its spectrally negative part and its upward jumps.
    pub fn split(model: &LevyModel) -> Result<(SnModel, JumpSpec)> {
        model.validate()?;
        let sn = SnModel::new(model.sigma, model.effective_drift(), model.jumps.side(Side::Down))?;
        Ok((sn, model.jumps.side(Side::Up)))
    }

    /// The model as a Lévy triplet with the `1_{|z|<1}` compensation convention.
    pub fn to_levy(&self) -> LevyModel {
        let m = LevyModel {
            gamma: 0.0,
            sigma: self.sigma,
            jumps: self.down_jumps.clone(),
        };
        LevyModel {
            gamma: self.drift + m.small_jump_mean(),
            ..m
        }
    }

    pub fn has_unbounded_variation(&self) -> bool {
        self.sigma > 0.0
    }

    /// `psi(theta)`, finite for `theta` above minus the smallest decay.
    pub fn laplace_exponent(&self, theta: f64) -> f64 {
        self.laplace_exponent_c(Complex64::new(theta, 0.0)).re
    }

    pub fn laplace_exponent_prime(&self, theta: f64) -> f64 {
        let mut d = self.drift + self.sigma * self.sigma * theta;
        for t in self.down_jumps.active() {
            d += match t.kind {
                JumpKind::Exponential { decay } => -t.rate * decay / ((decay + theta) * (decay + theta)),
                JumpKind::PointMass { size } => -t.rate * size * (-theta * size).exp(),
            };
        }
        d
    }

    pub fn laplace_exponent_c(&self, s: Complex64) -> Complex64 {
        let mut v = s * self.drift + s * s * (0.5 * self.sigma * self.sigma);
        for t in self.down_jumps.active() {
            v += match t.kind {
                JumpKind::Exponential { decay } => t.rate * (decay / (s + decay) - 1.0),
                JumpKind::PointMass { size } => t.rate * ((-s * size).exp() - 1.0),
            };
        }
        v
    }

    fn is_rational(&self) -> bool {
        self.down_jumps
            .active()
            .all(|t| matches!(t.kind, JumpKind::Exponential { .. }))
    }

    fn total_rate(&self) -> f64 {
        self.down_jumps.total_rate()
    }
}

pub fn laplace_exponent(model: &SnModel, theta: f64) -> f64 {
    model.laplace_exponent(theta)
}

/// Largest root of `psi(theta) - alpha_shift theta = q`.
pub fn right_inverse(model: &SnModel, q: f64, alpha_shift: f64) -> Result<f64> {
    if !(q > 0.0) {
        return Err(Error::InvalidProblem("right inverse needs q > 0".into()));
    }
    let g = |t: f64| model.laplace_exponent(t) - alpha_shift * t - q;
    let dg = |t: f64| model.laplace_exponent_prime(t) - alpha_shift;
    let tol = 1e-12 * q.max(1.0);
    let mut hi = q.max(1.0);
    let mut expansions = 0;
    while g(hi) <= 0.0 {
        hi *= 2.0;
        expansions += 1;
        if expansions > 200 {
            return Err(Error::NonConvergence {
                what: "right inverse bracket",
                iterations: expansions,
                residual: g(hi),
            });
        }
    }
    // g is convex with g(0) = -q < 0 < g(hi): Newton from the right
    // decreases monotonically to the largest root.
    let mut lo = 0.0;
    let mut t = hi;
    for it in 0..200 {
        let v = g(t);
        if v.abs() <= tol {
            return Ok(t);
        }
        if v > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        let d = dg(t);
        let mut next = t - v / d;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if next == t {
            // Rounding floor reached: accept if within a few ulps of tolerance.
            if v.abs() <= 16.0 * tol {
                return Ok(t);
            }
            return Err(Error::NonConvergence {
                what: "right inverse",
                iterations: it,
                residual: v,
            });
        }
        t = next;
    }
    Err(Error::NonConvergence {
        what: "right inverse",
        iterations: 200,
        residual: g(t),
    })
}

/// `sum_j coeffs[j] x^j e^{root x}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpTerm {
    pub root: Complex64,
    pub coeffs: Vec<Complex64>,
}

#[derive(Debug, Clone, PartialEq)]
enum Repr {
    Rational(Vec<ExpTerm>),
    Numeric { model: SnModel, shift: f64 },
}

/// Number of Talbot nodes; double precision saturates around here.
const TALBOT_M: usize = 28;
const TALBOT_CHECK_M: usize = 20;

/// `W^{(q)}` of the process `X - alpha_shift t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleFn {
    pub q: f64,
    pub alpha_shift: f64,
    /// Largest root of `psi(theta) - alpha_shift theta = q`.
    pub root: f64,
    repr: Repr,
    w0: f64,
    w0_prime: f64,
}

impl ScaleFn {
    /// Exact exponential sum when the transform is rational, numerical
    /// inversion otherwise.
    pub fn new(model: &SnModel, q: f64, alpha_shift: f64) -> Result<Self> {
        if model.is_rational() {
            Self::rational(model, q, alpha_shift)
        } else {
            Self::numeric(model, q, alpha_shift)
        }
    }

    fn base(model: &SnModel, q: f64, alpha_shift: f64) -> Result<(f64, f64, f64)> {
        let root = right_inverse(model, q, alpha_shift)?;
        let (w0, w0_prime) = if model.has_unbounded_variation() {
            (0.0, 2.0 / (model.sigma * model.sigma))
        } else {
            let d = model.drift - alpha_shift;
            if d <= 0.0 {
                return Err(Error::Unsupported(format!(
                    "scale function of a bounded-variation process with drift {d} <= 0"
                )));
            }
            (1.0 / d, (q + model.total_rate()) / (d * d))
        };
        Ok((root, w0, w0_prime))
    }

    pub fn numeric(model: &SnModel, q: f64, alpha_shift: f64) -> Result<Self> {
        let (root, w0, w0_prime) = Self::base(model, q, alpha_shift)?;
        Ok(Self {
            q,
            alpha_shift,
            root,
            repr: Repr::Numeric {
                model: model.clone(),
                shift: root,
            },
            w0,
            w0_prime,
        })
    }

    pub fn rational(model: &SnModel, q: f64, alpha_shift: f64) -> Result<Self> {
        if !model.is_rational() {
            return Err(Error::Unsupported("transform is not rational (point-mass jumps)".into()));
        }
        let (root, w0, w0_prime) = Self::base(model, q, alpha_shift)?;
        let (num, den) = transform_polynomials(model, q, alpha_shift);
        let terms = partial_fractions(&num, &den)?;
        Ok(Self {
            q,
            alpha_shift,
            root,
            repr: Repr::Rational(terms),
            w0,
            w0_prime,
        })
    }

    pub fn is_rational(&self) -> bool {
        matches!(self.repr, Repr::Rational(_))
    }

    /// Terms of the exponential-sum representation, when there is one.
    pub fn terms(&self) -> Option<&[ExpTerm]> {
        match &self.repr {
            Repr::Rational(t) => Some(t),
            Repr::Numeric { .. } => None,
        }
    }

    /// `(W(x), W'(x))`; zero for `x < 0`, right derivative at 0.
    pub fn eval(&self, x: f64) -> (f64, f64) {
        if x < 0.0 {
            return (0.0, 0.0);
        }
        if x == 0.0 {
            return (self.w0, self.w0_prime);
        }
        match &self.repr {
            Repr::Rational(terms) => {
                let mut v = Complex64::new(0.0, 0.0);
                let mut d = Complex64::new(0.0, 0.0);
                for t in terms {
                    let e = (t.root * x).exp();
                    let mut p = Complex64::new(0.0, 0.0);
                    let mut dp = Complex64::new(0.0, 0.0);
                    for (j, c) in t.coeffs.iter().enumerate().rev() {
                        p = p * x + c;
                        if j > 0 {
                            dp = dp * x + c * j as f64;
                        }
                    }
                    v += e * p;
                    d += e * (t.root * p + dp);
                }
                (v.re, d.re)
            }
            Repr::Numeric { model, shift } => self.talbot(model, *shift, x, TALBOT_M),
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        self.eval(x).0
    }

    pub fn derivative(&self, x: f64) -> f64 {
        self.eval(x).1
    }

    /// Like [`eval`](Self::eval), but numerical inversions are checked
    /// against a coarser contour and fail if they disagree by more than
    /// 1e-8 relative.
    pub fn eval_checked(&self, x: f64) -> Result<(f64, f64)> {
        let out = self.eval(x);
        if let Repr::Numeric { model, shift } = &self.repr {
            if x > 0.0 {
                let coarse = self.talbot(model, *shift, x, TALBOT_CHECK_M);
                let err = ((out.0 - coarse.0) / out.0.abs().max(1e-300))
                    .abs()
                    .max(((out.1 - coarse.1) / out.1.abs().max(1e-300)).abs());
                if !(err <= 1e-8) {
                    return Err(Error::Accuracy {
                        what: "scale function inversion",
                        achieved: err,
                        target: 1e-8,
                    });
                }
            }
        }
        Ok(out)
    }

    /// Fixed-Talbot inversion of `F(s + c)` scaled back by `e^{c x}`.
    fn talbot(&self, model: &SnModel, c: f64, x: f64, m: usize) -> (f64, f64) {
        let a = self.alpha_shift;
        let q = self.q;
        let w0 = self.w0;
        let f = |s: Complex64| {
            let s = s + c;
            let fw = 1.0 / (model.laplace_exponent_c(s) - s * a - q);
            (fw, s * fw - w0)
        };
        let mf = m as f64;
        let r = 2.0 * mf / (5.0 * x);
        let (f0w, f0d) = f(Complex64::new(r, 0.0));
        let mut sw = 0.5 * (f0w * (r * x).exp()).re;
        let mut sd = 0.5 * (f0d * (r * x).exp()).re;
        for k in 1..m {
            let th = k as f64 * PI / mf;
            let cot = th.cos() / th.sin();
            let s = Complex64::new(r * th * cot, r * th);
            let sigma = th + (th * cot - 1.0) * cot;
            let (fw, fd) = f(s);
            let z = (s * x).exp() * Complex64::new(1.0, sigma);
            sw += (z * fw).re;
            sd += (z * fd).re;
        }
        let scale = r / mf * (c * x).exp();
        (sw * scale, sd * scale)
    }
}

/// `W^{(q)}` (shift 0) or `WW^{(q)}` (shift `alpha`) at `x`, with derivative.
pub fn scale_w(model: &SnModel, q: f64, alpha_shift: f64, x: f64) -> Result<(f64, f64)> {
    ScaleFn::new(model, q, alpha_shift)?.eval_checked(x)
}

// ---- polynomial helpers (coefficients in increasing degree) ----

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add(a: &mut Vec<f64>, b: &[f64]) {
    if a.len() < b.len() {
        a.resize(b.len(), 0.0);
    }
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn horner(p: &[f64], z: Complex64) -> Complex64 {
    p.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, c| acc * z + c)
}

fn horner_d(p: &[f64], z: Complex64) -> (Complex64, Complex64) {
    let mut v = Complex64::new(0.0, 0.0);
    let mut d = Complex64::new(0.0, 0.0);
    for c in p.iter().rev() {
        d = d * z + v;
        v = v * z + c;
    }
    (v, d)
}

/// `(N, P)` with `1 / (psi(theta) - a theta - q) = N(theta) / P(theta)`;
/// exponential terms with equal decay are merged first.
fn transform_polynomials(model: &SnModel, q: f64, a: f64) -> (Vec<f64>, Vec<f64>) {
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for t in model.down_jumps.active() {
        if let JumpKind::Exponential { decay } = t.kind {
            match merged.iter_mut().find(|(e, _)| *e == decay) {
                Some((_, l)) => *l += t.rate,
                None => merged.push((decay, t.rate)),
            }
        }
    }
    let mut num = vec![1.0];
    for (eta, _) in &merged {
        num = poly_mul(&num, &[*eta, 1.0]);
    }
    let base = [-q, model.drift - a, 0.5 * model.sigma * model.sigma];
    let mut den = poly_mul(&base, &num);
    for (i, (_, lam)) in merged.iter().enumerate() {
        let mut others = vec![0.0, -lam];
        for (j, (eta, _)) in merged.iter().enumerate() {
            if j != i {
                others = poly_mul(&others, &[*eta, 1.0]);
            }
        }
        poly_add(&mut den, &others);
    }
    while den.len() > 1 && *den.last().unwrap() == 0.0 {
        den.pop();
    }
    (num, den)
}

fn polynomial_roots(p: &[f64]) -> Vec<Complex64> {
    let n = p.len() - 1;
    let lead = p[n];
    let mut c = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        c[(i, i - 1)] = 1.0;
    }
    for i in 0..n {
        c[(i, n - 1)] = -p[i] / lead;
    }
    let mut roots: Vec<Complex64> = c
        .complex_eigenvalues()
        .iter()
        .map(|z| Complex64::new(z.re, z.im))
        .collect();
    for r in roots.iter_mut() {
        for _ in 0..8 {
            let (v, d) = horner_d(p, *r);
            if d.norm() == 0.0 {
                break;
            }
            let step = v / d;
            let cand = *r - step;
            // Near a multiple root Newton can be thrown far off; keep only improvements.
            if horner(p, cand).norm() >= v.norm() {
                break;
            }
            *r = cand;
            if step.norm() <= 1e-16 * r.norm().max(1.0) {
                break;
            }
        }
    }
    roots
}

/// Taylor coefficients of `p` at `z`, orders `0..k`.
fn taylor_at(p: &[f64], z: Complex64, k: usize) -> Vec<Complex64> {
    let mut work: Vec<Complex64> = p.iter().map(|c| Complex64::new(*c, 0.0)).collect();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        if work.is_empty() {
            out.push(Complex64::new(0.0, 0.0));
            continue;
        }
        // Synthetic division by (theta - z): remainder is the next coefficient.
        let mut acc = Complex64::new(0.0, 0.0);
        let mut quot = vec![Complex64::new(0.0, 0.0); work.len().saturating_sub(1)];
        for i in (0..work.len()).rev() {
            acc = acc * z + work[i];
            if i > 0 {
                quot[i - 1] = acc;
            }
        }
        out.push(acc);
        work = quot;
    }
    out
}

/// Inverse Laplace transform of `N / P` (`deg N < deg P`) as exponential
/// terms, grouping numerically coincident roots into polynomial factors.
fn partial_fractions(num: &[f64], den: &[f64]) -> Result<Vec<ExpTerm>> {
    let lead = *den.last().unwrap();
    let roots = polynomial_roots(den);
    let mut clusters: Vec<(Complex64, usize)> = Vec::new();
    for r in roots {
        match clusters
            .iter_mut()
            .find(|(c, _)| (*c - r).norm() <= 1e-6 * c.norm().max(1.0))
        {
            Some((c, m)) => {
                *c = (*c * *m as f64 + r) / (*m as f64 + 1.0);
                *m += 1;
            }
            None => clusters.push((r, 1)),
        }
    }
    let mut terms = Vec::with_capacity(clusters.len());
    for (i, &(r, m)) in clusters.iter().enumerate() {
        if m == 1 {
            let (_, d) = horner_d(den, r);
            terms.push(ExpTerm {
                root: r,
                coeffs: vec![horner(num, r) / d],
            });
            continue;
        }
        // Q = lead * prod_{other clusters} (theta - s)^{m_s}, expanded in (theta - r).
        let mut qser = vec![Complex64::new(0.0, 0.0); m];
        qser[0] = Complex64::new(lead, 0.0);
        for (j, &(s, ms)) in clusters.iter().enumerate() {
            if j == i {
                continue;
            }
            for _ in 0..ms {
                // multiply by ((theta - r) + (r - s))
                let c = r - s;
                for k in (0..m).rev() {
                    let prev = if k > 0 { qser[k - 1] } else { Complex64::new(0.0, 0.0) };
                    qser[k] = qser[k] * c + prev;
                }
            }
        }
        let nser = taylor_at(num, r, m);
        // series division N / Q
        let mut ser = vec![Complex64::new(0.0, 0.0); m];
        for k in 0..m {
            let mut acc = nser[k];
            for j in 0..k {
                acc -= ser[j] * qser[k - j];
            }
            ser[k] = acc / qser[0];
        }
        // coefficient of (theta - r)^{-k} is ser[m - k]; its inverse is x^{k-1} / (k-1)! e^{r x}
        let mut coeffs = vec![Complex64::new(0.0, 0.0); m];
        let mut fact = 1.0;
        for k in 1..=m {
            if k > 1 {
                fact *= (k - 1) as f64;
            }
            coeffs[k - 1] = ser[m - k] / fact;
        }
        terms.push(ExpTerm { root: r, coeffs });
    }
    if terms.iter().any(|t| t.coeffs.iter().any(|c| !c.re.is_finite() || !c.im.is_finite())) {
        return Err(Error::NonConvergence {
            what: "partial fractions",
            iterations: 0,
            residual: f64::NAN,
        });
    }
    Ok(terms)
}

/// Down-exponential jump term helper used in examples and tests.
pub fn down_exponential(rate: f64, decay: f64) -> JumpTerm {
    JumpTerm::exponential(Side::Down, rate, decay)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::GaussLegendre;

    fn sq() -> SnModel {
        SnModel::brownian(0.0, 2f64.sqrt()).unwrap()
    }

    #[test]
    fn laplace_exponent_examples() {
        assert!((laplace_exponent(&sq(), 3.0) - 9.0).abs() < 1e-12);
        let m = SnModel::brownian(1.0, 2f64.sqrt()).unwrap();
        assert!((laplace_exponent(&m, 1.0) - 2.0).abs() < 1e-12);
        let j = SnModel::new(0.0, 1.0, JumpSpec::new(vec![down_exponential(1.0, 2.0)])).unwrap();
        assert!((laplace_exponent(&j, 1.0) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn right_inverse_examples() {
        assert!((right_inverse(&sq(), 4.0, 0.0).unwrap() - 2.0).abs() < 1e-12);
        let m = SnModel::brownian(1.0, 2f64.sqrt()).unwrap();
        assert!((right_inverse(&m, 2.0, 0.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((right_inverse(&sq(), 2.0, 1.0).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sinh_scale_function() {
        let w = ScaleFn::new(&sq(), 1.0, 0.0).unwrap();
        assert!(w.is_rational());
        for x in [0.1, 1.0, 5.0] {
            let (v, d) = w.eval(x);
            assert!((v - x.sinh()).abs() < 1e-13 * x.sinh().max(1.0));
            assert!((d - x.cosh()).abs() < 1e-13 * x.cosh());
        }
        assert_eq!(w.eval(-0.5), (0.0, 0.0));
        assert_eq!(w.value(0.0), 0.0);
    }

    #[test]
    fn numeric_inversion_matches_rational() {
        let models = [
            sq(),
            SnModel::new(0.5, 0.3, JumpSpec::new(vec![down_exponential(1.0, 2.0), down_exponential(0.5, 5.0)])).unwrap(),
            SnModel::new(0.0, 2.0, JumpSpec::new(vec![down_exponential(1.5, 1.0)])).unwrap(),
        ];
        for m in &models {
            for a in [0.0, 0.5] {
                let r = ScaleFn::rational(m, 0.8, a).unwrap();
                let n = ScaleFn::numeric(m, 0.8, a).unwrap();
                for k in 1..=40 {
                    let x = k as f64 * 0.25;
                    let (rv, rd) = r.eval(x);
                    let (nv, nd) = n.eval_checked(x).unwrap();
                    assert!(((rv - nv) / rv).abs() < 1e-8, "{m:?} a={a} x={x}: {rv} {nv}");
                    assert!(((rd - nd) / rd).abs() < 1e-8, "{m:?} a={a} x={x}: {rd} {nd}");
                }
            }
        }
    }

    #[test]
    fn transform_identity() {
        let m = SnModel::new(0.7, 0.2, JumpSpec::new(vec![down_exponential(2.0, 3.0)])).unwrap();
        let w = ScaleFn::new(&m, 1.5, 0.0).unwrap();
        for th in [w.root + 1.0, w.root + 2.0] {
            let g = GaussLegendre::g16();
            let lap = g.integrate_panels(0.0, 60.0, 240, |x| (-th * x).exp() * w.value(x));
            let exact = 1.0 / (m.laplace_exponent(th) - 1.5);
            assert!(((lap - exact) / exact).abs() < 1e-8);
        }
    }

    #[test]
    fn repeated_roots_use_polynomial_terms() {
        // N/P = 1/(theta-1)^2 -> x e^x
        let terms = partial_fractions(&[1.0], &[1.0, -2.0, 1.0]).unwrap();
        assert_eq!(terms.len(), 1);
        assert!((terms[0].coeffs[0]).norm() < 1e-6);
        assert!((terms[0].coeffs[1] - 1.0).norm() < 1e-6);
    }

    #[test]
    fn bounded_variation_values_at_zero() {
        let m = SnModel::new(0.0, 2.0, JumpSpec::new(vec![down_exponential(1.5, 1.0)])).unwrap();
        let w = ScaleFn::rational(&m, 1.0, 0.5).unwrap();
        let (v, _) = w.eval(1e-9);
        assert!((v - 1.0 / 1.5).abs() < 1e-8);
        assert_eq!(w.value(0.0), 1.0 / 1.5);
    }
}

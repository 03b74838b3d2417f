//! Generator of the Lévy process applied to smooth functions, and residual
//! checks of the martingale identities and the HJB inequality.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::levy_model::{JumpKind, LevyModel, ProblemSpec};
use crate::quad::{split_at, GaussLegendre};

/// How the generator integrates jumps and differentiates sampled functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorQuadrature {
    /// Panels per exponential jump term.
    pub panels: usize,
    /// Exponential terms are integrated up to `tail_decays / decay`.
    pub tail_decays: f64,
    /// Central-difference spacing used by [`stencil`].
    pub h: f64,
}

impl Default for GeneratorQuadrature {
    fn default() -> Self {
        Self {
            panels: 64,
            tail_decays: 45.0,
            h: 1e-3,
        }
    }
}

/// Central-difference `g'` and `g''` from values only. Exact up to rounding
/// for cubics.
pub fn stencil(g: impl Fn(f64) -> f64, x: f64, h: f64) -> (f64, f64) {
    let (gp, g0, gm) = (g(x + h), g(x), g(x - h));
    ((gp - gm) / (2.0 * h), (gp - 2.0 * g0 + gm) / (h * h))
}

/// `L g(x) = gamma g'(x) + sigma^2/2 g''(x) + int (g(x+z) - g(x) - g'(x) z 1{|z|<1}) Pi(dz)`.
pub fn generator_apply(
    model: &LevyModel,
    g: impl Fn(f64) -> f64,
    g1: impl Fn(f64) -> f64,
    g2: Option<&dyn Fn(f64) -> f64>,
    x: f64,
    quad: &GeneratorQuadrature,
) -> Result<f64> {
    let d1 = g1(x);
    let mut out = model.gamma * d1;
    if model.sigma > 0.0 {
        let g2 = g2.ok_or_else(|| Error::InvalidProblem("second derivative required when sigma > 0".into()))?;
        out += 0.5 * model.sigma * model.sigma * g2(x);
    }
    let g0 = g(x);
    let rule = GaussLegendre::g16();
    for t in model.jumps.active() {
        let s = t.side.sign();
        match t.kind {
            JumpKind::PointMass { size } => {
                let comp = if size < 1.0 { d1 * s * size } else { 0.0 };
                out += t.rate * (g(x + s * size) - g0 - comp);
            }
            JumpKind::Exponential { decay } => {
                let top = quad.tail_decays / decay;
                let pts = split_at(0.0, top, top / quad.panels as f64, &[1.0]);
                let integrand = |z: f64| {
                    let comp = if z < 1.0 { d1 * s * z } else { 0.0 };
                    (g(x + s * z) - g0 - comp) * decay * (-decay * z).exp()
                };
                let int: f64 = pts.windows(2).map(|w| rule.integrate(w[0], w[1], integrand)).sum();
                out += t.rate * int;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// `x < b*`: no control.
    Below,
    /// `x >= b*`: full rate `alpha`.
    Above,
    /// HJB inequality, both regions.
    Hjb,
}

impl Branch {
    pub fn label(self) -> &'static str {
        match self {
            Branch::Below => "below",
            Branch::Above => "above",
            Branch::Hjb => "hjb",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResidualReport {
    pub grid: Vec<f64>,
    pub residuals: Vec<f64>,
    pub branches: Vec<Branch>,
    /// Minimising rate in `[0, alpha]` (HJB reports only).
    pub rates: Vec<f64>,
    /// Largest violation: `|residual|` for identities, the negative part for
    /// the inequality.
    pub max_abs: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl ResidualReport {
    fn build(grid: Vec<f64>, residuals: Vec<f64>, branches: Vec<Branch>, rates: Vec<f64>, tol: f64, one_sided: bool) -> Self {
        let max_abs = residuals
            .iter()
            .map(|r| if one_sided { (-r).max(0.0) } else { r.abs() })
            .fold(0.0, f64::max);
        let pass = max_abs <= tol && residuals.iter().all(|r| r.is_finite());
        Self {
            grid,
            residuals,
            branches,
            rates,
            max_abs,
            tolerance: tol,
            pass,
        }
    }

    /// Largest `|residual|` among points on `branch`.
    pub fn max_abs_on(&self, branch: Branch) -> f64 {
        self.residuals
            .iter()
            .zip(&self.branches)
            .filter(|(_, b)| **b == branch)
            .map(|(r, _)| r.abs())
            .fold(0.0, f64::max)
    }

    pub fn merge(mut self, other: ResidualReport) -> Self {
        self.grid.extend(other.grid);
        self.residuals.extend(other.residuals);
        self.branches.extend(other.branches);
        self.rates.extend(other.rates);
        self.max_abs = self.max_abs.max(other.max_abs);
        self.tolerance = self.tolerance.max(other.tolerance);
        self.pass &= other.pass;
        self
    }

    /// CSV with columns x, branch, residual.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "x,branch,residual")?;
        for ((x, b), r) in self.grid.iter().zip(&self.branches).zip(&self.residuals) {
            writeln!(f, "{x},{},{r:e}", b.label())?;
        }
        f.flush()?;
        Ok(())
    }
}

/// A candidate value function and its derivatives.
pub struct Candidate<'a> {
    pub v: &'a (dyn Fn(f64) -> f64 + Sync),
    pub v1: &'a (dyn Fn(f64) -> f64 + Sync),
    pub v2: Option<&'a (dyn Fn(f64) -> f64 + Sync)>,
}

impl Candidate<'_> {
    fn generator_minus_q(&self, spec: &ProblemSpec, x: f64, quad: &GeneratorQuadrature) -> Result<f64> {
        let v2 = self.v2.map(|f| f as &dyn Fn(f64) -> f64);
        let l = generator_apply(&spec.model, self.v, self.v1, v2, x, quad)?;
        Ok(l - spec.q * (self.v)(x))
    }
}

/// Rate attaining `inf_{0 <= r <= alpha} r (beta - w')`; ties go to 0.
pub fn hjb_minimizer(beta: f64, w1: f64, alpha: f64) -> f64 {
    if beta - w1 < 0.0 {
        alpha
    } else {
        0.0
    }
}

/// Residuals `(L - q) v + f` below `b_star` and
/// `(L - q) v + alpha (beta - v') + f` at and above it.
pub fn check_martingale_identities(
    spec: &ProblemSpec,
    b_star: f64,
    cand: &Candidate<'_>,
    grid: &[f64],
    tol: f64,
) -> Result<ResidualReport> {
    if !b_star.is_finite() {
        return Err(Error::InvalidProblem("martingale identities need a finite threshold".into()));
    }
    let quad = GeneratorQuadrature::default();
    let rows = grid
        .par_iter()
        .map(|&x| {
            let base = cand.generator_minus_q(spec, x, &quad)? + spec.cost.f(x);
            Ok(if x < b_star {
                (base, Branch::Below)
            } else {
                (base + spec.alpha * (spec.beta - (cand.v1)(x)), Branch::Above)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (res, br): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok(ResidualReport::build(grid.to_vec(), res, br, Vec::new(), tol, false))
}

/// `(L - q) w + min(0, alpha (beta - w')) + f`; passes iff `>= -tol` on the grid.
pub fn check_hjb_inequality(spec: &ProblemSpec, cand: &Candidate<'_>, grid: &[f64], tol: f64) -> Result<ResidualReport> {
    let quad = GeneratorQuadrature::default();
    let rows = grid
        .par_iter()
        .map(|&x| {
            let w1 = (cand.v1)(x);
            let r = hjb_minimizer(spec.beta, w1, spec.alpha);
            let res = cand.generator_minus_q(spec, x, &quad)? + r * (spec.beta - w1) + spec.cost.f(x);
            Ok((res, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let (res, rates): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let n = grid.len();
    Ok(ResidualReport::build(grid.to_vec(), res, vec![Branch::Hjb; n], rates, tol, true))
}

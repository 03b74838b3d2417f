//! Resolvent density `R^{(q)}(x, y)` of the refracted spectrally negative
//! process, its `x`-derivative, quadrature against test functions, and the
//! semi-analytic `v'` including the fixed point for upward jumps.
//!
//! With `W = sum c_i e^{r_i x}` and `WW = sum d_j e^{s_j x}` (simple roots),
//! the density is
//!
//! ```text
//! R(x, y) = A(x) C(y) - W(x - y) - alpha 1{x > b} int_b^x WW(x - z) W'(z - y) dz
//! A(x)    = e^{Phi (x-b)} + alpha Phi 1{x > b} int_b^x e^{Phi (z-b)} WW(x - z) dz
//! C(y)    = (phi - Phi) / Phi * int_0^inf e^{-phi w} W'(b + w - y) dw
//! ```
//!
//! Expanded into exponentials, the terms growing like `e^{Phi (x-y)}` and
//! `e^{phi (x-y)}` cancel identically; the closed form drops them before
//! evaluation so that far tails stay accurate. A literal quadrature route
//! over the same formula is kept for models without a usable exponential
//! sum and for cross-checks.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::cost::{CostSpec, Growth};
use crate::error::{Error, Result};
use crate::levy_model::{JumpKind, JumpSpec, Side};
use crate::quad::{split_at, GaussLegendre};
use crate::scale::{ScaleFn, SnModel};

/// Exponential-sum data of the closed form.
#[derive(Debug, Clone)]
struct Closed {
    /// `(r_i, c_i)` of `W` without the `Phi` root.
    w_rest: Vec<(Complex64, Complex64)>,
    /// `(s_j, d_j)` of `WW` without the `phi` root.
    ww_rest: Vec<(Complex64, Complex64)>,
    /// `a_j = -alpha Phi d_j / (Phi - s_j)` for every `j` (x > b form of `A`).
    a_all: Vec<(Complex64, Complex64)>,
    /// `e_i = K c_i r_i / (phi - r_i)` for every `i`, `C(y) = sum e_i e^{r_i (b-y)}`.
    e_all: Vec<(Complex64, Complex64)>,
    /// `K S` with `S = sum c_i r_i / (phi - r_i)`.
    ks: Complex64,
    /// `c_i r_i t_ij` for `i != Phi`, `j != phi`.
    t: Vec<Vec<Complex64>>,
}

#[derive(Debug, Clone)]
pub struct ResolventKernel {
    pub sn: SnModel,
    pub q: f64,
    pub b: f64,
    pub alpha: f64,
    /// `Phi(q)`.
    pub phi_q: f64,
    /// `phi(q)`, the right inverse at shift `alpha`.
    pub varphi_q: f64,
    pub w: ScaleFn,
    pub ww: ScaleFn,
    closed: Option<Closed>,
}

fn simple_terms(f: &ScaleFn) -> Option<Vec<(Complex64, Complex64)>> {
    let terms = f.terms()?;
    if terms.iter().any(|t| t.coeffs.len() != 1) {
        return None;
    }
    Some(terms.iter().map(|t| (t.root, t.coeffs[0])).collect())
}

fn take_root(v: &mut Vec<(Complex64, Complex64)>, target: f64) -> Option<Complex64> {
    let (k, _) = v
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 .0 - target).norm().total_cmp(&(b.1 .0 - target).norm()))?;
    if (v[k].0 - target).norm() > 1e-8 * target.max(1.0) {
        return None;
    }
    Some(v.remove(k).1)
}

impl ResolventKernel {
    /// Kernel of the SN model refracted at `b` with rate `alpha`. The process
    /// must have a Gaussian part.
    pub fn new(sn: &SnModel, q: f64, b: f64, alpha: f64) -> Result<Self> {
        if !sn.has_unbounded_variation() {
            return Err(Error::Unsupported("resolvent density needs sigma > 0".into()));
        }
        if !(q > 0.0 && alpha > 0.0 && b.is_finite()) {
            return Err(Error::InvalidProblem("resolvent needs q > 0, alpha > 0 and finite b".into()));
        }
        let w = ScaleFn::new(sn, q, 0.0)?;
        let ww = ScaleFn::new(sn, q, alpha)?;
        let (phi_q, varphi_q) = (w.root, ww.root);
        let closed = Self::closed_form(&w, &ww, phi_q, varphi_q, alpha);
        Ok(Self {
            sn: sn.clone(),
            q,
            b,
            alpha,
            phi_q,
            varphi_q,
            w,
            ww,
            closed,
        })
    }

    /// Same model and threshold at a different discount rate.
    pub fn with_rate(&self, q: f64) -> Result<Self> {
        Self::new(&self.sn, q, self.b, self.alpha)
    }

    /// Forces the literal quadrature route.
    pub fn without_closed_form(mut self) -> Self {
        self.closed = None;
        self
    }

    pub fn has_closed_form(&self) -> bool {
        self.closed.is_some()
    }

    fn closed_form(w: &ScaleFn, ww: &ScaleFn, big: f64, small: f64, alpha: f64) -> Option<Closed> {
        let w_all = simple_terms(w)?;
        let ww_all = simple_terms(ww)?;
        let mut w_rest = w_all.clone();
        take_root(&mut w_rest, big)?;
        let mut ww_rest = ww_all.clone();
        take_root(&mut ww_rest, small)?;
        let k = (small - big) / big;
        let a_all = ww_all
            .iter()
            .map(|&(s, d)| (s, -alpha * big * d / (big - s)))
            .collect();
        let e_all = w_all.iter().map(|&(r, c)| (r, k * c * r / (small - r))).collect();
        let s_sum: Complex64 = w_all.iter().map(|&(r, c)| c * r / (small - r)).sum();
        let t = w_rest
            .iter()
            .map(|&(r, c)| {
                ww_rest
                    .iter()
                    .map(|&(s, d)| c * r * alpha * d * (1.0 / (r - s) - big * k / ((big - s) * (small - r))))
                    .collect()
            })
            .collect();
        Some(Closed {
            w_rest,
            ww_rest,
            a_all,
            e_all,
            ks: k * s_sum,
            t,
        })
    }

    /// `R^{(q)}(x, y)`.
    pub fn density(&self, x: f64, y: f64) -> f64 {
        match &self.closed {
            Some(c) => self.closed_eval(c, x, y, false),
            None => self.density_quadrature(x, y),
        }
    }

    /// `d/dx R^{(q)}(x, y)`, right derivative at `x = b` and `x = y`.
    pub fn density_dx(&self, x: f64, y: f64) -> f64 {
        match &self.closed {
            Some(c) => self.closed_eval(c, x, y, true),
            None => self.density_dx_quadrature(x, y),
        }
    }

    fn closed_eval(&self, c: &Closed, x: f64, y: f64, dx: bool) -> f64 {
        let b = self.b;
        let big = self.phi_q;
        let k = (self.varphi_q - big) / big;
        let sm = self.varphi_q;
        let e = |z: Complex64| z.exp();
        let mut acc = Complex64::new(0.0, 0.0);
        if y <= b {
            if x >= y {
                if x <= b {
                    for &(r, ci) in &c.w_rest {
                        let f1 = ci * r * k / (sm - r);
                        let p1 = e(Complex64::new(big * (x - b), 0.0) + r * (b - y));
                        let p2 = e(r * (x - y));
                        if dx {
                            acc += f1 * big * p1 - ci * r * p2;
                        } else {
                            acc += f1 * p1 - ci * p2;
                        }
                    }
                } else {
                    for (i, &(r, _)) in c.w_rest.iter().enumerate() {
                        for (j, &(s, _)) in c.ww_rest.iter().enumerate() {
                            let p = e(r * (b - y) + s * (x - b));
                            acc += c.t[i][j] * if dx { s * p } else { p };
                        }
                    }
                }
            } else {
                // x < y <= b
                let pre = (big * (x - b)).exp() * if dx { big } else { 1.0 };
                for &(r, ei) in &c.e_all {
                    acc += pre * ei * e(r * (b - y));
                }
            }
        } else if x <= b {
            let v = c.ks * (big * (x - b) - sm * (y - b)).exp();
            acc += if dx { v * big } else { v };
        } else if x <= y {
            for &(s, aj) in &c.a_all {
                let p = c.ks * aj * e(s * (x - b) - Complex64::new(sm * (y - b), 0.0));
                acc += if dx { p * s } else { p };
            }
        } else {
            let u = x - y;
            for &(s, aj) in &c.a_all {
                if (s.re - sm).abs() <= 1e-8 * sm.max(1.0) && s.im.abs() <= 1e-8 {
                    continue;
                }
                let p = c.ks * aj * e(s * u + (s - sm) * (y - b));
                acc += if dx { p * s } else { p };
            }
            for &(s, dj) in &c.ww_rest {
                let p = dj * e(s * u);
                acc -= if dx { p * s } else { p };
            }
        }
        acc.re
    }

    fn a_quad(&self, x: f64, dx: bool) -> f64 {
        let (b, big, al) = (self.b, self.phi_q, self.alpha);
        let base = (big * (x - b)).exp() * if dx { big } else { 1.0 };
        if x <= b {
            return base;
        }
        let g = GaussLegendre::g16();
        let n = ((x - b) / 0.25).ceil().max(1.0) as usize;
        let int = g.integrate_panels(b, x, n, |z| {
            let (v, d) = self.ww.eval(x - z);
            (big * (z - b)).exp() * if dx { d } else { v }
        });
        base + al * big * int
    }

    fn c_quad(&self, y: f64) -> f64 {
        let (b, big, sm) = (self.b, self.phi_q, self.varphi_q);
        let lo = (y - b).max(0.0);
        let hi = lo + 40.0 / (sm - big).min(sm) + 40.0;
        let g = GaussLegendre::g16();
        let n = ((hi - lo) / 0.25).ceil() as usize;
        let int = g.integrate_panels(lo, hi, n, |w| (-sm * w).exp() * self.w.derivative(b + w - y));
        (sm - big) / big * int
    }

    fn b_quad(&self, x: f64, y: f64, dx: bool) -> f64 {
        let (wv, wd) = self.w.eval(x - y);
        let mut v = if dx { wd } else { wv };
        let m = self.b.max(y);
        if x > m {
            let g = GaussLegendre::g16();
            let n = ((x - m) / 0.25).ceil().max(1.0) as usize;
            v += self.alpha
                * g.integrate_panels(m, x, n, |z| {
                    let (a, ad) = self.ww.eval(x - z);
                    (if dx { ad } else { a }) * self.w.derivative(z - y)
                });
        }
        v
    }

    /// The literal formula with every inner integral done by quadrature.
    pub fn density_quadrature(&self, x: f64, y: f64) -> f64 {
        self.a_quad(x, false) * self.c_quad(y) - self.b_quad(x, y, false)
    }

    pub fn density_dx_quadrature(&self, x: f64, y: f64) -> f64 {
        self.a_quad(x, true) * self.c_quad(y) - self.b_quad(x, y, true)
    }
}

pub fn resolvent_density(kernel: &ResolventKernel, x: f64, y: f64) -> f64 {
    kernel.density(x, y)
}

pub fn resolvent_density_dx(kernel: &ResolventKernel, x: f64, y: f64) -> f64 {
    kernel.density_dx(x, y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureConfig {
    /// Fixed `(y_lo, y_hi)`; chosen from the tail certificate when absent.
    pub domain: Option<(f64, f64)>,
    /// Maximal Gauss-Legendre panel width.
    pub panel_width: f64,
    /// Target for the certified truncation error.
    pub tol: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            domain: None,
            panel_width: 0.25,
            tol: 1e-9,
        }
    }
}

/// Bound on `int_{y outside [lo, hi]} |g(y)| R(x, y) dy` for `|g| <= growth`.
///
/// Uses `x + X_t - alpha t <= U_t <= x + X_t`, exponential Chebyshev bounds
/// and `|u|^n <= (n / (e theta))^n e^{theta |u|}`; requires `lo < 0 < hi`.
pub fn truncation_bound(kernel: &ResolventKernel, growth: Growth, x: f64, lo: f64, hi: f64) -> f64 {
    let sn = &kernel.sn;
    let (q, al) = (kernel.q, kernel.alpha);
    let n = growth.n;
    let cn = |th: f64| {
        if n == 0 {
            1.0
        } else {
            (n as f64 / (std::f64::consts::E * th)).powi(n as i32)
        }
    };
    let abscissa = sn.down_jumps.moment_abscissa();
    let psi_up = |c: f64| sn.laplace_exponent(c);
    let psi_down = |c: f64| if c < abscissa { sn.laplace_exponent(-c) + al * c } else { f64::INFINITY };
    let best = |psi: &dyn Fn(f64) -> f64, edge: f64, x: f64, top: f64| {
        let mut best = f64::INFINITY;
        let mut th = top;
        for _ in 0..60 {
            th *= 0.85;
            let (p1, p2) = (psi(th), psi(2.0 * th));
            if !(p1 < q && p2 < q) {
                continue;
            }
            let k = if n == 0 { growth.k1 + growth.k2 } else { growth.k1 };
            let mut v = (-th * (edge - x)).exp() * k / (q - p1);
            if n > 0 {
                v += growth.k2 * cn(th) * (-th * edge + 2.0 * th * x).exp() / (q - p2);
            }
            best = best.min(v);
        }
        best
    };
    let up = best(&psi_up, hi, x, kernel.phi_q);
    // Lower side in the mirrored variable -u.
    let down = best(&psi_down, -lo, -x, 4.0 * kernel.varphi_q.max(1.0));
    up + down
}

fn domain_for(kernel: &ResolventKernel, growth: Growth, x: f64, cfg: &QuadratureConfig) -> Result<(f64, f64)> {
    if let Some(d) = cfg.domain {
        return Ok(d);
    }
    let centre_hi = x.max(kernel.b).max(0.0);
    let centre_lo = x.min(kernel.b).min(0.0);
    let mut l = 8.0;
    while l <= 4096.0 {
        let (lo, hi) = (centre_lo - l, centre_hi + l);
        let bound = truncation_bound(kernel, growth, x, lo, hi);
        if bound <= cfg.tol {
            return Ok((lo, hi));
        }
        l *= 1.5;
    }
    Err(Error::Accuracy {
        what: "resolvent truncation",
        achieved: truncation_bound(kernel, growth, x, centre_lo - 4096.0, centre_hi + 4096.0),
        target: cfg.tol,
    })
}

/// Quadrature nodes `(y, weight * R(x, y))` (or `d/dx R`) over the certified domain.
fn weighted_nodes(
    kernel: &ResolventKernel,
    growth: Growth,
    x: f64,
    cfg: &QuadratureConfig,
    dx: bool,
) -> Result<Vec<(f64, f64)>> {
    let (lo, hi) = domain_for(kernel, growth, x, cfg)?;
    let pts = split_at(lo, hi, cfg.panel_width, &[x, kernel.b]);
    let g = GaussLegendre::g16();
    let mut out = Vec::with_capacity(pts.len() * 16);
    for w in pts.windows(2) {
        let (a, c) = (w[0], w[1]);
        let half = 0.5 * (c - a);
        let mid = 0.5 * (a + c);
        for (t, wt) in g.nodes.iter().zip(&g.weights) {
            let y = mid + half * t;
            let r = if dx { kernel.density_dx(x, y) } else { kernel.density(x, y) };
            out.push((y, wt * half * r));
        }
    }
    Ok(out)
}

/// `H_g(x) = int g(y) R(x, y) dy`.
pub fn resolvent_apply(
    kernel: &ResolventKernel,
    g: impl Fn(f64) -> f64,
    growth: Growth,
    x: f64,
    cfg: &QuadratureConfig,
) -> Result<f64> {
    Ok(weighted_nodes(kernel, growth, x, cfg, false)?
        .iter()
        .map(|(y, w)| w * g(*y))
        .sum())
}

/// `int g(y) d/dx R(x, y) dy`.
pub fn resolvent_apply_dx(
    kernel: &ResolventKernel,
    g: impl Fn(f64) -> f64,
    growth: Growth,
    x: f64,
    cfg: &QuadratureConfig,
) -> Result<f64> {
    Ok(weighted_nodes(kernel, growth, x, cfg, true)?
        .iter()
        .map(|(y, w)| w * g(*y))
        .sum())
}

/// `rho(b) = H_{f'}(b)` for the SN model refracted at `b`.
pub fn semi_analytic_rho(sn: &SnModel, cost: &CostSpec, q: f64, alpha: f64, b: f64, cfg: &QuadratureConfig) -> Result<f64> {
    let k = ResolventKernel::new(sn, q, b, alpha)?;
    resolvent_apply(&k, |y| cost.f_prime(y), cost.f_prime_growth(), b, cfg)
}

/// Root of `rho(b) = beta` for the SN model by bracketing and bisection on
/// the semi-analytic `rho`.
pub fn semi_analytic_threshold(
    sn: &SnModel,
    cost: &CostSpec,
    q: f64,
    beta: f64,
    alpha: f64,
    tol: f64,
    cfg: &QuadratureConfig,
) -> Result<f64> {
    let (lo_lim, hi_lim) = cost.f_prime_limits;
    if lo_lim >= q * beta {
        return Ok(f64::NEG_INFINITY);
    }
    if hi_lim < q * beta {
        return Ok(f64::INFINITY);
    }
    let g = |b: f64| semi_analytic_rho(sn, cost, q, alpha, b, cfg).map(|r| r - beta);
    let (mut lo, mut hi) = (-1.0, 1.0);
    let mut k = 0;
    while g(lo)? >= 0.0 {
        lo *= 2.0;
        k += 1;
        if k > 40 {
            return Err(Error::BracketNotFound { expansions: 40 });
        }
    }
    while g(hi)? < 0.0 {
        hi *= 2.0;
        k += 1;
        if k > 80 {
            return Err(Error::BracketNotFound { expansions: 40 });
        }
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if g(mid)? >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointConfig {
    pub max_iters: usize,
    /// Stop when the sup-norm update falls below this.
    pub tol: f64,
    /// Working grid `[b - span, b + span]`.
    pub span: f64,
    pub spacing: f64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol: 1e-10,
            span: 10.0,
            spacing: 0.05,
        }
    }
}

/// Atoms `(probability, size)` of the normalised upward jump law.
fn jump_atoms(up: &JumpSpec) -> Vec<(f64, f64)> {
    let total = up.total_rate();
    let g = GaussLegendre::g16();
    let mut atoms = Vec::new();
    for t in up.active() {
        let p = t.rate / total;
        match t.kind {
            JumpKind::PointMass { size } => atoms.push((p, size)),
            JumpKind::Exponential { decay } => {
                let top = 36.0 / decay;
                let panels = 6;
                let h = top / panels as f64;
                for k in 0..panels {
                    let (a, c) = (k as f64 * h, (k + 1) as f64 * h);
                    for (x, w) in g.nodes.iter().zip(&g.weights) {
                        let u = 0.5 * (a + c) + 0.5 * (c - a) * x;
                        atoms.push((p * w * 0.5 * (c - a) * decay * (-decay * u).exp(), u));
                    }
                }
            }
        }
    }
    atoms
}

/// Uniform grid with linear interpolation and affine extrapolation.
#[derive(Debug, Clone)]
struct Grid {
    x0: f64,
    h: f64,
    n: usize,
}

impl Grid {
    fn node(&self, k: usize) -> f64 {
        self.x0 + self.h * k as f64
    }

    /// Interpolation weights of `y` on the nodes.
    fn weights(&self, y: f64) -> [(usize, f64); 2] {
        let t = (y - self.x0) / self.h;
        let k = (t.floor().max(0.0) as usize).min(self.n - 2);
        let fr = t - k as f64;
        [(k, 1.0 - fr), (k + 1, fr)]
    }

    fn eval(&self, v: &[f64], y: f64) -> f64 {
        self.weights(y).iter().map(|(k, w)| w * v[*k]).sum()
    }
}

/// Converged two-sided `H^{(b,q)}_{f'}` on the working grid.
#[derive(Debug, Clone)]
pub struct TwoSidedSolution {
    pub grid_x: Vec<f64>,
    pub values: Vec<f64>,
    pub iterations: usize,
    /// Observed ratios of successive sup-norm updates.
    pub ratios: Vec<f64>,
    /// `Pi(0, inf) / (q + Pi(0, inf))`.
    pub contraction: f64,
    pub final_update: f64,
    lambda: f64,
    grid: Grid,
    sn_values: Vec<f64>,
}

impl TwoSidedSolution {
    /// Largest observed update ratio over the iterations that are still
    /// above rounding level.
    pub fn max_ratio(&self) -> f64 {
        self.ratios.iter().copied().fold(0.0, f64::max)
    }

    /// A-priori error bound `contraction^k * first update / (1 - contraction)`.
    pub fn error_bound(&self) -> f64 {
        self.final_update * self.contraction / (1.0 - self.contraction)
    }
}

struct TwoSidedParts<'a> {
    kernel: &'a ResolventKernel,
    hat: ResolventKernel,
    cost: &'a CostSpec,
    atoms: Vec<(f64, f64)>,
    cfg: QuadratureConfig,
    growth: Growth,
}

impl TwoSidedParts<'_> {
    /// `G(x) = H^{SN, q}_{f'}(x)`.
    fn g(&self, x: f64) -> Result<f64> {
        resolvent_apply(self.kernel, |y| self.cost.f_prime(y), self.cost.f_prime_growth(), x, &self.cfg)
    }

    /// Rows `P0(x)` and `PJ(x)` of the `q_hat` resolvent acting on grid
    /// functions, unshifted and averaged over the jump law.
    fn rows(&self, grid: &Grid, x: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let nodes = weighted_nodes(&self.hat, self.growth, x, &self.cfg, false)?;
        let mut p0 = vec![0.0; grid.n];
        let mut pj = vec![0.0; grid.n];
        for (y, w) in nodes {
            for (k, a) in grid.weights(y) {
                p0[k] += w * a;
            }
            for &(p, size) in &self.atoms {
                for (k, a) in grid.weights(y + size) {
                    pj[k] += w * p * a;
                }
            }
        }
        Ok((p0, pj))
    }
}

/// Solves `H = H^{SN,q}_{f'} - lam H^{SN,q_hat}_{H^{SN,q}_{f'}} + lam H^{SN,q_hat}_{E H(. + J)}`
/// by Picard iteration on the working grid.
pub fn solve_two_sided(
    kernel: &ResolventKernel,
    cost: &CostSpec,
    up_jumps: &JumpSpec,
    fp: &FixedPointConfig,
) -> Result<TwoSidedSolution> {
    let lam = up_jumps.total_rate();
    if up_jumps.active().any(|t| t.side != Side::Up) || lam <= 0.0 {
        return Err(Error::InvalidProblem("two-sided fixed point needs upward jumps".into()));
    }
    let contraction = lam / (kernel.q + lam);
    if !(contraction < 1.0) {
        return Err(Error::InvalidProblem("fixed point is not a contraction".into()));
    }
    let n = (2.0 * fp.span / fp.spacing).round() as usize + 1;
    let grid = Grid {
        x0: kernel.b - fp.span,
        h: 2.0 * fp.span / (n - 1) as f64,
        n,
    };
    let parts = two_sided_parts(kernel, cost, up_jumps)?;
    let xs: Vec<f64> = (0..n).map(|k| grid.node(k)).collect();
    let sn_values = xs.par_iter().map(|x| parts.g(*x)).collect::<Result<Vec<_>>>()?;
    let rows = xs.par_iter().map(|x| parts.rows(&grid, *x)).collect::<Result<Vec<_>>>()?;
    let s: Vec<f64> = rows
        .iter()
        .zip(&sn_values)
        .map(|((p0, _), g)| g - lam * dot(p0, &sn_values))
        .collect();
    let mut h = sn_values.clone();
    let mut ratios = Vec::new();
    let mut last = f64::NAN;
    let mut update = f64::INFINITY;
    let mut iterations = 0;
    while iterations < fp.max_iters {
        let next: Vec<f64> = rows.iter().zip(&s).map(|((_, pj), si)| si + lam * dot(pj, &h)).collect();
        update = next.iter().zip(&h).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        h = next;
        iterations += 1;
        let scale = h.iter().map(|v| v.abs()).fold(1.0, f64::max);
        if last.is_finite() && last > 1e3 * f64::EPSILON * scale {
            ratios.push(update / last);
        }
        last = update;
        if update < fp.tol {
            break;
        }
    }
    if !(update < fp.tol) {
        return Err(Error::NonConvergence {
            what: "two-sided fixed point",
            iterations,
            residual: update,
        });
    }
    Ok(TwoSidedSolution {
        grid_x: xs,
        values: h,
        iterations,
        ratios,
        contraction,
        final_update: update,
        lambda: lam,
        grid,
        sn_values,
    })
}

fn two_sided_parts<'a>(kernel: &'a ResolventKernel, cost: &'a CostSpec, up: &JumpSpec) -> Result<TwoSidedParts<'a>> {
    let lam = up.total_rate();
    let hat = kernel.with_rate(kernel.q + lam)?;
    let fg = cost.f_prime_growth();
    // |H(y)| <= (k1 + k2 |y|^n) scaled generously; only used to size the domain.
    let growth = Growth {
        k1: (fg.k1 + fg.k2) * 10.0 / kernel.q,
        k2: fg.k2 * 10.0 / kernel.q,
        n: fg.n,
    };
    Ok(TwoSidedParts {
        kernel,
        hat,
        cost,
        atoms: jump_atoms(up),
        cfg: QuadratureConfig::default(),
        growth,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl TwoSidedSolution {
    /// Nyström evaluation of the fixed point at an arbitrary `x`.
    pub fn eval(&self, kernel: &ResolventKernel, cost: &CostSpec, up: &JumpSpec, x: f64) -> Result<f64> {
        let parts = two_sided_parts(kernel, cost, up)?;
        let (p0, pj) = parts.rows(&self.grid, x)?;
        let g = parts.g(x)?;
        Ok(g - self.lambda * dot(&p0, &self.sn_values) + self.lambda * dot(&pj, &self.values))
    }

    /// Grid interpolant.
    pub fn interpolate(&self, x: f64) -> f64 {
        self.grid.eval(&self.values, x)
    }
}

/// `v'(x) = H^{(b,q)}_{f'}(x)`: the SN resolvent applied to `f'`, or the
/// two-sided fixed point when upward jumps are present.
pub fn semi_analytic_v_prime(
    kernel: &ResolventKernel,
    cost: &CostSpec,
    x: f64,
    fp: &FixedPointConfig,
    up_jumps: Option<&JumpSpec>,
) -> Result<f64> {
    match up_jumps {
        Some(up) if up.total_rate() > 0.0 => {
            let sol = solve_two_sided(kernel, cost, up, fp)?;
            sol.eval(kernel, cost, up, x)
        }
        _ => resolvent_apply(kernel, |y| cost.f_prime(y), cost.f_prime_growth(), x, &QuadratureConfig::default()),
    }
}

/// `v(x) = int (f(y) + alpha beta 1{y > b}) R(x, y) dy` for the SN model.
pub fn semi_analytic_value(kernel: &ResolventKernel, cost: &CostSpec, beta: f64, x: f64, cfg: &QuadratureConfig) -> Result<f64> {
    let g = cost.growth;
    let growth = Growth {
        k1: g.k1 + (beta * kernel.alpha).abs(),
        ..g
    };
    let (b, ab) = (kernel.b, kernel.alpha * beta);
    resolvent_apply(kernel, |y| cost.f(y) + if y > b { ab } else { 0.0 }, growth, x, cfg)
}

/// `v''(x) = int f'(y) d/dx R(x, y) dy` for the SN model.
pub fn semi_analytic_v_second(kernel: &ResolventKernel, cost: &CostSpec, x: f64, cfg: &QuadratureConfig) -> Result<f64> {
    resolvent_apply_dx(kernel, |y| cost.f_prime(y), cost.f_prime_growth(), x, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scale::down_exponential;

    fn brownian() -> SnModel {
        SnModel::brownian(0.0, 1.0).unwrap()
    }

    fn one() -> Growth {
        Growth { k1: 1.0, k2: 0.0, n: 0 }
    }

    #[test]
    fn mass_is_one_over_q() {
        let models = [
            (brownian(), 1.0, 0.0, 1.0),
            (SnModel::brownian(0.3, 0.8).unwrap(), 1.3, 0.7, 2.0),
            (SnModel::new(0.6, 0.5, JumpSpec::new(vec![down_exponential(1.0, 2.0)])).unwrap(), 0.7, -0.4, 0.8),
        ];
        for (sn, q, b, alpha) in models {
            let k = ResolventKernel::new(&sn, q, b, alpha).unwrap();
            assert!(k.has_closed_form());
            for x in [b - 1.0, b, b + 1.0] {
                let m = resolvent_apply(&k, |_| 1.0, one(), x, &QuadratureConfig::default()).unwrap();
                assert!((m - 1.0 / q).abs() < 1e-7, "{sn:?} x={x} mass={m}");
            }
        }
    }

    #[test]
    fn closed_form_matches_literal_quadrature() {
        let sn = SnModel::new(0.6, 0.5, JumpSpec::new(vec![down_exponential(1.0, 2.0)])).unwrap();
        let k = ResolventKernel::new(&sn, 0.7, 0.3, 0.8).unwrap();
        let lit = k.clone().without_closed_form();
        for &x in &[-1.0, 0.3, 0.9, 2.0] {
            for &y in &[-2.0, -0.5, 0.3, 0.6, 1.5, 2.5] {
                let (a, b) = (k.density(x, y), lit.density(x, y));
                assert!((a - b).abs() < 1e-7 * b.abs().max(1e-2), "R({x},{y}) {a} vs {b}");
                let (a, b) = (k.density_dx(x, y), lit.density_dx(x, y));
                assert!((a - b).abs() < 1e-6 * b.abs().max(1e-2), "dR({x},{y}) {a} vs {b}");
            }
        }
    }

    #[test]
    fn density_is_nonnegative_and_decays_like_varphi() {
        let k = ResolventKernel::new(&brownian(), 1.0, 0.0, 1.0).unwrap();
        for i in -80..=80 {
            for &x in &[-1.0, 0.0, 0.5, 1.0] {
                assert!(k.density(x, i as f64 * 0.1) >= -1e-14);
            }
        }
        let x = 0.5;
        let slope = (k.density(x, x + 6.0).ln() - k.density(x, x + 3.0).ln()) / 3.0;
        assert!(((slope + k.varphi_q) / k.varphi_q).abs() < 0.02);
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let k = ResolventKernel::new(&brownian(), 1.0, 0.0, 1.0).unwrap();
        let h = 1e-5;
        let fd = (k.density(0.5 + h, -0.5) - k.density(0.5 - h, -0.5)) / (2.0 * h);
        assert!((fd - k.density_dx(0.5, -0.5)).abs() < 1e-4);
    }

    #[test]
    fn fundamental_theorem_for_dx() {
        let k = ResolventKernel::new(&brownian(), 1.0, 0.2, 1.0).unwrap();
        let g = GaussLegendre::g16();
        for &(x0, x1) in &[(-1.0, -0.3), (-0.5, 1.0), (0.5, 2.0)] {
            for &y in &[-1.5, 0.0, 0.7, 1.6] {
                let pts = split_at(x0, x1, 0.05, &[0.2, y]);
                let int: f64 = pts.windows(2).map(|w| g.integrate(w[0], w[1], |z| k.density_dx(z, y))).sum();
                assert!((int - (k.density(x1, y) - k.density(x0, y))).abs() < 1e-8, "{x0} {x1} {y}");
            }
        }
    }

    #[test]
    fn v_prime_constant_marginal_cost() {
        let k = ResolventKernel::new(&brownian(), 2.0, 0.0, 1.0).unwrap();
        let c = CostSpec::linear(3.0);
        for x in [-2.0, 0.0, 1.5] {
            let v = semi_analytic_v_prime(&k, &c, x, &FixedPointConfig::default(), None).unwrap();
            assert!((v - 1.5).abs() < 1e-7);
        }
    }

    #[test]
    fn truncation_bound_dominates() {
        let k = ResolventKernel::new(&brownian(), 1.0, 0.0, 1.0).unwrap();
        let g = Growth { k1: 0.0, k2: 1.0, n: 2 };
        let (lo, hi) = (-6.0, 6.0);
        let quad = GaussLegendre::g16();
        let tail = quad.integrate_panels(hi, hi + 40.0, 160, |y| y * y * k.density(0.5, y))
            + quad.integrate_panels(lo - 40.0, lo, 160, |y| y * y * k.density(0.5, y));
        assert!(truncation_bound(&k, g, 0.5, lo, hi) >= tail);
    }

    #[test]
    fn two_sided_three_term_matches_resolvent_identity() {
        // Resolvent identity form: H = H^{q_hat}_{f'} + lam H^{q_hat}_{E H(.+J)}.
        let k = ResolventKernel::new(&brownian(), 1.0, 0.5, 1.0).unwrap();
        let cost = CostSpec::quadratic(1.0, 0.0);
        let up = JumpSpec::new(vec![crate::levy_model::JumpTerm::point_mass(Side::Up, 0.5, 1.0)]);
        let fp = FixedPointConfig::default();
        let sol = solve_two_sided(&k, &cost, &up, &fp).unwrap();
        assert!(sol.max_ratio() <= sol.contraction + 0.05);
        let hat = k.with_rate(1.5).unwrap();
        for x in [-0.5, 0.5, 1.5] {
            let a = sol.eval(&k, &cost, &up, x).unwrap();
            let first = resolvent_apply(&hat, |y| cost.f_prime(y), cost.f_prime_growth(), x, &QuadratureConfig::default()).unwrap();
            let g = Growth { k1: 50.0, k2: 10.0, n: 1 };
            let second = resolvent_apply(&hat, |y| sol.interpolate(y + 1.0), g, x, &QuadratureConfig::default()).unwrap();
            let b = first + 0.5 * second;
            assert!((a - b).abs() < 2e-3, "x={x}: {a} vs {b}");
        }
    }
}

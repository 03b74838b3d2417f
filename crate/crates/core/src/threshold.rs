//! Monte Carlo estimation of `rho`, the optimal threshold `b*`, values and
//! value derivatives of strategies, and the optimality comparison harness.
//!
//! Every path `i` draws its randomness from `RngStreamKey(seed, i)`, so any
//! two estimates run with the same configuration share their driving paths.
//! Path integrals use exponentially weighted trapezoid weights on the pieces
//! emitted by the stepper and a frozen-state tail `e^{-qT} g(U_T) / q`
//! beyond the horizon; the separately reported tail bound covers the error
//! of that tail.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::cost::Growth;
use crate::error::{Error, Result};
use crate::levy_model::{LevyModel, ProblemSpec};
use crate::pathsim::{DrivingPath, RngStreamKey, TimeGrid};
use crate::quad::{discounted_length, discounted_power_tail, discounted_trapezoid};
use crate::refraction::{drive, ControlledPath, FeedbackRule, PathSink, Strategy};

/// Bracket expansions `b = +-2^k`, `k = 0..=MAX_EXPANSION`.
pub const MAX_EXPANSION: u32 = 40;

/// Spacing of the occupation nodes used by [`solve_threshold`].
pub const NODE_SPACING: f64 = 1.0 / 128.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloConfig {
    pub n_paths: usize,
    pub grid: TimeGrid,
    pub seed: u64,
    /// Exponential-moment exponent used by the tail certificate; defaults to
    /// the largest admissible one.
    pub theta_bar: Option<f64>,
    /// Give every compared scenario its own seed instead of sharing paths.
    pub independent_seeds: bool,
}

impl MonteCarloConfig {
    pub fn new(n_paths: usize, grid: TimeGrid, seed: u64) -> Self {
        Self {
            n_paths,
            grid,
            seed,
            theta_bar: None,
            independent_seeds: false,
        }
    }

    fn check(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::InvalidProblem("n_paths must be >= 1".into()));
        }
        Ok(())
    }

    /// Stream key of path `i` in comparison scenario `scenario`.
    pub fn key(&self, scenario: u64, i: u64) -> RngStreamKey {
        if self.independent_seeds && scenario > 0 {
            RngStreamKey::new(self.seed.wrapping_add(scenario.wrapping_mul(0x9E37_79B9_7F4A_7C15)), i)
        } else {
            RngStreamKey::new(self.seed, i)
        }
    }
}

/// Sample mean and standard error `sd / sqrt(n)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub se: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        if xs.len() < 2 {
            return Self { mean, se: 0.0 };
        }
        let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
        Self {
            mean,
            se: (ss / (n - 1.0) / n).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueEstimate {
    pub mean: f64,
    pub se: f64,
    pub tail_bound: f64,
    pub n_paths: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RhoCurve {
    pub b_values: Vec<f64>,
    pub rho_hat: Vec<f64>,
    pub se: Vec<f64>,
    pub seed: u64,
}

impl RhoCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "b,rho_hat,se")?;
        for i in 0..self.b_values.len() {
            writeln!(w, "{},{},{}", self.b_values[i], self.rho_hat[i], self.se[i])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdResult {
    /// Extended real: `-inf` and `+inf` signal the degenerate regimes.
    pub b_star: f64,
    pub bracket: Option<(f64, f64)>,
    pub iterations: usize,
    /// `|rho_hat(b*) - beta|`.
    pub residual: f64,
    /// Delta-method standard error of `b*`.
    pub se: f64,
    pub rho_se: f64,
    /// Central-difference slope of `rho_hat` at `b*`.
    pub slope: f64,
    pub tail_bound: f64,
    pub n_paths: usize,
}

impl ThresholdResult {
    fn degenerate(b_star: f64, residual: f64, n_paths: usize) -> Self {
        Self {
            b_star,
            bracket: None,
            iterations: 0,
            residual,
            se: 0.0,
            rho_se: 0.0,
            slope: 0.0,
            tail_bound: 0.0,
            n_paths,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.b_star.is_finite()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "b_star,se,bracket_lo,bracket_hi,iterations,residual,rho_se,slope,tail_bound,n_paths")?;
        let (lo, hi) = self.bracket.unwrap_or((f64::NAN, f64::NAN));
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            self.b_star,
            self.se,
            lo,
            hi,
            self.iterations,
            self.residual,
            self.rho_se,
            self.slope,
            self.tail_bound,
            self.n_paths
        )?;
        Ok(())
    }
}

/// Bound on `E int_T^inf e^{-qt} (|g(U_t)| + c) dt` plus the same bound on the
/// frozen-state tail estimate, for any admissible control and `|g| <= growth`.
///
/// Uses `|U_t| <= |x0| + |X_t| + alpha t` and the moment bound
/// `E|X_t|^N <= (N / (e theta))^N (e^{t k(theta)} + e^{t k(-theta)})`, with
/// `theta` optimised over a geometric grid below the moment abscissa.
#[allow(clippy::too_many_arguments)]
pub fn tail_certificate(
    model: &LevyModel,
    growth: Growth,
    x0: f64,
    alpha: f64,
    q: f64,
    horizon: f64,
    theta_bar: Option<f64>,
    c: f64,
) -> f64 {
    let t = horizon;
    let e = (-q * t).exp();
    let n = growth.n;
    if n == 0 {
        let m = growth.k1 + growth.k2 + c;
        return 2.0 * m * e / q;
    }
    let nf = n as f64;
    let three = 3f64.powi(n as i32 - 1);
    let top = theta_bar
        .unwrap_or(f64::INFINITY)
        .min(model.jumps.moment_abscissa())
        .min(64.0);
    let mut best = f64::INFINITY;
    let mut theta = top;
    for _ in 0..80 {
        theta *= 0.8;
        let (kp, km) = (model.cumulant(theta), model.cumulant(-theta));
        if !(kp < q && km < q) {
            continue;
        }
        let ct = (nf / (std::f64::consts::E * theta)).powi(n as i32);
        let x_int = ct * ((-(q - kp) * t).exp() / (q - kp) + (-(q - km) * t).exp() / (q - km));
        let x_at = ct * ((kp * t).exp() + (km * t).exp());
        let integral = (growth.k1 + c) * e / q
            + growth.k2 * three * (x0.abs().powi(n as i32) * e / q + x_int + alpha.powi(n as i32) * discounted_power_tail(q, n, t));
        let frozen =
            e / q * (growth.k1 + c + growth.k2 * three * (x0.abs().powi(n as i32) + x_at + (alpha * t).powi(n as i32)));
        best = best.min(integral + frozen);
    }
    best
}

/// Accumulates discounted trapezoid weights at the knots of a controlled
/// path; consecutive pieces share their common knot. The control term is
/// accumulated exactly.
struct Occupation<D: FnMut(f64, f64)> {
    q: f64,
    dt: f64,
    w_dt: [f64; 2],
    len_dt: f64,
    decay_dt: f64,
    /// Predicted start of the next piece and its discount factor.
    next: (f64, f64),
    pending: Option<(f64, f64)>,
    deposit: D,
    control: f64,
}

impl<D: FnMut(f64, f64)> Occupation<D> {
    fn new(q: f64, dt: f64, deposit: D) -> Self {
        Self {
            q,
            dt,
            w_dt: discounted_trapezoid(q, dt),
            len_dt: discounted_length(q, dt),
            decay_dt: (-q * dt).exp(),
            next: (0.0, 1.0),
            pending: None,
            deposit,
            control: 0.0,
        }
    }

    #[inline]
    fn add(&mut self, u: f64, w: f64) {
        match &mut self.pending {
            Some((pu, pw)) if *pu == u => *pw += w,
            p => {
                if let Some((pu, pw)) = p.take() {
                    (self.deposit)(pu, pw);
                }
                *p = Some((u, w));
            }
        }
    }
}

impl<D: FnMut(f64, f64)> PathSink for Occupation<D> {
    #[inline]
    fn piece(&mut self, t0: f64, h: f64, u0: f64, u1: f64, rate: f64) {
        let disc = if (t0 - self.next.0).abs() <= 1e-12 * t0.max(1.0) {
            self.next.1
        } else {
            (-self.q * t0).exp()
        };
        let (w, len) = if h == self.dt {
            self.next = (t0 + h, disc * self.decay_dt);
            (self.w_dt, self.len_dt)
        } else {
            self.next = (t0 + h, (-self.q * (t0 + h)).exp());
            (discounted_trapezoid(self.q, h), discounted_length(self.q, h))
        };
        self.add(u0, disc * w[0]);
        self.add(u1, disc * w[1]);
        self.control += rate * disc * len;
    }

    fn finish(&mut self, t: f64, u: f64, rate: f64) {
        let tail = (-self.q * t).exp() / self.q;
        self.add(u, tail);
        self.control += rate * tail;
        if let Some((pu, pw)) = self.pending.take() {
            (self.deposit)(pu, pw);
        }
    }
}

/// `int e^{-qt} (g(U_t) + beta l_t) dt` over one path, including the frozen tail.
fn path_functional(
    path: &DrivingPath,
    x0: f64,
    law: &FeedbackRule,
    spec: &ProblemSpec,
    g: &(dyn Fn(f64) -> f64 + Sync),
    beta: f64,
) -> Result<f64> {
    let mut acc = 0.0;
    let mut sink = Occupation::new(spec.q, path.grid.dt, |u, w| acc += w * g(u));
    drive(path, x0, law, spec.alpha, &mut sink)?;
    let control = sink.control;
    Ok(acc + beta * control)
}

fn per_path<T: Send>(n: usize, f: impl Fn(u64) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    (0..n as u64).into_par_iter().map(f).collect()
}

/// `rho_hat(b)` for every `b` in `b_values` from one shared sample of `U^0`
/// started at 0, using `rho(b) = E int e^{-qt} f'(U^0_t + b) dt`.
pub fn estimate_rho_curve(spec: &ProblemSpec, b_values: &[f64], mc: &MonteCarloConfig) -> Result<RhoCurve> {
    mc.check()?;
    if b_values.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidProblem("b_values must be sorted".into()));
    }
    let law = FeedbackRule::refraction(0.0, spec);
    let rows = per_path(mc.n_paths, |i| {
        let path = DrivingPath::sample(&spec.model, mc.grid, mc.key(0, i))?;
        let mut knots = Vec::new();
        let mut sink = Occupation::new(spec.q, mc.grid.dt, |u, w| knots.push((u, w)));
        drive(&path, 0.0, &law, spec.alpha, &mut sink)?;
        Ok(b_values
            .iter()
            .map(|b| knots.iter().map(|(u, w)| w * spec.cost.f_prime(u + b)).sum::<f64>())
            .collect::<Vec<f64>>())
    })?;
    let mut rho_hat = Vec::with_capacity(b_values.len());
    let mut se = Vec::with_capacity(b_values.len());
    let mut col = vec![0.0; rows.len()];
    for j in 0..b_values.len() {
        for (c, r) in col.iter_mut().zip(&rows) {
            *c = r[j];
        }
        let s = Summary::of(&col);
        rho_hat.push(s.mean);
        se.push(s.se);
    }
    Ok(RhoCurve {
        b_values: b_values.to_vec(),
        rho_hat,
        se,
        seed: mc.seed,
    })
}

/// Discounted occupation of a batch of paths, deposited onto the nodes
/// `k * NODE_SPACING` by linear interpolation.
#[derive(Debug, Clone, Default)]
struct NodeWeights {
    lo: i64,
    w: Vec<f64>,
    paths: usize,
}

impl NodeWeights {
    #[inline]
    fn deposit(&mut self, u: f64, wt: f64) {
        let x = u / NODE_SPACING;
        let k = x.floor();
        let fr = x - k;
        let k = k as i64;
        self.reserve(k, k + 1);
        let i = (k - self.lo) as usize;
        self.w[i] += (1.0 - fr) * wt;
        self.w[i + 1] += fr * wt;
    }

    fn reserve(&mut self, a: i64, b: i64) {
        if self.w.is_empty() {
            self.lo = a - 64;
            self.w = vec![0.0; (b - a + 129) as usize];
            return;
        }
        if a < self.lo {
            let extra = (self.lo - a + 256) as usize;
            let mut nw = vec![0.0; extra];
            nw.extend_from_slice(&self.w);
            self.w = nw;
            self.lo -= extra as i64;
        }
        let hi = self.lo + self.w.len() as i64 - 1;
        if b > hi {
            self.w.resize(self.w.len() + (b - hi + 256) as usize, 0.0);
        }
    }

    fn merge(&mut self, other: &NodeWeights) {
        if other.w.is_empty() {
            self.paths += other.paths;
            return;
        }
        self.reserve(other.lo, other.lo + other.w.len() as i64 - 1);
        let off = (other.lo - self.lo) as usize;
        for (a, b) in self.w[off..].iter_mut().zip(&other.w) {
            *a += b;
        }
        self.paths += other.paths;
    }

    /// Path-averaged `sum_k w_k f'(x_k + b)`.
    fn rho(&self, spec: &ProblemSpec, b: f64) -> f64 {
        let s: f64 = self
            .w
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(i, w)| w * spec.cost.f_prime((self.lo + i as i64) as f64 * NODE_SPACING + b))
            .sum();
        s / self.paths as f64
    }
}

fn occupation_batches(spec: &ProblemSpec, mc: &MonteCarloConfig) -> Result<Vec<NodeWeights>> {
    let n = mc.n_paths;
    let k = n.min(100);
    let law = FeedbackRule::refraction(0.0, spec);
    (0..k)
        .into_par_iter()
        .map(|j| {
            let (a, b) = (j * n / k, (j + 1) * n / k);
            let mut nw = NodeWeights::default();
            for i in a..b {
                let path = DrivingPath::sample(&spec.model, mc.grid, mc.key(0, i as u64))?;
                let mut sink = Occupation::new(spec.q, mc.grid.dt, |u, w| nw.deposit(u, w));
                drive(&path, 0.0, &law, spec.alpha, &mut sink)?;
            }
            nw.paths = b - a;
            Ok(nw)
        })
        .collect()
}

/// Solves `rho(b) = beta` for the optimal threshold.
///
/// The degenerate regimes are decided from the declared limits of `f'`.
/// Otherwise one sample of `U^0` is reduced to its discounted occupation on
/// a fine node lattice, so that `rho_hat` is an exactly monotone function
/// of `b` that can be bisected without resimulating.
pub fn solve_threshold(spec: &ProblemSpec, mc: &MonteCarloConfig, tol: f64) -> Result<ThresholdResult> {
    mc.check()?;
    if !(tol > 0.0) {
        return Err(Error::InvalidProblem("tol must be > 0".into()));
    }
    let (lo_lim, hi_lim) = spec.cost.f_prime_limits;
    let target = spec.q * spec.beta;
    if lo_lim >= target {
        return Ok(ThresholdResult::degenerate(f64::NEG_INFINITY, (lo_lim / spec.q - spec.beta).abs(), mc.n_paths));
    }
    let never_reached = hi_lim < target
        || (hi_lim == target && (0..=MAX_EXPANSION).all(|k| spec.cost.f_prime(2f64.powi(k as i32)) < target));
    if never_reached {
        return Ok(ThresholdResult::degenerate(f64::INFINITY, (hi_lim / spec.q - spec.beta).abs(), mc.n_paths));
    }

    let batches = occupation_batches(spec, mc)?;
    let mut all = NodeWeights::default();
    for b in &batches {
        all.merge(b);
    }
    let rho = |b: f64| all.rho(spec, b);
    let beta = spec.beta;

    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..=MAX_EXPANSION {
        let c = 2f64.powi(k as i32);
        for b in [-c, c] {
            if rho(b) >= beta {
                hi = hi.min(b);
            } else {
                lo = lo.max(b);
            }
        }
        if lo.is_finite() && hi.is_finite() {
            break;
        }
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::BracketNotFound {
            expansions: MAX_EXPANSION,
        });
    }
    let bracket = (lo, hi);
    let mut iterations = 0;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if rho(mid) >= beta {
            hi = mid;
        } else {
            lo = mid;
        }
        iterations += 1;
    }
    let b_star = 0.5 * (lo + hi);

    let per_batch: Vec<f64> = batches.iter().map(|nw| nw.rho(spec, b_star)).collect();
    let rho_se = Summary::of(&per_batch).se;
    let h = tol.max(0.05);
    let slope = (rho(b_star + h) - rho(b_star - h)) / (2.0 * h);
    let se = if slope > 0.0 { rho_se / slope } else { f64::INFINITY };
    let tail_bound = tail_certificate(
        &spec.model,
        spec.cost.f_prime_growth(),
        b_star,
        spec.alpha,
        spec.q,
        mc.grid.horizon,
        mc.theta_bar,
        0.0,
    );
    Ok(ThresholdResult {
        b_star,
        bracket: Some(bracket),
        iterations,
        residual: (rho(b_star) - beta).abs(),
        se,
        rho_se,
        slope,
        tail_bound,
        n_paths: mc.n_paths,
    })
}

fn summarize(xs: &[f64], tail_bound: f64) -> ValueEstimate {
    let s = Summary::of(xs);
    ValueEstimate {
        mean: s.mean,
        se: s.se,
        tail_bound,
        n_paths: xs.len(),
    }
}

/// `v_pi(x0) = E int e^{-qt} (f(U_t) + beta l_t) dt` for an admissible strategy.
pub fn estimate_value(spec: &ProblemSpec, strategy: &Strategy, x0: f64, mc: &MonteCarloConfig) -> Result<ValueEstimate> {
    mc.check()?;
    let law = strategy.control_law(spec)?;
    let f = |u: f64| spec.cost.f(u);
    let xs = per_path(mc.n_paths, |i| {
        let path = DrivingPath::sample(&spec.model, mc.grid, mc.key(0, i))?;
        path_functional(&path, x0, &law, spec, &f, spec.beta)
    })?;
    let tail = tail_certificate(
        &spec.model,
        spec.cost.growth,
        x0,
        spec.alpha,
        spec.q,
        mc.grid.horizon,
        mc.theta_bar,
        spec.beta.abs() * spec.alpha,
    );
    Ok(summarize(&xs, tail))
}

/// `E int e^{-qt} f'(U^b_t) dt` along the refracted path at `b` (extended
/// real) from `x0`.
pub fn estimate_value_derivative(spec: &ProblemSpec, b: f64, x0: f64, mc: &MonteCarloConfig) -> Result<ValueEstimate> {
    mc.check()?;
    let (lo, hi) = spec.cost.f_prime_limits;
    if lo == hi {
        // Constant marginal cost: the occupation integral is exactly f' / q.
        return Ok(ValueEstimate {
            mean: lo / spec.q,
            se: 0.0,
            tail_bound: 0.0,
            n_paths: mc.n_paths,
        });
    }
    let law = Strategy::Refraction { b }.control_law(spec)?;
    let fp = |u: f64| spec.cost.f_prime(u);
    let xs = per_path(mc.n_paths, |i| {
        let path = DrivingPath::sample(&spec.model, mc.grid, mc.key(0, i))?;
        path_functional(&path, x0, &law, spec, &fp, 0.0)
    })?;
    let tail = tail_certificate(
        &spec.model,
        spec.cost.f_prime_growth(),
        x0,
        spec.alpha,
        spec.q,
        mc.grid.horizon,
        mc.theta_bar,
        0.0,
    );
    Ok(summarize(&xs, tail))
}

/// Per-path comparison of the refracted paths from `x0` and `x0 + eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct SandwichReport {
    pub b: f64,
    pub x0: f64,
    pub eps: f64,
    /// `int e^{-qt} f'(U_t)`.
    pub lower: Summary,
    /// `int e^{-qt} (f(U^eps_t) - f(U_t)) / (U^eps_t - U_t)`.
    pub chord: Summary,
    /// `int e^{-qt} f'(U^eps_t)`.
    pub upper_coupled: Summary,
    /// `int e^{-qt} f'(U_t + eps)`.
    pub upper_shift: Summary,
    /// `(v_hat(x0 + eps) - v_hat(x0)) / eps`.
    pub difference_quotient: Summary,
    /// Paths on which `lower <= chord <= upper_coupled <= upper_shift` fails.
    pub violations: usize,
    /// `difference_quotient - lower`, paired.
    pub lower_margin: Summary,
    /// `upper_shift - difference_quotient`, paired.
    pub upper_margin: Summary,
    pub n_paths: usize,
}

impl SandwichReport {
    pub fn chain_holds(&self) -> bool {
        self.violations == 0
            && self.lower.mean <= self.chord.mean
            && self.chord.mean <= self.upper_coupled.mean
            && self.upper_coupled.mean <= self.upper_shift.mean
    }

    /// The difference quotient lies in `[lower, upper_shift]` up to `k` SE.
    pub fn quotient_within(&self, k: f64) -> bool {
        self.lower_margin.mean >= -k * self.lower_margin.se && self.upper_margin.mean >= -k * self.upper_margin.se
    }
}

/// Integrates `g(t, ua, ub)`-type quantities over the union of the knots of
/// two controlled paths on the same driving path.
fn walk_pair(a: &ControlledPath, b: &ControlledPath, mut visit: impl FnMut(f64, f64, [f64; 2], [f64; 2])) {
    let mut times: Vec<f64> = a.times.iter().chain(&b.times).copied().collect();
    times.sort_by(|x, y| x.total_cmp(y));
    times.dedup();
    for w in times.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        visit(t0, t1 - t0, [a.state_at(t0), left_limit(a, t1)], [b.state_at(t0), left_limit(b, t1)]);
    }
}

fn left_limit(p: &ControlledPath, t: f64) -> f64 {
    let i = p.times.partition_point(|s| *s < t);
    if i == 0 {
        return p.u[0];
    }
    if i >= p.len() {
        return p.terminal_state();
    }
    let (t0, t1) = (p.times[i - 1], p.times[i]);
    p.u[i - 1] + (p.u[i] - p.u[i - 1]) * (t - t0) / (t1 - t0)
}

/// Checks the difference-quotient sandwich for the refraction strategy at
/// `b` under shared driving paths.
pub fn sandwich_check(spec: &ProblemSpec, b: f64, x0: f64, eps: f64, mc: &MonteCarloConfig) -> Result<SandwichReport> {
    mc.check()?;
    if !b.is_finite() || !(eps > 0.0) {
        return Err(Error::InvalidProblem("sandwich needs finite b and eps > 0".into()));
    }
    let strategy = Strategy::Refraction { b };
    let q = spec.q;
    let cost = &spec.cost;
    let rows = per_path(mc.n_paths, |i| {
        let path = DrivingPath::sample(&spec.model, mc.grid, mc.key(0, i))?;
        let pa = crate::refraction::apply_strategy(&path, x0, &strategy, spec)?;
        let pb = crate::refraction::apply_strategy(&path, x0 + eps, &strategy, spec)?;
        let chord = |ua: f64, ub: f64| {
            let d = ub - ua;
            if d.abs() <= 1e-9 * ua.abs().max(1.0) {
                cost.f_prime(0.5 * (ua + ub))
            } else {
                (cost.f(ub) - cost.f(ua)) / d
            }
        };
        // lower, chord, upper_coupled, upper_shift, J_a, J_b
        let mut acc = [0.0f64; 6];
        let mut bad = false;
        let mut add = |wt: f64, ua: f64, ub: f64| {
            let v = [cost.f_prime(ua), chord(ua, ub), cost.f_prime(ub), cost.f_prime(ua + eps), cost.f(ua), cost.f(ub)];
            for (a, x) in acc.iter_mut().zip(v) {
                *a += wt * x;
            }
        };
        walk_pair(&pa, &pb, |t0, h, ua, ub| {
            let disc = (-q * t0).exp();
            let w = discounted_trapezoid(q, h);
            add(disc * w[0], ua[0], ub[0]);
            add(disc * w[1], ua[1], ub[1]);
        });
        let tail = (-q * mc.grid.horizon).exp() / q;
        add(tail, pa.terminal_state(), pb.terminal_state());
        let control = |p: &ControlledPath| {
            let mut c = 0.0;
            for (k, r) in p.rates.iter().enumerate() {
                let (t0, t1) = (p.times[k], p.times[k + 1]);
                c += r * (-q * t0).exp() * discounted_length(q, t1 - t0);
            }
            c + p.terminal_rate * tail
        };
        let ja = acc[4] + spec.beta * control(&pa);
        let jb = acc[5] + spec.beta * control(&pb);
        let slack = 1e-12 * acc[..4].iter().map(|x| x.abs()).fold(1.0, f64::max);
        if acc[0] > acc[1] + slack || acc[1] > acc[2] + slack || acc[2] > acc[3] + slack {
            bad = true;
        }
        Ok(([acc[0], acc[1], acc[2], acc[3], (jb - ja) / eps], bad))
    })?;
    let col = |j: usize| Summary::of(&rows.iter().map(|r| r.0[j]).collect::<Vec<_>>());
    let lower_margin = Summary::of(&rows.iter().map(|r| r.0[4] - r.0[0]).collect::<Vec<_>>());
    let upper_margin = Summary::of(&rows.iter().map(|r| r.0[3] - r.0[4]).collect::<Vec<_>>());
    Ok(SandwichReport {
        b,
        x0,
        eps,
        lower: col(0),
        chord: col(1),
        upper_coupled: col(2),
        upper_shift: col(3),
        difference_quotient: col(4),
        violations: rows.iter().filter(|r| r.1).count(),
        lower_margin,
        upper_margin,
        n_paths: mc.n_paths,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub x0: f64,
    pub strategy: String,
    pub value: Summary,
    /// `v_hat_rival - v_hat_{b*}` with its paired (or independent) SE.
    pub diff: Summary,
    /// Rival beats the threshold strategy by more than 3 SE.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub b_star: f64,
    pub rows: Vec<ComparisonRow>,
    pub n_paths: usize,
}

impl ComparisonReport {
    pub fn any_flagged(&self) -> bool {
        self.rows.iter().any(|r| r.flagged)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "x0,strategy,mean,se,diff,diff_se,flagged")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},\"{}\",{},{},{},{},{}",
                r.x0, r.strategy, r.value.mean, r.value.se, r.diff.mean, r.diff.se, r.flagged
            )?;
        }
        Ok(())
    }
}

/// Values of the threshold strategy at `b_star` and of each rival at every
/// `x0`, with differences taken path by path.
pub fn compare_strategies(
    spec: &ProblemSpec,
    b_star: f64,
    x0_grid: &[f64],
    rivals: &[Strategy],
    mc: &MonteCarloConfig,
) -> Result<ComparisonReport> {
    mc.check()?;
    let mut strategies = vec![Strategy::Refraction { b: b_star }];
    strategies.extend(rivals.iter().cloned());
    let laws = strategies
        .iter()
        .map(|s| s.control_law(spec))
        .collect::<Result<Vec<_>>>()?;
    let f = |u: f64| spec.cost.f(u);
    let ns = strategies.len();
    let rows = per_path(mc.n_paths, |i| {
        let mut out = Vec::with_capacity(ns * x0_grid.len());
        let shared = if mc.independent_seeds {
            None
        } else {
            Some(DrivingPath::sample(&spec.model, mc.grid, mc.key(0, i))?)
        };
        for (s, law) in laws.iter().enumerate() {
            let own;
            let path = match &shared {
                Some(p) => p,
                None => {
                    own = DrivingPath::sample(&spec.model, mc.grid, mc.key(s as u64, i))?;
                    &own
                }
            };
            for &x0 in x0_grid {
                out.push(path_functional(path, x0, law, spec, &f, spec.beta)?);
            }
        }
        Ok(out)
    })?;
    let nx = x0_grid.len();
    let mut report = Vec::new();
    for (ix, &x0) in x0_grid.iter().enumerate() {
        let base: Vec<f64> = rows.iter().map(|r| r[ix]).collect();
        let base_s = Summary::of(&base);
        for (s, strategy) in strategies.iter().enumerate() {
            let vals: Vec<f64> = rows.iter().map(|r| r[s * nx + ix]).collect();
            let value = Summary::of(&vals);
            let diff = if mc.independent_seeds {
                Summary {
                    mean: value.mean - base_s.mean,
                    se: (value.se * value.se + base_s.se * base_s.se).sqrt(),
                }
            } else {
                Summary::of(&vals.iter().zip(&base).map(|(v, b)| v - b).collect::<Vec<_>>())
            };
            report.push(ComparisonRow {
                x0,
                strategy: if s == 0 { format!("optimal {}", strategy.label()) } else { strategy.label() },
                value,
                flagged: s > 0 && diff.mean < -3.0 * diff.se,
                diff,
            });
        }
    }
    Ok(ComparisonReport {
        b_star,
        rows: report,
        n_paths: mc.n_paths,
    })
}

/// Rows of `values.csv`.
pub fn write_values_csv(path: &Path, rows: &[(String, f64, ValueEstimate)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "strategy,x0,mean,se,tail_bound")?;
    for (label, x0, v) in rows {
        writeln!(w, "\"{}\",{},{},{},{}", label, x0, v.mean, v.se, v.tail_bound)?;
    }
    Ok(())
}

/// Discounted time spent in each bin along linear pieces, computed exactly.
struct BinOccupation<'a> {
    q: f64,
    edges: &'a [f64],
    mass: Vec<f64>,
    /// `(dt, e^{-q dt}, discounted length of dt)`.
    step: (f64, f64, f64),
    /// Start of the next piece and its discount factor.
    next: (f64, f64),
}

impl<'a> BinOccupation<'a> {
    fn new(q: f64, dt: f64, edges: &'a [f64]) -> Self {
        Self {
            q,
            edges,
            mass: vec![0.0; edges.len() - 1],
            step: (dt, (-q * dt).exp(), discounted_length(q, dt)),
            next: (0.0, 1.0),
        }
    }

    fn discount(&mut self, t0: f64, h: f64) -> f64 {
        let d = if t0 == self.next.0 { self.next.1 } else { (-self.q * t0).exp() };
        self.next = if h == self.step.0 {
            (t0 + h, d * self.step.1)
        } else {
            (t0 + h, (-self.q * (t0 + h)).exp())
        };
        d
    }
}

impl BinOccupation<'_> {
    fn bin(&self, u: f64) -> Option<usize> {
        let k = self.edges.partition_point(|e| *e <= u);
        (k >= 1 && k < self.edges.len()).then(|| k - 1)
    }

    /// Adds `int_{ta}^{tb} e^{-qt} dt` to the bin holding the segment.
    fn segment(&mut self, ta: f64, tb: f64, u_mid: f64) {
        if tb > ta {
            if let Some(k) = self.bin(u_mid) {
                self.mass[k] += (-self.q * ta).exp() * discounted_length(self.q, tb - ta);
            }
        }
    }
}

impl PathSink for BinOccupation<'_> {
    fn piece(&mut self, t0: f64, h: f64, u0: f64, u1: f64, _rate: f64) {
        let disc = self.discount(t0, h);
        let (lo, hi) = (u0.min(u1), u0.max(u1));
        let a = self.edges.partition_point(|e| *e <= lo);
        let b = self.edges.partition_point(|e| *e < hi);
        if a >= b {
            // No edge crossed.
            if let Some(k) = self.bin(lo) {
                let len = if h == self.step.0 { self.step.2 } else { discounted_length(self.q, h) };
                self.mass[k] += disc * len;
            }
            return;
        }
        let mut cuts: Vec<f64> = self.edges[a..b]
            .iter()
            .map(|e| t0 + h * (e - u0) / (u1 - u0))
            .collect();
        if u1 < u0 {
            cuts.reverse();
        }
        let mut ta = t0;
        for tc in cuts.into_iter().chain(std::iter::once(t0 + h)) {
            let tc = tc.clamp(ta, t0 + h);
            let tm = 0.5 * (ta + tc);
            self.segment(ta, tc, u0 + (u1 - u0) * (tm - t0) / h);
            ta = tc;
        }
    }

    fn finish(&mut self, t: f64, u: f64, _rate: f64) {
        if let Some(k) = self.bin(u) {
            self.mass[k] += (-self.q * t).exp() / self.q;
        }
    }
}

/// Discounted occupation `E int e^{-qt} 1{U^b_t in bin} dt` of the refracted
/// path from `x0` for the bins delimited by `edges`.
pub fn occupation_histogram(
    spec: &ProblemSpec,
    b: f64,
    x0: f64,
    edges: &[f64],
    mc: &MonteCarloConfig,
) -> Result<Vec<Summary>> {
    mc.check()?;
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidProblem("histogram edges must be increasing".into()));
    }
    let law = Strategy::Refraction { b }.control_law(spec)?;
    let rows = per_path(mc.n_paths, |i| {
        let path = DrivingPath::sample(&spec.model, mc.grid, mc.key(0, i))?;
        let mut sink = BinOccupation::new(spec.q, mc.grid.dt, edges);
        drive(&path, x0, &law, spec.alpha, &mut sink)?;
        Ok(sink.mass)
    })?;
    Ok((0..edges.len() - 1)
        .map(|k| Summary::of(&rows.iter().map(|r| r[k]).collect::<Vec<_>>()))
        .collect())
}

/// Central difference of the value against the pathwise derivative estimate,
/// all three on the same paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeIdentity {
    /// `(v_hat(x0 + eps) - v_hat(x0 - eps)) / (2 eps)`.
    pub quotient: Summary,
    /// `E int e^{-qt} f'(U_t) dt` from `x0`.
    pub derivative: Summary,
    /// `quotient - derivative`, paired.
    pub diff: Summary,
}

pub fn derivative_identity(spec: &ProblemSpec, b: f64, x0: f64, eps: f64, mc: &MonteCarloConfig) -> Result<DerivativeIdentity> {
    mc.check()?;
    let law = Strategy::Refraction { b }.control_law(spec)?;
    let f = |u: f64| spec.cost.f(u);
    let fp = |u: f64| spec.cost.f_prime(u);
    let rows = per_path(mc.n_paths, |i| {
        let path = DrivingPath::sample(&spec.model, mc.grid, mc.key(0, i))?;
        let up = path_functional(&path, x0 + eps, &law, spec, &f, spec.beta)?;
        let down = path_functional(&path, x0 - eps, &law, spec, &f, spec.beta)?;
        let d = path_functional(&path, x0, &law, spec, &fp, 0.0)?;
        Ok(((up - down) / (2.0 * eps), d))
    })?;
    let quot: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let der: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let diff: Vec<f64> = rows.iter().map(|r| r.0 - r.1).collect();
    Ok(DerivativeIdentity {
        quotient: Summary::of(&quot),
        derivative: Summary::of(&der),
        diff: Summary::of(&diff),
    })
}

/// Pathwise checks on `U^{[eps]} - U` and `L^{[eps]} - L` for refracted
/// paths from `x0 + eps` and `x0` on shared driving paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingReport {
    pub n_paths: usize,
    /// Recorded times checked, summed over paths.
    pub checked: usize,
    /// Times at which a monotonicity or `[0, eps]` bound fails.
    pub violations: usize,
    pub min_state_gap: f64,
    pub max_state_gap: f64,
    pub min_control_gap: f64,
    pub max_control_gap: f64,
}

pub fn coupling_check(spec: &ProblemSpec, b: f64, x0: f64, eps: f64, mc: &MonteCarloConfig) -> Result<CouplingReport> {
    mc.check()?;
    if !(eps > 0.0) {
        return Err(Error::InvalidProblem("coupling check needs eps > 0".into()));
    }
    let strategy = Strategy::Refraction { b };
    let rows = per_path(mc.n_paths, |i| {
        let path = DrivingPath::sample(&spec.model, mc.grid, mc.key(0, i))?;
        let pa = crate::refraction::apply_strategy(&path, x0, &strategy, spec)?;
        let pb = crate::refraction::apply_strategy(&path, x0 + eps, &strategy, spec)?;
        let mut times: Vec<f64> = pa.times.iter().chain(&pb.times).copied().collect();
        times.sort_by(|x, y| x.total_cmp(y));
        times.dedup();
        let slack = 1e-9 * (1.0 + x0.abs() + eps);
        let (mut prev_du, mut prev_dl) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut bad = 0usize;
        let mut gaps = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
        for &t in &times {
            let du = pb.state_at(t) - pa.state_at(t);
            let dl = pb.control_at(t) - pa.control_at(t);
            let ok = du >= -slack
                && du <= eps + slack
                && dl >= -slack
                && dl <= eps + slack
                && du <= prev_du + slack
                && dl >= prev_dl - slack;
            bad += usize::from(!ok);
            gaps = [gaps[0].min(du), gaps[1].max(du), gaps[2].min(dl), gaps[3].max(dl)];
            prev_du = du;
            prev_dl = dl;
        }
        Ok((times.len(), bad, gaps))
    })?;
    let fold = |j: usize, init: f64, op: fn(f64, f64) -> f64| rows.iter().map(|r| r.2[j]).fold(init, op);
    Ok(CouplingReport {
        n_paths: mc.n_paths,
        checked: rows.iter().map(|r| r.0).sum(),
        violations: rows.iter().map(|r| r.1).sum(),
        min_state_gap: fold(0, f64::INFINITY, f64::min),
        max_state_gap: fold(1, f64::NEG_INFINITY, f64::max),
        min_control_gap: fold(2, f64::INFINITY, f64::min),
        max_control_gap: fold(3, f64::NEG_INFINITY, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostSpec;

    fn deterministic() -> ProblemSpec {
        ProblemSpec::new(LevyModel::brownian(1.0, 0.0), CostSpec::quadratic(1.0, 0.0), 1.0, 4.0, 2.0).unwrap()
    }

    fn mc(n: usize, dt: f64, t: f64) -> MonteCarloConfig {
        MonteCarloConfig::new(n, TimeGrid::new(dt, t).unwrap(), 7)
    }

    #[test]
    fn summary_matches_hand_computation() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rho_curve_constant_marginal_cost() {
        let spec = ProblemSpec::new(LevyModel::brownian(0.0, 1.0), CostSpec::linear(3.0), 1.0, 2.0, 1.0).unwrap();
        let c = estimate_rho_curve(&spec, &[-1.0, 0.0, 2.0], &mc(50, 0.01, 10.0)).unwrap();
        for (r, s) in c.rho_hat.iter().zip(&c.se) {
            assert!((r - 3.0).abs() < 1e-12);
            assert!(*s < 1e-12);
        }
    }

    #[test]
    fn rho_curve_deterministic_is_2b() {
        let c = estimate_rho_curve(&deterministic(), &[-1.0, 0.5, 2.0, 3.0], &mc(3, 0.1, 10.0)).unwrap();
        for (b, r) in c.b_values.iter().zip(&c.rho_hat) {
            assert!((r - 2.0 * b).abs() < 1e-12, "{b} {r}");
        }
    }

    #[test]
    fn deterministic_threshold_value_and_derivative() {
        let spec = deterministic();
        let m = mc(2, 0.01, 20.0);
        let th = solve_threshold(&spec, &m, 1e-4).unwrap();
        assert!((th.b_star - 2.0).abs() < 1e-4, "{th:?}");
        let v = estimate_value(&spec, &Strategy::Refraction { b: 2.0 }, 2.0, &m).unwrap();
        assert!((v.mean - 8.0).abs() < 1e-10, "{v:?}");
        let d = estimate_value_derivative(&spec, 2.0, 2.0, &m).unwrap();
        assert!((d.mean - 4.0).abs() < 1e-10);
    }

    #[test]
    fn degenerate_thresholds() {
        let m = mc(2, 0.1, 5.0);
        for (beta, expect) in [(2.0, f64::NEG_INFINITY), (5.0, f64::INFINITY), (3.0, f64::NEG_INFINITY)] {
            let spec = ProblemSpec::new(LevyModel::brownian(0.0, 1.0), CostSpec::linear(3.0), 1.0, beta, 1.0).unwrap();
            assert_eq!(solve_threshold(&spec, &m, 1e-3).unwrap().b_star, expect);
        }
    }

    #[test]
    fn zero_strategy_on_still_model_costs_nothing() {
        let spec = ProblemSpec::new(LevyModel::brownian(0.0, 0.0), CostSpec::quadratic(1.0, 0.0), 1.0, 1.0, 1.0).unwrap();
        let v = estimate_value(&spec, &Strategy::Constant { rate: 0.0 }, 0.0, &mc(2, 0.1, 5.0)).unwrap();
        assert_eq!(v.mean, 0.0);
    }

    #[test]
    fn histogram_and_direct_rho_agree_for_quadratic_cost() {
        let spec = ProblemSpec::new(LevyModel::brownian(0.0, 1.0), CostSpec::quadratic(1.0, 0.0), 1.0, 1.0, 1.0).unwrap();
        let m = mc(200, 0.01, 12.0);
        let th = solve_threshold(&spec, &m, 1e-6).unwrap();
        let c = estimate_rho_curve(&spec, &[th.b_star], &m).unwrap();
        assert!((c.rho_hat[0] - 1.0).abs() < 1e-5, "{}", c.rho_hat[0]);
    }

    #[test]
    fn tail_certificate_dominates_known_tail() {
        // Still process at x0 = 1, f = x^2, no control: tail is e^{-qT}/q.
        let m = LevyModel::brownian(0.0, 0.0);
        let g = CostSpec::quadratic(1.0, 0.0).growth;
        let cert = tail_certificate(&m, g, 1.0, 0.0, 1.0, 5.0, None, 0.0);
        assert!(cert >= (-5f64).exp());
        assert!(cert < 1.0);
        // Brownian: E int_T^inf e^{-qt} (x0 + B_t)^2 = e^{-qT} (x0^2 + T + 1/q) / q.
        let m = LevyModel::brownian(0.0, 1.0);
        let exact = (-5f64).exp() * (1.0 + 5.0 + 1.0);
        assert!(tail_certificate(&m, g, 1.0, 0.0, 1.0, 5.0, None, 0.0) >= exact);
    }

    #[test]
    fn compare_identical_strategy_has_zero_difference() {
        let spec = ProblemSpec::new(LevyModel::brownian(0.0, 1.0), CostSpec::quadratic(1.0, 0.0), 1.0, 1.0, 1.0).unwrap();
        let r = compare_strategies(&spec, 0.3, &[0.0], &[Strategy::Refraction { b: 0.3 }], &mc(20, 0.05, 5.0)).unwrap();
        assert_eq!(r.rows[1].diff.mean, 0.0);
        assert_eq!(r.rows[1].diff.se, 0.0);
        assert!(!r.any_flagged());
    }

    #[test]
    fn sandwich_is_equality_for_linear_cost() {
        let spec = ProblemSpec::new(LevyModel::brownian(0.0, 1.0), CostSpec::linear(2.0), 1.0, 1.0, 1.0).unwrap();
        let r = sandwich_check(&spec, 0.0, 0.0, 0.1, &mc(20, 0.05, 8.0)).unwrap();
        for s in [r.lower, r.chord, r.upper_coupled, r.upper_shift] {
            assert!((s.mean - 2.0).abs() < 1e-12);
        }
        assert!(r.chain_holds());
    }

    #[test]
    fn histogram_of_deterministic_drift() {
        // U_t = t until it stops at b = 2 (case 2 sticks): mass of [0, 1) is 1 - e^{-1}.
        let spec = deterministic();
        let edges = [-1.0, 0.0, 1.0, 1.5, 2.5];
        let h = occupation_histogram(&spec, 2.0, 0.0, &edges, &mc(3, 0.01, 20.0)).unwrap();
        let e = |t: f64| (-t).exp();
        let want = [0.0, 1.0 - e(1.0), e(1.0) - e(1.5), e(1.5)];
        for (s, w) in h.iter().zip(want) {
            assert!((s.mean - w).abs() < 1e-12, "{} {w}", s.mean);
            assert!(s.se < 1e-15);
        }
    }

    #[test]
    fn histogram_mass_is_one_over_q() {
        let spec = ProblemSpec::new(LevyModel::brownian(0.2, 1.0), CostSpec::quadratic(1.0, 0.0), 2.0, 1.0, 1.0).unwrap();
        let edges: Vec<f64> = (0..=400).map(|k| -50.0 + 0.25 * k as f64).collect();
        let h = occupation_histogram(&spec, 0.0, 0.5, &edges, &mc(50, 0.01, 10.0)).unwrap();
        let total: f64 = h.iter().map(|s| s.mean).sum();
        assert!((total - 0.5).abs() < 1e-12);
    }

    #[test]
    fn derivative_identity_on_deterministic_model() {
        let r = derivative_identity(&deterministic(), 2.0, 1.0, 0.05, &mc(2, 0.001, 20.0)).unwrap();
        // v'(1) = 2 + 2 - 2 e^{-1} with the closed-form value below b = 2.
        let exact = 4.0 - 2.0 * (-1f64).exp();
        assert!((r.derivative.mean - exact).abs() < 1e-3, "{}", r.derivative.mean);
        assert!(r.diff.mean.abs() < 5e-3);
    }

    #[test]
    fn coupling_has_no_violations() {
        use crate::levy_model::{JumpSpec, JumpTerm, Side};
        let jumps = JumpSpec::new(vec![JumpTerm::exponential(Side::Down, 1.0, 2.0), JumpTerm::point_mass(Side::Up, 0.5, 1.0)]);
        for sigma in [0.0, 0.7] {
            let model = LevyModel::new(1.0, sigma, jumps.clone()).unwrap();
            let spec = ProblemSpec::new(model, CostSpec::quadratic(1.0, 0.0), 1.0, 1.0, 1.5).unwrap();
            let r = coupling_check(&spec, 0.5, 0.0, 0.3, &mc(50, 0.01, 10.0)).unwrap();
            assert_eq!(r.violations, 0, "{r:?}");
            assert!(r.max_state_gap <= 0.3 + 1e-9 && r.min_state_gap >= -1e-9);
        }
    }
}

//! Controlled paths: refraction strategies and other admissible feedback
//! strategies applied to a [`DrivingPath`].
//!
//! Inside a grid cell the continuous part of `X` is linear, so for a
//! piecewise-constant rate rule the controlled state solves
//! `dU = (s - r(U)) dt` exactly: the stepper moves linearly until `U` reaches
//! a breakpoint of the rule, switches rate there, and slides along the
//! breakpoint with rate `s` when neither side pushes it away. Jumps are
//! applied atomically at their marks. Rules given as arbitrary closures are
//! frozen at the start of every piece instead.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::levy_model::{CaseTag, ProblemSpec};
use crate::pathsim::DrivingPath;

/// The refraction rate `h^b(y)`.
///
/// `delta` must be supplied in case 2 and is ignored otherwise.
pub fn refraction_rate(y: f64, b: f64, tag: CaseTag, alpha: f64, delta: Option<f64>) -> f64 {
    if y > b {
        alpha
    } else if y == b && tag == CaseTag::Case2 {
        delta.expect("case 2 refraction needs the drift delta")
    } else {
        0.0
    }
}

/// Piecewise-constant rate rule: `rates[j]` on `(breaks[j-1], breaks[j])`,
/// `at_break[i]` exactly at `breaks[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateProfile {
    breaks: Vec<f64>,
    rates: Vec<f64>,
    at_break: Vec<f64>,
}

impl RateProfile {
    pub fn new(breaks: Vec<f64>, rates: Vec<f64>, at_break: Vec<f64>) -> Result<Self> {
        if rates.len() != breaks.len() + 1 || at_break.len() != breaks.len() {
            return Err(Error::InvalidProblem("rate profile shape mismatch".into()));
        }
        if breaks.windows(2).any(|w| !(w[0] < w[1])) || breaks.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidProblem("rate profile breaks must be finite and increasing".into()));
        }
        Ok(Self {
            breaks,
            rates,
            at_break,
        })
    }

    pub fn constant(rate: f64) -> Self {
        Self {
            breaks: vec![],
            rates: vec![rate],
            at_break: vec![],
        }
    }

    /// `h^b` as a profile; `b = +inf` gives rate 0 and `b = -inf` rate `alpha`.
    pub fn refraction(b: f64, tag: CaseTag, alpha: f64, delta: Option<f64>) -> Self {
        if b == f64::INFINITY {
            return Self::constant(0.0);
        }
        if b == f64::NEG_INFINITY {
            return Self::constant(alpha);
        }
        let at = refraction_rate(b, b, tag, alpha, delta);
        Self {
            breaks: vec![b],
            rates: vec![0.0, alpha],
            at_break: vec![at],
        }
    }

    pub fn rate_at(&self, y: f64) -> f64 {
        match self.breaks.binary_search_by(|b| b.total_cmp(&y)) {
            Ok(i) => self.at_break[i],
            Err(j) => self.rates[j],
        }
    }

    fn rates_within(&self, alpha: f64) -> bool {
        self.rates.iter().chain(&self.at_break).all(|r| (0.0..=alpha).contains(r))
    }

    fn locate(&self, u: f64) -> Pos {
        match self.breaks.binary_search_by(|b| b.total_cmp(&u)) {
            Ok(i) => Pos::At(i),
            Err(j) => Pos::In(j),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Pos {
    At(usize),
    In(usize),
}

/// Feedback rule `l_t = rule(U_t)`.
#[derive(Clone)]
pub enum FeedbackRule {
    Profile(RateProfile),
    Closure(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for FeedbackRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeedbackRule::Profile(p) => f.debug_tuple("Profile").field(p).finish(),
            FeedbackRule::Closure(_) => f.write_str("Closure(..)"),
        }
    }
}

impl FeedbackRule {
    /// The refraction rule of `spec` at threshold `b`.
    pub fn refraction(b: f64, spec: &ProblemSpec) -> Self {
        let (class, tag) = spec.classify();
        FeedbackRule::Profile(RateProfile::refraction(b, tag, spec.alpha, class.delta()))
    }

    pub fn closure(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        FeedbackRule::Closure(Arc::new(f))
    }
}

/// Admissible strategy.
#[derive(Debug, Clone)]
pub enum Strategy {
    Refraction { b: f64 },
    Constant { rate: f64 },
    Feedback(FeedbackRule),
}

impl Strategy {
    pub fn label(&self) -> String {
        match self {
            Strategy::Refraction { b } => format!("refraction(b={b})"),
            Strategy::Constant { rate } => format!("constant(r={rate})"),
            Strategy::Feedback(FeedbackRule::Profile(_)) => "feedback(profile)".into(),
            Strategy::Feedback(FeedbackRule::Closure(_)) => "feedback(closure)".into(),
        }
    }

    /// Resolves the strategy against a problem into the rule the stepper runs.
    pub fn control_law(&self, spec: &ProblemSpec) -> Result<FeedbackRule> {
        let law = match self {
            Strategy::Refraction { b } => {
                if b.is_nan() {
                    return Err(Error::InvalidProblem("refraction threshold is NaN".into()));
                }
                FeedbackRule::refraction(*b, spec)
            }
            Strategy::Constant { rate } => FeedbackRule::Profile(RateProfile::constant(*rate)),
            Strategy::Feedback(rule) => rule.clone(),
        };
        if let FeedbackRule::Profile(p) = &law {
            if !p.rates_within(spec.alpha) {
                let bad = p
                    .rates
                    .iter()
                    .chain(&p.at_break)
                    .find(|r| !(0.0..=spec.alpha).contains(*r))
                    .copied()
                    .unwrap_or(f64::NAN);
                return Err(Error::Admissibility {
                    rate: bad,
                    state: f64::NAN,
                    alpha: spec.alpha,
                });
            }
        }
        Ok(law)
    }
}

/// Receives the pieces of a controlled path in time order. Within a piece the
/// state moves linearly from `u0` to `u1` under a constant `rate`.
pub trait PathSink {
    fn piece(&mut self, t0: f64, h: f64, u0: f64, u1: f64, rate: f64);
    fn jump(&mut self, _t: f64, _from: f64, _to: f64) {}
    /// Called once at the horizon with the terminal state and the last rate.
    fn finish(&mut self, _t: f64, _u: f64, _rate: f64) {}
}

/// Runs `law` along `path` from `x0`, feeding `sink`.
pub fn drive<S: PathSink + ?Sized>(
    path: &DrivingPath,
    x0: f64,
    law: &FeedbackRule,
    alpha: f64,
    sink: &mut S,
) -> Result<()> {
    let grid = path.grid;
    let gauss = path.gaussian_increments();
    let jumps = path.jump_marks();
    let drift = path.drift_rate();
    let n = grid.n_steps();
    let mut u = x0 + path.initial_value();
    let mut last_rate = 0.0;
    let mut j = 0;
    let mut stepper = Stepper::new(law, alpha, u);
    for k in 0..n {
        let t_start = grid.time(k);
        let t_end = grid.time(k + 1);
        let len = t_end - t_start;
        let slope = drift + gauss[k] / len;
        let last_cell = k + 1 == n;
        let mut cur = t_start;
        while j < jumps.len() && (jumps[j].time < t_end || (last_cell && jumps[j].time <= t_end)) {
            let tj = jumps[j].time.max(cur);
            if tj > cur {
                u = stepper.advance(slope, cur, tj - cur, u, &mut last_rate, sink)?;
            }
            let to = u + jumps[j].size;
            sink.jump(tj, u, to);
            u = to;
            stepper.relocate(u);
            cur = tj;
            j += 1;
        }
        if t_end > cur {
            u = stepper.advance(slope, cur, t_end - cur, u, &mut last_rate, sink)?;
        }
    }
    sink.finish(grid.horizon, u, last_rate);
    Ok(())
}

struct Stepper<'a> {
    law: &'a FeedbackRule,
    alpha: f64,
    pos: Pos,
}

impl<'a> Stepper<'a> {
    fn new(law: &'a FeedbackRule, alpha: f64, u: f64) -> Self {
        let mut s = Self {
            law,
            alpha,
            pos: Pos::In(0),
        };
        s.relocate(u);
        s
    }

    fn relocate(&mut self, u: f64) {
        if let FeedbackRule::Profile(p) = self.law {
            self.pos = p.locate(u);
        }
    }

    #[inline]
    fn advance<S: PathSink + ?Sized>(
        &mut self,
        slope: f64,
        t: f64,
        h: f64,
        u: f64,
        last_rate: &mut f64,
        sink: &mut S,
    ) -> Result<f64> {
        match self.law {
            FeedbackRule::Closure(rule) => {
                let r = rule(u);
                if !(r >= 0.0 && r <= self.alpha) {
                    return Err(Error::Admissibility {
                        rate: r,
                        state: u,
                        alpha: self.alpha,
                    });
                }
                let u1 = u + (slope - r) * h;
                sink.piece(t, h, u, u1, r);
                *last_rate = r;
                Ok(u1)
            }
            FeedbackRule::Profile(p) => Ok(self.advance_profile(p, slope, t, h, u, last_rate, sink)),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn advance_profile<S: PathSink + ?Sized>(
        &mut self,
        p: &RateProfile,
        slope: f64,
        mut t: f64,
        mut rem: f64,
        mut u: f64,
        last_rate: &mut f64,
        sink: &mut S,
    ) -> f64 {
        let nb = p.breaks.len();
        while rem > 0.0 {
            // Region to move in, its rate, and the velocity.
            let (region, v) = match self.pos {
                Pos::In(j) => (j, slope - p.rates[j]),
                Pos::At(i) => {
                    let up = slope - p.rates[i + 1];
                    let down = slope - p.rates[i];
                    if up > 0.0 {
                        (i + 1, up)
                    } else if down < 0.0 {
                        (i, down)
                    } else {
                        // Held at the breakpoint: the control absorbs the slope.
                        sink.piece(t, rem, u, u, slope);
                        *last_rate = slope;
                        return u;
                    }
                }
            };
            let rate = p.rates[region];
            let target = if v > 0.0 && region < nb {
                Some((region, p.breaks[region]))
            } else if v < 0.0 && region > 0 {
                Some((region - 1, p.breaks[region - 1]))
            } else {
                None
            };
            match target {
                Some((bi, level)) if (level - u) / v <= rem => {
                    let tau = (level - u) / v;
                    if tau > 0.0 {
                        sink.piece(t, tau, u, level, rate);
                        *last_rate = rate;
                    }
                    t += tau;
                    rem -= tau;
                    u = level;
                    self.pos = Pos::At(bi);
                }
                _ => {
                    let u1 = u + v * rem;
                    sink.piece(t, rem, u, u1, rate);
                    *last_rate = rate;
                    self.pos = Pos::In(region);
                    return u1;
                }
            }
        }
        u
    }
}

/// Controlled path `(U, L, l)` recorded at every grid time, jump mark
/// (before and after the jump) and rate switch.
#[derive(Debug, Clone, Default)]
pub struct ControlledPath {
    pub times: Vec<f64>,
    pub u: Vec<f64>,
    pub big_l: Vec<f64>,
    /// `rates[i]` is the control rate on `[times[i], times[i+1]]`; zero on
    /// the degenerate interval of a jump.
    pub rates: Vec<f64>,
    pub terminal_rate: f64,
}

impl ControlledPath {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn terminal_state(&self) -> f64 {
        *self.u.last().unwrap()
    }

    /// `sum l dt` over all pieces.
    pub fn total_control(&self) -> f64 {
        self.rates
            .iter()
            .zip(self.times.windows(2))
            .map(|(r, w)| r * (w[1] - w[0]))
            .sum()
    }

    /// State at time `t` (right-continuous at jumps).
    pub fn state_at(&self, t: f64) -> f64 {
        let i = self.times.partition_point(|s| *s <= t);
        if i == 0 {
            return self.u[0];
        }
        let i = i - 1;
        if i + 1 >= self.len() {
            return self.u[i];
        }
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        if t1 == t0 {
            return self.u[i + 1];
        }
        self.u[i] + (self.u[i + 1] - self.u[i]) * (t - t0) / (t1 - t0)
    }

    /// Cumulative control `L_t`.
    pub fn control_at(&self, t: f64) -> f64 {
        let i = self.times.partition_point(|s| *s <= t);
        if i == 0 {
            return 0.0;
        }
        let i = i - 1;
        if i + 1 >= self.len() {
            return self.big_l[i] + self.terminal_rate * (t - self.times[i]);
        }
        self.big_l[i] + self.rates[i] * (t - self.times[i])
    }

    /// CSV with columns `t, U, L, l`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "t,U,L,l")?;
        for i in 0..self.len() {
            let l = self.rates.get(i).copied().unwrap_or(self.terminal_rate);
            writeln!(w, "{},{},{},{}", self.times[i], self.u[i], self.big_l[i], l)?;
        }
        Ok(())
    }
}

impl PathSink for ControlledPath {
    fn piece(&mut self, t0: f64, h: f64, u0: f64, u1: f64, rate: f64) {
        if self.times.is_empty() {
            self.times.push(t0);
            self.u.push(u0);
            self.big_l.push(0.0);
        }
        let l = *self.big_l.last().unwrap();
        self.rates.push(rate);
        self.times.push(t0 + h);
        self.u.push(u1);
        self.big_l.push(l + rate * h);
    }

    fn jump(&mut self, t: f64, from: f64, to: f64) {
        if self.times.is_empty() {
            self.times.push(t);
            self.u.push(from);
            self.big_l.push(0.0);
        }
        let l = *self.big_l.last().unwrap();
        self.rates.push(0.0);
        self.times.push(t);
        self.u.push(to);
        self.big_l.push(l);
    }

    fn finish(&mut self, t: f64, u: f64, rate: f64) {
        if self.times.is_empty() {
            self.times.push(t);
            self.u.push(u);
            self.big_l.push(0.0);
        }
        self.terminal_rate = rate;
    }
}

/// Refracted path at threshold `b` (extended real) from `x0`.
pub fn refract_path(path: &DrivingPath, x0: f64, b: f64, spec: &ProblemSpec) -> Result<ControlledPath> {
    apply_strategy(path, x0, &Strategy::Refraction { b }, spec)
}

/// Controlled path of an arbitrary admissible strategy.
pub fn apply_strategy(path: &DrivingPath, x0: f64, strategy: &Strategy, spec: &ProblemSpec) -> Result<ControlledPath> {
    let law = strategy.control_law(spec)?;
    let mut out = ControlledPath::default();
    drive(path, x0, &law, spec.alpha, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostSpec;
    use crate::levy_model::LevyModel;
    use crate::pathsim::{RngStreamKey, TimeGrid};

    fn drift_spec(delta: f64, alpha: f64) -> ProblemSpec {
        ProblemSpec::new(LevyModel::brownian(delta, 0.0), CostSpec::quadratic(1.0, 0.0), 1.0, 4.0, alpha).unwrap()
    }

    fn drift_path(delta: f64, dt: f64, t: f64) -> DrivingPath {
        DrivingPath::sample(&LevyModel::brownian(delta, 0.0), TimeGrid::new(dt, t).unwrap(), RngStreamKey::new(0, 0))
            .unwrap()
    }

    #[test]
    fn refraction_rate_examples() {
        assert_eq!(refraction_rate(1.0, 0.0, CaseTag::Case1, 2.0, None), 2.0);
        assert_eq!(refraction_rate(0.0, 0.0, CaseTag::Case1, 2.0, None), 0.0);
        assert_eq!(refraction_rate(-1.0, 0.0, CaseTag::Case1, 2.0, None), 0.0);
        assert_eq!(refraction_rate(0.0, 0.0, CaseTag::Case2, 3.0, Some(1.0)), 1.0);
    }

    #[test]
    fn case2_sticks_at_threshold() {
        // Oracle: U_t = min(-1 + 2t, 0), l_t = 2 1{t > 1/2}.
        let spec = drift_spec(2.0, 3.0);
        let path = drift_path(2.0, 0.3, 3.0);
        let cp = refract_path(&path, -1.0, 0.0, &spec).unwrap();
        for i in 0..cp.len() {
            let t = cp.times[i];
            assert!((cp.u[i] - (-1.0 + 2.0 * t).min(0.0)).abs() < 1e-12, "t={t}");
            assert!((cp.big_l[i] - 2.0 * (t - 0.5).max(0.0)).abs() < 1e-12);
        }
        for (i, r) in cp.rates.iter().enumerate() {
            let mid = 0.5 * (cp.times[i] + cp.times[i + 1]);
            assert_eq!(*r, if mid > 0.5 { 2.0 } else { 0.0 });
        }
        assert!(cp.times.iter().any(|t| (*t - 0.5).abs() < 1e-12));
    }

    #[test]
    fn case1_passes_through_threshold() {
        // delta = 2 > alpha = 1: U_t = t from 0.
        let spec = drift_spec(2.0, 1.0);
        let cp = refract_path(&drift_path(2.0, 0.25, 2.0), 0.0, 0.0, &spec).unwrap();
        for i in 0..cp.len() {
            assert!((cp.u[i] - cp.times[i]).abs() < 1e-12);
        }
        assert!((cp.total_control() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn infinite_thresholds_follow_conventions() {
        let m = LevyModel::brownian(0.2, 1.0);
        let spec = ProblemSpec::new(m.clone(), CostSpec::quadratic(1.0, 0.0), 1.0, 1.0, 0.7).unwrap();
        let grid = TimeGrid::new(0.05, 2.0).unwrap();
        let path = DrivingPath::sample(&m, grid, RngStreamKey::new(1, 3)).unwrap();
        let x = path.values_on_grid();
        let up = refract_path(&path, 0.5, f64::INFINITY, &spec).unwrap();
        assert_eq!(up.total_control(), 0.0);
        let low = refract_path(&path, 0.5, f64::NEG_INFINITY, &spec).unwrap();
        let xa = path.coupled_view(0.0, 0.7).values_on_grid();
        for k in 0..=grid.n_steps() {
            let t = grid.time(k);
            assert!((up.state_at(t) - (0.5 + x[k])).abs() < 1e-12);
            assert!((low.state_at(t) - (0.5 + xa[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn profile_and_refraction_agree() {
        let m = LevyModel::brownian(0.1, 1.0);
        let spec = ProblemSpec::new(m.clone(), CostSpec::quadratic(1.0, 0.0), 1.0, 1.0, 1.0).unwrap();
        let path = DrivingPath::sample(&m, TimeGrid::new(0.01, 3.0).unwrap(), RngStreamKey::new(5, 5)).unwrap();
        let a = refract_path(&path, 0.2, 0.3, &spec).unwrap();
        let b = apply_strategy(&path, 0.2, &Strategy::Feedback(FeedbackRule::refraction(0.3, &spec)), &spec).unwrap();
        assert_eq!(a.u, b.u);
        assert_eq!(a.big_l, b.big_l);
        assert_eq!(a.rates, b.rates);
    }

    #[test]
    fn inadmissible_rules_rejected() {
        let spec = drift_spec(1.0, 1.0);
        let path = drift_path(1.0, 0.1, 1.0);
        let err = apply_strategy(&path, 0.0, &Strategy::Constant { rate: 2.0 }, &spec).unwrap_err();
        assert!(matches!(err, Error::Admissibility { .. }));
        let err = apply_strategy(&path, 0.0, &Strategy::Feedback(FeedbackRule::closure(|u| -u - 1.0)), &spec)
            .unwrap_err();
        assert!(matches!(err, Error::Admissibility { .. }));
    }

    #[test]
    fn closure_rules_use_frozen_rates() {
        let spec = drift_spec(1.0, 1.0);
        let path = drift_path(1.0, 0.5, 1.0);
        let cp = apply_strategy(&path, 0.0, &Strategy::Feedback(FeedbackRule::closure(|u| if u > 0.2 { 1.0 } else { 0.5 })), &spec)
            .unwrap();
        // Step 1 at u=0: rate 0.5 -> u=0.25. Step 2 at 0.25: rate 1 -> u stays.
        assert_eq!(cp.u, vec![0.0, 0.25, 0.25]);
        assert_eq!(cp.rates, vec![0.5, 1.0]);
    }

    #[test]
    fn controlled_csv_has_header_and_rows() {
        let spec = drift_spec(2.0, 3.0);
        let cp = refract_path(&drift_path(2.0, 0.5, 1.0), -1.0, 0.0, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("cp.csv");
        cp.write_csv(&f).unwrap();
        let text = std::fs::read_to_string(f).unwrap();
        assert!(text.starts_with("t,U,L,l\n"));
        assert_eq!(text.lines().count(), cp.len() + 1);
    }
}

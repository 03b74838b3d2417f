//! Small quadrature toolkit: Gauss-Legendre panels and exponentially
//! weighted trapezoid weights for discounted path integrals.

use std::f64::consts::PI;
use std::sync::OnceLock;

/// Gauss-Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            // Tricomi initial guess, then Newton on P_n.
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    /// Shared 16-point rule.
    pub fn g16() -> &'static GaussLegendre {
        static RULE: OnceLock<GaussLegendre> = OnceLock::new();
        RULE.get_or_init(|| GaussLegendre::new(16))
    }

    /// Shared 8-point rule.
    pub fn g8() -> &'static GaussLegendre {
        static RULE: OnceLock<GaussLegendre> = OnceLock::new();
        RULE.get_or_init(|| GaussLegendre::new(8))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(mid + half * x))
            .sum::<f64>()
            * half
    }

    /// Composite rule over `panels` equal panels of [a, b].
    pub fn integrate_panels<F: FnMut(f64) -> f64>(
        &self,
        a: f64,
        b: f64,
        panels: usize,
        mut f: F,
    ) -> f64 {
        if a == b {
            return 0.0;
        }
        let h = (b - a) / panels as f64;
        (0..panels)
            .map(|k| {
                let lo = a + h * k as f64;
                let hi = if k + 1 == panels { b } else { lo + h };
                self.integrate(lo, hi, &mut f)
            })
            .sum()
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let d = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, d)
}

/// Breakpoints of a panel partition of [a, b] that also contains every
/// kink in `kinks` lying strictly inside.
pub fn split_at(a: f64, b: f64, width: f64, kinks: &[f64]) -> Vec<f64> {
    let mut pts: Vec<f64> = kinks.iter().copied().filter(|k| *k > a && *k < b).collect();
    pts.push(a);
    pts.push(b);
    pts.sort_by(|x, y| x.total_cmp(y));
    pts.dedup();
    let mut out = vec![pts[0]];
    for w in pts.windows(2) {
        let n = ((w[1] - w[0]) / width).ceil().max(1.0) as usize;
        for k in 1..=n {
            out.push(if k == n { w[1] } else { w[0] + (w[1] - w[0]) * k as f64 / n as f64 });
        }
    }
    out
}

/// Weights `(w0, w1)` such that
/// `int_0^h e^{-q s} p(s) ds = w0 p(0) + w1 p(h)` for every linear `p`.
/// Both weights are nonnegative.
pub fn discounted_trapezoid(q: f64, h: f64) -> [f64; 2] {
    let a = q * h;
    if a <= 0.5 {
        // Power series in a; terms decay like a^j / j!.
        let (mut w0, mut w1) = (0.0, 0.0);
        let mut term = 1.0;
        for j in 0..40 {
            let jf = j as f64;
            w0 += term / ((jf + 1.0) * (jf + 2.0));
            w1 += term / (jf + 2.0);
            term *= -a / (jf + 1.0);
            if term.abs() < 1e-18 {
                break;
            }
        }
        [w0 * h, w1 * h]
    } else {
        let e = (-a).exp();
        let len = (1.0 - e) / q;
        let w1 = (1.0 - e * (1.0 + a)) / (q * a);
        [len - w1, w1]
    }
}

/// `int_0^h e^{-q s} ds`, stable for small `q h`.
pub fn discounted_length(q: f64, h: f64) -> f64 {
    if q == 0.0 {
        h
    } else {
        -(-q * h).exp_m1() / q
    }
}

/// `int_T^inf e^{-q t} t^n dt` for integer `n >= 0`.
pub fn discounted_power_tail(q: f64, n: u32, t: f64) -> f64 {
    // e^{-qT} sum_{k=0}^n n!/k! T^k / q^{n-k+1}
    let mut sum = 0.0;
    let mut fact_ratio = 1.0; // n!/k! for k = n downwards
    for k in (0..=n).rev() {
        sum += fact_ratio * t.powi(k as i32) / q.powi((n - k + 1) as i32);
        fact_ratio *= k as f64;
    }
    (-q * t).exp() * sum
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let g = GaussLegendre::new(8);
        let v = g.integrate(-1.0, 2.0, |x| x.powi(15) - 3.0 * x.powi(4));
        let exact = (2f64.powi(16) - 1.0) / 16.0 - 3.0 * (32.0 + 1.0) / 5.0;
        assert!((v - exact).abs() < 1e-9 * exact.abs());
        let w: f64 = GaussLegendre::g16().weights.iter().sum();
        assert!((w - 2.0).abs() < 1e-14);
    }

    #[test]
    fn discounted_trapezoid_exact_for_lines() {
        for &(q, h) in &[(1.0, 1e-3), (0.7, 0.4), (2.0, 3.0), (1.0, 0.5), (1.0, 0.5000001)] {
            let w = discounted_trapezoid(q, h);
            let p = |s: f64| 1.0 - 2.0 * s;
            let approx = w[0] * p(0.0) + w[1] * p(h);
            let exact = GaussLegendre::new(20).integrate(0.0, h, |s| (-q * s).exp() * p(s));
            assert!((approx - exact).abs() < 1e-14 * h.max(1.0), "{q} {h}");
            assert!(w[0] >= 0.0 && w[1] >= 0.0);
            assert!((w[0] + w[1] - discounted_length(q, h)).abs() < 1e-15);
        }
    }

    #[test]
    fn power_tail_matches_quadrature() {
        let exact = GaussLegendre::new(20).integrate_panels(3.0, 80.0, 40, |t| (-t * 0.9).exp() * t * t * t);
        assert!((discounted_power_tail(0.9, 3, 3.0) - exact).abs() < 1e-10);
    }

    #[test]
    fn split_keeps_kinks() {
        let pts = split_at(0.0, 1.0, 0.3, &[0.5, 2.0]);
        assert!(pts.contains(&0.5));
        assert_eq!(*pts.last().unwrap(), 1.0);
        assert!(pts.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= 0.3 + 1e-12));
    }
}

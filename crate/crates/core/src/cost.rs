//! Running-cost functions: a convex `C^1` cost together with its derivative,
//! a polynomial-growth certificate and the declared limits of `f'`.

use std::fmt;
use std::sync::Arc;

type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Certificate `|g(x)| <= k1 + k2 |x|^n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Growth {
    pub k1: f64,
    pub k2: f64,
    pub n: u32,
}

impl Growth {
    pub fn bound(&self, x: f64) -> f64 {
        self.k1 + self.k2 * x.abs().powi(self.n as i32)
    }

    /// Certificate for `f'` implied by convexity:
    /// `|f'(x)| <= max(|f(x+1)-f(x)|, |f(x)-f(x-1)|) <= 2 k1 + k2 (|x|^n + (|x|+1)^n)`.
    pub fn of_derivative(&self) -> Growth {
        let c = 2f64.powi(self.n.saturating_sub(1) as i32);
        Growth {
            k1: 2.0 * self.k1 + self.k2 * c,
            k2: self.k2 * (1.0 + c),
            n: self.n,
        }
    }
}

/// Convex running cost `f` with derivative and metadata.
#[derive(Clone)]
pub struct CostSpec {
    pub name: String,
    f: RealFn,
    f_prime: RealFn,
    f_second: Option<RealFn>,
    pub growth: Growth,
    /// `(f'(-inf), f'(+inf))` in the extended reals.
    pub f_prime_limits: (f64, f64),
}

impl fmt::Debug for CostSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CostSpec")
            .field("name", &self.name)
            .field("growth", &self.growth)
            .field("f_prime_limits", &self.f_prime_limits)
            .finish_non_exhaustive()
    }
}

impl CostSpec {
    pub fn custom(
        name: impl Into<String>,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        f_prime: impl Fn(f64) -> f64 + Send + Sync + 'static,
        f_second: Option<RealFn>,
        growth: Growth,
        f_prime_limits: (f64, f64),
    ) -> Self {
        Self {
            name: name.into(),
            f: Arc::new(f),
            f_prime: Arc::new(f_prime),
            f_second,
            growth,
            f_prime_limits,
        }
    }

    /// `f(x) = c x`.
    pub fn linear(slope: f64) -> Self {
        Self::custom(
            "linear",
            move |x| slope * x,
            move |_| slope,
            Some(Arc::new(|_| 0.0)),
            Growth {
                k1: 1.0,
                k2: slope.abs() + 1e-12,
                n: 1,
            },
            (slope, slope),
        )
    }

    /// `f(x) = a (x - center)^2`, `a > 0`.
    pub fn quadratic(a: f64, center: f64) -> Self {
        assert!(a > 0.0, "quadratic cost needs a > 0");
        Self::custom(
            "quadratic",
            move |x| a * (x - center) * (x - center),
            move |x| 2.0 * a * (x - center),
            Some(Arc::new(move |_| 2.0 * a)),
            // a (x-c)^2 <= 2a c^2 + 2a x^2
            Growth {
                k1: 2.0 * a * center * center + 1e-12,
                k2: 2.0 * a,
                n: 2,
            },
            (f64::NEG_INFINITY, f64::INFINITY),
        )
    }

    /// Smoothed hinge `f(x) = height * width * ln(1 + e^{(x - center)/width})`,
    /// with `f'` rising from 0 to `height`.
    pub fn softplus(height: f64, width: f64, center: f64) -> Self {
        assert!(height > 0.0 && width > 0.0);
        let sp = move |z: f64| if z > 30.0 { z } else { z.exp().ln_1p() };
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        Self::custom(
            "softplus",
            move |x| height * width * sp((x - center) / width),
            move |x| height * sig((x - center) / width),
            Some(Arc::new(move |x| {
                let s = sig((x - center) / width);
                height * s * (1.0 - s) / width
            })),
            // h w ln(1+e^{z}) <= h w ln 2 + h |x - c|
            Growth {
                k1: height * (width * 2f64.ln() + center.abs()),
                k2: height,
                n: 1,
            },
            (0.0, height),
        )
    }

    #[inline]
    pub fn f(&self, x: f64) -> f64 {
        (self.f)(x)
    }

    #[inline]
    pub fn f_prime(&self, x: f64) -> f64 {
        (self.f_prime)(x)
    }

    /// Second derivative when the cost declares one.
    pub fn f_second(&self, x: f64) -> Option<f64> {
        self.f_second.as_ref().map(|g| g(x))
    }

    pub fn f_prime_growth(&self) -> Growth {
        self.growth.of_derivative()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn growth_bounds_hold_for_named_costs() {
        for cost in [CostSpec::linear(-3.0), CostSpec::quadratic(1.5, 2.0), CostSpec::softplus(2.0, 0.5, 1.0)] {
            let g = cost.growth;
            let gd = cost.f_prime_growth();
            for k in -400..=400 {
                let x = k as f64 * 0.05;
                assert!(cost.f(x).abs() <= g.bound(x) + 1e-12, "{} at {x}", cost.name);
                assert!(cost.f_prime(x).abs() <= gd.bound(x) + 1e-12, "{} f' at {x}", cost.name);
            }
        }
    }

    #[test]
    fn softplus_limits_and_derivative() {
        let c = CostSpec::softplus(3.0, 0.2, 0.0);
        assert!((c.f_prime(-50.0) - 0.0).abs() < 1e-12);
        assert!((c.f_prime(50.0) - 3.0).abs() < 1e-12);
        let h = 1e-5;
        let fd = (c.f(0.3 + h) - c.f(0.3 - h)) / (2.0 * h);
        assert!((fd - c.f_prime(0.3)).abs() < 1e-8);
    }
}

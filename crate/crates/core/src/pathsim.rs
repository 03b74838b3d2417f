//! Exact-in-law driving paths of a finite-activity Lévy process on a time
//! grid, with reproducible per-path random streams and coupled views.
//!
//! Each path owns two ChaCha8 streams derived from `(seed, path_index)`:
//! one for the Gaussian increments and one for the jump marks. Changing the
//! jump part of a model therefore leaves the Brownian part of every path
//! untouched.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::levy_model::{JumpKind, LevyModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub dt: f64,
    pub horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, horizon: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidProblem(format!("dt must be > 0, got {dt}")));
        }
        if !(horizon.is_finite() && horizon >= dt) {
            return Err(Error::InvalidProblem(format!("horizon must be >= dt, got {horizon}")));
        }
        // Guard against T/dt landing a hair above an integer.
        let n_steps = ((horizon / dt) * (1.0 - 1e-12)).ceil() as usize;
        Ok(Self { dt, horizon, n_steps })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Grid time `t_k`; the last cell may be shorter than `dt`.
    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        if k >= self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt
        }
    }

    #[inline]
    pub fn cell_len(&self, k: usize) -> f64 {
        self.time(k + 1) - self.time(k)
    }

    /// Index of the cell containing `t` (cells are `[t_k, t_{k+1})`).
    pub fn cell_of(&self, t: f64) -> usize {
        ((t / self.dt).floor() as usize).min(self.n_steps - 1)
    }
}

/// Identifies one reproducible path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStreamKey {
    pub seed: u64,
    pub path_index: u64,
}

impl RngStreamKey {
    pub fn new(seed: u64, path_index: u64) -> Self {
        Self { seed, path_index }
    }

    fn stream(&self, which: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.path_index.wrapping_mul(2).wrapping_add(which));
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpMark {
    pub time: f64,
    pub size: f64,
}

/// One realisation of `X` on a grid: per-cell Gaussian increments, a constant
/// drift rate and exactly placed jumps. Views produced by
/// [`DrivingPath::coupled_view`] share the random parts by reference.
#[derive(Debug, Clone)]
pub struct DrivingPath {
    pub grid: TimeGrid,
    gaussian: Arc<[f64]>,
    jumps: Arc<[JumpMark]>,
    drift_rate: f64,
    shift: f64,
    pub key: RngStreamKey,
}

impl DrivingPath {
    /// Samples a path. Brownian increments are `Normal(0, sigma^2 dt_k)`; jump
    /// times are the arrivals of a Poisson process with the total rate, each
    /// with a size drawn from the normalised jump mixture.
    pub fn sample(model: &LevyModel, grid: TimeGrid, key: RngStreamKey) -> Result<Self> {
        model.validate()?;
        let n = grid.n_steps();
        let gaussian: Arc<[f64]> = if model.sigma > 0.0 {
            let mut rng = key.stream(0);
            let full = model.sigma * grid.dt.sqrt();
            (0..n)
                .map(|k| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let scale = if k + 1 < n { full } else { model.sigma * grid.cell_len(k).sqrt() };
                    scale * z
                })
                .collect()
        } else {
            vec![0.0; n].into()
        };

        let total = model.jumps.total_rate();
        let mut jumps = Vec::new();
        if total > 0.0 {
            let terms: Vec<_> = model.jumps.active().copied().collect();
            let mut rng = key.stream(1);
            let mut t = 0.0;
            loop {
                let e: f64 = Exp1.sample(&mut rng);
                t += e / total;
                if t > grid.horizon {
                    break;
                }
                let mut pick = rng.random::<f64>() * total;
                let mut chosen = terms[terms.len() - 1];
                for term in &terms {
                    if pick < term.rate {
                        chosen = *term;
                        break;
                    }
                    pick -= term.rate;
                }
                let magnitude = match chosen.kind {
                    JumpKind::PointMass { size } => size,
                    JumpKind::Exponential { decay } => {
                        let e: f64 = Exp1.sample(&mut rng);
                        e / decay
                    }
                };
                jumps.push(JumpMark {
                    time: t,
                    size: chosen.side.sign() * magnitude,
                });
            }
        }

        Ok(Self {
            grid,
            gaussian,
            jumps: jumps.into(),
            drift_rate: model.effective_drift(),
            shift: 0.0,
            key,
        })
    }

    /// Same randomness, initial value shifted by `shift` and drift reduced by
    /// `extra_drift` per unit time.
    pub fn coupled_view(&self, shift: f64, extra_drift: f64) -> Self {
        Self {
            grid: self.grid,
            gaussian: Arc::clone(&self.gaussian),
            jumps: Arc::clone(&self.jumps),
            drift_rate: self.drift_rate - extra_drift,
            shift: self.shift + shift,
            key: self.key,
        }
    }

    pub fn shares_randomness_with(&self, other: &DrivingPath) -> bool {
        Arc::ptr_eq(&self.gaussian, &other.gaussian) && Arc::ptr_eq(&self.jumps, &other.jumps)
    }

    pub fn gaussian_increments(&self) -> &[f64] {
        &self.gaussian
    }

    pub fn jump_marks(&self) -> &[JumpMark] {
        &self.jumps
    }

    pub fn drift_rate(&self) -> f64 {
        self.drift_rate
    }

    pub fn drift_per_cell(&self, k: usize) -> f64 {
        self.drift_rate * self.grid.cell_len(k)
    }

    pub fn initial_value(&self) -> f64 {
        self.shift
    }

    /// `X` at every grid time `t_0..=t_n` (right-continuous at jumps).
    pub fn values_on_grid(&self) -> Vec<f64> {
        let n = self.grid.n_steps();
        let mut out = Vec::with_capacity(n + 1);
        let mut x = self.shift;
        let mut j = 0;
        out.push(x);
        for k in 0..n {
            let end = self.grid.time(k + 1);
            x += self.drift_per_cell(k) + self.gaussian[k];
            while j < self.jumps.len() && self.jumps[j].time <= end {
                x += self.jumps[j].size;
                j += 1;
            }
            out.push(x);
        }
        out
    }

    /// `X_t` with the continuous part interpolated linearly inside a cell.
    pub fn value_at(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.grid.horizon);
        let mut x = self.shift;
        let k = self.grid.cell_of(t);
        for i in 0..k {
            x += self.drift_per_cell(i) + self.gaussian[i];
        }
        let frac = (t - self.grid.time(k)) / self.grid.cell_len(k);
        x += frac * (self.drift_per_cell(k) + self.gaussian[k]);
        x + self.jumps.iter().take_while(|j| j.time <= t).map(|j| j.size).sum::<f64>()
    }

    /// Debug dump with columns `t, X_t` on the grid.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "t,X_t")?;
        for (k, x) in self.values_on_grid().iter().enumerate() {
            writeln!(w, "{},{}", self.grid.time(k), x)?;
        }
        Ok(())
    }
}

/// Convenience wrapper for [`DrivingPath::sample`].
pub fn sample_driving_path(model: &LevyModel, grid: TimeGrid, key: RngStreamKey) -> Result<DrivingPath> {
    DrivingPath::sample(model, grid, key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy_model::{JumpSpec, JumpTerm, Side};

    #[test]
    fn pure_drift_is_deterministic() {
        let m = LevyModel::brownian(1.0, 0.0);
        let p = DrivingPath::sample(&m, TimeGrid::new(0.25, 1.0).unwrap(), RngStreamKey::new(3, 0)).unwrap();
        assert_eq!(p.grid.n_steps(), 4);
        assert!(p.jump_marks().is_empty());
        for k in 0..4 {
            assert_eq!(p.drift_per_cell(k) + p.gaussian_increments()[k], 0.25);
        }
        assert_eq!(p.values_on_grid(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn same_key_same_path() {
        let m = LevyModel::new(0.1, 1.0, JumpSpec::new(vec![JumpTerm::exponential(Side::Down, 2.0, 1.0)])).unwrap();
        let g = TimeGrid::new(0.01, 3.0).unwrap();
        let a = DrivingPath::sample(&m, g, RngStreamKey::new(42, 7)).unwrap();
        let b = DrivingPath::sample(&m, g, RngStreamKey::new(42, 7)).unwrap();
        assert_eq!(a.values_on_grid(), b.values_on_grid());
        assert_eq!(a.jump_marks(), b.jump_marks());
        let c = DrivingPath::sample(&m, g, RngStreamKey::new(42, 8)).unwrap();
        assert_ne!(a.values_on_grid(), c.values_on_grid());
    }

    #[test]
    fn brownian_part_is_independent_of_jump_part() {
        let g = TimeGrid::new(0.1, 2.0).unwrap();
        let key = RngStreamKey::new(5, 11);
        let a = DrivingPath::sample(&LevyModel::brownian(0.0, 1.0), g, key).unwrap();
        let m = LevyModel::new(0.0, 1.0, JumpSpec::new(vec![JumpTerm::point_mass(Side::Up, 3.0, 1.0)])).unwrap();
        let b = DrivingPath::sample(&m, g, key).unwrap();
        assert_eq!(a.gaussian_increments(), b.gaussian_increments());
    }

    #[test]
    fn jump_marks_sorted_inside_horizon() {
        let m = LevyModel::new(0.0, 0.0, JumpSpec::new(vec![JumpTerm::point_mass(Side::Up, 5.0, 1.0)])).unwrap();
        let g = TimeGrid::new(0.1, 10.0).unwrap();
        for i in 0..20 {
            let p = DrivingPath::sample(&m, g, RngStreamKey::new(1, i)).unwrap();
            let j = p.jump_marks();
            assert!(j.windows(2).all(|w| w[0].time < w[1].time));
            assert!(j.iter().all(|m| m.time >= 0.0 && m.time <= 10.0 && m.size == 1.0));
        }
    }

    #[test]
    fn poisson_count_matches_rate() {
        // Oracle: N_T ~ Poisson(rate T), mean 20, sd sqrt(20).
        let m = LevyModel::new(0.0, 0.0, JumpSpec::new(vec![JumpTerm::point_mass(Side::Up, 2.0, 1.0)])).unwrap();
        let g = TimeGrid::new(1.0, 10.0).unwrap();
        let n = 10_000;
        let total: usize = (0..n)
            .map(|i| DrivingPath::sample(&m, g, RngStreamKey::new(9, i)).unwrap().jump_marks().len())
            .sum();
        let mean = total as f64 / n as f64;
        let se = (20.0f64 / n as f64).sqrt();
        assert!((mean - 20.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn coupled_views() {
        let m = LevyModel::new(0.3, 0.8, JumpSpec::new(vec![JumpTerm::exponential(Side::Up, 1.0, 2.0)])).unwrap();
        let g = TimeGrid::new(0.05, 2.0).unwrap();
        let p = DrivingPath::sample(&m, g, RngStreamKey::new(2, 2)).unwrap();
        assert_eq!(p.coupled_view(0.0, 0.0).values_on_grid(), p.values_on_grid());
        let shifted = p.coupled_view(0.4, 0.0);
        assert!(shifted.shares_randomness_with(&p));
        for (a, b) in shifted.values_on_grid().iter().zip(p.values_on_grid()) {
            assert!((a - b - 0.4).abs() < 1e-12);
        }
        let drifted = p.coupled_view(0.0, 1.5);
        for (k, (a, b)) in drifted.values_on_grid().iter().zip(p.values_on_grid()).enumerate() {
            assert!((a - (b - 1.5 * g.time(k))).abs() < 1e-12);
        }
    }

    #[test]
    fn value_at_agrees_with_grid_values() {
        let m = LevyModel::new(0.3, 0.8, JumpSpec::new(vec![JumpTerm::exponential(Side::Down, 3.0, 2.0)])).unwrap();
        let g = TimeGrid::new(0.1, 1.0).unwrap();
        let p = DrivingPath::sample(&m, g, RngStreamKey::new(4, 1)).unwrap();
        let v = p.values_on_grid();
        for k in 0..=g.n_steps() {
            assert!((p.value_at(g.time(k)) - v[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn short_last_cell() {
        let g = TimeGrid::new(0.3, 1.0).unwrap();
        assert_eq!(g.n_steps(), 4);
        assert!((g.cell_len(3) - 0.1).abs() < 1e-12);
        assert_eq!(TimeGrid::new(0.25, 1.0).unwrap().n_steps(), 4);
        assert!(TimeGrid::new(0.5, 0.1).is_err());
    }
}

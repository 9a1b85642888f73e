//! Contraction bound for partial-layer updates, plus a Monte-Carlo harness
//! on a block-separable strongly convex quadratic where the bound's
//! assumptions hold.
//!
//! The bound is `g_t = (1 - η μ K / L)^t · g_0`, with `K / L` the fraction of
//! layer blocks updated per round. The smoothness constant is carried in the
//! parameters but does not enter the bound.

use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceParams {
    pub eta: f64,
    pub mu: f64,
    /// L-smoothness constant (not the layer count).
    pub smooth_l: f64,
    pub num_layers: usize,
    pub k: usize,
    pub rounds: usize,
    pub initial_gap: f64,
}

impl ConvergenceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::config("eta", "must be positive"));
        }
        if !(self.mu > 0.0) {
            return Err(Error::config("mu", "must be positive"));
        }
        if self.smooth_l < self.mu {
            return Err(Error::config("smooth_l", "must be at least mu"));
        }
        if self.num_layers == 0 || self.k == 0 || self.k > self.num_layers {
            return Err(Error::config("k", "need 1 <= k <= num_layers"));
        }
        if !(self.initial_gap >= 0.0) {
            return Err(Error::config("initial_gap", "must be nonnegative"));
        }
        Ok(())
    }

    pub fn fraction(&self) -> f64 {
        self.k as f64 / self.num_layers as f64
    }

    /// `1 - η μ K / L`.
    pub fn factor(&self) -> f64 {
        1.0 - self.eta * self.mu * self.fraction()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundStatus {
    /// Factor in `[0, 1)`: the bound is nonincreasing and reaches zero.
    Contractive,
    /// Factor negative or at least one; the numbers are still reported.
    NonContractive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub factor: f64,
    pub status: BoundStatus,
    /// `gaps[t]` for `t = 0..=rounds`.
    pub gaps: Vec<f64>,
}

pub fn bound(p: &ConvergenceParams) -> Result<Bound> {
    p.validate()?;
    let factor = p.factor();
    let status = if (0.0..1.0).contains(&factor) {
        BoundStatus::Contractive
    } else {
        BoundStatus::NonContractive
    };
    let mut gaps = Vec::with_capacity(p.rounds + 1);
    let mut g = p.initial_gap;
    gaps.push(g);
    for _ in 0..p.rounds {
        g *= factor;
        gaps.push(g);
    }
    Ok(Bound {
        factor,
        status,
        gaps,
    })
}

/// `F(w) = ½ Σ c_i (w_i - w*_i)²` over `num_layers` blocks of `block_dim`
/// coordinates each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticProblem {
    pub block_dim: usize,
    pub curvatures: Vec<f64>,
    pub optimum: Vec<f64>,
}

impl QuadraticProblem {
    pub fn isotropic(num_layers: usize, block_dim: usize, mu: f64) -> Self {
        let n = num_layers * block_dim;
        Self {
            block_dim,
            curvatures: vec![mu; n],
            optimum: vec![0.0; n],
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.curvatures.len() / self.block_dim.max(1)
    }

    pub fn gap(&self, w: &[f64]) -> f64 {
        w.iter()
            .zip(&self.curvatures)
            .zip(&self.optimum)
            .map(|((w, c), o)| 0.5 * c * (w - o) * (w - o))
            .sum()
    }

    fn validate(&self, p: &ConvergenceParams) -> Result<()> {
        if self.block_dim == 0 || self.curvatures.len() != p.num_layers * self.block_dim {
            return Err(Error::config(
                "quadratic.block_dim",
                "curvatures must cover num_layers blocks of block_dim",
            ));
        }
        if self.optimum.len() != self.curvatures.len() {
            return Err(Error::config("quadratic.optimum", "length differs from curvatures"));
        }
        if self
            .curvatures
            .iter()
            .any(|&c| c < p.mu || c > p.smooth_l)
        {
            return Err(Error::config("quadratic.curvatures", "must lie in [mu, smooth_l]"));
        }
        Ok(())
    }
}

/// Closed-form expected per-round factor of the normalized gap on an
/// isotropic problem under uniform K-of-L block selection:
/// `1 - (K / L) (1 - (1 - η μ)²)`.
pub fn expected_factor_isotropic(p: &ConvergenceParams) -> f64 {
    let step = 1.0 - p.eta * p.mu;
    1.0 - p.fraction() * (1.0 - step * step)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundStat {
    pub round: usize,
    pub bound: f64,
    /// Mean over seeds of `gap_t / gap_0`.
    pub mean_gap: f64,
    pub std_err: f64,
    /// Mean over seeds of `gap_t / gap_{t-1}` (1 at t = 0).
    pub mean_factor: f64,
    pub factor_std_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub seeds: usize,
    pub diverged_seeds: usize,
    pub rounds: Vec<RoundStat>,
}

impl Simulation {
    /// Mean of the per-round factor pooled over all seeds and rounds
    /// `1..=T`, with its standard error.
    pub fn pooled_factor(&self, per_round: &[Vec<f64>]) -> (f64, f64) {
        mean_and_se(per_round.iter().flatten().copied())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
        w.write_record(["round", "bound", "empirical_mean", "std_err"])
            .map_err(|e| Error::format(path, e))?;
        for r in &self.rounds {
            w.write_record(&[
                r.round.to_string(),
                r.bound.to_string(),
                r.mean_gap.to_string(),
                r.std_err.to_string(),
            ])
            .map_err(|e| Error::format(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn mean_and_se(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Per-seed trajectories of the normalized gap, `[seed][t]` for `t = 0..=T`.
pub fn quadratic_trajectories(
    p: &ConvergenceParams,
    q: &QuadraticProblem,
    seeds: usize,
    master_seed: u64,
) -> Result<Vec<Vec<f64>>> {
    p.validate()?;
    q.validate(p)?;
    let d = q.block_dim;
    let mut out = Vec::with_capacity(seeds);
    for s in 0..seeds {
        let mut rng = RngStream::new(master_seed, format!("quadratic:{s}"));
        let mut w: Vec<f64> = q.optimum.iter().map(|o| o + rng.normal()).collect();
        let g0 = q.gap(&w);
        let mut traj = Vec::with_capacity(p.rounds + 1);
        traj.push(1.0);
        for _ in 0..p.rounds {
            let mut blocks = sample(&mut rng, p.num_layers, p.k).into_vec();
            blocks.sort_unstable();
            for b in blocks {
                for i in b * d..(b + 1) * d {
                    w[i] -= p.eta * q.curvatures[i] * (w[i] - q.optimum[i]);
                }
            }
            traj.push(if g0 > 0.0 { q.gap(&w) / g0 } else { 0.0 });
        }
        out.push(traj);
    }
    Ok(out)
}

/// Runs `seeds` independent trajectories with uniform random K-of-L block
/// selection and exact gradient steps on the selected blocks.
pub fn simulate_quadratic(
    p: &ConvergenceParams,
    q: &QuadraticProblem,
    seeds: usize,
    master_seed: u64,
) -> Result<Simulation> {
    let trajs = quadratic_trajectories(p, q, seeds, master_seed)?;
    summarize(p, &trajs)
}

pub fn summarize(p: &ConvergenceParams, trajs: &[Vec<f64>]) -> Result<Simulation> {
    let b = bound(&ConvergenceParams {
        initial_gap: 1.0,
        ..p.clone()
    })?;
    let diverged_seeds = trajs
        .iter()
        .filter(|t| t.iter().any(|g| !g.is_finite() || *g > 1e12))
        .count();
    if diverged_seeds > 0 {
        log::warn!("{diverged_seeds} quadratic trajectories diverged");
    }
    let rounds = (0..=p.rounds)
        .map(|t| {
            let (mean_gap, std_err) = mean_and_se(trajs.iter().map(move |tr| tr[t]));
            let (mean_factor, factor_std_err) = if t == 0 {
                (1.0, 0.0)
            } else {
                mean_and_se(
                    trajs
                        .iter()
                        .map(move |tr| if tr[t - 1] > 0.0 { tr[t] / tr[t - 1] } else { 0.0 }),
                )
            };
            RoundStat {
                round: t,
                bound: b.gaps[t],
                mean_gap,
                std_err,
                mean_factor,
                factor_std_err,
            }
        })
        .collect();
    Ok(Simulation {
        seeds: trajs.len(),
        diverged_seeds,
        rounds,
    })
}

/// Per-round factors `gap_t / gap_{t-1}` for `t = 1..=T`, per seed.
pub fn per_round_factors(trajs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    trajs
        .iter()
        .map(|tr| {
            tr.windows(2)
                .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(eta: f64, k: usize, l: usize, rounds: usize) -> ConvergenceParams {
        ConvergenceParams {
            eta,
            mu: 1.0,
            smooth_l: 1.0,
            num_layers: l,
            k,
            rounds,
            initial_gap: 1.0,
        }
    }

    #[test]
    fn plug_in_value() {
        let b = bound(&params(0.5, 1, 2, 1)).unwrap();
        assert_eq!(b.gaps, vec![1.0, 0.75]);
        assert_eq!(b.status, BoundStatus::Contractive);
    }

    #[test]
    fn full_step_reaches_zero() {
        let b = bound(&params(1.0, 4, 4, 3)).unwrap();
        assert_eq!(b.gaps[1], 0.0);
    }

    #[test]
    fn bound_decreases_in_k() {
        for k in 1..8 {
            let lo = bound(&params(0.3, k, 8, 20)).unwrap();
            let hi = bound(&params(0.3, k + 1, 8, 20)).unwrap();
            for (a, b) in hi.gaps.iter().zip(&lo.gaps) {
                assert!(a <= b);
            }
        }
    }

    #[test]
    fn non_contractive_is_flagged_not_rejected() {
        let b = bound(&params(3.0, 2, 2, 2)).unwrap();
        assert_eq!(b.status, BoundStatus::NonContractive);
        assert_eq!(b.gaps, vec![1.0, -2.0, 4.0]);
    }

    #[test]
    fn invalid_params() {
        assert!(bound(&params(0.5, 0, 2, 1)).is_err());
        assert!(bound(&params(0.5, 3, 2, 1)).is_err());
        assert!(bound(&params(-0.5, 1, 2, 1)).is_err());
    }

    #[test]
    fn full_selection_is_plain_gradient_descent() {
        let p = params(0.5, 4, 4, 5);
        let q = QuadraticProblem::isotropic(4, 3, 1.0);
        let sim = simulate_quadratic(&p, &q, 3, 0).unwrap();
        for r in &sim.rounds {
            assert!((r.mean_gap - 0.25f64.powi(r.round as i32)).abs() < 1e-14);
            assert!(r.std_err < 1e-14);
        }
    }

    #[test]
    fn closed_form_factor() {
        assert!((expected_factor_isotropic(&params(0.5, 1, 2, 1)) - 0.625).abs() < 1e-15);
    }
}

//! Particle filter over deviation vectors.
//!
//! Particles follow a Gaussian random walk inside the search box and are
//! weighted by the Gaussian likelihood of the cable-length residuals with
//! diagonal covariance `r_sigma² I`. Weights are formed in log space and
//! shifted by their maximum before exponentiation, so the normalising
//! constant of the likelihood never needs to be evaluated. Systematic
//! resampling runs whenever the effective sample size drops below
//! `ess_threshold * N`.
//!
//! Every particle slot owns its own ChaCha stream derived from the run seed,
//! so the per-particle work can run in parallel without changing results.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{DeviationLayout, DeviationVector, DhTable};
use crate::objective::{fitness_unchecked, residuals_into, MeasurementSet};
use crate::optimizer::Bounds;

/// Consecutive uniform-weight fallbacks tolerated before `pf_run` aborts.
pub const MAX_DEGENERATE_STEPS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfConfig {
    pub n_particles: usize,
    /// Per-coordinate std of the random-walk increment.
    pub process_sigma: Vec<f64>,
    /// Measurement noise std (mm).
    pub r_sigma: f64,
    pub n_steps: usize,
    /// Per-coordinate std of the initial cloud around the centre.
    pub init_spread: Vec<f64>,
    pub ess_threshold: f64,
    pub bounds: Bounds,
    pub seed: u64,
}

impl PfConfig {
    /// Defaults: 500 particles, 50 steps, random-walk std of 1% of the box
    /// half-width, initial spread three times that, resampling below N/2.
    pub fn new(bounds: Bounds, r_sigma: f64) -> Self {
        let process_sigma: Vec<f64> = (0..bounds.dim()).map(|i| 0.01 * bounds.half_width(i)).collect();
        let init_spread = process_sigma.iter().map(|s| 3.0 * s).collect();
        Self {
            n_particles: 500,
            process_sigma,
            r_sigma,
            n_steps: 50,
            init_spread,
            ess_threshold: 0.5,
            bounds,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.bounds.dim();
        if self.n_particles < 2 {
            return Err(Error::InvalidConfig("n_particles must be at least 2".into()));
        }
        if self.process_sigma.len() != dim || self.init_spread.len() != dim {
            return Err(Error::InvalidConfig("sigma vectors must match the state dimension".into()));
        }
        if self
            .process_sigma
            .iter()
            .chain(&self.init_spread)
            .any(|s| !(*s >= 0.0 && s.is_finite()))
        {
            return Err(Error::InvalidConfig("process and initial spreads must be finite and >= 0".into()));
        }
        if !(self.r_sigma > 0.0 && self.r_sigma.is_finite()) {
            return Err(Error::InvalidConfig("r_sigma must be positive".into()));
        }
        if !(self.ess_threshold > 0.0 && self.ess_threshold <= 1.0) {
            return Err(Error::InvalidConfig("ess_threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Particles with their normalised weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEnsemble {
    pub particles: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// `1 / sum(w²)`.
    pub fn ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

/// One RNG stream per particle slot plus one for resampling.
pub struct PfStreams {
    particles: Vec<ChaCha8Rng>,
    resample: ChaCha8Rng,
}

impl PfStreams {
    pub fn new(seed: u64, n: usize) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            particles: (1..=n as u64).map(stream).collect(),
            resample: stream(0),
        }
    }
}

fn jitter(p: &mut [f64], sigma: &[f64], bounds: &Bounds, rng: &mut ChaCha8Rng) {
    for (v, s) in p.iter_mut().zip(sigma) {
        let z: f64 = rng.sample(StandardNormal);
        *v += s * z;
    }
    bounds.clamp(p);
}

/// `N` draws of `center + N(0, init_spread²)`, clamped, with weights `1/N`.
pub fn init_particles(center: &[f64], cfg: &PfConfig, streams: &mut PfStreams) -> ParticleEnsemble {
    let n = cfg.n_particles;
    let particles = streams
        .particles
        .par_iter_mut()
        .map(|rng| {
            let mut p = center.to_vec();
            jitter(&mut p, &cfg.init_spread, &cfg.bounds, rng);
            p
        })
        .collect();
    ParticleEnsemble {
        particles,
        weights: vec![1.0 / n as f64; n],
    }
}

/// Random-walk transition of every particle; weights are untouched.
pub fn propagate(ens: &mut ParticleEnsemble, cfg: &PfConfig, streams: &mut PfStreams) {
    ens.particles
        .par_iter_mut()
        .zip(streams.particles.par_iter_mut())
        .for_each(|(p, rng)| jitter(p, &cfg.process_sigma, &cfg.bounds, rng));
}

/// Scale weights to sum to one.
pub fn normalize_weights(ens: &mut ParticleEnsemble) -> Result<()> {
    let total: f64 = ens.weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::WeightDegeneracy);
    }
    for w in &mut ens.weights {
        *w /= total;
    }
    Ok(())
}

/// Set normalised weights from each particle's sum of squared residuals.
/// Returns `true` when every likelihood was unusable and uniform weights
/// were substituted.
pub fn weight_by_sse(ens: &mut ParticleEnsemble, sse: &[f64], r_sigma: f64) -> bool {
    let inv = 1.0 / (r_sigma * r_sigma);
    let log_w: Vec<f64> = sse
        .iter()
        .map(|s| if s.is_finite() { -0.5 * s * inv } else { f64::NEG_INFINITY })
        .collect();
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = ens.weights.len();
    if max.is_finite() {
        for (w, lw) in ens.weights.iter_mut().zip(&log_w) {
            *w = (lw - max).exp();
        }
        if normalize_weights(ens).is_ok() {
            return false;
        }
    }
    ens.weights.iter_mut().for_each(|w| *w = 1.0 / n as f64);
    true
}

/// Weight particles by the cable-length likelihood of `ms`.
pub fn weight_particles(
    ens: &mut ParticleEnsemble,
    ms: &MeasurementSet,
    table: &DhTable,
    layout: DeviationLayout,
    cfg: &PfConfig,
) -> Result<bool> {
    if layout.dim() != cfg.bounds.dim() || table.joint_count() != ms.joint_count() || layout.joints != ms.joint_count() {
        return Err(Error::DimensionMismatch {
            expected: cfg.bounds.dim(),
            got: layout.dim(),
        });
    }
    let sse: Vec<f64> = ens
        .particles
        .par_iter()
        .map(|p| {
            let mut r = Vec::with_capacity(ms.len());
            residuals_into(ms, table.links(), layout, p, &mut r);
            r.iter().map(|v| v * v).sum()
        })
        .collect();
    Ok(weight_by_sse(ens, &sse, cfg.r_sigma))
}

/// Weighted mean of the particles.
pub fn estimate(ens: &ParticleEnsemble) -> Vec<f64> {
    let dim = ens.particles.first().map_or(0, Vec::len);
    let mut out = vec![0.0; dim];
    for (p, w) in ens.particles.iter().zip(&ens.weights) {
        for (o, v) in out.iter_mut().zip(p) {
            *o += w * v;
        }
    }
    out
}

/// Systematic resampling: one uniform offset, `N` evenly spaced pointers.
pub fn systematic_resample<R: Rng + ?Sized>(ens: &mut ParticleEnsemble, rng: &mut R) {
    let n = ens.len();
    let step = 1.0 / n as f64;
    let u0 = rng.random::<f64>() * step;
    let mut picked = Vec::with_capacity(n);
    let mut cumulative = ens.weights[0];
    let mut i = 0;
    for k in 0..n {
        let u = u0 + k as f64 * step;
        while u > cumulative && i + 1 < n {
            i += 1;
            cumulative += ens.weights[i];
        }
        picked.push(ens.particles[i].clone());
    }
    ens.particles = picked;
    ens.weights = vec![step; n];
}

/// Resample when `ESS < ess_threshold * N`. Returns whether it did.
pub fn resample(ens: &mut ParticleEnsemble, cfg: &PfConfig, streams: &mut PfStreams) -> bool {
    if ens.ess() < cfg.ess_threshold * ens.len() as f64 {
        systematic_resample(ens, &mut streams.resample);
        true
    } else {
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfStep {
    pub step: usize,
    pub ess: f64,
    pub fitness_of_estimate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfResult {
    pub w_est: Vec<f64>,
    pub trace: Vec<PfStep>,
    pub resamples: usize,
    /// Steps that fell back to uniform weights.
    pub degenerate_steps: usize,
    pub eval_count: usize,
}

impl PfResult {
    pub fn ess_trace(&self) -> Vec<f64> {
        self.trace.iter().map(|s| s.ess).collect()
    }

    pub fn fitness_trace(&self) -> Vec<f64> {
        self.trace.iter().map(|s| s.fitness_of_estimate).collect()
    }
}

/// Write `step,ess,fitness_of_estimate` CSV.
pub fn write_pf_trace_csv<W: Write>(trace: &[PfStep], mut out: W) -> std::io::Result<()> {
    writeln!(out, "step,ess,fitness_of_estimate")?;
    for s in trace {
        writeln!(out, "{},{},{}", s.step, s.ess, s.fitness_of_estimate)?;
    }
    Ok(())
}

/// Run the filter from a cloud around `center`.
///
/// Each step: propagate, weight by the batch likelihood, record the weighted
/// estimate and ESS, then resample if the ESS is low.
pub fn pf_run(center: &DeviationVector, ms: &MeasurementSet, table: &DhTable, cfg: &PfConfig) -> Result<PfResult> {
    cfg.validate()?;
    let layout = center.layout();
    if layout.dim() != cfg.bounds.dim() {
        return Err(Error::DimensionMismatch {
            expected: cfg.bounds.dim(),
            got: layout.dim(),
        });
    }
    let mut streams = PfStreams::new(cfg.seed, cfg.n_particles);
    let mut ens = init_particles(center.as_slice(), cfg, &mut streams);
    let mut trace = Vec::with_capacity(cfg.n_steps);
    let mut resamples = 0;
    let mut degenerate_steps = 0;
    let mut consecutive = 0;
    let mut evals = 0;
    for step in 1..=cfg.n_steps {
        propagate(&mut ens, cfg, &mut streams);
        let degenerate = weight_particles(&mut ens, ms, table, layout, cfg)?;
        evals += ens.len();
        if degenerate {
            degenerate_steps += 1;
            consecutive += 1;
            if consecutive > MAX_DEGENERATE_STEPS {
                return Err(Error::PersistentDegeneracy(consecutive));
            }
        } else {
            consecutive = 0;
        }
        let est = estimate(&ens);
        evals += 1;
        trace.push(PfStep {
            step,
            ess: ens.ess(),
            fitness_of_estimate: fitness_unchecked(ms, table.links(), layout, &est),
        });
        if resample(&mut ens, cfg, &mut streams) {
            resamples += 1;
        }
    }
    Ok(PfResult {
        w_est: estimate(&ens),
        trace,
        resamples,
        degenerate_steps,
        eval_count: evals,
    })
}

/// Robust noise scale: `1.4826 * MAD` of the residuals.
pub fn mad_sigma(residuals: &[f64]) -> f64 {
    if residuals.is_empty() {
        return 0.0;
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    let mut r = residuals.to_vec();
    let m = median(&mut r);
    let mut dev: Vec<f64> = residuals.iter().map(|v| (v - m).abs()).collect();
    1.4826 * median(&mut dev)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dim: usize, n: usize) -> PfConfig {
        let mut c = PfConfig::new(Bounds::symmetric(&vec![1.0; dim]).unwrap(), 1.0);
        c.n_particles = n;
        c
    }

    fn ensemble(particles: Vec<Vec<f64>>, weights: Vec<f64>) -> ParticleEnsemble {
        ParticleEnsemble { particles, weights }
    }

    #[test]
    fn zero_spread_reproduces_center() {
        let mut c = cfg(3, 16);
        c.init_spread = vec![0.0; 3];
        let mut s = PfStreams::new(1, 16);
        let ens = init_particles(&[0.1, -0.2, 0.3], &c, &mut s);
        assert!(ens.particles.iter().all(|p| p == &vec![0.1, -0.2, 0.3]));
        assert!(ens.weights.iter().all(|w| *w == 1.0 / 16.0));
    }

    #[test]
    fn init_mean_is_close_to_center() {
        let n = 10_000;
        let mut c = cfg(2, n);
        c.init_spread = vec![0.05, 0.1];
        let mut s = PfStreams::new(2, n);
        let ens = init_particles(&[0.2, -0.3], &c, &mut s);
        let m = estimate(&ens);
        assert!((m[0] - 0.2).abs() <= 4.0 * 0.05 / (n as f64).sqrt());
        assert!((m[1] + 0.3).abs() <= 4.0 * 0.1 / (n as f64).sqrt());
    }

    #[test]
    fn propagation_statistics() {
        let n = 10_000;
        let mut c = cfg(1, n);
        c.process_sigma = vec![0.02];
        let mut s = PfStreams::new(3, n);
        let mut ens = ensemble(vec![vec![0.0]; n], vec![1.0 / n as f64; n]);
        propagate(&mut ens, &c, &mut s);
        let var = ens.particles.iter().map(|p| p[0] * p[0]).sum::<f64>() / n as f64;
        assert!((var.sqrt() - 0.02).abs() <= 0.05 * 0.02);

        c.process_sigma = vec![0.0];
        let before = ens.clone();
        propagate(&mut ens, &c, &mut s);
        assert_eq!(before, ens);
    }

    #[test]
    fn propagation_clamps_at_bounds() {
        let n = 200;
        let mut c = cfg(1, n);
        c.process_sigma = vec![0.5];
        let mut s = PfStreams::new(4, n);
        let mut ens = ensemble(vec![vec![1.0]; n], vec![1.0 / n as f64; n]);
        for _ in 0..5 {
            propagate(&mut ens, &c, &mut s);
            assert!(ens.particles.iter().all(|p| p[0] <= 1.0 && p[0] >= -1.0));
        }
    }

    #[test]
    fn likelihood_weights() {
        let mut e = ensemble(vec![vec![0.0]], vec![0.0]);
        assert!(!weight_by_sse(&mut e, &[1234.0], 0.1));
        assert_eq!(e.weights, vec![1.0]);

        let mut e = ensemble(vec![vec![0.0], vec![1.0]], vec![0.5, 0.5]);
        weight_by_sse(&mut e, &[0.0, 2.0], 1.0);
        let x = (-1f64).exp();
        assert!((e.weights[0] - 1.0 / (1.0 + x)).abs() < 1e-12);
        assert!((e.weights[1] - x / (1.0 + x)).abs() < 1e-12);
        assert!((e.weights[0] - 0.7311).abs() < 1e-4);

        // huge residuals still give a valid distribution thanks to the shift
        let mut e = ensemble(vec![vec![0.0], vec![1.0]], vec![0.5, 0.5]);
        assert!(!weight_by_sse(&mut e, &[1e6, 1e6 + 1.0], 0.01));
        assert!((e.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let mut e = ensemble(vec![vec![0.0], vec![1.0]], vec![0.5, 0.5]);
        assert!(weight_by_sse(&mut e, &[f64::NAN, f64::INFINITY], 1.0));
        assert_eq!(e.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn normalization_examples() {
        let mut e = ensemble(vec![vec![0.0]; 2], vec![2.0, 2.0]);
        normalize_weights(&mut e).unwrap();
        assert_eq!(e.weights, vec![0.5, 0.5]);
        let mut e = ensemble(vec![vec![0.0]; 2], vec![1.0, 3.0]);
        normalize_weights(&mut e).unwrap();
        assert_eq!(e.weights, vec![0.25, 0.75]);
        let once = e.clone();
        normalize_weights(&mut e).unwrap();
        assert_eq!(e, once);
        let mut e = ensemble(vec![vec![0.0]; 2], vec![0.0, 0.0]);
        assert!(matches!(normalize_weights(&mut e), Err(Error::WeightDegeneracy)));
    }

    #[test]
    fn estimate_examples() {
        assert_eq!(estimate(&ensemble(vec![vec![-1.0], vec![1.0]], vec![0.5, 0.5])), vec![0.0]);
        assert_eq!(estimate(&ensemble(vec![vec![7.0, 2.0], vec![1.0, 1.0]], vec![1.0, 0.0])), vec![7.0, 2.0]);
        assert_eq!(estimate(&ensemble(vec![vec![0.0], vec![4.0]], vec![0.25, 0.75])), vec![3.0]);
    }

    #[test]
    fn resample_gating() {
        let c = cfg(1, 4);
        let mut s = PfStreams::new(5, 4);
        let mut uniform = ensemble(vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]], vec![0.25; 4]);
        let before = uniform.clone();
        assert!(!resample(&mut uniform, &c, &mut s));
        assert_eq!(uniform, before);

        let mut peaked = ensemble(vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]], vec![0.0, 0.0, 1.0, 0.0]);
        assert!(resample(&mut peaked, &c, &mut s));
        assert!(peaked.particles.iter().all(|p| p == &vec![2.0]));
        assert_eq!(peaked.weights, vec![0.25; 4]);

        let c2 = cfg(1, 2);
        let mut s2 = PfStreams::new(5, 2);
        let mut pair = ensemble(vec![vec![0.0], vec![1.0]], vec![0.5, 0.5]);
        assert_eq!(pair.ess(), 2.0);
        assert!(!resample(&mut pair, &c2, &mut s2));
    }

    #[test]
    fn systematic_multiplicity_tracks_weights() {
        let mut e = ensemble((0..4).map(|i| vec![i as f64]).collect(), vec![0.5, 0.25, 0.125, 0.125]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        systematic_resample(&mut e, &mut rng);
        let count = |v: f64| e.particles.iter().filter(|p| p[0] == v).count();
        assert_eq!(count(0.0), 2);
        assert_eq!(count(1.0), 1);
        assert_eq!(count(2.0) + count(3.0), 1);
    }

    #[test]
    fn mad_of_known_values() {
        assert_eq!(mad_sigma(&[1.0, 2.0, 3.0, 4.0, 100.0]), 1.4826);
        assert_eq!(mad_sigma(&[]), 0.0);
    }

    #[test]
    fn invalid_configs() {
        let mut c = cfg(2, 1);
        assert!(c.validate().is_err());
        c.n_particles = 10;
        c.r_sigma = 0.0;
        assert!(c.validate().is_err());
        c.r_sigma = 1.0;
        c.ess_threshold = 1.5;
        assert!(c.validate().is_err());
        c.ess_threshold = 0.5;
        c.process_sigma = vec![0.1];
        assert!(c.validate().is_err());
    }
}

//! Synthetic ground-truth calibration experiments.
//!
//! A scenario draws a "true" deviation `w*`, samples joint configurations
//! uniformly inside the joint limits and synthesises cable lengths from the
//! perturbed robot, corrupted by Gaussian noise with occasional wide spikes.

mod files;

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{end_position_unchecked, perturbed_links, Block, DeviationLayout, DeviationVector, DhTable};
use crate::objective::{nominal_cable_length, MeasurementSet, Sample};

pub use files::Dataset;

/// The IRB120-class demo geometry shipped in `data/demo6r.dh`.
pub const DEMO_TABLE: &str = include_str!("../../../../data/demo6r.dh");

pub fn demo_table() -> DhTable {
    DhTable::parse(DEMO_TABLE, "demo6r.dh").expect("bundled demo table parses")
}

/// Joint ranges used with the demo table (rad).
pub const DEMO_JOINT_LIMITS: [(f64, f64); 6] = [(-1.2, 1.2), (-0.8, 0.8), (-1.2, 0.6), (-2.0, 2.0), (-1.5, 1.5), (-3.0, 3.0)];

/// Cable anchor used with the demo table (mm).
pub const DEMO_ANCHOR: [f64; 3] = [700.0, 300.0, -100.0];

/// Zero-mean scale mixture: `N(0, sigma²)` with probability `1 - outlier_rate`,
/// otherwise `N(0, (outlier_scale * sigma)²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub sigma: f64,
    pub outlier_rate: f64,
    pub outlier_scale: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            outlier_rate: 0.05,
            outlier_scale: 10.0,
        }
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self {
            sigma: 0.0,
            outlier_rate: 0.0,
            outlier_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig("noise sigma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return Err(Error::InvalidConfig("outlier rate must lie in [0, 1)".into()));
        }
        if !(self.outlier_scale >= 1.0 && self.outlier_scale.is_finite()) {
            return Err(Error::InvalidConfig("outlier scale must be >= 1".into()));
        }
        Ok(())
    }

    /// Variance of the mixture.
    pub fn variance(&self) -> f64 {
        let s2 = self.sigma * self.sigma;
        s2 * ((1.0 - self.outlier_rate) + self.outlier_rate * self.outlier_scale * self.outlier_scale)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let spike = rng.random::<f64>() < self.outlier_rate;
        let z: f64 = rng.sample(StandardNormal);
        let sd = if spike { self.outlier_scale * self.sigma } else { self.sigma };
        sd * z
    }
}

/// Half-ranges of the true deviations per parameter block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviationScale {
    pub a_mm: f64,
    pub d_mm: f64,
    pub theta_rad: f64,
    pub alpha_rad: f64,
}

impl Default for DeviationScale {
    fn default() -> Self {
        Self {
            a_mm: 0.5,
            d_mm: 0.5,
            theta_rad: 0.005,
            alpha_rad: 0.005,
        }
    }
}

impl DeviationScale {
    pub fn for_block(&self, block: Block) -> f64 {
        match block {
            Block::Alpha => self.alpha_rad,
            Block::A => self.a_mm,
            Block::D => self.d_mm,
            Block::Theta => self.theta_rad,
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            a_mm: k * self.a_mm,
            d_mm: k * self.d_mm,
            theta_rad: k * self.theta_rad,
            alpha_rad: k * self.alpha_rad,
        }
    }

    /// Per-coordinate half-ranges for `layout`; anchor coordinates get `anchor_mm`.
    pub fn per_coordinate(&self, layout: DeviationLayout, anchor_mm: f64) -> Vec<f64> {
        (0..layout.dim())
            .map(|i| layout.block_of(i).map_or(anchor_mm, |b| self.for_block(b)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub deviation_scale: DeviationScale,
    pub n_points: usize,
    /// `(lower, upper)` per joint, rad.
    pub joint_limits: Vec<(f64, f64)>,
    pub anchor: [f64; 3],
    pub noise: NoiseModel,
    pub seed: u64,
}

impl ScenarioConfig {
    /// Demo scenario: 120 points, default deviation scales and noise.
    pub fn demo(seed: u64) -> Self {
        Self {
            deviation_scale: DeviationScale::default(),
            n_points: 120,
            joint_limits: DEMO_JOINT_LIMITS.to_vec(),
            anchor: DEMO_ANCHOR,
            noise: NoiseModel::default(),
            seed,
        }
    }

    /// Demo settings adapted to a table with `joints` joints; tables other
    /// than 6R get +-pi/2 limits.
    pub fn for_joints(joints: usize, seed: u64) -> Self {
        let mut cfg = Self::demo(seed);
        if joints != DEMO_JOINT_LIMITS.len() {
            cfg.joint_limits = vec![(-FRAC_PI_2, FRAC_PI_2); joints];
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 {
            return Err(Error::InvalidConfig("n_points must be at least 1".into()));
        }
        for (i, (lo, hi)) in self.joint_limits.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidConfig(format!("joint {} limits are not an interval", i + 1)));
            }
        }
        let s = &self.deviation_scale;
        if [s.a_mm, s.d_mm, s.theta_rad, s.alpha_rad].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig("deviation scales must be finite and >= 0".into()));
        }
        if self.anchor.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("anchor is not finite".into()));
        }
        self.noise.validate()
    }
}

/// Uniform deviation inside the block half-ranges (no anchor part).
pub fn synth_deviation<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> DeviationVector {
    let layout = DeviationLayout::new(cfg.joint_limits.len(), false);
    let values = cfg
        .deviation_scale
        .per_coordinate(layout, 0.0)
        .into_iter()
        .map(|s| if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 })
        .collect();
    DeviationVector::from_vec(layout, values).expect("finite by construction")
}

pub fn sample_joint_configs<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Vec<Vec<f64>> {
    (0..cfg.n_points)
        .map(|_| {
            cfg.joint_limits
                .iter()
                .map(|&(lo, hi)| if lo < hi { rng.random_range(lo..hi) } else { lo })
                .collect()
        })
        .collect()
}

/// Draw `w*`, sample configurations and synthesise noisy cable lengths.
/// Draw order: deviation, configurations, then one noise value per point.
pub fn simulate_measurements(table: &DhTable, cfg: &ScenarioConfig) -> Result<Dataset> {
    cfg.validate()?;
    if cfg.joint_limits.len() != table.joint_count() {
        return Err(Error::DimensionMismatch {
            expected: table.joint_count(),
            got: cfg.joint_limits.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let truth = synth_deviation(cfg, &mut rng);
    let qs = sample_joint_configs(cfg, &mut rng);
    let actual = perturbed_links(table.links(), truth.layout(), truth.as_slice());
    let anchor = nalgebra::Vector3::from(cfg.anchor);
    let mut samples = Vec::with_capacity(qs.len());
    for q in qs {
        let exact = nominal_cable_length(&end_position_unchecked(&actual, &q), &anchor);
        let length = exact + cfg.noise.sample(&mut rng);
        if length <= 0.0 {
            return Err(Error::InvalidDataset(format!(
                "synthesised non-positive cable length {length} (anchor too close to the workspace?)"
            )));
        }
        samples.push(Sample { q, length });
    }
    Ok(Dataset {
        measurements: MeasurementSet::new(samples, cfg.anchor, table.joint_count())?,
        seed: Some(cfg.seed),
        truth: Some(truth.into_vec()),
    })
}

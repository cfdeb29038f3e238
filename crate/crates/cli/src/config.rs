//! Run configuration: built-in defaults, overridden by a JSON config file,
//! overridden by command-line flags.
//!
//! ```json
//! {
//!   "scenario": { "n_points": 200, "noise": { "sigma": 0.05 } },
//!   "pipeline": { "search": { "max_iters": 500 }, "pf": { "n_particles": 1000 } }
//! }
//! ```
//!
//! Missing keys keep their defaults; unknown top-level keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use armcal_core::simdata::DeviationScale;
use armcal_core::{NoiseModel, PipelineConfig, ScenarioConfig};
use clap::Args;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioFile {
    pub n_points: Option<usize>,
    pub deviation_scale: Option<DeviationScale>,
    pub noise: Option<NoiseModel>,
    pub joint_limits: Option<Vec<(f64, f64)>>,
    pub anchor: Option<[f64; 3]>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub scenario: ScenarioFile,
    pub pipeline: PipelineConfig,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct ScenarioArgs {
    /// Number of measured poses.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: Option<u64>,
    /// Gaussian noise std (mm).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Fraction of measurements replaced by wide-noise outliers.
    #[arg(long)]
    pub outlier_rate: Option<f64>,
    /// Outlier std as a multiple of sigma.
    #[arg(long)]
    pub outlier_scale: Option<f64>,
    /// Half-range of the true link-length deviations (mm).
    #[arg(long)]
    pub scale_a: Option<f64>,
    /// Half-range of the true link-offset deviations (mm).
    #[arg(long)]
    pub scale_d: Option<f64>,
    /// Half-range of the true joint-offset deviations (rad).
    #[arg(long)]
    pub scale_theta: Option<f64>,
    /// Half-range of the true twist deviations (rad).
    #[arg(long)]
    pub scale_alpha: Option<f64>,
    /// Cable anchor position `x,y,z` (mm).
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub anchor: Option<Vec<f64>>,
}

impl ScenarioArgs {
    pub fn resolve(&self, file: &ScenarioFile, joints: usize, seed: u64) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::for_joints(joints, seed);
        if let Some(n) = file.n_points {
            cfg.n_points = n;
        }
        if let Some(s) = file.deviation_scale {
            cfg.deviation_scale = s;
        }
        if let Some(noise) = file.noise {
            cfg.noise = noise;
        }
        if let Some(l) = &file.joint_limits {
            cfg.joint_limits = l.clone();
        }
        if let Some(a) = file.anchor {
            cfg.anchor = a;
        }

        if let Some(n) = self.n {
            cfg.n_points = n as usize;
        }
        let noise = &mut cfg.noise;
        set(&mut noise.sigma, self.sigma);
        set(&mut noise.outlier_rate, self.outlier_rate);
        set(&mut noise.outlier_scale, self.outlier_scale);
        let scale = &mut cfg.deviation_scale;
        set(&mut scale.a_mm, self.scale_a);
        set(&mut scale.d_mm, self.scale_d);
        set(&mut scale.theta_rad, self.scale_theta);
        set(&mut scale.alpha_rad, self.scale_alpha);
        if let Some(a) = &self.anchor {
            cfg.anchor = [a[0], a[1], a[2]];
        }
        cfg
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct PipelineArgs {
    /// JSON config file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice. A fresh seed is drawn and printed
    /// when omitted.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Search iterations.
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Initial step size, relative to the search box half-width.
    #[arg(long)]
    pub delta0: Option<f64>,
    /// Per-iteration step decay.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Independent search restarts.
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub particles: Option<usize>,
    #[arg(long)]
    pub pf_steps: Option<usize>,
    /// Measurement noise std for particle weighting (mm). Estimated from
    /// the data when omitted.
    #[arg(long)]
    pub r_sigma: Option<f64>,
    /// Fraction of samples used for identification.
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Also identify an offset of the cable anchor.
    #[arg(long)]
    pub identify_anchor: bool,
    /// Record wall-clock times (reports are then no longer byte-identical
    /// across reruns).
    #[arg(long)]
    pub timing: bool,
}

impl PipelineArgs {
    pub fn resolve(&self, file: &ConfigFile, seed: u64) -> Result<PipelineConfig> {
        let mut cfg = file.pipeline.clone();
        cfg.seed = seed;
        set(&mut cfg.search.max_iters, self.max_iters);
        set(&mut cfg.search.delta0, self.delta0);
        set(&mut cfg.search.mu, self.mu);
        set(&mut cfg.search.restarts, self.restarts);
        set(&mut cfg.pf.n_particles, self.particles);
        set(&mut cfg.pf.n_steps, self.pf_steps);
        if self.r_sigma.is_some() {
            cfg.pf.r_sigma = self.r_sigma;
        }
        set(&mut cfg.train_fraction, self.train_fraction);
        cfg.identify_anchor |= self.identify_anchor;
        cfg.record_timing |= self.timing;
        if let Err(e) = cfg.validate() {
            bail!("invalid configuration: {e}");
        }
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// The given seed, or a fresh one that is logged so the run can be repeated.
pub fn seed_or_fresh(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let nanos = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0);
        // Spread nearby clock readings apart.
        let s = nanos.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ u64::from(std::process::id());
        eprintln!("seed: {s} (pass --seed {s} to repeat this run)");
        s
    })
}

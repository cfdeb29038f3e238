//! End-to-end calibration runs: BAS, CIBAS, particle filter, and the
//! two-stage CIBAS + particle filter method.
//!
//! The dataset is split once per seed into a training part, used for
//! identification, and a held-out part, used only for reporting. Every
//! method sees the same split for the same seed.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{DeviationLayout, DeviationVector, DhTable};
use crate::objective::{fitness_unchecked, metrics, residuals, MeasurementSet, Metrics};
use crate::optimizer::{derive_seed, optimize, Bounds, Method, SearchConfig, TracePoint};
use crate::particle_filter::{mad_sigma, pf_run, PfConfig, PfStep};
use crate::simdata::DeviationScale;

/// Smallest dataset `calibrate` accepts.
pub const MIN_SAMPLES: usize = 10;

/// Lower bound for an estimated measurement noise scale (mm).
const MIN_R_SIGMA: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CalibrationMethod {
    #[serde(rename = "bas")]
    Bas,
    #[serde(rename = "cibas")]
    Cibas,
    #[serde(rename = "pf")]
    Pf,
    #[serde(rename = "pf-cibas")]
    PfCibas,
}

impl CalibrationMethod {
    pub const ALL: [CalibrationMethod; 4] = [Self::Bas, Self::Cibas, Self::Pf, Self::PfCibas];

    pub fn name(self) -> &'static str {
        match self {
            Self::Bas => "bas",
            Self::Cibas => "cibas",
            Self::Pf => "pf",
            Self::PfCibas => "pf-cibas",
        }
    }
}

impl fmt::Display for CalibrationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CalibrationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

/// Search settings that do not depend on the problem dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSettings {
    pub delta0: f64,
    pub mu: f64,
    pub m0_ratio: f64,
    pub trust_ratio: f64,
    pub max_iters: usize,
    pub fitness_tol: f64,
    pub stall_iters: usize,
    pub restarts: usize,
}

impl Default for SearchSettings {
    fn default() -> Self {
        let d = SearchConfig::new(Bounds::symmetric(&[1.0]).expect("unit box"));
        Self {
            delta0: d.delta0,
            mu: d.mu,
            m0_ratio: d.m0_ratio,
            trust_ratio: d.trust_ratio,
            max_iters: d.max_iters,
            fitness_tol: d.fitness_tol,
            stall_iters: d.stall_iters,
            restarts: d.restarts,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PfSettings {
    pub n_particles: usize,
    pub n_steps: usize,
    /// Random-walk std as a fraction of the box half-width.
    pub process_ratio: f64,
    /// Initial spread as a multiple of the random-walk std.
    pub init_ratio: f64,
    /// Measurement noise std (mm); estimated from the residuals at the
    /// filter's starting point when absent.
    pub r_sigma: Option<f64>,
    pub ess_threshold: f64,
}

impl Default for PfSettings {
    fn default() -> Self {
        Self {
            n_particles: 500,
            n_steps: 50,
            process_ratio: 0.01,
            init_ratio: 3.0,
            r_sigma: None,
            ess_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Fraction of samples used for identification.
    pub train_fraction: f64,
    /// Half-widths of the search box per parameter block.
    pub box_scale: DeviationScale,
    /// Also identify an offset of the cable anchor.
    pub identify_anchor: bool,
    pub anchor_box_mm: f64,
    pub search: SearchSettings,
    pub pf: PfSettings,
    /// Record wall-clock time in reports. Off by default so that reports
    /// are reproducible byte for byte.
    pub record_timing: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_fraction: 2.0 / 3.0,
            box_scale: DeviationScale::default().scaled(2.0),
            identify_anchor: false,
            anchor_box_mm: 5.0,
            search: SearchSettings::default(),
            pf: PfSettings::default(),
            record_timing: false,
        }
    }
}

impl PipelineConfig {
    pub fn layout(&self, joints: usize) -> DeviationLayout {
        DeviationLayout::new(joints, self.identify_anchor)
    }

    pub fn bounds(&self, layout: DeviationLayout) -> Result<Bounds> {
        Bounds::symmetric(&self.box_scale.per_coordinate(layout, self.anchor_box_mm))
    }

    pub fn search_config(&self, layout: DeviationLayout) -> Result<SearchConfig> {
        let s = &self.search;
        let cfg = SearchConfig {
            delta0: s.delta0,
            mu: s.mu,
            m0_ratio: s.m0_ratio,
            trust_ratio: s.trust_ratio,
            max_iters: s.max_iters,
            fitness_tol: s.fitness_tol,
            stall_iters: s.stall_iters,
            restarts: s.restarts,
            bounds: self.bounds(layout)?,
            seed: derive_seed(self.seed, 1),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pf_config(&self, layout: DeviationLayout, r_sigma: f64) -> Result<PfConfig> {
        let bounds = self.bounds(layout)?;
        let mut cfg = PfConfig::new(bounds, r_sigma);
        let p = &self.pf;
        cfg.n_particles = p.n_particles;
        cfg.n_steps = p.n_steps;
        cfg.process_sigma = (0..layout.dim()).map(|i| p.process_ratio * cfg.bounds.half_width(i)).collect();
        cfg.init_spread = cfg.process_sigma.iter().map(|s| p.init_ratio * s).collect();
        cfg.ess_threshold = p.ess_threshold;
        cfg.seed = derive_seed(self.seed, 2);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidConfig("train_fraction must lie in (0, 1)".into()));
        }
        let layout = self.layout(1);
        self.search_config(layout)?;
        self.pf_config(layout, 1.0)?;
        if let Some(r) = self.pf.r_sigma {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::InvalidConfig("r_sigma must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Seeded shuffle of `0..n` into sorted (train, test) index lists.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    idx.shuffle(&mut rng);
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub train: Metrics,
    pub test: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub method: CalibrationMethod,
    pub seed: u64,
    pub parameter_labels: Vec<String>,
    pub w_est: DeviationVector,
    /// Nominal model (zero deviation).
    pub metrics_before: SplitMetrics,
    pub metrics_after: SplitMetrics,
    pub train_fitness_before: f64,
    pub train_fitness_after: f64,
    /// Best-so-far trace of the search stage, if any.
    pub search_trace: Vec<TracePoint>,
    /// Per-step ESS and estimate fitness of the filter stage, if any.
    pub pf_trace: Vec<PfStep>,
    /// The filter's estimate lost to the earlier stage on training fitness
    /// and was discarded.
    pub pf_rejected: bool,
    pub eval_count: usize,
    /// Only set when timing is enabled.
    pub wall_time_s: Option<f64>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub config: PipelineConfig,
}

impl CalibrationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn split_metrics(train: &MeasurementSet, test: &MeasurementSet, table: &DhTable, w: &DeviationVector) -> Result<SplitMetrics> {
    Ok(SplitMetrics {
        train: metrics(&residuals(train, table, w)?)?,
        test: metrics(&residuals(test, table, w)?)?,
    })
}

/// Calibrate `table` against `ms` with `method`.
pub fn calibrate(
    method: CalibrationMethod,
    ms: &MeasurementSet,
    table: &DhTable,
    cfg: &PipelineConfig,
) -> Result<CalibrationReport> {
    let started = Instant::now();
    cfg.validate()?;
    if ms.len() < MIN_SAMPLES {
        return Err(Error::InvalidDataset(format!(
            "{} samples; calibration needs at least {MIN_SAMPLES}",
            ms.len()
        )));
    }
    if ms.joint_count() != table.joint_count() {
        return Err(Error::DimensionMismatch {
            expected: table.joint_count(),
            got: ms.joint_count(),
        });
    }
    let (train_idx, test_idx) = split_indices(ms.len(), cfg.train_fraction, cfg.seed);
    let train = ms.subset(&train_idx)?;
    let test = ms.subset(&test_idx)?;
    let layout = cfg.layout(table.joint_count());
    let zero = DeviationVector::zeros(layout);
    let train_fitness = |w: &[f64]| fitness_unchecked(&train, table.links(), layout, w);
    let fitness_before = train_fitness(zero.as_slice());

    let mut search_trace = Vec::new();
    let mut pf_trace = Vec::new();
    let mut pf_rejected = false;
    let mut evals = 1;

    let run_search = |m: Method| optimize(m, &cfg.search_config(layout)?, &train_fitness, zero.as_slice());
    let run_pf = |center: &DeviationVector| -> Result<_> {
        let r_sigma = match cfg.pf.r_sigma {
            Some(r) => r,
            None => mad_sigma(&residuals(&train, table, center)?).max(MIN_R_SIGMA),
        };
        pf_run(center, &train, table, &cfg.pf_config(layout, r_sigma)?)
    };

    // Candidates in stage order; the filter only replaces the incumbent
    // when it lowers the training fitness.
    let mut best = zero.clone();
    let mut best_f = fitness_before;
    if matches!(method, CalibrationMethod::Bas | CalibrationMethod::Cibas | CalibrationMethod::PfCibas) {
        let m = if method == CalibrationMethod::Bas { Method::Bas } else { Method::Cibas };
        let res = run_search(m)?;
        evals += res.eval_count;
        search_trace = res.trace;
        if res.best_f <= best_f {
            best = DeviationVector::from_vec(layout, res.best_w)?;
            best_f = res.best_f;
        }
    }
    if matches!(method, CalibrationMethod::Pf | CalibrationMethod::PfCibas) {
        let res = run_pf(&best)?;
        evals += res.eval_count + 1;
        pf_trace = res.trace;
        let f = train_fitness(&res.w_est);
        if f <= best_f {
            best = DeviationVector::from_vec(layout, res.w_est)?;
            best_f = f;
        } else {
            pf_rejected = true;
        }
    }

    Ok(CalibrationReport {
        method,
        seed: cfg.seed,
        parameter_labels: layout.labels(),
        metrics_before: split_metrics(&train, &test, table, &zero)?,
        metrics_after: split_metrics(&train, &test, table, &best)?,
        w_est: best,
        train_fitness_before: fitness_before,
        train_fitness_after: best_f,
        search_trace,
        pf_trace,
        pf_rejected,
        eval_count: evals,
        wall_time_s: cfg.record_timing.then(|| started.elapsed().as_secs_f64()),
        train_indices: train_idx,
        test_indices: test_idx,
        config: cfg.clone(),
    })
}

/// One line of a comparison table (held-out metrics after calibration).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: CalibrationMethod,
    pub rmse_mm: f64,
    pub std_mm: f64,
    pub max_mm: f64,
    pub evals: usize,
    pub wall_s: Option<f64>,
}

impl ComparisonRow {
    pub fn from_report(r: &CalibrationReport) -> Self {
        let m = r.metrics_after.test;
        Self {
            method: r.method,
            rmse_mm: m.rmse_mm,
            std_mm: m.std_mm,
            max_mm: m.max_mm,
            evals: r.eval_count,
            wall_s: r.wall_time_s,
        }
    }
}

pub const COMPARISON_HEADER: &str = "method,rmse_mm,std_mm,max_mm,evals,wall_s";

impl fmt::Display for ComparisonRow {
    /// CSV line matching [`COMPARISON_HEADER`]; `wall_s` is empty when untimed.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{},", self.method, self.rmse_mm, self.std_mm, self.max_mm, self.evals)?;
        if let Some(w) = self.wall_s {
            write!(f, "{w}")?;
        }
        Ok(())
    }
}

/// Result of running several methods on one dataset and seed.
#[derive(Debug)]
pub struct Comparison {
    pub outcomes: Vec<(CalibrationMethod, Result<CalibrationReport>)>,
}

impl Comparison {
    pub fn rows(&self) -> Vec<ComparisonRow> {
        self.outcomes
            .iter()
            .filter_map(|(_, r)| r.as_ref().ok().map(ComparisonRow::from_report))
            .collect()
    }

    pub fn failures(&self) -> Vec<(CalibrationMethod, &Error)> {
        self.outcomes
            .iter()
            .filter_map(|(m, r)| r.as_ref().err().map(|e| (*m, e)))
            .collect()
    }
}

/// Run every method on the same split and seed. Methods run concurrently;
/// a failing method does not stop the others.
pub fn compare(methods: &[CalibrationMethod], ms: &MeasurementSet, table: &DhTable, cfg: &PipelineConfig) -> Result<Comparison> {
    if methods.is_empty() {
        return Err(Error::InvalidConfig("no methods to compare".into()));
    }
    let outcomes = methods
        .par_iter()
        .map(|&m| (m, calibrate(m, ms, table, cfg)))
        .collect();
    Ok(Comparison { outcomes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simdata::{demo_table, simulate_measurements, NoiseModel, ScenarioConfig};

    fn quick_cfg() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.search.max_iters = 30;
        c.pf.n_particles = 40;
        c.pf.n_steps = 5;
        c
    }

    #[test]
    fn method_names_roundtrip() {
        for m in CalibrationMethod::ALL {
            assert_eq!(m.name().parse::<CalibrationMethod>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!(matches!("bogus".parse::<CalibrationMethod>(), Err(Error::UnknownMethod(_))));
    }

    #[test]
    fn split_is_80_40_and_disjoint() {
        let (train, test) = split_indices(120, 2.0 / 3.0, 9);
        assert_eq!((train.len(), test.len()), (80, 40));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..120).collect::<Vec<_>>());
        assert_eq!(split_indices(120, 2.0 / 3.0, 9), (train, test));
        assert_ne!(split_indices(120, 2.0 / 3.0, 10).0, split_indices(120, 2.0 / 3.0, 9).0);
    }

    #[test]
    fn too_few_samples() {
        let table = demo_table();
        let mut sc = ScenarioConfig::demo(1);
        sc.n_points = 9;
        let ds = simulate_measurements(&table, &sc).unwrap();
        assert!(matches!(
            calibrate(CalibrationMethod::Cibas, &ds.measurements, &table, &quick_cfg()),
            Err(Error::InvalidDataset(_))
        ));
    }

    #[test]
    fn nothing_to_calibrate() {
        let table = demo_table();
        let mut sc = ScenarioConfig::demo(2);
        sc.deviation_scale = sc.deviation_scale.scaled(0.0);
        sc.noise = NoiseModel::noiseless();
        let ds = simulate_measurements(&table, &sc).unwrap();
        for m in CalibrationMethod::ALL {
            let r = calibrate(m, &ds.measurements, &table, &quick_cfg()).unwrap();
            assert!(r.metrics_before.test.rmse_mm < 1e-9);
            assert!((r.metrics_after.test.rmse_mm - r.metrics_before.test.rmse_mm).abs() <= 1e-9);
        }
    }

    #[test]
    fn training_fit_never_degrades() {
        let table = demo_table();
        let ds = simulate_measurements(&table, &ScenarioConfig::demo(3)).unwrap();
        for m in CalibrationMethod::ALL {
            let r = calibrate(m, &ds.measurements, &table, &quick_cfg()).unwrap();
            assert!(r.metrics_after.train.rmse_mm <= r.metrics_before.train.rmse_mm, "{m}");
            assert!(r.train_fitness_after <= r.train_fitness_before);
            assert!(r.wall_time_s.is_none());
        }
    }

    #[test]
    fn report_json_roundtrip() {
        let table = demo_table();
        let ds = simulate_measurements(&table, &ScenarioConfig::demo(4)).unwrap();
        let mut cfg = quick_cfg();
        cfg.record_timing = true;
        let r = calibrate(CalibrationMethod::PfCibas, &ds.measurements, &table, &cfg).unwrap();
        assert!(r.wall_time_s.is_some());
        let back = CalibrationReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn compare_rows_and_shared_split() {
        let table = demo_table();
        let ds = simulate_measurements(&table, &ScenarioConfig::demo(5)).unwrap();
        let c = compare(&[CalibrationMethod::Bas], &ds.measurements, &table, &quick_cfg()).unwrap();
        assert_eq!(c.rows().len(), 1);
        let c = compare(&CalibrationMethod::ALL, &ds.measurements, &table, &quick_cfg()).unwrap();
        let reports: Vec<_> = c.outcomes.iter().map(|(_, r)| r.as_ref().unwrap()).collect();
        for r in &reports[1..] {
            assert_eq!(r.train_indices, reports[0].train_indices);
            assert_eq!(r.test_indices, reports[0].test_indices);
        }
        assert!(compare(&[], &ds.measurements, &table, &quick_cfg()).is_err());
        let line = c.rows()[0].to_string();
        assert_eq!(line.split(',').count(), COMPARISON_HEADER.split(',').count());
    }

    #[test]
    fn pf_cibas_starts_from_the_cibas_estimate() {
        let table = demo_table();
        let ds = simulate_measurements(&table, &ScenarioConfig::demo(6)).unwrap();
        let cfg = quick_cfg();
        let a = calibrate(CalibrationMethod::Cibas, &ds.measurements, &table, &cfg).unwrap();
        let b = calibrate(CalibrationMethod::PfCibas, &ds.measurements, &table, &cfg).unwrap();
        assert_eq!(a.search_trace, b.search_trace);
        assert!(b.train_fitness_after <= a.train_fitness_after);
        if b.pf_rejected {
            assert_eq!(a.w_est, b.w_est);
        }
    }
}

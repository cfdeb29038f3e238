//! Beetle antennae search (BAS) and its cubic-interpolated variant (CIBAS).
//!
//! Both searches work inside a box. The step size `delta` is dimensionless:
//! a move of `t` along the unit direction `b` displaces coordinate `i` by
//! `t * b_i * h_i`, with `h_i` the box half-width, so the same configuration
//! applies to parameters of very different units.
//!
//! CIBAS replaces the fixed-length BAS move by a line search along `b`: the
//! current point and the two antennae give three values of
//! `phi(t) = f(w + t b)` at `t = 0, +m0, -m0`, the central difference gives
//! `phi'(0)`, and the minimiser of the interpolating cubic is tried as the
//! next position. The plain BAS move is kept whenever the cubic candidate is
//! missing, too far away or not better.

mod cubic;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cubic::{cubic_fit, cubic_minimum, CubicFit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Bas,
    Cibas,
}

/// Axis-aligned search box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let b = Self { lower, upper };
        b.validate()?;
        Ok(b)
    }

    /// `[-half_width_i, +half_width_i]` per coordinate.
    pub fn symmetric(half_width: &[f64]) -> Result<Self> {
        Self::new(half_width.iter().map(|h| -h).collect(), half_width.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() {
            return Err(Error::InvalidConfig("bounds have mismatched lengths".into()));
        }
        if self.lower.is_empty() {
            return Err(Error::InvalidConfig("bounds are empty".into()));
        }
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidConfig(format!("bound {i} is not a finite interval with lower < upper")));
            }
        }
        Ok(())
    }

    pub fn half_width(&self, i: usize) -> f64 {
        0.5 * (self.upper[i] - self.lower[i])
    }

    pub fn clamp(&self, w: &mut [f64]) {
        for ((v, lo), hi) in w.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }

    pub fn contains(&self, w: &[f64]) -> bool {
        w.len() == self.dim() && w.iter().zip(&self.lower).zip(&self.upper).all(|((v, lo), hi)| lo <= v && v <= hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Initial step, as a fraction of the box half-width.
    pub delta0: f64,
    /// Geometric step decay per iteration, in (0, 1).
    pub mu: f64,
    /// Antenna length as a fraction of the current step.
    pub m0_ratio: f64,
    /// Cubic candidates further than `trust_ratio * delta` are discarded.
    pub trust_ratio: f64,
    pub max_iters: usize,
    /// Stop once the best fitness is at or below this value. A non-finite
    /// value disables the test.
    pub fitness_tol: f64,
    /// Stop after this many iterations without improvement; 0 disables.
    pub stall_iters: usize,
    /// Independent starts from the same initial point; the best run wins.
    pub restarts: usize,
    pub bounds: Bounds,
    pub seed: u64,
}

impl SearchConfig {
    pub fn new(bounds: Bounds) -> Self {
        Self {
            delta0: 0.1,
            mu: 0.95,
            m0_ratio: 0.5,
            trust_ratio: 10.0,
            max_iters: 200,
            fitness_tol: 0.0,
            stall_iters: 50,
            restarts: 1,
            bounds,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(Error::InvalidConfig(format!("mu = {} must lie in (0, 1)", self.mu)));
        }
        if !(self.delta0 > 0.0 && self.delta0.is_finite()) {
            return Err(Error::InvalidConfig("delta0 must be positive".into()));
        }
        if !(self.m0_ratio > 0.0 && self.m0_ratio.is_finite()) {
            return Err(Error::InvalidConfig("m0_ratio must be positive".into()));
        }
        if !(self.trust_ratio > 0.0) {
            return Err(Error::InvalidConfig("trust_ratio must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidConfig("restarts must be at least 1".into()));
        }
        Ok(())
    }

    /// Step size after `iter` completed iterations.
    pub fn delta_at(&self, iter: usize) -> f64 {
        self.delta0 * self.mu.powi(iter as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iter: usize,
    pub best_f: f64,
    pub evals: usize,
}

/// Beetle position plus best-so-far memory.
#[derive(Clone, Debug)]
pub struct SearchState {
    pub w: Vec<f64>,
    /// Fitness at `w`.
    pub f: f64,
    pub delta: f64,
    pub best_w: Vec<f64>,
    pub best_f: f64,
    pub iter: usize,
    pub evals: usize,
    pub trace: Vec<TracePoint>,
}

impl SearchState {
    /// Evaluate the start point (one fitness call).
    pub fn start<F>(w0: Vec<f64>, cfg: &SearchConfig, fitness: &F) -> Self
    where
        F: Fn(&[f64]) -> f64 + ?Sized,
    {
        let f = finite_or_inf(fitness(&w0));
        Self {
            best_w: w0.clone(),
            best_f: f,
            w: w0,
            f,
            delta: cfg.delta0,
            iter: 0,
            evals: 1,
            trace: Vec::new(),
        }
    }

    fn eval<F>(&mut self, fitness: &F, p: &[f64]) -> f64
    where
        F: Fn(&[f64]) -> f64 + ?Sized,
    {
        self.evals += 1;
        let f = finite_or_inf(fitness(p));
        if f < self.best_f {
            self.best_f = f;
            self.best_w.clear();
            self.best_w.extend_from_slice(p);
        }
        f
    }

    fn finish_iteration(&mut self, cfg: &SearchConfig) {
        self.iter += 1;
        self.delta = cfg.delta_at(self.iter);
        self.trace.push(TracePoint {
            iter: self.iter,
            best_f: self.best_f,
            evals: self.evals,
        });
    }
}

fn finite_or_inf(f: f64) -> f64 {
    if f.is_finite() {
        f
    } else {
        f64::INFINITY
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Unit vector with components drawn from U[-1, 1] before normalisation.
pub fn random_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    assert!(dim >= 1, "direction of dimension 0");
    loop {
        let b: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            return b.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// Left and right antennae `w + m0 b`, `w - m0 b` (unscaled, unclamped).
pub fn tentacles(w: &[f64], b: &[f64], m0: f64) -> (Vec<f64>, Vec<f64>) {
    let left = w.iter().zip(b).map(|(x, d)| x + m0 * d).collect();
    let right = w.iter().zip(b).map(|(x, d)| x - m0 * d).collect();
    (left, right)
}

/// `clamp(w + t * (h ⊙ b))`.
fn point_along(cfg: &SearchConfig, w: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    let mut p: Vec<f64> = w
        .iter()
        .zip(b)
        .enumerate()
        .map(|(i, (x, d))| x + t * d * cfg.bounds.half_width(i))
        .collect();
    cfg.bounds.clamp(&mut p);
    p
}

/// One BAS iteration: probe both antennae, step `delta` towards the better
/// one (no move on a tie), then decay `delta`.
pub fn bas_step<F, R>(state: &mut SearchState, cfg: &SearchConfig, fitness: &F, rng: &mut R)
where
    F: Fn(&[f64]) -> f64 + ?Sized,
    R: Rng + ?Sized,
{
    let b = random_direction(state.w.len(), rng);
    let m0 = cfg.m0_ratio * state.delta;
    let left = point_along(cfg, &state.w, &b, m0);
    let right = point_along(cfg, &state.w, &b, -m0);
    let f_left = state.eval(fitness, &left);
    let f_right = state.eval(fitness, &right);
    let s = sign(f_right - f_left);
    if s != 0.0 {
        let cand = point_along(cfg, &state.w, &b, s * state.delta);
        let f_cand = state.eval(fitness, &cand);
        if f_cand.is_finite() {
            state.w = cand;
            state.f = f_cand;
        }
    }
    state.finish_iteration(cfg);
}

/// Which candidate a CIBAS iteration moved to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Cubic,
    Bas,
    Stay,
}

/// One CIBAS iteration. At most four fitness calls: two antennae, the BAS
/// candidate and the cubic candidate (the current value is cached).
pub fn cibas_step<F, R>(state: &mut SearchState, cfg: &SearchConfig, fitness: &F, rng: &mut R) -> StepOutcome
where
    F: Fn(&[f64]) -> f64 + ?Sized,
    R: Rng + ?Sized,
{
    let b = random_direction(state.w.len(), rng);
    let delta = state.delta;
    let m0 = cfg.m0_ratio * delta;
    let phi0 = state.f;
    let left = point_along(cfg, &state.w, &b, m0);
    let right = point_along(cfg, &state.w, &b, -m0);
    let phi_plus = state.eval(fitness, &left);
    let phi_minus = state.eval(fitness, &right);

    let s = sign(phi_minus - phi_plus);
    let (bas_w, bas_f) = if s != 0.0 {
        let cand = point_along(cfg, &state.w, &b, s * delta);
        let f = state.eval(fitness, &cand);
        (Some(cand), f)
    } else {
        (None, phi0)
    };

    let slope = (phi_plus - phi_minus) / (2.0 * m0);
    let cubic_t = cubic_fit(0.0, m0, -m0, phi0, phi_plus, phi_minus, slope)
        .ok()
        .and_then(|fit| cubic_minimum(&fit))
        .filter(|t| t.abs() <= cfg.trust_ratio * delta && *t != 0.0);

    let mut outcome = StepOutcome::Stay;
    if let Some(t) = cubic_t {
        let cand = point_along(cfg, &state.w, &b, t);
        let f = state.eval(fitness, &cand);
        if f < bas_f.min(phi0) {
            debug_assert!(f < phi0 && f < bas_f);
            state.w = cand;
            state.f = f;
            outcome = StepOutcome::Cubic;
        }
    }
    if outcome == StepOutcome::Stay {
        if let Some(cand) = bas_w.filter(|_| bas_f.is_finite()) {
            state.w = cand;
            state.f = bas_f;
            outcome = StepOutcome::Bas;
        }
    }
    state.finish_iteration(cfg);
    outcome
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    FitnessTol,
    Stalled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_w: Vec<f64>,
    pub best_f: f64,
    /// Trace of the winning start.
    pub trace: Vec<TracePoint>,
    /// Fitness calls summed over all starts.
    pub eval_count: usize,
    pub iterations: usize,
    pub stop: StopReason,
}

impl SearchResult {
    /// Fitness calls spent until the best value first reached `target`.
    pub fn evals_to_reach(&self, target: f64) -> Option<usize> {
        self.trace.iter().find(|p| p.best_f <= target).map(|p| p.evals)
    }
}

/// Derive the seed of start `k` from the configured seed (SplitMix64).
pub(crate) fn derive_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn run_single<F>(method: Method, cfg: &SearchConfig, fitness: &F, w0: &[f64], seed: u64) -> SearchResult
where
    F: Fn(&[f64]) -> f64 + ?Sized,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = SearchState::start(w0.to_vec(), cfg, fitness);
    let mut since_improvement = 0;
    let mut stop = StopReason::MaxIters;
    while state.iter < cfg.max_iters {
        let before = state.best_f;
        match method {
            Method::Bas => bas_step(&mut state, cfg, fitness, &mut rng),
            Method::Cibas => {
                cibas_step(&mut state, cfg, fitness, &mut rng);
            }
        }
        if state.best_f < before {
            since_improvement = 0;
        } else {
            since_improvement += 1;
        }
        if cfg.fitness_tol.is_finite() && state.best_f <= cfg.fitness_tol {
            stop = StopReason::FitnessTol;
            break;
        }
        if cfg.stall_iters > 0 && since_improvement >= cfg.stall_iters {
            stop = StopReason::Stalled;
            break;
        }
    }
    SearchResult {
        best_w: state.best_w,
        best_f: state.best_f,
        iterations: state.iter,
        eval_count: state.evals,
        trace: state.trace,
        stop,
    }
}

/// Run BAS or CIBAS from `w0` until a stopping rule fires.
///
/// With `restarts > 1` the starts run in parallel on derived seeds and the
/// lowest best fitness wins (ties go to the lower start index), so the
/// result does not depend on scheduling.
pub fn optimize<F>(method: Method, cfg: &SearchConfig, fitness: &F, w0: &[f64]) -> Result<SearchResult>
where
    F: Fn(&[f64]) -> f64 + Sync + ?Sized,
{
    cfg.validate()?;
    if w0.len() != cfg.bounds.dim() {
        return Err(Error::DimensionMismatch {
            expected: cfg.bounds.dim(),
            got: w0.len(),
        });
    }
    if !cfg.bounds.contains(w0) {
        return Err(Error::InvalidConfig("start point lies outside the search box".into()));
    }
    if cfg.restarts == 1 {
        return Ok(run_single(method, cfg, fitness, w0, cfg.seed));
    }
    let runs: Vec<SearchResult> = (0..cfg.restarts as u64)
        .into_par_iter()
        .map(|k| run_single(method, cfg, fitness, w0, derive_seed(cfg.seed, k)))
        .collect();
    let total: usize = runs.iter().map(|r| r.eval_count).sum();
    let mut best = runs
        .into_iter()
        .reduce(|a, b| if b.best_f < a.best_f { b } else { a })
        .expect("at least one start");
    best.eval_count = total;
    Ok(best)
}

/// Write a trace as CSV with header `iter,best_f,evals`.
pub fn write_trace_csv<W: Write>(trace: &[TracePoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "iter,best_f,evals")?;
    for p in trace {
        writeln!(out, "{},{},{}", p.iter, p.best_f, p.evals)?;
    }
    Ok(())
}

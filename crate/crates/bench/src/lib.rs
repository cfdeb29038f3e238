//! Shared fixtures for the benchmarks.

use armcal_core::particle_filter::PfConfig;
use armcal_core::pipeline::PipelineConfig;
use armcal_core::simdata::{demo_table, simulate_measurements, ScenarioConfig};
use armcal_core::{DeviationLayout, DhTable, MeasurementSet, SearchConfig};

pub struct Fixture {
    pub table: DhTable,
    pub measurements: MeasurementSet,
    pub layout: DeviationLayout,
    pub pipeline: PipelineConfig,
}

/// The demo arm with a default 120-point noisy dataset.
pub fn demo_fixture(seed: u64) -> Fixture {
    let table = demo_table();
    let ds = simulate_measurements(&table, &ScenarioConfig::demo(seed)).expect("demo scenario is valid");
    let pipeline = PipelineConfig {
        seed,
        ..PipelineConfig::default()
    };
    Fixture {
        layout: pipeline.layout(table.joint_count()),
        table,
        measurements: ds.measurements,
        pipeline,
    }
}

impl Fixture {
    pub fn search_config(&self) -> SearchConfig {
        self.pipeline.search_config(self.layout).expect("default config is valid")
    }

    pub fn pf_config(&self) -> PfConfig {
        self.pipeline.pf_config(self.layout, 0.1).expect("default config is valid")
    }
}

pub fn sphere(w: &[f64]) -> f64 {
    w.iter().map(|x| x * x).sum()
}

pub fn rosenbrock(w: &[f64]) -> f64 {
    w.windows(2).map(|p| 100.0 * (p[1] - p[0] * p[0]).powi(2) + (1.0 - p[0]).powi(2)).sum()
}

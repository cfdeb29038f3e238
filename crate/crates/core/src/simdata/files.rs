//! Measurement dataset CSV.
//!
//! ```text
//! # anchor_mm: 700 300 -100
//! # seed: 42
//! # truth: <4J space-separated deviations>
//! q1,q2,q3,q4,q5,q6,L_mm
//! 0.12,-0.4,...,812.3
//! ```
//!
//! Other `#` lines are ignored. Numbers are written with shortest
//! round-trip formatting so reading a written file is lossless.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{DeviationLayout, DeviationVector};
use crate::objective::{MeasurementSet, Sample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub measurements: MeasurementSet,
    pub seed: Option<u64>,
    /// Generating deviation, flattened in layout order (synthetic sets only).
    pub truth: Option<Vec<f64>>,
}

impl Dataset {
    pub fn real(measurements: MeasurementSet) -> Self {
        Self {
            measurements,
            seed: None,
            truth: None,
        }
    }

    /// The truth metadata as a kinematic-only deviation vector.
    pub fn truth_vector(&self) -> Option<Result<DeviationVector>> {
        self.truth.as_ref().map(|t| {
            DeviationVector::from_vec(DeviationLayout::new(self.measurements.joint_count(), false), t.clone())
        })
    }

    pub fn to_csv(&self) -> String {
        let ms = &self.measurements;
        let a = ms.anchor();
        let mut out = String::new();
        let _ = writeln!(out, "# anchor_mm: {} {} {}", a.x, a.y, a.z);
        if let Some(seed) = self.seed {
            let _ = writeln!(out, "# seed: {seed}");
        }
        if let Some(truth) = &self.truth {
            let joined: Vec<String> = truth.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "# truth: {}", joined.join(" "));
        }
        let header: Vec<String> = (1..=ms.joint_count()).map(|j| format!("q{j}")).collect();
        let _ = writeln!(out, "{},L_mm", header.join(","));
        for s in ms.samples() {
            for q in &s.q {
                let _ = write!(out, "{q},");
            }
            let _ = writeln!(out, "{}", s.length);
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut anchor: Option<[f64; 3]> = None;
        let mut seed = None;
        let mut truth = None;
        let mut joints: Option<usize> = None;
        let mut samples = Vec::new();

        let numbers = |s: &str, line: usize| -> Result<Vec<f64>> {
            s.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| Error::parse(origin, line, format!("`{t}`: {e}"))))
                .collect()
        };

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                let Some((key, value)) = comment.split_once(':') else {
                    continue;
                };
                match key.trim() {
                    "anchor_mm" => {
                        let v = numbers(value, line_no)?;
                        let arr: [f64; 3] = v
                            .try_into()
                            .map_err(|_| Error::parse(origin, line_no, "anchor_mm needs 3 numbers"))?;
                        anchor = Some(arr);
                    }
                    "seed" => {
                        seed = Some(
                            value
                                .trim()
                                .parse::<u64>()
                                .map_err(|e| Error::parse(origin, line_no, format!("seed: {e}")))?,
                        );
                    }
                    "truth" => truth = Some(numbers(value, line_no)?),
                    _ => {}
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            match joints {
                None => {
                    let n = fields.len();
                    let ok = n >= 2
                        && fields[n - 1] == "L_mm"
                        && fields[..n - 1].iter().enumerate().all(|(j, f)| *f == format!("q{}", j + 1));
                    if !ok {
                        return Err(Error::parse(origin, line_no, "expected header `q1,...,qJ,L_mm`"));
                    }
                    joints = Some(n - 1);
                }
                Some(j) => {
                    if fields.len() != j + 1 {
                        return Err(Error::parse(
                            origin,
                            line_no,
                            format!("expected {} columns, found {}", j + 1, fields.len()),
                        ));
                    }
                    let mut vals = Vec::with_capacity(j + 1);
                    for f in &fields {
                        vals.push(
                            f.parse::<f64>()
                                .map_err(|e| Error::parse(origin, line_no, format!("`{f}`: {e}")))?,
                        );
                    }
                    let length = vals.pop().expect("non-empty row");
                    samples.push(Sample { q: vals, length });
                }
            }
        }

        let joints = joints.ok_or_else(|| Error::parse(origin, 0, "missing header row"))?;
        let anchor = anchor.ok_or_else(|| Error::parse(origin, 0, "missing `# anchor_mm:` line"))?;
        if let Some(t) = &truth {
            if t.len() != 4 * joints {
                return Err(Error::parse(
                    origin,
                    0,
                    format!("truth has {} values, expected {}", t.len(), 4 * joints),
                ));
            }
        }
        let measurements = MeasurementSet::new(samples, anchor, joints)?;
        Ok(Self {
            measurements,
            seed,
            truth,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simdata::{demo_table, simulate_measurements, ScenarioConfig};
    use proptest::prelude::*;

    #[test]
    fn file_roundtrip_is_exact() {
        let ds = simulate_measurements(&demo_table(), &ScenarioConfig::demo(42)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        ds.write(&path).unwrap();
        assert_eq!(Dataset::read(&path).unwrap(), ds);
    }

    #[test]
    fn parse_minimal_real_dataset() {
        let text = "# anchor_mm: 1 2 3\n# operator: someone\nq1,q2,L_mm\n0.1,0.2,5.5\n0,0,4\n";
        let ds = Dataset::parse(text, "x").unwrap();
        assert_eq!(ds.measurements.len(), 2);
        assert_eq!(ds.seed, None);
        assert!(ds.truth.is_none());
        assert_eq!(ds.measurements.samples()[0].length, 5.5);
    }

    #[test]
    fn malformed_files() {
        for bad in [
            "q1,q2,L_mm\n0,0,1\n",                          // no anchor
            "# anchor_mm: 1 2\nq1,L_mm\n0,1\n",             // short anchor
            "# anchor_mm: 0 0 0\nq1,q3,L_mm\n0,0,1\n",      // bad header
            "# anchor_mm: 0 0 0\nq1,L_mm\n0,1,2\n",         // extra column
            "# anchor_mm: 0 0 0\nq1,L_mm\n0,abc\n",         // bad number
            "# anchor_mm: 0 0 0\nq1,L_mm\n0,-1\n",          // negative length
            "# anchor_mm: 0 0 0\n# truth: 1 2\nq1,L_mm\n0,1\n", // truth size
            "# anchor_mm: 0 0 0\nq1,L_mm\n",                // no samples
        ] {
            assert!(Dataset::parse(bad, "bad").is_err(), "{bad}");
        }
    }

    proptest! {
        #[test]
        fn arbitrary_values_roundtrip(
            rows in prop::collection::vec((prop::collection::vec(-10.0f64..10.0, 3), 1e-3f64..1e4), 1..20),
            anchor in prop::array::uniform3(-1e3f64..1e3),
            truth in prop::collection::vec(-1.0f64..1.0, 12),
            seed in any::<u64>(),
        ) {
            let samples = rows.into_iter().map(|(q, length)| Sample { q, length }).collect();
            let ds = Dataset {
                measurements: MeasurementSet::new(samples, anchor, 3).unwrap(),
                seed: Some(seed),
                truth: Some(truth),
            };
            prop_assert_eq!(Dataset::parse(&ds.to_csv(), "p").unwrap(), ds);
        }
    }
}

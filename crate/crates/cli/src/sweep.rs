use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use retention_core::config::RunConfig;
use retention_core::gate::HardConcreteParams;

use crate::error::{CliError, Result};

/// Parameters a sweep may vary, in expansion order: the first varies
/// slowest.
pub const SWEEP_PARAMS: [&str; 3] = ["beta", "stretch_low", "stretch_high"];

/// Parameter name to the values it takes.
pub type GridSpec = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub index: usize,
    pub hard_concrete: HardConcreteParams,
    pub seed: u64,
    /// True for the default Hard-Concrete setting.
    pub is_default: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub beta: f64,
    pub stretch_low: f64,
    pub stretch_high: f64,
    pub seed: u64,
    pub is_default: bool,
    pub status: String,
    pub steps: u64,
    pub eval_accuracy: f64,
    pub retention_recall: f64,
    pub lambda: f64,
    pub expected_retention: f64,
}

fn set(hc: &mut HardConcreteParams, name: &str, value: f64) {
    match name {
        "beta" => hc.beta = value,
        "stretch_low" => hc.stretch_low = value,
        "stretch_high" => hc.stretch_high = value,
        _ => unreachable!("checked against SWEEP_PARAMS"),
    }
}

/// Cartesian product of the grid over `base`, in lexicographic order of
/// [`SWEEP_PARAMS`]. The default Hard-Concrete point is appended when the
/// grid does not already contain it. Run `i` uses seed `base_seed + i`.
pub fn expand(grid: &GridSpec, base: &HardConcreteParams, base_seed: u64) -> Result<Vec<SweepPoint>> {
    if let Some(unknown) = grid.keys().find(|k| !SWEEP_PARAMS.contains(&k.as_str())) {
        return Err(CliError::Config(format!(
            "cannot sweep over {unknown:?}; expected one of {}",
            SWEEP_PARAMS.join(", ")
        )));
    }
    if let Some((name, _)) = grid.iter().find(|(_, v)| v.is_empty()) {
        return Err(CliError::Config(format!("sweep parameter {name:?} has no values")));
    }
    let axes: Vec<(&str, &[f64])> = SWEEP_PARAMS
        .iter()
        .filter_map(|&name| grid.get(name).map(|v| (name, v.as_slice())))
        .collect();
    let mut combos = vec![*base];
    for (name, values) in &axes {
        combos = combos
            .iter()
            .flat_map(|hc| {
                values.iter().map(move |&v| {
                    let mut next = *hc;
                    set(&mut next, name, v);
                    next
                })
            })
            .collect();
    }
    let default = HardConcreteParams::default();
    if !combos.contains(&default) {
        combos.push(default);
    }
    combos
        .into_iter()
        .enumerate()
        .map(|(index, hard_concrete)| {
            hard_concrete.validate()?;
            Ok(SweepPoint {
                index,
                hard_concrete,
                seed: base_seed.wrapping_add(index as u64),
                is_default: hard_concrete == default,
            })
        })
        .collect()
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("RETENTION_LAB_THREADS") {
        let n: usize =
            v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
                CliError::Config(format!("RETENTION_LAB_THREADS must be a positive integer, got {v:?}"))
            })?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| CliError::Config(format!("cannot build worker pool: {e}")))
}

/// Trains one run per point under `out/run_NNN` and writes
/// `out/summary.csv`. Runs that hit a non-finite value are recorded with
/// status `numeric_abort`; any other failure stops the sweep.
pub fn run(base: &RunConfig, points: &[SweepPoint], out: &Path) -> Result<Vec<SweepRow>> {
    std::fs::create_dir_all(out)?;
    let pool = thread_pool()?;
    let rows: Vec<Result<SweepRow>> = pool.install(|| {
        points
            .par_iter()
            .map(|point| {
                let config = RunConfig {
                    hard_concrete: point.hard_concrete,
                    seed: point.seed,
                    ..base.clone()
                };
                let dir = out.join(format!("run_{:03}", point.index));
                let mut row = SweepRow {
                    index: point.index,
                    beta: point.hard_concrete.beta,
                    stretch_low: point.hard_concrete.stretch_low,
                    stretch_high: point.hard_concrete.stretch_high,
                    seed: point.seed,
                    is_default: point.is_default,
                    status: "ok".into(),
                    steps: 0,
                    eval_accuracy: f64::NAN,
                    retention_recall: f64::NAN,
                    lambda: f64::NAN,
                    expected_retention: f64::NAN,
                };
                match crate::train::run(config, &dir) {
                    Ok(summary) => {
                        row.steps = summary.steps;
                        if let Some(last) = summary.last {
                            row.eval_accuracy = last.eval_accuracy;
                            row.retention_recall = last.retention_recall;
                            row.lambda = last.lambda;
                            row.expected_retention = last.expected_retention;
                        }
                    }
                    Err(CliError::NumericAbort { step, .. }) => {
                        row.status = "numeric_abort".into();
                        row.steps = step;
                    }
                    Err(e) => return Err(e),
                }
                Ok(row)
            })
            .collect()
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_path(out.join("summary.csv")).map_err(retention_core::Error::from)?;
    for row in &rows {
        w.serialize(row).map_err(retention_core::Error::from)?;
    }
    w.flush()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(pairs: &[(&str, &[f64])]) -> GridSpec {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect()
    }

    #[test]
    fn single_axis_expands_to_its_values() {
        let points = expand(
            &grid(&[("beta", &[0.3, 0.66, 1.0])]),
            &HardConcreteParams::default(),
            10,
        )
        .unwrap();
        assert_eq!(points.len(), 3);
        assert_eq!(points.iter().filter(|p| p.is_default).count(), 1);
        assert!(points[1].is_default);
        assert_eq!(points.iter().map(|p| p.seed).collect::<Vec<_>>(), vec![10, 11, 12]);
    }

    #[test]
    fn two_axes_are_lexicographic() {
        let points = expand(
            &grid(&[("stretch_low", &[-0.1, -0.2]), ("beta", &[0.3, 0.66, 1.0])]),
            &HardConcreteParams::default(),
            0,
        )
        .unwrap();
        let pairs: Vec<(f64, f64)> = points
            .iter()
            .map(|p| (p.hard_concrete.beta, p.hard_concrete.stretch_low))
            .collect();
        assert_eq!(
            pairs,
            vec![
                (0.3, -0.1),
                (0.3, -0.2),
                (0.66, -0.1),
                (0.66, -0.2),
                (1.0, -0.1),
                (1.0, -0.2)
            ]
        );
    }

    #[test]
    fn default_point_is_always_present() {
        let points = expand(&grid(&[("beta", &[0.3, 1.0])]), &HardConcreteParams::default(), 0).unwrap();
        assert_eq!(points.len(), 3);
        let last = points.last().unwrap();
        assert!(last.is_default);
        assert_eq!(last.hard_concrete, HardConcreteParams::default());
    }

    #[test]
    fn bad_grids_rejected() {
        let base = HardConcreteParams::default();
        let err = expand(&grid(&[("gamma", &[1.0])]), &base, 0).unwrap_err();
        assert!(err.to_string().contains("gamma"));
        assert_eq!(err.exit_code(), 2);
        assert!(expand(&grid(&[("beta", &[])]), &base, 0).is_err());
        assert!(expand(&grid(&[("stretch_low", &[0.2])]), &base, 0).is_err());
    }
}

//! Sweeps over routing iterations, capsule dimension and decoder
//! regularization.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::training::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridAxis {
    Routing,
    CapsDim,
    Regularization,
}

impl GridAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            GridAxis::Routing => "routing",
            GridAxis::CapsDim => "caps_dim",
            GridAxis::Regularization => "regularization",
        }
    }

    /// Settings along the axis as `(label, config)`.
    pub fn points(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        match self {
            GridAxis::Routing => {
                [1, 3, 5].into_iter().map(|r| (r.to_string(), RunConfig { routing_iters: r, ..base.clone() })).collect()
            }
            GridAxis::CapsDim => [2, 4, 8, 16, 32]
                .into_iter()
                .map(|d| (d.to_string(), RunConfig { caps_dim: d, ..base.clone() }))
                .collect(),
            GridAxis::Regularization => [false, true]
                .into_iter()
                .map(|on| ((if on { "on" } else { "off" }).to_string(), RunConfig { use_decoder: on, ..base.clone() }))
                .collect(),
        }
    }
}

impl FromStr for GridAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "routing" | "routing_iters" => Ok(GridAxis::Routing),
            "caps_dim" => Ok(GridAxis::CapsDim),
            "regularization" | "decoder" => Ok(GridAxis::Regularization),
            _ => Err(Error::Config(format!("unknown grid axis `{s}` (routing, caps_dim, regularization)"))),
        }
    }
}

impl fmt::Display for GridAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub label: String,
    /// Configuration of the first repeat; later repeats add to the seed.
    pub cfg: RunConfig,
    /// Best test metric per repeat.
    pub metrics: Vec<f64>,
}

impl GridRow {
    pub fn mean(&self) -> f64 {
        self.metrics.iter().sum::<f64>() / self.metrics.len().max(1) as f64
    }
}

/// Runs every point of `axis` `repeats` times with seeds `base.seed + r`,
/// using up to `jobs` threads. `run` maps a config to its best test metric.
pub fn experiment_grid<F>(base: &RunConfig, axis: GridAxis, repeats: usize, jobs: usize, run: F) -> Result<Vec<GridRow>>
where
    F: Fn(&RunConfig) -> Result<f64> + Sync,
{
    base.validate()?;
    if repeats == 0 {
        return Err(Error::Config("grid needs at least one repeat".into()));
    }
    let points = axis.points(base);
    let tasks: Vec<(usize, usize, RunConfig)> = points
        .iter()
        .enumerate()
        .flat_map(|(p, (_, cfg))| {
            (0..repeats).map(move |r| (p, r, RunConfig { seed: cfg.seed + r as u64, ..cfg.clone() }))
        })
        .collect();
    let results: Mutex<Vec<Option<Result<f64>>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, tasks.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((_, _, cfg)) = tasks.get(i) else { break };
                let r = run(cfg);
                results.lock().expect("grid results lock")[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("grid results lock");
    let mut rows: Vec<GridRow> =
        points.into_iter().map(|(label, cfg)| GridRow { label, cfg, metrics: vec![0.0; repeats] }).collect();
    for ((p, r, _), res) in tasks.iter().zip(results) {
        rows[*p].metrics[*r] = res.expect("every task ran")?;
    }
    Ok(rows)
}

/// Table with one row per axis point: label, mean, then each repeat.
pub fn render_grid(axis: GridAxis, rows: &[GridRow]) -> String {
    let repeats = rows.first().map_or(0, |r| r.metrics.len());
    let mut out = format!("{},mean", axis.as_str());
    for r in 0..repeats {
        out.push_str(&format!(",seed_{r}"));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{},{:.4}", row.label, row.mean()));
        for m in &row.metrics {
            out.push_str(&format!(",{m:.4}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_sizes() {
        let base = RunConfig::default();
        assert_eq!(GridAxis::Routing.points(&base).len(), 3);
        assert_eq!(GridAxis::CapsDim.points(&base).len(), 5);
        assert_eq!(GridAxis::Regularization.points(&base).len(), 2);
    }

    #[test]
    fn parallel_grid_is_ordered() {
        let base = RunConfig { seed: 10, ..Default::default() };
        let rows =
            experiment_grid(&base, GridAxis::CapsDim, 2, 3, |c| Ok(c.caps_dim as f64 + c.seed as f64 / 100.0)).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[2].metrics, vec![8.10, 8.11]);
        let table = render_grid(GridAxis::CapsDim, &rows);
        assert_eq!(table.lines().count(), 6);
        assert!(table.starts_with("caps_dim,mean,seed_0,seed_1\n2,"));
    }

    #[test]
    fn errors_propagate() {
        let r = experiment_grid(&RunConfig::default(), GridAxis::Routing, 1, 2, |c| {
            if c.routing_iters == 5 {
                Err(Error::InsufficientData("x".into()))
            } else {
                Ok(0.5)
            }
        });
        assert!(r.is_err());
    }
}

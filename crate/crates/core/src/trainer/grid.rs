//! Exhaustive grid search over the tuned architecture parameters.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::fusion::Sample;

use super::train_ensemble;

/// Grid parameter names in canonical order, with the config key each sets.
pub const GRID_NAMES: [(&str, &str); 8] = [
    ("h12", "text.h12"),
    ("h3", "text.h3"),
    ("r", "text.dropout"),
    ("d", "fusion.d"),
    ("c", "image.c"),
    ("m", "image.m"),
    ("l", "image.l"),
    ("p", "image.p"),
];

fn rank(name: &str) -> Option<usize> {
    GRID_NAMES.iter().position(|(n, _)| *n == name)
}

/// Candidate values per parameter, held in canonical name order.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    axes: Vec<(String, Vec<String>)>,
}

impl GridSpec {
    pub fn new<S: AsRef<str>>(axes: &[(S, Vec<S>)]) -> Result<Self> {
        let mut out: Vec<(String, Vec<String>)> = Vec::with_capacity(axes.len());
        for (name, values) in axes {
            let name = name.as_ref();
            if rank(name).is_none() {
                let known: Vec<&str> = GRID_NAMES.iter().map(|(n, _)| *n).collect();
                return Err(Error::Config(format!(
                    "unknown grid parameter {name:?} (expected one of {})",
                    known.join(", ")
                )));
            }
            if out.iter().any(|(n, _)| n == name) {
                return Err(Error::Config(format!("grid parameter {name} listed twice")));
            }
            if values.is_empty() {
                return Err(Error::Config(format!("grid parameter {name} has no values")));
            }
            let values: Vec<String> = values.iter().map(|v| v.as_ref().trim().to_string()).collect();
            for v in &values {
                v.parse::<f64>()
                    .map_err(|_| Error::Config(format!("grid parameter {name}: {v:?} is not a number")))?;
            }
            out.push((name.to_string(), values));
        }
        if out.is_empty() {
            return Err(Error::Config("grid is empty".into()));
        }
        out.sort_by_key(|(n, _)| rank(n));
        Ok(GridSpec { axes: out })
    }

    /// One `name=v1,v2,...` line per parameter; `#` starts a comment line.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut axes = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, values) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected name=v1,v2,...", i + 1)))?;
            let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
            axes.push((name.trim(), values));
        }
        GridSpec::new(&axes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        GridSpec::parse(&text, &path.display().to_string())
    }

    pub fn names(&self) -> Vec<&str> {
        self.axes.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Product of the value-list lengths.
    pub fn size(&self) -> usize {
        self.axes.iter().map(|(_, v)| v.len()).product()
    }

    /// Every combination, last parameter varying fastest.
    pub fn combinations(&self) -> Vec<Vec<String>> {
        let mut out = vec![Vec::new()];
        for (_, values) in &self.axes {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    values.iter().map(move |v| {
                        let mut row = prefix.clone();
                        row.push(v.clone());
                        row
                    })
                })
                .collect();
        }
        out
    }

    /// `base` with one combination applied.
    pub fn apply(&self, base: &Config, values: &[String]) -> Result<Config> {
        let mut cfg = base.clone();
        for ((name, _), v) in self.axes.iter().zip(values) {
            let key = GRID_NAMES[rank(name).expect("validated name")].1;
            cfg.set(key, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub values: Vec<String>,
    pub dev_macro_f1: f64,
    /// 1-based epoch at which the ensemble's dev macro-F1 peaked.
    pub epoch_of_best: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridOutcome {
    pub names: Vec<String>,
    pub rows: Vec<GridRow>,
    pub best: usize,
}

fn tuple_cmp(a: &[String], b: &[String]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        let (x, y): (f64, f64) = (x.parse().unwrap_or(f64::NAN), y.parse().unwrap_or(f64::NAN));
        match x.total_cmp(&y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    Ordering::Equal
}

impl GridOutcome {
    pub fn best_row(&self) -> &GridRow {
        &self.rows[self.best]
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.names.join(",");
        out.push_str(",dev_macro_f1,epoch_of_best\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.values.join(","), r.dev_macro_f1, r.epoch_of_best));
        }
        out
    }
}

/// Highest dev macro-F1; ties go to the numerically smallest value tuple,
/// compared parameter by parameter in canonical order.
pub fn select_best(rows: &[GridRow]) -> usize {
    let mut best = 0;
    for (i, r) in rows.iter().enumerate().skip(1) {
        let b = &rows[best];
        if r.dev_macro_f1 > b.dev_macro_f1
            || (r.dev_macro_f1 == b.dev_macro_f1 && tuple_cmp(&r.values, &b.values) == Ordering::Less)
        {
            best = i;
        }
    }
    best
}

/// Runs `evaluate` on every combination (concurrently) and assembles the
/// table in grid order. `evaluate` returns `(dev_macro_f1, epoch_of_best)`.
pub fn grid_search_with<F>(grid: &GridSpec, base: &Config, evaluate: F) -> Result<GridOutcome>
where
    F: Fn(&Config) -> Result<(f64, usize)> + Sync,
{
    let combos = grid.combinations();
    let configs: Vec<Config> = combos.iter().map(|v| grid.apply(base, v)).collect::<Result<_>>()?;
    let scores: Vec<(f64, usize)> = configs.par_iter().map(&evaluate).collect::<Result<_>>()?;
    let rows: Vec<GridRow> = combos
        .into_iter()
        .zip(scores)
        .map(|(values, (dev_macro_f1, epoch_of_best))| GridRow {
            values,
            dev_macro_f1,
            epoch_of_best,
        })
        .collect();
    Ok(GridOutcome {
        names: grid.names().iter().map(|s| s.to_string()).collect(),
        best: select_best(&rows),
        rows,
    })
}

/// Trains the configured ensemble for every combination with the base seed.
pub fn grid_search(grid: &GridSpec, base: &Config, train: &[Sample], dev: &[Sample]) -> Result<GridOutcome> {
    grid_search_with(grid, base, |cfg| {
        let dims = cfg.model_dims()?;
        let run = train_ensemble(
            &cfg.ensemble_members,
            &dims,
            train,
            dev,
            &cfg.train_config(),
            cfg.ensemble_weights.clone(),
        )?;
        Ok(run.best_epoch())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

    fn base() -> Config {
        Config::default().with_input_dims(4, 4, 4)
    }

    #[test]
    fn two_by_two_runs_four_times() {
        let grid = GridSpec::parse("m=4,8\nh3=2,3\n", "g").unwrap();
        assert_eq!(grid.names(), vec!["h3", "m"]);
        let calls = AtomicUsize::new(0);
        let out = grid_search_with(&grid, &base(), |cfg| {
            calls.fetch_add(1, AtomicOrdering::SeqCst);
            Ok(((cfg.text_h3 * cfg.image_m) as f64 / 100.0, 1))
        })
        .unwrap();
        assert_eq!(calls.load(AtomicOrdering::SeqCst), 4);
        assert_eq!(out.rows.len(), 4);
        assert_eq!(out.best_row().values, vec!["3", "8"]);
        let max = out.rows.iter().map(|r| r.dev_macro_f1).fold(f64::MIN, f64::max);
        assert_eq!(out.best_row().dev_macro_f1, max);
        let csv = out.to_csv();
        assert_eq!(csv.lines().next().unwrap(), "h3,m,dev_macro_f1,epoch_of_best");
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn ties_go_to_the_smallest_tuple() {
        let grid = GridSpec::parse("h3=10,9\nr=0.3,0.25\n", "g").unwrap();
        let out = grid_search_with(&grid, &base(), |_| Ok((0.5, 2))).unwrap();
        assert_eq!(out.best_row().values, vec!["9", "0.25"]);
        // Numeric rather than string comparison: 9 < 10.
        assert_eq!(out.best, 3);
    }

    #[test]
    fn singleton_grid() {
        let grid = GridSpec::parse("p=0.1", "g").unwrap();
        let out = grid_search_with(&grid, &base(), |c| Ok((c.image_p, 1))).unwrap();
        assert_eq!(out.rows.len(), 1);
        assert_eq!(out.best_row().values, vec!["0.1"]);
    }

    #[test]
    fn bad_grids() {
        assert!(matches!(GridSpec::parse("lr=1,2", "g"), Err(Error::Config(_))));
        assert!(GridSpec::parse("", "g").is_err());
        assert!(GridSpec::parse("h3=", "g").is_err());
        assert!(GridSpec::parse("h3=a", "g").is_err());
        assert!(GridSpec::parse("h3=1\nh3=2", "g").is_err());
        let grid = GridSpec::parse("c=0", "g").unwrap();
        assert!(grid_search_with(&grid, &base(), |_| Ok((0.0, 1))).is_err());
    }

    #[test]
    fn combinations_count_is_the_product() {
        let grid = GridSpec::parse("h12=0,1,2\nd=0,4\nl=1,3,5\n", "g").unwrap();
        assert_eq!(grid.size(), 18);
        let combos = grid.combinations();
        assert_eq!(combos.len(), 18);
        assert_eq!(combos[0], vec!["0", "0", "1"]);
        assert_eq!(combos[1], vec!["0", "0", "3"]);
    }
}

//! Grid ablations: one pretrain+probe run per cell per seed.
//!
//! A grid file uses the config syntax; a value written `a | b | c` sweeps that
//! key. Cells are the cartesian product of the swept values, with the first
//! swept key varying slowest. Run `i` of a cell uses seed `seed + i`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

use super::config::{parse_kv, TrainConfig};
use super::corpus::{Corpus, EvalSet};
use super::train::{prepare, pretrain_on};

/// CSV header of an ablation table.
pub const COLUMNS: [&str; 8] = [
    "cell",
    "seed",
    "fingerprint",
    "miou",
    "scratch_miou",
    "collapse",
    "fallbacks",
    "error",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    /// Keys with a single value, in file order.
    pub fixed: Vec<(String, String)>,
    /// Swept keys and their values, in file order.
    pub swept: Vec<(String, Vec<String>)>,
}

/// One configuration of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    /// `key=value` of every swept key, joined by `;`; `base` when nothing is swept.
    pub label: String,
    pub config: TrainConfig,
}

impl Grid {
    pub fn parse(text: &str) -> Result<Self> {
        let mut fixed = Vec::new();
        let mut swept = Vec::new();
        let mut probe = TrainConfig::default();
        for (k, v) in parse_kv(text)? {
            let values: Vec<String> = v.split('|').map(|s| s.trim().to_string()).collect();
            if values.iter().any(|s| s.is_empty()) {
                return Err(config_err(format!("empty sweep value for {k}")));
            }
            for val in &values {
                probe.set(&k, val)?;
            }
            if values.len() == 1 {
                fixed.push((k, v));
            } else {
                swept.push((k, values));
            }
        }
        Ok(Self { fixed, swept })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Cartesian product of the swept values. Per-cell validation is left to
    /// the run so an invalid combination becomes an error row.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let mut base = TrainConfig::default();
        for (k, v) in &self.fixed {
            base.set(k, v)?;
        }
        let mut cells = vec![(Vec::<String>::new(), base)];
        for (k, values) in &self.swept {
            let mut next = Vec::with_capacity(cells.len() * values.len());
            for (label, cfg) in &cells {
                for v in values {
                    let mut c = cfg.clone();
                    c.set(k, v)?;
                    let mut l = label.clone();
                    l.push(format!("{k}={v}"));
                    next.push((l, c));
                }
            }
            cells = next;
        }
        Ok(cells
            .into_iter()
            .map(|(l, config)| Cell {
                label: if l.is_empty() { "base".into() } else { l.join(";") },
                config,
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub seed: u64,
    pub fingerprint: String,
    pub miou: Option<f64>,
    pub scratch_miou: Option<f64>,
    pub collapse: Option<f64>,
    pub fallbacks: Option<usize>,
    pub error: Option<String>,
}

type Prepared = Arc<Mutex<BTreeMap<String, Arc<(Corpus, EvalSet)>>>>;

fn run_one(cell: &Cell, seed_offset: u64, cache: &Prepared) -> AblationRow {
    let mut cfg = cell.config.clone();
    cfg.seed = cfg.seed.wrapping_add(seed_offset);
    let mut row = AblationRow {
        cell: cell.label.clone(),
        seed: cfg.seed,
        fingerprint: cfg.fingerprint(),
        miou: None,
        scratch_miou: None,
        collapse: None,
        fallbacks: None,
        error: None,
    };
    let result = (|| -> Result<()> {
        cfg.validate()?;
        let key = format!("{:?}/{}", cfg.corpus, cfg.knn_k);
        let existing = cache.lock().expect("cache lock").get(&key).cloned();
        let data = match existing {
            Some(d) => d,
            None => {
                let d = Arc::new(prepare(&cfg)?);
                cache.lock().expect("cache lock").entry(key).or_insert(d).clone()
            }
        };
        let (_, report) = pretrain_on(&cfg, &data.0, &data.1)?;
        row.miou = Some(report.probe.miou);
        row.scratch_miou = Some(report.scratch_probe.miou);
        row.collapse = report.final_collapse();
        row.fallbacks = Some(report.fallback_total);
        Ok(())
    })();
    if let Err(e) = result {
        row.error = Some(e.to_string());
    }
    row
}

/// Runs every (cell, seed) pair, in parallel, and returns rows ordered by
/// (cell, seed). Failures become error rows.
pub fn ablate(cells: &[Cell], seeds: usize) -> Result<Vec<AblationRow>> {
    if cells.is_empty() || seeds == 0 {
        return Err(config_err("ablation grid is empty"));
    }
    let cache: Prepared = Arc::default();
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| (0..seeds as u64).map(move |s| (c, s)))
        .collect();
    Ok(jobs.par_iter().map(|&(c, s)| run_one(&cells[c], s, &cache)).collect())
}

fn opt_f(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn write_csv(rows: &[AblationRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(COLUMNS)?;
    for r in rows {
        out.write_record([
            r.cell.clone(),
            r.seed.to_string(),
            r.fingerprint.clone(),
            opt_f(r.miou),
            opt_f(r.scratch_miou),
            opt_f(r.collapse),
            r.fallbacks.map(|f| f.to_string()).unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hardness_grid_counts() {
        let g = Grid::parse("hardness.mode = easy | hard | progressive\niterations = 0\n").unwrap();
        let cells = g.cells().unwrap();
        assert_eq!(cells.len(), 3);
        assert_eq!(cells[0].label, "hardness.mode=easy");
        assert_eq!(cells[2].config.iterations, 0);
        let jobs: usize = cells.len() * 5;
        assert_eq!(jobs, 15);
    }

    #[test]
    fn cartesian_order_first_key_slowest() {
        let g = Grid::parse("fusion_mode = early | hybrid\nloss.tau = 0.1 | 0.4 | 1.0\n").unwrap();
        let labels: Vec<String> = g.cells().unwrap().into_iter().map(|c| c.label).collect();
        assert_eq!(labels.len(), 6);
        assert_eq!(labels[0], "fusion_mode=early;loss.tau=0.1");
        assert_eq!(labels[1], "fusion_mode=early;loss.tau=0.4");
        assert_eq!(labels[3], "fusion_mode=hybrid;loss.tau=0.1");
    }

    #[test]
    fn bad_grids_rejected() {
        assert!(Grid::parse("lr = 1 | 2\n").is_err());
        assert!(Grid::parse("loss.tau = 0.1 | \n").is_err());
        assert!(Grid::parse("loss.tau = x | 0.2\n").is_err());
        assert!(ablate(&[], 3).is_err());
    }

    #[test]
    fn failing_cell_becomes_error_row() {
        let g = Grid::parse(
            "iterations = 0\ncorpus.train_scenes = 1\ncorpus.test_scenes = 1\nmodel.hidden = 4\n\
             model.dim = 4\nprobe.steps = 5\nloss.tau = 0.4 | -1\n",
        )
        .unwrap();
        let rows = ablate(&g.cells().unwrap(), 2).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![1, 2, 1, 2]);
        assert!(rows[0].error.is_none() && rows[0].miou.is_some());
        assert!(rows[2].error.is_some() && rows[2].miou.is_none());
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("cell,seed,fingerprint,miou,scratch_miou,collapse,fallbacks,error\n"));
        assert_eq!(text.lines().count(), 5);
    }
}

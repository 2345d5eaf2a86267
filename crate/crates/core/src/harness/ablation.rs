use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::OptimizerKind;
use crate::error::{Error, Result};

use super::{optimizer_name, run_experiment, ExperimentConfig, ExperimentOutcome};

/// Axes of an ablation grid. An empty axis keeps the base configuration's
/// value; cells are the cartesian product of the others.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub u: Vec<f64>,
    pub m: Vec<f64>,
    pub dataset_size: Vec<usize>,
    pub optimizer: Vec<OptimizerKind>,
    pub online: Vec<bool>,
}

impl AblationGrid {
    pub fn validate(&self) -> Result<()> {
        if !self.dataset_size.is_empty() && self.online.contains(&true) {
            return Err(Error::config(
                "ablation grid combines online sampling with dataset sizes",
            ));
        }
        if let Some(n) = self.dataset_size.iter().find(|n| **n == 0) {
            return Err(Error::config(format!("ablation dataset size {n} must be positive")));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
            && self.m.is_empty()
            && self.dataset_size.is_empty()
            && self.optimizer.is_empty()
            && self.online.is_empty()
    }
}

/// The axis values of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSettings {
    pub u: f64,
    pub m: f64,
    /// `None` for online sampling.
    pub dataset_size: Option<usize>,
    pub optimizer: OptimizerKind,
}

impl CellSettings {
    pub fn label(&self) -> String {
        let n = self.dataset_size.map_or("online".to_string(), |n| n.to_string());
        format!(
            "u={} m={} N={} opt={}",
            self.u,
            self.m,
            n,
            optimizer_name(self.optimizer)
        )
    }
}

#[derive(Clone, Debug)]
pub enum CellResult {
    Done(Box<ExperimentOutcome>),
    Failed(String),
}

#[derive(Clone, Debug)]
pub struct AblationCell {
    pub index: usize,
    pub settings: CellSettings,
    pub result: CellResult,
}

impl AblationCell {
    pub fn outcome(&self) -> Option<&ExperimentOutcome> {
        match &self.result {
            CellResult::Done(o) => Some(o),
            CellResult::Failed(_) => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub cells: Vec<AblationCell>,
}

impl AblationOutcome {
    /// `cell, u, m, N, optimizer, status, best_val_loss, best_step,
    /// stage_count` with one row per cell.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("cell,u,m,N,optimizer,status,best_val_loss,best_step,stage_count\n");
        for c in &self.cells {
            let s = &c.settings;
            let n = s.dataset_size.map_or("online".to_string(), |n| n.to_string());
            let tail = match &c.result {
                CellResult::Done(o) => format!(
                    "ok,{},{},{}",
                    crate::flow::format_float(o.best_val_loss),
                    o.best_step,
                    o.stages.count
                ),
                CellResult::Failed(_) => "failed,,,".to_string(),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.index,
                s.u,
                s.m,
                n,
                optimizer_name(s.optimizer),
                tail
            ));
        }
        out
    }
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Expands the grid of `base.ablation` into per-cell configurations.
pub fn grid_cells(base: &ExperimentConfig) -> Result<Vec<(CellSettings, ExperimentConfig)>> {
    base.ablation.validate()?;
    let g = &base.ablation;
    let base_n = (!base.data.online).then_some(base.data.train_size);
    let sizes: Vec<Option<usize>> = if !g.dataset_size.is_empty() {
        g.dataset_size.iter().map(|n| Some(*n)).collect()
    } else if !g.online.is_empty() {
        g.online
            .iter()
            .map(|on| if *on { None } else { Some(base.data.train_size) })
            .collect()
    } else {
        vec![base_n]
    };
    let mut cells = Vec::new();
    for u in axis(&g.u, base.model.u) {
        for m in axis(&g.m, base.task.m) {
            for n in &sizes {
                for opt in axis(&g.optimizer, base.optim.optimizer) {
                    let mut cfg = base.clone();
                    cfg.ablation = AblationGrid::default();
                    cfg.model.u = u;
                    cfg.task.m = m;
                    cfg.optim.optimizer = opt;
                    cfg.data.online = n.is_none();
                    if let Some(n) = n {
                        cfg.data.train_size = *n;
                    }
                    cfg.validate()?;
                    cells.push((
                        CellSettings {
                            u,
                            m,
                            dataset_size: *n,
                            optimizer: opt,
                        },
                        cfg,
                    ));
                }
            }
        }
    }
    Ok(cells)
}

/// Runs every cell concurrently. A cell that errors is marked failed and
/// the rest still run.
pub fn run_ablation(base: &ExperimentConfig) -> Result<AblationOutcome> {
    let cells = grid_cells(base)?;
    let cells = cells
        .into_par_iter()
        .enumerate()
        .map(|(index, (settings, cfg))| AblationCell {
            index,
            settings,
            result: match run_experiment(&cfg) {
                Ok(o) => CellResult::Done(Box::new(o)),
                Err(e) => CellResult::Failed(e.to_string()),
            },
        })
        .collect();
    Ok(AblationOutcome { cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::TaskConfig;

    fn base() -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            task: TaskConfig::minimal(4, 6, 1),
            ..ExperimentConfig::default()
        };
        cfg.optim.steps = 10;
        cfg.optim.batch_size = 16;
        cfg.data.test_size = 16;
        cfg.probes.batch_size = 8;
        cfg.probes.stride = 5;
        cfg
    }

    #[test]
    fn grid_is_cartesian_product() {
        let mut cfg = base();
        cfg.ablation.u = vec![0.0, 1.0];
        cfg.ablation.dataset_size = vec![50, 100, 200];
        let cells = grid_cells(&cfg).unwrap();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[4].0.label(), "u=1 m=1.7 N=100 opt=adamw");
        assert!(cells.iter().all(|(_, c)| !c.data.online && c.ablation.is_empty()));
        cfg.ablation.online = vec![true];
        assert!(grid_cells(&cfg).is_err());
    }

    #[test]
    fn failing_cell_does_not_stop_the_grid() {
        let mut cfg = base();
        // m = 1e300 overflows the logits and aborts that cell's training
        cfg.ablation.m = vec![1.7, 1e300];
        let out = run_ablation(&cfg).unwrap();
        assert!(out.cells[0].outcome().is_some());
        assert!(matches!(out.cells[1].result, CellResult::Failed(_)));
        let csv = out.summary_csv();
        assert!(csv.lines().nth(2).unwrap().contains(",failed,"));
    }
}

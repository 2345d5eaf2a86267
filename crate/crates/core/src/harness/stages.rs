use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSeries {
    pub name: String,
    /// Value at the first logged step.
    pub initial: f64,
    /// First step with a value below `threshold · initial`.
    pub crossing: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub threshold: f64,
    /// In probe order.
    pub series: Vec<StageSeries>,
    /// Number of series that ever cross.
    pub count: usize,
}

impl StageReport {
    /// Crossing steps of the series that crossed, in probe order.
    pub fn crossings(&self) -> Vec<usize> {
        self.series.iter().filter_map(|s| s.crossing).collect()
    }

    /// Every series crossed, at strictly increasing steps.
    pub fn strictly_ordered(&self) -> bool {
        self.count == self.series.len() && self.crossings().windows(2).all(|w| w[0] < w[1])
    }

    /// Crossed series cross at nondecreasing steps and no series crosses
    /// after one that never does.
    pub fn nested(&self) -> bool {
        let mut last = 0;
        let mut open = false;
        for s in &self.series {
            match s.crossing {
                Some(c) if !open && c >= last => last = c,
                Some(_) => return false,
                None => open = true,
            }
        }
        true
    }
}

/// Crossing step of each named series below `fraction` times its value at
/// the first logged step. Series of equal crossing keep their input order.
pub fn detect_stages(series: &[(String, Vec<(usize, f64)>)], fraction: f64) -> Result<StageReport> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::domain(format!("threshold fraction {fraction} outside (0, 1)")));
    }
    let mut out = Vec::with_capacity(series.len());
    for (name, points) in series {
        let Some(&(_, initial)) = points.first() else {
            return Err(Error::domain(format!("series {name} is empty")));
        };
        let crossing = points.iter().find(|(_, v)| *v < fraction * initial).map(|p| p.0);
        out.push(StageSeries {
            name: name.clone(),
            initial,
            crossing,
        });
    }
    Ok(StageReport {
        threshold: fraction,
        count: out.iter().filter(|s| s.crossing.is_some()).count(),
        series: out,
    })
}

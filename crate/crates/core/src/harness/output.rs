use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::TrajectoryLog;
use crate::theory::CheckReport;

use super::MetricLog;

const KL_PLOT_FLOOR: f64 = 1e-12;
const SIZE: (u32, u32) = (800, 480);

/// Index of everything a command wrote. Serialized as JSON with fields in
/// declaration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub kl_direction: String,
    pub excess_loss: String,
    /// Paths relative to the output directory, sorted.
    pub files: Vec<String>,
}

/// Creates `dir` and checks that a file can be written there. Commands call
/// this before any computation.
pub fn prepare_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-test");
    std::fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    std::fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Numeric(format!("plot failed: {e}"))
}

fn bounds(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo > hi {
        return None;
    }
    if lo == hi {
        return Some((lo - 0.5, hi + 0.5));
    }
    Some((lo, hi))
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// Line plot of named `(x, y)` series, optionally with a logarithmic y axis
/// (values are clamped at `1e-12`).
fn line_plot(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)], log_y: bool) -> Result<String> {
    let prep = |y: f64| if log_y { y.max(KL_PLOT_FLOOR) } else { y };
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.0))).unwrap_or((0.0, 1.0));
    let (mut y0, mut y1) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| prep(p.1)))).unwrap_or(if log_y {
        (1e-3, 1.0)
    } else {
        (0.0, 1.0)
    });
    if log_y {
        y0 = y0.max(KL_PLOT_FLOOR);
        y1 = y1.max(y0 * 10.0);
    }
    let mut buf = String::new();
    {
        let root = SVGBackend::with_string(&mut buf, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut builder = ChartBuilder::on(&root);
        builder
            .caption(title, ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(40)
            .y_label_area_size(70);
        macro_rules! draw {
            ($chart:expr) => {{
                let mut chart = $chart;
                chart.configure_mesh().x_desc(x_label).draw().map_err(plot_err)?;
                for (i, (name, pts)) in series.iter().enumerate() {
                    let color = PALETTE[i % PALETTE.len()];
                    chart
                        .draw_series(LineSeries::new(
                            pts.iter().filter(|p| p.1.is_finite()).map(|p| (p.0, prep(p.1))),
                            color.stroke_width(2),
                        ))
                        .map_err(plot_err)?
                        .label(name.as_str())
                        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
                }
                if !series.is_empty() {
                    chart
                        .configure_series_labels()
                        .background_style(WHITE.mix(0.8))
                        .border_style(BLACK)
                        .draw()
                        .map_err(plot_err)?;
                }
            }};
        }
        if log_y {
            draw!(builder
                .build_cartesian_2d(x0..x1, (y0..y1).log_scale())
                .map_err(plot_err)?);
        } else {
            draw!(builder.build_cartesian_2d(x0..x1, y0..y1).map_err(plot_err)?);
        }
        root.present().map_err(plot_err)?;
    }
    Ok(buf)
}

/// One column per logged checkpoint, one row per head and lag, shaded by
/// attention mass in `[0, 1]`.
fn heat_strips(log: &MetricLog) -> Result<String> {
    let cols: Vec<usize> = (0..log.header().len())
        .filter(|&i| log.header()[i].starts_with("attn_h"))
        .collect();
    let rows = log.rows();
    let mut buf = String::new();
    {
        let root = SVGBackend::with_string(&mut buf, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("attention mass per head and lag", ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(40)
            .y_label_area_size(90)
            .build_cartesian_2d(0..rows.len().max(1), 0..cols.len().max(1))
            .map_err(plot_err)?;
        let names: Vec<String> = cols.iter().map(|&i| log.header()[i].clone()).collect();
        let steps = log.steps();
        chart
            .configure_mesh()
            .disable_mesh()
            .x_desc("checkpoint")
            .x_label_formatter(&|x| steps.get(*x).map_or(String::new(), |s| s.to_string()))
            .y_label_formatter(&|y| names.get(*y).cloned().unwrap_or_default())
            .y_labels(cols.len().max(1))
            .draw()
            .map_err(plot_err)?;
        chart
            .draw_series(rows.iter().enumerate().flat_map(|(x, row)| {
                cols.iter().enumerate().map(move |(y, &c)| {
                    let v = row.values[c - 1].clamp(0.0, 1.0);
                    let shade = (255.0 * (1.0 - v)).round() as u8;
                    Rectangle::new([(x, y), (x + 1, y + 1)], RGBColor(shade, shade, 255).filled())
                })
            }))
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(buf)
}

fn columns(log: &MetricLog, pick: impl Fn(&str) -> bool) -> Vec<(String, Vec<(f64, f64)>)> {
    log.header()
        .iter()
        .skip(1)
        .filter(|h| pick(h))
        .map(|h| {
            let ys = log.column(h).unwrap_or_default();
            (h.clone(), log.steps().iter().map(|s| *s as f64).zip(ys).collect())
        })
        .collect()
}

/// Loss curves, KL curves (log y) and attention heat strips, as SVG text.
pub fn plot_metric_log(log: &MetricLog) -> Result<[(&'static str, String); 3]> {
    let losses = columns(log, |h| matches!(h, "train_loss" | "val_loss" | "excess_loss"));
    let kls = columns(log, |h| h.starts_with("kl_"));
    Ok([
        ("loss", line_plot("loss", "step", &losses, false)?),
        ("kl", line_plot("KL to references", "step", &kls, true)?),
        ("attention", heat_strips(log)?),
    ])
}

/// Loss and per-feature alignment of every head against time, as SVG text.
pub fn plot_trajectory(log: &TrajectoryLog) -> Result<[(&'static str, String); 2]> {
    let t = log.column("t").unwrap_or_default();
    let series = |pick: &dyn Fn(&str) -> bool| -> Vec<(String, Vec<(f64, f64)>)> {
        log.header()
            .iter()
            .filter(|h| pick(h))
            .map(|h| {
                (
                    h.clone(),
                    t.iter().cloned().zip(log.column(h).unwrap_or_default()).collect(),
                )
            })
            .collect()
    };
    Ok([
        (
            "loss",
            line_plot("factorization loss", "t", &series(&|h| h == "loss"), false)?,
        ),
        (
            "align",
            line_plot(
                "alignment with features",
                "t",
                &series(&|h| h.starts_with("align_")),
                false,
            )?,
        ),
    ])
}

/// Writes files into one output directory and records them for the
/// manifest.
pub struct Emitter {
    dir: PathBuf,
    files: Vec<String>,
}

impl Emitter {
    pub fn create(dir: &Path) -> Result<Self> {
        prepare_out_dir(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Records a file written by other means.
    pub fn record(&mut self, name: &str) {
        self.files.push(name.to_string());
    }

    pub fn text(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.record(name);
        Ok(())
    }

    /// `<stem>.csv` plus `<stem>_loss.svg`, `<stem>_kl.svg` and
    /// `<stem>_attention.svg`.
    pub fn metric_log(&mut self, stem: &str, log: &MetricLog) -> Result<()> {
        log.save(&self.path(&format!("{stem}.csv")))?;
        self.record(&format!("{stem}.csv"));
        for (kind, svg) in plot_metric_log(log)? {
            self.text(&format!("{stem}_{kind}.svg"), &svg)?;
        }
        Ok(())
    }

    pub fn trajectory(&mut self, stem: &str, log: &TrajectoryLog) -> Result<()> {
        log.save(&self.path(&format!("{stem}.csv")))?;
        self.record(&format!("{stem}.csv"));
        for (kind, svg) in plot_trajectory(log)? {
            self.text(&format!("{stem}_{kind}.svg"), &svg)?;
        }
        Ok(())
    }

    pub fn report(&mut self, report: &CheckReport) -> Result<()> {
        self.text(&format!("{}.toml", report.name), &report.to_toml()?)
    }

    /// Writes `manifest.json` and returns it.
    pub fn finish(mut self, command: &str, config_digest: &str, seeds: &[u64]) -> Result<Manifest> {
        self.files.sort();
        self.files.dedup();
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_digest: config_digest.into(),
            seeds: seeds.to_vec(),
            kl_direction: "KL(reference || model)".into(),
            excess_loss: "cross-entropy minus entropy of the true conditional".into(),
            files: self.files,
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Numeric(format!("manifest serialization failed: {e}")))?;
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

/// Writes every metric log (CSV and plots) and check report into `dir`,
/// followed by the manifest.
pub fn emit_outputs(
    dir: &Path,
    logs: &[(String, MetricLog)],
    reports: &[CheckReport],
    command: &str,
    config_digest: &str,
    seeds: &[u64],
) -> Result<Manifest> {
    let mut em = Emitter::create(dir)?;
    for (stem, log) in logs {
        em.metric_log(stem, log)?;
    }
    for r in reports {
        em.report(r)?;
    }
    em.finish(command, config_digest, seeds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_log() -> MetricLog {
        let mut log = MetricLog::new(&[1, 2], &[], 2, 2);
        for s in 0..5 {
            let x = s as f64;
            log.push(
                s * 10,
                vec![
                    2.0 - 0.1 * x,
                    2.1 - 0.1 * x,
                    0.5 / (1.0 + x),
                    0.3 * 0.5f64.powf(x),
                    0.0,
                    0.7,
                    0.3,
                    0.5,
                    0.5,
                    1e-3,
                ],
            )
            .unwrap();
        }
        log
    }

    #[test]
    fn empty_log_still_plots_axes() {
        let log = MetricLog::new(&[1], &[], 1, 2);
        for (_, svg) in plot_metric_log(&log).unwrap() {
            assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        }
    }

    #[test]
    fn emit_writes_manifest_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let logs = vec![("run".to_string(), sample_log())];
        let a = emit_outputs(dir.path(), &logs, &[], "train", "abc", &[7]).unwrap();
        assert_eq!(
            a.files,
            vec!["run.csv", "run_attention.svg", "run_kl.svg", "run_loss.svg"]
        );
        let first = std::fs::read(dir.path().join("run_kl.svg")).unwrap();
        let manifest = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let back: Manifest = serde_json::from_str(&manifest).unwrap();
        assert_eq!(back, a);
        emit_outputs(dir.path(), &logs, &[], "train", "abc", &[7]).unwrap();
        assert_eq!(std::fs::read(dir.path().join("run_kl.svg")).unwrap(), first);
        assert_eq!(MetricLog::load(&dir.path().join("run.csv")).unwrap(), logs[0].1);
    }

    #[test]
    fn unwritable_directory_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        std::fs::write(&file, b"x").unwrap();
        assert!(matches!(prepare_out_dir(&file.join("sub")), Err(Error::Io { .. })));
    }
}

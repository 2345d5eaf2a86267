use std::io::Write;
use std::path::Path;

use crate::attention::{forward, ForwardCache, ModelParams};
use crate::error::{Error, Result};
use crate::flow::format_float;
use crate::markov::{SequenceBatch, TaskSpec};

/// KL values above this many nats are counted as flagged by the probes.
pub const KL_FLAG_NATS: f64 = 50.0;

const Q_FLOOR: f64 = 1e-300;
const SIMPLEX_TOL: f64 = 1e-9;

fn on_simplex(p: &[f64]) -> bool {
    p.iter().all(|x| *x >= -SIMPLEX_TOL) && (p.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL
}

/// `Σ p_i ln(p_i / q_i)` with `q` clamped at `1e-300`; terms with `p_i = 0`
/// contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim(format!("KL of lengths {} and {}", p.len(), q.len())));
    }
    if !on_simplex(p) || !on_simplex(q) {
        return Err(Error::domain("KL arguments must be probability vectors"));
    }
    Ok(kl_unchecked(p, q))
}

fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b.max(Q_FLOOR)).ln())
        .sum()
}

/// Mean KL from a precomputed `[n][step][token]` table to the model
/// predictions, and the number of flagged terms.
pub(crate) fn mean_kl_table(truth: &[f64], cache: &ForwardCache, d: usize) -> Result<(f64, usize)> {
    let count = cache.count();
    if count == 0 || !truth.len().is_multiple_of(count * d) {
        return Err(Error::dim("truth table does not match the probe batch"));
    }
    let t = truth.len() / (count * d);
    let (mut total, mut flagged) = (0.0, 0);
    for n in 0..count {
        for step in 0..t {
            let at = (n * t + step) * d;
            let kl = kl_unchecked(&truth[at..at + d], cache.prediction(n, step));
            flagged += usize::from(kl > KL_FLAG_NATS);
            total += kl;
        }
    }
    Ok((total / (count * t) as f64, flagged))
}

pub(crate) fn mean_kl_models(reference: &ForwardCache, model: &ForwardCache) -> Result<(f64, usize)> {
    if reference.count() != model.count() || reference.count() == 0 {
        return Err(Error::dim("reference and model were run on different batches"));
    }
    let t = model.t();
    let (mut total, mut flagged) = (0.0, 0);
    for n in 0..model.count() {
        for step in 0..t {
            let kl = kl_unchecked(reference.prediction(n, step), model.prediction(n, step));
            flagged += usize::from(kl > KL_FLAG_NATS);
            total += kl;
        }
    }
    Ok((total / (model.count() * t) as f64, flagged))
}

/// Mean `KL(f_{A_{1:i}} ‖ model)` over the probe batch and every generated
/// position, where `f_{A_{1:i}}` is the ground truth restricted to the first
/// `i` position groups.
pub fn probe_restricted_gt(spec: &TaskSpec, params: &ModelParams, probe: &SequenceBatch, i: usize) -> Result<f64> {
    if probe.count() == 0 {
        return Err(Error::domain("empty probe batch"));
    }
    let cache = forward(params, probe)?;
    let w = spec.w();
    let mut total = 0.0;
    for (n, seq) in probe.iter().enumerate() {
        for step in 0..spec.t() {
            let pos = w + step;
            let truth = spec.restricted_predictor(i, &seq[pos - w..pos])?;
            total += kl_unchecked(truth.as_slice(), cache.prediction(n, step));
        }
    }
    Ok(total / (probe.count() * spec.t()) as f64)
}

/// Mean `KL(reference_c ‖ model)` for each reference model.
pub fn probe_restricted_model(
    params: &ModelParams,
    references: &[ModelParams],
    probe: &SequenceBatch,
) -> Result<Vec<f64>> {
    if probe.count() == 0 {
        return Err(Error::domain("empty probe batch"));
    }
    let cache = forward(params, probe)?;
    references
        .iter()
        .map(|r| Ok(mean_kl_models(&forward(r, probe)?, &cache)?.0))
        .collect()
}

/// One logged step.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    /// Values in header order after `step`.
    pub values: Vec<f64>,
}

/// Training metrics: `step, train_loss, val_loss, excess_loss`, then
/// `kl_gt_i` per probed predictor, `kl_model_c{c}` per reference context,
/// `attn_h{k}_lag{i}` per head and lag, and `lr`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricLog {
    header: Vec<String>,
    rows: Vec<MetricRow>,
}

impl MetricLog {
    pub fn new(predictors: &[usize], contexts: &[usize], heads: usize, w: usize) -> Self {
        let mut header: Vec<String> = ["step", "train_loss", "val_loss", "excess_loss"]
            .map(String::from)
            .to_vec();
        header.extend(predictors.iter().map(|i| format!("kl_gt_{i}")));
        header.extend(contexts.iter().map(|c| format!("kl_model_c{c}")));
        for k in 0..heads {
            header.extend((0..w).map(|i| format!("attn_h{}_lag{i}", k + 1)));
        }
        header.push("lr".into());
        Self {
            header,
            rows: Vec::new(),
        }
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    /// Appends a row; steps must increase strictly.
    pub fn push(&mut self, step: usize, values: Vec<f64>) -> Result<()> {
        if values.len() + 1 != self.header.len() {
            return Err(Error::dim(format!(
                "{} values for {} columns",
                values.len(),
                self.header.len() - 1
            )));
        }
        if self.rows.last().is_some_and(|r| r.step >= step) {
            return Err(Error::domain(format!("step {step} does not increase")));
        }
        self.rows.push(MetricRow { step, values });
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        if i == 0 {
            return Some(self.rows.iter().map(|r| r.step as f64).collect());
        }
        Some(self.rows.iter().map(|r| r.values[i - 1]).collect())
    }

    pub fn steps(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.step).collect()
    }

    /// `(name, [(step, value)])` for every `kl_gt_*` column, in header order.
    pub fn kl_gt_series(&self) -> Vec<(String, Vec<(usize, f64)>)> {
        self.series_with_prefix("kl_gt_")
    }

    pub fn series_with_prefix(&self, prefix: &str) -> Vec<(String, Vec<(usize, f64)>)> {
        self.header
            .iter()
            .enumerate()
            .filter(|(_, h)| h.starts_with(prefix))
            .map(|(i, h)| (h.clone(), self.rows.iter().map(|r| (r.step, r.values[i - 1])).collect()))
            .collect()
    }

    /// Comma-separated, `\n` line ends, floats with 17 significant digits.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        let io = |e: csv::Error| Error::Numeric(format!("csv write failed: {e}"));
        w.write_record(&self.header).map_err(io)?;
        for row in &self.rows {
            let mut rec = vec![row.step.to_string()];
            rec.extend(row.values.iter().map(|x| format_float(*x)));
            w.write_record(&rec).map_err(io)?;
        }
        w.flush()
            .map_err(|e| Error::Numeric(format!("csv flush failed: {e}")))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let bad = |e: &dyn std::fmt::Display| Error::config(format!("malformed metric csv: {e}"));
        let header: Vec<String> = r.headers().map_err(|e| bad(&e))?.iter().map(String::from).collect();
        if header.first().map(String::as_str) != Some("step") {
            return Err(bad(&"first column must be `step`"));
        }
        let mut log = Self {
            header,
            rows: Vec::new(),
        };
        for rec in r.records() {
            let rec = rec.map_err(|e| bad(&e))?;
            let step = rec[0].parse::<usize>().map_err(|e| bad(&e))?;
            let values = rec
                .iter()
                .skip(1)
                .map(|x| x.parse::<f64>().map_err(|e| bad(&e)))
                .collect::<Result<Vec<_>>>()?;
            log.push(step, values)?;
        }
        Ok(log)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::build_ideal_params;
    use crate::markov::{build_task, sample_batch, TaskConfig};
    use crate::rng::stream;
    use proptest::prelude::*;

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]).unwrap(), 0.0);
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        let big = kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(big.is_finite() && big > KL_FLAG_NATS);
        assert!(kl_divergence(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(1e-6f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn kl_is_nonnegative((p, q) in (2usize..8).prop_flat_map(|n| (simplex(n), simplex(n)))) {
            prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn ideal_model_matches_full_truth() {
        let spec = build_task(&TaskConfig::minimal(6, 8, 2)).unwrap();
        let probe = sample_batch(&spec, 50, &mut stream(2, 4)).unwrap();
        let params = build_ideal_params(&spec, 50.0).unwrap();
        assert!(probe_restricted_gt(&spec, &params, &probe, 3).unwrap() < 1e-2);
        assert!(probe_restricted_gt(&spec, &params, &probe, 1).unwrap() > 1e-2);
        assert!(probe_restricted_gt(&spec, &params, &probe, 0).is_err());
    }

    #[test]
    fn uniform_model_matches_featureless_truth() {
        let spec = crate::markov::TaskSpec::from_parts(
            4,
            6,
            6,
            crate::markov::equal_intervals(6, 3).unwrap(),
            vec![0.5; 6],
            vec![0.0; 3],
            vec![crate::numerics::Matrix::identity(4, 4); 3],
            1,
        )
        .unwrap();
        let probe = sample_batch(&spec, 20, &mut stream(1, 4)).unwrap();
        let params = crate::attention::ModelParams::for_task(&spec, 3);
        assert!(probe_restricted_gt(&spec, &params, &probe, 2).unwrap().abs() < 1e-15);
    }

    #[test]
    fn metric_csv_round_trip() {
        let mut log = MetricLog::new(&[1, 2], &[4], 1, 2);
        log.push(0, vec![2.0, 1.0 / 3.0, 0.1, 0.5, 0.25, 1e-300, 0.5, 0.5, 3e-3])
            .unwrap();
        log.push(
            10,
            vec![1.0, std::f64::consts::E, 0.1, 0.5, 0.25, 0.0, 0.9, 0.1, 1.5e-3],
        )
        .unwrap();
        assert!(log.push(10, vec![0.0; 9]).is_err());
        assert!(log.push(20, vec![0.0; 8]).is_err());
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,train_loss,val_loss,excess_loss,kl_gt_1,kl_gt_2,kl_model_c4,attn_h1_lag0"));
        assert_eq!(MetricLog::read_csv(buf.as_slice()).unwrap(), log);
        let empty = MetricLog::new(&[1], &[], 1, 1);
        let mut buf = Vec::new();
        empty.write_csv(&mut buf).unwrap();
        assert_eq!(buf.iter().filter(|b| **b == b'\n').count(), 1);
        assert_eq!(MetricLog::read_csv(buf.as_slice()).unwrap(), empty);
    }
}

//! Ensemble arithmetic and the prediction interchange formats.
//!
//! Prediction tables are `id,score` text; probability maps are
//! `shape=<r>x<c> dtype=f64` followed by row-major values.

use std::fmt::Write as _;

use thiserror::Error;

use crate::workspace::{Direction, ResultManifest};

pub const WEIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("no scores")]
    Empty,
    #[error("non-finite score at position {0}")]
    NonFiniteScore(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid weights: {0}")]
    WeightInvalid(String),
    #[error("value outside [0, 1] at position {0}")]
    OutOfRange(usize),
}

/// Tie-averaged 0-based rank of each score divided by `N - 1`, in input
/// order. A single score maps to 0.5.
pub fn rank_percentile(scores: &[f64]) -> Result<Vec<f64>, EnsembleError> {
    if scores.is_empty() {
        return Err(EnsembleError::Empty);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EnsembleError::NonFiniteScore(i));
    }
    let n = scores.len();
    if n == 1 {
        return Ok(vec![0.5]);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite"));
    let mut out = vec![0.0; n];
    let mut lo = 0;
    while lo < n {
        let mut hi = lo;
        while hi + 1 < n && scores[order[hi + 1]] == scores[order[lo]] {
            hi += 1;
        }
        let value = (lo + hi) as f64 / 2.0 / (n - 1) as f64;
        for &i in &order[lo..=hi] {
            out[i] = value;
        }
        lo = hi + 1;
    }
    Ok(out)
}

pub fn check_weights(weights: &[f64], count: usize) -> Result<(), EnsembleError> {
    if weights.len() != count {
        return Err(EnsembleError::WeightInvalid(format!("{} weights for {count} inputs", weights.len())));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(EnsembleError::WeightInvalid("weights must be finite and non-negative".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
        return Err(EnsembleError::WeightInvalid(format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

/// Elementwise `Σ w_k · p_k`, accumulated in input order and clamped to the
/// elementwise input range. With a threshold the result is 1 where the
/// blend reaches it and 0 elsewhere.
pub fn weighted_blend(
    predictions: &[&[f64]],
    weights: &[f64],
    threshold: Option<f64>,
) -> Result<Vec<f64>, EnsembleError> {
    if predictions.len() < 2 {
        return Err(EnsembleError::ShapeMismatch("at least two inputs are required".into()));
    }
    let len = predictions[0].len();
    if let Some(k) = predictions.iter().position(|p| p.len() != len) {
        return Err(EnsembleError::ShapeMismatch(format!(
            "input {k} has {} values, input 0 has {len}",
            predictions[k].len()
        )));
    }
    check_weights(weights, predictions.len())?;
    if let Some(t) = threshold {
        if !(t > 0.0 && t < 1.0) {
            return Err(EnsembleError::WeightInvalid(format!("threshold {t} outside (0, 1)")));
        }
        for p in predictions {
            if let Some(i) = p.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(EnsembleError::OutOfRange(i));
            }
        }
    }
    let mut out = Vec::with_capacity(len);
    for e in 0..len {
        let mut acc = 0.0;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (p, w) in predictions.iter().zip(weights) {
            acc += w * p[e];
            lo = lo.min(p[e]);
            hi = hi.max(p[e]);
        }
        let blend = acc.clamp(lo, hi);
        out.push(match threshold {
            Some(t) if blend >= t => 1.0,
            Some(_) => 0.0,
            None => blend,
        });
    }
    Ok(out)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SelectError {
    #[error("no candidates")]
    Empty,
    #[error("candidates report different metrics")]
    MixedMetrics,
}

/// Repository with the best metric; ties go to the lowest index.
pub fn select_best(entries: &[(usize, ResultManifest)]) -> Result<usize, SelectError> {
    let first = entries.first().ok_or(SelectError::Empty)?;
    let (name, dir) = (&first.1.metric_name, first.1.direction);
    if entries.iter().any(|(_, m)| &m.metric_name != name || m.direction != dir) {
        return Err(SelectError::MixedMetrics);
    }
    let mut sorted: Vec<&(usize, ResultManifest)> = entries.iter().collect();
    sorted.sort_by_key(|(i, _)| *i);
    let mut best = sorted[0];
    for e in &sorted[1..] {
        if dir.better(e.1.metric_value, best.1.metric_value) {
            best = e;
        }
    }
    Ok(best.0)
}

/// Weights proportional to the direction-aligned metric. Lower-is-better
/// values are reflected as `max + min - v`. Falls back to uniform weights
/// when an aligned value is not positive.
pub fn default_weights(values: &[f64], direction: Direction) -> Vec<f64> {
    let n = values.len();
    if n == 0 {
        return Vec::new();
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let aligned: Vec<f64> = match direction {
        Direction::HigherBetter => values.to_vec(),
        Direction::LowerBetter => values.iter().map(|v| max + min - v).collect(),
    };
    let sum: f64 = aligned.iter().sum();
    if aligned.iter().any(|a| !(a.is_finite() && *a > 0.0)) || !(sum > 0.0) {
        return vec![1.0 / n as f64; n];
    }
    aligned.iter().map(|a| a / sum).collect()
}

#[derive(Debug, Error, PartialEq)]
pub enum InterchangeError {
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

fn parse_err(line: usize, detail: impl Into<String>) -> InterchangeError {
    InterchangeError::Parse { line, detail: detail.into() }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionTable {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
}

pub fn parse_predictions(text: &str) -> Result<PredictionTable, InterchangeError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) if header.trim().replace(' ', "") == "id,score" => {}
        Some((i, _)) => return Err(parse_err(i + 1, "expected header `id,score`")),
        None => return Err(parse_err(1, "empty table")),
    }
    let mut table = PredictionTable { ids: Vec::new(), scores: Vec::new() };
    for (i, line) in lines {
        let (id, score) = line.split_once(',').ok_or_else(|| parse_err(i + 1, "expected `id,score`"))?;
        let score: f64 = score.trim().parse().map_err(|_| parse_err(i + 1, format!("bad score `{}`", score.trim())))?;
        if !score.is_finite() {
            return Err(parse_err(i + 1, "score must be finite"));
        }
        table.ids.push(id.trim().to_string());
        table.scores.push(score);
    }
    Ok(table)
}

pub fn write_predictions(table: &PredictionTable) -> String {
    let mut out = String::from("id,score\n");
    for (id, s) in table.ids.iter().zip(&table.scores) {
        let _ = writeln!(out, "{id},{s}");
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

pub fn parse_grid(text: &str) -> Result<Grid, InterchangeError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(1, "empty grid"))?;
    let mut rows_cols = None;
    let mut dtype_ok = false;
    for field in header.split_whitespace() {
        if let Some(shape) = field.strip_prefix("shape=") {
            let (r, c) = shape.split_once('x').ok_or_else(|| parse_err(1, "shape must be <r>x<c>"))?;
            let r: usize = r.parse().map_err(|_| parse_err(1, "bad row count"))?;
            let c: usize = c.parse().map_err(|_| parse_err(1, "bad column count"))?;
            rows_cols = Some((r, c));
        } else if field == "dtype=f64" {
            dtype_ok = true;
        } else {
            return Err(parse_err(1, format!("unexpected header field `{field}`")));
        }
    }
    let (rows, cols) = rows_cols.ok_or_else(|| parse_err(1, "missing shape"))?;
    if !dtype_ok {
        return Err(parse_err(1, "dtype must be f64"));
    }
    let mut values = Vec::with_capacity(rows * cols);
    for (i, line) in lines.enumerate() {
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| parse_err(i + 2, format!("bad value `{tok}`")))?;
            values.push(v);
        }
    }
    if values.len() != rows * cols {
        return Err(parse_err(1, format!("shape {rows}x{cols} but {} values", values.len())));
    }
    Ok(Grid { rows, cols, values })
}

pub fn write_grid(grid: &Grid) -> String {
    let mut out = format!("shape={}x{} dtype=f64\n", grid.rows, grid.cols);
    for row in grid.values.chunks(grid.cols.max(1)) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_percentile_examples() {
        assert_eq!(rank_percentile(&[3.2, 1.1, 2.0, 5.0]).unwrap(), vec![2.0 / 3.0, 0.0, 1.0 / 3.0, 1.0]);
        assert_eq!(rank_percentile(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(rank_percentile(&[2.0, 2.0, 5.0]).unwrap(), vec![0.25, 0.25, 1.0]);
        assert_eq!(rank_percentile(&[7.0]).unwrap(), vec![0.5]);
        assert_eq!(rank_percentile(&[1.0, f64::NAN]), Err(EnsembleError::NonFiniteScore(1)));
    }

    #[test]
    fn blend_examples() {
        let a = [0.9, 0.1];
        let b = [0.9, 0.5];
        assert_eq!(weighted_blend(&[&a, &b], &[0.3, 0.7], Some(0.8)).unwrap(), vec![1.0, 0.0]);
        assert_eq!(weighted_blend(&[&a, &b], &[1.0, 0.0], None).unwrap(), a.to_vec());
        let p = [0.37; 5];
        assert_eq!(weighted_blend(&[&p, &p, &p], &[0.2, 0.3, 0.5], None).unwrap(), p.to_vec());
        assert!(matches!(weighted_blend(&[&a, &[0.1]], &[0.5, 0.5], None), Err(EnsembleError::ShapeMismatch(_))));
        assert!(matches!(weighted_blend(&[&a, &b], &[0.5, 0.6], None), Err(EnsembleError::WeightInvalid(_))));
    }

    fn m(name: &str, v: f64, d: Direction) -> ResultManifest {
        ResultManifest {
            metric_name: name.into(),
            metric_value: v,
            direction: d,
            checkpoints: vec![],
            predictions_path: None,
            produced_by: String::new(),
            produced_at: None,
            runs_completed: 1,
            inference_command: None,
        }
    }

    #[test]
    fn select_best_examples() {
        use Direction::*;
        let lower = [(1, m("rmse", 5.2, LowerBetter)), (2, m("rmse", 4.8, LowerBetter)), (3, m("rmse", 6.0, LowerBetter))];
        assert_eq!(select_best(&lower), Ok(2));
        assert_eq!(select_best(&[(4, m("auc", 0.9, HigherBetter)), (1, m("auc", 0.9, HigherBetter))]), Ok(1));
        assert_eq!(
            select_best(&[(1, m("auc", 0.9, HigherBetter)), (2, m("rmse", 1.0, LowerBetter))]),
            Err(SelectError::MixedMetrics)
        );
        assert_eq!(select_best(&[]), Err(SelectError::Empty));
    }

    #[test]
    fn default_weights_align_direction() {
        let w = default_weights(&[0.8, 0.6], Direction::HigherBetter);
        assert!((w[0] - 0.8 / 1.4).abs() < 1e-15);
        let w = default_weights(&[4.0, 6.0], Direction::LowerBetter);
        assert!((w[0] - 0.6).abs() < 1e-15 && (w[1] - 0.4).abs() < 1e-15);
        assert_eq!(default_weights(&[-1.0, 2.0], Direction::HigherBetter), vec![0.5, 0.5]);
    }

    #[test]
    fn interchange_round_trip() {
        let t = PredictionTable { ids: vec!["a".into(), "b".into()], scores: vec![0.1, 1e-7] };
        assert_eq!(parse_predictions(&write_predictions(&t)).unwrap(), t);
        let g = Grid { rows: 2, cols: 3, values: vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.125] };
        assert_eq!(parse_grid(&write_grid(&g)).unwrap(), g);
        assert!(parse_grid("shape=2x2 dtype=f64\n1 2 3\n").is_err());
        assert!(parse_predictions("name,value\n").is_err());
    }
}

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when either series has zero variance.
    pub pearson: Option<f64>,
}

impl Metrics {
    pub fn pearson_text(&self) -> String {
        match self.pearson {
            Some(r) => r.to_string(),
            None => "undefined".to_string(),
        }
    }
}

/// MAE, RMSE and Pearson correlation of predictions against ground truth.
pub fn metrics(predictions: &[f64], truths: &[f64]) -> Result<Metrics> {
    if predictions.len() != truths.len() {
        return Err(Error::SeriesLength(predictions.len(), truths.len()));
    }
    if predictions.is_empty() {
        return Err(Error::Empty("metric series"));
    }
    let n = predictions.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for (p, g) in predictions.iter().zip(truths) {
        let e = p - g;
        abs += e.abs();
        sq += e * e;
    }
    Ok(Metrics {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        pearson: pearson(predictions, truths),
    })
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Mean absolute error over a sliding window of `window` consecutive
/// entries, one value per full window.
pub fn rolling_mae(abs_errors: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || abs_errors.len() < window {
        return Vec::new();
    }
    abs_errors
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

/// Number of trailing instances covered by `fraction` of `n`, at least one.
pub fn trailing_len(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_case() {
        let m = metrics(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert_eq!(m.mae, 3.5);
        assert!((m.rmse - 3.535_533_905_932_737_5).abs() < 1e-12);
        assert_eq!(m.pearson, None);
    }

    #[test]
    fn perfect_and_anti() {
        let gt = [60.0, 70.0, 85.0, 90.0];
        let m = metrics(&gt, &gt).unwrap();
        assert_eq!((m.mae, m.rmse), (0.0, 0.0));
        assert!((m.pearson.unwrap() - 1.0).abs() < 1e-12);
        let centered = [-1.0, 2.0, -3.0, 2.0];
        let neg: Vec<f64> = centered.iter().map(|v| -v).collect();
        assert!((metrics(&neg, &centered).unwrap().pearson.unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(matches!(
            metrics(&[1.0], &[1.0, 2.0]),
            Err(Error::SeriesLength(1, 2))
        ));
        assert!(matches!(metrics(&[], &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn trailing_quarter() {
        assert_eq!(trailing_len(2000, 0.25), 500);
        assert_eq!(trailing_len(3, 0.25), 1);
        assert_eq!(rolling_mae(&[1.0, 3.0, 5.0], 2), vec![2.0, 4.0]);
    }
}

//! Forecast metrics: MSE, MAE and length-normalized dynamic time warping.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_shapes(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(())
}

/// Mean over all entries of the squared difference.
pub fn mse(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<f64> {
    check_shapes(pred, target)?;
    let sum: f64 = pred.iter().zip(target.iter()).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(sum / pred.len() as f64)
}

pub fn mae(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<f64> {
    check_shapes(pred, target)?;
    let sum: f64 = pred.iter().zip(target.iter()).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// Optimal DTW alignment cost divided by the number of cells on the path.
///
/// Local cost is `|a_u - b_v|`, steps are `(1,0)`, `(0,1)` and `(1,1)`, and
/// both endpoints are pinned. Among paths of equal minimal cost the one with
/// the fewest cells is taken.
pub fn dtw_normalized(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySequence);
    }
    let (n, m) = (a.len(), b.len());
    // (cost, cells) per cell, compared lexicographically.
    let mut prev: Vec<(f64, usize)> = vec![(f64::INFINITY, 0); m];
    let mut cur: Vec<(f64, usize)> = vec![(f64::INFINITY, 0); m];
    for u in 0..n {
        for v in 0..m {
            let local = (a[u] - b[v]).abs();
            let best = if u == 0 && v == 0 {
                (0.0, 0)
            } else {
                let mut best = (f64::INFINITY, usize::MAX);
                if u > 0 && v > 0 {
                    best = better(best, prev[v - 1]);
                }
                if u > 0 {
                    best = better(best, prev[v]);
                }
                if v > 0 {
                    best = better(best, cur[v - 1]);
                }
                best
            };
            cur[v] = (best.0 + local, best.1 + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (cost, cells) = prev[m - 1];
    Ok(cost / cells as f64)
}

fn better(x: (f64, usize), y: (f64, usize)) -> (f64, usize) {
    if y.0 < x.0 || (y.0 == x.0 && y.1 < x.1) {
        y
    } else {
        x
    }
}

/// Per-node normalized DTW averaged over nodes; rows are nodes.
pub fn dtw_multivariate(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<f64> {
    check_shapes(pred, target)?;
    let mut total = 0.0;
    for (p, t) in pred.rows().into_iter().zip(target.rows()) {
        total += dtw_normalized(&p.to_vec(), &t.to_vec())?;
    }
    Ok(total / pred.nrows() as f64)
}

/// Metrics for one forecast window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub mse: f64,
    pub mae: f64,
    pub dtw: f64,
}

impl WindowMetrics {
    pub fn compute(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<Self> {
        Ok(Self {
            mse: mse(pred, target)?,
            mae: mae(pred, target)?,
            dtw: dtw_multivariate(pred, target)?,
        })
    }
}

/// Aggregated metrics over a set of windows (population standard deviations).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    pub dtw: f64,
    pub mse_std: f64,
    pub mae_std: f64,
    pub dtw_std: f64,
    pub n_windows: usize,
    pub per_window: Vec<WindowMetrics>,
}

impl MetricReport {
    pub fn from_windows(per_window: Vec<WindowMetrics>) -> Result<Self> {
        if per_window.is_empty() {
            return Err(Error::EmptySequence);
        }
        let (mse, mse_std) = mean_std(per_window.iter().map(|w| w.mse));
        let (mae, mae_std) = mean_std(per_window.iter().map(|w| w.mae));
        let (dtw, dtw_std) = mean_std(per_window.iter().map(|w| w.dtw));
        Ok(Self {
            mse,
            mae,
            dtw,
            mse_std,
            mae_std,
            dtw_std,
            n_windows: per_window.len(),
            per_window,
        })
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Scores paired forecasts and targets window by window.
pub fn evaluate<'a, I>(pairs: I) -> Result<MetricReport>
where
    I: IntoIterator<Item = (ArrayView2<'a, f64>, ArrayView2<'a, f64>)>,
{
    let per_window = pairs
        .into_iter()
        .map(|(p, t)| WindowMetrics::compute(p, t))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_windows(per_window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn pointwise_examples() {
        let t = Array2::<f64>::zeros((1, 2));
        assert_eq!(mse(t.view(), t.view()).unwrap(), 0.0);
        assert_eq!(mse(array![[0.0, 2.0]].view(), t.view()).unwrap(), 2.0);
        assert_eq!(mae(array![[1.0, -1.0]].view(), t.view()).unwrap(), 1.0);
        assert_eq!(mae((&t + 0.5).view(), t.view()).unwrap(), 0.5);
        assert_eq!(mse((&t + 1.0).view(), t.view()).unwrap(), 1.0);
        assert!(mse(t.view(), Array2::zeros((2, 1)).view()).is_err());
    }

    #[test]
    fn dtw_basic_cases() {
        let a = [0.3, -1.0, 2.0, 2.0];
        assert_eq!(dtw_normalized(&a, &a).unwrap(), 0.0);
        assert_eq!(dtw_normalized(&[1.5], &[-0.5]).unwrap(), 2.0);
        // min cost 1 is reached by the diagonal (2 cells) and by a 3-cell
        // path; the shorter one is kept
        assert_eq!(dtw_normalized(&[0.0, 0.0], &[0.0, 1.0]).unwrap(), 0.5);
        assert!(matches!(dtw_normalized(&[], &[1.0]), Err(Error::EmptySequence)));
    }

    #[test]
    fn evaluate_aggregates() {
        let z = Array2::<f64>::zeros((2, 3));
        let one = Array2::<f64>::ones((2, 3));
        let exact = evaluate([(z.view(), z.view())]).unwrap();
        assert_eq!((exact.mse, exact.mae, exact.dtw), (0.0, 0.0, 0.0));
        assert_eq!((exact.mse_std, exact.mae_std, exact.dtw_std), (0.0, 0.0, 0.0));
        let two = (&one * 2f64.sqrt()).to_owned();
        let r = evaluate([(z.view(), z.view()), (two.view(), z.view())]).unwrap();
        assert!((r.mse - 1.0).abs() < 1e-12);
        assert_eq!(r.n_windows, 2);
    }
}

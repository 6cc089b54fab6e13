//! Cross-stream correlation, the thresholded refinement loss built on it,
//! and the combined training objective.

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{Error, Result};
use crate::features::{check_finite, zscore, zscore_backward, FeatureMatrix, ZScore};

/// Slack allowed on the `[-1, 1]` bound of correlation entries.
pub const CORRELATION_BOUND_SLACK: f64 = 1e-9;

/// `K x K` Pearson correlations between the dimensions of two streams.
/// Rows index the first stream, columns the second.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    data: Array2<f64>,
}

impl CorrelationMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        check_finite(data.view())?;
        if let Some(((row, col), &value)) = data
            .indexed_iter()
            .find(|(_, v)| v.abs() > 1.0 + CORRELATION_BOUND_SLACK)
        {
            return Err(Error::InvalidConfig(format!(
                "correlation entry ({row}, {col}) = {value} outside [-1, 1]"
            )));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mean_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diagonal(&self) -> f64 {
        self.data.diag().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Fraction of entries the threshold masks out (`|c| <= epsilon`).
    pub fn masked_fraction(&self, epsilon: f64) -> f64 {
        let masked = self
            .data
            .iter()
            .filter(|c| !is_active(**c, epsilon))
            .count();
        masked as f64 / self.data.len() as f64
    }
}

/// An entry contributes to the loss only when strictly above the threshold.
#[inline]
pub fn is_active(c: f64, epsilon: f64) -> bool {
    c.abs() > epsilon
}

/// Forward state of the correlation, reused by the backward pass.
#[derive(Clone, Debug)]
pub struct Correlation {
    pub zu: ZScore,
    pub zv: ZScore,
    pub c: Array2<f64>,
}

/// `C = z(U)^T z(V) / T` on raw arrays.
pub fn correlate(ut: ArrayView2<'_, f64>, vt: ArrayView2<'_, f64>) -> Result<Correlation> {
    if ut.nrows() != vt.nrows() {
        return Err(Error::DimensionMismatch {
            context: "correlation frame count",
            expected: ut.nrows(),
            actual: vt.nrows(),
        });
    }
    if ut.ncols() != vt.ncols() {
        return Err(Error::DimensionMismatch {
            context: "correlation feature dims",
            expected: ut.ncols(),
            actual: vt.ncols(),
        });
    }
    if ut.nrows() < 2 {
        return Err(Error::InsufficientFrames(ut.nrows()));
    }
    let t = ut.nrows() as f64;
    let zu = zscore(ut);
    let zv = zscore(vt);
    let c = zu.normalized.t().dot(&zv.normalized) / t;
    Ok(Correlation { zu, zv, c })
}

pub fn cross_correlation(ut: &FeatureMatrix, vt: &FeatureMatrix) -> Result<CorrelationMatrix> {
    CorrelationMatrix::new(correlate(ut.view(), vt.view())?.c)
}

/// Pulls a gradient with respect to `C` back to the two input streams.
pub fn correlation_backward(
    corr: &Correlation,
    grad_c: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if grad_c.dim() != corr.c.dim() {
        return Err(Error::DimensionMismatch {
            context: "correlation gradient dims",
            expected: corr.c.ncols(),
            actual: grad_c.ncols(),
        });
    }
    let t = corr.zu.normalized.nrows() as f64;
    let grad_zu = corr.zv.normalized.dot(&grad_c.t()) / t;
    let grad_zv = corr.zu.normalized.dot(&grad_c) / t;
    Ok((
        zscore_backward(&corr.zu, grad_zu.view()),
        zscore_backward(&corr.zv, grad_zv.view()),
    ))
}

pub fn cross_correlation_backward(
    ut: &FeatureMatrix,
    vt: &FeatureMatrix,
    grad_c: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    correlation_backward(&correlate(ut.view(), vt.view())?, grad_c)
}

/// Sum of `c^2` over entries with `|c| > epsilon`.
pub fn refine_loss(c: &CorrelationMatrix, epsilon: f64) -> f64 {
    refine_loss_array(c.data.view(), epsilon)
}

pub(crate) fn refine_loss_array(c: ArrayView2<'_, f64>, epsilon: f64) -> f64 {
    c.iter()
        .filter(|v| is_active(**v, epsilon))
        .fold(0.0, |acc, v| acc + v * v)
}

/// `dL/dC`: `2c` on active entries, exactly zero on masked ones (including
/// `|c| == epsilon`).
pub fn refine_loss_grad(c: ArrayView2<'_, f64>, epsilon: f64) -> Array2<f64> {
    c.mapv(|v| if is_active(v, epsilon) { 2.0 * v } else { 0.0 })
}

/// Loss value, correlation and stream gradients of the refinement loss.
#[derive(Clone, Debug)]
pub struct RefineGrad {
    pub loss: f64,
    pub correlation: Array2<f64>,
    /// `dL/dC`, kept so callers can audit the mask.
    pub grad_c: Array2<f64>,
    pub grad_u: Array2<f64>,
    pub grad_v: Array2<f64>,
}

pub fn refine_loss_backward_arrays(
    ut: ArrayView2<'_, f64>,
    vt: ArrayView2<'_, f64>,
    epsilon: f64,
) -> Result<RefineGrad> {
    let corr = correlate(ut, vt)?;
    let grad_c = refine_loss_grad(corr.c.view(), epsilon);
    let (grad_u, grad_v) = correlation_backward(&corr, grad_c.view())?;
    Ok(RefineGrad {
        loss: refine_loss_array(corr.c.view(), epsilon),
        correlation: corr.c,
        grad_c,
        grad_u,
        grad_v,
    })
}

/// Gradients of the refinement loss with respect to both transformed streams.
pub fn refine_loss_backward(
    ut: &FeatureMatrix,
    vt: &FeatureMatrix,
    epsilon: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let g = refine_loss_backward_arrays(ut.view(), vt.view(), epsilon)?;
    Ok((g.grad_u, g.grad_v))
}

/// Mean refinement loss over a batch of stream pairs.
pub fn batch_refine_loss(batch: &[(FeatureMatrix, FeatureMatrix)], epsilon: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let dims = batch[0].0.dims();
    let mut total = 0.0;
    for (u, v) in batch {
        if u.dims() != dims {
            return Err(Error::DimensionMismatch {
                context: "batch feature dims",
                expected: dims,
                actual: u.dims(),
            });
        }
        total += refine_loss(&cross_correlation(u, v)?, epsilon);
    }
    Ok(total / batch.len() as f64)
}

/// One evaluation of the total objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    /// Task term as it enters the objective (already weighted).
    pub task_loss: f64,
    pub refine_loss: f64,
    pub total: f64,
    /// Fraction of correlation entries masked by the threshold.
    pub masked_fraction: f64,
}

/// `total = task + lambda * refine`.
pub fn combined_loss(task: f64, refine: f64, lambda: f64) -> Result<LossBreakdown> {
    for (name, value) in [("task", task), ("refine", refine), ("lambda", lambda)] {
        if value.is_nan() || value < 0.0 {
            return Err(Error::NegativeLoss { name, value });
        }
    }
    Ok(LossBreakdown {
        task_loss: task,
        refine_loss: refine,
        total: task + lambda * refine,
        masked_fraction: 0.0,
    })
}

impl LossBreakdown {
    pub fn with_masked_fraction(mut self, fraction: f64) -> Self {
        self.masked_fraction = fraction;
        self
    }
}

/// Largest `|dL/dC|` over masked entries; zero when the mask is respected.
pub fn max_masked_gradient(
    c: ArrayView2<'_, f64>,
    grad_c: ArrayView2<'_, f64>,
    epsilon: f64,
) -> f64 {
    let mut worst = 0.0_f64;
    Zip::from(c).and(grad_c).for_each(|&c, &g| {
        if !is_active(c, epsilon) {
            worst = worst.max(g.abs());
        }
    });
    worst
}

//! Stand-ins for the downstream task loss. Anything differentiable with
//! respect to the frontend output can drive training.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub trait TaskLoss {
    fn loss(&self, output: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<f64>;

    /// `dL/d output`.
    fn grad(&self, output: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>)
        -> Result<Array2<f64>>;
}

/// Mean squared error over every entry of the output.
#[derive(Clone, Copy, Debug, Default)]
pub struct MseLoss;

fn check_shapes(output: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<()> {
    if output.nrows() != target.nrows() {
        return Err(Error::DimensionMismatch {
            context: "task target frames",
            expected: output.nrows(),
            actual: target.nrows(),
        });
    }
    if output.ncols() != target.ncols() {
        return Err(Error::DimensionMismatch {
            context: "task target dims",
            expected: output.ncols(),
            actual: target.ncols(),
        });
    }
    Ok(())
}

impl TaskLoss for MseLoss {
    fn loss(&self, output: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<f64> {
        check_shapes(output, target)?;
        let diff = &output - &target;
        Ok(diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64)
    }

    fn grad(
        &self,
        output: ArrayView2<'_, f64>,
        target: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        check_shapes(output, target)?;
        let n = output.len() as f64;
        Ok((&output - &target) * (2.0 / n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mse_value_and_grad() {
        let out = array![[1.0, 2.0], [3.0, 4.0]];
        let tgt = array![[1.0, 0.0], [3.0, 2.0]];
        assert_eq!(MseLoss.loss(out.view(), tgt.view()).unwrap(), 2.0);
        let g = MseLoss.grad(out.view(), tgt.view()).unwrap();
        assert_eq!(g, array![[0.0, 1.0], [0.0, 1.0]]);
        assert!(MseLoss.loss(out.view(), array![[1.0, 2.0]].view()).is_err());
    }
}

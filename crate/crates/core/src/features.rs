//! Feature streams and the per-utterance normalization and resolution
//! matching every fusion method builds on.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Columns whose standard deviation is at or below this fraction of their
/// largest magnitude are treated as constant.
const CONSTANT_COLUMN_RTOL: f64 = 1e-12;

/// A `T x K` feature stream: one row per time frame, one column per
/// feature dimension, sampled every `stride_ms` milliseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    data: Array2<f64>,
    stride_ms: f64,
}

impl FeatureMatrix {
    pub fn new(data: Array2<f64>, stride_ms: f64) -> Result<Self> {
        let (rows, cols) = data.dim();
        if rows == 0 || cols == 0 {
            return Err(Error::Empty { rows, cols });
        }
        if !(stride_ms.is_finite() && stride_ms > 0.0) {
            return Err(Error::InvalidStride(stride_ms));
        }
        check_finite(data.view())?;
        Ok(Self { data, stride_ms })
    }

    /// Builds a matrix from row-major values.
    pub fn from_rows(rows: usize, cols: usize, values: Vec<f64>, stride_ms: f64) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "row-major buffer length",
                expected: rows * cols,
                actual: values.len(),
            });
        }
        let data = Array2::from_shape_vec((rows, cols), values)
            .map_err(|_| Error::Empty { rows, cols })?;
        Self::new(data, stride_ms)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn stride_ms(&self) -> f64 {
        self.stride_ms
    }

    /// Number of time frames `T`.
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    /// Number of feature dimensions `K`.
    pub fn dims(&self) -> usize {
        self.data.ncols()
    }

    /// Keeps only the first `frames` rows.
    pub fn truncate(&self, frames: usize) -> Result<Self> {
        let frames = frames.min(self.frames());
        Self::new(self.data.slice(s![..frames, ..]).to_owned(), self.stride_ms)
    }
}

pub(crate) fn check_finite(x: ArrayView2<'_, f64>) -> Result<()> {
    match x.indexed_iter().find(|(_, v)| !v.is_finite()) {
        Some(((row, col), &value)) => Err(Error::NonFinite { row, col, value }),
        None => Ok(()),
    }
}

/// Subtracts the per-column mean over time.
pub fn center_columns(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty rows");
    &x - &mean
}

/// Vector-Jacobian product of [`center_columns`]. The Jacobian
/// `I - (1/T) 11^T` is symmetric, so this is centering the upstream gradient.
pub fn center_columns_backward(upstream: ArrayView2<'_, f64>) -> Array2<f64> {
    center_columns(upstream)
}

/// Result of a per-column z-score, keeping what the backward pass needs.
#[derive(Clone, Debug)]
pub struct ZScore {
    pub normalized: Array2<f64>,
    /// `1 / sigma` per column, or 0 for constant columns.
    pub inv_std: Array1<f64>,
}

/// Per-column z-score with population variance (divisor `T`). Constant
/// columns map to zeros.
pub fn zscore(x: ArrayView2<'_, f64>) -> ZScore {
    let centered = center_columns(x);
    let var = centered
        .mapv(|v| v * v)
        .mean_axis(Axis(0))
        .expect("non-empty rows");
    let scale = x.fold_axis(Axis(0), 0.0_f64, |m, v| m.max(v.abs()));
    let inv_std = Zip::from(&var).and(&scale).map_collect(|&var, &scale| {
        let std = var.sqrt();
        if std > 0.0 && std > CONSTANT_COLUMN_RTOL * scale {
            1.0 / std
        } else {
            0.0
        }
    });
    let normalized = &centered * &inv_std;
    ZScore {
        normalized,
        inv_std,
    }
}

/// Vector-Jacobian product of [`zscore`]:
/// `dx = (dz - mean(dz) - z * mean(dz * z)) / sigma`, per column.
pub fn zscore_backward(z: &ZScore, upstream: ArrayView2<'_, f64>) -> Array2<f64> {
    let mean_dz = upstream.mean_axis(Axis(0)).expect("non-empty rows");
    let mean_dz_z = (&upstream * &z.normalized)
        .mean_axis(Axis(0))
        .expect("non-empty rows");
    let mut grad = &upstream - &mean_dz;
    Zip::from(&mut grad)
        .and(&z.normalized)
        .and_broadcast(&mean_dz_z)
        .and_broadcast(&z.inv_std)
        .for_each(|g, &zv, &m, &inv| *g = inv * (*g - zv * m));
    grad
}

/// Mean normalization along time using this utterance's statistics.
pub fn mean_normalize(x: &FeatureMatrix) -> Result<FeatureMatrix> {
    FeatureMatrix::new(center_columns(x.view()), x.stride_ms)
}

/// Mean and variance normalization along time. Constant columns become zero.
pub fn mean_var_normalize(x: &FeatureMatrix) -> Result<FeatureMatrix> {
    if x.frames() < 2 {
        return Err(Error::InsufficientFrames(x.frames()));
    }
    FeatureMatrix::new(zscore(x.view()).normalized, x.stride_ms)
}

/// How frames are combined when lowering the frame rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    /// Mean of each window of `r` frames; a short trailing window is averaged
    /// over the frames it has.
    #[default]
    AveragePool,
    /// Keep the first frame of each window.
    Stride,
}

fn integer_ratio(from: f64, to: f64) -> Result<usize> {
    let ratio = to / from;
    let rounded = ratio.round();
    if rounded < 1.0 || (ratio - rounded).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::IncompatibleStrides { from, to });
    }
    Ok(rounded as usize)
}

/// Lowers the frame rate of `x` to `target_stride_ms` using average pooling.
pub fn downsample(x: &FeatureMatrix, target_stride_ms: f64) -> Result<FeatureMatrix> {
    downsample_with(x, target_stride_ms, Resample::AveragePool)
}

pub fn downsample_with(
    x: &FeatureMatrix,
    target_stride_ms: f64,
    mode: Resample,
) -> Result<FeatureMatrix> {
    if !(target_stride_ms.is_finite() && target_stride_ms > 0.0) {
        return Err(Error::InvalidStride(target_stride_ms));
    }
    let r = integer_ratio(x.stride_ms, target_stride_ms)?;
    if r == 1 {
        return Ok(x.clone());
    }
    let t = x.frames();
    let out_rows = t.div_ceil(r);
    let mut out = Array2::zeros((out_rows, x.dims()));
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let start = i * r;
        let end = ((i + 1) * r).min(t);
        match mode {
            Resample::AveragePool => {
                let window = x.data.slice(s![start..end, ..]);
                row.assign(&window.mean_axis(Axis(0)).expect("non-empty window"));
            }
            Resample::Stride => row.assign(&x.data.row(start)),
        }
    }
    FeatureMatrix::new(out, target_stride_ms)
}

/// Brings two streams to the coarser of their strides and truncates both to
/// the shorter length.
pub fn align_pair(u: &FeatureMatrix, v: &FeatureMatrix) -> Result<(FeatureMatrix, FeatureMatrix)> {
    align_pair_with(u, v, Resample::AveragePool)
}

pub fn align_pair_with(
    u: &FeatureMatrix,
    v: &FeatureMatrix,
    mode: Resample,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let target = u.stride_ms.max(v.stride_ms);
    let (u, v) = if u.stride_ms >= v.stride_ms {
        integer_ratio(v.stride_ms, u.stride_ms)?;
        (u.clone(), downsample_with(v, target, mode)?)
    } else {
        integer_ratio(u.stride_ms, v.stride_ms)?;
        (downsample_with(u, target, mode)?, v.clone())
    };
    let frames = u.frames().min(v.frames());
    Ok((u.truncate(frames)?, v.truncate(frames)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fm(data: Array2<f64>, stride: f64) -> FeatureMatrix {
        FeatureMatrix::new(data, stride).unwrap()
    }

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
            })
            .collect()
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        let err = FeatureMatrix::new(array![[1.0, f64::NAN]], 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 0, col: 1, .. }));
        assert!(FeatureMatrix::new(Array2::zeros((0, 3)), 10.0).is_err());
        assert!(FeatureMatrix::new(array![[1.0]], 0.0).is_err());
    }

    #[test]
    fn mean_normalize_examples() {
        let x = fm(array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]], 10.0);
        let y = mean_normalize(&x).unwrap();
        assert_eq!(y.data(), &array![[-1.0, 0.0], [0.0, 0.0], [1.0, 0.0]]);
        assert_eq!(y.stride_ms(), 10.0);
    }

    #[test]
    fn mean_normalize_random_columns_sum_to_zero() {
        let x = FeatureMatrix::from_rows(4, 3, lcg(3, 12), 10.0).unwrap();
        let y = mean_normalize(&x).unwrap();
        for j in 0..3 {
            // independent summation: Kahan-free reverse order
            let s: f64 = (0..4).rev().map(|i| y.data()[[i, j]]).sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn mean_var_normalize_examples() {
        let x = fm(array![[1.0, 2.0], [3.0, 2.0]], 10.0);
        let y = mean_var_normalize(&x).unwrap();
        assert_eq!(y.data(), &array![[-1.0, 0.0], [1.0, 0.0]]);
        let c = fm(array![[2.0], [2.0], [2.0]], 10.0);
        assert_eq!(
            mean_var_normalize(&c).unwrap().data(),
            &array![[0.0], [0.0], [0.0]]
        );
        let one = fm(array![[1.0, 2.0]], 10.0);
        assert!(matches!(
            mean_var_normalize(&one),
            Err(Error::InsufficientFrames(1))
        ));
    }

    #[test]
    fn mean_var_normalize_random_moments() {
        let x = FeatureMatrix::from_rows(8, 2, lcg(9, 16), 10.0).unwrap();
        let y = mean_var_normalize(&x).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = (0..8).map(|i| y.data()[[i, j]]).collect();
            let mean = col.iter().sum::<f64>() / 8.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn downsample_examples() {
        let x = fm(array![[1.0], [3.0], [5.0], [7.0]], 10.0);
        let y = downsample(&x, 20.0).unwrap();
        assert_eq!(y.data(), &array![[2.0], [6.0]]);
        assert_eq!(y.stride_ms(), 20.0);

        let x = fm(array![[1.0], [3.0], [5.0], [7.0], [11.0]], 10.0);
        let y = downsample(&x, 20.0).unwrap();
        assert_eq!(y.data(), &array![[2.0], [6.0], [11.0]]);

        assert_eq!(downsample(&x, 10.0).unwrap(), x);
        assert!(matches!(
            downsample(&x, 15.0),
            Err(Error::IncompatibleStrides { .. })
        ));
        assert!(downsample(&x, 5.0).is_err());
    }

    #[test]
    fn strided_downsample_keeps_window_heads() {
        let x = fm(array![[1.0], [3.0], [5.0], [7.0], [11.0]], 10.0);
        let y = downsample_with(&x, 20.0, Resample::Stride).unwrap();
        assert_eq!(y.data(), &array![[1.0], [5.0], [11.0]]);
    }

    #[test]
    fn align_pair_examples() {
        let u = FeatureMatrix::from_rows(100, 2, lcg(1, 200), 10.0).unwrap();
        let v = FeatureMatrix::from_rows(50, 3, lcg(2, 150), 20.0).unwrap();
        let (a, b) = align_pair(&u, &v).unwrap();
        assert_eq!((a.frames(), a.stride_ms()), (50, 20.0));
        assert_eq!((b.frames(), b.stride_ms()), (50, 20.0));
        // pooled row 7 is the mean of input rows 14 and 15
        let expect = (u.data()[[14, 1]] + u.data()[[15, 1]]) / 2.0;
        assert_eq!(a.data()[[7, 1]], expect);
        assert_eq!(&b, &v);

        let u = FeatureMatrix::from_rows(101, 2, lcg(1, 202), 10.0).unwrap();
        let (a, b) = align_pair(&v, &u).unwrap();
        assert_eq!(a.frames(), 50);
        assert_eq!(b.frames(), 50);
        assert_eq!(downsample(&u, 20.0).unwrap().frames(), 51);

        let same = FeatureMatrix::from_rows(5, 2, lcg(4, 10), 10.0).unwrap();
        let (a, b) = align_pair(&same, &same).unwrap();
        assert_eq!(a, same);
        assert_eq!(b, same);

        let odd = FeatureMatrix::from_rows(5, 2, lcg(4, 10), 15.0).unwrap();
        assert!(align_pair(&same, &odd).is_err());
    }

    #[test]
    fn zscore_backward_zero_for_constant_columns() {
        let x = array![[2.0, 1.0], [2.0, 4.0], [2.0, 0.0]];
        let z = zscore(x.view());
        let g = zscore_backward(&z, array![[1.0, 1.0], [2.0, -1.0], [0.5, 3.0]].view());
        assert!(g.column(0).iter().all(|&v| v == 0.0));
        assert!(g.column(1).iter().any(|&v| v != 0.0));
    }
}

//! Synthetic stream pairs with a prescribed cross-correlation.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`) seeded with
//! `seed_from_u64(seed)`. The first stream's columns are drawn from stream
//! 0 of the generator, the second stream's noise from stream 1, both in
//! column-major order, using the `rand_distr` standard normal sampler.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub frames: usize,
    pub dims_u: usize,
    pub dims_v: usize,
    /// Correlation between each paired column of the two streams.
    pub rho: f64,
    /// Columns `0..paired_dims` of both streams are correlated.
    pub paired_dims: usize,
    pub seed: u64,
    pub stride_ms_u: f64,
    pub stride_ms_v: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            frames: 10_000,
            dims_u: 32,
            dims_v: 32,
            rho: 0.65,
            paired_dims: 32,
            seed: 0,
            stride_ms_u: 20.0,
            stride_ms_v: 20.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.dims_u == 0 || self.dims_v == 0 {
            return Err(Error::InvalidConfig(
                "frames and dims must be positive".into(),
            ));
        }
        if self.rho.is_nan() || self.rho.abs() >= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "rho {} must satisfy |rho| < 1",
                self.rho
            )));
        }
        if self.paired_dims > self.dims_u.min(self.dims_v) {
            return Err(Error::InvalidConfig(format!(
                "paired_dims {} exceeds min({}, {})",
                self.paired_dims, self.dims_u, self.dims_v
            )));
        }
        for stride in [self.stride_ms_u, self.stride_ms_v] {
            if !(stride.is_finite() && stride > 0.0) {
                return Err(Error::InvalidStride(stride));
            }
        }
        Ok(())
    }
}

fn gaussian_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows, cols));
    for j in 0..cols {
        for i in 0..rows {
            out[[i, j]] = StandardNormal.sample(rng);
        }
    }
    out
}

/// Draws `(u, v)` where `v[:, d] = rho * u[:, d] + sqrt(1 - rho^2) * noise`
/// for paired columns and every other column is independent noise.
pub fn generate_pair(spec: &SynthSpec) -> Result<(FeatureMatrix, FeatureMatrix)> {
    spec.validate()?;
    let mut rng_u = ChaCha8Rng::seed_from_u64(spec.seed);
    rng_u.set_stream(0);
    let mut rng_v = ChaCha8Rng::seed_from_u64(spec.seed);
    rng_v.set_stream(1);

    let u = gaussian_columns(&mut rng_u, spec.frames, spec.dims_u);
    let mut v = gaussian_columns(&mut rng_v, spec.frames, spec.dims_v);
    let residual = (1.0 - spec.rho * spec.rho).sqrt();
    for d in 0..spec.paired_dims {
        let mut col = v.column_mut(d);
        col *= residual;
        col.scaled_add(spec.rho, &u.column(d));
    }
    Ok((
        FeatureMatrix::new(u, spec.stride_ms_u)?,
        FeatureMatrix::new(v, spec.stride_ms_v)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayView1;

    // Sample Pearson correlation computed directly from the definition.
    fn pearson(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
        let n = a.len() as f64;
        let ma = a.sum() / n;
        let mb = b.sum() / n;
        let mut sab = 0.0;
        let mut saa = 0.0;
        let mut sbb = 0.0;
        for (x, y) in a.iter().zip(b.iter()) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma) * (x - ma);
            sbb += (y - mb) * (y - mb);
        }
        sab / (saa * sbb).sqrt()
    }

    fn spec(rho: f64) -> SynthSpec {
        SynthSpec {
            frames: 10_000,
            dims_u: 6,
            dims_v: 5,
            rho,
            paired_dims: 3,
            seed: 42,
            ..Default::default()
        }
    }

    #[test]
    fn paired_dims_hit_target_correlation() {
        let (u, v) = generate_pair(&spec(0.65)).unwrap();
        for d in 0..3 {
            let r = pearson(u.data().column(d), v.data().column(d));
            assert!((r - 0.65).abs() < 0.03, "dim {d}: {r}");
        }
        for i in 0..6 {
            for j in 0..5 {
                if i == j && i < 3 {
                    continue;
                }
                let r = pearson(u.data().column(i), v.data().column(j));
                assert!(r.abs() < 0.05, "({i}, {j}): {r}");
            }
        }
    }

    #[test]
    fn zero_rho_is_independent() {
        let (u, v) = generate_pair(&spec(0.0)).unwrap();
        for d in 0..3 {
            assert!(pearson(u.data().column(d), v.data().column(d)).abs() < 0.05);
        }
    }

    #[test]
    fn same_seed_same_bits() {
        let a = generate_pair(&spec(0.5)).unwrap();
        let b = generate_pair(&spec(0.5)).unwrap();
        assert_eq!(a, b);
        let c = generate_pair(&SynthSpec {
            seed: 43,
            ..spec(0.5)
        })
        .unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_pair(&SynthSpec {
            rho: 1.0,
            ..spec(0.0)
        })
        .is_err());
        assert!(generate_pair(&SynthSpec {
            paired_dims: 6,
            ..spec(0.0)
        })
        .is_err());
        assert!(generate_pair(&SynthSpec {
            frames: 0,
            ..spec(0.0)
        })
        .is_err());
    }
}

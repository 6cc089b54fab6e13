//! The three ways of combining two feature streams (concatenation, linear
//! projection, weighted sum), the learnable affine maps that bring streams
//! to a common dimension, and their backward passes.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{center_columns, center_columns_backward, check_finite, FeatureMatrix};

/// Smallest `|alpha + beta|` for which the weighted sum is defined.
pub const GATE_DEGENERACY_TOL: f64 = 1e-8;

/// Learnable `x * W + b` with gradient accumulators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineProjection {
    weight: Array2<f64>,
    bias: Array1<f64>,
    #[serde(skip)]
    grad_weight: Array2<f64>,
    #[serde(skip)]
    grad_bias: Array1<f64>,
}

impl AffineProjection {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        let (in_dim, out_dim) = weight.dim();
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Empty {
                rows: in_dim,
                cols: out_dim,
            });
        }
        if bias.len() != out_dim {
            return Err(Error::DimensionMismatch {
                context: "affine bias length",
                expected: out_dim,
                actual: bias.len(),
            });
        }
        check_finite(weight.view())?;
        check_finite(bias.view().insert_axis(Axis(0)))?;
        Ok(Self {
            grad_weight: Array2::zeros(weight.raw_dim()),
            grad_bias: Array1::zeros(out_dim),
            weight,
            bias,
        })
    }

    /// Fan-in uniform initialization: weights in `[-1/sqrt(in), 1/sqrt(in))`,
    /// zero bias.
    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = Array2::from_shape_fn((in_dim, out_dim), |_| rng.random_range(-bound..bound));
        Self::new(weight, Array1::zeros(out_dim)).expect("initialized weights are finite")
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(Array2::eye(dim), Array1::zeros(dim)).expect("identity is valid")
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut Array1<f64> {
        &mut self.bias
    }

    pub fn grad_weight(&self) -> &Array2<f64> {
        &self.grad_weight
    }

    pub fn grad_bias(&self) -> &Array1<f64> {
        &self.grad_bias
    }

    /// Parameter and gradient buffers, weight then bias.
    pub(crate) fn params_and_grads(&mut self) -> [(&mut [f64], &[f64]); 2] {
        [
            (
                self.weight.as_slice_mut().expect("standard layout"),
                self.grad_weight.as_slice().expect("standard layout"),
            ),
            (
                self.bias.as_slice_mut().expect("standard layout"),
                self.grad_bias.as_slice().expect("standard layout"),
            ),
        ]
    }

    pub fn zero_grad(&mut self) {
        // also restores accumulator shapes after deserialization
        self.grad_weight = Array2::zeros(self.weight.raw_dim());
        self.grad_bias = Array1::zeros(self.bias.len());
    }

    pub fn grads_are_zero(&self) -> bool {
        self.grad_weight
            .iter()
            .chain(self.grad_bias.iter())
            .all(|&g| g == 0.0)
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                context: "affine input dims",
                expected: self.in_dim(),
                actual: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward_array(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        Ok(x.dot(&self.weight) + &self.bias)
    }

    pub fn forward(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        FeatureMatrix::new(self.forward_array(x.view())?, x.stride_ms())
    }

    /// Accumulates `dW += x^T g`, `db += sum_rows(g)` and returns `g W^T`.
    pub fn backward(
        &mut self,
        x: ArrayView2<'_, f64>,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        self.check_input(x)?;
        if upstream.nrows() != x.nrows() {
            return Err(Error::DimensionMismatch {
                context: "affine upstream rows",
                expected: x.nrows(),
                actual: upstream.nrows(),
            });
        }
        if upstream.ncols() != self.out_dim() {
            return Err(Error::DimensionMismatch {
                context: "affine upstream dims",
                expected: self.out_dim(),
                actual: upstream.ncols(),
            });
        }
        self.accumulate(x, upstream);
        Ok(upstream.dot(&self.weight.t()))
    }

    /// Parameter half of [`backward`](Self::backward), for inputs that need
    /// no gradient. Shapes must already be checked.
    fn accumulate(&mut self, x: ArrayView2<'_, f64>, upstream: ArrayView2<'_, f64>) {
        if self.grad_weight.dim() != self.weight.dim() {
            self.zero_grad();
        }
        self.grad_weight += &x.t().dot(&upstream);
        self.grad_bias += &upstream.sum_axis(Axis(0));
    }

    fn backward_params(
        &mut self,
        x: ArrayView2<'_, f64>,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<()> {
        self.check_input(x)?;
        if upstream.dim() != (x.nrows(), self.out_dim()) {
            return Err(Error::DimensionMismatch {
                context: "affine upstream dims",
                expected: self.out_dim(),
                actual: upstream.ncols(),
            });
        }
        self.accumulate(x, upstream);
        Ok(())
    }
}

/// The two learnable importance weights of the weighted-sum fusion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarGate {
    pub alpha: f64,
    pub beta: f64,
    #[serde(skip)]
    pub grad_alpha: f64,
    #[serde(skip)]
    pub grad_beta: f64,
}

impl Default for ScalarGate {
    fn default() -> Self {
        Self::new(0.5, 0.5)
    }
}

impl ScalarGate {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            grad_alpha: 0.0,
            grad_beta: 0.0,
        }
    }

    /// `alpha + beta`, or an error when it is too close to zero.
    pub fn normalizer(&self) -> Result<f64> {
        let sum = self.alpha + self.beta;
        if !sum.is_finite() || sum.abs() < GATE_DEGENERACY_TOL {
            return Err(Error::DegenerateGate(sum));
        }
        Ok(sum)
    }

    pub fn zero_grad(&mut self) {
        self.grad_alpha = 0.0;
        self.grad_beta = 0.0;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    Concat,
    LinearProjection,
    WeightedSum,
}

impl FusionMethod {
    /// Width of the fused stream for inputs of width `k1`, `k2` and common
    /// dimension `k`.
    pub fn fused_dim(self, k1: usize, k2: usize, k: usize) -> usize {
        match self {
            FusionMethod::Concat => k1 + k2,
            FusionMethod::LinearProjection => 2 * k,
            FusionMethod::WeightedSum => k,
        }
    }

    pub fn has_stream_projections(self) -> bool {
        !matches!(self, FusionMethod::Concat)
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMethod::Concat => "concat",
            FusionMethod::LinearProjection => "lp",
            FusionMethod::WeightedSum => "wsum",
        })
    }
}

impl FromStr for FusionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionMethod::Concat),
            "lp" | "linear_projection" => Ok(FusionMethod::LinearProjection),
            "wsum" | "weighted_sum" => Ok(FusionMethod::WeightedSum),
            other => Err(Error::InvalidConfig(format!(
                "unknown fusion method '{other}'"
            ))),
        }
    }
}

/// How the two stream projections start out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionInit {
    /// Each stream draws its own weights.
    #[default]
    Independent,
    /// The second stream starts as a copy of the first (requires equal input
    /// widths). Reproduces the highly correlated post-projection regime.
    Tied,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub method: FusionMethod,
    /// Common dimension `K` the stream projections map to.
    pub common_dim: usize,
    /// Width of the final projection fed to the downstream task.
    pub output_dim: usize,
    /// Refinement threshold: correlations with `|c| <= epsilon` are masked.
    pub epsilon: f64,
    /// Weight of the refinement loss in the total objective.
    pub lambda: f64,
    #[serde(default)]
    pub init: ProjectionInit,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            method: FusionMethod::LinearProjection,
            common_dim: 100,
            output_dim: 80,
            epsilon: 0.2,
            lambda: 0.3,
            init: ProjectionInit::Independent,
        }
    }
}

impl FusionConfig {
    /// Read-speech preset: `lambda = 0.3`, `epsilon = 0.2`.
    pub fn wsj() -> Self {
        Self::default()
    }

    /// Spontaneous-speech preset: `lambda = 0.005`, `epsilon = 0.6`.
    pub fn fsc() -> Self {
        Self {
            epsilon: 0.6,
            lambda: 0.005,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.common_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidConfig("dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidConfig(format!(
                "epsilon {} outside [0, 1]",
                self.epsilon
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda {} must be >= 0",
                self.lambda
            )));
        }
        Ok(())
    }
}

fn check_same_frames(u: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>) -> Result<()> {
    if u.nrows() != v.nrows() {
        return Err(Error::DimensionMismatch {
            context: "frame count of paired streams",
            expected: u.nrows(),
            actual: v.nrows(),
        });
    }
    Ok(())
}

fn check_pair(u: &FeatureMatrix, v: &FeatureMatrix) -> Result<()> {
    check_same_frames(u.view(), v.view())?;
    if u.stride_ms() != v.stride_ms() {
        return Err(Error::IncompatibleStrides {
            from: u.stride_ms(),
            to: v.stride_ms(),
        });
    }
    Ok(())
}

/// Mean-normalizes each stream and combines them. `ut` and `vt` are the
/// (possibly projected) streams; `gate` is only read for the weighted sum.
pub fn combine(
    method: FusionMethod,
    gate: &ScalarGate,
    ut: ArrayView2<'_, f64>,
    vt: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    check_same_frames(ut, vt)?;
    let nu = center_columns(ut);
    let nv = center_columns(vt);
    match method {
        FusionMethod::Concat | FusionMethod::LinearProjection => Ok(concatenate![Axis(1), nu, nv]),
        FusionMethod::WeightedSum => {
            if nu.ncols() != nv.ncols() {
                return Err(Error::DimensionMismatch {
                    context: "weighted sum stream dims",
                    expected: nu.ncols(),
                    actual: nv.ncols(),
                });
            }
            let s = gate.normalizer()?;
            Ok((nu * gate.alpha + nv * gate.beta) / s)
        }
    }
}

/// Backward of [`combine`]: returns gradients for `ut` and `vt` and, for the
/// weighted sum, accumulates into the gate.
pub fn combine_backward(
    method: FusionMethod,
    gate: &mut ScalarGate,
    ut: ArrayView2<'_, f64>,
    vt: ArrayView2<'_, f64>,
    upstream: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_same_frames(ut, vt)?;
    let expected = method.fused_dim(ut.ncols(), vt.ncols(), ut.ncols());
    if upstream.ncols() != expected || upstream.nrows() != ut.nrows() {
        return Err(Error::DimensionMismatch {
            context: "fusion upstream dims",
            expected,
            actual: upstream.ncols(),
        });
    }
    match method {
        FusionMethod::Concat | FusionMethod::LinearProjection => {
            let k1 = ut.ncols();
            Ok((
                center_columns_backward(upstream.slice(s![.., ..k1])),
                center_columns_backward(upstream.slice(s![.., k1..])),
            ))
        }
        FusionMethod::WeightedSum => {
            let s = gate.normalizer()?;
            let nu = center_columns(ut);
            let nv = center_columns(vt);
            let fused = (&nu * gate.alpha + &nv * gate.beta) / s;
            gate.grad_alpha += (&upstream * &(&nu - &fused)).sum() / s;
            gate.grad_beta += (&upstream * &(&nv - &fused)).sum() / s;
            Ok((
                center_columns_backward((&upstream * (gate.alpha / s)).view()),
                center_columns_backward((&upstream * (gate.beta / s)).view()),
            ))
        }
    }
}

/// `[norm(U), norm(V)]` with mean normalization.
pub fn fuse_concat(u: &FeatureMatrix, v: &FeatureMatrix) -> Result<FeatureMatrix> {
    check_pair(u, v)?;
    let fused = combine(
        FusionMethod::Concat,
        &ScalarGate::default(),
        u.view(),
        v.view(),
    )?;
    FeatureMatrix::new(fused, u.stride_ms())
}

pub fn fuse_concat_backward(
    u: &FeatureMatrix,
    v: &FeatureMatrix,
    upstream: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    combine_backward(
        FusionMethod::Concat,
        &mut ScalarGate::default(),
        u.view(),
        v.view(),
        upstream,
    )
}

fn project_pair(
    pu: &AffineProjection,
    pv: &AffineProjection,
    u: &FeatureMatrix,
    v: &FeatureMatrix,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_pair(u, v)?;
    if pu.out_dim() != pv.out_dim() {
        return Err(Error::DimensionMismatch {
            context: "common projection dim",
            expected: pu.out_dim(),
            actual: pv.out_dim(),
        });
    }
    Ok((pu.forward_array(u.view())?, pv.forward_array(v.view())?))
}

/// `[norm(U W1 + b1), norm(V W2 + b2)]`.
pub fn fuse_linear_projection(
    pu: &AffineProjection,
    pv: &AffineProjection,
    u: &FeatureMatrix,
    v: &FeatureMatrix,
) -> Result<FeatureMatrix> {
    let (ut, vt) = project_pair(pu, pv, u, v)?;
    let fused = combine(
        FusionMethod::LinearProjection,
        &ScalarGate::default(),
        ut.view(),
        vt.view(),
    )?;
    FeatureMatrix::new(fused, u.stride_ms())
}

/// Accumulates projection gradients and returns the input gradients.
pub fn fuse_linear_projection_backward(
    pu: &mut AffineProjection,
    pv: &mut AffineProjection,
    u: &FeatureMatrix,
    v: &FeatureMatrix,
    upstream: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (ut, vt) = project_pair(pu, pv, u, v)?;
    let (gut, gvt) = combine_backward(
        FusionMethod::LinearProjection,
        &mut ScalarGate::default(),
        ut.view(),
        vt.view(),
        upstream,
    )?;
    Ok((
        pu.backward(u.view(), gut.view())?,
        pv.backward(v.view(), gvt.view())?,
    ))
}

/// `(alpha * norm(U~) + beta * norm(V~)) / (alpha + beta)`.
pub fn fuse_weighted_sum(
    pu: &AffineProjection,
    pv: &AffineProjection,
    gate: &ScalarGate,
    u: &FeatureMatrix,
    v: &FeatureMatrix,
) -> Result<FeatureMatrix> {
    let (ut, vt) = project_pair(pu, pv, u, v)?;
    let fused = combine(FusionMethod::WeightedSum, gate, ut.view(), vt.view())?;
    FeatureMatrix::new(fused, u.stride_ms())
}

pub fn fuse_weighted_sum_backward(
    pu: &mut AffineProjection,
    pv: &mut AffineProjection,
    gate: &mut ScalarGate,
    u: &FeatureMatrix,
    v: &FeatureMatrix,
    upstream: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (ut, vt) = project_pair(pu, pv, u, v)?;
    let (gut, gvt) = combine_backward(
        FusionMethod::WeightedSum,
        gate,
        ut.view(),
        vt.view(),
        upstream,
    )?;
    Ok((
        pu.backward(u.view(), gut.view())?,
        pv.backward(v.view(), gvt.view())?,
    ))
}

/// Intermediate activations of one forward pass through a [`FusionModel`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Projected first stream (the raw stream for concatenation).
    pub ut: Array2<f64>,
    pub vt: Array2<f64>,
    pub fused: Array2<f64>,
    /// Output of the final projection.
    pub output: Array2<f64>,
}

/// Full trainable frontend: stream projections, gate and the final
/// projection to the downstream width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub method: FusionMethod,
    pub stream_u: Option<AffineProjection>,
    pub stream_v: Option<AffineProjection>,
    pub gate: ScalarGate,
    pub output: AffineProjection,
}

impl FusionModel {
    /// Fresh, seeded parameters for inputs of width `k1` and `k2`.
    pub fn init(k1: usize, k2: usize, cfg: &FusionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if k1 == 0 || k2 == 0 {
            return Err(Error::InvalidConfig("input dims must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (stream_u, stream_v) = if cfg.method.has_stream_projections() {
            let pu = AffineProjection::init(k1, cfg.common_dim, &mut rng);
            let pv = match cfg.init {
                ProjectionInit::Independent => AffineProjection::init(k2, cfg.common_dim, &mut rng),
                ProjectionInit::Tied if k1 == k2 => pu.clone(),
                ProjectionInit::Tied => {
                    return Err(Error::InvalidConfig(format!(
                        "tied initialization needs equal input dims, got {k1} and {k2}"
                    )))
                }
            };
            (Some(pu), Some(pv))
        } else {
            (None, None)
        };
        let fused = cfg.method.fused_dim(k1, k2, cfg.common_dim);
        let output = AffineProjection::init(fused, cfg.output_dim, &mut rng);
        Ok(Self {
            method: cfg.method,
            stream_u,
            stream_v,
            gate: ScalarGate::default(),
            output,
        })
    }

    pub fn fused_dim(&self) -> usize {
        self.output.in_dim()
    }

    pub fn zero_grad(&mut self) {
        for p in [&mut self.stream_u, &mut self.stream_v]
            .into_iter()
            .flatten()
        {
            p.zero_grad();
        }
        self.gate.zero_grad();
        self.output.zero_grad();
    }

    fn project(
        &self,
        u: ArrayView2<'_, f64>,
        v: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        match (&self.stream_u, &self.stream_v) {
            (Some(pu), Some(pv)) => Ok((pu.forward_array(u)?, pv.forward_array(v)?)),
            _ => Ok((u.to_owned(), v.to_owned())),
        }
    }

    /// Projected streams only; what the refinement loss looks at.
    pub fn project_streams(
        &self,
        u: ArrayView2<'_, f64>,
        v: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        check_same_frames(u, v)?;
        self.project(u, v)
    }

    pub fn forward(&self, u: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>) -> Result<ForwardPass> {
        let (ut, vt) = self.project_streams(u, v)?;
        self.forward_projected(ut, vt)
    }

    /// Fusion and output projection on already projected streams.
    pub fn forward_projected(&self, ut: Array2<f64>, vt: Array2<f64>) -> Result<ForwardPass> {
        let fused = combine(self.method, &self.gate, ut.view(), vt.view())?;
        let output = self.output.forward_array(fused.view())?;
        Ok(ForwardPass {
            ut,
            vt,
            fused,
            output,
        })
    }

    /// Task-loss channel: backpropagates `grad_output` through every
    /// trainable parameter.
    pub fn backward_task(
        &mut self,
        u: ArrayView2<'_, f64>,
        v: ArrayView2<'_, f64>,
        pass: &ForwardPass,
        grad_output: ArrayView2<'_, f64>,
    ) -> Result<()> {
        let grad_fused = self.output.backward(pass.fused.view(), grad_output)?;
        let (gut, gvt) = combine_backward(
            self.method,
            &mut self.gate,
            pass.ut.view(),
            pass.vt.view(),
            grad_fused.view(),
        )?;
        self.backward_streams(u, v, gut.view(), gvt.view())
    }

    /// Refinement-loss channel: reaches only the two stream projections.
    pub fn backward_refine(
        &mut self,
        u: ArrayView2<'_, f64>,
        v: ArrayView2<'_, f64>,
        grad_ut: ArrayView2<'_, f64>,
        grad_vt: ArrayView2<'_, f64>,
    ) -> Result<()> {
        self.backward_streams(u, v, grad_ut, grad_vt)
    }

    fn backward_streams(
        &mut self,
        u: ArrayView2<'_, f64>,
        v: ArrayView2<'_, f64>,
        grad_ut: ArrayView2<'_, f64>,
        grad_vt: ArrayView2<'_, f64>,
    ) -> Result<()> {
        if let (Some(pu), Some(pv)) = (&mut self.stream_u, &mut self.stream_v) {
            // raw inputs are frozen; only parameter gradients are needed
            pu.backward_params(u, grad_ut)?;
            pv.backward_params(v, grad_vt)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut model: FusionModel = serde_json::from_str(text)?;
        let mut projections = vec![model.output.clone()];
        projections.extend(model.stream_u.iter().cloned());
        projections.extend(model.stream_v.iter().cloned());
        for p in projections {
            AffineProjection::new(p.weight, p.bias)?;
        }
        if model.method.has_stream_projections()
            != (model.stream_u.is_some() && model.stream_v.is_some())
        {
            return Err(Error::InvalidConfig(format!(
                "parameter file for '{}' has mismatched stream projections",
                model.method
            )));
        }
        model.zero_grad();
        Ok(model)
    }
}

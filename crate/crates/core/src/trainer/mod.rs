//! Gradient-descent training of the fusion frontend.
//!
//! Two gradient channels are kept apart: the task loss reaches every
//! trainable parameter, while the refinement loss only reaches the two
//! stream projections. The final output projection never sees it.

mod optim;
mod schedule;

pub use optim::{AdamParams, Optimizer, OptimizerKind};
pub use schedule::lr_schedule;

use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::fusion::{FusionConfig, FusionMethod, FusionModel};
use crate::refine::{
    combined_loss, correlate, is_active, max_masked_gradient, refine_loss_array,
    refine_loss_backward_arrays, CorrelationMatrix, LossBreakdown,
};
use crate::task_loss::{MseLoss, TaskLoss};

/// One training example: two aligned streams and the task target for the
/// frontend output.
#[derive(Clone, Debug)]
pub struct Example {
    pub u: FeatureMatrix,
    pub v: FeatureMatrix,
    pub target: Array2<f64>,
}

impl Example {
    pub fn new(u: FeatureMatrix, v: FeatureMatrix, target: Array2<f64>) -> Self {
        Self { u, v, target }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Peak learning rate.
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Multiplier on the task loss; 0 trains on the refinement loss alone.
    pub task_weight: f64,
    /// Reshuffle the example order every epoch (seeded).
    pub shuffle: bool,
    /// Compare analytic and finite-difference gradients on the first step.
    pub fd_audit: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2_000,
            learning_rate: 0.002,
            warmup_steps: 100,
            batch_size: 1,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            task_weight: 1.0,
            shuffle: false,
            fd_audit: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be > 0",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if !(self.task_weight >= 0.0 && self.task_weight.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "task weight {} must be >= 0",
                self.task_weight
            )));
        }
        Ok(())
    }

    /// Learning rate used for the zero-based optimizer step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        lr_schedule(step + 1, self.learning_rate, self.warmup_steps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
    /// Largest `|c_ij|` over the batch at this step, before the update.
    pub max_abs_corr: f64,
}

/// Mask audit at one step: every masked correlation entry must carry an
/// exactly zero loss gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskAudit {
    pub step: usize,
    pub masked_entries: usize,
    /// Largest `|dL/dc_ij|` over masked entries (must be 0).
    pub max_masked_grad: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<StepRecord>,
    /// Correlation of the raw streams of the first example, when their widths
    /// match.
    pub raw_correlation: Option<CorrelationMatrix>,
    /// Projected streams of the first example before training.
    pub initial_correlation: CorrelationMatrix,
    /// Projected streams of the first example after training.
    pub final_correlation: CorrelationMatrix,
    pub max_abs_corr_initial: f64,
    pub max_abs_corr_final: f64,
    pub mask_audits: Vec<MaskAudit>,
    /// Largest relative error of the first-step finite-difference audit.
    pub fd_audit_max_rel_err: Option<f64>,
    /// Whether the output projection's accumulators were exactly zero after
    /// every backward pass.
    pub output_grads_always_zero: bool,
    pub model: FusionModel,
    pub wall_time_ms: u128,
}

fn validate_data(data: &[Example], fusion: &FusionConfig) -> Result<(usize, usize)> {
    let first = data.first().ok_or(Error::EmptyBatch)?;
    let (k1, k2) = (first.u.dims(), first.v.dims());
    for ex in data {
        let checks = [
            ("first stream dims", k1, ex.u.dims()),
            ("second stream dims", k2, ex.v.dims()),
            ("paired stream frames", ex.u.frames(), ex.v.frames()),
            ("target frames", ex.u.frames(), ex.target.nrows()),
            ("target dims", fusion.output_dim, ex.target.ncols()),
        ];
        for (context, expected, actual) in checks {
            if expected != actual {
                return Err(Error::DimensionMismatch {
                    context,
                    expected,
                    actual,
                });
            }
        }
    }
    Ok((k1, k2))
}

fn correlation_of(model: &FusionModel, ex: &Example) -> Result<CorrelationMatrix> {
    let (ut, vt) = model.project_streams(ex.u.view(), ex.v.view())?;
    CorrelationMatrix::new(correlate(ut.view(), vt.view())?.c)
}

/// Objective of `model` on a batch, forward only.
fn objective(
    model: &FusionModel,
    batch: &[&Example],
    fusion: &FusionConfig,
    task_weight: f64,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut total = 0.0;
    let mut corrs = Vec::with_capacity(batch.len());
    for ex in batch {
        let pass = model.forward(ex.u.view(), ex.v.view())?;
        let c = correlate(pass.ut.view(), pass.vt.view())?.c;
        if task_weight > 0.0 {
            total += task_weight * MseLoss.loss(pass.output.view(), ex.target.view())?;
        }
        if fusion.lambda > 0.0 {
            total += fusion.lambda * refine_loss_array(c.view(), fusion.epsilon);
        }
        corrs.push(c);
    }
    Ok((total / batch.len() as f64, corrs))
}

fn active_mask(corrs: &[Array2<f64>], epsilon: f64) -> Vec<bool> {
    corrs
        .iter()
        .flat_map(|c| c.iter().map(move |&v| is_active(v, epsilon)))
        .collect()
}

/// Central differences on a sample of parameters against the accumulated
/// analytic gradient. Coordinates whose perturbation flips a mask entry are
/// skipped: the loss is discontinuous there.
fn finite_difference_audit(
    model: &FusionModel,
    batch: &[&Example],
    fusion: &FusionConfig,
    task_weight: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    const H: f64 = 1e-4;
    const SAMPLES: usize = 6;
    let (_, base_corrs) = objective(model, batch, fusion, task_weight)?;
    let base_mask = active_mask(&base_corrs, fusion.epsilon);

    // (selector, flat index, analytic gradient)
    let mut probes: Vec<(usize, usize, f64)> = Vec::new();
    let mut sample = |which: usize, grads: &[f64], rng: &mut ChaCha8Rng| {
        let mut idx: Vec<usize> = (0..grads.len()).collect();
        idx.shuffle(rng);
        for &i in idx.iter().take(SAMPLES) {
            probes.push((which, i, grads[i]));
        }
    };
    if let (Some(pu), Some(pv)) = (&model.stream_u, &model.stream_v) {
        sample(0, pu.grad_weight().as_slice().unwrap(), rng);
        sample(1, pv.grad_weight().as_slice().unwrap(), rng);
    }
    sample(2, model.output.grad_weight().as_slice().unwrap(), rng);
    if model.method == FusionMethod::WeightedSum {
        probes.push((3, 0, model.gate.grad_alpha));
        probes.push((3, 1, model.gate.grad_beta));
    }

    let perturbed = |which: usize, i: usize, delta: f64| -> Result<(f64, Vec<bool>)> {
        let mut m = model.clone();
        match which {
            0 => {
                m.stream_u
                    .as_mut()
                    .unwrap()
                    .weight_mut()
                    .as_slice_mut()
                    .unwrap()[i] += delta
            }
            1 => {
                m.stream_v
                    .as_mut()
                    .unwrap()
                    .weight_mut()
                    .as_slice_mut()
                    .unwrap()[i] += delta
            }
            2 => m.output.weight_mut().as_slice_mut().unwrap()[i] += delta,
            _ if i == 0 => m.gate.alpha += delta,
            _ => m.gate.beta += delta,
        }
        let (loss, corrs) = objective(&m, batch, fusion, task_weight)?;
        Ok((loss, active_mask(&corrs, fusion.epsilon)))
    };

    let mut worst = 0.0_f64;
    for (which, i, analytic) in probes {
        let (plus, mask_p) = perturbed(which, i, H)?;
        let (minus, mask_m) = perturbed(which, i, -H)?;
        if mask_p != base_mask || mask_m != base_mask {
            continue;
        }
        let numeric = (plus - minus) / (2.0 * H);
        worst = worst.max(crate::gradcheck::relative_error(analytic, numeric));
    }
    Ok(worst)
}

fn apply_update(model: &mut FusionModel, opt: &mut Optimizer, lr: f64) -> Result<()> {
    opt.begin_step();
    let mut slot = 0;
    for proj in [&mut model.stream_u, &mut model.stream_v]
        .into_iter()
        .flatten()
    {
        for (params, grads) in proj.params_and_grads() {
            opt.update(slot, params, grads, lr);
            slot += 1;
        }
    }
    if model.method == FusionMethod::WeightedSum {
        let mut gate = [model.gate.alpha, model.gate.beta];
        opt.update(
            slot,
            &mut gate,
            &[model.gate.grad_alpha, model.gate.grad_beta],
            lr,
        );
        model.gate.alpha = gate[0];
        model.gate.beta = gate[1];
        model.gate.normalizer()?;
    }
    slot += 1;
    for (params, grads) in model.output.params_and_grads() {
        opt.update(slot, params, grads, lr);
        slot += 1;
    }
    Ok(())
}

/// Trains a freshly initialized frontend (seeded by `train.seed`) on `data`.
pub fn train(data: &[Example], fusion: &FusionConfig, train: &TrainConfig) -> Result<TrainReport> {
    let model = {
        fusion.validate()?;
        train.validate()?;
        let (k1, k2) = validate_data(data, fusion)?;
        FusionModel::init(k1, k2, fusion, train.seed)?
    };
    train_model(model, data, fusion, train)
}

/// Trains an existing model in place of a fresh one.
pub fn train_model(
    mut model: FusionModel,
    data: &[Example],
    fusion: &FusionConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let started = Instant::now();
    fusion.validate()?;
    cfg.validate()?;
    validate_data(data, fusion)?;
    if !model.method.has_stream_projections() {
        return Err(Error::InvalidConfig(
            "training needs stream projections; use lp or wsum".into(),
        ));
    }
    let lambda = fusion.lambda;
    let epsilon = fusion.epsilon;

    let first = &data[0];
    let raw_correlation = if first.u.dims() == first.v.dims() {
        Some(CorrelationMatrix::new(
            correlate(first.u.view(), first.v.view())?.c,
        )?)
    } else {
        None
    };
    let initial_correlation = correlation_of(&model, first)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = 0;

    let audit_steps = [0, cfg.steps / 2, cfg.steps - 1];
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut history = Vec::with_capacity(cfg.steps);
    let mut mask_audits = Vec::new();
    let mut fd_audit_max_rel_err = None;
    let mut output_grads_always_zero = true;

    for step in 0..cfg.steps {
        model.zero_grad();
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == 0 && cfg.shuffle {
                order.shuffle(&mut rng);
            }
            batch.push(&data[order[cursor]]);
            cursor = (cursor + 1) % order.len();
        }
        let scale = 1.0 / batch.len() as f64;

        let mut task_sum = 0.0;
        let mut refine_sum = 0.0;
        let mut masked_sum = 0.0;
        let mut max_abs_corr = 0.0_f64;
        let mut audit = MaskAudit {
            step,
            masked_entries: 0,
            max_masked_grad: 0.0,
        };

        for ex in &batch {
            let (u, v) = (ex.u.view(), ex.v.view());
            let (ut, vt) = model.project_streams(u, v)?;

            let (refine, c) = if lambda > 0.0 {
                let rg = refine_loss_backward_arrays(ut.view(), vt.view(), epsilon)?;
                model.backward_refine(
                    u,
                    v,
                    (&rg.grad_u * (lambda * scale)).view(),
                    (&rg.grad_v * (lambda * scale)).view(),
                )?;
                audit.max_masked_grad = audit.max_masked_grad.max(max_masked_gradient(
                    rg.correlation.view(),
                    rg.grad_c.view(),
                    epsilon,
                ));
                (rg.loss, rg.correlation)
            } else {
                let c = correlate(ut.view(), vt.view())?.c;
                (refine_loss_array(c.view(), epsilon), c)
            };
            audit.masked_entries += c.iter().filter(|v| !is_active(**v, epsilon)).count();
            max_abs_corr = c.iter().fold(max_abs_corr, |m, x| m.max(x.abs()));
            masked_sum += masked_fraction(c.view(), epsilon);
            refine_sum += refine;

            // the task head is skipped entirely when its weight is zero
            if cfg.task_weight > 0.0 {
                let pass = model.forward_projected(ut, vt)?;
                let task = MseLoss.loss(pass.output.view(), ex.target.view())?;
                let grad = MseLoss.grad(pass.output.view(), ex.target.view())?;
                model.backward_task(u, v, &pass, (grad * (cfg.task_weight * scale)).view())?;
                task_sum += cfg.task_weight * task;
            }
        }

        let task_loss = task_sum * scale;
        let refine_loss = refine_sum * scale;
        let total = task_loss + lambda * refine_loss;
        if !total.is_finite() {
            return Err(Error::Diverged { step, loss: total });
        }
        let loss =
            combined_loss(task_loss, refine_loss, lambda)?.with_masked_fraction(masked_sum * scale);

        output_grads_always_zero &= model.output.grads_are_zero();
        if audit_steps.contains(&step)
            && mask_audits.last().map(|a: &MaskAudit| a.step) != Some(step)
        {
            mask_audits.push(audit);
        }
        if step == 0 && cfg.fd_audit {
            fd_audit_max_rel_err = Some(finite_difference_audit(
                &model,
                &batch,
                fusion,
                cfg.task_weight,
                &mut rng,
            )?);
        }

        let lr = cfg.lr_at(step);
        history.push(StepRecord {
            step,
            loss,
            lr,
            max_abs_corr,
        });
        apply_update(&mut model, &mut optimizer, lr)?;
    }

    let final_correlation = correlation_of(&model, first)?;
    model.zero_grad();
    Ok(TrainReport {
        history,
        raw_correlation,
        max_abs_corr_initial: initial_correlation.max_abs(),
        max_abs_corr_final: final_correlation.max_abs(),
        initial_correlation,
        final_correlation,
        mask_audits,
        fd_audit_max_rel_err,
        output_grads_always_zero,
        model,
        wall_time_ms: started.elapsed().as_millis(),
    })
}

fn masked_fraction(c: ArrayView2<'_, f64>, epsilon: f64) -> f64 {
    c.iter().filter(|v| !is_active(**v, epsilon)).count() as f64 / c.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_pair, SynthSpec};

    fn small_data(seed: u64, output_dim: usize) -> Vec<Example> {
        let (u, v) = generate_pair(&SynthSpec {
            frames: 200,
            dims_u: 6,
            dims_v: 5,
            rho: 0.7,
            paired_dims: 4,
            seed,
            ..Default::default()
        })
        .unwrap();
        let target = Array2::from_shape_fn((200, output_dim), |(i, j)| {
            u.data()[[i, j % 6]] - 0.5 * v.data()[[i, j % 5]]
        });
        vec![Example::new(u, v, target)]
    }

    fn small_fusion(method: FusionMethod) -> FusionConfig {
        FusionConfig {
            method,
            common_dim: 4,
            output_dim: 3,
            ..Default::default()
        }
    }

    #[test]
    fn rejects_bad_configs_and_data() {
        let data = small_data(1, 3);
        let fusion = small_fusion(FusionMethod::LinearProjection);
        let bad = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(train(&data, &fusion, &bad).is_err());
        assert!(matches!(
            train(&[], &fusion, &TrainConfig::default()),
            Err(Error::EmptyBatch)
        ));
        let wrong_target = small_data(1, 2);
        assert!(train(&wrong_target, &fusion, &TrainConfig::default()).is_err());
        let concat = small_fusion(FusionMethod::Concat);
        assert!(train(&data, &concat, &TrainConfig::default()).is_err());
    }

    #[test]
    fn history_and_audits_are_recorded() {
        let data = small_data(2, 3);
        let cfg = TrainConfig {
            steps: 20,
            learning_rate: 0.01,
            warmup_steps: 5,
            fd_audit: true,
            ..Default::default()
        };
        let report = train(&data, &small_fusion(FusionMethod::WeightedSum), &cfg).unwrap();
        assert_eq!(report.history.len(), 20);
        let steps: Vec<usize> = report.mask_audits.iter().map(|a| a.step).collect();
        assert_eq!(steps, vec![0, 10, 19]);
        assert!(report.fd_audit_max_rel_err.unwrap() < 1e-4);
        assert_eq!(
            report.max_abs_corr_final,
            report.final_correlation.max_abs()
        );
        for rec in &report.history {
            let l = rec.loss;
            assert!((l.total - (l.task_loss + 0.3 * l.refine_loss)).abs() < 1e-12);
            assert_eq!(rec.lr, cfg.lr_at(rec.step));
        }
    }

    #[test]
    fn diverges_with_huge_learning_rate() {
        let data = small_data(3, 3);
        let cfg = TrainConfig {
            steps: 200,
            learning_rate: 1e200,
            warmup_steps: 0,
            optimizer: OptimizerKind::Sgd,
            ..Default::default()
        };
        let err = train(&data, &small_fusion(FusionMethod::LinearProjection), &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }
}

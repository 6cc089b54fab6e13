//! Finite-difference audit of every analytic backward pass.
//!
//! Each check builds a scalar `L = sum(R * f(x))` with a fixed random `R`
//! for matrix-valued `f`, perturbs every input coordinate by `+-h`, and
//! compares the central difference with the analytic gradient. Only forward
//! functions are evaluated on the numeric side.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::features::{center_columns, center_columns_backward, zscore, zscore_backward};
use crate::fusion::{combine, combine_backward, AffineProjection, FusionMethod, ScalarGate};
use crate::refine::{
    combined_loss, correlate, correlation_backward, is_active, refine_loss_array,
    refine_loss_backward_arrays,
};
use crate::task_loss::{MseLoss, TaskLoss};

pub const FD_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;
/// Correlations within this distance of the threshold are not probed.
pub const THRESHOLD_BAND: f64 = 1e-6;
const TRIALS: usize = 4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditEntry {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed the threshold.
    pub skipped: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuditReport {
    pub entries: Vec<AuditEntry>,
}

impl AuditReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_err))
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.entries
            .iter()
            .all(|e| e.checked > 0 && e.max_rel_err < tolerance)
    }
}

/// Scalar value plus the threshold mask it was evaluated under.
type Eval = (f64, Vec<bool>);

struct Probe {
    max_rel_err: f64,
    checked: usize,
    skipped: usize,
}

impl Probe {
    fn new() -> Self {
        Self {
            max_rel_err: 0.0,
            checked: 0,
            skipped: 0,
        }
    }

    /// Central differences of `f` around every coordinate of `x`.
    fn run(
        &mut self,
        x: &[f64],
        analytic: &[f64],
        f: &dyn Fn(&[f64]) -> Result<Eval>,
    ) -> Result<()> {
        let (_, base_mask) = f(x)?;
        let mut buf = x.to_vec();
        for i in 0..x.len() {
            buf[i] = x[i] + FD_STEP;
            let (plus, mask_p) = f(&buf)?;
            buf[i] = x[i] - FD_STEP;
            let (minus, mask_m) = f(&buf)?;
            buf[i] = x[i];
            if mask_p != base_mask || mask_m != base_mask {
                self.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            self.max_rel_err = self.max_rel_err.max(relative_error(analytic[i], numeric));
            self.checked += 1;
        }
        Ok(())
    }

    fn finish(self, name: &'static str) -> AuditEntry {
        AuditEntry {
            name,
            max_rel_err: self.max_rel_err,
            checked: self.checked,
            skipped: self.skipped,
        }
    }
}

struct Shapes {
    frames: usize,
    k1: usize,
    k2: usize,
    k: usize,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn random_shapes(rng: &mut ChaCha8Rng) -> Shapes {
    Shapes {
        frames: rng.random_range(3..=8),
        k1: rng.random_range(1..=6),
        k2: rng.random_range(1..=6),
        k: rng.random_range(1..=6),
    }
}

fn to_matrix(flat: &[f64], rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), flat.to_vec()).expect("shape matches")
}

fn weighted_sum(r: &Array2<f64>, y: &Array2<f64>) -> f64 {
    (r * y).sum()
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn smooth(v: f64) -> Result<Eval> {
    Ok((v, Vec::new()))
}

fn check_affine(rng: &mut ChaCha8Rng, probe: &mut Probe) -> Result<()> {
    let s = random_shapes(rng);
    let x = random_matrix(rng, s.frames, s.k1);
    let w = random_matrix(rng, s.k1, s.k);
    let b = random_matrix(rng, 1, s.k).row(0).to_owned();
    let r = random_matrix(rng, s.frames, s.k);
    let mut p = AffineProjection::new(w.clone(), b.clone())?;
    let gx = p.backward(x.view(), r.view())?;

    let (t, k1, k) = (s.frames, s.k1, s.k);
    let fx = |xs: &[f64]| {
        let p = AffineProjection::new(w.clone(), b.clone())?;
        smooth(weighted_sum(
            &r,
            &p.forward_array(to_matrix(xs, t, k1).view())?,
        ))
    };
    probe.run(&flat(&x), &flat(&gx), &fx)?;
    let fw = |ws: &[f64]| {
        let p = AffineProjection::new(to_matrix(ws, k1, k), b.clone())?;
        smooth(weighted_sum(&r, &p.forward_array(x.view())?))
    };
    probe.run(&flat(&w), &flat(p.grad_weight()), &fw)?;
    let fb = |bs: &[f64]| {
        let p = AffineProjection::new(w.clone(), Array1::from(bs.to_vec()))?;
        smooth(weighted_sum(&r, &p.forward_array(x.view())?))
    };
    probe.run(
        b.as_slice().unwrap(),
        p.grad_bias().as_slice().unwrap(),
        &fb,
    )
}

fn check_mean_normalize(rng: &mut ChaCha8Rng, probe: &mut Probe) -> Result<()> {
    let s = random_shapes(rng);
    let x = random_matrix(rng, s.frames, s.k1);
    let r = random_matrix(rng, s.frames, s.k1);
    let g = center_columns_backward(r.view());
    let f = |xs: &[f64]| {
        smooth(weighted_sum(
            &r,
            &center_columns(to_matrix(xs, s.frames, s.k1).view()),
        ))
    };
    probe.run(&flat(&x), &flat(&g), &f)
}

fn check_mean_var_normalize(rng: &mut ChaCha8Rng, probe: &mut Probe) -> Result<()> {
    let s = random_shapes(rng);
    let x = random_matrix(rng, s.frames, s.k1);
    let r = random_matrix(rng, s.frames, s.k1);
    let g = zscore_backward(&zscore(x.view()), r.view());
    let f = |xs: &[f64]| {
        smooth(weighted_sum(
            &r,
            &zscore(to_matrix(xs, s.frames, s.k1).view()).normalized,
        ))
    };
    probe.run(&flat(&x), &flat(&g), &f)
}

fn check_fusion(method: FusionMethod, rng: &mut ChaCha8Rng, probe: &mut Probe) -> Result<()> {
    let s = random_shapes(rng);
    let t = s.frames;
    let (k1, k2, k) = (s.k1, s.k2, s.k);
    let u = random_matrix(rng, t, k1);
    let v = random_matrix(rng, t, k2);
    let (pu, pv) = if method.has_stream_projections() {
        (
            Some(AffineProjection::new(
                random_matrix(rng, k1, k),
                random_matrix(rng, 1, k).row(0).to_owned(),
            )?),
            Some(AffineProjection::new(
                random_matrix(rng, k2, k),
                random_matrix(rng, 1, k).row(0).to_owned(),
            )?),
        )
    } else {
        (None, None)
    };
    let gate = ScalarGate::new(rng.random_range(0.2..1.0), rng.random_range(0.2..1.0));

    let forward = |u: &Array2<f64>,
                   v: &Array2<f64>,
                   pu: &Option<AffineProjection>,
                   pv: &Option<AffineProjection>,
                   gate: &ScalarGate|
     -> Result<Array2<f64>> {
        let (ut, vt) = match (pu, pv) {
            (Some(pu), Some(pv)) => (pu.forward_array(u.view())?, pv.forward_array(v.view())?),
            _ => (u.clone(), v.clone()),
        };
        combine(method, gate, ut.view(), vt.view())
    };
    let out = forward(&u, &v, &pu, &pv, &gate)?;
    let r = random_matrix(rng, t, out.ncols());

    // analytic pass
    let mut gpu = pu.clone();
    let mut gpv = pv.clone();
    let mut ggate = gate;
    let (ut, vt) = match (&pu, &pv) {
        (Some(a), Some(b)) => (a.forward_array(u.view())?, b.forward_array(v.view())?),
        _ => (u.clone(), v.clone()),
    };
    let (gut, gvt) = combine_backward(method, &mut ggate, ut.view(), vt.view(), r.view())?;
    let (gu, gv) = match (&mut gpu, &mut gpv) {
        (Some(a), Some(b)) => (
            a.backward(u.view(), gut.view())?,
            b.backward(v.view(), gvt.view())?,
        ),
        _ => (gut, gvt),
    };

    let fu = |xs: &[f64]| {
        smooth(weighted_sum(
            &r,
            &forward(&to_matrix(xs, t, k1), &v, &pu, &pv, &gate)?,
        ))
    };
    probe.run(&flat(&u), &flat(&gu), &fu)?;
    let fv = |xs: &[f64]| {
        smooth(weighted_sum(
            &r,
            &forward(&u, &to_matrix(xs, t, k2), &pu, &pv, &gate)?,
        ))
    };
    probe.run(&flat(&v), &flat(&gv), &fv)?;

    if let (Some(pu0), Some(pv0), Some(gpu), Some(gpv)) = (&pu, &pv, &gpu, &gpv) {
        let fwu = |ws: &[f64]| {
            let p = AffineProjection::new(to_matrix(ws, k1, k), pu0.bias().clone())?;
            smooth(weighted_sum(&r, &forward(&u, &v, &Some(p), &pv, &gate)?))
        };
        probe.run(&flat(pu0.weight()), &flat(gpu.grad_weight()), &fwu)?;
        let fwv = |ws: &[f64]| {
            let p = AffineProjection::new(to_matrix(ws, k2, k), pv0.bias().clone())?;
            smooth(weighted_sum(&r, &forward(&u, &v, &pu, &Some(p), &gate)?))
        };
        probe.run(&flat(pv0.weight()), &flat(gpv.grad_weight()), &fwv)?;
        let fbu = |bs: &[f64]| {
            let p = AffineProjection::new(pu0.weight().clone(), Array1::from(bs.to_vec()))?;
            smooth(weighted_sum(&r, &forward(&u, &v, &Some(p), &pv, &gate)?))
        };
        probe.run(
            pu0.bias().as_slice().unwrap(),
            gpu.grad_bias().as_slice().unwrap(),
            &fbu,
        )?;
    }
    if method == FusionMethod::WeightedSum {
        let fg = |ab: &[f64]| {
            smooth(weighted_sum(
                &r,
                &forward(&u, &v, &pu, &pv, &ScalarGate::new(ab[0], ab[1]))?,
            ))
        };
        probe.run(
            &[gate.alpha, gate.beta],
            &[ggate.grad_alpha, ggate.grad_beta],
            &fg,
        )?;
    }
    Ok(())
}

fn check_cross_correlation(rng: &mut ChaCha8Rng, probe: &mut Probe) -> Result<()> {
    let s = random_shapes(rng);
    let (t, k) = (s.frames, s.k);
    let u = random_matrix(rng, t, k);
    let v = random_matrix(rng, t, k);
    let r = random_matrix(rng, k, k);
    let (gu, gv) = correlation_backward(&correlate(u.view(), v.view())?, r.view())?;
    let fu = |xs: &[f64]| {
        smooth(weighted_sum(
            &r,
            &correlate(to_matrix(xs, t, k).view(), v.view())?.c,
        ))
    };
    probe.run(&flat(&u), &flat(&gu), &fu)?;
    let fv = |xs: &[f64]| {
        smooth(weighted_sum(
            &r,
            &correlate(u.view(), to_matrix(xs, t, k).view())?.c,
        ))
    };
    probe.run(&flat(&v), &flat(&gv), &fv)
}

fn refine_eval(u: &Array2<f64>, v: &Array2<f64>, epsilon: f64) -> Result<Eval> {
    let c = correlate(u.view(), v.view())?.c;
    let mask = c.iter().map(|&x| is_active(x, epsilon)).collect();
    Ok((refine_loss_array(c.view(), epsilon), mask))
}

fn check_refine_loss(rng: &mut ChaCha8Rng, probe: &mut Probe) -> Result<()> {
    let s = random_shapes(rng);
    let (t, k) = (s.frames, s.k);
    let epsilon = rng.random_range(0.0..0.6);
    let u = random_matrix(rng, t, k);
    let v = random_matrix(rng, t, k);
    let g = refine_loss_backward_arrays(u.view(), v.view(), epsilon)?;
    if g.correlation
        .iter()
        .any(|c| (c.abs() - epsilon).abs() < THRESHOLD_BAND)
    {
        probe.skipped += u.len() + v.len();
        return Ok(());
    }
    let fu = |xs: &[f64]| refine_eval(&to_matrix(xs, t, k), &v, epsilon);
    probe.run(&flat(&u), &flat(&g.grad_u), &fu)?;
    let fv = |xs: &[f64]| refine_eval(&u, &to_matrix(xs, t, k), epsilon);
    probe.run(&flat(&v), &flat(&g.grad_v), &fv)
}

fn check_combined_loss(rng: &mut ChaCha8Rng, probe: &mut Probe) -> Result<()> {
    let task: f64 = rng.random_range(0.5..3.0);
    let refine: f64 = rng.random_range(0.5..3.0);
    let lambda: f64 = rng.random_range(0.0..1.0);
    let f = |xs: &[f64]| smooth(combined_loss(xs[0], xs[1], lambda)?.total);
    probe.run(&[task, refine], &[1.0, lambda], &f)
}

fn check_task_loss(rng: &mut ChaCha8Rng, probe: &mut Probe) -> Result<()> {
    let s = random_shapes(rng);
    let out = random_matrix(rng, s.frames, s.k);
    let target = random_matrix(rng, s.frames, s.k);
    let g = MseLoss.grad(out.view(), target.view())?;
    let f = |xs: &[f64]| smooth(MseLoss.loss(to_matrix(xs, s.frames, s.k).view(), target.view())?);
    probe.run(&flat(&out), &flat(&g), &f)
}

type Check = fn(&mut ChaCha8Rng, &mut Probe) -> Result<()>;

/// Runs the full audit with a seeded generator.
pub fn run_gradient_audit(seed: u64) -> Result<AuditReport> {
    let checks: [(&'static str, Check); 10] = [
        ("affine", check_affine),
        ("mean_normalize", check_mean_normalize),
        ("mean_var_normalize", check_mean_var_normalize),
        ("fuse_concat", |r, p| {
            check_fusion(FusionMethod::Concat, r, p)
        }),
        ("fuse_linear_projection", |r, p| {
            check_fusion(FusionMethod::LinearProjection, r, p)
        }),
        ("fuse_weighted_sum", |r, p| {
            check_fusion(FusionMethod::WeightedSum, r, p)
        }),
        ("cross_correlation", check_cross_correlation),
        ("refine_loss", check_refine_loss),
        ("combined_loss", check_combined_loss),
        ("task_loss_mse", check_task_loss),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = AuditReport::default();
    for (name, check) in checks {
        let mut probe = Probe::new();
        for _ in 0..TRIALS {
            check(&mut rng, &mut probe)?;
        }
        report.entries.push(probe.finish(name));
    }
    Ok(report)
}

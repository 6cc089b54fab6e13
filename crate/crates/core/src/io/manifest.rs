//! Run manifest and training report as UTF-8 `key=value` lines, plus the
//! per-step CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionMethod, ProjectionInit};
use crate::io::export::export_correlation;
use crate::trainer::{OptimizerKind, TrainConfig, TrainReport};

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub method: FusionMethod,
    pub common_dim: usize,
    pub output_dim: usize,
    pub epsilon: f64,
    pub lambda: f64,
    pub init: ProjectionInit,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub task_weight: f64,
    pub seed: u64,
    /// Named input paths, written as `input.<name>=<path>`.
    pub inputs: BTreeMap<String, String>,
    /// Named output paths, written as `output.<name>=<path>`.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn from_configs(fusion: &FusionConfig, train: &TrainConfig) -> Self {
        Self {
            method: fusion.method,
            common_dim: fusion.common_dim,
            output_dim: fusion.output_dim,
            epsilon: fusion.epsilon,
            lambda: fusion.lambda,
            init: fusion.init,
            optimizer: train.optimizer,
            learning_rate: train.learning_rate,
            warmup_steps: train.warmup_steps,
            steps: train.steps,
            batch_size: train.batch_size,
            task_weight: train.task_weight,
            seed: train.seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            method: self.method,
            common_dim: self.common_dim,
            output_dim: self.output_dim,
            epsilon: self.epsilon,
            lambda: self.lambda,
            init: self.init,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            learning_rate: self.learning_rate,
            warmup_steps: self.warmup_steps,
            batch_size: self.batch_size,
            seed: self.seed,
            optimizer: self.optimizer,
            task_weight: self.task_weight,
            ..TrainConfig::default()
        }
    }

    pub fn serialize(&self) -> String {
        let init = match self.init {
            ProjectionInit::Independent => "independent",
            ProjectionInit::Tied => "tied",
        };
        let mut out = String::new();
        let mut put = |k: &str, v: &dyn std::fmt::Display| {
            writeln!(out, "{k}={v}").expect("writing to a String");
        };
        put("method", &self.method);
        put("common_dim", &self.common_dim);
        put("output_dim", &self.output_dim);
        put("epsilon", &self.epsilon);
        put("lambda", &self.lambda);
        put("init", &init);
        put("optimizer", &self.optimizer);
        put("learning_rate", &self.learning_rate);
        put("warmup_steps", &self.warmup_steps);
        put("steps", &self.steps);
        put("batch_size", &self.batch_size);
        put("task_weight", &self.task_weight);
        put("seed", &self.seed);
        for (k, v) in &self.inputs {
            put(&format!("input.{k}"), v);
        }
        for (k, v) in &self.outputs {
            put(&format!("output.{k}"), v);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = BTreeMap::new();
        let mut inputs = BTreeMap::new();
        let mut outputs = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Manifest {
                line: i + 1,
                message: format!("expected key=value, got '{line}'"),
            })?;
            let target = if let Some(name) = k.strip_prefix("input.") {
                inputs.insert(name.to_string(), v.to_string())
            } else if let Some(name) = k.strip_prefix("output.") {
                outputs.insert(name.to_string(), v.to_string())
            } else {
                fields
                    .insert(k.to_string(), (i + 1, v.to_string()))
                    .map(|(_, v)| v)
            };
            if target.is_some() {
                return Err(Error::Manifest {
                    line: i + 1,
                    message: format!("duplicate key '{k}'"),
                });
            }
        }

        fn take<T: FromStr>(fields: &mut BTreeMap<String, (usize, String)>, key: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            let (line, raw) = fields.remove(key).ok_or_else(|| Error::Manifest {
                line: 0,
                message: format!("missing key '{key}'"),
            })?;
            raw.parse().map_err(|e: T::Err| Error::Manifest {
                line,
                message: format!("{key}: {e}"),
            })
        }

        let init = match take::<String>(&mut fields, "init")?.as_str() {
            "independent" => ProjectionInit::Independent,
            "tied" => ProjectionInit::Tied,
            other => {
                return Err(Error::Manifest {
                    line: 0,
                    message: format!("unknown init '{other}'"),
                })
            }
        };
        let manifest = Self {
            method: take(&mut fields, "method")?,
            common_dim: take(&mut fields, "common_dim")?,
            output_dim: take(&mut fields, "output_dim")?,
            epsilon: take(&mut fields, "epsilon")?,
            lambda: take(&mut fields, "lambda")?,
            init,
            optimizer: take(&mut fields, "optimizer")?,
            learning_rate: take(&mut fields, "learning_rate")?,
            warmup_steps: take(&mut fields, "warmup_steps")?,
            steps: take(&mut fields, "steps")?,
            batch_size: take(&mut fields, "batch_size")?,
            task_weight: take(&mut fields, "task_weight")?,
            seed: take(&mut fields, "seed")?,
            inputs,
            outputs,
        };
        if let Some((key, (line, _))) = fields.into_iter().next() {
            return Err(Error::Manifest {
                line,
                message: format!("unknown key '{key}'"),
            });
        }
        Ok(manifest)
    }
}

/// Training report as `key=value` lines. Wall time is left out so that
/// identical runs produce identical files.
pub fn report_to_kv(report: &TrainReport) -> String {
    let mut out = String::new();
    let mut put = |k: &str, v: &dyn std::fmt::Display| {
        writeln!(out, "{k}={v}").expect("writing to a String");
    };
    put("steps", &report.history.len());
    if let Some(last) = report.history.last() {
        put("final_task_loss", &last.loss.task_loss);
        put("final_refine_loss", &last.loss.refine_loss);
        put("final_total", &last.loss.total);
        put("final_masked_fraction", &last.loss.masked_fraction);
    }
    if let Some(raw) = &report.raw_correlation {
        put("max_abs_corr_raw", &raw.max_abs());
    }
    put("max_abs_corr_initial", &report.max_abs_corr_initial);
    put("max_abs_corr_final", &report.max_abs_corr_final);
    put(
        "mean_abs_corr_initial",
        &report.initial_correlation.mean_abs(),
    );
    put("mean_abs_corr_final", &report.final_correlation.mean_abs());
    put("output_grads_always_zero", &report.output_grads_always_zero);
    if let Some(err) = report.fd_audit_max_rel_err {
        put("fd_audit_max_rel_err", &err);
    }
    for audit in &report.mask_audits {
        put(
            &format!("mask_audit.{}.masked_entries", audit.step),
            &audit.masked_entries,
        );
        put(
            &format!("mask_audit.{}.max_masked_grad", audit.step),
            &audit.max_masked_grad,
        );
    }
    if report.model.method == FusionMethod::WeightedSum {
        put("gate_alpha", &report.model.gate.alpha);
        put("gate_beta", &report.model.gate.beta);
    }
    out
}

pub fn steps_csv(report: &TrainReport) -> String {
    let mut out = String::from("step,task_loss,refine_loss,total,lr,max_abs_corr\n");
    for r in &report.history {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.loss.task_loss, r.loss.refine_loss, r.loss.total, r.lr, r.max_abs_corr
        )
        .expect("writing to a String");
    }
    out
}

/// Paths written by [`write_train_outputs`].
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub manifest: PathBuf,
    pub report: PathBuf,
    pub steps_csv: PathBuf,
    pub params: PathBuf,
    pub correlations: Vec<(PathBuf, PathBuf)>,
}

/// Writes the manifest, report, per-step CSV, trained parameters and
/// correlation exports (raw, before and after training) under `dir`.
/// Output entries in the manifest are file names relative to `dir`.
pub fn write_train_outputs(
    dir: impl AsRef<Path>,
    mut manifest: RunManifest,
    report: &TrainReport,
) -> Result<TrainOutputs> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let path = |name: &str| dir.join(name);

    let mut correlations = Vec::new();
    let mut stages = vec![
        ("initial", &report.initial_correlation),
        ("final", &report.final_correlation),
    ];
    if let Some(raw) = &report.raw_correlation {
        stages.insert(0, ("raw", raw));
    }
    for (stage, c) in stages {
        let csv = path(&format!("corr_{stage}.csv"));
        let pgm = path(&format!("corr_{stage}.pgm"));
        export_correlation(c, &csv, &pgm)?;
        manifest
            .outputs
            .insert(format!("corr_{stage}_csv"), format!("corr_{stage}.csv"));
        manifest
            .outputs
            .insert(format!("corr_{stage}_pgm"), format!("corr_{stage}.pgm"));
        correlations.push((csv, pgm));
    }

    let outputs = TrainOutputs {
        manifest: path("manifest.txt"),
        report: path("report.txt"),
        steps_csv: path("steps.csv"),
        params: path("params.json"),
        correlations,
    };
    // recorded relative to `dir` so reruns elsewhere produce the same manifest
    for (name, file) in [
        ("report", "report.txt"),
        ("steps_csv", "steps.csv"),
        ("params", "params.json"),
    ] {
        manifest.outputs.insert(name.to_string(), file.to_string());
    }
    fs::write(&outputs.report, report_to_kv(report))?;
    fs::write(&outputs.steps_csv, steps_csv(report))?;
    fs::write(&outputs.params, report.model.to_json()?)?;
    fs::write(&outputs.manifest, manifest.serialize())?;
    Ok(outputs)
}

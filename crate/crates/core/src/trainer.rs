//! Training loop, evaluation, equivariance audit and benchmarking.
//!
//! A training run directory holds `config.json` (model and training
//! configuration), `checkpoint.mvgn` (best-on-validation parameters) and
//! `metrics.jsonl`. Each metrics line is one JSON object: epoch records
//! `{"kind":"epoch","epoch","train_loss","val_mse","seconds"}` followed by one
//! `{"kind":"final","best_epoch","best_val_mse","test_mse","first_batch_loss",
//! "seconds_per_iteration","peak_memory_bytes"}` record.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clifford::{random_orthogonal, OrthogonalMap};
use crate::datasets::{chain_sample, load_dataset, simulate, Dataset, DatasetError, SimConfig, Task, TrajectorySample, DENOISE_K};
use crate::diffgraph::gradcheck::{check_params, GradcheckReport};
use crate::diffgraph::{load_checkpoint, save_checkpoint, Adam, AdamConfig, GraphError, ParameterStore, Precision, Tape, Tensor};
use crate::models::{featurize, GraphBatch, Model, ModelConfig};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.mvgn";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Default global gradient-norm bound.
pub const DEFAULT_CLIP_NORM: f64 = 1.0;

/// Untimed iterations before measurements start.
pub const WARMUP_ITERS: usize = 10;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("dataset task {data:?} does not match model task {model:?}")]
    TaskMismatch { data: Task, model: Task },
    #[error("training diverged in epoch {epoch} (last finite epoch: {last_finite:?})")]
    Diverged { epoch: usize, last_finite: Option<usize> },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    /// Rescales the gradient when its global L2 norm exceeds this value.
    #[serde(default)]
    pub clip_grad_norm: Option<f64>,
}

impl TrainConfig {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Nbody => Self {
                batch_size: 100,
                lr: 5e-3,
                weight_decay: 1e-4,
                epochs: 100,
                seed: 0,
                precision: Precision::F64,
                clip_grad_norm: Some(DEFAULT_CLIP_NORM),
            },
            Task::Denoise => Self {
                batch_size: 16,
                lr: 1e-3,
                weight_decay: 1e-4,
                epochs: 30,
                seed: 0,
                precision: Precision::F64,
                clip_grad_norm: Some(DEFAULT_CLIP_NORM),
            },
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let clip_ok = self.clip_grad_norm.is_none_or(|c| c > 0.0);
        if self.batch_size == 0 || !(self.lr > 0.0) || self.epochs == 0 || !(self.weight_decay >= 0.0) || !clip_ok {
            return Err(TrainError::Config(format!("{self:?}")));
        }
        Ok(())
    }

    fn adam(&self) -> Adam {
        Adam::new(AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub test_mse: Option<f64>,
    pub first_batch_loss: f64,
    pub seconds_per_iteration: f64,
    pub peak_memory_bytes: u64,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum MetricsLine<'a> {
    Epoch(&'a EpochRecord),
    Final {
        best_epoch: usize,
        best_val_mse: f64,
        test_mse: Option<f64>,
        first_batch_loss: f64,
        seconds_per_iteration: f64,
        peak_memory_bytes: u64,
    },
}

impl MetricsReport {
    /// Everything except wall-clock and memory measurements.
    pub fn same_results(&self, other: &MetricsReport) -> bool {
        let strip = |r: &MetricsReport| {
            (
                r.epochs.iter().map(|e| (e.epoch, e.train_loss.to_bits(), e.val_mse.to_bits())).collect::<Vec<_>>(),
                r.best_epoch,
                r.best_val_mse.to_bits(),
                r.test_mse.map(f64::to_bits),
                r.first_batch_loss.to_bits(),
            )
        };
        strip(self) == strip(other)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(&MetricsLine::Epoch(e)).expect("plain data"));
            out.push('\n');
        }
        let fin = MetricsLine::Final {
            best_epoch: self.best_epoch,
            best_val_mse: self.best_val_mse,
            test_mse: self.test_mse,
            first_batch_loss: self.first_batch_loss,
            seconds_per_iteration: self.seconds_per_iteration,
            peak_memory_bytes: self.peak_memory_bytes,
        };
        out.push_str(&serde_json::to_string(&fin).expect("plain data"));
        out.push('\n');
        out
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation MSE.
    pub best: ParameterStore,
    /// Parameters after the last epoch.
    pub last: ParameterStore,
    pub report: MetricsReport,
}

/// Peak resident set size of this process in bytes, if the platform reports it.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Resets the peak resident set counter; returns false when unsupported.
pub fn reset_peak_rss() -> bool {
    fs::write("/proc/self/clear_refs", "5").is_ok()
}

fn check_task(model: &ModelConfig, data: &Dataset) -> Result<(), TrainError> {
    if model.task != data.task {
        return Err(TrainError::TaskMismatch {
            data: data.task,
            model: model.task,
        });
    }
    Ok(())
}

fn batches(samples: &[TrajectorySample], order: &[usize], size: usize, task: Task) -> Result<Vec<GraphBatch>, DatasetError> {
    order
        .chunks(size)
        .map(|idx| {
            let group: Vec<TrajectorySample> = idx.iter().map(|&i| samples[i].clone()).collect();
            featurize(&group, task)
        })
        .collect()
}

/// Scales `grads` so their joint L2 norm is at most `max`; returns the norm before scaling.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max {
        let s = max / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Mean squared position error over every coordinate of every node.
pub fn evaluate(model: &Model, params: &ParameterStore, data: &Dataset, batch_size: usize) -> Result<f64, TrainError> {
    evaluate_with(model, params, data, batch_size, Precision::F64)
}

pub fn evaluate_with(
    model: &Model,
    params: &ParameterStore,
    data: &Dataset,
    batch_size: usize,
    precision: Precision,
) -> Result<f64, TrainError> {
    check_task(model.config(), data)?;
    model.check_params(params)?;
    if data.samples.is_empty() || batch_size == 0 {
        return Err(TrainError::Config("evaluate needs samples and batch_size >= 1".into()));
    }
    let parts: Vec<(f64, usize)> = data
        .samples
        .par_chunks(batch_size)
        .map(|group| -> Result<(f64, usize), TrainError> {
            let batch = featurize(group, data.task)?;
            let mut tape = Tape::with_options(false, precision);
            let out = model.forward(&mut tape, params, &batch)?;
            let pred = tape.value(out.positions);
            let sse = pred.data().iter().zip(batch.target.data()).map(|(p, t)| (p - t) * (p - t)).sum();
            Ok((sse, pred.len()))
        })
        .collect::<Result<_, _>>()?;
    let (sse, n) = parts.iter().fold((0.0, 0), |(s, n), (a, b)| (s + a, n + b));
    Ok(sse / n as f64)
}

/// MSE of predicting the unchanged input positions.
pub fn identity_mse(data: &Dataset) -> f64 {
    let (mut sse, mut n) = (0.0, 0usize);
    for s in &data.samples {
        for (a, b) in s.x0.iter().zip(&s.x_target) {
            for k in 0..3 {
                sse += (a[k] - b[k]).powi(2);
                n += 1;
            }
        }
    }
    sse / n as f64
}

/// MSE of extrapolating `x0 + v0 * horizon`.
pub fn linear_extrapolation_mse(data: &Dataset, horizon: f64) -> f64 {
    let (mut sse, mut n) = (0.0, 0usize);
    for s in &data.samples {
        for ((a, v), b) in s.x0.iter().zip(&s.v0).zip(&s.x_target) {
            for k in 0..3 {
                sse += (a[k] + v[k] * horizon - b[k]).powi(2);
                n += 1;
            }
        }
    }
    sse / n as f64
}

/// Minimizes the position MSE with Adam, keeping the best-on-validation parameters.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    test_set: Option<&Dataset>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    for d in [Some(train_set), Some(val_set), test_set].into_iter().flatten() {
        check_task(model_cfg, d)?;
        if d.samples.is_empty() {
            return Err(TrainError::Config("empty dataset".into()));
        }
    }
    let model = Model::new(model_cfg.clone())?;
    let mut params = model.init_params(cfg.seed)?;
    let mut adam = cfg.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..train_set.samples.len()).collect();
    let eval_batch = cfg.batch_size.max(1);

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParameterStore)> = None;
    let mut first_batch_loss = f64::NAN;
    let mut step_times = Vec::new();
    reset_peak_rss();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut weight) = (0.0, 0usize);
        for batch in batches(&train_set.samples, &order, cfg.batch_size, train_set.task)? {
            let t0 = Instant::now();
            let mut tape = Tape::with_options(true, cfg.precision);
            let loss = model.loss(&mut tape, &params, &batch)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    last_finite: epochs.last().map(|e: &EpochRecord| e.epoch),
                });
            }
            if first_batch_loss.is_nan() {
                first_batch_loss = value;
            }
            let grads = tape.backward(loss)?;
            let mut pgrads = tape.param_grads(&grads);
            if let Some(max) = cfg.clip_grad_norm {
                clip_grad_norm(&mut pgrads, max);
            }
            adam.step(&mut params, &pgrads)?;
            step_times.push(t0.elapsed().as_secs_f64());
            let n = batch.target.len();
            loss_sum += value * n as f64;
            weight += n;
        }
        let val_mse = evaluate_with(&model, &params, val_set, eval_batch, cfg.precision)?;
        if !val_mse.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                last_finite: epochs.last().map(|e: &EpochRecord| e.epoch),
            });
        }
        if best.as_ref().is_none_or(|b| val_mse < b.1) {
            best = Some((epoch, val_mse, params.clone()));
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / weight as f64,
            val_mse,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    let (best_epoch, best_val_mse, best_params) = best.expect("at least one epoch");
    let test_mse = test_set
        .map(|t| evaluate_with(&model, &best_params, t, eval_batch, cfg.precision))
        .transpose()?;
    let skip = WARMUP_ITERS.min(step_times.len() / 2);
    let timed = &step_times[skip..];
    let report = MetricsReport {
        epochs,
        best_epoch,
        best_val_mse,
        test_mse,
        first_batch_loss,
        seconds_per_iteration: timed.iter().sum::<f64>() / timed.len() as f64,
        peak_memory_bytes: peak_rss_bytes().unwrap_or(0),
    };
    Ok(TrainOutcome {
        best: best_params,
        last: params,
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Paths of the three split files inside a data directory.
pub fn split_paths(data_dir: &Path, task: Task) -> [PathBuf; 3] {
    let prefix = match task {
        Task::Nbody => "nbody",
        Task::Denoise => "denoise",
    };
    ["train", "val", "test"].map(|s| data_dir.join(format!("{prefix}_{s}.mvds")))
}

/// Trains from the split files in `data_dir` and writes the run directory.
pub fn train_run(model_cfg: &ModelConfig, cfg: &TrainConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainOutcome, TrainError> {
    let [tr, va, te] = split_paths(data_dir, model_cfg.task);
    let (train_set, val_set) = (load_dataset(&tr)?, load_dataset(&va)?);
    let test_set = if te.exists() { Some(load_dataset(&te)?) } else { None };
    let outcome = train(model_cfg, cfg, &train_set, &val_set, test_set.as_ref())?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let run = RunConfig {
        model: model_cfg.clone(),
        train: cfg.clone(),
    };
    let cfg_path = out_dir.join(CONFIG_FILE);
    let json = serde_json::to_string_pretty(&run).map_err(|source| TrainError::Json {
        path: cfg_path.clone(),
        source,
    })?;
    fs::write(&cfg_path, json).map_err(io_err(&cfg_path))?;
    save_checkpoint(&outcome.best, &out_dir.join(CHECKPOINT_FILE))?;
    let metrics = out_dir.join(METRICS_FILE);
    let mut f = fs::File::create(&metrics).map_err(io_err(&metrics))?;
    f.write_all(outcome.report.to_jsonl().as_bytes()).map_err(io_err(&metrics))?;
    Ok(outcome)
}

/// Loads the configuration and parameters of a run directory.
pub fn load_run(run_dir: &Path) -> Result<(RunConfig, Model, ParameterStore), TrainError> {
    let cfg_path = run_dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
    let run: RunConfig = serde_json::from_str(&text).map_err(|source| TrainError::Json { path: cfg_path, source })?;
    let model = Model::new(run.model.clone())?;
    let params = load_checkpoint(&run_dir.join(CHECKPOINT_FILE))?;
    model.check_params(&params)?;
    Ok((run, model, params))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub trials: usize,
    pub max_rotation_error: f64,
    pub max_reflection_error: f64,
    pub max_h_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Predicted positions and invariant features for a batch.
pub type ForwardFn<'a> = dyn Fn(&GraphBatch) -> Result<(Tensor, Tensor), GraphError> + 'a;

fn rotate_rows(t: &Tensor, r: &OrthogonalMap) -> Tensor {
    let data = t.data().chunks_exact(3).flat_map(|p| r.apply_vector([p[0], p[1], p[2]])).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// Compares `forward(R . batch)` with `R . forward(batch)` for each map.
pub fn audit_with_maps(forward: &ForwardFn, batch: &GraphBatch, maps: &[OrthogonalMap], tol: f64) -> Result<AuditReport, GraphError> {
    let (p, h) = forward(batch)?;
    let (mut rot, mut refl, mut h_err) = (0.0f64, 0.0f64, 0.0f64);
    for r in maps {
        let (pr, hr) = forward(&batch.transformed(r))?;
        let e = pr.max_abs_diff(&rotate_rows(&p, r));
        if r.det_sign() > 0 {
            rot = rot.max(e);
        } else {
            refl = refl.max(e);
        }
        h_err = h_err.max(hr.max_abs_diff(&h));
    }
    let passed = [rot, refl, h_err].iter().all(|e| *e <= tol);
    Ok(AuditReport {
        trials: maps.len(),
        max_rotation_error: rot,
        max_reflection_error: refl,
        max_h_error: h_err,
        tol,
        passed,
    })
}

/// Random proper rotations on even trials, reflections on odd ones.
pub fn audit_equivariance(forward: &ForwardFn, batch: &GraphBatch, n_trials: usize, tol: f64, seed: u64) -> Result<AuditReport, GraphError> {
    let maps: Vec<OrthogonalMap> = (0..n_trials)
        .map(|i| random_orthogonal(seed.wrapping_add(i as u64), if i % 2 == 0 { 1 } else { -1 }))
        .collect();
    audit_with_maps(forward, batch, &maps, tol)
}

/// Audits a model on `batch` at the given precision.
pub fn audit_model(
    model: &Model,
    params: &ParameterStore,
    batch: &GraphBatch,
    n_trials: usize,
    tol: f64,
    seed: u64,
    precision: Precision,
) -> Result<AuditReport, GraphError> {
    let forward = |b: &GraphBatch| -> Result<(Tensor, Tensor), GraphError> {
        let mut tape = Tape::with_options(false, precision);
        let out = model.forward(&mut tape, params, b)?;
        Ok((tape.value(out.positions).clone(), tape.value(out.h).clone()))
    };
    audit_equivariance(&forward, batch, n_trials, tol, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub channels: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub seconds_per_iteration: f64,
    pub stddev_seconds: f64,
    pub peak_memory_bytes: u64,
    /// Bytes of values recorded on one training tape.
    pub tape_bytes: usize,
}

/// Times forward, backward and an optimizer step on one fixed batch.
pub fn bench(
    model_cfg: &ModelConfig,
    samples: &[TrajectorySample],
    batch_size: usize,
    n_iters: usize,
    precision: Precision,
) -> Result<BenchReport, TrainError> {
    if n_iters == 0 || batch_size == 0 || samples.is_empty() {
        return Err(TrainError::Config("bench needs samples, batch_size >= 1 and n_iters >= 1".into()));
    }
    let group: Vec<TrajectorySample> = samples.iter().cycle().take(batch_size).cloned().collect();
    let batch = featurize(&group, model_cfg.task)?;
    let model = Model::new(model_cfg.clone())?;
    let mut params = model.init_params(0)?;
    let mut adam = TrainConfig::for_task(model_cfg.task).adam();
    let mut tape_bytes = 0;
    let mut step = |params: &mut ParameterStore| -> Result<(), TrainError> {
        let mut tape = Tape::with_options(true, precision);
        let loss = model.loss(&mut tape, params, &batch)?;
        let grads = tape.backward(loss)?;
        adam.step(params, &tape.param_grads(&grads))?;
        tape_bytes = tape.value_bytes();
        Ok(())
    };
    for _ in 0..WARMUP_ITERS {
        step(&mut params)?;
    }
    reset_peak_rss();
    let mut times = Vec::with_capacity(n_iters);
    for _ in 0..n_iters {
        let t0 = Instant::now();
        step(&mut params)?;
        times.push(t0.elapsed().as_secs_f64());
    }
    let mean = times.iter().sum::<f64>() / n_iters as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n_iters as f64;
    let peak = peak_rss_bytes().unwrap_or(tape_bytes as u64);
    Ok(BenchReport {
        model: model_cfg.architecture.name().to_string(),
        channels: model_cfg.channels,
        batch_size,
        iterations: n_iters,
        seconds_per_iteration: mean,
        stddev_seconds: var.sqrt(),
        peak_memory_bytes: peak,
        tape_bytes,
    })
}

/// Three-node N-body graph for finite-difference checks of the full loss.
pub fn toy_batch(seed: u64) -> Result<GraphBatch, TrainError> {
    let cfg = SimConfig {
        n: 3,
        steps: 10,
        ..SimConfig::default()
    };
    Ok(featurize(&[simulate(&cfg, seed)?], Task::Nbody)?)
}

/// Finite-difference check of the loss gradient with respect to every parameter.
pub fn gradcheck_model(model_cfg: &ModelConfig, probes: usize, seed: u64) -> Result<GradcheckReport, TrainError> {
    let batch = match model_cfg.task {
        Task::Nbody => toy_batch(seed)?,
        Task::Denoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            featurize(&[chain_sample(DENOISE_K + 1, 0.3, &mut rng)?], Task::Denoise)?
        }
    };
    let model = Model::new(model_cfg.clone())?;
    let store = model.init_params(seed)?;
    let name = model_cfg.architecture.name();
    Ok(check_params(name, &store, |t, st| model.loss(t, st, &batch), probes, seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{simulate_split, SimConfig};
    use crate::models::Architecture;

    fn tiny_data(count: usize, offset: u64) -> Dataset {
        let cfg = SimConfig {
            steps: 100,
            ..SimConfig::default()
        };
        Dataset {
            task: Task::Nbody,
            samples: simulate_split(&cfg, offset, count).unwrap(),
        }
    }

    fn tiny_model(arch: Architecture) -> ModelConfig {
        ModelConfig {
            layers: 1,
            channels: 4,
            scalar_width: 8,
            hidden: 8,
            ..ModelConfig::new(arch, Task::Nbody)
        }
    }

    fn short(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs,
            lr: 5e-3,
            ..TrainConfig::for_task(Task::Nbody)
        }
    }

    #[test]
    fn first_batch_loss_is_initial_mse() {
        let (tr, va) = (tiny_data(8, 0), tiny_data(4, 100));
        let mcfg = tiny_model(Architecture::CliffordEgnn);
        let cfg = short(1);
        let out = train(&mcfg, &cfg, &tr, &va, None).unwrap();
        let model = Model::new(mcfg).unwrap();
        let init = model.init_params(cfg.seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut order: Vec<usize> = (0..8).collect();
        order.shuffle(&mut rng);
        let first: Vec<TrajectorySample> = order[..4].iter().map(|&i| tr.samples[i].clone()).collect();
        let batch = featurize(&first, Task::Nbody).unwrap();
        let mut tape = Tape::inference();
        let loss = model.loss(&mut tape, &init, &batch).unwrap();
        assert_eq!(out.report.first_batch_loss, tape.value(loss).item());
        assert!(out.report.first_batch_loss.is_finite());
    }

    #[test]
    fn training_is_deterministic() {
        let (tr, va) = (tiny_data(8, 0), tiny_data(4, 100));
        let mcfg = tiny_model(Architecture::MvnGnn);
        let a = train(&mcfg, &short(3), &tr, &va, Some(&va)).unwrap();
        let b = train(&mcfg, &short(3), &tr, &va, Some(&va)).unwrap();
        assert!(a.report.same_results(&b.report));
        assert!(a.best.bitwise_eq(&b.best));
        assert!(a.report.seconds_per_iteration > 0.0);
        let best = a.report.epochs.iter().map(|e| e.val_mse).fold(f64::INFINITY, f64::min);
        assert_eq!(a.report.best_val_mse, best);
        assert!(a.report.best_val_mse <= a.report.epochs.last().unwrap().val_mse);
    }

    #[test]
    fn evaluation_contracts() {
        let data = tiny_data(6, 0);
        let model = Model::new(tiny_model(Architecture::Egnn)).unwrap();
        let mut params = model.init_params(1).unwrap();
        params.zero_prefix("");
        // the zero model predicts x0
        let mse = evaluate(&model, &params, &data, 4).unwrap();
        assert!((mse - identity_mse(&data)).abs() < 1e-12);

        let trained = model.init_params(2).unwrap();
        let mut shuffled = data.clone();
        shuffled.samples.reverse();
        let a = evaluate(&model, &trained, &data, 4).unwrap();
        let b = evaluate(&model, &trained, &shuffled, 4).unwrap();
        assert!((a - b).abs() < 1e-12);

        // targets set to the model's own predictions
        let exact = Dataset {
            task: Task::Nbody,
            samples: data
                .samples
                .chunks(4)
                .flat_map(|group| {
                    let pred = model.predict(&trained, &featurize(group, Task::Nbody).unwrap()).unwrap();
                    let mut rows = pred.data().chunks_exact(3).map(|p| [p[0], p[1], p[2]]);
                    group
                        .iter()
                        .map(|s| TrajectorySample {
                            x_target: rows.by_ref().take(s.len()).collect(),
                            ..s.clone()
                        })
                        .collect::<Vec<_>>()
                })
                .collect(),
        };
        assert_eq!(evaluate(&model, &trained, &exact, 4).unwrap(), 0.0);

        let other = Model::new(tiny_model(Architecture::MvpGnn)).unwrap();
        assert!(matches!(evaluate(&other, &params, &data, 4), Err(TrainError::Graph(_))));
        let denoise = Dataset {
            task: Task::Denoise,
            samples: data.samples.clone(),
        };
        assert!(matches!(evaluate(&model, &params, &denoise, 4), Err(TrainError::TaskMismatch { .. })));
    }

    #[test]
    fn audit_detects_injected_fault() {
        let data = tiny_data(2, 0);
        let batch = featurize(&data.samples, Task::Nbody).unwrap();
        let model = Model::new(tiny_model(Architecture::CliffordEgnn)).unwrap();
        let params = model.init_params(3).unwrap();
        let ok = audit_model(&model, &params, &batch, 6, 1e-8, 0, Precision::F64).unwrap();
        assert!(ok.passed, "{ok:?}");
        let identity = audit_with_maps(
            &|b: &GraphBatch| {
                let mut t = Tape::inference();
                let o = model.forward(&mut t, &params, b)?;
                Ok((t.value(o.positions).clone(), t.value(o.h).clone()))
            },
            &batch,
            &[OrthogonalMap::identity()],
            0.0,
        )
        .unwrap();
        assert_eq!(identity.max_rotation_error, 0.0);

        // a bias on the grade-1 part of the input multivectors breaks equivariance
        let broken = |b: &GraphBatch| -> Result<(Tensor, Tensor), GraphError> {
            let mut biased = b.clone();
            for row in biased.v.data_mut().chunks_exact_mut(8) {
                row[1] += 0.5;
            }
            let mut t = Tape::inference();
            let o = model.forward(&mut t, &params, &biased)?;
            Ok((t.value(o.positions).clone(), t.value(o.h).clone()))
        };
        let bad = audit_equivariance(&broken, &batch, 6, 1e-8, 0).unwrap();
        assert!(!bad.passed);
        assert!(bad.max_rotation_error > 1e-4 && bad.max_reflection_error > 1e-4);
    }

    #[test]
    fn run_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        let cfg = SimConfig {
            steps: 50,
            ..SimConfig::default()
        };
        crate::datasets::generate_nbody(6, 3, 3, &cfg, &data_dir).unwrap();
        let mcfg = tiny_model(Architecture::MvpGnn);
        let out_dir = dir.path().join("run");
        let outcome = train_run(&mcfg, &short(2), &data_dir, &out_dir).unwrap();
        let (run, model, params) = load_run(&out_dir).unwrap();
        assert_eq!(run.model, mcfg);
        assert!(params.bitwise_eq(&outcome.best));
        let test = load_dataset(&split_paths(&data_dir, Task::Nbody)[2]).unwrap();
        assert_eq!(Some(evaluate(&model, &params, &test, 4).unwrap()), outcome.report.test_mse);

        let lines: Vec<serde_json::Value> = fs::read_to_string(out_dir.join(METRICS_FILE))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0]["kind"], "epoch");
        assert_eq!(lines[2]["kind"], "final");
    }

    #[test]
    fn bench_reports_positive_time() {
        let data = tiny_data(4, 0);
        let r = bench(&tiny_model(Architecture::CliffordEgnn), &data.samples, 8, 5, Precision::F64).unwrap();
        assert!(r.seconds_per_iteration > 0.0);
        assert!(r.tape_bytes > 0 && r.peak_memory_bytes > 0);
    }

    #[test]
    fn divergence_is_reported() {
        let (tr, va) = (tiny_data(4, 0), tiny_data(2, 100));
        let cfg = TrainConfig {
            lr: 1e300,
            ..short(5)
        };
        match train(&tiny_model(Architecture::Egnn), &cfg, &tr, &va, None) {
            Err(TrainError::Diverged { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.report)),
        }
    }

    #[test]
    fn model_gradcheck_on_toy_graph() {
        let batch = toy_batch(3).unwrap();
        assert_eq!(batch.n_nodes(), 3);
        assert_eq!(batch.n_edges(), 6);
        for task in [Task::Nbody, Task::Denoise] {
            let cfg = ModelConfig {
                layers: 2,
                channels: 4,
                scalar_width: 8,
                hidden: 8,
                ..ModelConfig::new(Architecture::CliffordEgnn, task)
            };
            let rep = gradcheck_model(&cfg, 30, 5).unwrap();
            assert!(rep.passes(1e-5), "{rep:?}");
        }
    }
}

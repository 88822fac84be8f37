use std::fmt::Display;
use std::path::{Path, PathBuf};

use mvgnn::datasets::{
    chain_sample, generate_chain_denoise, generate_denoise_splits, generate_nbody, load_dataset, simulate_split, SimConfig,
    SPLIT_OFFSETS,
};
use mvgnn::diffgraph::gradcheck::{check_all_ops, GradcheckReport};
use mvgnn::models::featurize;
use mvgnn::trainer::{
    audit_model, bench, evaluate_with, gradcheck_model, identity_mse, linear_extrapolation_mse, load_run, split_paths, train_run,
    RunConfig, TrainConfig,
};
use mvgnn::{Dataset, GraphBatch, Model, ParameterStore, Precision, Task, TrajectorySample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::output::{AuditSummary, BenchSummary, EvalSummary, GenerateSummary, GradcheckSummary, SplitFile, TrainSummary, MIB};
use crate::{AuditArgs, BenchArgs, Cli, Command, CommonArgs, EvalArgs, GenerateArgs, GradcheckArgs, TrainArgs};

const AUDIT_SAMPLES: usize = 4;
const AUDIT_CHAIN_LEN: usize = 30;
const BENCH_CHAIN_LEN: usize = 30;

/// One-line diagnostic naming the failing module and operation.
#[derive(Debug, Error)]
#[error("{module}::{op}: {message}")]
pub struct CliError {
    pub module: &'static str,
    pub op: &'static str,
    pub message: String,
}

trait Context<T> {
    fn ctx(self, module: &'static str, op: &'static str) -> Result<T, CliError>;
}

impl<T, E: Display> Context<T> for Result<T, E> {
    fn ctx(self, module: &'static str, op: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError {
            module,
            op,
            message: e.to_string(),
        })
    }
}

fn contract(op: &'static str, message: impl Into<String>) -> CliError {
    CliError {
        module: "cli",
        op,
        message: message.into(),
    }
}

pub enum Outcome {
    Success,
    CheckFailed,
}

pub fn run(cli: Cli) -> Result<Outcome, CliError> {
    let common = cli.common;
    if common.threads == 0 {
        return Err(contract("threads", "--threads must be >= 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads)
        .build_global()
        .ctx("cli", "threads")?;
    match cli.command {
        Command::Generate(a) => generate(&common, a),
        Command::Train(a) => train(&common, a),
        Command::Eval(a) => eval(&common, a),
        Command::AuditEquivariance(a) => audit(&common, a),
        Command::Gradcheck(a) => gradcheck(&common, a),
        Command::Bench(a) => bench_cmd(&common, a),
    }
}

fn announce(sub: &str, resolved: &impl Serialize) {
    eprintln!("mvgnn {sub}: {}", serde_json::to_string(resolved).unwrap_or_default());
}

fn emit<T: Serialize>(common: &CommonArgs, value: &T, text: impl FnOnce(&T)) {
    if common.json {
        println!("{}", serde_json::to_string(value).expect("plain data"));
    } else {
        text(value);
    }
}

fn generate(common: &CommonArgs, a: GenerateArgs) -> Result<Outcome, CliError> {
    let task = Task::from(a.task);
    let counts = [a.train, a.val, a.test];
    let (paths, nodes) = match task {
        Task::Nbody => {
            let cfg = SimConfig {
                n: a.particles,
                steps: a.steps,
                dt: a.dt,
                seed: common.seed,
                ..SimConfig::default()
            };
            cfg.validate().ctx("datasets", "generate")?;
            announce("generate", &serde_json::json!({"task": task, "counts": counts, "sim": cfg, "out": a.out}));
            (generate_nbody(a.train, a.val, a.test, &cfg, &a.out).ctx("datasets", "generate")?, a.particles)
        }
        Task::Denoise => {
            announce(
                "generate",
                &serde_json::json!({"task": task, "counts": counts, "chain_len": a.chain_len, "noise": a.noise, "seed": common.seed, "out": a.out}),
            );
            let paths = generate_denoise_splits(counts, a.chain_len, a.noise, common.seed, &a.out).ctx("datasets", "generate")?;
            (paths, a.chain_len)
        }
    };
    let files = ["train", "val", "test"]
        .iter()
        .zip(paths)
        .zip(counts)
        .map(|((split, path), samples)| SplitFile {
            split: split.to_string(),
            path,
            samples,
            nodes_per_sample: nodes,
        })
        .collect();
    let summary = GenerateSummary {
        task,
        seed: common.seed,
        files,
    };
    emit(common, &summary, |s| {
        for f in &s.files {
            println!("{:<5} {:>6} samples  {}", f.split, f.samples, f.path.display());
        }
    });
    Ok(Outcome::Success)
}

fn train(common: &CommonArgs, a: TrainArgs) -> Result<Outcome, CliError> {
    let arch = a.model.architectures(false)[0];
    let model_cfg = a.model.config(arch);
    model_cfg.validate().ctx("models", "config")?;
    let defaults = TrainConfig::for_task(model_cfg.task);
    let cfg = TrainConfig {
        batch_size: a.batch.unwrap_or(defaults.batch_size),
        lr: a.lr.unwrap_or(defaults.lr),
        weight_decay: a.wd.unwrap_or(defaults.weight_decay),
        epochs: a.epochs.unwrap_or(defaults.epochs),
        seed: common.seed,
        precision: a.precision.into(),
        clip_grad_norm: match a.clip {
            Some(0.0) => None,
            Some(c) => Some(c),
            None => defaults.clip_grad_norm,
        },
    };
    cfg.validate().ctx("trainer", "config")?;
    announce(
        "train",
        &RunConfig {
            model: model_cfg.clone(),
            train: cfg.clone(),
        },
    );
    for path in split_paths(&a.data, model_cfg.task).iter().take(2) {
        let ds = load_dataset(path).ctx("datasets", "load")?;
        if ds.task != model_cfg.task {
            return Err(contract(
                "train",
                format!("{} holds {:?} data but --task is {:?}", path.display(), ds.task, model_cfg.task),
            ));
        }
    }
    let outcome = train_run(&model_cfg, &cfg, &a.data, &a.out).ctx("trainer", "train")?;
    let r = &outcome.report;
    let summary = TrainSummary {
        run_dir: a.out.clone(),
        model: arch.name().to_string(),
        epochs: r.epochs.len(),
        best_epoch: r.best_epoch,
        best_val_mse: r.best_val_mse,
        test_mse: r.test_mse,
        first_batch_loss: r.first_batch_loss,
        seconds_per_iteration: r.seconds_per_iteration,
        peak_memory_bytes: r.peak_memory_bytes,
    };
    emit(common, &summary, |s| {
        println!("model {}  epochs {}  best epoch {}  best val mse {:.6e}", s.model, s.epochs, s.best_epoch, s.best_val_mse);
        if let Some(t) = s.test_mse {
            println!("test mse {t:.6e}");
        }
        println!("run directory {}", s.run_dir.display());
    });
    Ok(Outcome::Success)
}

fn dataset_file(data: &Path, task: Task, split: usize) -> PathBuf {
    if data.is_dir() {
        split_paths(data, task)[split].clone()
    } else {
        data.to_path_buf()
    }
}

fn eval(common: &CommonArgs, a: EvalArgs) -> Result<Outcome, CliError> {
    let (run, model, params) = load_run(&a.checkpoint).ctx("trainer", "load_run")?;
    let path = dataset_file(&a.data, run.model.task, 2);
    announce(
        "eval",
        &serde_json::json!({"checkpoint": a.checkpoint, "data": path, "batch": a.batch, "horizon": a.horizon, "model": run.model}),
    );
    let data = load_dataset(&path).ctx("datasets", "load")?;
    let mse = evaluate_with(&model, &params, &data, a.batch, a.precision.into()).ctx("trainer", "evaluate")?;
    let summary = EvalSummary {
        model: run.model.architecture.name().to_string(),
        dataset: path,
        samples: data.samples.len(),
        mse,
        identity_mse: identity_mse(&data),
        linear_extrapolation_mse: (data.task == Task::Nbody).then(|| linear_extrapolation_mse(&data, a.horizon)),
    };
    emit(common, &summary, |s| {
        println!("mse {:.6e}  ({} samples, {})", s.mse, s.samples, s.model);
        println!("identity baseline mse {:.6e}", s.identity_mse);
        if let Some(l) = s.linear_extrapolation_mse {
            println!("linear extrapolation baseline mse {l:.6e}");
        }
    });
    Ok(Outcome::Success)
}

fn synthetic_samples(task: Task, count: usize, seed: u64) -> Result<Vec<TrajectorySample>, CliError> {
    match task {
        Task::Nbody => {
            let cfg = SimConfig {
                steps: 100,
                seed,
                ..SimConfig::default()
            };
            simulate_split(&cfg, SPLIT_OFFSETS[2], count).ctx("datasets", "simulate")
        }
        Task::Denoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count)
                .map(|_| chain_sample(AUDIT_CHAIN_LEN, 0.5, &mut rng))
                .collect::<Result<_, _>>()
                .ctx("datasets", "chain_sample")
        }
    }
}

fn audit(common: &CommonArgs, a: AuditArgs) -> Result<Outcome, CliError> {
    let (model, params): (Model, ParameterStore) = match &a.checkpoint {
        Some(dir) => {
            let (run, model, params) = load_run(dir).ctx("trainer", "load_run")?;
            if a.model.model.is_some_and(|m| m != run.model.architecture) {
                return Err(contract("audit-equivariance", "--model conflicts with the checkpoint's architecture"));
            }
            if a.model.task.is_some_and(|t| Task::from(t) != run.model.task) {
                return Err(contract("audit-equivariance", "--task conflicts with the checkpoint's task"));
            }
            (model, params)
        }
        None => {
            let cfg = a.model.config(a.model.architectures(false)[0]);
            let model = Model::new(cfg).ctx("models", "new")?;
            let params = model.init_params(common.seed).ctx("models", "init_params")?;
            (model, params)
        }
    };
    let task = model.config().task;
    let precision: Precision = a.precision.into();
    let tol = a.tol.unwrap_or(match precision {
        Precision::F64 => 1e-8,
        Precision::F32 => 1e-3,
    });
    announce(
        "audit-equivariance",
        &serde_json::json!({"model": model.config(), "checkpoint": a.checkpoint, "trials": a.trials, "tol": tol, "precision": precision, "seed": common.seed}),
    );
    let samples = match &a.data {
        Some(data) => {
            let ds: Dataset = load_dataset(&dataset_file(data, task, 2)).ctx("datasets", "load")?;
            if ds.task != task {
                return Err(contract("audit-equivariance", format!("dataset holds {:?} data, model expects {task:?}", ds.task)));
            }
            ds.samples.into_iter().take(AUDIT_SAMPLES).collect()
        }
        None => synthetic_samples(task, AUDIT_SAMPLES, common.seed)?,
    };
    let batch: GraphBatch = featurize(&samples, task).ctx("models", "featurize")?;
    let report = audit_model(&model, &params, &batch, a.trials, tol, common.seed, precision).ctx("trainer", "audit_equivariance")?;
    let passed = report.passed;
    let summary = AuditSummary {
        model: model.config().architecture.name().to_string(),
        checkpoint: a.checkpoint,
        report,
    };
    emit(common, &summary, |s| {
        let r = &s.report;
        println!("{} {} ({} maps, tol {:.1e})", s.model, if r.passed { "PASS" } else { "FAIL" }, r.trials, r.tol);
        println!("max rotation error   {:.3e}", r.max_rotation_error);
        println!("max reflection error {:.3e}", r.max_reflection_error);
        println!("max invariant error  {:.3e}", r.max_h_error);
    });
    Ok(if passed { Outcome::Success } else { Outcome::CheckFailed })
}

fn print_rows(title: &str, rows: &[GradcheckReport], tol: f64) {
    println!("{title:<24} {:>14} {:>7}", "max rel error", "probes");
    for r in rows {
        let mark = if r.passes(tol) { "" } else { "  FAIL" };
        println!("{:<24} {:>14.3e} {:>7}{mark}", r.name, r.max_rel_error, r.probes);
    }
}

fn gradcheck(common: &CommonArgs, a: GradcheckArgs) -> Result<Outcome, CliError> {
    let archs = a.model.architectures(true);
    let configs: Vec<_> = archs.iter().map(|&arch| a.model.config(arch)).collect();
    announce("gradcheck", &serde_json::json!({"probes": a.probes, "tol": a.tol, "seed": common.seed, "models": configs}));
    let ops = check_all_ops(a.probes, common.seed).ctx("diffgraph", "gradcheck")?;
    let models = configs
        .iter()
        .map(|cfg| gradcheck_model(cfg, a.probes, common.seed))
        .collect::<Result<Vec<_>, _>>()
        .ctx("trainer", "gradcheck_model")?;
    let passed = ops.iter().chain(&models).all(|r| r.passes(a.tol));
    let summary = GradcheckSummary {
        tol: a.tol,
        ops,
        models,
        passed,
    };
    emit(common, &summary, |s| {
        print_rows("op", &s.ops, s.tol);
        println!();
        print_rows("model loss (3 nodes)", &s.models, s.tol);
        println!("{} (tol {:.0e})", if s.passed { "PASS" } else { "FAIL" }, s.tol);
    });
    Ok(if passed { Outcome::Success } else { Outcome::CheckFailed })
}

fn bench_cmd(common: &CommonArgs, a: BenchArgs) -> Result<Outcome, CliError> {
    let task = a.model.task();
    let configs: Vec<_> = a.model.architectures(true).into_iter().map(|arch| a.model.config(arch)).collect();
    let precision: Precision = a.precision.into();
    announce(
        "bench",
        &serde_json::json!({"batch": a.batch, "iters": a.iters, "precision": precision, "seed": common.seed, "models": configs}),
    );
    let samples = match task {
        Task::Nbody => {
            let cfg = SimConfig {
                seed: common.seed,
                ..SimConfig::default()
            };
            simulate_split(&cfg, 0, a.batch.max(1)).ctx("datasets", "simulate")?
        }
        Task::Denoise => generate_chain_denoise(a.batch.max(1), BENCH_CHAIN_LEN, 0.5, common.seed).ctx("datasets", "generate")?.samples,
    };
    let rows = configs
        .iter()
        .map(|cfg| bench(cfg, &samples, a.batch, a.iters, precision))
        .collect::<Result<Vec<_>, _>>()
        .ctx("trainer", "bench")?;
    let summary = BenchSummary { task, rows };
    emit(common, &summary, |s| {
        println!("{:<14} {:>9} {:>18} {:>12} {:>13}", "model", "channels", "seconds/iteration", "stddev", "memory (MiB)");
        for r in &s.rows {
            println!(
                "{:<14} {:>9} {:>18.5} {:>12.5} {:>13.1}",
                r.model,
                r.channels,
                r.seconds_per_iteration,
                r.stddev_seconds,
                r.peak_memory_bytes as f64 / MIB
            );
        }
    });
    Ok(Outcome::Success)
}

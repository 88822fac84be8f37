use mvgnn::datasets::{decode_dataset, encode_dataset, generate_denoise_splits, load_dataset};
use mvgnn::models::featurize;
use mvgnn::trainer::{audit_model, evaluate, load_run, split_paths, train_run};
use mvgnn::{Architecture, Dataset, ModelConfig, Precision, Task, TrainConfig, TrajectorySample};
use proptest::prelude::*;

fn small(arch: Architecture, task: Task) -> ModelConfig {
    ModelConfig {
        layers: 2,
        channels: 4,
        scalar_width: 16,
        hidden: 16,
        ..ModelConfig::new(arch, task)
    }
}

#[test]
fn denoise_run_reloads_and_stays_equivariant() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate_denoise_splits([6, 3, 3], 18, 0.5, 4, &data).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 3,
        ..TrainConfig::for_task(Task::Denoise)
    };
    let run = tmp.path().join("run");
    let out = train_run(&small(Architecture::MvnGnn, Task::Denoise), &cfg, &data, &run).unwrap();

    let (loaded, model, params) = load_run(&run).unwrap();
    assert_eq!(loaded.train, cfg);
    assert_eq!(params, out.best);
    let test = load_dataset(&split_paths(&data, Task::Denoise)[2]).unwrap();
    let mse = evaluate(&model, &params, &test, cfg.batch_size).unwrap();
    assert_eq!(Some(mse.to_bits()), out.report.test_mse.map(f64::to_bits));

    let batch = featurize(&test.samples, Task::Denoise).unwrap();
    let report = audit_model(&model, &params, &batch, 20, 1e-8, 9, Precision::F64).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn every_architecture_trains_on_nbody_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let sim = mvgnn::SimConfig {
        steps: 50,
        ..Default::default()
    };
    mvgnn::datasets::generate_nbody(8, 4, 4, &sim, &data).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        ..TrainConfig::for_task(Task::Nbody)
    };
    for arch in Architecture::ALL {
        let out = train_run(&small(arch, Task::Nbody), &cfg, &data, &tmp.path().join(arch.name())).unwrap();
        assert_eq!(out.report.epochs.len(), 3);
        assert!(out.report.best_val_mse.is_finite());
        assert!(out.report.epochs.iter().all(|e| e.train_loss.is_finite()));
    }
}

fn sample_strategy() -> impl Strategy<Value = Vec<TrajectorySample>> {
    (1usize..6, 1usize..4).prop_flat_map(|(n, count)| {
        let v3 = || prop::array::uniform3(-1e3f64..1e3);
        let one = (
            prop::collection::vec(v3(), n),
            prop::collection::vec(v3(), n),
            prop::collection::vec(-2.0f64..2.0, n),
            prop::collection::vec(v3(), n),
        )
            .prop_map(|(x0, v0, q, x_target)| TrajectorySample { x0, v0, q, x_target });
        prop::collection::vec(one, count)
    })
}

proptest! {
    #[test]
    fn dataset_bytes_round_trip(samples in sample_strategy(), denoise in any::<bool>()) {
        let task = if denoise { Task::Denoise } else { Task::Nbody };
        let ds = Dataset { task, samples };
        let bytes = encode_dataset(&ds).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert!(decode_dataset(&bytes[..bytes.len() - 1]).is_err());
    }
}

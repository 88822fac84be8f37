use super::*;
use crate::clifford::random_orthogonal;
use crate::datasets::{chain_sample, simulate, SimConfig};
use crate::diffgraph::gradcheck::check_params;
use crate::diffgraph::Precision;

fn small(arch: Architecture, task: Task) -> ModelConfig {
    ModelConfig {
        layers: 2,
        channels: 4,
        scalar_width: 8,
        hidden: 8,
        ..ModelConfig::new(arch, task)
    }
}

fn nbody_samples(count: u64) -> Vec<TrajectorySample> {
    let cfg = SimConfig {
        steps: 10,
        ..SimConfig::default()
    };
    (0..count).map(|i| simulate(&cfg, i).unwrap()).collect()
}

fn chain_samples(count: u64) -> Vec<TrajectorySample> {
    (0..count)
        .map(|i| chain_sample(20, 0.3, &mut ChaCha8Rng::seed_from_u64(i)).unwrap())
        .collect()
}

fn batch_for(task: Task) -> GraphBatch {
    match task {
        Task::Nbody => featurize(&nbody_samples(2), task).unwrap(),
        Task::Denoise => featurize(&chain_samples(1), task).unwrap(),
    }
}

fn all_configs() -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for task in [Task::Nbody, Task::Denoise] {
        for arch in Architecture::ALL {
            out.push(small(arch, task));
        }
    }
    out
}

fn run(model: &Model, store: &ParameterStore, batch: &GraphBatch, precision: Precision) -> (Tensor, Tensor, Option<Tensor>) {
    let mut tape = Tape::with_options(false, precision);
    let out = model.forward(&mut tape, store, batch).unwrap();
    (
        tape.value(out.positions).clone(),
        tape.value(out.h).clone(),
        out.v.map(|v| tape.value(v).clone()),
    )
}

fn rotate_rows(t: &Tensor, r: &OrthogonalMap) -> Tensor {
    let data = t.data().chunks_exact(3).flat_map(|p| r.apply_vector([p[0], p[1], p[2]])).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

#[test]
fn nbody_featurization() {
    let samples = nbody_samples(1);
    let b = featurize(&samples, Task::Nbody).unwrap();
    assert_eq!(b.n_edges(), 20);
    assert!(b.deg.iter().all(|&d| d == 4));
    assert!(b.receivers.iter().zip(&b.senders).all(|(r, s)| r != s));
    assert_eq!(b.v.shape(), &[5, 2, 8]);
    assert_eq!(b.h.data(), samples[0].q.as_slice());
    let pos = b.vector_channel(0);
    for k in 0..3 {
        let mean: f64 = (0..5).map(|i| pos.data()[i * 3 + k]).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-12);
    }
    let vel = b.vector_channel(1);
    assert_eq!(vel.data()[..3], samples[0].v0[0]);
    b.validate().unwrap();
}

#[test]
fn denoise_featurization() {
    let b = featurize(&chain_samples(2), Task::Denoise).unwrap();
    assert_eq!(b.n_nodes(), 40);
    assert!(b.deg.iter().all(|&d| d == DENOISE_K));
    assert_eq!(b.h.shape(), &[40, 3]);
    assert_eq!(&b.h.data()[..6], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    b.validate().unwrap();

    let short = chain_samples(1)[0].clone();
    let cut = TrajectorySample {
        x0: short.x0[..16].to_vec(),
        v0: short.v0[..16].to_vec(),
        q: short.q[..16].to_vec(),
        x_target: short.x_target[..16].to_vec(),
    };
    assert!(matches!(featurize(&[cut], Task::Denoise), Err(DatasetError::GraphTooSmall { nodes: 16, needed: 17 })));
}

#[test]
fn knn_picks_nearest_with_index_ties() {
    let x: Vec<Vec3> = (0..5).map(|i| [i as f64, 0.0, 0.0]).collect();
    let n = knn(&x, 2).unwrap();
    assert_eq!(n[0], vec![1, 2]);
    assert_eq!(n[2], vec![1, 3]);
}

#[test]
fn batch_validation_rejects_bad_degrees() {
    let mut b = batch_for(Task::Nbody);
    b.deg[0] = 0;
    assert!(matches!(b.validate(), Err(GraphError::Contract(_))));
    let b = batch_for(Task::Nbody).with_edges(&[(0, 7)]);
    assert!(b.validate().unwrap_err().to_string().contains("crosses graphs"));
}

#[test]
fn full_models_are_o3_equivariant() {
    for cfg in all_configs() {
        let model = Model::new(cfg.clone()).unwrap();
        let store = model.init_params(3).unwrap();
        let batch = batch_for(cfg.task);
        let (p, h, v) = run(&model, &store, &batch, Precision::F64);
        let (mut p_err, mut h_err, mut v_err) = (0.0f64, 0.0f64, 0.0f64);
        for trial in 0..6u64 {
            let r = random_orthogonal(trial, if trial % 2 == 0 { 1 } else { -1 });
            let (pr, hr, vr) = run(&model, &store, &batch.transformed(&r), Precision::F64);
            p_err = p_err.max(pr.max_abs_diff(&rotate_rows(&p, &r)));
            h_err = h_err.max(hr.max_abs_diff(&h));
            if let (Some(v), Some(vr)) = (&v, &vr) {
                v_err = v_err.max(vr.max_abs_diff(&transform_mv(v, &r)));
            }
        }
        let tag = format!("{} {:?}", cfg.architecture, cfg.task);
        assert!(p_err <= 1e-8, "{tag}: position error {p_err}");
        assert!(h_err <= 1e-9, "{tag}: h error {h_err}");
        assert!(v_err <= 1e-8, "{tag}: v error {v_err}");
    }
}

#[test]
fn single_precision_equivariance() {
    for cfg in all_configs() {
        let model = Model::new(cfg.clone()).unwrap();
        let store = model.init_params(4).unwrap();
        let batch = batch_for(cfg.task);
        let r = random_orthogonal(11, -1);
        let (p, _, _) = run(&model, &store, &batch, Precision::F32);
        let (pr, _, _) = run(&model, &store, &batch.transformed(&r), Precision::F32);
        let err = pr.max_abs_diff(&rotate_rows(&p, &r));
        assert!(err <= 1e-3, "{}: {err}", cfg.architecture);
        assert!(err > 0.0);
    }
}

#[test]
fn permuting_nodes_permutes_predictions() {
    let perm = [3, 0, 4, 1, 2];
    let s = &nbody_samples(1)[0];
    let shuffled = TrajectorySample {
        x0: perm.iter().map(|&i| s.x0[i]).collect(),
        v0: perm.iter().map(|&i| s.v0[i]).collect(),
        q: perm.iter().map(|&i| s.q[i]).collect(),
        x_target: perm.iter().map(|&i| s.x_target[i]).collect(),
    };
    for arch in Architecture::ALL {
        let model = Model::new(small(arch, Task::Nbody)).unwrap();
        let store = model.init_params(5).unwrap();
        let p = model.predict(&store, &featurize(std::slice::from_ref(s), Task::Nbody).unwrap()).unwrap();
        let q = model.predict(&store, &featurize(std::slice::from_ref(&shuffled), Task::Nbody).unwrap()).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for k in 0..3 {
                assert!((q.data()[new * 3 + k] - p.data()[old * 3 + k]).abs() < 1e-12, "{arch}");
            }
        }
    }
}

#[test]
fn translation_shifts_predictions() {
    let t = [0.7, -2.0, 5.5];
    for cfg in all_configs() {
        let samples = match cfg.task {
            Task::Nbody => nbody_samples(1),
            Task::Denoise => chain_samples(1),
        };
        let shift = |v: &[Vec3]| v.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect::<Vec<_>>();
        let moved: Vec<TrajectorySample> = samples
            .iter()
            .map(|s| TrajectorySample {
                x0: shift(&s.x0),
                x_target: shift(&s.x_target),
                ..s.clone()
            })
            .collect();
        let model = Model::new(cfg.clone()).unwrap();
        let store = model.init_params(6).unwrap();
        let p = model.predict(&store, &featurize(&samples, cfg.task).unwrap()).unwrap();
        let q = model.predict(&store, &featurize(&moved, cfg.task).unwrap()).unwrap();
        let err = p
            .data()
            .chunks_exact(3)
            .zip(q.data().chunks_exact(3))
            .flat_map(|(a, b)| (0..3).map(move |k| (b[k] - a[k] - t[k]).abs()))
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "{} {:?}: {err}", cfg.architecture, cfg.task);
    }
}

#[test]
fn zero_weights_predict_initial_positions() {
    let batch = batch_for(Task::Nbody);
    for arch in Architecture::ALL {
        let model = Model::new(small(arch, Task::Nbody)).unwrap();
        let mut store = model.init_params(7).unwrap();
        store.zero_prefix("");
        let p = model.predict(&store, &batch).unwrap();
        assert!(p.max_abs_diff(&batch.x0) < 1e-12, "{arch}");
    }
}

#[test]
fn egnn_without_position_messages_keeps_positions() {
    let batch = batch_for(Task::Nbody);
    let model = Model::new(small(Architecture::Egnn, Task::Nbody)).unwrap();
    let mut store = model.init_params(8).unwrap();
    for l in 0..2 {
        store.zero_prefix(&format!("layer{l}.phi_x"));
        store.zero_prefix(&format!("layer{l}.phi_vel"));
    }
    let p = model.predict(&store, &batch).unwrap();
    assert!(p.max_abs_diff(&batch.x0) < 1e-12);
}

#[test]
fn isolated_node_keeps_its_multivectors() {
    let cfg = small(Architecture::CliffordEgnn, Task::Nbody);
    let batch = batch_for(Task::Nbody).with_edges(&[]);
    let layer = CliffordEgnnLayer::new("l", &cfg);
    let mut store = ParameterStore::new();
    layer.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let g = Graph::new(&batch);
    let mut tape = Tape::inference();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = tape.constant(crate::diffgraph::gradcheck::random_tensor(&[10, 8], -1.0, 1.0, &mut rng));
    let v = tape.constant(crate::diffgraph::gradcheck::random_tensor(&[10, 4, 8], -1.0, 1.0, &mut rng));
    let (h_new, v_new) = layer.forward(&mut tape, &store, &g, h, v).unwrap();
    assert_eq!(tape.value(v_new), tape.value(v));
    // h has no residual: it becomes phi_h([h, 0])
    let zeros = tape.constant(Tensor::zeros(&[10, 8]));
    let hm = tape.concat(&[h, zeros], 1).unwrap();
    let want = layer.update.phi_h.forward(&mut tape, &store, hm).unwrap();
    assert_eq!(tape.value(h_new), tape.value(want));
}

#[test]
fn mvn_layer_with_zero_edge_mlp_is_identity_on_multivectors() {
    let cfg = small(Architecture::MvnGnn, Task::Nbody);
    let batch = batch_for(Task::Nbody);
    let model = Model::new(cfg).unwrap();
    let mut store = model.init_params(9).unwrap();
    let layer = match &model.body {
        Body::Mvn(ls) => ls[0].clone(),
        _ => unreachable!(),
    };
    store.zero_prefix("layer0.phi_e_mv.1");
    let g = Graph::new(&batch);
    let mut tape = Tape::inference();
    let h = tape.constant(Tensor::full(&[10, 8], 0.3));
    let v = tape.constant(crate::diffgraph::gradcheck::random_tensor(&[10, 4, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3)));
    let (_, v_new) = layer.forward(&mut tape, &store, &g, h, v).unwrap();
    assert_eq!(tape.value(v_new), tape.value(v));
}

#[test]
fn mvp_isolated_node_still_updates() {
    let cfg = small(Architecture::MvpGnn, Task::Nbody);
    let batch = batch_for(Task::Nbody).with_edges(&[]);
    let layer = MvpGnnLayer::new("l", &cfg);
    let mut store = ParameterStore::new();
    layer.init(&mut store, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let g = Graph::new(&batch);
    let mut tape = Tape::inference();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = tape.constant(crate::diffgraph::gradcheck::random_tensor(&[10, 8], -1.0, 1.0, &mut rng));
    let v = tape.constant(crate::diffgraph::gradcheck::random_tensor(&[10, 4, 8], -1.0, 1.0, &mut rng));
    let (h_new, v_new) = layer.forward(&mut tape, &store, &g, h, v).unwrap();
    assert!(tape.value(h_new).max_abs_diff(tape.value(h)) > 1e-3);
    assert!(tape.value(v_new).max_abs_diff(tape.value(v)) > 1e-3);
    assert!(tape.value(v_new).all_finite());
}

#[test]
fn duplicated_edges_double_sums_and_degrees() {
    let cfg = ModelConfig {
        psi: PsiComposition::Residual,
        ..small(Architecture::CliffordEgnn, Task::Nbody)
    };
    let batch = batch_for(Task::Nbody);
    let edges: Vec<(usize, usize)> = batch.receivers.iter().copied().zip(batch.senders.iter().copied()).collect();
    let doubled: Vec<(usize, usize)> = edges.iter().chain(&edges).copied().collect();
    let twice = batch.clone().with_edges(&doubled);
    assert!(twice.deg.iter().zip(&batch.deg).all(|(a, b)| *a == 2 * b));

    let layer = CliffordEgnnLayer::new("l", &cfg);
    let mut store = ParameterStore::new();
    layer.init(&mut store, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    // psi reduces to its linear residual, so the update is (res(sum)) / sqrt(deg)
    store.zero_prefix("l.psi.a");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h0 = crate::diffgraph::gradcheck::random_tensor(&[10, 8], -1.0, 1.0, &mut rng);
    let v0 = crate::diffgraph::gradcheck::random_tensor(&[10, 4, 8], -1.0, 1.0, &mut rng);
    let delta = |b: &GraphBatch| {
        let g = Graph::new(b);
        let mut tape = Tape::inference();
        let (h, v) = (tape.constant(h0.clone()), tape.constant(v0.clone()));
        let (_, v_new) = layer.forward(&mut tape, &store, &g, h, v).unwrap();
        let d: Vec<f64> = tape.value(v_new).data().iter().zip(v0.data()).map(|(a, b)| a - b).collect();
        d
    };
    let (once, two) = (delta(&batch), delta(&twice));
    let err = once.iter().zip(&two).map(|(a, b)| (b - std::f64::consts::SQRT_2 * a).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");
    assert!(once.iter().any(|x| x.abs() > 1e-3));
}

#[test]
fn loss_gradients_match_finite_differences() {
    let s = &nbody_samples(1)[0];
    let toy = TrajectorySample {
        x0: s.x0[..3].to_vec(),
        v0: s.v0[..3].to_vec(),
        q: s.q[..3].to_vec(),
        x_target: s.x_target[..3].to_vec(),
    };
    let batch = featurize(&[toy], Task::Nbody).unwrap();
    for arch in Architecture::ALL {
        for per_grade in [false, true] {
            let cfg = ModelConfig {
                per_grade_invariants: per_grade,
                ..small(arch, Task::Nbody)
            };
            let model = Model::new(cfg).unwrap();
            let store = model.init_params(10).unwrap();
            let rep = check_params(arch.name(), &store, |t, st| model.loss(t, st, &batch), 60, 11).unwrap();
            assert!(rep.passes(1e-5), "{rep:?} per_grade={per_grade}");
        }
    }
}

#[test]
fn parameter_checks() {
    let model = Model::new(small(Architecture::CliffordEgnn, Task::Nbody)).unwrap();
    let store = model.init_params(1).unwrap();
    model.check_params(&store).unwrap();
    let other = Model::new(small(Architecture::MvpGnn, Task::Nbody)).unwrap();
    assert!(other.check_params(&store).is_err());
    assert!(Model::new(ModelConfig {
        layers: 0,
        ..small(Architecture::Egnn, Task::Nbody)
    })
    .is_err());
    let wrong_task = batch_for(Task::Denoise);
    assert!(model.predict(&store, &wrong_task).is_err());
    assert_eq!("mvp-gnn".parse::<Architecture>().unwrap(), Architecture::MvpGnn);
    assert!("gvp".parse::<Architecture>().is_err());
}

use dpclip_core::accountant::account;
use dpclip_core::dpcore::ClipMode;
use dpclip_core::harness::presets::{easy_task_config, hard_task_config};
use dpclip_core::harness::sweep::aggregate;
use dpclip_core::harness::{
    gen_task, loss_and_grads, mean_loss, nearest_centroid_error, sweep, train, train_run, Dataset, HeadShape,
    OptimizerKind, Privacy, SweepGrid, SyntheticTaskConfig, TrainConfig, DEFAULT_DELTA,
};
use dpclip_core::kvconfig::KvConfig;
use dpclip_core::seed::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_task(seed: u64) -> dpclip_core::harness::Task {
    let cfg = SyntheticTaskConfig {
        train_size: 300,
        test_size: 200,
        ..SyntheticTaskConfig::balanced(4, 2.0, 0.7, seed)
    };
    gen_task(&cfg).unwrap()
}

fn private(eta: f64, batch_size: usize, epsilon: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        eta,
        batch_size,
        clip_mode: ClipMode::Normalized { bound: 1.0 },
        epochs: 4,
        privacy: Privacy::Target {
            epsilon,
            delta: DEFAULT_DELTA,
        },
        optimizer: OptimizerKind::Adam,
        seed,
    }
}

#[test]
fn gradients_match_finite_differences() {
    let task = small_task(1);
    let data = task.train.subset(&(0..12).collect::<Vec<_>>());
    let shape = HeadShape::of(&data);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let params: Vec<f64> = (0..shape.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, grads) = loss_and_grads(&params, &data).unwrap();
        for i in 0..data.len() {
            let one = data.subset(&[i]);
            let an = grads.row(i);
            let mut worst: f64 = 0.0;
            for k in 0..params.len() {
                let h = 1e-6 * (1.0 + params[k].abs());
                let mut p = params.clone();
                p[k] += h;
                let up = mean_loss(&p, &one);
                p[k] -= 2.0 * h;
                let down = mean_loss(&p, &one);
                worst = worst.max(((up - down) / (2.0 * h) - an[k]).abs());
            }
            let scale = an.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(worst <= 1e-5 * scale, "example {i}: {worst} vs scale {scale}");
        }
    }
}

#[test]
fn zero_head_is_uniform() {
    for k in [2, 3, 5, 7] {
        let data = gen_task(&SyntheticTaskConfig {
            train_size: 64,
            test_size: 16,
            ..SyntheticTaskConfig::balanced(k, 1.0, 0.5, k as u64)
        })
        .unwrap()
        .train;
        let shape = HeadShape::of(&data);
        let (loss, grads) = loss_and_grads(&shape.zeros(), &data).unwrap();
        assert!((loss - (k as f64).ln()).abs() <= 1e-12, "K={k}: {loss}");
        let d = data.dim;
        for i in 0..data.len() {
            let (x, y) = (data.row(i), data.labels[i]);
            let row = grads.row(i);
            for c in 0..k {
                let p = 1.0 / k as f64 - if c == y { 1.0 } else { 0.0 };
                for j in 0..d {
                    assert_eq!(row[c * d + j], p * x[j]);
                }
                assert_eq!(row[k * d + c], p);
            }
        }
    }
}

/// Full-batch gradient descent with its own softmax and gradient code.
fn reference_gd(data: &Dataset, eta: f64, steps: usize) -> Vec<f64> {
    let (k, d, n) = (data.num_classes, data.dim, data.len());
    let mut w = vec![0.0; k * d + k];
    for _ in 0..steps {
        let mut g = vec![0.0; w.len()];
        for i in 0..n {
            let x = data.row(i);
            let z: Vec<f64> = (0..k)
                .map(|c| (0..d).map(|j| w[c * d + j] * x[j]).sum::<f64>() + w[k * d + c])
                .collect();
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
            for c in 0..k {
                let p = (z[c] - zmax).exp() / denom - if c == data.labels[i] { 1.0 } else { 0.0 };
                for j in 0..d {
                    g[c * d + j] += p * x[j];
                }
                g[k * d + c] += p;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= eta * gi / n as f64;
        }
    }
    w
}

#[test]
fn inert_privacy_machinery_is_gradient_descent() {
    let task = small_task(2);
    let n = task.train.len();
    let cfg = TrainConfig {
        eta: 0.5,
        batch_size: n,
        clip_mode: ClipMode::Standard { bound: 1e12 },
        epochs: 25,
        privacy: Privacy::Noise {
            sigma: 0.0,
            delta: DEFAULT_DELTA,
        },
        optimizer: OptimizerKind::Sgd,
        seed: 3,
    };
    let run = train_run(&task, &cfg).unwrap();
    assert_eq!(run.metrics.total_steps, 25);
    assert_eq!(run.metrics.realized_epsilon, None);
    let want = reference_gd(&task.train, 0.5, 25);
    for (a, b) in run.params.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn same_seed_same_run() {
    let task = small_task(4);
    let cfg = private(0.01, 64, 2.0, 11);
    let a = train_run(&task, &cfg).unwrap();
    let b = train_run(&task, &cfg).unwrap();
    assert_eq!(a, b);
    let c = train(&task, &TrainConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a.metrics, c);
    assert_eq!(gen_task(&task.config).unwrap(), task);
}

#[test]
fn metrics_have_one_entry_per_epoch() {
    let task = small_task(5);
    let m = train(&task, &private(0.01, 50, 1.0, 5)).unwrap();
    assert!(m.is_completed());
    assert_eq!(m.epochs.len(), 4);
    assert_eq!(m.epochs.last().unwrap().steps_done, m.total_steps);
    for e in &m.epochs {
        assert_eq!(e.grad_norms.count, task.train.len());
        assert_eq!(e.per_class_accuracy.len(), 4);
    }
}

#[test]
fn privacy_bookkeeping() {
    let task = small_task(6);
    for (eps, b) in [(0.25, 16), (0.5, 30), (1.0, 100), (4.0, 150), (8.0, 300)] {
        let m = train(&task, &private(0.01, b, eps, 1)).unwrap();
        let recomputed = account(m.sigma, m.sampling_rate, m.total_steps, m.delta).unwrap();
        assert_eq!(m.realized_epsilon, Some(recomputed));
        assert!(recomputed <= eps + 1e-3, "{recomputed} > {eps}");
    }
}

#[test]
fn easy_task_is_learned_under_loose_privacy() {
    for seed in 0..3 {
        let task = gen_task(&easy_task_config(seed)).unwrap();
        let cfg = TrainConfig {
            eta: 0.03,
            epochs: 8,
            batch_size: 256,
            ..private(0.03, 256, 8.0, derive_seed(seed, &[1]))
        };
        let acc = train(&task, &cfg).unwrap().final_macro_accuracy().unwrap();
        assert!(acc >= 0.9, "seed {seed}: {acc}");
    }
}

#[test]
fn well_separated_classes_fit_almost_perfectly() {
    let task = gen_task(&SyntheticTaskConfig::balanced(5, 25.0, 1.0, 8)).unwrap();
    let cfg = TrainConfig {
        eta: 0.1,
        batch_size: task.train.len(),
        clip_mode: ClipMode::Standard { bound: 1e12 },
        epochs: 200,
        privacy: Privacy::Noise {
            sigma: 0.0,
            delta: DEFAULT_DELTA,
        },
        optimizer: OptimizerKind::Adam,
        seed: 0,
    };
    let acc = train(&task, &cfg).unwrap().final_macro_accuracy().unwrap();
    assert!(acc >= 0.99, "{acc}");
}

#[test]
fn backbone_quality_controls_overlap() {
    let errs: Vec<f64> = [1.0, 0.6, 0.2]
        .iter()
        .map(|&q| {
            let t = gen_task(&SyntheticTaskConfig::balanced(5, 1.5, q, 17)).unwrap();
            nearest_centroid_error(&t.train, &t.test)
        })
        .collect();
    assert_eq!(errs, vec![0.492, 0.531, 0.6]);
}

fn tiny_grid(repeats: usize) -> SweepGrid {
    SweepGrid {
        etas: vec![0.003, 0.03],
        batch_sizes: vec![50, 100],
        clip_modes: vec![
            ClipMode::Normalized { bound: 0.1 },
            ClipMode::Normalized { bound: 10.0 },
        ],
        privacies: vec![Privacy::Target {
            epsilon: 1.0,
            delta: DEFAULT_DELTA,
        }],
        epochs: 2,
        optimizer: OptimizerKind::Adam,
        repeats,
        master_seed: 77,
    }
}

#[test]
fn single_cell_sweep_is_a_training_run() {
    let task = small_task(7);
    let grid = SweepGrid {
        etas: vec![0.01],
        batch_sizes: vec![64],
        clip_modes: vec![ClipMode::Standard { bound: 0.5 }],
        privacies: vec![Privacy::Target {
            epsilon: 2.0,
            delta: DEFAULT_DELTA,
        }],
        epochs: 3,
        optimizer: OptimizerKind::Sgd,
        repeats: 1,
        master_seed: 5,
    };
    let res = sweep(&task, &grid).unwrap();
    assert_eq!(res.records.len(), 1);
    let cfg = TrainConfig {
        eta: 0.01,
        batch_size: 64,
        clip_mode: ClipMode::Standard { bound: 0.5 },
        epochs: 3,
        privacy: Privacy::Target {
            epsilon: 2.0,
            delta: DEFAULT_DELTA,
        },
        optimizer: OptimizerKind::Sgd,
        seed: derive_seed(5, &[0, 0]),
    };
    assert_eq!(res.records[0].config, cfg);
    assert_eq!(res.records[0].outcome.as_ref().unwrap(), &train(&task, &cfg).unwrap());
    let agg = &res.aggregates[0];
    assert_eq!(agg.mean_accuracy, res.records[0].accuracy());
    assert_eq!(agg.min_accuracy, agg.max_accuracy);
}

#[test]
fn aggregates_match_direct_recomputation() {
    let task = small_task(8);
    let grid = tiny_grid(3);
    let res = sweep(&task, &grid).unwrap();
    assert_eq!(res.records.len(), 8 * 3);
    assert_eq!(aggregate(&grid.configs(), &res.records), res.aggregates);
    for agg in &res.aggregates {
        let accs: Vec<f64> = res
            .records
            .iter()
            .filter(|r| r.config_index == agg.config_index)
            .map(|r| r.accuracy().unwrap())
            .collect();
        assert_eq!(accs.len(), 3);
        let mean = accs.iter().sum::<f64>() / 3.0;
        assert!((agg.mean_accuracy.unwrap() - mean).abs() < 1e-15);
        assert_eq!(
            agg.min_accuracy.unwrap(),
            accs.iter().cloned().fold(f64::INFINITY, f64::min)
        );
        assert_eq!(
            agg.max_accuracy.unwrap(),
            accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        );
        assert_eq!(agg.failures, 0);
    }
    assert_eq!(sweep(&task, &grid).unwrap(), res);
}

#[test]
fn config_files_roundtrip() {
    let grid = tiny_grid(2);
    let kv = grid.to_kv().unwrap();
    assert_eq!(
        SweepGrid::from_kv(&KvConfig::parse(&kv.to_text()).unwrap()).unwrap(),
        grid
    );

    let cfg = TrainConfig {
        clip_mode: ClipMode::AutoS { gamma: 0.02 },
        optimizer: OptimizerKind::Sgd,
        ..private(0.125, 33, 0.75, 99)
    };
    assert_eq!(
        TrainConfig::from_kv(&KvConfig::parse(&cfg.to_kv().to_text()).unwrap()).unwrap(),
        cfg
    );

    let task = hard_task_config(4);
    assert_eq!(
        SyntheticTaskConfig::from_kv(&KvConfig::parse(&task.to_kv().to_text()).unwrap()).unwrap(),
        task
    );
}

#[test]
fn hard_task_is_imbalanced_and_noisier() {
    let hard = gen_task(&hard_task_config(0)).unwrap();
    let easy = gen_task(&easy_task_config(0)).unwrap();
    let counts = hard.train.class_counts();
    assert!(counts.windows(2).all(|w| w[0] > w[1]), "{counts:?}");
    assert!(nearest_centroid_error(&hard.train, &hard.test) > nearest_centroid_error(&easy.train, &easy.test) + 0.1);
}

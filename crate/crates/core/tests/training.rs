use reid_compress::bench::{run_sweep, QuantSetting, SweepConfig};
use reid_compress::dataset::{generate_synthetic, Dataset, SynthConfig};
use reid_compress::methods::MethodRegistry;
use reid_compress::model::{embed_matrix, init_params, CompressionMode, ModelParams};
use reid_compress::store::size_report;
use reid_compress::training::{iterative_prune_train, train_with_params, TrainConfig};
use reid_compress::Matrix;

fn small_data(seed: u64) -> Dataset {
    generate_synthetic(&SynthConfig {
        num_identities: 10,
        views_per_identity: 4,
        feature_dim: 8,
        intrinsic_dim: 3,
        view_noise: 0.1,
        seed,
    })
    .unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 6,
        hidden_dim: 12,
        embed_dim: 12,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

/// Mean per-dimension variance of the rows.
fn embedding_variance(m: &Matrix) -> f64 {
    let n = m.rows() as f64;
    (0..m.cols())
        .map(|j| {
            let col: Vec<f64> = (0..m.rows()).map(|i| f64::from(m.get(i, j))).collect();
            let mean = col.iter().sum::<f64>() / n;
            col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
        })
        .sum::<f64>()
        / m.cols() as f64
}

/// Every input maps to the same embedding: zero weights, positive biases.
fn constant_encoder(ds: &Dataset, cfg: &TrainConfig) -> ModelParams {
    let mut p = init_params(ds.feature_dim(), cfg.hidden_dim, cfg.embed_dim, ds.num_identities(), &CompressionMode::Full, 3).unwrap();
    p.encoder.w1 = Matrix::zeros(ds.feature_dim(), cfg.hidden_dim);
    p.encoder.w2 = Matrix::zeros(cfg.hidden_dim, cfg.embed_dim);
    p.encoder.b1 = vec![0.5; cfg.hidden_dim];
    p.encoder.b2 = vec![0.25; cfg.embed_dim];
    p
}

#[test]
fn classifier_loss_prevents_collapse() {
    let ds = small_data(11);
    let cfg = TrainConfig {
        epochs: 20,
        ..small_cfg()
    };
    let start = constant_encoder(&ds, &cfg);
    let initial = embed_matrix(&start.encoder, None, &CompressionMode::Full, ds.features()).unwrap();
    assert_eq!(embedding_variance(&initial), 0.0);

    let triplet_only = TrainConfig {
        classifier_weight: 0.0,
        ..cfg.clone()
    };
    let collapsed = train_with_params(&ds, &triplet_only, start.clone()).unwrap();
    let e = embed_matrix(&collapsed.params.encoder, None, &CompressionMode::Full, ds.features()).unwrap();
    assert_eq!(embedding_variance(&e), 0.0, "triplet loss alone cannot leave the collapsed state");

    let with_classifier = train_with_params(&ds, &cfg, start).unwrap();
    let e = embed_matrix(&with_classifier.params.encoder, None, &CompressionMode::Full, ds.features()).unwrap();
    assert!(embedding_variance(&e) > 1e-6, "classifier loss should spread the embeddings");
}

#[test]
fn prune_history_is_nested_and_ends_at_target() {
    let ds = small_data(4);
    let cfg = TrainConfig {
        epochs: 5,
        prune_rounds: 4,
        ..small_cfg()
    };
    let model = iterative_prune_train(&ds, &cfg, 3).unwrap();
    assert_eq!(model.prune_history.len(), 4);
    for w in model.prune_history.windows(2) {
        assert!(w[1].is_subset_of(&w[0]), "{:?} not inside {:?}", w[1], w[0]);
        assert!(w[1].len() <= w[0].len());
    }
    assert_eq!(model.prune_history.last().unwrap().len(), 3);
    assert_eq!(model.compressed_dim(), 3);
    assert_eq!(model.epochs_run(), 5 + 4);
}

#[test]
fn every_method_is_a_pure_function_of_data_and_config() {
    let ds = small_data(9);
    let registry = MethodRegistry::builtin();
    for qat in [false, true] {
        let cfg = TrainConfig { qat, ..small_cfg() };
        for name in registry.names() {
            let dim = if name == "full" { 12 } else { 5 };
            let m = registry.get(name).unwrap();
            let a = m.train(&ds, &cfg, dim).unwrap();
            let b = m.train(&ds, &cfg, dim).unwrap();
            assert_eq!(a.params, b.params, "{name} qat={qat}");
            assert_eq!(a.history, b.history, "{name} qat={qat}");
            assert_eq!(a.mode, b.mode);
            assert_eq!(a.qat, b.qat);
        }
    }
}

fn tiny_sweep(methods: &[&str], dims: Vec<usize>) -> SweepConfig {
    SweepConfig {
        data: SynthConfig {
            num_identities: 12,
            views_per_identity: 4,
            feature_dim: 8,
            intrinsic_dim: 3,
            view_noise: 0.1,
            seed: 2,
        },
        train: TrainConfig {
            epochs: 5,
            ..small_cfg()
        },
        methods: methods.iter().map(|s| s.to_string()).collect(),
        dims,
        ..SweepConfig::default()
    }
}

#[test]
fn sweep_rows_are_consistent() {
    let cfg = tiny_sweep(&["slice", "lowrank", "prune"], vec![6, 2]);
    let rows = run_sweep(&cfg, &MethodRegistry::builtin()).unwrap();
    assert_eq!(rows.len(), 2 + 3 * 2 * 2);
    for r in &rows {
        let bits = if r.quantized { 8 } else { 32 };
        assert_eq!(r.ratio, size_report(12, 32, r.compressed_dim, bits).unwrap().ratio, "{r:?}");
        assert!(r.wall_time.is_none());
        let expected_epochs = if r.method == "prune" {
            // epochs x (1 + rounds x fraction) = 5 x 2
            10
        } else {
            5
        };
        assert_eq!(r.train_epochs_total, expected_epochs, "{r:?}");
        assert!((0.0..=1.0).contains(&r.map) && r.rank5 >= r.rank1);
    }
    // exactly one row per (method, dim, quantized)
    for m in ["slice", "lowrank", "prune"] {
        for d in [6, 2] {
            assert_eq!(rows.iter().filter(|r| r.method == m && r.compressed_dim == d).count(), 2);
        }
    }
}

#[test]
fn slice_at_full_width_reproduces_the_baseline() {
    let cfg = SweepConfig {
        quantization: QuantSetting::Off,
        ..tiny_sweep(&["slice"], vec![12])
    };
    let rows = run_sweep(&cfg, &MethodRegistry::builtin()).unwrap();
    assert_eq!(rows.len(), 2);
    let (full, slice) = (&rows[0], &rows[1]);
    assert_eq!(full.method, "full");
    assert_eq!((full.map, full.rank1, full.rank5), (slice.map, slice.rank1, slice.rank5));
    assert_eq!(full.ratio, 1.0);
}

#[test]
fn sweep_failure_names_the_cell() {
    let mut cfg = tiny_sweep(&["lowrank"], vec![3]);
    cfg.train.learning_rate = 1e30;
    let err = run_sweep(&cfg, &MethodRegistry::builtin()).unwrap_err().to_string();
    assert!(err.contains("method="), "{err}");
}

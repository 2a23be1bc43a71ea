use fednsim::data::{self, ClientData, Dataset, PartitionSpec, PartitionStrategy};
use fednsim::federation::{self, Aggregation, ClientUpdate, Federation, FederationConfig, RunOptions};
use fednsim::losses::{LossConfig, Method};
use fednsim::model::{self, Matrix, MlpConfig, ParamVector};

fn small_setup(strategy: PartitionStrategy) -> (MlpConfig, Dataset, Dataset, Vec<ClientData>) {
    let (train, test) = data::synth_train_test(4, 40, 10, 6, 2.0, 7).unwrap();
    let spec = PartitionSpec {
        strategy,
        shards_per_client: 2,
        alpha: 0.3,
        num_clients: 8,
        seed: 7,
    };
    let partition = spec.apply(&train).unwrap();
    let cfg = MlpConfig::new(6, vec![8], 4).unwrap();
    (cfg, train, test, partition)
}

fn config(method: Method, beta: f64) -> FederationConfig {
    FederationConfig {
        rounds: 4,
        local_epochs: 2,
        batch_size: 10,
        sampling_ratio: 0.5,
        loss: LossConfig {
            method,
            beta,
            ..LossConfig::default()
        },
        lr0: 0.05,
        master_seed: 3,
        ..FederationConfig::default()
    }
}

fn run(
    cfg: &MlpConfig,
    fc: &FederationConfig,
    train: &Dataset,
    test: &Dataset,
    partition: &[ClientData],
    threads: Option<usize>,
) -> (ParamVector, Vec<fednsim::metrics::RoundLog>) {
    let fed = Federation {
        model: cfg,
        config: fc,
        dataset: train,
        partition,
        testset: test,
    };
    let options = RunOptions {
        threads,
        ..RunOptions::default()
    };
    let state = fed.run(model::init_params(cfg, fc.master_seed), &options).unwrap();
    (state.global, state.history)
}

fn bits(p: &ParamVector) -> Vec<u64> {
    p.0.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn fedntd_with_zero_beta_is_fedavg_bit_for_bit() {
    let (cfg, train, test, partition) = small_setup(PartitionStrategy::Sharding);
    let (a, ha) = run(&cfg, &config(Method::FedAvg, 1.0), &train, &test, &partition, Some(1));
    let (b, hb) = run(&cfg, &config(Method::FedNtd, 0.0), &train, &test, &partition, Some(1));
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(ha, hb);
}

#[test]
fn fedprox_with_zero_mu_is_fedavg_bit_for_bit() {
    let (cfg, train, test, partition) = small_setup(PartitionStrategy::Sharding);
    let mut prox = config(Method::FedProx, 1.0);
    prox.loss.mu = 0.0;
    let (a, _) = run(&cfg, &config(Method::FedAvg, 1.0), &train, &test, &partition, Some(1));
    let (b, _) = run(&cfg, &prox, &train, &test, &partition, Some(1));
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let (cfg, train, test, partition) = small_setup(PartitionStrategy::Dirichlet);
    let fc = config(Method::FedNtd, 1.0);
    let (a, ha) = run(&cfg, &fc, &train, &test, &partition, Some(1));
    let (b, hb) = run(&cfg, &fc, &train, &test, &partition, Some(4));
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(ha, hb);
    assert_eq!(ha.len(), fc.rounds);
}

#[test]
fn every_method_trains_without_error() {
    let (cfg, train, test, partition) = small_setup(PartitionStrategy::Iid);
    for method in [Method::FedAvg, Method::FedProx, Method::FedNtd, Method::FedNtdMse, Method::Kd, Method::KdNtdInterp] {
        let (p, h) = run(&cfg, &config(method, 0.5), &train, &test, &partition, None);
        assert!(p.is_finite(), "{method:?}");
        assert!(h.iter().all(|l| l.train_loss.is_finite()));
    }
}

#[test]
fn single_full_batch_step_matches_hand_computed_update() {
    // Linear softmax model, one client, one epoch, one batch.
    let x = Matrix::from_vec(3, 2, vec![1.0, 0.5, -0.3, 2.0, 0.7, -1.2]).unwrap();
    let labels = vec![0, 1, 2];
    let ds = Dataset::new(x.clone(), labels.clone(), 3).unwrap();
    let cfg = MlpConfig::new(2, vec![], 3).unwrap();
    let w0 = ParamVector(vec![0.1, -0.2, 0.3, 0.05, -0.4, 0.25, 0.01, 0.02, -0.03]);
    let client = ClientData {
        client_id: 0,
        indices: vec![0, 1, 2],
    };
    let fc = FederationConfig {
        local_epochs: 1,
        batch_size: 3,
        weight_decay: 0.0,
        ..FederationConfig::default()
    };
    let lr = 0.5;
    let update = federation::local_train(&cfg, &w0, &client, &ds, &fc, 1, lr).unwrap();

    let mut expected = w0.0.clone();
    let mut grad = [0.0; 9];
    for (r, &y) in labels.iter().enumerate() {
        let xi = x.row(r);
        let z: Vec<f64> = (0..3).map(|k| w0.0[6 + k] + w0.0[2 * k] * xi[0] + w0.0[2 * k + 1] * xi[1]).collect();
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        for k in 0..3 {
            let d = e[k] / s - if k == y { 1.0 } else { 0.0 };
            grad[2 * k] += d * xi[0] / 3.0;
            grad[2 * k + 1] += d * xi[1] / 3.0;
            grad[6 + k] += d / 3.0;
        }
    }
    for (w, g) in expected.iter_mut().zip(grad) {
        *w -= lr * g;
    }
    for (a, b) in update.params.0.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert_eq!(update.sample_count, 3);
}

#[test]
fn equal_sizes_make_weighted_and_uniform_aggregation_agree() {
    let updates: Vec<ClientUpdate> = (0..7)
        .map(|k| ClientUpdate {
            client_id: k,
            params: ParamVector((0..5).map(|i| ((k * 5 + i) as f64 * 0.37).sin()).collect()),
            sample_count: 42,
            mean_loss: 0.0,
        })
        .collect();
    let a = federation::aggregate(&updates, Aggregation::SizeWeighted).unwrap();
    let b = federation::aggregate(&updates, Aggregation::Uniform).unwrap();
    for (x, y) in a.0.iter().zip(&b.0) {
        assert!((x - y).abs() <= 1e-15);
    }
}

#[test]
fn checkpoints_hold_the_global_model() {
    let (cfg, train, test, partition) = small_setup(PartitionStrategy::Sharding);
    let fc = config(Method::FedNtd, 1.0);
    let dir = tempfile::tempdir().unwrap();
    let fed = Federation {
        model: &cfg,
        config: &fc,
        dataset: &train,
        partition: &partition,
        testset: &test,
    };
    let options = RunOptions {
        threads: Some(2),
        checkpoint_dir: Some(dir.path().to_path_buf()),
        checkpoint_every: 2,
    };
    let state = fed.run(model::init_params(&cfg, 3), &options).unwrap();
    assert!(dir.path().join("checkpoint_round_2.bin").exists());
    let bytes = std::fs::read(dir.path().join("checkpoint_round_4.bin")).unwrap();
    let restored = ParamVector::read_from(&bytes[..]).unwrap();
    assert_eq!(bits(&restored), bits(&state.global));
}

#[test]
fn eval_every_thins_the_log_but_keeps_the_last_round() {
    let (cfg, train, test, partition) = small_setup(PartitionStrategy::Sharding);
    let mut fc = config(Method::FedAvg, 1.0);
    fc.rounds = 5;
    fc.eval_every = 2;
    let (_, h) = run(&cfg, &fc, &train, &test, &partition, Some(1));
    let rounds: Vec<usize> = h.iter().map(|l| l.round).collect();
    assert_eq!(rounds, vec![2, 4, 5]);
}

#[test]
fn mismatched_model_is_rejected() {
    let (_, train, test, partition) = small_setup(PartitionStrategy::Sharding);
    let wrong = MlpConfig::new(5, vec![8], 4).unwrap();
    let fc = config(Method::FedAvg, 1.0);
    let fed = Federation {
        model: &wrong,
        config: &fc,
        dataset: &train,
        partition: &partition,
        testset: &test,
    };
    assert!(fed.run(model::init_params(&wrong, 0), &RunOptions::default()).is_err());
}

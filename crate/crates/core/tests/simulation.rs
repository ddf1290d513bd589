use fedmtl::fedsim::{self, sync, Algorithm, OptimizerConfig, SimConfig, Simulation};
use fedmtl::gnn::{ModelConfig, ParamGroup};
use fedmtl::graph::{Dataset, TaskType};
use fedmtl::partition::MaskMode;
use fedmtl::synthetic::{generate, SyntheticConfig};
use fedmtl::tensor::Matrix;
use fedmtl::topology::{self, ConnectionMatrix, TopologyKind};
use fedmtl::Error;

fn dataset(seed: u64) -> Dataset {
    generate(&SyntheticConfig {
        num_graphs: 60,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn small(algorithm: Algorithm, clients: usize) -> SimConfig {
    let mut cfg = SimConfig {
        algorithm,
        rounds: 3,
        eta: 0.01,
        seed: 1,
        model: ModelConfig {
            hidden: 6,
            d_node: 6,
            d_pool: 5,
            ..ModelConfig::default()
        },
        ..Default::default()
    };
    cfg.partition.clients = clients;
    cfg.partition.mask_mode = MaskMode::None;
    cfg
}

#[test]
fn defaults_follow_the_reported_hyperparameters() {
    let cfg: SimConfig = serde_json::from_str("{}").unwrap();
    assert_eq!(cfg.eta, 0.0015);
    assert_eq!(cfg.rounds, 150);
    assert_eq!((cfg.tau, cfg.local_epochs), (1, 1));
    assert_eq!(cfg.model.dropout, 0.3);
    assert_eq!(
        (cfg.model.hidden, cfg.model.d_pool, cfg.model.layers),
        (64, 64, 2)
    );
    assert_eq!(cfg.mtl.lambda1, 0.001);
    assert!(matches!(cfg.optimizer, OptimizerConfig::Adam { .. }));
}

#[test]
fn unknown_keys_and_zero_tau_are_rejected() {
    let err = serde_json::from_str::<SimConfig>(r#"{"taus": 3}"#)
        .unwrap_err()
        .to_string();
    assert!(err.contains("taus") && err.contains("tau"), "{err}");
    let cfg: SimConfig = serde_json::from_str(r#"{"tau": 0}"#).unwrap();
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn fedavg_with_one_client_is_isolated_training() {
    let ds = dataset(3);
    let a = fedsim::run(small(Algorithm::Fedavg, 1), &ds).unwrap();
    let b = fedsim::run(small(Algorithm::Isolated, 1), &ds).unwrap();
    assert_eq!(
        fedsim::metrics_csv_string(&a.records).unwrap(),
        fedsim::metrics_csv_string(&b.records).unwrap()
    );
}

#[test]
fn rerun_is_bit_identical() {
    let ds = dataset(4);
    let cfg = small(Algorithm::Spreadgnn, 4);
    let a = fedsim::run(cfg.clone(), &ds).unwrap();
    let b = fedsim::run(cfg, &ds).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_learning_rate_changes_nothing_without_communication() {
    let ds = dataset(5);
    let mut cfg = small(Algorithm::Isolated, 3);
    cfg.eta = 0.0;
    let mut sim = Simulation::new(cfg, &ds).unwrap();
    let before: Vec<_> = sim.clients.iter().map(|c| c.params.clone()).collect();
    sim.run().unwrap();
    for (c, b) in sim.clients.iter().zip(&before) {
        assert_eq!(&c.params, b);
    }
}

#[test]
fn every_round_logs_a_finite_gradient_norm() {
    let ds = dataset(6);
    let r = fedsim::run(small(Algorithm::Spreadgnn, 3), &ds).unwrap();
    assert_eq!(r.records.len(), 3);
    for rec in &r.records {
        let g = rec.grad_norm_sq.unwrap();
        assert!(g.is_finite() && g >= 0.0);
        assert!(rec
            .per_client
            .iter()
            .flatten()
            .all(|m| (0.0..=1.0).contains(m)));
    }
    assert!(r.initial_objective.is_finite());
}

#[test]
fn csv_has_a_row_per_client_plus_mean() {
    let ds = dataset(7);
    let r = fedsim::run(small(Algorithm::Fedgmtl, 3), &ds).unwrap();
    let csv = fedsim::metrics_csv_string(&r.records).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "round,client,metric,loss,grad_norm_sq,consensus");
    assert_eq!(lines.len(), 1 + 3 * 4);
    assert!(lines[4].starts_with("1,mean,"));
    assert!(lines.iter().skip(1).all(|l| l.split(',').count() == 6));
}

#[test]
fn ring_c4_average_matches_direct_weighted_sum() {
    let ds = dataset(8);
    let mut cfg = small(Algorithm::Spreadgnn, 4);
    cfg.topology.kind = TopologyKind::Ring;
    cfg.topology.n_neighbors = 2;
    let mut sim = Simulation::new(cfg, &ds).unwrap();
    for (i, c) in sim.clients.iter_mut().enumerate() {
        for (_, _, m) in c.params.entries_mut() {
            *m = Matrix::from_fn(m.rows(), m.cols(), |r, col| {
                (i + 1) as f64 * 0.1 + (r * 7 + col) as f64 * 1e-3
            });
        }
    }
    let before: Vec<_> = sim.clients.iter().map(|c| c.params.clone()).collect();
    sync::periodic_average(&mut sim.clients, &sim.mix, false).unwrap();
    for (id, g, m) in sim.clients[0].params.entries() {
        let mut expect = Matrix::zeros(m.rows(), m.cols());
        for j in [3, 0, 1] {
            expect.axpy(1.0 / 3.0, before[j].get(id).unwrap()).unwrap();
        }
        assert!(m.max_abs_diff(&expect) < 1e-12, "{g:?}");
    }
}

#[test]
fn complete_topology_reaches_the_global_average() {
    let ds = dataset(9);
    let mut cfg = small(Algorithm::Spreadgnn, 5);
    cfg.topology.kind = TopologyKind::Complete;
    let mut sim = Simulation::new(cfg, &ds).unwrap();
    for (i, c) in sim.clients.iter_mut().enumerate() {
        for (_, _, m) in c.params.entries_mut() {
            *m = m.scale(i as f64 + 1.0);
        }
    }
    sync::periodic_average(&mut sim.clients, &sim.mix, false).unwrap();
    assert!(sync::consensus_distance(&sim.clients).unwrap() < 1e-20);
}

#[test]
fn exchange_does_not_depend_on_client_order() {
    let ds = dataset(10);
    let mut cfg = small(Algorithm::Spreadgnn, 5);
    cfg.partition.mask_mode =
        MaskMode::Custom(vec![vec![0, 1], vec![1], vec![2, 3], vec![3], vec![0, 2]]);
    cfg.topology.kind = TopologyKind::Ring;
    let mut sim = Simulation::new(cfg, &ds).unwrap();
    sim.train_round().unwrap();
    let mut forward = sim.clients.clone();
    sync::omega_exchange(&mut forward, &sim.conn, &sim.ctx.mtl, 4).unwrap();

    // relabel clients i -> k-1-i and exchange again
    let k = sim.clients.len();
    let flip = |i: usize| k - 1 - i;
    let mut reversed: Vec<_> = sim.clients.iter().rev().cloned().collect();
    for c in &mut reversed {
        c.id = flip(c.id);
        for n in &mut c.neighbor_omegas {
            n.0 = flip(n.0);
        }
        c.neighbor_omegas.sort_by_key(|n| n.0);
    }
    let adj = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| i == j || sim.conn.connected(flip(i), flip(j)))
                .collect()
        })
        .collect();
    let conn = ConnectionMatrix::from_adjacency(adj, TopologyKind::Ring).unwrap();
    sync::omega_exchange(&mut reversed, &conn, &sim.ctx.mtl, 4).unwrap();
    for (i, c) in forward.iter().enumerate() {
        let other = reversed[flip(i)].omega.as_ref().unwrap();
        assert!(c.omega.as_ref().unwrap().omega.max_abs_diff(&other.omega) < 1e-12);
    }
}

#[test]
fn shared_groups_agree_after_server_averaging() {
    let ds = dataset(11);
    let mut sim = Simulation::new(small(Algorithm::Fedavg, 4), &ds).unwrap();
    sim.step().unwrap();
    let first = &sim.clients[0].params;
    for c in &sim.clients[1..] {
        for ((_, g, a), (_, _, b)) in first.entries().into_iter().zip(c.params.entries()) {
            assert_eq!(a, b, "{g:?}");
        }
    }
    assert!(sim.clients.iter().all(|c| c.omega.is_none()));
    assert_eq!(sim.ctx.mtl.lambda1, 0.0);
}

#[test]
fn task_columns_of_other_clients_stay_fixed_between_syncs() {
    let ds = dataset(12);
    let mut cfg = small(Algorithm::Spreadgnn, 4);
    cfg.partition.mask_mode = MaskMode::Custom(vec![vec![0], vec![1], vec![2], vec![3]]);
    cfg.topology.kind = TopologyKind::Ring;
    cfg.tau = 2;
    let mut sim = Simulation::new(cfg, &ds).unwrap();
    let before = sim.clients[0].params.clone();
    sim.train_round().unwrap();
    let after = &sim.clients[0].params;
    for (c, &t) in after.task_ids.iter().enumerate() {
        let moved = (0..after.readout.task.rows())
            .any(|r| after.readout.task.get(r, c) != before.readout.task.get(r, c));
        assert_eq!(moved, t == 0, "task {t}");
    }
    assert!(after.entries().iter().any(|e| e.1 == ParamGroup::Theta));
}

#[test]
fn regression_run_reports_mean_absolute_error() {
    let ds = generate(&SyntheticConfig {
        num_graphs: 60,
        task_type: TaskType::Regression,
        seed: 13,
        ..Default::default()
    })
    .unwrap();
    let r = fedsim::run(small(Algorithm::Spreadgnn, 3), &ds).unwrap();
    let mae = r.final_mean.unwrap();
    assert!(mae.is_finite() && mae >= 0.0);
}

#[test]
fn spectral_gap_is_reported() {
    let ds = dataset(14);
    let mut cfg = small(Algorithm::Spreadgnn, 6);
    cfg.topology.kind = TopologyKind::Ring;
    cfg.rounds = 1;
    let r = fedsim::run(cfg, &ds).unwrap();
    let expect = topology::spectral_gap(
        &topology::mixing_matrix(
            &topology::build_topology(TopologyKind::Ring, 6, 2, 0).unwrap(),
            Default::default(),
        ),
        None,
    )
    .unwrap()
    .zeta;
    assert!((r.zeta - expect).abs() < 1e-12);
    assert!(r.connected);
}

#[test]
fn estimators_are_finite_and_positive() {
    let ds = dataset(15);
    let mut sim = Simulation::new(small(Algorithm::Spreadgnn, 3), &ds).unwrap();
    sim.step().unwrap();
    let l = fedsim::estimate::estimate_lipschitz(&sim, 2, 1e-3).unwrap();
    let s = fedsim::estimate::estimate_sigma_sq(&sim, 4).unwrap();
    assert!(l.is_finite() && l > 0.0);
    assert!(s.is_finite() && s >= 0.0);
    assert!(fedsim::estimate::estimate_lipschitz(&sim, 0, 1e-3).is_err());
}

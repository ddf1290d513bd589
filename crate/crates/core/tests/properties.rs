use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedmtl::bounds::{convergence_bound, BoundInputs};
use fedmtl::fedsim::{sync, Algorithm, SimConfig, Simulation};
use fedmtl::gnn::{self, GnnVariant, ModelConfig, ModelParams, ParamGroup};
use fedmtl::graph::{Dataset, DatasetManifest, GraphSample, Metric, TaskType};
use fedmtl::metrics::roc_auc;
use fedmtl::mtl;
use fedmtl::partition::{self, MaskMode, PartitionConfig};
use fedmtl::synthetic::{generate, SyntheticConfig};
use fedmtl::tensor::{sym_eig, Matrix};
use fedmtl::topology::{self, MixingRule, TopologyKind};

fn sample_strategy(d: usize, s: usize) -> impl Strategy<Value = GraphSample> {
    (1usize..6).prop_flat_map(move |n| {
        let feats = prop::collection::vec(-4.0f64..4.0, n * d);
        let edges = prop::collection::vec((0..n, 0..n), 0..n * 2);
        let labels = prop::collection::vec((any::<bool>(), any::<bool>()), s);
        (feats, edges, labels).prop_map(move |(f, e, l)| {
            let mut edges: Vec<(usize, usize)> = e
                .into_iter()
                .filter(|(a, b)| a != b)
                .map(|(a, b)| (a.min(b), a.max(b)))
                .collect();
            edges.sort_unstable();
            edges.dedup();
            GraphSample {
                node_features: Matrix::new(n, d, f).unwrap(),
                edges,
                edge_features: Matrix::zeros(0, 0),
                label: l.iter().map(|p| if p.0 { 1.0 } else { 0.0 }).collect(),
                label_mask: l.iter().map(|p| p.1).collect(),
            }
        })
    })
}

fn toy_manifest(d: usize, s: usize) -> DatasetManifest {
    DatasetManifest {
        name: "prop".into(),
        task_type: TaskType::Classification,
        num_tasks: s,
        d_input: d,
        d_edge: 0,
        metric: Metric::RocAuc,
        num_samples: 0,
    }
}

fn permuted(s: &GraphSample, perm: &[usize]) -> GraphSample {
    let n = s.num_nodes();
    let mut x = Matrix::zeros(n, s.node_features.cols());
    for v in 0..n {
        x.row_mut(perm[v]).copy_from_slice(s.node_features.row(v));
    }
    GraphSample {
        node_features: x,
        edges: s.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect(),
        ..s.clone()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dataset_json_round_trip(samples in prop::collection::vec(sample_strategy(3, 2), 1..5)) {
        let ds = Dataset { manifest: toy_manifest(3, 2), samples };
        let back = Dataset::from_json(&ds.to_json().unwrap()).unwrap();
        prop_assert_eq!(&back.samples, &ds.samples);
        prop_assert_eq!(back.manifest.num_tasks, 2);
    }

    #[test]
    fn classifier_is_node_permutation_invariant(
        s in sample_strategy(3, 2),
        gat in any::<bool>(),
        seed in 0u64..1000,
        shuffle in any::<u64>(),
    ) {
        let cfg = ModelConfig {
            variant: if gat { GnnVariant::Gat } else { GnnVariant::Sage },
            hidden: 4,
            d_node: 4,
            d_pool: 3,
            heads: 2,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&cfg, 3, &[0, 1], seed).unwrap();
        let mut perm: Vec<usize> = (0..s.num_nodes()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle);
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let a = gnn::predict(&s, &params, &cfg).unwrap();
        let b = gnn::predict(&permuted(&s, &perm), &params, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn mixing_matrices_are_symmetric_doubly_stochastic(k in 2usize..12, n in 1usize..5, seed in 0u64..500) {
        for kind in [TopologyKind::Complete, TopologyKind::Ring, TopologyKind::Random, TopologyKind::Isolated] {
            let n = n.min(k - 1);
            let Ok(conn) = topology::build_topology(kind, k, n, seed) else { continue };
            let mix = topology::mixing_matrix(&conn, MixingRule::MetropolisHastings);
            let w = &mix.weights;
            prop_assert!(w.is_symmetric(1e-15));
            for i in 0..k {
                let row: f64 = w.row(i).iter().sum();
                prop_assert!((row - 1.0).abs() < 1e-12);
                prop_assert!(w.row(i).iter().all(|&v| v >= 0.0));
            }
            let gap = topology::spectral_gap(&mix, Some(&conn)).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&gap.zeta));
        }
    }

    #[test]
    fn projection_gives_unit_trace_psd(s in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Matrix::from_fn(s, s, |_, _| rng.random_range(-2.0..2.0));
        let p = mtl::project_omega(&m, 1e-6).unwrap();
        prop_assert!(p.is_symmetric(1e-12));
        prop_assert!((p.trace() - 1.0).abs() < 1e-12);
        let eig = sym_eig(&p).unwrap();
        prop_assert!(eig.values.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn closed_form_is_a_valid_covariance(s in 1usize..6, d in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = Matrix::from_fn(d, s, |_, _| rng.random_range(-1.0..1.0));
        let ids: Vec<usize> = (0..s).collect();
        let cov = mtl::omega_closed_form(&phi, &ids).unwrap();
        cov.validate().unwrap();
        prop_assert!((cov.omega.trace() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dirichlet_counts_cover_every_client(k in 1usize..10, extra in 0usize..200, alpha in 0.05f64..10.0, seed in any::<u64>()) {
        let n = k + extra;
        let cfg = PartitionConfig { alpha, clients: k, mask_mode: MaskMode::None, seed };
        let counts = partition::dirichlet_counts(n, &cfg).unwrap();
        prop_assert_eq!(counts.len(), k);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        prop_assert!(counts.iter().all(|&c| c >= 1));
    }

    #[test]
    fn bound_is_monotone(
        eta in 1e-4f64..0.2,
        l in 0.1f64..10.0,
        tau in 1u32..30,
        zeta in 0.0f64..0.98,
        sigma in 0.0f64..5.0,
        dz in 0.0f64..0.01,
    ) {
        let base = BoundInputs {
            eta, lipschitz: l, tau, zeta, sigma_sq: sigma,
            clients: 8, rounds: 150, f_init: 1.0, f_inf: 0.0, beta: 0.0,
        };
        let v = |i: BoundInputs| convergence_bound(&i).unwrap().value.unwrap();
        let b = v(base);
        let more_tau = v(BoundInputs { tau: tau + 1, ..base });
        let more_zeta = v(BoundInputs { zeta: zeta + dz, ..base });
        let more_noise = v(BoundInputs { sigma_sq: sigma + 0.5, ..base });
        prop_assert!(more_tau >= b && more_zeta >= b && more_noise >= b);
    }

    #[test]
    fn auc_lies_in_unit_interval(pairs in prop::collection::vec((0u8..5, any::<bool>()), 2..30)) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        if let Some(a) = roc_auc(&scores, &labels).unwrap() {
            prop_assert!((0.0..=1.0).contains(&a));
            let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
            let b = roc_auc(&flipped, &labels).unwrap().unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }
}

fn toy_dataset() -> Dataset {
    generate(&SyntheticConfig {
        num_graphs: 60,
        seed: 2,
        ..Default::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn averaging_conserves_the_global_mean(
        k in 3usize..8,
        kind_ix in 0usize..3,
        seed in 0u64..1000,
    ) {
        let kind = [TopologyKind::Complete, TopologyKind::Ring, TopologyKind::Random][kind_ix];
        let mut cfg = SimConfig {
            algorithm: Algorithm::Spreadgnn,
            seed,
            model: ModelConfig { hidden: 4, d_node: 4, d_pool: 4, ..ModelConfig::default() },
            ..Default::default()
        };
        cfg.partition.clients = k;
        cfg.partition.mask_mode = MaskMode::None;
        cfg.topology = topology::TopologySpec { kind, n_neighbors: 2, seed };
        let mut sim = Simulation::new(cfg, &toy_dataset()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in &mut sim.clients {
            for (_, _, m) in c.params.entries_mut() {
                *m = Matrix::from_fn(m.rows(), m.cols(), |_, _| rng.random_range(-1.0..1.0));
            }
        }
        let mean = |sim: &Simulation| {
            let first = &sim.clients[0].params;
            first.entries().into_iter().filter(|e| e.1 != ParamGroup::Task).map(|(id, _, m)| {
                let mut acc = Matrix::zeros(m.rows(), m.cols());
                for c in &sim.clients {
                    acc.axpy(1.0 / k as f64, c.params.get(id).unwrap()).unwrap();
                }
                acc
            }).collect::<Vec<_>>()
        };
        let before = mean(&sim);
        let d0 = sync::consensus_distance(&sim.clients).unwrap();
        sync::periodic_average(&mut sim.clients, &sim.mix, false).unwrap();
        let after = mean(&sim);
        for (a, b) in before.iter().zip(&after) {
            prop_assert!(a.max_abs_diff(b) <= 1e-12);
        }
        let zeta = topology::spectral_gap(&sim.mix, Some(&sim.conn)).unwrap().zeta;
        let d1 = sync::consensus_distance(&sim.clients).unwrap();
        prop_assert!(d1 <= zeta * zeta * d0 + 1e-10);
    }
}

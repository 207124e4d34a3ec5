use std::collections::BTreeMap;
use std::sync::Arc;

use fcil_core::config::ExperimentConfig;
use fcil_core::datagen::{ClientShard, LabeledSample};
use fcil_core::federation::{
    local_train, prototype_reweight, run_experiment, run_round, stage_transition, ClientState,
    ClientUpload, ServerState, TrainContext,
};
use fcil_core::lora::{delta_concat, delta_sum, LedgerMode};
use fcil_core::numkit::{matmul, RngStream, Vector};
use fcil_core::protomodel::{total_loss, Activation, FrozenBackbone, HyperParams};
use fcil_core::{ClassId, Error};

fn small_config(seed: u64, extra: &[&str]) -> ExperimentConfig {
    let mut ov: Vec<String> = [
        "num_classes=4",
        "input_dim=6",
        "feature_dim=5",
        "per_class=20",
        "tasks=2",
        "clients=3",
        "alpha=2",
        "rounds=2",
        "local_epochs=1",
        "batch_size=16",
        "lr_lora=0.01",
        "lr_prototypes=0.05",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    ov.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::synthetic(seed).with_overrides(&ov).unwrap()
}

fn server_for(cfg: &ExperimentConfig, classes: &[ClassId]) -> ServerState {
    let mut rng = RngStream::new(cfg.seed).derive("backbone", &[]);
    let bb = FrozenBackbone::random(
        cfg.input_dim,
        cfg.feature_dim,
        cfg.depth,
        cfg.activation,
        cfg.attach_layers.clone(),
        &mut rng,
    )
    .unwrap();
    ServerState::new(Arc::new(bb), cfg, classes).unwrap()
}

fn shard(id: usize, samples: Vec<LabeledSample>) -> ClientShard {
    ClientShard {
        client_id: id,
        samples,
    }
}

fn blob(label: ClassId, center: f64, n: usize, dim: usize, rng: &mut RngStream) -> Vec<LabeledSample> {
    (0..n)
        .map(|_| LabeledSample {
            features: Vector((0..dim).map(|_| center + rng.normal(0.0, 0.1)).collect()),
            label,
        })
        .collect()
}

fn steps(clients: &[ClientState], n: u64) -> BTreeMap<usize, u64> {
    clients.iter().map(|c| (c.client_id, n)).collect()
}

#[test]
fn zero_rates_leave_client_bitwise() {
    let cfg = small_config(1, &["lr_lora=0.0", "lr_prototypes=0.0"]);
    let server = server_for(&cfg, &[0, 1]);
    let mut rng = RngStream::new(5);
    let mut data = blob(0, -1.0, 10, 6, &mut rng);
    data.extend(blob(1, 1.0, 10, 6, &mut rng));
    let mut client = ClientState::new(shard(0, data), server.model.clone(), RngStream::new(9));
    let before = client.model.clone();
    let ctx = TrainContext {
        class_subset: vec![0, 1],
        stage_steps: 10,
        stage: 0,
        round: 0,
    };
    let trace = local_train(&mut client, &cfg.hyper_params(), &ctx).unwrap();
    assert!(trace.is_some());
    assert_eq!(client.model.to_checkpoint(1), before.to_checkpoint(1));
}

#[test]
fn local_training_reduces_dce() {
    // Two separable classes through an identity backbone with 1-d features.
    let bb = FrozenBackbone::random(1, 1, 1, Activation::Identity, [0], &mut RngStream::new(3)).unwrap();
    let cfg = small_config(2, &["input_dim=1", "feature_dim=1", "depth=1", "rank=1"]);
    let server = ServerState::new(Arc::new(bb), &cfg, &[0, 1]).unwrap();
    let mut rng = RngStream::new(4);
    let mut data = blob(0, -2.0, 25, 1, &mut rng);
    data.extend(blob(1, 2.0, 25, 1, &mut rng));
    let hp = HyperParams {
        local_epochs: 50,
        batch_size: 50,
        lr_prototypes: 0.05,
        lr_lora: 0.01,
        ..HyperParams::default()
    };
    let mut client = ClientState::new(shard(0, data.clone()), server.model.clone(), RngStream::new(1));
    let initial = total_loss(&data, &client.model, &hp, &[0, 1]).unwrap().dce;
    let ctx = TrainContext {
        class_subset: vec![0, 1],
        stage_steps: 50,
        stage: 0,
        round: 0,
    };
    local_train(&mut client, &hp, &ctx).unwrap();
    assert_eq!(client.optimizer_steps(), 50);
    let after = total_loss(&data, &client.model, &hp, &[0, 1]).unwrap().dce;
    assert!(after < initial, "{after} >= {initial}");
}

#[test]
fn empty_shard_is_skipped_not_fatal() {
    let cfg = small_config(3, &[]);
    let mut server = server_for(&cfg, &[0, 1]);
    let mut rng = RngStream::new(8);
    let mut data = blob(0, -1.0, 8, 6, &mut rng);
    data.extend(blob(1, 1.0, 8, 6, &mut rng));
    let mut clients = vec![
        ClientState::new(shard(0, data), server.model.clone(), RngStream::new(1)),
        ClientState::new(shard(1, Vec::new()), server.model.clone(), RngStream::new(2)),
    ];
    let st = steps(&clients, 4);
    let (report, _) = run_round(&mut server, &mut clients, &st, None).unwrap();
    assert!(!report.client_losses[0].skipped);
    assert!(report.client_losses[1].skipped);
    assert_eq!(report.lora_weights, vec![1.0, 0.0]);
    // The idle client still participates in prototype re-weighting.
    for w in report.reweight.values() {
        assert_eq!(w.len(), 2);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn zero_rates_round_keeps_server_lora() {
    let cfg = small_config(4, &["lr_lora=0.0", "lr_prototypes=0.0"]);
    let mut server = server_for(&cfg, &[0, 1]);
    let before: Vec<String> = server.model.ledgers.values().map(|l| l.to_text()).collect();
    let mut rng = RngStream::new(11);
    let mut clients: Vec<ClientState> = (0..3)
        .map(|i| {
            let mut d = blob(0, -1.0, 4 + i, 6, &mut rng);
            d.extend(blob(1, 1.0, 5, 6, &mut rng));
            ClientState::new(shard(i, d), server.model.clone(), RngStream::new(i as u64))
        })
        .collect();
    let st = steps(&clients, 4);
    run_round(&mut server, &mut clients, &st, None).unwrap();
    let after: Vec<String> = server.model.ledgers.values().map(|l| l.to_text()).collect();
    assert_eq!(before, after);
}

#[test]
fn single_client_round_adopts_client_state() {
    let cfg = small_config(5, &[]);
    let mut server = server_for(&cfg, &[0, 1]);
    let mut rng = RngStream::new(12);
    let mut d = blob(0, -1.0, 10, 6, &mut rng);
    d.extend(blob(1, 1.0, 10, 6, &mut rng));
    let mut clients = vec![ClientState::new(shard(0, d), server.model.clone(), RngStream::new(0))];
    let st = steps(&clients, 4);
    run_round(&mut server, &mut clients, &st, None).unwrap();
    assert_eq!(server.model.ledgers, clients[0].model.ledgers);
    for c in [0, 1] {
        assert_eq!(
            server.model.prototypes.get(c).unwrap(),
            clients[0].model.prototypes.get(c).unwrap()
        );
    }
}

#[test]
fn identical_clients_reach_consensus() {
    let cfg = small_config(6, &[]);
    let mut server = server_for(&cfg, &[0, 1]);
    let mut rng = RngStream::new(13);
    let mut d = blob(0, -1.0, 10, 6, &mut rng);
    d.extend(blob(1, 1.0, 10, 6, &mut rng));
    let mut clients: Vec<ClientState> = (0..4)
        .map(|i| ClientState::new(shard(i, d.clone()), server.model.clone(), RngStream::new(77)))
        .collect();
    let st = steps(&clients, 4);
    let (report, _) = run_round(&mut server, &mut clients, &st, None).unwrap();
    for w in report.reweight.values() {
        assert!(w.iter().all(|x| (x - 0.25).abs() < 1e-12));
    }
    for c in [0, 1] {
        let g = server.model.prototypes.get(c).unwrap();
        let l = clients[2].model.prototypes.get(c).unwrap();
        for (a, b) in g.iter().zip(l.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn reweight_prefers_prototype_on_the_means() {
    let mu = vec![1.0, -1.0];
    let mk = |id: usize, p: Vec<f64>| ClientUpload {
        client_id: id,
        adapters: BTreeMap::new(),
        prototypes: [(0, Vector(p))].into(),
        class_means: [(0, Vector(mu.clone()))].into(),
        sample_count: 1,
        class_counts: BTreeMap::new(),
    };
    let r = prototype_reweight(&[mk(0, mu.clone()), mk(1, vec![2.0, 0.5])], 0.2).unwrap();
    assert!(r.weights[&0][0] > r.weights[&0][1]);
}

#[test]
fn stage_transition_contracts() {
    let cfg = small_config(7, &[]);
    let mut server = server_for(&cfg, &[0, 1]);
    // Give the stage-1 adapter a nonzero B so the transition is informative.
    for l in server.model.ledgers.values_mut() {
        let b = &mut l.active_mut().b;
        for (i, v) in b.as_mut_slice().iter_mut().enumerate() {
            *v = 0.01 * (i as f64 + 1.0);
        }
    }
    let before: BTreeMap<usize, _> = server
        .model
        .ledgers
        .iter()
        .map(|(&at, l)| (at, (l.clone(), delta_sum(l), delta_concat(l))))
        .collect();
    stage_transition(&mut server, &[2, 3]).unwrap();
    assert_eq!(server.stage, 2);
    for (at, l) in &server.model.ledgers {
        let (old, sum_before, concat_before) = &before[at];
        assert_eq!(l.stage_count(), old.stage_count() + 1);
        assert!(l.active().b.is_zero());
        assert_eq!(l.frozen()[0], *old.active());
        // The new B is zero, so the per-stage sum of products is unchanged.
        assert_eq!(&delta_concat(l), concat_before);
        // Summed factors pick up the cross term A_new · B_old.
        let cross = matmul(&l.active().a, &old.summed_b()).unwrap();
        let expect = sum_before.add(&cross).unwrap();
        let got = delta_sum(l);
        for (a, b) in got.as_slice().iter().zip(expect.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
    assert!(!server.model.prototypes.is_trainable(0));
    assert!(server.model.prototypes.is_trainable(2));
    assert_eq!(server.seen_classes, vec![0, 1, 2, 3]);
    assert_eq!(server.current_classes, vec![2, 3]);
    assert!(matches!(
        stage_transition(&mut server, &[1]),
        Err(Error::ClassCollision(1))
    ));
}

#[test]
fn frozen_history_is_immutable_across_a_stage() {
    let out = run_experiment(&small_config(8, &[])).unwrap();
    let s1 = &out.stage_models[0];
    let s2 = &out.stage_models[1];
    for (at, l1) in &s1.ledgers {
        let l2 = &s2.ledgers[at];
        let a = l1.active();
        let f = &l2.frozen()[0];
        let bits = |m: &fcil_core::numkit::Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.a), bits(&f.a));
        assert_eq!(bits(&a.b), bits(&f.b));
    }
    // Stage-1 prototypes stay frozen through stage 2.
    for c in &out.record.schedule[0] {
        assert_eq!(s1.prototypes.get(*c).unwrap(), s2.prototypes.get(*c).unwrap());
    }
}

#[test]
fn experiment_record_invariants() {
    let cfg = small_config(9, &["tasks=1", "num_classes=3", "alpha=1"]);
    let out = run_experiment(&cfg).unwrap();
    let r = &out.record;
    assert!(r.complete);
    assert_eq!(r.stages.len(), 1);
    assert!(r.forgetting.is_empty());
    assert_eq!(r.avg, r.a_n);
    for round in &r.stages[0].rounds {
        assert!((round.lora_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for w in round.reweight.values() {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    let two = run_experiment(&small_config(9, &[])).unwrap().record;
    let mean = two.stages.iter().map(|s| s.acc_all_seen).sum::<f64>() / 2.0;
    assert!((two.avg.unwrap() - mean).abs() < 1e-15);
    assert_eq!(two.accuracy_matrix.rows.len(), 2);
    assert_eq!(two.accuracy_matrix.rows[1].len(), 2);
    assert_eq!(two.config, small_config(9, &[]));
}

#[test]
fn default_run_is_deterministic_and_parallel_matches() {
    let cfg = small_config(10, &["partition=\"dirichlet\""]);
    let a = run_experiment(&cfg).unwrap().record.to_json();
    let b = run_experiment(&cfg).unwrap().record.to_json();
    assert_eq!(a, b);
    let mut par = cfg.clone();
    par.parallel_clients = true;
    let p = run_experiment(&par).unwrap();
    let mut rec = p.record;
    rec.config.parallel_clients = false;
    assert_eq!(rec.to_json(), a);
}

#[test]
fn concat_and_active_only_modes_run() {
    for mode in [LedgerMode::Concat, LedgerMode::ActiveOnly] {
        let mut cfg = small_config(11, &[]);
        cfg.ledger_mode = mode;
        let out = run_experiment(&cfg).unwrap();
        assert!(out.record.a_n.unwrap().is_finite());
    }
}

#[test]
fn freeze_all_trains_prototypes_only() {
    let cfg = small_config(12, &["freeze_all=true"]);
    let out = run_experiment(&cfg).unwrap();
    assert!(out.stage_models.iter().all(|m| m.ledgers.is_empty()));
    assert!(out.record.a_n.unwrap() > 0.0);
}

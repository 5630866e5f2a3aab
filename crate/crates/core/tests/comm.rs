mod common;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use common::{fed_config, randn, task, tiny_spec, Task};
use fednas::autodiff::ModelWeights;
use fednas::comm::{
    channel_pair, channel_transport, client_loop, decode, encode, run_with_transport, server_loop, ClientOptions, CommError, Connection,
    Direction, MessageKind, Role, RoundMessage, ServerOptions, Trace, TransportKind, HEADER_BYTES, TRAILER_BYTES,
};
use fednas::federation::{build_phase_network, client_state, run_fednas, Coordinator, FedConfig, FedError, Phase, RoundRecord};
use fednas::local::ClientState;
use fednas::search_space::{ArchParams, Genotype, NUM_EDGES, NUM_OPS};
use fednas::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn no_rounds(_: &RoundRecord) -> Result<(), FedError> {
    Ok(())
}

fn finite_bits(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let v = f64::from_bits(rng.random());
        if v.is_finite() {
            return v;
        }
    }
}

fn random_message(seed: u64) -> RoundMessage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = (0..rng.random_range(0..4))
        .map(|_| {
            let shape: Vec<usize> = (0..rng.random_range(0..4)).map(|_| rng.random_range(1..4)).collect();
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| finite_bits(&mut rng)).collect()).unwrap()
        })
        .collect();
    let arch = rng.random_bool(0.5).then(|| {
        let mut m = || {
            Tensor::new(
                vec![NUM_EDGES, NUM_OPS],
                (0..NUM_EDGES * NUM_OPS).map(|_| finite_bits(&mut rng)).collect(),
            )
            .unwrap()
        };
        ArchParams { normal: m(), reduce: m() }
    });
    if rng.random_bool(0.5) {
        RoundMessage::GlobalUpdate {
            round: rng.random(),
            weights: ModelWeights(tensors),
            arch,
        }
    } else {
        RoundMessage::LocalResult {
            round: rng.random(),
            client_id: rng.random(),
            n_k: rng.random(),
            mean_train_loss: finite_bits(&mut rng),
            weights: ModelWeights(tensors),
            arch,
        }
    }
}

proptest! {
    #[test]
    fn frames_round_trip_every_bit(seed in any::<u64>()) {
        let msg = random_message(seed);
        let frame = encode(&msg);
        prop_assert_eq!(encode(&decode(&frame).unwrap()), frame);
    }
}

#[test]
fn large_update_frame_size_is_exact() {
    let weights = ModelWeights(vec![Tensor::zeros(&[1930, 1000]), Tensor::zeros(&[16, 3, 3, 3])]);
    let arch = ArchParams::zeros();
    let frame = encode(&RoundMessage::GlobalUpdate {
        round: 4,
        weights,
        arch: Some(arch),
    });
    let params = 1930 * 1000 + 16 * 27;
    let tensor_meta = (1 + 2 * 8) + (1 + 4 * 8);
    let arch_bytes = 1 + 2 * (1 + 2 * 8 + 8 * NUM_EDGES * NUM_OPS);
    let payload = 1 + 8 + 4 + tensor_meta + 8 * params + arch_bytes;
    assert_eq!(frame.len(), HEADER_BYTES + payload + TRAILER_BYTES);
    assert_eq!(HEADER_BYTES, 4 + 2 + 1 + 8);
}

#[test]
fn single_byte_payload_corruption_is_always_caught() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let msg = random_message(5);
    let frame = encode(&msg);
    let payload_len = frame.len() - HEADER_BYTES - TRAILER_BYTES;
    for _ in 0..1000 {
        let mut bad = frame.clone();
        let pos = HEADER_BYTES + rng.random_range(0..payload_len);
        bad[pos] ^= rng.random_range(1..=255u8);
        assert!(matches!(decode(&bad), Err(CommError::Checksum { .. })));
    }
    for pos in (0..HEADER_BYTES).chain(frame.len() - TRAILER_BYTES..frame.len()) {
        let mut bad = frame.clone();
        bad[pos] ^= 0x40;
        assert!(decode(&bad).is_err(), "corrupting byte {pos} went unnoticed");
    }
}

fn maker(
    train: Arc<fednas::data::Dataset>,
    partition: &fednas::data::Partition,
    k: usize,
) -> impl FnOnce(&FedConfig, Option<&Genotype>) -> Result<ClientState, FedError> + '_ {
    move |cfg, g| {
        let (net, store) = build_phase_network(cfg, g)?;
        client_state(cfg, k, Arc::new(net), store, train, partition)
    }
}

fn small() -> (Task, FedConfig) {
    let t = task(6, 3, 8, 2, 21);
    let cfg = fed_config(tiny_spec(), 2, 2, 1, Phase::Search);
    (t, cfg)
}

#[test]
fn single_client_loopback_run_completes() {
    let t = task(6, 3, 8, 1, 22);
    let cfg = fed_config(tiny_spec(), 1, 3, 1, Phase::Search);
    let run = run_with_transport(
        TransportKind::Channel,
        cfg,
        None,
        t.train.clone(),
        t.test.clone(),
        &t.partition,
        &mut no_rounds,
    )
    .unwrap();
    assert_eq!(run.outcome.history.len(), 3);
    run.server_trace.check(Role::Server, 1, 3).unwrap();
    let client = &run.client_runs[0];
    assert_eq!(client.rounds, 3);
    assert_eq!(client.evals.len(), 3);
    client.trace.check(Role::Client, 1, 3).unwrap();
}

#[test]
fn transports_agree_with_each_other_and_the_in_process_engine() {
    let (t, cfg) = small();
    let reference = run_fednas(cfg, t.train.clone(), t.test.clone(), &t.partition, &mut no_rounds).unwrap();
    let tcp = TransportKind::Tcp("127.0.0.1:0".parse::<SocketAddr>().unwrap());
    for kind in [TransportKind::Channel, tcp] {
        let run = run_with_transport(kind, cfg, None, t.train.clone(), t.test.clone(), &t.partition, &mut no_rounds).unwrap();
        assert!(run.outcome.store.weights().bit_eq(&reference.store.weights()), "{kind:?}");
        assert!(run
            .outcome
            .network
            .arch_params(&run.outcome.store)
            .unwrap()
            .bit_eq(&reference.network.arch_params(&reference.store).unwrap()));
        for (a, b) in run.outcome.history.iter().zip(&reference.history) {
            assert_eq!(a.global_test_loss.to_bits(), b.global_test_loss.to_bits());
            assert_eq!(a.global_test_acc.to_bits(), b.global_test_acc.to_bits());
        }
        assert_eq!(run.outcome.genotype, reference.genotype);
    }
}

/// Plays the server by hand on one end of a channel pair.
fn scripted_client(cfg: FedConfig, t: &Task) -> (Connection, std::thread::JoinHandle<Result<fednas::comm::ClientRun, CommError>>) {
    let (server_end, client_end) = channel_pair();
    let hash = cfg.config_hash(None);
    let (train, partition) = (t.train.clone(), t.partition.clone());
    let handle = std::thread::spawn(move || client_loop(client_end, 0, hash, maker(train, &partition, 0), &ClientOptions::default()));
    (server_end, handle)
}

fn init(cfg: FedConfig) -> RoundMessage {
    RoundMessage::Init {
        config_hash: cfg.config_hash(None),
        config: cfg,
        genotype: None,
    }
}

#[test]
fn client_exits_cleanly_on_immediate_shutdown() {
    let (t, cfg) = small();
    let (mut server, handle) = scripted_client(cfg, &t);
    assert!(matches!(server.recv(None).unwrap(), RoundMessage::Register { client_id: 0, .. }));
    server.send(&init(cfg)).unwrap();
    server.send(&RoundMessage::Shutdown { reason: "done".into() }).unwrap();
    let run = handle.join().unwrap().unwrap();
    assert_eq!(run.rounds, 0);
    let kinds: Vec<_> = run.trace.events.iter().map(|e| (e.direction, e.kind.as_str())).collect();
    assert_eq!(
        kinds,
        [
            (Direction::Sent, "Register"),
            (Direction::Received, "Init"),
            (Direction::Received, "Shutdown")
        ]
    );
}

#[test]
fn local_result_reports_the_shard_size_and_echoes_the_round() {
    let (t, cfg) = small();
    let (mut server, handle) = scripted_client(cfg, &t);
    server.recv(None).unwrap();
    server.send(&init(cfg)).unwrap();
    let (_, store) = build_phase_network(&cfg, None).unwrap();
    let (net, _) = build_phase_network(&cfg, None).unwrap();
    server
        .send(&RoundMessage::GlobalUpdate {
            round: 0,
            weights: store.weights(),
            arch: net.arch_params(&store),
        })
        .unwrap();
    match server.recv(None).unwrap() {
        RoundMessage::LocalResult { round, client_id, n_k, .. } => {
            assert_eq!((round, client_id), (0, 0));
            assert_eq!(n_k as usize, t.partition.clients[0].len());
        }
        other => panic!("unexpected {other:?}"),
    }
    server.send(&RoundMessage::Shutdown { reason: "done".into() }).unwrap();
    assert_eq!(handle.join().unwrap().unwrap().rounds, 1);
}

#[test]
fn client_rejects_out_of_order_messages() {
    let (t, cfg) = small();
    let (mut server, handle) = scripted_client(cfg, &t);
    server.recv(None).unwrap();
    server.send(&init(cfg)).unwrap();
    server
        .send(&RoundMessage::GlobalModelEval {
            round: 0,
            loss: 1.0,
            acc: 0.5,
        })
        .unwrap();
    assert!(matches!(handle.join().unwrap(), Err(CommError::Protocol(_))));
}

#[test]
fn client_detects_a_mismatched_init() {
    let (t, cfg) = small();
    let (mut server, handle) = scripted_client(cfg, &t);
    server.recv(None).unwrap();
    let mut other = cfg;
    other.seed += 1;
    server.send(&init(other)).unwrap();
    assert!(matches!(handle.join().unwrap(), Err(CommError::ConfigMismatch)));
}

#[test]
fn server_rejects_wrong_hash_and_duplicate_ids_then_runs() {
    let (t, cfg) = small();
    let mut coord = Coordinator::new(cfg, None, t.test.clone()).unwrap();
    let (mut acceptor, connector) = channel_transport();
    let mut wrong = cfg;
    wrong.rounds += 1;
    let mut bad_hash = connector.connect().unwrap();
    bad_hash
        .send(&RoundMessage::Register {
            client_id: 0,
            config_hash: wrong.config_hash(None),
        })
        .unwrap();
    let mut out_of_range = connector.connect().unwrap();
    out_of_range
        .send(&RoundMessage::Register {
            client_id: 7,
            config_hash: cfg.config_hash(None),
        })
        .unwrap();

    std::thread::scope(|s| {
        let good: Vec<_> = (0..2)
            .map(|k| {
                let conn = connector.connect().unwrap();
                let (train, partition) = (t.train.clone(), &t.partition);
                s.spawn(move || {
                    client_loop(
                        conn,
                        k as u32,
                        cfg.config_hash(None),
                        maker(train, partition, k),
                        &ClientOptions::default(),
                    )
                })
            })
            .collect();
        std::thread::sleep(Duration::from_millis(50));
        let mut dup = connector.connect().unwrap();
        dup.send(&RoundMessage::Register {
            client_id: 0,
            config_hash: cfg.config_hash(None),
        })
        .unwrap();
        let trace = server_loop(&mut acceptor, &mut coord, &ServerOptions::default(), &mut no_rounds).unwrap();
        trace.check(Role::Server, 2, 2).unwrap();
        for h in good {
            assert_eq!(h.join().unwrap().unwrap().rounds, 2);
        }
        for mut c in [bad_hash, out_of_range] {
            assert!(matches!(c.recv(None).unwrap(), RoundMessage::Shutdown { .. }));
        }
        // the duplicate may or may not have been read before registration closed
        let _ = dup.recv(Some(Duration::from_millis(10)));
    });
}

#[test]
fn server_times_out_on_a_silent_client() {
    let t = task(6, 3, 8, 1, 23);
    let cfg = fed_config(tiny_spec(), 1, 1, 1, Phase::Search);
    let mut coord = Coordinator::new(cfg, None, t.test.clone()).unwrap();
    let (mut acceptor, connector) = channel_transport();
    let mut silent = connector.connect().unwrap();
    silent
        .send(&RoundMessage::Register {
            client_id: 0,
            config_hash: cfg.config_hash(None),
        })
        .unwrap();
    let opts = ServerOptions {
        round_timeout: Some(Duration::from_millis(200)),
    };
    let err = server_loop(&mut acceptor, &mut coord, &opts, &mut no_rounds).unwrap_err();
    assert!(matches!(err, CommError::Timeout));
    let kinds: Vec<MessageKind> = std::iter::from_fn(|| silent.recv(Some(Duration::from_millis(10))).ok())
        .map(|m| m.kind())
        .collect();
    assert_eq!(kinds, [MessageKind::Init, MessageKind::GlobalUpdate, MessageKind::Shutdown]);
}

#[test]
fn non_finite_client_loss_aborts_the_run_as_numerical() {
    let (t, mut cfg) = small();
    cfg.hyper.eta_w = 1e200;
    cfg.hyper.grad_clip = None;
    match run_with_transport(
        TransportKind::Channel,
        cfg,
        None,
        t.train.clone(),
        t.test.clone(),
        &t.partition,
        &mut no_rounds,
    ) {
        Err(err) => assert!(err.is_numerical(), "{err}"),
        Ok(_) => panic!("diverging run completed"),
    }
}

#[test]
fn trace_checker_rejects_tampered_real_traces() {
    let (t, cfg) = small();
    let run = run_with_transport(
        TransportKind::Channel,
        cfg,
        None,
        t.train.clone(),
        t.test.clone(),
        &t.partition,
        &mut no_rounds,
    )
    .unwrap();
    let trace = run.server_trace;
    trace.check(Role::Server, 2, 2).unwrap();
    let reparsed = Trace::from_csv(&trace.to_csv()).unwrap();
    assert_eq!(reparsed, trace);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let mut bad = trace.clone();
        let i = rng.random_range(0..bad.events.len());
        match rng.random_range(0..3) {
            0 => {
                bad.events.remove(i);
            }
            1 => {
                bad.events[i].direction = if bad.events[i].direction == Direction::Sent {
                    Direction::Received
                } else {
                    Direction::Sent
                }
            }
            _ => bad.events[i].round = bad.events[i].round.map(|r| r + 1).or(Some(0)),
        }
        for (j, e) in bad.events.iter_mut().enumerate() {
            e.seq = j as u64;
        }
        assert!(bad.check(Role::Server, 2, 2).is_err());
    }
}

#[test]
fn random_tensors_survive_a_tcp_hop() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let weights = ModelWeights(vec![
        randn(&mut rng, &[64, 33]),
        Tensor::new(vec![3], vec![-0.0, f64::MIN_POSITIVE / 2.0, f64::MAX]).unwrap(),
    ]);
    let msg = RoundMessage::GlobalUpdate {
        round: 2,
        weights,
        arch: None,
    };
    let mut acceptor = fednas::comm::TcpAcceptor::bind("127.0.0.1:0").unwrap();
    let addr = acceptor.local_addr().unwrap();
    let sent = msg.clone();
    let h = std::thread::spawn(move || {
        let mut c = fednas::comm::tcp_connect(addr, Duration::from_secs(5)).unwrap();
        c.send(&sent).unwrap();
    });
    let mut server = fednas::comm::Acceptor::accept(&mut acceptor).unwrap();
    let got = server.recv(None).unwrap();
    h.join().unwrap();
    assert_eq!(encode(&got), encode(&msg));
}

mod common;

use std::sync::Arc;

use common::{brute_force_mean, desk_spec, fed_config, max_abs_diff, task, tiny_spec};
use fednas::data::{synthesize_dataset, SyntheticSpec};
use fednas::federation::{
    build_phase_network, client_state, global_test, history_csv, parse_history_csv, run_fedavg_eval, run_fednas, Checkpoint, FedError,
    HistoryRow, Phase, RoundRecord,
};
use fednas::local::evaluate;
use fednas::search_space::{build_super_network, discretize};

fn no_rounds(_: &RoundRecord) -> Result<(), FedError> {
    Ok(())
}

#[test]
fn single_client_federation_equals_centralized_training() {
    let t = task(8, 3, 8, 1, 31);
    let cfg = fed_config(tiny_spec(), 1, 3, 2, Phase::Search);
    let fed = run_fednas(cfg, t.train.clone(), t.test.clone(), &t.partition, &mut no_rounds).unwrap();

    let (net, store) = build_phase_network(&cfg, None).unwrap();
    let mut central = client_state(&cfg, 0, Arc::new(net), store, t.train.clone(), &t.partition).unwrap();
    central.search_epochs(0..6, &cfg.hyper).unwrap();

    assert!(fed.store.weights().bit_eq(&central.store.weights()));
    assert!(fed.network.arch_params(&fed.store).unwrap().bit_eq(&central.arch().unwrap()));
}

#[test]
fn random_model_scores_near_chance() {
    let spec = desk_spec();
    let test = synthesize_dataset(&SyntheticSpec {
        classes: 10,
        per_class: 50,
        shape: spec.input_shape,
        seed: 4,
        difficulty: 0.0,
        stream: 1,
    })
    .unwrap();
    assert_eq!(test.len(), 500);
    let (net, store) = build_super_network(&spec, 12).unwrap();
    let eval = global_test(&net, &store, &test, 100).unwrap();
    assert!((0.02..=0.25).contains(&eval.accuracy), "accuracy {}", eval.accuracy);
}

#[test]
fn reported_test_metrics_match_dumped_logits() {
    let t = task(6, 4, 8, 2, 32);
    let cfg = fed_config(tiny_spec(), 2, 2, 1, Phase::Search);
    let out = run_fednas(cfg, t.train.clone(), t.test.clone(), &t.partition, &mut no_rounds).unwrap();
    let eval = evaluate(&out.network, &out.store, &t.test, cfg.eval_batch_size, true).unwrap();
    let logits = eval.logits.unwrap();
    let classes = tiny_spec().num_classes;
    let (mut loss, mut correct) = (0.0, 0usize);
    for (row, &label) in logits.data().chunks(classes).zip(t.test.labels()) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        let best = (0..classes).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        correct += (best == label) as usize;
    }
    let n = t.test.len() as f64;
    let last = out.history.last().unwrap();
    assert!((loss / n - last.global_test_loss).abs() < 1e-12);
    assert_eq!(correct as f64 / n, last.global_test_acc);
}

#[test]
fn kept_payloads_reproduce_each_aggregate() {
    let t = task(6, 3, 8, 3, 33);
    let mut cfg = fed_config(tiny_spec(), 3, 2, 1, Phase::Search);
    cfg.keep_payloads = true;
    let out = run_fednas(cfg, t.train.clone(), t.test.clone(), &t.partition, &mut no_rounds).unwrap();
    for record in &out.history {
        let p = record.payloads.as_ref().unwrap();
        let n: Vec<usize> = p.updates.iter().map(|u| u.n_k).collect();
        for (i, agg) in p.aggregate.weights.0.iter().enumerate() {
            let parts: Vec<_> = p.updates.iter().map(|u| &u.weights.0[i]).collect();
            assert!(max_abs_diff(&brute_force_mean(&parts, &n), agg.data()) <= 1e-12);
        }
        let arch = p.aggregate.arch.as_ref().unwrap();
        let normals: Vec<_> = p.updates.iter().map(|u| &u.arch.as_ref().unwrap().normal).collect();
        assert!(max_abs_diff(&brute_force_mean(&normals, &n), arch.normal.data()) <= 1e-12);
        for (u, c) in p.updates.iter().zip(&record.clients) {
            assert_eq!((u.client_id, u.n_k), (c.client_id, c.n_k));
            assert_eq!(u.n_k, t.partition.clients[u.client_id].len());
        }
    }
    let last = out.history.last().unwrap().payloads.as_ref().unwrap();
    assert!(last.aggregate.weights.bit_eq(&out.store.weights()));
    assert_eq!(out.genotype.unwrap(), discretize(last.aggregate.arch.as_ref().unwrap()));
}

#[test]
fn checkpoint_replays_the_reported_accuracy() {
    let t = task(6, 4, 8, 2, 34);
    let cfg = fed_config(tiny_spec(), 2, 2, 1, Phase::Search);
    let out = run_fednas(cfg, t.train.clone(), t.test.clone(), &t.partition, &mut no_rounds).unwrap();
    let ck = Checkpoint::from_bytes(&out.checkpoint.to_bytes()).unwrap();
    assert_eq!(ck.round, 2);
    let (net, store) = ck.restore().unwrap();
    let eval = global_test(&net, &store, &t.test, cfg.eval_batch_size).unwrap();
    let last = out.history.last().unwrap();
    assert_eq!(eval.accuracy.to_bits(), last.global_test_acc.to_bits());
    assert_eq!(eval.loss.to_bits(), last.global_test_loss.to_bits());
}

#[test]
fn zero_local_epochs_keep_the_untrained_model() {
    let t = task(6, 4, 8, 2, 35);
    let search = fed_config(tiny_spec(), 2, 1, 1, Phase::Search);
    let genotype = run_fednas(search, t.train.clone(), t.test.clone(), &t.partition, &mut no_rounds)
        .unwrap()
        .genotype
        .unwrap();
    let cfg = fed_config(tiny_spec(), 2, 1, 0, Phase::Eval);
    let out = run_fedavg_eval(cfg, &genotype, t.train.clone(), t.test.clone(), &t.partition, &mut no_rounds).unwrap();
    let (net, store) = build_phase_network(&cfg, Some(&genotype)).unwrap();
    assert!(out.store.weights().bit_eq(&store.weights()));
    let baseline = global_test(&net, &store, &t.test, cfg.eval_batch_size).unwrap();
    assert_eq!(out.history[0].global_test_acc, baseline.accuracy);
    assert_eq!(out.genotype.as_ref(), Some(&genotype));
}

#[test]
fn runs_are_reproducible_and_independent_of_worker_count() {
    let t = task(6, 3, 8, 3, 36);
    let mut cfg = fed_config(tiny_spec(), 3, 2, 1, Phase::Search);
    let mut runs = Vec::new();
    for workers in [1, 1, 3] {
        cfg.workers = workers;
        runs.push(run_fednas(cfg, t.train.clone(), t.test.clone(), &t.partition, &mut no_rounds).unwrap());
    }
    for other in &runs[1..] {
        assert!(other.store.weights().bit_eq(&runs[0].store.weights()));
        assert_eq!(other.genotype, runs[0].genotype);
        let masked = |h: &[RoundRecord]| h.iter().map(|r| HistoryRow { duration_ms: 0, ..r.row() }).collect::<Vec<_>>();
        assert_eq!(history_csv(&masked(&other.history)), history_csv(&masked(&runs[0].history)));
    }
}

#[test]
fn history_csv_round_trips() {
    let t = task(6, 3, 8, 2, 37);
    let cfg = fed_config(tiny_spec(), 2, 2, 1, Phase::Search);
    let mut seen = Vec::new();
    let out = run_fednas(cfg, t.train.clone(), t.test.clone(), &t.partition, &mut |r| {
        seen.push(r.row());
        Ok(())
    })
    .unwrap();
    let rows: Vec<HistoryRow> = out.history.iter().map(|r| r.row()).collect();
    assert_eq!(seen, rows);
    assert_eq!(parse_history_csv(&history_csv(&rows)).unwrap(), rows);
    assert_eq!(rows.iter().map(|r| r.round).collect::<Vec<_>>(), [1, 2]);
}

#[test]
fn mismatched_inputs_are_configuration_errors() {
    let t = task(6, 3, 8, 2, 38);
    let cfg = fed_config(tiny_spec(), 3, 1, 1, Phase::Search);
    let err = run_fednas(cfg, t.train.clone(), t.test.clone(), &t.partition, &mut no_rounds)
        .err()
        .unwrap();
    assert!(matches!(err, FedError::Config(_)));
    let eval = fed_config(tiny_spec(), 2, 1, 1, Phase::Eval);
    assert!(matches!(
        run_fednas(eval, t.train.clone(), t.test.clone(), &t.partition, &mut no_rounds)
            .err()
            .unwrap(),
        FedError::Config(_)
    ));
    let zero = fed_config(tiny_spec(), 2, 0, 1, Phase::Search);
    assert!(matches!(
        run_fednas(zero, t.train.clone(), t.test.clone(), &t.partition, &mut no_rounds)
            .err()
            .unwrap(),
        FedError::Config(_)
    ));
}

#[test]
fn round_callback_errors_stop_the_run() {
    let t = task(6, 3, 8, 2, 39);
    let cfg = fed_config(tiny_spec(), 2, 3, 1, Phase::Search);
    let mut calls = 0;
    let err = run_fednas(cfg, t.train.clone(), t.test.clone(), &t.partition, &mut |_| {
        calls += 1;
        Err(FedError::Config("stop".into()))
    })
    .err()
    .unwrap();
    assert!(matches!(err, FedError::Config(_)));
    assert_eq!(calls, 1);
}

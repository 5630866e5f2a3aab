mod common;

use std::sync::Arc;

use common::desk_spec;
use fednas::autodiff::{ParamStore, Section};
use fednas::data::{synthesize_dataset, ClientShard, Dataset, SyntheticSpec};
use fednas::local::{client_local_search, evaluate, Batch, ClientState, SearchHyper};
use fednas::search_space::{build_fixed_network, build_super_network, Genotype, NetworkSpec};

const FIXTURE_JSON: &str = include_str!("fixtures/darts_like.genotype.json");

fn synthetic(classes: usize, per_class: usize, side: usize, seed: u64) -> Dataset {
    synthesize_dataset(&SyntheticSpec {
        classes,
        per_class,
        shape: (3, side, side),
        seed,
        difficulty: 0.0,
        stream: 0,
    })
    .unwrap()
}

fn hyper(batch_size: usize) -> SearchHyper {
    SearchHyper {
        batch_size,
        local_epochs: 1,
        augment: false,
        ..SearchHyper::default()
    }
}

fn small_state() -> (ClientState, Batch, Batch) {
    let spec = NetworkSpec {
        num_cells: 3,
        init_channels: 4,
        num_classes: 4,
        input_shape: (3, 8, 8),
    };
    let data = synthetic(4, 6, 8, 41);
    let (net, store) = build_super_network(&spec, 5).unwrap();
    let shard = ClientShard::from_indices(0, &(0..24).collect::<Vec<_>>(), 0.5, 2).unwrap();
    let train = Batch::from_dataset(&data, &shard.train[..8]).unwrap();
    let val = Batch::from_dataset(&data, &shard.val[..8]).unwrap();
    (ClientState::new(0, shard, 7, Arc::new(net), store, Arc::new(data)), train, val)
}

fn arch_values(store: &ParamStore) -> Vec<f64> {
    store
        .ids(Section::Arch)
        .flat_map(|id| store.get(id).unwrap().data().to_vec())
        .collect()
}

#[test]
fn desk_network_memorizes_a_32_sample_shard() {
    let spec = desk_spec();
    let data = Arc::new(synthetic(10, 4, 16, 42).subset(&(0..32).collect::<Vec<_>>()).unwrap());
    let genotype = Genotype::from_json(FIXTURE_JSON).unwrap();
    let (net, store) = build_fixed_network(&genotype, &spec, 3).unwrap();
    let shard = ClientShard::new(0, (0..16).collect(), (16..32).collect()).unwrap();
    let mut state = ClientState::new(0, shard, 8, Arc::new(net), store, data.clone());
    let hyper = hyper(16);
    let mut reached = None;
    for epoch in 0..200 {
        state.train_epochs(epoch..epoch + 1, &hyper).unwrap();
        if evaluate(&state.network, &state.store, &data, 32, false).unwrap().accuracy == 1.0 {
            reached = Some(epoch + 1);
            break;
        }
    }
    assert!(reached.is_some(), "32 samples not memorized in 200 epochs");
}

/// Softmax regression on raw pixels with full-batch gradient descent.
#[test]
fn linear_probe_separates_the_easiest_synthetic_task() {
    let data = synthetic(10, 50, 16, 43);
    let (n, classes) = (data.len(), 10);
    let d = data.image(0).len();
    let mut w = vec![0.0; classes * (d + 1)];
    let predict = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|j| {
                let row = &w[j * (d + 1)..(j + 1) * (d + 1)];
                row[d] + row[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    };
    let accuracy = |w: &[f64]| {
        (0..n)
            .filter(|&i| {
                let z = predict(w, data.image(i));
                (0..classes).fold(0, |b, j| if z[j] > z[b] { j } else { b }) == data.labels()[i]
            })
            .count() as f64
            / n as f64
    };
    let mut acc = accuracy(&w);
    for _ in 0..500 {
        if acc == 1.0 {
            break;
        }
        let mut grad = vec![0.0; w.len()];
        for i in 0..n {
            let x = data.image(i);
            let z = predict(&w, x);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for j in 0..classes {
                let g = e[j] / s - (j == data.labels()[i]) as usize as f64;
                let row = &mut grad[j * (d + 1)..(j + 1) * (d + 1)];
                row.iter_mut().zip(x).for_each(|(r, xv)| *r += g * xv);
                row[d] += g;
            }
        }
        w.iter_mut().zip(&grad).for_each(|(p, g)| *p -= 0.01 * g / n as f64);
        acc = accuracy(&w);
    }
    assert_eq!(acc, 1.0);
}

#[test]
fn weight_steps_reduce_loss_on_a_fixed_batch() {
    let (mut s, train, _) = small_state();
    let h = hyper(8);
    let first = s.step_w(&train, &h).unwrap();
    let mut last = first;
    for _ in 0..49 {
        last = s.step_w(&train, &h).unwrap();
    }
    let (after, _) = s.loss_and_gradient(&train, Section::Weight).unwrap();
    assert!(after < first * 0.5, "loss {first} -> {last} -> {after}");
}

#[test]
fn alpha_step_with_zero_lambda_is_a_pure_training_gradient_step() {
    let (mut s, train, val) = small_state();
    let h = SearchHyper { lambda: 0.0, ..hyper(8) };
    let before = arch_values(&s.store);
    let (_, g) = s.loss_and_gradient(&train, Section::Arch).unwrap();
    let g: Vec<f64> = s
        .store
        .ids(Section::Arch)
        .flat_map(|id| g.get(id).unwrap().data().to_vec())
        .collect();
    s.step_alpha(&train, &val, &h).unwrap();
    for ((a, b), g) in arch_values(&s.store).iter().zip(&before).zip(&g) {
        assert_eq!(*a, b - h.eta_alpha * g);
    }
}

#[test]
fn alpha_step_with_validation_equal_to_training_doubles_the_gradient() {
    let (mut single, train, _) = small_state();
    let (mut double, ..) = small_state();
    let before = arch_values(&single.store);
    single.step_alpha(&train, &train, &SearchHyper { lambda: 0.0, ..hyper(8) }).unwrap();
    double.step_alpha(&train, &train, &SearchHyper { lambda: 1.0, ..hyper(8) }).unwrap();
    for ((s, d), b) in arch_values(&single.store).iter().zip(arch_values(&double.store)).zip(&before) {
        assert!(((d - b) - 2.0 * (s - b)).abs() <= 1e-12);
    }
}

#[test]
fn identical_clients_produce_identical_results() {
    let (mut a, ..) = small_state();
    let (mut b, ..) = small_state();
    b.client_id = 5;
    let (w, alpha) = (a.store.weights(), a.arch().unwrap());
    let ra = client_local_search(&mut a, &w, &alpha, 1, &hyper(4)).unwrap();
    let rb = client_local_search(&mut b, &w, &alpha, 1, &hyper(4)).unwrap();
    assert!(ra.weights.bit_eq(&rb.weights));
    assert!(ra.arch.unwrap().bit_eq(&rb.arch.unwrap()));
    assert_eq!(ra.mean_train_loss.to_bits(), rb.mean_train_loss.to_bits());
    assert_eq!(ra.n_k, 24);
}

#[test]
fn relabelled_datasets_agree_with_the_prediction_counts() {
    let (s, ..) = small_state();
    let eval = evaluate(&s.network, &s.store, &s.dataset, 6, true).unwrap();
    let logits = eval.logits.unwrap();
    let preds: Vec<usize> = logits
        .data()
        .chunks(4)
        .map(|r| (0..4).fold(0, |b, j| if r[j] > r[b] { j } else { b }))
        .collect();
    let relabel = |labels: Vec<usize>| Dataset::new(s.dataset.images().clone(), labels, 4).unwrap();
    let matching = relabel(preds.clone());
    assert_eq!(evaluate(&s.network, &s.store, &matching, 6, false).unwrap().accuracy, 1.0);
    let shifted = relabel(preds.iter().map(|p| (p + 1) % 4).collect());
    assert_eq!(evaluate(&s.network, &s.store, &shifted, 6, false).unwrap().accuracy, 0.0);
    let recount = preds.iter().zip(s.dataset.labels()).filter(|(p, l)| p == l).count();
    assert_eq!(eval.correct, recount);
}

#[test]
fn empty_shard_is_rejected() {
    let (mut s, ..) = small_state();
    s.shard = ClientShard {
        client_id: 0,
        train: Vec::new(),
        val: Vec::new(),
    };
    let (w, a) = (s.store.weights(), s.arch().unwrap());
    assert!(client_local_search(&mut s, &w, &a, 0, &hyper(4)).is_err());
}

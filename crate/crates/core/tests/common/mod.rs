#![allow(dead_code)]

use std::sync::Arc;

use fednas::autodiff::{
    finite_diff_check_with, ComputeGraph, FiniteDiffOptions, ModelWeights, NodeId, ParamStore, Section, SectionFilter, Window,
};
use fednas::data::{dirichlet_partition, synthesize_dataset, Dataset, Partition, PartitionSpec, SyntheticSpec};
use fednas::federation::{ClientUpdate, FedConfig, Phase};
use fednas::local::SearchHyper;
use fednas::search_space::{
    apply_op, build_super_network, mixed_op_forward, ArchParams, BoundOp, Gene, Genotype, NetworkSpec, OpKind, ReluCache, NUM_EDGES,
    NUM_OPS,
};
use fednas::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const GRAD_TOLERANCE: f64 = 1e-4;

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

pub fn desk_spec() -> NetworkSpec {
    NetworkSpec {
        num_cells: 4,
        init_channels: 8,
        num_classes: 10,
        input_shape: (3, 16, 16),
    }
}

pub fn tiny_spec() -> NetworkSpec {
    NetworkSpec {
        num_cells: 3,
        init_channels: 4,
        num_classes: 10,
        input_shape: (3, 8, 8),
    }
}

pub struct Task {
    pub train: Arc<Dataset>,
    pub test: Arc<Dataset>,
    pub partition: Partition,
}

/// Synthetic 10-class task at `side`×`side` with a Dirichlet partition.
pub fn task(per_class: usize, test_per_class: usize, side: usize, clients: usize, seed: u64) -> Task {
    let synth = SyntheticSpec {
        classes: 10,
        per_class,
        shape: (3, side, side),
        seed,
        difficulty: 0.0,
        stream: 0,
    };
    let train = synthesize_dataset(&synth).unwrap();
    let test = synthesize_dataset(&synth.test_split(test_per_class)).unwrap();
    let partition = dirichlet_partition(
        train.labels(),
        10,
        &PartitionSpec {
            clients,
            concentration: 0.5,
            seed: seed + 1,
        },
    )
    .unwrap();
    Task {
        train: Arc::new(train),
        test: Arc::new(test),
        partition,
    }
}

pub fn fed_config(spec: NetworkSpec, clients: usize, rounds: usize, local_epochs: usize, phase: Phase) -> FedConfig {
    FedConfig {
        clients,
        rounds,
        hyper: SearchHyper {
            local_epochs,
            batch_size: 16,
            ..SearchHyper::default()
        },
        spec,
        seed: 11,
        phase,
        eval_batch_size: 64,
        workers: 0,
        keep_payloads: false,
    }
}

fn bind(store: &mut ParamStore, rng: &mut ChaCha8Rng, kind: OpKind, channels: usize) -> BoundOp {
    let params = kind
        .param_shapes(channels)
        .into_iter()
        .map(|(name, shape)| {
            let fan_in: usize = shape[1..].iter().product();
            let mut t = randn(rng, &shape);
            t.data_mut().iter_mut().for_each(|v| *v *= (2.0 / fan_in as f64).sqrt());
            store.register(format!("{}.{name}", kind.name()), Section::Weight, t)
        })
        .collect();
    BoundOp { kind, params }
}

fn projected(graph: &mut ComputeGraph, y: NodeId, rng_seed: u64) -> Result<NodeId, fednas::autodiff::AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let shape = graph.value(y).shape().to_vec();
    let r = graph.input(randn(&mut rng, &shape));
    let p = graph.mul(y, r)?;
    Ok(graph.sum(p))
}

fn check(
    name: String,
    store: &ParamStore,
    wrt: SectionFilter,
    coords: Option<usize>,
    loss: impl FnMut(&mut ComputeGraph, &ParamStore) -> Result<NodeId, fednas::autodiff::AutodiffError>,
) -> (String, f64) {
    let opts = FiniteDiffOptions {
        epsilon: 1e-5,
        wrt,
        max_coords_per_param: coords,
        seed: 5,
    };
    let report = finite_diff_check_with(loss, store, &opts).unwrap_or_else(|e| panic!("{name}: {e}"));
    (name, report.max_rel_error)
}

/// Analytic against central-difference gradients for every candidate op at
/// both strides, the stem, the classifier, a mixed op, and a whole
/// super-network. Returns `(case, max relative error)`.
pub fn gradient_suite() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let c = 3;
    for (i, kind) in OpKind::ALL.into_iter().enumerate() {
        for stride in [1, 2] {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
            let mut store = ParamStore::new();
            let x = store.register("x", Section::Weight, randn(&mut rng, &[2, c, 6, 6]));
            let op = bind(&mut store, &mut rng, kind, c);
            out.push(check(
                format!("{} stride {stride}", kind.name()),
                &store,
                SectionFilter::All,
                None,
                |g, s| {
                    let xn = g.param(s, x)?;
                    let mut cache = ReluCache::new();
                    let y = apply_op(g, s, &mut cache, &op, xn, stride)?;
                    projected(g, y, 7)
                },
            ));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut store = ParamStore::new();
    let images = randn(&mut rng, &[2, 3, 6, 6]);
    let w = store.register("stem", Section::Weight, randn(&mut rng, &[6, 3, 3, 3]));
    out.push(check("stem".into(), &store, SectionFilter::All, None, |g, s| {
        let x = g.input(images.clone());
        let wn = g.param(s, w)?;
        let y = g.conv2d(x, wn, Window::new(3, 1, 1, 1))?;
        let y = g.batch_norm(y)?;
        projected(g, y, 8)
    }));

    let mut store = ParamStore::new();
    let features = store.register("features", Section::Weight, randn(&mut rng, &[3, 4, 3, 3]));
    let cw = store.register("classifier.weight", Section::Weight, randn(&mut rng, &[5, 4]));
    let cb = store.register("classifier.bias", Section::Weight, randn(&mut rng, &[5]));
    out.push(check("classifier".into(), &store, SectionFilter::All, None, |g, s| {
        let f = g.param(s, features)?;
        let pooled = g.global_avg_pool(f)?;
        let (wn, bn) = (g.param(s, cw)?, g.param(s, cb)?);
        let logits = g.linear(pooled, wn, bn)?;
        g.softmax_cross_entropy(logits, &[0, 4, 2])
    }));

    for stride in [1, 2] {
        let mut store = ParamStore::new();
        let x = store.register("x", Section::Weight, randn(&mut rng, &[2, c, 6, 6]));
        let alpha = store.register("alpha", Section::Arch, randn(&mut rng, &[1, NUM_OPS]));
        let ops: Vec<BoundOp> = OpKind::ALL.into_iter().map(|k| bind(&mut store, &mut rng, k, c)).collect();
        out.push(check(
            format!("mixed op stride {stride}"),
            &store,
            SectionFilter::All,
            None,
            |g, s| {
                let xn = g.param(s, x)?;
                let an = g.param(s, alpha)?;
                let weights = g.softmax_rows(an)?;
                let mut cache = ReluCache::new();
                let y = mixed_op_forward(g, s, &mut cache, weights, 0, &ops, xn, stride)?;
                projected(g, y, 9)
            },
        ));
    }

    let spec = NetworkSpec {
        num_cells: 3,
        init_channels: 2,
        num_classes: 3,
        input_shape: (3, 8, 8),
    };
    let (net, mut store) = build_super_network(&spec, 4).unwrap();
    let mut arch_rng = ChaCha8Rng::seed_from_u64(300);
    net.set_arch_params(&mut store, &ArchParams::random(&mut arch_rng, 0.5)).unwrap();
    let images = randn(&mut rng, &[4, 3, 8, 8]);
    let labels = [0, 1, 2, 1];
    out.push(check("super-network".into(), &store, SectionFilter::All, Some(2), |g, s| {
        net.loss(g, s, &images, &labels).map(|(loss, _)| loss)
    }));
    out
}

/// Weight count of one candidate op on `c` channels, from the op definitions:
/// separable convs stack two (depthwise k×k, pointwise 1×1) pairs, dilated
/// convs one pair, and pools, identity and zero carry no weights.
pub fn hand_op_params(kind: OpKind, c: usize) -> usize {
    let pair = |k: usize| c * k * k + c * c;
    match kind {
        OpKind::SepConv3x3 => 2 * pair(3),
        OpKind::SepConv5x5 => 2 * pair(5),
        OpKind::DilConv3x3 => pair(3),
        OpKind::DilConv5x5 => pair(5),
        _ => 0,
    }
}

/// Hand count of network weights: stem 3×3 conv to 3C channels, per cell two
/// 1×1 preprocessing convs and the ops on its edges, reductions doubling C at
/// one and two thirds of the depth, and a linear classifier on 4C features.
pub fn hand_count(spec: &NetworkSpec, genotype: Option<&Genotype>) -> usize {
    let c0 = spec.init_channels;
    let mut total = 3 * c0 * spec.input_shape.0 * 9;
    let (mut c_pp, mut c_p, mut c) = (3 * c0, 3 * c0, c0);
    let n = spec.num_cells;
    for k in 0..n {
        let reduction = k == n / 3 || k == 2 * n / 3;
        if reduction {
            c *= 2;
        }
        total += c_pp * c + c_p * c;
        total += match genotype {
            None => NUM_EDGES * OpKind::ALL.iter().map(|&op| hand_op_params(op, c)).sum::<usize>(),
            Some(g) => {
                let cell = if reduction { &g.reduce } else { &g.normal };
                cell.iter().flatten().map(|gene| hand_op_params(gene.op, c)).sum()
            }
        };
        c_pp = c_p;
        c_p = 4 * c;
    }
    total + spec.num_classes * c_p + spec.num_classes
}

fn textbook_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let mut s = 0.0;
    for v in &e {
        s += v;
    }
    e.iter().map(|v| v / s).collect()
}

/// Brute-force selector: for each node, tries every pair of distinct
/// predecessors and every non-zero op on each, and keeps the candidate that
/// no other candidate beats. An op beats another on the same edge with a
/// larger weight, or an equal weight and a lower column. An edge beats
/// another with a larger best weight, or an equal one and a lower predecessor.
pub fn brute_force_cell(alpha: &Tensor) -> Vec<Vec<Gene>> {
    let zero = OpKind::Zero.ordinal();
    let mut edge = 0;
    let mut nodes = Vec::new();
    for j in 0..4 {
        let preds = j + 2;
        let rows: Vec<Vec<f64>> = (0..preds)
            .map(|i| textbook_softmax(&alpha.data()[(edge + i) * NUM_OPS..][..NUM_OPS]))
            .collect();
        edge += preds;
        let op_ok = |p: &[f64], o: usize| o != zero && (0..NUM_OPS).all(|q| q == zero || p[q] < p[o] || (p[q] == p[o] && q >= o));
        let strength = |i: usize| (0..NUM_OPS).filter(|&o| op_ok(&rows[i], o)).map(|o| rows[i][o]).next().unwrap();
        let beats = |a: usize, b: usize| strength(a) > strength(b) || (strength(a) == strength(b) && a < b);
        let mut found = Vec::new();
        for a in 0..preds {
            for b in a + 1..preds {
                if !(0..preds).filter(|&r| r != a && r != b).all(|r| beats(a, r) && beats(b, r)) {
                    continue;
                }
                for oa in 0..NUM_OPS {
                    for ob in 0..NUM_OPS {
                        if op_ok(&rows[a], oa) && op_ok(&rows[b], ob) {
                            found.push(vec![
                                Gene {
                                    input: a,
                                    op: OpKind::from_ordinal(oa).unwrap(),
                                },
                                Gene {
                                    input: b,
                                    op: OpKind::from_ordinal(ob).unwrap(),
                                },
                            ]);
                        }
                    }
                }
            }
        }
        assert_eq!(found.len(), 1, "selection must be unique");
        nodes.push(found.pop().unwrap());
    }
    nodes
}

pub fn brute_force_discretize(arch: &ArchParams) -> Genotype {
    Genotype {
        normal: brute_force_cell(&arch.normal),
        reduce: brute_force_cell(&arch.reduce),
    }
}

/// Random α: continuous draws, or coarse integers that force ties.
pub fn random_alpha(rng: &mut ChaCha8Rng) -> ArchParams {
    let coarse = rng.random_bool(0.5);
    let mut draw = || {
        let data = (0..NUM_EDGES * NUM_OPS)
            .map(|_| {
                if coarse {
                    rng.random_range(-1i32..=1) as f64
                } else {
                    StandardNormal.sample(rng)
                }
            })
            .collect();
        Tensor::new(vec![NUM_EDGES, NUM_OPS], data).unwrap()
    };
    let normal = draw();
    let reduce = draw();
    ArchParams { normal, reduce }
}

/// Random aggregation instance: K clients with shared shapes.
pub fn random_updates(rng: &mut ChaCha8Rng, k: usize, with_arch: bool) -> Vec<ClientUpdate> {
    let shapes: Vec<Vec<usize>> = (0..rng.random_range(1..4))
        .map(|_| vec![rng.random_range(1..5), rng.random_range(1..5)])
        .collect();
    (0..k)
        .map(|id| ClientUpdate {
            client_id: id,
            weights: ModelWeights(shapes.iter().map(|s| randn(rng, s)).collect()),
            arch: with_arch.then(|| ArchParams {
                normal: randn(rng, &[NUM_EDGES, NUM_OPS]),
                reduce: randn(rng, &[NUM_EDGES, NUM_OPS]),
            }),
            n_k: rng.random_range(1..1000),
        })
        .collect()
}

/// Σ N_k x_k / Σ N_k, coordinate by coordinate, written the obvious way.
pub fn brute_force_mean(tensors: &[&Tensor], n: &[usize]) -> Vec<f64> {
    let total: f64 = n.iter().map(|&v| v as f64).sum();
    (0..tensors[0].len())
        .map(|i| tensors.iter().zip(n).map(|(t, &nk)| nk as f64 * t.data()[i]).sum::<f64>() / total)
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

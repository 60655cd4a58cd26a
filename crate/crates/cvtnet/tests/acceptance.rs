//! The acceptance gate: one check per release criterion, each reporting
//! a single pass/fail line. Run with `cargo test --test acceptance`.

use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cvtnet::community::{
    aggregate, brute_force_best_partition, louvain_hierarchy, louvain_local_pass, modularity,
    Partition, WeightedGraph,
};
use cvtnet::cvt::{build_cvt, relabel, ConfusionVisualTree, MultiLevelLabel};
use cvtnet::fixtures::planted_two_block_graph;
use cvtnet::ingest::{softmax, LabeledSample};
use cvtnet::vtnet::{
    coarse_loss, fine_loss, gradient_check, prob_average, train, BranchOutputs, FineLossMode,
    LayerSpec, LrSchedule, Tensor, TrainPhase, VtNet, VtNetConfig,
};

struct Gate {
    failures: Vec<&'static str>,
}

impl Gate {
    fn check(&mut self, name: &'static str, passed: bool) {
        println!("[{}] {name}", if passed { "PASS" } else { "FAIL" });
        if !passed {
            self.failures.push(name);
        }
    }
}

fn random_graph(rng: &mut ChaCha8Rng) -> WeightedGraph {
    let n = rng.gen_range(5..=8);
    let mut g = WeightedGraph::new(n);
    // Two planted groups with denser internal weights, plus noise.
    let split = n / 2;
    for i in 0..n {
        for j in (i + 1)..n {
            let same = (i < split) == (j < split);
            let base = if same { 1.0 } else { 0.1 };
            if rng.gen_bool(if same { 0.9 } else { 0.4 }) {
                g.set_edge(i, j, base * rng.gen_range(0.5..1.5));
            }
        }
    }
    if g.total_weight() <= 0.0 {
        g.set_edge(0, 1, 1.0);
    }
    g
}

/// Final Louvain modularity on a raw weighted graph: repeated local
/// passes + aggregation, mirroring the hierarchy driver.
fn louvain_final_q(g: &WeightedGraph, seed: u64) -> f64 {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = g.clone();
    let mut node_of: Vec<usize> = (0..g.num_nodes()).collect();
    let mut best = {
        let singles: Vec<usize> = (0..g.num_nodes()).collect();
        modularity(g, &Partition::from_labels(&singles)).unwrap()
    };
    loop {
        let mut order: Vec<usize> = (0..current.num_nodes()).collect();
        order.shuffle(&mut rng);
        let pass = louvain_local_pass(&current, &order).unwrap();
        if pass.num_communities() == current.num_nodes() {
            return best;
        }
        let composed: Vec<usize> = node_of.iter().map(|&v| pass.community_of(v)).collect();
        let q = modularity(g, &Partition::from_labels(&composed)).unwrap();
        best = best.max(q);
        current = aggregate(&current, &pass);
        node_of = composed;
        if current.num_nodes() == 1 {
            return best;
        }
    }
}

fn two_triangles() -> WeightedGraph {
    let mut g = WeightedGraph::new(6);
    for (i, j) in [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)] {
        g.set_edge(i, j, 1.0);
    }
    g
}

fn default_vtnet(tree: &ConfusionVisualTree, input_dim: usize, seed: u64) -> VtNet {
    let head_sizes = tree.level_sizes();
    let k = head_sizes.len();
    let base = vec![
        LayerSpec::Affine { out_dim: 32 },
        LayerSpec::Relu,
        LayerSpec::Affine { out_dim: 32 },
        LayerSpec::Relu,
    ];
    VtNet::build(
        VtNetConfig {
            input_shape: vec![input_dim],
            taps: (1..k).map(|i| i * base.len() / k).collect(),
            base,
            branch_stacks: vec![vec![LayerSpec::Affine { out_dim: 32 }, LayerSpec::Relu]; k],
            head_sizes,
            fine_loss_mode: FineLossMode::Literal,
            seed,
        },
        tree.parent_map(),
    )
    .unwrap()
}

#[test]
fn acceptance() {
    let mut gate = Gate { failures: vec![] };

    // 1. Louvain vs brute force on 100 random 5..8-node graphs.
    {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(1001);
        let mut never_exceeds = true;
        let mut attained = 0;
        for i in 0..100 {
            let g = random_graph(&mut rng);
            let (_, q_opt) = brute_force_best_partition(&g).unwrap();
            let q_lou = louvain_final_q(&g, 2000 + i);
            if q_lou > q_opt + 1e-12 {
                never_exceeds = false;
            }
            if q_lou >= 0.9 * q_opt - 1e-12 {
                attained += 1;
            }
        }
        gate.check(
            "modularity oracle equivalence (100 graphs, >=90 near-optimal, <60s)",
            never_exceeds && attained >= 90 && start.elapsed().as_secs() < 60,
        );
    }

    // 2. Analytic modularity values.
    {
        let tri2 = two_triangles();
        let single = modularity(&tri2, &Partition::from_labels(&[0; 6])).unwrap();
        let split = modularity(&tri2, &Partition::from_labels(&[0, 0, 0, 1, 1, 1])).unwrap();
        let mut tri = WeightedGraph::new(3);
        for (i, j) in [(0, 1), (1, 2), (0, 2)] {
            tri.set_edge(i, j, 1.0);
        }
        let singleton = modularity(&tri, &Partition::from_labels(&[0, 1, 2])).unwrap();
        gate.check(
            "analytic modularity values (0, 0.5, -1/3)",
            single.abs() < 1e-12
                && (split - 0.5).abs() < 1e-12
                && (singleton + 1.0 / 3.0).abs() < 1e-12,
        );
    }

    // 3. Aggregation preserves modularity on the suite.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(1001);
        let mut ok = true;
        for i in 0..100 {
            let g = random_graph(&mut rng);
            use rand::seq::SliceRandom;
            let mut order: Vec<usize> = (0..g.num_nodes()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(3000 + i));
            let p = louvain_local_pass(&g, &order).unwrap();
            let q_before = modularity(&g, &p).unwrap();
            let agg = aggregate(&g, &p);
            let singles: Vec<usize> = (0..agg.num_nodes()).collect();
            let q_after = modularity(&agg, &Partition::from_labels(&singles)).unwrap();
            if (q_before - q_after).abs() > 1e-9 {
                ok = false;
            }
        }
        gate.check("aggregation preserves modularity (1e-9, all suite graphs)", ok);
    }

    // 4. Planted two-block recovery: 5 then 2 communities, 4-level tree.
    {
        let start = Instant::now();
        let g = planted_two_block_graph();
        let h = louvain_hierarchy(&g, 42).unwrap();
        let counts: Vec<usize> = h
            .levels
            .iter()
            .map(|l| l.partition.num_communities())
            .collect();
        let names: Vec<String> = g.node_labels().to_vec();
        let tree = build_cvt(&h, &names).unwrap();
        let mut sizes = vec![1];
        sizes.extend(tree.level_sizes());
        gate.check(
            "planted 10-node recovery: hierarchy [5,2], tree [1,2,5,10], 3 branches, <1s",
            counts == vec![5, 2]
                && tree.depth() == 4
                && sizes == vec![1, 2, 5, 10]
                && tree.depth() - 1 == 3
                && start.elapsed().as_millis() < 1000,
        );
    }

    // 5. Relabel correctness: exact path on the planted tree, label-set
    // containment on 1000 random planted trees.
    {
        let g = planted_two_block_graph();
        let h = louvain_hierarchy(&g, 42).unwrap();
        let names: Vec<String> = g.node_labels().to_vec();
        let tree = build_cvt(&h, &names).unwrap();
        let dog = LabeledSample {
            sample_id: "dog".into(),
            features: vec![],
            fine_label: 7,
        };
        let labels = relabel(&[dog], &tree).unwrap();
        let mut ok = labels[0].targets.len() == 3 && *labels[0].targets.last().unwrap() == 7;

        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..1000 {
            let depth = rng.gen_range(1..=3);
            let branching: Vec<usize> = (0..depth).map(|_| rng.gen_range(2..=4)).collect();
            let leaves: usize = branching.iter().product();
            let names: Vec<String> = (0..leaves).map(|i| format!("n{i}")).collect();
            let t = ConfusionVisualTree::from_branching(&branching, &names).unwrap();
            let fine = rng.gen_range(0..leaves);
            let sample = LabeledSample {
                sample_id: "x".into(),
                features: vec![],
                fine_label: fine,
            };
            let l = &relabel(&[sample], &t).unwrap()[0];
            for (b, &target) in l.targets.iter().enumerate() {
                let node_id = t.level(b + 2)[target];
                if !t.node(node_id).label_set.contains(&fine) {
                    ok = false;
                }
            }
        }
        gate.check("relabel paths cover the fine label (planted + 1000 random)", ok);
    }

    // 6. Probabilistic-averaging properties.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let mut ok = true;
        for _ in 0..10_000 {
            let p = rng.gen_range(2..=4);
            let c_fine = rng.gen_range(p..=12);
            let t: Vec<usize> = (0..c_fine).map(|_| rng.gen_range(0..p)).collect();
            let raw_c: Vec<f64> = (0..p).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let raw_f: Vec<f64> = (0..c_fine).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let cp = softmax(&raw_c).unwrap();
            let fk = softmax(&raw_f).unwrap();
            let avg = prob_average(&cp, &fk, &t).unwrap();
            if (avg.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                ok = false;
            }
            let uniform = vec![1.0 / p as f64; p];
            let avg_u = prob_average(&uniform, &fk, &t).unwrap();
            if avg_u
                .iter()
                .zip(&fk)
                .any(|(a, b)| (a - b).abs() > 1e-15)
            {
                ok = false;
            }
        }
        let hand = prob_average(&[0.8, 0.2], &[0.5, 0.5], &[0, 1]).unwrap();
        ok &= (hand[0] - 0.8).abs() < 1e-12 && (hand[1] - 0.2).abs() < 1e-12;
        gate.check("averaging: sums to 1, uniform identity, hand case [0.8,0.2]", ok);
    }

    // 7. Loss closed forms.
    {
        let out = |logits: Vec<Vec<f64>>| -> BranchOutputs {
            let fine = softmax(logits.last().unwrap()).unwrap();
            BranchOutputs {
                coarse_probs: Some(softmax(&logits[0]).unwrap()),
                fine_softmax: fine.clone(),
                averaged: fine,
                logits,
            }
        };
        let label = |t: Vec<usize>| MultiLevelLabel {
            sample_id: "s".into(),
            targets: t,
        };
        let uniform = coarse_loss(
            &[out(vec![vec![0.0; 5], vec![0.0; 3]])],
            &[label(vec![0, 0])],
            &[1.0, 0.0],
        )
        .unwrap();
        let skewed = coarse_loss(
            &[out(vec![vec![3f64.ln(), 0.0], vec![0.0, 0.0]])],
            &[label(vec![0, 0])],
            &[1.0, 0.0],
        )
        .unwrap();
        let literal = fine_loss(&[vec![0.8, 0.2]], &[0], 1.0, FineLossMode::Literal).unwrap();
        gate.check(
            "loss closed forms: ln C, -ln 0.75, literal 0.437488",
            (uniform - 5f64.ln()).abs() < 1e-9
                && (skewed + 0.75f64.ln()).abs() < 1e-9
                && (literal - 0.437488).abs() < 1e-5,
        );
    }

    // 8. Gradient check across every layer kind, both losses, and the
    // cross-branch averaging path.
    {
        let start = Instant::now();
        let label = |t: Vec<usize>| MultiLevelLabel {
            sample_id: "g".into(),
            targets: t,
        };
        let mut ok = true;

        let mut mlp = VtNet::build(
            VtNetConfig {
                input_shape: vec![3],
                base: vec![LayerSpec::Affine { out_dim: 5 }, LayerSpec::Relu],
                taps: vec![],
                branch_stacks: vec![vec![LayerSpec::Affine { out_dim: 4 }, LayerSpec::Relu]],
                head_sizes: vec![3],
                fine_loss_mode: FineLossMode::Literal,
                seed: 17,
            },
            vec![0, 1, 2],
        )
        .unwrap();
        let batch: Vec<_> = (0..4)
            .map(|i| {
                (
                    Tensor::from_vec(&[3], vec![0.3 * i as f64, -0.5, 1.0 + 0.1 * i as f64])
                        .unwrap(),
                    label(vec![i % 3]),
                )
            })
            .collect();
        ok &= gradient_check(&mut mlp, &batch, &[1.0], 1e-5).unwrap().passed();

        let mut two = VtNet::build(
            VtNetConfig {
                input_shape: vec![4],
                base: vec![LayerSpec::Affine { out_dim: 6 }, LayerSpec::Relu],
                taps: vec![1],
                branch_stacks: vec![
                    vec![LayerSpec::Affine { out_dim: 4 }, LayerSpec::Relu],
                    vec![LayerSpec::Affine { out_dim: 4 }, LayerSpec::Relu],
                ],
                head_sizes: vec![2, 4],
                fine_loss_mode: FineLossMode::Literal,
                seed: 18,
            },
            vec![0, 0, 1, 1],
        )
        .unwrap();
        let batch: Vec<_> = (0..3)
            .map(|i| {
                (
                    Tensor::from_vec(&[4], vec![0.2 * i as f64, 0.7, -0.4, 0.9]).unwrap(),
                    label(vec![i % 2, i % 4]),
                )
            })
            .collect();
        ok &= gradient_check(&mut two, &batch, &[0.5, 1.0], 1e-5).unwrap().passed();

        let mut conv = VtNet::build(
            VtNetConfig {
                input_shape: vec![1, 4, 4],
                base: vec![
                    LayerSpec::Conv2d { out_channels: 2 },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool2d,
                ],
                taps: vec![2],
                branch_stacks: vec![
                    vec![
                        LayerSpec::Flatten,
                        LayerSpec::Affine { out_dim: 4 },
                        LayerSpec::Relu,
                    ],
                    vec![
                        LayerSpec::Conv2d { out_channels: 2 },
                        LayerSpec::Relu,
                        LayerSpec::Flatten,
                    ],
                ],
                head_sizes: vec![2, 4],
                fine_loss_mode: FineLossMode::LogF,
                seed: 19,
            },
            vec![0, 0, 1, 1],
        )
        .unwrap();
        let batch: Vec<_> = (0..2)
            .map(|i| {
                let data: Vec<f64> = (0..16).map(|j| ((i + j) as f64 * 0.37).sin()).collect();
                (
                    Tensor::from_vec(&[1, 4, 4], data).unwrap(),
                    label(vec![i % 2, (i + 1) % 4]),
                )
            })
            .collect();
        ok &= gradient_check(&mut conv, &batch, &[1.0, 1.0], 1e-5).unwrap().passed();

        gate.check(
            "gradient check: every layer kind, both losses, cross path (<5min)",
            ok && start.elapsed().as_secs() < 300,
        );
    }

    // 9. Phase isolation: fine-exclusive gradients exactly zero through
    // a whole epoch of phase-1 batches.
    {
        let tree = ConfusionVisualTree::from_branching(
            &[2, 4],
            &(0..8).map(|i| format!("n{i}")).collect::<Vec<_>>(),
        )
        .unwrap();
        let mut net = default_vtnet(&tree, 4, 77);
        let (base_len, branch_lens) = net.param_layout();
        let fine_start = base_len + branch_lens[..branch_lens.len() - 1].iter().sum::<usize>();
        let weights = TrainPhase::coarse(net.num_branches(), 1).loss_weights;

        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let data: Vec<(Tensor, MultiLevelLabel)> = (0..64)
            .map(|i| {
                let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let fine = i % 8;
                (
                    Tensor::from_vec(&[4], x).unwrap(),
                    MultiLevelLabel {
                        sample_id: format!("p{i}"),
                        targets: tree.target_path(fine),
                    },
                )
            })
            .collect();

        let mut ok = true;
        for batch in data.chunks(16) {
            net.zero_grads();
            net.backward_batch(batch, &weights).unwrap();
            let grads = net.flat_grads();
            if grads[fine_start..].iter().any(|&g| g != 0.0) {
                ok = false;
            }
        }
        gate.check("phase isolation: fine-branch gradients exactly zero in phase 1", ok);
    }

    // 10. End-to-end planted run through the command-line pipeline.
    {
        let start = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("cfg.ini");
        std::fs::write(
            &cfg_path,
            "[synth]\nbranching = 2,4\nsamples_per_leaf = 50\nfeature_dim = 6\n\
             separation = 2.0\nnoise = 0.12\nseed = 7\n\n[graph]\nn_top = 5\n\n\
             [detect]\nseed = 42\n\n[train]\nphase1_epochs = 10\nphase1_lr = 0.02\n\
             phase2_epochs = 80\nphase2_lr = 0.1\nbatch_size = 32\nholdout = 0.2\nseed = 5\n",
        )
        .unwrap();
        let run = |out: &str| -> (f64, f64, String) {
            let out_dir = dir.path().join(out);
            let stage = |cmd: &str| -> String {
                let result = Command::new(env!("CARGO_BIN_EXE_cvtnet"))
                    .args([
                        "--config",
                        cfg_path.to_str().unwrap(),
                        "--out",
                        out_dir.to_str().unwrap(),
                        "--no-timestamp",
                        cmd,
                    ])
                    .output()
                    .unwrap();
                assert!(result.status.success(), "{cmd} failed");
                String::from_utf8(result.stdout).unwrap()
            };
            for cmd in ["synth", "build-graph", "detect", "tree"] {
                stage(cmd);
            }
            let train_out = stage("train");
            let mut per_branch: Vec<(usize, f64)> = Vec::new();
            for line in train_out.lines() {
                if let Some(rest) = line.strip_prefix("train: branch ") {
                    let mut parts = rest.split(" holdout top1 ");
                    let branch: usize = parts.next().unwrap().trim().parse().unwrap();
                    let acc: f64 = parts.next().unwrap().trim().parse().unwrap();
                    per_branch.push((branch, acc));
                }
            }
            per_branch.sort_unstable_by_key(|&(b, _)| b);
            let coarse = per_branch.first().map_or(0.0, |&(_, a)| a);
            let fine = per_branch.last().map_or(0.0, |&(_, a)| a);
            let metrics =
                std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
            (coarse, fine, metrics)
        };
        let (coarse_a, fine_a, metrics_a) = run("a");
        let (coarse_b, fine_b, metrics_b) = run("b");
        gate.check(
            "end-to-end planted pipeline: coarse>=0.98, fine>=0.95, deterministic, <5min",
            coarse_a >= 0.98
                && fine_a >= 0.95
                && (coarse_a, fine_a) == (coarse_b, fine_b)
                && metrics_a == metrics_b
                && start.elapsed().as_secs() < 300,
        );
    }

    // 11. Reduction sanity: a single-branch pipeline net trains exactly
    // like a plain softmax classifier built from the same layers.
    {
        let names: Vec<String> = (0..4).map(|i| format!("n{i}")).collect();
        let tree = ConfusionVisualTree::from_branching(&[4], &names).unwrap();
        let config = VtNetConfig {
            input_shape: vec![3],
            base: vec![LayerSpec::Affine { out_dim: 8 }, LayerSpec::Relu],
            taps: vec![],
            branch_stacks: vec![vec![LayerSpec::Affine { out_dim: 8 }, LayerSpec::Relu]],
            head_sizes: vec![4],
            fine_loss_mode: FineLossMode::LogF,
            seed: 23,
        };
        let mut net = VtNet::build(config.clone(), tree.parent_map()).unwrap();
        let mut reference = VtNet::build(config, tree.parent_map()).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let data: Vec<(Tensor, MultiLevelLabel)> = (0..32)
            .map(|i| {
                let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (
                    Tensor::from_vec(&[3], x).unwrap(),
                    MultiLevelLabel {
                        sample_id: format!("r{i}"),
                        targets: vec![i % 4],
                    },
                )
            })
            .collect();

        let epochs = 15;
        let batch_size = 8;
        let lr = 0.05;
        let shuffle_seed = 4u64;
        let phase = TrainPhase {
            loss_weights: vec![1.0],
            epochs,
            lr: LrSchedule::constant(lr),
            batch_size,
            shuffle_seed,
        };
        let rows = train(&mut net, &data, &[phase], 31).unwrap();
        let pipeline_trace: Vec<f64> = rows.iter().map(|r| r.loss).collect();

        // Plain classifier: same layers driven directly with softmax
        // cross-entropy, same batch order, same SGD + momentum.
        use rand::seq::SliceRandom;
        let mut velocity: Vec<Vec<f64>> = reference
            .layers_mut()
            .iter()
            .map(|l| vec![0.0; l.params.len()])
            .collect();
        let mut reference_trace = Vec::new();
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            let mut srng = ChaCha8Rng::seed_from_u64(
                31u64 ^ shuffle_seed.wrapping_mul(0x9e3779b97f4a7c15) ^ (epoch as u64) << 17,
            );
            order.shuffle(&mut srng);
            for chunk in order.chunks(batch_size) {
                let n = chunk.len() as f64;
                for &i in chunk {
                    let (x, label) = &data[i];
                    let mut a = x.clone();
                    for layer in reference.layers_mut() {
                        a = layer.forward(&a).unwrap();
                    }
                    let p = softmax(&a.data).unwrap();
                    let mut g: Vec<f64> = p.iter().map(|&v| v / n).collect();
                    g[label.targets[0]] -= 1.0 / n;
                    let mut grad = Tensor::from_vec(&a.shape, g).unwrap();
                    for layer in reference.layers_mut().into_iter().rev() {
                        grad = layer.backward(&grad).unwrap();
                    }
                }
                for (layer, vel) in reference.layers_mut().into_iter().zip(&mut velocity) {
                    for ((p, g), v) in
                        layer.params.iter_mut().zip(&layer.grads).zip(vel.iter_mut())
                    {
                        *v = 0.9 * *v - lr * g;
                        *p += *v;
                    }
                    layer.zero_grads();
                }
            }
            let mut loss = 0.0;
            for (x, label) in &data {
                let mut a = x.clone();
                for layer in reference.layers_mut() {
                    a = layer.forward(&a).unwrap();
                }
                let p = softmax(&a.data).unwrap();
                loss -= p[label.targets[0]].ln();
            }
            reference_trace.push(loss / data.len() as f64);
        }

        let ok = pipeline_trace.len() == reference_trace.len()
            && pipeline_trace
                .iter()
                .zip(&reference_trace)
                .all(|(a, b)| (a - b).abs() < 1e-9);
        gate.check(
            "reduction sanity: single-branch pipeline equals plain classifier (1e-9)",
            ok,
        );
    }

    assert!(gate.failures.is_empty(), "failed criteria: {:?}", gate.failures);
}

//! The whole pipeline in one program: generate a planted dataset, score
//! it with a nearest-mean classifier, build the confusion graph, detect
//! the community hierarchy, assemble the tree, relabel, then train and
//! evaluate the branch network.

use cvtnet::community::louvain_hierarchy;
use cvtnet::congraph::build_confusion_graph;
use cvtnet::cvt::{build_cvt, relabel, MultiLevelLabel};
use cvtnet::ingest::{generate_synthetic, mean_classifier_records, SampleSet, SyntheticSpec};
use cvtnet::vtnet::{
    evaluate, train, FineLossMode, LayerSpec, LrSchedule, Tensor, TrainPhase, VtNet,
    VtNetConfig,
};

fn main() -> cvtnet::Result<()> {
    let spec = SyntheticSpec {
        branching: vec![2, 4],
        samples_per_leaf: 50,
        feature_dim: 6,
        separation: 2.0,
        noise: 0.12,
    };
    let (manifest, samples, _planted) = generate_synthetic(&spec, 7)?;
    let set = SampleSet {
        num_categories: manifest.category_names.len(),
        feature_dim: manifest.feature_dim,
        samples,
    };
    println!("dataset: {} samples, {} categories", set.samples.len(), set.num_categories);

    let records = mean_classifier_records(&set, spec.noise)?;
    let graph = build_confusion_graph(&records, 5)?;
    println!("confusion graph total weight: {:.2}", graph.total_weight());

    let hierarchy = louvain_hierarchy(&graph, 42)?;
    let tree = build_cvt(&hierarchy, &manifest.category_names)?;
    println!("tree level sizes: {:?}", tree.level_sizes());

    let labels = relabel(&set.samples, &tree)?;
    let data: Vec<(Tensor, MultiLevelLabel)> = set
        .samples
        .iter()
        .zip(labels)
        .map(|(s, l)| Ok((Tensor::from_vec(&[set.feature_dim], s.features.clone())?, l)))
        .collect::<cvtnet::Result<_>>()?;
    // Hold out every fifth sample.
    let (held, train_set): (Vec<_>, Vec<_>) = data
        .into_iter()
        .enumerate()
        .partition(|(i, _)| i % 5 == 0);
    let held: Vec<_> = held.into_iter().map(|(_, d)| d).collect();
    let train_set: Vec<_> = train_set.into_iter().map(|(_, d)| d).collect();

    let head_sizes = tree.level_sizes();
    let k = head_sizes.len();
    let base = vec![
        LayerSpec::Affine { out_dim: 32 },
        LayerSpec::Relu,
        LayerSpec::Affine { out_dim: 32 },
        LayerSpec::Relu,
    ];
    let taps = (1..k).map(|i| i * base.len() / k).collect();
    let mut net = VtNet::build(
        VtNetConfig {
            input_shape: vec![set.feature_dim],
            base,
            taps,
            branch_stacks: vec![vec![LayerSpec::Affine { out_dim: 32 }, LayerSpec::Relu]; k],
            head_sizes,
            fine_loss_mode: FineLossMode::Literal,
            seed: 5,
        },
        tree.parent_map(),
    )?;

    let mut phase1 = TrainPhase::coarse(k, 10);
    phase1.lr = LrSchedule::constant(0.02);
    let mut phase2 = TrainPhase::fine(k, 80);
    phase2.lr = LrSchedule::constant(0.1);
    train(&mut net, &train_set, &[phase1, phase2], 5)?;

    let acc = evaluate(&mut net, &held)?;
    for (b, a) in acc.iter().enumerate() {
        println!("branch {} held-out top1: {a:.4}", b + 1);
    }
    Ok(())
}

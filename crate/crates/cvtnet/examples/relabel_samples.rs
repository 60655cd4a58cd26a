//! Re-label fine-labeled samples with their full coarse-to-fine target
//! paths through a tree.

use cvtnet::community::louvain_hierarchy;
use cvtnet::cvt::{build_cvt, relabel};
use cvtnet::fixtures::planted_two_block_graph;
use cvtnet::ingest::LabeledSample;

fn main() -> cvtnet::Result<()> {
    let g = planted_two_block_graph();
    let h = louvain_hierarchy(&g, 42)?;
    let names: Vec<String> = g.node_labels().to_vec();
    let tree = build_cvt(&h, &names)?;

    let samples: Vec<LabeledSample> = [2usize, 7, 9]
        .iter()
        .map(|&c| LabeledSample {
            sample_id: format!("sample-of-{}", names[c]),
            features: vec![],
            fine_label: c,
        })
        .collect();

    for label in relabel(&samples, &tree)? {
        println!("{}: targets {:?}", label.sample_id, label.targets);
    }
    Ok(())
}

//! Turn a detection hierarchy into a confusion visual tree and print it
//! as DOT.

use cvtnet::community::louvain_hierarchy;
use cvtnet::cvt::{build_cvt, export_dot};
use cvtnet::fixtures::planted_two_block_graph;

fn main() -> cvtnet::Result<()> {
    let g = planted_two_block_graph();
    let h = louvain_hierarchy(&g, 42)?;
    let names: Vec<String> = g.node_labels().to_vec();
    let tree = build_cvt(&h, &names)?;

    println!(
        "tree: {} levels, level sizes {:?} ({} branches implied)",
        tree.depth(),
        tree.level_sizes(),
        tree.depth() - 1
    );
    print!("{}", export_dot(&tree));
    Ok(())
}

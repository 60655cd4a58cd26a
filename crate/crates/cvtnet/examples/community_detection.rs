//! Detect the community hierarchy of the planted two-block fixture and
//! compare a small graph's result against the brute-force oracle.

use cvtnet::community::{
    brute_force_best_partition, louvain_hierarchy, modularity, WeightedGraph,
};
use cvtnet::fixtures::planted_two_block_graph;

fn main() -> cvtnet::Result<()> {
    let g = planted_two_block_graph();
    let h = louvain_hierarchy(&g, 42)?;
    println!("hierarchy of the planted 10-node graph:");
    for (i, level) in h.levels.iter().enumerate() {
        println!(
            "  level {i}: {} communities, Q = {:.4}",
            level.partition.num_communities(),
            level.modularity
        );
    }

    // On a graph small enough to enumerate, the greedy result can be
    // checked against the exhaustive optimum.
    let mut small = WeightedGraph::new(6);
    for (i, j) in [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)] {
        small.set_edge(i, j, 1.0);
    }
    small.set_edge(2, 3, 0.2);
    let (best, q_best) = brute_force_best_partition(&small)?;
    println!(
        "two weakly bridged triangles: optimal Q = {q_best:.4} with {} communities",
        best.num_communities()
    );
    println!("  optimum check: Q(best) = {:.4}", modularity(&small, &best)?);
    Ok(())
}

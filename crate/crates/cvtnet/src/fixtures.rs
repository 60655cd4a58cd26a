//! Small seeded fixtures shared by examples and tests.

use crate::congraph::ConfusionGraph;

/// A 10-node graph with planted two-level structure: five strongly tied
/// pairs, pairs grouped into two blocks (one of two pairs, one of three)
/// by medium weights, and weak cross-block weights. Hierarchical
/// detection finds the five pairs first, then the two blocks.
pub fn planted_two_block_graph() -> ConfusionGraph {
    let labels = (0..10).map(|i| format!("cat{i}")).collect();
    let mut g = ConfusionGraph::new(10, labels);
    // Strong intra-pair edges; pair p = nodes (2p, 2p+1).
    for pair in 0..5 {
        g.add_weight(2 * pair, 2 * pair + 1, 10.0);
    }
    // Medium edges between different pairs of the same block.
    // Block A = pairs 0..2 (nodes 0..4), block B = pairs 2..5 (nodes 4..10).
    let block_a = [0usize, 1, 2, 3];
    let block_b = [4usize, 5, 6, 7, 8, 9];
    let medium = 2.5;
    let weak = 0.02;
    for block in [&block_a[..], &block_b[..]] {
        for (x, &i) in block.iter().enumerate() {
            for &j in &block[x + 1..] {
                if j != i + 1 || i % 2 != 0 {
                    g.add_weight(i, j, medium);
                }
            }
        }
    }
    for &i in &block_a {
        for &j in &block_b {
            g.add_weight(i, j, weak);
        }
    }
    g
}

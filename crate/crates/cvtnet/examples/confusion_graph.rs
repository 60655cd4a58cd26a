//! Build a confusion graph from a handful of prediction records and
//! print its edge list.

use cvtnet::congraph::build_confusion_graph;
use cvtnet::ingest::{PredictionRecord, RecordSet};

fn main() -> cvtnet::Result<()> {
    // Probabilities of a 4-class classifier on six inputs. Classes 0/1
    // and 2/3 confuse each other; cross-pair mass is small.
    let rows: &[(usize, [f64; 4])] = &[
        (0, [0.70, 0.25, 0.03, 0.02]),
        (1, [0.30, 0.62, 0.05, 0.03]),
        (0, [0.55, 0.40, 0.03, 0.02]),
        (2, [0.02, 0.03, 0.80, 0.15]),
        (3, [0.04, 0.02, 0.34, 0.60]),
        (2, [0.03, 0.02, 0.55, 0.40]),
    ];
    let set = RecordSet {
        num_categories: 4,
        normalized: true,
        records: rows
            .iter()
            .enumerate()
            .map(|(i, &(label, scores))| PredictionRecord {
                sample_id: format!("img{i}"),
                true_label: label,
                scores: scores.to_vec(),
            })
            .collect(),
    };

    let graph = build_confusion_graph(&set, 2)?;
    println!("nodes: {}", graph.num_nodes());
    println!("total weight: {:.4}", graph.total_weight());
    for (i, j, w) in graph.edges() {
        println!("  {} -- {}  {w:.4}", i, j);
    }
    Ok(())
}

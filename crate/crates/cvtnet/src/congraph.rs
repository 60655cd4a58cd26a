//! Weighted confusion graph over categories, built from prediction
//! records by top-N score accumulation: for each record, the non-true
//! categories among the N highest-probability ones add their probability
//! onto the edge joining them with the true category.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::ingest::{softmax, RecordSet};

/// Symmetric non-negative weighted graph over categories with zero
/// diagonal. Weights are stored once per unordered pair, upper triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionGraph {
    num_nodes: usize,
    /// Upper-triangle weights, indexed by `pair_index(i, j)` for i < j.
    weights: Vec<f64>,
    node_labels: Vec<String>,
}

impl ConfusionGraph {
    pub fn new(num_nodes: usize, node_labels: Vec<String>) -> Self {
        assert_eq!(node_labels.len(), num_nodes);
        ConfusionGraph {
            num_nodes,
            weights: vec![0.0; num_nodes * (num_nodes.saturating_sub(1)) / 2],
            node_labels,
        }
    }

    pub fn with_anonymous_labels(num_nodes: usize) -> Self {
        let labels = (0..num_nodes).map(|i| format!("n{i}")).collect();
        Self::new(num_nodes, labels)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn node_labels(&self) -> &[String] {
        &self.node_labels
    }

    fn pair_index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < self.num_nodes);
        // Row-major upper triangle offset.
        i * self.num_nodes - i * (i + 1) / 2 + (j - i - 1)
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.weights[self.pair_index(a, b)]
    }

    pub fn add_weight(&mut self, i: usize, j: usize, w: f64) {
        assert!(i != j, "self-loops are not representable");
        assert!(w >= 0.0 && w.is_finite());
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        let idx = self.pair_index(a, b);
        self.weights[idx] += w;
    }

    /// Sum of all edge weights (each unordered pair once).
    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Iterate over edges with positive weight as `(i, j, w)`, i < j,
    /// in ascending (i, j) order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.num_nodes).flat_map(move |i| {
            (i + 1..self.num_nodes).filter_map(move |j| {
                let w = self.weight(i, j);
                (w > 0.0).then_some((i, j, w))
            })
        })
    }

    /// Entrywise sum of two graphs over the same node set.
    pub fn merge(&mut self, other: &ConfusionGraph) {
        assert_eq!(self.num_nodes, other.num_nodes);
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
    }

    /// Edge-list export: one `i,j,weight` line per edge with i < j,
    /// skipping weights below 1e-15.
    pub fn export_edge_list(&self) -> String {
        let mut out = String::new();
        for (i, j, w) in self.edges() {
            if w >= 1e-15 {
                let _ = writeln!(out, "{i},{j},{w}");
            }
        }
        out
    }

    /// Parse an edge list with a `#graph nodes=<n>` header line; other
    /// `#` lines are ignored.
    pub fn parse_edge_list(text: &str) -> Result<ConfusionGraph> {
        let mut graph: Option<ConfusionGraph> = None;
        let mut pending: Vec<(usize, usize, f64, usize)> = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#graph") {
                for field in rest.split_whitespace() {
                    if let Some(v) = field.strip_prefix("nodes=") {
                        let n: usize = v.parse().map_err(|_| Error::Parse {
                            line: line_no,
                            msg: "invalid node count".into(),
                        })?;
                        graph = Some(ConfusionGraph::with_anonymous_labels(n));
                    }
                }
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected `i,j,weight`, got `{line}`"),
                });
            }
            let bad = |what: &str| Error::Parse {
                line: line_no,
                msg: format!("invalid {what}"),
            };
            let i: usize = parts[0].parse().map_err(|_| bad("node index"))?;
            let j: usize = parts[1].parse().map_err(|_| bad("node index"))?;
            let w: f64 = parts[2].parse().map_err(|_| bad("weight"))?;
            if i == j || w < 0.0 || !w.is_finite() {
                return Err(Error::Schema {
                    line: line_no,
                    msg: "edges must join distinct nodes with finite non-negative weight".into(),
                });
            }
            pending.push((i, j, w, line_no));
        }
        let mut graph = graph.ok_or(Error::Parse {
            line: 1,
            msg: "missing `#graph nodes=<n>` header".into(),
        })?;
        for (i, j, w, line_no) in pending {
            if i >= graph.num_nodes() || j >= graph.num_nodes() {
                return Err(Error::Schema {
                    line: line_no,
                    msg: format!("node index out of range for {} nodes", graph.num_nodes()),
                });
            }
            graph.add_weight(i, j, w);
        }
        Ok(graph)
    }
}

/// Build the confusion graph from a record set.
///
/// Scores are converted to probabilities first when the set is not
/// normalized. Top-N ties break toward the lower category index.
pub fn build_confusion_graph(set: &RecordSet, n_top: usize) -> Result<ConfusionGraph> {
    build_confusion_graph_labeled(
        set,
        n_top,
        (0..set.num_categories).map(|i| format!("n{i}")).collect(),
    )
}

pub fn build_confusion_graph_labeled(
    set: &RecordSet,
    n_top: usize,
    node_labels: Vec<String>,
) -> Result<ConfusionGraph> {
    let c = set.num_categories;
    if set.records.is_empty() {
        return Err(Error::Precondition("no records to build graph from".into()));
    }
    if n_top == 0 || n_top > c {
        return Err(Error::Config(format!(
            "n_top must be in 1..={c}, got {n_top}"
        )));
    }
    let mut graph = ConfusionGraph::new(c, node_labels);
    for record in &set.records {
        if record.scores.len() != c {
            return Err(Error::Precondition(format!(
                "record {} has {} scores, expected {c}",
                record.sample_id,
                record.scores.len()
            )));
        }
        let probs = if set.normalized {
            record.scores.clone()
        } else {
            softmax(&record.scores)?
        };
        // Sort indices by descending probability, ties toward lower index.
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| {
            probs[b]
                .partial_cmp(&probs[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        for &cat in order.iter().take(n_top) {
            if cat != record.true_label {
                graph.add_weight(record.true_label, cat, probs[cat]);
            }
        }
    }
    Ok(graph)
}

//! Hierarchical modularity-based community detection over confusion
//! graphs: greedy local moves alternated with graph aggregation, each
//! outer iteration contributing one level of the partition hierarchy.
//! A brute-force partition enumerator serves as a test oracle on small
//! graphs.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::congraph::ConfusionGraph;
use crate::error::{Error, Result};

/// Minimum modularity gain for a node move; terminates the sweep loop
/// despite floating-point noise.
const MIN_GAIN: f64 = 1e-12;

/// Internal weighted graph that, unlike [`ConfusionGraph`], permits
/// self-loops. Self-loops carry the internal weight of an aggregated
/// community and count twice toward the node degree, the convention
/// under which aggregation preserves modularity.
#[derive(Debug, Clone)]
pub struct WeightedGraph {
    n: usize,
    /// Dense symmetric off-diagonal weights, row-major n*n; diagonal unused.
    w: Vec<f64>,
    self_loops: Vec<f64>,
}

impl WeightedGraph {
    pub fn new(n: usize) -> Self {
        WeightedGraph {
            n,
            w: vec![0.0; n * n],
            self_loops: vec![0.0; n],
        }
    }

    pub fn from_confusion_graph(g: &ConfusionGraph) -> Self {
        let n = g.num_nodes();
        let mut out = WeightedGraph::new(n);
        for (i, j, weight) in g.edges() {
            out.set_edge(i, j, weight);
        }
        out
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn set_edge(&mut self, i: usize, j: usize, weight: f64) {
        assert!(i != j);
        self.w[i * self.n + j] = weight;
        self.w[j * self.n + i] = weight;
    }

    pub fn edge(&self, i: usize, j: usize) -> f64 {
        if i == j {
            0.0
        } else {
            self.w[i * self.n + j]
        }
    }

    pub fn self_loop(&self, i: usize) -> f64 {
        self.self_loops[i]
    }

    /// Weighted degree: incident edge weight with self-loops counted twice.
    pub fn degree(&self, i: usize) -> f64 {
        let edges: f64 = (0..self.n).map(|j| self.edge(i, j)).sum();
        edges + 2.0 * self.self_loops[i]
    }

    /// Total weight m: each unordered pair once plus self-loops once.
    pub fn total_weight(&self) -> f64 {
        let pairs: f64 = (0..self.n)
            .flat_map(|i| (i + 1..self.n).map(move |j| (i, j)))
            .map(|(i, j)| self.edge(i, j))
            .sum();
        pairs + self.self_loops.iter().sum::<f64>()
    }
}

/// Assignment of every node to a community; ids dense in 0..K.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    assignment: Vec<usize>,
    num_communities: usize,
}

impl Partition {
    /// Build from an arbitrary labeling, renumbering ids densely in
    /// order of first appearance (the canonical form).
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut remap: Vec<Option<usize>> = vec![None; labels.len()];
        let mut next = 0;
        let assignment = labels
            .iter()
            .map(|&l| {
                *remap[l].get_or_insert_with(|| {
                    let id = next;
                    next += 1;
                    id
                })
            })
            .collect();
        Partition {
            assignment,
            num_communities: next,
        }
    }

    pub fn singletons(n: usize) -> Self {
        Partition {
            assignment: (0..n).collect(),
            num_communities: n,
        }
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn community_of(&self, node: usize) -> usize {
        self.assignment[node]
    }

    pub fn num_communities(&self) -> usize {
        self.num_communities
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }
}

/// One hierarchy level: a partition of the original node set plus its
/// modularity on the original graph.
#[derive(Debug, Clone)]
pub struct HierarchyLevel {
    pub partition: Partition,
    pub modularity: f64,
}

/// Ordered list of partitions of the original node set, index 0 the
/// finest, strictly coarsening toward the last.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub levels: Vec<HierarchyLevel>,
}

impl Hierarchy {
    pub fn num_nodes(&self) -> usize {
        self.levels.first().map_or(0, |l| l.partition.len())
    }

    /// Text export: one `level=<t> Q=<q> assignment=<c_0,...>` line per level.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for (t, level) in self.levels.iter().enumerate() {
            let assignment: Vec<String> = level
                .partition
                .assignment()
                .iter()
                .map(|c| c.to_string())
                .collect();
            let _ = writeln!(
                out,
                "level={t} Q={} assignment={}",
                level.modularity,
                assignment.join(",")
            );
        }
        out
    }

    /// Parse the `export` format, skipping `#` comment lines.
    pub fn parse(text: &str) -> Result<Hierarchy> {
        let mut levels = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let parse_field = |field: Option<&str>, key: &str| -> Result<String> {
                field
                    .and_then(|f| f.strip_prefix(&format!("{key}=")))
                    .map(str::to_string)
                    .ok_or_else(|| Error::Parse {
                        line: line_no,
                        msg: format!("expected `{key}=<value>`"),
                    })
            };
            let _level = parse_field(fields.next(), "level")?;
            let q: f64 = parse_field(fields.next(), "Q")?.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: "invalid Q".into(),
            })?;
            let assignment_str = parse_field(fields.next(), "assignment")?;
            let labels: Vec<usize> = assignment_str
                .split(',')
                .map(|s| {
                    s.parse().map_err(|_| Error::Parse {
                        line: line_no,
                        msg: format!("invalid community id `{s}`"),
                    })
                })
                .collect::<Result<_>>()?;
            levels.push(HierarchyLevel {
                partition: Partition::from_labels(&labels),
                modularity: q,
            });
        }
        if levels.is_empty() {
            return Err(Error::Parse {
                line: 1,
                msg: "hierarchy file contains no levels".into(),
            });
        }
        Ok(Hierarchy { levels })
    }
}

/// Modularity Q of a partition: (1/2m) * sum over ordered node pairs of
/// [A_ij - k_i k_j / 2m] for same-community pairs, summed in ascending
/// index order for reproducibility.
pub fn modularity(g: &WeightedGraph, p: &Partition) -> Result<f64> {
    if p.len() != g.num_nodes() {
        return Err(Error::Precondition(format!(
            "partition covers {} nodes, graph has {}",
            p.len(),
            g.num_nodes()
        )));
    }
    let m = g.total_weight();
    if m <= 0.0 {
        return Err(Error::Numeric(
            "modularity undefined on zero-total-weight graph".into(),
        ));
    }
    let two_m = 2.0 * m;
    let degrees: Vec<f64> = (0..g.num_nodes()).map(|i| g.degree(i)).collect();
    let mut q = 0.0;
    for i in 0..g.num_nodes() {
        for j in 0..g.num_nodes() {
            if p.community_of(i) == p.community_of(j) {
                let a_ij = if i == j { 2.0 * g.self_loop(i) } else { g.edge(i, j) };
                q += a_ij - degrees[i] * degrees[j] / two_m;
            }
        }
    }
    Ok(q / two_m)
}

/// One Louvain local phase: sweep nodes in `order`, moving each to the
/// neighboring community with maximal positive modularity gain (ties to
/// the lowest community id), until a full sweep makes no move.
pub fn louvain_local_pass(g: &WeightedGraph, order: &[usize]) -> Result<Partition> {
    let n = g.num_nodes();
    if n == 0 {
        return Err(Error::Precondition("empty graph".into()));
    }
    let m = g.total_weight();
    if m <= 0.0 {
        return Err(Error::Numeric(
            "modularity undefined on zero-total-weight graph".into(),
        ));
    }
    debug_assert_eq!(order.len(), n);

    let degrees: Vec<f64> = (0..n).map(|i| g.degree(i)).collect();
    let mut community: Vec<usize> = (0..n).collect();
    // Sum of member degrees per community id.
    let mut tot: Vec<f64> = degrees.clone();

    let mut moved = true;
    while moved {
        moved = false;
        for &node in order {
            let current = community[node];
            tot[current] -= degrees[node];

            // Link weight from node to each candidate community.
            let mut link: Vec<(usize, f64)> = Vec::new();
            for other in 0..n {
                let w = g.edge(node, other);
                if w > 0.0 && other != node {
                    let c = community[other];
                    match link.iter_mut().find(|(id, _)| *id == c) {
                        Some((_, acc)) => *acc += w,
                        None => link.push((c, w)),
                    }
                }
            }
            if !link.iter().any(|(c, _)| *c == current) {
                link.push((current, 0.0));
            }

            // Gain of joining community c from isolation:
            //   w_to_c / m - tot_c * k_node / (2 m^2)
            let gain = |c: usize, w_to_c: f64| -> f64 {
                w_to_c / m - tot[c] * degrees[node] / (2.0 * m * m)
            };
            let stay_gain = gain(
                current,
                link.iter().find(|(c, _)| *c == current).map_or(0.0, |(_, w)| *w),
            );

            let mut best = (current, stay_gain);
            for &(c, w) in &link {
                let candidate = gain(c, w);
                if candidate > best.1 + MIN_GAIN || (candidate > best.1 - MIN_GAIN && c < best.0) {
                    best = (c, candidate);
                }
            }

            if best.0 != current && best.1 > stay_gain + MIN_GAIN {
                community[node] = best.0;
                moved = true;
            } else {
                community[node] = current;
            }
            tot[community[node]] += degrees[node];
        }
    }
    Ok(Partition::from_labels(&community))
}

/// Collapse each community of `p` into a single node. Inter-community
/// weights sum onto edges, intra-community weight (including prior
/// self-loops) onto self-loops, so modularity is preserved.
pub fn aggregate(g: &WeightedGraph, p: &Partition) -> WeightedGraph {
    let k = p.num_communities();
    let mut out = WeightedGraph::new(k);
    for i in 0..g.num_nodes() {
        let ci = p.community_of(i);
        out.self_loops[ci] += g.self_loop(i);
        for j in (i + 1)..g.num_nodes() {
            let w = g.edge(i, j);
            if w == 0.0 {
                continue;
            }
            let cj = p.community_of(j);
            if ci == cj {
                out.self_loops[ci] += w;
            } else {
                out.w[ci * k + cj] += w;
                out.w[cj * k + ci] += w;
            }
        }
    }
    out
}

/// Full hierarchical Louvain: alternate local passes and aggregation
/// until a pass merges nothing, recording each outer iteration's
/// partition composed back to original node ids.
///
/// The seed drives the node sweep order only; a fresh permutation is
/// drawn each outer iteration.
pub fn louvain_hierarchy(g: &ConfusionGraph, seed: u64) -> Result<Hierarchy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let original = WeightedGraph::from_confusion_graph(g);
    if original.total_weight() <= 0.0 {
        return Err(Error::Numeric(
            "modularity undefined on zero-total-weight graph".into(),
        ));
    }

    let mut current = original.clone();
    let mut node_of: Vec<usize> = (0..g.num_nodes()).collect();
    let mut levels: Vec<HierarchyLevel> = Vec::new();

    loop {
        let mut order: Vec<usize> = (0..current.num_nodes()).collect();
        order.shuffle(&mut rng);
        let pass = louvain_local_pass(&current, &order)?;
        if pass.num_communities() == current.num_nodes() {
            break;
        }
        let composed: Vec<usize> = node_of.iter().map(|&v| pass.community_of(v)).collect();
        let partition = Partition::from_labels(&composed);
        let q = modularity(&original, &partition)?;
        if let Some(last) = levels.last() {
            if q <= last.modularity + MIN_GAIN {
                break;
            }
        }
        current = aggregate(&current, &pass);
        node_of = node_of.iter().map(|&v| pass.community_of(v)).collect();
        levels.push(HierarchyLevel {
            partition,
            modularity: q,
        });
        if current.num_nodes() == 1 {
            break;
        }
    }
    Ok(Hierarchy { levels })
}

/// Exhaustive modularity maximization over all set partitions, for
/// graphs of at most 12 nodes. Ties break toward the lexicographically
/// smallest canonical assignment.
pub fn brute_force_best_partition(g: &WeightedGraph) -> Result<(Partition, f64)> {
    let n = g.num_nodes();
    if n > 12 {
        return Err(Error::Precondition(format!(
            "brute force limited to 12 nodes, got {n}"
        )));
    }
    if n == 0 {
        return Err(Error::Precondition("empty graph".into()));
    }
    if g.total_weight() <= 0.0 {
        return Err(Error::Numeric(
            "modularity undefined on zero-total-weight graph".into(),
        ));
    }

    // Enumerate restricted growth strings in lexicographic order; the
    // first maximum found is the canonical tie-break winner.
    let mut best: Option<(Partition, f64)> = None;
    let mut labels = vec![0usize; n];
    loop {
        let p = Partition::from_labels(&labels);
        let q = modularity(g, &p)?;
        if best.as_ref().map_or(true, |(_, bq)| q > *bq) {
            best = Some((p, q));
        }
        // Advance to the next restricted growth string.
        let mut pos = n;
        loop {
            if pos == 1 {
                return Ok(best.unwrap());
            }
            pos -= 1;
            let max_prefix = labels[..pos].iter().max().copied().unwrap();
            if labels[pos] <= max_prefix {
                labels[pos] += 1;
                for l in labels[pos + 1..].iter_mut() {
                    *l = 0;
                }
                break;
            }
            labels[pos] = 0;
        }
    }
}

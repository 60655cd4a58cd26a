//! The confusion visual tree: leaves are categories, internal nodes are
//! detected communities, each node carries the label set of categories
//! beneath it. Levels are 1-based with level 1 the root and level N the
//! leaves.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::community::Hierarchy;
use crate::error::{Error, Result};
use crate::ingest::LabeledSample;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CvtNode {
    pub node_id: usize,
    /// 1 = root, N = leaf.
    pub level: usize,
    pub parent: Option<usize>,
    /// Fine-category indices covered by this node, sorted ascending.
    pub label_set: Vec<usize>,
    pub display_name: String,
}

/// One coarse-to-fine target index per tree level 2..=N.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiLevelLabel {
    pub sample_id: String,
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionVisualTree {
    nodes: Vec<CvtNode>,
    /// Node ids per level, index 0 = level 1 (root). Within a level,
    /// ids are ordered by ascending community id (leaves: category index).
    level_nodes: Vec<Vec<usize>>,
    num_categories: usize,
}

impl ConfusionVisualTree {
    /// Number of levels including root and leaves.
    pub fn depth(&self) -> usize {
        self.level_nodes.len()
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn nodes(&self) -> &[CvtNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &CvtNode {
        &self.nodes[id]
    }

    /// Node ids at a 1-based level.
    pub fn level(&self, level: usize) -> &[usize] {
        &self.level_nodes[level - 1]
    }

    pub fn root(&self) -> &CvtNode {
        &self.nodes[self.level_nodes[0][0]]
    }

    /// Leaf node id for a fine category.
    pub fn leaf_of(&self, category: usize) -> usize {
        self.level_nodes[self.depth() - 1][category]
    }

    /// Class counts per branch: node counts at levels 2..=N. Drives the
    /// branch head widths of the network.
    pub fn level_sizes(&self) -> Vec<usize> {
        self.level_nodes[1..].iter().map(|l| l.len()).collect()
    }

    /// Position of a node within its level's ordered node list; this is
    /// the class index the corresponding branch head predicts.
    pub fn index_in_level(&self, node_id: usize) -> usize {
        let node = &self.nodes[node_id];
        self.level_nodes[node.level - 1]
            .iter()
            .position(|&id| id == node_id)
            .unwrap()
    }

    /// Fine category -> index of its parent node within level N-1.
    /// This is the `t` mapping of the probabilistic averaging layer.
    pub fn parent_map(&self) -> Vec<usize> {
        let depth = self.depth();
        (0..self.num_categories)
            .map(|c| {
                if depth == 2 {
                    // Root-over-leaves tree: every category maps to the root.
                    0
                } else {
                    let leaf = self.leaf_of(c);
                    let parent = self.nodes[leaf].parent.unwrap();
                    self.index_in_level(parent)
                }
            })
            .collect()
    }

    /// Multi-level targets for one fine label: the index of the unique
    /// level-l ancestor, for l = 2..=N (coarse to fine).
    pub fn target_path(&self, fine_label: usize) -> Vec<usize> {
        let mut path = Vec::with_capacity(self.depth() - 1);
        let mut id = self.leaf_of(fine_label);
        loop {
            path.push(self.index_in_level(id));
            match self.nodes[id].parent {
                Some(p) if self.nodes[p].level >= 2 => id = p,
                _ => break,
            }
        }
        path.reverse();
        path
    }

    /// Validate the structural invariants: single root, parents one
    /// level up, label sets the disjoint union of the children's.
    pub fn validate(&self) -> Result<()> {
        let structure = |msg: String| Error::Precondition(msg);
        if self.level_nodes.first().map_or(0, |l| l.len()) != 1 {
            return Err(structure("tree must have exactly one root".into()));
        }
        let depth = self.depth();
        if self.level_nodes[depth - 1].len() != self.num_categories {
            return Err(structure("leaf count must equal category count".into()));
        }
        let all: Vec<usize> = (0..self.num_categories).collect();
        if self.root().label_set != all {
            return Err(structure("root label set must cover all categories".into()));
        }
        for node in &self.nodes {
            match node.parent {
                None => {
                    if node.level != 1 {
                        return Err(structure(format!("non-root node {} lacks a parent", node.node_id)));
                    }
                }
                Some(p) => {
                    if self.nodes[p].level + 1 != node.level {
                        return Err(structure(format!(
                            "node {} at level {} has parent at level {}",
                            node.node_id, node.level, self.nodes[p].level
                        )));
                    }
                }
            }
            if node.level == depth && node.label_set.len() != 1 {
                return Err(structure(format!("leaf {} label set not singleton", node.node_id)));
            }
        }
        // Disjoint-union check, full scan per internal node.
        for node in &self.nodes {
            if node.level == depth {
                continue;
            }
            let mut union = BTreeSet::new();
            for child in self.nodes.iter().filter(|c| c.parent == Some(node.node_id)) {
                for &l in &child.label_set {
                    if !union.insert(l) {
                        return Err(structure(format!(
                            "label {l} covered twice under node {}",
                            node.node_id
                        )));
                    }
                }
            }
            let expect: BTreeSet<usize> = node.label_set.iter().copied().collect();
            if union != expect {
                return Err(structure(format!(
                    "node {} label set is not the union of its children's",
                    node.node_id
                )));
            }
        }
        Ok(())
    }

    /// Build a tree directly from per-level branching factors; used for
    /// planted ground truth. `branching[0]` children under the root.
    pub fn from_branching(branching: &[usize], names: &[String]) -> Result<Self> {
        if branching.is_empty() || branching.iter().any(|&b| b == 0) {
            return Err(Error::Precondition("branching factors must be positive".into()));
        }
        let num_leaves: usize = branching.iter().product();
        if names.len() != num_leaves {
            return Err(Error::Precondition(format!(
                "expected {num_leaves} names, got {}",
                names.len()
            )));
        }
        // Communities per hierarchy level, coarsest kept implicit in root.
        // Leaf c's ancestor at internal depth d is c / (product of deeper factors).
        let depth = branching.len() + 1;
        let mut builder = TreeBuilder::new(depth, num_leaves);
        let mut group_size: Vec<usize> = vec![1; branching.len() + 1];
        for (i, &b) in branching.iter().enumerate().rev() {
            group_size[i] = group_size[i + 1] * b;
        }
        // group_size[d] = number of leaves under one node at level d+1.
        for level in 2..=depth {
            let size = group_size[level - 1];
            let count = num_leaves / size;
            for k in 0..count {
                let label_set: Vec<usize> = (k * size..(k + 1) * size).collect();
                let display = if level == depth {
                    names[k].clone()
                } else {
                    format!("L{level}-C{k}")
                };
                let parent_group = k / branching[level - 2];
                builder.push(level, parent_group, label_set, display);
            }
        }
        builder.finish(names)
    }
}

/// Incremental top-down construction; the root is created implicitly.
struct TreeBuilder {
    nodes: Vec<CvtNode>,
    level_nodes: Vec<Vec<usize>>,
    num_categories: usize,
}

impl TreeBuilder {
    fn new(depth: usize, num_categories: usize) -> Self {
        let root = CvtNode {
            node_id: 0,
            level: 1,
            parent: None,
            label_set: (0..num_categories).collect(),
            display_name: "root".into(),
        };
        let mut level_nodes = vec![Vec::new(); depth];
        level_nodes[0].push(0);
        TreeBuilder {
            nodes: vec![root],
            level_nodes,
            num_categories,
        }
    }

    /// Append a node at `level` whose parent is the `parent_pos`-th node
    /// of the level above. Nodes must be pushed level by level, in
    /// ascending community order within each level.
    fn push(&mut self, level: usize, parent_pos: usize, label_set: Vec<usize>, display_name: String) {
        let node_id = self.nodes.len();
        let parent = self.level_nodes[level - 2][parent_pos];
        self.nodes.push(CvtNode {
            node_id,
            level,
            parent: Some(parent),
            label_set,
            display_name,
        });
        self.level_nodes[level - 1].push(node_id);
    }

    fn finish(self, _names: &[String]) -> Result<ConfusionVisualTree> {
        let tree = ConfusionVisualTree {
            nodes: self.nodes,
            level_nodes: self.level_nodes,
            num_categories: self.num_categories,
        };
        tree.validate()?;
        Ok(tree)
    }
}

/// Assemble the tree from a detection hierarchy: leaves are categories,
/// hierarchy level 0 becomes tree level N-1, coarser levels move up, and
/// a root caps the structure. A coarsest level with a single community
/// is merged with the root rather than duplicated.
pub fn build_cvt(h: &Hierarchy, names: &[String]) -> Result<ConfusionVisualTree> {
    build_cvt_capped(h, names, None)
}

/// As [`build_cvt`], but when the hierarchy holds more levels than the
/// requested tree depth allows, the finest and coarsest levels are kept
/// and intermediates are dropped from the coarse side first.
pub fn build_cvt_capped(
    h: &Hierarchy,
    names: &[String],
    depth_cap: Option<usize>,
) -> Result<ConfusionVisualTree> {
    if names.is_empty() {
        return Err(Error::Precondition("empty category name list".into()));
    }
    if h.levels.is_empty() {
        return Err(Error::Precondition("hierarchy has zero levels".into()));
    }
    let c = names.len();
    if h.num_nodes() != c {
        return Err(Error::Precondition(format!(
            "hierarchy covers {} nodes but {} names given",
            h.num_nodes(),
            c
        )));
    }

    // Select hierarchy levels, finest first; drop a coarsest level of one
    // community (it would duplicate the root).
    let mut kept: Vec<usize> = (0..h.levels.len()).collect();
    if h.levels[*kept.last().unwrap()].partition.num_communities() == 1 {
        kept.pop();
    }
    if let Some(cap) = depth_cap {
        if cap < 2 {
            return Err(Error::Precondition("depth cap must be at least 2".into()));
        }
        let max_internal = cap - 2;
        while kept.len() > max_internal {
            if kept.len() == 1 {
                kept.clear();
            } else {
                // Drop intermediates from the coarsest side, keeping the last.
                kept.remove(kept.len() - 2);
            }
        }
    }

    let depth = kept.len() + 2;
    let mut builder = TreeBuilder::new(depth, c);

    // Internal levels, coarsest (tree level 2) down to finest (level N-1).
    for (pos, &hi) in kept.iter().rev().enumerate() {
        let level = pos + 2;
        let part = &h.levels[hi].partition;
        for community in 0..part.num_communities() {
            let label_set: Vec<usize> = (0..c)
                .filter(|&v| part.community_of(v) == community)
                .collect();
            // Parent = community of the next-coarser kept level containing
            // this one, or the root.
            let parent_pos = if pos == 0 {
                0
            } else {
                let coarser = &h.levels[kept[kept.len() - pos]].partition;
                coarser.community_of(label_set[0])
            };
            builder.push(level, parent_pos, label_set, format!("L{level}-C{community}"));
        }
    }
    // Leaves, in category order.
    let finest = kept.first().map(|&hi| &h.levels[hi].partition);
    for (cat, name) in names.iter().enumerate() {
        let parent_pos = finest.map_or(0, |p| p.community_of(cat));
        builder.push(depth, parent_pos, vec![cat], name.clone());
    }
    builder.finish(names)
}

/// Per-sample multi-level targets, coarse to fine; the last target
/// equals the fine label.
pub fn relabel(samples: &[LabeledSample], tree: &ConfusionVisualTree) -> Result<Vec<MultiLevelLabel>> {
    samples
        .iter()
        .map(|s| {
            if s.fine_label >= tree.num_categories() {
                return Err(Error::Precondition(format!(
                    "fine label {} out of range",
                    s.fine_label
                )));
            }
            Ok(MultiLevelLabel {
                sample_id: s.sample_id.clone(),
                targets: tree.target_path(s.fine_label),
            })
        })
        .collect()
}

/// Multi-label export: `sample_id,t_2,...,t_N` lines.
pub fn export_labels(labels: &[MultiLevelLabel]) -> String {
    let mut out = String::new();
    for l in labels {
        let targets: Vec<String> = l.targets.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(out, "{},{}", l.sample_id, targets.join(","));
    }
    out
}

/// DOT export with parent-to-child edges and deterministic node order.
pub fn export_dot(tree: &ConfusionVisualTree) -> String {
    let mut out = String::from("digraph cvt {\n  rankdir=TB;\n");
    for node in tree.nodes() {
        let _ = writeln!(
            out,
            "  n{} [label=\"{}\"];",
            node.node_id, node.display_name
        );
    }
    for node in tree.nodes() {
        if let Some(p) = node.parent {
            let _ = writeln!(out, "  n{} -> n{};", p, node.node_id);
        }
    }
    out.push_str("}\n");
    out
}

/// Tree file: header `#cvt levels=<N> C=<C>`, then one
/// `node_id,level,parent_id,display_name,label_set` line per node with
/// semicolon-separated label sets and `-` for the root's parent.
pub fn serialize_tree(tree: &ConfusionVisualTree) -> String {
    let mut out = format!(
        "#cvt levels={} C={}\n",
        tree.depth(),
        tree.num_categories()
    );
    for node in tree.nodes() {
        let labels: Vec<String> = node.label_set.iter().map(|l| l.to_string()).collect();
        let parent = node.parent.map_or("-".to_string(), |p| p.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            node.node_id,
            node.level,
            parent,
            node.display_name,
            labels.join(";")
        );
    }
    out
}

pub fn deserialize_tree(text: &str) -> Result<ConfusionVisualTree> {
    let mut depth = None;
    let mut num_categories = None;
    let mut nodes: Vec<CvtNode> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#cvt") {
            for field in rest.split_whitespace() {
                if let Some(v) = field.strip_prefix("levels=") {
                    depth = Some(v.parse::<usize>().map_err(|_| Error::Parse {
                        line: line_no,
                        msg: "invalid levels".into(),
                    })?);
                } else if let Some(v) = field.strip_prefix("C=") {
                    num_categories = Some(v.parse::<usize>().map_err(|_| Error::Parse {
                        line: line_no,
                        msg: "invalid C".into(),
                    })?);
                }
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 5 fields, got {}", parts.len()),
            });
        }
        let parse_usize = |s: &str, what: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("invalid {what} `{s}`"),
            })
        };
        let node_id = parse_usize(parts[0], "node id")?;
        let level = parse_usize(parts[1], "level")?;
        let parent = if parts[2] == "-" {
            None
        } else {
            Some(parse_usize(parts[2], "parent id")?)
        };
        let label_set: Vec<usize> = parts[4]
            .split(';')
            .map(|s| parse_usize(s, "label"))
            .collect::<Result<_>>()?;
        nodes.push(CvtNode {
            node_id,
            level,
            parent,
            label_set,
            display_name: parts[3].to_string(),
        });
    }
    let depth = depth.ok_or(Error::Parse {
        line: 1,
        msg: "missing #cvt header".into(),
    })?;
    let num_categories = num_categories.ok_or(Error::Parse {
        line: 1,
        msg: "missing C in #cvt header".into(),
    })?;
    nodes.sort_by_key(|n| n.node_id);
    let mut level_nodes = vec![Vec::new(); depth];
    for node in &nodes {
        if node.level == 0 || node.level > depth {
            return Err(Error::Parse {
                line: 1,
                msg: format!("node {} has level {} outside 1..={depth}", node.node_id, node.level),
            });
        }
        level_nodes[node.level - 1].push(node.node_id);
    }
    let tree = ConfusionVisualTree {
        nodes,
        level_nodes,
        num_categories,
    };
    tree.validate()?;
    Ok(tree)
}

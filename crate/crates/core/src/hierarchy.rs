//! Label taxonomy: a rooted tree of named labels with layered views.
//!
//! A virtual root at depth 0 anchors the depth-1 labels and is not itself a
//! label. Node ids are dense and assigned by sorting on `(depth, name)`, so
//! every layer occupies a contiguous id range and ids are stable across
//! platforms.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PathId(pub usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl PathId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HierarchyError {
    #[error("hierarchy has no labels")]
    Empty,
    #[error("label `{0}` is declared more than once")]
    DuplicateName(String),
    #[error("label `{child}` has two parents (`{first}` and `{second}`)")]
    TwoParents {
        child: String,
        first: String,
        second: String,
    },
    #[error("parent `{0}` is never declared as a label")]
    UnknownParent(String),
    #[error("cycle detected among labels: {0:?}")]
    Cycle(Vec<String>),
    #[error("unknown node id {0}")]
    UnknownId(usize),
    #[error("unknown label name `{0}`")]
    UnknownName(String),
    #[error("malformed hierarchy file: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabelNode {
    pub id: NodeId,
    pub name: String,
    pub parent: Option<NodeId>,
    pub depth: usize,
}

/// A root-to-leaf chain of labels, root side first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabelPath {
    pub id: PathId,
    pub nodes: Vec<NodeId>,
}

impl LabelPath {
    pub fn leaf(&self) -> NodeId {
        *self.nodes.last().expect("label paths are never empty")
    }
}

#[derive(Debug, Clone)]
pub struct Hierarchy {
    nodes: Vec<LabelNode>,
    children: Vec<Vec<NodeId>>,
    layers: Vec<Vec<NodeId>>,
    leaf_paths: Vec<LabelPath>,
    path_of_leaf: HashMap<NodeId, PathId>,
    by_name: HashMap<String, NodeId>,
    complete_layered: bool,
}

#[derive(Deserialize)]
struct EdgeFile {
    edges: Vec<(Option<String>, String)>,
}

impl Hierarchy {
    /// Builds the tree from `(parent, child)` edges; `None` marks a depth-1 label.
    pub fn from_edges<P, C>(edges: &[(Option<P>, C)]) -> Result<Self, HierarchyError>
    where
        P: AsRef<str>,
        C: AsRef<str>,
    {
        if edges.is_empty() {
            return Err(HierarchyError::Empty);
        }
        let mut parent_of: HashMap<&str, Option<&str>> = HashMap::new();
        let mut declared: Vec<&str> = Vec::new();
        for (parent, child) in edges {
            let child = child.as_ref();
            let parent = parent.as_ref().map(|p| p.as_ref());
            match parent_of.get(child) {
                None => {
                    parent_of.insert(child, parent);
                    declared.push(child);
                }
                Some(&existing) if existing == parent => {
                    return Err(HierarchyError::DuplicateName(child.to_string()));
                }
                Some(&existing) => {
                    return Err(HierarchyError::TwoParents {
                        child: child.to_string(),
                        first: existing.unwrap_or("ROOT").to_string(),
                        second: parent.unwrap_or("ROOT").to_string(),
                    });
                }
            }
        }
        for &name in &declared {
            if let Some(Some(parent)) = parent_of.get(name) {
                if !parent_of.contains_key(parent) {
                    return Err(HierarchyError::UnknownParent(parent.to_string()));
                }
            }
        }

        // Depths by walking parent links; a walk longer than the label count is a cycle.
        let mut depth: HashMap<&str, usize> = HashMap::new();
        for &name in &declared {
            let mut chain = vec![name];
            let mut cursor = name;
            let base = loop {
                if let Some(&d) = depth.get(cursor) {
                    break d;
                }
                match parent_of[cursor] {
                    None => break 0,
                    Some(p) => {
                        if chain.len() > declared.len() {
                            let mut members: Vec<String> =
                                chain.iter().map(|s| s.to_string()).collect();
                            members.sort();
                            members.dedup();
                            return Err(HierarchyError::Cycle(members));
                        }
                        chain.push(p);
                        cursor = p;
                    }
                }
            };
            // chain[last] has depth `base` if cached, else it is a depth-1 node.
            let last = chain.len() - 1;
            let mut d = if depth.contains_key(chain[last]) { base } else { base + 1 };
            depth.insert(chain[last], d);
            for &n in chain[..last].iter().rev() {
                d += 1;
                depth.insert(n, d);
            }
        }

        let mut order: Vec<&str> = declared.clone();
        order.sort_by(|a, b| depth[a].cmp(&depth[b]).then_with(|| a.cmp(b)));
        let by_name: HashMap<String, NodeId> = order
            .iter()
            .enumerate()
            .map(|(i, n)| (n.to_string(), NodeId(i)))
            .collect();
        let nodes: Vec<LabelNode> = order
            .iter()
            .enumerate()
            .map(|(i, &n)| LabelNode {
                id: NodeId(i),
                name: n.to_string(),
                parent: parent_of[n].map(|p| by_name[p]),
                depth: depth[n],
            })
            .collect();

        Ok(Self::assemble(nodes, by_name))
    }

    fn assemble(nodes: Vec<LabelNode>, by_name: HashMap<String, NodeId>) -> Self {
        let max_depth = nodes.iter().map(|n| n.depth).max().unwrap_or(0);
        let mut children = vec![Vec::new(); nodes.len()];
        let mut layers = vec![Vec::new(); max_depth];
        for node in &nodes {
            if let Some(p) = node.parent {
                children[p.0].push(node.id);
            }
            layers[node.depth - 1].push(node.id);
        }
        let mut leaf_paths = Vec::new();
        let mut path_of_leaf = HashMap::new();
        for node in &nodes {
            if children[node.id.0].is_empty() {
                let mut chain = vec![node.id];
                let mut cursor = node.parent;
                while let Some(p) = cursor {
                    chain.push(p);
                    cursor = nodes[p.0].parent;
                }
                chain.reverse();
                let id = PathId(leaf_paths.len());
                path_of_leaf.insert(node.id, id);
                leaf_paths.push(LabelPath { id, nodes: chain });
            }
        }
        let complete_layered = leaf_paths.iter().all(|p| p.nodes.len() == max_depth);
        Self {
            nodes,
            children,
            layers,
            leaf_paths,
            path_of_leaf,
            by_name,
            complete_layered,
        }
    }

    /// Parses either the JSON `{"edges": [[parent|null, child], ...]}` form or
    /// tab-separated `parent<TAB>child` lines with `ROOT` as the null parent.
    pub fn parse(text: &str) -> Result<Self, HierarchyError> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') {
            let file: EdgeFile =
                serde_json::from_str(text).map_err(|e| HierarchyError::Parse(e.to_string()))?;
            return Self::from_edges(&file.edges);
        }
        let mut edges: Vec<(Option<String>, String)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (parent, child) = line.split_once('\t').ok_or_else(|| {
                HierarchyError::Parse(format!("line {}: expected parent<TAB>child", lineno + 1))
            })?;
            let parent = parent.trim();
            let parent = (parent != "ROOT").then(|| parent.to_string());
            edges.push((parent, child.trim().to_string()));
        }
        Self::from_edges(&edges)
    }

    pub fn load(path: &Path) -> Result<Self, HierarchyError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HierarchyError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Edge list in the JSON file format, in id order.
    pub fn to_json(&self) -> String {
        let edges: Vec<(Option<&str>, &str)> = self
            .nodes
            .iter()
            .map(|n| (n.parent.map(|p| self.nodes[p.0].name.as_str()), n.name.as_str()))
            .collect();
        serde_json::json!({ "edges": edges }).to_string()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Maximum label depth `D`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn nodes(&self) -> &[LabelNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&LabelNode, HierarchyError> {
        self.nodes.get(id.0).ok_or(HierarchyError::UnknownId(id.0))
    }

    pub fn id_of(&self, name: &str) -> Result<NodeId, HierarchyError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| HierarchyError::UnknownName(name.to_string()))
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id.0].name
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.children[id.0]
    }

    /// Labels at depth `d` (1-based), in id order.
    pub fn layer(&self, depth: usize) -> &[NodeId] {
        &self.layers[depth - 1]
    }

    pub fn layers(&self) -> &[Vec<NodeId>] {
        &self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    /// Position of a label inside its own layer.
    pub fn layer_index(&self, id: NodeId) -> usize {
        let depth = self.nodes[id.0].depth;
        id.0 - self.layers[depth - 1][0].0
    }

    pub fn leaf_paths(&self) -> &[LabelPath] {
        &self.leaf_paths
    }

    pub fn path(&self, id: PathId) -> &LabelPath {
        &self.leaf_paths[id.0]
    }

    pub fn path_of_leaf(&self, leaf: NodeId) -> Option<PathId> {
        self.path_of_leaf.get(&leaf).copied()
    }

    /// True iff every leaf sits at the maximum depth.
    pub fn is_complete_layered(&self) -> bool {
        self.complete_layered
    }

    /// Ancestors of `id`, root side first, excluding `id` itself.
    pub fn ancestors(&self, id: NodeId) -> Result<Vec<NodeId>, HierarchyError> {
        let mut chain = Vec::new();
        let mut cursor = self.node(id)?.parent;
        while let Some(p) = cursor {
            chain.push(p);
            cursor = self.nodes[p.0].parent;
        }
        chain.reverse();
        Ok(chain)
    }

    pub fn descendants(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack: Vec<NodeId> = self.children[id.0].iter().rev().copied().collect();
        while let Some(n) = stack.pop() {
            out.push(n);
            stack.extend(self.children[n.0].iter().rev().copied());
        }
        out
    }

    /// Splits a label set into the complete root-to-leaf paths it contains and
    /// the labels that belong to none of them.
    pub fn labels_to_paths(
        &self,
        labels: &BTreeSet<NodeId>,
    ) -> Result<(BTreeSet<PathId>, BTreeSet<NodeId>), HierarchyError> {
        for l in labels {
            self.node(*l)?;
        }
        let mut paths = BTreeSet::new();
        let mut covered = BTreeSet::new();
        for label in labels {
            let Some(pid) = self.path_of_leaf(*label) else {
                continue;
            };
            let path = &self.leaf_paths[pid.0];
            if path.nodes.iter().all(|n| labels.contains(n)) {
                paths.insert(pid);
                covered.extend(path.nodes.iter().copied());
            }
        }
        let invalid = labels.difference(&covered).copied().collect();
        Ok((paths, invalid))
    }

    /// Union of nodes along the given paths.
    pub fn labels_of_paths<'a>(&self, paths: impl IntoIterator<Item = &'a PathId>) -> BTreeSet<NodeId> {
        paths
            .into_iter()
            .flat_map(|p| self.leaf_paths[p.0].nodes.iter().copied())
            .collect()
    }

    /// Per-depth layer-local indices of the labels in `labels`.
    pub fn layer_targets(&self, labels: &BTreeSet<NodeId>) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.depth()];
        for &l in labels {
            let depth = self.nodes[l.0].depth;
            out[depth - 1].push(self.layer_index(l));
        }
        out
    }
}

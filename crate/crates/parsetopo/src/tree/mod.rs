//! Parse trees over sequence positions: construction, bracket-format I/O and
//! leaf-to-leaf path distances (unweighted edge counts and negated-log edge
//! weights).

mod bracket;

pub use bracket::{parse_bracket, serialize_bracket};

use thiserror::Error;

/// Index of a node inside its owning [`ParseTree`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) struct Node {
    label: String,
    children: Vec<NodeId>,
    parent: Option<NodeId>,
    /// Weight of the edge to the parent; `None` for the root and for
    /// unweighted trees. When present it lies in (0, 1].
    weight: Option<f64>,
}

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("unbalanced parentheses at offset {0}")]
    Unbalanced(usize),
    #[error("empty label at offset {0}")]
    EmptyLabel(usize),
    #[error("invalid weight `{value}` at offset {offset}: expected a decimal in (0,1]")]
    BadWeight { offset: usize, value: String },
    #[error("weight not allowed on the root label at offset {0}")]
    RootWeight(usize),
    #[error("weights present on some but not all non-root edges")]
    PartialWeights,
    #[error("unexpected trailing input at offset {0}")]
    TrailingInput(usize),
    #[error("input contains no tree")]
    EmptyInput,
    #[error("leaf rank {rank} out of range for a tree with {n_leaves} leaves")]
    LeafRankOutOfRange { rank: usize, n_leaves: usize },
    #[error("tree carries no edge weights")]
    Unweighted,
    #[error("node `{0}` attached as a child more than once")]
    ChildReused(String),
    #[error("node `{0}` not reachable from the root")]
    Unreachable(String),
    #[error("weight {weight} on node `{label}` outside (0,1]")]
    BuilderWeight { label: String, weight: f64 },
}

/// Ordered rooted tree whose leaves map 1:1 onto sequence positions.
///
/// Immutable after construction; queries never mutate, so a tree can be
/// shared read-only across concurrent evaluations.
#[derive(Debug, Clone)]
pub struct ParseTree {
    nodes: Vec<Node>,
    root: NodeId,
    /// Leaf rank (0-based, left to right) -> node.
    leaves: Vec<NodeId>,
    weighted: bool,
}

impl ParseTree {
    /// Parse the bracket interchange format. See [`parse_bracket`].
    pub fn from_bracket(text: &str) -> Result<Self, TreeError> {
        parse_bracket(text)
    }

    pub fn to_bracket(&self) -> String {
        serialize_bracket(self)
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    /// True when every non-root edge carries a weight.
    pub fn is_weighted(&self) -> bool {
        self.weighted
    }

    pub fn label(&self, id: NodeId) -> &str {
        &self.nodes[id.0].label
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].children
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id.0].parent
    }

    /// Weight of the edge from `id` to its parent.
    pub fn edge_weight(&self, id: NodeId) -> Option<f64> {
        self.nodes[id.0].weight
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes[id.0].children.is_empty()
    }

    /// Node of the leaf with rank `k` in left-to-right order.
    pub fn leaf_node(&self, k: usize) -> Result<NodeId, TreeError> {
        self.leaves.get(k).copied().ok_or(TreeError::LeafRankOutOfRange {
            rank: k,
            n_leaves: self.leaves.len(),
        })
    }

    pub fn leaf_label(&self, k: usize) -> Result<&str, TreeError> {
        Ok(self.label(self.leaf_node(k)?))
    }

    /// Checks the Chomsky-Normal-Form shape: internal nodes have exactly two
    /// children, except preterminals which have a single leaf child.
    pub fn is_cnf(&self) -> bool {
        self.nodes.iter().all(|n| match n.children.len() {
            0 | 2 => true,
            1 => self.nodes[n.children[0].0].children.is_empty(),
            _ => false,
        })
    }

    fn node_depth(&self, id: NodeId) -> usize {
        let mut d = 0;
        let mut cur = id;
        while let Some(p) = self.nodes[cur.0].parent {
            d += 1;
            cur = p;
        }
        d
    }

    /// Number of edges on the unique path between leaves `i` and `j`.
    ///
    /// Computed by climbing to the lowest common ancestor; for bulk queries
    /// build a [`DistanceIndex`] instead.
    pub fn leaf_distance(&self, i: usize, j: usize) -> Result<u32, TreeError> {
        let (mut u, mut v) = (self.leaf_node(i)?, self.leaf_node(j)?);
        let (mut du, mut dv) = (self.node_depth(u), self.node_depth(v));
        let mut steps = 0u32;
        while du > dv {
            u = self.nodes[u.0].parent.expect("depth bookkeeping");
            du -= 1;
            steps += 1;
        }
        while dv > du {
            v = self.nodes[v.0].parent.expect("depth bookkeeping");
            dv -= 1;
            steps += 1;
        }
        while u != v {
            u = self.nodes[u.0].parent.expect("distinct nodes below root");
            v = self.nodes[v.0].parent.expect("distinct nodes below root");
            steps += 2;
        }
        Ok(steps)
    }

    /// Sum of `-ln(weight)` over the edges of the path between leaves `i`
    /// and `j`. Requires a fully weighted tree.
    pub fn weighted_leaf_distance(&self, i: usize, j: usize) -> Result<f64, TreeError> {
        if !self.weighted {
            return Err(TreeError::Unweighted);
        }
        let (mut u, mut v) = (self.leaf_node(i)?, self.leaf_node(j)?);
        if u == v {
            return Ok(0.0);
        }
        let (mut du, mut dv) = (self.node_depth(u), self.node_depth(v));
        let mut sum = 0.0;
        let mut up = |id: &mut NodeId| {
            sum += -self.nodes[id.0].weight.expect("weighted tree").ln();
            *id = self.nodes[id.0].parent.expect("non-root");
        };
        while du > dv {
            up(&mut u);
            du -= 1;
        }
        while dv > du {
            up(&mut v);
            dv -= 1;
        }
        while u != v {
            up(&mut u);
            up(&mut v);
        }
        Ok(sum.max(0.0))
    }

    /// One-pass preprocessing for O(1) leaf-distance queries.
    pub fn distance_index(&self) -> DistanceIndex {
        DistanceIndex::new(self)
    }

    /// All-pairs leaf distance matrix (edge counts).
    pub fn leaf_distance_matrix(&self) -> SquareMatrix<u32> {
        self.distance_index().matrix()
    }

    /// All-pairs negated-log weighted distance matrix.
    pub fn weighted_distance_matrix(&self) -> Result<SquareMatrix<f64>, TreeError> {
        self.distance_index().weighted_matrix()
    }
}

impl std::fmt::Display for ParseTree {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_bracket())
    }
}

/// Incremental constructor for [`ParseTree`].
///
/// Children must be created before their parent; `build` validates that the
/// referenced nodes form a single tree rooted at `root`.
#[derive(Debug, Default)]
pub struct TreeBuilder {
    nodes: Vec<Node>,
}

impl TreeBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&mut self, label: impl Into<String>) -> NodeId {
        self.push(label.into(), Vec::new(), None)
    }

    pub fn leaf_weighted(&mut self, label: impl Into<String>, weight: f64) -> NodeId {
        self.push(label.into(), Vec::new(), Some(weight))
    }

    pub fn node(&mut self, label: impl Into<String>, children: Vec<NodeId>) -> NodeId {
        self.push(label.into(), children, None)
    }

    pub fn node_weighted(
        &mut self,
        label: impl Into<String>,
        weight: f64,
        children: Vec<NodeId>,
    ) -> NodeId {
        self.push(label.into(), children, Some(weight))
    }

    fn push(&mut self, label: String, children: Vec<NodeId>, weight: Option<f64>) -> NodeId {
        self.nodes.push(Node {
            label,
            children,
            parent: None,
            weight,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn build(mut self, root: NodeId) -> Result<ParseTree, TreeError> {
        // Wire parents and reject sharing.
        let edges: Vec<(NodeId, NodeId)> = self
            .nodes
            .iter()
            .enumerate()
            .flat_map(|(p, n)| n.children.iter().map(move |&c| (NodeId(p), c)))
            .collect();
        for (parent, child) in edges {
            if child == root {
                return Err(TreeError::RootIsChild);
            }
            if self.nodes[child.0].parent.is_some() {
                return Err(TreeError::ChildReused(self.nodes[child.0].label.clone()));
            }
            self.nodes[child.0].parent = Some(parent);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if i != root.0 && n.parent.is_none() {
                return Err(TreeError::Unreachable(n.label.clone()));
            }
        }
        if let Some(w) = self.nodes[root.0].weight.take() {
            return Err(TreeError::BuilderWeight {
                label: self.nodes[root.0].label.clone(),
                weight: w,
            });
        }
        finish_tree(self.nodes, root)
    }
}

/// Shared validation tail for the builder and the bracket parser: checks the
/// all-or-none weight rule, weight ranges, and collects leaves in order.
pub(crate) fn finish_tree(nodes: Vec<Node>, root: NodeId) -> Result<ParseTree, TreeError> {
    let mut n_weighted = 0usize;
    let mut n_edges = 0usize;
    for (i, n) in nodes.iter().enumerate() {
        if i == root.0 {
            continue;
        }
        n_edges += 1;
        if let Some(w) = n.weight {
            if !(w > 0.0 && w <= 1.0) {
                return Err(TreeError::BuilderWeight {
                    label: n.label.clone(),
                    weight: w,
                });
            }
            n_weighted += 1;
        }
    }
    if n_weighted != 0 && n_weighted != n_edges {
        return Err(TreeError::PartialWeights);
    }
    let weighted = n_edges > 0 && n_weighted == n_edges;

    // In-order leaf collection.
    let mut leaves = Vec::new();
    let mut stack = vec![root];
    while let Some(id) = stack.pop() {
        let node = &nodes[id.0];
        if node.children.is_empty() {
            leaves.push(id);
        } else {
            stack.extend(node.children.iter().rev());
        }
    }
    Ok(ParseTree {
        nodes,
        root,
        leaves,
        weighted,
    })
}

/// Square matrix with row-major dense storage.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Copy> SquareMatrix<T> {
    pub fn filled(n: usize, value: T) -> Self {
        Self {
            n,
            data: vec![value; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: T) {
        self.data[i * self.n + j] = value;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

/// Euler-tour + sparse-table LCA index over one tree: O(n log n) build,
/// O(1) per distance query.
pub struct DistanceIndex {
    n_leaves: usize,
    leaves: Vec<NodeId>,
    depth: Vec<u32>,
    /// Prefix sums of -ln(weight) from the root, when the tree is weighted.
    wdepth: Option<Vec<f64>>,
    euler: Vec<u32>,
    first: Vec<u32>,
    /// sparse[k][i] = position of the minimum-depth node among
    /// euler[i .. i + 2^k].
    sparse: Vec<Vec<u32>>,
}

impl DistanceIndex {
    fn new(tree: &ParseTree) -> Self {
        let n_nodes = tree.nodes.len();
        let mut depth = vec![0u32; n_nodes];
        let mut wdepth = tree.weighted.then(|| vec![0f64; n_nodes]);
        let mut euler = Vec::with_capacity(2 * n_nodes);
        let mut first = vec![u32::MAX; n_nodes];

        // Iterative Euler tour: (node, next-child-to-visit).
        let mut stack: Vec<(NodeId, usize)> = vec![(tree.root, 0)];
        while let Some(&mut (id, ref mut next)) = stack.last_mut() {
            if *next == 0 {
                first[id.0] = euler.len() as u32;
                euler.push(id.0 as u32);
            }
            let node = &tree.nodes[id.0];
            if *next < node.children.len() {
                let child = node.children[*next];
                *next += 1;
                depth[child.0] = depth[id.0] + 1;
                if let Some(wd) = wdepth.as_mut() {
                    let w = tree.nodes[child.0].weight.expect("weighted tree");
                    wd[child.0] = wd[id.0] + (-w.ln());
                }
                stack.push((child, 0));
            } else {
                stack.pop();
                if let Some(&(parent, _)) = stack.last() {
                    euler.push(parent.0 as u32);
                }
            }
        }

        // Sparse table of argmin-by-depth over the Euler array.
        let m = euler.len();
        let levels = usize::BITS as usize - (m.max(1)).leading_zeros() as usize;
        let mut sparse: Vec<Vec<u32>> = Vec::with_capacity(levels);
        sparse.push((0..m as u32).collect());
        let mut k = 1;
        while (1 << k) <= m {
            let half = 1 << (k - 1);
            let prev = &sparse[k - 1];
            let mut row = Vec::with_capacity(m - (1 << k) + 1);
            for i in 0..=(m - (1 << k)) {
                let a = prev[i];
                let b = prev[i + half];
                row.push(if depth[euler[a as usize] as usize] <= depth[euler[b as usize] as usize] {
                    a
                } else {
                    b
                });
            }
            sparse.push(row);
            k += 1;
        }

        Self {
            n_leaves: tree.leaves.len(),
            leaves: tree.leaves.clone(),
            depth,
            wdepth,
            euler,
            first,
            sparse,
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.n_leaves
    }

    fn lca_node(&self, u: usize, v: usize) -> usize {
        let (mut l, mut r) = (self.first[u] as usize, self.first[v] as usize);
        if l > r {
            std::mem::swap(&mut l, &mut r);
        }
        let len = r - l + 1;
        let k = usize::BITS as usize - 1 - len.leading_zeros() as usize;
        let a = self.sparse[k][l];
        let b = self.sparse[k][r + 1 - (1 << k)];
        let (na, nb) = (self.euler[a as usize] as usize, self.euler[b as usize] as usize);
        if self.depth[na] <= self.depth[nb] {
            na
        } else {
            nb
        }
    }

    fn check_rank(&self, k: usize) -> Result<usize, TreeError> {
        self.leaves
            .get(k)
            .map(|id| id.0)
            .ok_or(TreeError::LeafRankOutOfRange {
                rank: k,
                n_leaves: self.n_leaves,
            })
    }

    /// Edge count between leaves `i` and `j` via depth(i)+depth(j)-2*depth(lca).
    pub fn distance(&self, i: usize, j: usize) -> Result<u32, TreeError> {
        let (u, v) = (self.check_rank(i)?, self.check_rank(j)?);
        let lca = self.lca_node(u, v);
        Ok(self.depth[u] + self.depth[v] - 2 * self.depth[lca])
    }

    pub fn weighted_distance(&self, i: usize, j: usize) -> Result<f64, TreeError> {
        let wd = self.wdepth.as_ref().ok_or(TreeError::Unweighted)?;
        let (u, v) = (self.check_rank(i)?, self.check_rank(j)?);
        if u == v {
            return Ok(0.0);
        }
        let lca = self.lca_node(u, v);
        Ok((wd[u] + wd[v] - 2.0 * wd[lca]).max(0.0))
    }

    pub fn matrix(&self) -> SquareMatrix<u32> {
        let n = self.n_leaves;
        let mut m = SquareMatrix::filled(n, 0u32);
        for i in 0..n {
            for j in (i + 1)..n {
                let d = self
                    .distance(i, j)
                    .expect("ranks within bounds by construction");
                m.set(i, j, d);
                m.set(j, i, d);
            }
        }
        m
    }

    pub fn weighted_matrix(&self) -> Result<SquareMatrix<f64>, TreeError> {
        if self.wdepth.is_none() {
            return Err(TreeError::Unweighted);
        }
        let n = self.n_leaves;
        let mut m = SquareMatrix::filled(n, 0f64);
        for i in 0..n {
            for j in (i + 1)..n {
                let d = self.weighted_distance(i, j)?;
                m.set(i, j, d);
                m.set(j, i, d);
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4() -> ParseTree {
        ParseTree::from_bracket("(R (A a b) (B c d))").unwrap()
    }

    #[test]
    fn t4_shape() {
        let t = t4();
        assert_eq!(t.n_leaves(), 4);
        assert_eq!(t.label(t.root()), "R");
        assert_eq!(t.leaf_label(0).unwrap(), "a");
        assert_eq!(t.leaf_label(3).unwrap(), "d");
        assert!(!t.is_weighted());
    }

    #[test]
    fn single_leaf_under_root() {
        let t = ParseTree::from_bracket("(R a)").unwrap();
        assert_eq!(t.n_leaves(), 1);
        let m = t.leaf_distance_matrix();
        assert_eq!(m.n(), 1);
        assert_eq!(m.get(0, 0), 0);
    }

    #[test]
    fn t4_leaf_distances() {
        let t = t4();
        assert_eq!(t.leaf_distance(0, 1).unwrap(), 2);
        assert_eq!(t.leaf_distance(0, 2).unwrap(), 4);
        assert_eq!(t.leaf_distance(2, 2).unwrap(), 0);
        assert_eq!(t.leaf_distance(1, 0).unwrap(), 2);
    }

    #[test]
    fn t4_matrix() {
        let m = t4().leaf_distance_matrix();
        let expected = [[0, 2, 4, 4], [2, 0, 4, 4], [4, 4, 0, 2], [4, 4, 2, 0]];
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.get(i, j), expected[i][j], "({i},{j})");
            }
        }
    }

    #[test]
    fn caterpillar_matrix() {
        let m = ParseTree::from_bracket("(R a (X b (Y c d)))")
            .unwrap()
            .leaf_distance_matrix();
        assert_eq!(m.get(0, 1), 3);
        assert_eq!(m.get(2, 3), 2);
        assert_eq!(m.get(0, 3), 4);
    }

    #[test]
    fn leaf_rank_out_of_range() {
        let t = t4();
        assert!(matches!(
            t.leaf_distance(0, 4),
            Err(TreeError::LeafRankOutOfRange { rank: 4, n_leaves: 4 })
        ));
    }

    #[test]
    fn weighted_two_leaf() {
        let t = ParseTree::from_bracket("(R a:0.25 b:0.25)").unwrap();
        assert!(t.is_weighted());
        let d = t.weighted_leaf_distance(0, 1).unwrap();
        assert!((d - 2.0 * (4.0f64).ln()).abs() < 1e-12, "d = {d}");
        assert_eq!(t.weighted_leaf_distance(1, 1).unwrap(), 0.0);
    }

    #[test]
    fn weighted_all_ones_is_zero() {
        let t = ParseTree::from_bracket("(R a:1.0 b:1.0)").unwrap();
        assert_eq!(t.weighted_leaf_distance(0, 1).unwrap(), 0.0);
    }

    #[test]
    fn weighted_query_on_unweighted_tree() {
        assert!(matches!(
            t4().weighted_leaf_distance(0, 1),
            Err(TreeError::Unweighted)
        ));
    }

    #[test]
    fn weighted_matrix_matches_single_queries() {
        let t = ParseTree::from_bracket("(R (A:0.1 a:0.9 b:0.9) (B:0.1 c:0.1 d:0.1))").unwrap();
        let m = t.weighted_distance_matrix().unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let q = t.weighted_leaf_distance(i, j).unwrap();
                assert!((m.get(i, j) - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn builder_roundtrip() {
        let mut b = TreeBuilder::new();
        let a = b.leaf("a");
        let c = b.leaf("b");
        let i = b.node("A", vec![a, c]);
        let d = b.leaf("c");
        let r = b.node("R", vec![i, d]);
        let t = b.build(r).unwrap();
        assert_eq!(t.to_bracket(), "(R (A a b) c)");
    }

    #[test]
    fn builder_rejects_shared_child() {
        let mut b = TreeBuilder::new();
        let a = b.leaf("a");
        let i = b.node("A", vec![a, a]);
        assert!(matches!(b.build(i), Err(TreeError::ChildReused(_))));
    }

    #[test]
    fn builder_rejects_orphan() {
        let mut b = TreeBuilder::new();
        let a = b.leaf("a");
        let _orphan = b.leaf("z");
        let r = b.node("R", vec![a]);
        assert!(matches!(b.build(r), Err(TreeError::Unreachable(_))));
    }

    #[test]
    fn builder_rejects_partial_weights() {
        let mut b = TreeBuilder::new();
        let a = b.leaf_weighted("a", 0.5);
        let c = b.leaf("b");
        let r = b.node("R", vec![a, c]);
        assert!(matches!(b.build(r), Err(TreeError::PartialWeights)));
    }

    #[test]
    fn cnf_predicate() {
        assert!(t4().is_cnf());
        // Preterminal chains are allowed only directly above leaves.
        assert!(ParseTree::from_bracket("(S (A a) (B b))").unwrap().is_cnf());
        assert!(!ParseTree::from_bracket("(R a b c)").unwrap().is_cnf());
        assert!(!ParseTree::from_bracket("(R (X (Y a)))").unwrap().is_cnf());
    }

    #[test]
    fn index_matches_climb_on_caterpillar() {
        let t = ParseTree::from_bracket("(R a (X b (Y c (Z d e))))").unwrap();
        let idx = t.distance_index();
        for i in 0..t.n_leaves() {
            for j in 0..t.n_leaves() {
                assert_eq!(idx.distance(i, j).unwrap(), t.leaf_distance(i, j).unwrap());
            }
        }
    }
}

//! Attributed graphs and the two-layer graph convolutional encoder.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::sparse::CsrMatrix;
use crate::tape::{Tape, Var};

/// Label value marking a node whose class is hidden.
pub const MASKED_LABEL: i64 = -1;

/// An undirected attributed graph.
///
/// Edges are stored once per unordered pair with `u < v`; self-loops are
/// rejected since normalization adds them.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    features: Array2<f64>,
    edges: Vec<(usize, usize)>,
    labels: Vec<i64>,
}

impl Graph {
    pub fn new(features: Array2<f64>, edges: Vec<(usize, usize)>, labels: Vec<i64>) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n {
            return Err(Error::InvalidGraph(format!(
                "{} labels for {n} nodes",
                labels.len()
            )));
        }
        if let Some(pos) = features.iter().position(|x| !x.is_finite()) {
            let f = features.ncols().max(1);
            return Err(Error::InvalidGraph(format!(
                "non-finite feature at node {}, column {}",
                pos / f,
                pos % f
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l < MASKED_LABEL) {
            return Err(Error::InvalidGraph(format!("label {l} is negative")));
        }
        let edges = canonical_edges(n, &edges)?;
        Ok(Self {
            features,
            edges,
            labels,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    /// Distinct non-masked labels, ascending.
    pub fn classes(&self) -> Vec<i64> {
        self.labels
            .iter()
            .copied()
            .filter(|&l| l != MASKED_LABEL)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes()];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }

    /// The subgraph induced by `nodes`. Node `i` of the result is
    /// `nodes[i]` of `self`.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<Graph> {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, &v) in nodes.iter().enumerate() {
            if v >= self.num_nodes() {
                return Err(Error::invalid(format!("node {v} out of range")));
            }
            if index.insert(v, i).is_some() {
                return Err(Error::invalid(format!("node {v} listed twice")));
            }
        }
        let edges = self
            .edges
            .iter()
            .filter_map(|&(u, v)| Some((*index.get(&u)?, *index.get(&v)?)))
            .collect();
        Graph::new(
            self.features.select(Axis(0), nodes),
            edges,
            nodes.iter().map(|&v| self.labels[v]).collect(),
        )
    }

    /// Nodes within `hops` of `center`, center first, then in BFS order.
    pub fn ego_nodes(&self, center: usize, hops: usize, neighbors: &[Vec<usize>]) -> Vec<usize> {
        let mut seen = vec![false; self.num_nodes()];
        let mut order = vec![center];
        let mut queue = VecDeque::from([(center, 0usize)]);
        seen[center] = true;
        while let Some((v, depth)) = queue.pop_front() {
            if depth == hops {
                continue;
            }
            for &w in &neighbors[v] {
                if !seen[w] {
                    seen[w] = true;
                    order.push(w);
                    queue.push_back((w, depth + 1));
                }
            }
        }
        order
    }

    /// Disjoint union; node ids of `other` are shifted by `self.num_nodes()`.
    pub fn disjoint_union(graphs: &[&Graph]) -> Result<Graph> {
        let Some(first) = graphs.first() else {
            return Err(Error::invalid("union of no graphs"));
        };
        let f = first.feature_dim();
        let mut offset = 0;
        let mut edges = Vec::new();
        let mut labels = Vec::new();
        let mut views = Vec::new();
        for g in graphs {
            if g.feature_dim() != f {
                return Err(Error::shape("union of graphs with different feature widths"));
            }
            edges.extend(g.edges.iter().map(|&(u, v)| (u + offset, v + offset)));
            labels.extend_from_slice(&g.labels);
            views.push(g.features.view());
            offset += g.num_nodes();
        }
        let features = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?;
        Graph::new(features, edges, labels)
    }
}

fn canonical_edges(n: usize, edges: &[(usize, usize)]) -> Result<Vec<(usize, usize)>> {
    let mut set = BTreeSet::new();
    for &(u, v) in edges {
        if u >= n || v >= n {
            return Err(Error::InvalidGraph(format!(
                "edge ({u}, {v}) has an endpoint outside [0, {n})"
            )));
        }
        if u == v {
            return Err(Error::InvalidGraph(format!("self-loop at node {u}")));
        }
        set.insert((u.min(v), u.max(v)));
    }
    Ok(set.into_iter().collect())
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` for an undirected edge list over `n` nodes.
pub fn normalize_edges(n: usize, edges: &[(usize, usize)]) -> Result<CsrMatrix> {
    let edges = canonical_edges(n, edges)?;
    let mut degree = vec![1.0f64; n];
    for &(u, v) in &edges {
        degree[u] += 1.0;
        degree[v] += 1.0;
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut triplets = Vec::with_capacity(n + 2 * edges.len());
    for (i, s) in inv_sqrt.iter().enumerate() {
        triplets.push((i, i, s * s));
    }
    for &(u, v) in &edges {
        let w = inv_sqrt[u] * inv_sqrt[v];
        triplets.push((u, v, w));
        triplets.push((v, u, w));
    }
    Ok(CsrMatrix::from_triplets(n, n, triplets))
}

pub fn normalize_adjacency(graph: &Graph) -> Result<CsrMatrix> {
    normalize_edges(graph.num_nodes(), graph.edges())
}

/// Weights of the two-layer encoder `Â · relu(Â X W₁) · W₂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

impl EncoderParams {
    pub fn new(w1: Array2<f64>, w2: Array2<f64>) -> Result<Self> {
        if w1.ncols() != w2.nrows() {
            return Err(Error::shape(format!(
                "layer widths {:?} and {:?} do not chain",
                w1.dim(),
                w2.dim()
            )));
        }
        if w1.ncols() == 0 || w2.ncols() == 0 {
            return Err(Error::shape("hidden and output widths must be positive"));
        }
        if w1.iter().chain(w2.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("encoder weights".into()));
        }
        Ok(Self { w1, w2 })
    }

    /// Glorot-uniform initialization.
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut SeededRng) -> Self {
        Self {
            w1: glorot(input, hidden, rng),
            w2: glorot(hidden, output, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.ncols()
    }
}

pub(crate) fn glorot(rows: usize, cols: usize, rng: &mut SeededRng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

/// A graph with its normalized adjacency and first propagation `Â X`
/// precomputed. Both are fixed for the lifetime of a task.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    adjacency: Arc<CsrMatrix>,
    propagated: Array2<f64>,
}

impl PreparedGraph {
    pub fn new(graph: &Graph) -> Result<Self> {
        let adjacency = normalize_adjacency(graph)?;
        let propagated = adjacency.matmul(graph.features().view());
        Ok(Self {
            adjacency: Arc::new(adjacency),
            propagated,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.propagated.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.propagated.ncols()
    }

    pub fn adjacency(&self) -> &CsrMatrix {
        &self.adjacency
    }

    /// Embeds every node on `tape` with the given weight variables.
    pub fn encode_all<'t>(&self, tape: &'t Tape, w1: Var<'t>, w2: Var<'t>) -> Var<'t> {
        let ax = tape.constant(self.propagated.clone());
        ax.matmul(w1).relu().matmul(w2).sp_lmul(&self.adjacency)
    }

    /// Embeddings of all nodes without recording gradients.
    pub fn embed(&self, params: &EncoderParams) -> Array2<f64> {
        let hidden = self.propagated.dot(&params.w1).mapv(|x| x.max(0.0));
        self.adjacency.matmul(hidden.dot(&params.w2).view())
    }
}

/// Embeddings of `node_ids`. Every node of `graph` takes part in message
/// passing; only the requested rows are returned.
pub fn encode_nodes(graph: &Graph, params: &EncoderParams, node_ids: &[usize]) -> Result<Array2<f64>> {
    if node_ids.is_empty() {
        return Err(Error::invalid("encode_nodes called with no node ids"));
    }
    if graph.feature_dim() != params.input_dim() {
        return Err(Error::shape(format!(
            "feature width {} does not match encoder input width {}",
            graph.feature_dim(),
            params.input_dim()
        )));
    }
    if let Some(&bad) = node_ids.iter().find(|&&v| v >= graph.num_nodes()) {
        return Err(Error::invalid(format!("node id {bad} out of range")));
    }
    let all = PreparedGraph::new(graph)?.embed(params);
    Ok(all.select(Axis(0), node_ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_bad_edges() {
        let x = Array2::zeros((2, 1));
        assert!(Graph::new(x.clone(), vec![(0, 2)], vec![0, 0]).is_err());
        assert!(Graph::new(x.clone(), vec![(1, 1)], vec![0, 0]).is_err());
        assert!(normalize_edges(2, &[(0, 5)]).is_err());
        let g = Graph::new(x, vec![(1, 0), (0, 1)], vec![0, 0]).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
    }

    #[test]
    fn rejects_non_finite_features() {
        let x = array![[1.0], [f64::NAN]];
        assert!(matches!(Graph::new(x, vec![], vec![0, 0]), Err(Error::InvalidGraph(_))));
    }

    #[test]
    fn single_node_normalizes_to_one() {
        assert_eq!(normalize_edges(1, &[]).unwrap().to_dense(), array![[1.0]]);
    }

    #[test]
    fn two_nodes_one_edge() {
        let a = normalize_edges(2, &[(0, 1)]).unwrap().to_dense();
        for v in a.iter() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let g = Graph::new(Array2::ones((3, 2)), vec![(0, 1)], vec![0, 0, 1]).unwrap();
        let p = EncoderParams::new(Array2::ones((2, 2)), Array2::ones((2, 1))).unwrap();
        assert!(encode_nodes(&g, &p, &[]).is_err());
        let wide = EncoderParams::new(Array2::ones((3, 2)), Array2::ones((2, 1))).unwrap();
        assert!(encode_nodes(&g, &wide, &[0]).is_err());
        assert!(encode_nodes(&g, &p, &[7]).is_err());
    }

    #[test]
    fn identity_weights_on_isolated_node() {
        let g = Graph::new(array![[0.5, 2.0]], vec![], vec![0]).unwrap();
        let p = EncoderParams::new(Array2::eye(2), Array2::eye(2)).unwrap();
        assert_eq!(encode_nodes(&g, &p, &[0]).unwrap(), array![[0.5, 2.0]]);
    }

    #[test]
    fn zero_features_give_zero_embeddings() {
        let g = Graph::new(Array2::zeros((4, 3)), vec![(0, 1), (1, 2), (2, 3)], vec![0; 4]).unwrap();
        let mut rng = crate::rng::stream(1, &[]);
        let p = EncoderParams::init(3, 5, 2, &mut rng);
        assert!(encode_nodes(&g, &p, &[0, 1, 2, 3]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ego_nodes_respects_hops() {
        let g = Graph::new(Array2::zeros((5, 1)), vec![(0, 1), (1, 2), (2, 3), (3, 4)], vec![0; 5]).unwrap();
        let nb = g.neighbors();
        assert_eq!(g.ego_nodes(0, 2, &nb), vec![0, 1, 2]);
        assert_eq!(g.ego_nodes(2, 1, &nb), vec![2, 1, 3]);
    }

    #[test]
    fn induced_subgraph_remaps_edges() {
        let g = Graph::new(
            array![[0.0], [1.0], [2.0], [3.0]],
            vec![(0, 1), (1, 2), (2, 3)],
            vec![0, 1, 2, 3],
        )
        .unwrap();
        let s = g.induced_subgraph(&[2, 1, 3]).unwrap();
        assert_eq!(s.edges(), &[(0, 1), (0, 2)]);
        assert_eq!(s.labels(), &[2, 1, 3]);
        assert_eq!(s.features()[[0, 0]], 2.0);
    }
}

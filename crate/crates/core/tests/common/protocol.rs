//! Random task layouts and direct checks of the protocol guarantees.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use opencil::graph::Graph;
use opencil::rng::stream;
use opencil::tasks::{build_task_sequence, SplitFractions, TaskSpec};
use rand::Rng;

pub struct Layout {
    pub graph: Graph,
    pub knowns: Vec<usize>,
    pub unknowns: Vec<usize>,
    pub fractions: SplitFractions,
    pub seed: u64,
}

/// A labeled graph with random class sizes, some unlabeled nodes and a
/// random valid task layout over it.
pub fn random_layout(seed: u64) -> Layout {
    let mut rng = stream(seed, &[77]);
    let tasks = rng.gen_range(1..=4);
    let mut knowns = Vec::new();
    let mut unknowns = Vec::new();
    for t in 0..tasks {
        let floor = if t == 0 { 1 } else { unknowns[t - 1] };
        knowns.push(rng.gen_range(floor.max(1)..=floor.max(1) + 2));
        unknowns.push(rng.gen_range(0..=2));
    }
    let needed = knowns.iter().sum::<usize>() + unknowns[tasks - 1];
    let classes = needed + rng.gen_range(0..3);
    let mut labels = Vec::new();
    for c in 0..classes {
        labels.extend(std::iter::repeat(c as i64 * 3 + 1).take(rng.gen_range(3..15)));
    }
    labels.extend(std::iter::repeat(-1).take(rng.gen_range(0..5)));
    // Interleave so class membership is not contiguous in node order.
    for i in (1..labels.len()).rev() {
        labels.swap(i, rng.gen_range(0..=i));
    }
    let n = labels.len();
    let edges: Vec<(usize, usize)> = (0..2 * n)
        .map(|_| (rng.gen_range(0..n), rng.gen_range(0..n)))
        .filter(|(u, v)| u != v)
        .collect();
    let graph = Graph::new(Array2::zeros((n, 1)), edges, labels).unwrap();
    let train = rng.gen_range(0.2..0.7);
    let val = rng.gen_range(0.05..(0.9 - train));
    Layout {
        graph,
        knowns,
        unknowns,
        fractions: SplitFractions {
            train,
            val,
            test: 1.0 - train - val,
        },
        seed: rng.gen(),
    }
}

impl Layout {
    pub fn build(&self) -> Vec<TaskSpec> {
        build_task_sequence(&self.graph, &self.knowns, &self.unknowns, self.fractions, self.seed).unwrap()
    }
}

/// Asserts disjointness, promotion and split disjointness from first
/// principles; returns a description of the first violation.
pub fn verify(layout: &Layout, tasks: &[TaskSpec]) -> Result<(), String> {
    let labels = layout.graph.labels();
    let mut known_so_far: BTreeSet<i64> = BTreeSet::new();
    let mut ever_unknown_tested: BTreeMap<usize, i64> = BTreeMap::new();
    for (i, t) in tasks.iter().enumerate() {
        let known: BTreeSet<i64> = t.known_classes.iter().copied().collect();
        let unknown: BTreeSet<i64> = t.unknown_classes.iter().copied().collect();
        if known.len() != layout.knowns[i] || unknown.len() != layout.unknowns[i] {
            return Err(format!("task {}: class counts differ from the layout", i + 1));
        }
        if !known.is_disjoint(&unknown) {
            return Err(format!("task {}: known and unknown overlap", i + 1));
        }
        if !known.is_disjoint(&known_so_far) {
            return Err(format!("task {}: a class is learned twice", i + 1));
        }
        if !unknown.is_disjoint(&known_so_far) {
            return Err(format!("task {}: an unknown class was already learned", i + 1));
        }
        if i > 0 && !tasks[i - 1].unknown_classes.iter().all(|c| known.contains(c)) {
            return Err(format!("task {}: previous unknowns not promoted", i + 1));
        }
        known_so_far.extend(&known);
        let cumulative: BTreeSet<i64> = t.cumulative_known.iter().copied().collect();
        if cumulative != known_so_far {
            return Err(format!("task {}: cumulative set is wrong", i + 1));
        }
        let parts = [&t.train_ids, &t.val_ids, &t.test_known_ids, &t.test_unknown_ids];
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let union: BTreeSet<usize> = parts.iter().flat_map(|p| p.iter().copied()).collect();
        if union.len() != total {
            return Err(format!("task {}: splits overlap", i + 1));
        }
        // Every node of a known class lands in exactly one known split.
        let class_nodes = |set: &BTreeSet<i64>| -> BTreeSet<usize> {
            (0..labels.len()).filter(|&v| set.contains(&labels[v])).collect()
        };
        let known_parts: BTreeSet<usize> = parts[..3].iter().flat_map(|p| p.iter().copied()).collect();
        if known_parts != class_nodes(&known) {
            return Err(format!("task {}: known splits do not cover the known classes", i + 1));
        }
        let unknown_test: BTreeSet<usize> = t.test_unknown_ids.iter().copied().collect();
        if !unknown_test.iter().all(|v| unknown.contains(&labels[*v])) {
            return Err(format!("task {}: unknown test node from a wrong class", i + 1));
        }
        for c in &unknown {
            if !unknown_test.iter().any(|v| labels[*v] == *c) {
                return Err(format!("task {}: unknown class {c} has no test nodes", i + 1));
            }
        }
        let training: BTreeSet<usize> = t.training_nodes(&layout.graph).into_iter().collect();
        if !training.is_disjoint(&unknown_test) {
            return Err(format!("task {}: unknown nodes leak into training", i + 1));
        }
        // A node tested as unknown is tested again, never trained on, once
        // its class is promoted.
        for &v in &t.test_unknown_ids {
            ever_unknown_tested.insert(v, labels[v]);
        }
        for (&v, c) in &ever_unknown_tested {
            if known.contains(c) && !t.test_known_ids.contains(&v) {
                return Err(format!("task {}: promoted node {v} left the test split", i + 1));
            }
        }
    }
    Ok(())
}

//! Task sequences with disjoint known classes, inductive masking, and
//! exemplar selection.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng;

/// Fractions of every class assigned to train, validation and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub const STANDARD: SplitFractions = SplitFractions {
        train: 0.4,
        val: 0.2,
        test: 0.4,
    };

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("split fractions must be finite and nonnegative"));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split fractions must sum to 1"));
        }
        if self.train == 0.0 || self.test == 0.0 {
            return Err(Error::invalid("train and test fractions must be positive"));
        }
        Ok(())
    }

    /// Sizes for a class of `n >= 3` nodes; every part gets at least one node.
    fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let train = ((self.train * n as f64).round() as usize).clamp(1, n - 2);
        let val = ((self.val * n as f64).round() as usize).clamp(1, n - train - 1);
        (train, val, n - train - val)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// 1-based position in the sequence.
    pub task_index: usize,
    /// Classes introduced by this task.
    pub known_classes: Vec<i64>,
    /// Every class introduced up to and including this task.
    pub cumulative_known: Vec<i64>,
    /// Classes present only in this task's test set.
    pub unknown_classes: Vec<i64>,
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
    pub test_known_ids: Vec<usize>,
    pub test_unknown_ids: Vec<usize>,
}

impl TaskSpec {
    /// Nodes of the training graph: every node of the newly known classes.
    /// Unknown-class nodes are absent, not just unlabeled.
    pub fn training_nodes(&self, graph: &Graph) -> Vec<usize> {
        nodes_with_labels(graph, &self.known_classes)
    }

    /// Nodes of the evaluation graph: all cumulative known classes plus this
    /// task's unknown classes.
    pub fn evaluation_nodes(&self, graph: &Graph) -> Vec<usize> {
        let mut classes = self.cumulative_known.clone();
        classes.extend_from_slice(&self.unknown_classes);
        nodes_with_labels(graph, &classes)
    }
}

fn nodes_with_labels(graph: &Graph, classes: &[i64]) -> Vec<usize> {
    let set: BTreeSet<i64> = classes.iter().copied().collect();
    (0..graph.num_nodes())
        .filter(|&v| set.contains(&graph.labels()[v]))
        .collect()
}

#[derive(Debug, Clone, Copy, Default)]
struct ClassSplit<'a> {
    train: &'a [usize],
    val: &'a [usize],
    test: &'a [usize],
}

/// Splits `graph` into a task sequence.
///
/// Classes are shuffled with `seed` and consumed in order. Task 1 takes
/// `knowns[0]` fresh known classes and `unknowns[0]` fresh unknown classes;
/// every later task promotes the previous task's unknown classes to known,
/// tops up with fresh classes to reach `knowns[t]`, then takes `unknowns[t]`
/// fresh unknown classes. Every class is split once with `fractions`; the
/// test part of a class serves as unknown test data while the class is
/// unknown and as known test data once it is learned.
pub fn build_task_sequence(
    graph: &Graph,
    knowns: &[usize],
    unknowns: &[usize],
    fractions: SplitFractions,
    seed: u64,
) -> Result<Vec<TaskSpec>> {
    fractions.validate()?;
    if knowns.is_empty() || knowns.len() != unknowns.len() {
        return Err(Error::TaskLayout(
            "known and unknown counts must be non-empty lists of equal length".into(),
        ));
    }
    if knowns.iter().any(|&k| k == 0) {
        return Err(Error::TaskLayout("every task needs at least one known class".into()));
    }
    for t in 1..knowns.len() {
        if knowns[t] < unknowns[t - 1] {
            return Err(Error::TaskLayout(format!(
                "task {} has {} known classes but must promote {} unknown classes",
                t + 1,
                knowns[t],
                unknowns[t - 1]
            )));
        }
    }
    let needed = knowns.iter().sum::<usize>() + unknowns.last().unwrap();
    let mut by_class: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (v, &l) in graph.labels().iter().enumerate() {
        if l >= 0 {
            by_class.entry(l).or_default().push(v);
        }
    }
    if by_class.len() < needed {
        return Err(Error::TaskLayout(format!(
            "layout needs {needed} classes, graph has {}",
            by_class.len()
        )));
    }

    let mut order: Vec<i64> = by_class.keys().copied().collect();
    let mut rng = rng::stream(seed, &[rng::tag::SPLIT]);
    order.shuffle(&mut rng);
    order.truncate(needed);

    // Each class shuffles its nodes with its own stream, so a class's split
    // does not depend on which other classes the layout uses.
    let mut shuffled: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for &c in &order {
        let mut nodes = by_class[&c].clone();
        if nodes.len() < 3 {
            return Err(Error::TaskLayout(format!(
                "class {c} has {} nodes; a 3-way split needs at least 3",
                nodes.len()
            )));
        }
        nodes.shuffle(&mut rng::stream(seed, &[rng::tag::SPLIT, c as u64]));
        shuffled.insert(c, nodes);
    }
    let splits: BTreeMap<i64, ClassSplit<'_>> = shuffled
        .iter()
        .map(|(&c, nodes)| {
            let (tr, va, _) = fractions.sizes(nodes.len());
            let split = ClassSplit {
                train: &nodes[..tr],
                val: &nodes[tr..tr + va],
                test: &nodes[tr + va..],
            };
            (c, split)
        })
        .collect();

    let mut tasks = Vec::with_capacity(knowns.len());
    let mut cursor = 0;
    let mut cumulative = Vec::new();
    let mut previous_unknown: Vec<i64> = Vec::new();
    for (t, (&k, &u)) in knowns.iter().zip(unknowns).enumerate() {
        let fresh = k - previous_unknown.len();
        let mut known = std::mem::take(&mut previous_unknown);
        known.extend_from_slice(&order[cursor..cursor + fresh]);
        cursor += fresh;
        let unknown = order[cursor..cursor + u].to_vec();
        cursor += u;
        cumulative.extend_from_slice(&known);

        let collect = |classes: &[i64], part: for<'a> fn(&'a ClassSplit<'a>) -> &'a [usize]| -> Vec<usize> {
            let mut ids: Vec<usize> = classes.iter().flat_map(|c| part(&splits[c]).iter().copied()).collect();
            ids.sort_unstable();
            ids
        };
        tasks.push(TaskSpec {
            task_index: t + 1,
            train_ids: collect(&known, |s| s.train),
            val_ids: collect(&known, |s| s.val),
            test_known_ids: collect(&known, |s| s.test),
            test_unknown_ids: collect(&unknown, |s| s.test),
            known_classes: known,
            cumulative_known: cumulative.clone(),
            unknown_classes: unknown.clone(),
        });
        previous_unknown = unknown;
    }
    Ok(tasks)
}

/// Checks the structural guarantees of a task sequence against `graph`.
pub fn check_sequence(graph: &Graph, tasks: &[TaskSpec]) -> Result<()> {
    let labels = graph.labels();
    let mut seen = BTreeSet::new();
    for (i, task) in tasks.iter().enumerate() {
        let bad = |msg: String| Err(Error::TaskLayout(format!("task {}: {msg}", task.task_index)));
        if task.task_index != i + 1 {
            return bad("out of order".into());
        }
        if let Some(c) = task.known_classes.iter().find(|c| seen.contains(*c)) {
            return bad(format!("class {c} was already known"));
        }
        seen.extend(task.known_classes.iter().copied());
        if task.cumulative_known.iter().copied().collect::<BTreeSet<_>>() != seen {
            return bad("cumulative known set is inconsistent".into());
        }
        if i > 0 {
            let prev = &tasks[i - 1];
            if let Some(c) = prev.unknown_classes.iter().find(|c| !task.known_classes.contains(c)) {
                return bad(format!("unknown class {c} of the previous task was not promoted"));
            }
        }
        let known: BTreeSet<i64> = task.known_classes.iter().copied().collect();
        let unknown: BTreeSet<i64> = task.unknown_classes.iter().copied().collect();
        if unknown.iter().any(|c| seen.contains(c)) {
            return bad("an unknown class is already known".into());
        }
        for ids in [&task.train_ids, &task.val_ids, &task.test_known_ids] {
            if let Some(&v) = ids.iter().find(|&&v| !known.contains(&labels[v])) {
                return bad(format!("node {v} in a known split has label {}", labels[v]));
            }
        }
        if let Some(&v) = task.test_unknown_ids.iter().find(|&&v| !unknown.contains(&labels[v])) {
            return bad(format!("node {v} in the unknown test set has label {}", labels[v]));
        }
        let mut all = BTreeSet::new();
        for ids in [&task.train_ids, &task.val_ids, &task.test_known_ids, &task.test_unknown_ids] {
            for &v in ids.iter() {
                if !all.insert(v) {
                    return bad(format!("node {v} appears in two splits"));
                }
            }
        }
        let graph_nodes: BTreeSet<usize> = task.training_nodes(graph).into_iter().collect();
        if let Some(v) = task.test_unknown_ids.iter().find(|v| graph_nodes.contains(v)) {
            return bad(format!("unknown node {v} is present in the training graph"));
        }
    }
    Ok(())
}

/// Human-readable record of a task sequence, sufficient to rebuild it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskManifest {
    pub seed: u64,
    pub split_fractions: SplitFractions,
    pub knowns_per_task: Vec<usize>,
    pub unknowns_per_task: Vec<usize>,
    pub tasks: Vec<TaskRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub task_index: usize,
    pub known_classes: Vec<i64>,
    pub unknown_classes: Vec<i64>,
    pub train: usize,
    pub val: usize,
    pub test_known: usize,
    pub test_unknown: usize,
}

impl TaskManifest {
    pub fn new(
        tasks: &[TaskSpec],
        knowns: &[usize],
        unknowns: &[usize],
        fractions: SplitFractions,
        seed: u64,
    ) -> Self {
        Self {
            seed,
            split_fractions: fractions,
            knowns_per_task: knowns.to_vec(),
            unknowns_per_task: unknowns.to_vec(),
            tasks: tasks
                .iter()
                .map(|t| TaskRecord {
                    task_index: t.task_index,
                    known_classes: t.known_classes.clone(),
                    unknown_classes: t.unknown_classes.clone(),
                    train: t.train_ids.len(),
                    val: t.val_ids.len(),
                    test_known: t.test_known_ids.len(),
                    test_unknown: t.test_unknown_ids.len(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.split_fractions.validate()?;
        if m.knowns_per_task.len() != m.unknowns_per_task.len() || m.tasks.len() != m.knowns_per_task.len() {
            return Err(Error::TaskLayout("manifest task counts disagree".into()));
        }
        Ok(m)
    }

    /// Rebuilds the sequence from `graph` and checks it matches the record.
    pub fn rebuild(&self, graph: &Graph) -> Result<Vec<TaskSpec>> {
        let tasks = build_task_sequence(
            graph,
            &self.knowns_per_task,
            &self.unknowns_per_task,
            self.split_fractions,
            self.seed,
        )?;
        let again = TaskManifest::new(
            &tasks,
            &self.knowns_per_task,
            &self.unknowns_per_task,
            self.split_fractions,
            self.seed,
        );
        if &again != self {
            return Err(Error::TaskLayout("graph does not reproduce the manifest".into()));
        }
        Ok(tasks)
    }
}

/// Node embeddings with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub node_ids: Vec<usize>,
    pub labels: Vec<i64>,
    pub z: Array2<f64>,
}

impl EmbeddingBatch {
    pub fn new(node_ids: Vec<usize>, labels: Vec<i64>, z: Array2<f64>) -> Result<Self> {
        if node_ids.len() != labels.len() || z.nrows() != labels.len() {
            return Err(Error::shape("node ids, labels and embeddings must have equal length"));
        }
        Ok(Self { node_ids, labels, z })
    }

    /// Row indices per class, rows ordered by ascending node id.
    fn rows_by_class(&self) -> BTreeMap<i64, Vec<usize>> {
        let mut out: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (row, &l) in self.labels.iter().enumerate() {
            out.entry(l).or_default().push(row);
        }
        for rows in out.values_mut() {
            rows.sort_by_key(|&r| self.node_ids[r]);
        }
        out
    }

    fn class_mean(&self, rows: &[usize]) -> Array1<f64> {
        self.z.select(Axis(0), rows).mean_axis(Axis(0)).expect("class has members")
    }
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the maximum score; ties go to the earliest position.
fn argmax(scores: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Coverage maximization: per class, start from the member farthest from
/// the class mean, then repeatedly add the member whose distance to its
/// nearest selected exemplar is largest. Ties go to the lower node id.
pub fn select_exemplars_cm(batch: &EmbeddingBatch, k: usize) -> Result<BTreeMap<i64, Vec<usize>>> {
    if k == 0 {
        return Err(Error::invalid("exemplar count must be at least 1"));
    }
    let mut out = BTreeMap::new();
    for (class, rows) in batch.rows_by_class() {
        if rows.len() <= k {
            out.insert(class, rows.iter().map(|&r| batch.node_ids[r]).collect());
            continue;
        }
        let mean = batch.class_mean(&rows);
        let first = argmax(rows.iter().map(|&r| sq_dist(batch.z.row(r), mean.view()))).unwrap();
        let mut chosen = vec![rows[first]];
        let mut nearest: Vec<f64> = rows
            .iter()
            .map(|&r| sq_dist(batch.z.row(r), batch.z.row(rows[first])))
            .collect();
        while chosen.len() < k {
            let pick = argmax(
                nearest
                    .iter()
                    .zip(&rows)
                    .map(|(&d, r)| if chosen.contains(r) { f64::NEG_INFINITY } else { d }),
            )
            .unwrap();
            let row = rows[pick];
            chosen.push(row);
            for (d, &r) in nearest.iter_mut().zip(&rows) {
                *d = d.min(sq_dist(batch.z.row(r), batch.z.row(row)));
            }
        }
        out.insert(class, chosen.iter().map(|&r| batch.node_ids[r]).collect());
    }
    Ok(out)
}

/// Mean of features: per class, the `k` members nearest the class mean.
/// Ties go to the lower node id.
pub fn select_exemplars_mf(batch: &EmbeddingBatch, k: usize) -> Result<BTreeMap<i64, Vec<usize>>> {
    if k == 0 {
        return Err(Error::invalid("exemplar count must be at least 1"));
    }
    let mut out = BTreeMap::new();
    for (class, rows) in batch.rows_by_class() {
        let mean = batch.class_mean(&rows);
        let mut ranked: Vec<(f64, usize)> = rows
            .iter()
            .map(|&r| (sq_dist(batch.z.row(r), mean.view()), batch.node_ids[r]))
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.insert(class, ranked.into_iter().take(k).map(|(_, v)| v).collect());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExemplarMethod {
    Cm,
    Mf,
}

impl ExemplarMethod {
    pub fn select(self, batch: &EmbeddingBatch, k: usize) -> Result<BTreeMap<i64, Vec<usize>>> {
        match self {
            ExemplarMethod::Cm => select_exemplars_cm(batch, k),
            ExemplarMethod::Mf => select_exemplars_mf(batch, k),
        }
    }
}

/// A retained node together with its 2-hop neighbourhood in the graph it
/// was selected from. The exemplar is node 0 of `ego`.
#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub node_id: usize,
    pub class_id: i64,
    pub ego: Graph,
}

/// Receptive field of the two-layer encoder.
pub const EGO_HOPS: usize = 2;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExemplarStore {
    per_class: BTreeMap<i64, Vec<Exemplar>>,
}

impl ExemplarStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores exemplars chosen from `graph` (in `graph`'s local node ids),
    /// keeping their ego subgraphs. `global_ids[v]` maps local node `v` back
    /// to the dataset node id.
    pub fn insert(
        &mut self,
        graph: &Graph,
        global_ids: &[usize],
        chosen: &BTreeMap<i64, Vec<usize>>,
        k: usize,
    ) -> Result<()> {
        let neighbors = graph.neighbors();
        for (&class, locals) in chosen {
            if locals.len() > k {
                return Err(Error::invalid(format!("{} exemplars for class {class}, limit {k}", locals.len())));
            }
            let mut list = Vec::with_capacity(locals.len());
            for &v in locals {
                let nodes = graph.ego_nodes(v, EGO_HOPS, &neighbors);
                list.push(Exemplar {
                    node_id: global_ids[v],
                    class_id: class,
                    ego: graph.induced_subgraph(&nodes)?,
                });
            }
            self.per_class.insert(class, list);
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.per_class.values().all(Vec::is_empty)
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn classes(&self) -> impl Iterator<Item = i64> + '_ {
        self.per_class.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Exemplar> {
        self.per_class.values().flatten()
    }

    pub fn for_class(&self, class: i64) -> &[Exemplar] {
        self.per_class.get(&class).map_or(&[], Vec::as_slice)
    }
}

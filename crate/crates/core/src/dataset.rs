//! Dataset files and synthetic graph generators.
//!
//! A dataset directory holds three positional text files:
//!
//! * `features.txt`: one row per node, real values separated by commas,
//!   tabs or spaces;
//! * `edges.txt`: one edge per line, two integer node ids;
//! * `labels.txt`: one integer class id per line (`-1` for unlabeled).
//!
//! Blank lines and lines starting with `#` are ignored. The loader drops
//! self-loops and duplicate or reversed edges, which public edge lists
//! routinely contain.

use std::fs;
use std::io::{Read, Seek};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::{self, NormalSource};

pub const FEATURES_FILE: &str = "features.txt";
pub const EDGES_FILE: &str = "edges.txt";
pub const LABELS_FILE: &str = "labels.txt";

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn fields(line: &str) -> impl Iterator<Item = &str> {
    line.split(|c: char| c == ',' || c == '\t' || c == ';' || c.is_whitespace())
        .filter(|s| !s.is_empty())
}

pub fn parse_features(text: &str) -> Result<Array2<f64>> {
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (line, l) in data_lines(text) {
        let start = values.len();
        for f in fields(l) {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::parse(line, format!("`{f}` is not a number")))?;
            if !v.is_finite() {
                return Err(Error::parse(line, format!("non-finite feature `{f}`")));
            }
            values.push(v);
        }
        let w = values.len() - start;
        match width {
            None => width = Some(w),
            Some(expected) if expected != w => {
                return Err(Error::parse(line, format!("row has {w} values, expected {expected}")))
            }
            _ => {}
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, width.unwrap_or(0)), values).map_err(|e| Error::shape(e.to_string()))
}

pub fn parse_edges(text: &str) -> Result<Vec<(usize, usize)>> {
    data_lines(text)
        .map(|(line, l)| {
            let ids: Vec<&str> = fields(l).collect();
            if ids.len() != 2 {
                return Err(Error::parse(line, format!("expected 2 node ids, found {}", ids.len())));
            }
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::parse(line, format!("`{s}` is not a node id")))
            };
            Ok((parse(ids[0])?, parse(ids[1])?))
        })
        .collect()
}

pub fn parse_labels(text: &str) -> Result<Vec<i64>> {
    data_lines(text)
        .map(|(line, l)| {
            let mut it = fields(l);
            let (Some(f), None) = (it.next(), it.next()) else {
                return Err(Error::parse(line, "expected exactly one label"));
            };
            let v: i64 = f
                .parse()
                .map_err(|_| Error::parse(line, format!("`{f}` is not an integer label")))?;
            if v < -1 {
                return Err(Error::parse(line, format!("label {v} is below -1")));
            }
            Ok(v)
        })
        .collect()
}

/// Assembles a graph from raw parsed parts, dropping self-loops.
pub fn assemble(features: Array2<f64>, edges: Vec<(usize, usize)>, labels: Vec<i64>) -> Result<Graph> {
    if features.nrows() != labels.len() {
        return Err(Error::InvalidGraph(format!(
            "{} feature rows but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    let edges = edges.into_iter().filter(|(u, v)| u != v).collect();
    Graph::new(features, edges, labels)
}

/// Parses the three dataset files from in-memory text.
pub fn parse_dataset(features: &str, edges: &str, labels: &str) -> Result<Graph> {
    assemble(parse_features(features)?, parse_edges(edges)?, parse_labels(labels)?)
}

pub fn load_dataset(dir: &Path) -> Result<Graph> {
    let read = |name: &str| fs::read_to_string(dir.join(name));
    parse_dataset(&read(FEATURES_FILE)?, &read(EDGES_FILE)?, &read(LABELS_FILE)?)
}

pub fn write_dataset(graph: &Graph, dir: &Path) -> Result<()> {
    use std::fmt::Write as _;
    fs::create_dir_all(dir)?;
    let mut out = String::new();
    for row in graph.features().outer_iter() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(dir.join(FEATURES_FILE), &out)?;
    out.clear();
    for &(u, v) in graph.edges() {
        let _ = writeln!(out, "{u} {v}");
    }
    fs::write(dir.join(EDGES_FILE), &out)?;
    out.clear();
    for l in graph.labels() {
        let _ = writeln!(out, "{l}");
    }
    fs::write(dir.join(LABELS_FILE), &out)?;
    Ok(())
}

/// Keeps only nodes whose class has more than `min_nodes` members and
/// relabels classes to `0..k` in ascending order of the original id.
pub fn retain_large_classes(graph: &Graph, min_nodes: usize) -> Result<Graph> {
    let mut counts = std::collections::BTreeMap::new();
    for &l in graph.labels() {
        if l >= 0 {
            *counts.entry(l).or_insert(0usize) += 1;
        }
    }
    let keep: std::collections::BTreeMap<i64, i64> = counts
        .into_iter()
        .filter(|&(_, c)| c > min_nodes)
        .enumerate()
        .map(|(new, (old, _))| (old, new as i64))
        .collect();
    let nodes: Vec<usize> = (0..graph.num_nodes())
        .filter(|&v| keep.contains_key(&graph.labels()[v]))
        .collect();
    let sub = graph.induced_subgraph(&nodes)?;
    let labels = sub.labels().iter().map(|l| keep[l]).collect();
    Graph::new(sub.features().clone(), sub.edges().to_vec(), labels)
}

/// Largest dense feature matrix `read_npz` will allocate.
pub const MAX_DENSE_ENTRIES: usize = 1 << 26;

/// Reads a graph stored in the compressed-sparse `.npz` layout used by the
/// public Amazon/Coauthor benchmark releases (`adj_*`, `attr_*`, `labels`).
pub fn read_npz<R: Read + Seek>(reader: R) -> Result<Graph> {
    use ndarray_npy::NpzReader;

    let mut npz = NpzReader::new(reader).map_err(|e| Error::invalid(format!("npz: {e}")))?;
    let names = npz.names().map_err(|e| Error::invalid(format!("npz: {e}")))?;
    let find = |key: &str| -> Result<String> {
        names
            .iter()
            .find(|n| n.trim_end_matches(".npy") == key)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("npz archive has no `{key}` array")))
    };

    macro_rules! read_as {
        ($name:expr, $target:ty, [$($t:ty),+]) => {{
            let name = find($name)?;
            let mut out: Option<Vec<$target>> = None;
            $(
                if out.is_none() {
                    if let Ok(a) = npz.by_name::<ndarray::OwnedRepr<$t>, ndarray::Ix1>(&name) {
                        out = Some(a.iter().map(|&v| v as $target).collect());
                    }
                }
            )+
            out.ok_or_else(|| Error::invalid(format!("npz array `{}` has an unsupported dtype", $name)))?
        }};
    }

    let shape = |v: Vec<i64>, what: &str| -> Result<(usize, usize)> {
        match v.as_slice() {
            [r, c] if *r >= 0 && *c >= 0 => Ok((*r as usize, *c as usize)),
            _ => Err(Error::invalid(format!("npz `{what}_shape` is not a 2-element shape"))),
        }
    };

    let (n, n2) = shape(read_as!("adj_shape", i64, [i64, i32, u64]), "adj")?;
    if n != n2 {
        return Err(Error::invalid("adjacency is not square"));
    }
    let adj_indptr: Vec<i64> = read_as!("adj_indptr", i64, [i32, i64]);
    let adj_indices: Vec<i64> = read_as!("adj_indices", i64, [i32, i64]);
    let edges = csr_pairs(n, &adj_indptr, &adj_indices)?
        .into_iter()
        .map(|(r, c, _)| (r, c))
        .collect();

    let (rows, cols) = shape(read_as!("attr_shape", i64, [i64, i32, u64]), "attr")?;
    if rows != n {
        return Err(Error::invalid("attribute rows do not match node count"));
    }
    let attr_indptr: Vec<i64> = read_as!("attr_indptr", i64, [i32, i64]);
    let attr_indices: Vec<i64> = read_as!("attr_indices", i64, [i32, i64]);
    let attr_data: Vec<f64> = read_as!("attr_data", f64, [f32, f64]);
    if attr_data.len() != attr_indices.len() {
        return Err(Error::invalid("attribute data and indices differ in length"));
    }
    if rows.checked_mul(cols).is_none_or(|e| e > MAX_DENSE_ENTRIES) {
        return Err(Error::invalid(format!("attribute matrix {rows}x{cols} is too large to densify")));
    }
    let mut features = Array2::zeros((rows, cols));
    for (k, (r, c, _)) in csr_pairs(rows, &attr_indptr, &attr_indices)?.into_iter().enumerate() {
        if c >= cols {
            return Err(Error::invalid("attribute column out of range"));
        }
        features[[r, c]] = attr_data[k];
    }
    let labels: Vec<i64> = read_as!("labels", i64, [i64, i32]);
    assemble(features, edges, labels)
}

fn csr_pairs(rows: usize, indptr: &[i64], indices: &[i64]) -> Result<Vec<(usize, usize, usize)>> {
    if indptr.len() != rows + 1 {
        return Err(Error::invalid("indptr length does not match row count"));
    }
    let mut out = Vec::with_capacity(indices.len());
    for r in 0..rows {
        let (a, b) = (indptr[r], indptr[r + 1]);
        if a < 0 || b < a || b as usize > indices.len() {
            return Err(Error::invalid("malformed indptr"));
        }
        for k in a as usize..b as usize {
            let c = indices[k];
            if c < 0 {
                return Err(Error::invalid("negative column index"));
            }
            out.push((r, c as usize, k));
        }
    }
    Ok(out)
}

/// Parameters of a synthetic attributed graph: Gaussian feature blobs, one
/// per class, joined by mostly intra-class edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub nodes_per_class: usize,
    pub feature_dim: usize,
    /// Norm of each class mean.
    pub separation: f64,
    /// Per-coordinate standard deviation around the class mean.
    pub noise: f64,
    /// Expected same-class edges started by each node.
    pub intra_edges: usize,
    /// Expected cross-class edges started by each node.
    pub inter_edges: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// A small stand-in with the class count and per-task layout of the
    /// Amazon Photo co-purchase graph.
    pub fn photo_like(seed: u64) -> Self {
        Self {
            classes: 8,
            nodes_per_class: 60,
            feature_dim: 32,
            separation: 3.0,
            noise: 1.0,
            intra_edges: 3,
            inter_edges: 1,
            seed,
        }
    }
}

pub fn synthetic_graph(spec: &SyntheticSpec) -> Result<Graph> {
    if spec.classes == 0 || spec.nodes_per_class == 0 || spec.feature_dim == 0 {
        return Err(Error::invalid("synthetic graph needs classes, nodes and features"));
    }
    let mut rng = rng::stream(spec.seed, &[rng::tag::SYNTHETIC]);
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let mut m = vec![0.0; spec.feature_dim];
            rng.fill_normal(&mut m);
            let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            m.iter().map(|x| x / norm * spec.separation).collect()
        })
        .collect();
    let n = spec.classes * spec.nodes_per_class;
    let mut labels: Vec<i64> = (0..n).map(|v| (v / spec.nodes_per_class) as i64).collect();
    labels.shuffle(&mut rng);
    let mut features = Array2::zeros((n, spec.feature_dim));
    for (v, mut row) in features.outer_iter_mut().enumerate() {
        let mean = &means[labels[v] as usize];
        for (x, m) in row.iter_mut().zip(mean) {
            *x = m + spec.noise * rng.next_normal();
        }
    }
    let mut by_class = vec![Vec::new(); spec.classes];
    for (v, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(v);
    }
    let mut edges = Vec::new();
    for v in 0..n {
        let own = &by_class[labels[v] as usize];
        for _ in 0..spec.intra_edges {
            let w = own[rng.gen_range(0..own.len())];
            if w != v {
                edges.push((v, w));
            }
        }
        for _ in 0..spec.inter_edges {
            let w = rng.gen_range(0..n);
            if w != v {
                edges.push((v, w));
            }
        }
    }
    Graph::new(features, edges, labels)
}

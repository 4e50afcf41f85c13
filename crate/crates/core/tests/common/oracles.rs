//! Slow, obviously-correct reference implementations.

use ndarray::Array2;
use opencil::rng::SeededRng;
use rand::Rng;

/// Pairwise count: P(known > unknown) + ½ P(tie), over every pair.
pub fn auc_pairs(known: &[f64], unknown: &[f64]) -> f64 {
    let mut total = 0.0;
    for &k in known {
        for &u in unknown {
            total += if k > u {
                1.0
            } else if k == u {
                0.5
            } else {
                0.0
            };
        }
    }
    total / (known.len() * unknown.len()) as f64
}

/// Sweeps every threshold (each distinct score, plus +∞), accepting scores
/// `≥ τ`, and integrates CCR over FPR with trapezoids. The last point is
/// the lowest threshold, which accepts everything.
pub fn oscr_sweep(known: &[(f64, bool)], unknown: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = known.iter().map(|k| k.0).chain(unknown.iter().copied()).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let point = |tau: f64| {
        let ccr = known.iter().filter(|&&(s, ok)| ok && s >= tau).count() as f64 / known.len() as f64;
        let fpr = unknown.iter().filter(|&&s| s >= tau).count() as f64 / unknown.len() as f64;
        (fpr, ccr)
    };
    let mut points = vec![(0.0, 0.0)];
    points.extend(thresholds.iter().map(|&t| point(t)));
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Area under the CCR–FPR curve as a pair count over (correct known,
/// unknown) pairs, ties counted half.
pub fn oscr_pairs(known: &[(f64, bool)], unknown: &[f64]) -> f64 {
    let correct: Vec<f64> = known.iter().filter(|k| k.1).map(|k| k.0).collect();
    if correct.is_empty() {
        return 0.0;
    }
    auc_pairs(&correct, unknown) * correct.len() as f64 / known.len() as f64
}

/// Scores drawn from a small grid so ties are common.
pub fn tied_scores(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0..12) as f64 * 0.25 - 1.0).collect()
}

/// Dense `D̃^{-1/2}(A + I)D̃^{-1/2}` straight from the definition.
pub fn dense_normalized(n: usize, edges: &[(usize, usize)]) -> Array2<f64> {
    let mut a = Array2::<f64>::eye(n);
    for &(u, v) in edges {
        a[[u, v]] = 1.0;
        a[[v, u]] = 1.0;
    }
    let deg: Vec<f64> = a.rows().into_iter().map(|r| r.sum()).collect();
    Array2::from_shape_fn((n, n), |(i, j)| a[[i, j]] / (deg[i] * deg[j]).sqrt())
}

/// Dense two-layer GCN: `Â relu(Â X W1) W2`.
pub fn dense_gcn(adj: &Array2<f64>, x: &Array2<f64>, w1: &Array2<f64>, w2: &Array2<f64>) -> Array2<f64> {
    let hidden = adj.dot(x).dot(w1).mapv(|v| v.max(0.0));
    adj.dot(&hidden).dot(w2)
}

//! Open-set scoring and threshold-free metrics: closed-set accuracy,
//! AUC-ROC, and OSCR with its CCR–FPR curve.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PrototypeTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub node_id: usize,
    pub predicted_class: i64,
    /// Higher means more likely to belong to a known class.
    pub open_score: f64,
    /// `None` marks a node from an unknown class.
    pub true_class: Option<i64>,
}

impl ScoredPrediction {
    pub fn is_correct(&self) -> bool {
        self.true_class == Some(self.predicted_class)
    }
}

/// `(−min_c ‖h − p_c‖², argmin_c)`; ties go to the lowest class id.
pub fn open_set_score(h: ArrayView1<'_, f64>, table: &PrototypeTable, classes: &[i64]) -> Result<(f64, i64)> {
    if classes.is_empty() {
        return Err(Error::invalid("open-set score needs at least one class"));
    }
    if h.len() != table.dim() {
        return Err(Error::shape(format!("latent width {} vs prototype width {}", h.len(), table.dim())));
    }
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    let mut best: Option<(f64, i64)> = None;
    for c in sorted {
        let p = table.get(c).ok_or(Error::UnknownClass(c))?;
        let d: f64 = h.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, c));
        }
    }
    let (d, c) = best.expect("classes non-empty");
    Ok((-d, c))
}

/// Scores every row of `h`.
pub fn score_rows(
    h: &Array2<f64>,
    node_ids: &[usize],
    true_classes: &[Option<i64>],
    table: &PrototypeTable,
    classes: &[i64],
) -> Result<Vec<ScoredPrediction>> {
    if h.nrows() != node_ids.len() || node_ids.len() != true_classes.len() {
        return Err(Error::shape("score_rows inputs disagree in length"));
    }
    h.outer_iter()
        .zip(node_ids.iter().zip(true_classes))
        .map(|(row, (&node_id, &true_class))| {
            let (open_score, predicted_class) = open_set_score(row, table, classes)?;
            Ok(ScoredPrediction {
                node_id,
                predicted_class,
                open_score,
                true_class,
            })
        })
        .collect()
}

/// Fraction of known-class predictions that are correct. Unknown-class
/// entries are ignored.
pub fn closed_set_accuracy(preds: &[ScoredPrediction]) -> Result<f64> {
    let known: Vec<_> = preds.iter().filter(|p| p.true_class.is_some()).collect();
    if known.is_empty() {
        return Err(Error::invalid("accuracy of an empty known set"));
    }
    Ok(known.iter().filter(|p| p.is_correct()).count() as f64 / known.len() as f64)
}

fn check_scores(name: &str, scores: impl IntoIterator<Item = f64>) -> Result<usize> {
    let mut n = 0;
    for s in scores {
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("{name} score {s}")));
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid(format!("no {name} scores")));
    }
    Ok(n)
}

/// Mann–Whitney estimate of P(known > unknown) + ½ P(tie).
pub fn auc_roc(known: &[f64], unknown: &[f64]) -> Result<f64> {
    let nk = check_scores("known", known.iter().copied())?;
    let nu = check_scores("unknown", unknown.iter().copied())?;
    let mut all: Vec<(f64, bool)> = known
        .iter()
        .map(|&s| (s, true))
        .chain(unknown.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the count of (known, unknown) pairs, ties counted once.
    let mut doubled: u128 = 0;
    let mut unknown_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let k = all[i..j].iter().filter(|e| e.1).count() as u128;
        let u = (j - i) as u128 - k;
        doubled += k * (2 * unknown_below + u);
        unknown_below += u;
        i = j;
    }
    Ok(doubled as f64 / (2 * nk as u128 * nu as u128) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fpr: f64,
    pub ccr: f64,
}

/// Area under the CCR–FPR curve and the curve itself, ordered by FPR.
pub fn oscr(known: &[(f64, bool)], unknown: &[f64]) -> Result<(f64, Vec<CurvePoint>)> {
    let nk = check_scores("known", known.iter().map(|k| k.0))?;
    let nu = check_scores("unknown", unknown.iter().copied())?;

    // Walking thresholds from +∞ downward, both counts only grow.
    let mut events: Vec<(f64, bool, bool)> = known
        .iter()
        .map(|&(s, ok)| (s, true, ok))
        .chain(unknown.iter().map(|&s| (s, false, false)))
        .collect();
    events.sort_by(|a, b| b.0.total_cmp(&a.0));

    // (unknown above τ, correct known above τ), starting with τ = +∞.
    let mut counts: Vec<(u128, u128)> = vec![(0, 0)];
    let (mut fp, mut cc) = (0u128, 0u128);
    let mut i = 0;
    while i < events.len() {
        let s = events[i].0;
        // τ = s: only scores strictly above s count, which is the state
        // before consuming this group.
        counts.push((fp, cc));
        while i < events.len() && events[i].0 == s {
            match events[i] {
                (_, false, _) => fp += 1,
                (_, true, true) => cc += 1,
                _ => {}
            }
            i += 1;
        }
    }
    counts.push((fp, cc));
    counts.dedup();

    let mut doubled: u128 = 0;
    for w in counts.windows(2) {
        doubled += (w[1].0 - w[0].0) * (w[0].1 + w[1].1);
    }
    let area = doubled as f64 / (2 * nk as u128 * nu as u128) as f64;
    let curve = counts
        .iter()
        .map(|&(f, c)| CurvePoint {
            fpr: f as f64 / nu as f64,
            ccr: c as f64 / nk as f64,
        })
        .collect();
    Ok((area, curve))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task_index: usize,
    pub oscr: f64,
    pub closed_acc: f64,
    pub auc: f64,
    pub num_known: usize,
    pub num_unknown: usize,
    pub curve: Vec<CurvePoint>,
}

impl MetricsReport {
    /// Checks the ranges and `oscr ≤ closed_acc`.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("oscr", self.oscr), ("closed_acc", self.closed_acc), ("auc", self.auc)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("task {}: {name} = {v} outside [0, 1]", self.task_index)));
            }
        }
        if self.oscr > self.closed_acc {
            return Err(Error::invalid(format!(
                "task {}: oscr {} exceeds closed-set accuracy {}",
                self.task_index, self.oscr, self.closed_acc
            )));
        }
        Ok(())
    }

    /// Two tab-separated columns, FPR then CCR, with a header line.
    pub fn curve_text(&self) -> String {
        let mut out = String::from("fpr\tccr\n");
        for p in &self.curve {
            let _ = writeln!(out, "{}\t{}", p.fpr, p.ccr);
        }
        out
    }
}

/// Builds and validates the report for one task's predictions.
pub fn evaluate(task_index: usize, preds: &[ScoredPrediction]) -> Result<MetricsReport> {
    let known: Vec<(f64, bool)> = preds
        .iter()
        .filter(|p| p.true_class.is_some())
        .map(|p| (p.open_score, p.is_correct()))
        .collect();
    let unknown: Vec<f64> = preds.iter().filter(|p| p.true_class.is_none()).map(|p| p.open_score).collect();
    let closed_acc = closed_set_accuracy(preds)?;
    let known_scores: Vec<f64> = known.iter().map(|k| k.0).collect();
    let auc = auc_roc(&known_scores, &unknown)?;
    let (area, curve) = oscr(&known, &unknown)?;
    let report = MetricsReport {
        task_index,
        oscr: area,
        closed_acc,
        auc,
        num_known: known.len(),
        num_unknown: unknown.len(),
        curve,
    };
    report.validate()?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricTriple {
    pub oscr: f64,
    pub closed_acc: f64,
    pub auc: f64,
}

/// Sequence-level averages: uniform over tasks and weighted by test size.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SequenceAverages {
    pub uniform: MetricTriple,
    pub size_weighted: MetricTriple,
}

pub fn average_reports(reports: &[MetricsReport]) -> Result<SequenceAverages> {
    if reports.is_empty() {
        return Err(Error::invalid("no task reports to average"));
    }
    let n = reports.len() as f64;
    let mut uniform = MetricTriple::default();
    let mut weighted = MetricTriple::default();
    let mut total = 0.0;
    for r in reports {
        let w = (r.num_known + r.num_unknown) as f64;
        total += w;
        uniform.oscr += r.oscr / n;
        uniform.closed_acc += r.closed_acc / n;
        uniform.auc += r.auc / n;
        weighted.oscr += r.oscr * w;
        weighted.closed_acc += r.closed_acc * w;
        weighted.auc += r.auc * w;
    }
    weighted.oscr /= total;
    weighted.closed_acc /= total;
    weighted.auc /= total;
    Ok(SequenceAverages {
        uniform,
        size_weighted: weighted,
    })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

use serde::{Deserialize, Serialize};

/// Grading metrics for one evaluation split, each in `[0, 1]` (kappa in
/// `[-1, 1]`).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub ap: f64,
    pub accuracy: f64,
    pub kappa: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 4] = ["auc", "ap", "accuracy", "kappa"];

    pub fn values(&self) -> [f64; 4] {
        [self.auc, self.ap, self.accuracy, self.kappa]
    }

    fn from_values(v: [f64; 4]) -> Self {
        Self {
            auc: v[0],
            ap: v[1],
            accuracy: v[2],
            kappa: v[3],
        }
    }

    /// Arithmetic mean and population standard deviation, per metric.
    pub fn aggregate(all: &[Metrics]) -> (Metrics, Metrics) {
        let n = all.len().max(1) as f64;
        // Offsetting by the first value keeps the mean exact when all values agree.
        let first = all.first().map(Metrics::values).unwrap_or_default();
        let mean: [f64; 4] =
            std::array::from_fn(|k| first[k] + all.iter().map(|m| m.values()[k] - first[k]).sum::<f64>() / n);
        let std: [f64; 4] = std::array::from_fn(|k| {
            (all.iter().map(|m| (m.values()[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt()
        });
        (Self::from_values(mean), Self::from_values(std))
    }
}

/// Metrics plus the classes left out of the macro averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub metrics: Metrics,
    pub samples: usize,
    /// Classes skipped in AUC/AP because they had no positives (or no
    /// negatives) among the labels.
    pub skipped_classes: Vec<usize>,
}

/// Computes all metrics from per-class probabilities `[n, k]` (row-major).
pub fn compute_metrics(probs: &[f64], labels: &[usize], k: usize) -> MetricsReport {
    let n = labels.len();
    assert_eq!(probs.len(), n * k, "probability matrix does not match labels");
    let preds: Vec<usize> = probs
        .chunks(k)
        .map(|row| (0..k).fold(0, |b, c| if row[c] > row[b] { c } else { b }))
        .collect();
    let mut aucs = Vec::new();
    let mut aps = Vec::new();
    let mut skipped = Vec::new();
    for c in 0..k {
        let scores: Vec<f64> = probs.chunks(k).map(|r| r[c]).collect();
        let truth: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        match (roc_auc(&scores, &truth), average_precision(&scores, &truth)) {
            (Some(a), Some(p)) => {
                aucs.push(a);
                aps.push(p);
            }
            _ => skipped.push(c),
        }
    }
    if !skipped.is_empty() {
        log::warn!("classes {skipped:?} have no positive or no negative labels; left out of AUC/AP");
    }
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    MetricsReport {
        metrics: Metrics {
            auc: mean(&aucs),
            ap: mean(&aps),
            accuracy: accuracy(&preds, labels),
            kappa: cohen_kappa(&preds, labels, k),
        },
        samples: n,
        skipped_classes: skipped,
    }
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return f64::NAN;
    }
    preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

/// Unweighted Cohen's kappa over `k` classes. When chance agreement is
/// total, returns 1 for perfect agreement and 0 otherwise.
pub fn cohen_kappa(preds: &[usize], labels: &[usize], k: usize) -> f64 {
    let n = labels.len() as f64;
    let mut conf = vec![0.0; k * k];
    for (&p, &y) in preds.iter().zip(labels) {
        conf[y * k + p] += 1.0;
    }
    let po = (0..k).map(|i| conf[i * k + i]).sum::<f64>() / n;
    let pe = (0..k)
        .map(|i| {
            let row: f64 = (0..k).map(|j| conf[i * k + j]).sum();
            let col: f64 = (0..k).map(|j| conf[j * k + i]).sum();
            row * col
        })
        .sum::<f64>()
        / (n * n);
    if pe >= 1.0 {
        return if po >= 1.0 { 1.0 } else { 0.0 };
    }
    (po - pe) / (1.0 - pe)
}

/// Indices sorted by descending score, grouped into runs of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Area under the ROC curve by the trapezoidal rule, one ROC point per
/// distinct score. `None` if either class is empty.
pub fn roc_auc(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let pos = truth.iter().filter(|&&t| t).count() as f64;
    let neg = truth.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return None;
    }
    let (mut tp, mut area) = (0.0, 0.0);
    for g in tie_groups(scores) {
        let dp = g.iter().filter(|&&i| truth[i]).count() as f64;
        let dn = g.len() as f64 - dp;
        area += dn / neg * (2.0 * tp + dp) / (2.0 * pos);
        tp += dp;
    }
    Some(area)
}

/// Step-wise area under the precision-recall curve,
/// `Σ (R_t - R_{t-1}) · P_t` over distinct score thresholds.
pub fn average_precision(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let pos = truth.iter().filter(|&&t| t).count() as f64;
    if pos == 0.0 || pos == truth.len() as f64 {
        return None;
    }
    let (mut tp, mut seen, mut ap) = (0.0, 0.0, 0.0);
    for g in tie_groups(scores) {
        let dp = g.iter().filter(|&&i| truth[i]).count() as f64;
        tp += dp;
        seen += g.len() as f64;
        ap += dp / pos * (tp / seen);
    }
    Some(ap)
}

//! Evaluation suite: confusion matrix, per-class and macro
//! accuracy/specificity/sensitivity/precision/F1, one-vs-rest macro AUC,
//! Top-k accuracy, and bootstrap confidence intervals.
//!
//! Conventions (documented, deterministic):
//! * rates are percentages in [0, 100];
//! * zero-denominator metrics report 0 and set a degeneracy flag;
//! * macro averages are unweighted class means (micro Sen/Spe are also
//!   reported for reference);
//! * Top-k ties break toward the lower class index;
//! * AUC is the rank statistic with ties contributing 1/2; classes without
//!   both positives and negatives are skipped and flagged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct ClassMetrics {
    pub specificity: f64,
    pub sensitivity: f64,
    pub precision: f64,
    pub f1: f64,
    /// Set when any of the rates had a zero denominator.
    pub degenerate: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct MacroMetrics {
    pub accuracy: f64,
    pub specificity: f64,
    pub sensitivity: f64,
    pub precision: f64,
    pub f1: f64,
    pub auc: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct MicroMetrics {
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Full evaluation report for one cohort.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    /// Row = true class, column = predicted class.
    pub confusion: Vec<Vec<u64>>,
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: MacroMetrics,
    pub micro_avg: MicroMetrics,
    /// k -> accuracy percent.
    #[serde(with = "topk_keys")]
    pub topk: BTreeMap<usize, f64>,
    /// Classes skipped by the AUC for degenerate support.
    pub auc_skipped: Vec<usize>,
    /// metric name -> (low, high) 95% bounds, when bootstrapped.
    #[serde(default)]
    pub ci: BTreeMap<String, (f64, f64)>,
    pub samples: u64,
}

/// TOML maps need string keys; bridge the `k -> percent` map through
/// stringified keys.
mod topk_keys {
    use std::collections::BTreeMap;

    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<usize, f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(map.iter().map(|(k, v)| (k.to_string(), *v)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, f64>, D::Error> {
        let raw = BTreeMap::<String, f64>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, v)| {
                k.parse::<usize>()
                    .map(|k| (k, v))
                    .map_err(|_| D::Error::custom(format!("non-integer top-k key {k:?}")))
            })
            .collect()
    }
}

/// Count matrix with entry (t, p) = samples of true class t predicted p.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if classes == 0 {
        return Err(Error::Contract("confusion matrix needs at least one class".into()));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(Error::Contract(format!(
                "entry (label {l}, pred {p}) out of {classes} classes"
            )));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Per-class and macro metrics from a confusion matrix.
pub fn classification_metrics(
    confusion: &[Vec<u64>],
) -> Result<(Vec<ClassMetrics>, MacroMetrics, MicroMetrics)> {
    let classes = confusion.len();
    if classes == 0 {
        return Err(Error::Contract("empty confusion matrix".into()));
    }
    let total: u64 = confusion.iter().map(|r| r.iter().sum::<u64>()).sum();
    if total == 0 {
        return Err(Error::Contract("confusion matrix counts no samples".into()));
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut correct = 0u64;
    let (mut micro_tp, mut micro_fn, mut micro_tn, mut micro_fp) = (0u64, 0u64, 0u64, 0u64);
    for c in 0..classes {
        let tp = confusion[c][c];
        let fn_ = confusion[c].iter().sum::<u64>() - tp;
        let fp = (0..classes).map(|r| confusion[r][c]).sum::<u64>() - tp;
        let tn = total - tp - fn_ - fp;
        correct += tp;
        micro_tp += tp;
        micro_fn += fn_;
        micro_tn += tn;
        micro_fp += fp;
        let mut degenerate = false;
        let mut rate = |num: u64, den: u64| -> f64 {
            if den == 0 {
                degenerate = true;
                0.0
            } else {
                100.0 * num as f64 / den as f64
            }
        };
        let sensitivity = rate(tp, tp + fn_);
        let specificity = rate(tn, tn + fp);
        let precision = rate(tp, tp + fp);
        let f1 = if precision + sensitivity == 0.0 {
            degenerate = true;
            0.0
        } else {
            2.0 * precision * sensitivity / (precision + sensitivity)
        };
        per_class.push(ClassMetrics { specificity, sensitivity, precision, f1, degenerate });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| -> f64 {
        per_class.iter().map(f).sum::<f64>() / classes as f64
    };
    let macro_avg = MacroMetrics {
        accuracy: 100.0 * correct as f64 / total as f64,
        specificity: mean(|c| c.specificity),
        sensitivity: mean(|c| c.sensitivity),
        precision: mean(|c| c.precision),
        f1: mean(|c| c.f1),
        auc: 0.0,
    };
    let micro_avg = MicroMetrics {
        sensitivity: 100.0 * micro_tp as f64 / (micro_tp + micro_fn) as f64,
        specificity: 100.0 * micro_tn as f64 / (micro_tn + micro_fp) as f64,
    };
    Ok((per_class, macro_avg, micro_avg))
}

/// Fraction (percent) of samples whose label is among the k highest scores;
/// ties break toward the lower class index.
pub fn topk_accuracy(scores: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    let classes = scores.first().map(|r| r.len()).unwrap_or(0);
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Contract("scores/labels length mismatch or empty".into()));
    }
    if k == 0 || k > classes {
        return Err(Error::Contract(format!("k = {k} outside [1, {classes}]")));
    }
    let mut hits = 0usize;
    for (row, &label) in scores.iter().zip(labels) {
        if row.len() != classes {
            return Err(Error::Contract("ragged score matrix".into()));
        }
        // rank = number of classes strictly better, plus equal-scored
        // classes with a lower index.
        let ls = row[label];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(c, &s)| s > ls || (s == ls && c < label))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Predicted class per row under the same tie policy as Top-1.
pub fn argmax_preds(scores: &[Vec<f64>]) -> Vec<usize> {
    scores
        .iter()
        .map(|row| {
            let mut best = 0usize;
            for (c, &s) in row.iter().enumerate() {
                if s > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// One-vs-rest rank AUC for a single class; `None` when the class lacks
/// positives or negatives.
fn class_auc(scores: &[Vec<f64>], labels: &[usize], class: usize) -> Option<f64> {
    let mut pairs: Vec<(f64, bool)> = scores
        .iter()
        .zip(labels)
        .map(|(row, &l)| (row[class], l == class))
        .collect();
    let positives = pairs.iter().filter(|(_, p)| *p).count();
    let negatives = pairs.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // Average ranks over ties, then the Mann-Whitney statistic.
    let n = pairs.len();
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pairs[j + 1].0 == pairs[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for item in pairs.iter().take(j + 1).skip(i) {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let q = negatives as f64;
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

/// Unweighted mean of the per-class one-vs-rest AUCs, in percent, plus the
/// skipped class list.
pub fn macro_auc(scores: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<usize>)> {
    let classes = scores.first().map(|r| r.len()).unwrap_or(0);
    if classes == 0 || scores.len() != labels.len() {
        return Err(Error::Contract("scores/labels mismatch".into()));
    }
    let mut aucs = Vec::new();
    let mut skipped = Vec::new();
    for c in 0..classes {
        match class_auc(scores, labels, c) {
            Some(a) => aucs.push(a),
            None => skipped.push(c),
        }
    }
    if aucs.is_empty() {
        return Err(Error::Eval("every class has degenerate support; AUC undefined".into()));
    }
    Ok((100.0 * aucs.iter().sum::<f64>() / aucs.len() as f64, skipped))
}

/// Metric selector for the bootstrap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricKind {
    Accuracy,
    MacroF1,
    MacroAuc,
    TopK(usize),
}

impl MetricKind {
    pub fn name(&self) -> String {
        match self {
            MetricKind::Accuracy => "accuracy".into(),
            MetricKind::MacroF1 => "macro_f1".into(),
            MetricKind::MacroAuc => "macro_auc".into(),
            MetricKind::TopK(k) => format!("top{k}_accuracy"),
        }
    }

    pub fn compute(&self, scores: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<f64> {
        match self {
            MetricKind::Accuracy => {
                let preds = argmax_preds(scores);
                let m = confusion_matrix(&preds, labels, classes)?;
                Ok(classification_metrics(&m)?.1.accuracy)
            }
            MetricKind::MacroF1 => {
                let preds = argmax_preds(scores);
                let m = confusion_matrix(&preds, labels, classes)?;
                Ok(classification_metrics(&m)?.1.f1)
            }
            MetricKind::MacroAuc => Ok(macro_auc(scores, labels)?.0),
            MetricKind::TopK(k) => topk_accuracy(scores, labels, *k),
        }
    }
}

/// Percentile bootstrap (2.5/97.5) over case-level resamples, deterministic
/// per seed. Resamples where the metric is undefined are skipped.
pub fn bootstrap_ci(
    scores: &[Vec<f64>],
    labels: &[usize],
    metric: MetricKind,
    resamples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if resamples < 100 {
        return Err(Error::Contract(format!("bootstrap needs >= 100 resamples, got {resamples}")));
    }
    let classes = scores.first().map(|r| r.len()).unwrap_or(0);
    let n = labels.len();
    let mut values = Vec::with_capacity(resamples);
    for b in 0..resamples {
        let mut rng = Rng::for_component(seed, &format!("bootstrap/{b}"));
        let idx: Vec<usize> = (0..n).map(|_| rng.below(n)).collect();
        let s: Vec<Vec<f64>> = idx.iter().map(|&i| scores[i].clone()).collect();
        let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        if let Ok(v) = metric.compute(&s, &l, classes) {
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(Error::Eval("metric undefined on every bootstrap resample".into()));
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let percentile = |q: f64| -> f64 {
        let pos = q * (values.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        values[lo] * (1.0 - frac) + values[hi] * frac
    };
    Ok((percentile(0.025), percentile(0.975)))
}

/// Assemble a full report from a score matrix.
pub fn evaluate(
    scores: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    topk: &[usize],
    bootstrap: Option<(usize, u64)>,
) -> Result<EvalReport> {
    let preds = argmax_preds(scores);
    let confusion = confusion_matrix(&preds, labels, classes)?;
    let (per_class, mut macro_avg, micro_avg) = classification_metrics(&confusion)?;
    let (auc, auc_skipped) = match macro_auc(scores, labels) {
        Ok((a, s)) => (a, s),
        Err(_) => (0.0, (0..classes).collect()),
    };
    macro_avg.auc = auc;
    let mut topk_map = BTreeMap::new();
    for &k in topk {
        if k >= 1 && k <= classes {
            topk_map.insert(k, topk_accuracy(scores, labels, k)?);
        }
    }
    let mut ci = BTreeMap::new();
    if let Some((b, seed)) = bootstrap {
        for metric in [MetricKind::Accuracy, MetricKind::MacroF1, MetricKind::MacroAuc] {
            if let Ok(bounds) = bootstrap_ci(scores, labels, metric, b, seed) {
                ci.insert(metric.name(), bounds);
            }
        }
    }
    Ok(EvalReport {
        confusion,
        per_class,
        macro_avg,
        micro_avg,
        topk: topk_map,
        auc_skipped,
        ci,
        samples: labels.len() as u64,
    })
}

impl EvalReport {
    /// Text table in the reporting layout: one row of macro metrics plus
    /// Top-k rows.
    pub fn render(&self, title: &str) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{title} (n={})\n  ACC     Spe     Sen     P       F1      AUC\n",
            self.samples
        ));
        out.push_str(&format!(
            "  {:<7.2} {:<7.2} {:<7.2} {:<7.2} {:<7.2} {:<7.2}\n",
            self.macro_avg.accuracy,
            self.macro_avg.specificity,
            self.macro_avg.sensitivity,
            self.macro_avg.precision,
            self.macro_avg.f1,
            self.macro_avg.auc
        ));
        for (k, v) in &self.topk {
            out.push_str(&format!("  Top-{k} accuracy: {v:.2}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_give_diagonal_and_100s() {
        let labels = vec![0, 1, 1, 2, 2, 2];
        let m = confusion_matrix(&labels, &labels, 3).unwrap();
        assert_eq!(m, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 3]]);
        let (per, macro_avg, micro) = classification_metrics(&m).unwrap();
        for c in &per {
            assert_eq!(c.sensitivity, 100.0);
            assert_eq!(c.precision, 100.0);
            assert!(!c.degenerate);
        }
        assert_eq!(macro_avg.accuracy, 100.0);
        assert_eq!(micro.sensitivity, 100.0);
    }

    #[test]
    fn anti_diagonal_two_class_case() {
        let m = confusion_matrix(&[1, 0], &[0, 1], 2).unwrap();
        assert_eq!(m, vec![vec![0, 1], vec![1, 0]]);
    }

    /// Hand-computed case: confusion [[1,1],[0,2]].
    #[test]
    fn hand_confusion_metrics() {
        let m = vec![vec![1u64, 1], vec![0, 2]];
        let (per, macro_avg, _) = classification_metrics(&m).unwrap();
        assert!((per[0].sensitivity - 50.0).abs() < 1e-12);
        assert!((per[0].precision - 100.0).abs() < 1e-12);
        assert!((per[1].sensitivity - 100.0).abs() < 1e-12);
        assert!((per[1].precision - 200.0 / 3.0).abs() < 1e-12);
        assert!((macro_avg.accuracy - 75.0).abs() < 1e-12);
    }

    #[test]
    fn never_predicted_class_flags_degeneracy() {
        // Class 1 never predicted: precision denominator 0.
        let m = confusion_matrix(&[0, 0], &[0, 1], 2).unwrap();
        let (per, _, _) = classification_metrics(&m).unwrap();
        assert_eq!(per[1].precision, 0.0);
        assert!(per[1].degenerate);
    }

    #[test]
    fn confusion_matches_brute_force_loop() {
        let mut rng = Rng::new(1);
        let labels: Vec<usize> = (0..500).map(|_| rng.below(5)).collect();
        let preds: Vec<usize> = (0..500).map(|_| rng.below(5)).collect();
        let m = confusion_matrix(&preds, &labels, 5).unwrap();
        for t in 0..5 {
            for p in 0..5 {
                let want = labels
                    .iter()
                    .zip(&preds)
                    .filter(|(&l, &q)| l == t && q == p)
                    .count() as u64;
                assert_eq!(m[t][p], want);
            }
        }
    }

    #[test]
    fn topk_edges_and_sort_oracle() {
        let mut rng = Rng::new(2);
        let scores: Vec<Vec<f64>> =
            (0..200).map(|_| (0..6).map(|_| rng.normal()).collect()).collect();
        let labels: Vec<usize> = (0..200).map(|_| rng.below(6)).collect();
        // k = C always 100.
        assert_eq!(topk_accuracy(&scores, &labels, 6).unwrap(), 100.0);
        // Label argmax everywhere: top-1 = 100.
        let winning: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..6).map(|c| if c == l { 5.0 } else { 0.0 }).collect())
            .collect();
        assert_eq!(topk_accuracy(&winning, &labels, 1).unwrap(), 100.0);
        // Sort-based oracle with the same tie policy.
        for k in 1..=6 {
            let mut hits = 0;
            for (row, &l) in scores.iter().zip(&labels) {
                let mut order: Vec<usize> = (0..6).collect();
                order.sort_by(|&a, &b| {
                    row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b))
                });
                if order[..k].contains(&l) {
                    hits += 1;
                }
            }
            let want = 100.0 * hits as f64 / 200.0;
            assert_eq!(topk_accuracy(&scores, &labels, k).unwrap(), want, "k = {k}");
        }
        // Monotonic in k.
        let mut prev = 0.0;
        for k in 1..=6 {
            let v = topk_accuracy(&scores, &labels, k).unwrap();
            assert!(v >= prev);
            prev = v;
        }
        assert!(topk_accuracy(&scores, &labels, 0).is_err());
        assert!(topk_accuracy(&scores, &labels, 7).is_err());
    }

    #[test]
    fn auc_hand_cases() {
        // labels [0,0,1], class-1 scores [0.1, 0.4, 0.9] -> AUC 100.
        let scores = vec![vec![0.9, 0.1], vec![0.6, 0.4], vec![0.1, 0.9]];
        let labels = vec![0, 0, 1];
        let a = class_auc(&scores, &labels, 1).unwrap();
        assert!((a - 1.0).abs() < 1e-12);
        // class-1 scores [0.9, 0.4, 0.4]: one tie counts 1/2 of one of two
        // pairs -> AUC 25.
        let scores = vec![vec![0.1, 0.9], vec![0.6, 0.4], vec![0.6, 0.4]];
        let a = class_auc(&scores, &labels, 1).unwrap();
        assert!((a - 0.25).abs() < 1e-12);
    }

    #[test]
    fn auc_is_50_for_label_independent_scores() {
        for seed in [3u64, 4, 5] {
            let mut rng = Rng::new(seed);
            let scores: Vec<Vec<f64>> =
                (0..2000).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
            let labels: Vec<usize> = (0..2000).map(|_| rng.below(3)).collect();
            let (auc, skipped) = macro_auc(&scores, &labels).unwrap();
            assert!(skipped.is_empty());
            assert!((auc - 50.0).abs() < 3.0, "seed {seed}: auc {auc}");
        }
    }

    #[test]
    fn perfectly_separating_scores_reach_100() {
        let labels = vec![0, 0, 1, 1];
        let scores = vec![
            vec![0.9, 0.1],
            vec![0.8, 0.2],
            vec![0.2, 0.8],
            vec![0.1, 0.9],
        ];
        let (auc, _) = macro_auc(&scores, &labels).unwrap();
        assert_eq!(auc, 100.0);
    }

    #[test]
    fn degenerate_auc_errors_when_all_classes_lack_support() {
        let scores = vec![vec![0.5, 0.5]; 3];
        let labels = vec![0, 0, 0];
        // Class 0 has no negatives, class 1 no positives -> both skipped.
        assert!(macro_auc(&scores, &labels).is_err());
    }

    #[test]
    fn bootstrap_is_deterministic_and_brackets_constant_metric() {
        // Perfectly separable scores: accuracy is 100 on every resample.
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let scores: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| if l == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
            .collect();
        let (lo, hi) = bootstrap_ci(&scores, &labels, MetricKind::Accuracy, 200, 9).unwrap();
        assert_eq!(lo, 100.0);
        assert_eq!(hi, 100.0);
        let again = bootstrap_ci(&scores, &labels, MetricKind::Accuracy, 200, 9).unwrap();
        assert_eq!((lo, hi), again);
        assert!(bootstrap_ci(&scores, &labels, MetricKind::Accuracy, 50, 9).is_err());
    }

    #[test]
    fn ci_contains_point_estimate_for_random_trials() {
        let mut rng = Rng::new(10);
        for trial in 0..1000 {
            let n = 40;
            let labels: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
            let scores: Vec<Vec<f64>> = labels
                .iter()
                .map(|&l| {
                    (0..3)
                        .map(|c| if c == l { 0.6 + 0.4 * rng.uniform() } else { rng.uniform() })
                        .collect()
                })
                .collect();
            let point = MetricKind::Accuracy.compute(&scores, &labels, 3).unwrap();
            let (lo, hi) =
                bootstrap_ci(&scores, &labels, MetricKind::Accuracy, 100, trial).unwrap();
            assert!(lo <= point + 1e-9 && point - 1e-9 <= hi, "trial {trial}: {lo} {point} {hi}");
        }
    }

    #[test]
    fn permuting_sample_order_changes_nothing() {
        let mut rng = Rng::new(11);
        let labels: Vec<usize> = (0..100).map(|_| rng.below(4)).collect();
        let scores: Vec<Vec<f64>> =
            (0..100).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let rep = evaluate(&scores, &labels, 4, &[1, 2, 3], None).unwrap();
        let mut perm: Vec<usize> = (0..100).collect();
        rng.shuffle(&mut perm);
        let ps: Vec<Vec<f64>> = perm.iter().map(|&i| scores[i].clone()).collect();
        let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let rep2 = evaluate(&ps, &pl, 4, &[1, 2, 3], None).unwrap();
        assert_eq!(rep, rep2);
    }

    #[test]
    fn report_round_trips_through_toml() {
        let mut rng = Rng::new(12);
        let labels: Vec<usize> = (0..30).map(|_| rng.below(3)).collect();
        let scores: Vec<Vec<f64>> =
            (0..30).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let rep = evaluate(&scores, &labels, 3, &[1, 2, 3], Some((150, 5))).unwrap();
        let text = toml::to_string_pretty(&rep).unwrap();
        let back: EvalReport = toml::from_str(&text).unwrap();
        assert_eq!(rep, back);
    }

    #[test]
    fn report_renders_topk_rows() {
        let labels = vec![0, 1];
        let scores = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let rep = evaluate(&scores, &labels, 2, &[1, 2], None).unwrap();
        let text = rep.render("internal");
        assert!(text.contains("Top-1") && text.contains("Top-2"), "{text}");
    }
}

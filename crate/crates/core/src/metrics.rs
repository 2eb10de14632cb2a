//! Evaluation metrics for the dual-head model: the abstention gate that
//! turns probabilities plus uncertainty into three-way decisions,
//! rank-based AUC (per class, macro, and micro), selective accuracy,
//! uncertainty recall, per-class confusion counts, energy scores for
//! out-of-distribution separation, logit ensembling, and a serializable
//! report.

use serde::{Deserialize, Serialize};

use crate::data::{LabelCode, LabelMatrix};
use crate::tensor::Tensor;

/// Three-way decisions for a batch: +1 positive, 0 negative, -1 abstain,
/// stored row-major over [N, C] together with the inputs that produced
/// them.
#[derive(Debug, Clone)]
pub struct Decisions {
    pub n: usize,
    pub c: usize,
    pub values: Vec<i8>,
    pub probs: Vec<f64>,
    pub u: Vec<f64>,
    pub tau: f64,
}

impl Decisions {
    pub fn value(&self, sample: usize, class: usize) -> i8 {
        self.values[sample * self.c + class]
    }
}

/// Applies the abstention gate: a prediction abstains exactly when its
/// uncertainty strictly exceeds `tau`; otherwise it is positive when the
/// probability exceeds one half.
pub fn abstention_gate(probs: &Tensor, u: &Tensor, tau: f64) -> Decisions {
    let shape = probs.shape();
    assert_eq!(shape, u.shape(), "gate inputs must share a shape");
    assert_eq!(shape.len(), 2, "gate expects [N, C], got {shape:?}");
    let (n, c) = (shape[0], shape[1]);
    let values = probs
        .data()
        .iter()
        .zip(u.data())
        .map(|(&p, &uv)| {
            if uv > tau {
                -1
            } else if p > 0.5 {
                1
            } else {
                0
            }
        })
        .collect();
    Decisions {
        n,
        c,
        values,
        probs: probs.data().to_vec(),
        u: u.data().to_vec(),
        tau,
    }
}

/// Probability that a random positive outranks a random negative, with
/// ties counting one half, computed from average ranks. Returns `None`
/// when either class is missing.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let n = scores.len();
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(&r, _)| r)
        .sum();
    let p = pos as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// AUC for one class column over its definite-label entries.
pub fn per_class_auc(scores: &Tensor, labels: &LabelMatrix, class: usize) -> Option<f64> {
    let c = labels.classes();
    let mut s = Vec::new();
    let mut pos = Vec::new();
    for i in 0..labels.n() {
        match labels.get(i, class) {
            LabelCode::Pos => {
                s.push(scores.data()[i * c + class]);
                pos.push(true);
            }
            LabelCode::Neg => {
                s.push(scores.data()[i * c + class]);
                pos.push(false);
            }
            LabelCode::Unc | LabelCode::Blank => {}
        }
    }
    auc(&s, &pos)
}

/// Pools every definite (sample, class) pair into one binary problem.
pub fn micro_auc(scores: &Tensor, labels: &LabelMatrix) -> Option<f64> {
    let c = labels.classes();
    let mut s = Vec::new();
    let mut pos = Vec::new();
    for i in 0..labels.n() {
        for class in 0..c {
            match labels.get(i, class) {
                LabelCode::Pos => {
                    s.push(scores.data()[i * c + class]);
                    pos.push(true);
                }
                LabelCode::Neg => {
                    s.push(scores.data()[i * c + class]);
                    pos.push(false);
                }
                LabelCode::Unc | LabelCode::Blank => {}
            }
        }
    }
    auc(&s, &pos)
}

/// Mean of the defined per-class AUC values; `None` when every class is
/// degenerate.
pub fn mean_auc(per_class: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Accuracy over confidently decided entries and the fraction of definite
/// entries that received a decision.
///
/// Ground-truth uncertain entries have no binary answer, so by default a
/// confident prediction on one neither helps nor hurts. With
/// `strict_uncertain` they count as errors instead, shrinking accuracy.
pub fn selective_accuracy(
    decisions: &Decisions,
    labels: &LabelMatrix,
    strict_uncertain: bool,
) -> (Option<f64>, f64) {
    assert_eq!(decisions.n, labels.n());
    assert_eq!(decisions.c, labels.classes());
    let mut definite = 0usize;
    let mut covered = 0usize;
    let mut judged = 0usize;
    let mut correct = 0usize;
    for i in 0..decisions.n {
        for class in 0..decisions.c {
            let value = decisions.value(i, class);
            match labels.get(i, class) {
                LabelCode::Pos | LabelCode::Neg => {
                    definite += 1;
                    if value != -1 {
                        covered += 1;
                        judged += 1;
                        let truth = labels.get(i, class) == LabelCode::Pos;
                        if (value == 1) == truth {
                            correct += 1;
                        }
                    }
                }
                LabelCode::Unc => {
                    if strict_uncertain && value != -1 {
                        judged += 1;
                    }
                }
                LabelCode::Blank => {}
            }
        }
    }
    let coverage = if definite == 0 {
        0.0
    } else {
        covered as f64 / definite as f64
    };
    let acc = if judged == 0 {
        None
    } else {
        Some(correct as f64 / judged as f64)
    };
    (acc, coverage)
}

/// Fraction of ground-truth uncertain entries the model abstained on;
/// `None` when the ground truth contains no uncertain entries.
pub fn uncertainty_recall(decisions: &Decisions, labels: &LabelMatrix) -> Option<f64> {
    assert_eq!(decisions.n, labels.n());
    assert_eq!(decisions.c, labels.classes());
    let mut unc = 0usize;
    let mut caught = 0usize;
    for i in 0..decisions.n {
        for class in 0..decisions.c {
            if labels.get(i, class) == LabelCode::Unc {
                unc += 1;
                if decisions.value(i, class) == -1 {
                    caught += 1;
                }
            }
        }
    }
    if unc == 0 {
        None
    } else {
        Some(caught as f64 / unc as f64)
    }
}

/// Free energy per sample, -log sum_c exp(z_c), in the max-shifted form
/// that survives logits of any magnitude. Values nearer zero (less
/// negative) indicate lower total confidence.
pub fn energy_score(logits: &Tensor) -> Vec<f64> {
    let shape = logits.shape();
    assert_eq!(shape.len(), 2, "energy expects [N, C], got {shape:?}");
    let (n, c) = (shape[0], shape[1]);
    (0..n)
        .map(|i| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&z| (z - m).exp()).sum();
            -(m + sum.ln())
        })
        .collect()
}

/// Per-class confusion counts over definite-label, non-abstained entries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fneg: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fneg
    }
}

pub fn binary_confusion(decisions: &Decisions, labels: &LabelMatrix) -> Vec<Confusion> {
    assert_eq!(decisions.n, labels.n());
    assert_eq!(decisions.c, labels.classes());
    let mut out = vec![Confusion::default(); decisions.c];
    for i in 0..decisions.n {
        for class in 0..decisions.c {
            let value = decisions.value(i, class);
            if value == -1 {
                continue;
            }
            match (labels.get(i, class), value == 1) {
                (LabelCode::Pos, true) => out[class].tp += 1,
                (LabelCode::Pos, false) => out[class].fneg += 1,
                (LabelCode::Neg, true) => out[class].fp += 1,
                (LabelCode::Neg, false) => out[class].tn += 1,
                _ => {}
            }
        }
    }
    out
}

/// Element-wise mean of several runs' logits.
pub fn ensemble_logits(runs: &[Tensor]) -> Tensor {
    assert!(!runs.is_empty(), "ensemble needs at least one run");
    let shape = runs[0].shape().to_vec();
    for r in runs {
        assert_eq!(r.shape(), shape, "ensemble runs must share a shape");
    }
    let inv = 1.0 / runs.len() as f64;
    Tensor::from_fn(shape, |i| runs.iter().map(|r| r.data()[i]).sum::<f64>() * inv)
}

/// Linear-interpolation percentile of an unsorted slice, p in [0, 100].
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let rank = (p / 100.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Location summary of one split's energy values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySummary {
    pub split: String,
    pub count: usize,
    pub mean: f64,
    pub p5: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
}

pub fn summarize_energy(split: &str, values: &[f64]) -> EnergySummary {
    assert!(!values.is_empty(), "energy summary of an empty split");
    EnergySummary {
        split: split.into(),
        count: values.len(),
        mean: values.iter().sum::<f64>() / values.len() as f64,
        p5: percentile(values, 5.0),
        p25: percentile(values, 25.0),
        p50: percentile(values, 50.0),
        p75: percentile(values, 75.0),
        p95: percentile(values, 95.0),
    }
}

/// Equal-width histogram over the data range; every value lands in a bin,
/// with the top edge folded into the last bin.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, usize)> {
    assert!(bins > 0, "histogram needs at least one bin");
    assert!(!values.is_empty(), "histogram of an empty slice");
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| (lo + (i as f64 + 0.5) * width, count))
        .collect()
}

/// Renders a histogram as two-column CSV for external plotting.
pub fn histogram_csv(hist: &[(f64, usize)]) -> String {
    let mut out = String::from("bin_center,count\n");
    for (center, count) in hist {
        out.push_str(&format!("{center},{count}\n"));
    }
    out
}

/// Mean uncertainty over ground-truth-uncertain entries and over definite
/// entries, for the separation check on trained models.
pub fn mean_u_by_truth(decisions: &Decisions, labels: &LabelMatrix) -> (Option<f64>, Option<f64>) {
    let mut unc = (0.0, 0usize);
    let mut def = (0.0, 0usize);
    for i in 0..decisions.n {
        for class in 0..decisions.c {
            let u = decisions.u[i * decisions.c + class];
            match labels.get(i, class) {
                LabelCode::Unc => {
                    unc.0 += u;
                    unc.1 += 1;
                }
                LabelCode::Pos | LabelCode::Neg => {
                    def.0 += u;
                    def.1 += 1;
                }
                LabelCode::Blank => {}
            }
        }
    }
    let mean = |acc: (f64, usize)| {
        if acc.1 == 0 {
            None
        } else {
            Some(acc.0 / acc.1 as f64)
        }
    };
    (mean(unc), mean(def))
}

/// Everything one evaluation pass reports, serialized with a stable field
/// order. Undefined metrics serialize as explicit nulls rather than zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tau: f64,
    pub samples: usize,
    pub class_names: Vec<String>,
    pub per_class_auc: Vec<Option<f64>>,
    pub mean_auc: Option<f64>,
    pub micro_auc: Option<f64>,
    pub selective_accuracy: Option<f64>,
    pub selective_accuracy_strict: Option<f64>,
    pub coverage: f64,
    pub uncertainty_recall: Option<f64>,
    pub mean_u_uncertain: Option<f64>,
    pub mean_u_definite: Option<f64>,
    pub confusion: Vec<Confusion>,
    pub energy: Vec<EnergySummary>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Assembles the full report for one split from eval-mode head outputs.
/// Energy summaries are attached separately by callers that evaluate
/// additional splits.
pub fn compute_report(
    probs: &Tensor,
    u: &Tensor,
    labels: &LabelMatrix,
    tau: f64,
) -> MetricsReport {
    let decisions = abstention_gate(probs, u, tau);
    let per_class: Vec<Option<f64>> = (0..labels.classes())
        .map(|c| per_class_auc(probs, labels, c))
        .collect();
    let (acc, coverage) = selective_accuracy(&decisions, labels, false);
    let (acc_strict, _) = selective_accuracy(&decisions, labels, true);
    let (mean_u_unc, mean_u_def) = mean_u_by_truth(&decisions, labels);
    MetricsReport {
        tau,
        samples: labels.n(),
        class_names: labels.class_names.clone(),
        mean_auc: mean_auc(&per_class),
        micro_auc: micro_auc(probs, labels),
        per_class_auc: per_class,
        selective_accuracy: acc,
        selective_accuracy_strict: acc_strict,
        coverage,
        uncertainty_recall: uncertainty_recall(&decisions, labels),
        mean_u_uncertain: mean_u_unc,
        mean_u_definite: mean_u_def,
        confusion: binary_confusion(&decisions, labels),
        energy: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::any;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    fn matrix(codes: Vec<LabelCode>, classes: usize) -> LabelMatrix {
        let names = (0..classes).map(|c| format!("class_{c}")).collect();
        LabelMatrix::new(names, codes)
    }

    fn tensor2(n: usize, c: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![n, c], data)
    }

    #[test]
    fn gate_follows_the_strict_boundary() {
        let probs = tensor2(3, 1, vec![0.9, 0.9, 0.2]);
        let u = tensor2(3, 1, vec![0.5, 0.4, 0.1]);
        let d = abstention_gate(&probs, &u, 0.4);
        assert_eq!(d.values, vec![-1, 1, 0]);
    }

    #[test]
    fn gate_abstains_on_any_probability_when_uncertain() {
        for p in [0.0, 0.3, 0.5, 0.99] {
            let d = abstention_gate(&tensor2(1, 1, vec![p]), &tensor2(1, 1, vec![0.41]), 0.4);
            assert_eq!(d.value(0, 0), -1);
        }
    }

    #[test]
    fn auc_matches_the_worked_example() {
        let got = auc(
            &[0.1, 0.4, 0.35, 0.8],
            &[false, false, true, true],
        )
        .unwrap();
        assert_eq!(got, 0.75);
    }

    #[test]
    fn auc_of_perfect_separation_is_one() {
        let got = auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(got, 1.0);
    }

    #[test]
    fn auc_of_constant_scores_is_half() {
        let got = auc(&[0.5; 6], &[true, false, true, false, true, false]).unwrap();
        assert_eq!(got, 0.5);
    }

    #[test]
    fn auc_single_class_is_absent() {
        assert!(auc(&[0.1, 0.9], &[true, true]).is_none());
        assert!(auc(&[0.1, 0.9], &[false, false]).is_none());
        assert!(auc(&[], &[]).is_none());
    }

    #[test]
    fn auc_on_random_labels_hovers_at_half() {
        let mut rng = Rng::new(99);
        let n = 10_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.chance(0.5)).collect();
        let got = auc(&scores, &labels).unwrap();
        assert!((got - 0.5).abs() < 0.02, "{got}");
    }

    #[test]
    fn rank_auc_equals_pairwise_counting_exactly() {
        let mut rng = Rng::new(7);
        for _ in 0..1000 {
            let n = 2 + rng.below(49) as usize;
            let scores: Vec<f64> = (0..n).map(|_| (rng.below(12) as f64) / 4.0).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.chance(0.5)).collect();
            let fast = auc(&scores, &labels);
            let mut wins = 0.0f64;
            let mut pairs = 0.0f64;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] && !labels[j] {
                        pairs += 1.0;
                        if scores[i] > scores[j] {
                            wins += 1.0;
                        } else if scores[i] == scores[j] {
                            wins += 0.5;
                        }
                    }
                }
            }
            let brute = if pairs == 0.0 { None } else { Some(wins / pairs) };
            assert_eq!(fast, brute);
        }
    }

    #[test]
    fn auc_ignores_monotone_transforms() {
        let mut rng = Rng::new(11);
        let scores: Vec<f64> = (0..40).map(|_| rng.uniform_in(-4.0, 4.0)).collect();
        let labels: Vec<bool> = (0..40).map(|_| rng.chance(0.4)).collect();
        let base = auc(&scores, &labels).unwrap();
        let affine: Vec<f64> = scores.iter().map(|&s| 2.0 * s + 1.0).collect();
        let squashed: Vec<f64> = scores.iter().map(|&s| 1.0 / (1.0 + (-s).exp())).collect();
        assert!((auc(&affine, &labels).unwrap() - base).abs() < 1e-12);
        assert!((auc(&squashed, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn micro_auc_degenerates_to_per_class_for_one_class() {
        let scores = tensor2(4, 1, vec![0.1, 0.4, 0.35, 0.8]);
        let labels = matrix(
            vec![LabelCode::Neg, LabelCode::Neg, LabelCode::Pos, LabelCode::Pos],
            1,
        );
        assert_eq!(
            micro_auc(&scores, &labels),
            per_class_auc(&scores, &labels, 0)
        );
        assert_eq!(micro_auc(&scores, &labels), Some(0.75));
    }

    #[test]
    fn micro_auc_is_invariant_to_column_duplication() {
        let single = tensor2(4, 1, vec![0.2, 0.7, 0.4, 0.9]);
        let codes = vec![LabelCode::Neg, LabelCode::Pos, LabelCode::Neg, LabelCode::Pos];
        let one = matrix(codes.clone(), 1);
        let mut doubled_codes = Vec::new();
        for code in &codes {
            doubled_codes.push(*code);
            doubled_codes.push(*code);
        }
        let two = matrix(doubled_codes, 2);
        let dup = tensor2(4, 2, vec![0.2, 0.2, 0.7, 0.7, 0.4, 0.4, 0.9, 0.9]);
        assert_eq!(micro_auc(&single, &one), micro_auc(&dup, &two));
    }

    #[test]
    fn micro_auc_matches_pooled_brute_force() {
        let mut rng = Rng::new(13);
        let (n, c) = (9, 3);
        let scores = Tensor::from_fn(vec![n, c], |_| (rng.below(8) as f64) / 3.0);
        let codes: Vec<LabelCode> = (0..n * c)
            .map(|_| match rng.below(4) {
                0 => LabelCode::Pos,
                1 => LabelCode::Neg,
                2 => LabelCode::Unc,
                _ => LabelCode::Blank,
            })
            .collect();
        let labels = matrix(codes.clone(), c);
        let fast = micro_auc(&scores, &labels);

        let mut pool: Vec<(f64, bool)> = Vec::new();
        for (i, code) in codes.iter().enumerate() {
            match code {
                LabelCode::Pos => pool.push((scores.data()[i], true)),
                LabelCode::Neg => pool.push((scores.data()[i], false)),
                _ => {}
            }
        }
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for &(si, pi) in &pool {
            for &(sj, pj) in &pool {
                if pi && !pj {
                    pairs += 1.0;
                    wins += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        assert_eq!(fast, Some(wins / pairs));
    }

    #[test]
    fn selective_accuracy_matches_worked_example() {
        let labels = matrix(
            vec![LabelCode::Pos, LabelCode::Pos, LabelCode::Neg, LabelCode::Pos],
            1,
        );
        let d = Decisions {
            n: 4,
            c: 1,
            values: vec![1, 0, -1, 1],
            probs: vec![0.9, 0.2, 0.5, 0.8],
            u: vec![0.1, 0.1, 0.9, 0.1],
            tau: 0.4,
        };
        let (acc, coverage) = selective_accuracy(&d, &labels, false);
        assert_eq!(acc, Some(2.0 / 3.0));
        assert_eq!(coverage, 0.75);
    }

    #[test]
    fn selective_accuracy_when_everything_abstains() {
        let labels = matrix(vec![LabelCode::Pos, LabelCode::Neg], 1);
        let d = Decisions {
            n: 2,
            c: 1,
            values: vec![-1, -1],
            probs: vec![0.9, 0.1],
            u: vec![0.9, 0.9],
            tau: 0.4,
        };
        let (acc, coverage) = selective_accuracy(&d, &labels, false);
        assert_eq!(acc, None);
        assert_eq!(coverage, 0.0);
    }

    #[test]
    fn selective_accuracy_full_coverage_all_correct() {
        let labels = matrix(vec![LabelCode::Pos, LabelCode::Neg], 1);
        let d = Decisions {
            n: 2,
            c: 1,
            values: vec![1, 0],
            probs: vec![0.9, 0.1],
            u: vec![0.1, 0.1],
            tau: 0.4,
        };
        let (acc, coverage) = selective_accuracy(&d, &labels, false);
        assert_eq!(acc, Some(1.0));
        assert_eq!(coverage, 1.0);
    }

    #[test]
    fn strict_variant_counts_confident_uncertain_entries_as_errors() {
        let labels = matrix(vec![LabelCode::Pos, LabelCode::Unc], 1);
        let d = Decisions {
            n: 2,
            c: 1,
            values: vec![1, 1],
            probs: vec![0.9, 0.8],
            u: vec![0.1, 0.1],
            tau: 0.4,
        };
        let (lenient, coverage) = selective_accuracy(&d, &labels, false);
        let (strict, strict_coverage) = selective_accuracy(&d, &labels, true);
        assert_eq!(lenient, Some(1.0));
        assert_eq!(strict, Some(0.5));
        assert_eq!(coverage, 1.0);
        assert_eq!(strict_coverage, 1.0);
    }

    #[test]
    fn uncertainty_recall_worked_examples() {
        let labels = matrix(vec![LabelCode::Unc, LabelCode::Unc, LabelCode::Pos], 1);
        let mk = |values: Vec<i8>| Decisions {
            n: 3,
            c: 1,
            values,
            probs: vec![0.5; 3],
            u: vec![0.5; 3],
            tau: 0.4,
        };
        assert_eq!(uncertainty_recall(&mk(vec![-1, 0, 1]), &labels), Some(0.5));
        assert_eq!(uncertainty_recall(&mk(vec![-1, -1, -1]), &labels), Some(1.0));
        assert_eq!(uncertainty_recall(&mk(vec![1, 0, 1]), &labels), Some(0.0));

        let definite = matrix(vec![LabelCode::Pos], 1);
        let d = Decisions {
            n: 1,
            c: 1,
            values: vec![1],
            probs: vec![0.9],
            u: vec![0.1],
            tau: 0.4,
        };
        assert_eq!(uncertainty_recall(&d, &definite), None);
    }

    #[test]
    fn energy_examples() {
        let e = energy_score(&tensor2(1, 2, vec![0.0, 0.0]));
        assert!((e[0] + std::f64::consts::LN_2).abs() < 1e-15);

        for t in [-3.0, 0.7, 12.0] {
            let e = energy_score(&tensor2(1, 2, vec![t, t]));
            assert!((e[0] - (-t - std::f64::consts::LN_2)).abs() < 1e-10);
        }

        let e = energy_score(&tensor2(2, 2, vec![500.0, 500.0, -500.0, -500.0]));
        assert!(e.iter().all(|v| v.is_finite()));
        assert!((e[0] - (-500.0 - std::f64::consts::LN_2)).abs() < 1e-9);
    }

    #[test]
    fn confusion_counts_skip_abstentions_and_indefinite_truth() {
        let labels = matrix(
            vec![
                LabelCode::Pos,
                LabelCode::Pos,
                LabelCode::Neg,
                LabelCode::Neg,
                LabelCode::Unc,
                LabelCode::Blank,
            ],
            1,
        );
        let d = Decisions {
            n: 6,
            c: 1,
            values: vec![1, -1, 0, 1, 1, 0],
            probs: vec![0.5; 6],
            u: vec![0.5; 6],
            tau: 0.4,
        };
        let conf = binary_confusion(&d, &labels);
        assert_eq!(conf[0], Confusion { tp: 1, fp: 1, tn: 1, fneg: 0 });
        assert_eq!(conf[0].total(), 3);
    }

    #[test]
    fn confusion_matches_naive_tally_on_random_input() {
        let mut rng = Rng::new(31);
        let (n, c) = (40, 3);
        let codes: Vec<LabelCode> = (0..n * c)
            .map(|_| match rng.below(4) {
                0 => LabelCode::Pos,
                1 => LabelCode::Neg,
                2 => LabelCode::Unc,
                _ => LabelCode::Blank,
            })
            .collect();
        let labels = matrix(codes.clone(), c);
        let values: Vec<i8> = (0..n * c).map(|_| rng.below(3) as i8 - 1).collect();
        let d = Decisions {
            n,
            c,
            values: values.clone(),
            probs: vec![0.5; n * c],
            u: vec![0.5; n * c],
            tau: 0.4,
        };
        let conf = binary_confusion(&d, &labels);
        for class in 0..c {
            let mut want = Confusion::default();
            for i in 0..n {
                let v = values[i * c + class];
                if v == -1 {
                    continue;
                }
                match (codes[i * c + class], v == 1) {
                    (LabelCode::Pos, true) => want.tp += 1,
                    (LabelCode::Pos, false) => want.fneg += 1,
                    (LabelCode::Neg, true) => want.fp += 1,
                    (LabelCode::Neg, false) => want.tn += 1,
                    _ => {}
                }
            }
            assert_eq!(conf[class], want);
        }
    }

    #[test]
    fn ensembling_averages_logits() {
        let a = tensor2(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ensemble_logits(&[a.clone()]).data(), a.data());

        let neg = tensor2(2, 2, a.data().iter().map(|v| -v).collect());
        assert!(ensemble_logits(&[a.clone(), neg])
            .data()
            .iter()
            .all(|&v| v == 0.0));

        let mut rng = Rng::new(3);
        let runs: Vec<Tensor> = (0..3)
            .map(|_| Tensor::from_fn(vec![2, 3], |_| rng.normal()))
            .collect();
        let mean = ensemble_logits(&runs);
        for i in 0..6 {
            let want = (runs[0].data()[i] + runs[1].data()[i] + runs[2].data()[i]) / 3.0;
            assert!((mean.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn percentile_interpolates_linearly() {
        let v = vec![5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 50.0), 3.0);
        assert_eq!(percentile(&v, 100.0), 5.0);
        assert_eq!(percentile(&v, 25.0), 2.0);
        assert!((percentile(&v, 10.0) - 1.4).abs() < 1e-12);
    }

    #[test]
    fn histogram_counts_every_value() {
        let mut rng = Rng::new(17);
        let values: Vec<f64> = (0..500).map(|_| rng.normal()).collect();
        let hist = histogram(&values, 16);
        assert_eq!(hist.len(), 16);
        let total: usize = hist.iter().map(|&(_, c)| c).sum();
        assert_eq!(total, 500);

        let flat = histogram(&[2.5; 10], 4);
        let total: usize = flat.iter().map(|&(_, c)| c).sum();
        assert_eq!(total, 10);

        let csv = histogram_csv(&hist);
        assert!(csv.starts_with("bin_center,count\n"));
        assert_eq!(csv.lines().count(), 17);
    }

    #[test]
    fn report_serializes_with_stable_order_and_explicit_nulls() {
        let probs = tensor2(2, 2, vec![0.9, 0.2, 0.4, 0.7]);
        let u = tensor2(2, 2, vec![0.1, 0.9, 0.2, 0.3]);
        let labels = matrix(
            vec![LabelCode::Pos, LabelCode::Unc, LabelCode::Neg, LabelCode::Unc],
            2,
        );
        let mut report = compute_report(&probs, &u, &labels, 0.4);
        report.energy.push(summarize_energy("val", &[-1.0, -2.0, -3.0]));
        let a = report.to_json();
        let b = report.to_json();
        assert_eq!(a, b);
        // Class 1 has no definite entries, so its AUC must be null.
        assert!(a.contains("null"));
        assert!(a.find("\"tau\"").unwrap() < a.find("\"per_class_auc\"").unwrap());
        let back: MetricsReport = serde_json::from_str(&a).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn report_on_a_tiny_split_has_consistent_fields() {
        let probs = tensor2(3, 1, vec![0.9, 0.1, 0.8]);
        let u = tensor2(3, 1, vec![0.1, 0.2, 0.9]);
        let labels = matrix(vec![LabelCode::Pos, LabelCode::Neg, LabelCode::Unc], 1);
        let report = compute_report(&probs, &u, &labels, 0.4);
        assert_eq!(report.per_class_auc[0], Some(1.0));
        assert_eq!(report.micro_auc, Some(1.0));
        assert_eq!(report.selective_accuracy, Some(1.0));
        assert_eq!(report.coverage, 1.0);
        assert_eq!(report.uncertainty_recall, Some(1.0));
        let unc = report.mean_u_uncertain.unwrap();
        let def = report.mean_u_definite.unwrap();
        assert!(unc > def);
        assert_eq!(report.confusion[0].total(), 2);
    }

    proptest! {
        #[test]
        fn gate_invariant_abstain_iff_u_exceeds_tau(
            probs in proptest::collection::vec(0.0f64..1.0, 12),
            us in proptest::collection::vec(0.001f64..1.0, 12),
            tau in 0.05f64..0.95
        ) {
            let p = Tensor::new(vec![4, 3], probs);
            let u = Tensor::new(vec![4, 3], us);
            let d = abstention_gate(&p, &u, tau);
            for i in 0..12 {
                prop_assert_eq!(d.values[i] == -1, u.data()[i] > tau);
                if d.values[i] != -1 {
                    prop_assert_eq!(d.values[i] == 1, p.data()[i] > 0.5);
                }
            }
        }

        #[test]
        fn raising_tau_grows_coverage_and_shrinks_uncertainty_recall(
            seed in any::<u64>()
        ) {
            let mut rng = Rng::new(seed);
            let (n, c) = (10, 2);
            let probs = Tensor::from_fn(vec![n, c], |_| rng.uniform());
            let u = Tensor::from_fn(vec![n, c], |_| rng.uniform_in(0.01, 1.0));
            let codes: Vec<LabelCode> = (0..n * c)
                .map(|_| match rng.below(3) {
                    0 => LabelCode::Pos,
                    1 => LabelCode::Neg,
                    _ => LabelCode::Unc,
                })
                .collect();
            let names = (0..c).map(|i| format!("class_{i}")).collect();
            let labels = LabelMatrix::new(names, codes);
            let taus = [0.1, 0.3, 0.5, 0.7, 0.9];
            let mut last_cov = -1.0f64;
            let mut last_recall = 2.0f64;
            for &tau in &taus {
                let d = abstention_gate(&probs, &u, tau);
                let (_, cov) = selective_accuracy(&d, &labels, false);
                let recall = uncertainty_recall(&d, &labels).unwrap_or(0.0);
                prop_assert!(cov + 1e-12 >= last_cov);
                prop_assert!(recall <= last_recall + 1e-12);
                last_cov = cov;
                last_recall = recall;
            }
        }
    }
}

//! Evaluation metrics and the plot-ready tables behind the behavioral analyses.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphgen::{GraphInstance, Label};
use crate::model::Prediction;

/// One evaluated test instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub index: usize,
    pub label: Label,
    pub predicted: Label,
    /// `P(Yes)` at the chosen termination step.
    pub score: f64,
    /// Chosen termination step, 1-based.
    pub step: usize,
    pub bfs_step: i64,
    /// `Σ_k p(k) · P(Yes | s_k)`.
    pub expected_score: f64,
}

impl EvalRecord {
    pub fn from_prediction(index: usize, instance: &GraphInstance, p: &Prediction) -> Self {
        Self {
            index,
            label: instance.label,
            predicted: p.answer,
            score: p.score,
            step: p.step,
            bfs_step: instance.bfs_step,
            expected_score: p.expected_score,
        }
    }

    pub fn is_correct(&self) -> bool {
        self.label == self.predicted
    }
}

/// Which per-instance score feeds the AUC metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreRule {
    /// `P(Yes)` at the chosen termination step.
    #[default]
    Selected,
    /// `P(Yes)` averaged over termination steps.
    Expected,
}

impl ScoreRule {
    pub fn score(self, r: &EvalRecord) -> f64 {
        match self {
            ScoreRule::Selected => r.score,
            ScoreRule::Expected => r.expected_score,
        }
    }
}

pub fn accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Metric("accuracy of an empty record list".into()));
    }
    Ok(records.iter().filter(|r| r.is_correct()).count() as f64 / records.len() as f64)
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {s} is not a number")));
    }
    Ok(())
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("ROC-AUC needs both classes".into()));
    }
    let mut order = descending(scores);
    order.reverse();
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let mid_rank = (start + end + 1) as f64 / 2.0;
        rank_sum += mid_rank * order[start..end].iter().filter(|&&i| labels[i]).count() as f64;
        start = end;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Area under the precision-recall curve from a descending-score sweep with
/// step-wise interpolation. Tied scores enter the curve together.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::Metric("PR-AUC needs at least one positive".into()));
    }
    let order = descending(scores);
    let (mut tp, mut fp, mut recall, mut area) = (0usize, 0usize, 0.0, 0.0);
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            if labels[order[end]] {
                tp += 1;
            } else {
                fp += 1;
            }
            end += 1;
        }
        let r = tp as f64 / pos as f64;
        area += (r - recall) * tp as f64 / (tp + fp) as f64;
        recall = r;
        start = end;
    }
    Ok(area)
}

/// Count of records terminating at each step `1..=t_max`.
pub fn termination_histogram(records: &[EvalRecord], t_max: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; t_max];
    for r in records {
        if r.step == 0 || r.step > t_max {
            return Err(Error::Metric(format!(
                "record {} terminates at step {} outside 1..={t_max}",
                r.index, r.step
            )));
        }
        counts[r.step - 1] += 1;
    }
    Ok(counts)
}

/// Termination-step counts per BFS step. Rows run over `bfs_step = -1, 0, …,
/// max`, columns over termination steps `1..=t_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BfsMatrix {
    pub bfs_steps: Vec<i64>,
    pub counts: Vec<Vec<usize>>,
}

impl BfsMatrix {
    pub fn row(&self, bfs_step: i64) -> Option<&[usize]> {
        self.bfs_steps
            .iter()
            .position(|&b| b == bfs_step)
            .map(|i| self.counts[i].as_slice())
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Mean termination step for one BFS step, `None` for an empty row.
    pub fn mean_step(&self, bfs_step: i64) -> Option<f64> {
        let row = self.row(bfs_step)?;
        let n: usize = row.iter().sum();
        (n > 0).then(|| row.iter().enumerate().map(|(k, &c)| (k + 1) as f64 * c as f64).sum::<f64>() / n as f64)
    }
}

pub fn bfs_correlation(records: &[EvalRecord], t_max: usize) -> Result<BfsMatrix> {
    let max_bfs = records.iter().map(|r| r.bfs_step).max().unwrap_or(-1).max(-1);
    let bfs_steps: Vec<i64> = (-1..=max_bfs).collect();
    let mut counts = vec![vec![0; t_max]; bfs_steps.len()];
    for r in records {
        if r.bfs_step < -1 {
            return Err(Error::Metric(format!("record {} has bfs_step {}", r.index, r.bfs_step)));
        }
        if r.step == 0 || r.step > t_max {
            return Err(Error::Metric(format!(
                "record {} terminates at step {} outside 1..={t_max}",
                r.index, r.step
            )));
        }
        counts[(r.bfs_step + 1) as usize][r.step - 1] += 1;
    }
    Ok(BfsMatrix { bfs_steps, counts })
}

/// Number of adjacent pairs where the sequence decreases.
pub fn inversions(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] < w[0]).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub histogram: Vec<usize>,
    pub bfs_matrix: Vec<Vec<usize>>,
    pub bfs_steps: Vec<i64>,
    pub score_rule: ScoreRule,
    pub count: usize,
}

impl EvalReport {
    pub fn compute(records: &[EvalRecord], t_max: usize, rule: ScoreRule) -> Result<Self> {
        let scores: Vec<f64> = records.iter().map(|r| rule.score(r)).collect();
        let labels: Vec<bool> = records.iter().map(|r| r.label.is_yes()).collect();
        let matrix = bfs_correlation(records, t_max)?;
        Ok(Self {
            accuracy: accuracy(records)?,
            roc_auc: roc_auc(&scores, &labels)?,
            pr_auc: pr_auc(&scores, &labels)?,
            histogram: termination_histogram(records, t_max)?,
            bfs_matrix: matrix.counts,
            bfs_steps: matrix.bfs_steps,
            score_rule: rule,
            count: records.len(),
        })
    }
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!("checked is_io_error"),
        }
    } else {
        Error::Metric(format!("{}: {e}", path.display()))
    }
}

/// `step,count` rows.
pub fn histogram_csv(histogram: &[usize]) -> String {
    let mut out = String::from("step,count\n");
    for (k, c) in histogram.iter().enumerate() {
        out.push_str(&format!("{},{c}\n", k + 1));
    }
    out
}

/// `bfs_step,t1,…,tN` rows.
pub fn bfs_matrix_csv(m: &BfsMatrix) -> String {
    let t_max = m.counts.first().map_or(0, Vec::len);
    let mut out = String::from("bfs_step");
    for k in 1..=t_max {
        out.push_str(&format!(",t{k}"));
    }
    out.push('\n');
    for (b, row) in m.bfs_steps.iter().zip(&m.counts) {
        out.push_str(&b.to_string());
        for c in row {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(index: usize, label: bool, predicted: bool, step: usize, bfs_step: i64) -> EvalRecord {
        EvalRecord {
            index,
            label: Label::from_bool(label),
            predicted: Label::from_bool(predicted),
            score: if predicted { 0.8 } else { 0.2 },
            step,
            bfs_step,
            expected_score: 0.5,
        }
    }

    fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        wins / pairs
    }

    fn threshold_sweep_ap(scores: &[f64], labels: &[bool]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let pos = labels.iter().filter(|&&l| l).count() as f64;
        let (mut area, mut prev_recall) = (0.0, 0.0);
        for t in thresholds {
            let selected: Vec<bool> = scores.iter().map(|&s| s >= t).collect();
            let tp = selected.iter().zip(labels).filter(|(&s, &l)| s && l).count() as f64;
            let n = selected.iter().filter(|&&s| s).count() as f64;
            let recall = tp / pos;
            area += (recall - prev_recall) * tp / n;
            prev_recall = recall;
        }
        area
    }

    #[test]
    fn accuracy_examples() {
        let all = vec![record(0, true, true, 1, 0), record(1, false, false, 1, -1)];
        assert_eq!(accuracy(&all).unwrap(), 1.0);
        let half = vec![record(0, true, true, 1, 0), record(1, false, true, 1, -1)];
        assert_eq!(accuracy(&half).unwrap(), 0.5);
        assert!(accuracy(&[]).is_err());
    }

    #[test]
    fn roc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.4, 0.6], &[true, false, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(roc_auc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn pr_examples() {
        assert_eq!(pr_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        let got = pr_auc(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((got - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(got, threshold_sweep_ap(&[0.9, 0.8, 0.7], &[true, false, true]));
        assert_eq!(pr_auc(&[0.3, 0.1, 0.7], &[true, true, true]).unwrap(), 1.0);
        assert!(pr_auc(&[0.3], &[false]).is_err());
    }

    #[test]
    fn histogram_and_matrix() {
        let recs = vec![
            record(0, true, true, 2, 0),
            record(1, true, true, 3, 1),
            record(2, false, false, 1, -1),
            record(3, true, true, 3, 1),
        ];
        let h = termination_histogram(&recs, 4).unwrap();
        assert_eq!(h, vec![1, 1, 2, 0]);
        let m = bfs_correlation(&recs, 4).unwrap();
        assert_eq!(m.bfs_steps, vec![-1, 0, 1]);
        assert_eq!(m.row(1).unwrap(), &[0, 0, 2, 0]);
        assert_eq!(m.total(), 4);
        assert_eq!(m.mean_step(-1), Some(1.0));
        assert!(termination_histogram(&recs, 2).is_err());

        let single = bfs_correlation(&[record(0, true, true, 5, 2)], 6).unwrap();
        let nonzero: usize = single.counts.iter().flatten().filter(|&&c| c > 0).count();
        assert_eq!(nonzero, 1);
        assert_eq!(single.row(2).unwrap()[4], 1);
    }

    #[test]
    fn inversion_count() {
        assert_eq!(inversions(&[1.0, 2.0, 2.0, 3.0]), 0);
        assert_eq!(inversions(&[1.0, 3.0, 2.0, 4.0]), 1);
        assert_eq!(inversions(&[4.0, 3.0, 2.0]), 2);
    }

    #[test]
    fn csv_round_trip_and_tables() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.csv");
        let mut recs = vec![record(0, true, true, 2, 0), record(1, false, true, 1, -1)];
        recs[0].score = 0.1 + 0.2;
        write_records(&path, &recs).unwrap();
        assert_eq!(read_records(&path).unwrap(), recs);
        let m = bfs_correlation(&recs, 3).unwrap();
        let table = bfs_matrix_csv(&m);
        assert_eq!(table.lines().next().unwrap(), "bfs_step,t1,t2,t3");
        assert!(table.lines().all(|l| l.split(',').count() == 4));
        assert_eq!(histogram_csv(&[2, 0]), "step,count\n1,2\n2,0\n");
        assert!(matches!(read_records(&dir.path().join("missing.csv")), Err(Error::Io { .. })));
    }

    #[test]
    fn report_uses_the_chosen_score() {
        let mut recs = vec![record(0, true, true, 1, 0), record(1, false, false, 1, -1)];
        recs[0].expected_score = 0.1;
        recs[1].expected_score = 0.9;
        let selected = EvalReport::compute(&recs, 2, ScoreRule::Selected).unwrap();
        let expected = EvalReport::compute(&recs, 2, ScoreRule::Expected).unwrap();
        assert_eq!(selected.roc_auc, 1.0);
        assert_eq!(expected.roc_auc, 0.0);
        assert_eq!(selected.accuracy, expected.accuracy);
        let json = serde_json::to_value(&selected).unwrap();
        for key in ["accuracy", "roc_auc", "pr_auc", "histogram", "bfs_matrix"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec((0u8..12).prop_map(|v| v as f64 / 11.0), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn roc_matches_pairwise_count((scores, labels) in scored()) {
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let got = roc_auc(&scores, &labels).unwrap();
            prop_assert!((got - pairwise_auc(&scores, &labels)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&got));
        }

        #[test]
        fn roc_invariant_under_monotone_transform((scores, labels) in scored()) {
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            let a = roc_auc(&scores, &labels).unwrap();
            let b = roc_auc(&warped, &labels).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn roc_complements_on_flipped_labels(n in 2usize..30, seed in any::<u64>()) {
            use rand::{seq::SliceRandom, Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut scores: Vec<f64> = (0..n).map(|i| i as f64).collect();
            scores.shuffle(&mut rng);
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            labels[0] = true;
            labels[1] = false;
            let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
            let sum = roc_auc(&scores, &labels).unwrap() + roc_auc(&scores, &flipped).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn pr_matches_threshold_sweep((scores, labels) in scored()) {
            prop_assume!(labels.iter().any(|&l| l));
            let got = pr_auc(&scores, &labels).unwrap();
            prop_assert!((got - threshold_sweep_ap(&scores, &labels)).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&got));
        }

        #[test]
        fn tables_account_for_every_record(
            steps in prop::collection::vec((1usize..6, -1i64..5), 0..50)
        ) {
            let recs: Vec<EvalRecord> = steps
                .iter()
                .enumerate()
                .map(|(i, &(k, b))| record(i, b >= 0, true, k, b))
                .collect();
            let h = termination_histogram(&recs, 5).unwrap();
            prop_assert_eq!(h.iter().sum::<usize>(), recs.len());
            let m = bfs_correlation(&recs, 5).unwrap();
            prop_assert_eq!(m.total(), recs.len());
            for (b, row) in m.bfs_steps.iter().zip(&m.counts) {
                let n = recs.iter().filter(|r| r.bfs_step == *b).count();
                prop_assert_eq!(row.iter().sum::<usize>(), n);
            }
        }
    }
}

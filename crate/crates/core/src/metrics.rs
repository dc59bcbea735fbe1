//! Classification metrics and cross-method comparison tables.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Accuracy and macro-F1 of `preds` against `labels` over `k` classes.
/// Classes with neither true nor predicted instances are left out of the
/// macro average.
pub fn accuracy_and_macro_f1(preds: &[usize], labels: &[usize], k: usize) -> Result<(f64, f64)> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Input(format!(
            "need equal, non-empty prediction and label lists (got {} and {})",
            preds.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&c| c >= k) {
        return Err(Error::Input(format!("class index {bad} out of range for {k} classes")));
    }
    let mut tp = vec![0usize; k];
    let mut n_pred = vec![0usize; k];
    let mut n_true = vec![0usize; k];
    for (&p, &y) in preds.iter().zip(labels) {
        n_pred[p] += 1;
        n_true[y] += 1;
        if p == y {
            tp[p] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let mut f1_sum = 0.0;
    let mut counted = 0;
    for c in 0..k {
        if n_true[c] + n_pred[c] == 0 {
            continue;
        }
        // F1 = 2·tp / (2·tp + fp + fn)
        f1_sum += 2.0 * tp[c] as f64 / (n_true[c] + n_pred[c]) as f64;
        counted += 1;
    }
    Ok((correct as f64 / preds.len() as f64, f1_sum / counted as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Scores of several methods on several datasets. Methods and datasets keep
/// their insertion order.
#[derive(Clone, Debug, Default)]
pub struct MetricTable {
    methods: Vec<String>,
    datasets: Vec<String>,
    cells: HashMap<(String, String), Score>,
}

impl MetricTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, method: &str, dataset: &str, score: Score) {
        if !self.methods.iter().any(|m| m == method) {
            self.methods.push(method.to_string());
        }
        if !self.datasets.iter().any(|d| d == dataset) {
            self.datasets.push(dataset.to_string());
        }
        self.cells.insert((method.to_string(), dataset.to_string()), score);
    }

    pub fn methods(&self) -> &[String] {
        &self.methods
    }

    pub fn datasets(&self) -> &[String] {
        &self.datasets
    }

    pub fn get(&self, method: &str, dataset: &str) -> Result<Score> {
        self.cells
            .get(&(method.to_string(), dataset.to_string()))
            .copied()
            .ok_or_else(|| Error::Input(format!("no score for method `{method}` on dataset `{dataset}`")))
    }

    /// Per-dataset ranks by descending accuracy, ties sharing their mean rank.
    /// Indexed `[dataset][method]`.
    pub fn ranks(&self) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(self.datasets.len());
        for d in &self.datasets {
            let acc = self
                .methods
                .iter()
                .map(|m| self.get(m, d).map(|s| s.accuracy))
                .collect::<Result<Vec<_>>>()?;
            out.push(mean_ranks_desc(&acc));
        }
        Ok(out)
    }

    /// Mean rank of each method across datasets, in method order.
    pub fn average_rank(&self) -> Result<Vec<(String, f64)>> {
        let ranks = self.ranks()?;
        let n = ranks.len().max(1) as f64;
        Ok(self
            .methods
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), ranks.iter().map(|r| r[i]).sum::<f64>() / n))
            .collect())
    }

    pub fn average_accuracy(&self) -> Result<Vec<(String, f64)>> {
        let n = self.datasets.len().max(1) as f64;
        self.methods
            .iter()
            .map(|m| {
                let total = self
                    .datasets
                    .iter()
                    .map(|d| self.get(m, d).map(|s| s.accuracy))
                    .sum::<Result<f64>>()?;
                Ok((m.clone(), total / n))
            })
            .collect()
    }

    /// Datasets on which each method attains the best accuracy (ties count
    /// for every tied method).
    pub fn top1_counts(&self) -> Result<Vec<(String, usize)>> {
        let mut counts = vec![0; self.methods.len()];
        for d in &self.datasets {
            let acc = self
                .methods
                .iter()
                .map(|m| self.get(m, d).map(|s| s.accuracy))
                .collect::<Result<Vec<_>>>()?;
            let best = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for (i, a) in acc.iter().enumerate() {
                if *a == best {
                    counts[i] += 1;
                }
            }
        }
        Ok(self.methods.iter().cloned().zip(counts).collect())
    }
}

/// Rank 1 for the largest value; equal values share the mean of the ranks
/// they span.
pub fn mean_ranks_desc(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j hold ranks i+1..=j+1.
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean;
        }
        i = j + 1;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn score(accuracy: f64) -> Score {
        Score { accuracy, macro_f1: 0.0 }
    }

    #[test]
    fn perfect_predictions() {
        assert_eq!(accuracy_and_macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn hand_counted_examples() {
        let (acc, f1) = accuracy_and_macro_f1(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(acc, 0.75);
        assert!((f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-15);

        let (acc, f1) = accuracy_and_macro_f1(&[1, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(acc, 0.5);
        assert!((f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_are_skipped() {
        let (_, f1) = accuracy_and_macro_f1(&[0, 1], &[0, 1], 5).unwrap();
        assert_eq!(f1, 1.0);
    }

    #[test]
    fn input_errors() {
        assert!(accuracy_and_macro_f1(&[], &[], 2).is_err());
        assert!(accuracy_and_macro_f1(&[0], &[0, 1], 2).is_err());
        assert!(accuracy_and_macro_f1(&[2], &[0], 2).is_err());
    }

    /// Confusion-matrix implementation written independently of the one above.
    fn oracle(preds: &[usize], labels: &[usize], k: usize) -> (f64, f64) {
        let mut cm = vec![vec![0u32; k]; k];
        for (&p, &y) in preds.iter().zip(labels) {
            cm[y][p] += 1;
        }
        let acc = (0..k).map(|c| cm[c][c]).sum::<u32>() as f64 / preds.len() as f64;
        let mut f1s = Vec::new();
        for c in 0..k {
            let tp = cm[c][c] as f64;
            let fp = (0..k).filter(|&r| r != c).map(|r| cm[r][c]).sum::<u32>() as f64;
            let fneg = (0..k).filter(|&q| q != c).map(|q| cm[c][q]).sum::<u32>() as f64;
            if tp + fp + fneg == 0.0 {
                continue;
            }
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
            f1s.push(if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            });
        }
        (acc, f1s.iter().sum::<f64>() / f1s.len() as f64)
    }

    #[test]
    fn matches_confusion_matrix_oracle() {
        let mut rng = Rng::new(11);
        for _ in 0..100 {
            let k = 2 + rng.below(4);
            let n = 1 + rng.below(30);
            let preds: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
            let (acc, f1) = accuracy_and_macro_f1(&preds, &labels, k).unwrap();
            let (oa, of1) = oracle(&preds, &labels, k);
            assert_eq!(acc, oa);
            assert!((f1 - of1).abs() < 1e-12, "{f1} vs {of1}");
        }
    }

    #[test]
    fn rank_examples() {
        let mut t = MetricTable::new();
        t.insert("a", "d1", score(0.5));
        assert_eq!(t.average_rank().unwrap(), vec![("a".to_string(), 1.0)]);

        let mut t = MetricTable::new();
        for (d, a, b) in [("d1", 0.9, 0.8), ("d2", 0.7, 0.6)] {
            t.insert("a", d, score(a));
            t.insert("b", d, score(b));
        }
        let r: Vec<f64> = t.average_rank().unwrap().into_iter().map(|(_, r)| r).collect();
        assert_eq!(r, vec![1.0, 2.0]);

        let mut t = MetricTable::new();
        t.insert("a", "d", score(0.8));
        t.insert("b", "d", score(0.9));
        t.insert("c", "d", score(0.8));
        assert_eq!(t.ranks().unwrap()[0], vec![2.5, 1.0, 2.5]);
        let top: Vec<usize> = t.top1_counts().unwrap().into_iter().map(|(_, c)| c).collect();
        assert_eq!(top, vec![0, 1, 0]);
    }

    #[test]
    fn missing_cell_names_method_and_dataset() {
        let mut t = MetricTable::new();
        t.insert("a", "d1", score(0.5));
        t.insert("b", "d2", score(0.5));
        let err = t.average_rank().unwrap_err().to_string();
        assert!(err.contains("`b`") && err.contains("`d1`"), "{err}");
    }

    #[test]
    fn ranks_are_permutation_means() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let m = 1 + rng.below(6);
            let vals: Vec<f64> = (0..m).map(|_| rng.below(3) as f64 / 2.0).collect();
            let r = mean_ranks_desc(&vals);
            let total: f64 = r.iter().sum();
            assert_eq!(total, (m * (m + 1)) as f64 / 2.0);
            for i in 0..m {
                for j in 0..m {
                    if vals[i] > vals[j] {
                        assert!(r[i] < r[j]);
                    }
                }
            }
        }
    }
}

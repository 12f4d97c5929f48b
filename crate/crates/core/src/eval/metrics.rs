use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Label, Task, TaskKind};
use crate::error::{bail, Result};

/// Named metric values for one task on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub split: String,
    pub metrics: BTreeMap<String, f64>,
    pub count: usize,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        bail!(Eval, "length mismatch: {} vs {}", x.len(), y.len());
    }
    if x.len() < 2 {
        bail!(Eval, "correlation needs at least 2 points, got {}", x.len());
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        bail!(Eval, "correlation input contains non-finite values");
    }
    Ok(())
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        bail!(Eval, "correlation is undefined for zero-variance input");
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the average of their ranks.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    if pred.len() != gold.len() || pred.is_empty() {
        bail!(Eval, "accuracy needs equal non-empty inputs, got {} and {}", pred.len(), gold.len());
    }
    Ok(pred.iter().zip(gold).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

/// F1 of class `positive`. With no positives predicted or present the
/// prediction is perfect and F1 is 1.
pub fn binary_f1(pred: &[usize], gold: &[usize], positive: usize) -> Result<f64> {
    if pred.len() != gold.len() || pred.is_empty() {
        bail!(Eval, "F1 needs equal non-empty inputs, got {} and {}", pred.len(), gold.len());
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gold) {
        match (p == positive, g == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    Ok(if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// Fraction of examples where two models' logits pick the same class.
pub fn label_agreement(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let pa: Vec<usize> = a.iter().map(|z| argmax(z)).collect();
    let pb: Vec<usize> = b.iter().map(|z| argmax(z)).collect();
    accuracy(&pa, &pb)
}

/// Rows of each ranking group, in order of first appearance.
fn group_rows(groups: &[Option<u64>]) -> Result<Vec<Vec<usize>>> {
    let mut slot: BTreeMap<u64, usize> = BTreeMap::new();
    let mut rows: Vec<Vec<usize>> = Vec::new();
    for (i, g) in groups.iter().enumerate() {
        let Some(g) = g else {
            bail!(Eval, "ranking example {i} has no group");
        };
        let k = *slot.entry(*g).or_insert_with(|| {
            rows.push(Vec::new());
            rows.len() - 1
        });
        rows[k].push(i);
    }
    Ok(rows)
}

/// Metrics by task kind: accuracy (plus F1 on class 1 for two classes) for
/// classification, Pearson and Spearman for regression, and top-1 accuracy
/// over candidate groups for ranking.
pub fn compute_metrics(
    task: &Task,
    split: &str,
    logits: &[Vec<f64>],
    labels: &[Label],
    groups: &[Option<u64>],
) -> Result<MetricReport> {
    if logits.len() != labels.len() || logits.len() != groups.len() {
        bail!(
            Eval,
            "task {}: {} predictions, {} labels, {} group entries",
            task.name,
            logits.len(),
            labels.len(),
            groups.len()
        );
    }
    if logits.len() < 2 {
        bail!(Eval, "task {}: metrics need at least 2 examples", task.name);
    }
    if let Some(z) = logits.iter().find(|z| z.len() != task.output_dim()) {
        bail!(Eval, "task {}: prediction width {} differs from {}", task.name, z.len(), task.output_dim());
    }
    let mut metrics = BTreeMap::new();
    match task.kind {
        TaskKind::SingleClassification | TaskKind::PairClassification => {
            let pred: Vec<usize> = logits.iter().map(|z| argmax(z)).collect();
            let mut gold = Vec::with_capacity(labels.len());
            for l in labels {
                match l {
                    Label::Class(k) => gold.push(*k),
                    other => bail!(Eval, "task {}: expected a class label, got {other:?}", task.name),
                }
            }
            metrics.insert("accuracy".to_string(), accuracy(&pred, &gold)?);
            if task.output_dim() == 2 {
                metrics.insert("f1".to_string(), binary_f1(&pred, &gold, 1)?);
            }
        }
        TaskKind::PairRegression => {
            let pred: Vec<f64> = logits.iter().map(|z| task.denormalize_score(z[0])).collect();
            let mut gold = Vec::with_capacity(labels.len());
            for l in labels {
                match l {
                    Label::Score(s) => gold.push(*s),
                    other => bail!(Eval, "task {}: expected a score label, got {other:?}", task.name),
                }
            }
            metrics.insert("pearson".to_string(), pearson(&pred, &gold)?);
            metrics.insert("spearman".to_string(), spearman(&pred, &gold)?);
        }
        TaskKind::RelevanceRanking => {
            let rows = group_rows(groups)?;
            let mut hits = 0usize;
            for r in &rows {
                let scores: Vec<f64> = r.iter().map(|&i| logits[i][0]).collect();
                let top = r[argmax(&scores)];
                if labels[top] == Label::Relevant(true) {
                    hits += 1;
                }
            }
            metrics.insert("accuracy".to_string(), hits as f64 / rows.len() as f64);
        }
    }
    Ok(MetricReport {
        task: task.name.clone(),
        split: split.to_string(),
        metrics,
        count: logits.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_hand_value() {
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!(r, 0.8);
    }

    #[test]
    fn affine_predictions_correlate_perfectly() {
        let y = [0.3, 1.7, -2.0, 4.5, 0.0];
        let p: Vec<f64> = y.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&p, &y).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(spearman(&p, &y).unwrap(), 1.0);
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn zero_variance_is_an_error() {
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[5.0, 5.0]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn perfect_classification() {
        let t = Task::classification("s", false, &["n", "p"]).unwrap();
        let z = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 2.0]];
        let l = vec![Label::Class(0), Label::Class(1), Label::Class(1)];
        let r = compute_metrics(&t, "dev", &z, &l, &[None; 3]).unwrap();
        assert_eq!(r.metrics["accuracy"], 1.0);
        assert_eq!(r.metrics["f1"], 1.0);
    }

    #[test]
    fn f1_counts() {
        // tp 1, fp 1, fn 1
        assert_eq!(binary_f1(&[1, 1, 0, 0], &[1, 0, 1, 0], 1).unwrap(), 0.5);
    }

    #[test]
    fn ranking_top1() {
        let t = Task::ranking("r").unwrap();
        let z = vec![vec![0.1], vec![0.9], vec![0.5], vec![0.2]];
        let l = vec![
            Label::Relevant(false),
            Label::Relevant(true),
            Label::Relevant(true),
            Label::Relevant(false),
        ];
        let g = vec![Some(0), Some(0), Some(1), Some(1)];
        let r = compute_metrics(&t, "dev", &z, &l, &g).unwrap();
        assert_eq!(r.metrics["accuracy"], 1.0);
    }

    #[test]
    fn regression_reports_both_correlations() {
        let t = Task::regression("sim", (0.0, 5.0)).unwrap();
        let z = vec![vec![0.1], vec![0.5], vec![0.8]];
        let l = vec![Label::Score(1.0), Label::Score(2.0), Label::Score(4.0)];
        let r = compute_metrics(&t, "dev", &z, &l, &[None; 3]).unwrap();
        assert!(r.metrics.contains_key("pearson") && r.metrics.contains_key("spearman"));
    }
}

use serde::{Deserialize, Serialize};

use super::{softmax_unchecked, InstanceSet, MlpParams};
use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` when the dataset holds a single class.
    pub auc: Option<f64>,
}

/// Area under the ROC curve via the Mann-Whitney rank statistic; tied scores
/// share the midpoint of their ranks.
pub fn auc_roc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AucUndefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie block i..=j shares their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

fn report_from_probs(probs: &[Vec<f64>], ds: &Dataset) -> EvalReport {
    let n = ds.len();
    let correct = probs
        .iter()
        .zip(ds.labels())
        .filter(|(p, &y)| argmax(p) == y)
        .count();
    let accuracy = if n == 0 { f64::NAN } else { correct as f64 / n as f64 };
    let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
    let positive: Vec<bool> = ds.labels().iter().map(|&y| y == 1).collect();
    EvalReport {
        accuracy,
        auc: auc_roc(&scores, &positive).ok(),
    }
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn evaluate_params(params: &MlpParams, ds: &Dataset) -> EvalReport {
    let probs: Vec<Vec<f64>> = ds
        .features()
        .outer_iter()
        .map(|x| softmax_unchecked(params.forward_unchecked(x).view()).to_vec())
        .collect();
    report_from_probs(&probs, ds)
}

/// Accuracy and AUC-ROC of the instance-averaged prediction. AUC scores the
/// mean class-1 probability.
pub fn evaluate(set: &InstanceSet, ds: &Dataset) -> Result<EvalReport> {
    if ds.dim() != set.input_dim() {
        return Err(Error::invalid("dataset dimension does not match the networks"));
    }
    let nets = set.nets();
    let k = nets.len() as f64;
    let probs: Vec<Vec<f64>> = ds
        .features()
        .outer_iter()
        .map(|x| {
            let mut mean = vec![0.0; set.output_dim()];
            for net in &nets {
                let p = softmax_unchecked(net.forward_unchecked(x).view());
                for (m, v) in mean.iter_mut().zip(p.iter()) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= k);
            mean
        })
        .collect();
    Ok(report_from_probs(&probs, ds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_auc(scores: &[f64], positive: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &pi) in positive.iter().enumerate() {
            for (j, &pj) in positive.iter().enumerate() {
                if pi && !pj {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn hand_computed_case() {
        let s = [0.1, 0.4, 0.35, 0.8];
        let p = [false, false, true, true];
        assert_eq!(brute_force_auc(&s, &p), 0.75);
        assert_eq!(auc_roc(&s, &p).unwrap(), 0.75);
    }

    #[test]
    fn perfect_and_constant_scores() {
        assert_eq!(auc_roc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auc_roc(&[0.1, 0.2], &[true, true]), Err(Error::AucUndefined)));
    }

    #[test]
    fn rank_statistic_matches_brute_force_with_ties() {
        use crate::rng::{self, Stream};
        let mut r = rng::stream(5, Stream::Data);
        for _ in 0..50 {
            let n = 30;
            // coarse grid forces ties
            let s: Vec<f64> = (0..n).map(|_| (rng::uniform01(&mut r) * 8.0).floor() / 8.0).collect();
            let p: Vec<bool> = (0..n).map(|i| i % 3 == 0 || rng::bernoulli(&mut r, 0.3)).collect();
            let a = auc_roc(&s, &p).unwrap();
            let b = brute_force_auc(&s, &p);
            assert!((a - b).abs() < 1e-12);
        }
    }
}

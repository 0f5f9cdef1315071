//! Ranking metrics and model evaluation.
//!
//! AUC is computed by the rank statistic: sort by score, assign midranks to
//! tied scores, and normalize the positive ranks. This is O(n log n) and
//! exactly equals the O(n^2) pairwise definition (count score pairs where
//! the positive outranks the negative, ties worth one half), which the test
//! suite verifies against a brute-force implementation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::Instance;
use crate::model::{InstancePaths, Model, ModelError};
use crate::sampler::SampleStore;

/// Errors from metric computation.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metrics need at least one instance")]
    Empty,
    #[error("scores and labels differ in length: {scores} vs {labels}")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("labels must be 0 or 1, got {0}")]
    BadLabel(f64),
    #[error("score {0} is not finite")]
    BadScore(f64),
    #[error("AUC needs both classes, got {positives} positives out of {total}")]
    SingleClass { positives: usize, total: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn check_inputs(scores: &[f64], labels: &[f64]) -> Result<usize, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    for &s in scores {
        if !s.is_finite() {
            return Err(EvalError::BadScore(s));
        }
    }
    let mut positives = 0;
    for &l in labels {
        if l == 1.0 {
            positives += 1;
        } else if l != 0.0 {
            return Err(EvalError::BadLabel(l));
        }
    }
    Ok(positives)
}

/// Area under the ROC curve via midranks. Ties between scores contribute
/// one half per crossing pair.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    let positives = check_inputs(scores, labels)?;
    let total = scores.len();
    if positives == 0 || positives == total {
        return Err(EvalError::SingleClass { positives, total });
    }
    let negatives = total - positives;

    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Midranks: every member of a tie run receives the average rank of the
    // run (1-based ranks).
    let mut positive_rank_sum = 0.0;
    let mut start = 0;
    while start < total {
        let mut end = start + 1;
        while end < total && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let midrank = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            if labels[idx] == 1.0 {
                positive_rank_sum += midrank;
            }
        }
        start = end;
    }

    let p = positives as f64;
    let u = positive_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// Fraction of instances whose thresholded score matches the label. Scores
/// at or above `0.5` predict the positive class.
pub fn accuracy(scores: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    check_inputs(scores, labels)?;
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|&(&s, &l)| (s >= 0.5) == (l == 1.0))
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// AUC and accuracy over one instance set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: f64,
    pub acc: f64,
    pub count: usize,
    pub positives: usize,
}

/// Scores every instance with the model and computes the metric report.
/// Instances are scored independently in order; with `workers > 1` the
/// scoring is parallelized without changing any result.
pub fn evaluate(
    model: &Model,
    instances: &[Instance],
    store: &SampleStore,
    workers: usize,
) -> Result<(MetricReport, Vec<f64>), EvalError> {
    if instances.is_empty() {
        return Err(EvalError::Empty);
    }
    let score_one = |inst: &Instance| -> Result<f64, EvalError> {
        let paths = InstancePaths::from_store(store, inst.user, inst.item)
            .map_err(ModelError::from)?;
        Ok(model.predict(&paths)?)
    };
    let scores: Vec<f64> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("thread pool");
        pool.install(|| {
            use rayon::prelude::*;
            instances.par_iter().map(score_one).collect::<Result<_, _>>()
        })?
    } else {
        instances.iter().map(score_one).collect::<Result<_, _>>()?
    };
    let labels: Vec<f64> = instances.iter().map(|i| i.label).collect();
    let report = MetricReport {
        auc: auc(&scores, &labels)?,
        acc: accuracy(&scores, &labels)?,
        count: instances.len(),
        positives: labels.iter().filter(|&&l| l == 1.0).count(),
    };
    Ok((report, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// O(n^2) pairwise AUC: the definition the fast version must match.
    pub(crate) fn auc_brute_force(scores: &[f64], labels: &[f64]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, (&si, &li)) in scores.iter().zip(labels).enumerate() {
            if li != 1.0 {
                continue;
            }
            for (j, (&sj, &lj)) in scores.iter().zip(labels).enumerate() {
                if i == j || lj != 0.0 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn perfect_and_inverted_rankings() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [0.0, 0.0, 0.0, 1.0];
        assert_eq!(auc(&scores, &labels).unwrap(), 1.0);
        let inverted = [0.9, 0.4, 0.35, 0.1];
        assert_eq!(auc(&inverted, &labels).unwrap(), 0.0);
    }

    #[test]
    fn known_small_case() {
        // Positives ranked 2nd and 4th of four: ranks 2+4, U = 6 - 3 = 3,
        // AUC = 3/4.
        let scores = [0.1, 0.2, 0.3, 0.4];
        let labels = [0.0, 1.0, 0.0, 1.0];
        assert_eq!(auc(&scores, &labels).unwrap(), 0.75);
    }

    #[test]
    fn ties_contribute_half() {
        let scores = [0.5, 0.5];
        let labels = [1.0, 0.0];
        assert_eq!(auc(&scores, &labels).unwrap(), 0.5);
        // All scores identical: AUC is one half regardless of labels.
        let scores = [0.3; 6];
        let labels = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        assert_eq!(auc(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn matches_brute_force_with_heavy_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for case in 0..50 {
            let n = rng.gen_range(2..200);
            // Quantized scores force plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
            let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.4))).collect();
            let positives = labels.iter().filter(|&&l| l == 1.0).count();
            if positives == 0 || positives == n {
                continue;
            }
            let fast = auc(&scores, &labels).unwrap();
            let brute = auc_brute_force(&scores, &labels);
            assert!(
                (fast - brute).abs() < 1e-12,
                "case {case}: fast {fast} vs brute {brute}"
            );
        }
    }

    #[test]
    fn complement_symmetry() {
        // Flipping all labels and negating scores preserves AUC;
        // flipping labels alone complements it.
        let scores = [0.9, 0.2, 0.6, 0.4, 0.5];
        let labels = [1.0, 0.0, 1.0, 0.0, 1.0];
        let flipped: Vec<f64> = labels.iter().map(|&l| 1.0 - l).collect();
        let a = auc(&scores, &labels).unwrap();
        let b = auc(&scores, &flipped).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xf00d);
        let scores: Vec<f64> = (0..300).map(|_| rng.gen_range(0..20) as f64 / 20.0).collect();
        let labels: Vec<f64> = (0..300).map(|_| f64::from(rng.gen_bool(0.5))).collect();
        // A strictly increasing map preserves order and tie structure, so
        // the rank statistic is unchanged bit for bit.
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        assert_eq!(
            auc(&scores, &labels).unwrap(),
            auc(&warped, &labels).unwrap()
        );
    }

    #[test]
    fn constant_half_predictor_accuracy_is_positive_rate() {
        let scores = [0.5; 8];
        let labels = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0];
        // 0.5 predicts positive for every instance, so accuracy equals the
        // positive rate.
        assert_eq!(accuracy(&scores, &labels).unwrap(), 3.0 / 8.0);
    }

    #[test]
    fn accuracy_uses_half_threshold_inclusively() {
        let scores = [0.5, 0.49, 0.51, 0.5];
        let labels = [1.0, 0.0, 0.0, 0.0];
        // 0.5 predicts positive: instance 0 correct, 1 correct, 2 wrong,
        // 3 wrong.
        assert_eq!(accuracy(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(matches!(auc(&[], &[]), Err(EvalError::Empty)));
        assert!(matches!(
            auc(&[0.5], &[1.0]),
            Err(EvalError::SingleClass { .. })
        ));
        assert!(matches!(
            auc(&[0.5, 0.2], &[1.0]),
            Err(EvalError::LengthMismatch { .. })
        ));
        assert!(matches!(
            auc(&[0.5, f64::NAN], &[1.0, 0.0]),
            Err(EvalError::BadScore(_))
        ));
        assert!(matches!(
            auc(&[0.5, 0.2], &[1.0, 0.7]),
            Err(EvalError::BadLabel(_))
        ));
    }
}

//! Accuracy and drift metrics, plus the per-epoch metric row schema.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::losses;
use crate::model::{Encoder, ParameterSnapshot, SharedClassifier};

/// One metrics.csv row. Loss components are empty for modes where they do
/// not apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub top1: f64,
    pub feat_mse: Option<f64>,
    pub anchor: Option<f64>,
    pub ce: Option<f64>,
    pub total: Option<f64>,
    pub teacher_drift_rms: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

/// Index of the row maximum, ties broken toward the lowest class index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Percentage of rows whose argmax equals the label.
pub fn top1(predictions: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let (b, k) = predictions.dim();
    if b == 0 {
        return Err(Error::Contract("top1 over an empty prediction set".into()));
    }
    if labels.len() != b {
        return Err(Error::Contract(format!(
            "{} labels for {b} prediction rows",
            labels.len()
        )));
    }
    let ps = predictions.as_slice().unwrap();
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(bi, &y)| argmax_row(&ps[bi * k..(bi + 1) * k]) == y)
        .count();
    Ok(100.0 * correct as f64 / b as f64)
}

/// RMS displacement of the encoder's parameters from their snapshot:
/// the square root of the anchor penalty.
pub fn teacher_drift(snapshot: &ParameterSnapshot, encoder: &Encoder) -> Result<f64> {
    Ok(losses::anchor_penalty(snapshot, encoder)?.total.sqrt())
}

pub const EVAL_BATCH: usize = 256;

/// Runs `predict` over the split in fixed-order eval batches and returns the
/// top-1 percentage.
pub fn eval_top1<F>(split: &Split, mut predict: F) -> Result<f64>
where
    F: FnMut(&crate::data::Batch) -> Result<Array2<f64>>,
{
    if split.is_empty() {
        return Err(Error::Contract("evaluation over an empty split".into()));
    }
    let mut correct = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused: eval batches do not augment
    let indices: Vec<usize> = (0..split.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = split.batch(chunk, false, &mut rng);
        let probs = predict(&batch)?;
        let (b, k) = probs.dim();
        let ps = probs.as_slice().unwrap();
        for (bi, &y) in batch.y.iter().enumerate().take(b) {
            if argmax_row(&ps[bi * k..(bi + 1) * k]) == y {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / split.len() as f64)
}

/// Top-1 of the teacher path softmax(C(E_T(x))) over a split, eval-mode
/// forwards throughout. Measures a (possibly adapted) teacher directly.
pub fn evaluate_teacher(
    teacher_encoder: &Encoder,
    classifier: &SharedClassifier,
    split: &Split,
) -> Result<f64> {
    eval_top1(split, |batch| {
        let feat = teacher_encoder.forward_eval(&batch.x);
        let logits = classifier.forward_eval(&feat);
        Ok(losses::softmax_rows(&logits))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn all_correct_is_one_hundred_percent() {
        let mut p = Array2::zeros((4, 3));
        for i in 0..4 {
            p[(i, i % 3)] = 1.0;
        }
        let labels: Vec<usize> = (0..4).map(|i| i % 3).collect();
        assert_eq!(top1(&p, &labels).unwrap(), 100.0);
    }

    #[test]
    fn three_of_four_is_seventy_five() {
        let mut p = Array2::zeros((4, 2));
        for i in 0..4 {
            p[(i, 0)] = 1.0;
        }
        assert_eq!(top1(&p, &[0, 0, 0, 1]).unwrap(), 75.0);
    }

    #[test]
    fn ties_break_toward_the_lowest_index() {
        let p = Array2::zeros((1, 5));
        assert_eq!(top1(&p, &[0]).unwrap(), 100.0);
        assert_eq!(top1(&p, &[3]).unwrap(), 0.0);
    }

    #[test]
    fn empty_input_is_a_contract_violation() {
        let p = Array2::zeros((0, 3));
        assert!(top1(&p, &[]).is_err());
    }

    #[test]
    fn random_case_matches_loop_oracle() {
        let mut r = crate::rng::stream(5, &[101]);
        let n = 1000;
        let k = 7;
        let p = Array2::from_shape_fn((n, k), |_| r.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        // Plain loop oracle.
        let mut correct = 0;
        for i in 0..n {
            let mut best = 0;
            for c in 1..k {
                if p[(i, c)] > p[(i, best)] {
                    best = c;
                }
            }
            if best == labels[i] {
                correct += 1;
            }
        }
        let oracle = 100.0 * correct as f64 / n as f64;
        assert_eq!(top1(&p, &labels).unwrap(), oracle);
    }

    #[test]
    fn top1_is_invariant_under_monotone_transforms() {
        let mut r = crate::rng::stream(6, &[102]);
        let p = Array2::from_shape_fn((50, 4), |_| r.random_range(-2.0..2.0));
        let labels: Vec<usize> = (0..50).map(|_| r.random_range(0..4)).collect();
        let base = top1(&p, &labels).unwrap();
        let scaled = p.mapv(|v| 3.0 * v + 10.0);
        let expd = p.mapv(f64::exp);
        assert_eq!(top1(&scaled, &labels).unwrap(), base);
        assert_eq!(top1(&expd, &labels).unwrap(), base);
    }

    #[test]
    fn drift_examples() {
        use crate::model::encoder::{Encoder, EncoderSpec, Role};
        use crate::model::snapshot::snapshot_params;
        use crate::model::Parameterized;
        let mut enc = Encoder::new(
            EncoderSpec::Mlp {
                in_dim: 3,
                hidden: vec![],
                feat_dim: 2,
            },
            Role::Teacher,
            &mut crate::rng::stream(7, &[103]),
        )
        .unwrap();
        let snap = snapshot_params(&enc);
        assert_eq!(teacher_drift(&snap, &enc).unwrap(), 0.0);
        enc.visit_params_mut(&mut |_, _, v, _| v.iter_mut().for_each(|p| *p += 1.0));
        assert!((teacher_drift(&snap, &enc).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn drift_matches_direct_norm_computation() {
        use crate::model::encoder::{Encoder, EncoderSpec, Role};
        use crate::model::snapshot::snapshot_params;
        use crate::model::Parameterized;
        let mut r = crate::rng::stream(8, &[104]);
        let mut enc = Encoder::new(
            EncoderSpec::Mlp {
                in_dim: 5,
                hidden: vec![4],
                feat_dim: 3,
            },
            Role::Teacher,
            &mut r,
        )
        .unwrap();
        let snap = snapshot_params(&enc);
        let before = enc.flat_params();
        enc.visit_params_mut(&mut |_, _, v, _| {
            v.iter_mut().for_each(|p| *p += r.random_range(-0.2..0.2))
        });
        let after = enc.flat_params();
        let norm2: f64 = before
            .iter()
            .zip(&after)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let direct = (norm2 / before.len() as f64).sqrt();
        assert!((teacher_drift(&snap, &enc).unwrap() - direct).abs() <= 1e-12);
    }
}

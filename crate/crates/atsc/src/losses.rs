//! Training objectives: feature MSE, the parameter-anchor penalty,
//! cross-entropy, the two alternating-step composites, the student-based
//! fine-tune variant, and the multi-teacher extensions.
//!
//! Reduction convention: every MSE is the MEAN over all tensor elements,
//! batch included, which keeps the balancing weight's useful range stable
//! across model sizes. Softmax and cross-entropy run max-subtracted.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{
    Encoder, FeatureMap, ParameterSnapshot, Parameterized, Projector, SharedClassifier,
};
use crate::par;

/// A scalar objective with its named components. `total` is always the
/// documented combination of the components.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    components: BTreeMap<String, f64>,
}

impl LossValue {
    pub fn single(name: &str, value: f64) -> Self {
        let mut components = BTreeMap::new();
        components.insert(name.to_string(), value);
        LossValue {
            total: value,
            components,
        }
    }

    pub fn from_parts(total: f64, parts: &[(&str, f64)]) -> Self {
        LossValue {
            total,
            components: parts.iter().map(|(n, v)| (n.to_string(), *v)).collect(),
        }
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.get(name).copied()
    }

    pub fn components(&self) -> &BTreeMap<String, f64> {
        &self.components
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.components.values().all(|v| v.is_finite())
    }
}

/// Weight of the anchor penalty in the step-1 composite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalancingConfig {
    pub alpha: f64,
}

impl BalancingConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0) {
            return Err(Error::Config(format!(
                "balancing parameter must be nonnegative, got {alpha}"
            )));
        }
        Ok(BalancingConfig { alpha })
    }
}

// ---------------------------------------------------------------------------
// Softmax / cross-entropy
// ---------------------------------------------------------------------------

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let (b, k) = logits.dim();
    let ls = logits.as_slice().unwrap();
    let mut out = Array2::zeros((b, k));
    par::for_each_chunk_mut(out.as_slice_mut().unwrap(), k, |bi, row| {
        let z = &ls[bi * k..(bi + 1) * k];
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (o, &zv) in z.iter().enumerate() {
            let e = (zv - m).exp();
            row[o] = e;
            denom += e;
        }
        for v in row.iter_mut() {
            *v /= denom;
        }
    });
    out
}

fn check_labels(labels: &[usize], logits: &Array2<f64>) -> Result<()> {
    let (b, k) = logits.dim();
    if labels.len() != b {
        return Err(Error::Contract(format!(
            "{} labels for {b} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    Ok(())
}

/// Mean over the batch of -log softmax(logits)[label].
pub fn cross_entropy(labels: &[usize], logits: &Array2<f64>) -> Result<LossValue> {
    check_labels(labels, logits)?;
    let (b, k) = logits.dim();
    let ls = logits.as_slice().unwrap();
    let total = par::sum_over(b, |bi| {
        let z = &ls[bi * k..(bi + 1) * k];
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|&zv| (zv - m).exp()).sum::<f64>().ln();
        lse - z[labels[bi]]
    }) / b as f64;
    Ok(LossValue::single("ce", total))
}

/// Cross-entropy plus its gradient with respect to the logits,
/// `(softmax - onehot) / batch`.
pub fn cross_entropy_with_grad(
    labels: &[usize],
    logits: &Array2<f64>,
) -> Result<(LossValue, Array2<f64>)> {
    check_labels(labels, logits)?;
    let (b, k) = logits.dim();
    let loss = cross_entropy(labels, logits)?;
    let probs = softmax_rows(logits);
    let mut grad = probs;
    {
        let gs = grad.as_slice_mut().unwrap();
        for (bi, &y) in labels.iter().enumerate() {
            gs[bi * k + y] -= 1.0;
        }
        let inv = 1.0 / b as f64;
        for g in gs.iter_mut() {
            *g *= inv;
        }
    }
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Feature MSE and the anchor penalty
// ---------------------------------------------------------------------------

/// Mean squared difference over all elements of two same-shape feature maps.
pub fn feature_mse(t_feat: &FeatureMap, s_feat: &FeatureMap) -> Result<LossValue> {
    if t_feat.dim() != s_feat.dim() {
        return Err(Error::Contract(format!(
            "feature shapes differ: {:?} vs {:?}",
            t_feat.dim(),
            s_feat.dim()
        )));
    }
    Ok(LossValue::single("feat_mse", mse_flat_chunked(t_feat, s_feat)))
}

fn mse_flat_chunked(a: &FeatureMap, b: &FeatureMap) -> f64 {
    let n_samples = a.dim().0;
    let len = a.len();
    let chunk = len / n_samples;
    let avs = a.as_slice().unwrap();
    let bvs = b.as_slice().unwrap();
    par::sum_over(n_samples, |bi| {
        let mut s = 0.0;
        for i in bi * chunk..(bi + 1) * chunk {
            let d = avs[i] - bvs[i];
            s += d * d;
        }
        s
    }) / len as f64
}

/// Feature MSE together with its gradients: `d/dt = 2(t-s)/N` and
/// `d/ds = -2(t-s)/N` with N the total element count.
pub fn feature_mse_with_grads(
    t_feat: &FeatureMap,
    s_feat: &FeatureMap,
) -> Result<(LossValue, FeatureMap, FeatureMap)> {
    let loss = feature_mse(t_feat, s_feat)?;
    let scale = 2.0 / t_feat.len() as f64;
    let mut d_t = t_feat.clone();
    {
        let dt = d_t.as_slice_mut().unwrap();
        let sv = s_feat.as_slice().unwrap();
        for (d, &s) in dt.iter_mut().zip(sv.iter()) {
            *d = (*d - s) * scale;
        }
    }
    let d_s = d_t.mapv(|v| -v);
    Ok((loss, d_t, d_s))
}

/// MSE between the current encoder parameters and their snapshot,
/// `(1/n) * sum (theta_i - theta*_i)^2`. The gradient with respect to the
/// parameters is `2 (theta - theta*) / n`, applied directly by the trainer.
pub fn anchor_penalty(snapshot: &ParameterSnapshot, current: &Encoder) -> Result<LossValue> {
    let theta = current.flat_params();
    anchor_penalty_flat(snapshot, &theta)
}

pub(crate) fn anchor_penalty_flat(
    snapshot: &ParameterSnapshot,
    theta: &[f64],
) -> Result<LossValue> {
    if theta.len() != snapshot.n() {
        return Err(Error::Contract(format!(
            "parameter count {} does not match snapshot length {}",
            theta.len(),
            snapshot.n()
        )));
    }
    let mut s = 0.0;
    for (t, a) in theta.iter().zip(snapshot.values()) {
        let d = t - a;
        s += d * d;
    }
    Ok(LossValue::single("anchor", s / theta.len() as f64))
}

// ---------------------------------------------------------------------------
// Step composites
// ---------------------------------------------------------------------------

/// Step-1 composite: feature MSE plus `alpha` times the anchor penalty on the
/// teacher encoder.
pub fn step1_loss(
    t_feat: &FeatureMap,
    s_feat_projected: &FeatureMap,
    snapshot: &ParameterSnapshot,
    teacher_encoder: &Encoder,
    cfg: &BalancingConfig,
) -> Result<LossValue> {
    let mse = feature_mse(t_feat, s_feat_projected)?.total;
    let anchor = anchor_penalty(snapshot, teacher_encoder)?.total;
    Ok(LossValue::from_parts(
        mse + cfg.alpha * anchor,
        &[("feat_mse", mse), ("anchor", anchor)],
    ))
}

/// Step-2 objective for teacher-based fine-tuning: CE of the shared
/// classifier on the (frozen, eval-mode) teacher encoder's features.
pub fn step2_loss_teacher(
    labels: &[usize],
    teacher_encoder: &Encoder,
    classifier: &SharedClassifier,
    x: &FeatureMap,
) -> Result<LossValue> {
    let feat = teacher_encoder.forward_eval(x);
    let logits = classifier.forward_eval(&feat);
    cross_entropy(labels, &logits)
}

/// Student-based fine-tune variant: CE of the shared classifier on the
/// projected student features. Used only by the corresponding ablation mode.
pub fn step2_loss_student(
    labels: &[usize],
    student_encoder: &Encoder,
    projector: &Projector,
    classifier: &SharedClassifier,
    x: &FeatureMap,
) -> Result<LossValue> {
    let feat = student_encoder.forward_eval(x);
    let projected = projector.forward_eval(&feat);
    let logits = classifier.forward_eval(&projected);
    cross_entropy(labels, &logits)
}

// ---------------------------------------------------------------------------
// Multi-teacher extensions
// ---------------------------------------------------------------------------

fn check_fanout(n: usize, what: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::Contract(format!("{what} requires at least one teacher")));
    }
    Ok(())
}

/// Multi-teacher step-1 composite: per-teacher feature MSE plus the
/// per-teacher anchor penalty, the balancing weight applied inside the sum.
pub fn mt_step1_loss(
    teacher_feats: &[FeatureMap],
    student_feats_projected: &[FeatureMap],
    snapshots: &[&ParameterSnapshot],
    teacher_encoders: &[&Encoder],
    cfg: &BalancingConfig,
) -> Result<LossValue> {
    let n = teacher_encoders.len();
    check_fanout(n, "mt_step1_loss")?;
    if teacher_feats.len() != n || student_feats_projected.len() != n || snapshots.len() != n {
        return Err(Error::Contract(
            "per-teacher argument lists must have equal length".into(),
        ));
    }
    let mut total = 0.0;
    let mut mse_sum = 0.0;
    let mut anchor_sum = 0.0;
    for i in 0..n {
        let mse = feature_mse(&teacher_feats[i], &student_feats_projected[i])?.total;
        let anchor = anchor_penalty(snapshots[i], teacher_encoders[i])?.total;
        total += mse + cfg.alpha * anchor;
        mse_sum += mse;
        anchor_sum += anchor;
    }
    Ok(LossValue::from_parts(
        total,
        &[("feat_mse", mse_sum), ("anchor", anchor_sum)],
    ))
}

/// Multi-teacher step-2 objective: CE on the per-teacher logits averaged
/// BEFORE the softmax.
pub fn mt_step2_loss(
    labels: &[usize],
    teacher_encoders: &[&Encoder],
    classifiers: &[&SharedClassifier],
    x: &FeatureMap,
) -> Result<LossValue> {
    let n = teacher_encoders.len();
    check_fanout(n, "mt_step2_loss")?;
    if classifiers.len() != n {
        return Err(Error::Contract(
            "one classifier per teacher is required".into(),
        ));
    }
    let mut mean_logits: Option<Array2<f64>> = None;
    for i in 0..n {
        let feat = teacher_encoders[i].forward_eval(x);
        let logits = classifiers[i].forward_eval(&feat);
        mean_logits = Some(match mean_logits {
            None => logits,
            Some(acc) => acc + logits,
        });
    }
    let mean_logits = mean_logits.unwrap() / n as f64;
    cross_entropy(labels, &mean_logits)
}

/// Multi-teacher inference path: softmax of the average over teachers of
/// `C_i(P_i(E_S(x)))`.
pub fn mt_student_predict(
    x: &FeatureMap,
    student: &Encoder,
    projectors: &[&Projector],
    classifiers: &[&SharedClassifier],
) -> Result<Array2<f64>> {
    let n = projectors.len();
    check_fanout(n, "mt_student_predict")?;
    if classifiers.len() != n {
        return Err(Error::Contract(
            "one classifier per projector is required".into(),
        ));
    }
    let feat = student.forward_eval(x);
    let mut mean_logits: Option<Array2<f64>> = None;
    for i in 0..n {
        let projected = projectors[i].forward_eval(&feat);
        let logits = classifiers[i].forward_eval(&projected);
        mean_logits = Some(match mean_logits {
            None => logits,
            Some(acc) => acc + logits,
        });
    }
    Ok(softmax_rows(&(mean_logits.unwrap() / n as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::encoder::{EncoderSpec, Role};
    use crate::model::snapshot::snapshot_params;
    use crate::rng;
    use ndarray::Array4;
    use rand::Rng;

    fn map_from(vals: &[f64]) -> FeatureMap {
        Array4::from_shape_vec((1, 1, 1, vals.len()), vals.to_vec()).unwrap()
    }

    fn rand_map(rng: &mut impl Rng, dim: (usize, usize, usize, usize)) -> FeatureMap {
        Array4::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn feature_mse_identity_is_zero() {
        let t = map_from(&[0.3, -0.7, 2.0]);
        assert_eq!(feature_mse(&t, &t).unwrap().total, 0.0);
    }

    #[test]
    fn feature_mse_two_element_hand_case() {
        let t = map_from(&[1.0, 3.0]);
        let s = map_from(&[1.0, 1.0]);
        assert_eq!(feature_mse(&t, &s).unwrap().total, 2.0);
    }

    #[test]
    fn feature_mse_matches_scalar_loop_oracle() {
        let mut r = rng::stream(11, &[50]);
        let t = rand_map(&mut r, (2, 4, 4, 3));
        let s = rand_map(&mut r, (2, 4, 4, 3));
        // Independent element-loop oracle.
        let mut acc = 0.0;
        for (a, b) in t.iter().zip(s.iter()) {
            acc += (a - b) * (a - b);
        }
        let oracle = acc / t.len() as f64;
        let got = feature_mse(&t, &s).unwrap().total;
        assert!((got - oracle).abs() <= 1e-12 * oracle.abs().max(1e-12));
    }

    #[test]
    fn feature_mse_is_symmetric_and_nonnegative() {
        let mut r = rng::stream(12, &[51]);
        for _ in 0..20 {
            let a = rand_map(&mut r, (2, 2, 3, 2));
            let b = rand_map(&mut r, (2, 2, 3, 2));
            let ab = feature_mse(&a, &b).unwrap().total;
            let ba = feature_mse(&b, &a).unwrap().total;
            assert_eq!(ab, ba);
            assert!(ab >= 0.0);
        }
    }

    #[test]
    fn feature_mse_rejects_shape_mismatch() {
        let a = FeatureMap::zeros((1, 2, 2, 1));
        let b = FeatureMap::zeros((1, 2, 2, 2));
        assert!(feature_mse(&a, &b).is_err());
    }

    fn tiny_encoder(n_in: usize, n_out: usize, seed: u64) -> Encoder {
        Encoder::new(
            EncoderSpec::Mlp {
                in_dim: n_in,
                hidden: vec![],
                feat_dim: n_out,
            },
            Role::Teacher,
            &mut rng::stream(seed, &[52]),
        )
        .unwrap()
    }

    #[test]
    fn anchor_penalty_zero_at_snapshot() {
        let enc = tiny_encoder(3, 2, 1);
        let snap = snapshot_params(&enc);
        assert_eq!(anchor_penalty(&snap, &enc).unwrap().total, 0.0);
    }

    #[test]
    fn anchor_penalty_unit_displacement() {
        // 4 trainable scalars: 3x1 weight + 1 bias.
        let mut enc = tiny_encoder(3, 1, 2);
        enc.visit_params_mut(&mut |_, _, v, _| v.fill(0.0));
        let snap = snapshot_params(&enc);
        enc.visit_params_mut(&mut |_, _, v, _| v.fill(1.0));
        assert_eq!(enc.param_count(), 4);
        assert_eq!(anchor_penalty(&snap, &enc).unwrap().total, 1.0);
    }

    #[test]
    fn cross_entropy_uniform_equals_ln_k() {
        let logits = Array2::zeros((3, 10));
        let labels = [1usize, 5, 9];
        let ce = cross_entropy(&labels, &logits).unwrap().total;
        assert!((ce - 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_case_is_tiny() {
        let mut logits = Array2::zeros((1, 4));
        logits[(0, 2)] = 1000.0;
        let ce = cross_entropy(&[2], &logits).unwrap().total;
        assert!(ce < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_per_sample_oracle() {
        let mut r = rng::stream(13, &[53]);
        let logits = Array2::from_shape_fn((8, 5), |_| r.random_range(-3.0..3.0));
        let labels: Vec<usize> = (0..8).map(|_| r.random_range(0..5)).collect();
        // Per-sample softmax-log oracle.
        let mut acc = 0.0;
        for bi in 0..8 {
            let row: Vec<f64> = (0..5).map(|k| logits[(bi, k)]).collect();
            let denom: f64 = row.iter().map(|z| z.exp()).sum();
            let p = row[labels[bi]].exp() / denom;
            acc += -p.ln();
        }
        let oracle = acc / 8.0;
        let got = cross_entropy(&labels, &logits).unwrap().total;
        assert!((got - oracle).abs() <= 1e-10);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_labels() {
        let logits = Array2::zeros((2, 3));
        assert!(cross_entropy(&[0, 3], &logits).is_err());
    }

    #[test]
    fn step1_at_anchor_reduces_to_feature_mse() {
        let enc = tiny_encoder(3, 2, 3);
        let snap = snapshot_params(&enc);
        let t = map_from(&[0.5, -1.0]);
        let s = map_from(&[0.0, 0.0]);
        let mse = feature_mse(&t, &s).unwrap().total;
        for alpha in [0.0, 1.0, 17.5, 1e6] {
            let cfg = BalancingConfig::new(alpha).unwrap();
            let loss = step1_loss(&t, &s, &snap, &enc, &cfg).unwrap();
            assert_eq!(loss.total, mse);
        }
    }

    #[test]
    fn step1_composes_arithmetically() {
        // feat_mse = 0.5 and anchor = 0.02 with alpha = 10 -> 0.7.
        let mut enc = tiny_encoder(1, 1, 4);
        enc.visit_params_mut(&mut |_, _, v, _| v.fill(0.0));
        let snap = snapshot_params(&enc);
        enc.visit_params_mut(&mut |_, _, v, _| v.copy_from_slice(&[0.2][..v.len().min(1)]));
        // two params (weight, bias): set to (0.2, 0.0) -> mean square = 0.02
        let mut first = true;
        enc.visit_params_mut(&mut |_, _, v, _| {
            for p in v.iter_mut() {
                *p = if first { 0.2 } else { 0.0 };
                first = false;
            }
        });
        let t = map_from(&[1.0, 0.0]);
        let s = map_from(&[0.0, 0.0]);
        let cfg = BalancingConfig::new(10.0).unwrap();
        let loss = step1_loss(&t, &s, &snap, &enc, &cfg).unwrap();
        assert!((loss.component("feat_mse").unwrap() - 0.5).abs() < 1e-15);
        assert!((loss.component("anchor").unwrap() - 0.02).abs() < 1e-15);
        assert!((loss.total - 0.7).abs() < 1e-12);
    }

    #[test]
    fn step1_is_monotone_in_alpha_when_anchored_away() {
        let mut r = rng::stream(14, &[54]);
        let mut enc = tiny_encoder(4, 3, 5);
        let snap = snapshot_params(&enc);
        enc.visit_params_mut(&mut |_, _, v, _| {
            v.iter_mut().for_each(|p| *p += r.random_range(0.01..0.1))
        });
        let t = rand_map(&mut r, (2, 1, 1, 3));
        let s = rand_map(&mut r, (2, 1, 1, 3));
        let mut last = f64::NEG_INFINITY;
        for alpha in [0.0, 0.1, 1.0, 10.0, 100.0] {
            let cfg = BalancingConfig::new(alpha).unwrap();
            let loss = step1_loss(&t, &s, &snap, &enc, &cfg).unwrap();
            assert!(loss.total > last);
            last = loss.total;
        }
    }

    #[test]
    fn zero_classifier_step2_losses_equal_ln_k() {
        let mut r = rng::stream(15, &[55]);
        let enc = tiny_encoder(4, 3, 6);
        let mut clf = SharedClassifier::new(3, 7, &mut r);
        clf.visit_params_mut(&mut |_, _, v, _| v.fill(0.0));
        let x = rand_map(&mut r, (5, 1, 1, 4));
        let labels = [0usize, 1, 2, 3, 4];
        let loss = step2_loss_teacher(&labels, &enc, &clf, &x).unwrap();
        assert!((loss.total - 7.0f64.ln()).abs() < 1e-12);

        let mut proj = crate::model::build_projector(3, 3, 1).unwrap();
        proj.init(&mut r);
        let loss_s = step2_loss_student(&labels, &enc, &proj, &clf, &x).unwrap();
        assert!((loss_s.total - 7.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn step2_teacher_matches_composition_oracle() {
        let mut r = rng::stream(16, &[56]);
        let enc = tiny_encoder(4, 3, 7);
        let clf = SharedClassifier::new(3, 5, &mut r);
        let x = rand_map(&mut r, (4, 1, 1, 4));
        let labels = [0usize, 4, 2, 1];
        let loss = step2_loss_teacher(&labels, &enc, &clf, &x).unwrap();
        // Oracle: precompute the logits explicitly, then apply cross_entropy.
        let feat = enc.forward_eval(&x);
        let logits = clf.forward_eval(&feat);
        let oracle = cross_entropy(&labels, &logits).unwrap();
        assert!((loss.total - oracle.total).abs() <= 1e-10);
    }

    /// Builds a projector that is the exact identity on nonnegative inputs:
    /// identity conv kernels, and BN gains set to sqrt(1 + eps) so the
    /// running-statistics normalization cancels exactly.
    fn identity_projector(ch: usize) -> Projector {
        let mut p = crate::model::build_projector(ch, ch, 1).unwrap();
        let gain = (1.0 + crate::model::layers::BN_EPS).sqrt();
        let mut li = 0;
        p.visit_params_mut(&mut |name, _, v, _| {
            if name.ends_with("weight") {
                v.fill(0.0);
                // conv0/conv2 are 1x1; conv1 is 3x3 with the identity at the
                // center tap.
                let k = if name.contains("conv1") { 3 } else { 1 };
                let center = k / 2;
                for c in 0..ch {
                    let idx = ((center * k + center) * ch + c) * ch + c;
                    v[idx] = 1.0;
                }
                li += 1;
            } else if name.ends_with("gamma") {
                v.fill(gain);
            }
        });
        p
    }

    #[test]
    fn step2_paths_agree_with_identity_projector() {
        // When P(E_S(x)) reproduces E_T(x) exactly, both step-2 variants see
        // identical logits. ReLU encoders emit nonnegative features, so the
        // identity projector is exact.
        let mut r = rng::stream(17, &[57]);
        let enc = tiny_encoder(4, 3, 8);
        let proj = identity_projector(3);
        let clf = SharedClassifier::new(3, 4, &mut r);
        let x = rand_map(&mut r, (3, 1, 1, 4));
        let labels = [0usize, 1, 3];
        let a = step2_loss_teacher(&labels, &enc, &clf, &x).unwrap();
        let b = step2_loss_student(&labels, &enc, &proj, &clf, &x).unwrap();
        assert_eq!(a.total, b.total);
    }

    #[test]
    fn mt_step1_degenerates_to_single_teacher() {
        let mut r = rng::stream(18, &[58]);
        let enc = tiny_encoder(4, 3, 9);
        let snap = snapshot_params(&enc);
        let t = rand_map(&mut r, (2, 1, 1, 3));
        let s = rand_map(&mut r, (2, 1, 1, 3));
        let cfg = BalancingConfig::new(2.5).unwrap();
        let single = step1_loss(&t, &s, &snap, &enc, &cfg).unwrap();
        let multi = mt_step1_loss(
            std::slice::from_ref(&t),
            std::slice::from_ref(&s),
            &[&snap],
            &[&enc],
            &cfg,
        )
        .unwrap();
        assert_eq!(single.total, multi.total);
    }

    #[test]
    fn mt_step1_is_additive_over_identical_pairs() {
        let mut r = rng::stream(19, &[59]);
        let mut enc = tiny_encoder(4, 3, 10);
        let snap = snapshot_params(&enc);
        enc.visit_params_mut(&mut |_, _, v, _| v.iter_mut().for_each(|p| *p += 0.05));
        let t = rand_map(&mut r, (2, 1, 1, 3));
        let s = rand_map(&mut r, (2, 1, 1, 3));
        let cfg = BalancingConfig::new(1.5).unwrap();
        let single = step1_loss(&t, &s, &snap, &enc, &cfg).unwrap();
        for n in [2usize, 3, 5] {
            let feats: Vec<FeatureMap> = (0..n).map(|_| t.clone()).collect();
            let sfeats: Vec<FeatureMap> = (0..n).map(|_| s.clone()).collect();
            let snaps: Vec<&ParameterSnapshot> = (0..n).map(|_| &snap).collect();
            let encs: Vec<&Encoder> = (0..n).map(|_| &enc).collect();
            let multi = mt_step1_loss(&feats, &sfeats, &snaps, &encs, &cfg).unwrap();
            assert!((multi.total - n as f64 * single.total).abs() <= 1e-12 * multi.total.abs());
        }
    }

    #[test]
    fn mt_step1_matches_three_term_oracle() {
        let mut r = rng::stream(20, &[60]);
        let encs: Vec<Encoder> = (0..3).map(|i| tiny_encoder(4, 3, 20 + i)).collect();
        let snaps: Vec<ParameterSnapshot> = encs.iter().map(|e| snapshot_params(e)).collect();
        let feats: Vec<FeatureMap> = (0..3).map(|_| rand_map(&mut r, (2, 1, 1, 3))).collect();
        let sfeats: Vec<FeatureMap> = (0..3).map(|_| rand_map(&mut r, (2, 1, 1, 3))).collect();
        let cfg = BalancingConfig::new(0.7).unwrap();
        // Explicit three-term summation oracle.
        let mut oracle = 0.0;
        for i in 0..3 {
            oracle += feature_mse(&feats[i], &sfeats[i]).unwrap().total
                + cfg.alpha * anchor_penalty(&snaps[i], &encs[i]).unwrap().total;
        }
        let snap_refs: Vec<&ParameterSnapshot> = snaps.iter().collect();
        let enc_refs: Vec<&Encoder> = encs.iter().collect();
        let got = mt_step1_loss(&feats, &sfeats, &snap_refs, &enc_refs, &cfg).unwrap();
        assert!((got.total - oracle).abs() <= 1e-12 * oracle.abs().max(1e-12));
    }

    #[test]
    fn mt_step2_single_teacher_equals_step2() {
        let mut r = rng::stream(21, &[61]);
        let enc = tiny_encoder(4, 3, 30);
        let clf = SharedClassifier::new(3, 5, &mut r);
        let x = rand_map(&mut r, (4, 1, 1, 4));
        let labels = [0usize, 1, 2, 3];
        let single = step2_loss_teacher(&labels, &enc, &clf, &x).unwrap();
        let multi = mt_step2_loss(&labels, &[&enc], &[&clf], &x).unwrap();
        assert_eq!(single.total, multi.total);
    }

    #[test]
    fn mt_step2_average_of_equal_logits_is_identity() {
        let mut r = rng::stream(22, &[62]);
        let enc = tiny_encoder(4, 3, 31);
        let clf = SharedClassifier::new(3, 5, &mut r);
        let x = rand_map(&mut r, (3, 1, 1, 4));
        let labels = [2usize, 0, 4];
        let single = mt_step2_loss(&labels, &[&enc], &[&clf], &x).unwrap();
        let double = mt_step2_loss(&labels, &[&enc, &enc], &[&clf, &clf], &x).unwrap();
        assert!((single.total - double.total).abs() <= 1e-12);
    }

    #[test]
    fn mt_step2_matches_average_then_softmax_oracle() {
        let mut r = rng::stream(23, &[63]);
        let enc_a = tiny_encoder(4, 3, 32);
        let enc_b = tiny_encoder(4, 3, 33);
        let clf_a = SharedClassifier::new(3, 5, &mut r);
        let clf_b = SharedClassifier::new(3, 5, &mut r);
        let x = rand_map(&mut r, (4, 1, 1, 4));
        let labels = [1usize, 2, 3, 0];
        let la = clf_a.forward_eval(&enc_a.forward_eval(&x));
        let lb = clf_b.forward_eval(&enc_b.forward_eval(&x));
        let avg = (la + lb) / 2.0;
        let oracle = cross_entropy(&labels, &avg).unwrap();
        let got = mt_step2_loss(&labels, &[&enc_a, &enc_b], &[&clf_a, &clf_b], &x).unwrap();
        assert!((got.total - oracle.total).abs() <= 1e-10);
    }

    #[test]
    fn mt_predict_single_equals_student_predict() {
        let mut r = rng::stream(24, &[64]);
        let student = tiny_encoder(4, 3, 40);
        let mut proj = crate::model::build_projector(3, 6, 2).unwrap();
        proj.init(&mut r);
        let clf = SharedClassifier::new(6, 5, &mut r);
        let x = rand_map(&mut r, (3, 1, 1, 4));
        let single = crate::model::student_predict(&x, &student, &proj, &clf).unwrap();
        let multi = mt_student_predict(&x, &student, &[&proj], &[&clf]).unwrap();
        assert_eq!(single, multi);
    }

    #[test]
    fn mt_predict_zero_classifiers_are_uniform() {
        let mut r = rng::stream(25, &[65]);
        let student = tiny_encoder(4, 3, 41);
        let mut proj = crate::model::build_projector(3, 6, 2).unwrap();
        proj.init(&mut r);
        let mut clf = SharedClassifier::new(6, 5, &mut r);
        clf.visit_params_mut(&mut |_, _, v, _| v.fill(0.0));
        let x = rand_map(&mut r, (2, 1, 1, 4));
        let probs = mt_student_predict(&x, &student, &[&proj, &proj], &[&clf, &clf]).unwrap();
        for v in probs.iter() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn mt_predict_matches_explicit_oracle() {
        let mut r = rng::stream(26, &[66]);
        let student = tiny_encoder(4, 3, 42);
        let mut projs = Vec::new();
        let mut clfs = Vec::new();
        for _ in 0..3 {
            let mut p = crate::model::build_projector(3, 6, 2).unwrap();
            p.init(&mut r);
            projs.push(p);
            clfs.push(SharedClassifier::new(6, 5, &mut r));
        }
        let x = rand_map(&mut r, (2, 1, 1, 4));
        let feat = student.forward_eval(&x);
        let mut acc: Option<Array2<f64>> = None;
        for i in 0..3 {
            let l = clfs[i].forward_eval(&projs[i].forward_eval(&feat));
            acc = Some(match acc {
                None => l,
                Some(a) => a + l,
            });
        }
        let oracle = softmax_rows(&(acc.unwrap() / 3.0));
        let pr: Vec<&Projector> = projs.iter().collect();
        let cr: Vec<&SharedClassifier> = clfs.iter().collect();
        let got = mt_student_predict(&x, &student, &pr, &cr).unwrap();
        for (a, b) in got.iter().zip(oracle.iter()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn predictions_are_probability_rows() {
        let mut r = rng::stream(27, &[67]);
        let student = tiny_encoder(4, 3, 43);
        let mut proj = crate::model::build_projector(3, 6, 2).unwrap();
        proj.init(&mut r);
        let clf = SharedClassifier::new(6, 9, &mut r);
        let x = rand_map(&mut r, (6, 1, 1, 4));
        let probs = crate::model::student_predict(&x, &student, &proj, &clf).unwrap();
        for bi in 0..6 {
            let row_sum: f64 = (0..9).map(|k| probs[(bi, k)]).sum();
            assert!((row_sum - 1.0).abs() < 1e-6);
            for k in 0..9 {
                assert!(probs[(bi, k)] > 0.0 && probs[(bi, k)] < 1.0);
            }
        }
    }

    #[test]
    fn zero_classifier_prediction_is_uniform() {
        let mut r = rng::stream(28, &[68]);
        let student = tiny_encoder(4, 3, 44);
        let mut proj = crate::model::build_projector(3, 6, 2).unwrap();
        proj.init(&mut r);
        let mut clf = SharedClassifier::new(6, 5, &mut r);
        clf.visit_params_mut(&mut |_, _, v, _| v.fill(0.0));
        let x = rand_map(&mut r, (2, 1, 1, 4));
        let probs = crate::model::student_predict(&x, &student, &proj, &clf).unwrap();
        for v in probs.iter() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_is_bit_stable_across_calls() {
        let mut r = rng::stream(29, &[69]);
        let student = tiny_encoder(4, 3, 45);
        let mut proj = crate::model::build_projector(3, 6, 2).unwrap();
        proj.init(&mut r);
        let clf = SharedClassifier::new(6, 5, &mut r);
        let x = rand_map(&mut r, (2, 1, 1, 4));
        let a = crate::model::student_predict(&x, &student, &proj, &clf).unwrap();
        let b = crate::model::student_predict(&x, &student, &proj, &clf).unwrap();
        assert_eq!(a, b);
    }
}

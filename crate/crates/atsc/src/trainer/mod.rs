//! The per-batch alternating trainer.
//!
//! Each mode is a fixed sequence of sub-steps executed on the SAME minibatch:
//! an optional online teacher self-update, the feature-matching step
//! (updating teacher encoder(s), student encoder, and projector(s) unless the
//! teacher is frozen), and the classifier fine-tune step. Every sub-step owns
//! a disjoint view of the parameters through its own optimizer instance, and
//! parts outside the active group are untouched bit for bit, batch-norm
//! running statistics included.

pub mod optim;

use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{self, Batch, Split};
use crate::error::{Error, Result};
use crate::losses::{self, BalancingConfig, LossValue};
use crate::metrics::{self, MetricRow};
use crate::model::checkpoint::{self, RunCheckpoint, TeacherCheckpoint};
use crate::model::{
    align_spatial, build_projector, count_params, snapshot_params, Encoder,
    FeatureMap, ForwardMode, ParamCounts, ParameterSnapshot, Parameterized, PartLabel, Projector,
    Role, SharedClassifier,
};
use crate::model::layers::align_spatial_backward;
use crate::rng::{self, tag};

pub use optim::{lr_at, OptimConfig, SgdGroup};

/// Loss ceiling past which a run is declared diverged.
pub const DIVERGENCE_CEILING: f64 = 1e6;

/// Training modes. Each fixes which parameter groups the sub-steps update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainMode {
    /// Anchored teacher adaptation + classifier fine-tune, per batch.
    #[serde(rename = "atsc")]
    Atsc,
    /// Frozen pretrained teacher; student + projector match its features;
    /// classifier copied from the teacher and never updated.
    #[serde(rename = "simkd")]
    SimKd,
    /// Online variant: randomly initialized teacher self-trains on CE, then
    /// the student + projector match its features.
    #[serde(rename = "o_simkd")]
    OSimKd,
    /// Online variant: teacher self-update, then the anchored two-step.
    #[serde(rename = "o_atsc")]
    OAtsc,
    /// Ablation: step 2 fine-tunes the classifier on the projected student
    /// features instead of the teacher features.
    #[serde(rename = "atsc_student_ft")]
    AtscStudentFt,
    /// Plain CE training of the student encoder with its own classifier.
    #[serde(rename = "standalone_student")]
    StandaloneStudent,
    /// Anchored adaptation against several teachers with per-teacher
    /// projectors and classifiers.
    #[serde(rename = "multi_atsc")]
    MultiAtsc,
}

impl TrainMode {
    pub fn requires_pretrained_teacher(&self) -> bool {
        matches!(
            self,
            TrainMode::Atsc | TrainMode::SimKd | TrainMode::AtscStudentFt | TrainMode::MultiAtsc
        )
    }

    pub fn is_online(&self) -> bool {
        matches!(self, TrainMode::OSimKd | TrainMode::OAtsc)
    }

    /// Whether the anchor penalty (and its balancing weight) participates.
    pub fn uses_alpha(&self) -> bool {
        matches!(
            self,
            TrainMode::Atsc | TrainMode::OAtsc | TrainMode::AtscStudentFt | TrainMode::MultiAtsc
        )
    }

    /// Whether a classifier fine-tune step runs.
    pub fn has_step2(&self) -> bool {
        matches!(
            self,
            TrainMode::Atsc | TrainMode::OAtsc | TrainMode::AtscStudentFt | TrainMode::MultiAtsc
        )
    }

    pub fn uses_projector(&self) -> bool {
        !matches!(self, TrainMode::StandaloneStudent)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Atsc => "atsc",
            TrainMode::SimKd => "simkd",
            TrainMode::OSimKd => "o_simkd",
            TrainMode::OAtsc => "o_atsc",
            TrainMode::AtscStudentFt => "atsc_student_ft",
            TrainMode::StandaloneStudent => "standalone_student",
            TrainMode::MultiAtsc => "multi_atsc",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One teacher with everything attached to it: its classifier, the projector
/// mapping student features onto its channel width, and the parameter anchor
/// taken before collaborative training.
#[derive(Clone)]
pub struct TeacherBundle {
    pub encoder: Encoder,
    pub classifier: SharedClassifier,
    pub projector: Projector,
    pub snapshot: ParameterSnapshot,
    pub pretrained_accuracy: Option<f64>,
}

/// Losses produced by one call to `step_batch`, one entry per executed
/// sub-step.
#[derive(Debug, Clone)]
pub struct StepLosses {
    pub step1: LossValue,
    pub step2: Option<LossValue>,
    pub self_update: Option<LossValue>,
}

/// Diagnostic switches for baseline-equivalence checks: freeze the teacher
/// inside step 1 (eval-mode forward, no updates) and/or skip step 2.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepOverrides {
    pub freeze_teacher_in_step1: bool,
    pub skip_step2: bool,
}

#[derive(Clone)]
pub struct TrainState {
    pub mode: TrainMode,
    pub alpha: f64,
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub teachers: Vec<TeacherBundle>,
    pub student: Encoder,
    /// Present only in standalone mode.
    pub student_classifier: Option<SharedClassifier>,
    opt_step1: SgdGroup,
    opt_step2: SgdGroup,
    opt_self: SgdGroup,
}

impl TrainState {
    /// Assembles a training state. `teachers` come either from pretrained
    /// checkpoints or (for online modes) fresh random initialization;
    /// projectors and the standalone classifier are seeded here.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mode: TrainMode,
        alpha: f64,
        teachers: Vec<(Encoder, SharedClassifier, Option<f64>)>,
        student: Encoder,
        reduction_factor: usize,
        num_classes: usize,
        seed: u64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<Self> {
        match mode {
            TrainMode::StandaloneStudent => {
                if !teachers.is_empty() {
                    return Err(Error::Config("standalone_student takes no teachers".into()));
                }
            }
            TrainMode::MultiAtsc => {
                if teachers.is_empty() {
                    return Err(Error::Config("multi_atsc requires at least one teacher".into()));
                }
            }
            _ => {
                if teachers.len() != 1 {
                    return Err(Error::Config(format!(
                        "mode {mode} requires exactly one teacher, got {}",
                        teachers.len()
                    )));
                }
            }
        }

        let s_hw = student.out_hw();
        let mut bundles = Vec::with_capacity(teachers.len());
        for (i, (encoder, classifier, pretrained_accuracy)) in teachers.into_iter().enumerate() {
            if classifier.num_classes != num_classes {
                return Err(Error::Config(format!(
                    "teacher {i} classifier has {} classes, dataset has {num_classes}",
                    classifier.num_classes
                )));
            }
            if classifier.ch_in != encoder.out_channels() {
                return Err(Error::Config(format!(
                    "teacher {i} classifier width {} does not match its encoder's {}",
                    classifier.ch_in,
                    encoder.out_channels()
                )));
            }
            let t_hw = encoder.out_hw();
            if t_hw.0 < s_hw.0 || t_hw.1 < s_hw.1 || t_hw.0 % s_hw.0 != 0 || t_hw.1 % s_hw.1 != 0 {
                return Err(Error::Config(format!(
                    "teacher {i} spatial output {t_hw:?} cannot be average-pooled onto the student's {s_hw:?}"
                )));
            }
            let mut projector =
                build_projector(student.out_channels(), encoder.out_channels(), reduction_factor)?;
            projector.init(&mut rng::stream(seed, &[tag::PROJECTOR, i as u64]));
            let snapshot = snapshot_params(&encoder);
            bundles.push(TeacherBundle {
                encoder,
                classifier,
                projector,
                snapshot,
                pretrained_accuracy,
            });
        }

        let student_classifier = if mode == TrainMode::StandaloneStudent {
            Some(SharedClassifier::new(
                student.out_channels(),
                num_classes,
                &mut rng::stream(seed, &[tag::STUDENT_CLASSIFIER]),
            ))
        } else {
            None
        };

        Ok(TrainState {
            mode,
            alpha,
            epoch: 0,
            batch_in_epoch: 0,
            teachers: bundles,
            student,
            student_classifier,
            opt_step1: SgdGroup::new(momentum, weight_decay),
            opt_step2: SgdGroup::new(momentum, weight_decay),
            opt_self: SgdGroup::new(momentum, weight_decay),
        })
    }

    fn divergence_check(&self, loss: &LossValue) -> Result<()> {
        let mut offending: Option<(String, f64)> = None;
        if !loss.total.is_finite() || loss.total.abs() > DIVERGENCE_CEILING {
            offending = Some(("total".to_string(), loss.total));
        }
        for (name, &v) in loss.components() {
            if !v.is_finite() || v.abs() > DIVERGENCE_CEILING {
                offending = Some((name.clone(), v));
                break;
            }
        }
        match offending {
            None => Ok(()),
            Some((component, value)) => Err(Error::Divergence {
                epoch: self.epoch,
                batch: self.batch_in_epoch,
                component,
                value,
            }),
        }
    }

    /// Runs the mode's sub-step sequence on one minibatch.
    pub fn step_batch(&mut self, batch: &Batch, lr: f64) -> Result<StepLosses> {
        self.step_batch_with(batch, lr, StepOverrides::default())
    }

    pub fn step_batch_with(
        &mut self,
        batch: &Batch,
        lr: f64,
        ov: StepOverrides,
    ) -> Result<StepLosses> {
        if batch.y.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        match self.mode {
            TrainMode::StandaloneStudent => {
                let l = self.run_standalone_step(batch, lr)?;
                Ok(StepLosses {
                    step1: l,
                    step2: None,
                    self_update: None,
                })
            }
            TrainMode::SimKd => {
                let step1 = self.run_step1(batch, lr, true)?;
                Ok(StepLosses {
                    step1,
                    step2: None,
                    self_update: None,
                })
            }
            TrainMode::OSimKd => {
                let self_update = self.run_self_update(batch, lr)?;
                let step1 = self.run_step1(batch, lr, true)?;
                Ok(StepLosses {
                    step1,
                    step2: None,
                    self_update: Some(self_update),
                })
            }
            TrainMode::OAtsc => {
                let self_update = self.run_self_update(batch, lr)?;
                let step1 = self.run_step1(batch, lr, ov.freeze_teacher_in_step1)?;
                let step2 = if ov.skip_step2 {
                    None
                } else {
                    Some(self.run_step2_teacher(batch, lr)?)
                };
                Ok(StepLosses {
                    step1,
                    step2,
                    self_update: Some(self_update),
                })
            }
            TrainMode::Atsc | TrainMode::MultiAtsc => {
                let step1 = self.run_step1(batch, lr, ov.freeze_teacher_in_step1)?;
                let step2 = if ov.skip_step2 {
                    None
                } else {
                    Some(self.run_step2_teacher(batch, lr)?)
                };
                Ok(StepLosses {
                    step1,
                    step2,
                    self_update: None,
                })
            }
            TrainMode::AtscStudentFt => {
                let step1 = self.run_step1(batch, lr, ov.freeze_teacher_in_step1)?;
                let step2 = if ov.skip_step2 {
                    None
                } else {
                    Some(self.run_step2_student(batch, lr)?)
                };
                Ok(StepLosses {
                    step1,
                    step2,
                    self_update: None,
                })
            }
        }
    }

    /// Feature-matching step. Updates teacher encoder(s) (unless frozen),
    /// the student encoder, and projector(s); classifiers are untouched.
    fn run_step1(&mut self, batch: &Batch, lr: f64, freeze_teacher: bool) -> Result<LossValue> {
        let alpha = self.alpha;
        let cfg = BalancingConfig { alpha };

        if !freeze_teacher {
            for t in self.teachers.iter_mut() {
                t.encoder.zero_grads();
            }
        }
        self.student.zero_grads();
        for t in self.teachers.iter_mut() {
            t.projector.zero_grads();
        }

        let (s_feat, s_cache) = self.student.forward(&batch.x, ForwardMode::Train);
        let s_hw = (s_feat.dim().1, s_feat.dim().2);

        let mut d_s_feat: FeatureMap = FeatureMap::zeros(s_feat.dim());
        let mut aligned_feats = Vec::with_capacity(self.teachers.len());
        let mut projected_feats = Vec::with_capacity(self.teachers.len());

        for t in self.teachers.iter_mut() {
            let (p_out, p_cache) = t.projector.forward(&s_feat, ForwardMode::Train);
            let (t_aligned, t_cache, t_dim) = if freeze_teacher {
                let t_full = t.encoder.forward_eval(&batch.x);
                let dim = t_full.dim();
                (align_spatial(&t_full, s_hw)?, None, dim)
            } else {
                let (t_full, cache) = t.encoder.forward(&batch.x, ForwardMode::Train);
                let dim = t_full.dim();
                (align_spatial(&t_full, s_hw)?, Some(cache), dim)
            };

            let (_, d_t_aligned, d_p_out) = losses::feature_mse_with_grads(&t_aligned, &p_out)?;
            d_s_feat = d_s_feat + t.projector.backward(&p_cache, &d_p_out);
            t.projector.commit_bn(&p_cache);

            if let Some(cache) = t_cache {
                let d_t_full = align_spatial_backward(t_dim, &d_t_aligned);
                t.encoder.backward(&cache, &d_t_full);
                add_anchor_grads(&mut t.encoder, &t.snapshot, alpha);
                t.encoder.commit_bn(&cache);
            }

            aligned_feats.push(t_aligned);
            projected_feats.push(p_out);
        }

        self.student.backward(&s_cache, &d_s_feat);
        self.student.commit_bn(&s_cache);

        // Loss assembly goes through the same objective functions the tests
        // oracle against.
        let loss = match self.mode {
            TrainMode::SimKd | TrainMode::OSimKd => {
                losses::feature_mse(&aligned_feats[0], &projected_feats[0])?
            }
            TrainMode::MultiAtsc => {
                let snaps: Vec<&ParameterSnapshot> =
                    self.teachers.iter().map(|t| &t.snapshot).collect();
                let encs: Vec<&Encoder> = self.teachers.iter().map(|t| &t.encoder).collect();
                losses::mt_step1_loss(&aligned_feats, &projected_feats, &snaps, &encs, &cfg)?
            }
            _ => losses::step1_loss(
                &aligned_feats[0],
                &projected_feats[0],
                &self.teachers[0].snapshot,
                &self.teachers[0].encoder,
                &cfg,
            )?,
        };
        self.divergence_check(&loss)?;

        let mut parts: Vec<&mut dyn Parameterized> = Vec::new();
        let mut projectors: Vec<&mut Projector> = Vec::new();
        for t in self.teachers.iter_mut() {
            if !freeze_teacher {
                parts.push(&mut t.encoder);
            }
            projectors.push(&mut t.projector);
        }
        parts.push(&mut self.student);
        for p in projectors {
            parts.push(p);
        }
        self.opt_step1.step(lr, &mut parts);

        Ok(loss)
    }

    /// Classifier fine-tune on the adapted teacher features: teacher
    /// encoders run eval-mode (no parameter or statistic updates), only
    /// classifiers move.
    fn run_step2_teacher(&mut self, batch: &Batch, lr: f64) -> Result<LossValue> {
        let n = self.teachers.len();
        for t in self.teachers.iter_mut() {
            t.classifier.zero_grads();
        }

        let mut caches = Vec::with_capacity(n);
        let mut mean_logits: Option<ndarray::Array2<f64>> = None;
        for t in self.teachers.iter() {
            let feat = t.encoder.forward_eval(&batch.x);
            let (logits, cache) = t.classifier.forward(&feat);
            caches.push(cache);
            mean_logits = Some(match mean_logits {
                None => logits,
                Some(acc) => acc + logits,
            });
        }
        let mean_logits = mean_logits.unwrap() / n as f64;
        let (loss, d_mean) = losses::cross_entropy_with_grad(&batch.y, &mean_logits)?;
        self.divergence_check(&loss)?;

        let d_each = d_mean / n as f64;
        for (t, cache) in self.teachers.iter_mut().zip(caches.iter()) {
            t.classifier.backward(cache, &d_each);
        }

        let mut parts: Vec<&mut dyn Parameterized> = Vec::new();
        for t in self.teachers.iter_mut() {
            parts.push(&mut t.classifier);
        }
        self.opt_step2.step(lr, &mut parts);
        Ok(loss)
    }

    /// Ablation fine-tune: the classifier fits the projected student
    /// features; student and projector stay frozen (eval-mode forwards).
    fn run_step2_student(&mut self, batch: &Batch, lr: f64) -> Result<LossValue> {
        let t = &mut self.teachers[0];
        t.classifier.zero_grads();
        let s_feat = self.student.forward_eval(&batch.x);
        let projected = t.projector.forward_eval(&s_feat);
        let (logits, cache) = t.classifier.forward(&projected);
        let (loss, d_logits) = losses::cross_entropy_with_grad(&batch.y, &logits)?;
        if !loss.total.is_finite() || loss.total.abs() > DIVERGENCE_CEILING {
            return Err(Error::Divergence {
                epoch: self.epoch,
                batch: self.batch_in_epoch,
                component: "ce".to_string(),
                value: loss.total,
            });
        }
        t.classifier.backward(&cache, &d_logits);
        self.opt_step2.step(lr, &mut [&mut t.classifier]);
        Ok(loss)
    }

    /// Online teacher self-update: plain CE through the teacher's own
    /// classifier, training both the encoder and the classifier.
    fn run_self_update(&mut self, batch: &Batch, lr: f64) -> Result<LossValue> {
        let epoch = self.epoch;
        let batch_idx = self.batch_in_epoch;
        let t = &mut self.teachers[0];
        t.encoder.zero_grads();
        t.classifier.zero_grads();
        let (feat, enc_cache) = t.encoder.forward(&batch.x, ForwardMode::Train);
        let (logits, clf_cache) = t.classifier.forward(&feat);
        let (loss, d_logits) = losses::cross_entropy_with_grad(&batch.y, &logits)?;
        if !loss.total.is_finite() || loss.total.abs() > DIVERGENCE_CEILING {
            return Err(Error::Divergence {
                epoch,
                batch: batch_idx,
                component: "ce".to_string(),
                value: loss.total,
            });
        }
        let d_feat = t.classifier.backward(&clf_cache, &d_logits);
        t.encoder.backward(&enc_cache, &d_feat);
        t.encoder.commit_bn(&enc_cache);
        self.opt_self
            .step(lr, &mut [&mut t.encoder, &mut t.classifier]);
        Ok(loss)
    }

    /// Plain CE training of the student with its own classifier.
    fn run_standalone_step(&mut self, batch: &Batch, lr: f64) -> Result<LossValue> {
        let epoch = self.epoch;
        let batch_idx = self.batch_in_epoch;
        let clf = self
            .student_classifier
            .as_mut()
            .expect("standalone mode carries a student classifier");
        self.student.zero_grads();
        clf.zero_grads();
        let (feat, enc_cache) = self.student.forward(&batch.x, ForwardMode::Train);
        let (logits, clf_cache) = clf.forward(&feat);
        let (loss, d_logits) = losses::cross_entropy_with_grad(&batch.y, &logits)?;
        if !loss.total.is_finite() || loss.total.abs() > DIVERGENCE_CEILING {
            return Err(Error::Divergence {
                epoch,
                batch: batch_idx,
                component: "ce".to_string(),
                value: loss.total,
            });
        }
        let d_feat = clf.backward(&clf_cache, &d_logits);
        self.student.backward(&enc_cache, &d_feat);
        self.student.commit_bn(&enc_cache);
        self.opt_step1.step(lr, &mut [&mut self.student, clf]);
        Ok(loss)
    }

    /// Student-path predictions for the mode: the shared-classifier path,
    /// the averaged multi-teacher path, or the standalone head.
    pub fn predict_student(&self, x: &FeatureMap) -> Result<ndarray::Array2<f64>> {
        match self.mode {
            TrainMode::StandaloneStudent => {
                let clf = self.student_classifier.as_ref().unwrap();
                let feat = self.student.forward_eval(x);
                Ok(losses::softmax_rows(&clf.forward_eval(&feat)))
            }
            TrainMode::MultiAtsc => {
                let projs: Vec<&Projector> = self.teachers.iter().map(|t| &t.projector).collect();
                let clfs: Vec<&SharedClassifier> =
                    self.teachers.iter().map(|t| &t.classifier).collect();
                losses::mt_student_predict(x, &self.student, &projs, &clfs)
            }
            _ => crate::model::student_predict(
                x,
                &self.student,
                &self.teachers[0].projector,
                &self.teachers[0].classifier,
            ),
        }
    }

    pub fn student_top1(&self, split: &Split) -> Result<f64> {
        metrics::eval_top1(split, |batch| self.predict_student(&batch.x))
    }

    /// Mean RMS drift of the teacher encoders from their anchors.
    pub fn mean_teacher_drift(&self) -> Result<f64> {
        if self.teachers.is_empty() {
            return Ok(0.0);
        }
        let mut acc = 0.0;
        for t in &self.teachers {
            acc += metrics::teacher_drift(&t.snapshot, &t.encoder)?;
        }
        Ok(acc / self.teachers.len() as f64)
    }

    /// Parameter accounting over the state's parts. Multi-teacher runs
    /// aggregate teachers, projectors, and classifiers.
    pub fn param_counts(&self) -> ParamCounts {
        let mut parts: Vec<(PartLabel, &dyn Parameterized)> = Vec::new();
        for t in &self.teachers {
            parts.push((PartLabel::Teacher, &t.encoder));
            parts.push((PartLabel::Projector, &t.projector));
            parts.push((PartLabel::Classifier, &t.classifier));
        }
        parts.push((PartLabel::Student, &self.student));
        if let Some(clf) = &self.student_classifier {
            parts.push((PartLabel::Classifier, clf));
        }
        count_params(&parts)
    }

    /// Eval-mode loss components over a split: sample-weighted feature MSE,
    /// the current anchor penalty, and the mode's CE objective.
    pub fn eval_components(
        &self,
        split: &Split,
    ) -> Result<(Option<f64>, Option<f64>, Option<f64>, Option<f64>)> {
        let mut mse_acc = 0.0;
        let mut ce_acc = 0.0;
        let mut n_samples = 0usize;
        let mut rng = rng::stream(0, &[0]);
        let indices: Vec<usize> = (0..split.len()).collect();
        let uses_projector = self.mode.uses_projector();
        for chunk in indices.chunks(metrics::EVAL_BATCH) {
            let batch = split.batch(chunk, false, &mut rng);
            let w = chunk.len() as f64;
            if uses_projector {
                let s_feat = self.student.forward_eval(&batch.x);
                let s_hw = (s_feat.dim().1, s_feat.dim().2);
                let mut mse_sum = 0.0;
                for t in &self.teachers {
                    let p_out = t.projector.forward_eval(&s_feat);
                    let t_full = t.encoder.forward_eval(&batch.x);
                    let t_aligned = align_spatial(&t_full, s_hw)?;
                    mse_sum += losses::feature_mse(&t_aligned, &p_out)?.total;
                }
                mse_acc += w * mse_sum;
            }
            let ce = match self.mode {
                TrainMode::StandaloneStudent => {
                    let clf = self.student_classifier.as_ref().unwrap();
                    let feat = self.student.forward_eval(&batch.x);
                    losses::cross_entropy(&batch.y, &clf.forward_eval(&feat))?.total
                }
                TrainMode::AtscStudentFt => {
                    let t = &self.teachers[0];
                    losses::step2_loss_student(
                        &batch.y,
                        &self.student,
                        &t.projector,
                        &t.classifier,
                        &batch.x,
                    )?
                    .total
                }
                TrainMode::MultiAtsc => {
                    let encs: Vec<&Encoder> = self.teachers.iter().map(|t| &t.encoder).collect();
                    let clfs: Vec<&SharedClassifier> =
                        self.teachers.iter().map(|t| &t.classifier).collect();
                    losses::mt_step2_loss(&batch.y, &encs, &clfs, &batch.x)?.total
                }
                _ => {
                    let t = &self.teachers[0];
                    losses::step2_loss_teacher(&batch.y, &t.encoder, &t.classifier, &batch.x)?
                        .total
                }
            };
            ce_acc += w * ce;
            n_samples += chunk.len();
        }
        let n = n_samples as f64;
        let feat_mse = uses_projector.then_some(mse_acc / n);
        let anchor = if self.teachers.is_empty() {
            None
        } else {
            let mut a = 0.0;
            for t in &self.teachers {
                a += losses::anchor_penalty(&t.snapshot, &t.encoder)?.total;
            }
            Some(a)
        };
        let ce = Some(ce_acc / n);
        let total = Some(
            feat_mse.unwrap_or(0.0)
                + if self.mode.uses_alpha() {
                    self.alpha * anchor.unwrap_or(0.0)
                } else {
                    0.0
                }
                + if self.mode == TrainMode::SimKd { 0.0 } else { ce.unwrap_or(0.0) },
        );
        Ok((feat_mse, anchor, ce, total))
    }

    /// The state frozen into a run checkpoint.
    pub fn to_checkpoint(
        &self,
        seed: u64,
        alpha: Option<f64>,
        reduction_factor: Option<usize>,
        test_accuracy: Option<f64>,
    ) -> RunCheckpoint {
        RunCheckpoint {
            mode: self.mode.as_str().to_string(),
            seed,
            epoch: self.epoch,
            alpha,
            reduction_factor,
            test_accuracy,
            student: self.student.clone(),
            teachers: self
                .teachers
                .iter()
                .map(|t| (t.encoder.clone(), t.classifier.clone()))
                .collect(),
            projectors: self.teachers.iter().map(|t| t.projector.clone()).collect(),
            student_classifier: self.student_classifier.clone(),
        }
    }
}

/// Adds the anchor-penalty gradient `alpha * 2 (theta - theta*) / n` onto the
/// encoder's accumulated gradients.
fn add_anchor_grads(encoder: &mut Encoder, snapshot: &ParameterSnapshot, alpha: f64) {
    let n = snapshot.n() as f64;
    let scale = 2.0 * alpha / n;
    let values = snapshot.values();
    let mut off = 0;
    encoder.visit_params_mut(&mut |_, _, v, g| {
        for k in 0..v.len() {
            g[k] += scale * (v[k] - values[off + k]);
        }
        off += v.len();
    });
}

// ---------------------------------------------------------------------------
// Run orchestration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Zeroes wall-clock columns so output files are byte-stable.
    pub deterministic: bool,
    /// When set, the final (or last-good) checkpoint lands in
    /// `<out_dir>/checkpoint`.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: TrainMode,
    pub seed: u64,
    pub alpha: Option<f64>,
    pub reduction_factor: Option<usize>,
    pub epochs_completed: usize,
    pub final_student_top1_train: Option<f64>,
    pub final_student_top1_test: Option<f64>,
    /// Adapted-teacher accuracy after training, one entry per teacher.
    pub adapted_teacher_top1_test: Vec<f64>,
    /// Accuracy recorded in each teacher's pretrained checkpoint manifest.
    pub pretrained_teacher_top1: Vec<Option<f64>>,
    pub final_teacher_drift_rms: Option<f64>,
    pub param_counts: ParamCounts,
    pub diverged: bool,
    pub divergence: Option<String>,
    pub deterministic: bool,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub metrics: Vec<MetricRow>,
    pub summary: RunSummary,
}

fn load_teachers(config: &RunConfig) -> Result<Vec<(Encoder, SharedClassifier, Option<f64>)>> {
    let mut out = Vec::with_capacity(config.teachers.len());
    for (i, src) in config.teachers.iter().enumerate() {
        if config.mode.requires_pretrained_teacher() {
            let path = src.checkpoint.as_ref().ok_or_else(|| {
                Error::Config(format!("teachers[{i}].checkpoint is required for {}", config.mode))
            })?;
            let TeacherCheckpoint {
                encoder,
                classifier,
                test_accuracy,
                ..
            } = checkpoint::load_teacher(path)?;
            out.push((encoder, classifier, test_accuracy));
        } else {
            let spec = src.spec.as_ref().ok_or_else(|| {
                Error::Config(format!("teachers[{i}].spec is required for {}", config.mode))
            })?;
            let encoder = Encoder::new(
                spec.clone(),
                Role::Teacher,
                &mut rng::stream(config.seed, &[tag::TEACHER_ENCODER, i as u64]),
            )?;
            let num_classes = config
                .dataset
                .num_classes_hint()
                .ok_or_else(|| Error::Config("online modes need a dataset with known class count".into()))?;
            let classifier = SharedClassifier::new(
                encoder.out_channels(),
                num_classes,
                &mut rng::stream(config.seed, &[tag::TEACHER_CLASSIFIER, i as u64]),
            );
            out.push((encoder, classifier, None));
        }
    }
    Ok(out)
}

fn check_input_shape(spec_shape: (usize, usize, usize), enc: &Encoder, what: &str) -> Result<()> {
    if enc.spec.in_shape() != spec_shape {
        return Err(Error::Config(format!(
            "{what} expects input {:?} but the dataset provides {spec_shape:?}",
            enc.spec.in_shape()
        )));
    }
    Ok(())
}

/// Trains one run to its epoch budget. Divergence does not return an error:
/// the record comes back with `summary.diverged` set, metrics up to the last
/// completed epoch, and (when `out_dir` is set) the last-good checkpoint.
pub fn train(config: &RunConfig, opts: &TrainOptions) -> Result<RunRecord> {
    config.validate()?;
    if config.alpha.is_some() && !config.mode.uses_alpha() {
        log::warn!(
            "mode {} does not use the balancing parameter; alpha = {} is ignored",
            config.mode,
            config.alpha.unwrap()
        );
    }

    let (train_split, test_split) = data::load_dataset(&config.dataset)?;
    let num_classes = train_split.num_classes();
    let input_shape = config.dataset.input_shape();

    let teachers = load_teachers(config)?;
    for (enc, _, _) in &teachers {
        check_input_shape(input_shape, enc, "a teacher encoder")?;
    }
    let student = Encoder::new(
        config.student.clone(),
        Role::Student,
        &mut rng::stream(config.seed, &[tag::STUDENT_ENCODER]),
    )?;
    check_input_shape(input_shape, &student, "the student encoder")?;

    let pretrained_top1: Vec<Option<f64>> = teachers.iter().map(|(_, _, a)| *a).collect();
    let mut state = TrainState::new(
        config.mode,
        config.effective_alpha(),
        teachers,
        student,
        config.reduction_factor,
        num_classes,
        config.seed,
        config.optim.momentum,
        config.optim.weight_decay,
    )?;

    let alpha_field = config.mode.uses_alpha().then(|| config.effective_alpha());
    let r_field = config.mode.uses_projector().then_some(config.reduction_factor);

    let mut rows: Vec<MetricRow> = Vec::new();
    let mut last_good: Option<RunCheckpoint> = None;
    let mut divergence: Option<String> = None;
    let mut epochs_completed = 0usize;

    'epochs: for epoch in 0..config.optim.epochs {
        state.epoch = epoch;
        let lr = lr_at(epoch, &config.optim)?;
        let started = Instant::now();

        let batches = data::iterate_batches(
            train_split.len(),
            config.optim.batch_size,
            config.seed,
            epoch,
        );
        let mut comp_sums: std::collections::BTreeMap<String, f64> = Default::default();
        let mut total_sum = 0.0;
        let mut ce_sum = 0.0;
        let mut ce_batches = 0usize;
        let n_batches = batches.len();
        for (bi, idx) in batches.into_iter().enumerate() {
            state.batch_in_epoch = bi;
            let mut aug_rng =
                rng::stream(config.seed, &[tag::AUGMENT, epoch as u64, bi as u64]);
            let batch = train_split.batch(&idx, true, &mut aug_rng);
            match state.step_batch(&batch, lr) {
                Ok(losses) => {
                    // Cheap at desk scale; guarantees the retained checkpoint
                    // predates the diverging update by exactly one batch.
                    last_good = Some(state.to_checkpoint(config.seed, alpha_field, r_field, None));
                    total_sum += losses.step1.total;
                    for (k, v) in losses.step1.components() {
                        *comp_sums.entry(k.clone()).or_insert(0.0) += v;
                    }
                    let ce = losses
                        .step2
                        .as_ref()
                        .map(|l| l.total)
                        .or(losses.step1.component("ce"))
                        .or(losses.self_update.as_ref().map(|l| l.total));
                    if let Some(ce) = ce {
                        ce_sum += ce;
                        ce_batches += 1;
                        if losses.step2.is_some() {
                            total_sum += losses.step2.as_ref().unwrap().total;
                        }
                    }
                }
                Err(e @ Error::Divergence { .. }) => {
                    divergence = Some(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }

        let wall = if opts.deterministic {
            0.0
        } else {
            started.elapsed().as_secs_f64()
        };
        let nb = n_batches as f64;
        let drift = state.mean_teacher_drift()?;
        let has_teacher = !state.teachers.is_empty();
        let train_row = MetricRow {
            epoch,
            split: "train".to_string(),
            top1: state.student_top1(&train_split)?,
            feat_mse: comp_sums.get("feat_mse").map(|v| v / nb),
            anchor: comp_sums.get("anchor").map(|v| v / nb),
            ce: (ce_batches > 0).then_some(ce_sum / ce_batches as f64),
            total: Some(total_sum / nb),
            teacher_drift_rms: drift,
            lr,
            wall_time_s: wall,
        };
        let (e_mse, e_anchor, e_ce, e_total) = state.eval_components(&test_split)?;
        let test_row = MetricRow {
            epoch,
            split: "test".to_string(),
            top1: state.student_top1(&test_split)?,
            feat_mse: e_mse,
            anchor: if has_teacher && state.mode.uses_alpha() { e_anchor } else { None },
            ce: e_ce,
            total: e_total,
            teacher_drift_rms: drift,
            lr,
            wall_time_s: 0.0,
        };
        rows.push(train_row);
        rows.push(test_row);
        epochs_completed = epoch + 1;
    }

    let diverged = divergence.is_some();
    let (final_train, final_test) = if diverged {
        let last = rows.iter().rev().find(|r| r.split == "test").map(|r| r.top1);
        let last_tr = rows.iter().rev().find(|r| r.split == "train").map(|r| r.top1);
        (last_tr, last)
    } else {
        (
            Some(state.student_top1(&train_split)?),
            Some(state.student_top1(&test_split)?),
        )
    };

    let adapted: Vec<f64> = if diverged {
        Vec::new()
    } else {
        let mut v = Vec::new();
        for t in &state.teachers {
            v.push(metrics::evaluate_teacher(&t.encoder, &t.classifier, &test_split)?);
        }
        v
    };

    let summary = RunSummary {
        mode: config.mode,
        seed: config.seed,
        alpha: alpha_field,
        reduction_factor: r_field,
        epochs_completed,
        final_student_top1_train: final_train,
        final_student_top1_test: final_test,
        adapted_teacher_top1_test: adapted,
        pretrained_teacher_top1: pretrained_top1,
        final_teacher_drift_rms: if state.teachers.is_empty() {
            None
        } else {
            Some(state.mean_teacher_drift()?)
        },
        param_counts: state.param_counts(),
        diverged,
        divergence,
        deterministic: opts.deterministic,
    };

    if let Some(dir) = &opts.out_dir {
        let ck = if diverged {
            last_good.clone()
        } else {
            Some(state.to_checkpoint(config.seed, alpha_field, r_field, summary.final_student_top1_test))
        };
        if let Some(ck) = ck {
            checkpoint::save_run(&dir.join("checkpoint"), &ck)?;
        }
    }

    Ok(RunRecord {
        metrics: rows,
        summary,
    })
}

// ---------------------------------------------------------------------------
// Teacher pretraining
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PretrainRecord {
    pub metrics: Vec<MetricRow>,
    pub test_top1: f64,
    pub fingerprint: String,
}

/// Trains a teacher encoder and classifier with plain CE and writes a
/// pretrained-teacher checkpoint into `out_dir` when set.
pub fn pretrain_teacher(
    config: &crate::config::PretrainConfig,
    opts: &TrainOptions,
) -> Result<PretrainRecord> {
    config.validate()?;
    let (train_split, test_split) = data::load_dataset(&config.dataset)?;
    let num_classes = train_split.num_classes();

    let mut encoder = Encoder::new(
        config.encoder.clone(),
        Role::Teacher,
        &mut rng::stream(config.seed, &[tag::TEACHER_ENCODER, 0]),
    )?;
    check_input_shape(config.dataset.input_shape(), &encoder, "the teacher encoder")?;
    let mut classifier = SharedClassifier::new(
        encoder.out_channels(),
        num_classes,
        &mut rng::stream(config.seed, &[tag::TEACHER_CLASSIFIER, 0]),
    );
    let mut opt = SgdGroup::new(config.optim.momentum, config.optim.weight_decay);

    let mut rows = Vec::new();
    for epoch in 0..config.optim.epochs {
        let lr = lr_at(epoch, &config.optim)?;
        let started = Instant::now();
        let batches =
            data::iterate_batches(train_split.len(), config.optim.batch_size, config.seed, epoch);
        let mut ce_sum = 0.0;
        let nb = batches.len() as f64;
        for (bi, idx) in batches.into_iter().enumerate() {
            let mut aug_rng = rng::stream(config.seed, &[tag::AUGMENT, epoch as u64, bi as u64]);
            let batch = train_split.batch(&idx, true, &mut aug_rng);
            encoder.zero_grads();
            classifier.zero_grads();
            let (feat, enc_cache) = encoder.forward(&batch.x, ForwardMode::Train);
            let (logits, clf_cache) = classifier.forward(&feat);
            let (loss, d_logits) = losses::cross_entropy_with_grad(&batch.y, &logits)?;
            if !loss.total.is_finite() || loss.total.abs() > DIVERGENCE_CEILING {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    component: "ce".to_string(),
                    value: loss.total,
                });
            }
            let d_feat = classifier.backward(&clf_cache, &d_logits);
            encoder.backward(&enc_cache, &d_feat);
            encoder.commit_bn(&enc_cache);
            opt.step(lr, &mut [&mut encoder, &mut classifier]);
            ce_sum += loss.total;
        }
        let wall = if opts.deterministic {
            0.0
        } else {
            started.elapsed().as_secs_f64()
        };
        let train_top1 = metrics::evaluate_teacher(&encoder, &classifier, &train_split)?;
        let test_top1 = metrics::evaluate_teacher(&encoder, &classifier, &test_split)?;
        rows.push(MetricRow {
            epoch,
            split: "train".to_string(),
            top1: train_top1,
            feat_mse: None,
            anchor: None,
            ce: Some(ce_sum / nb),
            total: Some(ce_sum / nb),
            teacher_drift_rms: 0.0,
            lr,
            wall_time_s: wall,
        });
        rows.push(MetricRow {
            epoch,
            split: "test".to_string(),
            top1: test_top1,
            feat_mse: None,
            anchor: None,
            ce: None,
            total: None,
            teacher_drift_rms: 0.0,
            lr,
            wall_time_s: 0.0,
        });
    }

    let test_top1 = metrics::evaluate_teacher(&encoder, &classifier, &test_split)?;
    let fingerprint = crate::model::fingerprint_values(&encoder.flat_params());
    if let Some(dir) = &opts.out_dir {
        checkpoint::save_teacher(
            dir,
            &TeacherCheckpoint {
                encoder,
                classifier,
                seed: config.seed,
                epoch: config.optim.epochs,
                test_accuracy: Some(test_top1),
            },
        )?;
    }
    Ok(PretrainRecord {
        metrics: rows,
        test_top1,
        fingerprint,
    })
}

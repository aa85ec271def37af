//! Checkpoint directories: a JSON manifest describing each part (spec,
//! parameter counts, content fingerprint) plus one raw little-endian f64
//! blob per part holding trainable parameters followed by auxiliary state
//! (batch-norm running statistics).

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::classifier::SharedClassifier;
use super::encoder::{Encoder, EncoderSpec, Role};
use super::params::Parameterized;
use super::projector::{build_projector, Projector};
use super::snapshot::fingerprint_values;
use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "part_kind", rename_all = "snake_case")]
pub enum PartSpec {
    Encoder { spec: EncoderSpec, role: Role },
    Projector { ch_in: usize, ch_out: usize, r: usize },
    Classifier { ch_in: usize, num_classes: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartEntry {
    pub name: String,
    pub file: String,
    pub param_count: usize,
    pub state_count: usize,
    /// SHA-256 over the trainable-parameter section of the blob.
    pub fingerprint: String,
    #[serde(flatten)]
    pub spec: PartSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    /// "teacher" for pretrained teacher checkpoints, "run" for training runs.
    pub kind: String,
    pub seed: u64,
    pub epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduction_factor: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
    pub parts: Vec<PartEntry>,
}

fn write_blob(path: &Path, values: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_blob(path: &Path, expect: usize) -> Result<Vec<f64>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() != expect * 8 {
        return Err(Error::Checkpoint(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            buf.len(),
            expect * 8
        )));
    }
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn entry_for(name: &str, spec: PartSpec, part: &dyn Parameterized) -> PartEntry {
    let params = part.flat_params();
    PartEntry {
        name: name.to_string(),
        file: format!("{name}.bin"),
        param_count: params.len(),
        state_count: part.flat_state().len(),
        fingerprint: fingerprint_values(&params),
        spec,
    }
}

fn save_part(dir: &Path, entry: &PartEntry, part: &dyn Parameterized) -> Result<()> {
    let mut values = part.flat_params();
    values.extend(part.flat_state());
    write_blob(&dir.join(&entry.file), &values)
}

fn load_part(dir: &Path, entry: &PartEntry, part: &mut dyn Parameterized) -> Result<()> {
    let values = read_blob(
        &dir.join(&entry.file),
        entry.param_count + entry.state_count,
    )?;
    let (params, state) = values.split_at(entry.param_count);
    let got = fingerprint_values(params);
    if got != entry.fingerprint {
        return Err(Error::Checkpoint(format!(
            "fingerprint mismatch for part '{}': manifest records {}, blob hashes to {got}",
            entry.name, entry.fingerprint
        )));
    }
    part.load_flat_params(params)?;
    part.load_flat_state(state)?;
    Ok(())
}

fn load_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint schema version {}",
            manifest.schema_version
        )));
    }
    Ok(manifest)
}

fn write_manifest(dir: &Path, manifest: &CheckpointManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

fn rebuild_encoder(entry: &PartEntry) -> Result<Encoder> {
    match &entry.spec {
        PartSpec::Encoder { spec, role } => {
            Encoder::new(spec.clone(), *role, &mut rng::stream(0, &[0]))
        }
        _ => Err(Error::Checkpoint(format!(
            "part '{}' is not an encoder",
            entry.name
        ))),
    }
}

fn rebuild_projector(entry: &PartEntry) -> Result<Projector> {
    match &entry.spec {
        PartSpec::Projector { ch_in, ch_out, r } => build_projector(*ch_in, *ch_out, *r),
        _ => Err(Error::Checkpoint(format!(
            "part '{}' is not a projector",
            entry.name
        ))),
    }
}

fn rebuild_classifier(entry: &PartEntry) -> Result<SharedClassifier> {
    match &entry.spec {
        PartSpec::Classifier { ch_in, num_classes } => Ok(SharedClassifier::new(
            *ch_in,
            *num_classes,
            &mut rng::stream(0, &[0]),
        )),
        _ => Err(Error::Checkpoint(format!(
            "part '{}' is not a classifier",
            entry.name
        ))),
    }
}

// ---------------------------------------------------------------------------
// Pretrained teacher checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TeacherCheckpoint {
    pub encoder: Encoder,
    pub classifier: SharedClassifier,
    pub seed: u64,
    pub epoch: usize,
    pub test_accuracy: Option<f64>,
}

pub fn save_teacher(dir: &Path, ck: &TeacherCheckpoint) -> Result<()> {
    let enc_entry = entry_for(
        "encoder",
        PartSpec::Encoder {
            spec: ck.encoder.spec.clone(),
            role: ck.encoder.role,
        },
        &ck.encoder,
    );
    let clf_entry = entry_for(
        "classifier",
        PartSpec::Classifier {
            ch_in: ck.classifier.ch_in,
            num_classes: ck.classifier.num_classes,
        },
        &ck.classifier,
    );
    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        kind: "teacher".to_string(),
        seed: ck.seed,
        epoch: ck.epoch,
        mode: None,
        alpha: None,
        reduction_factor: None,
        test_accuracy: ck.test_accuracy,
        parts: vec![enc_entry.clone(), clf_entry.clone()],
    };
    write_manifest(dir, &manifest)?;
    save_part(dir, &enc_entry, &ck.encoder)?;
    save_part(dir, &clf_entry, &ck.classifier)?;
    Ok(())
}

pub fn load_teacher(dir: &Path) -> Result<TeacherCheckpoint> {
    let manifest = load_manifest(dir)?;
    if manifest.kind != "teacher" {
        return Err(Error::Checkpoint(format!(
            "{} is a '{}' checkpoint, expected a pretrained teacher",
            dir.display(),
            manifest.kind
        )));
    }
    let find = |name: &str| {
        manifest
            .parts
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing part '{name}'")))
    };
    let enc_entry = find("encoder")?;
    let clf_entry = find("classifier")?;
    let mut encoder = rebuild_encoder(enc_entry)?;
    load_part(dir, enc_entry, &mut encoder)?;
    let mut classifier = rebuild_classifier(clf_entry)?;
    load_part(dir, clf_entry, &mut classifier)?;
    Ok(TeacherCheckpoint {
        encoder,
        classifier,
        seed: manifest.seed,
        epoch: manifest.epoch,
        test_accuracy: manifest.test_accuracy,
    })
}

// ---------------------------------------------------------------------------
// Run checkpoints (trained student plus its inference-path parts)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RunCheckpoint {
    pub mode: String,
    pub seed: u64,
    pub epoch: usize,
    pub alpha: Option<f64>,
    pub reduction_factor: Option<usize>,
    pub test_accuracy: Option<f64>,
    pub student: Encoder,
    /// Adapted teacher encoders paired with their classifiers, one per
    /// teacher; empty for standalone-student runs.
    pub teachers: Vec<(Encoder, SharedClassifier)>,
    pub projectors: Vec<Projector>,
    /// Present only for standalone-student runs.
    pub student_classifier: Option<SharedClassifier>,
}

pub fn save_run(dir: &Path, ck: &RunCheckpoint) -> Result<()> {
    let mut parts: Vec<(PartEntry, &dyn Parameterized)> = Vec::new();
    parts.push((
        entry_for(
            "student_encoder",
            PartSpec::Encoder {
                spec: ck.student.spec.clone(),
                role: ck.student.role,
            },
            &ck.student,
        ),
        &ck.student,
    ));
    for (i, (enc, clf)) in ck.teachers.iter().enumerate() {
        parts.push((
            entry_for(
                &format!("teacher{i}_encoder"),
                PartSpec::Encoder {
                    spec: enc.spec.clone(),
                    role: enc.role,
                },
                enc,
            ),
            enc,
        ));
        parts.push((
            entry_for(
                &format!("teacher{i}_classifier"),
                PartSpec::Classifier {
                    ch_in: clf.ch_in,
                    num_classes: clf.num_classes,
                },
                clf,
            ),
            clf,
        ));
    }
    for (i, proj) in ck.projectors.iter().enumerate() {
        parts.push((
            entry_for(
                &format!("projector{i}"),
                PartSpec::Projector {
                    ch_in: proj.ch_in,
                    ch_out: proj.ch_out,
                    r: proj.r,
                },
                proj,
            ),
            proj,
        ));
    }
    if let Some(clf) = &ck.student_classifier {
        parts.push((
            entry_for(
                "student_classifier",
                PartSpec::Classifier {
                    ch_in: clf.ch_in,
                    num_classes: clf.num_classes,
                },
                clf,
            ),
            clf,
        ));
    }
    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        kind: "run".to_string(),
        seed: ck.seed,
        epoch: ck.epoch,
        mode: Some(ck.mode.clone()),
        alpha: ck.alpha,
        reduction_factor: ck.reduction_factor,
        test_accuracy: ck.test_accuracy,
        parts: parts.iter().map(|(e, _)| e.clone()).collect(),
    };
    write_manifest(dir, &manifest)?;
    for (entry, part) in &parts {
        save_part(dir, entry, *part)?;
    }
    Ok(())
}

pub fn load_run(dir: &Path) -> Result<RunCheckpoint> {
    let manifest = load_manifest(dir)?;
    if manifest.kind != "run" {
        return Err(Error::Checkpoint(format!(
            "{} is a '{}' checkpoint, expected a run checkpoint",
            dir.display(),
            manifest.kind
        )));
    }
    let mut student = None;
    let mut student_classifier = None;
    let mut teachers: Vec<(usize, Encoder)> = Vec::new();
    let mut teacher_clfs: Vec<(usize, SharedClassifier)> = Vec::new();
    let mut projectors: Vec<(usize, Projector)> = Vec::new();
    for entry in &manifest.parts {
        if entry.name == "student_encoder" {
            let mut enc = rebuild_encoder(entry)?;
            load_part(dir, entry, &mut enc)?;
            student = Some(enc);
        } else if entry.name == "student_classifier" {
            let mut clf = rebuild_classifier(entry)?;
            load_part(dir, entry, &mut clf)?;
            student_classifier = Some(clf);
        } else if let Some(rest) = entry.name.strip_prefix("teacher") {
            let (idx, what) = rest
                .split_once('_')
                .ok_or_else(|| Error::Checkpoint(format!("malformed part '{}'", entry.name)))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::Checkpoint(format!("malformed part '{}'", entry.name)))?;
            match what {
                "encoder" => {
                    let mut enc = rebuild_encoder(entry)?;
                    load_part(dir, entry, &mut enc)?;
                    teachers.push((idx, enc));
                }
                "classifier" => {
                    let mut clf = rebuild_classifier(entry)?;
                    load_part(dir, entry, &mut clf)?;
                    teacher_clfs.push((idx, clf));
                }
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "unknown teacher part '{}'",
                        entry.name
                    )))
                }
            }
        } else if let Some(idx) = entry.name.strip_prefix("projector") {
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::Checkpoint(format!("malformed part '{}'", entry.name)))?;
            let mut proj = rebuild_projector(entry)?;
            load_part(dir, entry, &mut proj)?;
            projectors.push((idx, proj));
        } else {
            return Err(Error::Checkpoint(format!("unknown part '{}'", entry.name)));
        }
    }
    teachers.sort_by_key(|(i, _)| *i);
    teacher_clfs.sort_by_key(|(i, _)| *i);
    projectors.sort_by_key(|(i, _)| *i);
    if teachers.len() != teacher_clfs.len() {
        return Err(Error::Checkpoint(
            "teacher encoder/classifier part counts differ".into(),
        ));
    }
    Ok(RunCheckpoint {
        mode: manifest.mode.clone().unwrap_or_default(),
        seed: manifest.seed,
        epoch: manifest.epoch,
        alpha: manifest.alpha,
        reduction_factor: manifest.reduction_factor,
        test_accuracy: manifest.test_accuracy,
        student: student
            .ok_or_else(|| Error::Checkpoint("run checkpoint is missing the student".into()))?,
        teachers: teachers
            .into_iter()
            .map(|(_, e)| e)
            .zip(teacher_clfs.into_iter().map(|(_, c)| c))
            .collect(),
        projectors: projectors.into_iter().map(|(_, p)| p).collect(),
        student_classifier,
    })
}

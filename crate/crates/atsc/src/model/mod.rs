//! Model parts: encoders, the channel-matching projector, the shared
//! classifier, parameter snapshots, and parameter accounting.

pub mod checkpoint;
pub mod classifier;
pub mod counting;
pub mod encoder;
pub mod layers;
pub mod params;
pub mod projector;
pub mod snapshot;

pub use classifier::SharedClassifier;
pub use counting::{count_params, ParamCounts, PartLabel};
pub use encoder::{Encoder, EncoderSpec, ForwardMode, Role};
pub use layers::{align_spatial, FeatureMap};
pub use params::{ParamKind, Parameterized};
pub use projector::{build_projector, Projector};
pub use snapshot::{fingerprint_values, snapshot_params, ParameterSnapshot};

use ndarray::Array2;

use crate::error::{Error, Result};

/// The student inference path: softmax(C(P(E_S(x)))). Returns one probability
/// row per sample.
pub fn student_predict(
    x: &FeatureMap,
    student: &Encoder,
    projector: &Projector,
    classifier: &SharedClassifier,
) -> Result<Array2<f64>> {
    let (_, h, w, c) = x.dim();
    if (h, w, c) != student.spec.in_shape() {
        return Err(Error::Config(format!(
            "input shape ({h},{w},{c}) does not match student spec {:?}",
            student.spec.in_shape()
        )));
    }
    if projector.ch_in != student.out_channels() {
        return Err(Error::Config(format!(
            "projector expects {} input channels but the student emits {}",
            projector.ch_in,
            student.out_channels()
        )));
    }
    if classifier.ch_in != projector.ch_out {
        return Err(Error::Config(format!(
            "classifier expects {} channels but the projector emits {}",
            classifier.ch_in, projector.ch_out
        )));
    }
    let feat = student.forward_eval(x);
    let projected = projector.forward_eval(&feat);
    let logits = classifier.forward_eval(&projected);
    Ok(crate::losses::softmax_rows(&logits))
}

//! Immutable flattened copies of a part's trainable parameters. Snapshots
//! anchor the teacher-adaptation penalty and are taken once, before
//! collaborative training starts. Batch-norm running statistics are not
//! optimized parameters and are excluded.

use sha2::{Digest, Sha256};

use super::params::Parameterized;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSnapshot {
    values: Vec<f64>,
    fingerprint: String,
}

/// Hex SHA-256 over the little-endian bytes of a parameter vector.
pub fn fingerprint_values(values: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Captures the current trainable parameters of a part.
pub fn snapshot_params(part: &dyn Parameterized) -> ParameterSnapshot {
    let values = part.flat_params();
    let fingerprint = fingerprint_values(&values);
    ParameterSnapshot {
        values,
        fingerprint,
    }
}

impl ParameterSnapshot {
    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Restores the snapshot into a same-spec part.
    pub fn restore_into(&self, part: &mut dyn Parameterized) -> Result<()> {
        if part.param_count() != self.n() {
            return Err(Error::Contract(format!(
                "snapshot length {} does not match part size {}",
                self.n(),
                part.param_count()
            )));
        }
        part.load_flat_params(&self.values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::encoder::{Encoder, EncoderSpec, Role};
    use crate::rng;

    fn small_encoder(seed: u64) -> Encoder {
        let spec = EncoderSpec::Mlp {
            in_dim: 4,
            hidden: vec![3],
            feat_dim: 2,
        };
        Encoder::new(spec, Role::Teacher, &mut rng::stream(seed, &[31])).unwrap()
    }

    #[test]
    fn snapshot_is_immutable_under_encoder_mutation() {
        let mut enc = small_encoder(1);
        let snap = snapshot_params(&enc);
        let before = snap.values().to_vec();
        enc.visit_params_mut(&mut |_, _, v, _| v.fill(0.0));
        assert_eq!(snap.values(), &before[..]);
        assert_ne!(snap.values(), enc.flat_params().as_slice());
    }

    #[test]
    fn repeated_snapshots_share_a_fingerprint() {
        let enc = small_encoder(2);
        let a = snapshot_params(&enc);
        let b = snapshot_params(&enc);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn count_matches_layer_enumeration() {
        let enc = small_encoder(3);
        // fc0: 4*3 + 3, fc1: 3*2 + 2.
        assert_eq!(snapshot_params(&enc).n(), 12 + 3 + 6 + 2);
    }

    #[test]
    fn restore_reproduces_forward_outputs() {
        let mut enc = small_encoder(4);
        let snap = snapshot_params(&enc);
        let x = crate::model::layers::FeatureMap::from_shape_fn((2, 1, 1, 4), |(b, _, _, d)| {
            (b + d) as f64 * 0.25 - 0.3
        });
        let y_before = enc.forward_eval(&x);
        enc.visit_params_mut(&mut |_, _, v, _| v.iter_mut().for_each(|p| *p += 1.0));
        assert_ne!(y_before, enc.forward_eval(&x));
        snap.restore_into(&mut enc).unwrap();
        assert_eq!(y_before, enc.forward_eval(&x));
    }
}

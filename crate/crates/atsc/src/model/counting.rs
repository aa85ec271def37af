//! Trainable-parameter accounting. The reported increase is the parameter
//! cost of the projector(s) added to the student, relative to the teacher's
//! parameter count.

use serde::{Deserialize, Serialize};

use super::params::Parameterized;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartLabel {
    Teacher,
    Student,
    Projector,
    Classifier,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub teacher: usize,
    pub student: usize,
    pub projector: usize,
    pub classifier: usize,
    /// projector / teacher * 100; zero when no teacher is present.
    pub increase_percent: f64,
}

/// Sums trainable parameters per part label. Labels may repeat (multiple
/// teachers or projectors aggregate).
pub fn count_params(parts: &[(PartLabel, &dyn Parameterized)]) -> ParamCounts {
    let mut counts = ParamCounts::default();
    for (label, part) in parts {
        let n = part.param_count();
        match label {
            PartLabel::Teacher => counts.teacher += n,
            PartLabel::Student => counts.student += n,
            PartLabel::Projector => counts.projector += n,
            PartLabel::Classifier => counts.classifier += n,
        }
    }
    if counts.teacher > 0 {
        counts.increase_percent = counts.projector as f64 / counts.teacher as f64 * 100.0;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::projector::build_projector;

    #[test]
    fn projector_count_matches_hand_enumeration() {
        // (ch_s=16, ch_t=64, r=2): bias-free convs, BN gamma+beta per channel.
        // 1x1 16->32: 512 + 64; 3x3 32->32: 9216 + 64; 1x1 32->64: 2048 + 128.
        let p = build_projector(16, 64, 2).unwrap();
        assert_eq!(p.param_count(), 12032);
    }

    #[test]
    fn empty_part_set_counts_zero() {
        let counts = count_params(&[]);
        assert_eq!(counts, ParamCounts::default());
    }

    #[test]
    fn doubling_reduction_factor_shrinks_the_projector() {
        for ch_t in [2usize, 4, 8, 32, 64, 96] {
            for ch_s in [3usize, 8, 17] {
                let full = build_projector(ch_s, ch_t, 1).unwrap().param_count();
                let halved = build_projector(ch_s, ch_t, 2).unwrap().param_count();
                assert!(
                    halved < full,
                    "r=2 should shrink the projector for ch_t={ch_t}, ch_s={ch_s}"
                );
            }
        }
    }

    #[test]
    fn increase_percent_is_relative_to_teacher() {
        let p = build_projector(16, 64, 2).unwrap();
        let t = build_projector(8, 8, 1).unwrap(); // stand-in teacher part
        let counts = count_params(&[
            (PartLabel::Teacher, &t as &dyn crate::model::Parameterized),
            (PartLabel::Projector, &p as &dyn crate::model::Parameterized),
        ]);
        let expect = p.param_count() as f64 / t.param_count() as f64 * 100.0;
        assert_eq!(counts.increase_percent, expect);
    }
}

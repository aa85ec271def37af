//! The classification head: global average pooling over the feature map
//! followed by a single affine map to class logits. The teacher's instance
//! is shared with the student at inference through the projector.

use ndarray::Array2;
use rand::Rng;

use super::layers::{global_avg_pool, global_avg_pool_backward, Affine, FeatureMap};
use super::params::{scoped, scoped_mut, ParamKind, Parameterized};

#[derive(Debug, Clone)]
pub struct SharedClassifier {
    pub ch_in: usize,
    pub num_classes: usize,
    affine: Affine,
}

pub struct ClassifierCache {
    in_dim: (usize, usize, usize, usize),
    pooled: Array2<f64>,
}

impl SharedClassifier {
    pub fn new<R: Rng>(ch_in: usize, num_classes: usize, rng: &mut R) -> Self {
        let mut affine = Affine::new(ch_in, num_classes);
        affine.init_uniform_fanin(rng);
        SharedClassifier {
            ch_in,
            num_classes,
            affine,
        }
    }

    pub fn forward(&self, feat: &FeatureMap) -> (Array2<f64>, ClassifierCache) {
        let (_, _, _, ch) = feat.dim();
        assert_eq!(ch, self.ch_in, "classifier input channels");
        let pooled = global_avg_pool(feat);
        let logits = self.affine.forward(&pooled);
        (
            logits,
            ClassifierCache {
                in_dim: feat.dim(),
                pooled,
            },
        )
    }

    pub fn forward_eval(&self, feat: &FeatureMap) -> Array2<f64> {
        self.forward(feat).0
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the input feature map.
    pub fn backward(&mut self, cache: &ClassifierCache, d_logits: &Array2<f64>) -> FeatureMap {
        let d_pooled = self.affine.backward(&cache.pooled, d_logits);
        global_avg_pool_backward(cache.in_dim, &d_pooled)
    }
}

impl Parameterized for SharedClassifier {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ParamKind, &[f64])) {
        self.affine.visit_params(&mut scoped("head", f));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut [f64], &mut [f64])) {
        self.affine.visit_params_mut(&mut scoped_mut("head", f));
    }
}

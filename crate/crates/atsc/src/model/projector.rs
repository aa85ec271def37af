//! Channel-matching projector: three conv layers (1x1, 3x3, 1x1), each
//! followed by batch normalization and ReLU. The hidden width is
//! `floor(ch_out / r)` for reduction factor `r`; spatial dims pass through
//! unchanged (the 3x3 conv uses padding 1, stride 1).

use rand::Rng;

use super::layers::{relu, relu_backward, BatchNorm, BnCache, Conv2d, FeatureMap};
use super::params::{scoped, scoped_mut, ParamKind, Parameterized};
use crate::error::{Error, Result};
use crate::model::encoder::ForwardMode;

#[derive(Debug, Clone)]
pub struct Projector {
    pub r: usize,
    pub ch_in: usize,
    pub ch_out: usize,
    pub hidden: usize,
    convs: [Conv2d; 3],
    bns: [BatchNorm; 3],
}

/// Channel plan of one projector layer, used by the accounting report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerPlan {
    pub kernel: usize,
    pub ch_in: usize,
    pub ch_out: usize,
}

/// Builds an uninitialized-weight projector mapping `ch_s` student channels
/// onto `ch_t` teacher channels. Fails when `floor(ch_t / r) < 1`.
pub fn build_projector(ch_s: usize, ch_t: usize, r: usize) -> Result<Projector> {
    if ch_s == 0 || ch_t == 0 || r == 0 {
        return Err(Error::Config(
            "projector channel counts and reduction factor must be positive".into(),
        ));
    }
    if r > ch_t {
        return Err(Error::Config(format!(
            "reduction factor {r} exceeds teacher channel count {ch_t}: hidden width would be zero"
        )));
    }
    if ch_t % r != 0 {
        log::warn!(
            "reduction factor {r} does not divide teacher channels {ch_t}; hidden width floors to {}",
            ch_t / r
        );
    }
    let hidden = ch_t / r;
    Ok(Projector {
        r,
        ch_in: ch_s,
        ch_out: ch_t,
        hidden,
        convs: [
            Conv2d::new(1, 1, ch_s, hidden),
            Conv2d::new(3, 3, hidden, hidden),
            Conv2d::new(1, 1, hidden, ch_t),
        ],
        bns: [
            BatchNorm::new(hidden),
            BatchNorm::new(hidden),
            BatchNorm::new(ch_t),
        ],
    })
}

pub struct ProjectorCache {
    mode: ForwardMode,
    // Per layer: conv input, conv output, bn batch stats, bn output.
    x_in: [FeatureMap; 3],
    conv_out: [FeatureMap; 3],
    bn_cache: [Option<BnCache>; 3],
    bn_out: [FeatureMap; 3],
}

impl Projector {
    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        for conv in self.convs.iter_mut() {
            conv.init_he(rng);
        }
    }

    /// The three-layer channel plan `[ch_in -> hidden (1x1), hidden -> hidden
    /// (3x3), hidden -> ch_out (1x1)]`.
    pub fn layer_plan(&self) -> [LayerPlan; 3] {
        [
            LayerPlan {
                kernel: 1,
                ch_in: self.ch_in,
                ch_out: self.hidden,
            },
            LayerPlan {
                kernel: 3,
                ch_in: self.hidden,
                ch_out: self.hidden,
            },
            LayerPlan {
                kernel: 1,
                ch_in: self.hidden,
                ch_out: self.ch_out,
            },
        ]
    }

    pub fn forward(&self, x: &FeatureMap, mode: ForwardMode) -> (FeatureMap, ProjectorCache) {
        let mut cur = x.clone();
        let mut x_in: Vec<FeatureMap> = Vec::with_capacity(3);
        let mut conv_out: Vec<FeatureMap> = Vec::with_capacity(3);
        let mut bn_cache: Vec<Option<BnCache>> = Vec::with_capacity(3);
        let mut bn_out: Vec<FeatureMap> = Vec::with_capacity(3);
        for li in 0..3 {
            let z = self.convs[li].forward(&cur);
            let (u, cache) = match mode {
                ForwardMode::Train => {
                    let (u, c) = self.bns[li].forward_train(&z);
                    (u, Some(c))
                }
                ForwardMode::Eval => (self.bns[li].forward_eval(&z), None),
            };
            let next = relu(&u);
            x_in.push(cur);
            conv_out.push(z);
            bn_cache.push(cache);
            bn_out.push(u);
            cur = next;
        }
        (
            cur,
            ProjectorCache {
                mode,
                x_in: x_in.try_into().unwrap(),
                conv_out: conv_out.try_into().unwrap(),
                bn_cache: bn_cache.try_into().unwrap(),
                bn_out: bn_out.try_into().unwrap(),
            },
        )
    }

    pub fn forward_eval(&self, x: &FeatureMap) -> FeatureMap {
        self.forward(x, ForwardMode::Eval).0
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the projector input (fed onward into the student encoder).
    pub fn backward(&mut self, cache: &ProjectorCache, d_out: &FeatureMap) -> FeatureMap {
        assert_eq!(
            cache.mode,
            ForwardMode::Train,
            "backward requires a training-mode cache"
        );
        let mut grad = d_out.clone();
        for li in (0..3).rev() {
            let d_bn_out = relu_backward(&cache.bn_out[li], &grad);
            let d_conv_out = self.bns[li].backward(
                &cache.conv_out[li],
                cache.bn_cache[li].as_ref().unwrap(),
                &d_bn_out,
            );
            grad = self.convs[li].backward(&cache.x_in[li], &d_conv_out);
        }
        grad
    }

    pub fn commit_bn(&mut self, cache: &ProjectorCache) {
        for li in 0..3 {
            if let Some(c) = &cache.bn_cache[li] {
                self.bns[li].commit_running(c);
            }
        }
    }
}

impl Parameterized for Projector {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ParamKind, &[f64])) {
        for li in 0..3 {
            self.convs[li].visit_params(&mut scoped(&format!("conv{li}"), f));
            self.bns[li].visit_params(&mut scoped(&format!("bn{li}"), f));
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut [f64], &mut [f64])) {
        for li in 0..3 {
            self.convs[li].visit_params_mut(&mut scoped_mut(&format!("conv{li}"), f));
            self.bns[li].visit_params_mut(&mut scoped_mut(&format!("bn{li}"), f));
        }
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for bn in &self.bns {
            bn.visit_state(f);
        }
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for bn in self.bns.iter_mut() {
            bn.visit_state_mut(f);
        }
    }
}

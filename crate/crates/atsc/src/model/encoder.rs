//! Feature-extracting encoders: a small configurable CNN for image-shaped
//! inputs and an MLP for synthetic vector data. Both emit `(batch, H, W, Ch)`
//! feature maps and end in a ReLU, so features are nonnegative.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    avg_pool2, avg_pool2_backward, relu, relu_backward, Affine, BatchNorm, BnCache, Conv2d,
    FeatureMap,
};
use super::params::{scoped, scoped_mut, ParamKind, Parameterized};
use crate::error::{Error, Result};

/// Which normalization statistics a forward pass uses. `Train` normalizes by
/// batch statistics and produces a cache suitable for backward; `Eval` uses
/// the frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Eval,
}

/// Encoder role within a run; carried into checkpoints and metric names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

/// Declarative encoder architecture. Widths are explicit, so a "x4"-style
/// width multiplier maps onto larger `block_channels` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderSpec {
    /// Conv blocks of conv3x3 + BN + ReLU, each optionally followed by 2x2
    /// average pooling. `pool` defaults to pooling after every block.
    Cnn {
        in_hw: (usize, usize),
        in_ch: usize,
        block_channels: Vec<usize>,
        #[serde(default)]
        pool: Vec<bool>,
    },
    /// Affine + ReLU stack over flattened `(1, 1, in_dim)` inputs.
    Mlp {
        in_dim: usize,
        #[serde(default)]
        hidden: Vec<usize>,
        feat_dim: usize,
    },
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            EncoderSpec::Cnn {
                in_hw,
                in_ch,
                block_channels,
                pool,
            } => {
                if *in_ch == 0 || in_hw.0 == 0 || in_hw.1 == 0 {
                    return Err(Error::Config("cnn encoder needs positive input dims".into()));
                }
                if block_channels.is_empty() {
                    return Err(Error::Config("cnn encoder needs at least one block".into()));
                }
                if block_channels.iter().any(|&c| c == 0) {
                    return Err(Error::Config("cnn block widths must be positive".into()));
                }
                if !pool.is_empty() && pool.len() != block_channels.len() {
                    return Err(Error::Config(format!(
                        "pool flags ({}) must match block count ({})",
                        pool.len(),
                        block_channels.len()
                    )));
                }
                let (mut h, mut w) = *in_hw;
                for &p in self.pool_flags().iter() {
                    if p {
                        if h % 2 != 0 || w % 2 != 0 || h < 2 || w < 2 {
                            return Err(Error::Config(format!(
                                "cannot 2x2-pool odd or unit spatial dims ({h}x{w})"
                            )));
                        }
                        h /= 2;
                        w /= 2;
                    }
                }
                Ok(())
            }
            EncoderSpec::Mlp {
                in_dim,
                hidden,
                feat_dim,
            } => {
                if *in_dim == 0 || *feat_dim == 0 || hidden.iter().any(|&d| d == 0) {
                    return Err(Error::Config("mlp encoder widths must be positive".into()));
                }
                Ok(())
            }
        }
    }

    fn pool_flags(&self) -> Vec<bool> {
        match self {
            EncoderSpec::Cnn {
                block_channels,
                pool,
                ..
            } => {
                if pool.is_empty() {
                    vec![true; block_channels.len()]
                } else {
                    pool.clone()
                }
            }
            EncoderSpec::Mlp { .. } => Vec::new(),
        }
    }

    /// Output channel count of the produced feature map.
    pub fn out_channels(&self) -> usize {
        match self {
            EncoderSpec::Cnn { block_channels, .. } => *block_channels.last().unwrap(),
            EncoderSpec::Mlp { feat_dim, .. } => *feat_dim,
        }
    }

    /// Output spatial size of the produced feature map.
    pub fn out_hw(&self) -> (usize, usize) {
        match self {
            EncoderSpec::Cnn { in_hw, .. } => {
                let (mut h, mut w) = *in_hw;
                for p in self.pool_flags() {
                    if p {
                        h /= 2;
                        w /= 2;
                    }
                }
                (h, w)
            }
            EncoderSpec::Mlp { .. } => (1, 1),
        }
    }

    /// Expected input shape `(H, W, Ch)`.
    pub fn in_shape(&self) -> (usize, usize, usize) {
        match self {
            EncoderSpec::Cnn { in_hw, in_ch, .. } => (in_hw.0, in_hw.1, *in_ch),
            EncoderSpec::Mlp { in_dim, .. } => (1, 1, *in_dim),
        }
    }
}

#[derive(Debug, Clone)]
struct CnnBlock {
    conv: Conv2d,
    bn: BatchNorm,
    pool: bool,
}

#[derive(Debug, Clone)]
enum Body {
    Cnn(Vec<CnnBlock>),
    Mlp(Vec<Affine>),
}

/// A parameterized feature extractor. Parameter enumeration order is the
/// declared layer order and is stable across snapshot/restore.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub role: Role,
    body: Body,
}

struct CnnBlockCache {
    x_in: FeatureMap,
    conv_out: FeatureMap,
    bn_cache: Option<BnCache>,
    bn_out: FeatureMap,
    relu_dim: (usize, usize, usize, usize),
}

struct MlpLayerCache {
    x_in: Array2<f64>,
    pre_act: Array2<f64>,
}

enum CacheBody {
    Cnn(Vec<CnnBlockCache>),
    Mlp(Vec<MlpLayerCache>),
}

/// Activations captured by [`Encoder::forward`]; required for backward and
/// for committing batch-norm running statistics.
pub struct EncoderCache {
    mode: ForwardMode,
    body: CacheBody,
}

impl Encoder {
    pub fn new<R: Rng>(spec: EncoderSpec, role: Role, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let body = match &spec {
            EncoderSpec::Cnn {
                in_ch,
                block_channels,
                ..
            } => {
                let flags = spec.pool_flags();
                let mut blocks = Vec::with_capacity(block_channels.len());
                let mut ch_in = *in_ch;
                for (bi, &ch_out) in block_channels.iter().enumerate() {
                    let mut conv = Conv2d::new(3, 3, ch_in, ch_out);
                    conv.init_he(rng);
                    blocks.push(CnnBlock {
                        conv,
                        bn: BatchNorm::new(ch_out),
                        pool: flags[bi],
                    });
                    ch_in = ch_out;
                }
                Body::Cnn(blocks)
            }
            EncoderSpec::Mlp {
                in_dim,
                hidden,
                feat_dim,
            } => {
                let mut widths = vec![*in_dim];
                widths.extend_from_slice(hidden);
                widths.push(*feat_dim);
                let mut layers = Vec::with_capacity(widths.len() - 1);
                for win in widths.windows(2) {
                    let mut layer = Affine::new(win[0], win[1]);
                    layer.init_he(rng);
                    layers.push(layer);
                }
                Body::Mlp(layers)
            }
        };
        Ok(Encoder { spec, role, body })
    }

    pub fn out_channels(&self) -> usize {
        self.spec.out_channels()
    }

    pub fn out_hw(&self) -> (usize, usize) {
        self.spec.out_hw()
    }

    pub fn forward(&self, x: &FeatureMap, mode: ForwardMode) -> (FeatureMap, EncoderCache) {
        let (_, h, w, c) = x.dim();
        assert_eq!(
            (h, w, c),
            self.spec.in_shape(),
            "encoder input shape does not match spec"
        );
        match &self.body {
            Body::Cnn(blocks) => {
                let mut caches = Vec::with_capacity(blocks.len());
                let mut cur = x.clone();
                for block in blocks {
                    let conv_out = block.conv.forward(&cur);
                    let (bn_out, bn_cache) = match mode {
                        ForwardMode::Train => {
                            let (y, c) = block.bn.forward_train(&conv_out);
                            (y, Some(c))
                        }
                        ForwardMode::Eval => (block.bn.forward_eval(&conv_out), None),
                    };
                    let activated = relu(&bn_out);
                    let relu_dim = activated.dim();
                    let next = if block.pool {
                        avg_pool2(&activated)
                    } else {
                        activated
                    };
                    caches.push(CnnBlockCache {
                        x_in: cur,
                        conv_out,
                        bn_cache,
                        bn_out,
                        relu_dim,
                    });
                    cur = next;
                }
                (
                    cur,
                    EncoderCache {
                        mode,
                        body: CacheBody::Cnn(caches),
                    },
                )
            }
            Body::Mlp(layers) => {
                let b = x.dim().0;
                let in_dim = self.spec.in_shape().2;
                let mut cur = x
                    .to_shape((b, in_dim))
                    .expect("mlp input reshape")
                    .to_owned();
                let mut caches = Vec::with_capacity(layers.len());
                for layer in layers {
                    let pre = layer.forward(&cur);
                    let post = pre.mapv(|v| v.max(0.0));
                    caches.push(MlpLayerCache {
                        x_in: cur,
                        pre_act: pre,
                    });
                    cur = post;
                }
                let feat_dim = self.spec.out_channels();
                let out = cur
                    .to_shape((b, 1, 1, feat_dim))
                    .expect("mlp output reshape")
                    .to_owned();
                (
                    out,
                    EncoderCache {
                        mode,
                        body: CacheBody::Mlp(caches),
                    },
                )
            }
        }
    }

    /// Eval-mode forward without keeping a cache.
    pub fn forward_eval(&self, x: &FeatureMap) -> FeatureMap {
        self.forward(x, ForwardMode::Eval).0
    }

    /// Accumulates parameter gradients for a training-mode forward.
    pub fn backward(&mut self, cache: &EncoderCache, d_out: &FeatureMap) {
        assert_eq!(
            cache.mode,
            ForwardMode::Train,
            "backward requires a training-mode cache"
        );
        match (&mut self.body, &cache.body) {
            (Body::Cnn(blocks), CacheBody::Cnn(caches)) => {
                let mut grad = d_out.clone();
                for (block, c) in blocks.iter_mut().zip(caches.iter()).rev() {
                    let d_relu = if block.pool {
                        avg_pool2_backward(c.relu_dim, &grad)
                    } else {
                        grad
                    };
                    let d_bn_out = relu_backward(&c.bn_out, &d_relu);
                    let d_conv_out =
                        block
                            .bn
                            .backward(&c.conv_out, c.bn_cache.as_ref().unwrap(), &d_bn_out);
                    grad = block.conv.backward(&c.x_in, &d_conv_out);
                }
            }
            (Body::Mlp(layers), CacheBody::Mlp(caches)) => {
                let b = d_out.dim().0;
                let feat_dim = self.spec.out_channels();
                let mut grad = d_out
                    .to_shape((b, feat_dim))
                    .expect("mlp grad reshape")
                    .to_owned();
                for (layer, c) in layers.iter_mut().zip(caches.iter()).rev() {
                    let mut d_pre = grad;
                    for (dv, &p) in d_pre.iter_mut().zip(c.pre_act.iter()) {
                        if p <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    grad = layer.backward(&c.x_in, &d_pre);
                }
            }
            _ => unreachable!("cache body kind matches encoder body"),
        }
    }

    /// Commits cached batch statistics into the running statistics. Only the
    /// trainer calls this, and only for parts being trained in the step.
    pub fn commit_bn(&mut self, cache: &EncoderCache) {
        if let (Body::Cnn(blocks), CacheBody::Cnn(caches)) = (&mut self.body, &cache.body) {
            for (block, c) in blocks.iter_mut().zip(caches.iter()) {
                if let Some(bn_cache) = &c.bn_cache {
                    block.bn.commit_running(bn_cache);
                }
            }
        }
    }
}

impl Parameterized for Encoder {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ParamKind, &[f64])) {
        match &self.body {
            Body::Cnn(blocks) => {
                for (i, b) in blocks.iter().enumerate() {
                    b.conv.visit_params(&mut scoped(&format!("block{i}.conv"), f));
                    b.bn.visit_params(&mut scoped(&format!("block{i}.bn"), f));
                }
            }
            Body::Mlp(layers) => {
                for (i, l) in layers.iter().enumerate() {
                    l.visit_params(&mut scoped(&format!("fc{i}"), f));
                }
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut [f64], &mut [f64])) {
        match &mut self.body {
            Body::Cnn(blocks) => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    b.conv
                        .visit_params_mut(&mut scoped_mut(&format!("block{i}.conv"), f));
                    b.bn
                        .visit_params_mut(&mut scoped_mut(&format!("block{i}.bn"), f));
                }
            }
            Body::Mlp(layers) => {
                for (i, l) in layers.iter_mut().enumerate() {
                    l.visit_params_mut(&mut scoped_mut(&format!("fc{i}"), f));
                }
            }
        }
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &[f64])) {
        if let Body::Cnn(blocks) = &self.body {
            for b in blocks {
                b.bn.visit_state(f);
            }
        }
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        if let Body::Cnn(blocks) = &mut self.body {
            for b in blocks.iter_mut() {
                b.bn.visit_state_mut(f);
            }
        }
    }
}

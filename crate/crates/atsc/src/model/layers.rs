//! Primitive layers with explicit forward caches and analytic backwards.
//!
//! Tensor layout is fixed framework-wide: feature maps are `(batch, H, W, Ch)`
//! in standard row-major order, so a sample occupies one contiguous chunk and
//! batch-parallel kernels write disjoint slices. Convolutions carry no bias
//! (batch normalization follows every conv in this codebase).

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::par;

/// Feature map tensor, shape `(batch, H, W, Ch)`.
pub type FeatureMap = Array4<f64>;

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// 2D convolution, stride 1, zero padding `k/2` (spatial dims preserved),
/// bias-free. Weight layout `(kh, kw, ch_in, ch_out)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kh: usize,
    pub kw: usize,
    pub ch_in: usize,
    pub ch_out: usize,
    pub weight: Array4<f64>,
    pub grad_weight: Array4<f64>,
}

impl Conv2d {
    pub fn new(kh: usize, kw: usize, ch_in: usize, ch_out: usize) -> Self {
        Conv2d {
            kh,
            kw,
            ch_in,
            ch_out,
            weight: Array4::zeros((kh, kw, ch_in, ch_out)),
            grad_weight: Array4::zeros((kh, kw, ch_in, ch_out)),
        }
    }

    /// He initialization: N(0, 2 / fan_in) with fan_in = kh*kw*ch_in.
    pub fn init_he<R: Rng>(&mut self, rng: &mut R) {
        let std = (2.0 / (self.kh * self.kw * self.ch_in) as f64).sqrt();
        for v in self.weight.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = z * std;
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let (b, h, w, cin) = x.dim();
        assert_eq!(cin, self.ch_in, "conv input channels");
        let (kh, kw, cout) = (self.kh, self.kw, self.ch_out);
        let (ph, pw) = (kh / 2, kw / 2);
        let mut y = Array4::zeros((b, h, w, cout));
        let xs = x.as_slice().unwrap();
        let ws = self.weight.as_slice().unwrap();
        let in_len = h * w * cin;
        let out_len = h * w * cout;
        par::for_each_chunk_mut(y.as_slice_mut().unwrap(), out_len, |bi, yc| {
            let xb = &xs[bi * in_len..(bi + 1) * in_len];
            for i in 0..h {
                for j in 0..w {
                    let ybase = (i * w + j) * cout;
                    for di in 0..kh {
                        let si = i + di;
                        if si < ph || si - ph >= h {
                            continue;
                        }
                        let si = si - ph;
                        for dj in 0..kw {
                            let sj = j + dj;
                            if sj < pw || sj - pw >= w {
                                continue;
                            }
                            let sj = sj - pw;
                            let xbase = (si * w + sj) * cin;
                            let wbase = (di * kw + dj) * cin * cout;
                            for c in 0..cin {
                                let xv = xb[xbase + c];
                                let wrow = wbase + c * cout;
                                for o in 0..cout {
                                    yc[ybase + o] += xv * ws[wrow + o];
                                }
                            }
                        }
                    }
                }
            }
        });
        y
    }

    /// Accumulates the weight gradient and returns the input gradient.
    pub fn backward(&mut self, x: &FeatureMap, dy: &FeatureMap) -> FeatureMap {
        let (b, h, w, cin) = x.dim();
        let (kh, kw, cout) = (self.kh, self.kw, self.ch_out);
        let (ph, pw) = (kh / 2, kw / 2);
        debug_assert_eq!(dy.dim(), (b, h, w, cout));
        let xs = x.as_slice().unwrap();
        let dys = dy.as_slice().unwrap();
        let in_len = h * w * cin;
        let out_len = h * w * cout;

        let mut dx = Array4::zeros((b, h, w, cin));
        par::for_each_chunk_mut(dx.as_slice_mut().unwrap(), in_len, |bi, dxc| {
            let dyb = &dys[bi * out_len..(bi + 1) * out_len];
            let ws = self.weight.as_slice().unwrap();
            for i in 0..h {
                for j in 0..w {
                    let ybase = (i * w + j) * cout;
                    for di in 0..kh {
                        let si = i + di;
                        if si < ph || si - ph >= h {
                            continue;
                        }
                        let si = si - ph;
                        for dj in 0..kw {
                            let sj = j + dj;
                            if sj < pw || sj - pw >= w {
                                continue;
                            }
                            let sj = sj - pw;
                            let xbase = (si * w + sj) * cin;
                            let wbase = (di * kw + dj) * cin * cout;
                            for c in 0..cin {
                                let wrow = wbase + c * cout;
                                let mut acc = 0.0;
                                for o in 0..cout {
                                    acc += dyb[ybase + o] * ws[wrow + o];
                                }
                                dxc[xbase + c] += acc;
                            }
                        }
                    }
                }
            }
        });

        let nw = kh * kw * cin * cout;
        let partial = par::chunked_reduce(
            b,
            |range| {
                let mut pw_acc = vec![0.0f64; nw];
                for bi in range {
                    let xb = &xs[bi * in_len..(bi + 1) * in_len];
                    let dyb = &dys[bi * out_len..(bi + 1) * out_len];
                    for i in 0..h {
                        for j in 0..w {
                            let ybase = (i * w + j) * cout;
                            for di in 0..kh {
                                let si = i + di;
                                if si < ph || si - ph >= h {
                                    continue;
                                }
                                let si = si - ph;
                                for dj in 0..kw {
                                    let sj = j + dj;
                                    if sj < pw || sj - pw >= w {
                                        continue;
                                    }
                                    let sj = sj - pw;
                                    let xbase = (si * w + sj) * cin;
                                    let wbase = (di * kw + dj) * cin * cout;
                                    for c in 0..cin {
                                        let xv = xb[xbase + c];
                                        let wrow = wbase + c * cout;
                                        for o in 0..cout {
                                            pw_acc[wrow + o] += xv * dyb[ybase + o];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                pw_acc
            },
            |mut a, p| {
                for (av, pv) in a.iter_mut().zip(&p) {
                    *av += pv;
                }
                a
            },
        );
        if let Some(pw_acc) = partial {
            let g = self.grad_weight.as_slice_mut().unwrap();
            for (gv, pv) in g.iter_mut().zip(&pw_acc) {
                *gv += pv;
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// BatchNorm
// ---------------------------------------------------------------------------

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over `(batch, H, W)`.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub grad_gamma: Array1<f64>,
    pub grad_beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

/// Batch statistics captured by a training-mode forward. Running statistics
/// are only touched when the trainer explicitly commits the cache.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub inv_std: Array1<f64>,
    pub m: usize,
}

impl BatchNorm {
    pub fn new(ch: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(ch),
            beta: Array1::zeros(ch),
            grad_gamma: Array1::zeros(ch),
            grad_beta: Array1::zeros(ch),
            running_mean: Array1::zeros(ch),
            running_var: Array1::ones(ch),
        }
    }

    pub fn ch(&self) -> usize {
        self.gamma.len()
    }

    /// Training-mode forward: normalize by the batch statistics.
    pub fn forward_train(&self, x: &FeatureMap) -> (FeatureMap, BnCache) {
        let (b, h, w, ch) = x.dim();
        assert_eq!(ch, self.ch(), "batchnorm channels");
        let m = b * h * w;
        let xs = x.as_slice().unwrap();
        let stats = par::map_indices(ch, |c| {
            let mut sum = 0.0;
            let mut i = c;
            while i < xs.len() {
                sum += xs[i];
                i += ch;
            }
            let mean = sum / m as f64;
            let mut ss = 0.0;
            let mut i = c;
            while i < xs.len() {
                let d = xs[i] - mean;
                ss += d * d;
                i += ch;
            }
            (mean, ss / m as f64)
        });
        let mean = Array1::from_iter(stats.iter().map(|s| s.0));
        let var = Array1::from_iter(stats.iter().map(|s| s.1));
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());

        let mut y = Array4::zeros((b, h, w, ch));
        let chunk = h * w * ch;
        let (ms, is) = (mean.as_slice().unwrap(), inv_std.as_slice().unwrap());
        let (gs, bs) = (self.gamma.as_slice().unwrap(), self.beta.as_slice().unwrap());
        par::for_each_chunk_mut(y.as_slice_mut().unwrap(), chunk, |bi, yc| {
            let xb = &xs[bi * chunk..(bi + 1) * chunk];
            for (k, yv) in yc.iter_mut().enumerate() {
                let c = k % ch;
                *yv = gs[c] * (xb[k] - ms[c]) * is[c] + bs[c];
            }
        });
        (y, BnCache { mean, var, inv_std, m })
    }

    /// Evaluation-mode forward: normalize by the running statistics.
    pub fn forward_eval(&self, x: &FeatureMap) -> FeatureMap {
        let (b, h, w, ch) = x.dim();
        assert_eq!(ch, self.ch(), "batchnorm channels");
        let xs = x.as_slice().unwrap();
        let mut y = Array4::zeros((b, h, w, ch));
        let chunk = h * w * ch;
        let rm = self.running_mean.as_slice().unwrap();
        let rv = self.running_var.as_slice().unwrap();
        let (gs, bs) = (self.gamma.as_slice().unwrap(), self.beta.as_slice().unwrap());
        par::for_each_chunk_mut(y.as_slice_mut().unwrap(), chunk, |bi, yc| {
            let xb = &xs[bi * chunk..(bi + 1) * chunk];
            for (k, yv) in yc.iter_mut().enumerate() {
                let c = k % ch;
                *yv = gs[c] * (xb[k] - rm[c]) / (rv[c] + BN_EPS).sqrt() + bs[c];
            }
        });
        y
    }

    /// Backward through a training-mode forward. Accumulates gamma/beta
    /// gradients and returns the input gradient, including the batch-statistic
    /// pathways.
    pub fn backward(&mut self, x: &FeatureMap, cache: &BnCache, dy: &FeatureMap) -> FeatureMap {
        let (b, h, w, ch) = x.dim();
        let m = cache.m as f64;
        let xs = x.as_slice().unwrap();
        let dys = dy.as_slice().unwrap();
        let ms = cache.mean.as_slice().unwrap();
        let is = cache.inv_std.as_slice().unwrap();
        let gs = self.gamma.as_slice().unwrap();

        // Per channel: s1 = sum dy, s2 = sum dy*(x-mu), s3 = sum (x-mu).
        let sums = par::map_indices(ch, |c| {
            let (mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0);
            let mut i = c;
            while i < xs.len() {
                let d = xs[i] - ms[c];
                s1 += dys[i];
                s2 += dys[i] * d;
                s3 += d;
                i += ch;
            }
            (s1, s2, s3)
        });

        let mut dvar = vec![0.0f64; ch];
        let mut dmean = vec![0.0f64; ch];
        for c in 0..ch {
            let (s1, s2, s3) = sums[c];
            self.grad_gamma[c] += s2 * is[c];
            self.grad_beta[c] += s1;
            dvar[c] = gs[c] * s2 * (-0.5) * is[c] * is[c] * is[c];
            dmean[c] = -gs[c] * s1 * is[c] + dvar[c] * (-2.0 * s3) / m;
        }

        let mut dx = Array4::zeros((b, h, w, ch));
        let chunk = h * w * ch;
        par::for_each_chunk_mut(dx.as_slice_mut().unwrap(), chunk, |bi, dxc| {
            let xb = &xs[bi * chunk..(bi + 1) * chunk];
            let dyb = &dys[bi * chunk..(bi + 1) * chunk];
            for (k, dv) in dxc.iter_mut().enumerate() {
                let c = k % ch;
                *dv = gs[c] * is[c] * dyb[k]
                    + dvar[c] * 2.0 * (xb[k] - ms[c]) / m
                    + dmean[c] / m;
            }
        });
        dx
    }

    /// Folds the cached batch statistics into the running statistics.
    pub fn commit_running(&mut self, cache: &BnCache) {
        let unbias = if cache.m > 1 {
            cache.m as f64 / (cache.m - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.ch() {
            self.running_mean[c] =
                (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * cache.mean[c];
            self.running_var[c] =
                (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * cache.var[c] * unbias;
        }
    }
}

// ---------------------------------------------------------------------------
// Affine
// ---------------------------------------------------------------------------

/// Fully connected layer `y = x W + b`, weight layout `(in, out)`.
#[derive(Debug, Clone)]
pub struct Affine {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub grad_w: Array2<f64>,
    pub grad_b: Array1<f64>,
}

impl Affine {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        Affine {
            w: Array2::zeros((n_in, n_out)),
            b: Array1::zeros(n_out),
            grad_w: Array2::zeros((n_in, n_out)),
            grad_b: Array1::zeros(n_out),
        }
    }

    /// Uniform fan-in initialization: U(-1/sqrt(n_in), 1/sqrt(n_in)) for
    /// weights and bias.
    pub fn init_uniform_fanin<R: Rng>(&mut self, rng: &mut R) {
        let bound = 1.0 / (self.w.nrows() as f64).sqrt();
        for v in self.w.iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
        for v in self.b.iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
    }

    /// He initialization for hidden layers feeding a ReLU; bias zero.
    pub fn init_he<R: Rng>(&mut self, rng: &mut R) {
        let std = (2.0 / self.w.nrows() as f64).sqrt();
        for v in self.w.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = z * std;
        }
        self.b.fill(0.0);
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let (b, n_in) = x.dim();
        let n_out = self.b.len();
        assert_eq!(n_in, self.w.nrows(), "affine input width");
        let xs = x.as_slice().unwrap();
        let ws = self.w.as_slice().unwrap();
        let bs = self.b.as_slice().unwrap();
        let mut y = Array2::zeros((b, n_out));
        par::for_each_chunk_mut(y.as_slice_mut().unwrap(), n_out, |bi, yc| {
            let xb = &xs[bi * n_in..(bi + 1) * n_in];
            yc.copy_from_slice(bs);
            for (i, &xv) in xb.iter().enumerate() {
                let wrow = &ws[i * n_out..(i + 1) * n_out];
                for o in 0..n_out {
                    yc[o] += xv * wrow[o];
                }
            }
        });
        y
    }

    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        let (b, n_in) = x.dim();
        let n_out = self.b.len();
        let xs = x.as_slice().unwrap();
        let dys = dy.as_slice().unwrap();
        let ws = self.w.as_slice().unwrap();

        let mut dx = Array2::zeros((b, n_in));
        par::for_each_chunk_mut(dx.as_slice_mut().unwrap(), n_in, |bi, dxc| {
            let dyb = &dys[bi * n_out..(bi + 1) * n_out];
            for (i, dv) in dxc.iter_mut().enumerate() {
                let wrow = &ws[i * n_out..(i + 1) * n_out];
                let mut acc = 0.0;
                for o in 0..n_out {
                    acc += dyb[o] * wrow[o];
                }
                *dv = acc;
            }
        });

        let partial = par::chunked_reduce(
            b,
            |range| {
                let mut pw = vec![0.0f64; n_in * n_out];
                let mut pb = vec![0.0f64; n_out];
                for bi in range {
                    let xb = &xs[bi * n_in..(bi + 1) * n_in];
                    let dyb = &dys[bi * n_out..(bi + 1) * n_out];
                    for (i, &xv) in xb.iter().enumerate() {
                        let row = &mut pw[i * n_out..(i + 1) * n_out];
                        for o in 0..n_out {
                            row[o] += xv * dyb[o];
                        }
                    }
                    for o in 0..n_out {
                        pb[o] += dyb[o];
                    }
                }
                (pw, pb)
            },
            |(mut aw, mut ab), (pw, pb)| {
                for (a, p) in aw.iter_mut().zip(&pw) {
                    *a += p;
                }
                for (a, p) in ab.iter_mut().zip(&pb) {
                    *a += p;
                }
                (aw, ab)
            },
        );
        if let Some((pw, pb)) = partial {
            for (g, p) in self.grad_w.as_slice_mut().unwrap().iter_mut().zip(&pw) {
                *g += p;
            }
            for (g, p) in self.grad_b.as_slice_mut().unwrap().iter_mut().zip(&pb) {
                *g += p;
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Functional ops
// ---------------------------------------------------------------------------

pub fn relu(x: &FeatureMap) -> FeatureMap {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(x: &FeatureMap, dy: &FeatureMap) -> FeatureMap {
    let mut dx = dy.clone();
    for (dv, &xv) in dx.iter_mut().zip(x.iter()) {
        if xv <= 0.0 {
            *dv = 0.0;
        }
    }
    dx
}

/// 2x2 average pooling, stride 2. Spatial dims must be even.
pub fn avg_pool2(x: &FeatureMap) -> FeatureMap {
    pool_mean(x, 2, 2)
}

pub fn avg_pool2_backward(in_dim: (usize, usize, usize, usize), dy: &FeatureMap) -> FeatureMap {
    pool_mean_backward(in_dim, dy, 2, 2)
}

fn pool_mean(x: &FeatureMap, kh: usize, kw: usize) -> FeatureMap {
    let (b, h, w, ch) = x.dim();
    assert!(h % kh == 0 && w % kw == 0, "pool window must tile the input");
    let (oh, ow) = (h / kh, w / kw);
    let xs = x.as_slice().unwrap();
    let mut y = Array4::zeros((b, oh, ow, ch));
    let in_len = h * w * ch;
    let out_len = oh * ow * ch;
    let inv = 1.0 / (kh * kw) as f64;
    par::for_each_chunk_mut(y.as_slice_mut().unwrap(), out_len, |bi, yc| {
        let xb = &xs[bi * in_len..(bi + 1) * in_len];
        for i in 0..oh {
            for j in 0..ow {
                let ybase = (i * ow + j) * ch;
                for di in 0..kh {
                    for dj in 0..kw {
                        let xbase = ((i * kh + di) * w + j * kw + dj) * ch;
                        for c in 0..ch {
                            yc[ybase + c] += xb[xbase + c];
                        }
                    }
                }
                for c in 0..ch {
                    yc[ybase + c] *= inv;
                }
            }
        }
    });
    y
}

fn pool_mean_backward(
    in_dim: (usize, usize, usize, usize),
    dy: &FeatureMap,
    kh: usize,
    kw: usize,
) -> FeatureMap {
    let (b, h, w, ch) = in_dim;
    let (_, oh, ow, _) = dy.dim();
    debug_assert_eq!((oh * kh, ow * kw), (h, w));
    let dys = dy.as_slice().unwrap();
    let mut dx = Array4::zeros((b, h, w, ch));
    let in_len = h * w * ch;
    let out_len = oh * ow * ch;
    let inv = 1.0 / (kh * kw) as f64;
    par::for_each_chunk_mut(dx.as_slice_mut().unwrap(), in_len, |bi, dxc| {
        let dyb = &dys[bi * out_len..(bi + 1) * out_len];
        for i in 0..oh {
            for j in 0..ow {
                let ybase = (i * ow + j) * ch;
                for di in 0..kh {
                    for dj in 0..kw {
                        let xbase = ((i * kh + di) * w + j * kw + dj) * ch;
                        for c in 0..ch {
                            dxc[xbase + c] = dyb[ybase + c] * inv;
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Global average pooling `(b, h, w, ch) -> (b, ch)`.
pub fn global_avg_pool(x: &FeatureMap) -> Array2<f64> {
    let (b, h, w, ch) = x.dim();
    let xs = x.as_slice().unwrap();
    let mut y = Array2::zeros((b, ch));
    let in_len = h * w * ch;
    let inv = 1.0 / (h * w) as f64;
    par::for_each_chunk_mut(y.as_slice_mut().unwrap(), ch, |bi, yc| {
        let xb = &xs[bi * in_len..(bi + 1) * in_len];
        for (k, &xv) in xb.iter().enumerate() {
            yc[k % ch] += xv;
        }
        for v in yc.iter_mut() {
            *v *= inv;
        }
    });
    y
}

pub fn global_avg_pool_backward(
    in_dim: (usize, usize, usize, usize),
    dy: &Array2<f64>,
) -> FeatureMap {
    let (b, h, w, ch) = in_dim;
    let dys = dy.as_slice().unwrap();
    let mut dx = Array4::zeros((b, h, w, ch));
    let in_len = h * w * ch;
    let inv = 1.0 / (h * w) as f64;
    par::for_each_chunk_mut(dx.as_slice_mut().unwrap(), in_len, |bi, dxc| {
        let dyb = &dys[bi * ch..(bi + 1) * ch];
        for (k, dv) in dxc.iter_mut().enumerate() {
            *dv = dyb[k % ch] * inv;
        }
    });
    dx
}

/// Average-pools a teacher feature map down to the student's spatial size.
/// Identity when the sizes already match. The teacher-smaller case is
/// unsupported.
pub fn align_spatial(teacher_feat: &FeatureMap, student_hw: (usize, usize)) -> Result<FeatureMap> {
    let (_, h, w, _) = teacher_feat.dim();
    let (sh, sw) = student_hw;
    if (h, w) == (sh, sw) {
        return Ok(teacher_feat.clone());
    }
    if h < sh || w < sw {
        return Err(Error::Shape(format!(
            "cannot align teacher {h}x{w} up to student {sh}x{sw}: only the teacher-larger case is supported"
        )));
    }
    if h % sh != 0 || w % sw != 0 {
        return Err(Error::Shape(format!(
            "teacher {h}x{w} is not an integer multiple of student {sh}x{sw}"
        )));
    }
    Ok(pool_mean(teacher_feat, h / sh, w / sw))
}

/// Gradient of [`align_spatial`] with respect to the teacher feature map.
pub fn align_spatial_backward(
    teacher_dim: (usize, usize, usize, usize),
    dy: &FeatureMap,
) -> FeatureMap {
    let (_, h, w, _) = teacher_dim;
    let (_, oh, ow, _) = dy.dim();
    if (h, w) == (oh, ow) {
        return dy.clone();
    }
    pool_mean_backward(teacher_dim, dy, h / oh, w / ow)
}

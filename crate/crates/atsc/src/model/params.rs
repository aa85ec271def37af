//! Uniform access to trainable parameters across model parts.
//!
//! Every part enumerates its parameter tensors in a fixed declared order;
//! snapshots, optimizers, parameter counting, and checkpoints all rely on
//! that ordering being stable across construction, save, and restore.

use crate::error::{Error, Result};

/// Classifies a tensor for weight-decay purposes: decay applies to `Weight`
/// tensors only, never to biases or batch-norm gain/shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    BiasOrGain,
}

/// A model part exposing its trainable parameters and auxiliary state.
pub trait Parameterized {
    /// Visits `(name, kind, values)` for each trainable tensor, in order.
    fn visit_params(&self, f: &mut dyn FnMut(&str, ParamKind, &[f64]));

    /// Mutable visit over `(name, kind, values, grads)`, in the same order.
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut [f64], &mut [f64]));

    /// Non-trainable state (batch-norm running statistics), in order.
    fn visit_state(&self, _f: &mut dyn FnMut(&str, &[f64])) {}

    /// Mutable visit over non-trainable state.
    fn visit_state_mut(&mut self, _f: &mut dyn FnMut(&str, &mut [f64])) {}

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _, v| n += v.len());
        n
    }

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, _, _, g| g.fill(0.0));
    }

    /// Trainable parameters flattened in declared order.
    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |_, _, v| out.extend_from_slice(v));
        out
    }

    fn load_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let expect = self.param_count();
        if flat.len() != expect {
            return Err(Error::Contract(format!(
                "parameter vector length {} does not match part size {expect}",
                flat.len()
            )));
        }
        let mut off = 0;
        self.visit_params_mut(&mut |_, _, v, _| {
            v.copy_from_slice(&flat[off..off + v.len()]);
            off += v.len();
        });
        Ok(())
    }

    fn flat_state(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_state(&mut |_, v| out.extend_from_slice(v));
        out
    }

    fn load_flat_state(&mut self, flat: &[f64]) -> Result<()> {
        let mut expect = 0;
        self.visit_state(&mut |_, v| expect += v.len());
        if flat.len() != expect {
            return Err(Error::Contract(format!(
                "state vector length {} does not match part state size {expect}",
                flat.len()
            )));
        }
        let mut off = 0;
        self.visit_state_mut(&mut |_, v| {
            v.copy_from_slice(&flat[off..off + v.len()]);
            off += v.len();
        });
        Ok(())
    }
}

impl Parameterized for super::layers::Conv2d {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ParamKind, &[f64])) {
        f("weight", ParamKind::Weight, self.weight.as_slice().unwrap());
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut [f64], &mut [f64])) {
        f(
            "weight",
            ParamKind::Weight,
            self.weight.as_slice_mut().unwrap(),
            self.grad_weight.as_slice_mut().unwrap(),
        );
    }
}

impl Parameterized for super::layers::BatchNorm {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ParamKind, &[f64])) {
        f("gamma", ParamKind::BiasOrGain, self.gamma.as_slice().unwrap());
        f("beta", ParamKind::BiasOrGain, self.beta.as_slice().unwrap());
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut [f64], &mut [f64])) {
        f(
            "gamma",
            ParamKind::BiasOrGain,
            self.gamma.as_slice_mut().unwrap(),
            self.grad_gamma.as_slice_mut().unwrap(),
        );
        f(
            "beta",
            ParamKind::BiasOrGain,
            self.beta.as_slice_mut().unwrap(),
            self.grad_beta.as_slice_mut().unwrap(),
        );
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("running_mean", self.running_mean.as_slice().unwrap());
        f("running_var", self.running_var.as_slice().unwrap());
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("running_mean", self.running_mean.as_slice_mut().unwrap());
        f("running_var", self.running_var.as_slice_mut().unwrap());
    }
}

impl Parameterized for super::layers::Affine {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ParamKind, &[f64])) {
        f("weight", ParamKind::Weight, self.w.as_slice().unwrap());
        f("bias", ParamKind::BiasOrGain, self.b.as_slice().unwrap());
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut [f64], &mut [f64])) {
        f(
            "weight",
            ParamKind::Weight,
            self.w.as_slice_mut().unwrap(),
            self.grad_w.as_slice_mut().unwrap(),
        );
        f(
            "bias",
            ParamKind::BiasOrGain,
            self.b.as_slice_mut().unwrap(),
            self.grad_b.as_slice_mut().unwrap(),
        );
    }
}

/// Prefixes child tensor names when a composite delegates its visit.
pub(crate) fn scoped<'a>(
    prefix: &'a str,
    f: &'a mut dyn FnMut(&str, ParamKind, &[f64]),
) -> impl FnMut(&str, ParamKind, &[f64]) + 'a {
    move |name, kind, v| f(&format!("{prefix}.{name}"), kind, v)
}

pub(crate) fn scoped_mut<'a>(
    prefix: &'a str,
    f: &'a mut dyn FnMut(&str, ParamKind, &mut [f64], &mut [f64]),
) -> impl FnMut(&str, ParamKind, &mut [f64], &mut [f64]) + 'a {
    move |name, kind, v, g| f(&format!("{prefix}.{name}"), kind, v, g)
}

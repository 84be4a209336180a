//! Normalization layers shared by every network variant.

use darc_tensor::{Graph, ParamId, ParamStore, Pooling, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::dain::{DainLayer, NORM_EPS};
use crate::init::Builder;

/// Momentum of the batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    Batch,
    Instance,
    Dain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Where a DAIN layer takes its residual from.
#[derive(Clone, Copy, Debug)]
pub enum Residual {
    /// The running average buffer.
    Running,
    /// `f(rho)` for per-sample ratios `[N, 1, 1, 1]`.
    Ratio(Var),
}

/// Per-forward state: the mode, read access to buffers, and buffer updates
/// staged for the caller to commit after the optimizer step.
pub struct ForwardCtx<'b, T: Scalar> {
    pub mode: Mode,
    pub buffers: &'b ParamStore<T>,
    updates: Vec<(ParamId, Tensor<T>)>,
}

impl<'b, T: Scalar> ForwardCtx<'b, T> {
    pub fn new(mode: Mode, buffers: &'b ParamStore<T>) -> Self {
        Self {
            mode,
            buffers,
            updates: Vec::new(),
        }
    }

    pub(crate) fn stage(&mut self, id: ParamId, value: Tensor<T>) {
        debug_assert_eq!(self.mode, Mode::Train);
        self.updates.push((id, value));
    }

    pub fn into_updates(self) -> Vec<(ParamId, Tensor<T>)> {
        self.updates
    }
}

pub fn commit_updates<T: Scalar>(buffers: &mut ParamStore<T>, updates: Vec<(ParamId, Tensor<T>)>) {
    for (id, t) in updates {
        *buffers.get_mut(id) = t;
    }
}

/// `(x - mu) / delta * gamma + beta`.
pub fn affine_normalize<T: Scalar>(g: &mut Graph<T>, x: Var, mu: Var, delta: Var, gamma: Var, beta: Var) -> Var {
    let c = g.sub(x, mu);
    let n = g.div(c, delta);
    let s = g.mul(n, gamma);
    g.add(s, beta)
}

#[derive(Clone, Debug)]
enum Layer {
    Batch { mean: ParamId, var: ParamId },
    Instance,
    Dain(DainLayer),
}

/// A normalization followed by a learned per-channel affine map.
#[derive(Clone, Debug)]
pub struct Norm {
    gamma: ParamId,
    beta: ParamId,
    layer: Layer,
}

impl Norm {
    pub(crate) fn build<T: Scalar>(b: &mut Builder<T>, prefix: &str, c: usize, kind: NormKind, alpha: f64) -> Self {
        let gamma = b.full(&format!("{prefix}.gamma"), [1, c, 1, 1], 1.0);
        let beta = b.full(&format!("{prefix}.beta"), [1, c, 1, 1], 0.0);
        let layer = match kind {
            NormKind::Batch => Layer::Batch {
                mean: b.buffer(&format!("{prefix}.running_mean"), [1, c, 1, 1], 0.0),
                var: b.buffer(&format!("{prefix}.running_var"), [1, c, 1, 1], 1.0),
            },
            NormKind::Instance => Layer::Instance,
            NormKind::Dain => Layer::Dain(DainLayer::build(b, prefix, c, alpha)),
        };
        Self { gamma, beta, layer }
    }

    pub fn kind(&self) -> NormKind {
        match self.layer {
            Layer::Batch { .. } => NormKind::Batch,
            Layer::Instance => NormKind::Instance,
            Layer::Dain(_) => NormKind::Dain,
        }
    }

    pub fn dain(&self) -> Option<&DainLayer> {
        match &self.layer {
            Layer::Dain(d) => Some(d),
            _ => None,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, residual: Residual, ctx: &mut ForwardCtx<T>) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        match &self.layer {
            Layer::Instance => {
                let mu = g.mean(x, Pooling::Instance);
                let delta = g.std(x, Pooling::Instance, NORM_EPS);
                affine_normalize(g, x, mu, delta, gamma, beta)
            }
            Layer::Dain(d) => d.forward(g, x, gamma, beta, residual, ctx),
            Layer::Batch { mean, var } => match ctx.mode {
                Mode::Train => {
                    let mu = g.mean(x, Pooling::Batch);
                    let delta = g.std(x, Pooling::Batch, NORM_EPS);
                    let (bm, bv) = batch_moments(g.value(x));
                    let m = T::of(BN_MOMENTUM);
                    let keep = T::one() - m;
                    let bufs = ctx.buffers;
                    let (rm, rv) = (bufs.get(*mean), bufs.get(*var));
                    let rm = Tensor::from_fn(rm.shape(), |i| keep * rm.data()[i] + m * bm[i]);
                    let rv = Tensor::from_fn(rv.shape(), |i| keep * rv.data()[i] + m * bv[i]);
                    ctx.stage(*mean, rm);
                    ctx.stage(*var, rv);
                    affine_normalize(g, x, mu, delta, gamma, beta)
                }
                Mode::Eval => {
                    let mu = g.constant(ctx.buffers.get(*mean).clone());
                    let eps = T::of(NORM_EPS);
                    let delta = g.constant(ctx.buffers.get(*var).map(|v| (v + eps).sqrt()));
                    affine_normalize(g, x, mu, delta, gamma, beta)
                }
            },
        }
    }
}

/// Per-channel batch mean and unbiased variance.
fn batch_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let [n, c, _, _] = x.shape();
    let hw = x.plane();
    let count = (n * hw) as f64;
    let mut means = Vec::with_capacity(c);
    let mut vars = Vec::with_capacity(c);
    for ch in 0..c {
        let planes = || (0..n).flat_map(|s| x.data()[x.index(s, ch, 0, 0)..][..hw].iter());
        let m = planes().map(|v| v.as_f64()).sum::<f64>() / count;
        let ss = planes().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
        means.push(T::of(m));
        vars.push(T::of(ss / (count - 1.0).max(1.0)));
    }
    (means, vars)
}

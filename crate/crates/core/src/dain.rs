//! Distribution-aware instance normalization.
//!
//! Instance statistics `(mu, delta)` are corrected by two small estimators
//! that also see a residual `ds` derived from the foreground ratio:
//! `mu' = mu + M_mu(mu, delta, ds)` and `delta' = delta * exp(M_delta(...))`.
//! Both corrections start at zero, so a fresh layer is plain instance
//! normalization. When no ratio is known the running average `ds_ra` stands in.
//!
//! The plain `f64` functions here are the reference route; [`DainLayer`] is
//! the same computation on the autodiff tape, used by the network.

use darc_tensor::{ChannelMlpVars, Graph, ParamId, ParamStore, Pooling, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::{DarcError, Result};
use crate::init::Builder;
use crate::norm::{affine_normalize, ForwardCtx, Mode, Residual};

/// Added to the variance under the square root.
pub const NORM_EPS: f64 = 1e-5;
pub const DEFAULT_ALPHA: f64 = 0.1;
/// Hidden units per channel in each estimator.
pub const ESTIMATOR_HIDDEN: usize = 2;
/// Inputs per channel: `mu`, `delta`, `ds`.
const ESTIMATOR_INPUTS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mu: Vec<f64>,
    pub delta: Vec<f64>,
}

/// Per-channel mean and `sqrt(var + eps)` of sample `n` of a feature map.
pub fn instance_stats(x: &Tensor<f64>, n: usize) -> FeatureStats {
    let [_, c, _, _] = x.shape();
    let hw = x.plane() as f64;
    let mut mu = Vec::with_capacity(c);
    let mut delta = Vec::with_capacity(c);
    for ch in 0..c {
        let start = x.index(n, ch, 0, 0);
        let plane = &x.data()[start..start + x.plane()];
        let m = plane.iter().sum::<f64>() / hw;
        let v = plane.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / hw;
        mu.push(m);
        delta.push((v + NORM_EPS).sqrt());
    }
    FeatureStats { mu, delta }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatResidual {
    pub ds: Vec<f64>,
}

/// `ra <- (1 - alpha) * ra + alpha * ds`, element-wise.
pub fn ema_step<T: Scalar>(ra: &mut [T], ds: &[T], alpha: f64) {
    let (keep, take) = (T::of(1.0 - alpha), T::of(alpha));
    for (r, &d) in ra.iter_mut().zip(ds) {
        *r = keep * *r + take * d;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningResidual {
    ds_ra: Vec<f64>,
    alpha: f64,
}

impl RunningResidual {
    pub fn new(channels: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(DarcError::OutOfRange(format!("momentum {alpha} not in (0, 1]")));
        }
        Ok(Self {
            ds_ra: vec![0.0; channels],
            alpha,
        })
    }

    pub fn ds_ra(&self) -> &[f64] {
        &self.ds_ra
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn as_residual(&self) -> StatResidual {
        StatResidual {
            ds: self.ds_ra.clone(),
        }
    }
}

pub fn update_running(rr: &mut RunningResidual, ds: &StatResidual, mode: Mode) -> Result<()> {
    if mode != Mode::Train {
        return Err(DarcError::FrozenBuffer);
    }
    if ds.ds.len() != rr.ds_ra.len() {
        return Err(DarcError::ShapeMismatch(format!(
            "residual has {} channels, running average {}",
            ds.ds.len(),
            rr.ds_ra.len()
        )));
    }
    ema_step(&mut rr.ds_ra, &ds.ds, rr.alpha);
    Ok(())
}

/// Independent two-layer tanh perceptron per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMlp {
    pub channels: usize,
    pub hidden: usize,
    /// `[C][hidden][inputs]`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ChannelMlp {
    pub fn zero_output(channels: usize, rng: &mut impl Rng) -> Self {
        let hidden = ESTIMATOR_HIDDEN;
        let bound = 1.0 / (ESTIMATOR_INPUTS as f64).sqrt();
        Self {
            channels,
            hidden,
            w1: (0..channels * hidden * ESTIMATOR_INPUTS)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
            b1: vec![0.0; channels * hidden],
            w2: vec![0.0; channels * hidden],
            b2: vec![0.0; channels],
        }
    }

    pub fn random(channels: usize, rng: &mut impl Rng, scale: f64) -> Self {
        let hidden = ESTIMATOR_HIDDEN;
        let mut draw = |k: usize| (0..k).map(|_| rng.random_range(-scale..scale)).collect::<Vec<_>>();
        Self {
            channels,
            hidden,
            w1: draw(channels * hidden * ESTIMATOR_INPUTS),
            b1: draw(channels * hidden),
            w2: draw(channels * hidden),
            b2: draw(channels),
        }
    }

    pub fn eval(&self, mu: &[f64], delta: &[f64], ds: &[f64]) -> Vec<f64> {
        (0..self.channels)
            .map(|c| {
                let input = [mu[c], delta[c], ds[c]];
                let mut out = self.b2[c];
                for j in 0..self.hidden {
                    let row = (c * self.hidden + j) * ESTIMATOR_INPUTS;
                    let z = self.b1[c * self.hidden + j]
                        + (0..ESTIMATOR_INPUTS).map(|k| self.w1[row + k] * input[k]).sum::<f64>();
                    out += self.w2[c * self.hidden + j] * z.tanh();
                }
                out
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatEstimator {
    pub mu: ChannelMlp,
    pub delta: ChannelMlp,
}

impl StatEstimator {
    /// Zero corrections: re-estimation returns its input statistics.
    pub fn identity(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            mu: ChannelMlp::zero_output(channels, rng),
            delta: ChannelMlp::zero_output(channels, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.mu.channels
    }
}

pub fn reestimate(stats: &FeatureStats, ds: &StatResidual, est: &StatEstimator) -> FeatureStats {
    let m_mu = est.mu.eval(&stats.mu, &stats.delta, &ds.ds);
    let m_delta = est.delta.eval(&stats.mu, &stats.delta, &ds.ds);
    FeatureStats {
        mu: stats.mu.iter().zip(&m_mu).map(|(m, c)| m + c).collect(),
        delta: stats.delta.iter().zip(&m_delta).map(|(d, c)| d * c.exp()).collect(),
    }
}

/// Per-layer affine map from the scalar ratio to a channel residual.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

pub fn residual_from_ratio(rho: f64, proj: &Projection) -> Result<StatResidual> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(DarcError::OutOfRange(format!("ratio {rho} not in [0, 1]")));
    }
    Ok(StatResidual {
        ds: proj.w.iter().zip(&proj.b).map(|(w, b)| rho * w + b).collect(),
    })
}

/// Reference forward for a `[N, C, H, W]` map. `ds` holds one residual per
/// sample; when absent the running average is used. In training mode with
/// `ds` present, the running average takes one step toward the batch mean.
pub fn dain_forward(
    x: &Tensor<f64>,
    ds: Option<&[StatResidual]>,
    rr: &mut RunningResidual,
    est: &StatEstimator,
    gamma: &[f64],
    beta: &[f64],
    mode: Mode,
) -> Result<Tensor<f64>> {
    let [n, c, _, _] = x.shape();
    if est.channels() != c || gamma.len() != c || beta.len() != c || rr.ds_ra.len() != c {
        return Err(DarcError::ShapeMismatch(format!("dain_forward expects {c} channels")));
    }
    if let Some(ds) = ds {
        if ds.len() != n {
            return Err(DarcError::ShapeMismatch(format!(
                "{} residuals for a batch of {n}",
                ds.len()
            )));
        }
    }
    let running = rr.as_residual();
    let mut y = x.clone();
    let hw = x.plane();
    for s in 0..n {
        let r = ds.map_or(&running, |d| &d[s]);
        let st = reestimate(&instance_stats(x, s), r, est);
        for ch in 0..c {
            let start = x.index(s, ch, 0, 0);
            for v in &mut y.data_mut()[start..start + hw] {
                *v = (*v - st.mu[ch]) / st.delta[ch] * gamma[ch] + beta[ch];
            }
        }
    }
    if let (Some(ds), Mode::Train) = (ds, mode) {
        let mean: Vec<f64> = (0..c)
            .map(|ch| ds.iter().map(|d| d.ds[ch]).sum::<f64>() / n as f64)
            .collect();
        update_running(rr, &StatResidual { ds: mean }, mode)?;
    }
    Ok(y)
}

#[derive(Clone, Copy, Debug)]
pub struct MlpIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MlpIds {
    fn build<T: Scalar>(b: &mut Builder<T>, prefix: &str, c: usize) -> Self {
        let h = ESTIMATOR_HIDDEN;
        let bound = 1.0 / (ESTIMATOR_INPUTS as f64).sqrt();
        Self {
            w1: b.uniform(&format!("{prefix}.w1"), [1, c, h, ESTIMATOR_INPUTS], bound),
            b1: b.full(&format!("{prefix}.b1"), [1, c, h, 1], 0.0),
            w2: b.full(&format!("{prefix}.w2"), [1, c, h, 1], 0.0),
            b2: b.full(&format!("{prefix}.b2"), [1, c, 1, 1], 0.0),
        }
    }

    fn vars<T: Scalar>(&self, g: &mut Graph<T>) -> ChannelMlpVars {
        ChannelMlpVars {
            w1: g.param(self.w1),
            b1: g.param(self.b1),
            w2: g.param(self.w2),
            b2: g.param(self.b2),
        }
    }

    fn plain<T: Scalar>(&self, p: &ParamStore<T>) -> ChannelMlp {
        let f = |id| p.get(id).data().iter().map(|v: &T| v.as_f64()).collect::<Vec<_>>();
        ChannelMlp {
            channels: p.get(self.b2).shape()[1],
            hidden: ESTIMATOR_HIDDEN,
            w1: f(self.w1),
            b1: f(self.b1),
            w2: f(self.w2),
            b2: f(self.b2),
        }
    }
}

/// Tape-side DAIN layer: estimator and projection parameters plus the
/// `ds_ra` buffer. The affine scale and shift belong to the enclosing norm.
#[derive(Clone, Debug)]
pub struct DainLayer {
    pub channels: usize,
    pub alpha: f64,
    pub est_mu: MlpIds,
    pub est_delta: MlpIds,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ds_ra: ParamId,
}

/// Standard deviation of the freshly drawn projection weights.
pub const PROJ_INIT_STD: f64 = 0.1;

impl DainLayer {
    pub(crate) fn build<T: Scalar>(b: &mut Builder<T>, prefix: &str, c: usize, alpha: f64) -> Self {
        Self {
            channels: c,
            alpha,
            est_mu: MlpIds::build(b, &format!("{prefix}.est_mu"), c),
            est_delta: MlpIds::build(b, &format!("{prefix}.est_delta"), c),
            proj_w: b.normal(&format!("{prefix}.proj.w"), [1, c, 1, 1], PROJ_INIT_STD),
            proj_b: b.full(&format!("{prefix}.proj.b"), [1, c, 1, 1], 0.0),
            ds_ra: b.buffer(&format!("{prefix}.ds_ra"), [1, c, 1, 1], 0.0),
        }
    }

    /// `ds = rho * w + b` for per-sample ratios `rho: [N, 1, 1, 1]`.
    pub fn residual_var<T: Scalar>(&self, g: &mut Graph<T>, rho: Var) -> Var {
        let (w, b) = (g.param(self.proj_w), g.param(self.proj_b));
        let scaled = g.mul(rho, w);
        g.add(scaled, b)
    }

    /// Re-estimated `(mu', delta')`, each `[N, C, 1, 1]`.
    pub fn stats_var<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        residual: Residual,
        ctx: &mut ForwardCtx<T>,
    ) -> (Var, Var) {
        let n = g.shape(x)[0];
        let mu = g.mean(x, Pooling::Instance);
        let delta = g.std(x, Pooling::Instance, NORM_EPS);
        let ds = match residual {
            Residual::Running => {
                let ra = ctx.buffers.get(self.ds_ra);
                let rep: Vec<T> = (0..n).flat_map(|_| ra.data().iter().copied()).collect();
                g.constant(Tensor::from_vec([n, self.channels, 1, 1], rep))
            }
            Residual::Ratio(rho) => {
                let ds = self.residual_var(g, rho);
                if ctx.mode == Mode::Train {
                    let v = g.value(ds);
                    let mut mean = vec![T::zero(); self.channels];
                    for s in 0..n {
                        for (m, &d) in mean.iter_mut().zip(&v.data()[s * self.channels..]) {
                            *m += d;
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= T::of(n as f64));
                    let mut ra = ctx.buffers.get(self.ds_ra).clone();
                    ema_step(ra.data_mut(), &mean, self.alpha);
                    ctx.stage(self.ds_ra, ra);
                }
                ds
            }
        };
        let inputs = [mu, delta, ds];
        let pm = self.est_mu.vars(g);
        let m_mu = g.channel_mlp(&inputs, pm);
        let pd = self.est_delta.vars(g);
        let m_delta = g.channel_mlp(&inputs, pd);
        let mu2 = g.add(mu, m_mu);
        let scale = g.exp(m_delta);
        let delta2 = g.mul(delta, scale);
        (mu2, delta2)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        gamma: Var,
        beta: Var,
        residual: Residual,
        ctx: &mut ForwardCtx<T>,
    ) -> Var {
        let (mu, delta) = self.stats_var(g, x, residual, ctx);
        affine_normalize(g, x, mu, delta, gamma, beta)
    }

    pub fn estimator<T: Scalar>(&self, p: &ParamStore<T>) -> StatEstimator {
        StatEstimator {
            mu: self.est_mu.plain(p),
            delta: self.est_delta.plain(p),
        }
    }

    pub fn projection<T: Scalar>(&self, p: &ParamStore<T>) -> Projection {
        let f = |id| p.get(id).data().iter().map(|v: &T| v.as_f64()).collect();
        Projection {
            w: f(self.proj_w),
            b: f(self.proj_b),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_channel_stats() {
        let x = Tensor::full([1, 2, 3, 3], 0.5);
        let s = instance_stats(&x, 0);
        assert_eq!(s.mu, vec![0.5, 0.5]);
        assert!(s.delta.iter().all(|&d| (d - NORM_EPS.sqrt()).abs() < 1e-12));
    }

    #[test]
    fn symmetric_channel_stats() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![-1.0, 1.0, 1.0, -1.0]);
        let s = instance_stats(&x, 0);
        assert_eq!(s.mu, vec![0.0]);
        assert!((s.delta[0] - (1.0 + NORM_EPS).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ema_closed_form_examples() {
        let mut rr = RunningResidual::new(1, 0.1).unwrap();
        update_running(&mut rr, &StatResidual { ds: vec![1.0] }, Mode::Train).unwrap();
        assert!((rr.ds_ra()[0] - 0.1).abs() < 1e-15);
        let mut rr = RunningResidual::new(2, 1.0).unwrap();
        update_running(&mut rr, &StatResidual { ds: vec![0.3, -2.0] }, Mode::Train).unwrap();
        assert_eq!(rr.ds_ra(), &[0.3, -2.0]);
    }

    #[test]
    fn ema_frozen_in_eval() {
        let mut rr = RunningResidual::new(1, 0.1).unwrap();
        let r = update_running(&mut rr, &StatResidual { ds: vec![1.0] }, Mode::Eval);
        assert!(matches!(r, Err(DarcError::FrozenBuffer)));
        assert_eq!(rr.ds_ra(), &[0.0]);
    }

    #[test]
    fn bad_momentum_rejected() {
        assert!(RunningResidual::new(1, 0.0).is_err());
        assert!(RunningResidual::new(1, 1.5).is_err());
    }

    #[test]
    fn identity_estimator_passes_stats_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let est = StatEstimator::identity(3, &mut rng);
        let stats = FeatureStats {
            mu: vec![0.1, -2.0, 5.0],
            delta: vec![0.5, 1.0, 3.0],
        };
        let ds = StatResidual {
            ds: vec![4.0, -1.0, 0.2],
        };
        assert_eq!(reestimate(&stats, &ds, &est), stats);
    }

    #[test]
    fn projection_affine_identity() {
        let proj = Projection {
            w: vec![0.3, -1.2],
            b: vec![0.5, 0.25],
        };
        assert_eq!(residual_from_ratio(0.0, &proj).unwrap().ds, proj.b);
        let (r1, r2) = (0.2, 0.7);
        let a = residual_from_ratio(r1, &proj).unwrap().ds;
        let b = residual_from_ratio(r2, &proj).unwrap().ds;
        for c in 0..2 {
            let lhs = a[c] + b[c] - 2.0 * proj.b[c];
            assert!((lhs - proj.w[c] * (r1 + r2)).abs() < 1e-12);
        }
        assert!(residual_from_ratio(1.01, &proj).is_err());
        assert!(residual_from_ratio(-0.1, &proj).is_err());
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let est = StatEstimator::identity(2, &mut rng);
        let mut rr = RunningResidual::new(2, 0.1).unwrap();
        let x = Tensor::full([2, 2, 3, 3], 0.25);
        let y = dain_forward(&x, None, &mut rr, &est, &[1.0, 1.0], &[0.0, 0.0], Mode::Eval).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}

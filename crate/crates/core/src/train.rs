//! Losses, patch sampling, augmentation and the two-pass training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use darc_tensor::{Adam, Graph, Scalar, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dain::{StatResidual, DainLayer};
use crate::data::{ground_truth_ratio, labels_to_contour, Sample};
use crate::error::{io_err, DarcError, Result};
use crate::network::{Heads, Model};
use crate::norm::{commit_updates, ForwardCtx, Mode};
use crate::plane::{ImagePlane, InstanceLabelMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Random flips and transposition (all eight square symmetries).
    pub geometric: bool,
    /// Maximum relative per-channel gain and shift.
    pub jitter: f64,
    /// Probability of a Gaussian blur.
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            geometric: true,
            jitter: 0.1,
            blur_prob: 0.3,
            blur_sigma: [0.3, 1.0],
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: u64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub patch: usize,
    /// Weight of the ratio loss against the segmentation losses.
    pub lambda: f64,
    pub contour_thickness: usize,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            iterations: 40_000,
            lr_start: 1e-3,
            lr_end: 1e-5,
            patch: 224,
            lambda: 1.0,
            contour_thickness: 2,
            checkpoint_every: 5_000,
            log_every: 100,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DarcError::Config(m));
        if self.batch_size == 0 || self.patch == 0 {
            return bad("batch size and patch size must be positive".into());
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_end <= self.lr_start) {
            return bad("learning rates must satisfy 0 < lr_end <= lr_start".into());
        }
        if self.lambda < 0.0 {
            return bad("lambda must be non-negative".into());
        }
        Ok(())
    }
}

/// Cosine decay from `start` at iteration 0 to `end` at `total`.
pub fn learning_rate(iteration: u64, total: u64, start: f64, end: f64) -> f64 {
    if total == 0 {
        return start;
    }
    let t = (iteration.min(total) as f64) / total as f64;
    end + (start - end) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub seg_bce: f64,
    pub contour_bce: f64,
    pub rph_bce: f64,
    pub rph_mse: f64,
    pub total: f64,
}

fn bce(p: f64, t: f64) -> f64 {
    let q = p.clamp(darc_tensor::PROB_EPS, 1.0 - darc_tensor::PROB_EPS);
    -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
}

/// Ratio loss: cross-entropy between predicted and true ratio plus the mean
/// squared difference of the residuals they induce, averaged over layers
/// and channels. Returns `(bce, mse)`.
pub fn rph_loss(rho: f64, rho_g: f64, ds_pred: &[StatResidual], ds_gt: &[StatResidual]) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&rho_g) {
        return Err(DarcError::OutOfRange(format!("ground-truth ratio {rho_g} not in [0, 1]")));
    }
    if ds_pred.len() != ds_gt.len() {
        return Err(DarcError::ShapeMismatch("residual lists differ in length".into()));
    }
    let mut mse = 0.0;
    for (p, g) in ds_pred.iter().zip(ds_gt) {
        if p.ds.len() != g.ds.len() {
            return Err(DarcError::ShapeMismatch("residual channel counts differ".into()));
        }
        mse += p.ds.iter().zip(&g.ds).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.ds.len() as f64;
    }
    if !ds_pred.is_empty() {
        mse /= ds_pred.len() as f64;
    }
    Ok((bce(rho, rho_g), mse))
}

/// The ratio loss on the tape for per-sample predictions `rho_hat: [N, 1, 1, 1]`.
/// Targets `f(rho_g)` are held constant.
pub fn rph_loss_var<T: Scalar>(g: &mut Graph<T>, rho_hat: Var, rho_g: &[f64], layers: &[&DainLayer]) -> (Var, Var) {
    let n = rho_g.len();
    let target = Tensor::from_vec([n, 1, 1, 1], rho_g.iter().map(|&r| T::of(r)).collect());
    let bce = g.bce_prob(rho_hat, target.clone());
    let rg = g.constant(target);
    let mut mse: Option<Var> = None;
    for layer in layers {
        let pred = layer.residual_var(g, rho_hat);
        let gt = layer.residual_var(g, rg);
        let gt = g.detach(gt);
        let m = g.mse(pred, gt);
        mse = Some(match mse {
            Some(acc) => g.add(acc, m),
            None => m,
        });
    }
    let mse = match mse {
        Some(s) => g.scale(s, 1.0 / layers.len() as f64),
        None => g.constant(Tensor::scalar(T::zero())),
    };
    (bce, mse)
}

/// A training minibatch.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `[N, 3, P, P]`
    pub images: Tensor<T>,
    /// `[N, 1, P, P]` foreground targets.
    pub seg: Tensor<T>,
    /// `[N, 1, P, P]` contour targets.
    pub contour: Tensor<T>,
    pub rho_g: Vec<f64>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_samples(items: &[(ImagePlane, InstanceLabelMap)], thickness: usize) -> Self {
        let mask_tensor = |m: &[bool], h, w| {
            Tensor::from_vec([1, 1, h, w], m.iter().map(|&b| if b { T::one() } else { T::zero() }).collect())
        };
        let mut images = Vec::new();
        let mut seg = Vec::new();
        let mut contour = Vec::new();
        let mut rho_g = Vec::new();
        for (img, lab) in items {
            let (h, w) = (lab.height(), lab.width());
            images.push(img.to_tensor());
            seg.push(mask_tensor(&lab.foreground_mask(), h, w));
            contour.push(mask_tensor(&labels_to_contour(lab, thickness), h, w));
            rho_g.push(ground_truth_ratio(lab));
        }
        Self {
            images: Tensor::stack(&images),
            seg: Tensor::stack(&seg),
            contour: Tensor::stack(&contour),
            rho_g,
        }
    }

    pub fn len(&self) -> usize {
        self.rho_g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho_g.is_empty()
    }
}

/// Source pixel of output `(y, x)` under a flip/transpose combination.
fn dihedral_source(y: usize, x: usize, h: usize, w: usize, flip_h: bool, flip_v: bool, transpose: bool) -> (usize, usize) {
    // transpose first (output is w x h), then flips in output coordinates
    let (oh, ow) = if transpose { (w, h) } else { (h, w) };
    let y = if flip_v { oh - 1 - y } else { y };
    let x = if flip_h { ow - 1 - x } else { x };
    if transpose {
        (x, y)
    } else {
        (y, x)
    }
}

/// Applies the same flips and transposition to an image and its labels.
pub fn dihedral(
    img: &ImagePlane,
    labels: &InstanceLabelMap,
    flip_h: bool,
    flip_v: bool,
    transpose: bool,
) -> (ImagePlane, InstanceLabelMap) {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let (oh, ow) = if transpose { (w, h) } else { (h, w) };
    let mut data = vec![0f32; c * oh * ow];
    let mut lab = vec![0u32; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = dihedral_source(y, x, h, w, flip_h, flip_v, transpose);
            lab[y * ow + x] = labels.get(sy, sx);
            for ch in 0..c {
                data[ch * oh * ow + y * ow + x] = img.get(ch, sy, sx);
            }
        }
    }
    (
        ImagePlane::new(oh, ow, c, data).expect("permutation keeps range"),
        InstanceLabelMap::new(oh, ow, lab).expect("shape"),
    )
}

pub fn hflip(img: &ImagePlane, labels: &InstanceLabelMap) -> (ImagePlane, InstanceLabelMap) {
    dihedral(img, labels, true, false, false)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (2.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with edge clamping; the result stays in `[0, 1]`.
pub fn gaussian_blur(img: &ImagePlane, sigma: f64) -> ImagePlane {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut out = Vec::with_capacity(img.data().len());
    for ch in 0..c {
        let src = img.channel(ch);
        let mut tmp = vec![0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    s += kv * src[y * w + xx] as f64;
                }
                tmp[y * w + x] = s;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    s += kv * tmp[yy * w + x];
                }
                out.push((s as f32).clamp(0.0, 1.0));
            }
        }
    }
    ImagePlane::new(h, w, c, out).expect("blur keeps range")
}

/// Per-channel gain and offset, clamped to `[0, 1]`.
pub fn color_jitter(img: &ImagePlane, gains: &[f64], offsets: &[f64]) -> ImagePlane {
    let hw = img.pixels();
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| ((v as f64 * gains[i / hw] + offsets[i / hw]) as f32).clamp(0.0, 1.0))
        .collect();
    ImagePlane::new(img.height(), img.width(), img.channels(), data).expect("clamped")
}

pub fn augment(
    img: &ImagePlane,
    labels: &InstanceLabelMap,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (ImagePlane, InstanceLabelMap) {
    if !cfg.enabled {
        return (img.clone(), labels.clone());
    }
    let (mut img, labels) = if cfg.geometric {
        let (fh, fv, tr) = (rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5));
        dihedral(img, labels, fh, fv, tr)
    } else {
        (img.clone(), labels.clone())
    };
    if cfg.jitter > 0.0 {
        let j = cfg.jitter;
        let gains: Vec<f64> = (0..img.channels()).map(|_| rng.random_range(1.0 - j..=1.0 + j)).collect();
        let offsets: Vec<f64> = (0..img.channels()).map(|_| rng.random_range(-j / 2.0..=j / 2.0)).collect();
        img = color_jitter(&img, &gains, &offsets);
    }
    if cfg.blur_prob > 0.0 && rng.random_bool(cfg.blur_prob.min(1.0)) {
        let sigma = rng.random_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]);
        img = gaussian_blur(&img, sigma);
    }
    (img, labels)
}

/// Random crops (with augmentation) from uniformly drawn samples.
pub fn sample_batch<T: Scalar>(samples: &[Sample], cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Batch<T>> {
    if samples.is_empty() {
        return Err(DarcError::Config("no training samples".into()));
    }
    let p = cfg.patch;
    let mut items = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let s = &samples[rng.random_range(0..samples.len())];
        let (h, w) = (s.image.height(), s.image.width());
        if h < p || w < p {
            return Err(DarcError::Config(format!(
                "sample {}/{} ({h}x{w}) is smaller than the {p}px patch",
                s.domain, s.id
            )));
        }
        let (y0, x0) = (rng.random_range(0..=h - p), rng.random_range(0..=w - p));
        let img = s.image.crop(y0, x0, p, p);
        let lab = s.labels.crop(y0, x0, p, p);
        items.push(augment(&img, &lab, &cfg.augment, rng));
    }
    Ok(Batch::from_samples(&items, cfg.contour_thickness))
}

/// Every loss term as a node on the tape.
pub struct LossVars {
    pub seg_bce: Var,
    pub contour_bce: Var,
    pub rph_bce: Option<Var>,
    pub rph_mse: Option<Var>,
    pub total: Var,
    pub heads: Heads,
    pub rho_hat: Option<Var>,
}

/// Builds the full training objective: re-coloring, pass 1 for the ratio,
/// pass 2 conditioned on the true ratio, then all losses.
pub fn loss_graph<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<T>,
    batch: &Batch<T>,
    ctx: &mut ForwardCtx<T>,
    lambda: f64,
) -> LossVars {
    let xo = model.recolor_var(g, &batch.images);
    let rho_hat = model.pass1(g, xo, ctx);
    let rho_g = rho_hat.map(|_| {
        let t = Tensor::from_vec([batch.len(), 1, 1, 1], batch.rho_g.iter().map(|&r| T::of(r)).collect());
        g.constant(t)
    });
    let heads = model.pass2(g, xo, rho_g, ctx);
    let seg_bce = g.bce_with_logits(heads.seg, batch.seg.clone());
    let contour_bce = g.bce_with_logits(heads.contour, batch.contour.clone());
    let mut total = g.add(seg_bce, contour_bce);
    let (mut rph_bce, mut rph_mse) = (None, None);
    if let Some(rh) = rho_hat {
        let layers = model.dain_layers();
        let (b, m) = rph_loss_var(g, rh, &batch.rho_g, &layers);
        let r = g.add(b, m);
        let r = g.scale(r, lambda);
        total = g.add(total, r);
        rph_bce = Some(b);
        rph_mse = Some(m);
    }
    LossVars {
        seg_bce,
        contour_bce,
        rph_bce,
        rph_mse,
        total,
        heads,
        rho_hat,
    }
}

/// Owns the model, optimizer and sampling state of one training run.
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub config: TrainConfig,
    optimizer: Adam<T>,
    iteration: u64,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let min = model.config.min_side();
        if config.patch % min != 0 {
            return Err(DarcError::Config(format!(
                "patch {} is not a multiple of {min}",
                config.patch
            )));
        }
        Ok(Self {
            optimizer: Adam::new(&model.params),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn learning_rate(&self) -> f64 {
        let c = &self.config;
        learning_rate(self.iteration, c.iterations, c.lr_start, c.lr_end)
    }

    /// One optimizer step on `batch`; buffer updates are committed after it.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<LossBreakdown> {
        let lr = self.learning_rate();
        let model = &self.model;
        let mut g = Graph::new(&model.params);
        let mut ctx = ForwardCtx::new(Mode::Train, &model.buffers);
        let vars = loss_graph(model, &mut g, batch, &mut ctx, self.config.lambda);
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0].as_f64());
        let losses = LossBreakdown {
            seg_bce: val(Some(vars.seg_bce)),
            contour_bce: val(Some(vars.contour_bce)),
            rph_bce: val(vars.rph_bce),
            rph_mse: val(vars.rph_mse),
            total: val(Some(vars.total)),
        };
        if !losses.total.is_finite() {
            return Err(DarcError::NonFiniteLoss {
                iteration: self.iteration,
                detail: format!("{losses:?}"),
            });
        }
        let grads = g.backward(vars.total);
        let updates = ctx.into_updates();
        drop(g);
        self.optimizer.step(&mut self.model.params, &grads, lr);
        commit_updates(&mut self.model.buffers, updates);
        self.iteration += 1;
        Ok(losses)
    }

    pub fn sample_batch(&mut self, samples: &[Sample]) -> Result<Batch<T>> {
        sample_batch(samples, &self.config, &mut self.rng)
    }
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
}

pub const LOSS_LOG_HEADER: &str = "iteration,seg_bce,contour_bce,rph_bce,rph_mse,lr";

/// Runs the configured number of iterations, logging every step to CSV and
/// checkpointing periodically and at the end.
pub fn run_training<T: Scalar>(trainer: &mut Trainer<T>, samples: &[Sample], outputs: &TrainOutputs) -> Result<()> {
    let mut log = match &outputs.loss_log {
        Some(p) => {
            let f = File::create(p).map_err(io_err(p))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{LOSS_LOG_HEADER}").map_err(io_err(p))?;
            Some((w, p.clone()))
        }
        None => None,
    };
    let total = trainer.config.iterations;
    while trainer.iteration() < total {
        let it = trainer.iteration();
        let lr = trainer.learning_rate();
        let batch = trainer.sample_batch(samples)?;
        let l = trainer.train_step(&batch)?;
        if let Some((w, p)) = log.as_mut() {
            writeln!(
                w,
                "{it},{},{},{},{},{}",
                l.seg_bce, l.contour_bce, l.rph_bce, l.rph_mse, lr
            )
            .map_err(io_err(p.as_path()))?;
        }
        let every = trainer.config.log_every;
        if every > 0 && (it % every == 0 || it + 1 == total) {
            log::info!(
                "iter {it}: seg {:.4} contour {:.4} rph {:.4}/{:.4} lr {lr:.2e}",
                l.seg_bce,
                l.contour_bce,
                l.rph_bce,
                l.rph_mse
            );
        }
        let ck = trainer.config.checkpoint_every;
        if let Some(path) = &outputs.checkpoint {
            if ck > 0 && trainer.iteration() % ck == 0 && trainer.iteration() < total {
                checkpoint::save(path, &trainer.model, trainer.iteration())?;
            }
        }
    }
    if let Some((mut w, p)) = log {
        w.flush().map_err(io_err(p.as_path()))?;
    }
    if let Some(path) = &outputs.checkpoint {
        checkpoint::save(path, &trainer.model, trainer.iteration())?;
    }
    Ok(())
}

//! Residual U-Net with segmentation and contour outputs, plus the optional
//! color module and ratio-prediction head of the distribution-aware variants.

use darc_tensor::{Graph, ParamId, ParamStore, Pooling, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dain::{DainLayer, DEFAULT_ALPHA};
use crate::error::{DarcError, Result};
use crate::init::Builder;
use crate::norm::{ForwardCtx, Mode, Norm, NormKind, Residual};
use crate::plane::ImagePlane;
use crate::recolor::{grayscale_tensor, sort_match_var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    BaselineBn,
    BaselineIn,
    DarcAll,
    DarcEnc,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::BaselineBn,
        Variant::BaselineIn,
        Variant::DarcAll,
        Variant::DarcEnc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::BaselineBn => "baseline-bn",
            Variant::BaselineIn => "baseline-in",
            Variant::DarcAll => "darc-all",
            Variant::DarcEnc => "darc-enc",
        }
    }

    pub fn encoder_norm(self) -> NormKind {
        match self {
            Variant::BaselineBn => NormKind::Batch,
            Variant::BaselineIn => NormKind::Instance,
            Variant::DarcAll | Variant::DarcEnc => NormKind::Dain,
        }
    }

    pub fn decoder_norm(self) -> NormKind {
        match self {
            Variant::BaselineBn | Variant::DarcEnc => NormKind::Batch,
            Variant::BaselineIn => NormKind::Instance,
            Variant::DarcAll => NormKind::Dain,
        }
    }

    /// Has the color module, ratio head and two-pass forward.
    pub fn is_darc(self) -> bool {
        matches!(self, Variant::DarcAll | Variant::DarcEnc)
    }
}

impl std::str::FromStr for Variant {
    type Err = DarcError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| DarcError::Config(format!("unknown variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Base width at which the instance-norm baseline has about five million parameters.
pub const REFERENCE_WIDTH: usize = 25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Channels of the first stage; stage `s` has `width * 2^s`.
    pub width: usize,
    /// Number of down-sampling stages.
    pub depth: usize,
    pub recolor_width: usize,
    pub rph_hidden: usize,
    /// Momentum of the running residual.
    pub alpha: f64,
    pub tau_seg: f64,
    pub tau_cnt: f64,
    pub min_area: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::DarcEnc,
            width: REFERENCE_WIDTH,
            depth: 4,
            recolor_width: 16,
            rph_hidden: 64,
            alpha: DEFAULT_ALPHA,
            tau_seg: 0.5,
            tau_cnt: 0.5,
            min_area: 10,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DarcError::Config(m));
        if self.width == 0 || self.recolor_width == 0 || self.rph_hidden == 0 {
            return bad("widths must be positive".into());
        }
        if !(1..=8).contains(&self.depth) {
            return bad(format!("depth {} not in 1..=8", self.depth));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha {} not in (0, 1]", self.alpha));
        }
        for (k, v) in [("tau_seg", self.tau_seg), ("tau_cnt", self.tau_cnt)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{k} {v} not in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Smallest accepted image side, and the multiple inputs are padded to.
    pub fn min_side(&self) -> usize {
        1 << self.depth
    }

    pub fn stage_width(&self, s: usize) -> usize {
        self.width << s
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: Option<ParamId>,
}

impl Conv {
    fn build<T: Scalar>(b: &mut Builder<T>, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> Self {
        Self {
            w: b.conv(&format!("{name}.w"), cin, cout, k),
            b: bias.then(|| b.full(&format!("{name}.b"), [1, cout, 1, 1], 0.0)),
        }
    }

    fn zeros<T: Scalar>(b: &mut Builder<T>, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            w: b.full(&format!("{name}.w"), [cout, cin, 1, 1], 0.0),
            b: Some(b.full(&format!("{name}.b"), [1, cout, 1, 1], 0.0)),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.conv2d(x, w, b)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
    skip: Option<Conv>,
}

impl ResBlock {
    fn build<T: Scalar>(b: &mut Builder<T>, name: &str, cin: usize, cout: usize, norm: NormKind, alpha: f64) -> Self {
        Self {
            conv1: Conv::build(b, &format!("{name}.conv1"), cin, cout, 3, false),
            norm1: Norm::build(b, &format!("{name}.norm1"), cout, norm, alpha),
            conv2: Conv::build(b, &format!("{name}.conv2"), cout, cout, 3, false),
            norm2: Norm::build(b, &format!("{name}.norm2"), cout, norm, alpha),
            skip: (cin != cout).then(|| Conv::build(b, &format!("{name}.skip"), cin, cout, 1, false)),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, r: Residual, ctx: &mut ForwardCtx<T>) -> Var {
        let h = self.conv1.forward(g, x);
        let h = self.norm1.forward(g, h, r, ctx);
        let h = g.relu(h);
        let h = self.conv2.forward(g, h);
        let h = self.norm2.forward(g, h, r, ctx);
        let s = match &self.skip {
            Some(c) => c.forward(g, x),
            None => x,
        };
        let sum = g.add(h, s);
        g.relu(sum)
    }

    fn norms(&self) -> [&Norm; 2] {
        [&self.norm1, &self.norm2]
    }
}

/// Grayscale-to-color module: one 3x3 convolution, one residual block, then
/// a 1x1 convolution to three channels and a sigmoid.
#[derive(Clone, Debug)]
pub struct RecolorNet {
    conv_in: Conv,
    res1: Conv,
    res2: Conv,
    conv_out: Conv,
}

impl RecolorNet {
    fn build<T: Scalar>(b: &mut Builder<T>, width: usize) -> Self {
        Self {
            conv_in: Conv::build(b, "recolor.conv_in", 1, width, 3, true),
            res1: Conv::build(b, "recolor.res.conv1", width, width, 3, true),
            res2: Conv::build(b, "recolor.res.conv2", width, width, 3, true),
            conv_out: Conv::build(b, "recolor.conv_out", width, 3, 1, true),
        }
    }

    /// `[N, 1, H, W]` in, `[N, 3, H, W]` in `(0, 1)` out.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, gray: Var) -> Var {
        let h = self.conv_in.forward(g, gray);
        let h = g.relu(h);
        let r = self.res1.forward(g, h);
        let r = g.relu(r);
        let r = self.res2.forward(g, r);
        let s = g.add(h, r);
        let h = g.relu(s);
        let o = self.conv_out.forward(g, h);
        g.sigmoid(o)
    }
}

/// Global average pooling, one hidden layer, sigmoid.
#[derive(Clone, Debug)]
struct RatioHead {
    fc1: Conv,
    fc2: Conv,
}

impl RatioHead {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, bottleneck: Var) -> Var {
        let p = g.mean(bottleneck, Pooling::Instance);
        let h = self.fc1.forward(g, p);
        let h = g.relu(h);
        let o = self.fc2.forward(g, h);
        g.sigmoid(o)
    }
}

/// Per-pixel probabilities at input resolution and the predicted ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMaps {
    pub height: usize,
    pub width: usize,
    pub seg: Vec<f32>,
    pub contour: Vec<f32>,
    /// Only the two-pass variants predict a ratio.
    pub rho: Option<f64>,
}

impl PredictionMaps {
    /// Sigmoid of `[N, 1, H, W]` segmentation and contour logits for sample `n`.
    pub fn from_logits<T: Scalar>(seg: &Tensor<T>, contour: &Tensor<T>, n: usize, rho: Option<f64>) -> Self {
        let [_, _, h, w] = seg.shape();
        assert_eq!(seg.shape(), contour.shape(), "head shapes");
        let plane = |t: &Tensor<T>| {
            let start = t.index(n, 0, 0, 0);
            t.data()[start..start + h * w]
                .iter()
                .map(|&v| darc_tensor::kernels::sigmoid(v).as_f64() as f32)
                .collect()
        };
        Self {
            height: h,
            width: w,
            seg: plane(seg),
            contour: plane(contour),
            rho,
        }
    }
}

pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
    recolor: Option<RecolorNet>,
    encoder: Vec<ResBlock>,
    decoder: Vec<ResBlock>,
    seg_head: Conv,
    cnt_head: Conv,
    rph: Option<RatioHead>,
}

/// `[N, 1, H, W]` logits of the two output heads.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub seg: Var,
    pub contour: Var,
}

/// Outputs of one forward through the graph.
pub struct ForwardOut {
    pub heads: Heads,
    /// Predicted ratio `[N, 1, 1, 1]` from the first pass, if any.
    pub rho_hat: Option<Var>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder {
            params: &mut params,
            buffers: &mut buffers,
            rng: &mut rng,
        };
        let v = config.variant;
        let recolor = v.is_darc().then(|| RecolorNet::build(&mut b, config.recolor_width));
        let mut encoder = Vec::new();
        for s in 0..=config.depth {
            let cin = if s == 0 { 3 } else { config.stage_width(s - 1) };
            encoder.push(ResBlock::build(
                &mut b,
                &format!("enc{s}"),
                cin,
                config.stage_width(s),
                v.encoder_norm(),
                config.alpha,
            ));
        }
        let mut decoder = Vec::new();
        for l in (0..config.depth).rev() {
            let (c, up) = (config.stage_width(l), config.stage_width(l + 1));
            decoder.push(ResBlock::build(
                &mut b,
                &format!("dec{l}"),
                c + up,
                c,
                v.decoder_norm(),
                config.alpha,
            ));
        }
        let seg_head = Conv::zeros(&mut b, "head.seg", config.width, 1);
        let cnt_head = Conv::zeros(&mut b, "head.cnt", config.width, 1);
        let rph = v.is_darc().then(|| RatioHead {
            fc1: Conv::build(&mut b, "rph.fc1", config.stage_width(config.depth), config.rph_hidden, 1, true),
            fc2: Conv::zeros(&mut b, "rph.fc2", config.rph_hidden, 1),
        });
        Ok(Self {
            config,
            params,
            buffers,
            recolor,
            encoder,
            decoder,
            seg_head,
            cnt_head,
            rph,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn recolor_net(&self) -> Option<&RecolorNet> {
        self.recolor.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Parameters that exist only in the distribution-aware variants: color
    /// module, estimators, projections and ratio head.
    pub fn darc_param_count(&self) -> usize {
        self.params.numel_where(is_darc_param)
    }

    pub fn dain_layers(&self) -> Vec<&DainLayer> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|b| b.norms())
            .filter_map(|n| n.dain())
            .collect()
    }

    /// DAIN layers of the encoder only, which are the ones pass 1 uses.
    pub fn encoder_dain_layers(&self) -> Vec<&DainLayer> {
        self.encoder
            .iter()
            .flat_map(|b| b.norms())
            .filter_map(|n| n.dain())
            .collect()
    }

    /// Copies every parameter and buffer whose name and shape match.
    pub fn copy_matching(&mut self, other: &Model<T>) -> usize {
        copy_store(&mut self.params, &other.params) + copy_store(&mut self.buffers, &other.buffers)
    }

    /// Encoder features from finest to coarsest; the last is the bottleneck.
    pub fn encode(&self, g: &mut Graph<T>, x: Var, r: Residual, ctx: &mut ForwardCtx<T>) -> Vec<Var> {
        let mut feats: Vec<Var> = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            let input = match feats.last() {
                Some(&prev) => g.maxpool2(prev),
                None => x,
            };
            feats.push(block.forward(g, input, r, ctx));
        }
        feats
    }

    /// Decodes encoder features into head logits.
    pub fn decode(&self, g: &mut Graph<T>, feats: &[Var], r: Residual, ctx: &mut ForwardCtx<T>) -> Heads {
        let mut h = *feats.last().expect("encoder output");
        for (block, &skip) in self.decoder.iter().zip(feats.iter().rev().skip(1)) {
            let up = g.upsample2(h);
            let cat = g.concat(&[skip, up]);
            h = block.forward(g, cat, r, ctx);
        }
        Heads {
            seg: self.seg_head.forward(g, h),
            contour: self.cnt_head.forward(g, h),
        }
    }

    /// The re-colored input on the tape, or a constant copy for baselines.
    pub fn recolor_var(&self, g: &mut Graph<T>, x: &Tensor<T>) -> Var {
        match &self.recolor {
            Some(net) => {
                let gray = g.constant(grayscale_tensor(x));
                let r = net.forward(g, gray);
                sort_match_var(g, x, r)
            }
            None => g.constant(x.clone()),
        }
    }

    /// First pass: encoder with the running residual, then the ratio head.
    pub fn pass1(&self, g: &mut Graph<T>, xo: Var, ctx: &mut ForwardCtx<T>) -> Option<Var> {
        let rph = self.rph.as_ref()?;
        let feats = self.encode(g, xo, Residual::Running, ctx);
        Some(rph.forward(g, *feats.last().expect("bottleneck")))
    }

    /// Second pass conditioned on per-sample ratios `[N, 1, 1, 1]`.
    pub fn pass2(&self, g: &mut Graph<T>, xo: Var, rho: Option<Var>, ctx: &mut ForwardCtx<T>) -> Heads {
        let r = rho.map_or(Residual::Running, Residual::Ratio);
        let feats = self.encode(g, xo, r, ctx);
        self.decode(g, &feats, r, ctx)
    }

    /// Inference route: re-color, predict the ratio, then segment with it.
    pub fn forward(&self, g: &mut Graph<T>, x: &Tensor<T>, ctx: &mut ForwardCtx<T>) -> ForwardOut {
        let xo = self.recolor_var(g, x);
        let rho_hat = self.pass1(g, xo, ctx);
        let heads = self.pass2(g, xo, rho_hat, ctx);
        ForwardOut { heads, rho_hat }
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let min = self.config.min_side();
        if height < min || width < min {
            return Err(DarcError::ImageTooSmall { height, width, min });
        }
        Ok(())
    }

    /// Ratio predicted from an already re-colored image.
    pub fn forward_pass1(&self, xo: &ImagePlane) -> Result<Option<f64>> {
        self.check_input(xo.height(), xo.width())?;
        let mut g = Graph::inference(&self.params);
        let mut ctx = ForwardCtx::new(Mode::Eval, &self.buffers);
        let x = g.constant(xo.to_tensor());
        Ok(self.pass1(&mut g, x, &mut ctx).map(|r| g.value(r).data()[0].as_f64()))
    }

    /// Maps from an already re-colored image, conditioned on `rho`.
    pub fn forward_pass2(&self, xo: &ImagePlane, rho: f64) -> Result<PredictionMaps> {
        self.check_input(xo.height(), xo.width())?;
        if !(0.0..=1.0).contains(&rho) {
            return Err(DarcError::OutOfRange(format!("ratio {rho} not in [0, 1]")));
        }
        let mut g = Graph::inference(&self.params);
        let mut ctx = ForwardCtx::new(Mode::Eval, &self.buffers);
        let x = g.constant(xo.to_tensor());
        let r = self.rph.as_ref().map(|_| g.constant(Tensor::scalar(T::of(rho))));
        let heads = self.pass2(&mut g, x, r, &mut ctx);
        Ok(PredictionMaps::from_logits(
            g.value(heads.seg),
            g.value(heads.contour),
            0,
            r.map(|_| rho),
        ))
    }

    /// Same weights and buffers in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
            recolor: self.recolor.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            seg_head: self.seg_head.clone(),
            cnt_head: self.cnt_head.clone(),
            rph: self.rph.clone(),
        }
    }
}

pub fn is_darc_param(name: &str) -> bool {
    name.starts_with("recolor.") || name.starts_with("rph.") || name.contains(".est_") || name.contains(".proj.")
}

fn copy_store<T: Scalar>(dst: &mut ParamStore<T>, src: &ParamStore<T>) -> usize {
    let mut n = 0;
    for (_, name, t) in src.iter() {
        if let Some(id) = dst.id(name) {
            if dst.get(id).shape() == t.shape() {
                *dst.get_mut(id) = t.clone();
                n += 1;
            }
        }
    }
    n
}

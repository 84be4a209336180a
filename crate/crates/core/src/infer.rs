//! Two-pass inference with sliding windows, and instance extraction from the
//! segmentation and contour maps.

use std::collections::VecDeque;

use darc_tensor::{Graph, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::Result;
use crate::metrics::ScoreRecord;
use crate::network::{Model, PredictionMaps};
use crate::norm::{ForwardCtx, Mode};
use crate::plane::{label_components, neighbors4, ImagePlane, InstanceLabelMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub window: usize,
    pub stride: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            window: 224,
            stride: 112,
        }
    }
}

impl InferConfig {
    /// Whole-image inference regardless of size.
    pub fn whole_image() -> Self {
        Self {
            window: usize::MAX,
            stride: usize::MAX,
        }
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Reflect-pads `[1, C, H, W]` at the bottom and right to `ph x pw`.
fn pad_reflect<T: Scalar>(x: &Tensor<T>, ph: usize, pw: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    if (ph, pw) == (h, w) {
        return x.clone();
    }
    Tensor::from_fn([n, c, ph, pw], |i| {
        let (s, rem) = (i / (c * ph * pw), i % (c * ph * pw));
        let (ch, rem) = (rem / (ph * pw), rem % (ph * pw));
        let (y, xx) = (rem / pw, rem % pw);
        x.at(s, ch, reflect(y as isize, h), reflect(xx as isize, w))
    })
}

fn crop<T: Scalar>(x: &Tensor<T>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<T> {
    let [n, c, _, _] = x.shape();
    Tensor::from_fn([n, c, h, w], |i| {
        let (s, rem) = (i / (c * h * w), i % (c * h * w));
        let (ch, rem) = (rem / (h * w), rem % (h * w));
        x.at(s, ch, y0 + rem / w, x0 + rem % w)
    })
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Window origins along one axis covering `0..len`.
pub fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if len <= window {
        return vec![0];
    }
    let mut s: Vec<usize> = (0..).map(|k| k * stride).take_while(|&p| p + window < len).collect();
    s.push(len - window);
    s.dedup();
    s
}

/// Segmentation and contour logits plus the predicted ratio for one window
/// of an already re-colored image.
fn window_logits<T: Scalar>(model: &Model<T>, xo: Tensor<T>) -> (Tensor<T>, Tensor<T>, Option<f64>) {
    let mut g = Graph::inference(&model.params);
    let mut ctx = ForwardCtx::new(Mode::Eval, &model.buffers);
    let x = g.constant(xo);
    let rho = model.pass1(&mut g, x, &mut ctx);
    let heads = model.pass2(&mut g, x, rho, &mut ctx);
    let r = rho.map(|r| g.value(r).data()[0].as_f64());
    (g.value(heads.seg).clone(), g.value(heads.contour).clone(), r)
}

/// Re-color the whole image, then run both passes per window, averaging the
/// logits where windows overlap. The reported ratio is the window mean.
pub fn two_pass_infer<T: Scalar>(model: &Model<T>, img: &ImagePlane, cfg: &InferConfig) -> Result<PredictionMaps> {
    let (h, w) = (img.height(), img.width());
    model.check_input(h, w)?;
    let m = model.config.min_side();
    let xo = {
        let mut g = Graph::inference(&model.params);
        let v = model.recolor_var(&mut g, &img.to_tensor::<T>());
        g.value(v).clone()
    };
    let (ph, pw) = (round_up(h, m), round_up(w, m));
    let padded = pad_reflect(&xo, ph, pw);
    let win = |len: usize| {
        let wdw = cfg.window.max(m) / m * m;
        let stride = cfg.stride.clamp(1, wdw);
        (wdw.min(len), stride)
    };
    let (wh, sh) = win(ph);
    let (ww, sw) = win(pw);
    let mut seg = vec![0f64; ph * pw];
    let mut cnt = vec![0f64; ph * pw];
    let mut hits = vec![0u32; ph * pw];
    let mut rhos = Vec::new();
    for &y0 in &window_starts(ph, wh, sh) {
        for &x0 in &window_starts(pw, ww, sw) {
            let (s, c, r) = window_logits(model, crop(&padded, y0, x0, wh, ww));
            rhos.extend(r);
            for y in 0..wh {
                for x in 0..ww {
                    let p = (y0 + y) * pw + x0 + x;
                    seg[p] += s.data()[y * ww + x].as_f64();
                    cnt[p] += c.data()[y * ww + x].as_f64();
                    hits[p] += 1;
                }
            }
        }
    }
    let mut seg_out = Vec::with_capacity(h * w);
    let mut cnt_out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let p = y * pw + x;
            let k = hits[p] as f64;
            seg_out.push(darc_tensor::kernels::sigmoid(seg[p] / k) as f32);
            cnt_out.push(darc_tensor::kernels::sigmoid(cnt[p] / k) as f32);
        }
    }
    let rho = (!rhos.is_empty()).then(|| rhos.iter().sum::<f64>() / rhos.len() as f64);
    Ok(PredictionMaps {
        height: h,
        width: w,
        seg: seg_out,
        contour: cnt_out,
        rho,
    })
}

/// Markers are confident foreground away from contours; each marker grows
/// back over the thresholded foreground by breadth-first (geodesic nearest)
/// assignment. Foreground components that hold no marker become instances of
/// their own, foreground components smaller than `min_area` are dropped, and
/// instances smaller than `min_area` are merged into the neighbour they
/// share the longest border with.
pub fn extract_instances(maps: &PredictionMaps, tau_seg: f64, tau_cnt: f64, min_area: usize) -> InstanceLabelMap {
    let (h, w) = (maps.height, maps.width);
    let fg: Vec<bool> = maps.seg.iter().map(|&s| s as f64 > tau_seg).collect();

    // drop small foreground components first so the kept foreground is
    // monotone in the threshold
    let (fg_comp, nfg) = label_components(h, w, &fg);
    let mut fg_area = vec![0usize; nfg as usize + 1];
    fg_comp.iter().for_each(|&c| fg_area[c as usize] += 1);
    let keep: Vec<bool> = fg_comp
        .iter()
        .map(|&c| c > 0 && fg_area[c as usize] >= min_area)
        .collect();

    let marker: Vec<bool> = (0..h * w)
        .map(|p| keep[p] && maps.contour[p] as f64 <= tau_cnt)
        .collect();
    let (mut labels, mut next) = label_components(h, w, &marker);

    let mut queue: VecDeque<usize> = (0..h * w).filter(|&p| labels[p] > 0).collect();
    let grow = |labels: &mut Vec<u32>, queue: &mut VecDeque<usize>| {
        while let Some(p) = queue.pop_front() {
            for q in neighbors4(p / w, p % w, h, w) {
                if keep[q] && labels[q] == 0 {
                    labels[q] = labels[p];
                    queue.push_back(q);
                }
            }
        }
    };
    grow(&mut labels, &mut queue);
    for p in 0..h * w {
        if keep[p] && labels[p] == 0 {
            next += 1;
            labels[p] = next;
            queue.push_back(p);
            grow(&mut labels, &mut queue);
        }
    }

    merge_small(&mut labels, next, h, w, min_area);
    InstanceLabelMap::new(h, w, labels).expect("shape").relabeled()
}

fn merge_small(labels: &mut [u32], count: u32, h: usize, w: usize, min_area: usize) {
    let mut area = vec![0usize; count as usize + 1];
    labels.iter().for_each(|&l| area[l as usize] += 1);
    let mut order: Vec<u32> = (1..=count).filter(|&k| area[k as usize] > 0).collect();
    order.sort_by_key(|&k| (area[k as usize], k));
    for k in order {
        if area[k as usize] == 0 || area[k as usize] >= min_area {
            continue;
        }
        let mut border: std::collections::BTreeMap<u32, usize> = Default::default();
        for p in 0..h * w {
            if labels[p] != k {
                continue;
            }
            for q in neighbors4(p / w, p % w, h, w) {
                let l = labels[q];
                if l != 0 && l != k {
                    *border.entry(l).or_default() += 1;
                }
            }
        }
        let Some((&target, _)) = border.iter().max_by_key(|&(&l, &n)| (n, std::cmp::Reverse(l))) else {
            continue;
        };
        for l in labels.iter_mut().filter(|l| **l == k) {
            *l = target;
        }
        area[target as usize] += area[k as usize];
        area[k as usize] = 0;
    }
}

/// Per-image scores of a model over labeled samples.
pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[Sample], cfg: &InferConfig) -> Result<Vec<ScoreRecord>> {
    let c = &model.config;
    samples
        .iter()
        .map(|s| {
            let maps = two_pass_infer(model, &s.image, cfg)?;
            let pred = extract_instances(&maps, c.tau_seg, c.tau_cnt, c.min_area);
            ScoreRecord::score(&s.domain, &s.id, &pred, &s.labels)
        })
        .collect()
}

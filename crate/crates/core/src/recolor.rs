//! Re-coloring: a grayscale image is mapped to a synthetic color image by a
//! small learned module, and the result is sort-matched back onto the rank
//! structure of the original so fine texture survives while the value
//! distribution comes from the learned colors.

use darc_tensor::{Graph, Scalar, Tensor, Var};

use crate::error::{DarcError, Result};
use crate::network::Model;
use crate::plane::ImagePlane;

/// ITU-R BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

pub fn to_grayscale(img: &ImagePlane) -> Result<ImagePlane> {
    if img.channels() != 3 {
        return Err(DarcError::InvalidImage(format!(
            "grayscale conversion needs 3 channels, got {}",
            img.channels()
        )));
    }
    let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
    let data = (0..img.pixels())
        .map(|p| {
            let y = LUMA_WEIGHTS[0] * r[p] as f64
                + LUMA_WEIGHTS[1] * g[p] as f64
                + LUMA_WEIGHTS[2] * b[p] as f64;
            (y as f32).clamp(0.0, 1.0)
        })
        .collect();
    ImagePlane::new(img.height(), img.width(), 1, data)
}

/// Stable argsort: indices ordered by value, ties by position.
pub fn argsort<V: Copy>(values: &[V], cmp: impl Fn(&V, &V) -> std::cmp::Ordering) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..values.len() as u32).collect();
    idx.sort_by(|&a, &b| cmp(&values[a as usize], &values[b as usize]));
    idx
}

/// Per-channel rank of each pixel among its channel's values, i.e. the
/// double argsort of the flattened channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankMap {
    pixels: usize,
    ranks: Vec<Vec<u32>>,
}

impl RankMap {
    pub fn of(img: &ImagePlane) -> Self {
        let ranks = (0..img.channels())
            .map(|c| ranks_of(img.channel(c)))
            .collect();
        Self {
            pixels: img.pixels(),
            ranks,
        }
    }

    pub fn channel(&self, c: usize) -> &[u32] {
        &self.ranks[c]
    }

    pub fn channels(&self) -> usize {
        self.ranks.len()
    }

    /// Every channel is a permutation of `0..H*W`.
    pub fn is_valid(&self) -> bool {
        self.ranks.iter().all(|r| {
            let mut seen = vec![false; self.pixels];
            r.len() == self.pixels
                && r.iter().all(|&k| {
                    let k = k as usize;
                    k < self.pixels && !std::mem::replace(&mut seen[k], true)
                })
        })
    }
}

fn ranks_of<V: Scalar>(values: &[V]) -> Vec<u32> {
    let order = argsort(values, |a, b| a.partial_cmp(b).expect("finite values"));
    let mut rank = vec![0u32; values.len()];
    for (r, &p) in order.iter().enumerate() {
        rank[p as usize] = r as u32;
    }
    rank
}

/// Gather index for one channel: `out[p] = values[index[p]]` places the
/// `k`-th smallest of `values` at the pixel of rank `k` in `reference`.
pub fn match_index<S: Scalar, V: Scalar>(reference: &[S], values: &[V]) -> Vec<u32> {
    let rank = ranks_of(reference);
    let order = argsort(values, |a, b| a.partial_cmp(b).expect("finite values"));
    rank.iter().map(|&r| order[r as usize]).collect()
}

/// Channel-wise exact distribution matching: the output has exactly the
/// values of `recolored`, arranged in the rank order of `reference`.
pub fn sort_match(reference: &ImagePlane, recolored: &ImagePlane) -> Result<ImagePlane> {
    if !reference.same_shape(recolored) {
        return Err(DarcError::ShapeMismatch(format!(
            "sort_match: {}x{}x{} vs {}x{}x{}",
            reference.height(),
            reference.width(),
            reference.channels(),
            recolored.height(),
            recolored.width(),
            recolored.channels()
        )));
    }
    let mut data = Vec::with_capacity(reference.data().len());
    for c in 0..reference.channels() {
        let vals = recolored.channel(c);
        let index = match_index(reference.channel(c), vals);
        data.extend(index.iter().map(|&i| vals[i as usize]));
    }
    ImagePlane::new(reference.height(), reference.width(), reference.channels(), data)
}

/// Sort-matching on the tape. The permutation is computed from values and
/// held constant, so gradients reach `recolored` through the gathered values.
pub fn sort_match_var<T: Scalar>(g: &mut Graph<T>, reference: &Tensor<T>, recolored: Var) -> Var {
    let shape = g.shape(recolored);
    assert_eq!(reference.shape(), shape, "sort_match_var shape");
    let hw = reference.plane();
    let mut index = Vec::with_capacity(reference.len());
    let vals = g.value(recolored);
    for p in 0..shape[0] * shape[1] {
        let r = &reference.data()[p * hw..(p + 1) * hw];
        let v = &vals.data()[p * hw..(p + 1) * hw];
        index.extend(match_index(r, v));
    }
    g.gather_plane(recolored, index)
}

/// Per-pixel BT.601 luma of a `[N, 3, H, W]` tensor as `[N, 1, H, W]`.
pub fn grayscale_tensor<T: Scalar>(images: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = images.shape();
    assert_eq!(c, 3, "grayscale needs RGB");
    let hw = h * w;
    let wts = LUMA_WEIGHTS.map(T::of);
    Tensor::from_fn([n, 1, h, w], |i| {
        let (s, p) = (i / hw, i % hw);
        let base = s * 3 * hw + p;
        let y = wts[0] * images.data()[base]
            + wts[1] * images.data()[base + hw]
            + wts[2] * images.data()[base + 2 * hw];
        y.max(T::zero()).min(T::one())
    })
}

/// Full re-coloring of one image with the model's color module. Returns the
/// input unchanged for variants without one.
pub fn recolor<T: Scalar>(model: &Model<T>, img: &ImagePlane) -> Result<ImagePlane> {
    if img.channels() != 3 {
        return Err(DarcError::InvalidImage("recolor needs an RGB image".into()));
    }
    let mut g = Graph::inference(&model.params);
    let x = img.to_tensor::<T>();
    let out = model.recolor_var(&mut g, &x);
    ImagePlane::from_tensor(g.value(out), 0)
}

/// The raw module output before sort-matching.
pub fn color_module_output<T: Scalar>(model: &Model<T>, img: &ImagePlane) -> Result<Option<ImagePlane>> {
    let Some(net) = model.recolor_net() else {
        return Ok(None);
    };
    let mut g = Graph::inference(&model.params);
    let gray = g.constant(grayscale_tensor(&img.to_tensor::<T>()));
    let out = net.forward(&mut g, gray);
    ImagePlane::from_tensor(g.value(out), 0).map(Some)
}

//! Image and label containers shared by every stage of the pipeline.

use darc_tensor::{Scalar, Tensor};

use crate::error::{DarcError, Result};

/// `H x W x C` image with values in `[0, 1]`, stored channel-planar.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImagePlane {
    /// `data` is channel-planar: `data[c * H * W + y * W + x]`.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(DarcError::InvalidImage(format!(
                "degenerate shape {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(DarcError::InvalidImage(format!(
                "buffer of {} values for shape {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DarcError::InvalidImage(format!(
                "value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![v; height * width * channels])
    }

    /// Builds from interleaved `HWC` values.
    pub fn from_interleaved(height: usize, width: usize, channels: usize, hwc: &[f32]) -> Result<Self> {
        let hw = height * width;
        if hwc.len() != hw * channels {
            return Err(DarcError::InvalidImage("interleaved buffer length".into()));
        }
        let mut data = vec![0.0; hwc.len()];
        for p in 0..hw {
            for c in 0..channels {
                data[c * hw + p] = hwc[p * channels + c];
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let hw = self.pixels();
        &self.data[c * hw..(c + 1) * hw]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub(crate) fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &ImagePlane) -> bool {
        (self.height, self.width, self.channels) == (other.height, other.width, other.channels)
    }

    /// Rectangular crop; panics if the window leaves the image.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> ImagePlane {
        assert!(y0 + h <= self.height && x0 + w <= self.width, "crop out of bounds");
        let mut data = Vec::with_capacity(h * w * self.channels);
        for c in 0..self.channels {
            for y in y0..y0 + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        ImagePlane {
            height: h,
            width: w,
            channels: self.channels,
            data,
        }
    }

    /// Expands a single-channel image to three identical channels.
    pub fn to_rgb(&self) -> ImagePlane {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.pixels() * 3);
        for _ in 0..3 {
            data.extend_from_slice(self.channel(0));
        }
        ImagePlane {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [1, self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
    }

    /// Converts sample `n` of a tensor, clamping into `[0, 1]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let [_, c, h, w] = t.shape();
        let s = t.sample(n);
        Self::new(
            h,
            w,
            c,
            s.data()
                .iter()
                .map(|v| (v.as_f64() as f32).clamp(0.0, 1.0))
                .collect(),
        )
    }
}

/// Per-pixel instance ids: 0 is background, `k > 0` is instance `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceLabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl InstanceLabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(DarcError::ShapeMismatch(format!(
                "{} labels for {height}x{width}",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub(crate) fn labels_mut(&mut self) -> &mut [u32] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn same_shape(&self, other: &InstanceLabelMap) -> bool {
        (self.height, self.width) == (other.height, other.width)
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Number of distinct non-zero ids.
    pub fn instance_count(&self) -> usize {
        let mut ids: Vec<u32> = self.labels.iter().copied().filter(|&l| l > 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    /// Renumbers ids to `1..=K` in order of first appearance in raster order.
    pub fn relabeled(&self) -> InstanceLabelMap {
        let mut map = std::collections::HashMap::new();
        let labels = self
            .labels
            .iter()
            .map(|&l| {
                if l == 0 {
                    0
                } else {
                    let next = map.len() as u32 + 1;
                    *map.entry(l).or_insert(next)
                }
            })
            .collect();
        InstanceLabelMap {
            height: self.height,
            width: self.width,
            labels,
        }
    }

    pub fn is_contiguous(&self) -> bool {
        self.max_label() as usize == self.instance_count()
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> InstanceLabelMap {
        assert!(y0 + h <= self.height && x0 + w <= self.width, "crop out of bounds");
        let mut labels = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            labels.extend_from_slice(&self.labels[y * self.width + x0..y * self.width + x0 + w]);
        }
        InstanceLabelMap {
            height: h,
            width: w,
            labels,
        }
    }

    pub fn foreground_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l > 0).collect()
    }
}

/// 4-connected component labeling of a binary mask. Components are numbered
/// `1..=K` in raster order of their first pixel.
pub fn label_components(height: usize, width: usize, mask: &[bool]) -> (Vec<u32>, u32) {
    let mut labels = vec![0u32; height * width];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / width, p % width);
            for q in neighbors4(y, x, height, width) {
                if mask[q] && labels[q] == 0 {
                    labels[q] = next;
                    stack.push(q);
                }
            }
        }
    }
    (labels, next)
}

#[inline]
pub(crate) fn neighbors4(
    y: usize,
    x: usize,
    height: usize,
    width: usize,
) -> impl Iterator<Item = usize> {
    let up = (y > 0).then(|| (y - 1) * width + x);
    let down = (y + 1 < height).then(|| (y + 1) * width + x);
    let left = (x > 0).then(|| y * width + x - 1);
    let right = (x + 1 < width).then(|| y * width + x + 1);
    [up, down, left, right].into_iter().flatten()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_values() {
        assert!(ImagePlane::new(1, 2, 1, vec![0.5, 1.5]).is_err());
        assert!(ImagePlane::new(1, 1, 1, vec![f32::NAN]).is_err());
        assert!(ImagePlane::new(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn interleaved_round_trip() {
        let hwc = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let img = ImagePlane::from_interleaved(1, 2, 3, &hwc).unwrap();
        assert_eq!(img.channel(0), &[0.1, 0.4]);
        assert_eq!(img.get(2, 0, 1), 0.6);
    }

    #[test]
    fn relabel_is_contiguous_in_raster_order() {
        let m = InstanceLabelMap::new(2, 3, vec![7, 7, 0, 3, 0, 9]).unwrap();
        let r = m.relabeled();
        assert_eq!(r.labels(), &[1, 1, 0, 2, 0, 3]);
        assert!(r.is_contiguous());
        assert!(!m.is_contiguous());
    }

    #[test]
    fn components_use_four_connectivity() {
        // diagonal pixels are separate components
        let mask = [true, false, false, true];
        let (labels, n) = label_components(2, 2, &mask);
        assert_eq!(n, 2);
        assert_eq!(labels, vec![1, 0, 0, 2]);
    }
}

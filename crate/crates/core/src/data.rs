//! Datasets on disk, contour targets, and a synthetic multi-domain generator.
//!
//! On-disk layout: `<root>/<domain>/images/<id>.png` with a matching
//! `<root>/<domain>/labels/<id>.png` holding 16-bit instance ids.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, DarcError, Result};
use crate::io::{read_image, read_labels, write_image, write_labels};
use crate::plane::{label_components, ImagePlane, InstanceLabelMap};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: ImagePlane,
    pub labels: InstanceLabelMap,
    pub domain: String,
    pub id: String,
}

impl Sample {
    pub fn new(image: ImagePlane, labels: InstanceLabelMap, domain: &str, id: &str) -> Result<Self> {
        if image.height() != labels.height() || image.width() != labels.width() {
            return Err(DarcError::ShapeMismatch(format!(
                "{domain}/{id}: image {}x{} vs labels {}x{}",
                image.height(),
                image.width(),
                labels.height(),
                labels.width()
            )));
        }
        Ok(Self {
            image,
            labels,
            domain: domain.to_string(),
            id: id.to_string(),
        })
    }
}

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Loads one domain directory holding `images/` and `labels/`. Instance ids
/// are relabeled to `1..K`. A directory without `images/` is an empty dataset.
pub fn load_dataset(dir: &Path, domain: &str) -> Result<Vec<Sample>> {
    let images = dir.join("images");
    if !images.is_dir() {
        return Ok(Vec::new());
    }
    let labels_dir = dir.join("labels");
    let mut out = Vec::new();
    for (id, path) in png_stems(&images)? {
        let lpath = labels_dir.join(format!("{id}.png"));
        if !lpath.is_file() {
            return Err(DarcError::Dataset {
                path: path.clone(),
                reason: format!("no label map at {}", lpath.display()),
            });
        }
        let image = read_image(&path)?;
        let labels = read_labels(&lpath)?.relabeled();
        let sample = Sample::new(image, labels, domain, &id).map_err(|e| DarcError::Dataset {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        out.push(sample);
    }
    Ok(out)
}

/// Loads every domain below `root`, keyed by directory name.
pub fn load_domains(root: &Path) -> Result<BTreeMap<String, Vec<Sample>>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let path = entry.map_err(io_err(root))?.path();
        if !path.is_dir() {
            continue;
        }
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let samples = load_dataset(&path, &name)?;
        if !samples.is_empty() {
            out.insert(name, samples);
        }
    }
    Ok(out)
}

/// Writes samples under `<root>/<domain>/{images,labels}/<id>.png`.
pub fn save_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    for s in samples {
        let base = root.join(&s.domain);
        let (idir, ldir) = (base.join("images"), base.join("labels"));
        fs::create_dir_all(&idir).map_err(io_err(&idir))?;
        fs::create_dir_all(&ldir).map_err(io_err(&ldir))?;
        write_image(&idir.join(format!("{}.png", s.id)), &s.image)?;
        write_labels(&ldir.join(format!("{}.png", s.id)), &s.labels)?;
    }
    Ok(())
}

/// Instance pixels within Chebyshev distance `thickness` of a pixel with a
/// different label, background included. Pixels outside the image do not count.
pub fn labels_to_contour(labels: &InstanceLabelMap, thickness: usize) -> Vec<bool> {
    let (h, w) = (labels.height(), labels.width());
    let t = thickness as isize;
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let l = labels.get(y, x);
            if l == 0 || t == 0 {
                continue;
            }
            'scan: for dy in -t..=t {
                let yy = y as isize + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -t..=t {
                    let xx = x as isize + dx;
                    if xx >= 0 && xx < w as isize && labels.get(yy as usize, xx as usize) != l {
                        out[y * w + x] = true;
                        break 'scan;
                    }
                }
            }
        }
    }
    out
}

/// Fraction of foreground pixels.
pub fn ground_truth_ratio(labels: &InstanceLabelMap) -> f64 {
    labels.foreground_count() as f64 / (labels.height() * labels.width()) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainStyle {
    pub name: String,
    pub background: [f32; 3],
    pub nucleus: [f32; 3],
    /// Multiplier on the number of instances per image.
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub size: usize,
    /// Instance count range before the density multiplier.
    pub instances: [usize; 2],
    /// Semi-axis range in pixels.
    pub axes: [f64; 2],
    pub noise: f64,
    pub train_images: usize,
    pub val_images: usize,
    pub domains: Vec<DomainStyle>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let style = |name: &str, background, nucleus, density| DomainStyle {
            name: name.to_string(),
            background,
            nucleus,
            density,
        };
        Self {
            size: 64,
            instances: [4, 8],
            axes: [3.0, 7.0],
            noise: 0.03,
            train_images: 24,
            val_images: 8,
            domains: vec![
                style("he", [0.94, 0.78, 0.86], [0.36, 0.18, 0.52], 1.0),
                style("ihc", [0.88, 0.89, 0.93], [0.52, 0.34, 0.20], 2.0),
                style("dark", [0.16, 0.14, 0.22], [0.62, 0.70, 0.86], 0.5),
            ],
            seed: 0,
        }
    }
}

/// Attempts per instance before placement is declared infeasible.
pub const PLACEMENT_RETRIES: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSet {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DarcError::Config(m));
        if self.size < 4 {
            return bad(format!("synthetic image size {} is too small", self.size));
        }
        if self.instances[0] > self.instances[1] {
            return bad("instance range is reversed".into());
        }
        if !(self.axes[0] >= 1.0 && self.axes[0] <= self.axes[1]) {
            return bad("axis range must satisfy 1 <= min <= max".into());
        }
        if self.noise < 0.0 {
            return bad("noise must be non-negative".into());
        }
        if self.domains.is_empty() {
            return bad("at least one domain is required".into());
        }
        for d in &self.domains {
            if d.density < 0.0 || !d.density.is_finite() {
                return bad(format!("domain {} has invalid density", d.name));
            }
            if d.background.iter().chain(&d.nucleus).any(|v| !(0.0..=1.0).contains(v)) {
                return bad(format!("domain {} colors must be in [0, 1]", d.name));
            }
        }
        Ok(())
    }
}

pub fn synth_generate(config: &SynthConfig) -> Result<SynthSet> {
    config.validate()?;
    let mut set = SynthSet {
        train: Vec::new(),
        val: Vec::new(),
    };
    for (d, style) in config.domains.iter().enumerate() {
        for (split, count) in [(0, config.train_images), (1, config.val_images)] {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream((d * 2 + split) as u64);
            for i in 0..count {
                let (image, labels) = synth_image(config, style, &mut rng)?;
                let sample = Sample::new(image, labels, &style.name, &format!("{i:04}"))?;
                if split == 0 {
                    set.train.push(sample);
                } else {
                    set.val.push(sample);
                }
            }
        }
    }
    Ok(set)
}

/// Writes `<out>/train/<domain>/...` and `<out>/val/<domain>/...`.
pub fn write_synth(out: &Path, set: &SynthSet) -> Result<()> {
    save_dataset(&out.join("train"), &set.train)?;
    save_dataset(&out.join("val"), &set.val)
}

fn ellipse_mask(size: usize, cy: f64, cx: f64, a: f64, b: f64, theta: f64) -> Vec<usize> {
    let (s, c) = theta.sin_cos();
    let r = a.max(b).ceil() as isize + 1;
    let mut pix = Vec::new();
    for y in (cy as isize - r).max(0)..=(cy as isize + r).min(size as isize - 1) {
        for x in (cx as isize - r).max(0)..=(cx as isize + r).min(size as isize - 1) {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let u = (dx * c + dy * s) / a;
            let v = (-dx * s + dy * c) / b;
            if u * u + v * v <= 1.0 {
                pix.push(y as usize * size + x as usize);
            }
        }
    }
    pix
}

/// Keeps the largest 4-connected piece of a pixel set.
fn largest_component(size: usize, pix: &[usize]) -> Vec<usize> {
    let mut mask = vec![false; size * size];
    pix.iter().for_each(|&p| mask[p] = true);
    let (comp, n) = label_components(size, size, &mask);
    if n <= 1 {
        return pix.to_vec();
    }
    let mut counts = vec![0usize; n as usize + 1];
    pix.iter().for_each(|&p| counts[comp[p] as usize] += 1);
    let best = (1..=n as usize).max_by_key(|&k| (counts[k], std::cmp::Reverse(k))).unwrap_or(1) as u32;
    pix.iter().copied().filter(|&p| comp[p] == best).collect()
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

fn synth_image(config: &SynthConfig, style: &DomainStyle, rng: &mut ChaCha8Rng) -> Result<(ImagePlane, InstanceLabelMap)> {
    let n = config.size;
    let base = rng.random_range(config.instances[0]..=config.instances[1]);
    let requested = (base as f64 * style.density).round() as usize;
    let mut labels = vec![0u32; n * n];
    let mut placed = 0;
    while placed < requested {
        let mut ok = false;
        for _ in 0..PLACEMENT_RETRIES {
            let a = rng.random_range(config.axes[0]..=config.axes[1]);
            let b = rng.random_range(config.axes[0]..=config.axes[1]);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let cy = rng.random_range(0.0..n as f64);
            let cx = rng.random_range(0.0..n as f64);
            let pix = largest_component(n, &ellipse_mask(n, cy, cx, a, b, theta));
            if pix.len() < 4 || pix.iter().any(|&p| labels[p] != 0) {
                continue;
            }
            placed += 1;
            pix.iter().for_each(|&p| labels[p] = placed as u32);
            ok = true;
            break;
        }
        if !ok {
            return Err(DarcError::SynthInfeasible { requested, placed });
        }
    }
    let noise = Normal::new(0.0, config.noise.max(1e-12)).expect("valid noise");
    let shade: Vec<f64> = (0..=placed).map(|_| rng.random_range(0.85..1.15)).collect();
    let mut data = vec![0f32; 3 * n * n];
    for p in 0..n * n {
        let l = labels[p] as usize;
        for c in 0..3 {
            let base = if l == 0 {
                style.background[c] as f64
            } else {
                style.nucleus[c] as f64 * shade[l]
            };
            let v = if config.noise > 0.0 { base + noise.sample(rng) } else { base };
            data[c * n * n + p] = quantize(v);
        }
    }
    Ok((ImagePlane::new(n, n, 3, data)?, InstanceLabelMap::new(n, n, labels)?.relabeled()))
}

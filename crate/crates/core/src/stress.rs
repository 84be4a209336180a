//! Foreground-background ratio stress test: remove the nuclei by in-painting,
//! tile the resulting background around the original image, and re-score.

use std::fmt::Write as _;
use std::path::Path;

use darc_tensor::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ground_truth_ratio, Sample};
use crate::error::{io_err, DarcError, Result};
use crate::infer::{evaluate, InferConfig};
use crate::metrics::ScoreRecord;
use crate::network::Model;
use crate::plane::{neighbors4, ImagePlane, InstanceLabelMap};

pub const INPAINT_TOL: f64 = 1e-4;
pub const INPAINT_MAX_ITERS: usize = 500;

/// Jacobi diffusion: masked pixels repeatedly take the mean of their
/// 4-neighbours, starting from the mean background colour.
pub fn inpaint_foreground(image: &ImagePlane, fg: &[bool]) -> Result<ImagePlane> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    if fg.len() != h * w {
        return Err(DarcError::ShapeMismatch(format!("mask of {} pixels for a {h}x{w} image", fg.len())));
    }
    if !fg.contains(&true) {
        return Ok(image.clone());
    }
    let n_bg = fg.iter().filter(|&&m| !m).count();
    if n_bg == 0 {
        return Err(DarcError::NoBackground);
    }
    let holes: Vec<usize> = (0..h * w).filter(|&p| fg[p]).collect();
    let mut out = image.clone();
    for ch in 0..c {
        let src = image.channel(ch);
        let mean = (0..h * w).filter(|&p| !fg[p]).map(|p| src[p] as f64).sum::<f64>() / n_bg as f64;
        let mut cur: Vec<f64> = src.iter().map(|&v| v as f64).collect();
        for &p in &holes {
            cur[p] = mean;
        }
        let mut next = cur.clone();
        for _ in 0..INPAINT_MAX_ITERS {
            let mut change = 0f64;
            for &p in &holes {
                let (s, k) = neighbors4(p / w, p % w, h, w).fold((0.0, 0usize), |(s, k), q| (s + cur[q], k + 1));
                let v = s / k as f64;
                change = change.max((v - cur[p]).abs());
                next[p] = v;
            }
            std::mem::swap(&mut cur, &mut next);
            if change < INPAINT_TOL {
                break;
            }
        }
        let dst = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        for &p in &holes {
            dst[p] = cur[p] as f32;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpansionSpec {
    /// Area of the new canvas over the original area.
    pub b: f64,
    pub seed: u64,
}

pub fn expanded_side(side: usize, b: f64) -> usize {
    (b.sqrt() * side as f64).round() as usize
}

/// Centre the image on a canvas `B` times its area, filling the rest with
/// random crops of its in-painted background. Padded labels are 0.
pub fn expand_background(
    image: &ImagePlane,
    labels: &InstanceLabelMap,
    spec: &ExpansionSpec,
) -> Result<(ImagePlane, InstanceLabelMap)> {
    if !(spec.b >= 1.0) || !spec.b.is_finite() {
        return Err(DarcError::OutOfRange(format!("expansion factor {} must be >= 1", spec.b)));
    }
    let (h, w, c) = (image.height(), image.width(), image.channels());
    if labels.height() != h || labels.width() != w {
        return Err(DarcError::ShapeMismatch("image and labels differ in size".into()));
    }
    let (nh, nw) = (expanded_side(h, spec.b), expanded_side(w, spec.b));
    if (nh, nw) == (h, w) {
        return Ok((image.clone(), labels.clone()));
    }
    let bg = inpaint_foreground(image, &labels.foreground_mask())?;
    let (th, tw) = (h.div_ceil(2), w.div_ceil(2));
    let (oy, ox) = ((nh - h) / 2, (nw - w) / 2);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut canvas = ImagePlane::filled(nh, nw, c, 0.0)?;
    for ty in (0..nh).step_by(th) {
        for tx in (0..nw).step_by(tw) {
            let (sy, sx) = (rng.random_range(0..=h - th), rng.random_range(0..=w - tw));
            for y in ty..(ty + th).min(nh) {
                for x in tx..(tx + tw).min(nw) {
                    for ch in 0..c {
                        canvas.set(ch, y, x, bg.get(ch, sy + y - ty, sx + x - tx));
                    }
                }
            }
        }
    }
    let mut out_labels = InstanceLabelMap::empty(nh, nw);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                canvas.set(ch, oy + y, ox + x, image.get(ch, y, x));
            }
            out_labels.labels_mut()[(oy + y) * nw + ox + x] = labels.get(y, x);
        }
    }
    Ok((canvas, out_labels))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StressRow {
    pub b: f64,
    pub aji: f64,
    pub dice: f64,
    /// Mean ground-truth foreground ratio of the expanded images.
    pub rho_g: f64,
    pub images: usize,
}

/// Scores of `model` on `samples` expanded by each factor. The expansion of
/// sample `i` is seeded with `seed + i`.
pub fn run_stress<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample],
    factors: &[f64],
    seed: u64,
    infer: &InferConfig,
) -> Result<Vec<StressRow>> {
    if samples.is_empty() {
        return Err(DarcError::Config("stress test needs at least one sample".into()));
    }
    let mut rows = Vec::new();
    for &b in factors {
        let mut expanded = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let spec = ExpansionSpec {
                b,
                seed: seed.wrapping_add(i as u64),
            };
            let (img, lab) = expand_background(&s.image, &s.labels, &spec)?;
            expanded.push(Sample::new(img, lab, &s.domain, &s.id)?);
        }
        let records: Vec<ScoreRecord> = evaluate(model, &expanded, infer)?;
        let n = records.len() as f64;
        rows.push(StressRow {
            b,
            aji: records.iter().map(|r| r.aji).sum::<f64>() / n,
            dice: records.iter().map(|r| r.dice).sum::<f64>() / n,
            rho_g: expanded.iter().map(|s| ground_truth_ratio(&s.labels)).sum::<f64>() / n,
            images: expanded.len(),
        });
        log::info!("B={b}: aji {:.4} dice {:.4}", rows.last().unwrap().aji, rows.last().unwrap().dice);
    }
    Ok(rows)
}

pub const STRESS_HEADER: &str = "B,aji,dice,rho_g,images";

pub fn stress_csv(rows: &[StressRow]) -> String {
    let mut s = format!("{STRESS_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.b, r.aji, r.dice, r.rho_g, r.images).unwrap();
    }
    s
}

/// Line plot of AJI and Dice against B.
pub fn stress_svg(rows: &[StressRow]) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let bmax = rows.iter().map(|r| r.b).fold(1.0, f64::max);
    let bmin = rows.iter().map(|r| r.b).fold(bmax, f64::min);
    let span = (bmax - bmin).max(1e-9);
    let px = |b: f64| m + (b - bmin) / span * (w - 2.0 * m);
    let py = |v: f64| h - m - v * (h - 2.0 * m);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" stroke="black" fill="none"/>"#,
        h - m,
        w - m
    )
    .unwrap();
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{t:.2}</text>"#, m - 6.0, py(t) + 4.0).unwrap();
    }
    for r in rows {
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, px(r.b), h - m + 18.0, r.b).unwrap();
    }
    for (name, color, get) in [("AJI", "#1f77b4", (|r: &StressRow| r.aji) as fn(&StressRow) -> f64), ("Dice", "#d62728", |r| r.dice)] {
        let pts: Vec<String> = rows.iter().map(|r| format!("{:.1},{:.1}", px(r.b), py(get(r)))).collect();
        writeln!(s, r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="2"/>"#, pts.join(" ")).unwrap();
        let ly = if name == "AJI" { m - 24.0 } else { m - 10.0 };
        writeln!(s, r#"<text x="{}" y="{ly}" fill="{color}">{name}</text>"#, w - m - 40.0).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">background expansion factor B</text>"#, w / 2.0, h - 10.0).unwrap();
    s.push_str("</svg>\n");
    s
}

pub fn write_stress(dir: &Path, rows: &[StressRow]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv = dir.join("stress.csv");
    std::fs::write(&csv, stress_csv(rows)).map_err(io_err(&csv))?;
    let svg = dir.join("stress.svg");
    std::fs::write(&svg, stress_svg(rows)).map_err(io_err(&svg))
}

//! Aggregated Jaccard index, Dice, and cross-domain averaging.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, DarcError, Result};
use crate::plane::InstanceLabelMap;

fn check_shapes(pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(DarcError::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

/// Dice of the binarized foregrounds; 1 when both are empty.
pub fn dice(pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels().iter().zip(gt.labels()) {
        p += (a > 0) as usize;
        g += (b > 0) as usize;
        inter += (a > 0 && b > 0) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Aggregated Jaccard index. Ground-truth instances are visited in ascending
/// id; each takes the unused overlapping prediction of highest IoU (ties to
/// the smaller id). Unused predictions are added to the union. 1 when both
/// maps are empty.
pub fn aji(pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mut area_p: BTreeMap<u32, usize> = BTreeMap::new();
    let mut area_g: BTreeMap<u32, usize> = BTreeMap::new();
    let mut overlap: HashMap<u32, BTreeMap<u32, usize>> = HashMap::new();
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if p > 0 {
            *area_p.entry(p).or_default() += 1;
        }
        if g > 0 {
            *area_g.entry(g).or_default() += 1;
            if p > 0 {
                *overlap.entry(g).or_default().entry(p).or_default() += 1;
            }
        }
    }
    if area_p.is_empty() && area_g.is_empty() {
        return Ok(1.0);
    }
    let mut used: HashMap<u32, bool> = HashMap::new();
    let (mut inter, mut union) = (0usize, 0usize);
    for (&g, &ag) in &area_g {
        let mut best: Option<(u32, usize, f64)> = None;
        if let Some(cands) = overlap.get(&g) {
            for (&p, &i) in cands {
                if used.contains_key(&p) {
                    continue;
                }
                let u = ag + area_p[&p] - i;
                let iou = i as f64 / u as f64;
                if best.is_none_or(|(_, _, b)| iou > b) {
                    best = Some((p, i, iou));
                }
            }
        }
        match best {
            Some((p, i, _)) => {
                used.insert(p, true);
                inter += i;
                union += ag + area_p[&p] - i;
            }
            None => union += ag,
        }
    }
    for (p, a) in &area_p {
        if !used.contains_key(p) {
            union += a;
        }
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub dataset: String,
    pub image: String,
    pub aji: f64,
    pub dice: f64,
}

impl ScoreRecord {
    pub fn score(dataset: &str, image: &str, pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> Result<Self> {
        Ok(Self {
            dataset: dataset.to_string(),
            image: image.to_string(),
            aji: aji(pred, gt)?,
            dice: dice(pred, gt)?,
        })
    }
}

/// Mean `(aji, dice)` over the records of one domain.
pub fn domain_mean(records: &[ScoreRecord], domain: &str) -> Result<(f64, f64)> {
    let rs: Vec<_> = records.iter().filter(|r| r.dataset == domain).collect();
    if rs.is_empty() {
        return Err(DarcError::EmptyDomain(domain.to_string()));
    }
    let n = rs.len() as f64;
    Ok((
        rs.iter().map(|r| r.aji).sum::<f64>() / n,
        rs.iter().map(|r| r.dice).sum::<f64>() / n,
    ))
}

/// Unweighted mean over domains of the per-domain means.
pub fn cross_domain_average(records: &[ScoreRecord], held_out: &[String]) -> Result<(f64, f64)> {
    if held_out.is_empty() {
        return Err(DarcError::Config("no held-out domains".into()));
    }
    let mut sum = (0.0, 0.0);
    for d in held_out {
        let (a, s) = domain_mean(records, d)?;
        sum.0 += a;
        sum.1 += s;
    }
    let n = held_out.len() as f64;
    Ok((sum.0 / n, sum.1 / n))
}

pub const SCORES_HEADER: &str = "dataset,image,aji,dice";

pub fn write_scores_csv(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut s = String::from(SCORES_HEADER);
    s.push('\n');
    for r in records {
        writeln!(s, "{},{},{},{}", r.dataset, r.image, r.aji, r.dice).expect("string write");
    }
    std::fs::write(path, s).map_err(io_err(path))
}

/// One method's line in the summary table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    /// `(aji, dice)` per held-out domain, in header order.
    pub per_domain: Vec<(f64, f64)>,
    pub average: (f64, f64),
}

impl ReportRow {
    pub fn from_records(method: &str, records: &[ScoreRecord], held_out: &[String]) -> Result<Self> {
        Ok(Self {
            method: method.to_string(),
            per_domain: held_out
                .iter()
                .map(|d| domain_mean(records, d))
                .collect::<Result<_>>()?,
            average: cross_domain_average(records, held_out)?,
        })
    }
}

/// Markdown table: one AJI and Dice column pair per unseen domain, then the
/// cross-domain average. Scores are percentages.
pub fn format_report(train_domain: &str, held_out: &[String], rows: &[ReportRow]) -> String {
    let mut s = String::new();
    write!(s, "| Method (trained on {train_domain}) |").unwrap();
    for d in held_out {
        write!(s, " {d} AJI | {d} Dice |").unwrap();
    }
    s.push_str(" Avg AJI | Avg Dice |\n|---|");
    for _ in 0..held_out.len() * 2 + 2 {
        s.push_str("---|");
    }
    s.push('\n');
    for r in rows {
        write!(s, "| {} |", r.method).unwrap();
        for (a, d) in &r.per_domain {
            write!(s, " {:.2} | {:.2} |", a * 100.0, d * 100.0).unwrap();
        }
        writeln!(s, " {:.2} | {:.2} |", r.average.0 * 100.0, r.average.1 * 100.0).unwrap();
    }
    s
}

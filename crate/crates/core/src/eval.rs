//! Evaluation: calibration of discovered parts to ground-truth classes,
//! dataset-aggregated IoU, centroid PCK and report files.
//!
//! Predicted segmentations are argmax maps with 0-based part ids; ground truth
//! uses class 0 for background and `1..=K` for parts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{self, RgbImage};
use crate::nets::Model;
use crate::pipeline;
use crate::synth_data::quantize;
use crate::tensor::Array;

/// One image with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[3, 1, S, S]`.
    pub image: Array<f32>,
    pub labels: Vec<u8>,
    pub keypoints: Vec<Option<(f64, f64)>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub image_size: usize,
    /// Foreground class count `K`.
    pub num_classes: usize,
    pub items: Vec<LabeledImage>,
}

/// `|a ∧ b| / |a ∨ b|`; 1 when both masks are empty.
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("masks of {} and {} pixels", a.len(), b.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(ratio(inter as f64, union as f64))
}

fn ratio(inter: f64, union: f64) -> f64 {
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

/// Predicted part id to ground-truth class id, many-to-one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationMapping {
    pub assign: Vec<u8>,
}

impl CalibrationMapping {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("mapping serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

fn check_pair(preds: &[Vec<u8>], gts: &[Vec<u8>]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::EmptyDataset("no segmentations to compare".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    if let Some(i) = (0..preds.len()).find(|&i| preds[i].len() != gts[i].len()) {
        return Err(Error::Shape(format!("image {i}: prediction and ground truth sizes differ")));
    }
    Ok(())
}

/// Pixel co-occurrence counts `[part][class]` and marginals over a set.
struct Counts {
    joint: Vec<Vec<u64>>,
    part: Vec<u64>,
    class: Vec<u64>,
}

fn count(preds: &[Vec<u8>], gts: &[Vec<u8>], num_parts: usize, num_classes: usize) -> Result<Counts> {
    let mut joint = vec![vec![0u64; num_classes + 1]; num_parts];
    let mut part = vec![0u64; num_parts];
    let mut class = vec![0u64; num_classes + 1];
    for (p, g) in preds.iter().zip(gts) {
        for (&pi, &gi) in p.iter().zip(g) {
            let (pi, gi) = (pi as usize, gi as usize);
            if pi >= num_parts || gi > num_classes {
                return Err(Error::Shape(format!("label out of range: part {pi} of {num_parts}, class {gi} of {num_classes}")));
            }
            joint[pi][gi] += 1;
            part[pi] += 1;
            class[gi] += 1;
        }
    }
    Ok(Counts { joint, part, class })
}

/// Aggregated IoU between the pixels of part `i` and class `c` over the whole set.
pub fn part_class_iou(preds: &[Vec<u8>], gts: &[Vec<u8>], num_parts: usize, num_classes: usize) -> Result<Vec<Vec<f64>>> {
    check_pair(preds, gts)?;
    let n = count(preds, gts, num_parts, num_classes)?;
    Ok((0..num_parts)
        .map(|i| {
            (0..=num_classes)
                .map(|c| {
                    let inter = n.joint[i][c] as f64;
                    ratio(inter, (n.part[i] + n.class[c]) as f64 - inter)
                })
                .collect()
        })
        .collect())
}

/// Largest number of mappings searched exhaustively.
pub const EXHAUSTIVE_LIMIT: usize = 1 << 16;

/// Mean foreground IoU of the merged masks under `assign`, from counts.
fn mapping_score(n: &Counts, assign: &[u8]) -> f64 {
    let k = n.class.len() - 1;
    if k == 0 {
        return 0.0;
    }
    let mut inter = vec![0u64; k + 1];
    let mut merged = vec![0u64; k + 1];
    for (i, &c) in assign.iter().enumerate() {
        inter[c as usize] += n.joint[i][c as usize];
        merged[c as usize] += n.part[i];
    }
    (1..=k).map(|c| ratio(inter[c] as f64, (merged[c] + n.class[c] - inter[c]) as f64)).sum::<f64>() / k as f64
}

/// Mapping with the best dataset-aggregated mean foreground IoU.
///
/// All `(K+1)^N` mappings are searched when there are at most
/// [`EXHAUSTIVE_LIMIT`]; the first best in lexicographic order wins, so ties
/// favour background and lower class ids. Larger problems start from the
/// per-part argmax of [`part_class_iou`] and apply single-part reassignments
/// while any strictly improves the score.
pub fn calibrate(preds: &[Vec<u8>], gts: &[Vec<u8>], num_parts: usize, num_classes: usize) -> Result<CalibrationMapping> {
    check_pair(preds, gts)?;
    let n = count(preds, gts, num_parts, num_classes)?;
    let options = num_classes + 1;
    let total = (0..num_parts).try_fold(1usize, |acc, _| acc.checked_mul(options).filter(|&t| t <= EXHAUSTIVE_LIMIT));
    let assign = match total {
        Some(total) => {
            let mut assign = vec![0u8; num_parts];
            let mut best = (f64::NEG_INFINITY, assign.clone());
            for code in 0..total {
                let mut rest = code;
                for slot in assign.iter_mut().rev() {
                    *slot = (rest % options) as u8;
                    rest /= options;
                }
                let score = mapping_score(&n, &assign);
                if score > best.0 {
                    best = (score, assign.clone());
                }
            }
            best.1
        }
        None => {
            let table = part_class_iou(preds, gts, num_parts, num_classes)?;
            let mut assign: Vec<u8> = table
                .iter()
                .map(|row| (1..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best }) as u8)
                .collect();
            let mut score = mapping_score(&n, &assign);
            loop {
                let mut improved = false;
                for i in 0..num_parts {
                    for c in 0..options as u8 {
                        let old = assign[i];
                        assign[i] = c;
                        let candidate = mapping_score(&n, &assign);
                        if candidate > score {
                            score = candidate;
                            improved = true;
                        } else {
                            assign[i] = old;
                        }
                    }
                }
                if !improved {
                    break;
                }
            }
            assign
        }
    };
    Ok(CalibrationMapping { assign })
}

/// Per foreground class IoU and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class: Vec<f64>,
    pub overall: f64,
}

impl IouReport {
    /// Class with the most ground-truth pixels in `set`, 1-based.
    pub fn largest_class(set: &LabeledSet) -> usize {
        let mut counts = vec![0usize; set.num_classes + 1];
        for item in &set.items {
            for &l in &item.labels {
                counts[l as usize] += 1;
            }
        }
        (1..counts.len()).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap_or(1)
    }
}

/// Merges parts by `mapping` and computes micro-averaged IoU per foreground class.
pub fn evaluate_iou(preds: &[Vec<u8>], gts: &[Vec<u8>], mapping: &CalibrationMapping, num_classes: usize) -> Result<IouReport> {
    check_pair(preds, gts)?;
    if let Some(&c) = mapping.assign.iter().find(|&&c| c as usize > num_classes) {
        return Err(Error::Shape(format!("mapping targets class {c} beyond {num_classes}")));
    }
    let n = count(preds, gts, mapping.assign.len(), num_classes)?;
    let per_class: Vec<f64> = (1..=num_classes)
        .map(|c| {
            let mut inter = 0u64;
            let mut merged = 0u64;
            for (i, &target) in mapping.assign.iter().enumerate() {
                if target as usize == c {
                    inter += n.joint[i][c];
                    merged += n.part[i];
                }
            }
            ratio(inter as f64, (merged + n.class[c] - inter) as f64)
        })
        .collect();
    let overall = if per_class.is_empty() { 0.0 } else { per_class.iter().sum::<f64>() / per_class.len() as f64 };
    Ok(IouReport { per_class, overall })
}

/// Probability-weighted mean `(row, col)` of an `h x w` map; `None` without mass.
pub fn part_centroid(probs: &[f64], w: usize) -> Option<(f64, f64)> {
    let (mut m, mut r, mut c) = (0.0, 0.0, 0.0);
    for (i, &p) in probs.iter().enumerate() {
        m += p;
        r += p * (i / w) as f64;
        c += p * (i % w) as f64;
    }
    (m > 0.0).then(|| (r / m, c / m))
}

/// Fraction of ground-truth keypoints predicted within `alpha * diag`;
/// missing predictions are wrong and missing ground truth is skipped.
pub fn pck(pred: &[Option<(f64, f64)>], gt: &[Option<(f64, f64)>], alpha: f64, diag: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predicted keypoints for {} ground truths", pred.len(), gt.len())));
    }
    let threshold = alpha * diag;
    let (mut hits, mut total) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        let Some(g) = g else { continue };
        total += 1;
        if let Some(p) = p {
            hits += (((p.0 - g.0).powi(2) + (p.1 - g.1).powi(2)).sqrt() <= threshold) as usize;
        }
    }
    if total == 0 {
        return Err(Error::EmptyDataset("no ground-truth keypoints".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Segmentation of every image in `set`: argmax part ids and probabilities `[N, 1, S, S]`.
pub fn segment_set(model: &Model<f32>, set: &LabeledSet, chunk: usize) -> Result<Vec<(Vec<u8>, Array<f32>)>> {
    let s = set.image_size;
    let plane = s * s;
    let mut out = Vec::with_capacity(set.items.len());
    for group in set.items.chunks(chunk.max(1)) {
        let b = group.len();
        let mut x = Array::zeros(&[3, b, s, s]);
        for (bi, item) in group.iter().enumerate() {
            for c in 0..3 {
                x.data_mut()[(c * b + bi) * plane..(c * b + bi + 1) * plane]
                    .copy_from_slice(&item.image.data()[c * plane..(c + 1) * plane]);
            }
        }
        let seg = pipeline::infer_segmentation(model, &x)?;
        let n = seg.num_parts();
        for bi in 0..b {
            let mut probs = Array::zeros(&[n, 1, s, s]);
            for k in 0..n {
                probs.data_mut()[k * plane..(k + 1) * plane]
                    .copy_from_slice(&seg.probs.data()[(k * b + bi) * plane..(k * b + bi + 1) * plane]);
            }
            out.push((seg.argmax(bi).into_iter().map(|p| p as u8).collect(), probs));
        }
    }
    Ok(out)
}

/// Calibrates on `set` and evaluates on the same set.
pub fn self_calibrated_iou(model: &Model<f32>, set: &LabeledSet) -> Result<f64> {
    let preds: Vec<Vec<u8>> = segment_set(model, set, 32)?.into_iter().map(|(a, _)| a).collect();
    let gts: Vec<Vec<u8>> = set.items.iter().map(|i| i.labels.clone()).collect();
    let mapping = calibrate(&preds, &gts, model.config.num_parts, set.num_classes)?;
    Ok(evaluate_iou(&preds, &gts, &mapping, set.num_classes)?.overall)
}

/// Keypoint per class: centroid of the probability mass of the parts mapped to it.
pub fn predicted_keypoints(probs: &Array<f32>, mapping: &CalibrationMapping, num_classes: usize) -> Vec<Option<(f64, f64)>> {
    let (n, _, h, w) = probs.dims4();
    (1..=num_classes)
        .map(|c| {
            let mut mass = vec![0.0f64; h * w];
            for k in (0..n).filter(|&k| mapping.assign[k] as usize == c) {
                for (m, &p) in mass.iter_mut().zip(&probs.data()[k * h * w..(k + 1) * h * w]) {
                    *m += p as f64;
                }
            }
            part_centroid(&mass, w)
        })
        .collect()
}

/// Calibrated evaluation of a model: mapping fitted on `val`, scored on `test`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mapping: CalibrationMapping,
    pub iou: IouReport,
    pub largest_class: usize,
    /// PCK at 2.5%, 5% and 10% of the image diagonal, when keypoints exist.
    pub pck: Vec<(f64, f64)>,
}

pub const PCK_ALPHAS: [f64; 3] = [0.025, 0.05, 0.1];

pub fn evaluate_model(model: &Model<f32>, val: &LabeledSet, test: &LabeledSet, mapping: Option<CalibrationMapping>) -> Result<Evaluation> {
    if val.num_classes != test.num_classes {
        return Err(Error::Shape(format!("validation has {} classes, test {}", val.num_classes, test.num_classes)));
    }
    let k = test.num_classes;
    let mapping = match mapping {
        Some(m) if m.assign.len() == model.config.num_parts => m,
        Some(m) => {
            return Err(Error::ConfigMismatch(format!(
                "mapping covers {} parts, model has {}",
                m.assign.len(),
                model.config.num_parts
            )))
        }
        None => {
            let preds: Vec<Vec<u8>> = segment_set(model, val, 32)?.into_iter().map(|(a, _)| a).collect();
            let gts: Vec<Vec<u8>> = val.items.iter().map(|i| i.labels.clone()).collect();
            calibrate(&preds, &gts, model.config.num_parts, k)?
        }
    };
    let segs = segment_set(model, test, 32)?;
    let preds: Vec<Vec<u8>> = segs.iter().map(|(a, _)| a.clone()).collect();
    let gts: Vec<Vec<u8>> = test.items.iter().map(|i| i.labels.clone()).collect();
    let iou = evaluate_iou(&preds, &gts, &mapping, k)?;
    let diag = (2.0f64).sqrt() * test.image_size as f64;
    let mut pck_values = Vec::new();
    let has_keypoints = test.items.iter().any(|i| i.keypoints.iter().any(Option::is_some));
    if has_keypoints {
        let predicted: Vec<_> = segs.iter().map(|(_, p)| predicted_keypoints(p, &mapping, k)).collect();
        for alpha in PCK_ALPHAS {
            let (pred, gt): (Vec<_>, Vec<_>) = predicted
                .iter()
                .zip(&test.items)
                .flat_map(|(p, item)| p.iter().copied().zip(item.keypoints.iter().copied()))
                .unzip();
            pck_values.push((alpha, pck(&pred, &gt, alpha, diag)?));
        }
    }
    Ok(Evaluation { mapping, iou, largest_class: IouReport::largest_class(test), pck: pck_values })
}

/// `input | argmax overlay | ground truth`, one row per image.
#[derive(Clone, Debug)]
pub struct QualitativeRow {
    /// `[3, 1, S, S]`.
    pub image: Array<f32>,
    pub prediction: Vec<u8>,
    pub ground_truth: Option<Vec<u8>>,
}

/// Blends label colors over the image at half opacity.
pub fn overlay(image: &Array<f32>, labels: &[u8], palette: &[[u8; 3]]) -> RgbImage {
    let s = image.shape()[2];
    let plane = s * s;
    let mut out = RgbImage::new(s, s);
    for i in 0..plane {
        let color = palette[labels[i] as usize % palette.len()];
        let px = [0, 1, 2].map(|c| {
            let v = image.data()[c * plane + i];
            quantize(0.5 * v + 0.5 * color[c] as f32 / 255.0)
        });
        out.put(i % s, i / s, px);
    }
    out
}

fn paste(dst: &mut RgbImage, src: &RgbImage, x0: usize, y0: usize) {
    for y in 0..src.height {
        for x in 0..src.width {
            dst.put(x0 + x, y0 + y, src.get(x, y));
        }
    }
}

const PLOT_W: usize = 480;
const PLOT_H: usize = 240;
const MARGIN: usize = 16;

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
            img.put(x as usize, y as usize, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Line plot of each series on a log10 axis; empty series produce a crossed-out frame.
pub fn plot_series(series: &[(Vec<f64>, [u8; 3])]) -> RgbImage {
    let mut img = RgbImage { width: PLOT_W, height: PLOT_H, pixels: vec![255; 3 * PLOT_W * PLOT_H] };
    let (left, right, top, bottom) = (MARGIN as i64, (PLOT_W - MARGIN) as i64, MARGIN as i64, (PLOT_H - MARGIN) as i64);
    let frame = [0, 0, 0];
    for (a, b) in [((left, top), (right, top)), ((right, top), (right, bottom)), ((right, bottom), (left, bottom)), ((left, bottom), (left, top))] {
        draw_line(&mut img, a, b, frame);
    }
    let transformed: Vec<(Vec<f64>, [u8; 3])> = series
        .iter()
        .map(|(v, c)| (v.iter().filter(|x| **x > 0.0 && x.is_finite()).map(|x| x.log10()).collect(), *c))
        .collect();
    let all: Vec<f64> = transformed.iter().flat_map(|(v, _)| v.iter().copied()).collect();
    if all.is_empty() {
        draw_line(&mut img, (left, top), (right, bottom), [200, 0, 0]);
        draw_line(&mut img, (left, bottom), (right, top), [200, 0, 0]);
        return img;
    }
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(lo + 1e-9);
    for (values, color) in &transformed {
        let n = values.len().max(2) - 1;
        let point = |i: usize, v: f64| {
            let x = left + ((right - left) as f64 * i as f64 / n as f64).round() as i64;
            let y = bottom - ((bottom - top) as f64 * (v - lo) / (hi - lo)).round() as i64;
            (x, y)
        };
        for i in 1..values.len() {
            draw_line(&mut img, point(i - 1, values[i - 1]), point(i, values[i]), *color);
        }
    }
    img
}

/// Reads `rec` (or any named field) from a metrics stream.
pub fn read_metric(metrics: &str, field: &str) -> Result<Vec<f64>> {
    metrics
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let v: serde_json::Value =
                serde_json::from_str(line).map_err(|e| Error::Format(format!("metrics line {}: {e}", i + 1)))?;
            Ok(v.get(field).and_then(serde_json::Value::as_f64))
        })
        .filter_map(|r| r.transpose())
        .collect()
}

/// Writes `iou.csv`, `loss_curve.png`, `qualitative.png`, per-row overlays and
/// `summary.txt` under `out_dir`; missing inputs become "no data" entries.
pub fn emit_report(
    report: Option<&Evaluation>,
    metrics: Option<&str>,
    rows: &[QualitativeRow],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut summary = String::new();
    let write = |name: &str, text: String, written: &mut Vec<PathBuf>| -> Result<()> {
        let path = out_dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };

    match report {
        Some(r) => {
            let mut csv = String::from("class,iou\n");
            for (c, v) in r.iou.per_class.iter().enumerate() {
                csv.push_str(&format!("{},{v}\n", c + 1));
            }
            csv.push_str(&format!("overall,{}\n", r.iou.overall));
            write("iou.csv", csv, &mut written)?;
            summary.push_str(&format!("overall IoU: {:.4}\n", r.iou.overall));
            summary.push_str(&format!("largest class {}: {:.4}\n", r.largest_class, r.iou.per_class[r.largest_class - 1]));
            for (alpha, v) in &r.pck {
                summary.push_str(&format!("PCK@{alpha}: {v:.4}\n"));
            }
            if r.pck.is_empty() {
                summary.push_str("PCK: no data\n");
            }
            write("mapping.json", serde_json::to_string_pretty(&r.mapping).expect("mapping serializes"), &mut written)?;
        }
        None => {
            write("iou.csv", "class,iou\noverall,no data\n".into(), &mut written)?;
            summary.push_str("IoU: no data\n");
        }
    }

    let rec = metrics.map(|m| read_metric(m, "rec")).transpose()?.unwrap_or_default();
    let plot_path = out_dir.join("loss_curve.png");
    imageio::write_rgb(&plot_path, &plot_series(&[(rec.clone(), [20, 60, 200])]))?;
    written.push(plot_path);
    if rec.is_empty() {
        summary.push_str("loss curve: no data\n");
    } else {
        summary.push_str(&format!("loss curve: {} steps, final rec {:.4}\n", rec.len(), rec[rec.len() - 1]));
    }

    if rows.is_empty() {
        summary.push_str("qualitative grid: no data\n");
    } else {
        let s = rows[0].image.shape()[2];
        let n = rows.iter().map(|r| r.prediction.iter().copied().max().unwrap_or(0) as usize + 1).max().unwrap_or(1);
        let k = rows.iter().filter_map(|r| r.ground_truth.as_ref()).flatten().copied().max().unwrap_or(0) as usize + 1;
        let palette = imageio::label_palette(n.max(k).max(2));
        let mut grid = RgbImage { width: 3 * s, height: rows.len() * s, pixels: vec![0; 9 * s * s * rows.len()] };
        for (i, row) in rows.iter().enumerate() {
            let over = overlay(&row.image, &row.prediction, &palette[1..]);
            let path = out_dir.join(format!("overlay_{i:03}.png"));
            imageio::write_rgb(&path, &over)?;
            written.push(path);
            paste(&mut grid, &imageio::array_to_rgb(&row.image, 0), 0, i * s);
            paste(&mut grid, &over, s, i * s);
            if let Some(gt) = &row.ground_truth {
                paste(&mut grid, &overlay(&row.image, gt, &palette), 2 * s, i * s);
            }
        }
        let path = out_dir.join("qualitative.png");
        imageio::write_rgb(&path, &grid)?;
        written.push(path);
        summary.push_str(&format!("qualitative grid: {} rows\n", rows.len()));
    }
    write("summary.txt", summary, &mut written)?;
    Ok(written)
}

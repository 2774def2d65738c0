//! Paired training data: a procedural corpus of articulated sprites with
//! ground-truth part masks, thin-plate-spline pose synthesis, the on-disk
//! dataset layout and deterministic pair batches.
//!
//! A sprite is a torso capsule at the image center with limbs attached to
//! its two ends; limb `k >= 3` hangs off the far end of limb `k - 2`.
//! Appearance (part colors, background) is a function of the instance seed,
//! joint angles a function of the pose seed.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{parse_list, parse_value, KeyValues};
use crate::error::{Error, Result};
use crate::eval::{LabeledImage, LabeledSet};
use crate::imageio::{self, RgbImage};
use crate::tensor::Array;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PaletteMode {
    RandomHuePerPart,
    SharedHue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Background {
    Solid,
    Noise,
}

impl FromStr for PaletteMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_hue_per_part" => Ok(PaletteMode::RandomHuePerPart),
            "shared_hue" => Ok(PaletteMode::SharedHue),
            _ => Err(Error::Config(format!("unknown palette_mode `{s}`"))),
        }
    }
}

impl FromStr for Background {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "solid" => Ok(Background::Solid),
            "noise" => Ok(Background::Noise),
            _ => Err(Error::Config(format!("unknown background `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteSpec {
    pub num_parts: usize,
    /// Fractions of the image side.
    pub part_lengths: Vec<f64>,
    pub part_widths: Vec<f64>,
    /// Joint angles are drawn from `[-angle_range, angle_range]`.
    pub angle_range: f64,
    pub palette_mode: PaletteMode,
    pub background: Background,
    pub image_size: usize,
}

impl Default for SpriteSpec {
    fn default() -> Self {
        SpriteSpec::with_parts(3, 64)
    }
}

impl SpriteSpec {
    /// Torso 0.30 x 0.18 of the side, limbs 0.20 x 0.11.
    pub fn with_parts(num_parts: usize, image_size: usize) -> Self {
        let mut part_lengths = vec![0.20; num_parts];
        let mut part_widths = vec![0.11; num_parts];
        if num_parts > 0 {
            part_lengths[0] = 0.30;
            part_widths[0] = 0.18;
        }
        SpriteSpec {
            num_parts,
            part_lengths,
            part_widths,
            angle_range: PI / 3.0,
            palette_mode: PaletteMode::RandomHuePerPart,
            background: Background::Solid,
            image_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_parts == 0 {
            return Err(Error::Config("num_parts must be >= 1".into()));
        }
        if self.part_lengths.len() != self.num_parts || self.part_widths.len() != self.num_parts {
            return Err(Error::Config(format!(
                "{} parts need {0} lengths and widths, got {} and {}",
                self.num_parts,
                self.part_lengths.len(),
                self.part_widths.len()
            )));
        }
        if let Some(v) = self.part_lengths.iter().chain(&self.part_widths).find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::Config(format!("part lengths and widths must lie in (0, 1), got {v}")));
        }
        if !(self.angle_range > 0.0 && self.angle_range <= PI) {
            return Err(Error::Config(format!("angle_range must lie in (0, pi], got {}", self.angle_range)));
        }
        if self.image_size < 4 {
            return Err(Error::Config(format!("image_size must be >= 4, got {}", self.image_size)));
        }
        Ok(())
    }
}

/// One rendered view with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Array<f32>,
    /// Class id per pixel, row-major: 0 background, `k` part `k`.
    pub labels: Vec<u8>,
    /// `(row, col)` per part; `None` when the part is not visible.
    pub keypoints: Vec<Option<(f64, f64)>>,
    pub instance_id: u64,
    pub pose_seed: u64,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.image.shape()[1]
    }

    /// Binary mask of class `k` (1-based part id, 0 background).
    pub fn mask(&self, k: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == k).collect()
    }
}

/// Mixes two words into a well-spread seed (splitmix64 finalizer).
pub fn derive_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Appearance {
    part_colors: Vec<[f64; 3]>,
    background: [f64; 3],
    noise_seed: Option<u64>,
}

impl Appearance {
    fn sample(instance_seed: u64, spec: &SpriteSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(instance_seed);
        let shared = rng.gen::<f64>();
        let part_colors = (0..spec.num_parts)
            .map(|_| {
                let hue = match spec.palette_mode {
                    PaletteMode::RandomHuePerPart => rng.gen::<f64>(),
                    PaletteMode::SharedHue => shared,
                };
                imageio::hsv_to_rgb(hue, rng.gen_range(0.55..0.95), rng.gen_range(0.65..1.0))
            })
            .collect();
        let gray = rng.gen_range(0.05..0.3);
        let noise_seed = (spec.background == Background::Noise).then(|| rng.gen());
        Appearance { part_colors, background: [gray; 3], noise_seed }
    }
}

/// A capsule: segment `a`-`b` (x, y in pixels) with radius `r`.
#[derive(Clone, Copy, Debug)]
struct Capsule {
    a: (f64, f64),
    b: (f64, f64),
    r: f64,
}

impl Capsule {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 { (((x - self.a.0) * dx + (y - self.a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let (px, py) = (self.a.0 + t * dx - x, self.a.1 + t * dy - y);
        px * px + py * py <= self.r * self.r
    }
}

fn skeleton(spec: &SpriteSpec, pose_seed: u64) -> Vec<Capsule> {
    let mut rng = ChaCha8Rng::seed_from_u64(pose_seed);
    let s = spec.image_size as f64;
    let angles: Vec<f64> = (0..spec.num_parts).map(|_| rng.gen_range(-1.0..=1.0) * spec.angle_range).collect();
    let mut dirs: Vec<f64> = Vec::with_capacity(spec.num_parts);
    let mut parts: Vec<Capsule> = Vec::with_capacity(spec.num_parts);
    for k in 0..spec.num_parts {
        let len = spec.part_lengths[k] * s;
        let r = spec.part_widths[k] * s / 2.0;
        let (anchor, dir) = match k {
            0 => {
                let dir = -PI / 2.0 + angles[0];
                let half = (dir.cos() * len / 2.0, dir.sin() * len / 2.0);
                let c = (s / 2.0, s / 2.0);
                dirs.push(dir);
                parts.push(Capsule { a: (c.0 - half.0, c.1 - half.1), b: (c.0 + half.0, c.1 + half.1), r });
                continue;
            }
            1 => (parts[0].b, dirs[0] + angles[1]),
            2 => (parts[0].a, dirs[0] + PI + angles[2]),
            _ => (parts[k - 2].b, dirs[k - 2] + angles[k]),
        };
        dirs.push(dir);
        parts.push(Capsule { a: anchor, b: (anchor.0 + dir.cos() * len, anchor.1 + dir.sin() * len), r });
    }
    parts
}

/// Topmost part containing the point, 1-based; 0 for background.
fn label_at(parts: &[Capsule], x: f64, y: f64) -> u8 {
    parts.iter().rposition(|p| p.contains(x, y)).map_or(0, |k| k as u8 + 1)
}

/// Centroid of the class-`k` pixels, moved to the nearest class pixel when it
/// falls outside the mask.
pub fn mask_keypoint(labels: &[u8], size: usize, k: u8) -> Option<(f64, f64)> {
    let pixels: Vec<(usize, usize)> =
        labels.iter().enumerate().filter(|(_, &l)| l == k).map(|(i, _)| (i / size, i % size)).collect();
    if pixels.is_empty() {
        return None;
    }
    let n = pixels.len() as f64;
    let row = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let col = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let (ri, ci) = (row.round() as usize, col.round() as usize);
    if labels[ri * size + ci] == k {
        return Some((row, col));
    }
    pixels
        .iter()
        .min_by(|a, b| {
            let d = |p: &&(usize, usize)| (p.0 as f64 - row).powi(2) + (p.1 as f64 - col).powi(2);
            d(a).total_cmp(&d(b))
        })
        .map(|&(r, c)| (r as f64, c as f64))
}

fn keypoints_of(labels: &[u8], size: usize, num_parts: usize) -> Vec<Option<(f64, f64)>> {
    (1..=num_parts).map(|k| mask_keypoint(labels, size, k as u8)).collect()
}

/// Renders instance `instance_seed` in pose `pose_seed`.
///
/// Colors are averaged over 2x2 subpixel samples; labels are the hard
/// rasterization at pixel centers.
pub fn render_sprite(spec: &SpriteSpec, instance_seed: u64, pose_seed: u64) -> Result<Sample> {
    spec.validate()?;
    let s = spec.image_size;
    for k in 0..spec.num_parts {
        if (spec.part_widths[k] * s as f64) < 1.0 || (spec.part_lengths[k] * s as f64) < 1.0 {
            return Err(Error::DegenerateSprite(format!(
                "part {} is {:.2} x {:.2} px at {s} px, under one pixel",
                k + 1,
                spec.part_lengths[k] * s as f64,
                spec.part_widths[k] * s as f64
            )));
        }
    }
    let look = Appearance::sample(instance_seed, spec);
    let parts = skeleton(spec, pose_seed);
    let mut noise_rng = look.noise_seed.map(ChaCha8Rng::seed_from_u64);
    let mut image = Array::<f32>::zeros(&[3, s, s]);
    let mut labels = vec![0u8; s * s];
    for y in 0..s {
        for x in 0..s {
            let mut bg = look.background;
            if let Some(rng) = noise_rng.as_mut() {
                let jitter = rng.gen_range(-0.08..0.08);
                bg = bg.map(|c| c + jitter);
            }
            let mut rgb = [0.0; 3];
            for (sy, sx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let color = match label_at(&parts, x as f64 + sx, y as f64 + sy) {
                    0 => bg,
                    k => look.part_colors[k as usize - 1],
                };
                for c in 0..3 {
                    rgb[c] += color[c] / 4.0;
                }
            }
            for c in 0..3 {
                image.data_mut()[(c * s + y) * s + x] = rgb[c].clamp(0.0, 1.0) as f32;
            }
            labels[y * s + x] = label_at(&parts, x as f64 + 0.5, y as f64 + 0.5);
        }
    }
    let keypoints = keypoints_of(&labels, s, spec.num_parts);
    Ok(Sample { image, labels, keypoints, instance_id: instance_seed, pose_seed })
}

/// Two poses of one instance.
pub fn generate_sprite_pair(seed: u64, spec: &SpriteSpec) -> Result<(Sample, Sample)> {
    Ok((render_sprite(spec, seed, derive_seed(seed, 1))?, render_sprite(spec, seed, derive_seed(seed, 2))?))
}

/// Thin-plate-spline warp defined on a `grid x grid` lattice over `[0, 1]^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct TpsParams {
    pub grid: usize,
    /// `(dx, dy)` per control point, row-major, in units of the image side.
    pub displacements: Vec<[f64; 2]>,
    /// Ridge added to the kernel block.
    pub regularization: f64,
}

pub const TPS_RIDGE: f64 = 1e-6;
pub const TPS_GRID: usize = 5;

impl TpsParams {
    pub fn identity(grid: usize) -> Self {
        TpsParams { grid, displacements: vec![[0.0; 2]; grid * grid], regularization: TPS_RIDGE }
    }

    /// Displacement components drawn uniformly from `[-max_disp, max_disp]`.
    pub fn random(grid: usize, max_disp: f64, rng: &mut impl Rng) -> Self {
        let displacements = (0..grid * grid)
            .map(|_| {
                if max_disp > 0.0 {
                    [rng.gen_range(-max_disp..=max_disp), rng.gen_range(-max_disp..=max_disp)]
                } else {
                    [0.0; 2]
                }
            })
            .collect();
        TpsParams { grid, displacements, regularization: TPS_RIDGE }
    }

    pub fn control_points(&self) -> Vec<[f64; 2]> {
        let g = self.grid;
        let step = if g > 1 { 1.0 / (g - 1) as f64 } else { 0.0 };
        (0..g * g).map(|i| [(i % g) as f64 * step, (i / g) as f64 * step]).collect()
    }
}

fn tps_kernel(r2: f64) -> f64 {
    if r2 > 0.0 {
        0.5 * r2 * r2.ln()
    } else {
        0.0
    }
}

/// Fitted interpolant `f(p) = a + B p + Σ w_j U(|p − c_j|)` for each output component.
#[derive(Clone, Debug)]
pub struct TpsInterpolant {
    centers: Vec<[f64; 2]>,
    weights: Vec<[f64; 2]>,
    affine: [[f64; 2]; 3],
}

impl TpsInterpolant {
    pub fn fit(centers: &[[f64; 2]], values: &[[f64; 2]], regularization: f64) -> Result<Self> {
        let n = centers.len();
        if n != values.len() {
            return Err(Error::Shape(format!("{n} control points but {} displacements", values.len())));
        }
        if regularization < 0.0 || !regularization.is_finite() {
            return Err(Error::Config(format!("TPS regularization must be >= 0, got {regularization}")));
        }
        if n < 3 || collinear(centers) {
            return Err(Error::SingularTps(format!(
                "{n} control points are collinear; the affine part is undetermined"
            )));
        }
        let m = n + 3;
        let mut a = DMatrix::<f64>::zeros(m, m);
        for i in 0..n {
            for j in 0..n {
                let d2 = (centers[i][0] - centers[j][0]).powi(2) + (centers[i][1] - centers[j][1]).powi(2);
                a[(i, j)] = tps_kernel(d2);
            }
            a[(i, i)] += regularization;
            let p = [1.0, centers[i][0], centers[i][1]];
            for (k, &pk) in p.iter().enumerate() {
                a[(i, n + k)] = pk;
                a[(n + k, i)] = pk;
            }
        }
        let lu = a.lu();
        let solve = |component: usize| -> Result<DVector<f64>> {
            let rhs = DVector::from_fn(m, |i, _| if i < n { values[i][component] } else { 0.0 });
            lu.solve(&rhs)
                .filter(|x| x.iter().all(|v| v.is_finite()))
                .ok_or_else(|| Error::SingularTps(format!("{n} control points with regularization {regularization}")))
        };
        let (sx, sy) = (solve(0)?, solve(1)?);
        Ok(TpsInterpolant {
            centers: centers.to_vec(),
            weights: (0..n).map(|i| [sx[i], sy[i]]).collect(),
            affine: [[sx[n], sy[n]], [sx[n + 1], sy[n + 1]], [sx[n + 2], sy[n + 2]]],
        })
    }

    pub fn eval(&self, p: [f64; 2]) -> [f64; 2] {
        let mut out = [
            self.affine[0][0] + self.affine[1][0] * p[0] + self.affine[2][0] * p[1],
            self.affine[0][1] + self.affine[1][1] * p[0] + self.affine[2][1] * p[1],
        ];
        for (c, w) in self.centers.iter().zip(&self.weights) {
            let u = tps_kernel((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2));
            out[0] += w[0] * u;
            out[1] += w[1] * u;
        }
        out
    }
}

fn collinear(points: &[[f64; 2]]) -> bool {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        sxx += (p[0] - mx).powi(2);
        syy += (p[1] - my).powi(2);
        sxy += (p[0] - mx) * (p[1] - my);
    }
    let det = sxx * syy - sxy * sxy;
    det <= 1e-12 * (sxx + syy).powi(2).max(f64::MIN_POSITIVE)
}

/// Source pixel coordinates `(x, y)` for every output pixel of an `h x w` image.
fn tps_sources(params: &TpsParams, h: usize, w: usize) -> Result<Vec<(f64, f64)>> {
    if params.displacements.len() != params.grid * params.grid {
        return Err(Error::Shape(format!(
            "{} displacements for a {}x{} grid",
            params.displacements.len(),
            params.grid,
            params.grid
        )));
    }
    let tps = TpsInterpolant::fit(&params.control_points(), &params.displacements, params.regularization)?;
    let sx = (w.max(2) - 1) as f64;
    let sy = (h.max(2) - 1) as f64;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let d = tps.eval([x as f64 / sx, y as f64 / sy]);
            out.push((x as f64 + d[0] * sx, y as f64 + d[1] * sy));
        }
    }
    Ok(out)
}

/// Resamples a `[C, H, W]` image through the warp: output pixel `p` reads the
/// input at `p + f(p)`, bilinearly, replicating the border.
pub fn tps_warp(image: &Array<f32>, params: &TpsParams) -> Result<Array<f32>> {
    let [c, h, w] = image.shape() else {
        return Err(Error::Shape(format!("expected [C, H, W], got {:?}", image.shape())));
    };
    let (c, h, w) = (*c, *h, *w);
    let sources = tps_sources(params, h, w)?;
    let mut out = Array::zeros(&[c, h, w]);
    let src = image.data();
    for (i, &(x, y)) in sources.iter().enumerate() {
        let x = x.clamp(0.0, (w - 1) as f64);
        let y = y.clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        for ch in 0..c {
            let at = |yy: usize, xx: usize| src[(ch * h + yy) * w + xx] as f64;
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.data_mut()[ch * h * w + i] = (top * (1.0 - fy) + bottom * fy) as f32;
        }
    }
    Ok(out)
}

/// Nearest-neighbour warp of a label map, so classes stay disjoint.
pub fn tps_warp_labels(labels: &[u8], h: usize, w: usize, params: &TpsParams) -> Result<Vec<u8>> {
    let sources = tps_sources(params, h, w)?;
    Ok(sources
        .iter()
        .map(|&(x, y)| {
            let xi = x.round().clamp(0.0, (w - 1) as f64) as usize;
            let yi = y.round().clamp(0.0, (h - 1) as f64) as usize;
            labels[yi * w + xi]
        })
        .collect())
}

fn warp_sample(sample: &Sample, params: &TpsParams, pose_seed: u64) -> Result<Sample> {
    let s = sample.size();
    let labels = tps_warp_labels(&sample.labels, s, s, params)?;
    Ok(Sample {
        image: tps_warp(&sample.image, params)?,
        keypoints: keypoints_of(&labels, s, sample.keypoints.len()),
        labels,
        instance_id: sample.instance_id,
        pose_seed,
    })
}

/// Two independent warps of one sample. Keypoints are re-derived from the
/// warped masks so they stay inside them.
pub fn make_tps_pair(sample: &Sample, seed: u64, max_disp: f64) -> Result<(Sample, Sample)> {
    if !(max_disp >= 0.0 && max_disp.is_finite()) {
        return Err(Error::Config(format!("max_disp must be >= 0, got {max_disp}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = TpsParams::random(TPS_GRID, max_disp, &mut rng);
    let b = TpsParams::random(TPS_GRID, max_disp, &mut rng);
    Ok((warp_sample(sample, &a, derive_seed(seed, 1))?, warp_sample(sample, &b, derive_seed(seed, 2))?))
}

/// How a split's views are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairMode {
    /// Independent joint angles per view.
    Articulated,
    /// One rendered view warped twice.
    Tps,
}

impl FromStr for PairMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "articulated" => Ok(PairMode::Articulated),
            "tps" => Ok(PairMode::Tps),
            _ => Err(Error::Config(format!("unknown pair_mode `{s}`"))),
        }
    }
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Generator configuration, one key-value file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub seed: u64,
    pub sprite: SpriteSpec,
    pub pair_mode: PairMode,
    pub max_disp: f64,
    pub poses_per_instance: usize,
    pub train_instances: usize,
    pub val_instances: usize,
    pub test_instances: usize,
}

impl Default for DataConfig {
    /// 2000 training pairs of 3-part sprites at 64 px.
    fn default() -> Self {
        DataConfig {
            seed: 0,
            sprite: SpriteSpec::default(),
            pair_mode: PairMode::Articulated,
            max_disp: 0.1,
            poses_per_instance: 2,
            train_instances: 2000,
            val_instances: 100,
            test_instances: 200,
        }
    }
}

impl DataConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let sprite = &mut self.sprite;
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "num_parts" => {
                let n: usize = parse_value(key, value)?;
                let size = sprite.image_size;
                let range = sprite.angle_range;
                *sprite = SpriteSpec { angle_range: range, ..SpriteSpec::with_parts(n, size) };
            }
            "part_lengths" => sprite.part_lengths = parse_list(key, value)?,
            "part_widths" => sprite.part_widths = parse_list(key, value)?,
            "angle_range" => sprite.angle_range = parse_value(key, value)?,
            "palette_mode" => sprite.palette_mode = value.parse()?,
            "background" => sprite.background = value.parse()?,
            "image_size" => sprite.image_size = parse_value(key, value)?,
            "pair_mode" => self.pair_mode = value.parse()?,
            "max_disp" => self.max_disp = parse_value(key, value)?,
            "poses_per_instance" => self.poses_per_instance = parse_value(key, value)?,
            "train_instances" => self.train_instances = parse_value(key, value)?,
            "val_instances" => self.val_instances = parse_value(key, value)?,
            "test_instances" => self.test_instances = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown data key `{other}`"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.0.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    pub fn validate(&self) -> Result<()> {
        self.sprite.validate()?;
        if self.pair_mode == PairMode::Articulated && self.poses_per_instance < 1 {
            return Err(Error::Config("poses_per_instance must be >= 1".into()));
        }
        if !(self.max_disp >= 0.0 && self.max_disp.is_finite()) {
            return Err(Error::Config(format!("max_disp must be >= 0, got {}", self.max_disp)));
        }
        if self.sprite.num_parts > 254 {
            return Err(Error::Config("at most 254 parts fit an 8-bit label map".into()));
        }
        Ok(())
    }

    pub fn instances(&self, split: &str) -> Result<usize> {
        match split {
            "train" => Ok(self.train_instances),
            "val" => Ok(self.val_instances),
            "test" => Ok(self.test_instances),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }

    /// Views of instance `index` in `split`; a pure function of the seed.
    pub fn instance(&self, split: &str, index: usize) -> Result<Vec<Sample>> {
        let tag = SPLITS.iter().position(|s| *s == split).ok_or_else(|| Error::Config(format!("unknown split `{split}`")))?;
        let instance_seed = derive_seed(derive_seed(self.seed, tag as u64 + 1), index as u64);
        match self.pair_mode {
            PairMode::Articulated => (0..self.poses_per_instance)
                .map(|j| render_sprite(&self.sprite, instance_seed, derive_seed(instance_seed, j as u64 + 1)))
                .collect(),
            PairMode::Tps => {
                let base = render_sprite(&self.sprite, instance_seed, derive_seed(instance_seed, 1))?;
                let (a, b) = make_tps_pair(&base, derive_seed(instance_seed, 2), self.max_disp)?;
                Ok(vec![a, b])
            }
        }
    }

    pub fn split(&self, split: &str) -> Result<Vec<Vec<Sample>>> {
        self.validate()?;
        (0..self.instances(split)?).map(|i| self.instance(split, i)).collect()
    }
}

/// One stored view, channel-major 8-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub pixels: Vec<u8>,
    pub labels: Option<Vec<u8>>,
    pub keypoints: Vec<Option<(f64, f64)>>,
}

/// Quantizes `[0, 1]` values to 8 bits.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Batch of pairs: `x1` and `x2` are `[3, B, H, W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePairs {
    pub x1: Array<f32>,
    pub x2: Array<f32>,
}

/// Instances with two or more views each, ready for pair sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    pub image_size: usize,
    /// Number of foreground classes in the label maps.
    pub num_classes: usize,
    pub instances: Vec<Vec<View>>,
    /// Class relabelling applied to masks on horizontal flips.
    pub flip_classes: Option<Vec<u8>>,
}

impl PairDataset {
    pub fn from_samples(samples: Vec<Vec<Sample>>) -> Result<Self> {
        let first = samples
            .iter()
            .flatten()
            .next()
            .ok_or_else(|| Error::EmptyDataset("no samples".into()))?;
        let image_size = first.size();
        let num_classes = first.keypoints.len();
        let instances = samples
            .into_iter()
            .map(|views| {
                views
                    .into_iter()
                    .map(|s| View { pixels: s.image.data().iter().map(|&v| quantize(v)).collect(), labels: Some(s.labels), keypoints: s.keypoints })
                    .collect()
            })
            .collect();
        Ok(PairDataset { image_size, num_classes, instances, flip_classes: None })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Draws `batch_size` pairs of distinct views of random instances; both
    /// views of a pair share one flip decision.
    pub fn sample_batch(&self, rng: &mut ChaCha8Rng, batch_size: usize, flip_prob: f64) -> Result<ImagePairs> {
        Ok(self.sample_batch_with_masks(rng, batch_size, flip_prob)?.0)
    }

    /// As [`Self::sample_batch`], also returning the pairs' label maps.
    #[allow(clippy::type_complexity)]
    pub fn sample_batch_with_masks(
        &self,
        rng: &mut ChaCha8Rng,
        batch_size: usize,
        flip_prob: f64,
    ) -> Result<(ImagePairs, Vec<[Option<Vec<u8>>; 2]>)> {
        if self.instances.iter().all(Vec::is_empty) {
            return Err(Error::EmptyDataset("dataset has no views".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let s = self.image_size;
        let plane = s * s;
        let mut x1 = Array::zeros(&[3, batch_size, s, s]);
        let mut x2 = Array::zeros(&[3, batch_size, s, s]);
        let mut masks = Vec::with_capacity(batch_size);
        for b in 0..batch_size {
            let views = loop {
                let v = &self.instances[rng.gen_range(0..self.instances.len())];
                if !v.is_empty() {
                    break v;
                }
            };
            let first = rng.gen_range(0..views.len());
            let second = if views.len() > 1 {
                let j = rng.gen_range(0..views.len() - 1);
                if j >= first { j + 1 } else { j }
            } else {
                first
            };
            let flip = rng.gen::<f64>() < flip_prob;
            let mut pair_masks = [None, None];
            for (slot, (view, target)) in [(&views[first], &mut x1), (&views[second], &mut x2)].into_iter().enumerate() {
                for c in 0..3 {
                    for y in 0..s {
                        for x in 0..s {
                            let sx = if flip { s - 1 - x } else { x };
                            target.data_mut()[(c * batch_size + b) * plane + y * s + x] =
                                view.pixels[c * plane + y * s + sx] as f32 / 255.0;
                        }
                    }
                }
                pair_masks[slot] = view.labels.as_ref().map(|l| {
                    (0..plane)
                        .map(|i| {
                            let (y, x) = (i / s, i % s);
                            let v = l[y * s + if flip { s - 1 - x } else { x }];
                            match (&self.flip_classes, flip) {
                                (Some(table), true) => table.get(v as usize).copied().unwrap_or(v),
                                _ => v,
                            }
                        })
                        .collect()
                });
            }
            masks.push(pair_masks);
        }
        Ok((ImagePairs { x1, x2 }, masks))
    }

    /// Every view with its ground truth, for calibration and evaluation.
    pub fn labeled(&self) -> Result<LabeledSet> {
        let s = self.image_size;
        let mut items = Vec::new();
        for view in self.instances.iter().flatten() {
            let labels = view.labels.clone().ok_or_else(|| Error::EmptyDataset("views without masks".into()))?;
            items.push(LabeledImage {
                image: Array::from_vec(&[3, 1, s, s], view.pixels.iter().map(|&p| p as f32 / 255.0).collect()),
                labels,
                keypoints: view.keypoints.clone(),
            });
        }
        if items.is_empty() {
            return Err(Error::EmptyDataset("no labeled views".into()));
        }
        Ok(LabeledSet { image_size: s, num_classes: self.num_classes, items })
    }
}

/// Endless deterministic stream of batches.
pub struct PairIter<'a> {
    data: &'a PairDataset,
    rng: ChaCha8Rng,
    batch_size: usize,
    flip_prob: f64,
}

impl Iterator for PairIter<'_> {
    type Item = ImagePairs;

    fn next(&mut self) -> Option<ImagePairs> {
        self.data.sample_batch(&mut self.rng, self.batch_size, self.flip_prob).ok()
    }
}

pub fn iterate_pairs(data: &PairDataset, batch_size: usize, flip_prob: f64, seed: u64) -> Result<PairIter<'_>> {
    if data.instances.iter().all(Vec::is_empty) {
        return Err(Error::EmptyDataset("dataset has no views".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&flip_prob) {
        return Err(Error::Config(format!("flip_prob must lie in [0, 1], got {flip_prob}")));
    }
    Ok(PairIter { data, rng: ChaCha8Rng::seed_from_u64(seed), batch_size, flip_prob })
}

fn view_paths(dir: &Path, pose: usize) -> (PathBuf, PathBuf, PathBuf) {
    (dir.join(format!("{pose:02}.png")), dir.join(format!("{pose:02}.mask.png")), dir.join(format!("{pose:02}.kps.csv")))
}

/// Writes one split as `root/<split>/<instance>/<pose>.png` with sibling
/// `.mask.png` and `.kps.csv`. Returns the number of images written.
pub fn write_split(root: &Path, split: &str, samples: &[Vec<Sample>]) -> Result<usize> {
    let mut count = 0;
    for (i, views) in samples.iter().enumerate() {
        let dir = root.join(split).join(format!("{i:05}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (j, sample) in views.iter().enumerate() {
            let s = sample.size();
            let (img_path, mask_path, kps_path) = view_paths(&dir, j);
            let mut img = RgbImage::new(s, s);
            for y in 0..s {
                for x in 0..s {
                    let px = |c: usize| quantize(sample.image.data()[(c * s + y) * s + x]);
                    img.put(x, y, [px(0), px(1), px(2)]);
                }
            }
            imageio::write_rgb(&img_path, &img)?;
            let palette = imageio::label_palette(sample.keypoints.len() + 1);
            imageio::write_indexed(&mask_path, s, s, &sample.labels, &palette)?;
            let csv: String = sample
                .keypoints
                .iter()
                .enumerate()
                .filter_map(|(k, kp)| kp.map(|(r, c)| format!("{},{r},{c}\n", k + 1)))
                .collect();
            std::fs::write(&kps_path, csv).map_err(|e| Error::io(&kps_path, e))?;
            count += 1;
        }
    }
    Ok(count)
}

/// Generates and writes every split; returns image counts per split.
pub fn write_dataset(root: &Path, cfg: &DataConfig) -> Result<Vec<(String, usize)>> {
    cfg.validate()?;
    SPLITS.iter().map(|&split| Ok((split.to_owned(), write_split(root, split, &cfg.split(split)?)?))).collect()
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    Ok(entries)
}

fn parse_keypoints(path: &Path, num_classes: usize) -> Result<Vec<Option<(f64, f64)>>> {
    let mut kps = vec![None; num_classes];
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Format(format!("{}:{}: expected `class_id,row,col`", path.display(), n + 1));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [k, r, c] = fields.as_slice() else { return Err(bad()) };
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 || k > num_classes {
            return Err(bad());
        }
        kps[k - 1] = Some((r.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?));
    }
    Ok(kps)
}

/// Loads `root/<split>`; masks and keypoints are optional per view. The class
/// count is the largest label seen.
pub fn load_split(root: &Path, split: &str) -> Result<PairDataset> {
    let dir = root.join(split);
    if !dir.is_dir() {
        return Err(Error::EmptyDataset(format!("missing split directory {}", dir.display())));
    }
    let mut raw: Vec<Vec<(RgbImage, Option<Vec<u8>>, Option<PathBuf>)>> = Vec::new();
    let mut size = None;
    let mut max_label = 0u8;
    for inst in sorted_entries(&dir)?.into_iter().filter(|p| p.is_dir()) {
        let mut views = Vec::new();
        for path in sorted_entries(&inst)? {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if !name.ends_with(".png") || name.ends_with(".mask.png") {
                continue;
            }
            let img = imageio::read_rgb(&path)?;
            if img.width != img.height || size.is_some_and(|s| s != img.width) {
                return Err(Error::Format(format!("{}: images must be square and equally sized", path.display())));
            }
            size = Some(img.width);
            let stem = name.trim_end_matches(".png");
            let mask_path = inst.join(format!("{stem}.mask.png"));
            let labels = if mask_path.exists() {
                let (w, h, l) = imageio::read_labels(&mask_path)?;
                if (w, h) != (img.width, img.height) {
                    return Err(Error::Format(format!("{}: mask size differs from image", mask_path.display())));
                }
                max_label = max_label.max(l.iter().copied().max().unwrap_or(0));
                Some(l)
            } else {
                None
            };
            let kps_path = inst.join(format!("{stem}.kps.csv"));
            views.push((img, labels, kps_path.exists().then_some(kps_path)));
        }
        if !views.is_empty() {
            raw.push(views);
        }
    }
    let image_size = size.ok_or_else(|| Error::EmptyDataset(format!("no images under {}", dir.display())))?;
    let num_classes = max_label as usize;
    let mut instances = Vec::with_capacity(raw.len());
    for views in raw {
        let mut out = Vec::with_capacity(views.len());
        for (img, labels, kps) in views {
            let plane = image_size * image_size;
            let mut pixels = vec![0u8; 3 * plane];
            for (i, px) in img.pixels.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    pixels[c * plane + i] = px[c];
                }
            }
            let keypoints = match kps {
                Some(p) => parse_keypoints(&p, num_classes)?,
                None => vec![None; num_classes],
            };
            out.push(View { pixels, labels, keypoints });
        }
        instances.push(out);
    }
    Ok(PairDataset { image_size, num_classes, instances, flip_classes: None })
}

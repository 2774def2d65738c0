//! Part-based generation: segment `x1` from its shape code, pool per-part
//! appearance codes from `x2` under its own segmentation, spread them back
//! over `x1`'s segmentation and reconstruct `x1`.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::mi;
use crate::nets::{Bound, Model};
use crate::priors::{self, SegmentationMap};
use crate::tensor::{Array, Real};

/// Reconstruction likelihood.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReconMode {
    /// Gaussian negative log-likelihood up to a constant.
    PixelL2,
    /// Pixel term over an octave pyramid plus first-order gradient maps.
    Perceptual { octaves: usize },
}

impl Default for ReconMode {
    fn default() -> Self {
        ReconMode::Perceptual { octaves: 3 }
    }
}

impl FromStr for ReconMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel_l2" => Ok(ReconMode::PixelL2),
            "perceptual" => Ok(ReconMode::default()),
            other => match other.strip_prefix("perceptual:") {
                Some(n) => n
                    .parse()
                    .ok()
                    .filter(|&n: &usize| n >= 1)
                    .map(|octaves| ReconMode::Perceptual { octaves })
                    .ok_or_else(|| Error::Config(format!("bad octave count in `{other}`"))),
                None => Err(Error::Config(format!("unknown reconstruction mode `{other}`"))),
            },
        }
    }
}

impl std::fmt::Display for ReconMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ReconMode::PixelL2 => f.write_str("pixel_l2"),
            ReconMode::Perceptual { octaves } => write!(f, "perceptual:{octaves}"),
        }
    }
}

/// Names of the loss components, in reporting order.
pub const LOSS_NAMES: [&str; 5] = ["rec", "kl_pi", "gmrf", "entropy", "adv_penalty"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PipelineOptions {
    pub recon_mode: ReconMode,
    /// Appearance branch segmentation carries no gradient.
    pub detach_s2: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions { recon_mode: ReconMode::default(), detach_s2: true }
    }
}

/// Loss terms of one training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t, T> {
    pub rec: Var<'t, T>,
    pub kl_pi: Var<'t, T>,
    pub gmrf: Var<'t, T>,
    pub entropy: Var<'t, T>,
    pub adv_penalty: Var<'t, T>,
}

impl<'t, T: Real> LossTerms<'t, T> {
    pub fn values(&self) -> BTreeMap<String, f64> {
        LOSS_NAMES
            .iter()
            .zip([self.rec, self.kl_pi, self.gmrf, self.entropy, self.adv_penalty])
            .map(|(n, v)| (n.to_string(), v.item().as_f64()))
            .collect()
    }
}

/// Recorded training forward pass.
pub struct ForwardGraph<'t, T> {
    pub pi_mean: Var<'t, T>,
    pub pi_logvar: Var<'t, T>,
    /// Reparameterized shape sample fed to the mask decoder and the adversary.
    pub pi_sample: Var<'t, T>,
    pub logits1: Var<'t, T>,
    pub probs1: Var<'t, T>,
    pub logits2: Var<'t, T>,
    pub probs2: Var<'t, T>,
    pub alpha_parts: Var<'t, T>,
    pub appearance_map: Var<'t, T>,
    pub recon: Var<'t, T>,
    /// Adversary logits on joint `(π, α)` pairs.
    pub t_joint: Var<'t, T>,
    pub losses: LossTerms<'t, T>,
}

/// Values of a training forward pass.
#[derive(Clone, Debug)]
pub struct ForwardResult<T> {
    pub recon: Array<T>,
    pub seg1: SegmentationMap<T>,
    pub seg2: SegmentationMap<T>,
    pub codes: crate::nets::LatentCodes<T>,
    pub losses: BTreeMap<String, f64>,
}

impl<T: Real> ForwardGraph<'_, T> {
    pub fn result(&self) -> ForwardResult<T> {
        let seg = |l: Var<'_, T>, p: Var<'_, T>| SegmentationMap {
            logits: l.value().as_ref().clone(),
            probs: p.value().as_ref().clone(),
        };
        ForwardResult {
            recon: self.recon.value().as_ref().clone(),
            seg1: seg(self.logits1, self.probs1),
            seg2: seg(self.logits2, self.probs2),
            codes: crate::nets::LatentCodes {
                pi_mean: self.pi_mean.value().as_ref().clone(),
                pi_logvar: self.pi_logvar.value().as_ref().clone(),
                alpha_parts: self.alpha_parts.value().as_ref().clone(),
            },
            losses: self.losses.values(),
        }
    }
}

fn check_image<T: Real>(model: &Model<T>, x: &Array<T>) -> Result<usize> {
    let s = model.config.image_size;
    match x.shape() {
        [3, b, h, w] if *h == s && *w == s && *b > 0 => Ok(*b),
        other => Err(Error::Shape(format!("expected an image batch [3, B, {s}, {s}], got {other:?}"))),
    }
}

/// Segmentation from the posterior mean of the shape code.
pub fn infer_segmentation<T: Real>(model: &Model<T>, x: &Array<T>) -> Result<SegmentationMap<T>> {
    check_image(model, x)?;
    let tape = Tape::new();
    let p = model.params.bind(&tape, |_| false);
    let (mean, _) = model.encode_shape(&p, tape.constant(x.clone()));
    let logits = model.decode_mask(&p, mean).value();
    SegmentationMap::from_logits(logits.as_ref().clone())
}

/// Appearance code of every part: `E_α(p_i ⊙ x)`, all parts in one batch.
/// Output `[dim_alpha, N*B, 1, 1]`, batch index `part * B + b`.
pub fn extract_part_appearances<'t, T: Real>(
    model: &Model<T>,
    p: &Bound<'t, T>,
    x: Var<'t, T>,
    probs: Var<'t, T>,
) -> Var<'t, T> {
    model.encode_appearance(p, x.mask_parts(probs))
}

/// `S_α(u, v) = Σ_i α⁽ⁱ⁾ p_i(u, v)` on plain arrays.
///
/// `probs` is `[N, B, H, W]`, `alphas` is `[D, N*B, 1, 1]`.
pub fn expected_appearance_map<T: Real>(probs: &Array<T>, alphas: &Array<T>) -> Result<Array<T>> {
    let (n, b, _, _) = probs.dims4();
    match alphas.shape() {
        [_, nb, 1, 1] if *nb == n * b => {}
        other => {
            return Err(Error::Shape(format!(
                "appearance codes {other:?} do not match {n} parts x batch {b}"
            )))
        }
    }
    let tape = Tape::new();
    Ok(tape.constant(alphas.clone()).mix_codes(tape.constant(probs.clone())).value().as_ref().clone())
}

/// Generator input: expected appearance map concatenated with the probabilities.
pub fn generator_input<'t, T: Real>(probs: Var<'t, T>, alphas: Var<'t, T>) -> (Var<'t, T>, Var<'t, T>) {
    let map = alphas.mix_codes(probs);
    (map, Var::concat_channels(&[map, probs]))
}

fn pixel_l2<'t, T: Real>(recon: Var<'t, T>, target: Var<'t, T>) -> Var<'t, T> {
    let b = recon.shape()[1];
    recon.sub(target).sum_squares().scale(0.5 / b as f64)
}

/// Reconstruction loss, averaged over the batch.
///
/// `PixelL2` is `½ Σ (recon − x)²` per image.
pub fn reconstruction_loss<'t, T: Real>(recon: Var<'t, T>, target: Var<'t, T>, mode: ReconMode) -> Var<'t, T> {
    match mode {
        ReconMode::PixelL2 => pixel_l2(recon, target),
        ReconMode::Perceptual { octaves } => {
            let (mut r, mut x) = (recon, target);
            let mut total = pixel_l2(r, x);
            for o in 0..octaves {
                if o > 0 {
                    if r.shape()[2] < 2 {
                        break;
                    }
                    r = r.avg_pool2x();
                    x = x.avg_pool2x();
                    total = total.add(pixel_l2(r, x));
                }
                for axis in 0..2 {
                    total = total.add(pixel_l2(r.forward_diff(axis), x.forward_diff(axis)));
                }
            }
            total
        }
    }
}

/// Plain-array reconstruction loss.
pub fn reconstruction_loss_value<T: Real>(recon: &Array<T>, target: &Array<T>, mode: ReconMode) -> Result<f64> {
    if recon.shape() != target.shape() || recon.shape().len() != 4 {
        return Err(Error::Shape(format!("reconstruction {:?} vs target {:?}", recon.shape(), target.shape())));
    }
    let tape = Tape::new();
    Ok(reconstruction_loss(tape.constant(recon.clone()), tape.constant(target.clone()), mode).item().as_f64())
}

/// Shape sample and global appearance code feeding the adversary, computed
/// without gradients: `(π, α)` as `[dim_pi, B, 1, 1]` and `[dim_alpha, B, 1, 1]`.
pub fn adversary_inputs<T: Real>(
    model: &Model<T>,
    x1: &Array<T>,
    x2: &Array<T>,
    noise: &Array<T>,
) -> Result<(Array<T>, Array<T>)> {
    check_image(model, x1)?;
    check_image(model, x2)?;
    let tape = Tape::new();
    let p = model.params.bind(&tape, |_| false);
    let (mean, logvar) = model.encode_shape(&p, tape.constant(x1.clone()));
    let pi = priors::reparameterize(mean, logvar, noise);
    let alpha = model.encode_appearance(&p, tape.constant(x2.clone()));
    Ok((pi.value().as_ref().clone(), alpha.value().as_ref().clone()))
}

/// Records the training forward pass on `tape`.
///
/// `p` decides which groups are trainable; the adversary is always evaluated
/// with frozen parameters. `alpha_global` is the appearance code of the whole
/// `x2` fed to the adversary (as returned by [`adversary_inputs`]).
#[allow(clippy::too_many_arguments)]
pub fn forward_train<'t, T: Real>(
    model: &Model<T>,
    tape: &'t Tape<T>,
    p: &Bound<'t, T>,
    x1: &Array<T>,
    x2: &Array<T>,
    noise: &Array<T>,
    alpha_global: &Array<T>,
    opts: PipelineOptions,
) -> Result<ForwardGraph<'t, T>> {
    let b = check_image(model, x1)?;
    if check_image(model, x2)? != b {
        return Err(Error::Shape("x1 and x2 batch sizes differ".into()));
    }
    let d = model.config.dim_pi;
    if noise.shape() != [d, b, 1, 1] {
        return Err(Error::Shape(format!("noise must be [{d}, {b}, 1, 1], got {:?}", noise.shape())));
    }
    let frozen = model.params.bind(tape, |_| false);
    let x1v = tape.constant(x1.clone());
    let x2v = tape.constant(x2.clone());

    let (pi_mean, pi_logvar) = model.encode_shape(p, x1v);
    let pi_sample = priors::reparameterize(pi_mean, pi_logvar, noise);
    let logits1 = model.decode_mask(p, pi_sample);
    let probs1 = logits1.softmax_channels();

    let s2_params = if opts.detach_s2 { &frozen } else { p };
    let (mean2, _) = model.encode_shape(s2_params, x2v);
    let logits2 = model.decode_mask(s2_params, mean2);
    let probs2 = logits2.softmax_channels();

    let alpha_parts = extract_part_appearances(model, p, x2v, probs2);
    let (appearance_map, g_in) = generator_input(probs1, alpha_parts);
    let recon = model.generate(p, g_in);

    let alpha_const = tape.constant(alpha_global.clone());
    let t_joint = model.adversary(&frozen, pi_sample, alpha_const);

    let losses = LossTerms {
        rec: reconstruction_loss(recon, x1v, opts.recon_mode),
        kl_pi: priors::gaussian_kl_loss(pi_mean, pi_logvar),
        gmrf: priors::gmrf_kl_loss(logits1),
        entropy: priors::entropy_loss(probs1),
        adv_penalty: mi::mi_penalty(t_joint),
    };
    Ok(ForwardGraph {
        pi_mean,
        pi_logvar,
        pi_sample,
        logits1,
        probs1,
        logits2,
        probs2,
        alpha_parts,
        appearance_map,
        recon,
        t_joint,
        losses,
    })
}

fn validate_parts(active: &[usize], n: usize) -> Result<()> {
    match active.iter().find(|&&i| i >= n) {
        Some(i) => Err(Error::Config(format!("part id {i} out of range 0..{n}"))),
        None => Ok(()),
    }
}

/// Generates `x_pose`'s shape with appearance codes of `active` parts (0-based
/// ids) taken from `x_app` and the rest from `x_pose`.
pub fn transfer_appearance<T: Real>(
    model: &Model<T>,
    x_pose: &Array<T>,
    x_app: &Array<T>,
    active: &[usize],
) -> Result<Array<T>> {
    let b = check_image(model, x_pose)?;
    if check_image(model, x_app)? != b {
        return Err(Error::Shape("pose and appearance batches differ".into()));
    }
    let n = model.config.num_parts;
    validate_parts(active, n)?;
    let tape = Tape::new();
    let p = model.params.bind(&tape, |_| false);
    let segment = |x: &Array<T>| {
        let (mean, _) = model.encode_shape(&p, tape.constant(x.clone()));
        model.decode_mask(&p, mean).softmax_channels()
    };
    let pose_v = tape.constant(x_pose.clone());
    let probs_pose = segment(x_pose);
    let alpha_pose = extract_part_appearances(model, &p, pose_v, probs_pose).value();
    let mut alphas = alpha_pose.as_ref().clone();
    if !active.is_empty() {
        let probs_app = segment(x_app);
        let alpha_app = extract_part_appearances(model, &p, tape.constant(x_app.clone()), probs_app).value();
        let (dim, nb, _, _) = alphas.dims4();
        for &part in active {
            for d in 0..dim {
                for bi in 0..b {
                    let i = d * nb + part * b + bi;
                    alphas.data_mut()[i] = alpha_app.data()[i];
                }
            }
        }
    }
    let (_, g_in) = generator_input(probs_pose, tape.constant(alphas));
    Ok(model.generate(&p, g_in).value().as_ref().clone())
}

/// Plain autoencoding of `x`: its own segmentation and part appearances.
pub fn reconstruct<T: Real>(model: &Model<T>, x: &Array<T>) -> Result<Array<T>> {
    transfer_appearance(model, x, x, &[])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{NetConfig, NetGroup};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> NetConfig {
        NetConfig {
            image_size: 32,
            num_parts: 3,
            dim_alpha: 6,
            dim_pi: 4,
            width_multiplier: 0.125,
            adversary_width: 16,
            ..NetConfig::default()
        }
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Array<f64> {
        let n = shape.iter().product();
        Array::from_vec(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn one_hot_probs_select_part_code() {
        let mut probs = Array::<f64>::zeros(&[3, 1, 2, 2]);
        for i in 0..4 {
            probs.data_mut()[4 + i] = 1.0;
        }
        let alphas = Array::from_vec(&[2, 3, 1, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let map = expected_appearance_map(&probs, &alphas).unwrap();
        assert_eq!(map.data(), &[2.0, 2.0, 2.0, 2.0, 5.0, 5.0, 5.0, 5.0]);
    }

    #[test]
    fn uniform_probs_average_codes() {
        let probs = Array::<f64>::full(&[2, 1, 2, 2], 0.5);
        let alphas = Array::from_vec(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]);
        let map = expected_appearance_map(&probs, &alphas).unwrap();
        assert!(map.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn appearance_map_is_linear_in_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let probs = crate::autograd::softmax_channels(&random(&[3, 2, 3, 3], &mut rng));
        let a = random(&[4, 6, 1, 1], &mut rng);
        let b = random(&[4, 6, 1, 1], &mut rng);
        let sum = Array::from_vec(&[4, 6, 1, 1], a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect());
        let lhs = expected_appearance_map(&probs, &sum).unwrap();
        let ma = expected_appearance_map(&probs, &a).unwrap();
        let mb = expected_appearance_map(&probs, &b).unwrap();
        for i in 0..lhs.len() {
            assert!((lhs.data()[i] - ma.data()[i] - mb.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn appearance_map_rejects_mismatched_codes() {
        let probs = Array::<f64>::full(&[2, 1, 2, 2], 0.5);
        assert!(matches!(expected_appearance_map(&probs, &Array::zeros(&[2, 3, 1, 1])), Err(Error::Shape(_))));
    }

    #[test]
    fn pixel_l2_hand_value() {
        let zeros = Array::<f64>::zeros(&[3, 1, 2, 2]);
        let ones = Array::<f64>::full(&[3, 1, 2, 2], 1.0);
        assert_eq!(reconstruction_loss_value(&zeros, &ones, ReconMode::PixelL2).unwrap(), 6.0);
        assert_eq!(reconstruction_loss_value(&ones, &ones, ReconMode::PixelL2).unwrap(), 0.0);
        assert_eq!(reconstruction_loss_value(&ones, &ones, ReconMode::default()).unwrap(), 0.0);
    }

    #[test]
    fn perceptual_dominates_pixel_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[3, 2, 8, 8], &mut rng);
        let b = random(&[3, 2, 8, 8], &mut rng);
        let pixel = reconstruction_loss_value(&a, &b, ReconMode::PixelL2).unwrap();
        let perc = reconstruction_loss_value(&a, &b, ReconMode::Perceptual { octaves: 3 }).unwrap();
        assert!(perc >= pixel);
    }

    #[test]
    fn recon_mode_parsing() {
        assert_eq!("pixel_l2".parse::<ReconMode>().unwrap(), ReconMode::PixelL2);
        assert_eq!("perceptual:2".parse::<ReconMode>().unwrap(), ReconMode::Perceptual { octaves: 2 });
        assert!("vgg".parse::<ReconMode>().is_err());
        assert_eq!(ReconMode::Perceptual { octaves: 4 }.to_string().parse::<ReconMode>().unwrap(), ReconMode::Perceptual { octaves: 4 });
    }

    #[test]
    fn segmentation_is_simplex_and_deterministic() {
        let model = Model::<f64>::new(tiny(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let x = random(&[3, 2, 32, 32], &mut ChaCha8Rng::seed_from_u64(3));
        let s1 = infer_segmentation(&model, &x).unwrap();
        let s2 = infer_segmentation(&model, &x).unwrap();
        assert_eq!(s1.probs, s2.probs);
        let (n, b, h, w) = s1.probs.dims4();
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let s: f64 = (0..n).map(|i| s1.probs.at4(i, bi, y, xx)).sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
        assert!(infer_segmentation(&model, &Array::zeros(&[3, 1, 16, 16])).is_err());
    }

    #[test]
    fn full_and_empty_masks() {
        let model = Model::<f64>::new(tiny(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let x = random(&[3, 1, 32, 32], &mut ChaCha8Rng::seed_from_u64(5));
        let mut probs = Array::<f64>::zeros(&[3, 1, 32, 32]);
        for v in &mut probs.data_mut()[..32 * 32] {
            *v = 1.0;
        }
        let tape = Tape::new();
        let p = model.params.bind(&tape, |_| false);
        let masked = tape.constant(x.clone()).mask_parts(tape.constant(probs.clone())).value();
        // part 0 sees the whole image, parts 1 and 2 see zeros
        for c in 0..3 {
            for y in 0..32 {
                for xx in 0..32 {
                    assert_eq!(masked.at4(c, 0, y, xx), x.at4(c, 0, y, xx));
                    assert_eq!(masked.at4(c, 1, y, xx), 0.0);
                }
            }
        }
        let codes = extract_part_appearances(&model, &p, tape.constant(x), tape.constant(probs)).value();
        let zero_code = model.encode_appearance(&p, tape.constant(Array::zeros(&[3, 1, 32, 32]))).value();
        for d in 0..6 {
            assert_eq!(codes.at4(d, 1, 0, 0), zero_code.at4(d, 0, 0, 0));
            assert!(codes.at4(d, 2, 0, 0).is_finite());
        }
    }

    #[test]
    fn permuting_parts_permutes_codes() {
        let model = Model::<f64>::new(tiny(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[3, 2, 32, 32], &mut rng);
        let probs = crate::autograd::softmax_channels(&random(&[3, 2, 32, 32], &mut rng));
        let perm = [2usize, 0, 1];
        let plane = 2 * 32 * 32;
        let mut permuted = probs.clone();
        for (dst, &src) in perm.iter().enumerate() {
            permuted.data_mut()[dst * plane..(dst + 1) * plane].copy_from_slice(&probs.data()[src * plane..(src + 1) * plane]);
        }
        let tape = Tape::new();
        let p = model.params.bind(&tape, |_| false);
        let a = extract_part_appearances(&model, &p, tape.constant(x.clone()), tape.constant(probs)).value();
        let b = extract_part_appearances(&model, &p, tape.constant(x), tape.constant(permuted)).value();
        for (dst, &src) in perm.iter().enumerate() {
            for bi in 0..2 {
                for d in 0..6 {
                    assert!((b.at4(d, dst * 2 + bi, 0, 0) - a.at4(d, src * 2 + bi, 0, 0)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn transfer_identities() {
        let model = Model::<f64>::new(tiny(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[3, 1, 32, 32], &mut rng);
        let other = random(&[3, 1, 32, 32], &mut rng);
        let plain = reconstruct(&model, &x).unwrap();
        assert_eq!(transfer_appearance(&model, &x, &other, &[]).unwrap(), plain);
        assert_eq!(transfer_appearance(&model, &x, &x, &[0, 1, 2]).unwrap(), plain);
        assert!(transfer_appearance(&model, &x, &other, &[3]).is_err());
    }

    #[test]
    fn detaching_s2_changes_no_forward_value() {
        let model = Model::<f64>::new(tiny(), &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x1 = random(&[3, 2, 32, 32], &mut rng);
        let x2 = random(&[3, 2, 32, 32], &mut rng);
        let noise = random(&[4, 2, 1, 1], &mut rng);
        let (_, alpha) = adversary_inputs(&model, &x1, &x2, &noise).unwrap();
        let run = |detach_s2| {
            let tape = Tape::new();
            let p = model.params.bind(&tape, |g| g != NetGroup::Adversary);
            let opts = PipelineOptions { detach_s2, ..PipelineOptions::default() };
            let g = forward_train(&model, &tape, &p, &x1, &x2, &noise, &alpha, opts).unwrap();
            let r = g.result();
            (r.recon, r.losses, g.probs2.requires_grad())
        };
        let (ra, la, ga) = run(true);
        let (rb, lb, gb) = run(false);
        assert_eq!(ra, rb);
        assert_eq!(la, lb);
        assert!(!ga && gb);
        assert!(la.values().all(|v| v.is_finite()));
        assert!(la["rec"] > 0.0);
    }
}

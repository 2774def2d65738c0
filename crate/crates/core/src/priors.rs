//! Priors on the latent segmentation and on the shape posterior.
//!
//! Each quantity has a plain evaluation on [`Array`]s and a differentiable
//! batch version on [`Var`]s. Batch versions sum over parts and pixels and
//! average over the batch axis of a `[N, B, H, W]` map.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::autograd::{softmax_channels, Var};
use crate::error::{Error, Result};
use crate::tensor::{Array, Real};

/// Probabilities below this are clamped inside logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

/// Largest grid the dense GMRF oracle accepts.
pub const ORACLE_MAX_SIDE: usize = 5;

/// Logits and their per-pixel softmax over parts, both `[N, B, H, W]`.
#[derive(Clone, Debug)]
pub struct SegmentationMap<T> {
    pub logits: Array<T>,
    pub probs: Array<T>,
}

impl<T: Real> SegmentationMap<T> {
    pub fn from_logits(logits: Array<T>) -> Result<Self> {
        let probs = normalize_segmentation(&logits)?;
        Ok(SegmentationMap { logits, probs })
    }

    pub fn num_parts(&self) -> usize {
        self.probs.shape()[0]
    }

    /// Per-pixel argmax part of batch item `b`, row-major `H*W` (0-based).
    pub fn argmax(&self, b: usize) -> Vec<usize> {
        let (n, _, h, w) = self.probs.dims4();
        (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                (0..n)
                    .max_by(|&a, &c| {
                        self.probs.at4(a, b, y, x).partial_cmp(&self.probs.at4(c, b, y, x)).unwrap()
                            .then(c.cmp(&a))
                    })
                    .unwrap()
            })
            .collect()
    }
}

/// Diagonal Gaussian `N(mean, diag(exp(logvar)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
}

/// Regularizer pushing part probabilities toward one-hot assignments.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CategoricalRegularizer {
    #[default]
    Entropy,
    /// Reserved; selecting it is rejected by [`CategoricalRegularizer::ensure_supported`].
    CrossEntropy,
}

impl CategoricalRegularizer {
    pub fn ensure_supported(self) -> Result<()> {
        match self {
            CategoricalRegularizer::Entropy => Ok(()),
            CategoricalRegularizer::CrossEntropy => {
                Err(Error::Unsupported("cross_entropy segmentation regularizer is not implemented".into()))
            }
        }
    }
}

impl FromStr for CategoricalRegularizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(CategoricalRegularizer::Entropy),
            "cross_entropy" => Ok(CategoricalRegularizer::CrossEntropy),
            other => Err(Error::Config(format!("unknown categorical regularizer `{other}`"))),
        }
    }
}

/// Softmax over the part axis. Rejects NaN logits.
pub fn normalize_segmentation<T: Real>(logits: &Array<T>) -> Result<Array<T>> {
    if logits.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN in segmentation logits".into()));
    }
    Ok(softmax_channels(logits))
}

/// `Σ_i Σ_(u,v) ‖∇ l_i(u,v)‖²` with forward differences; the last row and
/// column contribute no difference along their axis.
pub fn gmrf_kl<T: Real>(logits: &Array<T>) -> T {
    let (_, _, h, w) = logits.dims4();
    let mut total = T::zero();
    for plane in logits.data().chunks(h * w) {
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x];
                if x + 1 < w {
                    let d = plane[y * w + x + 1] - v;
                    total = total + d * d;
                }
                if y + 1 < h {
                    let d = plane[(y + 1) * w + x] - v;
                    total = total + d * d;
                }
            }
        }
    }
    total
}

/// Batch-mean GMRF penalty on `[N, B, H, W]` logits.
pub fn gmrf_kl_loss<'t, T: Real>(logits: Var<'t, T>) -> Var<'t, T> {
    let l = logits.value();
    let (_, b, h, w) = l.dims4();
    let inv_b = T::lit(1.0 / b as f64);
    let value = Array::scalar(gmrf_kl(&l) * inv_b);
    logits.tape().custom(&[logits], value, move |g, sink| {
        let scale = T::lit(2.0) * g[0] * inv_b;
        let d = sink.grad(0);
        for (p, plane) in l.data().chunks(h * w).enumerate() {
            let dp = &mut d[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    if x + 1 < w {
                        let diff = (plane[i + 1] - plane[i]) * scale;
                        dp[i + 1] = dp[i + 1] + diff;
                        dp[i] = dp[i] - diff;
                    }
                    if y + 1 < h {
                        let diff = (plane[i + w] - plane[i]) * scale;
                        dp[i + w] = dp[i + w] + diff;
                        dp[i] = dp[i] - diff;
                    }
                }
            }
        }
    })
}

/// Dense forward-difference operator for an `h x w` grid: rows `0..hw` hold
/// horizontal differences, rows `hw..2hw` vertical ones (zero rows on the
/// last column/row).
pub fn difference_operator(h: usize, w: usize) -> DMatrix<f64> {
    let n = h * w;
    let mut op = DMatrix::zeros(2 * n, n);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                op[(i, i + 1)] = 1.0;
                op[(i, i)] = -1.0;
            }
            if y + 1 < h {
                op[(n + i, i + w)] = 1.0;
                op[(n + i, i)] = -1.0;
            }
        }
    }
    op
}

/// `½ fᵀ Q f` with `Q = Aᵀ A`, evaluated through the dense precision matrix.
pub fn precision_quadratic_form(f: &[f64], sqrt_precision: &DMatrix<f64>) -> f64 {
    let q = sqrt_precision.transpose() * sqrt_precision;
    let f = DVector::from_column_slice(f);
    0.5 * (f.transpose() * &q * &f)[(0, 0)]
}

/// KL of a unit-variance posterior around `f` to the zero-mean improper GMRF
/// with `Q^½ = ∇`, dropping the additive constant: `λ · ½ fᵀ Q f`.
///
/// Single-channel `h x w` grids up to 5x5 only.
pub fn gmrf_kl_oracle(f: &[f64], h: usize, w: usize, lambda: f64) -> Result<f64> {
    if h > ORACLE_MAX_SIDE || w > ORACLE_MAX_SIDE {
        return Err(Error::GridTooLarge { h, w });
    }
    if f.len() != h * w {
        return Err(Error::Shape(format!("oracle expects {} values, got {}", h * w, f.len())));
    }
    Ok(lambda * precision_quadratic_form(f, &difference_operator(h, w)))
}

/// Shannon entropy `-Σ p ln p` (natural log, `0 ln 0 = 0`), summed over
/// every pixel and part.
pub fn entropy_reg<T: Real>(probs: &Array<T>) -> T {
    let eps = T::lit(LOG_CLAMP);
    -probs
        .data()
        .iter()
        .map(|&p| if p > T::zero() { p * p.max(eps).ln() } else { T::zero() })
        .sum::<T>()
}

/// Batch-mean entropy of `[N, B, H, W]` probabilities.
pub fn entropy_loss<'t, T: Real>(probs: Var<'t, T>) -> Var<'t, T> {
    let p = probs.value();
    let (_, b, _, _) = p.dims4();
    let inv_b = T::lit(1.0 / b as f64);
    let value = Array::scalar(entropy_reg(&p) * inv_b);
    probs.tape().custom(&[probs], value, move |g, sink| {
        let eps = T::lit(LOG_CLAMP);
        let scale = g[0] * inv_b;
        for (d, &pv) in sink.grad(0).iter_mut().zip(p.data()) {
            let dh = if pv > eps { -(pv.ln() + T::one()) } else { -eps.ln() };
            *d = *d + dh * scale;
        }
    })
}

/// `KL(N(μ, diag σ²) ‖ N(0, I)) = ½ Σ (σ² + μ² − 1 − ln σ²)`.
pub fn gaussian_kl(post: &GaussianPosterior) -> f64 {
    post.mean
        .iter()
        .zip(&post.logvar)
        .map(|(&m, &lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
        .sum()
}

/// Batch-mean Gaussian KL for `[D, B, 1, 1]` mean/log-variance codes.
pub fn gaussian_kl_loss<'t, T: Real>(mean: Var<'t, T>, logvar: Var<'t, T>) -> Var<'t, T> {
    let (m, lv) = (mean.value(), logvar.value());
    assert_eq!(m.shape(), lv.shape(), "gaussian_kl_loss: mean/logvar mismatch");
    let b = m.shape()[1];
    let half_over_b = T::lit(0.5 / b as f64);
    let total: T = m
        .data()
        .iter()
        .zip(lv.data())
        .map(|(&mu, &l)| l.exp() + mu * mu - T::one() - l)
        .sum();
    mean.tape().custom(&[mean, logvar], Array::scalar(total * half_over_b), move |g, sink| {
        let s = g[0] * half_over_b;
        if sink.wants(0) {
            for (d, &mu) in sink.grad(0).iter_mut().zip(m.data()) {
                *d = *d + s * T::lit(2.0) * mu;
            }
        }
        if sink.wants(1) {
            for (d, &l) in sink.grad(1).iter_mut().zip(lv.data()) {
                *d = *d + s * (l.exp() - T::one());
            }
        }
    })
}

/// `π = μ + exp(½ logvar) ⊙ ε`.
pub fn reparameterize<'t, T: Real>(mean: Var<'t, T>, logvar: Var<'t, T>, noise: &Array<T>) -> Var<'t, T> {
    let (m, lv) = (mean.value(), logvar.value());
    assert_eq!(m.shape(), noise.shape(), "reparameterize: noise shape mismatch");
    let half = T::lit(0.5);
    let std: Vec<T> = lv.data().iter().map(|&l| (l * half).exp()).collect();
    let out: Vec<T> = m.data().iter().zip(&std).zip(noise.data()).map(|((&mu, &s), &e)| mu + s * e).collect();
    let eps = noise.clone();
    mean.tape().custom(&[mean, logvar], Array::from_vec(m.shape(), out), move |g, sink| {
        if sink.wants(0) {
            for (d, &gv) in sink.grad(0).iter_mut().zip(g) {
                *d = *d + gv;
            }
        }
        if sink.wants(1) {
            for (((d, &gv), &s), &e) in sink.grad(1).iter_mut().zip(g).zip(&std).zip(eps.data()) {
                *d = *d + gv * s * e * half;
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn map(n: usize, h: usize, w: usize, data: Vec<f64>) -> Array<f64> {
        Array::from_vec(&[n, 1, h, w], data)
    }

    #[test]
    fn uniform_logits_give_uniform_probs() {
        let p = normalize_segmentation(&Array::<f64>::zeros(&[25, 1, 3, 3])).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.04).abs() < 1e-15));
    }

    #[test]
    fn huge_logit_does_not_overflow() {
        let mut l = vec![0.0; 4];
        l[0] = 1000.0;
        let p = normalize_segmentation(&map(4, 1, 1, l)).unwrap();
        assert!((p.data()[0] - 1.0).abs() < 1e-12);
        assert!(p.all_finite());
    }

    #[test]
    fn nan_logits_are_rejected() {
        let l = map(2, 1, 1, vec![f64::NAN, 0.0]);
        assert!(matches!(normalize_segmentation(&l), Err(Error::NonFinite(_))));
    }

    #[test]
    fn gmrf_hand_computed_two_by_two() {
        assert_eq!(gmrf_kl(&map(1, 2, 2, vec![0.0, 1.0, 0.0, 1.0])), 2.0);
    }

    #[test]
    fn gmrf_constant_and_homogeneity() {
        assert_eq!(gmrf_kl(&map(2, 3, 3, vec![4.2; 18])), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..18).map(|_| rng.gen()).collect();
        let a = gmrf_kl(&map(2, 3, 3, data.clone()));
        let b = gmrf_kl(&map(2, 3, 3, data.iter().map(|v| 2.0 * v).collect()));
        assert!((b - 4.0 * a).abs() < 1e-12);
    }

    #[test]
    fn oracle_degenerate_operator_is_half_norm() {
        let f = [1.0, -2.0, 0.5, 3.0];
        let v = precision_quadratic_form(&f, &DMatrix::identity(4, 4));
        assert!((v - 0.5 * f.iter().map(|x| x * x).sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn oracle_constant_map_is_zero() {
        assert_eq!(gmrf_kl_oracle(&[3.0; 9], 3, 3, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn oracle_rejects_large_grids() {
        assert!(matches!(gmrf_kl_oracle(&[0.0; 36], 6, 6, 1.0), Err(Error::GridTooLarge { .. })));
    }

    #[test]
    fn oracle_matches_stencil_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let f: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let direct = gmrf_kl(&map(1, 4, 4, f.clone()));
            let dense = gmrf_kl_oracle(&f, 4, 4, 1.0).unwrap();
            assert!((direct - 2.0 * dense).abs() < 1e-10);
        }
    }

    #[test]
    fn entropy_endpoints() {
        let mut onehot = vec![0.0; 3 * 4];
        for px in 0..4 {
            onehot[(px % 3) * 4 + px] = 1.0;
        }
        assert_eq!(entropy_reg(&map(3, 2, 2, onehot)), 0.0);
        let uniform = map(3, 2, 2, vec![1.0 / 3.0; 12]);
        assert!((entropy_reg(&uniform) - 4.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_kl_values() {
        assert_eq!(gaussian_kl(&GaussianPosterior { mean: vec![0.0; 3], logvar: vec![0.0; 3] }), 0.0);
        assert!((gaussian_kl(&GaussianPosterior { mean: vec![1.0], logvar: vec![0.0] }) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gaussian_kl_matches_monte_carlo() {
        let (mu, sigma): (f64, f64) = (0.5, 1.5);
        let exact = gaussian_kl(&GaussianPosterior { mean: vec![mu], logvar: vec![(sigma * sigma).ln()] });
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let e: f64 = rng.sample(StandardNormal);
            let z = mu + sigma * e;
            // log q(z) - log p(z)
            acc += -sigma.ln() - 0.5 * e * e + 0.5 * z * z;
        }
        let mc = acc / n as f64;
        assert!((mc - exact).abs() / exact < 0.01, "mc {mc} exact {exact}");
    }

    #[test]
    fn reparameterize_with_zero_noise_is_mean() {
        let tape = Tape::<f64>::new();
        let m = tape.constant(Array::from_vec(&[2, 1, 1, 1], vec![0.3, -1.2]));
        let lv = tape.constant(Array::from_vec(&[2, 1, 1, 1], vec![0.7, -0.4]));
        let z = reparameterize(m, lv, &Array::zeros(&[2, 1, 1, 1]));
        assert_eq!(z.value().data(), &[0.3, -1.2]);
    }

    #[test]
    fn cross_entropy_variant_is_reserved() {
        assert!(CategoricalRegularizer::CrossEntropy.ensure_supported().is_err());
        assert!("entropy".parse::<CategoricalRegularizer>().unwrap().ensure_supported().is_ok());
    }
}

//! Adversarial estimate of the dependence between shape and appearance codes.
//!
//! The adversary sees joint pairs `(π_i, α_i)` and marginal pairs
//! `(π_i, α_σ(i))` built by permuting appearance codes within the batch.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Array, Real};

/// Uniform over the non-identity permutations of `0..b`; fixed points are allowed.
pub fn marginal_permutation<R: Rng + ?Sized>(b: usize, rng: &mut R) -> Result<Vec<usize>> {
    if b < 2 {
        return Err(Error::BatchTooSmall("marginal shuffling"));
    }
    let mut perm: Vec<usize> = (0..b).collect();
    // identity has probability 1/b! <= 1/2 per draw
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().any(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Reorders the batch axis of `[D, B, ...]` codes: output sample `i` is input sample `perm[i]`.
pub fn permute_batch<T: Real>(codes: &Array<T>, perm: &[usize]) -> Array<T> {
    let shape = codes.shape();
    let (d, b) = (shape[0], shape[1]);
    assert_eq!(perm.len(), b, "permutation length must equal the batch size");
    let inner: usize = shape[2..].iter().product();
    let mut out = Array::zeros(shape);
    for c in 0..d {
        for (i, &src) in perm.iter().enumerate() {
            let dst = (c * b + i) * inner;
            let from = (c * b + src) * inner;
            out.data_mut()[dst..dst + inner].copy_from_slice(&codes.data()[from..from + inner]);
        }
    }
    out
}

/// Appearance codes for marginal pairs, shuffled with a generator seeded by `seed`.
pub fn shuffle_marginals<T: Real>(alphas: &Array<T>, seed: u64) -> Result<Array<T>> {
    let b = alphas.shape().get(1).copied().unwrap_or(0);
    let perm = marginal_permutation(b, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(permute_batch(alphas, &perm))
}

/// Joint and marginal pairs for one batch.
#[derive(Clone, Debug)]
pub struct MiBatch<T> {
    pub pi: Array<T>,
    pub alpha: Array<T>,
    pub alpha_shuffled: Array<T>,
    pub permutation: Vec<usize>,
}

impl<T: Real> MiBatch<T> {
    pub fn new<R: Rng + ?Sized>(pi: Array<T>, alpha: Array<T>, rng: &mut R) -> Result<Self> {
        if pi.shape().get(1) != alpha.shape().get(1) {
            return Err(Error::Shape(format!("π {:?} and α {:?} batches differ", pi.shape(), alpha.shape())));
        }
        let permutation = marginal_permutation(pi.shape()[1], rng)?;
        let alpha_shuffled = permute_batch(&alpha, &permutation);
        Ok(MiBatch { pi, alpha, alpha_shuffled, permutation })
    }
}

/// `mean log σ(t_joint) + mean log σ(−t_marginal)`, the adversary's objective to maximize.
/// Never positive; 0 is approached by a perfect classifier.
pub fn adversary_objective<'t, T: Real>(t_joint: Var<'t, T>, t_marginal: Var<'t, T>) -> Var<'t, T> {
    t_joint.log_sigmoid().mean().add(t_marginal.scale(-1.0).log_sigmoid().mean())
}

/// Plain-value adversary objective.
pub fn adversary_objective_value(t_joint: &[f64], t_marginal: &[f64]) -> f64 {
    let log_sigmoid = |x: f64| if x >= 0.0 { -(-x).exp().ln_1p() } else { x - x.exp().ln_1p() };
    let mean = |v: &[f64], s: f64| v.iter().map(|&t| log_sigmoid(s * t)).sum::<f64>() / v.len() as f64;
    mean(t_joint, 1.0) + mean(t_marginal, -1.0)
}

/// Mean adversary logit on joint pairs; the dependence penalty for the shape encoder.
/// The adversary must be bound with frozen parameters when this is trained against.
pub fn mi_penalty<'t, T: Real>(t_joint: Var<'t, T>) -> Var<'t, T> {
    t_joint.mean()
}

/// How the EMA estimate scales the adversarial weight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdaptiveAdv {
    Off,
    #[default]
    EmaGate,
}

impl std::str::FromStr for AdaptiveAdv {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(AdaptiveAdv::Off),
            "ema_gate" => Ok(AdaptiveAdv::EmaGate),
            other => Err(Error::Config(format!("unknown adaptive_adv `{other}`"))),
        }
    }
}

impl std::fmt::Display for AdaptiveAdv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdaptiveAdv::Off => "off",
            AdaptiveAdv::EmaGate => "ema_gate",
        })
    }
}

/// Exponential moving average of the batch mean adversary logit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub value: f64,
    pub decay: f64,
    pub step: u64,
}

impl MiEstimate {
    pub fn new(decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Config(format!("EMA decay must lie in (0, 1), got {decay}")));
        }
        Ok(MiEstimate { value: 0.0, decay, step: 0 })
    }

    /// Multiplier applied to the adversarial weight.
    pub fn gate(&self, mode: AdaptiveAdv) -> f64 {
        match mode {
            AdaptiveAdv::Off => 1.0,
            AdaptiveAdv::EmaGate => 1.0 / (1.0 + (-self.value).exp()),
        }
    }
}

/// First update takes the batch value as is.
pub fn update_mi_ema(est: MiEstimate, batch_value: f64) -> MiEstimate {
    let value = if est.step == 0 { batch_value } else { est.decay * est.value + (1.0 - est.decay) * batch_value };
    MiEstimate { value, decay: est.decay, step: est.step + 1 }
}

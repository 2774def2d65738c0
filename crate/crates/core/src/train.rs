//! Optimization loop: per-network loss routing, weight schedules, adversary
//! updates, checkpoints and the metrics stream.
//!
//! Routing per step:
//! - adversary: maximizes the adversary objective, every other net frozen;
//! - shape encoder: reconstruction, variational KL and the MI penalty;
//! - appearance encoder and generator: reconstruction only;
//! - mask decoder: reconstruction, GMRF KL and entropy.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::Archive;
use crate::autograd::{Gradients, Tape, Var};
use crate::config::{parse_flag, parse_value, KeyValues};
use crate::error::{Error, Result};
use crate::eval::{self, LabeledSet};
use crate::mi::{self, AdaptiveAdv, MiEstimate};
use crate::nets::{Bound, Model, NetConfig, NetGroup, ParamStore};
use crate::pipeline::{self, ForwardGraph, PipelineOptions, ReconMode, LOSS_NAMES};
use crate::synth_data::{ImagePairs, PairDataset};
use crate::tensor::{Array, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub batch_size: usize,
    pub total_steps: u64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lambda_gmrf: f64,
    pub lambda_entropy_start: f64,
    pub lambda_entropy_end: f64,
    pub entropy_ramp: (u64, u64),
    pub lambda_variational: f64,
    pub lambda_adversarial: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub adaptive_adv: AdaptiveAdv,
    pub recon_mode: ReconMode,
    pub detach_s2: bool,
    pub flip_prob: f64,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Steps between validation IoU evaluations; 0 disables them.
    pub val_every: u64,
}

impl Default for TrainConfig {
    /// Desk-scale profile: 64 px, 5 parts, batch 16, 20k steps.
    fn default() -> Self {
        TrainConfig {
            net: NetConfig::default(),
            batch_size: 16,
            total_steps: 20_000,
            lr: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda_gmrf: 1e-3,
            lambda_entropy_start: 0.06e-3,
            lambda_entropy_end: 0.06,
            entropy_ramp: (4_000, 8_000),
            // Tuned at desk scale: 1.0 leaves the shape code too few nats to
            // place thin parts under the unit-variance pixel likelihood.
            lambda_variational: 0.1,
            lambda_adversarial: 1.0,
            ema_decay: 0.99,
            seed: 0,
            adaptive_adv: AdaptiveAdv::EmaGate,
            recon_mode: ReconMode::default(),
            detach_s2: true,
            flip_prob: 0.5,
            checkpoint_every: 2_000,
            val_every: 1_000,
        }
    }
}

impl TrainConfig {
    /// Full-scale hyperparameters: 128 px, 25 parts, batch 4, 100k steps.
    pub fn full() -> Self {
        TrainConfig {
            net: NetConfig { image_size: 128, num_parts: 25, width_multiplier: 1.0, ..NetConfig::default() },
            batch_size: 4,
            total_steps: 100_000,
            entropy_ramp: (30_000, 50_000),
            lambda_variational: 1.0,
            checkpoint_every: 10_000,
            val_every: 5_000,
            ..TrainConfig::default()
        }
    }

    /// 200-step run for checking an installation end to end.
    pub fn smoke() -> Self {
        TrainConfig {
            total_steps: 200,
            batch_size: 4,
            entropy_ramp: (40, 80),
            checkpoint_every: 100,
            val_every: 100,
            ..TrainConfig::default()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(TrainConfig::default()),
            "full" => Ok(TrainConfig::full()),
            "smoke" => Ok(TrainConfig::smoke()),
            other => Err(Error::Config(format!("unknown profile `{other}` (desk, full, smoke)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        let fail = |msg: String| Err(Error::Config(msg));
        if self.batch_size < 2 {
            return fail(format!("batch_size must be >= 2 for marginal shuffling, got {}", self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        let (start, end) = self.entropy_ramp;
        if !(start < end && end <= self.total_steps) {
            return fail(format!("entropy ramp needs start < end <= total_steps, got ({start}, {end})"));
        }
        let lambdas = [
            ("lambda_gmrf", self.lambda_gmrf),
            ("lambda_entropy_start", self.lambda_entropy_start),
            ("lambda_entropy_end", self.lambda_entropy_end),
            ("lambda_variational", self.lambda_variational),
            ("lambda_adversarial", self.lambda_adversarial),
        ];
        if let Some((name, v)) = lambdas.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return fail(format!("{name} must be a finite value >= 0, got {v}"));
        }
        MiEstimate::new(self.ema_decay)?;
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return fail("Adam betas must lie in [0, 1) and eps be positive".into());
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return fail(format!("flip_prob must lie in [0, 1], got {}", self.flip_prob));
        }
        Ok(())
    }

    pub fn pipeline_options(&self) -> PipelineOptions {
        PipelineOptions { recon_mode: self.recon_mode, detach_s2: self.detach_s2 }
    }

    /// Sets one field from its key-value name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let net = &mut self.net;
        match key {
            "image_size" => net.image_size = parse_value(key, value)?,
            "num_parts" => net.num_parts = parse_value(key, value)?,
            "dim_alpha" => net.dim_alpha = parse_value(key, value)?,
            "dim_pi" => net.dim_pi = parse_value(key, value)?,
            "width_multiplier" => net.width_multiplier = parse_value(key, value)?,
            "adversary_width" => net.adversary_width = parse_value(key, value)?,
            "adversary_hidden" => net.adversary_hidden = parse_value(key, value)?,
            "coords_appearance_encoder" => net.use_coords.appearance_encoder = parse_flag(key, value)?,
            "coords_shape_encoder" => net.use_coords.shape_encoder = parse_flag(key, value)?,
            "coords_mask_decoder" => net.use_coords.mask_decoder = parse_flag(key, value)?,
            "coords_generator" => net.use_coords.generator = parse_flag(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "total_steps" => self.total_steps = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam_eps = parse_value(key, value)?,
            "lambda_gmrf" => self.lambda_gmrf = parse_value(key, value)?,
            "lambda_entropy_start" => self.lambda_entropy_start = parse_value(key, value)?,
            "lambda_entropy_end" => self.lambda_entropy_end = parse_value(key, value)?,
            "entropy_ramp" => {
                let (a, b) = value
                    .split_once(',')
                    .ok_or_else(|| Error::Config(format!("entropy_ramp expects `start,end`, got `{value}`")))?;
                self.entropy_ramp = (parse_value(key, a.trim())?, parse_value(key, b.trim())?);
            }
            "lambda_variational" => self.lambda_variational = parse_value(key, value)?,
            "lambda_adversarial" => self.lambda_adversarial = parse_value(key, value)?,
            "ema_decay" => self.ema_decay = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "adaptive_adv" => self.adaptive_adv = value.parse()?,
            "recon_mode" => self.recon_mode = value.parse()?,
            "detach_s2" => self.detach_s2 = parse_flag(key, value)?,
            "flip_prob" => self.flip_prob = parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            "val_every" => self.val_every = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown training key `{other}`"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.0.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    /// Every field by key-value name; `apply` of the result reproduces `self`.
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        let net = &self.net;
        kv.push("image_size", net.image_size);
        kv.push("num_parts", net.num_parts);
        kv.push("dim_alpha", net.dim_alpha);
        kv.push("dim_pi", net.dim_pi);
        kv.push("width_multiplier", net.width_multiplier);
        kv.push("adversary_width", net.adversary_width);
        kv.push("adversary_hidden", net.adversary_hidden);
        kv.push("coords_appearance_encoder", net.use_coords.appearance_encoder);
        kv.push("coords_shape_encoder", net.use_coords.shape_encoder);
        kv.push("coords_mask_decoder", net.use_coords.mask_decoder);
        kv.push("coords_generator", net.use_coords.generator);
        kv.push("batch_size", self.batch_size);
        kv.push("total_steps", self.total_steps);
        kv.push("lr", self.lr);
        kv.push("adam_beta1", self.adam_beta1);
        kv.push("adam_beta2", self.adam_beta2);
        kv.push("adam_eps", self.adam_eps);
        kv.push("lambda_gmrf", self.lambda_gmrf);
        kv.push("lambda_entropy_start", self.lambda_entropy_start);
        kv.push("lambda_entropy_end", self.lambda_entropy_end);
        kv.push("entropy_ramp", format!("{},{}", self.entropy_ramp.0, self.entropy_ramp.1));
        kv.push("lambda_variational", self.lambda_variational);
        kv.push("lambda_adversarial", self.lambda_adversarial);
        kv.push("ema_decay", self.ema_decay);
        kv.push("seed", self.seed);
        kv.push("adaptive_adv", self.adaptive_adv);
        kv.push("recon_mode", self.recon_mode);
        kv.push("detach_s2", self.detach_s2);
        kv.push("flip_prob", self.flip_prob);
        kv.push("checkpoint_every", self.checkpoint_every);
        kv.push("val_every", self.val_every);
        kv
    }
}

/// Loss weights in effect at one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub gmrf: f64,
    pub entropy: f64,
    pub variational: f64,
    pub adversarial: f64,
}

impl Weights {
    pub fn to_map(&self) -> BTreeMap<String, f64> {
        [
            ("lambda_gmrf", self.gmrf),
            ("lambda_entropy", self.entropy),
            ("lambda_variational", self.variational),
            ("lambda_adversarial", self.adversarial),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect()
    }
}

/// Entropy weight ramps linearly over `entropy_ramp` and is clamped outside it.
pub fn weight_schedule(step: u64, cfg: &TrainConfig) -> Weights {
    let (start, end) = cfg.entropy_ramp;
    let t = if step <= start {
        0.0
    } else if step >= end {
        1.0
    } else {
        (step - start) as f64 / (end - start) as f64
    };
    Weights {
        gmrf: cfg.lambda_gmrf,
        entropy: cfg.lambda_entropy_start + t * (cfg.lambda_entropy_end - cfg.lambda_entropy_start),
        variational: cfg.lambda_variational,
        adversarial: cfg.lambda_adversarial,
    }
}

/// Adam moments for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub first: Vec<Array<f32>>,
    pub second: Vec<Array<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros: Vec<Array<f32>> = store.iter().map(|(_, p)| Array::zeros(p.value.shape())).collect();
        Adam { first: zeros.clone(), second: zeros }
    }

    /// One bias-corrected update of parameter `id`; `t` counts from 1.
    pub fn update(&mut self, store: &mut ParamStore<f32>, id: crate::nets::ParamId, grad: &[f32], cfg: &TrainConfig, t: u64) {
        let (b1, b2) = (cfg.adam_beta1 as f32, cfg.adam_beta2 as f32);
        let correction1 = 1.0 - cfg.adam_beta1.powf(t as f64);
        let correction2 = 1.0 - cfg.adam_beta2.powf(t as f64);
        let step = (cfg.lr * correction2.sqrt() / correction1) as f32;
        let eps = (cfg.adam_eps * correction2.sqrt()) as f32;
        let m = self.first[id.0].data_mut();
        let v = self.second[id.0].data_mut();
        let value = store.value_mut(id).data_mut();
        for i in 0..grad.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            value[i] -= step * m[i] / (v[i].sqrt() + eps);
        }
    }
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub model: Model<f32>,
    pub optimizer: Adam,
    pub mi: MiEstimate,
    /// Reparameterization noise and marginal permutations.
    pub rng: ChaCha8Rng,
    /// Batch sampling and flips.
    pub data_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(s);
            rng
        };
        let model = Model::new(cfg.net.clone(), &mut stream(0))?;
        Ok(TrainState {
            step: 0,
            optimizer: Adam::new(&model.params),
            model,
            mi: MiEstimate::new(cfg.ema_decay)?,
            rng: stream(1),
            data_rng: stream(2),
        })
    }
}

/// Per-term loss coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coefficients {
    pub rec: f64,
    pub kl_pi: f64,
    pub gmrf: f64,
    pub entropy: f64,
    pub adv_penalty: f64,
}

impl Coefficients {
    fn only(term: &str) -> Self {
        let pick = |name: &str| if name == term { 1.0 } else { 0.0 };
        Coefficients {
            rec: pick("rec"),
            kl_pi: pick("kl_pi"),
            gmrf: pick("gmrf"),
            entropy: pick("entropy"),
            adv_penalty: pick("adv_penalty"),
        }
    }
}

/// Parameter gradients of the weighted losses under the routing table.
///
/// Prior terms on the segmentation stop at the shape sample so they reach
/// only the mask decoder; the MI penalty reaches the shape encoder through the
/// frozen adversary.
fn seeds<'t, T: Real>(terms: &[(Var<'t, T>, f64)]) -> Vec<(Var<'t, T>, T)> {
    terms.iter().filter(|(_, w)| *w != 0.0).map(|&(v, w)| (v, T::lit(w))).collect()
}

pub fn routed_gradients<T: Real>(
    graph: &ForwardGraph<'_, T>,
    params: &Bound<'_, T>,
    c: &Coefficients,
) -> Vec<Option<Vec<T>>> {
    let tape = graph.recon.tape();
    let l = &graph.losses;
    let mut out: Vec<Option<Vec<T>>> = vec![None; params.vars().len()];
    let mut accumulate = |grads: Gradients<T>| {
        for (slot, &var) in out.iter_mut().zip(params.vars()) {
            if let Some(g) = grads.get(var) {
                match slot {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
                    None => *slot = Some(g.to_vec()),
                }
            }
        }
    };
    let main = seeds(&[(l.rec, c.rec), (l.kl_pi, c.kl_pi), (l.adv_penalty, c.adv_penalty)]);
    if !main.is_empty() {
        accumulate(tape.backward(&main, &[]));
    }
    let priors = seeds(&[(l.gmrf, c.gmrf), (l.entropy, c.entropy)]);
    if !priors.is_empty() {
        accumulate(tape.backward(&priors, &[graph.pi_sample]));
    }
    out
}

/// Adversary update direction: gradient of the negated objective, so a
/// descent step maximizes it. Returns the objective value.
fn adversary_gradients<T: Real>(
    model: &Model<T>,
    pi: &Array<T>,
    alpha: &Array<T>,
    alpha_shuffled: &Array<T>,
) -> (f64, Vec<Option<Vec<T>>>) {
    let tape = Tape::new();
    let p = model.params.bind(&tape, |g| g == NetGroup::Adversary);
    let pi = tape.constant(pi.clone());
    let joint = model.adversary(&p, pi, tape.constant(alpha.clone()));
    let marginal = model.adversary(&p, pi, tape.constant(alpha_shuffled.clone()));
    let objective = mi::adversary_objective(joint, marginal);
    let grads = tape.backward(&[(objective, T::lit(-1.0))], &[]);
    (objective.item().as_f64(), p.vars().iter().map(|&v| grads.get(v).map(<[T]>::to_vec)).collect())
}

fn standard_normal<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Array<T> {
    let n = shape.iter().product();
    Array::from_vec(shape, (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect())
}

/// Outcome of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Step index the report belongs to (before increment).
    pub step: u64,
    pub losses: BTreeMap<String, f64>,
    pub weights: Weights,
    /// Adversarial weight multiplier from the EMA gate.
    pub gate: f64,
    pub adversary_objective: f64,
    pub mi_ema: f64,
}

fn non_finite(step: u64, losses: &BTreeMap<String, f64>) -> Error {
    let components = losses.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(", ");
    Error::NonFiniteLoss { step, components }
}

/// One optimization step: adversary first, then every other net jointly.
pub fn train_step(state: &mut TrainState, batch: &ImagePairs, cfg: &TrainConfig) -> Result<StepReport> {
    let b = batch.x1.shape().get(1).copied().unwrap_or(0);
    let noise = standard_normal::<f32>(&[cfg.net.dim_pi, b, 1, 1], &mut state.rng);
    let (pi, alpha) = pipeline::adversary_inputs(&state.model, &batch.x1, &batch.x2, &noise)?;
    let perm = mi::marginal_permutation(b, &mut state.rng)?;
    let alpha_shuffled = mi::permute_batch(&alpha, &perm);
    let t = state.step + 1;

    let (objective, adv_grads) = adversary_gradients(&state.model, &pi, &alpha, &alpha_shuffled);
    if !objective.is_finite() {
        let losses = BTreeMap::from([("adversary_objective".to_owned(), objective)]);
        return Err(non_finite(state.step, &losses));
    }
    for (i, g) in adv_grads.into_iter().enumerate() {
        if let Some(g) = g {
            state.optimizer.update(&mut state.model.params, crate::nets::ParamId(i), &g, cfg, t);
        }
    }

    let weights = weight_schedule(state.step, cfg);
    let gate = state.mi.gate(cfg.adaptive_adv);
    let (losses, grads) = {
        let tape = Tape::new();
        let p = state.model.params.bind(&tape, |g| g != NetGroup::Adversary);
        let graph = pipeline::forward_train(
            &state.model,
            &tape,
            &p,
            &batch.x1,
            &batch.x2,
            &noise,
            &alpha,
            cfg.pipeline_options(),
        )?;
        let losses = graph.losses.values();
        if losses.values().any(|v| !v.is_finite()) {
            return Err(non_finite(state.step, &losses));
        }
        let coefficients = Coefficients {
            rec: 1.0,
            kl_pi: weights.variational,
            gmrf: weights.gmrf,
            entropy: weights.entropy,
            adv_penalty: weights.adversarial * gate,
        };
        (losses, routed_gradients(&graph, &p, &coefficients))
    };
    for (i, g) in grads.into_iter().enumerate() {
        if let Some(g) = g {
            state.optimizer.update(&mut state.model.params, crate::nets::ParamId(i), &g, cfg, t);
        }
    }
    state.mi = mi::update_mi_ema(state.mi, losses["adv_penalty"]);
    let report = StepReport {
        step: state.step,
        losses,
        weights,
        gate,
        adversary_objective: objective,
        mi_ema: state.mi.value,
    };
    state.step += 1;
    Ok(report)
}

/// Groups each loss term is designed to reach.
pub fn designated_groups(term: &str) -> BTreeSet<NetGroup> {
    use NetGroup::*;
    let groups: &[NetGroup] = match term {
        "rec" => &[AppearanceEncoder, ShapeEncoder, MaskDecoder, Generator],
        "kl_pi" | "adv_penalty" => &[ShapeEncoder],
        "gmrf" | "entropy" => &[MaskDecoder],
        "adversary_objective" => &[Adversary],
        _ => &[],
    };
    groups.iter().copied().collect()
}

/// For every loss term alone, the groups whose gradient has a nonzero entry.
pub fn routing_audit<T: Real>(
    model: &Model<T>,
    batch_x1: &Array<T>,
    batch_x2: &Array<T>,
    opts: PipelineOptions,
    seed: u64,
) -> Result<BTreeMap<String, BTreeSet<NetGroup>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = batch_x1.shape()[1];
    let noise = standard_normal::<T>(&[model.config.dim_pi, b, 1, 1], &mut rng);
    let (pi, alpha) = pipeline::adversary_inputs(model, batch_x1, batch_x2, &noise)?;
    let touched = |grads: &[Option<Vec<T>>]| -> BTreeSet<NetGroup> {
        model
            .params
            .iter()
            .zip(grads)
            .filter(|(_, g)| g.as_ref().is_some_and(|g| g.iter().any(|&v| v != T::zero())))
            .map(|((_, p), _)| p.group)
            .collect()
    };
    let mut out = BTreeMap::new();
    for term in LOSS_NAMES {
        let tape = Tape::new();
        let p = model.params.bind(&tape, |g| g != NetGroup::Adversary);
        let graph = pipeline::forward_train(model, &tape, &p, batch_x1, batch_x2, &noise, &alpha, opts)?;
        out.insert(term.to_owned(), touched(&routed_gradients(&graph, &p, &Coefficients::only(term))));
    }
    let perm = mi::marginal_permutation(b, &mut rng)?;
    let (_, grads) = adversary_gradients(model, &pi, &alpha, &mi::permute_batch(&alpha, &perm));
    out.insert("adversary_objective".to_owned(), touched(&grads));
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format(format!("invalid generator state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    step: u64,
    mi: MiEstimate,
    rng: RngState,
    data_rng: RngState,
}

const FIRST_MOMENT: &str = "adam_m.";
const SECOND_MOMENT: &str = "adam_v.";

pub fn checkpoint_archive(state: &TrainState, cfg: &TrainConfig) -> Archive {
    let meta = CheckpointMeta {
        config: cfg.clone(),
        step: state.step,
        mi: state.mi,
        rng: RngState::capture(&state.rng),
        data_rng: RngState::capture(&state.data_rng),
    };
    let mut archive = Archive::new(serde_json::to_value(meta).expect("checkpoint metadata serializes"));
    for (id, p) in state.model.params.iter() {
        archive.push(p.name.clone(), p.value.as_ref().clone());
        archive.push(format!("{FIRST_MOMENT}{}", p.name), state.optimizer.first[id.0].clone());
        archive.push(format!("{SECOND_MOMENT}{}", p.name), state.optimizer.second[id.0].clone());
    }
    archive
}

pub fn save_checkpoint(state: &TrainState, cfg: &TrainConfig, path: &Path) -> Result<()> {
    checkpoint_archive(state, cfg).write(path)
}

/// Restores a run; with `expected` set, the stored network configuration must match it.
pub fn restore_checkpoint(archive: &Archive, expected: Option<&NetConfig>) -> Result<(TrainState, TrainConfig)> {
    let meta: CheckpointMeta = serde_json::from_value(archive.metadata.clone())
        .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    if let Some(expected) = expected {
        if *expected != meta.config.net {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint holds {:?}, expected {:?}",
                meta.config.net, expected
            )));
        }
    }
    let mut model = Model::<f32>::new(meta.config.net.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut optimizer = Adam::new(&model.params);
    let expected_entries = 3 * model.params.len();
    if archive.entries.len() != expected_entries {
        return Err(Error::Format(format!(
            "checkpoint has {} arrays, the configured model needs {expected_entries}",
            archive.entries.len()
        )));
    }
    let ids: Vec<_> = model.params.iter().map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec())).collect();
    for (id, name, shape) in ids {
        let fetch = |key: &str| -> Result<Array<f32>> {
            let a = archive.get(key).ok_or_else(|| Error::Format(format!("checkpoint lacks `{key}`")))?;
            if a.shape() != shape.as_slice() {
                return Err(Error::Format(format!("`{key}` has shape {:?}, expected {shape:?}", a.shape())));
            }
            Ok(a.clone())
        };
        *model.params.value_mut(id) = fetch(&name)?;
        optimizer.first[id.0] = fetch(&format!("{FIRST_MOMENT}{name}"))?;
        optimizer.second[id.0] = fetch(&format!("{SECOND_MOMENT}{name}"))?;
    }
    let state = TrainState {
        step: meta.step,
        model,
        optimizer,
        mi: meta.mi,
        rng: meta.rng.restore()?,
        data_rng: meta.data_rng.restore()?,
    };
    Ok((state, meta.config))
}

pub fn load_checkpoint(path: &Path, expected: Option<&NetConfig>) -> Result<(TrainState, TrainConfig)> {
    restore_checkpoint(&Archive::read(path)?, expected)
}

/// Where `fit` writes its artifacts; every field is optional.
#[derive(Default)]
pub struct FitOutputs<'a> {
    pub metrics: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<PathBuf>,
    pub validation: Option<&'a LabeledSet>,
    /// Called after every step with its report.
    pub on_step: Option<&'a mut dyn FnMut(&StepReport)>,
}

/// One metrics-stream record.
pub fn metrics_record(report: &StepReport, val_iou: Option<f64>) -> serde_json::Value {
    let mut record = serde_json::Map::new();
    record.insert("step".into(), json!(report.step));
    for (k, v) in &report.losses {
        record.insert(k.clone(), json!(v));
    }
    for (k, v) in report.weights.to_map() {
        record.insert(k, json!(v));
    }
    record.insert("adv_gate".into(), json!(report.gate));
    record.insert("mi_ema".into(), json!(report.mi_ema));
    record.insert("adversary_objective".into(), json!(report.adversary_objective));
    record.insert("val_iou".into(), json!(val_iou));
    serde_json::Value::Object(record)
}

/// Runs `train_step` until `cfg.total_steps`, resuming from `state.step`.
pub fn fit(state: &mut TrainState, cfg: &TrainConfig, data: &PairDataset, mut out: FitOutputs<'_>) -> Result<()> {
    cfg.validate()?;
    if let Some(dir) = &out.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    while state.step < cfg.total_steps {
        let batch = data.sample_batch(&mut state.data_rng, cfg.batch_size, cfg.flip_prob)?;
        let report = train_step(state, &batch, cfg)?;
        let done = state.step;
        let val_iou = match out.validation {
            Some(val) if cfg.val_every > 0 && (done % cfg.val_every == 0 || done == cfg.total_steps) => {
                Some(eval::self_calibrated_iou(&state.model, val)?)
            }
            _ => None,
        };
        if let Some(w) = out.metrics.as_deref_mut() {
            writeln!(w, "{}", metrics_record(&report, val_iou)).map_err(|e| Error::io("metrics stream", e))?;
        }
        if let Some(dir) = &out.checkpoint_dir {
            let periodic = cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0;
            if periodic || done == cfg.total_steps {
                let archive = checkpoint_archive(state, cfg);
                if periodic {
                    archive.write(&dir.join(format!("step_{done:07}.ckpt")))?;
                }
                archive.write(&dir.join("latest.ckpt"))?;
            }
        }
        if let Some(cb) = out.on_step.as_deref_mut() {
            cb(&report);
        }
    }
    if let Some(w) = out.metrics.as_deref_mut() {
        w.flush().map_err(|e| Error::io("metrics stream", e))?;
    }
    Ok(())
}

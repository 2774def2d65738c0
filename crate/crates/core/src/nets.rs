//! The five parametric functions of the model: appearance encoder, shape
//! encoder, mask decoder, generator and the mutual-information adversary.
//!
//! Channel widths follow the reference architecture tables at 128x128 and are
//! scaled by [`NetConfig::width_multiplier`]. Smaller images drop the
//! highest-resolution levels while keeping the 4x4 bottleneck.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Array, Real};

/// Negative slope of every leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Parameter group, one per network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NetGroup {
    AppearanceEncoder,
    ShapeEncoder,
    MaskDecoder,
    Generator,
    Adversary,
}

impl NetGroup {
    pub const ALL: [NetGroup; 5] = [
        NetGroup::AppearanceEncoder,
        NetGroup::ShapeEncoder,
        NetGroup::MaskDecoder,
        NetGroup::Generator,
        NetGroup::Adversary,
    ];

    /// Prefix of the group's dotted parameter paths.
    pub fn prefix(self) -> &'static str {
        match self {
            NetGroup::AppearanceEncoder => "e_alpha",
            NetGroup::ShapeEncoder => "e_pi",
            NetGroup::MaskDecoder => "d_m",
            NetGroup::Generator => "gen",
            NetGroup::Adversary => "adv",
        }
    }
}

impl fmt::Display for NetGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

/// Which networks append coordinate channels before every convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoordUse {
    pub appearance_encoder: bool,
    pub shape_encoder: bool,
    pub mask_decoder: bool,
    pub generator: bool,
}

impl Default for CoordUse {
    fn default() -> Self {
        CoordUse { appearance_encoder: false, shape_encoder: true, mask_decoder: true, generator: false }
    }
}

impl CoordUse {
    pub fn for_group(&self, group: NetGroup) -> bool {
        match group {
            NetGroup::AppearanceEncoder => self.appearance_encoder,
            NetGroup::ShapeEncoder => self.shape_encoder,
            NetGroup::MaskDecoder => self.mask_decoder,
            NetGroup::Generator => self.generator,
            NetGroup::Adversary => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub image_size: usize,
    pub num_parts: usize,
    pub dim_alpha: usize,
    pub dim_pi: usize,
    pub width_multiplier: f64,
    pub use_coords: CoordUse,
    pub adversary_width: usize,
    pub adversary_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image_size: 64,
            num_parts: 5,
            dim_alpha: 64,
            dim_pi: 64,
            width_multiplier: 0.25,
            use_coords: CoordUse::default(),
            adversary_width: 256,
            adversary_hidden: 3,
        }
    }
}

/// Encoder widths at 128, 64, 32, 16, 8 and 4 pixels.
const ENCODER_WIDTHS: [usize; 6] = [16, 32, 64, 128, 128, 256];
/// Mask decoder widths at 4, 8, 16, 32, 64 and 128 pixels.
const DECODER_WIDTHS: [usize; 6] = [256, 128, 128, 32, 32, 16];
/// Generator widths at full and half resolution.
const GENERATOR_WIDTHS: [usize; 2] = [32, 64];

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s < 16 || !s.is_power_of_two() {
            return Err(Error::Config(format!("image_size must be a power of two >= 16, got {s}")));
        }
        if self.num_parts < 2 {
            return Err(Error::Config(format!("num_parts must be >= 2, got {}", self.num_parts)));
        }
        if self.dim_alpha == 0 || self.dim_pi == 0 {
            return Err(Error::Config("latent dimensions must be >= 1".into()));
        }
        if !(self.width_multiplier > 0.0) || !self.width_multiplier.is_finite() {
            return Err(Error::Config(format!("width_multiplier must be positive, got {}", self.width_multiplier)));
        }
        if self.adversary_width == 0 {
            return Err(Error::Config("adversary_width must be >= 1".into()));
        }
        Ok(())
    }

    fn scaled(&self, c: usize) -> usize {
        ((c as f64 * self.width_multiplier).round() as usize).max(1)
    }

    /// Number of resolution levels from `image_size` down to 4.
    fn levels(&self) -> usize {
        (self.image_size / 4).trailing_zeros() as usize + 1
    }

    /// Widths of the encoder levels, highest resolution first.
    pub fn encoder_widths(&self) -> Vec<usize> {
        let l = self.levels();
        let mut w: Vec<usize> = ENCODER_WIDTHS[..l - 1].to_vec();
        w.push(ENCODER_WIDTHS[5]);
        w.into_iter().map(|c| self.scaled(c)).collect()
    }

    /// Widths of the mask decoder levels, 4x4 first.
    pub fn decoder_widths(&self) -> Vec<usize> {
        let l = self.levels();
        let mut w: Vec<usize> = DECODER_WIDTHS[..l - 1].to_vec();
        w.push(DECODER_WIDTHS[5]);
        w.into_iter().map(|c| self.scaled(c)).collect()
    }

    pub fn generator_widths(&self) -> [usize; 2] {
        GENERATOR_WIDTHS.map(|c| self.scaled(c))
    }

    /// Generator input channels: expected appearance map plus part probabilities.
    pub fn generator_input_channels(&self) -> usize {
        self.dim_alpha + self.num_parts
    }
}

/// Index of a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub group: NetGroup,
    pub value: Arc<Array<T>>,
}

/// Flat, ordered parameter container addressed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

/// Parameters placed on a tape.
pub struct Bound<'t, T> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T> std::ops::Index<ParamId> for Bound<'t, T> {
    type Output = Var<'t, T>;

    fn index(&self, id: ParamId) -> &Var<'t, T> {
        &self.vars[id.0]
    }
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: String, group: NetGroup, value: Array<T>) -> ParamId {
        self.params.push(Param { name, group, value: Arc::new(value) });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    /// Mutable access to a parameter value (copy-on-write if still shared).
    pub fn value_mut(&mut self, id: ParamId) -> &mut Array<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids_in(&self, group: NetGroup) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    /// Places every parameter on `tape`; groups for which `trainable` is false
    /// become constants and never receive gradients.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: impl Fn(NetGroup) -> bool) -> Bound<'t, T> {
        Bound { vars: self.params.iter().map(|p| tape.leaf(p.value.clone(), trainable(p.group))).collect() }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), group: p.group, value: Arc::new(p.value.cast()) })
                .collect(),
        }
    }

    /// FNV-1a hash of the values in `group`, for cheap change detection.
    pub fn group_fingerprint(&self, group: NetGroup) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in self.params.iter().filter(|p| p.group == group) {
            for v in p.value.data() {
                for byte in v.as_f64().to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Registers parameters under a dotted path prefix.
struct Builder<'a, T, R> {
    store: &'a mut ParamStore<T>,
    group: NetGroup,
    rng: &'a mut R,
    coords: bool,
    /// Multiplies residual-branch weights so that a stack of blocks keeps
    /// activations at unit scale without normalization layers.
    residual_scale: f64,
}

/// Fan-in variance gain for a convolution reading leaky-ReLU outputs.
const ACTIVATED_GAIN: f64 = 2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE);

impl<T: Real, R: Rng> Builder<'_, T, R> {
    /// Convolution on an unactivated input (unit gain).
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        self.conv_scaled(name, cin, cout, k, stride, 1.0)
    }

    /// Convolution on a leaky-ReLU output.
    fn conv_act(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        self.conv_scaled(name, cin, cout, k, stride, ACTIVATED_GAIN)
    }

    fn conv_scaled(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, gain: f64) -> Conv {
        let cin = if self.coords { cin + 2 } else { cin };
        let fan_in = (cin * k * k) as f64;
        let std = (gain / fan_in).sqrt();
        let w: Vec<T> = (0..cout * cin * k * k)
            .map(|_| T::lit(self.rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        let prefix = format!("{}.{name}", self.group.prefix());
        let weight = self.store.add(format!("{prefix}.weight"), self.group, Array::from_vec(&[cout, cin, k, k], w));
        let bias = self.store.add(format!("{prefix}.bias"), self.group, Array::zeros(&[cout]));
        Conv { weight, bias, stride, coords: self.coords }
    }

    fn res(&mut self, name: &str, c: usize) -> ResidualBlock {
        let gain = ACTIVATED_GAIN * self.residual_scale * self.residual_scale;
        ResidualBlock { conv: self.conv_scaled(name, c, c, 3, 1, gain) }
    }
}

/// Convolution with optional coordinate channels appended to its input.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub coords: bool,
}

impl Conv {
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let x = if self.coords { coord_append(x) } else { x };
        x.conv2d(p[self.weight], p[self.bias], self.stride)
    }
}

/// Appends normalized row/column coordinate channels (pixel centres, `[-1, 1]`).
pub fn coord_append<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    x.coord_append()
}

/// `y = conv(leaky_relu(x)) + x`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv: Conv,
}

impl ResidualBlock {
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        self.conv.forward(p, x.leaky_relu(LEAKY_SLOPE)).add(x)
    }
}

/// `y = conv([leaky_relu(x), conv1x1(leaky_relu(skip))]) + x`.
#[derive(Clone, Debug)]
pub struct SkipResidualBlock {
    pub conv: Conv,
    pub skip: Conv,
}

impl SkipResidualBlock {
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>, skip: Var<'t, T>) -> Var<'t, T> {
        let s = self.skip.forward(p, skip.leaky_relu(LEAKY_SLOPE));
        let c = Var::concat_channels(&[x.leaky_relu(LEAKY_SLOPE), s]);
        self.conv.forward(p, c).add(x)
    }
}

/// Strided residual pyramid down to 4x4, four extra residual blocks, global
/// mean pooling and a 1x1 projection.
#[derive(Clone, Debug)]
pub struct Encoder {
    stem: Conv,
    stem_block: ResidualBlock,
    stages: Vec<(Conv, ResidualBlock)>,
    tail: Vec<ResidualBlock>,
    head: Conv,
}

impl Encoder {
    fn build<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, widths: &[usize], out: usize) -> Self {
        b.residual_scale = ((widths.len() + 4) as f64).sqrt().recip();
        let stem = b.conv("stem", 3, widths[0], 3, 1);
        let stem_block = b.res("stem_res", widths[0]);
        let stages = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| (b.conv(&format!("down{i}"), w[0], w[1], 3, 2), b.res(&format!("res{i}"), w[1])))
            .collect();
        let last = *widths.last().unwrap();
        let tail = (0..4).map(|i| b.res(&format!("tail{i}"), last)).collect();
        let head = b.conv_act("head", last, out, 1, 1);
        Encoder { stem, stem_block, stages, tail, head }
    }

    /// `[3, B, S, S] -> [out, B, 1, 1]`.
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let mut h = self.stem_block.forward(p, self.stem.forward(p, x));
        for (down, res) in &self.stages {
            h = res.forward(p, down.forward(p, h));
        }
        for res in &self.tail {
            h = res.forward(p, h);
        }
        self.head.forward(p, h.leaky_relu(LEAKY_SLOPE).mean_spatial())
    }
}

/// Broadcast shape code to a 4x4 seed, residual/upsample ladder, per-pixel
/// part logits.
#[derive(Clone, Debug)]
pub struct MaskDecoder {
    project: Conv,
    seed_width: usize,
    seed_conv: Conv,
    seed_blocks: [ResidualBlock; 2],
    stages: Vec<(Conv, Vec<ResidualBlock>)>,
    out: Conv,
}

impl MaskDecoder {
    fn build<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, widths: &[usize], dim_pi: usize, parts: usize) -> Self {
        let seed_width = widths[0];
        b.residual_scale = ((widths.len() + 2) as f64).sqrt().recip();
        let project = b.conv("project", dim_pi, 16 * seed_width, 1, 1);
        let seed_conv = b.conv("seed", seed_width, seed_width, 3, 1);
        let seed_blocks = [b.res("seed_res0", seed_width), b.res("seed_res1", seed_width)];
        let n_up = widths.len() - 1;
        let stages = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let up = b.conv(&format!("up{i}"), w[0], w[1], 3, 1);
                let blocks = if i + 1 == n_up { 2 } else { 1 };
                (up, (0..blocks).map(|j| b.res(&format!("res{i}_{j}"), w[1])).collect())
            })
            .collect();
        let out = b.conv_act("out", *widths.last().unwrap(), parts, 3, 1);
        MaskDecoder { project, seed_width, seed_conv, seed_blocks, stages, out }
    }

    /// `[dim_pi, B, 1, 1] -> [N, B, S, S]` logits.
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, pi: Var<'t, T>) -> Var<'t, T> {
        debug_assert!(self.seed_width > 0);
        let mut h = self.project.forward(p, pi).unflatten_spatial(4);
        h = self.seed_conv.forward(p, h);
        for res in &self.seed_blocks {
            h = res.forward(p, h);
        }
        for (up, blocks) in &self.stages {
            h = up.forward(p, h.upsample2x());
            for res in blocks {
                h = res.forward(p, h);
            }
        }
        self.out.forward(p, h.leaky_relu(LEAKY_SLOPE))
    }
}

/// Shallow hourglass with one internal skip connection.
#[derive(Clone, Debug)]
pub struct Generator {
    stem: Conv,
    stem_block: ResidualBlock,
    down: Conv,
    block_a: ResidualBlock,
    block_b: ResidualBlock,
    block_skip: SkipResidualBlock,
    up: Conv,
    up_block: ResidualBlock,
    out: Conv,
}

impl Generator {
    fn build<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, input: usize, [c0, c1]: [usize; 2]) -> Self {
        b.residual_scale = 5f64.sqrt().recip();
        let stem = b.conv("stem", input, c0, 3, 1);
        let stem_block = b.res("stem_res", c0);
        let down = b.conv("down", c0, c1, 3, 2);
        let block_a = b.res("res_a", c1);
        let block_b = b.res("res_b", c1);
        let skip = b.conv_act("res_skip.skip", c1, c1, 1, 1);
        let branch_gain = ACTIVATED_GAIN * b.residual_scale * b.residual_scale;
        let skip_conv = b.conv_scaled("res_skip", 2 * c1, c1, 3, 1, branch_gain);
        let up = b.conv("up", c1, c0, 3, 1);
        let up_block = b.res("up_res", c0);
        let out = b.conv_act("out", c0, 3, 3, 1);
        Generator {
            stem,
            stem_block,
            down,
            block_a,
            block_b,
            block_skip: SkipResidualBlock { conv: skip_conv, skip },
            up,
            up_block,
            out,
        }
    }

    /// `[dim_alpha + N, B, S, S] -> [3, B, S, S]`, no output activation.
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, input: Var<'t, T>) -> Var<'t, T> {
        let h = self.stem_block.forward(p, self.stem.forward(p, input));
        let a = self.block_a.forward(p, self.down.forward(p, h));
        let h = self.block_b.forward(p, a);
        let h = self.block_skip.forward(p, h, a);
        let h = self.up.forward(p, h.upsample2x());
        let h = self.up_block.forward(p, h);
        self.out.forward(p, h.leaky_relu(LEAKY_SLOPE))
    }
}

/// MLP classifier on concatenated `(π, α)`.
#[derive(Clone, Debug)]
pub struct Adversary {
    layers: Vec<Conv>,
}

impl Adversary {
    fn build<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, input: usize, width: usize, hidden: usize) -> Self {
        let mut layers = Vec::with_capacity(hidden + 1);
        let mut cin = input;
        for i in 0..hidden {
            let name = format!("fc{i}");
            layers.push(if i == 0 { b.conv(&name, cin, width, 1, 1) } else { b.conv_act(&name, cin, width, 1, 1) });
            cin = width;
        }
        let name = "out";
        layers.push(if hidden == 0 { b.conv(name, cin, 1, 1, 1) } else { b.conv_act(name, cin, 1, 1, 1) });
        Adversary { layers }
    }

    /// `([dim_pi, B, 1, 1], [dim_alpha, B, 1, 1]) -> [1, B, 1, 1]` logits.
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, pi: Var<'t, T>, alpha: Var<'t, T>) -> Var<'t, T> {
        let mut h = Var::concat_channels(&[pi, alpha]);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, h);
            if i < last {
                h = h.leaky_relu(LEAKY_SLOPE);
            }
        }
        h
    }
}

/// Shape code posterior and per-part appearance codes.
#[derive(Clone, Debug)]
pub struct LatentCodes<T> {
    /// `[dim_pi, B, 1, 1]`.
    pub pi_mean: Array<T>,
    pub pi_logvar: Array<T>,
    /// `[dim_alpha, N*B, 1, 1]`, batch index `part * B + b`.
    pub alpha_parts: Array<T>,
}

/// All five networks with their parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: NetConfig,
    pub params: ParamStore<T>,
    pub appearance_encoder: Encoder,
    pub shape_encoder: Encoder,
    pub mask_decoder: MaskDecoder,
    pub generator: Generator,
    pub adversary: Adversary,
}

impl<T: Real> Model<T> {
    /// Fan-in scaled normal weights (He gain behind activations); biases start at zero.
    pub fn new(config: NetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let coords = config.use_coords;
        fn builder<'a, T, R>(
            group: NetGroup,
            store: &'a mut ParamStore<T>,
            rng: &'a mut R,
            coords: CoordUse,
        ) -> Builder<'a, T, R> {
            Builder { store, group, rng, coords: coords.for_group(group), residual_scale: 1.0 }
        }
        let enc_w = config.encoder_widths();
        let appearance_encoder =
            Encoder::build(&mut builder(NetGroup::AppearanceEncoder, &mut store, rng, coords), &enc_w, config.dim_alpha);
        let shape_encoder =
            Encoder::build(&mut builder(NetGroup::ShapeEncoder, &mut store, rng, coords), &enc_w, 2 * config.dim_pi);
        let mask_decoder = MaskDecoder::build(
            &mut builder(NetGroup::MaskDecoder, &mut store, rng, coords),
            &config.decoder_widths(),
            config.dim_pi,
            config.num_parts,
        );
        let generator = Generator::build(
            &mut builder(NetGroup::Generator, &mut store, rng, coords),
            config.generator_input_channels(),
            config.generator_widths(),
        );
        let adversary = Adversary::build(
            &mut builder(NetGroup::Adversary, &mut store, rng, coords),
            config.dim_pi + config.dim_alpha,
            config.adversary_width,
            config.adversary_hidden,
        );
        Ok(Model { config, params: store, appearance_encoder, shape_encoder, mask_decoder, generator, adversary })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            appearance_encoder: self.appearance_encoder.clone(),
            shape_encoder: self.shape_encoder.clone(),
            mask_decoder: self.mask_decoder.clone(),
            generator: self.generator.clone(),
            adversary: self.adversary.clone(),
        }
    }

    pub fn encode_appearance<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        self.appearance_encoder.forward(p, x)
    }

    /// `(mean, logvar)`, each `[dim_pi, B, 1, 1]`.
    pub fn encode_shape<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> (Var<'t, T>, Var<'t, T>) {
        let out = self.shape_encoder.forward(p, x);
        let d = self.config.dim_pi;
        (out.narrow_channels(0, d), out.narrow_channels(d, d))
    }

    pub fn decode_mask<'t>(&self, p: &Bound<'t, T>, pi: Var<'t, T>) -> Var<'t, T> {
        self.mask_decoder.forward(p, pi)
    }

    pub fn generate<'t>(&self, p: &Bound<'t, T>, input: Var<'t, T>) -> Var<'t, T> {
        self.generator.forward(p, input)
    }

    pub fn adversary<'t>(&self, p: &Bound<'t, T>, pi: Var<'t, T>, alpha: Var<'t, T>) -> Var<'t, T> {
        self.adversary.forward(p, pi, alpha)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, p)| p.value.len()).sum()
    }
}

impl FromStr for NetGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NetGroup::ALL
            .into_iter()
            .find(|g| g.prefix() == s)
            .ok_or_else(|| Error::Config(format!("unknown network `{s}`")))
    }
}

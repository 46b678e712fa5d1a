//! End-to-end x2 super-resolution forward pass:
//! head conv -> two re-parameterizable inverted residual blocks -> spatial
//! tokens + sinusoidal positions -> pre-norm decoder layers -> tail conv ->
//! pixel shuffle -> clamp to `[0, 1]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    corrupt_sequence, low_level_similarity, multi_head_attention, AttentionParams,
    AttentionVariant, CorruptionSpec, LowLevelGenParams,
};
use crate::error::{Error, Result};
use crate::format::{RawTensor, TensorDir};
use crate::init;
use crate::ops::{
    add_pos_embed, conv2d, flatten_spatial, layer_norm, pixel_shuffle, sinusoidal_pos_embed,
    unflatten_spatial, ConvKernel, DEFAULT_EPS,
};
use crate::reparam::{fuse_rirb, FusedConv, RirbParams};
use crate::tensor::{Element, Matrix, SeqTensor, Tensor4};

pub const RIRB_COUNT: usize = 2;
pub const UPSCALE: usize = 2;

fn default_in_channels() -> usize {
    3
}
fn default_model_dim() -> usize {
    64
}
fn default_heads() -> usize {
    8
}
fn default_decoder_layers() -> usize {
    4
}
fn default_rirb_count() -> usize {
    RIRB_COUNT
}
fn default_expand_ratio() -> usize {
    2
}
fn default_ffn_expansion() -> usize {
    4
}
fn default_upscale() -> usize {
    UPSCALE
}
fn default_variant() -> AttentionVariant {
    AttentionVariant::Shrinking
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_model_dim")]
    pub model_dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_decoder_layers")]
    pub decoder_layers: usize,
    #[serde(default = "default_rirb_count")]
    pub rirb_count: usize,
    #[serde(default = "default_expand_ratio")]
    pub rirb_expand_ratio: usize,
    #[serde(default = "default_ffn_expansion")]
    pub ffn_expansion: usize,
    #[serde(default = "default_upscale")]
    pub upscale: usize,
    #[serde(default = "default_variant")]
    pub attention_variant: AttentionVariant,
    #[serde(default)]
    pub fuse_rirbs: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: default_in_channels(),
            model_dim: default_model_dim(),
            heads: default_heads(),
            decoder_layers: default_decoder_layers(),
            rirb_count: RIRB_COUNT,
            rirb_expand_ratio: default_expand_ratio(),
            ffn_expansion: default_ffn_expansion(),
            upscale: UPSCALE,
            attention_variant: default_variant(),
            fuse_rirbs: false,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.model_dim == 0 {
            return bad("in_channels and model_dim must be positive".into());
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            ));
        }
        if self.rirb_count != RIRB_COUNT {
            return bad(format!("rirb_count is fixed at {RIRB_COUNT}"));
        }
        if self.upscale != UPSCALE {
            return bad(format!("upscale is fixed at {UPSCALE}"));
        }
        if self.rirb_expand_ratio == 0 || self.ffn_expansion == 0 {
            return bad("expansion ratios must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads.max(1)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = f32> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Element> Linear<T> {
    pub fn new(weight: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::shape("linear bias does not match output width"));
        }
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut y = x.matmul(&self.weight)?;
        let cols = y.cols();
        for row in y.data_mut().chunks_exact_mut(cols.max(1)) {
            for (v, &b) in row.iter_mut().zip(&self.bias) {
                *v = *v + b;
            }
        }
        Ok(y)
    }

    pub fn param_count(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayerParams<T = f32> {
    pub attn: AttentionParams<T>,
    pub ln1_gamma: Vec<T>,
    pub ln1_beta: Vec<T>,
    pub ln2_gamma: Vec<T>,
    pub ln2_beta: Vec<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
    /// Present iff the network uses shrinking attention.
    pub generator: Option<LowLevelGenParams<T>>,
}

impl<T: Element> DecoderLayerParams<T> {
    pub fn param_count(&self) -> usize {
        self.attn.param_count()
            + self.ln1_gamma.len()
            + self.ln1_beta.len()
            + self.ln2_gamma.len()
            + self.ln2_beta.len()
            + self.ffn_in.param_count()
            + self.ffn_out.param_count()
            + self.generator.as_ref().map_or(0, |g| g.param_count())
    }
}

/// One feature-extractor block, either as trained or folded.
#[derive(Clone, Debug, PartialEq)]
pub enum RirbStage<T = f32> {
    Unfused(RirbParams<T>),
    Fused(FusedConv<T>),
}

impl<T: Element> RirbStage<T> {
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        match self {
            RirbStage::Unfused(p) => p.forward_unfused(x),
            RirbStage::Fused(f) => f.forward(x),
        }
    }

    pub fn fused(&self) -> Result<RirbStage<T>> {
        match self {
            RirbStage::Unfused(p) => Ok(RirbStage::Fused(fuse_rirb(p)?)),
            RirbStage::Fused(f) => Ok(RirbStage::Fused(f.clone())),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            RirbStage::Unfused(p) => p.param_count(),
            RirbStage::Fused(f) => f.kernel().param_count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T = f32> {
    pub head_conv: ConvKernel<T>,
    pub rirbs: Vec<RirbStage<T>>,
    pub layers: Vec<DecoderLayerParams<T>>,
    pub tail_conv: ConvKernel<T>,
}

impl<T: Element> NetworkParams<T> {
    /// Same network with every residual block folded.
    pub fn fused(&self) -> Result<Self> {
        Ok(Self {
            head_conv: self.head_conv.clone(),
            rirbs: self
                .rirbs
                .iter()
                .map(RirbStage::fused)
                .collect::<Result<_>>()?,
            layers: self.layers.clone(),
            tail_conv: self.tail_conv.clone(),
        })
    }

    /// Scalar parameters actually held.
    pub fn param_count(&self) -> usize {
        self.head_conv.param_count()
            + self.rirbs.iter().map(RirbStage::param_count).sum::<usize>()
            + self
                .layers
                .iter()
                .map(DecoderLayerParams::param_count)
                .sum::<usize>()
            + self.tail_conv.param_count()
    }
}

fn decoder_layer_init<T: Element>(
    rng: &mut impl Rng,
    cfg: &NetworkConfig,
) -> Result<DecoderLayerParams<T>> {
    let c = cfg.model_dim;
    let hidden = c * cfg.ffn_expansion;
    let attn = AttentionParams::new(
        init::he_matrix(rng, c, c),
        init::he_matrix(rng, c, c),
        init::he_matrix(rng, c, c),
        init::he_matrix(rng, c, c),
        cfg.heads,
    )?;
    let ffn_in = Linear::new(init::he_matrix(rng, c, hidden), vec![T::zero(); hidden])?;
    let ffn_out = Linear::new(init::he_matrix(rng, hidden, c), vec![T::zero(); c])?;
    let generator = match cfg.attention_variant {
        AttentionVariant::Shrinking => Some(LowLevelGenParams::he_init(rng, c, cfg.head_dim())?),
        _ => None,
    };
    Ok(DecoderLayerParams {
        attn,
        ln1_gamma: vec![T::one(); c],
        ln1_beta: vec![T::zero(); c],
        ln2_gamma: vec![T::one(); c],
        ln2_beta: vec![T::zero(); c],
        ffn_in,
        ffn_out,
        generator,
    })
}

/// Seeded He-normal (fan-in) weights, zero biases, unit LayerNorm.
/// Blocks are drawn unfused and folded afterwards when `fuse_rirbs` is set,
/// so a seed describes the same function either way.
pub fn init_params<T: Element>(cfg: &NetworkConfig) -> Result<NetworkParams<T>> {
    cfg.validate()?;
    let mut rng = init::seeded(cfg.seed);
    let c = cfg.model_dim;
    let head_conv = init::he_conv(&mut rng, c, cfg.in_channels, 3)?;
    let rirbs = (0..cfg.rirb_count)
        .map(|_| {
            RirbParams::he_init(&mut rng, c, cfg.rirb_expand_ratio, true).map(RirbStage::Unfused)
        })
        .collect::<Result<Vec<_>>>()?;
    let layers = (0..cfg.decoder_layers)
        .map(|_| decoder_layer_init(&mut rng, cfg))
        .collect::<Result<Vec<_>>>()?;
    let tail_conv = init::he_conv(&mut rng, cfg.in_channels * cfg.upscale * cfg.upscale, c, 3)?;
    let params = NetworkParams {
        head_conv,
        rirbs,
        layers,
        tail_conv,
    };
    if cfg.fuse_rirbs {
        params.fused()
    } else {
        Ok(params)
    }
}

/// Closed-form parameter count.
///
/// * head conv: `9·in·C + C`
/// * each block, unfused: `(C·rC + rC) + (9·(rC)² + rC) + (rC·C + C)`; fused: `9·C² + C`
/// * each decoder layer: `4·C²` projections, `4·C` LayerNorm, `2·f·C² + f·C + C` FFN,
///   plus `9·C·g + g + 9·g + 1` with `g = max(C/2, 1)` for the shrinking generator
/// * tail conv: `9·C·in·u² + in·u²`
pub fn param_count(cfg: &NetworkConfig) -> u64 {
    let c = cfg.model_dim as u64;
    let inc = cfg.in_channels as u64;
    let mid = c * cfg.rirb_expand_ratio as u64;
    let f = cfg.ffn_expansion as u64;
    let u2 = (cfg.upscale * cfg.upscale) as u64;

    let head = 9 * inc * c + c;
    let block = if cfg.fuse_rirbs {
        9 * c * c + c
    } else {
        (c * mid + mid) + (9 * mid * mid + mid) + (mid * c + c)
    };
    let g = (c / 2).max(1);
    let generator = match cfg.attention_variant {
        AttentionVariant::Shrinking => 9 * c * g + g + 9 * g + 1,
        _ => 0,
    };
    let layer = 4 * c * c + 4 * c + 2 * f * c * c + f * c + c + generator;
    let tail = 9 * c * inc * u2 + inc * u2;
    head + cfg.rirb_count as u64 * block + cfg.decoder_layers as u64 * layer + tail
}

/// Pre-norm residual layer: `x += MHA(LN1(x)); x += FFN(LN2(x))`.
pub fn decoder_layer_forward<T: Element>(
    x: &SeqTensor<T>,
    p: &DecoderLayerParams<T>,
    variant: AttentionVariant,
    s: Option<&[Matrix<T>]>,
) -> Result<SeqTensor<T>> {
    let eps = T::from_f64_lossy(DEFAULT_EPS);
    let h = layer_norm(x, &p.ln1_gamma, &p.ln1_beta, eps)?;
    let x = x.add(&multi_head_attention(&h, &p.attn, variant, s)?)?;
    let h = layer_norm(&x, &p.ln2_gamma, &p.ln2_beta, eps)?;
    let mut items = Vec::with_capacity(h.batch());
    for b in 0..h.batch() {
        let mut hidden = p.ffn_in.forward(&h.item(b))?;
        hidden
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = v.max(T::zero()));
        items.push(p.ffn_out.forward(&hidden)?);
    }
    x.add(&SeqTensor::from_items(items)?)
}

/// Full forward pass; output is `(n, in_channels, 2H, 2W)` clamped to `[0, 1]`.
/// `corruption` applies the token-corruption regularizer after positional
/// embedding; pass `None` for inference.
pub fn estisr_forward<T: Element>(
    params: &NetworkParams<T>,
    cfg: &NetworkConfig,
    lr: &Tensor4<T>,
    corruption: Option<&CorruptionSpec>,
) -> Result<Tensor4<T>> {
    cfg.validate()?;
    if lr.channels() != cfg.in_channels {
        return Err(Error::ChannelMismatch {
            expected: cfg.in_channels,
            actual: lr.channels(),
        });
    }
    let (h, w) = (lr.height(), lr.width());
    if h == 0 || w == 0 {
        return Err(Error::shape("input image is empty"));
    }
    let mut feat = conv2d(lr, &params.head_conv)?;
    for stage in &params.rirbs {
        feat = stage.forward(&feat)?;
    }
    let mut seq = flatten_spatial(&feat);
    seq = add_pos_embed(&seq, &sinusoidal_pos_embed(h * w, cfg.model_dim)?)?;
    if let Some(spec) = corruption {
        seq = corrupt_sequence(&seq, spec)?.seq;
    }
    for layer in &params.layers {
        let s = match cfg.attention_variant {
            AttentionVariant::Shrinking => {
                let g = layer
                    .generator
                    .as_ref()
                    .ok_or_else(|| Error::Config("shrinking layer lacks a generator".into()))?;
                Some(low_level_similarity(&unflatten_spatial(&seq, h, w)?, g)?)
            }
            _ => None,
        };
        seq = decoder_layer_forward(&seq, layer, cfg.attention_variant, s.as_deref())?;
    }
    let feat = unflatten_spatial(&seq, h, w)?;
    let up = pixel_shuffle(&conv2d(&feat, &params.tail_conv)?, cfg.upscale)?;
    Ok(up.map(|v| v.max(T::zero()).min(T::one())))
}

fn vec_tensor(dir: &TensorDir, role: &str) -> Result<Vec<f32>> {
    dir.get(role)?.to_vector()
}

fn matrix_tensor(dir: &TensorDir, role: &str) -> Result<Matrix<f32>> {
    dir.get(role)?.to_matrix()
}

impl NetworkParams<f32> {
    /// Every tensor keyed by role; `meta` holds the config.
    pub fn to_tensor_dir(&self, cfg: &NetworkConfig) -> Result<TensorDir> {
        let mut dir = TensorDir {
            meta: serde_json::to_value(cfg)?,
            ..Default::default()
        };
        dir.insert_conv("head", &self.head_conv);
        for (i, stage) in self.rirbs.iter().enumerate() {
            match stage {
                RirbStage::Unfused(p) => {
                    dir.insert_conv(&format!("rirb{i}.expand"), p.expand());
                    dir.insert_conv(&format!("rirb{i}.spatial"), p.spatial());
                    dir.insert_conv(&format!("rirb{i}.project"), p.project());
                }
                RirbStage::Fused(f) => dir.insert_conv(&format!("rirb{i}.fused"), f.kernel()),
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layer{i}");
            for (name, m) in [
                ("w_q", &l.attn.w_q),
                ("w_k", &l.attn.w_k),
                ("w_v", &l.attn.w_v),
                ("w_o", &l.attn.w_o),
            ] {
                dir.insert(format!("{p}.attn.{name}"), RawTensor::from_matrix(m));
            }
            dir.insert(
                format!("{p}.ln1.gamma"),
                RawTensor::from_vector(&l.ln1_gamma),
            );
            dir.insert(format!("{p}.ln1.beta"), RawTensor::from_vector(&l.ln1_beta));
            dir.insert(
                format!("{p}.ln2.gamma"),
                RawTensor::from_vector(&l.ln2_gamma),
            );
            dir.insert(format!("{p}.ln2.beta"), RawTensor::from_vector(&l.ln2_beta));
            dir.insert(
                format!("{p}.ffn_in.weight"),
                RawTensor::from_matrix(&l.ffn_in.weight),
            );
            dir.insert(
                format!("{p}.ffn_in.bias"),
                RawTensor::from_vector(&l.ffn_in.bias),
            );
            dir.insert(
                format!("{p}.ffn_out.weight"),
                RawTensor::from_matrix(&l.ffn_out.weight),
            );
            dir.insert(
                format!("{p}.ffn_out.bias"),
                RawTensor::from_vector(&l.ffn_out.bias),
            );
            if let Some(g) = &l.generator {
                dir.insert_conv(&format!("{p}.gen.conv1"), g.conv1());
                dir.insert_conv(&format!("{p}.gen.conv2"), g.conv2());
            }
        }
        dir.insert_conv("tail", &self.tail_conv);
        Ok(dir)
    }

    pub fn from_tensor_dir(dir: &TensorDir, cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let head_conv = dir.conv("head")?;
        let mut rirbs = Vec::with_capacity(cfg.rirb_count);
        for i in 0..cfg.rirb_count {
            let fused_role = format!("rirb{i}.fused.weight");
            if dir.tensors.contains_key(&fused_role) {
                rirbs.push(RirbStage::Fused(FusedConv::new(
                    dir.conv(&format!("rirb{i}.fused"))?,
                )?));
            } else {
                rirbs.push(RirbStage::Unfused(RirbParams::new(
                    dir.conv(&format!("rirb{i}.expand"))?,
                    dir.conv(&format!("rirb{i}.spatial"))?,
                    dir.conv(&format!("rirb{i}.project"))?,
                    true,
                )?));
            }
        }
        let mut layers = Vec::with_capacity(cfg.decoder_layers);
        for i in 0..cfg.decoder_layers {
            let p = format!("layer{i}");
            let attn = AttentionParams::new(
                matrix_tensor(dir, &format!("{p}.attn.w_q"))?,
                matrix_tensor(dir, &format!("{p}.attn.w_k"))?,
                matrix_tensor(dir, &format!("{p}.attn.w_v"))?,
                matrix_tensor(dir, &format!("{p}.attn.w_o"))?,
                cfg.heads,
            )?;
            let generator = match cfg.attention_variant {
                AttentionVariant::Shrinking => Some(LowLevelGenParams::new(
                    dir.conv(&format!("{p}.gen.conv1"))?,
                    dir.conv(&format!("{p}.gen.conv2"))?,
                    cfg.head_dim(),
                )?),
                _ => None,
            };
            layers.push(DecoderLayerParams {
                attn,
                ln1_gamma: vec_tensor(dir, &format!("{p}.ln1.gamma"))?,
                ln1_beta: vec_tensor(dir, &format!("{p}.ln1.beta"))?,
                ln2_gamma: vec_tensor(dir, &format!("{p}.ln2.gamma"))?,
                ln2_beta: vec_tensor(dir, &format!("{p}.ln2.beta"))?,
                ffn_in: Linear::new(
                    matrix_tensor(dir, &format!("{p}.ffn_in.weight"))?,
                    vec_tensor(dir, &format!("{p}.ffn_in.bias"))?,
                )?,
                ffn_out: Linear::new(
                    matrix_tensor(dir, &format!("{p}.ffn_out.weight"))?,
                    vec_tensor(dir, &format!("{p}.ffn_out.bias"))?,
                )?,
                generator,
            });
        }
        let tail_conv = dir.conv("tail")?;
        Ok(Self {
            head_conv,
            rirbs,
            layers,
            tail_conv,
        })
    }
}

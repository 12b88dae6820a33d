//! Architecture configuration and parameter layout of the encoder, the light
//! decoder and the classification head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub layer_norm_eps: Scalar,
    /// Standard deviation of the Gaussian initialiser for weights, class
    /// token and position embeddings.
    pub init_std: Scalar,
    /// Dropout on the attention projection and MLP outputs while training.
    pub dropout: Scalar,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::nano()
    }
}

impl EncoderConfig {
    fn with_dims(embed_dim: usize, depth: usize, heads: usize) -> Self {
        Self {
            image_size: 256,
            patch_size: 16,
            channels: 1,
            embed_dim,
            depth,
            heads,
            mlp_ratio: 4,
            layer_norm_eps: 1e-6,
            init_std: 0.02,
            dropout: 0.0,
        }
    }

    /// K=64, L=4, h=2.
    pub fn nano() -> Self {
        Self::with_dims(64, 4, 2)
    }

    /// K=128, L=8, h=4.
    pub fn micro() -> Self {
        Self::with_dims(128, 8, 4)
    }

    /// ViT-T: K=192, L=12, h=3.
    pub fn tiny() -> Self {
        Self::with_dims(192, 12, 3)
    }

    /// ViT-S: K=384, L=12, h=6.
    pub fn small() -> Self {
        Self::with_dims(384, 12, 6)
    }

    /// ViT-B: K=768, L=12, h=12.
    pub fn base() -> Self {
        Self::with_dims(768, 12, 12)
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "nano" | "vit-nano" => Some(Self::nano()),
            "micro" | "vit-micro" => Some(Self::micro()),
            "tiny" | "vit-t" => Some(Self::tiny()),
            "small" | "vit-s" => Some(Self::small()),
            "base" | "vit-b" => Some(Self::base()),
            _ => None,
        }
    }

    pub fn with_image(mut self, image_size: usize, patch_size: usize) -> Self {
        self.image_size = image_size;
        self.patch_size = patch_size;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patch tokens plus the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            return Err("channels and mlp_ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Default skip-connection block set: the rounded fractions
    /// {L/2, 2L/3, 5L/6, L}, which is {6, 8, 10, 12} at L=12.
    pub fn default_skip_blocks(&self) -> Vec<usize> {
        let l = self.depth as f64;
        let mut b: Vec<usize> = [0.5, 2.0 / 3.0, 5.0 / 6.0, 1.0]
            .iter()
            .map(|f| ((f * l).round() as usize).max(1))
            .collect();
        b.dedup();
        b.retain(|&i| i <= self.depth);
        b
    }

    /// Encoder parameter count: patch projection, class token, position
    /// embeddings, all blocks and the final norm. Decoder and head excluded.
    pub fn encoder_param_count(&self) -> usize {
        let k = self.embed_dim;
        let hidden = self.hidden_dim();
        let patch = self.patch_dim() * k + k;
        let embeddings = k + self.tokens() * k;
        let block = 2 * (2 * k) + (k * 3 * k + 3 * k) + (k * k + k) + (k * hidden + hidden) + (hidden * k + k);
        patch + embeddings + self.depth * block + 2 * k
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    pub norm1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayout {
    pub patch: Linear,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<BlockLayout>,
    pub norm: Norm,
}

/// Two point-wise projections with GeLU between, then a stride-p transposed
/// convolution (a per-token linear map to `C*p*p` pixels plus a per-channel
/// bias).
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayout {
    pub pointwise1: Linear,
    pub pointwise2: Linear,
    pub deconv_weight: ParamId,
    pub deconv_bias: ParamId,
}

/// FC with K nodes, GeLU, slice pooling, then a 2-node linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLayout {
    pub fc: Linear,
    pub out: Linear,
}

pub const NUM_CLASSES: usize = 2;

/// All learnable state of one model: encoder plus optional decoder and head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: EncoderConfig,
    pub params: ParamStore,
    pub encoder: EncoderLayout,
    pub decoder: Option<DecoderLayout>,
    pub head: Option<HeadLayout>,
}

struct Builder<'a, R: Rng + ?Sized> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    std: Scalar,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = Tensor::randn(&[fan_in, fan_out], self.std, self.rng);
        Linear {
            weight: self.store.insert(format!("{name}.weight"), w, true),
            bias: self.store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]), false),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gain: self.store.insert(format!("{name}.gain"), Tensor::full(&[dim], 1.0), false),
            bias: self.store.insert(format!("{name}.bias"), Tensor::zeros(&[dim]), false),
        }
    }

    fn gaussian(&mut self, name: &str, shape: &[usize], decay: bool) -> ParamId {
        let t = Tensor::randn(shape, self.std, self.rng);
        self.store.insert(name, t, decay)
    }
}

impl ModelState {
    /// Freshly initialised encoder with the requested extra components.
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, with_decoder: bool, with_head: bool, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let k = config.embed_dim;
        let mut b = Builder {
            store: &mut params,
            rng,
            std: config.init_std,
        };
        let patch = b.linear("encoder.patch_embed", config.patch_dim(), k);
        let cls_token = b.gaussian("encoder.cls_token", &[k], false);
        let pos_embed = b.gaussian("encoder.pos_embed", &[config.tokens(), k], false);
        let blocks = (0..config.depth)
            .map(|i| {
                let p = format!("encoder.blocks.{i}");
                BlockLayout {
                    norm1: b.norm(&format!("{p}.norm1"), k),
                    qkv: b.linear(&format!("{p}.attn.qkv"), k, 3 * k),
                    proj: b.linear(&format!("{p}.attn.proj"), k, k),
                    norm2: b.norm(&format!("{p}.norm2"), k),
                    fc1: b.linear(&format!("{p}.mlp.fc1"), k, config.hidden_dim()),
                    fc2: b.linear(&format!("{p}.mlp.fc2"), config.hidden_dim(), k),
                }
            })
            .collect();
        let norm = b.norm("encoder.norm", k);
        let encoder = EncoderLayout {
            patch,
            cls_token,
            pos_embed,
            blocks,
            norm,
        };
        let decoder = with_decoder.then(|| DecoderLayout {
            pointwise1: b.linear("decoder.pointwise1", k, k),
            pointwise2: b.linear("decoder.pointwise2", k, k),
            deconv_weight: b.gaussian("decoder.deconv.weight", &[k, config.patch_dim()], true),
            deconv_bias: b.store.insert("decoder.deconv.bias", Tensor::zeros(&[config.channels]), false),
        });
        let head = with_head.then(|| HeadLayout {
            fc: b.linear("head.fc", k, k),
            out: b.linear("head.out", k, NUM_CLASSES),
        });
        Self {
            config,
            params,
            encoder,
            decoder,
            head,
        }
    }

    /// Copy every parameter whose name exists in `other` with the same shape.
    /// Returns the number of parameters copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for p in self.params.iter_mut() {
            if let Some(id) = other.find(&p.name) {
                let src = other.get(id);
                if src.shape() == p.value.shape() {
                    p.value = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn encoder_param_count(&self) -> usize {
        self.params.count_prefix("encoder.")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn skip_blocks_default() {
        assert_eq!(EncoderConfig::small().default_skip_blocks(), vec![6, 8, 10, 12]);
        assert_eq!(EncoderConfig::nano().default_skip_blocks(), vec![2, 3, 4]);
    }

    #[test]
    fn analytic_count_matches_built_model() {
        let cfg = EncoderConfig::nano().with_image(32, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = ModelState::new(cfg.clone(), true, true, &mut rng);
        assert_eq!(m.encoder_param_count(), cfg.encoder_param_count());
    }

    #[test]
    fn preset_parameter_counts_track_reference_sizes() {
        // ViT-T ~5M, ViT-S ~21M, ViT-B ~86M (encoder only, grayscale, 256px).
        let within = |n: usize, target: f64, tol: f64| ((n as f64 - target) / target).abs() < tol;
        let s = EncoderConfig::small().encoder_param_count();
        assert!(within(s, 21e6, 0.05), "ViT-S {s}");
        let t = EncoderConfig::tiny().encoder_param_count();
        assert!(within(t, 5e6, 0.10), "ViT-T {t}");
        let b = EncoderConfig::base().encoder_param_count();
        assert!(within(b, 86e6, 0.05), "ViT-B {b}");
    }

    #[test]
    fn validation_rejects_bad_geometry() {
        assert!(EncoderConfig::nano().with_image(30, 16).validate().is_err());
        let mut c = EncoderConfig::nano();
        c.heads = 3;
        assert!(c.validate().is_err());
        assert!(EncoderConfig::small().validate().is_ok());
    }
}

//! Patch embedding, fixed 2D sine-cosine positions, the ViT encoder and the
//! online/EMA-target encoder pair.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, domain_error, shape_error, Result};
use crate::masking::{GridShape, MaskSpec};
use crate::nn::{ones_weights, Block, Bound, Init, LayerNorm, Linear, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return config_err(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            return config_err("channels and mlp_ratio must be positive");
        }
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            return config_err(format!("embed_dim {} must be a positive multiple of 4", self.embed_dim));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return config_err(format!("heads {} must divide embed_dim {}", self.heads, self.embed_dim));
        }
        Ok(())
    }

    pub fn grid(&self) -> GridShape {
        GridShape::square(self.image_size / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        self.grid().area()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// `[H×W×C]` image to `[patches × p·p·C]`, patches in row-major grid order and
/// each patch flattened as (row, col, channel).
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let [h, w, c] = *image.shape() else {
        return Err(shape_error("patchify", image.shape(), &[0, 0, 0]));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(shape_error("patchify", image.shape(), &[patch, patch]));
    }
    let (gr, gc) = (h / patch, w / patch);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for pr in 0..gr {
        for pc in 0..gc {
            for dy in 0..patch {
                let row = pr * patch + dy;
                let start = (row * w + pc * patch) * c;
                out.extend_from_slice(&src[start..start + patch * c]);
            }
        }
    }
    Ok(Tensor::new(vec![gr * gc, patch * patch * c], out)?)
}

pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, h: usize, w: usize, c: usize, patch: usize) -> Result<Tensor<T>> {
    if patch == 0 || h % patch != 0 || w % patch != 0 || patches.shape() != [(h / patch) * (w / patch), patch * patch * c] {
        return Err(shape_error("unpatchify", patches.shape(), &[h, w, c]));
    }
    let gc = w / patch;
    let src = patches.data();
    let mut out = vec![T::zero(); h * w * c];
    for (k, pdata) in src.chunks(patch * patch * c).enumerate() {
        let (pr, pc) = (k / gc, k % gc);
        for dy in 0..patch {
            let row = pr * patch + dy;
            let start = (row * w + pc * patch) * c;
            out[start..start + patch * c].copy_from_slice(&pdata[dy * patch * c..(dy + 1) * patch * c]);
        }
    }
    Ok(Tensor::new(vec![h, w, c], out)?)
}

/// Fixed 2D sine-cosine embedding. The first half of the channels encodes the
/// grid row, the second half the column; each half is `[sin(pos·ω_k) ‖
/// cos(pos·ω_k)]` with `ω_k = 10000^(-k/(d/4))`.
pub fn sincos_pos_embed<T: Scalar>(grid: GridShape, d: usize) -> Result<Tensor<T>> {
    if d == 0 || d % 4 != 0 {
        return config_err(format!("positional embedding dim {d} must be a positive multiple of 4"));
    }
    let q = d / 4;
    let omega: Vec<f64> = (0..q).map(|k| 1.0 / 10000f64.powf(k as f64 / q as f64)).collect();
    let mut data = Vec::with_capacity(grid.area() * d);
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            for pos in [r as f64, c as f64] {
                data.extend(omega.iter().map(|&w| T::lit((pos * w).sin())));
                data.extend(omega.iter().map(|&w| T::lit((pos * w).cos())));
            }
        }
    }
    Ok(Tensor::new(vec![grid.area(), d], data)?)
}

/// Parameter layout of a ViT encoder. The final LayerNorm exists only when
/// `depth > 0`, so a depth-0 encoder is exactly patch projection + positions.
#[derive(Debug, Clone)]
pub struct VitEncoder {
    pub cfg: EncoderConfig,
    pub patch_embed: Linear,
    pub blocks: Vec<Block>,
    pub norm: Option<LayerNorm>,
    pos: Tensor<f64>,
}

impl VitEncoder {
    pub fn new<T: Scalar, R: Rng>(cfg: &EncoderConfig, ps: &mut ParamSet<T>, init: &mut Init<R>) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let patch_embed = Linear::new(ps, init, "encoder.patch_embed", cfg.patch_dim(), d, false);
        // Fan-in scaled so that image content is not drowned out by the unit
        // amplitude position embedding on small patches.
        *ps.get_mut(patch_embed.w) = init.trunc_normal(vec![cfg.patch_dim(), d], (cfg.patch_dim() as f64).powf(-0.5));
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(ps, init, &format!("encoder.blocks.{i}"), d, cfg.heads, cfg.mlp_ratio))
            .collect();
        let norm = (cfg.depth > 0).then(|| LayerNorm::new(ps, "encoder.norm", d));
        Ok(VitEncoder {
            cfg: cfg.clone(),
            patch_embed,
            blocks,
            norm,
            pos: sincos_pos_embed(cfg.grid(), d)?,
        })
    }

    pub fn pos_embed<T: Scalar>(&self) -> Tensor<T> {
        self.pos.cast()
    }

    /// Runs on the patch rows `indices` only; dropped patches never enter the
    /// sequence.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, patches: &Tensor<T>, indices: &[usize]) -> Result<Var> {
        if indices.is_empty() {
            return Err(domain_error("encoder", "empty patch set"));
        }
        let x = g.constant(patches.select_rows(indices)?);
        let pos = g.constant(self.pos.select_rows(indices)?.cast());
        let h = self.patch_embed.forward(g, p, x)?;
        let mut h = g.add(h, pos)?;
        let kw = ones_weights(g, indices.len());
        for b in &self.blocks {
            h = b.forward(g, p, h, kw, None)?;
        }
        if let Some(n) = &self.norm {
            h = n.forward(g, p, h)?;
        }
        Ok(h)
    }

    pub fn num_params(cfg: &EncoderConfig) -> usize {
        let blocks = cfg.depth * Block::num_params(cfg.embed_dim, cfg.mlp_ratio);
        let norm = if cfg.depth > 0 { 2 * cfg.embed_dim } else { 0 };
        Linear::num_params(cfg.patch_dim(), cfg.embed_dim) + blocks + norm
    }
}

/// Online encoder θ and EMA target θ̄ sharing one parameter layout.
#[derive(Debug, Clone)]
pub struct EncoderPair<T> {
    pub encoder: VitEncoder,
    pub online: ParamSet<T>,
    pub target: ParamSet<T>,
}

impl<T: Scalar> EncoderPair<T> {
    pub fn new<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let mut online = ParamSet::new();
        let encoder = VitEncoder::new(cfg, &mut online, &mut Init { rng })?;
        let target = online.clone();
        Ok(EncoderPair { encoder, online, target })
    }

    /// `z_x`: online features of the context patches, `[|B_x| × d]`.
    pub fn encode_context(&self, g: &mut Graph<T>, online: &Bound, patches: &Tensor<T>, mask: &MaskSpec) -> Result<Var> {
        self.encoder.forward(g, online, patches, &mask.context)
    }

    /// `z_y` per target block: the target encoder sees the full image, then
    /// rows of each block are taken in ascending patch order. Computed on a
    /// private graph, so the values carry no gradient edges at all.
    pub fn encode_target(&self, patches: &Tensor<T>, mask: &MaskSpec, layernorm: bool) -> Result<Vec<Tensor<T>>> {
        if mask.targets.is_empty() || mask.targets.iter().any(Vec::is_empty) {
            return Err(domain_error("encode_target", "empty target set"));
        }
        let full = self.target_features(patches, layernorm)?;
        mask.targets.iter().map(|b| Ok(full.select_rows(b)?)).collect()
    }

    /// Target encoder over every patch, `[num_patches × d]`.
    pub fn target_features(&self, patches: &Tensor<T>, layernorm: bool) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.target.bind(&mut g, false);
        let all: Vec<usize> = (0..self.encoder.cfg.num_patches()).collect();
        let mut h = self.encoder.forward(&mut g, &p, patches, &all)?;
        if layernorm {
            h = g.layernorm(h, None, None, T::lit(crate::nn::LN_EPS))?;
        }
        Ok(g.value(h).clone())
    }

    /// θ̄ ← m·θ̄ + (1−m)·θ.
    pub fn ema_update(&mut self, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return config_err(format!("EMA momentum {m} outside [0, 1]"));
        }
        let m = T::lit(m);
        let one_m = T::one() - m;
        for (t, o) in self.target.tensors_mut().iter_mut().zip(self.online.tensors()) {
            for (a, &b) in t.data_mut().iter_mut().zip(o.data()) {
                *a = m * *a + one_m * b;
            }
        }
        Ok(())
    }
}

//! Hierarchical windowed-attention encoder with a patch-expanding head, and
//! the mirrored decoder that maps latents back to pixels.
//!
//! Stage `i` runs on a grid of `H/(4·2^(i−1)) × W/(4·2^(i−1))` tokens. The
//! latent for downsampling factor `f ∈ {2, 4, 8}` is the patch expansion of
//! `V₂`, `V₃` or `V₄` respectively, which multiplies that stage's resolution
//! by four.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layout;
use crate::nn::{multi_head_attention, Binder, FeedForward, LayerNorm, Linear, SelfAttention};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

/// RGB image with values in `[0, 1]`, stored `[H, W, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Tensor,
}

impl Default for ImageTensor {
    fn default() -> Self {
        Self::filled(0, 0, [0.0; 3])
    }
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let data = Tensor::new(&[height, width, 3], data)?;
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = Tensor::from_fn(&[height, width, 3], |i| rgb[i % 3]);
        Self { height, width, data }
    }

    pub fn pixel(&self, r: usize, c: usize) -> [f64; 3] {
        let i = (r * self.width + c) * 3;
        let d = self.data.data();
        [d[i], d[i + 1], d[i + 2]]
    }

    pub fn set_pixel(&mut self, r: usize, c: usize, rgb: [f64; 3]) {
        let i = (r * self.width + c) * 3;
        self.data.data_mut()[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mse(&self, other: &ImageTensor) -> f64 {
        let d = self.data.sub(&other.data).expect("same size");
        d.data().iter().map(|v| v * v).sum::<f64>() / d.len() as f64
    }
}

/// Features of one encoder stage, `[h·w × c]` in raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub stage: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Tensor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageConfig {
    pub layers: [usize; 4],
    pub window: usize,
    pub heads: [usize; 4],
    pub channels: [usize; 4],
}

impl StageConfig {
    /// Tiny-model schedule: layers {2,2,6,2}, 7×7 windows, heads
    /// {3,6,12,24}, channels {96,192,384,768}.
    pub fn tiny() -> Self {
        Self {
            layers: [2, 2, 6, 2],
            window: 7,
            heads: [3, 6, 12, 24],
            channels: [96, 192, 384, 768],
        }
    }

    /// Desk-scale default with channels {32,64,128,256}.
    pub fn desk() -> Self {
        Self {
            layers: [2, 2, 6, 2],
            window: 7,
            heads: [1, 2, 4, 8],
            channels: [32, 64, 128, 256],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window size must be >= 1".into()));
        }
        for i in 0..4 {
            let (c, h) = (self.channels[i], self.heads[i]);
            if h == 0 || c % h != 0 {
                return Err(Error::Config(format!(
                    "stage {}: heads {h} must divide channels {c}",
                    i + 1
                )));
            }
            if i > 0 && c != 2 * self.channels[i - 1] {
                return Err(Error::Config(format!(
                    "stage {}: channels must double ({} -> {c})",
                    i + 1,
                    self.channels[i - 1]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub stages: StageConfig,
    /// Downsampling factor of the latent: 2, 4 or 8.
    pub factor: usize,
    /// Latent channel count `C_t`.
    pub latent_channels: usize,
    /// Window blocks per decoder stage.
    pub decoder_layers: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stages: StageConfig::desk(),
            factor: 4,
            latent_channels: 3,
            decoder_layers: 1,
        }
    }
}

impl BackboneConfig {
    /// Stage (1-based) whose features feed the patch-expanding layer.
    pub fn latent_stage(&self) -> Result<usize> {
        match self.factor {
            2 => Ok(2),
            4 => Ok(3),
            8 => Ok(4),
            f => Err(Error::Config(format!(
                "downsampling factor must be one of 2, 4, 8; got {f}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stages.validate()?;
        let j = self.latent_stage()?;
        check_expand(self.stages.channels[j - 1], self.latent_channels)
    }
}

fn check_expand(c_in: usize, c_t: usize) -> Result<()> {
    if c_t == 0 || c_in < 16 * c_t {
        return Err(Error::Constraint(format!(
            "patch expanding needs C_i >= 16*C_t, got C_i = {c_in}, C_t = {c_t} (needs {})",
            16 * c_t
        )));
    }
    Ok(())
}

/// Grid side of stage `i` (1-based) for an image side `n`.
pub fn stage_side(n: usize, stage: usize) -> usize {
    n / (4 << (stage - 1))
}

/// Window multi-head self-attention followed by a feed-forward block, both
/// pre-normalised with residuals.
#[derive(Debug, Clone)]
pub struct WindowBlock {
    pub attn: SelfAttention,
    pub ffn: FeedForward,
}

impl WindowBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 4 * dim, rng),
        }
    }

    pub fn forward<'t>(&self, cx: &Binder<'t>, x: Var<'t>, h: usize, w: usize, win: usize) -> Var<'t> {
        let tape = cx.tape();
        let c = x.value().cols();
        let normed = self.attn.norm.forward(cx, x);
        let (fwd, hp, wp) = layout::window_partition(h, w, win, c);
        let xw = normed.gather(fwd, &[hp * wp, c]);
        let q = self.attn.q.forward(cx, xw);
        let k = self.attn.k.forward(cx, xw);
        let v = self.attn.v.forward(cx, xw);
        let per = win * win;
        let n_windows = hp * wp / per;
        let outs: Vec<Var<'t>> = (0..n_windows)
            .map(|i| {
                let (lo, hi) = (i * per, (i + 1) * per);
                let (o, _) = multi_head_attention(
                    q.slice_rows(lo, hi),
                    k.slice_rows(lo, hi),
                    v.slice_rows(lo, hi),
                    self.attn.heads,
                );
                o
            })
            .collect();
        let o = if outs.len() == 1 { outs[0] } else { tape.concat_rows(&outs) };
        let back = o.gather(layout::window_reverse(h, w, win, c), &[h * w, c]);
        let x = x.add(self.attn.out.forward(cx, back));
        self.ffn.forward(cx, x)
    }
}

/// 2×2 neighbourhood concatenation, normalisation and a `4C → 2C` map.
#[derive(Debug, Clone)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduce: Linear,
}

impl PatchMerging {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * dim),
            reduce: Linear::new(store, &format!("{name}.reduce"), 4 * dim, 2 * dim, false, rng),
        }
    }

    pub fn forward<'t>(&self, cx: &Binder<'t>, x: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("patch merging needs even grid, got {h}x{w}")));
        }
        let c = x.value().cols();
        let cat = x.gather(layout::merge_2x2(h, w, c), &[(h / 2) * (w / 2), 4 * c]);
        Ok(self.reduce.forward(cx, self.norm.forward(cx, cat)))
    }
}

/// Linear map `C_i → s²·C_t` followed by rearranging each token into an
/// `s×s` block of `C_t` channels.
#[derive(Debug, Clone)]
pub struct PatchExpand {
    pub proj: Linear,
    pub scale: usize,
    pub out_channels: usize,
}

impl PatchExpand {
    /// The 4× expansion used for latents; requires `c_in ≥ 16·c_t`.
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_t: usize, rng: &mut impl Rng) -> Result<Self> {
        check_expand(c_in, c_t)?;
        Ok(Self::with_scale(store, name, c_in, c_t, 4, rng))
    }

    pub fn with_scale(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_t: usize,
        scale: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), c_in, scale * scale * c_t, true, rng),
            scale,
            out_channels: c_t,
        }
    }

    pub fn forward<'t>(&self, cx: &Binder<'t>, x: Var<'t>, h: usize, w: usize) -> Var<'t> {
        let s = self.scale;
        let y = self.proj.forward(cx, x);
        y.gather(
            layout::expand_blocks(h, w, self.out_channels, s),
            &[h * s * w * s, self.out_channels],
        )
    }
}

/// Mirror of the encoder: latent patch partition back to stage `j`, then
/// 2× expansions down to stage 1 and a final 4× expansion to pixels.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub unpatch: Linear,
    pub blocks: Vec<Vec<WindowBlock>>,
    pub ups: Vec<PatchExpand>,
    pub to_pixels: PatchExpand,
}

/// Everything the encoder produces for one image.
pub struct Encoded<'t> {
    pub features: Vec<Var<'t>>,
    pub sides: Vec<(usize, usize)>,
    pub latent: Var<'t>,
    pub latent_side: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub embed: Linear,
    pub embed_norm: LayerNorm,
    pub stages: Vec<Vec<WindowBlock>>,
    pub merges: Vec<PatchMerging>,
    pub expand: PatchExpand,
    pub decoder: Decoder,
}

/// Splits an image into non-overlapping 4×4 patches: `[(H/4)(W/4) × 48]`
/// tokens in raster order, each holding its 16 pixels' RGB in raster order.
pub fn patch_tokens(img: &ImageTensor) -> Result<Tensor> {
    let (h, w) = (img.height, img.width);
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "image dimensions must be divisible by 4, got {h}x{w}"
        )));
    }
    let idx = layout::partition_blocks(h, w, 3, 4);
    let d = img.data.data();
    Tensor::new(&[(h / 4) * (w / 4), 48], idx.iter().map(|&i| d[i]).collect())
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let sc = &cfg.stages;
        let ch = sc.channels;
        let embed = Linear::new(store, "backbone.embed", 48, ch[0], true, rng);
        let embed_norm = LayerNorm::new(store, "backbone.embed_norm", ch[0]);
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        for i in 0..4 {
            if i > 0 {
                merges.push(PatchMerging::new(store, &format!("backbone.merge{}", i + 1), ch[i - 1], rng));
            }
            stages.push(
                (0..sc.layers[i])
                    .map(|l| WindowBlock::new(store, &format!("backbone.stage{}.{l}", i + 1), ch[i], sc.heads[i], rng))
                    .collect(),
            );
        }
        let j = cfg.latent_stage()?;
        let expand = PatchExpand::new(store, "backbone.expand", ch[j - 1], cfg.latent_channels, rng)?;
        let unpatch = Linear::new(store, "decoder.unpatch", 16 * cfg.latent_channels, ch[j - 1], true, rng);
        let mut blocks = Vec::new();
        let mut ups = Vec::new();
        for i in (0..j).rev() {
            blocks.push(
                (0..cfg.decoder_layers)
                    .map(|l| WindowBlock::new(store, &format!("decoder.stage{}.{l}", i + 1), ch[i], sc.heads[i], rng))
                    .collect(),
            );
            if i > 0 {
                ups.push(PatchExpand::with_scale(store, &format!("decoder.up{}", i + 1), ch[i], ch[i - 1], 2, rng));
            }
        }
        let to_pixels = PatchExpand::with_scale(store, "decoder.to_pixels", ch[0], 3, 4, rng);
        if let Some(b) = to_pixels.proj.b {
            store.get_mut(b).value = Tensor::full(&[48], 0.5);
        }
        Ok(Self {
            cfg,
            embed,
            embed_norm,
            stages,
            merges,
            expand,
            decoder: Decoder {
                unpatch,
                blocks,
                ups,
                to_pixels,
            },
        })
    }

    fn check_image(&self, img: &ImageTensor) -> Result<()> {
        if img.height % 32 != 0 || img.width % 32 != 0 || img.height == 0 || img.width == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be divisible by 32, got {}x{}",
                img.height, img.width
            )));
        }
        Ok(())
    }

    /// Stage-1 features: patch partition plus the linear embedding.
    pub fn patch_partition<'t>(&self, cx: &Binder<'t>, img: &ImageTensor) -> Result<Var<'t>> {
        let tokens = cx.tape().constant(patch_tokens(img)?);
        Ok(self.embed_norm.forward(cx, self.embed.forward(cx, tokens)))
    }

    /// Runs all four stages and the patch-expanding head.
    pub fn encode<'t>(&self, cx: &Binder<'t>, img: &ImageTensor) -> Result<Encoded<'t>> {
        self.check_image(img)?;
        let win = self.cfg.stages.window;
        let mut x = self.patch_partition(cx, img)?;
        let (mut h, mut w) = (img.height / 4, img.width / 4);
        let mut features = Vec::with_capacity(4);
        let mut sides = Vec::with_capacity(4);
        for i in 0..4 {
            if i > 0 {
                x = self.merges[i - 1].forward(cx, x, h, w)?;
                h /= 2;
                w /= 2;
            }
            for block in &self.stages[i] {
                x = block.forward(cx, x, h, w, win);
            }
            features.push(x);
            sides.push((h, w));
        }
        let j = self.cfg.latent_stage()?;
        let (hj, wj) = sides[j - 1];
        let latent = self.expand.forward(cx, features[j - 1], hj, wj);
        Ok(Encoded {
            features,
            sides,
            latent,
            latent_side: (4 * hj, 4 * wj),
        })
    }

    /// Decodes a `[lh·lw × C_t]` latent to `[H·W × 3]` pixels clamped to [0, 1].
    pub fn decode<'t>(&self, cx: &Binder<'t>, latent: Var<'t>, lh: usize, lw: usize) -> Result<Var<'t>> {
        let ct = self.cfg.latent_channels;
        if lh % 4 != 0 || lw % 4 != 0 || latent.value().cols() != ct || latent.value().rows() != lh * lw {
            return Err(Error::Shape(format!(
                "latent {:?} inconsistent with {lh}x{lw}x{ct}",
                latent.value().shape()
            )));
        }
        let win = self.cfg.stages.window;
        let (mut h, mut w) = (lh / 4, lw / 4);
        let tokens = latent.gather(layout::partition_blocks(lh, lw, ct, 4), &[h * w, 16 * ct]);
        let mut x = self.decoder.unpatch.forward(cx, tokens);
        let levels = self.decoder.blocks.len();
        for (lvl, blocks) in self.decoder.blocks.iter().enumerate() {
            for b in blocks {
                x = b.forward(cx, x, h, w, win);
            }
            if lvl + 1 < levels {
                x = self.decoder.ups[lvl].forward(cx, x, h, w);
                h *= 2;
                w *= 2;
            }
        }
        Ok(self.decoder.to_pixels.forward(cx, x, h, w).clamp(0.0, 1.0))
    }

    pub fn encode_image(&self, store: &ParamStore, img: &ImageTensor) -> Result<(Tensor, Vec<FeatureMap>)> {
        let tape = Tape::new();
        let cx = Binder::frozen(&tape, store);
        let enc = self.encode(&cx, img)?;
        let features = enc
            .features
            .iter()
            .zip(&enc.sides)
            .enumerate()
            .map(|(i, (f, &(h, w)))| {
                let data = (*f.value()).clone();
                FeatureMap {
                    stage: i + 1,
                    h,
                    w,
                    c: data.cols(),
                    data,
                }
            })
            .collect();
        let (lh, lw) = enc.latent_side;
        let latent = (*enc.latent.value()).clone().reshape(&[lh, lw, self.cfg.latent_channels])?;
        Ok((latent, features))
    }

    pub fn decode_latent(&self, store: &ParamStore, latent: &Tensor) -> Result<ImageTensor> {
        let shape = latent.shape();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("latent must be [h, w, c], got {shape:?}")));
        }
        let (lh, lw) = (shape[0], shape[1]);
        let tape = Tape::new();
        let cx = Binder::frozen(&tape, store);
        let z = tape.constant(latent.clone().reshape(&[lh * lw, shape[2]])?);
        let px = self.decode(&cx, z, lh, lw)?;
        let f = self.cfg.factor;
        ImageTensor::new(lh * f, lw * f, px.value().data().to_vec())
    }

    /// Trainable parameters for reconstruction: the patch embedding, the
    /// patch-expanding head and the decoder.
    pub fn is_reconstruction_param(name: &str) -> bool {
        name.starts_with("backbone.embed") || name.starts_with("backbone.expand") || name.starts_with("decoder.")
    }
}

/// Reconstruction loss for one image: pixel MSE plus `kl_weight` times the
/// unit-variance Gaussian KL of the latent (`½·mean(z²)`).
pub fn reconstruction_loss<'t>(
    backbone: &Backbone,
    cx: &Binder<'t>,
    img: &ImageTensor,
    kl_weight: f64,
) -> Result<Var<'t>> {
    let enc = backbone.encode(cx, img)?;
    let (lh, lw) = enc.latent_side;
    let out = backbone.decode(cx, enc.latent, lh, lw)?;
    let target = cx.tape().constant(img.data.clone().reshape(&[img.height * img.width, 3])?);
    let mse = out.sub(target).square().mean();
    if kl_weight > 0.0 {
        Ok(mse.add(enc.latent.square().mean().scale(0.5 * kl_weight)))
    } else {
        Ok(mse)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn random_image(h: usize, w: usize, rng: &mut impl Rng) -> ImageTensor {
        ImageTensor::new(h, w, (0..h * w * 3).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn patch_tokens_grid_and_constancy() {
        let img = ImageTensor::filled(224, 224, [0.1, 0.5, 0.9]);
        let t = patch_tokens(&img).unwrap();
        assert_eq!(t.shape(), &[56 * 56, 48]);
        assert!((0..t.rows()).all(|r| t.row(r) == t.row(0)));
        let img = ImageTensor::filled(480, 480, [0.0; 3]);
        assert_eq!(patch_tokens(&img).unwrap().rows(), 120 * 120);
        assert!(patch_tokens(&ImageTensor::filled(30, 32, [0.0; 3])).is_err());
    }

    #[test]
    fn stage_sides_follow_halving() {
        for (i, s) in [56, 28, 14, 7].into_iter().enumerate() {
            assert_eq!(stage_side(224, i + 1), s);
        }
    }

    #[test]
    fn heads_must_divide_channels() {
        let mut sc = StageConfig::desk();
        sc.heads[1] = 3;
        assert!(matches!(sc.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_attention_gives_window_mean_plus_residual() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let c = 4;
        let block = WindowBlock::new(&mut store, "b", c, 1, &mut r);
        // q = 0 gives uniform attention; v and out are identities; ffn output zero
        store.get_mut(block.attn.q.w).value = Tensor::zeros(&[c, c]);
        store.get_mut(block.attn.v.w).value = Tensor::identity(c);
        store.get_mut(block.attn.out.w).value = Tensor::identity(c);
        store.get_mut(block.ffn.fc2.w).value = Tensor::zeros(&[4 * c, c]);
        let x = Tensor::randn(&[49, c], &mut r);
        let tape = Tape::new();
        let cx = Binder::frozen(&tape, &store);
        let y = block.forward(&cx, tape.constant(x.clone()), 7, 7, 7).value();
        let normed = tape.constant(x.clone()).layer_norm(1e-5).value();
        let mean: Vec<f64> = (0..c).map(|j| (0..49).map(|i| normed.get2(i, j)).sum::<f64>() / 49.0).collect();
        for i in 0..49 {
            for j in 0..c {
                assert!((y.get2(i, j) - (x.get2(i, j) + mean[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn window_attention_is_permutation_equivariant_within_window() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let block = WindowBlock::new(&mut store, "b", 4, 2, &mut r);
        let x = Tensor::randn(&[49, 4], &mut r);
        let perm: Vec<usize> = (0..49).map(|i| (i * 17 + 5) % 49).collect();
        let px = Tensor::from_fn(&[49, 4], |i| x.get2(perm[i / 4], i % 4));
        let tape = Tape::new();
        let cx = Binder::frozen(&tape, &store);
        let y = block.forward(&cx, tape.constant(x), 7, 7, 7).value();
        let py = block.forward(&cx, tape.constant(px), 7, 7, 7).value();
        for i in 0..49 {
            for j in 0..4 {
                assert!((py.get2(i, j) - y.get2(perm[i], j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn window_attention_is_local() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let block = WindowBlock::new(&mut store, "b", 4, 1, &mut r);
        let (h, w) = (7, 14);
        let x = Tensor::randn(&[h * w, 4], &mut r);
        let mut x2 = x.clone();
        for row in 0..h {
            for col in 0..7 {
                for k in 0..4 {
                    x2.data_mut()[(row * w + col) * 4 + k] += 1.5;
                }
            }
        }
        let tape = Tape::new();
        let cx = Binder::frozen(&tape, &store);
        let y = block.forward(&cx, tape.constant(x), h, w, 7).value();
        let y2 = block.forward(&cx, tape.constant(x2), h, w, 7).value();
        for row in 0..h {
            for col in 7..14 {
                for k in 0..4 {
                    let i = (row * w + col) * 4 + k;
                    assert_eq!(y.data()[i], y2.data()[i]);
                }
            }
        }
    }

    #[test]
    fn padding_handles_non_divisible_grids() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let block = WindowBlock::new(&mut store, "b", 4, 1, &mut r);
        let x = Tensor::randn(&[8 * 5, 4], &mut r);
        let tape = Tape::new();
        let cx = Binder::frozen(&tape, &store);
        let y = block.forward(&cx, tape.constant(x), 8, 5, 7).value();
        assert_eq!(y.shape(), &[40, 4]);
        assert!(y.is_finite());
    }

    #[test]
    fn patch_merging_shapes_and_constancy() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let m = PatchMerging::new(&mut store, "m", 8, &mut r);
        let row = Tensor::randn(&[8], &mut r);
        let x = Tensor::from_fn(&[6 * 6, 8], |i| row.data()[i % 8]);
        let tape = Tape::new();
        let cx = Binder::frozen(&tape, &store);
        let y = m.forward(&cx, tape.constant(x), 6, 6).unwrap().value();
        assert_eq!(y.shape(), &[9, 16]);
        assert!((0..9).all(|i| y.row(i) == y.row(0)));
        let odd = tape.constant(Tensor::zeros(&[15, 8]));
        assert!(m.forward(&cx, odd, 3, 5).is_err());
    }

    #[test]
    fn patch_merging_tiny_shapes() {
        let mut r = rng();
        let mut store = ParamStore::new();
        for (side, c) in [(56, 96), (14, 384)] {
            let m = PatchMerging::new(&mut store, &format!("m{side}"), c, &mut r);
            let tape = Tape::new();
            let cx = Binder::frozen(&tape, &store);
            let x = tape.constant(Tensor::zeros(&[side * side, c]));
            let y = m.forward(&cx, x, side, side).unwrap();
            assert_eq!(y.shape(), vec![(side / 2) * (side / 2), 2 * c]);
        }
    }

    #[test]
    fn patch_expand_constraint_and_shapes() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let e = PatchExpand::new(&mut store, "e1", 384, 24, &mut r).unwrap();
        let tape = Tape::new();
        let cx = Binder::frozen(&tape, &store);
        let y = e.forward(&cx, tape.constant(Tensor::zeros(&[14 * 14, 384])), 14, 14);
        assert_eq!(y.shape(), vec![56 * 56, 24]);
        let e = PatchExpand::new(&mut store, "e2", 768, 48, &mut r).unwrap();
        let tape = Tape::new();
        let cx = Binder::frozen(&tape, &store);
        let y = e.forward(&cx, tape.constant(Tensor::zeros(&[49, 768])), 7, 7);
        assert_eq!(y.shape(), vec![28 * 28, 48]);
        let err = PatchExpand::new(&mut store, "e3", 128, 16, &mut r).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("128") && msg.contains("16") && msg.contains("256"), "{msg}");
    }

    /// Gauss-Jordan inverse, test-only.
    fn invert(a: &Tensor) -> Tensor {
        let n = a.rows();
        let mut m: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut row = a.row(i).to_vec();
                row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        for col in 0..n {
            let piv = (col..n).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs())).unwrap();
            m.swap(col, piv);
            let p = m[col][col];
            for v in m[col].iter_mut() {
                *v /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = m[r][col];
                    if f != 0.0 {
                        for c in 0..2 * n {
                            m[r][c] -= f * m[col][c];
                        }
                    }
                }
            }
        }
        Tensor::from_fn(&[n, n], |i| m[i / n][n + i % n])
    }

    #[test]
    fn patch_expand_has_exact_linear_inverse() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let (ct, h, w) = (2, 3, 2);
        let e = PatchExpand::new(&mut store, "e", 16 * ct, ct, &mut r).unwrap();
        let bias = Tensor::randn(&[16 * ct], &mut r);
        store.get_mut(e.proj.b.unwrap()).value = bias.clone();
        let f = Tensor::randn(&[h * w, 16 * ct], &mut r);
        let tape = Tape::new();
        let cx = Binder::frozen(&tape, &store);
        let out = e.forward(&cx, tape.constant(f.clone()), h, w);
        // inverse: regroup blocks, remove bias, multiply by W⁻¹
        let blocks = out.gather(layout::partition_blocks(4 * h, 4 * w, ct, 4), &[h * w, 16 * ct]);
        let neg_bias = tape.constant(bias.scale(-1.0));
        let winv = tape.constant(invert(store.value(e.proj.w)));
        let back = blocks.add_row(neg_bias).matmul(winv).value();
        assert!(back.max_abs_diff(&f) < 1e-9, "{}", back.max_abs_diff(&f));
    }

    fn small_backbone(factor: usize) -> (ParamStore, Backbone) {
        let mut r = rng();
        let mut store = ParamStore::new();
        let cfg = BackboneConfig {
            stages: StageConfig {
                layers: [1, 1, 1, 1],
                window: 7,
                heads: [1, 2, 2, 4],
                channels: [16, 32, 64, 128],
            },
            factor,
            latent_channels: 2,
            decoder_layers: 1,
        };
        let b = Backbone::new(&mut store, cfg, &mut r).unwrap();
        (store, b)
    }

    #[test]
    fn encode_factor_selects_stage() {
        let mut r = rng();
        let img = random_image(64, 64, &mut r);
        for (f, side) in [(2, 32), (4, 16), (8, 8)] {
            let (store, b) = small_backbone(f);
            let (latent, feats) = b.encode_image(&store, &img).unwrap();
            assert_eq!(latent.shape(), &[side, side, 2]);
            let sides: Vec<usize> = feats.iter().map(|f| f.h).collect();
            assert_eq!(sides, vec![16, 8, 4, 2]);
            assert!(feats.iter().all(|f| f.data.is_finite()));
        }
        let mut cfg = BackboneConfig::default();
        cfg.factor = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn decode_roundtrip_shape_and_determinism() {
        let mut r = rng();
        let img = random_image(64, 64, &mut r);
        let (store, b) = small_backbone(4);
        let (latent, _) = b.encode_image(&store, &img).unwrap();
        let out = b.decode_latent(&store, &latent).unwrap();
        assert_eq!((out.height, out.width), (64, 64));
        assert!(out.data.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let zero = Tensor::zeros(latent.shape());
        let a = b.decode_latent(&store, &zero).unwrap();
        let c = b.decode_latent(&store, &zero).unwrap();
        assert_eq!(a, c);
        assert!(b.decode_latent(&store, &Tensor::zeros(&[15, 16, 2])).is_err());
    }

    #[test]
    fn image_size_must_be_multiple_of_32() {
        let (store, b) = small_backbone(4);
        assert!(b.encode_image(&store, &ImageTensor::filled(48, 64, [0.0; 3])).is_err());
    }
}

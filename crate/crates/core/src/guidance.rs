//! Toy latent denoiser with one text cross-attention, and training-free
//! backward guidance of its sampling loop towards a spatial mask.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::{PatchExpand, PatchMerging};
use crate::data::{TextEmbedding, EMBED_DIM};
use crate::error::{Error, Result};
use crate::fusion::GuidanceMap;
use crate::layout;
use crate::nn::{Binder, FeedForward, Linear};
use crate::optim::{AdamW, ParamId, ParamStore};
use crate::tensor::{sinusoidal_positional_encoding, Tensor};

/// Linear β schedule and its cumulative products, indexed by `t ∈ 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }
}

pub fn build_noise_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("diffusion needs at least 2 steps, got {steps}")));
    }
    let (lo, hi) = (1e-4, 0.02);
    let betas: Vec<f64> = (0..steps)
        .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
        .collect();
    let mut acc = 1.0;
    let alpha_bars = betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect();
    Ok(NoiseSchedule { betas, alpha_bars })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dilation {
    /// Fill the bounding rectangle of the thresholded cells.
    BBox,
    /// `k×k` square morphological dilation.
    Morph(usize),
    /// Threshold only.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub enabled: bool,
    pub eta: f64,
    pub guided_steps: usize,
    pub repeats: usize,
    pub beta_frac: f64,
    pub retry_frac: f64,
    /// `false` uses the resized map itself as a soft mask.
    pub activation: bool,
    pub dilation: Dilation,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            eta: 35.0,
            guided_steps: 10,
            repeats: 3,
            beta_frac: 0.5,
            retry_frac: 0.25,
            activation: true,
            dilation: Dilation::BBox,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(self.eta >= 0.0) {
            return Err(Error::Config(format!("eta must be >= 0, got {}", self.eta)));
        }
        if self.guided_steps > steps {
            return Err(Error::Config(format!(
                "guided steps {} exceed diffusion steps {steps}",
                self.guided_steps
            )));
        }
        if !(self.beta_frac > 0.0 && self.beta_frac < 1.0) {
            return Err(Error::Config(format!("beta fraction must lie in (0, 1), got {}", self.beta_frac)));
        }
        Ok(())
    }
}

/// Bilinear resize to `h×w` followed by renormalisation to max 1.
pub fn resize_guidance(g: &GuidanceMap, h: usize, w: usize) -> GuidanceMap {
    let data = if (g.h, g.w) == (h, w) {
        g.data.clone()
    } else {
        let map = layout::bilinear_resize(g.h, g.w, h, w);
        map.rows
            .iter()
            .map(|row| row.iter().map(|&(i, wt)| wt * g.data[i]).sum())
            .collect()
    };
    let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = if max > 0.0 { data.iter().map(|v| v / max).collect() } else { data };
    GuidanceMap { h, w, data }
}

/// Thresholds at `beta_frac·max` (strictly above) and dilates.
pub fn activate_and_dilate(g: &GuidanceMap, beta_frac: f64, mode: Dilation) -> Result<Vec<f64>> {
    let max = g.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let beta = beta_frac * max;
    let on: Vec<bool> = g.data.iter().map(|&v| v > beta).collect();
    if !on.iter().any(|&b| b) {
        return Err(Error::GuidanceEmpty { beta });
    }
    let (h, w) = (g.h, g.w);
    let mut mask = vec![0.0; h * w];
    match mode {
        Dilation::None => {
            for (m, &b) in mask.iter_mut().zip(&on) {
                *m = b as u8 as f64;
            }
        }
        Dilation::BBox => {
            let cells = || (0..h * w).filter(|&i| on[i]);
            let r0 = cells().map(|i| i / w).min().unwrap_or(0);
            let r1 = cells().map(|i| i / w).max().unwrap_or(0);
            let c0 = cells().map(|i| i % w).min().unwrap_or(0);
            let c1 = cells().map(|i| i % w).max().unwrap_or(0);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    mask[r * w + c] = 1.0;
                }
            }
        }
        Dilation::Morph(k) => {
            let lo = (k.max(1) - 1) / 2;
            let hi = k.max(1) - 1 - lo;
            for i in (0..h * w).filter(|&i| on[i]) {
                let (r, c) = (i / w, i % w);
                for rr in r.saturating_sub(lo)..=(r + hi).min(h - 1) {
                    for cc in c.saturating_sub(lo)..=(c + hi).min(w - 1) {
                        mask[rr * w + cc] = 1.0;
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Mask for `S_t` of side `h×w`, retrying once at the lower fraction.
pub fn guidance_mask(g: &GuidanceMap, h: usize, w: usize, cfg: &GuidanceConfig) -> Result<Vec<f64>> {
    let r = resize_guidance(g, h, w);
    if !cfg.activation {
        return Ok(r.data);
    }
    match activate_and_dilate(&r, cfg.beta_frac, cfg.dilation) {
        Err(Error::GuidanceEmpty { .. }) => activate_and_dilate(&r, cfg.retry_frac, cfg.dilation),
        other => other,
    }
}

/// In-mask share of the attention mass, `Σ(mask⊙S)/ΣS`.
pub fn in_mask_fraction(s: &Tensor, mask: &[f64]) -> f64 {
    let t = s.cols();
    let mut inside = 0.0;
    let mut total = 0.0;
    for (u, &m) in mask.iter().enumerate() {
        let row: f64 = s.data()[u * t..(u + 1) * t].iter().sum();
        inside += m * row;
        total += row;
    }
    inside / total
}

/// `E = (1 − Σ(mask⊙S)/ΣS)²`, the mask broadcast over keys.
pub fn energy(s: &Tensor, mask: &[f64]) -> f64 {
    (1.0 - in_mask_fraction(s, mask)).powi(2)
}

/// Energy recorded on the tape.
pub fn energy_var<'t>(s: Var<'t>, mask: &[f64]) -> Var<'t> {
    let tape = s.tape();
    let rows = s.sum_cols();
    let n = mask.len();
    let m = tape.constant(Tensor::new(&[n], mask.to_vec()).expect("mask length"));
    let ratio = rows.mul(m).sum().div(rows.sum());
    ratio.rsub_scalar(1.0).square()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub hidden: usize,
    pub heads: usize,
    pub null_key: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            hidden: 32,
            heads: 2,
            null_key: true,
        }
    }
}

const TIME_DIM: usize = 16;

/// Down block, middle block and an up block whose cross-attention over the
/// appearance tokens provides `S_t`.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    pub cfg: DenoiserConfig,
    pub time: Linear,
    pub input: Linear,
    pub down: PatchMerging,
    pub mid: FeedForward,
    pub up: PatchExpand,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub attn_out: Linear,
    pub up_ffn: FeedForward,
    pub output: Linear,
    pub null_key: Option<ParamId>,
}

pub struct DenoiserOutput<'t> {
    pub noise: Var<'t>,
    /// Head-averaged attention on the appearance tokens, `[h·w × T_a]`.
    pub attention: Var<'t>,
}

impl ToyDenoiser {
    pub fn new(store: &mut ParamStore, cfg: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        let (c, d) = (cfg.latent_channels, cfg.hidden);
        if cfg.heads == 0 || d % cfg.heads != 0 || c == 0 {
            return Err(Error::Config("denoiser heads must divide its hidden size".into()));
        }
        Ok(Self {
            time: Linear::new(store, "denoiser.time", TIME_DIM, d, true, rng),
            input: Linear::new(store, "denoiser.input", c, d, true, rng),
            down: PatchMerging::new(store, "denoiser.down", d, rng),
            mid: FeedForward::new(store, "denoiser.mid", 2 * d, 4 * d, rng),
            up: PatchExpand::with_scale(store, "denoiser.up", 2 * d, d, 2, rng),
            q: Linear::new(store, "denoiser.up.q", c, d, true, rng),
            k: Linear::new(store, "denoiser.up.k", EMBED_DIM, d, true, rng),
            v: Linear::new(store, "denoiser.up.v", EMBED_DIM, d, true, rng),
            attn_out: Linear::new(store, "denoiser.up.out", d, d, true, rng),
            up_ffn: FeedForward::new(store, "denoiser.up.ffn", d, 2 * d, rng),
            output: Linear::new(store, "denoiser.output", d, c, true, rng),
            null_key: cfg
                .null_key
                .then(|| store.add("denoiser.null_key", Tensor::uniform(&[1, EMBED_DIM], 1.0, rng))),
            cfg,
        })
    }

    pub fn is_param(name: &str) -> bool {
        name.starts_with("denoiser.")
    }

    /// Appearance tokens with positional encoding.
    pub fn text_tokens(text: &TextEmbedding) -> Result<Tensor> {
        if text.appearance.is_empty() {
            return Err(Error::EmptyText);
        }
        let full = crate::fusion::encode_text(text)?;
        let (a, b) = (text.appearance.start, text.appearance.end);
        Tensor::new(&[b - a, full.cols()], full.data()[a * full.cols()..b * full.cols()].to_vec())
    }

    /// Per-head softmax over the appearance tokens (and the null key);
    /// returns the head-averaged weights on the appearance tokens and the
    /// head outputs.
    fn cross_attention<'t>(&self, cx: &Binder<'t>, z: Var<'t>, la: Var<'t>) -> (Var<'t>, Var<'t>) {
        let tape = cx.tape();
        let t_a = la.value().rows();
        let keys = match self.null_key {
            Some(id) => tape.concat_rows(&[la, cx.p(id)]),
            None => la,
        };
        let q = self.q.forward(cx, z);
        let (k, v) = (self.k.forward(cx, keys), self.v.forward(cx, keys));
        let heads = self.cfg.heads;
        let d = self.cfg.hidden / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut avg: Option<Var<'t>> = None;
        for h in 0..heads {
            let sl = |x: Var<'t>| if heads == 1 { x } else { x.slice_cols(h * d, (h + 1) * d) };
            let a = sl(q).matmul_bt(sl(k)).scale(scale).softmax_rows();
            outs.push(a.matmul(sl(v)));
            let on_text = if self.null_key.is_some() { a.slice_cols(0, t_a) } else { a };
            avg = Some(match avg {
                Some(x) => x.add(on_text),
                None => on_text,
            });
        }
        let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
        (avg.expect("heads").scale(1.0 / heads as f64), o)
    }

    /// `S_t` alone: the attention chain used by guidance.
    pub fn attention_map<'t>(&self, cx: &Binder<'t>, z: Var<'t>, la: Var<'t>) -> Var<'t> {
        self.cross_attention(cx, z, la).0
    }

    /// Predicted noise and `S_t` for latent `z` (`[h·w × c]`) at step `t`.
    pub fn forward<'t>(&self, cx: &Binder<'t>, z: Var<'t>, t: usize, la: Var<'t>, h: usize, w: usize) -> Result<DenoiserOutput<'t>> {
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("denoiser needs an even latent grid, got {h}x{w}")));
        }
        let tape = cx.tape();
        let pe = sinusoidal_positional_encoding(t + 1, TIME_DIM)?;
        let temb = self.time.forward(cx, tape.constant(Tensor::new(&[1, TIME_DIM], pe.row(t).to_vec())?));
        let temb = temb.reshape(&[self.cfg.hidden]);
        let x0 = self.input.forward(cx, z).add_row(temb).gelu();
        let down = self.down.forward(cx, x0, h, w)?;
        let mid = self.mid.forward(cx, down);
        let up = self.up.forward(cx, mid, h / 2, w / 2).add(x0);
        let (attention, o) = self.cross_attention(cx, z, la);
        let up = up.add(self.attn_out.forward(cx, o));
        let up = self.up_ffn.forward(cx, up);
        Ok(DenoiserOutput {
            noise: self.output.forward(cx, up),
            attention,
        })
    }

    pub fn predict_noise(&self, store: &ParamStore, z: &Tensor, t: usize, la: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let tape = Tape::new();
        let cx = Binder::frozen(&tape, store);
        let out = self.forward(&cx, tape.constant(z.clone()), t, tape.constant(la.clone()), h, w)?;
        Ok((*out.noise.value()).clone())
    }

    pub fn attention(&self, store: &ParamStore, z: &Tensor, la: &Tensor) -> Tensor {
        let tape = Tape::new();
        let cx = Binder::frozen(&tape, store);
        (*self.attention_map(&cx, tape.constant(z.clone()), tape.constant(la.clone())).value()).clone()
    }

    /// Energy and its gradient with respect to the latent.
    pub fn energy_gradient(&self, store: &ParamStore, z: &Tensor, la: &Tensor, mask: &[f64]) -> Result<(f64, Tensor)> {
        let tape = Tape::new();
        let cx = Binder::frozen(&tape, store);
        let zv = tape.var(z.clone());
        let e = energy_var(self.attention_map(&cx, zv, tape.constant(la.clone())), mask);
        let value = e.value().data()[0];
        let grads = tape.backward(e)?;
        Ok((value, grads.get_or_zeros(zv)))
    }
}

/// `η·√((1−ᾱ_t)/ᾱ_t)`.
pub fn step_coefficient(eta: f64, alpha_bar: f64) -> f64 {
    eta * ((1.0 - alpha_bar) / alpha_bar).sqrt()
}

/// `repeats` gradient steps on the energy; returns the new latent and the
/// energies before and after.
pub fn guided_latent_update(
    den: &ToyDenoiser,
    store: &ParamStore,
    z: &Tensor,
    la: &Tensor,
    mask: &[f64],
    alpha_bar: f64,
    cfg: &GuidanceConfig,
) -> Result<(Tensor, f64, f64)> {
    let coef = step_coefficient(cfg.eta, alpha_bar);
    let mut z = z.clone();
    let mut before = None;
    for _ in 0..cfg.repeats {
        let (e, g) = den.energy_gradient(store, &z, la, mask)?;
        before.get_or_insert(e);
        if coef != 0.0 {
            z = z.sub(&g.scale(coef))?;
        }
        z.ensure_finite("guided latent")?;
    }
    let after = energy(&den.attention(store, &z, la), mask);
    Ok((z, before.unwrap_or(after), after))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub guided: bool,
    pub energy_before: f64,
    pub energy_after: f64,
    pub in_mask: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub latent: Tensor,
    pub trace: Vec<TraceRow>,
    pub guided_steps: usize,
    pub final_fraction: f64,
    pub final_energy: f64,
}

/// One line per step: step, guided flag (0/1), energy before and after the
/// guided update, in-mask fraction.
pub fn trace_tsv(rows: &[TraceRow]) -> String {
    rows.iter()
        .map(|r| {
            format!(
                "{}\t{}\t{:.9}\t{:.9}\t{:.9}\n",
                r.step, r.guided as u8, r.energy_before, r.energy_after, r.in_mask
            )
        })
        .collect()
}

/// Ancestral sampling from `z_T`, applying guided updates before the
/// denoise step during the first `guided_steps` steps. `mask` is `None` for
/// unguided runs; the trace then reports energies against `trace_mask`.
#[allow(clippy::too_many_arguments)]
pub fn sample_with_guidance(
    den: &ToyDenoiser,
    store: &ParamStore,
    z_t: &Tensor,
    (h, w): (usize, usize),
    la: &Tensor,
    mask: &[f64],
    schedule: &NoiseSchedule,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<SampleResult> {
    cfg.validate(schedule.steps())?;
    if mask.len() != h * w || z_t.rows() != h * w {
        return Err(Error::Shape(format!(
            "latent {:?} and mask of {} cells do not match {h}x{w}",
            z_t.shape(),
            mask.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = z_t.clone();
    let mut trace = Vec::with_capacity(schedule.steps());
    let guided = if cfg.enabled { cfg.guided_steps } else { 0 };
    for (i, t) in (1..=schedule.steps()).rev().enumerate() {
        let ab = schedule.alpha_bar(t);
        let (e0, e1) = if i < guided {
            let (nz, e0, e1) = guided_latent_update(den, store, &z, la, mask, ab, cfg)?;
            z = nz;
            (e0, e1)
        } else {
            let e = energy(&den.attention(store, &z, la), mask);
            (e, e)
        };
        let frac = in_mask_fraction(&den.attention(store, &z, la), mask);
        trace.push(TraceRow {
            step: i,
            guided: i < guided,
            energy_before: e0,
            energy_after: e1,
            in_mask: frac,
        });
        let eps = den.predict_noise(store, &z, t, la, h, w)?;
        let beta = schedule.beta(t);
        let c = beta / (1.0 - ab).sqrt();
        let noise = Tensor::randn(z.shape(), &mut rng);
        let sigma = if t > 1 { beta.sqrt() } else { 0.0 };
        let scale = 1.0 / (1.0 - beta).sqrt();
        z = z.zip_map(&eps, |zv, ev| scale * (zv - c * ev))?;
        if sigma > 0.0 {
            z = z.zip_map(&noise, |zv, nv| zv + sigma * nv)?;
        }
        z.ensure_finite("sampled latent")?;
    }
    let s = den.attention(store, &z, la);
    Ok(SampleResult {
        final_fraction: in_mask_fraction(&s, mask),
        final_energy: energy(&s, mask),
        latent: z,
        trace,
        guided_steps: guided,
    })
}

/// Forward-noises `z_0` to step `t` with fresh Gaussian noise.
pub fn noise_latent(z0: &Tensor, t: usize, schedule: &NoiseSchedule, rng: &mut impl Rng) -> Tensor {
    let ab = schedule.alpha_bar(t);
    let noise = Tensor::randn(z0.shape(), rng);
    z0.zip_map(&noise, |z, n| ab.sqrt() * z + (1.0 - ab).sqrt() * n)
        .expect("same shape")
}

/// Noise-prediction MSE training on latents paired with appearance tokens.
pub fn train_denoiser(
    den: &ToyDenoiser,
    store: &mut ParamStore,
    data: &[(Tensor, Tensor)],
    (h, w): (usize, usize),
    schedule: &NoiseSchedule,
    steps: usize,
    adam: &AdamW,
    seed: u64,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (z0, la) = &data[rng.gen_range(0..data.len())];
        let t = rng.gen_range(1..=schedule.steps());
        let ab = schedule.alpha_bar(t);
        let noise = Tensor::randn(z0.shape(), &mut rng);
        let zt = z0.zip_map(&noise, |z, n| ab.sqrt() * z + (1.0 - ab).sqrt() * n)?;
        store.zero_grads();
        let tape = Tape::new();
        let cx = Binder::new(&tape, store, ToyDenoiser::is_param);
        let out = den.forward(&cx, tape.constant(zt), t, tape.constant(la.clone()), h, w)?;
        let loss = out.noise.sub(tape.constant(noise)).square().mean();
        let l = loss.value().data()[0];
        if !l.is_finite() {
            return Err(Error::Numeric("denoiser loss".into()));
        }
        losses.push(l);
        let g = tape.backward(loss)?;
        for (id, gr) in cx.param_grads(&g) {
            store.accumulate_grad(id, &gr);
        }
        store.step(adam, ToyDenoiser::is_param)?;
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, relative_error};
    use crate::data::embed_text_stub;

    fn setup(null_key: bool) -> (ParamStore, ToyDenoiser) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let den = ToyDenoiser::new(
            &mut store,
            DenoiserConfig {
                null_key,
                ..DenoiserConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        (store, den)
    }

    fn la(caption: &str) -> Tensor {
        ToyDenoiser::text_tokens(&embed_text_stub(caption).unwrap()).unwrap()
    }

    #[test]
    fn schedule_properties() {
        let s = build_noise_schedule(50).unwrap();
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars.iter().all(|&a| a > 0.0 && a < 1.0));
        let s2 = build_noise_schedule(2).unwrap();
        assert_eq!(s2.alpha_bar(1), 1.0 - 1e-4);
        assert!(s2.alpha_bar(2) < s2.alpha_bar(1));
        assert!(matches!(build_noise_schedule(1), Err(Error::Config(_))));
    }

    #[test]
    fn attention_rows_and_single_token() {
        let (store, den) = setup(false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::randn(&[64, 3], &mut rng);
        let s = den.attention(&store, &z, &la("red circle [above blue square]"));
        for r in 0..64 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let one = den.attention(&store, &z, &la("circle [above blue square]"));
        assert_eq!(one.shape(), &[64, 1]);
        assert!(one.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let (store, den) = setup(true);
        let s = den.attention(&store, &z, &la("red circle [above blue square]"));
        assert_eq!(s.shape(), &[64, 2]);
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn denoiser_shapes_and_empty_text() {
        let (store, den) = setup(true);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::randn(&[64, 3], &mut rng);
        let eps = den.predict_noise(&store, &z, 10, &la("red circle"), 8, 8).unwrap();
        assert_eq!(eps.shape(), &[64, 3]);
        let e = embed_text_stub("[above blue square]").unwrap();
        assert!(matches!(ToyDenoiser::text_tokens(&e), Err(Error::EmptyText)));
    }

    #[test]
    fn resize_examples() {
        let g = GuidanceMap {
            h: 2,
            w: 2,
            data: vec![0.2, 1.0, 0.5, 0.7],
        };
        assert_eq!(resize_guidance(&g, 2, 2), g);
        let c = GuidanceMap {
            h: 3,
            w: 3,
            data: vec![1.0; 9],
        };
        assert!(resize_guidance(&c, 7, 5).data.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let back = resize_guidance(&resize_guidance(&g, 4, 4), 2, 2);
        for (a, b) in back.data.iter().zip(&g.data) {
            assert!((a - b).abs() <= 0.25);
        }
    }

    #[test]
    fn activation_examples() {
        let mut g = GuidanceMap {
            h: 5,
            w: 5,
            data: vec![0.0; 25],
        };
        g.data[7] = 1.0;
        let m = activate_and_dilate(&g, 0.5, Dilation::BBox).unwrap();
        assert_eq!(m.iter().sum::<f64>(), 1.0);
        for (r, c) in [(1, 1), (2, 1), (3, 1), (3, 2), (3, 3)] {
            g.data[r * 5 + c] = 1.0;
        }
        let m = activate_and_dilate(&g, 0.5, Dilation::BBox).unwrap();
        let expect: Vec<f64> = (0..25).map(|i| ((1..=3).contains(&(i / 5)) && (1..=3).contains(&(i % 5))) as u8 as f64).collect();
        assert_eq!(m, expect);
        let all = GuidanceMap {
            h: 2,
            w: 2,
            data: vec![1.0; 4],
        };
        assert_eq!(activate_and_dilate(&all, 0.5, Dilation::BBox).unwrap(), vec![1.0; 4]);
        let zero = GuidanceMap {
            h: 2,
            w: 2,
            data: vec![0.0; 4],
        };
        assert!(matches!(activate_and_dilate(&zero, 0.5, Dilation::BBox), Err(Error::GuidanceEmpty { .. })));
        let m = activate_and_dilate(&g, 0.5, Dilation::None).unwrap();
        assert_eq!(m.iter().sum::<f64>(), 6.0);
        let mut one = GuidanceMap {
            h: 5,
            w: 5,
            data: vec![0.0; 25],
        };
        one.data[12] = 1.0;
        assert_eq!(activate_and_dilate(&one, 0.5, Dilation::Morph(3)).unwrap().iter().sum::<f64>(), 9.0);
    }

    #[test]
    fn energy_examples() {
        let s = Tensor::full(&[4, 2], 0.5);
        assert_eq!(energy(&s, &[1.0; 4]), 0.0);
        assert_eq!(energy(&s, &[1.0, 1.0, 0.0, 0.0]), 0.25);
        let mut s = Tensor::zeros(&[4, 1]);
        s.data_mut()[3] = 1.0;
        assert_eq!(energy(&s, &[1.0, 1.0, 0.0, 0.0]), 1.0);
    }

    #[test]
    fn energy_gradient_matches_fd() {
        let (store, den) = setup(true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::randn(&[64, 3], &mut rng);
        let l = la("red circle [above blue square]");
        let mask: Vec<f64> = (0..64).map(|i| ((i / 8) < 4 && (i % 8) < 3) as u8 as f64).collect();
        let (_, g) = den.energy_gradient(&store, &z, &l, &mask).unwrap();
        let fd = finite_difference(&z, 1e-5, |x| energy(&den.attention(&store, x, &l), &mask));
        assert!(relative_error(&g, &fd, 1e-10) < 1e-3);
    }

    #[test]
    fn update_examples() {
        let (store, den) = setup(true);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Tensor::randn(&[64, 3], &mut rng);
        let l = la("red circle [above blue square]");
        let mask: Vec<f64> = (0..64).map(|i| (i < 16) as u8 as f64).collect();
        let zero = GuidanceConfig {
            eta: 0.0,
            ..GuidanceConfig::default()
        };
        assert_eq!(guided_latent_update(&den, &store, &z, &l, &mask, 0.5, &zero).unwrap().0, z);
        let cfg = GuidanceConfig::default();
        let full = vec![1.0; 64];
        assert_eq!(guided_latent_update(&den, &store, &z, &l, &full, 0.5, &cfg).unwrap().0, z);
        assert_eq!(step_coefficient(35.0, 0.5), 35.0);
        let (_, e0, e1) = guided_latent_update(&den, &store, &z, &l, &mask, 0.5, &cfg).unwrap();
        assert!(e1 < e0);
    }

    #[test]
    fn sampling_determinism_and_no_op_guidance() {
        let (store, den) = setup(true);
        let sched = build_noise_schedule(12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::randn(&[64, 3], &mut rng);
        let l = la("red circle [above blue square]");
        let mask: Vec<f64> = (0..64).map(|i| (i % 8 < 4) as u8 as f64).collect();
        let off = GuidanceConfig {
            guided_steps: 0,
            ..GuidanceConfig::default()
        };
        let disabled = GuidanceConfig {
            enabled: false,
            ..GuidanceConfig::default()
        };
        let before = store.checksum();
        let a = sample_with_guidance(&den, &store, &z, (8, 8), &l, &mask, &sched, &off, 9).unwrap();
        let b = sample_with_guidance(&den, &store, &z, (8, 8), &l, &mask, &sched, &disabled, 9).unwrap();
        assert_eq!(a.latent, b.latent);
        assert_eq!(b.guided_steps, 0);
        assert_eq!(a.trace.len(), 12);
        let g = sample_with_guidance(&den, &store, &z, (8, 8), &l, &mask, &sched, &GuidanceConfig::default(), 9).unwrap();
        assert_eq!(store.checksum(), before);
        assert!(g.final_fraction > a.final_fraction);
        assert!(trace_tsv(&g.trace).lines().count() == 12);
    }

    #[test]
    fn denoiser_training_lowers_loss() {
        let (mut store, den) = setup(true);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sched = build_noise_schedule(20).unwrap();
        let data: Vec<(Tensor, Tensor)> = (0..4).map(|_| (Tensor::randn(&[64, 3], &mut rng).scale(0.5), la("red circle"))).collect();
        let adam = AdamW {
            lr: 3e-3,
            ..AdamW::default()
        };
        let losses = train_denoiser(&den, &mut store, &data, (8, 8), &sched, 150, &adam, 1).unwrap();
        let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = losses[130..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "{head} -> {tail}");
    }
}

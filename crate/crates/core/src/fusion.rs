//! Multimodal fusion: text cross-attention at stage 1 and deformable feature
//! alignment (DFA) at stages 2 to 4, ending in the guidance map `G`.
//!
//! Spatial text tokens are optionally joined by a learned null token that
//! attention can fall back on. Without it every softmax row spends its whole
//! mass on the spatial tokens and the key-averaged map is constant.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{CustomOp, Tape, Var};
use crate::backbone::{FeatureMap, PatchMerging};
use crate::data::{TextEmbedding, EMBED_DIM};
use crate::error::{Error, Result};
use crate::layout;
use crate::nn::{Binder, LayerNorm, Linear, TransformerLayer};
use crate::optim::ParamStore;
use crate::tensor::{sinusoidal_positional_encoding, Tensor};

/// Sampling factor, maximum offset and completion window of one DFA stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DfaStageConfig {
    pub gamma: usize,
    pub max_offset: f64,
    pub range: usize,
}

impl DfaStageConfig {
    /// Stage schedule for stages 2, 3 and 4.
    pub const TABLE: [DfaStageConfig; 3] = [
        DfaStageConfig {
            gamma: 4,
            max_offset: 8.0,
            range: 8,
        },
        DfaStageConfig {
            gamma: 2,
            max_offset: 4.0,
            range: 4,
        },
        DfaStageConfig {
            gamma: 1,
            max_offset: 2.0,
            range: 2,
        },
    ];

    pub fn validate(&self) -> Result<()> {
        if self.gamma == 0 || !(self.max_offset > 0.0) || self.range < self.gamma {
            return Err(Error::Config(format!(
                "DFA stage needs gamma >= 1, s > 0 and R >= gamma; got gamma={}, s={}, R={}",
                self.gamma, self.max_offset, self.range
            )));
        }
        Ok(())
    }
}

/// How the per-key attention maps are reduced to one map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyReduce {
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub offset_dim: usize,
    pub offset_heads: usize,
    pub stages: [DfaStageConfig; 3],
    /// DFA on/off for stages 2, 3, 4; disabled stages use plain cross-attention.
    pub dfa_enabled: [bool; 3],
    pub no_offsets: bool,
    pub no_scalar: bool,
    pub no_card: bool,
    /// Attention taken straight from the offset transformer layer.
    pub t_only: bool,
    pub null_key: bool,
    pub epsilon: f64,
    pub key_reduce: KeyReduce,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            offset_dim: 32,
            offset_heads: 2,
            stages: DfaStageConfig::TABLE,
            dfa_enabled: [true; 3],
            no_offsets: false,
            no_scalar: false,
            no_card: false,
            t_only: false,
            null_key: true,
            epsilon: 1.0,
            key_reduce: KeyReduce::Mean,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        for s in &self.stages {
            s.validate()?;
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.offset_heads == 0 || self.offset_dim % self.offset_heads != 0 {
            return Err(Error::Config("offset heads must divide offset dim".into()));
        }
        Ok(())
    }
}

/// Stage-4 guidance map with max 1.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl GuidanceMap {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        crate::imageio::encode_pgm(self.h, self.w, &self.data)
    }

    pub fn predicted_box(&self, beta_frac: f64) -> Result<crate::data::BBox> {
        crate::data::predicted_box(self.h, self.w, &self.data, beta_frac)
    }
}

/// Centres of the `γ×γ` cells as `(row, col)` pairs, raster order.
pub fn make_reference_grid(h: usize, w: usize, gamma: usize) -> Result<Tensor> {
    if gamma == 0 || h % gamma != 0 || w % gamma != 0 {
        return Err(Error::Shape(format!(
            "sampling factor {gamma} must divide the {h}x{w} grid"
        )));
    }
    let (hs, ws) = (h / gamma, w / gamma);
    let off = (gamma as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(hs * ws * 2);
    for r in 0..hs {
        for c in 0..ws {
            data.push((gamma * r) as f64 + off);
            data.push((gamma * c) as f64 + off);
        }
    }
    Tensor::new(&[hs * ws, 2], data)
}

/// Bilinear interpolation of `map` (`[h·w × C]`) at fractional `(y, x)`,
/// zero outside the grid.
pub fn bilinear_sample(map: &Tensor, h: usize, w: usize, y: f64, x: f64) -> Vec<f64> {
    let c = map.cols();
    let mut out = vec![0.0; c];
    for (idx, wgt) in crate::autodiff::bilinear_taps(y, x, h, w) {
        for (o, &v) in out.iter_mut().zip(map.row(idx)) {
            *o += wgt * v;
        }
    }
    out
}

/// Grid geometry of a completion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Completion {
    pub h: usize,
    pub w: usize,
    pub gamma: usize,
    pub range: usize,
    pub epsilon: f64,
    pub use_card: bool,
}

/// Neighbour weights of one unsampled cell.
struct Fill {
    cell: usize,
    taps: Vec<(usize, f64)>,
    wsum: f64,
    factor: f64,
}

struct Plan {
    anchors: Vec<usize>,
    fills: Vec<Fill>,
    empty: Vec<usize>,
}

impl Completion {
    fn plan(&self, points: &Tensor) -> Result<Plan> {
        let (h, w, g) = (self.h, self.w, self.gamma);
        if g == 0 || h % g != 0 || w % g != 0 {
            return Err(Error::Shape(format!("sampling factor {g} must divide the {h}x{w} grid")));
        }
        let (hs, ws) = (h / g, w / g);
        if points.rows() != hs * ws || points.cols() != 2 {
            return Err(Error::Shape(format!(
                "expected {} sampled points, got {:?}",
                hs * ws,
                points.shape()
            )));
        }
        let a = (g - 1) / 2;
        let anchors: Vec<usize> = (0..hs * ws).map(|k| (g * (k / ws) + a) * w + g * (k % ws) + a).collect();
        let mut sampled = vec![false; h * w];
        for &i in &anchors {
            sampled[i] = true;
        }
        let half = self.range as f64 / 2.0;
        let mut fills = Vec::new();
        let mut empty = Vec::new();
        for cell in (0..h * w).filter(|&i| !sampled[i]) {
            let (ur, uc) = ((cell / w) as f64, (cell % w) as f64);
            let taps: Vec<(usize, f64)> = (0..points.rows())
                .filter_map(|k| {
                    let (dy, dx) = (points.get2(k, 0) - ur, points.get2(k, 1) - uc);
                    (dy.abs() <= half && dx.abs() <= half).then(|| (k, 1.0 / (dy.hypot(dx) + self.epsilon)))
                })
                .collect();
            if taps.is_empty() {
                empty.push(cell);
            } else {
                let wsum = taps.iter().map(|t| t.1).sum();
                fills.push(Fill {
                    cell,
                    factor: taps.len() as f64,
                    taps,
                    wsum,
                });
            }
        }
        let unsampled = fills.len() + empty.len();
        if unsampled > 0 {
            let avg = fills.iter().map(|f| f.factor).sum::<f64>() / unsampled as f64;
            for f in &mut fills {
                f.factor = if self.use_card { f.factor / avg } else { 1.0 };
            }
        }
        Ok(Plan { anchors, fills, empty })
    }

    /// Completes `[n_s × T]` sampled scores to the full `[h·w × T]` grid.
    ///
    /// Returns the completed matrix and the number of cells without any
    /// sampled neighbour, which receive the per-column mean of the samples.
    pub fn apply(&self, scores: &Tensor, points: &Tensor) -> Result<(Tensor, usize)> {
        let plan = self.plan(points)?;
        if scores.rows() != plan.anchors.len() {
            return Err(Error::Shape(format!(
                "scores have {} rows for {} sampled points",
                scores.rows(),
                plan.anchors.len()
            )));
        }
        let t = scores.cols();
        let mut out = vec![0.0; self.h * self.w * t];
        for (k, &cell) in plan.anchors.iter().enumerate() {
            out[cell * t..(cell + 1) * t].copy_from_slice(scores.row(k));
        }
        for f in &plan.fills {
            let row = &mut out[f.cell * t..(f.cell + 1) * t];
            for &(k, wk) in &f.taps {
                for (o, &s) in row.iter_mut().zip(scores.row(k)) {
                    *o += wk * s;
                }
            }
            let scale = f.factor / f.wsum;
            row.iter_mut().for_each(|o| *o *= scale);
        }
        if !plan.empty.is_empty() {
            let n = scores.rows() as f64;
            let mean: Vec<f64> = (0..t).map(|j| (0..scores.rows()).map(|k| scores.get2(k, j)).sum::<f64>() / n).collect();
            for &cell in &plan.empty {
                out[cell * t..(cell + 1) * t].copy_from_slice(&mean);
            }
        }
        Ok((Tensor::new(&[self.h * self.w, t], out)?, plan.empty.len()))
    }

    /// Records the completion on the tape, differentiable in both the
    /// scores and the deformed points.
    pub fn record<'t>(&self, scores: Var<'t>, points: Var<'t>) -> Result<(Var<'t>, usize)> {
        if self.gamma == 1 {
            return Ok((scores, 0));
        }
        let (out, empty) = self.apply(&scores.value(), &points.value())?;
        let tape = scores.tape();
        Ok((tape.custom(&[scores, points], out, Rc::new(*self)), empty))
    }
}

impl CustomOp for Completion {
    fn name(&self) -> &'static str {
        "complete_attention"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (scores, points) = (inputs[0], inputs[1]);
        let plan = self.plan(points)?;
        let t = scores.cols();
        let n = scores.rows();
        let mut gs = vec![0.0; n * t];
        let mut gp = vec![0.0; n * 2];
        for (k, &cell) in plan.anchors.iter().enumerate() {
            for j in 0..t {
                gs[k * t + j] += grad.get2(cell, j);
            }
        }
        for f in &plan.fills {
            let g = grad.row(f.cell);
            let (ur, uc) = ((f.cell / self.w) as f64, (f.cell % self.w) as f64);
            // weighted mean without the cardinality factor
            let mut mean = vec![0.0; t];
            for &(k, wk) in &f.taps {
                for (m, &s) in mean.iter_mut().zip(scores.row(k)) {
                    *m += wk * s / f.wsum;
                }
            }
            for &(k, wk) in &f.taps {
                let mut dw = 0.0;
                for j in 0..t {
                    gs[k * t + j] += g[j] * f.factor * wk / f.wsum;
                    dw += g[j] * f.factor * (scores.get2(k, j) - mean[j]) / f.wsum;
                }
                let (dy, dx) = (points.get2(k, 0) - ur, points.get2(k, 1) - uc);
                let d = dy.hypot(dx);
                if d > 0.0 {
                    let c = -dw * wk * wk / d;
                    gp[2 * k] += c * dy;
                    gp[2 * k + 1] += c * dx;
                }
            }
        }
        for &cell in &plan.empty {
            for k in 0..n {
                for j in 0..t {
                    gs[k * t + j] += grad.get2(cell, j) / n as f64;
                }
            }
        }
        Ok(vec![
            Some(Tensor::new(scores.shape(), gs)?),
            Some(Tensor::new(points.shape(), gp)?),
        ])
    }
}

/// Text cross-attention: queries from the (normalised) visual map, keys and
/// values from text tokens, per-head softmax, output map and residual.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, text_dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), text_dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), text_dim, dim, true, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
            heads,
        }
    }

    fn head_dim(&self, q: Var<'_>) -> usize {
        q.value().cols() / self.heads
    }

    fn head<'t>(&self, x: Var<'t>, h: usize, d: usize) -> Var<'t> {
        if self.heads == 1 {
            x
        } else {
            x.slice_cols(h * d, (h + 1) * d)
        }
    }

    /// Scaled scores `q_h k_hᵀ/√d` for every head.
    fn scores<'t>(&self, q: Var<'t>, k: Var<'t>) -> Vec<Var<'t>> {
        let d = self.head_dim(q);
        let scale = 1.0 / (d as f64).sqrt();
        (0..self.heads)
            .map(|h| self.head(q, h, d).matmul_bt(self.head(k, h, d)).scale(scale))
            .collect()
    }

    /// `m + W_o · concat_h(A_h · V_h)`.
    fn combine<'t>(&self, cx: &Binder<'t>, m: Var<'t>, attn: &[Var<'t>], v: Var<'t>) -> Var<'t> {
        let d = v.value().cols() / self.heads;
        let outs: Vec<Var<'t>> = attn.iter().enumerate().map(|(h, a)| a.matmul(self.head(v, h, d))).collect();
        let o = if outs.len() == 1 { outs[0] } else { cx.tape().concat_cols(&outs) };
        m.add(self.out.forward(cx, o))
    }
}

/// Result of one fusion stage.
pub struct StageOutput<'t> {
    pub map: Var<'t>,
    /// Post-softmax attention per head, `[h·w × T]` with the null key last.
    pub attention: Vec<Var<'t>>,
    pub offsets: Option<(Var<'t>, Var<'t>)>,
    pub empty_cells: usize,
}

/// Plain multi-head cross-attention of `m` over `keys`.
pub fn cross_attention_fusion<'t>(cx: &Binder<'t>, xa: &CrossAttention, m: Var<'t>, keys: Var<'t>) -> StageOutput<'t> {
    let mn = xa.norm.forward(cx, m);
    let q = xa.q.forward(cx, mn);
    let (k, v) = (xa.k.forward(cx, keys), xa.v.forward(cx, keys));
    let attention: Vec<Var<'t>> = xa.scores(q, k).into_iter().map(|s| s.softmax_rows()).collect();
    StageOutput {
        map: xa.combine(cx, m, &attention, v),
        attention,
        offsets: None,
        empty_cells: 0,
    }
}

/// Transformer over `[M; V; L]` predicting per-cell offsets and modulation.
#[derive(Debug, Clone)]
pub struct OffsetNet {
    pub m_proj: Linear,
    pub m_norm: LayerNorm,
    pub v_proj: Linear,
    pub v_norm: LayerNorm,
    pub l_proj: Linear,
    pub l_norm: LayerNorm,
    pub layer: TransformerLayer,
    pub head: Linear,
}

pub struct OffsetOutput<'t> {
    /// Transformer input tokens `[M; V; L]`.
    pub tokens: Var<'t>,
    pub dp: Var<'t>,
    pub dm: Var<'t>,
}

impl OffsetNet {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, text_dim: usize, cfg: &FusionConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.offset_dim;
        let head = Linear::new(store, &format!("{name}.head"), d, 3, true, rng);
        // zero offsets and Δm = ½ at initialisation
        store.get_mut(head.w).value = Tensor::zeros(&[d, 3]);
        Self {
            m_proj: Linear::new(store, &format!("{name}.m_proj"), dim, d, true, rng),
            m_norm: LayerNorm::new(store, &format!("{name}.m_norm"), d),
            v_proj: Linear::new(store, &format!("{name}.v_proj"), dim, d, true, rng),
            v_norm: LayerNorm::new(store, &format!("{name}.v_norm"), d),
            l_proj: Linear::new(store, &format!("{name}.l_proj"), text_dim, d, true, rng),
            l_norm: LayerNorm::new(store, &format!("{name}.l_norm"), d),
            layer: TransformerLayer::new(store, &format!("{name}.layer"), d, cfg.offset_heads, rng),
            head,
        }
    }

    pub fn tokens<'t>(&self, cx: &Binder<'t>, m: Var<'t>, v: Var<'t>, l: Var<'t>) -> Result<Var<'t>> {
        let parts = [
            self.m_norm.forward(cx, self.m_proj.forward(cx, m)),
            self.v_norm.forward(cx, self.v_proj.forward(cx, v)),
            self.l_norm.forward(cx, self.l_proj.forward(cx, l)),
        ];
        let d = parts[0].value().cols();
        if parts.iter().any(|p| p.value().cols() != d) {
            return Err(Error::Shape("offset token dims differ after normalisation".into()));
        }
        Ok(cx.tape().concat_rows(&parts))
    }

    pub fn forward<'t>(
        &self,
        cx: &Binder<'t>,
        m: Var<'t>,
        v: Var<'t>,
        l: Var<'t>,
        (h, w): (usize, usize),
        stage: &DfaStageConfig,
    ) -> Result<OffsetOutput<'t>> {
        let tokens = self.tokens(cx, m, v, l)?;
        let y = self.layer.forward(cx, tokens).slice_rows(0, h * w);
        let pooled = if stage.gamma == 1 { y } else { y.row_map(layout::avg_pool(h, w, stage.gamma)) };
        let raw = self.head.forward(cx, pooled);
        Ok(OffsetOutput {
            tokens,
            dp: raw.slice_cols(0, 2).tanh().scale(stage.max_offset),
            dm: raw.slice_cols(2, 3).sigmoid(),
        })
    }
}

/// Parameters of the whole fusion branch.
#[derive(Debug, Clone)]
pub struct FusionModel {
    pub cfg: FusionConfig,
    pub channels: [usize; 4],
    pub heads: [usize; 4],
    pub sink: Option<crate::optim::ParamId>,
    pub cross: Vec<CrossAttention>,
    pub merges: Vec<PatchMerging>,
    pub offsets: Vec<OffsetNet>,
}

pub struct FusionOutput<'t> {
    pub stages: Vec<StageOutput<'t>>,
    /// Stage-4 attention mass on the spatial tokens, `[h₄·w₄ × 1]`.
    pub relevance: Var<'t>,
    pub side: (usize, usize),
    pub spatial_keys: usize,
}

impl FusionOutput<'_> {
    pub fn empty_cells(&self) -> usize {
        self.stages.iter().map(|s| s.empty_cells).sum()
    }
}

/// Text tokens with positional encoding added.
pub fn encode_text(text: &TextEmbedding) -> Result<Tensor> {
    let pe = sinusoidal_positional_encoding(text.len(), text.data.cols())?;
    text.data.add(&pe)
}

impl FusionModel {
    pub fn new(
        store: &mut ParamStore,
        cfg: FusionConfig,
        channels: [usize; 4],
        heads: [usize; 4],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let sink = cfg
            .null_key
            .then(|| store.add("fusion.null_key", Tensor::uniform(&[1, EMBED_DIM], 1.0, rng)));
        let mut cross = Vec::new();
        let mut merges = Vec::new();
        let mut offsets = Vec::new();
        for i in 0..4 {
            cross.push(CrossAttention::new(
                store,
                &format!("fusion.stage{}.xattn", i + 1),
                channels[i],
                EMBED_DIM,
                heads[i],
                rng,
            ));
            if i > 0 {
                merges.push(PatchMerging::new(store, &format!("fusion.merge{}", i + 1), channels[i - 1], rng));
                offsets.push(OffsetNet::new(
                    store,
                    &format!("fusion.stage{}.offsets", i + 1),
                    channels[i],
                    EMBED_DIM,
                    &cfg,
                    rng,
                ));
            }
        }
        Ok(Self {
            cfg,
            channels,
            heads,
            sink,
            cross,
            merges,
            offsets,
        })
    }

    pub fn is_param(name: &str) -> bool {
        name.starts_with("fusion.")
    }

    /// Spatial tokens (with positional encoding) followed by the null key.
    fn keys<'t>(&self, cx: &Binder<'t>, l: Var<'t>, text: &TextEmbedding) -> Result<Var<'t>> {
        if text.spatial.is_empty() {
            return Err(Error::NoSpatialTokens);
        }
        let ls = l.slice_rows(text.spatial.start, text.spatial.end);
        Ok(match self.sink {
            Some(id) => cx.tape().concat_rows(&[ls, cx.p(id)]),
            None => ls,
        })
    }

    /// One DFA stage (`idx` 1..=3 for stages 2..4).
    pub fn dfa_cross_attention<'t>(
        &self,
        cx: &Binder<'t>,
        idx: usize,
        m: Var<'t>,
        v: Var<'t>,
        keys: Var<'t>,
        l: Var<'t>,
        (h, w): (usize, usize),
    ) -> Result<StageOutput<'t>> {
        let tape = cx.tape();
        let stage = self.cfg.stages[idx - 1];
        let xa = &self.cross[idx];
        let net = &self.offsets[idx - 1];
        let refs = make_reference_grid(h, w, stage.gamma)?;
        let n = refs.rows();
        let l_tokens = match self.sink {
            Some(id) => tape.concat_rows(&[l, cx.p(id)]),
            None => l,
        };
        let off = net.forward(cx, m, v, l_tokens, (h, w), &stage)?;
        let kk = xa.k.forward(cx, keys);
        let vv = xa.v.forward(cx, keys);
        if self.cfg.t_only {
            let attn = self.transformer_attention(cx, net, off.tokens, h * w, keys)?;
            let attention = vec![attn; xa.heads];
            return Ok(StageOutput {
                map: xa.combine(cx, m, &attention, vv),
                attention,
                offsets: Some((off.dp, off.dm)),
                empty_cells: 0,
            });
        }
        let dp = if self.cfg.no_offsets { tape.constant(Tensor::zeros(&[n, 2])) } else { off.dp };
        let dm = if self.cfg.no_scalar { tape.constant(Tensor::ones(&[n, 1])) } else { off.dm };
        let points = tape.constant(refs).add(dp);
        let mn = xa.norm.forward(cx, m);
        let q = xa.q.forward(cx, tape.bilinear_sample(mn, points, h, w));
        let completion = Completion {
            h,
            w,
            gamma: stage.gamma,
            range: stage.range,
            epsilon: self.cfg.epsilon,
            use_card: !self.cfg.no_card,
        };
        let mut empty_cells = 0;
        let mut attention = Vec::with_capacity(xa.heads);
        for s in xa.scores(q, kk) {
            let (full, empty) = completion.record(s.mul_col(dm), points)?;
            empty_cells += empty;
            attention.push(full.softmax_rows());
        }
        Ok(StageOutput {
            map: xa.combine(cx, m, &attention, vv),
            attention,
            offsets: Some((dp, dm)),
            empty_cells,
        })
    }

    /// Attention of the offset transformer's map tokens over the key tokens
    /// (spatial text and null key), heads of the layer averaged.
    fn transformer_attention<'t>(
        &self,
        cx: &Binder<'t>,
        net: &OffsetNet,
        tokens: Var<'t>,
        hw: usize,
        keys: Var<'t>,
    ) -> Result<Var<'t>> {
        let sa = &net.layer.attn;
        let x = sa.norm.forward(cx, tokens);
        let q = sa.q.forward(cx, x.slice_rows(0, hw));
        // key tokens pass through the same normalisation as the text tokens
        let kt = net.l_norm.forward(cx, net.l_proj.forward(cx, keys));
        let k = sa.k.forward(cx, sa.norm.forward(cx, kt));
        let heads = sa.heads;
        let d = q.value().cols() / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let maps: Vec<Var<'t>> = (0..heads)
            .map(|h| {
                let (qh, kh) = if heads == 1 {
                    (q, k)
                } else {
                    (q.slice_cols(h * d, (h + 1) * d), k.slice_cols(h * d, (h + 1) * d))
                };
                qh.matmul_bt(kh).scale(scale).softmax_rows()
            })
            .collect();
        let mut acc = maps[0];
        for m in &maps[1..] {
            acc = acc.add(*m);
        }
        Ok(acc.scale(1.0 / heads as f64))
    }

    /// Runs all four stages over backbone features `V₁..V₄`.
    pub fn forward<'t>(
        &self,
        cx: &Binder<'t>,
        features: &[Var<'t>],
        sides: &[(usize, usize)],
        text: &TextEmbedding,
    ) -> Result<FusionOutput<'t>> {
        if features.len() != 4 || sides.len() != 4 {
            return Err(Error::Shape("fusion needs four feature stages".into()));
        }
        let tape = cx.tape();
        let l = tape.constant(encode_text(text)?);
        let keys = self.keys(cx, l, text)?;
        let mut stages: Vec<StageOutput<'t>> = Vec::with_capacity(4);
        let first = cross_attention_fusion(cx, &self.cross[0], features[0], keys);
        let mut m = first.map;
        stages.push(first);
        for i in 1..4 {
            let (ph, pw) = sides[i - 1];
            let mi = self.merges[i - 1].forward(cx, m, ph, pw)?.add(features[i]);
            let out = if self.cfg.dfa_enabled[i - 1] {
                self.dfa_cross_attention(cx, i, mi, features[i], keys, l, sides[i])?
            } else {
                cross_attention_fusion(cx, &self.cross[i], mi, keys)
            };
            m = out.map;
            stages.push(out);
        }
        let t_s = text.spatial.len();
        let relevance = spatial_mass(&stages[3].attention, t_s);
        Ok(FusionOutput {
            stages,
            relevance,
            side: sides[3],
            spatial_keys: t_s,
        })
    }

    /// Guidance map from backbone feature maps and a caption embedding.
    pub fn fusion_forward(&self, store: &ParamStore, features: &[FeatureMap], text: &TextEmbedding) -> Result<(GuidanceMap, usize)> {
        let tape = Tape::new();
        let cx = Binder::frozen(&tape, store);
        let vars: Vec<Var<'_>> = features.iter().map(|f| tape.constant(f.data.clone())).collect();
        let sides: Vec<(usize, usize)> = features.iter().map(|f| (f.h, f.w)).collect();
        let out = self.forward(&cx, &vars, &sides, text)?;
        let attn: Vec<Tensor> = out.stages[3].attention.iter().map(|a| (*a.value()).clone()).collect();
        let g = extract_guidance_map(&attn, out.side, out.spatial_keys, self.cfg.key_reduce)?;
        Ok((g, out.empty_cells()))
    }
}

/// Head-averaged attention mass on the first `t_s` key columns.
pub fn spatial_mass<'t>(attention: &[Var<'t>], t_s: usize) -> Var<'t> {
    let mut acc: Option<Var<'t>> = None;
    for a in attention {
        let cols = a.value().cols();
        let s = if cols == t_s { *a } else { a.slice_cols(0, t_s) };
        let m = s.sum_cols();
        acc = Some(match acc {
            Some(x) => x.add(m),
            None => m,
        });
    }
    let acc = acc.expect("at least one head");
    let rows = acc.value().len();
    acc.scale(1.0 / attention.len() as f64).reshape(&[rows, 1])
}

/// Averages stage-4 attention over heads and the `t_s` spatial key columns
/// (null key excluded), then divides by the maximum.
pub fn extract_guidance_map(attention: &[Tensor], (h, w): (usize, usize), t_s: usize, reduce: KeyReduce) -> Result<GuidanceMap> {
    if attention.is_empty() || t_s == 0 {
        return Err(Error::NoSpatialTokens);
    }
    let mut data = vec![0.0; h * w];
    for a in attention {
        if a.rows() != h * w || a.cols() < t_s {
            return Err(Error::Shape(format!("attention {:?} does not match {h}x{w}", a.shape())));
        }
    }
    for (u, d) in data.iter_mut().enumerate() {
        let per_key = (0..t_s).map(|j| attention.iter().map(|a| a.get2(u, j)).sum::<f64>() / attention.len() as f64);
        *d = match reduce {
            KeyReduce::Mean => per_key.sum::<f64>() / t_s as f64,
            KeyReduce::Max => per_key.fold(f64::NEG_INFINITY, f64::max),
        };
    }
    let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numeric("guidance map".into()));
    }
    if max > 0.0 {
        data.iter_mut().for_each(|d| *d /= max);
    }
    Ok(GuidanceMap { h, w, data })
}

/// Per-cell binary cross-entropy between the stage-4 relevance, resized to
/// `(th, tw)`, and a target mask.
pub fn bce_loss<'t>(relevance: Var<'t>, side: (usize, usize), target: &[f64], (th, tw): (usize, usize)) -> Var<'t> {
    let tape = relevance.tape();
    let p = if side == (th, tw) {
        relevance
    } else {
        relevance.row_map(layout::bilinear_resize(side.0, side.1, th, tw))
    };
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    let t = tape.constant(Tensor::new(&[th * tw, 1], target.to_vec()).expect("mask size"));
    let one_minus_t = tape.constant(Tensor::new(&[th * tw, 1], target.iter().map(|v| 1.0 - v).collect()).expect("mask"));
    let ll = t.mul(p.ln()).add(one_minus_t.mul(p.rsub_scalar(1.0).ln()));
    ll.mean().scale(-1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, relative_error};
    use crate::data::embed_text_stub;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn reference_grid_examples() {
        assert_eq!(make_reference_grid(4, 4, 4).unwrap().data(), &[1.5, 1.5]);
        let g = make_reference_grid(4, 4, 2).unwrap();
        assert_eq!(g.data(), &[0.5, 0.5, 0.5, 2.5, 2.5, 0.5, 2.5, 2.5]);
        let g = make_reference_grid(3, 2, 1).unwrap();
        assert_eq!(g.data(), &[0., 0., 0., 1., 1., 0., 1., 1., 2., 0., 2., 1.]);
        assert!(matches!(make_reference_grid(6, 6, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn bilinear_examples() {
        let map = Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(bilinear_sample(&map, 2, 2, 1.0, 0.0), vec![3.0]);
        assert_eq!(bilinear_sample(&map, 2, 2, 0.5, 0.5), vec![2.5]);
        assert_eq!(bilinear_sample(&map, 2, 2, -0.5, -0.5), vec![0.25]);
    }

    fn geo(h: usize, w: usize, gamma: usize, range: usize) -> Completion {
        Completion {
            h,
            w,
            gamma,
            range,
            epsilon: 1.0,
            use_card: true,
        }
    }

    #[test]
    fn completion_identity_at_gamma_one() {
        let mut r = rng(1);
        let s = Tensor::randn(&[12, 3], &mut r);
        let pts = make_reference_grid(3, 4, 1).unwrap();
        let (out, empty) = geo(3, 4, 1, 2).apply(&s, &pts).unwrap();
        assert_eq!(out, s);
        assert_eq!(empty, 0);
    }

    #[test]
    fn completion_single_sample() {
        let s = Tensor::new(&[1, 1], vec![4.0]).unwrap();
        let pts = make_reference_grid(2, 2, 2).unwrap();
        let (out, _) = geo(2, 2, 2, 2).apply(&s, &pts).unwrap();
        assert_eq!(out.data(), &[4.0; 4]);
    }

    #[test]
    fn completion_equidistant_pair() {
        // 2×4 grid, γ = 2, wide window: every unsampled cell sees both samples
        let s = Tensor::new(&[2, 1], vec![2.0, 6.0]).unwrap();
        let pts = Tensor::new(&[2, 2], vec![0.0, 0.0, 0.0, 2.0]).unwrap();
        let (out, _) = geo(2, 4, 2, 8).apply(&s, &pts).unwrap();
        assert!((out.get2(1, 0) - 4.0).abs() < 1e-12);
        let w = |d: f64| 1.0 / (d + 1.0);
        let (d0, d1) = (1.0, 3.0);
        let want = (w(d0) * 6.0 + w(d1) * 2.0) / (w(d0) + w(d1));
        assert!((out.get2(3, 0) - want).abs() < 1e-12);
    }

    #[test]
    fn completion_empty_neighbourhood_uses_column_mean() {
        let s = Tensor::new(&[1, 2], vec![1.0, 3.0]).unwrap();
        let pts = Tensor::new(&[1, 2], vec![40.0, 40.0]).unwrap();
        let (out, empty) = geo(2, 2, 2, 2).apply(&s, &pts).unwrap();
        assert_eq!(empty, 3);
        assert_eq!(out.row(3), &[1.0, 3.0]);
    }

    #[test]
    fn completion_gradients_match_fd() {
        let mut r = rng(9);
        let g = geo(4, 4, 2, 4);
        let s = Tensor::randn(&[4, 3], &mut r);
        let base = make_reference_grid(4, 4, 2).unwrap();
        let pts = base.add(&Tensor::uniform(&[4, 2], 0.4, &mut r)).unwrap();
        let wts = Tensor::randn(&[16, 3], &mut r);
        let f = |s: &Tensor, p: &Tensor| {
            let (o, _) = g.apply(s, p).unwrap();
            o.data().iter().zip(wts.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let tape = Tape::new();
        let sv = tape.var(s.clone());
        let pv = tape.var(pts.clone());
        let (o, _) = g.record(sv, pv).unwrap();
        let loss = o.mul(tape.constant(wts.clone())).sum();
        let grads = tape.backward(loss).unwrap();
        let fs = finite_difference(&s, 1e-6, |x| f(x, &pts));
        let fp = finite_difference(&pts, 1e-6, |x| f(&s, x));
        assert!(relative_error(&grads.get_or_zeros(sv), &fs, 1e-8) < 1e-6);
        assert!(relative_error(&grads.get_or_zeros(pv), &fp, 1e-8) < 1e-5);
    }

    fn small_model(cfg: FusionConfig, seed: u64) -> (ParamStore, FusionModel) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let m = FusionModel::new(&mut store, cfg, [8, 16, 32, 64], [1, 2, 2, 4], &mut r).unwrap();
        (store, m)
    }

    fn features(side: usize, seed: u64) -> Vec<FeatureMap> {
        let mut r = rng(seed);
        let ch = [8, 16, 32, 64];
        (0..4)
            .map(|i| {
                let s = side / (4 << i);
                FeatureMap {
                    stage: i + 1,
                    h: s,
                    w: s,
                    c: ch[i],
                    data: Tensor::randn(&[s * s, ch[i]], &mut r),
                }
            })
            .collect()
    }

    #[test]
    fn single_key_gives_its_value_everywhere() {
        let cfg = FusionConfig {
            null_key: false,
            ..FusionConfig::default()
        };
        let (store, model) = small_model(cfg, 2);
        let tape = Tape::new();
        let cx = Binder::frozen(&tape, &store);
        let mut r = rng(3);
        let m = tape.constant(Tensor::randn(&[16, 8], &mut r));
        let key = Tensor::randn(&[1, EMBED_DIM], &mut r);
        let out = cross_attention_fusion(&cx, &model.cross[0], m, tape.constant(key.clone()));
        assert!(out.attention[0].value().data().iter().all(|&a| (a - 1.0).abs() < 1e-15));
        let two = Tensor::from_fn(&[2, EMBED_DIM], |i| key.data()[i % EMBED_DIM]);
        let out2 = cross_attention_fusion(&cx, &model.cross[0], m, tape.constant(two));
        assert!(out.map.value().max_abs_diff(&out2.map.value()) < 1e-12);
    }

    #[test]
    fn cross_attention_matches_loop_oracle() {
        let (store, model) = small_model(FusionConfig::default(), 4);
        let xa = &model.cross[1];
        let mut r = rng(5);
        let m = Tensor::randn(&[16, 16], &mut r);
        let keys = Tensor::randn(&[3, EMBED_DIM], &mut r);
        let tape = Tape::new();
        let cx = Binder::frozen(&tape, &store);
        let out = cross_attention_fusion(&cx, xa, tape.constant(m.clone()), tape.constant(keys.clone()));
        for a in &out.attention {
            let a = a.value();
            for row in 0..16 {
                assert!((a.row(row).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        // loop oracle
        let lin = |x: &[f64], l: &Linear| -> Vec<f64> {
            let w = store.value(l.w);
            let b = store.value(l.b.unwrap());
            (0..l.d_out).map(|j| b.data()[j] + (0..l.d_in).map(|i| x[i] * w.get2(i, j)).sum::<f64>()).collect()
        };
        let ln = |x: &[f64]| -> Vec<f64> {
            let n = x.len() as f64;
            let mu = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            x.iter().map(|v| (v - mu) / (var + 1e-5).sqrt()).collect()
        };
        let ks: Vec<Vec<f64>> = (0..3).map(|t| lin(keys.row(t), &xa.k)).collect();
        let vs: Vec<Vec<f64>> = (0..3).map(|t| lin(keys.row(t), &xa.v)).collect();
        let y = out.map.value();
        for u in 0..16 {
            let q = lin(&ln(m.row(u)), &xa.q);
            let d = 8;
            let mut o = vec![0.0; 16];
            for h in 0..2 {
                let sc: Vec<f64> = (0..3)
                    .map(|t| (0..d).map(|i| q[h * d + i] * ks[t][h * d + i]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let mx = sc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = sc.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for t in 0..3 {
                    for i in 0..d {
                        o[h * d + i] += e[t] / z * vs[t][h * d + i];
                    }
                }
            }
            let proj = lin(&o, &xa.out);
            for j in 0..16 {
                assert!((y.get2(u, j) - (m.get2(u, j) + proj[j])).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn degenerate_dfa_equals_cross_attention() {
        let mut cfg = FusionConfig::default();
        cfg.stages = [DfaStageConfig {
            gamma: 1,
            max_offset: 1.0,
            range: 2,
        }; 3];
        cfg.no_offsets = true;
        cfg.no_scalar = true;
        let (store, model) = small_model(cfg, 6);
        let mut r = rng(7);
        let tape = Tape::new();
        let cx = Binder::frozen(&tape, &store);
        let m = tape.constant(Tensor::randn(&[16, 16], &mut r));
        let v = tape.constant(Tensor::randn(&[16, 16], &mut r));
        let l = tape.constant(Tensor::randn(&[5, EMBED_DIM], &mut r));
        let keys = l.slice_rows(2, 5);
        let a = model.dfa_cross_attention(&cx, 1, m, v, keys, l, (4, 4)).unwrap();
        let b = cross_attention_fusion(&cx, &model.cross[1], m, keys);
        assert!(a.map.value().max_abs_diff(&b.map.value()) < 1e-9);
    }

    #[test]
    fn zero_modulation_gives_uniform_attention() {
        let (store, model) = small_model(FusionConfig::default(), 8);
        let mut r = rng(9);
        let tape = Tape::new();
        // push the modulation pre-activation to -inf
        let mut s2 = store.clone();
        let head = model.offsets[0].head.b.unwrap();
        s2.get_mut(head).value = Tensor::new(&[3], vec![0.0, 0.0, -1e4]).unwrap();
        let cx2 = Binder::frozen(&tape, &s2);
        let m = tape.constant(Tensor::randn(&[16, 16], &mut r));
        let l = tape.constant(Tensor::randn(&[4, EMBED_DIM], &mut r));
        let out = model.dfa_cross_attention(&cx2, 1, m, m, l, l, (4, 4)).unwrap();
        for a in &out.attention {
            let a = a.value();
            let u = 1.0 / a.cols() as f64;
            assert!(a.data().iter().all(|&x| (x - u).abs() < 1e-12));
        }
    }

    #[test]
    fn offsets_respect_bounds() {
        for seed in 0..5 {
            let (store, model) = small_model(FusionConfig::default(), seed);
            let mut s2 = store.clone();
            let head = &model.offsets[0].head;
            let mut r = rng(seed + 100);
            s2.get_mut(head.w).value = Tensor::uniform(&[head.d_in, 3], 1e6, &mut r);
            let tape = Tape::new();
            let cx = Binder::frozen(&tape, &s2);
            let m = tape.constant(Tensor::randn(&[64, 16], &mut r));
            let l = tape.constant(Tensor::randn(&[4, EMBED_DIM], &mut r));
            let o = model.offsets[0].forward(&cx, m, m, l, (8, 8), &DfaStageConfig::TABLE[0]).unwrap();
            let dp = o.dp.value();
            assert!(dp.data().iter().all(|v| v.abs() <= 8.0));
            assert!(dp.data().iter().any(|v| v.abs() == 8.0));
            assert!(o.dm.value().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn guidance_extraction_examples() {
        let uniform = vec![Tensor::full(&[4, 2], 0.5)];
        let g = extract_guidance_map(&uniform, (2, 2), 2, KeyReduce::Mean).unwrap();
        assert_eq!(g.data, vec![1.0; 4]);
        let mut a = Tensor::full(&[4, 3], 0.1);
        a.data_mut()[3..6].copy_from_slice(&[0.45, 0.45, 0.1]);
        let g = extract_guidance_map(&[a], (2, 2), 2, KeyReduce::Mean).unwrap();
        assert_eq!(g.get(0, 1), 1.0);
        assert!(g.data.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn fusion_forward_shapes_and_determinism() {
        let (store, model) = small_model(FusionConfig::default(), 10);
        let text = embed_text_stub("red circle [left of blue square]").unwrap();
        let feats = features(64, 11);
        let (g1, _) = model.fusion_forward(&store, &feats, &text).unwrap();
        let (g2, _) = model.fusion_forward(&store, &feats, &text).unwrap();
        assert_eq!((g1.h, g1.w), (2, 2));
        assert_eq!(g1, g2);
        assert!(g1.data.iter().all(|&v| v > 0.0 && v <= 1.0));
        assert_eq!(g1.data.iter().copied().fold(0.0, f64::max), 1.0);
        let none = embed_text_stub("red circle").unwrap();
        assert!(matches!(model.fusion_forward(&store, &feats, &none), Err(Error::NoSpatialTokens)));
    }

    #[test]
    fn ablations_run() {
        let text = embed_text_stub("red circle [between blue square and green circle]").unwrap();
        let feats = features(64, 12);
        for tweak in 0..5 {
            let mut cfg = FusionConfig::default();
            match tweak {
                0 => cfg.no_offsets = true,
                1 => cfg.no_scalar = true,
                2 => cfg.no_card = true,
                3 => cfg.t_only = true,
                _ => cfg.dfa_enabled = [false; 3],
            }
            let (store, model) = small_model(cfg, 13);
            let (g, _) = model.fusion_forward(&store, &feats, &text).unwrap();
            assert!(g.data.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn bce_gradients_match_fd() {
        let (store, model) = small_model(FusionConfig::default(), 14);
        let text = embed_text_stub("red circle [above blue square]").unwrap();
        let feats = features(64, 15);
        let mask: Vec<f64> = (0..16).map(|i| (i % 5 == 0) as u8 as f64).collect();
        let loss_of = |s: &ParamStore| -> f64 {
            let tape = Tape::new();
            let cx = Binder::frozen(&tape, s);
            let vars: Vec<Var<'_>> = feats.iter().map(|f| tape.constant(f.data.clone())).collect();
            let sides: Vec<_> = feats.iter().map(|f| (f.h, f.w)).collect();
            let out = model.forward(&cx, &vars, &sides, &text).unwrap();
            bce_loss(out.relevance, out.side, &mask, (4, 4)).value().data()[0]
        };
        let tape = Tape::new();
        let cx = Binder::new(&tape, &store, FusionModel::is_param);
        let vars: Vec<Var<'_>> = feats.iter().map(|f| tape.constant(f.data.clone())).collect();
        let sides: Vec<_> = feats.iter().map(|f| (f.h, f.w)).collect();
        let out = model.forward(&cx, &vars, &sides, &text).unwrap();
        let loss = bce_loss(out.relevance, out.side, &mask, (4, 4));
        let grads = tape.backward(loss).unwrap();
        let mut checked = 0;
        for (id, g) in cx.param_grads(&grads) {
            let name = store.name(id);
            if !(name.contains("stage2.offsets.head") || name.contains("null_key") || name == "fusion.stage4.xattn.k.bias") {
                continue;
            }
            let fd = finite_difference(store.value(id), 1e-5, |v| {
                let mut s = store.clone();
                s.get_mut(id).value = v.clone();
                loss_of(&s)
            });
            let err = relative_error(&g, &fd, 1e-7);
            assert!(err < 1e-3, "{name}: {err}");
            checked += 1;
        }
        assert!(checked >= 3);
    }
}

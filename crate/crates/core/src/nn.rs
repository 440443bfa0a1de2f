//! Layers recorded on a [`Tape`]: linear maps, layer norm, feed-forward and
//! multi-head attention.

use std::cell::RefCell;

use rand::Rng;

use crate::autodiff::{Grads, Tape, Var};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Binds store parameters to tape leaves for one forward pass.
pub struct Binder<'t> {
    tape: &'t Tape,
    store: &'t ParamStore,
    trainable: Vec<bool>,
    bound: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t> Binder<'t> {
    /// Every parameter is a constant.
    pub fn frozen(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self::new(tape, store, |_| false)
    }

    pub fn new(tape: &'t Tape, store: &'t ParamStore, trainable: impl Fn(&str) -> bool) -> Self {
        let trainable = store.ids().map(|id| trainable(store.name(id))).collect();
        Self {
            tape,
            store,
            trainable,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore {
        self.store
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = if self.trainable[id.0] {
            self.tape.var(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Gradients of every bound trainable parameter.
    pub fn param_grads(&self, grads: &Grads) -> Vec<(ParamId, Tensor)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter(|(i, _)| self.trainable[*i])
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), grads.get_or_zeros(v))))
            .collect()
    }
}

/// `x · W + b` with `W: [in × out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights uniform in `±1/√d_in`, bias zero.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = store.add(format!("{name}.weight"), Tensor::uniform(&[d_in, d_out], bound, rng));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<'t>(&self, cx: &Binder<'t>, x: Var<'t>) -> Var<'t> {
        let y = x.matmul(cx.p(self.w));
        match self.b {
            Some(b) => y.add_row(cx.p(b)),
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'t>(&self, cx: &Binder<'t>, x: Var<'t>) -> Var<'t> {
        x.layer_norm(1e-5).mul_row(cx.p(self.gamma)).add_row(cx.p(self.beta))
    }
}

/// Pre-norm residual MLP: `x + W₂ gelu(W₁ LN(x))`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
        }
    }

    pub fn forward<'t>(&self, cx: &Binder<'t>, x: Var<'t>) -> Var<'t> {
        let h = self.fc1.forward(cx, self.norm.forward(cx, x)).gelu();
        x.add(self.fc2.forward(cx, h))
    }
}

/// Scaled dot-product attention split over `heads` column groups.
///
/// Returns the concatenated head outputs and each head's attention weights.
pub fn multi_head_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize) -> (Var<'t>, Vec<Var<'t>>) {
    let tape = q.tape();
    let c = q.value().cols();
    assert_eq!(c % heads, 0, "heads must divide channels");
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut attns = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * d, (h + 1) * d);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (q.slice_cols(lo, hi), k.slice_cols(lo, hi), v.slice_cols(lo, hi))
        };
        let a = qh.matmul_bt(kh).scale(scale).softmax_rows();
        outs.push(a.matmul(vh));
        attns.push(a);
    }
    let out = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
    (out, attns)
}

/// Pre-norm multi-head self-attention block with residual.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
            heads,
        }
    }

    pub fn forward<'t>(&self, cx: &Binder<'t>, x: Var<'t>) -> Var<'t> {
        let h = self.norm.forward(cx, x);
        let (q, k, v) = (self.q.forward(cx, h), self.k.forward(cx, h), self.v.forward(cx, h));
        let (o, _) = multi_head_attention(q, k, v, self.heads);
        x.add(self.out.forward(cx, o))
    }
}

/// Self-attention followed by a feed-forward block.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub attn: SelfAttention,
    pub ffn: FeedForward,
}

impl TransformerLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 2 * dim, rng),
        }
    }

    pub fn forward<'t>(&self, cx: &Binder<'t>, x: Var<'t>) -> Var<'t> {
        self.ffn.forward(cx, self.attn.forward(cx, x))
    }
}

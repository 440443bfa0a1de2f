//! Tape-based reverse-mode differentiation over [`Tensor`] kernels.
//!
//! A [`Tape`] records every operation applied to a [`Var`]. Calling
//! [`Tape::backward`] on a scalar output walks the tape in reverse and
//! accumulates vector-Jacobian products. Nodes whose inputs are all constants
//! never receive gradients, so frozen sub-graphs cost nothing on the way back.
//!
//! Shape mismatches inside recorded ops are programming errors and panic;
//! public entry points validate shapes before they reach the tape.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{dot, matmul_into, Tensor};

/// A differentiable operation implemented outside this module.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (`None` when the input gets nothing).
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

/// Row-level fixed linear map: output row `i` is `Σ w·input[j]` over `rows[i]`.
#[derive(Debug, Clone)]
pub struct RowMap {
    pub in_rows: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Sigmoid(usize),
    Gelu(usize),
    Exp(usize),
    Log(usize),
    Clamp(usize, f64, f64),
    Softmax(usize),
    LayerNorm(usize, f64),
    SumAll(usize),
    SumCols(usize),
    ColSums(usize),
    MaxAll(usize),
    Gather(usize, Rc<Vec<usize>>),
    RowMap(usize, Rc<RowMap>),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    Reshape(usize),
    Threshold,
    BilinearSample { map: usize, points: usize, h: usize, w: usize },
    Custom(Vec<usize>, Rc<dyn CustomOp>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Marker index meaning "this output element is zero" in [`Var::gather`].
pub const GATHER_ZERO: usize = usize::MAX;

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like its value if none flowed.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn val(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// A leaf that receives gradients.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let cols = parts[0].value().cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = p.value();
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.rg(&ids);
        self.push(
            Tensor::new(&[rows, cols], data).expect("concat_rows"),
            Op::ConcatRows(ids),
            rg,
        )
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let rows = vals[0].rows();
        assert!(vals.iter().all(|v| v.rows() == rows), "concat_cols row mismatch");
        let total: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.rg(&ids);
        self.push(
            Tensor::new(&[rows, total], data).expect("concat_cols"),
            Op::ConcatCols(ids),
            rg,
        )
    }

    /// Bilinear sampling of `map` (`[h·w × C]`, raster order) at fractional
    /// `points` (`[K × 2]`, each row `(row, col)` in grid units).
    ///
    /// Uses the kernel `g(a, b) = max(0, 1 − |a − b|)` over the four integral
    /// neighbours; neighbours outside the grid contribute zero.
    pub fn bilinear_sample<'t>(&'t self, map: Var<'t>, points: Var<'t>, h: usize, w: usize) -> Var<'t> {
        let m = map.value();
        let p = points.value();
        assert_eq!(m.rows(), h * w, "bilinear map rows");
        assert_eq!(p.cols(), 2, "bilinear points must be [K x 2]");
        let c = m.cols();
        let k = p.rows();
        let mut out = vec![0.0; k * c];
        for i in 0..k {
            let o = &mut out[i * c..(i + 1) * c];
            for (idx, wgt) in bilinear_taps(p.get2(i, 0), p.get2(i, 1), h, w) {
                for (ov, &mv) in o.iter_mut().zip(m.row(idx)) {
                    *ov += wgt * mv;
                }
            }
        }
        let rg = self.rg(&[map.id, points.id]);
        self.push(
            Tensor::new(&[k, c], out).expect("bilinear"),
            Op::BilinearSample {
                map: map.id,
                points: points.id,
                h,
                w,
            },
            rg,
        )
    }

    /// Records an externally implemented op with a precomputed output.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], output: Tensor, op: Rc<dyn CustomOp>) -> Var<'t> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let rg = self.rg(&ids);
        self.push(output, Op::Custom(ids, op), rg)
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, loss: Var<'_>) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Unsupported(format!(
                "backward needs a scalar output, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contributions = backward_node(&nodes, id, &g)?;
            grads[id] = Some(g);
            for (pid, pg) in contributions {
                if !nodes[pid].requires_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Grads { grads })
    }
}

/// The (index, weight) pairs of the in-grid bilinear neighbours of `(y, x)`.
pub fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> impl Iterator<Item = (usize, f64)> {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let (y0, x0) = (y0 as i64, x0 as i64);
    [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x0 + 1, (1.0 - fy) * fx),
        (y0 + 1, x0, fy * (1.0 - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    ]
    .into_iter()
    .filter(move |&(r, c, wgt)| {
        wgt != 0.0 && r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w
    })
    .map(move |(r, c, wgt)| (r as usize * w + c as usize, wgt))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn like(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(t.shape(), data).expect("shape preserved")
}

fn backward_node(nodes: &[Node], id: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let v = |i: usize| -> &Tensor { &nodes[i].value };
    let out = &nodes[id].value;
    let gd = g.data();
    Ok(match &nodes[id].op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (av, bv) = (v(*a), v(*b));
            let mut res = Vec::new();
            if nodes[*a].requires_grad {
                res.push((*a, g.matmul_bt(bv)?));
            }
            if nodes[*b].requires_grad {
                res.push((*b, av.matmul_at(g)?));
            }
            res
        }
        Op::MatMulBt(a, b) => {
            // out = a · bᵀ ; da = g · b ; db = gᵀ · a
            let (av, bv) = (v(*a), v(*b));
            let mut res = Vec::new();
            if nodes[*a].requires_grad {
                res.push((*a, g.matmul(bv)?));
            }
            if nodes[*b].requires_grad {
                res.push((*b, g.matmul_at(av)?));
            }
            res
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, like(v(*b), gd.to_vec()))],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, like(v(*b), gd.iter().map(|x| -x).collect()))],
        Op::Mul(a, b) => {
            let (av, bv) = (v(*a), v(*b));
            vec![
                (*a, like(av, gd.iter().zip(bv.data()).map(|(g, b)| g * b).collect())),
                (*b, like(bv, gd.iter().zip(av.data()).map(|(g, a)| g * a).collect())),
            ]
        }
        Op::Div(a, b) => {
            let (av, bv) = (v(*a), v(*b));
            let ga = gd.iter().zip(bv.data()).map(|(g, b)| g / b).collect();
            let gb = gd
                .iter()
                .zip(av.data().iter().zip(bv.data()))
                .map(|(g, (a, b))| -g * a / (b * b))
                .collect();
            vec![(*a, like(av, ga)), (*b, like(bv, gb))]
        }
        Op::AddRow(a, b) => {
            let n = v(*b).len();
            let mut gb = vec![0.0; n];
            for row in gd.chunks(n) {
                for (acc, x) in gb.iter_mut().zip(row) {
                    *acc += x;
                }
            }
            vec![(*a, g.clone()), (*b, like(v(*b), gb))]
        }
        Op::MulRow(a, b) => {
            let (av, bv) = (v(*a), v(*b));
            let n = bv.len();
            let mut ga = vec![0.0; gd.len()];
            let mut gb = vec![0.0; n];
            for (r, (grow, arow)) in gd.chunks(n).zip(av.data().chunks(n)).enumerate() {
                for j in 0..n {
                    ga[r * n + j] = grow[j] * bv.data()[j];
                    gb[j] += grow[j] * arow[j];
                }
            }
            vec![(*a, like(av, ga)), (*b, like(bv, gb))]
        }
        Op::MulCol(a, s) => {
            let (av, sv) = (v(*a), v(*s));
            let n = av.cols();
            let mut ga = vec![0.0; gd.len()];
            let mut gs = vec![0.0; sv.len()];
            for r in 0..av.rows() {
                let sr = sv.data()[r];
                for j in 0..n {
                    ga[r * n + j] = gd[r * n + j] * sr;
                    gs[r] += gd[r * n + j] * av.data()[r * n + j];
                }
            }
            vec![(*a, like(av, ga)), (*s, like(sv, gs))]
        }
        Op::Scale(a, c) => vec![(*a, like(v(*a), gd.iter().map(|x| x * c).collect()))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::Tanh(a) => vec![(
            *a,
            like(out, gd.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect()),
        )],
        Op::Sigmoid(a) => vec![(
            *a,
            like(out, gd.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect()),
        )],
        Op::Gelu(a) => vec![(
            *a,
            like(out, gd.iter().zip(v(*a).data()).map(|(g, x)| g * gelu_grad(*x)).collect()),
        )],
        Op::Exp(a) => vec![(
            *a,
            like(out, gd.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
        )],
        Op::Log(a) => vec![(
            *a,
            like(out, gd.iter().zip(v(*a).data()).map(|(g, x)| g / x).collect()),
        )],
        Op::Clamp(a, lo, hi) => vec![(
            *a,
            like(
                out,
                gd.iter()
                    .zip(v(*a).data())
                    .map(|(g, x)| if x < lo || x > hi { 0.0 } else { *g })
                    .collect(),
            ),
        )],
        Op::Softmax(a) => {
            let n = out.cols();
            let mut ga = vec![0.0; gd.len()];
            for ((grow, yrow), garow) in gd.chunks(n).zip(out.data().chunks(n)).zip(ga.chunks_mut(n)) {
                let s = dot(grow, yrow);
                for j in 0..n {
                    garow[j] = yrow[j] * (grow[j] - s);
                }
            }
            vec![(*a, like(out, ga))]
        }
        Op::LayerNorm(a, eps) => {
            let x = v(*a);
            let n = x.cols();
            let mut ga = vec![0.0; gd.len()];
            for r in 0..x.rows() {
                let xr = x.row(r);
                let mu = xr.iter().sum::<f64>() / n as f64;
                let var = xr.iter().map(|t| (t - mu) * (t - mu)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let yr = out.row(r);
                let gr = &gd[r * n..(r + 1) * n];
                let mg = gr.iter().sum::<f64>() / n as f64;
                let mgy = dot(gr, yr) / n as f64;
                for j in 0..n {
                    ga[r * n + j] = inv * (gr[j] - mg - yr[j] * mgy);
                }
            }
            vec![(*a, like(x, ga))]
        }
        Op::SumAll(a) => vec![(*a, Tensor::full(v(*a).shape(), gd[0]))],
        Op::SumCols(a) => {
            let x = v(*a);
            let n = x.cols();
            vec![(*a, Tensor::from_fn(x.shape(), |i| gd[i / n]))]
        }
        Op::ColSums(a) => {
            let x = v(*a);
            let n = x.cols();
            vec![(*a, Tensor::from_fn(x.shape(), |i| gd[i % n]))]
        }
        Op::MaxAll(a) => {
            let x = v(*a);
            let m = out.data()[0];
            let arg = x.data().iter().position(|&t| t == m).unwrap_or(0);
            let mut ga = vec![0.0; x.len()];
            ga[arg] = gd[0];
            vec![(*a, like(x, ga))]
        }
        Op::Gather(a, idx) => {
            let x = v(*a);
            let mut ga = vec![0.0; x.len()];
            for (o, &src) in idx.iter().enumerate() {
                if src != GATHER_ZERO {
                    ga[src] += gd[o];
                }
            }
            vec![(*a, like(x, ga))]
        }
        Op::RowMap(a, map) => {
            let x = v(*a);
            let c = x.cols();
            let mut ga = vec![0.0; x.len()];
            for (i, row) in map.rows.iter().enumerate() {
                let gr = &gd[i * c..(i + 1) * c];
                for &(j, w) in row {
                    for (acc, gv) in ga[j * c..(j + 1) * c].iter_mut().zip(gr) {
                        *acc += w * gv;
                    }
                }
            }
            vec![(*a, like(x, ga))]
        }
        Op::ConcatRows(ids) => {
            let mut off = 0;
            ids.iter()
                .map(|&i| {
                    let n = v(i).len();
                    let t = like(v(i), gd[off..off + n].to_vec());
                    off += n;
                    (i, t)
                })
                .collect()
        }
        Op::ConcatCols(ids) => {
            let total = out.cols();
            let rows = out.rows();
            let mut col = 0;
            ids.iter()
                .map(|&i| {
                    let c = v(i).cols();
                    let mut d = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        d.extend_from_slice(&gd[r * total + col..r * total + col + c]);
                    }
                    col += c;
                    (i, like(v(i), d))
                })
                .collect()
        }
        Op::SliceCols(a, start) => {
            let x = v(*a);
            let n = x.cols();
            let k = out.cols();
            let mut ga = vec![0.0; x.len()];
            for r in 0..x.rows() {
                ga[r * n + start..r * n + start + k].copy_from_slice(&gd[r * k..(r + 1) * k]);
            }
            vec![(*a, like(x, ga))]
        }
        Op::Reshape(a) => vec![(*a, like(v(*a), gd.to_vec()))],
        Op::Threshold => {
            return Err(Error::Unsupported(
                "threshold step is not differentiable".into(),
            ))
        }
        Op::BilinearSample { map, points, h, w } => {
            let m = v(*map);
            let p = v(*points);
            let c = m.cols();
            let mut gm = vec![0.0; m.len()];
            let mut gp = vec![0.0; p.len()];
            for i in 0..p.rows() {
                let (y, x) = (p.get2(i, 0), p.get2(i, 1));
                let gr = &gd[i * c..(i + 1) * c];
                for (idx, wgt) in bilinear_taps(y, x, *h, *w) {
                    for (acc, gv) in gm[idx * c..(idx + 1) * c].iter_mut().zip(gr) {
                        *acc += wgt * gv;
                    }
                }
                // d/dy and d/dx of the tap weights (right derivative at integers)
                let (y0, x0) = (y.floor(), x.floor());
                let (fy, fx) = (y - y0, x - x0);
                let (y0, x0) = (y0 as i64, x0 as i64);
                let corners = [
                    (y0, x0, -(1.0 - fx), -(1.0 - fy)),
                    (y0, x0 + 1, -fx, 1.0 - fy),
                    (y0 + 1, x0, 1.0 - fx, -fy),
                    (y0 + 1, x0 + 1, fx, fy),
                ];
                for (r, cc, dy, dx) in corners {
                    if r < 0 || cc < 0 || r as usize >= *h || cc as usize >= *w {
                        continue;
                    }
                    let row = m.row(r as usize * w + cc as usize);
                    let gdot = dot(gr, row);
                    gp[i * 2] += dy * gdot;
                    gp[i * 2 + 1] += dx * gdot;
                }
            }
            vec![(*map, like(m, gm)), (*points, like(p, gp))]
        }
        Op::Custom(ids, op) => {
            let inputs: Vec<&Tensor> = ids.iter().map(|&i| v(i)).collect();
            let gs = op.backward(&inputs, out, g)?;
            ids.iter()
                .zip(gs)
                .filter_map(|(&i, gi)| gi.map(|t| (i, t)))
                .collect()
        }
    })
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(&[self.id])
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.rg(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        assert_eq!(k, b.rows(), "matmul {:?} x {:?}", a.shape(), b.shape());
        let mut out = vec![0.0; m * n];
        matmul_into(a.data(), b.data(), &mut out, m, k, n);
        self.binary(
            other,
            Tensor::new(&[m, n], out).expect("matmul"),
            Op::MatMul(self.id, other.id),
        )
    }

    /// `self · otherᵀ`.
    pub fn matmul_bt(&self, other: Var<'t>) -> Var<'t> {
        let v = self.value().matmul_bt(&other.value()).expect("matmul_bt shapes");
        self.binary(other, v, Op::MatMulBt(self.id, other.id))
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        let v = self.value().add(&other.value()).expect("add shapes");
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        let v = self.value().sub(&other.value()).expect("sub shapes");
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        let v = self
            .value()
            .zip_map(&other.value(), |a, b| a * b)
            .expect("mul shapes");
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: Var<'t>) -> Var<'t> {
        let v = self
            .value()
            .zip_map(&other.value(), |a, b| a / b)
            .expect("div shapes");
        self.binary(other, v, Op::Div(self.id, other.id))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&self, bias: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), bias.value());
        let n = a.cols();
        assert_eq!(b.len(), n, "add_row length");
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + b.data()[i % n])
            .collect();
        self.binary(bias, like(&a, data), Op::AddRow(self.id, bias.id))
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(&self, row: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), row.value());
        let n = a.cols();
        assert_eq!(b.len(), n, "mul_row length");
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * b.data()[i % n])
            .collect();
        self.binary(row, like(&a, data), Op::MulRow(self.id, row.id))
    }

    /// Multiplies row `r` by `scalars[r]`.
    pub fn mul_col(&self, scalars: Var<'t>) -> Var<'t> {
        let (a, s) = (self.value(), scalars.value());
        let n = a.cols();
        assert_eq!(s.len(), a.rows(), "mul_col length");
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * s.data()[i / n])
            .collect();
        self.binary(scalars, like(&a, data), Op::MulCol(self.id, scalars.id))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(self.value().scale(c), Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(self.value().map(|x| x + c), Op::AddScalar(self.id))
    }

    /// `c - self`.
    pub fn rsub_scalar(&self, c: f64) -> Var<'t> {
        self.scale(-1.0).add_scalar(c)
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(*self)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(self.value().map(f64::tanh), Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(self.value().map(sigmoid), Op::Sigmoid(self.id))
    }

    pub fn gelu(&self) -> Var<'t> {
        self.unary(self.value().map(gelu), Op::Gelu(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(self.value().map(f64::exp), Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(self.value().map(f64::ln), Op::Log(self.id))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(self.value().map(|x| x.clamp(lo, hi)), Op::Clamp(self.id, lo, hi))
    }

    pub fn softmax_rows(&self) -> Var<'t> {
        self.unary(self.value().softmax_rows(), Op::Softmax(self.id))
    }

    /// Per-row standardisation (no affine part).
    pub fn layer_norm(&self, eps: f64) -> Var<'t> {
        let x = self.value();
        let n = x.cols();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|t| (t - mu) * (t - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for t in row.iter_mut() {
                *t = (*t - mu) * inv;
            }
        }
        self.unary(like(&x, out), Op::LayerNorm(self.id, eps))
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Tensor::scalar(self.value().sum()), Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over columns, one value per row (`[rows]`).
    pub fn sum_cols(&self) -> Var<'t> {
        let x = self.value();
        let n = x.cols();
        let data: Vec<f64> = x.data().chunks(n).map(|r| r.iter().sum()).collect();
        let len = data.len();
        self.unary(Tensor::new(&[len], data).expect("sum_cols"), Op::SumCols(self.id))
    }

    /// Sum over rows, one value per column (`[1 × cols]`).
    pub fn col_sums(&self) -> Var<'t> {
        let x = self.value();
        let n = x.cols();
        let mut data = vec![0.0; n];
        for r in x.data().chunks(n) {
            for (acc, v) in data.iter_mut().zip(r) {
                *acc += v;
            }
        }
        self.unary(Tensor::new(&[1, n], data).expect("col_sums"), Op::ColSums(self.id))
    }

    pub fn max_all(&self) -> Var<'t> {
        self.unary(Tensor::scalar(self.value().max()), Op::MaxAll(self.id))
    }

    /// Output element `i` is `self[index[i]]`, or zero for [`GATHER_ZERO`].
    pub fn gather(&self, index: Rc<Vec<usize>>, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let data: Vec<f64> = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { x.data()[i] })
            .collect();
        let v = Tensor::new(shape, data).expect("gather shape");
        self.unary(v, Op::Gather(self.id, index))
    }

    pub fn row_map(&self, map: Rc<RowMap>) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.rows(), map.in_rows, "row_map input rows");
        let c = x.cols();
        let mut out = vec![0.0; map.rows.len() * c];
        for (i, row) in map.rows.iter().enumerate() {
            let o = &mut out[i * c..(i + 1) * c];
            for &(j, w) in row {
                for (ov, xv) in o.iter_mut().zip(x.row(j)) {
                    *ov += w * xv;
                }
            }
        }
        let v = Tensor::new(&[map.rows.len(), c], out).expect("row_map");
        self.unary(v, Op::RowMap(self.id, map))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Var<'t> {
        let x = self.value();
        let n = x.cols();
        assert!(start < end && end <= n, "slice_cols range");
        let k = end - start;
        let mut data = Vec::with_capacity(x.rows() * k);
        for r in 0..x.rows() {
            data.extend_from_slice(&x.data()[r * n + start..r * n + end]);
        }
        let v = Tensor::new(&[x.rows(), k], data).expect("slice_cols");
        self.unary(v, Op::SliceCols(self.id, start))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Var<'t> {
        let x = self.value();
        let n = x.cols();
        let idx: Vec<usize> = (start * n..end * n).collect();
        self.gather(Rc::new(idx), &[end - start, n])
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let v = (*self.value()).clone().reshape(shape).expect("reshape");
        self.unary(v, Op::Reshape(self.id))
    }

    /// Step function `1[x > beta]`; has no derivative.
    pub fn threshold(&self, beta: f64) -> Var<'t> {
        self.unary(
            self.value().map(|x| if x > beta { 1.0 } else { 0.0 }),
            Op::Threshold,
        )
    }
}

/// `∂objective/∂wrt`, where `objective` builds a scalar from a leaf holding
/// `wrt`.
pub fn gradient<F>(wrt: &Tensor, objective: F) -> Result<Tensor>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let x = tape.var(wrt.clone());
    let y = objective(&tape, x)?;
    let grads = tape.backward(y)?;
    Ok(grads.get_or_zeros(x))
}

/// Central finite differences of a scalar function, used by tests as the
/// independent oracle for [`gradient`].
pub fn finite_difference<F>(at: &Tensor, step: f64, mut f: F) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut x = at.clone();
    let mut out = vec![0.0; at.len()];
    for i in 0..at.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + step;
        let fp = f(&x);
        x.data_mut()[i] = orig - step;
        let fm = f(&x);
        x.data_mut()[i] = orig;
        out[i] = (fp - fm) / (2.0 * step);
    }
    Tensor::new(at.shape(), out).expect("fd shape")
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

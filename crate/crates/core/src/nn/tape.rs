//! Reverse-mode differentiation over a fixed set of tensor ops.
//!
//! A [`Tape`] records every op applied to its [`Var`]s. [`Tape::backward`]
//! walks the record in reverse and accumulates adjoints for every node that
//! depends on a parameter leaf. Constants (and anything derived only from
//! constants) are never differentiated.

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Exp(usize),
    Square(usize),
    Relu(usize),
    Min(usize, usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    Gather(usize, Vec<usize>),
    LogSoftmax(usize),
    Reshape(usize),
    Linear { x: usize, w: usize, b: usize },
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'a> {
    id: u64,
    nodes: Vec<Node<'a>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "var used on a foreign tape");
        v.index
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Differentiable leaf borrowing an existing parameter tensor.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// A constant copy of `v`'s current value (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v)].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn same_shape(&self, a: usize, b: usize, what: &str) {
        assert_eq!(
            self.nodes[a].value.shape(),
            self.nodes[b].value.shape(),
            "{what}: operand shapes differ"
        );
    }

    fn zip(&mut self, a: Var, b: Var, op: fn(usize, usize) -> Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        self.same_shape(ia, ib, "elementwise op");
        let va = &self.nodes[ia].value;
        let vb = &self.nodes[ib].value;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(ia) || self.rg(ib);
        self.push(Cow::Owned(out), op(ia, ib), rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let ia = self.idx(a);
        let va = &self.nodes[ia].value;
        let data = va.data().iter().map(|x| f(*x)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(ia);
        self.push(Cow::Owned(out), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul, |x, y| x * y)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Min, |x, y| if x <= y { x } else { y })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ia = self.idx(a);
        self.map(a, Op::Scale(ia, c), |x| x * c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        self.map(a, Op::Exp(ia), f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        self.map(a, Op::Square(ia), |x| x * x)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        self.map(a, Op::Relu(ia), |x| x.max(0.0))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let ia = self.idx(a);
        self.map(a, Op::Clamp(ia, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let s = self.nodes[ia].value.data().iter().sum();
        let rg = self.rg(ia);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum(ia), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let v = &self.nodes[ia].value;
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(ia);
        self.push(Cow::Owned(Tensor::scalar(m)), Op::Mean(ia), rg)
    }

    /// `[N, K] -> [N]`, summing each row.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let v = &self.nodes[ia].value;
        assert_eq!(v.rank(), 2, "row_sum expects a matrix");
        let cols = v.shape()[1];
        let data: Vec<f64> = v.data().chunks(cols).map(|r| r.iter().sum()).collect();
        let rg = self.rg(ia);
        self.push(Cow::Owned(Tensor::vector(data)), Op::RowSum(ia), rg)
    }

    /// `[N, K] -> [N]`, picking column `idx[n]` of row `n`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let ia = self.idx(a);
        let v = &self.nodes[ia].value;
        assert_eq!(v.rank(), 2, "gather expects a matrix");
        let (rows, cols) = (v.shape()[0], v.shape()[1]);
        assert_eq!(rows, idx.len(), "gather index count");
        let data = idx
            .iter()
            .enumerate()
            .map(|(n, &k)| {
                assert!(k < cols, "gather index out of range");
                v.data()[n * cols + k]
            })
            .collect();
        let rg = self.rg(ia);
        self.push(Cow::Owned(Tensor::vector(data)), Op::Gather(ia, idx.to_vec()), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let v = &self.nodes[ia].value;
        assert_eq!(v.rank(), 2, "log_softmax expects a matrix");
        let out = kernels::log_softmax_rows(v.data(), v.shape()[1]);
        let t = Tensor::from_parts(v.shape().to_vec(), out).expect("shape preserved");
        let rg = self.rg(ia);
        self.push(Cow::Owned(t), Op::LogSoftmax(ia), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a);
        let t = self.nodes[ia].value.clone().into_owned().reshape(shape)?;
        let rg = self.rg(ia);
        Ok(self.push(Cow::Owned(t), Op::Reshape(ia), rg))
    }

    /// `x: [N, in]`, `w: [out, in]`, `b: [out]` -> `[N, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(x), self.idx(w), self.idx(b));
        let (xv, wv, bv) = (&self.nodes[ix].value, &self.nodes[iw].value, &self.nodes[ib].value);
        if xv.rank() != 2 || wv.rank() != 2 || xv.shape()[1] != wv.shape()[1] || bv.shape() != [wv.shape()[0]] {
            return Err(Error::Shape(format!(
                "linear: x {:?}, w {:?}, b {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let (n, inp, out) = (xv.shape()[0], wv.shape()[1], wv.shape()[0]);
        let y = kernels::linear_forward(n, inp, out, xv.data(), wv.data(), bv.data());
        let t = Tensor::from_parts(vec![n, out], y)?;
        let rg = self.rg(ix) || self.rg(iw) || self.rg(ib);
        Ok(self.push(Cow::Owned(t), Op::Linear { x: ix, w: iw, b: ib }, rg))
    }

    /// `x: [N, H, W, C]`, `w: [O, k, k, C]`, `b: [O]`, valid padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(x), self.idx(w), self.idx(b));
        let (xv, wv, bv) = (&self.nodes[ix].value, &self.nodes[iw].value, &self.nodes[ib].value);
        let geom = conv_geom(xv.shape(), wv.shape(), bv.shape(), stride)?;
        let y = kernels::conv2d_forward(&geom, xv.data(), wv.data(), bv.data());
        let t = Tensor::from_parts(vec![geom.batch, geom.out_h(), geom.out_w(), geom.out_c], y)?;
        let rg = self.rg(ix) || self.rg(iw) || self.rg(ib);
        Ok(self.push(Cow::Owned(t), Op::Conv2d { x: ix, w: iw, b: ib, geom }, rg))
    }

    /// Adjoints of `wrt` with respect to the scalar `loss`. Leaves that the
    /// loss does not depend on get an exact zero gradient.
    pub fn backward(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(Error::Disconnected(format!(
                "loss var belongs to tape {}, this is tape {}",
                loss.tape, self.id
            )));
        }
        for w in wrt {
            if w.tape != self.id {
                return Err(Error::Disconnected("parameter var from a different tape".into()));
            }
        }
        let root = &self.nodes[loss.index];
        if root.value.len() != 1 {
            return Err(Error::Shape(format!("loss must be scalar, got {:?}", root.value.shape())));
        }
        root.value.check_finite("loss")?;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![1.0]);
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &node.op, g.as_slice(), &mut grads)?;
            // Leaves keep their adjoint for collection below.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        wrt.iter()
            .map(|w| {
                let shape = self.nodes[w.index].value.shape().to_vec();
                let data = if w.index <= loss.index {
                    grads[w.index].clone()
                } else {
                    None
                };
                let t = match data {
                    Some(d) => Tensor::from_parts(shape, d)?,
                    None => Tensor::zeros(&shape),
                };
                t.check_finite("gradient")?;
                Ok(t)
            })
            .collect()
    }

    fn propagate(&self, i: usize, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |j: usize| self.nodes[j].value.data();
        let mut acc = |j: usize, contrib: Vec<f64>| {
            if !self.nodes[j].requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                }
                if self.rg(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
            Op::Exp(a) => acc(*a, g.iter().zip(val(i)).map(|(g, y)| g * y).collect()),
            Op::Square(a) => acc(*a, g.iter().zip(val(*a)).map(|(g, x)| 2.0 * g * x).collect()),
            Op::Relu(a) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Min(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                let pick_a: Vec<bool> = xa.iter().zip(xb).map(|(x, y)| x <= y).collect();
                acc(*a, g.iter().zip(&pick_a).map(|(g, p)| if *p { *g } else { 0.0 }).collect());
                acc(*b, g.iter().zip(&pick_a).map(|(g, p)| if *p { 0.0 } else { *g }).collect());
            }
            Op::Clamp(a, lo, hi) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::RowSum(a) => {
                let cols = self.nodes[*a].value.shape()[1];
                let mut out = Vec::with_capacity(g.len() * cols);
                for gv in g {
                    out.extend(std::iter::repeat(*gv).take(cols));
                }
                acc(*a, out);
            }
            Op::Gather(a, idx) => {
                let cols = self.nodes[*a].value.shape()[1];
                let mut out = vec![0.0; val(*a).len()];
                for (n, (&k, gv)) in idx.iter().zip(g).enumerate() {
                    out[n * cols + k] = *gv;
                }
                acc(*a, out);
            }
            Op::LogSoftmax(a) => {
                // d/dx_j = g_j - softmax_j * sum_k g_k
                let cols = self.nodes[*a].value.shape()[1];
                let y = val(i);
                let mut out = vec![0.0; y.len()];
                for ((o, gr), yr) in out.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let gs: f64 = gr.iter().sum();
                    for ((o, gv), yv) in o.iter_mut().zip(gr).zip(yr) {
                        *o = gv - yv.exp() * gs;
                    }
                }
                acc(*a, out);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Linear { x, w, b } => {
                let ws = self.nodes[*w].value.shape();
                let (inp, out) = (ws[1], ws[0]);
                let n = val(*x).len() / inp;
                let (gx, gw, gb) =
                    kernels::linear_backward(n, inp, out, val(*x), val(*w), g, self.rg(*x));
                if let Some(gx) = gx {
                    acc(*x, gx);
                }
                acc(*w, gw);
                acc(*b, gb);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv2d_backward(geom, val(*x), val(*w), g, self.rg(*x));
                if let Some(gx) = gx {
                    acc(*x, gx);
                }
                acc(*w, gw);
                acc(*b, gb);
            }
        }
        Ok(())
    }
}

pub(crate) fn conv_geom(x: &[usize], w: &[usize], b: &[usize], stride: usize) -> Result<ConvGeom> {
    let bad = || Error::Shape(format!("conv2d: x {x:?}, w {w:?}, b {b:?}, stride {stride}"));
    if x.len() != 4 || w.len() != 4 || b.len() != 1 || stride == 0 {
        return Err(bad());
    }
    if w[1] != w[2] || w[3] != x[3] || b[0] != w[0] || w[1] > x[1] || w[1] > x[2] {
        return Err(bad());
    }
    Ok(ConvGeom {
        batch: x[0],
        in_h: x[1],
        in_w: x[2],
        in_c: x[3],
        out_c: w[0],
        kernel: w[1],
        stride,
    })
}

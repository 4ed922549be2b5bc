//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Nodes are
//! appended in evaluation order, so the tape index is already a topological
//! order: [`Tape::backward`] walks it in reverse and each node's adjoint is
//! complete before it is propagated to its parents.
//!
//! ```
//! use dhog::autodiff::Tape;
//! use dhog::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.input(Tensor::from_vec(vec![3.0, 4.0]));
//! let n = tape.l2norm(x).unwrap();
//! tape.backward(n).unwrap();
//! assert_eq!(tape.value(n).item(), 5.0);
//! let g = tape.grad(x).unwrap().data();
//! assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
//! ```
//!
//! Besides adjoints the tape can push tangents forward ([`Tape::jvp`]), which
//! together with [`Tape::vjp`] gives matrix-free Jacobian products for the
//! trust-region solver.

mod gradcheck;
mod spatial;

use std::collections::hash_map::DefaultHasher;
use std::f64::consts::PI;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

pub use gradcheck::{central_difference, gradcheck, GradcheckOptions, GradcheckReport};
pub use spatial::Kernel;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise single-input primitives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Pow2,
    Sqrt,
    Abs,
    /// Clamp to `[min, max]`; adjoint is 1 strictly inside, 0 elsewhere.
    Clip { min: f64, max: f64 },
    /// `x mod period` into `[0, period)`; adjoint 1.
    Wrap { period: f64 },
    /// `scale · x + shift`.
    Affine { scale: f64, shift: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    /// The right operand may be a single-element node broadcast over the left.
    Binary(Binary, Var, Var),
    Atan2(Var, Var),
    Conv(Var, Arc<Kernel>),
    Subsample {
        src: Var,
        rows: Vec<usize>,
        cols: Vec<usize>,
    },
    Resize(Var),
    Warp { src: Var, pose: Var },
    Sum(Var),
    Dot(Var, Var),
    L2Norm(Var),
    Channel { src: Var, channel: usize },
    Stack(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary(u, _) => match u {
                Unary::Pow2 => "pow2",
                Unary::Sqrt => "sqrt",
                Unary::Abs => "abs",
                Unary::Clip { .. } => "clip",
                Unary::Wrap { .. } => "wrap",
                Unary::Affine { .. } => "affine",
            },
            Op::Binary(b, _, _) => match b {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            },
            Op::Atan2(..) => "atan2",
            Op::Conv(..) => "conv2d_same",
            Op::Subsample { .. } => "subsample",
            Op::Resize(_) => "resize_bilinear",
            Op::Warp { .. } => "warp_bilinear",
            Op::Sum(_) => "sum",
            Op::Dot(..) => "dot",
            Op::L2Norm(_) => "l2norm",
            Op::Channel { .. } => "channel",
            Op::Stack(_) => "stack",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A single-threaded recording of a differentiable computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

const RAD_TO_DEG: f64 = 180.0 / PI;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf holding `value`.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.input(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Adjoint from the most recent backward pass, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- pointwise ------------------------------------------------------

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = match kind {
            Unary::Pow2 => x.map(|v| v * v),
            Unary::Sqrt => x.map(f64::sqrt),
            Unary::Abs => x.map(f64::abs),
            Unary::Clip { min, max } => x.map(|v| v.clamp(min, max)),
            Unary::Wrap { period } => x.map(|v| wrap(v, period)),
            Unary::Affine { scale, shift } => x.map(|v| scale * v + shift),
        };
        self.push(out, Op::Unary(kind, a))
    }

    pub fn pow2(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Pow2, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, a)
    }

    pub fn clip(&mut self, a: Var, min: f64, max: f64) -> Result<Var> {
        if !(min <= max) {
            return Err(Error::config(format!("clip bounds {min} > {max}")));
        }
        self.unary(Unary::Clip { min, max }, a)
    }

    pub fn wrap(&mut self, a: Var, period: f64) -> Result<Var> {
        if !(period > 0.0) {
            return Err(Error::config("wrap period must be positive"));
        }
        self.unary(Unary::Wrap { period }, a)
    }

    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary(Unary::Affine { scale, shift }, a)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, 1.0, s)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, s, 0.0)
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let broadcast = y.is_scalar() && x.shape() != y.shape();
        if !broadcast && x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                op: Op::Binary(kind, a, b).name(),
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let rhs = |i: usize| if broadcast { y.data()[0] } else { y.data()[i] };
        if kind == Binary::Div {
            if let Some(index) = (0..y.len()).find(|&i| y.data()[i] == 0.0) {
                return Err(Error::DivisionByZero { index });
            }
        }
        let f = match kind {
            Binary::Add => |p: f64, q: f64| p + q,
            Binary::Sub => |p: f64, q: f64| p - q,
            Binary::Mul => |p: f64, q: f64| p * q,
            Binary::Div => |p: f64, q: f64| p / q,
        };
        let data = x.data().iter().enumerate().map(|(i, &p)| f(p, rhs(i))).collect();
        let out = Tensor::new(x.shape(), data)?;
        self.push(out, Op::Binary(kind, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// Two-argument arctangent in degrees, range (−180, 180]. The origin maps
    /// to 0 with zero adjoints.
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        let (ty, tx) = (self.value(y), self.value(x));
        if ty.shape() != tx.shape() {
            return Err(Error::ShapeMismatch {
                op: "atan2",
                lhs: ty.shape().to_vec(),
                rhs: tx.shape().to_vec(),
            });
        }
        let data = ty
            .data()
            .iter()
            .zip(tx.data())
            .map(|(&b, &a)| atan2_deg(b, a))
            .collect();
        let out = Tensor::new(ty.shape(), data)?;
        self.push(out, Op::Atan2(y, x))
    }

    // ---- spatial --------------------------------------------------------

    /// Zero-padded correlation whose output has the input's shape.
    pub fn conv2d_same(&mut self, a: Var, kernel: &Arc<Kernel>) -> Result<Var> {
        let x = self.value(a);
        let (h, w) = x.dims2()?;
        if kernel.rows() > 2 * h || kernel.cols() > 2 * w {
            return Err(Error::KernelTooLarge {
                kernel: (kernel.rows(), kernel.cols()),
                input: vec![h, w],
            });
        }
        let out = Tensor::new(&[h, w], spatial::correlate(x.data(), h, w, kernel))?;
        self.push(out, Op::Conv(a, Arc::clone(kernel)))
    }

    /// Gathers `a[rows × cols]`.
    pub fn subsample(&mut self, a: Var, rows: &[usize], cols: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (h, w) = x.dims2()?;
        for (&i, extent) in rows.iter().map(|i| (i, h)).chain(cols.iter().map(|j| (j, w))) {
            if i >= extent {
                return Err(Error::IndexOutOfRange { index: i, extent });
            }
        }
        let data = rows
            .iter()
            .flat_map(|&i| cols.iter().map(move |&j| x.data()[i * w + j]))
            .collect();
        let out = Tensor::new(&[rows.len(), cols.len()], data)?;
        self.push(
            out,
            Op::Subsample {
                src: a,
                rows: rows.to_vec(),
                cols: cols.to_vec(),
            },
        )
    }

    /// Bilinear resize with pixel centers at `(i + 0.5) / extent`.
    pub fn resize_bilinear(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let x = self.value(a);
        let (h, w) = x.dims2()?;
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape {
                op: "resize_bilinear",
                shape: vec![rows, cols],
            });
        }
        let out = Tensor::new(&[rows, cols], spatial::resize(x.data(), h, w, rows, cols))?;
        self.push(out, Op::Resize(a))
    }

    /// Samples `a` through the inverse of the similarity transform held in
    /// `pose` (`[tx, ty, r_degrees, log_scale]`), about the output center.
    /// Samples outside `a` read 0.
    pub fn warp_bilinear(&mut self, a: Var, pose: Var, rows: usize, cols: usize) -> Result<Var> {
        let x = self.value(a);
        let (h, w) = x.dims2()?;
        let p = self.value(pose);
        if p.len() != 4 {
            return Err(Error::InvalidShape {
                op: "warp_bilinear",
                shape: p.shape().to_vec(),
            });
        }
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape {
                op: "warp_bilinear",
                shape: vec![rows, cols],
            });
        }
        let pose_arr = [p.data()[0], p.data()[1], p.data()[2], p.data()[3]];
        let data = spatial::warp_samples(pose_arr, (h, w), (rows, cols))
            .iter()
            .map(|s| spatial::sample(x.data(), h, w, s).0)
            .collect();
        let out = Tensor::new(&[rows, cols], data)?;
        self.push(out, Op::Warp { src: a, pose })
    }

    /// Extracts one channel of an `(h, w, c)` tensor.
    pub fn channel(&mut self, a: Var, channel: usize) -> Result<Var> {
        let x = self.value(a);
        let &[h, w, c] = x.shape() else {
            return Err(Error::InvalidShape {
                op: "channel",
                shape: x.shape().to_vec(),
            });
        };
        if channel >= c {
            return Err(Error::IndexOutOfRange {
                index: channel,
                extent: c,
            });
        }
        let data = (0..h * w).map(|p| x.data()[p * c + channel]).collect();
        let out = Tensor::new(&[h, w], data)?;
        self.push(out, Op::Channel { src: a, channel })
    }

    /// Stacks equally shaped 2D nodes along a new trailing axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidShape {
                op: "stack",
                shape: vec![0],
            });
        };
        let shape = self.shape(first).to_vec();
        if shape.len() != 2 {
            return Err(Error::InvalidShape { op: "stack", shape });
        }
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let n = parts.len();
        let len = shape[0] * shape[1];
        let mut data = vec![0.0; len * n];
        for (b, &p) in parts.iter().enumerate() {
            for (i, &v) in self.value(p).data().iter().enumerate() {
                data[i * n + b] = v;
            }
        }
        let out = Tensor::new(&[shape[0], shape[1], n], data)?;
        self.push(out, Op::Stack(parts.to_vec()))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let s = x.dot(y);
        self.push(Tensor::scalar(s), Op::Dot(a, b))
    }

    /// Euclidean norm. The zero vector has a zero adjoint.
    pub fn l2norm(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).norm();
        self.push(Tensor::scalar(n), Op::L2Norm(a))
    }

    // ---- differentiation ------------------------------------------------

    /// Populates the adjoints of every ancestor of the scalar `seed`.
    /// Previous adjoints are discarded.
    pub fn backward(&mut self, seed: Var) -> Result<()> {
        let v = self.value(seed);
        if !v.is_scalar() {
            return Err(Error::NotScalar(v.shape().to_vec()));
        }
        let ones = Tensor::full(v.shape(), 1.0);
        self.vjp(&[(seed, ones)])
    }

    /// Vector-Jacobian product: seeds each listed node with the given adjoint
    /// and propagates to all ancestors.
    pub fn vjp(&mut self, seeds: &[(Var, Tensor)]) -> Result<()> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(Error::ShapeMismatch {
                    op: "vjp",
                    lhs: self.shape(*v).to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            accumulate(&mut grads, &self.nodes, *v).add_assign(g);
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, a) => {
                let x = self.value(*a);
                let ga = accumulate(grads, &self.nodes, *a);
                for (k, out) in ga.data_mut().iter_mut().enumerate() {
                    *out += g.data()[k] * unary_derivative(*kind, x.data()[k], y.data()[k]);
                }
            }
            Op::Binary(kind, a, b) => {
                let (x, z) = (self.value(*a), self.value(*b));
                let broadcast = z.is_scalar() && x.shape() != z.shape();
                let zv = |k: usize| if broadcast { z.data()[0] } else { z.data()[k] };
                {
                    let ga = accumulate(grads, &self.nodes, *a);
                    for (k, out) in ga.data_mut().iter_mut().enumerate() {
                        let gk = g.data()[k];
                        *out += match kind {
                            Binary::Add | Binary::Sub => gk,
                            Binary::Mul => gk * zv(k),
                            Binary::Div => gk / zv(k),
                        };
                    }
                }
                let gb = accumulate(grads, &self.nodes, *b);
                for k in 0..x.len() {
                    let gk = g.data()[k];
                    let d = match kind {
                        Binary::Add => gk,
                        Binary::Sub => -gk,
                        Binary::Mul => gk * x.data()[k],
                        Binary::Div => -gk * x.data()[k] / (zv(k) * zv(k)),
                    };
                    gb.data_mut()[if broadcast { 0 } else { k }] += d;
                }
            }
            Op::Atan2(yv, xv) => {
                let (ty, tx) = (self.value(*yv), self.value(*xv));
                let n = ty.len();
                let mut dy = vec![0.0; n];
                let mut dx = vec![0.0; n];
                for k in 0..n {
                    let (b, a) = (ty.data()[k], tx.data()[k]);
                    let r2 = a * a + b * b;
                    if r2 > 0.0 {
                        dy[k] = g.data()[k] * RAD_TO_DEG * a / r2;
                        dx[k] = -g.data()[k] * RAD_TO_DEG * b / r2;
                    }
                }
                add_into(accumulate(grads, &self.nodes, *yv), &dy);
                add_into(accumulate(grads, &self.nodes, *xv), &dx);
            }
            Op::Conv(a, kernel) => {
                let (h, w) = (y.shape()[0], y.shape()[1]);
                let d = spatial::correlate_transpose(g.data(), h, w, kernel);
                add_into(accumulate(grads, &self.nodes, *a), &d);
            }
            Op::Subsample { src, rows, cols } => {
                let w = self.shape(*src)[1];
                let ga = accumulate(grads, &self.nodes, *src);
                let mut k = 0;
                for &r in rows {
                    for &c in cols {
                        ga.data_mut()[r * w + c] += g.data()[k];
                        k += 1;
                    }
                }
            }
            Op::Resize(a) => {
                let (h, w) = (self.shape(*a)[0], self.shape(*a)[1]);
                let d = spatial::resize_transpose(g.data(), h, w, y.shape()[0], y.shape()[1]);
                add_into(accumulate(grads, &self.nodes, *a), &d);
            }
            Op::Warp { src, pose } => {
                let img = self.value(*src);
                let (h, w) = (img.shape()[0], img.shape()[1]);
                let samples = spatial::warp_samples(pose4(self.value(*pose)), (h, w), (y.shape()[0], y.shape()[1]));
                let mut dimg = vec![0.0; h * w];
                let mut dpose = [0.0; 4];
                for (k, s) in samples.iter().enumerate() {
                    let gk = g.data()[k];
                    if gk == 0.0 {
                        continue;
                    }
                    spatial::sample_transpose(&mut dimg, h, w, s, gk);
                    let (_, ddx, ddy) = spatial::sample(img.data(), h, w, s);
                    for p in 0..4 {
                        dpose[p] += gk * (ddx * s.dsx[p] + ddy * s.dsy[p]);
                    }
                }
                add_into(accumulate(grads, &self.nodes, *src), &dimg);
                add_into(accumulate(grads, &self.nodes, *pose), &dpose);
            }
            Op::Sum(a) => {
                let s = g.item();
                for out in accumulate(grads, &self.nodes, *a).data_mut() {
                    *out += s;
                }
            }
            Op::Dot(a, b) => {
                let s = g.item();
                let (xa, xb) = (self.value(*a).clone(), self.value(*b).clone());
                accumulate(grads, &self.nodes, *a).axpy(s, &xb);
                accumulate(grads, &self.nodes, *b).axpy(s, &xa);
            }
            Op::L2Norm(a) => {
                let n = y.item();
                let ga = accumulate(grads, &self.nodes, *a);
                if n > 0.0 {
                    ga.axpy(g.item() / n, self.value(*a));
                }
            }
            Op::Channel { src, channel } => {
                let c = self.shape(*src)[2];
                let ga = accumulate(grads, &self.nodes, *src);
                for (p, &gv) in g.data().iter().enumerate() {
                    ga.data_mut()[p * c + channel] += gv;
                }
            }
            Op::Stack(parts) => {
                let n = parts.len();
                for (b, &p) in parts.iter().enumerate() {
                    let gp = accumulate(grads, &self.nodes, p);
                    for (i, out) in gp.data_mut().iter_mut().enumerate() {
                        *out += g.data()[i * n + b];
                    }
                }
            }
        }
    }

    /// Jacobian-vector product: pushes tangents of the seeded nodes forward
    /// through the recorded graph. Returns one entry per tape node; `None`
    /// marks nodes that do not depend on any seed.
    pub fn jvp(&self, seeds: &[(Var, &Tensor)]) -> Result<Vec<Option<Tensor>>> {
        let mut tangents: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, t) in seeds {
            if t.shape() != self.shape(*v) {
                return Err(Error::ShapeMismatch {
                    op: "jvp",
                    lhs: self.shape(*v).to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            tangents[v.0] = Some((*t).clone());
        }
        for i in 0..self.nodes.len() {
            if tangents[i].is_some() {
                continue;
            }
            tangents[i] = self.tangent(i, &tangents);
        }
        Ok(tangents)
    }

    fn tangent(&self, i: usize, tangents: &[Option<Tensor>]) -> Option<Tensor> {
        let node = &self.nodes[i];
        let y = &node.value;
        let t = |v: &Var| tangents[v.0].as_ref();
        let zeros = || Tensor::zeros(y.shape());
        let out = match &node.op {
            Op::Leaf => return None,
            Op::Unary(kind, a) => {
                let ta = t(a)?;
                let x = self.value(*a);
                let mut out = zeros();
                for (k, o) in out.data_mut().iter_mut().enumerate() {
                    *o = ta.data()[k] * unary_derivative(*kind, x.data()[k], y.data()[k]);
                }
                out
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (t(a), t(b));
                if ta.is_none() && tb.is_none() {
                    return None;
                }
                let (x, z) = (self.value(*a), self.value(*b));
                let broadcast = z.is_scalar() && x.shape() != z.shape();
                let idx = |k: usize| if broadcast { 0 } else { k };
                let mut out = zeros();
                for (k, o) in out.data_mut().iter_mut().enumerate() {
                    let da = ta.map_or(0.0, |v| v.data()[k]);
                    let db = tb.map_or(0.0, |v| v.data()[idx(k)]);
                    let (xv, zv) = (x.data()[k], z.data()[idx(k)]);
                    *o = match kind {
                        Binary::Add => da + db,
                        Binary::Sub => da - db,
                        Binary::Mul => da * zv + xv * db,
                        Binary::Div => da / zv - xv * db / (zv * zv),
                    };
                }
                out
            }
            Op::Atan2(yv, xv) => {
                let (ty, tx) = (t(yv), t(xv));
                if ty.is_none() && tx.is_none() {
                    return None;
                }
                let (vy, vx) = (self.value(*yv), self.value(*xv));
                let mut out = zeros();
                for (k, o) in out.data_mut().iter_mut().enumerate() {
                    let (b, a) = (vy.data()[k], vx.data()[k]);
                    let r2 = a * a + b * b;
                    if r2 > 0.0 {
                        let db = ty.map_or(0.0, |v| v.data()[k]);
                        let da = tx.map_or(0.0, |v| v.data()[k]);
                        *o = RAD_TO_DEG * (a * db - b * da) / r2;
                    }
                }
                out
            }
            Op::Conv(a, kernel) => {
                let (h, w) = (y.shape()[0], y.shape()[1]);
                Tensor::new(y.shape(), spatial::correlate(t(a)?.data(), h, w, kernel)).ok()?
            }
            Op::Subsample { src, rows, cols } => {
                let ts = t(src)?;
                let w = self.shape(*src)[1];
                let data = rows
                    .iter()
                    .flat_map(|&r| cols.iter().map(move |&c| ts.data()[r * w + c]))
                    .collect();
                Tensor::new(y.shape(), data).ok()?
            }
            Op::Resize(a) => {
                let (h, w) = (self.shape(*a)[0], self.shape(*a)[1]);
                let data = spatial::resize(t(a)?.data(), h, w, y.shape()[0], y.shape()[1]);
                Tensor::new(y.shape(), data).ok()?
            }
            Op::Warp { src, pose } => {
                let (ts, tp) = (t(src), t(pose));
                if ts.is_none() && tp.is_none() {
                    return None;
                }
                let img = self.value(*src);
                let (h, w) = (img.shape()[0], img.shape()[1]);
                let samples = spatial::warp_samples(pose4(self.value(*pose)), (h, w), (y.shape()[0], y.shape()[1]));
                let mut out = zeros();
                for (k, s) in samples.iter().enumerate() {
                    let mut acc = 0.0;
                    if let Some(ts) = ts {
                        acc += spatial::sample(ts.data(), h, w, s).0;
                    }
                    if let Some(tp) = tp {
                        let (_, ddx, ddy) = spatial::sample(img.data(), h, w, s);
                        for p in 0..4 {
                            acc += tp.data()[p] * (ddx * s.dsx[p] + ddy * s.dsy[p]);
                        }
                    }
                    out.data_mut()[k] = acc;
                }
                out
            }
            Op::Sum(a) => Tensor::scalar(t(a)?.data().iter().sum()),
            Op::Dot(a, b) => {
                let (ta, tb) = (t(a), t(b));
                if ta.is_none() && tb.is_none() {
                    return None;
                }
                let s = ta.map_or(0.0, |v| v.dot(self.value(*b))) + tb.map_or(0.0, |v| v.dot(self.value(*a)));
                Tensor::scalar(s)
            }
            Op::L2Norm(a) => {
                let ta = t(a)?;
                let n = y.item();
                Tensor::scalar(if n > 0.0 { ta.dot(self.value(*a)) / n } else { 0.0 })
            }
            Op::Channel { src, channel } => {
                let ts = t(src)?;
                let c = self.shape(*src)[2];
                let data = (0..y.len()).map(|p| ts.data()[p * c + channel]).collect();
                Tensor::new(y.shape(), data).ok()?
            }
            Op::Stack(parts) => {
                if parts.iter().all(|p| t(p).is_none()) {
                    return None;
                }
                let n = parts.len();
                let mut out = zeros();
                for (b, p) in parts.iter().enumerate() {
                    if let Some(tp) = t(p) {
                        for (i, &v) in tp.data().iter().enumerate() {
                            out.data_mut()[i * n + b] = v;
                        }
                    }
                }
                out
            }
        };
        Some(out)
    }

    /// Hash of the piecewise region every non-smooth primitive is operating
    /// in (clip side, abs and square sign, wrap period, atan2 branch, bilinear cell).
    /// Two evaluations of the same graph builder with equal signatures lie on
    /// the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Unary(kind, a) => {
                    let x = self.value(*a).data();
                    match *kind {
                        Unary::Abs => x.iter().for_each(|v| sign_code(*v).hash(&mut hasher)),
                        Unary::Clip { min, max } => x.iter().for_each(|&v| {
                            let code: u8 = if v < min {
                                0
                            } else if v == min {
                                1
                            } else if v < max {
                                2
                            } else if v == max {
                                3
                            } else {
                                4
                            };
                            code.hash(&mut hasher)
                        }),
                        Unary::Wrap { period } => x.iter().for_each(|v| ((v / period).floor() as i64).hash(&mut hasher)),
                        Unary::Sqrt => x.iter().for_each(|v| (*v == 0.0).hash(&mut hasher)),
                        // Squares feed the smoothed |·| of magnitudes and
                        // differences, which bends sharply at 0.
                        Unary::Pow2 => x.iter().for_each(|v| sign_code(*v).hash(&mut hasher)),
                        _ => {}
                    }
                }
                Op::Atan2(yv, xv) => {
                    for (b, a) in self.value(*yv).data().iter().zip(self.value(*xv).data()) {
                        // The branch cut lies on the negative x axis.
                        let code: u8 = if *a == 0.0 && *b == 0.0 {
                            0
                        } else if *a < 0.0 {
                            1 + sign_code(*b)
                        } else {
                            5
                        };
                        code.hash(&mut hasher);
                    }
                }
                Op::Warp { src, pose } => {
                    let (h, w) = (self.shape(*src)[0], self.shape(*src)[1]);
                    let y = &node.value;
                    for s in spatial::warp_samples(pose4(self.value(*pose)), (h, w), (y.shape()[0], y.shape()[1])) {
                        (s.y0, s.x0).hash(&mut hasher);
                    }
                }
                Op::L2Norm(_) => (node.value.item() == 0.0).hash(&mut hasher),
                _ => {}
            }
        }
        hasher.finish()
    }
}

fn accumulate<'g>(grads: &'g mut [Option<Tensor>], nodes: &[Node], v: Var) -> &'g mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()))
}

fn add_into(t: &mut Tensor, d: &[f64]) {
    for (a, b) in t.data_mut().iter_mut().zip(d) {
        *a += b;
    }
}

fn pose4(t: &Tensor) -> [f64; 4] {
    let d = t.data();
    [d[0], d[1], d[2], d[3]]
}

fn sign_code(v: f64) -> u8 {
    if v > 0.0 {
        2
    } else if v < 0.0 {
        0
    } else {
        1
    }
}

pub(crate) fn wrap(v: f64, period: f64) -> f64 {
    let r = v.rem_euclid(period);
    // rem_euclid can round up to `period` for tiny negative inputs.
    if r >= period {
        0.0
    } else {
        r
    }
}

/// `atan2` in degrees with the origin mapped to 0.
pub fn atan2_deg(y: f64, x: f64) -> f64 {
    if x == 0.0 && y == 0.0 {
        0.0
    } else {
        let d = y.atan2(x) * RAD_TO_DEG;
        // atan2(-0, x<0) is -180; keep the range half-open at -180.
        if d == -180.0 {
            180.0
        } else {
            d
        }
    }
}

fn unary_derivative(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Pow2 => 2.0 * x,
        Unary::Sqrt => {
            if y > 0.0 {
                0.5 / y
            } else {
                0.0
            }
        }
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Clip { min, max } => {
            if x > min && x < max {
                1.0
            } else {
                0.0
            }
        }
        Unary::Wrap { .. } => 1.0,
        Unary::Affine { scale, .. } => scale,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_input(tape: &mut Tape, v: &[f64]) -> Var {
        tape.input(Tensor::from_vec(v.to_vec()))
    }

    #[test]
    fn add_elementwise() {
        let mut t = Tape::new();
        let a = vec_input(&mut t, &[1.0, 2.0]);
        let b = vec_input(&mut t, &[3.0, 4.0]);
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn sqrt_adjoint() {
        let mut t = Tape::new();
        let a = vec_input(&mut t, &[4.0]);
        let s = t.sqrt(a).unwrap();
        let total = t.sum(s).unwrap();
        t.backward(total).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[0.25]);
    }

    #[test]
    fn clip_values_and_adjoints() {
        let mut t = Tape::new();
        let a = vec_input(&mut t, &[-0.5, 0.3, 2.0]);
        let c = t.clip(a, 0.0, 1.0).unwrap();
        assert_eq!(t.value(c).data(), &[0.0, 0.3, 1.0]);
        let s = t.sum(c).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn clip_boundary_adjoint_is_zero() {
        let mut t = Tape::new();
        let a = vec_input(&mut t, &[0.0, 1.0]);
        let c = t.clip(a, 0.0, 1.0).unwrap();
        let s = t.sum(c).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn binary_shape_mismatch() {
        let mut t = Tape::new();
        let a = vec_input(&mut t, &[1.0, 2.0]);
        let b = vec_input(&mut t, &[1.0, 2.0, 3.0]);
        assert!(matches!(t.add(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn div_by_zero_is_an_error() {
        let mut t = Tape::new();
        let a = vec_input(&mut t, &[1.0, 2.0]);
        let b = vec_input(&mut t, &[1.0, 0.0]);
        assert!(matches!(t.div(a, b), Err(Error::DivisionByZero { index: 1 })));
    }

    #[test]
    fn scalar_broadcast_adjoint_sums() {
        let mut t = Tape::new();
        let a = vec_input(&mut t, &[1.0, 2.0, 3.0]);
        let s = t.scalar(2.0);
        let m = t.mul(a, s).unwrap();
        let total = t.sum(m).unwrap();
        t.backward(total).unwrap();
        assert_eq!(t.grad(s).unwrap().item(), 6.0);
        assert_eq!(t.grad(a).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn atan2_axes_and_origin() {
        let mut t = Tape::new();
        let y = vec_input(&mut t, &[0.0, 1.0, 0.0, 0.0]);
        let x = vec_input(&mut t, &[2.0, 0.0, 0.0, -1.0]);
        let a = t.atan2(y, x).unwrap();
        assert_eq!(t.value(a).data(), &[0.0, 90.0, 0.0, 180.0]);
        let s = t.sum(a).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(y).unwrap().data()[2], 0.0);
        assert_eq!(t.grad(x).unwrap().data()[2], 0.0);
    }

    #[test]
    fn atan2_diagonal_adjoints() {
        let mut t = Tape::new();
        let y = vec_input(&mut t, &[1.0]);
        let x = vec_input(&mut t, &[1.0]);
        let a = t.atan2(y, x).unwrap();
        assert!((t.value(a).item() - 45.0).abs() < 1e-12);
        let s = t.sum(a).unwrap();
        t.backward(s).unwrap();
        let k = 180.0 / PI;
        assert!((t.grad(y).unwrap().item() - 0.5 * k).abs() < 1e-12);
        assert!((t.grad(x).unwrap().item() + 0.5 * k).abs() < 1e-12);
        // central differences
        let h = 1e-6;
        let fd = (atan2_deg(1.0 + h, 1.0) - atan2_deg(1.0 - h, 1.0)) / (2.0 * h);
        assert!((fd - 0.5 * k).abs() / (0.5 * k) < 1e-8);
    }

    #[test]
    fn conv_identity_and_impulse() {
        let mut t = Tape::new();
        let ones = t.input(Tensor::full(&[8, 8], 1.0));
        let id = Kernel::new(1, 1, vec![1.0]).unwrap();
        let c = t.conv2d_same(ones, &id).unwrap();
        assert_eq!(t.value(c), &Tensor::full(&[8, 8], 1.0));

        let mut img = Tensor::zeros(&[5, 5]);
        img.data_mut()[2 * 5 + 2] = 1.0;
        let a = t.input(img);
        let k = Kernel::new(1, 3, vec![-1.0, 0.0, 1.0]).unwrap();
        let c = t.conv2d_same(a, &k).unwrap();
        let v = t.value(c);
        assert_eq!(v.at2(2, 1), 1.0);
        assert_eq!(v.at2(2, 3), -1.0);
        assert_eq!(v.data().iter().filter(|x| **x != 0.0).count(), 2);
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut t = Tape::new();
        let a = t.input(Tensor::zeros(&[2, 2]));
        let k = Kernel::new(5, 1, vec![1.0; 5]).unwrap();
        assert!(matches!(t.conv2d_same(a, &k), Err(Error::KernelTooLarge { .. })));
    }

    #[test]
    fn subsample_gather_and_scatter() {
        let mut t = Tape::new();
        let mut img = Tensor::zeros(&[4, 4]);
        img.data_mut()[5] = 7.0;
        let a = t.input(img.clone());
        let g = t.subsample(a, &[1], &[1]).unwrap();
        assert_eq!(t.value(g).data(), &[7.0]);
        let all = t.subsample(a, &[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap();
        assert_eq!(t.value(all), &img);
        let s = t.sum(g).unwrap();
        t.backward(s).unwrap();
        let grad = t.grad(a).unwrap();
        assert_eq!(grad.data()[5], 1.0);
        assert_eq!(grad.data().iter().sum::<f64>(), 1.0);
        assert!(matches!(
            t.subsample(a, &[4], &[0]),
            Err(Error::IndexOutOfRange { index: 4, extent: 4 })
        ));
    }

    #[test]
    fn resize_examples() {
        let mut t = Tape::new();
        let a = t.input(Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
        let r = t.resize_bilinear(a, 2, 4).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
        let same = t.resize_bilinear(a, 2, 2).unwrap();
        assert_eq!(t.value(same), t.value(a));
        let c = t.input(Tensor::full(&[3, 5], 0.4));
        let big = t.resize_bilinear(c, 7, 2).unwrap();
        assert!(t.value(big).data().iter().all(|v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn warp_identity_and_integer_shift() {
        let mut t = Tape::new();
        let img: Vec<f64> = (0..36).map(|i| i as f64).collect();
        let a = t.input(Tensor::new(&[6, 6], img).unwrap());
        let id = t.input(Tensor::from_vec(vec![0.0, 0.0, 0.0, 0.0]));
        let w = t.warp_bilinear(a, id, 6, 6).unwrap();
        assert_eq!(t.value(w), t.value(a));

        let mut imp = Tensor::zeros(&[5, 5]);
        imp.data_mut()[2 * 5 + 2] = 1.0;
        let b = t.input(imp);
        let shift = t.input(Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0]));
        let w = t.warp_bilinear(b, shift, 5, 5).unwrap();
        assert_eq!(t.value(w).at2(2, 3), 1.0);
        assert_eq!(t.value(w).data().iter().sum::<f64>(), 1.0);

        let full = t.input(Tensor::from_vec(vec![0.0, 0.0, 360.0, 0.0]));
        let w360 = t.warp_bilinear(a, full, 6, 6).unwrap();
        assert_eq!(t.value(w360), t.value(a));
    }

    #[test]
    fn reductions() {
        let mut t = Tape::new();
        let a = vec_input(&mut t, &[1.0, 2.0, 3.0]);
        let s = t.sum(a).unwrap();
        assert_eq!(t.value(s).item(), 6.0);
        let v = vec_input(&mut t, &[0.6, 0.8]);
        let d = t.dot(v, v).unwrap();
        assert!((t.value(d).item() - 1.0).abs() < 1e-15);
        assert!(matches!(t.dot(a, v), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn l2norm_zero_vector_has_zero_adjoint() {
        let mut t = Tape::new();
        let a = vec_input(&mut t, &[0.0, 0.0]);
        let n = t.l2norm(a).unwrap();
        t.backward(n).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_seed_examples() {
        let mut t = Tape::new();
        let x = t.input(Tensor::new(&[2, 3], vec![0.5; 6]).unwrap());
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &Tensor::full(&[2, 3], 1.0));

        let c = t.input(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let d = t.dot(x, c).unwrap();
        t.backward(d).unwrap();
        assert_eq!(t.grad(x).unwrap(), t.value(c));
        assert!(matches!(t.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn repeated_backward_rezeroes() {
        let mut t = Tape::new();
        let x = vec_input(&mut t, &[1.0, 2.0]);
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn nonfinite_is_rejected() {
        let mut t = Tape::new();
        let x = vec_input(&mut t, &[-1.0]);
        assert!(matches!(t.sqrt(x), Err(Error::NonFinite { op: "sqrt" })));
    }

    #[test]
    fn stack_and_channel_roundtrip() {
        let mut t = Tape::new();
        let a = t.input(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let b = t.input(Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap());
        let s = t.stack(&[a, b]).unwrap();
        assert_eq!(t.value(s).shape(), &[1, 2, 2]);
        assert_eq!(t.value(s).data(), &[1.0, 3.0, 2.0, 4.0]);
        let c = t.channel(s, 1).unwrap();
        assert_eq!(t.value(c), t.value(b));
    }

    #[test]
    fn jvp_matches_vjp() {
        // <J v, u> == <v, J^T u> on a small composite graph.
        let build = |t: &mut Tape, x: Var| -> Var {
            let k = Kernel::new(2, 2, vec![0.5, -1.0, 0.25, 2.0]).unwrap();
            let c = t.conv2d_same(x, &k).unwrap();
            let sq = t.pow2(c).unwrap();
            let e = t.add_scalar(sq, 1.0).unwrap();
            let r = t.sqrt(e).unwrap();
            let ang = t.atan2(r, c).unwrap();
            t.resize_bilinear(ang, 3, 5).unwrap()
        };
        let mut t = Tape::new();
        let x0: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin()).collect();
        let x = t.input(Tensor::new(&[4, 4], x0).unwrap());
        let out = build(&mut t, x);
        let v = Tensor::new(&[4, 4], (0..16).map(|i| (i as f64 * 1.3).cos()).collect()).unwrap();
        let u = Tensor::new(&[3, 5], (0..15).map(|i| (i as f64 * 0.4).sin()).collect()).unwrap();
        let tan = t.jvp(&[(x, &v)]).unwrap();
        let jv = tan[out.index()].as_ref().unwrap().dot(&u);
        t.vjp(&[(out, u)]).unwrap();
        let jtu = t.grad(x).unwrap().dot(&v);
        assert!((jv - jtu).abs() < 1e-10 * jv.abs().max(1.0));
    }
}

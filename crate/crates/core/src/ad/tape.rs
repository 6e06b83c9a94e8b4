//! Append-only reverse-mode tape over batched 2-D tensors.
//!
//! Every node holds its forward value; `backward` walks the nodes once in
//! reverse creation order, which is a valid reverse topological order because
//! inputs are always created before their consumers.

use std::str::FromStr;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use super::AdError;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise functions with known derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Sin,
    Cos,
    Exp,
    Log,
    Relu,
    Softplus,
    Sigmoid,
    Abs,
    /// Derivative taken as zero at the origin.
    Sqrt,
    Square,
    /// `sin θ / θ` as a function of `s = θ²`.
    ExpCoeffA,
    /// `(1 − cos θ) / θ²` as a function of `s = θ²`.
    ExpCoeffB,
    /// `(θ − sin θ) / θ³` as a function of `s = θ²`.
    ExpCoeffC,
}

/// Named primitives accepted by [`Tape::apply`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    MatMul,
    Sum,
    Mean,
    Norm,
    Unary(UnaryOp),
}

impl FromStr for Primitive {
    type Err = AdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "matmul" => Primitive::MatMul,
            "sum" => Primitive::Sum,
            "mean" => Primitive::Mean,
            "norm" => Primitive::Norm,
            "sin" => Primitive::Unary(UnaryOp::Sin),
            "cos" => Primitive::Unary(UnaryOp::Cos),
            "exp" => Primitive::Unary(UnaryOp::Exp),
            "log" => Primitive::Unary(UnaryOp::Log),
            "relu" => Primitive::Unary(UnaryOp::Relu),
            "softplus" => Primitive::Unary(UnaryOp::Softplus),
            "sigmoid" => Primitive::Unary(UnaryOp::Sigmoid),
            "abs" => Primitive::Unary(UnaryOp::Abs),
            "sqrt" => Primitive::Unary(UnaryOp::Sqrt),
            "square" => Primitive::Unary(UnaryOp::Square),
            other => return Err(AdError::UnsupportedPrimitive(other.to_string())),
        })
    }
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Unary(Var, UnaryOp),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowNorm(Var),
    Cross(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Bilerp {
        plane: Var,
        coords: Var,
        res: usize,
    },
    Composite {
        sigma: Var,
        rgb: Var,
        deltas: Vec<f64>,
        samples: usize,
        background: [f64; 3],
    },
}

struct Node {
    op: Op,
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Which rows/cols of an operand broadcast against the output.
fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize, what: &str| -> usize {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast {a:?} with {b:?} along {what}")
        }
    };
    (dim(a.0, b.0, "rows"), dim(a.1, b.1, "cols"))
}

#[inline]
fn bidx(t: &Tensor, r: usize, c: usize) -> usize {
    let rr = if t.rows() == 1 { 0 } else { r };
    let cc = if t.cols() == 1 { 0 } else { c };
    rr * t.cols() + cc
}

fn binary_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::from_vec(a.rows(), a.cols(), data);
    }
    let (rows, cols) = broadcast_shape(a.shape(), b.shape());
    let mut out = Tensor::zeros(rows, cols);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for r in 0..rows {
        for c in 0..cols {
            od[r * cols + c] = f(ad[bidx(a, r, c)], bd[bidx(b, r, c)]);
        }
    }
    out
}

/// Adds `g` (output-shaped) into `acc` (operand-shaped), summing over
/// broadcast dimensions.
fn reduce_into(acc: &mut Tensor, g: &Tensor, scale: impl Fn(usize, usize, f64) -> f64) {
    let (rows, cols) = g.shape();
    if acc.shape() == g.shape() {
        let gd = g.data();
        for (i, a) in acc.data_mut().iter_mut().enumerate() {
            *a += scale(i / cols, i % cols, gd[i]);
        }
        return;
    }
    for r in 0..rows {
        for c in 0..cols {
            let i = bidx(acc, r, c);
            acc.data_mut()[i] += scale(r, c, g.get(r, c));
        }
    }
}

// Power series Σₖ (−s)ᵏ / (2k + m)! and its derivative in s.
fn coeff_series(s: f64, m: u32) -> (f64, f64) {
    let mut fact = 1.0;
    for i in 2..=m {
        fact *= i as f64;
    }
    let mut term = 1.0 / fact; // (−s)^k / (2k+m)!
    let mut value = term;
    let mut deriv = 0.0;
    let mut k = 0u32;
    while k < 12 {
        let n = 2 * k + m;
        let next = term * (-s) / (((n + 1) * (n + 2)) as f64);
        k += 1;
        value += next;
        // d/ds of (−s)^k / (2k+m)! = k·(−1)^k s^{k−1} / (2k+m)!
        if s != 0.0 {
            deriv += next * k as f64 / s;
        } else if k == 1 {
            deriv += -1.0 / (((n + 1) * (n + 2)) as f64) / fact;
        }
        term = next;
    }
    (value, deriv)
}

fn exp_coeff(op: UnaryOp, s: f64) -> (f64, f64) {
    let m = match op {
        UnaryOp::ExpCoeffA => 1,
        UnaryOp::ExpCoeffB => 2,
        _ => 3,
    };
    if s < 0.25 {
        return coeff_series(s.max(0.0), m);
    }
    let th = s.sqrt();
    let (sn, cs) = th.sin_cos();
    match m {
        1 => (sn / th, (th * cs - sn) / (2.0 * th * s)),
        2 => ((1.0 - cs) / s, (0.5 * th * sn - (1.0 - cs)) / (s * s)),
        _ => (
            (th - sn) / (s * th),
            ((1.0 - cs) * th - 3.0 * (th - sn)) / (2.0 * s * s * th),
        ),
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl UnaryOp {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            UnaryOp::Sin => x.sin(),
            UnaryOp::Cos => x.cos(),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Softplus => softplus(x),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Abs => x.abs(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Square => x * x,
            UnaryOp::ExpCoeffA | UnaryOp::ExpCoeffB | UnaryOp::ExpCoeffC => exp_coeff(self, x).0,
        }
    }

    /// Derivative given the input `x` and the output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Sin => x.cos(),
            UnaryOp::Cos => -x.sin(),
            UnaryOp::Exp => y,
            UnaryOp::Log => 1.0 / x,
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Softplus => sigmoid(x),
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            UnaryOp::Square => 2.0 * x,
            UnaryOp::ExpCoeffA | UnaryOp::ExpCoeffB | UnaryOp::ExpCoeffC => exp_coeff(self, x).1,
        }
    }
}

#[inline]
fn bilerp_setup(u: f64, res: usize) -> (usize, f64, bool) {
    let inside = (0.0..=1.0).contains(&u);
    let x = u.clamp(0.0, 1.0) * (res - 1) as f64;
    let i0 = (x.floor() as usize).min(res - 2);
    (i0, x - i0 as f64, inside)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Const, value)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = binary_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = binary_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    /// Element-wise product with broadcasting of unit rows/cols.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = binary_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(Op::Scale(a, k), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(Op::Offset(a), v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn unary(&mut self, a: Var, op: UnaryOp) -> Var {
        let v = self.value(a).map(|x| op.eval(x));
        self.push(Op::Unary(a, op), v)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, UnaryOp::Sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, UnaryOp::Cos)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, UnaryOp::Exp)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, UnaryOp::Relu)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, UnaryOp::Abs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(Op::Mean(a), v)
    }

    /// Sum across columns: N×C → N×1.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::from_vec(
            t.rows(),
            1,
            (0..t.rows()).map(|r| t.row(r).iter().sum()).collect(),
        );
        self.push(Op::RowSum(a), v)
    }

    /// Euclidean norm of each row: N×C → N×1. The gradient at a zero row is zero.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::from_vec(
            t.rows(),
            1,
            (0..t.rows())
                .map(|r| t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect(),
        );
        self.push(Op::RowNorm(a), v)
    }

    /// Row-wise dot product: N×C, N×C → N×1.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let m = self.mul(a, b);
        self.row_sum(m)
    }

    /// Row-wise cross product of N×3 operands.
    pub fn cross(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(
            ta.cols() == 3 && tb.cols() == 3 && ta.rows() == tb.rows(),
            "cross needs matching N×3 operands"
        );
        let mut out = Tensor::zeros(ta.rows(), 3);
        for r in 0..ta.rows() {
            let (x, y) = (ta.row(r), tb.row(r));
            out.row_mut(r).copy_from_slice(&cross3(x, y));
        }
        self.push(Op::Cross(a, b), out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
            }
            off += t.cols();
        }
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(t.rows(), len);
        for r in 0..t.rows() {
            out.row_mut(r)
                .copy_from_slice(&t.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols(a, start), out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols.max(1);
        self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::from_vec(rows, cols, data),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.rows(), "slice_rows out of range");
        let c = t.cols();
        let out = Tensor::from_vec(len, c, t.data()[start * c..(start + len) * c].to_vec());
        self.push(Op::SliceRows(a, start), out)
    }

    /// Bilinear lookup into a `res × res` plane stored as `res²` rows of
    /// features (row index `j * res + i`, `i` along the first coordinate).
    /// Coordinates outside `[0, 1]` clamp to the border texel.
    pub fn bilerp(&mut self, plane: Var, coords: Var, res: usize) -> Var {
        assert!(res >= 2, "plane resolution must be at least 2");
        let (tp, tc) = (self.value(plane), self.value(coords));
        assert_eq!(tp.rows(), res * res, "plane rows must equal res²");
        assert_eq!(tc.cols(), 2, "bilerp coordinates must be N×2");
        let f = tp.cols();
        let mut out = Tensor::zeros(tc.rows(), f);
        for r in 0..tc.rows() {
            let (i0, fx, _) = bilerp_setup(tc.get(r, 0), res);
            let (j0, fy, _) = bilerp_setup(tc.get(r, 1), res);
            let w = [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ];
            let idx = [
                j0 * res + i0,
                j0 * res + i0 + 1,
                (j0 + 1) * res + i0,
                (j0 + 1) * res + i0 + 1,
            ];
            let row = out.row_mut(r);
            for k in 0..4 {
                let src = tp.row(idx[k]);
                for (o, s) in row.iter_mut().zip(src) {
                    *o += w[k] * s;
                }
            }
        }
        self.push(Op::Bilerp { plane, coords, res }, out)
    }

    /// Emission-absorption compositing of `samples` consecutive rows per ray.
    /// `sigma` is (rays·samples)×1, `rgb` is (rays·samples)×3; output rays×3.
    pub fn composite(
        &mut self,
        sigma: Var,
        rgb: Var,
        deltas: Vec<f64>,
        samples: usize,
        background: [f64; 3],
    ) -> Var {
        let (ts, tc) = (self.value(sigma), self.value(rgb));
        let n = ts.rows();
        assert!(
            samples > 0 && n % samples == 0,
            "sample count must divide rows"
        );
        assert_eq!(ts.cols(), 1);
        assert_eq!(tc.shape(), (n, 3));
        assert_eq!(deltas.len(), n);
        let rays = n / samples;
        let mut out = Tensor::zeros(rays, 3);
        for ray in 0..rays {
            let mut trans = 1.0;
            let mut acc = [0.0; 3];
            for s in 0..samples {
                let i = ray * samples + s;
                let alpha = 1.0 - (-ts.get(i, 0) * deltas[i]).exp();
                let w = trans * alpha;
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += w * tc.get(i, c);
                }
                trans *= 1.0 - alpha;
            }
            for c in 0..3 {
                out.set(ray, c, acc[c] + trans * background[c]);
            }
        }
        self.push(
            Op::Composite {
                sigma,
                rgb,
                deltas,
                samples,
                background,
            },
            out,
        )
    }

    /// Builds a node from a primitive name; unknown names are rejected.
    pub fn apply(&mut self, name: &str, inputs: &[Var]) -> Result<Var, AdError> {
        let prim: Primitive = name.parse()?;
        let want = match prim {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::MatMul => 2,
            _ => 1,
        };
        if inputs.len() != want {
            return Err(AdError::Arity {
                primitive: name.to_string(),
                expected: want,
                found: inputs.len(),
            });
        }
        Ok(match prim {
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Sub => self.sub(inputs[0], inputs[1]),
            Primitive::Mul => self.mul(inputs[0], inputs[1]),
            Primitive::MatMul => self.matmul(inputs[0], inputs[1]),
            Primitive::Sum => self.sum(inputs[0]),
            Primitive::Mean => self.mean(inputs[0]),
            Primitive::Norm => self.row_norm(inputs[0]),
            Primitive::Unary(op) => self.unary(inputs[0], op),
        })
    }

    /// Reverse pass from a 1×1 output.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar output");
        self.backward_with(loss, Tensor::scalar(1.0))
    }

    /// Reverse pass from `out` with upstream gradient `seed`.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.shape(out));
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed);
        let mut result = Gradients::with_len(self.params.len());

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(id) => {
                    let shape = g.shape();
                    result.accumulate(*id, shape, |slot| slot.add_assign(&g));
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, |t| reduce_into(t, &g, |_, _, x| x));
                    self.acc(&mut grads, *b, |t| reduce_into(t, &g, |_, _, x| x));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, |t| reduce_into(t, &g, |_, _, x| x));
                    self.acc(&mut grads, *b, |t| reduce_into(t, &g, |_, _, x| -x));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, *a, |t| {
                        reduce_into(t, &g, |r, c, x| x * tb.data()[bidx(tb, r, c)])
                    });
                    self.acc(&mut grads, *b, |t| {
                        reduce_into(t, &g, |r, c, x| x * ta.data()[bidx(ta, r, c)])
                    });
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    self.acc(&mut grads, *a, |t| reduce_into(t, &g, |_, _, x| x * k));
                }
                Op::Offset(a) => {
                    self.acc(&mut grads, *a, |t| reduce_into(t, &g, |_, _, x| x));
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    // dA = G · Bᵀ ; dB = Aᵀ · G
                    self.acc(&mut grads, *a, |t| {
                        gemm(
                            m,
                            n,
                            k,
                            (g.data(), n as isize, 1),
                            (tb.data(), 1, n as isize),
                            t.data_mut(),
                        )
                    });
                    self.acc(&mut grads, *b, |t| {
                        gemm(
                            k,
                            m,
                            n,
                            (ta.data(), 1, k as isize),
                            (g.data(), n as isize, 1),
                            t.data_mut(),
                        )
                    });
                }
                Op::Unary(a, op) => {
                    let x = self.value(*a);
                    let y = self.value(Var(i));
                    let op = *op;
                    self.acc(&mut grads, *a, |t| {
                        for (((acc, &gx), &xv), &yv) in t
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .zip(x.data())
                            .zip(y.data())
                        {
                            *acc += gx * op.deriv(xv, yv);
                        }
                    });
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    self.acc(&mut grads, *a, |t| {
                        t.data_mut().iter_mut().for_each(|x| *x += gv)
                    });
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len() as f64;
                    let gv = g.item() / n;
                    self.acc(&mut grads, *a, |t| {
                        t.data_mut().iter_mut().for_each(|x| *x += gv)
                    });
                }
                Op::RowSum(a) => {
                    self.acc(&mut grads, *a, |t| {
                        let cols = t.cols();
                        for (idx, x) in t.data_mut().iter_mut().enumerate() {
                            *x += g.data()[idx / cols];
                        }
                    });
                }
                Op::RowNorm(a) => {
                    let x = self.value(*a);
                    let y = self.value(Var(i));
                    self.acc(&mut grads, *a, |t| {
                        let cols = t.cols();
                        for (idx, acc) in t.data_mut().iter_mut().enumerate() {
                            let r = idx / cols;
                            let n = y.data()[r];
                            if n > 0.0 {
                                *acc += g.data()[r] * x.data()[idx] / n;
                            }
                        }
                    });
                }
                Op::Cross(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    // (a×b)·g = a·(b×g) = b·(g×a)
                    self.acc(&mut grads, *a, |t| {
                        for r in 0..g.rows() {
                            let c = cross3(tb.row(r), g.row(r));
                            t.row_mut(r).iter_mut().zip(c).for_each(|(x, y)| *x += y);
                        }
                    });
                    self.acc(&mut grads, *b, |t| {
                        for r in 0..g.rows() {
                            let c = cross3(g.row(r), ta.row(r));
                            t.row_mut(r).iter_mut().zip(c).for_each(|(x, y)| *x += y);
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        self.acc(&mut grads, p, |t| {
                            for r in 0..t.rows() {
                                t.row_mut(r)
                                    .iter_mut()
                                    .zip(&g.row(r)[off..off + w])
                                    .for_each(|(x, y)| *x += y);
                            }
                        });
                        off += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let start = *start;
                    self.acc(&mut grads, *a, |t| {
                        for r in 0..t.rows() {
                            t.row_mut(r)[start..start + g.cols()]
                                .iter_mut()
                                .zip(g.row(r))
                                .for_each(|(x, y)| *x += y);
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        self.acc(&mut grads, p, |t| {
                            t.data_mut()
                                .iter_mut()
                                .zip(&g.data()[off..off + len])
                                .for_each(|(x, y)| *x += y);
                        });
                        off += len;
                    }
                }
                Op::SliceRows(a, start) => {
                    let off = *start * g.cols();
                    self.acc(&mut grads, *a, |t| {
                        t.data_mut()[off..off + g.len()]
                            .iter_mut()
                            .zip(g.data())
                            .for_each(|(x, y)| *x += y);
                    });
                }
                Op::Bilerp { plane, coords, res } => {
                    self.bilerp_backward(&mut grads, *plane, *coords, *res, &g);
                }
                Op::Composite {
                    sigma,
                    rgb,
                    deltas,
                    samples,
                    background,
                } => {
                    self.composite_backward(
                        &mut grads, *sigma, *rgb, deltas, *samples, background, &g,
                    );
                }
            }
        }
        result
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        let slot = grads[v.0].get_or_insert_with(|| {
            let (r, c) = self.shape(v);
            Tensor::zeros(r, c)
        });
        f(slot);
    }

    fn bilerp_backward(
        &self,
        grads: &mut [Option<Tensor>],
        plane: Var,
        coords: Var,
        res: usize,
        g: &Tensor,
    ) {
        let tc = self.value(coords);
        let tp = self.value(plane);
        let scale = (res - 1) as f64;
        self.acc(grads, plane, |t| {
            for r in 0..tc.rows() {
                let (i0, fx, _) = bilerp_setup(tc.get(r, 0), res);
                let (j0, fy, _) = bilerp_setup(tc.get(r, 1), res);
                let w = [
                    (1.0 - fx) * (1.0 - fy),
                    fx * (1.0 - fy),
                    (1.0 - fx) * fy,
                    fx * fy,
                ];
                let idx = [
                    j0 * res + i0,
                    j0 * res + i0 + 1,
                    (j0 + 1) * res + i0,
                    (j0 + 1) * res + i0 + 1,
                ];
                let gr = g.row(r);
                for k in 0..4 {
                    for (x, y) in t.row_mut(idx[k]).iter_mut().zip(gr) {
                        *x += w[k] * y;
                    }
                }
            }
        });
        self.acc(grads, coords, |t| {
            for r in 0..tc.rows() {
                let (i0, fx, in_x) = bilerp_setup(tc.get(r, 0), res);
                let (j0, fy, in_y) = bilerp_setup(tc.get(r, 1), res);
                let f00 = tp.row(j0 * res + i0);
                let f10 = tp.row(j0 * res + i0 + 1);
                let f01 = tp.row((j0 + 1) * res + i0);
                let f11 = tp.row((j0 + 1) * res + i0 + 1);
                let gr = g.row(r);
                let (mut du, mut dv) = (0.0, 0.0);
                for c in 0..gr.len() {
                    du += gr[c] * ((1.0 - fy) * (f10[c] - f00[c]) + fy * (f11[c] - f01[c]));
                    dv += gr[c] * ((1.0 - fx) * (f01[c] - f00[c]) + fx * (f11[c] - f10[c]));
                }
                if in_x {
                    t.data_mut()[2 * r] += du * scale;
                }
                if in_y {
                    t.data_mut()[2 * r + 1] += dv * scale;
                }
            }
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn composite_backward(
        &self,
        grads: &mut [Option<Tensor>],
        sigma: Var,
        rgb: Var,
        deltas: &[f64],
        samples: usize,
        background: &[f64; 3],
        g: &Tensor,
    ) {
        let ts = self.value(sigma);
        let tc = self.value(rgb);
        let rays = g.rows();
        let mut d_sigma = vec![0.0; ts.rows()];
        let mut d_rgb = vec![0.0; ts.rows() * 3];
        let mut trans = vec![0.0; samples + 1];
        let mut weights = vec![0.0; samples];
        for ray in 0..rays {
            let base = ray * samples;
            let gr = g.row(ray);
            trans[0] = 1.0;
            for s in 0..samples {
                let i = base + s;
                let keep = (-ts.get(i, 0) * deltas[i]).exp();
                weights[s] = trans[s] * (1.0 - keep);
                trans[s + 1] = trans[s] * keep;
            }
            // ∂C/∂τᵢ = T_{i+1}·cᵢ − Σ_{j>i} w_j c_j − T_end·bg, with τᵢ = σᵢδᵢ.
            let mut tail = [0.0; 3];
            for c in 0..3 {
                tail[c] = trans[samples] * background[c];
            }
            for s in (0..samples).rev() {
                let i = base + s;
                let mut d_tau = 0.0;
                for c in 0..3 {
                    let ci = tc.get(i, c);
                    d_tau += gr[c] * (trans[s + 1] * ci - tail[c]);
                    d_rgb[i * 3 + c] = gr[c] * weights[s];
                }
                d_sigma[i] = d_tau * deltas[i];
                for c in 0..3 {
                    tail[c] += weights[s] * tc.get(i, c);
                }
            }
        }
        self.acc(grads, sigma, |t| {
            t.data_mut()
                .iter_mut()
                .zip(&d_sigma)
                .for_each(|(x, y)| *x += y)
        });
        self.acc(grads, rgb, |t| {
            t.data_mut()
                .iter_mut()
                .zip(&d_rgb)
                .for_each(|(x, y)| *x += y)
        });
    }
}

#[inline]
fn cross3(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::ParamGroup;

    #[test]
    fn exp_coefficients_are_continuous_at_the_switch() {
        for op in [UnaryOp::ExpCoeffA, UnaryOp::ExpCoeffB, UnaryOp::ExpCoeffC] {
            let (lo, dlo) = exp_coeff(op, 0.25 - 1e-12);
            let (hi, dhi) = exp_coeff(op, 0.25 + 1e-12);
            assert!((lo - hi).abs() < 1e-12, "{op:?}");
            assert!((dlo - dhi).abs() < 1e-11, "{op:?} {dlo} {dhi}");
        }
        assert_eq!(exp_coeff(UnaryOp::ExpCoeffA, 0.0), (1.0, -1.0 / 6.0));
        assert_eq!(exp_coeff(UnaryOp::ExpCoeffB, 0.0).0, 0.5);
        assert!((exp_coeff(UnaryOp::ExpCoeffC, 0.0).1 + 1.0 / 120.0).abs() < 1e-18);
    }

    #[test]
    fn exp_coefficient_derivatives_match_differences() {
        for op in [UnaryOp::ExpCoeffA, UnaryOp::ExpCoeffB, UnaryOp::ExpCoeffC] {
            for &s in &[1e-3, 0.1, 0.3, 1.0, 4.0, 9.0] {
                let h = 1e-6;
                let fd = (exp_coeff(op, s + h).0 - exp_coeff(op, s - h).0) / (2.0 * h);
                let an = exp_coeff(op, s).1;
                assert!((fd - an).abs() < 1e-8, "{op:?} at {s}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn unknown_primitive_is_rejected() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.scalar(1.0);
        assert!(matches!(
            tape.apply("tanh", &[x]),
            Err(AdError::UnsupportedPrimitive(_))
        ));
        assert!(matches!(
            tape.apply("add", &[x]),
            Err(AdError::Arity { .. })
        ));
        assert!(tape.apply("sin", &[x]).is_ok());
    }

    #[test]
    fn broadcast_mul_reduces_gradient() {
        let mut store = ParamStore::new();
        let w = store
            .add("w", ParamGroup::Motion, Tensor::from_rows(&[[2.0, 3.0]]))
            .unwrap();
        let tape_store = store.clone();
        let mut tape = Tape::new(&tape_store);
        let x = tape.constant(Tensor::from_rows(&[[1.0, 1.0], [4.0, 5.0]]));
        let wv = tape.param(w);
        let y = tape.mul(x, wv);
        let s = tape.sum(y);
        assert_eq!(tape.value(s).item(), 2.0 + 3.0 + 8.0 + 15.0);
        let g = tape.backward(s);
        assert_eq!(g.get(w).unwrap(), &Tensor::from_rows(&[[5.0, 6.0]]));
    }
}

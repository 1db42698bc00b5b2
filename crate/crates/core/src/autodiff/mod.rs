//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation appends a node holding its forward value. `Tape::backward`
//! walks the nodes in reverse and accumulates gradients for every node that
//! depends on a leaf created with [`Tape::leaf`]. Domain-specific kernels
//! (warping, Gaussian fields, losses) plug in through [`CustomOp`].

mod conv;
mod tensor;

pub use conv::ConvGeometry;
pub use tensor::Tensor;

use conv::{conv2d_backward, conv2d_forward};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable kernel whose forward value is computed by the caller.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input; `None` for inputs that do not
    /// need one (the tape skips them).
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Index(Var, usize),
    Stack(Vec<Var>),
    Channels(Var, usize),
    Concat(Vec<Var>),
    SpatialSoftmax(Var),
    SpatialSum(Var),
    MatVec(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

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

    /// Trainable input: gradients flow back to it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.shape(),
            vb.shape(),
            "elementwise op on mismatched shapes"
        );
        let value = va.zip_map(vb, f);
        let rg = self.any_grad(&[a, b]);
        self.push(value, op, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.any_grad(&[a]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::Offset(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Scalar element `i` of a tensor.
    pub fn index(&mut self, a: Var, i: usize) -> Var {
        let value = Tensor::scalar(self.value(a).data()[i]);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Index(a, i), rg)
    }

    /// Vector built from scalar nodes.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        let data = parts.iter().map(|&p| self.value(p).item()).collect();
        let rg = self.any_grad(parts);
        self.push(Tensor::vector(data), Op::Stack(parts.to_vec()), rg)
    }

    /// Channels `start..start+len` of a `[C,H,W]` map.
    pub fn channels(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (c, h, w) = self.value(a).chw();
        assert!(start + len <= c, "channel slice out of range");
        let data = self.value(a).data()[start * h * w..(start + len) * h * w].to_vec();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(&[len, h, w], data), Op::Channels(a, start), rg)
    }

    /// Concatenation of `[C_i,H,W]` maps along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let (_, h, w) = self.value(parts[0]).chw();
        let mut data = Vec::new();
        let mut channels = 0;
        for &p in parts {
            let (c, ph, pw) = self.value(p).chw();
            assert_eq!((ph, pw), (h, w), "concat spatial mismatch");
            channels += c;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.any_grad(parts);
        self.push(
            Tensor::new(&[channels, h, w], data),
            Op::Concat(parts.to_vec()),
            rg,
        )
    }

    /// Softmax over all spatial positions, independently per channel.
    pub fn spatial_softmax(&mut self, a: Var) -> Var {
        let value = spatial_softmax(self.value(a));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SpatialSoftmax(a), rg)
    }

    /// `[C,H,W] -> [C]` sum over spatial positions.
    pub fn spatial_sum(&mut self, a: Var) -> Var {
        let (_, h, w) = self.value(a).chw();
        let data = self
            .value(a)
            .data()
            .chunks_exact(h * w)
            .map(|p| p.iter().sum())
            .collect();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::vector(data), Op::SpatialSum(a), rg)
    }

    /// `[O,I] x [I] -> [O]`.
    pub fn matvec(&mut self, m: Var, x: Var) -> Var {
        let (mv, xv) = (self.value(m), self.value(x));
        let (o, i) = (mv.shape()[0], mv.shape()[1]);
        assert_eq!(xv.len(), i, "matvec inner dimension");
        let data = mv
            .data()
            .chunks_exact(i)
            .map(|row| row.iter().zip(xv.data()).map(|(a, b)| a * b).sum())
            .collect::<Vec<f64>>();
        debug_assert_eq!(data.len(), o);
        let rg = self.any_grad(&[m, x]);
        self.push(Tensor::vector(data), Op::MatVec(m, x), rg)
    }

    /// Zero-padded convolution. `weight` is `[O,C,K,K]`, `bias` is `[O]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let (c, h, w) = self.value(input).chw();
        let ws = self.value(weight).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [O,C,K,K]");
        assert_eq!(ws[1], c, "conv input channels: weight expects {}, got {c}", ws[1]);
        let geometry = ConvGeometry {
            in_channels: c,
            height: h,
            width: w,
            out_channels: ws[0],
            kernel: ws[2],
            stride,
            pad,
        };
        let out = conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &geometry,
        );
        let value = Tensor::new(
            &[ws[0], geometry.out_height(), geometry.out_width()],
            out,
        );
        let rg = self.any_grad(&[input, weight, bias]);
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            },
            rg,
        )
    }

    /// Records a custom kernel whose forward value was already computed.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.any_grad(inputs);
        self.push(value, Op::Custom(inputs.to_vec(), op), rg)
    }

    /// Gradients of the scalar `root` with respect to every leaf.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        grads[root.0] = Some(Tensor::new(self.value(root).shape(), vec![1.0]));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            // only leaf gradients are kept
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |gi, bi| gi * bi));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |gi, ai| gi * ai));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |gi, bi| gi / bi));
                }
                if self.needs(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = out.zip_map(bv, |q, bi| -q / bi);
                    self.accumulate(grads, *b, g.zip_map(&t, |gi, ti| gi * ti));
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.map(|x| k * x)),
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::Tanh(a) => {
                self.accumulate(grads, *a, g.zip_map(out, |gi, y| gi * (1.0 - y * y)))
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, g.zip_map(out, |gi, y| gi * y * (1.0 - y)))
            }
            Op::Abs(a) => {
                let t = g.zip_map(self.value(*a), |gi, x| {
                    if x > 0.0 {
                        gi
                    } else if x < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, t)
            }
            Op::ClampMin(a, floor) => {
                let t = g.zip_map(self.value(*a), |gi, x| if x > *floor { gi } else { 0.0 });
                self.accumulate(grads, *a, t)
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()))
            }
            Op::Index(a, i) => {
                let mut t = Tensor::zeros(self.value(*a).shape());
                t.data_mut()[*i] = g.item();
                self.accumulate(grads, *a, t)
            }
            Op::Stack(parts) => {
                for (p, &gi) in parts.iter().zip(g.data()) {
                    let shape = self.value(*p).shape().to_vec();
                    self.accumulate(grads, *p, Tensor::new(&shape, vec![gi]));
                }
            }
            Op::Channels(a, start) => {
                let av = self.value(*a);
                let (_, h, w) = av.chw();
                let mut t = Tensor::zeros(av.shape());
                let len = g.len();
                t.data_mut()[start * h * w..start * h * w + len].copy_from_slice(g.data());
                self.accumulate(grads, *a, t)
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(*p).shape().to_vec();
                    let n = self.value(*p).len();
                    if self.needs(*p) {
                        let t = Tensor::new(&shape, g.data()[offset..offset + n].to_vec());
                        self.accumulate(grads, *p, t);
                    }
                    offset += n;
                }
            }
            Op::SpatialSoftmax(a) => {
                let (_, h, w) = out.chw();
                let mut t = Tensor::zeros(out.shape());
                for ((dst, p), gp) in t
                    .data_mut()
                    .chunks_exact_mut(h * w)
                    .zip(out.data().chunks_exact(h * w))
                    .zip(g.data().chunks_exact(h * w))
                {
                    let dot: f64 = p.iter().zip(gp).map(|(a, b)| a * b).sum();
                    for ((d, &pi), &gi) in dst.iter_mut().zip(p).zip(gp) {
                        *d = pi * (gi - dot);
                    }
                }
                self.accumulate(grads, *a, t)
            }
            Op::SpatialSum(a) => {
                let av = self.value(*a);
                let (_, h, w) = av.chw();
                let mut t = Tensor::zeros(av.shape());
                for (plane, &gi) in t.data_mut().chunks_exact_mut(h * w).zip(g.data()) {
                    plane.fill(gi);
                }
                self.accumulate(grads, *a, t)
            }
            Op::MatVec(m, x) => {
                let (mv, xv) = (self.value(*m), self.value(*x));
                let i = xv.len();
                if self.needs(*m) {
                    let mut t = Tensor::zeros(mv.shape());
                    for (row, &gi) in t.data_mut().chunks_exact_mut(i).zip(g.data()) {
                        for (r, &xj) in row.iter_mut().zip(xv.data()) {
                            *r = gi * xj;
                        }
                    }
                    self.accumulate(grads, *m, t);
                }
                if self.needs(*x) {
                    let mut t = vec![0.0; i];
                    for (row, &gi) in mv.data().chunks_exact(i).zip(g.data()) {
                        for (tj, &r) in t.iter_mut().zip(row) {
                            *tj += gi * r;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::vector(t));
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let need = [self.needs(*input), self.needs(*weight), self.needs(*bias)];
                let cg = conv2d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g.data(),
                    geometry,
                    need,
                );
                if let Some(d) = cg.input {
                    let shape = self.value(*input).shape().to_vec();
                    self.accumulate(grads, *input, Tensor::new(&shape, d));
                }
                if let Some(d) = cg.weight {
                    let shape = self.value(*weight).shape().to_vec();
                    self.accumulate(grads, *weight, Tensor::new(&shape, d));
                }
                if let Some(d) = cg.bias {
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(&shape, d));
                }
            }
            Op::Custom(inputs, op) => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.needs(*v)).collect();
                let out_grads = op.backward(&values, out, g, &needs);
                debug_assert_eq!(out_grads.len(), inputs.len(), "{} grads", op.name());
                for (v, dg) in inputs.iter().zip(out_grads) {
                    if let Some(dg) = dg {
                        self.accumulate(grads, *v, dg);
                    }
                }
            }
        }
    }
}

/// Logistic function, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-channel softmax over the spatial positions of a `[C,H,W]` map.
pub fn spatial_softmax(logits: &Tensor) -> Tensor {
    let (_, h, w) = logits.chw();
    let mut out = logits.clone();
    for plane in out.data_mut().chunks_exact_mut(h * w) {
        let max = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in plane.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in plane.iter_mut() {
            *x /= total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.clone();
                xp.data_mut()[i] += eps;
                let mut xm = x.clone();
                xm.data_mut()[i] -= eps;
                (f(&xp) - f(&xm)) / (2.0 * eps)
            })
            .collect()
    }

    fn build(tape: &mut Tape, x: Var) -> Var {
        // tanh/sigmoid/softmax/matvec/stack chain ending in a scalar
        let t = tape.tanh(x);
        let s = tape.sigmoid(x);
        let m = tape.mul(t, s);
        let sm = tape.spatial_softmax(m);
        let pooled = tape.spatial_sum(sm);
        let q = tape.mul(sm, m);
        let qs = tape.spatial_sum(q);
        let ratio = tape.div(qs, pooled);
        let a = tape.index(ratio, 0);
        let b = tape.index(ratio, 1);
        let st = tape.stack(&[a, b, a]);
        let w = tape.constant(Tensor::new(&[2, 3], vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4]));
        let mv = tape.matvec(w, st);
        let ab = tape.abs(mv);
        let total = tape.sum(ab);
        tape.scale(total, 1.5)
    }

    #[test]
    fn composite_gradient_matches_central_differences() {
        let x0 = Tensor::new(
            &[2, 2, 3],
            vec![0.1, -0.3, 0.7, 0.2, 0.9, -1.1, 0.4, 0.05, -0.6, 1.3, -0.2, 0.8],
        );
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = build(&mut tape, x);
        let grads = tape.backward(y);
        let analytic = grads.get(x).unwrap().data().to_vec();
        let f = |t: &Tensor| {
            let mut tp = Tape::new();
            let v = tp.leaf(t.clone());
            let out = build(&mut tp, v);
            tp.value(out).item()
        };
        let numeric = numeric_grad(&f, &x0, 1e-6);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-7, "{a} vs {n}");
        }
    }

    #[test]
    fn conv_and_channel_ops_gradient() {
        let build = |tape: &mut Tape, x: Var, w: Var, b: Var| {
            let y = tape.conv2d(x, w, b, 2, 1);
            let c0 = tape.channels(y, 1, 1);
            let cat = tape.concat(&[y, c0]);
            let sq = tape.mul(cat, cat);
            tape.sum(sq)
        };
        let xv = Tensor::new(&[1, 4, 4], (0..16).map(|i| (i as f64 * 0.37).sin()).collect());
        let wv = Tensor::new(&[2, 1, 3, 3], (0..18).map(|i| (i as f64 * 0.61).cos() * 0.3).collect());
        let bv = Tensor::vector(vec![0.1, -0.2]);
        let mut tape = Tape::new();
        let (x, w, b) = (tape.leaf(xv.clone()), tape.leaf(wv.clone()), tape.leaf(bv.clone()));
        let y = build(&mut tape, x, w, b);
        let grads = tape.backward(y);
        let fw = |t: &Tensor| {
            let mut tp = Tape::new();
            let (x, w, b) = (tp.leaf(xv.clone()), tp.leaf(t.clone()), tp.leaf(bv.clone()));
            let y = build(&mut tp, x, w, b);
            tp.value(y).item()
        };
        let fx = |t: &Tensor| {
            let mut tp = Tape::new();
            let (x, w, b) = (tp.leaf(t.clone()), tp.leaf(wv.clone()), tp.leaf(bv.clone()));
            let y = build(&mut tp, x, w, b);
            tp.value(y).item()
        };
        for (a, n) in grads.get(w).unwrap().data().iter().zip(numeric_grad(&fw, &wv, 1e-6)) {
            assert!((a - n).abs() < 1e-6, "weight {a} vs {n}");
        }
        for (a, n) in grads.get(x).unwrap().data().iter().zip(numeric_grad(&fx, &xv, 1e-6)) {
            assert!((a - n).abs() < 1e-6, "input {a} vs {n}");
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(c, x);
        let g = tape.backward(y);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}

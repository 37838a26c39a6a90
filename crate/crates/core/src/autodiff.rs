//! Reverse-mode automatic differentiation on a recording tape.
//!
//! Every backward rule is expressed with tape ops, so the gradients returned
//! by [`Tape::grad`] are ordinary nodes that can be differentiated again.
//! Template generation relies on this: the shallow-feature gradient feeds the
//! update sub-net, and training differentiates through it.
//!
//! Values are single-sample `f64` arrays. Convolution inputs are `[C, H, W]`,
//! weights `[O, C, kh, kw]`.

use std::rc::Rc;

use ndarray::{ArrayD, Axis, Ix3, Ix4, IxDyn};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Rc<ArrayD<f64>>),
    Reshape(Var),
    Sum(Var),
    BroadcastScalar(Var),
    ChannelSum(Var),
    BroadcastChannels(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    Sigmoid(Var),
    Softplus(Var),
    Powf(Var, f64),
    Conv(Var, Var, ConvGeom),
    ConvInputGrad(Var, Var, ConvGeom),
    ConvWeightGrad(Var, Var, ConvGeom),
    Gather(Var, Rc<Vec<usize>>),
    ScatterAdd(Var, Rc<Vec<usize>>),
}

#[derive(Debug)]
struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. Nodes are appended in evaluation order, which is also a
/// topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
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

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that gradients can be taken with respect to.
    pub fn var(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Constant copy of `v`: same value, no history.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let value = &self.nodes[v.0].value;
        debug_assert_eq!(value.len(), 1);
        value.iter().next().copied().unwrap_or(f64::NAN)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Which side of its kink every ReLU and clamp input sits on, in
    /// recording order. Two evaluations with equal patterns lie in the same
    /// smooth piece of the function.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) => out.extend(self.nodes[x.0].value.iter().map(|v| *v > 0.0)),
                Op::Clamp(x, lo, hi) => {
                    for v in self.nodes[x.0].value.iter() {
                        out.push(*v > lo);
                        out.push(*v < hi);
                    }
                }
                _ => {}
            }
        }
        out
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[a.0].value.mapv(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddConst(a))
    }

    pub fn mul_const(&mut self, a: Var, m: Rc<ArrayD<f64>>) -> Result<Var> {
        if self.shape(a) != m.shape() {
            return Err(Error::shape("mul_const", m.shape(), self.shape(a)));
        }
        let value = &self.nodes[a.0].value * m.as_ref();
        let rg = self.rg(a);
        Ok(self.push(value, Op::MulConst(a, m), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        if src.len() != shape.iter().product::<usize>() {
            return Err(Error::shape("reshape", shape, src.shape()));
        }
        let value = src
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("element count checked");
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    fn reshape_to(&mut self, a: Var, shape: Vec<usize>) -> Var {
        self.reshape(a, &shape).expect("backward reshape preserves size")
    }

    /// Sum of all elements, as a 0-d value.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let rg = self.rg(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::Sum(a), rg)
    }

    /// Broadcast a single-element value to `shape`.
    pub fn broadcast_scalar(&mut self, a: Var, shape: &[usize]) -> Var {
        let s = self.scalar(a);
        let rg = self.rg(a);
        self.push(ArrayD::from_elem(IxDyn(shape), s), Op::BroadcastScalar(a), rg)
    }

    /// Per-channel sum of a `[C, H, W]` value, giving `[C]`.
    pub fn channel_sum(&mut self, a: Var) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        if src.ndim() != 3 {
            return Err(Error::shape("channel_sum", &[0, 0, 0], src.shape()));
        }
        let value = src.sum_axis(Axis(2)).sum_axis(Axis(1));
        let rg = self.rg(a);
        Ok(self.push(value, Op::ChannelSum(a), rg))
    }

    /// Broadcast a `[C]` value over `[C, h, w]`.
    pub fn broadcast_channels(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        if src.ndim() != 1 {
            return Err(Error::shape("broadcast_channels", &[0], src.shape()));
        }
        let c = src.len();
        let value = ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |ix| src[[ix[0]]]);
        let rg = self.rg(a);
        Ok(self.push(value, Op::BroadcastChannels(a), rg))
    }

    /// `[C, H, W] + [C]` with the bias broadcast over space.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || self.shape(bias) != [shape[0]] {
            return Err(Error::shape("add_bias", &[shape.first().copied().unwrap_or(0)], self.shape(bias)));
        }
        let b = self.broadcast_channels(bias, shape[1], shape[2])?;
        self.add(x, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Elementwise power. Intended for strictly positive inputs.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), Op::Powf(a, p))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || xs[0] != ws[1] {
            return Err(Error::shape("conv2d input channels", &ws, &xs));
        }
        if geom.out_len(xs[1], ws[2]).is_none() || geom.out_len(xs[2], ws[3]).is_none() {
            return Err(Error::shape("conv2d kernel exceeds input", &ws[2..], &xs[1..]));
        }
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().expect("3-d");
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().expect("4-d");
        let value = kernels::conv2d(xv, wv, geom).into_dyn();
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::Conv(x, w, geom), rg))
    }

    fn conv_input_grad(&mut self, g: Var, w: Var, geom: ConvGeom, input: &[usize]) -> Var {
        let gv = self.nodes[g.0].value.view().into_dimensionality::<Ix3>().expect("3-d");
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().expect("4-d");
        let value = kernels::conv2d_input_grad(gv, wv, geom, (input[0], input[1], input[2])).into_dyn();
        let rg = self.rg(g) || self.rg(w);
        self.push(value, Op::ConvInputGrad(g, w, geom), rg)
    }

    fn conv_weight_grad(&mut self, x: Var, g: Var, geom: ConvGeom, kernel: (usize, usize)) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().expect("3-d");
        let gv = self.nodes[g.0].value.view().into_dimensionality::<Ix3>().expect("3-d");
        let value = kernels::conv2d_weight_grad(xv, gv, geom, kernel).into_dyn();
        let rg = self.rg(x) || self.rg(g);
        self.push(value, Op::ConvWeightGrad(x, g, geom), rg)
    }

    /// `out[i] = a.flat[idx[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, idx: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        if idx.len() != shape.iter().product::<usize>() || idx.iter().any(|&i| i >= src.len()) {
            return Err(Error::InvalidArgument("gather indices do not match shapes".into()));
        }
        let src = src.as_standard_layout();
        let flat = src.as_slice().expect("standard layout");
        let data: Vec<f64> = idx.iter().map(|&i| flat[i]).collect();
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).expect("size checked");
        let rg = self.rg(a);
        Ok(self.push(value, Op::Gather(a, idx), rg))
    }

    fn scatter_add(&mut self, a: Var, idx: Rc<Vec<usize>>, shape: &[usize]) -> Var {
        let src = self.nodes[a.0].value.as_standard_layout();
        let flat = src.as_slice().expect("standard layout");
        let mut value = ArrayD::<f64>::zeros(IxDyn(shape));
        {
            let out = value.as_slice_mut().expect("fresh array");
            for (k, &i) in idx.iter().enumerate() {
                out[i] += flat[k];
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::ScatterAdd(a, idx), rg)
    }

    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let geom = ConvGeom::new(stride, 0);
        if xs.len() != 3 || geom.out_len(xs[1], kernel).is_none() || geom.out_len(xs[2], kernel).is_none() {
            return Err(Error::shape("max_pool kernel exceeds input", &[kernel, kernel], &xs));
        }
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().expect("3-d");
        let (idx, (c, h, w)) = kernels::max_pool_indices(xv, kernel, stride);
        self.gather(x, Rc::new(idx), &[c, h, w])
    }

    fn mask(&self, a: Var, keep: impl Fn(f64) -> bool) -> Rc<ArrayD<f64>> {
        Rc::new(self.nodes[a.0].value.mapv(|x| if keep(x) { 1.0 } else { 0.0 }))
    }

    /// Gradients of the single-element `output` with respect to `wrt`.
    ///
    /// The returned vars live on this tape and carry their own history, so
    /// they can be differentiated again. Inputs with no path to `output`
    /// receive an all-zero constant.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::shape("grad output", &[1], self.shape(output)));
        }
        let n = output.0 + 1;
        let mut depends = vec![false; n];
        for &v in wrt {
            if v.0 < n {
                depends[v.0] = true;
            }
        }
        for i in 0..n {
            if depends[i] || !self.nodes[i].requires_grad {
                continue;
            }
            depends[i] = self.inputs(i).iter().any(|v| depends[v.0]);
        }

        let mut adj: Vec<Option<Var>> = vec![None; n];
        let seed_shape = self.shape(output).to_vec();
        adj[output.0] = Some(self.constant(ArrayD::from_elem(IxDyn(&seed_shape), 1.0)));

        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            if !depends[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (input, contribution) in self.backward(Var(i), &op, g, &depends) {
                adj[input.0] = Some(match adj[input.0] {
                    None => contribution,
                    Some(prev) => self.add(prev, contribution)?,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|&v| match adj.get(v.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.shape(v).to_vec();
                    self.constant(ArrayD::zeros(IxDyn(&shape)))
                }
            })
            .collect())
    }

    fn inputs(&self, i: usize) -> Vec<Var> {
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Conv(a, b, _) | Op::ConvInputGrad(a, b, _) | Op::ConvWeightGrad(a, b, _) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::MulConst(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::BroadcastScalar(a)
            | Op::ChannelSum(a)
            | Op::BroadcastChannels(a)
            | Op::Relu(a)
            | Op::Clamp(a, _, _)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Powf(a, _)
            | Op::Gather(a, _)
            | Op::ScatterAdd(a, _) => vec![*a],
        }
    }

    fn backward(&mut self, node: Var, op: &Op, g: Var, depends: &[bool]) -> Vec<(Var, Var)> {
        let live = |v: &Var| depends[v.0];
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if live(a) {
                    out.push((*a, g));
                }
                if live(b) {
                    out.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if live(a) {
                    out.push((*a, g));
                }
                if live(b) {
                    let neg = self.scale(g, -1.0);
                    out.push((*b, neg));
                }
            }
            Op::Mul(a, b) => {
                if live(a) {
                    let d = self.mul(g, *b).expect("same shape");
                    out.push((*a, d));
                }
                if live(b) {
                    let d = self.mul(g, *a).expect("same shape");
                    out.push((*b, d));
                }
            }
            Op::Scale(a, c) => {
                let d = self.scale(g, *c);
                out.push((*a, d));
            }
            Op::AddConst(a) => out.push((*a, g)),
            Op::MulConst(a, m) => {
                let d = self.mul_const(g, m.clone()).expect("same shape");
                out.push((*a, d));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                let d = self.reshape_to(g, shape);
                out.push((*a, d));
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                let d = self.broadcast_scalar(g, &shape);
                out.push((*a, d));
            }
            Op::BroadcastScalar(a) => {
                let s = self.sum(g);
                let shape = self.shape(*a).to_vec();
                let d = self.reshape_to(s, shape);
                out.push((*a, d));
            }
            Op::ChannelSum(a) => {
                let shape = self.shape(*a).to_vec();
                let d = self.broadcast_channels(g, shape[1], shape[2]).expect("1-d");
                out.push((*a, d));
            }
            Op::BroadcastChannels(a) => {
                let d = self.channel_sum(g).expect("3-d");
                out.push((*a, d));
            }
            Op::Relu(a) => {
                let m = self.mask(*a, |x| x > 0.0);
                let d = self.mul_const(g, m).expect("same shape");
                out.push((*a, d));
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let m = self.mask(*a, |x| x > lo && x < hi);
                let d = self.mul_const(g, m).expect("same shape");
                out.push((*a, d));
            }
            Op::Sigmoid(a) => {
                // s'(x) = s(x) s(-x)
                let neg = self.scale(*a, -1.0);
                let s_neg = self.sigmoid(neg);
                let ds = self.mul(node, s_neg).expect("same shape");
                let d = self.mul(g, ds).expect("same shape");
                out.push((*a, d));
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(*a);
                let d = self.mul(g, s).expect("same shape");
                out.push((*a, d));
            }
            Op::Powf(a, p) => {
                let pm1 = self.powf(*a, p - 1.0);
                let dp = self.scale(pm1, *p);
                let d = self.mul(g, dp).expect("same shape");
                out.push((*a, d));
            }
            Op::Conv(x, w, geom) => {
                if live(x) {
                    let shape = self.shape(*x).to_vec();
                    let d = self.conv_input_grad(g, *w, *geom, &shape);
                    out.push((*x, d));
                }
                if live(w) {
                    let ws = self.shape(*w).to_vec();
                    let d = self.conv_weight_grad(*x, g, *geom, (ws[2], ws[3]));
                    out.push((*w, d));
                }
            }
            Op::ConvInputGrad(gy, w, geom) => {
                // node = T(gy, w); <T(gy, w), g> = <gy, conv(g, w)> = <w, W(g, gy)>
                if live(gy) {
                    let d = self.conv2d(g, *w, *geom).expect("shapes recorded");
                    out.push((*gy, d));
                }
                if live(w) {
                    let ws = self.shape(*w).to_vec();
                    let d = self.conv_weight_grad(g, *gy, *geom, (ws[2], ws[3]));
                    out.push((*w, d));
                }
            }
            Op::ConvWeightGrad(x, gy, geom) => {
                // node = W(x, gy); <W(x, gy), g> = <conv(x, g), gy> = <x, T(gy, g)>
                if live(x) {
                    let shape = self.shape(*x).to_vec();
                    let d = self.conv_input_grad(*gy, g, *geom, &shape);
                    out.push((*x, d));
                }
                if live(gy) {
                    let d = self.conv2d(*x, g, *geom).expect("shapes recorded");
                    out.push((*gy, d));
                }
            }
            Op::Gather(a, idx) => {
                let shape = self.shape(*a).to_vec();
                let d = self.scatter_add(g, idx.clone(), &shape);
                out.push((*a, d));
            }
            Op::ScatterAdd(a, idx) => {
                let shape = self.shape(*a).to_vec();
                let d = self.gather(g, idx.clone(), &shape).expect("indices recorded");
                out.push((*a, d));
            }
        }
        out
    }
}

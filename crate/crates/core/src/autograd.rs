//! A small tape-based reverse-mode automatic differentiation engine.
//!
//! Every forward pass records its operations on a [`Graph`]. Parameters live
//! in a [`ParamStore`] outside the graph and enter it as leaves through
//! [`Graph::param`]; [`Graph::backward`] returns the gradient of a scalar
//! with respect to every parameter that contributed to it.

use std::collections::HashMap;

use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors, keyed by module path (e.g. `encoder.down0.conv.weight`).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name, which is always a
    /// model-construction bug.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Scalar parameter count of every tensor whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Gelu(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    GlobalAvgPool(Var),
    MulChannel(Var, Var),
    Concat(Vec<Var>),
    PixelShuffle(Var, usize),
    PowerNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    Mse(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    params: Vec<(ParamId, Tensor)>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Parameter gradients in ascending parameter order.
    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    /// Gradient with respect to an arbitrary node, if it was reached.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.nodes.get(var.0).and_then(Option::as_ref)
    }
}

/// A degenerate (all-zero) block was asked to be power-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DegenerateBlock {
    pub index: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A non-differentiable input (images, channel noise, SNR features).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that gradients are tracked for, without a backing parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Brings a parameter into the graph; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise op on mismatched shapes");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let v = self.value(a).map(|x| x + offset);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        let rg = self.rg(a);
        self.push(v, Op::Sqrt(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| gelu(x).0);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).reshape(shape);
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    /// 2-D convolution, `x: [N, C_in, H, W]`, `weight: [C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c_in, h, w) = self.value(x).dims4();
        let (c_out, wc, kh, kw) = self.value(weight).dims4();
        assert_eq!(wc, c_in, "conv2d: weight expects {wc} input channels, got {c_in}");
        let geom = ConvGeometry { c_in, h, w, kh, kw, stride, pad };
        let bias_vals = bias.map(|b| self.value(b).data().to_vec());
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(weight).data(),
            c_out,
            bias_vals.as_deref(),
        );
        let value = Tensor::from_vec(&[n, c_out, geom.out_h(), geom.out_w()], out);
        let rg = self.rg(x) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push(value, Op::Conv2d { x, weight, bias, geom }, rg)
    }

    /// Affine map `x · weightᵀ + bias`, `x: [N, In]`, `weight: [Out, In]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let (xs, ws) = (self.value(x).shape(), self.value(weight).shape());
        let (n, d_in, d_out) = (xs[0], xs[1], ws[0]);
        assert_eq!(ws[1], d_in, "linear: weight expects {} inputs, got {d_in}", ws[1]);
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(n * d_out);
        for _ in 0..n {
            out.extend_from_slice(b);
        }
        kernels::gemm(
            n,
            d_in,
            d_out,
            self.value(x).data(),
            (d_in, 1),
            self.value(weight).data(),
            (1, d_in),
            1.0,
            &mut out,
            (d_out, 1),
        );
        let rg = self.rg(x) || self.rg(weight) || self.rg(bias);
        self.push(Tensor::from_vec(&[n, d_out], out), Op::Linear { x, weight, bias }, rg)
    }

    /// Spatial mean, `[N, C, H, W] → [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = (h * w) as f64;
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().sum::<f64>() / hw)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, c], data), Op::GlobalAvgPool(x), rg)
    }

    /// Scales every channel plane of `x: [N, C, H, W]` by `gates: [N, C]`.
    pub fn mul_channel(&mut self, x: Var, gates: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.shape(gates), &[n, c], "mul_channel gate shape");
        let g = self.value(gates).data();
        let mut out = self.value(x).data().to_vec();
        for (plane, &gv) in out.chunks_mut(h * w).zip(g) {
            plane.iter_mut().for_each(|v| *v *= gv);
        }
        let rg = self.rg(x) || self.rg(gates);
        self.push(Tensor::from_vec(&[n, c, h, w], out), Op::MulChannel(x, gates), rg)
    }

    /// Concatenation along axis 1. All inputs share the batch size and every
    /// trailing dimension after axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let n = first[0];
        let tail: Vec<usize> = first[2..].to_vec();
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(s[0] == n && s[2..] == tail[..], "concat of incompatible shapes");
            width += s[1];
        }
        let inner: usize = tail.iter().product();
        let mut data = Vec::with_capacity(n * width * inner);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).item_slice(i));
            }
        }
        let mut shape = vec![n, width];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(&shape, data), Op::Concat(parts.to_vec()), rg)
    }

    /// `[N, C·r², H, W] → [N, C, H·r, W·r]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(c % (r * r), 0, "pixel_shuffle: {c} channels not divisible by {}", r * r);
        let out = kernels::pixel_shuffle(self.value(x).data(), n, c, h, w, r);
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(&[n, c / (r * r), h * r, w * r], out),
            Op::PixelShuffle(x, r),
            rg,
        )
    }

    /// Rescales each batch item, viewed as packed complex symbols
    /// `(re, im, re, im, …)`, to unit average symbol power.
    pub fn power_normalize(&mut self, x: Var) -> Result<Var, DegenerateBlock> {
        let t = self.value(x);
        let m = t.per_item();
        let symbols = m as f64 / 2.0;
        let mut norms = Vec::with_capacity(t.batch());
        let mut out = Vec::with_capacity(t.len());
        for i in 0..t.batch() {
            let item = t.item_slice(i);
            let norm = item.iter().map(|v| v * v).sum::<f64>().sqrt();
            // non-finite blocks pass through so the loss reports them
            if norm == 0.0 {
                return Err(DegenerateBlock { index: i });
            }
            let s = symbols.sqrt() / norm;
            out.extend(item.iter().map(|v| v * s));
            norms.push(norm);
        }
        let value = Tensor::from_vec(t.shape(), out);
        let rg = self.rg(x);
        Ok(self.push(value, Op::PowerNormalize { x, norms }, rg))
    }

    /// Mean squared error over every element, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mse on mismatched shapes");
        let n = ta.len() as f64;
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), rg)
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(gy);
                continue;
            }
            for (parent, g) in self.local_grads(&node.op, &node.value, &gy) {
                if !self.rg(parent) {
                    continue;
                }
                match grads[parent.0].as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => grads[parent.0] = Some(g),
                }
            }
            grads[idx] = Some(gy);
        }

        let mut params: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                (id, g)
            })
            .collect();
        params.sort_by_key(|(id, _)| *id);
        Gradients {
            params,
            nodes: grads,
        }
    }

    fn local_grads(&self, op: &Op, y: &Tensor, gy: &Tensor) -> Vec<(Var, Tensor)> {
        let elementwise = |v: Var, f: &dyn Fn(usize) -> f64| {
            let input = self.value(v);
            let data = (0..input.len()).map(f).collect();
            (v, Tensor::from_vec(input.shape(), data))
        };
        let g = gy.data();
        match op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, gy.clone()), (*b, gy.clone())],
            Op::Sub(a, b) => vec![(*a, gy.clone()), (*b, gy.map(|v| -v))],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    elementwise(*a, &|i| g[i] * vb[i]),
                    elementwise(*b, &|i| g[i] * va[i]),
                ]
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    elementwise(*a, &|i| g[i] / vb[i]),
                    elementwise(*b, &|i| -g[i] * va[i] / (vb[i] * vb[i])),
                ]
            }
            Op::Scale(a, f) => vec![(*a, gy.map(|v| v * f))],
            Op::AddScalar(a) => vec![(*a, gy.clone())],
            Op::Reshape(a) => vec![(*a, gy.reshape(self.value(*a).shape()))],
            Op::Square(a) => {
                let va = self.value(*a).data();
                vec![elementwise(*a, &|i| 2.0 * va[i] * g[i])]
            }
            Op::Sqrt(a) => {
                let vy = y.data();
                vec![elementwise(*a, &|i| g[i] * 0.5 / vy[i])]
            }
            Op::Sigmoid(a) => {
                let vy = y.data();
                vec![elementwise(*a, &|i| g[i] * vy[i] * (1.0 - vy[i]))]
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                vec![elementwise(*a, &|i| g[i] * gelu(va[i]).1)]
            }
            Op::Conv2d { x, weight, bias, geom } => {
                let n = self.value(*x).batch();
                let c_out = self.value(*weight).shape()[0];
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    n,
                    geom,
                    self.value(*weight).data(),
                    c_out,
                    g,
                    self.rg(*x),
                    self.rg(*weight),
                );
                let mut out = Vec::with_capacity(3);
                if let Some(dx) = dx {
                    out.push((*x, Tensor::from_vec(self.value(*x).shape(), dx)));
                }
                if let Some(dw) = dw {
                    out.push((*weight, Tensor::from_vec(self.value(*weight).shape(), dw)));
                }
                if let Some(b) = bias {
                    out.push((*b, Tensor::from_vec(&[c_out], db)));
                }
                out
            }
            Op::Linear { x, weight, bias } => {
                let xs = self.value(*x).shape();
                let (n, d_in) = (xs[0], xs[1]);
                let d_out = self.value(*weight).shape()[0];
                let mut dx = vec![0.0; n * d_in];
                kernels::gemm(
                    n,
                    d_out,
                    d_in,
                    g,
                    (d_out, 1),
                    self.value(*weight).data(),
                    (d_in, 1),
                    0.0,
                    &mut dx,
                    (d_in, 1),
                );
                let mut dw = vec![0.0; d_out * d_in];
                kernels::gemm(
                    d_out,
                    n,
                    d_in,
                    g,
                    (1, d_out),
                    self.value(*x).data(),
                    (d_in, 1),
                    0.0,
                    &mut dw,
                    (d_in, 1),
                );
                let mut db = vec![0.0; d_out];
                for row in g.chunks(d_out) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![
                    (*x, Tensor::from_vec(&[n, d_in], dx)),
                    (*weight, Tensor::from_vec(&[d_out, d_in], dw)),
                    (*bias, Tensor::from_vec(&[d_out], db)),
                ]
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let inv = 1.0 / hw as f64;
                vec![elementwise(*x, &|i| g[i / hw] * inv)]
            }
            Op::MulChannel(x, gates) => {
                let (_, _, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let vx = self.value(*x).data();
                let vg = self.value(*gates).data();
                let dx = elementwise(*x, &|i| g[i] * vg[i / hw]);
                let dg: Vec<f64> = g
                    .chunks(hw)
                    .zip(vx.chunks(hw))
                    .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                    .collect();
                vec![dx, (*gates, Tensor::from_vec(self.value(*gates).shape(), dg))]
            }
            Op::Concat(parts) => {
                let n = y.batch();
                let mut grads: Vec<Vec<f64>> = parts
                    .iter()
                    .map(|p| Vec::with_capacity(self.value(*p).len()))
                    .collect();
                let mut offset = 0;
                for _ in 0..n {
                    for (k, p) in parts.iter().enumerate() {
                        let m = self.value(*p).per_item();
                        grads[k].extend_from_slice(&g[offset..offset + m]);
                        offset += m;
                    }
                }
                parts
                    .iter()
                    .zip(grads)
                    .map(|(p, d)| (*p, Tensor::from_vec(self.value(*p).shape(), d)))
                    .collect()
            }
            Op::PixelShuffle(x, r) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let dx = kernels::pixel_unshuffle(g, n, c, h, w, *r);
                vec![(*x, Tensor::from_vec(&[n, c, h, w], dx))]
            }
            Op::PowerNormalize { x, norms } => {
                // y = s·x/‖x‖  ⇒  dx = (s/‖x‖)(g − x̂ (x̂·g)),  x̂ = x/‖x‖
                let vx = self.value(*x);
                let m = vx.per_item();
                let s = (m as f64 / 2.0).sqrt();
                let mut dx = Vec::with_capacity(vx.len());
                for (i, &norm) in norms.iter().enumerate() {
                    let xi = vx.item_slice(i);
                    let gi = &g[i * m..(i + 1) * m];
                    let dot: f64 = xi.iter().zip(gi).map(|(a, b)| a * b).sum::<f64>() / (norm * norm);
                    dx.extend(xi.iter().zip(gi).map(|(xv, gv)| s / norm * (gv - xv * dot)));
                }
                vec![(*x, Tensor::from_vec(vx.shape(), dx))]
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let scale = 2.0 * g[0] / va.len() as f64;
                vec![
                    elementwise(*a, &|i| scale * (va[i] - vb[i])),
                    elementwise(*b, &|i| -scale * (va[i] - vb[i])),
                ]
            }
        }
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

/// GELU value and derivative.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let value = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * A * x * x);
    (value, 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

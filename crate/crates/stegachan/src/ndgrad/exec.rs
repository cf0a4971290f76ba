//! Graph execution: forward evaluation and reverse-mode accumulation.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::graph::{same_pad_begin, Graph, Node, NodeRef, Op, Padding};
use super::kernels::{self, ConvDims, GridDims, SampleDims};
use super::tensor::Tensor;
use super::Scalar;
use crate::error::{Error, Result};

/// Named trainable tensors, shared between graphs that reference the same
/// parameter names. Iteration order is name order, so optimizer updates and
/// checkpoints are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<F>) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Runs one graph. Holds every node's value (and gradient, where needed) in
/// buffers preallocated from the build-time shapes, so repeated steps do not
/// allocate.
pub struct Executor<F: Scalar> {
    graph: Arc<Graph<F>>,
    values: Vec<Tensor<F>>,
    grads: Vec<Option<Tensor<F>>>,
    touched: Vec<bool>,
    needs_grad: Vec<bool>,
    aux_u8: Vec<Vec<u8>>,
    input_set: Vec<bool>,
    scratch: Vec<F>,
    check_finite: bool,
}

impl<F: Scalar> Executor<F> {
    pub fn new(graph: Arc<Graph<F>>) -> Self {
        let n = graph.nodes.len();
        let mut values = Vec::with_capacity(n);
        let mut input_set = vec![false; n];
        let mut aux_u8 = vec![Vec::new(); n];
        for (i, node) in graph.nodes.iter().enumerate() {
            let mut t = Tensor::zeros(&node.shape);
            match &node.op {
                Op::Const(c) => {
                    t = c.clone();
                    input_set[i] = true;
                }
                Op::MaxPool2x2 => {
                    aux_u8[i] = vec![0u8; node.shape.iter().product()];
                }
                _ => {}
            }
            values.push(t);
        }
        let mut ex = Executor {
            graph,
            values,
            grads: vec![None; n],
            touched: vec![false; n],
            needs_grad: vec![false; n],
            aux_u8,
            input_set,
            scratch: Vec::new(),
            check_finite: true,
        };
        ex.recompute_needs_grad(&[]);
        ex
    }

    /// After-forward finiteness verification (on by default); any NaN/Inf in
    /// any node output is a hard error naming the node.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Requests gradients for the named inputs in addition to all parameters.
    pub fn want_input_grads(&mut self, names: &[&str]) {
        let idxs: Vec<usize> = names
            .iter()
            .filter_map(|n| self.graph.inputs.get(*n).copied())
            .collect();
        self.recompute_needs_grad(&idxs);
    }

    fn recompute_needs_grad(&mut self, extra_inputs: &[usize]) {
        let g = Arc::clone(&self.graph);
        for (i, node) in g.nodes.iter().enumerate() {
            let mut need = matches!(node.op, Op::Param) || extra_inputs.contains(&i);
            if !need {
                need = node.inputs.iter().any(|&j| self.needs_grad[j]);
            }
            self.needs_grad[i] = need;
        }
    }

    pub fn graph(&self) -> &Arc<Graph<F>> {
        &self.graph
    }

    pub fn set_input(&mut self, name: &str, t: &Tensor<F>) -> Result<()> {
        let &idx = self
            .graph
            .inputs
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown input '{}'", name)))?;
        if self.values[idx].shape() != t.shape() {
            return Err(Error::Config(format!(
                "input '{}' expects shape {:?}, got {:?}",
                name,
                self.graph.nodes[idx].shape,
                t.shape()
            )));
        }
        self.values[idx].copy_from(t)?;
        self.input_set[idx] = true;
        Ok(())
    }

    /// Mutable access to an input buffer for in-place filling.
    pub fn input_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        let &idx = self
            .graph
            .inputs
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown input '{}'", name)))?;
        self.input_set[idx] = true;
        Ok(&mut self.values[idx])
    }

    pub fn value(&self, r: NodeRef) -> &Tensor<F> {
        &self.values[r.0]
    }

    /// Current contents of a named input buffer.
    pub fn input_value(&self, name: &str) -> Option<&Tensor<F>> {
        self.graph.inputs.get(name).map(|&i| &self.values[i])
    }

    pub fn grad(&self, r: NodeRef) -> Option<&Tensor<F>> {
        self.grads[r.0].as_ref()
    }

    pub fn input_grad(&self, name: &str) -> Option<&Tensor<F>> {
        self.graph
            .inputs
            .get(name)
            .and_then(|&i| self.grads[i].as_ref())
    }

    pub fn param_grad(&self, name: &str) -> Option<&Tensor<F>> {
        self.graph
            .params
            .get(name)
            .and_then(|&i| self.grads[i].as_ref())
    }

    /// Evaluates every node in topological order.
    pub fn forward(&mut self, params: &ParamStore<F>) -> Result<()> {
        for idx in 0..self.graph.nodes.len() {
            let node = &self.graph.nodes[idx];
            match &node.op {
                Op::Input => {
                    if !self.input_set[idx] {
                        return Err(Error::Config(format!(
                            "input '{}' was never set",
                            node.name.as_deref().unwrap_or("?")
                        )));
                    }
                }
                Op::Const(_) => {}
                Op::Param => {
                    let name = node.name.as_deref().unwrap_or("?");
                    let p = params.get(name).ok_or_else(|| {
                        Error::Config(format!("parameter '{}' missing from store", name))
                    })?;
                    if p.shape() != node.shape.as_slice() {
                        return Err(Error::Config(format!(
                            "parameter '{}' expects shape {:?}, got {:?}",
                            name,
                            node.shape,
                            p.shape()
                        )));
                    }
                    self.values[idx].copy_from(p)?;
                }
                _ => self.eval_node(idx)?,
            }
            if self.check_finite && !self.values[idx].is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite value in node {}",
                    self.graph.describe(idx)
                )));
            }
        }
        Ok(())
    }

    fn eval_node(&mut self, idx: usize) -> Result<()> {
        let (before, rest) = self.values.split_at_mut(idx);
        let node = &self.graph.nodes[idx];
        let out = &mut rest[0];
        let inp = |k: usize| -> &Tensor<F> { &before[node.inputs[k]] };
        match &node.op {
            Op::Input | Op::Param | Op::Const(_) => unreachable!(),
            Op::Conv2d { stride, padding } => {
                let d = conv_dims(node, &self.graph, *stride, *padding);
                kernels::conv2d_forward(inp(0).data(), inp(1).data(), out.data_mut(), d);
            }
            Op::DepthwiseConv2d => {
                let s = inp(0).shape();
                let k = inp(1).shape()[1];
                kernels::depthwise_forward(
                    inp(0).data(),
                    inp(1).data(),
                    out.data_mut(),
                    s[0],
                    s[1],
                    s[2],
                    s[3],
                    k,
                );
            }
            Op::Dense => {
                let (n, d) = (inp(0).shape()[0], inp(0).shape()[1]);
                let m = inp(1).shape()[1];
                kernels::dense_forward(
                    inp(0).data(),
                    inp(1).data(),
                    inp(2).data(),
                    out.data_mut(),
                    n,
                    d,
                    m,
                );
            }
            Op::BilinearSample => {
                let d = sample_dims(inp(0).shape(), inp(1).shape());
                kernels::bilinear_forward(inp(0).data(), inp(1).data(), out.data_mut(), d);
            }
            Op::AffineGrid {
                out_h,
                out_w,
                in_h,
                in_w,
            } => {
                let d = GridDims {
                    n: inp(0).shape()[0],
                    oh: *out_h,
                    ow: *out_w,
                    in_h: *in_h,
                    in_w: *in_w,
                };
                kernels::affine_grid_forward(inp(0).data(), out.data_mut(), d);
            }
            Op::Relu => {
                for (o, &v) in out.data_mut().iter_mut().zip(inp(0).data()) {
                    *o = v.max(F::zero());
                }
            }
            Op::Sigmoid => {
                for (o, &v) in out.data_mut().iter_mut().zip(inp(0).data()) {
                    *o = kernels::sigmoid(v);
                }
            }
            Op::UpsampleNearest2x => {
                let s = inp(0).shape();
                kernels::upsample2x_forward(inp(0).data(), out.data_mut(), s[0], s[1], s[2], s[3]);
            }
            Op::MaxPool2x2 => {
                let s = inp(0).shape().to_vec();
                let x = inp(0).data();
                kernels::maxpool2x2_forward(
                    x,
                    out.data_mut(),
                    &mut self.aux_u8[idx],
                    s[0],
                    s[1],
                    s[2],
                    s[3],
                );
            }
            Op::SpatialMean => {
                let s = inp(0).shape();
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                let inv = F::from_f64(1.0 / (h * w) as f64);
                let x = inp(0).data();
                let od = out.data_mut();
                od.fill(F::zero());
                for ni in 0..n {
                    for y in 0..h {
                        for xo in 0..w {
                            let ib = ((ni * h + y) * w + xo) * c;
                            for ch in 0..c {
                                od[ni * c + ch] += x[ib + ch];
                            }
                        }
                    }
                }
                for v in od.iter_mut() {
                    *v *= inv;
                }
            }
            Op::MeanAll => {
                let x = inp(0).data();
                let s: F = x.iter().copied().sum();
                out.data_mut()[0] = s / F::from_f64(x.len() as f64);
            }
            Op::SumAll => {
                out.data_mut()[0] = inp(0).data().iter().copied().sum();
            }
            Op::Add => {
                for ((o, &a), &b) in out
                    .data_mut()
                    .iter_mut()
                    .zip(inp(0).data())
                    .zip(inp(1).data())
                {
                    *o = a + b;
                }
            }
            Op::Sub => {
                for ((o, &a), &b) in out
                    .data_mut()
                    .iter_mut()
                    .zip(inp(0).data())
                    .zip(inp(1).data())
                {
                    *o = a - b;
                }
            }
            Op::Mul => {
                for ((o, &a), &b) in out
                    .data_mut()
                    .iter_mut()
                    .zip(inp(0).data())
                    .zip(inp(1).data())
                {
                    *o = a * b;
                }
            }
            Op::ScaleBy => {
                let s = inp(1).data()[0];
                for (o, &a) in out.data_mut().iter_mut().zip(inp(0).data()) {
                    *o = a * s;
                }
            }
            Op::OffsetBy => {
                let s = inp(1).data()[0];
                for (o, &a) in out.data_mut().iter_mut().zip(inp(0).data()) {
                    *o = a + s;
                }
            }
            Op::AddChannelBias => {
                let xs = inp(0).shape();
                let (n, c) = (xs[0], xs[3]);
                let per_image = inp(1).shape().len() == 2;
                let bias = inp(1).data();
                let x = inp(0).data();
                let od = out.data_mut();
                let pix_per_img = x.len() / (n * c);
                for ni in 0..n {
                    let b = if per_image {
                        &bias[ni * c..(ni + 1) * c]
                    } else {
                        bias
                    };
                    for pix in 0..pix_per_img {
                        let base = (ni * pix_per_img + pix) * c;
                        for ch in 0..c {
                            od[base + ch] = x[base + ch] + b[ch];
                        }
                    }
                }
            }
            Op::ScaleRows | Op::OffsetRows => {
                let n = inp(0).shape()[0];
                let x = inp(0).data();
                let s = inp(1).data();
                let od = out.data_mut();
                let per = x.len() / n;
                let is_scale = matches!(node.op, Op::ScaleRows);
                for ni in 0..n {
                    let sv = s[ni];
                    for i in 0..per {
                        let idx = ni * per + i;
                        od[idx] = if is_scale { x[idx] * sv } else { x[idx] + sv };
                    }
                }
            }
            Op::MulConst(cst) => {
                let cst = *cst;
                for (o, &a) in out.data_mut().iter_mut().zip(inp(0).data()) {
                    *o = a * cst;
                }
            }
            Op::AddConst(cst) => {
                let cst = *cst;
                for (o, &a) in out.data_mut().iter_mut().zip(inp(0).data()) {
                    *o = a + cst;
                }
            }
            Op::ConcatChannels => {
                let shape = &node.shape;
                let (n, h, w, ctot) = (shape[0], shape[1], shape[2], shape[3]);
                let od = out.data_mut();
                let mut coff = 0;
                for &src in &node.inputs {
                    let t = &before[src];
                    let ci = t.shape()[3];
                    let xd = t.data();
                    for pix in 0..n * h * w {
                        od[pix * ctot + coff..pix * ctot + coff + ci]
                            .copy_from_slice(&xd[pix * ci..(pix + 1) * ci]);
                    }
                    coff += ci;
                }
            }
            Op::ClipSte { lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                for (o, &v) in out.data_mut().iter_mut().zip(inp(0).data()) {
                    *o = v.max(lo).min(hi);
                }
            }
            Op::GrayLuma { weights } => {
                let [wr, wg, wb] = *weights;
                let x = inp(0).data();
                let od = out.data_mut();
                for pix in 0..x.len() / 3 {
                    let l = wr * x[pix * 3] + wg * x[pix * 3 + 1] + wb * x[pix * 3 + 2];
                    od[pix * 3] = l;
                    od[pix * 3 + 1] = l;
                    od[pix * 3 + 2] = l;
                }
            }
            Op::ColorMatrix { mat, offset } => {
                let x = inp(0).data();
                let od = out.data_mut();
                for pix in 0..x.len() / 3 {
                    let (r, g, b) = (x[pix * 3], x[pix * 3 + 1], x[pix * 3 + 2]);
                    for c in 0..3 {
                        od[pix * 3 + c] = mat[c][0] * r + mat[c][1] * g + mat[c][2] * b + offset[c];
                    }
                }
            }
            Op::Dct8x8 { inverse } => {
                let s = inp(0).shape();
                kernels::dct8x8_apply(
                    inp(0).data(),
                    out.data_mut(),
                    s[0],
                    s[1],
                    s[2],
                    s[3],
                    *inverse,
                );
            }
            Op::BlockScale { divide } => {
                let s = inp(0).shape();
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                let x = inp(0).data();
                let per_image = inp(1).shape().len() == 4;
                let table = inp(1).data();
                let od = out.data_mut();
                let divide = *divide;
                for ni in 0..n {
                    let toff = if per_image { ni * 64 * c } else { 0 };
                    for y in 0..h {
                        for xo in 0..w {
                            let tb = toff + ((y % 8) * 8 + (xo % 8)) * c;
                            let ib = ((ni * h + y) * w + xo) * c;
                            for ch in 0..c {
                                od[ib + ch] = if divide {
                                    x[ib + ch] / table[tb + ch]
                                } else {
                                    x[ib + ch] * table[tb + ch]
                                };
                            }
                        }
                    }
                }
            }
            Op::JpegQuantSoft => {
                let half = F::from_f64(0.5);
                for (o, &v) in out.data_mut().iter_mut().zip(inp(0).data()) {
                    *o = if v.abs() < half { v * v * v } else { v };
                }
            }
            Op::BceWithLogits => {
                let z = inp(0).data();
                let t = inp(1).data();
                let mut s = F::zero();
                for (&zv, &tv) in z.iter().zip(t) {
                    s += kernels::bce_term(zv, tv);
                }
                out.data_mut()[0] = s / F::from_f64(z.len() as f64);
            }
            Op::Reshape => {
                out.data_mut().copy_from_slice(inp(0).data());
            }
            Op::PadReflect { out_h, out_w } => {
                let s = inp(0).shape();
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                let x = inp(0).data();
                let od = out.data_mut();
                for ni in 0..n {
                    for y in 0..*out_h {
                        let my = if y < h { y } else { 2 * h - 1 - y };
                        for xo in 0..*out_w {
                            let mx = if xo < w { xo } else { 2 * w - 1 - xo };
                            let ib = ((ni * h + my) * w + mx) * c;
                            let ob = ((ni * out_h + y) * out_w + xo) * c;
                            od[ob..ob + c].copy_from_slice(&x[ib..ib + c]);
                        }
                    }
                }
            }
            Op::CropSpatial { h, w } => {
                let s = inp(0).shape();
                let (n, ih, iw, c) = (s[0], s[1], s[2], s[3]);
                let x = inp(0).data();
                let od = out.data_mut();
                for ni in 0..n {
                    for y in 0..*h {
                        let ib = ((ni * ih + y) * iw) * c;
                        let ob = ((ni * h + y) * w) * c;
                        od[ob..ob + w * c].copy_from_slice(&x[ib..ib + w * c]);
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulates gradients of `loss` (a `[1]` scalar node) into every
    /// parameter and requested input, visiting nodes exactly once in reverse
    /// topological order.
    pub fn backward(&mut self, loss: NodeRef) -> Result<()> {
        if self.graph.nodes[loss.0].shape != [1] {
            return Err(Error::Config(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.graph.nodes[loss.0].shape
            )));
        }
        for i in 0..self.graph.nodes.len() {
            self.touched[i] = false;
            if self.needs_grad[i] || i == loss.0 {
                match &mut self.grads[i] {
                    Some(g) => g.fill(F::zero()),
                    slot => *slot = Some(Tensor::zeros(&self.graph.nodes[i].shape)),
                }
            }
        }
        if let Some(g) = &mut self.grads[loss.0] {
            g.data_mut()[0] = F::one();
        }
        self.touched[loss.0] = true;

        for idx in (0..=loss.0).rev() {
            if !self.touched[idx] || self.grads[idx].is_none() {
                continue;
            }
            let upstream = self.grads[idx].take().expect("grad present");
            self.propagate(idx, &upstream);
            self.grads[idx] = Some(upstream);
        }
        Ok(())
    }

    /// Takes the gradient buffer of `node.inputs[k]` for accumulation.
    /// The put-back happens in the caller via `give`.
    fn take_grad(&mut self, input_idx: usize) -> Tensor<F> {
        self.touched[input_idx] = true;
        self.grads[input_idx].take().expect("needs_grad buffer")
    }

    fn give_grad(&mut self, input_idx: usize, g: Tensor<F>) {
        self.grads[input_idx] = Some(g);
    }

    /// Adds this node's contribution to each input's gradient.
    fn propagate(&mut self, idx: usize, g: &Tensor<F>) {
        let graph = Arc::clone(&self.graph);
        let node: &Node<F> = &graph.nodes[idx];
        let inputs = &node.inputs;
        let wants: Vec<bool> = inputs.iter().map(|&i| self.needs_grad[i]).collect();
        if !wants.iter().any(|&b| b) {
            return;
        }
        match &node.op {
            Op::Input | Op::Param | Op::Const(_) => {}
            Op::Conv2d { stride, padding } => {
                let d = conv_dims(node, &graph, *stride, *padding);
                if wants[0] {
                    let mut dx = self.take_grad(inputs[0]);
                    kernels::conv2d_backward_input(
                        g.data(),
                        self.values[inputs[1]].data(),
                        dx.data_mut(),
                        d,
                    );
                    self.give_grad(inputs[0], dx);
                }
                if wants[1] {
                    let mut dk = self.take_grad(inputs[1]);
                    kernels::conv2d_backward_kernel(
                        self.values[inputs[0]].data(),
                        g.data(),
                        dk.data_mut(),
                        d,
                    );
                    self.give_grad(inputs[1], dk);
                }
            }
            Op::DepthwiseConv2d => {
                let s = self.values[inputs[0]].shape().to_vec();
                let k = self.values[inputs[1]].shape()[1];
                if wants[0] {
                    let mut dx = self.take_grad(inputs[0]);
                    kernels::depthwise_backward_input(
                        g.data(),
                        self.values[inputs[1]].data(),
                        dx.data_mut(),
                        s[0],
                        s[1],
                        s[2],
                        s[3],
                        k,
                    );
                    self.give_grad(inputs[0], dx);
                }
                if wants[1] {
                    let mut dk = self.take_grad(inputs[1]);
                    kernels::depthwise_backward_kernel(
                        self.values[inputs[0]].data(),
                        g.data(),
                        dk.data_mut(),
                        s[0],
                        s[1],
                        s[2],
                        s[3],
                        k,
                    );
                    self.give_grad(inputs[1], dk);
                }
            }
            Op::Dense => {
                let n = self.values[inputs[0]].shape()[0];
                let d = self.values[inputs[0]].shape()[1];
                let m = self.values[inputs[1]].shape()[1];
                if wants[0] {
                    let mut dx = self.take_grad(inputs[0]);
                    kernels::dense_backward(
                        self.values[inputs[0]].data(),
                        self.values[inputs[1]].data(),
                        g.data(),
                        Some(dx.data_mut()),
                        None,
                        None,
                        n,
                        d,
                        m,
                    );
                    self.give_grad(inputs[0], dx);
                }
                if wants[1] {
                    let mut dw = self.take_grad(inputs[1]);
                    kernels::dense_backward(
                        self.values[inputs[0]].data(),
                        self.values[inputs[1]].data(),
                        g.data(),
                        None,
                        Some(dw.data_mut()),
                        None,
                        n,
                        d,
                        m,
                    );
                    self.give_grad(inputs[1], dw);
                }
                if wants[2] {
                    let mut db = self.take_grad(inputs[2]);
                    kernels::dense_backward(
                        self.values[inputs[0]].data(),
                        self.values[inputs[1]].data(),
                        g.data(),
                        None,
                        None,
                        Some(db.data_mut()),
                        n,
                        d,
                        m,
                    );
                    self.give_grad(inputs[2], db);
                }
            }
            Op::BilinearSample => {
                let d = sample_dims(
                    self.values[inputs[0]].shape(),
                    self.values[inputs[1]].shape(),
                );
                if wants[0] {
                    let mut dx = self.take_grad(inputs[0]);
                    kernels::bilinear_backward(
                        self.values[inputs[0]].data(),
                        self.values[inputs[1]].data(),
                        g.data(),
                        Some(dx.data_mut()),
                        None,
                        d,
                    );
                    self.give_grad(inputs[0], dx);
                }
                if wants[1] {
                    let mut dg = self.take_grad(inputs[1]);
                    kernels::bilinear_backward(
                        self.values[inputs[0]].data(),
                        self.values[inputs[1]].data(),
                        g.data(),
                        None,
                        Some(dg.data_mut()),
                        d,
                    );
                    self.give_grad(inputs[1], dg);
                }
            }
            Op::AffineGrid {
                out_h,
                out_w,
                in_h,
                in_w,
            } => {
                if wants[0] {
                    let d = GridDims {
                        n: self.values[inputs[0]].shape()[0],
                        oh: *out_h,
                        ow: *out_w,
                        in_h: *in_h,
                        in_w: *in_w,
                    };
                    let mut dt = self.take_grad(inputs[0]);
                    kernels::affine_grid_backward(g.data(), dt.data_mut(), d);
                    self.give_grad(inputs[0], dt);
                }
            }
            Op::Relu => {
                if wants[0] {
                    let mut dx = self.take_grad(inputs[0]);
                    for ((d, &gv), &xv) in dx
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(self.values[inputs[0]].data())
                    {
                        if xv > F::zero() {
                            *d += gv;
                        }
                    }
                    self.give_grad(inputs[0], dx);
                }
            }
            Op::Sigmoid => {
                if wants[0] {
                    let mut dx = self.take_grad(inputs[0]);
                    for ((d, &gv), &yv) in dx
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(self.values[idx].data())
                    {
                        *d += gv * yv * (F::one() - yv);
                    }
                    self.give_grad(inputs[0], dx);
                }
            }
            Op::UpsampleNearest2x => {
                if wants[0] {
                    let s = self.values[inputs[0]].shape().to_vec();
                    let mut dx = self.take_grad(inputs[0]);
                    kernels::upsample2x_backward(g.data(), dx.data_mut(), s[0], s[1], s[2], s[3]);
                    self.give_grad(inputs[0], dx);
                }
            }
            Op::MaxPool2x2 => {
                if wants[0] {
                    let s = self.values[inputs[0]].shape().to_vec();
                    let mut dx = self.take_grad(inputs[0]);
                    kernels::maxpool2x2_backward(
                        g.data(),
                        &self.aux_u8[idx],
                        dx.data_mut(),
                        s[0],
                        s[1],
                        s[2],
                        s[3],
                    );
                    self.give_grad(inputs[0], dx);
                }
            }
            Op::SpatialMean => {
                if wants[0] {
                    let s = self.values[inputs[0]].shape().to_vec();
                    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let inv = F::from_f64(1.0 / (h * w) as f64);
                    let mut dx = self.take_grad(inputs[0]);
                    let dxd = dx.data_mut();
                    for ni in 0..n {
                        for y in 0..h {
                            for xo in 0..w {
                                let ib = ((ni * h + y) * w + xo) * c;
                                for ch in 0..c {
                                    dxd[ib + ch] += g.data()[ni * c + ch] * inv;
                                }
                            }
                        }
                    }
                    self.give_grad(inputs[0], dx);
                }
            }
            Op::MeanAll => {
                if wants[0] {
                    let n = self.values[inputs[0]].numel();
                    let gv = g.data()[0] / F::from_f64(n as f64);
                    let mut dx = self.take_grad(inputs[0]);
                    for d in dx.data_mut() {
                        *d += gv;
                    }
                    self.give_grad(inputs[0], dx);
                }
            }
            Op::SumAll => {
                if wants[0] {
                    let gv = g.data()[0];
                    let mut dx = self.take_grad(inputs[0]);
                    for d in dx.data_mut() {
                        *d += gv;
                    }
                    self.give_grad(inputs[0], dx);
                }
            }
            Op::Add => {
                for k in 0..2 {
                    if wants[k] {
                        let mut dx = self.take_grad(inputs[k]);
                        for (d, &gv) in dx.data_mut().iter_mut().zip(g.data()) {
                            *d += gv;
                        }
                        self.give_grad(inputs[k], dx);
                    }
                }
            }
            Op::Sub => {
                if wants[0] {
                    let mut dx = self.take_grad(inputs[0]);
                    for (d, &gv) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                    self.give_grad(inputs[0], dx);
                }
                if wants[1] {
                    let mut dx = self.take_grad(inputs[1]);
                    for (d, &gv) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d -= gv;
                    }
                    self.give_grad(inputs[1], dx);
                }
            }
            Op::Mul => {
                for k in 0..2 {
                    if wants[k] {
                        let mut dx = self.take_grad(inputs[k]);
                        for ((d, &gv), &ov) in dx
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .zip(self.values[inputs[1 - k]].data())
                        {
                            *d += gv * ov;
                        }
                        self.give_grad(inputs[k], dx);
                    }
                }
            }
            Op::ScaleBy => {
                if wants[0] {
                    let s = self.values[inputs[1]].data()[0];
                    let mut dx = self.take_grad(inputs[0]);
                    for (d, &gv) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += gv * s;
                    }
                    self.give_grad(inputs[0], dx);
                }
                if wants[1] {
                    let mut s = F::zero();
                    for (&gv, &xv) in g.data().iter().zip(self.values[inputs[0]].data()) {
                        s += gv * xv;
                    }
                    let mut ds = self.take_grad(inputs[1]);
                    ds.data_mut()[0] += s;
                    self.give_grad(inputs[1], ds);
                }
            }
            Op::OffsetBy => {
                if wants[0] {
                    let mut dx = self.take_grad(inputs[0]);
                    for (d, &gv) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                    self.give_grad(inputs[0], dx);
                }
                if wants[1] {
                    let s: F = g.data().iter().copied().sum();
                    let mut ds = self.take_grad(inputs[1]);
                    ds.data_mut()[0] += s;
                    self.give_grad(inputs[1], ds);
                }
            }
            Op::AddChannelBias => {
                if wants[0] {
                    let mut dx = self.take_grad(inputs[0]);
                    for (d, &gv) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                    self.give_grad(inputs[0], dx);
                }
                if wants[1] {
                    let xs = self.values[inputs[0]].shape().to_vec();
                    let (n, c) = (xs[0], xs[3]);
                    let per_image = self.values[inputs[1]].shape().len() == 2;
                    let mut db = self.take_grad(inputs[1]);
                    let dbd = db.data_mut();
                    let pix_per_img = g.numel() / (n * c);
                    for ni in 0..n {
                        let boff = if per_image { ni * c } else { 0 };
                        for pix in 0..pix_per_img {
                            let base = (ni * pix_per_img + pix) * c;
                            for ch in 0..c {
                                dbd[boff + ch] += g.data()[base + ch];
                            }
                        }
                    }
                    self.give_grad(inputs[1], db);
                }
            }
            Op::ScaleRows => {
                let n = self.values[inputs[0]].shape()[0];
                let per = g.numel() / n;
                if wants[0] {
                    let mut dx = self.take_grad(inputs[0]);
                    {
                        let s = self.values[inputs[1]].data();
                        let dxd = dx.data_mut();
                        for ni in 0..n {
                            let sv = s[ni];
                            for i in 0..per {
                                dxd[ni * per + i] += g.data()[ni * per + i] * sv;
                            }
                        }
                    }
                    self.give_grad(inputs[0], dx);
                }
                if wants[1] {
                    let mut ds = self.take_grad(inputs[1]);
                    {
                        let x = self.values[inputs[0]].data();
                        let dsd = ds.data_mut();
                        for ni in 0..n {
                            let mut acc = F::zero();
                            for i in 0..per {
                                acc += g.data()[ni * per + i] * x[ni * per + i];
                            }
                            dsd[ni] += acc;
                        }
                    }
                    self.give_grad(inputs[1], ds);
                }
            }
            Op::OffsetRows => {
                let n = self.values[inputs[0]].shape()[0];
                let per = g.numel() / n;
                if wants[0] {
                    let mut dx = self.take_grad(inputs[0]);
                    for (d, &gv) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                    self.give_grad(inputs[0], dx);
                }
                if wants[1] {
                    let mut ds = self.take_grad(inputs[1]);
                    {
                        let dsd = ds.data_mut();
                        for ni in 0..n {
                            let mut acc = F::zero();
                            for i in 0..per {
                                acc += g.data()[ni * per + i];
                            }
                            dsd[ni] += acc;
                        }
                    }
                    self.give_grad(inputs[1], ds);
                }
            }
            Op::MulConst(cst) => {
                if wants[0] {
                    let cst = *cst;
                    let mut dx = self.take_grad(inputs[0]);
                    for (d, &gv) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += gv * cst;
                    }
                    self.give_grad(inputs[0], dx);
                }
            }
            Op::AddConst(_) | Op::ClipSte { .. } | Op::Reshape => {
                if wants[0] {
                    let mut dx = self.take_grad(inputs[0]);
                    for (d, &gv) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                    self.give_grad(inputs[0], dx);
                }
            }
            Op::ConcatChannels => {
                let shape = &node.shape;
                let (n, h, w, ctot) = (shape[0], shape[1], shape[2], shape[3]);
                let mut coff = 0;
                for (k, &src) in inputs.iter().enumerate() {
                    let ci = self.values[src].shape()[3];
                    if wants[k] {
                        let mut dx = self.take_grad(src);
                        let dxd = dx.data_mut();
                        for pix in 0..n * h * w {
                            let gb = pix * ctot + coff;
                            for ch in 0..ci {
                                dxd[pix * ci + ch] += g.data()[gb + ch];
                            }
                        }
                        self.give_grad(src, dx);
                    }
                    coff += ci;
                }
            }
            Op::GrayLuma { weights } => {
                if wants[0] {
                    let [wr, wg, wb] = *weights;
                    let mut dx = self.take_grad(inputs[0]);
                    let dxd = dx.data_mut();
                    for pix in 0..g.numel() / 3 {
                        let gs = g.data()[pix * 3] + g.data()[pix * 3 + 1] + g.data()[pix * 3 + 2];
                        dxd[pix * 3] += wr * gs;
                        dxd[pix * 3 + 1] += wg * gs;
                        dxd[pix * 3 + 2] += wb * gs;
                    }
                    self.give_grad(inputs[0], dx);
                }
            }
            Op::ColorMatrix { mat, .. } => {
                if wants[0] {
                    let mut dx = self.take_grad(inputs[0]);
                    let dxd = dx.data_mut();
                    for pix in 0..g.numel() / 3 {
                        for i in 0..3 {
                            let mut s = F::zero();
                            for c in 0..3 {
                                s += mat[c][i] * g.data()[pix * 3 + c];
                            }
                            dxd[pix * 3 + i] += s;
                        }
                    }
                    self.give_grad(inputs[0], dx);
                }
            }
            Op::Dct8x8 { inverse } => {
                if wants[0] {
                    let s = self.values[inputs[0]].shape().to_vec();
                    self.scratch.resize(g.numel(), F::zero());
                    let mut scratch = std::mem::take(&mut self.scratch);
                    kernels::dct8x8_apply(
                        g.data(),
                        &mut scratch,
                        s[0],
                        s[1],
                        s[2],
                        s[3],
                        !*inverse,
                    );
                    let mut dx = self.take_grad(inputs[0]);
                    for (d, &sv) in dx.data_mut().iter_mut().zip(scratch.iter()) {
                        *d += sv;
                    }
                    self.give_grad(inputs[0], dx);
                    self.scratch = scratch;
                }
            }
            Op::BlockScale { divide } => {
                let s = self.values[inputs[0]].shape().to_vec();
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                let per_image = self.values[inputs[1]].shape().len() == 4;
                let divide = *divide;
                if wants[0] {
                    let mut dx = self.take_grad(inputs[0]);
                    {
                        let table = self.values[inputs[1]].data();
                        let dxd = dx.data_mut();
                        for ni in 0..n {
                            let toff = if per_image { ni * 64 * c } else { 0 };
                            for y in 0..h {
                                for xo in 0..w {
                                    let tb = toff + ((y % 8) * 8 + (xo % 8)) * c;
                                    let ib = ((ni * h + y) * w + xo) * c;
                                    for ch in 0..c {
                                        let t = table[tb + ch];
                                        dxd[ib + ch] += if divide {
                                            g.data()[ib + ch] / t
                                        } else {
                                            g.data()[ib + ch] * t
                                        };
                                    }
                                }
                            }
                        }
                    }
                    self.give_grad(inputs[0], dx);
                }
                if wants[1] {
                    let mut dt = self.take_grad(inputs[1]);
                    {
                        let x = self.values[inputs[0]].data();
                        let table = self.values[inputs[1]].data();
                        let dtd = dt.data_mut();
                        for ni in 0..n {
                            let toff = if per_image { ni * 64 * c } else { 0 };
                            for y in 0..h {
                                for xo in 0..w {
                                    let tb = toff + ((y % 8) * 8 + (xo % 8)) * c;
                                    let ib = ((ni * h + y) * w + xo) * c;
                                    for ch in 0..c {
                                        let t = table[tb + ch];
                                        dtd[tb + ch] += if divide {
                                            -g.data()[ib + ch] * x[ib + ch] / (t * t)
                                        } else {
                                            g.data()[ib + ch] * x[ib + ch]
                                        };
                                    }
                                }
                            }
                        }
                    }
                    self.give_grad(inputs[1], dt);
                }
            }
            Op::JpegQuantSoft => {
                if wants[0] {
                    let half = F::from_f64(0.5);
                    let three = F::from_f64(3.0);
                    let mut dx = self.take_grad(inputs[0]);
                    for ((d, &gv), &xv) in dx
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(self.values[inputs[0]].data())
                    {
                        let dd = if xv.abs() < half {
                            three * xv * xv
                        } else {
                            F::one()
                        };
                        *d += gv * dd;
                    }
                    self.give_grad(inputs[0], dx);
                }
            }
            Op::BceWithLogits => {
                let count = self.values[inputs[0]].numel();
                let scale = g.data()[0] / F::from_f64(count as f64);
                if wants[0] {
                    let mut dz = self.take_grad(inputs[0]);
                    for ((d, &zv), &tv) in dz
                        .data_mut()
                        .iter_mut()
                        .zip(self.values[inputs[0]].data())
                        .zip(self.values[inputs[1]].data())
                    {
                        *d += scale * (kernels::sigmoid(zv) - tv);
                    }
                    self.give_grad(inputs[0], dz);
                }
                if wants[1] {
                    let mut dt = self.take_grad(inputs[1]);
                    for (d, &zv) in dt.data_mut().iter_mut().zip(self.values[inputs[0]].data()) {
                        *d += scale * (-zv);
                    }
                    self.give_grad(inputs[1], dt);
                }
            }
            Op::PadReflect { out_h, out_w } => {
                if wants[0] {
                    let s = self.values[inputs[0]].shape().to_vec();
                    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let mut dx = self.take_grad(inputs[0]);
                    let dxd = dx.data_mut();
                    for ni in 0..n {
                        for y in 0..*out_h {
                            let my = if y < h { y } else { 2 * h - 1 - y };
                            for xo in 0..*out_w {
                                let mx = if xo < w { xo } else { 2 * w - 1 - xo };
                                let ib = ((ni * h + my) * w + mx) * c;
                                let ob = ((ni * out_h + y) * out_w + xo) * c;
                                for ch in 0..c {
                                    dxd[ib + ch] += g.data()[ob + ch];
                                }
                            }
                        }
                    }
                    self.give_grad(inputs[0], dx);
                }
            }
            Op::CropSpatial { h, w } => {
                if wants[0] {
                    let s = self.values[inputs[0]].shape().to_vec();
                    let (n, ih, iw, c) = (s[0], s[1], s[2], s[3]);
                    let mut dx = self.take_grad(inputs[0]);
                    let dxd = dx.data_mut();
                    for ni in 0..n {
                        for y in 0..*h {
                            let ib = ((ni * ih + y) * iw) * c;
                            let ob = ((ni * h + y) * w) * c;
                            for i in 0..w * c {
                                dxd[ib + i] += g.data()[ob + i];
                            }
                        }
                    }
                    self.give_grad(inputs[0], dx);
                }
            }
        }
    }
}

fn conv_dims<F: Scalar>(
    node: &Node<F>,
    graph: &Graph<F>,
    stride: usize,
    padding: Padding,
) -> ConvDims {
    let xs = &graph.nodes[node.inputs[0]].shape;
    let ks = &graph.nodes[node.inputs[1]].shape;
    let (pad_h, pad_w) = match padding {
        Padding::Same => (
            same_pad_begin(xs[1], ks[0], stride),
            same_pad_begin(xs[2], ks[1], stride),
        ),
        Padding::Valid => (0, 0),
    };
    ConvDims {
        n: xs[0],
        h: xs[1],
        w: xs[2],
        cin: xs[3],
        k: ks[0],
        cout: ks[3],
        stride,
        pad_h,
        pad_w,
        oh: node.shape[1],
        ow: node.shape[2],
    }
}

fn sample_dims(img: &[usize], grid: &[usize]) -> SampleDims {
    SampleDims {
        n: img[0],
        h: img[1],
        w: img[2],
        c: img[3],
        oh: grid[1],
        ow: grid[2],
    }
}

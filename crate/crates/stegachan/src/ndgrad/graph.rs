//! Graph construction and shape inference.
//!
//! A [`GraphBuilder`] appends operation records in topological order (nodes
//! can only reference already-built nodes, so the order is valid by
//! construction). Every node's output shape is inferred at build time, which
//! lets the executor preallocate all buffers once and catches shape mismatch
//! as a configuration error before any data flows.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::tensor::Tensor;
use super::Scalar;
use crate::error::{Error, Result};

/// Handle to a node in a graph. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeRef(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone)]
pub(crate) enum Op<F> {
    Input,
    Param,
    Const(Tensor<F>),
    /// (x[N,H,W,Ci], k[kh,kw,Ci,Co]) -> [N,Ho,Wo,Co]
    Conv2d { stride: usize, padding: Padding },
    /// (x[N,H,W,C], k[N,kh,kw]) -> same shape; one 2-D kernel per batch
    /// image shared across channels, stride 1, same padding, zero fill.
    DepthwiseConv2d,
    /// (x[N,D], w[D,M], b[M]) -> [N,M]
    Dense,
    /// (img[N,H,W,C], grid[N,Ho,Wo,2]) -> [N,Ho,Wo,C]; grid holds continuous
    /// (x, y) source pixel coordinates, out-of-bounds reads are zero.
    BilinearSample,
    /// (theta[N,6]) -> [N,out_h,out_w,2] pixel coordinates into an
    /// `in_h` x `in_w` image (align-corners normalized convention).
    AffineGrid {
        out_h: usize,
        out_w: usize,
        in_h: usize,
        in_w: usize,
    },
    Relu,
    Sigmoid,
    /// [N,H,W,C] -> [N,2H,2W,C]
    UpsampleNearest2x,
    /// [N,H,W,C] -> [N,H/2,W/2,C]; dims must be even.
    MaxPool2x2,
    /// [N,H,W,C] -> [N,C]
    SpatialMean,
    MeanAll,
    SumAll,
    Add,
    Sub,
    Mul,
    /// (x, s[1]) -> x * s
    ScaleBy,
    /// (x, s[1]) -> x + s
    OffsetBy,
    /// (x[N,...], s[N]) -> per-image scale
    ScaleRows,
    /// (x[N,...], s[N]) -> per-image offset
    OffsetRows,
    /// (x[N,H,W,C], bias[C] or bias[N,C]) -> x + bias per channel
    AddChannelBias,
    MulConst(F),
    AddConst(F),
    ConcatChannels,
    /// Clamp to [lo, hi] with straight-through gradient.
    ClipSte { lo: F, hi: F },
    /// Replace every channel with the weighted channel sum (luma).
    GrayLuma { weights: [F; 3] },
    /// Per-pixel 3x3 affine color map: out_c = sum_i mat[c][i]*x_i + offset[c].
    ColorMatrix { mat: [[F; 3]; 3], offset: [F; 3] },
    /// Blockwise 8x8 DCT-II (orthonormal) per channel; `inverse` applies the
    /// transpose pair. Spatial dims must be multiples of 8.
    Dct8x8 { inverse: bool },
    /// (x[N,H,W,C], table[8,8,C] or [N,8,8,C]) -> x / table (divide) or
    /// x * table, the table tiled over 8x8 blocks.
    BlockScale { divide: bool },
    /// Differentiable JPEG quantization shaping: x^3 for |x| < 0.5, x else.
    JpegQuantSoft,
    /// (logits[N,M], targets[N,M]) -> [1], mean binary cross-entropy,
    /// numerically stable; no gradient w.r.t. targets.
    BceWithLogits,
    /// Same data, new shape (element count preserved).
    Reshape,
    /// Pad spatial dims to (out_h, out_w) by symmetric reflection on the
    /// bottom/right edges. Pad amount must not exceed the source dim.
    PadReflect { out_h: usize, out_w: usize },
    /// Keep the top-left (h, w) spatial window.
    CropSpatial { h: usize, w: usize },
}

impl<F> Op<F> {
    pub(crate) fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Const(_) => "const",
            Op::Conv2d { .. } => "conv2d",
            Op::DepthwiseConv2d => "depthwise_conv2d",
            Op::Dense => "dense",
            Op::BilinearSample => "bilinear_sample",
            Op::AffineGrid { .. } => "affine_grid",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::UpsampleNearest2x => "upsample2x",
            Op::MaxPool2x2 => "maxpool2x2",
            Op::SpatialMean => "spatial_mean",
            Op::MeanAll => "mean_all",
            Op::SumAll => "sum_all",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::ScaleBy => "scale_by",
            Op::OffsetBy => "offset_by",
            Op::ScaleRows => "scale_rows",
            Op::OffsetRows => "offset_rows",
            Op::AddChannelBias => "add_channel_bias",
            Op::MulConst(_) => "mul_const",
            Op::AddConst(_) => "add_const",
            Op::ConcatChannels => "concat_channels",
            Op::ClipSte { .. } => "clip_ste",
            Op::GrayLuma { .. } => "gray_luma",
            Op::ColorMatrix { .. } => "color_matrix",
            Op::Dct8x8 { .. } => "dct8x8",
            Op::BlockScale { .. } => "block_scale",
            Op::JpegQuantSoft => "jpeg_quant_soft",
            Op::BceWithLogits => "bce_with_logits",
            Op::Reshape => "reshape",
            Op::PadReflect { .. } => "pad_reflect",
            Op::CropSpatial { .. } => "crop_spatial",
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node<F> {
    pub op: Op<F>,
    pub inputs: Vec<usize>,
    pub shape: Vec<usize>,
    pub name: Option<String>,
}

/// An immutable, validated computation graph. Safe to share across threads;
/// each thread runs its own [`super::Executor`].
#[derive(Debug)]
pub struct Graph<F> {
    pub(crate) nodes: Vec<Node<F>>,
    pub(crate) inputs: BTreeMap<String, usize>,
    pub(crate) params: BTreeMap<String, usize>,
}

impl<F: Scalar> Graph<F> {
    pub fn node_shape(&self, node: NodeRef) -> &[usize] {
        &self.nodes[node.0].shape
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(|s| s.as_str())
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn param_shape(&self, name: &str) -> Option<&[usize]> {
        self.params.get(name).map(|&i| self.nodes[i].shape.as_slice())
    }

    pub(crate) fn describe(&self, idx: usize) -> String {
        match &self.nodes[idx].name {
            Some(n) => format!("#{} {} '{}'", idx, self.nodes[idx].op.kind(), n),
            None => format!("#{} {}", idx, self.nodes[idx].op.kind()),
        }
    }
}

pub struct GraphBuilder<F> {
    nodes: Vec<Node<F>>,
    inputs: BTreeMap<String, usize>,
    params: BTreeMap<String, usize>,
}

impl<F: Scalar> Default for GraphBuilder<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> GraphBuilder<F> {
    pub fn new() -> Self {
        GraphBuilder {
            nodes: Vec::new(),
            inputs: BTreeMap::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn finish(self) -> Arc<Graph<F>> {
        Arc::new(Graph {
            nodes: self.nodes,
            inputs: self.inputs,
            params: self.params,
        })
    }

    pub fn shape(&self, node: NodeRef) -> &[usize] {
        &self.nodes[node.0].shape
    }

    fn push(
        &mut self,
        op: Op<F>,
        inputs: &[NodeRef],
        shape: Vec<usize>,
        name: Option<String>,
    ) -> NodeRef {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs: inputs.iter().map(|r| r.0).collect(),
            shape,
            name,
        });
        NodeRef(idx)
    }

    fn node_shape(&self, r: NodeRef) -> &[usize] {
        &self.nodes[r.0].shape
    }

    fn expect_rank(&self, r: NodeRef, rank: usize, what: &str) -> Result<()> {
        if self.node_shape(r).len() != rank {
            return Err(Error::Config(format!(
                "{}: expected rank {}, got shape {:?}",
                what,
                rank,
                self.node_shape(r)
            )));
        }
        Ok(())
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeRef> {
        if self.inputs.contains_key(name) {
            return Err(Error::Config(format!("duplicate input '{}'", name)));
        }
        let r = self.push(Op::Input, &[], shape.to_vec(), Some(name.to_string()));
        self.inputs.insert(name.to_string(), r.0);
        Ok(r)
    }

    /// Declares a named parameter, or returns the existing node when the
    /// name is already present (weight sharing); the shapes must agree.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeRef> {
        if let Some(&idx) = self.params.get(name) {
            if self.nodes[idx].shape != shape {
                return Err(Error::Config(format!(
                    "parameter '{}' redeclared with shape {:?} (was {:?})",
                    name, shape, self.nodes[idx].shape
                )));
            }
            return Ok(NodeRef(idx));
        }
        let r = self.push(Op::Param, &[], shape.to_vec(), Some(name.to_string()));
        self.params.insert(name.to_string(), r.0);
        Ok(r)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> NodeRef {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), &[], shape, None)
    }

    pub fn conv2d(
        &mut self,
        x: NodeRef,
        kernel: NodeRef,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeRef> {
        self.expect_rank(x, 4, "conv2d input")?;
        self.expect_rank(kernel, 4, "conv2d kernel")?;
        let xs = self.node_shape(x).to_vec();
        let ks = self.node_shape(kernel).to_vec();
        let (kh, kw, cin, cout) = (ks[0], ks[1], ks[2], ks[3]);
        if kh != kw || !(1..=3).contains(&kh) {
            return Err(Error::Config(format!(
                "conv2d kernel must be square with k in 1..=3, got {}x{}",
                kh, kw
            )));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::Config(format!("conv2d stride must be 1 or 2, got {}", stride)));
        }
        if cin != xs[3] {
            return Err(Error::Config(format!(
                "conv2d channel mismatch: input has {}, kernel expects {}",
                xs[3], cin
            )));
        }
        let (oh, ow) = match padding {
            Padding::Same => (div_ceil(xs[1], stride), div_ceil(xs[2], stride)),
            Padding::Valid => {
                if xs[1] < kh || xs[2] < kw {
                    return Err(Error::Config(
                        "conv2d valid padding: input smaller than kernel".into(),
                    ));
                }
                ((xs[1] - kh) / stride + 1, (xs[2] - kw) / stride + 1)
            }
        };
        Ok(self.push(
            Op::Conv2d { stride, padding },
            &[x, kernel],
            vec![xs[0], oh, ow, cout],
            None,
        ))
    }

    pub fn depthwise_conv2d(&mut self, x: NodeRef, kernel: NodeRef) -> Result<NodeRef> {
        self.expect_rank(x, 4, "depthwise_conv2d input")?;
        self.expect_rank(kernel, 3, "depthwise_conv2d kernel")?;
        let ks = self.node_shape(kernel).to_vec();
        let xs = self.node_shape(x).to_vec();
        if ks[1] != ks[2] || ks[1] % 2 == 0 || ks[0] != xs[0] {
            return Err(Error::Config(format!(
                "depthwise kernel must be [N,k,k] with odd k matching the batch, got {:?} for input {:?}",
                ks, xs
            )));
        }
        Ok(self.push(Op::DepthwiseConv2d, &[x, kernel], xs, None))
    }

    pub fn dense(&mut self, x: NodeRef, w: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.expect_rank(x, 2, "dense input")?;
        self.expect_rank(w, 2, "dense weight")?;
        self.expect_rank(b, 1, "dense bias")?;
        let xs = self.node_shape(x).to_vec();
        let ws = self.node_shape(w).to_vec();
        let bs = self.node_shape(b).to_vec();
        if xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::Config(format!(
                "dense shape mismatch: x {:?}, w {:?}, b {:?}",
                xs, ws, bs
            )));
        }
        Ok(self.push(Op::Dense, &[x, w, b], vec![xs[0], ws[1]], None))
    }

    pub fn bilinear_sample(&mut self, image: NodeRef, grid: NodeRef) -> Result<NodeRef> {
        self.expect_rank(image, 4, "bilinear_sample image")?;
        self.expect_rank(grid, 4, "bilinear_sample grid")?;
        let is = self.node_shape(image).to_vec();
        let gs = self.node_shape(grid).to_vec();
        if gs[3] != 2 || gs[0] != is[0] {
            return Err(Error::Config(format!(
                "bilinear_sample grid must be [N,H',W',2] with matching batch; image {:?}, grid {:?}",
                is, gs
            )));
        }
        Ok(self.push(
            Op::BilinearSample,
            &[image, grid],
            vec![is[0], gs[1], gs[2], is[3]],
            None,
        ))
    }

    pub fn affine_grid(
        &mut self,
        theta: NodeRef,
        out_h: usize,
        out_w: usize,
        in_h: usize,
        in_w: usize,
    ) -> Result<NodeRef> {
        self.expect_rank(theta, 2, "affine_grid theta")?;
        let ts = self.node_shape(theta).to_vec();
        if ts[1] != 6 {
            return Err(Error::Config(format!(
                "affine_grid theta must be [N,6], got {:?}",
                ts
            )));
        }
        if out_h < 2 || out_w < 2 || in_h < 2 || in_w < 2 {
            return Err(Error::Config("affine_grid dims must be >= 2".into()));
        }
        Ok(self.push(
            Op::AffineGrid {
                out_h,
                out_w,
                in_h,
                in_w,
            },
            &[theta],
            vec![ts[0], out_h, out_w, 2],
            None,
        ))
    }

    pub fn relu(&mut self, x: NodeRef) -> NodeRef {
        let shape = self.node_shape(x).to_vec();
        self.push(Op::Relu, &[x], shape, None)
    }

    pub fn sigmoid(&mut self, x: NodeRef) -> NodeRef {
        let shape = self.node_shape(x).to_vec();
        self.push(Op::Sigmoid, &[x], shape, None)
    }

    pub fn upsample2x(&mut self, x: NodeRef) -> Result<NodeRef> {
        self.expect_rank(x, 4, "upsample2x input")?;
        let s = self.node_shape(x).to_vec();
        Ok(self.push(
            Op::UpsampleNearest2x,
            &[x],
            vec![s[0], s[1] * 2, s[2] * 2, s[3]],
            None,
        ))
    }

    pub fn maxpool2x2(&mut self, x: NodeRef) -> Result<NodeRef> {
        self.expect_rank(x, 4, "maxpool2x2 input")?;
        let s = self.node_shape(x).to_vec();
        if s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::Config(format!(
                "maxpool2x2 needs even spatial dims, got {:?}",
                s
            )));
        }
        Ok(self.push(
            Op::MaxPool2x2,
            &[x],
            vec![s[0], s[1] / 2, s[2] / 2, s[3]],
            None,
        ))
    }

    pub fn spatial_mean(&mut self, x: NodeRef) -> Result<NodeRef> {
        self.expect_rank(x, 4, "spatial_mean input")?;
        let s = self.node_shape(x).to_vec();
        Ok(self.push(Op::SpatialMean, &[x], vec![s[0], s[3]], None))
    }

    pub fn mean_all(&mut self, x: NodeRef) -> NodeRef {
        self.push(Op::MeanAll, &[x], vec![1], None)
    }

    pub fn sum_all(&mut self, x: NodeRef) -> NodeRef {
        self.push(Op::SumAll, &[x], vec![1], None)
    }

    fn binary_same_shape(&mut self, op: Op<F>, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        if self.node_shape(a) != self.node_shape(b) {
            return Err(Error::Config(format!(
                "{}: shape mismatch {:?} vs {:?}",
                op.kind(),
                self.node_shape(a),
                self.node_shape(b)
            )));
        }
        let shape = self.node_shape(a).to_vec();
        Ok(self.push(op, &[a, b], shape, None))
    }

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.binary_same_shape(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.binary_same_shape(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.binary_same_shape(Op::Mul, a, b)
    }

    fn scalar_second(&mut self, op: Op<F>, x: NodeRef, s: NodeRef) -> Result<NodeRef> {
        if self.node_shape(s) != [1] {
            return Err(Error::Config(format!(
                "{}: second operand must be a [1] scalar, got {:?}",
                op.kind(),
                self.node_shape(s)
            )));
        }
        let shape = self.node_shape(x).to_vec();
        Ok(self.push(op, &[x, s], shape, None))
    }

    /// `x * s` with `s` a scalar node.
    pub fn scale_by(&mut self, x: NodeRef, s: NodeRef) -> Result<NodeRef> {
        self.scalar_second(Op::ScaleBy, x, s)
    }

    /// `x + s` with `s` a scalar node.
    pub fn offset_by(&mut self, x: NodeRef, s: NodeRef) -> Result<NodeRef> {
        self.scalar_second(Op::OffsetBy, x, s)
    }

    /// `a + t*(b - a)` with `t` a scalar node.
    pub fn lerp(&mut self, a: NodeRef, b: NodeRef, t: NodeRef) -> Result<NodeRef> {
        let diff = self.sub(b, a)?;
        let scaled = self.scale_by(diff, t)?;
        self.add(a, scaled)
    }

    fn rows_second(&mut self, op: Op<F>, x: NodeRef, s: NodeRef) -> Result<NodeRef> {
        let xs = self.node_shape(x).to_vec();
        let ss = self.node_shape(s).to_vec();
        if ss.len() != 1 || ss[0] != xs[0] {
            return Err(Error::Config(format!(
                "{}: second operand must be [N] matching the batch, got {:?} for input {:?}",
                op.kind(),
                ss,
                xs
            )));
        }
        Ok(self.push(op, &[x, s], xs, None))
    }

    /// Per-image `x[n] * s[n]`.
    pub fn scale_rows(&mut self, x: NodeRef, s: NodeRef) -> Result<NodeRef> {
        self.rows_second(Op::ScaleRows, x, s)
    }

    /// Per-image `x[n] + s[n]`.
    pub fn offset_rows(&mut self, x: NodeRef, s: NodeRef) -> Result<NodeRef> {
        self.rows_second(Op::OffsetRows, x, s)
    }

    /// `a + t[n]*(b - a)` with a per-image factor.
    pub fn lerp_rows(&mut self, a: NodeRef, b: NodeRef, t: NodeRef) -> Result<NodeRef> {
        let diff = self.sub(b, a)?;
        let scaled = self.scale_rows(diff, t)?;
        self.add(a, scaled)
    }

    pub fn add_channel_bias(&mut self, x: NodeRef, bias: NodeRef) -> Result<NodeRef> {
        self.expect_rank(x, 4, "add_channel_bias input")?;
        let xs = self.node_shape(x).to_vec();
        let bs = self.node_shape(bias).to_vec();
        let ok = match bs.len() {
            1 => bs[0] == xs[3],
            2 => bs[0] == xs[0] && bs[1] == xs[3],
            _ => false,
        };
        if !ok {
            return Err(Error::Config(format!(
                "add_channel_bias: bias {:?} incompatible with input {:?}",
                bs, xs
            )));
        }
        Ok(self.push(Op::AddChannelBias, &[x, bias], xs, None))
    }

    pub fn mul_const(&mut self, x: NodeRef, c: F) -> NodeRef {
        let shape = self.node_shape(x).to_vec();
        self.push(Op::MulConst(c), &[x], shape, None)
    }

    pub fn add_const(&mut self, x: NodeRef, c: F) -> NodeRef {
        let shape = self.node_shape(x).to_vec();
        self.push(Op::AddConst(c), &[x], shape, None)
    }

    pub fn concat_channels(&mut self, parts: &[NodeRef]) -> Result<NodeRef> {
        if parts.is_empty() {
            return Err(Error::Config("concat_channels: no inputs".into()));
        }
        let first = self.node_shape(parts[0]).to_vec();
        if first.len() != 4 {
            return Err(Error::Config("concat_channels expects rank-4 inputs".into()));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.node_shape(p);
            if s.len() != 4 || s[0] != first[0] || s[1] != first[1] || s[2] != first[2] {
                return Err(Error::Config(format!(
                    "concat_channels: incompatible shapes {:?} vs {:?}",
                    first, s
                )));
            }
            channels += s[3];
        }
        Ok(self.push(
            Op::ConcatChannels,
            parts,
            vec![first[0], first[1], first[2], channels],
            None,
        ))
    }

    /// Clamp to `[lo, hi]`; the gradient passes straight through.
    pub fn clip_ste(&mut self, x: NodeRef, lo: F, hi: F) -> NodeRef {
        let shape = self.node_shape(x).to_vec();
        self.push(Op::ClipSte { lo, hi }, &[x], shape, None)
    }

    pub fn gray_luma(&mut self, x: NodeRef, weights: [F; 3]) -> Result<NodeRef> {
        self.expect_rank(x, 4, "gray_luma input")?;
        let s = self.node_shape(x).to_vec();
        if s[3] != 3 {
            return Err(Error::Config("gray_luma expects 3 channels".into()));
        }
        Ok(self.push(Op::GrayLuma { weights }, &[x], s, None))
    }

    pub fn color_matrix(&mut self, x: NodeRef, mat: [[F; 3]; 3], offset: [F; 3]) -> Result<NodeRef> {
        self.expect_rank(x, 4, "color_matrix input")?;
        let s = self.node_shape(x).to_vec();
        if s[3] != 3 {
            return Err(Error::Config("color_matrix expects 3 channels".into()));
        }
        Ok(self.push(Op::ColorMatrix { mat, offset }, &[x], s, None))
    }

    pub fn dct8x8(&mut self, x: NodeRef, inverse: bool) -> Result<NodeRef> {
        self.expect_rank(x, 4, "dct8x8 input")?;
        let s = self.node_shape(x).to_vec();
        if s[1] % 8 != 0 || s[2] % 8 != 0 {
            return Err(Error::Config(format!(
                "dct8x8 needs spatial dims divisible by 8, got {:?}",
                s
            )));
        }
        Ok(self.push(Op::Dct8x8 { inverse }, &[x], s, None))
    }

    pub fn block_scale(&mut self, x: NodeRef, table: NodeRef, divide: bool) -> Result<NodeRef> {
        self.expect_rank(x, 4, "block_scale input")?;
        let xs = self.node_shape(x).to_vec();
        let ts = self.node_shape(table).to_vec();
        let ok = match ts.len() {
            3 => ts == [8, 8, xs[3]],
            4 => ts == [xs[0], 8, 8, xs[3]],
            _ => false,
        };
        if !ok {
            return Err(Error::Config(format!(
                "block_scale table must be [8,8,C] or [N,8,8,C], got {:?} for input {:?}",
                ts, xs
            )));
        }
        Ok(self.push(Op::BlockScale { divide }, &[x, table], xs, None))
    }

    pub fn jpeg_quant_soft(&mut self, x: NodeRef) -> NodeRef {
        let shape = self.node_shape(x).to_vec();
        self.push(Op::JpegQuantSoft, &[x], shape, None)
    }

    pub fn bce_with_logits(&mut self, logits: NodeRef, targets: NodeRef) -> Result<NodeRef> {
        if self.node_shape(logits) != self.node_shape(targets) {
            return Err(Error::Config(format!(
                "bce_with_logits shape mismatch: {:?} vs {:?}",
                self.node_shape(logits),
                self.node_shape(targets)
            )));
        }
        Ok(self.push(Op::BceWithLogits, &[logits, targets], vec![1], None))
    }

    pub fn reshape(&mut self, x: NodeRef, shape: &[usize]) -> Result<NodeRef> {
        let n: usize = shape.iter().product();
        if n != self.node_shape(x).iter().product::<usize>() {
            return Err(Error::Config(format!(
                "reshape element count mismatch: {:?} -> {:?}",
                self.node_shape(x),
                shape
            )));
        }
        Ok(self.push(Op::Reshape, &[x], shape.to_vec(), None))
    }

    /// Reflect-pads the spatial dims up to the next multiple of 8. Returns the
    /// input unchanged when already aligned.
    pub fn pad_reflect_to8(&mut self, x: NodeRef) -> Result<NodeRef> {
        self.expect_rank(x, 4, "pad_reflect input")?;
        let s = self.node_shape(x).to_vec();
        let out_h = s[1].div_ceil(8) * 8;
        let out_w = s[2].div_ceil(8) * 8;
        if out_h == s[1] && out_w == s[2] {
            return Ok(x);
        }
        if out_h - s[1] > s[1] || out_w - s[2] > s[2] {
            return Err(Error::Config(format!(
                "image {}x{} too small to reflect-pad to a multiple of 8",
                s[1], s[2]
            )));
        }
        Ok(self.push(
            Op::PadReflect { out_h, out_w },
            &[x],
            vec![s[0], out_h, out_w, s[3]],
            None,
        ))
    }

    pub fn crop_spatial(&mut self, x: NodeRef, h: usize, w: usize) -> Result<NodeRef> {
        self.expect_rank(x, 4, "crop_spatial input")?;
        let s = self.node_shape(x).to_vec();
        if h > s[1] || w > s[2] {
            return Err(Error::Config(format!(
                "crop_spatial {}x{} exceeds input {:?}",
                h, w, s
            )));
        }
        if h == s[1] && w == s[2] {
            return Ok(x);
        }
        Ok(self.push(Op::CropSpatial { h, w }, &[x], vec![s[0], h, w, s[3]], None))
    }
}

pub(crate) fn div_ceil(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// TF-style `SAME` padding: total pad to reach `ceil(in/stride)` outputs,
/// split with the smaller half at the beginning.
pub(crate) fn same_pad_begin(in_dim: usize, k: usize, stride: usize) -> usize {
    let out = div_ceil(in_dim, stride);
    let total = ((out - 1) * stride + k).saturating_sub(in_dim);
    total / 2
}

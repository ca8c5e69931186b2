//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records a forward computation as a flat list of nodes in
//! topological order; [`Tape::backward`] walks the list once in reverse and
//! accumulates gradients. Everything is double precision and strictly
//! sequential, so a fixed seed reproduces results bit for bit.
//!
//! The op set is the minimum the estimation pipeline needs: dense linear
//! algebra, 2-D convolution (im2col + gemm), bilinear upsampling, ROI align,
//! smooth elementwise nonlinearities, row softmax, and a few reductions.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix2, Ix3, IxDyn};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Geometry of a 2-D convolution (square stride/pad/dilation).
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec { stride: 1, pad: 1, dilation: 1 }
    }
}

/// Rectangular region on a feature map, in feature-cell coordinates.
#[derive(Debug, Clone, Copy)]
pub struct RoiRegion {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    /// mat (m,n) + row (n) broadcast over rows.
    AddRow(NodeId, NodeId),
    /// vec (n) -> (rows, n), every row a copy.
    TileRows(NodeId),
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, spec: ConvSpec },
    Upsample2x(NodeId),
    RoiAlign { map: NodeId, region: RoiRegion, out_h: usize, out_w: usize },
    Silu(NodeId),
    Tanh(NodeId),
    Abs(NodeId),
    Sqrt(NodeId),
    /// Elementwise smooth-L1 with unit transition point.
    Huber(NodeId),
    SoftmaxRows(NodeId),
    Sum(NodeId),
    MeanAxis(NodeId, usize),
    Concat(Vec<NodeId>, usize),
    SliceAxis { a: NodeId, axis: usize, start: usize, end: usize },
    Reshape(NodeId),
    Transpose2(NodeId),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`NodeId`].
pub struct Grads {
    g: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    /// Gradient of the backward root w.r.t. the given node, if it was reached.
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.g[id.0].as_ref()
    }
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Insert a value that does not require gradients.
    pub fn constant(&mut self, v: ArrayD<f64>) -> NodeId {
        self.push(v, Op::Leaf, false)
    }

    /// Insert a differentiable leaf (a parameter or a probed input).
    pub fn param(&mut self, v: ArrayD<f64>) -> NodeId {
        self.push(v, Op::Leaf, true)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a zero-dim or single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1, "scalar() on node with {} elements", v.len());
        *v.iter().next().expect("empty node value")
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let ng = self.needs(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * sigmoid(x));
        let ng = self.needs(a);
        self.push(v, Op::Silu(a), ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        let ng = self.needs(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        let ng = self.needs(a);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        let ng = self.needs(a);
        self.push(v, Op::Sqrt(a), ng)
    }

    pub fn huber(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(huber);
        let ng = self.needs(a);
        self.push(v, Op::Huber(a), ng)
    }

    // ---- linear algebra ----

    /// `a · b` for 2-D operands, with optional transposes.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        let v = match (ta, tb) {
            (false, false) => av.dot(&bv),
            (false, true) => av.dot(&bv.t()),
            (true, false) => av.t().dot(&bv),
            (true, true) => av.t().dot(&bv.t()),
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(v.into_dyn(), Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_t(a, b, false, false)
    }

    pub fn add_row(&mut self, mat: NodeId, row: NodeId) -> NodeId {
        let m = as2(&self.nodes[mat.0].value);
        let r = as1(&self.nodes[row.0].value);
        assert_eq!(m.ncols(), r.len(), "add_row: width mismatch");
        let v = &m + &r.view().insert_axis(Axis(0));
        let ng = self.needs(mat) || self.needs(row);
        self.push(v.into_dyn(), Op::AddRow(mat, row), ng)
    }

    pub fn tile_rows(&mut self, v: NodeId, rows: usize) -> NodeId {
        let r = as1(&self.nodes[v.0].value);
        let mut out = Array2::<f64>::zeros((rows, r.len()));
        for mut row in out.rows_mut() {
            row.assign(&r);
        }
        let ng = self.needs(v);
        self.push(out.into_dyn(), Op::TileRows(v), ng)
    }

    /// `x·Wᵀ + b` applied to a vector `[n]` or row-wise to a matrix `[m,n]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let vec_in = self.shape(x).len() == 1;
        let x2 = if vec_in {
            let n = self.shape(x)[0];
            self.reshape(x, &[1, n])
        } else {
            x
        };
        let mut y = self.matmul_t(x2, w, false, true);
        if let Some(b) = b {
            y = self.add_row(y, b);
        }
        if vec_in {
            let out = self.shape(y)[1];
            y = self.reshape(y, &[out]);
        }
        y
    }

    // ---- structure ----

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        assert!(!parts.is_empty(), "concat: no parts");
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(v, Op::Concat(parts.to_vec(), axis), ng)
    }

    pub fn slice_axis(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .slice_axis(Axis(axis), ndarray::Slice::from(start..end))
            .to_owned();
        let ng = self.needs(a);
        self.push(v, Op::SliceAxis { a, axis, start, end }, ng)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = reshape_owned(&self.nodes[a.0].value, shape);
        let ng = self.needs(a);
        self.push(v, Op::Reshape(a), ng)
    }

    /// Transpose of a 2-D node.
    pub fn transpose2(&mut self, a: NodeId) -> NodeId {
        let v = as2(&self.nodes[a.0].value).t().to_owned();
        let ng = self.needs(a);
        self.push(v.into_dyn(), Op::Transpose2(a), ng)
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum());
        let ng = self.needs(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        let v = self.nodes[a.0].value.mean_axis(Axis(axis)).expect("mean_axis: zero length");
        let ng = self.needs(a);
        self.push(v, Op::MeanAxis(a, axis), ng)
    }

    // ---- neural ops ----

    /// Row-wise softmax of a 2-D node.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let m = as2(&self.nodes[a.0].value);
        let mut out = m.to_owned();
        for mut row in out.rows_mut() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - mx).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let ng = self.needs(a);
        self.push(out.into_dyn(), Op::SoftmaxRows(a), ng)
    }

    /// 2-D convolution: x `(C_in,H,W)`, w `(C_out,C_in,kh,kw)`, b `(C_out)`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: ConvSpec) -> NodeId {
        let xv = as3(&self.nodes[x.0].value);
        let wv = self.nodes[w.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let bv = as1(&self.nodes[b.0].value);
        let (c_out, c_in, kh, kw) = wv.dim();
        assert_eq!(xv.dim().0, c_in, "conv2d: input channel mismatch");
        assert_eq!(bv.len(), c_out, "conv2d: bias length mismatch");
        let (h_out, w_out) = conv_out_size(xv.dim().1, xv.dim().2, kh, kw, spec);
        let cols = im2col(&xv, kh, kw, spec, h_out, w_out);
        let w2 = wv.into_shape_with_order((c_out, c_in * kh * kw)).unwrap();
        let mut out2 = w2.dot(&cols);
        for (mut row, &bias) in out2.rows_mut().into_iter().zip(bv.iter()) {
            row.mapv_inplace(|v| v + bias);
        }
        let out = out2.into_shape_with_order((c_out, h_out, w_out)).unwrap();
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out.into_dyn(), Op::Conv2d { x, w, b, spec }, ng)
    }

    /// Bilinear 2x spatial upsampling of a `(C,H,W)` node.
    pub fn upsample2x(&mut self, a: NodeId) -> NodeId {
        let xv = as3(&self.nodes[a.0].value);
        let (c, h, w) = xv.dim();
        let ty = up_taps(h);
        let tx = up_taps(w);
        let mut out = Array3::<f64>::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let v00 = xv[(ci, y0, x0)];
                    let v01 = xv[(ci, y0, x1)];
                    let v10 = xv[(ci, y1, x0)];
                    let v11 = xv[(ci, y1, x1)];
                    out[(ci, oy, ox)] = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01)
                        + wy * ((1.0 - wx) * v10 + wx * v11);
                }
            }
        }
        let ng = self.needs(a);
        self.push(out.into_dyn(), Op::Upsample2x(a), ng)
    }

    /// Average-of-4-bilinear-samples ROI pooling over `region` of a `(C,H,W)` map.
    ///
    /// Gradients flow into the map; the region itself is not differentiated.
    pub fn roi_align(&mut self, map: NodeId, region: RoiRegion, out: (usize, usize)) -> NodeId {
        let mv = as3(&self.nodes[map.0].value);
        let (c, _, _) = mv.dim();
        let (oh, ow) = out;
        let mut pooled = Array3::<f64>::zeros((c, oh, ow));
        for_each_roi_tap(&region, oh, ow, mv.dim().1, mv.dim().2, |r, cc, taps| {
            for ci in 0..c {
                let mut acc = 0.0;
                for &(yi, xi, wt) in taps {
                    acc += wt * mv[(ci, yi, xi)];
                }
                pooled[(ci, r, cc)] = acc;
            }
        });
        let ng = self.needs(map);
        self.push(pooled.into_dyn(), Op::RoiAlign { map, region, out_h: oh, out_w: ow }, ng)
    }

    // ---- backward ----

    /// Accumulate gradients of a scalar `root` node into every reachable
    /// gradient-requiring node.
    pub fn backward(&self, root: NodeId) -> Grads {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut g: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), 1.0));
        for i in (0..=root.0).rev() {
            if g[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let gi = g[i].take().unwrap();
            self.backprop_node(i, &gi, &mut g);
            g[i] = Some(gi);
        }
        Grads { g }
    }

    fn backprop_node(&self, i: usize, gi: &ArrayD<f64>, g: &mut [Option<ArrayD<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(g, *a, gi.clone());
                self.acc(g, *b, gi.clone());
            }
            Op::Sub(a, b) => {
                self.acc(g, *a, gi.clone());
                self.acc(g, *b, gi.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.acc(g, *a, gi * &self.nodes[b.0].value);
                }
                if self.needs(*b) {
                    self.acc(g, *b, gi * &self.nodes[a.0].value);
                }
            }
            Op::Scale(a, c) => self.acc(g, *a, gi.mapv(|x| x * c)),
            Op::AddScalar(a) => self.acc(g, *a, gi.clone()),
            Op::AddRow(mat, row) => {
                if self.needs(*mat) {
                    self.acc(g, *mat, gi.clone());
                }
                if self.needs(*row) {
                    let gm = as2(gi);
                    self.acc(g, *row, gm.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::TileRows(v) => {
                let gm = as2(gi);
                self.acc(g, *v, gm.sum_axis(Axis(0)).into_dyn());
            }
            Op::MatMul { a, b, ta, tb } => {
                let gv = as2(gi);
                let av = as2(&self.nodes[a.0].value);
                let bv = as2(&self.nodes[b.0].value);
                if self.needs(*a) {
                    let da = match (ta, tb) {
                        (false, false) => gv.dot(&bv.t()),
                        (false, true) => gv.dot(&bv),
                        (true, false) => bv.dot(&gv.t()),
                        (true, true) => bv.t().dot(&gv.t()),
                    };
                    self.acc(g, *a, da.into_dyn());
                }
                if self.needs(*b) {
                    let db = match (ta, tb) {
                        (false, false) => av.t().dot(&gv),
                        (false, true) => gv.t().dot(&av),
                        (true, false) => av.dot(&gv),
                        (true, true) => gv.t().dot(&av.t()),
                    };
                    self.acc(g, *b, db.into_dyn());
                }
            }
            Op::Conv2d { x, w, b, spec } => self.backprop_conv(gi, g, *x, *w, *b, *spec),
            Op::Upsample2x(a) => {
                let go = gi.view().into_dimensionality::<Ix3>().unwrap();
                let (c, h2, w2) = go.dim();
                let (h, w) = (h2 / 2, w2 / 2);
                let ty = up_taps(h);
                let tx = up_taps(w);
                let mut gx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                            let gv = go[(ci, oy, ox)];
                            gx[(ci, y0, x0)] += (1.0 - wy) * (1.0 - wx) * gv;
                            gx[(ci, y0, x1)] += (1.0 - wy) * wx * gv;
                            gx[(ci, y1, x0)] += wy * (1.0 - wx) * gv;
                            gx[(ci, y1, x1)] += wy * wx * gv;
                        }
                    }
                }
                self.acc(g, *a, gx.into_dyn());
            }
            Op::RoiAlign { map, region, out_h, out_w } => {
                let mv = as3(&self.nodes[map.0].value);
                let (c, h, w) = mv.dim();
                let go = gi.view().into_dimensionality::<Ix3>().unwrap();
                let mut gm = Array3::<f64>::zeros((c, h, w));
                for_each_roi_tap(region, *out_h, *out_w, h, w, |r, cc, taps| {
                    for ci in 0..c {
                        let gv = go[(ci, r, cc)];
                        for &(yi, xi, wt) in taps {
                            gm[(ci, yi, xi)] += wt * gv;
                        }
                    }
                });
                self.acc(g, *map, gm.into_dyn());
            }
            Op::Silu(a) => {
                let d = self.nodes[a.0].value.mapv(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                self.acc(g, *a, gi * &d);
            }
            Op::Tanh(a) => {
                let d = self.nodes[i].value.mapv(|y| 1.0 - y * y);
                self.acc(g, *a, gi * &d);
            }
            Op::Abs(a) => {
                let d = self.nodes[a.0].value.mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.acc(g, *a, gi * &d);
            }
            Op::Sqrt(a) => {
                let d = self.nodes[i].value.mapv(|y| 0.5 / y);
                self.acc(g, *a, gi * &d);
            }
            Op::Huber(a) => {
                let d = self.nodes[a.0].value.mapv(|x| x.clamp(-1.0, 1.0));
                self.acc(g, *a, gi * &d);
            }
            Op::SoftmaxRows(a) => {
                let s = as2(&self.nodes[i].value);
                let gv = as2(gi);
                let mut out = Array2::<f64>::zeros(s.raw_dim());
                for r in 0..s.nrows() {
                    let srow = s.row(r);
                    let grow = gv.row(r);
                    let dot = srow.dot(&grow);
                    for c in 0..s.ncols() {
                        out[(r, c)] = srow[c] * (grow[c] - dot);
                    }
                }
                self.acc(g, *a, out.into_dyn());
            }
            Op::Sum(a) => {
                let gv = gi.iter().next().copied().unwrap();
                let shape = self.nodes[a.0].value.raw_dim();
                self.acc(g, *a, ArrayD::from_elem(shape, gv));
            }
            Op::MeanAxis(a, axis) => {
                let shape = self.nodes[a.0].value.raw_dim();
                let n = shape[*axis] as f64;
                let expanded = gi.view().insert_axis(Axis(*axis));
                let mut gx = ArrayD::<f64>::zeros(shape);
                gx += &expanded;
                gx.mapv_inplace(|x| x / n);
                self.acc(g, *a, gx);
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis];
                    if self.needs(*p) {
                        let gp = gi
                            .slice_axis(Axis(*axis), ndarray::Slice::from(start..start + len))
                            .to_owned();
                        self.acc(g, *p, gp);
                    }
                    start += len;
                }
            }
            Op::SliceAxis { a, axis, start, end } => {
                let mut gx = ArrayD::<f64>::zeros(self.nodes[a.0].value.raw_dim());
                gx.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*end))
                    .assign(&gi.view());
                self.acc(g, *a, gx);
            }
            Op::Reshape(a) => {
                let gx = reshape_owned(gi, self.nodes[a.0].value.shape());
                self.acc(g, *a, gx);
            }
            Op::Transpose2(a) => {
                let gx = as2(gi).t().to_owned();
                self.acc(g, *a, gx.into_dyn());
            }
        }
    }

    fn backprop_conv(
        &self,
        gi: &ArrayD<f64>,
        g: &mut [Option<ArrayD<f64>>],
        x: NodeId,
        w: NodeId,
        b: NodeId,
        spec: ConvSpec,
    ) {
        let xv = as3(&self.nodes[x.0].value);
        let wv = self.nodes[w.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let (c_out, c_in, kh, kw) = wv.dim();
        let go = gi.view().into_dimensionality::<Ix3>().unwrap();
        let (_, h_out, w_out) = go.dim();
        let g2 = go.into_shape_with_order((c_out, h_out * w_out)).unwrap();
        if self.needs(b) {
            self.acc(g, b, g2.sum_axis(Axis(1)).into_dyn());
        }
        let w2 = wv.into_shape_with_order((c_out, c_in * kh * kw)).unwrap();
        if self.needs(w) {
            let cols = im2col(&xv, kh, kw, spec, h_out, w_out);
            let gw = g2.dot(&cols.t());
            self.acc(g, w, gw.into_shape_with_order((c_out, c_in, kh, kw)).unwrap().into_dyn());
        }
        if self.needs(x) {
            let gcols = w2.t().dot(&g2);
            let gx = col2im(&gcols, xv.dim(), kh, kw, spec, h_out, w_out);
            self.acc(g, x, gx.into_dyn());
        }
    }

    fn acc(&self, g: &mut [Option<ArrayD<f64>>], id: NodeId, contribution: ArrayD<f64>) {
        if !self.needs(id) {
            return;
        }
        match &mut g[id.0] {
            Some(existing) => *existing += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn huber(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

fn as1<'a>(v: &'a ArrayD<f64>) -> ndarray::ArrayView1<'a, f64> {
    v.view().into_dimensionality().expect("expected 1-D node")
}

fn as2<'a>(v: &'a ArrayD<f64>) -> ndarray::ArrayView2<'a, f64> {
    v.view().into_dimensionality::<Ix2>().expect("expected 2-D node")
}

fn as3<'a>(v: &'a ArrayD<f64>) -> ndarray::ArrayView3<'a, f64> {
    v.view().into_dimensionality::<Ix3>().expect("expected 3-D node")
}

fn reshape_owned(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let flat: Array1<f64> = a.iter().cloned().collect();
    flat.into_shape_with_order(IxDyn(shape)).expect("reshape: element count mismatch")
}

pub(crate) fn conv_out_size(h: usize, w: usize, kh: usize, kw: usize, spec: ConvSpec) -> (usize, usize) {
    let eff_kh = spec.dilation * (kh - 1) + 1;
    let eff_kw = spec.dilation * (kw - 1) + 1;
    assert!(h + 2 * spec.pad >= eff_kh && w + 2 * spec.pad >= eff_kw, "conv2d: kernel larger than padded input");
    (
        (h + 2 * spec.pad - eff_kh) / spec.stride + 1,
        (w + 2 * spec.pad - eff_kw) / spec.stride + 1,
    )
}

fn im2col(
    x: &ndarray::ArrayView3<f64>,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    h_out: usize,
    w_out: usize,
) -> Array2<f64> {
    let (c_in, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((c_in * kh * kw, h_out * w_out));
    for c in 0..c_in {
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                let mut dst = cols.row_mut(row);
                for oy in 0..h_out {
                    let y = (oy * spec.stride + i * spec.dilation) as isize - spec.pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let xx = (ox * spec.stride + j * spec.dilation) as isize - spec.pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        dst[oy * w_out + ox] = x[(c, y as usize, xx as usize)];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    gcols: &Array2<f64>,
    dim: (usize, usize, usize),
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    h_out: usize,
    w_out: usize,
) -> Array3<f64> {
    let (c_in, h, w) = dim;
    let mut gx = Array3::<f64>::zeros((c_in, h, w));
    for c in 0..c_in {
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                let src = gcols.row(row);
                for oy in 0..h_out {
                    let y = (oy * spec.stride + i * spec.dilation) as isize - spec.pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let xx = (ox * spec.stride + j * spec.dilation) as isize - spec.pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        gx[(c, y as usize, xx as usize)] += src[oy * w_out + ox];
                    }
                }
            }
        }
    }
    gx
}

/// Bilinear taps for 2x upsampling along an axis of length `n`: output index
/// `o` samples input coordinate `(o + 0.5)/2 - 0.5`.
fn up_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let i0 = src.floor();
            let frac = src - i0;
            let a = (i0 as isize).clamp(0, n as isize - 1) as usize;
            let b = (i0 as isize + 1).clamp(0, n as isize - 1) as usize;
            (a, b, frac)
        })
        .collect()
}

/// Visit the 4 bilinear taps of each of the 4 sample points of every output
/// cell. `f(row, col, taps)` receives `(y_index, x_index, weight)` triples.
fn for_each_roi_tap<F: FnMut(usize, usize, &[(usize, usize, f64)])>(
    region: &RoiRegion,
    out_h: usize,
    out_w: usize,
    h: usize,
    w: usize,
    mut f: F,
) {
    let cell_h = (region.y1 - region.y0) / out_h as f64;
    let cell_w = (region.x1 - region.x0) / out_w as f64;
    let mut taps: Vec<(usize, usize, f64)> = Vec::with_capacity(16);
    for r in 0..out_h {
        for c in 0..out_w {
            taps.clear();
            for sy in 0..2 {
                for sx in 0..2 {
                    let y = region.y0 + (r as f64 + 0.25 + 0.5 * sy as f64) * cell_h;
                    let x = region.x0 + (c as f64 + 0.25 + 0.5 * sx as f64) * cell_w;
                    for (yi, xi, wt) in bilinear_taps(y, x, h, w) {
                        taps.push((yi, xi, 0.25 * wt));
                    }
                }
            }
            f(r, c, &taps);
        }
    }
}

/// Bilinear taps of one continuous sample at `(y, x)` over an `h`x`w` grid of
/// cell-centered values (cell `i` is centered at `i + 0.5`). Coordinates
/// outside the grid clamp to the border cells.
pub(crate) fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [(usize, usize, f64); 4] {
    let ty = y - 0.5;
    let tx = x - 0.5;
    let fy = ty.floor();
    let fx = tx.floor();
    let wy = ty - fy;
    let wx = tx - fx;
    let y0 = (fy as isize).clamp(0, h as isize - 1) as usize;
    let y1 = (fy as isize + 1).clamp(0, h as isize - 1) as usize;
    let x0 = (fx as isize).clamp(0, w as isize - 1) as usize;
    let x1 = (fx as isize + 1).clamp(0, w as isize - 1) as usize;
    [
        (y0, x0, (1.0 - wy) * (1.0 - wx)),
        (y0, x1, (1.0 - wy) * wx),
        (y1, x0, wy * (1.0 - wx)),
        (y1, x1, wy * wx),
    ]
}

/// Evaluate a single bilinear sample of one channel (used by oracles/tests).
#[cfg(test)]
pub(crate) fn bilinear_sample(plane: &ndarray::ArrayView2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = plane.dim();
    bilinear_taps(y, x, h, w).iter().map(|&(yi, xi, wt)| wt * plane[(yi, xi)]).sum()
}

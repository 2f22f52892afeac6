//! Reverse-mode automatic differentiation over dynamic-rank `f64` arrays.
//!
//! A [`Tape`] records a computation as a flat list of nodes; [`Tape::backward`]
//! walks the list in reverse and accumulates gradients for every node. All
//! layer code in this crate builds on the op set here, so a single gradient
//! path serves both training and the finite-difference verification harness.
//!
//! Ops are deliberately coarse (whole-array matmul, row softmax, fused layer
//! norm) so a full forward pass over a mini-batch stays at a few hundred
//! nodes regardless of batch size.

use ndarray::{ArrayD, Axis, Ix1, Ix2, IxDyn};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct VarId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    /// Input, parameter, or constant. Constants never receive gradients.
    Leaf { constant: bool },
    /// Numpy-style broadcast add.
    AddBc,
    /// Numpy-style broadcast elementwise multiply.
    MulBc,
    /// 2-D matrix product.
    MatMul2,
    /// Batched matrix product over a shared leading axis: `[B,m,k] x [B,k,n]`.
    BatchMatMul,
    /// Transpose of the last two axes.
    SwapLast2,
    /// Multiply by a scalar constant.
    Scale(f64),
    Elu,
    LeakyRelu(f64),
    Sigmoid,
    /// Softmax over the last axis.
    SoftmaxLast,
    /// Layer normalization over the last axis; parents are (x, gain, offset).
    LayerNormLast { eps: f64 },
    /// Sum of all elements, shape `[1]`.
    SumAll,
    /// Sum over the last axis.
    SumLast,
    Reshape { from: Vec<usize> },
    /// Concatenation along the last axis; `widths` are the parents' last-axis sizes.
    ConcatLast { widths: Vec<usize> },
    /// Slice `[start, end)` of the first axis.
    SliceAxis0 { start: usize, end: usize },
}

struct Node {
    value: ArrayD<f64>,
    parents: Vec<VarId>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`VarId`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `id`. Zero-filled when the
    /// node does not influence the root.
    pub fn get(&self, id: VarId, tape: &Tape) -> ArrayD<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(tape.nodes[id.0].value.raw_dim()),
        }
    }

    pub fn get_opt(&self, id: VarId) -> Option<&ArrayD<f64>> {
        self.grads[id.0].as_ref()
    }
}

/// Records a computation for later reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "shapes {:?} and {:?} do not broadcast",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum `grad` down to `shape`, undoing a numpy-style broadcast.
fn reduce_to_shape(mut grad: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    while grad.ndim() > shape.len() {
        grad = grad.sum_axis(Axis(0));
    }
    for (axis, (&g, &s)) in grad.shape().to_vec().iter().zip(shape).enumerate() {
        if g != s {
            debug_assert_eq!(s, 1);
            grad = grad.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    grad
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-D array")
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

    pub fn value(&self, id: VarId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: ArrayD<f64>, parents: Vec<VarId>, op: Op) -> VarId {
        self.nodes.push(Node { value, parents, op });
        VarId(self.nodes.len() - 1)
    }

    /// Differentiable input or parameter.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> VarId {
        self.push(value, vec![], Op::Leaf { constant: false })
    }

    /// Non-differentiable input (masks, noise, targets).
    pub fn constant(&mut self, value: ArrayD<f64>) -> VarId {
        self.push(value, vec![], Op::Leaf { constant: true })
    }

    /// Elementwise combine with numpy broadcasting; fast paths for equal
    /// shapes and for a 1-D rhs spanning the last axis (bias add, row scale).
    fn binary_bc(&mut self, a: VarId, b: VarId, op: Op, f: impl Fn(f64, f64) -> f64) -> VarId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = if sa == sb {
            let mut out = self.nodes[a.0].value.to_owned();
            ndarray::Zip::from(&mut out)
                .and(&self.nodes[b.0].value)
                .for_each(|o, &x| *o = f(*o, x));
            out
        } else if sb.len() == 1 && sa.last() == sb.first() && !sa.is_empty() {
            let width = sb[0];
            let mut out = self.nodes[a.0].value.as_standard_layout().into_owned();
            let bvals = self.nodes[b.0].value.as_standard_layout().into_owned();
            let bs = bvals.as_slice().unwrap();
            for row in out.as_slice_mut().unwrap().chunks_exact_mut(width) {
                for (o, &x) in row.iter_mut().zip(bs) {
                    *o = f(*o, x);
                }
            }
            out
        } else {
            let shape = broadcast_shape(&sa, &sb);
            let dim = IxDyn(&shape);
            let av = self.nodes[a.0].value.broadcast(dim.clone()).expect("broadcast a");
            let bv = self.nodes[b.0].value.broadcast(dim).expect("broadcast b");
            let mut out = av.to_owned();
            ndarray::Zip::from(&mut out).and(&bv).for_each(|o, &x| *o = f(*o, x));
            out
        };
        self.push(out, vec![a, b], op)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary_bc(a, b, Op::AddBc, |x, y| x + y)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary_bc(a, b, Op::MulBc, |x, y| x * y)
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let out = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(out, vec![a], Op::Scale(c))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (av, bv) = (as2(&self.nodes[a.0].value), as2(&self.nodes[b.0].value));
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let out = av.dot(&bv).into_dyn();
        self.push(out, vec![a, b], Op::MatMul2)
    }

    /// `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn batch_matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 3, "batch_matmul lhs must be 3-D");
        assert_eq!(sb.len(), 3, "batch_matmul rhs must be 3-D");
        assert_eq!(sa[0], sb[0], "batch dims");
        assert_eq!(sa[2], sb[1], "inner dims");
        let (batches, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = ArrayD::zeros(IxDyn(&[batches, m, n]));
        {
            // the batches are small; flat loops beat per-batch gemm dispatch
            let a_std = self.nodes[a.0].value.as_standard_layout();
            let b_std = self.nodes[b.0].value.as_standard_layout();
            let av = a_std.as_slice().expect("standard layout");
            let bv = b_std.as_slice().expect("standard layout");
            let ov = out.as_slice_mut().unwrap();
            for i in 0..batches {
                let ab = &av[i * m * k..(i + 1) * m * k];
                let bb = &bv[i * k * n..(i + 1) * k * n];
                let ob = &mut ov[i * m * n..(i + 1) * m * n];
                for r in 0..m {
                    let orow = &mut ob[r * n..(r + 1) * n];
                    for p in 0..k {
                        let coeff = ab[r * k + p];
                        let brow = &bb[p * n..(p + 1) * n];
                        for (o, &x) in orow.iter_mut().zip(brow) {
                            *o += coeff * x;
                        }
                    }
                }
            }
        }
        self.push(out, vec![a, b], Op::BatchMatMul)
    }

    pub fn swap_last2(&mut self, a: VarId) -> VarId {
        let nd = self.nodes[a.0].value.ndim();
        assert!(nd >= 2);
        let mut v = self.nodes[a.0].value.view();
        v.swap_axes(nd - 2, nd - 1);
        let out = v.as_standard_layout().into_owned();
        self.push(out, vec![a], Op::SwapLast2)
    }

    pub fn elu(&mut self, a: VarId) -> VarId {
        let out = self.nodes[a.0].value.mapv(|x| if x >= 0.0 { x } else { x.exp() - 1.0 });
        self.push(out, vec![a], Op::Elu)
    }

    pub fn leaky_relu(&mut self, a: VarId, slope: f64) -> VarId {
        let out = self.nodes[a.0].value.mapv(|x| if x >= 0.0 { x } else { slope * x });
        self.push(out, vec![a], Op::LeakyRelu(slope))
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let out = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(out, vec![a], Op::Sigmoid)
    }

    /// Row softmax over the last axis, stable under `-inf` masking.
    pub fn softmax_last(&mut self, a: VarId) -> VarId {
        let mut out = self.nodes[a.0].value.as_standard_layout().into_owned();
        let width = *out.shape().last().expect("non-scalar");
        for row in out.as_slice_mut().unwrap().chunks_exact_mut(width) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            debug_assert!(sum > 0.0, "softmax over a fully masked row of width {width}");
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        self.push(out, vec![a], Op::SoftmaxLast)
    }

    /// Layer norm over the last axis: `(x - mean) / sqrt(var + eps) * gain + offset`.
    /// `gain` and `offset` have the length of the last axis.
    pub fn layer_norm_last(&mut self, x: VarId, gain: VarId, offset: VarId, eps: f64) -> VarId {
        let width = *self.shape(x).last().expect("non-scalar");
        assert_eq!(self.shape(gain), [width], "layer norm gain width");
        assert_eq!(self.shape(offset), [width], "layer norm offset width");
        let g = self.nodes[gain.0].value.clone().into_dimensionality::<Ix1>().unwrap();
        let b = self.nodes[offset.0].value.clone().into_dimensionality::<Ix1>().unwrap();
        let (gs, bs) = (g.as_slice().unwrap(), b.as_slice().unwrap());
        let mut out = self.nodes[x.0].value.as_standard_layout().into_owned();
        let n = width as f64;
        for row in out.as_slice_mut().unwrap().chunks_exact_mut(width) {
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * gs[i] + bs[i];
            }
        }
        self.push(out, vec![x, gain, offset], Op::LayerNormLast { eps })
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let s = self.nodes[a.0].value.sum();
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), vec![a], Op::SumAll)
    }

    pub fn sum_last(&mut self, a: VarId) -> VarId {
        let nd = self.nodes[a.0].value.ndim();
        assert!(nd >= 1);
        let out = self.nodes[a.0].value.sum_axis(Axis(nd - 1));
        self.push(out, vec![a], Op::SumLast)
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> VarId {
        let from = self.shape(a).to_vec();
        let out = self.nodes[a.0]
            .value
            .clone()
            .into_shape_clone(IxDyn(shape))
            .expect("reshape size mismatch");
        self.push(out, vec![a], Op::Reshape { from })
    }

    pub fn concat_last(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let nd = views[0].ndim();
        let widths: Vec<usize> = views.iter().map(|v| v.shape()[nd - 1]).collect();
        let out = ndarray::concatenate(Axis(nd - 1), &views).expect("concat shapes");
        self.push(out, parts.to_vec(), Op::ConcatLast { widths })
    }

    pub fn slice_axis0(&mut self, a: VarId, start: usize, end: usize) -> VarId {
        let out = self.nodes[a.0]
            .value
            .slice_axis(Axis(0), ndarray::Slice::from(start..end))
            .to_owned();
        self.push(out, vec![a], Op::SliceAxis0 { start, end })
    }

    /// Reverse pass from `root`, seeded with ones (gradient of `sum(root)`).
    pub fn backward(&self, root: VarId) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));

        for id in (0..=root.0).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf { .. } => {
                    grads[id] = Some(gout);
                    continue;
                }
                Op::AddBc => {
                    for (slot, p) in node.parents.iter().enumerate() {
                        let g = reduce_to_shape(gout.clone(), self.shape(*p));
                        self.accumulate(&mut grads, *p, g);
                        let _ = slot;
                    }
                }
                Op::MulBc => {
                    let (a, b) = (node.parents[0], node.parents[1]);
                    let dim = IxDyn(gout.shape());
                    let av = self.nodes[a.0].value.broadcast(dim.clone()).unwrap().to_owned();
                    let bv = self.nodes[b.0].value.broadcast(dim).unwrap().to_owned();
                    self.accumulate(&mut grads, a, reduce_to_shape(&gout * &bv, self.shape(a)));
                    self.accumulate(&mut grads, b, reduce_to_shape(&gout * &av, self.shape(b)));
                }
                Op::MatMul2 => {
                    let (a, b) = (node.parents[0], node.parents[1]);
                    let go = as2(&gout);
                    let da = go.dot(&as2(&self.nodes[b.0].value).t()).into_dyn();
                    let db = as2(&self.nodes[a.0].value).t().dot(&go).into_dyn();
                    self.accumulate(&mut grads, a, da);
                    self.accumulate(&mut grads, b, db);
                }
                Op::BatchMatMul => {
                    let (a, b) = (node.parents[0], node.parents[1]);
                    let (batches, m, k) = {
                        let s = self.shape(a);
                        (s[0], s[1], s[2])
                    };
                    let n = self.shape(b)[2];
                    let mut da = ArrayD::zeros(self.nodes[a.0].value.raw_dim());
                    let mut db = ArrayD::zeros(self.nodes[b.0].value.raw_dim());
                    {
                        let a_std = self.nodes[a.0].value.as_standard_layout();
                        let b_std = self.nodes[b.0].value.as_standard_layout();
                        let g_std = gout.as_standard_layout();
                        let av = a_std.as_slice().expect("standard layout");
                        let bv = b_std.as_slice().expect("standard layout");
                        let gv = g_std.as_slice().expect("standard layout");
                        let dav = da.as_slice_mut().unwrap();
                        let dbv = db.as_slice_mut().unwrap();
                        for i in 0..batches {
                            let ab = &av[i * m * k..(i + 1) * m * k];
                            let bb = &bv[i * k * n..(i + 1) * k * n];
                            let gb = &gv[i * m * n..(i + 1) * m * n];
                            let dab = &mut dav[i * m * k..(i + 1) * m * k];
                            let dbb = &mut dbv[i * k * n..(i + 1) * k * n];
                            for r in 0..m {
                                let grow = &gb[r * n..(r + 1) * n];
                                for p in 0..k {
                                    // dA = dC . B^T
                                    let brow = &bb[p * n..(p + 1) * n];
                                    let mut acc = 0.0;
                                    for (g, x) in grow.iter().zip(brow) {
                                        acc += g * x;
                                    }
                                    dab[r * k + p] = acc;
                                    // dB = A^T . dC
                                    let coeff = ab[r * k + p];
                                    let dbrow = &mut dbb[p * n..(p + 1) * n];
                                    for (d, &g) in dbrow.iter_mut().zip(grow) {
                                        *d += coeff * g;
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(&mut grads, a, da);
                    self.accumulate(&mut grads, b, db);
                }
                Op::SwapLast2 => {
                    let nd = gout.ndim();
                    let mut v = gout.view();
                    v.swap_axes(nd - 2, nd - 1);
                    self.accumulate(&mut grads, node.parents[0], v.to_owned());
                }
                Op::Scale(c) => {
                    self.accumulate(&mut grads, node.parents[0], gout.mapv(|g| g * c));
                }
                Op::Elu => {
                    let x = &self.nodes[node.parents[0].0].value;
                    let mut g = gout;
                    ndarray::Zip::from(&mut g).and(x).for_each(|g, &x| {
                        *g *= if x >= 0.0 { 1.0 } else { x.exp() };
                    });
                    self.accumulate(&mut grads, node.parents[0], g);
                }
                Op::LeakyRelu(slope) => {
                    let x = &self.nodes[node.parents[0].0].value;
                    let slope = *slope;
                    let mut g = gout;
                    ndarray::Zip::from(&mut g).and(x).for_each(|g, &x| {
                        *g *= if x >= 0.0 { 1.0 } else { slope };
                    });
                    self.accumulate(&mut grads, node.parents[0], g);
                }
                Op::Sigmoid => {
                    let y = &node.value;
                    let mut g = gout;
                    ndarray::Zip::from(&mut g).and(y).for_each(|g, &y| *g *= y * (1.0 - y));
                    self.accumulate(&mut grads, node.parents[0], g);
                }
                Op::SoftmaxLast => {
                    let y = &node.value;
                    let width = *y.shape().last().unwrap();
                    let ys = y.as_slice().expect("softmax output is standard layout");
                    let mut g = gout.as_standard_layout().into_owned();
                    for (grow, yrow) in g
                        .as_slice_mut()
                        .unwrap()
                        .chunks_exact_mut(width)
                        .zip(ys.chunks_exact(width))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for (gv, yv) in grow.iter_mut().zip(yrow) {
                            *gv = (*gv - dot) * yv;
                        }
                    }
                    self.accumulate(&mut grads, node.parents[0], g);
                }
                Op::LayerNormLast { eps } => {
                    let (x, gain, offset) = (node.parents[0], node.parents[1], node.parents[2]);
                    let x_std = self.nodes[x.0].value.as_standard_layout();
                    let xs = x_std.as_slice().unwrap();
                    let g_std = gout.as_standard_layout();
                    let gouts = g_std.as_slice().unwrap();
                    let gv = self.nodes[gain.0].value.clone().into_dimensionality::<Ix1>().unwrap();
                    let gvs = gv.as_slice().unwrap();
                    let width = *self.nodes[x.0].value.shape().last().unwrap();
                    let n = width as f64;
                    let mut dx = ArrayD::zeros(IxDyn(self.nodes[x.0].value.shape()));
                    let mut dgain = vec![0.0f64; width];
                    let mut doffset = vec![0.0f64; width];
                    let mut xhat = vec![0.0f64; width];
                    let mut dxhat = vec![0.0f64; width];
                    for ((xrow, grow), dxrow) in xs
                        .chunks_exact(width)
                        .zip(gouts.chunks_exact(width))
                        .zip(dx.as_slice_mut().unwrap().chunks_exact_mut(width))
                    {
                        let mean = xrow.iter().sum::<f64>() / n;
                        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for i in 0..width {
                            xhat[i] = (xrow[i] - mean) * inv;
                            dxhat[i] = grow[i] * gvs[i];
                            mean_dxhat += dxhat[i];
                            mean_dxhat_xhat += dxhat[i] * xhat[i];
                        }
                        mean_dxhat /= n;
                        mean_dxhat_xhat /= n;
                        for i in 0..width {
                            dxrow[i] = inv * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                            dgain[i] += grow[i] * xhat[i];
                            doffset[i] += grow[i];
                        }
                    }
                    self.accumulate(&mut grads, x, dx);
                    self.accumulate(
                        &mut grads,
                        gain,
                        ArrayD::from_shape_vec(IxDyn(&[width]), dgain).unwrap(),
                    );
                    self.accumulate(
                        &mut grads,
                        offset,
                        ArrayD::from_shape_vec(IxDyn(&[width]), doffset).unwrap(),
                    );
                }
                Op::SumAll => {
                    let s = gout[[0]];
                    let p = node.parents[0];
                    self.accumulate(
                        &mut grads,
                        p,
                        ArrayD::from_elem(self.nodes[p.0].value.raw_dim(), s),
                    );
                }
                Op::SumLast => {
                    let p = node.parents[0];
                    let shape = self.shape(p).to_vec();
                    let expanded = gout.insert_axis(Axis(shape.len() - 1));
                    let g = expanded.broadcast(IxDyn(&shape)).unwrap().to_owned();
                    self.accumulate(&mut grads, p, g);
                }
                Op::Reshape { from } => {
                    let g = gout.into_shape_clone(IxDyn(from)).unwrap();
                    self.accumulate(&mut grads, node.parents[0], g);
                }
                Op::ConcatLast { widths } => {
                    let nd = gout.ndim();
                    let mut offset = 0usize;
                    for (p, w) in node.parents.iter().zip(widths) {
                        let g = gout
                            .slice_axis(Axis(nd - 1), ndarray::Slice::from(offset..offset + w))
                            .to_owned();
                        self.accumulate(&mut grads, *p, g);
                        offset += w;
                    }
                }
                Op::SliceAxis0 { start, end } => {
                    let p = node.parents[0];
                    let mut g = ArrayD::zeros(self.nodes[p.0].value.raw_dim());
                    g.slice_axis_mut(Axis(0), ndarray::Slice::from(*start..*end))
                        .assign(&gout);
                    self.accumulate(&mut grads, p, g);
                }
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<ArrayD<f64>>], id: VarId, g: ArrayD<f64>) {
        if let Op::Leaf { constant: true } = self.nodes[id.0].op {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }
}

/// Central finite differences of a scalar function, step `h` per coordinate.
pub fn finite_difference(f: &mut dyn FnMut(&[f64]) -> f64, x0: &[f64], h: f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(x0.len());
    for i in 0..x0.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps 0-vs-0 comparisons sane.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every forward pass builds a fresh [`Tape`]; [`Tape::backward`] walks it in
//! reverse and accumulates gradients for every node. The op set is exactly
//! what the encoder/decoder/discriminator stacks and the loss terms need —
//! nothing speculative. All arithmetic is `f64` and strictly sequential, so a
//! given tape replays bit-identically.

mod conv;

pub use conv::{conv2d_backward_input, conv2d_backward_weight, conv2d_forward};

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Abs(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    /// x: (B,C,H,W) + bias (C), broadcast over batch and space.
    AddBiasChan(Var, Var),
    /// x: (B,F) + bias (F).
    AddBiasRow(Var, Var),
    /// x: (B,C,H,W) scaled per sample and channel by s: (B,C).
    ScaleChannels(Var, Var),
    /// x: (B,C,H,W) times a constant 0/1 channel mask (C).
    MulChanConst(Var, Vec<f64>),
    /// Stride-1 convolution, square kernel, symmetric zero padding k/2.
    Conv { x: Var, w: Var, kernel: usize },
    /// 2x2 mean pooling, stride 2.
    AvgPool2(Var),
    /// 2x nearest-neighbour upsampling.
    UpNearest2(Var),
    /// (B,C,H,W) -> (B,C) spatial mean.
    GlobalAvgPool(Var),
    /// x: (B,Fin) times w: (Fout,Fin) -> (B,Fout).
    Linear(Var, Var),
    /// Mean over every element -> 0-d scalar.
    MeanAll(Var),
    /// Rows of axis 0 gathered by index (indices may repeat).
    SelectRows(Var, Vec<usize>),
    /// Crops of side `p` from (B,C,H,W); one crop per (row index, y, x) entry.
    ExtractPatches { x: Var, coords: Vec<(usize, usize, usize)>, side: usize },
    /// (N,F) -> (N/g,F): mean over consecutive groups of g rows.
    MeanGroups(Var, usize),
    /// (B,F1) ++ (B,F2) -> (B,F1+F2) along axis 1.
    ConcatCols(Var, Var),
    Reshape(Var),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Gradient table produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`, if `v` influenced it.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, panicking when `v` did not contribute to the root.
    pub fn wrt(&self, v: Var) -> &ArrayD<f64> {
        self.grads[v.0]
            .as_ref()
            .expect("variable does not influence the backward root")
    }
}

/// Flat computation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Inserts an input node (parameter, constant, or data).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_view(&mut self, value: ArrayViewD<'_, f64>) -> Var {
        self.leaf(value.to_owned())
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 0-d (or single-element) node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar() on a node with {} elements", val.len());
        *val.iter().next().unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
            va + vb
        };
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
            va - vb
        };
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
            va * vb
        };
        self.push(value, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| -x);
        self.push(value, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|x| c * x);
        self.push(value, Op::Scale(a, c))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        self.push(value, Op::Abs(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).mapv(|x| if x >= 0.0 { x } else { slope * x });
        self.push(value, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(stable_sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(stable_softplus);
        self.push(value, Op::Softplus(a))
    }

    pub fn add_bias_chan(&mut self, x: Var, b: Var) -> Var {
        let value = {
            let (vx, vb) = (self.value(x), self.value(b));
            assert_eq!(vx.ndim(), 4);
            assert_eq!(vb.ndim(), 1);
            assert_eq!(vx.shape()[1], vb.shape()[0], "add_bias_chan: channel mismatch");
            let mut out = vx.clone();
            for (c, &bias) in vb.iter().enumerate() {
                out.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + bias);
            }
            out
        };
        self.push(value, Op::AddBiasChan(x, b))
    }

    pub fn add_bias_row(&mut self, x: Var, b: Var) -> Var {
        let value = {
            let (vx, vb) = (self.value(x), self.value(b));
            assert_eq!(vx.ndim(), 2);
            assert_eq!(vx.shape()[1], vb.shape()[0], "add_bias_row: width mismatch");
            let mut out = vx.clone();
            for mut row in out.axis_iter_mut(Axis(0)) {
                row += vb;
            }
            out
        };
        self.push(value, Op::AddBiasRow(x, b))
    }

    pub fn scale_channels(&mut self, x: Var, s: Var) -> Var {
        let value = {
            let (vx, vs) = (self.value(x), self.value(s));
            assert_eq!(vx.ndim(), 4);
            assert_eq!(vs.ndim(), 2);
            assert_eq!(vx.shape()[0], vs.shape()[0], "scale_channels: batch mismatch");
            assert_eq!(vx.shape()[1], vs.shape()[1], "scale_channels: channel mismatch");
            let mut out = vx.clone();
            for (bi, mut sample) in out.axis_iter_mut(Axis(0)).enumerate() {
                for (c, mut chan) in sample.axis_iter_mut(Axis(0)).enumerate() {
                    let f = vs[[bi, c]];
                    chan.mapv_inplace(|v| v * f);
                }
            }
            out
        };
        self.push(value, Op::ScaleChannels(x, s))
    }

    pub fn mul_chan_const(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let value = {
            let vx = self.value(x);
            assert_eq!(vx.ndim(), 4);
            assert_eq!(vx.shape()[1], mask.len(), "mul_chan_const: channel mismatch");
            let mut out = vx.clone();
            for (c, &m) in mask.iter().enumerate() {
                out.index_axis_mut(Axis(1), c).mapv_inplace(|v| v * m);
            }
            out
        };
        self.push(value, Op::MulChanConst(x, mask))
    }

    /// Stride-1 same-padding convolution. `w` has shape (Cout,Cin,k,k), k odd.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Var {
        let (value, kernel) = {
            let (vx, vw) = (self.value(x), self.value(w));
            assert_eq!(vx.ndim(), 4);
            assert_eq!(vw.ndim(), 4);
            let kernel = vw.shape()[2];
            assert_eq!(vw.shape()[3], kernel, "conv2d: kernel must be square");
            assert_eq!(kernel % 2, 1, "conv2d: kernel must be odd");
            assert_eq!(vx.shape()[1], vw.shape()[1], "conv2d: channel mismatch");
            (conv::conv2d_forward(vx, vw), kernel)
        };
        self.push(value, Op::Conv { x, w, kernel })
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let value = {
            let vx = self.value(x);
            assert_eq!(vx.ndim(), 4);
            let (b, c, h, w) = dims4(vx);
            assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd spatial side");
            let mut out = ArrayD::zeros(IxDyn(&[b, c, h / 2, w / 2]));
            for bi in 0..b {
                for ci in 0..c {
                    for y in 0..h / 2 {
                        for xx in 0..w / 2 {
                            let s = vx[[bi, ci, 2 * y, 2 * xx]]
                                + vx[[bi, ci, 2 * y, 2 * xx + 1]]
                                + vx[[bi, ci, 2 * y + 1, 2 * xx]]
                                + vx[[bi, ci, 2 * y + 1, 2 * xx + 1]];
                            out[[bi, ci, y, xx]] = 0.25 * s;
                        }
                    }
                }
            }
            out
        };
        self.push(value, Op::AvgPool2(x))
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let value = {
            let vx = self.value(x);
            assert_eq!(vx.ndim(), 4);
            let (b, c, h, w) = dims4(vx);
            let mut out = ArrayD::zeros(IxDyn(&[b, c, 2 * h, 2 * w]));
            for bi in 0..b {
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let v = vx[[bi, ci, y, xx]];
                            out[[bi, ci, 2 * y, 2 * xx]] = v;
                            out[[bi, ci, 2 * y, 2 * xx + 1]] = v;
                            out[[bi, ci, 2 * y + 1, 2 * xx]] = v;
                            out[[bi, ci, 2 * y + 1, 2 * xx + 1]] = v;
                        }
                    }
                }
            }
            out
        };
        self.push(value, Op::UpNearest2(x))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let value = {
            let vx = self.value(x);
            assert_eq!(vx.ndim(), 4);
            let (b, c, h, w) = dims4(vx);
            let denom = (h * w) as f64;
            let mut out = ArrayD::zeros(IxDyn(&[b, c]));
            for bi in 0..b {
                for ci in 0..c {
                    let mut acc = 0.0;
                    for y in 0..h {
                        for xx in 0..w {
                            acc += vx[[bi, ci, y, xx]];
                        }
                    }
                    out[[bi, ci]] = acc / denom;
                }
            }
            out
        };
        self.push(value, Op::GlobalAvgPool(x))
    }

    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let value = {
            let (vx, vw) = (self.value(x), self.value(w));
            assert_eq!(vx.ndim(), 2);
            assert_eq!(vw.ndim(), 2);
            assert_eq!(vx.shape()[1], vw.shape()[1], "linear: inner dim mismatch");
            let x2 = vx.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let w2 = vw.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            x2.dot(&w2.t()).into_dyn()
        };
        self.push(value, Op::Linear(x, w))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let value = {
            let vx = self.value(x);
            let m = vx.iter().sum::<f64>() / vx.len() as f64;
            ArrayD::from_elem(IxDyn(&[]), m)
        };
        self.push(value, Op::MeanAll(x))
    }

    pub fn select_rows(&mut self, x: Var, indices: Vec<usize>) -> Var {
        let value = {
            let vx = self.value(x);
            let rows = vx.shape()[0];
            assert!(indices.iter().all(|&i| i < rows), "select_rows: index out of range");
            let mut shape = vx.shape().to_vec();
            shape[0] = indices.len();
            let mut out = ArrayD::zeros(IxDyn(&shape));
            for (dst, &src) in indices.iter().enumerate() {
                out.index_axis_mut(Axis(0), dst)
                    .assign(&vx.index_axis(Axis(0), src));
            }
            out
        };
        self.push(value, Op::SelectRows(x, indices))
    }

    /// Crops `side`-sized patches. `coords` entries are (batch row, top, left).
    pub fn extract_patches(&mut self, x: Var, coords: Vec<(usize, usize, usize)>, side: usize) -> Var {
        let value = {
            let vx = self.value(x);
            let (b, c, h, w) = dims4(vx);
            let mut out = ArrayD::zeros(IxDyn(&[coords.len(), c, side, side]));
            for (n, &(bi, top, left)) in coords.iter().enumerate() {
                assert!(bi < b && top + side <= h && left + side <= w, "extract_patches: crop out of bounds");
                for ci in 0..c {
                    for y in 0..side {
                        for xx in 0..side {
                            out[[n, ci, y, xx]] = vx[[bi, ci, top + y, left + xx]];
                        }
                    }
                }
            }
            out
        };
        self.push(value, Op::ExtractPatches { x, coords, side })
    }

    pub fn mean_groups(&mut self, x: Var, group: usize) -> Var {
        let value = {
            let vx = self.value(x);
            assert_eq!(vx.ndim(), 2);
            let (n, f) = (vx.shape()[0], vx.shape()[1]);
            assert!(group > 0 && n % group == 0, "mean_groups: rows not divisible by group");
            let mut out = ArrayD::zeros(IxDyn(&[n / group, f]));
            for m in 0..n / group {
                for j in 0..f {
                    let mut acc = 0.0;
                    for g in 0..group {
                        acc += vx[[m * group + g, j]];
                    }
                    out[[m, j]] = acc / group as f64;
                }
            }
            out
        };
        self.push(value, Op::MeanGroups(x, group))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.ndim(), 2);
            assert_eq!(vb.ndim(), 2);
            assert_eq!(va.shape()[0], vb.shape()[0], "concat_cols: batch mismatch");
            let (rows, f1, f2) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            let mut out = ArrayD::zeros(IxDyn(&[rows, f1 + f2]));
            for r in 0..rows {
                for j in 0..f1 {
                    out[[r, j]] = va[[r, j]];
                }
                for j in 0..f2 {
                    out[[r, f1 + j]] = vb[[r, j]];
                }
            }
            out
        };
        self.push(value, Op::ConcatCols(a, b))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = {
            let vx = self.value(x);
            assert_eq!(vx.len(), shape.iter().product::<usize>(), "reshape: element count mismatch");
            vx.clone().into_shape_with_order(IxDyn(shape)).unwrap()
        };
        self.push(value, Op::Reshape(x))
    }

    /// Accumulates gradients of scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(self.value(root).raw_dim(), 1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        fn acc(grads: &mut [Option<ArrayD<f64>>], v: Var, contrib: ArrayD<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &contrib,
                slot => *slot = Some(contrib),
            }
        }

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = g * self.value(*b);
                let gb = g * self.value(*a);
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Neg(a) => acc(grads, *a, g.mapv(|v| -v)),
            Op::Scale(a, c) => acc(grads, *a, g.mapv(|v| c * v)),
            Op::Abs(a) => {
                let vx = self.value(*a);
                let mut out = g.clone();
                out.zip_mut_with(vx, |gv, &xv| {
                    *gv *= if xv > 0.0 {
                        1.0
                    } else if xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                acc(grads, *a, out);
            }
            Op::LeakyRelu(a, slope) => {
                let vx = self.value(*a);
                let mut out = g.clone();
                let s = *slope;
                out.zip_mut_with(vx, |gv, &xv| {
                    if xv < 0.0 {
                        *gv *= s;
                    }
                });
                acc(grads, *a, out);
            }
            Op::Sigmoid(a) => {
                let vy = &self.nodes[i].value;
                let mut out = g.clone();
                out.zip_mut_with(vy, |gv, &yv| *gv *= yv * (1.0 - yv));
                acc(grads, *a, out);
            }
            Op::Softplus(a) => {
                let vx = self.value(*a);
                let mut out = g.clone();
                out.zip_mut_with(vx, |gv, &xv| *gv *= stable_sigmoid(xv));
                acc(grads, *a, out);
            }
            Op::AddBiasChan(x, b) => {
                let c = self.value(*b).shape()[0];
                let mut gb = ArrayD::zeros(IxDyn(&[c]));
                for ci in 0..c {
                    gb[[ci]] = g.index_axis(Axis(1), ci).sum();
                }
                acc(grads, *x, g.clone());
                acc(grads, *b, gb);
            }
            Op::AddBiasRow(x, b) => {
                let f = self.value(*b).shape()[0];
                let mut gb = ArrayD::zeros(IxDyn(&[f]));
                for j in 0..f {
                    gb[[j]] = g.index_axis(Axis(1), j).sum();
                }
                acc(grads, *x, g.clone());
                acc(grads, *b, gb);
            }
            Op::ScaleChannels(x, s) => {
                let (vx, vs) = (self.value(*x), self.value(*s));
                let (bn, cn, _, _) = dims4(vx);
                let mut gx = g.clone();
                for bi in 0..bn {
                    for ci in 0..cn {
                        let f = vs[[bi, ci]];
                        gx.index_axis_mut(Axis(0), bi)
                            .index_axis_mut(Axis(0), ci)
                            .mapv_inplace(|v| v * f);
                    }
                }
                let mut gs = ArrayD::zeros(IxDyn(&[bn, cn]));
                for bi in 0..bn {
                    for ci in 0..cn {
                        let gslice = g.index_axis(Axis(0), bi);
                        let gslice = gslice.index_axis(Axis(0), ci);
                        let xslice = vx.index_axis(Axis(0), bi);
                        let xslice = xslice.index_axis(Axis(0), ci);
                        let mut accv = 0.0;
                        ndarray::Zip::from(&gslice).and(&xslice).for_each(|&gv, &xv| accv += gv * xv);
                        gs[[bi, ci]] = accv;
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *s, gs);
            }
            Op::MulChanConst(x, mask) => {
                let mut gx = g.clone();
                for (ci, &m) in mask.iter().enumerate() {
                    gx.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * m);
                }
                acc(grads, *x, gx);
            }
            Op::Conv { x, w, kernel } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let gx = conv::conv2d_backward_input(vw, g, *kernel, vx.shape());
                let gw = conv::conv2d_backward_weight(vx, g, *kernel);
                acc(grads, *x, gx);
                acc(grads, *w, gw);
            }
            Op::AvgPool2(x) => {
                let vx = self.value(*x);
                let (b, c, h, w) = dims4(vx);
                let mut gx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h / 2 {
                            for xx in 0..w / 2 {
                                let v = 0.25 * g[[bi, ci, y, xx]];
                                gx[[bi, ci, 2 * y, 2 * xx]] = v;
                                gx[[bi, ci, 2 * y, 2 * xx + 1]] = v;
                                gx[[bi, ci, 2 * y + 1, 2 * xx]] = v;
                                gx[[bi, ci, 2 * y + 1, 2 * xx + 1]] = v;
                            }
                        }
                    }
                }
                acc(grads, *x, gx);
            }
            Op::UpNearest2(x) => {
                let vx = self.value(*x);
                let (b, c, h, w) = dims4(vx);
                let mut gx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                gx[[bi, ci, y, xx]] = g[[bi, ci, 2 * y, 2 * xx]]
                                    + g[[bi, ci, 2 * y, 2 * xx + 1]]
                                    + g[[bi, ci, 2 * y + 1, 2 * xx]]
                                    + g[[bi, ci, 2 * y + 1, 2 * xx + 1]];
                            }
                        }
                    }
                }
                acc(grads, *x, gx);
            }
            Op::GlobalAvgPool(x) => {
                let vx = self.value(*x);
                let (b, c, h, w) = dims4(vx);
                let denom = (h * w) as f64;
                let mut gx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
                for bi in 0..b {
                    for ci in 0..c {
                        let v = g[[bi, ci]] / denom;
                        gx.index_axis_mut(Axis(0), bi)
                            .index_axis_mut(Axis(0), ci)
                            .fill(v);
                    }
                }
                acc(grads, *x, gx);
            }
            Op::Linear(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let x2 = vx.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let w2 = vw.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let gx = g2.dot(&w2).into_dyn();
                let gw = g2.t().dot(&x2).into_dyn();
                acc(grads, *x, gx);
                acc(grads, *w, gw);
            }
            Op::MeanAll(x) => {
                let vx = self.value(*x);
                let gv = g.iter().next().unwrap() / vx.len() as f64;
                acc(grads, *x, ArrayD::from_elem(vx.raw_dim(), gv));
            }
            Op::SelectRows(x, indices) => {
                let vx = self.value(*x);
                let mut gx = ArrayD::zeros(vx.raw_dim());
                for (dst, &src) in indices.iter().enumerate() {
                    let mut row = gx.index_axis_mut(Axis(0), src);
                    row += &g.index_axis(Axis(0), dst);
                }
                acc(grads, *x, gx);
            }
            Op::ExtractPatches { x, coords, side } => {
                let vx = self.value(*x);
                let (_, c, _, _) = dims4(vx);
                let mut gx = ArrayD::zeros(vx.raw_dim());
                for (n, &(bi, top, left)) in coords.iter().enumerate() {
                    for ci in 0..c {
                        for y in 0..*side {
                            for xx in 0..*side {
                                gx[[bi, ci, top + y, left + xx]] += g[[n, ci, y, xx]];
                            }
                        }
                    }
                }
                acc(grads, *x, gx);
            }
            Op::MeanGroups(x, group) => {
                let vx = self.value(*x);
                let (n, f) = (vx.shape()[0], vx.shape()[1]);
                let mut gx = ArrayD::zeros(IxDyn(&[n, f]));
                let inv = 1.0 / *group as f64;
                for m in 0..n / group {
                    for j in 0..f {
                        let v = g[[m, j]] * inv;
                        for gi in 0..*group {
                            gx[[m * group + gi, j]] = v;
                        }
                    }
                }
                acc(grads, *x, gx);
            }
            Op::ConcatCols(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (rows, f1, f2) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let mut ga = ArrayD::zeros(IxDyn(&[rows, f1]));
                let mut gb = ArrayD::zeros(IxDyn(&[rows, f2]));
                for r in 0..rows {
                    for j in 0..f1 {
                        ga[[r, j]] = g[[r, j]];
                    }
                    for j in 0..f2 {
                        gb[[r, j]] = g[[r, f1 + j]];
                    }
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Reshape(x) => {
                let vx = self.value(*x);
                let gx = g.clone().into_shape_with_order(vx.raw_dim()).unwrap();
                acc(grads, *x, gx);
            }
        }
    }
}

fn dims4(a: &ArrayD<f64>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    (s[0], s[1], s[2], s[3])
}

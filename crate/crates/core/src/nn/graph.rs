//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records one forward pass over a borrowed [`ParamStore`].
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every parameter that took part in the pass.

use matrixmultiply::sgemm;

use super::{ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Sampling taps for one output cell of [`Graph::roi_align`]: flat spatial
/// offsets into the source feature plane and their weights.
pub type Taps = Vec<(u32, f32)>;

enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        k: usize,
        cols: Vec<f32>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Upsample2(NodeId),
    Concat(Vec<NodeId>),
    Add(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Reshape(NodeId),
    RoiAlign {
        x: NodeId,
        batch_index: Vec<usize>,
        taps: Vec<Taps>,
        bins: usize,
    },
    Loss(Vec<(NodeId, Tensor)>),
    Sum(Vec<NodeId>),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub by_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            by_param: vec![None; params.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        if self.by_param.len() < other.by_param.len() {
            self.by_param.resize(other.by_param.len(), None);
        }
        for (a, b) in self.by_param.iter_mut().zip(&other.by_param) {
            if let Some(b) = b {
                match a {
                    Some(a) => a.add_assign(b),
                    None => *a = Some(b.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.by_param.iter_mut().flatten() {
            g.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.by_param
            .iter()
            .flatten()
            .all(|g| g.data.iter().all(|v| v.is_finite()))
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: std::collections::HashMap<ParamId, NodeId>,
    train: bool,
}

#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds views of the slices for the given
    // m/k/n; callers size every buffer from the same dimensions.
    unsafe {
        sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, cols: &mut [f32]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + shift;
                        *o = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], c: usize, h: usize, w: usize, k: usize, dx: &mut [f32]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    for (x, &g) in row[y * w..(y + 1) * w].iter().enumerate() {
                        let sx = x as isize + shift;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

impl<'p> Graph<'p> {
    /// A graph that records what backward needs.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: Default::default(),
            train: true,
        }
    }

    /// Forward-only graph: no parameter requires a gradient, nothing is
    /// cached for backward.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            train: false,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Option<Tensor>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id.0].op {
            Op::Param(p) => self.params.value(*p),
            _ => self.nodes[id.0].value.as_ref().expect("node value"),
        }
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Some(t), Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(None, Op::Param(id), self.train);
        self.param_nodes.insert(id, n);
        n
    }

    /// Looks a parameter up by name.
    pub fn param_named(&mut self, name: &str) -> NodeId {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        self.param(id)
    }

    /// Stride-1 convolution with `k / 2` zero padding (odd `k`).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (n, ci, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape.clone();
        assert_eq!(ws.len(), 4, "conv weight must be [Co, Ci, k, k]");
        assert_eq!(ws[1], ci, "conv expects {} input channels, got {ci}", ws[1]);
        let (co, k) = (ws[0], ws[2]);
        assert!(k % 2 == 1 && ws[3] == k, "odd square kernels only");
        let kk = ci * k * k;
        let hw = h * wd;
        let mut out = vec![0f32; n * co * hw];
        let keep = self.train && (self.ng(w) || b.is_some_and(|b| self.ng(b)));
        let mut cols = if k == 1 { Vec::new() } else { vec![0f32; n * kk * hw] };
        {
            let xv = &self.value(x).data;
            let wv = &self.value(w).data;
            for i in 0..n {
                let src: &[f32] = if k == 1 {
                    &xv[i * kk * hw..(i + 1) * kk * hw]
                } else {
                    let c = &mut cols[i * kk * hw..(i + 1) * kk * hw];
                    im2col(&xv[i * ci * hw..(i + 1) * ci * hw], ci, h, wd, k, c);
                    c
                };
                gemm(co, kk, hw, wv, (kk, 1), src, (hw, 1), 0.0, &mut out[i * co * hw..(i + 1) * co * hw]);
            }
            if let Some(b) = b {
                let bv = &self.value(b).data;
                for i in 0..n {
                    for o in 0..co {
                        for v in &mut out[(i * co + o) * hw..(i * co + o + 1) * hw] {
                            *v += bv[o];
                        }
                    }
                }
            }
        }
        if !keep {
            cols = Vec::new();
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(
            Some(Tensor::from_vec(&[n, co, h, wd], out)),
            Op::Conv2d { x, w, b, k, cols },
            needs,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        for e in &mut v.data {
            *e = e.max(0.0);
        }
        let ng = self.ng(x);
        self.push(Some(v), Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        for e in &mut v.data {
            *e = 1.0 / (1.0 + (-*e).exp());
        }
        let ng = self.ng(x);
        self.push(Some(v), Op::Sigmoid(x), ng)
    }

    /// 2x2 max pooling, stride 2 (odd trailing rows/cols are dropped).
    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = self.value(x).dims4();
        let (oh, ow) = (h / 2, w / 2);
        let xv = &self.value(x).data;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * xx + dx;
                        if xv[i] > xv[best] {
                            best = i;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            Some(Tensor::from_vec(&[n, c, oh, ow], out)),
            Op::MaxPool2 { x, argmax: if ng { argmax } else { Vec::new() } },
            ng,
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = self.value(x).dims4();
        let xv = &self.value(x).data;
        let mut out = Vec::with_capacity(n * c * 4 * h * w);
        for p in 0..n * c {
            for y in 0..2 * h {
                let row = &xv[p * h * w + (y / 2) * w..][..w];
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
        let ng = self.ng(x);
        self.push(Some(Tensor::from_vec(&[n, c, 2 * h, 2 * w], out)), Op::Upsample2(x), ng)
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let (n, _, h, w) = self.value(xs[0]).dims4();
        let hw = h * w;
        let total: usize = xs
            .iter()
            .map(|&x| {
                let (nn, c, hh, ww) = self.value(x).dims4();
                assert_eq!((nn, hh, ww), (n, h, w), "concat: spatial/batch mismatch");
                c
            })
            .sum();
        let mut out = Vec::with_capacity(n * total * hw);
        for i in 0..n {
            for &x in xs {
                let (_, c, _, _) = self.value(x).dims4();
                out.extend_from_slice(&self.value(x).data[i * c * hw..(i + 1) * c * hw]);
            }
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        self.push(Some(Tensor::from_vec(&[n, total, h, w], out)), Op::Concat(xs.to_vec()), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape, self.value(b).shape, "add: shape mismatch");
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Some(v), Op::Add(a, b), ng)
    }

    /// `x [N, F] · wᵀ + b` with `w [O, F]`. `x` may have any shape whose
    /// trailing dimensions multiply to `F`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let n = self.value(x).shape[0];
        let f = self.value(x).numel() / n.max(1);
        let (o, wf) = (self.value(w).shape[0], self.value(w).shape[1]);
        assert_eq!(f, wf, "linear expects {wf} features, got {f}");
        let mut out = vec![0f32; n * o];
        gemm(n, f, o, &self.value(x).data, (f, 1), &self.value(w).data, (1, f), 0.0, &mut out);
        if let Some(b) = b {
            let bv = &self.value(b).data;
            for row in out.chunks_mut(o) {
                for (v, bb) in row.iter_mut().zip(bv) {
                    *v += bb;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Some(Tensor::from_vec(&[n, o], out)), Op::Linear { x, w, b }, ng)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(x).clone().reshaped(shape);
        let ng = self.ng(x);
        self.push(Some(v), Op::Reshape(x), ng)
    }

    /// Pools `[N, C, H, W]` features into `[R, C, bins, bins]`. Region `r`
    /// reads batch item `batch_index[r]`; `taps[r * bins² + cell]` lists the
    /// weighted spatial offsets averaged into that cell.
    pub fn roi_align(&mut self, x: NodeId, batch_index: Vec<usize>, taps: Vec<Taps>, bins: usize) -> NodeId {
        let (_, c, h, w) = self.value(x).dims4();
        let r = batch_index.len();
        let cells = bins * bins;
        assert_eq!(taps.len(), r * cells);
        let hw = h * w;
        let xv = &self.value(x).data;
        let mut out = vec![0f32; r * c * cells];
        for (ri, &bi) in batch_index.iter().enumerate() {
            for ch in 0..c {
                let plane = &xv[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                for cell in 0..cells {
                    out[(ri * c + ch) * cells + cell] = taps[ri * cells + cell]
                        .iter()
                        .map(|&(i, wt)| plane[i as usize] * wt)
                        .sum();
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            Some(Tensor::from_vec(&[r, c, bins, bins], out)),
            Op::RoiAlign { x, batch_index, taps, bins },
            ng,
        )
    }

    /// Scalar loss computed outside the graph, with its gradient with
    /// respect to each input supplied by the caller.
    pub fn loss(&mut self, value: f32, grads: Vec<(NodeId, Tensor)>) -> NodeId {
        for (n, g) in &grads {
            assert_eq!(self.value(*n).shape, g.shape, "loss gradient shape mismatch");
        }
        let ng = grads.iter().any(|(n, _)| self.ng(*n));
        self.push(Some(Tensor::scalar(value)), Op::Loss(grads), ng)
    }

    pub fn sum_scalars(&mut self, xs: &[NodeId]) -> NodeId {
        let v: f32 = xs.iter().map(|&x| self.value(x).data[0]).sum();
        let ng = xs.iter().any(|&x| self.ng(x));
        self.push(Some(Tensor::scalar(v)), Op::Sum(xs.to_vec()), ng)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::from_vec(&self.value(root).shape, vec![1.0; self.value(root).numel()]));
        let mut out = Gradients::zeros_like(self.params);

        fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut grads[id.0] {
                Some(t) => t.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param(p) => match &mut out.by_param[p.0] {
                    Some(t) => t.add_assign(&gy),
                    slot => *slot = Some(gy),
                },
                Op::Conv2d { x, w, b, k, cols } => {
                    let (n, ci, h, wd) = self.value(*x).dims4();
                    let co = self.value(*w).shape[0];
                    let kk = ci * k * k;
                    let hw = h * wd;
                    if self.ng(*w) {
                        let mut dw = vec![0f32; co * kk];
                        let xv = &self.value(*x).data;
                        for i in 0..n {
                            let src: &[f32] = if *k == 1 {
                                &xv[i * kk * hw..(i + 1) * kk * hw]
                            } else {
                                &cols[i * kk * hw..(i + 1) * kk * hw]
                            };
                            gemm(co, hw, kk, &gy.data[i * co * hw..], (hw, 1), src, (1, hw), 1.0, &mut dw);
                        }
                        acc(&mut grads, *w, Tensor::from_vec(&self.value(*w).shape, dw));
                    }
                    if let Some(b) = b {
                        if self.ng(*b) {
                            let mut db = vec![0f32; co];
                            for i in 0..n {
                                for (o, d) in db.iter_mut().enumerate() {
                                    *d += gy.data[(i * co + o) * hw..(i * co + o + 1) * hw].iter().sum::<f32>();
                                }
                            }
                            acc(&mut grads, *b, Tensor::from_vec(&[co], db));
                        }
                    }
                    if self.ng(*x) {
                        let wv = &self.value(*w).data;
                        let mut dx = vec![0f32; n * ci * hw];
                        let mut dcols = vec![0f32; kk * hw];
                        for i in 0..n {
                            if *k == 1 {
                                gemm(kk, co, hw, wv, (1, kk), &gy.data[i * co * hw..], (hw, 1), 0.0, &mut dx[i * kk * hw..(i + 1) * kk * hw]);
                            } else {
                                gemm(kk, co, hw, wv, (1, kk), &gy.data[i * co * hw..], (hw, 1), 0.0, &mut dcols);
                                col2im(&dcols, ci, h, wd, *k, &mut dx[i * ci * hw..(i + 1) * ci * hw]);
                            }
                        }
                        acc(&mut grads, *x, Tensor::from_vec(&[n, ci, h, wd], dx));
                    }
                }
                Op::Relu(x) => {
                    let y = node.value.as_ref().unwrap();
                    let mut g = gy;
                    for (gv, &yv) in g.data.iter_mut().zip(&y.data) {
                        if yv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    acc(&mut grads, *x, g);
                }
                Op::Sigmoid(x) => {
                    let y = node.value.as_ref().unwrap();
                    let mut g = gy;
                    for (gv, &yv) in g.data.iter_mut().zip(&y.data) {
                        *gv *= yv * (1.0 - yv);
                    }
                    acc(&mut grads, *x, g);
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut g = Tensor::zeros(&self.value(*x).shape);
                    for (&a, &v) in argmax.iter().zip(&gy.data) {
                        g.data[a as usize] += v;
                    }
                    acc(&mut grads, *x, g);
                }
                Op::Upsample2(x) => {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let mut g = Tensor::zeros(&[n, c, h, w]);
                    for p in 0..n * c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                g.data[p * h * w + (y / 2) * w + xx / 2] += gy.data[p * 4 * h * w + y * 2 * w + xx];
                            }
                        }
                    }
                    acc(&mut grads, *x, g);
                }
                Op::Concat(xs) => {
                    let mut from = 0;
                    for &x in xs {
                        let c = self.value(x).shape[1];
                        if self.ng(x) {
                            acc(&mut grads, x, gy.channel_slice(from, from + c));
                        }
                        from += c;
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        acc(&mut grads, *b, gy.clone());
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, gy);
                    }
                }
                Op::Linear { x, w, b } => {
                    let xt = self.value(*x);
                    let n = xt.shape[0];
                    let f = xt.numel() / n.max(1);
                    let o = self.value(*w).shape[0];
                    if self.ng(*w) {
                        let mut dw = vec![0f32; o * f];
                        gemm(o, n, f, &gy.data, (1, o), &xt.data, (f, 1), 0.0, &mut dw);
                        acc(&mut grads, *w, Tensor::from_vec(&[o, f], dw));
                    }
                    if let Some(b) = b {
                        if self.ng(*b) {
                            let mut db = vec![0f32; o];
                            for row in gy.data.chunks(o) {
                                for (d, v) in db.iter_mut().zip(row) {
                                    *d += v;
                                }
                            }
                            acc(&mut grads, *b, Tensor::from_vec(&[o], db));
                        }
                    }
                    if self.ng(*x) {
                        let mut dx = vec![0f32; n * f];
                        gemm(n, o, f, &gy.data, (o, 1), &self.value(*w).data, (f, 1), 0.0, &mut dx);
                        acc(&mut grads, *x, Tensor::from_vec(&xt.shape, dx));
                    }
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape.clone();
                    acc(&mut grads, *x, gy.reshaped(&shape));
                }
                Op::RoiAlign { x, batch_index, taps, bins } => {
                    let (_, c, h, w) = self.value(*x).dims4();
                    let hw = h * w;
                    let cells = bins * bins;
                    let mut g = Tensor::zeros(&self.value(*x).shape);
                    for (ri, &bi) in batch_index.iter().enumerate() {
                        for ch in 0..c {
                            let plane = &mut g.data[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                            for cell in 0..cells {
                                let up = gy.data[(ri * c + ch) * cells + cell];
                                if up == 0.0 {
                                    continue;
                                }
                                for &(i, wt) in &taps[ri * cells + cell] {
                                    plane[i as usize] += up * wt;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, g);
                }
                Op::Loss(inputs) => {
                    let s = gy.data[0];
                    for (x, g) in inputs {
                        if self.ng(*x) {
                            let mut g = g.clone();
                            g.scale(s);
                            acc(&mut grads, *x, g);
                        }
                    }
                }
                Op::Sum(xs) => {
                    for &x in xs {
                        if self.ng(x) {
                            acc(&mut grads, x, gy.clone());
                        }
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
    }

    /// Loss = Σ out ⊙ probe, so d loss / d out = probe.
    fn probe_loss(g: &mut Graph, out: NodeId, probe: &Tensor) -> NodeId {
        let v: f32 = g.value(out).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum();
        g.loss(v, vec![(out, probe.clone())])
    }

    /// Checks parameter gradients of `build` against central differences.
    fn check(params: &mut ParamStore, build: impl Fn(&mut Graph) -> NodeId, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe_shape = {
            let mut g = Graph::new(params);
            let o = build(&mut g);
            g.value(o).shape.clone()
        };
        let probe = rand_tensor(&mut rng, &probe_shape);
        let run = |p: &ParamStore| -> (f32, Gradients) {
            let mut g = Graph::new(p);
            let o = build(&mut g);
            let l = probe_loss(&mut g, o, &probe);
            (g.value(l).data[0], g.backward(l))
        };
        let (_, grads) = run(params);
        let eps = 2e-3f32;
        for id in params.ids().collect::<Vec<_>>() {
            let n = params.value(id).numel();
            for j in (0..n).step_by((n / 7).max(1)) {
                let orig = params.value(id).data[j];
                params.value_mut(id).data[j] = orig + eps;
                let up = run(params).0;
                params.value_mut(id).data[j] = orig - eps;
                let down = run(params).0;
                params.value_mut(id).data[j] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = grads.get(id).map_or(0.0, |g| g.data[j]);
                assert!(
                    (fd - an).abs() <= 2e-2 * (1.0 + fd.abs()),
                    "{}[{j}]: fd {fd} vs analytic {an}",
                    params.name(id)
                );
            }
        }
    }

    #[test]
    fn conv_pool_upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::new();
        ps.add("x", rand_tensor(&mut rng, &[2, 2, 6, 4]));
        ps.add("w", rand_tensor(&mut rng, &[3, 2, 3, 3]));
        ps.add("b", rand_tensor(&mut rng, &[3]));
        ps.add("w1", rand_tensor(&mut rng, &[2, 3, 1, 1]));
        check(
            &mut ps,
            |g| {
                let x = g.param_named("x");
                let w = g.param_named("w");
                let b = g.param_named("b");
                let w1 = g.param_named("w1");
                let c = g.conv2d(x, w, Some(b));
                let r = g.relu(c);
                let p = g.max_pool2(r);
                let u = g.upsample2(p);
                g.conv2d(u, w1, None)
            },
            2,
        );
    }

    #[test]
    fn concat_add_linear_sigmoid_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::new();
        ps.add("a", rand_tensor(&mut rng, &[2, 2, 2, 2]));
        ps.add("b", rand_tensor(&mut rng, &[2, 3, 2, 2]));
        ps.add("c", rand_tensor(&mut rng, &[2, 5, 2, 2]));
        ps.add("w", rand_tensor(&mut rng, &[4, 20]));
        ps.add("bias", rand_tensor(&mut rng, &[4]));
        check(
            &mut ps,
            |g| {
                let a = g.param_named("a");
                let b = g.param_named("b");
                let c = g.param_named("c");
                let cat = g.concat_channels(&[a, b]);
                let s = g.add(cat, c);
                let w = g.param_named("w");
                let bias = g.param_named("bias");
                let l = g.linear(s, w, Some(bias));
                g.sigmoid(l)
            },
            4,
        );
    }

    #[test]
    fn roi_align_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamStore::new();
        ps.add("f", rand_tensor(&mut rng, &[2, 3, 4, 4]));
        check(
            &mut ps,
            |g| {
                let f = g.param_named("f");
                let taps = vec![
                    vec![(0, 0.25), (5, 0.75)],
                    vec![(15, 1.0)],
                    vec![(3, 0.5), (3, 0.5)],
                    vec![],
                ];
                g.roi_align(f, vec![1, 0, 1, 0], taps, 1)
            },
            6,
        );
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamStore::new();
        let x = rand_tensor(&mut rng, &[1, 2, 5, 4]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let wid = ps.add("w", w.clone());
        let mut g = Graph::inference(&ps);
        let xi = g.input(x.clone());
        let wn = g.param(wid);
        let out = g.conv2d(xi, wn, None);
        let o = g.value(out);
        for co in 0..3 {
            for y in 0..5i64 {
                for xx in 0..4i64 {
                    let mut s = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                if (0..5).contains(&sy) && (0..4).contains(&sx) {
                                    s += x.data[(ci * 5 + sy as usize) * 4 + sx as usize]
                                        * w.data[((co * 2 + ci) * 3 + ky as usize) * 3 + kx as usize];
                                }
                            }
                        }
                    }
                    let got = o.data[(co * 5 + y as usize) * 4 + xx as usize];
                    assert!((got - s).abs() < 1e-5);
                }
            }
        }
    }
}

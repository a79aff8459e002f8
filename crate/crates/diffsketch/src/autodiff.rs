//! Minimal reverse-mode autodiff over dense `f64` tensors. The tape is eager:
//! node values are computed at construction, a backward pass then accumulates
//! gradients for every node flagged as requiring them.
//!
//! The op set is exactly what the sketch generator, the losses, and the
//! distillation student need; nothing speculative.

/// Dense row-major `f64` tensor. Shape `[]` is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data mismatch"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// (channels, height, width) view of a rank-3 tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected CHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    ScaleByScalar { t: NodeId, s: NodeId },
    Conv2d { input: NodeId, weight: NodeId, bias: Option<NodeId>, pad: usize },
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    Abs(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    UpNearest2(NodeId),
    UpBilinear { t: NodeId, oh: usize, ow: usize },
    AdaptiveAvgPool { t: NodeId, oh: usize, ow: usize },
    AvgPool2(NodeId),
    ConcatCh(Vec<NodeId>),
    Softmax(NodeId),
    Select { t: NodeId, idx: usize },
    Sum(NodeId),
    Mean(NodeId),
    Dot(NodeId, NodeId),
    MatVec { m: NodeId, v: NodeId },
    Reshape { t: NodeId },
}

struct Node {
    value: Arr,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `id`; zeros if the node never influenced
    /// the loss.
    pub fn get(&self, id: NodeId, tape: &Tape) -> Arr {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Arr::zeros(tape.value(id).shape.clone()))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Arr {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Arr, op: Op, needs_grad: bool) -> NodeId {
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

    /// Trainable or otherwise grad-tracked input.
    pub fn param(&mut self, value: Arr) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Constant input; no gradient is tracked through it.
    pub fn constant(&mut self, value: Arr) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape, vb.shape, "add shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let value = Arr::new(va.shape.clone(), data);
        let grad = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), grad)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape, vb.shape, "sub shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let value = Arr::new(va.shape.clone(), data);
        let grad = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), grad)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape, vb.shape, "mul shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let value = Arr::new(va.shape.clone(), data);
        let grad = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), grad)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let value = Arr::new(va.shape.clone(), va.data.iter().map(|x| x * c).collect());
        let grad = self.ng(a);
        self.push(value, Op::Scale(a, c), grad)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let value = Arr::new(va.shape.clone(), va.data.iter().map(|x| x + c).collect());
        let grad = self.ng(a);
        self.push(value, Op::AddConst(a, c), grad)
    }

    /// Tensor times a scalar node.
    pub fn scale_by(&mut self, t: NodeId, s: NodeId) -> NodeId {
        let sv = self.nodes[s.0].value.item();
        let vt = &self.nodes[t.0].value;
        let value = Arr::new(vt.shape.clone(), vt.data.iter().map(|x| x * sv).collect());
        let grad = self.ng(t) || self.ng(s);
        self.push(value, Op::ScaleByScalar { t, s }, grad)
    }

    /// 2-d convolution, stride 1, square kernel, zero padding `pad`.
    /// `input` is CHW, `weight` is [out_c, in_c, k, k], `bias` [out_c].
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>, pad: usize) -> NodeId {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let (in_c, h, wd) = x.chw();
        assert_eq!(w.shape.len(), 4, "conv weight must be [O,I,k,k]");
        let (out_c, w_in, k) = (w.shape[0], w.shape[1], w.shape[2]);
        assert_eq!(w.shape[3], k, "square kernels only");
        assert_eq!(w_in, in_c, "conv channel mismatch");
        let oh = h + 2 * pad + 1 - k;
        let ow = wd + 2 * pad + 1 - k;
        let bias_vals: Option<Vec<f64>> = bias.map(|b| {
            let bv = &self.nodes[b.0].value;
            assert_eq!(bv.shape, vec![out_c], "bias shape");
            bv.data.clone()
        });

        let mut out = vec![0.0f64; out_c * oh * ow];
        for oc in 0..out_c {
            let base = bias_vals.as_ref().map_or(0.0, |b| b[oc]);
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = base;
                    for ic in 0..in_c {
                        for ki in 0..k {
                            let si = i as isize + ki as isize - pad as isize;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let sj = j as isize + kj as isize - pad as isize;
                                if sj < 0 || sj >= wd as isize {
                                    continue;
                                }
                                acc += x.data[(ic * h + si as usize) * wd + sj as usize]
                                    * w.data[((oc * in_c + ic) * k + ki) * k + kj];
                            }
                        }
                    }
                    out[(oc * oh + i) * ow + j] = acc;
                }
            }
        }
        let grad =
            self.ng(input) || self.ng(weight) || bias.map_or(false, |b| self.ng(b));
        self.push(
            Arr::new(vec![out_c, oh, ow], out),
            Op::Conv2d { input, weight, bias, pad },
            grad,
        )
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let value = Arr::new(va.shape.clone(), data);
        let grad = self.ng(a);
        self.push(value, Op::LeakyRelu(a, slope), grad)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let value = Arr::new(va.shape.clone(), data);
        let grad = self.ng(a);
        self.push(value, Op::Sigmoid(a), grad)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let value = Arr::new(va.shape.clone(), va.data.iter().map(|x| x.abs()).collect());
        let grad = self.ng(a);
        self.push(value, Op::Abs(a), grad)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let value = Arr::new(va.shape.clone(), va.data.iter().map(|x| x.sqrt()).collect());
        let grad = self.ng(a);
        self.push(value, Op::Sqrt(a), grad)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let value = Arr::new(va.shape.clone(), va.data.iter().map(|x| 1.0 / x).collect());
        let grad = self.ng(a);
        self.push(value, Op::Recip(a), grad)
    }

    /// Nearest-neighbor 2x upsampling of a CHW tensor.
    pub fn upsample_nearest2(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (c, h, w) = va.chw();
        let mut out = vec![0.0f64; c * h * 2 * w * 2];
        for ch in 0..c {
            for i in 0..h * 2 {
                for j in 0..w * 2 {
                    out[(ch * h * 2 + i) * w * 2 + j] = va.data[(ch * h + i / 2) * w + j / 2];
                }
            }
        }
        let grad = self.ng(a);
        self.push(Arr::new(vec![c, h * 2, w * 2], out), Op::UpNearest2(a), grad)
    }

    fn bilinear_taps(in_len: usize, out_len: usize, o: usize) -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5)
            .clamp(0.0, in_len as f64 - 1.0);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        (lo, hi, src - lo as f64)
    }

    /// Bilinear resize of a CHW tensor to `(oh, ow)`, half-pixel centers.
    pub fn upsample_bilinear(&mut self, a: NodeId, oh: usize, ow: usize) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (c, h, w) = va.chw();
        let mut out = vec![0.0f64; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                let (y0, y1, fy) = Self::bilinear_taps(h, oh, i);
                for j in 0..ow {
                    let (x0, x1, fx) = Self::bilinear_taps(w, ow, j);
                    let v00 = va.data[(ch * h + y0) * w + x0];
                    let v01 = va.data[(ch * h + y0) * w + x1];
                    let v10 = va.data[(ch * h + y1) * w + x0];
                    let v11 = va.data[(ch * h + y1) * w + x1];
                    out[(ch * oh + i) * ow + j] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                        + fy * ((1.0 - fx) * v10 + fx * v11);
                }
            }
        }
        let grad = self.ng(a);
        self.push(
            Arr::new(vec![c, oh, ow], out),
            Op::UpBilinear { t: a, oh, ow },
            grad,
        )
    }

    fn pool_span(in_len: usize, out_len: usize, o: usize) -> (usize, usize) {
        let lo = o * in_len / out_len;
        let hi = ((o + 1) * in_len).div_ceil(out_len).max(lo + 1).min(in_len.max(lo + 1));
        (lo, hi.min(in_len).max(lo + 1))
    }

    /// Adaptive average pooling of a CHW tensor to `(oh, ow)`.
    pub fn adaptive_avg_pool(&mut self, a: NodeId, oh: usize, ow: usize) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (c, h, w) = va.chw();
        let mut out = vec![0.0f64; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                let (i0, i1) = Self::pool_span(h, oh, i);
                for j in 0..ow {
                    let (j0, j1) = Self::pool_span(w, ow, j);
                    let mut acc = 0.0;
                    for si in i0..i1 {
                        for sj in j0..j1 {
                            acc += va.data[(ch * h + si) * w + sj];
                        }
                    }
                    out[(ch * oh + i) * ow + j] = acc / ((i1 - i0) * (j1 - j0)) as f64;
                }
            }
        }
        let grad = self.ng(a);
        self.push(
            Arr::new(vec![c, oh, ow], out),
            Op::AdaptiveAvgPool { t: a, oh, ow },
            grad,
        )
    }

    /// 2x2 average pooling with stride 2 (even input sizes).
    pub fn avg_pool2(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (c, h, w) = va.chw();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even sizes");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0f64; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            acc += va.data[(ch * h + 2 * i + di) * w + 2 * j + dj];
                        }
                    }
                    out[(ch * oh + i) * ow + j] = acc / 4.0;
                }
            }
        }
        let grad = self.ng(a);
        self.push(Arr::new(vec![c, oh, ow], out), Op::AvgPool2(a), grad)
    }

    /// Concatenates CHW tensors along channels; all must share (h, w).
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let (_, h, w) = self.nodes[parts[0].0].value.chw();
        let mut total_c = 0;
        for &p in parts {
            let (c, ph, pw) = self.nodes[p.0].value.chw();
            assert_eq!((ph, pw), (h, w), "concat resolution mismatch");
            total_c += c;
        }
        let mut out = Vec::with_capacity(total_c * h * w);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].value.data);
        }
        let grad = parts.iter().any(|&p| self.ng(p));
        self.push(
            Arr::new(vec![total_c, h, w], out),
            Op::ConcatCh(parts.to_vec()),
            grad,
        )
    }

    /// Softmax over a rank-1 tensor.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.shape.len(), 1, "softmax over vectors only");
        let max = va.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = va.data.iter().map(|x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let value = Arr::new(va.shape.clone(), exps.iter().map(|e| e / total).collect());
        let grad = self.ng(a);
        self.push(value, Op::Softmax(a), grad)
    }

    /// Scalar element of a rank-1 tensor.
    pub fn select(&mut self, a: NodeId, idx: usize) -> NodeId {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.shape.len(), 1, "select from vectors only");
        let value = Arr::scalar(va.data[idx]);
        let grad = self.ng(a);
        self.push(value, Op::Select { t: a, idx }, grad)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let value = Arr::scalar(va.data.iter().sum());
        let grad = self.ng(a);
        self.push(value, Op::Sum(a), grad)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let value = Arr::scalar(va.data.iter().sum::<f64>() / va.numel() as f64);
        let grad = self.ng(a);
        self.push(value, Op::Mean(a), grad)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape, vb.shape, "dot shape mismatch");
        let value = Arr::scalar(va.data.iter().zip(&vb.data).map(|(x, y)| x * y).sum());
        let grad = self.ng(a) || self.ng(b);
        self.push(value, Op::Dot(a, b), grad)
    }

    /// `m` is [rows, cols], `v` is [cols]; result is [rows].
    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> NodeId {
        let (vm, vv) = (&self.nodes[m.0].value, &self.nodes[v.0].value);
        assert_eq!(vm.shape.len(), 2, "matvec matrix rank");
        let (rows, cols) = (vm.shape[0], vm.shape[1]);
        assert_eq!(vv.shape, vec![cols], "matvec dim mismatch");
        let mut out = vec![0.0f64; rows];
        for i in 0..rows {
            let mut acc = 0.0;
            for j in 0..cols {
                acc += vm.data[i * cols + j] * vv.data[j];
            }
            out[i] = acc;
        }
        let grad = self.ng(m) || self.ng(v);
        self.push(Arr::new(vec![rows], out), Op::MatVec { m, v }, grad)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let va = &self.nodes[a.0].value;
        assert_eq!(
            shape.iter().product::<usize>(),
            va.numel(),
            "reshape element count mismatch"
        );
        let value = Arr::new(shape, va.data.clone());
        let grad = self.ng(a);
        self.push(value, Op::Reshape { t: a }, grad)
    }

    /// Reverse-mode sweep from the scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Arr>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Arr::new(
            self.nodes[loss.0].value.shape.clone(),
            vec![1.0],
        ));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn bump(&self, grads: &mut [Option<Arr>], target: NodeId, update: impl FnOnce(&mut Arr)) {
        if !self.ng(target) {
            return;
        }
        let slot = &mut grads[target.0];
        if slot.is_none() {
            *slot = Some(Arr::zeros(self.nodes[target.0].value.shape.clone()));
        }
        update(slot.as_mut().expect("initialized above"));
    }

    fn accumulate(&self, idx: usize, gout: &Arr, grads: &mut [Option<Arr>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.bump(grads, *a, |g| {
                    for (gi, go) in g.data.iter_mut().zip(&gout.data) {
                        *gi += go;
                    }
                });
                self.bump(grads, *b, |g| {
                    for (gi, go) in g.data.iter_mut().zip(&gout.data) {
                        *gi += go;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.bump(grads, *a, |g| {
                    for (gi, go) in g.data.iter_mut().zip(&gout.data) {
                        *gi += go;
                    }
                });
                self.bump(grads, *b, |g| {
                    for (gi, go) in g.data.iter_mut().zip(&gout.data) {
                        *gi -= go;
                    }
                });
            }
            Op::Mul(a, b) => {
                let vb = self.nodes[b.0].value.data.clone();
                self.bump(grads, *a, |g| {
                    for i in 0..g.data.len() {
                        g.data[i] += gout.data[i] * vb[i];
                    }
                });
                let va = self.nodes[a.0].value.data.clone();
                self.bump(grads, *b, |g| {
                    for i in 0..g.data.len() {
                        g.data[i] += gout.data[i] * va[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.bump(grads, *a, |g| {
                    for (gi, go) in g.data.iter_mut().zip(&gout.data) {
                        *gi += c * go;
                    }
                });
            }
            Op::AddConst(a, _) => {
                self.bump(grads, *a, |g| {
                    for (gi, go) in g.data.iter_mut().zip(&gout.data) {
                        *gi += go;
                    }
                });
            }
            Op::ScaleByScalar { t, s } => {
                let sv = self.nodes[s.0].value.item();
                self.bump(grads, *t, |g| {
                    for (gi, go) in g.data.iter_mut().zip(&gout.data) {
                        *gi += sv * go;
                    }
                });
                let tv = &self.nodes[t.0].value;
                let contribution: f64 = tv.data.iter().zip(&gout.data).map(|(x, g)| x * g).sum();
                self.bump(grads, *s, |g| {
                    g.data[0] += contribution;
                });
            }
            Op::Conv2d { input, weight, bias, pad } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let (in_c, h, wd) = x.chw();
                let (out_c, _, k) = (w.shape[0], w.shape[1], w.shape[2]);
                let (oh, ow) = (gout.shape[1], gout.shape[2]);
                let pad = *pad as isize;

                if self.ng(*input) {
                    let mut dx = vec![0.0f64; x.numel()];
                    for oc in 0..out_c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let go = gout.data[(oc * oh + i) * ow + j];
                                if go == 0.0 {
                                    continue;
                                }
                                for ic in 0..in_c {
                                    for ki in 0..k {
                                        let si = i as isize + ki as isize - pad;
                                        if si < 0 || si >= h as isize {
                                            continue;
                                        }
                                        for kj in 0..k {
                                            let sj = j as isize + kj as isize - pad;
                                            if sj < 0 || sj >= wd as isize {
                                                continue;
                                            }
                                            dx[(ic * h + si as usize) * wd + sj as usize] += go
                                                * w.data[((oc * in_c + ic) * k + ki) * k + kj];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.bump(grads, *input, |g| {
                        for (gi, d) in g.data.iter_mut().zip(&dx) {
                            *gi += d;
                        }
                    });
                }
                if self.ng(*weight) {
                    let mut dw = vec![0.0f64; w.numel()];
                    for oc in 0..out_c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let go = gout.data[(oc * oh + i) * ow + j];
                                if go == 0.0 {
                                    continue;
                                }
                                for ic in 0..in_c {
                                    for ki in 0..k {
                                        let si = i as isize + ki as isize - pad;
                                        if si < 0 || si >= h as isize {
                                            continue;
                                        }
                                        for kj in 0..k {
                                            let sj = j as isize + kj as isize - pad;
                                            if sj < 0 || sj >= wd as isize {
                                                continue;
                                            }
                                            dw[((oc * in_c + ic) * k + ki) * k + kj] += go
                                                * x.data[(ic * h + si as usize) * wd + sj as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.bump(grads, *weight, |g| {
                        for (gi, d) in g.data.iter_mut().zip(&dw) {
                            *gi += d;
                        }
                    });
                }
                if let Some(b) = bias {
                    if self.ng(*b) {
                        let mut db = vec![0.0f64; out_c];
                        for oc in 0..out_c {
                            for i in 0..oh {
                                for j in 0..ow {
                                    db[oc] += gout.data[(oc * oh + i) * ow + j];
                                }
                            }
                        }
                        self.bump(grads, *b, |g| {
                            for (gi, d) in g.data.iter_mut().zip(&db) {
                                *gi += d;
                            }
                        });
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let x = self.nodes[a.0].value.data.clone();
                self.bump(grads, *a, |g| {
                    for i in 0..g.data.len() {
                        g.data[i] += gout.data[i] * if x[i] > 0.0 { 1.0 } else { slope };
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[idx].value.data.clone();
                self.bump(grads, *a, |g| {
                    for i in 0..g.data.len() {
                        g.data[i] += gout.data[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Abs(a) => {
                let x = self.nodes[a.0].value.data.clone();
                self.bump(grads, *a, |g| {
                    for i in 0..g.data.len() {
                        g.data[i] += gout.data[i] * x[i].signum() * if x[i] == 0.0 { 0.0 } else { 1.0 };
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = self.nodes[idx].value.data.clone();
                self.bump(grads, *a, |g| {
                    for i in 0..g.data.len() {
                        g.data[i] += gout.data[i] * 0.5 / y[i];
                    }
                });
            }
            Op::Recip(a) => {
                let y = self.nodes[idx].value.data.clone();
                self.bump(grads, *a, |g| {
                    for i in 0..g.data.len() {
                        g.data[i] -= gout.data[i] * y[i] * y[i];
                    }
                });
            }
            Op::UpNearest2(a) => {
                let (c, h, w) = self.nodes[a.0].value.chw();
                self.bump(grads, *a, |g| {
                    for ch in 0..c {
                        for i in 0..h * 2 {
                            for j in 0..w * 2 {
                                g.data[(ch * h + i / 2) * w + j / 2] +=
                                    gout.data[(ch * h * 2 + i) * w * 2 + j];
                            }
                        }
                    }
                });
            }
            Op::UpBilinear { t, oh, ow } => {
                let (c, h, w) = self.nodes[t.0].value.chw();
                let (oh, ow) = (*oh, *ow);
                self.bump(grads, *t, |g| {
                    for ch in 0..c {
                        for i in 0..oh {
                            let (y0, y1, fy) = Tape::bilinear_taps(h, oh, i);
                            for j in 0..ow {
                                let (x0, x1, fx) = Tape::bilinear_taps(w, ow, j);
                                let go = gout.data[(ch * oh + i) * ow + j];
                                g.data[(ch * h + y0) * w + x0] += go * (1.0 - fy) * (1.0 - fx);
                                g.data[(ch * h + y0) * w + x1] += go * (1.0 - fy) * fx;
                                g.data[(ch * h + y1) * w + x0] += go * fy * (1.0 - fx);
                                g.data[(ch * h + y1) * w + x1] += go * fy * fx;
                            }
                        }
                    }
                });
            }
            Op::AdaptiveAvgPool { t, oh, ow } => {
                let (c, h, w) = self.nodes[t.0].value.chw();
                let (oh, ow) = (*oh, *ow);
                self.bump(grads, *t, |g| {
                    for ch in 0..c {
                        for i in 0..oh {
                            let (i0, i1) = Tape::pool_span(h, oh, i);
                            for j in 0..ow {
                                let (j0, j1) = Tape::pool_span(w, ow, j);
                                let share = gout.data[(ch * oh + i) * ow + j]
                                    / ((i1 - i0) * (j1 - j0)) as f64;
                                for si in i0..i1 {
                                    for sj in j0..j1 {
                                        g.data[(ch * h + si) * w + sj] += share;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::AvgPool2(a) => {
                let (c, h, w) = self.nodes[a.0].value.chw();
                let (oh, ow) = (h / 2, w / 2);
                self.bump(grads, *a, |g| {
                    for ch in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let share = gout.data[(ch * oh + i) * ow + j] / 4.0;
                                for di in 0..2 {
                                    for dj in 0..2 {
                                        g.data[(ch * h + 2 * i + di) * w + 2 * j + dj] += share;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::ConcatCh(parts) => {
                let mut offset = 0usize;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    self.bump(grads, p, |g| {
                        for i in 0..len {
                            g.data[i] += gout.data[offset + i];
                        }
                    });
                    offset += len;
                }
            }
            Op::Softmax(a) => {
                let y = &self.nodes[idx].value.data;
                let inner: f64 = y.iter().zip(&gout.data).map(|(yi, gi)| yi * gi).sum();
                let y = y.clone();
                self.bump(grads, *a, |g| {
                    for i in 0..g.data.len() {
                        g.data[i] += y[i] * (gout.data[i] - inner);
                    }
                });
            }
            Op::Select { t, idx: sel } => {
                let sel = *sel;
                self.bump(grads, *t, |g| {
                    g.data[sel] += gout.data[0];
                });
            }
            Op::Sum(a) => {
                let go = gout.data[0];
                self.bump(grads, *a, |g| {
                    for gi in &mut g.data {
                        *gi += go;
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel() as f64;
                let go = gout.data[0] / n;
                self.bump(grads, *a, |g| {
                    for gi in &mut g.data {
                        *gi += go;
                    }
                });
            }
            Op::Dot(a, b) => {
                let go = gout.data[0];
                let vb = self.nodes[b.0].value.data.clone();
                self.bump(grads, *a, |g| {
                    for i in 0..g.data.len() {
                        g.data[i] += go * vb[i];
                    }
                });
                let va = self.nodes[a.0].value.data.clone();
                self.bump(grads, *b, |g| {
                    for i in 0..g.data.len() {
                        g.data[i] += go * va[i];
                    }
                });
            }
            Op::MatVec { m, v } => {
                let vm = &self.nodes[m.0].value;
                let (rows, cols) = (vm.shape[0], vm.shape[1]);
                let vv = self.nodes[v.0].value.data.clone();
                self.bump(grads, *m, |g| {
                    for i in 0..rows {
                        for j in 0..cols {
                            g.data[i * cols + j] += gout.data[i] * vv[j];
                        }
                    }
                });
                let md = vm.data.clone();
                self.bump(grads, *v, |g| {
                    for j in 0..cols {
                        let mut acc = 0.0;
                        for i in 0..rows {
                            acc += gout.data[i] * md[i * cols + j];
                        }
                        g.data[j] += acc;
                    }
                });
            }
            Op::Reshape { t } => {
                self.bump(grads, *t, |g| {
                    for (gi, go) in g.data.iter_mut().zip(&gout.data) {
                        *gi += go;
                    }
                });
            }
        }
    }
}

/// Cosine similarity of two vector nodes, built from primitive ops. The
/// norms are guarded with `eps` so zero vectors do not produce NaN.
pub fn cosine_node(tape: &mut Tape, a: NodeId, b: NodeId, eps: f64) -> NodeId {
    let dot_ab = tape.dot(a, b);
    let dot_aa = tape.dot(a, a);
    let dot_bb = tape.dot(b, b);
    let na = tape.add_const(dot_aa, eps);
    let nb = tape.add_const(dot_bb, eps);
    let sa = tape.sqrt(na);
    let sb = tape.sqrt(nb);
    let denom = tape.mul(sa, sb);
    let inv = tape.recip(denom);
    tape.mul(dot_ab, inv)
}

/// L2-normalizes a vector node: v / sqrt(v.v + eps).
pub fn normalize_node(tape: &mut Tape, v: NodeId, eps: f64) -> NodeId {
    let dot_vv = tape.dot(v, v);
    let guarded = tape.add_const(dot_vv, eps);
    let norm = tape.sqrt(guarded);
    let inv = tape.recip(norm);
    tape.scale_by(v, inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn random_arr(shape: Vec<usize>, rng: &mut ChaCha20Rng) -> Arr {
        let n: usize = shape.iter().product();
        Arr::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central finite-difference check of autodiff gradients for a scalar
    /// function of several tensor inputs.
    fn check_gradients(
        inputs: &[Arr],
        f: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|a| tape.param(a.clone())).collect();
        let loss = f(&mut tape, &ids);
        let grads = tape.backward(loss);

        let h = 1e-5;
        for (which, input) in inputs.iter().enumerate() {
            let analytic = grads.get(ids[which], &tape);
            for elem in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[which].data[elem] += h;
                let mut t_plus = Tape::new();
                let ids_p: Vec<NodeId> = plus.iter().map(|a| t_plus.param(a.clone())).collect();
                let lp = f(&mut t_plus, &ids_p);
                let vp = t_plus.value(lp).item();

                let mut minus = inputs.to_vec();
                minus[which].data[elem] -= h;
                let mut t_minus = Tape::new();
                let ids_m: Vec<NodeId> = minus.iter().map(|a| t_minus.param(a.clone())).collect();
                let lm = f(&mut t_minus, &ids_m);
                let vm = t_minus.value(lm).item();

                let numeric = (vp - vm) / (2.0 * h);
                let got = analytic.data[elem];
                let denom = numeric.abs().max(got.abs()).max(1e-6);
                assert!(
                    (numeric - got).abs() / denom < tol,
                    "input {which} elem {elem}: numeric {numeric} vs autodiff {got}"
                );
            }
        }
    }

    fn weighted_readout(tape: &mut Tape, t: NodeId) -> NodeId {
        // Non-uniform readout so gradients are not constant over elements.
        let n = tape.value(t).numel();
        let shape = tape.value(t).shape.clone();
        let weights = Arr::new(shape.clone(), (0..n).map(|i| ((i as f64) * 0.7).sin() + 0.2).collect());
        let w = tape.constant(weights);
        let prod = tape.mul(t, w);
        tape.sum(prod)
    }

    #[test]
    fn elementwise_op_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = random_arr(vec![3, 4], &mut rng);
        let b = random_arr(vec![3, 4], &mut rng);
        check_gradients(&[a.clone(), b.clone()], &|tape, ids| {
            let s = tape.add(ids[0], ids[1]);
            let d = tape.sub(s, ids[1]);
            let m = tape.mul(d, ids[1]);
            let sc = tape.scale(m, 1.7);
            let ac = tape.add_const(sc, 0.3);
            let lr = tape.leaky_relu(ac, 0.2);
            let sg = tape.sigmoid(lr);
            weighted_readout(tape, sg)
        }, 1e-5);
    }

    #[test]
    fn abs_sqrt_recip_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        // Keep values away from the |x| kink and from 0 for sqrt/recip.
        let mut a = random_arr(vec![8], &mut rng);
        for v in &mut a.data {
            *v = 0.5 + v.abs();
        }
        check_gradients(&[a], &|tape, ids| {
            let ab = tape.abs(ids[0]);
            let sq = tape.sqrt(ab);
            let rc = tape.recip(sq);
            weighted_readout(tape, rc)
        }, 1e-4);
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = random_arr(vec![2, 5, 4], &mut rng);
        let w = random_arr(vec![3, 2, 3, 3], &mut rng);
        let b = random_arr(vec![3], &mut rng);
        check_gradients(&[x, w, b], &|tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], Some(ids[2]), 1);
            weighted_readout(tape, y)
        }, 1e-4);
    }

    #[test]
    fn conv2d_1x1_without_bias_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x = random_arr(vec![3, 4, 4], &mut rng);
        let w = random_arr(vec![2, 3, 1, 1], &mut rng);
        check_gradients(&[x, w], &|tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], None, 0);
            weighted_readout(tape, y)
        }, 1e-4);
    }

    #[test]
    fn resampling_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let x = random_arr(vec![2, 4, 4], &mut rng);
        check_gradients(&[x.clone()], &|tape, ids| {
            let up = tape.upsample_nearest2(ids[0]);
            let bl = tape.upsample_bilinear(up, 6, 6);
            let pooled = tape.adaptive_avg_pool(bl, 3, 5);
            weighted_readout(tape, pooled)
        }, 1e-4);
        check_gradients(&[x], &|tape, ids| {
            let p = tape.avg_pool2(ids[0]);
            weighted_readout(tape, p)
        }, 1e-4);
    }

    #[test]
    fn softmax_select_concat_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let logits = random_arr(vec![5], &mut rng);
        let x = random_arr(vec![1, 3, 3], &mut rng);
        let y = random_arr(vec![2, 3, 3], &mut rng);
        check_gradients(&[logits, x, y], &|tape, ids| {
            let sm = tape.softmax(ids[0]);
            let s0 = tape.select(sm, 0);
            let s2 = tape.select(sm, 2);
            let sx = tape.scale_by(ids[1], s0);
            let sy = tape.scale_by(ids[2], s2);
            let cat = tape.concat_channels(&[sx, sy]);
            weighted_readout(tape, cat)
        }, 1e-4);
    }

    #[test]
    fn vector_op_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let m = random_arr(vec![4, 6], &mut rng);
        let v = random_arr(vec![6], &mut rng);
        let u = random_arr(vec![4], &mut rng);
        check_gradients(&[m, v, u], &|tape, ids| {
            let mv = tape.matvec(ids[0], ids[1]);
            let nu = normalize_node(tape, ids[2], 1e-12);
            let nmv = normalize_node(tape, mv, 1e-12);
            let cos = cosine_node(tape, nmv, nu, 1e-12);
            let drop = tape.dot(ids[1], ids[1]);
            let dp = tape.scale(drop, 0.05);
            tape.add(cos, dp)
        }, 1e-4);
    }

    #[test]
    fn mean_and_reshape_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let x = random_arr(vec![2, 3, 4], &mut rng);
        check_gradients(&[x], &|tape, ids| {
            let flat = tape.reshape(ids[0], vec![24]);
            let sm = tape.softmax(flat);
            let back = tape.reshape(sm, vec![2, 3, 4]);
            tape.mean(back)
        }, 1e-4);
    }

    #[test]
    fn constants_receive_no_gradient_storage() {
        let mut tape = Tape::new();
        let c = tape.constant(Arr::scalar(2.0));
        let p = tape.param(Arr::scalar(3.0));
        let prod = tape.mul(c, p);
        let grads = tape.backward(prod);
        assert_eq!(grads.get(p, &tape).item(), 2.0);
        assert_eq!(grads.get(c, &tape).item(), 0.0);
    }

    #[test]
    fn forward_values_are_deterministic() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let x = random_arr(vec![2, 4, 4], &mut rng);
        let w = random_arr(vec![2, 2, 3, 3], &mut rng);
        let run = |x: &Arr, w: &Arr| -> Vec<f64> {
            let mut tape = Tape::new();
            let xi = tape.constant(x.clone());
            let wi = tape.constant(w.clone());
            let y = tape.conv2d(xi, wi, None, 1);
            tape.value(y).data.clone()
        };
        assert_eq!(run(&x, &w), run(&x, &w));
    }
}

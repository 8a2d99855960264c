//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Operations are recorded on a single [`Tape`]; calling [`Tape::backward`]
//! on a scalar node replays the recording in reverse and accumulates
//! gradients for every node, including leaves. Recording order is the
//! topological order, so a single reverse sweep is a valid backward pass.

use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

/// Primitive kinds exposed through [`Tape::apply_primitive`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimitiveKind {
    Add,
    Sub,
    Mul,
    Matmul,
    Relu,
    Sigmoid,
    Log,
    Exp,
    Sum,
    Mean,
    ConcatChannels,
    Reshape,
}

enum GradFn {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Matmul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    ConcatChannels(Vec<Var>),
    Reshape(Var),
    Scale(Var, f64),
    AddScalar(Var),
    PowConst(Var, f64),
    Clamp(Var, f64, f64),
    Conv2d { input: Var, kernels: Var, stride: usize, padding: usize },
    UpsampleBilinear(Var),
    TopkMean { input: Var, indices: Vec<usize> },
    WeightedSum { inputs: Vec<Var>, weights: Vec<f64> },
    GlobalAvgPool(Var),
    AddChannelBias(Var, Var),
}

struct Node {
    value: Tensor,
    grad_fn: GradFn,
}

/// Recording tape. One tape per forward/backward cycle; a training run
/// creates a fresh tape per minibatch.
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

    /// Registers a leaf tensor (input, parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, GradFn::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, grad_fn: GradFn) -> Var {
        self.nodes.push(Node { value, grad_fn });
        Var(self.nodes.len() - 1)
    }

    /// Dispatch entry point over the primitive op set.
    pub fn apply_primitive(&mut self, kind: PrimitiveKind, inputs: &[Var]) -> Result<Var, DiffError> {
        let unary = |ins: &[Var]| -> Result<Var, DiffError> {
            ins.first().copied().ok_or(DiffError::EmptyInput("apply_primitive"))
        };
        match kind {
            PrimitiveKind::Add => self.add(inputs[0], inputs[1]),
            PrimitiveKind::Sub => self.sub(inputs[0], inputs[1]),
            PrimitiveKind::Mul => self.mul(inputs[0], inputs[1]),
            PrimitiveKind::Matmul => self.matmul(inputs[0], inputs[1]),
            PrimitiveKind::Relu => Ok(self.relu(unary(inputs)?)),
            PrimitiveKind::Sigmoid => Ok(self.sigmoid(unary(inputs)?)),
            PrimitiveKind::Log => self.log(unary(inputs)?),
            PrimitiveKind::Exp => Ok(self.exp(unary(inputs)?)),
            PrimitiveKind::Sum => Ok(self.sum(unary(inputs)?)),
            PrimitiveKind::Mean => Ok(self.mean(unary(inputs)?)),
            PrimitiveKind::ConcatChannels => self.concat_channels(inputs),
            PrimitiveKind::Reshape => {
                let v = unary(inputs)?;
                let shape = self.value(v).shape().to_vec();
                self.reshape(v, shape)
            }
        }
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(DiffError::ShapeMismatch { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.check_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data);
        Ok(self.push(out, GradFn::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.check_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data);
        Ok(self.push(out, GradFn::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.check_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data);
        Ok(self.push(out, GradFn::Mul(a, b)))
    }

    /// 2-D matrix product, `a` is (m,k) and `b` is (k,n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let da = self.value(a).data().to_vec();
        let db = self.value(b).data().to_vec();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                let row = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * row[j];
                }
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], out), GradFn::Matmul(a, b)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, GradFn::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, GradFn::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        if let Some(&bad) = self.value(a).data().iter().find(|v| **v <= 0.0) {
            return Err(DiffError::Domain { op: "log", detail: format!("non-positive input {bad}") });
        }
        let out = self.value(a).map(f64::ln);
        Ok(self.push(out, GradFn::Log(a)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, GradFn::Exp(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), GradFn::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s / n), GradFn::Mean(a))
    }

    /// Concatenates CHW tensors along the channel axis. Spatial dims must agree.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var, DiffError> {
        if inputs.is_empty() {
            return Err(DiffError::EmptyInput("concat_channels"));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if first.len() != 3 {
            return Err(DiffError::ShapeMismatch { op: "concat_channels", lhs: first, rhs: vec![] });
        }
        let (h, w) = (first[1], first[2]);
        let mut channels = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            channels += s[0];
        }
        let mut data = Vec::with_capacity(channels * h * w);
        for &v in inputs {
            data.extend_from_slice(self.value(v).data());
        }
        Ok(self.push(
            Tensor::new(vec![channels, h, w], data),
            GradFn::ConcatChannels(inputs.to_vec()),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.value(a).shape().to_vec(),
                rhs: shape,
            });
        }
        let out = Tensor::new(shape, self.value(a).data().to_vec());
        Ok(self.push(out, GradFn::Reshape(a)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, GradFn::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, GradFn::AddScalar(a))
    }

    /// Elementwise x^p for non-negative x; backward is p·x^(p-1).
    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        let out = self.value(a).map(|v| v.powf(p));
        self.push(out, GradFn::PowConst(a, p))
    }

    /// Clamp with straight-through gradient inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(out, GradFn::Clamp(a, lo, hi))
    }

    /// 2-D convolution: input CHW, kernels OCKK.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var, DiffError> {
        let si = self.value(input).shape().to_vec();
        let sk = self.value(kernels).shape().to_vec();
        if si.len() != 3 || sk.len() != 4 || sk[1] != si[0] || sk[2] != sk[3] {
            return Err(DiffError::ShapeMismatch { op: "conv2d", lhs: si, rhs: sk });
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let (o, ksz) = (sk[0], sk[2]);
        if ksz > h + 2 * padding || ksz > w + 2 * padding {
            return Err(DiffError::Domain {
                op: "conv2d",
                detail: format!("kernel {ksz} exceeds padded input {}x{}", h + 2 * padding, w + 2 * padding),
            });
        }
        let oh = (h + 2 * padding - ksz) / stride + 1;
        let ow = (w + 2 * padding - ksz) / stride + 1;
        let din = self.value(input).data();
        let dk = self.value(kernels).data();
        let mut out = vec![0.0; o * oh * ow];
        conv2d_forward(din, dk, c, h, w, o, ksz, stride, padding, oh, ow, &mut out);
        Ok(self.push(
            Tensor::new(vec![o, oh, ow], out),
            GradFn::Conv2d { input, kernels, stride, padding },
        ))
    }

    /// Corner-aligned bilinear resize of a CHW tensor.
    pub fn upsample_bilinear(&mut self, input: Var, target_h: usize, target_w: usize) -> Result<Var, DiffError> {
        let s = self.value(input).shape().to_vec();
        if s.len() != 3 {
            return Err(DiffError::ShapeMismatch { op: "upsample_bilinear", lhs: s, rhs: vec![] });
        }
        if target_h == 0 || target_w == 0 {
            return Err(DiffError::Domain { op: "upsample_bilinear", detail: "target dims must be >= 1".into() });
        }
        let out = bilinear_resize(self.value(input), target_h, target_w);
        Ok(self.push(out, GradFn::UpsampleBilinear(input)))
    }

    /// Mean of the k = max(1, ceil(ratio * n)) largest entries, ties broken
    /// by lowest flat index.
    pub fn topk_mean(&mut self, input: Var, ratio: f64) -> Result<Var, DiffError> {
        let n = self.value(input).len();
        if n == 0 {
            return Err(DiffError::EmptyInput("topk_mean"));
        }
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(DiffError::Domain { op: "topk_mean", detail: format!("ratio {ratio} outside (0,1]") });
        }
        let k = topk_count(n, ratio);
        let data = self.value(input).data();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| data[b].partial_cmp(&data[a]).unwrap().then(a.cmp(&b)));
        idx.truncate(k);
        let mean = idx.iter().map(|&i| data[i]).sum::<f64>() / k as f64;
        Ok(self.push(Tensor::scalar(mean), GradFn::TopkMean { input, indices: idx }))
    }

    /// Weighted sum of scalar nodes with constant weights.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: &[f64]) -> Result<Var, DiffError> {
        if inputs.is_empty() {
            return Err(DiffError::EmptyInput("weighted_sum"));
        }
        if inputs.len() != weights.len() {
            return Err(DiffError::ShapeMismatch {
                op: "weighted_sum",
                lhs: vec![inputs.len()],
                rhs: vec![weights.len()],
            });
        }
        let mut acc = 0.0;
        for (&v, &w) in inputs.iter().zip(weights) {
            acc += w * self.value(v).item();
        }
        Ok(self.push(
            Tensor::scalar(acc),
            GradFn::WeightedSum { inputs: inputs.to_vec(), weights: weights.to_vec() },
        ))
    }

    /// CHW -> C vector of per-channel spatial means.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, DiffError> {
        let s = self.value(input).shape().to_vec();
        if s.len() != 3 {
            return Err(DiffError::ShapeMismatch { op: "global_avg_pool", lhs: s, rhs: vec![] });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let hw = (h * w) as f64;
        let data = self.value(input).data();
        let out: Vec<f64> = (0..c)
            .map(|ch| data[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / hw)
            .collect();
        Ok(self.push(Tensor::new(vec![c, 1], out), GradFn::GlobalAvgPool(input)))
    }

    /// Adds a per-channel bias vector (shape [C]) to a CHW tensor.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var, DiffError> {
        let s = self.value(input).shape().to_vec();
        let sb = self.value(bias).shape().to_vec();
        if s.len() != 3 || sb != [s[0]] {
            return Err(DiffError::ShapeMismatch { op: "add_channel_bias", lhs: s, rhs: sb });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let din = self.value(input).data();
        let db = self.value(bias).data();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let b = db[ch];
            out.extend(din[ch * h * w..(ch + 1) * h * w].iter().map(|v| v + b));
        }
        Ok(self.push(Tensor::new(s, out), GradFn::AddChannelBias(input, bias)))
    }

    /// Reverse sweep from a scalar root; returns one gradient per node
    /// (same shape as the node's value), accumulated over fan-out.
    pub fn backward(&self, root: Var) -> Result<Gradients, DiffError> {
        if self.value(root).len() != 1 {
            return Err(DiffError::NonScalarRoot(self.value(root).shape().to_vec()));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        grads[root.0].data_mut()[0] = 1.0;

        for i in (0..=root.0).rev() {
            if grads[i].data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let gout = grads[i].clone();
            match &self.nodes[i].grad_fn {
                GradFn::Leaf => {}
                GradFn::Add(a, b) => {
                    accumulate(&mut grads[a.0], gout.data(), |g| g);
                    accumulate(&mut grads[b.0], gout.data(), |g| g);
                }
                GradFn::Sub(a, b) => {
                    accumulate(&mut grads[a.0], gout.data(), |g| g);
                    accumulate(&mut grads[b.0], gout.data(), |g| -g);
                }
                GradFn::Mul(a, b) => {
                    let da = self.value(*a).data().to_vec();
                    let db = self.value(*b).data().to_vec();
                    for (j, g) in gout.data().iter().enumerate() {
                        grads[a.0].data_mut()[j] += g * db[j];
                    }
                    for (j, g) in gout.data().iter().enumerate() {
                        grads[b.0].data_mut()[j] += g * da[j];
                    }
                }
                GradFn::Matmul(a, b) => {
                    let sa = self.value(*a).shape();
                    let sb = self.value(*b).shape();
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let da = self.value(*a).data().to_vec();
                    let db = self.value(*b).data().to_vec();
                    // dA = G B^T
                    for i2 in 0..m {
                        for j in 0..n {
                            let g = gout.data()[i2 * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                grads[a.0].data_mut()[i2 * k + p] += g * db[p * n + j];
                            }
                        }
                    }
                    // dB = A^T G
                    for p in 0..k {
                        for i2 in 0..m {
                            let av = da[i2 * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                grads[b.0].data_mut()[p * n + j] += av * gout.data()[i2 * n + j];
                            }
                        }
                    }
                }
                GradFn::Relu(a) => {
                    let din = self.value(*a).data().to_vec();
                    for (j, g) in gout.data().iter().enumerate() {
                        if din[j] > 0.0 {
                            grads[a.0].data_mut()[j] += g;
                        }
                    }
                }
                GradFn::Sigmoid(a) => {
                    let out = self.nodes[i].value.data().to_vec();
                    for (j, g) in gout.data().iter().enumerate() {
                        grads[a.0].data_mut()[j] += g * out[j] * (1.0 - out[j]);
                    }
                }
                GradFn::Log(a) => {
                    let din = self.value(*a).data().to_vec();
                    for (j, g) in gout.data().iter().enumerate() {
                        grads[a.0].data_mut()[j] += g / din[j];
                    }
                }
                GradFn::Exp(a) => {
                    let out = self.nodes[i].value.data().to_vec();
                    for (j, g) in gout.data().iter().enumerate() {
                        grads[a.0].data_mut()[j] += g * out[j];
                    }
                }
                GradFn::Sum(a) => {
                    let g = gout.data()[0];
                    for v in grads[a.0].data_mut() {
                        *v += g;
                    }
                }
                GradFn::Mean(a) => {
                    let n = self.value(*a).len() as f64;
                    let g = gout.data()[0] / n;
                    for v in grads[a.0].data_mut() {
                        *v += g;
                    }
                }
                GradFn::ConcatChannels(inputs) => {
                    let mut offset = 0;
                    for &v in inputs {
                        let n = self.value(v).len();
                        let slice = &gout.data()[offset..offset + n];
                        for (j, g) in slice.iter().enumerate() {
                            grads[v.0].data_mut()[j] += g;
                        }
                        offset += n;
                    }
                }
                GradFn::Reshape(a) => {
                    accumulate(&mut grads[a.0], gout.data(), |g| g);
                }
                GradFn::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads[a.0], gout.data(), |g| g * c);
                }
                GradFn::AddScalar(a) => {
                    accumulate(&mut grads[a.0], gout.data(), |g| g);
                }
                GradFn::PowConst(a, p) => {
                    let p = *p;
                    let din = self.value(*a).data().to_vec();
                    for (j, g) in gout.data().iter().enumerate() {
                        let d = if p == 0.0 { 0.0 } else { p * din[j].powf(p - 1.0) };
                        grads[a.0].data_mut()[j] += g * d;
                    }
                }
                GradFn::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let din = self.value(*a).data().to_vec();
                    for (j, g) in gout.data().iter().enumerate() {
                        if din[j] > lo && din[j] < hi {
                            grads[a.0].data_mut()[j] += g;
                        }
                    }
                }
                GradFn::Conv2d { input, kernels, stride, padding } => {
                    let si = self.value(*input).shape();
                    let sk = self.value(*kernels).shape();
                    let (c, h, w) = (si[0], si[1], si[2]);
                    let (o, ksz) = (sk[0], sk[2]);
                    let so = self.nodes[i].value.shape();
                    let (oh, ow) = (so[1], so[2]);
                    let din = self.value(*input).data().to_vec();
                    let dk = self.value(*kernels).data().to_vec();
                    let mut gin = vec![0.0; c * h * w];
                    let mut gk = vec![0.0; o * c * ksz * ksz];
                    conv2d_backward(
                        &din, &dk, gout.data(), c, h, w, o, ksz, *stride, *padding, oh, ow,
                        &mut gin, &mut gk,
                    );
                    accumulate(&mut grads[input.0], &gin, |g| g);
                    accumulate(&mut grads[kernels.0], &gk, |g| g);
                }
                GradFn::UpsampleBilinear(input) => {
                    let si = self.value(*input).shape();
                    let (c, h, w) = (si[0], si[1], si[2]);
                    let so = self.nodes[i].value.shape();
                    let (th, tw) = (so[1], so[2]);
                    for ch in 0..c {
                        for oy in 0..th {
                            let (y0, y1, fy) = corner_aligned(oy, th, h);
                            for ox in 0..tw {
                                let (x0, x1, fx) = corner_aligned(ox, tw, w);
                                let g = gout.data()[ch * th * tw + oy * tw + ox];
                                if g == 0.0 {
                                    continue;
                                }
                                let base = ch * h * w;
                                let gi = grads[input.0].data_mut();
                                gi[base + y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                                gi[base + y0 * w + x1] += g * (1.0 - fy) * fx;
                                gi[base + y1 * w + x0] += g * fy * (1.0 - fx);
                                gi[base + y1 * w + x1] += g * fy * fx;
                            }
                        }
                    }
                }
                GradFn::TopkMean { input, indices } => {
                    let g = gout.data()[0] / indices.len() as f64;
                    for &j in indices {
                        grads[input.0].data_mut()[j] += g;
                    }
                }
                GradFn::WeightedSum { inputs, weights } => {
                    let g = gout.data()[0];
                    for (&v, &w) in inputs.iter().zip(weights) {
                        grads[v.0].data_mut()[0] += g * w;
                    }
                }
                GradFn::AddChannelBias(input, bias) => {
                    let s = self.value(*input).shape();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    accumulate(&mut grads[input.0], gout.data(), |g| g);
                    for ch in 0..c {
                        let sum: f64 = gout.data()[ch * h * w..(ch + 1) * h * w].iter().sum();
                        grads[bias.0].data_mut()[ch] += sum;
                    }
                }
                GradFn::GlobalAvgPool(input) => {
                    let si = self.value(*input).shape();
                    let (c, h, w) = (si[0], si[1], si[2]);
                    let hw = (h * w) as f64;
                    for ch in 0..c {
                        let g = gout.data()[ch] / hw;
                        if g == 0.0 {
                            continue;
                        }
                        let slice = &mut grads[input.0].data_mut()[ch * h * w..(ch + 1) * h * w];
                        for v in slice {
                            *v += g;
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &Tensor {
        &self.grads[v.0]
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// k = max(1, ceil(ratio * n)).
pub fn topk_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).ceil() as usize).clamp(1, n)
}

fn accumulate(dst: &mut Tensor, src: &[f64], f: impl Fn(f64) -> f64) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src) {
        *d += f(s);
    }
}

/// Corner-aligned bilinear resize of a CHW tensor (forward only).
pub fn bilinear_resize(t: &Tensor, target_h: usize, target_w: usize) -> Tensor {
    let s = t.shape();
    assert_eq!(s.len(), 3, "bilinear_resize expects CHW, got {s:?}");
    let (c, h, w) = (s[0], s[1], s[2]);
    let din = t.data();
    let mut out = vec![0.0; c * target_h * target_w];
    for ch in 0..c {
        let ip = &din[ch * h * w..(ch + 1) * h * w];
        let op = &mut out[ch * target_h * target_w..(ch + 1) * target_h * target_w];
        for oy in 0..target_h {
            let (y0, y1, fy) = corner_aligned(oy, target_h, h);
            for ox in 0..target_w {
                let (x0, x1, fx) = corner_aligned(ox, target_w, w);
                op[oy * target_w + ox] = ip[y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
                    + ip[y0 * w + x1] * (1.0 - fy) * fx
                    + ip[y1 * w + x0] * fy * (1.0 - fx)
                    + ip[y1 * w + x1] * fy * fx;
            }
        }
    }
    Tensor::new(vec![c, target_h, target_w], out)
}

/// Source coordinates and fraction for corner-aligned bilinear sampling.
fn corner_aligned(o: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    if out_len == 1 || in_len == 1 {
        return (0, 0.min(in_len - 1), 0.0);
    }
    let pos = o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
    let i0 = pos.floor() as usize;
    let i0 = i0.min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, pos - i0 as f64)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    input: &[f64],
    kernels: &[f64],
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    ksz: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    for oc in 0..o {
        let obase = oc * oh * ow;
        for ic in 0..c {
            let ibase = ic * h * w;
            for ky in 0..ksz {
                for kx in 0..ksz {
                    let kv = kernels[((oc * c + ic) * ksz + ky) * ksz + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = ibase + iy as usize * w;
                        let orow = obase + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[orow + ox] += kv * input[irow + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    input: &[f64],
    kernels: &[f64],
    gout: &[f64],
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    ksz: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    gin: &mut [f64],
    gk: &mut [f64],
) {
    for oc in 0..o {
        let obase = oc * oh * ow;
        for ic in 0..c {
            let ibase = ic * h * w;
            for ky in 0..ksz {
                for kx in 0..ksz {
                    let kidx = ((oc * c + ic) * ksz + ky) * ksz + kx;
                    let kv = kernels[kidx];
                    let mut kgrad = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = ibase + iy as usize * w;
                        let orow = obase + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let g = gout[orow + ox];
                            kgrad += g * input[irow + ix as usize];
                            gin[irow + ix as usize] += g * kv;
                        }
                    }
                    gk[kidx] += kgrad;
                }
            }
        }
    }
}

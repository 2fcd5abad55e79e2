//! Reverse-mode differentiation tape.
//!
//! Every op appends a node holding its output value and whatever the
//! backward pass needs. Handles ([`Var`]) only ever point backwards, so the
//! node order is a topological order and [`Tape::backward`] is a single
//! reverse sweep that visits each node once.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{conv, linalg, norm, pool, softmax};
use crate::loss::kernels as lossk;
use crate::sampler::{self, WarpGeom};
use crate::tensor::{inverse_perm, Real, Tensor};
use crate::vtn::ops::{self as vops, CandidateGeom};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddBias,
    Sum,
    Mean,
    MatMul,
    Reshape,
    Permute,
    Select,
    Conv2d,
    MaxPool2,
    Upsample2,
    Relu,
    Tanh,
    BatchNorm,
    GroupNorm,
    Softmax,
    SpatialMean,
    GroupPool,
    CandidateProbs,
    AggregateField,
    WarpSample,
    CrossEntropy,
    TripletHinge,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddBias => "add_bias",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MatMul => "matmul",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Select => "select",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2 => "maxpool2",
            OpKind::Upsample2 => "upsample2",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::BatchNorm => "batch_norm",
            OpKind::GroupNorm => "group_norm",
            OpKind::Softmax => "softmax",
            OpKind::SpatialMean => "spatial_mean",
            OpKind::GroupPool => "group_pool",
            OpKind::CandidateProbs => "candidate_probs",
            OpKind::AggregateField => "aggregate_field",
            OpKind::WarpSample => "bilinear_sample",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::TripletHinge => "triplet_hinge",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        ALL_OPS.iter().copied().find(|k| k.name() == name)
    }
}

pub const ALL_OPS: [OpKind; 27] = [
    OpKind::Leaf,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Scale,
    OpKind::AddBias,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::MatMul,
    OpKind::Reshape,
    OpKind::Permute,
    OpKind::Select,
    OpKind::Conv2d,
    OpKind::MaxPool2,
    OpKind::Upsample2,
    OpKind::Relu,
    OpKind::Tanh,
    OpKind::BatchNorm,
    OpKind::GroupNorm,
    OpKind::Softmax,
    OpKind::SpatialMean,
    OpKind::GroupPool,
    OpKind::CandidateProbs,
    OpKind::AggregateField,
    OpKind::WarpSample,
    OpKind::CrossEntropy,
    OpKind::TripletHinge,
];

/// Statistics of a training-mode batch norm call, for running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<R> {
    pub mean: Vec<R>,
    /// Unbiased variance.
    pub var: Vec<R>,
}

enum Op<R> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    AddBias(Var, Var),
    Sum(Var),
    Mean(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Select { x: Var, rows: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Var, geom: conv::ConvGeom },
    MaxPool2 { x: Var, arg: Vec<u32> },
    Upsample2 { x: Var, dims: [usize; 4] },
    Relu(Var),
    Tanh(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<R>, inv_std: Vec<R> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<R>, inv_std: Vec<R> },
    GroupNorm { x: Var, batch: usize, ch: usize, groups: usize, inv_std: Vec<R> },
    Softmax { x: Var, outer: usize, len: usize, inner: usize, beta: R },
    SpatialMean { x: Var, batch: usize, pixels: usize, ch: usize },
    GroupPool { u: Var, k: usize, groups: usize, arg: Vec<u32> },
    CandidateProbs { e: Var, pooled: Var, geom: CandidateGeom, beta: R },
    AggregateField { p: Var, radius: usize },
    WarpSample { u: Var, field: Var, geom: WarpGeom },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<R> },
    TripletHinge { a: Var, p: Var, n: Var, ch: usize, alpha: R },
}

impl<R> Op<R> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Permute(..) => OpKind::Permute,
            Op::Select { .. } => OpKind::Select,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Upsample2 { .. } => OpKind::Upsample2,
            Op::Relu(_) => OpKind::Relu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::BatchNorm { .. } | Op::BatchNormEval { .. } => OpKind::BatchNorm,
            Op::GroupNorm { .. } => OpKind::GroupNorm,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::SpatialMean { .. } => OpKind::SpatialMean,
            Op::GroupPool { .. } => OpKind::GroupPool,
            Op::CandidateProbs { .. } => OpKind::CandidateProbs,
            Op::AggregateField { .. } => OpKind::AggregateField,
            Op::WarpSample { .. } => OpKind::WarpSample,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::TripletHinge { .. } => OpKind::TripletHinge,
        }
    }
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed to it.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<R> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

pub struct Tape<R> {
    nodes: Vec<Node<R>>,
    fault: Option<OpKind>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Test hook: scales every gradient leaving `kind`'s backward by 1.25.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(R, R) -> R) -> Tensor<R> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |p, q| p * q);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: R) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// `x[..., C] + b[C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(b) != [c] {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let xv = self.value(x);
        let data = xv
            .data()
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(&bias).map(|(&p, &q)| p + q))
            .collect();
        let v = Tensor::new(xv.shape(), data)?;
        Ok(self.push(v, Op::AddBias(x, b), &[x, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / R::from_usize(t.len()));
        self.push(v, Op::Mean(x), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = linalg::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let v = Tensor::new(&[m, n], data)?;
        Ok(self.push(v, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x).permute(perm)?;
        Ok(self.push(v, Op::Permute(x, perm.to_vec()), &[x]))
    }

    /// Gathers rows along axis 0.
    pub fn select(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if rows.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return Err(Error::Data(format!("select rows {rows:?} out of range for {s:?}")));
        }
        let stride: usize = s[1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            data.extend_from_slice(&src[r * stride..(r + 1) * stride]);
        }
        let mut shape = s;
        shape[0] = rows.len();
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(v, Op::Select { x, rows: rows.to_vec() }, &[x]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = conv::ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        if self.shape(b) != [geom.cout] {
            return Err(Error::dim("conv2d bias", self.shape(w), self.shape(b)));
        }
        let data = conv::conv2d(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let v = Tensor::new(&geom.out_shape(), data)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }

    fn nhwc(&self, op: &'static str, x: Var) -> Result<[usize; 4]> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::dim(op, s, &[0, 0, 0, 0]));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let [n, h, w, c] = self.nhwc("maxpool2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config(format!("maxpool2 needs even spatial size, got {h}x{w}")));
        }
        let (data, arg) = pool::maxpool2(self.value(x).data(), n, h, w, c);
        let v = Tensor::new(&[n, h / 2, w / 2, c], data)?;
        Ok(self.push(v, Op::MaxPool2 { x, arg }, &[x]))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let dims = self.nhwc("upsample2", x)?;
        let [n, h, w, c] = dims;
        let data = pool::upsample2(self.value(x).data(), n, h, w, c);
        let v = Tensor::new(&[n, 2 * h, 2 * w, c], data)?;
        Ok(self.push(v, Op::Upsample2 { x, dims }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > R::zero() { a } else { R::zero() });
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.tanh());
        self.push(v, Op::Tanh(x), &[x])
    }

    fn check_channel_params(&self, op: &'static str, x: Var, ps: &[Var]) -> Result<usize> {
        let c = *self.shape(x).last().unwrap();
        for &p in ps {
            if self.shape(p) != [c] {
                return Err(Error::dim(op, self.shape(x), self.shape(p)));
            }
        }
        Ok(c)
    }

    /// Training-mode batch norm over every axis but the last.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: R) -> Result<(Var, BatchStats<R>)> {
        let c = self.check_channel_params("batch_norm", x, &[gamma, beta])?;
        let m = self.value(x).len() / c;
        let out = norm::batch_norm_train(
            self.value(x).data(),
            c,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let unbias = if m > 1 {
            R::from_usize(m) / R::from_usize(m - 1)
        } else {
            R::one()
        };
        let stats = BatchStats {
            mean: out.mean,
            var: out.var.iter().map(|&v| v * unbias).collect(),
        };
        let v = Tensor::new(self.shape(x), out.y)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: out.xhat,
            inv_std: out.inv_std,
        };
        Ok((self.push(v, op, &[x, gamma, beta]), stats))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[R], var: &[R], eps: R) -> Result<Var> {
        let c = self.check_channel_params("batch_norm", x, &[gamma, beta])?;
        if mean.len() != c || var.len() != c {
            return Err(Error::dim("batch_norm running stats", &[c], &[mean.len(), var.len()]));
        }
        let inv_std: Vec<R> = var.iter().map(|&v| R::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = self
            .value(x)
            .data()
            .chunks_exact(c)
            .flat_map(|row| (0..c).map(|ch| g[ch] * (row[ch] - mean[ch]) * inv_std[ch] + b[ch]).collect::<Vec<_>>())
            .collect();
        let v = Tensor::new(self.shape(x), data)?;
        let op = Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean: mean.to_vec(),
            inv_std,
        };
        Ok(self.push(v, op, &[x, gamma, beta]))
    }

    /// Group norm without affine parameters on `[B, ..., Ch]`.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: R) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::dim("group_norm", &s, &[0, 0]));
        }
        let ch = *s.last().unwrap();
        if groups == 0 || ch % groups != 0 {
            return Err(Error::config(format!("group_norm: {groups} groups do not divide {ch} channels")));
        }
        let (y, inv_std) = norm::group_norm(self.value(x).data(), s[0], ch, groups, eps);
        let v = Tensor::new(&s, y)?;
        let op = Op::GroupNorm {
            x,
            batch: s[0],
            ch,
            groups,
            inv_std,
        };
        Ok(self.push(v, op, &[x]))
    }

    /// `softmax(x / beta)` along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize, beta: R) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::dim("softmax axis", &s, &[axis]));
        }
        if !(beta > R::zero()) {
            return Err(Error::config(format!("softmax temperature must be > 0, got {beta:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let len = s[axis];
        let data = softmax::softmax(self.value(x).data(), outer, len, inner, beta);
        let v = Tensor::new(&s, data)?;
        let op = Op::Softmax {
            x,
            outer,
            len,
            inner,
            beta,
        };
        Ok(self.push(v, op, &[x]))
    }

    /// Global average pool `[B, H, W, C] -> [B, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let [batch, h, w, ch] = self.nhwc("spatial_mean", x)?;
        let pixels = h * w;
        let inv = R::one() / R::from_usize(pixels);
        let src = self.value(x).data();
        let mut data = vec![R::zero(); batch * ch];
        for b in 0..batch {
            for px in src[b * pixels * ch..(b + 1) * pixels * ch].chunks_exact(ch) {
                for (acc, &v) in data[b * ch..(b + 1) * ch].iter_mut().zip(px) {
                    *acc += v;
                }
            }
        }
        data.iter_mut().for_each(|v| *v *= inv);
        let v = Tensor::new(&[batch, ch], data)?;
        Ok(self.push(v, Op::SpatialMean { x, batch, pixels, ch }, &[x]))
    }

    /// Per-group channel max and mean, `[B,H,W,K] -> [B,H,W,C,2]`.
    pub fn group_pool(&mut self, u: Var, groups: usize) -> Result<Var> {
        let [b, h, w, k] = self.nhwc("group_pool", u)?;
        if groups == 0 || k % groups != 0 {
            return Err(Error::config(format!("{groups} groups do not divide {k} channels")));
        }
        let (data, arg) = vops::group_pool(self.value(u).data(), k, groups);
        let v = Tensor::new(&[b, h, w, groups, 2], data)?;
        Ok(self.push(v, Op::GroupPool { u, k, groups, arg }, &[u]))
    }

    /// Candidate probabilities from logits `[B,C,H,W,N]` and raw pooled
    /// responses `[B,H,W,C,2]`.
    pub fn candidate_probs(&mut self, e: Var, pooled: Var, radius: usize, beta: R) -> Result<Var> {
        let (se, sp) = (self.shape(e).to_vec(), self.shape(pooled).to_vec());
        let n = vops::candidate_count(radius);
        let ok = se.len() == 5
            && sp.len() == 5
            && se[4] == n
            && sp == [se[0], se[2], se[3], se[1], 2];
        if !ok {
            return Err(Error::dim("candidate_probs", &se, &sp));
        }
        if !(beta > R::zero()) {
            return Err(Error::config(format!("temperature must be > 0, got {beta:?}")));
        }
        let geom = CandidateGeom {
            batch: se[0],
            groups: se[1],
            h: se[2],
            w: se[3],
            radius,
        };
        let data = vops::candidate_probs(&geom, self.value(e).data(), self.value(pooled).data(), beta);
        let v = Tensor::new(&se, data)?;
        Ok(self.push(v, Op::CandidateProbs { e, pooled, geom, beta }, &[e, pooled]))
    }

    /// Expected window offset, `[..., N] -> [..., 2]`.
    pub fn aggregate_field(&mut self, p: Var, radius: usize) -> Result<Var> {
        let s = self.shape(p).to_vec();
        if s.last() != Some(&vops::candidate_count(radius)) {
            return Err(Error::dim("aggregate_field", &s, &[vops::candidate_count(radius)]));
        }
        let data = vops::aggregate_field(self.value(p).data(), radius);
        let mut out = s;
        *out.last_mut().unwrap() = 2;
        let v = Tensor::new(&out, data)?;
        Ok(self.push(v, Op::AggregateField { p, radius }, &[p]))
    }

    /// Grouped bilinear warp of `[B,H,W,K]` features by `[B,C,H,W,2]` fields.
    pub fn warp_sample(&mut self, u: Var, field: Var) -> Result<Var> {
        let geom = WarpGeom::new(self.shape(u), self.shape(field))?;
        let data = sampler::warp_sample(&geom, self.value(u).data(), self.value(field).data());
        let v = Tensor::new(self.shape(u), data)?;
        Ok(self.push(v, Op::WarpSample { u, field, geom }, &[u, field]))
    }

    /// Mean softmax cross-entropy of `[B, k]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim("cross_entropy", &s, &[labels.len()]));
        }
        if s[1] < 2 {
            return Err(Error::config("cross_entropy needs at least 2 classes"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(Error::Data(format!("label {bad} out of range for {} classes", s[1])));
        }
        let (loss, probs) = lossk::cross_entropy(self.value(logits).data(), s[1], labels);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// `Σ_pixels [‖a−p‖² − ‖a−n‖² + α]_+` with distances over the last axis.
    pub fn triplet_hinge(&mut self, a: Var, p: Var, n: Var, alpha: R) -> Result<Var> {
        self.same_shape("triplet_hinge", a, p)?;
        self.same_shape("triplet_hinge", a, n)?;
        if !(alpha > R::zero()) {
            return Err(Error::config(format!("triplet margin must be > 0, got {alpha:?}")));
        }
        let ch = *self.shape(a).last().unwrap();
        let loss = lossk::triplet_hinge(
            self.value(a).data(),
            self.value(p).data(),
            self.value(n).data(),
            ch,
            alpha,
        );
        Ok(self.push(Tensor::scalar(loss), Op::TripletHinge { a, p, n, ch, alpha }, &[a, p, n]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut contribs = self.local_backward(node, &g)?;
            if self.fault == Some(node.op.kind()) {
                let bad = R::from_f64(1.25);
                for (_, t) in contribs.iter_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v *= bad);
                }
            }
            for (v, t) in contribs {
                if !self.needs(v) {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_backward(&self, node: &Node<R>, g: &Tensor<R>) -> Result<Vec<(Var, Tensor<R>)>> {
        let gd = g.data();
        let like = |v: Var, data: Vec<R>| Tensor::new(self.shape(v), data);
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = gd.iter().zip(vb.data()).map(|(&d, &y)| d * y).collect();
                let db = gd.iter().zip(va.data()).map(|(&d, &x)| d * x).collect();
                vec![(*a, like(*a, da)?), (*b, like(*b, db)?)]
            }
            Op::Scale(a, s) => vec![(*a, g.map(|x| x * *s))],
            Op::AddBias(x, b) => {
                let c = self.shape(*b)[0];
                let mut db = vec![R::zero(); c];
                for row in gd.chunks_exact(c) {
                    for (acc, &d) in db.iter_mut().zip(row) {
                        *acc += d;
                    }
                }
                vec![(*x, g.clone()), (*b, like(*b, db)?)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(self.shape(*x), gd[0]))],
            Op::Mean(x) => {
                let n = R::from_usize(self.value(*x).len());
                vec![(*x, Tensor::full(self.shape(*x), gd[0] / n))]
            }
            Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let da = linalg::matmul_grad_lhs(gd, vb, *m, *k, *n);
                let db = linalg::matmul_grad_rhs(va, gd, *m, *k, *n);
                vec![(*a, like(*a, da)?), (*b, like(*b, db)?)]
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(self.shape(*x))?)],
            Op::Permute(x, perm) => vec![(*x, g.permute(&inverse_perm(perm))?)],
            Op::Select { x, rows } => {
                let s = self.shape(*x);
                let stride: usize = s[1..].iter().product();
                let mut dx = vec![R::zero(); self.value(*x).len()];
                for (i, &r) in rows.iter().enumerate() {
                    for (acc, &d) in dx[r * stride..(r + 1) * stride].iter_mut().zip(&gd[i * stride..(i + 1) * stride]) {
                        *acc += d;
                    }
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = conv::conv2d_backward(geom, self.value(*x).data(), self.value(*w).data(), gd);
                vec![(*x, like(*x, dx)?), (*w, like(*w, dw)?), (*b, like(*b, db)?)]
            }
            Op::MaxPool2 { x, arg } => {
                let dx = pool::maxpool2_backward(gd, arg, self.value(*x).len());
                vec![(*x, like(*x, dx)?)]
            }
            Op::Upsample2 { x, dims } => {
                let [n, h, w, c] = *dims;
                vec![(*x, like(*x, pool::upsample2_backward(gd, n, h, w, c))?)]
            }
            Op::Relu(x) => {
                let dx = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&d, &v)| if v > R::zero() { d } else { R::zero() })
                    .collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::Tanh(x) => {
                let dx = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&d, &y)| d * (R::one() - y * y))
                    .collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (dx, dg, db) = norm::batch_norm_train_backward(gd, xhat, inv_std, self.value(*gamma).data());
                vec![(*x, like(*x, dx)?), (*gamma, like(*gamma, dg)?), (*beta, like(*beta, db)?)]
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let c = mean.len();
                let gam = self.value(*gamma).data();
                let mut dx = Vec::with_capacity(gd.len());
                let mut dg = vec![R::zero(); c];
                let mut db = vec![R::zero(); c];
                for (drow, xrow) in gd.chunks_exact(c).zip(self.value(*x).data().chunks_exact(c)) {
                    for ch in 0..c {
                        dx.push(drow[ch] * gam[ch] * inv_std[ch]);
                        dg[ch] += drow[ch] * (xrow[ch] - mean[ch]) * inv_std[ch];
                        db[ch] += drow[ch];
                    }
                }
                vec![(*x, like(*x, dx)?), (*gamma, like(*gamma, dg)?), (*beta, like(*beta, db)?)]
            }
            Op::GroupNorm {
                x,
                batch,
                ch,
                groups,
                inv_std,
            } => {
                let dx = norm::group_norm_backward(gd, node.value.data(), inv_std, *batch, *ch, *groups);
                vec![(*x, like(*x, dx)?)]
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
                beta,
            } => {
                let dx = softmax::softmax_backward(gd, node.value.data(), *outer, *len, *inner, *beta);
                vec![(*x, like(*x, dx)?)]
            }
            Op::SpatialMean { x, batch, pixels, ch } => {
                let inv = R::one() / R::from_usize(*pixels);
                let mut dx = Vec::with_capacity(batch * pixels * ch);
                for b in 0..*batch {
                    for _ in 0..*pixels {
                        dx.extend(gd[b * ch..(b + 1) * ch].iter().map(|&d| d * inv));
                    }
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::GroupPool { u, k, groups, arg } => {
                vec![(*u, like(*u, vops::group_pool_backward(gd, arg, *k, *groups))?)]
            }
            Op::CandidateProbs { e, pooled, geom, beta } => {
                let (de, dp) = vops::candidate_probs_backward(geom, node.value.data(), gd, *beta);
                vec![(*e, like(*e, de)?), (*pooled, like(*pooled, dp)?)]
            }
            Op::AggregateField { p, radius } => {
                vec![(*p, like(*p, vops::aggregate_field_backward(gd, *radius))?)]
            }
            Op::WarpSample { u, field, geom } => {
                let (du, dg) =
                    sampler::warp_sample_backward(geom, self.value(*u).data(), self.value(*field).data(), gd);
                vec![(*u, like(*u, du)?), (*field, like(*field, dg)?)]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let dl = lossk::cross_entropy_backward(probs, labels, gd[0]);
                vec![(*logits, like(*logits, dl)?)]
            }
            Op::TripletHinge { a, p, n, ch, alpha } => {
                let (da, dp, dn) = lossk::triplet_hinge_backward(
                    self.value(*a).data(),
                    self.value(*p).data(),
                    self.value(*n).data(),
                    *ch,
                    *alpha,
                    gd[0],
                );
                vec![(*a, like(*a, da)?), (*p, like(*p, dp)?), (*n, like(*n, dn)?)]
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.1), true);
        let l = t.sum(x);
        let g = t.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn squared_sum_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap(), true);
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
        let empty = Tape::<f64>::new();
        assert!(matches!(empty.backward(Var(0)), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]), false);
        let b = t.leaf(Tensor::zeros(&[2, 3]), false);
        match t.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}", other = other.map(|_| ())),
        }
    }

    #[test]
    fn shared_input_accumulates() {
        // l = sum(x + x) -> dl/dx = 2
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::ones(&[3]), true);
        let y = t.add(x, x).unwrap();
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn configuration_errors() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::zeros(&[1, 3, 3, 4]), false);
        assert!(matches!(t.maxpool2(x), Err(Error::Config(_))));
        assert!(matches!(t.softmax(x, 3, 0.0), Err(Error::Config(_))));
        assert!(matches!(t.group_norm(x, 3, 1e-5), Err(Error::Config(_))));
    }

    #[test]
    fn op_names_round_trip() {
        for k in ALL_OPS {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}

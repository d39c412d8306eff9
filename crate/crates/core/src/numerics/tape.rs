use std::rc::Rc;

use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Broadcast iteration plan: output dims (outermost first, adjacent dims
/// merged where both operands stay contiguous) with each operand's element
/// stride, 0 along broadcast dims.
type BroadcastPlan = Rc<[(usize, usize, usize)]>;

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        dims: (usize, usize, usize),
        offsets: Rc<[(usize, usize)]>,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        plan: Option<BroadcastPlan>,
    },
    AddScalar {
        x: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Abs {
        x: Var,
    },
    Sum {
        x: Var,
        mean: bool,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Var,
    },
    Gelu {
        x: Var,
    },
    Gather {
        x: Var,
        starts: Rc<[usize]>,
        block: usize,
    },
    Reshape {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        a_inner: usize,
        b_inner: usize,
    },
    Separable {
        x: Var,
        wy: Rc<Tensor<T>>,
        wx: Rc<Tensor<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of tensor operations.
///
/// Every node's inputs are recorded before it, so the node list is already
/// in topological order and [`Tape::backward`] is a single reverse sweep.
///
/// A tape built with [`Tape::no_grad`] records values only. Combined with
/// [`Tape::scope`] it frees intermediate results as soon as a block
/// finishes, which keeps inference memory bounded.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Outputs of a [`Tape::scope`] block.
pub trait ScopeOutput: Sized {
    fn vars(&self) -> Vec<Var>;
    fn with_vars(self, vars: &[Var]) -> Self;
}

impl ScopeOutput for Var {
    fn vars(&self) -> Vec<Var> {
        vec![*self]
    }
    fn with_vars(self, vars: &[Var]) -> Self {
        vars[0]
    }
}

impl ScopeOutput for (Var, Var) {
    fn vars(&self) -> Vec<Var> {
        vec![self.0, self.1]
    }
    fn with_vars(self, vars: &[Var]) -> Self {
        (vars[0], vars[1])
    }
}

fn zero_grad<T: Scalar>(slot: &mut Option<Vec<T>>, n: usize) -> &mut [T] {
    slot.get_or_insert_with(|| vec![T::zero(); n])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never records backward rules.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a detached leaf: it never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Runs `f` as a block whose intermediates are discarded afterwards on a
    /// no-grad tape. On a recording tape this is a plain call.
    ///
    /// Vars created inside the block, other than its outputs, must not be used
    /// after it returns.
    pub fn scope<O: ScopeOutput>(&mut self, f: impl FnOnce(&mut Self) -> Result<O>) -> Result<O> {
        if self.grad_enabled {
            return f(self);
        }
        let mark = self.nodes.len();
        let out = f(self)?;
        let vars = out.vars();
        let mut kept: Vec<(Var, Tensor<T>)> = Vec::new();
        for &v in &vars {
            if v.0 >= mark && !kept.iter().any(|(k, _)| *k == v) {
                let value = std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(T::zero()));
                kept.push((v, value));
            }
        }
        self.nodes.truncate(mark);
        let mut remap = Vec::with_capacity(kept.len());
        for (old, value) in kept {
            let new = self.constant(value);
            remap.push((old, new));
        }
        let mapped: Vec<Var> = vars
            .iter()
            .map(|v| remap.iter().find(|(o, _)| o == v).map_or(*v, |(_, n)| *n))
            .collect();
        Ok(out.with_vars(&mapped))
    }

    // ---------------------------------------------------------------- ops

    /// Batched matrix product `a[.., m, k] · b[.., k, n]` with broadcasting
    /// over the leading (batch) dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (mut m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb).ok_or_else(|| Error::shape("matmul", &sa, &sb))?;
        let offsets: Rc<[(usize, usize)]> = if bb.is_empty() {
            // a plain matrix on the right: stack every batch of `a` into one product
            m *= ba.iter().product::<usize>();
            Rc::from([(0, 0)])
        } else {
            let a_idx = broadcast_index(ba, &batch);
            let b_idx = broadcast_index(bb, &batch);
            a_idx.iter().zip(&b_idx).map(|(&i, &j)| (i * m * k, j * k * n)).collect()
        };
        let mut out = vec![T::zero(); offsets.len() * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for (c, &(oa, ob)) in out.chunks_exact_mut(m * n).zip(offsets.iter()) {
                gemm_nn(&av[oa..oa + m * k], &bv[ob..ob + k * n], c, m, k, n);
            }
        }
        let mut shape = batch;
        shape.extend([sa[sa.len() - 2], n]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                dims: (m, k, n),
                offsets,
            },
            &[a, b],
        ))
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape("elementwise", &sa, &sb))?;
        let plan: Option<BroadcastPlan> = (sa != shape || sb != shape).then(|| broadcast_plan(&sa, &sb, &shape).into());
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let out: Vec<T> = match &plan {
            None => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Some(p) => {
                let mut out = Vec::with_capacity(shape.iter().product());
                for_each_broadcast(p, |_, ia, ib| out.push(f(av[ia], bv[ib])));
                out
            }
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Binary { kind, a, b, plan }, &[a, b]))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v + s);
        self.push(value, Op::AddScalar { x }, &[x])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale { x, s }, &[x])
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        self.push(value, Op::Abs { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x, mean: false }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::lit(t.numel() as f64);
        self.push(Tensor::scalar(m), Op::Sum { x, mean: true }, &[x])
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Invalid(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        if !t.all_finite() {
            return Err(Error::NonFinite("softmax"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let at = |j: usize| base + j * inner;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(src[at(j)]);
                }
                let mut z = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                let inv = T::one() / z;
                for j in 0..len {
                    out[at(j)] *= inv;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Normalizes each row over the last dimension, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let (src, g, b) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / d;
        let inv_d = T::one() / T::lit(d as f64);
        let mut out = vec![T::zero(); src.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for (row, dst) in src.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            for (((o, &v), &gv), &bv) in dst.iter_mut().zip(row).zip(g).zip(b) {
                *o = (v - mean) * rstd * gv + bv;
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let value = Tensor::new(shape, out)?;
        let keep = self.grad_enabled;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: if keep { means } else { Vec::new() },
                rstd: if keep { rstds } else { Vec::new() },
            },
            &[x, gamma, beta],
        ))
    }

    /// Stride-1 cross-correlation with zero "same" padding.
    ///
    /// `x: [b, c_in, h, w]`, `w: [c_out, c_in, kh, kw]` (odd kernel sizes),
    /// `bias: [c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || self.shape(bias) != [sw[0]] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if sw[2] % 2 == 0 || sw[3] % 2 == 0 {
            return Err(Error::Invalid(format!("conv2d kernel must be odd-sized, got {sw:?}")));
        }
        let (bn, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        let (hw, kk) = (h * wd, cin * kh * kw);
        let mut out = vec![T::zero(); bn * cout * hw];
        {
            let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(bias).data());
            let mut cols = vec![T::zero(); kk * hw];
            for (img, dst) in xv.chunks_exact(cin * hw).zip(out.chunks_exact_mut(cout * hw)) {
                for (plane, &bval) in dst.chunks_exact_mut(hw).zip(bv) {
                    plane.fill(bval);
                }
                if kh == 1 && kw == 1 {
                    gemm_nn(wv, img, dst, cout, kk, hw);
                } else {
                    im2col(img, cin, h, wd, kh, kw, &mut cols);
                    gemm_nn(wv, &cols, dst, cout, kk, hw);
                }
            }
        }
        let value = Tensor::new(vec![bn, cout, h, wd], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, bias }, &[x, w, bias]))
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let half = T::lit(0.5);
        let r2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        let value = self.value(x).map(|v| half * v * (T::one() + (v * r2).erf()));
        self.push(value, Op::Gelu { x }, &[x])
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        self.gather_blocks(x, index, 1, shape)
    }

    /// Copies the `block` contiguous elements at each offset in `starts`, in
    /// order, and reshapes the result to `shape`.
    pub fn gather_blocks(&mut self, x: Var, starts: Rc<[usize]>, block: usize, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        if shape.iter().product::<usize>() != starts.len() * block {
            return Err(Error::shape("gather", &shape, &[starts.len(), block]));
        }
        if let Some(&bad) = starts.iter().find(|&&i| i + block > src.len()) {
            return Err(Error::Invalid(format!(
                "gather block {bad}..{} out of range {}",
                bad + block,
                src.len()
            )));
        }
        let mut out = Vec::with_capacity(starts.len() * block);
        if block == 1 {
            out.extend(starts.iter().map(|&i| src[i]));
        } else {
            for &i in starts.iter() {
                out.extend_from_slice(&src[i..i + block]);
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Gather { x, starts, block }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Reorders dimensions: output dim `i` is input dim `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Invalid(format!("bad permutation {axes:?} for {shape:?}")));
        }
        // trailing axes left in place move as contiguous blocks
        let kept = axes.iter().enumerate().rev().take_while(|&(i, &a)| i == a).count();
        let lead = shape.len() - kept;
        let block: usize = shape[lead..].iter().product();
        let strides = strides_of(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let src_strides: Vec<usize> = axes[..lead].iter().map(|&a| strides[a]).collect();
        let starts = strided_index(&out_shape[..lead], &src_strides);
        self.gather_blocks(x, starts.into(), block, out_shape)
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Invalid(format!("narrow({axis}, {start}, {len}) on {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let starts: Rc<[usize]> = (0..outer).map(|o| (o * shape[axis] + start) * inner).collect();
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather_blocks(x, starts, len * inner, out_shape)
    }

    /// Concatenates two tensors along `axis`; all other dims must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::shape("concat", &sa, &sb));
        }
        let outer: usize = sa[..axis].iter().product();
        let a_inner: usize = sa[axis..].iter().product();
        let b_inner: usize = sb[axis..].iter().product();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            out.extend_from_slice(&av[o * a_inner..(o + 1) * a_inner]);
            out.extend_from_slice(&bv[o * b_inner..(o + 1) * b_inner]);
        }
        let mut shape = sa;
        shape[axis] += sb[axis];
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                a,
                b,
                outer,
                a_inner,
                b_inner,
            },
            &[a, b],
        ))
    }

    /// Applies `wy · X · wxᵀ` to every trailing `[h, w]` plane of `x`.
    pub fn separable(&mut self, x: Var, wy: Rc<Tensor<T>>, wx: Rc<Tensor<T>>) -> Result<Var> {
        let value = separable_forward(self.value(x), &wy, &wx)?;
        Ok(self.push(value, Op::Separable { x, wy, wx }, &[x]))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Gradients accumulate over every
    /// use of a value, so shared subexpressions are handled correctly.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients {
                grads: (0..self.nodes.len()).map(|_| None).collect(),
            });
        }
        grads[loss.0] = Some(vec![T::one()]);
        let mut out: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                out[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut [T] {
        zero_grad(&mut grads[v.0], self.nodes[v.0].value.numel())
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, dims, offsets } => {
                let (m, k, n) = *dims;
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    let da = self.slot(grads, *a);
                    for (gc, &(oa, ob)) in g.chunks_exact(m * n).zip(offsets.iter()) {
                        gemm_nt(gc, &bv[ob..ob + k * n], &mut da[oa..oa + m * k], m, n, k);
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    let db = self.slot(grads, *b);
                    for (gc, &(oa, ob)) in g.chunks_exact(m * n).zip(offsets.iter()) {
                        gemm_tn(&av[oa..oa + m * k], gc, &mut db[ob..ob + k * n], m, k, n);
                    }
                }
            }
            Op::Binary { kind, a, b, plan } => {
                let sign = if *kind == BinaryKind::Sub { -T::one() } else { T::one() };
                let need_a = self.needs(*a);
                let need_b = self.needs(*b);
                match (plan, kind) {
                    (None, _) => {
                        if need_a {
                            let bv = self.value(*b).data();
                            let da = self.slot(grads, *a);
                            for (i, &gi) in g.iter().enumerate() {
                                da[i] += if *kind == BinaryKind::Mul { gi * bv[i] } else { gi };
                            }
                        }
                        if need_b {
                            let av = self.value(*a).data();
                            let db = self.slot(grads, *b);
                            for (i, &gi) in g.iter().enumerate() {
                                db[i] += if *kind == BinaryKind::Mul { gi * av[i] } else { sign * gi };
                            }
                        }
                    }
                    (Some(p), _) => {
                        if need_a {
                            let bv = self.value(*b).data();
                            let da = self.slot(grads, *a);
                            for_each_broadcast(p, |o, ia, ib| {
                                da[ia] += if *kind == BinaryKind::Mul { g[o] * bv[ib] } else { g[o] };
                            });
                        }
                        if need_b {
                            let av = self.value(*a).data();
                            let db = self.slot(grads, *b);
                            for_each_broadcast(p, |o, ia, ib| {
                                db[ib] += if *kind == BinaryKind::Mul { g[o] * av[ia] } else { sign * g[o] };
                            });
                        }
                    }
                }
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                let dx = self.slot(grads, *x);
                for (d, &gi) in dx.iter_mut().zip(g) {
                    *d += gi;
                }
            }
            Op::Scale { x, s } => {
                let dx = self.slot(grads, *x);
                for (d, &gi) in dx.iter_mut().zip(g) {
                    *d += gi * *s;
                }
            }
            Op::Abs { x } => {
                let xv = self.value(*x).data();
                let dx = self.slot(grads, *x);
                for ((d, &gi), &v) in dx.iter_mut().zip(g).zip(xv) {
                    if v > T::zero() {
                        *d += gi;
                    } else if v < T::zero() {
                        *d -= gi;
                    }
                }
            }
            Op::Sum { x, mean } => {
                let n = self.value(*x).numel();
                let gi = if *mean { g[0] / T::lit(n as f64) } else { g[0] };
                for d in self.slot(grads, *x).iter_mut() {
                    *d += gi;
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let dx = self.slot(grads, *x);
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..*len {
                            let p = base + j * inner;
                            dot += g[p] * y[p];
                        }
                        for j in 0..*len {
                            let p = base + j * inner;
                            dx[p] += y[p] * (g[p] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let d = gv.len();
                let inv_d = T::one() / T::lit(d as f64);
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for (r, (row, grow)) in xv.chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                        for j in 0..d {
                            let xhat = (row[j] - mean[r]) * rstd[r];
                            dg[j] += grow[j] * xhat;
                            db[j] += grow[j];
                        }
                    }
                    if self.needs(*gamma) {
                        for (a, v) in self.slot(grads, *gamma).iter_mut().zip(dg) {
                            *a += v;
                        }
                    }
                    if self.needs(*beta) {
                        for (a, v) in self.slot(grads, *beta).iter_mut().zip(db) {
                            *a += v;
                        }
                    }
                }
                if self.needs(*x) {
                    let dx = self.slot(grads, *x);
                    let mut dxhat = vec![T::zero(); d];
                    for (r, ((row, grow), drow)) in xv
                        .chunks_exact(d)
                        .zip(g.chunks_exact(d))
                        .zip(dx.chunks_exact_mut(d))
                        .enumerate()
                    {
                        let (mu, rs) = (mean[r], rstd[r]);
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            dxhat[j] = grow[j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * (row[j] - mu) * rs;
                        }
                        s1 *= inv_d;
                        s2 *= inv_d;
                        for j in 0..d {
                            let xhat = (row[j] - mu) * rs;
                            drow[j] += rs * (dxhat[j] - s1 - xhat * s2);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, bias } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (cin, h, wd) = (sx[1], sx[2], sx[3]);
                let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
                let (hw, kk) = (h * wd, cin * kh * kw);
                let pointwise = kh == 1 && kw == 1;
                if self.needs(*bias) {
                    let db = self.slot(grads, *bias);
                    for gimg in g.chunks_exact(cout * hw) {
                        for (d, plane) in db.iter_mut().zip(gimg.chunks_exact(hw)) {
                            *d += plane.iter().copied().sum::<T>();
                        }
                    }
                }
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut cols = vec![T::zero(); if pointwise { 0 } else { kk * hw }];
                if self.needs(*w) {
                    let dw = self.slot(grads, *w);
                    for (img, gimg) in xv.chunks_exact(cin * hw).zip(g.chunks_exact(cout * hw)) {
                        if pointwise {
                            gemm_nt(gimg, img, dw, cout, hw, kk);
                        } else {
                            im2col(img, cin, h, wd, kh, kw, &mut cols);
                            gemm_nt(gimg, &cols, dw, cout, hw, kk);
                        }
                    }
                }
                if self.needs(*x) {
                    let dx = self.slot(grads, *x);
                    for (dimg, gimg) in dx.chunks_exact_mut(cin * hw).zip(g.chunks_exact(cout * hw)) {
                        if pointwise {
                            gemm_tn(wv, gimg, dimg, cout, kk, hw);
                        } else {
                            cols.fill(T::zero());
                            gemm_tn(wv, gimg, &mut cols, cout, kk, hw);
                            col2im(&cols, cin, h, wd, kh, kw, dimg);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                let dx = self.slot(grads, *x);
                let r2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
                let c = T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let half = T::lit(0.5);
                for ((d, &gi), &v) in dx.iter_mut().zip(g).zip(xv) {
                    let cdf = half * (T::one() + (v * r2).erf());
                    let pdf = c * (-half * v * v).exp();
                    *d += gi * (cdf + v * pdf);
                }
            }
            Op::Gather { x, starts, block } => {
                let dx = self.slot(grads, *x);
                for (&st, gb) in starts.iter().zip(g.chunks_exact(*block)) {
                    for (d, &gi) in dx[st..st + block].iter_mut().zip(gb) {
                        *d += gi;
                    }
                }
            }
            Op::Concat {
                a,
                b,
                outer,
                a_inner,
                b_inner,
            } => {
                let stride = a_inner + b_inner;
                if self.needs(*a) {
                    let da = self.slot(grads, *a);
                    for o in 0..*outer {
                        for (d, &gi) in da[o * a_inner..(o + 1) * a_inner]
                            .iter_mut()
                            .zip(&g[o * stride..o * stride + a_inner])
                        {
                            *d += gi;
                        }
                    }
                }
                if self.needs(*b) {
                    let db = self.slot(grads, *b);
                    for o in 0..*outer {
                        for (d, &gi) in db[o * b_inner..(o + 1) * b_inner]
                            .iter_mut()
                            .zip(&g[o * stride + a_inner..(o + 1) * stride])
                        {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Separable { x, wy, wx } => {
                let (oh, ih) = (wy.shape()[0], wy.shape()[1]);
                let (ow, iw) = (wx.shape()[0], wx.shape()[1]);
                let dx = self.slot(grads, *x);
                let mut tmp = vec![T::zero(); oh * iw];
                for (gp, dp) in g.chunks_exact(oh * ow).zip(dx.chunks_exact_mut(ih * iw)) {
                    // forward: out = wy · (X · wxᵀ); adjoint: dX = wyᵀ · (G · wx)
                    tmp.fill(T::zero());
                    gemm_nn(gp, wx.data(), &mut tmp, oh, ow, iw);
                    gemm_tn(wy.data(), &tmp, dp, oh, ih, iw);
                }
            }
        }
    }
}

/// Plain (untaped) evaluation of `wy · X · wxᵀ` over the trailing two dims.
pub(crate) fn separable_forward<T: Scalar>(x: &Tensor<T>, wy: &Tensor<T>, wx: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() < 2 || wy.ndim() != 2 || wx.ndim() != 2 {
        return Err(Error::shape("separable", s, wy.shape()));
    }
    let (ih, iw) = (s[s.len() - 2], s[s.len() - 1]);
    let (oh, ow) = (wy.shape()[0], wx.shape()[0]);
    if wy.shape()[1] != ih || wx.shape()[1] != iw {
        return Err(Error::shape("separable", s, &[wy.shape()[1], wx.shape()[1]]));
    }
    let planes = x.numel() / (ih * iw);
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut tmp = vec![T::zero(); ih * ow];
    for (src, dst) in x.data().chunks_exact(ih * iw).zip(out.chunks_exact_mut(oh * ow)) {
        tmp.fill(T::zero());
        gemm_nt(src, wx.data(), &mut tmp, ih, iw, ow);
        gemm_nn(wy.data(), &tmp, dst, oh, ih, ow);
    }
    let mut shape = s[..s.len() - 2].to_vec();
    shape.extend([oh, ow]);
    Tensor::new(shape, out)
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Source offsets of every element of `shape` (row-major) under `strides`.
pub(crate) fn strided_index(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let Some((&inner, outer_shape)) = shape.split_last() else {
        return vec![0];
    };
    let step = strides[shape.len() - 1];
    let mut index = Vec::with_capacity(n);
    if n == 0 {
        return index;
    }
    let mut pos = vec![0usize; outer_shape.len()];
    let mut off = 0usize;
    loop {
        index.extend((0..inner).map(|j| off + j * step));
        let mut d = outer_shape.len();
        loop {
            if d == 0 {
                return index;
            }
            d -= 1;
            pos[d] += 1;
            off += strides[d];
            if pos[d] < outer_shape[d] {
                break;
            }
            off -= strides[d] * outer_shape[d];
            pos[d] = 0;
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Offsets into an operand of shape `src` for each element of `out`.
fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    strided_index(out, &broadcast_strides(src, out))
}

/// Per-dim strides of an operand of shape `src` broadcast to `out`.
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(src);
    let lead = out.len() - src.len();
    (0..out.len())
        .map(|i| if i < lead || src[i - lead] == 1 { 0 } else { own[i - lead] })
        .collect()
}

fn broadcast_plan(sa: &[usize], sb: &[usize], out: &[usize]) -> Vec<(usize, usize, usize)> {
    let (ta, tb) = (broadcast_strides(sa, out), broadcast_strides(sb, out));
    let mut plan: Vec<(usize, usize, usize)> = Vec::new();
    for i in 0..out.len() {
        if out[i] == 1 {
            continue;
        }
        let cur = (out[i], ta[i], tb[i]);
        match plan.last_mut() {
            Some(prev) if prev.1 == cur.1 * cur.0 && prev.2 == cur.2 * cur.0 => {
                *prev = (prev.0 * cur.0, cur.1, cur.2);
            }
            _ => plan.push(cur),
        }
    }
    if plan.is_empty() {
        plan.push((1, 0, 0));
    }
    plan
}

/// Calls `f(out_offset, a_offset, b_offset)` for every output element in
/// row-major order.
#[inline]
fn for_each_broadcast(plan: &[(usize, usize, usize)], mut f: impl FnMut(usize, usize, usize)) {
    let (&(inner, sa, sb), outer) = plan.split_last().expect("nonempty plan");
    let mut pos = vec![0usize; outer.len()];
    let (mut oa, mut ob, mut o) = (0usize, 0usize, 0usize);
    loop {
        for j in 0..inner {
            f(o + j, oa + j * sa, ob + j * sb);
        }
        o += inner;
        let mut d = outer.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            pos[d] += 1;
            oa += outer[d].1;
            ob += outer[d].2;
            if pos[d] < outer[d].0 {
                break;
            }
            oa -= outer[d].1 * outer[d].0;
            ob -= outer[d].2 * outer[d].0;
            pos[d] = 0;
        }
    }
}

//! Wengert tape: reverse-mode differentiation over the kernel op set.
//!
//! Ops execute eagerly and record a node; `backward` replays nodes in exact
//! reverse order (inputs always precede outputs, so index order is
//! topological) and accumulates gradients additively across fan-out.
//!
//! A tape is confined to one thread. Ops panic on shape violations: public
//! module APIs validate their inputs before building a graph, so a panic
//! here is a bug in graph-building code, not a user error.

use std::sync::Arc;

use crate::kernel;
use crate::tensor::{Scalar, Tensor};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Handle for a known node slot; nodes are numbered in push order.
    #[inline]
    pub fn from_index(i: usize) -> Var {
        Var(u32::try_from(i).expect("tape overflow"))
    }
}

enum Node<T: Scalar> {
    Leaf,
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    ScaleByVar { x: Var, s: Var },
    BiasAdd { x: Var, b: Var },
    Dense { x: Var, w: Var },
    Bmm { a: Var, b: Var, dims: [usize; 4] },
    BmmNT { a: Var, b: Var, dims: [usize; 4] },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    Relu { x: Var },
    Gelu { x: Var },
    SoftmaxLast { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(T, T)> },
    BilinearSample { f: Var, coords: Var },
    FlowWarp { f: Var, flow: Var },
    PixelShuffle { x: Var, s: usize },
    PixelUnshuffle { x: Var, s: usize },
    Gather { x: Var, idx: Arc<Vec<u32>> },
    Reshape { x: Var },
    SliceAxis0 { x: Var, start_elem: usize },
    ConcatAxis { xs: Vec<Var>, axis: usize },
    MeanMiddle { x: Var, outer: usize, mid: usize, inner: usize },
    ClampSym { x: Var, limit: T },
    AddRelPosBias { x: Var, table: Var, idx: Arc<Vec<u32>> },
    AddWindowMask { x: Var },
    CharbMean { a: Var, b: Var, eps: T },
    CharbGlobal { a: Var, b: Var },
    SumAll { x: Var },
}

pub struct Tape<T: Scalar> {
    vals: Vec<Tensor<T>>,
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads<T> {
    g: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of the loss w.r.t. `v`; `None` if no gradient flowed to it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.g[v.index()].as_ref()
    }

    /// Gradient or zeros of the value's shape.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        match &self.g[v.index()] {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), nodes: Vec::new() }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn val(&self, v: Var) -> &Tensor<T> {
        &self.vals[v.index()]
    }

    fn push(&mut self, node: Node<T>, val: Tensor<T>) -> Var {
        let id = u32::try_from(self.vals.len()).expect("tape overflow");
        self.vals.push(val);
        self.nodes.push(node);
        Var(id)
    }

    /// Record an input value. Leaves accumulate gradients like any other
    /// node; callers decide which leaves they treat as parameters.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(Node::Leaf, t)
    }

    // ── elementwise ──────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        self.push(Node::Add { a, b }, t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        self.push(Node::Mul { a, b }, t)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.val(x).map(|v| v * c);
        self.push(Node::Scale { x, c }, t)
    }

    /// Multiply a tensor by a single-element tensor variable.
    pub fn scale_by_var(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.val(s).numel(), 1, "scale_by_var scalar must have one element");
        let sv = self.val(s).item();
        let t = self.val(x).map(|v| v * sv);
        self.push(Node::ScaleByVar { x, s }, t)
    }

    /// Broadcast-add a `[n]` bias over the last extent of `x`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Var {
        let tx = self.val(x);
        let n = *tx.shape().last().unwrap();
        assert_eq!(self.val(b).numel(), n, "bias_add extent mismatch");
        let bd = self.val(b).data().to_vec();
        let tx = self.val(x);
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bd.iter()) {
                *o = *o + bv;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data);
        self.push(Node::BiasAdd { x, b }, t)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = kernel::relu(self.val(x));
        self.push(Node::Relu { x }, t)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = kernel::gelu(self.val(x));
        self.push(Node::Gelu { x }, t)
    }

    /// Clamp to `[-limit, limit]` elementwise; gradient passes inside the
    /// bound and is zero outside.
    pub fn clamp_sym(&mut self, x: Var, limit: T) -> Var {
        let t = self.val(x).map(|v| {
            if v > limit {
                limit
            } else if v < -limit {
                -limit
            } else {
                v
            }
        });
        self.push(Node::ClampSym { x, limit }, t)
    }

    // ── linear algebra ───────────────────────────────────────────

    /// `x[..., k] @ w[k, n] -> [..., n]`; leading extents flattened as rows.
    pub fn dense(&mut self, x: Var, w: Var) -> Var {
        let (tx, tw) = (self.val(x), self.val(w));
        let ws = tw.shape();
        assert_eq!(ws.len(), 2, "dense weight must be rank 2");
        let (k, n) = (ws[0], ws[1]);
        assert_eq!(*tx.shape().last().unwrap(), k, "dense inner extent mismatch");
        let rows = tx.numel() / k;
        let mut out = vec![T::zero(); rows * n];
        kernel::mm_nn(tx.data(), tw.data(), &mut out, rows, k, n);
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out);
        self.push(Node::Dense { x, w }, t)
    }

    /// Batched matmul `[B, m, k] @ [B, k, n]`; shapes are taken from `dims`
    /// so callers may reinterpret layouts without copying.
    pub fn bmm(&mut self, a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize) -> Var {
        assert_eq!(self.val(a).numel(), batch * m * k, "bmm lhs extent mismatch");
        assert_eq!(self.val(b).numel(), batch * k * n, "bmm rhs extent mismatch");
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            kernel::mm_nn(
                &self.val(a).data()[bi * m * k..(bi + 1) * m * k],
                &self.val(b).data()[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let t = Tensor::new(vec![batch, m, n], out);
        self.push(Node::Bmm { a, b, dims: [batch, m, k, n] }, t)
    }

    /// Batched `a[B, m, k] @ b[B, n, k]^T -> [B, m, n]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize) -> Var {
        assert_eq!(self.val(a).numel(), batch * m * k, "bmm_nt lhs extent mismatch");
        assert_eq!(self.val(b).numel(), batch * n * k, "bmm_nt rhs extent mismatch");
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            kernel::mm_nt(
                &self.val(a).data()[bi * m * k..(bi + 1) * m * k],
                &self.val(b).data()[bi * n * k..(bi + 1) * n * k],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let t = Tensor::new(vec![batch, m, n], out);
        self.push(Node::BmmNT { a, b, dims: [batch, m, k, n] }, t)
    }

    /// 2D convolution; `x` is `[H, W, Cin]` or `[B, H, W, Cin]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (tx, tw) = (self.val(x), self.val(w));
        let xs = tx.shape().to_vec();
        let ws = tw.shape();
        assert_eq!(ws.len(), 4, "conv2d kernel must be rank 4");
        let (batch, h, wd, cin) = match xs.len() {
            3 => (1, xs[0], xs[1], xs[2]),
            4 => (xs[0], xs[1], xs[2], xs[3]),
            _ => panic!("conv2d input must be rank 3 or 4, got {xs:?}"),
        };
        let (kh, kw, kcin, cout) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(cin, kcin, "conv2d channel mismatch");
        assert!(stride >= 1 && kh <= h + 2 * pad && kw <= wd + 2 * pad, "conv2d geometry invalid");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![T::zero(); batch * oh * ow * cout];
        for bi in 0..batch {
            kernel::conv2d_into(
                &tx.data()[bi * h * wd * cin..(bi + 1) * h * wd * cin],
                tw.data(),
                &mut out[bi * oh * ow * cout..(bi + 1) * oh * ow * cout],
                h,
                wd,
                cin,
                kh,
                kw,
                cout,
                stride,
                pad,
            );
        }
        let shape = if xs.len() == 3 { vec![oh, ow, cout] } else { vec![batch, oh, ow, cout] };
        let t = Tensor::new(shape, out);
        self.push(Node::Conv2d { x, w, stride, pad }, t)
    }

    // ── normalization / attention pieces ─────────────────────────

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let t = kernel::softmax(self.val(x));
        self.push(Node::SoftmaxLast { x }, t)
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let tx = self.val(x);
        let n = *tx.shape().last().unwrap();
        assert_eq!(self.val(gamma).numel(), n, "layernorm gamma extent mismatch");
        assert_eq!(self.val(beta).numel(), n, "layernorm beta extent mismatch");
        let mut out = vec![T::zero(); tx.numel()];
        let mut stats = Vec::with_capacity(tx.numel() / n);
        kernel::layernorm_into(
            self.val(x).data(),
            self.val(gamma).data(),
            self.val(beta).data(),
            &mut out,
            n,
            Some(&mut stats),
        );
        let t = Tensor::new(self.val(x).shape().to_vec(), out);
        self.push(Node::LayerNorm { x, gamma, beta, stats }, t)
    }

    /// Add a relative-position bias to attention scores.
    /// `x` is `[nW, heads, L, L]` (flat), `table` is `[rows, heads]`,
    /// `idx[L*L]` maps each (l1, l2) pair to a table row.
    pub fn add_rel_pos_bias(&mut self, x: Var, table: Var, idx: Arc<Vec<u32>>) -> Var {
        let tx = self.val(x);
        let ts = self.val(table).shape();
        assert_eq!(ts.len(), 2, "bias table must be rank 2");
        let heads = ts[1];
        let ll = idx.len();
        assert_eq!(tx.numel() % (heads * ll), 0, "rel-pos bias extent mismatch");
        let nw = tx.numel() / (heads * ll);
        let table_d = self.val(table).data().to_vec();
        let mut data = self.val(x).data().to_vec();
        for wi in 0..nw {
            for hd in 0..heads {
                let base = (wi * heads + hd) * ll;
                for (p, &row) in idx.iter().enumerate() {
                    data[base + p] = data[base + p] + table_d[row as usize * heads + hd];
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data);
        self.push(Node::AddRelPosBias { x, table, idx }, t)
    }

    /// Add a per-window attention mask, broadcast over heads.
    /// `x` is `[nW, heads, L, L]` (flat), `mask` is `[nW, L, L]`.
    pub fn add_window_mask(&mut self, x: Var, mask: Arc<Tensor<T>>) -> Var {
        let tx = self.val(x);
        let ms = mask.shape();
        assert_eq!(ms.len(), 3, "window mask must be rank 3");
        let (nw, ll) = (ms[0], ms[1] * ms[2]);
        assert_eq!(tx.numel() % (nw * ll), 0, "window mask extent mismatch");
        let heads = tx.numel() / (nw * ll);
        let mut data = tx.data().to_vec();
        for wi in 0..nw {
            let m_row = &mask.data()[wi * ll..(wi + 1) * ll];
            for hd in 0..heads {
                let base = (wi * heads + hd) * ll;
                for (p, &mv) in m_row.iter().enumerate() {
                    data[base + p] = data[base + p] + mv;
                }
            }
        }
        let t = Tensor::new(self.val(x).shape().to_vec(), data);
        self.push(Node::AddWindowMask { x }, t)
    }

    // ── sampling / data movement ─────────────────────────────────

    /// Bilinear sampling of `f: [H, W, C]` at `coords: [..., 2]`,
    /// border-clamped; differentiable in both `f` and `coords`.
    pub fn bilinear_sample(&mut self, f: Var, coords: Var) -> Var {
        let t = kernel::bilinear_sample(self.val(f), self.val(coords)).expect("bilinear_sample shapes");
        self.push(Node::BilinearSample { f, coords }, t)
    }

    /// Backward warp of `f: [H, W, C]` by `flow: [H, W, 2]`.
    pub fn flow_warp(&mut self, f: Var, flow: Var) -> Var {
        let t = kernel::flow_warp(self.val(f), self.val(flow)).expect("flow_warp shapes");
        self.push(Node::FlowWarp { f, flow }, t)
    }

    /// Sub-pixel rearrangement; accepts `[H, W, s²C]` or `[B, H, W, s²C]`.
    pub fn pixel_shuffle(&mut self, x: Var, s: usize) -> Var {
        let t = batched_shuffle(self.val(x), s, kernel::pixel_shuffle);
        self.push(Node::PixelShuffle { x, s }, t)
    }

    /// Inverse rearrangement; accepts `[sH, sW, C]` or `[B, sH, sW, C]`.
    pub fn pixel_unshuffle(&mut self, x: Var, s: usize) -> Var {
        let t = batched_shuffle(self.val(x), s, kernel::pixel_unshuffle);
        self.push(Node::PixelUnshuffle { x, s }, t)
    }

    /// Arbitrary element permutation/expansion: `out[i] = x[idx[i]]`.
    pub fn gather(&mut self, x: Var, idx: Arc<Vec<u32>>, out_shape: Vec<usize>) -> Var {
        let tx = self.val(x);
        assert_eq!(out_shape.iter().product::<usize>(), idx.len(), "gather shape mismatch");
        let data: Vec<T> = idx.iter().map(|&i| tx.data()[i as usize]).collect();
        let t = Tensor::new(out_shape, data);
        self.push(Node::Gather { x, idx }, t)
    }

    /// Same data under a new shape of equal element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let t = self.val(x).clone().reshaped(shape).expect("reshape extent mismatch");
        self.push(Node::Reshape { x }, t)
    }

    /// Contiguous slice along axis 0.
    pub fn slice_axis0(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.val(x);
        let d0 = tx.shape()[0];
        assert!(start + len <= d0, "slice_axis0 out of range");
        let row = tx.numel() / d0;
        let data = tx.data()[start * row..(start + len) * row].to_vec();
        let mut shape = tx.shape().to_vec();
        shape[0] = len;
        let t = Tensor::new(shape, data);
        self.push(Node::SliceAxis0 { x, start_elem: start * row }, t)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat_axis(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of zero tensors");
        let first = self.val(xs[0]).shape().to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut axis_total = 0;
        for &v in xs {
            let s = self.val(v).shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            assert_eq!(&s[..axis], &first[..axis], "concat leading extents differ");
            assert_eq!(&s[axis + 1..], &first[axis + 1..], "concat trailing extents differ");
            axis_total += s[axis];
        }
        let mut out = vec![T::zero(); outer * axis_total * inner];
        let mut offset = 0;
        for &v in xs {
            let s = self.val(v).shape();
            let a = s[axis];
            let src = self.val(v).data();
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * a * inner;
                out[dst_base..dst_base + a * inner].copy_from_slice(&src[src_base..src_base + a * inner]);
            }
            offset += a;
        }
        let mut shape = first;
        shape[axis] = axis_total;
        let t = Tensor::new(shape, out);
        self.push(Node::ConcatAxis { xs: xs.to_vec(), axis }, t)
    }

    /// Mean over the middle extent of an `[outer, mid, inner]` view.
    pub fn mean_middle(&mut self, x: Var, outer: usize, mid: usize, inner: usize) -> Var {
        let tx = self.val(x);
        assert_eq!(tx.numel(), outer * mid * inner, "mean_middle extent mismatch");
        let inv = T::one() / T::from_f64(mid as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let src = &tx.data()[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src.iter()) {
                    *d = *d + s;
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        let t = Tensor::new(vec![outer, inner], out);
        self.push(Node::MeanMiddle { x, outer, mid, inner }, t)
    }

    // ── reductions / losses ──────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.val(x).data() {
            acc = acc + v;
        }
        self.push(Node::SumAll { x }, Tensor::scalar(acc))
    }

    pub fn charbonnier_mean(&mut self, a: Var, b: Var, eps: T) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "charbonnier shape mismatch");
        let v = kernel::charbonnier_value(
            self.val(a).data(),
            self.val(b).data(),
            eps,
            kernel::CharbonnierMode::Mean,
        );
        self.push(Node::CharbMean { a, b, eps }, Tensor::scalar(v))
    }

    pub fn charbonnier_global(&mut self, a: Var, b: Var, eps: T) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "charbonnier shape mismatch");
        let v = kernel::charbonnier_value(
            self.val(a).data(),
            self.val(b).data(),
            eps,
            kernel::CharbonnierMode::Global,
        );
        self.push(Node::CharbGlobal { a, b }, Tensor::scalar(v))
    }

    // ── backward ─────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. The tape itself is unchanged and
    /// may be swept again.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.val(loss).numel(), 1, "backward seed must be scalar");
        let mut g: Vec<Option<Tensor<T>>> = (0..self.vals.len()).map(|_| None).collect();
        g[loss.index()] = Some(Tensor::scalar(T::one()));

        for i in (0..self.nodes.len()).rev() {
            let gout = match g[i].take() {
                Some(t) => t,
                None => continue,
            };
            self.backward_node(i, &gout, &mut g);
            // Leaves keep their gradient for the caller.
            if matches!(self.nodes[i], Node::Leaf) || i == loss.index() {
                g[i] = Some(gout);
            } else {
                g[i] = Some(gout); // retain for inspection (attention maps etc.)
            }
        }
        Grads { g }
    }

    fn backward_node(&self, i: usize, gout: &Tensor<T>, g: &mut [Option<Tensor<T>>]) {
        match &self.nodes[i] {
            Node::Leaf => {}
            Node::Add { a, b } => {
                acc_tensor(g, *a, self.val(*a).shape(), |buf| add_into(buf, gout.data()));
                acc_tensor(g, *b, self.val(*b).shape(), |buf| add_into(buf, gout.data()));
            }
            Node::Mul { a, b } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                acc_tensor(g, *a, ta.shape(), |buf| {
                    for ((o, &gv), &bv) in buf.iter_mut().zip(gout.data()).zip(tb.data()) {
                        *o = *o + gv * bv;
                    }
                });
                acc_tensor(g, *b, tb.shape(), |buf| {
                    for ((o, &gv), &av) in buf.iter_mut().zip(gout.data()).zip(ta.data()) {
                        *o = *o + gv * av;
                    }
                });
            }
            Node::Scale { x, c } => {
                let c = *c;
                acc_tensor(g, *x, self.val(*x).shape(), |buf| {
                    for (o, &gv) in buf.iter_mut().zip(gout.data()) {
                        *o = *o + gv * c;
                    }
                });
            }
            Node::ScaleByVar { x, s } => {
                let sv = self.val(*s).item();
                let tx = self.val(*x);
                acc_tensor(g, *x, tx.shape(), |buf| {
                    for (o, &gv) in buf.iter_mut().zip(gout.data()) {
                        *o = *o + gv * sv;
                    }
                });
                let mut ds = T::zero();
                for (&gv, &xv) in gout.data().iter().zip(tx.data()) {
                    ds = ds + gv * xv;
                }
                acc_tensor(g, *s, &[1], |buf| buf[0] = buf[0] + ds);
            }
            Node::BiasAdd { x, b } => {
                let n = self.val(*b).numel();
                acc_tensor(g, *x, self.val(*x).shape(), |buf| add_into(buf, gout.data()));
                acc_tensor(g, *b, &[n], |buf| {
                    for row in gout.data().chunks(n) {
                        for (o, &gv) in buf.iter_mut().zip(row) {
                            *o = *o + gv;
                        }
                    }
                });
            }
            Node::Dense { x, w } => {
                let (tx, tw) = (self.val(*x), self.val(*w));
                let (k, n) = (tw.shape()[0], tw.shape()[1]);
                let rows = tx.numel() / k;
                acc_tensor(g, *x, tx.shape(), |buf| {
                    kernel::mm_nt(gout.data(), tw.data(), buf, rows, n, k);
                });
                acc_tensor(g, *w, tw.shape(), |buf| {
                    kernel::mm_tn(tx.data(), gout.data(), buf, rows, k, n);
                });
            }
            Node::Bmm { a, b, dims } => {
                let [batch, m, k, n] = *dims;
                let (ta, tb) = (self.val(*a), self.val(*b));
                acc_tensor(g, *a, ta.shape(), |buf| {
                    for bi in 0..batch {
                        kernel::mm_nt(
                            &gout.data()[bi * m * n..(bi + 1) * m * n],
                            &tb.data()[bi * k * n..(bi + 1) * k * n],
                            &mut buf[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc_tensor(g, *b, tb.shape(), |buf| {
                    for bi in 0..batch {
                        kernel::mm_tn(
                            &ta.data()[bi * m * k..(bi + 1) * m * k],
                            &gout.data()[bi * m * n..(bi + 1) * m * n],
                            &mut buf[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Node::BmmNT { a, b, dims } => {
                let [batch, m, k, n] = *dims;
                let (ta, tb) = (self.val(*a), self.val(*b));
                acc_tensor(g, *a, ta.shape(), |buf| {
                    for bi in 0..batch {
                        kernel::mm_nn(
                            &gout.data()[bi * m * n..(bi + 1) * m * n],
                            &tb.data()[bi * n * k..(bi + 1) * n * k],
                            &mut buf[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc_tensor(g, *b, tb.shape(), |buf| {
                    for bi in 0..batch {
                        kernel::mm_tn(
                            &gout.data()[bi * m * n..(bi + 1) * m * n],
                            &ta.data()[bi * m * k..(bi + 1) * m * k],
                            &mut buf[bi * n * k..(bi + 1) * n * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
            }
            Node::Conv2d { x, w, stride, pad } => {
                let (tx, tw) = (self.val(*x), self.val(*w));
                let xs = tx.shape();
                let (batch, h, wd, cin) = match xs.len() {
                    3 => (1, xs[0], xs[1], xs[2]),
                    _ => (xs[0], xs[1], xs[2], xs[3]),
                };
                let ws = tw.shape();
                let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
                let oh = (h + 2 * pad - kh) / stride + 1;
                let ow = (wd + 2 * pad - kw) / stride + 1;
                acc_tensor(g, *x, xs, |buf| {
                    for bi in 0..batch {
                        kernel::conv2d_backward_input(
                            tw.data(),
                            &gout.data()[bi * oh * ow * cout..(bi + 1) * oh * ow * cout],
                            &mut buf[bi * h * wd * cin..(bi + 1) * h * wd * cin],
                            h,
                            wd,
                            cin,
                            kh,
                            kw,
                            cout,
                            *stride,
                            *pad,
                        );
                    }
                });
                acc_tensor(g, *w, ws, |buf| {
                    for bi in 0..batch {
                        kernel::conv2d_backward_weight(
                            &tx.data()[bi * h * wd * cin..(bi + 1) * h * wd * cin],
                            &gout.data()[bi * oh * ow * cout..(bi + 1) * oh * ow * cout],
                            buf,
                            h,
                            wd,
                            cin,
                            kh,
                            kw,
                            cout,
                            *stride,
                            *pad,
                        );
                    }
                });
            }
            Node::Relu { x } => {
                let tx = self.val(*x);
                acc_tensor(g, *x, tx.shape(), |buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(gout.data()).zip(tx.data()) {
                        if xv > T::zero() {
                            *o = *o + gv;
                        }
                    }
                });
            }
            Node::Gelu { x } => {
                let tx = self.val(*x);
                acc_tensor(g, *x, tx.shape(), |buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(gout.data()).zip(tx.data()) {
                        *o = *o + gv * kernel::gelu_grad_scalar(xv);
                    }
                });
            }
            Node::SoftmaxLast { x } => {
                let y = &self.vals[i];
                let n = *y.shape().last().unwrap();
                acc_tensor(g, *x, y.shape(), |buf| {
                    for ((orow, grow), yrow) in
                        buf.chunks_mut(n).zip(gout.data().chunks(n)).zip(y.data().chunks(n))
                    {
                        let mut dot = T::zero();
                        for (&gv, &yv) in grow.iter().zip(yrow.iter()) {
                            dot = dot + gv * yv;
                        }
                        for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o = *o + yv * (gv - dot);
                        }
                    }
                });
            }
            Node::LayerNorm { x, gamma, beta, stats } => {
                let tx = self.val(*x);
                let tg = self.val(*gamma);
                let n = tg.numel();
                let inv_n = T::one() / T::from_f64(n as f64);
                acc_tensor(g, *x, tx.shape(), |buf| {
                    for (r, (orow, (grow, xrow))) in buf
                        .chunks_mut(n)
                        .zip(gout.data().chunks(n).zip(tx.data().chunks(n)))
                        .enumerate()
                    {
                        let (mean, rstd) = stats[r];
                        let mut sum_gg = T::zero();
                        let mut sum_ggx = T::zero();
                        for ((&gv, &xv), &gam) in grow.iter().zip(xrow.iter()).zip(tg.data()) {
                            let xhat = (xv - mean) * rstd;
                            let gg = gv * gam;
                            sum_gg = sum_gg + gg;
                            sum_ggx = sum_ggx + gg * xhat;
                        }
                        for ((o, (&gv, &xv)), &gam) in
                            orow.iter_mut().zip(grow.iter().zip(xrow.iter())).zip(tg.data())
                        {
                            let xhat = (xv - mean) * rstd;
                            let gg = gv * gam;
                            *o = *o + rstd * (gg - inv_n * sum_gg - xhat * inv_n * sum_ggx);
                        }
                    }
                });
                acc_tensor(g, *gamma, &[n], |buf| {
                    for (r, (grow, xrow)) in
                        gout.data().chunks(n).zip(tx.data().chunks(n)).enumerate()
                    {
                        let (mean, rstd) = stats[r];
                        for ((o, &gv), &xv) in buf.iter_mut().zip(grow).zip(xrow) {
                            *o = *o + gv * (xv - mean) * rstd;
                        }
                    }
                });
                acc_tensor(g, *beta, &[n], |buf| {
                    for grow in gout.data().chunks(n) {
                        for (o, &gv) in buf.iter_mut().zip(grow) {
                            *o = *o + gv;
                        }
                    }
                });
            }
            Node::BilinearSample { f, coords } => {
                let (tf, tc) = (self.val(*f), self.val(*coords));
                let fs = tf.shape();
                let (h, w, c) = (fs[0], fs[1], fs[2]);
                let mut gf = grad_buf(g, *f, tf.shape());
                let mut gc = grad_buf(g, *coords, tc.shape());
                kernel::bilinear_sample_backward(
                    tf.data(),
                    tc.data(),
                    gout.data(),
                    gf.data_mut(),
                    gc.data_mut(),
                    h,
                    w,
                    c,
                );
                g[f.index()] = Some(gf);
                g[coords.index()] = Some(gc);
            }
            Node::FlowWarp { f, flow } => {
                let (tf, tflow) = (self.val(*f), self.val(*flow));
                let fs = tf.shape();
                let (h, w, c) = (fs[0], fs[1], fs[2]);
                let coords = kernel::warp_coords(tflow.data(), h, w);
                let mut gf = grad_buf(g, *f, tf.shape());
                let mut gflow = grad_buf(g, *flow, tflow.shape());
                // d(coords)/d(flow) is the identity, so the coordinate
                // gradient accumulates straight into the flow gradient.
                kernel::bilinear_sample_backward(
                    tf.data(),
                    &coords,
                    gout.data(),
                    gf.data_mut(),
                    gflow.data_mut(),
                    h,
                    w,
                    c,
                );
                g[f.index()] = Some(gf);
                g[flow.index()] = Some(gflow);
            }
            Node::PixelShuffle { x, s } => {
                let gx = batched_shuffle(gout, *s, kernel::pixel_unshuffle);
                acc_tensor(g, *x, self.val(*x).shape(), |buf| add_into(buf, gx.data()));
            }
            Node::PixelUnshuffle { x, s } => {
                let gx = batched_shuffle(gout, *s, kernel::pixel_shuffle);
                acc_tensor(g, *x, self.val(*x).shape(), |buf| add_into(buf, gx.data()));
            }
            Node::Gather { x, idx } => {
                acc_tensor(g, *x, self.val(*x).shape(), |buf| {
                    for (&src, &gv) in idx.iter().zip(gout.data()) {
                        buf[src as usize] = buf[src as usize] + gv;
                    }
                });
            }
            Node::Reshape { x } => {
                acc_tensor(g, *x, self.val(*x).shape(), |buf| add_into(buf, gout.data()));
            }
            Node::SliceAxis0 { x, start_elem } => {
                acc_tensor(g, *x, self.val(*x).shape(), |buf| {
                    let dst = &mut buf[*start_elem..*start_elem + gout.numel()];
                    add_into(dst, gout.data());
                });
            }
            Node::ConcatAxis { xs, axis } => {
                let out_shape = self.vals[i].shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let axis_total = out_shape[*axis];
                let mut offset = 0;
                for &v in xs {
                    let s = self.val(v).shape().to_vec();
                    let a = s[*axis];
                    acc_tensor(g, v, &s, |buf| {
                        for o in 0..outer {
                            let src_base = (o * axis_total + offset) * inner;
                            let dst_base = o * a * inner;
                            let src = &gout.data()[src_base..src_base + a * inner];
                            add_into(&mut buf[dst_base..dst_base + a * inner], src);
                        }
                    });
                    offset += a;
                }
            }
            Node::MeanMiddle { x, outer, mid, inner } => {
                let inv = T::one() / T::from_f64(*mid as f64);
                acc_tensor(g, *x, self.val(*x).shape(), |buf| {
                    for o in 0..*outer {
                        let grow = &gout.data()[o * inner..(o + 1) * inner];
                        for m in 0..*mid {
                            let dst = &mut buf[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                            for (d, &gv) in dst.iter_mut().zip(grow) {
                                *d = *d + gv * inv;
                            }
                        }
                    }
                });
            }
            Node::ClampSym { x, limit } => {
                let tx = self.val(*x);
                let lim = *limit;
                acc_tensor(g, *x, tx.shape(), |buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(gout.data()).zip(tx.data()) {
                        if xv.abs() <= lim {
                            *o = *o + gv;
                        }
                    }
                });
            }
            Node::AddRelPosBias { x, table, idx } => {
                acc_tensor(g, *x, self.val(*x).shape(), |buf| add_into(buf, gout.data()));
                let ts = self.val(*table).shape().to_vec();
                let heads = ts[1];
                let ll = idx.len();
                let nw = gout.numel() / (heads * ll);
                acc_tensor(g, *table, &ts, |buf| {
                    for wi in 0..nw {
                        for hd in 0..heads {
                            let base = (wi * heads + hd) * ll;
                            for (p, &row) in idx.iter().enumerate() {
                                let r = row as usize * heads + hd;
                                buf[r] = buf[r] + gout.data()[base + p];
                            }
                        }
                    }
                });
            }
            Node::AddWindowMask { x } => {
                acc_tensor(g, *x, self.val(*x).shape(), |buf| add_into(buf, gout.data()));
            }
            Node::CharbMean { a, b, eps } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let n = T::from_f64(ta.numel() as f64);
                let gs = gout.item();
                let eps2 = *eps * *eps;
                acc_tensor(g, *a, ta.shape(), |buf| {
                    for ((o, (&pv, &tv)), _) in
                        buf.iter_mut().zip(ta.data().iter().zip(tb.data())).zip(0..)
                    {
                        let r = pv - tv;
                        *o = *o + gs * r / (n * (r * r + eps2).sqrt());
                    }
                });
                acc_tensor(g, *b, tb.shape(), |buf| {
                    for (o, (&pv, &tv)) in buf.iter_mut().zip(ta.data().iter().zip(tb.data())) {
                        let r = pv - tv;
                        *o = *o - gs * r / (n * (r * r + eps2).sqrt());
                    }
                });
            }
            Node::CharbGlobal { a, b } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let value = self.vals[i].item();
                let gs = gout.item();
                acc_tensor(g, *a, ta.shape(), |buf| {
                    for (o, (&pv, &tv)) in buf.iter_mut().zip(ta.data().iter().zip(tb.data())) {
                        *o = *o + gs * (pv - tv) / value;
                    }
                });
                acc_tensor(g, *b, tb.shape(), |buf| {
                    for (o, (&pv, &tv)) in buf.iter_mut().zip(ta.data().iter().zip(tb.data())) {
                        *o = *o - gs * (pv - tv) / value;
                    }
                });
            }
            Node::SumAll { x } => {
                let gs = gout.item();
                acc_tensor(g, *x, self.val(*x).shape(), |buf| {
                    for o in buf.iter_mut() {
                        *o = *o + gs;
                    }
                });
            }
        }
    }
}

fn batched_shuffle<T: Scalar>(
    x: &Tensor<T>,
    s: usize,
    op: fn(&Tensor<T>, usize) -> crate::error::Result<Tensor<T>>,
) -> Tensor<T> {
    let shape = x.shape().to_vec();
    match shape.len() {
        3 => op(x, s).expect("pixel shuffle shapes"),
        4 => {
            let (b, fsz) = (shape[0], shape[1] * shape[2] * shape[3]);
            let mut out: Option<(Vec<usize>, Vec<T>)> = None;
            for bi in 0..b {
                let frame = Tensor::new(
                    shape[1..].to_vec(),
                    x.data()[bi * fsz..(bi + 1) * fsz].to_vec(),
                );
                let r = op(&frame, s).expect("pixel shuffle shapes");
                match &mut out {
                    None => {
                        let mut os = vec![b];
                        os.extend_from_slice(r.shape());
                        let mut data = Vec::with_capacity(b * r.numel());
                        data.extend_from_slice(r.data());
                        out = Some((os, data));
                    }
                    Some((_, data)) => data.extend_from_slice(r.data()),
                }
            }
            let (os, data) = out.expect("non-empty batch");
            Tensor::new(os, data)
        }
        _ => panic!("pixel shuffle input must be rank 3 or 4, got {shape:?}"),
    }
}

/// Cache of gather index maps, keyed by layout geometry. Index maps repeat
/// across clips, layers, and training steps; sharing them keeps tape nodes
/// cheap.
#[derive(Default)]
pub struct IdxCache {
    map: std::collections::HashMap<String, Arc<Vec<u32>>>,
}

impl IdxCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or(&mut self, key: String, make: impl FnOnce() -> Vec<u32>) -> Arc<Vec<u32>> {
        self.map.entry(key).or_insert_with(|| Arc::new(make())).clone()
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (o, &s) in dst.iter_mut().zip(src.iter()) {
        *o = *o + s;
    }
}

fn grad_buf<T: Scalar>(g: &mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> Tensor<T> {
    g[v.index()].take().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
}

fn acc_tensor<T: Scalar>(
    g: &mut [Option<Tensor<T>>],
    v: Var,
    shape: &[usize],
    f: impl FnOnce(&mut [T]),
) {
    let mut t = grad_buf(g, v, shape);
    f(t.data_mut());
    g[v.index()] = Some(t);
}

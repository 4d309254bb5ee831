//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! the tape through [`Graph::param`]; frozen parameters are recorded as
//! constants, so their gradient is exactly zero and no backward work flows
//! into the subgraph that only depends on them.

use std::collections::HashMap;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Multiply-accumulate counts recorded while a graph executes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    /// Every multiply-accumulate in matmuls, convolutions and attention.
    pub macs: u64,
    /// Multiply-accumulates spent on query-key scores and value mixing only.
    pub attention: u64,
}

enum Op<T> {
    Input,
    Param,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Relu(Var),
    Reshape(Var),
    Transpose(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Upsample2x {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SigmoidBce {
        logits: Var,
        targets: Vec<T>,
        scale: T,
    },
    DiceRows {
        logits: Var,
        targets: Vec<T>,
        eps: T,
    },
    WeightedSum(Vec<(Var, T)>),
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
    counter: OpCounter,
    grad_enabled: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    by_node: Vec<Option<Vec<T>>>,
    params: HashMap<usize, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a parameter, `None` when it was frozen or unused.
    pub fn param(&self, id: usize) -> Option<&[T]> {
        let v = self.params.get(&id)?;
        self.by_node[v.0].as_deref()
    }

    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.by_node[v.0].as_deref()
    }
}

/// `c (+)= a · b` with optional transposed storage of either operand.
#[allow(clippy::too_many_arguments)]
fn mm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            counter: OpCounter::default(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; every node is a constant.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn counter(&self) -> OpCounter {
        self.counter
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Registers parameter `id` on the tape once; later calls return the same node.
    pub fn param(&mut self, id: usize, value: &Tensor<T>, trainable: bool) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(value.clone(), Op::Param, trainable);
        self.params.insert(id, v);
        v
    }

    /// `a · b`, or `a · bᵀ` when `trans_b` (b stored as `n × k`).
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (av.rows(), av.cols());
        let n = if trans_b {
            assert_eq!(bv.cols(), k, "matmul inner dims");
            bv.rows()
        } else {
            assert_eq!(bv.rows(), k, "matmul inner dims");
            bv.cols()
        };
        let mut out = vec![T::zero(); m * n];
        mm(m, k, n, av.data(), false, bv.data(), trans_b, &mut out, false);
        self.counter.macs += (m * k * n) as u64;
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor::from_vec(&[m, n], out).unwrap(),
            Op::MatMul { a, b, trans_b },
            rg,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x + *y).collect();
        let t = Tensor::from_vec(av.shape(), data).unwrap();
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg)
    }

    /// `x [m, n] + bias [n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let n = xv.cols();
        assert_eq!(bv.len(), n, "bias width");
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            add_into(row, bv.data());
        }
        let t = Tensor::from_vec(xv.shape(), data).unwrap();
        let rg = self.rg(&[x, bias]);
        self.push(t, Op::AddRow { x, bias }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.nodes[x.0].value.map(|v| v.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.nodes[x.0].value.clone().reshape(shape).expect("reshape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.nodes[x.0].value.transpose();
        let rg = self.rg(&[x]);
        self.push(t, Op::Transpose(x), rg)
    }

    /// Row-wise layer normalization with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let eps = T::lit(1e-5);
        let xv = &self.nodes[x.0].value;
        let (m, n) = (xv.rows(), xv.cols());
        let (g, b) = (self.nodes[gain.0].value.data(), self.nodes[bias.0].value.data());
        let nf = T::lit(n as f64);
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            Tensor::from_vec(&[m, n], out).unwrap(),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// 2-D convolution of `x [cin, h, w]` with `w [cout, cin·k·k]` and `b [cout]`,
    /// zero padding. Output `[cout, hout, wout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, k: usize, stride: usize, pad: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let (cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let cout = wv.rows();
        assert_eq!(wv.cols(), cin * k * k, "conv weight shape");
        let hout = (h + 2 * pad - k) / stride + 1;
        let wout = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            hout,
            wout,
        };
        let cols = im2col(xv.data(), &geom);
        let p = hout * wout;
        let kk = cin * k * k;
        let mut out = vec![T::zero(); cout * p];
        mm(cout, kk, p, wv.data(), false, &cols, false, &mut out, false);
        for (c, row) in out.chunks_mut(p).enumerate() {
            let bias = bv.data()[c];
            for v in row {
                *v += bias;
            }
        }
        self.counter.macs += (cout * kk * p) as u64;
        let rg = self.rg(&[x, w, b]);
        self.push(
            Tensor::from_vec(&[cout, hout, wout], out).unwrap(),
            Op::Conv2d { x, w, b, geom, cols },
            rg,
        )
    }

    /// Nearest-neighbour 2× upsampling of `[c, h, w]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = vec![T::zero(); c * 4 * h * w];
        let src = xv.data();
        for ch in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[(ch * 2 * h + i) * 2 * w + j] = src[(ch * h + i / 2) * w + j / 2];
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_vec(&[c, 2 * h, 2 * w], out).unwrap(),
            Op::Upsample2x { x },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention. `q [n, d]`, `k`/`v` `[m, d]`,
    /// with `d` split evenly across `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let (n, d) = (qv.rows(), qv.cols());
        let m = kv.rows();
        assert_eq!(kv.cols(), d);
        assert_eq!(vv.rows(), m);
        assert_eq!(vv.cols(), d);
        assert_eq!(d % heads, 0, "heads must divide width");
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * n * m];
        let mut out = vec![T::zero(); n * d];
        for h in 0..heads {
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            let o = h * dh;
            T::gemm(
                n,
                dh,
                m,
                scale,
                &qv.data()[o..],
                d as isize,
                1,
                &kv.data()[o..],
                1,
                d as isize,
                T::zero(),
                p,
                m as isize,
                1,
            );
            for row in p.chunks_mut(m) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    sum += *x;
                }
                for x in row.iter_mut() {
                    *x /= sum;
                }
            }
            T::gemm(
                n,
                m,
                dh,
                T::one(),
                p,
                m as isize,
                1,
                &vv.data()[o..],
                d as isize,
                1,
                T::zero(),
                &mut out[o..],
                d as isize,
                1,
            );
        }
        let cost = (2 * n * m * d) as u64;
        self.counter.macs += cost;
        self.counter.attention += cost;
        let rg = self.rg(&[q, k, v]);
        self.push(
            Tensor::from_vec(&[n, d], out).unwrap(),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        )
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = &self.nodes[x.0].value;
        let n = xv.cols();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(xv.row(r));
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_vec(&[rows.len(), n], data).unwrap(),
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.cols(), n, "concat_rows width");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::from_vec(&[rows, n], data).unwrap(),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.nodes[parts[0].0].value.rows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut data = vec![T::zero(); m * total];
        let mut off = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.rows(), m, "concat_cols height");
            let c = v.cols();
            for i in 0..m {
                data[i * total + off..i * total + off + c].copy_from_slice(v.row(i));
            }
            off += c;
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::from_vec(&[m, total], data).unwrap(),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    /// `scale · Σ BCE(σ(x), y)` over every element, computed from logits.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: Vec<T>, scale: T) -> Var {
        let xv = &self.nodes[logits.0].value;
        assert_eq!(xv.len(), targets.len(), "bce target size");
        let total: T = xv
            .data()
            .iter()
            .zip(&targets)
            .map(|(&x, &y)| x.softplus() - x * y)
            .sum();
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(total * scale),
            Op::SigmoidBce {
                logits,
                targets,
                scale,
            },
            rg,
        )
    }

    /// Mean over rows of the dice loss between `σ(logits)` and `targets`.
    pub fn dice_rows(&mut self, logits: Var, targets: Vec<T>, eps: T) -> Var {
        let xv = &self.nodes[logits.0].value;
        assert_eq!(xv.len(), targets.len(), "dice target size");
        let (r, n) = (xv.rows(), xv.cols());
        let mut total = T::zero();
        for i in 0..r {
            let p: Vec<T> = xv.row(i).iter().map(|x| x.sigmoid()).collect();
            total += crate::training::losses::dice_loss_slice(&p, &targets[i * n..(i + 1) * n], eps);
        }
        let value = if r == 0 {
            T::zero()
        } else {
            total / T::lit(r as f64)
        };
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(value),
            Op::DiceRows {
                logits,
                targets,
                eps,
            },
            rg,
        )
    }

    /// `Σ wᵢ · xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let total = terms
            .iter()
            .map(|(v, w)| self.nodes[v.0].value.data()[0] * *w)
            .sum();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar");
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![T::one()]);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            by_node: grads,
            params: self.params.clone(),
        }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (av.rows(), av.cols());
                let n = node.value.cols();
                if let Some(da) = self.slot(grads, *a) {
                    // da = g · bᵀ   (or g · b when b is stored transposed)
                    mm(m, n, k, g, false, bv.data(), !*trans_b, da, true);
                }
                if let Some(db) = self.slot(grads, *b) {
                    if *trans_b {
                        // db [n, k] = gᵀ · a
                        mm(n, m, k, g, true, av.data(), false, db, true);
                    } else {
                        // db [k, n] = aᵀ · g
                        mm(k, m, n, av.data(), true, g, false, db, true);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    add_into(db, g);
                }
            }
            Op::AddRow { x, bias } => {
                let n = node.value.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, g);
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gi), y) in dx.iter_mut().zip(g).zip(node.value.data()) {
                        if *y > T::zero() {
                            *d += *gi;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, g);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                if let Some(dx) = self.slot(grads, *x) {
                    // node is [r, c]; x is [c, r]
                    for i in 0..r {
                        for j in 0..c {
                            dx[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = (node.value.rows(), node.value.cols());
                let gv = self.nodes[gain.0].value.data();
                if let Some(dg) = self.slot(grads, *gain) {
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let nf = T::lit(n as f64);
                    let mut dxhat = vec![T::zero(); n];
                    for i in 0..m {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..n {
                            let d = g[i * n + j] * gv[j];
                            dxhat[j] = d;
                            mean_d += d;
                            mean_dx += d * xhat[i * n + j];
                        }
                        mean_d /= nf;
                        mean_dx /= nf;
                        for j in 0..n {
                            dx[i * n + j] +=
                                inv_std[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let wv = &self.nodes[w.0].value;
                let cout = wv.rows();
                let kk = wv.cols();
                let p = geom.hout * geom.wout;
                if let Some(dw) = self.slot(grads, *w) {
                    // dw [cout, kk] = g [cout, p] · colsᵀ
                    mm(cout, p, kk, g, false, cols, true, dw, true);
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (c, row) in g.chunks(p).enumerate() {
                        db[c] += row.iter().copied().sum::<T>();
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut dcols = vec![T::zero(); kk * p];
                    mm(kk, cout, p, wv.data(), true, g, false, &mut dcols, false);
                    let dx = self.slot(grads, *x).expect("requires grad");
                    col2im(&dcols, geom, dx);
                }
            }
            Op::Upsample2x { x } => {
                let s = node.value.shape();
                let (c, h2, w2) = (s[0], s[1], s[2]);
                let (h, w) = (h2 / 2, w2 / 2);
                if let Some(dx) = self.slot(grads, *x) {
                    for ch in 0..c {
                        for i in 0..h2 {
                            for j in 0..w2 {
                                dx[(ch * h + i / 2) * w + j / 2] += g[(ch * h2 + i) * w2 + j];
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *heads, probs, grads),
            Op::GatherRows { x, rows } => {
                let n = node.value.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut dx[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(dp) = self.slot(grads, *p) {
                        add_into(dp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (node.value.rows(), node.value.cols());
                let mut off = 0;
                for p in parts {
                    let c = self.nodes[p.0].value.cols();
                    if let Some(dp) = self.slot(grads, *p) {
                        for i in 0..m {
                            add_into(
                                &mut dp[i * c..(i + 1) * c],
                                &g[i * total + off..i * total + off + c],
                            );
                        }
                    }
                    off += c;
                }
            }
            Op::SigmoidBce {
                logits,
                targets,
                scale,
            } => {
                let xv = self.nodes[logits.0].value.data();
                let s = g[0] * *scale;
                if let Some(dx) = self.slot(grads, *logits) {
                    for ((d, &x), &y) in dx.iter_mut().zip(xv).zip(targets) {
                        *d += s * (x.sigmoid() - y);
                    }
                }
            }
            Op::DiceRows {
                logits,
                targets,
                eps,
            } => {
                let xv = &self.nodes[logits.0].value;
                let (r, n) = (xv.rows(), xv.cols());
                if r == 0 {
                    return;
                }
                let s = g[0] / T::lit(r as f64);
                if let Some(dx) = self.slot(grads, *logits) {
                    let two = T::lit(2.0);
                    for i in 0..r {
                        let p: Vec<T> = xv.row(i).iter().map(|x| x.sigmoid()).collect();
                        let t = &targets[i * n..(i + 1) * n];
                        let inter: T = p.iter().zip(t).map(|(a, b)| *a * *b).sum();
                        let denom = p.iter().copied().sum::<T>() + t.iter().copied().sum::<T>() + *eps;
                        let numer = two * inter + *eps;
                        for j in 0..n {
                            // d(1 - numer/denom)/dp_j
                            let dp = -(two * t[j] * denom - numer) / (denom * denom);
                            dx[i * n + j] += s * dp * p[j] * (T::one() - p[j]);
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for (v, w) in terms {
                    if let Some(dv) = self.slot(grads, *v) {
                        dv[0] += g[0] * *w;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let (n, d) = (qv.rows(), qv.cols());
        let m = kv.rows();
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (dsi, di) = (d as isize, m as isize);
        let mut dp = vec![T::zero(); n * m];
        for h in 0..heads {
            let o = h * dh;
            let p = &probs[h * n * m..(h + 1) * n * m];
            // dP = dO_h · v_hᵀ
            T::gemm(
                n,
                dh,
                m,
                T::one(),
                &g[o..],
                dsi,
                1,
                &vv.data()[o..],
                1,
                dsi,
                T::zero(),
                &mut dp,
                di,
                1,
            );
            if let Some(dv) = self.slot(grads, v) {
                // dV_h += Pᵀ · dO_h
                T::gemm(
                    m,
                    n,
                    dh,
                    T::one(),
                    p,
                    1,
                    di,
                    &g[o..],
                    dsi,
                    1,
                    T::one(),
                    &mut dv[o..],
                    dsi,
                    1,
                );
            }
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)) · scale
            for i in 0..n {
                let pr = &p[i * m..(i + 1) * m];
                let dr = &mut dp[i * m..(i + 1) * m];
                let dot: T = pr.iter().zip(dr.iter()).map(|(a, b)| *a * *b).sum();
                for (x, &pp) in dr.iter_mut().zip(pr) {
                    *x = pp * (*x - dot) * scale;
                }
            }
            if let Some(dq) = self.slot(grads, q) {
                // dQ_h += dS · k_h
                T::gemm(
                    n,
                    m,
                    dh,
                    T::one(),
                    &dp,
                    di,
                    1,
                    &kv.data()[o..],
                    dsi,
                    1,
                    T::one(),
                    &mut dq[o..],
                    dsi,
                    1,
                );
            }
            if let Some(dk) = self.slot(grads, k) {
                // dK_h += dSᵀ · q_h
                T::gemm(
                    m,
                    n,
                    dh,
                    T::one(),
                    &dp,
                    1,
                    di,
                    &qv.data()[o..],
                    dsi,
                    1,
                    T::one(),
                    &mut dk[o..],
                    dsi,
                    1,
                );
            }
        }
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.hout * g.wout;
    let mut cols = vec![T::zero(); g.cin * g.k * g.k * p];
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..g.hout {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    for oj in 0..g.wout {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj >= g.w as isize {
                            continue;
                        }
                        dst[oi * g.wout + oj] = x[(c * g.h + ii as usize) * g.w + jj as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.hout * g.wout;
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..g.hout {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    for oj in 0..g.wout {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj >= g.w as isize {
                            continue;
                        }
                        dx[(c * g.h + ii as usize) * g.w + jj as usize] += src[oi * g.wout + oj];
                    }
                }
            }
        }
    }
}

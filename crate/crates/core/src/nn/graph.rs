//! Reverse-mode autodiff tape.
//!
//! A [`Graph`] lives for one forward/backward pass. Parameters are referenced
//! from the [`ParamStore`] without copying; every other node owns its value.
//! Each op stores what its backward needs (softmax probabilities, norm
//! statistics) and recomputes the rest (im2col buffers).

use std::collections::HashMap;

use super::tensor::{gemm, MatRef};
use super::{ParamGrads, ParamId, ParamStore, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-6;
const GN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

enum Op {
    Leaf,
    Param(usize),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Silu(Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Patchify {
        x: Var,
        patch: usize,
    },
    Unpatchify {
        x: Var,
        patch: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Upsample2x(Var),
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_nodes: Vec<(usize, usize)>,
    n_params: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients of every parameter touched by the pass.
    pub fn param_grads(&self) -> ParamGrads {
        let mut out = ParamGrads::new(self.n_params);
        for &(pid, node) in &self.param_nodes {
            if let Some(g) = &self.grads[node] {
                out.accumulate(pid, g);
            }
        }
        out
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(pid)) => self.store.get(ParamId(*pid)),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A data leaf. Gradients are tracked when `requires_grad` is set.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id.0) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id.0),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id.0, v);
        v
    }

    /// `x[.., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(ws.len(), 2);
        let (din, dout) = (ws[0], ws[1]);
        assert_eq!(*xs.last().unwrap(), din, "linear input width");
        let rows = self.value(x).numel() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), dout);
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bias);
            }
        }
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let beta = if b.is_some() { 1.0 } else { 0.0 };
            gemm(rows, din, dout, 1.0, MatRef::rm(xv, 0, din), MatRef::rm(wv, 0, dout), beta, &mut out, 0, dout);
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::from_vec(&shape, out), Op::Linear { x, w, b }, &inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a);
        self.push(Tensor::from_vec(&shape, out), Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * factor).collect();
        let shape = self.shape(a);
        self.push(Tensor::from_vec(&shape, out), Op::Scale(a, factor), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()))
            .collect();
        let shape = self.shape(a);
        self.push(Tensor::from_vec(&shape, out), Op::Gelu(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        let shape = self.shape(a);
        self.push(Tensor::from_vec(&shape, out), Op::Silu(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape);
        self.push(t, Op::Reshape(a), &[a])
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let shape = self.shape(x);
        let d = *shape.last().unwrap();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        assert_eq!(g.len(), d);
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + bt[j];
            }
        }
        self.push(
            Tensor::from_vec(&shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Multi-head scaled dot-product attention on pre-projected `q[Tq,D]`, `k[Tk,D]`, `v[Tk,D]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let qs = self.shape(q);
        let ks = self.shape(k);
        assert_eq!(qs.len(), 2);
        assert_eq!(ks, self.shape(v));
        let (tq, d) = (qs[0], qs[1]);
        let tk = ks[0];
        assert_eq!(ks[1], d);
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut probs = vec![0.0; heads * tq * tk];
        let mut out = vec![0.0; tq * d];
        for h in 0..heads {
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            gemm(tq, dh, tk, scale, MatRef::rm(qv, h * dh, d), MatRef::tr(kv, h * dh, d), 0.0, p, 0, tk);
            for row in p.chunks_mut(tk) {
                softmax_in_place(row);
            }
            gemm(tq, tk, dh, 1.0, MatRef::rm(p, 0, tk), MatRef::rm(vv, h * dh, d), 0.0, &mut out, h * dh, d);
        }
        self.push(
            Tensor::from_vec(&[tq, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// `[C,H,W]` image to `[T, C·p·p]` patch tokens, tokens in row-major patch order.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 3);
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(h % patch == 0 && w % patch == 0);
        let out = patchify_data(self.value(x).data(), c, h, w, patch);
        let t = (h / patch) * (w / patch);
        self.push(
            Tensor::from_vec(&[t, c * patch * patch], out),
            Op::Patchify { x, patch },
            &[x],
        )
    }

    /// Inverse of [`Graph::patchify`]: `[T, C·p·p]` to `[C,H,W]`.
    pub fn unpatchify(&mut self, x: Var, channels: usize, h: usize, w: usize, patch: usize) -> Var {
        let s = self.shape(x);
        assert_eq!(s, vec![(h / patch) * (w / patch), channels * patch * patch]);
        let out = unpatchify_data(self.value(x).data(), channels, h, w, patch);
        self.push(
            Tensor::from_vec(&[channels, h, w], out),
            Op::Unpatchify { x, patch },
            &[x],
        )
    }

    /// 2-D convolution on `[N,C,H,W]` with weights `[O,C,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(xs.len(), 4);
        assert_eq!(ws.len(), 4);
        assert_eq!(xs[1], ws[1], "conv input channels");
        let geo = ConvGeom::new(&xs, &ws, stride, pad);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let ckk = geo.c * geo.k * geo.k;
        let hw_out = geo.ho * geo.wo;
        let mut out = vec![0.0; geo.n * geo.o * hw_out];
        let mut col = vec![0.0; ckk * hw_out];
        for n in 0..geo.n {
            let xn = &xv[n * geo.c * geo.h * geo.w..(n + 1) * geo.c * geo.h * geo.w];
            im2col(xn, &geo, &mut col);
            let off = n * geo.o * hw_out;
            if let Some(b) = b {
                let bias = self.value(b).data();
                for o in 0..geo.o {
                    out[off + o * hw_out..off + (o + 1) * hw_out].fill(bias[o]);
                }
            }
            let beta = if b.is_some() { 1.0 } else { 0.0 };
            gemm(geo.o, ckk, hw_out, 1.0, MatRef::rm(wv, 0, ckk), MatRef::rm(&col, 0, hw_out), beta, &mut out, off, hw_out);
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            Tensor::from_vec(&[geo.n, geo.o, geo.ho, geo.wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &inputs,
        )
    }

    /// Group normalization on `[N,C,H,W]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 4);
        let (n, c) = (s[0], s[1]);
        let hw = s[2] * s[3];
        assert_eq!(c % groups, 0);
        let cg = c / groups;
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; n * groups];
        let mut out = vec![0.0; xv.len()];
        let len = cg * hw;
        for ni in 0..n {
            for gi in 0..groups {
                let start = (ni * c + gi * cg) * hw;
                let seg = &xv[start..start + len];
                let mean = seg.iter().sum::<f64>() / len as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
                let rs = 1.0 / (var + GN_EPS).sqrt();
                rstd[ni * groups + gi] = rs;
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    for p in 0..hw {
                        let idx = start + ci * hw + p;
                        let xh = (xv[idx] - mean) * rs;
                        xhat[idx] = xh;
                        out[idx] = xh * g[ch] + bt[ch];
                    }
                }
            }
        }
        self.push(
            Tensor::from_vec(&s, out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Nearest-neighbor 2× upsampling of `[N,C,H,W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 4);
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; nc * 4 * h * w];
        for p in 0..nc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + xx] = xv[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        self.push(
            Tensor::from_vec(&[s[0], s[1], 2 * h, 2 * w], out),
            Op::Upsample2x(x),
            &[x],
        )
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Var {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert_eq!(sa.len(), sb.len());
        for (i, (x, y)) in sa.iter().zip(&sb).enumerate() {
            if i != axis {
                assert_eq!(x, y, "concat dims");
            }
        }
        let outer: usize = sa[..axis].iter().product();
        let ia: usize = sa[axis..].iter().product();
        let ib: usize = sb[axis..].iter().product();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            out.extend_from_slice(&av[o * ia..(o + 1) * ia]);
            out.extend_from_slice(&bv[o * ib..(o + 1) * ib]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        self.push(Tensor::from_vec(&shape, out), Op::Concat { a, b, axis }, &[a, b])
    }

    /// Reverse pass seeded with `(node, dLoss/dnode)` pairs.
    pub fn backward(&self, seeds: &[(Var, &[f64])]) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for &(v, g) in seeds {
            assert_eq!(g.len(), self.value(v).numel(), "seed gradient size");
            accumulate(&mut grads, v, g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backward_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        let param_nodes = self.params.iter().map(|(&p, &v)| (p, v.0)).collect();
        Gradients {
            grads,
            param_nodes,
            n_params: self.store.len(),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (din, dout) = (ws[0], ws[1]);
                let xv = self.value(*x).data();
                let rows = xv.len() / din;
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * din];
                    let wv = self.value(*w).data();
                    gemm(rows, dout, din, 1.0, MatRef::rm(gout, 0, dout), MatRef::tr(wv, 0, dout), 0.0, &mut dx, 0, din);
                    accumulate(grads, *x, &dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; din * dout];
                    gemm(din, rows, dout, 1.0, MatRef::tr(xv, 0, din), MatRef::rm(gout, 0, dout), 0.0, &mut dw, 0, dout);
                    accumulate(grads, *w, &dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; dout];
                        for row in gout.chunks(dout) {
                            db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                        accumulate(grads, *b, &db);
                    }
                }
            }
            Op::Add(a, b) => {
                accumulate_if(self, grads, *a, gout);
                accumulate_if(self, grads, *b, gout);
            }
            Op::Scale(a, f) => {
                let g: Vec<f64> = gout.iter().map(|v| v * f).collect();
                accumulate_if(self, grads, *a, &g);
            }
            Op::Reshape(a) => accumulate_if(self, grads, *a, gout),
            Op::Gelu(a) => {
                let g: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&x, &go)| {
                        let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                        go * d
                    })
                    .collect();
                accumulate_if(self, grads, *a, &g);
            }
            Op::Silu(a) => {
                let g: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&x, &go)| {
                        let s = sigmoid(x);
                        go * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                accumulate_if(self, grads, *a, &g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let g = self.value(*gamma).data();
                let d = g.len();
                let rows = xhat.len() / d;
                let mut dx = vec![0.0; xhat.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for r in 0..rows {
                    let go = &gout[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let dxh = go[j] * g[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                        dg[j] += go[j] * xh[j];
                        db[j] += go[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (go[j] * g[j] - m1 - xh[j] * m2);
                    }
                }
                accumulate_if(self, grads, *x, &dx);
                accumulate_if(self, grads, *gamma, &dg);
                accumulate_if(self, grads, *beta, &db);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let qs = self.shape(*q);
                let (tq, d) = (qs[0], qs[1]);
                let tk = self.shape(*k)[0];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let qv = self.value(*q).data();
                let kv = self.value(*k).data();
                let vv = self.value(*v).data();
                let mut dq = vec![0.0; tq * d];
                let mut dk = vec![0.0; tk * d];
                let mut dv = vec![0.0; tk * d];
                let mut dp = vec![0.0; tq * tk];
                for h in 0..*heads {
                    let p = &probs[h * tq * tk..(h + 1) * tq * tk];
                    // dV = Pᵀ dO
                    gemm(tk, tq, dh, 1.0, MatRef::tr(p, 0, tk), MatRef::rm(gout, h * dh, d), 0.0, &mut dv, h * dh, d);
                    // dP = dO Vᵀ
                    gemm(tq, dh, tk, 1.0, MatRef::rm(gout, h * dh, d), MatRef::tr(vv, h * dh, d), 0.0, &mut dp, 0, tk);
                    for (prow, dprow) in p.chunks(tk).zip(dp.chunks_mut(tk)) {
                        let dot: f64 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                        for (g, &pv) in dprow.iter_mut().zip(prow) {
                            *g = pv * (*g - dot);
                        }
                    }
                    gemm(tq, tk, dh, scale, MatRef::rm(&dp, 0, tk), MatRef::rm(kv, h * dh, d), 0.0, &mut dq, h * dh, d);
                    gemm(tk, tq, dh, scale, MatRef::tr(&dp, 0, tk), MatRef::rm(qv, h * dh, d), 0.0, &mut dk, h * dh, d);
                }
                accumulate_if(self, grads, *q, &dq);
                accumulate_if(self, grads, *k, &dk);
                accumulate_if(self, grads, *v, &dv);
            }
            Op::Patchify { x, patch } => {
                let s = self.shape(*x);
                let dx = unpatchify_data(gout, s[0], s[1], s[2], *patch);
                accumulate_if(self, grads, *x, &dx);
            }
            Op::Unpatchify { x, patch } => {
                let s = self.shape(*x);
                let c = s[1] / (patch * patch);
                let out = self.nodes[idx].value.as_ref().unwrap().shape().to_vec();
                let dx = patchify_data(gout, c, out[1], out[2], *patch);
                accumulate_if(self, grads, *x, &dx);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let geo = ConvGeom::new(&xs, &ws, *stride, *pad);
                let ckk = geo.c * geo.k * geo.k;
                let hw_out = geo.ho * geo.wo;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut dx = if want_x { vec![0.0; xv.len()] } else { Vec::new() };
                let mut dw = vec![0.0; if want_w { wv.len() } else { 0 }];
                let mut col = vec![0.0; ckk * hw_out];
                let in_sz = geo.c * geo.h * geo.w;
                for n in 0..geo.n {
                    let go = &gout[n * geo.o * hw_out..(n + 1) * geo.o * hw_out];
                    if want_w {
                        im2col(&xv[n * in_sz..(n + 1) * in_sz], &geo, &mut col);
                        gemm(geo.o, hw_out, ckk, 1.0, MatRef::rm(go, 0, hw_out), MatRef::tr(&col, 0, hw_out), 1.0, &mut dw, 0, ckk);
                    }
                    if want_x {
                        gemm(ckk, geo.o, hw_out, 1.0, MatRef::tr(wv, 0, ckk), MatRef::rm(go, 0, hw_out), 0.0, &mut col, 0, hw_out);
                        col2im(&col, &geo, &mut dx[n * in_sz..(n + 1) * in_sz]);
                    }
                }
                if want_x {
                    accumulate(grads, *x, &dx);
                }
                if want_w {
                    accumulate(grads, *w, &dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; geo.o];
                        for n in 0..geo.n {
                            for (o, d) in db.iter_mut().enumerate() {
                                let off = (n * geo.o + o) * hw_out;
                                *d += gout[off..off + hw_out].iter().sum::<f64>();
                            }
                        }
                        accumulate(grads, *b, &db);
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let s = self.shape(*x);
                let (n, c) = (s[0], s[1]);
                let hw = s[2] * s[3];
                let cg = c / groups;
                let g = self.value(*gamma).data();
                let mut dx = vec![0.0; xhat.len()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                let len = (cg * hw) as f64;
                for ni in 0..n {
                    for gi in 0..*groups {
                        let start = (ni * c + gi * cg) * hw;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            for p in 0..hw {
                                let i = start + ci * hw + p;
                                let dxh = gout[i] * g[ch];
                                m1 += dxh;
                                m2 += dxh * xhat[i];
                                dg[ch] += gout[i] * xhat[i];
                                db[ch] += gout[i];
                            }
                        }
                        m1 /= len;
                        m2 /= len;
                        let rs = rstd[ni * groups + gi];
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            for p in 0..hw {
                                let i = start + ci * hw + p;
                                dx[i] = rs * (gout[i] * g[ch] - m1 - xhat[i] * m2);
                            }
                        }
                    }
                }
                accumulate_if(self, grads, *x, &dx);
                accumulate_if(self, grads, *gamma, &dg);
                accumulate_if(self, grads, *beta, &db);
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut dx = vec![0.0; nc * h * w];
                for p in 0..nc {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[p * h * w + (y / 2) * w + xx / 2] += gout[p * 4 * h * w + y * 2 * w + xx];
                        }
                    }
                }
                accumulate_if(self, grads, *x, &dx);
            }
            Op::Concat { a, b, axis } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let outer: usize = sa[..*axis].iter().product();
                let ia: usize = sa[*axis..].iter().product();
                let ib: usize = sb[*axis..].iter().product();
                let mut da = Vec::with_capacity(outer * ia);
                let mut db = Vec::with_capacity(outer * ib);
                for o in 0..outer {
                    let base = o * (ia + ib);
                    da.extend_from_slice(&gout[base..base + ia]);
                    db.extend_from_slice(&gout[base + ia..base + ia + ib]);
                }
                accumulate_if(self, grads, *a, &da);
                accumulate_if(self, grads, *b, &db);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_if(graph: &Graph<'_>, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    if graph.wants(v) {
        accumulate(grads, v, g);
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn patchify_data(x: &[f64], c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (gh, gw) = (h / p, w / p);
    let feat = c * p * p;
    let mut out = vec![0.0; gh * gw * feat];
    for ty in 0..gh {
        for tx in 0..gw {
            let t = ty * gw + tx;
            for ci in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        out[t * feat + (ci * p + py) * p + px] = x[(ci * h + ty * p + py) * w + tx * p + px];
                    }
                }
            }
        }
    }
    out
}

fn unpatchify_data(tokens: &[f64], c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (gh, gw) = (h / p, w / p);
    let feat = c * p * p;
    let mut out = vec![0.0; c * h * w];
    for ty in 0..gh {
        for tx in 0..gw {
            let t = ty * gw + tx;
            for ci in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        out[(ci * h + ty * p + py) * w + tx * p + px] = tokens[t * feat + (ci * p + py) * p + px];
                    }
                }
            }
        }
    }
    out
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(ws[2], ws[3], "square kernels only");
        let k = ws[2];
        let ho = (xs[2] + 2 * pad - k) / stride + 1;
        let wo = (xs[3] + 2 * pad - k) / stride + 1;
        ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let hw_out = g.ho * g.wo;
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..(ci * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hw_out = g.ho * g.wo;
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::params::randn;

    /// Checks every op's backward against central differences on a scalar
    /// projection `L = Σ r ⊙ f(x)` with a fixed random `r`.
    fn gradcheck<F>(store: &mut ParamStore, inputs: Vec<Tensor>, f: F)
    where
        F: Fn(&mut Graph<'_>, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (probe, analytic_in, analytic_params) = {
            let mut g = Graph::new(store);
            let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
            let out = f(&mut g, &vars);
            let probe = randn(&mut rng, g.value(out).shape(), 1.0);
            let grads = g.backward(&[(out, probe.data())]);
            let gin: Vec<Vec<f64>> = vars.iter().map(|v| grads.get(*v).unwrap().to_vec()).collect();
            (probe, gin, grads.param_grads())
        };
        let eval = |store: &ParamStore, inputs: &[Tensor]| -> f64 {
            let mut g = Graph::new(store);
            let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
            let out = f(&mut g, &vars);
            g.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        for (i, t) in inputs.iter().enumerate() {
            for j in (0..t.numel()).step_by(1 + t.numel() / 13) {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= h;
                let fd = (eval(store, &plus) - eval(store, &minus)) / (2.0 * h);
                let an = analytic_in[i][j];
                assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "input {i}[{j}]: fd {fd} vs analytic {an}");
            }
        }
        for id in store.ids().collect::<Vec<_>>() {
            let n = store.get(id).numel();
            for j in (0..n).step_by(1 + n / 11) {
                let orig = store.get(id).data()[j];
                store.get_mut(id).data_mut()[j] = orig + h;
                let fp = eval(store, &inputs);
                store.get_mut(id).data_mut()[j] = orig - h;
                let fm = eval(store, &inputs);
                store.get_mut(id).data_mut()[j] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = analytic_params.get(id).map_or(0.0, |g| g[j]);
                assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "param {}[{j}]: fd {fd} vs analytic {an}", store.name(id));
            }
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn linear_gelu_layernorm_gradients() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let w = store.add("w", randn(&mut r, &[6, 5], 0.5));
        let b = store.add("b", randn(&mut r, &[5], 0.5));
        let g = store.add("g", randn(&mut r, &[5], 0.5));
        let bt = store.add("bt", randn(&mut r, &[5], 0.5));
        gradcheck(&mut store, vec![randn(&mut r, &[4, 6], 1.0)], |gr, v| {
            let (w, b, g, bt) = (gr.param(w), gr.param(b), gr.param(g), gr.param(bt));
            let y = gr.linear(v[0], w, Some(b));
            let y = gr.gelu(y);
            let y = gr.layer_norm(y, g, bt);
            let y2 = gr.scale(y, 0.7);
            gr.add(y, y2)
        });
    }

    #[test]
    fn attention_gradients() {
        let mut r = rng();
        let mut store = ParamStore::new();
        gradcheck(
            &mut store,
            vec![randn(&mut r, &[3, 8], 1.0), randn(&mut r, &[5, 8], 1.0), randn(&mut r, &[5, 8], 1.0)],
            |gr, v| gr.attention(v[0], v[1], v[2], 2),
        );
    }

    #[test]
    fn conv_groupnorm_silu_upsample_concat_gradients() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let w = store.add("w", randn(&mut r, &[4, 3, 3, 3], 0.4));
        let b = store.add("b", randn(&mut r, &[4], 0.4));
        let w2 = store.add("w2", randn(&mut r, &[4, 4, 3, 3], 0.4));
        let g = store.add("g", randn(&mut r, &[4], 0.5));
        let bt = store.add("bt", randn(&mut r, &[4], 0.5));
        gradcheck(&mut store, vec![randn(&mut r, &[2, 3, 6, 6], 1.0)], |gr, v| {
            let (w, b, w2, g, bt) = (gr.param(w), gr.param(b), gr.param(w2), gr.param(g), gr.param(bt));
            let y = gr.conv2d(v[0], w, Some(b), 1, 1);
            let y = gr.group_norm(y, g, bt, 2);
            let y = gr.silu(y);
            let d = gr.conv2d(y, w2, None, 2, 1);
            let u = gr.upsample2x(d);
            gr.concat(y, u, 1)
        });
    }

    #[test]
    fn patchify_roundtrip_and_gradients() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let x = randn(&mut r, &[2, 4, 6], 1.0);
        {
            let mut g = Graph::new(&store);
            let v = g.input(x.clone(), false);
            let p = g.patchify(v, 2);
            assert_eq!(g.shape(p), vec![6, 8]);
            let back = g.unpatchify(p, 2, 4, 6, 2);
            assert_eq!(g.value(back), &x);
        }
        gradcheck(&mut store, vec![x], |gr, v| {
            let p = gr.patchify(v[0], 2);
            let s = gr.scale(p, 2.0);
            let r = gr.reshape(s, &[12, 4]);
            gr.reshape(r, &[6, 8])
        });
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let w = store.add("w", randn(&mut r, &[2, 3, 3, 3], 1.0));
        let x = randn(&mut r, &[1, 3, 5, 5], 1.0);
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone(), false);
        let wv = g.param(w);
        let y = g.conv2d(xv, wv, None, 2, 1);
        assert_eq!(g.shape(y), vec![1, 2, 3, 3]);
        let wt = store.get(w).data();
        for o in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = 0.0;
                    for c in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    acc += wt[((o * 3 + c) * 3 + ky) * 3 + kx] * x.data()[(c * 5 + iy as usize) * 5 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = g.value(y).data()[(o * 3 + oy) * 3 + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

use super::kernels::{col2im, conv_out_size, im2col};
use super::{Real, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvT {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    AvgPool2(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Concat(Vec<Var>),
    Add(Var, Var),
    ScaleChannels(Var, Var),
    ScaleSpatial(Var, Var),
    SpatialMean(Var),
    SpatialMax(Var, Vec<usize>),
    ChannelMean(Var),
    ChannelMax(Var, Vec<usize>),
    Linear {
        w: Var,
        x: Var,
        b: Option<Var>,
    },
    L1Mean(Var, Var),
    MseConst(Var, T),
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    grad: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const NORM_EPS: f64 = 1e-5;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            grad: Vec::new(),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: Vec::new(),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; receives a gradient in [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Detached leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let t = &self.nodes[v.0].value;
        assert_eq!(t.data.len(), 1, "not a scalar: {:?}", t.shape);
        t.data[0]
    }

    /// Gradient after [`Graph::backward`]; `None` when nothing flowed into `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        let n = &self.nodes[v.0];
        (!n.grad.is_empty()).then_some(n.grad.as_slice())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = self.value(x).chw();
        let ws = self.value(w).shape.clone();
        assert!(
            ws.len() == 4 && ws[1] == c && ws[2] == ws[3],
            "conv weight {ws:?} incompatible with {c} input channels"
        );
        let (o, k) = (ws[0], ws[2]);
        let ho = conv_out_size(h, k, stride, pad).expect("input smaller than kernel");
        let wo = conv_out_size(wd, k, stride, pad).expect("input smaller than kernel");
        let plane = ho * wo;
        let mut out = vec![T::zero(); o * plane];
        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        if k == 1 && stride == 1 && pad == 0 {
            T::gemm(o, c, plane, T::one(), wv, false, xv, false, T::zero(), &mut out);
        } else {
            let mut cols = vec![T::zero(); c * k * k * plane];
            im2col(xv, (c, h, wd), k, stride, pad, (ho, wo), &mut cols);
            T::gemm(o, c * k * k, plane, T::one(), wv, false, &cols, false, T::zero(), &mut out);
        }
        if let Some(b) = b {
            let bv = &self.value(b).data;
            assert_eq!(bv.len(), o);
            for (oc, chunk) in out.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = *v + bv[oc]);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            Tensor::new(vec![o, ho, wo], out),
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            },
            &inputs,
        )
    }

    /// Transposed convolution with weight `[C_in, C_out, k, k]`; output size
    /// `(H − 1)·stride − 2·pad + k + output_padding`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Var {
        let (c, h, wd) = self.value(x).chw();
        let ws = self.value(w).shape.clone();
        assert!(
            ws.len() == 4 && ws[0] == c && ws[2] == ws[3],
            "transposed conv weight {ws:?} incompatible with {c} input channels"
        );
        let (o, k) = (ws[1], ws[2]);
        let ho = (h - 1) * stride + k + output_padding - 2 * pad;
        let wo = (wd - 1) * stride + k + output_padding - 2 * pad;
        assert_eq!(conv_out_size(ho, k, stride, pad), Some(h));
        assert_eq!(conv_out_size(wo, k, stride, pad), Some(wd));
        let okk = o * k * k;
        let mut cols = vec![T::zero(); okk * h * wd];
        T::gemm(
            okk,
            c,
            h * wd,
            T::one(),
            &self.value(w).data,
            true,
            &self.value(x).data,
            false,
            T::zero(),
            &mut cols,
        );
        let mut out = vec![T::zero(); o * ho * wo];
        col2im(&cols, (o, ho, wo), k, stride, pad, (h, wd), &mut out);
        if let Some(b) = b {
            let bv = &self.value(b).data;
            assert_eq!(bv.len(), o);
            for (oc, chunk) in out.chunks_mut(ho * wo).enumerate() {
                chunk.iter_mut().for_each(|v| *v = *v + bv[oc]);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            Tensor::new(vec![o, ho, wo], out),
            Op::ConvT {
                x,
                w,
                b,
                stride,
                pad,
            },
            &inputs,
        )
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims, got {h}x{w}");
        let (ho, wo) = (h / 2, w / 2);
        let xv = &self.value(x).data;
        let quarter = T::from_f64(0.25);
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let base = ch * h * w + 2 * i * w + 2 * j;
                    out[(ch * ho + i) * wo + j] =
                        (xv[base] + xv[base + 1] + xv[base + w] + xv[base + w + 1]) * quarter;
                }
            }
        }
        self.push(Tensor::new(vec![c, ho, wo], out), Op::AvgPool2(x), &[x])
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|&v| f(v)).collect());
        self.push(out, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        self.map(x, move |v| if v > T::zero() { v } else { v * s }, Op::LeakyRelu(x, s))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    /// Per-channel normalisation over the spatial dims with affine `gamma`,
    /// `beta` (batch normalisation of a single sample).
    pub fn norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let n = h * w;
        let xv = &self.value(x).data;
        let gv = &self.value(gamma).data;
        let bv = &self.value(beta).data;
        assert!(gv.len() == c && bv.len() == c);
        let nt = T::from_f64(n as f64);
        let eps = T::from_f64(NORM_EPS);
        let mut xhat = vec![T::zero(); c * n];
        let mut inv_std = vec![T::zero(); c];
        let mut out = vec![T::zero(); c * n];
        for ch in 0..c {
            let s = &xv[ch * n..(ch + 1) * n];
            let mean = s.iter().copied().sum::<T>() / nt;
            let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[ch] = inv;
            for i in 0..n {
                let xh = (s[i] - mean) * inv;
                xhat[ch * n + i] = xh;
                out[ch * n + i] = gv[ch] * xh + bv[ch];
            }
        }
        self.push(
            Tensor::new(vec![c, h, w], out),
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let (_, h, w) = self.value(parts[0]).chw();
        let mut data = Vec::new();
        let mut channels = 0;
        for &p in parts {
            let (c, ph, pw) = self.value(p).chw();
            assert!(ph == h && pw == w, "concat spatial mismatch");
            channels += c;
            data.extend_from_slice(&self.value(p).data);
        }
        self.push(
            Tensor::new(vec![channels, h, w], data),
            Op::Concat(parts.to_vec()),
            parts,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "add shape mismatch");
        let out = Tensor::new(
            ta.shape.clone(),
            ta.data.iter().zip(&tb.data).map(|(&x, &y)| x + y).collect(),
        );
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// `x[c, i, j] · s[c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let sv = &self.value(s).data;
        assert_eq!(sv.len(), c);
        let n = h * w;
        let xv = &self.value(x).data;
        let out = (0..c * n).map(|i| xv[i] * sv[i / n]).collect();
        self.push(Tensor::new(vec![c, h, w], out), Op::ScaleChannels(x, s), &[x, s])
    }

    /// `x[c, i, j] · s[0, i, j]`.
    pub fn scale_spatial(&mut self, x: Var, s: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let sv = &self.value(s).data;
        let n = h * w;
        assert_eq!(sv.len(), n);
        let xv = &self.value(x).data;
        let out = (0..c * n).map(|i| xv[i] * sv[i % n]).collect();
        self.push(Tensor::new(vec![c, h, w], out), Op::ScaleSpatial(x, s), &[x, s])
    }

    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let n = h * w;
        let nt = T::from_f64(n as f64);
        let xv = &self.value(x).data;
        let out = (0..c)
            .map(|ch| xv[ch * n..(ch + 1) * n].iter().copied().sum::<T>() / nt)
            .collect();
        self.push(Tensor::new(vec![c], out), Op::SpatialMean(x), &[x])
    }

    pub fn spatial_max(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let n = h * w;
        let xv = &self.value(x).data;
        let mut arg = Vec::with_capacity(c);
        let mut out = Vec::with_capacity(c);
        for ch in 0..c {
            let s = &xv[ch * n..(ch + 1) * n];
            let mut best = 0;
            for i in 1..n {
                if s[i] > s[best] {
                    best = i;
                }
            }
            arg.push(ch * n + best);
            out.push(s[best]);
        }
        self.push(Tensor::new(vec![c], out), Op::SpatialMax(x, arg), &[x])
    }

    pub fn channel_mean(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let n = h * w;
        let ct = T::from_f64(c as f64);
        let xv = &self.value(x).data;
        let out = (0..n)
            .map(|i| (0..c).map(|ch| xv[ch * n + i]).sum::<T>() / ct)
            .collect();
        self.push(Tensor::new(vec![1, h, w], out), Op::ChannelMean(x), &[x])
    }

    pub fn channel_max(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let n = h * w;
        let xv = &self.value(x).data;
        let mut arg = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut best = i;
            for ch in 1..c {
                if xv[ch * n + i] > xv[best] {
                    best = ch * n + i;
                }
            }
            arg.push(best);
            out.push(xv[best]);
        }
        self.push(Tensor::new(vec![1, h, w], out), Op::ChannelMax(x, arg), &[x])
    }

    /// `W x + b` with `W` of shape `[out, in]` and `x` of length `in`.
    pub fn linear(&mut self, w: Var, x: Var, b: Option<Var>) -> Var {
        let ws = &self.value(w).shape;
        assert_eq!(ws.len(), 2);
        let (o, i) = (ws[0], ws[1]);
        let xv = &self.value(x).data;
        assert_eq!(xv.len(), i, "linear input length mismatch");
        let wv = &self.value(w).data;
        let mut out: Vec<T> = (0..o)
            .map(|r| (0..i).map(|k| wv[r * i + k] * xv[k]).sum())
            .collect();
        if let Some(b) = b {
            let bv = &self.value(b).data;
            out.iter_mut().zip(bv).for_each(|(y, &bb)| *y = *y + bb);
        }
        let mut inputs = vec![w, x];
        inputs.extend(b);
        self.push(Tensor::new(vec![o], out), Op::Linear { w, x, b }, &inputs)
    }

    /// `mean |a − b|` as a scalar.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.data.len(), tb.data.len(), "l1 shape mismatch");
        let n = T::from_f64(ta.data.len() as f64);
        let s = ta.data.iter().zip(&tb.data).map(|(&x, &y)| (x - y).abs()).sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::L1Mean(a, b), &[a, b])
    }

    /// `mean (a − target)²` as a scalar.
    pub fn mse_const(&mut self, a: Var, target: f64) -> Var {
        let t = T::from_f64(target);
        let ta = self.value(a);
        let n = T::from_f64(ta.data.len() as f64);
        let s = ta.data.iter().map(|&x| (x - t) * (x - t)).sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::MseConst(a, t), &[a])
    }

    /// `Σ cᵢ·vᵢ` over same-shaped tensors.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let shape = self.value(terms[0].0).shape.clone();
        let mut out = vec![T::zero(); self.value(terms[0].0).data.len()];
        let mut typed = Vec::with_capacity(terms.len());
        for &(v, c) in terms {
            let t = self.value(v);
            assert_eq!(t.shape, shape, "weighted_sum shape mismatch");
            let c = T::from_f64(c);
            out.iter_mut().zip(&t.data).for_each(|(o, &x)| *o = *o + c * x);
            typed.push((v, c));
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::new(shape, out), Op::WeightedSum(typed), &inputs)
    }

    /// Reverse sweep from scalar `loss`. Gradients from any earlier sweep are
    /// discarded.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.nodes[loss.0].value.data.len(), 1, "loss must be a scalar");
        for n in &mut self.nodes {
            n.grad = Vec::new();
        }
        if !self.nodes[loss.0].needs_grad {
            return;
        }
        self.nodes[loss.0].grad = vec![T::one()];
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_empty() {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            backprop(before, node);
        }
    }
}

/// Takes `v`'s gradient buffer (zero-filled on first use) if it needs one.
fn take<T: Real>(nodes: &mut [Node<T>], v: Var) -> Option<Vec<T>> {
    let n = &mut nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    if n.grad.is_empty() {
        Some(vec![T::zero(); n.value.data.len()])
    } else {
        Some(std::mem::take(&mut n.grad))
    }
}

fn put<T: Real>(nodes: &mut [Node<T>], v: Var, g: Vec<T>) {
    nodes[v.0].grad = g;
}

fn accumulate<T: Real>(nodes: &mut [Node<T>], v: Var, f: impl FnOnce(&[Node<T>], &mut [T])) {
    if let Some(mut g) = take(nodes, v) {
        f(nodes, &mut g);
        put(nodes, v, g);
    }
}

fn backprop<T: Real>(nodes: &mut [Node<T>], node: &Node<T>) {
    let gy = &node.grad;
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Conv {
            x,
            w,
            b,
            stride,
            pad,
        } => {
            let (c, h, wd) = nodes[x.0].value.chw();
            let ws = nodes[w.0].value.shape.clone();
            let (o, k) = (ws[0], ws[2]);
            let (ho, wo) = (y.shape[1], y.shape[2]);
            let plane = ho * wo;
            let ckk = c * k * k;
            let pointwise = k == 1 && *stride == 1 && *pad == 0;
            let cols = |nodes: &[Node<T>]| {
                let mut cols = vec![T::zero(); ckk * plane];
                im2col(&nodes[x.0].value.data, (c, h, wd), k, *stride, *pad, (ho, wo), &mut cols);
                cols
            };
            accumulate(nodes, *w, |nodes, gw| {
                if pointwise {
                    T::gemm(o, plane, ckk, T::one(), gy, false, &nodes[x.0].value.data, true, T::one(), gw);
                } else {
                    let cols = cols(nodes);
                    T::gemm(o, plane, ckk, T::one(), gy, false, &cols, true, T::one(), gw);
                }
            });
            if let Some(b) = b {
                accumulate(nodes, *b, |_, gb| {
                    for (oc, chunk) in gy.chunks(plane).enumerate() {
                        gb[oc] = gb[oc] + chunk.iter().copied().sum::<T>();
                    }
                });
            }
            accumulate(nodes, *x, |nodes, gx| {
                let wv = &nodes[w.0].value.data;
                if pointwise {
                    T::gemm(ckk, o, plane, T::one(), wv, true, gy, false, T::one(), gx);
                } else {
                    let mut dcols = vec![T::zero(); ckk * plane];
                    T::gemm(ckk, o, plane, T::one(), wv, true, gy, false, T::zero(), &mut dcols);
                    col2im(&dcols, (c, h, wd), k, *stride, *pad, (ho, wo), gx);
                }
            });
        }
        Op::ConvT {
            x,
            w,
            b,
            stride,
            pad,
        } => {
            let (c, h, wd) = nodes[x.0].value.chw();
            let ws = nodes[w.0].value.shape.clone();
            let (o, k) = (ws[1], ws[2]);
            let (ho, wo) = (y.shape[1], y.shape[2]);
            let okk = o * k * k;
            let hw = h * wd;
            let mut dcols = vec![T::zero(); okk * hw];
            im2col(gy, (o, ho, wo), k, *stride, *pad, (h, wd), &mut dcols);
            accumulate(nodes, *w, |nodes, gw| {
                T::gemm(c, hw, okk, T::one(), &nodes[x.0].value.data, false, &dcols, true, T::one(), gw);
            });
            if let Some(b) = b {
                accumulate(nodes, *b, |_, gb| {
                    for (oc, chunk) in gy.chunks(ho * wo).enumerate() {
                        gb[oc] = gb[oc] + chunk.iter().copied().sum::<T>();
                    }
                });
            }
            accumulate(nodes, *x, |nodes, gx| {
                T::gemm(c, okk, hw, T::one(), &nodes[w.0].value.data, false, &dcols, false, T::one(), gx);
            });
        }
        Op::AvgPool2(x) => {
            let (c, h, w) = nodes[x.0].value.chw();
            let (ho, wo) = (h / 2, w / 2);
            let quarter = T::from_f64(0.25);
            accumulate(nodes, *x, |_, gx| {
                for ch in 0..c {
                    for i in 0..ho {
                        for j in 0..wo {
                            let g = gy[(ch * ho + i) * wo + j] * quarter;
                            let base = ch * h * w + 2 * i * w + 2 * j;
                            for off in [0, 1, w, w + 1] {
                                gx[base + off] = gx[base + off] + g;
                            }
                        }
                    }
                }
            });
        }
        Op::Relu(x) => accumulate(nodes, *x, |_, gx| {
            for i in 0..gx.len() {
                if y.data[i] > T::zero() {
                    gx[i] = gx[i] + gy[i];
                }
            }
        }),
        Op::LeakyRelu(x, s) => accumulate(nodes, *x, |_, gx| {
            for i in 0..gx.len() {
                let d = if y.data[i] > T::zero() { gy[i] } else { gy[i] * *s };
                gx[i] = gx[i] + d;
            }
        }),
        Op::Sigmoid(x) => accumulate(nodes, *x, |_, gx| {
            for i in 0..gx.len() {
                let s = y.data[i];
                gx[i] = gx[i] + gy[i] * s * (T::one() - s);
            }
        }),
        Op::Norm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let c = inv_std.len();
            let n = gy.len() / c;
            let nt = T::from_f64(n as f64);
            let mut sum_dy = vec![T::zero(); c];
            let mut sum_dy_xhat = vec![T::zero(); c];
            for ch in 0..c {
                for i in ch * n..(ch + 1) * n {
                    sum_dy[ch] = sum_dy[ch] + gy[i];
                    sum_dy_xhat[ch] = sum_dy_xhat[ch] + gy[i] * xhat[i];
                }
            }
            accumulate(nodes, *beta, |_, gb| {
                for ch in 0..c {
                    gb[ch] = gb[ch] + sum_dy[ch];
                }
            });
            accumulate(nodes, *gamma, |_, gg| {
                for ch in 0..c {
                    gg[ch] = gg[ch] + sum_dy_xhat[ch];
                }
            });
            accumulate(nodes, *x, |nodes, gx| {
                let gv = &nodes[gamma.0].value.data;
                for ch in 0..c {
                    let scale = gv[ch] * inv_std[ch] / nt;
                    for i in ch * n..(ch + 1) * n {
                        let d = scale * (nt * gy[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch]);
                        gx[i] = gx[i] + d;
                    }
                }
            });
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p.0].value.data.len();
                accumulate(nodes, p, |_, gp| {
                    for i in 0..len {
                        gp[i] = gp[i] + gy[offset + i];
                    }
                });
                offset += len;
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                accumulate(nodes, v, |_, g| {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + d);
                });
            }
        }
        Op::ScaleChannels(x, s) | Op::ScaleSpatial(x, s) => {
            let per_channel = matches!(node.op, Op::ScaleChannels(..));
            let (_, h, w) = nodes[x.0].value.chw();
            let n = h * w;
            let idx = |i: usize| if per_channel { i / n } else { i % n };
            accumulate(nodes, *s, |nodes, gs| {
                let xv = &nodes[x.0].value.data;
                for i in 0..gy.len() {
                    gs[idx(i)] = gs[idx(i)] + gy[i] * xv[i];
                }
            });
            accumulate(nodes, *x, |nodes, gx| {
                let sv = &nodes[s.0].value.data;
                for i in 0..gy.len() {
                    gx[i] = gx[i] + gy[i] * sv[idx(i)];
                }
            });
        }
        Op::SpatialMean(x) => {
            let n = nodes[x.0].value.data.len() / gy.len();
            let nt = T::from_f64(n as f64);
            accumulate(nodes, *x, |_, gx| {
                for i in 0..gx.len() {
                    gx[i] = gx[i] + gy[i / n] / nt;
                }
            });
        }
        Op::ChannelMean(x) => {
            let n = gy.len();
            let ct = T::from_f64((nodes[x.0].value.data.len() / n) as f64);
            accumulate(nodes, *x, |_, gx| {
                for i in 0..gx.len() {
                    gx[i] = gx[i] + gy[i % n] / ct;
                }
            });
        }
        Op::SpatialMax(x, arg) | Op::ChannelMax(x, arg) => accumulate(nodes, *x, |_, gx| {
            for (k, &i) in arg.iter().enumerate() {
                gx[i] = gx[i] + gy[k];
            }
        }),
        Op::Linear { w, x, b } => {
            let (o, i) = (nodes[w.0].value.shape[0], nodes[w.0].value.shape[1]);
            accumulate(nodes, *w, |nodes, gw| {
                let xv = &nodes[x.0].value.data;
                for r in 0..o {
                    for k in 0..i {
                        gw[r * i + k] = gw[r * i + k] + gy[r] * xv[k];
                    }
                }
            });
            if let Some(b) = b {
                accumulate(nodes, *b, |_, gb| {
                    gb.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + d);
                });
            }
            accumulate(nodes, *x, |nodes, gx| {
                let wv = &nodes[w.0].value.data;
                for k in 0..i {
                    let mut acc = T::zero();
                    for r in 0..o {
                        acc = acc + wv[r * i + k] * gy[r];
                    }
                    gx[k] = gx[k] + acc;
                }
            });
        }
        Op::L1Mean(a, b) => {
            let n = nodes[a.0].value.data.len();
            let scale = gy[0] / T::from_f64(n as f64);
            let signs: Vec<T> = nodes[a.0]
                .value
                .data
                .iter()
                .zip(&nodes[b.0].value.data)
                .map(|(&p, &q)| {
                    let d = p - q;
                    if d > T::zero() {
                        scale
                    } else if d < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                })
                .collect();
            accumulate(nodes, *a, |_, ga| {
                ga.iter_mut().zip(&signs).for_each(|(g, &s)| *g = *g + s);
            });
            accumulate(nodes, *b, |_, gb| {
                gb.iter_mut().zip(&signs).for_each(|(g, &s)| *g = *g - s);
            });
        }
        Op::MseConst(a, t) => {
            let n = nodes[a.0].value.data.len();
            let scale = gy[0] * T::from_f64(2.0 / n as f64);
            accumulate(nodes, *a, |nodes, ga| {
                let av = &nodes[a.0].value.data;
                for i in 0..n {
                    ga[i] = ga[i] + scale * (av[i] - *t);
                }
            });
        }
        Op::WeightedSum(terms) => {
            for &(v, c) in terms {
                accumulate(nodes, v, |_, g| {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + c * d);
                });
            }
        }
    }
}

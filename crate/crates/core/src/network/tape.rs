//! Reverse-mode differentiation over a linear tape of tensor operations.

use std::rc::Rc;

use super::kernels::{self, AxisMap, ConvGeom};
use super::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Concat(Vec<Var>),
    Warp { feat: Var, flow: Var },
    Resize { x: Var, ym: Rc<AxisMap>, xm: Rc<AxisMap>, scale: f64 },
    L1Mean { pred: Var, target: Rc<Tensor>, mask: Option<Rc<Vec<bool>>>, count: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every tape entry it depends on.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// `x` is `C_in x H x W`, `w` is `C_out x C_in x k x k`, `b` is `C_out`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (c_in, h, wd) = self.value(x).chw();
        let ws = self.value(w).shape().to_vec();
        assert!(ws.len() == 4 && ws[1] == c_in && ws[2] == ws[3], "conv weight {ws:?} vs input channels {c_in}");
        let geom = ConvGeom { c_in, h, w: wd, c_out: ws[0], k: ws[2], stride, pad };
        let (ho, wo) = geom.out_hw();
        let bias = b.map(|b| self.value(b).data.as_slice());
        let out = kernels::conv2d_forward(&geom, &self.value(x).data, &self.value(w).data, bias);
        self.push(Tensor::new(&[ws[0], ho, wo], out), Op::Conv2d { x, w, b, geom })
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape());
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| f(*x, *y)).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::new(&shape, data), op)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let data = va.data.iter().map(|x| f(*x)).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::new(&shape, data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    /// Leaky rectifier; `slope = 0` gives a plain ReLU.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map(a, move |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    /// Concatenates `C x H x W` tensors along channels.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let (_, h, w) = self.value(parts[0]).chw();
        let mut data = Vec::new();
        let mut c = 0;
        for &p in parts {
            let (pc, ph, pw) = self.value(p).chw();
            assert_eq!((ph, pw), (h, w), "concat spatial mismatch");
            data.extend_from_slice(&self.value(p).data);
            c += pc;
        }
        self.push(Tensor::new(&[c, h, w], data), Op::Concat(parts.to_vec()))
    }

    /// Backward warp of `feat` (`C x H x W`) by `flow` (`2 x H x W`).
    pub fn warp(&mut self, feat: Var, flow: Var) -> Var {
        let (c, h, w) = self.value(feat).chw();
        assert_eq!(self.value(flow).shape(), &[2, h, w], "flow must be 2 x H x W");
        let out = kernels::warp_forward(&self.value(feat).data, c, h, w, &self.value(flow).data);
        self.push(Tensor::new(&[c, h, w], out), Op::Warp { feat, flow })
    }

    /// Bilinear resize to `(h, w)`, multiplying values by `scale`.
    pub fn resize(&mut self, x: Var, h: usize, w: usize, scale: f64) -> Var {
        let (c, hi, wi) = self.value(x).chw();
        let ym = Rc::new(AxisMap::new(hi, h));
        let xm = Rc::new(AxisMap::new(wi, w));
        let out = kernels::resize_forward(&self.value(x).data, c, &ym, &xm, scale);
        self.push(Tensor::new(&[c, h, w], out), Op::Resize { x, ym, xm, scale })
    }

    /// Mean over unmasked pixels of the per-pixel L1 distance, summed over
    /// channels: `mean_p sum_c |pred - target|`.
    pub fn l1_mean(&mut self, pred: Var, target: Rc<Tensor>, mask: Option<Rc<Vec<bool>>>) -> Var {
        let (c, h, w) = self.value(pred).chw();
        assert_eq!(target.shape(), &[c, h, w]);
        let n = h * w;
        let p = &self.value(pred).data;
        let keep = |i: usize| mask.as_ref().map_or(true, |m| m[i]);
        let count = (0..n).filter(|&i| keep(i)).count();
        let mut total = 0.0;
        for i in (0..n).filter(|&i| keep(i)) {
            for ch in 0..c {
                total += (p[ch * n + i] - target.data[ch * n + i]).abs();
            }
        }
        let value = if count > 0 { total / count as f64 } else { 0.0 };
        self.push(Tensor::scalar(value), Op::L1Mean { pred, target, mask, count })
    }

    /// Gradients of the scalar `out` with respect to everything before it.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        self.backward_from(out, Tensor::new(self.value(out).shape(), vec![1.0]))
    }

    /// Vector-Jacobian product seeded with `seed` at `out`.
    pub fn backward_from(&self, out: Var, seed: Tensor) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let xv = &self.value(*x).data;
                let wv = &self.value(*w).data;
                let mut gi = Tensor::zeros(self.value(*x).shape());
                let mut gw = Tensor::zeros(self.value(*w).shape());
                let mut gb = b.map(|b| Tensor::zeros(self.value(b).shape()));
                kernels::conv2d_backward(
                    geom,
                    xv,
                    wv,
                    &g.data,
                    Some(&mut gi.data),
                    Some(&mut gw.data),
                    gb.as_mut().map(|t| t.data.as_mut_slice()),
                );
                accumulator(grads, &self.nodes, *x).add_assign(&gi);
                accumulator(grads, &self.nodes, *w).add_assign(&gw);
                if let (Some(b), Some(gb)) = (b, gb) {
                    accumulator(grads, &self.nodes, *b).add_assign(&gb);
                }
            }
            Op::Add(a, b) => {
                accumulator(grads, &self.nodes, *a).add_assign(g);
                accumulator(grads, &self.nodes, *b).add_assign(g);
            }
            Op::Sub(a, b) => {
                accumulator(grads, &self.nodes, *a).add_assign(g);
                let gb = accumulator(grads, &self.nodes, *b);
                for (d, s) in gb.data.iter_mut().zip(&g.data) {
                    *d -= s;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                let ga = accumulator(grads, &self.nodes, *a);
                for ((d, s), y) in ga.data.iter_mut().zip(&g.data).zip(vb.iter()) {
                    *d += s * y;
                }
                let gb = accumulator(grads, &self.nodes, *b);
                for ((d, s), x) in gb.data.iter_mut().zip(&g.data).zip(va.iter()) {
                    *d += s * x;
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value.data;
                let ga = accumulator(grads, &self.nodes, *a);
                for ((d, s), y) in ga.data.iter_mut().zip(&g.data).zip(y) {
                    *d += s * y * (1.0 - y);
                }
            }
            Op::Tanh(a) => {
                let y = &node.value.data;
                let ga = accumulator(grads, &self.nodes, *a);
                for ((d, s), y) in ga.data.iter_mut().zip(&g.data).zip(y) {
                    *d += s * (1.0 - y * y);
                }
            }
            Op::LeakyRelu(a, slope) => {
                let x = &self.value(*a).data;
                let ga = accumulator(grads, &self.nodes, *a);
                for ((d, s), x) in ga.data.iter_mut().zip(&g.data).zip(x.iter()) {
                    *d += if *x > 0.0 { *s } else { slope * s };
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    let gp = accumulator(grads, &self.nodes, *p);
                    for (d, s) in gp.data.iter_mut().zip(&g.data[off..off + n]) {
                        *d += s;
                    }
                    off += n;
                }
            }
            Op::Warp { feat, flow } => {
                let (c, h, w) = self.value(*feat).chw();
                let mut gf = Tensor::zeros(self.value(*feat).shape());
                let mut gflow = Tensor::zeros(self.value(*flow).shape());
                kernels::warp_backward(
                    &self.value(*feat).data,
                    c,
                    h,
                    w,
                    &self.value(*flow).data,
                    &g.data,
                    Some(&mut gf.data),
                    Some(&mut gflow.data),
                );
                accumulator(grads, &self.nodes, *feat).add_assign(&gf);
                accumulator(grads, &self.nodes, *flow).add_assign(&gflow);
            }
            Op::Resize { x, ym, xm, scale } => {
                let (c, _, _) = self.value(*x).chw();
                let gx = accumulator(grads, &self.nodes, *x);
                kernels::resize_backward(&g.data, c, ym, xm, *scale, &mut gx.data);
            }
            Op::L1Mean { pred, target, mask, count } => {
                if *count == 0 {
                    return;
                }
                let (c, h, w) = self.value(*pred).chw();
                let n = h * w;
                let p = &self.value(*pred).data;
                let scale = g.item() / *count as f64;
                let gp = accumulator(grads, &self.nodes, *pred);
                for i in 0..n {
                    if mask.as_ref().is_some_and(|m| !m[i]) {
                        continue;
                    }
                    for ch in 0..c {
                        let d = p[ch * n + i] - target.data[ch * n + i];
                        gp.data[ch * n + i] += scale * d.signum() * (d != 0.0) as u8 as f64;
                    }
                }
            }
        }
    }
}

fn accumulator<'a>(grads: &'a mut [Option<Tensor>], nodes: &[Node], v: Var) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

//! Reverse-mode automatic differentiation over a per-step tape.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! the tape once per graph (see [`Graph::param`]), so every use of a weight,
//! including the two Siamese branches and the four pyramid levels that share
//! a discriminator, accumulates into a single gradient.

use std::collections::BTreeMap;

use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs available to a backward closure.
pub struct BackCtx<'a, T> {
    pub grad: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub needs: Vec<bool>,
}

type BackFn<T> = Box<dyn Fn(&BackCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    back: Option<BackFn<T>>,
    requires_grad: bool,
}

/// One sampled region for [`Graph::roi_align`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiRef {
    /// Index into the level list.
    pub level: usize,
    /// Image index within the batch.
    pub batch: usize,
    /// Box in input-image pixels.
    pub bbox: [f64; 4],
}

/// Tape of operations for one forward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    buffer_updates: Vec<(String, Tensor<T>)>,
    frozen: bool,
    kinks: Option<u64>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn lit<T: Real>(x: f64) -> T {
    T::lit(x)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new(), buffer_updates: Vec::new(), frozen: false, kinks: None }
    }

    /// A graph whose parameters enter as constants: nothing upstream of a
    /// parameter is differentiable and no backward closures are kept unless
    /// a [`Graph::leaf`] is introduced.
    pub fn frozen() -> Self {
        Self { frozen: true, ..Self::new() }
    }

    /// Records which side of every non-smooth point (ReLU zero, smooth-L1
    /// knee, probability clamp) each element falls on; see
    /// [`Graph::kink_signature`].
    pub fn track_kinks(mut self) -> Self {
        self.kinks = Some(0xcbf2_9ce4_8422_2325);
        self
    }

    /// Hash of the recorded branch pattern, or `None` when not tracking.
    /// Two evaluations with the same signature lie on the same smooth piece.
    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks
    }

    fn note_kinks(&mut self, sides: impl Iterator<Item = bool>) {
        if let Some(h) = self.kinks.as_mut() {
            for s in sides {
                *h = (*h ^ s as u64).wrapping_mul(0x0100_0000_01b3);
            }
            *h = (*h ^ 0xff).wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, parents: &[Var], back: BackFn<T>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            back: if requires_grad { Some(back) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), back: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Differentiable input that is not a named parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// A named parameter. The first call copies the value out of `store`;
    /// later calls in the same graph return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = store.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).clone();
        let v = self.push_leaf(value, !self.frozen);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Parameters that entered this graph, by name.
    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn record_buffer_update(&mut self, name: String, value: Tensor<T>) {
        self.buffer_updates.push((name, value));
    }

    /// Running-statistic updates recorded by training-mode batch norm.
    pub fn take_buffer_updates(&mut self) -> Vec<(String, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Backpropagates from a single-element `loss` node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = node.back.as_ref() else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let ctx = BackCtx {
                grad: &grad,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                needs: node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect(),
            };
            let parent_grads = back(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                if let Some(pg) = pg {
                    debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(grad);
        }
        Gradients { grads }
    }

    /// Gradients of every parameter used in this graph. Parameters the loss
    /// does not depend on get an explicit zero gradient.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }

    // ----------------------------------------------------------------------
    // elementwise and structural ops
    // ----------------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, &[a, b], Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())]))
    }

    /// `sum_i w_i * x_i` over same-shaped inputs.
    pub fn lincomb(&mut self, terms: &[(Var, T)]) -> Var {
        assert!(!terms.is_empty());
        let mut out = Tensor::zeros(self.value(terms[0].0).shape());
        for &(v, w) in terms {
            let x = self.value(v);
            assert_eq!(x.shape(), out.shape(), "lincomb shape mismatch");
            for (o, &xv) in out.data_mut().iter_mut().zip(x.data()) {
                *o += w * xv;
            }
        }
        let weights: Vec<T> = terms.iter().map(|t| t.1).collect();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(out, &vars, Box::new(move |c| weights.iter().map(|&w| Some(c.grad.scale(w))).collect()))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, &[a], Box::new(move |c| vec![Some(c.grad.scale(s))]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        if self.kinks.is_some() {
            let sides: Vec<bool> = self.value(a).data().iter().map(|&x| x > T::zero()).collect();
            self.note_kinks(sides.into_iter());
        }
        self.push(
            out,
            &[a],
            Box::new(|c| {
                let mut g = c.grad.clone();
                for (gv, &y) in g.data_mut().iter_mut().zip(c.output.data()) {
                    if y <= T::zero() {
                        *gv = T::zero();
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Gradient reversal: identity forward, gradient multiplied by `-scale`
    /// on the way back.
    pub fn grl(&mut self, a: Var, scale: T) -> Var {
        let out = self.value(a).clone();
        self.push(out, &[a], Box::new(move |c| vec![Some(c.grad.scale(-scale))]))
    }

    /// Cuts gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let in_shape = self.value(a).shape().to_vec();
        let out = self.value(a).clone().reshape(shape);
        self.push(out, &[a], Box::new(move |c| vec![Some(c.grad.clone().reshape(&in_shape))]))
    }

    /// Concatenation along axis 0.
    pub fn concat0(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let sizes: Vec<(Vec<usize>, usize)> =
            tensors.iter().map(|t| (t.shape().to_vec(), t.numel())).collect();
        let out = Tensor::concat0(&tensors);
        self.push(
            out,
            parts,
            Box::new(move |c| {
                let mut off = 0;
                sizes
                    .iter()
                    .map(|(shape, n)| {
                        let g = Tensor::from_vec(shape, c.grad.data()[off..off + n].to_vec());
                        off += n;
                        Some(g)
                    })
                    .collect()
            }),
        )
    }

    /// Flat gather: `out[i] = x.flat[idx[i]]`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let src = self.value(x);
        let out = Tensor::from_vec(&[idx.len()], idx.iter().map(|&i| src.data()[i]).collect());
        let in_shape = src.shape().to_vec();
        self.push(
            out,
            &[x],
            Box::new(move |c| {
                let mut g = Tensor::zeros(&in_shape);
                let gd = g.data_mut();
                for (&i, &v) in idx.iter().zip(c.grad.data()) {
                    gd[i] += v;
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let shape = self.value(a).shape().to_vec();
        self.push(out, &[a], Box::new(move |c| vec![Some(Tensor::full(&shape, c.grad.item()))]))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        assert!(n > 0, "mean of empty tensor");
        let s = self.sum_all(a);
        self.scale(s, T::one() / lit::<T>(n as f64))
    }

    // ----------------------------------------------------------------------
    // layers
    // ----------------------------------------------------------------------

    /// `y = x w^T + b` with `x: [M, K]`, `w: [O, K]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xm, wm) = (self.value(x), self.value(w));
        assert_eq!(xm.shape().len(), 2, "linear input must be 2-d");
        let (m, k) = (xm.shape()[0], xm.shape()[1]);
        let o = wm.shape()[0];
        assert_eq!(wm.shape(), &[o, k], "linear weight shape");
        let bias = self.value(b).data().to_vec();
        let mut out = vec![T::zero(); m * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(&bias);
        }
        T::gemm(m, k, o, T::one(), xm.data(), false, wm.data(), true, T::one(), &mut out);
        self.push(
            Tensor::from_vec(&[m, o], out),
            &[x, w, b],
            Box::new(move |c| {
                let g = c.grad.data();
                let (xv, wv) = (c.inputs[0], c.inputs[1]);
                let dx = c.needs[0].then(|| {
                    let mut dx = vec![T::zero(); m * k];
                    T::gemm(m, o, k, T::one(), g, false, wv.data(), false, T::zero(), &mut dx);
                    Tensor::from_vec(&[m, k], dx)
                });
                let dw = c.needs[1].then(|| {
                    let mut dw = vec![T::zero(); o * k];
                    T::gemm(o, m, k, T::one(), g, true, xv.data(), false, T::zero(), &mut dw);
                    Tensor::from_vec(&[o, k], dw)
                });
                let db = c.needs[2].then(|| {
                    let mut db = vec![T::zero(); o];
                    for row in g.chunks(o) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    Tensor::from_vec(&[o], db)
                });
                vec![dx, dw, db]
            }),
        )
    }

    /// 2-d convolution, square kernel, NCHW layout.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (n, cin, h, wd) = self.value(x).nchw();
        let (cout, wc, kh, kw) = self.value(w).nchw();
        assert_eq!(wc, cin, "conv channel mismatch");
        assert_eq!(kh, kw, "square kernels only");
        let geo = ConvGeom::new(cin, h, wd, kh, stride, pad);
        let (ho, wo) = (geo.out_h, geo.out_w);
        let hw = ho * wo;
        let ckk = cin * kh * kh;
        let xin = self.value(x).data();
        let wdat = self.value(w).data();
        let bias = self.value(b).data();
        let direct = geo.is_pointwise();
        let mut cols_all: Vec<T> = if direct { Vec::new() } else { vec![T::zero(); n * ckk * hw] };
        let mut out = vec![T::zero(); n * cout * hw];
        for i in 0..n {
            let img = &xin[i * cin * h * wd..(i + 1) * cin * h * wd];
            let cols: &[T] = if direct {
                img
            } else {
                let c = &mut cols_all[i * ckk * hw..(i + 1) * ckk * hw];
                geo.im2col(img, c);
                c
            };
            let o = &mut out[i * cout * hw..(i + 1) * cout * hw];
            for (row, &bv) in o.chunks_mut(hw).zip(bias) {
                row.fill(bv);
            }
            T::gemm(cout, ckk, hw, T::one(), wdat, false, cols, false, T::one(), o);
        }
        self.push(
            Tensor::from_vec(&[n, cout, ho, wo], out),
            &[x, w, b],
            Box::new(move |c| {
                let g = c.grad.data();
                let wv = c.inputs[1].data();
                let xin = c.inputs[0].data();
                let mut dw = c.needs[1].then(|| vec![T::zero(); cout * ckk]);
                let mut db = c.needs[2].then(|| vec![T::zero(); cout]);
                let mut dx = c.needs[0].then(|| vec![T::zero(); n * cin * h * wd]);
                let mut dcols = if c.needs[0] && !direct { vec![T::zero(); ckk * hw] } else { Vec::new() };
                for i in 0..n {
                    let gi = &g[i * cout * hw..(i + 1) * cout * hw];
                    let cols: &[T] = if direct {
                        &xin[i * cin * h * wd..(i + 1) * cin * h * wd]
                    } else {
                        &cols_all[i * ckk * hw..(i + 1) * ckk * hw]
                    };
                    if let Some(dw) = dw.as_mut() {
                        T::gemm(cout, hw, ckk, T::one(), gi, false, cols, true, T::one(), dw);
                    }
                    if let Some(db) = db.as_mut() {
                        for (d, row) in db.iter_mut().zip(gi.chunks(hw)) {
                            *d += row.iter().copied().sum::<T>();
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxi = &mut dx[i * cin * h * wd..(i + 1) * cin * h * wd];
                        if direct {
                            T::gemm(ckk, cout, hw, T::one(), wv, true, gi, false, T::zero(), dxi);
                        } else {
                            T::gemm(ckk, cout, hw, T::one(), wv, true, gi, false, T::zero(), &mut dcols);
                            geo.col2im(&dcols, dxi);
                        }
                    }
                }
                vec![
                    dx.map(|d| Tensor::from_vec(&[n, cin, h, wd], d)),
                    dw.map(|d| Tensor::from_vec(&[cout, cin, kh, kh], d)),
                    db.map(|d| Tensor::from_vec(&[cout], d)),
                ]
            }),
        )
    }

    /// Batch normalisation with batch statistics over (N, H, W). Returns the
    /// output and the batch mean and biased variance per channel.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Vec<T>, Vec<T>) {
        let (n, c, h, w) = self.value(x).nchw();
        let hw = h * w;
        let m = (n * hw) as f64;
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = 0.0;
            for i in 0..n {
                s += xd[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mu = s / m;
            let mut sq = 0.0;
            for i in 0..n {
                sq += xd[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                    .iter()
                    .map(|v| (v.as_f64() - mu).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = lit(mu);
            var[ch] = lit(sq / m);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + lit(eps)).sqrt()).collect();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    let xh = (xd[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let inv = inv_std.clone();
        let v = self.push(
            Tensor::from_vec(&[n, c, h, w], out),
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let gamma = ctx.inputs[1].data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for j in base..base + hw {
                            dgamma[ch] += g[j] * xhat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                let dx = ctx.needs[0].then(|| {
                    let mf: T = lit(m);
                    let mut dx = vec![T::zero(); g.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            let k = gamma[ch] * inv[ch] / mf;
                            for j in base..base + hw {
                                dx[j] = k * (mf * g[j] - dbeta[ch] - xhat[j] * dgamma[ch]);
                            }
                        }
                    }
                    Tensor::from_vec(&[n, c, h, w], dx)
                });
                vec![dx, Some(Tensor::from_vec(&[c], dgamma)), Some(Tensor::from_vec(&[c], dbeta))]
            }),
        );
        (v, mean, var)
    }

    /// Per-channel affine map `y = x * scale[c] + shift[c]`, where scale
    /// and shift come from tape variables (used by inference-mode batch
    /// norm, whose statistics are constants).
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (n, c, h, w) = self.value(x).nchw();
        let hw = h * w;
        let xd = self.value(x).data();
        let sd = self.value(scale).data();
        let bd = self.value(shift).data();
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    out[j] = xd[j] * sd[ch] + bd[ch];
                }
            }
        }
        self.push(
            Tensor::from_vec(&[n, c, h, w], out),
            &[x, scale, shift],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let xd = ctx.inputs[0].data();
                let sd = ctx.inputs[1].data();
                let mut dx = vec![T::zero(); g.len()];
                let mut ds = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for j in base..base + hw {
                            dx[j] = g[j] * sd[ch];
                            ds[ch] += g[j] * xd[j];
                            db[ch] += g[j];
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(&[n, c, h, w], dx)),
                    Some(Tensor::from_vec(&[c], ds)),
                    Some(Tensor::from_vec(&[c], db)),
                ]
            }),
        )
    }

    /// Elementwise product of two same-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let out = Tensor::from_vec(
            av.shape(),
            av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect(),
        );
        self.push(
            out,
            &[a, b],
            Box::new(|c| {
                let g = c.grad.data();
                let da = Tensor::from_vec(
                    c.grad.shape(),
                    g.iter().zip(c.inputs[1].data()).map(|(&g, &y)| g * y).collect(),
                );
                let db = Tensor::from_vec(
                    c.grad.shape(),
                    g.iter().zip(c.inputs[0].data()).map(|(&g, &x)| g * x).collect(),
                );
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// Nearest-neighbour upsampling of an NCHW map to `(out_h, out_w)`.
    pub fn upsample_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let (n, c, h, w) = self.value(x).nchw();
        let src_y: Vec<usize> = (0..out_h).map(|y| (y * h / out_h).min(h - 1)).collect();
        let src_x: Vec<usize> = (0..out_w).map(|x| (x * w / out_w).min(w - 1)).collect();
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * c * out_h * out_w];
        for p in 0..n * c {
            let s = &xd[p * h * w..(p + 1) * h * w];
            let o = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &sy) in src_y.iter().enumerate() {
                for (ox, &sx) in src_x.iter().enumerate() {
                    o[oy * out_w + ox] = s[sy * w + sx];
                }
            }
        }
        self.push(
            Tensor::from_vec(&[n, c, out_h, out_w], out),
            &[x],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let gs = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for (oy, &sy) in src_y.iter().enumerate() {
                        for (ox, &sx) in src_x.iter().enumerate() {
                            d[sy * w + sx] += gs[oy * out_w + ox];
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], dx))]
            }),
        )
    }

    /// Global average pooling `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).nchw();
        let hw = h * w;
        let inv: T = T::one() / lit(hw as f64);
        let out: Vec<T> =
            self.value(x).data().chunks(hw).map(|s| s.iter().copied().sum::<T>() * inv).collect();
        self.push(
            Tensor::from_vec(&[n, c], out),
            &[x],
            Box::new(move |ctx| {
                let mut dx = Vec::with_capacity(n * c * hw);
                for &g in ctx.grad.data() {
                    dx.extend(std::iter::repeat_n(g * inv, hw));
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], dx))]
            }),
        )
    }

    /// RoIAlign over a list of pyramid levels. Each region is pooled from
    /// its assigned level into `out x out` bins with `sampling x sampling`
    /// bilinear samples per bin (half-pixel aligned coordinates). Output is
    /// `[R, C * out * out]`, channel-major per row.
    pub fn roi_align(
        &mut self,
        levels: &[Var],
        strides: &[f64],
        rois: &[RoiRef],
        out: usize,
        sampling: usize,
    ) -> Var {
        assert_eq!(levels.len(), strides.len());
        let shapes: Vec<(usize, usize, usize, usize)> =
            levels.iter().map(|&l| self.value(l).nchw()).collect();
        let c = shapes[0].1;
        assert!(shapes.iter().all(|s| s.1 == c), "levels must share a channel count");
        let bins = out * out;
        // per roi: bins * (sampling^2 * 4) taps of (offset within the image plane, weight)
        let taps: Vec<Vec<(usize, T)>> = rois
            .iter()
            .map(|r| {
                let (_, _, h, w) = shapes[r.level];
                roi_taps(r.bbox, 1.0 / strides[r.level], h, w, out, sampling)
            })
            .collect();
        // channel-last copies so the inner loops run over contiguous channels
        let mut used = vec![false; levels.len()];
        rois.iter().for_each(|r| used[r.level] = true);
        let hwc: Vec<Vec<T>> = levels
            .iter()
            .zip(&used)
            .map(|(&l, &u)| if u { to_channel_last(self.value(l).data(), self.value(l).nchw()) } else { Vec::new() })
            .collect();
        let mut data = vec![T::zero(); rois.len() * c * bins];
        let mut tmp = vec![T::zero(); bins * c];
        for (ri, r) in rois.iter().enumerate() {
            let (_, _, h, w) = shapes[r.level];
            let img = &hwc[r.level][r.batch * h * w * c..(r.batch + 1) * h * w * c];
            let per_bin = taps[ri].len() / bins;
            tmp.iter_mut().for_each(|v| *v = T::zero());
            for b in 0..bins {
                let acc = &mut tmp[b * c..(b + 1) * c];
                for &(off, wt) in &taps[ri][b * per_bin..(b + 1) * per_bin] {
                    if wt == T::zero() {
                        continue;
                    }
                    for (a, &v) in acc.iter_mut().zip(&img[off * c..(off + 1) * c]) {
                        *a += wt * v;
                    }
                }
            }
            let row = &mut data[ri * c * bins..(ri + 1) * c * bins];
            for b in 0..bins {
                for ch in 0..c {
                    row[ch * bins + b] = tmp[b * c + ch];
                }
            }
        }
        let rois = rois.to_vec();
        self.push(
            Tensor::from_vec(&[rois.len(), c * bins], data),
            levels,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                // accumulate channel-last, transpose back at the end
                let mut grads: Vec<Vec<T>> = shapes
                    .iter()
                    .zip(&ctx.needs)
                    .map(|(&(n, c, h, w), &need)| if need { vec![T::zero(); n * c * h * w] } else { Vec::new() })
                    .collect();
                let mut tmp = vec![T::zero(); bins * c];
                for (ri, r) in rois.iter().enumerate() {
                    if !ctx.needs[r.level] {
                        continue;
                    }
                    let (_, _, h, w) = shapes[r.level];
                    let dimg = &mut grads[r.level][r.batch * h * w * c..(r.batch + 1) * h * w * c];
                    let grow = &g[ri * c * bins..(ri + 1) * c * bins];
                    for ch in 0..c {
                        for b in 0..bins {
                            tmp[b * c + ch] = grow[ch * bins + b];
                        }
                    }
                    let per_bin = taps[ri].len() / bins;
                    for b in 0..bins {
                        let gb = &tmp[b * c..(b + 1) * c];
                        for &(off, wt) in &taps[ri][b * per_bin..(b + 1) * per_bin] {
                            if wt == T::zero() {
                                continue;
                            }
                            for (d, &gv) in dimg[off * c..(off + 1) * c].iter_mut().zip(gb) {
                                *d += wt * gv;
                            }
                        }
                    }
                }
                let grads: Vec<Vec<T>> =
                    grads.into_iter().zip(&shapes).map(|(d, &sh)| if d.is_empty() { d } else { to_channel_first(&d, sh) }).collect();
                grads
                    .into_iter()
                    .zip(&shapes)
                    .zip(&ctx.needs)
                    .map(|((d, &(n, c, h, w)), &need)| need.then(|| Tensor::from_vec(&[n, c, h, w], d)))
                    .collect()
            }),
        )
    }

    // ----------------------------------------------------------------------
    // probability and loss ops
    // ----------------------------------------------------------------------

    /// Softmax over each row of `[M, K]` logits; returns component `k` as `[M]`.
    pub fn softmax_component(&mut self, logits: Var, k: usize) -> Var {
        let lv = self.value(logits);
        let (m, kk) = (lv.shape()[0], lv.shape()[1]);
        let probs = softmax_rows(lv.data(), kk);
        let out: Vec<T> = (0..m).map(|i| probs[i * kk + k]).collect();
        self.push(
            Tensor::from_vec(&[m], out),
            &[logits],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut d = vec![T::zero(); m * kk];
                for i in 0..m {
                    let pk = probs[i * kk + k];
                    for j in 0..kk {
                        let pj = probs[i * kk + j];
                        let jac = if j == k { pk * (T::one() - pk) } else { -pk * pj };
                        d[i * kk + j] = g[i] * jac;
                    }
                }
                vec![Some(Tensor::from_vec(&[m, kk], d))]
            }),
        )
    }

    /// Mean soft-label binary cross-entropy on probabilities:
    /// `-mean[mu log p + (1 - mu) log(1 - p)]`, with `p` clamped to
    /// `[clamp, 1 - clamp]` (zero gradient where the clamp is active).
    pub fn soft_bce_mean(&mut self, p: Var, mu: Vec<T>, clamp: f64) -> Var {
        let pv = self.value(p).data();
        assert_eq!(pv.len(), mu.len(), "one label per probability");
        assert!(!pv.is_empty(), "soft_bce over no entries");
        let lo: T = lit(clamp);
        let hi: T = T::one() - lo;
        let n: T = lit(pv.len() as f64);
        if self.kinks.is_some() {
            let sides: Vec<bool> = pv.iter().map(|&q| q < lo || q > hi).collect();
            self.note_kinks(sides.into_iter());
        }
        let pv = self.value(p).data();
        let mut total = T::zero();
        for (&pi, &m) in pv.iter().zip(&mu) {
            let q = pi.max(lo).min(hi);
            total += m * q.ln() + (T::one() - m) * (T::one() - q).ln();
        }
        self.push(
            Tensor::scalar(-total / n),
            &[p],
            Box::new(move |ctx| {
                let g = ctx.grad.item();
                let d = ctx.inputs[0]
                    .data()
                    .iter()
                    .zip(&mu)
                    .map(|(&pi, &m)| {
                        if pi < lo || pi > hi {
                            T::zero()
                        } else {
                            -g * (m / pi - (T::one() - m) / (T::one() - pi)) / n
                        }
                    })
                    .collect();
                vec![Some(Tensor::from_vec(&[mu.len()], d))]
            }),
        )
    }

    /// Sum of binary cross-entropy with logits against hard targets.
    pub fn bce_logits_sum(&mut self, logits: Var, targets: Vec<T>) -> Var {
        let x = self.value(logits).data();
        assert_eq!(x.len(), targets.len());
        let total: T = x
            .iter()
            .zip(&targets)
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        self.push(
            Tensor::scalar(total),
            &[logits],
            Box::new(move |ctx| {
                let g = ctx.grad.item();
                let d = ctx.inputs[0]
                    .data()
                    .iter()
                    .zip(&targets)
                    .map(|(&z, &t)| g * (sigmoid(z) - t))
                    .collect();
                vec![Some(Tensor::from_vec(&[targets.len()], d))]
            }),
        )
    }

    /// Sum of smooth-L1 (knee at 1) between `pred` and constant targets.
    pub fn smooth_l1_sum(&mut self, pred: Var, targets: Vec<T>) -> Var {
        let x = self.value(pred).data();
        assert_eq!(x.len(), targets.len());
        let total: T = x.iter().zip(&targets).map(|(&p, &t)| smooth_l1(p - t)).sum();
        if self.kinks.is_some() {
            let sides: Vec<bool> = x.iter().zip(&targets).map(|(&p, &t)| (p - t).abs() < T::one()).collect();
            self.note_kinks(sides.into_iter());
        }
        self.push(
            Tensor::scalar(total),
            &[pred],
            Box::new(move |ctx| {
                let g = ctx.grad.item();
                let d = ctx.inputs[0]
                    .data()
                    .iter()
                    .zip(&targets)
                    .map(|(&p, &t)| {
                        let e = p - t;
                        let de = if e.abs() < T::one() { e } else { e.signum() };
                        g * de
                    })
                    .collect();
                vec![Some(Tensor::from_vec(&[targets.len()], d))]
            }),
        )
    }

    /// Sum of softmax cross-entropy of `[M, K]` logits against class labels.
    pub fn softmax_ce_sum(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let lv = self.value(logits);
        let kk = lv.shape()[1];
        assert_eq!(lv.shape()[0], labels.len());
        let probs = softmax_rows(lv.data(), kk);
        let mut total = T::zero();
        for (i, row) in lv.data().chunks(kk).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&z| (z - mx).exp()).sum::<T>().ln();
            total += lse - row[labels[i]];
        }
        let m = labels.len();
        self.push(
            Tensor::scalar(total),
            &[logits],
            Box::new(move |ctx| {
                let g = ctx.grad.item();
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * kk + l] -= T::one();
                }
                for v in d.iter_mut() {
                    *v *= g;
                }
                vec![Some(Tensor::from_vec(&[m, kk], d))]
            }),
        )
    }
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

pub fn smooth_l1<T: Real>(e: T) -> T {
    let a = e.abs();
    if a < T::one() {
        lit::<T>(0.5) * a * a
    } else {
        a - lit(0.5)
    }
}

/// Row-wise softmax of a flat `[M, K]` buffer.
pub fn softmax_rows<T: Real>(x: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(k) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&z| (z - mx).exp()).collect();
        let s: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / s));
    }
    out
}

fn to_channel_last<T: Real>(x: &[T], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<T> {
    let plane = h * w;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            for (i, &v) in src.iter().enumerate() {
                out[(b * plane + i) * c + ch] = v;
            }
        }
    }
    out
}

fn to_channel_first<T: Real>(x: &[T], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<T> {
    let plane = h * w;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let dst = &mut out[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            for (i, d) in dst.iter_mut().enumerate() {
                *d = x[(b * plane + i) * c + ch];
            }
        }
    }
    out
}

/// Bilinear taps of one region: for every bin, `sampling^2 * 4` pairs of
/// (offset in an `h x w` plane, weight), already divided by the sample count.
fn roi_taps<T: Real>(
    bbox: [f64; 4],
    scale: f64,
    h: usize,
    w: usize,
    out: usize,
    sampling: usize,
) -> Vec<(usize, T)> {
    let x0 = bbox[0] * scale - 0.5;
    let y0 = bbox[1] * scale - 0.5;
    let bw = (bbox[2] - bbox[0]) * scale / out as f64;
    let bh = (bbox[3] - bbox[1]) * scale / out as f64;
    let count = (sampling * sampling) as f64;
    let mut taps = Vec::with_capacity(out * out * sampling * sampling * 4);
    for py in 0..out {
        for px in 0..out {
            for iy in 0..sampling {
                let y = y0 + py as f64 * bh + (iy as f64 + 0.5) * bh / sampling as f64;
                for ix in 0..sampling {
                    let x = x0 + px as f64 * bw + (ix as f64 + 0.5) * bw / sampling as f64;
                    for (off, wt) in bilinear_taps(y, x, h, w) {
                        taps.push((off, T::lit(wt / count)));
                    }
                }
            }
        }
    }
    taps
}

/// Four bilinear corner taps at `(y, x)` in an `h x w` plane. Samples more
/// than one pixel outside the plane contribute zero weight.
pub(crate) fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return [(0, 0.0); 4];
    }
    let (y, x) = (y.max(0.0), x.max(0.0));
    let (mut yl, mut xl) = (y.floor() as usize, x.floor() as usize);
    let (yh, xh, y, x) = {
        let (mut y, mut x) = (y, x);
        let yh = if yl >= h - 1 {
            yl = h - 1;
            y = yl as f64;
            yl
        } else {
            yl + 1
        };
        let xh = if xl >= w - 1 {
            xl = w - 1;
            x = xl as f64;
            xl
        } else {
            xl + 1
        };
        (yh, xh, y, x)
    };
    let ly = y - yl as f64;
    let lx = x - xl as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    [
        (yl * w + xl, hy * hx),
        (yl * w + xh, hy * lx),
        (yh * w + xl, ly * hx),
        (yh * w + xh, ly * lx),
    ]
}

/// Geometry of one convolution, shared by the im2col/col2im pair.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "input smaller than kernel");
        let out_h = (h + 2 * pad - k) / stride + 1;
        let out_w = (w + 2 * pad - k) / stride + 1;
        Self { c, h, w, k, stride, pad, out_h, out_w }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `ox` whose input column `ox * stride + kx - pad` lies
    /// inside the image, and the input column of the first one.
    fn valid_cols(&self, kx: usize) -> (std::ops::Range<usize>, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = if self.w + self.pad > kx { ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.out_w) } else { 0 };
        if lo >= hi {
            return (0..0, 0);
        }
        (lo..hi, (lo * self.stride + kx).saturating_sub(self.pad))
    }

    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let hw = self.out_h * self.out_w;
        for ch in 0..self.c {
            let plane = &img[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((ch * self.k + ky) * self.k + kx) * hw;
                    let dst = &mut cols[row..row + hw];
                    let (xs, ix0) = self.valid_cols(kx);
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let d = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.h as isize {
                            d.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        d[..xs.start].fill(T::zero());
                        d[xs.end..].fill(T::zero());
                        let d = &mut d[xs.clone()];
                        if self.stride == 1 {
                            d.copy_from_slice(&src[ix0..ix0 + d.len()]);
                        } else {
                            for (dv, &sv) in d.iter_mut().zip(src[ix0..].iter().step_by(self.stride)) {
                                *dv = sv;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        img.fill(T::zero());
        let hw = self.out_h * self.out_w;
        for ch in 0..self.c {
            let plane = &mut img[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((ch * self.k + ky) * self.k + kx) * hw;
                    let src = &cols[row..row + hw];
                    let (xs, ix0) = self.valid_cols(kx);
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let s = &src[oy * self.out_w + xs.start..oy * self.out_w + xs.end];
                        for (dv, &sv) in dst[ix0..].iter_mut().step_by(self.stride).zip(s) {
                            *dv += sv;
                        }
                    }
                }
            }
        }
    }
}

/// Output spatial size of a convolution.
pub fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

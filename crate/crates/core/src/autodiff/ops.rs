//! Elementwise, reduction, shape and dense operations.

use super::{tiled, Ctx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn mish(x: f64) -> f64 {
    x * softplus(x).tanh()
}

pub fn mish_grad(x: f64) -> f64 {
    let sp = softplus(x);
    let t = sp.tanh();
    let sig = 1.0 / (1.0 + (-x).exp());
    t + x * (1.0 - t * t) * sig
}

impl Graph {
    /// Output shape for a broadcasting binary op and whether it is batched.
    fn broadcast_shape(&self, a: Var, b: Var) -> Result<Vec<usize>> {
        let (va, vb) = (self.value(a), self.value(b));
        match (self.is_batched(a), self.is_batched(b)) {
            (x, y) if x == y => {
                if va.shape() != vb.shape() {
                    return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", va.shape(), vb.shape())));
                }
                Ok(va.shape().to_vec())
            }
            (true, false) if &va.shape()[1..] == vb.shape() => Ok(va.shape().to_vec()),
            (false, true) if va.shape() == &vb.shape()[1..] => Ok(vb.shape().to_vec()),
            _ => Err(Error::ShapeMismatch(format!(
                "cannot broadcast {:?} with {:?}",
                va.shape(),
                vb.shape()
            ))),
        }
    }

    /// `a + b`; an unbatched operand broadcasts over the batch.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_shape(a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = shape.iter().product::<usize>();
        let (da, db) = (ta.data(), tb.data());
        let data = (0..n).map(|i| da[i % da.len()] + db[i % db.len()]).collect();
        let value = Tensor::new(&shape, data)?;
        self.custom(&[a, b], value, Box::new(|ctx: &Ctx| Ok(vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())])))
    }

    /// `a ⊙ b`; an unbatched operand broadcasts over the batch.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_shape(a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = shape.iter().product::<usize>();
        let (da, db) = (ta.data(), tb.data());
        let data = (0..n).map(|i| da[i % da.len()] * db[i % db.len()]).collect();
        let value = Tensor::new(&shape, data)?;
        self.custom(
            &[a, b],
            value,
            Box::new(|ctx: &Ctx| {
                let g = ctx.grad;
                let other = |k: usize| -> Result<Tensor> {
                    let t = tiled(ctx.inputs[k], ctx.batched[k], ctx.batch);
                    let d = g.data();
                    let data = (0..d.len()).map(|i| d[i] * t[i % t.len()]).collect();
                    Tensor::new(g.shape(), data)
                };
                Ok(vec![
                    ctx.needs[0].then(|| other(1)).transpose()?,
                    ctx.needs[1].then(|| other(0)).transpose()?,
                ])
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).scale(s);
        self.custom(&[a], value, Box::new(move |ctx: &Ctx| Ok(vec![Some(ctx.grad.scale(s))])))
    }

    fn unary(
        &mut self,
        a: Var,
        f: fn(f64) -> f64,
        df: fn(f64) -> f64,
    ) -> Result<Var> {
        let value = self.value(a).map(f);
        self.custom(
            &[a],
            value,
            Box::new(move |ctx: &Ctx| {
                let x = tiled(ctx.inputs[0], ctx.batched[0], ctx.batch);
                let g = ctx.grad.data();
                let data = (0..g.len()).map(|i| g[i] * df(x[i % x.len()])).collect();
                Ok(vec![Some(Tensor::new(ctx.grad.shape(), data)?)])
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn mish(&mut self, a: Var) -> Result<Var> {
        self.unary(a, mish, mish_grad)
    }

    /// Per-sample sum over all non-batch axes: `(B, ...) -> (B,)`, or a
    /// scalar for unbatched inputs.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, 1.0)
    }

    /// Per-sample mean over all non-batch axes.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.item_shape(a).iter().product::<usize>();
        self.reduce(a, 1.0 / n as f64)
    }

    fn reduce(&mut self, a: Var, w: f64) -> Result<Var> {
        let t = self.value(a);
        let value = if self.is_batched(a) {
            let rl = t.row_len();
            let data = t.data().chunks(rl.max(1)).map(|c| c.iter().sum::<f64>() * w).collect();
            Tensor::new(&[self.batch], data)?
        } else {
            Tensor::scalar(t.sum() * w)
        };
        self.custom(
            &[a],
            value,
            Box::new(move |ctx: &Ctx| {
                let x = ctx.inputs[0];
                let item: usize = if ctx.batched[0] { x.row_len() } else { x.len() };
                let shape: Vec<usize> = if ctx.batched[0] {
                    x.shape().to_vec()
                } else {
                    std::iter::once(ctx.batch).chain(x.shape().iter().copied()).collect()
                };
                let g = ctx.grad.data();
                let data = (0..ctx.batch * item).map(|i| g[i / item] * w).collect();
                Ok(vec![Some(Tensor::new(&shape, data)?)])
            }),
        )
    }

    /// Reshapes the per-sample (or unbatched) shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let batched = self.is_batched(a);
        let old = self.item_shape(a).to_vec();
        let full: Vec<usize> = if batched {
            std::iter::once(self.batch).chain(shape.iter().copied()).collect()
        } else {
            shape.to_vec()
        };
        let value = self.value(a).clone().reshape(&full)?;
        self.custom(
            &[a],
            value,
            Box::new(move |ctx: &Ctx| {
                let s: Vec<usize> = std::iter::once(ctx.batch).chain(old.iter().copied()).collect();
                Ok(vec![Some(ctx.grad.clone().reshape(&s)?)])
            }),
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.item_shape(a).len() < 2 {
            return Err(Error::ShapeMismatch("transpose needs two axes".into()));
        }
        let value = swap_last(self.value(a));
        self.custom(&[a], value, Box::new(|ctx: &Ctx| Ok(vec![Some(swap_last(ctx.grad))])))
    }

    /// Zero-pads the last two axes by `p` on every side.
    pub fn pad(&mut self, a: Var, p: usize) -> Result<Var> {
        if self.item_shape(a).len() < 2 {
            return Err(Error::ShapeMismatch("pad needs two spatial axes".into()));
        }
        let t = self.value(a);
        let (h, w) = last2(t);
        let value = crop_or_pad(t, p as isize, p as isize, h + 2 * p, w + 2 * p);
        self.custom(
            &[a],
            value,
            Box::new(move |ctx: &Ctx| Ok(vec![Some(crop_or_pad(ctx.grad, -(p as isize), -(p as isize), h, w))])),
        )
    }

    /// Crops an `h × w` window whose top-left corner is `(top, left)`.
    pub fn crop(&mut self, a: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let t = self.value(a);
        if self.item_shape(a).len() < 2 {
            return Err(Error::ShapeMismatch("crop needs two spatial axes".into()));
        }
        let (oh, ow) = last2(t);
        if top + h > oh || left + w > ow {
            return Err(Error::ShapeMismatch(format!("crop {h}x{w}@({top},{left}) of {oh}x{ow}")));
        }
        let value = crop_or_pad(t, -(top as isize), -(left as isize), h, w);
        self.custom(
            &[a],
            value,
            Box::new(move |ctx: &Ctx| Ok(vec![Some(crop_or_pad(ctx.grad, top as isize, left as isize, oh, ow))])),
        )
    }

    /// `x (B,F) · W (F,O) + b (O)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if !self.is_batched(x) || self.is_batched(w) || self.is_batched(b) || tx.ndim() != 2 || tw.ndim() != 2 {
            return Err(Error::ShapeMismatch("linear expects batched (B,F), unbatched (F,O) and (O)".into()));
        }
        let (bs, f) = (tx.shape()[0], tx.shape()[1]);
        let o = tw.shape()[1];
        if tw.shape()[0] != f || tb.shape() != [o] {
            return Err(Error::ShapeMismatch(format!(
                "linear {:?} · {:?} + {:?}",
                tx.shape(),
                tw.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; bs * o];
        for r in out.chunks_mut(o) {
            r.copy_from_slice(tb.data());
        }
        gemm(bs, f, o, tx.data(), tw.data(), &mut out, true);
        let value = Tensor::new(&[bs, o], out)?;
        self.custom(
            &[x, w, b],
            value,
            Box::new(move |ctx: &Ctx| {
                let (g, xv, wv) = (ctx.grad.data(), ctx.inputs[0].data(), ctx.inputs[1].data());
                let dx = if ctx.needs[0] {
                    let mut d = vec![0.0; bs * f];
                    gemm_nt(bs, o, f, g, wv, &mut d, false);
                    Some(Tensor::new(&[bs, f], d)?)
                } else {
                    None
                };
                // per-sample outer products x_b g_bᵀ
                let dw = if ctx.needs[1] {
                    let mut d = vec![0.0; bs * f * o];
                    for s in 0..bs {
                        gemm(f, 1, o, &xv[s * f..(s + 1) * f], &g[s * o..(s + 1) * o], &mut d[s * f * o..(s + 1) * f * o], false);
                    }
                    Some(Tensor::new(&[bs, f, o], d)?)
                } else {
                    None
                };
                let db = Some(ctx.grad.clone());
                Ok(vec![dx, dw, db])
            }),
        )
    }

    /// Applies a fixed matrix `M (C_out × C_in)` along the channel axis of a
    /// batched `(B, C_in, ...)` tensor.
    pub fn channel_map(&mut self, x: Var, m: &[f64], c_out: usize) -> Result<Var> {
        let t = self.value(x);
        if !self.is_batched(x) || t.ndim() < 2 {
            return Err(Error::ShapeMismatch("channel_map expects a batched (B, C, ...) tensor".into()));
        }
        let (bs, c_in) = (t.shape()[0], t.shape()[1]);
        if m.len() != c_out * c_in {
            return Err(Error::LengthMismatch { expected: c_out * c_in, got: m.len() });
        }
        let sp: usize = t.shape()[2..].iter().product();
        let mut out = vec![0.0; bs * c_out * sp];
        for s in 0..bs {
            gemm(c_out, c_in, sp, m, &t.data()[s * c_in * sp..(s + 1) * c_in * sp], &mut out[s * c_out * sp..(s + 1) * c_out * sp], false);
        }
        let mut shape = t.shape().to_vec();
        shape[1] = c_out;
        let value = Tensor::new(&shape, out)?;
        let m = m.to_vec();
        self.custom(
            &[x],
            value,
            Box::new(move |ctx: &Ctx| {
                let g = ctx.grad.data();
                let mut d = vec![0.0; bs * c_in * sp];
                for s in 0..bs {
                    gemm_tn(c_in, c_out, sp, &m, &g[s * c_out * sp..(s + 1) * c_out * sp], &mut d[s * c_in * sp..(s + 1) * c_in * sp], false);
                }
                Ok(vec![Some(Tensor::new(ctx.inputs[0].shape(), d)?)])
            }),
        )
    }

    /// Per-sample softmax cross-entropy of batched logits `(B, K)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if !self.is_batched(logits) || t.ndim() != 2 || labels.len() != t.shape()[0] {
            return Err(Error::ShapeMismatch("softmax_cross_entropy expects (B, K) logits and B labels".into()));
        }
        let k = t.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let probs = softmax_rows(t.data(), k);
        let losses: Vec<f64> = labels
            .iter()
            .enumerate()
            .map(|(s, &l)| {
                let row = &t.data()[s * k..(s + 1) * k];
                let mx = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                lse - row[l]
            })
            .collect();
        let value = Tensor::new(&[labels.len()], losses)?;
        let labels = labels.to_vec();
        self.custom(
            &[logits],
            value,
            Box::new(move |ctx: &Ctx| {
                let g = ctx.grad.data();
                let mut d = probs.clone();
                for (s, &l) in labels.iter().enumerate() {
                    d[s * k + l] -= 1.0;
                    d[s * k..(s + 1) * k].iter_mut().for_each(|v| *v *= g[s]);
                }
                Ok(vec![Some(Tensor::new(ctx.inputs[0].shape(), d)?)])
            }),
        )
    }

    /// Sum of per-sample parameter gradients: a helper for aggregate views.
    pub fn aggregate(per_sample: &Tensor) -> Tensor {
        let rl = per_sample.row_len();
        let mut out = vec![0.0; rl];
        for c in per_sample.data().chunks(rl.max(1)) {
            out.iter_mut().zip(c).for_each(|(o, v)| *o += v);
        }
        Tensor::new(&per_sample.shape()[1..], out).expect("consistent shape")
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(k) {
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

fn last2(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    (s[s.len() - 2], s[s.len() - 1])
}

fn swap_last(t: &Tensor) -> Tensor {
    let (h, w) = last2(t);
    let lead = t.len() / (h * w).max(1);
    let mut out = vec![0.0; t.len()];
    for l in 0..lead {
        for i in 0..h {
            for j in 0..w {
                out[l * h * w + j * h + i] = t.data()[l * h * w + i * w + j];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    let n = shape.len();
    shape.swap(n - 1, n - 2);
    Tensor::new(&shape, out).expect("same size")
}

/// Places the last-two-axes planes of `t` into `(nh, nw)` planes shifted by
/// `(di, dj)`; positive offsets pad, negative offsets crop.
fn crop_or_pad(t: &Tensor, di: isize, dj: isize, nh: usize, nw: usize) -> Tensor {
    let (h, w) = last2(t);
    let lead = t.len() / (h * w).max(1);
    let mut out = vec![0.0; lead * nh * nw];
    for l in 0..lead {
        for i in 0..h {
            let ni = i as isize + di;
            if ni < 0 || ni >= nh as isize {
                continue;
            }
            for j in 0..w {
                let nj = j as isize + dj;
                if nj < 0 || nj >= nw as isize {
                    continue;
                }
                out[l * nh * nw + ni as usize * nw + nj as usize] = t.data()[l * h * w + i * w + j];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = nh;
    shape[n - 1] = nw;
    Tensor::new(&shape, out).expect("consistent size")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new(1);
        let x = g.input(Tensor::new(&[1, 3], vec![-1.0, 0.0, 2.0]).unwrap()).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(mish(0.0), 0.0);
        let ones = g.input(Tensor::ones(&[1, 4])).unwrap();
        let m = g.mean(ones).unwrap();
        assert_eq!(g.value(m).data(), &[1.0]);
    }

    #[test]
    fn mish_derivative_matches_central_difference() {
        for x in [-3.0, -0.5, 0.0, 0.7, 4.0, 25.0] {
            let h = 1e-6;
            let fd = (mish(x + h) - mish(x - h)) / (2.0 * h);
            assert!((fd - mish_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn linear_examples() {
        let mut g = Graph::new(2);
        let x = g.input(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let w = g.param(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), 0);
        let b = g.param(Tensor::zeros(&[2]), 1);
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let w0 = g.param(Tensor::zeros(&[2, 3]), 2);
        let b0 = g.param(Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap(), 3);
        let y0 = g.linear(x, w0, b0).unwrap();
        assert_eq!(g.value(y0).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new(2);
        let mut logits = vec![0.0; 20];
        logits[3] = 1e6;
        let x = g.input(Tensor::new(&[2, 10], logits).unwrap()).unwrap();
        let l = g.softmax_cross_entropy(x, &[3, 7]).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-12);
        assert!((g.value(l).data()[1] - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pad_crop_transpose_round_trip() {
        let mut g = Graph::new(1);
        let t = Tensor::from_fn(&[1, 2, 3, 4], |i| i as f64);
        let x = g.input_with_grad(t.clone()).unwrap();
        let p = g.pad(x, 2).unwrap();
        assert_eq!(g.value(p).shape(), &[1, 2, 7, 8]);
        let c = g.crop(p, 2, 2, 3, 4).unwrap();
        assert_eq!(g.value(c), &t);
        let tt = g.transpose(c).unwrap();
        let back = g.transpose(tt).unwrap();
        assert_eq!(g.value(back), &t);
        let s = g.sum(back).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|v| *v == 1.0));
    }
}

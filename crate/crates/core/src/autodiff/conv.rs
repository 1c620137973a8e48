//! Planar convolution (im2col + GEMM) and pooling.

use rayon::prelude::*;

use super::{Ctx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

/// Boundary handling of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding: the output shrinks by `k - 1`.
    None,
    /// `p` zero pixels on every side.
    Zero(usize),
    /// Periodic wrap-around by `p` pixels on every side.
    Circular(usize),
}

impl Padding {
    fn amount(self) -> usize {
        match self {
            Padding::None => 0,
            Padding::Zero(p) | Padding::Circular(p) => p,
        }
    }

    /// Source index along one axis of length `n`, if any.
    #[inline]
    fn source(self, i: isize, n: usize) -> Option<usize> {
        match self {
            Padding::Circular(_) => Some(i.rem_euclid(n as isize) as usize),
            _ if i < 0 || i >= n as isize => None,
            _ => Some(i as usize),
        }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    pad: Padding,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.pad.amount() as isize;
        let (k, wo, ncol) = (self.k, self.wo, self.cols());
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((ci * k + ki) * k + kj) * ncol..][..ncol];
                    for oh in 0..self.ho {
                        let src_i = self.pad.source(oh as isize + ki as isize - p, self.h);
                        for ow in 0..wo {
                            row[oh * wo + ow] = match (src_i, self.pad.source(ow as isize + kj as isize - p, self.w)) {
                                (Some(i), Some(j)) => plane[i * self.w + j],
                                _ => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.pad.amount() as isize;
        let (k, wo, ncol) = (self.k, self.wo, self.cols());
        for ci in 0..self.c_in {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((ci * k + ki) * k + kj) * ncol..][..ncol];
                    for oh in 0..self.ho {
                        let Some(i) = self.pad.source(oh as isize + ki as isize - p, self.h) else { continue };
                        for ow in 0..wo {
                            if let Some(j) = self.pad.source(ow as isize + kj as isize - p, self.w) {
                                plane[i * self.w + j] += row[oh * wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// Cross-correlation of a batched `(B, C_in, H, W)` input with an
    /// unbatched `(C_out, C_in, k, k)` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, pad: Padding) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        if !self.is_batched(x) || self.is_batched(kernel) || tx.ndim() != 4 || tk.ndim() != 4 {
            return Err(Error::ShapeMismatch("conv2d expects batched (B,C,H,W) input and unbatched kernel".into()));
        }
        let [bs, c_in, h, w] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        let [c_out, kc, k, k2] = [tk.shape()[0], tk.shape()[1], tk.shape()[2], tk.shape()[3]];
        if kc != c_in || k != k2 || k % 2 == 0 {
            return Err(Error::ShapeMismatch(format!("kernel {:?} for input {:?}", tk.shape(), tx.shape())));
        }
        let p = pad.amount();
        if h + 2 * p < k || w + 2 * p < k || (matches!(pad, Padding::Circular(_)) && (p > h || p > w)) {
            return Err(Error::ShapeMismatch(format!("{h}x{w} input too small for k={k}, pad={p}")));
        }
        let geo = Geometry { c_in, h, w, k, ho: h + 2 * p - k + 1, wo: w + 2 * p - k + 1, pad };
        let (rows, ncol) = (geo.rows(), geo.cols());
        let mut out = vec![0.0; bs * c_out * ncol];
        let (xd, kd) = (tx.data(), tk.data());
        out.par_chunks_mut(c_out * ncol).enumerate().for_each(|(s, o)| {
            let mut cols = vec![0.0; rows * ncol];
            geo.im2col(&xd[s * c_in * h * w..(s + 1) * c_in * h * w], &mut cols);
            gemm(c_out, rows, ncol, kd, &cols, o, false);
        });
        let value = Tensor::new(&[bs, c_out, geo.ho, geo.wo], out)?;
        self.custom(
            &[x, kernel],
            value,
            Box::new(move |ctx: &Ctx| {
                let (xd, kd, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let in_len = c_in * h * w;
                let mut dx = ctx.needs[0].then(|| vec![0.0; bs * in_len]);
                let mut dk = ctx.needs[1].then(|| vec![0.0; bs * c_out * rows]);
                let work = |s: usize, dxs: Option<&mut [f64]>, dks: Option<&mut [f64]>| {
                    let gs = &g[s * c_out * ncol..(s + 1) * c_out * ncol];
                    if let Some(dks) = dks {
                        let mut cols = vec![0.0; rows * ncol];
                        geo.im2col(&xd[s * in_len..(s + 1) * in_len], &mut cols);
                        gemm_nt(c_out, ncol, rows, gs, &cols, dks, false);
                    }
                    if let Some(dxs) = dxs {
                        let mut dcols = vec![0.0; rows * ncol];
                        gemm_tn(rows, c_out, ncol, kd, gs, &mut dcols, false);
                        geo.col2im(&dcols, dxs);
                    }
                };
                match (dx.as_mut(), dk.as_mut()) {
                    (Some(dx), Some(dk)) => dx
                        .par_chunks_mut(in_len)
                        .zip(dk.par_chunks_mut(c_out * rows))
                        .enumerate()
                        .for_each(|(s, (a, b))| work(s, Some(a), Some(b))),
                    (Some(dx), None) => {
                        dx.par_chunks_mut(in_len).enumerate().for_each(|(s, a)| work(s, Some(a), None))
                    }
                    (None, Some(dk)) => {
                        dk.par_chunks_mut(c_out * rows).enumerate().for_each(|(s, b)| work(s, None, Some(b)))
                    }
                    (None, None) => {}
                }
                Ok(vec![
                    dx.map(|d| Tensor::new(ctx.inputs[0].shape(), d)).transpose()?,
                    dk.map(|d| Tensor::new(&[bs, c_out, c_in, k, k], d)).transpose()?,
                ])
            }),
        )
    }

    fn check_pool(&self, x: Var, win: usize) -> Result<[usize; 4]> {
        let t = self.value(x);
        if !self.is_batched(x) || t.ndim() != 4 || win == 0 {
            return Err(Error::ShapeMismatch("pooling expects a batched (B,C,H,W) tensor".into()));
        }
        let s = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
        if s[2] % win != 0 || s[3] % win != 0 {
            return Err(Error::ShapeMismatch(format!("{}x{} not divisible by window {win}", s[2], s[3])));
        }
        Ok(s)
    }

    /// Non-overlapping max pooling; ties route the gradient to the first
    /// maximal entry in row-major order.
    pub fn max_pool2d(&mut self, x: Var, win: usize) -> Result<Var> {
        let [bs, c, h, w] = self.check_pool(x, win)?;
        let (ho, wo) = (h / win, w / win);
        let xd = self.value(x).data();
        let mut out = vec![0.0; bs * c * ho * wo];
        let mut arg = vec![0usize; out.len()];
        for plane in 0..bs * c {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut best = (f64::NEG_INFINITY, 0);
                    for di in 0..win {
                        for dj in 0..win {
                            let idx = plane * h * w + (oi * win + di) * w + oj * win + dj;
                            if xd[idx] > best.0 {
                                best = (xd[idx], idx);
                            }
                        }
                    }
                    let o = plane * ho * wo + oi * wo + oj;
                    out[o] = best.0;
                    arg[o] = best.1;
                }
            }
        }
        let value = Tensor::new(&[bs, c, ho, wo], out)?;
        self.custom(
            &[x],
            value,
            Box::new(move |ctx: &Ctx| {
                let mut d = vec![0.0; ctx.inputs[0].len()];
                for (o, &i) in arg.iter().enumerate() {
                    d[i] += ctx.grad.data()[o];
                }
                Ok(vec![Some(Tensor::new(ctx.inputs[0].shape(), d)?)])
            }),
        )
    }

    /// Non-overlapping average pooling.
    pub fn avg_pool2d(&mut self, x: Var, win: usize) -> Result<Var> {
        let [bs, c, h, w] = self.check_pool(x, win)?;
        let (ho, wo) = (h / win, w / win);
        let inv = 1.0 / (win * win) as f64;
        let xd = self.value(x).data();
        let mut out = vec![0.0; bs * c * ho * wo];
        for plane in 0..bs * c {
            for i in 0..h {
                for j in 0..w {
                    out[plane * ho * wo + (i / win) * wo + j / win] += xd[plane * h * w + i * w + j] * inv;
                }
            }
        }
        let value = Tensor::new(&[bs, c, ho, wo], out)?;
        self.custom(
            &[x],
            value,
            Box::new(move |ctx: &Ctx| {
                let g = ctx.grad.data();
                let d = (0..bs * c * h * w)
                    .map(|idx| {
                        let (plane, i, j) = (idx / (h * w), (idx / w) % h, idx % w);
                        g[plane * ho * wo + (i / win) * wo + j / win] * inv
                    })
                    .collect();
                Ok(vec![Some(Tensor::new(ctx.inputs[0].shape(), d)?)])
            }),
        )
    }

    /// `(B, C, H, W) -> (B, C)` spatial mean.
    /// Spatial maximum per channel of a square map, `(B,C,H,H) -> (B,C)`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.item_shape(x).to_vec();
        if !self.is_batched(x) || s.len() != 3 || s[1] != s[2] {
            return Err(Error::ShapeMismatch("global_max_pool expects square (B,C,H,H)".into()));
        }
        let p = self.max_pool2d(x, s[1])?;
        self.reshape(p, &[s[0]])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !self.is_batched(x) || t.ndim() != 4 {
            return Err(Error::ShapeMismatch("global_avg_pool expects (B,C,H,W)".into()));
        }
        let (bs, c, hw) = (t.shape()[0], t.shape()[1], t.shape()[2] * t.shape()[3]);
        let out = t.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let value = Tensor::new(&[bs, c], out)?;
        self.custom(
            &[x],
            value,
            Box::new(move |ctx: &Ctx| {
                let g = ctx.grad.data();
                let d = (0..bs * c * hw).map(|i| g[i / hw] / hw as f64).collect();
                Ok(vec![Some(Tensor::new(ctx.inputs[0].shape(), d)?)])
            }),
        )
    }
}

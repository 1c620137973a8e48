//! Bases of steerable convolution kernels.
//!
//! A kernel `K: R² -> R^{d_out × d_in}` is equivariant when
//! `K(g·x) = ρ_out(g) K(x) ρ_in(g)^{-1}` for every group element. Kernels are
//! sampled on a `k × k` pixel grid whose pixel `(i, j)` sits at
//! `x = j - c, y = c - i` with `c = (k - 1) / 2`, and stored row-major as
//! `(d_out, d_in, k, k)`.
//!
//! Three solvers are used depending on the group:
//!
//! * groups acting exactly on the grid (`{e}`, `C_2`, `C_4`, `D_1`, `D_2`,
//!   `D_4`) solve the linear constraint over the generators and take its
//!   SVD nullspace;
//! * larger finite groups average a slice of free kernels over the group
//!   with bilinear steering (a Reynolds operator) and orthonormalize the
//!   image, which is exactly invariant under the grid-exact subgroup;
//! * `SO(2)` uses circular harmonics on each pixel ring.

use std::collections::HashMap;
use std::f64::consts::FRAC_PI_2;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::groups::{GroupElement, GroupSpec, RepKind, Representation};

const RANK_TOL: f64 = 1e-8;

/// Orthonormal basis of equivariant kernels for one `(rep_in, rep_out)` pair.
#[derive(Debug, Clone)]
pub struct KernelBasis {
    group: GroupSpec,
    rep_in: Representation,
    rep_out: Representation,
    kernel_size: usize,
    elements: Vec<Vec<f64>>,
}

impl KernelBasis {
    pub fn group(&self) -> GroupSpec {
        self.group
    }

    pub fn rep_in(&self) -> &Representation {
        &self.rep_in
    }

    pub fn rep_out(&self) -> &Representation {
        &self.rep_out
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn dim(&self) -> usize {
        self.elements.len()
    }

    /// Number of scalars in one kernel, `d_out · d_in · k²`.
    pub fn kernel_len(&self) -> usize {
        self.rep_out.dim() * self.rep_in.dim() * self.kernel_size * self.kernel_size
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.rep_out.dim(), self.rep_in.dim(), self.kernel_size, self.kernel_size]
    }

    pub fn elements(&self) -> &[Vec<f64>] {
        &self.elements
    }

    /// `Σ_i c_i B_i`.
    pub fn expand(&self, coefficients: &[f64]) -> Result<Vec<f64>> {
        if coefficients.len() != self.dim() {
            return Err(Error::LengthMismatch { expected: self.dim(), got: coefficients.len() });
        }
        let mut out = vec![0.0; self.kernel_len()];
        for (c, b) in coefficients.iter().zip(&self.elements) {
            for (o, v) in out.iter_mut().zip(b) {
                *o += c * v;
            }
        }
        Ok(out)
    }

    /// Frobenius inner products with every basis element.
    pub fn project(&self, kernel: &[f64]) -> Result<Vec<f64>> {
        if kernel.len() != self.kernel_len() {
            return Err(Error::LengthMismatch { expected: self.kernel_len(), got: kernel.len() });
        }
        Ok(self.elements.iter().map(|b| b.iter().zip(kernel).map(|(x, y)| x * y).sum()).collect())
    }

    /// Gram matrix of the basis under the Frobenius inner product.
    pub fn gram(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |a, b| {
            self.elements[a].iter().zip(&self.elements[b]).map(|(x, y)| x * y).sum()
        })
    }
}

fn check_kernel_size(k: usize) -> Result<()> {
    if matches!(k, 1 | 3 | 5 | 7) {
        Ok(())
    } else {
        Err(Error::UnsupportedKernelSize(k))
    }
}

/// Grid coordinates `(x, y)` of pixel `p = i·k + j`.
pub fn pixel_coords(k: usize, p: usize) -> (f64, f64) {
    let c = (k as f64 - 1.0) / 2.0;
    let (i, j) = (p / k, p % k);
    (j as f64 - c, c - i as f64)
}

/// Sparse spatial steering on a `k × k` grid: row `p` lists the source pixels
/// and weights that make up `K(R_g^{-1} x_p)`. Exact elements yield a
/// permutation, other elements bilinear weights with zero extension.
pub fn spatial_steering(k: usize, g: &GroupElement) -> Vec<Vec<(usize, f64)>> {
    let c = (k as f64 - 1.0) / 2.0;
    let ci = (k as i64 - 1) / 2;
    (0..k * k)
        .map(|p| {
            let (i, j) = ((p / k) as i64, (p % k) as i64);
            if let Some((x, y)) = g.apply_exact_inverse(j - ci, ci - i) {
                let (si, sj) = (ci - y, x + ci);
                return vec![(si as usize * k + sj as usize, 1.0)];
            }
            let (x, y) = pixel_coords(k, p);
            let (xs, ys) = g.apply_inverse(x, y);
            let (fi, fj) = (c - ys, xs + c);
            let (i0, j0) = (fi.floor(), fj.floor());
            let (di, dj) = (fi - i0, fj - j0);
            let mut row = Vec::with_capacity(4);
            for (oi, wi) in [(0.0, 1.0 - di), (1.0, di)] {
                for (oj, wj) in [(0.0, 1.0 - dj), (1.0, dj)] {
                    let (ii, jj) = (i0 + oi, j0 + oj);
                    let w = wi * wj;
                    if w.abs() > 1e-15 && ii >= 0.0 && jj >= 0.0 && ii < k as f64 && jj < k as f64 {
                        row.push((ii as usize * k + jj as usize, w));
                    }
                }
            }
            row
        })
        .collect()
}

/// Applies `(g·K)(x) = ρ_out(g) K(R_g^{-1} x) ρ_in(g)^{-1}` to a kernel of
/// shape `(d_out, d_in, k, k)` given the two matrices and spatial steering.
pub fn steer_with(
    kernel: &[f64],
    k: usize,
    rho_out: &DMatrix<f64>,
    rho_in_inv: &DMatrix<f64>,
    spatial: &[Vec<(usize, f64)>],
) -> Vec<f64> {
    let (d_out, d_in) = (rho_out.nrows(), rho_in_inv.nrows());
    let kk = k * k;
    // spatial resampling first, then the fiber action
    let mut moved = vec![0.0; kernel.len()];
    for oi in 0..d_out * d_in {
        let src = &kernel[oi * kk..(oi + 1) * kk];
        let dst = &mut moved[oi * kk..(oi + 1) * kk];
        for (p, row) in spatial.iter().enumerate() {
            dst[p] = row.iter().map(|&(q, w)| w * src[q]).sum();
        }
    }
    let mut tmp = vec![0.0; kernel.len()];
    for o in 0..d_out {
        for o2 in 0..d_out {
            let r = rho_out[(o, o2)];
            if r == 0.0 {
                continue;
            }
            for i in 0..d_in {
                let (d, s) = ((o * d_in + i) * kk, (o2 * d_in + i) * kk);
                for p in 0..kk {
                    tmp[d + p] += r * moved[s + p];
                }
            }
        }
    }
    let mut out = vec![0.0; kernel.len()];
    for o in 0..d_out {
        for i in 0..d_in {
            for i2 in 0..d_in {
                let r = rho_in_inv[(i2, i)];
                if r == 0.0 {
                    continue;
                }
                let (d, s) = ((o * d_in + i) * kk, (o * d_in + i2) * kk);
                for p in 0..kk {
                    out[d + p] += r * tmp[s + p];
                }
            }
        }
    }
    out
}

/// Steers a single-pair kernel by `g`.
pub fn steer_kernel(
    kernel: &[f64],
    k: usize,
    g: &GroupElement,
    rep_in: &Representation,
    rep_out: &Representation,
) -> Result<Vec<f64>> {
    let expected = rep_out.dim() * rep_in.dim() * k * k;
    if kernel.len() != expected {
        return Err(Error::LengthMismatch { expected, got: kernel.len() });
    }
    let rho_out = rep_out.matrix(g)?;
    let rho_in_inv = rep_in.matrix(g)?.transpose();
    Ok(steer_with(kernel, k, &rho_out, &rho_in_inv, &spatial_steering(k, g)))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Constraint violation of `kernel` at a single element, using grid steering
/// (exact for quarter turns and reflections, bilinear otherwise).
pub fn steering_residual_at(
    kernel: &[f64],
    k: usize,
    g: &GroupElement,
    rep_in: &Representation,
    rep_out: &Representation,
) -> Result<f64> {
    Ok(max_abs_diff(&steer_kernel(kernel, k, g, rep_in, rep_out)?, kernel))
}

/// `max_g ‖K(g·x) − ρ_out(g) K(x) ρ_in(g)^{-1}‖_∞`.
///
/// Finite groups are tested at their grid-exact elements. `SO(2)` kernels are
/// additionally interpolated ring by ring with trigonometric polynomials and
/// tested at 360 angles.
pub fn kernel_constraint_residual(
    kernel: &[f64],
    k: usize,
    group: &GroupSpec,
    rep_in: &Representation,
    rep_out: &Representation,
) -> Result<f64> {
    check_kernel_size(k)?;
    if rep_in.group() != *group || rep_out.group() != *group {
        return Err(Error::RepresentationMismatch("representations of another group".into()));
    }
    let mut worst = 0.0f64;
    for g in group.exact_steering_elements() {
        worst = worst.max(steering_residual_at(kernel, k, &g, rep_in, rep_out)?);
    }
    if !group.is_finite() {
        worst = worst.max(so2_continuous_residual(kernel, k, rep_in, rep_out, 360)?);
    }
    Ok(worst)
}

/// Pixel rings: `(radius², pixel indices)` sorted by radius.
pub fn pixel_rings(k: usize) -> Vec<(i64, Vec<usize>)> {
    let ci = (k as i64 - 1) / 2;
    let mut rings: Vec<(i64, Vec<usize>)> = Vec::new();
    for p in 0..k * k {
        let (x, y) = ((p % k) as i64 - ci, ci - (p / k) as i64);
        let r2 = x * x + y * y;
        match rings.iter_mut().find(|(r, _)| *r == r2) {
            Some((_, v)) => v.push(p),
            None => rings.push((r2, vec![p])),
        }
    }
    rings.sort_by_key(|(r, _)| *r);
    rings
}

/// Largest angular frequency resolvable on a ring of `n` samples.
fn ring_band_limit(n: usize, r2: i64) -> i64 {
    if r2 == 0 {
        0
    } else {
        (n as i64 - 1) / 2
    }
}

fn so2_continuous_residual(
    kernel: &[f64],
    k: usize,
    rep_in: &Representation,
    rep_out: &Representation,
    num_angles: usize,
) -> Result<f64> {
    let (d_out, d_in) = (rep_out.dim(), rep_in.dim());
    let kk = k * k;
    let mut worst = 0.0f64;
    for (r2, pixels) in pixel_rings(k) {
        let m_max = ring_band_limit(pixels.len(), r2);
        let phis: Vec<f64> = pixels
            .iter()
            .map(|&p| {
                let (x, y) = pixel_coords(k, p);
                y.atan2(x)
            })
            .collect();
        let features = |phi: f64| -> Vec<f64> {
            let mut f = vec![1.0];
            for m in 1..=m_max {
                let (s, c) = (m as f64 * phi).sin_cos();
                f.push(c);
                f.push(s);
            }
            f
        };
        let nf = (2 * m_max + 1) as usize;
        let design = DMatrix::from_fn(pixels.len(), nf, |r, c| features(phis[r])[c]);
        let svd = design.clone().svd(true, true);
        // Trigonometric fit of every (o, i) entry on this ring.
        let mut fits = Vec::with_capacity(d_out * d_in);
        for oi in 0..d_out * d_in {
            let vals = DVector::from_iterator(pixels.len(), pixels.iter().map(|&p| kernel[oi * kk + p]));
            let coef = svd.solve(&vals, 1e-12).map_err(|e| Error::InvalidArgument(e.into()))?;
            fits.push(coef);
        }
        let eval = |phi: f64| -> DMatrix<f64> {
            let f = DVector::from_vec(features(phi));
            DMatrix::from_fn(d_out, d_in, |o, i| fits[o * d_in + i].dot(&f))
        };
        for a in 0..num_angles {
            let theta = std::f64::consts::TAU * a as f64 / num_angles as f64;
            let g = GroupElement::rotation(theta);
            let (ro, ri_inv) = (rep_out.matrix(&g)?, rep_in.matrix(&g)?.transpose());
            for (idx, &p) in pixels.iter().enumerate() {
                let sample = DMatrix::from_fn(d_out, d_in, |o, i| kernel[(o * d_in + i) * kk + p]);
                let lhs = eval(phis[idx] + theta);
                let rhs = &ro * sample * &ri_inv;
                worst = worst.max((lhs - rhs).amax());
            }
        }
    }
    Ok(worst)
}

/// Orthonormal basis of the column space of `m` (columns are candidates).
fn orthonormal_columns(m: DMatrix<f64>) -> Vec<Vec<f64>> {
    if m.ncols() == 0 {
        return Vec::new();
    }
    // Tall inputs go through a thin QR first so the SVD stays ncols × ncols.
    let (q, r) = if m.nrows() > m.ncols() {
        let qr = m.qr();
        (Some(qr.q()), qr.r())
    } else {
        (None, m)
    };
    let svd = r.svd(true, false);
    let u = match q {
        Some(q) => q * svd.u.expect("requested U"),
        None => svd.u.expect("requested U"),
    };
    let smax = svd.singular_values.max();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    order
        .into_iter()
        .filter(|&i| smax > 0.0 && svd.singular_values[i] > RANK_TOL * smax)
        .map(|i| canonical_sign(u.column(i).iter().copied().collect()))
        .collect()
}

/// Fixes the sign of a basis vector so the first sizeable entry is positive.
fn canonical_sign(mut v: Vec<f64>) -> Vec<f64> {
    let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-6 * peak) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    v
}

/// Right nullspace of `m` with threshold `1e-8 · σ_max`.
pub fn nullspace(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let n = m.ncols();
    // pad to at least square so V spans the full domain
    let a = if m.nrows() < n {
        let mut p = DMatrix::zeros(n, n);
        p.view_mut((0, 0), (m.nrows(), n)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = a.svd(false, true);
    let vt = svd.v_t.expect("requested V");
    let smax = svd.singular_values.max();
    (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] <= RANK_TOL * smax)
        .map(|i| canonical_sign(vt.row(i).iter().copied().collect()))
        .collect()
}

/// Dense matrix of the steering operator `K ↦ g·K` on vectorized kernels.
pub fn steering_operator(
    k: usize,
    g: &GroupElement,
    rep_in: &Representation,
    rep_out: &Representation,
) -> Result<DMatrix<f64>> {
    let n = rep_out.dim() * rep_in.dim() * k * k;
    let mut m = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for col in 0..n {
        e[col] = 1.0;
        let s = steer_kernel(&e, k, g, rep_in, rep_out)?;
        m.column_mut(col).copy_from_slice(&s);
        e[col] = 0.0;
    }
    Ok(m)
}

fn solve_exact(
    group: &GroupSpec,
    rep_in: &Representation,
    rep_out: &Representation,
    k: usize,
) -> Result<Vec<Vec<f64>>> {
    let gens = group.generators()?;
    let n = rep_out.dim() * rep_in.dim() * k * k;
    if rep_in.is_permutation() && rep_out.is_permutation() {
        if let Some(b) = orbit_basis(k, &gens, rep_in, rep_out, n)? {
            return Ok(b);
        }
    }
    let mut stacked = DMatrix::zeros(n * gens.len(), n);
    for (gi, g) in gens.iter().enumerate() {
        let a = steering_operator(k, g, rep_in, rep_out)? - DMatrix::<f64>::identity(n, n);
        stacked.view_mut((gi * n, 0), (n, n)).copy_from(&a);
    }
    Ok(nullspace(&stacked))
}

/// When every generator acts on vectorized kernels as a permutation of
/// entries, the invariant kernels are spanned by orbit indicators; scaled to
/// unit norm they form a sparse orthonormal basis.
fn orbit_basis(
    k: usize,
    gens: &[GroupElement],
    rep_in: &Representation,
    rep_out: &Representation,
    n: usize,
) -> Result<Option<Vec<Vec<f64>>>> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let mut e = vec![0.0; n];
    for g in gens {
        for idx in 0..n {
            e[idx] = 1.0;
            let img = steer_kernel(&e, k, g, rep_in, rep_out)?;
            e[idx] = 0.0;
            let hits: Vec<usize> = (0..n).filter(|&j| img[j] != 0.0).collect();
            if hits.len() != 1 || img[hits[0]] != 1.0 {
                return Ok(None);
            }
            let (a, b) = (find(&mut parent, idx), find(&mut parent, hits[0]));
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let r = find(&mut parent, i);
        members[r].push(i);
    }
    Ok(Some(
        members
            .into_iter()
            .filter(|m| !m.is_empty())
            .map(|m| {
                let mut v = vec![0.0; n];
                let w = 1.0 / (m.len() as f64).sqrt();
                m.iter().for_each(|&i| v[i] = w);
                v
            })
            .collect(),
    ))
}

fn solve_reynolds(
    group: &GroupSpec,
    rep_in: &Representation,
    rep_out: &Representation,
    k: usize,
) -> Result<Vec<Vec<f64>>> {
    let (d_out, d_in, kk) = (rep_out.dim(), rep_in.dim(), k * k);
    let n = d_out * d_in * kk;
    // Slice of free kernels that the averaging operator maps injectively.
    let slice: Vec<usize> = if rep_out.kind() == RepKind::Regular {
        (0..d_in * kk).collect()
    } else if rep_in.kind() == RepKind::Regular {
        (0..d_out).flat_map(|o| (0..kk).map(move |p| o * d_in * kk + p)).collect()
    } else {
        (0..n).collect()
    };
    let elems = group.elements()?;
    let steer: Vec<_> = elems
        .iter()
        .map(|g| {
            Ok((rep_out.matrix(g)?, rep_in.matrix(g)?.transpose(), spatial_steering(k, g)))
        })
        .collect::<Result<_>>()?;
    let mut images = DMatrix::zeros(n, slice.len());
    let mut e = vec![0.0; n];
    for (col, &idx) in slice.iter().enumerate() {
        e[idx] = 1.0;
        let mut acc = vec![0.0; n];
        for (ro, ri, sp) in &steer {
            for (a, v) in acc.iter_mut().zip(steer_with(&e, k, ro, ri, sp)) {
                *a += v;
            }
        }
        e[idx] = 0.0;
        let scale = 1.0 / elems.len() as f64;
        images.column_mut(col).iter_mut().zip(acc).for_each(|(d, v)| *d = v * scale);
    }
    Ok(orthonormal_columns(images))
}

fn so2_harmonic_candidates(
    rep_in: &Representation,
    rep_out: &Representation,
    k: usize,
) -> Vec<Vec<f64>> {
    let j = rep_in.frequency().expect("SO(2) irrep") as i64;
    let l = rep_out.frequency().expect("SO(2) irrep") as i64;
    let (d_out, d_in, kk) = (rep_out.dim(), rep_in.dim(), k * k);
    let rot = |a: f64| [[a.cos(), -a.sin()], [a.sin(), a.cos()]];
    let mul = |a: [[f64; 2]; 2], b: [[f64; 2]; 2]| {
        let mut c = [[0.0; 2]; 2];
        for r in 0..2 {
            for s in 0..2 {
                c[r][s] = a[r][0] * b[0][s] + a[r][1] * b[1][s];
            }
        }
        c
    };
    let ident = [[1.0, 0.0], [0.0, 1.0]];
    let jmat = rot(FRAC_PI_2);
    let flip = [[1.0, 0.0], [0.0, -1.0]];
    let flip_j = mul(flip, jmat);

    let mut out = Vec::new();
    for (r2, pixels) in pixel_rings(k) {
        let m_max = ring_band_limit(pixels.len(), r2);
        // Each family is a closure from the pixel angle to the (d_out × d_in) block.
        let mut families: Vec<Box<dyn Fn(f64) -> Vec<f64>>> = Vec::new();
        match (j, l) {
            (0, 0) => families.push(Box::new(|_| vec![1.0])),
            (0, l) if l <= m_max => {
                for beta in [0.0, FRAC_PI_2] {
                    families.push(Box::new(move |phi| {
                        let a = l as f64 * phi + beta;
                        vec![a.cos(), a.sin()]
                    }));
                }
            }
            (j, 0) if j <= m_max => {
                for beta in [0.0, FRAC_PI_2] {
                    families.push(Box::new(move |phi| {
                        let a = j as f64 * phi + beta;
                        vec![a.cos(), a.sin()]
                    }));
                }
            }
            (j, l) if j > 0 && l > 0 => {
                let branches = [(l - j, ident), (l - j, jmat), (l + j, flip), (l + j, flip_j)];
                for (m, a) in branches {
                    if m.abs() <= m_max {
                        families.push(Box::new(move |phi| {
                            let b = mul(rot(m as f64 * phi), a);
                            vec![b[0][0], b[0][1], b[1][0], b[1][1]]
                        }));
                    }
                }
            }
            _ => {}
        }
        for fam in families {
            let mut kern = vec![0.0; d_out * d_in * kk];
            for &p in &pixels {
                let (x, y) = pixel_coords(k, p);
                let block = fam(y.atan2(x));
                for o in 0..d_out {
                    for i in 0..d_in {
                        kern[(o * d_in + i) * kk + p] = block[o * d_in + i];
                    }
                }
            }
            out.push(kern);
        }
    }
    out
}

fn solve_so2(rep_in: &Representation, rep_out: &Representation, k: usize) -> Vec<Vec<f64>> {
    let cands = so2_harmonic_candidates(rep_in, rep_out, k);
    if cands.is_empty() {
        return Vec::new();
    }
    let n = cands[0].len();
    let m = DMatrix::from_fn(n, cands.len(), |r, c| cands[c][r]);
    orthonormal_columns(m)
}

/// Builds an orthonormal basis of equivariant kernels. A zero-dimensional
/// basis is a valid result; [`Error::EmptyBasis`] is reserved for callers
/// that need at least one element (see [`solve_kernel_basis_nonempty`]).
pub fn solve_kernel_basis(
    rep_in: &Representation,
    rep_out: &Representation,
    group: &GroupSpec,
    kernel_size: usize,
) -> Result<KernelBasis> {
    check_kernel_size(kernel_size)?;
    if rep_in.group() != *group || rep_out.group() != *group {
        return Err(Error::RepresentationMismatch(format!(
            "{rep_in} of {} and {rep_out} of {} for group {group}",
            rep_in.group(),
            rep_out.group()
        )));
    }
    let elements = if !group.is_finite() {
        solve_so2(rep_in, rep_out, kernel_size)
    } else if group.is_exact_steering() {
        solve_exact(group, rep_in, rep_out, kernel_size)?
    } else {
        solve_reynolds(group, rep_in, rep_out, kernel_size)?
    };
    Ok(KernelBasis {
        group: *group,
        rep_in: rep_in.clone(),
        rep_out: rep_out.clone(),
        kernel_size,
        elements,
    })
}

pub fn solve_kernel_basis_nonempty(
    rep_in: &Representation,
    rep_out: &Representation,
    group: &GroupSpec,
    kernel_size: usize,
) -> Result<KernelBasis> {
    let b = solve_kernel_basis(rep_in, rep_out, group, kernel_size)?;
    if b.dim() == 0 {
        return Err(Error::EmptyBasis(format!("{rep_in} -> {rep_out} over {group}, k={kernel_size}")));
    }
    Ok(b)
}

type CacheKey = (GroupSpec, RepKind, RepKind, usize);

/// Process-wide cache of solved bases keyed by `(group, rep_in, rep_out, k)`.
pub fn cached_kernel_basis(
    rep_in: &Representation,
    rep_out: &Representation,
    group: &GroupSpec,
    kernel_size: usize,
) -> Result<Arc<KernelBasis>> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, Arc<KernelBasis>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = (*group, rep_in.kind(), rep_out.kind(), kernel_size);
    if let Some(b) = cache.lock().expect("basis cache poisoned").get(&key) {
        return Ok(b.clone());
    }
    // Solve outside the lock; a racing duplicate solve yields the same basis.
    let basis = Arc::new(solve_kernel_basis(rep_in, rep_out, group, kernel_size)?);
    Ok(cache.lock().expect("basis cache poisoned").entry(key).or_insert(basis).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reps(group: GroupSpec) -> Vec<Representation> {
        vec![Representation::trivial(group), Representation::regular(group).unwrap()]
    }

    /// Orbit count of the group acting on grid cells, by brute force.
    fn orbit_count(group: &GroupSpec, k: usize) -> usize {
        let ci = (k as i64 - 1) / 2;
        let mut seen = vec![false; k * k];
        let mut orbits = 0;
        for p in 0..k * k {
            if seen[p] {
                continue;
            }
            orbits += 1;
            let (x, y) = ((p % k) as i64 - ci, ci - (p / k) as i64);
            for g in group.elements().unwrap() {
                let (gx, gy) = g.apply_exact(x, y).unwrap();
                seen[((ci - gy) * k as i64 + gx + ci) as usize] = true;
            }
        }
        orbits
    }

    #[test]
    fn trivial_group_is_unconstrained() {
        let e = GroupSpec::trivial();
        let t = Representation::trivial(e);
        assert_eq!(solve_kernel_basis(&t, &t, &e, 3).unwrap().dim(), 9);
    }

    #[test]
    fn invariant_kernels_count_grid_orbits() {
        for group in [GroupSpec::cyclic(4).unwrap(), GroupSpec::dihedral(4).unwrap()] {
            let t = Representation::trivial(group);
            for k in [3, 5] {
                let b = solve_kernel_basis(&t, &t, &group, k).unwrap();
                assert_eq!(b.dim(), orbit_count(&group, k), "{group} k={k}");
            }
        }
        assert_eq!(orbit_count(&GroupSpec::cyclic(4).unwrap(), 3), 3);
    }

    #[test]
    fn regular_pairs_have_full_parameter_count() {
        for group in [
            GroupSpec::cyclic(4).unwrap(),
            GroupSpec::dihedral(4).unwrap(),
            GroupSpec::cyclic(8).unwrap(),
            GroupSpec::dihedral(8).unwrap(),
        ] {
            let r = Representation::regular(group).unwrap();
            let t = Representation::trivial(group);
            let n = group.order().unwrap();
            assert_eq!(solve_kernel_basis(&r, &r, &group, 3).unwrap().dim(), n * 9, "{group}");
            assert_eq!(solve_kernel_basis(&t, &r, &group, 3).unwrap().dim(), 9, "{group}");
            assert_eq!(solve_kernel_basis(&r, &t, &group, 3).unwrap().dim(), 9, "{group}");
        }
    }

    #[test]
    fn bases_are_orthonormal_and_equivariant() {
        for group in [
            GroupSpec::cyclic(2).unwrap(),
            GroupSpec::cyclic(4).unwrap(),
            GroupSpec::dihedral(2).unwrap(),
            GroupSpec::dihedral(4).unwrap(),
            GroupSpec::cyclic(8).unwrap(),
            GroupSpec::dihedral(8).unwrap(),
        ] {
            for ri in reps(group) {
                for ro in reps(group) {
                    let b = solve_kernel_basis(&ri, &ro, &group, 3).unwrap();
                    let gram = b.gram();
                    let err = (gram - DMatrix::identity(b.dim(), b.dim())).amax();
                    assert!(err < 1e-8, "{group} {ri}->{ro}: gram error {err}");
                    for e in b.elements() {
                        let r = kernel_constraint_residual(e, 3, &group, &ri, &ro).unwrap();
                        assert!(r < 1e-6, "{group} {ri}->{ro}: residual {r}");
                    }
                }
            }
        }
    }

    #[test]
    fn so2_bases_satisfy_continuous_constraint() {
        let g = GroupSpec::so2(2);
        for k in [3, 5] {
            for j in 0..=2 {
                for l in 0..=2 {
                    let ri = Representation::irrep(g, j).unwrap();
                    let ro = Representation::irrep(g, l).unwrap();
                    let b = solve_kernel_basis(&ri, &ro, &g, k).unwrap();
                    assert!((b.gram() - DMatrix::identity(b.dim(), b.dim())).amax() < 1e-8);
                    for e in b.elements() {
                        let r = kernel_constraint_residual(e, k, &g, &ri, &ro).unwrap();
                        assert!(r < 1e-6, "k={k} {j}->{l} residual {r}");
                    }
                }
            }
        }
    }

    #[test]
    fn so2_trivial_pair_has_one_element_per_ring() {
        let g = GroupSpec::so2(1);
        let t = Representation::irrep(g, 0).unwrap();
        assert_eq!(solve_kernel_basis(&t, &t, &g, 3).unwrap().dim(), 3);
        // radii {0, 1, √2} on 3×3: frequency-1 needs a non-central ring
        let p1 = Representation::irrep(g, 1).unwrap();
        assert_eq!(solve_kernel_basis(&t, &p1, &g, 3).unwrap().dim(), 4);
        // only the m = 0 branch fits every ring
        assert_eq!(solve_kernel_basis(&p1, &p1, &g, 3).unwrap().dim(), 6);
    }

    #[test]
    fn random_kernel_violates_constraint() {
        let g = GroupSpec::cyclic(4).unwrap();
        let t = Representation::trivial(g);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kern: Vec<f64> = (0..9).map(|_| rng.random::<f64>() - 0.5).collect();
        assert!(kernel_constraint_residual(&kern, 3, &g, &t, &t).unwrap() > 1e-3);
    }

    #[test]
    fn isotropic_gaussian_is_invariant() {
        let g = GroupSpec::cyclic(4).unwrap();
        let t = Representation::trivial(g);
        let kern: Vec<f64> = (0..25)
            .map(|p| {
                let (x, y) = pixel_coords(5, p);
                (-(x * x + y * y) / 2.0).exp()
            })
            .collect();
        assert!(kernel_constraint_residual(&kern, 5, &g, &t, &t).unwrap() < 1e-10);
    }

    #[test]
    fn expand_and_project_round_trip() {
        let g = GroupSpec::dihedral(4).unwrap();
        let r = Representation::regular(g).unwrap();
        let b = solve_kernel_basis(&r, &r, &g, 3).unwrap();
        assert!(b.expand(&vec![0.0; b.dim()]).unwrap().iter().all(|v| *v == 0.0));
        let mut one_hot = vec![0.0; b.dim()];
        one_hot[5] = 1.0;
        assert_eq!(b.expand(&one_hot).unwrap(), b.elements()[5]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c: Vec<f64> = (0..b.dim()).map(|_| rng.random::<f64>()).collect();
        let back = b.project(&b.expand(&c).unwrap()).unwrap();
        assert!(max_abs_diff(&back, &c) < 1e-10);
        assert_eq!(
            b.expand(&[1.0]).unwrap_err(),
            Error::LengthMismatch { expected: b.dim(), got: 1 }
        );
    }

    #[test]
    fn unsupported_kernel_size() {
        let g = GroupSpec::cyclic(4).unwrap();
        let t = Representation::trivial(g);
        assert_eq!(solve_kernel_basis(&t, &t, &g, 4).unwrap_err(), Error::UnsupportedKernelSize(4));
        assert_eq!(solve_kernel_basis(&t, &t, &g, 9).unwrap_err(), Error::UnsupportedKernelSize(9));
    }

    #[test]
    fn exact_steering_is_a_permutation() {
        let g = GroupElement::rotation_step(1, 4);
        let s = spatial_steering(3, &g);
        let mut seen = [false; 9];
        for row in &s {
            assert_eq!(row.len(), 1);
            seen[row[0].0] = true;
        }
        assert!(seen.iter().all(|x| *x));
        // rotating by +90° moves the right edge (x=1,y=0) to the top edge
        // so the steered kernel's top pixel reads the original right pixel
        assert_eq!(s[1][0].0, 5);
    }
}

//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.

use crate::error::{Error, Result};

/// `α/(2σ²)`: Rényi divergence of order `α` between `N(1,σ²)` and `N(0,σ²)`.
pub fn rdp_gaussian(sigma: f64, alpha: f64) -> Result<f64> {
    if !(sigma > 0.0) || !(alpha > 1.0) {
        return Err(Error::InvalidArgument(format!("need σ > 0 and α > 1, got σ={sigma}, α={alpha}")));
    }
    Ok(alpha / (2.0 * sigma * sigma))
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        hi
    } else {
        hi + (lo - hi).exp().ln_1p()
    }
}

/// `ln A_α = ln E_{z~N(0,σ²)}[((1-q) + q·e^{(2z-1)/(2σ²)})^α]` for integer
/// `α ≥ 2`, by binomial expansion. Exact for this ordering of the pair.
fn log_a_integer(q: f64, sigma: f64, alpha: u64) -> f64 {
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let s2 = sigma * sigma;
    let mut ln_c = 0.0;
    (0..=alpha).fold(f64::NEG_INFINITY, |acc, k| {
        let kf = k as f64;
        if k > 0 {
            // C(α, k) = C(α, k−1)·(α−k+1)/k
            ln_c += ((alpha - k + 1) as f64).ln() - kf.ln();
        }
        let term = ln_c + kf * lq + (alpha - k) as f64 * l1q + (kf * kf - kf) / (2.0 * s2);
        log_add(acc, term)
    })
}

/// `ρ(α)` of one step of the Poisson-subsampled Gaussian mechanism.
///
/// Integer orders use the binomial expansion. Fractional orders interpolate
/// `ln A_α = (α-1)ρ(α)` linearly between the bracketing integers
/// (`ln A_1 = 0`); `ln A_α` is convex in `α`, so the chord is an upper bound.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidRate(q));
    }
    if q == 1.0 {
        return rdp_gaussian(sigma, alpha);
    }
    rdp_gaussian(sigma, alpha)?;
    let lo = alpha.floor();
    let log_a = |a: f64| if a <= 1.0 { 0.0 } else { log_a_integer(q, sigma, a as u64) };
    let la = if lo == alpha {
        log_a(alpha)
    } else {
        let t = alpha - lo;
        (1.0 - t) * log_a(lo) + t * log_a(lo + 1.0)
    };
    Ok((la / (alpha - 1.0)).max(0.0))
}

/// `{1.25, 1.5, 1.75, 2, 2.5, …, 63.5, 64} ∪ {65, …, 256}`.
pub fn default_orders() -> Vec<f64> {
    let mut v = vec![1.25, 1.5, 1.75];
    v.extend((4..=128).map(|i| i as f64 * 0.5));
    v.extend((65..=256).map(|i| i as f64));
    v
}

/// RDP to (ε, δ) conversion rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conversion {
    /// `ε = ρ + ln(1/δ)/(α-1)`.
    Classic,
    /// `ε = ρ + ln((α-1)/α) - (ln δ + ln α)/(α-1)`, a valid and tighter
    /// bound (the rule used by common DP-SGD libraries).
    Improved,
}

impl Conversion {
    pub fn epsilon(&self, rho: f64, alpha: f64, delta: f64) -> f64 {
        match self {
            Conversion::Classic => rho + (1.0 / delta).ln() / (alpha - 1.0),
            Conversion::Improved => rho + ((alpha - 1.0) / alpha).ln() - (delta.ln() + alpha.ln()) / (alpha - 1.0),
        }
    }
}

/// Accumulated RDP per order.
#[derive(Debug, Clone, PartialEq)]
pub struct Accountant {
    orders: Vec<f64>,
    rho: Vec<f64>,
    step_rho: Vec<f64>,
    q: f64,
    sigma: f64,
    steps: u64,
}

impl Accountant {
    pub fn new(q: f64, sigma: f64) -> Result<Self> {
        Self::with_orders(q, sigma, default_orders())
    }

    pub fn with_orders(q: f64, sigma: f64, orders: Vec<f64>) -> Result<Self> {
        if orders.is_empty() {
            return Err(Error::EmptyOrderGrid);
        }
        let step_rho = orders.iter().map(|&a| rdp_subsampled_gaussian(q, sigma, a)).collect::<Result<Vec<_>>>()?;
        Ok(Self { rho: vec![0.0; orders.len()], orders, step_rho, q, sigma, steps: 0 })
    }

    /// Restores a saved state.
    pub fn from_parts(q: f64, sigma: f64, orders: Vec<f64>, rho: Vec<f64>, steps: u64) -> Result<Self> {
        let mut a = Self::with_orders(q, sigma, orders)?;
        if rho.len() != a.orders.len() {
            return Err(Error::LengthMismatch { expected: a.orders.len(), got: rho.len() });
        }
        a.rho = rho;
        a.steps = steps;
        Ok(a)
    }

    /// Composes `t` more steps (RDP adds per order).
    pub fn step(&mut self, t: u64) {
        for (r, s) in self.rho.iter_mut().zip(&self.step_rho) {
            *r += t as f64 * s;
        }
        self.steps += t;
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn sample_rate(&self) -> f64 {
        self.q
    }

    pub fn noise_multiplier(&self) -> f64 {
        self.sigma
    }

    /// Smallest ε over the order grid and the minimizing order.
    pub fn epsilon(&self, delta: f64, conversion: Conversion) -> Result<(f64, f64)> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidArgument(format!("δ must lie in (0, 1), got {delta}")));
        }
        let (eps, alpha) = self
            .orders
            .iter()
            .zip(&self.rho)
            .map(|(&a, &r)| (conversion.epsilon(r, a, delta), a))
            .min_by(|x, y| x.0.total_cmp(&y.0))
            .ok_or(Error::EmptyOrderGrid)?;
        Ok((eps.max(0.0), alpha))
    }
}

/// ε after `steps` steps at `(q, σ)`.
pub fn epsilon_for(q: f64, sigma: f64, steps: u64, delta: f64, conversion: Conversion) -> Result<f64> {
    let mut a = Accountant::new(q, sigma)?;
    a.step(steps);
    Ok(a.epsilon(delta, conversion)?.0)
}

/// Noise multiplier hitting `target_epsilon` after `steps` steps, by
/// bisection on `ln σ` (ε is decreasing in σ). Returns the smallest searched
/// σ when even that stays under the target.
pub fn calibrate_sigma(target_epsilon: f64, delta: f64, q: f64, steps: u64, conversion: Conversion) -> Result<f64> {
    if !(target_epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("target ε must be positive, got {target_epsilon}")));
    }
    let eps = |s: f64| epsilon_for(q, s, steps, delta, conversion);
    let (mut lo, mut hi) = (1e-2f64, 1e3f64);
    if eps(lo)? <= target_epsilon {
        return Ok(lo);
    }
    if eps(hi)? > target_epsilon {
        return Err(Error::InvalidArgument(format!("ε={target_epsilon} is out of reach even at σ={hi}")));
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        let e = eps(mid)?;
        // only ever return a σ that meets the budget
        if e <= target_epsilon && target_epsilon - e < 1e-4 {
            return Ok(mid);
        }
        if e > target_epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

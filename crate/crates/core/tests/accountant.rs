use equidp_core::accountant::{
    calibrate_sigma, default_orders, epsilon_for, rdp_gaussian, rdp_subsampled_gaussian, Accountant, Conversion,
};
use proptest::prelude::*;

/// `1/(α-1) · ln ∫ p(x)^α q(x)^{1-α} dx` for `p = (1-q)N(0,σ²) + qN(1,σ²)`,
/// `q = N(0,σ²)`, by the trapezoid rule on a wide grid.
fn renyi_quadrature(q: f64, sigma: f64, alpha: f64) -> f64 {
    let pdf = |x: f64, mu: f64| (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let (lo, hi, n) = (-40.0 * sigma, 40.0 * sigma + 1.0, 400_000);
    let h = (hi - lo) / n as f64;
    let mut total = 0.0;
    for i in 0..=n {
        let x = lo + i as f64 * h;
        let qx = pdf(x, 0.0);
        let px = (1.0 - q) * qx + q * pdf(x, 1.0);
        let f = if qx > 0.0 { qx * (px / qx).powf(alpha) } else { 0.0 };
        total += if i == 0 || i == n { 0.5 * f } else { f };
    }
    (total * h).ln() / (alpha - 1.0)
}

#[test]
fn plain_gaussian_matches_quadrature() {
    for (s, a) in [(1.0, 2.0), (2.0, 3.5), (0.8, 1.5)] {
        let exact = rdp_gaussian(s, a).unwrap();
        assert!((renyi_quadrature(1.0, s, a) - exact).abs() < 1e-8, "σ={s} α={a}");
    }
}

#[test]
fn subsampled_bound_dominates_quadrature() {
    // at q=0.01, σ=1, α=2 the binomial expansion is exact for integer orders
    let bound = rdp_subsampled_gaussian(0.01, 1.0, 2.0).unwrap();
    let oracle = renyi_quadrature(0.01, 1.0, 2.0);
    assert!(bound >= oracle - 1e-12 && bound <= 1.1 * oracle, "{bound} vs {oracle}");
    for (q, s, a) in [(0.1, 1.5, 3.0), (0.02, 0.9, 5.0), (0.05, 2.0, 2.5), (0.3, 1.2, 1.75)] {
        let bound = rdp_subsampled_gaussian(q, s, a).unwrap();
        let oracle = renyi_quadrature(q, s, a);
        assert!(bound >= oracle * (1.0 - 1e-9), "q={q} σ={s} α={a}: {bound} < {oracle}");
    }
}

#[test]
fn single_gaussian_step_classic_conversion() {
    let mut acc = Accountant::with_orders(1.0, 1.0, (0..20000).map(|i| 1.001 + i as f64 * 0.001).collect()).unwrap();
    acc.step(1);
    let (eps, alpha) = acc.epsilon(1e-5, Conversion::Classic).unwrap();
    // closed form: α* = 1 + sqrt(2 ln(1/δ)), ε = 1/2 + sqrt(2 ln(1/δ))
    let l = (1e5f64).ln();
    assert!((eps - (0.5 + (2.0 * l).sqrt())).abs() < 1e-5, "{eps}");
    assert!((eps - 5.30).abs() < 0.01);
    assert!((alpha - (1.0 + (2.0 * l).sqrt())).abs() < 2e-3);
}

#[test]
fn cifar_operating_point() {
    let q = 8192.0 / 50000.0;
    let improved = epsilon_for(q, 5.0, 2160, 1e-5, Conversion::Improved).unwrap();
    assert!((7.5..=8.5).contains(&improved), "{improved}");
    let classic = epsilon_for(q, 5.0, 2160, 1e-5, Conversion::Classic).unwrap();
    assert!(classic > improved);
    let sigma = calibrate_sigma(8.0, 1e-5, q, 2160, Conversion::Improved).unwrap();
    assert!((sigma - 5.0).abs() <= 0.2, "{sigma}");
    let back = epsilon_for(q, sigma, 2160, 1e-5, Conversion::Improved).unwrap();
    assert!((back - 8.0).abs() < 1e-3);
}

#[test]
fn composition_is_additive() {
    let mut a = Accountant::new(0.05, 1.1).unwrap();
    let before = a.rho().to_vec();
    a.step(0);
    assert_eq!(a.rho(), &before[..]);
    a.step(1);
    let one = a.rho().to_vec();
    a.step(1);
    for (two, one) in a.rho().iter().zip(&one) {
        assert!((two - 2.0 * one).abs() <= 1e-15 * two.abs());
    }
    let mut b = Accountant::new(0.05, 1.1).unwrap();
    b.step(2160);
    for (r, o) in b.rho().iter().zip(&one) {
        assert!((r - 2160.0 * o).abs() <= 1e-12 * r.abs());
    }
}

#[test]
fn zero_steps_report_grid_minimum() {
    let a = Accountant::new(0.1, 1.0).unwrap();
    let (eps, alpha) = a.epsilon(1e-5, Conversion::Classic).unwrap();
    assert_eq!(alpha, 256.0);
    assert!((eps - (1e5f64).ln() / 255.0).abs() < 1e-12);
}

#[test]
fn huge_target_gives_small_sigma() {
    let s = calibrate_sigma(1e6, 1e-5, 0.01, 10, Conversion::Improved).unwrap();
    assert!(s > 0.0 && s <= 0.011);
}

#[test]
fn rho_grows_with_order() {
    let rho: Vec<f64> = default_orders().iter().map(|&a| rdp_subsampled_gaussian(0.01, 1.0, a).unwrap()).collect();
    assert!(rho.windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-12)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn epsilon_monotone_in_sigma_steps_and_rate(
        q in 0.001f64..0.5, s in 0.6f64..4.0, t in 1u64..2000, ds in 0.05f64..1.0, dt in 1u64..500, dq in 0.001f64..0.3,
    ) {
        let e = |q: f64, s: f64, t: u64| epsilon_for(q, s, t, 1e-5, Conversion::Improved).unwrap();
        let base = e(q, s, t);
        prop_assert!(e(q, s + ds, t) <= base + 1e-12);
        prop_assert!(e(q, s, t + dt) >= base - 1e-12);
        prop_assert!(e((q + dq).min(1.0), s, t) >= base - 1e-12);
    }

    #[test]
    fn subsampled_rho_monotone_in_rate(q in 0.001f64..0.9, dq in 0.0f64..0.1, s in 0.5f64..3.0, a in 2u32..40) {
        let a = a as f64;
        let r1 = rdp_subsampled_gaussian(q, s, a).unwrap();
        let r2 = rdp_subsampled_gaussian((q + dq).min(1.0), s, a).unwrap();
        prop_assert!(r2 >= r1 * (1.0 - 1e-12));
        prop_assert!(r2 <= rdp_gaussian(s, a).unwrap() * (1.0 + 1e-12));
    }
}

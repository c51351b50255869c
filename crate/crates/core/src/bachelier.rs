//! Normal-model pricing, implied normal vol, Black-Scholes and the ATM
//! normal/lognormal conversions.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::special::{erf, inverse_norm_cdf, norm_cdf, norm_pdf, SQRT_2PI};

/// A normal-vol quote. `y = K - F` and total variance `w = sigma_N^2 T`
/// are exposed as methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalQuote {
    pub forward: f64,
    pub strike: f64,
    pub maturity: f64,
    pub sigma_n: f64,
}

impl NormalQuote {
    pub fn moneyness(&self) -> f64 {
        self.strike - self.forward
    }

    pub fn total_variance(&self) -> f64 {
        self.sigma_n * self.sigma_n * self.maturity
    }

    pub fn price(&self) -> Result<f64> {
        bachelier_call(self.forward, self.strike, self.maturity, self.sigma_n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LognormalQuote {
    pub forward: f64,
    pub strike: f64,
    pub maturity: f64,
    pub sigma_bs: f64,
}

impl LognormalQuote {
    pub fn log_moneyness(&self) -> f64 {
        (self.strike / self.forward).ln()
    }

    pub fn price(&self) -> Result<f64> {
        black_scholes_call(self.forward, self.strike, self.sigma_bs, self.maturity)
    }
}

fn check_inputs(f: f64, k: f64, t: f64) -> Result<()> {
    ensure_finite("F", f)?;
    ensure_finite("K", k)?;
    ensure_finite("T", t)?;
    if t <= 0.0 {
        return Err(Error::InvalidParameter(format!("maturity must be positive, got {t}")));
    }
    Ok(())
}

/// Out-of-the-money normalised time value `phi(d) + d N(d)` for `d <= 0`.
fn otm_time_value(d: f64) -> f64 {
    norm_pdf(d) + d * norm_cdf(d)
}

/// Undiscounted call price under arithmetic Brownian motion.
pub fn bachelier_call(f: f64, k: f64, t: f64, sigma_n: f64) -> Result<f64> {
    check_inputs(f, k, t)?;
    ensure_finite("sigma_N", sigma_n)?;
    if sigma_n < 0.0 {
        return Err(Error::InvalidParameter("sigma_N must be non-negative".into()));
    }
    let intrinsic = (f - k).max(0.0);
    let s = sigma_n * t.sqrt();
    if s == 0.0 {
        return Ok(intrinsic);
    }
    Ok(intrinsic + s * otm_time_value(-(f - k).abs() / s))
}

/// Derivative of the Bachelier price with respect to `sigma_N`.
pub fn bachelier_vega(f: f64, k: f64, t: f64, sigma_n: f64) -> f64 {
    let s = sigma_n * t.sqrt();
    if s == 0.0 {
        return if f == k { t.sqrt() / SQRT_2PI } else { 0.0 };
    }
    t.sqrt() * norm_pdf((f - k) / s)
}

/// Inverts [`bachelier_call`] for `sigma_N`.
pub fn implied_normal_vol(price: f64, f: f64, k: f64, t: f64) -> Result<f64> {
    check_inputs(f, k, t)?;
    ensure_finite("price", price)?;
    let intrinsic = (f - k).max(0.0);
    let v = price - intrinsic;
    if v < 0.0 {
        return Err(Error::Domain(format!(
            "price {price} is below intrinsic value {intrinsic} (K={k}, F={f})"
        )));
    }
    if v == 0.0 {
        return Ok(0.0);
    }
    let m = (f - k).abs();
    let sqrt_t = t.sqrt();
    if m == 0.0 {
        return Ok(v * SQRT_2PI / sqrt_t);
    }
    // Solve s g(-m/s) = v for s = sigma sqrt(T). The map is increasing, and
    // s g <= s / sqrt(2 pi) gives the lower bracket.
    let value = |s: f64| s * otm_time_value(-m / s);
    let mut lo = v * SQRT_2PI;
    let mut hi = lo.max(m);
    while value(hi) < v {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::NoConvergence("implied vol bracket overflow".into()));
        }
    }
    // Newton on log(price) against s, kept inside the bracket.
    let mut s = 0.5 * (lo + hi);
    for _ in 0..200 {
        let fv = value(s);
        if fv == v {
            return Ok(s / sqrt_t);
        }
        if fv < v {
            lo = s;
        } else {
            hi = s;
        }
        let slope = norm_pdf(-m / s) / fv;
        let mut next = s - (fv.ln() - v.ln()) / slope;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - s).abs() <= 1e-16 * s || hi - lo <= 4.0 * f64::EPSILON * hi {
            return Ok(next / sqrt_t);
        }
        s = next;
    }
    Err(Error::NoConvergence(format!(
        "implied normal vol for price {price}, F={f}, K={k}, T={t}"
    )))
}

/// Undiscounted Black-Scholes call on a forward.
pub fn black_scholes_call(f: f64, k: f64, sigma_bs: f64, t: f64) -> Result<f64> {
    check_inputs(f, k, t)?;
    ensure_finite("sigma_BS", sigma_bs)?;
    if f <= 0.0 || k <= 0.0 {
        return Err(Error::Domain(format!("Black-Scholes needs F, K > 0 (F={f}, K={k})")));
    }
    if sigma_bs < 0.0 {
        return Err(Error::InvalidParameter("sigma_BS must be non-negative".into()));
    }
    let s = sigma_bs * t.sqrt();
    if s == 0.0 {
        return Ok((f - k).max(0.0));
    }
    let d1 = (f / k).ln() / s + 0.5 * s;
    let d2 = d1 - s;
    if f == k {
        return Ok(f * erf(s / (2.0 * std::f64::consts::SQRT_2)));
    }
    Ok(f * norm_cdf(d1) - k * norm_cdf(d2))
}

/// Exact ATM normal vol with the same price as a lognormal ATM quote.
pub fn atm_normal_from_lognormal(f: f64, sigma_bs: f64, t: f64) -> Result<f64> {
    check_inputs(f, f, t)?;
    ensure_finite("sigma_BS", sigma_bs)?;
    if f <= 0.0 {
        return Err(Error::Domain(format!("forward must be positive, got {f}")));
    }
    if sigma_bs < 0.0 {
        return Err(Error::InvalidParameter("sigma_BS must be non-negative".into()));
    }
    Ok(f * (SQRT_2PI / t.sqrt()) * erf(sigma_bs * t.sqrt() / (2.0 * std::f64::consts::SQRT_2)))
}

/// Inverse of [`atm_normal_from_lognormal`].
pub fn atm_lognormal_from_normal(f: f64, sigma_n: f64, t: f64) -> Result<f64> {
    check_inputs(f, f, t)?;
    ensure_finite("sigma_N", sigma_n)?;
    if f <= 0.0 {
        return Err(Error::Domain(format!("forward must be positive, got {f}")));
    }
    if sigma_n < 0.0 {
        return Err(Error::InvalidParameter("sigma_N must be non-negative".into()));
    }
    let cap = f * SQRT_2PI / t.sqrt();
    let x = sigma_n / cap;
    // erf saturates: within a few ulps of the cap the inverse is meaningless
    if x >= 1.0 - 4.0 * f64::EPSILON {
        return Err(Error::Domain(format!(
            "sigma_N = {sigma_n} is at or above the ATM bound F sqrt(2 pi / T) = {cap}"
        )));
    }
    let w = erf_inv(x)?;
    Ok(w * 2.0 * std::f64::consts::SQRT_2 / t.sqrt())
}

fn erf_inv(x: f64) -> Result<f64> {
    if x == 0.0 {
        return Ok(0.0);
    }
    let mut w = inverse_norm_cdf(0.5 * (1.0 + x)) / std::f64::consts::SQRT_2;
    // Polish against erf itself; the seed loses relative accuracy for small x.
    for _ in 0..4 {
        let slope = 2.0 / std::f64::consts::PI.sqrt() * (-w * w).exp();
        if slope == 0.0 {
            break;
        }
        let step = (erf(w) - x) / slope;
        w -= step;
        if step.abs() <= 1e-16 * w.abs() {
            break;
        }
    }
    if w.is_finite() {
        Ok(w)
    } else {
        Err(Error::NoConvergence(format!("erf inverse of {x}")))
    }
}

/// Leading-order short-maturity map from a lognormal smile to a normal
/// smile, `sigma_N(K) = sigma_BS(K) (K - F) / log(K / F)`.
///
/// Only meaningful for the T -> 0 limit of both smiles.
pub fn short_time_normal_from_lognormal(k: f64, f: f64, sigma_bs: f64) -> Result<f64> {
    ensure_finite("K", k)?;
    ensure_finite("F", f)?;
    ensure_finite("sigma_BS", sigma_bs)?;
    if k <= 0.0 || f <= 0.0 {
        return Err(Error::Domain(format!("need K, F > 0 (K={k}, F={f})")));
    }
    let x = (k / f).ln();
    let ratio = if x == 0.0 { f } else { f * x.exp_m1() / x };
    Ok(sigma_bs * ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn atm_and_intrinsic_prices() {
        let p = bachelier_call(0.03, 0.03, 1.0, 0.01).unwrap();
        assert!((p - 0.01 / SQRT_2PI).abs() < 1e-18);
        assert_eq!(bachelier_call(0.04, 0.03, 1.0, 0.0).unwrap(), 0.04 - 0.03);
        let tiny = bachelier_call(0.04, 0.03, 1.0, 1e-12).unwrap();
        assert!((tiny - 0.01).abs() < 1e-17);
        // mpmath, h = -0.5: 0.02 * (phi(0.5) - 0.5 * N(-0.5))
        let p = bachelier_call(0.03, 0.04, 4.0, 0.01).unwrap();
        assert!((p - 0.003_955_931_148_026_12).abs() < 1e-16, "{p}");
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(bachelier_call(f64::NAN, 0.03, 1.0, 0.01).is_err());
        assert!(bachelier_call(0.03, 0.03, 0.0, 0.01).is_err());
        assert!(black_scholes_call(-0.01, 0.03, 0.2, 1.0).is_err());
        assert!(short_time_normal_from_lognormal(0.0, 1.0, 0.2).is_err());
    }

    #[test]
    fn implied_vol_examples() {
        for &(f, k, t, s) in &[(0.03, 0.03, 1.0, 0.01), (0.04, 0.03, 1.0, 0.01), (0.03, 0.04, 4.0, 0.01)] {
            let p = bachelier_call(f, k, t, s).unwrap();
            let iv = implied_normal_vol(p, f, k, t).unwrap();
            assert!((iv / s - 1.0).abs() < 1e-12, "{iv}");
        }
        let iv = implied_normal_vol(0.00398942, 0.03, 0.03, 1.0).unwrap();
        assert!((iv - 0.00398942 * SQRT_2PI).abs() < 1e-18);
        assert!((iv - 0.01).abs() < 1e-8);
        assert_eq!(implied_normal_vol(0.04 - 0.03, 0.04, 0.03, 1.0).unwrap(), 0.0);
        assert!(matches!(implied_normal_vol(0.01 - 1e-9, 0.04, 0.03, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn black_scholes_examples() {
        assert_eq!(black_scholes_call(1.2, 1.0, 0.0, 1.0).unwrap(), 0.19999999999999996);
        let s: f64 = 0.4 * 10f64.sqrt();
        let atm = black_scholes_call(0.09, 0.09, 0.4, 10.0).unwrap();
        assert!((atm - 0.09 * (2.0 * norm_cdf(s / 2.0) - 1.0)).abs() < 1e-16);
        // mpmath: 0.09*(2*ncdf(0.632455532)-1)
        assert!((atm - 0.042_561_966_882_101_57).abs() < 1e-15, "{atm}");
        let off = black_scholes_call(1.0, 1.1, 0.25, 2.0).unwrap();
        // mpmath
        assert!((off - 0.102_593_128_070_454_17).abs() < 1e-14, "{off}");
    }

    #[test]
    fn atm_conversion() {
        let v = atm_normal_from_lognormal(0.03, 0.2, 10.0).unwrap();
        // mpmath: 0.03*sqrt(2 pi/10)*erf(0.2*sqrt(10)/(2 sqrt 2))
        assert!((v - 0.005_901_482_315_057_754).abs() < 1e-16, "{v}");
        let small = atm_normal_from_lognormal(0.03, 0.2, 1e-10).unwrap();
        assert!((small / 0.006 - 1.0).abs() < 1e-10);
        assert_eq!(atm_normal_from_lognormal(0.03, 0.0, 1.0).unwrap(), 0.0);
        let back = atm_lognormal_from_normal(0.03, v, 10.0).unwrap();
        assert!((back / 0.2 - 1.0).abs() < 1e-10);
        let cap = 0.03 * SQRT_2PI / 2.0;
        assert!(atm_lognormal_from_normal(0.03, cap, 4.0).is_err());
        let tiny = atm_lognormal_from_normal(0.03, atm_normal_from_lognormal(0.03, 0.2, 1e-8).unwrap(), 1e-8);
        assert!((tiny.unwrap() / 0.2 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn atm_conversion_is_price_equality() {
        for &(f, s, t) in &[(0.03, 0.2, 1.0), (1.0, 0.5, 5.0), (0.09, 0.4, 10.0), (2.0, 0.05, 0.1)] {
            let p = black_scholes_call(f, f, s, t).unwrap();
            let iv = implied_normal_vol(p, f, f, t).unwrap();
            let direct = atm_normal_from_lognormal(f, s, t).unwrap();
            assert!((iv / direct - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn short_time_smile_map() {
        assert!((short_time_normal_from_lognormal(1.0, 1.0, 0.2).unwrap() - 0.2).abs() < 1e-16);
        let v = short_time_normal_from_lognormal(1.2, 1.0, 0.2).unwrap();
        assert!((v - 0.2 * 0.2 / 1.2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn short_time_map_skew_and_convexity() {
        // A lognormal smile with skew and curvature around F.
        let f = 1.3;
        let (a, s1, s2) = (0.2, -0.15, 0.4);
        let bs = |k: f64| a + s1 * (k - f) + 0.5 * s2 * (k - f) * (k - f);
        let n = |k: f64| short_time_normal_from_lognormal(k, f, bs(k)).unwrap();
        let h = 1e-4;
        let skew = (n(f + h) - n(f - h)) / (2.0 * h);
        assert!((skew - (0.5 * a + f * s1)).abs() < 1e-7);
        let conv = (n(f + h) - 2.0 * n(f) + n(f - h)) / (h * h);
        assert!((conv - (-a / (6.0 * f) + s1 + f * s2)).abs() < 1e-5, "{conv}");
    }

    #[test]
    fn convex_in_strike() {
        let prices: Vec<f64> =
            (0..200).map(|i| bachelier_call(0.03, 0.0 + i as f64 * 3e-4, 2.0, 0.008).unwrap()).collect();
        for w in prices.windows(3) {
            assert!(w[0] - 2.0 * w[1] + w[2] >= -1e-12);
        }
    }

    proptest! {
        #[test]
        fn inversion_roundtrip(f in 0.001..1.0f64, rel in 0.001..0.5f64, z in -5.0..5.0f64, t in 0.01..30.0f64) {
            let sigma = rel * f;
            let k = f + z * sigma * t.sqrt();
            let p = bachelier_call(f, k, t, sigma).unwrap();
            let iv = implied_normal_vol(p, f, k, t).unwrap();
            // In the money the time value is a small difference of the price
            // and the intrinsic value; allow for that rounding.
            let rounding = 4.0 * f64::EPSILON * p / (bachelier_vega(f, k, t, sigma) * sigma);
            prop_assert!((iv / sigma - 1.0).abs() < 1e-10 + rounding, "iv={} sigma={}", iv, sigma);
        }

        #[test]
        fn price_increases_with_vol(f in 0.001..1.0f64, k in 0.001..1.0f64, s in 0.001..0.1f64) {
            let a = bachelier_call(f, k, 1.0, s).unwrap();
            let b = bachelier_call(f, k, 1.0, s * 1.01).unwrap();
            prop_assert!(b >= a);
            prop_assert!(a >= (f - k).max(0.0));
        }
    }
}

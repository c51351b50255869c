//! Closed-form references: the shifted log-normal model, log-normal with a
//! small drift, the symmetric kinked model and its transition density, and
//! a fit of the ATM vol against `sqrt(T)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::Expansion;
use crate::bachelier::{bachelier_call, black_scholes_call};
use crate::error::{ensure_finite, Error, Result};
use crate::models::{LocalVolModel, MarketSetup};
use crate::pde::{solve_forward, PdeGrid};
use crate::quadrature::{integrate_with_breaks, QuadratureSpec};
use crate::special::{erf, erfc, INV_SQRT_2PI, SQRT_PI_OVER_2};

/// Below this `|b| sqrt(T)` the shifted model is priced as Bachelier.
const SMALL_SKEW: f64 = 1e-8;

/// Driftless call under `sigma_D(S) = sigma0 + 2 b S`.
///
/// `S + sigma0 / 2b` is geometric with volatility `2|b|`; for `b < 0` the
/// call maps to a put on the reflected variable.
pub fn shifted_ln_exact_call(sigma0: f64, b: f64, s0: f64, k: f64, t: f64) -> Result<f64> {
    for (n, v) in [("sigma0", sigma0), ("b", b), ("S0", s0), ("K", k), ("T", t)] {
        ensure_finite(n, v)?;
    }
    if !(t > 0.0) {
        return Err(Error::InvalidParameter("T must be positive".into()));
    }
    let vol0 = sigma0 + 2.0 * b * s0;
    if (b.abs() * t.sqrt()) < SMALL_SKEW {
        return bachelier_call(s0, k, t, vol0);
    }
    let shift = sigma0 / (2.0 * b);
    let (x0, xk) = if b > 0.0 { (s0 + shift, k + shift) } else { (-(s0 + shift), -(k + shift)) };
    if !(x0 > 0.0 && xk > 0.0) {
        return Err(Error::Domain(format!(
            "shifted forward {x0} and strike {xk} must be positive"
        )));
    }
    let c = black_scholes_call(x0, xk, 2.0 * b.abs(), t)?;
    Ok(if b > 0.0 { c } else { c + s0 - k })
}

/// Exact ATM normal vol of the shifted model,
/// `sigma_bar sqrt(pi/2) erf(b sqrt(T/2)) / (b sqrt(T))`, with `sigma_bar = sigma_D(S0)`.
pub fn shifted_ln_atm_vol(sigma_bar: f64, b: f64, t: f64) -> f64 {
    let x = b * t.sqrt();
    if x.abs() < 1e-4 {
        // erf(x/sqrt2) sqrt(pi/2) / x = 1 - x^2/6 + x^4/40 - ...
        let u = x * x;
        return sigma_bar * (1.0 - u / 6.0 + u * u / 40.0);
    }
    sigma_bar * SQRT_PI_OVER_2 * erf(x / std::f64::consts::SQRT_2) / x
}

const ATM_SERIES: [f64; 5] = [1.0, -1.0 / 6.0, 1.0 / 40.0, -1.0 / 336.0, 1.0 / 3456.0];

/// First `n_terms` terms of the ATM vol in powers of `b^2 T`.
pub fn shifted_ln_atm_series(sigma_bar: f64, b: f64, t: f64, n_terms: usize) -> Result<f64> {
    if !(1..=ATM_SERIES.len()).contains(&n_terms) {
        return Err(Error::InvalidParameter(format!("n_terms = {n_terms} must be in 1..=5")));
    }
    let u = b * b * t;
    let sum = ATM_SERIES[..n_terms].iter().rev().fold(0.0, |acc, c| acc * u + c);
    Ok(sigma_bar * sum)
}

/// ATM call of `dx = x dW + mu dt` to first order in `mu`:
/// `x0 erf(sqrt(t) / (2 sqrt2)) + mu t / 2`.
pub fn drifted_ln_atm_call(x0: f64, mu: f64, t: f64) -> Result<f64> {
    if !(x0 > 0.0 && t > 0.0) {
        return Err(Error::InvalidParameter("x0 and t must be positive".into()));
    }
    if !(mu >= 0.0) {
        return Err(Error::InvalidParameter(format!("drift {mu} must be non-negative")));
    }
    Ok(x0 * erf(t.sqrt() / (2.0 * std::f64::consts::SQRT_2)) + 0.5 * mu * t)
}

/// Same approximation for `sigma_D = sigma0 + 2 b S` with drift `mu`.
pub fn shifted_ln_drift_atm_call(sigma0: f64, b: f64, s0: f64, mu: f64, t: f64) -> Result<f64> {
    if b == 0.0 || !(t > 0.0) {
        return Err(Error::InvalidParameter("b must be non-zero and t positive".into()));
    }
    if !(mu >= 0.0) {
        return Err(Error::InvalidParameter(format!("drift {mu} must be non-negative")));
    }
    let vol0 = sigma0 + 2.0 * b * s0;
    Ok(vol0 / (2.0 * b) * erf(b * t.sqrt() / std::f64::consts::SQRT_2) + 0.5 * mu * t)
}

/// The two parts of the ATM vol of `sigma_D = sigma0 + 2 b |S - S0|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinkedAtm {
    /// Contribution of the smooth (log-normal) part.
    pub smooth: f64,
    /// Contribution generated by the kink.
    pub kink: f64,
}

impl KinkedAtm {
    pub fn total(&self) -> f64 {
        self.smooth + self.kink
    }
}

/// ATM normal vol of the symmetric kinked model.
pub fn model2b_atm_parts(sigma0: f64, b: f64, t: f64) -> Result<KinkedAtm> {
    if !(b > 0.0) {
        return Err(Error::InvalidParameter(format!("b = {b} must be positive")));
    }
    if !(sigma0 > 0.0 && t > 0.0) {
        return Err(Error::InvalidParameter("sigma0 and t must be positive".into()));
    }
    let x = b * t.sqrt();
    let e = erf(x / std::f64::consts::SQRT_2);
    let ratio = if x < 1e-4 {
        // erf(x/sqrt2) / x and its small-x expansion
        std::f64::consts::FRAC_2_SQRT_PI / std::f64::consts::SQRT_2 * (1.0 - x * x / 6.0 + x.powi(4) / 40.0)
    } else {
        e / x
    };
    let smooth = sigma0 * SQRT_PI_OVER_2 * ratio;
    let kink = if x < 1e-3 {
        // exp(-u/2)/2 - sqrt(pi/2) erf(x/sqrt2) / 2x cancels to O(u).
        let u = x * x;
        sigma0 * (0.5 * SQRT_PI_OVER_2 * x - u / 6.0 + u * u / 20.0 - u * u * u / 112.0)
            + 0.5 * sigma0 * SQRT_PI_OVER_2 * x * e
    } else {
        0.5 * sigma0 * (-0.5 * x * x).exp() + 0.5 * sigma0 * SQRT_PI_OVER_2 * (x + x * e - ratio)
    };
    Ok(KinkedAtm { smooth, kink })
}

pub fn model2b_atm_exact(sigma0: f64, b: f64, t: f64) -> Result<f64> {
    model2b_atm_parts(sigma0, b, t).map(|p| p.total())
}

/// Transition density from `x >= 0` to `z` after `t` of `dz = dW - b sign(z) dt`.
pub fn model2b_density(z: f64, t: f64, x: f64, b: f64) -> Result<f64> {
    if !(t > 0.0) || !(x >= 0.0) {
        return Err(Error::InvalidParameter("need t > 0 and x >= 0".into()));
    }
    let st = (2.0 * t).sqrt();
    // int_a^inf exp(-(v - bt)^2 / 2t) dv / sqrt(2 pi t) = erfc((a - bt) / sqrt(2t)) / 2
    let p = if z > 0.0 {
        INV_SQRT_2PI / t.sqrt() * (-(x - z - b * t).powi(2) / (2.0 * t)).exp()
            + 0.5 * b * (-2.0 * b * z).exp() * erfc((x + z - b * t) / st)
    } else {
        INV_SQRT_2PI / t.sqrt() * (2.0 * b * x - (x - z + b * t).powi(2) / (2.0 * t)).exp()
            + 0.5 * b * (2.0 * b * z).exp() * erfc((x - z - b * t) / st)
    };
    Ok(p)
}

/// Level `y = S - S0` reached at `z = int_0^y du / sigma_D(u)`.
fn model2b_level(sigma0: f64, b: f64, z: f64) -> f64 {
    let a = 2.0 * b * z.abs();
    z.signum() * sigma0 / (2.0 * b) * a.exp_m1()
}

fn model2b_coordinate(sigma0: f64, b: f64, y: f64) -> f64 {
    y.signum() * (2.0 * b * y.abs() / sigma0).ln_1p() / (2.0 * b)
}

/// Call on the symmetric kinked model at strike offset `y_strike = K - S0`,
/// integrating the payoff against the transition density.
pub fn model2b_density_call(sigma0: f64, b: f64, t: f64, y_strike: f64) -> Result<f64> {
    if !(b > 0.0 && sigma0 > 0.0 && t > 0.0) {
        return Err(Error::InvalidParameter("sigma0, b and t must be positive".into()));
    }
    let zk = model2b_coordinate(sigma0, b, y_strike);
    // The weight y(u) p(u) peaks near u = b t; 14 standard deviations past
    // that leaves < 1e-40 of the mass.
    let upper = zk.max(0.0) + b * t + 14.0 * t.sqrt();
    let spec = QuadratureSpec { rel_tol: 1e-13, abs_tol: 1e-300, ..QuadratureSpec::default() };
    let f = |u: f64| {
        let p = model2b_density(u, t, 0.0, b).unwrap_or(0.0);
        (model2b_level(sigma0, b, u) - y_strike) * p
    };
    integrate_with_breaks(f, zk, upper, &[0.0, b * t], &spec)
}

/// Total probability mass of [`model2b_density`].
pub fn model2b_mass(t: f64, x: f64, b: f64) -> Result<f64> {
    let w = 16.0 * t.sqrt();
    let (lo, hi) = (x.min(0.0) - b * t - w, x.max(0.0) + w);
    let spec = QuadratureSpec { rel_tol: 1e-13, abs_tol: 1e-300, ..QuadratureSpec::default() };
    integrate_with_breaks(|z| model2b_density(z, t, x, b).unwrap_or(0.0), lo, hi, &[0.0, x], &spec)
}

/// ATM deviations of the truncated expansions from the exact vol of the
/// shifted model at one maturity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationRow {
    pub maturity: f64,
    pub b2t: f64,
    pub exact: f64,
    /// `sigma^(n) - sigma_exact` for orders 0, 1, 2.
    pub deviations: [f64; 3],
}

/// Leading, first and second order ATM vols against the exact one for
/// `sigma_D(S) = sigma_bar + 2 b (S - S0)`, with the coefficients computed
/// by the general expansion machinery rather than the closed-form series.
pub fn deviation_table(sigma_bar: f64, b: f64, s0: f64, maturities: &[f64]) -> Result<Vec<DeviationRow>> {
    let model = LocalVolModel::shifted_lognormal(sigma_bar - 2.0 * b * s0, b, s0)?;
    let setup = MarketSetup::driftless(s0);
    let e = Expansion::from_setup(&model, &setup, QuadratureSpec::tight())?;
    let c = e.coefficients(s0)?;
    maturities
        .iter()
        .map(|&t| {
            let exact = shifted_ln_atm_vol(sigma_bar, b, t);
            let v0 = c[0];
            let v1 = v0 + c[1] * t;
            let v2 = v1 + c[2] * t * t;
            Ok(DeviationRow {
                maturity: t,
                b2t: b * b * t,
                exact,
                deviations: [v0 - exact, v1 - exact, v2 - exact],
            })
        })
        .collect()
}

/// Result of fitting `sigma_ATM(T) - sigma_D(F0) ~ c T^p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// `c` with `p` held at 1/2.
    pub coefficient: f64,
    /// `p` fitted freely.
    pub exponent: f64,
    /// Largest relative deviation of the data from `c sqrt(T)`.
    pub residual: f64,
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Analytic,
    SqrtAnomaly,
    Inconclusive,
}

impl FitReport {
    pub fn classification(&self) -> Classification {
        if (0.4..=0.6).contains(&self.exponent) {
            Classification::SqrtAnomaly
        } else if self.exponent >= 0.9 {
            Classification::Analytic
        } else {
            Classification::Inconclusive
        }
    }

    /// One-line human summary.
    pub fn describe(&self) -> String {
        match self.classification() {
            Classification::Analytic => format!("analytic (p≈1), fitted p = {:.4}", self.exponent),
            Classification::SqrtAnomaly => format!(
                "sqrt-T anomaly (p≈1/2, c={:.6e}), fitted p = {:.4}",
                self.coefficient, self.exponent
            ),
            Classification::Inconclusive => format!("inconclusive, fitted p = {:.4}", self.exponent),
        }
    }
}

/// Weighted fit of `log|d|` against `log T` and of `d` against `sqrt(T)`.
pub fn fit_power(ts: &[f64], d: &[f64]) -> Result<FitReport> {
    if ts.len() < 4 || ts.len() != d.len() {
        return Err(Error::InvalidParameter("need at least 4 matching points".into()));
    }
    if ts.windows(2).any(|w| !(w[1] > w[0])) || ts[0] <= 0.0 {
        return Err(Error::InvalidParameter("maturities must be positive and increasing".into()));
    }
    if d.iter().any(|v| *v == 0.0 || !v.is_finite()) {
        return Err(Error::Domain("deviation vanishes; nothing to fit".into()));
    }
    // Points whose deviation is comparable to the oracle's accuracy get
    // little weight in log space.
    let floor = 1e-10;
    let w: Vec<f64> = d.iter().map(|v| (v.abs() / (v.abs() + floor)).powi(2)).collect();
    let xs: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
    let ys: Vec<f64> = d.iter().map(|v| v.abs().ln()).collect();
    let sw: f64 = w.iter().sum();
    let mx = w.iter().zip(&xs).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = w.iter().zip(&ys).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxy: f64 = (0..xs.len()).map(|i| w[i] * (xs[i] - mx) * (ys[i] - my)).sum();
    let sxx: f64 = (0..xs.len()).map(|i| w[i] * (xs[i] - mx).powi(2)).sum();
    let exponent = sxy / sxx;
    // Relative least squares for c: minimise sum ((d - c sqrt T) / d)^2.
    let num: f64 = ts.iter().zip(d).map(|(t, v)| t.sqrt() / v).sum();
    let den: f64 = ts.iter().zip(d).map(|(t, v)| t / (v * v)).sum();
    let coefficient = num / den;
    let residual = ts
        .iter()
        .zip(d)
        .map(|(t, v)| ((v - coefficient * t.sqrt()) / v).abs())
        .fold(0.0, f64::max);
    Ok(FitReport { coefficient, exponent, residual, grid: ts.to_vec() })
}

/// Expected `sqrt(T)` coefficient of the ATM vol when `sigma_D` has a
/// slope jump at `f0`: `(1/8) sqrt(pi/2) sigma_D(f0) [sigma_D'(f0+) - sigma_D'(f0-)]`.
/// Zero for a smooth model.
pub fn kink_sqrt_t_coefficient(model: &LocalVolModel, f0: f64) -> f64 {
    0.125 * SQRT_PI_OVER_2 * model.eval(f0) * model.derivative_jump(f0, 1)
}

/// Geometric grid of `n` maturities from `t_min` to `t_max`.
pub fn geometric_grid(t_min: f64, t_max: f64, n: usize) -> Vec<f64> {
    let r = (t_max / t_min).ln() / (n.max(2) - 1) as f64;
    (0..n).map(|i| if i + 1 == n { t_max } else { t_min * (r * i as f64).exp() }).collect()
}

/// ATM normal vol from one PDE solve per maturity.
pub fn pde_atm_vols(
    model: &LocalVolModel,
    setup: &MarketSetup,
    grid: &PdeGrid,
    ts: &[f64],
) -> Result<Vec<f64>> {
    ts.par_iter()
        .map(|&t| {
            let sol = solve_forward(model, setup, grid, t)?;
            sol.implied_vol_at(setup.forward(t), t)
        })
        .collect()
}

/// Fits the PDE ATM vol minus `sigma_D(F0)` on `ts` to `c T^p`.
pub fn sqrt_t_detector(
    model: &LocalVolModel,
    setup: &MarketSetup,
    grid: &PdeGrid,
    ts: &[f64],
) -> Result<FitReport> {
    if ts.len() < 5 {
        return Err(Error::InvalidParameter("need at least 5 maturities".into()));
    }
    if ts.iter().any(|&t| !(1.0 / 256.0 - 1e-15..=0.25 + 1e-15).contains(&t)) {
        return Err(Error::InvalidParameter("maturities must lie in [1/256, 1/4]".into()));
    }
    let vols = pde_atm_vols(model, setup, grid, ts)?;
    let base = model.eval(setup.s0);
    let d: Vec<f64> = vols.iter().map(|v| v - base).collect();
    fit_power(ts, &d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bachelier::implied_normal_vol;
    use proptest::prelude::*;

    #[test]
    fn shifted_ln_small_skew_is_bachelier() {
        let b0 = bachelier_call(0.03, 0.035, 2.0, 0.01).unwrap();
        let c = shifted_ln_exact_call(0.01 - 2e-7 * 0.03, 1e-7, 0.03, 0.035, 2.0).unwrap();
        assert!((c / b0 - 1.0).abs() < 1e-6);
        let c = shifted_ln_exact_call(0.01, 0.0, 0.03, 0.035, 2.0).unwrap();
        assert_eq!(c, b0);
    }

    #[test]
    fn shifted_ln_atm_identity() {
        for &(b, t) in &[(0.2, 10.0), (0.2, 1.0), (-0.3, 5.0), (0.05, 0.25)] {
            let s0 = 0.03;
            let sigma0 = 0.03 - 2.0 * b * s0;
            let c = shifted_ln_exact_call(sigma0, b, s0, s0, t).unwrap();
            let v = implied_normal_vol(c, s0, s0, t).unwrap();
            let exact = shifted_ln_atm_vol(0.03, b, t);
            assert!((v - exact).abs() < 1e-14, "{b} {t}: {v} {exact}");
        }
        assert!((shifted_ln_atm_vol(0.03, 0.2, 10.0) - 0.028115).abs() < 5e-7);
        assert!(shifted_ln_exact_call(0.03, 0.2, 0.0, -0.2, 1.0).is_err());
    }

    #[test]
    fn negative_skew_respects_parity() {
        // Calls minus puts equal S0 - K; puts via reflection of a positive skew.
        let (s0, k, t) = (0.03, 0.025, 3.0);
        let c = shifted_ln_exact_call(0.05, -0.2, s0, k, t).unwrap();
        let mirror = shifted_ln_exact_call(0.05, 0.2, -s0, -k, t).unwrap();
        assert!((c - (mirror + s0 - k)).abs() < 1e-16);
    }

    #[test]
    fn atm_series_coefficients() {
        assert_eq!(shifted_ln_atm_series(0.03, 0.2, 10.0, 1).unwrap(), 0.03);
        let b: f64 = 0.4f64.sqrt();
        let v = shifted_ln_atm_series(0.03, b, 1.0, 3).unwrap();
        assert!((v - 0.03 * (1.0 - 0.4 / 6.0 + 0.16 / 40.0)).abs() < 1e-17);
        assert!(shifted_ln_atm_series(0.03, b, 1.0, 0).is_err());
        assert!(shifted_ln_atm_series(0.03, b, 1.0, 6).is_err());
    }

    #[test]
    fn atm_series_truncation_order() {
        let b = 1.0;
        let ts = [1.0 / 64.0, 1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0];
        for n in 1..=4 {
            let e: Vec<f64> = ts
                .iter()
                .map(|&t| (shifted_ln_atm_series(0.03, b, t, n).unwrap() - shifted_ln_atm_vol(0.03, b, t)).abs())
                .collect();
            let slope = (e[4] / e[0]).ln() / (ts[4] / ts[0]).ln();
            assert!(slope >= n as f64 - 0.2, "n={n} slope={slope}");
        }
    }

    #[test]
    fn drifted_log_normal() {
        let c0 = drifted_ln_atm_call(1.0, 0.0, 0.25).unwrap();
        assert!((c0 - erf(0.5 / (2.0 * std::f64::consts::SQRT_2))).abs() < 1e-16);
        let c1 = drifted_ln_atm_call(1.0, 0.002, 0.25).unwrap();
        assert!(((c1 - c0) / 0.002 - 0.125).abs() < 1e-12);
        assert!(drifted_ln_atm_call(1.0, -0.001, 0.25).is_err());
        // small-t series x0 sqrt(t / 2 pi) (1 - t/24 + t^2/640)
        let t = 0.01;
        let c = drifted_ln_atm_call(2.0, 0.0, t).unwrap();
        let s = 2.0 * (t / (2.0 * std::f64::consts::PI)).sqrt() * (1.0 - t / 24.0 + t * t / 640.0);
        assert!((c / s - 1.0).abs() < 1e-9);
        // the shifted form with sigma0 = 0, b = 1/2 is the same model
        let m = shifted_ln_drift_atm_call(0.0, 0.5, 2.0, 0.001, 1.0).unwrap();
        assert!((m - drifted_ln_atm_call(2.0, 0.001, 1.0).unwrap()).abs() < 1e-16);
    }

    #[test]
    fn kinked_atm_values() {
        // mpmath, 30 digits
        let v = model2b_atm_exact(0.008, 0.1, 10.0).unwrap();
        assert!((v - 0.009718002314_7).abs() < 1e-13, "{v}");
        assert!((model2b_atm_exact(0.008, 0.1, 0.25).unwrap() - 0.008253995744).abs() < 1e-12);
        assert!((model2b_atm_exact(0.008, 0.1, 1.0).unwrap() - 0.008514652326).abs() < 1e-12);
        assert!(model2b_atm_exact(0.008, 0.0, 1.0).is_err());
        // the series branches join the direct formulas continuously
        for x in [1e-3, 1e-4] {
            let p = model2b_atm_parts(1.0, x * (1.0 - 1e-12), 1.0).unwrap();
            let q = model2b_atm_parts(1.0, x * (1.0 + 1e-12), 1.0).unwrap();
            assert!((p.smooth - q.smooth).abs() < 1e-14, "{x}");
            assert!((p.kink - q.kink).abs() < 1e-12, "{x}: {p:?} {q:?}");
        }
        let tiny = model2b_atm_parts(0.008, 0.1, 1e-10).unwrap();
        assert!((tiny.total() / 0.008 - 1.0).abs() < 1e-5);
        // small-t expansion of the kink part
        for t in [1e-2, 1e-4, 1e-8] {
            let k = model2b_atm_parts(0.008, 0.1, t).unwrap().kink;
            let u: f64 = 0.01 * t;
            let series = 0.008 * (0.5 * SQRT_PI_OVER_2 * u.sqrt() + u / 3.0 - u * u / 30.0);
            assert!((k / series - 1.0).abs() < 1e-7, "{t}: {k} {series}");
        }
    }

    #[test]
    fn density_reduces_to_gaussian() {
        for &(z, x) in &[(0.3, 0.1), (-0.5, 0.2), (1.0, 0.0)] {
            let p = model2b_density(z, 2.0, x, 0.0).unwrap();
            let g = INV_SQRT_2PI / 2f64.sqrt() * (-(x - z).powi(2) / 4.0).exp();
            assert!((p - g).abs() < 1e-16);
        }
    }

    #[test]
    fn density_call_matches_closed_form() {
        for &t in &[0.25, 1.0, 10.0] {
            let c = model2b_density_call(0.008, 0.1, t, 0.0).unwrap();
            let v = c * (2.0 * std::f64::consts::PI / t).sqrt();
            let e = model2b_atm_exact(0.008, 0.1, t).unwrap();
            assert!((v / e - 1.0).abs() < 1e-9, "{t}: {v} {e}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn density_has_unit_mass(t in 0.1f64..30.0, x in 0.0f64..2.0, b in 0.01f64..0.5) {
            let m = model2b_mass(t, x, b).unwrap();
            prop_assert!((m - 1.0).abs() < 1e-8, "{}", m);
        }
    }

    #[test]
    fn deviation_table_cells() {
        let rows = deviation_table(0.03, 0.2, 0.03, &[1.0, 10.0, 30.0]).unwrap();
        let pct = |v: f64| (v * 1e6).round() / 1e4;
        assert_eq!(rows[0].deviations.map(pct), [0.0199, -0.0001, 0.0]);
        assert_eq!(rows[1].deviations.map(pct), [0.1885, -0.0115, 0.0005]);
        assert_eq!(rows[2].deviations.map(pct), [0.5058, -0.0942, 0.0138]);
        let flat = deviation_table(0.03, 0.0, 0.03, &[30.0]).unwrap();
        assert!(flat[0].deviations.iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn kink_coefficient() {
        let sym = LocalVolModel::piecewise_linear(0.008, -0.1, 0.1, 0.03).unwrap();
        let c = kink_sqrt_t_coefficient(&sym, 0.03);
        assert!((c - 0.5 * SQRT_PI_OVER_2 * 0.008 * 0.1).abs() < 1e-18);
        let one = LocalVolModel::piecewise_linear(0.008, 0.0, 0.1, 0.03).unwrap();
        assert!((kink_sqrt_t_coefficient(&one, 0.03) - 0.5 * c).abs() < 1e-18);
        let smooth = LocalVolModel::quadratic_sabr(0.008, 0.3, 0.1, 0.03).unwrap();
        assert_eq!(kink_sqrt_t_coefficient(&smooth, 0.03), 0.0);
    }

    #[test]
    fn fit_recovers_power_laws() {
        let ts = geometric_grid(1.0 / 256.0, 0.25, 7);
        assert_eq!(ts.len(), 7);
        assert_eq!(ts[6], 0.25);
        let d: Vec<f64> = ts.iter().map(|t| 3e-4 * t.sqrt()).collect();
        let r = fit_power(&ts, &d).unwrap();
        assert!((r.exponent - 0.5).abs() < 1e-12);
        assert!((r.coefficient - 3e-4).abs() < 1e-16);
        assert_eq!(r.classification(), Classification::SqrtAnomaly);
        let d: Vec<f64> = ts.iter().map(|t| -2e-4 * t).collect();
        let r = fit_power(&ts, &d).unwrap();
        assert_eq!(r.classification(), Classification::Analytic);
        let json = serde_json::to_value(&r).unwrap();
        for key in ["coefficient", "exponent", "residual", "grid"] {
            assert!(json.get(key).is_some());
        }
        assert!(fit_power(&ts[..3], &d[..3]).is_err());
    }
}

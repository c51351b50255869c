//! Small-maturity expansion of the normal implied vol at fixed strike,
//! `sigma_N(K, T) = sigma_0(K) + sigma_1(K) T + sigma_2(K) T^2`.
//!
//! Everything is expressed in the offset `y = K - F0` from the spot forward.
//! The closed forms for the coefficients have removable singularities at
//! `y = 0`; inside a small radius (a fraction of the local-vol length scale)
//! they are replaced by Taylor series built from the derivatives of
//! `sigma_D` at `F0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{LocalVolModel, MarketSetup, Side};
use crate::quadrature::{integrate_with_breaks, QuadratureSpec};
use crate::smile::{OrderTag, SmileFlag, SmilePoint};

const GL_X: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329_0,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL_W: [f64; 4] = [
    0.362_683_783_378_362_0,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

/// Eight-point Gauss-Legendre rule on `[a, b]`.
fn gl8<F: FnMut(f64) -> f64>(a: f64, b: f64, mut f: F) -> f64 {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut acc = 0.0;
    for i in 0..4 {
        acc += GL_W[i] * (f(c - h * GL_X[i]) + f(c + h * GL_X[i]));
    }
    acc * h
}

/// Largest panel, in units of the local-vol length scale, used by the
/// composite rules below.
const PANEL_FRACTION: f64 = 0.2;
const MAX_PANELS: usize = 4096;

/// Taylor data of the coefficients at `y = 0` from one side.
#[derive(Debug, Clone, Copy, PartialEq)]
struct AtmData {
    /// `sigma_0, sigma_0', sigma_0'', sigma_0'''`
    s0: [f64; 4],
    /// `sigma_1, sigma_1', sigma_1''`
    s1: [f64; 3],
    s2: f64,
    /// Switch radius in `y`.
    radius: f64,
}

/// Derivatives of `sigma_0` at `F0` from the derivatives `a` of `sigma_D`.
fn sigma0_series(a: &[f64; 5]) -> [f64; 4] {
    [
        a[0],
        0.5 * a[1],
        a[2] / 3.0 - a[1] * a[1] / (6.0 * a[0]),
        0.25 * a[3] - a[1] * a[2] / (2.0 * a[0]) + a[1].powi(3) / (4.0 * a[0] * a[0]),
    ]
}

/// `sigma_1, sigma_1', sigma_1''` at `F0`.
fn sigma1_series(a: &[f64; 5], mu0: f64) -> [f64; 3] {
    let [a0, a1, a2, a3, a4] = *a;
    [
        a0 * (2.0 * a0 * a2 - a1 * a1) / 24.0,
        (a0 * a0 * a3 + a0 * a1 * a2 - 0.5 * a1.powi(3)) / 24.0 + mu0 * a1 * a1 / (12.0 * a0),
        a0 * a0 * a4 / 40.0 + a0 * a1 * a3 / 20.0 + 11.0 * a0 * a2 * a2 / 360.0
            - 11.0 * a1 * a1 * a2 / 360.0
            + 11.0 * a1.powi(4) / (1440.0 * a0)
            + mu0 * (a1 * a2 / (6.0 * a0) - a1.powi(3) / (12.0 * a0 * a0)),
    ]
}

/// `sigma_2` at `F0`.
fn sigma2_atm_value(a: &[f64; 5], mu0: f64, mu1: f64) -> f64 {
    let [a0, a1, a2, a3, a4] = *a;
    a0.powi(4) * a4 / 240.0 + a0.powi(3) * a1 * a3 / 120.0 + a0.powi(3) * a2 * a2 / 160.0
        - a0 * a0 * a1 * a1 * a2 / 160.0
        + a0 * a1.powi(4) / 640.0
        - a1 * mu1 / 12.0
        + a1 * a1 * mu0 * mu0 / (24.0 * a0)
}

/// Inhomogeneous term of the second-order equation.
///
/// `s0 = [sigma_0, sigma_0', sigma_0'']`, `s1` likewise for `sigma_1`.
fn second_order_source(s0: [f64; 3], s1: [f64; 3], y: f64, mu0: f64, mu1: f64) -> f64 {
    let [v0, d0, dd0] = s0;
    let [v1, d1, dd1] = s1;
    let n = 1.0 - y * d0 / v0;
    let n2 = n * n;
    let r = v1 / v0;
    let q = (d1 * v0 - v1 * d0) / (v0 * v0);
    let p = d0 / v0;
    let a = -2.0 * n * y * q + v0 * dd0;
    let driftless = 3.0 * r * r - 4.0 / n2 * r * a + a * a / (n2 * n2)
        - ((y * q).powi(2) + 2.0 * n * y * r * q + v1 * dd0 + v0 * dd1) / n2;
    let drift1 = mu1 * p * (2.0 - 1.0 / n);
    let drift0 = 2.0
        * mu0
        * p
        * (q * y * (n - 3.0) / n2 + v0 * dd0 * (2.0 - n) / (n2 * n) - 2.0 * r * (2.0 - n) / n);
    let drift00 = mu0 * mu0 * p * p * (3.0 - 4.0 * n) / n2;
    driftless + drift1 + drift0 + drift00
}

/// Values and first two derivatives of `sigma_0` and `sigma_1` at one strike.
#[derive(Debug, Clone, Copy)]
struct Local {
    sd: f64,
    s0: [f64; 3],
    s1: [f64; 3],
}

/// Expansion coefficients of one model around one spot forward.
///
/// The strike-dependent coefficients are evaluated with composite
/// Gauss-Legendre sweeps from `F0` to `K` that carry the inner integrals
/// along, so the nested integrals never need an adaptive inner solve.
#[derive(Debug, Clone)]
pub struct Expansion<'a> {
    model: &'a LocalVolModel,
    f0: f64,
    mu0: f64,
    mu1: f64,
    left: AtmData,
    right: AtmData,
}

impl<'a> Expansion<'a> {
    pub fn new(model: &'a LocalVolModel, f0: f64, mu0: f64, mu1: f64, spec: QuadratureSpec) -> Result<Self> {
        spec.validate()?;
        model.check_interval(f0, f0)?;
        let side = |side: Side| {
            let a = model.derivatives(f0, side);
            AtmData {
                s0: sigma0_series(&a),
                s1: sigma1_series(&a, mu0),
                s2: sigma2_atm_value(&a, mu0, mu1),
                radius: spec.atm_switch_radius * model.length_scale(f0, side),
            }
        };
        Ok(Self { model, f0, mu0, mu1, left: side(Side::Left), right: side(Side::Right) })
    }

    pub fn from_setup(model: &'a LocalVolModel, setup: &MarketSetup, spec: QuadratureSpec) -> Result<Self> {
        Self::new(model, setup.s0, setup.mu0, setup.mu1, spec)
    }

    pub fn forward(&self) -> f64 {
        self.f0
    }

    /// False when `sigma_D` is not smooth at `F0`; the integer-power
    /// expansion then misses a `sqrt(T)` term.
    pub fn is_reliable(&self) -> bool {
        !self.model.breakpoints().contains(&self.f0)
    }

    fn atm(&self, y: f64) -> &AtmData {
        if y < 0.0 {
            &self.left
        } else {
            &self.right
        }
    }

    pub fn sigma0(&self, k: f64) -> Result<f64> {
        let y = k - self.f0;
        let d = self.atm(y);
        if y.abs() < d.radius {
            return Ok(taylor(&d.s0, y));
        }
        let (z, _, _) = self.sweep(k, false, false)?;
        Ok(y / z)
    }

    pub fn sigma1(&self, k: f64) -> Result<f64> {
        let y = k - self.f0;
        let d = self.atm(y);
        if y.abs() < d.radius {
            return Ok(taylor(&d.s1, y));
        }
        let (z, i2, _) = self.sweep(k, true, false)?;
        Ok(self.local(k, z, i2).s1[0])
    }

    pub fn sigma2(&self, k: f64) -> Result<f64> {
        let y = k - self.f0;
        if y == 0.0 {
            return Ok(self.right.s2);
        }
        let (z, _, j) = self.sweep(k, true, true)?;
        let s0 = y / z;
        Ok(-s0.powi(4) / y.powi(3) * j)
    }

    /// `[sigma_0, sigma_1, sigma_2]` at `k` from a single sweep.
    pub fn coefficients(&self, k: f64) -> Result<[f64; 3]> {
        let y = k - self.f0;
        let d = self.atm(y);
        if y == 0.0 {
            return Ok([d.s0[0], d.s1[0], d.s2]);
        }
        let (z, i2, j) = self.sweep(k, true, true)?;
        let s0 = y / z;
        let s2 = -s0.powi(4) / y.powi(3) * j;
        if y.abs() < d.radius {
            return Ok([taylor(&d.s0, y), taylor(&d.s1, y), s2]);
        }
        let loc = self.local(k, z, i2);
        Ok([loc.s0[0], loc.s1[0], s2])
    }

    /// Truncated expansion at fixed strike `k` and maturity `t`.
    pub fn smile(&self, k: f64, t: f64, order: usize) -> Result<f64> {
        if order > 2 {
            return Err(Error::InvalidParameter(format!("expansion order {order} is not available")));
        }
        if t < 0.0 || !t.is_finite() {
            return Err(Error::InvalidParameter(format!("maturity must be non-negative, got {t}")));
        }
        let c = match order {
            0 => [self.sigma0(k)?, 0.0, 0.0],
            1 => [self.sigma0(k)?, self.sigma1(k)?, 0.0],
            _ => self.coefficients(k)?,
        };
        Ok(c[0] + t * (c[1] + t * c[2]))
    }

    /// One-sided limits `(sigma_1(F0-), sigma_1(F0+))`.
    pub fn sigma1_limits(&self) -> (f64, f64) {
        (self.left.s1[0], self.right.s1[0])
    }

    pub fn sigma0_atm(&self) -> [f64; 4] {
        self.right.s0
    }

    pub fn sigma1_atm(&self) -> [f64; 3] {
        self.right.s1
    }

    pub fn sigma2_atm(&self) -> f64 {
        self.right.s2
    }

    /// Panel boundaries from `F0` to `k`, respecting smoothness breaks.
    fn panels(&self, k: f64) -> Vec<f64> {
        let (f0, model) = (self.f0, self.model);
        let (lo, hi) = (f0.min(k), f0.max(k));
        let mut cuts: Vec<f64> =
            model.smoothness_breaks().into_iter().filter(|&b| b > lo && b < hi).collect();
        cuts.push(f0);
        cuts.push(k);
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if k < f0 {
            cuts.reverse();
        }
        let mut out = vec![f0];
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (sa, sb) = if b > a { (Side::Right, Side::Left) } else { (Side::Left, Side::Right) };
            let ell = model.length_scale(a, sa).min(model.length_scale(b, sb));
            let m = ((b - a).abs() / (PANEL_FRACTION * ell)).ceil();
            let m = if m.is_finite() { (m as usize).clamp(2, MAX_PANELS) } else { 2 };
            for i in 1..=m {
                out.push(if i == m { b } else { a + (b - a) * i as f64 / m as f64 });
            }
        }
        out
    }

    /// Integrates from `F0` to `k`, returning the BBF integral
    /// `int dL / sigma_D`, the drift integral `int (1/sigma_0 - 1/sigma_D)^2`
    /// and the second-order integral `int z^2 H_2 / (2 sigma_D sigma_0^2)`.
    fn sweep(&self, k: f64, drift: bool, second: bool) -> Result<(f64, f64, f64)> {
        self.model.check_interval(self.f0, k)?;
        let model = self.model;
        let inv = |s: f64| 1.0 / model.eval(s);
        let need_i2 = second || (drift && self.mu0 != 0.0);
        let pts = self.panels(k);
        let (mut z, mut i2, mut j) = (0.0, 0.0, 0.0);
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (za, ia) = (z, i2);
            let zat = |s: f64| za + gl8(a, s, inv);
            let wsq = |s: f64| {
                let y = s - self.f0;
                let s0 = self.sigma0_local(y, zat(s));
                let r = 1.0 / s0 - inv(s);
                r * r
            };
            if need_i2 {
                i2 = ia + gl8(a, b, wsq);
            }
            if second {
                j += gl8(a, b, |s| {
                    let zs = zat(s);
                    let is = if need_i2 { ia + gl8(a, s, wsq) } else { 0.0 };
                    let loc = self.local(s, zs, is);
                    let y = s - self.f0;
                    let h2 = second_order_source(loc.s0, loc.s1, y, self.mu0, self.mu1);
                    y * y * h2 / (2.0 * loc.sd * loc.s0[0] * loc.s0[0])
                });
            }
            z = za + gl8(a, b, inv);
        }
        if !(z.is_finite() && i2.is_finite() && j.is_finite()) {
            return Err(Error::Domain(format!("non-finite expansion integrals for K={k}")));
        }
        Ok((z, i2, j))
    }

    fn sigma0_local(&self, y: f64, zint: f64) -> f64 {
        let d = self.atm(y);
        if y.abs() < d.radius {
            taylor(&d.s0, y)
        } else {
            y / zint
        }
    }

    /// Values and derivatives at level `s` given the BBF and drift
    /// integrals from `F0` to `s`.
    fn local(&self, s: f64, zint: f64, i2: f64) -> Local {
        let y = s - self.f0;
        let side = if y < 0.0 { Side::Left } else { Side::Right };
        let dd = self.model.derivatives(s, side);
        let d = self.atm(y);
        if y.abs() < d.radius {
            let s0 = [taylor(&d.s0, y), taylor(&d.s0[1..], y), taylor(&d.s0[2..], y)];
            let s1 = [taylor(&d.s1, y), taylor(&d.s1[1..], y), d.s1[2]];
            return Local { sd: dd[0], s0, s1 };
        }
        let [sd, sd1, sd2, _, _] = dd;
        let sd_atm = d.s0[0];
        let v0 = y / zint;
        let ratio = v0 / sd;
        let d0 = v0 / y * (1.0 - ratio);
        let dd0 = 2.0 * v0 * v0 / (sd * y * y) * (ratio - 1.0) + sd1 * v0 * v0 / (sd * sd * y);

        let log_term = ratio.ln() + (v0 / sd_atm).ln();
        let w = 1.0 / v0 - 1.0 / sd;
        let q = -0.5 * log_term + self.mu0 * i2;
        let dlog = 2.0 * d0 / v0 - sd1 / sd;
        let dq = -0.5 * dlog + self.mu0 * w * w;
        let ddlog = 2.0 * dd0 / v0 - 2.0 * d0 * d0 / (v0 * v0) - sd2 / sd + sd1 * sd1 / (sd * sd);
        let dw = -d0 / (v0 * v0) + sd1 / (sd * sd);
        let ddq = -0.5 * ddlog + 2.0 * self.mu0 * w * dw;

        let (a, da, dda) = (v0.powi(3), 3.0 * v0 * v0 * d0, 6.0 * v0 * d0 * d0 + 3.0 * v0 * v0 * dd0);
        let y2 = y * y;
        let b = q / y2;
        let db = dq / y2 - 2.0 * q / (y2 * y);
        let ddb = ddq / y2 - 4.0 * dq / (y2 * y) + 6.0 * q / (y2 * y2);
        Local {
            sd,
            s0: [v0, d0, dd0],
            s1: [a * b, da * b + a * db, dda * b + 2.0 * da * db + a * ddb],
        }
    }
}

/// Evaluates `sum_k c[k] y^k / k!`.
fn taylor(c: &[f64], y: f64) -> f64 {
    let mut acc = 0.0;
    let mut term = 1.0;
    for (k, ck) in c.iter().enumerate() {
        if k > 0 {
            term *= y / k as f64;
        }
        acc += ck * term;
    }
    acc
}

/// Leading-order vol: `(K - F0) / int_{F0}^{K} dL / sigma_D(L)`, with the
/// integral taken by adaptive quadrature at the tolerances in `spec`.
pub fn sigma0(model: &LocalVolModel, f0: f64, k: f64, spec: &QuadratureSpec) -> Result<f64> {
    spec.validate()?;
    model.check_interval(f0, k)?;
    let y = k - f0;
    let side = if y < 0.0 { Side::Left } else { Side::Right };
    let radius = spec.atm_switch_radius * model.length_scale(f0, side);
    if y.abs() < radius {
        let a = model.derivatives(f0, side);
        return Ok(taylor(&sigma0_series(&a), y));
    }
    let breaks = model.smoothness_breaks();
    let z = integrate_with_breaks(|s| 1.0 / model.eval(s), f0, k, &breaks, spec)?;
    Ok(y / z)
}

/// `[sigma_0, sigma_0', sigma_0'', sigma_0''']` at `F0`.
pub fn sigma0_series_atm(model: &LocalVolModel, f0: f64) -> Result<[f64; 4]> {
    if model.breakpoints().contains(&f0) {
        return Err(Error::Breakpoint(f0));
    }
    model.check_interval(f0, f0)?;
    Ok(sigma0_series(&model.derivatives(f0, Side::Right)))
}

pub fn sigma1(model: &LocalVolModel, f0: f64, mu0: f64, k: f64, spec: &QuadratureSpec) -> Result<f64> {
    Expansion::new(model, f0, mu0, 0.0, *spec)?.sigma1(k)
}

pub fn sigma2(
    model: &LocalVolModel,
    f0: f64,
    mu0: f64,
    mu1: f64,
    k: f64,
    spec: &QuadratureSpec,
) -> Result<f64> {
    Expansion::new(model, f0, mu0, mu1, *spec)?.sigma2(k)
}

/// Truncated expansion for a market setup at strike `k` and maturity `t`.
pub fn smile(
    model: &LocalVolModel,
    setup: &MarketSetup,
    k: f64,
    t: f64,
    order: usize,
    spec: &QuadratureSpec,
) -> Result<SmilePoint> {
    let e = Expansion::from_setup(model, setup, *spec)?;
    let sigma_n = e.smile(k, t, order)?;
    let tag = OrderTag::from_order(order).expect("order checked by Expansion::smile");
    let flag = if e.is_reliable() { SmileFlag::Ok } else { SmileFlag::LowConfidence };
    Ok(SmilePoint { strike: k, maturity: t, sigma_n, order: tag, flag })
}

/// Difference of the one-sided limits of `sigma_1` across `F0`; zero when
/// `sigma_D` is smooth there.
pub fn sigma1_jump(model: &LocalVolModel, f0: f64) -> f64 {
    if !model.breakpoints().contains(&f0) {
        return 0.0;
    }
    let r = sigma1_series(&model.derivatives(f0, Side::Right), 0.0);
    let l = sigma1_series(&model.derivatives(f0, Side::Left), 0.0);
    r[0] - l[0]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MidpointApprox {
    pub value: f64,
    /// `(1/24) y^2 sigma_D(m)^2 |(1/sigma_D)''(m)|`, with the second
    /// derivative taken at the midpoint `m` itself.
    pub error_bound: f64,
}

/// `sigma_D` at the midpoint of `F0` and `K`.
pub fn midpoint_approx(model: &LocalVolModel, f0: f64, k: f64) -> Result<MidpointApprox> {
    let m = 0.5 * (f0 + k);
    model.check_interval(m, m)?;
    let [v, d1, d2, _, _] = model.derivatives(m, Side::Right);
    let inv2 = (2.0 * d1 * d1 - v * d2) / v.powi(3);
    let y = k - f0;
    Ok(MidpointApprox { value: v, error_bound: y * y * v * v * inv2.abs() / 24.0 })
}

/// ATM value and derivatives of one expansion order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionCoeffs {
    pub order: usize,
    pub atm_value: f64,
    /// First and higher derivatives in `K` at `F0`, where available.
    pub atm_derivatives: Vec<f64>,
}

pub fn expansion_coeffs(
    model: &LocalVolModel,
    setup: &MarketSetup,
    order: usize,
) -> Result<ExpansionCoeffs> {
    if model.breakpoints().contains(&setup.s0) {
        return Err(Error::Breakpoint(setup.s0));
    }
    let e = Expansion::from_setup(model, setup, QuadratureSpec::default())?;
    let (atm_value, atm_derivatives) = match order {
        0 => (e.right.s0[0], e.right.s0[1..].to_vec()),
        1 => (e.right.s1[0], e.right.s1[1..].to_vec()),
        2 => (e.right.s2, Vec::new()),
        _ => return Err(Error::InvalidParameter(format!("expansion order {order} is not available"))),
    };
    Ok(ExpansionCoeffs { order, atm_value, atm_derivatives })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> QuadratureSpec {
        QuadratureSpec::tight()
    }

    fn sabr_closed_form(sigma0: f64, gamma: f64, rho: f64, y: f64) -> f64 {
        // Leading order for sqrt(s^2 - 2 rho g s y + g^2 y^2).
        let x = gamma * y / sigma0;
        let d = (((1.0 - 2.0 * rho * x + x * x).sqrt() + x - rho) / (1.0 - rho)).ln();
        gamma * y / d
    }

    #[test]
    fn source_term_matches_symbolic_reference() {
        // Symbolic expansion of the local-vol identity evaluated at rational
        // inputs with mpmath.
        let h = second_order_source([0.013, 0.09, -0.7], [-3e-5, -4e-4, 2e-3], 0.01, 2e-3, -5e-4);
        assert!((h / -0.003_570_930_121_963_889 - 1.0).abs() < 1e-13, "{h}");
    }

    #[test]
    fn atm_sigma2_agrees_with_general_atm_relation() {
        let a = [0.013, 0.09, -0.7, 3.1, -40.0];
        let (m0, m1) = (0.002, -0.0005);
        let s0 = sigma0_series(&a);
        let s1 = sigma1_series(&a, m0);
        let h = second_order_source([s0[0], s0[1], s0[2]], s1, 0.0, m0, m1);
        let from_relation = -s0[0] * h / 6.0;
        assert!((sigma2_atm_value(&a, m0, m1) / from_relation - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_vol_has_no_corrections() {
        let m = LocalVolModel::shifted_lognormal(0.01, 0.0, 0.03).unwrap();
        let e = Expansion::new(&m, 0.03, 0.0, 0.0, spec()).unwrap();
        for k in [0.0, 0.02, 0.03, 0.05] {
            assert!((e.sigma0(k).unwrap() - 0.01).abs() < 1e-17);
            assert!(e.sigma1(k).unwrap().abs() < 1e-18);
            assert!(e.sigma2(k).unwrap().abs() < 1e-18);
        }
        assert!((sigma0(&m, 0.03, 0.05, &spec()).unwrap() - 0.01).abs() < 1e-17);
    }

    #[test]
    fn shifted_lognormal_closed_forms() {
        let m = LocalVolModel::shifted_lognormal(0.008, 0.1, 0.03).unwrap();
        let s = sigma0(&m, 0.03, 0.04, &QuadratureSpec::default()).unwrap();
        let exact = 0.002 / (0.016f64 / 0.014).ln();
        assert!((s / exact - 1.0).abs() < 1e-9);
        assert!((exact - 0.014_977_7).abs() < 1e-7);

        let bar = 0.014;
        let e = Expansion::new(&m, 0.03, 0.0, 0.0, spec()).unwrap();
        assert!((e.sigma1(0.03).unwrap() + 0.01 * bar / 6.0).abs() < 1e-18);
        assert!((e.sigma2(0.03).unwrap() - bar * 1e-4 / 40.0).abs() < 1e-20);
        let ser = sigma0_series_atm(&m, 0.03).unwrap();
        assert!((ser[1] - 0.1).abs() < 1e-16);
        assert!((ser[2] + 2.0 * 0.01 / (3.0 * bar)).abs() < 1e-14);
    }

    #[test]
    fn sigma0_quadrature_matches_closed_forms() {
        let sl = LocalVolModel::shifted_lognormal(0.008, 0.1, 0.03).unwrap();
        let sabr = LocalVolModel::quadratic_sabr(0.008, 0.2, 0.3, 0.03).unwrap();
        let q = QuadratureSpec::default();
        for i in 0..25 {
            let k = 0.005 + i as f64 * 0.002;
            let y = k - 0.03;
            let exact_sl = if y == 0.0 { 0.014 } else { 0.2 * y / ((0.008 + 0.2 * k) / 0.014f64).ln() };
            let got = sigma0(&sl, 0.03, k, &q).unwrap();
            assert!((got / exact_sl - 1.0).abs() < 10.0 * q.rel_tol, "k={k}");
            let exact_sabr = if y == 0.0 { 0.008 } else { sabr_closed_form(0.008, 0.2, 0.3, y) };
            let got = sigma0(&sabr, 0.03, k, &q).unwrap();
            assert!((got / exact_sabr - 1.0).abs() < 10.0 * q.rel_tol, "k={k}");
            let swept = Expansion::new(&sabr, 0.03, 0.0, 0.0, spec()).unwrap().sigma0(k).unwrap();
            assert!((swept / exact_sabr - 1.0).abs() < 1e-13, "k={k}");
        }
    }

    #[test]
    fn sabr_atm_skew_vanishes_for_zero_correlation() {
        let m = LocalVolModel::quadratic_sabr(0.008, 0.2, 0.0, 0.03).unwrap();
        assert_eq!(sigma0_series_atm(&m, 0.03).unwrap()[1], 0.0);
    }

    #[test]
    fn breakpoint_rejected_by_atm_series() {
        let m = LocalVolModel::piecewise_linear(0.008, -0.1, 0.1, 0.03).unwrap();
        assert_eq!(sigma0_series_atm(&m, 0.03), Err(Error::Breakpoint(0.03)));
    }

    #[test]
    fn shifted_lognormal_series_in_strike() {
        // sigma_1(y) = -b^2 s/6 + mu0 b^2 y / (3 s) + O(y^2) and
        // sigma_0(y) = s + b y - b^2 y^2 / (3 s) + O(y^3).
        let (b, bar) = (0.1, 0.014);
        let m = LocalVolModel::shifted_lognormal(0.008, b, 0.03).unwrap();
        let mu0 = 0.003;
        let e0 = Expansion::new(&m, 0.03, 0.0, 0.0, spec()).unwrap();
        let e1 = Expansion::new(&m, 0.03, mu0, 0.0, spec()).unwrap();
        let h = 1e-4;
        let slope = (e1.sigma1(0.03 + h).unwrap() - e1.sigma1(0.03 - h).unwrap()
            - e0.sigma1(0.03 + h).unwrap()
            + e0.sigma1(0.03 - h).unwrap())
            / (2.0 * h);
        assert!((slope / (mu0 * b * b / (3.0 * bar)) - 1.0).abs() < 1e-5, "{slope}");
    }

    #[test]
    fn closed_forms_and_taylor_agree_across_the_switch() {
        let models = [
            LocalVolModel::shifted_lognormal(0.008, 0.1, 0.03).unwrap(),
            LocalVolModel::quadratic_sabr(0.008, 0.5, -0.3, 0.03).unwrap(),
            LocalVolModel::quadratic_sabr(0.01, 1.0, 0.4, 0.03).unwrap(),
        ];
        for m in &models {
            let e = Expansion::new(m, 0.03, 0.002, 0.001, spec()).unwrap();
            for sign in [-1.0, 1.0] {
                let r = e.atm(sign).radius;
                let inside = 0.03 + sign * r * (1.0 - 1e-12);
                let outside = 0.03 + sign * r * (1.0 + 1e-12);
                let (a, b) = (e.sigma1(inside).unwrap(), e.sigma1(outside).unwrap());
                assert!((a - b).abs() < 1e-7 * a.abs().max(1e-9), "{a} {b}");
                let la = e.local(inside, 0.0, 0.0);
                let (z, i2, _) = e.sweep(outside, true, false).unwrap();
                let lb = e.local(outside, z, i2);
                // Taylor truncation: sigma_0'' and sigma_1'' drop O(u^2) and
                // O(u) terms, u being the switch radius in length-scale units.
                // For some of these parameters the drift and driftless parts of
                // sigma_1'' nearly cancel, which inflates the relative gap.
                let tol0 = [1e-9, 1e-6, 2e-5];
                let tol1 = [1e-7, 3e-5, 0.1];
                for k in 0..3 {
                    assert!((la.s0[k] - lb.s0[k]).abs() < tol0[k] * la.s0[k].abs().max(1e-6), "k={k}");
                    assert!((la.s1[k] - lb.s1[k]).abs() < tol1[k] * la.s1[k].abs().max(1e-6), "k={k}");
                }
            }
        }
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let m = LocalVolModel::quadratic_sabr(0.01, 1.0, 0.4, 0.03).unwrap();
        let e = Expansion::new(&m, 0.03, 0.002, 0.0, spec()).unwrap();
        let at = |k: f64| {
            let (z, i2, _) = e.sweep(k, true, false).unwrap();
            e.local(k, z, i2)
        };
        let k = 0.034;
        let h = 5e-5;
        let l = [at(k - 2.0 * h), at(k - h), at(k), at(k + h), at(k + 2.0 * h)];
        let fd = |f: &dyn Fn(&Local) -> f64| {
            (f(&l[0]) - 8.0 * f(&l[1]) + 8.0 * f(&l[3]) - f(&l[4])) / (12.0 * h)
        };
        let l0 = l[2];
        assert!((fd(&|x| x.s0[0]) / l0.s0[1] - 1.0).abs() < 1e-6);
        assert!((fd(&|x| x.s0[1]) / l0.s0[2] - 1.0).abs() < 1e-6);
        assert!((fd(&|x| x.s1[0]) / l0.s1[1] - 1.0).abs() < 1e-6);
        assert!((fd(&|x| x.s1[1]) / l0.s1[2] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sigma2_is_continuous_through_atm() {
        let m = LocalVolModel::quadratic_sabr(0.008, 0.5, 0.3, 0.03).unwrap();
        let e = Expansion::new(&m, 0.03, 0.001, 0.0005, spec()).unwrap();
        let at0 = e.sigma2(0.03).unwrap();
        for y in [1e-9, -1e-9, 1e-6, -1e-6] {
            let v = e.sigma2(0.03 + y).unwrap();
            assert!((v / at0 - 1.0).abs() < 1e-3, "y={y} {v} {at0}");
        }
    }

    #[test]
    fn smile_assembly() {
        let bar = 0.03;
        let b = 0.2;
        let m = LocalVolModel::shifted_lognormal(bar, b, 0.0).unwrap();
        let setup = MarketSetup::driftless(0.0);
        let t = 0.5;
        let p = smile(&m, &setup, 0.0, t, 2, &spec()).unwrap();
        let x = b * b * t;
        assert!((p.sigma_n - bar * (1.0 - x / 6.0 + x * x / 40.0)).abs() < 1e-17);
        assert_eq!(p.order, OrderTag::Second);
        let p0 = smile(&m, &setup, 0.01, t, 0, &spec()).unwrap();
        assert_eq!(p0.sigma_n, Expansion::from_setup(&m, &setup, spec()).unwrap().sigma0(0.01).unwrap());
        assert!(smile(&m, &setup, 0.0, t, 3, &spec()).is_err());
    }

    #[test]
    fn atm_forward_with_drift() {
        // K = F_T at first order: sigma_0 + (sigma_1 + mu sigma_0') T.
        let (s0, b, mu) = (0.008, 0.1, 0.002);
        let m = LocalVolModel::shifted_lognormal(s0, b, 0.03).unwrap();
        let bar = s0 + 2.0 * b * 0.03;
        let setup = MarketSetup::new(0.03, mu, 0.0).unwrap();
        let e = Expansion::from_setup(&m, &setup, spec()).unwrap();
        for t in [1e-3, 1e-2] {
            let v = e.smile(setup.forward(t), t, 1).unwrap();
            let target = bar + (-b * b * bar / 6.0 + b * mu) * t;
            assert!((v - target).abs() < 2.0 * mu * mu * t * t / bar + 1e-15, "{v} {target}");
        }
    }

    #[test]
    fn sigma1_jump_for_kinked_model() {
        let m = LocalVolModel::piecewise_linear(0.008, 0.1, 0.2, 0.03).unwrap();
        let jump = sigma1_jump(&m, 0.03);
        assert!((jump + 4e-5).abs() < 1e-12, "{jump}");
        let e = Expansion::new(&m, 0.03, 0.0, 0.0, spec()).unwrap();
        let (l, r) = e.sigma1_limits();
        assert!((r - l - jump).abs() < 1e-15);
        let near = e.sigma1(0.03 + 1e-12).unwrap() - e.sigma1(0.03 - 1e-12).unwrap();
        assert!((near - jump).abs() < 1e-12);
        assert!(!e.is_reliable());
        let sym = LocalVolModel::piecewise_linear(0.008, -0.1, 0.1, 0.03).unwrap();
        assert_eq!(sigma1_jump(&sym, 0.03), 0.0);
        let smooth = LocalVolModel::piecewise_linear(0.008, 0.1, 0.1, 0.03).unwrap();
        assert_eq!(sigma1_jump(&smooth, 0.03), 0.0);
    }

    #[test]
    fn midpoint_rule() {
        let c = LocalVolModel::shifted_lognormal(0.01, 0.0, 0.0).unwrap();
        let mp = midpoint_approx(&c, 0.03, 0.05).unwrap();
        assert_eq!((mp.value, mp.error_bound), (0.01, 0.0));
        let sl = LocalVolModel::shifted_lognormal(0.008, 0.1, 0.03).unwrap();
        let mp = midpoint_approx(&sl, 0.03, 0.04).unwrap();
        assert!((mp.value - (0.014 + 0.1 * 0.01)).abs() < 1e-16);
        let sabr = LocalVolModel::quadratic_sabr(0.008, 0.2, 0.3, 0.03).unwrap();
        let k = 0.03 + 0.008 * 2.0;
        let mp = midpoint_approx(&sabr, 0.03, k).unwrap();
        let s = sigma0(&sabr, 0.03, k, &QuadratureSpec::default()).unwrap();
        assert!((mp.value - s).abs() <= 2.0 * mp.error_bound);
    }

    #[test]
    fn tabulated_model_follows_its_source() {
        let sl = LocalVolModel::shifted_lognormal(0.008, 0.1, 0.03).unwrap();
        let samples: Vec<(f64, f64)> =
            (0..801).map(|i| -0.02 + i as f64 * 1e-4).map(|s| (s, sl.eval(s))).collect();
        let tab = LocalVolModel::tabulated(&samples).unwrap();
        let a = Expansion::new(&sl, 0.03, 0.0, 0.0, spec()).unwrap();
        let b = Expansion::new(&tab, 0.03, 0.0, 0.0, spec()).unwrap();
        for k in [0.02, 0.045] {
            let (x, y) = (a.coefficients(k).unwrap(), b.coefficients(k).unwrap());
            assert!((x[0] / y[0] - 1.0).abs() < 1e-10);
            assert!((x[1] / y[1] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn expansion_coeffs_report() {
        let m = LocalVolModel::shifted_lognormal(0.03, 0.2, 0.0).unwrap();
        let setup = MarketSetup::driftless(0.0);
        let c1 = expansion_coeffs(&m, &setup, 1).unwrap();
        assert!((c1.atm_value + 0.04 * 0.03 / 6.0).abs() < 1e-17);
        assert_eq!(c1.atm_derivatives.len(), 2);
        // sigma_1'' at the money for the shifted lognormal: 11 b^4 / (90 s).
        assert!((c1.atm_derivatives[1] - 11.0 * 0.0016 / (90.0 * 0.03)).abs() < 1e-15);
        assert!(expansion_coeffs(&m, &setup, 3).is_err());
    }
}

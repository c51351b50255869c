//! Time-homogeneous local volatility functions and the market setup they
//! are evaluated against.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Which one-sided limit to take at a breakpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// Serializable description of a model family. `build` validates it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelSpec {
    ShiftedLognormal { sigma0: f64, b: f64, s0: f64 },
    QuadraticSabr { sigma0: f64, gamma: f64, rho: f64, s0: f64 },
    PiecewiseLinear { sigma0: f64, b_left: f64, b_right: f64, s0: f64 },
    Tabulated { samples: Vec<(f64, f64)> },
}

impl ModelSpec {
    pub fn build(&self) -> Result<LocalVolModel> {
        match *self {
            ModelSpec::ShiftedLognormal { sigma0, b, s0 } => {
                LocalVolModel::shifted_lognormal(sigma0, b, s0)
            }
            ModelSpec::QuadraticSabr { sigma0, gamma, rho, s0 } => {
                LocalVolModel::quadratic_sabr(sigma0, gamma, rho, s0)
            }
            ModelSpec::PiecewiseLinear { sigma0, b_left, b_right, s0 } => {
                LocalVolModel::piecewise_linear(sigma0, b_left, b_right, s0)
            }
            ModelSpec::Tabulated { ref samples } => LocalVolModel::tabulated(samples),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Family {
    ShiftedLognormal { sigma0: f64, b: f64 },
    QuadraticSabr { sigma0: f64, gamma: f64, rho: f64, s0: f64 },
    PiecewiseLinear { sigma0: f64, b_left: f64, b_right: f64, s0: f64 },
    Tabulated(Pchip),
}

/// A local volatility function `sigma_D(S)`.
///
/// Values are in currency per square-root year. Derivatives are exposed up to
/// fourth order; at a breakpoint the caller picks the side.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalVolModel {
    family: Family,
    breakpoints: Vec<f64>,
    domain: (f64, f64),
}

impl LocalVolModel {
    /// `sigma_D(S) = sigma0 + 2 b S`.
    pub fn shifted_lognormal(sigma0: f64, b: f64, s0: f64) -> Result<Self> {
        ensure_finite("sigma0", sigma0)?;
        ensure_finite("b", b)?;
        ensure_finite("S0", s0)?;
        if sigma0 + 2.0 * b * s0 <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "sigma0 + 2 b S0 = {} must be positive",
                sigma0 + 2.0 * b * s0
            )));
        }
        let domain = if b > 0.0 {
            (-sigma0 / (2.0 * b), f64::INFINITY)
        } else if b < 0.0 {
            (f64::NEG_INFINITY, -sigma0 / (2.0 * b))
        } else {
            (f64::NEG_INFINITY, f64::INFINITY)
        };
        Ok(Self {
            family: Family::ShiftedLognormal { sigma0, b },
            breakpoints: Vec::new(),
            domain,
        })
    }

    /// `sigma_D(S) = sqrt(sigma0^2 - 2 rho gamma sigma0 y + gamma^2 y^2)`, `y = S - S0`.
    pub fn quadratic_sabr(sigma0: f64, gamma: f64, rho: f64, s0: f64) -> Result<Self> {
        for (n, v) in [("sigma0", sigma0), ("gamma", gamma), ("rho", rho), ("S0", s0)] {
            ensure_finite(n, v)?;
        }
        if rho.abs() >= 1.0 {
            return Err(Error::InvalidParameter(format!("|rho| = {} must be < 1", rho.abs())));
        }
        if sigma0 <= 0.0 {
            return Err(Error::InvalidParameter("sigma0 must be positive".into()));
        }
        if gamma < 0.0 {
            return Err(Error::InvalidParameter("gamma must be non-negative".into()));
        }
        Ok(Self {
            family: Family::QuadraticSabr { sigma0, gamma, rho, s0 },
            breakpoints: Vec::new(),
            domain: (f64::NEG_INFINITY, f64::INFINITY),
        })
    }

    /// Linear pieces with slopes `2 b_left` below `S0` and `2 b_right` above.
    pub fn piecewise_linear(sigma0: f64, b_left: f64, b_right: f64, s0: f64) -> Result<Self> {
        for (n, v) in [("sigma0", sigma0), ("b_left", b_left), ("b_right", b_right), ("S0", s0)] {
            ensure_finite(n, v)?;
        }
        if sigma0 <= 0.0 {
            return Err(Error::InvalidParameter("sigma0 must be positive".into()));
        }
        let lo = if b_left > 0.0 { s0 - sigma0 / (2.0 * b_left) } else { f64::NEG_INFINITY };
        let hi = if b_right < 0.0 { s0 - sigma0 / (2.0 * b_right) } else { f64::INFINITY };
        let breakpoints = if b_left == b_right { Vec::new() } else { vec![s0] };
        Ok(Self {
            family: Family::PiecewiseLinear { sigma0, b_left, b_right, s0 },
            breakpoints,
            domain: (lo, hi),
        })
    }

    /// Monotone cubic (PCHIP) through `(S, sigma_D)` samples, linear outside.
    pub fn tabulated(samples: &[(f64, f64)]) -> Result<Self> {
        let p = Pchip::new(samples)?;
        let domain = p.positivity_domain();
        Ok(Self { family: Family::Tabulated(p), breakpoints: Vec::new(), domain })
    }

    /// Parses a `S,sigma_D` CSV table.
    pub fn tabulated_from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines.next().ok_or_else(|| Error::InvalidParameter("empty table".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != ["S", "sigma_D"] {
            return Err(Error::InvalidParameter(format!(
                "expected header `S,sigma_D`, found `{header}`"
            )));
        }
        let mut samples = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut it = line.split(',').map(str::trim);
            let parse = |f: Option<&str>| -> Result<f64> {
                f.and_then(|s| s.parse().ok()).ok_or_else(|| {
                    Error::InvalidParameter(format!("row {}: cannot parse `{line}`", i + 2))
                })
            };
            let s = parse(it.next())?;
            let v = parse(it.next())?;
            if it.next().is_some() {
                return Err(Error::InvalidParameter(format!("row {}: too many fields", i + 2)));
            }
            samples.push((s, v));
        }
        Self::tabulated(&samples)
    }

    pub fn eval(&self, s: f64) -> f64 {
        self.derivatives(s, Side::Right)[0]
    }

    /// k-th derivative (k <= 4), right-sided at breakpoints.
    pub fn derivative(&self, s: f64, k: usize) -> f64 {
        self.derivative_side(s, k, Side::Right)
    }

    pub fn derivative_side(&self, s: f64, k: usize, side: Side) -> f64 {
        assert!(k <= 4, "derivatives above fourth order are not exposed");
        self.derivatives(s, side)[k]
    }

    /// `[sigma_D, sigma_D', ..., sigma_D'''']` at `s`.
    pub fn derivatives(&self, s: f64, side: Side) -> [f64; 5] {
        match &self.family {
            Family::ShiftedLognormal { sigma0, b } => [sigma0 + 2.0 * b * s, 2.0 * b, 0.0, 0.0, 0.0],
            Family::QuadraticSabr { sigma0, gamma, rho, s0 } => {
                let y = s - s0;
                let r = sigma0 * sigma0 - 2.0 * rho * gamma * sigma0 * y + gamma * gamma * y * y;
                let r1 = -2.0 * rho * gamma * sigma0 + 2.0 * gamma * gamma * y;
                let r2 = 2.0 * gamma * gamma;
                let v = r.sqrt();
                let d1 = r1 / (2.0 * v);
                let d2 = (0.5 * r2 - d1 * d1) / v;
                let d3 = -3.0 * d1 * d2 / v;
                let d4 = -(4.0 * d1 * d3 + 3.0 * d2 * d2) / v;
                [v, d1, d2, d3, d4]
            }
            Family::PiecewiseLinear { sigma0, b_left, b_right, s0 } => {
                let right = s > *s0 || (s == *s0 && side == Side::Right);
                let b = if right { b_right } else { b_left };
                [sigma0 + 2.0 * b * (s - s0), 2.0 * b, 0.0, 0.0, 0.0]
            }
            Family::Tabulated(p) => p.derivatives(s, side),
        }
    }

    /// Right limit minus left limit of the k-th derivative.
    pub fn derivative_jump(&self, s: f64, k: usize) -> f64 {
        self.derivative_side(s, k, Side::Right) - self.derivative_side(s, k, Side::Left)
    }

    /// Levels where `sigma_D` or one of its derivatives is discontinuous.
    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// Breakpoints plus any interpolation nodes where the second derivative
    /// jumps; quadrature panels should not straddle these.
    pub fn smoothness_breaks(&self) -> Vec<f64> {
        match &self.family {
            Family::Tabulated(p) => p.xs.clone(),
            _ => self.breakpoints.clone(),
        }
    }

    /// Open interval on which `sigma_D > 0`.
    pub fn positivity_domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn is_analytic_at(&self, s: f64) -> bool {
        !self.smoothness_breaks().contains(&s)
    }

    /// Checks that `sigma_D > 0` on the closed interval between `a` and `b`.
    pub fn check_interval(&self, a: f64, b: f64) -> Result<()> {
        let (lo, hi) = (a.min(b), a.max(b));
        if !(lo > self.domain.0 && hi < self.domain.1) {
            return Err(Error::Domain(format!(
                "[{lo}, {hi}] leaves the positivity domain ({}, {})",
                self.domain.0, self.domain.1
            )));
        }
        Ok(())
    }

    /// Local length scale `sigma_D / max_k |sigma_D^(k) sigma_D^(k-1)|^(1/k)`
    /// over which the function changes by O(1).
    pub fn length_scale(&self, s: f64, side: Side) -> f64 {
        let d = self.derivatives(s, side);
        let v = d[0].abs();
        let mut rate: f64 = 0.0;
        let mut pow = 1.0;
        for (k, dk) in d.iter().enumerate().skip(1) {
            rate = rate.max((dk.abs() * pow).powf(1.0 / k as f64));
            pow *= v;
        }
        if rate == 0.0 {
            f64::INFINITY
        } else {
            v / rate
        }
    }
}

/// Spot, drift coefficients and the resulting forward curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketSetup {
    pub s0: f64,
    #[serde(default)]
    pub mu0: f64,
    #[serde(default)]
    pub mu1: f64,
}

impl MarketSetup {
    pub fn new(s0: f64, mu0: f64, mu1: f64) -> Result<Self> {
        ensure_finite("S0", s0)?;
        ensure_finite("mu0", mu0)?;
        ensure_finite("mu1", mu1)?;
        Ok(Self { s0, mu0, mu1 })
    }

    pub fn driftless(s0: f64) -> Self {
        Self { s0, mu0: 0.0, mu1: 0.0 }
    }

    /// `F_T = S0 + mu0 T + mu1 T^2 / 2`.
    pub fn forward(&self, t: f64) -> f64 {
        self.s0 + self.mu0 * t + 0.5 * self.mu1 * t * t
    }

    /// Instantaneous drift `mu0 + mu1 t`.
    pub fn drift(&self, t: f64) -> f64 {
        self.mu0 + self.mu1 * t
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Pchip {
    xs: Vec<f64>,
    ys: Vec<f64>,
    ds: Vec<f64>,
}

impl Pchip {
    fn new(samples: &[(f64, f64)]) -> Result<Self> {
        if samples.len() < 4 {
            return Err(Error::InvalidParameter(format!(
                "tabulated model needs at least 4 samples, got {}",
                samples.len()
            )));
        }
        for (i, &(s, v)) in samples.iter().enumerate() {
            ensure_finite("S", s)?;
            ensure_finite("sigma_D", v)?;
            if v <= 0.0 {
                return Err(Error::InvalidParameter(format!("sigma_D[{i}] = {v} is not positive")));
            }
            if i > 0 && s <= samples[i - 1].0 {
                return Err(Error::InvalidParameter(format!(
                    "S grid must be strictly increasing (row {i})"
                )));
            }
        }
        let xs: Vec<f64> = samples.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = samples.iter().map(|p| p.1).collect();
        let n = xs.len();
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
        let mut ds = vec![0.0; n];
        for i in 1..n - 1 {
            if delta[i - 1] * delta[i] > 0.0 {
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                ds[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
            }
        }
        ds[0] = edge_slope(h[0], h[1], delta[0], delta[1]);
        ds[n - 1] = edge_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        Ok(Self { xs, ys, ds })
    }

    fn derivatives(&self, s: f64, side: Side) -> [f64; 5] {
        let n = self.xs.len();
        if s < self.xs[0] || (s == self.xs[0] && side == Side::Left) {
            return [self.ys[0] + self.ds[0] * (s - self.xs[0]), self.ds[0], 0.0, 0.0, 0.0];
        }
        if s > self.xs[n - 1] || (s == self.xs[n - 1] && side == Side::Right) {
            let d = self.ds[n - 1];
            return [self.ys[n - 1] + d * (s - self.xs[n - 1]), d, 0.0, 0.0, 0.0];
        }
        // Interval index with the side convention applied at interior nodes.
        let mut i = self.xs.partition_point(|&x| x <= s).saturating_sub(1);
        if side == Side::Left && s == self.xs[i] && i > 0 {
            i -= 1;
        }
        let i = i.min(n - 2);
        let h = self.xs[i + 1] - self.xs[i];
        let delta = (self.ys[i + 1] - self.ys[i]) / h;
        let (d0, d1) = (self.ds[i], self.ds[i + 1]);
        let c2 = (3.0 * delta - 2.0 * d0 - d1) / h;
        let c3 = (d0 + d1 - 2.0 * delta) / (h * h);
        let t = s - self.xs[i];
        [
            self.ys[i] + t * (d0 + t * (c2 + t * c3)),
            d0 + t * (2.0 * c2 + 3.0 * c3 * t),
            2.0 * c2 + 6.0 * c3 * t,
            6.0 * c3,
            0.0,
        ]
    }

    fn positivity_domain(&self) -> (f64, f64) {
        let n = self.xs.len();
        let lo = if self.ds[0] > 0.0 {
            self.xs[0] - self.ys[0] / self.ds[0]
        } else {
            f64::NEG_INFINITY
        };
        let hi = if self.ds[n - 1] < 0.0 {
            self.xs[n - 1] - self.ys[n - 1] / self.ds[n - 1]
        } else {
            f64::INFINITY
        };
        (lo, hi)
    }
}

fn edge_slope(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
    if d.signum() != m0.signum() || m0 == 0.0 {
        0.0
    } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
        3.0 * m0
    } else {
        d
    }
}

//! Forward (Dupire) equation for call prices under normal dynamics,
//! `dC/dT = 1/2 sigma_D(K)^2 d2C/dK2 - mu(T) dC/dK`, and local-vol
//! extraction from an implied-vol surface.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bachelier::implied_normal_vol;
use crate::error::{Error, Result};
use crate::models::{LocalVolModel, MarketSetup, Side};
use crate::smile::{OrderTag, Smile, SmileFlag, SmilePoint};

/// How strike nodes are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stretching {
    /// Equal steps in `K` over `S0 +- width sigma_D(S0) sqrt(T)`.
    Uniform,
    /// Equal steps in `z = int dS / sigma_D(S)` over `+- width sqrt(T)`.
    /// Node density then follows the local standard deviation, which keeps
    /// long maturities of skewed models on a finite grid.
    LocalVol,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdeGrid {
    pub n_space: usize,
    pub n_time_per_year: usize,
    /// Floor on the number of steps to the first output maturity.
    pub min_time_steps: usize,
    /// Half-width of the grid in local standard deviations.
    pub width: f64,
    pub stretching: Stretching,
    /// Repeat the solve on a grid refined by two in space and time and
    /// extrapolate the second-order error away.
    pub richardson: bool,
}

impl Default for PdeGrid {
    fn default() -> Self {
        Self {
            n_space: 801,
            n_time_per_year: 400,
            min_time_steps: 200,
            width: 10.0,
            stretching: Stretching::LocalVol,
            richardson: true,
        }
    }
}

impl PdeGrid {
    pub fn validate(&self) -> Result<()> {
        if self.n_space < 51 {
            return Err(Error::InvalidParameter(format!("n_space = {} must be >= 51", self.n_space)));
        }
        if !(self.width >= 8.0) {
            return Err(Error::InvalidParameter(format!(
                "grid half-width {} must cover at least 8 standard deviations",
                self.width
            )));
        }
        if self.min_time_steps < 2 || self.n_time_per_year == 0 {
            return Err(Error::InvalidParameter("time step counts must be positive".into()));
        }
        Ok(())
    }

    /// Scales node and step counts by `factor`.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            n_space: (self.n_space - 1) * factor + 1,
            n_time_per_year: self.n_time_per_year * factor,
            min_time_steps: self.min_time_steps * factor,
            ..*self
        }
    }

    /// Strike nodes for maturities up to `t_max`. `S0` is always a node and
    /// so are the model breakpoints inside the grid.
    pub fn strikes(&self, model: &LocalVolModel, s0: f64, t_max: f64) -> Result<Vec<f64>> {
        self.validate()?;
        model.check_interval(s0, s0)?;
        let half = self.n_space / 2;
        let mut nodes = match self.stretching {
            Stretching::Uniform => {
                let (lo, hi) = model.positivity_domain();
                let span = self.width * model.eval(s0) * t_max.sqrt();
                let eps = 1e-9 * span;
                let a = (s0 - span).max(lo + eps);
                let b = (s0 + span).min(hi - eps);
                let mut v: Vec<f64> =
                    (0..=half).map(|i| a + (s0 - a) * i as f64 / half as f64).collect();
                v.extend((1..=half).map(|i| s0 + (b - s0) * i as f64 / half as f64));
                v
            }
            Stretching::LocalVol => {
                let dz = self.width * t_max.sqrt() / half as f64;
                let mut left = march(model, s0, -dz, half);
                let right = march(model, s0, dz, half);
                left.reverse();
                left.pop();
                left.push(s0);
                left.extend(right.into_iter().skip(1));
                left
            }
        };
        for &b in model.breakpoints() {
            if b <= nodes[0] || b >= nodes[nodes.len() - 1] || nodes.contains(&b) {
                continue;
            }
            let i = nodes.partition_point(|&x| x < b);
            let j = if (nodes[i] - b).abs() < (b - nodes[i - 1]).abs() { i } else { i - 1 };
            if j != half {
                nodes[j] = b;
            }
        }
        for w in nodes.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::Domain("strike grid is not strictly increasing".into()));
            }
        }
        Ok(nodes)
    }
}

/// RK4 on `dS/dz = sigma_D(S)` from `s0`, `n` steps of `dz`.
fn march(model: &LocalVolModel, s0: f64, dz: f64, n: usize) -> Vec<f64> {
    const SUB: usize = 4;
    let side = if dz < 0.0 { Side::Left } else { Side::Right };
    let f = |s: f64| model.derivatives(s, side)[0].max(0.0);
    let h = dz / SUB as f64;
    let mut out = Vec::with_capacity(n + 1);
    let mut s = s0;
    out.push(s);
    for _ in 0..n {
        for _ in 0..SUB {
            let k1 = f(s);
            let k2 = f(s + 0.5 * h * k1);
            let k3 = f(s + 0.5 * h * k2);
            let k4 = f(s + h * k3);
            s += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        out.push(s);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PdeMeta {
    /// Largest `sigma_D^2 dt / (2 dK_- dK_+)` over nodes and steps.
    pub max_courant: f64,
    /// `-dC/dK` at the lower boundary at the last level (should be ~1).
    pub left_slope: f64,
    /// `-dC/dK` at the upper boundary at the last level (should be ~0).
    pub right_slope: f64,
    pub time_steps: usize,
    pub richardson: bool,
}

/// Call prices on the strike nodes at each output maturity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeSolution {
    pub strikes: Vec<f64>,
    pub times: Vec<f64>,
    /// `prices[level][node]`
    pub prices: Vec<Vec<f64>>,
    pub forwards: Vec<f64>,
    pub meta: PdeMeta,
}

/// Time levels: quadratic clustering towards zero up to the first output,
/// uniform steps between later outputs.
fn time_levels(outputs: &[f64], grid: &PdeGrid) -> Vec<f64> {
    let t_max = *outputs.last().unwrap();
    let total = ((grid.n_time_per_year as f64 * t_max).ceil() as usize).max(grid.min_time_steps);
    let mut levels = vec![0.0];
    let mut prev = 0.0;
    for (k, &t) in outputs.iter().enumerate() {
        let share = ((total as f64 * (t - prev) / t_max).ceil() as usize).max(4);
        if k == 0 {
            let n = share.max(grid.min_time_steps);
            for j in 1..=n {
                let x = j as f64 / n as f64;
                levels.push(if j == n { t } else { t * x * x });
            }
        } else {
            for j in 1..=share {
                levels.push(if j == share { t } else { prev + (t - prev) * j as f64 / share as f64 });
            }
        }
        prev = t;
    }
    levels
}

fn thomas(a: &[f64], b: &[f64], c: &[f64], d: &mut [f64], scratch: &mut [f64]) {
    let n = d.len();
    scratch[0] = c[0] / b[0];
    d[0] /= b[0];
    for i in 1..n {
        let m = b[i] - a[i] * scratch[i - 1];
        scratch[i] = c[i] / m;
        d[i] = (d[i] - a[i] * d[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        d[i] -= scratch[i] * d[i + 1];
    }
}

/// One solve on a fixed grid without extrapolation.
fn solve_once(
    model: &LocalVolModel,
    setup: &MarketSetup,
    grid: &PdeGrid,
    outputs: &[f64],
) -> Result<PdeSolution> {
    let t_max = *outputs.last().unwrap();
    let k = grid.strikes(model, setup.s0, t_max)?;
    let n = k.len();
    let var: Vec<f64> = k.iter().map(|&x| 0.5 * model.eval(x).powi(2)).collect();
    // Three-point weights for the first and second derivatives.
    let mut d1 = vec![[0.0; 3]; n];
    let mut d2 = vec![[0.0; 3]; n];
    for i in 1..n - 1 {
        let (hm, hp) = (k[i] - k[i - 1], k[i + 1] - k[i]);
        let s = hm + hp;
        d1[i] = [-hp / (hm * s), (hp - hm) / (hm * hp), hm / (hp * s)];
        d2[i] = [2.0 / (hm * s), -2.0 / (hm * hp), 2.0 / (hp * s)];
    }
    let levels = time_levels(outputs, grid);
    let mut c: Vec<f64> = k.iter().map(|&x| (setup.s0 - x).max(0.0)).collect();
    let mut rhs = vec![0.0; n];
    let (mut la, mut lb, mut lc) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut scratch = vec![0.0; n];
    let mut prices = Vec::with_capacity(outputs.len());
    let mut forwards = Vec::with_capacity(outputs.len());
    let mut max_courant: f64 = 0.0;
    let mut next_out = 0;
    // Largest sigma_D^2 / (2 h^2) over interior nodes, for the Courant number.
    let stiffness = (1..n - 1)
        .map(|i| var[i] / ((k[i] - k[i - 1]) * (k[i + 1] - k[i])))
        .fold(0.0, f64::max);

    // Operator row i at drift mu: (a, b, c) coefficients.
    let row = |i: usize, mu: f64| -> [f64; 3] {
        let mut r = [0.0; 3];
        for j in 0..3 {
            r[j] = var[i] * d2[i][j] - mu * d1[i][j];
        }
        r
    };

    let mut steps: Vec<(f64, f64, f64)> = Vec::with_capacity(levels.len() + 1);
    for (idx, w) in levels.windows(2).enumerate() {
        if idx == 0 {
            // Two implicit half steps damp the payoff kink.
            let mid = 0.5 * (w[0] + w[1]);
            steps.push((w[0], mid, 1.0));
            steps.push((mid, w[1], 1.0));
        } else {
            steps.push((w[0], w[1], 0.5));
        }
    }

    for &(t0, t1, theta) in &steps {
        let dt = t1 - t0;
        max_courant = max_courant.max(stiffness * dt);
        let (mu0, mu1) = (setup.drift(t0), setup.drift(t1));
        rhs[0] = setup.forward(t1) - k[0];
        rhs[n - 1] = 0.0;
        la[0] = 0.0;
        lb[0] = 1.0;
        lc[0] = 0.0;
        la[n - 1] = 0.0;
        lb[n - 1] = 1.0;
        lc[n - 1] = 0.0;
        for i in 1..n - 1 {
            let e = row(i, mu0);
            let im = row(i, mu1);
            let explicit = e[0] * c[i - 1] + e[1] * c[i] + e[2] * c[i + 1];
            rhs[i] = c[i] + (1.0 - theta) * dt * explicit;
            la[i] = -theta * dt * im[0];
            lb[i] = 1.0 - theta * dt * im[1];
            lc[i] = -theta * dt * im[2];
        }
        thomas(&la, &lb, &lc, &mut rhs, &mut scratch);
        std::mem::swap(&mut c, &mut rhs);
        if !c.iter().all(|v| v.is_finite()) {
            return Err(Error::NoConvergence("PDE solution became non-finite".into()));
        }
        while next_out < outputs.len() && t1 == outputs[next_out] {
            prices.push(c.clone());
            forwards.push(setup.forward(t1));
            next_out += 1;
        }
    }
    // Nodes crowd towards a zero of sigma_D; difference over a span that is
    // not swamped by rounding.
    let span = 1e-3 * (k[n - 1] - k[0]);
    let jl = k.partition_point(|&x| x < k[0] + span).max(1);
    let jr = k.partition_point(|&x| x <= k[n - 1] - span).min(n - 2);
    let left_slope = -(c[jl] - c[0]) / (k[jl] - k[0]);
    let right_slope = -(c[n - 1] - c[jr]) / (k[n - 1] - k[jr]);
    Ok(PdeSolution {
        strikes: k,
        times: outputs.to_vec(),
        prices,
        forwards,
        meta: PdeMeta {
            max_courant,
            left_slope,
            right_slope,
            time_steps: steps.len(),
            richardson: false,
        },
    })
}

/// Solves the forward equation from `C(K, 0) = (S0 - K)+` and reports
/// prices at each maturity in `maturities`.
pub fn solve_forward_at(
    model: &LocalVolModel,
    setup: &MarketSetup,
    grid: &PdeGrid,
    maturities: &[f64],
) -> Result<PdeSolution> {
    grid.validate()?;
    let mut outputs: Vec<f64> = maturities.to_vec();
    if outputs.is_empty() || outputs.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::InvalidParameter("maturities must be positive and finite".into()));
    }
    outputs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    outputs.dedup();
    let coarse = solve_once(model, setup, grid, &outputs)?;
    if !grid.richardson {
        return Ok(coarse);
    }
    let fine = solve_once(model, setup, &grid.refined(2), &outputs)?;
    let mut out = coarse;
    for (lc, lf) in out.prices.iter_mut().zip(&fine.prices) {
        for (i, p) in lc.iter_mut().enumerate() {
            *p = (4.0 * lf[2 * i] - *p) / 3.0;
        }
    }
    out.meta.richardson = true;
    out.meta.left_slope = fine.meta.left_slope;
    out.meta.right_slope = fine.meta.right_slope;
    out.meta.max_courant = fine.meta.max_courant;
    out.meta.time_steps += fine.meta.time_steps;
    Ok(out)
}

/// Solves to `t_max` and keeps that single level.
pub fn solve_forward(
    model: &LocalVolModel,
    setup: &MarketSetup,
    grid: &PdeGrid,
    t_max: f64,
) -> Result<PdeSolution> {
    solve_forward_at(model, setup, grid, &[t_max])
}

impl PdeSolution {
    fn level(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|&x| x == t)
    }

    /// Cubic Lagrange interpolation in strike on one level.
    fn interp(&self, level: usize, k: f64) -> Result<f64> {
        let ks = &self.strikes;
        let n = ks.len();
        if !(k >= ks[0] && k <= ks[n - 1]) {
            return Err(Error::Domain(format!("strike {k} outside the PDE grid [{}, {}]", ks[0], ks[n - 1])));
        }
        let p = &self.prices[level];
        let i = ks.partition_point(|&x| x < k);
        if i < n && ks[i] == k {
            return Ok(p[i]);
        }
        let start = i.saturating_sub(2).min(n - 4);
        let mut acc = 0.0;
        for a in start..start + 4 {
            let mut w = 1.0;
            for b in start..start + 4 {
                if a != b {
                    w *= (k - ks[b]) / (ks[a] - ks[b]);
                }
            }
            acc += w * p[a];
        }
        Ok(acc)
    }

    /// Call price at `(k, t)`; `t` must be a stored level.
    pub fn price_at(&self, k: f64, t: f64) -> Result<f64> {
        let l = self
            .level(t)
            .ok_or_else(|| Error::InvalidParameter(format!("maturity {t} is not a solution level")))?;
        self.interp(l, k)
    }

    /// Implied normal vol at `(k, t)`. Between stored levels the total
    /// variance `sigma_N^2 T` is interpolated linearly in `T`.
    pub fn implied_vol_at(&self, k: f64, t: f64) -> Result<f64> {
        if let Some(l) = self.level(t) {
            let p = self.interp(l, k)?;
            return implied_normal_vol(p, self.forwards[l], k, t);
        }
        let j = self.times.partition_point(|&x| x < t);
        if j == 0 || j == self.times.len() {
            return Err(Error::Domain(format!("maturity {t} outside the solved range")));
        }
        let (t0, t1) = (self.times[j - 1], self.times[j]);
        let v0 = self.implied_vol_at(k, t0)?;
        let v1 = self.implied_vol_at(k, t1)?;
        let (w0, w1) = (v0 * v0 * t0, v1 * v1 * t1);
        let w = w0 + (w1 - w0) * (t - t0) / (t1 - t0);
        Ok((w / t).sqrt())
    }

    /// CSV with columns `K,T,price,sigmaN`, one block per level.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("K,T,price,sigmaN\n");
        for (l, &t) in self.times.iter().enumerate() {
            for (i, &k) in self.strikes.iter().enumerate() {
                let p = self.prices[l][i];
                let v = implied_normal_vol(p.max((self.forwards[l] - k).max(0.0)), self.forwards[l], k, t)
                    .unwrap_or(f64::NAN);
                let _ = writeln!(s, "{k},{t},{p},{v}");
            }
        }
        s
    }
}

/// Implied vol of one PDE price with its confidence flag.
fn smile_point(price: f64, f: f64, k: f64, t: f64, atm_sd: f64) -> Result<SmilePoint> {
    let intrinsic = (f - k).max(0.0);
    let (sigma_n, mut flag) = if price <= intrinsic {
        (0.0, SmileFlag::Clamped)
    } else {
        (implied_normal_vol(price, f, k, t)?, SmileFlag::Ok)
    };
    // Deep in the money the time value drowns in the intrinsic part.
    let faint = price - intrinsic < 1e-6 * intrinsic;
    if flag == SmileFlag::Ok && ((k - f).abs() > 6.0 * atm_sd || faint) {
        flag = SmileFlag::LowConfidence;
    }
    Ok(SmilePoint { strike: k, maturity: t, sigma_n, order: OrderTag::Exact, flag })
}

/// Implied smile on the interior grid nodes at maturity `t`.
///
/// Nodes more than six ATM standard deviations from the forward, or whose
/// time value is a negligible part of the price, are flagged low confidence.
/// Prices at or below intrinsic are clamped and flagged.
pub fn implied_smile_from_pde(
    sol: &PdeSolution,
    model: &LocalVolModel,
    setup: &MarketSetup,
    t: f64,
) -> Result<Smile> {
    let n = sol.strikes.len();
    implied_smile_at(sol, model, setup, t, &sol.strikes[1..n - 1])
}

/// Same as [`implied_smile_from_pde`] at arbitrary strikes inside the grid.
pub fn implied_smile_at(
    sol: &PdeSolution,
    model: &LocalVolModel,
    setup: &MarketSetup,
    t: f64,
    strikes: &[f64],
) -> Result<Smile> {
    let f = setup.forward(t);
    let atm_sd = model.eval(setup.s0) * t.sqrt();
    let level = sol.level(t);
    let points = strikes
        .iter()
        .map(|&k| {
            let price = match level {
                Some(l) => sol.interp(l, k)?,
                None => crate::bachelier::bachelier_call(f, k, t, sol.implied_vol_at(k, t)?)?,
            };
            smile_point(price, f, k, t, atm_sd)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Smile { points })
}

/// Finite-difference steps for [`extract_local_vol`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionSteps {
    /// Strike step as a fraction of `sigma_N sqrt(T)`.
    pub strike_fraction: f64,
    /// Maturity step as a fraction of `T`.
    pub time_fraction: f64,
}

impl Default for ExtractionSteps {
    fn default() -> Self {
        Self { strike_fraction: 0.05, time_fraction: 0.02 }
    }
}

/// Local vol from a normal implied-vol surface `surface(K, T)` by
///
/// `sigma_D^2 = (w_T + mu T d_K sigma_N^2) / ((1 - y d_K sigma_N / sigma_N)^2 + T sigma_N d_KK sigma_N)`
///
/// with `w = sigma_N^2 T`, `y = K - F_T`, central differences in strike and
/// a second-order forward difference in maturity.
pub fn extract_local_vol<F>(
    surface: F,
    setup: &MarketSetup,
    k: f64,
    t: f64,
    steps: &ExtractionSteps,
) -> Result<f64>
where
    F: Fn(f64, f64) -> Result<f64>,
{
    if !(t > 0.0) {
        return Err(Error::InvalidParameter("maturity must be positive".into()));
    }
    let s = surface(k, t)?;
    let hk = steps.strike_fraction * s * t.sqrt();
    let ht = steps.time_fraction * t;
    let (sm, sp) = (surface(k - hk, t)?, surface(k + hk, t)?);
    let dk = (sp - sm) / (2.0 * hk);
    let dkk = (sp - 2.0 * s + sm) / (hk * hk);
    let w = |tt: f64| -> Result<f64> { Ok(surface(k, tt)?.powi(2) * tt) };
    let dw = (-3.0 * s * s * t + 4.0 * w(t + ht)? - w(t + 2.0 * ht)?) / (2.0 * ht);
    let y = k - setup.forward(t);
    let num = dw + setup.drift(t) * t * 2.0 * s * dk;
    let den = (1.0 - y * dk / s).powi(2) + t * s * dkk;
    if !(den > 0.0) || !(num > 0.0) {
        return Err(Error::SingularSurface {
            strike: k,
            maturity: t,
            reason: format!("numerator {num:e}, denominator {den:e}"),
        });
    }
    Ok((num / den).sqrt())
}

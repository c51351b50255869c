//! Adaptive Simpson quadrature with Richardson-corrected panels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerances for the adaptive integrator and the ATM switch used by the
/// expansion coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_subdivisions: usize,
    /// Radius, as a fraction of the local-vol length scale
    /// `sigma_D / |sigma_D'|` at the forward, inside which the expansion
    /// coefficients are taken from their ATM Taylor series.
    pub atm_switch_radius: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 1e-14,
            max_subdivisions: 1 << 16,
            atm_switch_radius: 2e-3,
        }
    }
}

impl QuadratureSpec {
    /// Tolerances tight enough that the cancellation-prone closed forms for
    /// the first and second order coefficients keep ~10 digits.
    pub fn tight() -> Self {
        Self {
            rel_tol: 1e-14,
            abs_tol: 1e-300,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0 && self.atm_switch_radius > 0.0) {
            return Err(Error::InvalidParameter(
                "quadrature tolerances must be positive".into(),
            ));
        }
        if self.max_subdivisions == 0 {
            return Err(Error::InvalidParameter("max_subdivisions must be > 0".into()));
        }
        Ok(())
    }
}

struct Panel {
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
}

const MAX_DEPTH: u32 = 60;

/// Integrates `f` over `[a, b]` (either orientation).
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, spec: &QuadratureSpec) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    if b < a {
        return integrate(f, b, a, spec).map(|v| -v);
    }
    // A coarse first pass fixes the scale for the relative tolerance and keeps
    // an unlucky symmetric integrand from terminating on the first panel.
    const INITIAL: usize = 8;
    let h = (b - a) / INITIAL as f64;
    let mut panels = Vec::with_capacity(INITIAL);
    let mut scale = 0.0;
    for i in 0..INITIAL {
        let pa = a + h * i as f64;
        let pb = if i + 1 == INITIAL { b } else { a + h * (i + 1) as f64 };
        let fa = f(pa);
        let fm = f(0.5 * (pa + pb));
        let fb = f(pb);
        let whole = (pb - pa) / 6.0 * (fa + 4.0 * fm + fb);
        scale += whole.abs();
        panels.push((pa, pb, fa, fm, fb, whole));
    }
    let tol = (spec.rel_tol * scale).max(spec.abs_tol);
    let mut stack: Vec<Panel> = panels
        .into_iter()
        .rev()
        .map(|(a, b, fa, fm, fb, whole)| Panel {
            a,
            b,
            fa,
            fm,
            fb,
            whole,
            tol: tol / INITIAL as f64,
            depth: 0,
        })
        .collect();

    let mut total = 0.0;
    let mut comp = 0.0;
    let mut splits = 0usize;
    while let Some(p) = stack.pop() {
        let m = 0.5 * (p.a + p.b);
        let lm = 0.5 * (p.a + m);
        let rm = 0.5 * (m + p.b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - p.a) / 6.0 * (p.fa + 4.0 * flm + p.fm);
        let right = (p.b - m) / 6.0 * (p.fm + 4.0 * frm + p.fb);
        let refined = left + right;
        let delta = refined - p.whole;
        if !refined.is_finite() {
            return Err(Error::Domain(format!(
                "non-finite integrand on [{}, {}]",
                p.a, p.b
            )));
        }
        if delta.abs() <= 15.0 * p.tol || p.depth >= MAX_DEPTH || m <= p.a || m >= p.b {
            // Kahan summation: panel counts reach 1e5 under tight tolerances.
            let v = refined + delta / 15.0;
            let y = v - comp;
            let t = total + y;
            comp = (t - total) - y;
            total = t;
            continue;
        }
        splits += 1;
        if splits > spec.max_subdivisions {
            return Err(Error::Quadrature {
                a,
                b,
                subdivisions: splits,
            });
        }
        let half = 0.5 * p.tol;
        stack.push(Panel {
            a: m,
            b: p.b,
            fa: p.fm,
            fm: frm,
            fb: p.fb,
            whole: right,
            tol: half,
            depth: p.depth + 1,
        });
        stack.push(Panel {
            a: p.a,
            b: m,
            fa: p.fa,
            fm: flm,
            fb: p.fm,
            whole: left,
            tol: half,
            depth: p.depth + 1,
        });
    }
    Ok(total)
}

/// Integrates over `[a, b]` with every point of `breaks` that falls strictly
/// inside the interval used as a mandatory panel boundary.
pub fn integrate_with_breaks<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    breaks: &[f64],
    spec: &QuadratureSpec,
) -> Result<f64> {
    let (lo, hi, sign) = if a <= b { (a, b, 1.0) } else { (b, a, -1.0) };
    let mut cuts: Vec<f64> = breaks
        .iter()
        .copied()
        .filter(|&x| x > lo && x < hi)
        .collect();
    cuts.sort_by(|x, y| x.total_cmp(y));
    let mut edges = Vec::with_capacity(cuts.len() + 2);
    edges.push(lo);
    edges.extend(cuts);
    edges.push(hi);
    let mut sum = 0.0;
    for w in edges.windows(2) {
        sum += integrate(&f, w[0], w[1], spec)?;
    }
    Ok(sign * sum)
}

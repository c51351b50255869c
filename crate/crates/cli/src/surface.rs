//! Implied normal vol surface read from CSV: a natural cubic spline in
//! strike on each maturity, linear total variance between maturities.

use normvol::{Error, Result};

use crate::config::ConfigError;

struct Spline {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl Spline {
    fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Tridiagonal system for the second derivatives, natural ends.
            let mut c = vec![0.0; n];
            let mut d = vec![0.0; n];
            for i in 1..n - 1 {
                let (h0, h1) = (x[i] - x[i - 1], x[i + 1] - x[i]);
                let a = h0 / 6.0;
                let b = (h0 + h1) / 3.0;
                let r = (y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0;
                let den = b - a * c[i - 1];
                c[i] = (h1 / 6.0) / den;
                d[i] = (r - a * d[i - 1]) / den;
            }
            for i in (1..n - 1).rev() {
                m[i] = d[i] - c[i] * m[i + 1];
            }
        }
        Self { x, y, m }
    }

    fn eval(&self, k: f64) -> Option<f64> {
        let (x, y, m) = (&self.x, &self.y, &self.m);
        let n = x.len();
        if !(k >= x[0] && k <= x[n - 1]) {
            return None;
        }
        let i = x.partition_point(|&v| v <= k).clamp(1, n - 1);
        let h = x[i] - x[i - 1];
        let (a, b) = ((x[i] - k) / h, (k - x[i - 1]) / h);
        Some(
            a * y[i - 1] + b * y[i]
                + ((a * a * a - a) * m[i - 1] + (b * b * b - b) * m[i]) * h * h / 6.0,
        )
    }
}

pub struct Surface {
    times: Vec<f64>,
    levels: Vec<Spline>,
}

impl Surface {
    /// Reads columns `K`, `T` and `sigma_N` (or `sigmaN`). When a `method`
    /// column exists only rows equal to `method` are kept; rows flagged
    /// anything but `ok` are dropped.
    pub fn from_csv(text: &str, method: Option<&str>) -> anyhow::Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines.next().unwrap_or("").split(',').map(str::trim).collect();
        let col = |names: &[&str]| header.iter().position(|h| names.contains(h));
        let (Some(ck), Some(ct), Some(cv)) = (col(&["K"]), col(&["T"]), col(&["sigma_N", "sigmaN"])) else {
            return Err(ConfigError("surface: header needs K, T and sigma_N columns".into()).into());
        };
        let cm = col(&["method"]);
        let cf = col(&["flag"]);
        let mut rows: Vec<(f64, f64, f64)> = Vec::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if let (Some(c), Some(want)) = (cm, method) {
                if f.get(c) != Some(&want) {
                    continue;
                }
            }
            if let Some(c) = cf {
                if f.get(c).is_some_and(|v| *v != "ok") {
                    continue;
                }
            }
            let num = |c: usize| -> anyhow::Result<f64> {
                f.get(c)
                    .and_then(|v| v.parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| ConfigError(format!("surface: bad number on data line {}", n + 1)).into())
            };
            rows.push((num(ct)?, num(ck)?, num(cv)?));
        }
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut times = Vec::new();
        let mut levels = Vec::new();
        let mut i = 0;
        while i < rows.len() {
            let t = rows[i].0;
            let j = i + rows[i..].iter().take_while(|r| r.0 == t).count();
            let (ks, vs): (Vec<f64>, Vec<f64>) = rows[i..j].iter().map(|r| (r.1, r.2)).unzip();
            if ks.len() < 4 || ks.windows(2).any(|w| w[1] <= w[0]) {
                return Err(ConfigError(format!("surface: maturity {t} needs >= 4 distinct strikes")).into());
            }
            times.push(t);
            levels.push(Spline::new(ks, vs));
            i = j;
        }
        if times.is_empty() {
            return Err(ConfigError("surface: no usable rows".into()).into());
        }
        Ok(Self { times, levels })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn strikes(&self, level: usize) -> &[f64] {
        &self.levels[level].x
    }

    pub fn vol(&self, k: f64, t: f64) -> Result<f64> {
        let at = |l: usize| {
            self.levels[l]
                .eval(k)
                .ok_or_else(|| Error::Domain(format!("strike {k} outside the surface at T={}", self.times[l])))
        };
        if let Some(l) = self.times.iter().position(|&x| x == t) {
            return at(l);
        }
        let j = self.times.partition_point(|&x| x < t);
        if j == 0 || j == self.times.len() {
            return Err(Error::Domain(format!("maturity {t} outside the surface")));
        }
        let (t0, t1) = (self.times[j - 1], self.times[j]);
        let (w0, w1) = (at(j - 1)?.powi(2) * t0, at(j)?.powi(2) * t1);
        Ok(((w0 + (w1 - w0) * (t - t0) / (t1 - t0)) / t).sqrt())
    }
}

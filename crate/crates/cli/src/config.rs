//! Experiment files: model(s), market, strikes, maturities, methods, output.

use std::fmt;
use std::path::{Path, PathBuf};

use normvol::{LocalVolModel, MarketSetup, McSpec, PdeGrid};
use serde::Deserialize;

/// A problem with the experiment file or the flags; exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(ConfigError(msg.into()).into())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// `sigma_D = sigma0 + 2 b S`
    ShiftedLognormal {
        sigma0: f64,
        b: f64,
        #[serde(default)]
        label: Option<String>,
    },
    QuadraticSabr {
        sigma0: f64,
        gamma: f64,
        rho: f64,
        #[serde(default)]
        label: Option<String>,
    },
    PiecewiseLinear {
        sigma0: f64,
        b_left: f64,
        b_right: f64,
        #[serde(default)]
        label: Option<String>,
    },
    /// CSV with header `S,sigma_D`, relative to the config file.
    Tabulated {
        path: PathBuf,
        #[serde(default)]
        label: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub sigma0: Option<f64>,
    pub b: Option<f64>,
    pub b_left: Option<f64>,
    pub b_right: Option<f64>,
    pub gamma: Option<f64>,
    pub rho: Option<f64>,
    pub s0: Option<f64>,
    pub mu0: Option<f64>,
    pub mu1: Option<f64>,
}

impl ModelConfig {
    pub fn label(&self) -> Option<&str> {
        match self {
            ModelConfig::ShiftedLognormal { label, .. }
            | ModelConfig::QuadraticSabr { label, .. }
            | ModelConfig::PiecewiseLinear { label, .. }
            | ModelConfig::Tabulated { label, .. } => label.as_deref(),
        }
    }

    fn apply(&mut self, o: &Overrides) -> anyhow::Result<()> {
        let family = self.family();
        let misfit = |flag: &str| config_err(format!("--{flag} does not apply to model family {family}"));
        match self {
            ModelConfig::ShiftedLognormal { sigma0, b, .. } => {
                if o.gamma.is_some() || o.rho.is_some() || o.b_left.is_some() || o.b_right.is_some() {
                    return misfit("gamma/rho/b-left/b-right");
                }
                set(sigma0, o.sigma0);
                set(b, o.b);
            }
            ModelConfig::QuadraticSabr { sigma0, gamma, rho, .. } => {
                if o.b.is_some() || o.b_left.is_some() || o.b_right.is_some() {
                    return misfit("b/b-left/b-right");
                }
                set(sigma0, o.sigma0);
                set(gamma, o.gamma);
                set(rho, o.rho);
            }
            ModelConfig::PiecewiseLinear { sigma0, b_left, b_right, .. } => {
                if o.gamma.is_some() || o.rho.is_some() {
                    return misfit("gamma/rho");
                }
                set(sigma0, o.sigma0);
                // --b sets a symmetric kink
                if let Some(b) = o.b {
                    *b_left = -b;
                    *b_right = b;
                }
                set(b_left, o.b_left);
                set(b_right, o.b_right);
            }
            ModelConfig::Tabulated { .. } => {
                if o.sigma0.is_some() || o.b.is_some() || o.gamma.is_some() || o.rho.is_some() {
                    return misfit("model parameter");
                }
            }
        }
        Ok(())
    }

    pub fn family(&self) -> &'static str {
        match self {
            ModelConfig::ShiftedLognormal { .. } => "shifted_lognormal",
            ModelConfig::QuadraticSabr { .. } => "quadratic_sabr",
            ModelConfig::PiecewiseLinear { .. } => "piecewise_linear",
            ModelConfig::Tabulated { .. } => "tabulated",
        }
    }

    pub fn build(&self, s0: f64, base: &Path) -> anyhow::Result<LocalVolModel> {
        let built = match self {
            ModelConfig::ShiftedLognormal { sigma0, b, .. } => LocalVolModel::shifted_lognormal(*sigma0, *b, s0),
            ModelConfig::QuadraticSabr { sigma0, gamma, rho, .. } => {
                LocalVolModel::quadratic_sabr(*sigma0, *gamma, *rho, s0)
            }
            ModelConfig::PiecewiseLinear { sigma0, b_left, b_right, .. } => {
                LocalVolModel::piecewise_linear(*sigma0, *b_left, *b_right, s0)
            }
            ModelConfig::Tabulated { path, .. } => {
                let full = base.join(path);
                let text = std::fs::read_to_string(&full)
                    .map_err(|e| ConfigError(format!("model.path {}: {e}", full.display())))?;
                LocalVolModel::tabulated_from_csv(&text)
            }
        };
        built.map_err(|e| ConfigError(format!("model ({}): {e}", self.family())).into())
    }
}

fn set(field: &mut f64, v: Option<f64>) {
    if let Some(v) = v {
        *field = v;
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    pub s0: f64,
    #[serde(default)]
    pub mu0: f64,
    #[serde(default)]
    pub mu1: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum StrikeConfig {
    List(StrikeList),
    Range(StrikeRange),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrikeList {
    list: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrikeRange {
    min: f64,
    max: f64,
    count: usize,
}

impl StrikeConfig {
    pub fn values(&self) -> anyhow::Result<Vec<f64>> {
        let v = match self {
            StrikeConfig::List(StrikeList { list }) => list.clone(),
            StrikeConfig::Range(StrikeRange { min, max, count }) => {
                if *count < 2 || !(max > min) {
                    return config_err("strikes: range needs count >= 2 and max > min");
                }
                (0..*count).map(|i| min + (max - min) * i as f64 / (*count - 1) as f64).collect()
            }
        };
        if v.is_empty() {
            return config_err("strikes: list is empty");
        }
        if v.iter().any(|k| !k.is_finite()) {
            return config_err("strikes: values must be finite");
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Asympt0,
    Asympt1,
    Asympt2,
    Pde,
    Mc,
    Exact,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Asympt0 => "asympt0",
            Method::Asympt1 => "asympt1",
            Method::Asympt2 => "asympt2",
            Method::Pde => "pde",
            Method::Mc => "mc",
            Method::Exact => "exact",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub path: Option<PathBuf>,
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SqrtTConfig {
    pub t_min: f64,
    pub t_max: f64,
    pub count: usize,
}

impl Default for SqrtTConfig {
    fn default() -> Self {
        Self { t_min: 1.0 / 256.0, t_max: 0.25, count: 7 }
    }
}

/// One model or a list of labelled models.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Models {
    One(ModelConfig),
    Many(Vec<ModelConfig>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: Models,
    pub market: MarketConfig,
    #[serde(default)]
    pub strikes: Option<StrikeConfig>,
    #[serde(default)]
    pub maturities: Vec<f64>,
    #[serde(default)]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub output: Option<OutputConfig>,
    #[serde(default)]
    pub pde: Option<PdeGrid>,
    #[serde(default)]
    pub mc: Option<McSpec>,
    #[serde(default)]
    pub sqrt_t: Option<SqrtTConfig>,
}

/// A config with overrides applied and models built.
pub struct Experiment {
    pub models: Vec<(String, LocalVolModel, ModelConfig)>,
    pub setup: MarketSetup,
    pub raw: ExperimentConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
    }

    pub fn models(&self) -> Vec<ModelConfig> {
        match &self.model {
            Models::One(m) => vec![m.clone()],
            Models::Many(v) => v.clone(),
        }
    }

    pub fn build(mut self, o: &Overrides, base: &Path) -> anyhow::Result<Experiment> {
        set(&mut self.market.s0, o.s0);
        set(&mut self.market.mu0, o.mu0);
        set(&mut self.market.mu1, o.mu1);
        let setup = MarketSetup::new(self.market.s0, self.market.mu0, self.market.mu1)
            .map_err(|e| ConfigError(format!("market: {e}")))?;
        let mut cfgs = self.models();
        if cfgs.is_empty() {
            return config_err("model: at least one model is required");
        }
        let many = cfgs.len() > 1;
        let mut models = Vec::with_capacity(cfgs.len());
        for (i, c) in cfgs.iter_mut().enumerate() {
            c.apply(o)?;
            let m = c.build(setup.s0, base)?;
            let label = match (c.label(), many) {
                (Some(l), _) => l.to_string(),
                (None, true) => format!("model{}", i + 1),
                (None, false) => String::new(),
            };
            models.push((label, m, c.clone()));
        }
        if let Some(g) = &self.pde {
            g.validate().map_err(|e| ConfigError(format!("pde: {e}")))?;
        }
        if let Some(m) = &self.mc {
            m.validate().map_err(|e| ConfigError(format!("mc: {e}")))?;
        }
        Ok(Experiment { models, setup, raw: self })
    }
}

impl Experiment {
    pub fn maturities(&self) -> anyhow::Result<Vec<f64>> {
        let t = &self.raw.maturities;
        if t.is_empty() {
            return config_err("maturities: at least one maturity is required");
        }
        if t.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return config_err("maturities: values must be positive");
        }
        Ok(t.clone())
    }

    pub fn strikes(&self) -> anyhow::Result<Vec<f64>> {
        let Some(s) = &self.raw.strikes else {
            return config_err("strikes: missing (give `list` or `min`, `max`, `count`)");
        };
        let ks = s.values()?;
        for (label, m, _) in &self.models {
            let (lo, hi) = m.positivity_domain();
            if let Some(k) = ks.iter().find(|&&k| !(k > lo && k < hi)) {
                return config_err(format!(
                    "strikes: {k} lies outside the positivity domain ({lo}, {hi}) of model {label}"
                ));
            }
        }
        Ok(ks)
    }

    pub fn methods(&self) -> anyhow::Result<Vec<Method>> {
        if self.raw.methods.is_empty() {
            return config_err("methods: at least one method is required");
        }
        Ok(self.raw.methods.clone())
    }
}

//! Smile containers shared by the expansion, the PDE and the CLI.

use serde::{Deserialize, Serialize};

/// Which approximation produced a vol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderTag {
    /// Leading order, `sigma_0(K)`.
    Leading,
    /// Through `O(T)`.
    First,
    /// Through `O(T^2)`.
    Second,
    /// Exact or numerically exact (closed form, PDE, Monte Carlo).
    Exact,
}

impl OrderTag {
    pub fn from_order(order: usize) -> Option<Self> {
        match order {
            0 => Some(OrderTag::Leading),
            1 => Some(OrderTag::First),
            2 => Some(OrderTag::Second),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmileFlag {
    Ok,
    LowConfidence,
    Clamped,
}

impl SmileFlag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SmileFlag::Ok => "ok",
            SmileFlag::LowConfidence => "low_confidence",
            SmileFlag::Clamped => "clamped",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmilePoint {
    pub strike: f64,
    pub maturity: f64,
    pub sigma_n: f64,
    pub order: OrderTag,
    pub flag: SmileFlag,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Smile {
    pub points: Vec<SmilePoint>,
}

impl Smile {
    pub fn strikes(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.strike)
    }

    pub fn vols(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.sigma_n)
    }
}
